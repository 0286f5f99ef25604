#include "gbtsam/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "gbtsam/error.hpp"

namespace gbtsam {

using nlohmann::json;

std::string to_string(Phase p) {
    switch (p) {
    case Phase::pretrain:
        return "pretrain";
    case Phase::step1:
        return "step1";
    case Phase::step2:
        return "step2";
    }
    return "step1";
}

Phase phase_from_string(std::string const& s) {
    if (s == "pretrain") {
        return Phase::pretrain;
    }
    if (s == "step1") {
        return Phase::step1;
    }
    if (s == "step2") {
        return Phase::step2;
    }
    throw ConfigError("unknown phase \"" + s + "\" (expected step1|step2)");
}

std::string to_string(Strategy s) {
    switch (s) {
    case Strategy::two_step:
        return "two_step";
    case Strategy::one_step:
        return "one_step";
    case Strategy::patch_embed_only:
        return "patch_embed_only";
    }
    return "two_step";
}

Strategy strategy_from_string(std::string const& s) {
    if (s == "two_step") {
        return Strategy::two_step;
    }
    if (s == "one_step") {
        return Strategy::one_step;
    }
    if (s == "patch_embed_only") {
        return Strategy::patch_embed_only;
    }
    throw ConfigError("unknown strategy \"" + s + "\" (expected two_step|one_step|patch_embed_only)");
}

PromptRegime PromptRegime::parse(std::string const& text) {
    PromptRegime r;
    if (text == "1p") {
        r.kind = Kind::point;
        return r;
    }
    auto bad = [&] {
        return ConfigError("prompt regime must be \"1p\" or \"BB-<train>-<test>\" with percentages in (0,100], got \"" +
                           text + "\"");
    };
    if (text.rfind("BB-", 0) != 0) {
        throw bad();
    }
    auto const dash = text.find('-', 3);
    if (dash == std::string::npos) {
        throw bad();
    }
    auto parse_pct = [&](std::string_view part) {
        int value = 0;
        auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), value);
        if (ec != std::errc() || ptr != part.data() + part.size() || value <= 0 || value > 100) {
            throw bad();
        }
        return value / 100.0;
    };
    std::string_view const view(text);
    r.kind = Kind::box;
    r.train_coverage = parse_pct(view.substr(3, dash - 3));
    r.test_coverage = parse_pct(view.substr(dash + 1));
    return r;
}

std::string PromptRegime::to_string() const {
    if (kind == Kind::point) {
        return "1p";
    }
    return "BB-" + std::to_string(static_cast<int>(std::lround(train_coverage * 100))) + "-" +
           std::to_string(static_cast<int>(std::lround(test_coverage * 100)));
}

void TrainConfig::validate() const {
    if (batch_size < 1) {
        throw ConfigError("batch size must be >= 1");
    }
    if (!(learning_rate > 0.0)) {
        throw ConfigError("learning rate must be > 0");
    }
    if (delta < 1) {
        throw ConfigError("slice gap delta must be >= 1");
    }
    if (!(clip_norm > 0.0)) {
        throw ConfigError("clip norm must be > 0");
    }
}

// ---------------------------------------------------------------------------
// Freeze plans

FreezePlan FreezePlan::empty() {
    FreezePlan plan;
    for (auto const& g : kParameterGroups) {
        plan.groups_[g] = false;
    }
    return plan;
}

FreezePlan FreezePlan::for_phase(Phase phase, bool train_decoder) {
    FreezePlan plan = empty();
    switch (phase) {
    case Phase::pretrain:
        plan.groups_["patch_embed"] = true;
        plan.groups_["base"] = true;
        break;
    case Phase::step1:
        plan.groups_["patch_embed"] = true;
        break;
    case Phase::step2:
        plan.groups_["patch_embed"] = true;
        plan.groups_["lora"] = true;
        plan.groups_["depth"] = true;
        if (train_decoder) {
            plan.groups_["base.decoder"] = true;
            plan.groups_["base.prompt"] = true;
        }
        break;
    }
    return plan;
}

bool FreezePlan::is_trainable(std::string const& name) const {
    auto const group = parameter_group(name);
    if (std::find(kParameterGroups.begin(), kParameterGroups.end(), group) == kParameterGroups.end()) {
        throw Error("unknown parameter group for \"" + name + "\"");
    }
    std::size_t best_len = 0;
    bool flag = false;
    for (auto const& [key, on] : groups_) {
        bool const match = name == key || name.rfind(key + ".", 0) == 0;
        if (match && key.size() >= best_len) {
            best_len = key.size();
            flag = on;
        }
    }
    return flag;
}

FreezePlan build_freeze_plan(Phase phase, ParameterStore const& params, bool train_decoder) {
    FreezePlan plan = FreezePlan::for_phase(phase, train_decoder);
    for (auto const& [name, var] : params.entries()) {
        (void)plan.is_trainable(name);
    }
    return plan;
}

std::size_t count_trainable_params(ParameterStore const& params, FreezePlan const& plan) {
    std::size_t total = 0;
    for (auto const& [name, var] : params.entries()) {
        if (plan.is_trainable(name)) {
            total += var.size();
        }
    }
    return total;
}

std::size_t count_trainable_params(ParameterStore const& params, Phase phase) {
    return count_trainable_params(params, build_freeze_plan(phase, params));
}

void apply_freeze_plan(ParameterStore const& params, FreezePlan const& plan) {
    for (auto const& [name, var] : params.entries()) {
        ag::Var v = var;
        v.set_requires_grad(plan.is_trainable(name));
    }
}

void freeze_all(ParameterStore const& params) {
    for (auto const& [name, var] : params.entries()) {
        ag::Var v = var;
        v.set_requires_grad(false);
    }
}

ParameterSnapshot snapshot(ParameterStore const& params) {
    ParameterSnapshot out;
    for (auto const& [name, var] : params.entries()) {
        out.emplace(name, std::vector<double>(var.value().begin(), var.value().end()));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Optimisation

void Adam::step(ParameterStore const& params) {
    ++t_;
    double const bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double const bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto const& [name, var] : params.entries()) {
        if (!var.requires_grad()) {
            continue;
        }
        auto& st = state_[name];
        if (st.m.empty()) {
            st.m.assign(var.size(), 0.0);
            st.v.assign(var.size(), 0.0);
        }
        ag::Var p = var;
        auto value = p.mutable_value();
        auto grad = var.grad();
        for (std::size_t i = 0; i < value.size(); ++i) {
            st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * grad[i];
            st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * grad[i] * grad[i];
            double const mhat = st.m[i] / bc1;
            double const vhat = st.v[i] / bc2;
            value[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

double clip_grad_norm(ParameterStore const& params, double max_norm) {
    double sq = 0.0;
    for (auto const& [name, var] : params.entries()) {
        if (var.requires_grad()) {
            for (double g : var.grad()) {
                sq += g * g;
            }
        }
    }
    double const norm = std::sqrt(sq);
    if (norm > max_norm) {
        double const s = max_norm / norm;
        for (auto const& [name, var] : params.entries()) {
            if (var.requires_grad()) {
                ag::Var v = var;
                for (auto& g : v.mutable_grad()) {
                    g *= s;
                }
            }
        }
    }
    return norm;
}

json MetricRecord::to_json() const {
    return json{{"step", step},
                {"phase", phase},
                {"loss", loss},
                {"lr", lr},
                {"trainable_param_count", trainable_param_count}};
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

std::size_t foreground(std::span<float const> s) {
    return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](float v) { return v >= 0.5f; }));
}

} // namespace

std::optional<GroupExample> draw_example(TrainingSample const& sample, TrainConfig const& config,
                                         double coverage, Rng& rng, bool* shallow) {
    std::size_t const D = sample.volume.depth();
    std::size_t const needed = config.slice_strategy == SliceStrategy::fixed_gap ? 3 * config.delta + 1 : kGroupSize;
    if (shallow != nullptr) {
        *shallow = D < needed;
    }
    if (D < needed) {
        return std::nullopt;
    }
    std::size_t const H = sample.volume.height();
    std::size_t const W = sample.volume.width();
    // Prefer groups whose prompt slice shows tumor; give up after a few draws.
    for (int attempt = 0; attempt < 16; ++attempt) {
        auto const indices = select_slices(D, config.delta, rng, config.slice_strategy);
        std::size_t ref = 1;
        if (foreground(sample.mask.slice(indices[1])) == 0) {
            std::size_t best = 0;
            for (std::size_t g = 0; g < kGroupSize; ++g) {
                std::size_t const fg = foreground(sample.mask.slice(indices[g]));
                if (fg > best) {
                    best = fg;
                    ref = g;
                }
            }
            if (best == 0) {
                continue;
            }
        }
        auto const mask_slice = sample.mask.slice(indices[ref]);
        Prompt prompt;
        try {
            if (config.regime.kind == PromptRegime::Kind::point) {
                auto pt = make_point_prompt(mask_slice, H, W, rng);
                pt.slice_index = indices[ref];
                prompt = pt;
            } else {
                auto box = make_box_prompt(mask_slice, H, W, coverage, rng);
                box.slice_index = indices[ref];
                prompt = box;
            }
        } catch (Error const&) {
            continue;
        }
        GroupExample ex{extract_group(sample.volume, indices), {}, prompt};
        ex.targets.reserve(kGroupSize * H * W);
        for (std::size_t d : indices) {
            auto s = sample.mask.slice(d);
            ex.targets.insert(ex.targets.end(), s.begin(), s.end());
        }
        return ex;
    }
    return std::nullopt;
}

PhaseSummary run_phase(SamModel& model, Phase phase, TrainConfig const& config,
                       std::span<TrainingSample const> data, std::size_t steps, MetricSink const& sink) {
    config.validate();
    if (data.empty()) {
        throw Error("training dataset is empty");
    }
    auto const& params = model.parameters();
    FreezePlan const plan = build_freeze_plan(phase, params, config.train_decoder);
    std::size_t const trainable = count_trainable_params(params, plan);
    apply_freeze_plan(params, plan);

    // Distinct stream per phase so step 2 does not replay step 1's draws.
    Rng rng(config.seed * 1000003ULL + static_cast<std::uint64_t>(phase) + 1);
    std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
    Adam adam(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps);
    double const coverage = config.regime.train_coverage;

    PhaseSummary summary;
    std::size_t consecutive_failures = 0;
    for (std::size_t step = 0; step < steps; ++step) {
        for (auto const& [name, var] : params.entries()) {
            if (var.requires_grad()) {
                ag::Var(var).zero_grad();
            }
        }
        double batch_loss = 0.0;
        std::vector<std::string> ids;
        std::size_t filled = 0;
        while (filled < config.batch_size) {
            auto const& sample = data[pick(rng)];
            bool shallow = false;
            auto ex = draw_example(sample, config, coverage, rng, &shallow);
            if (!ex) {
                if (shallow) {
                    ++summary.skipped_shallow;
                    std::cerr << "warning: skipping " << sample.volume.voxel_id()
                              << ": too shallow for delta=" << config.delta << "\n";
                } else {
                    ++summary.skipped_no_prompt;
                }
                if (++consecutive_failures > 1000) {
                    throw Error("no usable training volumes: every draw was too shallow or tumor-free");
                }
                continue;
            }
            consecutive_failures = 0;
            auto logits = model.forward(ex->group, ex->prompt);
            auto loss = bce_loss(ex->targets, logits);
            batch_loss += loss.item();
            ids.push_back(sample.volume.voxel_id());
            ag::backward(ag::scale(loss, 1.0 / static_cast<double>(config.batch_size)));
            ++filled;
        }
        batch_loss /= static_cast<double>(config.batch_size);
        if (!std::isfinite(batch_loss)) {
            std::ostringstream msg;
            msg << "non-finite loss at " << to_string(phase) << " step " << step << " (volumes:";
            for (auto const& id : ids) {
                msg << " " << id;
            }
            msg << ")";
            freeze_all(params);
            throw TrainingAborted(msg.str());
        }
        clip_grad_norm(params, config.clip_norm);
        adam.step(params);
        MetricRecord rec{step, to_string(phase), batch_loss, config.learning_rate, trainable};
        if (sink) {
            sink(rec);
        }
        summary.records.push_back(rec);
    }
    freeze_all(params);
    return summary;
}

TrainOutcome train(TrainRequest const& request, std::span<TrainingSample const> data) {
    request.train.validate();
    std::filesystem::create_directories(request.run_dir);
    std::ofstream log(request.run_dir / "metrics.ndjson", std::ios::trunc);
    if (!log) {
        throw Error("cannot write metrics log under " + request.run_dir.string());
    }
    TrainOutcome outcome;
    auto sink = [&](MetricRecord const& rec) { log << rec.to_json().dump() << "\n"; };

    auto fresh_model = [&]() {
        if (request.base_checkpoint) {
            auto ck = load_checkpoint(*request.base_checkpoint);
            if (!(ck.model.config() == request.model)) {
                throw ConfigError("base checkpoint config does not match model config");
            }
            ck.model.reinitialize_patch_embed(request.train.seed + 17);
            return std::move(ck.model);
        }
        return SamModel(request.model);
    };
    auto run = [&](SamModel& model, Phase phase, std::size_t steps, std::string const& name) {
        auto summary = run_phase(model, phase, request.train, data, steps, sink);
        outcome.total_steps += summary.records.size();
        outcome.skipped_shallow += summary.skipped_shallow;
        outcome.skipped_no_prompt += summary.skipped_no_prompt;
        if (!summary.records.empty()) {
            outcome.final_loss = summary.records.back().loss;
        }
        auto const path = request.run_dir / (name + ".ckpt");
        json meta{{"phase", to_string(phase)},
                  {"strategy", to_string(request.train.strategy)},
                  {"steps", steps},
                  {"seed", request.train.seed},
                  {"regime", request.train.regime.to_string()},
                  {"delta", request.train.delta}};
        save_checkpoint(model, path, meta);
        outcome.checkpoints.push_back(path);
        return path;
    };

    switch (request.train.strategy) {
    case Strategy::patch_embed_only: {
        auto model = fresh_model();
        run(model, Phase::step1, request.train.steps_step1, "patch_embed_only");
        break;
    }
    case Strategy::one_step: {
        auto model = fresh_model();
        run(model, Phase::step2, request.train.steps_step2, "one_step");
        break;
    }
    case Strategy::two_step: {
        std::optional<std::filesystem::path> step1 = request.step1_checkpoint;
        if (request.phase == "step1" || request.phase == "both") {
            auto model = fresh_model();
            step1 = run(model, Phase::step1, request.train.steps_step1, "step1");
        } else if (request.phase != "step2") {
            throw ConfigError("train phase must be step1, step2 or both, got \"" + request.phase + "\"");
        }
        if (request.phase == "step2" || request.phase == "both") {
            if (!step1 || !std::filesystem::exists(*step1)) {
                throw ConfigError("missing phase-1 checkpoint");
            }
            // Phase 2 always starts from the persisted phase-1 weights.
            auto ck = load_checkpoint(*step1);
            run(ck.model, Phase::step2, request.train.steps_step2, "step2");
        }
        break;
    }
    }
    return outcome;
}

} // namespace gbtsam
