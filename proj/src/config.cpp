#include "gbtsam/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "gbtsam/error.hpp"

namespace gbtsam {

using nlohmann::json;

namespace {

bool is_non_negative_integer(json const& v) {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

// Reads typed fields out of one JSON object and rejects leftovers.
class Section {
  public:
    Section(json const& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) {
            throw ConfigError(where() + " must be an object");
        }
    }

    void size(char const* key, std::size_t& out) {
        if (auto const* v = take(key)) {
            if (!is_non_negative_integer(*v)) {
                throw ConfigError(where(key) + " must be a non-negative integer");
            }
            out = v->get<std::size_t>();
        }
    }
    void u64(char const* key, std::uint64_t& out) {
        if (auto const* v = take(key)) {
            if (!is_non_negative_integer(*v)) {
                throw ConfigError(where(key) + " must be a non-negative integer");
            }
            out = v->get<std::uint64_t>();
        }
    }
    void integer(char const* key, int& out) {
        if (auto const* v = take(key)) {
            if (!v->is_number_integer()) {
                throw ConfigError(where(key) + " must be an integer");
            }
            out = v->get<int>();
        }
    }
    void number(char const* key, double& out) {
        if (auto const* v = take(key)) {
            if (!v->is_number()) {
                throw ConfigError(where(key) + " must be a number");
            }
            out = v->get<double>();
        }
    }
    void boolean(char const* key, bool& out) {
        if (auto const* v = take(key)) {
            if (!v->is_boolean()) {
                throw ConfigError(where(key) + " must be true or false");
            }
            out = v->get<bool>();
        }
    }
    void string(char const* key, std::string& out) {
        if (auto const* v = take(key)) {
            if (!v->is_string()) {
                throw ConfigError(where(key) + " must be a string");
            }
            out = v->get<std::string>();
        }
    }
    void path(char const* key, std::optional<std::filesystem::path>& out) {
        if (auto const* v = take(key)) {
            if (v->is_null()) {
                out.reset();
                return;
            }
            if (!v->is_string()) {
                throw ConfigError(where(key) + " must be a path string or null");
            }
            out = v->get<std::string>();
        }
    }
    json const* take(char const* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }
    void finish() const {
        for (auto const& [key, value] : j_.items()) {
            if (!seen_.contains(key)) {
                throw ConfigError("unknown key " + where(key.c_str()));
            }
        }
    }
    std::string where(char const* key = nullptr) const {
        std::string out = path_.empty() ? std::string("config") : path_;
        if (key != nullptr) {
            out = path_.empty() ? std::string(key) : path_ + "." + key;
        }
        return out;
    }

  private:
    json const& j_;
    std::string path_;
    std::set<std::string> seen_;
};

template <class F>
void section(Section& parent, char const* key, F&& fill) {
    if (auto const* v = parent.take(key)) {
        Section s(*v, key);
        fill(s);
        s.finish();
    }
}

std::optional<std::string> opt_path_json(std::optional<std::filesystem::path> const& p) {
    if (p) {
        return p->string();
    }
    return std::nullopt;
}

json path_or_null(std::optional<std::filesystem::path> const& p) {
    auto s = opt_path_json(p);
    return s ? json(*s) : json(nullptr);
}

} // namespace

RunConfig parse_run_config(json const& j) {
    RunConfig c;
    Section root(j, "");
    std::string run_dir = c.run_dir.string();
    root.string("run_dir", run_dir);
    c.run_dir = run_dir;
    if (auto const* m = root.take("model")) {
        c.model = encoder_config_from_json(*m);
    }
    section(root, "train", [&](Section& s) {
        std::string strategy = to_string(c.train.strategy);
        std::string slices = "fixed_gap";
        std::string regime = c.train.regime.to_string();
        s.string("strategy", strategy);
        s.size("batch_size", c.train.batch_size);
        s.number("learning_rate", c.train.learning_rate);
        s.size("steps_step1", c.train.steps_step1);
        s.size("steps_step2", c.train.steps_step2);
        s.u64("seed", c.train.seed);
        s.size("delta", c.train.delta);
        s.string("slice_strategy", slices);
        s.string("regime", regime);
        s.number("clip_norm", c.train.clip_norm);
        s.number("adam_beta1", c.train.adam_beta1);
        s.number("adam_beta2", c.train.adam_beta2);
        s.number("adam_eps", c.train.adam_eps);
        s.boolean("train_decoder", c.train.train_decoder);
        s.string("phase", c.train_phase);
        s.path("base_checkpoint", c.base_checkpoint);
        s.path("step1_checkpoint", c.step1_checkpoint);
        c.train.strategy = strategy_from_string(strategy);
        if (slices == "fixed_gap") {
            c.train.slice_strategy = SliceStrategy::fixed_gap;
        } else if (slices == "random") {
            c.train.slice_strategy = SliceStrategy::random;
        } else {
            throw ConfigError("train.slice_strategy must be fixed_gap or random, got \"" + slices + "\"");
        }
        c.train.regime = PromptRegime::parse(regime);
        if (c.train_phase != "both" && c.train_phase != "step1" && c.train_phase != "step2") {
            throw ConfigError("train.phase must be step1, step2 or both, got \"" + c.train_phase + "\"");
        }
    });
    section(root, "pretrain", [&](Section& s) {
        s.size("steps", c.pretrain.steps);
        s.size("scenes", c.pretrain.scenes);
        s.u64("seed", c.pretrain.seed);
        s.number("learning_rate", c.pretrain.learning_rate);
        s.size("batch_size", c.pretrain.batch_size);
    });
    section(root, "data", [&](Section& s) {
        s.size("height", c.data.height);
        s.size("width", c.data.width);
        s.size("depth", c.data.depth);
        s.path("manifest", c.data.manifest);
        s.number("train_fraction", c.data.train_fraction);
        s.string("modality_subset", c.data.modality_subset);
        if (auto const* v = s.take("phantoms")) {
            if (!v->is_array()) {
                throw ConfigError("data.phantoms must be an array");
            }
            for (std::size_t i = 0; i < v->size(); ++i) {
                Section p((*v)[i], "data.phantoms[" + std::to_string(i) + "]");
                PhantomGroup g;
                std::string domain = to_string(g.domain);
                p.string("domain", domain);
                p.size("count", g.count);
                p.u64("seed", g.seed);
                p.finish();
                g.domain = domain_from_string(domain);
                c.data.phantoms.push_back(g);
            }
        }
        if (auto const* v = s.take("train_domains")) {
            if (!v->is_array()) {
                throw ConfigError("data.train_domains must be an array of domain tags");
            }
            c.data.train_domains.clear();
            for (auto const& d : *v) {
                if (!d.is_string()) {
                    throw ConfigError("data.train_domains must be an array of domain tags");
                }
                c.data.train_domains.push_back(domain_from_string(d.get<std::string>()));
            }
        }
        if (!(c.data.train_fraction >= 0.0 && c.data.train_fraction <= 1.0)) {
            throw ConfigError("data.train_fraction must lie in [0, 1]");
        }
        (void)ModalitySubset::parse(c.data.modality_subset);
    });
    section(root, "eval", [&](Section& s) {
        s.string("regime", c.eval.regime);
        s.number("threshold", c.eval.threshold);
        s.u64("seed", c.eval.seed);
        s.size("threads", c.eval.threads);
        s.size("seeds", c.eval.seeds);
        (void)PromptRegime::parse(c.eval.regime);
        if (!(c.eval.threshold >= 0.0 && c.eval.threshold <= 1.0)) {
            throw ConfigError("eval.threshold must lie in [0, 1]");
        }
        if (c.eval.seeds < 1) {
            throw ConfigError("eval.seeds must be >= 1");
        }
    });
    section(root, "serve", [&](Section& s) {
        s.string("host", c.serve.host);
        s.integer("port", c.serve.port);
        s.size("threads", c.serve.threads);
        if (c.serve.port < 0 || c.serve.port > 65535) {
            throw ConfigError("serve.port must lie in [0, 65535]");
        }
    });
    root.finish();
    c.train.validate();
    return c;
}

json run_config_to_json(RunConfig const& c) {
    json phantoms = json::array();
    for (auto const& g : c.data.phantoms) {
        phantoms.push_back(json{{"domain", to_string(g.domain)}, {"count", g.count}, {"seed", g.seed}});
    }
    json domains = json::array();
    for (Domain d : c.data.train_domains) {
        domains.push_back(to_string(d));
    }
    return json{
        {"run_dir", c.run_dir.string()},
        {"model", encoder_config_to_json(c.model)},
        {"train",
         {{"strategy", to_string(c.train.strategy)},
          {"batch_size", c.train.batch_size},
          {"learning_rate", c.train.learning_rate},
          {"steps_step1", c.train.steps_step1},
          {"steps_step2", c.train.steps_step2},
          {"seed", c.train.seed},
          {"delta", c.train.delta},
          {"slice_strategy", c.train.slice_strategy == SliceStrategy::fixed_gap ? "fixed_gap" : "random"},
          {"regime", c.train.regime.to_string()},
          {"clip_norm", c.train.clip_norm},
          {"adam_beta1", c.train.adam_beta1},
          {"adam_beta2", c.train.adam_beta2},
          {"adam_eps", c.train.adam_eps},
          {"train_decoder", c.train.train_decoder},
          {"phase", c.train_phase},
          {"base_checkpoint", path_or_null(c.base_checkpoint)},
          {"step1_checkpoint", path_or_null(c.step1_checkpoint)}}},
        {"pretrain",
         {{"steps", c.pretrain.steps},
          {"scenes", c.pretrain.scenes},
          {"seed", c.pretrain.seed},
          {"learning_rate", c.pretrain.learning_rate},
          {"batch_size", c.pretrain.batch_size}}},
        {"data",
         {{"height", c.data.height},
          {"width", c.data.width},
          {"depth", c.data.depth},
          {"phantoms", phantoms},
          {"manifest", path_or_null(c.data.manifest)},
          {"train_fraction", c.data.train_fraction},
          {"train_domains", domains},
          {"modality_subset", c.data.modality_subset}}},
        {"eval",
         {{"regime", c.eval.regime},
          {"threshold", c.eval.threshold},
          {"seed", c.eval.seed},
          {"threads", c.eval.threads},
          {"seeds", c.eval.seeds}}},
        {"serve", {{"host", c.serve.host}, {"port", c.serve.port}, {"threads", c.serve.threads}}}};
}

void apply_override(json& doc, std::string const& assignment) {
    auto const eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("override \"" + assignment + "\" must look like a.b=value");
    }
    std::string const key = assignment.substr(0, eq);
    std::string const raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (json::parse_error const&) {
        value = raw;
    }
    json* node = &doc;
    std::size_t start = 0;
    while (true) {
        auto const dot = key.find('.', start);
        std::string const part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) {
            throw ConfigError("override key \"" + key + "\" has an empty component");
        }
        if (!node->is_object()) {
            throw ConfigError("override key \"" + key + "\" descends into a non-object");
        }
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        node = &(*node)[part];
        if (node->is_null()) {
            *node = json::object();
        }
        start = dot + 1;
    }
}

RunConfig load_run_config(std::filesystem::path const& path, std::vector<std::string> const& overrides) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config " + path.string());
    }
    json doc;
    try {
        doc = json::parse(in);
    } catch (json::parse_error const& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    for (auto const& o : overrides) {
        apply_override(doc, o);
    }
    auto config = parse_run_config(doc);
    // Relative data paths are resolved against the config file.
    if (config.data.manifest && config.data.manifest->is_relative()) {
        config.data.manifest = path.parent_path() / *config.data.manifest;
    }
    return config;
}

// ---------------------------------------------------------------------------
// Datasets

namespace {

Sample prepare(Volume const& raw, SegMask mask, Domain domain, ModalitySubset const& subset) {
    return Sample{apply_modality_subset(normalize(raw), subset), std::move(mask), domain, false};
}

void mark_training(std::vector<Sample>& samples, DataConfig const& data) {
    std::map<Domain, std::vector<std::size_t>> by_domain;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        by_domain[samples[i].domain].push_back(i);
    }
    for (auto const& [domain, idx] : by_domain) {
        bool const trains =
            std::find(data.train_domains.begin(), data.train_domains.end(), domain) != data.train_domains.end();
        if (!trains) {
            continue;
        }
        auto const n = static_cast<std::size_t>(std::floor(data.train_fraction * static_cast<double>(idx.size())));
        for (std::size_t k = 0; k < n; ++k) {
            samples[idx[k]].train = true;
        }
    }
}

} // namespace

std::vector<Sample> build_dataset(DataConfig const& data) {
    auto const subset = ModalitySubset::parse(data.modality_subset);
    std::vector<Sample> out;
    if (data.manifest) {
        auto const dir = data.manifest->parent_path();
        for (auto const& e : read_manifest(*data.manifest)) {
            out.push_back(prepare(load_volume(dir / e.volume), load_mask(dir / e.mask), e.domain, subset));
        }
    } else {
        for (auto const& g : data.phantoms) {
            for (std::size_t i = 0; i < g.count; ++i) {
                auto ph = generate_phantom(
                    PhantomSpec::for_domain(g.domain, data.height, data.width, data.depth, g.seed + i));
                out.push_back(prepare(ph.volume, std::move(ph.mask), g.domain, subset));
            }
        }
    }
    mark_training(out, data);
    return out;
}

std::vector<TrainingSample> training_split(std::vector<Sample> const& samples, DataConfig const&) {
    std::vector<TrainingSample> out;
    for (auto const& s : samples) {
        if (s.train) {
            out.push_back(TrainingSample{s.volume, s.mask});
        }
    }
    return out;
}

std::vector<EvalSample> evaluation_split(std::vector<Sample> const& samples) {
    std::vector<EvalSample> out;
    for (auto const& s : samples) {
        if (!s.train) {
            out.push_back(EvalSample{s.volume, s.mask, s.domain});
        }
    }
    return out;
}

std::vector<ManifestEntry> synthesize(DataConfig const& data, std::filesystem::path const& out_dir) {
    std::filesystem::create_directories(out_dir);
    std::vector<ManifestEntry> entries;
    for (auto const& g : data.phantoms) {
        for (std::size_t i = 0; i < g.count; ++i) {
            auto const seed = g.seed + i;
            auto ph = generate_phantom(PhantomSpec::for_domain(g.domain, data.height, data.width, data.depth, seed));
            ManifestEntry e{ph.volume.voxel_id(), g.domain, seed, ph.volume.voxel_id(),
                            ph.volume.voxel_id() + "_mask"};
            save_volume(ph.volume, out_dir / e.volume);
            save_mask(ph.mask, out_dir / e.mask);
            entries.push_back(std::move(e));
        }
    }
    json manifest{{"count", entries.size()}, {"volumes", json::array()}};
    for (auto const& e : entries) {
        manifest["volumes"].push_back(json{{"voxel_id", e.voxel_id},
                                           {"domain", to_string(e.domain)},
                                           {"seed", e.seed},
                                           {"volume", e.volume},
                                           {"mask", e.mask}});
    }
    std::ofstream(out_dir / "manifest.json") << manifest.dump(2) << "\n";
    return entries;
}

std::vector<ManifestEntry> read_manifest(std::filesystem::path const& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open manifest " + path.string());
    }
    std::vector<ManifestEntry> out;
    try {
        auto const j = json::parse(in);
        for (auto const& v : j.at("volumes")) {
            out.push_back(ManifestEntry{v.at("voxel_id").get<std::string>(),
                                        domain_from_string(v.at("domain").get<std::string>()),
                                        v.value("seed", std::uint64_t{0}), v.at("volume").get<std::string>(),
                                        v.at("mask").get<std::string>()});
        }
    } catch (json::exception const& e) {
        throw FormatError("malformed manifest " + path.string() + ": " + e.what());
    }
    return out;
}

PhaseSummary pretrain_model(SamModel& model, PretrainConfig const& config, MetricSink const& sink) {
    auto const& mc = model.config();
    std::vector<TrainingSample> scenes;
    scenes.reserve(config.scenes);
    for (std::size_t i = 0; i < config.scenes; ++i) {
        SceneSpec spec;
        spec.height = mc.image_height;
        spec.width = mc.image_width;
        spec.seed = config.seed * 1000003ULL + i;
        auto ph = generate_scene(spec);
        scenes.push_back(TrainingSample{normalize(ph.volume), std::move(ph.mask)});
    }
    TrainConfig tc;
    tc.learning_rate = config.learning_rate;
    tc.batch_size = config.batch_size;
    tc.seed = config.seed;
    tc.regime = PromptRegime::parse("BB-100-100");
    return run_phase(model, Phase::pretrain, tc, scenes, config.steps, sink);
}

} // namespace gbtsam
