#include "gbtsam/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <sstream>
#include <thread>

#include "gbtsam/error.hpp"

namespace gbtsam {

using nlohmann::json;

namespace {

void require_binary(std::span<float const> m, char const* what) {
    for (float v : m) {
        if (v != 0.0f && v != 1.0f) {
            throw Error(std::string("dice: ") + what + " mask is not binary");
        }
    }
}

std::size_t area(std::span<float const> s) {
    return static_cast<std::size_t>(std::count(s.begin(), s.end(), 1.0f));
}

double sigmoid(double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

std::uint64_t mix(std::uint64_t seed, std::string const& id) {
    std::uint64_t h = seed ^ 0x9e3779b97f4a7c15ULL;
    for (char c : id) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace

double dice(std::span<float const> truth, std::span<float const> pred) {
    if (truth.size() != pred.size()) {
        throw Error("dice: shape mismatch (" + std::to_string(truth.size()) + " vs " +
                    std::to_string(pred.size()) + " voxels)");
    }
    require_binary(truth, "ground-truth");
    require_binary(pred, "predicted");
    std::size_t inter = 0, ny = 0, np = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        bool const y = truth[i] == 1.0f;
        bool const p = pred[i] == 1.0f;
        ny += y;
        np += p;
        inter += y && p;
    }
    if (ny + np == 0) {
        return 1.0;
    }
    return 2.0 * static_cast<double>(inter) / static_cast<double>(ny + np);
}

double dice(SegMask const& truth, SegMask const& pred) {
    if (truth.depth() != pred.depth() || truth.height() != pred.height() || truth.width() != pred.width()) {
        throw Error("dice: mask shapes differ");
    }
    return dice(truth.data(), pred.data());
}

double mean_unseen_dice(double ds2, double ds3, double ds4) {
    std::array<double, 3> const v{ds2, ds3, ds4};
    bool any_percent = false;
    for (double x : v) {
        if (!std::isfinite(x) || x < 0.0 || x > 100.0) {
            throw Error("mean_unseen_dice: score " + std::to_string(x) + " outside [0, 100]");
        }
        any_percent = any_percent || x > 1.0;
    }
    if (any_percent) {
        for (double x : v) {
            if (x > 0.0 && x <= 1.0) {
                throw Error("mean_unseen_dice: mixed scales (fractions and percentages)");
            }
        }
    }
    return (ds2 + ds3 + ds4) / 3.0;
}

SegMask binarize(SegMask const& prob, double threshold) {
    if (!(threshold >= 0.0 && threshold <= 1.0)) {
        throw Error("binarize: threshold " + std::to_string(threshold) + " outside [0, 1]");
    }
    std::vector<float> out(prob.data().size());
    std::transform(prob.data().begin(), prob.data().end(), out.begin(),
                   [&](float v) { return static_cast<double>(v) >= threshold ? 1.0f : 0.0f; });
    return SegMask(prob.depth(), prob.height(), prob.width(), MaskKind::binary, std::move(out),
                   prob.voxel_id());
}

std::vector<Window> plan_windows(std::size_t depth) {
    if (depth < 1) {
        throw Error("infer_volume: volume depth must be >= 1");
    }
    std::vector<Window> out;
    for (std::size_t start = 0; start < depth; start += kGroupSize) {
        Window w;
        w.valid = std::min(kGroupSize, depth - start);
        for (std::size_t g = 0; g < kGroupSize; ++g) {
            w.indices[g] = std::min(start + g, depth - 1);
        }
        out.push_back(w);
    }
    return out;
}

PromptSource ground_truth_prompts(SegMask const& truth, PromptRegime const& regime, std::uint64_t seed) {
    auto rng = std::make_shared<Rng>(mix(seed, truth.voxel_id()));
    auto mutex = std::make_shared<std::mutex>();
    return [&truth, regime, rng, mutex](Window const& w) -> std::optional<Prompt> {
        std::vector<std::pair<std::size_t, std::size_t>> ranked; // (area, depth)
        for (std::size_t g = 0; g < w.valid; ++g) {
            if (std::size_t const a = area(truth.slice(w.indices[g])); a > 0) {
                ranked.emplace_back(a, w.indices[g]);
            }
        }
        if (ranked.empty()) {
            return std::nullopt;
        }
        std::stable_sort(ranked.begin(), ranked.end(), [](auto const& a, auto const& b) { return a.first > b.first; });
        std::lock_guard lock(*mutex);
        std::size_t const H = truth.height();
        std::size_t const W = truth.width();
        if (regime.kind == PromptRegime::Kind::point) {
            auto pt = make_point_prompt(truth.slice(ranked.front().second), H, W, *rng);
            pt.slice_index = ranked.front().second;
            return pt;
        }
        // Tiny cross-sections may admit no box inside the coverage band;
        // try the next-largest slice, and as a last resort use the tight box.
        for (auto const& [a, d] : ranked) {
            try {
                auto box = make_box_prompt(truth.slice(d), H, W, regime.test_coverage, *rng);
                box.slice_index = d;
                return box;
            } catch (Error const&) {
            }
        }
        auto box = tight_box(truth.slice(ranked.front().second), H, W);
        box.slice_index = ranked.front().second;
        return box;
    };
}

PromptSource fixed_prompt(Prompt prompt) {
    return [prompt](Window const&) -> std::optional<Prompt> { return prompt; };
}

std::vector<float> infer_window(SamModel const& model, Volume const& volume, DepthIndices const& indices,
                                Prompt const& prompt) {
    auto const logits = model.forward(extract_group(volume, indices), prompt);
    std::vector<float> out(logits.size());
    std::transform(logits.value().begin(), logits.value().end(), out.begin(),
                   [](double x) { return static_cast<float>(sigmoid(x)); });
    return out;
}

SegMask infer_volume(SamModel const& model, Volume const& volume, PromptSource const& prompts) {
    std::size_t const D = volume.depth();
    std::size_t const plane = volume.height() * volume.width();
    std::vector<float> prob(D * plane, 0.0f);
    for (auto const& w : plan_windows(D)) {
        auto const prompt = prompts(w);
        if (!prompt) {
            continue;
        }
        auto const p = infer_window(model, volume, w.indices, *prompt);
        for (std::size_t g = 0; g < w.valid; ++g) {
            std::copy_n(p.begin() + static_cast<std::ptrdiff_t>(g * plane), plane,
                        prob.begin() + static_cast<std::ptrdiff_t>(w.indices[g] * plane));
        }
    }
    return SegMask(D, volume.height(), volume.width(), MaskKind::probability, std::move(prob),
                   volume.voxel_id());
}

json DiceReport::to_json() const {
    json j;
    json doms = json::object();
    for (auto const& [d, s] : domains) {
        doms[to_string(d)] = json{{"mean", s.mean}, {"std", s.std}, {"count", s.count}};
    }
    j["domains"] = doms;
    j["ds234"] = ds234 ? json(*ds234) : json(nullptr);
    j["volumes"] = json::array();
    for (auto const& v : volumes) {
        j["volumes"].push_back(json{{"voxel_id", v.voxel_id}, {"domain", to_string(v.domain)}, {"dice", v.dice}});
    }
    j["regime"] = regime;
    j["threshold"] = threshold;
    j["modality_subset"] = modality_subset;
    return j;
}

DiceReport DiceReport::from_json(json const& j) {
    DiceReport r;
    if (!j.is_object() || !j.contains("domains") || !j["domains"].is_object()) {
        throw FormatError("malformed Dice report: expected an object with a \"domains\" object");
    }
    try {
        for (auto const& [name, s] : j.at("domains").items()) {
            r.domains[domain_from_string(name)] =
                DomainScore{s.at("mean").get<double>(), s.at("std").get<double>(), s.at("count").get<std::size_t>()};
        }
        if (!j.at("ds234").is_null()) {
            r.ds234 = j.at("ds234").get<double>();
        }
        for (auto const& v : j.at("volumes")) {
            r.volumes.push_back(VolumeScore{v.at("voxel_id").get<std::string>(),
                                            domain_from_string(v.at("domain").get<std::string>()),
                                            v.at("dice").get<double>()});
        }
        r.regime = j.at("regime").get<std::string>();
        r.threshold = j.at("threshold").get<double>();
        r.modality_subset = j.value("modality_subset", std::string("all"));
    } catch (json::exception const& e) {
        throw FormatError(std::string("malformed Dice report: ") + e.what());
    } catch (ConfigError const& e) {
        throw FormatError(std::string("malformed Dice report: ") + e.what());
    }
    return r;
}

DiceReport aggregate(std::vector<VolumeScore> volumes, std::string regime, double threshold) {
    DiceReport r;
    r.regime = std::move(regime);
    r.threshold = threshold;
    std::map<Domain, std::vector<double>> by_domain;
    for (auto const& v : volumes) {
        by_domain[v.domain].push_back(v.dice);
    }
    for (auto const& [d, xs] : by_domain) {
        double sum = 0.0;
        for (double x : xs) {
            sum += x;
        }
        double const mean = sum / static_cast<double>(xs.size());
        double sq = 0.0;
        for (double x : xs) {
            sq += (x - mean) * (x - mean);
        }
        r.domains[d] = DomainScore{mean, std::sqrt(sq / static_cast<double>(xs.size())), xs.size()};
    }
    if (r.domains.contains(Domain::meningioma) && r.domains.contains(Domain::pediatric) &&
        r.domains.contains(Domain::ssa)) {
        r.ds234 = mean_unseen_dice(r.domains[Domain::meningioma].mean, r.domains[Domain::pediatric].mean,
                                   r.domains[Domain::ssa].mean);
    }
    r.volumes = std::move(volumes);
    return r;
}

DiceReport evaluate(SamModel const& model, std::span<EvalSample const> samples, EvalOptions const& options) {
    if (!(options.threshold >= 0.0 && options.threshold <= 1.0)) {
        throw ConfigError("eval threshold must lie in [0, 1]");
    }
    std::vector<VolumeScore> scores(samples.size());
    auto score_one = [&](std::size_t i) {
        auto const& s = samples[i];
        auto prob = infer_volume(model, s.volume, ground_truth_prompts(s.mask, options.regime, options.seed));
        scores[i] = VolumeScore{s.volume.voxel_id(), s.domain, dice(s.mask, binarize(prob, options.threshold))};
    };
    std::size_t const threads = std::max<std::size_t>(1, std::min(options.threads, samples.size()));
    if (threads == 1) {
        for (std::size_t i = 0; i < samples.size(); ++i) {
            score_one(i);
        }
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(threads);
        for (std::size_t t = 0; t < threads; ++t) {
            pool.emplace_back([&, t] {
                try {
                    for (std::size_t i = t; i < samples.size(); i += threads) {
                        score_one(i);
                    }
                } catch (...) {
                    errors[t] = std::current_exception();
                }
            });
        }
        for (auto& th : pool) {
            th.join();
        }
        for (auto const& e : errors) {
            if (e) {
                std::rethrow_exception(e);
            }
        }
    }
    return aggregate(std::move(scores), options.regime.to_string(), options.threshold);
}

std::string format_table(std::vector<DiceReport> const& reports) {
    if (reports.empty()) {
        return "(no reports)\n";
    }
    auto cell = [](std::vector<double> const& xs) {
        if (xs.empty()) {
            return std::string("     -      ");
        }
        double mean = 0.0;
        for (double x : xs) {
            mean += x;
        }
        mean /= static_cast<double>(xs.size());
        double sq = 0.0;
        for (double x : xs) {
            sq += (x - mean) * (x - mean);
        }
        double const sd = std::sqrt(sq / static_cast<double>(xs.size()));
        char buf[64];
        if (xs.size() == 1) {
            std::snprintf(buf, sizeof buf, "%12.2f", 100.0 * mean);
        } else {
            std::snprintf(buf, sizeof buf, "%6.2f+-%4.2f", 100.0 * mean, 100.0 * sd);
        }
        return std::string(buf);
    };
    std::ostringstream os;
    os << "regime " << reports.front().regime << ", threshold " << reports.front().threshold << ", "
       << reports.size() << (reports.size() == 1 ? " run" : " runs") << "\n";
    os << "         DS1          DS2          DS3          DS4        DS234\n";
    for (Domain d : kAllDomains) {
        std::vector<double> xs;
        for (auto const& r : reports) {
            if (auto it = r.domains.find(d); it != r.domains.end()) {
                xs.push_back(it->second.mean);
            }
        }
        os << " " << cell(xs);
    }
    std::vector<double> xs;
    for (auto const& r : reports) {
        if (r.ds234) {
            xs.push_back(*r.ds234);
        }
    }
    os << " " << cell(xs) << "\n";
    if (reports.size() == 1) {
        os << "per-volume std:";
        for (Domain d : kAllDomains) {
            if (auto it = reports.front().domains.find(d); it != reports.front().domains.end()) {
                char buf[64];
                std::snprintf(buf, sizeof buf, " %s=%.2f", to_string(d).c_str(), 100.0 * it->second.std);
                os << buf;
            }
        }
        os << "\n";
    }
    return os.str();
}

} // namespace gbtsam
