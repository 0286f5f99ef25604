#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gbtsam/model.hpp"
#include "gbtsam/sampler.hpp"
#include "gbtsam/training.hpp"
#include "gbtsam/volume.hpp"

namespace gbtsam {

// 2|Y n P| / (|Y| + |P|); 1.0 when both are empty. Inputs must be 0/1.
double dice(std::span<float const> truth, std::span<float const> pred);
double dice(SegMask const& truth, SegMask const& pred);

// Mean of the three unseen-domain scores. All inputs must share one scale:
// fractions in [0, 1] or percentages in [0, 100].
double mean_unseen_dice(double ds2, double ds3, double ds4);

// voxel >= threshold -> 1.
SegMask binarize(SegMask const& prob, double threshold = 0.5);

// Depth windows of G slices with stride G; the last one repeats the final
// slice as padding. `valid` counts the real slices in each window.
struct Window {
    DepthIndices indices{};
    std::size_t valid = kGroupSize;
};
std::vector<Window> plan_windows(std::size_t depth);

// Supplies the prompt for one window; nullopt means "nothing to segment"
// and the window is predicted as background.
using PromptSource = std::function<std::optional<Prompt>(Window const&)>;

// Prompt from the window slice with the largest ground-truth area, covering
// `coverage` of that slice's tumor pixels (box) or a random tumor pixel.
PromptSource ground_truth_prompts(SegMask const& truth, PromptRegime const& regime,
                                  std::uint64_t seed);
// The same prompt for every window.
PromptSource fixed_prompt(Prompt prompt);

// Sigmoid probabilities, depth equal to the input volume's.
SegMask infer_volume(SamModel const& model, Volume const& volume, PromptSource const& prompts);

// Probabilities for one explicit window (used by the service).
std::vector<float> infer_window(SamModel const& model, Volume const& volume,
                                DepthIndices const& indices, Prompt const& prompt);

struct EvalSample {
    Volume volume; // normalized
    SegMask mask;
    Domain domain = Domain::adult;
};

struct VolumeScore {
    std::string voxel_id;
    Domain domain = Domain::adult;
    double dice = 0.0;

    bool operator==(VolumeScore const&) const = default;
};

struct DomainScore {
    double mean = 0.0;
    double std = 0.0; // population std over volumes
    std::size_t count = 0;

    bool operator==(DomainScore const&) const = default;
};

struct DiceReport {
    std::map<Domain, DomainScore> domains;
    // Present when all three unseen domains were evaluated.
    std::optional<double> ds234;
    std::vector<VolumeScore> volumes;
    std::string regime;
    double threshold = 0.5;
    std::string modality_subset = "all";

    nlohmann::json to_json() const;
    static DiceReport from_json(nlohmann::json const& j);
    bool operator==(DiceReport const&) const = default;
};

// Recomputes every aggregate from `volumes`.
DiceReport aggregate(std::vector<VolumeScore> volumes, std::string regime, double threshold);

struct EvalOptions {
    PromptRegime regime = PromptRegime::parse("BB-100-100");
    double threshold = 0.5;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
};

DiceReport evaluate(SamModel const& model, std::span<EvalSample const> samples, EvalOptions const& options);

// Fixed-width table: DS1..DS4 and DS234 (x100). Several reports (one per
// seed) are summarised as mean +- std over seeds.
std::string format_table(std::vector<DiceReport> const& reports);

} // namespace gbtsam
