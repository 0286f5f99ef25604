#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "gbtsam/model.hpp"
#include "gbtsam/sampler.hpp"
#include "gbtsam/volume.hpp"

namespace gbtsam {

enum class Phase {
    pretrain, // fits the frozen foundation weights on generic scenes
    step1,    // patch embedding only
    step2     // patch embedding + LoRA + Depth-Condition
};
std::string to_string(Phase p);
Phase phase_from_string(std::string const& s);

enum class Strategy { two_step, one_step, patch_embed_only };
std::string to_string(Strategy s);
Strategy strategy_from_string(std::string const& s);

// "1p" or "BB-<train%>-<test%>", e.g. "BB-75-75".
struct PromptRegime {
    enum class Kind { point, box } kind = Kind::box;
    double train_coverage = 1.0;
    double test_coverage = 1.0;

    static PromptRegime parse(std::string const& text);
    std::string to_string() const;
    bool operator==(PromptRegime const&) const = default;
};

struct TrainConfig {
    Strategy strategy = Strategy::two_step;
    std::size_t batch_size = 4;
    double learning_rate = 1e-4;
    std::size_t steps_step1 = 100;
    std::size_t steps_step2 = 100;
    std::uint64_t seed = 0;
    std::size_t delta = 1;
    SliceStrategy slice_strategy = SliceStrategy::fixed_gap;
    PromptRegime regime = PromptRegime::parse("BB-75-75");
    double clip_norm = 1.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    // Unfreezes the prompt encoder and mask decoder in step 2.
    bool train_decoder = false;

    void validate() const;
};

// Group-level trainable flags. Keys are parameter-name prefixes ("base",
// "base.decoder", ...); the longest matching key decides.
class FreezePlan {
  public:
    static FreezePlan empty();
    static FreezePlan for_phase(Phase phase, bool train_decoder = false);

    bool is_trainable(std::string const& parameter_name) const;
    std::map<std::string, bool> const& groups() const { return groups_; }

  private:
    std::map<std::string, bool> groups_;
};

inline std::vector<std::string> const kParameterGroups{"patch_embed", "base", "lora", "depth"};

// Validates that every parameter belongs to a known group.
FreezePlan build_freeze_plan(Phase phase, ParameterStore const& params, bool train_decoder = false);
std::size_t count_trainable_params(ParameterStore const& params, FreezePlan const& plan);
std::size_t count_trainable_params(ParameterStore const& params, Phase phase);

void apply_freeze_plan(ParameterStore const& params, FreezePlan const& plan);
void freeze_all(ParameterStore const& params);

using ParameterSnapshot = std::map<std::string, std::vector<double>>;
ParameterSnapshot snapshot(ParameterStore const& params);

class Adam {
  public:
    Adam(double lr, double beta1, double beta2, double eps)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    // Updates every parameter that currently requires a gradient.
    void step(ParameterStore const& params);
    double learning_rate() const { return lr_; }

  private:
    struct Moments {
        std::vector<double> m, v;
    };
    double lr_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::unordered_map<std::string, Moments> state_;
};

// Rescales trainable gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_grad_norm(ParameterStore const& params, double max_norm);

struct TrainingSample {
    Volume volume; // normalized
    SegMask mask;
};

struct MetricRecord {
    std::size_t step = 0;
    std::string phase;
    double loss = 0.0;
    double lr = 0.0;
    std::size_t trainable_param_count = 0;

    nlohmann::json to_json() const;
};

struct PhaseSummary {
    std::vector<MetricRecord> records;
    std::size_t skipped_shallow = 0;
    std::size_t skipped_no_prompt = 0;
};

using MetricSink = std::function<void(MetricRecord const&)>;

// Builds one training example: slice group, target masks for the group and
// the prompt from its reference slice. Returns nullopt when the volume is
// too shallow or no prompt can be drawn.
struct GroupExample {
    SliceGroup group;
    std::vector<double> targets; // G * H * W
    Prompt prompt;
};
std::optional<GroupExample> draw_example(TrainingSample const& sample, TrainConfig const& config,
                                         double coverage, Rng& rng, bool* shallow = nullptr);

// Runs `steps` optimizer steps of one phase. Only parameters trainable under
// the phase's plan change; the rest are bitwise untouched.
PhaseSummary run_phase(SamModel& model, Phase phase, TrainConfig const& config,
                       std::span<TrainingSample const> data, std::size_t steps,
                       MetricSink const& sink = {});

struct TrainOutcome {
    std::vector<std::filesystem::path> checkpoints;
    std::size_t total_steps = 0;
    std::size_t skipped_shallow = 0;
    std::size_t skipped_no_prompt = 0;
    double final_loss = 0.0;
};

struct TrainRequest {
    EncoderConfig model;
    TrainConfig train;
    std::filesystem::path run_dir;
    // Foundation weights; the patch embedding is re-initialised before step 1.
    std::optional<std::filesystem::path> base_checkpoint;
    // "step1", "step2" or "both" (two-step strategy only).
    std::string phase = "both";
    std::optional<std::filesystem::path> step1_checkpoint;
};

// Executes the configured strategy, writing <phase>.ckpt checkpoints and a
// metrics.ndjson log (one record per optimizer step) under run_dir.
TrainOutcome train(TrainRequest const& request, std::span<TrainingSample const> data);

} // namespace gbtsam
