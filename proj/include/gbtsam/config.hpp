#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gbtsam/encoder.hpp"
#include "gbtsam/eval.hpp"
#include "gbtsam/training.hpp"
#include "gbtsam/volume.hpp"

namespace gbtsam {

struct PhantomGroup {
    Domain domain = Domain::adult;
    std::size_t count = 0;
    std::uint64_t seed = 0; // sample i uses seed + i
};

struct DataConfig {
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t depth = 16;
    std::vector<PhantomGroup> phantoms;
    // A manifest written by `synth`; replaces in-memory phantom generation.
    std::optional<std::filesystem::path> manifest;
    // Per domain, the first floor(fraction * n) samples train; the rest are held out.
    double train_fraction = 0.8;
    std::vector<Domain> train_domains{Domain::adult};
    std::string modality_subset = "all";
};

struct PretrainConfig {
    std::size_t steps = 0;
    std::size_t scenes = 200;
    std::uint64_t seed = 0;
    double learning_rate = 1e-3;
    std::size_t batch_size = 4;
};

struct EvalConfig {
    std::string regime = "BB-100-100";
    double threshold = 0.5;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    std::size_t seeds = 1; // repeat with seed, seed+1, ... and report mean +- std
};

struct ServeConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::size_t threads = 4;
};

struct RunConfig {
    std::filesystem::path run_dir = "runs/default";
    EncoderConfig model;
    TrainConfig train;
    std::string train_phase = "both";
    std::optional<std::filesystem::path> base_checkpoint;
    std::optional<std::filesystem::path> step1_checkpoint;
    PretrainConfig pretrain;
    DataConfig data;
    EvalConfig eval;
    ServeConfig serve;
};

// Strict: unknown keys at any level and wrongly typed values raise ConfigError.
RunConfig parse_run_config(nlohmann::json const& j);
// Fully populated document, defaults included; parse_run_config inverts it.
nlohmann::json run_config_to_json(RunConfig const& c);

// "a.b.c=value": value is parsed as JSON when possible, else taken as a string.
void apply_override(nlohmann::json& doc, std::string const& assignment);
RunConfig load_run_config(std::filesystem::path const& path, std::vector<std::string> const& overrides = {});

struct Sample {
    Volume volume; // normalized, modality subset applied
    SegMask mask;
    Domain domain = Domain::adult;
    bool train = false;
};

// Generates (or loads via the manifest) every configured volume in order.
std::vector<Sample> build_dataset(DataConfig const& data);
std::vector<TrainingSample> training_split(std::vector<Sample> const& samples, DataConfig const& data);
// Held-out volumes of training domains plus every volume of other domains.
std::vector<EvalSample> evaluation_split(std::vector<Sample> const& samples);

struct ManifestEntry {
    std::string voxel_id;
    Domain domain = Domain::adult;
    std::uint64_t seed = 0;
    std::string volume; // relative to the manifest directory
    std::string mask;
};
// Writes volumes, masks and manifest.json under out_dir. Returns the entries.
std::vector<ManifestEntry> synthesize(DataConfig const& data, std::filesystem::path const& out_dir);
std::vector<ManifestEntry> read_manifest(std::filesystem::path const& path);

// Foundation-weight stand-in: fits patch_embed + base on generic scenes.
PhaseSummary pretrain_model(SamModel& model, PretrainConfig const& config, MetricSink const& sink = {});

} // namespace gbtsam
