#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>

#include <json.hpp>

#include "gbtsam/encoder.hpp"
#include "gbtsam/head.hpp"
#include "gbtsam/params.hpp"

namespace gbtsam {

// Image encoder + prompt encoder + mask decoder sharing one parameter store.
// Not copyable: parameters are shared graph leaves.
class SamModel {
  public:
    explicit SamModel(EncoderConfig const& config);
    SamModel(SamModel&&) = default;
    SamModel& operator=(SamModel&&) = default;
    SamModel(SamModel const&) = delete;
    SamModel& operator=(SamModel const&) = delete;

    EncoderConfig const& config() const { return config_; }
    ParameterStore const& parameters() const { return *store_; }
    Encoder const& encoder() const { return *encoder_; }
    PromptEncoder const& prompt_encoder() const { return *prompt_; }
    MaskDecoder const& decoder() const { return *decoder_; }

    // G x (H * W) mask logits for one slice group under one prompt.
    ag::Var forward(SliceGroup const& group, Prompt const& prompt, bool adapted = true) const;

    // Fresh random 4-channel patch projection (weight and bias).
    void reinitialize_patch_embed(std::uint64_t seed);
    // Overwrites one parameter's values; shape must match.
    void assign(std::string const& name, std::span<double const> values);

  private:
    EncoderConfig config_;
    std::unique_ptr<ParameterStore> store_;
    std::unique_ptr<Encoder> encoder_;
    std::unique_ptr<PromptEncoder> prompt_;
    std::unique_ptr<MaskDecoder> decoder_;
};

nlohmann::json encoder_config_to_json(EncoderConfig const& c);
EncoderConfig encoder_config_from_json(nlohmann::json const& j);

// Container: 8-byte magic "GBTCKPT1", u64 little-endian header length, JSON
// header {config, meta, tensors: [{name, shape, offset}]}, then every tensor
// as little-endian f32 in header order.
void save_checkpoint(SamModel const& model, std::filesystem::path const& path,
                     nlohmann::json const& meta = nlohmann::json::object());

struct Checkpoint {
    SamModel model;
    nlohmann::json meta;
    std::string id; // content hash of the file
};
Checkpoint load_checkpoint(std::filesystem::path const& path);

// FNV-1a 64-bit, lowercase hex.
std::string content_hash(std::span<std::byte const> bytes);
std::string file_hash(std::filesystem::path const& path);

} // namespace gbtsam
