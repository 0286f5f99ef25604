#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "gbtsam/autograd.hpp"
#include "gbtsam/params.hpp"
#include "gbtsam/sampler.hpp"

namespace gbtsam {

struct EncoderConfig {
    std::size_t image_height = 32;
    std::size_t image_width = 32;
    std::size_t patch_size = 8;
    std::size_t embed_dim = 32;
    std::size_t blocks = 2;
    std::size_t heads = 2;
    std::size_t mlp_dim = 64;
    std::size_t lora_rank = 4;
    double lora_sigma = 0.01;
    std::size_t depth_hidden = 4 * kGroupSize;
    std::size_t group_size = kGroupSize;
    // When false the Depth-Condition blocks are absent from the model entirely.
    bool depth_condition = true;
    std::size_t decoder_layers = 2;
    std::uint64_t init_seed = 0;

    void validate() const;
    std::size_t grid_height() const { return image_height / patch_size; }
    std::size_t grid_width() const { return image_width / patch_size; }
    std::size_t patch_count() const { return grid_height() * grid_width(); }
    std::size_t patch_input_dim() const { return kModalityCount * patch_size * patch_size; }

    bool operator==(EncoderConfig const&) const = default;
};

std::size_t patch_count(std::size_t height, std::size_t width, std::size_t patch_size);

// Low-rank update attached to a base weight of shape (d_in x d_out):
// y = x theta + (x A) B with A (d_in x r) ~ N(0, sigma) and B (r x d_out) = 0.
class LoraAdapter {
  public:
    LoraAdapter() = default;
    LoraAdapter(std::string const& target, std::size_t d_in, std::size_t d_out, std::size_t rank,
                double sigma, std::mt19937_64& rng, ParameterStore& store);

    std::string const& target() const { return target_; }
    ag::Var const& a() const { return a_; }
    ag::Var const& b() const { return b_; }
    std::size_t rank() const { return a_.cols(); }
    std::size_t trainable_count() const { return a_.size() + b_.size(); }

    ag::Var delta(ag::Var const& x) const { return ag::matmul(ag::matmul(x, a_), b_); }

  private:
    std::string target_;
    ag::Var a_;
    ag::Var b_;
};

ag::Var lora_forward(ag::Var const& x, ag::Var const& base_weight, LoraAdapter const& adapter);

// Residual branch mixing features across the G slices of a group,
// independently per (spatial token, channel): tokens are layer-normalised
// over channels, unfolded so the slice axis is innermost, passed through a
// G -> hidden -> G MLP and folded back. The output layer starts at zero.
class DepthConditionBlock {
  public:
    DepthConditionBlock() = default;
    DepthConditionBlock(std::string const& prefix, std::size_t embed_dim, std::size_t group_size,
                        std::size_t hidden, std::mt19937_64& rng, ParameterStore& store);

    // tokens: (G * N) x d, slice-major. Returns tokens + branch(tokens).
    ag::Var forward(ag::Var const& tokens) const;
    ag::Var branch(ag::Var const& tokens) const;
    std::size_t group_size() const { return group_size_; }
    std::size_t parameter_count() const;

  private:
    std::size_t group_size_ = kGroupSize;
    ag::Var gamma_, beta_;
    ag::Var fc1_w_, fc1_b_, fc2_w_, fc2_b_;
};

class Encoder {
  public:
    Encoder(EncoderConfig const& config, std::mt19937_64& rng, ParameterStore& store);

    // (G * N) x d tokens: linear projection of each p x p x 4 patch plus
    // the learned positional embedding.
    ag::Var patch_embed(SliceGroup const& group) const;
    ag::Var depth_condition(ag::Var const& tokens, std::size_t block) const;
    // adapted=false runs the plain ViT: no LoRA and no Depth-Condition.
    ag::Var encode(SliceGroup const& group, bool adapted = true) const;

    std::vector<LoraAdapter const*> adapters() const;
    std::vector<DepthConditionBlock const*> depth_blocks() const;

  private:
    struct Linear {
        ag::Var w, b;
    };
    struct Block {
        ag::Var norm1_g, norm1_b, norm2_g, norm2_b;
        Linear q, k, v, proj, fc1, fc2;
        LoraAdapter lora_q, lora_v;
        DepthConditionBlock depth;
    };

    ag::Var attention(Block const& blk, ag::Var const& x, bool adapted) const;

    EncoderConfig config_;
    ag::Var pe_w_, pe_b_, pos_;
    std::vector<Block> blocks_;
    ag::Var neck_g_, neck_b_;
};

// Flattened patch matrix (N x 4 p p) for one slice (4 x H x W), feature
// order [modality][py][px].
std::vector<double> extract_patches(std::span<float const> slice, std::size_t height,
                                    std::size_t width, std::size_t patch_size);

} // namespace gbtsam
