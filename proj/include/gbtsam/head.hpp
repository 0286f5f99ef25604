#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "gbtsam/autograd.hpp"
#include "gbtsam/encoder.hpp"
#include "gbtsam/params.hpp"
#include "gbtsam/sampler.hpp"

namespace gbtsam {

// Sinusoidal code of a normalised coordinate pair: for k = 0 .. dim/4 - 1
// with f = pi (k + 1), entries [sin f x, cos f x, sin f y, cos f y].
std::vector<double> positional_encoding(double x, double y, std::size_t dim);

// Orders box corners so that x0 < x1 and y0 < y1; points pass through.
Prompt canonicalize(Prompt const& prompt);

struct PromptEncoding {
    ag::Var tokens; // k x d: two corner tokens for a box, one for a point
    ag::Var dense;  // N x d, added to the image tokens
};

class PromptEncoder {
  public:
    PromptEncoder(EncoderConfig const& config, std::mt19937_64& rng, ParameterStore& store);

    PromptEncoding encode(Prompt const& prompt) const;

  private:
    EncoderConfig config_;
    ag::Var type_embed_; // rows: box top-left, box bottom-right, point
    ag::Var dense_inside_;
    ag::Var dense_outside_;
};

// Two rounds of prompt <-> image cross-attention per slice followed by a
// per-token projection onto the p x p pixels of its patch. Output is
// G x (H * W) logits, one row per slice.
class MaskDecoder {
  public:
    MaskDecoder(EncoderConfig const& config, std::mt19937_64& rng, ParameterStore& store);

    ag::Var decode(ag::Var const& features, PromptEncoding const& prompt) const;

  private:
    struct Attention {
        ag::Var q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b;
        ag::Var operator()(ag::Var const& query, ag::Var const& key, ag::Var const& value) const;
    };
    struct Layer {
        Attention to_image;
        ag::Var norm_tok_g, norm_tok_b;
        Attention to_token;
        ag::Var norm_img_g, norm_img_b;
    };

    EncoderConfig config_;
    std::vector<Layer> layers_;
    ag::Var up_w_, up_b_;
    ag::Var image_pe_;
    std::vector<std::size_t> scatter_;
};

// Mean binary cross-entropy between binary targets and sigmoid(logits).
ag::Var bce_loss(std::span<double const> targets, ag::Var const& logits);

} // namespace gbtsam
