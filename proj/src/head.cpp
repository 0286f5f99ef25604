#include "gbtsam/head.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "gbtsam/error.hpp"

namespace gbtsam {

std::vector<double> positional_encoding(double x, double y, std::size_t dim) {
    if (dim % 4 != 0) {
        throw ConfigError("positional encoding dim must be a multiple of 4, got " + std::to_string(dim));
    }
    std::vector<double> out(dim);
    for (std::size_t k = 0; k < dim / 4; ++k) {
        double const f = std::numbers::pi * static_cast<double>(k + 1);
        out[4 * k + 0] = std::sin(f * x);
        out[4 * k + 1] = std::cos(f * x);
        out[4 * k + 2] = std::sin(f * y);
        out[4 * k + 3] = std::cos(f * y);
    }
    return out;
}

Prompt canonicalize(Prompt const& prompt) {
    if (auto const* box = std::get_if<PromptBox>(&prompt)) {
        PromptBox b = *box;
        if (b.x0 > b.x1) {
            std::swap(b.x0, b.x1);
        }
        if (b.y0 > b.y1) {
            std::swap(b.y0, b.y1);
        }
        return b;
    }
    return prompt;
}

// ---------------------------------------------------------------------------
// Prompt encoder

PromptEncoder::PromptEncoder(EncoderConfig const& config, std::mt19937_64& rng, ParameterStore& store)
    : config_(config) {
    if (config_.embed_dim % 4 != 0) {
        throw ConfigError("embed dim must be a multiple of 4 for the prompt encoding");
    }
    std::size_t const d = config_.embed_dim;
    type_embed_ = store.add_normal("base.prompt.type_embed", 3, d, 0.1, rng);
    dense_inside_ = store.add_normal("base.prompt.dense_inside", 1, d, 0.1, rng);
    dense_outside_ = store.add_normal("base.prompt.dense_outside", 1, d, 0.1, rng);
}

PromptEncoding PromptEncoder::encode(Prompt const& raw) const {
    std::size_t const H = config_.image_height;
    std::size_t const W = config_.image_width;
    std::size_t const d = config_.embed_dim;
    std::size_t const p = config_.patch_size;
    std::size_t const gw = config_.grid_width();
    std::size_t const n = config_.patch_count();
    Prompt const prompt = canonicalize(raw);

    std::vector<double> corners;
    std::vector<double> inside(n, 0.0);
    std::vector<std::size_t> type_rows;
    if (auto const* box = std::get_if<PromptBox>(&prompt)) {
        if (box->x1 > W || box->y1 > H || box->x0 >= box->x1 || box->y0 >= box->y1) {
            throw Error("box (" + std::to_string(box->x0) + "," + std::to_string(box->y0) + ")-(" +
                        std::to_string(box->x1) + "," + std::to_string(box->y1) +
                        ") is empty or outside the " + std::to_string(W) + "x" + std::to_string(H) +
                        " image");
        }
        auto tl = positional_encoding(static_cast<double>(box->x0) / static_cast<double>(W),
                                      static_cast<double>(box->y0) / static_cast<double>(H), d);
        auto br = positional_encoding(static_cast<double>(box->x1) / static_cast<double>(W),
                                      static_cast<double>(box->y1) / static_cast<double>(H), d);
        corners.insert(corners.end(), tl.begin(), tl.end());
        corners.insert(corners.end(), br.begin(), br.end());
        type_rows = {0, 1};
        // Fraction of each patch's pixels covered by the box.
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t const py0 = (i / gw) * p;
            std::size_t const px0 = (i % gw) * p;
            std::size_t const ox = std::min(px0 + p, box->x1) > std::max(px0, box->x0)
                                       ? std::min(px0 + p, box->x1) - std::max(px0, box->x0)
                                       : 0;
            std::size_t const oy = std::min(py0 + p, box->y1) > std::max(py0, box->y0)
                                       ? std::min(py0 + p, box->y1) - std::max(py0, box->y0)
                                       : 0;
            inside[i] = static_cast<double>(ox * oy) / static_cast<double>(p * p);
        }
    } else {
        auto const& pt = std::get<PromptPoint>(prompt);
        if (pt.x >= W || pt.y >= H) {
            throw Error("point (" + std::to_string(pt.x) + "," + std::to_string(pt.y) +
                        ") outside the " + std::to_string(W) + "x" + std::to_string(H) + " image");
        }
        corners = positional_encoding(static_cast<double>(pt.x) / static_cast<double>(W),
                                      static_cast<double>(pt.y) / static_cast<double>(H), d);
        type_rows = {2};
    }

    std::vector<std::size_t> index;
    for (std::size_t r : type_rows) {
        for (std::size_t c = 0; c < d; ++c) {
            index.push_back(r * d + c);
        }
    }
    auto types = ag::gather(type_embed_, type_rows.size(), d, std::move(index));
    auto tokens = ag::add(ag::Var::constant(type_rows.size(), d, std::move(corners)), types);

    std::vector<double> outside(n);
    std::transform(inside.begin(), inside.end(), outside.begin(), [](double f) { return 1.0 - f; });
    auto dense = ag::add(ag::matmul(ag::Var::constant(n, 1, std::move(inside)), dense_inside_),
                         ag::matmul(ag::Var::constant(n, 1, std::move(outside)), dense_outside_));
    return {tokens, dense};
}

// ---------------------------------------------------------------------------
// Mask decoder

ag::Var MaskDecoder::Attention::operator()(ag::Var const& query, ag::Var const& key,
                                           ag::Var const& value) const {
    double const inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q_w.cols()));
    auto q = ag::add_row(ag::matmul(query, q_w), q_b);
    auto k = ag::add_row(ag::matmul(key, k_w), k_b);
    auto v = ag::add_row(ag::matmul(value, v_w), v_b);
    auto attn = ag::softmax_rows(ag::scale(ag::matmul(q, ag::transpose(k)), inv_sqrt));
    return ag::add_row(ag::matmul(ag::matmul(attn, v), o_w), o_b);
}

MaskDecoder::MaskDecoder(EncoderConfig const& config, std::mt19937_64& rng, ParameterStore& store)
    : config_(config) {
    std::size_t const d = config_.embed_dim;
    std::size_t const p = config_.patch_size;
    double const std_d = 1.0 / std::sqrt(static_cast<double>(d));
    auto attention = [&](std::string const& name) {
        Attention a;
        a.q_w = store.add_normal(name + ".q.weight", d, d, std_d, rng);
        a.q_b = store.add_constant(name + ".q.bias", 1, d, 0.0);
        a.k_w = store.add_normal(name + ".k.weight", d, d, std_d, rng);
        a.k_b = store.add_constant(name + ".k.bias", 1, d, 0.0);
        a.v_w = store.add_normal(name + ".v.weight", d, d, std_d, rng);
        a.v_b = store.add_constant(name + ".v.bias", 1, d, 0.0);
        a.o_w = store.add_normal(name + ".o.weight", d, d, std_d, rng);
        a.o_b = store.add_constant(name + ".o.bias", 1, d, 0.0);
        return a;
    };
    for (std::size_t l = 0; l < config_.decoder_layers; ++l) {
        std::string const prefix = "base.decoder.layers." + std::to_string(l);
        Layer layer;
        layer.to_image = attention(prefix + ".token_to_image");
        layer.norm_tok_g = store.add_constant(prefix + ".norm_token.gamma", 1, d, 1.0);
        layer.norm_tok_b = store.add_constant(prefix + ".norm_token.beta", 1, d, 0.0);
        layer.to_token = attention(prefix + ".image_to_token");
        layer.norm_img_g = store.add_constant(prefix + ".norm_image.gamma", 1, d, 1.0);
        layer.norm_img_b = store.add_constant(prefix + ".norm_image.beta", 1, d, 0.0);
        layers_.push_back(std::move(layer));
    }
    up_w_ = store.add_normal("base.decoder.upsample.weight", d, p * p, 0.5 * std_d, rng);
    // Background prior: an untrained decoder predicts (almost) nothing.
    up_b_ = store.add_constant("base.decoder.upsample.bias", 1, p * p, -4.0);

    std::size_t const gh = config_.grid_height();
    std::size_t const gw = config_.grid_width();
    std::vector<double> pe;
    for (std::size_t i = 0; i < gh; ++i) {
        for (std::size_t j = 0; j < gw; ++j) {
            auto code = positional_encoding((static_cast<double>(j) + 0.5) / static_cast<double>(gw),
                                            (static_cast<double>(i) + 0.5) / static_cast<double>(gh), d);
            pe.insert(pe.end(), code.begin(), code.end());
        }
    }
    image_pe_ = ag::Var::constant(gh * gw, d, std::move(pe));

    std::size_t const H = config_.image_height;
    std::size_t const W = config_.image_width;
    scatter_.resize(H * W);
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
            std::size_t const patch = (y / p) * gw + x / p;
            std::size_t const within = (y % p) * p + x % p;
            scatter_[y * W + x] = patch * p * p + within;
        }
    }
}

ag::Var MaskDecoder::decode(ag::Var const& features, PromptEncoding const& prompt) const {
    std::size_t const n = config_.patch_count();
    std::size_t const d = config_.embed_dim;
    std::size_t const g_count = config_.group_size;
    if (features.cols() != d || features.rows() != g_count * n) {
        throw Error("decoder expects features of " + std::to_string(g_count * n) + "x" +
                    std::to_string(d) + ", got " + std::to_string(features.rows()) + "x" +
                    std::to_string(features.cols()));
    }
    if (prompt.tokens.cols() != d || prompt.dense.rows() != n || prompt.dense.cols() != d) {
        throw Error("prompt encoding does not match decoder dim " + std::to_string(d));
    }
    std::size_t const pixels = config_.image_height * config_.image_width;
    std::vector<ag::Var> rows;
    for (std::size_t g = 0; g < g_count; ++g) {
        auto image = ag::add(ag::slice_rows(features, g * n, (g + 1) * n), prompt.dense);
        auto tokens = prompt.tokens;
        for (auto const& layer : layers_) {
            auto keyed = ag::add(image, image_pe_);
            tokens = ag::layer_norm_rows(ag::add(tokens, layer.to_image(tokens, keyed, image)),
                                         layer.norm_tok_g, layer.norm_tok_b);
            image = ag::layer_norm_rows(
                ag::add(image, layer.to_token(ag::add(image, image_pe_), tokens, tokens)),
                layer.norm_img_g, layer.norm_img_b);
        }
        auto patch_logits = ag::add_row(ag::matmul(image, up_w_), up_b_);
        rows.push_back(ag::gather(patch_logits, 1, pixels, scatter_));
    }
    return ag::concat_rows(rows);
}

ag::Var bce_loss(std::span<double const> targets, ag::Var const& logits) {
    if (targets.size() != logits.size()) {
        throw Error("bce_loss: " + std::to_string(targets.size()) + " targets vs " +
                    std::to_string(logits.size()) + " logits");
    }
    for (double y : targets) {
        if (y != 0.0 && y != 1.0) {
            throw Error("bce_loss: targets must be binary");
        }
    }
    return ag::bce_with_logits(logits, targets);
}

} // namespace gbtsam
