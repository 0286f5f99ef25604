#include "gbtsam/encoder.hpp"

#include <cmath>

#include "gbtsam/error.hpp"

namespace gbtsam {

namespace {

std::string block_name(char const* group, std::size_t i) {
    return std::string(group) + ".encoder.blocks." + std::to_string(i);
}

double fan_in_std(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

} // namespace

void EncoderConfig::validate() const {
    if (patch_size == 0) {
        throw ConfigError("patch size must be >= 1");
    }
    if (image_height == 0 || image_width == 0 || image_height % patch_size != 0 ||
        image_width % patch_size != 0) {
        throw ConfigError("image " + std::to_string(image_height) + "x" + std::to_string(image_width) +
                          " is not divisible by patch size " + std::to_string(patch_size));
    }
    if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) {
        throw ConfigError("embed dim " + std::to_string(embed_dim) + " must be a positive multiple of " +
                          std::to_string(heads) + " heads");
    }
    if (lora_rank < 1 || lora_rank >= embed_dim) {
        throw ConfigError("LoRA rank must satisfy 1 <= r < " + std::to_string(embed_dim) + ", got " +
                          std::to_string(lora_rank));
    }
    if (!(lora_sigma > 0.0)) {
        throw ConfigError("LoRA init sigma must be > 0");
    }
    if (group_size != kGroupSize) {
        throw ConfigError("group size is fixed at 4, got " + std::to_string(group_size));
    }
    if (depth_hidden == 0 || mlp_dim == 0 || blocks == 0 || decoder_layers == 0) {
        throw ConfigError("depth hidden, mlp dim, block and decoder layer counts must be >= 1");
    }
}

std::size_t patch_count(std::size_t height, std::size_t width, std::size_t patch_size) {
    if (patch_size == 0 || height % patch_size != 0 || width % patch_size != 0) {
        throw ConfigError("image " + std::to_string(height) + "x" + std::to_string(width) +
                          " is not divisible by patch size " + std::to_string(patch_size));
    }
    return (height / patch_size) * (width / patch_size);
}

// ---------------------------------------------------------------------------
// LoRA

LoraAdapter::LoraAdapter(std::string const& target, std::size_t d_in, std::size_t d_out,
                         std::size_t rank, double sigma, std::mt19937_64& rng, ParameterStore& store)
    : target_(target) {
    if (rank < 1 || rank >= std::min(d_in, d_out)) {
        throw ConfigError("LoRA rank " + std::to_string(rank) + " invalid for " + target + " (" +
                          std::to_string(d_in) + "x" + std::to_string(d_out) + ")");
    }
    a_ = store.add_normal(target + ".A", d_in, rank, sigma, rng);
    b_ = store.add_constant(target + ".B", rank, d_out, 0.0);
}

ag::Var lora_forward(ag::Var const& x, ag::Var const& base_weight, LoraAdapter const& adapter) {
    if (base_weight.rows() != adapter.a().rows() || base_weight.cols() != adapter.b().cols()) {
        throw Error("LoRA adapter " + adapter.target() + " does not match base weight shape");
    }
    return ag::add(ag::matmul(x, base_weight), adapter.delta(x));
}

// ---------------------------------------------------------------------------
// Depth-Condition

DepthConditionBlock::DepthConditionBlock(std::string const& prefix, std::size_t embed_dim,
                                         std::size_t group_size, std::size_t hidden,
                                         std::mt19937_64& rng, ParameterStore& store)
    : group_size_(group_size) {
    gamma_ = store.add_constant(prefix + ".norm.gamma", 1, embed_dim, 1.0);
    beta_ = store.add_constant(prefix + ".norm.beta", 1, embed_dim, 0.0);
    fc1_w_ = store.add_normal(prefix + ".mlp.fc1.weight", group_size, hidden, fan_in_std(group_size), rng);
    fc1_b_ = store.add_constant(prefix + ".mlp.fc1.bias", 1, hidden, 0.0);
    fc2_w_ = store.add_constant(prefix + ".mlp.fc2.weight", hidden, group_size, 0.0);
    fc2_b_ = store.add_constant(prefix + ".mlp.fc2.bias", 1, group_size, 0.0);
}

std::size_t DepthConditionBlock::parameter_count() const {
    return gamma_.size() + beta_.size() + fc1_w_.size() + fc1_b_.size() + fc2_w_.size() +
           fc2_b_.size();
}

ag::Var DepthConditionBlock::branch(ag::Var const& tokens) const {
    std::size_t const d = tokens.cols();
    if (tokens.rows() % group_size_ != 0) {
        throw Error("depth condition: " + std::to_string(tokens.rows()) +
                    " token rows do not split into " + std::to_string(group_size_) + " slices");
    }
    std::size_t const per_slice = tokens.rows() / group_size_ * d;
    auto normed = ag::layer_norm_rows(tokens, gamma_, beta_);
    // Unfold: (G, N*d) -> (N*d, G) so each row is one (token, channel) across slices.
    auto unfolded = ag::transpose(ag::reshape(normed, group_size_, per_slice));
    auto h = ag::gelu(ag::add_row(ag::matmul(unfolded, fc1_w_), fc1_b_));
    auto mixed = ag::add_row(ag::matmul(h, fc2_w_), fc2_b_);
    return ag::reshape(ag::transpose(mixed), tokens.rows(), d);
}

ag::Var DepthConditionBlock::forward(ag::Var const& tokens) const {
    return ag::add(tokens, branch(tokens));
}

// ---------------------------------------------------------------------------
// Encoder

std::vector<double> extract_patches(std::span<float const> slice, std::size_t height,
                                    std::size_t width, std::size_t patch_size) {
    std::size_t const gh = height / patch_size;
    std::size_t const gw = width / patch_size;
    std::size_t const feat = kModalityCount * patch_size * patch_size;
    std::vector<double> out(gh * gw * feat);
    for (std::size_t gy = 0; gy < gh; ++gy) {
        for (std::size_t gx = 0; gx < gw; ++gx) {
            double* row = &out[(gy * gw + gx) * feat];
            std::size_t f = 0;
            for (std::size_t m = 0; m < kModalityCount; ++m) {
                for (std::size_t py = 0; py < patch_size; ++py) {
                    for (std::size_t px = 0; px < patch_size; ++px) {
                        std::size_t const y = gy * patch_size + py;
                        std::size_t const x = gx * patch_size + px;
                        row[f++] = slice[(m * height + y) * width + x];
                    }
                }
            }
        }
    }
    return out;
}

Encoder::Encoder(EncoderConfig const& config, std::mt19937_64& rng, ParameterStore& store)
    : config_(config) {
    config_.validate();
    std::size_t const d = config_.embed_dim;
    std::size_t const n = config_.patch_count();
    std::size_t const in = config_.patch_input_dim();
    pe_w_ = store.add_normal("patch_embed.weight", in, d, fan_in_std(in), rng);
    pe_b_ = store.add_constant("patch_embed.bias", 1, d, 0.0);
    pos_ = store.add_normal("patch_embed.pos", n, d, 0.02, rng);

    auto linear = [&](std::string const& name, std::size_t fan_in, std::size_t fan_out) {
        Linear l;
        l.w = store.add_normal(name + ".weight", fan_in, fan_out, fan_in_std(fan_in), rng);
        l.b = store.add_constant(name + ".bias", 1, fan_out, 0.0);
        return l;
    };
    for (std::size_t i = 0; i < config_.blocks; ++i) {
        std::string const base = block_name("base", i);
        Block blk;
        blk.norm1_g = store.add_constant(base + ".norm1.gamma", 1, d, 1.0);
        blk.norm1_b = store.add_constant(base + ".norm1.beta", 1, d, 0.0);
        blk.q = linear(base + ".attn.q", d, d);
        blk.k = linear(base + ".attn.k", d, d);
        blk.v = linear(base + ".attn.v", d, d);
        blk.proj = linear(base + ".attn.proj", d, d);
        blk.norm2_g = store.add_constant(base + ".norm2.gamma", 1, d, 1.0);
        blk.norm2_b = store.add_constant(base + ".norm2.beta", 1, d, 0.0);
        blk.fc1 = linear(base + ".mlp.fc1", d, config_.mlp_dim);
        blk.fc2 = linear(base + ".mlp.fc2", config_.mlp_dim, d);
        std::string const lora = block_name("lora", i);
        blk.lora_q = LoraAdapter(lora + ".attn.q", d, d, config_.lora_rank, config_.lora_sigma, rng, store);
        blk.lora_v = LoraAdapter(lora + ".attn.v", d, d, config_.lora_rank, config_.lora_sigma, rng, store);
        if (config_.depth_condition) {
            blk.depth = DepthConditionBlock(block_name("depth", i), d, config_.group_size,
                                            config_.depth_hidden, rng, store);
        }
        blocks_.push_back(std::move(blk));
    }
    neck_g_ = store.add_constant("base.encoder.neck.gamma", 1, d, 1.0);
    neck_b_ = store.add_constant("base.encoder.neck.beta", 1, d, 0.0);
}

ag::Var Encoder::patch_embed(SliceGroup const& group) const {
    if (group.channels != kModalityCount) {
        throw ConfigError("patch embedding expects 4 channels, got " + std::to_string(group.channels));
    }
    if (group.height != config_.image_height || group.width != config_.image_width) {
        throw ConfigError("slice " + std::to_string(group.height) + "x" + std::to_string(group.width) +
                          " does not match configured image " + std::to_string(config_.image_height) +
                          "x" + std::to_string(config_.image_width));
    }
    std::size_t const n = config_.patch_count();
    std::size_t const in = config_.patch_input_dim();
    std::vector<double> patches;
    patches.reserve(kGroupSize * n * in);
    for (std::size_t g = 0; g < kGroupSize; ++g) {
        auto p = extract_patches(group.slice(g), group.height, group.width, config_.patch_size);
        patches.insert(patches.end(), p.begin(), p.end());
    }
    auto x = ag::Var::constant(kGroupSize * n, in, std::move(patches));
    auto tokens = ag::add_row(ag::matmul(x, pe_w_), pe_b_);
    std::vector<ag::Var> pos(kGroupSize, pos_);
    return ag::add(tokens, ag::concat_rows(pos));
}

ag::Var Encoder::attention(Block const& blk, ag::Var const& x, bool adapted) const {
    std::size_t const n = config_.patch_count();
    std::size_t const d = config_.embed_dim;
    std::size_t const dh = d / config_.heads;
    double const inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    auto q = adapted ? lora_forward(x, blk.q.w, blk.lora_q) : ag::matmul(x, blk.q.w);
    q = ag::add_row(q, blk.q.b);
    auto k = ag::add_row(ag::matmul(x, blk.k.w), blk.k.b);
    auto v = adapted ? lora_forward(x, blk.v.w, blk.lora_v) : ag::matmul(x, blk.v.w);
    v = ag::add_row(v, blk.v.b);

    // Each slice is an independent image: attention never crosses slices.
    std::vector<ag::Var> slices;
    for (std::size_t g = 0; g < config_.group_size; ++g) {
        auto qg = ag::slice_rows(q, g * n, (g + 1) * n);
        auto kg = ag::slice_rows(k, g * n, (g + 1) * n);
        auto vg = ag::slice_rows(v, g * n, (g + 1) * n);
        std::vector<ag::Var> heads;
        for (std::size_t h = 0; h < config_.heads; ++h) {
            auto qh = ag::slice_cols(qg, h * dh, (h + 1) * dh);
            auto kh = ag::slice_cols(kg, h * dh, (h + 1) * dh);
            auto vh = ag::slice_cols(vg, h * dh, (h + 1) * dh);
            auto attn = ag::softmax_rows(ag::scale(ag::matmul(qh, ag::transpose(kh)), inv_sqrt));
            heads.push_back(ag::matmul(attn, vh));
        }
        slices.push_back(heads.size() == 1 ? heads.front() : ag::concat_cols(heads));
    }
    auto merged = ag::concat_rows(slices);
    return ag::add_row(ag::matmul(merged, blk.proj.w), blk.proj.b);
}

ag::Var Encoder::depth_condition(ag::Var const& tokens, std::size_t block) const {
    if (!config_.depth_condition) {
        throw Error("depth condition is disabled in this configuration");
    }
    if (tokens.rows() != config_.group_size * config_.patch_count() ||
        tokens.cols() != config_.embed_dim) {
        throw Error("depth condition expects " + std::to_string(config_.group_size) + " slices of " +
                    std::to_string(config_.patch_count()) + " tokens, got " +
                    std::to_string(tokens.rows()) + " rows");
    }
    return blocks_.at(block).depth.forward(tokens);
}

ag::Var Encoder::encode(SliceGroup const& group, bool adapted) const {
    auto x = patch_embed(group);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        auto const& blk = blocks_[i];
        x = ag::add(x, attention(blk, ag::layer_norm_rows(x, blk.norm1_g, blk.norm1_b), adapted));
        auto h = ag::layer_norm_rows(x, blk.norm2_g, blk.norm2_b);
        h = ag::gelu(ag::add_row(ag::matmul(h, blk.fc1.w), blk.fc1.b));
        x = ag::add(x, ag::add_row(ag::matmul(h, blk.fc2.w), blk.fc2.b));
        if (adapted && config_.depth_condition) {
            x = depth_condition(x, i);
        }
    }
    return ag::layer_norm_rows(x, neck_g_, neck_b_);
}

std::vector<LoraAdapter const*> Encoder::adapters() const {
    std::vector<LoraAdapter const*> out;
    for (auto const& blk : blocks_) {
        out.push_back(&blk.lora_q);
        out.push_back(&blk.lora_v);
    }
    return out;
}

std::vector<DepthConditionBlock const*> Encoder::depth_blocks() const {
    std::vector<DepthConditionBlock const*> out;
    if (config_.depth_condition) {
        for (auto const& blk : blocks_) {
            out.push_back(&blk.depth);
        }
    }
    return out;
}

} // namespace gbtsam
