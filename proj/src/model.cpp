#include "gbtsam/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <set>
#include <sstream>

#include "gbtsam/error.hpp"

namespace gbtsam {

using nlohmann::json;

namespace {

constexpr char kCheckpointMagic[8] = {'G', 'B', 'T', 'C', 'K', 'P', 'T', '1'};

bool is_non_negative_integer(json const& v) {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

} // namespace

SamModel::SamModel(EncoderConfig const& config) : config_(config) {
    config_.validate();
    std::mt19937_64 rng(config_.init_seed);
    store_ = std::make_unique<ParameterStore>();
    encoder_ = std::make_unique<Encoder>(config_, rng, *store_);
    prompt_ = std::make_unique<PromptEncoder>(config_, rng, *store_);
    decoder_ = std::make_unique<MaskDecoder>(config_, rng, *store_);
}

ag::Var SamModel::forward(SliceGroup const& group, Prompt const& prompt, bool adapted) const {
    auto features = encoder_->encode(group, adapted);
    return decoder_->decode(features, prompt_->encode(prompt));
}

void SamModel::reinitialize_patch_embed(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto w = store_->at("patch_embed.weight");
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(w.rows())));
    for (auto& v : w.mutable_value()) {
        v = dist(rng);
    }
    auto b = store_->at("patch_embed.bias");
    for (auto& v : b.mutable_value()) {
        v = 0.0;
    }
}

void SamModel::assign(std::string const& name, std::span<double const> values) {
    auto var = store_->at(name);
    if (values.size() != var.size()) {
        throw Error("parameter " + name + " holds " + std::to_string(var.size()) + " values, got " +
                    std::to_string(values.size()));
    }
    std::copy(values.begin(), values.end(), var.mutable_value().begin());
}

json encoder_config_to_json(EncoderConfig const& c) {
    return json{{"image_height", c.image_height},
                {"image_width", c.image_width},
                {"patch_size", c.patch_size},
                {"embed_dim", c.embed_dim},
                {"blocks", c.blocks},
                {"heads", c.heads},
                {"mlp_dim", c.mlp_dim},
                {"lora_rank", c.lora_rank},
                {"lora_sigma", c.lora_sigma},
                {"depth_hidden", c.depth_hidden},
                {"group_size", c.group_size},
                {"depth_condition", c.depth_condition},
                {"decoder_layers", c.decoder_layers},
                {"init_seed", c.init_seed}};
}

EncoderConfig encoder_config_from_json(json const& j) {
    if (!j.is_object()) {
        throw ConfigError("model config must be an object");
    }
    EncoderConfig c;
    static std::set<std::string> const known{
        "image_height", "image_width",  "patch_size", "embed_dim",       "blocks",
        "heads",        "mlp_dim",      "lora_rank",  "lora_sigma",      "depth_hidden",
        "group_size",   "depth_condition", "decoder_layers", "init_seed"};
    for (auto const& [key, value] : j.items()) {
        if (!known.contains(key)) {
            throw ConfigError("unknown key model." + key);
        }
    }
    auto get_size = [&](char const* key, std::size_t& out) {
        if (j.contains(key)) {
            if (!is_non_negative_integer(j[key])) {
                throw ConfigError(std::string("model.") + key + " must be a non-negative integer");
            }
            out = j[key].get<std::size_t>();
        }
    };
    get_size("image_height", c.image_height);
    get_size("image_width", c.image_width);
    get_size("patch_size", c.patch_size);
    get_size("embed_dim", c.embed_dim);
    get_size("blocks", c.blocks);
    get_size("heads", c.heads);
    get_size("mlp_dim", c.mlp_dim);
    get_size("lora_rank", c.lora_rank);
    get_size("depth_hidden", c.depth_hidden);
    get_size("group_size", c.group_size);
    get_size("decoder_layers", c.decoder_layers);
    if (j.contains("init_seed")) {
        if (!is_non_negative_integer(j["init_seed"])) {
            throw ConfigError("model.init_seed must be a non-negative integer");
        }
        c.init_seed = j["init_seed"].get<std::uint64_t>();
    }
    if (j.contains("lora_sigma")) {
        if (!j["lora_sigma"].is_number()) {
            throw ConfigError("model.lora_sigma must be a number");
        }
        c.lora_sigma = j["lora_sigma"].get<double>();
    }
    if (j.contains("depth_condition")) {
        if (!j["depth_condition"].is_boolean()) {
            throw ConfigError("model.depth_condition must be a boolean");
        }
        c.depth_condition = j["depth_condition"].get<bool>();
    }
    c.validate();
    return c;
}

std::string content_hash(std::span<std::byte const> bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::byte b : bytes) {
        h ^= static_cast<std::uint64_t>(b);
        h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

std::string file_hash(std::filesystem::path const& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error("cannot open " + path.string());
    }
    std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    return content_hash(std::as_bytes(std::span(text.data(), text.size())));
}

void save_checkpoint(SamModel const& model, std::filesystem::path const& path, json const& meta) {
    json header;
    header["config"] = encoder_config_to_json(model.config());
    header["meta"] = meta;
    header["tensors"] = json::array();
    std::string payload;
    for (auto const& [name, var] : model.parameters().entries()) {
        header["tensors"].push_back(
            json{{"name", name}, {"shape", {var.rows(), var.cols()}}, {"offset", payload.size()}});
        for (double v : var.value()) {
            auto const bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
            for (int i = 0; i < 4; ++i) {
                payload.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
            }
        }
    }
    std::string const text = header.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error("cannot write checkpoint " + path.string());
    }
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    std::uint64_t const len = text.size();
    for (int i = 0; i < 8; ++i) {
        char const c = static_cast<char>((len >> (8 * i)) & 0xffu);
        out.write(&c, 1);
    }
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
}

Checkpoint load_checkpoint(std::filesystem::path const& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error("missing checkpoint " + path.string());
    }
    std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
        throw FormatError(path.string() + " is not a GBTCKPT1 checkpoint");
    }
    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i) {
        len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + static_cast<std::size_t>(i)]))
               << (8 * i);
    }
    if (16 + len > bytes.size()) {
        throw FormatError("checkpoint header length " + std::to_string(len) + " exceeds file size " +
                          std::to_string(bytes.size()));
    }
    json header;
    try {
        header = json::parse(bytes.substr(16, len));
    } catch (json::parse_error const& e) {
        throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
    }
    std::size_t const payload_start = 16 + len;
    SamModel model(encoder_config_from_json(header.at("config")));

    std::set<std::string> seen;
    for (auto const& t : header.at("tensors")) {
        auto const name = t.at("name").get<std::string>();
        if (!model.parameters().contains(name)) {
            throw FormatError("checkpoint tensor " + name + " is not a parameter of this model");
        }
        auto const& var = model.parameters().at(name);
        auto const shape = t.at("shape").get<std::vector<std::size_t>>();
        if (shape.size() != 2 || shape[0] != var.rows() || shape[1] != var.cols()) {
            throw FormatError("checkpoint tensor " + name + " has the wrong shape");
        }
        std::size_t const offset = payload_start + t.at("offset").get<std::size_t>();
        if (offset + 4 * var.size() > bytes.size()) {
            throw FormatError("checkpoint payload truncated at tensor " + name + ": needs " +
                              std::to_string(offset + 4 * var.size()) + " bytes, file has " +
                              std::to_string(bytes.size()));
        }
        std::vector<double> values(var.size());
        for (std::size_t i = 0; i < values.size(); ++i) {
            std::uint32_t bits = 0;
            for (int b = 0; b < 4; ++b) {
                bits |= static_cast<std::uint32_t>(
                            static_cast<unsigned char>(bytes[offset + 4 * i + static_cast<std::size_t>(b)]))
                        << (8 * b);
            }
            values[i] = static_cast<double>(std::bit_cast<float>(bits));
        }
        model.assign(name, values);
        seen.insert(name);
    }
    if (seen.size() != model.parameters().size()) {
        for (auto const& [name, var] : model.parameters().entries()) {
            if (!seen.contains(name)) {
                throw FormatError("checkpoint is missing tensor " + name);
            }
        }
    }
    std::string id = content_hash(std::as_bytes(std::span(bytes.data(), bytes.size())));
    return Checkpoint{std::move(model), header.value("meta", json::object()), std::move(id)};
}

} // namespace gbtsam
