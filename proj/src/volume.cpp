#include "gbtsam/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

#include <json.hpp>

#include "gbtsam/error.hpp"

namespace gbtsam {

using nlohmann::json;

namespace {

std::string dims_str(std::size_t d, std::size_t h, std::size_t w) {
    return std::to_string(d) + "x" + std::to_string(h) + "x" + std::to_string(w);
}

void put_u32_le(std::vector<std::byte>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xffu));
    }
}

std::uint32_t get_u32_le(std::span<std::byte const> in, std::size_t offset) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<std::uint32_t>(in[offset + static_cast<std::size_t>(i)]) << (8 * i);
    }
    return v;
}

std::filesystem::path stem_of(std::filesystem::path path) {
    auto ext = path.extension();
    if (ext == ".json" || ext == ".bin") {
        path.replace_extension();
    }
    return path;
}

std::filesystem::path with_suffix(std::filesystem::path const& stem, char const* suffix) {
    return std::filesystem::path(stem.string() + suffix);
}

std::string read_text(std::filesystem::path const& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open " + p.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::byte> read_bytes(std::filesystem::path const& p) {
    auto text = read_text(p);
    std::vector<std::byte> out(text.size());
    std::transform(text.begin(), text.end(), out.begin(),
                   [](char c) { return static_cast<std::byte>(c); });
    return out;
}

void write_file(std::filesystem::path const& p, std::string_view text) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error("cannot write " + p.string());
    }
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

void write_file(std::filesystem::path const& p, std::span<std::byte const> bytes) {
    write_file(p, std::string_view(reinterpret_cast<char const*>(bytes.data()), bytes.size()));
}

json parse_header(std::string const& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (json::parse_error const& e) {
        throw FormatError(std::string("header is not valid JSON: ") + e.what());
    }
    if (!j.is_object() || j.value("magic", "") != "GBTV1") {
        throw FormatError("header magic must be \"GBTV1\"");
    }
    return j;
}

std::size_t header_dim(json const& j, char const* key) {
    if (!j.contains(key) || !j[key].is_number_unsigned()) {
        throw FormatError(std::string("header field \"") + key + "\" must be a non-negative integer");
    }
    return j[key].get<std::size_t>();
}

} // namespace

// ---------------------------------------------------------------------------
// Volume / SegMask

Volume::Volume(VolumeHeader header, std::vector<float> data)
    : header_(std::move(header)), data_(std::move(data)) {
    if (header_.modalities != kModalityCount) {
        throw Error("M must be 4, got " + std::to_string(header_.modalities));
    }
    if (header_.height == 0 || header_.width == 0 || header_.depth == 0) {
        throw Error("volume dimensions must be >= 1, got " +
                    dims_str(header_.depth, header_.height, header_.width));
    }
    if (header_.modality_names.size() != kModalityCount) {
        throw Error("expected 4 modality names, got " +
                    std::to_string(header_.modality_names.size()));
    }
    std::size_t const expected = header_.modalities * header_.depth * header_.height * header_.width;
    if (data_.size() != expected) {
        throw Error("volume data holds " + std::to_string(data_.size()) + " values, header implies " +
                    std::to_string(expected));
    }
}

std::span<float const> Volume::slice(std::size_t modality, std::size_t d) const {
    if (modality >= header_.modalities || d >= header_.depth) {
        throw Error("slice (" + std::to_string(modality) + ", " + std::to_string(d) +
                    ") out of range");
    }
    std::size_t const plane = header_.height * header_.width;
    return std::span<float const>(data_).subspan((modality * header_.depth + d) * plane, plane);
}

SegMask::SegMask(std::size_t depth, std::size_t height, std::size_t width, MaskKind kind,
                 std::vector<float> data, std::string voxel_id)
    : depth_(depth), height_(height), width_(width), kind_(kind), data_(std::move(data)),
      voxel_id_(std::move(voxel_id)) {
    if (data_.size() != depth_ * height_ * width_) {
        throw Error("mask data holds " + std::to_string(data_.size()) + " values, shape " +
                    dims_str(depth_, height_, width_) + " implies " +
                    std::to_string(depth_ * height_ * width_));
    }
    for (float v : data_) {
        bool const ok = kind_ == MaskKind::binary ? (v == 0.0f || v == 1.0f) : (v >= 0.0f && v <= 1.0f);
        if (!ok) {
            throw Error(kind_ == MaskKind::binary ? "binary mask contains a value other than 0/1"
                                                  : "probability mask value outside [0, 1]");
        }
    }
}

SegMask SegMask::zeros(std::size_t depth, std::size_t height, std::size_t width,
                       std::string voxel_id) {
    return SegMask(depth, height, width, MaskKind::binary,
                   std::vector<float>(depth * height * width, 0.0f), std::move(voxel_id));
}

std::span<float const> SegMask::slice(std::size_t d) const {
    if (d >= depth_) {
        throw Error("mask slice " + std::to_string(d) + " out of range");
    }
    return std::span<float const>(data_).subspan(d * height_ * width_, height_ * width_);
}

std::size_t SegMask::count_foreground() const {
    return static_cast<std::size_t>(
        std::count_if(data_.begin(), data_.end(), [](float v) { return v >= 0.5f; }));
}

// ---------------------------------------------------------------------------
// Domains and phantoms

std::string to_string(Domain d) {
    switch (d) {
    case Domain::adult:
        return "adult";
    case Domain::meningioma:
        return "meningioma";
    case Domain::pediatric:
        return "pediatric";
    case Domain::ssa:
        return "ssa";
    }
    return "adult";
}

Domain domain_from_string(std::string const& s) {
    for (Domain d : kAllDomains) {
        if (to_string(d) == s) {
            return d;
        }
    }
    throw ConfigError("unknown domain tag \"" + s + "\" (expected adult|meningioma|pediatric|ssa)");
}

PhantomSpec PhantomSpec::for_domain(Domain domain, std::size_t height, std::size_t width,
                                    std::size_t depth, std::uint64_t seed) {
    PhantomSpec spec;
    spec.height = height;
    spec.width = width;
    spec.depth = depth;
    spec.domain = domain;
    spec.seed = seed;
    auto scale_profile = [&spec](double core, double edema) {
        for (auto& c : spec.profile.core) {
            c *= core;
        }
        for (auto& e : spec.profile.edema) {
            e *= edema;
        }
    };
    switch (domain) {
    case Domain::adult:
        break;
    case Domain::meningioma:
        // Compact, strongly enhancing lesions with little edema.
        spec.radius_min = 3.5;
        spec.radius_max = 6.5;
        spec.core_fraction = 0.7;
        scale_profile(1.25, 0.8);
        break;
    case Domain::pediatric:
        spec.radius_min = 2.5;
        spec.radius_max = 5.0;
        spec.core_fraction = 0.4;
        scale_profile(0.8, 0.85);
        break;
    case Domain::ssa:
        // Lower-field acquisitions: noisier, flatter contrast.
        spec.radius_min = 3.0;
        spec.radius_max = 6.5;
        spec.noise_std = 0.05;
        scale_profile(0.85, 0.85);
        break;
    }
    double const max_fit = (static_cast<double>(std::min({height, width, depth})) - 1.0) / 2.0;
    spec.radius_max = std::min(spec.radius_max, max_fit);
    spec.radius_min = std::min(spec.radius_min, spec.radius_max);
    return spec;
}

void PhantomSpec::validate() const {
    if (height == 0 || width == 0 || depth == 0) {
        throw Error("phantom grid must be at least 1x1x1");
    }
    if (tumor_count == 0) {
        return;
    }
    if (radius_min < 2.0) {
        throw Error("tumor radius must be >= 2 voxels, got " + std::to_string(radius_min));
    }
    if (radius_max < radius_min) {
        throw Error("tumor radius range is empty");
    }
    double const smallest = static_cast<double>(std::min({height, width, depth}));
    if (2.0 * radius_max > smallest - 1.0) {
        throw Error("tumor of radius " + std::to_string(radius_max) + " does not fit inside grid " +
                    dims_str(depth, height, width));
    }
    if (core_fraction <= 0.0 || core_fraction >= 1.0) {
        throw Error("core fraction must lie in (0, 1)");
    }
    if (noise_std < 0.0) {
        throw Error("noise std must be non-negative");
    }
}

namespace {

struct Ellipsoid {
    double cd, ch, cw;
    double rd, rh, rw;

    double level(double d, double h, double w) const {
        double const a = (d - cd) / rd;
        double const b = (h - ch) / rh;
        double const c = (w - cw) / rw;
        return a * a + b * b + c * c;
    }
};

VolumeHeader make_header(std::size_t h, std::size_t w, std::size_t d, std::string id) {
    VolumeHeader header;
    header.height = h;
    header.width = w;
    header.depth = d;
    header.voxel_id = std::move(id);
    return header;
}

} // namespace

Phantom generate_phantom(PhantomSpec const& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    std::size_t const H = spec.height;
    std::size_t const W = spec.width;
    std::size_t const D = spec.depth;

    std::vector<Ellipsoid> tumors;
    for (std::size_t t = 0; t < spec.tumor_count; ++t) {
        auto radius = [&] { return spec.radius_min + (spec.radius_max - spec.radius_min) * unit(rng); };
        Ellipsoid e{};
        e.rd = radius();
        e.rh = radius();
        e.rw = radius();
        auto centre = [&](double r, std::size_t dim) {
            double const lo = r;
            double const hi = static_cast<double>(dim) - 1.0 - r;
            return lo + (hi - lo) * unit(rng);
        };
        e.cd = centre(e.rd, D);
        e.ch = centre(e.rh, H);
        e.cw = centre(e.rw, W);
        tumors.push_back(e);
    }

    Ellipsoid const brain{(static_cast<double>(D) - 1.0) / 2.0, (static_cast<double>(H) - 1.0) / 2.0,
                          (static_cast<double>(W) - 1.0) / 2.0, 0.48 * static_cast<double>(D),
                          0.45 * static_cast<double>(H), 0.45 * static_cast<double>(W)};

    std::size_t const plane = H * W;
    std::vector<float> data(kModalityCount * D * plane, 0.0f);
    std::vector<float> mask(D * plane, 0.0f);
    std::normal_distribution<double> noise(0.0, 1.0);

    for (std::size_t d = 0; d < D; ++d) {
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t w = 0; w < W; ++w) {
                double const dd = static_cast<double>(d);
                double const hh = static_cast<double>(h);
                double const ww = static_cast<double>(w);
                bool in_tumor = false;
                bool in_core = false;
                for (auto const& e : tumors) {
                    double const lvl = e.level(dd, hh, ww);
                    if (lvl <= 1.0) {
                        in_tumor = true;
                        if (lvl <= spec.core_fraction * spec.core_fraction) {
                            in_core = true;
                        }
                    }
                }
                bool const tissue = in_tumor || brain.level(dd, hh, ww) <= 1.0;
                std::size_t const voxel = d * plane + h * W + w;
                mask[voxel] = in_tumor ? 1.0f : 0.0f;
                for (std::size_t m = 0; m < kModalityCount; ++m) {
                    // Draw noise for every voxel so the stream does not depend on geometry.
                    double const n = noise(rng) * spec.noise_std;
                    if (!tissue) {
                        continue;
                    }
                    double v = spec.tissue_level[m] + n;
                    if (in_core) {
                        v += spec.profile.core[m];
                    } else if (in_tumor) {
                        v += spec.profile.edema[m];
                    }
                    data[m * D * plane + voxel] = static_cast<float>(std::max(v, 0.01));
                }
            }
        }
    }

    std::string id = to_string(spec.domain) + "-" + std::to_string(spec.seed);
    Volume volume(make_header(H, W, D, id), std::move(data));
    SegMask seg(D, H, W, MaskKind::binary, std::move(mask), id);
    return {std::move(volume), std::move(seg)};
}

Phantom generate_scene(SceneSpec const& spec) {
    std::size_t const H = spec.height;
    std::size_t const W = spec.width;
    std::size_t const D = spec.depth;
    if (H < 8 || W < 8 || D == 0) {
        throw Error("scene grid must be at least 8x8x1");
    }
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 1.0);

    struct Shape {
        bool rect;
        double ch, cw, rh, rw, dh, dw; // centre, radii, per-slice drift
        std::array<double, kModalityCount> colour;
        bool nested;
        std::array<double, kModalityCount> inner_colour;
    };
    auto random_colour = [&] {
        std::array<double, kModalityCount> c{};
        for (auto& v : c) {
            v = 0.15 + 0.85 * unit(rng);
        }
        return c;
    };
    auto make_shape = [&](double rmin, double rmax) {
        Shape s{};
        s.rect = unit(rng) < 0.4;
        s.rh = rmin + (rmax - rmin) * unit(rng);
        s.rw = rmin + (rmax - rmin) * unit(rng);
        s.ch = s.rh + (static_cast<double>(H) - 1.0 - 2.0 * s.rh) * unit(rng);
        s.cw = s.rw + (static_cast<double>(W) - 1.0 - 2.0 * s.rw) * unit(rng);
        s.dh = (unit(rng) - 0.5) * 0.6;
        s.dw = (unit(rng) - 0.5) * 0.6;
        s.colour = random_colour();
        s.nested = unit(rng) < 0.5;
        s.inner_colour = random_colour();
        return s;
    };
    double const small = std::max(2.0, static_cast<double>(std::min(H, W)) / 10.0);
    double const large = static_cast<double>(std::min(H, W)) / 4.0;

    std::vector<Shape> shapes;
    for (std::size_t i = 0; i < spec.distractors; ++i) {
        shapes.push_back(make_shape(small, large));
    }
    shapes.push_back(make_shape(small, large)); // target, drawn last
    auto background = random_colour();
    std::array<double, kModalityCount> gradient{};
    for (auto& g : gradient) {
        g = (unit(rng) - 0.5) * 0.3;
    }
    double const noise_std = 0.02 + 0.04 * unit(rng);

    std::size_t const plane = H * W;
    std::vector<float> data(kModalityCount * D * plane);
    std::vector<float> mask(D * plane, 0.0f);
    for (std::size_t d = 0; d < D; ++d) {
        double const z = static_cast<double>(d) - static_cast<double>(D) / 2.0;
        // Objects shrink away from the middle slice, like blobs in a volume.
        double const taper = std::max(0.35, 1.0 - 0.08 * std::abs(z));
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t w = 0; w < W; ++w) {
                std::array<double, kModalityCount> px{};
                for (std::size_t m = 0; m < kModalityCount; ++m) {
                    px[m] = background[m] + gradient[m] * (static_cast<double>(w) / static_cast<double>(W) - 0.5);
                }
                bool target = false;
                for (std::size_t s = 0; s < shapes.size(); ++s) {
                    auto const& sh = shapes[s];
                    double const a = (static_cast<double>(h) - (sh.ch + sh.dh * z)) / (sh.rh * taper);
                    double const b = (static_cast<double>(w) - (sh.cw + sh.dw * z)) / (sh.rw * taper);
                    double const lvl = sh.rect ? std::max(std::abs(a), std::abs(b)) : std::sqrt(a * a + b * b);
                    if (lvl <= 1.0) {
                        px = (sh.nested && lvl <= 0.5) ? sh.inner_colour : sh.colour;
                        target = (s + 1 == shapes.size());
                    }
                }
                std::size_t const voxel = d * plane + h * W + w;
                mask[voxel] = target ? 1.0f : 0.0f;
                for (std::size_t m = 0; m < kModalityCount; ++m) {
                    double const v = px[m] + noise_std * noise(rng);
                    data[m * D * plane + voxel] = static_cast<float>(std::max(v, 0.01));
                }
            }
        }
    }
    std::string id = "scene-" + std::to_string(spec.seed);
    Volume volume(make_header(H, W, D, id), std::move(data));
    SegMask seg(D, H, W, MaskKind::binary, std::move(mask), id);
    return {std::move(volume), std::move(seg)};
}

// ---------------------------------------------------------------------------
// Normalization and channel subsets

Volume normalize(Volume const& v) {
    std::vector<float> out(v.data().begin(), v.data().end());
    std::size_t const per_modality = v.depth() * v.height() * v.width();
    for (std::size_t m = 0; m < kModalityCount; ++m) {
        auto chan = std::span<float>(out).subspan(m * per_modality, per_modality);
        double sum = 0.0;
        std::size_t n = 0;
        for (float x : chan) {
            if (x != 0.0f) {
                sum += x;
                ++n;
            }
        }
        if (n == 0) {
            throw Error("constant modality " + v.header().modality_names[m] + ": no nonzero voxels");
        }
        double const mean = sum / static_cast<double>(n);
        double sq = 0.0;
        for (float x : chan) {
            if (x != 0.0f) {
                sq += (x - mean) * (x - mean);
            }
        }
        double const stddev = std::sqrt(sq / static_cast<double>(n));
        if (!(stddev > 0.0)) {
            throw Error("constant modality " + v.header().modality_names[m] +
                        ": zero variance over foreground");
        }
        for (float& x : chan) {
            if (x != 0.0f) {
                x = static_cast<float>((x - mean) / stddev);
            }
        }
    }
    return Volume(v.header(), std::move(out));
}

ModalitySubset ModalitySubset::parse(std::string const& text) {
    ModalitySubset s;
    if (text == "all") {
        return s;
    }
    auto find = [&](std::string const& name) -> std::size_t {
        for (std::size_t m = 0; m < kModalityCount; ++m) {
            if (kModalityNames[m] == name) {
                return m;
            }
        }
        throw ConfigError("unknown modality \"" + name + "\"");
    };
    if (text.rfind("replicate:", 0) == 0) {
        s.mode = Mode::replicate;
        s.modality = find(text.substr(10));
    } else if (text.rfind("drop:", 0) == 0) {
        s.mode = Mode::drop;
        s.modality = find(text.substr(5));
    } else {
        throw ConfigError("modality subset must be all | replicate:<name> | drop:<name>, got \"" +
                          text + "\"");
    }
    return s;
}

std::string ModalitySubset::to_string() const {
    switch (mode) {
    case Mode::all:
        return "all";
    case Mode::replicate:
        return "replicate:" + kModalityNames[modality];
    case Mode::drop:
        return "drop:" + kModalityNames[modality];
    }
    return "all";
}

Volume apply_modality_subset(Volume const& v, ModalitySubset const& subset) {
    if (subset.mode == ModalitySubset::Mode::all) {
        return v;
    }
    std::size_t const per_modality = v.depth() * v.height() * v.width();
    std::vector<float> out(v.data().begin(), v.data().end());
    auto src = v.data().subspan(subset.modality * per_modality, per_modality);
    for (std::size_t m = 0; m < kModalityCount; ++m) {
        auto dst = std::span<float>(out).subspan(m * per_modality, per_modality);
        if (subset.mode == ModalitySubset::Mode::replicate) {
            std::copy(src.begin(), src.end(), dst.begin());
        } else if (m == subset.modality) {
            std::fill(dst.begin(), dst.end(), 0.0f);
        }
    }
    return Volume(v.header(), std::move(out));
}

// ---------------------------------------------------------------------------
// GBTV v1 codec

std::string encode_volume_header(VolumeHeader const& h) {
    json j;
    j["magic"] = "GBTV1";
    j["H"] = h.height;
    j["W"] = h.width;
    j["D"] = h.depth;
    j["M"] = h.modalities;
    j["dtype"] = "f32le";
    j["modalities"] = h.modality_names;
    j["voxel_id"] = h.voxel_id;
    return j.dump(2) + "\n";
}

std::vector<std::byte> encode_volume_payload(Volume const& v) {
    std::vector<std::byte> out;
    out.reserve(v.data().size() * 4);
    for (float x : v.data()) {
        put_u32_le(out, std::bit_cast<std::uint32_t>(x));
    }
    return out;
}

Volume decode_volume(std::string const& header_json, std::span<std::byte const> payload) {
    json const j = parse_header(header_json);
    if (j.value("dtype", "") != "f32le") {
        throw FormatError("volume dtype must be \"f32le\"");
    }
    VolumeHeader header;
    header.height = header_dim(j, "H");
    header.width = header_dim(j, "W");
    header.depth = header_dim(j, "D");
    header.modalities = header_dim(j, "M");
    if (header.modalities != kModalityCount) {
        throw FormatError("M must be 4, got " + std::to_string(header.modalities));
    }
    if (!j.contains("modalities") || !j["modalities"].is_array()) {
        throw FormatError("header field \"modalities\" must be an array");
    }
    header.modality_names = j["modalities"].get<std::vector<std::string>>();
    header.voxel_id = j.value("voxel_id", "");
    std::size_t const count = header.modalities * header.depth * header.height * header.width;
    if (payload.size() != count * 4) {
        throw FormatError("payload size mismatch: header implies " + std::to_string(count * 4) +
                          " bytes, payload has " + std::to_string(payload.size()) + " bytes");
    }
    std::vector<float> data(count);
    for (std::size_t i = 0; i < count; ++i) {
        data[i] = std::bit_cast<float>(get_u32_le(payload, 4 * i));
    }
    try {
        return Volume(std::move(header), std::move(data));
    } catch (Error const& e) {
        throw FormatError(e.what());
    }
}

void save_volume(Volume const& v, std::filesystem::path const& path) {
    auto const stem = stem_of(path);
    write_file(with_suffix(stem, ".json"), encode_volume_header(v.header()));
    write_file(with_suffix(stem, ".bin"), encode_volume_payload(v));
}

Volume load_volume(std::filesystem::path const& path) {
    auto const stem = stem_of(path);
    auto header = read_text(with_suffix(stem, ".json"));
    auto payload = read_bytes(with_suffix(stem, ".bin"));
    return decode_volume(header, payload);
}

void save_mask(SegMask const& m, std::filesystem::path const& path) {
    if (m.kind() != MaskKind::binary) {
        throw Error("only binary masks can be saved as u8");
    }
    auto const stem = stem_of(path);
    json j;
    j["magic"] = "GBTV1";
    j["H"] = m.height();
    j["W"] = m.width();
    j["D"] = m.depth();
    j["dtype"] = "u8";
    j["modalities"] = std::vector<std::string>(kModalityNames.begin(), kModalityNames.end());
    j["voxel_id"] = m.voxel_id();
    write_file(with_suffix(stem, ".json"), j.dump(2) + "\n");
    std::vector<std::byte> payload(m.data().size());
    std::transform(m.data().begin(), m.data().end(), payload.begin(),
                   [](float v) { return static_cast<std::byte>(v != 0.0f ? 1 : 0); });
    write_file(with_suffix(stem, ".bin"), payload);
}

SegMask load_mask(std::filesystem::path const& path) {
    auto const stem = stem_of(path);
    json const j = parse_header(read_text(with_suffix(stem, ".json")));
    if (j.value("dtype", "") != "u8") {
        throw FormatError("mask dtype must be \"u8\"");
    }
    std::size_t const H = header_dim(j, "H");
    std::size_t const W = header_dim(j, "W");
    std::size_t const D = header_dim(j, "D");
    auto payload = read_bytes(with_suffix(stem, ".bin"));
    if (payload.size() != H * W * D) {
        throw FormatError("payload size mismatch: header implies " + std::to_string(H * W * D) +
                          " bytes, payload has " + std::to_string(payload.size()) + " bytes");
    }
    std::vector<float> data(payload.size());
    for (std::size_t i = 0; i < payload.size(); ++i) {
        auto const b = static_cast<unsigned>(payload[i]);
        if (b > 1) {
            throw FormatError("mask byte " + std::to_string(i) + " is " + std::to_string(b) +
                              ", expected 0 or 1");
        }
        data[i] = static_cast<float>(b);
    }
    return SegMask(D, H, W, MaskKind::binary, std::move(data), j.value("voxel_id", ""));
}

} // namespace gbtsam
