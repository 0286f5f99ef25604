#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace gbtsam {

inline constexpr std::size_t kModalityCount = 4;
inline std::array<std::string, kModalityCount> const kModalityNames{"T1", "T1c", "T2", "T2-FLAIR"};

struct VolumeHeader {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t depth = 0;
    std::size_t modalities = kModalityCount;
    std::vector<std::string> modality_names{kModalityNames.begin(), kModalityNames.end()};
    std::string voxel_id;

    bool operator==(VolumeHeader const&) const = default;
};

// Four-modality scan stored in [modality][depth][height][width] order so that
// one slice of one modality is a contiguous run of height*width floats.
class Volume {
  public:
    Volume(VolumeHeader header, std::vector<float> data);

    VolumeHeader const& header() const { return header_; }
    std::size_t height() const { return header_.height; }
    std::size_t width() const { return header_.width; }
    std::size_t depth() const { return header_.depth; }
    std::string const& voxel_id() const { return header_.voxel_id; }

    std::span<float const> data() const { return data_; }
    std::span<float const> slice(std::size_t modality, std::size_t d) const;
    float at(std::size_t modality, std::size_t d, std::size_t h, std::size_t w) const {
        return data_[((modality * header_.depth + d) * header_.height + h) * header_.width + w];
    }

    bool operator==(Volume const&) const = default;

  private:
    VolumeHeader header_;
    std::vector<float> data_;
};

enum class MaskKind { binary, probability };

// (depth, height, width) mask aligned to a Volume. Binary masks hold only
// 0 and 1; probability masks hold values in [0, 1].
class SegMask {
  public:
    SegMask(std::size_t depth, std::size_t height, std::size_t width, MaskKind kind,
            std::vector<float> data, std::string voxel_id = {});

    static SegMask zeros(std::size_t depth, std::size_t height, std::size_t width,
                         std::string voxel_id = {});

    std::size_t depth() const { return depth_; }
    std::size_t height() const { return height_; }
    std::size_t width() const { return width_; }
    MaskKind kind() const { return kind_; }
    std::string const& voxel_id() const { return voxel_id_; }

    std::span<float const> data() const { return data_; }
    std::span<float const> slice(std::size_t d) const;
    float at(std::size_t d, std::size_t h, std::size_t w) const {
        return data_[(d * height_ + h) * width_ + w];
    }
    std::size_t count_foreground() const;

    bool operator==(SegMask const&) const = default;

  private:
    std::size_t depth_;
    std::size_t height_;
    std::size_t width_;
    MaskKind kind_;
    std::vector<float> data_;
    std::string voxel_id_;
};

enum class Domain { adult, meningioma, pediatric, ssa };

std::string to_string(Domain d);
Domain domain_from_string(std::string const& s);
inline constexpr std::array<Domain, 4> kAllDomains{Domain::adult, Domain::meningioma,
                                                   Domain::pediatric, Domain::ssa};

// Signed intensity offset each tumor sub-region adds per modality; zero means
// the sub-region is invisible in that modality.
struct VisibilityProfile {
    std::array<double, kModalityCount> core{-0.25, 0.40, 0.0, 0.0};
    std::array<double, kModalityCount> edema{0.0, 0.0, 0.35, 0.40};
};

struct PhantomSpec {
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t depth = 16;
    std::size_t tumor_count = 1;
    double radius_min = 3.0;
    double radius_max = 6.0;
    // Core radius as a fraction of the tumor radius; the remaining shell is edema.
    double core_fraction = 0.5;
    VisibilityProfile profile;
    std::array<double, kModalityCount> tissue_level{0.60, 0.55, 0.45, 0.50};
    Domain domain = Domain::adult;
    double noise_std = 0.03;
    std::uint64_t seed = 0;

    // Domain-flavoured defaults: tumor size, contrast and noise differ per tag.
    static PhantomSpec for_domain(Domain domain, std::size_t height, std::size_t width,
                                  std::size_t depth, std::uint64_t seed);
    void validate() const;
};

struct Phantom {
    Volume volume;
    SegMask mask;
};

// Deterministic in spec.seed. The mask is the union of the planted tumor
// ellipsoids; each modality shows only its profile-assigned sub-regions.
Phantom generate_phantom(PhantomSpec const& spec);

// Generic multi-object scene (shapes of random per-channel colour on a
// textured background) with one target object masked. Used to fit the
// frozen foundation weights before any MRI adaptation.
struct SceneSpec {
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t depth = 8;
    std::size_t distractors = 2;
    std::uint64_t seed = 0;
};
Phantom generate_scene(SceneSpec const& spec);

// Per-modality z-score over nonzero voxels; zero voxels stay zero.
Volume normalize(Volume const& v);

// Channel-subset ablations: replicate one modality into all channels, or
// zero out a dropped modality.
struct ModalitySubset {
    enum class Mode { all, replicate, drop } mode = Mode::all;
    std::size_t modality = 0;

    static ModalitySubset parse(std::string const& text);
    std::string to_string() const;
};
Volume apply_modality_subset(Volume const& v, ModalitySubset const& subset);

// GBTV v1 persistence. `path` names the pair <stem>.json / <stem>.bin; a
// trailing ".json" or ".bin" is stripped.
void save_volume(Volume const& v, std::filesystem::path const& path);
Volume load_volume(std::filesystem::path const& path);
void save_mask(SegMask const& m, std::filesystem::path const& path);
SegMask load_mask(std::filesystem::path const& path);

// In-memory codec shared by file I/O and the HTTP upload endpoint.
std::string encode_volume_header(VolumeHeader const& h);
Volume decode_volume(std::string const& header_json, std::span<std::byte const> payload);
std::vector<std::byte> encode_volume_payload(Volume const& v);

} // namespace gbtsam
