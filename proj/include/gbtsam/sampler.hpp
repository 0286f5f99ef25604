#pragma once

#include <array>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "gbtsam/volume.hpp"

namespace gbtsam {

inline constexpr std::size_t kGroupSize = 4;

using Rng = std::mt19937_64;
using DepthIndices = std::array<std::size_t, kGroupSize>;

enum class SliceStrategy {
    fixed_gap, // {b - delta, b, b + delta, b + 2 delta}
    random     // four distinct uniform indices
};

// Base index b is drawn uniformly from [delta, depth - 1 - 2 delta] so all
// four indices stay in bounds. Throws when depth < 3 delta + 1.
DepthIndices select_slices(std::size_t depth, std::size_t delta, Rng& rng,
                           SliceStrategy strategy = SliceStrategy::fixed_gap);
DepthIndices slices_around(std::size_t depth, std::size_t delta, std::size_t base);

// (G, M, H, W) stack of the selected slices of one volume.
struct SliceGroup {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = kModalityCount;
    DepthIndices depth_indices{};
    std::string voxel_id;
    std::vector<float> slices;

    std::span<float const> slice(std::size_t g) const {
        return std::span<float const>(slices).subspan(g * channels * height * width,
                                                      channels * height * width);
    }
};

SliceGroup extract_group(Volume const& v, DepthIndices const& indices);

// Pixel coordinates are half-open: the box covers x in [x0, x1), y in [y0, y1).
struct PromptBox {
    std::size_t slice_index = 0;
    std::size_t x0 = 0;
    std::size_t y0 = 0;
    std::size_t x1 = 0;
    std::size_t y1 = 0;
    double achieved_coverage = 1.0;
};

struct PromptPoint {
    std::size_t slice_index = 0;
    std::size_t x = 0;
    std::size_t y = 0;
};

using Prompt = std::variant<PromptBox, PromptPoint>;

// Half-width of the accepted coverage band around the requested target.
inline constexpr double kCoverageTolerance = 0.05;
inline constexpr int kMaxBoxAttempts = 1000;

// Fraction of the slice's foreground pixels that fall inside the box.
double box_coverage(std::span<float const> mask_slice, std::size_t height, std::size_t width,
                    PromptBox const& box);
PromptBox tight_box(std::span<float const> mask_slice, std::size_t height, std::size_t width);
PromptBox make_box_prompt(std::span<float const> mask_slice, std::size_t height, std::size_t width,
                          double target_coverage, Rng& rng);
PromptPoint make_point_prompt(std::span<float const> mask_slice, std::size_t height,
                              std::size_t width, Rng& rng);

} // namespace gbtsam
