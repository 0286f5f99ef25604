#include "gbtsam/sampler.hpp"

#include <algorithm>
#include <cmath>

#include "gbtsam/error.hpp"

namespace gbtsam {

DepthIndices slices_around(std::size_t depth, std::size_t delta, std::size_t base) {
    if (delta == 0) {
        throw Error("slice gap delta must be >= 1");
    }
    if (depth < 3 * delta + 1) {
        throw Error("volume too shallow for delta=" + std::to_string(delta) + ": depth " +
                    std::to_string(depth) + " < " + std::to_string(3 * delta + 1));
    }
    if (base < delta || base + 2 * delta > depth - 1) {
        throw Error("base slice " + std::to_string(base) + " outside [" + std::to_string(delta) +
                    ", " + std::to_string(depth - 1 - 2 * delta) + "]");
    }
    return {base - delta, base, base + delta, base + 2 * delta};
}

DepthIndices select_slices(std::size_t depth, std::size_t delta, Rng& rng, SliceStrategy strategy) {
    if (strategy == SliceStrategy::random) {
        if (depth < kGroupSize) {
            throw Error("volume too shallow for random selection: depth " + std::to_string(depth));
        }
        std::vector<std::size_t> all(depth);
        for (std::size_t i = 0; i < depth; ++i) {
            all[i] = i;
        }
        // Partial Fisher-Yates.
        for (std::size_t i = 0; i < kGroupSize; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, depth - 1);
            std::swap(all[i], all[pick(rng)]);
        }
        DepthIndices out{all[0], all[1], all[2], all[3]};
        std::sort(out.begin(), out.end());
        return out;
    }
    if (delta == 0 || depth < 3 * delta + 1) {
        throw Error("volume too shallow for delta=" + std::to_string(delta) + ": depth " +
                    std::to_string(depth) + " < " + std::to_string(3 * delta + 1));
    }
    std::uniform_int_distribution<std::size_t> base(delta, depth - 1 - 2 * delta);
    return slices_around(depth, delta, base(rng));
}

SliceGroup extract_group(Volume const& v, DepthIndices const& indices) {
    SliceGroup group;
    group.height = v.height();
    group.width = v.width();
    group.depth_indices = indices;
    group.voxel_id = v.voxel_id();
    std::size_t const plane = v.height() * v.width();
    group.slices.reserve(kGroupSize * kModalityCount * plane);
    for (std::size_t d : indices) {
        for (std::size_t m = 0; m < kModalityCount; ++m) {
            auto s = v.slice(m, d);
            group.slices.insert(group.slices.end(), s.begin(), s.end());
        }
    }
    return group;
}

namespace {

void check_mask(std::span<float const> mask, std::size_t height, std::size_t width) {
    if (mask.size() != height * width) {
        throw Error("mask slice has " + std::to_string(mask.size()) + " pixels, expected " +
                    std::to_string(height * width));
    }
}

std::size_t count_fg(std::span<float const> mask) {
    return static_cast<std::size_t>(
        std::count_if(mask.begin(), mask.end(), [](float v) { return v >= 0.5f; }));
}

} // namespace

double box_coverage(std::span<float const> mask_slice, std::size_t height, std::size_t width,
                    PromptBox const& box) {
    check_mask(mask_slice, height, width);
    std::size_t inside = 0;
    std::size_t total = 0;
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            if (mask_slice[y * width + x] >= 0.5f) {
                ++total;
                if (x >= box.x0 && x < box.x1 && y >= box.y0 && y < box.y1) {
                    ++inside;
                }
            }
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(inside) / static_cast<double>(total);
}

PromptBox tight_box(std::span<float const> mask_slice, std::size_t height, std::size_t width) {
    check_mask(mask_slice, height, width);
    PromptBox box;
    box.x0 = width;
    box.y0 = height;
    bool any = false;
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            if (mask_slice[y * width + x] >= 0.5f) {
                any = true;
                box.x0 = std::min(box.x0, x);
                box.y0 = std::min(box.y0, y);
                box.x1 = std::max(box.x1, x + 1);
                box.y1 = std::max(box.y1, y + 1);
            }
        }
    }
    if (!any) {
        throw Error("no foreground for prompt");
    }
    box.achieved_coverage = 1.0;
    return box;
}

PromptBox make_box_prompt(std::span<float const> mask_slice, std::size_t height, std::size_t width,
                          double target_coverage, Rng& rng) {
    if (!(target_coverage > 0.0 && target_coverage <= 1.0)) {
        throw Error("target coverage must lie in (0, 1], got " + std::to_string(target_coverage));
    }
    PromptBox const tight = tight_box(mask_slice, height, width);
    if (target_coverage == 1.0) {
        return tight;
    }
    std::size_t const bw = tight.x1 - tight.x0;
    std::size_t const bh = tight.y1 - tight.y0;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<int> nudge(-1, 1);
    double const side = std::sqrt(target_coverage);
    for (int attempt = 0; attempt < kMaxBoxAttempts; ++attempt) {
        // Contract each axis around sqrt(p) with jitter, then slide the
        // contracted box inside the tight box and nudge it by a pixel.
        double const sx = std::clamp(side + (unit(rng) - 0.5) * 0.4, 0.05, 1.0);
        double const sy = std::clamp(target_coverage / sx + (unit(rng) - 0.5) * 0.2, 0.05, 1.0);
        auto const nw = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(sx * static_cast<double>(bw))));
        auto const nh = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(sy * static_cast<double>(bh))));
        std::uniform_int_distribution<std::size_t> ox(0, bw - std::min(nw, bw));
        std::uniform_int_distribution<std::size_t> oy(0, bh - std::min(nh, bh));
        auto x0 = static_cast<long>(tight.x0 + ox(rng)) + nudge(rng);
        auto y0 = static_cast<long>(tight.y0 + oy(rng)) + nudge(rng);
        x0 = std::clamp<long>(x0, 0, static_cast<long>(width) - 1);
        y0 = std::clamp<long>(y0, 0, static_cast<long>(height) - 1);
        PromptBox box;
        box.x0 = static_cast<std::size_t>(x0);
        box.y0 = static_cast<std::size_t>(y0);
        box.x1 = std::min(width, box.x0 + nw);
        box.y1 = std::min(height, box.y0 + nh);
        box.achieved_coverage = box_coverage(mask_slice, height, width, box);
        if (std::abs(box.achieved_coverage - target_coverage) <= kCoverageTolerance) {
            return box;
        }
    }
    throw Error("no box with coverage within " + std::to_string(kCoverageTolerance) + " of " +
                std::to_string(target_coverage) + " found in " + std::to_string(kMaxBoxAttempts) +
                " attempts");
}

PromptPoint make_point_prompt(std::span<float const> mask_slice, std::size_t height,
                              std::size_t width, Rng& rng) {
    check_mask(mask_slice, height, width);
    std::size_t const total = count_fg(mask_slice);
    if (total == 0) {
        throw Error("no foreground for prompt");
    }
    std::uniform_int_distribution<std::size_t> pick(0, total - 1);
    std::size_t k = pick(rng);
    for (std::size_t i = 0; i < mask_slice.size(); ++i) {
        if (mask_slice[i] >= 0.5f) {
            if (k == 0) {
                return PromptPoint{0, i % width, i / width};
            }
            --k;
        }
    }
    throw Error("unreachable: foreground count changed");
}

} // namespace gbtsam
