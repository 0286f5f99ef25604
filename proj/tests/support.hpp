#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "gbtsam/autograd.hpp"
#include "gbtsam/encoder.hpp"
#include "gbtsam/model.hpp"
#include "gbtsam/sampler.hpp"
#include "gbtsam/training.hpp"
#include "gbtsam/volume.hpp"

namespace gbtsam::test {

class TempDir {
  public:
    TempDir() {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("gbtsam-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(TempDir const&) = delete;
    TempDir& operator=(TempDir const&) = delete;
    std::filesystem::path const& path() const { return path_; }
    std::filesystem::path operator/(std::string const& name) const { return path_ / name; }

  private:
    std::filesystem::path path_;
};

// 8x8 image, p=4, d=16: small enough for finite differences.
inline EncoderConfig tiny_config(std::uint64_t seed = 1) {
    EncoderConfig c;
    c.image_height = 8;
    c.image_width = 8;
    c.patch_size = 4;
    c.embed_dim = 16;
    c.blocks = 2;
    c.heads = 2;
    c.mlp_dim = 32;
    c.lora_rank = 2;
    c.depth_hidden = 8;
    c.init_seed = seed;
    return c;
}

inline SliceGroup random_group(std::size_t h, std::size_t w, std::mt19937_64& rng) {
    std::normal_distribution<float> n(0.0f, 1.0f);
    SliceGroup g;
    g.height = h;
    g.width = w;
    g.depth_indices = {0, 1, 2, 3};
    g.slices.resize(kGroupSize * kModalityCount * h * w);
    for (auto& v : g.slices) {
        v = n(rng);
    }
    return g;
}

inline void randomize(ag::Var v, std::mt19937_64& rng, double stddev) {
    std::normal_distribution<double> n(0.0, stddev);
    for (auto& x : v.mutable_value()) {
        x = n(rng);
    }
}

struct GradMismatch {
    std::string name;
    std::size_t index;
    double analytic;
    double numeric;
    double rel;
};

// |a - n| / max(|a|, |n|, floor).
inline double relative_error(double a, double n, double floor = 1e-6) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

// Central differences of `loss` against every entry of the named leaves.
// Returns entries whose relative error reaches `tol`, plus the maximum seen.
inline std::vector<GradMismatch> check_gradients(std::function<ag::Var()> const& loss,
                                                 std::vector<std::pair<std::string, ag::Var>> const& leaves,
                                                 double tol, double* max_rel = nullptr, double h = 1e-5) {
    for (auto const& [name, v] : leaves) {
        ag::Var(v).set_requires_grad(true);
        ag::Var(v).zero_grad();
    }
    ag::backward(loss());
    std::vector<GradMismatch> bad;
    double worst = 0.0;
    for (auto const& [name, leaf] : leaves) {
        ag::Var v = leaf;
        std::vector<double> analytic(v.grad().begin(), v.grad().end());
        for (std::size_t i = 0; i < v.size(); ++i) {
            double const orig = v.value()[i];
            v.mutable_value()[i] = orig + h;
            double const up = loss().item();
            v.mutable_value()[i] = orig - h;
            double const down = loss().item();
            v.mutable_value()[i] = orig;
            double const numeric = (up - down) / (2.0 * h);
            double const rel = relative_error(analytic[i], numeric);
            worst = std::max(worst, rel);
            if (rel >= tol) {
                bad.push_back({name, i, analytic[i], numeric, rel});
            }
        }
    }
    if (max_rel != nullptr) {
        *max_rel = worst;
    }
    return bad;
}

// Number of nonzero entries.
inline std::size_t count_nonzero(std::span<float const> xs) {
    std::size_t n = 0;
    for (float x : xs) {
        n += x != 0.0f;
    }
    return n;
}

} // namespace gbtsam::test

namespace gbtsam::test {

// 16x16 image, p=4: the smallest size that holds a phantom tumor comfortably.
inline EncoderConfig small_image_config(std::uint64_t seed = 1) {
    auto c = tiny_config(seed);
    c.image_height = 16;
    c.image_width = 16;
    return c;
}

inline Phantom small_phantom(std::uint64_t seed, std::size_t size = 16, std::size_t depth = 16) {
    PhantomSpec s;
    s.height = size;
    s.width = size;
    s.depth = depth;
    s.radius_min = 2.0;
    s.radius_max = 4.0;
    s.seed = seed;
    return generate_phantom(s);
}

inline std::vector<TrainingSample> small_training_set(std::size_t count, std::uint64_t seed = 100) {
    std::vector<TrainingSample> out;
    for (std::size_t i = 0; i < count; ++i) {
        auto p = small_phantom(seed + i);
        out.push_back({normalize(p.volume), p.mask});
    }
    return out;
}

} // namespace gbtsam::test
