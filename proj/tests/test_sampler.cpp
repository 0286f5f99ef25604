#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <random>

#include <boost/math/distributions/chi_squared.hpp>

#include "gbtsam/error.hpp"
#include "gbtsam/sampler.hpp"

using namespace gbtsam;

namespace {

std::vector<float> random_mask(std::size_t h, std::size_t w, std::mt19937_64& rng, double density) {
    std::bernoulli_distribution b(density);
    std::vector<float> m(h * w);
    for (auto& x : m) {
        x = b(rng) ? 1.0f : 0.0f;
    }
    return m;
}

// Foreground pixels inside the half-open box, counted directly.
double coverage_oracle(std::vector<float> const& m, std::size_t w, PromptBox const& b) {
    std::size_t in = 0, total = 0;
    for (std::size_t i = 0; i < m.size(); ++i) {
        if (m[i] == 1.0f) {
            ++total;
            std::size_t const x = i % w, y = i / w;
            in += x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1;
        }
    }
    return double(in) / double(total);
}

std::vector<float> disc(std::size_t h, std::size_t w, double cy, double cx, double r) {
    std::vector<float> m(h * w, 0.0f);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double const dy = double(y) - cy, dx = double(x) - cx;
            m[y * w + x] = dy * dy + dx * dx <= r * r ? 1.0f : 0.0f;
        }
    }
    return m;
}

} // namespace

TEST(SelectSlices, FormulaExamples) {
    EXPECT_EQ(slices_around(155, 1, 70), (DepthIndices{69, 70, 71, 72}));
    EXPECT_EQ(slices_around(155, 4, 50), (DepthIndices{46, 50, 54, 58}));
    EXPECT_EQ(slices_around(155, 10, 10), (DepthIndices{0, 10, 20, 30}));
    EXPECT_THROW(slices_around(155, 1, 0), Error);
    EXPECT_THROW(slices_around(155, 1, 153), Error);
}

TEST(SelectSlices, TooShallowVolume) {
    std::mt19937_64 rng(0);
    try {
        select_slices(12, 4, rng);
        FAIL();
    } catch (Error const& e) {
        EXPECT_NE(std::string(e.what()).find("volume too shallow for delta=4"), std::string::npos);
    }
    EXPECT_NO_THROW(select_slices(13, 4, rng));
    EXPECT_NO_THROW(select_slices(4, 1, rng));
    EXPECT_THROW(select_slices(3, 1, rng), Error);
}

TEST(SelectSlices, InBoundsAndSpacedForAllGaps) {
    std::mt19937_64 rng(3);
    for (std::size_t delta : {1u, 4u, 10u}) {
        for (std::size_t depth : {3 * delta + 1, 40ul, 155ul}) {
            for (int i = 0; i < 2000; ++i) {
                auto idx = select_slices(depth, delta, rng);
                for (std::size_t g = 1; g < kGroupSize; ++g) {
                    ASSERT_EQ(idx[g] - idx[g - 1], delta);
                }
                ASSERT_LE(idx[3], depth - 1);
            }
        }
    }
}

TEST(SelectSlices, BaseIndexIsUniform) {
    constexpr std::size_t D = 155;
    constexpr int draws = 100000;
    std::mt19937_64 rng(2024);
    std::vector<double> counts(D, 0.0);
    for (int i = 0; i < draws; ++i) {
        counts[select_slices(D, 1, rng)[1]] += 1;
    }
    std::size_t const lo = 1, hi = D - 3;
    double const expected = double(draws) / double(hi - lo + 1);
    double chi2 = 0.0;
    for (std::size_t b = 0; b < D; ++b) {
        if (b < lo || b > hi) {
            ASSERT_EQ(counts[b], 0.0) << "base " << b << " out of range";
            continue;
        }
        chi2 += (counts[b] - expected) * (counts[b] - expected) / expected;
    }
    boost::math::chi_squared dist(double(hi - lo));
    double const p = boost::math::cdf(boost::math::complement(dist, chi2));
    EXPECT_GT(p, 0.01) << "chi2 " << chi2;
}

TEST(SelectSlices, RandomModeDistinctSorted) {
    std::mt19937_64 rng(5);
    for (int i = 0; i < 5000; ++i) {
        auto idx = select_slices(10, 1, rng, SliceStrategy::random);
        for (std::size_t g = 1; g < kGroupSize; ++g) {
            ASSERT_LT(idx[g - 1], idx[g]);
        }
        ASSERT_LT(idx[3], 10u);
    }
    EXPECT_THROW(select_slices(3, 1, rng, SliceStrategy::random), Error);
}

TEST(SelectSlices, SampledFractionOfDeepScan) {
    // Four slices out of 155.
    EXPECT_LT(4.0 / 155.0, 0.026);
    EXPECT_NEAR(4.0 / 155.0, 0.0258, 5e-5);
}

TEST(ExtractGroup, CopiesSlicesInGroupOrder) {
    VolumeHeader h;
    h.height = 2;
    h.width = 2;
    h.depth = 6;
    std::vector<float> data(kModalityCount * 6 * 4);
    for (std::size_t i = 0; i < data.size(); ++i) {
        data[i] = float(i);
    }
    Volume v(h, data);
    auto g = extract_group(v, {1, 2, 3, 4});
    for (std::size_t k = 0; k < kGroupSize; ++k) {
        for (std::size_t m = 0; m < kModalityCount; ++m) {
            for (std::size_t p = 0; p < 4; ++p) {
                EXPECT_EQ(g.slice(k)[m * 4 + p], v.at(m, k + 1, p / 2, p % 2));
            }
        }
    }
}

TEST(BoxPrompt, FullCoverageIsTightBox) {
    std::mt19937_64 rng(1);
    auto m = disc(32, 32, 12, 18, 5);
    auto box = make_box_prompt(m, 32, 32, 1.0, rng);
    EXPECT_EQ(box.x0, 13u);
    EXPECT_EQ(box.x1, 24u);
    EXPECT_EQ(box.y0, 7u);
    EXPECT_EQ(box.y1, 18u);
    EXPECT_DOUBLE_EQ(box.achieved_coverage, 1.0);
}

TEST(BoxPrompt, SinglePixelTumor) {
    std::mt19937_64 rng(1);
    std::vector<float> m(64, 0.0f);
    m[3 * 8 + 5] = 1.0f;
    auto box = make_box_prompt(m, 8, 8, 1.0, rng);
    EXPECT_EQ(box.x0, 5u);
    EXPECT_EQ(box.x1, 6u);
    EXPECT_EQ(box.y0, 3u);
    EXPECT_EQ(box.y1, 4u);
}

TEST(BoxPrompt, PartialCoverageStaysInBand) {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 300; ++trial) {
        auto m = disc(32, 32, 6 + 20 * u(rng), 6 + 20 * u(rng), 3 + 3 * u(rng));
        for (double p : {0.5, 0.75, 0.9}) {
            PromptBox box;
            try {
                box = make_box_prompt(m, 32, 32, p, rng);
            } catch (Error const&) {
                continue; // an error is allowed; an out-of-band box is not
            }
            double const c = coverage_oracle(m, 32, box);
            EXPECT_DOUBLE_EQ(c, box.achieved_coverage);
            EXPECT_GE(c, p - 0.05 - 1e-12);
            EXPECT_LE(c, p + 0.05 + 1e-12);
            EXPECT_LT(box.x0, box.x1);
            EXPECT_LT(box.y0, box.y1);
            EXPECT_LE(box.x1, 32u);
            EXPECT_LE(box.y1, 32u);
        }
    }
}

TEST(BoxPrompt, ThreeQuarterCoverageOnTypicalTumor) {
    std::mt19937_64 rng(2);
    auto m = disc(32, 32, 16, 16, 6);
    auto box = make_box_prompt(m, 32, 32, 0.75, rng);
    EXPECT_GE(box.achieved_coverage, 0.70);
    EXPECT_LE(box.achieved_coverage, 0.80);
}

TEST(BoxPrompt, Errors) {
    std::mt19937_64 rng(1);
    std::vector<float> empty(64, 0.0f);
    try {
        make_box_prompt(empty, 8, 8, 1.0, rng);
        FAIL();
    } catch (Error const& e) {
        EXPECT_NE(std::string(e.what()).find("no foreground for prompt"), std::string::npos);
    }
    // Two pixels cannot be covered at 75% +- 5%.
    std::vector<float> two(64, 0.0f);
    two[0] = two[63] = 1.0f;
    EXPECT_THROW(make_box_prompt(two, 8, 8, 0.75, rng), Error);
    EXPECT_THROW(make_box_prompt(two, 8, 8, 0.0, rng), Error);
    EXPECT_THROW(make_box_prompt(two, 8, 8, 1.5, rng), Error);
}

TEST(PointPrompt, AlwaysOnForeground) {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> dens(0.01, 0.5);
    for (int trial = 0; trial < 1000; ++trial) {
        auto m = random_mask(16, 16, rng, dens(rng));
        if (std::count(m.begin(), m.end(), 1.0f) == 0) {
            m[rng() % m.size()] = 1.0f;
        }
        auto p = make_point_prompt(m, 16, 16, rng);
        ASSERT_EQ(m[p.y * 16 + p.x], 1.0f);
    }
}

TEST(PointPrompt, SinglePixelAndDeterminism) {
    std::vector<float> m(64, 0.0f);
    m[2 * 8 + 6] = 1.0f;
    std::mt19937_64 rng(1);
    auto p = make_point_prompt(m, 8, 8, rng);
    EXPECT_EQ(p.x, 6u);
    EXPECT_EQ(p.y, 2u);

    std::mt19937_64 a(42), b(42);
    std::mt19937_64 g(3);
    auto big = random_mask(16, 16, g, 0.3);
    for (int i = 0; i < 20; ++i) {
        auto pa = make_point_prompt(big, 16, 16, a);
        auto pb = make_point_prompt(big, 16, 16, b);
        EXPECT_EQ(pa.x, pb.x);
        EXPECT_EQ(pa.y, pb.y);
    }
    EXPECT_THROW(make_point_prompt(std::vector<float>(64, 0.0f), 8, 8, rng), Error);
}

TEST(PointPrompt, UniformOverForeground) {
    std::vector<float> m(16, 0.0f);
    m[1] = m[5] = m[10] = m[15] = 1.0f;
    std::mt19937_64 rng(8);
    std::map<std::size_t, int> counts;
    for (int i = 0; i < 40000; ++i) {
        auto p = make_point_prompt(m, 4, 4, rng);
        ++counts[p.y * 4 + p.x];
    }
    double chi2 = 0;
    for (auto [k, c] : counts) {
        chi2 += (c - 10000.0) * (c - 10000.0) / 10000.0;
    }
    boost::math::chi_squared dist(3.0);
    EXPECT_GT(boost::math::cdf(boost::math::complement(dist, chi2)), 0.01);
}
