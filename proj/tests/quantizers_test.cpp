// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <map>
#include <vector>

#include <gtest/gtest.h>

#include "qsgd/quantizers.hpp"
#include "qsgd/rng.hpp"

using namespace qsgd;

namespace {

// Fraction of n draws in which the first coordinate equals `hit`, with its
// binomial standard error at the claimed probability.
template <class Fn>
void expect_probability(Fn &&draw_is_hit, double p, std::size_t n = 100000)
{
    std::size_t hits = 0;
    for (std::size_t k = 0; k < n; ++k)
        hits += draw_is_hit() ? 1 : 0;
    const double f = static_cast<double>(hits) / n;
    EXPECT_LE(std::abs(f - p), 5.0 * std::sqrt(p * (1 - p) / n)) << "observed " << f << " expected " << p;
}

} // namespace

TEST(Multiplicative, SharedSignOutcomes)
{
    Stream rng(1);
    const std::vector<double> x{1.0, 2.0};
    std::map<std::pair<double, double>, int> seen;
    for (int k = 0; k < 1000; ++k) {
        const auto q = quantize_multiplicative(std::span<const double>(x), 0.04, rng);
        seen[{q[0], q[1]}]++;
    }
    ASSERT_EQ(seen.size(), 2u);
    EXPECT_TRUE(seen.count({1.2, 2.4}));
    EXPECT_TRUE(seen.count({0.8, 1.6}));
    expect_probability(
        [&] { return quantize_multiplicative(std::span<const double>(x), 0.04, rng)[0] > 1.0; }, 0.5);

    const std::vector<double> z{0.0, 0.0, 0.0};
    for (double v : quantize_multiplicative(std::span<const double>(z), 0.3, rng))
        EXPECT_EQ(v, 0.0);
}

TEST(MultiplicativeIndep, IndependentSigns)
{
    Stream rng(2);
    const std::vector<double> one{1.0};
    const auto q1 = quantize_multiplicative_indep(std::span<const double>(one), 0.04, rng);
    EXPECT_TRUE(q1[0] == 1.2 || q1[0] == 0.8);

    const std::vector<double> x{1.0, 1.0};
    std::map<std::pair<double, double>, int> seen;
    for (int k = 0; k < 2000; ++k) {
        const auto q = quantize_multiplicative_indep(std::span<const double>(x), 0.04, rng);
        seen[{q[0], q[1]}]++;
    }
    EXPECT_EQ(seen.size(), 4u);
    expect_probability(
        [&] {
            const auto q = quantize_multiplicative_indep(std::span<const double>(x), 0.04, rng);
            return q[0] > 1.0 && q[1] < 1.0;
        },
        0.25);
}

TEST(Additive, Outcomes)
{
    Stream rng(3);
    const std::vector<double> x{0.0, 0.0};
    bool mixed = false;
    for (int k = 0; k < 200; ++k) {
        const auto q = quantize_additive(std::span<const double>(x), 0.01, rng);
        for (double v : q)
            EXPECT_NEAR(std::abs(v), 0.1, 1e-15);
        mixed |= q[0] != q[1];
    }
    EXPECT_TRUE(mixed);
    const std::vector<double> y{0.3, -1.7, 5.0};
    EXPECT_EQ(quantize_additive(std::span<const double>(y), 0.0, rng), y);
}

TEST(IntRound, Examples)
{
    Stream rng(4);
    const std::vector<double> x{0.3};
    std::map<double, int> seen;
    double sum = 0.0, sum2 = 0.0;
    const int n = 100000;
    for (int k = 0; k < n; ++k) {
        const double v = quantize_int_round(std::span<const double>(x), 1, rng)[0];
        seen[v]++;
        sum += v;
        sum2 += (v - 0.3) * (v - 0.3);
    }
    ASSERT_EQ(seen.size(), 2u);
    EXPECT_TRUE(seen.count(0.0) && seen.count(0.5));
    const double p = static_cast<double>(seen[0.5]) / n;
    EXPECT_LE(std::abs(p - 0.6), 5.0 * std::sqrt(0.24 / n));
    EXPECT_NEAR(rounding_variance(0.3, 0.5), 0.06, 1e-15);

    const std::vector<double> g{0.75, -0.25, 3.0};
    EXPECT_EQ(quantize_int_round(std::span<const double>(g), 2, rng), g);
    EXPECT_THROW(quantize_int_round(std::span<const double>(g), 0, rng), std::invalid_argument);
}

TEST(IntRound, VarianceMatchesAnalytic)
{
    Stream rng(5);
    const std::vector<double> x{0.3};
    const int n = 100000;
    double s1 = 0.0, s2 = 0.0;
    for (int k = 0; k < n; ++k) {
        const double e = quantize_int_round(std::span<const double>(x), 3, rng)[0] - 0.3;
        s1 += e * e;
        s2 += e * e * e * e;
    }
    const double m = s1 / n;
    const double se = std::sqrt((s2 / n - m * m) / n);
    EXPECT_NEAR(rounding_variance(0.3, 0.125), 0.05 * 0.075, 1e-15);
    EXPECT_LE(std::abs(m - 0.00375), 5.0 * se);
}

TEST(IntRound, TranslationOnGrid)
{
    const double delta = std::ldexp(1.0, -3);
    for (double x : {0.3, -0.61, 1.04}) {
        for (int k : {-5, 1, 7}) {
            Stream r1(77), r2(77);
            const std::vector<double> a{x}, b{x + k * delta};
            const double ea = quantize_int_round(std::span<const double>(a), 3, r1)[0] - a[0];
            const double eb = quantize_int_round(std::span<const double>(b), 3, r2)[0] - b[0];
            EXPECT_NEAR(ea, eb, 1e-12);
        }
    }
}

TEST(FpRound, Examples)
{
    Stream rng(6);
    EXPECT_DOUBLE_EQ(fp_grid_step(1.3, 1), 0.5);
    const std::vector<double> x{1.3};
    std::map<double, int> seen;
    const int n = 100000;
    for (int k = 0; k < n; ++k)
        seen[quantize_fp_round(std::span<const double>(x), 1, rng)[0]]++;
    ASSERT_EQ(seen.size(), 2u);
    const double p = static_cast<double>(seen[1.5]) / n;
    EXPECT_LE(std::abs(p - 0.6), 5.0 * std::sqrt(0.24 / n));
    EXPECT_EQ(seen[1.0] + seen[1.5], n);

    const std::vector<double> g{2.0, 0.0, -4.0};
    EXPECT_EQ(quantize_fp_round(std::span<const double>(g), 0, rng), g);
    EXPECT_THROW(quantize_fp_round(std::span<const double>(g), -1, rng), std::invalid_argument);
}

TEST(FpRound, RelativeSecondMoment)
{
    Stream rng(7);
    const double x0 = 1.3;
    const std::vector<double> x{x0};
    const double delta = fp_grid_step(x0, 4);
    const double analytic = rounding_variance(x0, delta) / (x0 * x0);
    const int n = 100000;
    double s1 = 0.0, s2 = 0.0;
    for (int k = 0; k < n; ++k) {
        const double r = quantize_fp_round(std::span<const double>(x), 4, rng)[0] / x0 - 1.0;
        s1 += r * r;
        s2 += r * r * r * r;
    }
    const double m = s1 / n;
    const double se = std::sqrt((s2 / n - m * m) / n);
    EXPECT_LE(std::abs(m - analytic), 5.0 * se);
}

TEST(ErrorMoment, MatchesModels)
{
    Stream rng(8);
    const std::vector<double> x{1.0, 2.0};
    const std::size_t n = 100000;

    const auto zero = empirical_error_moment(QuantizerSpec::identity(), std::span<const double>(x), 10, rng);
    for (double v : zero)
        EXPECT_EQ(v, 0.0);

    // two-point noise: each entry of e e^T is a constant times s_i s_j, so
    // its sample mean has standard error |c| sqrt(1 - E[s_i s_j]^2) / sqrt(n)
    const auto add = empirical_error_moment(QuantizerSpec::additive(0.01), std::span<const double>(x), n, rng);
    // exact per draw; only summation rounding remains
    EXPECT_NEAR(add[0], 0.01, 1e-13);
    EXPECT_NEAR(add[3], 0.01, 1e-13);
    EXPECT_LE(std::abs(add[1]), 5.0 * 0.01 / std::sqrt(double(n)));

    const auto mul = empirical_error_moment(QuantizerSpec::multiplicative(0.01), std::span<const double>(x), n, rng);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
            EXPECT_NEAR(mul[i * 2 + j], 0.01 * x[i] * x[j], 1e-11 * 0.01 * x[i] * x[j]);

    EXPECT_THROW(empirical_error_moment(QuantizerSpec::additive(0.1), std::span<const double>(x), 0, rng),
                 std::invalid_argument);
}

TEST(Identity, BitExact)
{
    Stream rng(9);
    const std::vector<double> x{0.1, -3.3, 1e-300, 7e200};
    for (const auto &q : {QuantizerSpec::identity(), QuantizerSpec::multiplicative(0.0),
                          QuantizerSpec::multiplicative_indep(0.0), QuantizerSpec::additive(0.0)}) {
        EXPECT_TRUE(q.is_identity());
        EXPECT_EQ(quantize(q, std::span<const double>(x), rng), x);
    }
    EXPECT_FALSE(QuantizerSpec::int_round(8).is_identity());
}

TEST(Spec, ParseAndValidate)
{
    for (auto k : {QuantizerKind::identity, QuantizerKind::multiplicative, QuantizerKind::multiplicative_indep,
                   QuantizerKind::additive, QuantizerKind::int_round, QuantizerKind::fp_round})
        EXPECT_EQ(parse_quantizer_kind(to_string(k)), k);
    EXPECT_FALSE(parse_quantizer_kind("nearest").has_value());
    EXPECT_THROW(QuantizerSpec::additive(-0.1).validate(), std::invalid_argument);
    EXPECT_THROW(QuantizerSpec::int_round(0).validate(), std::invalid_argument);
    EXPECT_THROW(QuantizerSpec::fp_round(-2).validate(), std::invalid_argument);
    EXPECT_NO_THROW(QuantizerSpec::fp_round(0).validate());
}

TEST(Spec, ConditionalVariance)
{
    EXPECT_DOUBLE_EQ(conditional_error_variance(QuantizerSpec::multiplicative(0.01), 3.0), 0.09);
    EXPECT_DOUBLE_EQ(conditional_error_variance(QuantizerSpec::additive(0.02), 3.0), 0.02);
    EXPECT_DOUBLE_EQ(conditional_error_variance(QuantizerSpec::int_round(1), 0.3), 0.06);
    EXPECT_DOUBLE_EQ(conditional_error_variance(QuantizerSpec::fp_round(1), 1.3), 0.3 * 0.2);
    EXPECT_DOUBLE_EQ(conditional_error_variance(QuantizerSpec::fp_round(1), 0.0), 0.0);
    const std::vector<double> v{1.0, -2.0};
    EXPECT_DOUBLE_EQ(conditional_error_norm(QuantizerSpec::multiplicative(0.1), v), 0.5);
    EXPECT_DOUBLE_EQ(conditional_error_norm(QuantizerSpec::multiplicative_indep(0.1), v), 0.4);
    EXPECT_DOUBLE_EQ(conditional_error_norm(QuantizerSpec::additive(0.1), v), 0.1);
}
