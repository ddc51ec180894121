#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "mflt/evaluate.hpp"
#include "mflt/simulate.hpp"

using namespace mflt;

namespace {

std::vector<double> linspace(double a, double b, int n) {
    std::vector<double> out(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = a + (b - a) * i / (n - 1);
    return out;
}

}  // namespace

TEST_CASE("potential gradients") {
    SECTION("bifurcation stationary points") {
        auto spec = PotentialSpec::bifurcation();
        RowVec x = RowVec::Zero(10);
        REQUIRE(spec.gradient(0.0, x).cwiseAbs().maxCoeff() == 0.0);
        x[0] = 1.5;
        REQUIRE(spec.gradient(0.0, x)[0] == Catch::Approx(0.0).margin(1e-14));
    }
    SECTION("analytic gradients match finite differences") {
        std::mt19937 gen(8);
        std::uniform_real_distribution<double> unif(-1.5, 1.5);
        const double h = 1e-6;
        for (auto spec : {PotentialSpec::bifurcation(), PotentialSpec::bistable(),
                          PotentialSpec::quadratic(10, 2.5)}) {
            for (int trial = 0; trial < 5; ++trial) {
                RowVec x(10);
                for (int j = 0; j < 10; ++j) x[j] = unif(gen);
                const double t = 0.5 * std::abs(unif(gen));
                const RowVec g = spec.gradient(t, x);
                RowVec fd(10);
                for (int j = 0; j < 10; ++j) {
                    RowVec xp = x, xm = x;
                    xp[j] += h;
                    xm[j] -= h;
                    fd[j] = (spec.value(t, xp) - spec.value(t, xm)) / (2 * h);
                }
                REQUIRE((g - fd).norm() <= 1e-6 * std::max(1.0, fd.norm()));
            }
        }
    }
    SECTION("dimension mismatch is a configuration error") {
        auto spec = PotentialSpec::bifurcation();
        REQUIRE_THROWS_AS(spec.gradient(0.0, RowVec::Zero(3)), config_error);
    }
}

TEST_CASE("euler-maruyama basics") {
    SECTION("no drift, no noise: particles are immobile") {
        auto spec = PotentialSpec::quadratic(2, 0.0);
        auto sim = euler_maruyama(spec, 0.0, {0.5, 0.2}, 20, 0.0, 1.0, 1e-2, std::nullopt, 3,
                                  linspace(0.0, 1.0, 5));
        for (const auto& p : sim.particles) {
            REQUIRE(p.positions.size() == 5);
            for (const auto& pos : p.positions)
                REQUIRE((pos - p.positions.front()).norm() == 0.0);
        }
    }
    SECTION("zero growth keeps the population constant") {
        auto spec = PotentialSpec::quadratic(2, 1.0);
        auto sim = euler_maruyama(spec, 0.5, {0.0, 0.3}, 50, 0.0, 0.5, 1e-2,
                                  GrowthPrior::constant(0.0), 5, linspace(0.0, 0.5, 4));
        REQUIRE(sim.particles.size() == 50);
        REQUIRE(sim.live_at(3).size() == 50);
    }
    SECTION("quadratic well with no noise follows the exact ODE") {
        auto spec = PotentialSpec::quadratic(1, 1.0);
        auto sim = euler_maruyama(spec, 0.0, {1.0, 0.0}, 1, 0.0, 1.0, 1e-4, std::nullopt, 1,
                                  {0.0, 0.5, 1.0});
        REQUIRE(sim.particles[0].positions[0][0] == Catch::Approx(1.0));
        REQUIRE(sim.particles[0].positions[1][0] == Catch::Approx(std::exp(-0.5)).margin(1e-3));
        REQUIRE(sim.particles[0].positions[2][0] == Catch::Approx(std::exp(-1.0)).margin(1e-3));
    }
    SECTION("independent particles have uncorrelated increments") {
        auto spec = PotentialSpec::quadratic(1, 0.0);
        const int n = 4000;
        auto sim = euler_maruyama(spec, 1.0, {0.0, 0.0}, n, 0.0, 0.5, 0.25, std::nullopt, 11,
                                  {0.0, 0.25, 0.5});
        double c01 = 0.0, v0 = 0.0, v1 = 0.0;
        for (int i = 0; i + 1 < n; i += 2) {
            const auto& a = sim.particles[static_cast<std::size_t>(i)];
            const auto& b = sim.particles[static_cast<std::size_t>(i + 1)];
            const double da = a.positions[2][0] - a.positions[0][0];
            const double db = b.positions[2][0] - b.positions[0][0];
            c01 += da * db;
            v0 += da * da;
            v1 += db * db;
        }
        const double corr = c01 / std::sqrt(v0 * v1);
        REQUIRE(std::abs(corr) <= 3.0 / std::sqrt(static_cast<double>(n / 2)));
    }
}

TEST_CASE("branching") {
    auto flat = PotentialSpec::quadratic(2, 0.0);

    SECTION("constant growth matches the exponential mean") {
        const int n0 = 1000;
        const double g = 1.0, t_end = 0.5;
        auto sim = euler_maruyama(flat, 0.0, {0.0, 0.0}, n0, 0.0, t_end, 1e-3,
                                  GrowthPrior::constant(g), 17, {0.0, t_end});
        const double pop = static_cast<double>(sim.live_at(1).size());
        const double mean = n0 * std::exp(g * t_end);
        const double sd = std::sqrt(n0 * std::exp(g * t_end) * (std::exp(g * t_end) - 1.0));
        REQUIRE(std::abs(pop - mean) <= 3 * sd);
        // lineage bookkeeping: children carry their parent ids
        bool found_child = false;
        for (const auto& p : sim.particles)
            if (p.parent >= 0) {
                found_child = true;
                REQUIRE(p.parent < p.id);
            }
        REQUIRE(found_child);
    }
    SECTION("negative growth removes particles") {
        const int n0 = 1000;
        auto sim = euler_maruyama(flat, 0.0, {0.0, 0.0}, n0, 0.0, 0.5, 1e-3,
                                  GrowthPrior::constant(-1.0), 19, {0.0, 0.5});
        const double pop = static_cast<double>(sim.live_at(1).size());
        const double mean = n0 * std::exp(-0.5);
        REQUIRE(std::abs(pop - mean) <= 3 * std::sqrt(n0 * std::exp(-0.5) * (1 - std::exp(-0.5))) + 10);
    }
    SECTION("invalid bernoulli probability is rejected") {
        REQUIRE_THROWS_AS(euler_maruyama(flat, 0.0, {0.0, 0.0}, 5, 0.0, 1.0, 0.5,
                                         GrowthPrior::constant(3.0), 1, {0.0, 1.0}),
                          config_error);
    }
}

TEST_CASE("benchmark behaviors") {
    SECTION("bifurcation splits into two branches") {
        auto spec = PotentialSpec::bifurcation();
        auto sim = euler_maruyama(spec, 0.25, {0.0, 0.1}, 400, 0.0, 1.25, 2e-3, std::nullopt, 23,
                                  linspace(0.0, 1.25, 10));
        int positive = 0;
        for (const auto& p : sim.particles)
            if (p.positions.back()[0] > 0.0) ++positive;
        const double frac = positive / 400.0;
        REQUIRE(frac >= 0.3);
        REQUIRE(frac <= 0.7);
    }
    SECTION("bistable roots favor the lower branch despite upper growth") {
        auto spec = PotentialSpec::bistable();
        auto sim = euler_maruyama(spec, 1.0, {0.0, 0.1}, 250, 0.0, 0.5, 1e-3,
                                  GrowthPrior::tanh_first_coord(), 29, linspace(0.0, 0.5, 10));
        auto paths = root_paths(sim);
        REQUIRE(paths.size() == 250);
        auto classifier = BranchClassifier::nearest(spec.well_b(), spec.well_a(), 2);
        const double frac = branch_fraction(paths, classifier);
        REQUIRE(frac >= 0.62);
        REQUIRE(frac <= 0.82);
        // branching inflates the upper branch in the observed population
        const int last = static_cast<int>(sim.record_times.size()) - 1;
        int upper = 0, total = 0;
        for (const auto& p : sim.particles)
            if (p.covers(last)) {
                ++total;
                if (!classifier.matches(p.at(last))) ++upper;
            }
        REQUIRE(total > 250);  // branching happened
        const double leaf_upper = static_cast<double>(upper) / total;
        const double root_upper = 1.0 - frac;
        REQUIRE(leaf_upper > root_upper);
    }
}

TEST_CASE("snapshot extraction") {
    auto spec = PotentialSpec::quadratic(2, 1.0);

    SECTION("count = population returns the whole population") {
        auto sim = euler_maruyama(spec, 0.3, {0.0, 0.5}, 30, 0.0, 1.0, 1e-2, std::nullopt, 31,
                                  {0.0, 0.5, 1.0});
        auto series = extract_snapshots(sim, {0.5, 1.0}, {30, 30}, 7);
        // the t = 0.5 snapshot must equal the live population as a multiset
        std::vector<std::vector<double>> got, want;
        for (int r = 0; r < 30; ++r) {
            const RowVec row = series.snapshots[0].points.row(r);
            got.emplace_back(row.data(), row.data() + row.size());
            const RowVec& pos = sim.particles[static_cast<std::size_t>(r)].at(1);
            want.emplace_back(pos.data(), pos.data() + pos.size());
        }
        std::sort(got.begin(), got.end());
        std::sort(want.begin(), want.end());
        REQUIRE(got == want);
    }
    SECTION("disjoint sampling across times when the population permits") {
        auto sim = euler_maruyama(spec, 0.3, {0.0, 0.5}, 40, 0.0, 1.0, 1e-2, std::nullopt, 37,
                                  {0.0, 0.5, 1.0});
        auto series = extract_snapshots(sim, {0.0, 0.5, 1.0}, {10, 10, 10}, 9);
        REQUIRE(series.count() == 3);
        // reconstruct which ids were used by matching positions
        std::set<std::int64_t> seen;
        int reused = 0;
        for (int ti = 0; ti < 3; ++ti) {
            const auto& snap = series.snapshots[static_cast<std::size_t>(ti)];
            for (int r = 0; r < snap.size(); ++r) {
                for (const auto& p : sim.particles)
                    if ((p.at(ti) - RowVec(snap.points.row(r))).norm() == 0.0) {
                        if (seen.count(p.id)) ++reused;
                        seen.insert(p.id);
                    }
            }
        }
        REQUIRE(reused == 0);
    }
    SECTION("oversampling the live population fails") {
        auto sim = euler_maruyama(spec, 0.3, {0.0, 0.5}, 10, 0.0, 1.0, 1e-2, std::nullopt, 41,
                                  {0.0, 1.0});
        REQUIRE_THROWS_AS(extract_snapshots(sim, {1.0}, {11}, 3), input_error);
    }
    SECTION("unrecorded times are rejected") {
        auto sim = euler_maruyama(spec, 0.3, {0.0, 0.5}, 10, 0.0, 1.0, 1e-2, std::nullopt, 43,
                                  {0.0, 1.0});
        REQUIRE_THROWS_AS(extract_snapshots(sim, {0.25}, {5}, 3), config_error);
    }
}
