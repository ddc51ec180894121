#include <catch2/catch_amalgamated.hpp>

#include "mflt/types.hpp"

using namespace mflt;

namespace {

Snapshot point_snapshot(double t, std::initializer_list<double> coords) {
    Cloud pts(1, static_cast<Eigen::Index>(coords.size()));
    int j = 0;
    for (double c : coords) pts(0, j++) = c;
    return Snapshot(t, pts);
}

SnapshotSeries series_at(const std::vector<double>& times, int dim = 1) {
    std::vector<Snapshot> snaps;
    for (double t : times) {
        Cloud pts = Cloud::Zero(1, dim);
        pts(0, 0) = t;  // arbitrary content
        snaps.emplace_back(t, pts);
    }
    return SnapshotSeries(std::move(snaps));
}

}  // namespace

TEST_CASE("snapshot validation and weight normalization") {
    Cloud pts(2, 2);
    pts << 0, 0, 1, 1;

    SECTION("default weights are uniform") {
        Snapshot s(0.0, pts);
        REQUIRE(s.weights.size() == 2);
        REQUIRE(s.weights[0] == Catch::Approx(0.5));
        REQUIRE(s.weights.sum() == Catch::Approx(1.0).margin(1e-12));
    }
    SECTION("weights renormalize on ingestion") {
        Vector w(2);
        w << 3.0, 1.0;
        Snapshot s(0.0, pts, w);
        REQUIRE(s.weights[0] == Catch::Approx(0.75));
        REQUIRE(s.weights.sum() == Catch::Approx(1.0).margin(1e-12));
    }
    SECTION("rejects bad inputs") {
        REQUIRE_THROWS_AS(Snapshot(0.0, Cloud()), config_error);
        Vector w(2);
        w << -1.0, 2.0;
        REQUIRE_THROWS_AS(Snapshot(0.0, pts, w), input_error);
        Cloud bad = pts;
        bad(0, 0) = std::nan("");
        REQUIRE_THROWS_AS(Snapshot(0.0, bad), input_error);
    }
}

TEST_CASE("series requires at least two strictly increasing times") {
    REQUIRE_THROWS_AS(series_at({0.5}), config_error);
    std::vector<Snapshot> snaps;
    snaps.push_back(point_snapshot(0.0, {0.0}));
    snaps.push_back(point_snapshot(0.0, {1.0}));
    REQUIRE_THROWS_AS(SnapshotSeries(std::move(snaps)), config_error);

    std::vector<Snapshot> mixed;
    mixed.push_back(point_snapshot(0.0, {0.0}));
    mixed.push_back(point_snapshot(1.0, {0.0, 1.0}));
    REQUIRE_THROWS_AS(SnapshotSeries(std::move(mixed)), config_error);
}

TEST_CASE("times are mapped to [0,1], originals kept") {
    auto series = series_at({2.0, 2.5, 4.0});
    REQUIRE(series.times01[0] == 0.0);
    REQUIRE(series.times01[1] == Catch::Approx(0.25));
    REQUIRE(series.times01[2] == 1.0);
    REQUIRE(series.original_time(1) == 2.5);
    REQUIRE(series.to_original(0.25) == Catch::Approx(2.5));
}

TEST_CASE("delta_t weights follow the boundary convention") {
    SECTION("three point series") {
        auto dt = delta_t_weights(series_at({0.0, 0.5, 1.0}));
        REQUIRE(dt == std::vector<double>{0.25, 0.5, 0.25});
    }
    SECTION("two point series") {
        auto dt = delta_t_weights(series_at({0.0, 1.0}));
        REQUIRE(dt == std::vector<double>{0.5, 0.5});
    }
    SECTION("uneven spacing, hand-derived") {
        auto dt = delta_t_weights(series_at({0.0, 0.1, 0.9, 1.0}));
        REQUIRE(dt[0] == Catch::Approx(0.05));
        REQUIRE(dt[1] == Catch::Approx(0.45));
        REQUIRE(dt[2] == Catch::Approx(0.45));
        REQUIRE(dt[3] == Catch::Approx(0.05));
    }
    SECTION("invariant under affine time rescaling") {
        auto a = delta_t_weights(series_at({0.0, 0.1, 0.9, 1.0}));
        auto b = delta_t_weights(series_at({10.0, 10.4, 13.6, 14.0}));  // 10 + 4*t
        for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a[i] == Catch::Approx(b[i]));
    }
}

TEST_CASE("derive_intervals scales tau by interval length") {
    SECTION("even three point series") {
        auto iv = derive_intervals(series_at({0.0, 0.5, 1.0}), 0.25);
        REQUIRE(iv.size() == 2);
        REQUIRE(iv[0].tau_i == Catch::Approx(0.125));
        REQUIRE(iv[1].tau_i == Catch::Approx(0.125));
    }
    SECTION("single interval identity") {
        auto iv = derive_intervals(series_at({0.0, 1.0}), 1.0);
        REQUIRE(iv.size() == 1);
        REQUIRE(iv[0].tau_i == Catch::Approx(1.0));
    }
    SECTION("ten evenly spaced times on [0, 1.25], rescaled") {
        std::vector<double> times;
        for (int i = 0; i < 10; ++i) times.push_back(1.25 * i / 9.0);
        auto iv = derive_intervals(series_at(times), 0.25);
        REQUIRE(iv.size() == 9);
        for (const auto& s : iv) REQUIRE(s.tau_i == Catch::Approx(0.25 / 9.0));
    }
}

TEST_CASE("marginal state rejects ragged clouds") {
    std::vector<Cloud> good{Cloud::Zero(3, 2), Cloud::Ones(3, 2)};
    REQUIRE_NOTHROW(MarginalState(good));
    std::vector<Cloud> ragged{Cloud::Zero(3, 2), Cloud::Ones(2, 2)};
    REQUIRE_THROWS_AS(MarginalState(ragged), config_error);
}

TEST_CASE("growth prior builtins") {
    auto g = GrowthPrior::tanh_first_coord();
    RowVec x = RowVec::Zero(3);
    REQUIRE(g(0.0, x) == Catch::Approx(5.0));
    x[0] = 100.0;
    REQUIRE(g(0.0, x) == Catch::Approx(10.0));
    auto c = GrowthPrior::constant(2.5);
    REQUIRE(c(0.3, x) == 2.5);
}

TEST_CASE("problem config validation") {
    ProblemConfig cfg;
    REQUIRE_NOTHROW(cfg.validate());
    cfg.tau = -1.0;
    REQUIRE_THROWS_AS(cfg.validate(), config_error);
    cfg.tau = 0.25;
    cfg.rho = 0.0;
    REQUIRE_THROWS_AS(cfg.validate(), config_error);
}

TEST_CASE("annealing schedule temperature") {
    SECTION("formula and clamp") {
        AnnealingSchedule s;
        s.c = 0.5;
        s.r = 0.99;
        s.tau_f = 0.1;
        s.anneal_steps = 1000;
        REQUIRE(s.tau_at(0) == Catch::Approx(0.5));
        REQUIRE(s.tau_at(100000) == 0.1);
        double prev = s.tau_at(0);
        for (int k = 1; k < 1200; ++k) {
            const double cur = s.tau_at(k);
            REQUIRE(cur <= prev + 1e-15);
            REQUIRE(cur >= 0.1);
            prev = cur;
        }
        REQUIRE(s.tau_at(s.anneal_steps) == 0.1);
    }
    SECTION("geometric helper lands on tau_f") {
        auto s = AnnealingSchedule::geometric(0.25, 5.0, 500);
        REQUIRE(s.tau_at(0) == Catch::Approx(1.25));
        REQUIRE(s.tau_at(500) == 0.25);
        REQUIRE(s.tau_at(499) >= 0.25);
    }
    SECTION("disabled schedule is constant") {
        auto s = AnnealingSchedule::disabled(0.3);
        REQUIRE(s.tau_at(0) == 0.3);
        REQUIRE(s.tau_at(12345) == 0.3);
    }
}
