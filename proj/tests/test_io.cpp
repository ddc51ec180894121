#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "mflt/io.hpp"

using namespace mflt;

namespace {

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("mflt_io_test_" + std::to_string(std::random_device{}()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path);
    out << content;
}

SnapshotSeries random_series(unsigned seed, int T = 3, int n = 4, int d = 2) {
    std::mt19937 gen(seed);
    std::uniform_real_distribution<double> unif(-2.0, 2.0);
    std::vector<Snapshot> snaps;
    for (int i = 0; i < T; ++i) {
        Cloud pts(n, d);
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < d; ++c) pts(r, c) = unif(gen);
        Vector w(n);
        for (int r = 0; r < n; ++r) w[r] = 0.5 + std::abs(unif(gen));
        snaps.emplace_back(0.25 * i, pts, w);
    }
    return SnapshotSeries(std::move(snaps));
}

}  // namespace

TEST_CASE("snapshot csv") {
    TempDir tmp;
    SECTION("two singleton rows make a T=2 series") {
        write_file(tmp.file("a.csv"), "t,x1,x2\n0,1.5,2.5\n1,3.5,4.5\n");
        auto s = load_snapshots(tmp.file("a.csv"));
        REQUIRE(s.count() == 2);
        REQUIRE(s.snapshots[0].size() == 1);
        REQUIRE(s.snapshots[1].points(0, 1) == 4.5);
        REQUIRE(s.snapshots[0].weights[0] == 1.0);
    }
    SECTION("weight column is normalized per time") {
        write_file(tmp.file("w.csv"), "t,x1,w\n0,0,2\n0,1,2\n1,0,5\n1,1,5\n");
        auto s = load_snapshots(tmp.file("w.csv"));
        REQUIRE(s.snapshots[0].weights[0] == Catch::Approx(0.5));
        REQUIRE(s.snapshots[1].weights.sum() == Catch::Approx(1.0).margin(1e-12));
    }
    SECTION("parse errors carry line numbers") {
        write_file(tmp.file("bad1.csv"), "t,x1\n0,1\n1\n");
        REQUIRE_THROWS_WITH(load_snapshots(tmp.file("bad1.csv")),
                            Catch::Matchers::ContainsSubstring("line 3"));
        write_file(tmp.file("bad2.csv"), "t,x1\n0,1\n1,nope\n");
        REQUIRE_THROWS_WITH(load_snapshots(tmp.file("bad2.csv")),
                            Catch::Matchers::ContainsSubstring("line 3"));
        write_file(tmp.file("bad3.csv"), "t,x1\n0,inf\n1,0\n");
        REQUIRE_THROWS_AS(load_snapshots(tmp.file("bad3.csv")), input_error);
        write_file(tmp.file("bad4.csv"), "x1,t\n0,1\n");
        REQUIRE_THROWS_AS(load_snapshots(tmp.file("bad4.csv")), input_error);
    }
    SECTION("write-then-read round trip is exact") {
        auto series = random_series(42);
        save_snapshots(series, tmp.file("rt.csv"));
        auto back = load_snapshots(tmp.file("rt.csv"));
        REQUIRE(back.count() == series.count());
        for (int i = 0; i < series.count(); ++i) {
            const auto iu = static_cast<std::size_t>(i);
            REQUIRE(back.snapshots[iu].time == series.snapshots[iu].time);
            REQUIRE((back.snapshots[iu].points - series.snapshots[iu].points)
                        .cwiseAbs()
                        .maxCoeff() <= 1e-15);
            REQUIRE((back.snapshots[iu].weights - series.snapshots[iu].weights)
                        .cwiseAbs()
                        .maxCoeff() <= 1e-15);
        }
    }
}

TEST_CASE("scaling factors") {
    SECTION("two opposite deltas give sigma^2 = 0.5") {
        Cloud a(1, 1), b(1, 1);
        a << 0.0;
        b << 1.0;
        std::vector<Snapshot> snaps{Snapshot(0.0, a), Snapshot(1.0, b)};
        SnapshotSeries series(std::move(snaps));
        auto f = compute_scaling(series);
        REQUIRE(f.sigma_scale_sq == Catch::Approx(0.5));
        // single-point snapshots: eta falls back to sigma with a warning
        REQUIRE(f.eta_scale_sq == Catch::Approx(0.5));
    }
    SECTION("degenerate identical single points are rejected") {
        Cloud a(1, 1);
        a << 2.0;
        std::vector<Snapshot> snaps{Snapshot(0.0, a), Snapshot(1.0, a)};
        SnapshotSeries series(std::move(snaps));
        REQUIRE_THROWS_AS(compute_scaling(series), input_error);
    }
    SECTION("matches brute-force double loops") {
        auto series = random_series(7);
        auto f = compute_scaling(series);
        long double pair_sum = 0.0L, self_sum = 0.0L;
        const int T = series.count();
        for (int i = 0; i + 1 < T; ++i) {
            const auto &a = series.snapshots[static_cast<std::size_t>(i)],
                       &b = series.snapshots[static_cast<std::size_t>(i + 1)];
            for (int r = 0; r < a.size(); ++r)
                for (int c = 0; c < b.size(); ++c)
                    pair_sum += static_cast<long double>(a.weights[r]) * b.weights[c] * 0.5L *
                                (a.points.row(r) - b.points.row(c)).squaredNorm();
        }
        for (int i = 0; i < T; ++i) {
            const auto& a = series.snapshots[static_cast<std::size_t>(i)];
            for (int r = 0; r < a.size(); ++r)
                for (int c = 0; c < a.size(); ++c)
                    self_sum += static_cast<long double>(a.weights[r]) * a.weights[c] * 0.5L *
                                (a.points.row(r) - a.points.row(c)).squaredNorm();
        }
        REQUIRE(f.sigma_scale_sq ==
                Catch::Approx(static_cast<double>(pair_sum / (T - 1))).margin(1e-12));
        REQUIRE(f.eta_scale_sq ==
                Catch::Approx(static_cast<double>(self_sum / T)).margin(1e-12));
    }
    SECTION("invariant under rigid motions") {
        auto series = random_series(13);
        auto f1 = compute_scaling(series);
        // rotate by 90 degrees and translate
        std::vector<Snapshot> moved;
        for (const auto& s : series.snapshots) {
            Cloud pts(s.points.rows(), 2);
            pts.col(0) = -s.points.col(1).array() + 3.0;
            pts.col(1) = s.points.col(0).array() - 1.0;
            moved.emplace_back(s.time, pts, s.weights);
        }
        auto f2 = compute_scaling(SnapshotSeries(std::move(moved)));
        REQUIRE(f1.sigma_scale_sq == Catch::Approx(f2.sigma_scale_sq).margin(1e-12));
        REQUIRE(f1.eta_scale_sq == Catch::Approx(f2.eta_scale_sq).margin(1e-12));
    }
}

TEST_CASE("pca") {
    std::mt19937 gen(21);
    std::normal_distribution<double> normal(0.0, 1.0);

    SECTION("k = d is an isometry") {
        Cloud pts(30, 3);
        for (int i = 0; i < 30; ++i)
            for (int j = 0; j < 3; ++j) pts(i, j) = normal(gen);
        auto [proj, basis] = center_and_pca(pts, 3);
        for (int i = 0; i < 10; ++i)
            for (int j = 0; j < 10; ++j)
                REQUIRE((proj.row(i) - proj.row(j)).norm() ==
                        Catch::Approx((pts.row(i) - pts.row(j)).norm()).margin(1e-10));
    }
    SECTION("data already in a k-subspace projects losslessly") {
        // 40 points in a 2-plane embedded in 5 dimensions
        Cloud latent(40, 2);
        for (int i = 0; i < 40; ++i)
            for (int j = 0; j < 2; ++j) latent(i, j) = normal(gen);
        Eigen::MatrixXd embed(2, 5);
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 5; ++j) embed(i, j) = normal(gen);
        // orthonormalize the embedding rows
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(embed.transpose());
        Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(5, 2);
        Cloud pts = latent * Q.transpose();
        auto [proj, basis] = center_and_pca(pts, 2);
        for (int i = 0; i < 15; ++i)
            for (int j = 0; j < 15; ++j)
                REQUIRE((proj.row(i) - proj.row(j)).norm() ==
                        Catch::Approx((pts.row(i) - pts.row(j)).norm()).margin(1e-10));
        // rank is 2, asking for 3 must fail and name the achievable rank
        REQUIRE_THROWS_WITH(center_and_pca(pts, 3),
                            Catch::Matchers::ContainsSubstring("achievable rank is 2"));
    }
    SECTION("reconstruction error equals the trailing singular values") {
        Cloud pts(50, 10);
        for (int i = 0; i < 50; ++i)
            for (int j = 0; j < 10; ++j) pts(i, j) = normal(gen);
        const int k = 4;
        auto [proj, basis] = center_and_pca(pts, k);
        const Cloud recon = basis.inverse(proj);
        const double err = (pts - recon).squaredNorm();
        Cloud centered = pts.rowwise() - pts.colwise().mean();
        Eigen::BDCSVD<Eigen::MatrixXd> svd(centered);
        double tail = 0.0;
        for (Eigen::Index i = k; i < svd.singularValues().size(); ++i)
            tail += svd.singularValues()[i] * svd.singularValues()[i];
        REQUIRE(err == Catch::Approx(tail).margin(1e-8));
    }
    SECTION("basis json export carries shapes") {
        Cloud pts(20, 4);
        for (int i = 0; i < 20; ++i)
            for (int j = 0; j < 4; ++j) pts(i, j) = normal(gen);
        auto [proj, basis] = center_and_pca(pts, 2);
        const json j = basis.to_json();
        REQUIRE(j.at("mean").size() == 4);
        REQUIRE(j.at("components").size() == 4);
        REQUIRE(j.at("components").at(0).size() == 2);
    }
}

TEST_CASE("config json") {
    TempDir tmp;
    SECTION("minimal config fills defaults") {
        write_file(tmp.file("min.json"),
                   R"({"lambda": 0.05, "sigma": 0.5, "tau": 0.25, "m": 100})");
        auto [cfg, sched] = load_config(tmp.file("min.json"));
        REQUIRE(cfg.lambda == 0.05);
        REQUIRE(cfg.eta == 0.1);
        REQUIRE(cfg.iterations == 2500);
        REQUIRE(std::isinf(cfg.rho));
        REQUIRE_FALSE(cfg.growth.has_value());
        REQUIRE_FALSE(sched.enabled());
    }
    SECTION("the benchmark configuration parses") {
        write_file(tmp.file("bench.json"), R"({
            "lambda": 0.05, "sigma": 0.5, "tau": 0.25, "m": 100,
            "eta": 0.1, "iterations": 2500, "seed": 1,
            "init": {"kind": "gaussian", "mean": 0.0, "std": 0.1}
        })");
        auto [cfg, sched] = load_config(tmp.file("bench.json"));
        REQUIRE(cfg.m == 100);
        REQUIRE(cfg.init.stddev == 0.1);
    }
    SECTION("unknown keys are rejected with their path") {
        write_file(tmp.file("bad.json"),
                   R"({"lambda": 1, "sigma": 1, "tau": 1, "m": 1, "lambada": 2})");
        REQUIRE_THROWS_WITH(load_config(tmp.file("bad.json")),
                            Catch::Matchers::ContainsSubstring("/lambada"));
        write_file(tmp.file("bad2.json"),
                   R"({"lambda":1,"sigma":1,"tau":1,"m":1,"annealing":{"tau0_factor":5,"steps":10,"warmth":2}})");
        REQUIRE_THROWS_WITH(load_config(tmp.file("bad2.json")),
                            Catch::Matchers::ContainsSubstring("annealing/warmth"));
    }
    SECTION("invalid values are rejected") {
        write_file(tmp.file("neg.json"), R"({"lambda": 1, "sigma": 1, "tau": -1, "m": 1})");
        REQUIRE_THROWS_AS(load_config(tmp.file("neg.json")), config_error);
        write_file(tmp.file("rho.json"),
                   R"({"lambda": 1, "sigma": 1, "tau": 1, "m": 1, "rho": "infinite"})");
        REQUIRE_THROWS_AS(load_config(tmp.file("rho.json")), config_error);
    }
    SECTION("round trip is the identity") {
        write_file(tmp.file("full.json"), R"({
            "lambda": 0.025, "sigma": 0.5, "tau": 1.0, "m": 64,
            "eta": 0.2, "iterations": 100, "seed": 9, "epsilon": 0.01,
            "rho": 2.5,
            "growth": {"kind": "tanh_first_coord", "rate": 10.0, "sharpness": 2.0},
            "confine_sigma": 5.0,
            "init": {"kind": "resample", "jitter": 0.05},
            "knn_k": 6, "report_stride": 5, "checkpoint_stride": 50,
            "sinkhorn": {"tol": 1e-7, "max_iter": 500},
            "auto_scale": true, "threads": 2,
            "annealing": {"tau0_factor": 5.0, "steps": 100, "scale_eta": true,
                          "scale_sigma": false, "eps_mode": "geometric"}
        })");
        auto [cfg, sched] = load_config(tmp.file("full.json"));
        const json once = config_to_json(cfg, sched);
        auto [cfg2, sched2] = config_from_json(once);
        const json twice = config_to_json(cfg2, sched2);
        REQUIRE(once == twice);
        REQUIRE(cfg2.rho == 2.5);
        REQUIRE(cfg2.growth->kind == GrowthPrior::Kind::TanhFirstCoord);
        REQUIRE(sched2.anneal_steps == 100);
        REQUIRE(sched2.scale_sigma == false);
        REQUIRE(sched2.eps_mode == AnnealingSchedule::EpsMode::Geometric);
    }
}
