#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mflt/common.hpp"

namespace mflt {

// ---------------------------------------------------------------------------
// Snapshot: one observed weighted point cloud.
// ---------------------------------------------------------------------------

struct Snapshot {
    double time = 0.0;  // original time units, kept for labeling
    Cloud points;       // n x d
    Vector weights;     // nonnegative, sums to 1

    Snapshot() = default;

    Snapshot(double t, Cloud pts, Vector w = Vector()) : time(t), points(std::move(pts)) {
        if (points.rows() == 0 || points.cols() == 0)
            throw config_error("snapshot at t=" + std::to_string(t) + " has no points");
        if (!points.allFinite())
            throw input_error("snapshot at t=" + std::to_string(t) + " has non-finite coordinates");
        if (w.size() == 0) {
            weights = Vector::Constant(points.rows(), 1.0 / static_cast<double>(points.rows()));
        } else {
            if (w.size() != points.rows())
                throw config_error("snapshot weight count does not match point count");
            if ((w.array() < 0.0).any() || !w.allFinite())
                throw input_error("snapshot weights must be finite and nonnegative");
            const double total = w.sum();
            if (total <= 0.0) throw input_error("snapshot weights sum to zero");
            weights = w / total;
        }
    }

    int size() const { return static_cast<int>(points.rows()); }
    int dim() const { return static_cast<int>(points.cols()); }
};

// ---------------------------------------------------------------------------
// SnapshotSeries: T snapshots at strictly increasing times. Times are mapped
// to [0,1] on construction; originals are kept for output labeling. The dt
// observation weights use the convention t_{-1}=0, t_{T+1}=1 on the mapped
// axis and are recomputed on demand.
// ---------------------------------------------------------------------------

struct SnapshotSeries {
    std::vector<Snapshot> snapshots;
    std::vector<double> times01;
    double t_first = 0.0;  // original-time endpoints of the series
    double t_last = 1.0;

    SnapshotSeries() = default;

    explicit SnapshotSeries(std::vector<Snapshot> snaps) : snapshots(std::move(snaps)) {
        if (snapshots.size() < 2) throw config_error("a snapshot series needs at least 2 timepoints");
        const int d = snapshots.front().dim();
        for (std::size_t i = 0; i < snapshots.size(); ++i) {
            if (snapshots[i].dim() != d)
                throw config_error("snapshot dimension mismatch at index " + std::to_string(i));
            if (i > 0 && !(snapshots[i].time > snapshots[i - 1].time))
                throw config_error("snapshot times must be strictly increasing (index " +
                                   std::to_string(i) + ")");
        }
        t_first = snapshots.front().time;
        t_last = snapshots.back().time;
        times01.resize(snapshots.size());
        const double span = t_last - t_first;
        for (std::size_t i = 0; i < snapshots.size(); ++i)
            times01[i] = (snapshots[i].time - t_first) / span;
        times01.front() = 0.0;
        times01.back() = 1.0;
    }

    int count() const { return static_cast<int>(snapshots.size()); }
    int dim() const { return snapshots.front().dim(); }
    double original_time(int i) const { return snapshots[static_cast<std::size_t>(i)].time; }
    double to_original(double t01) const { return t_first + t01 * (t_last - t_first); }

    // bounding box over all observed points, per dimension
    std::pair<RowVec, RowVec> bounding_box() const {
        RowVec lo = snapshots.front().points.colwise().minCoeff();
        RowVec hi = snapshots.front().points.colwise().maxCoeff();
        for (const auto& s : snapshots) {
            lo = lo.cwiseMin(s.points.colwise().minCoeff());
            hi = hi.cwiseMax(s.points.colwise().maxCoeff());
        }
        return {lo, hi};
    }
};

// Delta-t observation weights on the [0,1] axis: dt_i = (t_{i+1} - t_{i-1})/2
// with t_{-1} = 0 and t_{T+1} = 1.
inline std::vector<double> delta_t_weights(const SnapshotSeries& series) {
    const int T = series.count();
    std::vector<double> dt(static_cast<std::size_t>(T));
    for (int i = 0; i < T; ++i) {
        const double prev = (i == 0) ? 0.0 : series.times01[static_cast<std::size_t>(i - 1)];
        const double next = (i == T - 1) ? 1.0 : series.times01[static_cast<std::size_t>(i + 1)];
        dt[static_cast<std::size_t>(i)] = 0.5 * (next - prev);
    }
    return dt;
}

struct IntervalSpec {
    int index = 0;        // i, between timepoints i and i+1
    double t_lo = 0.0;    // mapped times
    double t_hi = 0.0;
    double tau_i = 0.0;   // (t_{i+1} - t_i) * tau
};

inline std::vector<IntervalSpec> derive_intervals(const SnapshotSeries& series, double tau) {
    if (series.count() < 2) throw config_error("need at least 2 snapshots to form intervals");
    if (!(tau > 0.0)) throw config_error("tau must be positive");
    std::vector<IntervalSpec> out;
    out.reserve(static_cast<std::size_t>(series.count() - 1));
    for (int i = 0; i + 1 < series.count(); ++i) {
        const double lo = series.times01[static_cast<std::size_t>(i)];
        const double hi = series.times01[static_cast<std::size_t>(i + 1)];
        out.push_back({i, lo, hi, (hi - lo) * tau});
    }
    return out;
}

// ---------------------------------------------------------------------------
// MarginalState: the optimization variable, T particle clouds of m points.
// ---------------------------------------------------------------------------

struct MarginalState {
    std::vector<Cloud> clouds;   // T entries, each m x d
    std::int64_t iteration = 0;

    MarginalState() = default;
    MarginalState(std::vector<Cloud> c, std::int64_t iter = 0)
        : clouds(std::move(c)), iteration(iter) {
        if (clouds.empty()) throw config_error("marginal state needs at least one cloud");
        const auto m = clouds.front().rows();
        const auto d = clouds.front().cols();
        if (m == 0 || d == 0) throw config_error("marginal state clouds must be nonempty");
        for (const auto& cl : clouds)
            if (cl.rows() != m || cl.cols() != d)
                throw config_error("all marginal clouds must share the same shape");
    }

    int timepoints() const { return static_cast<int>(clouds.size()); }
    int particles() const { return static_cast<int>(clouds.front().rows()); }
    int dim() const { return static_cast<int>(clouds.front().cols()); }
};

// ---------------------------------------------------------------------------
// GrowthPrior: g(t, x), a prior on the instantaneous growth rate.
// ---------------------------------------------------------------------------

struct GrowthPrior {
    enum class Kind { Constant, TanhFirstCoord };

    Kind kind = Kind::Constant;
    double value = 0.0;      // Constant
    double rate = 10.0;      // TanhFirstCoord: rate * (tanh(sharpness * x_0) + 1) / 2
    double sharpness = 2.0;

    static GrowthPrior constant(double v) {
        GrowthPrior g;
        g.kind = Kind::Constant;
        g.value = v;
        return g;
    }

    static GrowthPrior tanh_first_coord(double rate = 10.0, double sharpness = 2.0) {
        GrowthPrior g;
        g.kind = Kind::TanhFirstCoord;
        g.rate = rate;
        g.sharpness = sharpness;
        return g;
    }

    double operator()(double /*t*/, const Eigen::Ref<const RowVec>& x) const {
        switch (kind) {
            case Kind::Constant: return value;
            case Kind::TanhFirstCoord: return rate * (std::tanh(sharpness * x[0]) + 1.0) / 2.0;
        }
        return 0.0;
    }

    double max_abs() const {
        return kind == Kind::Constant ? std::abs(value) : std::abs(rate);
    }
};

// ---------------------------------------------------------------------------
// Particle initialization choices.
// ---------------------------------------------------------------------------

struct InitSpec {
    enum class Kind { Gaussian, Resample, File };
    Kind kind = Kind::Gaussian;
    double mean = 0.0;    // isotropic Gaussian center (all coordinates)
    double stddev = 0.1;
    double jitter = 0.0;  // Resample: N(0, jitter^2) added to each drawn point
    std::string path;     // File: snapshot-format CSV with T groups of m rows
};

// ---------------------------------------------------------------------------
// ProblemConfig: every knob of the inference problem.
// ---------------------------------------------------------------------------

struct ProblemConfig {
    double lambda = 0.05;   // regularization strength
    double sigma = 0.5;     // fit bandwidth
    double tau = 0.25;      // diffusivity
    int m = 100;            // particles per timepoint
    double eta = 0.1;       // step size
    std::int64_t iterations = 2500;
    std::uint64_t seed = 0;
    double epsilon = 0.0;   // extra entropy in the Langevin noise
    std::optional<GrowthPrior> growth;
    double rho = kInf;      // unbalanced marginal penalty; inf = balanced
    std::optional<double> confine_sigma;

    InitSpec init;
    int knn_k = 4;                   // diagnostic entropy estimator
    std::int64_t report_stride = 1;
    std::int64_t checkpoint_stride = 500;
    double sinkhorn_tol = 1e-6;
    int sinkhorn_max_iter = 10000;
    bool auto_scale = false;         // divide costs/fit distances by data scales
    int threads = 0;                 // 0 = hardware concurrency

    void validate() const {
        if (!(lambda > 0.0)) throw config_error("lambda must be positive");
        if (!(sigma > 0.0)) throw config_error("sigma must be positive");
        if (!(tau > 0.0)) throw config_error("tau must be positive");
        if (m < 1) throw config_error("m must be at least 1");
        if (!(eta >= 0.0)) throw config_error("eta must be nonnegative");
        if (iterations < 0) throw config_error("iterations must be nonnegative");
        if (!(epsilon >= 0.0)) throw config_error("epsilon must be nonnegative");
        if (!(rho > 0.0)) throw config_error("rho must be positive (or infinite)");
        if (confine_sigma && !(*confine_sigma > 0.0))
            throw config_error("confine_sigma must be positive");
        if (!(sinkhorn_tol > 0.0)) throw config_error("sinkhorn tolerance must be positive");
        if (sinkhorn_max_iter < 1) throw config_error("sinkhorn max_iter must be at least 1");
        if (knn_k < 1) throw config_error("knn_k must be at least 1");
        if (report_stride < 1) throw config_error("report_stride must be at least 1");
        if (checkpoint_stride < 1) throw config_error("checkpoint_stride must be at least 1");
        if (init.kind == InitSpec::Kind::Gaussian && !(init.stddev > 0.0))
            throw config_error("init stddev must be positive");
        if (init.kind == InitSpec::Kind::Resample && !(init.jitter >= 0.0))
            throw config_error("init jitter must be nonnegative");
    }
};

// ---------------------------------------------------------------------------
// AnnealingSchedule: tau_k = max{c * r^k, tau_f}, optional (sigma, eta)
// scaling with the temperature, and an extra-entropy mode.
// ---------------------------------------------------------------------------

struct AnnealingSchedule {
    double c = 0.0;               // initial temperature scale; 0 disables annealing
    double r = 1.0;               // geometric decay in (0,1)
    double tau_f = 0.0;           // final temperature (the config's tau)
    std::int64_t anneal_steps = 0;
    bool scale_eta = false;
    bool scale_sigma = false;

    enum class EpsMode { None, Geometric, Logarithmic };
    EpsMode eps_mode = EpsMode::None;
    double eps_alpha = 0.0;       // Logarithmic: eps_k = alpha / log(k + e)

    static AnnealingSchedule disabled(double tau_final) {
        AnnealingSchedule s;
        s.tau_f = tau_final;
        return s;
    }

    // Geometric decay from tau0_factor * tau_f down to tau_f over `steps`.
    static AnnealingSchedule geometric(double tau_final, double tau0_factor, std::int64_t steps,
                                       bool scale_eta_too = true, bool scale_sigma_too = true) {
        if (!(tau0_factor > 1.0)) throw config_error("tau0_factor must exceed 1");
        if (steps < 1) throw config_error("anneal_steps must be at least 1");
        AnnealingSchedule s;
        s.tau_f = tau_final;
        s.c = tau0_factor * tau_final;
        s.r = std::pow(1.0 / tau0_factor, 1.0 / static_cast<double>(steps));
        s.anneal_steps = steps;
        s.scale_eta = scale_eta_too;
        s.scale_sigma = scale_sigma_too;
        return s;
    }

    bool enabled() const { return anneal_steps > 0 && c > 0.0; }

    double tau_at(std::int64_t k) const {
        if (!enabled() || k >= anneal_steps) return tau_f;
        return std::max(c * std::pow(r, static_cast<double>(k)), tau_f);
    }

    void validate() const {
        if (!(tau_f > 0.0)) throw config_error("schedule tau_f must be positive");
        if (enabled()) {
            if (!(r > 0.0 && r < 1.0)) throw config_error("schedule r must lie in (0,1)");
            if (!(c >= tau_f)) throw config_error("schedule must start at or above tau_f");
        }
        if (eps_mode == EpsMode::Logarithmic && !(eps_alpha > 0.0))
            throw config_error("logarithmic eps mode needs a positive alpha");
    }
};

}  // namespace mflt
