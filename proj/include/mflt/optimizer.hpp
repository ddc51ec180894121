#pragma once

#include <atomic>
#include <cmath>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "mflt/io.hpp"
#include "mflt/objective.hpp"
#include "mflt/parallel.hpp"
#include "mflt/rng.hpp"
#include "mflt/types.hpp"

namespace mflt {

// ---------------------------------------------------------------------------
// Schedules. tau_k = max{c r^k, tau_f}; when the scale flags are set the
// step size follows the temperature linearly and the fit bandwidth follows
// its square root (sigma_k^2 proportional to tau_k).
// ---------------------------------------------------------------------------

struct ScheduleValues {
    double tau_k = 0.0, sigma_k = 0.0, eta_k = 0.0, eps_k = 0.0;
};

inline ScheduleValues schedule_at(const AnnealingSchedule& sched, std::int64_t k,
                                  const ProblemConfig& cfg) {
    ScheduleValues v;
    v.tau_k = sched.enabled() ? sched.tau_at(k) : cfg.tau;
    const double ratio = v.tau_k / cfg.tau;
    v.eta_k = sched.scale_eta ? cfg.eta * ratio : cfg.eta;
    v.sigma_k = sched.scale_sigma ? cfg.sigma * std::sqrt(ratio) : cfg.sigma;
    switch (sched.eps_mode) {
        case AnnealingSchedule::EpsMode::None: v.eps_k = cfg.epsilon; break;
        case AnnealingSchedule::EpsMode::Geometric:
            v.eps_k = cfg.epsilon * std::pow(sched.r, static_cast<double>(k));
            break;
        case AnnealingSchedule::EpsMode::Logarithmic:
            v.eps_k = sched.eps_alpha / std::log(static_cast<double>(k) + M_E);
            break;
    }
    return v;
}

// ---------------------------------------------------------------------------
// Particle initialization.
// ---------------------------------------------------------------------------

inline MarginalState init_particles(const SnapshotSeries& series, const ProblemConfig& cfg) {
    const int T = series.count();
    const int d = series.dim();
    std::vector<Cloud> clouds(static_cast<std::size_t>(T));

    switch (cfg.init.kind) {
        case InitSpec::Kind::Gaussian: {
            for (int i = 0; i < T; ++i) {
                Cloud cl(cfg.m, d);
                for (int j = 0; j < cfg.m; ++j) {
                    CounterRng rng(cfg.seed, Stream::Init, static_cast<std::uint64_t>(i),
                                   static_cast<std::uint64_t>(j));
                    cl.row(j) = RowVec::Constant(d, cfg.init.mean) +
                                cfg.init.stddev * rng.normal_row(d);
                }
                clouds[static_cast<std::size_t>(i)] = std::move(cl);
            }
            break;
        }
        case InitSpec::Kind::Resample: {
            for (int i = 0; i < T; ++i) {
                const Cloud& data = series.snapshots[static_cast<std::size_t>(i)].points;
                const int n = static_cast<int>(data.rows());
                CounterRng rng(cfg.seed, Stream::Init, static_cast<std::uint64_t>(i));
                // draw indices: whole copies of the data, remainder without
                // replacement (partial Fisher-Yates)
                std::vector<int> indices;
                indices.reserve(static_cast<std::size_t>(cfg.m));
                const int copies = cfg.m / n;
                for (int c = 0; c < copies; ++c)
                    for (int r = 0; r < n; ++r) indices.push_back(r);
                const int remainder = cfg.m - copies * n;
                if (remainder > 0) {
                    std::vector<int> pool(static_cast<std::size_t>(n));
                    for (int r = 0; r < n; ++r) pool[static_cast<std::size_t>(r)] = r;
                    for (int r = 0; r < remainder; ++r) {
                        const auto pick =
                            r + static_cast<int>(rng.next_index(static_cast<std::uint64_t>(n - r)));
                        std::swap(pool[static_cast<std::size_t>(r)],
                                  pool[static_cast<std::size_t>(pick)]);
                        indices.push_back(pool[static_cast<std::size_t>(r)]);
                    }
                }
                Cloud cl(cfg.m, d);
                for (int j = 0; j < cfg.m; ++j) {
                    cl.row(j) = data.row(indices[static_cast<std::size_t>(j)]);
                    if (cfg.init.jitter > 0.0) cl.row(j) += cfg.init.jitter * rng.normal_row(d);
                }
                clouds[static_cast<std::size_t>(i)] = std::move(cl);
            }
            break;
        }
        case InitSpec::Kind::File: {
            const SnapshotSeries loaded = load_snapshots(cfg.init.path);
            if (loaded.count() != T)
                throw config_error("init file has " + std::to_string(loaded.count()) +
                                   " timepoints, expected " + std::to_string(T));
            const double span = std::max(1.0, std::abs(series.t_last - series.t_first));
            for (int i = 0; i < T; ++i) {
                const auto& snap = loaded.snapshots[static_cast<std::size_t>(i)];
                if (std::abs(snap.time - series.original_time(i)) > 1e-9 * span)
                    throw config_error("init file time mismatch at index " + std::to_string(i));
                if (snap.size() != cfg.m)
                    throw config_error("init file must hold exactly m particles per timepoint");
                if (snap.dim() != d) throw config_error("init file dimension mismatch");
                clouds[static_cast<std::size_t>(i)] = snap.points;
            }
            break;
        }
    }
    return MarginalState(std::move(clouds), 0);
}

// ---------------------------------------------------------------------------
// One optimizer step: solve the interval bridges at the scheduled
// temperature (warm-started), assemble the first variation, and apply the
// noisy particle update with counter-keyed Gaussian draws.
// ---------------------------------------------------------------------------

struct OptimizerState {
    MarginalState state;
    std::vector<BridgeSolution> bridges;  // last solved; duals double as warm starts
    std::int64_t k = 0;                   // completed steps
    std::uint64_t seed = 0;
};

struct RunContext {
    CostSpec cost;            // transport cost scale (auto-scaling)
    double fit_scale = 1.0;   // fit squared-distance divisor (auto-scaling)
};

inline RunContext make_run_context(const SnapshotSeries& series, const ProblemConfig& cfg) {
    RunContext ctx;
    if (cfg.auto_scale) {
        const auto f = compute_scaling(series);
        ctx.cost.scale = f.sigma_scale_sq;
        ctx.fit_scale = f.eta_scale_sq;
        log_info("auto-scaling: cost/%.6g, fit/%.6g", f.sigma_scale_sq, f.eta_scale_sq);
    }
    return ctx;
}

inline std::vector<BridgeSolution> solve_bridges(const MarginalState& state,
                                                 const SnapshotSeries& series,
                                                 const ProblemConfig& cfg, double tau_k,
                                                 const RunContext& ctx,
                                                 const std::vector<BridgeSolution>* warm,
                                                 std::optional<SinkhornOptions> opts_override =
                                                     std::nullopt) {
    const int T = state.timepoints();
    const auto intervals = derive_intervals(series, tau_k);
    const Vector w = Vector::Constant(state.particles(), 1.0 / state.particles());
    const SinkhornOptions opts = opts_override.value_or(
        SinkhornOptions{cfg.sinkhorn_tol, cfg.sinkhorn_max_iter});
    std::vector<BridgeSolution> out(static_cast<std::size_t>(T - 1));
    parallel_for(T - 1, cfg.threads, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t ii = lo; ii < hi; ++ii) {
            const auto i = static_cast<std::size_t>(ii);
            Vector p = w, q = w;
            if (cfg.growth) {
                // growth rates live in original time units
                const double t0 = series.original_time(static_cast<int>(ii));
                const double t1 = series.original_time(static_cast<int>(ii) + 1);
                std::tie(p, q) = tilt_marginals(state.clouds[i], w, state.clouds[i + 1], w,
                                                *cfg.growth, t0, t1, t1 - t0);
            }
            const BridgeSolution* ws =
                (warm && warm->size() == out.size()) ? &(*warm)[i] : nullptr;
            out[i] = sinkhorn_unbalanced(state.clouds[i], p, state.clouds[i + 1], q, ctx.cost,
                                         intervals[i].tau_i, cfg.rho, opts, ws);
        }
    });
    return out;
}

// Advances the state by one iteration. When report_out is nonnull it is
// filled with the objective of the *pre-step* state, evaluated on the
// bridges this step just solved (labelled k+1).
inline void mfl_step(OptimizerState& os, const SnapshotSeries& series, const ProblemConfig& cfg,
                     const AnnealingSchedule& sched, const RunContext& ctx,
                     ObjectiveReport* report_out = nullptr) {
    for (std::size_t i = 0; i < os.state.clouds.size(); ++i) {
        const Cloud& cl = os.state.clouds[i];
        // also reject magnitudes whose squared distances overflow the cost
        if (!cl.allFinite() || cl.cwiseAbs().maxCoeff() > 1e150)
            throw diverged_error("cloud " + std::to_string(i) +
                                 " holds non-finite or overflowing positions at iteration " +
                                 std::to_string(os.k));
    }
    const auto sv = schedule_at(sched, os.k, cfg);
    auto bridges = solve_bridges(os.state, series, cfg, sv.tau_k, ctx,
                                 os.bridges.empty() ? nullptr : &os.bridges);

    ObjectiveParams prm;
    prm.lambda = cfg.lambda;
    prm.sigma = sv.sigma_k;
    prm.fit_scale = ctx.fit_scale;
    prm.confine_sigma = cfg.confine_sigma;
    prm.threads = cfg.threads;

    if (report_out) {
        *report_out = objective_report(os.state, series, bridges, prm, sv.tau_k, cfg.knn_k);
        report_out->iteration = os.k + 1;
        report_out->sigma_k = sv.sigma_k;
        report_out->eta_k = sv.eta_k;
        report_out->eps_k = sv.eps_k;
    }

    const auto fv = first_variation(os.state, series, bridges, prm);
    // The integrator advances the Langevin time by eta_k * lambda per
    // iteration. The first variation carries a 1/(t_{i+1}-t_i) factor per
    // bridge term, so on a [0,1] time axis with T timepoints its gradient
    // field has stiffness ~2(T-1); stepping by the raw eta of the benchmark
    // configurations would cross the explicit-Euler stability boundary.
    // Scaling the step (and the matching noise variance) by lambda leaves
    // the invariant law e^{-V/tau} untouched.
    const double step = sv.eta_k * cfg.lambda;
    const double noise = std::sqrt(2.0 * step * (sv.tau_k + sv.eps_k));
    const int T = os.state.timepoints();
    const int m = os.state.particles();
    const int d = os.state.dim();
    std::atomic<std::int64_t> bad{-1};  // encodes a non-finite (i*m + j)
    parallel_for(T, cfg.threads, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
            Cloud& cl = os.state.clouds[static_cast<std::size_t>(i)];
            const Cloud& grad = fv.gradients[static_cast<std::size_t>(i)];
            for (int j = 0; j < m; ++j) {
                CounterRng rng(cfg.seed, Stream::MflNoise, static_cast<std::uint64_t>(os.k),
                               static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(j));
                cl.row(j) += -step * grad.row(j) + noise * rng.normal_row(d);
                if (!cl.row(j).allFinite()) {
                    std::int64_t expected = -1;
                    bad.compare_exchange_strong(expected, i * m + j);
                }
            }
        }
    });
    if (bad.load() >= 0)
        throw diverged_error("particle " + std::to_string(bad.load() % m) + " at timepoint " +
                             std::to_string(bad.load() / m) + " became non-finite at iteration " +
                             std::to_string(os.k));

    os.state.iteration = ++os.k;
    os.bridges = std::move(bridges);
}

// ---------------------------------------------------------------------------
// Full optimization loop with reporting, checkpoint callbacks and resume.
// ---------------------------------------------------------------------------

struct RunCallbacks {
    std::function<void(const ObjectiveReport&)> on_report;
    std::function<void(const OptimizerState&)> on_checkpoint;
};

inline OptimizerState run(const SnapshotSeries& series, const ProblemConfig& raw_cfg,
                          const AnnealingSchedule& raw_sched, const RunCallbacks& cb = {},
                          std::optional<OptimizerState> resume = std::nullopt) {
    raw_cfg.validate();
    raw_sched.validate();
    if (raw_sched.enabled() && std::abs(raw_sched.tau_f - raw_cfg.tau) > 1e-12 * raw_cfg.tau)
        throw config_error("annealing schedule must end at the config tau");

    // The configured diffusivity lives on the data's original time axis;
    // mapping times onto [0,1] compresses them by the span, so the variance
    // accrued per unit internal time scales up by the same factor.
    const double span = series.t_last - series.t_first;
    ProblemConfig cfg = raw_cfg;
    cfg.tau *= span;
    cfg.epsilon *= span;
    AnnealingSchedule sched = raw_sched;
    sched.c *= span;
    sched.tau_f *= span;

    OptimizerState os;
    if (resume) {
        os = std::move(*resume);
        if (os.seed != cfg.seed)
            throw config_error("checkpoint seed does not match the config seed");
        if (os.state.timepoints() != series.count() || os.state.particles() != cfg.m ||
            os.state.dim() != series.dim())
            throw config_error("checkpoint shape does not match the problem");
    } else {
        os.state = init_particles(series, cfg);
        os.seed = cfg.seed;
    }
    const RunContext ctx = make_run_context(series, cfg);

    // divergence diagnostic: data bounding box inflated by 5 pooled stddevs
    const auto [box_lo, box_hi] = series.bounding_box();
    RowVec pooled_std;
    {
        Eigen::Index n = 0;
        RowVec mean = RowVec::Zero(series.dim());
        for (const auto& s : series.snapshots) {
            mean += s.points.colwise().sum();
            n += s.points.rows();
        }
        mean /= static_cast<double>(n);
        RowVec var = RowVec::Zero(series.dim());
        for (const auto& s : series.snapshots)
            var += (s.points.rowwise() - mean).array().square().colwise().sum().matrix();
        pooled_std = (var / static_cast<double>(n)).cwiseSqrt();
    }
    const RowVec warn_lo = box_lo - 5.0 * pooled_std;
    const RowVec warn_hi = box_hi + 5.0 * pooled_std;
    std::int64_t escape_warnings = 0;

    while (os.k < cfg.iterations) {
        const bool want_report =
            cb.on_report && ((os.k % cfg.report_stride) == 0 || os.k == cfg.iterations - 1);
        ObjectiveReport rep;
        mfl_step(os, series, cfg, sched, ctx, want_report ? &rep : nullptr);
        if (want_report) cb.on_report(rep);
        if (cb.on_checkpoint && (os.k % cfg.checkpoint_stride) == 0 && os.k < cfg.iterations)
            cb.on_checkpoint(os);

        for (const auto& cl : os.state.clouds) {
            if (((cl.rowwise() - warn_hi).array() > 0.0).any() ||
                ((cl.rowwise() - warn_lo).array() < 0.0).any()) {
                if (escape_warnings == 0 || escape_warnings % 500 == 0)
                    log_warn("particles left the inflated data bounding box at iteration %lld",
                             static_cast<long long>(os.k));
                ++escape_warnings;
                break;
            }
        }
    }

    // bridges for the final state, used for reporting and path
    // reconstruction; solved tightly even when the in-loop tolerance is loose
    const auto sv = schedule_at(sched, os.k, cfg);
    const SinkhornOptions final_opts{std::min(cfg.sinkhorn_tol, 1e-6),
                                     std::max(cfg.sinkhorn_max_iter, 50000)};
    os.bridges = solve_bridges(os.state, series, cfg, sv.tau_k, ctx,
                               os.bridges.empty() ? nullptr : &os.bridges, final_opts);
    return os;
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON with full round-trip precision (nlohmann emits
// shortest-round-trip doubles), so resumed runs reproduce unbroken ones
// bit for bit.
// ---------------------------------------------------------------------------

inline json checkpoint_to_json(const OptimizerState& os) {
    json j;
    j["format"] = 1;
    j["iteration"] = os.k;
    j["seed"] = os.seed;
    json clouds = json::array();
    for (const auto& cl : os.state.clouds) {
        json rows = json::array();
        for (Eigen::Index r = 0; r < cl.rows(); ++r) {
            json row = json::array();
            for (Eigen::Index c = 0; c < cl.cols(); ++c) row.push_back(cl(r, c));
            rows.push_back(std::move(row));
        }
        clouds.push_back(std::move(rows));
    }
    j["clouds"] = std::move(clouds);
    json duals = json::array();
    for (const auto& b : os.bridges) {
        json e;
        e["u"] = std::vector<double>(b.u.data(), b.u.data() + b.u.size());
        e["v"] = std::vector<double>(b.v.data(), b.v.data() + b.v.size());
        duals.push_back(std::move(e));
    }
    j["duals"] = std::move(duals);
    return j;
}

inline OptimizerState checkpoint_from_json(const json& j) {
    if (!j.contains("format") || j.at("format").get<int>() != 1)
        throw input_error("unsupported checkpoint format");
    OptimizerState os;
    os.k = j.at("iteration").get<std::int64_t>();
    os.seed = j.at("seed").get<std::uint64_t>();
    std::vector<Cloud> clouds;
    for (const auto& rows : j.at("clouds")) {
        const auto m = rows.size();
        const auto d = rows.empty() ? 0 : rows.front().size();
        Cloud cl(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(d));
        Eigen::Index r = 0;
        for (const auto& row : rows) {
            Eigen::Index c = 0;
            for (const auto& val : row) cl(r, c++) = val.get<double>();
            ++r;
        }
        clouds.push_back(std::move(cl));
    }
    os.state = MarginalState(std::move(clouds), os.k);
    for (const auto& e : j.at("duals")) {
        BridgeSolution b;  // duals only; serves purely as a warm start
        const auto uu = e.at("u").get<std::vector<double>>();
        const auto vv = e.at("v").get<std::vector<double>>();
        b.u = Eigen::Map<const Vector>(uu.data(), static_cast<Eigen::Index>(uu.size()));
        b.v = Eigen::Map<const Vector>(vv.data(), static_cast<Eigen::Index>(vv.size()));
        os.bridges.push_back(std::move(b));
    }
    return os;
}

inline void save_checkpoint(const OptimizerState& os, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw input_error("cannot write checkpoint: " + path);
    out << checkpoint_to_json(os) << "\n";
}

inline OptimizerState load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw input_error("cannot open checkpoint: " + path);
    json j;
    in >> j;
    return checkpoint_from_json(j);
}

inline json report_to_json(const ObjectiveReport& rep) {
    json j;
    j["iteration"] = rep.iteration;
    j["fit"] = rep.fit;
    j["transport"] = rep.transport;
    j["confine"] = rep.confine;
    j["entropy"] = rep.entropy ? json(*rep.entropy) : json(nullptr);
    j["entropy_is_diagnostic"] = true;
    j["tau_k"] = rep.tau;
    j["sigma_k"] = rep.sigma_k;
    j["eta_k"] = rep.eta_k;
    j["eps_k"] = rep.eps_k;
    j["total"] = rep.total;
    j["bridge_iterations"] = rep.bridge_iterations;
    j["unconverged_bridges"] = rep.unconverged_bridges;
    return j;
}

}  // namespace mflt
