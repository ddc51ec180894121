#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "mflt/bridge.hpp"
#include "mflt/common.hpp"
#include "mflt/parallel.hpp"
#include "mflt/rng.hpp"
#include "mflt/types.hpp"

namespace mflt {

// ---------------------------------------------------------------------------
// PathLaw: the reconstructed law on (x_1, ..., x_T) as a chain of interval
// couplings over the final particle clouds, plus the diffusivity used to
// fill the gaps with Brownian bridges.
// ---------------------------------------------------------------------------

struct PathLaw {
    std::vector<Coupling> couplings;      // T-1
    std::vector<Cloud> clouds;            // T
    std::vector<double> times01;          // mapped times
    std::vector<double> times_original;
    double tau = 0.0;
    bool growth_heuristic = false;  // couplings came from an unbalanced problem
};

inline PathLaw build_path_law(const MarginalState& state,
                              const std::vector<BridgeSolution>& bridges,
                              const SnapshotSeries& series, double tau) {
    const int T = state.timepoints();
    if (static_cast<int>(bridges.size()) != T - 1)
        throw config_error("path law needs exactly T-1 bridges");
    PathLaw law;
    law.clouds = state.clouds;
    law.times01 = series.times01;
    law.times_original.resize(static_cast<std::size_t>(T));
    for (int i = 0; i < T; ++i)
        law.times_original[static_cast<std::size_t>(i)] = series.original_time(i);
    law.tau = tau;
    for (const auto& b : bridges) {
        law.couplings.push_back(recover_coupling(b));
        if (!std::isinf(b.rho)) law.growth_heuristic = true;
    }
    // Markov chaining consistency between consecutive couplings
    for (std::size_t i = 0; i + 1 < law.couplings.size(); ++i) {
        const double gap = (law.couplings[i].col_marginal -
                            law.couplings[i + 1].row_marginal)
                               .cwiseAbs()
                               .sum();
        const double tol =
            10.0 * std::max(bridges[i].marginal_violation, bridges[i + 1].marginal_violation) +
            1e-9;
        if (gap > tol && !law.growth_heuristic)
            log_warn("coupling chain inconsistency %.3e between intervals %zu and %zu", gap, i,
                     i + 1);
    }
    if (law.growth_heuristic)
        log_info("unbalanced couplings: skeletons sample normalized rows (growth heuristic)");
    return law;
}

// ---------------------------------------------------------------------------
// Discrete skeleton sampling: x_1 from the first coupling's row marginal,
// then x_{i+1} from the normalized row of coupling i at the current index.
// Zero-mass rows (possible under unbalanced couplings) restart the current
// index from the row marginal; occurrences are counted and logged.
// ---------------------------------------------------------------------------

struct Skeleton {
    std::vector<int> indices;  // particle index per timepoint
};

namespace detail {
inline int sample_categorical(const Vector& weights, double total, CounterRng& rng) {
    const double u = rng.next_uniform() * total;
    double acc = 0.0;
    for (Eigen::Index i = 0; i < weights.size(); ++i) {
        acc += weights[i];
        if (u <= acc) return static_cast<int>(i);
    }
    return static_cast<int>(weights.size() - 1);
}
}  // namespace detail

inline std::vector<Skeleton> chain_sample(const PathLaw& law, int count, std::uint64_t seed) {
    const int T = static_cast<int>(law.clouds.size());
    std::vector<Skeleton> out(static_cast<std::size_t>(count));
    std::int64_t zero_row_restarts = 0;
    const Vector& first = law.couplings.front().row_marginal;
    const double first_mass = first.sum();
    if (!(first_mass > 0.0)) throw eval_error("first coupling has no mass");

    for (int p = 0; p < count; ++p) {
        CounterRng rng(seed, Stream::Skeleton, static_cast<std::uint64_t>(p));
        Skeleton sk;
        sk.indices.resize(static_cast<std::size_t>(T));
        sk.indices[0] = detail::sample_categorical(first, first_mass, rng);
        for (int i = 0; i + 1 < T; ++i) {
            const auto& gamma = law.couplings[static_cast<std::size_t>(i)].gamma;
            int cur = sk.indices[static_cast<std::size_t>(i)];
            Vector row = gamma.row(cur);
            double mass = row.sum();
            if (!(mass > 0.0)) {
                // mass-weighted restart from this interval's row marginal
                const Vector& marg = law.couplings[static_cast<std::size_t>(i)].row_marginal;
                cur = detail::sample_categorical(marg, marg.sum(), rng);
                sk.indices[static_cast<std::size_t>(i)] = cur;
                row = gamma.row(cur);
                mass = row.sum();
                ++zero_row_restarts;
                if (!(mass > 0.0)) throw eval_error("coupling row still empty after restart");
            }
            sk.indices[static_cast<std::size_t>(i + 1)] =
                detail::sample_categorical(row, mass, rng);
        }
        out[static_cast<std::size_t>(p)] = std::move(sk);
    }
    if (zero_row_restarts > 0)
        log_warn("%lld zero-mass skeleton rows were restarted from the row marginal",
                 static_cast<long long>(zero_row_restarts));
    return out;
}

// ---------------------------------------------------------------------------
// Brownian bridge sampling by sequential conditioning. Endpoints are
// reproduced exactly; tau = 0 degenerates to linear interpolation.
// ---------------------------------------------------------------------------

inline Cloud brownian_bridge(const Eigen::Ref<const RowVec>& xa,
                             const Eigen::Ref<const RowVec>& xb, double ta, double tb, double tau,
                             const std::vector<double>& grid, CounterRng& rng) {
    if (!(ta < tb)) throw config_error("brownian bridge needs ta < tb");
    const int d = static_cast<int>(xa.size());
    Cloud out(static_cast<Eigen::Index>(grid.size()), d);
    double s = ta;
    RowVec xs = xa;
    for (std::size_t g = 0; g < grid.size(); ++g) {
        const double t = grid[g];
        if (t < ta - 1e-12 || t > tb + 1e-12)
            throw config_error("bridge grid time outside the interval");
        if (t <= ta) {
            out.row(static_cast<Eigen::Index>(g)) = xa;
            continue;
        }
        if (t >= tb) {
            out.row(static_cast<Eigen::Index>(g)) = xb;
            s = tb;
            xs = xb;
            continue;
        }
        const double frac = (t - s) / (tb - s);
        const RowVec mean = xs + frac * (xb - xs);
        const double var = tau * (t - s) * (tb - t) / (tb - s);
        xs = mean + std::sqrt(std::max(var, 0.0)) * rng.normal_row(d);
        s = t;
        out.row(static_cast<Eigen::Index>(g)) = xs;
    }
    return out;
}

inline Cloud brownian_bridge(const Eigen::Ref<const RowVec>& xa,
                             const Eigen::Ref<const RowVec>& xb, double ta, double tb, double tau,
                             const std::vector<double>& grid, std::uint64_t seed) {
    CounterRng rng(seed, Stream::Bridge, 0);
    return brownian_bridge(xa, xb, ta, tb, tau, grid, rng);
}

// ---------------------------------------------------------------------------
// Full path reconstruction: skeletons through the couplings, Brownian
// bridges on a uniform grid (grid_resolution points per interval, interval
// endpoints shared). Times in the output are original units.
// ---------------------------------------------------------------------------

struct PathSample {
    std::int64_t id = 0;
    std::vector<double> times;  // original units
    Cloud positions;            // times.size() x d
};

inline std::vector<PathSample> reconstruct_paths(const PathLaw& law, int count,
                                                 int grid_resolution, std::uint64_t seed,
                                                 int threads = 1) {
    if (grid_resolution < 2) throw config_error("grid_resolution must be at least 2");
    const int T = static_cast<int>(law.clouds.size());
    const auto skeletons = chain_sample(law, count, seed);

    // shared time grid: 1 + (T-1)(grid_resolution-1) points on the mapped axis
    std::vector<double> grid01{law.times01.front()};
    for (int i = 0; i + 1 < T; ++i) {
        const double lo = law.times01[static_cast<std::size_t>(i)];
        const double hi = law.times01[static_cast<std::size_t>(i + 1)];
        for (int g = 1; g < grid_resolution; ++g)
            grid01.push_back(lo + (hi - lo) * g / (grid_resolution - 1));
    }
    const double t_first = law.times_original.front();
    const double span = law.times_original.back() - t_first;
    std::vector<double> times(grid01.size());
    for (std::size_t g = 0; g < grid01.size(); ++g) times[g] = t_first + span * grid01[g];

    std::vector<PathSample> out(static_cast<std::size_t>(count));
    parallel_for(count, threads, [&](std::int64_t lo_p, std::int64_t hi_p) {
        for (std::int64_t p = lo_p; p < hi_p; ++p) {
            const auto& sk = skeletons[static_cast<std::size_t>(p)];
            PathSample ps;
            ps.id = p;
            ps.times = times;
            ps.positions.resize(static_cast<Eigen::Index>(times.size()),
                                law.clouds.front().cols());
            CounterRng rng(seed, Stream::Bridge, static_cast<std::uint64_t>(p));
            Eigen::Index at = 0;
            ps.positions.row(at++) = law.clouds.front().row(sk.indices[0]);
            for (int i = 0; i + 1 < T; ++i) {
                const auto iu = static_cast<std::size_t>(i);
                const RowVec xa = law.clouds[iu].row(sk.indices[iu]);
                const RowVec xb = law.clouds[iu + 1].row(sk.indices[iu + 1]);
                std::vector<double> seg(static_cast<std::size_t>(grid_resolution - 1));
                for (int g = 1; g < grid_resolution; ++g)
                    seg[static_cast<std::size_t>(g - 1)] =
                        law.times01[iu] +
                        (law.times01[iu + 1] - law.times01[iu]) * g / (grid_resolution - 1);
                const Cloud bridge_pts = brownian_bridge(xa, xb, law.times01[iu],
                                                         law.times01[iu + 1], law.tau, seg, rng);
                for (Eigen::Index r = 0; r < bridge_pts.rows(); ++r)
                    ps.positions.row(at++) = bridge_pts.row(r);
            }
            out[static_cast<std::size_t>(p)] = std::move(ps);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// CSV writers (one observation per row).
// ---------------------------------------------------------------------------

inline void save_paths_csv(const std::vector<PathSample>& paths, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw input_error("cannot write paths file: " + path);
    const int d = paths.empty() ? 0 : static_cast<int>(paths.front().positions.cols());
    out << "path_id,t";
    for (int j = 1; j <= d; ++j) out << ",x" << j;
    out << "\n";
    char buf[32];
    for (const auto& p : paths)
        for (std::size_t g = 0; g < p.times.size(); ++g) {
            out << p.id;
            std::snprintf(buf, sizeof(buf), "%.17g", p.times[g]);
            out << ',' << buf;
            for (int j = 0; j < d; ++j) {
                std::snprintf(buf, sizeof(buf), "%.17g",
                              p.positions(static_cast<Eigen::Index>(g), j));
                out << ',' << buf;
            }
            out << "\n";
        }
}

inline void save_skeletons_csv(const std::vector<Skeleton>& skeletons, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw input_error("cannot write skeletons file: " + path);
    out << "path_id,t_index,particle_index\n";
    for (std::size_t p = 0; p < skeletons.size(); ++p)
        for (std::size_t i = 0; i < skeletons[p].indices.size(); ++i)
            out << p << ',' << i << ',' << skeletons[p].indices[i] << "\n";
}

}  // namespace mflt
