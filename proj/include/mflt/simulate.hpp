#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mflt/common.hpp"
#include "mflt/pathspace.hpp"
#include "mflt/rng.hpp"
#include "mflt/types.hpp"

namespace mflt {

// ---------------------------------------------------------------------------
// Benchmark potentials with analytic gradients.
// ---------------------------------------------------------------------------

struct PotentialSpec {
    enum class Kind { Bifurcation, Bistable, Quadratic };
    Kind kind = Kind::Bifurcation;
    int dim = 10;
    double quad_stiffness = 1.0;
    RowVec quad_center;

    static PotentialSpec bifurcation() { return PotentialSpec{}; }

    static PotentialSpec bistable() {
        PotentialSpec s;
        s.kind = Kind::Bistable;
        return s;
    }

    static PotentialSpec quadratic(int d, double stiffness, RowVec center = RowVec()) {
        PotentialSpec s;
        s.kind = Kind::Quadratic;
        s.dim = d;
        s.quad_stiffness = stiffness;
        s.quad_center = center.size() ? std::move(center) : RowVec::Zero(d);
        return s;
    }

    RowVec well_a() const {  // bistable: the branch with the higher growth
        RowVec x = RowVec::Zero(dim);
        x[0] = x[1] = 1.4;
        return x;
    }
    RowVec well_b() const {  // bistable: the lower branch
        RowVec x = RowVec::Zero(dim);
        x[0] = x[1] = -1.25;
        return x;
    }

    void check_dim(const Eigen::Ref<const RowVec>& x) const {
        if (static_cast<int>(x.size()) != dim)
            throw config_error("potential expects dimension " + std::to_string(dim) + ", got " +
                               std::to_string(x.size()));
    }

    double value(double t, const Eigen::Ref<const RowVec>& x) const {
        check_dim(x);
        switch (kind) {
            case Kind::Bifurcation: {
                double v = 0.5 * std::pow(x[0] - 1.5, 2) * std::pow(x[0] + 1.5, 2) +
                           10.0 * std::pow(x[1] + t, 2);
                for (int k = 2; k < dim; ++k) v += 10.0 * x[k] * x[k];
                return v;
            }
            case Kind::Bistable: {
                const double a = (x - well_a()).squaredNorm();
                const double b = (x - well_b()).squaredNorm();
                double v = 1.25 * a * b;
                for (int k = 2; k < dim; ++k) v += 10.0 * x[k] * x[k];
                return v;
            }
            case Kind::Quadratic:
                return 0.5 * quad_stiffness * (x - quad_center).squaredNorm();
        }
        return 0.0;
    }

    RowVec gradient(double t, const Eigen::Ref<const RowVec>& x) const {
        check_dim(x);
        switch (kind) {
            case Kind::Bifurcation: {
                RowVec g = RowVec::Zero(dim);
                g[0] = 2.0 * x[0] * (x[0] * x[0] - 2.25);
                g[1] = 20.0 * (x[1] + t);
                for (int k = 2; k < dim; ++k) g[k] = 20.0 * x[k];
                return g;
            }
            case Kind::Bistable: {
                const RowVec da = x - well_a();
                const RowVec db = x - well_b();
                RowVec g = 2.5 * (da * db.squaredNorm() + db * da.squaredNorm());
                for (int k = 2; k < dim; ++k) g[k] += 20.0 * x[k];
                return g;
            }
            case Kind::Quadratic:
                return quad_stiffness * (x - quad_center);
        }
        return RowVec::Zero(dim);
    }
};

// ---------------------------------------------------------------------------
// Euler-Maruyama ground-truth simulation with optional branching. Particles
// are recorded at the requested record times, which are placed exactly on
// the integration grid (substep counts are rounded per record interval).
// A division copies the parent's position into a fresh lineage id; death
// (negative growth) removes the particle. Root trajectories are unbiased
// samples of the plain drift-diffusion path law: branching never alters a
// parent's own motion.
// ---------------------------------------------------------------------------

struct GaussianX0 {
    double mean = 0.0;
    double stddev = 0.1;
};

struct ParticleTrajectory {
    std::int64_t id = 0;
    std::int64_t parent = -1;      // -1 for roots
    int birth_index = 0;           // first record index covered
    std::vector<RowVec> positions; // one per covered record index
    bool alive = true;             // alive at the final record time

    int last_index() const { return birth_index + static_cast<int>(positions.size()) - 1; }
    bool covers(int record_index) const {
        return record_index >= birth_index && record_index <= last_index();
    }
    const RowVec& at(int record_index) const {
        return positions[static_cast<std::size_t>(record_index - birth_index)];
    }
};

struct SimulationResult {
    std::vector<ParticleTrajectory> particles;  // roots first, children by birth order
    std::vector<double> record_times;
    int dim = 0;
    std::int64_t roots = 0;

    std::vector<std::int64_t> live_at(int record_index) const {
        std::vector<std::int64_t> ids;
        for (const auto& p : particles)
            if (p.covers(record_index)) ids.push_back(p.id);
        return ids;
    }
};

inline SimulationResult euler_maruyama(const PotentialSpec& spec, double tau,
                                       const GaussianX0& x0, std::int64_t n_particles,
                                       double t0, double t1, double dt,
                                       const std::optional<GrowthPrior>& growth,
                                       std::uint64_t seed,
                                       const std::vector<double>& record_times) {
    if (!(dt > 0.0)) throw config_error("simulation dt must be positive");
    if (!(t1 > t0)) throw config_error("simulation needs t1 > t0");
    if (n_particles < 1) throw config_error("need at least one particle");
    for (std::size_t r = 0; r + 1 < record_times.size(); ++r)
        if (!(record_times[r + 1] > record_times[r]))
            throw config_error("record times must be strictly increasing");
    if (record_times.empty() || record_times.front() < t0 - 1e-12 ||
        record_times.back() > t1 + 1e-12)
        throw config_error("record times must lie within the simulation span");
    if (growth) {
        const double pmax = growth->max_abs() * dt;
        if (pmax >= 1.0)
            throw config_error("dt * max|growth| = " + std::to_string(pmax) +
                               " >= 1: reduce dt");
    }

    const int d = spec.dim;
    SimulationResult result;
    result.record_times = record_times;
    result.dim = d;
    result.roots = n_particles;

    struct Live {
        std::int64_t id;
        RowVec pos;
    };
    std::vector<Live> live;
    live.reserve(static_cast<std::size_t>(n_particles));
    for (std::int64_t id = 0; id < n_particles; ++id) {
        CounterRng rng(seed, Stream::Sim, static_cast<std::uint64_t>(id), 0);
        RowVec pos = RowVec::Constant(d, x0.mean) + x0.stddev * rng.normal_row(d);
        live.push_back({id, pos});
        ParticleTrajectory traj;
        traj.id = id;
        result.particles.push_back(std::move(traj));
    }

    auto record_all = [&](int record_index) {
        for (const auto& lv : live) {
            auto& traj = result.particles[static_cast<std::size_t>(lv.id)];
            if (traj.positions.empty()) traj.birth_index = record_index;
            traj.positions.push_back(lv.pos);
        }
    };

    // march from t0 to the first record time, then interval by interval
    std::int64_t next_id = n_particles;
    std::uint64_t global_step = 1;
    double t = t0;
    std::size_t rec = 0;
    if (std::abs(record_times[0] - t0) <= 1e-12) {
        record_all(0);
        rec = 1;
    }
    while (rec < record_times.size()) {
        const double target = record_times[rec];
        const double gap = target - t;
        const int n_sub = std::max<int>(1, static_cast<int>(std::llround(gap / dt)));
        const double h = gap / n_sub;
        for (int s = 0; s < n_sub; ++s) {
            std::vector<Live> children;
            std::vector<std::size_t> dead;
            for (std::size_t li = 0; li < live.size(); ++li) {
                Live& lv = live[li];
                CounterRng rng(seed, Stream::Sim, static_cast<std::uint64_t>(lv.id), global_step);
                const RowVec z = rng.normal_row(d);
                double g_val = 0.0;
                if (growth) g_val = (*growth)(t, lv.pos);
                lv.pos += -spec.gradient(t, lv.pos) * h + std::sqrt(tau * h) * z;
                if (!lv.pos.allFinite())
                    throw diverged_error("simulated particle " + std::to_string(lv.id) +
                                         " became non-finite near t=" + std::to_string(t));
                if (growth) {
                    const double u = rng.next_uniform();
                    if (g_val >= 0.0) {
                        // id field temporarily encodes the parent
                        if (u < g_val * h) children.push_back({-lv.id - 2, lv.pos});
                    } else if (u < -g_val * h) {
                        dead.push_back(li);
                    }
                }
            }
            // deterministic merge: children in parent order, then deaths
            for (auto& ch : children) {
                const std::int64_t parent = -ch.id - 2;
                ch.id = next_id++;
                ParticleTrajectory traj;
                traj.id = ch.id;
                traj.parent = parent;
                result.particles.push_back(std::move(traj));
                live.push_back(ch);
            }
            for (auto it = dead.rbegin(); it != dead.rend(); ++it) {
                result.particles[static_cast<std::size_t>(live[*it].id)].alive = false;
                live.erase(live.begin() + static_cast<std::ptrdiff_t>(*it));
            }
            if (live.size() > 2000000)
                throw diverged_error("branching population exploded past 2e6 particles");
            t += h;
            ++global_step;
        }
        t = target;
        record_all(static_cast<int>(rec));
        ++rec;
    }
    for (auto& traj : result.particles)
        traj.alive = traj.covers(static_cast<int>(record_times.size()) - 1);
    return result;
}

// ---------------------------------------------------------------------------
// Snapshot extraction: at each requested time, draw the requested number of
// particles uniformly without replacement from the live population,
// preferring ids unused at earlier times so that the per-time samples
// emulate independent observations.
// ---------------------------------------------------------------------------

inline SnapshotSeries extract_snapshots(const SimulationResult& sim,
                                        const std::vector<double>& times,
                                        const std::vector<int>& counts, std::uint64_t seed) {
    if (times.size() != counts.size())
        throw config_error("extract_snapshots: times/counts mismatch");
    std::set<std::int64_t> used;
    std::vector<Snapshot> snaps;
    for (std::size_t ti = 0; ti < times.size(); ++ti) {
        // locate the record index
        int record_index = -1;
        for (std::size_t r = 0; r < sim.record_times.size(); ++r)
            if (std::abs(sim.record_times[r] - times[ti]) <= 1e-9) {
                record_index = static_cast<int>(r);
                break;
            }
        if (record_index < 0)
            throw config_error("time " + std::to_string(times[ti]) + " was not recorded");

        const auto live = sim.live_at(record_index);
        const int want = counts[ti];
        if (want > static_cast<int>(live.size()))
            throw input_error("requested " + std::to_string(want) + " samples at t=" +
                              std::to_string(times[ti]) + " but only " +
                              std::to_string(live.size()) + " particles are alive");
        std::vector<std::int64_t> fresh, fallback;
        for (auto id : live)
            (used.count(id) ? fallback : fresh).push_back(id);

        std::vector<std::int64_t> pool = fresh;
        if (static_cast<int>(pool.size()) < want) {
            log_warn("population too small for disjoint sampling at t=%g; reusing ids",
                     times[ti]);
            pool.insert(pool.end(), fallback.begin(), fallback.end());
        }
        CounterRng rng(seed, Stream::Extract, static_cast<std::uint64_t>(ti));
        for (int r = 0; r < want; ++r) {
            const auto pick =
                r + static_cast<int>(rng.next_index(static_cast<std::uint64_t>(pool.size() - r)));
            std::swap(pool[static_cast<std::size_t>(r)], pool[static_cast<std::size_t>(pick)]);
        }
        Cloud pts(want, sim.dim);
        for (int r = 0; r < want; ++r) {
            const auto id = pool[static_cast<std::size_t>(r)];
            pts.row(r) = sim.particles[static_cast<std::size_t>(id)].at(record_index);
            used.insert(id);
        }
        snaps.emplace_back(times[ti], std::move(pts));
    }
    return SnapshotSeries(std::move(snaps));
}

// Root trajectories as path samples (branching does not touch the parent's
// own motion, so these are draws of the plain drift-diffusion law).
inline std::vector<PathSample> root_paths(const SimulationResult& sim) {
    std::vector<PathSample> out;
    for (const auto& traj : sim.particles) {
        if (traj.parent >= 0) continue;
        if (!traj.covers(static_cast<int>(sim.record_times.size()) - 1)) continue;
        PathSample ps;
        ps.id = traj.id;
        ps.times.assign(sim.record_times.begin() + traj.birth_index, sim.record_times.end());
        ps.positions.resize(static_cast<Eigen::Index>(traj.positions.size()), sim.dim);
        for (std::size_t r = 0; r < traj.positions.size(); ++r)
            ps.positions.row(static_cast<Eigen::Index>(r)) = traj.positions[r];
        out.push_back(std::move(ps));
    }
    return out;
}

}  // namespace mflt
