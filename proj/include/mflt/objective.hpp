#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "mflt/bridge.hpp"
#include "mflt/common.hpp"
#include "mflt/parallel.hpp"
#include "mflt/types.hpp"

namespace mflt {

// ---------------------------------------------------------------------------
// Soft-min data fit. Squared distances are divided by dist_scale (the
// per-timepoint data scaling); the Gaussian normalization constant cancels
// everywhere it is used, so kernels are unnormalized exponentials.
// ---------------------------------------------------------------------------

// Fit_sigma(cloud | snapshot) = sum_y w_y * (-log[(1/m) sum_x exp(-|x-y|^2/(2 sigma^2))])
inline double fit_value(const Cloud& cloud, const Snapshot& snap, double sigma,
                        double dist_scale = 1.0) {
    if (!(sigma > 0.0)) throw config_error("fit bandwidth must be positive");
    const Eigen::Index m = cloud.rows();
    const double inv = 1.0 / (2.0 * sigma * sigma * dist_scale);
    const double logm = std::log(static_cast<double>(m));
    double total = 0.0;
    Vector e(m);
    for (Eigen::Index y = 0; y < snap.points.rows(); ++y) {
        e = -inv * (cloud.rowwise() - snap.points.row(y)).rowwise().squaredNorm();
        total += snap.weights[y] * (logm - log_sum_exp(e));
    }
    return total;
}

struct FitVariation {
    Vector values;    // delta Fit / delta mu at each particle, (dt/lambda) included
    Cloud gradients;  // its spatial gradient at each particle
};

// First variation of the fit term and its gradient, both carrying the
// dt/lambda prefactor of the objective.
inline FitVariation fit_first_variation(const Cloud& cloud, const Snapshot& snap, double sigma,
                                        double delta_t, double lambda, double dist_scale = 1.0) {
    if (!(sigma > 0.0) || !(lambda > 0.0)) throw config_error("sigma and lambda must be positive");
    const Eigen::Index m = cloud.rows();
    const Eigen::Index d = cloud.cols();
    const double inv = 1.0 / (2.0 * sigma * sigma * dist_scale);
    const double pref = delta_t / lambda;

    FitVariation out;
    out.values = Vector::Zero(m);
    out.gradients = Cloud::Zero(m, d);
    Vector e(m), r(m);
    for (Eigen::Index y = 0; y < snap.points.rows(); ++y) {
        const auto diffs = cloud.rowwise() - snap.points.row(y);
        e = -inv * diffs.rowwise().squaredNorm();
        const double mx = e.maxCoeff();
        r = (e.array() - mx).exp();
        const double denom = r.sum();
        // m * K(x_j, y) / sum_l K(x_l, y)
        r *= static_cast<double>(m) / denom;
        const double wy = snap.weights[y];
        out.values -= (pref * wy) * r;
        out.gradients += (pref * wy * 2.0 * inv) * (r.asDiagonal() * diffs);
    }
    return out;
}

// Spec-level accessor: per-particle gradient of the fit first variation.
inline Cloud fit_gradient(const Cloud& cloud, const Snapshot& snap, double sigma, double delta_t,
                          double lambda, double dist_scale = 1.0) {
    return fit_first_variation(cloud, snap, sigma, delta_t, lambda, dist_scale).gradients;
}

// ---------------------------------------------------------------------------
// Confining potential over the time-pooled observations (used with
// annealing to keep hot particles near the data).
// ---------------------------------------------------------------------------

struct ConfineResult {
    double value = 0.0;                 // contribution added to the objective
    std::vector<Vector> values;         // first-variation values per timepoint
    std::vector<Cloud> gradients;       // first-variation gradients per timepoint
};

inline ConfineResult confine_value_and_gradient(const std::vector<Cloud>& clouds,
                                                const SnapshotSeries& series,
                                                double confine_sigma) {
    if (!(confine_sigma > 0.0)) throw config_error("confine_sigma must be positive");
    Eigen::Index pooled = 0;
    for (const auto& s : series.snapshots) pooled += s.points.rows();
    Cloud data(pooled, series.dim());
    Eigen::Index at = 0;
    for (const auto& s : series.snapshots) {
        data.middleRows(at, s.points.rows()) = s.points;
        at += s.points.rows();
    }

    const double inv = 1.0 / (2.0 * confine_sigma * confine_sigma);
    const double T = static_cast<double>(clouds.size());
    const double log_pool = std::log(static_cast<double>(pooled));

    ConfineResult out;
    out.values.resize(clouds.size());
    out.gradients.resize(clouds.size());
    Vector e(pooled);
    for (std::size_t i = 0; i < clouds.size(); ++i) {
        const Cloud& cl = clouds[i];
        const double m = static_cast<double>(cl.rows());
        out.values[i] = Vector::Zero(cl.rows());
        out.gradients[i] = Cloud::Zero(cl.rows(), cl.cols());
        for (Eigen::Index j = 0; j < cl.rows(); ++j) {
            const auto diffs = data.rowwise() - cl.row(j);
            e = -inv * diffs.rowwise().squaredNorm();
            const double mx = e.maxCoeff();
            Vector soft = (e.array() - mx).exp();
            const double denom = soft.sum();
            const double neg_log = -(mx + std::log(denom) - log_pool);
            out.values[i][j] = neg_log / T;
            soft /= denom;
            out.gradients[i].row(j) = (2.0 * inv / T) * (soft.transpose() * (-diffs));
            out.value += neg_log / (T * m);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Kozachenko-Leonenko k-NN differential entropy (diagnostic only).
// ---------------------------------------------------------------------------

inline double digamma(double x) {
    double r = 0.0;
    while (x < 6.0) {
        r -= 1.0 / x;
        x += 1.0;
    }
    const double f = 1.0 / (x * x);
    return r + std::log(x) - 0.5 / x -
           f * (1.0 / 12 - f * (1.0 / 120 - f * (1.0 / 252 - f * (1.0 / 240 - f / 132))));
}

// Differential entropy estimate; nullopt when m <= k.
inline std::optional<double> knn_entropy(const Cloud& cloud, int k) {
    const Eigen::Index m = cloud.rows();
    const int d = static_cast<int>(cloud.cols());
    if (m <= k) return std::nullopt;
    const double log_vd = 0.5 * d * std::log(M_PI) - std::lgamma(0.5 * d + 1.0);
    double sum_log = 0.0;
    std::vector<double> dist2(static_cast<std::size_t>(m));
    for (Eigen::Index i = 0; i < m; ++i) {
        for (Eigen::Index j = 0; j < m; ++j)
            dist2[static_cast<std::size_t>(j)] = (cloud.row(i) - cloud.row(j)).squaredNorm();
        dist2[static_cast<std::size_t>(i)] = kInf;  // exclude self
        std::nth_element(dist2.begin(), dist2.begin() + (k - 1), dist2.end());
        const double rho = std::sqrt(std::max(dist2[static_cast<std::size_t>(k - 1)], 1e-300));
        sum_log += std::log(rho);
    }
    return digamma(static_cast<double>(m)) - digamma(static_cast<double>(k)) + log_vd +
           d * sum_log / static_cast<double>(m);
}

// ---------------------------------------------------------------------------
// First variation of the reduced objective, assembled per Prop.-style
// decomposition: fit part + forward bridge potential / (t_{i+1}-t_i) +
// backward bridge potential / (t_i - t_{i-1}) (+ confinement). The bridge
// terms vanish at the respective boundary timepoints.
// ---------------------------------------------------------------------------

struct ObjectiveParams {
    double lambda = 0.05;
    double sigma = 0.5;                  // effective (possibly annealed) bandwidth
    double fit_scale = 1.0;              // eta^2_scale divisor for fit distances
    std::optional<double> confine_sigma;
    int threads = 1;
};

struct FirstVariation {
    std::vector<Vector> values;     // V^(i) at each particle
    std::vector<Cloud> gradients;   // grad V^(i) at each particle
    std::vector<Vector> fit_values, forward_values, backward_values, confine_values;
};

inline FirstVariation first_variation(const MarginalState& state, const SnapshotSeries& series,
                                      const std::vector<BridgeSolution>& bridges,
                                      const ObjectiveParams& prm) {
    const int T = state.timepoints();
    if (static_cast<int>(bridges.size()) != T - 1)
        throw std::logic_error("first_variation: expected T-1 bridge solutions");
    if (series.count() != T)
        throw std::logic_error("first_variation: state/series timepoint mismatch");

    const auto dt = delta_t_weights(series);
    FirstVariation fv;
    fv.values.resize(static_cast<std::size_t>(T));
    fv.gradients.resize(static_cast<std::size_t>(T));
    fv.fit_values.resize(static_cast<std::size_t>(T));
    fv.forward_values.resize(static_cast<std::size_t>(T));
    fv.backward_values.resize(static_cast<std::size_t>(T));
    fv.confine_values.resize(static_cast<std::size_t>(T));

    std::optional<ConfineResult> confine;
    if (prm.confine_sigma)
        confine = confine_value_and_gradient(state.clouds, series, *prm.confine_sigma);

    parallel_for(T, prm.threads, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t ii = lo; ii < hi; ++ii) {
            const auto i = static_cast<std::size_t>(ii);
            const Cloud& cloud = state.clouds[i];
            auto fit = fit_first_variation(cloud, series.snapshots[i], prm.sigma, dt[i],
                                           prm.lambda, prm.fit_scale);
            Vector vals = fit.values;
            Cloud grads = fit.gradients;
            fv.fit_values[i] = std::move(fit.values);
            fv.forward_values[i] = Vector::Zero(cloud.rows());
            fv.backward_values[i] = Vector::Zero(cloud.rows());
            fv.confine_values[i] = Vector::Zero(cloud.rows());

            if (ii < T - 1) {
                const double gap = series.times01[i + 1] - series.times01[i];
                auto fwd = potential_eval_source(bridges[i], cloud);
                fv.forward_values[i] = fwd.values / gap;
                vals += fv.forward_values[i];
                grads += fwd.gradients / gap;
            }
            if (ii > 0) {
                const double gap = series.times01[i] - series.times01[i - 1];
                auto bwd = potential_eval_target(bridges[i - 1], cloud);
                fv.backward_values[i] = bwd.values / gap;
                vals += fv.backward_values[i];
                grads += bwd.gradients / gap;
            }
            if (confine) {
                fv.confine_values[i] = confine->values[i];
                vals += confine->values[i];
                grads += confine->gradients[i];
            }
            fv.values[i] = std::move(vals);
            fv.gradients[i] = std::move(grads);
        }
    });
    return fv;
}

// ---------------------------------------------------------------------------
// ObjectiveReport: the reduced objective split into its terms. The entropy
// term is a k-NN estimate used for reporting only; the dynamics never needs
// it.
// ---------------------------------------------------------------------------

struct ObjectiveReport {
    std::int64_t iteration = 0;
    double fit = 0.0;
    double transport = 0.0;
    double confine = 0.0;
    std::optional<double> entropy;  // H(mu) = minus differential entropy, summed over timepoints
    double tau = 0.0;
    double total = 0.0;             // fit + transport + confine + tau * entropy
    double sigma_k = 0.0, eta_k = 0.0, eps_k = 0.0;
    int bridge_iterations = 0;
    int unconverged_bridges = 0;
};

inline ObjectiveReport objective_report(const MarginalState& state, const SnapshotSeries& series,
                                        const std::vector<BridgeSolution>& bridges,
                                        const ObjectiveParams& prm, double tau, int knn_k = 4) {
    const int T = state.timepoints();
    if (static_cast<int>(bridges.size()) != T - 1)
        throw std::logic_error("objective_report: expected T-1 bridge solutions");
    const auto dt = delta_t_weights(series);

    ObjectiveReport rep;
    rep.tau = tau;
    for (int i = 0; i < T; ++i)
        rep.fit += (dt[static_cast<std::size_t>(i)] / prm.lambda) *
                   fit_value(state.clouds[static_cast<std::size_t>(i)],
                             series.snapshots[static_cast<std::size_t>(i)], prm.sigma,
                             prm.fit_scale);
    for (int i = 0; i + 1 < T; ++i) {
        const auto iu = static_cast<std::size_t>(i);
        const double gap = series.times01[iu + 1] - series.times01[iu];
        rep.transport += primal_value(bridges[iu]) / gap;
        rep.bridge_iterations += bridges[iu].iterations;
        if (!bridges[iu].converged) ++rep.unconverged_bridges;
    }
    if (prm.confine_sigma)
        rep.confine = confine_value_and_gradient(state.clouds, series, *prm.confine_sigma).value;

    bool have_all = true;
    double h_total = 0.0;
    for (const auto& cloud : state.clouds) {
        const auto h = knn_entropy(cloud, knn_k);
        if (!h) {
            have_all = false;
            break;
        }
        h_total -= *h;  // H(mu) enters with minus differential entropy
    }
    if (have_all) rep.entropy = h_total;

    rep.total = rep.fit + rep.transport + rep.confine + (rep.entropy ? tau * *rep.entropy : 0.0);
    rep.iteration = state.iteration;
    return rep;
}

}  // namespace mflt
