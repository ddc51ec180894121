#pragma once

#include <cmath>
#include <optional>
#include <utility>

#include "mflt/common.hpp"
#include "mflt/types.hpp"

namespace mflt {

// ---------------------------------------------------------------------------
// Cost: c(x, y) = 0.5 * |y - x|^2 / scale. The divisor carries the pairwise
// data scaling so raw coordinates stay intact for output.
// ---------------------------------------------------------------------------

struct CostSpec {
    double scale = 1.0;

    double operator()(const Eigen::Ref<const RowVec>& x,
                      const Eigen::Ref<const RowVec>& y) const {
        return 0.5 * (y - x).squaredNorm() / scale;
    }

    RowVec grad_x(const Eigen::Ref<const RowVec>& x, const Eigen::Ref<const RowVec>& y) const {
        return (x - y) / scale;
    }

    Eigen::MatrixXd matrix(const Cloud& X, const Cloud& Y) const {
        const Vector xs = X.rowwise().squaredNorm();
        const Vector ys = Y.rowwise().squaredNorm();
        Eigen::MatrixXd c = (-X) * Y.transpose();
        c.colwise() += 0.5 * xs;
        c.rowwise() += 0.5 * ys.transpose();
        return c / scale;
    }
};

// ---------------------------------------------------------------------------
// BridgeSolution: dual potentials of one interval's entropic transport
// problem, plus everything needed to evaluate potentials away from the
// support and to recover the coupling.
// ---------------------------------------------------------------------------

struct BridgeSolution {
    Vector u, v;             // duals at source / target points
    Cloud source_points, target_points;
    Vector source_weights, target_weights;  // tilted weights when growth is active
    CostSpec cost;
    double tau_i = 0.0;
    double rho = kInf;       // marginal penalty; inf = hard (balanced) marginals
    bool converged = false;
    int iterations = 0;
    double marginal_violation = kInf;
};

struct SinkhornOptions {
    double tol = 1e-6;       // L1 violation of the marginal optimality conditions
    int max_iter = 10000;
};

namespace detail {

// out[j] = -tau * log sum_i exp((a_i + tau*logw_i - M_ij)/tau), one LSE per
// column; callers pass the cost matrix or its transpose so both dual update
// directions stream contiguous (column-major) memory.
inline void lse_update(const Eigen::MatrixXd& M, const Vector& duals, const Vector& logw,
                       double tau, Vector& out, Vector& buf) {
    const Eigen::Index k = M.cols();
    out.resize(k);
    const Vector a = duals + tau * logw;
    for (Eigen::Index j = 0; j < k; ++j) {
        buf = (a - M.col(j)) / tau;
        const double mx = buf.maxCoeff();
        const double s = (buf.array() - mx).exp().sum();
        out[j] = -tau * (mx + std::log(s));
    }
}

inline Vector lse_update_rows(const Eigen::MatrixXd& CT, const Vector& v, const Vector& logq,
                              double tau) {
    Vector out, buf(CT.rows());
    lse_update(CT, v, logq, tau, out, buf);
    return out;
}

inline Vector lse_update_cols(const Eigen::MatrixXd& C, const Vector& u, const Vector& logp,
                              double tau) {
    Vector out, buf(C.rows());
    lse_update(C, u, logp, tau, out, buf);
    return out;
}

inline Vector safe_log(const Vector& w) {
    Vector out(w.size());
    for (Eigen::Index i = 0; i < w.size(); ++i)
        out[i] = w[i] > 0.0 ? std::log(w[i]) : -kInf;
    return out;
}

struct CoreResult {
    int iterations = 0;
    bool converged = false;
    double row_viol = kInf;
};

// Damped Sinkhorn at one temperature, updating (u, v) in place. The duals
// stay absorbed in the kernels L_ij = exp((u_i + v_j - C_ij)/tau + logq_j)
// and M_ji = exp((u_i + v_j - C_ij)/tau + logp_i), so the inner loop is two
// mat-vec products per iteration in the linear domain; scalings are
// re-absorbed before they can overflow, and a full log-sum-exp pass is the
// fallback whenever a scaling degenerates. This is the log-domain update
// rule evaluated through a stabilized kernel, not a different algorithm.
inline CoreResult sinkhorn_core(const Eigen::MatrixXd& C, const Eigen::MatrixXd& CT,
                                const Vector& p, const Vector& q, const Vector& logp,
                                const Vector& logq, double tau, double rho, double tol,
                                int max_iter, Vector& u, Vector& v) {
    const bool balanced = std::isinf(rho);
    const double damp = balanced ? 1.0 : rho / (rho + tau);
    const Eigen::Index n = C.rows(), k = C.cols();

    Eigen::MatrixXd L(n, k), M(k, n);
    auto rebuild = [&]() {
        for (Eigen::Index j = 0; j < k; ++j)
            L.col(j) = ((u.array() + (v[j] - C.col(j).array())) / tau + logq[j]).exp();
        for (Eigen::Index i = 0; i < n; ++i)
            M.col(i) = ((v.array() + (u[i] - CT.col(i).array())) / tau + logp[i]).exp();
    };
    rebuild();
    Vector a = Vector::Ones(n), b = Vector::Ones(k);
    Vector S(n), Sp(k);

    // exact log-domain pass used when the scaled path degenerates
    auto exact_pass = [&]() {
        u = damp * lse_update_rows(CT, v, logq, tau);
        v = damp * lse_update_cols(C, u, logp, tau);
        a.setOnes();
        b.setOnes();
        rebuild();
    };

    auto absorb = [&]() {
        for (Eigen::Index i = 0; i < n; ++i) u[i] += tau * std::log(a[i]);
        for (Eigen::Index j = 0; j < k; ++j) v[j] += tau * std::log(b[j]);
        a.setOnes();
        b.setOnes();
        rebuild();
    };

    CoreResult res;
    S = L * b;
    while (res.iterations < max_iter) {
        ++res.iterations;
        bool ok = S.allFinite() && (S.array() > 0.0).all();
        if (ok) {
            if (balanced) {
                a = S.cwiseInverse();
            } else {
                for (Eigen::Index i = 0; i < n; ++i)
                    a[i] = std::exp((damp - 1.0) * u[i] / tau) * std::pow(S[i], -damp);
            }
            Sp.noalias() = M * a;
            ok = Sp.allFinite() && (Sp.array() > 0.0).all();
            if (ok) {
                if (balanced) {
                    b = Sp.cwiseInverse();
                } else {
                    for (Eigen::Index j = 0; j < k; ++j)
                        b[j] = std::exp((damp - 1.0) * v[j] / tau) * std::pow(Sp[j], -damp);
                }
            }
        }
        if (!ok) {
            exact_pass();
        } else {
            const double amax = a.cwiseAbs().maxCoeff(), amin = a.cwiseAbs().minCoeff();
            const double bmax = b.cwiseAbs().maxCoeff(), bmin = b.cwiseAbs().minCoeff();
            if (amax > 1e13 || bmax > 1e13 || amin < 1e-13 || bmin < 1e-13) absorb();
        }
        // row sums of the implied coupling vs their optimality target; the
        // column condition holds exactly right after the b update
        S.noalias() = L * b;
        res.row_viol = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double rs = p[i] * a[i] * S[i];
            const double ui = u[i] + tau * std::log(a[i]);
            const double target = balanced ? p[i] : p[i] * std::exp(-ui / rho);
            res.row_viol += std::abs(rs - target);
        }
        if (res.row_viol <= tol) {
            res.converged = true;
            break;
        }
    }
    for (Eigen::Index i = 0; i < n; ++i) u[i] += tau * std::log(a[i]);
    for (Eigen::Index j = 0; j < k; ++j) v[j] += tau * std::log(b[j]);
    return res;
}

}  // namespace detail

// Damped log-domain Sinkhorn. rho = inf gives the balanced bridge; finite rho
// solves the KL-relaxed (unbalanced) problem, with every dual update damped
// by rho/(rho+tau_i). Convergence is declared when the L1 violation of the
// marginal optimality conditions (row sums vs p_i*exp(-u_i/rho), and the
// column analogue) drops below tol. Warm starts seed (u, v) from a previous
// solution on the same support sizes.
inline BridgeSolution sinkhorn_unbalanced(const Cloud& X, const Vector& p, const Cloud& Y,
                                          const Vector& q, const CostSpec& cost, double tau_i,
                                          double rho, const SinkhornOptions& opts = {},
                                          const BridgeSolution* warm = nullptr) {
    if (!(tau_i > 0.0)) throw config_error("bridge temperature tau_i must be positive");
    if (!(rho > 0.0)) throw config_error("rho must be positive");
    if (X.rows() != p.size() || Y.rows() != q.size())
        throw config_error("weight/point count mismatch in bridge problem");

    BridgeSolution sol;
    sol.source_points = X;
    sol.target_points = Y;
    sol.source_weights = p;
    sol.target_weights = q;
    sol.cost = cost;
    sol.tau_i = tau_i;
    sol.rho = rho;

    const Eigen::MatrixXd C = cost.matrix(X, Y);
    if (!C.allFinite()) throw input_error("non-finite entries in transport cost matrix");
    const Eigen::MatrixXd CT = C.transpose();

    const Vector logp = detail::safe_log(p);
    const Vector logq = detail::safe_log(q);
    const bool balanced = std::isinf(rho);

    Vector u = Vector::Zero(X.rows());
    Vector v = Vector::Zero(Y.rows());
    if (warm && warm->u.size() == u.size() && warm->v.size() == v.size()) {
        u = warm->u;
        v = warm->v;
    } else {
        // cold start: temperature scaling. Small tau_i with a wide cost range
        // makes the plain iteration crawl, so run a few coarse solves at
        // inflated temperatures and hand the duals down.
        const double osc = C.maxCoeff() - C.minCoeff();
        int stages = 0;
        while (stages < 8 && osc / (tau_i * std::pow(4.0, stages)) > 50.0) ++stages;
        for (int s = stages; s >= 1; --s)
            detail::sinkhorn_core(C, CT, p, q, logp, logq, tau_i * std::pow(4.0, s), rho, 1e-4,
                                  200, u, v);
    }

    const auto res =
        detail::sinkhorn_core(C, CT, p, q, logp, logq, tau_i, rho, opts.tol, opts.max_iter, u, v);

    // report the violation of both marginal conditions for the final duals
    const Vector lse_u_fin = detail::lse_update_rows(CT, v, logq, tau_i);
    const Vector lse_v_fin = detail::lse_update_cols(C, u, logp, tau_i);
    double viol = 0.0;
    for (Eigen::Index i = 0; i < u.size(); ++i) {
        const double rs = p[i] * std::exp((u[i] - lse_u_fin[i]) / tau_i);
        const double target = balanced ? p[i] : p[i] * std::exp(-u[i] / rho);
        viol += std::abs(rs - target);
    }
    for (Eigen::Index j = 0; j < v.size(); ++j) {
        const double cs = q[j] * std::exp((v[j] - lse_v_fin[j]) / tau_i);
        const double target = balanced ? q[j] : q[j] * std::exp(-v[j] / rho);
        viol += std::abs(cs - target);
    }

    if (balanced) {
        // resolve the (u+k, v-k) invariance: make sum(u_i p_i) = sum(v_j q_j)
        const double kappa = 0.5 * (v.dot(q) - u.dot(p));
        u.array() += kappa;
        v.array() -= kappa;
    }

    sol.u = std::move(u);
    sol.v = std::move(v);
    sol.converged = res.converged;
    sol.iterations = res.iterations;
    sol.marginal_violation = viol;
    if (!res.converged)
        log_warn("sinkhorn hit max_iter=%d with violation %.3e (tau_i=%.3e)", opts.max_iter,
                 sol.marginal_violation, tau_i);
    return sol;
}

inline BridgeSolution sinkhorn_balanced(const Cloud& X, const Vector& p, const Cloud& Y,
                                        const Vector& q, const CostSpec& cost, double tau_i,
                                        const SinkhornOptions& opts = {},
                                        const BridgeSolution* warm = nullptr) {
    return sinkhorn_unbalanced(X, p, Y, q, cost, tau_i, kInf, opts, warm);
}

// ---------------------------------------------------------------------------
// Growth tilting: reweight an interval's endpoint marginals by the prior
// branching rate before solving the bridge. dt is in the growth prior's own
// time units (original, un-rescaled).
// ---------------------------------------------------------------------------

inline std::pair<Vector, Vector> tilt_marginals(const Cloud& X, const Vector& p, const Cloud& Y,
                                                const Vector& q, const GrowthPrior& growth,
                                                double t_src, double t_tgt, double dt) {
    if (!(dt > 0.0)) throw config_error("tilt requires dt > 0");
    auto tilted = [&](const Cloud& pts, const Vector& w, double t, double sign) {
        Vector out(w.size());
        for (Eigen::Index i = 0; i < w.size(); ++i) {
            const double e = sign * growth(t, pts.row(i)) * dt / 2.0;
            if (e > 700.0)
                throw input_error("growth tilt overflows exp(); rescale the growth prior");
            out[i] = w[i] * std::exp(e);
        }
        const double total = out.sum();
        if (!(total > 0.0)) throw input_error("growth tilt annihilated all weight");
        return Vector(out / total);
    };
    return {tilted(X, p, t_src, -1.0), tilted(Y, q, t_tgt, +1.0)};
}

// ---------------------------------------------------------------------------
// Potential extension and its gradient. The source potential is
//   phi(x) = -tau * log sum_j exp((v_j - c(x, y_j))/tau) q_j
// and symmetrically psi(y) from (u, p). At the stored support points the
// extension reproduces the duals (balanced case, at convergence).
// ---------------------------------------------------------------------------

namespace detail {

struct PotentialEval {
    Vector values;
    Cloud gradients;
};

// Batched evaluation of the extended potential and/or its gradient at a set
// of query points. One cost matrix (the cost is symmetric in its arguments,
// so support x queries keeps the per-query sweep contiguous), one softmax
// per query; the gradient is the pull toward the softmax barycenter of the
// support.
inline PotentialEval potential_eval(const Cloud& queries, const Cloud& support,
                                    const Vector& duals, const Vector& logw,
                                    const CostSpec& cost, double tau, bool want_values,
                                    bool want_gradients) {
    const Eigen::Index nq = queries.rows(), ns = support.rows();
    const Eigen::MatrixXd M = cost.matrix(support, queries);
    const Vector A = duals + tau * logw;
    PotentialEval out;
    if (want_values) out.values.resize(nq);
    if (want_gradients) out.gradients.resize(nq, queries.cols());
    Vector e(ns);
    for (Eigen::Index iq = 0; iq < nq; ++iq) {
        e = (A - M.col(iq)) / tau;
        const double mx = e.maxCoeff();
        e = (e.array() - mx).exp();
        const double s = e.sum();
        if (want_values) out.values[iq] = -tau * (mx + std::log(s));
        if (want_gradients) {
            const RowVec bary = (e.transpose() * support) / s;
            out.gradients.row(iq) = (queries.row(iq) - bary) / cost.scale;
        }
    }
    return out;
}

}  // namespace detail

inline Vector extend_potential_source(const BridgeSolution& sol, const Cloud& queries) {
    return detail::potential_eval(queries, sol.target_points, sol.v,
                                  detail::safe_log(sol.target_weights), sol.cost, sol.tau_i,
                                  true, false)
        .values;
}

inline Vector extend_potential_target(const BridgeSolution& sol, const Cloud& queries) {
    return detail::potential_eval(queries, sol.source_points, sol.u,
                                  detail::safe_log(sol.source_weights), sol.cost, sol.tau_i,
                                  true, false)
        .values;
}

inline Cloud potential_gradient_source(const BridgeSolution& sol, const Cloud& queries) {
    return detail::potential_eval(queries, sol.target_points, sol.v,
                                  detail::safe_log(sol.target_weights), sol.cost, sol.tau_i,
                                  false, true)
        .gradients;
}

inline Cloud potential_gradient_target(const BridgeSolution& sol, const Cloud& queries) {
    return detail::potential_eval(queries, sol.source_points, sol.u,
                                  detail::safe_log(sol.source_weights), sol.cost, sol.tau_i,
                                  false, true)
        .gradients;
}

// Combined values-and-gradients evaluation sharing one cost matrix (used by
// the first-variation assembly).
inline detail::PotentialEval potential_eval_source(const BridgeSolution& sol,
                                                   const Cloud& queries) {
    return detail::potential_eval(queries, sol.target_points, sol.v,
                                  detail::safe_log(sol.target_weights), sol.cost, sol.tau_i,
                                  true, true);
}

inline detail::PotentialEval potential_eval_target(const BridgeSolution& sol,
                                                   const Cloud& queries) {
    return detail::potential_eval(queries, sol.source_points, sol.u,
                                  detail::safe_log(sol.source_weights), sol.cost, sol.tau_i,
                                  true, true);
}

// ---------------------------------------------------------------------------
// Coupling recovery and primal value.
// ---------------------------------------------------------------------------

struct Coupling {
    Eigen::MatrixXd gamma;   // n x k, nonnegative
    Vector row_marginal, col_marginal;
    bool from_converged = true;

    double mass() const { return gamma.sum(); }
};

inline Coupling recover_coupling(const BridgeSolution& sol) {
    if (!sol.converged)
        log_warn("recovering coupling from an unconverged bridge (violation %.3e)",
                 sol.marginal_violation);
    const Eigen::MatrixXd C = sol.cost.matrix(sol.source_points, sol.target_points);
    Coupling c;
    c.gamma.resize(C.rows(), C.cols());
    for (Eigen::Index i = 0; i < C.rows(); ++i)
        for (Eigen::Index j = 0; j < C.cols(); ++j)
            c.gamma(i, j) = std::exp((sol.u[i] + sol.v[j] - C(i, j)) / sol.tau_i) *
                            sol.source_weights[i] * sol.target_weights[j];
    c.row_marginal = c.gamma.rowwise().sum();
    c.col_marginal = c.gamma.colwise().sum();
    c.from_converged = sol.converged;
    return c;
}

inline double primal_value(const BridgeSolution& sol) {
    return sol.u.dot(sol.source_weights) + sol.v.dot(sol.target_weights);
}

}  // namespace mflt
