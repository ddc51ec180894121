#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mflt/common.hpp"
#include "mflt/pathspace.hpp"
#include "mflt/types.hpp"

namespace mflt {

// ---------------------------------------------------------------------------
// Squared energy distance, V-statistic form (diagonal included):
//   D^2(a, b) = 2 E|X - Y| - E|X - X'| - E|Y - Y'|
// with expectations under the empirical (weighted) measures.
// ---------------------------------------------------------------------------

namespace detail {
inline double mean_pair_norm(const Cloud& a, const Vector& wa, const Cloud& b,
                             const Vector& wb) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        double row = 0.0;
        for (Eigen::Index j = 0; j < b.rows(); ++j)
            row += wb[j] * (a.row(i) - b.row(j)).norm();
        total += wa[i] * row;
    }
    return total;
}

// deterministic ordering of (cloud, weights) pairs so the summation order,
// and therefore the result, is identical under argument swap
inline bool cloud_less(const Cloud& a, const Vector& wa, const Cloud& b, const Vector& wb) {
    if (a.rows() != b.rows()) return a.rows() < b.rows();
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j)
            if (a(i, j) != b(i, j)) return a(i, j) < b(i, j);
    for (Eigen::Index i = 0; i < wa.size(); ++i)
        if (wa[i] != wb[i]) return wa[i] < wb[i];
    return false;
}
}  // namespace detail

inline double energy_distance_sq(const Cloud& a, const Vector& wa, const Cloud& b,
                                 const Vector& wb) {
    if (a.rows() == 0 || b.rows() == 0) throw eval_error("energy distance of an empty cloud");
    if (a.cols() != b.cols()) throw eval_error("energy distance dimension mismatch");
    if (detail::cloud_less(b, wb, a, wa))
        return 2.0 * detail::mean_pair_norm(b, wb, a, wa) -
               detail::mean_pair_norm(b, wb, b, wb) - detail::mean_pair_norm(a, wa, a, wa);
    return 2.0 * detail::mean_pair_norm(a, wa, b, wb) - detail::mean_pair_norm(a, wa, a, wa) -
           detail::mean_pair_norm(b, wb, b, wb);
}

inline double energy_distance_sq(const Cloud& a, const Cloud& b) {
    return energy_distance_sq(a, Vector::Constant(a.rows(), 1.0 / a.rows()), b,
                              Vector::Constant(b.rows(), 1.0 / b.rows()));
}

// ---------------------------------------------------------------------------
// RMS energy distance over matched timepoints.
// ---------------------------------------------------------------------------

inline double rms_over_marginals(const std::vector<Cloud>& recon,
                                 const std::vector<double>& recon_times,
                                 const SnapshotSeries& truth,
                                 std::vector<double>* per_time_d2 = nullptr) {
    if (recon.size() != recon_times.size()) throw eval_error("clouds/times size mismatch");
    if (static_cast<int>(recon.size()) != truth.count())
        throw eval_error("timepoint count mismatch: reconstruction has " +
                         std::to_string(recon.size()) + ", truth has " +
                         std::to_string(truth.count()));
    const double span = std::max(1.0, std::abs(truth.t_last - truth.t_first));
    double sum = 0.0;
    if (per_time_d2) per_time_d2->clear();
    for (std::size_t i = 0; i < recon.size(); ++i) {
        if (std::abs(recon_times[i] - truth.original_time(static_cast<int>(i))) > 1e-9 * span)
            throw eval_error("time mismatch at index " + std::to_string(i));
        const auto& snap = truth.snapshots[i];
        const double d2 = std::max(
            0.0, energy_distance_sq(recon[i], Vector::Constant(recon[i].rows(),
                                                               1.0 / recon[i].rows()),
                                    snap.points, snap.weights));
        if (per_time_d2) per_time_d2->push_back(d2);
        sum += d2;
    }
    return std::sqrt(sum / static_cast<double>(recon.size()));
}

inline double rms_over_marginals(const MarginalState& state,
                                 const std::vector<double>& recon_times,
                                 const SnapshotSeries& truth,
                                 std::vector<double>* per_time_d2 = nullptr) {
    return rms_over_marginals(state.clouds, recon_times, truth, per_time_d2);
}

inline double rms_over_marginals(const SnapshotSeries& recon, const SnapshotSeries& truth,
                                 std::vector<double>* per_time_d2 = nullptr) {
    if (recon.count() != truth.count())
        throw eval_error("timepoint count mismatch between the two series");
    const double span = std::max(1.0, std::abs(truth.t_last - truth.t_first));
    double sum = 0.0;
    if (per_time_d2) per_time_d2->clear();
    for (int i = 0; i < recon.count(); ++i) {
        if (std::abs(recon.original_time(i) - truth.original_time(i)) > 1e-9 * span)
            throw eval_error("time mismatch at index " + std::to_string(i));
        const auto& a = recon.snapshots[static_cast<std::size_t>(i)];
        const auto& b = truth.snapshots[static_cast<std::size_t>(i)];
        const double d2 =
            std::max(0.0, energy_distance_sq(a.points, a.weights, b.points, b.weights));
        if (per_time_d2) per_time_d2->push_back(d2);
        sum += d2;
    }
    return std::sqrt(sum / recon.count());
}

// ---------------------------------------------------------------------------
// Branch classification of path endpoints.
// ---------------------------------------------------------------------------

struct BranchClassifier {
    enum class Kind { Halfspace, NearestCenter };
    Kind kind = Kind::Halfspace;
    int axis = 0;
    double threshold = 0.0;
    bool keep_below = true;  // halfspace: x[axis] < threshold
    RowVec center_a, center_b;
    int coords = 2;          // nearest: compare on the leading coordinates

    static BranchClassifier halfspace(int axis, double threshold, bool keep_below = true) {
        BranchClassifier c;
        c.kind = Kind::Halfspace;
        c.axis = axis;
        c.threshold = threshold;
        c.keep_below = keep_below;
        return c;
    }

    // matches when the endpoint is nearer to `a` than to `b`
    static BranchClassifier nearest(RowVec a, RowVec b, int coords = 2) {
        BranchClassifier c;
        c.kind = Kind::NearestCenter;
        c.center_a = std::move(a);
        c.center_b = std::move(b);
        c.coords = coords;
        return c;
    }

    bool matches(const Eigen::Ref<const RowVec>& x) const {
        switch (kind) {
            case Kind::Halfspace:
                return keep_below ? x[axis] < threshold : x[axis] > threshold;
            case Kind::NearestCenter: {
                const int k = std::min<int>(coords, static_cast<int>(x.size()));
                const double da = (x.head(k) - center_a.head(k)).squaredNorm();
                const double db = (x.head(k) - center_b.head(k)).squaredNorm();
                return da < db;
            }
        }
        return false;
    }
};

inline double branch_fraction(const std::vector<PathSample>& paths,
                              const BranchClassifier& classifier) {
    if (paths.empty()) throw eval_error("branch fraction of an empty path set");
    std::int64_t hits = 0;
    for (const auto& p : paths)
        if (classifier.matches(p.positions.row(p.positions.rows() - 1))) ++hits;
    return static_cast<double>(hits) / static_cast<double>(paths.size());
}

// ---------------------------------------------------------------------------
// EvalReport: per-time distances plus method comparison rows.
// ---------------------------------------------------------------------------

struct EvalReport {
    std::vector<double> times;
    // per method: per-time squared distances and the RMS
    std::vector<std::pair<std::string, std::vector<double>>> per_time;
    std::vector<std::pair<std::string, double>> rms_rows;

    void add(const std::string& method, std::vector<double> d2, double rms) {
        per_time.emplace_back(method, std::move(d2));
        rms_rows.emplace_back(method, rms);
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["times"] = times;
        nlohmann::json methods = nlohmann::json::object();
        for (std::size_t k = 0; k < per_time.size(); ++k) {
            nlohmann::json entry;
            entry["d2"] = per_time[k].second;
            entry["rms"] = rms_rows[k].second;
            methods[per_time[k].first] = entry;
        }
        j["methods"] = methods;
        return j;
    }

    void save_csv(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw input_error("cannot write eval csv: " + path);
        out << "method,t,d2,rms\n";
        char buf[32];
        for (std::size_t k = 0; k < per_time.size(); ++k)
            for (std::size_t i = 0; i < times.size(); ++i) {
                out << per_time[k].first << ',';
                std::snprintf(buf, sizeof(buf), "%.17g", times[i]);
                out << buf << ',';
                std::snprintf(buf, sizeof(buf), "%.17g", per_time[k].second[i]);
                out << buf << ',';
                std::snprintf(buf, sizeof(buf), "%.17g", rms_rows[k].second);
                out << buf << "\n";
            }
    }
};

}  // namespace mflt
