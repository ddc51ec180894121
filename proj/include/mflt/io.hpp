#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mflt/common.hpp"
#include "mflt/types.hpp"

namespace mflt {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Snapshot CSV: header "t,x1,...,xd[,w]", one observation per row, rows
// grouped by time value. All output is UTF-8, LF, fixed column order,
// full round-trip precision.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::stringstream ss(line);
    while (std::getline(ss, field, ',')) {
        const auto a = field.find_first_not_of(" \t\r");
        const auto b = field.find_last_not_of(" \t\r");
        out.push_back(a == std::string::npos ? "" : field.substr(a, b - a + 1));
    }
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}

inline double parse_double(const std::string& s, int line_no, const std::string& what) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw input_error("line " + std::to_string(line_no) + ": cannot parse " + what + " '" +
                          s + "'");
    }
}

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

inline SnapshotSeries load_snapshots(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw input_error("cannot open snapshot file: " + path);
    std::string line;
    if (!std::getline(in, line)) throw input_error(path + ": empty file");
    auto header = detail::split_csv_line(line);
    if (header.size() < 2 || header[0] != "t")
        throw input_error(path + ": header must be 't,x1,...,xd[,w]'");
    const bool has_weight = header.back() == "w";
    const int d = static_cast<int>(header.size()) - 1 - (has_weight ? 1 : 0);
    if (d < 1) throw input_error(path + ": no coordinate columns in header");

    struct Group {
        std::vector<RowVec> points;
        std::vector<double> weights;
    };
    std::map<double, Group> groups;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto fields = detail::split_csv_line(line);
        if (static_cast<int>(fields.size()) != static_cast<int>(header.size()))
            throw input_error("line " + std::to_string(line_no) + ": expected " +
                              std::to_string(header.size()) + " fields, got " +
                              std::to_string(fields.size()));
        const double t = detail::parse_double(fields[0], line_no, "time");
        RowVec x(d);
        for (int j = 0; j < d; ++j)
            x[j] = detail::parse_double(fields[static_cast<std::size_t>(j + 1)], line_no,
                                        "coordinate");
        if (!std::isfinite(t) || !x.allFinite())
            throw input_error("line " + std::to_string(line_no) + ": non-finite value");
        auto& g = groups[t];
        g.points.push_back(std::move(x));
        if (has_weight) {
            const double w = detail::parse_double(fields.back(), line_no, "weight");
            if (!std::isfinite(w) || w < 0.0)
                throw input_error("line " + std::to_string(line_no) + ": bad weight");
            g.weights.push_back(w);
        }
    }
    if (groups.size() < 2) throw input_error(path + ": need at least 2 distinct times");

    std::vector<Snapshot> snaps;
    for (auto& [t, g] : groups) {
        Cloud pts(static_cast<Eigen::Index>(g.points.size()), d);
        for (std::size_t i = 0; i < g.points.size(); ++i) pts.row(static_cast<Eigen::Index>(i)) = g.points[i];
        Vector w;
        if (has_weight) {
            w.resize(static_cast<Eigen::Index>(g.weights.size()));
            for (std::size_t i = 0; i < g.weights.size(); ++i) w[static_cast<Eigen::Index>(i)] = g.weights[i];
        }
        snaps.emplace_back(t, std::move(pts), std::move(w));
    }
    return SnapshotSeries(std::move(snaps));
}

inline void save_snapshots(const SnapshotSeries& series, const std::string& path,
                           bool write_weights = true) {
    std::ofstream out(path);
    if (!out) throw input_error("cannot write snapshot file: " + path);
    const int d = series.dim();
    out << "t";
    for (int j = 1; j <= d; ++j) out << ",x" << j;
    if (write_weights) out << ",w";
    out << "\n";
    for (const auto& s : series.snapshots) {
        for (Eigen::Index i = 0; i < s.points.rows(); ++i) {
            out << detail::format_double(s.time);
            for (int j = 0; j < d; ++j) out << ',' << detail::format_double(s.points(i, j));
            if (write_weights) out << ',' << detail::format_double(s.weights[i]);
            out << "\n";
        }
    }
}

// Marginal clouds in the same format (uniform weights omitted).
inline void save_clouds_csv(const std::vector<Cloud>& clouds, const std::vector<double>& times,
                            const std::string& path) {
    if (clouds.size() != times.size())
        throw input_error("save_clouds_csv: times/clouds size mismatch");
    std::ofstream out(path);
    if (!out) throw input_error("cannot write marginals file: " + path);
    const int d = clouds.empty() ? 0 : static_cast<int>(clouds.front().cols());
    out << "t";
    for (int j = 1; j <= d; ++j) out << ",x" << j;
    out << "\n";
    for (std::size_t i = 0; i < clouds.size(); ++i)
        for (Eigen::Index r = 0; r < clouds[i].rows(); ++r) {
            out << detail::format_double(times[i]);
            for (int j = 0; j < d; ++j) out << ',' << detail::format_double(clouds[i](r, j));
            out << "\n";
        }
}

// ---------------------------------------------------------------------------
// Data-driven scaling factors.
// ---------------------------------------------------------------------------

struct ScalingFactors {
    double sigma_scale_sq = 1.0;  // mean over consecutive pairs of E|X - Y|^2 / 2
    double eta_scale_sq = 1.0;    // mean over timepoints of E|X - X'|^2 / 2
};

namespace detail {
inline double mean_half_sq_dist(const Snapshot& a, const Snapshot& b) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < a.points.rows(); ++i)
        for (Eigen::Index j = 0; j < b.points.rows(); ++j)
            total += a.weights[i] * b.weights[j] * 0.5 *
                     (a.points.row(i) - b.points.row(j)).squaredNorm();
    return total;
}
}  // namespace detail

inline ScalingFactors compute_scaling(const SnapshotSeries& series) {
    const int T = series.count();
    ScalingFactors f;
    double pair_sum = 0.0;
    for (int i = 0; i + 1 < T; ++i)
        pair_sum += detail::mean_half_sq_dist(series.snapshots[static_cast<std::size_t>(i)],
                                              series.snapshots[static_cast<std::size_t>(i + 1)]);
    f.sigma_scale_sq = pair_sum / (T - 1);
    double self_sum = 0.0;
    for (int i = 0; i < T; ++i)
        self_sum += detail::mean_half_sq_dist(series.snapshots[static_cast<std::size_t>(i)],
                                              series.snapshots[static_cast<std::size_t>(i)]);
    f.eta_scale_sq = self_sum / T;

    if (!(f.sigma_scale_sq > 0.0))
        throw input_error("degenerate data: pairwise scaling factor is zero");
    if (!(f.eta_scale_sq > 0.0)) {
        log_warn("per-timepoint scaling factor is zero; falling back to the pairwise factor");
        f.eta_scale_sq = f.sigma_scale_sq;
    }
    return f;
}

// ---------------------------------------------------------------------------
// Centering + PCA projection of pooled points.
// ---------------------------------------------------------------------------

struct PcaBasis {
    RowVec mean;
    Eigen::MatrixXd components;  // d x k, orthonormal columns
    Vector singular_values;

    Cloud project(const Cloud& points) const {
        return (points.rowwise() - mean) * components;
    }
    Cloud inverse(const Cloud& projected) const {
        return (projected * components.transpose()).rowwise() + mean;
    }

    json to_json() const {
        json j;
        j["mean"] = std::vector<double>(mean.data(), mean.data() + mean.size());
        j["singular_values"] = std::vector<double>(
            singular_values.data(), singular_values.data() + singular_values.size());
        std::vector<std::vector<double>> comp;
        for (Eigen::Index r = 0; r < components.rows(); ++r) {
            std::vector<double> row;
            for (Eigen::Index c = 0; c < components.cols(); ++c) row.push_back(components(r, c));
            comp.push_back(std::move(row));
        }
        j["components"] = comp;
        return j;
    }
};

inline std::pair<Cloud, PcaBasis> center_and_pca(const Cloud& points, int k) {
    const auto n = points.rows();
    const auto d = points.cols();
    if (k < 1 || k > d) throw config_error("pca dimension must be in [1, d]");
    if (n <= k) throw config_error("pca needs more pooled points than output dimensions");

    PcaBasis basis;
    basis.mean = points.colwise().mean();
    Cloud centered = points.rowwise() - basis.mean;
    Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
    const Vector& sv = svd.singularValues();
    const double tol = std::max(n, d) * std::numeric_limits<double>::epsilon() * sv[0];
    int rank = 0;
    for (Eigen::Index i = 0; i < sv.size(); ++i)
        if (sv[i] > tol) ++rank;
    if (rank < k)
        throw config_error("pca rank deficient: requested " + std::to_string(k) +
                           " dimensions but achievable rank is " + std::to_string(rank));
    basis.components = svd.matrixV().leftCols(k);
    basis.singular_values = sv.head(k);
    return {centered * basis.components, basis};
}

inline SnapshotSeries apply_pca(const SnapshotSeries& series, const PcaBasis& basis) {
    std::vector<Snapshot> snaps;
    snaps.reserve(series.snapshots.size());
    for (const auto& s : series.snapshots)
        snaps.emplace_back(s.time, basis.project(s.points), s.weights);
    return SnapshotSeries(std::move(snaps));
}

// ---------------------------------------------------------------------------
// Config JSON. Unknown keys are rejected with their path; defaults are
// documented in the README table. rho may be the string "inf".
// ---------------------------------------------------------------------------

namespace detail {

inline void reject_unknown_keys(const json& j, const std::set<std::string>& allowed,
                                const std::string& where) {
    for (const auto& item : j.items())
        if (!allowed.count(item.key()))
            throw config_error("unknown config key '" + where + "/" + item.key() + "'");
}

template <typename T>
T get_or(const json& j, const std::string& key, T fallback) {
    if (!j.contains(key) || j.at(key).is_null()) return fallback;
    return j.at(key).get<T>();
}

}  // namespace detail

inline json growth_to_json(const GrowthPrior& g) {
    json j;
    switch (g.kind) {
        case GrowthPrior::Kind::Constant:
            j["kind"] = "constant";
            j["value"] = g.value;
            break;
        case GrowthPrior::Kind::TanhFirstCoord:
            j["kind"] = "tanh_first_coord";
            j["rate"] = g.rate;
            j["sharpness"] = g.sharpness;
            break;
    }
    return j;
}

inline GrowthPrior growth_from_json(const json& j) {
    detail::reject_unknown_keys(j, {"kind", "value", "rate", "sharpness"}, "growth");
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "constant") return GrowthPrior::constant(j.at("value").get<double>());
    if (kind == "tanh_first_coord")
        return GrowthPrior::tanh_first_coord(detail::get_or(j, "rate", 10.0),
                                             detail::get_or(j, "sharpness", 2.0));
    throw config_error("unknown growth kind '" + kind + "'");
}

inline json config_to_json(const ProblemConfig& cfg, const AnnealingSchedule& sched) {
    json j;
    j["lambda"] = cfg.lambda;
    j["sigma"] = cfg.sigma;
    j["tau"] = cfg.tau;
    j["m"] = cfg.m;
    j["eta"] = cfg.eta;
    j["iterations"] = cfg.iterations;
    j["seed"] = cfg.seed;
    j["epsilon"] = cfg.epsilon;
    if (std::isinf(cfg.rho))
        j["rho"] = "inf";
    else
        j["rho"] = cfg.rho;
    j["growth"] = cfg.growth ? growth_to_json(*cfg.growth) : json(nullptr);
    j["confine_sigma"] = cfg.confine_sigma ? json(*cfg.confine_sigma) : json(nullptr);

    json init;
    switch (cfg.init.kind) {
        case InitSpec::Kind::Gaussian:
            init["kind"] = "gaussian";
            init["mean"] = cfg.init.mean;
            init["std"] = cfg.init.stddev;
            break;
        case InitSpec::Kind::Resample:
            init["kind"] = "resample";
            init["jitter"] = cfg.init.jitter;
            break;
        case InitSpec::Kind::File:
            init["kind"] = "file";
            init["path"] = cfg.init.path;
            break;
    }
    j["init"] = init;
    j["knn_k"] = cfg.knn_k;
    j["report_stride"] = cfg.report_stride;
    j["checkpoint_stride"] = cfg.checkpoint_stride;
    j["sinkhorn"] = {{"tol", cfg.sinkhorn_tol}, {"max_iter", cfg.sinkhorn_max_iter}};
    j["auto_scale"] = cfg.auto_scale;
    j["threads"] = cfg.threads;

    if (sched.enabled()) {
        json a;
        a["c"] = sched.c;
        a["r"] = sched.r;
        a["steps"] = sched.anneal_steps;
        a["scale_eta"] = sched.scale_eta;
        a["scale_sigma"] = sched.scale_sigma;
        switch (sched.eps_mode) {
            case AnnealingSchedule::EpsMode::None: a["eps_mode"] = "none"; break;
            case AnnealingSchedule::EpsMode::Geometric: a["eps_mode"] = "geometric"; break;
            case AnnealingSchedule::EpsMode::Logarithmic:
                a["eps_mode"] = "logarithmic";
                a["eps_alpha"] = sched.eps_alpha;
                break;
        }
        j["annealing"] = a;
    } else {
        j["annealing"] = nullptr;
    }
    return j;
}

inline std::pair<ProblemConfig, AnnealingSchedule> config_from_json(const json& j) {
    detail::reject_unknown_keys(
        j,
        {"lambda", "sigma", "tau", "m", "eta", "iterations", "seed", "epsilon", "rho", "growth",
         "confine_sigma", "init", "knn_k", "report_stride", "checkpoint_stride", "sinkhorn",
         "auto_scale", "threads", "annealing"},
        "");
    for (const char* key : {"lambda", "sigma", "tau", "m"})
        if (!j.contains(key)) throw config_error(std::string("missing required key '") + key + "'");

    ProblemConfig cfg;
    cfg.lambda = j.at("lambda").get<double>();
    cfg.sigma = j.at("sigma").get<double>();
    cfg.tau = j.at("tau").get<double>();
    cfg.m = j.at("m").get<int>();
    cfg.eta = detail::get_or(j, "eta", cfg.eta);
    cfg.iterations = detail::get_or<std::int64_t>(j, "iterations", cfg.iterations);
    cfg.seed = detail::get_or<std::uint64_t>(j, "seed", cfg.seed);
    cfg.epsilon = detail::get_or(j, "epsilon", cfg.epsilon);
    if (j.contains("rho") && !j.at("rho").is_null()) {
        if (j.at("rho").is_string()) {
            if (j.at("rho").get<std::string>() != "inf")
                throw config_error("'/rho' must be a positive number or \"inf\"");
            cfg.rho = kInf;
        } else {
            cfg.rho = j.at("rho").get<double>();
        }
    }
    if (j.contains("growth") && !j.at("growth").is_null())
        cfg.growth = growth_from_json(j.at("growth"));
    if (j.contains("confine_sigma") && !j.at("confine_sigma").is_null())
        cfg.confine_sigma = j.at("confine_sigma").get<double>();
    if (j.contains("init") && !j.at("init").is_null()) {
        const json& init = j.at("init");
        detail::reject_unknown_keys(init, {"kind", "mean", "std", "jitter", "path"}, "init");
        const std::string kind = detail::get_or<std::string>(init, "kind", "gaussian");
        if (kind == "gaussian") {
            cfg.init.kind = InitSpec::Kind::Gaussian;
            cfg.init.mean = detail::get_or(init, "mean", 0.0);
            cfg.init.stddev = detail::get_or(init, "std", 0.1);
        } else if (kind == "resample") {
            cfg.init.kind = InitSpec::Kind::Resample;
            cfg.init.jitter = detail::get_or(init, "jitter", 0.0);
        } else if (kind == "file") {
            cfg.init.kind = InitSpec::Kind::File;
            cfg.init.path = init.at("path").get<std::string>();
        } else {
            throw config_error("unknown init kind '" + kind + "'");
        }
    }
    cfg.knn_k = detail::get_or(j, "knn_k", cfg.knn_k);
    cfg.report_stride = detail::get_or<std::int64_t>(j, "report_stride", cfg.report_stride);
    cfg.checkpoint_stride =
        detail::get_or<std::int64_t>(j, "checkpoint_stride", cfg.checkpoint_stride);
    if (j.contains("sinkhorn")) {
        const json& s = j.at("sinkhorn");
        detail::reject_unknown_keys(s, {"tol", "max_iter"}, "sinkhorn");
        cfg.sinkhorn_tol = detail::get_or(s, "tol", cfg.sinkhorn_tol);
        cfg.sinkhorn_max_iter = detail::get_or(s, "max_iter", cfg.sinkhorn_max_iter);
    }
    cfg.auto_scale = detail::get_or(j, "auto_scale", cfg.auto_scale);
    cfg.threads = detail::get_or(j, "threads", cfg.threads);
    cfg.validate();

    AnnealingSchedule sched = AnnealingSchedule::disabled(cfg.tau);
    if (j.contains("annealing") && !j.at("annealing").is_null()) {
        const json& a = j.at("annealing");
        detail::reject_unknown_keys(
            a, {"tau0_factor", "c", "r", "steps", "scale_eta", "scale_sigma", "eps_mode",
                "eps_alpha"},
            "annealing");
        if (a.contains("tau0_factor") && a.contains("c"))
            throw config_error("'/annealing' takes either tau0_factor or (c, r), not both");
        const auto steps = detail::get_or<std::int64_t>(a, "steps", 0);
        if (a.contains("tau0_factor")) {
            sched = AnnealingSchedule::geometric(cfg.tau, a.at("tau0_factor").get<double>(),
                                                 steps, detail::get_or(a, "scale_eta", true),
                                                 detail::get_or(a, "scale_sigma", true));
        } else if (a.contains("c")) {
            sched.c = a.at("c").get<double>();
            sched.r = a.at("r").get<double>();
            sched.anneal_steps = steps;
            sched.scale_eta = detail::get_or(a, "scale_eta", true);
            sched.scale_sigma = detail::get_or(a, "scale_sigma", true);
        } else {
            throw config_error("'/annealing' needs tau0_factor or c");
        }
        const std::string mode = detail::get_or<std::string>(a, "eps_mode", "none");
        if (mode == "none")
            sched.eps_mode = AnnealingSchedule::EpsMode::None;
        else if (mode == "geometric")
            sched.eps_mode = AnnealingSchedule::EpsMode::Geometric;
        else if (mode == "logarithmic")
            sched.eps_mode = AnnealingSchedule::EpsMode::Logarithmic;
        else
            throw config_error("unknown eps_mode '" + mode + "'");
        sched.eps_alpha = detail::get_or(a, "eps_alpha", 0.0);
        sched.validate();
    }
    return {cfg, sched};
}

inline std::pair<ProblemConfig, AnnealingSchedule> load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("cannot open config file: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw config_error("config parse error in " + path + ": " + e.what());
    }
    return config_from_json(j);
}

inline void save_config(const ProblemConfig& cfg, const AnnealingSchedule& sched,
                        const std::string& path) {
    std::ofstream out(path);
    if (!out) throw input_error("cannot write config file: " + path);
    out << config_to_json(cfg, sched).dump(2) << "\n";
}

}  // namespace mflt
