// mflt: trajectory inference from temporal snapshots.
//
// Subcommands: simulate, infer, sample-paths, evaluate, full-run.
// Exit codes: 0 success, 2 configuration/input error, 3 runtime error.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mflt/mflt.hpp"

namespace fs = std::filesystem;
using namespace mflt;

namespace {

constexpr const char* kToolVersion = "0.1.0";

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void write_json(const json& j, const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw input_error("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw input_error("cannot open " + path.string());
    json j;
    in >> j;
    return j;
}

std::vector<double> linspace(double a, double b, int n) {
    std::vector<double> out(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = a + (b - a) * i / (n - 1);
    return out;
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

struct SimulateArgs {
    std::string benchmark;
    std::string out_dir;
    int N = 0;               // intermediate snapshot size (0 = benchmark default)
    std::uint64_t seed = 0;
    std::string growth = "default";
    std::int64_t n0 = 0;     // 0 = benchmark default
    double dt = 1e-3;
    int gt_count = 500;
    bool dump_paths = false;
};

int cmd_simulate(const SimulateArgs& args) {
    PotentialSpec spec;
    double tau = 0.0, t0 = 0.0, t1 = 0.0;
    std::vector<int> counts(10, 0);
    bool grow = false;
    std::int64_t n0 = args.n0;

    if (args.benchmark == "bifurcation") {
        spec = PotentialSpec::bifurcation();
        tau = 0.25;
        t1 = 1.25;
        const int N = args.N > 0 ? args.N : 64;
        for (int i = 0; i < 10; ++i) counts[static_cast<std::size_t>(i)] = N;
        counts[0] = counts[9] = 64;
        grow = args.growth == "on";
        if (n0 == 0) n0 = 1200;
    } else if (args.benchmark == "bistable") {
        spec = PotentialSpec::bistable();
        tau = 1.0;
        t1 = 0.5;
        const int N = args.N > 0 ? args.N : 50;
        for (int i = 0; i < 10; ++i) counts[static_cast<std::size_t>(i)] = N;
        grow = args.growth != "off";  // branching is the point of this benchmark
        if (n0 == 0) n0 = 150;
    } else {
        throw config_error("unknown benchmark '" + args.benchmark +
                           "' (expected bifurcation or bistable)");
    }

    fs::create_directories(args.out_dir);
    const auto times = linspace(t0, t1, 10);
    const std::optional<GrowthPrior> growth =
        grow ? std::optional<GrowthPrior>(GrowthPrior::tanh_first_coord()) : std::nullopt;

    log_info("simulating %s: n0=%lld, growth=%s", args.benchmark.c_str(),
             static_cast<long long>(n0), grow ? "on" : "off");
    const GaussianX0 x0{0.0, 0.1};
    auto sim = euler_maruyama(spec, tau, x0, n0, t0, t1, args.dt, growth, args.seed, times);
    auto series = extract_snapshots(sim, times, counts, args.seed);
    save_snapshots(series, (fs::path(args.out_dir) / "snapshots.csv").string());

    // independent reference simulation for evaluation
    const std::uint64_t gt_seed = mix64(args.seed ^ 0x6774ULL);
    const std::int64_t gt_n0 = grow ? std::max<std::int64_t>(args.gt_count, n0)
                                    : static_cast<std::int64_t>(args.gt_count) * 10;
    auto gt_sim = euler_maruyama(spec, tau, x0, gt_n0, t0, t1, args.dt, growth, gt_seed, times);
    std::vector<int> gt_counts(10, args.gt_count);
    auto gt_series = extract_snapshots(gt_sim, times, gt_counts, gt_seed);
    save_snapshots(gt_series, (fs::path(args.out_dir) / "ground_truth.csv").string());

    if (args.dump_paths)
        save_paths_csv(root_paths(sim), (fs::path(args.out_dir) / "true_paths.csv").string());

    json manifest;
    manifest["tool"] = "mflt";
    manifest["version"] = kToolVersion;
    manifest["command"] = "simulate";
    manifest["benchmark"] = args.benchmark;
    manifest["seed"] = args.seed;
    manifest["n0"] = n0;
    manifest["dt"] = args.dt;
    manifest["growth"] = grow;
    manifest["counts"] = counts;
    manifest["gt_count"] = args.gt_count;
    manifest["tau"] = tau;
    manifest["t_span"] = {t0, t1};
    write_json(manifest, fs::path(args.out_dir) / "sim_manifest.json");

    std::cout << "wrote " << args.out_dir << "/snapshots.csv ("
              << series.count() << " timepoints) and ground_truth.csv\n";
    return 0;
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

struct InferArgs {
    std::string config_path;
    std::string data_path;
    std::string out_dir;
    std::string resume_path;
    std::string manifest_path;
    std::int64_t seed_override = -1;
    int threads_override = -1;
    std::int64_t iterations_override = -1;
    int pca_dims = 0;
};

int cmd_infer(const InferArgs& args) {
    ProblemConfig cfg;
    AnnealingSchedule sched;
    std::string data_path = args.data_path;
    int pca_dims = args.pca_dims;

    if (!args.manifest_path.empty()) {
        const json m = read_json(args.manifest_path);
        std::tie(cfg, sched) = config_from_json(m.at("config"));
        if (data_path.empty()) data_path = m.at("data").get<std::string>();
        if (m.contains("pca") && !m.at("pca").is_null()) pca_dims = m.at("pca").get<int>();
    } else {
        if (args.config_path.empty()) throw config_error("infer needs --config or --from-manifest");
        std::tie(cfg, sched) = load_config(args.config_path);
    }
    if (data_path.empty()) throw config_error("infer needs --data (or a manifest with one)");
    if (args.out_dir.empty()) throw config_error("infer needs --out");
    if (args.seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(args.seed_override);
    if (args.threads_override >= 0) cfg.threads = args.threads_override;
    if (args.iterations_override >= 0) cfg.iterations = args.iterations_override;

    SnapshotSeries series = load_snapshots(data_path);
    fs::create_directories(args.out_dir);
    const fs::path out(args.out_dir);

    if (pca_dims > 0) {
        Eigen::Index pooled_rows = 0;
        for (const auto& s : series.snapshots) pooled_rows += s.points.rows();
        Cloud pooled(pooled_rows, series.dim());
        Eigen::Index at = 0;
        for (const auto& s : series.snapshots) {
            pooled.middleRows(at, s.points.rows()) = s.points;
            at += s.points.rows();
        }
        auto [proj, basis] = center_and_pca(pooled, pca_dims);
        series = apply_pca(series, basis);
        write_json(basis.to_json(), out / "pca_basis.json");
        log_info("projected data to %d pca dimensions", pca_dims);
    }

    const json cfg_json = config_to_json(cfg, sched);
    json manifest;
    manifest["tool"] = "mflt";
    manifest["version"] = kToolVersion;
    manifest["command"] = "infer";
    manifest["config"] = cfg_json;
    manifest["config_hash"] = hex64(fnv1a(cfg_json.dump()));
    manifest["data"] = data_path;
    manifest["out"] = args.out_dir;
    manifest["seed"] = cfg.seed;
    manifest["pca"] = pca_dims > 0 ? json(pca_dims) : json(nullptr);
    write_json(manifest, out / "manifest.json");

    std::optional<OptimizerState> resume;
    if (!args.resume_path.empty()) {
        resume = load_checkpoint(args.resume_path);
        log_info("resuming from %s at iteration %lld", args.resume_path.c_str(),
                 static_cast<long long>(resume->k));
    }

    std::ofstream diag(out / "diagnostics.jsonl",
                       resume ? std::ios::app : std::ios::trunc);
    if (!diag) throw input_error("cannot write diagnostics.jsonl");

    std::vector<double> original_times;
    for (int i = 0; i < series.count(); ++i) original_times.push_back(series.original_time(i));

    RunCallbacks cb;
    cb.on_report = [&](const ObjectiveReport& rep) { diag << report_to_json(rep) << "\n"; };
    cb.on_checkpoint = [&](const OptimizerState& os) {
        const std::string tag = std::to_string(os.k);
        save_checkpoint(os, (out / ("ckpt_" + tag + ".json")).string());
        save_clouds_csv(os.state.clouds, original_times,
                        (out / ("marginals_" + tag + ".csv")).string());
    };

    auto os = run(series, cfg, sched, cb, std::move(resume));

    save_clouds_csv(os.state.clouds, original_times, (out / "marginals_final.csv").string());
    save_checkpoint(os, (out / "ckpt_final.json").string());

    // everything sample-paths needs to rebuild the path law
    json fin;
    fin["tau_final"] = schedule_at(sched, os.k, cfg).tau_k;
    fin["times_original"] = original_times;
    fin["times01"] = series.times01;
    fin["cost_scale"] = os.bridges.front().cost.scale;
    fin["growth_enabled"] = cfg.growth.has_value();
    fin["rho"] = std::isinf(cfg.rho) ? json("inf") : json(cfg.rho);
    fin["checkpoint"] = "ckpt_final.json";
    json bridges = json::array();
    for (const auto& b : os.bridges) {
        json e;
        e["u"] = std::vector<double>(b.u.data(), b.u.data() + b.u.size());
        e["v"] = std::vector<double>(b.v.data(), b.v.data() + b.v.size());
        e["source_weights"] = std::vector<double>(
            b.source_weights.data(), b.source_weights.data() + b.source_weights.size());
        e["target_weights"] = std::vector<double>(
            b.target_weights.data(), b.target_weights.data() + b.target_weights.size());
        e["tau_i"] = b.tau_i;
        e["converged"] = b.converged;
        bridges.push_back(std::move(e));
    }
    fin["bridges"] = std::move(bridges);
    write_json(fin, out / "final_state.json");

    std::cout << "wrote " << (out / "marginals_final.csv").string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// sample-paths
// ---------------------------------------------------------------------------

struct SamplePathsArgs {
    std::string run_dir;
    int count = 1000;
    int grid = 20;
    std::int64_t seed_override = -1;
    int threads = 0;
};

PathLaw load_path_law(const fs::path& run_dir) {
    const json fin = read_json(run_dir / "final_state.json");
    const auto os = load_checkpoint((run_dir / fin.at("checkpoint").get<std::string>()).string());

    PathLaw law;
    law.clouds = os.state.clouds;
    law.times01 = fin.at("times01").get<std::vector<double>>();
    law.times_original = fin.at("times_original").get<std::vector<double>>();
    law.tau = fin.at("tau_final").get<double>();
    const double cost_scale = fin.at("cost_scale").get<double>();
    const bool unbalanced = fin.at("rho").is_string() ? false : true;

    const json& bridges = fin.at("bridges");
    for (std::size_t i = 0; i < bridges.size(); ++i) {
        BridgeSolution b;
        const auto uu = bridges[i].at("u").get<std::vector<double>>();
        const auto vv = bridges[i].at("v").get<std::vector<double>>();
        const auto sw = bridges[i].at("source_weights").get<std::vector<double>>();
        const auto tw = bridges[i].at("target_weights").get<std::vector<double>>();
        b.u = Eigen::Map<const Vector>(uu.data(), static_cast<Eigen::Index>(uu.size()));
        b.v = Eigen::Map<const Vector>(vv.data(), static_cast<Eigen::Index>(vv.size()));
        b.source_weights = Eigen::Map<const Vector>(sw.data(), static_cast<Eigen::Index>(sw.size()));
        b.target_weights = Eigen::Map<const Vector>(tw.data(), static_cast<Eigen::Index>(tw.size()));
        b.source_points = law.clouds[i];
        b.target_points = law.clouds[i + 1];
        b.cost.scale = cost_scale;
        b.tau_i = bridges[i].at("tau_i").get<double>();
        b.converged = bridges[i].at("converged").get<bool>();
        b.rho = unbalanced ? 1.0 : kInf;  // only the balanced/unbalanced flag matters here
        law.couplings.push_back(recover_coupling(b));
        if (unbalanced) law.growth_heuristic = true;
    }
    if (fin.at("growth_enabled").get<bool>()) law.growth_heuristic = true;
    return law;
}

int cmd_sample_paths(const SamplePathsArgs& args) {
    if (args.run_dir.empty()) throw config_error("sample-paths needs --run");
    const fs::path run(args.run_dir);
    std::uint64_t seed;
    if (args.seed_override >= 0) {
        seed = static_cast<std::uint64_t>(args.seed_override);
    } else {
        seed = read_json(run / "manifest.json").at("seed").get<std::uint64_t>();
    }
    auto law = load_path_law(run);
    auto skeletons = chain_sample(law, args.count, seed);
    auto paths = reconstruct_paths(law, args.count, args.grid, seed, args.threads);
    save_skeletons_csv(skeletons, (run / "skeletons.csv").string());
    save_paths_csv(paths, (run / "paths.csv").string());
    std::cout << "wrote " << (run / "paths.csv").string() << " (" << paths.size()
              << " paths)\n";
    return 0;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct EvaluateArgs {
    std::string run_dir;
    std::string recon_path;
    std::string truth_path;
    std::string data_path;
    std::string out_path;
};

int cmd_evaluate(const EvaluateArgs& args) {
    if (args.truth_path.empty()) throw config_error("evaluate needs --truth");
    std::string recon_path = args.recon_path;
    std::string data_path = args.data_path;
    fs::path out_path;
    if (!args.run_dir.empty()) {
        const fs::path run(args.run_dir);
        if (recon_path.empty()) recon_path = (run / "marginals_final.csv").string();
        if (data_path.empty()) {
            const json manifest = read_json(run / "manifest.json");
            data_path = manifest.at("data").get<std::string>();
        }
        out_path = args.out_path.empty() ? run / "eval.json" : fs::path(args.out_path);
    } else {
        if (recon_path.empty()) throw config_error("evaluate needs --run or --recon");
        out_path = args.out_path.empty() ? fs::path("eval.json") : fs::path(args.out_path);
    }

    const SnapshotSeries truth = load_snapshots(args.truth_path);
    const SnapshotSeries recon = load_snapshots(recon_path);

    EvalReport report;
    for (int i = 0; i < truth.count(); ++i) report.times.push_back(truth.original_time(i));
    std::vector<double> d2;
    report.add("reconstruction", {}, rms_over_marginals(recon, truth, &d2));
    report.per_time.back().second = d2;
    if (!data_path.empty()) {
        const SnapshotSeries data = load_snapshots(data_path);
        std::vector<double> d2s;
        const double rms = rms_over_marginals(data, truth, &d2s);
        report.add("snapshots", std::move(d2s), rms);
    }

    write_json(report.to_json(), out_path);
    report.save_csv((out_path.parent_path() / (out_path.stem().string() + ".csv")).string());
    for (const auto& [method, rms] : report.rms_rows)
        std::cout << method << " rms energy distance: " << rms << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// full-run: simulate + infer + sample-paths + evaluate
// ---------------------------------------------------------------------------

struct FullRunArgs {
    SimulateArgs sim;
    std::string config_path;
    std::int64_t iterations = -1;
    int m = 0;
    int threads = 0;
    int count = 1000;
    int grid = 20;
};

int cmd_full_run(const FullRunArgs& args) {
    const fs::path out(args.sim.out_dir);
    int rc = cmd_simulate(args.sim);
    if (rc != 0) return rc;

    ProblemConfig cfg;
    AnnealingSchedule sched = AnnealingSchedule::disabled(0.25);
    if (!args.config_path.empty()) {
        std::tie(cfg, sched) = load_config(args.config_path);
    } else if (args.sim.benchmark == "bifurcation") {
        cfg.lambda = 0.05;
        cfg.sigma = 0.5;
        cfg.tau = 0.25;
        cfg.m = 100;
        cfg.eta = 0.1;
        cfg.iterations = 2500;
        sched = AnnealingSchedule::disabled(cfg.tau);
    } else {
        cfg.lambda = 0.025;
        cfg.sigma = 0.5;
        cfg.tau = 1.0;
        cfg.m = 100;
        cfg.eta = 0.1;
        cfg.iterations = 2500;
        cfg.growth = GrowthPrior::tanh_first_coord();
        sched = AnnealingSchedule::disabled(cfg.tau);
    }
    // inexact in-loop bridges; the final bridges are re-solved tightly
    cfg.sinkhorn_tol = 1e-3;
    cfg.sinkhorn_max_iter = 500;
    cfg.seed = args.sim.seed;
    if (args.iterations >= 0) cfg.iterations = args.iterations;
    if (args.m > 0) cfg.m = args.m;
    cfg.threads = args.threads;
    save_config(cfg, sched, (out / "config.json").string());

    InferArgs infer;
    infer.config_path = (out / "config.json").string();
    infer.data_path = (out / "snapshots.csv").string();
    infer.out_dir = (out / "run").string();
    rc = cmd_infer(infer);
    if (rc != 0) return rc;

    SamplePathsArgs sp;
    sp.run_dir = infer.out_dir;
    sp.count = args.count;
    sp.grid = args.grid;
    sp.threads = args.threads;
    rc = cmd_sample_paths(sp);
    if (rc != 0) return rc;

    EvaluateArgs ev;
    ev.run_dir = infer.out_dir;
    ev.truth_path = (out / "ground_truth.csv").string();
    ev.data_path = (out / "snapshots.csv").string();
    return cmd_evaluate(ev);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"trajectory inference from temporal snapshots via interacting "
                 "Langevin particle clouds"};
    app.set_version_flag("--version", kToolVersion);
    app.require_subcommand(1);

    std::string log_level;
    app.add_option("--log-level", log_level, "off|error|warn|info|debug (default: MFLT_LOG)");

    SimulateArgs sim;
    auto* c_sim = app.add_subcommand("simulate", "generate a benchmark dataset");
    c_sim->add_option("--benchmark", sim.benchmark, "bifurcation|bistable")->required();
    c_sim->add_option("--out", sim.out_dir, "output directory")->required();
    c_sim->add_option("--N", sim.N, "samples per intermediate timepoint");
    c_sim->add_option("--seed", sim.seed, "rng seed");
    c_sim->add_option("--growth", sim.growth, "on|off (branching in the simulation)");
    c_sim->add_option("--n0", sim.n0, "initial population size");
    c_sim->add_option("--dt", sim.dt, "integration step");
    c_sim->add_option("--gt-count", sim.gt_count, "reference particles per timepoint");
    c_sim->add_flag("--dump-paths", sim.dump_paths, "also write true root trajectories");

    InferArgs inf;
    auto* c_inf = app.add_subcommand("infer", "reconstruct marginals from snapshots");
    c_inf->add_option("--config", inf.config_path, "problem config json");
    c_inf->add_option("--data", inf.data_path, "snapshot csv");
    c_inf->add_option("--out", inf.out_dir, "run directory");
    c_inf->add_option("--resume", inf.resume_path, "checkpoint to resume from");
    c_inf->add_option("--from-manifest", inf.manifest_path, "re-execute a recorded run");
    c_inf->add_option("--seed", inf.seed_override, "seed override");
    c_inf->add_option("--threads", inf.threads_override, "thread count (0 = cores)");
    c_inf->add_option("--iterations", inf.iterations_override, "iteration override");
    c_inf->add_option("--pca", inf.pca_dims, "project data to this many pca dimensions");

    SamplePathsArgs sp;
    auto* c_sp = app.add_subcommand("sample-paths", "sample trajectories from a finished run");
    c_sp->add_option("--run", sp.run_dir, "run directory from infer")->required();
    c_sp->add_option("--count", sp.count, "number of paths");
    c_sp->add_option("--grid", sp.grid, "grid points per interval");
    c_sp->add_option("--seed", sp.seed_override, "seed override");
    c_sp->add_option("--threads", sp.threads, "thread count");

    EvaluateArgs ev;
    auto* c_ev = app.add_subcommand("evaluate", "energy distances against a reference");
    c_ev->add_option("--run", ev.run_dir, "run directory from infer");
    c_ev->add_option("--recon", ev.recon_path, "reconstruction csv (overrides --run)");
    c_ev->add_option("--truth", ev.truth_path, "reference snapshot csv")->required();
    c_ev->add_option("--data", ev.data_path, "observed snapshot csv for comparison");
    c_ev->add_option("--out", ev.out_path, "output json path");

    FullRunArgs fr;
    auto* c_fr = app.add_subcommand("full-run", "simulate, infer, sample and evaluate");
    c_fr->add_option("--benchmark", fr.sim.benchmark, "bifurcation|bistable")->required();
    c_fr->add_option("--out", fr.sim.out_dir, "output directory")->required();
    c_fr->add_option("--N", fr.sim.N, "samples per intermediate timepoint");
    c_fr->add_option("--seed", fr.sim.seed, "rng seed");
    c_fr->add_option("--growth", fr.sim.growth, "on|off");
    c_fr->add_option("--n0", fr.sim.n0, "initial population");
    c_fr->add_option("--dt", fr.sim.dt, "integration step");
    c_fr->add_option("--gt-count", fr.sim.gt_count, "reference particles per timepoint");
    c_fr->add_option("--config", fr.config_path, "config json (default: benchmark settings)");
    c_fr->add_option("--iterations", fr.iterations, "iteration override");
    c_fr->add_option("--m", fr.m, "particles per timepoint override");
    c_fr->add_option("--threads", fr.threads, "thread count");
    c_fr->add_option("--count", fr.count, "paths to sample");
    c_fr->add_option("--grid", fr.grid, "grid points per interval");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    if (!log_level.empty()) set_log_level(log_level);

    try {
        if (*c_sim) return cmd_simulate(sim);
        if (*c_inf) return cmd_infer(inf);
        if (*c_sp) return cmd_sample_paths(sp);
        if (*c_ev) return cmd_evaluate(ev);
        if (*c_fr) return cmd_full_run(fr);
    } catch (const config_error& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 2;
    } catch (const input_error& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "runtime error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
