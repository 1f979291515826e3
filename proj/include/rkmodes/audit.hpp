#pragma once

// Experiment orchestration: simulate, run many independent fits, cluster the
// estimates, compare clusters with the defect roots, re-project each cluster
// with a high-accuracy integrator and write every artifact to one directory.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "identifiability.hpp"
#include "inference.hpp"
#include "integrators.hpp"
#include "mixture.hpp"
#include "ode_models.hpp"
#include "simulate.hpp"

namespace rkmodes {

enum class DatasetMode { Shared, PerChain };
enum class FitMethod { Mcmc, Lbfgs };

inline std::string to_string(DatasetMode m) { return m == DatasetMode::Shared ? "shared" : "per_chain"; }
inline std::string to_string(FitMethod m) { return m == FitMethod::Mcmc ? "mcmc" : "lbfgs"; }

inline DatasetMode dataset_mode_from_string(const std::string& s)
{
    if (s == "shared") return DatasetMode::Shared;
    if (s == "per_chain") return DatasetMode::PerChain;
    throw std::invalid_argument("unknown dataset mode '" + s + "' (expected shared or per_chain)");
}

inline FitMethod fit_method_from_string(const std::string& s)
{
    if (s == "mcmc") return FitMethod::Mcmc;
    if (s == "lbfgs") return FitMethod::Lbfgs;
    throw std::invalid_argument("unknown fit method '" + s + "' (expected mcmc or lbfgs)");
}

struct ExperimentConfig {
    std::string id = "experiment";
    ModelKind model = ModelKind::Affine;
    AffineParams affine_truth{10.0, 1.0};
    CanhamParams canham_truth{0.8, 8.0, 1.0};
    SurveyDesign design;
    NoiseSpec noise;
    StepConfig truth_integrator = StepConfig::rk4(1e-4);  ///< Canham truth only
    DatasetMode dataset_mode = DatasetMode::Shared;
    FitMethod method = FitMethod::Mcmc;
    FitConfig fit;
    std::optional<StepConfig> reproject_integrator;  ///< defaults per model
    int n_chains = 200;
    std::uint64_t master_seed = 1;
    int workers = 0;  ///< 0 = hardware concurrency
    double multimodal_factor = 5.0;
    std::string output_dir;

    [[nodiscard]] StepConfig reprojection() const
    {
        if (reproject_integrator) return *reproject_integrator;
        return model == ModelKind::Affine ? StepConfig::analytic() : StepConfig::rk45(1e-10);
    }

    /// Deterministic per-chain seed; distinct master seeds give disjoint seed sets.
    [[nodiscard]] std::uint64_t chain_seed(int index) const
    {
        return CounterRng::derive_key(master_seed, static_cast<std::uint64_t>(index));
    }
};

/// Paper-design defaults for each model.
inline ExperimentConfig default_experiment(ModelKind kind)
{
    ExperimentConfig c;
    c.model = kind;
    c.fit = FitConfig::defaults(kind);
    if (kind == ModelKind::Canham) {
        c.design = {10, 0.0, 5.0, 1.0};
        c.dataset_mode = DatasetMode::PerChain;
        c.n_chains = 100;
    }
    return c;
}

inline void validate(const ExperimentConfig& cfg)
{
    if (cfg.n_chains < 1) throw std::invalid_argument("n_chains must be positive");
    if (cfg.fit.model != cfg.model) throw std::invalid_argument("fit model does not match experiment model");
    validate(cfg.fit);
    if (cfg.fit.integrator.method == Method::RK4Fixed) rk4_step_count(cfg.design.dt, cfg.fit.integrator.h);
    if (!is_high_accuracy(cfg.reprojection()))
        throw std::invalid_argument("re-projection integrator must be high accuracy (analytic, RK45 tol <= 1e-9 "
                                    "or RK4 h <= 1e-3)");
    if (cfg.model == ModelKind::Canham && cfg.reprojection().method == Method::AnalyticAffine)
        throw std::invalid_argument("no analytic solution for the Canham model");
}

// ---------------------------------------------------------------------------
// JSON

inline void to_json(nlohmann::json& j, const StepConfig& c)
{
    j = {{"method", to_string(c.method)}};
    if (c.method == Method::RK4Fixed) j["h"] = c.h;
    if (c.method == Method::RK45Adaptive) {
        j["rel_tol"] = c.rel_tol;
        j["abs_tol"] = c.abs_tol;
        j["max_steps"] = c.max_steps;
    }
}

inline void from_json(const nlohmann::json& j, StepConfig& c)
{
    c = StepConfig{};
    c.method = method_from_string(j.at("method").get<std::string>());
    c.h = j.value("h", c.h);
    if (j.contains("tol")) c.rel_tol = c.abs_tol = j.at("tol").get<double>();
    c.rel_tol = j.value("rel_tol", c.rel_tol);
    c.abs_tol = j.value("abs_tol", c.abs_tol);
    c.max_steps = j.value("max_steps", c.max_steps);
}

inline nlohmann::json fit_to_json(const FitConfig& f, FitMethod method)
{
    nlohmann::json j;
    j["method"] = to_string(method);
    j["integrator"] = f.integrator;
    j["priors"] = f.priors;
    j["error_sd"] = f.error_sd;
    j["warmup"] = f.sampler.warmup;
    j["samples"] = f.sampler.samples;
    j["target_accept"] = f.sampler.target_accept;
    j["lbfgs_max_iterations"] = f.lbfgs.max_iterations;
    j["lbfgs_gradient_tolerance"] = f.lbfgs.gradient_tolerance;
    j["init"] = f.init == InitRule::PriorDraw ? "prior" : "fixed";
    if (f.init == InitRule::Fixed) j["init_values"] = f.init_values;
    return j;
}

inline void fit_from_json(const nlohmann::json& j, ModelKind kind, FitConfig& f, FitMethod& method)
{
    f = FitConfig::defaults(kind);
    method = fit_method_from_string(j.value("method", std::string("mcmc")));
    if (j.contains("integrator")) f.integrator = j.at("integrator").get<StepConfig>();
    if (j.contains("priors")) f.priors = j.at("priors").get<PriorSpec>();
    f.error_sd = j.value("error_sd", f.error_sd);
    f.sampler.warmup = j.value("warmup", f.sampler.warmup);
    f.sampler.samples = j.value("samples", f.sampler.samples);
    f.sampler.target_accept = j.value("target_accept", f.sampler.target_accept);
    f.lbfgs.max_iterations = j.value("lbfgs_max_iterations", f.lbfgs.max_iterations);
    f.lbfgs.gradient_tolerance = j.value("lbfgs_gradient_tolerance", f.lbfgs.gradient_tolerance);
    const auto init = j.value("init", std::string("prior"));
    if (init == "fixed") {
        f.init = InitRule::Fixed;
        f.init_values = j.at("init_values").get<std::vector<double>>();
    } else if (init != "prior") {
        throw std::invalid_argument("unknown init rule '" + init + "' (expected prior or fixed)");
    }
}

inline nlohmann::json to_json_value(const ExperimentConfig& c)
{
    nlohmann::json j;
    j["id"] = c.id;
    j["model"] = to_string(c.model);
    if (c.model == ModelKind::Affine)
        j["truth"] = c.affine_truth;
    else
        j["truth"] = c.canham_truth;
    j["design"] = {{"n_obs", c.design.n_obs}, {"t0", c.design.t0}, {"dt", c.design.dt}, {"y0", c.design.y0}};
    j["noise"] = {{"sd", c.noise.sd}, {"precision", c.noise.precision}, {"seed", c.noise.seed}};
    if (c.model == ModelKind::Canham) j["truth_integrator"] = c.truth_integrator;
    j["dataset_mode"] = to_string(c.dataset_mode);
    j["fit"] = fit_to_json(c.fit, c.method);
    j["reproject_integrator"] = c.reprojection();
    j["n_chains"] = c.n_chains;
    j["master_seed"] = c.master_seed;
    j["workers"] = c.workers;
    j["multimodal_factor"] = c.multimodal_factor;
    if (!c.output_dir.empty()) j["output_dir"] = c.output_dir;
    return j;
}

inline ExperimentConfig experiment_from_json(const nlohmann::json& j)
{
    const auto kind = model_kind_from_string(j.value("model", std::string("affine")));
    ExperimentConfig c = default_experiment(kind);
    c.id = j.value("id", c.id);
    if (j.contains("truth")) {
        if (kind == ModelKind::Affine)
            c.affine_truth = j.at("truth").get<AffineParams>();
        else
            c.canham_truth = j.at("truth").get<CanhamParams>();
    }
    if (j.contains("design")) {
        const auto& d = j.at("design");
        c.design.n_obs = d.value("n_obs", c.design.n_obs);
        c.design.t0 = d.value("t0", c.design.t0);
        c.design.dt = d.value("dt", c.design.dt);
        c.design.y0 = d.value("y0", c.design.y0);
    }
    if (j.contains("noise")) {
        const auto& n = j.at("noise");
        c.noise.sd = n.value("sd", c.noise.sd);
        c.noise.precision = n.value("precision", c.noise.precision);
        c.noise.seed = n.value("seed", c.noise.seed);
    }
    if (j.contains("truth_integrator")) c.truth_integrator = j.at("truth_integrator").get<StepConfig>();
    if (j.contains("dataset_mode")) c.dataset_mode = dataset_mode_from_string(j.at("dataset_mode").get<std::string>());
    if (j.contains("fit")) fit_from_json(j.at("fit"), kind, c.fit, c.method);
    if (j.contains("reproject_integrator")) c.reproject_integrator = j.at("reproject_integrator").get<StepConfig>();
    c.n_chains = j.value("n_chains", c.n_chains);
    c.master_seed = j.value("master_seed", c.master_seed);
    c.workers = j.value("workers", c.workers);
    c.multimodal_factor = j.value("multimodal_factor", c.multimodal_factor);
    c.output_dir = j.value("output_dir", c.output_dir);
    validate(c);
    return c;
}

inline ExperimentConfig load_experiment(const std::string& path)
{
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path);
    return experiment_from_json(nlohmann::json::parse(f));
}

// ---------------------------------------------------------------------------
// Data

/// The experiment's base dataset (the one every chain sees in shared mode).
inline ObservationSeries base_dataset(const ExperimentConfig& cfg, std::uint64_t stream = 0)
{
    if (cfg.model == ModelKind::Affine) return simulate_affine(cfg.affine_truth, cfg.design, cfg.noise, stream);
    return simulate_canham(cfg.canham_truth, cfg.design, cfg.noise, cfg.truth_integrator, stream);
}

/// One dataset for shared mode, otherwise one per chain (fresh noise around
/// the same truth, keyed by the chain seed).
inline std::vector<ObservationSeries> experiment_datasets(const ExperimentConfig& cfg)
{
    const auto base = base_dataset(cfg);
    if (cfg.dataset_mode == DatasetMode::Shared) return {base};
    std::vector<ObservationSeries> out;
    out.reserve(static_cast<std::size_t>(cfg.n_chains));
    for (int i = 0; i < cfg.n_chains; ++i) out.push_back(renoise(base, cfg.noise, cfg.chain_seed(i)));
    return out;
}

// ---------------------------------------------------------------------------
// Chains

inline ChainResult run_chain(const FitConfig& fit, FitMethod method, const ObservationSeries& series,
                             std::uint64_t seed)
{
    try {
        return method == FitMethod::Mcmc ? run_mcmc(fit, series, seed) : run_lbfgs(fit, series, seed);
    } catch (const std::exception& e) {
        ChainResult r;
        r.seed = seed;
        r.model = fit.model;
        r.status = ChainStatus::Error;
        r.message = e.what();
        return r;
    }
}

/// Runs all chains on a worker pool. Results are indexed by chain, so the
/// output never depends on scheduling.
inline std::vector<ChainResult> run_chains(const ExperimentConfig& cfg, const std::vector<ObservationSeries>& data)
{
    const int n = cfg.n_chains;
    std::vector<ChainResult> out(static_cast<std::size_t>(n));
    int workers = cfg.workers > 0 ? cfg.workers : static_cast<int>(std::thread::hardware_concurrency());
    workers = std::clamp(workers, 1, n);
    std::atomic<int> next{0};
    auto work = [&] {
        for (int i = next++; i < n; i = next++) {
            const auto& series = data.size() == 1 ? data.front() : data[static_cast<std::size_t>(i)];
            out[static_cast<std::size_t>(i)] = run_chain(cfg.fit, cfg.method, series, cfg.chain_seed(i));
        }
    };
    std::vector<std::thread> pool;
    for (int w = 1; w < workers; ++w) pool.emplace_back(work);
    work();
    for (auto& t : pool) t.join();
    return out;
}

inline bool usable(const ChainResult& r)
{
    if (r.status != ChainStatus::Ok || r.estimate.empty()) return false;
    return std::all_of(r.estimate.begin(), r.estimate.end(), [](double v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------
// Re-projection audit

struct HealthRecord {
    std::vector<double> params;            ///< estimate-scale parameters
    std::vector<double> in_model;          ///< projection with the fit's integrator
    std::vector<double> high_accuracy;     ///< projection with the re-projection integrator
    std::vector<double> in_model_error;    ///< |y_obs - in_model| per time
    std::vector<double> high_accuracy_error;
    double in_model_rmse = std::nan("");
    double high_accuracy_rmse = std::nan("");
    double gap_rmse = std::nan("");  ///< RMSE between the two projections
    double gap_max = std::nan("");
    int negative_substeps = 0;
    int negative_substeps_first_step = 0;  ///< within the very first integration step
    double max_overshoot = 0.0;  ///< furthest a sub-step state strays outside its step's end points
    bool unstable = false;
    std::string message;
    std::vector<StepTrace> traces;  ///< in-model sub-step traces
};

inline OdeModel model_from_estimate(ModelKind kind, const std::vector<double>& est)
{
    if (kind == ModelKind::Affine) {
        if (est.size() != 2) throw std::invalid_argument("affine estimate needs (beta0, beta1)");
        return OdeModel{AffineParams{est[0], est[1]}};
    }
    if (est.size() != 3) throw std::invalid_argument("Canham estimate needs (g_max, y_max, k)");
    return OdeModel{CanhamParams{est[0], est[1], est[2]}};
}

namespace detail {

inline double rmse(const std::vector<double>& a, const std::vector<double>& b)
{
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s / static_cast<double>(a.size()));
}

/// Projection from y_obs[0], keeping traces; stops at the first domain error.
inline std::vector<double> traced_projection(const OdeModel& model, const ObservationSeries& s,
                                             const StepConfig& cfg, std::vector<StepTrace>& traces,
                                             std::string& error)
{
    std::vector<double> out{s.y_obs.front()};
    for (std::size_t j = 1; j < s.size(); ++j) {
        try {
            auto r = integrate_interval(model, out.back(), s.times[j - 1], s.times[j], cfg, true);
            out.push_back(r.y1);
            for (auto& t : r.traces) traces.push_back(std::move(t));
        } catch (const IntegrationDomainError& e) {
            for (const auto& t : e.partial_trace()) traces.push_back(t);
            error = e.what();
            break;
        } catch (const std::exception& e) {
            error = e.what();
            break;
        }
    }
    return out;
}

}  // namespace detail

/// Re-projects one parameter vector with the fit's integrator and with a
/// high-accuracy integrator, and records the numerical-health signals.
inline HealthRecord reproject_cluster(ModelKind kind, const std::vector<double>& params,
                                      const ObservationSeries& series, const StepConfig& fit_cfg,
                                      const StepConfig& fine_cfg)
{
    if (!is_high_accuracy(fine_cfg))
        throw std::invalid_argument("re-projection needs analytic, RK45 tol <= 1e-9 or RK4 h <= 1e-3");
    HealthRecord h;
    h.params = params;
    const OdeModel model = model_from_estimate(kind, params);

    std::string err_in, err_fine;
    h.in_model = detail::traced_projection(model, series, fit_cfg, h.traces, err_in);
    std::vector<StepTrace> fine_traces;
    h.high_accuracy = detail::traced_projection(model, series, fine_cfg, fine_traces, err_fine);
    if (!err_in.empty() || !err_fine.empty()) {
        h.unstable = true;
        h.message = !err_in.empty() ? "in-model: " + err_in : "high-accuracy: " + err_fine;
    }

    for (std::size_t s = 0; s < h.traces.size(); ++s) {
        const auto& tr = h.traces[s];
        const double lo = std::min(tr.y_start, tr.y_end), hi = std::max(tr.y_start, tr.y_end);
        for (const auto& st : tr.stages) {
            if (st.state < 0.0) {
                ++h.negative_substeps;
                if (s == 0) ++h.negative_substeps_first_step;
            }
            if (std::isfinite(st.state)) h.max_overshoot = std::max({h.max_overshoot, lo - st.state, st.state - hi});
        }
    }

    const std::size_t n_in = h.in_model.size(), n_fine = h.high_accuracy.size();
    for (std::size_t j = 0; j < n_in; ++j) h.in_model_error.push_back(std::abs(series.y_obs[j] - h.in_model[j]));
    for (std::size_t j = 0; j < n_fine; ++j)
        h.high_accuracy_error.push_back(std::abs(series.y_obs[j] - h.high_accuracy[j]));
    const std::vector<double> obs(series.y_obs.begin(), series.y_obs.end());
    if (n_in == series.size()) h.in_model_rmse = detail::rmse(h.in_model, obs);
    if (n_fine == series.size()) h.high_accuracy_rmse = detail::rmse(h.high_accuracy, obs);
    if (n_in == series.size() && n_fine == series.size()) {
        h.gap_rmse = detail::rmse(h.in_model, h.high_accuracy);
        h.gap_max = 0.0;
        for (std::size_t j = 0; j < n_in; ++j) h.gap_max = std::max(h.gap_max, std::abs(h.in_model[j] - h.high_accuracy[j]));
    }
    return h;
}

// ---------------------------------------------------------------------------
// Verdict

struct TheoryMatch {
    int component = 0;
    double beta1 = 0.0;
    double nearest_root = std::nan("");
    double relative_error = std::nan("");
    bool within_one_percent = false;
};

struct AuditVerdict {
    bool multimodal = false;
    int n_chains = 0;
    int n_used = 0;
    double failure_fraction = 0.0;
    std::map<std::string, int> status_counts;
    ModeReport report;
    DefectRoots predicted;
    std::vector<TheoryMatch> theory;
    std::vector<HealthRecord> clusters;
};

/// Defect roots for an affine RK4 fit; empty otherwise.
inline DefectRoots predicted_roots(const ExperimentConfig& cfg, DefectSpec* spec_out = nullptr)
{
    DefectSpec spec;
    if (cfg.model == ModelKind::Affine) {
        spec.h = cfg.fit.integrator.h;
        spec.beta1_true = cfg.affine_truth.beta1;
        spec.alpha = cfg.affine_truth.alpha();
    }
    if (spec_out) *spec_out = spec;
    if (cfg.model != ModelKind::Affine || cfg.fit.integrator.method != Method::RK4Fixed) return {};
    return find_roots(spec);
}

inline AuditVerdict audit(const ExperimentConfig& cfg, const std::vector<ChainResult>& chains,
                          const ObservationSeries& reference, MixtureFit* fit_out = nullptr)
{
    AuditVerdict v;
    v.n_chains = static_cast<int>(chains.size());
    std::vector<std::vector<double>> points;
    for (const auto& c : chains) {
        ++v.status_counts[to_string(c.status)];
        if (usable(c)) points.push_back(c.estimate);
    }
    v.n_used = static_cast<int>(points.size());
    v.failure_fraction = v.n_chains > 0 ? 1.0 - static_cast<double>(v.n_used) / v.n_chains : 0.0;

    DefectSpec spec;
    v.predicted = predicted_roots(cfg, &spec);
    if (points.size() < 4) {
        if (fit_out) *fit_out = MixtureFit{};
        return v;
    }
    const MixtureFit fit = fit_em(points);
    if (fit_out) *fit_out = fit;
    v.multimodal = is_multimodal(fit, cfg.multimodal_factor);
    v.report = mode_report(fit, v.predicted, spec, cfg.fit.priors, cfg.model, reference.y_bar);

    for (std::size_t k = 0; k < fit.components.size(); ++k) {
        const Vec& m = fit.components[k].mean;
        const std::vector<double> params(m.data(), m.data() + m.size());
        v.clusters.push_back(reproject_cluster(cfg.model, params, reference, cfg.fit.integrator, cfg.reprojection()));
        if (cfg.model == ModelKind::Affine && !v.predicted.empty()) {
            TheoryMatch t;
            t.component = static_cast<int>(k) + 1;
            t.beta1 = m(1);
            t.nearest_root = v.report.components[k].nearest_root;
            t.relative_error = v.report.components[k].root_relative_error;
            t.within_one_percent = t.relative_error <= 0.01;
            v.theory.push_back(t);
        }
    }
    return v;
}

inline nlohmann::json to_json_value(const HealthRecord& h)
{
    auto num = [](double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); };
    nlohmann::json j;
    j["params"] = h.params;
    j["in_model_rmse"] = num(h.in_model_rmse);
    j["high_accuracy_rmse"] = num(h.high_accuracy_rmse);
    j["gap_rmse"] = num(h.gap_rmse);
    j["gap_max"] = num(h.gap_max);
    j["negative_substeps"] = h.negative_substeps;
    j["negative_substeps_first_step"] = h.negative_substeps_first_step;
    j["max_overshoot"] = h.max_overshoot;
    j["unstable"] = h.unstable;
    if (!h.message.empty()) j["message"] = h.message;
    j["in_model_error"] = nlohmann::json::array();
    for (double e : h.in_model_error) j["in_model_error"].push_back(num(e));
    j["high_accuracy_error"] = nlohmann::json::array();
    for (double e : h.high_accuracy_error) j["high_accuracy_error"].push_back(num(e));
    return j;
}

inline nlohmann::json to_json_value(const AuditVerdict& v)
{
    nlohmann::json j;
    j["multimodal"] = v.multimodal;
    j["n_chains"] = v.n_chains;
    j["n_used"] = v.n_used;
    j["failure_fraction"] = v.failure_fraction;
    j["status_counts"] = v.status_counts;
    j["predicted_roots"] = v.predicted.roots;
    j["mixture"] = to_json_value(v.report);
    j["theory_match"] = nlohmann::json::array();
    for (const auto& t : v.theory)
        j["theory_match"].push_back({{"component", t.component},
                                     {"beta1", t.beta1},
                                     {"nearest_root", t.nearest_root},
                                     {"relative_error", t.relative_error},
                                     {"within_one_percent", t.within_one_percent}});
    j["clusters"] = nlohmann::json::array();
    for (const auto& h : v.clusters) j["clusters"].push_back(to_json_value(h));
    return j;
}

// ---------------------------------------------------------------------------
// Chain table I/O

inline void write_chains_csv(std::ostream& os, ModelKind kind, const std::vector<ChainResult>& chains)
{
    const auto est = estimate_names(kind);
    const auto par = parameter_names(kind);
    os << "chain,seed,status,converged";
    for (const auto& n : est) os << ',' << n;
    for (const auto& n : par) os << ",theta_" << n;
    os << ",acceptance_rate,log_posterior,iterations,message\n";
    os.precision(17);
    for (std::size_t i = 0; i < chains.size(); ++i) {
        const auto& c = chains[i];
        os << i << ',' << c.seed << ',' << to_string(c.status) << ',' << (c.converged ? 1 : 0);
        for (std::size_t k = 0; k < est.size(); ++k) os << ',' << (k < c.estimate.size() ? c.estimate[k] : std::nan(""));
        for (std::size_t k = 0; k < par.size(); ++k) os << ',' << (k < c.theta.size() ? c.theta[k] : std::nan(""));
        std::string msg = c.message;
        std::replace(msg.begin(), msg.end(), ',', ';');
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        os << ',' << c.acceptance_rate << ',' << c.log_posterior << ',' << c.iterations << ',' << msg << '\n';
    }
}

inline std::vector<ChainResult> read_chains_csv(std::istream& is, ModelKind kind)
{
    const std::size_t n_est = estimate_names(kind).size();
    const std::size_t n_par = parameter_names(kind).size();
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("empty chain table");
    std::vector<ChainResult> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (line.back() == ',') f.emplace_back();
        if (f.size() < 4 + n_est + n_par + 4) throw std::runtime_error("malformed chain row: " + line);
        ChainResult c;
        c.model = kind;
        std::size_t k = 1;
        c.seed = std::stoull(f[k++]);
        c.status = chain_status_from_string(f[k++]);
        c.converged = f[k++] == "1";
        for (std::size_t i = 0; i < n_est; ++i) c.estimate.push_back(std::stod(f[k++]));
        for (std::size_t i = 0; i < n_par; ++i) c.theta.push_back(std::stod(f[k++]));
        c.acceptance_rate = std::stod(f[k++]);
        c.log_posterior = std::stod(f[k++]);
        c.iterations = std::stoi(f[k++]);
        c.message = f[k];
        out.push_back(std::move(c));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Plot data

/// Component index (0-based) with the highest responsibility for each point.
inline std::vector<int> assign_components(const MixtureFit& fit, const std::vector<std::vector<double>>& points)
{
    std::vector<int> labels(points.size(), 0);
    if (fit.components.size() < 2 || points.empty()) return labels;
    const Mat x = to_matrix(points);
    Mat lp(x.rows(), 2);
    for (int k = 0; k < 2; ++k)
        lp.col(k) = detail::log_normal_density_rows(x, fit.components[static_cast<std::size_t>(k)].mean,
                                                    fit.components[static_cast<std::size_t>(k)].cov)
                        .array() +
                    std::log(fit.components[static_cast<std::size_t>(k)].weight);
    for (Eigen::Index i = 0; i < x.rows(); ++i) labels[static_cast<std::size_t>(i)] = lp(i, 1) > lp(i, 0) ? 1 : 0;
    return labels;
}

struct ExperimentArtifacts {
    ExperimentConfig config;
    ObservationSeries reference;  ///< base dataset
    std::vector<ChainResult> chains;
    MixtureFit mixture;
    AuditVerdict verdict;
};

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& p)
{
    std::ofstream f(p);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    f.precision(17);
    return f;
}

}  // namespace detail

/// Writes the files behind the figures into `dir`:
///   scatter.csv        chain estimates with their cluster label
///   projections.csv    observations, truth and both projections per cluster
///   trace_cluster<k>.tsv  in-model sub-step trace at each cluster centre
///   defect_curve.tsv   defect samples (affine RK4 only)
inline void emit_plot_data(const ExperimentArtifacts& a, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    const auto names = estimate_names(a.config.model);

    std::vector<std::vector<double>> pts;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < a.chains.size(); ++i)
        if (usable(a.chains[i])) {
            pts.push_back(a.chains[i].estimate);
            idx.push_back(i);
        }
    const auto labels = assign_components(a.mixture, pts);
    {
        auto f = detail::open_out(dir / "scatter.csv");
        f << "experiment,chain";
        for (const auto& n : names) f << ',' << n;
        f << ",cluster\n";
        for (std::size_t p = 0; p < pts.size(); ++p) {
            f << a.config.id << ',' << idx[p];
            for (double v : pts[p]) f << ',' << v;
            f << ',' << labels[p] + 1 << '\n';
        }
    }
    {
        auto f = detail::open_out(dir / "projections.csv");
        f << "t,y_obs,y_true";
        for (std::size_t k = 0; k < a.verdict.clusters.size(); ++k)
            f << ",in_model_c" << k + 1 << ",high_accuracy_c" << k + 1;
        f << '\n';
        for (std::size_t j = 0; j < a.reference.size(); ++j) {
            f << a.reference.times[j] << ',' << a.reference.y_obs[j] << ',' << a.reference.y_true[j];
            for (const auto& h : a.verdict.clusters) {
                f << ',' << (j < h.in_model.size() ? h.in_model[j] : std::nan(""));
                f << ',' << (j < h.high_accuracy.size() ? h.high_accuracy[j] : std::nan(""));
            }
            f << '\n';
        }
    }
    for (std::size_t k = 0; k < a.verdict.clusters.size(); ++k) {
        auto f = detail::open_out(dir / ("trace_cluster" + std::to_string(k + 1) + ".tsv"));
        write_trace_table(f, a.verdict.clusters[k].traces);
    }
    if (a.config.model == ModelKind::Affine && a.config.fit.integrator.method == Method::RK4Fixed) {
        DefectSpec spec;
        predicted_roots(a.config, &spec);
        auto f = detail::open_out(dir / "defect_curve.tsv");
        write_defect_curve(f, defect_curve(spec));
    }
}

/// Writes the experiment directory: config.json, series.csv (base dataset),
/// chains.csv, timing.csv, mixture.csv, mixture.json, verdict.json and plots/.
inline void write_artifacts(const ExperimentArtifacts& a, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    {
        auto f = detail::open_out(dir / "config.json");
        f << to_json_value(a.config).dump(2) << '\n';
    }
    save_series((dir / "series.csv").string(), a.reference);
    {
        auto f = detail::open_out(dir / "chains.csv");
        write_chains_csv(f, a.config.model, a.chains);
    }
    {
        // Wall times live apart from the chain table so that table stays byte-identical across runs.
        auto f = detail::open_out(dir / "timing.csv");
        f << "chain,wall_time_ms\n";
        for (std::size_t i = 0; i < a.chains.size(); ++i) f << i << ',' << a.chains[i].wall_time_ms << '\n';
    }
    {
        auto f = detail::open_out(dir / "mixture.csv");
        write_mode_report_csv(f, a.verdict.report);
    }
    {
        auto f = detail::open_out(dir / "mixture.json");
        f << to_json_value(a.verdict.report).dump(2) << '\n';
    }
    {
        auto f = detail::open_out(dir / "verdict.json");
        f << to_json_value(a.verdict).dump(2) << '\n';
    }
    emit_plot_data(a, dir / "plots");
}

/// Full workflow. Writes artifacts when cfg.output_dir is set.
inline ExperimentArtifacts run_experiment(const ExperimentConfig& cfg)
{
    validate(cfg);
    ExperimentArtifacts a;
    a.config = cfg;
    const auto data = experiment_datasets(cfg);
    a.reference = cfg.dataset_mode == DatasetMode::Shared ? data.front() : base_dataset(cfg);
    a.chains = run_chains(cfg, data);
    a.verdict = audit(cfg, a.chains, a.reference, &a.mixture);
    if (!cfg.output_dir.empty()) write_artifacts(a, cfg.output_dir);
    return a;
}

/// Rebuilds artifacts from an experiment directory (config.json and chains.csv).
inline ExperimentArtifacts load_artifacts(const std::filesystem::path& dir)
{
    ExperimentArtifacts a;
    a.config = load_experiment((dir / "config.json").string());
    a.reference = load_series((dir / "series.csv").string());
    std::ifstream f(dir / "chains.csv");
    if (!f) throw std::runtime_error("cannot read " + (dir / "chains.csv").string());
    a.chains = read_chains_csv(f, a.config.model);
    a.verdict = audit(a.config, a.chains, a.reference, &a.mixture);
    return a;
}

}  // namespace rkmodes
