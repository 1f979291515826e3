// Command-line front end: simulate, roots, fit, audit, reproject, emit-plots.
// Exit status: 0 on success, 1 when an audit finds multiple modes, 2 on error.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <rkmodes/rkmodes.hpp>

namespace {

using namespace rkmodes;

struct IntegratorOpts {
    std::string method = "rk4";
    double h = 0.5;
    double tol = 1e-6;

    void add(CLI::App* app, const std::string& prefix = "")
    {
        app->add_option("--" + prefix + "integrator", method, "rk4, rk45 or analytic")->capture_default_str();
        app->add_option("--" + prefix + "h", h, "RK4 step size")->capture_default_str();
        app->add_option("--" + prefix + "tol", tol, "RK45 absolute and relative tolerance")->capture_default_str();
    }

    [[nodiscard]] StepConfig build() const
    {
        StepConfig c;
        c.method = method_from_string(method);
        c.h = h;
        c.rel_tol = c.abs_tol = tol;
        validate(c);
        return c;
    }
};

std::vector<double> parse_list(const std::string& s)
{
    std::vector<double> out;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(std::stod(cell));
    return out;
}

struct SimulateOpts {
    std::string model = "affine";
    double beta0 = 10.0, beta1 = 1.0;
    double g_max = 0.8, y_max = 8.0, k = 1.0;
    int n_obs = 10;
    double t0 = 0.0;
    double dt = -1.0;  // model default when negative
    double y0 = 1.0;
    double sd = 0.1, precision = 0.1;
    std::uint64_t seed = 1, stream = 0;
    double truth_h = 1e-4;
    std::string out;
};

int cmd_simulate(const SimulateOpts& o)
{
    const auto kind = model_kind_from_string(o.model);
    SurveyDesign design{o.n_obs, o.t0, o.dt > 0 ? o.dt : (kind == ModelKind::Affine ? 1.0 : 5.0), o.y0};
    NoiseSpec noise{o.sd, o.precision, o.seed};
    const auto s = kind == ModelKind::Affine
                       ? simulate_affine({o.beta0, o.beta1}, design, noise, o.stream)
                       : simulate_canham({o.g_max, o.y_max, o.k}, design, noise, StepConfig::rk4(o.truth_h), o.stream);
    if (o.out.empty()) {
        write_series_csv(std::cout, s);
    } else {
        save_series(o.out, s);
        std::cerr << "wrote " << s.size() << " observations to " << o.out << " (y_bar " << s.y_bar << ")\n";
    }
    return 0;
}

struct RootsOpts {
    double h = 0.5, beta1 = 1.0, alpha = 10.0;
    std::string curve;
    int points = 401;
    bool json = false;
};

int cmd_roots(const RootsOpts& o)
{
    const DefectSpec spec{o.h, o.beta1, o.alpha};
    const auto roots = find_roots(spec);
    const double resid = truncation_residual(o.h, o.beta1);
    if (o.json) {
        nlohmann::json j;
        j["h"] = o.h;
        j["beta1"] = o.beta1;
        j["alpha"] = o.alpha;
        j["roots"] = nlohmann::json::array();
        for (std::size_t i = 0; i < roots.roots.size(); ++i) {
            const auto m = implied_mode(spec, roots.roots[i]);
            j["roots"].push_back({{"beta1_hat", roots.roots[i]},
                                  {"residual", roots.residuals[i]},
                                  {"beta0_hat", m.beta0}});
        }
        j["truncation_residual"] = resid;
        j["multiplicity4_root"] = multiplicity4_root(o.h);
        std::cout << j.dump(2) << '\n';
    } else {
        std::cout.precision(10);
        std::cout << "root\tbeta1_hat\tbeta0_hat\tresidual\n";
        for (std::size_t i = 0; i < roots.roots.size(); ++i) {
            const auto m = implied_mode(spec, roots.roots[i]);
            std::cout << i + 1 << '\t' << roots.roots[i] << '\t' << m.beta0 << '\t' << roots.residuals[i] << '\n';
        }
        std::cout << "truncation_residual\t" << resid << '\n';
        std::cout << "multiplicity4_root\t" << multiplicity4_root(o.h) << '\n';
        if (roots.empty()) std::cout << "warning: no real roots; the step is too coarse for this rate\n";
    }
    if (!o.curve.empty()) {
        std::ofstream f(o.curve);
        if (!f) throw std::runtime_error("cannot write " + o.curve);
        write_defect_curve(f, defect_curve(spec, o.points));
    }
    return 0;
}

struct FitOpts {
    std::string series;
    std::string model = "affine";
    std::string method = "mcmc";
    IntegratorOpts integ;
    int chains = 1;
    std::uint64_t seed = 1;
    int warmup = -1;  // model default when negative
    int samples = 2000;
    std::string init_values;
    int workers = 0;
    std::string out;
};

int cmd_fit(const FitOpts& o)
{
    ExperimentConfig cfg = default_experiment(model_kind_from_string(o.model));
    cfg.method = fit_method_from_string(o.method);
    cfg.fit.integrator = o.integ.build();
    if (o.warmup >= 0) cfg.fit.sampler.warmup = o.warmup;
    cfg.fit.sampler.samples = o.samples;
    if (!o.init_values.empty()) {
        cfg.fit.init = InitRule::Fixed;
        cfg.fit.init_values = parse_list(o.init_values);
    }
    cfg.n_chains = o.chains;
    cfg.master_seed = o.seed;
    cfg.workers = o.workers;
    validate(cfg.fit);
    const auto series = load_series(o.series);
    const auto chains = run_chains(cfg, {series});
    if (o.out.empty()) {
        write_chains_csv(std::cout, cfg.model, chains);
    } else {
        std::ofstream f(o.out);
        if (!f) throw std::runtime_error("cannot write " + o.out);
        write_chains_csv(f, cfg.model, chains);
    }
    return 0;
}

struct AuditOpts {
    std::string config;
    std::string out;
    int chains = 0;
    std::int64_t seed = -1;
    int workers = -1;
};

int cmd_audit(const AuditOpts& o)
{
    auto cfg = load_experiment(o.config);
    if (!o.out.empty()) cfg.output_dir = o.out;
    if (o.chains > 0) cfg.n_chains = o.chains;
    if (o.seed >= 0) cfg.master_seed = static_cast<std::uint64_t>(o.seed);
    if (o.workers >= 0) cfg.workers = o.workers;
    if (cfg.output_dir.empty()) cfg.output_dir = "out/" + cfg.id;
    const auto a = run_experiment(cfg);
    const auto& v = a.verdict;
    std::cout.precision(6);
    std::cout << "experiment " << cfg.id << ": " << v.n_used << "/" << v.n_chains << " chains usable (failure fraction "
              << v.failure_fraction << ")\n";
    for (std::size_t k = 0; k < v.report.components.size(); ++k) {
        const auto& c = v.report.components[k];
        std::cout << "  cluster " << k + 1 << " weight " << c.weight << " mean (";
        for (Eigen::Index i = 0; i < c.mean.size(); ++i) std::cout << (i ? ", " : "") << c.mean(i);
        std::cout << ")";
        if (k < v.clusters.size())
            std::cout << " in-model rmse " << v.clusters[k].in_model_rmse << " high-accuracy rmse "
                      << v.clusters[k].high_accuracy_rmse << " negative sub-steps " << v.clusters[k].negative_substeps;
        std::cout << '\n';
    }
    std::cout << "multimodal: " << (v.multimodal ? "yes" : "no") << "\nartifacts: " << cfg.output_dir << '\n';
    return v.multimodal ? 1 : 0;
}

struct ReprojectOpts {
    std::string series;
    std::string model = "affine";
    std::string params;
    IntegratorOpts integ;
    IntegratorOpts fine{"analytic", 1e-4, 1e-10};
    std::string trace_out;
};

int cmd_reproject(const ReprojectOpts& o)
{
    const auto kind = model_kind_from_string(o.model);
    const auto series = load_series(o.series);
    const auto h = reproject_cluster(kind, parse_list(o.params), series, o.integ.build(), o.fine.build());
    std::cout << to_json_value(h).dump(2) << '\n';
    if (!o.trace_out.empty()) {
        std::ofstream f(o.trace_out);
        if (!f) throw std::runtime_error("cannot write " + o.trace_out);
        write_trace_table(f, h.traces);
    }
    return 0;
}

struct PlotOpts {
    std::vector<std::string> dirs;
    std::string out;
};

int cmd_emit_plots(const PlotOpts& o)
{
    std::vector<ExperimentArtifacts> all;
    for (const auto& d : o.dirs) {
        all.push_back(load_artifacts(d));
        const auto target = o.out.empty() || o.dirs.size() > 1 ? std::filesystem::path(d) / "plots"
                                                                 : std::filesystem::path(o.out);
        emit_plot_data(all.back(), target);
        std::cerr << "plot data for " << d << " in " << target.string() << '\n';
    }
    if (o.dirs.size() > 1 && !o.out.empty()) {
        // Joint scatter over several experiments (e.g. one per step size).
        std::filesystem::create_directories(o.out);
        std::ofstream f(std::filesystem::path(o.out) / "scatter.csv");
        f.precision(17);
        bool header = true;
        for (std::size_t e = 0; e < all.size(); ++e) {
            std::ifstream in(std::filesystem::path(o.dirs[e]) / "plots" / "scatter.csv");
            std::string line;
            std::getline(in, line);
            if (header) f << line << '\n';
            header = false;
            while (std::getline(in, line)) f << line << '\n';
        }
        std::cerr << "joint scatter in " << o.out << "/scatter.csv\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Posterior multimodality from RK4 integration error: simulate, predict, fit and audit"};
    app.require_subcommand(1);
    // "-h" would collide with the step-size option "--h".
    app.set_help_flag("--help", "print help");

    SimulateOpts sim;
    auto* s = app.add_subcommand("simulate", "simulate a noisy, rounded observation series");
    s->add_option("--model", sim.model, "affine or canham")->capture_default_str();
    s->add_option("--beta0", sim.beta0)->capture_default_str();
    s->add_option("--beta1", sim.beta1)->capture_default_str();
    s->add_option("--g-max", sim.g_max)->capture_default_str();
    s->add_option("--y-max", sim.y_max)->capture_default_str();
    s->add_option("--k", sim.k)->capture_default_str();
    s->add_option("--n-obs", sim.n_obs)->capture_default_str();
    s->add_option("--t0", sim.t0)->capture_default_str();
    s->add_option("--dt", sim.dt, "observation gap (default 1 affine, 5 Canham)");
    s->add_option("--y0", sim.y0)->capture_default_str();
    s->add_option("--sd", sim.sd)->capture_default_str();
    s->add_option("--precision", sim.precision)->capture_default_str();
    s->add_option("--seed", sim.seed)->capture_default_str();
    s->add_option("--stream", sim.stream, "noise stream (independent realisations)")->capture_default_str();
    s->add_option("--truth-h", sim.truth_h, "RK4 step for the Canham truth")->capture_default_str();
    s->add_option("-o,--out", sim.out, "output file (stdout if omitted)");

    RootsOpts roots;
    auto* r = app.add_subcommand("roots", "real roots of the RK4 defect equation");
    r->add_option("--h", roots.h)->capture_default_str();
    r->add_option("--beta1", roots.beta1)->capture_default_str();
    r->add_option("--alpha", roots.alpha)->capture_default_str();
    r->add_option("--curve", roots.curve, "write defect-curve samples to this file");
    r->add_option("--points", roots.points, "defect-curve sample count")->capture_default_str();
    r->add_flag("--json", roots.json, "structured output");

    FitOpts fit;
    auto* f = app.add_subcommand("fit", "fit one series with independent chains");
    f->add_option("--series", fit.series, "series file (t,y_obs[,y_true])")->required();
    f->add_option("--model", fit.model)->capture_default_str();
    f->add_option("--method", fit.method, "mcmc or lbfgs")->capture_default_str();
    fit.integ.add(f);
    f->add_option("--chains", fit.chains)->capture_default_str();
    f->add_option("--seed", fit.seed, "master seed")->capture_default_str();
    f->add_option("--warmup", fit.warmup, "default 2000 affine, 30000 Canham");
    f->add_option("--samples", fit.samples)->capture_default_str();
    f->add_option("--init-values", fit.init_values, "fixed start on the sampling scale, comma separated");
    f->add_option("--workers", fit.workers, "0 = all cores")->capture_default_str();
    f->add_option("-o,--out", fit.out, "chain table file (stdout if omitted)");

    AuditOpts aud;
    auto* a = app.add_subcommand("audit", "run an experiment config end to end");
    a->add_option("--config", aud.config, "experiment JSON")->required();
    a->add_option("-o,--out", aud.out, "output directory (overrides the config)");
    a->add_option("--chains", aud.chains, "override n_chains");
    a->add_option("--seed", aud.seed, "override master_seed");
    a->add_option("--workers", aud.workers, "override worker count");

    ReprojectOpts rep;
    auto* p = app.add_subcommand("reproject", "numerical-health check at one parameter vector");
    p->add_option("--series", rep.series)->required();
    p->add_option("--model", rep.model)->capture_default_str();
    p->add_option("--params", rep.params, "beta0,beta1 or g_max,y_max,k")->required();
    rep.integ.add(p);
    rep.fine.add(p, "fine-");
    p->add_option("--trace-out", rep.trace_out, "write the in-model sub-step trace here");

    PlotOpts plots;
    auto* e = app.add_subcommand("emit-plots", "regenerate plot data from experiment directories");
    e->add_option("dirs", plots.dirs, "experiment directories")->required();
    e->add_option("-o,--out", plots.out, "output directory (joint scatter when several inputs)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : 2;
    }
    try {
        if (s->parsed()) return cmd_simulate(sim);
        if (r->parsed()) return cmd_roots(roots);
        if (f->parsed()) return cmd_fit(fit);
        if (a->parsed()) return cmd_audit(aud);
        if (p->parsed()) return cmd_reproject(rep);
        if (e->parsed()) return cmd_emit_plots(plots);
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << '\n';
        return 2;
    }
    return 2;
}
