#include <catch_amalgamated.hpp>

#include <cstdio>
#include <set>

#include <sys/wait.h>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <rkmodes/audit.hpp>

using namespace rkmodes;
namespace fs = std::filesystem;

namespace {

ExperimentConfig small_experiment()
{
    auto c = default_experiment(ModelKind::Affine);
    c.id = "unit_rk4_h0.5";
    c.noise.seed = 7;
    c.n_chains = 60;
    c.master_seed = 3;
    c.fit.sampler.warmup = 1000;
    c.fit.sampler.samples = 1000;
    return c;
}

fs::path scratch_dir(const std::string& name)
{
    const auto p = fs::temp_directory_path() / ("rkmodes_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p)
{
    std::ifstream f(p);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::string first_line(const fs::path& p)
{
    std::ifstream f(p);
    std::string line;
    std::getline(f, line);
    return line;
}

struct Command {
    int status = -1;
    std::string output;
};

Command run(const std::string& args)
{
    Command c;
    const std::string cmd = std::string(RKMODES_CLI_PATH) + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    char buf[4096];
    while (std::fgets(buf, sizeof buf, pipe)) c.output += buf;
    const int raw = pclose(pipe);
    c.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    return c;
}

}  // namespace

TEST_CASE("experiment config JSON round trip", "[test_audit]")
{
    auto c = small_experiment();
    c.fit.priors = {normal_prior(4.26, 2.0), lognormal_prior(1.09, 2.0)};
    c.method = FitMethod::Lbfgs;
    const auto back = experiment_from_json(to_json_value(c));
    CHECK(to_json_value(back) == to_json_value(c));
    CHECK(back.fit.priors[1].location == 1.09);
    CHECK(back.method == FitMethod::Lbfgs);

    const auto canham = experiment_from_json(nlohmann::json::parse(R"({"model":"canham","id":"c"})"));
    CHECK(canham.design.dt == 5.0);
    CHECK(canham.fit.integrator.method == Method::RK45Adaptive);
    CHECK(canham.reprojection().rel_tol <= 1e-9);

    CHECK_THROWS(experiment_from_json(nlohmann::json::parse(R"({"fit":{"integrator":{"method":"rk4","h":0.3}}})")));
    CHECK_THROWS(experiment_from_json(
        nlohmann::json::parse(R"({"reproject_integrator":{"method":"rk45","tol":1e-6}})")));
    CHECK_THROWS(experiment_from_json(nlohmann::json::parse(R"({"fit":{"init":"random"}})")));
}

TEST_CASE("chain seeds are distinct and reproducible", "[test_audit]")
{
    auto a = small_experiment();
    auto b = a;
    b.master_seed = 4;
    std::set<std::uint64_t> seen;
    for (int i = 0; i < 1000; ++i) {
        seen.insert(a.chain_seed(i));
        seen.insert(b.chain_seed(i));
    }
    CHECK(seen.size() == 2000);
    CHECK(a.chain_seed(17) == small_experiment().chain_seed(17));
}

TEST_CASE("per-chain datasets share the truth", "[test_audit]")
{
    auto c = small_experiment();
    c.dataset_mode = DatasetMode::PerChain;
    c.n_chains = 5;
    const auto data = experiment_datasets(c);
    REQUIRE(data.size() == 5);
    CHECK(data[0].y_true == data[1].y_true);
    CHECK(data[0].y_obs != data[1].y_obs);
}

TEST_CASE("chain table round trip and byte-identical reruns", "[test_audit]")
{
    auto c = small_experiment();
    c.n_chains = 12;
    c.workers = 4;
    const auto data = experiment_datasets(c);
    const auto first = run_chains(c, data);
    c.workers = 1;
    const auto second = run_chains(c, data);
    std::ostringstream a, b;
    write_chains_csv(a, c.model, first);
    write_chains_csv(b, c.model, second);
    CHECK(a.str() == b.str());
    CHECK(a.str().rfind("chain,seed,status,converged,beta0,beta1,theta_beta_c,theta_beta1", 0) == 0);

    std::istringstream in(a.str());
    const auto back = read_chains_csv(in, c.model);
    REQUIRE(back.size() == first.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].seed == first[i].seed);
        CHECK(back[i].status == first[i].status);
        CHECK(back[i].estimate == first[i].estimate);
    }
}

TEST_CASE("re-projection exposes the spurious cluster", "[test_audit]")
{
    const auto s = simulate_affine({10.0, 1.0}, {}, {0.1, 0.1, 7});
    const auto bad = reproject_cluster(ModelKind::Affine, {49.26, 4.913}, s, StepConfig::rk4(0.5), StepConfig::analytic());
    CHECK(!bad.unstable);
    CHECK(bad.in_model_rmse < 0.2);
    CHECK(bad.high_accuracy_rmse > 1.0);
    CHECK(bad.high_accuracy_error[1] > 1.0);
    CHECK(bad.negative_substeps_first_step >= 1);
    CHECK(bad.max_overshoot > 1.0);
    REQUIRE(bad.traces.size() == 18);
    CHECK(bad.traces.front().stages.size() == 4);

    const auto good = reproject_cluster(ModelKind::Affine, {9.956, 0.9917}, s, StepConfig::rk4(0.5), StepConfig::analytic());
    CHECK(good.negative_substeps == 0);
    CHECK(good.gap_max < 0.05);
    CHECK(good.in_model_rmse < 0.2);
    CHECK(good.high_accuracy_rmse < 0.2);

    CHECK_THROWS(reproject_cluster(ModelKind::Affine, {49.26, 4.913}, s, StepConfig::rk4(0.5), StepConfig::rk4(0.01)));
}

TEST_CASE("re-projection flags a Canham start outside the domain", "[test_audit]")
{
    ObservationSeries s;
    s.times = {0.0, 5.0, 10.0};
    s.y_obs = {0.0, 2.0, 4.0};
    s.y_true = {std::nan(""), std::nan(""), std::nan("")};
    s.y_bar = 2.0;
    const auto h = reproject_cluster(ModelKind::Canham, {0.8, 8.0, 1.0}, s, StepConfig::rk45(), StepConfig::rk45(1e-10));
    CHECK(h.unstable);
    CHECK(!h.message.empty());
}

TEST_CASE("audit of a small RK4 experiment", "[test_audit]")
{
    auto c = small_experiment();
    const auto dir = scratch_dir("audit");
    c.output_dir = dir.string();
    const auto a = run_experiment(c);
    CHECK(a.verdict.multimodal);
    REQUIRE(a.verdict.theory.size() == 2);
    CHECK(a.verdict.theory[1].within_one_percent);
    for (const char* f : {"config.json", "series.csv", "chains.csv", "timing.csv", "mixture.csv", "mixture.json",
                          "verdict.json", "plots/scatter.csv", "plots/projections.csv", "plots/trace_cluster1.tsv",
                          "plots/trace_cluster2.tsv", "plots/defect_curve.tsv"})
        CHECK(fs::exists(dir / f));
    CHECK(first_line(dir / "plots/scatter.csv") == "experiment,chain,beta0,beta1,cluster");
    CHECK(first_line(dir / "plots/projections.csv").rfind("t,y_obs,y_true,in_model_c1,high_accuracy_c1", 0) == 0);
    CHECK(first_line(dir / "timing.csv") == "chain,wall_time_ms");
    const auto verdict = nlohmann::json::parse(slurp(dir / "verdict.json"));
    CHECK(verdict["multimodal"] == true);

    // Reloading the directory reproduces the verdict.
    const auto back = load_artifacts(dir);
    CHECK(back.verdict.multimodal);
    CHECK(back.verdict.report.components[0].weight == a.verdict.report.components[0].weight);

    const auto rerun_dir = scratch_dir("audit_rerun");
    c.output_dir = rerun_dir.string();
    c.workers = 1;
    run_experiment(c);
    CHECK(slurp(dir / "chains.csv") == slurp(rerun_dir / "chains.csv"));
    CHECK(slurp(dir / "verdict.json") == slurp(rerun_dir / "verdict.json"));
}

TEST_CASE("command line: roots", "[test_audit]")
{
    const auto r = run("roots --h 0.5 --beta1 1 --alpha 10");
    CHECK(r.status == 0);
    CHECK(r.output.find("root\tbeta1_hat\tbeta0_hat\tresidual") != std::string::npos);
    CHECK(r.output.find("1.000795221") != std::string::npos);
    CHECK(r.output.find("4.911173912") != std::string::npos);
    const auto j = run("roots --h 0.25 --json");
    REQUIRE(j.status == 0);
    const auto parsed = nlohmann::json::parse(j.output);
    CHECK(parsed["roots"].size() == 2);
    CHECK(std::abs(parsed["roots"][1]["beta1_hat"].get<double>() - 10.482437641537355) < 1e-9);
    CHECK(run("roots --h -1").status == 2);
    CHECK(run("no-such-command").status != 0);
}

TEST_CASE("command line: simulate, fit, reproject and audit", "[test_audit]")
{
    const auto dir = scratch_dir("cli");
    const auto series = (dir / "series.csv").string();
    REQUIRE(run("simulate --seed 7 -o " + series).status == 0);
    const auto s = load_series(series);
    CHECK(s.y_obs == simulate_affine({10.0, 1.0}, {}, {0.1, 0.1, 7}).y_obs);

    const auto chains = (dir / "chains.csv").string();
    REQUIRE(run("fit --series " + series + " --chains 2 --warmup 300 --samples 300 -o " + chains).status == 0);
    std::ifstream cf(chains);
    CHECK(read_chains_csv(cf, ModelKind::Affine).size() == 2);

    const auto rp = run("reproject --series " + series + " --params 49.26,4.913 --integrator rk4 --h 0.5");
    REQUIRE(rp.status == 0);
    const auto health = nlohmann::json::parse(rp.output);
    CHECK(health["negative_substeps_first_step"].get<int>() >= 1);

    auto c = small_experiment();
    const auto cfg_path = dir / "experiment.json";
    std::ofstream(cfg_path) << to_json_value(c).dump(2);
    const auto out = dir / "out";
    const auto audit = run("audit --config " + cfg_path.string() + " -o " + out.string());
    CHECK(audit.status == 1);
    CHECK(audit.output.find("multimodal: yes") != std::string::npos);
    CHECK(fs::exists(out / "verdict.json"));

    const auto plots = dir / "plots";
    CHECK(run("emit-plots " + out.string() + " -o " + plots.string()).status == 0);
    CHECK(fs::exists(plots / "scatter.csv"));
    CHECK(run("audit --config " + (dir / "missing.json").string()).status == 2);
}
