#include <catch_amalgamated.hpp>

#include <algorithm>
#include <sstream>

#include <rkmodes/mixture.hpp>

using namespace rkmodes;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

std::vector<std::vector<double>> blob(double mx, double my, double sx, double sy, int n, std::uint64_t seed)
{
    CounterRng rng(seed, 1);
    std::vector<std::vector<double>> out;
    for (int i = 0; i < n; ++i) out.push_back({mx + sx * rng.normal(), my + sy * rng.normal()});
    return out;
}

std::vector<std::vector<double>> concat(std::vector<std::vector<double>> a, const std::vector<std::vector<double>>& b)
{
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

}  // namespace

TEST_CASE("split initialisation at the first-coordinate mean", "[test_mixture]")
{
    const Mat x = to_matrix({{1.0, 0.0}, {2.0, 0.0}, {10.0, 1.0}, {11.0, 1.0}});
    const auto s = split_init(x);
    CHECK(s.labels == std::vector<int>{0, 0, 1, 1});
    CHECK(!s.degenerate);
    CHECK_THAT(s.mean1(0), WithinAbs(1.5, 1e-15));
    CHECK_THAT(s.mean2(0), WithinAbs(10.5, 1e-15));

    const std::vector<std::vector<double>> same(6, {3.0, 1.0});
    CHECK(split_init(to_matrix(same)).degenerate);
    const auto fit = fit_em(same);
    CHECK(fit.single_cluster);
    CHECK(fit.degenerate);
    CHECK(!is_multimodal(fit));
}

TEST_CASE("well separated blobs are found", "[test_mixture]")
{
    const auto pts = concat(blob(10.0, 1.0, 0.3, 0.02, 140, 1), blob(50.0, 5.0, 0.5, 0.05, 60, 2));
    const auto fit = fit_em(pts);
    REQUIRE(fit.components.size() == 2);
    CHECK(!fit.degenerate);
    CHECK(is_multimodal(fit));
    CHECK_THAT(fit.components[0].mean(0), WithinAbs(10.0, 0.1));
    CHECK_THAT(fit.components[1].mean(0), WithinAbs(50.0, 0.2));
    CHECK_THAT(fit.components[0].weight, WithinAbs(0.7, 1e-9));
    CHECK_THAT(fit.components[0].weight + fit.components[1].weight, WithinAbs(1.0, 1e-12));
    CHECK(mean_separation(fit) > 5.0 * pooled_sd_along_separation(fit));
}

TEST_CASE("weights of overlapping blobs are recovered", "[test_mixture]")
{
    const auto pts = concat(blob(0.0, 0.0, 1.0, 1.0, 1400, 3), blob(4.0, 0.0, 1.0, 1.0, 600, 4));
    const auto fit = fit_em(pts);
    REQUIRE(fit.components.size() == 2);
    CHECK_THAT(fit.components[0].weight, WithinAbs(0.7, 0.05));
    CHECK_THAT(fit.components[1].mean(0), WithinAbs(4.0, 0.3));
    CHECK(!is_multimodal(fit));
}

TEST_CASE("EM log-likelihood never decreases", "[test_mixture]")
{
    const auto pts = concat(blob(0.0, 0.0, 1.0, 2.0, 300, 5), blob(3.0, 1.0, 1.5, 0.5, 200, 6));
    const auto fit = fit_em(pts);
    REQUIRE(fit.trace.size() >= 2);
    for (std::size_t i = 1; i < fit.trace.size(); ++i) CHECK(fit.trace[i] >= fit.trace[i - 1] - 1e-9);
    CHECK(fit.iterations <= 500);
}

TEST_CASE("fit does not depend on point order", "[test_mixture]")
{
    auto pts = concat(blob(10.0, 1.0, 0.3, 0.02, 120, 7), blob(50.0, 5.0, 0.5, 0.05, 80, 8));
    const auto a = fit_em(pts);
    std::reverse(pts.begin(), pts.end());
    std::rotate(pts.begin(), pts.begin() + 37, pts.end());
    const auto b = fit_em(pts);
    REQUIRE(a.components.size() == 2);
    REQUIRE(b.components.size() == 2);
    for (int k = 0; k < 2; ++k) {
        CHECK_THAT(a.components[k].weight, WithinAbs(b.components[k].weight, 1e-8));
        CHECK((a.components[k].mean - b.components[k].mean).norm() < 1e-8);
    }
}

TEST_CASE("weighted component means reproduce the grand mean", "[test_mixture]")
{
    const auto pts = concat(blob(0.0, 0.0, 1.0, 1.0, 250, 9), blob(4.0, 2.0, 1.0, 1.0, 250, 10));
    const auto fit = fit_em(pts);
    const Mat x = to_matrix(pts);
    const Vec grand = x.colwise().mean();
    Vec mix = Vec::Zero(2);
    for (const auto& c : fit.components) mix += c.weight * c.mean;
    CHECK((mix - grand).norm() < 1e-6);
}

TEST_CASE("a single blob is not called multimodal", "[test_mixture]")
{
    for (std::uint64_t seed = 20; seed < 30; ++seed) {
        const auto pts = blob(10.0, 1.0, 0.3, 0.02, 200, seed);
        const auto fit = fit_em(pts);
        CHECK(!is_multimodal(fit));
        if (!fit.degenerate && fit.components.size() == 2)
            CHECK(mean_separation(fit) < 5.0 * pooled_sd_along_separation(fit));
    }
}

TEST_CASE("point masses are degenerate", "[test_mixture]")
{
    // Two exact points, as from a deterministic optimiser hitting two modes.
    std::vector<std::vector<double>> pts(30, {10.0, 1.0});
    for (int i = 0; i < 20; ++i) pts.push_back({49.3, 4.91});
    const auto fit = fit_em(pts);
    CHECK(fit.degenerate);
    CHECK(!is_multimodal(fit));
}

TEST_CASE("prior density conventions", "[test_mixture]")
{
    Vec theta(2);
    theta << 1.43, std::exp(-0.00904);
    const PriorSpec good_centre{normal_prior(1.43, 2.0), lognormal_prior(-0.00904, 2.0)};
    const auto d = prior_density_at(good_centre, theta);
    CHECK_THAT(d.joint_sampling, WithinRel(0.03979, 1e-3));
    CHECK_THAT(d.first_only, WithinRel(0.19947, 1e-4));
    CHECK_THAT(d.joint_natural, WithinRel(d.joint_sampling / theta(1), 1e-12));

    // Sampling-scale centres as tabulated for the wide and midpoint priors.
    Vec good(2), bad(2);
    good << 1.43, 0.9917;
    bad << 7.09, 4.917;
    const PriorSpec wide{normal_prior(1.0, 10.0), lognormal_prior(0.0, 10.0)};
    const auto dg = prior_density_at(wide, good);
    const auto db = prior_density_at(wide, bad);
    CHECK_THAT(dg.joint_sampling, WithinRel(1.590e-3, 2e-3));
    CHECK_THAT(db.joint_sampling, WithinRel(1.306e-3, 2e-3));
    CHECK(dg.joint_sampling / db.joint_sampling < 1.3);

    const PriorSpec mid{normal_prior(4.26, 2.0), lognormal_prior(1.09, 2.0)};
    const auto mg = prior_density_at(mid, good);
    const auto mb = prior_density_at(mid, bad);
    CHECK_THAT(mg.joint_sampling, WithinRel(0.0126, 0.01));
    CHECK(std::max(mg.joint_sampling, mb.joint_sampling) / std::min(mg.joint_sampling, mb.joint_sampling) < 1.3);

    Vec est(2);
    est << 9.957, 0.9917;
    CHECK_THAT(estimate_to_theta(ModelKind::Affine, est, 8.57)(0), WithinAbs(9.957 - 0.9917 * 8.57, 1e-12));
}

TEST_CASE("mode report matches components to defect roots", "[test_mixture]")
{
    const auto pts = concat(blob(9.96, 0.992, 0.3, 0.02, 140, 11), blob(49.2, 4.91, 0.5, 0.05, 60, 12));
    const auto fit = fit_em(pts);
    const DefectSpec spec{0.5, 1.0, 10.0};
    const auto roots = find_roots(spec);
    const auto rep = mode_report(fit, roots, spec, default_priors(ModelKind::Affine), ModelKind::Affine, 8.56);
    REQUIRE(rep.components.size() == 2);
    CHECK_THAT(rep.components[0].nearest_root, WithinAbs(roots.roots[0], 1e-12));
    CHECK_THAT(rep.components[1].nearest_root, WithinAbs(roots.roots[1], 1e-12));
    CHECK(rep.components[1].root_relative_error < 0.01);
    std::ostringstream csv;
    write_mode_report_csv(csv, rep);
    CHECK(csv.str().rfind("component,", 0) == 0);
    const auto j = to_json_value(rep);
    CHECK(j["components"].size() == 2);
}
