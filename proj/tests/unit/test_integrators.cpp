#include <catch_amalgamated.hpp>

#include <sstream>

#include <rkmodes/identifiability.hpp>
#include <rkmodes/integrators.hpp>

using namespace rkmodes;
using Catch::Matchers::WithinAbs;

namespace {

double rk4_oracle(const OdeModel& m, double y, double t_end, double h)
{
    // Plain textbook loop, independent of the library's step machinery.
    const int n = static_cast<int>(std::lround(t_end / h));
    for (int i = 0; i < n; ++i) {
        const double k1 = m.gradient(y);
        const double k2 = m.gradient(y + 0.5 * h * k1);
        const double k3 = m.gradient(y + 0.5 * h * k2);
        const double k4 = m.gradient(y + h * k3);
        y += h * (k1 + 2 * k2 + 2 * k3 + k4) / 6;
    }
    return y;
}

}  // namespace

TEST_CASE("single RK4 step error equals the truncation residual", "[test_integrators]")
{
    const OdeModel m{AffineParams{10.0, 1.0}};
    const auto [y1, tr] = rk4_step(m, 1.0, 0.5);
    const double exact = analytic_affine({10.0, 1.0}, 1.0, 0.5);
    const double bound = 9.0 * std::abs(truncation_residual(0.5, 1.0));
    CHECK(std::abs(y1 - exact) <= bound * (1 + 1e-9));
    CHECK(std::abs(y1 - exact) >= bound * (1 - 1e-6));
    REQUIRE(tr.stages.size() == 4);
    CHECK(tr.stages[0].state == 1.0);
    CHECK(tr.stages[0].gradient == 9.0);
}

TEST_CASE("bad-mode parameters drive a sub-step state negative", "[test_integrators]")
{
    const OdeModel m{AffineParams{49.3, 4.91}};
    const auto [y1, tr] = rk4_step(m, 1.0, 0.5);
    REQUIRE(tr.stages.size() == 4);
    CHECK_THAT(tr.stages[0].gradient, WithinAbs(44.39, 1e-12));
    CHECK_THAT(tr.stages[1].gradient, WithinAbs(-10.1, 0.01));
    CHECK_THAT(tr.stages[2].state, WithinAbs(-1.52, 0.01));
    CHECK(tr.stages[2].state < 0.0);
}

TEST_CASE("fixed point and trace re-summation", "[test_integrators]")
{
    const OdeModel m{AffineParams{10.0, 1.0}};
    CHECK(rk4_step(m, 10.0, 0.5).first == 10.0);

    const OdeModel c{CanhamParams{0.8, 8.0, 1.0}};
    const auto r = integrate_interval(c, 1.0, 0.0, 5.0, StepConfig::rk4(0.125));
    REQUIRE(r.traces.size() == 40);
    for (const auto& tr : r.traces) CHECK(resum(tr) == tr.y_end);
    for (std::size_t i = 1; i < r.traces.size(); ++i) CHECK(r.traces[i].y_start == r.traces[i - 1].y_end);
    CHECK(r.traces.back().y_end == r.y1);
}

TEST_CASE("interval integration chains RK4 steps", "[test_integrators]")
{
    const OdeModel m{AffineParams{10.0, 1.0}};
    const auto r = integrate_interval(m, 1.0, 0.0, 1.0, StepConfig::rk4(0.5));
    const double first = rk4_step(m, 1.0, 0.5).first;
    CHECK(r.y1 == rk4_step(m, first, 0.5).first);
    CHECK(r.traces.size() == 2);
    CHECK(r.y1 == rk4_oracle(m, 1.0, 1.0, 0.5));
    CHECK_THROWS_AS(integrate_interval(m, 1.0, 0.0, 1.0, StepConfig::rk4(0.3)), std::invalid_argument);
    CHECK_THROWS_AS(integrate_interval(m, 1.0, 1.0, 1.0, StepConfig::rk4(0.5)), std::invalid_argument);
}

TEST_CASE("analytic backend", "[test_integrators]")
{
    const OdeModel m{AffineParams{10.0, 1.0}};
    CHECK_THAT(integrate_interval(m, 1.0, 0.0, 4.0, StepConfig::analytic()).y1,
               WithinAbs(9.8351592500013923774, 1e-13));
    const OdeModel c{CanhamParams{0.8, 8.0, 1.0}};
    CHECK_THROWS_AS(integrate_interval(c, 1.0, 0.0, 4.0, StepConfig::analytic()), std::invalid_argument);
}

TEST_CASE("RK4 global error is fourth order", "[test_integrators]")
{
    const OdeModel m{AffineParams{10.0, 1.0}};
    const double exact = analytic_affine({10.0, 1.0}, 1.0, 1.0);
    auto err = [&](double h) { return std::abs(integrate_interval(m, 1.0, 0.0, 1.0, StepConfig::rk4(h)).y1 - exact); };
    const double e1 = err(0.5), e2 = err(0.25), e3 = err(0.125);
    CHECK(e1 / e2 >= 12.0);
    CHECK(e1 / e2 <= 20.0);
    CHECK(e2 / e3 >= 12.0);
    CHECK(e2 / e3 <= 20.0);
}

TEST_CASE("RK45 on a zero-gradient system takes one step", "[test_integrators]")
{
    const OdeModel m{AffineParams{10.0, 1.0}};
    const auto r = rk45_step_controller(m, 10.0, 0.0, 1.0, StepConfig::rk45());
    CHECK(r.traces.size() == 1);
    CHECK(r.rejected == 0);
    CHECK(r.traces[0].error_estimate == 0.0);
    CHECK(r.y1 == 10.0);
}

TEST_CASE("RK45 tracks the exact solution for both defect-root parameter sets", "[test_integrators]")
{
    const auto cfg = StepConfig::rk45(1e-6);
    const double good = integrate_interval(OdeModel{AffineParams{10.0, 1.0}}, 1.0, 0.0, 1.0, cfg).y1;
    CHECK(std::abs(good - analytic_affine({10.0, 1.0}, 1.0, 1.0)) <= 1e-5);
    const double bad = integrate_interval(OdeModel{AffineParams{49.3, 4.91}}, 1.0, 0.0, 1.0, cfg).y1;
    CHECK(std::abs(bad - analytic_affine({49.3, 4.91}, 1.0, 1.0)) <= 1e-5);
    // No degenerate match to the true trajectory.
    CHECK(std::abs(bad - analytic_affine({10.0, 1.0}, 1.0, 1.0)) > 1.0);
}

TEST_CASE("RK45 accepted steps respect the tolerance", "[test_integrators]")
{
    const OdeModel c{CanhamParams{0.8, 8.0, 1.0}};
    const auto r = integrate_interval(c, 1.0, 0.0, 50.0, StepConfig::rk45(1e-8));
    REQUIRE(!r.traces.empty());
    for (const auto& tr : r.traces) {
        CHECK(tr.error_estimate <= 1.0);
        CHECK(tr.stages.size() == 7);
    }
}

TEST_CASE("RK45 on Canham matches a fine RK4 oracle", "[test_integrators]")
{
    const OdeModel c{CanhamParams{0.8, 8.0, 1.0}};
    const double oracle = rk4_oracle(c, 1.0, 50.0, 1e-4);
    const double y = integrate_interval(c, 1.0, 0.0, 50.0, StepConfig::rk45(1e-8)).y1;
    CHECK(std::abs(y - oracle) <= 1e-6);
}

TEST_CASE("analytic and tight RK45 agree on the true parameters", "[test_integrators]")
{
    const OdeModel m{AffineParams{10.0, 1.0}};
    double y_rk = 1.0;
    for (int t = 0; t < 10; ++t) {
        y_rk = integrate_interval(m, y_rk, t, t + 1.0, StepConfig::rk45(1e-10)).y1;
        CHECK(std::abs(y_rk - analytic_affine({10.0, 1.0}, 1.0, t + 1.0)) <= 1e-8);
    }
}

TEST_CASE("Canham domain errors carry the partial trace", "[test_integrators]")
{
    const OdeModel c{CanhamParams{0.8, 8.0, 1.0}};
    try {
        integrate_interval(c, -0.5, 0.0, 1.0, StepConfig::rk4(0.5));
        FAIL("expected a domain error");
    } catch (const IntegrationDomainError& e) {
        REQUIRE(e.partial_trace().size() == 1);
        const auto& stages = e.partial_trace()[0].stages;
        REQUIRE(stages.size() == 1);
        CHECK(stages[0].state == -0.5);
        CHECK(std::isnan(stages[0].gradient));
    }
    CHECK_THROWS_AS(integrate_interval(c, -0.5, 0.0, 1.0, StepConfig::rk45()), IntegrationDomainError);
}

TEST_CASE("step configuration validation", "[test_integrators]")
{
    CHECK(rk4_step_count(1.0, 0.125) == 8);
    CHECK_THROWS_AS(rk4_step_count(1.0, 0.3), std::invalid_argument);
    CHECK_THROWS_AS(rk4_step_count(1.0, 0.0), std::invalid_argument);
    CHECK(method_from_string("rk45") == Method::RK45Adaptive);
    CHECK_THROWS(method_from_string("euler"));
}

TEST_CASE("trace table layout", "[test_integrators]")
{
    const OdeModel m{AffineParams{10.0, 1.0}};
    const auto r = integrate_interval(m, 1.0, 0.0, 1.0, StepConfig::rk4(0.5));
    std::ostringstream os;
    write_trace_table(os, r.traces);
    std::istringstream is(os.str());
    std::string line;
    std::getline(is, line);
    CHECK(line == "step\tsubstep\tt\tstate\tgradient");
    int rows = 0;
    while (std::getline(is, line)) ++rows;
    CHECK(rows == 2 * 5);
}
