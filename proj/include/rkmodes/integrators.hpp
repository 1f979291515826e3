#pragma once

// Scalar integrators over one survey interval: fixed-step classical RK4,
// adaptive Dormand-Prince 5(4), and the exact affine jump. Every numerical
// step can be traced down to its sub-step states and gradients.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ode_models.hpp"

namespace rkmodes {

enum class Method { RK4Fixed, RK45Adaptive, AnalyticAffine };

inline std::string to_string(Method m)
{
    switch (m) {
    case Method::RK4Fixed: return "rk4";
    case Method::RK45Adaptive: return "rk45";
    case Method::AnalyticAffine: return "analytic";
    }
    return "?";
}

inline Method method_from_string(const std::string& s)
{
    if (s == "rk4") return Method::RK4Fixed;
    if (s == "rk45") return Method::RK45Adaptive;
    if (s == "analytic") return Method::AnalyticAffine;
    throw std::invalid_argument("unknown integrator '" + s + "' (expected rk4, rk45 or analytic)");
}

struct StepConfig {
    Method method = Method::RK4Fixed;
    double h = 0.5;  ///< fixed step (RK4 only)
    double rel_tol = 1e-6;
    double abs_tol = 1e-6;
    int max_steps = 100000;  ///< attempted steps per interval (RK45)
    double h_min = 1e-12;

    static StepConfig rk4(double h) { return {Method::RK4Fixed, h}; }
    static StepConfig rk45(double tol = 1e-6)
    {
        StepConfig c;
        c.method = Method::RK45Adaptive;
        c.rel_tol = tol;
        c.abs_tol = tol;
        return c;
    }
    static StepConfig analytic()
    {
        StepConfig c;
        c.method = Method::AnalyticAffine;
        return c;
    }
};

/// Throws if the configuration is unusable for an interval of length `gap`.
/// RK4 requires the gap to be an integer multiple of h.
inline int rk4_step_count(double gap, double h)
{
    if (!(h > 0.0)) throw std::invalid_argument("RK4 step size must be positive");
    const double ratio = gap / h;
    const double n = std::round(ratio);
    if (n < 1.0 || std::abs(ratio - n) > 1e-9 * std::max(1.0, ratio))
        throw std::invalid_argument("observation gap " + std::to_string(gap) +
                                    " is not an integer multiple of h = " + std::to_string(h));
    return static_cast<int>(n);
}

inline void validate(const StepConfig& cfg)
{
    if (cfg.method == Method::RK4Fixed && !(cfg.h > 0.0))
        throw std::invalid_argument("RK4 step size must be positive");
    if (cfg.method == Method::RK45Adaptive && !(cfg.rel_tol > 0.0 && cfg.abs_tol > 0.0))
        throw std::invalid_argument("RK45 tolerances must be positive");
    if (cfg.max_steps <= 0) throw std::invalid_argument("max_steps must be positive");
}

struct SubStep {
    double t = 0.0;
    double state = 0.0;     ///< point at which the gradient was evaluated
    double gradient = 0.0;
};

/// One numerical step. For RK4 `stages` holds k1..k4 in order.
struct StepTrace {
    double t_start = 0.0;
    double h = 0.0;
    double y_start = 0.0;
    double y_end = 0.0;
    double error_estimate = 0.0;  ///< scaled local error (RK45 only; <= 1 when accepted)
    std::vector<SubStep> stages;
};

/// Weighted RK4 update; the single place where the end state is formed.
inline double rk4_combine(double y, double h, double k1, double k2, double k3, double k4)
{
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

/// Recomputes the RK4 end state from a recorded trace.
inline double resum(const StepTrace& tr)
{
    if (tr.stages.size() != 4) throw std::invalid_argument("resum expects an RK4 trace");
    return rk4_combine(tr.y_start, tr.h, tr.stages[0].gradient, tr.stages[1].gradient,
                       tr.stages[2].gradient, tr.stages[3].gradient);
}

/// Domain violation during integration; carries the steps completed so far
/// (including the partial step that failed).
class IntegrationDomainError : public DomainError {
public:
    IntegrationDomainError(const std::string& what, std::vector<StepTrace> partial)
        : DomainError(what), partial_(std::move(partial))
    {
    }
    [[nodiscard]] const std::vector<StepTrace>& partial_trace() const { return partial_; }

private:
    std::vector<StepTrace> partial_;
};

class MaxStepsExceeded : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline double eval_stage(const OdeModel& model, StepTrace& tr, double t, double y)
{
    if (!model.in_domain(y)) {
        tr.stages.push_back({t, y, std::nan("")});
        throw IntegrationDomainError("sub-step state " + std::to_string(y) + " outside model domain",
                                     {tr});
    }
    const double k = model.gradient(y);
    tr.stages.push_back({t, y, k});
    return k;
}

}  // namespace detail

inline std::pair<double, StepTrace> rk4_step(const OdeModel& model, double y, double h, double t = 0.0)
{
    StepTrace tr;
    tr.t_start = t;
    tr.h = h;
    tr.y_start = y;
    tr.stages.reserve(4);
    const double k1 = detail::eval_stage(model, tr, t, y);
    const double k2 = detail::eval_stage(model, tr, t + h / 2, y + k1 * h / 2);
    const double k3 = detail::eval_stage(model, tr, t + h / 2, y + k2 * h / 2);
    const double k4 = detail::eval_stage(model, tr, t + h, y + h * k3);
    tr.y_end = rk4_combine(y, h, k1, k2, k3, k4);
    return {tr.y_end, std::move(tr)};
}

/// RK4 without tracing; same arithmetic as rk4_step.
inline double rk4_advance(const OdeModel& model, double y, double h)
{
    const double k1 = model.gradient(y);
    const double y2 = y + k1 * h / 2;
    if (!model.in_domain(y2)) throw DomainError("RK4 sub-step outside model domain");
    const double k2 = model.gradient(y2);
    const double y3 = y + k2 * h / 2;
    if (!model.in_domain(y3)) throw DomainError("RK4 sub-step outside model domain");
    const double k3 = model.gradient(y3);
    const double y4 = y + h * k3;
    if (!model.in_domain(y4)) throw DomainError("RK4 sub-step outside model domain");
    const double k4 = model.gradient(y4);
    return rk4_combine(y, h, k1, k2, k3, k4);
}

// Dormand-Prince 5(4) coefficients.
namespace dopri {
inline constexpr std::array<double, 7> c{0.0, 1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9, 1.0, 1.0};
inline constexpr double a21 = 1.0 / 5;
inline constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
inline constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
inline constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                        a54 = -212.0 / 729;
inline constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                        a64 = 49.0 / 176, a65 = -5103.0 / 18656;
inline constexpr std::array<double, 7> b5{35.0 / 384, 0.0, 500.0 / 1113, 125.0 / 192,
                                          -2187.0 / 6784, 11.0 / 84, 0.0};
inline constexpr std::array<double, 7> b4{5179.0 / 57600, 0.0, 7571.0 / 16695, 393.0 / 640,
                                          -92097.0 / 339200, 187.0 / 2100, 1.0 / 40};
inline constexpr double safety = 0.9;
inline constexpr double min_factor = 0.2;
inline constexpr double max_factor = 5.0;
}  // namespace dopri

struct Rk45Trial {
    double y5 = 0.0;
    double err = 0.0;  ///< scaled error; accept when <= 1
};

/// One Dormand-Prince trial step. Stages are appended to `tr`.
inline Rk45Trial dopri_trial(const OdeModel& model, double t, double y, double h, const StepConfig& cfg,
                             StepTrace& tr)
{
    using namespace dopri;
    std::array<double, 7> k{};
    k[0] = detail::eval_stage(model, tr, t, y);
    k[1] = detail::eval_stage(model, tr, t + c[1] * h, y + h * a21 * k[0]);
    k[2] = detail::eval_stage(model, tr, t + c[2] * h, y + h * (a31 * k[0] + a32 * k[1]));
    k[3] = detail::eval_stage(model, tr, t + c[3] * h, y + h * (a41 * k[0] + a42 * k[1] + a43 * k[2]));
    k[4] = detail::eval_stage(model, tr, t + c[4] * h,
                              y + h * (a51 * k[0] + a52 * k[1] + a53 * k[2] + a54 * k[3]));
    k[5] = detail::eval_stage(model, tr, t + h,
                              y + h * (a61 * k[0] + a62 * k[1] + a63 * k[2] + a64 * k[3] + a65 * k[4]));
    double y5 = y;
    for (std::size_t i = 0; i < 6; ++i) y5 += h * b5[i] * k[i];
    k[6] = detail::eval_stage(model, tr, t + h, y5);
    double y4 = y;
    for (std::size_t i = 0; i < 7; ++i) y4 += h * b4[i] * k[i];
    const double scale = cfg.abs_tol + cfg.rel_tol * std::max(std::abs(y), std::abs(y5));
    return {y5, std::abs(y5 - y4) / scale};
}

struct IntervalResult {
    double y1 = 0.0;
    std::vector<StepTrace> traces;  ///< accepted steps only, in order
    int rejected = 0;
};

/// Adaptive step controller; returns the accepted step sequence over [t0, t1].
inline IntervalResult rk45_step_controller(const OdeModel& model, double y0, double t0, double t1,
                                           const StepConfig& cfg, bool keep_traces = true)
{
    using namespace dopri;
    IntervalResult out;
    const double span = t1 - t0;
    // First trial spans the whole interval; the controller shrinks it as needed.
    double h = span;
    double t = t0;
    double y = y0;
    int attempts = 0;
    while (t < t1) {
        if (++attempts > cfg.max_steps)
            throw MaxStepsExceeded("RK45 exceeded " + std::to_string(cfg.max_steps) + " steps");
        const bool last = t + h >= t1 - 1e-14 * std::max(1.0, std::abs(t1));
        const double step = last ? t1 - t : h;
        StepTrace tr;
        tr.t_start = t;
        tr.h = step;
        tr.y_start = y;
        Rk45Trial trial;
        try {
            trial = dopri_trial(model, t, y, step, cfg, tr);
        } catch (const IntegrationDomainError& e) {
            auto partial = std::move(out.traces);
            partial.push_back(e.partial_trace().back());
            throw IntegrationDomainError(e.what(), std::move(partial));
        }
        if (!std::isfinite(trial.y5)) throw DomainError("RK45 produced a non-finite state");
        if (trial.err <= 1.0) {
            t = last ? t1 : t + step;
            y = trial.y5;
            tr.y_end = y;
            tr.error_estimate = trial.err;
            if (keep_traces) out.traces.push_back(std::move(tr));
            const double factor =
                trial.err == 0.0 ? max_factor
                                 : std::clamp(safety * std::pow(trial.err, -0.2), min_factor, max_factor);
            h = step * factor;
        } else {
            ++out.rejected;
            h = step * std::clamp(safety * std::pow(trial.err, -0.2), min_factor, 1.0);
            if (h < cfg.h_min) throw std::runtime_error("RK45 step size underflow (stiff problem?)");
        }
    }
    out.y1 = y;
    return out;
}

/// Integrates the model from (t0, y0) to t1 with the configured method.
inline IntervalResult integrate_interval(const OdeModel& model, double y0, double t0, double t1,
                                         const StepConfig& cfg, bool keep_traces = true)
{
    if (!(t1 > t0)) throw std::invalid_argument("integrate_interval requires t1 > t0");
    validate(cfg);
    IntervalResult out;
    switch (cfg.method) {
    case Method::RK4Fixed: {
        const int n = rk4_step_count(t1 - t0, cfg.h);
        double y = y0;
        if (keep_traces) out.traces.reserve(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            const double t = t0 + i * cfg.h;
            if (keep_traces) {
                try {
                    auto [next, tr] = rk4_step(model, y, cfg.h, t);
                    y = next;
                    out.traces.push_back(std::move(tr));
                } catch (const IntegrationDomainError& e) {
                    auto partial = std::move(out.traces);
                    partial.push_back(e.partial_trace().back());
                    throw IntegrationDomainError(e.what(), std::move(partial));
                }
            } else {
                y = rk4_advance(model, y, cfg.h);
            }
        }
        out.y1 = y;
        return out;
    }
    case Method::RK45Adaptive:
        return rk45_step_controller(model, y0, t0, t1, cfg, keep_traces);
    case Method::AnalyticAffine: {
        if (model.kind() != ModelKind::Affine)
            throw std::invalid_argument("analytic integration is only available for the affine model");
        out.y1 = analytic_affine(model.affine(), y0, t1 - t0);
        if (keep_traces) {
            StepTrace tr;
            tr.t_start = t0;
            tr.h = t1 - t0;
            tr.y_start = y0;
            tr.y_end = out.y1;
            out.traces.push_back(std::move(tr));
        }
        return out;
    }
    }
    throw std::logic_error("unhandled integrator");
}

/// Tab-separated trace dump: step, substep, t, state, gradient. Each step
/// contributes its stages followed by a row for the accepted end state
/// (substep = -1, gradient = NaN).
inline void write_trace_table(std::ostream& os, const std::vector<StepTrace>& traces,
                              bool header = true)
{
    if (header) os << "step\tsubstep\tt\tstate\tgradient\n";
    os.precision(17);
    for (std::size_t s = 0; s < traces.size(); ++s) {
        const auto& tr = traces[s];
        for (std::size_t i = 0; i < tr.stages.size(); ++i) {
            const auto& st = tr.stages[i];
            os << s << '\t' << i << '\t' << st.t << '\t' << st.state << '\t' << st.gradient << '\n';
        }
        os << s << "\t-1\t" << tr.t_start + tr.h << '\t' << tr.y_end << "\tnan\n";
    }
}

}  // namespace rkmodes
