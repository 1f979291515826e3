#pragma once

// Single-individual Bayesian longitudinal model. The latent size at the first
// survey is pinned to the first observation; every later size is the previous
// one pushed through the configured integrator. Measurement error is Gaussian
// with a fixed sd. Parameters are sampled on an unconstrained scale (log for
// log-normal priors) with adaptive random-walk Metropolis, or optimised from
// prior draws with L-BFGS.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "integrators.hpp"
#include "ode_models.hpp"
#include "simulate.hpp"

namespace rkmodes {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();
inline constexpr double kLogSqrt2Pi = 0.91893853320467274178;

enum class PriorFamily { Normal, LogNormal };

struct Prior {
    PriorFamily family = PriorFamily::Normal;
    double location = 0.0;
    double scale = 1.0;  ///< for LogNormal: sd of the underlying normal

    /// Density on the parameter's natural scale.
    [[nodiscard]] double log_density(double x) const
    {
        if (family == PriorFamily::Normal) {
            const double z = (x - location) / scale;
            return -0.5 * z * z - std::log(scale) - kLogSqrt2Pi;
        }
        if (!(x > 0.0)) return kNegInf;
        const double z = (std::log(x) - location) / scale;
        return -0.5 * z * z - std::log(scale) - kLogSqrt2Pi - std::log(x);
    }

    /// Density on the sampling scale (log scale for LogNormal, no Jacobian).
    [[nodiscard]] double log_density_sampling_scale(double x) const
    {
        if (family == PriorFamily::Normal) return log_density(x);
        if (!(x > 0.0)) return kNegInf;
        const double z = (std::log(x) - location) / scale;
        return -0.5 * z * z - std::log(scale) - kLogSqrt2Pi;
    }

    [[nodiscard]] bool log_transformed() const { return family == PriorFamily::LogNormal; }

    [[nodiscard]] double draw(CounterRng& rng) const
    {
        const double z = location + scale * rng.normal();
        return family == PriorFamily::Normal ? z : std::exp(z);
    }
};

using PriorSpec = std::vector<Prior>;

inline Prior normal_prior(double loc, double scale) { return {PriorFamily::Normal, loc, scale}; }
inline Prior lognormal_prior(double loc, double scale) { return {PriorFamily::LogNormal, loc, scale}; }

inline std::vector<std::string> parameter_names(ModelKind kind)
{
    if (kind == ModelKind::Affine) return {"beta_c", "beta1"};
    return {"g_max", "y_max", "k"};
}

/// Names of the reported (back-transformed) estimates.
inline std::vector<std::string> estimate_names(ModelKind kind)
{
    if (kind == ModelKind::Affine) return {"beta0", "beta1"};
    return {"g_max", "y_max", "k"};
}

inline PriorSpec default_priors(ModelKind kind)
{
    if (kind == ModelKind::Affine) return {normal_prior(1.0, 2.0), lognormal_prior(0.0, 2.0)};
    return {lognormal_prior(std::log(0.8), 1.0), lognormal_prior(std::log(8.0), 1.0),
            lognormal_prior(0.0, 1.0)};
}

enum class InitRule { PriorDraw, Fixed };

struct SamplerSettings {
    int warmup = 2000;
    int samples = 2000;
    double target_accept = 0.3;
    double initial_scale_fraction = 0.1;  ///< initial proposal sd as a fraction of the prior scale
};

struct LbfgsSettings {
    int memory = 5;
    int max_iterations = 2000;
    double gradient_tolerance = 1e-6;
    double fd_relative_step = 1e-6;
};

struct FitConfig {
    ModelKind model = ModelKind::Affine;
    StepConfig integrator = StepConfig::rk4(0.5);
    PriorSpec priors = default_priors(ModelKind::Affine);
    double error_sd = 0.1;
    SamplerSettings sampler;
    LbfgsSettings lbfgs;
    InitRule init = InitRule::PriorDraw;
    std::vector<double> init_values;  ///< sampling-scale parameters when init == Fixed
    int init_retries = 100;

    static FitConfig defaults(ModelKind kind)
    {
        FitConfig c;
        c.model = kind;
        c.priors = default_priors(kind);
        c.integrator = kind == ModelKind::Affine ? StepConfig::rk4(0.5) : StepConfig::rk45();
        // Far prior draws (y_max of 50 or more) need a long random-walk transient to reach the mode.
        if (kind == ModelKind::Canham) c.sampler.warmup = 30000;
        return c;
    }
};

inline void validate(const FitConfig& cfg)
{
    const auto n = parameter_names(cfg.model).size();
    if (cfg.priors.size() != n) throw std::invalid_argument("prior count does not match the model");
    for (const auto& p : cfg.priors)
        if (!(p.scale > 0.0)) throw std::invalid_argument("prior scale must be positive");
    if (cfg.model == ModelKind::Canham)
        for (const auto& p : cfg.priors)
            if (p.family != PriorFamily::LogNormal)
                throw std::invalid_argument("Canham parameters need log-normal priors (positive support)");
    if (!(cfg.error_sd > 0.0)) throw std::invalid_argument("error_sd must be positive");
    if (cfg.model == ModelKind::Canham && cfg.integrator.method == Method::AnalyticAffine)
        throw std::invalid_argument("no analytic solution for the Canham model");
    if (cfg.sampler.warmup < 0 || cfg.sampler.samples < 1)
        throw std::invalid_argument("sampler needs warmup >= 0 and samples >= 1");
    if (cfg.init == InitRule::Fixed && cfg.init_values.size() != n)
        throw std::invalid_argument("fixed init needs one value per parameter");
    validate(cfg.integrator);
}

/// Builds the growth law for sampling-scale parameters (beta_c, beta1) or (g_max, y_max, k).
inline OdeModel build_model(ModelKind kind, const Vec& theta, double y_bar)
{
    if (kind == ModelKind::Affine) return OdeModel{unshift({theta[0], theta[1], y_bar})};
    return OdeModel{CanhamParams{theta[0], theta[1], theta[2]}};
}

/// Forward projection Y_hat at every survey time, starting from y_obs[0].
/// Throws on integrator failure.
inline std::vector<double> project(const FitConfig& cfg, const ObservationSeries& series, const Vec& theta)
{
    const OdeModel model = build_model(cfg.model, theta, series.y_bar);
    return sample_trajectory(model, series.y_obs.front(), series.times, cfg.integrator);
}

inline double log_likelihood(const FitConfig& cfg, const ObservationSeries& series, const Vec& theta)
{
    std::vector<double> yhat;
    try {
        yhat = project(cfg, series, theta);
    } catch (const std::exception&) {
        return kNegInf;
    }
    const double inv = 1.0 / cfg.error_sd;
    double ll = 0.0;
    for (std::size_t j = 0; j < yhat.size(); ++j) {
        if (!std::isfinite(yhat[j])) return kNegInf;
        const double z = (series.y_obs[j] - yhat[j]) * inv;
        ll += -0.5 * z * z;
    }
    ll -= static_cast<double>(yhat.size()) * (std::log(cfg.error_sd) + kLogSqrt2Pi);
    return std::isfinite(ll) ? ll : kNegInf;
}

inline double log_prior(const FitConfig& cfg, const Vec& theta)
{
    double lp = 0.0;
    for (std::size_t i = 0; i < cfg.priors.size(); ++i)
        lp += cfg.priors[i].log_density(theta[static_cast<Eigen::Index>(i)]);
    return lp;
}

/// Log posterior (up to a constant) at sampling-scale parameters; -inf when
/// the projection fails or theta is outside the prior support.
inline double log_posterior(const FitConfig& cfg, const ObservationSeries& series, const Vec& theta)
{
    const double lp = log_prior(cfg, theta);
    if (!std::isfinite(lp)) return kNegInf;
    const double ll = log_likelihood(cfg, series, theta);
    return std::isfinite(ll) ? ll + lp : kNegInf;
}

/// Sampling-scale vector for affine parameters, using the series' own y_bar.
inline Vec affine_theta(const AffineParams& p, double y_bar)
{
    const auto s = shift(p, y_bar);
    Vec v(2);
    v << s.beta_c, s.beta1;
    return v;
}

inline Vec canham_theta(const CanhamParams& p)
{
    Vec v(3);
    v << p.g_max, p.y_max, p.k;
    return v;
}

// Unconstrained coordinates: log for log-normal priors, identity otherwise.

inline Vec to_unconstrained(const PriorSpec& priors, const Vec& theta)
{
    Vec u = theta;
    for (Eigen::Index i = 0; i < u.size(); ++i)
        if (priors[static_cast<std::size_t>(i)].log_transformed()) u[i] = std::log(theta[i]);
    return u;
}

inline Vec to_natural(const PriorSpec& priors, const Vec& u)
{
    Vec theta = u;
    for (Eigen::Index i = 0; i < u.size(); ++i)
        if (priors[static_cast<std::size_t>(i)].log_transformed()) theta[i] = std::exp(u[i]);
    return theta;
}

/// Target density on the unconstrained scale (includes the log-Jacobian).
inline double log_target(const FitConfig& cfg, const ObservationSeries& series, const Vec& u)
{
    const Vec theta = to_natural(cfg.priors, u);
    double lp = log_posterior(cfg, series, theta);
    if (!std::isfinite(lp)) return kNegInf;
    for (Eigen::Index i = 0; i < u.size(); ++i)
        if (cfg.priors[static_cast<std::size_t>(i)].log_transformed()) lp += u[i];
    return lp;
}

class InitializationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Independent draw from each prior.
inline Vec init_draw(const PriorSpec& priors, CounterRng& rng)
{
    Vec theta(static_cast<Eigen::Index>(priors.size()));
    for (std::size_t i = 0; i < priors.size(); ++i) theta[static_cast<Eigen::Index>(i)] = priors[i].draw(rng);
    return theta;
}

/// Starting point with a finite log posterior.
inline Vec initialize(const FitConfig& cfg, const ObservationSeries& series, CounterRng& rng)
{
    if (cfg.init == InitRule::Fixed) {
        Vec theta = Eigen::Map<const Vec>(cfg.init_values.data(), static_cast<Eigen::Index>(cfg.init_values.size()));
        if (!std::isfinite(log_posterior(cfg, series, theta)))
            throw InitializationError("fixed initial values have non-finite log posterior");
        return theta;
    }
    for (int attempt = 0; attempt < cfg.init_retries; ++attempt) {
        Vec theta = init_draw(cfg.priors, rng);
        if (std::isfinite(log_posterior(cfg, series, theta))) return theta;
    }
    throw InitializationError("no finite starting point after " + std::to_string(cfg.init_retries) + " draws");
}

enum class ChainStatus { Ok, NotConverged, InitFailed, Error };

inline std::string to_string(ChainStatus s)
{
    switch (s) {
    case ChainStatus::Ok: return "ok";
    case ChainStatus::NotConverged: return "not_converged";
    case ChainStatus::InitFailed: return "init_failed";
    case ChainStatus::Error: return "error";
    }
    return "?";
}

inline ChainStatus chain_status_from_string(const std::string& s)
{
    if (s == "ok") return ChainStatus::Ok;
    if (s == "not_converged") return ChainStatus::NotConverged;
    if (s == "init_failed") return ChainStatus::InitFailed;
    if (s == "error") return ChainStatus::Error;
    throw std::invalid_argument("unknown chain status '" + s + "'");
}

struct ChainResult {
    std::uint64_t seed = 0;
    ModelKind model = ModelKind::Affine;
    std::vector<double> estimate;  ///< beta0, beta1 or g_max, y_max, k
    std::vector<double> theta;     ///< sampling-scale estimate (beta_c, beta1 for affine)
    std::vector<double> start;     ///< sampling-scale starting point
    double acceptance_rate = std::nan("");  ///< MCMC only
    double log_posterior = std::nan("");
    int iterations = 0;
    bool converged = false;
    ChainStatus status = ChainStatus::Error;
    std::string message;
    double wall_time_ms = 0.0;

    [[nodiscard]] bool has_estimate() const { return !estimate.empty(); }
};

/// Back-transform sampling-scale parameters to reported estimates.
inline std::vector<double> to_estimate(ModelKind kind, const Vec& theta, double y_bar)
{
    if (kind == ModelKind::Affine) {
        const auto p = unshift({theta[0], theta[1], y_bar});
        return {p.beta0, p.beta1};
    }
    return {theta[0], theta[1], theta[2]};
}

namespace detail {

inline double elapsed_ms(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

inline std::vector<double> to_std(const Vec& v) { return {v.data(), v.data() + v.size()}; }

/// Covariance of a window of draws with light shrinkage toward its diagonal.
inline Mat window_covariance(const std::vector<Vec>& draws)
{
    const auto d = draws.front().size();
    const double n = static_cast<double>(draws.size());
    Vec m = Vec::Zero(d);
    for (const auto& x : draws) m += x;
    m /= n;
    Mat s = Mat::Zero(d, d);
    for (const auto& x : draws) s += (x - m) * (x - m).transpose();
    s /= std::max(1.0, n - 1.0);
    const double w = n / (n + 5.0);
    Mat reg = w * s;
    for (Eigen::Index i = 0; i < d; ++i) reg(i, i) += (1.0 - w) * 1e-3 * s(i, i) + 1e-16;
    return reg;
}

}  // namespace detail

/// Adaptive random-walk Metropolis. Warmup adapts a global scale by
/// Robbins-Monro and re-estimates the proposal covariance at the end of
/// doubling windows; adaptation is frozen for the sampling phase.
inline ChainResult run_mcmc(const FitConfig& cfg, const ObservationSeries& series, std::uint64_t seed)
{
    validate(cfg);
    const auto t_start = std::chrono::steady_clock::now();
    ChainResult res;
    res.seed = seed;
    res.model = cfg.model;
    CounterRng init_rng(seed, 1);
    CounterRng rng(seed, 2);

    Vec theta0;
    try {
        theta0 = initialize(cfg, series, init_rng);
    } catch (const InitializationError& e) {
        res.status = ChainStatus::InitFailed;
        res.message = e.what();
        res.wall_time_ms = detail::elapsed_ms(t_start);
        return res;
    }
    res.start = detail::to_std(theta0);

    const auto d = theta0.size();
    const auto& S = cfg.sampler;
    Vec u = to_unconstrained(cfg.priors, theta0);
    double lp = log_target(cfg, series, u);

    Mat cov = Mat::Zero(d, d);
    for (Eigen::Index i = 0; i < d; ++i) {
        const double s = S.initial_scale_fraction * cfg.priors[static_cast<std::size_t>(i)].scale;
        cov(i, i) = s * s;
    }
    Mat chol = cov.llt().matrixL();
    double log_lambda = 0.0;
    const double max_log_lambda = std::log(2.0 * 2.38 / std::sqrt(static_cast<double>(d)));
    int rm_step = 0;

    // Window boundaries: initial scale-only phase, doubling covariance
    // windows, and a terminal scale-only buffer.
    std::vector<int> window_ends;
    {
        const int init_buffer = std::min(150, S.warmup / 10);
        const int term_buffer = std::min(100, S.warmup / 20);
        int start = init_buffer;
        int len = 100;
        while (start + len < S.warmup - term_buffer) {
            int end = start + len;
            if (end + 2 * len > S.warmup - term_buffer) end = S.warmup - term_buffer;
            window_ends.push_back(end);
            start = end;
            len *= 2;
        }
    }
    std::size_t next_window = 0;
    const int first_window_start = std::min(150, S.warmup / 10);
    std::vector<Vec> window;

    Vec z(d);
    long accepted_sampling = 0;
    Vec sum_theta = Vec::Zero(d);
    const int total = S.warmup + S.samples;
    for (int it = 0; it < total; ++it) {
        for (Eigen::Index i = 0; i < d; ++i) z[i] = rng.normal();
        const Vec prop = u + std::exp(log_lambda) * (chol * z);
        const double lp_prop = log_target(cfg, series, prop);
        const double log_u = std::log(rng.uniform());
        const bool accept = std::isfinite(lp_prop) && (lp_prop >= lp || log_u < lp_prop - lp);
        if (accept) {
            u = prop;
            lp = lp_prop;
        }
        if (it < S.warmup) {
            ++rm_step;
            const double gain = std::pow(static_cast<double>(rm_step), -0.6);
            log_lambda += gain * ((accept ? 1.0 : 0.0) - S.target_accept);
            // Before the first covariance estimate the proposal never grows past
            // its initial size, so a chain descends into the nearest mode rather
            // than leaping across the landscape.
            log_lambda = std::clamp(log_lambda, -60.0, next_window == 0 ? 0.0 : max_log_lambda);
            if (it >= first_window_start) window.push_back(u);
            if (next_window < window_ends.size() && it + 1 == window_ends[next_window]) {
                Mat c = detail::window_covariance(window);
                Eigen::LLT<Mat> llt(c);
                if (llt.info() == Eigen::Success && c.allFinite() && c.diagonal().maxCoeff() > 0.0) {
                    chol = llt.matrixL();
                    log_lambda = std::log(2.38 / std::sqrt(static_cast<double>(d)));
                    rm_step = 0;
                }
                window.clear();
                ++next_window;
            }
        } else {
            if (accept) ++accepted_sampling;
            sum_theta += to_natural(cfg.priors, u);
        }
    }

    const Vec theta_mean = sum_theta / static_cast<double>(S.samples);
    res.theta = detail::to_std(theta_mean);
    res.estimate = to_estimate(cfg.model, theta_mean, series.y_bar);
    res.acceptance_rate = static_cast<double>(accepted_sampling) / S.samples;
    res.log_posterior = log_posterior(cfg, series, theta_mean);
    res.iterations = total;
    res.converged = res.acceptance_rate >= 0.1 && res.acceptance_rate <= 0.6;
    res.status = res.converged ? ChainStatus::Ok : ChainStatus::NotConverged;
    if (!res.converged) res.message = "acceptance rate outside [0.1, 0.6]";
    res.wall_time_ms = detail::elapsed_ms(t_start);
    return res;
}

namespace detail {

/// Central finite-difference gradient with step rel * (1 + |x_i|).
template <class F>
Vec fd_gradient(F&& f, const Vec& x, double rel)
{
    Vec g(x.size());
    Vec xp = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double step = rel * (1.0 + std::abs(x[i]));
        xp[i] = x[i] + step;
        const double fp = f(xp);
        xp[i] = x[i] - step;
        const double fm = f(xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * step);
    }
    return g;
}

}  // namespace detail

struct LbfgsResult {
    Vec x;
    double f = 0.0;
    double gradient_norm = 0.0;
    int iterations = 0;
    bool converged = false;
    std::string message;
};

namespace detail {

struct LineSearchPoint {
    double alpha = 0.0;
    double f = 0.0;
    Vec g;
    bool ok = false;
};

/// Strong-Wolfe line search (bracketing then zoom by safeguarded cubic
/// interpolation). Non-finite objective values count as +inf.
template <class F, class G>
LineSearchPoint strong_wolfe(F&& f, G&& grad, const Vec& x, double f0, const Vec& d, double slope0,
                             double alpha0)
{
    constexpr double c1 = 1e-4;
    constexpr double c2 = 0.9;
    constexpr double alpha_max = 1e10;
    auto eval = [&](double a) {
        LineSearchPoint p;
        p.alpha = a;
        p.f = f(x + a * d);
        if (!std::isfinite(p.f)) p.f = std::numeric_limits<double>::infinity();
        return p;
    };
    auto deriv = [&](LineSearchPoint& p) {
        p.g = grad(x + p.alpha * d);
        return p.g.allFinite() ? p.g.dot(d) : std::nan("");
    };
    auto interpolate = [](double a_lo, double f_lo, double d_lo, double a_hi, double f_hi) {
        // Minimiser of the quadratic through (a_lo, f_lo, d_lo) and (a_hi, f_hi),
        // kept inside the middle of the bracket.
        const double span = a_hi - a_lo;
        double a = a_lo + 0.5 * span;
        if (std::isfinite(f_hi)) {
            const double denom = 2.0 * (f_hi - f_lo - d_lo * span);
            if (denom > 0.0) a = a_lo - d_lo * span * span / denom;
        }
        const double lo = std::min(a_lo, a_hi), hi = std::max(a_lo, a_hi);
        const double margin = 0.1 * (hi - lo);
        return std::clamp(a, lo + margin, hi - margin);
    };

    LineSearchPoint best;  // best point with sufficient decrease, if any
    auto zoom = [&](LineSearchPoint lo, double d_lo, LineSearchPoint hi) {
        for (int i = 0; i < 40; ++i) {
            LineSearchPoint p = eval(interpolate(lo.alpha, lo.f, d_lo, hi.alpha, hi.f));
            if (p.f > f0 + c1 * p.alpha * slope0 || p.f >= lo.f) {
                hi = p;
                continue;
            }
            const double dp = deriv(p);
            if (!std::isfinite(dp)) {
                hi = p;
                continue;
            }
            if (!best.ok || p.f < best.f) {
                best = p;
                best.ok = true;
            }
            if (std::abs(dp) <= -c2 * slope0) {
                p.ok = true;
                return p;
            }
            if (dp * (hi.alpha - lo.alpha) >= 0.0) hi = lo;
            lo = p;
            d_lo = dp;
        }
        return best;
    };

    LineSearchPoint prev;
    prev.alpha = 0.0;
    prev.f = f0;
    double d_prev = slope0;
    double alpha = alpha0;
    for (int i = 0; i < 60; ++i) {
        LineSearchPoint p = eval(alpha);
        if (p.f > f0 + c1 * alpha * slope0 || (i > 0 && p.f >= prev.f)) return zoom(prev, d_prev, p);
        const double dp = deriv(p);
        if (!std::isfinite(dp)) return zoom(prev, d_prev, p);
        if (!best.ok || p.f < best.f) {
            best = p;
            best.ok = true;
        }
        if (std::abs(dp) <= -c2 * slope0) {
            p.ok = true;
            return p;
        }
        if (dp >= 0.0) return zoom(p, dp, prev);
        prev = p;
        d_prev = dp;
        alpha = std::min(2.0 * alpha, alpha_max);
    }
    return best;
}

}  // namespace detail

/// Minimises f with the limited-memory BFGS two-loop recursion and a
/// strong-Wolfe line search. Converged when the gradient norm reaches the
/// tolerance, or when the predicted decrease along the quasi-Newton
/// direction is below the objective's floating-point resolution while the
/// gradient is already small (sqrt of the tolerance).
template <class F, class G>
LbfgsResult lbfgs_minimize(F&& f, G&& grad, Vec x, const LbfgsSettings& opt)
{
    LbfgsResult out;
    double fx = f(x);
    Vec g = grad(x);
    std::deque<Vec> s_hist, y_hist;
    std::deque<double> rho_hist;
    const double resolution = 1e4 * std::numeric_limits<double>::epsilon();
    for (int iter = 0;; ++iter) {
        out.iterations = iter;
        if (!std::isfinite(fx) || !g.allFinite()) {
            out.message = "non-finite objective or gradient";
            break;
        }
        out.gradient_norm = g.norm();
        if (out.gradient_norm <= opt.gradient_tolerance) {
            out.converged = true;
            break;
        }
        if (iter >= opt.max_iterations) {
            out.message = "iteration limit reached";
            break;
        }
        // Two-loop recursion.
        Vec q = g;
        const std::size_t m = s_hist.size();
        std::vector<double> a(m);
        for (std::size_t i = m; i-- > 0;) {
            a[i] = rho_hist[i] * s_hist[i].dot(q);
            q -= a[i] * y_hist[i];
        }
        if (m > 0) q *= s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
        for (std::size_t i = 0; i < m; ++i) {
            const double b = rho_hist[i] * y_hist[i].dot(q);
            q += (a[i] - b) * s_hist[i];
        }
        Vec dir = -q;
        double slope = g.dot(dir);
        if (!(slope < 0.0)) {
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            dir = -g;
            slope = -g.squaredNorm();
        }
        const bool small_gradient = out.gradient_norm <= std::sqrt(opt.gradient_tolerance);
        if (small_gradient && -slope <= resolution * std::max(1.0, std::abs(fx))) {
            out.converged = true;
            out.message = "objective precision limit";
            break;
        }
        const double alpha0 = s_hist.empty() ? std::min(1.0, 1.0 / dir.norm()) : 1.0;
        auto p = detail::strong_wolfe(f, grad, x, fx, dir, slope, alpha0);
        if (!p.ok) {
            if (small_gradient) {
                out.converged = true;
                out.message = "objective precision limit";
            } else {
                out.message = "line search failed";
            }
            break;
        }
        const Vec x_new = x + p.alpha * dir;
        const Vec s = x_new - x;
        const Vec yv = p.g - g;
        const double sy = s.dot(yv);
        if (sy > 1e-12 * s.norm() * yv.norm()) {
            s_hist.push_back(s);
            y_hist.push_back(yv);
            rho_hist.push_back(1.0 / sy);
            if (static_cast<int>(s_hist.size()) > opt.memory) {
                s_hist.pop_front();
                y_hist.pop_front();
                rho_hist.pop_front();
            }
        }
        x = x_new;
        fx = p.f;
        g = p.g;
    }
    out.gradient_norm = g.norm();
    out.x = x;
    out.f = fx;
    return out;
}

/// MAP estimate from a random prior draw. Optimisation runs on the
/// unconstrained scale; the objective is the log posterior itself (no
/// Jacobian). Non-convergence is reported, never thrown.
inline ChainResult run_lbfgs(const FitConfig& cfg, const ObservationSeries& series, std::uint64_t seed)
{
    validate(cfg);
    const auto t_start = std::chrono::steady_clock::now();
    ChainResult res;
    res.seed = seed;
    res.model = cfg.model;
    CounterRng init_rng(seed, 1);
    Vec theta0;
    try {
        theta0 = initialize(cfg, series, init_rng);
    } catch (const InitializationError& e) {
        res.status = ChainStatus::InitFailed;
        res.message = e.what();
        res.wall_time_ms = detail::elapsed_ms(t_start);
        return res;
    }
    res.start = detail::to_std(theta0);
    auto objective = [&](const Vec& u) {
        const double lp = log_posterior(cfg, series, to_natural(cfg.priors, u));
        return std::isfinite(lp) ? -lp : std::numeric_limits<double>::infinity();
    };
    auto gradient = [&](const Vec& u) { return detail::fd_gradient(objective, u, cfg.lbfgs.fd_relative_step); };
    const auto r = lbfgs_minimize(objective, gradient, to_unconstrained(cfg.priors, theta0), cfg.lbfgs);
    const Vec theta = to_natural(cfg.priors, r.x);
    res.theta = detail::to_std(theta);
    res.estimate = to_estimate(cfg.model, theta, series.y_bar);
    res.log_posterior = -r.f;
    res.iterations = r.iterations;
    res.converged = r.converged;
    res.status = r.converged ? ChainStatus::Ok : ChainStatus::NotConverged;
    res.message = r.message;
    res.wall_time_ms = detail::elapsed_ms(t_start);
    return res;
}

// JSON forms used by experiment configs.

inline void to_json(nlohmann::json& j, const Prior& p)
{
    j = {{"family", p.family == PriorFamily::Normal ? "normal" : "lognormal"},
         {"location", p.location},
         {"scale", p.scale}};
}

inline void from_json(const nlohmann::json& j, Prior& p)
{
    const auto fam = j.at("family").get<std::string>();
    if (fam == "normal")
        p.family = PriorFamily::Normal;
    else if (fam == "lognormal")
        p.family = PriorFamily::LogNormal;
    else
        throw std::invalid_argument("unknown prior family '" + fam + "'");
    j.at("location").get_to(p.location);
    j.at("scale").get_to(p.scale);
}

}  // namespace rkmodes
