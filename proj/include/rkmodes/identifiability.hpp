#pragma once

// Closed-form analysis of RK4 applied to the affine law along the line
// b0 = alpha * b1. One RK4 step multiplies the distance to the asymptote by
// 1 - P(h*b1) with P(x) = x - x^2/2 + x^3/6 - x^4/24, whereas the exact flow
// multiplies it by exp(-b1*h). Rates b1_hat with P(h*b1_hat) = 1 - exp(-b1*h)
// reproduce the exact trajectory at every step boundary, whatever the start
// state and the number of steps, and therefore show up as posterior modes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "ode_models.hpp"

namespace rkmodes {

struct DefectSpec {
    double h = 0.5;
    double beta1_true = 1.0;
    double alpha = 10.0;
};

struct DefectRoots {
    std::vector<double> roots;      ///< ascending
    std::vector<double> residuals;  ///< |defect| at each root
    /// No real root at all. The true rate always sits near a root for
    /// small h*b1, so an empty set means the step is far too coarse.
    [[nodiscard]] bool empty() const { return roots.empty(); }
};

/// RK4 amplification complement P(x) = x - x^2/2 + x^3/6 - x^4/24.
inline double rk4_increment_poly(double x)
{
    return x * (1.0 - x / 2.0 * (1.0 - x / 3.0 * (1.0 - x / 4.0)));
}

inline double rk4_increment_poly_derivative(double x)
{
    return 1.0 - x * (1.0 - x / 2.0 * (1.0 - x / 3.0));
}

inline double defect(const DefectSpec& spec, double beta1_hat)
{
    return rk4_increment_poly(spec.h * beta1_hat) + std::expm1(-spec.beta1_true * spec.h);
}

inline double defect_derivative(const DefectSpec& spec, double beta1_hat)
{
    return spec.h * rk4_increment_poly_derivative(spec.h * beta1_hat);
}

/// exp(-h*b1) minus its degree-4 Taylor polynomial.
inline double truncation_residual(double h, double beta1)
{
    const double x = -h * beta1;
    if (x == 0.0) return 0.0;
    if (std::abs(x) < 1.0) {
        // Direct tail summation; the closed form cancels catastrophically here.
        double term = x * x * x * x * x / 120.0;
        double sum = 0.0;
        for (int n = 5; n < 60 && term != 0.0; ++n) {
            sum += term;
            term *= x / (n + 1);
        }
        return sum;
    }
    const double taylor4 = 1.0 + x * (1.0 + x / 2.0 * (1.0 + x / 3.0 * (1.0 + x / 4.0)));
    return std::exp(x) - taylor4;
}

/// Rate at which the RK4 quartic collapses to a single root of multiplicity four.
inline double multiplicity4_root(double h)
{
    if (!(h > 0.0)) throw std::invalid_argument("multiplicity4_root requires h > 0");
    return -1.0 / h;
}

/// Closed-form single RK4 step for b0 = alpha * b1_hat.
inline double single_step_poly(const DefectSpec& spec, double y, double beta1_hat)
{
    return y + (spec.alpha - y) * rk4_increment_poly(spec.h * beta1_hat);
}

namespace detail {

/// Bound on |x| for all real roots of P(x) + c (Fujiwara bound on the monic
/// form x^4 - 4x^3 + 12x^2 - 24x - 24c).
inline double quartic_root_bound(double c)
{
    return 2.0 * std::max({4.0, std::sqrt(12.0), std::cbrt(24.0), std::pow(12.0 * std::abs(c), 0.25)});
}

template <class F, class DF>
double polish_root(F&& f, DF&& df, double lo, double hi)
{
    double flo = f(lo);
    // Bisection to a tight bracket, then Newton.
    for (int i = 0; i < 40; ++i) {
        const double mid = 0.5 * (lo + hi);
        const double fm = f(mid);
        if (fm == 0.0) return mid;
        if ((fm < 0.0) == (flo < 0.0)) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    double x = 0.5 * (lo + hi);
    for (int i = 0; i < 50; ++i) {
        const double d = df(x);
        if (d == 0.0) break;
        const double step = f(x) / d;
        x -= step;
        if (std::abs(step) <= 1e-16 * std::max(1.0, std::abs(x))) break;
    }
    return x;
}

}  // namespace detail

/// All real roots of the defect, polished so that |defect| <= 1e-10.
inline DefectRoots find_roots(const DefectSpec& spec)
{
    if (!(spec.h > 0.0)) throw std::invalid_argument("find_roots requires h > 0");
    const double c = std::expm1(-spec.beta1_true * spec.h);
    auto p = [c](double x) { return rk4_increment_poly(x) + c; };
    auto dp = [](double x) { return rk4_increment_poly_derivative(x); };

    // Work in x = h * b1_hat, where the root bound is independent of h.
    const double bound = detail::quartic_root_bound(c);
    constexpr int grid = 1024;
    const double dx = 2.0 * bound / grid;

    std::vector<double> xs;
    double x_prev = -bound;
    double p_prev = p(x_prev);
    double d_prev = dp(x_prev);
    for (int i = 1; i <= grid; ++i) {
        const double x = -bound + i * dx;
        const double px = p(x);
        const double dx_val = dp(x);
        if (p_prev == 0.0) {
            xs.push_back(x_prev);
        } else if ((px < 0.0) != (p_prev < 0.0) && px != 0.0) {
            xs.push_back(detail::polish_root(p, dp, x_prev, x));
        } else if ((dx_val < 0.0) != (d_prev < 0.0)) {
            // Extremum inside the cell: catch roots that touch zero without crossing.
            const double xe = detail::polish_root(dp, [](double v) { return -1.0 + v * (1.0 - v / 2.0); },
                                                  x_prev, x);
            if (std::abs(p(xe)) <= 1e-10) xs.push_back(xe);
        }
        x_prev = x;
        p_prev = px;
        d_prev = dx_val;
    }
    if (p_prev == 0.0) xs.push_back(x_prev);

    std::sort(xs.begin(), xs.end());
    DefectRoots out;
    for (double x : xs) {
        const double r = x / spec.h;
        if (!out.roots.empty() && std::abs(r - out.roots.back()) < 1e-6 * (1.0 + std::abs(r))) continue;
        out.roots.push_back(r);
        out.residuals.push_back(std::abs(defect(spec, r)));
    }
    return out;
}

/// Mode location implied by a root: (b0, b1) = (alpha * r, r).
inline AffineParams implied_mode(const DefectSpec& spec, double root)
{
    return {spec.alpha * root, root};
}

struct DefectSample {
    double beta1_hat;
    double value;
};

inline std::vector<DefectSample> defect_curve(const DefectSpec& spec, double lo, double hi, int n)
{
    if (n < 2 || !(hi > lo)) throw std::invalid_argument("defect_curve needs n >= 2 and hi > lo");
    std::vector<DefectSample> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const double b = lo + (hi - lo) * i / (n - 1);
        out.push_back({b, defect(spec, b)});
    }
    return out;
}

/// Default plotting window: from the multiplicity-four point to just past the largest root.
inline std::vector<DefectSample> defect_curve(const DefectSpec& spec, int n = 401)
{
    const auto roots = find_roots(spec);
    const double hi = roots.empty() ? 6.0 / spec.h : 1.2 * roots.roots.back();
    return defect_curve(spec, 0.0, std::max(hi, 1.0), n);
}

inline void write_defect_curve(std::ostream& os, const std::vector<DefectSample>& curve)
{
    os << "beta1_hat\tdefect\n";
    os.precision(17);
    for (const auto& s : curve) os << s.beta1_hat << '\t' << s.value << '\n';
}

}  // namespace rkmodes
