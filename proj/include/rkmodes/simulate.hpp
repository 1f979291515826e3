#pragma once

// Synthetic survey data: true trajectories from the exact (affine) or a
// high-accuracy numerical (Canham) solution, plus Gaussian measurement
// error rounded to the measurement precision.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "integrators.hpp"
#include "ode_models.hpp"

namespace rkmodes {

/// Counter-based generator. A stream is identified by (seed, stream id);
/// the n-th draw of a stream is a pure function of (seed, stream, n), so
/// results do not depend on execution order.
class CounterRng {
public:
    CounterRng(std::uint64_t seed, std::uint64_t stream = 0) : key_(derive_key(seed, stream)) {}

    static std::uint64_t mix(std::uint64_t z)
    {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    static std::uint64_t derive_key(std::uint64_t seed, std::uint64_t stream)
    {
        return mix(mix(seed) ^ mix(stream + 0x632be59bd9b4e019ULL));
    }

    [[nodiscard]] std::uint64_t bits_at(std::uint64_t counter) const
    {
        return mix(key_ ^ mix(counter));
    }

    /// Uniform on the open interval (0, 1).
    [[nodiscard]] double uniform_at(std::uint64_t counter) const
    {
        return (static_cast<double>(bits_at(counter) >> 11) + 0.5) * 0x1.0p-53;
    }

    /// Standard normal built from counters 2n and 2n+1 (Box-Muller).
    [[nodiscard]] double normal_at(std::uint64_t n) const
    {
        const double u1 = uniform_at(2 * n);
        const double u2 = uniform_at(2 * n + 1);
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    double uniform() { return uniform_at(counter_++); }
    double normal() { return normal_at(normal_counter_++ + (std::uint64_t{1} << 62)); }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    std::uint64_t normal_counter_ = 0;
};

struct SurveyDesign {
    int n_obs = 10;
    double t0 = 0.0;
    double dt = 1.0;
    double y0 = 1.0;

    [[nodiscard]] std::vector<double> times() const
    {
        if (n_obs < 2 || !(dt > 0.0)) throw std::invalid_argument("survey needs n_obs >= 2 and dt > 0");
        std::vector<double> t(static_cast<std::size_t>(n_obs));
        for (int j = 0; j < n_obs; ++j) t[static_cast<std::size_t>(j)] = t0 + j * dt;
        return t;
    }
};

struct NoiseSpec {
    double sd = 0.1;
    double precision = 0.1;
    std::uint64_t seed = 1;
};

struct ObservationSeries {
    std::vector<double> times;
    std::vector<double> y_obs;
    std::vector<double> y_true;
    double y_bar = 0.0;

    [[nodiscard]] std::size_t size() const { return times.size(); }
};

inline double mean(const std::vector<double>& v)
{
    if (v.empty()) throw std::invalid_argument("mean of empty vector");
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Nearest multiple of `precision`, ties away from zero.
inline double round_to_grid(double x, double precision)
{
    if (!(precision > 0.0)) throw std::invalid_argument("precision must be positive");
    const double inv = 1.0 / precision;
    const double inv_int = std::round(inv);
    const bool decimal_grid = std::abs(inv - inv_int) < 1e-9 * inv;
    const double q = decimal_grid ? x * inv_int : x / precision;
    const double whole = std::trunc(q);
    double n;
    if (std::abs(std::abs(q - whole) - 0.5) < 8.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(q)))
        n = whole + (q < 0.0 ? -1.0 : 1.0);
    else
        n = std::round(q);
    if (n == 0.0) return 0.0;
    // Division by an integer reciprocal gives the double nearest the decimal multiple.
    return decimal_grid ? n / inv_int : n * precision;
}

namespace detail {

inline ObservationSeries add_noise(std::vector<double> times, std::vector<double> y_true,
                                   const NoiseSpec& noise, std::uint64_t stream)
{
    if (noise.sd < 0.0) throw std::invalid_argument("noise sd must be non-negative");
    const CounterRng rng(noise.seed, stream);
    ObservationSeries s;
    s.times = std::move(times);
    s.y_true = std::move(y_true);
    s.y_obs.resize(s.y_true.size());
    for (std::size_t j = 0; j < s.y_true.size(); ++j) {
        const double e = noise.sd > 0.0 ? noise.sd * rng.normal_at(j) : 0.0;
        s.y_obs[j] = round_to_grid(s.y_true[j] + e, noise.precision);
    }
    s.y_bar = mean(s.y_obs);
    return s;
}

}  // namespace detail

/// `stream` selects an independent noise realisation (e.g. one per chain).
inline ObservationSeries simulate_affine(const AffineParams& params, const SurveyDesign& design,
                                         const NoiseSpec& noise, std::uint64_t stream = 0)
{
    auto times = design.times();
    std::vector<double> truth(times.size());
    for (std::size_t j = 0; j < times.size(); ++j)
        truth[j] = analytic_affine(params, design.y0, times[j] - design.t0);
    return detail::add_noise(std::move(times), std::move(truth), noise, stream);
}

/// Integrates `model` from y0 and samples it at `times` (ascending, times[0] is the start).
inline std::vector<double> sample_trajectory(const OdeModel& model, double y0,
                                             const std::vector<double>& times, const StepConfig& cfg)
{
    std::vector<double> out(times.size());
    if (times.empty()) return out;
    out[0] = y0;
    for (std::size_t j = 1; j < times.size(); ++j)
        out[j] = integrate_interval(model, out[j - 1], times[j - 1], times[j], cfg, false).y1;
    return out;
}

inline bool is_high_accuracy(const StepConfig& cfg)
{
    switch (cfg.method) {
    case Method::RK4Fixed: return cfg.h <= 1e-3;
    case Method::RK45Adaptive: return cfg.rel_tol <= 1e-9 && cfg.abs_tol <= 1e-9;
    case Method::AnalyticAffine: return true;
    }
    return false;
}

inline ObservationSeries simulate_canham(const CanhamParams& params, const SurveyDesign& design,
                                         const NoiseSpec& noise, const StepConfig& truth_cfg,
                                         std::uint64_t stream = 0)
{
    if (!is_high_accuracy(truth_cfg))
        throw std::invalid_argument("Canham truth needs RK4 h <= 1e-3 or RK45 tol <= 1e-9");
    auto times = design.times();
    auto truth = sample_trajectory(OdeModel{params}, design.y0, times, truth_cfg);
    return detail::add_noise(std::move(times), std::move(truth), noise, stream);
}

/// Re-draws measurement error around an existing true trajectory.
inline ObservationSeries renoise(const ObservationSeries& base, const NoiseSpec& noise, std::uint64_t stream)
{
    return detail::add_noise(base.times, base.y_true, noise, stream);
}

// Delimited text with header "t,y_obs,y_true".

inline void write_series_csv(std::ostream& os, const ObservationSeries& s)
{
    os << "t,y_obs,y_true\n";
    os.precision(17);
    for (std::size_t j = 0; j < s.size(); ++j)
        os << s.times[j] << ',' << s.y_obs[j] << ',' << s.y_true[j] << '\n';
}

inline ObservationSeries read_series_csv(std::istream& is)
{
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("empty series file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "t,y_obs,y_true" && line != "t,y_obs")
        throw std::runtime_error("unexpected series header '" + line + "'");
    const bool has_truth = line == "t,y_obs,y_true";
    ObservationSeries s;
    int lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        std::istringstream ss(line);
        std::string a, b, c;
        std::getline(ss, a, ',');
        std::getline(ss, b, ',');
        if (has_truth) std::getline(ss, c, ',');
        try {
            s.times.push_back(std::stod(a));
            s.y_obs.push_back(std::stod(b));
            s.y_true.push_back(has_truth && !c.empty() ? std::stod(c) : std::nan(""));
        } catch (const std::exception&) {
            throw std::runtime_error("malformed series row at line " + std::to_string(lineno));
        }
    }
    if (s.times.size() < 2) throw std::runtime_error("series needs at least two observations");
    for (std::size_t j = 1; j < s.times.size(); ++j)
        if (!(s.times[j] > s.times[j - 1])) throw std::runtime_error("series times must increase");
    s.y_bar = mean(s.y_obs);
    return s;
}

inline void save_series(const std::string& path, const ObservationSeries& s)
{
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    write_series_csv(f, s);
}

inline ObservationSeries load_series(const std::string& path)
{
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path);
    return read_series_csv(f);
}

}  // namespace rkmodes
