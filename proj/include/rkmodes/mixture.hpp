#pragma once

// Two-component multivariate-normal mixture over per-chain estimates, fitted
// by EM from a split at the mean of the first coordinate (beta0 for the
// affine model).

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "identifiability.hpp"
#include "inference.hpp"

namespace rkmodes {

struct MixtureComponent {
    Vec mean;
    Mat cov;
    double weight = 0.0;
};

struct MixtureFit {
    /// Two components ordered by the first coordinate of the mean, or a
    /// single component when the fit fell back.
    std::vector<MixtureComponent> components;
    double log_likelihood = kNegInf;
    int iterations = 0;
    bool degenerate = false;
    bool single_cluster = false;
    std::string note;
    /// Log-likelihood after each EM iteration (for monotonicity checks).
    std::vector<double> trace;
};

struct SplitInit {
    std::vector<int> labels;  ///< 0 or 1 per point
    Vec mean1, mean2;
    bool degenerate = false;
};

inline constexpr double kCovarianceFloor = 1e-12;

/// Stacks equal-length points into an n x d matrix.
inline Mat to_matrix(const std::vector<std::vector<double>>& points)
{
    if (points.empty()) throw std::invalid_argument("no points");
    const auto d = static_cast<Eigen::Index>(points.front().size());
    Mat x(static_cast<Eigen::Index>(points.size()), d);
    for (std::size_t i = 0; i < points.size(); ++i) {
        if (static_cast<Eigen::Index>(points[i].size()) != d) throw std::invalid_argument("ragged point set");
        for (Eigen::Index j = 0; j < d; ++j) x(static_cast<Eigen::Index>(i), j) = points[i][static_cast<std::size_t>(j)];
    }
    return x;
}

inline SplitInit split_init(const Mat& x)
{
    if (x.rows() < 2) throw std::invalid_argument("split_init needs at least two points");
    SplitInit s;
    const double cut = x.col(0).mean();
    s.labels.resize(static_cast<std::size_t>(x.rows()));
    Vec sum1 = Vec::Zero(x.cols()), sum2 = Vec::Zero(x.cols());
    int n1 = 0, n2 = 0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const bool low = x(i, 0) <= cut;
        s.labels[static_cast<std::size_t>(i)] = low ? 0 : 1;
        if (low) {
            sum1 += x.row(i).transpose();
            ++n1;
        } else {
            sum2 += x.row(i).transpose();
            ++n2;
        }
    }
    s.degenerate = n1 == 0 || n2 == 0;
    if (n1 > 0) s.mean1 = sum1 / n1;
    if (n2 > 0) s.mean2 = sum2 / n2;
    return s;
}

namespace detail {

/// Weighted covariance with the diagonal floored. Returns true if the floor bit.
inline bool weighted_covariance(const Mat& x, const Vec& r, const Vec& mean, Mat& cov)
{
    const double total = r.sum();
    const Mat centred = x.rowwise() - mean.transpose();
    cov = (centred.transpose() * r.asDiagonal() * centred) / total;
    cov = 0.5 * (cov + cov.transpose());
    bool floored = false;
    for (Eigen::Index j = 0; j < cov.rows(); ++j) {
        if (!(cov(j, j) > kCovarianceFloor)) {
            cov(j, j) = kCovarianceFloor;
            floored = true;
        }
    }
    // Keep the matrix positive definite when off-diagonals outgrow the floor.
    Eigen::LLT<Mat> llt(cov);
    double jitter = kCovarianceFloor;
    while (llt.info() != Eigen::Success) {
        cov.diagonal().array() += jitter;
        jitter *= 10.0;
        llt.compute(cov);
        floored = true;
    }
    return floored;
}

inline Vec log_normal_density_rows(const Mat& x, const Vec& mean, const Mat& cov)
{
    const Eigen::LLT<Mat> llt(cov);
    const Mat l = llt.matrixL();
    const double log_det = 2.0 * l.diagonal().array().log().sum();
    const Mat centred = (x.rowwise() - mean.transpose()).transpose();
    const Mat z = l.triangularView<Eigen::Lower>().solve(centred);
    const double d = static_cast<double>(x.cols());
    return (-0.5 * z.colwise().squaredNorm().array() - 0.5 * log_det - d * kLogSqrt2Pi).matrix().transpose();
}

inline MixtureComponent single_component(const Mat& x)
{
    MixtureComponent c;
    c.weight = 1.0;
    c.mean = x.colwise().mean().transpose();
    weighted_covariance(x, Vec::Ones(x.rows()), c.mean, c.cov);
    return c;
}

}  // namespace detail

struct EmSettings {
    double tolerance = 1e-8;
    int max_iterations = 500;
};

inline MixtureFit single_cluster_fit(const Mat& x, std::string note)
{
    MixtureFit fit;
    fit.components.push_back(detail::single_component(x));
    fit.log_likelihood = detail::log_normal_density_rows(x, fit.components[0].mean, fit.components[0].cov).sum();
    fit.degenerate = true;
    fit.single_cluster = true;
    fit.note = std::move(note);
    return fit;
}

/// EM from a hard split. Falls back to one component when the split or the
/// fit degenerates.
inline MixtureFit fit_em(const Mat& x, const SplitInit& init, const EmSettings& opt = {})
{
    const Eigen::Index n = x.rows();
    if (n < 4) throw std::invalid_argument("fit_em needs at least four points");
    if (init.degenerate) return single_cluster_fit(x, "split at the mean left one side empty");

    std::array<MixtureComponent, 2> comp;
    bool floored = false;
    for (int k = 0; k < 2; ++k) {
        Vec r(n);
        for (Eigen::Index i = 0; i < n; ++i) r(i) = init.labels[static_cast<std::size_t>(i)] == k ? 1.0 : 0.0;
        comp[k].weight = r.sum() / static_cast<double>(n);
        comp[k].mean = k == 0 ? init.mean1 : init.mean2;
        floored |= detail::weighted_covariance(x, r, comp[k].mean, comp[k].cov);
    }

    MixtureFit fit;
    Mat logp(n, 2);
    double prev = kNegInf;
    for (int iter = 1; iter <= opt.max_iterations; ++iter) {
        // E step.
        for (int k = 0; k < 2; ++k)
            logp.col(k) = detail::log_normal_density_rows(x, comp[k].mean, comp[k].cov).array() + std::log(comp[k].weight);
        Vec lse(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const double m = logp.row(i).maxCoeff();
            lse(i) = m + std::log((logp.row(i).array() - m).exp().sum());
        }
        const double ll = lse.sum();
        fit.trace.push_back(ll);
        fit.log_likelihood = ll;
        fit.iterations = iter;
        const Mat resp = (logp.colwise() - lse).array().exp().matrix();

        // M step.
        floored = false;
        bool empty = false;
        for (int k = 0; k < 2; ++k) {
            const Vec r = resp.col(k);
            const double nk = r.sum();
            if (!(nk > 0.0)) {
                empty = true;
                break;
            }
            comp[k].weight = nk / static_cast<double>(n);
            comp[k].mean = (x.transpose() * r) / nk;
            floored |= detail::weighted_covariance(x, r, comp[k].mean, comp[k].cov);
        }
        if (empty) {
            fit.note = "a component lost all responsibility";
            break;
        }
        if (iter > 1 && ll - prev < opt.tolerance) break;
        prev = ll;
    }

    if (comp[1].mean(0) < comp[0].mean(0)) std::swap(comp[0], comp[1]);
    fit.components = {comp[0], comp[1]};
    const double min_weight = 1.0 / static_cast<double>(n);
    const bool tiny = std::min(comp[0].weight, comp[1].weight) < min_weight;
    fit.degenerate = floored || tiny || !fit.note.empty();
    if (tiny || !fit.note.empty()) {
        auto fallback = single_cluster_fit(x, fit.note.empty() ? "component weight below 1/n" : fit.note);
        fallback.iterations = fit.iterations;
        fallback.trace = std::move(fit.trace);
        return fallback;
    }
    if (floored) fit.note = "covariance floor reached";
    return fit;
}

inline MixtureFit fit_em(const std::vector<std::vector<double>>& points, const EmSettings& opt = {})
{
    const Mat x = to_matrix(points);
    if (x.rows() < 4) throw std::invalid_argument("fit_em needs at least four points");
    return fit_em(x, split_init(x), opt);
}

/// Spread of the two components along the line joining their means:
/// sqrt((w1 d'S1 d + w2 d'S2 d) / |d|^2).
inline double pooled_sd_along_separation(const MixtureFit& fit)
{
    if (fit.components.size() != 2) return std::nan("");
    const auto& a = fit.components[0];
    const auto& b = fit.components[1];
    const Vec d = b.mean - a.mean;
    const double dd = d.squaredNorm();
    if (!(dd > 0.0)) return 0.0;
    const double w = a.weight * d.dot(a.cov * d) + b.weight * d.dot(b.cov * d);
    return std::sqrt(w / dd);
}

inline double mean_separation(const MixtureFit& fit)
{
    if (fit.components.size() != 2) return 0.0;
    return (fit.components[1].mean - fit.components[0].mean).norm();
}

/// Two distinct clusters: non-degenerate fit whose means lie more than
/// `factor` pooled sds apart.
inline bool is_multimodal(const MixtureFit& fit, double factor = 5.0)
{
    if (fit.degenerate || fit.components.size() != 2) return false;
    return mean_separation(fit) > factor * pooled_sd_along_separation(fit);
}

// Prior density at a cluster centre, in three conventions.
struct PriorDensity {
    double first_only = 0.0;      ///< first sampling parameter alone (beta_c for affine)
    double joint_natural = 0.0;   ///< product of natural-scale densities
    double joint_sampling = 0.0;  ///< log-normal parameters on their log scale
};

inline Vec estimate_to_theta(ModelKind kind, const Vec& estimate, double y_bar)
{
    if (kind == ModelKind::Affine) return affine_theta({estimate(0), estimate(1)}, y_bar);
    return estimate;
}

inline PriorDensity prior_density_at(const PriorSpec& priors, const Vec& theta)
{
    if (static_cast<Eigen::Index>(priors.size()) != theta.size())
        throw std::invalid_argument("prior count does not match parameter count");
    PriorDensity out;
    double ln_nat = 0.0, ln_samp = 0.0;
    for (std::size_t i = 0; i < priors.size(); ++i) {
        const double x = theta(static_cast<Eigen::Index>(i));
        ln_nat += priors[i].log_density(x);
        ln_samp += priors[i].log_density_sampling_scale(x);
    }
    out.first_only = std::exp(priors[0].log_density(theta(0)));
    out.joint_natural = std::exp(ln_nat);
    out.joint_sampling = std::exp(ln_samp);
    return out;
}

struct ComponentReport {
    Vec mean;
    Vec sd;
    double weight = 0.0;
    PriorDensity prior;
    double nearest_root = std::nan("");        ///< beta1 root closest to the component
    double root_relative_error = std::nan("");  ///< |mean beta1 - root| / root
    double distance_to_mode = std::nan("");     ///< Euclidean distance to (alpha r, r)
};

struct ModeReport {
    ModelKind model = ModelKind::Affine;
    std::vector<std::string> names;
    std::vector<ComponentReport> components;
    bool degenerate = false;
    bool single_cluster = false;
    double separation = 0.0;
    double pooled_sd = 0.0;
    double log_likelihood = 0.0;
    int iterations = 0;
};

/// Per-component summary. Root matching applies to the affine model only
/// and is skipped when `predicted` is empty.
inline ModeReport mode_report(const MixtureFit& fit, const DefectRoots& predicted, const DefectSpec& spec,
                              const PriorSpec& priors, ModelKind kind, double y_bar)
{
    ModeReport rep;
    rep.model = kind;
    rep.names = estimate_names(kind);
    rep.degenerate = fit.degenerate;
    rep.single_cluster = fit.single_cluster;
    rep.separation = mean_separation(fit);
    rep.pooled_sd = fit.components.size() == 2 ? pooled_sd_along_separation(fit) : 0.0;
    rep.log_likelihood = fit.log_likelihood;
    rep.iterations = fit.iterations;
    for (const auto& c : fit.components) {
        ComponentReport r;
        r.mean = c.mean;
        r.sd = c.cov.diagonal().cwiseSqrt();
        r.weight = c.weight;
        if (static_cast<Eigen::Index>(priors.size()) == c.mean.size())
            r.prior = prior_density_at(priors, estimate_to_theta(kind, c.mean, y_bar));
        if (kind == ModelKind::Affine && !predicted.empty()) {
            double best = std::numeric_limits<double>::infinity();
            for (double root : predicted.roots) {
                const AffineParams m = implied_mode(spec, root);
                const double dist = std::hypot(c.mean(0) - m.beta0, c.mean(1) - m.beta1);
                if (dist < best) {
                    best = dist;
                    r.nearest_root = root;
                }
            }
            r.distance_to_mode = best;
            r.root_relative_error = std::abs(c.mean(1) - r.nearest_root) / std::abs(r.nearest_root);
        }
        rep.components.push_back(std::move(r));
    }
    return rep;
}

inline void write_mode_report_csv(std::ostream& os, const ModeReport& rep)
{
    os.precision(10);
    os << "component,weight";
    for (const auto& n : rep.names) os << ",mean_" << n;
    for (const auto& n : rep.names) os << ",sd_" << n;
    os << ",prior_first,prior_joint_natural,prior_joint_sampling,nearest_root,root_rel_error,distance_to_mode\n";
    for (std::size_t k = 0; k < rep.components.size(); ++k) {
        const auto& c = rep.components[k];
        os << k + 1 << ',' << c.weight;
        for (Eigen::Index j = 0; j < c.mean.size(); ++j) os << ',' << c.mean(j);
        for (Eigen::Index j = 0; j < c.sd.size(); ++j) os << ',' << c.sd(j);
        os << ',' << c.prior.first_only << ',' << c.prior.joint_natural << ',' << c.prior.joint_sampling << ','
           << c.nearest_root << ',' << c.root_relative_error << ',' << c.distance_to_mode << '\n';
    }
}

inline nlohmann::json to_json_value(const ModeReport& rep)
{
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    nlohmann::json j;
    j["model"] = to_string(rep.model);
    j["degenerate"] = rep.degenerate;
    j["single_cluster"] = rep.single_cluster;
    j["separation"] = rep.separation;
    j["pooled_sd"] = rep.pooled_sd;
    j["log_likelihood"] = num(rep.log_likelihood);
    j["iterations"] = rep.iterations;
    j["components"] = nlohmann::json::array();
    for (const auto& c : rep.components) {
        nlohmann::json cj;
        cj["weight"] = c.weight;
        for (std::size_t i = 0; i < rep.names.size(); ++i) {
            cj["mean"][rep.names[i]] = c.mean(static_cast<Eigen::Index>(i));
            cj["sd"][rep.names[i]] = c.sd(static_cast<Eigen::Index>(i));
        }
        cj["prior_density"] = {{"first_parameter", c.prior.first_only},
                               {"joint_natural_scale", c.prior.joint_natural},
                               {"joint_sampling_scale", c.prior.joint_sampling}};
        cj["nearest_root"] = num(c.nearest_root);
        cj["root_relative_error"] = num(c.root_relative_error);
        cj["distance_to_mode"] = num(c.distance_to_mode);
        j["components"].push_back(cj);
    }
    return j;
}

}  // namespace rkmodes
