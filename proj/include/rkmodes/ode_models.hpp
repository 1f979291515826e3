#pragma once

// Growth laws used throughout the library: the affine law dY/dt = b0 - b1*Y
// (with its closed-form solution and mean-shift reparameterization) and the
// Canham log-normal-hump law.

#include <cmath>
#include <stdexcept>
#include <string>
#include <variant>

#include <nlohmann/json.hpp>

namespace rkmodes {

/// Raised when a model is evaluated outside its admissible state domain.
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

struct AffineParams {
    double beta0 = 0.0;
    double beta1 = 0.0;

    /// Asymptotic size beta0 / beta1.
    [[nodiscard]] double alpha() const
    {
        if (beta1 == 0.0) throw std::invalid_argument("affine asymptote undefined for beta1 = 0");
        return beta0 / beta1;
    }

    friend bool operator==(const AffineParams&, const AffineParams&) = default;
};

/// Affine law written around the mean observed size:
/// dY/dt = beta_c - beta1 * (Y - y_bar).
struct ShiftedAffineParams {
    double beta_c = 0.0;
    double beta1 = 0.0;
    double y_bar = 0.0;

    friend bool operator==(const ShiftedAffineParams&, const ShiftedAffineParams&) = default;
};

struct CanhamParams {
    double g_max = 1.0;
    double y_max = 1.0;
    double k = 1.0;

    friend bool operator==(const CanhamParams&, const CanhamParams&) = default;
};

inline void validate(const CanhamParams& p)
{
    if (!(p.g_max > 0.0 && p.y_max > 0.0 && p.k > 0.0))
        throw std::invalid_argument("Canham parameters must be strictly positive");
}

enum class ModelKind { Affine, Canham };

inline std::string to_string(ModelKind kind)
{
    return kind == ModelKind::Affine ? "affine" : "canham";
}

inline ModelKind model_kind_from_string(const std::string& s)
{
    if (s == "affine") return ModelKind::Affine;
    if (s == "canham") return ModelKind::Canham;
    throw std::invalid_argument("unknown model kind '" + s + "'");
}

/// Uniform wrapper over the two growth laws. Both are autonomous, so the
/// gradient depends on the state only.
class OdeModel {
public:
    OdeModel(AffineParams p) : params_(p) {}
    OdeModel(CanhamParams p) : params_(p) { validate(p); }

    [[nodiscard]] ModelKind kind() const
    {
        return std::holds_alternative<AffineParams>(params_) ? ModelKind::Affine : ModelKind::Canham;
    }

    [[nodiscard]] const AffineParams& affine() const { return std::get<AffineParams>(params_); }
    [[nodiscard]] const CanhamParams& canham() const { return std::get<CanhamParams>(params_); }

    [[nodiscard]] bool in_domain(double y) const
    {
        if (!std::isfinite(y)) return false;
        return kind() == ModelKind::Affine || y > 0.0;
    }

    [[nodiscard]] double gradient(double y) const
    {
        if (const auto* a = std::get_if<AffineParams>(&params_)) return a->beta0 - a->beta1 * y;
        const auto& c = std::get<CanhamParams>(params_);
        if (!(y > 0.0)) throw DomainError("Canham gradient requires Y > 0");
        const double z = std::log(y / c.y_max) / c.k;
        return c.g_max * std::exp(-0.5 * z * z);
    }

private:
    std::variant<AffineParams, CanhamParams> params_;
};

inline double gradient(const OdeModel& model, double y) { return model.gradient(y); }

/// Gradient of the mean-shifted affine form, evaluated without back-transforming.
inline double gradient(const ShiftedAffineParams& p, double y)
{
    return p.beta_c - p.beta1 * (y - p.y_bar);
}

/// Closed-form affine solution from y0 at time 0.
inline double analytic_affine(const AffineParams& p, double y0, double t)
{
    if (p.beta1 == 0.0) throw std::invalid_argument("analytic_affine requires beta1 != 0");
    const double alpha = p.beta0 / p.beta1;
    return alpha + (y0 - alpha) * std::exp(-p.beta1 * t);
}

inline ShiftedAffineParams shift(const AffineParams& p, double y_bar)
{
    return {p.beta0 - p.beta1 * y_bar, p.beta1, y_bar};
}

inline AffineParams unshift(const ShiftedAffineParams& s)
{
    return {s.beta_c + s.beta1 * s.y_bar, s.beta1};
}

// Flat key-value serialization. Keys: beta0, beta1, beta_c, y_bar, g_max, y_max, k.

inline void to_json(nlohmann::json& j, const AffineParams& p)
{
    j = {{"beta0", p.beta0}, {"beta1", p.beta1}};
}
inline void from_json(const nlohmann::json& j, AffineParams& p)
{
    j.at("beta0").get_to(p.beta0);
    j.at("beta1").get_to(p.beta1);
}

inline void to_json(nlohmann::json& j, const ShiftedAffineParams& p)
{
    j = {{"beta_c", p.beta_c}, {"beta1", p.beta1}, {"y_bar", p.y_bar}};
}
inline void from_json(const nlohmann::json& j, ShiftedAffineParams& p)
{
    j.at("beta_c").get_to(p.beta_c);
    j.at("beta1").get_to(p.beta1);
    j.at("y_bar").get_to(p.y_bar);
}

inline void to_json(nlohmann::json& j, const CanhamParams& p)
{
    j = {{"g_max", p.g_max}, {"y_max", p.y_max}, {"k", p.k}};
}
inline void from_json(const nlohmann::json& j, CanhamParams& p)
{
    j.at("g_max").get_to(p.g_max);
    j.at("y_max").get_to(p.y_max);
    j.at("k").get_to(p.k);
    validate(p);
}

}  // namespace rkmodes
