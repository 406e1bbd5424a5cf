#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace zepo {

/// Discrete noise schedule. Tables are indexed by timestep t in [0, num_train_steps).
struct DiffusionSchedule {
    int num_train_steps = 0;
    std::vector<double> beta;
    std::vector<double> alpha_bar;
    std::vector<double> sigma;

    void check_timestep(int t, const char* what) const {
        if (t < 0 || t >= num_train_steps) {
            throw std::out_of_range(std::string(what) + ": timestep " + std::to_string(t) + " outside [0, " +
                                    std::to_string(num_train_steps - 1) + "]");
        }
    }
};

/// Scaled-linear schedule: sqrt(beta) is interpolated linearly, then squared.
/// sigma_t is the DDPM posterior standard deviation, sigma_0 = 0.
inline DiffusionSchedule build_schedule(int num_train_steps = 1000, double beta_start = 0.00085,
                                        double beta_end = 0.012) {
    if (num_train_steps < 1) throw std::invalid_argument("build_schedule: num_train_steps must be >= 1");
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || !(beta_start < beta_end)) {
        throw std::invalid_argument("build_schedule: require 0 < beta_start < beta_end < 1");
    }

    DiffusionSchedule s;
    s.num_train_steps = num_train_steps;
    s.beta.resize(num_train_steps);
    s.alpha_bar.resize(num_train_steps);
    s.sigma.resize(num_train_steps);

    const double lo = std::sqrt(beta_start);
    const double hi = std::sqrt(beta_end);
    double running = 1.0;
    for (int t = 0; t < num_train_steps; ++t) {
        const double frac = num_train_steps == 1 ? 0.0 : static_cast<double>(t) / (num_train_steps - 1);
        const double root = lo + (hi - lo) * frac;
        s.beta[t] = root * root;
        const double prev = running;
        running *= 1.0 - s.beta[t];
        s.alpha_bar[t] = running;
        s.sigma[t] = std::sqrt(s.beta[t] * (1.0 - prev) / (1.0 - running));
    }
    return s;
}

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
inline LatentTensor forward_noise(const LatentTensor& z0, int t, const LatentTensor& eps,
                                  const DiffusionSchedule& schedule) {
    schedule.check_timestep(t, "forward_noise");
    require_same_shape(z0, eps, "forward_noise");
    const double a = std::sqrt(schedule.alpha_bar[t]);
    const double b = std::sqrt(1.0 - schedule.alpha_bar[t]);
    LatentTensor out = z0;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z0[i] + b * eps[i];
    return out;
}

/// Ancestral DDPM step from t to t-1. Kept as a reference sampler; the pipeline does not use it.
inline LatentTensor ddpm_reverse_step(const LatentTensor& zt, int t, const LatentTensor& eps_pred,
                                      const LatentTensor& noise, const DiffusionSchedule& schedule) {
    schedule.check_timestep(t, "ddpm_reverse_step");
    if (t == 0) throw std::invalid_argument("ddpm_reverse_step: no posterior step is defined at t = 0");
    require_same_shape(zt, eps_pred, "ddpm_reverse_step");
    require_same_shape(zt, noise, "ddpm_reverse_step");

    const double beta = schedule.beta[t];
    const double inv = 1.0 / std::sqrt(1.0 - beta);
    const double coeff = beta / std::sqrt(1.0 - schedule.alpha_bar[t]);
    const double sigma = schedule.sigma[t];
    LatentTensor out = zt;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = inv * (zt[i] - coeff * eps_pred[i]) + sigma * noise[i];
    return out;
}

struct BoundaryCoefficients {
    double c_skip = 1.0;
    double c_out = 0.0;
};

inline constexpr double kDefaultSigmaData = 0.5;
inline constexpr double kDefaultTimestepScale = 10.0;

/// Boundary-respecting skip/output weights of the consistency function: (1, 0) at t = 0.
inline BoundaryCoefficients consistency_boundary(double t, double sigma_data = kDefaultSigmaData,
                                                 double timestep_scale = kDefaultTimestepScale) {
    if (!(sigma_data > 0.0)) throw std::invalid_argument("consistency_boundary: sigma_data must be > 0");
    if (t < 0.0) throw std::invalid_argument("consistency_boundary: t must be >= 0");
    const double x = timestep_scale * t;
    const double denom = x * x + sigma_data * sigma_data;
    if (std::isinf(denom)) return {0.0, 1.0};
    return {sigma_data * sigma_data / denom, x / std::sqrt(denom)};
}

enum class TimestepSpacing {
    trailing, // round((t_max + 1) * (T - i) / T) - 1; never reaches t = 0 for T > 1
    linspace, // even spacing over [0, t_max] including both endpoints
};

inline std::string_view to_string(TimestepSpacing s) {
    return s == TimestepSpacing::trailing ? "trailing" : "linspace";
}

inline TimestepSpacing parse_spacing(std::string_view s) {
    if (s == "trailing") return TimestepSpacing::trailing;
    if (s == "linspace") return TimestepSpacing::linspace;
    throw std::invalid_argument("unknown timestep spacing '" + std::string(s) + "' (expected trailing|linspace)");
}

struct TimestepPlan {
    std::vector<int> steps;
    double strength = 1.0;
};

inline TimestepPlan plan_timesteps(int num_steps, double strength, const DiffusionSchedule& schedule,
                                   TimestepSpacing spacing = TimestepSpacing::trailing) {
    if (num_steps < 1) throw std::invalid_argument("plan_timesteps: num_steps must be >= 1");
    if (!(strength > 0.0) || strength > 1.0) throw std::invalid_argument("plan_timesteps: strength must be in (0, 1]");

    const int t_max = static_cast<int>(std::lround(strength * (schedule.num_train_steps - 1)));
    if (num_steps > t_max + 1) {
        throw std::invalid_argument("plan_timesteps: " + std::to_string(num_steps) + " steps requested but only " +
                                    std::to_string(t_max + 1) + " distinct timesteps are available");
    }

    TimestepPlan plan;
    plan.strength = strength;
    plan.steps.reserve(num_steps);
    for (int i = 0; i < num_steps; ++i) {
        long t = 0;
        if (spacing == TimestepSpacing::linspace) {
            t = num_steps == 1 ? t_max
                               : std::lround(t_max - static_cast<double>(i) * t_max / (num_steps - 1));
        } else {
            t = std::lround(static_cast<double>(t_max + 1) * (num_steps - i) / num_steps) - 1;
        }
        plan.steps.push_back(static_cast<int>(t));
    }
    for (std::size_t i = 1; i < plan.steps.size(); ++i) {
        if (plan.steps[i] >= plan.steps[i - 1]) {
            throw std::logic_error("plan_timesteps: spacing produced a non-decreasing plan");
        }
    }
    return plan;
}

} // namespace zepo
