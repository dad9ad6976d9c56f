#pragma once

// Loss functions: cross entropy, alpha-balanced cross entropy, focal loss,
// the log-sum-of-squares multi-objective term (whose exponential is the
// product of per-task squared-error sums, i.e. a geometric rather than
// arithmetic combination), and the combined training objective. Pure
// functions; thread-safe.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "mmfuse/errors.hpp"
#include "mmfuse/numerics.hpp"

namespace mmfuse {

// Probabilities are clamped to [PROB_FLOOR, 1] before any log.
inline constexpr double PROB_FLOOR = 1e-12;
// Additive floor inside the multi-objective log, keeping it finite at
// perfect fit.
inline constexpr double MULTI_EPS = 1e-12;

struct FocalConfig {
  double gamma = 2.0;
  double alpha = 0.5;
};

inline void validate_focal_config(const FocalConfig& cfg) {
  if (!(cfg.gamma >= 0.0)) throw ConfigError("focal: gamma must be >= 0");
  if (!(cfg.alpha >= 0.0 && cfg.alpha <= 1.0)) throw ConfigError("focal: alpha must be in [0,1]");
}

namespace detail {
inline double checked_prob(double p) {
  if (!(p >= 0.0 && p <= 1.0))
    throw DataError("loss: probability outside [0,1]: " + std::to_string(p));
  return std::max(p, PROB_FLOOR);
}
}  // namespace detail

// -sum_i log(p_i), where p_i is the probability assigned to the true outcome.
inline double ce_loss(const RealVec& probs_correct) {
  double loss = 0.0;
  for (double p : probs_correct) loss -= std::log(detail::checked_prob(p));
  return loss;
}

// -sum_i alpha_i log(p_i).
inline double alpha_ce_loss(const RealVec& probs_correct, const RealVec& alphas) {
  if (probs_correct.size() != alphas.size())
    throw DimensionError("alpha_ce_loss: probs/alphas length mismatch");
  double loss = 0.0;
  for (std::size_t i = 0; i < probs_correct.size(); ++i)
    loss -= alphas[i] * std::log(detail::checked_prob(probs_correct[i]));
  return loss;
}

// -sum_i alpha_i (1-p_i)^gamma log(p_i); gamma = 0 recovers alpha-CE.
inline double focal_loss(const RealVec& probs_correct, const FocalConfig& cfg,
                         const RealVec& per_sample_alphas) {
  validate_focal_config(cfg);
  if (probs_correct.size() != per_sample_alphas.size())
    throw DimensionError("focal_loss: probs/alphas length mismatch");
  double loss = 0.0;
  for (std::size_t i = 0; i < probs_correct.size(); ++i) {
    const double p = detail::checked_prob(probs_correct[i]);
    loss -= per_sample_alphas[i] * std::pow(1.0 - p, cfg.gamma) * std::log(p);
  }
  return loss;
}

// Derivative of one focal term with respect to the true-class probability,
// treating alpha_i as a constant. Matches focal_loss exactly, including the
// probability clamp (zero slope once the clamp is active).
inline double focal_dloss_dp(double p, double gamma, double alpha_i) {
  if (p <= PROB_FLOOR) return 0.0;
  const double u = std::max(1.0 - p, 0.0);
  if (u == 0.0) return gamma == 0.0 ? -alpha_i / p : 0.0;
  if (gamma == 0.0) return -alpha_i / p;
  return alpha_i * (gamma * std::pow(u, gamma - 1.0) * std::log(p) - std::pow(u, gamma) / p);
}

// sum_t log(S_t + eps) over per-task squared-residual sums S_t. Its
// exponential is the product of the S_t.
inline double multi_objective_loss(const std::vector<double>& residual_sq_sums,
                                   double eps = MULTI_EPS) {
  double loss = 0.0;
  for (double s : residual_sq_sums) {
    if (s < 0.0) throw DataError("multi_objective_loss: negative residual sum");
    loss += std::log(s + eps);
  }
  return loss;
}

// Maximum-likelihood estimate of the Gaussian noise variance: the mean of
// squared residuals. This is the stationary point of the per-task Gaussian
// negative log likelihood in the variance.
inline double noise_variance_mle(const std::vector<double>& residuals) {
  if (residuals.empty()) throw DataError("noise_variance_mle: no residuals");
  double s = 0.0;
  for (double r : residuals) s += r * r;
  return s / static_cast<double>(residuals.size());
}

// Per-sample weighting rule: alpha when the model's top class matches the
// label, 1 - alpha otherwise.
inline double per_sample_alpha(const RealVec& class_probs, std::size_t label, double alpha) {
  std::size_t arg = 0;
  for (std::size_t c = 1; c < class_probs.size(); ++c)
    if (class_probs[c] > class_probs[arg]) arg = c;
  return arg == label ? alpha : 1.0 - alpha;
}

struct LossConfig {
  std::vector<FocalConfig> focal;  // one entry per active task
  bool include_multi = true;
  double multi_epsilon = MULTI_EPS;

  FocalConfig task_focal(std::size_t t) const {
    if (focal.empty()) return FocalConfig{};
    return focal[std::min(t, focal.size() - 1)];
  }
};

struct LossBreakdown {
  std::vector<double> focal_per_task;
  std::vector<double> residual_sq_sums;  // sum over samples and classes of (onehot - p)^2
  std::vector<double> sigma_sq;          // residual_sq_sums / batch size, diagnostic only
  double multi = 0.0;                    // 0 when the multi-objective term is disabled
  double total = 0.0;
};

// Combined objective over a batch: the multi-objective term plus the sum of
// per-task focal losses. probs[t][i] holds the class probabilities of sample
// i under task t; labels[t][i] the true class index.
inline LossBreakdown combined_loss(const std::vector<std::vector<RealVec>>& probs,
                                   const std::vector<std::vector<std::size_t>>& labels,
                                   const LossConfig& cfg) {
  if (probs.size() != labels.size())
    throw DimensionError("combined_loss: task count mismatch between probs and labels");
  if (probs.empty()) throw DimensionError("combined_loss: no tasks");
  const std::size_t n_tasks = probs.size();
  LossBreakdown out;
  out.focal_per_task.resize(n_tasks, 0.0);
  out.residual_sq_sums.resize(n_tasks, 0.0);
  out.sigma_sq.resize(n_tasks, 0.0);

  for (std::size_t t = 0; t < n_tasks; ++t) {
    if (probs[t].size() != labels[t].size())
      throw DimensionError("combined_loss: sample count mismatch in task " + std::to_string(t));
    const FocalConfig fc = cfg.task_focal(t);
    validate_focal_config(fc);
    const std::size_t n = probs[t].size();
    std::vector<double> p_correct(n), alphas(n);
    for (std::size_t i = 0; i < n; ++i) {
      const RealVec& p = probs[t][i];
      if (labels[t][i] >= p.size())
        throw DataError("combined_loss: label index " + std::to_string(labels[t][i]) +
                        " out of range for task " + std::to_string(t));
      p_correct[i] = p[labels[t][i]];
      alphas[i] = per_sample_alpha(p, labels[t][i], fc.alpha);
      for (std::size_t c = 0; c < p.size(); ++c) {
        const double r = (c == labels[t][i] ? 1.0 : 0.0) - p[c];
        out.residual_sq_sums[t] += r * r;
      }
    }
    out.focal_per_task[t] = focal_loss(RealVec(p_correct), fc, RealVec(alphas));
    out.sigma_sq[t] = n > 0 ? out.residual_sq_sums[t] / static_cast<double>(n) : 0.0;
  }

  out.multi = cfg.include_multi ? multi_objective_loss(out.residual_sq_sums, cfg.multi_epsilon)
                                : 0.0;
  out.total = out.multi;
  for (double f : out.focal_per_task) out.total += f;
  return out;
}

}  // namespace mmfuse
