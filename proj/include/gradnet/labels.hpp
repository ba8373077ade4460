#pragma once

#include "gradnet/autodiff.hpp"

namespace gradnet {

/// Sign labels with per-cell weights summing to 1.
struct LabelMap {
  Tensor y;       // HxW of +1/-1
  Tensor weight;  // HxW, nonnegative, sums to 1

  static LabelMap uniform(const Tensor& y) {
    LabelMap lm;
    lm.y = y;
    lm.weight = Tensor(y.dims(), 1.0 / static_cast<double>(y.numel()));
    return lm;
  }
};

/// Disk of +1 cells (Euclidean distance <= radius of the target cell) in a
/// -1 background. Weights are class balanced: positives share 0.5 and
/// negatives share 0.5; a degenerate all-positive map carries full weight.
/// With gaussian_weights the positive mass is bell-shaped around the center
/// instead of flat.
inline LabelMap make_label(int h, int w, int cy, int cx, double radius,
                           bool gaussian_weights = false) {
  if (cy < 0 || cy >= h || cx < 0 || cx >= w)
    throw ConfigError(detail::cat("make_label: target cell (", cy, ",", cx,
                                  ") outside ", h, "x", w, " map"));
  if (radius < 0) throw ConfigError("make_label: radius must be >= 0");
  LabelMap lm;
  lm.y = Tensor({h, w}, -1.0);
  lm.weight = Tensor({h, w});
  int pos = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double d2 = static_cast<double>(y - cy) * (y - cy) +
                        static_cast<double>(x - cx) * (x - cx);
      if (d2 <= radius * radius + 1e-9) {
        lm.y(y, x) = 1.0;
        ++pos;
      }
    }
  const int neg = h * w - pos;
  const double pos_mass = neg == 0 ? 1.0 : (pos == 0 ? 0.0 : 0.5);
  const double neg_mass = 1.0 - pos_mass;
  double gauss_total = 0;
  const double sigma = std::max(radius, 1.0);
  if (gaussian_weights) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (lm.y(y, x) > 0) {
          const double d2 = static_cast<double>(y - cy) * (y - cy) +
                            static_cast<double>(x - cx) * (x - cx);
          gauss_total += std::exp(-d2 / (2 * sigma * sigma));
        }
  }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (lm.y(y, x) > 0) {
        if (gaussian_weights) {
          const double d2 = static_cast<double>(y - cy) * (y - cy) +
                            static_cast<double>(x - cx) * (x - cx);
          lm.weight(y, x) = pos_mass * std::exp(-d2 / (2 * sigma * sigma)) / gauss_total;
        } else {
          lm.weight(y, x) = pos_mass / pos;
        }
      } else {
        lm.weight(y, x) = neg_mass / neg;
      }
    }
  return lm;
}

inline constexpr double kLogitClamp = 50.0;

/// Weighted logistic loss sum_ij w_ij * log(1 + exp(-s_ij * y_ij)), with the
/// logit product clamped to +-50 before the softplus.
inline Var logistic_loss_g(const Var& score, const LabelMap& lm) {
  const Tensor& s = score->val;
  if (!s.same_shape(lm.y))
    throw ShapeError(detail::cat("logistic_loss: score ", s.shape_str(), " vs label ",
                                 lm.y.shape_str()));
  for (int y = 0; y < s.dim(0); ++y)
    for (int x = 0; x < s.dim(1); ++x)
      if (std::isnan(s(y, x)))
        throw NumericError(detail::cat("logistic_loss: score map NaN at (", y, ",", x, ")"));
  Var margin = clamp(neg(mul(score, constant(lm.y))), -kLogitClamp, kLogitClamp);
  return sum_all(mul(softplus(margin), constant(lm.weight)));
}

inline double logistic_loss(const Tensor& score, const LabelMap& lm) {
  return logistic_loss_g(constant(score), lm)->val[0];
}

}  // namespace gradnet
