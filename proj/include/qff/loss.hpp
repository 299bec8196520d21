#pragma once

// Check loss and its Huber-smoothed relative. The smoothed variant applies
// a symmetric quadratic of half-width gamma to the residual before the
// asymmetric tau-weighting, so it is continuously differentiable and agrees
// with the check loss up to gamma/2 outside the smoothing band.

#include <algorithm>
#include <cmath>

#include <Eigen/Core>

#include "qff/common.hpp"

namespace qff {

inline void require_level(double tau, const char* where) {
  require(tau > 0.0 && tau < 1.0, std::string(where) + ": quantile level must be in (0,1)");
}

/// rho_tau(u) = u * (tau - 1{u<0}). Nonnegative, zero iff u = 0.
inline double check_loss(double u, double tau) {
  require_level(tau, "check_loss");
  return u * (tau - (u < 0.0 ? 1.0 : 0.0));
}

/// Smoothed check loss: asymmetric weight times the Huber function of u.
inline double huber_check_loss(double u, double tau, double gamma) {
  require_level(tau, "huber_check_loss");
  require(gamma > 0.0, "huber_check_loss: gamma must be positive");
  const double w = u >= 0.0 ? tau : 1.0 - tau;
  const double a = std::abs(u);
  const double h = a <= gamma ? u * u / (2.0 * gamma) : a - 0.5 * gamma;
  return w * h;
}

/// d/du of huber_check_loss; exists and is finite everywhere (0 at u = 0).
inline double huber_check_grad(double u, double tau, double gamma) {
  require_level(tau, "huber_check_grad");
  require(gamma > 0.0, "huber_check_grad: gamma must be positive");
  const double w = u >= 0.0 ? tau : 1.0 - tau;
  return w * std::clamp(u / gamma, -1.0, 1.0);
}

/// Mean check loss of a residual vector.
inline double mean_check_loss(const Eigen::VectorXd& residuals, double tau) {
  require_level(tau, "mean_check_loss");
  double s = 0.0;
  for (Eigen::Index i = 0; i < residuals.size(); ++i) {
    const double u = residuals[i];
    s += u * (tau - (u < 0.0 ? 1.0 : 0.0));
  }
  return residuals.size() > 0 ? s / static_cast<double>(residuals.size()) : 0.0;
}

/// Mean smoothed check loss of a residual vector.
inline double mean_huber_check_loss(const Eigen::VectorXd& residuals, double tau, double gamma) {
  require_level(tau, "mean_huber_check_loss");
  require(gamma > 0.0, "mean_huber_check_loss: gamma must be positive");
  double s = 0.0;
  for (Eigen::Index i = 0; i < residuals.size(); ++i) {
    const double u = residuals[i];
    const double w = u >= 0.0 ? tau : 1.0 - tau;
    const double a = std::abs(u);
    s += w * (a <= gamma ? u * u / (2.0 * gamma) : a - 0.5 * gamma);
  }
  return residuals.size() > 0 ? s / static_cast<double>(residuals.size()) : 0.0;
}

}  // namespace qff
