#pragma once

// Core data containers. Orientation is fixed throughout the library:
// panel rows are entities/variables, columns are time points.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "qff/common.hpp"

namespace qff {

using BoolMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// An n x T observation matrix with entity/time labels and a missingness
/// mask (true = observed). Treated as immutable once built.
struct Panel {
  Eigen::MatrixXd values;                // n x T
  std::vector<std::string> entity_ids;   // n labels
  std::vector<std::int64_t> time_index;  // T strictly increasing ticks
  BoolMask mask;                         // n x T, true = observed

  Eigen::Index n() const { return values.rows(); }
  Eigen::Index T() const { return values.cols(); }

  bool complete() const { return mask.all(); }

  std::size_t missing_count() const {
    return static_cast<std::size_t>(mask.size() - mask.count());
  }

  void validate() const {
    require_data(values.rows() == static_cast<Eigen::Index>(entity_ids.size()),
                 "Panel: entity_ids length does not match row count");
    require_data(values.cols() == static_cast<Eigen::Index>(time_index.size()),
                 "Panel: time_index length does not match column count");
    require_data(mask.rows() == values.rows() && mask.cols() == values.cols(),
                 "Panel: mask dimensions do not match values");
    for (std::size_t t = 1; t < time_index.size(); ++t) {
      require_data(time_index[t] > time_index[t - 1], "Panel: time_index must be strictly increasing");
    }
    for (Eigen::Index i = 0; i < values.rows(); ++i) {
      for (Eigen::Index t = 0; t < values.cols(); ++t) {
        if (mask(i, t)) {
          require_data(std::isfinite(values(i, t)), "Panel: observed entry is not finite");
        }
      }
    }
  }

  /// Builds a complete panel over the given matrix with default labels
  /// s000..s(n-1) and ticks 0..T-1.
  static Panel from_matrix(Eigen::MatrixXd m) {
    Panel p;
    p.values = std::move(m);
    p.entity_ids.reserve(static_cast<std::size_t>(p.values.rows()));
    for (Eigen::Index i = 0; i < p.values.rows(); ++i) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "s%03lld", static_cast<long long>(i));
      p.entity_ids.emplace_back(buf);
    }
    p.time_index.resize(static_cast<std::size_t>(p.values.cols()));
    for (Eigen::Index t = 0; t < p.values.cols(); ++t) p.time_index[static_cast<std::size_t>(t)] = t;
    p.mask = BoolMask::Constant(p.values.rows(), p.values.cols(), true);
    p.validate();
    return p;
  }
};

/// A scalar series on a tick grid; the forecasting target.
struct SeriesWindow {
  Eigen::VectorXd values;
  std::vector<std::int64_t> time_index;

  Eigen::Index size() const { return values.size(); }

  void validate() const {
    require_data(values.size() >= 2, "SeriesWindow: need at least 2 observations");
    require_data(values.size() == static_cast<Eigen::Index>(time_index.size()),
                 "SeriesWindow: time_index length does not match values");
    for (std::size_t t = 1; t < time_index.size(); ++t) {
      require_data(time_index[t] > time_index[t - 1],
                   "SeriesWindow: time_index must be strictly increasing");
    }
    for (Eigen::Index t = 0; t < values.size(); ++t) {
      require_data(std::isfinite(values[t]), "SeriesWindow: value is not finite");
    }
  }

  static SeriesWindow from_vector(Eigen::VectorXd v) {
    SeriesWindow w;
    w.values = std::move(v);
    w.time_index.resize(static_cast<std::size_t>(w.values.size()));
    for (Eigen::Index t = 0; t < w.values.size(); ++t) w.time_index[static_cast<std::size_t>(t)] = t;
    w.validate();
    return w;
  }
};

/// An ordered grid of quantile levels 0 < tau_1 < ... < tau_m < 1.
struct QuantileGrid {
  std::vector<double> levels;

  QuantileGrid() = default;
  explicit QuantileGrid(std::vector<double> lv) : levels(std::move(lv)) { validate(); }

  std::size_t size() const { return levels.size(); }

  void validate() const {
    require_data(!levels.empty(), "QuantileGrid: need at least one level");
    double prev = 0.0;
    for (double tau : levels) {
      require_data(tau > prev && tau < 1.0, "QuantileGrid: levels must be strictly increasing in (0,1)");
      prev = tau;
    }
  }

  /// The grid used throughout the experiments: (0.1, 0.3, 0.5, 0.7, 0.9).
  static QuantileGrid standard() { return QuantileGrid({0.1, 0.3, 0.5, 0.7, 0.9}); }
};

/// Subtracts each row's mean; returns the centered panel and the means for
/// back-transformation. Requires a complete panel.
inline std::pair<Panel, Eigen::VectorXd> center_rows(const Panel& panel) {
  require_data(panel.complete(), "center_rows: panel has missing entries");
  Panel out = panel;
  Eigen::VectorXd means = panel.values.rowwise().mean();
  out.values.colwise() -= means;
  return {std::move(out), std::move(means)};
}

/// Optional row standardization (off by default everywhere): divides each
/// centered row by its sample standard deviation. Rows with near-zero
/// variance are left unscaled.
inline std::pair<Panel, Eigen::VectorXd> standardize_rows(const Panel& centered) {
  require_data(centered.complete(), "standardize_rows: panel has missing entries");
  Panel out = centered;
  const auto T = static_cast<double>(centered.T());
  Eigen::VectorXd sds(centered.n());
  for (Eigen::Index i = 0; i < centered.n(); ++i) {
    const double ss = centered.values.row(i).squaredNorm();
    const double sd = std::sqrt(ss / std::max(1.0, T - 1.0));
    sds[i] = sd;
    if (sd > 1e-12) out.values.row(i) /= sd;
  }
  return {std::move(out), std::move(sds)};
}

}  // namespace qff
