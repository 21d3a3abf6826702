#pragma once

#include "covcast/core.hpp"

#include <memory>
#include <string>

namespace covcast {

/// Common signature for every covariance model. `history` holds return rows
/// [0, t] and nothing after; the result forecasts the covariance of t+1..t+F.
class Forecaster {
 public:
  virtual ~Forecaster() = default;

  virtual std::string id() const = 0;

  /// Rows of history required before the first forecast.
  virtual Index min_history() const = 0;

  virtual Matrix forecast(const Eigen::Ref<const Matrix>& history) = 0;
};

using ForecasterPtr = std::unique_ptr<Forecaster>;

}  // namespace covcast
