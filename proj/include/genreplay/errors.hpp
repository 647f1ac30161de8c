#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace genreplay {

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct LookupError : std::runtime_error {
  explicit LookupError(const std::string& msg) : std::runtime_error(msg) {}
};

struct MetricError : std::runtime_error {
  explicit MetricError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Training diverged; message carries step index and loss breakdown.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Per-class quota could not be filled within the rejection budget.
struct BalanceError : std::runtime_error {
  BalanceError(const std::string& msg, std::vector<int> starving_classes)
      : std::runtime_error(msg), starving(std::move(starving_classes)) {}
  std::vector<int> starving;
};

}  // namespace genreplay
