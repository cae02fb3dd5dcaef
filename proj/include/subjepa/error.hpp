#pragma once

#include <stdexcept>
#include <string>

namespace subjepa {

/// Precondition or shape violation by the caller.
class ContractError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// QR hit a (numerically) zero pivot; the caller should resample its input.
class RankDeficientError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// A loss, latent or statistic became NaN/Inf.
class NonFiniteError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Filesystem or format problems in datasets, checkpoints, configs.
class IoError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractError(what);
}

} // namespace subjepa
