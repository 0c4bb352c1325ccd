#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace raretok {

// Bad or inconsistent input data (files, manifests, degenerate statistics).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller broke a precondition of an operation.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

}  // namespace detail

template <typename... Args>
[[noreturn]] void fail(Args&&... args) {
  throw Error(detail::concat(std::forward<Args>(args)...));
}

template <typename... Args>
void require(bool cond, Args&&... args) {
  if (!cond) {
    throw ContractViolation(detail::concat(std::forward<Args>(args)...));
  }
}

}  // namespace raretok
