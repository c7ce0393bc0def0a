#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fnsm {

// Violated precondition of a public operation (bad dimension, empty input,
// out-of-range hyper-parameter).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Malformed input file. `line` is 1-based, 0 when the error is not tied to a line.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// A parameter became NaN/Inf during local training.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(int round, int client, int step)
      : std::runtime_error("non-finite parameter at round " + std::to_string(round) +
                           ", client " + std::to_string(client) + ", step " +
                           std::to_string(step)),
        round_(round),
        client_(client),
        step_(step) {}

  int round() const noexcept { return round_; }
  int client() const noexcept { return client_; }
  int step() const noexcept { return step_; }

 private:
  int round_;
  int client_;
  int step_;
};

inline void require(bool cond, const char* msg) {
  if (!cond) throw ContractViolation(msg);
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractViolation(msg);
}

}  // namespace fnsm
