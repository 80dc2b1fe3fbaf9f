#ifndef TRILEVEL_ERRORS_HPP
#define TRILEVEL_ERRORS_HPP

#include <cstddef>
#include <stdexcept>
#include <string>

namespace trilevel {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DegenerateMaskError : public std::invalid_argument {
 public:
  DegenerateMaskError(std::size_t row)
      : std::invalid_argument("degenerate mask: row " + std::to_string(row) + " has no unmasked entry"),
        row_(row) {}
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class UnpopulatedGradientError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class SelectorContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class StalenessError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class AccountingError : public std::logic_error {
 public:
  AccountingError(const std::string& what, std::size_t layer) : std::logic_error(what), layer_(layer) {}
  /// 0 = patch embedding, 1..depth = encoder layers, depth+1 = head.
  std::size_t layer() const noexcept { return layer_; }

 private:
  std::size_t layer_;
};

class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class IncompatibilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::size_t step) : std::runtime_error(what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace trilevel

#endif  // TRILEVEL_ERRORS_HPP
