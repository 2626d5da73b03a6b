#pragma once

#include <stdexcept>
#include <string>

namespace xlkd {

// Violated precondition or invariant at an API boundary.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Malformed input file or record.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite loss or gradient.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace xlkd
