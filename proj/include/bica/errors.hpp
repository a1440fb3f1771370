#pragma once

#include <stdexcept>
#include <string>

namespace bica {

// Error categories map onto CLI exit codes (see tools/bica_cli.cpp):
// validation_error -> 2, numeric_error -> 3, io_error -> 4.
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct validation_error : error {
  using error::error;
};

struct numeric_error : error {
  using error::error;
};

struct io_error : error {
  using error::error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw validation_error(msg);
}

}  // namespace bica
