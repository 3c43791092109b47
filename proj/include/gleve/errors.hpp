#pragma once

#include <stdexcept>
#include <string>

namespace gleve {

// Error taxonomy mapped to CLI exit codes: config=2, data=3, numeric=4.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Report grammar violations carry the position of the offending token.
struct ParseError : DataError {
  int line;
  int column;
  ParseError(int line_, int col_, const std::string& msg)
      : DataError("line " + std::to_string(line_) + ", col " +
                  std::to_string(col_) + ": " + msg),
        line(line_),
        column(col_) {}
};

}  // namespace gleve
