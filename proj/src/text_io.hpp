#pragma once

#include <cstdlib>
#include <istream>
#include <ostream>
#include <string>

#include "dmac/errors.hpp"
#include "dmac/nn.hpp"

namespace dmac::detail {

// Hexadecimal floats keep checkpoints bit exact; stream extraction does not
// parse them, so values are read as tokens.
inline void write_double(std::ostream& out, double v) {
  const auto flags = out.flags();
  out << std::hexfloat << v;
  out.flags(flags);
}

inline double read_double(std::istream& in) {
  std::string token;
  if (!(in >> token)) throw IoError("truncated checkpoint");
  char* end = nullptr;
  const double v = std::strtod(token.c_str(), &end);
  if (end == token.c_str() || *end != '\0') throw IoError("bad number '" + token + "' in checkpoint");
  return v;
}

inline void expect(std::istream& in, const std::string& tag) {
  std::string got;
  if (!(in >> got) || got != tag) throw IoError("checkpoint: expected '" + tag + "', got '" + got + "'");
}

inline void write_matrix(std::ostream& out, const nn::Matrix& m) {
  out << m.rows() << ' ' << m.cols() << '\n';
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      write_double(out, m(r, c));
      out << (c + 1 == m.cols() ? '\n' : ' ');
    }
}

inline nn::Matrix read_matrix(std::istream& in) {
  Eigen::Index rows = 0, cols = 0;
  if (!(in >> rows >> cols) || rows < 0 || cols < 0) throw IoError("bad matrix header");
  nn::Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = read_double(in);
  return m;
}

}  // namespace dmac::detail
