#include "stta/text_io.hpp"

#include <algorithm>
#include <cerrno>
#include <climits>
#include <cstdio>
#include <cstdlib>

#include "stta/errors.hpp"

namespace stta::text_io {

void write_real(std::ostream& os, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  os << buf;
}

void write_vector(std::ostream& os, const std::string& key, std::span<const double> values) {
  os << key << ' ' << values.size();
  for (double v : values) {
    os << ' ';
    write_real(os, v);
  }
  os << '\n';
}

std::string read_token(std::istream& is) {
  std::string tok;
  if (!(is >> tok)) throw DataError("unexpected end of checkpoint");
  return tok;
}

void expect(std::istream& is, const std::string& token) {
  const std::string got = read_token(is);
  if (got != token) throw DataError("checkpoint: expected '" + token + "', found '" + got + "'");
}

double read_real(std::istream& is) {
  const std::string tok = read_token(is);
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(tok.c_str(), &end);
  if (end != tok.c_str() + tok.size() || errno == ERANGE) {
    throw DataError("checkpoint: bad real '" + tok + "'");
  }
  return v;
}

std::uint64_t read_uint(std::istream& is) {
  const std::string tok = read_token(is);
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(tok.c_str(), &end, 10);
  if (tok.empty() || tok[0] == '-' || end != tok.c_str() + tok.size() || errno == ERANGE) {
    throw DataError("checkpoint: bad integer '" + tok + "'");
  }
  return v;
}

int read_int(std::istream& is) {
  const std::string tok = read_token(is);
  char* end = nullptr;
  errno = 0;
  const long v = std::strtol(tok.c_str(), &end, 10);
  if (tok.empty() || end != tok.c_str() + tok.size() || errno == ERANGE || v < INT_MIN ||
      v > INT_MAX) {
    throw DataError("checkpoint: bad integer '" + tok + "'");
  }
  return static_cast<int>(v);
}

std::vector<double> read_vector(std::istream& is, const std::string& key) {
  expect(is, key);
  const std::uint64_t n = read_uint(is);
  // Grow as values arrive so a corrupt count cannot force a huge allocation.
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(n, 1u << 16)));
  for (std::uint64_t i = 0; i < n; ++i) out.push_back(read_real(is));
  return out;
}

}  // namespace stta::text_io
