#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

// Whitespace-separated token format shared by the checkpoint files. Reals are
// written as hexfloats so that a round trip is bit-exact.
namespace stta::text_io {

void write_real(std::ostream& os, double v);
void write_vector(std::ostream& os, const std::string& key, std::span<const double> values);

std::string read_token(std::istream& is);
void expect(std::istream& is, const std::string& token);
double read_real(std::istream& is);
std::uint64_t read_uint(std::istream& is);
int read_int(std::istream& is);
std::vector<double> read_vector(std::istream& is, const std::string& key);

}  // namespace stta::text_io
