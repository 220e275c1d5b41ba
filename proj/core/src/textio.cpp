#include "textio_internal.hpp"

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <stdexcept>

namespace ipg::detail {

std::string next_line(std::istringstream& in, const char* ctx, const char* what) {
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error(std::string(ctx) + ": truncated before " + what);
  return line;
}

std::string keyed_value(std::istringstream& in, const char* ctx, const std::string& key) {
  const std::string line = next_line(in, ctx, key.c_str());
  if (line.size() < key.size() + 2 || line.compare(0, key.size(), key) != 0 ||
      line[key.size()] != ' ')
    throw std::runtime_error(std::string(ctx) + ": expected '" + key + "' line");
  return line.substr(key.size() + 1);
}

int64_t parse_int(const std::string& text, const char* ctx, const std::string& what) {
  char* end = nullptr;
  errno = 0;
  const long long v = std::strtoll(text.c_str(), &end, 10);
  if (text.empty() || errno != 0 || end != text.c_str() + text.size())
    throw std::runtime_error(std::string(ctx) + ": bad integer in " + what);
  return static_cast<int64_t>(v);
}

double parse_double(const std::string& text, const char* ctx, const std::string& what) {
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (text.empty() || end != text.c_str() + text.size())
    throw std::runtime_error(std::string(ctx) + ": bad number in " + what);
  if (!std::isfinite(v))
    throw std::runtime_error(std::string(ctx) + ": non-finite value in " + what);
  return v;
}

void expect_eof(std::istringstream& in, const char* ctx, const std::string& path) {
  std::string trailing;
  if (std::getline(in, trailing))
    throw std::runtime_error(std::string(ctx) + ": trailing content in " + path);
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace ipg::detail
