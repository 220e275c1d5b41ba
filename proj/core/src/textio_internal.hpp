#pragma once

#include <cstdint>
#include <sstream>
#include <string>

namespace ipg::detail {

// Line-oriented strict parsing for the structured-text artifact files. `ctx`
// names the artifact kind in error messages.
std::string next_line(std::istringstream& in, const char* ctx, const char* what);
std::string keyed_value(std::istringstream& in, const char* ctx, const std::string& key);
int64_t parse_int(const std::string& text, const char* ctx, const std::string& what);
double parse_double(const std::string& text, const char* ctx, const std::string& what);
void expect_eof(std::istringstream& in, const char* ctx, const std::string& path);
// Shortest representation that round-trips a double exactly.
std::string format_double(double v);

}  // namespace ipg::detail
