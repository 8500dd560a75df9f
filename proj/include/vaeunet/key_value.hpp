#pragma once

// Flat `key = value` text used by config files, checkpoints and meta files.
// '#' starts a comment; blank lines are ignored; later keys override earlier ones.

#include <map>
#include <string>
#include <vector>

namespace vaeunet::kv {

std::map<std::string, std::string> parse(const std::string& text);
std::map<std::string, std::string> read_file(const std::string& path);

int to_int(const std::string& key, const std::string& value);
double to_double(const std::string& key, const std::string& value);
bool to_bool(const std::string& key, const std::string& value);
/// Comma separated list, e.g. "16, 32, 64".
std::vector<int> to_int_list(const std::string& key, const std::string& value);
std::vector<double> to_double_list(const std::string& key, const std::string& value);

/// Shortest text that parses back to exactly `v`.
std::string format_double(double v);

}  // namespace vaeunet::kv
