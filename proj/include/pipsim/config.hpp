#pragma once

// Flat key=value configuration: UTF-8 text, one pair per line, '#' starts a
// comment, surrounding whitespace is ignored.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace pipsim::cfg {

using KeyValues = std::map<std::string, std::string>;

// Throws ConfigError naming the line for entries without '=' or with an empty key.
KeyValues parse(std::string_view text);
// Missing file -> IoError.
KeyValues read_file(const std::filesystem::path& path);
// "key=value" override strings as given on a command line.
KeyValues parse_overrides(const std::vector<std::string>& items);
// Later layers win.
KeyValues merge(const KeyValues& base, const KeyValues& top);

std::string format(const KeyValues& values);

// Typed conversions; ConfigError names the key on malformed values.
double to_double(const std::string& key, const std::string& value);
std::uint64_t to_u64(const std::string& key, const std::string& value);
bool to_bool(const std::string& key, const std::string& value);
std::vector<std::uint64_t> to_u64_list(const std::string& key, const std::string& value);

std::string from_double(double v);

}  // namespace pipsim::cfg
