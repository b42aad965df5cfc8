#include "pipsim/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "pipsim/errors.hpp"

namespace pipsim::cfg {

namespace {

std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(first, last - first + 1));
}

std::pair<std::string, std::string> split_pair(std::string_view line, const std::string& where) {
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
        throw ConfigError(where + ": expected key=value, got '" + trim(line) + "'");
    }
    std::string key = trim(line.substr(0, eq));
    if (key.empty()) {
        throw ConfigError(where + ": empty key");
    }
    return {std::move(key), trim(line.substr(eq + 1))};
}

}  // namespace

KeyValues parse(std::string_view text) {
    KeyValues out;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto nl = text.find('\n', pos);
        std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) {
            line = line.substr(0, hash);
        }
        if (trim(line).empty()) {
            continue;
        }
        auto [k, v] = split_pair(line, "line " + std::to_string(line_no));
        out[k] = v;
    }
    return out;
}

KeyValues read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot read config file " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
        return parse(ss.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ", " + e.what());
    }
}

KeyValues parse_overrides(const std::vector<std::string>& items) {
    KeyValues out;
    for (const std::string& item : items) {
        auto [k, v] = split_pair(item, "override");
        out[k] = v;
    }
    return out;
}

KeyValues merge(const KeyValues& base, const KeyValues& top) {
    KeyValues out = base;
    for (const auto& [k, v] : top) {
        out[k] = v;
    }
    return out;
}

std::string format(const KeyValues& values) {
    std::string out;
    for (const auto& [k, v] : values) {
        out += k + "=" + v + "\n";
    }
    return out;
}

double to_double(const std::string& key, const std::string& value) {
    double v = 0.0;
    const auto* end = value.data() + value.size();
    auto [ptr, ec] = std::from_chars(value.data(), end, v);
    if (ec != std::errc() || ptr != end || value.empty()) {
        throw ConfigError("config key '" + key + "': '" + value + "' is not a number");
    }
    return v;
}

std::uint64_t to_u64(const std::string& key, const std::string& value) {
    std::uint64_t v = 0;
    const auto* end = value.data() + value.size();
    auto [ptr, ec] = std::from_chars(value.data(), end, v);
    if (ec != std::errc() || ptr != end || value.empty()) {
        throw ConfigError("config key '" + key + "': '" + value + "' is not a non-negative integer");
    }
    return v;
}

bool to_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "on" || value == "yes") {
        return true;
    }
    if (value == "false" || value == "0" || value == "off" || value == "no") {
        return false;
    }
    throw ConfigError("config key '" + key + "': '" + value + "' is not a boolean");
}

std::vector<std::uint64_t> to_u64_list(const std::string& key, const std::string& value) {
    std::vector<std::uint64_t> out;
    std::size_t pos = 0;
    while (pos <= value.size()) {
        const auto comma = value.find(',', pos);
        const std::string item =
            trim(std::string_view(value).substr(pos, comma == std::string::npos ? std::string::npos : comma - pos));
        out.push_back(to_u64(key, item));
        if (comma == std::string::npos) {
            break;
        }
        pos = comma + 1;
    }
    return out;
}

std::string from_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

}  // namespace pipsim::cfg
