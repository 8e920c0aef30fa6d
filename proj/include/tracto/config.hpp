#pragma once

#include <cctype>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tracto/common.hpp"

namespace tracto {

// One `key = value` assignment from a config file, in file order.
using ConfigEntries = std::vector<std::pair<std::string, std::string>>;

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

} // namespace detail

// Structured text config: one dotted `key = value` per line, `#` comments,
// blank lines ignored.
inline ConfigEntries parse_config_text(std::istream& in, const std::string& origin) {
    ConfigEntries entries;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::string body = detail::trim(line);
        if (body.empty()) continue;
        std::size_t eq = body.find('=');
        if (eq == std::string::npos)
            throw FormatError(origin + ":" + std::to_string(line_no) +
                              ": expected `key = value`");
        std::string key = detail::trim(body.substr(0, eq));
        std::string value = detail::trim(body.substr(eq + 1));
        if (key.empty() || value.empty())
            throw FormatError(origin + ":" + std::to_string(line_no) +
                              ": empty key or value");
        entries.emplace_back(std::move(key), std::move(value));
    }
    return entries;
}

inline ConfigEntries parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open " + path);
    return parse_config_text(in, path);
}

// strict scalar parsers: the whole token must be consumed
inline double config_double(const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    double v = 0.0;
    try {
        v = std::stod(value, &pos);
    } catch (const std::exception&) {
        throw FormatError("config: key '" + key + "' expects a number, got '" + value + "'");
    }
    if (pos != value.size())
        throw FormatError("config: key '" + key + "' expects a number, got '" + value + "'");
    return v;
}

inline long long config_int(const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    long long v = 0;
    try {
        v = std::stoll(value, &pos);
    } catch (const std::exception&) {
        throw FormatError("config: key '" + key + "' expects an integer, got '" + value + "'");
    }
    if (pos != value.size())
        throw FormatError("config: key '" + key + "' expects an integer, got '" + value + "'");
    return v;
}

inline bool config_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw FormatError("config: key '" + key + "' expects true/false, got '" + value + "'");
}

} // namespace tracto
