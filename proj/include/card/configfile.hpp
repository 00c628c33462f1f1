#pragma once

#include "card/common.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace card {

// "key = value" config files. One assignment per line; blank lines and lines
// starting with '#' are ignored. Keys are validated by the consumer so an
// unknown key can be reported by name.
using KvPairs = std::vector<std::pair<std::string, std::string>>;

inline std::string trim(const std::string & s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline KvPairs parse_kv_text(const std::string & text, const std::string & origin) {
    KvPairs out;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw usage_error(origin + ":" + std::to_string(lineno) + ": expected 'key = value', got '" + t + "'");
        std::string k = trim(t.substr(0, eq));
        std::string v = trim(t.substr(eq + 1));
        if (k.empty())
            throw usage_error(origin + ":" + std::to_string(lineno) + ": empty key");
        out.emplace_back(k, v);
    }
    return out;
}

inline KvPairs load_kv_file(const std::string & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw usage_error("cannot open config file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_kv_text(ss.str(), path);
}

// single "key=value" override from the command line
inline std::pair<std::string, std::string> parse_override(const std::string & arg) {
    size_t eq = arg.find('=');
    if (eq == std::string::npos)
        throw usage_error("override '" + arg + "' is not of the form key=value");
    std::string k = trim(arg.substr(0, eq));
    std::string v = trim(arg.substr(eq + 1));
    if (k.empty()) throw usage_error("override '" + arg + "' has an empty key");
    return {k, v};
}

inline std::string serialize_kv(const std::map<std::string, std::string> & kv) {
    std::string out;
    for (const auto & [k, v] : kv) {
        out += k;
        out += " = ";
        out += v;
        out += "\n";
    }
    return out;
}

inline bool parse_bool(const std::string & v, const std::string & key) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw usage_error("key '" + key + "': expected a boolean, got '" + v + "'");
}

inline int64_t parse_int(const std::string & v, const std::string & key) {
    try {
        size_t pos = 0;
        int64_t r = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return r;
    } catch (...) {
        throw usage_error("key '" + key + "': expected an integer, got '" + v + "'");
    }
}

inline double parse_double(const std::string & v, const std::string & key) {
    try {
        size_t pos = 0;
        double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return r;
    } catch (...) {
        throw usage_error("key '" + key + "': expected a number, got '" + v + "'");
    }
}

}  // namespace card
