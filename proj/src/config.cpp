#include "sdseg/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace sdseg {

namespace {
std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}
}  // namespace

Config Config::parse_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse_string(ss.str(), path);
}

Config Config::parse_string(const std::string& text, const std::string& origin) {
    Config cfg;
    cfg.origin_ = origin;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const std::string body = trim(line);
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ": expected `key = value`", lineno);
        const std::string key = trim(body.substr(0, eq));
        const std::string value = trim(body.substr(eq + 1));
        if (key.empty()) throw ConfigError(origin + ": empty key", lineno);
        if (cfg.entries_.count(key))
            throw ConfigError(origin + ": duplicate key `" + key + "`", lineno);
        cfg.entries_[key] = {value, lineno};
    }
    return cfg;
}

bool Config::has(const std::string& key) const { return entries_.count(key) > 0; }

const Config::Entry* Config::find(const std::string& key) const {
    const auto it = entries_.find(key);
    return it == entries_.end() ? nullptr : &it->second;
}

void Config::bad_value(const std::string& key, const char* type) const {
    const Entry* e = find(key);
    throw ConfigError(origin_ + ": key `" + key + "` is not a valid " + type, e ? e->line : 0);
}

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
    const Entry* e = find(key);
    return e ? e->value : fallback;
}

double Config::get_double(const std::string& key, double fallback) const {
    const Entry* e = find(key);
    if (!e) return fallback;
    char* end = nullptr;
    const double v = std::strtod(e->value.c_str(), &end);
    if (end == e->value.c_str() || *end != '\0') bad_value(key, "number");
    return v;
}

int Config::get_int(const std::string& key, int fallback) const {
    const Entry* e = find(key);
    if (!e) return fallback;
    char* end = nullptr;
    const long v = std::strtol(e->value.c_str(), &end, 10);
    if (end == e->value.c_str() || *end != '\0') bad_value(key, "integer");
    return static_cast<int>(v);
}

std::uint64_t Config::get_u64(const std::string& key, std::uint64_t fallback) const {
    const Entry* e = find(key);
    if (!e) return fallback;
    char* end = nullptr;
    const unsigned long long v = std::strtoull(e->value.c_str(), &end, 10);
    if (end == e->value.c_str() || *end != '\0') bad_value(key, "unsigned integer");
    return v;
}

bool Config::get_bool(const std::string& key, bool fallback) const {
    const Entry* e = find(key);
    if (!e) return fallback;
    if (e->value == "true" || e->value == "1" || e->value == "yes") return true;
    if (e->value == "false" || e->value == "0" || e->value == "no") return false;
    bad_value(key, "boolean");
}

std::vector<std::string> Config::get_string_list(const std::string& key,
                                                 const std::vector<std::string>& fallback) const {
    const Entry* e = find(key);
    if (!e) return fallback;
    std::vector<std::string> out;
    std::stringstream ss(e->value);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const std::string t = trim(item);
        if (!t.empty()) out.push_back(t);
    }
    if (out.empty()) bad_value(key, "list");
    return out;
}

std::vector<double> Config::get_double_list(const std::string& key,
                                            const std::vector<double>& fallback) const {
    const Entry* e = find(key);
    if (!e) return fallback;
    std::vector<double> out;
    for (const std::string& item : get_string_list(key, {})) {
        char* end = nullptr;
        const double v = std::strtod(item.c_str(), &end);
        if (end == item.c_str() || *end != '\0') bad_value(key, "number list");
        out.push_back(v);
    }
    return out;
}

std::vector<int> Config::get_int_list(const std::string& key,
                                      const std::vector<int>& fallback) const {
    const Entry* e = find(key);
    if (!e) return fallback;
    std::vector<int> out;
    for (const std::string& item : get_string_list(key, {})) {
        char* end = nullptr;
        const long v = std::strtol(item.c_str(), &end, 10);
        if (end == item.c_str() || *end != '\0') bad_value(key, "integer list");
        out.push_back(static_cast<int>(v));
    }
    return out;
}

void Config::require_known(const std::vector<std::string>& known) const {
    for (const auto& [key, entry] : entries_) {
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw ConfigError(origin_ + ": unknown key `" + key + "`", entry.line);
    }
}

}  // namespace sdseg
