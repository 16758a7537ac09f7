#pragma once

#include <map>
#include <string>
#include <vector>

#include "sdseg/errors.hpp"

namespace sdseg {

/// `key = value` run configuration with `#` comments. Keys are namespaced
/// (data.*, arch.*, train.*, infer.*, sweep.*). Unknown keys are hard errors
/// so typos never silently fall back to defaults.
class Config {
public:
    Config() = default;
    static Config parse_file(const std::string& path);
    static Config parse_string(const std::string& text, const std::string& origin = "<string>");

    bool has(const std::string& key) const;
    std::string get_string(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    int get_int(const std::string& key, int fallback) const;
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<double> get_double_list(const std::string& key,
                                        const std::vector<double>& fallback) const;
    std::vector<int> get_int_list(const std::string& key, const std::vector<int>& fallback) const;
    std::vector<std::string> get_string_list(const std::string& key,
                                             const std::vector<std::string>& fallback) const;

    /// Throws ConfigError (with the line number) for any key not in `known`.
    void require_known(const std::vector<std::string>& known) const;

    struct Entry {
        std::string value;
        int line;
    };
    const std::map<std::string, Entry>& entries() const { return entries_; }

private:
    const Entry* find(const std::string& key) const;
    [[noreturn]] void bad_value(const std::string& key, const char* type) const;

    std::map<std::string, Entry> entries_;
    std::string origin_;
};

}  // namespace sdseg
