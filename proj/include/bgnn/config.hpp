#pragma once

// Flat key=value configuration with [section] headers.
//
//   # comment
//   [train]
//   epochs = 40
//
// Keys before the first header belong to the unnamed section "". Values are
// trimmed; there is no quoting. Every consumer takes keys out of its section
// and complains about whatever is left, so typos never pass silently.

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "bgnn/error.hpp"

namespace bgnn {

class ConfigSection {
public:
    ConfigSection() = default;
    explicit ConfigSection(std::string name) : name_(std::move(name)) {}

    const std::string& name() const noexcept { return name_; }
    bool has(const std::string& key) const { return values_.count(key) != 0; }
    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    const std::map<std::string, std::string>& values() const noexcept { return values_; }

    std::string get(const std::string& key, const std::string& fallback) const;
    std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;

    /// Throws ConfigError listing every key not in `known`.
    void reject_unknown(const std::set<std::string>& known) const;

private:
    std::string name_;
    std::map<std::string, std::string> values_;
};

class Config {
public:
    static Config parse(const std::string& text, const std::string& origin = "<config>");
    static Config load(const std::string& path);

    /// Empty section when absent.
    const ConfigSection& section(const std::string& name) const;
    ConfigSection& section_mut(const std::string& name);
    bool has_section(const std::string& name) const { return sections_.count(name) != 0; }
    /// Throws ConfigError listing sections not in `known`.
    void reject_unknown_sections(const std::set<std::string>& known) const;

    std::string to_text() const;

private:
    std::map<std::string, ConfigSection> sections_;
};

std::vector<std::string> split(const std::string& s, char sep);
std::string trim(const std::string& s);

}  // namespace bgnn
