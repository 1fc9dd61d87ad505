#include "bgnn/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace bgnn {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep)) out.push_back(trim(cur));
    if (!s.empty() && s.back() == sep) out.emplace_back();
    return out;
}

namespace {
std::string where(const ConfigSection& s, const std::string& key) {
    return s.name().empty() ? key : "[" + s.name() + "] " + key;
}
}  // namespace

std::string ConfigSection::get(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

std::int64_t ConfigSection::get_int(const std::string& key, std::int64_t fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::int64_t v = 0;
    const auto& s = it->second;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
        throw ConfigError(where(*this, key) + ": expected an integer, got '" + s + "'");
    return v;
}

double ConfigSection::get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const auto& s = it->second;
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(where(*this, key) + ": expected a number, got '" + s + "'");
    }
}

bool ConfigSection::get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const auto& s = it->second;
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw ConfigError(where(*this, key) + ": expected a boolean, got '" + s + "'");
}

void ConfigSection::reject_unknown(const std::set<std::string>& known) const {
    std::string bad;
    for (const auto& [k, v] : values_)
        if (!known.count(k)) bad += (bad.empty() ? "" : ", ") + k;
    if (!bad.empty())
        throw ConfigError("unknown key(s) in " + (name_.empty() ? std::string("top level")
                                                                 : "[" + name_ + "]") +
                          ": " + bad);
}

Config Config::parse(const std::string& text, const std::string& origin) {
    Config cfg;
    std::string current;
    cfg.sections_.emplace(current, ConfigSection(current));
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ParseError(origin + ":" + std::to_string(lineno) + ": unterminated section");
            current = trim(line.substr(1, line.size() - 2));
            cfg.sections_.emplace(current, ConfigSection(current));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ParseError(origin + ":" + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        if (key.empty())
            throw ParseError(origin + ":" + std::to_string(lineno) + ": empty key");
        cfg.sections_[current].set(key, trim(line.substr(eq + 1)));
    }
    return cfg;
}

Config Config::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str(), path);
}

const ConfigSection& Config::section(const std::string& name) const {
    static const ConfigSection empty;
    auto it = sections_.find(name);
    return it == sections_.end() ? empty : it->second;
}

ConfigSection& Config::section_mut(const std::string& name) {
    return sections_.emplace(name, ConfigSection(name)).first->second;
}

void Config::reject_unknown_sections(const std::set<std::string>& known) const {
    std::string bad;
    for (const auto& [name, s] : sections_)
        if (!known.count(name) && !(name.empty() && s.values().empty()))
            bad += (bad.empty() ? "" : ", ") + (name.empty() ? std::string("<top level>") : name);
    if (!bad.empty()) throw ConfigError("unknown config section(s): " + bad);
}

std::string Config::to_text() const {
    std::string out;
    for (const auto& [name, s] : sections_) {
        if (s.values().empty()) continue;
        if (!name.empty()) out += "[" + name + "]\n";
        for (const auto& [k, v] : s.values()) out += k + " = " + v + "\n";
    }
    return out;
}

}  // namespace bgnn
