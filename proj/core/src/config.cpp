#include "dynpatch/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "dynpatch/common.hpp"

namespace dynpatch {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::string format_double(double v) {
    // shortest round-trip representation keeps configs readable and stable
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    double back = 0;
    std::sscanf(buf, "%lf", &back);
    for (int prec = 1; prec <= 16; ++prec) {
        char t[64];
        std::snprintf(t, sizeof(t), "%.*g", prec, v);
        std::sscanf(t, "%lf", &back);
        if (back == v) return t;
    }
    return buf;
}

}  // namespace

Config Config::parse(const std::string& text) {
    Config cfg;
    std::istringstream in(text);
    std::string line;
    std::string current = "global";
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw ValidationError("config: malformed section at line " + std::to_string(lineno));
            current = trim(t.substr(1, t.size() - 2));
            cfg.section(current);
            continue;
        }
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ValidationError("config: expected key = value at line " + std::to_string(lineno));
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        if (key.empty()) throw ValidationError("config: empty key at line " + std::to_string(lineno));
        cfg.set(current, key, value);
    }
    return cfg;
}

Config Config::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse(text);
}

void Config::save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("config: cannot write " + path);
    out << serialize();
}

std::string Config::serialize() const {
    std::ostringstream out;
    bool first = true;
    for (const auto& sec : sections_) {
        if (!first) out << "\n";
        first = false;
        out << "[" << sec.name << "]\n";
        for (const auto& [k, v] : sec.entries) out << k << " = " << v << "\n";
    }
    return out.str();
}

const std::string* Config::find(const std::string& section, const std::string& key) const {
    for (const auto& sec : sections_) {
        if (sec.name != section) continue;
        for (const auto& [k, v] : sec.entries)
            if (k == key) return &v;
    }
    return nullptr;
}

Config::Section& Config::section(const std::string& name) {
    for (auto& sec : sections_)
        if (sec.name == name) return sec;
    sections_.push_back({name, {}});
    return sections_.back();
}

bool Config::has(const std::string& section, const std::string& key) const {
    return find(section, key) != nullptr;
}

std::string Config::get_str(const std::string& section, const std::string& key) const {
    const std::string* v = find(section, key);
    if (!v) throw ValidationError("config: missing key [" + section + "] " + key);
    return *v;
}

std::string Config::get_str(const std::string& section, const std::string& key,
                            const std::string& fallback) const {
    const std::string* v = find(section, key);
    return v ? *v : fallback;
}

double Config::get_double(const std::string& section, const std::string& key) const {
    std::string s = get_str(section, key);
    try {
        size_t idx = 0;
        double v = std::stod(s, &idx);
        if (idx != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ValidationError("config: [" + section + "] " + key + " is not a number: " + s);
    }
}

double Config::get_double(const std::string& section, const std::string& key, double fallback) const {
    return has(section, key) ? get_double(section, key) : fallback;
}

int64_t Config::get_int(const std::string& section, const std::string& key) const {
    std::string s = get_str(section, key);
    try {
        size_t idx = 0;
        int64_t v = std::stoll(s, &idx);
        if (idx != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ValidationError("config: [" + section + "] " + key + " is not an integer: " + s);
    }
}

int64_t Config::get_int(const std::string& section, const std::string& key, int64_t fallback) const {
    return has(section, key) ? get_int(section, key) : fallback;
}

bool Config::get_bool(const std::string& section, const std::string& key) const {
    std::string s = get_str(section, key);
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw ValidationError("config: [" + section + "] " + key + " is not a boolean: " + s);
}

bool Config::get_bool(const std::string& section, const std::string& key, bool fallback) const {
    return has(section, key) ? get_bool(section, key) : fallback;
}

std::vector<std::string> Config::get_list(const std::string& section, const std::string& key) const {
    std::string s = get_str(section, key);
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, ',')) {
        std::string t = trim(item);
        if (!t.empty()) out.push_back(t);
    }
    return out;
}

void Config::set(const std::string& sec_name, const std::string& key, const std::string& value) {
    Section& sec = section(sec_name);
    for (auto& [k, v] : sec.entries) {
        if (k == key) {
            v = value;
            return;
        }
    }
    sec.entries.emplace_back(key, value);
}

void Config::set(const std::string& section, const std::string& key, double value) {
    set(section, key, format_double(value));
}

void Config::set(const std::string& section, const std::string& key, int64_t value) {
    set(section, key, std::to_string(value));
}

void Config::set(const std::string& section, const std::string& key, bool value) {
    set(section, key, std::string(value ? "true" : "false"));
}

uint64_t Config::content_hash() const { return fnv1a64(serialize()); }

}  // namespace dynpatch
