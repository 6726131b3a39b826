#pragma once

#include <map>
#include <string>
#include <vector>

namespace dynpatch {

// INI-style configuration: one [section] per module, `key = value` lines,
// '#' comments. Sections and keys keep insertion order when serialized.
class Config {
public:
    static Config parse(const std::string& text);
    static Config load(const std::string& path);

    void save(const std::string& path) const;
    std::string serialize() const;

    bool has(const std::string& section, const std::string& key) const;

    std::string get_str(const std::string& section, const std::string& key) const;
    std::string get_str(const std::string& section, const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& section, const std::string& key) const;
    double get_double(const std::string& section, const std::string& key, double fallback) const;
    int64_t get_int(const std::string& section, const std::string& key) const;
    int64_t get_int(const std::string& section, const std::string& key, int64_t fallback) const;
    bool get_bool(const std::string& section, const std::string& key) const;
    bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
    // Comma-separated list.
    std::vector<std::string> get_list(const std::string& section, const std::string& key) const;

    void set(const std::string& section, const std::string& key, const std::string& value);
    void set(const std::string& section, const std::string& key, double value);
    void set(const std::string& section, const std::string& key, int64_t value);
    void set(const std::string& section, const std::string& key, bool value);

    uint64_t content_hash() const;

private:
    struct Section {
        std::string name;
        std::vector<std::pair<std::string, std::string>> entries;
    };
    std::vector<Section> sections_;

    const std::string* find(const std::string& section, const std::string& key) const;
    Section& section(const std::string& name);
};

}  // namespace dynpatch
