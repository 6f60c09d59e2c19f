#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <stdexcept>
#include <string>

namespace cosync {

/// Raised for malformed or unknown configuration entries; `key()` names the
/// offending entry (or the path, for unreadable files).
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string key, const std::string& message) : std::runtime_error(message), key_(std::move(key)) {}
    const std::string& key() const { return key_; }

private:
    std::string key_;
};

using KeyValues = std::map<std::string, std::string>;

// `key = value` lines; '#' starts a comment; blank lines ignored.
KeyValues parse_key_values(const std::string& text, const std::string& origin = "<text>");
KeyValues read_key_values(const std::filesystem::path& path);
void write_key_values(const std::filesystem::path& path, const KeyValues& values);
std::string format_key_values(const KeyValues& values);

std::string format_double(double v);

/// Typed, consumption-tracking view over a KeyValues map. After reading all
/// known keys, `reject_unknown()` throws for anything left unread.
class KeyValueReader {
public:
    explicit KeyValueReader(KeyValues values) : values_(std::move(values)) {}

    int get_int(const std::string& key, int fallback);
    long long get_int64(const std::string& key, long long fallback);
    double get_double(const std::string& key, double fallback);
    bool get_bool(const std::string& key, bool fallback);
    std::string get_string(const std::string& key, const std::string& fallback);
    bool has(const std::string& key) const { return values_.count(key) != 0; }

    void reject_unknown() const;

private:
    const std::string* find(const std::string& key);

    KeyValues values_;
    std::set<std::string> consumed_;
};

}  // namespace cosync
