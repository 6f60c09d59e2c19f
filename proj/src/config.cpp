#include "cosync/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace cosync {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

KeyValues parse_key_values(const std::string& text, const std::string& origin) {
    KeyValues out;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(line, origin + ":" + std::to_string(line_no) + ": expected key=value, got '" + line + "'");
        }
        std::string key = trim(line.substr(0, eq));
        if (key.empty()) throw ConfigError("", origin + ":" + std::to_string(line_no) + ": empty key");
        if (out.count(key) != 0) throw ConfigError(key, origin + ": duplicate key '" + key + "'");
        out.emplace(std::move(key), trim(line.substr(eq + 1)));
    }
    return out;
}

KeyValues read_key_values(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path.string(), "cannot read config file: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_key_values(ss.str(), path.string());
}

std::string format_key_values(const KeyValues& values) {
    std::string out;
    for (const auto& [k, v] : values) out += k + "=" + v + "\n";
    return out;
}

void write_key_values(const std::filesystem::path& path, const KeyValues& values) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << format_key_values(values);
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

const std::string* KeyValueReader::find(const std::string& key) {
    auto it = values_.find(key);
    if (it == values_.end()) return nullptr;
    consumed_.insert(key);
    return &it->second;
}

int KeyValueReader::get_int(const std::string& key, int fallback) {
    return static_cast<int>(get_int64(key, fallback));
}

long long KeyValueReader::get_int64(const std::string& key, long long fallback) {
    const std::string* v = find(key);
    if (v == nullptr) return fallback;
    long long out = 0;
    auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc() || ptr != v->data() + v->size()) {
        throw ConfigError(key, "config key '" + key + "': expected integer, got '" + *v + "'");
    }
    return out;
}

double KeyValueReader::get_double(const std::string& key, double fallback) {
    const std::string* v = find(key);
    if (v == nullptr) return fallback;
    char* end = nullptr;
    const double out = std::strtod(v->c_str(), &end);
    if (v->empty() || end != v->c_str() + v->size()) {
        throw ConfigError(key, "config key '" + key + "': expected number, got '" + *v + "'");
    }
    return out;
}

bool KeyValueReader::get_bool(const std::string& key, bool fallback) {
    const std::string* v = find(key);
    if (v == nullptr) return fallback;
    if (*v == "1" || *v == "true" || *v == "yes") return true;
    if (*v == "0" || *v == "false" || *v == "no") return false;
    throw ConfigError(key, "config key '" + key + "': expected boolean, got '" + *v + "'");
}

std::string KeyValueReader::get_string(const std::string& key, const std::string& fallback) {
    const std::string* v = find(key);
    return v == nullptr ? fallback : *v;
}

void KeyValueReader::reject_unknown() const {
    for (const auto& [k, v] : values_) {
        if (consumed_.count(k) == 0) throw ConfigError(k, "unknown config key '" + k + "'");
    }
}

}  // namespace cosync
