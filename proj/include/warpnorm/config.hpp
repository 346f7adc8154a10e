#pragma once

#include <map>
#include <optional>
#include <string>

namespace warpnorm {

// Plain-text key=value configuration. Lines starting with '#' and blank
// lines are ignored. Unknown keys are the caller's problem: use the typed
// getters and call `reject_unknown` with the consumed set when strictness
// is wanted.
class KeyValueConfig {
public:
    static KeyValueConfig from_file(const std::string& path);  // config_error if unreadable
    static KeyValueConfig from_string(const std::string& text);

    bool has(const std::string& key) const;
    std::string get_str(const std::string& key, const std::string& def) const;
    double get_double(const std::string& key, double def) const;
    long get_long(const std::string& key, long def) const;
    bool get_bool(const std::string& key, bool def) const;

    const std::map<std::string, std::string>& entries() const { return kv_; }
    void set(const std::string& key, const std::string& value) { kv_[key] = value; }
    std::string to_string() const;

private:
    std::map<std::string, std::string> kv_;
};

inline constexpr const char* kVersionString = "warpnorm-0.1.0";

} // namespace warpnorm
