#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssum/common.hpp"

namespace ssum {

inline u64 fnv1a64(std::string_view bytes) {
    u64 h = 0xCBF29CE484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

inline std::string hex16(u64 v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[i] = digits[v & 0xF];
        v >>= 4;
    }
    return s;
}

// Append-only JSON-lines metrics log. Records are deterministic (no
// timestamps); wall-clock timings go to a separate sidecar so identical runs
// produce identical metrics files.
class MetricsWriter {
  public:
    MetricsWriter() = default;

    explicit MetricsWriter(const std::string& path) : path_(path) {
        out_.open(path, std::ios::trunc);
        if (!out_) throw IoError("cannot open metrics file: " + path);
    }

    void record(const nlohmann::ordered_json& j) {
        last_step_check(j);
        if (out_.is_open()) {
            out_ << j.dump() << '\n';
            out_.flush();
        }
        records_.push_back(j);
    }

    const std::vector<nlohmann::ordered_json>& records() const { return records_; }
    const std::string& path() const { return path_; }

  private:
    void last_step_check(const nlohmann::ordered_json& j) {
        if (!j.contains("step")) return;
        const long long s = j["step"].get<long long>();
        if (s < last_step_) throw Error("metrics steps must be monotone");
        last_step_ = s;
    }

    std::string path_;
    std::ofstream out_;
    std::vector<nlohmann::ordered_json> records_;
    long long last_step_ = -1;
};

}  // namespace ssum
