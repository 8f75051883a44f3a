#pragma once

#include <ostream>
#include <span>
#include <string>

#include <json.hpp>

#include "ssum/rollout.hpp"

namespace ssum {

// Debug dump, one JSON object per line.
inline std::string rollout_line(const Rollout& r) {
    nlohmann::ordered_json j;
    j["input_id"] = r.input.doc_id;
    j["seed"] = r.seed;
    j["tokens"] = r.generated;
    j["logprobs"] = r.logprobs;
    j["params_version"] = r.params_version;
    return j.dump();
}

inline void dump_rollouts(std::ostream& os, std::span<const Rollout> rollouts) {
    for (const Rollout& r : rollouts) os << rollout_line(r) << '\n';
}

}  // namespace ssum
