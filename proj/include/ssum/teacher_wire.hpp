#pragma once

#include <cstring>
#include <string>

#include <json.hpp>

#include "ssum/teacher.hpp"

namespace ssum {

// Wire protocol: every message is one frame — u32 little-endian payload
// length followed by a UTF-8 JSON payload.
//   request :  {"v":1,"type":"score","transcript":[...],"query":[...],
//               "generated":[...],"top_k":K}
//   response:  {"v":1,"type":"dists","dists":[[[token,prob],...],...],
//               "tail":[t0,...]}
//   error   :  {"v":1,"type":"error","code":...,"msg":...}
inline constexpr u32 kWireVersion = 1;
inline constexpr u32 kMaxFrameBytes = 16u << 20;

namespace wire {

using ojson = nlohmann::ordered_json;

inline std::string encode_frame(const std::string& payload) {
    if (payload.size() > kMaxFrameBytes) throw ProtocolError("frame exceeds 16 MiB");
    std::string out;
    const u32 len = static_cast<u32>(payload.size());
    char hdr[4];
    std::memcpy(hdr, &len, 4);
    out.append(hdr, 4);
    out += payload;
    return out;
}

inline std::string encode_request(const TeacherRequest& req) {
    ojson j;
    j["v"] = kWireVersion;
    j["type"] = "score";
    j["transcript"] = req.transcript;
    j["query"] = req.query;
    j["generated"] = req.generated;
    j["top_k"] = req.top_k;
    return j.dump();
}

inline std::string encode_response(const TeacherResponse& resp) {
    ojson j;
    j["v"] = kWireVersion;
    j["type"] = "dists";
    ojson dists = ojson::array();
    ojson tails = ojson::array();
    for (const TopKDist& d : resp.dists) {
        ojson pos = ojson::array();
        for (const auto& [t, p] : d.entries) pos.push_back(ojson::array({t, p}));
        dists.push_back(std::move(pos));
        tails.push_back(d.tail_mass);
    }
    j["dists"] = std::move(dists);
    j["tail"] = std::move(tails);
    return j.dump();
}

inline std::string encode_error(const std::string& code, const std::string& msg) {
    ojson j;
    j["v"] = kWireVersion;
    j["type"] = "error";
    j["code"] = code;
    j["msg"] = msg;
    return j.dump();
}

inline ojson parse_payload(const std::string& payload) {
    ojson j;
    try {
        j = ojson::parse(payload);
    } catch (const nlohmann::json::exception& e) {
        throw ProtocolError(std::string("unparseable payload: ") + e.what());
    }
    if (!j.is_object() || !j.contains("v") || !j.contains("type"))
        throw ProtocolError("payload missing envelope fields");
    if (j["v"].get<u32>() != kWireVersion)
        throw ProtocolVersionError("unsupported protocol version");
    return j;
}

inline TeacherRequest decode_request(const std::string& payload) {
    const ojson j = parse_payload(payload);
    if (j["type"].get<std::string>() != "score") throw ProtocolError("expected score request");
    try {
        TeacherRequest req;
        req.transcript = j.at("transcript").get<TokenSeq>();
        req.query = j.at("query").get<TokenSeq>();
        req.generated = j.at("generated").get<TokenSeq>();
        req.top_k = j.at("top_k").get<int>();
        return req;
    } catch (const nlohmann::json::exception& e) {
        throw ProtocolError(std::string("malformed score request: ") + e.what());
    }
}

// Decodes a server reply; error frames surface as RemoteError.
inline TeacherResponse decode_response(const std::string& payload) {
    const ojson j = parse_payload(payload);
    const std::string type = j["type"].get<std::string>();
    if (type == "error")
        throw RemoteError(j.value("code", "unknown"), j.value("msg", "remote error"));
    if (type != "dists") throw ProtocolError("expected dists response");
    try {
        TeacherResponse resp;
        const auto& dists = j.at("dists");
        const auto& tails = j.at("tail");
        if (dists.size() != tails.size()) throw ProtocolError("dists/tail length mismatch");
        for (std::size_t i = 0; i < dists.size(); ++i) {
            TopKDist d;
            for (const auto& e : dists[i])
                d.entries.emplace_back(e.at(0).get<Token>(), e.at(1).get<double>());
            d.tail_mass = tails[i].get<double>();
            resp.dists.push_back(std::move(d));
        }
        return resp;
    } catch (const nlohmann::json::exception& e) {
        throw ProtocolError(std::string("malformed dists response: ") + e.what());
    }
}

}  // namespace wire
}  // namespace ssum
