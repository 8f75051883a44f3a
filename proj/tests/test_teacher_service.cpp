#include <catch2/catch_amalgamated.hpp>

#include <atomic>
#include <thread>

#include "ssum/teacher_service.hpp"
#include "test_util.hpp"

using namespace ssum;
using namespace ssum::testutil;

namespace {

const Vocab kVocab{8, 0, 1, 2, 3};

TeacherRequest random_request(Rng& rng) {
    TeacherRequest req;
    const auto fill = [&](TokenSeq& s, std::size_t n, bool eos) {
        for (std::size_t i = 0; i < n; ++i) s.push_back(4 + static_cast<Token>(rng.below(4)));
        if (eos) s.push_back(kVocab.eos);
    };
    fill(req.transcript, 1 + rng.below(6), true);
    fill(req.query, 1 + rng.below(3), false);
    fill(req.generated, rng.below(6), false);
    req.top_k = 1 + static_cast<int>(rng.below(8));
    return req;
}

bool responses_equal(const TeacherResponse& a, const TeacherResponse& b) {
    if (a.dists.size() != b.dists.size()) return false;
    for (std::size_t i = 0; i < a.dists.size(); ++i) {
        if (a.dists[i].entries != b.dists[i].entries) return false;
        if (a.dists[i].tail_mass != b.dists[i].tail_mass) return false;
    }
    return true;
}

int raw_connect(u16 port) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    REQUIRE(fd >= 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    ::inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr);
    REQUIRE(::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0);
    return fd;
}

}  // namespace

TEST_CASE("wire codec round-trips requests and responses bit-exactly") {
    Rng rng(1);
    for (int i = 0; i < 200; ++i) {
        const TeacherRequest req = random_request(rng);
        const std::string payload = wire::encode_request(req);
        const TeacherRequest back = wire::decode_request(payload);
        REQUIRE(back.transcript == req.transcript);
        REQUIRE(back.query == req.query);
        REQUIRE(back.generated == req.generated);
        REQUIRE(back.top_k == req.top_k);
        // re-encoding the decoded message reproduces the exact bytes
        REQUIRE(wire::encode_request(back) == payload);

        TeacherResponse resp;
        for (std::size_t t = 0; t < req.generated.size(); ++t) {
            Distribution d;
            d.p.assign(kVocab.size, 0.0);
            double total = 0.0;
            for (int z = 0; z < kVocab.size; ++z) total += d.p[z] = 0.01 + rng.uniform();
            for (double& v : d.p) v /= total;
            resp.dists.push_back(truncate_topk(d, req.top_k));
        }
        const std::string rp = wire::encode_response(resp);
        const TeacherResponse rback = wire::decode_response(rp);
        REQUIRE(responses_equal(rback, resp));
        REQUIRE(wire::encode_response(rback) == rp);
    }
}

TEST_CASE("wire error handling: version, type, error frames, frame size") {
    REQUIRE_THROWS_AS(wire::decode_request("{not json"), ProtocolError);
    REQUIRE_THROWS_AS(wire::decode_request(R"({"type":"score"})"), ProtocolError);
    REQUIRE_THROWS_AS(
        wire::decode_request(R"({"v":2,"type":"score","transcript":[],"query":[],"generated":[],"top_k":1})"),
        ProtocolVersionError);
    REQUIRE_THROWS_AS(wire::decode_request(R"({"v":1,"type":"dists"})"), ProtocolError);
    REQUIRE_THROWS_AS(wire::decode_request(R"({"v":1,"type":"score","query":[]})"), ProtocolError);

    try {
        wire::decode_response(wire::encode_error("backend", "boom"));
        FAIL("expected RemoteError");
    } catch (const RemoteError& e) {
        REQUIRE(e.code == "backend");
    }

    REQUIRE_THROWS_AS(wire::encode_frame(std::string(kMaxFrameBytes + 1, 'x')), ProtocolError);
}

TEST_CASE("remote scoring equals in-process scoring field for field") {
    ScriptedTeacher backend(kVocab, {4, 5, 6, kVocab.eos}, 0.01);
    ScriptedTeacher oracle(kVocab, {4, 5, 6, kVocab.eos}, 0.01);
    TeacherServer server(backend);
    server.start("127.0.0.1", 0);
    {
        RemoteTeacher client("127.0.0.1", server.port());
        Rng rng(7);
        for (int i = 0; i < 200; ++i) {
            const TeacherRequest req = random_request(rng);
            REQUIRE(responses_equal(client.score(req), oracle.score(req)));
        }
        // invalid request surfaces as a remote error, connection survives
        TeacherRequest bad = random_request(rng);
        bad.top_k = 99;
        REQUIRE_THROWS_AS(client.score(bad), RemoteError);
        const TeacherRequest again = random_request(rng);
        REQUIRE(responses_equal(client.score(again), oracle.score(again)));
    }
    server.stop();
}

TEST_CASE("malformed frame gets an error reply and the connection recovers") {
    ScriptedTeacher backend(kVocab, {4, 5, kVocab.eos}, 0.01);
    TeacherServer server(backend);
    server.start("127.0.0.1", 0);

    const int fd = raw_connect(server.port());
    net::write_frame(fd, "this is not json");
    std::string reply;
    REQUIRE(net::read_frame(fd, &reply));
    try {
        wire::decode_response(reply);
        FAIL("expected RemoteError");
    } catch (const RemoteError& e) {
        REQUIRE(e.code == "bad_request");
    }

    // the same connection still serves valid requests
    TeacherRequest req;
    req.transcript = {4, 5, kVocab.eos};
    req.query = {6};
    req.generated = {4};
    req.top_k = 4;
    net::write_frame(fd, wire::encode_request(req));
    REQUIRE(net::read_frame(fd, &reply));
    const TeacherResponse resp = wire::decode_response(reply);
    REQUIRE(resp.dists.size() == 1);

    // protocol-version mismatch is reported with its own code
    net::write_frame(fd, R"({"v":7,"type":"score"})");
    REQUIRE(net::read_frame(fd, &reply));
    try {
        wire::decode_response(reply);
        FAIL("expected RemoteError");
    } catch (const RemoteError& e) {
        REQUIRE(e.code == "version");
    }
    ::close(fd);
    server.stop();
}

TEST_CASE("concurrent clients all match the in-process oracle") {
    ScriptedTeacher backend(kVocab, {4, 6, 5, kVocab.eos}, 0.005);
    TeacherServer server(backend);
    server.start("127.0.0.1", 0);

    const int n_clients = 40;
    const int per_client = 5;
    std::atomic<int> mismatches{0};
    std::vector<std::thread> threads;
    for (int c = 0; c < n_clients; ++c) {
        threads.emplace_back([&, c] {
            try {
                ScriptedTeacher oracle(kVocab, {4, 6, 5, kVocab.eos}, 0.005);
                RemoteTeacher client("127.0.0.1", server.port());
                Rng rng(1000 + c);
                for (int i = 0; i < per_client; ++i) {
                    const TeacherRequest req = random_request(rng);
                    if (!responses_equal(client.score(req), oracle.score(req))) ++mismatches;
                }
            } catch (...) {
                ++mismatches;
            }
        });
    }
    for (auto& t : threads) t.join();
    REQUIRE(mismatches == 0);
    server.stop();
}

TEST_CASE("connecting to a dead port raises a connection error") {
    ScriptedTeacher backend(kVocab, {4, kVocab.eos}, 0.01);
    TeacherServer server(backend);
    server.start("127.0.0.1", 0);
    const u16 dead_port = server.port();
    server.stop();
    REQUIRE_THROWS_AS(RemoteTeacher("127.0.0.1", dead_port), ConnectionError);
}
