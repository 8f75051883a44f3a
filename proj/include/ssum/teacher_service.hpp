#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "ssum/teacher_wire.hpp"

namespace ssum {

namespace net {

// Reads exactly n bytes; false on clean EOF at a frame boundary.
inline bool read_exact(int fd, char* buf, std::size_t n, bool* timed_out = nullptr) {
    std::size_t got = 0;
    while (got < n) {
        const ssize_t r = ::recv(fd, buf + got, n - got, 0);
        if (r > 0) {
            got += static_cast<std::size_t>(r);
            continue;
        }
        if (r == 0) {
            if (got == 0) return false;
            throw TransportError("connection closed mid-frame");
        }
        if (errno == EINTR) continue;
        if (errno == EAGAIN || errno == EWOULDBLOCK) {
            if (timed_out) *timed_out = true;
            throw TimeoutError("read timed out");
        }
        throw TransportError(std::string("recv failed: ") + std::strerror(errno));
    }
    return true;
}

inline void write_all(int fd, const char* buf, std::size_t n) {
    std::size_t sent = 0;
    while (sent < n) {
        const ssize_t r = ::send(fd, buf + sent, n - sent, MSG_NOSIGNAL);
        if (r >= 0) {
            sent += static_cast<std::size_t>(r);
            continue;
        }
        if (errno == EINTR) continue;
        throw TransportError(std::string("send failed: ") + std::strerror(errno));
    }
}

// Returns false on clean EOF before a frame starts.
inline bool read_frame(int fd, std::string* payload) {
    char hdr[4];
    if (!read_exact(fd, hdr, 4)) return false;
    u32 len = 0;
    std::memcpy(&len, hdr, 4);
    if (len > kMaxFrameBytes) throw ProtocolError("incoming frame exceeds 16 MiB");
    payload->resize(len);
    if (len > 0 && !read_exact(fd, payload->data(), len))
        throw TransportError("connection closed mid-frame");
    return true;
}

inline void write_frame(int fd, const std::string& payload) {
    const std::string framed = wire::encode_frame(payload);
    write_all(fd, framed.data(), framed.size());
}

struct Address {
    std::string host;
    u16 port = 0;
};

inline Address parse_address(const std::string& s) {
    const auto colon = s.rfind(':');
    if (colon == std::string::npos) throw ConfigError("address must be HOST:PORT");
    Address a;
    a.host = s.substr(0, colon);
    const int p = std::stoi(s.substr(colon + 1));
    if (p < 0 || p > 65535) throw ConfigError("port out of range");
    a.port = static_cast<u16>(p);
    return a;
}

}  // namespace net

// Blocking TCP server: one thread per connection, requests answered FIFO per
// connection. Application-level failures are reported as error frames and
// the connection stays usable; transport failures end the connection.
class TeacherServer {
  public:
    explicit TeacherServer(TeacherBackend& backend) : backend_(backend) {}

    ~TeacherServer() { stop(); }

    // Binds and starts accepting. Port 0 picks an ephemeral port; the bound
    // port is available from port().
    void start(const std::string& host, u16 port) {
        listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
        if (listen_fd_ < 0) throw TransportError("socket() failed");
        const int one = 1;
        ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_port = htons(port);
        if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
            throw ConfigError("unparseable bind host: " + host);
        if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
            ::close(listen_fd_);
            listen_fd_ = -1;
            throw TransportError(std::string("bind failed: ") + std::strerror(errno));
        }
        if (::listen(listen_fd_, 128) != 0) {
            ::close(listen_fd_);
            listen_fd_ = -1;
            throw TransportError(std::string("listen failed: ") + std::strerror(errno));
        }
        sockaddr_in bound{};
        socklen_t blen = sizeof(bound);
        ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &blen);
        port_ = ntohs(bound.sin_port);
        stopping_ = false;
        accept_thread_ = std::thread([this] { accept_loop(); });
    }

    u16 port() const { return port_; }

    // Stops accepting and drains in-flight requests before returning.
    void stop() {
        if (listen_fd_ < 0 && !accept_thread_.joinable()) return;
        stopping_ = true;
        if (listen_fd_ >= 0) {
            ::shutdown(listen_fd_, SHUT_RDWR);
            ::close(listen_fd_);
            listen_fd_ = -1;
        }
        if (accept_thread_.joinable()) accept_thread_.join();
        std::vector<std::thread> workers;
        {
            std::lock_guard<std::mutex> lk(mu_);
            workers.swap(workers_);
        }
        for (std::thread& t : workers)
            if (t.joinable()) t.join();
    }

  private:
    void accept_loop() {
        for (;;) {
            const int fd = ::accept(listen_fd_, nullptr, nullptr);
            if (fd < 0) {
                if (errno == EINTR) continue;
                return;  // listener closed
            }
            std::lock_guard<std::mutex> lk(mu_);
            if (stopping_) {
                ::close(fd);
                return;
            }
            workers_.emplace_back([this, fd] { serve_connection(fd); });
        }
    }

    void serve_connection(int fd) {
        std::string payload;
        for (;;) {
            // poll so an idle connection notices shutdown
            pollfd pfd{fd, POLLIN, 0};
            const int pr = ::poll(&pfd, 1, 100);
            if (pr == 0) {
                if (stopping_) break;
                continue;
            }
            if (pr < 0) {
                if (errno == EINTR) continue;
                break;
            }
            try {
                if (!net::read_frame(fd, &payload)) break;
            } catch (const Error&) {
                break;  // unrecoverable transport damage
            }
            std::string reply;
            try {
                const TeacherRequest req = wire::decode_request(payload);
                reply = wire::encode_response(backend_.score(req));
            } catch (const ProtocolVersionError& e) {
                reply = wire::encode_error("version", e.what());
            } catch (const ProtocolError& e) {
                reply = wire::encode_error("bad_request", e.what());
            } catch (const Error& e) {
                reply = wire::encode_error("backend", e.what());
            } catch (const std::exception& e) {
                reply = wire::encode_error("internal", e.what());
            }
            try {
                net::write_frame(fd, reply);
            } catch (const Error&) {
                break;
            }
        }
        ::close(fd);
    }

    TeacherBackend& backend_;
    int listen_fd_ = -1;
    u16 port_ = 0;
    std::atomic<bool> stopping_{false};
    std::thread accept_thread_;
    std::mutex mu_;
    std::vector<std::thread> workers_;
};

// Client-side teacher proxy; score() is a synchronous request/response
// exchange on a persistent connection.
class RemoteTeacher : public TeacherBackend {
  public:
    RemoteTeacher(const std::string& host, u16 port, int timeout_ms = 30000) {
        fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
        if (fd_ < 0) throw TransportError("socket() failed");
        timeval tv{timeout_ms / 1000, (timeout_ms % 1000) * 1000};
        ::setsockopt(fd_, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
        ::setsockopt(fd_, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof(tv));
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_port = htons(port);
        if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
            throw ConfigError("unparseable host: " + host);
        if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
            ::close(fd_);
            fd_ = -1;
            throw ConnectionError(std::string("connect failed: ") + std::strerror(errno));
        }
    }

    explicit RemoteTeacher(const std::string& address, int timeout_ms = 30000)
        : RemoteTeacher(net::parse_address(address).host, net::parse_address(address).port,
                        timeout_ms) {}

    ~RemoteTeacher() override {
        if (fd_ >= 0) ::close(fd_);
    }

    RemoteTeacher(const RemoteTeacher&) = delete;
    RemoteTeacher& operator=(const RemoteTeacher&) = delete;

    TeacherResponse score(const TeacherRequest& req) override {
        std::lock_guard<std::mutex> lk(mu_);
        net::write_frame(fd_, wire::encode_request(req));
        std::string payload;
        if (!net::read_frame(fd_, &payload)) throw ConnectionError("server closed connection");
        return wire::decode_response(payload);
    }

  private:
    int fd_ = -1;
    std::mutex mu_;
};

inline std::unique_ptr<TeacherBackend> remote_client(const std::string& address) {
    return std::make_unique<RemoteTeacher>(address);
}

}  // namespace ssum
