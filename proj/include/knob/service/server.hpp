#pragma once

#include <chrono>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include "json.hpp"
#include "knob/config.hpp"
#include "knob/errors.hpp"
#include "knob/service/session.hpp"

namespace knob::service {

namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;

class SessionHub;

/// One WebSocket viewer of a session. Frames and acks are queued and written
/// one at a time; a viewer that falls too far behind is disconnected rather
/// than skipping frames.
class StreamConnection : public std::enable_shared_from_this<StreamConnection> {
 public:
  static constexpr std::size_t kMaxBacklog = 4096;

  explicit StreamConnection(tcp::socket&& socket) : ws_(std::move(socket)) {}

  void accept(http::request<http::string_body> req, std::shared_ptr<SessionHub> hub, std::string session_id);

  void send(std::shared_ptr<const std::string> text) {
    if (closing_) return;
    if (queue_.size() >= kMaxBacklog) {
      close(websocket::close_code::try_again_later);
      return;
    }
    queue_.push_back(std::move(text));
    if (queue_.size() == 1) write_next();
  }

  void send(const json& j) { send(std::make_shared<const std::string>(j.dump())); }

  /// Sends a terminal error message, then closes.
  void fail(std::string_view message) {
    send(json{{"type", "error"}, {"terminal", true}, {"message", message}});
    close_after_flush_ = true;
  }

 private:
  void write_next() {
    ws_.text(true);
    ws_.async_write(net::buffer(*queue_.front()), [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) return;
      self->queue_.pop_front();
      if (!self->queue_.empty()) {
        self->write_next();
      } else if (self->close_after_flush_) {
        self->close(websocket::close_code::policy_error);
      }
    });
  }

  void close(websocket::close_code code) {
    if (closing_) return;
    closing_ = true;
    ws_.async_close(code, [self = shared_from_this()](beast::error_code) {});
  }

  void read_next();

  websocket::stream<beast::tcp_stream> ws_;
  beast::flat_buffer buffer_;
  std::deque<std::shared_ptr<const std::string>> queue_;
  std::weak_ptr<SessionHub> hub_;
  std::string session_id_;
  bool closing_ = false;
  bool close_after_flush_ = false;
};

/// Owns every session and its ticker. All members are touched only from the
/// io_context thread.
class SessionHub : public std::enable_shared_from_this<SessionHub> {
 public:
  SessionHub(net::io_context& io, RunConfig defaults) : io_(io), defaults_(std::move(defaults)) {}

  std::string create(const json& request) {
    static std::mt19937_64 seed_source{std::random_device{}()};
    const RunConfig cfg = session_config(request, defaults_, seed_source());
    auto entry = std::make_shared<Entry>(io_, std::make_shared<Session>(new_session_id(), cfg));
    const std::string id = entry->session->id();
    entries_.emplace(id, entry);
    start_ticker(entry);
    return id;
  }

  std::shared_ptr<Session> find(const std::string& id) const {
    auto it = entries_.find(id);
    return it == entries_.end() ? nullptr : it->second->session;
  }

  bool erase(const std::string& id) {
    auto it = entries_.find(id);
    if (it == entries_.end()) return false;
    it->second->closed = true;
    it->second->timer.cancel();
    for (auto& w : it->second->viewers) {
      if (auto v = w.lock()) v->fail("session deleted");
    }
    entries_.erase(it);
    return true;
  }

  bool subscribe(const std::string& id, const std::shared_ptr<StreamConnection>& viewer) {
    auto it = entries_.find(id);
    if (it == entries_.end()) return false;
    it->second->viewers.push_back(viewer);
    return true;
  }

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    for (const auto& [id, e] : entries_) out.push_back(id);
    return out;
  }

  void shutdown() {
    for (auto& [id, e] : entries_) {
      e->closed = true;
      e->timer.cancel();
    }
  }

 private:
  struct Entry {
    Entry(net::io_context& io, std::shared_ptr<Session> s) : session(std::move(s)), timer(io) {}
    std::shared_ptr<Session> session;
    net::steady_timer timer;
    std::vector<std::weak_ptr<StreamConnection>> viewers;
    std::chrono::steady_clock::time_point next_tick;
    bool closed = false;
  };

  static std::chrono::steady_clock::duration period(double rate) {
    return std::chrono::duration_cast<std::chrono::steady_clock::duration>(std::chrono::duration<double>(1.0 / rate));
  }

  void start_ticker(const std::shared_ptr<Entry>& e) {
    e->next_tick = std::chrono::steady_clock::now() + period(e->session->frame_rate());
    arm(e);
  }

  void arm(const std::shared_ptr<Entry>& e) {
    e->timer.expires_at(e->next_tick);
    e->timer.async_wait([this, hub = shared_from_this(), e](beast::error_code ec) {
      if (ec || e->closed) return;
      on_tick(e);
    });
  }

  void on_tick(const std::shared_ptr<Entry>& e) {
    const auto result = e->session->tick();
    if (result.frame) {
      auto text = std::make_shared<const std::string>(to_json(*result.frame).dump());
      std::erase_if(e->viewers, [](const auto& w) { return w.expired(); });
      for (auto& w : e->viewers) {
        if (auto v = w.lock()) v->send(text);
      }
    }
    const auto now = std::chrono::steady_clock::now();
    e->next_tick += period(e->session->frame_rate());
    if (e->next_tick < now) e->next_tick = now;  // do not burst after a stall
    arm(e);
  }

  net::io_context& io_;
  RunConfig defaults_;
  std::map<std::string, std::shared_ptr<Entry>> entries_;
};

inline void StreamConnection::accept(http::request<http::string_body> req, std::shared_ptr<SessionHub> hub,
                                     std::string session_id) {
  hub_ = hub;
  session_id_ = std::move(session_id);
  ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
  ws_.async_accept(req, [self = shared_from_this(), hub](beast::error_code ec) {
    if (ec) return;
    if (!hub->subscribe(self->session_id_, self)) {
      self->fail("unknown session");
      return;
    }
    self->read_next();
  });
}

inline void StreamConnection::read_next() {
  ws_.async_read(buffer_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
    if (ec) return;
    const std::string text = beast::buffers_to_string(self->buffer_.data());
    self->buffer_.consume(self->buffer_.size());
    auto hub = self->hub_.lock();
    auto session = hub ? hub->find(self->session_id_) : nullptr;
    if (!session) {
      self->fail("unknown session");
      return;
    }
    try {
      const json j = json::parse(text);
      ControlMsg msg = parse_control(j);
      std::weak_ptr<StreamConnection> weak = self;
      session->submit(std::move(msg), [weak](const Ack& ack) {
        if (auto v = weak.lock()) v->send(to_json(ack));
      });
    } catch (const json::exception& e) {
      self->send(json{{"type", "error"}, {"field", nullptr}, {"message", std::string("invalid JSON: ") + e.what()}});
    } catch (const ConfigError& e) {
      self->send(json{{"type", "error"}, {"field", e.field()}, {"message", e.what()}});
    }
    self->read_next();
  });
}

namespace detail {

inline std::vector<std::string_view> split_path(std::string_view target) {
  if (auto q = target.find('?'); q != std::string_view::npos) target = target.substr(0, q);
  std::vector<std::string_view> parts;
  while (!target.empty()) {
    if (target.front() == '/') {
      target.remove_prefix(1);
      continue;
    }
    const auto slash = target.find('/');
    parts.push_back(target.substr(0, slash));
    if (slash == std::string_view::npos) break;
    target.remove_prefix(slash);
  }
  return parts;
}

}  // namespace detail

/// Plain HTTP connection; hands the socket to a StreamConnection on upgrade.
class HttpConnection : public std::enable_shared_from_this<HttpConnection> {
 public:
  HttpConnection(tcp::socket&& socket, std::shared_ptr<SessionHub> hub)
      : stream_(std::move(socket)), hub_(std::move(hub)) {}

  void run() { read_next(); }

 private:
  using Response = http::response<http::string_body>;

  void read_next() {
    req_ = {};
    stream_.expires_after(std::chrono::seconds(30));
    http::async_read(stream_, buffer_, req_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) {
        self->stream_.socket().shutdown(tcp::socket::shutdown_send, ec);
        return;
      }
      self->dispatch();
    });
  }

  void dispatch() {
    const auto target = req_.target();
    const auto parts = detail::split_path(std::string_view(target.data(), target.size()));
    if (websocket::is_upgrade(req_)) {
      stream_.expires_never();
      if (parts.size() == 3 && parts[0] == "sessions" && parts[2] == "stream") {
        std::string id(parts[1]);
        auto conn = std::make_shared<StreamConnection>(stream_.release_socket());
        conn->accept(std::move(req_), hub_, std::move(id));
        return;
      }
      write(error(http::status::not_found, "no stream endpoint at this path"));
      return;
    }
    write(route(parts));
  }

  Response make(http::status status, std::string body, std::string_view content_type) const {
    Response res{status, req_.version()};
    res.set(http::field::server, "knobctl");
    res.set(http::field::content_type, std::string(content_type));
    res.set(http::field::access_control_allow_origin, "*");
    res.keep_alive(req_.keep_alive());
    res.body() = std::move(body);
    res.prepare_payload();
    return res;
  }

  Response json_response(http::status status, const json& j) const {
    return make(status, j.dump(), "application/json");
  }

  Response error(http::status status, std::string_view message, std::optional<std::string> field = std::nullopt) const {
    json j = {{"error", message}};
    if (field) j["field"] = *field;
    return json_response(status, j);
  }

  Response route(const std::vector<std::string_view>& parts) {
    const auto method = req_.method();
    if (method == http::verb::options) {
      auto res = make(http::status::no_content, "", "text/plain");
      res.set(http::field::access_control_allow_methods, "GET, POST, DELETE, OPTIONS");
      res.set(http::field::access_control_allow_headers, "Content-Type");
      return res;
    }
    if (parts.empty() || parts[0] != "sessions") return error(http::status::not_found, "not found");

    if (parts.size() == 1) {
      if (method == http::verb::post) return create();
      if (method == http::verb::get) return json_response(http::status::ok, json{{"sessions", hub_->ids()}});
      return error(http::status::method_not_allowed, "use GET or POST on /sessions");
    }

    const std::string id(parts[1]);
    auto session = hub_->find(id);
    if (!session) return error(http::status::not_found, "unknown session");

    if (parts.size() == 2) {
      if (method == http::verb::get) return json_response(http::status::ok, session->snapshot());
      if (method == http::verb::delete_) {
        hub_->erase(id);
        return make(http::status::no_content, "", "text/plain");
      }
      return error(http::status::method_not_allowed, "use GET or DELETE on /sessions/{id}");
    }
    if (parts.size() == 3 && method == http::verb::get) {
      if (parts[2] == "frames.csv") return make(http::status::ok, frames_csv(session->frames()), "text/csv");
      if (parts[2] == "controls") {
        json log = json::array();
        for (const auto& r : session->control_log()) log.push_back(to_json(r));
        return json_response(http::status::ok, json{{"config", to_json(session->initial_config())}, {"controls", log}});
      }
    }
    return error(http::status::not_found, "not found");
  }

  Response create() {
    json body = json::object();
    if (!req_.body().empty()) {
      try {
        body = json::parse(req_.body());
      } catch (const json::exception& e) {
        return error(http::status::bad_request, std::string("invalid JSON: ") + e.what());
      }
    }
    try {
      const std::string id = hub_->create(body);
      auto res = json_response(http::status::created, json{{"id", id}});
      res.set(http::field::location, "/sessions/" + id);
      return res;
    } catch (const ConfigError& e) {
      return error(http::status::bad_request, e.what(), e.field());
    } catch (const Error& e) {
      return error(http::status::bad_request, e.what());
    }
  }

  void write(Response res) {
    auto sp = std::make_shared<Response>(std::move(res));
    http::async_write(stream_, *sp, [self = shared_from_this(), sp](beast::error_code ec, std::size_t) {
      if (ec) return;
      if (!sp->keep_alive()) {
        self->stream_.socket().shutdown(tcp::socket::shutdown_send, ec);
        return;
      }
      self->read_next();
    });
  }

  beast::tcp_stream stream_;
  beast::flat_buffer buffer_;
  http::request<http::string_body> req_;
  std::shared_ptr<SessionHub> hub_;
};

/// Accepts connections on one port for both HTTP and WebSocket traffic.
class Server {
 public:
  Server(net::io_context& io, RunConfig defaults)
      : io_(io), acceptor_(io), hub_(std::make_shared<SessionHub>(io, std::move(defaults))) {}

  /// Binds and starts accepting. Port 0 picks an ephemeral port. Throws
  /// boost::system::system_error when the address cannot be bound.
  tcp::endpoint listen(const std::string& host, std::uint16_t port) {
    const tcp::endpoint ep(net::ip::make_address(host), port);
    acceptor_.open(ep.protocol());
    acceptor_.set_option(net::socket_base::reuse_address(true));
    acceptor_.bind(ep);
    acceptor_.listen(net::socket_base::max_listen_connections);
    accept_next();
    return acceptor_.local_endpoint();
  }

  void stop() {
    beast::error_code ec;
    acceptor_.close(ec);
    hub_->shutdown();
  }

  SessionHub& hub() noexcept { return *hub_; }

 private:
  void accept_next() {
    acceptor_.async_accept(net::make_strand(io_), [this](beast::error_code ec, tcp::socket socket) {
      if (ec) {
        if (ec == net::error::operation_aborted) return;
      } else {
        std::make_shared<HttpConnection>(std::move(socket), hub_)->run();
      }
      accept_next();
    });
  }

  net::io_context& io_;
  tcp::acceptor acceptor_;
  std::shared_ptr<SessionHub> hub_;
};

}  // namespace knob::service
