#ifndef BALLCHAIN_TELEOP_SERVICE_HPP
#define BALLCHAIN_TELEOP_SERVICE_HPP

// Real-time bridge: WebSocket JSON frames in and out, a fixed-rate tick loop
// that alone owns the Session, plus /health and static files over HTTP.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include "ballchain/session.hpp"

namespace ballchain {

using Clock = std::chrono::steady_clock;

/// Operator input waiting for the next tick. Velocity is latest-wins per
/// unit and expires after the dead-man timeout; feed is a held direction with
/// the same timeout; reconfigure and reset are one-shot flags.
class CommandMailbox {
 public:
  CommandMailbox(std::size_t units, double max_rate, Clock::duration deadman)
      : max_rate_(max_rate), deadman_(deadman), omega_(units, Vec3::Zero()), stamp_(units) {}

  /// Returns the clamped rate actually stored.
  Vec3 set_velocity(std::size_t unit, Vec3 w, Clock::time_point now) {
    std::lock_guard lock(mu_);
    if (unit >= omega_.size()) throw std::out_of_range("unknown unit");
    if (!w.allFinite()) throw std::invalid_argument("omega must be finite");
    if (w.norm() > max_rate_) w *= max_rate_ / w.norm();
    omega_[unit] = w;
    stamp_[unit] = now;
    return w;
  }

  void set_feed(Feed f, Clock::time_point now) {
    std::lock_guard lock(mu_);
    feed_ = f;
    feed_stamp_ = now;
  }

  void request_reconfigure() {
    std::lock_guard lock(mu_);
    reconfigure_ = true;
  }

  void request_reset() {
    std::lock_guard lock(mu_);
    reset_ = true;
  }

  /// Command for the tick at `now`; consumes one-shot flags.
  TeleopCommand take(Clock::time_point now, bool* reset = nullptr) {
    std::lock_guard lock(mu_);
    TeleopCommand cmd;
    for (std::size_t k = 0; k < omega_.size(); ++k) {
      const bool live = stamp_[k] && now - *stamp_[k] <= deadman_;
      cmd.omega.push_back(live ? omega_[k] : Vec3::Zero());
    }
    cmd.feed = feed_stamp_ && now - *feed_stamp_ <= deadman_ ? feed_ : Feed::kHold;
    cmd.reconfigure = std::exchange(reconfigure_, false);
    if (reset) *reset = std::exchange(reset_, false);
    return cmd;
  }

 private:
  std::mutex mu_;
  double max_rate_;
  Clock::duration deadman_;
  std::vector<Vec3> omega_;
  std::vector<std::optional<Clock::time_point>> stamp_;
  Feed feed_ = Feed::kHold;
  std::optional<Clock::time_point> feed_stamp_;
  bool reconfigure_ = false;
  bool reset_ = false;
};

namespace wire {

inline double round_mm(double meters) { return std::round(meters * 1e5) / 100.0; }

inline Json mm(const Vec3& v) { return Json::array({round_mm(v.x()), round_mm(v.y()), round_mm(v.z())}); }

inline Json error(const std::string& message) { return {{"type", "error"}, {"message", message}}; }

inline Json hello(const Scenario& s) {
  Json targets = Json::array();
  for (const Target& t : s.targets) {
    targets.push_back({{"id", t.id}, {"position_mm", mm(t.position)}, {"radius_mm", round_mm(t.radius)}});
  }
  Json units = Json::array();
  for (const UnitSlot& u : s.units) {
    units.push_back({{"id", u.id},
                     {"position_mm", mm(u.unit.position)},
                     {"neutral_dipole", to_json(u.unit.neutral_dipole)}});
  }
  return {{"type", "hello"},
          {"scenario", s.name},
          {"tick_dt", s.tick_dt},
          {"max_angular_velocity", s.max_angular_velocity},
          {"max_balls", s.max_balls},
          {"ball_diameter_mm", round_mm(s.chain.ball.diameter)},
          {"entry_mm", mm(s.chain.base_position)},
          {"mapping", s.mapping == InputMapping::kTip ? "tip" : "world"},
          {"units", units},
          {"targets", targets}};
}

inline Json state(const Session& session, const StepReport& report) {
  const SessionState& st = session.state();
  Json positions = Json::array();
  for (const Vec3& p : st.shape.positions) positions.push_back(mm(p));
  Json dipoles = Json::array();
  for (const Mat3& r : st.rotations) dipoles.push_back(to_json(Vec3(r.col(2))));
  Json touched = Json::array();
  for (const auto& [id, tick] : st.touched) touched.push_back(id);
  return {{"type", "state"},
          {"tick", st.tick},
          {"n", st.n},
          {"positions_mm", positions},
          {"tip_mm", mm(st.shape.tip())},
          {"unit_dipoles", dipoles},
          {"touched", touched},
          {"reconfiguring", st.reconfiguring},
          {"solver",
           {{"ok", report.ok},
            {"converged", st.diagnostics.converged},
            {"status", st.diagnostics.status},
            {"iterations", st.diagnostics.iterations},
            {"error", report.error}}},
          {"warnings", report.warnings},
          {"metrics", to_json(compute_metrics(session.scenario(), st))}};
}

}  // namespace wire

/// The simulation side of the service: owns the Session, applies wire
/// commands, and produces the frames each tick. No networking, no threads,
/// so it can be driven with a synthetic clock.
class TeleopCore {
 public:
  TeleopCore(Json scenario_doc, std::uint64_t seed, std::ostream* session_log = nullptr,
             Clock::duration deadman = std::chrono::milliseconds(250), std::ostream* command_log = nullptr)
      : doc_(std::move(scenario_doc)),
        seed_(seed),
        scenario_(load_scenario(doc_)),
        session_(std::make_unique<Session>(scenario_, seed)),
        mailbox_(scenario_.units.size(), scenario_.max_angular_velocity, deadman),
        log_(session_log),
        commands_(command_log) {
    if (commands_) *commands_ << Json{{"type", "header"}, {"seed", seed_}, {"scenario", doc_}}.dump() << '\n';
  }

  const Scenario& scenario() const { return scenario_; }
  CommandMailbox& mailbox() { return mailbox_; }

  /// Parses one client frame. Returns an error frame for malformed input.
  std::optional<Json> handle_message(const std::string& text, Clock::time_point now) {
    Json msg;
    try {
      msg = Json::parse(text);
    } catch (const Json::parse_error&) {
      return wire::error("malformed JSON");
    }
    if (!msg.is_object() || !msg.contains("type") || !msg.at("type").is_string()) {
      return wire::error("frame must be an object with a string 'type'");
    }
    const std::string type = msg.at("type").get<std::string>();
    try {
      if (type == "velocity") {
        mailbox_.set_velocity(unit_index(msg), vec_from_json(msg.at("omega")), now);
      } else if (type == "feed") {
        mailbox_.set_feed(parse_feed(msg.value("direction", std::string("hold"))), now);
      } else if (type == "reconfigure") {
        mailbox_.request_reconfigure();
      } else if (type == "reset") {
        mailbox_.request_reset();
      } else {
        return wire::error("unknown frame type '" + type + "'");
      }
    } catch (const std::exception& e) {
      return wire::error(type + ": " + e.what());
    }
    return std::nullopt;
  }

  /// Advances one tick; returns the frames to broadcast (state, then events).
  std::vector<Json> tick(Clock::time_point now) {
    bool reset = false;
    const TeleopCommand cmd = mailbox_.take(now, &reset);
    if (reset) {
      session_ = std::make_unique<Session>(scenario_, seed_);
      if (commands_) *commands_ << Json{{"type", "reset"}}.dump() << '\n';
    }
    if (commands_) *commands_ << command_to_json(session_->state().tick + 1, cmd).dump() << '\n';
    const StepReport report = session_->step(cmd);
    if (log_) *log_ << session_->log_record(report).dump() << '\n';
    std::vector<Json> frames{wire::state(*session_, report)};
    for (const auto& e : report.events) {
      frames.push_back({{"type", "event"}, {"event", e}, {"tick", session_->state().tick}});
    }
    last_ok_ = report.ok;
    last_status_ = session_->state().diagnostics.status;
    return frames;
  }

  long current_tick() const { return session_->state().tick; }
  bool last_ok() const { return last_ok_; }
  const std::string& last_status() const { return last_status_; }

 private:
  std::size_t unit_index(const Json& msg) const {
    if (!msg.contains("unit_id")) return 0;
    const std::string id = msg.at("unit_id").get<std::string>();
    for (std::size_t k = 0; k < scenario_.units.size(); ++k) {
      if (scenario_.units[k].id == id) return k;
    }
    throw std::invalid_argument("unknown unit_id '" + id + "'");
  }

  Json doc_;
  std::uint64_t seed_;
  Scenario scenario_;
  std::unique_ptr<Session> session_;
  CommandMailbox mailbox_;
  std::ostream* log_;
  std::ostream* commands_;
  bool last_ok_ = true;
  std::string last_status_ = "idle";
};

struct ServiceOptions {
  std::string address = "127.0.0.1";
  unsigned short port = 8080;  // 0 picks a free port
  std::filesystem::path static_dir;  // empty disables static files
  std::size_t max_queued_frames = 8;  // per client, beyond which frames are dropped
};

namespace detail {

namespace beast = boost::beast;
namespace http = boost::beast::http;
namespace websocket = boost::beast::websocket;
namespace net = boost::asio;
using tcp = boost::asio::ip::tcp;

inline std::string mime_type(const std::filesystem::path& p) {
  const std::string ext = p.extension().string();
  if (ext == ".html") return "text/html";
  if (ext == ".js" || ext == ".mjs") return "application/javascript";
  if (ext == ".css") return "text/css";
  if (ext == ".json") return "application/json";
  if (ext == ".svg") return "image/svg+xml";
  if (ext == ".png") return "image/png";
  if (ext == ".wasm") return "application/wasm";
  return "application/octet-stream";
}

/// File under `root` named by a URL path, or nothing if it would escape the root.
inline std::optional<std::filesystem::path> resolve_static(const std::filesystem::path& root,
                                                           const std::filesystem::path& url_path) {
  namespace fs = std::filesystem;
  if (root.empty()) return std::nullopt;
  std::error_code ec;
  const fs::path base = fs::weakly_canonical(root, ec);
  if (ec) return std::nullopt;
  const fs::path full = fs::weakly_canonical(base / url_path.relative_path(), ec);
  if (ec) return std::nullopt;
  const fs::path rel = full.lexically_relative(base);
  if (rel.empty() || *rel.begin() == ".." || !fs::is_regular_file(full, ec)) return std::nullopt;
  return full;
}

}  // namespace detail

class TeleopService;

namespace detail {

/// One WebSocket client. All members are touched only on the io thread.
class WsClient : public std::enable_shared_from_this<WsClient> {
 public:
  WsClient(tcp::socket socket, TeleopService& service) : ws_(std::move(socket)), service_(service) {}

  void start(http::request<http::string_body> req);
  void send(std::shared_ptr<const std::string> frame);
  std::size_t dropped() const { return dropped_; }

 private:
  void read();
  void write_next();

  websocket::stream<beast::tcp_stream> ws_;
  TeleopService& service_;
  beast::flat_buffer buffer_;
  std::deque<std::shared_ptr<const std::string>> queue_;
  bool writing_ = false;
  bool closed_ = false;
  std::size_t dropped_ = 0;
};

class HttpConnection : public std::enable_shared_from_this<HttpConnection> {
 public:
  HttpConnection(tcp::socket socket, TeleopService& service) : stream_(std::move(socket)), service_(service) {}
  void start() { read(); }

 private:
  void read() {
    req_ = {};
    stream_.expires_after(std::chrono::seconds(30));
    http::async_read(stream_, buffer_, req_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) return;
      self->handle();
    });
  }
  void handle();

  beast::tcp_stream stream_;
  TeleopService& service_;
  beast::flat_buffer buffer_;
  http::request<http::string_body> req_;
};

}  // namespace detail

/// Runs the tick loop and the network front end until stop().
class TeleopService {
 public:
  TeleopService(Json scenario_doc, std::uint64_t seed, ServiceOptions options, std::ostream* session_log = nullptr,
                std::ostream* command_log = nullptr)
      : core_(std::move(scenario_doc), seed, session_log, std::chrono::milliseconds(250), command_log), options_(std::move(options)), acceptor_(ioc_) {
    using detail::tcp;
    const tcp::endpoint ep(detail::net::ip::make_address(options_.address), options_.port);
    acceptor_.open(ep.protocol());
    acceptor_.set_option(detail::net::socket_base::reuse_address(true));
    acceptor_.bind(ep);
    acceptor_.listen();
    port_ = acceptor_.local_endpoint().port();
  }

  ~TeleopService() { stop(); }

  unsigned short port() const { return port_; }
  const Scenario& scenario() const { return core_.scenario(); }

  /// Starts the io thread and the tick thread; returns immediately.
  void start() {
    accept();
    io_thread_ = std::thread([this] { ioc_.run(); });
    tick_thread_ = std::thread([this] { tick_loop(); });
  }

  /// Blocks until stop() is called from another thread or a signal handler.
  void wait() {
    std::unique_lock lock(stop_mu_);
    stop_cv_.wait(lock, [this] { return stopping_.load(); });
  }

  /// Asks wait() to return; safe from any thread, including io handlers.
  void request_stop() {
    {
      std::lock_guard lock(stop_mu_);
      stopping_ = true;
    }
    stop_cv_.notify_all();
  }

  /// Stops and joins both threads. Must not be called from the io thread.
  void stop() {
    request_stop();
    if (tick_thread_.joinable()) tick_thread_.join();
    ioc_.stop();
    if (io_thread_.joinable()) io_thread_.join();
  }

  detail::net::io_context& io_context() { return ioc_; }

  Json health() const {
    std::lock_guard lock(health_mu_);
    return health_;
  }

  // -- called on the io thread by connections --
  void on_client_open(const std::shared_ptr<detail::WsClient>& c) {
    clients_.insert(c);
    c->send(std::make_shared<const std::string>(wire::hello(core_.scenario()).dump()));
    if (last_state_) c->send(last_state_);
  }
  void on_client_close(const std::shared_ptr<detail::WsClient>& c) { clients_.erase(c); }
  void on_client_message(const std::shared_ptr<detail::WsClient>& c, const std::string& text) {
    if (auto err = core_.handle_message(text, Clock::now())) c->send(std::make_shared<const std::string>(err->dump()));
  }
  std::size_t max_queued_frames() const { return options_.max_queued_frames; }
  const std::filesystem::path& static_dir() const { return options_.static_dir; }

 private:
  void accept() {
    acceptor_.async_accept([this](boost::beast::error_code ec, detail::tcp::socket socket) {
      if (ec) return;
      std::make_shared<detail::HttpConnection>(std::move(socket), *this)->start();
      accept();
    });
  }

  void tick_loop() {
    const auto period = std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(core_.scenario().tick_dt));
    auto next = Clock::now();
    auto window_start = next;
    long window_ticks = 0;
    while (!stopping_) {
      next += period;
      const auto t0 = Clock::now();
      std::vector<Json> frames = core_.tick(t0);
      const double step_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
      std::vector<std::shared_ptr<const std::string>> encoded;
      for (const Json& f : frames) encoded.push_back(std::make_shared<const std::string>(f.dump()));
      detail::net::post(ioc_, [this, encoded] {
        last_state_ = encoded.front();
        for (const auto& c : clients_) {
          for (const auto& f : encoded) c->send(f);
        }
      });
      ++window_ticks;
      const double window = std::chrono::duration<double>(Clock::now() - window_start).count();
      {
        std::lock_guard lock(health_mu_);
        health_ = {{"status", core_.last_ok() ? "ok" : "degraded"},
                   {"tick", core_.current_tick()},
                   {"tick_dt", core_.scenario().tick_dt},
                   {"tick_rate_hz", window > 0.0 ? window_ticks / window : 0.0},
                   {"last_step_ms", step_ms},
                   {"solver", {{"ok", core_.last_ok()}, {"status", core_.last_status()}}}};
      }
      if (window > 2.0) {
        window_start = Clock::now();
        window_ticks = 0;
      }
      std::unique_lock lock(stop_mu_);
      stop_cv_.wait_until(lock, next, [this] { return stopping_.load(); });
      if (Clock::now() > next + period) next = Clock::now();  // overran: do not try to catch up
    }
  }

  TeleopCore core_;
  ServiceOptions options_;
  detail::net::io_context ioc_;
  detail::tcp::acceptor acceptor_;
  unsigned short port_ = 0;
  std::set<std::shared_ptr<detail::WsClient>> clients_;
  std::shared_ptr<const std::string> last_state_;
  std::thread io_thread_;
  std::thread tick_thread_;
  std::mutex stop_mu_;
  std::condition_variable stop_cv_;
  std::atomic<bool> stopping_{false};
  mutable std::mutex health_mu_;
  Json health_ = {{"status", "starting"}, {"tick", 0}};
};

namespace detail {

inline void WsClient::start(http::request<http::string_body> req) {
  ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
  ws_.text(true);
  ws_.async_accept(req, [self = shared_from_this()](beast::error_code ec) {
    if (ec) return;
    self->service_.on_client_open(self);
    self->read();
  });
}

inline void WsClient::read() {
  ws_.async_read(buffer_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
    if (ec) {
      self->closed_ = true;
      self->service_.on_client_close(self);
      return;
    }
    const std::string text = beast::buffers_to_string(self->buffer_.data());
    self->buffer_.consume(self->buffer_.size());
    self->service_.on_client_message(self, text);
    self->read();
  });
}

inline void WsClient::send(std::shared_ptr<const std::string> frame) {
  if (closed_) return;
  // A slow reader loses frames rather than delaying everyone else; frames
  // already queued keep their order.
  if (queue_.size() >= service_.max_queued_frames()) {
    ++dropped_;
    return;
  }
  queue_.push_back(std::move(frame));
  if (!writing_) write_next();
}

inline void WsClient::write_next() {
  if (queue_.empty() || closed_) {
    writing_ = false;
    return;
  }
  writing_ = true;
  ws_.async_write(net::buffer(*queue_.front()), [self = shared_from_this()](beast::error_code ec, std::size_t) {
    self->queue_.pop_front();
    if (ec) {
      self->closed_ = true;
      self->queue_.clear();
      self->writing_ = false;
      self->service_.on_client_close(self);
      return;
    }
    self->write_next();
  });
}

inline void HttpConnection::handle() {
  if (websocket::is_upgrade(req_) && req_.target() == "/ws") {
    beast::get_lowest_layer(stream_).expires_never();
    std::make_shared<WsClient>(stream_.release_socket(), service_)->start(std::move(req_));
    return;
  }
  auto res = std::make_shared<http::response<http::string_body>>();
  res->version(req_.version());
  res->keep_alive(false);
  res->set(http::field::server, "ballchain-teleop");
  const std::string target(req_.target());
  if (req_.method() != http::verb::get) {
    res->result(http::status::method_not_allowed);
    res->body() = "GET only\n";
  } else if (target == "/health") {
    res->result(http::status::ok);
    res->set(http::field::content_type, "application/json");
    res->body() = service_.health().dump();
  } else {
    std::filesystem::path rel = target.substr(0, target.find('?'));
    if (rel == "/") rel = "/index.html";
    std::ifstream f;
    if (const auto file = resolve_static(service_.static_dir(), rel)) f.open(*file, std::ios::binary);
    if (f.is_open()) {
      res->result(http::status::ok);
      res->set(http::field::content_type, mime_type(rel));
      res->body().assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
    } else {
      res->result(http::status::not_found);
      res->set(http::field::content_type, "text/plain");
      res->body() = "not found\n";
    }
  }
  res->prepare_payload();
  http::async_write(stream_, *res, [self = shared_from_this(), res](beast::error_code, std::size_t) {
    beast::error_code ec;
    self->stream_.socket().shutdown(tcp::socket::shutdown_send, ec);
  });
}

}  // namespace detail

}  // namespace ballchain

#endif  // BALLCHAIN_TELEOP_SERVICE_HPP
