#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "ballchain/teleop_service.hpp"

using namespace ballchain;
using namespace std::chrono_literals;

namespace {

namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;

Json pv_doc() { return load_json_file(bundled_scenario_path("pv-rings")); }

Json first_of_type(const std::vector<Json>& frames, const std::string& type) {
  for (const Json& f : frames) {
    if (f.at("type") == type) return f;
  }
  return Json();
}

Vec3 dipole_of(const Json& state) { return vec_from_json(state.at("unit_dipoles")[0]); }

std::string http_get(unsigned short port, const std::string& target) {
  net::io_context ioc;
  beast::tcp_stream stream(ioc);
  stream.connect(tcp::endpoint(net::ip::make_address("127.0.0.1"), port));
  http::request<http::string_body> req{http::verb::get, target, 11};
  req.set(http::field::host, "127.0.0.1");
  http::write(stream, req);
  beast::flat_buffer buf;
  http::response<http::string_body> res;
  http::read(stream, buf, res);
  return std::to_string(res.result_int()) + " " + res.body();
}

}  // namespace

TEST(CommandMailbox, ClampDeadmanAndOneShots) {
  CommandMailbox box(2, 1.0, 250ms);
  const auto t0 = Clock::now();
  EXPECT_NEAR(box.set_velocity(0, Vec3(30, 40, 0), t0).norm(), 1.0, 1e-15);
  EXPECT_THROW(box.set_velocity(2, Vec3::Zero(), t0), std::out_of_range);
  EXPECT_THROW(box.set_velocity(0, Vec3(INFINITY, 0, 0), t0), std::invalid_argument);
  box.set_feed(Feed::kInsert, t0);
  box.request_reconfigure();
  TeleopCommand c = box.take(t0 + 200ms);
  EXPECT_NEAR(c.omega[0].x(), 0.6, 1e-15);
  EXPECT_TRUE(c.omega[1].isZero(0.0));
  EXPECT_EQ(c.feed, Feed::kInsert);
  EXPECT_TRUE(c.reconfigure);
  c = box.take(t0 + 240ms);
  EXPECT_FALSE(c.reconfigure);
  EXPECT_FALSE(c.omega[0].isZero(0.0));
  c = box.take(t0 + 260ms);
  EXPECT_TRUE(c.omega[0].isZero(0.0));
  EXPECT_EQ(c.feed, Feed::kHold);
  // Latest wins.
  box.set_velocity(0, Vec3(0.1, 0, 0), t0 + 300ms);
  box.set_velocity(0, Vec3(0, 0.2, 0), t0 + 301ms);
  EXPECT_EQ(box.take(t0 + 310ms).omega[0], Vec3(0, 0.2, 0));
}

TEST(TeleopCore, MalformedFramesGetErrorsAndChangeNothing) {
  TeleopCore core(pv_doc(), 0);
  const auto now = Clock::now();
  for (const char* bad : {"{nope", "[1,2]", R"({"type": 3})", R"({"type": "warp"})",
                          R"({"type": "velocity", "omega": [1, 2]})",
                          R"({"type": "velocity", "unit_id": "ghost", "omega": [0, 0, 1]})",
                          R"({"type": "feed", "direction": "sideways"})"}) {
    const auto err = core.handle_message(bad, now);
    ASSERT_TRUE(err.has_value()) << bad;
    EXPECT_EQ(err->at("type"), "error");
    EXPECT_FALSE(err->at("message").get<std::string>().empty());
  }
  const TeleopCommand c = core.mailbox().take(now);
  EXPECT_TRUE(c.idle());
  EXPECT_FALSE(core.handle_message(R"({"type": "velocity", "unit_id": "right", "omega": [0, 0, 0.1]})", now));
}

TEST(TeleopCore, VelocityAppliesUntilDeadman) {
  TeleopCore core(pv_doc(), 0);
  auto t = Clock::now();
  ASSERT_FALSE(core.handle_message(R"({"type": "velocity", "omega": [0, 0, 50]})", t));
  Vec3 prev = dipole_of(core.tick(t).front());
  long prev_tick = 0;
  int moving = 0;
  for (int k = 1; k <= 10; ++k) {
    t += 50ms;
    const auto frames = core.tick(t);
    const Json& st = frames.front();
    EXPECT_EQ(st.at("type"), "state");
    EXPECT_GT(st.at("tick").get<long>(), prev_tick);
    prev_tick = st.at("tick").get<long>();
    const Vec3 d = dipole_of(st);
    const double turned = alignment_angle(d, prev);
    if (k <= 5) {
      // Clamped to the scenario maximum: 1 rad/s for one 50 ms tick.
      EXPECT_NEAR(turned, 0.05, 1e-9);
      ++moving;
    } else {
      EXPECT_EQ(turned, 0.0);
    }
    prev = d;
  }
  EXPECT_EQ(moving, 5);
}

TEST(TeleopCore, ReconfigureEmitsEventFrame) {
  Json doc = pv_doc();
  doc["units"][0]["dipole"] = {0, 1, 0};
  doc["units"][0]["gain"] = 4.0;
  TeleopCore core(doc, 0);
  auto t = Clock::now();
  ASSERT_FALSE(core.handle_message(R"({"type": "reconfigure"})", t));
  bool done = false;
  for (int k = 0; k < 300 && !done; ++k) {
    t += 50ms;
    const auto frames = core.tick(t);
    done = !first_of_type(frames, "event").is_null() &&
           std::any_of(frames.begin(), frames.end(), [](const Json& f) { return f.value("event", "") == "reconfigured"; });
  }
  EXPECT_TRUE(done);
}

TEST(TeleopCore, CommandLogReplaysToIdenticalSessionLog) {
  std::ostringstream session_log;
  std::ostringstream command_log;
  {
    TeleopCore core(pv_doc(), 9, &session_log, 250ms, &command_log);
    auto t = Clock::now();
    for (int k = 0; k < 40; ++k) {
      if (k == 2) core.handle_message(R"({"type": "velocity", "omega": [0, 0.7, 0.4]})", t);
      if (k == 8) core.handle_message(R"({"type": "feed", "direction": "insert"})", t);
      if (k == 20) core.handle_message(R"({"type": "reset"})", t);
      if (k == 24) core.handle_message(R"({"type": "velocity", "omega": [0, 0, -0.9]})", t);
      t += 50ms;
      core.tick(t);
    }
  }
  std::istringstream commands(command_log.str());
  std::ostringstream replayed;
  replay_command_log(commands, replayed);
  const std::string original = session_log.str();
  EXPECT_FALSE(original.empty());
  EXPECT_EQ(replayed.str(), original);
}

TEST(TeleopCore, StateFrameRoundsToHundredthsOfMillimetre) {
  TeleopCore core(pv_doc(), 0);
  const Json st = core.tick(Clock::now()).front();
  for (const Json& p : st.at("positions_mm")) {
    for (const Json& c : p) {
      const double v = c.get<double>();
      EXPECT_NEAR(v * 100.0, std::round(v * 100.0), 1e-6);
    }
  }
  EXPECT_EQ(st.at("positions_mm").size(), 4u);
  EXPECT_NEAR(st.at("positions_mm")[1][0].get<double>(), 3.18, 1e-12);
  EXPECT_TRUE(st.contains("metrics"));
}

TEST(TeleopService, EndToEndOverLoopback) {
  const auto dir = std::filesystem::temp_directory_path() / "ballchain_static_test";
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "index.html") << "<html>cockpit</html>";

  ServiceOptions opt;
  opt.port = 0;
  opt.static_dir = dir;
  TeleopService service(pv_doc(), 0, opt);
  service.start();

  net::io_context ioc;
  websocket::stream<tcp::socket> ws(ioc);
  ws.next_layer().connect(tcp::endpoint(net::ip::make_address("127.0.0.1"), service.port()));
  ws.handshake("127.0.0.1", "/ws");
  auto read_frame = [&] {
    beast::flat_buffer buf;
    ws.read(buf);
    return Json::parse(beast::buffers_to_string(buf.data()));
  };
  const Json hello = read_frame();
  EXPECT_EQ(hello.at("type"), "hello");
  EXPECT_EQ(hello.at("targets").size(), 38u);

  // A second client that never reads must not slow the loop down.
  websocket::stream<tcp::socket> lazy(ioc);
  lazy.next_layer().connect(tcp::endpoint(net::ip::make_address("127.0.0.1"), service.port()));
  lazy.handshake("127.0.0.1", "/ws");

  ws.write(net::buffer(std::string("not json")));
  ws.write(net::buffer(std::string(R"({"type": "velocity", "omega": [0, 0, 0.8]})")));
  long last_tick = -1;
  bool got_error = false;
  Vec3 first_dipole = Vec3::Zero();
  Vec3 dipole = Vec3::Zero();
  const auto start = Clock::now();
  while (Clock::now() - start < 1s) {
    const Json f = read_frame();
    if (f.at("type") == "error") got_error = true;
    if (f.at("type") != "state") continue;
    const long tick = f.at("tick").get<long>();
    EXPECT_GT(tick, last_tick);
    if (last_tick < 0) first_dipole = dipole_of(f);
    last_tick = tick;
    dipole = dipole_of(f);
  }
  EXPECT_TRUE(got_error);
  EXPECT_GT(alignment_angle(first_dipole, dipole), 0.05);
  // Dead-man: no further commands, so the magnet has long stopped.
  EXPECT_LT(alignment_angle(first_dipole, dipole), 0.8 * 0.35);

  const std::string health = http_get(service.port(), "/health");
  ASSERT_EQ(health.substr(0, 4), "200 ");
  const Json h = Json::parse(health.substr(4));
  EXPECT_GT(h.at("tick").get<long>(), 10);
  EXPECT_GT(h.at("tick_rate_hz").get<double>(), 10.0);
  EXPECT_EQ(h.at("solver").at("ok"), true);
  EXPECT_EQ(http_get(service.port(), "/"), "200 <html>cockpit</html>");
  EXPECT_EQ(http_get(service.port(), "/missing.js").substr(0, 3), "404");
  EXPECT_EQ(http_get(service.port(), "/../../etc/passwd").substr(0, 3), "404");

  ws.close(websocket::close_code::normal);
  service.stop();
  std::filesystem::remove_all(dir);
}
