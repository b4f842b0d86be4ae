#include "phonepad/sim.hpp"

#include <gtest/gtest.h>

#include <map>

namespace phonepad {
namespace {

ScenarioConfig base(double latency, double jitter, double rate = 100.0, double duration = 5.0) {
  ScenarioConfig c;
  c.n_clients = 2;
  c.controller = ControllerKind::joystick;
  c.one_way_latency_ms = latency;
  c.jitter_ms = jitter;
  c.send_rate_hz = rate;
  c.duration_s = duration;
  c.seed = 7;
  return c;
}

// --- gen_trace -----------------------------------------------------------------

TEST(GenTrace, CountAndSpacing) {
  auto t = gen_trace(ControllerKind::joystick, 100, 1, 7);
  ASSERT_EQ(t.size(), 100u);
  for (std::size_t i = 0; i < t.size(); ++i) {
    EXPECT_EQ(t[i].t_us, static_cast<std::int64_t>(i) * 10'000);
  }
  EXPECT_EQ(gen_trace(ControllerKind::accel, 1000, 2.5, 1).size(), 2500u);
  EXPECT_EQ(gen_trace(ControllerKind::accel, 3, 1, 1).back().t_us, 666'667);
}

TEST(GenTrace, Deterministic) {
  for (auto kind : {ControllerKind::nes, ControllerKind::joystick, ControllerKind::touchpad,
                    ControllerKind::accel}) {
    EXPECT_EQ(gen_trace(kind, 60, 2, 9), gen_trace(kind, 60, 2, 9));
    EXPECT_NE(gen_trace(kind, 60, 2, 9), gen_trace(kind, 60, 2, 10));
  }
}

TEST(GenTrace, RejectsNonPositiveRate) {
  EXPECT_THROW(gen_trace(ControllerKind::nes, 0, 1, 1), ConfigInvalid);
  EXPECT_THROW(gen_trace(ControllerKind::nes, -5, 1, 1), ConfigInvalid);
}

TEST(GenTrace, NesPressesAreReleased) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (double dur : {1.0, 1.01, 0.37}) {
      auto t = gen_trace(ControllerKind::nes, 100, dur, seed);
      // Trace audit: every press must be matched by a later release of the same button.
      std::map<std::string, int> open;
      for (const auto& ev : t) {
        auto b = ev.payload["b"].get<std::string>();
        ASSERT_TRUE(nes_button_from_string(b));
        if (ev.payload["v"].get<bool>()) {
          ++open[b];
        } else if (open[b] > 0) {
          --open[b];
        }
      }
      for (const auto& [b, n] : open) EXPECT_EQ(n, 0) << b << " seed " << seed;
    }
  }
}

TEST(GenTrace, PayloadsArePlausible) {
  auto joy = gen_trace(ControllerKind::joystick, 100, 4, 3);
  double lo = 360, hi = 0;
  for (const auto& ev : joy) {
    double a = ev.payload["a"], f = ev.payload["f"];
    EXPECT_GE(a, 0.0);
    EXPECT_LT(a, 360.0);
    EXPECT_GE(f, 0.0);
    EXPECT_LE(f, 1.0);
    lo = std::min(lo, a);
    hi = std::max(hi, a);
  }
  EXPECT_LT(lo, 10.0);
  EXPECT_GT(hi, 350.0);

  auto touch = gen_trace(ControllerKind::touchpad, 100, 4, 3);
  bool in_stroke = false;
  for (const auto& ev : touch) {
    double x = ev.payload["x"], y = ev.payload["y"];
    EXPECT_TRUE(x >= 0 && x <= 1 && y >= 0 && y <= 1);
    auto ph = ev.payload["ph"].get<std::string>();
    if (ph == "s") {
      EXPECT_FALSE(in_stroke);
      in_stroke = true;
    } else {
      EXPECT_TRUE(in_stroke);
      if (ph == "e") in_stroke = false;
    }
  }

  double z_sum = 0;
  auto acc = gen_trace(ControllerKind::accel, 100, 4, 3);
  for (const auto& ev : acc) {
    EXPECT_LE(std::fabs(ev.payload["x"].get<double>()), 0.2 + 1e-9);
    EXPECT_LE(std::fabs(ev.payload["y"].get<double>()), 0.2 + 1e-9);
    z_sum += ev.payload["z"].get<double>();
  }
  EXPECT_NEAR(z_sum / static_cast<double>(acc.size()), 9.81, 0.05);

  for (auto kind : {ControllerKind::nes, ControllerKind::joystick, ControllerKind::touchpad,
                    ControllerKind::accel}) {
    for (const auto& ev : gen_trace(kind, 50, 1, 1)) EXPECT_EQ(infer_kind(ev.payload), kind);
  }
}

// --- config ------------------------------------------------------------------------

TEST(ScenarioConfig, Validation) {
  EXPECT_NO_THROW(validate(base(10, 10)));
  auto c = base(10, 11);
  EXPECT_THROW(validate(c), ConfigInvalid);
  c = base(-1, 0);
  EXPECT_THROW(validate(c), ConfigInvalid);
  c = base(10, 0, 0);
  EXPECT_THROW(validate(c), ConfigInvalid);
  c = base(10, 0);
  c.n_clients = 0;
  EXPECT_THROW(validate(c), ConfigInvalid);
  c = base(10, 0);
  c.throttle_min_interval_ms = -1;
  EXPECT_THROW(validate(c), ConfigInvalid);
  c = base(10, 0);
  c.duration_s = std::nan("");
  EXPECT_THROW(run_loopback(c), ConfigInvalid);
}

// --- clock and links ---------------------------------------------------------------

TEST(VirtualScheduler, OrdersByTimeThenPhaseThenInsertion) {
  VirtualScheduler s;
  std::vector<int> order;
  s.at(10, [&] { order.push_back(3); }, 1);
  s.at(10, [&] { order.push_back(1); });
  s.at(5, [&] {
    order.push_back(0);
    s.at(10, [&] { order.push_back(2); });
  });
  s.at(11, [&] { order.push_back(4); });
  s.run();
  EXPECT_EQ(order, (std::vector<int>{0, 1, 2, 3, 4}));
  EXPECT_EQ(s.now_us(), 11);
}

TEST(DelayLink, FifoAndBounded) {
  DelayLink link(30, 10, 5);
  std::int64_t prev = 0;
  for (std::int64_t t = 0; t < 100'000; t += 1000) {
    auto d = link.schedule(t);
    EXPECT_GE(d, prev);
    EXPECT_GE(d, t + 20'000);
    EXPECT_LE(d, t + 40'000);
    prev = d;
  }
  DelayLink fixed(10, 0, 5);
  EXPECT_EQ(fixed.schedule(123), 10'123);
}

TEST(DelayLink, StatLaneIgnoresDataTraffic) {
  DelayLink quiet(30, 10, 9), busy(30, 10, 9);
  for (std::int64_t i = 0; i < 50; ++i) {
    for (int u = 0; u < i % 4; ++u) busy.schedule(i * 1000 + u, Lane::data);
    EXPECT_EQ(quiet.schedule(i * 1000, Lane::stat), busy.schedule(i * 1000, Lane::stat));
  }
}

TEST(DelayLink, LaneOfFrame) {
  auto frame = [](Kind k) { return encode_envelope({kProtocolVersion, k, "phone-000", std::nullopt, 1, 0, Json::object()}); };
  EXPECT_EQ(lane_of(frame(Kind::stat_ping)), Lane::stat);
  EXPECT_EQ(lane_of(frame(Kind::stat_pong)), Lane::stat);
  EXPECT_EQ(lane_of(frame(Kind::user)), Lane::data);
  EXPECT_EQ(lane_of(frame(Kind::hello)), Lane::data);
  EXPECT_EQ(lane_of(frame(Kind::bye)), Lane::data);
  EXPECT_EQ(lane_of("garbage"), Lane::data);
}

// --- run_loopback --------------------------------------------------------------------

TEST(RunLoopback, LocalPingIsExactlyTwiceLatency) {
  auto r = run_loopback(base(10, 0));
  ASSERT_FALSE(r.samples.empty());
  std::size_t with_ping = 0;
  for (const auto& s : r.samples) {
    if (s.ping_ms) {
      ++with_ping;
      EXPECT_EQ(*s.ping_ms, 20.0);
    }
  }
  EXPECT_EQ(with_ping, r.samples.size() - 2);  // the first tick precedes the first ping
  EXPECT_EQ(r.aggregates.ping_mean_ms, 20.0);
}

TEST(RunLoopback, RemotePingBand) {
  auto c = base(30, 10);
  c.n_clients = 4;
  auto r = run_loopback(c);
  for (const auto& s : r.samples) {
    if (s.ping_ms) {
      EXPECT_GE(*s.ping_ms, 40.0);
      EXPECT_LE(*s.ping_ms, 80.0);
    }
  }
  EXPECT_GT(*r.aggregates.ping_max_ms, *r.aggregates.ping_min_ms);
}

TEST(RunLoopback, UnthrottledRate) {
  auto r = run_loopback(base(10, 0));
  ASSERT_GT(r.aggregates.rate_samples, 0u);
  for (const auto& s : r.samples) {
    if (s.t_ms >= r.warmup_ms) {
      EXPECT_NEAR(s.user_rate_hz, 100.0, 1.0) << s.t_ms;
      EXPECT_NEAR(s.stat_rate_hz, 2.0, 1e-9) << s.t_ms;
    }
  }
  EXPECT_NEAR(r.aggregates.user_rate_mean_hz, 100.0, 1.0);
}

TEST(RunLoopback, ThrottleBoundsRate) {
  for (std::int64_t throttle : {5, 10, 16, 33}) {
    auto c = base(10, 5, 1000.0, 3.0);
    c.throttle_min_interval_ms = throttle;
    auto r = run_loopback(c);
    double bound = std::min(c.send_rate_hz, 1000.0 / static_cast<double>(throttle)) + 1.0;
    for (const auto& s : r.samples) EXPECT_LE(s.user_rate_hz, bound) << throttle;
    EXPECT_GT(r.frames_throttled, 0u);
    EXPECT_EQ(r.frame_loss, 0);
  }
}

TEST(RunLoopback, ConservationAndOrdering) {
  for (auto kind : {ControllerKind::nes, ControllerKind::joystick, ControllerKind::touchpad,
                    ControllerKind::accel}) {
    auto c = base(25, 20, 140.0, 2.0);
    c.controller = kind;
    c.n_clients = 5;
    c.throttle_min_interval_ms = 9;
    auto r = run_loopback(c);
    EXPECT_EQ(r.frames_sent, 5u * 280u);
    EXPECT_EQ(r.frames_sent - r.frames_throttled, r.frames_received);
    EXPECT_EQ(r.frame_loss, 0);
    EXPECT_EQ(r.seq_violations, 0u);
  }
}

TEST(RunLoopback, ByteIdenticalCsvForSameSeed) {
  auto c = base(30, 10);
  c.n_clients = 3;
  auto a = run_loopback(c).csv();
  auto b = run_loopback(c).csv();
  EXPECT_EQ(a, b);
  c.seed = 8;
  EXPECT_NE(run_loopback(c).csv(), a);
}

TEST(RunLoopback, AggregatesRecomputableFromSeries) {
  auto r = run_loopback(base(30, 10));
  EXPECT_EQ(compute_aggregates(r.samples, r.warmup_ms), r.aggregates);
  auto parsed = parse_csv(r.csv());
  EXPECT_EQ(compute_aggregates(parsed, r.warmup_ms), r.aggregates);
  std::size_t rows = 0;
  for (const auto& [peer, series] : r.per_client()) rows += series.size();
  EXPECT_EQ(rows, r.samples.size());
}

TEST(RunLoopback, SamplesEvery500Ms) {
  auto r = run_loopback(base(10, 0, 50.0, 2.0));
  std::vector<std::int64_t> ts;
  for (const auto& s : r.samples) {
    if (s.peer_id == sim_peer_id(0)) ts.push_back(s.t_ms);
  }
  EXPECT_EQ(ts, (std::vector<std::int64_t>{500, 1000, 1500, 2000}));
}

// --- compare ------------------------------------------------------------------------

TEST(Compare, SelfPasses) {
  auto r = run_loopback(base(30, 10));
  auto res = compare_reports(r, r, {});
  EXPECT_TRUE(res.pass);
  EXPECT_TRUE(res.diffs.empty());
  EXPECT_EQ(res.rows, r.samples.size());
}

TEST(Compare, PingOffsetBeyondToleranceFailsWithMetricName) {
  auto r = run_loopback(base(10, 0));
  auto shifted = r;
  for (auto& s : shifted.samples) {
    if (s.ping_ms) *s.ping_ms += 100.0;
  }
  auto res = compare_reports(r, shifted, {5.0, 1.0});
  EXPECT_FALSE(res.pass);
  ASSERT_FALSE(res.diffs.empty());
  for (const auto& d : res.diffs) EXPECT_EQ(d.metric, "ping_ms");
  EXPECT_TRUE(compare_reports(r, shifted, {100.0, 0.0}).pass);
}

TEST(Compare, RateTolerance) {
  auto r = run_loopback(base(10, 0));
  auto other = r;
  other.samples[3].user_rate_hz += 2.0;
  EXPECT_FALSE(compare_reports(r, other, {0.0, 1.0}).pass);
  EXPECT_EQ(compare_reports(r, other, {0.0, 1.0}).diffs.at(0).metric, "user_rate_hz");
  EXPECT_TRUE(compare_reports(r, other, {0.0, 2.0}).pass);
}

TEST(Compare, MissingPingOnOneSideIsADiff) {
  auto r = run_loopback(base(10, 0));
  auto other = r;
  for (auto& s : other.samples) s.ping_ms.reset();
  EXPECT_FALSE(compare_reports(r, other, {1000.0, 1000.0}).pass);
}

TEST(Compare, ShapeMismatch) {
  auto a = run_loopback(base(10, 0));
  auto b = a;
  b.samples.pop_back();
  EXPECT_THROW(compare_reports(a, b, {}), ShapeMismatch);
  EXPECT_THROW(compare_reports(b, a, {}), ShapeMismatch);
  b = a;
  b.samples[0].peer_id = "someone-else";
  EXPECT_THROW(compare_reports(a, b, {}), ShapeMismatch);
  b = a;
  b.samples[0].player_id = "P";
  EXPECT_THROW(compare_reports(a, b, {}), ShapeMismatch);
  b = a;
  b.samples.push_back(b.samples.front());
  EXPECT_THROW(compare_samples(b.samples, b.samples, {}), ShapeMismatch);
}

TEST(Compare, RowOrderDoesNotMatter) {
  auto a = run_loopback(base(10, 0));
  auto b = a;
  std::reverse(b.samples.begin(), b.samples.end());
  EXPECT_TRUE(compare_reports(a, b, {}).pass);
}

}  // namespace
}  // namespace phonepad
