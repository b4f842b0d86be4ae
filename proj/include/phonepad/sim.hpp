// Deterministic simulation: virtual phones and a virtual display exchange
// frames through RelayCore under a virtual clock, with seeded one-way latency
// and uniform jitter on each phone's access link.
//
// Timeline of one loopback run (times in virtual microseconds):
//   t=0        display opens its room, every phone sends hello
//   trace      each phone offers its trace events through its throttle
//   k*500 ms   the display samples telemetry, then pings every phone
//   end        after the last tick, in-flight frames are drained
#pragma once

#include "phonepad/controllers.hpp"
#include "phonepad/protocol.hpp"
#include "phonepad/registry.hpp"
#include "phonepad/relay.hpp"
#include "phonepad/session.hpp"
#include "phonepad/telemetry.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <queue>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace phonepad {

enum class TransportMode { loopback, network };

constexpr std::string_view to_string(TransportMode m) {
  return m == TransportMode::loopback ? "loopback" : "network";
}

inline std::optional<TransportMode> transport_from_string(std::string_view s) {
  if (s == "loopback") return TransportMode::loopback;
  if (s == "network") return TransportMode::network;
  return std::nullopt;
}

class ConfigInvalid : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ScenarioConfig {
  int n_clients = 1;
  ControllerKind controller = ControllerKind::joystick;
  double one_way_latency_ms = 10.0;
  double jitter_ms = 0.0;  // uniform +/- around the latency
  double send_rate_hz = 100.0;
  std::int64_t throttle_min_interval_ms = 0;
  double duration_s = 10.0;
  std::uint64_t seed = 1;
  TransportMode transport = TransportMode::loopback;
};

inline constexpr std::int64_t kSampleTickMs = 500;
inline constexpr double kMaxSimEvents = 5e7;

inline void validate(const ScenarioConfig& c) {
  auto bad = [](const std::string& what) { throw ConfigInvalid(what); };
  auto finite_nonneg = [](double v) { return std::isfinite(v) && v >= 0.0; };
  if (c.n_clients < 1) bad("clients must be >= 1");
  if (!finite_nonneg(c.one_way_latency_ms)) bad("latency must be a finite value >= 0");
  if (!finite_nonneg(c.jitter_ms)) bad("jitter must be a finite value >= 0");
  if (c.jitter_ms > c.one_way_latency_ms) bad("jitter must not exceed latency");
  if (!std::isfinite(c.send_rate_hz) || c.send_rate_hz <= 0.0) bad("rate must be > 0");
  if (c.throttle_min_interval_ms < 0) bad("throttle must be >= 0");
  if (!std::isfinite(c.duration_s) || c.duration_s <= 0.0) bad("duration must be > 0");
  if (c.duration_s > 86400.0) bad("duration must be at most one day");
  if (c.send_rate_hz * c.duration_s * c.n_clients > kMaxSimEvents) bad("scenario too large");
}

inline std::int64_t duration_ms(const ScenarioConfig& c) {
  return static_cast<std::int64_t>(std::llround(c.duration_s * 1000.0));
}

/// Samples with t_ms below this are excluded from rate aggregates: the rate
/// window has not yet filled with frames that crossed the link.
inline std::int64_t warmup_ms(const ScenarioConfig& c) {
  return kDefaultRateWindowMs +
         static_cast<std::int64_t>(std::ceil(c.one_way_latency_ms + c.jitter_ms));
}

// --- randomness ---------------------------------------------------------------

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline double unit(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double round3(double v) { return std::round(v * 1000.0) / 1000.0; }

}  // namespace detail

/// Independent stream seeds derived from the scenario seed.
enum class SeedStream : std::uint64_t { trace = 1, uplink = 2, downlink = 3 };

inline std::uint64_t derive_seed(std::uint64_t seed, SeedStream stream, std::uint64_t index) {
  return detail::splitmix64(seed ^ detail::splitmix64((static_cast<std::uint64_t>(stream) << 32) ^ index));
}

// --- traces ----------------------------------------------------------------------

struct TraceEvent {
  std::int64_t t_us = 0;
  Json payload;

  double t_ms() const { return static_cast<double>(t_us) / 1000.0; }
  friend bool operator==(const TraceEvent&, const TraceEvent&) = default;
};

/// rate_hz * duration_s events at uniform 1000/rate_hz ms spacing starting at 0.
inline std::vector<TraceEvent> gen_trace(ControllerKind kind, double rate_hz, double duration_s,
                                         std::uint64_t seed) {
  if (!std::isfinite(rate_hz) || rate_hz <= 0.0) throw ConfigInvalid("rate must be > 0");
  if (!std::isfinite(duration_s) || duration_s < 0.0) throw ConfigInvalid("duration must be >= 0");
  const auto count = static_cast<std::size_t>(std::floor(rate_hz * duration_s + 1e-9));
  std::mt19937_64 rng(seed);
  auto u = [&] { return detail::unit(rng); };

  std::vector<TraceEvent> out;
  out.reserve(count);
  // joystick: angle sweeps a full turn every two seconds
  const double phase = u() * 360.0;
  const double step = 360.0 / (2.0 * rate_hz);
  // touchpad stroke state
  int stroke_left = 0;
  double x = 0.5, y = 0.5;
  // nes pairing
  NesButton held = NesButton::a;

  for (std::size_t i = 0; i < count; ++i) {
    TraceEvent ev;
    ev.t_us = static_cast<std::int64_t>(std::llround(static_cast<double>(i) * 1e6 / rate_hz));
    switch (kind) {
      case ControllerKind::joystick: {
        double angle = std::fmod(phase + static_cast<double>(i) * step, 360.0);
        ev.payload = joystick_payload(detail::round3(angle), detail::round3(0.25 + 0.75 * u()));
        break;
      }
      case ControllerKind::touchpad: {
        TouchPhase ph;
        if (stroke_left == 0) {
          x = u();
          y = u();
          stroke_left = 5 + static_cast<int>(rng() % 26);
          ph = TouchPhase::start;
        } else if (stroke_left == 1) {
          ph = TouchPhase::end;
        } else {
          x = std::clamp(x + (u() - 0.5) * 0.1, 0.0, 1.0);
          y = std::clamp(y + (u() - 0.5) * 0.1, 0.0, 1.0);
          ph = TouchPhase::move;
        }
        --stroke_left;
        ev.payload = touch_payload(ph, detail::round3(x), detail::round3(y));
        break;
      }
      case ControllerKind::nes: {
        bool press = i % 2 == 0 && i + 1 < count;
        if (i % 2 == 0) held = kNesButtons[rng() % kNesButtons.size()];
        ev.payload = nes_payload(held, press);
        break;
      }
      case ControllerKind::accel: {
        double ax = (u() - 0.5) * 0.4;
        double ay = (u() - 0.5) * 0.4;
        double az = 9.81 + (u() - 0.5) * 0.4;
        ev.payload = accel_payload(detail::round3(ax), detail::round3(ay), detail::round3(az));
        break;
      }
    }
    out.push_back(std::move(ev));
  }
  return out;
}

// --- reports -----------------------------------------------------------------------

struct Aggregates {
  std::optional<double> ping_mean_ms;
  std::optional<double> ping_min_ms;
  std::optional<double> ping_max_ms;
  double user_rate_mean_hz = 0.0;
  double stat_rate_mean_hz = 0.0;
  std::size_t ping_samples = 0;
  std::size_t rate_samples = 0;

  friend bool operator==(const Aggregates&, const Aggregates&) = default;
};

/// Ping statistics use every sample that has a ping; rate means use samples
/// with t_ms >= warmup.
inline Aggregates compute_aggregates(const std::vector<StatsSample>& samples, std::int64_t warmup) {
  Aggregates a;
  double ping_sum = 0.0, user_sum = 0.0, stat_sum = 0.0;
  for (const auto& s : samples) {
    if (s.ping_ms) {
      ping_sum += *s.ping_ms;
      a.ping_min_ms = a.ping_min_ms ? std::min(*a.ping_min_ms, *s.ping_ms) : *s.ping_ms;
      a.ping_max_ms = a.ping_max_ms ? std::max(*a.ping_max_ms, *s.ping_ms) : *s.ping_ms;
      ++a.ping_samples;
    }
    if (s.t_ms >= warmup) {
      user_sum += s.user_rate_hz;
      stat_sum += s.stat_rate_hz;
      ++a.rate_samples;
    }
  }
  if (a.ping_samples) a.ping_mean_ms = ping_sum / static_cast<double>(a.ping_samples);
  if (a.rate_samples) {
    a.user_rate_mean_hz = user_sum / static_cast<double>(a.rate_samples);
    a.stat_rate_mean_hz = stat_sum / static_cast<double>(a.rate_samples);
  }
  return a;
}

struct StatsReport {
  ScenarioConfig config;
  std::vector<StatsSample> samples;  // ordered by (t_ms, peer_id)
  Aggregates aggregates;
  std::int64_t warmup_ms = 0;
  std::uint64_t frames_sent = 0;       // user payloads offered by phones
  std::uint64_t frames_throttled = 0;  // dropped by phone throttles
  std::uint64_t frames_received = 0;   // user frames that reached the display
  std::int64_t frame_loss = 0;         // sent - throttled - received
  std::uint64_t seq_violations = 0;    // non-increasing seq within (peer, class) at the display

  std::map<std::string, std::vector<StatsSample>> per_client() const {
    std::map<std::string, std::vector<StatsSample>> m;
    for (const auto& s : samples) m[s.peer_id].push_back(s);
    return m;
  }

  std::string csv() const { return export_csv(samples); }
};

inline std::string sim_peer_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "phone-%03d", index);
  return buf;
}

/// Checks ordering and counts user frames on the display's receive path.
class ArrivalAudit {
 public:
  void observe(std::string_view frame) {
    Envelope env;
    try {
      env = decode_envelope(frame);
    } catch (const ProtocolError&) {
      return;
    }
    if (env.kind == Kind::user) ++user_frames_;
    auto key = std::make_pair(env.peer_id, kind_class(env.kind));
    auto it = last_.find(key);
    // Byes synthesized by the relay may reuse a number; they end the stream.
    if (it != last_.end() && env.seq <= it->second && env.kind != Kind::bye) ++violations_;
    last_[key] = env.seq;
  }

  std::uint64_t user_frames() const { return user_frames_; }
  std::uint64_t violations() const { return violations_; }

 private:
  std::map<std::pair<std::string, KindClass>, std::uint64_t> last_;
  std::uint64_t user_frames_ = 0;
  std::uint64_t violations_ = 0;
};

inline void finish_report(StatsReport& r) {
  std::stable_sort(r.samples.begin(), r.samples.end(), [](const StatsSample& a, const StatsSample& b) {
    return std::tie(a.t_ms, a.peer_id) < std::tie(b.t_ms, b.peer_id);
  });
  r.warmup_ms = warmup_ms(r.config);
  r.aggregates = compute_aggregates(r.samples, r.warmup_ms);
  r.frame_loss = static_cast<std::int64_t>(r.frames_sent) -
                 static_cast<std::int64_t>(r.frames_throttled) -
                 static_cast<std::int64_t>(r.frames_received);
}

// --- virtual clock -------------------------------------------------------------

/// Event queue ordered by (time, phase, insertion). Phase 1 runs after every
/// phase-0 event scheduled for the same instant.
class VirtualScheduler {
 public:
  using Action = std::function<void()>;

  void at(std::int64_t t_us, Action action, int phase = 0) {
    queue_.push(Item{std::max(t_us, now_us_), phase, next_seq_++, std::move(action)});
  }

  bool run_one() {
    if (queue_.empty()) return false;
    Item item = queue_.top();
    queue_.pop();
    now_us_ = item.t_us;
    item.action();
    return true;
  }

  void run() {
    while (run_one()) {
    }
  }

  std::int64_t now_us() const { return now_us_; }
  std::int64_t now_ms() const { return now_us_ / 1000; }

 private:
  struct Item {
    std::int64_t t_us;
    int phase;
    std::uint64_t seq;
    Action action;
  };
  struct Later {
    bool operator()(const Item& a, const Item& b) const {
      return std::tie(a.t_us, a.phase, a.seq) > std::tie(b.t_us, b.phase, b.seq);
    }
  };

  std::priority_queue<Item, std::vector<Item>, Later> queue_;
  std::int64_t now_us_ = 0;
  std::uint64_t next_seq_ = 0;
};

/// One direction of a link: latency + uniform jitter per frame, FIFO.
/// Stat frames (ping/pong) and everything else travel in separate FIFO lanes
/// with separate jitter streams. Within a lane order is kept; a pong may pass
/// queued input, which has its own sequence class.
enum class Lane { data, stat };

class DelayLink {
 public:
  DelayLink(double latency_ms, double jitter_ms, std::uint64_t seed)
      : latency_ms_(latency_ms),
        jitter_ms_(jitter_ms),
        rng_{std::mt19937_64(seed), std::mt19937_64(detail::splitmix64(seed ^ 0x73746174ULL))} {}

  std::int64_t sample_us(Lane lane = Lane::data) {
    double ms = latency_ms_;
    if (jitter_ms_ > 0.0) ms += jitter_ms_ * (2.0 * detail::unit(rng_[index(lane)]) - 1.0);
    return std::max<std::int64_t>(0, std::llround(ms * 1000.0));
  }

  /// Delivery time of a frame sent at `now_us`.
  std::int64_t schedule(std::int64_t now_us, Lane lane = Lane::data) {
    auto& last = last_us_[index(lane)];
    last = std::max(now_us + sample_us(lane), last);
    return last;
  }

  std::int64_t last_delivery_us(Lane lane = Lane::data) const { return last_us_[index(lane)]; }

 private:
  static std::size_t index(Lane lane) { return lane == Lane::stat ? 1 : 0; }

  double latency_ms_;
  double jitter_ms_;
  std::array<std::mt19937_64, 2> rng_;
  std::array<std::int64_t, 2> last_us_{0, 0};
};

// Frames come from encode_envelope, so the kind sits at a fixed offset.
inline Lane lane_of(std::string_view frame) {
  constexpr std::string_view prefix = "{\"v\":1,\"k\":\"s";
  return frame.substr(0, prefix.size()) == prefix ? Lane::stat : Lane::data;
}

/// Session id used by simulated displays.
inline std::string sim_session_id(std::uint64_t seed) { return new_session(seed); }

// --- loopback run --------------------------------------------------------------

namespace detail {

class LoopbackWorld : public RelayOutbox {
 public:
  explicit LoopbackWorld(const ScenarioConfig& cfg)
      : cfg_(cfg), relay_(*this), session_id_(sim_session_id(cfg.seed)) {
    display_ = std::make_unique<DisplaySession>(session_id_, [this](std::string f) {
      auto t = display_up_.schedule(sched_.now_us());
      sched_.at(t, [this, f = std::move(f)] { relay_.on_frame(kDisplayConn, f, sched_.now_ms()); });
    });
    for (int i = 0; i < cfg.n_clients; ++i) {
      auto idx = static_cast<std::uint64_t>(i);
      up_.emplace_back(cfg.one_way_latency_ms, cfg.jitter_ms, derive_seed(cfg.seed, SeedStream::uplink, idx));
      down_.emplace_back(cfg.one_way_latency_ms, cfg.jitter_ms,
                         derive_seed(cfg.seed, SeedStream::downlink, idx));
      JoinParams params{session_id_, std::nullopt, true};
      phones_.push_back(std::make_unique<PhoneSession>(
          sim_peer_id(i), params, cfg.controller, cfg.throttle_min_interval_ms,
          [this, i](std::string f) {
            auto conn = phone_conn(i);
            auto t = up_[static_cast<std::size_t>(i)].schedule(sched_.now_us(), lane_of(f));
            sched_.at(t, [this, conn, f = std::move(f)] { relay_.on_frame(conn, f, sched_.now_ms()); });
          }));
    }
  }

  StatsReport run() {
    StatsReport report;
    report.config = cfg_;
    const auto end_ms = duration_ms(cfg_);
    const std::int64_t ticks = end_ms / kSampleTickMs;

    sched_.at(0, [this] {
      relay_.on_open(kDisplayConn, 0);
      display_->open(0);
    });
    for (int i = 0; i < cfg_.n_clients; ++i) {
      sched_.at(0, [this, i] {
        relay_.on_open(phone_conn(i), 0);
        phones_[static_cast<std::size_t>(i)]->connect(0);
      });
      auto trace = std::make_shared<std::vector<TraceEvent>>(
          gen_trace(cfg_.controller, cfg_.send_rate_hz, cfg_.duration_s,
                    derive_seed(cfg_.seed, SeedStream::trace, static_cast<std::uint64_t>(i))));
      schedule_offer(i, trace, 0);
    }
    for (std::int64_t k = 1; k <= ticks; ++k) {
      sched_.at(k * kSampleTickMs * 1000, [this, k, ticks, &report] {
        auto now = sched_.now_ms();
        for (auto& row : display_->sample(now)) report.samples.push_back(std::move(row));
        if (k < ticks) display_->send_pings(now);
      }, /*phase=*/1);
    }
    sched_.run();

    for (const auto& p : phones_) {
      report.frames_sent += p->offered();
      report.frames_throttled += p->throttled();
    }
    report.frames_received = audit_.user_frames();
    report.seq_violations = audit_.violations();
    finish_report(report);
    return report;
  }

  const RelayCore& relay() const { return relay_; }
  const DisplaySession& display() const { return *display_; }

 private:
  static constexpr ConnId kDisplayConn = 1;
  static ConnId phone_conn(int i) { return 2 + static_cast<ConnId>(i); }

  void schedule_offer(int i, std::shared_ptr<std::vector<TraceEvent>> trace, std::size_t next) {
    if (next >= trace->size()) return;
    sched_.at((*trace)[next].t_us, [this, i, trace, next] {
      phones_[static_cast<std::size_t>(i)]->offer((*trace)[next].payload, sched_.now_ms());
      schedule_offer(i, trace, next + 1);
    });
  }

  // RelayOutbox
  void send(ConnId conn, std::string frame) override {
    if (closed_.count(conn)) return;
    if (conn == kDisplayConn) {
      auto t = display_down_.schedule(sched_.now_us());
      sched_.at(t, [this, f = std::move(frame)] {
        audit_.observe(f);
        display_->on_frame(f, sched_.now_ms());
      });
      return;
    }
    auto i = static_cast<std::size_t>(conn - 2);
    auto t = down_[i].schedule(sched_.now_us(), lane_of(frame));
    sched_.at(t, [this, i, f = std::move(frame)] { phones_[i]->on_frame(f, sched_.now_ms()); });
  }

  void close(ConnId conn) override { closed_.insert(conn); }

  ScenarioConfig cfg_;
  VirtualScheduler sched_;
  RelayCore relay_;
  std::string session_id_;
  std::unique_ptr<DisplaySession> display_;
  std::vector<std::unique_ptr<PhoneSession>> phones_;
  DelayLink display_up_{0.0, 0.0, 0};
  DelayLink display_down_{0.0, 0.0, 0};
  std::vector<DelayLink> up_;
  std::vector<DelayLink> down_;
  std::set<ConnId> closed_;
  ArrivalAudit audit_;
};

}  // namespace detail

/// Runs a scenario over the in-process relay under the virtual clock.
inline StatsReport run_loopback(const ScenarioConfig& cfg) {
  validate(cfg);
  detail::LoopbackWorld world(cfg);
  return world.run();
}

// --- comparison -----------------------------------------------------------------

class ShapeMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Tolerances {
  double ping_ms = 0.0;
  double rate_hz = 0.0;
};

struct MetricDiff {
  std::int64_t t_ms = 0;
  std::string peer_id;
  std::string metric;
  std::optional<double> a;
  std::optional<double> b;
};

struct CompareResult {
  bool pass = true;
  std::size_t rows = 0;
  std::vector<MetricDiff> diffs;  // only the metrics outside tolerance
};

/// Rows are matched by (t_ms, peer_id); both sides must contain the same keys
/// with the same player ids.
inline CompareResult compare_samples(const std::vector<StatsSample>& a,
                                     const std::vector<StatsSample>& b, Tolerances tol) {
  using Key = std::pair<std::int64_t, std::string>;
  auto index = [](const std::vector<StatsSample>& v, const char* side) {
    std::map<Key, const StatsSample*> m;
    for (const auto& s : v) {
      if (!m.emplace(Key{s.t_ms, s.peer_id}, &s).second) {
        throw ShapeMismatch(std::string("duplicate row in ") + side + " at t_ms=" +
                            std::to_string(s.t_ms) + " peer_id=" + s.peer_id);
      }
    }
    return m;
  };
  auto ia = index(a, "A");
  auto ib = index(b, "B");
  for (const auto& [k, _] : ia) {
    if (!ib.count(k)) {
      throw ShapeMismatch("row t_ms=" + std::to_string(k.first) + " peer_id=" + k.second +
                          " only in A");
    }
  }
  for (const auto& [k, _] : ib) {
    if (!ia.count(k)) {
      throw ShapeMismatch("row t_ms=" + std::to_string(k.first) + " peer_id=" + k.second +
                          " only in B");
    }
  }

  CompareResult r;
  r.rows = ia.size();
  auto check = [&](const Key& k, const char* metric, std::optional<double> x, std::optional<double> y,
                   double t) {
    bool ok = (!x && !y) || (x && y && std::fabs(*x - *y) <= t + 1e-9);
    if (!ok) r.diffs.push_back(MetricDiff{k.first, k.second, metric, x, y});
  };
  for (const auto& [k, sa] : ia) {
    const auto* sb = ib.at(k);
    if (sa->player_id != sb->player_id) {
      throw ShapeMismatch("player_id differs at t_ms=" + std::to_string(k.first) +
                          " peer_id=" + k.second);
    }
    check(k, "ping_ms", sa->ping_ms, sb->ping_ms, tol.ping_ms);
    check(k, "user_rate_hz", sa->user_rate_hz, sb->user_rate_hz, tol.rate_hz);
    check(k, "stat_rate_hz", sa->stat_rate_hz, sb->stat_rate_hz, tol.rate_hz);
  }
  r.pass = r.diffs.empty();
  return r;
}

inline CompareResult compare_reports(const StatsReport& a, const StatsReport& b, Tolerances tol) {
  return compare_samples(a.samples, b.samples, tol);
}

}  // namespace phonepad
