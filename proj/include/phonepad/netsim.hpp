// Network transport for the simulator: the same scenario as run_loopback, but
// every endpoint talks to a real relay over TCP and time is the wall clock.
// Access-link latency and jitter are emulated with timers on the phone side
// (both directions), so the scenario shape matches the loopback run; sample
// rows carry the nominal tick time.
#pragma once

#include "phonepad/net.hpp"
#include "phonepad/sim.hpp"

#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace phonepad {

struct NetworkRunOptions {
  /// Relay to use; when empty an in-process relay is started on 127.0.0.1.
  std::optional<std::pair<std::string, std::uint16_t>> relay;
  std::chrono::milliseconds setup_timeout{5000};
  std::chrono::milliseconds drain_timeout{5000};
};

namespace detail {

using SteadyClock = std::chrono::steady_clock;

/// Delay line driven by an asio timer; ordering follows DelayLink lanes.
class TimedLink {
 public:
  TimedLink(asio::io_context& io, SteadyClock::time_point epoch, DelayLink link,
            std::function<void(std::string)> deliver)
      : timer_(io), epoch_(epoch), link_(std::move(link)), deliver_(std::move(deliver)) {}

  void push(std::string frame) {
    auto due = link_.schedule(now_us(), lane_of(frame));
    // Equal keys keep insertion order.
    auto it = queue_.emplace(due, std::move(frame));
    if (it == queue_.begin()) arm();
  }

  std::size_t pending() const { return queue_.size(); }

 private:
  std::int64_t now_us() const {
    return std::chrono::duration_cast<std::chrono::microseconds>(SteadyClock::now() - epoch_).count();
  }

  void arm() {
    timer_.expires_at(epoch_ + std::chrono::microseconds(queue_.begin()->first));
    timer_.async_wait([this](boost::system::error_code ec) {
      if (ec) return;
      fire();
    });
  }

  void fire() {
    auto now = now_us();
    while (!queue_.empty() && queue_.begin()->first <= now) {
      auto frame = std::move(queue_.begin()->second);
      queue_.erase(queue_.begin());
      deliver_(std::move(frame));
    }
    if (!queue_.empty()) arm();
  }

  asio::steady_timer timer_;
  SteadyClock::time_point epoch_;
  DelayLink link_;
  std::function<void(std::string)> deliver_;
  std::multimap<std::int64_t, std::string> queue_;
};

class NetworkWorld {
 public:
  NetworkWorld(const ScenarioConfig& cfg, NetworkRunOptions opts) : cfg_(cfg), opts_(std::move(opts)) {}

  StatsReport run() {
    std::string host = "127.0.0.1";
    std::uint16_t port = 0;
    std::unique_ptr<RelayServer> server;
    if (opts_.relay) {
      std::tie(host, port) = *opts_.relay;
    } else {
      server = std::make_unique<RelayServer>(RelayServer::Options{"127.0.0.1", 0, kDefaultIdleTimeoutMs});
      server->start();
      port = server->port();
    }
    endpoint_ = tcp::endpoint(asio::ip::make_address(host), port);
    epoch_ = SteadyClock::now();

    open_room();
    connect_phones();
    auto report = drive();
    shutdown();
    return report;
  }

 private:
  std::int64_t now_ms() const {
    return std::chrono::duration_cast<std::chrono::milliseconds>(SteadyClock::now() - epoch_).count();
  }

  template <class Pred>
  void wait_for(Pred done, std::chrono::milliseconds timeout, const char* what) {
    auto deadline = SteadyClock::now() + timeout;
    while (!done()) {
      if (SteadyClock::now() >= deadline) throw std::runtime_error(std::string("timed out ") + what);
      io_.restart();
      io_.run_one_for(std::chrono::milliseconds(10));
    }
  }

  std::shared_ptr<LineClient> connect_client() {
    auto client = LineClient::create(io_);
    std::optional<boost::system::error_code> result;
    client->async_connect(endpoint_, [&](boost::system::error_code ec) { result = ec; });
    wait_for([&] { return result.has_value(); }, opts_.setup_timeout, "connecting to relay");
    if (*result) throw boost::system::system_error(*result, "connecting to relay");
    return client;
  }

  void open_room() {
    // A shared relay may already host the seeded id; fall back to fresh ids.
    for (int attempt = 0; attempt < 4; ++attempt) {
      session_id_ = attempt == 0 ? sim_session_id(cfg_.seed) : new_session();
      auto client = connect_client();
      auto display = std::make_shared<DisplaySession>(
          session_id_, [client](std::string f) { client->send(f); });
      auto gone = std::make_shared<bool>(false);
      client->start(
          [this, display](std::string_view line) {
            audit_.observe(line);
            display->on_frame(line, now_ms());
          },
          [gone] { *gone = true; });
      display_client_ = client;
      display_ = display;
      display_->open(now_ms());
      wait_for([&] { return display_->room_open() || display_->closed_reason() || *gone; },
               opts_.setup_timeout, "opening room");
      if (display_->room_open()) return;
      display_client_->close();
    }
    throw std::runtime_error("relay refused to open a room");
  }

  void connect_phones() {
    for (int i = 0; i < cfg_.n_clients; ++i) {
      auto idx = static_cast<std::uint64_t>(i);
      auto client = connect_client();
      auto phone_index = static_cast<std::size_t>(i);
      up_.push_back(std::make_unique<TimedLink>(
          io_, epoch_,
          DelayLink(cfg_.one_way_latency_ms, cfg_.jitter_ms, derive_seed(cfg_.seed, SeedStream::uplink, idx)),
          [client](std::string f) { client->send(f); }));
      down_.push_back(std::make_unique<TimedLink>(
          io_, epoch_,
          DelayLink(cfg_.one_way_latency_ms, cfg_.jitter_ms,
                    derive_seed(cfg_.seed, SeedStream::downlink, idx)),
          [this, phone_index](std::string f) { phones_[phone_index]->on_frame(f, now_ms()); }));
      auto* up = up_.back().get();
      auto* down = down_.back().get();
      phones_.push_back(std::make_unique<PhoneSession>(
          sim_peer_id(i), JoinParams{session_id_, std::nullopt, true}, cfg_.controller,
          cfg_.throttle_min_interval_ms, [up](std::string f) { up->push(std::move(f)); }));
      client->start([down](std::string_view line) { down->push(std::string(line)); });
      phone_clients_.push_back(client);
    }
  }

  StatsReport drive() {
    StatsReport report;
    report.config = cfg_;
    const auto start = SteadyClock::now();
    const auto ticks = duration_ms(cfg_) / kSampleTickMs;

    std::vector<std::unique_ptr<asio::steady_timer>> timers;
    std::vector<std::shared_ptr<std::vector<TraceEvent>>> traces;
    for (int i = 0; i < cfg_.n_clients; ++i) {
      phones_[static_cast<std::size_t>(i)]->connect(now_ms());
      traces.push_back(std::make_shared<std::vector<TraceEvent>>(
          gen_trace(cfg_.controller, cfg_.send_rate_hz, cfg_.duration_s,
                    derive_seed(cfg_.seed, SeedStream::trace, static_cast<std::uint64_t>(i)))));
      timers.push_back(std::make_unique<asio::steady_timer>(io_));
    }

    std::function<void(std::size_t, std::size_t)> offer = [&](std::size_t i, std::size_t next) {
      const auto& trace = *traces[i];
      if (next >= trace.size()) return;
      timers[i]->expires_at(start + std::chrono::microseconds(trace[next].t_us));
      timers[i]->async_wait([&, i, next](boost::system::error_code ec) {
        if (ec) return;
        phones_[i]->offer((*traces[i])[next].payload, now_ms());
        offer(i, next + 1);
      });
    };
    for (std::size_t i = 0; i < phones_.size(); ++i) offer(i, 0);

    bool ticks_done = ticks == 0;
    asio::steady_timer tick_timer(io_);
    std::function<void(std::int64_t)> tick = [&](std::int64_t k) {
      tick_timer.expires_at(start + std::chrono::milliseconds(k * kSampleTickMs));
      tick_timer.async_wait([&, k](boost::system::error_code ec) {
        if (ec) return;
        auto now = now_ms();
        for (auto& row : display_->sample(now)) {
          row.t_ms = k * kSampleTickMs;
          report.samples.push_back(std::move(row));
        }
        if (k < ticks) {
          display_->send_pings(now);
          tick(k + 1);
        } else {
          ticks_done = true;
        }
      });
    };
    if (ticks > 0) tick(1);

    auto trace_end = start + std::chrono::milliseconds(duration_ms(cfg_));
    wait_for([&] { return ticks_done && SteadyClock::now() >= trace_end; },
             std::chrono::milliseconds(duration_ms(cfg_)) + opts_.setup_timeout, "running scenario");

    auto expected = [&] {
      std::uint64_t n = 0;
      for (const auto& p : phones_) n += p->forwarded();
      return n;
    };
    try {
      wait_for([&] { return audit_.user_frames() >= expected(); }, opts_.drain_timeout, "draining");
    } catch (const std::runtime_error&) {
      // Reported as frame loss below.
    }

    for (const auto& p : phones_) {
      report.frames_sent += p->offered();
      report.frames_throttled += p->throttled();
    }
    report.frames_received = audit_.user_frames();
    report.seq_violations = audit_.violations();
    finish_report(report);
    return report;
  }

  void shutdown() {
    for (auto& c : phone_clients_) c->close();
    if (display_client_) display_client_->close();
    io_.restart();
    io_.run_for(std::chrono::milliseconds(50));
    io_.stop();
  }

  asio::io_context io_;
  ScenarioConfig cfg_;
  NetworkRunOptions opts_;
  tcp::endpoint endpoint_;
  SteadyClock::time_point epoch_;
  std::string session_id_;
  std::shared_ptr<LineClient> display_client_;
  std::shared_ptr<DisplaySession> display_;
  std::vector<std::shared_ptr<LineClient>> phone_clients_;
  std::vector<std::unique_ptr<TimedLink>> up_;
  std::vector<std::unique_ptr<TimedLink>> down_;
  std::vector<std::unique_ptr<PhoneSession>> phones_;
  ArrivalAudit audit_;
};

}  // namespace detail

/// Runs a scenario against a real relay over TCP.
inline StatsReport run_network(const ScenarioConfig& cfg, NetworkRunOptions opts = {}) {
  validate(cfg);
  detail::NetworkWorld world(cfg, std::move(opts));
  return world.run();
}

/// Runs a scenario with the transport named in the config.
inline StatsReport run_scenario(const ScenarioConfig& cfg, NetworkRunOptions opts = {}) {
  validate(cfg);
  return cfg.transport == TransportMode::loopback ? run_loopback(cfg) : run_network(cfg, std::move(opts));
}

}  // namespace phonepad
