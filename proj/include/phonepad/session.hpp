// Transport-agnostic endpoints.
//
// DisplaySession is the computer-side half: it owns the Registry, answers the
// claim decisions with bye frames, pings every phone and samples telemetry.
// PhoneSession is the controller-side half: hello, throttled user frames and
// pong replies. Both hand finished frames to a send callback and take the
// current time as an argument.
#pragma once

#include "phonepad/controllers.hpp"
#include "phonepad/protocol.hpp"
#include "phonepad/registry.hpp"
#include "phonepad/telemetry.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace phonepad {

// Values of the bye `reason` field.
namespace bye_reason {
inline constexpr std::string_view name_taken = "name_taken";
inline constexpr std::string_view replaced = "replaced";
inline constexpr std::string_view idle = "idle";
inline constexpr std::string_view left = "left";
inline constexpr std::string_view gone = "gone";
inline constexpr std::string_view no_such_room = "no_such_room";
inline constexpr std::string_view duplicate_session = "duplicate_session";
inline constexpr std::string_view duplicate_peer = "duplicate_peer";
inline constexpr std::string_view display_gone = "display_gone";
inline constexpr std::string_view protocol_error = "protocol_error";
}  // namespace bye_reason

using SendFn = std::function<void(std::string)>;

/// Per-class sequence counters for one sender.
class SeqCounter {
 public:
  std::uint64_t next(Kind k) {
    return kind_class(k) == KindClass::stat ? stat_++ : user_++;
  }

 private:
  std::uint64_t user_ = 0;
  std::uint64_t stat_ = 0;
};

class DisplaySession {
 public:
  struct Options {
    std::int64_t idle_timeout_ms = kDefaultIdleTimeoutMs;
    Registry::Options registry{};
  };

  DisplaySession(std::string session_id, SendFn send)
      : DisplaySession(std::move(session_id), std::move(send), Options{}) {}
  DisplaySession(std::string session_id, SendFn send, Options options)
      : options_(options),
        registry_(session_id, options.registry),
        session_id_(std::move(session_id)),
        send_(std::move(send)) {}

  void on_event(std::function<void(const LifecycleEvent&)> cb) { on_event_ = std::move(cb); }

  /// Opens the room on the relay.
  void open(std::int64_t now) {
    emit(Kind::hello, session_id_, now, Json{{kHelloRole, "display"}});
  }

  void on_frame(std::string_view frame, std::int64_t now) {
    Envelope env;
    try {
      env = decode_envelope(frame);
    } catch (const ProtocolError&) {
      ++decode_errors_;
      return;
    }
    if (env.peer_id == session_id_) {
      handle_relay_control(env);
      return;
    }
    for (const auto& ev : registry_.dispatch_frame(env, now)) {
      react(ev, now);
    }
  }

  /// Sends one stat ping to every connected phone.
  void send_pings(std::int64_t now) {
    std::vector<std::string> peers;
    for (const auto& [peer, _] : registry_.entries()) {
      peers.push_back(peer);
    }
    for (const auto& peer : peers) {
      auto token = registry_.start_ping(peer, now);
      emit(Kind::stat_ping, peer, now, Json{{kPingToken, *token}, {kPingOrigin, now}});
    }
  }

  /// One telemetry row per connected phone, in admission order.
  std::vector<StatsSample> sample(std::int64_t now) {
    registry_.refresh_telemetry(now);
    std::vector<StatsSample> rows;
    for (auto& row : registry_.snapshot(now)) {
      rows.push_back(StatsSample{now, std::move(row.peer_id), std::move(row.player_id),
                                 row.ping_ms, row.user_rate_hz, row.stat_rate_hz});
    }
    return rows;
  }

  /// Closes phones silent for longer than the idle timeout.
  std::vector<std::string> sweep(std::int64_t now) {
    auto mark = registry_.event_log().size();
    auto closed = registry_.sweep(now, options_.idle_timeout_ms);
    for (const auto& peer : closed) {
      say_bye(peer, bye_reason::idle, now);
    }
    notify_since(mark);
    return closed;
  }

  /// Closes the room.
  void close(std::int64_t now) { say_bye(session_id_, bye_reason::left, now); }

  const Registry& registry() const { return registry_; }
  const std::string& session_id() const { return session_id_; }
  bool room_open() const { return room_open_; }
  const std::optional<std::string>& join_query() const { return join_query_; }
  const std::optional<std::string>& closed_reason() const { return closed_reason_; }
  std::uint64_t decode_errors() const { return decode_errors_; }

 private:
  void handle_relay_control(const Envelope& env) {
    if (env.kind == Kind::hello) {
      room_open_ = true;
      if (auto q = env.payload.find("join"); q != env.payload.end() && q->is_string()) {
        join_query_ = q->get<std::string>();
      }
    } else if (env.kind == Kind::bye) {
      room_open_ = false;
      auto r = env.payload.find(kByeReason);
      closed_reason_ = (r != env.payload.end() && r->is_string()) ? r->get<std::string>()
                                                                  : std::string("closed");
    }
  }

  void react(const LifecycleEvent& ev, std::int64_t now) {
    if (ev.kind == LifecycleKind::rejected) {
      say_bye(ev.peer_id, bye_reason::name_taken, now);
    } else if (ev.kind == LifecycleKind::replaced && ev.related_peer) {
      say_bye(*ev.related_peer, bye_reason::replaced, now);
    }
    if (on_event_) {
      on_event_(ev);
    }
  }

  void notify_since(std::size_t mark) {
    if (!on_event_) return;
    const auto& log = registry_.event_log();
    for (auto i = mark; i < log.size(); ++i) {
      on_event_(log[i]);
    }
  }

  void say_bye(const std::string& target, std::string_view reason, std::int64_t now) {
    emit(Kind::bye, target, now, Json{{kByeReason, std::string(reason)}});
  }

  void emit(Kind kind, const std::string& peer, std::int64_t now, Json payload) {
    Envelope env;
    env.kind = kind;
    env.peer_id = peer;
    env.seq = seq_.next(kind);
    env.t_ms = now;
    env.payload = std::move(payload);
    send_(encode_envelope(env));
  }

  Options options_;
  Registry registry_;
  std::string session_id_;
  SendFn send_;
  SeqCounter seq_;
  std::function<void(const LifecycleEvent&)> on_event_;
  bool room_open_ = false;
  std::optional<std::string> join_query_;
  std::optional<std::string> closed_reason_;
  std::uint64_t decode_errors_ = 0;
};

class PhoneSession {
 public:
  PhoneSession(std::string peer_id, JoinParams params, ControllerKind kind,
               std::int64_t throttle_min_interval_ms, SendFn send)
      : peer_id_(std::move(peer_id)),
        params_(std::move(params)),
        kind_(kind),
        throttle_(throttle_min_interval_ms),
        send_(std::move(send)) {}

  void connect(std::int64_t now) {
    Json d{{kHelloRole, "phone"},
           {kHelloSession, params_.session_id},
           {kHelloFirstConnected, params_.first_connected},
           {kHelloController, std::string(to_string(kind_))}};
    emit(Kind::hello, now, std::move(d));
  }

  /// Offers one user payload; returns true when it passed the throttle and was
  /// sent.
  bool offer(Json payload, std::int64_t now) {
    if (closed_) {
      return false;
    }
    ++offered_;
    if (throttle_.offer(now) == ThrottleDecision::drop) {
      ++throttled_;
      return false;
    }
    ++forwarded_;
    emit(Kind::user, now, std::move(payload));
    return true;
  }

  void on_frame(std::string_view frame, std::int64_t now) {
    Envelope env;
    try {
      env = decode_envelope(frame);
    } catch (const ProtocolError&) {
      ++decode_errors_;
      return;
    }
    if (env.kind == Kind::stat_ping) {
      if (closed_) return;
      Json echo = Json::object();
      if (auto tok = env.payload.find(kPingToken); tok != env.payload.end()) echo[kPingToken] = *tok;
      if (auto o = env.payload.find(kPingOrigin); o != env.payload.end()) echo[kPingOrigin] = *o;
      emit(Kind::stat_pong, now, std::move(echo));
    } else if (env.kind == Kind::bye) {
      closed_ = true;
      auto r = env.payload.find(kByeReason);
      closed_reason_ = (r != env.payload.end() && r->is_string()) ? r->get<std::string>()
                                                                  : std::string("closed");
    }
  }

  void leave(std::int64_t now) {
    if (closed_) return;
    emit(Kind::bye, now, Json{{kByeReason, std::string(bye_reason::left)}});
    closed_ = true;
    closed_reason_ = std::string(bye_reason::left);
  }

  const std::string& peer_id() const { return peer_id_; }
  bool closed() const { return closed_; }
  const std::optional<std::string>& closed_reason() const { return closed_reason_; }
  std::uint64_t offered() const { return offered_; }
  std::uint64_t forwarded() const { return forwarded_; }
  std::uint64_t throttled() const { return throttled_; }
  std::uint64_t decode_errors() const { return decode_errors_; }

 private:
  void emit(Kind kind, std::int64_t now, Json payload) {
    Envelope env;
    env.kind = kind;
    env.peer_id = peer_id_;
    env.player_id = params_.player_id;
    env.seq = seq_.next(kind);
    env.t_ms = now;
    env.payload = std::move(payload);
    send_(encode_envelope(env));
  }

  std::string peer_id_;
  JoinParams params_;
  ControllerKind kind_;
  Throttle throttle_;
  SendFn send_;
  SeqCounter seq_;
  bool closed_ = false;
  std::optional<std::string> closed_reason_;
  std::uint64_t offered_ = 0;
  std::uint64_t forwarded_ = 0;
  std::uint64_t throttled_ = 0;
  std::uint64_t decode_errors_ = 0;
};

}  // namespace phonepad
