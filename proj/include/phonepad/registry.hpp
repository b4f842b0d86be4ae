// Display-side session state: the connected phones, their player-id claims and
// the lifecycle events produced while admitting, feeding and closing them.
//
// Claim rule on join:
//   no player id                        -> accept
//   player id unclaimed                 -> accept, record claim
//   claimed, first_connected == true    -> reject (state untouched)
//   claimed, first_connected == false   -> replace the current holder
//
// A Registry has a single writer. It is a plain value: copy it to take a
// consistent snapshot from another thread.
#pragma once

#include "phonepad/controllers.hpp"
#include "phonepad/protocol.hpp"
#include "phonepad/telemetry.hpp"

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace phonepad {

inline constexpr std::int64_t kDefaultIdleTimeoutMs = 5000;

// --- session ids ---------------------------------------------------------------

namespace detail {

inline std::string nine_digits(std::mt19937_64& rng) {
  constexpr std::uint64_t kRange = 1'000'000'000ULL;
  constexpr std::uint64_t kLimit = UINT64_MAX - (UINT64_MAX % kRange);
  std::uint64_t v = 0;
  do {
    v = rng();
  } while (v >= kLimit);
  char buf[16];
  std::snprintf(buf, sizeof buf, "%09llu", static_cast<unsigned long long>(v % kRange));
  return buf;
}

struct SessionHistory {
  std::mutex mu;
  std::set<std::string> issued;
  std::mt19937_64 rng{std::random_device{}()};
};

inline SessionHistory& session_history() {
  static SessionHistory h;
  return h;
}

}  // namespace detail

/// Returns a nine-digit session id. A seeded call is a pure function of the
/// seed; unseeded calls never repeat an id within the process.
inline std::string new_session(std::optional<std::uint64_t> seed = std::nullopt) {
  if (seed) {
    std::mt19937_64 rng(*seed);
    return detail::nine_digits(rng);
  }
  auto& h = detail::session_history();
  std::lock_guard lock(h.mu);
  for (;;) {
    auto id = detail::nine_digits(h.rng);
    if (h.issued.insert(id).second) {
      return id;
    }
  }
}

// --- registry types ----------------------------------------------------------------

enum class LifecycleKind { connected, rejected, replaced, data, disconnected };

constexpr std::string_view to_string(LifecycleKind k) {
  switch (k) {
    case LifecycleKind::connected: return "connected";
    case LifecycleKind::rejected: return "rejected";
    case LifecycleKind::replaced: return "replaced";
    case LifecycleKind::data: return "data";
    case LifecycleKind::disconnected: return "disconnected";
  }
  return "?";
}

/// `related_peer` links the two halves of a replacement: on the `replaced`
/// event it names the evicted peer, on that peer's `disconnected` event it names
/// the newcomer.
struct LifecycleEvent {
  LifecycleKind kind = LifecycleKind::connected;
  std::string peer_id;
  std::optional<std::string> player_id;
  std::int64_t t_ms = 0;
  std::optional<std::string> related_peer;

  friend bool operator==(const LifecycleEvent&, const LifecycleEvent&) = default;
};

enum class ClaimVerdict { accept, reject, replace };

struct ClaimDecision {
  ClaimVerdict verdict = ClaimVerdict::accept;
  std::optional<std::string> replaced_peer;

  friend bool operator==(const ClaimDecision&, const ClaimDecision&) = default;
};

enum class RegistryErrc { duplicate_peer, unknown_peer };

class RegistryError : public std::runtime_error {
 public:
  RegistryError(RegistryErrc code, const std::string& peer)
      : std::runtime_error(std::string(code == RegistryErrc::duplicate_peer ? "DuplicatePeer"
                                                                            : "UnknownPeer") +
                           ": " + peer),
        code_(code) {}
  RegistryErrc code() const noexcept { return code_; }

 private:
  RegistryErrc code_;
};

struct RegistryEntry {
  std::string peer_id;
  std::optional<std::string> player_id;
  // Absent until the kind is known, either from the hello or the first user
  // payload.
  std::optional<ControllerState> controller;
  std::int64_t connected_at = 0;
  std::int64_t last_seen = 0;
  std::uint64_t order = 0;  // admission counter, breaks connected_at ties

  PingEstimator ping;
  RateMeter rates;
  std::optional<std::uint64_t> last_user_seq;
  std::optional<std::uint64_t> last_stat_seq;

  friend bool operator==(const RegistryEntry&, const RegistryEntry&) = default;
};

struct SnapshotRow {
  std::string peer_id;
  std::optional<std::string> player_id;
  std::string controller;
  std::optional<double> ping_ms;
  double user_rate_hz = 0.0;
  double stat_rate_hz = 0.0;

  friend bool operator==(const SnapshotRow&, const SnapshotRow&) = default;
};

/// Frames that were dropped rather than applied.
struct RegistryCounters {
  std::uint64_t unknown_peer = 0;     // non-hello frame from a peer not in entries
  std::uint64_t duplicate_hello = 0;  // hello from a peer already admitted
  std::uint64_t wrong_session = 0;    // hello naming another session
  std::uint64_t out_of_order = 0;     // seq not strictly increasing within its class
  std::uint64_t bad_payload = 0;      // user payload that does not fit the controller
  std::uint64_t unknown_token = 0;    // pong for a ping we never sent (or expired)

  friend bool operator==(const RegistryCounters&, const RegistryCounters&) = default;
};

// Keys of hello payloads sent by phones.
inline constexpr const char* kHelloRole = "role";
inline constexpr const char* kHelloSession = "sid";
inline constexpr const char* kHelloFirstConnected = "fc";
inline constexpr const char* kHelloController = "ctl";
// Keys of stat ping/pong payloads.
inline constexpr const char* kPingToken = "tok";
inline constexpr const char* kPingOrigin = "o";
// Key of bye payloads.
inline constexpr const char* kByeReason = "reason";

class Registry {
 public:
  struct Options {
    std::int64_t rate_window_ms = kDefaultRateWindowMs;
    std::int64_t ping_period_ms = kDefaultPingPeriodMs;
    bool log_data_events = true;
  };

  explicit Registry(std::string session_id) : Registry(std::move(session_id), Options{}) {}
  Registry(std::string session_id, Options options)
      : session_id_(std::move(session_id)), options_(options) {}

  const std::string& session_id() const { return session_id_; }
  const std::map<std::string, RegistryEntry>& entries() const { return entries_; }
  const std::map<std::string, std::string>& claims() const { return claims_; }
  const std::vector<LifecycleEvent>& event_log() const { return event_log_; }
  const RegistryCounters& counters() const { return counters_; }

  const RegistryEntry* find(const std::string& peer_id) const {
    auto it = entries_.find(peer_id);
    return it == entries_.end() ? nullptr : &it->second;
  }

  /// Applies the claim rule for a newly connecting phone.
  ClaimDecision handle_join(const std::string& peer_id, const JoinParams& params, std::int64_t now,
                            std::optional<ControllerKind> kind = std::nullopt) {
    if (entries_.count(peer_id)) {
      throw RegistryError(RegistryErrc::duplicate_peer, peer_id);
    }
    const auto& player = params.player_id;
    ClaimDecision decision;
    if (player) {
      if (auto claim = claims_.find(*player); claim != claims_.end()) {
        if (params.first_connected) {
          log({LifecycleKind::rejected, peer_id, player, now, claim->second});
          return {ClaimVerdict::reject, std::nullopt};
        }
        std::string old_peer = claim->second;
        remove_entry(old_peer, now, peer_id);
        decision = {ClaimVerdict::replace, old_peer};
      }
    }

    RegistryEntry entry;
    entry.peer_id = peer_id;
    entry.player_id = player;
    if (kind) {
      entry.controller = create_controller(*kind, peer_id, player);
    }
    entry.connected_at = now;
    entry.last_seen = now;
    entry.order = next_order_++;
    entry.ping = PingEstimator(options_.ping_period_ms);
    entry.rates = RateMeter(options_.rate_window_ms);
    entries_.emplace(peer_id, std::move(entry));
    if (player) {
      claims_[*player] = peer_id;
    }
    log({LifecycleKind::connected, peer_id, player, now, std::nullopt});
    if (decision.verdict == ClaimVerdict::replace) {
      log({LifecycleKind::replaced, peer_id, player, now, decision.replaced_peer});
    }
    return decision;
  }

  /// Removes a phone and frees its claim.
  LifecycleEvent handle_close(const std::string& peer_id, std::int64_t now) {
    if (!entries_.count(peer_id)) {
      throw RegistryError(RegistryErrc::unknown_peer, peer_id);
    }
    return remove_entry(peer_id, now, std::nullopt);
  }

  /// Routes one decoded frame. Never throws for bad input: problems are
  /// counted in counters(). Returns the events appended by this frame.
  std::vector<LifecycleEvent> dispatch_frame(const Envelope& env, std::int64_t now) {
    auto mark = event_log_.size();
    auto entry_it = entries_.find(env.peer_id);

    if (env.kind == Kind::hello) {
      if (entry_it != entries_.end()) {
        ++counters_.duplicate_hello;
        return {};
      }
      JoinParams params;
      params.session_id = session_id_;
      params.player_id = env.player_id;
      std::optional<ControllerKind> kind;
      if (env.payload.is_object()) {
        const auto& d = env.payload;
        if (auto sid = d.find(kHelloSession); sid != d.end() && sid->is_string()) {
          if (sid->get_ref<const std::string&>() != session_id_) {
            ++counters_.wrong_session;
            return {};
          }
        }
        if (auto fc = d.find(kHelloFirstConnected); fc != d.end() && fc->is_boolean()) {
          params.first_connected = fc->get<bool>();
        }
        if (auto ctl = d.find(kHelloController); ctl != d.end() && ctl->is_string()) {
          kind = controller_kind_from_string(ctl->get_ref<const std::string&>());
        }
      }
      auto decision = handle_join(env.peer_id, params, now, kind);
      if (decision.verdict != ClaimVerdict::reject) {
        entries_.at(env.peer_id).last_user_seq = env.seq;
      }
      return tail(mark);
    }

    if (entry_it == entries_.end()) {
      ++counters_.unknown_peer;
      return {};
    }
    auto& entry = entry_it->second;

    switch (env.kind) {
      case Kind::user: {
        if (entry.last_user_seq && env.seq <= *entry.last_user_seq) {
          ++counters_.out_of_order;
          return {};
        }
        try {
          if (!entry.controller) {
            auto kind = infer_kind(env.payload);
            if (!kind) {
              throw ControllerError(ControllerErrc::payload_mismatch, "unrecognized payload");
            }
            entry.controller = create_controller(*kind, entry.peer_id, entry.player_id);
          }
          entry.controller = apply_user_payload(*entry.controller, env.payload);
        } catch (const ControllerError&) {
          ++counters_.bad_payload;
          entry.last_user_seq = env.seq;
          entry.last_seen = std::max(entry.last_seen, now);
          return {};
        }
        entry.last_user_seq = env.seq;
        entry.last_seen = std::max(entry.last_seen, now);
        entry.rates.record(RateClass::user, now);
        if (options_.log_data_events) {
          log({LifecycleKind::data, entry.peer_id, entry.player_id, now, std::nullopt});
        }
        return tail(mark);
      }
      case Kind::stat_ping:
      case Kind::stat_pong: {
        if (entry.last_stat_seq && env.seq <= *entry.last_stat_seq) {
          ++counters_.out_of_order;
          return {};
        }
        entry.last_stat_seq = env.seq;
        entry.last_seen = std::max(entry.last_seen, now);
        entry.rates.record(RateClass::stat, now);
        if (env.kind == Kind::stat_pong) {
          auto tok = env.payload.find(kPingToken);
          if (tok == env.payload.end() || !tok->is_number_unsigned() ||
              !entry.ping.pong(tok->get<std::uint64_t>(), now)) {
            ++counters_.unknown_token;
          }
        }
        return {};
      }
      case Kind::bye:
        remove_entry(env.peer_id, now, std::nullopt);
        return tail(mark);
      case Kind::hello:
        break;
    }
    return {};
  }

  /// Starts a ping towards `peer_id`; returns the echo token.
  std::optional<std::uint64_t> start_ping(const std::string& peer_id, std::int64_t now) {
    auto it = entries_.find(peer_id);
    if (it == entries_.end()) {
      return std::nullopt;
    }
    return it->second.ping.send(now);
  }

  /// Copies current ping and rate values into each controller's base fields.
  void refresh_telemetry(std::int64_t now) {
    for (auto& [_, e] : entries_) {
      if (e.controller) {
        auto& base = base_of(*e.controller);
        base.ping_ms = e.ping.ping_ms();
        base.user_rate_hz = e.rates.value(RateClass::user, now);
        base.stat_rate_hz = e.rates.value(RateClass::stat, now);
      }
    }
  }

  /// Rows ordered by admission time. Telemetry columns are evaluated at `now`.
  std::vector<SnapshotRow> snapshot(std::int64_t now) const {
    std::vector<const RegistryEntry*> order;
    order.reserve(entries_.size());
    for (const auto& [_, e] : entries_) {
      order.push_back(&e);
    }
    std::sort(order.begin(), order.end(), [](const RegistryEntry* a, const RegistryEntry* b) {
      return a->connected_at != b->connected_at ? a->connected_at < b->connected_at
                                                : a->order < b->order;
    });
    std::vector<SnapshotRow> rows;
    rows.reserve(order.size());
    for (const auto* e : order) {
      SnapshotRow row;
      row.peer_id = e->peer_id;
      row.player_id = e->player_id;
      row.controller = e->controller ? summarize(*e->controller) : std::string("pending");
      row.ping_ms = e->ping.ping_ms();
      row.user_rate_hz = e->rates.value(RateClass::user, now);
      row.stat_rate_hz = e->rates.value(RateClass::stat, now);
      rows.push_back(std::move(row));
    }
    return rows;
  }

  /// Closes every phone that has been silent for more than `idle_ms`.
  std::vector<std::string> sweep(std::int64_t now, std::int64_t idle_ms = kDefaultIdleTimeoutMs) {
    std::vector<std::string> idle;
    for (const auto& [peer, e] : entries_) {
      if (now - e.last_seen > idle_ms) {
        idle.push_back(peer);
      }
    }
    for (const auto& peer : idle) {
      remove_entry(peer, now, std::nullopt);
    }
    return idle;
  }

 private:
  LifecycleEvent remove_entry(const std::string& peer_id, std::int64_t now,
                              std::optional<std::string> replaced_by) {
    auto it = entries_.find(peer_id);
    auto player = it->second.player_id;
    if (player) {
      auto claim = claims_.find(*player);
      if (claim != claims_.end() && claim->second == peer_id) {
        claims_.erase(claim);
      }
    }
    entries_.erase(it);
    LifecycleEvent ev{LifecycleKind::disconnected, peer_id, player, now, std::move(replaced_by)};
    log(ev);
    return ev;
  }

  void log(LifecycleEvent ev) { event_log_.push_back(std::move(ev)); }

  std::vector<LifecycleEvent> tail(std::size_t mark) const {
    return {event_log_.begin() + static_cast<std::ptrdiff_t>(mark), event_log_.end()};
  }

  std::string session_id_;
  Options options_;
  std::map<std::string, RegistryEntry> entries_;
  std::map<std::string, std::string> claims_;
  std::vector<LifecycleEvent> event_log_;
  RegistryCounters counters_;
  std::uint64_t next_order_ = 0;
};

}  // namespace phonepad
