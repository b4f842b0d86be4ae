// Relay core: rooms keyed by session id, one display per room, any number of
// phones. Phones' frames go to their room's display; the display's frames go
// to the phone named in their `p` field.
//
// The core does not own sockets. A transport reports connection events with
// on_open / on_frame / on_close and receives output through RelayOutbox, so
// the same core runs over an in-process loopback or a network listener.
//
// The relay makes no claim decisions. Player ids are carried through
// untouched; admission policy belongs to the display's Registry.
#pragma once

#include "phonepad/protocol.hpp"
#include "phonepad/registry.hpp"
#include "phonepad/session.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace phonepad {

using ConnId = std::uint64_t;

class RelayOutbox {
 public:
  virtual ~RelayOutbox() = default;
  virtual void send(ConnId conn, std::string frame) = 0;
  /// Flushes anything queued for `conn`, then closes it.
  virtual void close(ConnId conn) = 0;
};

struct RelayCounters {
  std::uint64_t frames_in = 0;
  std::uint64_t frames_routed = 0;
  std::uint64_t malformed = 0;        // undecodable frames
  std::uint64_t unknown_target = 0;   // display frame naming a phone not in the room
  std::uint64_t spoofed = 0;          // phone frame whose `p` is not the phone's id
  std::uint64_t not_joined = 0;       // non-hello frame before hello, or repeated hello
  std::uint64_t rejected_joins = 0;   // no such room, duplicate peer or session
  std::uint64_t idle_closed = 0;

  friend bool operator==(const RelayCounters&, const RelayCounters&) = default;
};

enum class ConnRole { unassigned, display, phone };

/// Read-only view of one room, for tests and diagnostics.
struct RoomView {
  std::string session_id;
  ConnId display = 0;
  std::map<std::string, ConnId> phones;
  std::int64_t created_at = 0;

  friend bool operator==(const RoomView&, const RoomView&) = default;
};

class RelayCore {
 public:
  struct Options {
    std::int64_t idle_timeout_ms = kDefaultIdleTimeoutMs;
  };

  explicit RelayCore(RelayOutbox& out) : RelayCore(out, Options{}) {}
  RelayCore(RelayOutbox& out, Options options) : out_(out), options_(options) {}

  void on_open(ConnId conn, std::int64_t now) {
    conns_[conn] = Conn{ConnRole::unassigned, {}, {}, now, std::nullopt};
  }

  void on_frame(ConnId conn, std::string_view frame, std::int64_t now) {
    auto it = conns_.find(conn);
    if (it == conns_.end()) {
      return;  // closed by us; the transport may still deliver buffered input
    }
    ++counters_.frames_in;
    it->second.last_activity = now;

    Envelope env;
    try {
      env = decode_envelope(frame);
    } catch (const ProtocolError&) {
      ++counters_.malformed;
      return;
    }

    switch (it->second.role) {
      case ConnRole::unassigned:
        admit(conn, env, frame, now);
        break;
      case ConnRole::display:
        from_display(conn, env, frame, now);
        break;
      case ConnRole::phone:
        from_phone(conn, env, frame, now);
        break;
    }
  }

  /// The transport lost the connection.
  void on_close(ConnId conn, std::int64_t now) {
    auto it = conns_.find(conn);
    if (it == conns_.end()) {
      return;
    }
    Conn c = it->second;
    conns_.erase(it);
    if (c.role == ConnRole::phone) {
      drop_phone(c, bye_reason::gone, now, std::nullopt);
    } else if (c.role == ConnRole::display) {
      teardown(c.session, bye_reason::display_gone, now, /*notify_display=*/false);
    }
  }

  /// Closes connections idle for longer than the timeout. Returns the ids of
  /// the phones and rooms that were closed.
  std::vector<std::string> sweep(std::int64_t now) {
    std::vector<ConnId> idle;
    for (const auto& [id, c] : conns_) {
      if (now - c.last_activity > options_.idle_timeout_ms) {
        idle.push_back(id);
      }
    }
    std::vector<std::string> closed;
    for (auto id : idle) {
      auto it = conns_.find(id);
      if (it == conns_.end()) {
        continue;  // already gone with its room
      }
      ++counters_.idle_closed;
      Conn c = it->second;
      if (c.role == ConnRole::phone) {
        closed.push_back(c.peer);
        drop_phone(c, bye_reason::idle, now, id);
        conns_.erase(id);
        out_.close(id);
      } else if (c.role == ConnRole::display) {
        closed.push_back(c.session);
        teardown(c.session, bye_reason::idle, now, /*notify_display=*/true);
      } else {
        conns_.erase(id);
        out_.close(id);
      }
    }
    return closed;
  }

  bool has_room(const std::string& session_id) const { return rooms_.count(session_id) > 0; }
  std::size_t room_count() const { return rooms_.size(); }
  std::size_t connection_count() const { return conns_.size(); }
  const RelayCounters& counters() const { return counters_; }

  std::optional<RoomView> room(const std::string& session_id) const {
    auto it = rooms_.find(session_id);
    if (it == rooms_.end()) {
      return std::nullopt;
    }
    return RoomView{it->first, it->second.display, it->second.phones, it->second.created_at};
  }

  std::vector<RoomView> rooms() const {
    std::vector<RoomView> v;
    for (const auto& [sid, r] : rooms_) {
      v.push_back(RoomView{sid, r.display, r.phones, r.created_at});
    }
    return v;
  }

 private:
  struct Conn {
    ConnRole role = ConnRole::unassigned;
    std::string session;
    std::string peer;
    std::int64_t last_activity = 0;
    std::optional<std::uint64_t> last_user_seq;
  };

  struct Room {
    ConnId display = 0;
    std::map<std::string, ConnId> phones;
    std::int64_t created_at = 0;
    std::uint64_t seq = 0;  // for frames the relay itself originates
  };

  void admit(ConnId conn, const Envelope& env, std::string_view frame, std::int64_t now) {
    if (env.kind != Kind::hello) {
      ++counters_.not_joined;
      return;
    }
    auto sid = env.payload.find(kHelloSession);
    if (sid == env.payload.end() || !sid->is_string()) {
      open_room(conn, env.peer_id, now);
    } else {
      join_room(conn, env, sid->get<std::string>(), frame, now);
    }
  }

  void open_room(ConnId conn, const std::string& session_id, std::int64_t now) {
    if (!is_valid_session_id(session_id) || rooms_.count(session_id)) {
      ++counters_.rejected_joins;
      auto reason = rooms_.count(session_id) ? bye_reason::duplicate_session
                                             : bye_reason::protocol_error;
      refuse(conn, session_id, reason, now);
      return;
    }
    auto& c = conns_.at(conn);
    c.role = ConnRole::display;
    c.session = session_id;
    auto& room = rooms_[session_id];
    room.display = conn;
    room.created_at = now;
    Envelope ack;
    ack.kind = Kind::hello;
    ack.peer_id = session_id;
    ack.seq = room.seq++;
    ack.t_ms = now;
    ack.payload = Json{{kHelloRole, "relay"}, {"join", "id=" + session_id}};
    out_.send(conn, encode_envelope(ack));
  }

  void join_room(ConnId conn, const Envelope& env, const std::string& session_id,
                 std::string_view frame, std::int64_t now) {
    auto room = rooms_.find(session_id);
    if (room == rooms_.end()) {
      ++counters_.rejected_joins;
      refuse(conn, env.peer_id, bye_reason::no_such_room, now);
      return;
    }
    if (env.peer_id == session_id || room->second.phones.count(env.peer_id)) {
      ++counters_.rejected_joins;
      refuse(conn, env.peer_id, bye_reason::duplicate_peer, now);
      return;
    }
    auto& c = conns_.at(conn);
    c.role = ConnRole::phone;
    c.session = session_id;
    c.peer = env.peer_id;
    c.last_user_seq = env.seq;
    room->second.phones.emplace(env.peer_id, conn);
    forward(room->second.display, frame);
  }

  void from_display(ConnId conn, const Envelope& env, std::string_view frame, std::int64_t now) {
    const auto& session = conns_.at(conn).session;
    auto& room = rooms_.at(session);
    if (env.peer_id == session) {
      if (env.kind == Kind::bye) {
        teardown(session, bye_reason::display_gone, now, /*notify_display=*/false);
        return;
      }
      ++counters_.not_joined;
      return;
    }
    auto target = room.phones.find(env.peer_id);
    if (target == room.phones.end()) {
      ++counters_.unknown_target;
      return;
    }
    auto phone_conn = target->second;
    forward(phone_conn, frame);
    if (env.kind == Kind::bye) {
      room.phones.erase(target);
      conns_.erase(phone_conn);
      out_.close(phone_conn);
    }
  }

  void from_phone(ConnId conn, const Envelope& env, std::string_view frame, std::int64_t now) {
    auto& c = conns_.at(conn);
    if (env.peer_id != c.peer) {
      ++counters_.spoofed;
      return;
    }
    if (env.kind == Kind::hello) {
      ++counters_.not_joined;
      return;
    }
    if (kind_class(env.kind) == KindClass::user) {
      c.last_user_seq = env.seq;
    }
    auto& room = rooms_.at(c.session);
    forward(room.display, frame);
    if (env.kind == Kind::bye) {
      room.phones.erase(c.peer);
      conns_.erase(conn);
      out_.close(conn);
    }
    (void)now;
  }

  // Removes a phone from its room and tells the display it left.
  // When `phone_conn` is set the phone is still connected and gets a bye too.
  void drop_phone(const Conn& c, std::string_view reason, std::int64_t now,
                  std::optional<ConnId> phone_conn) {
    auto room = rooms_.find(c.session);
    if (room == rooms_.end()) {
      return;
    }
    room->second.phones.erase(c.peer);
    Envelope bye;
    bye.kind = Kind::bye;
    bye.peer_id = c.peer;
    bye.seq = c.last_user_seq ? *c.last_user_seq + 1 : 0;
    bye.t_ms = now;
    bye.payload = Json{{kByeReason, std::string(reason)}};
    forward(room->second.display, encode_envelope(bye));
    if (phone_conn) {
      bye.seq = room->second.seq++;
      out_.send(*phone_conn, encode_envelope(bye));
    }
  }

  // Closes a room: every phone gets a bye and is disconnected.
  void teardown(const std::string& session, std::string_view reason, std::int64_t now,
                bool notify_display) {
    auto it = rooms_.find(session);
    if (it == rooms_.end()) {
      return;
    }
    Room room = std::move(it->second);
    rooms_.erase(it);
    for (const auto& [peer, phone_conn] : room.phones) {
      Envelope bye;
      bye.kind = Kind::bye;
      bye.peer_id = peer;
      bye.seq = room.seq++;
      bye.t_ms = now;
      bye.payload = Json{{kByeReason, std::string(reason)}};
      out_.send(phone_conn, encode_envelope(bye));
      conns_.erase(phone_conn);
      out_.close(phone_conn);
    }
    if (conns_.count(room.display)) {
      if (notify_display) {
        Envelope bye;
        bye.kind = Kind::bye;
        bye.peer_id = session;
        bye.seq = room.seq++;
        bye.t_ms = now;
        bye.payload = Json{{kByeReason, std::string(reason)}};
        out_.send(room.display, encode_envelope(bye));
      }
      conns_.erase(room.display);
      out_.close(room.display);
    }
  }

  void refuse(ConnId conn, const std::string& peer, std::string_view reason, std::int64_t now) {
    Envelope bye;
    bye.kind = Kind::bye;
    bye.peer_id = peer;
    bye.t_ms = now;
    bye.payload = Json{{kByeReason, std::string(reason)}};
    out_.send(conn, encode_envelope(bye));
    conns_.erase(conn);
    out_.close(conn);
  }

  void forward(ConnId to, std::string_view frame) {
    ++counters_.frames_routed;
    out_.send(to, std::string(frame));
  }

  RelayOutbox& out_;
  Options options_;
  std::map<ConnId, Conn> conns_;
  std::map<std::string, Room> rooms_;
  RelayCounters counters_;
};

}  // namespace phonepad
