// Wire envelope codec and join-URL format shared by displays, phones and the
// relay.
//
// A frame is a single JSON object with keys emitted in the fixed order
// v, k, p, pl, s, t, d. Payload keys are emitted sorted. The encoding is
// byte-deterministic, so golden frames can be compared with plain string
// equality.
#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace phonepad {

using Json = nlohmann::json;

inline constexpr int kProtocolVersion = 1;

// Frames longer than this are rejected before parsing.
inline constexpr std::size_t kMaxFrameBytes = 64 * 1024;
inline constexpr int kMaxFrameDepth = 16;

enum class Kind { hello, user, stat_ping, stat_pong, bye };

// Sequence numbers are counted separately per class so that throttling user
// traffic never leaves gaps in the stat stream. hello and bye are numbered in
// the user class.
enum class KindClass { user, stat };

constexpr KindClass kind_class(Kind k) {
  return (k == Kind::stat_ping || k == Kind::stat_pong) ? KindClass::stat
                                                         : KindClass::user;
}

constexpr std::string_view to_wire(Kind k) {
  switch (k) {
    case Kind::hello: return "hello";
    case Kind::user: return "user";
    case Kind::stat_ping: return "sping";
    case Kind::stat_pong: return "spong";
    case Kind::bye: return "bye";
  }
  return "?";
}

inline std::optional<Kind> kind_from_wire(std::string_view s) {
  if (s == "hello") return Kind::hello;
  if (s == "user") return Kind::user;
  if (s == "sping") return Kind::stat_ping;
  if (s == "spong") return Kind::stat_pong;
  if (s == "bye") return Kind::bye;
  return std::nullopt;
}

enum class ProtocolErrc {
  malformed_frame,
  unknown_kind,
  version_mismatch,
  invalid_base_url,
  invalid_session_id,
  missing_session_id,
};

constexpr std::string_view to_string(ProtocolErrc e) {
  switch (e) {
    case ProtocolErrc::malformed_frame: return "MalformedFrame";
    case ProtocolErrc::unknown_kind: return "UnknownKind";
    case ProtocolErrc::version_mismatch: return "VersionMismatch";
    case ProtocolErrc::invalid_base_url: return "InvalidBaseUrl";
    case ProtocolErrc::invalid_session_id: return "InvalidSessionId";
    case ProtocolErrc::missing_session_id: return "MissingSessionId";
  }
  return "?";
}

/// Raised by the codec and URL helpers. `fragment()` holds the offending input
/// (truncated to 64 bytes) for diagnostics.
class ProtocolError : public std::runtime_error {
 public:
  ProtocolError(ProtocolErrc code, std::string fragment, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what),
        code_(code),
        fragment_(truncate(std::move(fragment))) {}

  ProtocolErrc code() const noexcept { return code_; }
  const std::string& fragment() const noexcept { return fragment_; }

 private:
  static std::string truncate(std::string s) {
    if (s.size() > 64) {
      s.resize(64);
    }
    return s;
  }

  ProtocolErrc code_;
  std::string fragment_;
};

/// One wire message.
///
/// For phone-originated frames `peer_id` names the sender. For frames the
/// display sends towards a phone it names the target phone; the relay routes on
/// it. `payload` is always a JSON object (empty when unused).
struct Envelope {
  int version = kProtocolVersion;
  Kind kind = Kind::hello;
  std::string peer_id;
  std::optional<std::string> player_id;
  std::uint64_t seq = 0;
  std::int64_t t_ms = 0;
  Json payload = Json::object();

  friend bool operator==(const Envelope& a, const Envelope& b) {
    return a.version == b.version && a.kind == b.kind && a.peer_id == b.peer_id &&
           a.player_id == b.player_id && a.seq == b.seq && a.t_ms == b.t_ms &&
           a.payload == b.payload;
  }
};

namespace detail {

inline std::string dump_string(std::string_view s) {
  return Json(std::string(s)).dump();
}

// Rejects inputs nested deeper than kMaxFrameDepth without building a tree.
inline bool nesting_within_limit(std::string_view text) {
  int depth = 0;
  bool in_string = false;
  bool escaped = false;
  for (char c : text) {
    if (in_string) {
      if (escaped) {
        escaped = false;
      } else if (c == '\\') {
        escaped = true;
      } else if (c == '"') {
        in_string = false;
      }
      continue;
    }
    if (c == '"') {
      in_string = true;
    } else if (c == '{' || c == '[') {
      if (++depth > kMaxFrameDepth) {
        return false;
      }
    } else if (c == '}' || c == ']') {
      --depth;
    }
  }
  return true;
}

[[noreturn]] inline void malformed(std::string_view frame, const std::string& why) {
  throw ProtocolError(ProtocolErrc::malformed_frame, std::string(frame), why);
}

}  // namespace detail

/// Serializes `env` into one newline-free text frame.
inline std::string encode_envelope(const Envelope& env) {
  std::string out;
  out.reserve(96);
  out += "{\"v\":";
  out += std::to_string(env.version);
  out += ",\"k\":\"";
  out += to_wire(env.kind);
  out += "\",\"p\":";
  out += detail::dump_string(env.peer_id);
  if (env.player_id) {
    out += ",\"pl\":";
    out += detail::dump_string(*env.player_id);
  }
  out += ",\"s\":";
  out += std::to_string(env.seq);
  out += ",\"t\":";
  out += std::to_string(env.t_ms);
  out += ",\"d\":";
  out += env.payload.is_object() ? env.payload.dump() : std::string("{}");
  out += '}';
  return out;
}

/// Parses one frame. Throws ProtocolError with code malformed_frame,
/// unknown_kind or version_mismatch.
inline Envelope decode_envelope(std::string_view frame) {
  if (frame.size() > kMaxFrameBytes) {
    detail::malformed(frame, "frame exceeds size limit");
  }
  if (!detail::nesting_within_limit(frame)) {
    detail::malformed(frame, "frame nested too deeply");
  }
  Json j = Json::parse(frame.begin(), frame.end(), nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) {
    detail::malformed(frame, "not valid JSON");
  }
  if (!j.is_object()) {
    detail::malformed(frame, "frame is not an object");
  }
  for (const auto& [key, _] : j.items()) {
    if (key != "v" && key != "k" && key != "p" && key != "pl" && key != "s" &&
        key != "t" && key != "d") {
      detail::malformed(frame, "unexpected key '" + key + "'");
    }
  }

  auto v = j.find("v");
  if (v == j.end() || !v->is_number_integer()) {
    detail::malformed(frame, "missing or non-integer 'v'");
  }
  if (v->get<std::int64_t>() != kProtocolVersion) {
    throw ProtocolError(ProtocolErrc::version_mismatch, v->dump(),
                        "unsupported version " + v->dump());
  }

  Envelope env;
  auto k = j.find("k");
  if (k == j.end() || !k->is_string()) {
    detail::malformed(frame, "missing or non-string 'k'");
  }
  auto kind = kind_from_wire(k->get_ref<const std::string&>());
  if (!kind) {
    throw ProtocolError(ProtocolErrc::unknown_kind, k->get<std::string>(),
                        "unknown kind '" + k->get<std::string>() + "'");
  }
  env.kind = *kind;

  auto p = j.find("p");
  if (p == j.end() || !p->is_string() || p->get_ref<const std::string&>().empty()) {
    detail::malformed(frame, "missing or empty 'p'");
  }
  env.peer_id = p->get<std::string>();

  if (auto pl = j.find("pl"); pl != j.end()) {
    if (!pl->is_string() || pl->get_ref<const std::string&>().empty()) {
      detail::malformed(frame, "'pl' must be a non-empty string");
    }
    env.player_id = pl->get<std::string>();
  }

  auto s = j.find("s");
  if (s == j.end() || !s->is_number_unsigned()) {
    detail::malformed(frame, "missing or negative 's'");
  }
  env.seq = s->get<std::uint64_t>();

  auto t = j.find("t");
  if (t == j.end() || !t->is_number_integer()) {
    detail::malformed(frame, "missing or non-integer 't'");
  }
  if (t->is_number_unsigned() &&
      t->get<std::uint64_t>() > static_cast<std::uint64_t>(INT64_MAX)) {
    detail::malformed(frame, "'t' out of range");
  }
  env.t_ms = t->get<std::int64_t>();

  if (auto d = j.find("d"); d != j.end()) {
    if (!d->is_object()) {
      detail::malformed(frame, "'d' must be an object");
    }
    env.payload = std::move(*d);
  }
  return env;
}

// --- join URLs -------------------------------------------------------------

/// Pairing parameters carried in a controller page URL.
struct JoinParams {
  std::string session_id;
  std::optional<std::string> player_id;
  bool first_connected = true;

  friend bool operator==(const JoinParams&, const JoinParams&) = default;
};

constexpr bool is_unreserved(char c) {
  return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') ||
         c == '-' || c == '.' || c == '_' || c == '~';
}

inline bool is_valid_session_id(std::string_view id) {
  if (id.empty()) {
    return false;
  }
  for (char c : id) {
    if (!is_unreserved(c)) {
      return false;
    }
  }
  return true;
}

/// RFC 3986 percent-encoding; everything but unreserved characters is escaped.
inline std::string percent_encode(std::string_view in) {
  static constexpr char kHex[] = "0123456789ABCDEF";
  std::string out;
  out.reserve(in.size());
  for (char c : in) {
    if (is_unreserved(c)) {
      out += c;
    } else {
      auto b = static_cast<unsigned char>(c);
      out += '%';
      out += kHex[b >> 4];
      out += kHex[b & 0xF];
    }
  }
  return out;
}

/// Decodes %XX escapes and '+' as space (query-string convention). Malformed
/// escapes are kept literally.
inline std::string percent_decode(std::string_view in) {
  auto hex = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
  };
  std::string out;
  out.reserve(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    char c = in[i];
    if (c == '%' && i + 2 < in.size()) {
      int hi = hex(in[i + 1]);
      int lo = hex(in[i + 2]);
      if (hi >= 0 && lo >= 0) {
        out += static_cast<char>((hi << 4) | lo);
        i += 2;
        continue;
      }
    }
    out += (c == '+') ? ' ' : c;
  }
  return out;
}

namespace detail {

inline bool is_absolute_url_without_query(std::string_view url) {
  auto colon = url.find("://");
  if (colon == std::string_view::npos || colon == 0) {
    return false;
  }
  auto is_alpha = [](char c) { return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z'); };
  if (!is_alpha(url[0])) {
    return false;
  }
  for (std::size_t i = 1; i < colon; ++i) {
    char c = url[i];
    if (!is_alpha(c) && !(c >= '0' && c <= '9') && c != '+' && c != '-' && c != '.') {
      return false;
    }
  }
  auto rest = url.substr(colon + 3);
  if (rest.empty() || rest.front() == '/') {
    return false;
  }
  for (char c : rest) {
    if (c == '?' || c == '#' || static_cast<unsigned char>(c) <= 0x20) {
      return false;
    }
  }
  return true;
}

}  // namespace detail

/// Builds `<base_url>?id=<session>[&playerid=<player>][&firstConnected=false]`.
inline std::string build_join_url(std::string_view base_url, const JoinParams& params) {
  if (!detail::is_absolute_url_without_query(base_url)) {
    throw ProtocolError(ProtocolErrc::invalid_base_url, std::string(base_url),
                        "base url must be absolute and carry no query or fragment");
  }
  if (!is_valid_session_id(params.session_id)) {
    throw ProtocolError(ProtocolErrc::invalid_session_id, params.session_id,
                        "session id must be non-empty unreserved characters");
  }
  std::string url(base_url);
  url += "?id=";
  url += percent_encode(params.session_id);
  if (params.player_id && !params.player_id->empty()) {
    url += "&playerid=";
    url += percent_encode(*params.player_id);
  }
  if (!params.first_connected) {
    url += "&firstConnected=false";
  }
  return url;
}

/// Reads join parameters from a full URL or a bare query string. Unknown keys
/// are ignored; a missing `firstConnected` means true.
inline JoinParams parse_join_url(std::string_view url) {
  auto q = url.find('?');
  std::string_view query = q == std::string_view::npos ? std::string_view{} : url.substr(q + 1);
  if (auto hash = query.find('#'); hash != std::string_view::npos) {
    query = query.substr(0, hash);
  }

  JoinParams params;
  bool have_id = false;
  while (!query.empty()) {
    auto amp = query.find('&');
    auto pair = query.substr(0, amp);
    query = amp == std::string_view::npos ? std::string_view{} : query.substr(amp + 1);
    if (pair.empty()) {
      continue;
    }
    auto eq = pair.find('=');
    std::string key = percent_decode(pair.substr(0, eq));
    std::string value =
        eq == std::string_view::npos ? std::string{} : percent_decode(pair.substr(eq + 1));
    if (key == "id") {
      params.session_id = std::move(value);
      have_id = true;
    } else if (key == "playerid") {
      if (value.empty()) {
        params.player_id.reset();
      } else {
        params.player_id = std::move(value);
      }
    } else if (key == "firstConnected") {
      params.first_connected = !(value == "false" || value == "0");
    }
  }
  if (!have_id || params.session_id.empty()) {
    throw ProtocolError(ProtocolErrc::missing_session_id, std::string(url),
                        "join url has no 'id' parameter");
  }
  if (!is_valid_session_id(params.session_id)) {
    throw ProtocolError(ProtocolErrc::invalid_session_id, params.session_id,
                        "session id must be non-empty unreserved characters");
  }
  return params;
}

}  // namespace phonepad
