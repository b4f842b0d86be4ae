// Outbound throttling, round-trip ping, sliding-window message rates and the
// CSV export of sampled statistics.
//
// Nothing here reads a clock: every operation takes the current time in
// milliseconds, so the same code runs under the simulator's virtual clock and
// under a wall clock.
#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace phonepad {

class ClockWentBackwards : public std::logic_error {
 public:
  ClockWentBackwards(std::int64_t last, std::int64_t now)
      : std::logic_error("clock went backwards: " + std::to_string(now) + " < " +
                         std::to_string(last)) {}
};

inline constexpr std::int64_t kDefaultPingPeriodMs = 500;
inline constexpr std::int64_t kDefaultRateWindowMs = 1000;
inline constexpr std::int64_t kPingTokenTimeoutMs = 10'000;

// --- throttle ----------------------------------------------------------------

enum class ThrottleDecision { forward, drop };

/// Drop-based minimum-interval limiter. Messages offered too soon after the
/// last forwarded one are discarded, never delayed.
class Throttle {
 public:
  explicit Throttle(std::int64_t min_interval_ms = 0) : min_interval_ms_(min_interval_ms) {
    if (min_interval_ms < 0) {
      throw std::invalid_argument("throttle interval must be >= 0");
    }
  }

  ThrottleDecision offer(std::int64_t t_ms) {
    if (last_forward_ms_) {
      if (t_ms < *last_forward_ms_) {
        throw ClockWentBackwards(*last_forward_ms_, t_ms);
      }
      if (t_ms - *last_forward_ms_ < min_interval_ms_) {
        return ThrottleDecision::drop;
      }
    }
    last_forward_ms_ = t_ms;
    return ThrottleDecision::forward;
  }

  std::int64_t min_interval_ms() const { return min_interval_ms_; }
  std::optional<std::int64_t> last_forward_ms() const { return last_forward_ms_; }

 private:
  std::int64_t min_interval_ms_;
  std::optional<std::int64_t> last_forward_ms_;

 public:
  friend bool operator==(const Throttle&, const Throttle&) = default;
};

// --- ping ----------------------------------------------------------------------

/// Tracks outstanding pings by echo token and keeps the most recent completed
/// round trip.
class PingEstimator {
 public:
  explicit PingEstimator(std::int64_t interval_ms = kDefaultPingPeriodMs)
      : interval_ms_(interval_ms) {}

  /// Registers a new outstanding ping sent at `now_ms`; returns its token.
  std::uint64_t send(std::int64_t now_ms) {
    collect_lost(now_ms);
    auto token = next_token_++;
    outstanding_.emplace(token, now_ms);
    return token;
  }

  /// Resolves a pong. Unknown or expired tokens are counted and ignored.
  std::optional<double> pong(std::uint64_t token, std::int64_t now_ms) {
    collect_lost(now_ms);
    auto it = outstanding_.find(token);
    if (it == outstanding_.end()) {
      ++unknown_tokens_;
      return std::nullopt;
    }
    if (now_ms < it->second) {
      throw ClockWentBackwards(it->second, now_ms);
    }
    ping_ms_ = static_cast<double>(now_ms - it->second);
    outstanding_.erase(it);
    return ping_ms_;
  }

  std::optional<double> ping_ms() const { return ping_ms_; }
  std::int64_t interval_ms() const { return interval_ms_; }
  std::size_t outstanding() const { return outstanding_.size(); }
  std::uint64_t unknown_tokens() const { return unknown_tokens_; }
  std::uint64_t lost() const { return lost_; }

 private:
  void collect_lost(std::int64_t now_ms) {
    for (auto it = outstanding_.begin(); it != outstanding_.end();) {
      if (now_ms - it->second > kPingTokenTimeoutMs) {
        it = outstanding_.erase(it);
        ++lost_;
      } else {
        ++it;
      }
    }
  }

  std::int64_t interval_ms_;
  std::uint64_t next_token_ = 1;
  std::map<std::uint64_t, std::int64_t> outstanding_;
  std::optional<double> ping_ms_;
  std::uint64_t unknown_tokens_ = 0;
  std::uint64_t lost_ = 0;

 public:
  friend bool operator==(const PingEstimator&, const PingEstimator&) = default;
};

// --- message rate --------------------------------------------------------------

enum class RateClass { user, stat };

/// Sliding-window message counter, kept separately for user and stat traffic.
/// The rate is the number of events in (now - window, now] scaled to Hz.
class RateMeter {
 public:
  explicit RateMeter(std::int64_t window_ms = kDefaultRateWindowMs) : window_ms_(window_ms) {
    if (window_ms <= 0) {
      throw std::invalid_argument("rate window must be positive");
    }
  }

  void record(RateClass cls, std::int64_t t_ms) {
    auto& q = series(cls);
    if (!q.empty() && t_ms < q.back()) {
      throw ClockWentBackwards(q.back(), t_ms);
    }
    q.push_back(t_ms);
    while (!q.empty() && q.front() <= t_ms - window_ms_) {
      q.pop_front();
    }
  }

  double value(RateClass cls, std::int64_t now_ms) const {
    const auto& q = series(cls);
    if (!q.empty() && now_ms < q.back()) {
      throw ClockWentBackwards(q.back(), now_ms);
    }
    auto first = std::upper_bound(q.begin(), q.end(), now_ms - window_ms_);
    auto count = static_cast<double>(q.end() - first);
    return count * 1000.0 / static_cast<double>(window_ms_);
  }

  std::int64_t window_ms() const { return window_ms_; }

 private:
  std::deque<std::int64_t>& series(RateClass c) { return c == RateClass::user ? user_ : stat_; }
  const std::deque<std::int64_t>& series(RateClass c) const {
    return c == RateClass::user ? user_ : stat_;
  }

  std::int64_t window_ms_;
  std::deque<std::int64_t> user_;
  std::deque<std::int64_t> stat_;

 public:
  friend bool operator==(const RateMeter&, const RateMeter&) = default;
};

// --- CSV -------------------------------------------------------------------------

struct StatsSample {
  std::int64_t t_ms = 0;
  std::string peer_id;
  std::optional<std::string> player_id;
  std::optional<double> ping_ms;
  double user_rate_hz = 0.0;
  double stat_rate_hz = 0.0;

  friend bool operator==(const StatsSample&, const StatsSample&) = default;
};

inline constexpr std::string_view kStatsCsvHeader =
    "t_ms,peer_id,player_id,ping_ms,user_rate_hz,stat_rate_hz";

class CsvError : public std::runtime_error {
 public:
  CsvError(std::size_t line, const std::string& what)
      : std::runtime_error("csv line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

namespace detail {

inline void append_csv_field(std::string& out, std::string_view field) {
  bool needs_quotes = field.find_first_of(",\"\r\n") != std::string_view::npos;
  if (!needs_quotes) {
    out += field;
    return;
  }
  out += '"';
  for (char c : field) {
    if (c == '"') {
      out += '"';
    }
    out += c;
  }
  out += '"';
}

// Shortest representation that round-trips.
inline std::string format_shortest(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string format_fixed2(double v) {
  char buf[48];
  auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, 2);
  return std::string(buf, res.ptr);
}

inline std::vector<std::vector<std::string>> parse_csv_records(std::string_view text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> record;
  std::string field;
  bool in_quotes = false;
  bool field_was_quoted = false;
  std::size_t line = 1;
  std::size_t i = 0;

  auto end_field = [&] {
    record.push_back(std::move(field));
    field.clear();
    field_was_quoted = false;
  };
  auto end_record = [&] {
    end_field();
    records.push_back(std::move(record));
    record.clear();
  };

  while (i < text.size()) {
    char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          i += 2;
          continue;
        }
        in_quotes = false;
        ++i;
        if (i < text.size() && text[i] != ',' && text[i] != '\n' && text[i] != '\r') {
          throw CsvError(line, "unexpected character after closing quote");
        }
        continue;
      }
      if (c == '\n') ++line;
      field += c;
      ++i;
      continue;
    }
    switch (c) {
      case '"':
        if (!field.empty() || field_was_quoted) {
          throw CsvError(line, "quote inside unquoted field");
        }
        in_quotes = true;
        field_was_quoted = true;
        ++i;
        break;
      case ',':
        end_field();
        ++i;
        break;
      case '\r':
        if (i + 1 < text.size() && text[i + 1] == '\n') {
          ++i;
        }
        [[fallthrough]];
      case '\n':
        end_record();
        ++line;
        ++i;
        break;
      default:
        field += c;
        ++i;
    }
  }
  if (in_quotes) {
    throw CsvError(line, "unterminated quoted field");
  }
  if (!field.empty() || field_was_quoted || !record.empty()) {
    end_record();
  }
  return records;
}

inline double parse_double(const std::string& s, std::size_t line, const char* what) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw CsvError(line, std::string("bad ") + what + " '" + s + "'");
  }
  return v;
}

}  // namespace detail

/// Renders samples as CSV: fixed header, rows in time order, empty fields for
/// absent optionals, rates with two decimals, RFC 4180 quoting.
inline std::string export_csv(std::vector<StatsSample> samples) {
  std::stable_sort(samples.begin(), samples.end(),
                   [](const StatsSample& a, const StatsSample& b) { return a.t_ms < b.t_ms; });
  std::string out(kStatsCsvHeader);
  out += '\n';
  for (const auto& s : samples) {
    out += std::to_string(s.t_ms);
    out += ',';
    detail::append_csv_field(out, s.peer_id);
    out += ',';
    if (s.player_id) {
      detail::append_csv_field(out, *s.player_id);
    }
    out += ',';
    if (s.ping_ms) {
      out += detail::format_shortest(*s.ping_ms);
    }
    out += ',';
    out += detail::format_fixed2(s.user_rate_hz);
    out += ',';
    out += detail::format_fixed2(s.stat_rate_hz);
    out += '\n';
  }
  return out;
}

/// Reads CSV produced by export_csv (or any conforming writer). An empty
/// player_id field reads back as absent.
inline std::vector<StatsSample> parse_csv(std::string_view text) {
  auto records = detail::parse_csv_records(text);
  if (records.empty()) {
    throw CsvError(1, "missing header");
  }
  std::string header;
  for (std::size_t i = 0; i < records[0].size(); ++i) {
    if (i) header += ',';
    header += records[0][i];
  }
  if (header != kStatsCsvHeader) {
    throw CsvError(1, "unexpected header '" + header + "'");
  }
  std::vector<StatsSample> samples;
  samples.reserve(records.size() - 1);
  for (std::size_t r = 1; r < records.size(); ++r) {
    const auto& f = records[r];
    std::size_t line = r + 1;
    if (f.size() == 1 && f[0].empty()) {
      continue;  // blank line
    }
    if (f.size() != 6) {
      throw CsvError(line, "expected 6 fields, got " + std::to_string(f.size()));
    }
    StatsSample s;
    auto res = std::from_chars(f[0].data(), f[0].data() + f[0].size(), s.t_ms);
    if (res.ec != std::errc{} || res.ptr != f[0].data() + f[0].size()) {
      throw CsvError(line, "bad t_ms '" + f[0] + "'");
    }
    if (f[1].empty()) {
      throw CsvError(line, "empty peer_id");
    }
    s.peer_id = f[1];
    if (!f[2].empty()) s.player_id = f[2];
    if (!f[3].empty()) s.ping_ms = detail::parse_double(f[3], line, "ping_ms");
    s.user_rate_hz = detail::parse_double(f[4], line, "user_rate_hz");
    s.stat_rate_hz = detail::parse_double(f[5], line, "stat_rate_hz");
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace phonepad
