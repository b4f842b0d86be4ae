// Per-phone input models and the pure update functions the display applies to
// them. Every controller carries the same base telemetry fields; the kind
// specific part is selected through ControllerState.
#pragma once

#include "phonepad/protocol.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>

namespace phonepad {

enum class ControllerKind { nes, joystick, touchpad, accel };

constexpr std::string_view to_string(ControllerKind k) {
  switch (k) {
    case ControllerKind::nes: return "nes";
    case ControllerKind::joystick: return "joystick";
    case ControllerKind::touchpad: return "touchpad";
    case ControllerKind::accel: return "accel";
  }
  return "?";
}

inline std::optional<ControllerKind> controller_kind_from_string(std::string_view s) {
  if (s == "nes") return ControllerKind::nes;
  if (s == "joystick") return ControllerKind::joystick;
  if (s == "touchpad") return ControllerKind::touchpad;
  if (s == "accel") return ControllerKind::accel;
  return std::nullopt;
}

enum class ControllerErrc { unknown_kind, unknown_button, non_finite_input, invalid_input, payload_mismatch };

class ControllerError : public std::runtime_error {
 public:
  ControllerError(ControllerErrc code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ControllerErrc code() const noexcept { return code_; }

 private:
  ControllerErrc code_;
};

/// Fields shared by every controller. Only the telemetry module writes the
/// ping and rate fields.
struct BaseControllerFields {
  std::string peer_id;
  std::optional<std::string> player_id;
  std::optional<double> ping_ms;
  double user_rate_hz = 0.0;
  double stat_rate_hz = 0.0;

  friend bool operator==(const BaseControllerFields&, const BaseControllerFields&) = default;
};

enum class NesButton { up, down, left, right, a, b, select, start };

inline constexpr std::array<NesButton, 8> kNesButtons = {
    NesButton::up, NesButton::down, NesButton::left,   NesButton::right,
    NesButton::a,  NesButton::b,    NesButton::select, NesButton::start};

constexpr std::string_view to_string(NesButton b) {
  switch (b) {
    case NesButton::up: return "up";
    case NesButton::down: return "down";
    case NesButton::left: return "left";
    case NesButton::right: return "right";
    case NesButton::a: return "a";
    case NesButton::b: return "b";
    case NesButton::select: return "select";
    case NesButton::start: return "start";
  }
  return "?";
}

inline std::optional<NesButton> nes_button_from_string(std::string_view s) {
  for (auto b : kNesButtons) {
    if (to_string(b) == s) {
      return b;
    }
  }
  return std::nullopt;
}

struct NesState {
  BaseControllerFields base;
  std::array<bool, 8> buttons{};  // indexed by NesButton

  bool pressed(NesButton b) const { return buttons[static_cast<std::size_t>(b)]; }

  friend bool operator==(const NesState&, const NesState&) = default;
};

struct JoystickState {
  BaseControllerFields base;
  double angle_deg = 0.0;  // [0, 360), counterclockwise from screen-right
  double force = 0.0;      // [0, 1]
  bool active = false;

  friend bool operator==(const JoystickState&, const JoystickState&) = default;
};

/// Normalized screen coordinates: origin top-left, y grows downwards.
struct TouchpadState {
  BaseControllerFields base;
  double x = 0.5;
  double y = 0.5;
  bool is_active = false;

  friend bool operator==(const TouchpadState&, const TouchpadState&) = default;
};

/// Raw accelerometer reading in m/s^2.
struct AccelState {
  BaseControllerFields base;
  double ax = 0.0;
  double ay = 0.0;
  double az = 0.0;

  friend bool operator==(const AccelState&, const AccelState&) = default;
};

using ControllerState = std::variant<NesState, JoystickState, TouchpadState, AccelState>;

inline BaseControllerFields& base_of(ControllerState& s) {
  return std::visit([](auto& c) -> BaseControllerFields& { return c.base; }, s);
}

inline const BaseControllerFields& base_of(const ControllerState& s) {
  return std::visit([](const auto& c) -> const BaseControllerFields& { return c.base; }, s);
}

inline ControllerKind kind_of(const ControllerState& s) {
  return static_cast<ControllerKind>(s.index());
}

inline ControllerState create_controller(ControllerKind kind, std::string peer_id,
                                         std::optional<std::string> player_id = std::nullopt) {
  BaseControllerFields base{std::move(peer_id), std::move(player_id), std::nullopt, 0.0, 0.0};
  switch (kind) {
    case ControllerKind::nes: return NesState{std::move(base), {}};
    case ControllerKind::joystick: return JoystickState{std::move(base)};
    case ControllerKind::touchpad: return TouchpadState{std::move(base)};
    case ControllerKind::accel: return AccelState{std::move(base)};
  }
  throw ControllerError(ControllerErrc::unknown_kind, "unknown controller kind");
}

inline ControllerState create_controller(std::string_view kind, std::string peer_id,
                                         std::optional<std::string> player_id = std::nullopt) {
  auto k = controller_kind_from_string(kind);
  if (!k) {
    throw ControllerError(ControllerErrc::unknown_kind,
                          "unknown controller kind '" + std::string(kind) + "'");
  }
  return create_controller(*k, std::move(peer_id), std::move(player_id));
}

// --- pure update functions ---------------------------------------------------

inline NesState apply_nes(NesState state, NesButton button, bool pressed) {
  state.buttons[static_cast<std::size_t>(button)] = pressed;
  return state;
}

inline NesState apply_nes(NesState state, std::string_view button, bool pressed) {
  auto b = nes_button_from_string(button);
  if (!b) {
    throw ControllerError(ControllerErrc::unknown_button,
                          "unknown NES button '" + std::string(button) + "'");
  }
  return apply_nes(std::move(state), *b, pressed);
}

/// Reduces any finite angle into [0, 360).
inline double normalize_angle_deg(double deg) {
  double r = std::fmod(deg, 360.0);
  if (r < 0.0) {
    r += 360.0;
  }
  // fmod of a tiny negative value can round back up to exactly 360.
  if (r >= 360.0) {
    r = 0.0;
  }
  return r;
}

inline JoystickState apply_joystick(JoystickState state, double angle_deg, double force) {
  if (!std::isfinite(angle_deg) || !std::isfinite(force)) {
    throw ControllerError(ControllerErrc::non_finite_input, "joystick input must be finite");
  }
  if (force < 0.0) {
    throw ControllerError(ControllerErrc::invalid_input, "joystick force must be >= 0");
  }
  state.angle_deg = normalize_angle_deg(angle_deg);
  state.force = force > 1.0 ? 1.0 : force;
  state.active = state.force > 0.0;
  return state;
}

struct Velocity {
  double vx = 0.0;
  double vy = 0.0;
};

/// Screen-space velocity (y down) for a joystick reading. With `dominance` the
/// smaller axis is zeroed, which removes accidental diagonal movement; on a tie
/// the horizontal component is kept.
inline Velocity joystick_to_velocity(const JoystickState& state, bool dominance) {
  constexpr double kDegToRad = 3.14159265358979323846 / 180.0;
  double rad = state.angle_deg * kDegToRad;
  Velocity v{state.force * std::cos(rad), -state.force * std::sin(rad)};
  if (dominance) {
    // Diagonals (45, 135, ...) are ties; the epsilon absorbs rounding in cos/sin.
    constexpr double kTieEps = 1e-12;
    if (std::abs(v.vy) > std::abs(v.vx) + kTieEps) {
      v.vx = 0.0;
    } else {
      v.vy = 0.0;
    }
  }
  return v;
}

enum class TouchPhase { start, move, end };

inline TouchpadState apply_touch(TouchpadState state, TouchPhase phase, double x, double y) {
  if (phase == TouchPhase::end) {
    state.is_active = false;
    return state;
  }
  if (!std::isfinite(x) || !std::isfinite(y)) {
    throw ControllerError(ControllerErrc::non_finite_input, "touch coordinates must be finite");
  }
  auto clamp01 = [](double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); };
  state.x = clamp01(x);
  state.y = clamp01(y);
  state.is_active = true;
  return state;
}

inline AccelState apply_accel(AccelState state, double ax, double ay, double az) {
  if (!std::isfinite(ax) || !std::isfinite(ay) || !std::isfinite(az)) {
    throw ControllerError(ControllerErrc::non_finite_input, "acceleration must be finite");
  }
  state.ax = ax;
  state.ay = ay;
  state.az = az;
  return state;
}

// --- user frame payloads -------------------------------------------------------
//
//   nes      {b: button, v: bool}
//   joystick {a: degrees, f: force}
//   touchpad {ph: "s"|"m"|"e", x, y}
//   accel    {x, y, z}

inline Json nes_payload(NesButton b, bool pressed) {
  return Json{{"b", std::string(to_string(b))}, {"v", pressed}};
}

inline Json joystick_payload(double angle_deg, double force) {
  return Json{{"a", angle_deg}, {"f", force}};
}

constexpr std::string_view to_wire(TouchPhase p) {
  switch (p) {
    case TouchPhase::start: return "s";
    case TouchPhase::move: return "m";
    case TouchPhase::end: return "e";
  }
  return "?";
}

inline Json touch_payload(TouchPhase phase, double x, double y) {
  return Json{{"ph", std::string(to_wire(phase))}, {"x", x}, {"y", y}};
}

inline Json accel_payload(double x, double y, double z) {
  return Json{{"x", x}, {"y", y}, {"z", z}};
}

/// Guesses the controller kind from the shape of a user payload.
inline std::optional<ControllerKind> infer_kind(const Json& payload) {
  if (!payload.is_object()) return std::nullopt;
  if (payload.contains("b")) return ControllerKind::nes;
  if (payload.contains("a")) return ControllerKind::joystick;
  if (payload.contains("ph")) return ControllerKind::touchpad;
  if (payload.contains("z")) return ControllerKind::accel;
  return std::nullopt;
}

namespace detail {

inline double number_field(const Json& d, const char* key) {
  auto it = d.find(key);
  if (it == d.end() || !it->is_number()) {
    throw ControllerError(ControllerErrc::payload_mismatch,
                          std::string("payload field '") + key + "' missing or not a number");
  }
  return it->get<double>();
}

}  // namespace detail

/// Applies one user payload to whatever controller `state` holds. Throws
/// ControllerError when the payload does not fit the controller kind.
inline ControllerState apply_user_payload(const ControllerState& state, const Json& d) {
  if (!d.is_object()) {
    throw ControllerError(ControllerErrc::payload_mismatch, "payload is not an object");
  }
  return std::visit(
      [&](const auto& c) -> ControllerState {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, NesState>) {
          auto b = d.find("b");
          auto v = d.find("v");
          if (b == d.end() || !b->is_string() || v == d.end() || !v->is_boolean()) {
            throw ControllerError(ControllerErrc::payload_mismatch, "nes payload needs {b, v}");
          }
          return apply_nes(c, b->get_ref<const std::string&>(), v->get<bool>());
        } else if constexpr (std::is_same_v<T, JoystickState>) {
          return apply_joystick(c, detail::number_field(d, "a"), detail::number_field(d, "f"));
        } else if constexpr (std::is_same_v<T, TouchpadState>) {
          auto ph = d.find("ph");
          if (ph == d.end() || !ph->is_string()) {
            throw ControllerError(ControllerErrc::payload_mismatch, "touch payload needs 'ph'");
          }
          const auto& s = ph->get_ref<const std::string&>();
          if (s == "e") {
            return apply_touch(c, TouchPhase::end, 0.0, 0.0);
          }
          if (s != "s" && s != "m") {
            throw ControllerError(ControllerErrc::payload_mismatch, "unknown touch phase '" + s + "'");
          }
          return apply_touch(c, s == "s" ? TouchPhase::start : TouchPhase::move,
                             detail::number_field(d, "x"), detail::number_field(d, "y"));
        } else {
          return apply_accel(c, detail::number_field(d, "x"), detail::number_field(d, "y"),
                             detail::number_field(d, "z"));
        }
      },
      state);
}

/// Short human-readable description used in registry snapshots.
inline std::string summarize(const ControllerState& state) {
  char buf[96];
  return std::visit(
      [&](const auto& c) -> std::string {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, NesState>) {
          std::string s = "nes[";
          for (auto b : kNesButtons) {
            if (c.pressed(b)) {
              if (s.back() != '[') s += ' ';
              s += to_string(b);
            }
          }
          return s + "]";
        } else if constexpr (std::is_same_v<T, JoystickState>) {
          std::snprintf(buf, sizeof buf, "joystick[%.1fdeg f=%.2f%s]", c.angle_deg, c.force,
                        c.active ? "" : " idle");
          return buf;
        } else if constexpr (std::is_same_v<T, TouchpadState>) {
          std::snprintf(buf, sizeof buf, "touchpad[%.3f,%.3f%s]", c.x, c.y,
                        c.is_active ? " down" : "");
          return buf;
        } else {
          std::snprintf(buf, sizeof buf, "accel[%.2f,%.2f,%.2f]", c.ax, c.ay, c.az);
          return buf;
        }
      },
      state);
}

}  // namespace phonepad
