#include "phonepad/registry.hpp"

#include <gtest/gtest.h>

#include <map>
#include <random>
#include <set>

#include "claim_model_check.hpp"
#include "reference_registry.hpp"

namespace phonepad {
namespace {

using testing_support::ReferenceRegistry;

JoinParams join(std::optional<std::string> player = std::nullopt, bool first_connected = true) {
  return JoinParams{"123456789", std::move(player), first_connected};
}

Envelope frame(Kind kind, std::string peer, std::uint64_t seq, Json payload = Json::object(),
               std::optional<std::string> player = std::nullopt) {
  Envelope e;
  e.kind = kind;
  e.peer_id = std::move(peer);
  e.player_id = std::move(player);
  e.seq = seq;
  e.payload = std::move(payload);
  return e;
}

// --- session ids ------------------------------------------------------------------

TEST(NewSession, SeededIsDeterministic) {
  auto a = new_session(42);
  EXPECT_EQ(a, new_session(42));
  EXPECT_EQ(a.size(), 9u);
  for (char c : a) EXPECT_TRUE(c >= '0' && c <= '9');
  EXPECT_NE(new_session(43), a);
}

TEST(NewSession, UnseededNeverRepeats) {
  std::set<std::string> ids;
  for (int i = 0; i < 1000; ++i) {
    auto id = new_session();
    EXPECT_EQ(id.size(), 9u);
    EXPECT_TRUE(ids.insert(id).second);
  }
}

TEST(NewSession, NineDigitIdIsValid) {
  EXPECT_TRUE(is_valid_session_id("123456789"));
  EXPECT_NO_THROW(build_join_url("https://h/touchpad.html", JoinParams{"123456789", {}, true}));
}

// --- handle_join -------------------------------------------------------------------

TEST(HandleJoin, FirstClaimAccepted) {
  Registry reg("123456789");
  EXPECT_EQ(reg.handle_join("p1", join("JohnDoe"), 0).verdict, ClaimVerdict::accept);
  EXPECT_EQ(reg.claims().at("JohnDoe"), "p1");
  EXPECT_EQ(reg.event_log().back().kind, LifecycleKind::connected);
}

TEST(HandleJoin, SecondClaimRejectedWhenFirstConnected) {
  Registry reg("123456789");
  reg.handle_join("p1", join("JohnDoe"), 0);
  auto entries = reg.entries();
  auto claims = reg.claims();
  auto d = reg.handle_join("p2", join("JohnDoe", true), 1);
  EXPECT_EQ(d.verdict, ClaimVerdict::reject);
  EXPECT_EQ(reg.entries(), entries);
  EXPECT_EQ(reg.claims(), claims);
  EXPECT_EQ(reg.event_log().back().kind, LifecycleKind::rejected);
  EXPECT_EQ(reg.event_log().back().peer_id, "p2");
}

TEST(HandleJoin, SecondClaimReplacesWhenNotFirstConnected) {
  Registry reg("123456789");
  reg.handle_join("p1", join("JohnDoe"), 0);
  reg.handle_join("p3", join(), 0);
  auto d = reg.handle_join("p2", join("JohnDoe", false), 1);
  EXPECT_EQ(d.verdict, ClaimVerdict::replace);
  EXPECT_EQ(d.replaced_peer, "p1");
  EXPECT_EQ(reg.entries().size(), 2u);
  EXPECT_FALSE(reg.find("p1"));
  EXPECT_EQ(reg.claims().at("JohnDoe"), "p2");

  const auto& log = reg.event_log();
  ASSERT_GE(log.size(), 3u);
  EXPECT_EQ(log[log.size() - 3].kind, LifecycleKind::disconnected);
  EXPECT_EQ(log[log.size() - 3].peer_id, "p1");
  EXPECT_EQ(log[log.size() - 3].related_peer, "p2");
  EXPECT_EQ(log[log.size() - 2].kind, LifecycleKind::connected);
  EXPECT_EQ(log.back().kind, LifecycleKind::replaced);
  EXPECT_EQ(log.back().related_peer, "p1");
}

TEST(HandleJoin, ReplacedPeerStartsFresh) {
  Registry reg("s");
  reg.handle_join("p1", join("J"), 0, ControllerKind::nes);
  reg.dispatch_frame(frame(Kind::user, "p1", 1, nes_payload(NesButton::a, true)), 1);
  reg.handle_join("p2", join("J", false), 2, ControllerKind::nes);
  auto& c = std::get<NesState>(*reg.find("p2")->controller);
  EXPECT_FALSE(c.pressed(NesButton::a));
}

TEST(HandleJoin, DuplicatePeer) {
  Registry reg("s");
  reg.handle_join("p1", join(), 0);
  try {
    reg.handle_join("p1", join(), 1);
    FAIL();
  } catch (const RegistryError& e) {
    EXPECT_EQ(e.code(), RegistryErrc::duplicate_peer);
  }
}

TEST(HandleJoin, NoConnectionCap) {
  Registry reg("s");
  for (int i = 0; i < 1024; ++i) {
    ASSERT_EQ(reg.handle_join("p" + std::to_string(i), join(), i).verdict, ClaimVerdict::accept);
  }
  EXPECT_EQ(reg.entries().size(), 1024u);
}

// --- handle_close ----------------------------------------------------------------

TEST(HandleClose, OnlyPeer) {
  Registry reg("s");
  reg.handle_join("p1", join("JohnDoe"), 0);
  auto ev = reg.handle_close("p1", 5);
  EXPECT_EQ(ev.kind, LifecycleKind::disconnected);
  EXPECT_EQ(ev.player_id, "JohnDoe");
  EXPECT_TRUE(reg.entries().empty());
  EXPECT_TRUE(reg.claims().empty());
}

TEST(HandleClose, OthersUntouched) {
  Registry reg("s");
  for (auto p : {"p1", "p2", "p3"}) reg.handle_join(p, join(), 0, ControllerKind::joystick);
  auto before1 = *reg.find("p1");
  auto before3 = *reg.find("p3");
  reg.handle_close("p2", 1);
  EXPECT_EQ(*reg.find("p1"), before1);
  EXPECT_EQ(*reg.find("p3"), before3);
}

TEST(HandleClose, FreesClaim) {
  Registry reg("s");
  reg.handle_join("p1", join("JohnDoe"), 0);
  reg.handle_close("p1", 1);
  EXPECT_EQ(reg.handle_join("p2", join("JohnDoe", true), 2).verdict, ClaimVerdict::accept);
}

TEST(HandleClose, UnknownPeer) {
  Registry reg("s");
  EXPECT_THROW(reg.handle_close("ghost", 0), RegistryError);
}

TEST(ClaimModel, ExhaustiveUpToFour) {
  testing_support::ClaimModelChecker checker(4);
  auto r = checker.run();
  EXPECT_EQ(r.divergences, 0u) << r.first_divergence;
  EXPECT_GT(r.sequences, 1000u);
}

TEST(ClaimProperty, RandomSequences) {
  std::mt19937_64 rng(8);
  const char* players[] = {"A", "B", "C"};
  for (int trial = 0; trial < 300; ++trial) {
    Registry reg("s");
    ReferenceRegistry ref;
    int next = 0;
    for (int step = 0; step < 40; ++step) {
      if (rng() % 3 != 0 || ref.members().empty()) {
        std::optional<std::string> pl;
        if (rng() % 4) pl = players[rng() % 3];
        bool fc = rng() % 2;
        auto peer = "p" + std::to_string(next++);
        auto count_before = reg.entries().size();
        auto d = reg.handle_join(peer, join(pl, fc), step);
        auto want = ref.join(peer, pl, fc);
        if (d.verdict == ClaimVerdict::replace) {
          EXPECT_EQ(reg.entries().size(), count_before);  // replace conservation
        }
        EXPECT_EQ(static_cast<int>(d.verdict), static_cast<int>(want.outcome));
      } else {
        auto victim = ref.members()[rng() % ref.members().size()].peer;
        reg.handle_close(victim, step);
        ref.close(victim);
      }
      std::map<std::string, int> per_player;
      for (const auto& [_, e] : reg.entries()) {
        if (e.player_id) ASSERT_LE(++per_player[*e.player_id], 1);
      }
      for (const auto& [pl, peer] : reg.claims()) {
        ASSERT_TRUE(reg.find(peer));
        ASSERT_EQ(reg.find(peer)->player_id, pl);
      }
    }
  }
}

// --- dispatch_frame -----------------------------------------------------------------

TEST(DispatchFrame, HelloThenNesPress) {
  Registry reg("s");
  reg.dispatch_frame(frame(Kind::hello, "p1", 0, Json{{"ctl", "nes"}}), 0);
  auto evs = reg.dispatch_frame(frame(Kind::user, "p1", 1, nes_payload(NesButton::a, true)), 5);
  ASSERT_EQ(evs.size(), 1u);
  EXPECT_EQ(evs[0].kind, LifecycleKind::data);
  const auto* e = reg.find("p1");
  ASSERT_TRUE(e);
  EXPECT_TRUE(std::get<NesState>(*e->controller).pressed(NesButton::a));
  EXPECT_EQ(e->last_seen, 5);
}

TEST(DispatchFrame, KindInferredFromFirstPayload) {
  Registry reg("s");
  reg.dispatch_frame(frame(Kind::hello, "p1", 0), 0);
  EXPECT_FALSE(reg.find("p1")->controller);
  reg.dispatch_frame(frame(Kind::user, "p1", 1, joystick_payload(90, 0.5)), 1);
  EXPECT_EQ(kind_of(*reg.find("p1")->controller), ControllerKind::joystick);
}

TEST(DispatchFrame, UnknownPeerDropped) {
  Registry reg("s");
  auto evs = reg.dispatch_frame(frame(Kind::user, "ghost", 1, nes_payload(NesButton::a, true)), 0);
  EXPECT_TRUE(evs.empty());
  EXPECT_TRUE(reg.entries().empty());
  EXPECT_EQ(reg.counters().unknown_peer, 1u);
}

TEST(DispatchFrame, HelloCarriesClaimSemantics) {
  Registry reg("s");
  reg.dispatch_frame(frame(Kind::hello, "p1", 0, Json::object(), "J"), 0);
  auto evs = reg.dispatch_frame(frame(Kind::hello, "p2", 0, Json{{"fc", true}}, "J"), 1);
  ASSERT_EQ(evs.size(), 1u);
  EXPECT_EQ(evs[0].kind, LifecycleKind::rejected);
  evs = reg.dispatch_frame(frame(Kind::hello, "p3", 0, Json{{"fc", false}}, "J"), 2);
  ASSERT_EQ(evs.size(), 3u);
  EXPECT_EQ(evs[2].kind, LifecycleKind::replaced);
  EXPECT_EQ(reg.claims().at("J"), "p3");
}

TEST(DispatchFrame, WrongSessionAndDuplicateHello) {
  Registry reg("s");
  reg.dispatch_frame(frame(Kind::hello, "p1", 0, Json{{"sid", "other"}}), 0);
  EXPECT_EQ(reg.counters().wrong_session, 1u);
  reg.dispatch_frame(frame(Kind::hello, "p1", 0, Json{{"sid", "s"}}), 0);
  reg.dispatch_frame(frame(Kind::hello, "p1", 1), 0);
  EXPECT_EQ(reg.counters().duplicate_hello, 1u);
  EXPECT_EQ(reg.entries().size(), 1u);
}

TEST(DispatchFrame, OutOfOrderAndBadPayloadAreCounted) {
  Registry reg("s");
  reg.dispatch_frame(frame(Kind::hello, "p1", 0, Json{{"ctl", "joystick"}}), 0);
  reg.dispatch_frame(frame(Kind::user, "p1", 2, joystick_payload(10, 1)), 1);
  reg.dispatch_frame(frame(Kind::user, "p1", 2, joystick_payload(20, 1)), 2);
  reg.dispatch_frame(frame(Kind::user, "p1", 1, joystick_payload(30, 1)), 3);
  EXPECT_EQ(reg.counters().out_of_order, 2u);
  EXPECT_DOUBLE_EQ(std::get<JoystickState>(*reg.find("p1")->controller).angle_deg, 10.0);
  reg.dispatch_frame(frame(Kind::user, "p1", 3, Json{{"b", "a"}, {"v", true}}), 4);
  EXPECT_EQ(reg.counters().bad_payload, 1u);
}

TEST(DispatchFrame, PongUpdatesPing) {
  Registry reg("s");
  reg.dispatch_frame(frame(Kind::hello, "p1", 0), 0);
  auto tok = reg.start_ping("p1", 100);
  ASSERT_TRUE(tok);
  reg.dispatch_frame(frame(Kind::stat_pong, "p1", 0, Json{{"tok", *tok}, {"o", 100}}), 120);
  EXPECT_EQ(reg.find("p1")->ping.ping_ms(), 20.0);
  reg.dispatch_frame(frame(Kind::stat_pong, "p1", 1, Json{{"tok", 9999}}), 130);
  EXPECT_EQ(reg.counters().unknown_token, 1u);
}

TEST(DispatchFrame, ByeClosesAndLaterFramesAreIgnored) {
  Registry reg("s");
  reg.dispatch_frame(frame(Kind::hello, "p1", 0, Json::object(), "J"), 0);
  auto evs = reg.dispatch_frame(frame(Kind::bye, "p1", 1), 1);
  ASSERT_EQ(evs.size(), 1u);
  EXPECT_EQ(evs[0].kind, LifecycleKind::disconnected);
  EXPECT_TRUE(reg.claims().empty());
  reg.dispatch_frame(frame(Kind::user, "p1", 2, nes_payload(NesButton::a, true)), 2);
  EXPECT_EQ(reg.counters().unknown_peer, 1u);
}

// Reference interpreter over frames: membership, claims and NES button state.
struct FrameModel {
  ReferenceRegistry members;
  std::map<std::string, std::array<bool, 8>> buttons;
  std::uint64_t dropped = 0;

  void apply(const Envelope& e) {
    switch (e.kind) {
      case Kind::hello: {
        bool fc = !e.payload.contains("fc") || e.payload["fc"].get<bool>();
        if (members.contains(e.peer_id)) {
          ++dropped;
          return;
        }
        auto r = members.join(e.peer_id, e.player_id, fc);
        if (r.outcome == testing_support::RefOutcome::replace) buttons.erase(*r.evicted);
        if (r.outcome != testing_support::RefOutcome::reject) buttons[e.peer_id] = {};
        break;
      }
      case Kind::user: {
        if (!members.contains(e.peer_id)) {
          ++dropped;
          return;
        }
        auto b = *nes_button_from_string(e.payload["b"].get<std::string>());
        buttons[e.peer_id][static_cast<std::size_t>(b)] = e.payload["v"].get<bool>();
        break;
      }
      case Kind::bye:
        if (members.close(e.peer_id).outcome == testing_support::RefOutcome::unknown_peer) {
          ++dropped;
        } else {
          buttons.erase(e.peer_id);
        }
        break;
      default: break;
    }
  }
};

TEST(DispatchFrame, RandomInterleavingMatchesReference) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    Registry reg("s");
    FrameModel model;
    std::map<std::string, std::uint64_t> seq;
    for (int i = 0; i < 100; ++i) {
      auto peer = "p" + std::to_string(rng() % 10);
      Envelope e;
      switch (rng() % 6) {
        case 0: {
          std::optional<std::string> pl;
          if (rng() % 2) pl = std::string(1, static_cast<char>('A' + rng() % 3));
          e = frame(Kind::hello, peer, seq[peer]++, Json{{"fc", rng() % 2 == 0}, {"ctl", "nes"}}, pl);
          break;
        }
        case 1: e = frame(Kind::bye, peer, seq[peer]++); break;
        default:
          e = frame(Kind::user, peer, seq[peer]++,
                    nes_payload(kNesButtons[rng() % 8], rng() % 2 == 0));
      }
      reg.dispatch_frame(e, i);
      model.apply(e);
    }
    const auto& c = reg.counters();
    EXPECT_EQ(c.unknown_peer + c.duplicate_hello, model.dropped);
    ASSERT_EQ(reg.entries().size(), model.buttons.size());
    for (const auto& [peer, btns] : model.buttons) {
      const auto* e = reg.find(peer);
      ASSERT_TRUE(e) << peer;
      EXPECT_EQ(std::get<NesState>(*e->controller).buttons, btns);
    }
    auto rows = reg.snapshot(100);
    ASSERT_EQ(rows.size(), model.members.members().size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      EXPECT_EQ(rows[i].peer_id, model.members.members()[i].peer);
      EXPECT_EQ(rows[i].player_id, model.members.members()[i].player);
    }
  }
}

TEST(EventLog, ReplayReconstructsMembership) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    Registry reg("s");
    int next = 0;
    for (int step = 0; step < 60; ++step) {
      if (rng() % 3 || reg.entries().empty()) {
        std::optional<std::string> pl;
        if (rng() % 2) pl = std::string(1, static_cast<char>('A' + rng() % 3));
        reg.handle_join("p" + std::to_string(next++), join(pl, rng() % 2), step);
      } else {
        auto it = reg.entries().begin();
        std::advance(it, static_cast<long>(rng() % reg.entries().size()));
        reg.handle_close(it->first, step);
      }
      if (rng() % 5 == 0) reg.sweep(step, 1000);  // nothing is idle that long
    }
    // Replay: connected adds, disconnected removes, everything else is informational.
    std::map<std::string, std::optional<std::string>> replayed;
    std::map<std::string, std::vector<LifecycleKind>> per_peer;
    for (const auto& ev : reg.event_log()) {
      per_peer[ev.peer_id].push_back(ev.kind);
      if (ev.kind == LifecycleKind::connected) replayed[ev.peer_id] = ev.player_id;
      if (ev.kind == LifecycleKind::disconnected) replayed.erase(ev.peer_id);
    }
    ASSERT_EQ(replayed.size(), reg.entries().size());
    for (const auto& [peer, pl] : replayed) {
      ASSERT_TRUE(reg.find(peer));
      EXPECT_EQ(reg.find(peer)->player_id, pl);
    }
    // Per-peer ordering: connected first, disconnected last.
    for (const auto& [peer, kinds] : per_peer) {
      if (kinds.front() == LifecycleKind::rejected) continue;
      EXPECT_EQ(kinds.front(), LifecycleKind::connected) << peer;
      for (std::size_t i = 0; i + 1 < kinds.size(); ++i) {
        EXPECT_NE(kinds[i], LifecycleKind::disconnected) << peer;
      }
    }
  }
}

// --- snapshot -------------------------------------------------------------------

TEST(Snapshot, Empty) {
  Registry reg("s");
  EXPECT_TRUE(reg.snapshot(0).empty());
}

TEST(Snapshot, OrderedByConnectionTime) {
  Registry reg("s");
  reg.handle_join("c", join(), 3);
  reg.handle_join("a", join(), 1);
  reg.handle_join("b", join(), 2);
  auto rows = reg.snapshot(10);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].peer_id, "a");
  EXPECT_EQ(rows[1].peer_id, "b");
  EXPECT_EQ(rows[2].peer_id, "c");
}

TEST(Snapshot, ThirtyTwoPeers) {
  Registry reg("s");
  for (int i = 0; i < 32; ++i) {
    reg.handle_join("phone-" + std::to_string(i), join("player" + std::to_string(i)), 0,
                    ControllerKind::touchpad);
  }
  auto rows = reg.snapshot(0);
  ASSERT_EQ(rows.size(), 32u);
  std::set<std::string> unique;
  for (const auto& r : rows) unique.insert(r.peer_id);
  EXPECT_EQ(unique.size(), 32u);
  EXPECT_EQ(rows[5].player_id, "player5");
}

// --- sweep ------------------------------------------------------------------------

TEST(Sweep, IdleThreshold) {
  Registry reg("s");
  reg.handle_join("quiet", join("J"), 0);
  reg.handle_join("chatty", join(), 0);
  reg.dispatch_frame(frame(Kind::user, "chatty", 1, accel_payload(0, 0, 9.81)), 3000);
  EXPECT_TRUE(reg.sweep(4000).empty());
  auto closed = reg.sweep(6000);
  ASSERT_EQ(closed.size(), 1u);
  EXPECT_EQ(closed[0], "quiet");
  EXPECT_TRUE(reg.claims().empty());
  EXPECT_TRUE(reg.find("chatty"));
}

TEST(Telemetry, RefreshWritesBaseFields) {
  Registry reg("s");
  reg.handle_join("p1", join(), 0, ControllerKind::joystick);
  for (std::int64_t t = 10; t <= 1000; t += 10) {
    reg.dispatch_frame(frame(Kind::user, "p1", static_cast<std::uint64_t>(t), joystick_payload(0, 1)), t);
  }
  reg.refresh_telemetry(1000);
  EXPECT_EQ(base_of(*reg.find("p1")->controller).user_rate_hz, 100.0);
  EXPECT_EQ(reg.snapshot(1000)[0].user_rate_hz, 100.0);
}

}  // namespace
}  // namespace phonepad
