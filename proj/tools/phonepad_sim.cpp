// phonepad-sim: run simulated scenarios and compare their CSV reports.
//
// Exit codes: 0 pass, 1 failure (frame loss, ordering, tolerance or shape),
// 2 configuration or input error.
#include "phonepad/netsim.hpp"
#include "phonepad/sim.hpp"
#include "phonepad/telemetry.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

namespace {

constexpr int kExitPass = 0;
constexpr int kExitFail = 1;
constexpr int kExitConfig = 2;

std::string fmt(std::optional<double> v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", *v);
  return buf;
}

void print_summary(std::ostream& os, const phonepad::StatsReport& r) {
  const auto& a = r.aggregates;
  os << "samples " << r.samples.size() << " (warmup " << r.warmup_ms << " ms)\n"
     << "ping_ms mean " << fmt(a.ping_mean_ms) << " min " << fmt(a.ping_min_ms) << " max "
     << fmt(a.ping_max_ms) << "\n"
     << "user_rate_hz mean " << fmt(a.user_rate_mean_hz) << "\n"
     << "stat_rate_hz mean " << fmt(a.stat_rate_mean_hz) << "\n"
     << "frames sent " << r.frames_sent << " throttled " << r.frames_throttled << " received "
     << r.frames_received << " lost " << r.frame_loss << "\n"
     << "seq violations " << r.seq_violations << "\n";
}

std::vector<phonepad::StatsSample> read_csv_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return phonepad::parse_csv(ss.str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Simulate phone controllers against a relay and compare telemetry reports"};
  app.require_subcommand(1);

  phonepad::ScenarioConfig cfg;
  std::string controller = "joystick";
  std::string transport = "loopback";
  std::string csv_path;
  std::string relay;
  auto* run = app.add_subcommand("run", "Run one scenario and write its telemetry CSV");
  run->add_option("--clients", cfg.n_clients, "Number of simulated phones")->capture_default_str();
  run->add_option("--controller", controller, "Controller kind")
      ->check(CLI::IsMember({"nes", "joystick", "touchpad", "accel"}))
      ->capture_default_str();
  run->add_option("--latency-ms", cfg.one_way_latency_ms, "One-way latency of each phone link")
      ->capture_default_str();
  run->add_option("--jitter-ms", cfg.jitter_ms, "Uniform +/- jitter on the latency")->capture_default_str();
  run->add_option("--rate-hz", cfg.send_rate_hz, "Trace rate per phone")->capture_default_str();
  run->add_option("--throttle-ms", cfg.throttle_min_interval_ms, "Minimum interval between user frames")
      ->capture_default_str();
  run->add_option("--duration-s", cfg.duration_s, "Scenario length")->capture_default_str();
  run->add_option("--seed", cfg.seed, "Random seed")->capture_default_str();
  run->add_option("--transport", transport, "loopback (virtual clock) or network (real relay)")
      ->check(CLI::IsMember({"loopback", "network"}))
      ->capture_default_str();
  run->add_option("--csv", csv_path, "Write the CSV here ('-' or omitted: stdout)");
  run->add_option("--relay", relay, "host:port of a running relay (network transport only)");

  std::string path_a, path_b;
  phonepad::Tolerances tol;
  auto* compare = app.add_subcommand("compare", "Compare two telemetry CSV files");
  compare->add_option("a", path_a, "First CSV")->required();
  compare->add_option("b", path_b, "Second CSV")->required();
  compare->add_option("--tol-ping-ms", tol.ping_ms, "Allowed ping difference")->capture_default_str();
  compare->add_option("--tol-rate-hz", tol.rate_hz, "Allowed rate difference")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitPass : kExitConfig;
  }

  if (run->parsed()) {
    cfg.controller = *phonepad::controller_kind_from_string(controller);
    cfg.transport = *phonepad::transport_from_string(transport);
    phonepad::NetworkRunOptions opts;
    phonepad::StatsReport report;
    try {
      if (!relay.empty()) {
        if (cfg.transport != phonepad::TransportMode::network) {
          throw phonepad::ConfigInvalid("--relay needs --transport network");
        }
        auto [host, port] = phonepad::parse_listen_address(relay);
        opts.relay = std::make_pair(host, port);
      }
      phonepad::validate(cfg);
    } catch (const std::invalid_argument& e) {
      std::cerr << "config error: " << e.what() << "\n";
      return kExitConfig;
    }
    try {
      report = phonepad::run_scenario(cfg, opts);
    } catch (const std::exception& e) {
      std::cerr << "run failed: " << e.what() << "\n";
      return kExitFail;
    }
    auto csv = report.csv();
    bool to_stdout = csv_path.empty() || csv_path == "-";
    if (to_stdout) {
      std::cout << csv;
    } else {
      std::ofstream out(csv_path, std::ios::binary);
      out << csv;
      if (!out) {
        std::cerr << "cannot write " << csv_path << "\n";
        return kExitConfig;
      }
    }
    print_summary(to_stdout ? std::cerr : std::cout, report);
    return report.frame_loss == 0 && report.seq_violations == 0 ? kExitPass : kExitFail;
  }

  std::vector<phonepad::StatsSample> a, b;
  try {
    a = read_csv_file(path_a);
    b = read_csv_file(path_b);
  } catch (const std::exception& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kExitConfig;
  }
  if (tol.ping_ms < 0 || tol.rate_hz < 0) {
    std::cerr << "config error: tolerances must be >= 0\n";
    return kExitConfig;
  }
  phonepad::CompareResult result;
  try {
    result = phonepad::compare_samples(a, b, tol);
  } catch (const phonepad::ShapeMismatch& e) {
    std::cout << "FAIL shape mismatch: " << e.what() << "\n";
    return kExitFail;
  }
  constexpr std::size_t kShown = 20;
  for (std::size_t i = 0; i < result.diffs.size() && i < kShown; ++i) {
    const auto& d = result.diffs[i];
    std::cout << d.metric << " t_ms=" << d.t_ms << " peer_id=" << d.peer_id << " a=" << fmt(d.a)
              << " b=" << fmt(d.b) << "\n";
  }
  if (result.diffs.size() > kShown) {
    std::cout << "... " << result.diffs.size() - kShown << " more\n";
  }
  std::cout << (result.pass ? "PASS" : "FAIL") << " " << result.rows << " rows, "
            << result.diffs.size() << " metrics outside tolerance\n";
  return result.pass ? kExitPass : kExitFail;
}
