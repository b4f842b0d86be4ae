// phonepad-relay: pairs displays with phones and forwards frames between them.
// Accepts raw newline-delimited TCP and WebSocket clients on the same port.
#include "phonepad/net.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <iostream>

int main(int argc, char** argv) {
  CLI::App app{"Relay between phonepad displays and phones"};
  std::string listen = "0.0.0.0:8765";
  std::int64_t idle_ms = phonepad::kDefaultIdleTimeoutMs;
  bool print_config = false;
  app.add_option("--listen", listen, "Listen address host:port")
      ->envname("PHONEPAD_LISTEN")
      ->capture_default_str();
  app.add_option("--idle-timeout-ms", idle_ms, "Close connections silent for longer than this")
      ->envname("PHONEPAD_IDLE_MS")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app.add_flag("--print-config", print_config, "Print the resolved settings and exit");
  CLI11_PARSE(app, argc, argv);

  std::pair<std::string, std::uint16_t> addr;
  try {
    addr = phonepad::parse_listen_address(listen);
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }
  if (print_config) {
    std::cout << "listen " << addr.first << ":" << addr.second << "\nidle_timeout_ms " << idle_ms << "\n";
    return 0;
  }

  phonepad::RelayServer server({addr.first, addr.second, idle_ms});
  try {
    server.start();
  } catch (const std::exception& e) {
    std::cerr << "cannot listen on " << listen << ": " << e.what() << "\n";
    return 1;
  }
  std::cout << "listening on " << addr.first << ":" << server.port() << std::endl;

  boost::asio::io_context signals_io;
  boost::asio::signal_set signals(signals_io, SIGINT, SIGTERM);
  signals.async_wait([](const boost::system::error_code&, int) {});
  signals_io.run();

  auto c = server.counters();
  server.stop();
  std::cout << "frames in " << c.frames_in << " routed " << c.frames_routed << " malformed "
            << c.malformed << " rejected joins " << c.rejected_joins << " idle closed "
            << c.idle_closed << std::endl;
  return 0;
}
