// Network transport for the relay: one listening port that speaks either raw
// newline-delimited frames over TCP or WebSocket text messages (detected from
// the first bytes a client sends), plus a small asynchronous line client.
//
// Everything runs on one io_context thread, so RelayCore is never touched
// concurrently.
#pragma once

#include "phonepad/protocol.hpp"
#include "phonepad/relay.hpp"

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>

#include <algorithm>
#include <array>
#include <charconv>
#include <chrono>
#include <cstdint>
#include <deque>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <utility>

namespace phonepad {

namespace asio = boost::asio;
using tcp = asio::ip::tcp;

/// Splits "host:port". A bare port means all interfaces.
inline std::pair<std::string, std::uint16_t> parse_listen_address(std::string_view s) {
  auto colon = s.rfind(':');
  std::string host = colon == std::string_view::npos ? "0.0.0.0" : std::string(s.substr(0, colon));
  auto port_text = colon == std::string_view::npos ? s : s.substr(colon + 1);
  if (host.size() >= 2 && host.front() == '[' && host.back() == ']') {
    host = host.substr(1, host.size() - 2);
  }
  if (host.empty()) host = "0.0.0.0";
  unsigned port = 0;
  auto [ptr, ec] = std::from_chars(port_text.data(), port_text.data() + port_text.size(), port);
  if (ec != std::errc{} || ptr != port_text.data() + port_text.size() || port > 65535 ||
      port_text.empty()) {
    throw std::invalid_argument("bad listen address: " + std::string(s));
  }
  return {host, static_cast<std::uint16_t>(port)};
}

namespace detail {

/// Pops complete lines off the front of `buf`, stripping a trailing '\r'.
template <class F>
void drain_lines(std::string& buf, F&& on_line) {
  std::size_t start = 0;
  for (;;) {
    auto nl = buf.find('\n', start);
    if (nl == std::string::npos) break;
    std::string_view line(buf.data() + start, nl - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!line.empty()) on_line(line);
    start = nl + 1;
  }
  buf.erase(0, start);
}

}  // namespace detail

class RelayServer : private RelayOutbox {
 public:
  struct Options {
    std::string address = "0.0.0.0";
    std::uint16_t port = 8765;
    std::int64_t idle_timeout_ms = kDefaultIdleTimeoutMs;
  };

  explicit RelayServer(Options options)
      : options_(std::move(options)),
        core_(*this, RelayCore::Options{options_.idle_timeout_ms}),
        acceptor_(io_),
        sweep_timer_(io_),
        epoch_(std::chrono::steady_clock::now()) {}

  RelayServer(const RelayServer&) = delete;
  RelayServer& operator=(const RelayServer&) = delete;
  ~RelayServer() override { stop(); }

  /// Binds, listens and starts serving on a background thread.
  void start() {
    tcp::endpoint ep(asio::ip::make_address(options_.address), options_.port);
    acceptor_.open(ep.protocol());
    acceptor_.set_option(asio::socket_base::reuse_address(true));
    acceptor_.bind(ep);
    acceptor_.listen();
    port_ = acceptor_.local_endpoint().port();
    do_accept();
    schedule_sweep();
    thread_ = std::thread([this] { io_.run(); });
  }

  void stop() {
    if (!thread_.joinable()) return;
    io_.stop();
    thread_.join();
  }

  std::uint16_t port() const { return port_; }

  /// Runs `f(core)` on the server thread and returns its result.
  template <class F>
  auto call(F f) -> decltype(f(std::declval<const RelayCore&>())) {
    using R = decltype(f(std::declval<const RelayCore&>()));
    std::promise<R> p;
    auto fut = p.get_future();
    asio::post(io_, [&] { p.set_value(f(static_cast<const RelayCore&>(core_))); });
    return fut.get();
  }

  RelayCounters counters() {
    return call([](const RelayCore& c) { return c.counters(); });
  }

 private:
  class Connection : public std::enable_shared_from_this<Connection> {
   public:
    Connection(RelayServer& server, ConnId id, tcp::socket socket)
        : server_(server), id_(id), socket_(std::move(socket)), linger_(socket_.get_executor()) {}

    void start() { sniff(); }

    void send(std::string frame) {
      if (finished_ || close_requested_) return;
      if (ws_) {
        ws_queue_.push_back(std::move(frame));
      } else {
        pending_ += frame;
        pending_ += '\n';
      }
      if (!writing_) write_next();
    }

    void close_after_flush() {
      close_requested_ = true;
      if (!writing_) shutdown();
    }

   private:
    void sniff() {
      auto self = shared_from_this();
      auto buf = std::make_shared<std::array<char, 4096>>();
      socket_.async_read_some(asio::buffer(*buf), [self, buf](boost::system::error_code ec,
                                                              std::size_t n) {
        if (ec) return self->finish();
        self->rbuf_.append(buf->data(), n);
        constexpr std::string_view kGet = "GET ";
        std::string_view head = self->rbuf_;
        if (head.size() < kGet.size() && kGet.substr(0, head.size()) == head) {
          return self->sniff();
        }
        if (head.substr(0, kGet.size()) == kGet) {
          self->upgrade();
        } else {
          self->on_raw_input();
        }
      });
    }

    // --- raw lines ---

    void read_raw() {
      auto self = shared_from_this();
      auto buf = std::make_shared<std::array<char, 8192>>();
      socket_.async_read_some(asio::buffer(*buf), [self, buf](boost::system::error_code ec,
                                                              std::size_t n) {
        if (ec) return self->finish();
        self->rbuf_.append(buf->data(), n);
        self->on_raw_input();
      });
    }

    void on_raw_input() {
      detail::drain_lines(rbuf_, [&](std::string_view line) { server_.deliver(id_, line); });
      if (rbuf_.size() > kMaxFrameBytes + 1) {
        return finish();  // a line that can never become a valid frame
      }
      if (!finished_) read_raw();
    }

    // --- websocket ---

    void upgrade() {
      ws_.emplace(std::move(socket_));
      ws_->read_message_max(kMaxFrameBytes + 1);
      ws_->text(true);
      auto self = shared_from_this();
      ws_->async_accept(asio::buffer(rbuf_), [self](boost::beast::error_code ec) {
        if (ec) return self->finish();
        self->read_ws();
      });
      rbuf_.clear();
    }

    void read_ws() {
      auto self = shared_from_this();
      ws_->async_read(ws_buf_, [self](boost::beast::error_code ec, std::size_t) {
        if (ec) return self->finish();
        auto text = boost::beast::buffers_to_string(self->ws_buf_.data());
        self->ws_buf_.consume(self->ws_buf_.size());
        std::string_view line = text;
        while (!line.empty() && (line.back() == '\n' || line.back() == '\r')) line.remove_suffix(1);
        self->server_.deliver(self->id_, line);
        if (!self->finished_) self->read_ws();
      });
    }

    // --- output ---

    void write_next() {
      auto self = shared_from_this();
      if (ws_) {
        if (ws_queue_.empty()) return idle();
        writing_ = true;
        ws_->async_write(asio::buffer(ws_queue_.front()),
                         [self](boost::beast::error_code ec, std::size_t) {
                           self->ws_queue_.pop_front();
                           if (ec) return self->finish();
                           self->write_next();
                         });
        return;
      }
      if (pending_.empty()) return idle();
      writing_ = true;
      inflight_.swap(pending_);
      pending_.clear();
      asio::async_write(socket_, asio::buffer(inflight_),
                        [self](boost::system::error_code ec, std::size_t) {
                          if (ec) return self->finish();
                          self->write_next();
                        });
    }

    void idle() {
      writing_ = false;
      if (close_requested_) shutdown();
    }

    void shutdown() {
      if (finished_ || shutting_down_) return;
      shutting_down_ = true;
      auto self = shared_from_this();
      if (ws_) {
        ws_->async_close(boost::beast::websocket::close_code::normal,
                         [self](boost::beast::error_code) { self->finish(); });
      } else {
        boost::system::error_code ignored;
        socket_.shutdown(tcp::socket::shutdown_send, ignored);
      }
      // The read loop sees EOF once the peer closes; do not wait forever.
      linger_.expires_after(std::chrono::seconds(2));
      linger_.async_wait([self](boost::system::error_code ec) {
        if (!ec) self->finish();
      });
    }

    void finish() {
      if (finished_) return;
      finished_ = true;
      linger_.cancel();
      boost::system::error_code ignored;
      if (ws_) {
        ws_->next_layer().close(ignored);
      } else {
        socket_.close(ignored);
      }
      server_.transport_closed(id_);
    }

    RelayServer& server_;
    ConnId id_;
    tcp::socket socket_;
    std::optional<boost::beast::websocket::stream<tcp::socket>> ws_;
    asio::steady_timer linger_;
    std::string rbuf_;
    boost::beast::flat_buffer ws_buf_;
    std::string pending_;
    std::string inflight_;
    std::deque<std::string> ws_queue_;
    bool writing_ = false;
    bool close_requested_ = false;
    bool shutting_down_ = false;
    bool finished_ = false;
  };

  std::int64_t now_ms() const {
    return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() -
                                                                 epoch_)
        .count();
  }

  void do_accept() {
    acceptor_.async_accept([this](boost::system::error_code ec, tcp::socket socket) {
      if (ec == asio::error::operation_aborted) return;
      if (!ec) {
        socket.set_option(tcp::no_delay(true), ec);
        auto id = next_id_++;
        auto conn = std::make_shared<Connection>(*this, id, std::move(socket));
        conns_.emplace(id, conn);
        core_.on_open(id, now_ms());
        conn->start();
      }
      do_accept();
    });
  }

  void schedule_sweep() {
    auto period = std::clamp<std::int64_t>(options_.idle_timeout_ms / 4, 50, 1000);
    sweep_timer_.expires_after(std::chrono::milliseconds(period));
    sweep_timer_.async_wait([this](boost::system::error_code ec) {
      if (ec) return;
      core_.sweep(now_ms());
      schedule_sweep();
    });
  }

  void deliver(ConnId id, std::string_view frame) { core_.on_frame(id, frame, now_ms()); }

  void transport_closed(ConnId id) {
    conns_.erase(id);
    core_.on_close(id, now_ms());
  }

  // RelayOutbox
  void send(ConnId conn, std::string frame) override {
    if (auto it = conns_.find(conn); it != conns_.end()) it->second->send(std::move(frame));
  }
  void close(ConnId conn) override {
    if (auto it = conns_.find(conn); it != conns_.end()) it->second->close_after_flush();
  }

  asio::io_context io_;
  Options options_;
  RelayCore core_;
  tcp::acceptor acceptor_;
  asio::steady_timer sweep_timer_;
  std::chrono::steady_clock::time_point epoch_;
  std::map<ConnId, std::shared_ptr<Connection>> conns_;
  ConnId next_id_ = 1;
  std::uint16_t port_ = 0;
  std::thread thread_;
};

/// Asynchronous newline-delimited frame client.
class LineClient : public std::enable_shared_from_this<LineClient> {
 public:
  using LineHandler = std::function<void(std::string_view)>;
  using CloseHandler = std::function<void()>;

  static std::shared_ptr<LineClient> create(asio::io_context& io) {
    return std::shared_ptr<LineClient>(new LineClient(io));
  }

  void async_connect(const tcp::endpoint& ep, std::function<void(boost::system::error_code)> done) {
    auto self = shared_from_this();
    socket_.async_connect(ep, [self, done = std::move(done)](boost::system::error_code ec) {
      if (!ec) {
        boost::system::error_code ignored;
        self->socket_.set_option(tcp::no_delay(true), ignored);
        self->open_ = true;
      }
      done(ec);
    });
  }

  /// Begins the read loop. `on_close` fires once, on EOF or error.
  void start(LineHandler on_line, CloseHandler on_close = {}) {
    on_line_ = std::move(on_line);
    on_close_ = std::move(on_close);
    read();
  }

  void send(std::string_view frame) {
    if (!open_) return;
    pending_ += frame;
    pending_ += '\n';
    if (!writing_) write_next();
  }

  /// Half-closes after queued output is written.
  void close() {
    close_requested_ = true;
    if (!writing_) finish_writes();
  }

  bool is_open() const { return open_; }

 private:
  explicit LineClient(asio::io_context& io) : socket_(io) {}

  void read() {
    auto self = shared_from_this();
    auto buf = std::make_shared<std::array<char, 8192>>();
    socket_.async_read_some(asio::buffer(*buf), [self, buf](boost::system::error_code ec,
                                                            std::size_t n) {
      if (ec) return self->closed();
      self->rbuf_.append(buf->data(), n);
      detail::drain_lines(self->rbuf_, [&](std::string_view line) {
        if (self->on_line_) self->on_line_(line);
      });
      if (self->open_) self->read();
    });
  }

  void write_next() {
    if (pending_.empty()) {
      writing_ = false;
      if (close_requested_) finish_writes();
      return;
    }
    writing_ = true;
    inflight_.swap(pending_);
    pending_.clear();
    auto self = shared_from_this();
    asio::async_write(socket_, asio::buffer(inflight_),
                      [self](boost::system::error_code ec, std::size_t) {
                        if (ec) return self->closed();
                        self->write_next();
                      });
  }

  void finish_writes() {
    boost::system::error_code ignored;
    socket_.shutdown(tcp::socket::shutdown_send, ignored);
  }

  void closed() {
    if (!open_) return;
    open_ = false;
    boost::system::error_code ignored;
    socket_.close(ignored);
    if (on_close_) on_close_();
  }

  tcp::socket socket_;
  std::string rbuf_;
  std::string pending_;
  std::string inflight_;
  LineHandler on_line_;
  CloseHandler on_close_;
  bool open_ = false;
  bool writing_ = false;
  bool close_requested_ = false;
};

/// Blocking wrapper over LineClient with its own io_context; for tests and
/// scripts.
class BlockingLineClient {
 public:
  BlockingLineClient(const std::string& host, std::uint16_t port)
      : client_(LineClient::create(io_)) {
    std::optional<boost::system::error_code> result;
    client_->async_connect(tcp::endpoint(asio::ip::make_address(host), port),
                           [&](boost::system::error_code ec) { result = ec; });
    while (!result) io_.run_one();
    if (*result) throw boost::system::system_error(*result);
    client_->start([this](std::string_view line) { lines_.emplace_back(line); },
                   [this] { closed_ = true; });
  }

  void send(std::string_view frame) {
    client_->send(frame);
    io_.restart();
    io_.poll();
  }

  /// Next line, or nullopt on timeout or once the server closed and no lines remain.
  std::optional<std::string> read_line(std::chrono::milliseconds timeout = std::chrono::seconds(2)) {
    auto deadline = std::chrono::steady_clock::now() + timeout;
    while (lines_.empty() && !closed_) {
      auto now = std::chrono::steady_clock::now();
      if (now >= deadline) break;
      io_.restart();
      io_.run_one_for(deadline - now);
    }
    if (lines_.empty()) return std::nullopt;
    auto line = std::move(lines_.front());
    lines_.pop_front();
    return line;
  }

  /// True once the server has closed the connection (within `timeout`).
  bool wait_closed(std::chrono::milliseconds timeout = std::chrono::seconds(2)) {
    auto deadline = std::chrono::steady_clock::now() + timeout;
    while (!closed_) {
      auto now = std::chrono::steady_clock::now();
      if (now >= deadline) break;
      io_.restart();
      io_.run_one_for(deadline - now);
    }
    return closed_;
  }

  void close() {
    client_->close();
    io_.restart();
    io_.poll();
  }

 private:
  asio::io_context io_;
  std::shared_ptr<LineClient> client_;
  std::deque<std::string> lines_;
  bool closed_ = false;
};

}  // namespace phonepad
