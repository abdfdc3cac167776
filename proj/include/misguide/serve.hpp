#pragma once

#include <cstddef>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include "misguide/gate.hpp"

namespace misguide {

struct ServerConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 binds an ephemeral port
  std::string admin_token;
  // Serialize request handling so a fixed transcript replays byte for byte.
  bool single_worker = false;
};

inline constexpr std::size_t kMaxBatch = 1024;
inline constexpr const char* kAdminTokenHeader = "X-Admin-Token";

struct HttpReply {
  int status = 200;
  std::string body;
};

/// Transport-free request handlers. Every reply body is JSON.
class PredictionService {
 public:
  PredictionService(std::shared_ptr<Gate> gate, std::string admin_token);

  HttpReply predict(const std::string& body);
  HttpReply health() const;
  HttpReply stats(const std::optional<std::string>& token) const;
  HttpReply admin_config(const std::optional<std::string>& token, const std::string& body);

  Gate& gate() { return *gate_; }

 private:
  bool authorized(const std::optional<std::string>& token) const;

  std::shared_ptr<Gate> gate_;
  std::string admin_token_;
};

/// HTTP/1.1 front end for a PredictionService.
class Server {
 public:
  Server(std::shared_ptr<Gate> gate, ServerConfig cfg);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  // Binds and serves on a background thread; returns the bound port.
  int start();
  // Binds and serves on the calling thread until stop().
  void run();
  void stop();
  int port() const { return port_; }

 private:
  int bind();

  struct Impl;
  std::unique_ptr<Impl> impl_;
  ServerConfig cfg_;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace misguide
