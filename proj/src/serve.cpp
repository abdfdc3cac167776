#include "misguide/serve.hpp"

#include <cmath>
#include <stdexcept>

#include <httplib.h>
#include <json.hpp>

#include "misguide/errors.hpp"

namespace misguide {

namespace {
using nlohmann::json;

HttpReply error_reply(int status, const std::string& message, std::optional<std::size_t> row = std::nullopt) {
  json j{{"error", message}};
  if (row) j["row"] = *row;
  return {status, j.dump()};
}

std::optional<std::string> header_of(const httplib::Request& req, const char* name) {
  if (!req.has_header(name)) return std::nullopt;
  return req.get_header_value(name);
}
}  // namespace

PredictionService::PredictionService(std::shared_ptr<Gate> gate, std::string admin_token)
    : gate_(std::move(gate)), admin_token_(std::move(admin_token)) {
  if (!gate_) throw std::invalid_argument("PredictionService needs a gate");
}

bool PredictionService::authorized(const std::optional<std::string>& token) const {
  return !admin_token_.empty() && token && *token == admin_token_;
}

HttpReply PredictionService::predict(const std::string& body) {
  json req = json::parse(body, nullptr, false);
  if (req.is_discarded()) return error_reply(400, "malformed JSON");
  if (!req.is_object() || !req.contains("inputs") || !req["inputs"].is_array()) {
    return error_reply(400, "body must be an object with an \"inputs\" array");
  }
  const auto& inputs = req["inputs"];
  if (inputs.empty()) return error_reply(400, "inputs must not be empty");
  if (inputs.size() > kMaxBatch) return error_reply(413, "batch larger than " + std::to_string(kMaxBatch));

  const std::size_t d = gate_->input_dim();
  Matrix batch(inputs.size(), d);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto& row = inputs[i];
    if (!row.is_array() || row.size() != d) {
      return error_reply(400, "row must be an array of " + std::to_string(d) + " numbers", i);
    }
    for (std::size_t k = 0; k < d; ++k) {
      if (!row[k].is_number()) return error_reply(400, "row contains a non-numeric value", i);
      batch(i, k) = row[k].get<double>();
      if (!std::isfinite(batch(i, k))) return error_reply(400, "row contains a non-finite value", i);
    }
  }

  const bool hard = gate_->config().label_mode == LabelMode::Hard;
  auto responses = gate_->respond_batch(batch);
  json outputs = json::array();
  for (const auto& r : responses) {
    if (hard) {
      outputs.push_back({{"label", r.label}});
    } else {
      outputs.push_back({{"logits", r.logits}});
    }
  }
  return {200, json{{"outputs", std::move(outputs)}}.dump()};
}

HttpReply PredictionService::health() const {
  return {200, json{{"status", "ok"}, {"mode", to_string(gate_->config().label_mode)}}.dump()};
}

HttpReply PredictionService::stats(const std::optional<std::string>& token) const {
  if (!authorized(token)) return error_reply(401, "missing or bad admin token");
  const GateStats s = gate_->stats();
  return {200,
          json{{"queries_total", s.queries_total}, {"ood_flagged", s.ood_flagged}, {"randomized", s.randomized}}.dump()};
}

HttpReply PredictionService::admin_config(const std::optional<std::string>& token, const std::string& body) {
  if (!authorized(token)) return error_reply(401, "missing or bad admin token");
  json req = json::parse(body, nullptr, false);
  if (req.is_discarded() || !req.is_object()) return error_reply(400, "malformed JSON");
  for (const auto& [key, _] : req.items()) {
    if (key != "p") return error_reply(400, "unknown config key: " + key);
  }
  if (!req.contains("p") || !req["p"].is_number()) return error_reply(400, "\"p\" must be a number");
  try {
    gate_->set_p(req["p"].get<double>());
  } catch (const OutOfRange& e) {
    return error_reply(400, e.what());
  }
  const DefenseConfig cfg = gate_->config();
  return {200, json{{"p", cfg.p},
                    {"label_mode", to_string(cfg.label_mode)},
                    {"consistent_responses", cfg.consistent_responses}}
                   .dump()};
}

struct Server::Impl {
  PredictionService service;
  httplib::Server http;
  std::mutex serial;

  Impl(std::shared_ptr<Gate> gate, const ServerConfig& cfg) : service(std::move(gate), cfg.admin_token) {}
};

Server::Server(std::shared_ptr<Gate> gate, ServerConfig cfg)
    : impl_(std::make_unique<Impl>(std::move(gate), cfg)), cfg_(std::move(cfg)) {
  auto& http = impl_->http;
  const bool serial = cfg_.single_worker;
  http.set_tcp_nodelay(true);
  if (serial) http.new_task_queue = [] { return new httplib::ThreadPool(1); };

  auto reply = [this, serial](httplib::Response& res, auto&& handler) {
    HttpReply r;
    if (serial) {
      std::lock_guard lock(impl_->serial);
      r = handler();
    } else {
      r = handler();
    }
    res.status = r.status;
    res.set_content(r.body, "application/json");
  };

  http.Post("/v1/predict", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, [&] { return impl_->service.predict(req.body); });
  });
  http.Get("/v1/health", [this, reply](const httplib::Request&, httplib::Response& res) {
    reply(res, [&] { return impl_->service.health(); });
  });
  http.Get("/v1/stats", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, [&] { return impl_->service.stats(header_of(req, kAdminTokenHeader)); });
  });
  http.Post("/v1/admin/config", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, [&] { return impl_->service.admin_config(header_of(req, kAdminTokenHeader), req.body); });
  });
  http.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string what = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    res.status = 500;
    res.set_content(json{{"error", what}}.dump(), "application/json");
  });
}

Server::~Server() { stop(); }

int Server::bind() {
  auto& http = impl_->http;
  port_ = cfg_.port == 0 ? http.bind_to_any_port(cfg_.host) : (http.bind_to_port(cfg_.host, cfg_.port) ? cfg_.port : -1);
  if (port_ < 0) throw IoError("cannot bind " + cfg_.host + ":" + std::to_string(cfg_.port));
  return port_;
}

int Server::start() {
  auto& http = impl_->http;
  bind();
  thread_ = std::thread([&http] { http.listen_after_bind(); });
  http.wait_until_ready();
  return port_;
}

void Server::run() {
  auto& http = impl_->http;
  bind();
  http.listen_after_bind();
}

void Server::stop() {
  impl_->http.stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace misguide
