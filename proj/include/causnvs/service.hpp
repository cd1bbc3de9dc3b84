#pragma once

#include <atomic>
#include <chrono>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "causnvs/config.hpp"
#include "causnvs/engine.hpp"
#include "json.hpp"

namespace causnvs {

struct HttpResponse {
  int status = 200;
  nlohmann::json body;
};

/// Session registry plus the JSON API. handle() is transport-free so it can
/// be driven directly; serve() puts it behind HTTP and WebSocket.
class Service {
 public:
  /// `params` may be null: every session call then answers 503.
  Service(std::shared_ptr<const DenoiserParams> params, RunConfig config);
  ~Service();

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  HttpResponse handle(const std::string& method, const std::string& target, const std::string& body);

  /// One stream message ({"pose": ...}) for a session; same result body as
  /// POST /generate. Status codes map to an "error" field on failure.
  HttpResponse stream_message(const std::string& session_id, const std::string& message);

  /// Binds and starts accepting on a background thread. Returns the bound port.
  unsigned short start();
  void stop();
  /// start() then block until stop() is called from another thread.
  void serve_forever();

  std::size_t session_count() const;

 private:
  struct Entry;
  std::shared_ptr<Entry> find(const std::string& id) const;
  HttpResponse create_session(const std::string& body);
  HttpResponse push_input(Entry& e, const std::string& body);
  HttpResponse generate(Entry& e, const nlohmann::json& request);
  nlohmann::json stats(const Entry& e) const;
  void accept_loop();

  std::shared_ptr<const DenoiserParams> params_;
  RunConfig config_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<Entry>> sessions_;
  std::uint64_t next_session_ = 0;

  struct Net;
  std::unique_ptr<Net> net_;
  std::thread accept_thread_;
  std::atomic<bool> running_{false};
  std::mutex conn_mu_;
  struct Connection;
  std::vector<std::unique_ptr<Connection>> connections_;
  unsigned short port_ = 0;
};

/// JSON schemas served at /api/schema.
nlohmann::json api_schema();

}  // namespace causnvs
