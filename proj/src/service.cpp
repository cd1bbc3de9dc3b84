#include "causnvs/service.hpp"

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>

#include "causnvs/errors.hpp"
#include "causnvs/image.hpp"

namespace causnvs {

namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace asio = boost::asio;
using tcp = asio::ip::tcp;
using json = nlohmann::json;

namespace {

HttpResponse error(int status, const std::string& message) { return {status, {{"error", message}}}; }

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::vector<std::string> path_parts(const std::string& target) {
  std::string path = target.substr(0, target.find('?'));
  std::vector<std::string> parts;
  std::stringstream ss(path);
  for (std::string p; std::getline(ss, p, '/');) {
    if (!p.empty()) parts.push_back(p);
  }
  return parts;
}

std::optional<json> parse_body(const std::string& body) {
  if (body.empty()) return json::object();
  try {
    return json::parse(body);
  } catch (const json::parse_error&) {
    return std::nullopt;
  }
}

std::optional<Pose> parse_pose(const json& j, std::string& why) {
  try {
    Pose p = j.get<Pose>();
    return p;
  } catch (const std::exception& e) {
    why = e.what();
    return std::nullopt;
  }
}

std::string content_type(const std::filesystem::path& p) {
  const auto ext = p.extension().string();
  if (ext == ".html") return "text/html";
  if (ext == ".js") return "application/javascript";
  if (ext == ".css") return "text/css";
  if (ext == ".json") return "application/json";
  if (ext == ".png") return "image/png";
  if (ext == ".svg") return "image/svg+xml";
  return "application/octet-stream";
}

template <class Body>
void add_cors(http::response<Body>& res) {
  res.set(http::field::access_control_allow_origin, "*");
  res.set(http::field::access_control_allow_methods, "GET, POST, DELETE, OPTIONS");
  res.set(http::field::access_control_allow_headers, "Content-Type");
}

}  // namespace

struct Service::Entry {
  std::string id;
  std::string created_at;
  json config;
  std::unique_ptr<Session> session;
  std::mutex mu;  // serializes every mutation of `session`
};

struct Service::Net {
  asio::io_context ioc;
  tcp::acceptor acceptor{ioc};
};

struct Service::Connection {
  std::shared_ptr<tcp::socket> socket;
  std::shared_ptr<std::atomic<bool>> done;
  std::thread thread;
};

Service::Service(std::shared_ptr<const DenoiserParams> params, RunConfig config)
    : params_(std::move(params)), config_(std::move(config)) {
  config_.service.validate();
  if (params_) config_.engine.validate(params_->config);
}

Service::~Service() { stop(); }

std::size_t Service::session_count() const {
  std::lock_guard lk(mu_);
  return sessions_.size();
}

std::shared_ptr<Service::Entry> Service::find(const std::string& id) const {
  std::lock_guard lk(mu_);
  auto it = sessions_.find(id);
  return it == sessions_.end() ? nullptr : it->second;
}

json Service::stats(const Entry& e) const {
  const Session& s = *e.session;
  int inputs = 0;
  for (const auto& f : s.frames()) inputs += f.source == FrameSource::Input;
  const auto& k = s.config().window_k;
  return {{"session_id", e.id},
          {"created_at", e.created_at},
          {"config", e.config},
          {"config_hash", s.config_hash()},
          {"frames", s.frames().size()},
          {"inputs", inputs},
          {"generated", static_cast<int>(s.frames().size()) - inputs},
          {"cache_entries", s.caches().empty() ? 0 : s.caches().front().size()},
          {"cache_bytes", s.cache_bytes()},
          {"window_k", k ? json(*k) : json("all")}};
}

HttpResponse Service::create_session(const std::string& body) {
  if (!params_) return error(503, "model not loaded");
  const auto req = parse_body(body);
  if (!req || !req->is_object()) return error(400, "body must be a JSON object");
  json defaults = {{"seed", config_.seed}, {"engine", config_.engine}};
  EngineConfig engine;
  std::uint64_t seed = 0;
  try {
    const json merged = merge_config(defaults, *req);
    from_json(merged.at("engine"), engine);
    seed = merged.at("seed").get<std::uint64_t>();
    engine.validate(params_->config);
  } catch (const ConfigError& e) {
    return error(400, e.what());
  } catch (const json::exception& e) {
    return error(400, e.what());
  }

  auto entry = std::make_shared<Entry>();
  entry->created_at = utc_now();
  entry->config = {{"seed", seed}, {"engine", engine}};
  entry->session = std::make_unique<Session>(params_, engine, seed);
  {
    std::lock_guard lk(mu_);
    if (static_cast<int>(sessions_.size()) >= config_.service.max_sessions) {
      return error(503, "session limit reached");
    }
    static thread_local std::mt19937_64 rng(std::random_device{}());
    std::ostringstream id;
    id << std::hex << std::setfill('0') << std::setw(8) << next_session_++ << std::setw(8) << (rng() & 0xffffffffULL);
    entry->id = id.str();
    sessions_[entry->id] = entry;
  }
  return {201, stats(*entry)};
}

HttpResponse Service::push_input(Entry& e, const std::string& body) {
  const auto req = parse_body(body);
  if (!req || !req->is_object()) return error(400, "body must be a JSON object");
  if (!req->contains("image") || !(*req)["image"].is_string()) return error(422, "missing base64 PNG 'image'");
  if (!req->contains("pose")) return error(422, "missing 'pose'");
  std::string why;
  const auto pose = parse_pose((*req)["pose"], why);
  if (!pose) return error(422, "bad pose: " + why);
  Image image;
  try {
    image = decode_png(base64_decode((*req)["image"].get<std::string>()));
  } catch (const std::exception& ex) {
    return error(422, std::string("bad image: ") + ex.what());
  }
  std::unique_lock lk(e.mu, std::defer_lock);
  if (config_.service.queue_when_busy) {
    lk.lock();
  } else if (!lk.try_lock()) {
    return error(409, "a request for this session is in flight");
  }
  try {
    const int id = e.session->push_input_view(image, *pose);
    json s = stats(e);
    s["frame_id"] = id;
    return {200, s};
  } catch (const std::invalid_argument& ex) {
    return error(422, ex.what());
  }
}

HttpResponse Service::generate(Entry& e, const json& req) {
  if (!req.is_object() || !req.contains("pose")) return error(422, "missing 'pose'");
  std::string why;
  const auto pose = parse_pose(req["pose"], why);
  if (!pose) return error(422, "bad pose: " + why);
  std::unique_lock lk(e.mu, std::defer_lock);
  if (config_.service.queue_when_busy) {
    lk.lock();
  } else if (!lk.try_lock()) {
    return error(409, "a generation for this session is in flight");
  }
  try {
    const auto t0 = std::chrono::steady_clock::now();
    FrameDiagnostics d;
    const Image img = e.session->generate_view(*pose, &d);
    const std::string png = base64_encode(encode_png(img));
    json diag = d;
    diag["latency_ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return {200,
            {{"frame_index", e.session->frames().size() - 1},
             {"frame_id", d.frame_id},
             {"pose", *pose},
             {"image", png},
             {"diagnostics", diag}}};
  } catch (const NumericError& ex) {
    return error(500, ex.what());
  } catch (const std::invalid_argument& ex) {
    return error(422, ex.what());
  }
}

HttpResponse Service::stream_message(const std::string& session_id, const std::string& message) {
  if (!params_) return error(503, "model not loaded");
  auto e = find(session_id);
  if (!e) return error(404, "unknown session");
  const auto req = parse_body(message);
  if (!req) return error(400, "message must be JSON");
  return generate(*e, *req);
}

HttpResponse Service::handle(const std::string& method, const std::string& target, const std::string& body) {
  const auto parts = path_parts(target);
  if (method == "OPTIONS") return {204, nullptr};
  if (parts.size() < 2 || parts[0] != "api") return error(404, "not found");
  if (parts.size() == 2 && parts[1] == "health" && method == "GET") {
    return {200, {{"status", "ok"}, {"model_loaded", params_ != nullptr}, {"sessions", session_count()}}};
  }
  if (parts.size() == 2 && parts[1] == "schema" && method == "GET") return {200, api_schema()};
  if (parts[1] != "session") return error(404, "not found");
  if (parts.size() == 2) {
    if (method != "POST") return error(405, "method not allowed");
    return create_session(body);
  }
  if (!params_) return error(503, "model not loaded");
  auto e = find(parts[2]);
  if (!e) return error(404, "unknown session");
  if (parts.size() == 3) {
    if (method == "DELETE") {
      std::lock_guard lk(mu_);
      sessions_.erase(parts[2]);
      return {200, {{"deleted", parts[2]}}};
    }
    if (method == "GET") {
      std::lock_guard lk(e->mu);
      return {200, stats(*e)};
    }
    return error(405, "method not allowed");
  }
  if (parts.size() != 4) return error(404, "not found");
  const std::string& action = parts[3];
  if (action == "input" && method == "POST") return push_input(*e, body);
  if (action == "generate" && method == "POST") {
    const auto req = parse_body(body);
    if (!req) return error(400, "body must be JSON");
    return generate(*e, *req);
  }
  if (action == "state" && method == "GET") {
    std::lock_guard lk(e->mu);
    json s = stats(*e);
    json frames = json::array();
    for (const auto& f : e->session->frames()) {
      frames.push_back({{"frame_id", f.frame_id},
                        {"source", to_string(f.source)},
                        {"pose", f.pose},
                        {"noise_level", f.noise_level},
                        {"context", f.context}});
    }
    s["committed"] = std::move(frames);
    return {200, s};
  }
  return error(404, "not found");
}

// ---------------------------------------------------------------------------
// Transport

namespace {

void serve_websocket(Service& svc, tcp::socket& socket, const http::request<http::string_body>& req,
                     const std::string& session_id) {
  websocket::stream<tcp::socket&> ws(socket);
  beast::error_code ec;
  ws.accept(req, ec);
  if (ec) return;
  ws.text(true);
  beast::flat_buffer buf;
  for (;;) {
    ws.read(buf, ec);
    if (ec) return;
    const std::string msg = beast::buffers_to_string(buf.data());
    buf.consume(buf.size());
    HttpResponse r = svc.stream_message(session_id, msg);
    if (r.status != 200) {
      r.body["status"] = r.status;
    }
    ws.write(asio::buffer(r.body.dump()), ec);
    if (ec) return;
  }
}

http::response<http::string_body> static_file(const std::string& root, const std::string& target, unsigned version,
                                              bool& found) {
  namespace fs = std::filesystem;
  found = false;
  http::response<http::string_body> res{http::status::not_found, version};
  std::string rel = target.substr(0, target.find('?'));
  if (rel.empty() || rel == "/") rel = "/index.html";
  if (rel.find("..") != std::string::npos) return res;
  const fs::path p = fs::path(root) / rel.substr(1);
  std::ifstream is(p, std::ios::binary);
  if (!is) return res;
  std::ostringstream os;
  os << is.rdbuf();
  res.result(http::status::ok);
  res.set(http::field::content_type, content_type(p));
  res.body() = os.str();
  found = true;
  return res;
}

void serve_connection(Service& svc, const std::string& static_dir, tcp::socket& socket) {
  beast::flat_buffer buf;
  beast::error_code ec;
  for (;;) {
    http::request<http::string_body> req;
    http::read(socket, buf, req, ec);
    if (ec) break;
    const std::string target(req.target());
    if (websocket::is_upgrade(req)) {
      const auto parts = path_parts(target);
      if (parts.size() == 4 && parts[0] == "api" && parts[1] == "session" && parts[3] == "stream") {
        const HttpResponse probe = svc.handle("GET", "/api/session/" + parts[2], "");
        if (probe.status == 200) {
          serve_websocket(svc, socket, req, parts[2]);
          return;
        }
      }
      http::response<http::string_body> res{http::status::not_found, req.version()};
      res.body() = R"({"error":"unknown stream"})";
      res.prepare_payload();
      http::write(socket, res, ec);
      break;
    }
    http::response<http::string_body> res;
    const bool api = target.rfind("/api", 0) == 0;
    bool found = false;
    if (!api && !static_dir.empty() && req.method() == http::verb::get) {
      res = static_file(static_dir, target, req.version(), found);
    }
    if (!found) {
      const HttpResponse r = svc.handle(std::string(req.method_string()), target, req.body());
      res = http::response<http::string_body>{static_cast<http::status>(r.status), req.version()};
      if (r.status != 204) {
        res.set(http::field::content_type, "application/json");
        res.body() = r.body.dump();
      }
    }
    add_cors(res);
    res.keep_alive(req.keep_alive());
    res.prepare_payload();
    http::write(socket, res, ec);
    if (ec || !res.keep_alive()) break;
  }
  socket.shutdown(tcp::socket::shutdown_send, ec);
}

}  // namespace

unsigned short Service::start() {
  if (running_) return port_;
  net_ = std::make_unique<Net>();
  try {
    const tcp::endpoint ep(asio::ip::make_address(config_.service.host),
                           static_cast<unsigned short>(config_.service.port));
    net_->acceptor.open(ep.protocol());
    net_->acceptor.set_option(asio::socket_base::reuse_address(true));
    net_->acceptor.bind(ep);
    net_->acceptor.listen();
  } catch (const boost::system::system_error& e) {
    throw IoError(std::string("service: cannot listen: ") + e.what());
  }
  port_ = net_->acceptor.local_endpoint().port();
  running_ = true;
  accept_thread_ = std::thread([this] { accept_loop(); });
  return port_;
}

void Service::accept_loop() {
  while (running_) {
    auto socket = std::make_shared<tcp::socket>(net_->ioc);
    beast::error_code ec;
    net_->acceptor.accept(*socket, ec);
    if (!running_) break;
    if (ec) continue;
    std::lock_guard lk(conn_mu_);
    // Reap finished connections.
    for (auto it = connections_.begin(); it != connections_.end();) {
      if ((*it)->done->load()) {
        (*it)->thread.join();
        it = connections_.erase(it);
      } else {
        ++it;
      }
    }
    auto c = std::make_unique<Connection>();
    c->socket = socket;
    c->done = std::make_shared<std::atomic<bool>>(false);
    c->thread = std::thread([this, socket, done = c->done] {
      try {
        serve_connection(*this, config_.service.static_dir, *socket);
      } catch (const std::exception& e) {
        std::clog << "service: connection error: " << e.what() << '\n';
      }
      done->store(true);
    });
    connections_.push_back(std::move(c));
  }
}

void Service::stop() {
  if (!running_.exchange(false)) return;
  // Wake the blocking accept with a throwaway connection.
  try {
    asio::io_context ioc;
    tcp::socket s(ioc);
    beast::error_code ec;
    s.connect(tcp::endpoint(net_->acceptor.local_endpoint().address(), port_), ec);
  } catch (...) {
  }
  if (accept_thread_.joinable()) accept_thread_.join();
  beast::error_code ec;
  net_->acceptor.close(ec);
  std::lock_guard lk(conn_mu_);
  for (auto& c : connections_) c->socket->shutdown(tcp::socket::shutdown_both, ec);
  for (auto& c : connections_) c->thread.join();
  connections_.clear();
}

void Service::serve_forever() {
  const unsigned short port = start();
  std::clog << "listening on http://" << config_.service.host << ":" << port << '\n';
  while (running_) std::this_thread::sleep_for(std::chrono::milliseconds(200));
}

json api_schema() {
  const json pose = {{"type", "array"},
                     {"description", "camera-to-world 4x4 matrix, row-major; camera x right, y down, z forward"},
                     {"minItems", 4},
                     {"maxItems", 4},
                     {"items", {{"type", "array"}, {"minItems", 4}, {"maxItems", 4}, {"items", {{"type", "number"}}}}}};
  const json config = {
      {"type", "object"},
      {"additionalProperties", false},
      {"properties",
       {{"seed", {{"type", "integer"}, {"minimum", 0}}},
        {"engine",
         {{"type", "object"},
          {"additionalProperties", false},
          {"properties",
           {{"window_k", {{"type", {"integer", "null"}}, {"minimum", 1}}},
            {"cache_capacity", {{"type", {"integer", "null"}}, {"minimum", 1}}},
            {"schedule", {{"enum", {"cosine", "linear"}}}},
            {"sampler",
             {{"type", "object"},
              {"properties",
               {{"num_steps", {{"type", "integer"}}},
                {"eta", {{"type", "number"}}},
                {"seed", {{"type", "integer"}}},
                {"clip_denoised", {{"type", "boolean"}}}}}}},
            {"augmentation",
             {{"type", "object"},
              {"properties",
               {{"context_noise_level", {{"type", "integer"}}},
                {"enabled", {{"type", "boolean"}}},
                {"augment_inputs", {{"type", "boolean"}}}}}}},
            {"distance",
             {{"type", "object"},
              {"properties",
               {{"rotation_weight", {{"type", "number"}}}, {"translation_scale", {{"type", "number"}}}}}}}}}}}}}};
  const json diagnostics = {{"type", "object"},
                            {"properties",
                             {{"frame_id", {{"type", "integer"}}},
                              {"window", {{"type", "array"}, {"items", {{"type", "integer"}}}}},
                              {"wall_ms", {{"type", "number"}}},
                              {"latency_ms", {{"type", "number"}}},
                              {"steps", {{"type", "integer"}}},
                              {"framewise_flops", {{"type", "integer"}}}}}};
  return {{"version", 1}, {"pose", pose}, {"config", config}, {"diagnostics", diagnostics}};
}

}  // namespace causnvs
