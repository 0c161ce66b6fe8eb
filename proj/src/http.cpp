#include "octet/service.hpp"

#include <httplib.h>

namespace octet::service {

struct HttpServer::Impl {
  Service& service;
  httplib::Server server;

  explicit Impl(Service& s) : service(s) {}
};

namespace {

void send_json(httplib::Response& res, const nlohmann::json& j, int status = 200) {
  res.status = status;
  res.set_content(j.dump(), "application/json");
}

template <typename Fn>
httplib::Server::Handler guarded(Fn fn) {
  return [fn](const httplib::Request& req, httplib::Response& res) {
    try {
      fn(req, res);
    } catch (const ServiceError& e) {
      send_json(res, {{"error", e.what()}}, e.status);
    } catch (const nlohmann::json::exception& e) {
      send_json(res, {{"error", std::string("malformed JSON: ") + e.what()}}, 400);
    } catch (const std::exception& e) {
      send_json(res, {{"error", e.what()}}, 500);
    }
  };
}

nlohmann::json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return nlohmann::json::object();
  return nlohmann::json::parse(req.body);
}

std::string content_type_for(const std::string& kind) {
  if (kind == "png") return "image/png";
  if (kind == "json") return "application/json";
  return "application/octet-stream";
}

}  // namespace

HttpServer::HttpServer(Service& service) : impl_(std::make_unique<Impl>(service)) {
  auto& svr = impl_->server;
  auto& s = impl_->service;

  svr.Get("/health", guarded([&s](const httplib::Request&, httplib::Response& res) { send_json(res, s.health()); }));

  svr.Post("/sessions", guarded([&s](const httplib::Request& req, httplib::Response& res) {
             if (req.get_header_value("Content-Type") == "image/png") {
               nlohmann::json opts = nlohmann::json::object();
               if (req.has_param("steps")) opts["steps"] = std::stoll(req.get_param_value("steps"));
               std::vector<uint8_t> png(req.body.begin(), req.body.end());
               send_json(res, s.create_session_from_png(png, opts), 202);
             } else {
               send_json(res, s.create_session(parse_body(req)), 202);
             }
           }));

  svr.Get(R"(/sessions/([A-Za-z0-9]+))", guarded([&s](const httplib::Request& req, httplib::Response& res) {
            send_json(res, s.session(req.matches[1]));
          }));

  svr.Post(R"(/sessions/([A-Za-z0-9]+)/cf)", guarded([&s](const httplib::Request& req, httplib::Response& res) {
             send_json(res, s.submit_cf(req.matches[1], parse_body(req)), 202);
           }));

  svr.Get(R"(/jobs/([A-Za-z0-9]+))", guarded([&s](const httplib::Request& req, httplib::Response& res) {
            send_json(res, s.job(req.matches[1]));
          }));

  svr.Get(R"(/blobs/([A-Za-z0-9]+))", guarded([&s](const httplib::Request& req, httplib::Response& res) {
            send_json(res, s.blobs(req.matches[1]));
          }));

  svr.Get(R"(/artifacts/([0-9a-f]{64}))", guarded([&s](const httplib::Request& req, httplib::Response& res) {
            const std::string hash = req.matches[1];
            auto kind = s.store().kind(hash);
            auto bytes = s.store().get(hash);
            if (!kind || !bytes) throw ServiceError(404, "artifact " + hash + " not found");
            res.set_content(std::string(bytes->begin(), bytes->end()), content_type_for(*kind));
          }));

  svr.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) send_json(res, {{"error", "not found"}}, res.status);
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  auto& svr = impl_->server;
  if (port == 0) return svr.bind_to_any_port(host);
  if (!svr.bind_to_port(host, port)) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void HttpServer::run() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
  if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

}  // namespace octet::service
