#pragma once

#include <atomic>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "octet/cf.hpp"
#include "octet/inversion.hpp"

struct sqlite3;

namespace octet::service {

/// Error carrying an HTTP-style status (400 validation, 404 unknown id,
/// 409 missing checkpoints).
struct ServiceError : std::runtime_error {
  ServiceError(int status_, const std::string& msg) : std::runtime_error(msg), status(status_) {}
  int status;
};

std::string sha256_hex(const std::vector<uint8_t>& bytes);

/// Content-addressed files under root/artifacts with a sqlite index.
class ArtifactStore {
 public:
  explicit ArtifactStore(const std::filesystem::path& root);
  ~ArtifactStore();
  ArtifactStore(const ArtifactStore&) = delete;
  ArtifactStore& operator=(const ArtifactStore&) = delete;

  /// Stores bytes and returns their SHA-256; storing identical bytes twice is a no-op.
  std::string put(const std::vector<uint8_t>& bytes, const std::string& kind);
  std::string put_json(const nlohmann::json& j, const std::string& kind);
  std::optional<std::vector<uint8_t>> get(const std::string& hash) const;
  std::optional<std::string> kind(const std::string& hash) const;
  nlohmann::json get_json(const std::string& hash) const;
  bool contains(const std::string& hash) const;
  std::filesystem::path path(const std::string& hash) const;

  /// Key/value records (sessions, jobs) kept in the same database.
  void put_record(const std::string& table, const std::string& id, const nlohmann::json& j);
  std::vector<nlohmann::json> records(const std::string& table) const;

 private:
  std::filesystem::path root_;
  sqlite3* db_ = nullptr;
  mutable std::mutex mu_;
};

/// Checkpoint paths; any may be left empty.
struct ModelPaths {
  std::filesystem::path generator, encoder, classifier, reference, segmenter;

  nlohmann::json to_json() const;
  static ModelPaths from_json(const nlohmann::json& j, const std::filesystem::path& base = {});
};

/// Loaded once, shared read-only (all parameters frozen).
struct ModelBundle {
  blob::Generator generator{nullptr};
  inversion::Encoder encoder{nullptr};
  models::Classifier classifier{nullptr};
  models::ReferenceNet reference{nullptr};
  models::Segmenter segmenter{nullptr};

  static ModelBundle load(const ModelPaths& paths);
  /// Throws ServiceError(409) naming the first missing model.
  void require(bool need_encoder, bool need_segmenter = false) const;
};

/// Per-blob ellipse outline at the half-opacity level, in pixel coordinates.
struct Overlay {
  int64_t blob;
  double cx, cy;    // pixels
  double rx, ry;    // semi-axes along the blob's local x and y, pixels
  double angle;     // radians, local x axis direction in image coords (y down)

  nlohmann::json to_json() const;
  bool contains(double x, double y) const;
};

std::vector<Overlay> overlays(const blob::BlobLatent& z, int64_t height, int64_t width);
/// Topmost (highest index) overlay containing the pixel, if any.
std::optional<int64_t> blob_at(const std::vector<Overlay>& overlays, double x, double y);

enum class JobState { queued, running, done, failed };
std::string to_string(JobState s);

struct Job {
  std::string id;
  std::string kind;  // invert, counterfactual, sweep, semantics
  std::string session;
  JobState state = JobState::queued;
  double progress = 0.0;
  nlohmann::json result;  // set when done
  std::string diagnostic;  // set when failed
  nlohmann::json request;

  nlohmann::json to_json() const;
};

struct ServiceConfig {
  std::filesystem::path workspace;
  ModelPaths models;
  inversion::InversionConfig inversion;
  cf::OptimizerConfig cf_optimizer;
  int workers = 2;
};

/// Sessions, jobs and artifacts. Jobs on the same session run one at a
/// time in submission order; jobs on different sessions may overlap.
class Service {
 public:
  explicit Service(ServiceConfig cfg);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// body: {"seed": n} or {"image_png": <bytes as base64>}; optional
  /// "steps" (inversion steps) and "init": "true_latent" (seed queries only).
  /// Returns {"session": id, "job": id}.
  nlohmann::json create_session(const nlohmann::json& body);
  nlohmann::json create_session_from_png(const std::vector<uint8_t>& png, const nlohmann::json& options);
  nlohmann::json session(const std::string& id) const;
  nlohmann::json blobs(const std::string& session_id) const;
  /// Validates and queues a counterfactual; returns the job record.
  nlohmann::json submit_cf(const std::string& session_id, const nlohmann::json& body);
  nlohmann::json job(const std::string& id) const;
  nlohmann::json health() const;

  /// Blocks until the job leaves queued/running or the timeout passes.
  nlohmann::json wait(const std::string& job_id, double timeout_seconds);

  /// Regenerates the stored CF image from its stored latent and checks the
  /// tensor hash and the success flag.
  bool verify_cf_record(const nlohmann::json& record) const;

  ArtifactStore& store() { return *store_; }
  const ModelBundle& models() const { return models_; }

 private:
  struct SessionData;

  nlohmann::json enqueue(const std::string& kind, const std::string& session, const nlohmann::json& request,
                         std::function<nlohmann::json(Job&)> work);
  void worker_loop();
  void persist_job(const Job& j);
  void persist_session(const SessionData& s);
  nlohmann::json session_json(const SessionData& s) const;
  nlohmann::json run_inversion(const std::string& session_id, const torch::Tensor& image,
                               std::optional<blob::BlobLatent> init, int64_t steps);
  nlohmann::json run_cf(const std::string& session_id, const cf::CFRequest& request, const std::string& job_id);
  std::string new_id();

  ServiceConfig cfg_;
  std::unique_ptr<ArtifactStore> store_;
  ModelBundle models_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  std::map<std::string, std::shared_ptr<SessionData>> sessions_;
  std::map<std::string, std::shared_ptr<Job>> jobs_;
  std::map<std::string, std::function<nlohmann::json(Job&)>> work_;
  std::deque<std::string> queue_;
  std::map<std::string, bool> session_busy_;
  bool stopping_ = false;
  std::vector<std::thread> workers_;
  std::atomic<uint64_t> counter_{0};
};

/// Parses a CF request body against the session latent. Throws
/// ServiceError(400) on invalid input.
cf::CFRequest parse_cf_request(const nlohmann::json& body, const blob::BlobLatent& zq,
                               const cf::OptimizerConfig& defaults);

/// Serves the HTTP API until stop() or a signal; returns when stopped.
class HttpServer {
 public:
  explicit HttpServer(Service& service);
  ~HttpServer();
  /// Binds host:port (port 0 picks a free port) and returns the bound port.
  int bind(const std::string& host, int port);
  void run();  // blocking
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

std::string base64_encode(const std::vector<uint8_t>& bytes);
std::vector<uint8_t> base64_decode(const std::string& text);

}  // namespace octet::service
