#include "octet/service.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <random>
#include <sstream>

#include <openssl/evp.h>
#include <sqlite3.h>

#include "octet/checkpoint.hpp"
#include "octet/image.hpp"

namespace octet::service {

namespace {

std::string now_iso() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::vector<uint8_t> to_bytes(const std::string& s) { return {s.begin(), s.end()}; }

std::vector<uint8_t> tensor_bytes(const torch::Tensor& t) {
  TensorArchive a;
  a.meta = {{"kind", "tensor"}};
  a.put("value", t.detach().contiguous());
  return serialize(a);
}

nlohmann::json decision_json(models::Classifier& m, const torch::Tensor& image) {
  torch::NoGradGuard no_grad;
  auto p = models::predict(m, image).to(torch::kFloat64);
  nlohmann::json j;
  for (int h = 0; h < models::kNumHeads; ++h)
    j[scene::kHeadNames[h]] = {{"probability", p[0][h].item<double>()}, {"decision", p[0][h].item<double>() > 0.5}};
  return j;
}

void check_sqlite(int rc, sqlite3* db, const char* what) {
  if (rc != SQLITE_OK && rc != SQLITE_DONE && rc != SQLITE_ROW)
    throw std::runtime_error(std::string("sqlite ") + what + ": " + sqlite3_errmsg(db));
}

}  // namespace

std::string sha256_hex(const std::vector<uint8_t>& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

std::string base64_encode(const std::vector<uint8_t>& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3) + 1, '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<size_t>(n));
  return out;
}

std::vector<uint8_t> base64_decode(const std::string& text) {
  std::string clean;
  for (char c : text)
    if (!std::isspace(static_cast<unsigned char>(c))) clean += c;
  if (clean.size() % 4 != 0) throw ServiceError(400, "invalid base64 length");
  std::vector<uint8_t> out(clean.size() / 4 * 3 + 1);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(clean.data()), static_cast<int>(clean.size()));
  if (n < 0) throw ServiceError(400, "invalid base64 data");
  size_t pad = 0;
  if (!clean.empty() && clean.back() == '=') ++pad;
  if (clean.size() > 1 && clean[clean.size() - 2] == '=') ++pad;
  out.resize(static_cast<size_t>(n) - pad);
  return out;
}

// ---- artifact store -------------------------------------------------------

ArtifactStore::ArtifactStore(const std::filesystem::path& root) : root_(root) {
  std::filesystem::create_directories(root_ / "artifacts");
  const auto db_path = (root_ / "index.sqlite").string();
  if (sqlite3_open_v2(db_path.c_str(), &db_, SQLITE_OPEN_READWRITE | SQLITE_OPEN_CREATE | SQLITE_OPEN_FULLMUTEX,
                      nullptr) != SQLITE_OK) {
    std::string msg = db_ ? sqlite3_errmsg(db_) : "out of memory";
    sqlite3_close(db_);
    throw std::runtime_error("cannot open " + db_path + ": " + msg);
  }
  const char* schema =
      "CREATE TABLE IF NOT EXISTS artifacts (hash TEXT PRIMARY KEY, kind TEXT NOT NULL, size INTEGER NOT NULL,"
      " created TEXT NOT NULL);"
      "CREATE TABLE IF NOT EXISTS records (tbl TEXT NOT NULL, id TEXT NOT NULL, body TEXT NOT NULL,"
      " seq INTEGER NOT NULL, PRIMARY KEY (tbl, id));";
  char* err = nullptr;
  if (sqlite3_exec(db_, schema, nullptr, nullptr, &err) != SQLITE_OK) {
    std::string msg = err ? err : "unknown";
    sqlite3_free(err);
    throw std::runtime_error("artifact index schema: " + msg);
  }
}

ArtifactStore::~ArtifactStore() { sqlite3_close(db_); }

std::filesystem::path ArtifactStore::path(const std::string& hash) const {
  return root_ / "artifacts" / hash.substr(0, 2) / hash;
}

std::string ArtifactStore::put(const std::vector<uint8_t>& bytes, const std::string& kind) {
  const auto hash = sha256_hex(bytes);
  std::lock_guard lock(mu_);
  const auto p = path(hash);
  if (!std::filesystem::exists(p)) {
    std::filesystem::create_directories(p.parent_path());
    auto tmp = p;
    tmp += ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
    write_file(tmp, bytes);
    std::filesystem::rename(tmp, p);
  }
  sqlite3_stmt* st = nullptr;
  check_sqlite(sqlite3_prepare_v2(db_, "INSERT OR IGNORE INTO artifacts VALUES (?, ?, ?, ?)", -1, &st, nullptr), db_,
               "prepare");
  const auto created = now_iso();
  sqlite3_bind_text(st, 1, hash.c_str(), -1, SQLITE_TRANSIENT);
  sqlite3_bind_text(st, 2, kind.c_str(), -1, SQLITE_TRANSIENT);
  sqlite3_bind_int64(st, 3, static_cast<sqlite3_int64>(bytes.size()));
  sqlite3_bind_text(st, 4, created.c_str(), -1, SQLITE_TRANSIENT);
  const int rc = sqlite3_step(st);
  sqlite3_finalize(st);
  check_sqlite(rc, db_, "insert artifact");
  return hash;
}

std::string ArtifactStore::put_json(const nlohmann::json& j, const std::string& kind) {
  return put(to_bytes(j.dump()), kind);
}

std::optional<std::string> ArtifactStore::kind(const std::string& hash) const {
  std::lock_guard lock(mu_);
  sqlite3_stmt* st = nullptr;
  check_sqlite(sqlite3_prepare_v2(db_, "SELECT kind FROM artifacts WHERE hash = ?", -1, &st, nullptr), db_, "prepare");
  sqlite3_bind_text(st, 1, hash.c_str(), -1, SQLITE_TRANSIENT);
  std::optional<std::string> out;
  if (sqlite3_step(st) == SQLITE_ROW) out = reinterpret_cast<const char*>(sqlite3_column_text(st, 0));
  sqlite3_finalize(st);
  return out;
}

bool ArtifactStore::contains(const std::string& hash) const { return kind(hash).has_value(); }

std::optional<std::vector<uint8_t>> ArtifactStore::get(const std::string& hash) const {
  if (!contains(hash)) return std::nullopt;
  return read_file(path(hash));
}

nlohmann::json ArtifactStore::get_json(const std::string& hash) const {
  auto b = get(hash);
  if (!b) throw ServiceError(404, "artifact " + hash + " not found");
  return nlohmann::json::parse(b->begin(), b->end());
}

void ArtifactStore::put_record(const std::string& table, const std::string& id, const nlohmann::json& j) {
  std::lock_guard lock(mu_);
  sqlite3_stmt* st = nullptr;
  check_sqlite(sqlite3_prepare_v2(db_,
                                  "INSERT INTO records VALUES (?1, ?2, ?3, (SELECT COALESCE(MAX(seq), 0) + 1 FROM records))"
                                  " ON CONFLICT (tbl, id) DO UPDATE SET body = excluded.body",
                                  -1, &st, nullptr),
               db_, "prepare");
  const auto body = j.dump();
  sqlite3_bind_text(st, 1, table.c_str(), -1, SQLITE_TRANSIENT);
  sqlite3_bind_text(st, 2, id.c_str(), -1, SQLITE_TRANSIENT);
  sqlite3_bind_text(st, 3, body.c_str(), -1, SQLITE_TRANSIENT);
  const int rc = sqlite3_step(st);
  sqlite3_finalize(st);
  check_sqlite(rc, db_, "upsert record");
}

std::vector<nlohmann::json> ArtifactStore::records(const std::string& table) const {
  std::lock_guard lock(mu_);
  sqlite3_stmt* st = nullptr;
  check_sqlite(sqlite3_prepare_v2(db_, "SELECT body FROM records WHERE tbl = ? ORDER BY seq", -1, &st, nullptr), db_,
               "prepare");
  sqlite3_bind_text(st, 1, table.c_str(), -1, SQLITE_TRANSIENT);
  std::vector<nlohmann::json> out;
  while (sqlite3_step(st) == SQLITE_ROW)
    out.push_back(nlohmann::json::parse(reinterpret_cast<const char*>(sqlite3_column_text(st, 0))));
  sqlite3_finalize(st);
  return out;
}

// ---- models ---------------------------------------------------------------

nlohmann::json ModelPaths::to_json() const {
  return {{"generator", generator.string()},   {"encoder", encoder.string()},
          {"classifier", classifier.string()}, {"reference", reference.string()},
          {"segmenter", segmenter.string()}};
}

ModelPaths ModelPaths::from_json(const nlohmann::json& j, const std::filesystem::path& base) {
  auto get = [&](const char* key) -> std::filesystem::path {
    std::string v = j.value(key, "");
    if (v.empty()) return {};
    std::filesystem::path p(v);
    return p.is_relative() && !base.empty() ? base / p : p;
  };
  return {get("generator"), get("encoder"), get("classifier"), get("reference"), get("segmenter")};
}

namespace {

template <typename M>
void freeze(M& m) {
  for (auto& p : m->parameters()) p.set_requires_grad(false);
  m->eval();
}

}  // namespace

ModelBundle ModelBundle::load(const ModelPaths& paths) {
  ModelBundle b;
  auto present = [](const std::filesystem::path& p) { return !p.empty() && std::filesystem::exists(p); };
  if (present(paths.generator)) {
    b.generator = blob::load_generator(paths.generator);
    freeze(b.generator);
  }
  if (present(paths.encoder)) {
    b.encoder = inversion::load_encoder(paths.encoder);
    freeze(b.encoder);
  }
  if (present(paths.classifier)) {
    b.classifier = models::load_classifier(paths.classifier);
    freeze(b.classifier);
  }
  if (present(paths.reference)) {
    b.reference = models::load_reference(paths.reference);
    freeze(b.reference);
  }
  if (present(paths.segmenter)) {
    b.segmenter = models::load_segmenter(paths.segmenter);
    freeze(b.segmenter);
  }
  return b;
}

void ModelBundle::require(bool need_encoder, bool need_segmenter) const {
  if (!generator) throw ServiceError(409, "generator checkpoint not loaded");
  if (!classifier) throw ServiceError(409, "classifier checkpoint not loaded");
  if (!reference) throw ServiceError(409, "reference network checkpoint not loaded");
  if (need_encoder && !encoder) throw ServiceError(409, "encoder checkpoint not loaded");
  if (need_segmenter && !segmenter) throw ServiceError(409, "segmenter checkpoint not loaded");
}

// ---- overlays -------------------------------------------------------------

nlohmann::json Overlay::to_json() const {
  return {{"blob", blob}, {"cx", cx}, {"cy", cy}, {"rx", rx}, {"ry", ry}, {"angle", angle}};
}

bool Overlay::contains(double x, double y) const {
  const double dx = x - cx, dy = y - cy;
  const double c = std::cos(angle), s = std::sin(angle);
  const double xr = c * dx + s * dy, yr = -s * dx + c * dy;
  return (xr * xr) / (rx * rx) + (yr * yr) / (ry * ry) <= 1.0;
}

std::vector<Overlay> overlays(const blob::BlobLatent& z, int64_t height, int64_t width) {
  std::vector<Overlay> out;
  auto sp = z.spatial[0].to(torch::kFloat64).contiguous();
  for (int64_t k = 0; k < z.num_blobs(); ++k) {
    const double s = sp[k][blob::kScale].item<double>();
    if (s <= 0.0) continue;
    const double a = std::max(sp[k][blob::kAspect].item<double>(), blob::kMinAspect);
    // half opacity where d = s; d is measured in image-height units
    out.push_back({k, sp[k][blob::kCx].item<double>() * width, sp[k][blob::kCy].item<double>() * height,
                   s * std::sqrt(a) * height, s / std::sqrt(a) * height, sp[k][blob::kAngle].item<double>()});
  }
  return out;
}

std::optional<int64_t> blob_at(const std::vector<Overlay>& ov, double x, double y) {
  std::optional<int64_t> hit;
  for (const auto& o : ov)
    if (o.contains(x, y) && (!hit || o.blob > *hit)) hit = o.blob;
  return hit;
}

// ---- jobs -----------------------------------------------------------------

std::string to_string(JobState s) {
  switch (s) {
    case JobState::queued: return "queued";
    case JobState::running: return "running";
    case JobState::done: return "done";
    case JobState::failed: return "failed";
  }
  return "failed";
}

namespace {

JobState job_state_from_string(const std::string& s) {
  if (s == "queued") return JobState::queued;
  if (s == "running") return JobState::running;
  if (s == "done") return JobState::done;
  return JobState::failed;
}

}  // namespace

nlohmann::json Job::to_json() const {
  nlohmann::json j{{"id", id},       {"kind", kind},         {"session", session},
                   {"state", to_string(state)}, {"progress", progress}, {"request", request}};
  if (state == JobState::done) j["result"] = result;
  if (state == JobState::failed) j["diagnostic"] = diagnostic;
  return j;
}

// ---- CF request parsing ---------------------------------------------------

cf::CFRequest parse_cf_request(const nlohmann::json& body, const blob::BlobLatent& zq,
                               const cf::OptimizerConfig& defaults) {
  if (!body.is_object()) throw ServiceError(400, "request body must be a JSON object");
  cf::CFRequest r;
  r.zq = zq;
  r.optimizer = defaults;
  const int64_t k = zq.num_blobs();
  try {
    r.lambda_dist = body.value("lambda", body.value("lambda_dist", r.lambda_dist));
    if (body.contains("mode")) r.mode = cf::mode_from_string(body.at("mode").get<std::string>());
    if (body.contains("selected")) r.selected = body.at("selected").get<std::vector<int64_t>>();
    if (body.contains("mask")) r.mask = cf::EditMask::from_json(body.at("mask"));
    r.optimizer.steps = body.value("steps", r.optimizer.steps);
    r.optimizer.lr = body.value("lr", r.optimizer.lr);
    r.optimizer.early_stop = body.value("early_stop", r.optimizer.early_stop);
    r.hold_other_heads = body.value("hold_other_heads", r.hold_other_heads);
    r.iou_threshold = body.value("iou_threshold", r.iou_threshold);
    r.activation_scale = body.value("activation_scale", r.activation_scale);
    if (body.contains("target_mask")) {
      auto rows = body.at("target_mask").get<std::vector<std::vector<int64_t>>>();
      std::vector<int64_t> flat;
      for (const auto& row : rows) {
        if (row.size() != rows.front().size()) throw ServiceError(400, "target_mask rows differ in length");
        for (auto v : row) {
          if (v < 0 || v >= scene::kNumSegClasses) throw ServiceError(400, "target_mask values must be in 0..3");
          flat.push_back(v);
        }
      }
      if (rows.empty()) throw ServiceError(400, "target_mask is empty");
      r.target = torch::tensor(flat, torch::kLong).view({static_cast<int64_t>(rows.size()), static_cast<int64_t>(rows[0].size())});
    } else if (body.contains("target")) {
      const auto& t = body.at("target");
      cf::ClassTarget ct{t.at("head").get<std::string>(), t.at("value").get<bool>()};
      scene::head_index(ct.head);
      r.target = ct;
    } else {
      throw ServiceError(400, "request needs a target or a target_mask");
    }
  } catch (const ServiceError&) {
    throw;
  } catch (const std::exception& e) {
    throw ServiceError(400, std::string("invalid request: ") + e.what());
  }
  if (!(r.lambda_dist >= 0.0)) throw ServiceError(400, "lambda must be >= 0");
  if (r.optimizer.steps < 0) throw ServiceError(400, "steps must be >= 0");
  if (!(r.optimizer.lr > 0.0)) throw ServiceError(400, "lr must be > 0");
  if (r.mode == cf::Mode::targeted && r.selected.empty()) throw ServiceError(400, "targeted mode needs a non-empty blob set");
  for (auto s : r.selected)
    if (s < 0 || s >= k) throw ServiceError(400, "selected blob " + std::to_string(s) + " out of range");
  if (r.mask.num_blobs() != 0) {
    try {
      r.mask.validate(k);
    } catch (const std::exception& e) {
      throw ServiceError(400, e.what());
    }
  }
  return r;
}

// ---- service --------------------------------------------------------------

struct Service::SessionData {
  std::string id;
  std::string created;
  std::string state = "inverting";  // inverting, ready, failed
  nlohmann::json query;
  nlohmann::json inversion;
  nlohmann::json decisions;
  nlohmann::json history = nlohmann::json::array();
  std::optional<blob::BlobLatent> z;
};

Service::Service(ServiceConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.workspace.empty()) throw std::invalid_argument("service: workspace not set");
  store_ = std::make_unique<ArtifactStore>(cfg_.workspace / "store");
  models_ = ModelBundle::load(cfg_.models);

  for (const auto& rec : store_->records("sessions")) {
    auto s = std::make_shared<SessionData>();
    s->id = rec.at("id");
    s->created = rec.value("created", "");
    s->state = rec.value("state", "failed");
    s->query = rec.value("query", nlohmann::json::object());
    s->inversion = rec.value("inversion", nlohmann::json::object());
    s->decisions = rec.value("decisions", nlohmann::json::object());
    s->history = rec.value("history", nlohmann::json::array());
    if (s->state == "ready" && s->inversion.contains("latent")) {
      auto bytes = store_->get(s->inversion.at("latent"));
      if (bytes) s->z = inversion::latent_from_archive(deserialize(*bytes));
    }
    if (s->state == "inverting") s->state = "failed";
    sessions_[s->id] = s;
  }
  for (const auto& rec : store_->records("jobs")) {
    auto j = std::make_shared<Job>();
    j->id = rec.at("id");
    j->kind = rec.value("kind", "");
    j->session = rec.value("session", "");
    j->state = job_state_from_string(rec.value("state", "failed"));
    j->progress = rec.value("progress", 0.0);
    j->request = rec.value("request", nlohmann::json::object());
    j->result = rec.value("result", nlohmann::json());
    j->diagnostic = rec.value("diagnostic", "");
    if (j->state == JobState::queued || j->state == JobState::running) {
      j->state = JobState::failed;
      j->diagnostic = "interrupted by a service restart";
      persist_job(*j);
    }
    jobs_[j->id] = j;
  }
  for (int i = 0; i < std::max(1, cfg_.workers); ++i) workers_.emplace_back([this] { worker_loop(); });
}

Service::~Service() {
  {
    std::lock_guard lock(mu_);
    stopping_ = true;
  }
  cv_.notify_all();
  for (auto& t : workers_) t.join();
}

std::string Service::new_id() {
  static thread_local std::mt19937_64 rng(std::random_device{}());
  std::ostringstream s;
  s << std::hex << rng() << std::hex << (++counter_);
  return s.str();
}

void Service::persist_job(const Job& j) { store_->put_record("jobs", j.id, j.to_json()); }

nlohmann::json Service::session_json(const SessionData& s) const {
  nlohmann::json j{{"id", s.id},           {"created", s.created},     {"state", s.state},
                   {"query", s.query},     {"inversion", s.inversion}, {"decisions", s.decisions},
                   {"history", s.history}};
  if (s.z) j["active_blobs"] = static_cast<int64_t>(overlays(*s.z, 1, 1).size());
  return j;
}

void Service::persist_session(const SessionData& s) { store_->put_record("sessions", s.id, session_json(s)); }

nlohmann::json Service::enqueue(const std::string& kind, const std::string& session, const nlohmann::json& request,
                                std::function<nlohmann::json(Job&)> work) {
  auto j = std::make_shared<Job>();
  j->id = new_id();
  j->kind = kind;
  j->session = session;
  j->request = request;
  nlohmann::json out;
  {
    std::lock_guard lock(mu_);
    jobs_[j->id] = j;
    work_[j->id] = std::move(work);
    queue_.push_back(j->id);
    out = j->to_json();
    persist_job(*j);
  }
  cv_.notify_all();
  return out;
}

void Service::worker_loop() {
  for (;;) {
    std::shared_ptr<Job> job;
    std::function<nlohmann::json(Job&)> work;
    {
      std::unique_lock lock(mu_);
      for (;;) {
        if (stopping_) return;
        auto it = std::find_if(queue_.begin(), queue_.end(), [&](const std::string& id) {
          return !session_busy_[jobs_.at(id)->session];
        });
        if (it != queue_.end()) {
          job = jobs_.at(*it);
          work = std::move(work_.at(*it));
          work_.erase(*it);
          queue_.erase(it);
          break;
        }
        cv_.wait(lock);
      }
      session_busy_[job->session] = true;
      job->state = JobState::running;
      job->progress = 0.0;
      persist_job(*job);
    }
    nlohmann::json result;
    std::string diagnostic;
    bool ok = true;
    try {
      result = work(*job);
    } catch (const std::exception& e) {
      ok = false;
      diagnostic = e.what();
    }
    {
      std::lock_guard lock(mu_);
      if (ok) {
        job->state = JobState::done;
        job->result = result;
        job->progress = 1.0;
      } else {
        job->state = JobState::failed;
        job->diagnostic = diagnostic.empty() ? "unknown error" : diagnostic;
        if (job->kind == "invert") {
          auto s = sessions_.find(job->session);
          if (s != sessions_.end()) {
            s->second->state = "failed";
            persist_session(*s->second);
          }
        }
      }
      session_busy_[job->session] = false;
      persist_job(*job);
    }
    cv_.notify_all();
    done_cv_.notify_all();
  }
}

nlohmann::json Service::create_session(const nlohmann::json& body) {
  if (!body.is_object()) throw ServiceError(400, "request body must be a JSON object");
  if (body.contains("image_png")) {
    std::vector<uint8_t> png;
    try {
      png = base64_decode(body.at("image_png").get<std::string>());
    } catch (const nlohmann::json::exception&) {
      throw ServiceError(400, "image_png must be a base64 string");
    }
    return create_session_from_png(png, body);
  }
  if (!body.contains("seed")) throw ServiceError(400, "request needs a seed or an image_png");
  uint64_t seed = 0;
  int64_t steps = cfg_.inversion.steps;
  bool true_init = false;
  try {
    seed = body.at("seed").get<uint64_t>();
    steps = body.value("steps", steps);
    true_init = body.value("init", std::string("encoder")) == "true_latent";
  } catch (const nlohmann::json::exception& e) {
    throw ServiceError(400, std::string("invalid session request: ") + e.what());
  }
  if (steps < 0) throw ServiceError(400, "steps must be >= 0");
  models_.require(!true_init);

  auto& g = models_.generator;
  blob::BlobLatent z_true;
  torch::Tensor image;
  {
    torch::NoGradGuard no_grad;
    auto gen = at::detail::createCPUGenerator(seed);
    auto noise = torch::randn({1, g->cfg.noise_dim}, gen);
    z_true = g->sample_layout(noise).z;
    image = g->generate(z_true);
  }
  auto s = std::make_shared<SessionData>();
  s->id = new_id();
  s->created = now_iso();
  s->query = {{"kind", "seed"},
              {"seed", seed},
              {"image_png", store_->put(encode_png(from_tensor(image[0])), "png")},
              {"image_tensor", store_->put(tensor_bytes(image), "tensor")},
              {"true_latent", store_->put(serialize(inversion::latent_archive(z_true)), "latent")}};
  s->decisions["query"] = decision_json(models_.classifier, image);
  {
    std::lock_guard lock(mu_);
    sessions_[s->id] = s;
    persist_session(*s);
  }
  std::optional<blob::BlobLatent> init;
  if (true_init) init = z_true;
  const auto id = s->id;
  auto job = enqueue("invert", id, {{"seed", seed}, {"steps", steps}, {"init", true_init ? "true_latent" : "encoder"}},
                     [this, id, image, init, steps](Job&) { return run_inversion(id, image, init, steps); });
  return {{"session", id}, {"job", job.at("id")}};
}

nlohmann::json Service::create_session_from_png(const std::vector<uint8_t>& png, const nlohmann::json& options) {
  int64_t steps = cfg_.inversion.steps;
  if (options.is_object()) steps = options.value("steps", steps);
  if (steps < 0) throw ServiceError(400, "steps must be >= 0");
  models_.require(true);
  Image img;
  try {
    img = decode_png(png);
  } catch (const std::exception& e) {
    throw ServiceError(400, std::string("bad image: ") + e.what());
  }
  const auto& gc = models_.generator->cfg;
  if (img.height != gc.height || img.width != gc.width)
    throw ServiceError(400, "bad image: expected " + std::to_string(gc.width) + "x" + std::to_string(gc.height) + " RGB");
  auto image = to_tensor(img).unsqueeze(0);
  auto s = std::make_shared<SessionData>();
  s->id = new_id();
  s->created = now_iso();
  s->query = {{"kind", "image"},
              {"image_png", store_->put(png, "png")},
              {"image_tensor", store_->put(tensor_bytes(image), "tensor")}};
  s->decisions["query"] = decision_json(models_.classifier, image);
  {
    std::lock_guard lock(mu_);
    sessions_[s->id] = s;
    persist_session(*s);
  }
  const auto id = s->id;
  auto job = enqueue("invert", id, {{"steps", steps}, {"init", "encoder"}},
                     [this, id, image, steps](Job&) { return run_inversion(id, image, std::nullopt, steps); });
  return {{"session", id}, {"job", job.at("id")}};
}

nlohmann::json Service::run_inversion(const std::string& session_id, const torch::Tensor& image,
                                      std::optional<blob::BlobLatent> init, int64_t steps) {
  auto cfg = cfg_.inversion;
  cfg.steps = steps;
  inversion::Encoder enc = models_.encoder;
  auto res = inversion::invert(image, enc, models_.generator, models_.classifier, models_.reference, cfg,
                               init ? std::optional<blob::BlobLatent>(*init) : std::nullopt)[0];
  nlohmann::json inv{{"latent", store_->put(serialize(inversion::latent_archive(res.z)), "latent")},
                     {"init_latent", store_->put(serialize(inversion::latent_archive(res.z_init)), "latent")},
                     {"reconstruction_png", store_->put(encode_png(from_tensor(res.reconstruction[0])), "png")},
                     {"reconstruction_tensor", store_->put(tensor_bytes(res.reconstruction), "tensor")},
                     {"trace", store_->put_json(res.trace_json(), "json")},
                     {"decision_preserved", res.decision_preserved},
                     {"steps", steps}};
  auto decisions = decision_json(models_.classifier, res.reconstruction);
  std::lock_guard lock(mu_);
  auto& s = *sessions_.at(session_id);
  s.z = res.z;
  s.inversion = inv;
  s.decisions["reconstruction"] = decisions;
  s.state = "ready";
  persist_session(s);
  return {{"session", session_id}, {"inversion", inv}};
}

nlohmann::json Service::session(const std::string& id) const {
  std::lock_guard lock(mu_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw ServiceError(404, "unknown session " + id);
  return session_json(*it->second);
}

nlohmann::json Service::blobs(const std::string& session_id) const {
  std::lock_guard lock(mu_);
  auto it = sessions_.find(session_id);
  if (it == sessions_.end()) throw ServiceError(404, "unknown session " + session_id);
  const auto& s = *it->second;
  if (!s.z) throw ServiceError(409, "session " + session_id + " has no latent yet");
  const auto& gc = models_.generator->cfg;
  nlohmann::json ov = nlohmann::json::array();
  std::vector<int64_t> active;
  for (const auto& o : overlays(*s.z, gc.height, gc.width)) {
    ov.push_back(o.to_json());
    active.push_back(o.blob);
  }
  std::vector<int64_t> inactive;
  for (int64_t k = 0; k < s.z->num_blobs(); ++k)
    if (std::find(active.begin(), active.end(), k) == active.end()) inactive.push_back(k);
  return {{"session", session_id}, {"height", gc.height}, {"width", gc.width}, {"num_blobs", s.z->num_blobs()},
          {"overlays", ov},        {"inactive", inactive}, {"z_order", "higher blob index is drawn on top"}};
}

nlohmann::json Service::submit_cf(const std::string& session_id, const nlohmann::json& body) {
  blob::BlobLatent zq;
  {
    std::lock_guard lock(mu_);
    auto it = sessions_.find(session_id);
    if (it == sessions_.end()) throw ServiceError(404, "unknown session " + session_id);
    if (!it->second->z) throw ServiceError(409, "session " + session_id + " is not ready (" + it->second->state + ")");
    zq = *it->second->z;
  }
  auto req = parse_cf_request(body, zq, cfg_.cf_optimizer);
  models_.require(false, std::holds_alternative<torch::Tensor>(req.target));
  if (std::holds_alternative<cf::ClassTarget>(req.target)) {
    const auto& t = std::get<cf::ClassTarget>(req.target);
    torch::NoGradGuard no_grad;
    auto dec = models::decisions(models_.classifier, models_.generator->generate(zq));
    if (dec[0][scene::head_index(t.head)].item<bool>() == t.value)
      throw ServiceError(400, "target " + t.head + "=" + (t.value ? "true" : "false") + " equals the current decision");
  } else {
    const auto& m = std::get<torch::Tensor>(req.target);
    const auto& gc = models_.generator->cfg;
    if (m.size(0) != gc.height || m.size(1) != gc.width)
      throw ServiceError(400, "target_mask must be " + std::to_string(gc.height) + "x" + std::to_string(gc.width));
  }
  auto request_json = req.to_json();
  return enqueue("counterfactual", session_id, request_json,
                 [this, session_id, req](Job& job) { return run_cf(session_id, req, job.id); });
}

nlohmann::json Service::run_cf(const std::string& session_id, const cf::CFRequest& request, const std::string& job_id) {
  cf::CFResult r;
  if (std::holds_alternative<cf::ClassTarget>(request.target)) {
    models::Classifier m = models_.classifier;
    blob::Generator g = models_.generator;
    r = cf::counterfactual(request, g, m);
  } else {
    models::Segmenter sg = models_.segmenter;
    blob::Generator g = models_.generator;
    r = cf::segmentation_counterfactual(request, g, sg);
  }
  nlohmann::json rec{{"job", job_id},
                     {"request", request.to_json()},
                     {"success", r.success},
                     {"latent", store_->put(serialize(inversion::latent_archive(r.z_cf)), "latent")},
                     {"image_png", store_->put(encode_png(from_tensor(r.image[0])), "png")},
                     {"image_tensor", store_->put(tensor_bytes(r.image), "tensor")},
                     {"change_report", r.change_report()},
                     {"trace", store_->put_json(r.trace_json(), "json")},
                     {"final_metric", r.final_metric}};
  if (std::holds_alternative<cf::ClassTarget>(request.target)) {
    const auto& t = std::get<cf::ClassTarget>(request.target);
    rec["target"] = {{"head", t.head}, {"value", t.value}};
    models::Classifier m = models_.classifier;
    rec["decisions"] = decision_json(m, r.image);
  } else {
    rec["target"] = "segmentation";
  }
  std::lock_guard lock(mu_);
  auto& s = *sessions_.at(session_id);
  s.history.push_back(rec);
  persist_session(s);
  return rec;
}

nlohmann::json Service::job(const std::string& id) const {
  std::lock_guard lock(mu_);
  auto it = jobs_.find(id);
  if (it == jobs_.end()) throw ServiceError(404, "unknown job " + id);
  return it->second->to_json();
}

nlohmann::json Service::wait(const std::string& job_id, double timeout_seconds) {
  std::unique_lock lock(mu_);
  auto it = jobs_.find(job_id);
  if (it == jobs_.end()) throw ServiceError(404, "unknown job " + job_id);
  auto job = it->second;
  done_cv_.wait_for(lock, std::chrono::duration<double>(timeout_seconds), [&] {
    return job->state == JobState::done || job->state == JobState::failed;
  });
  return job->to_json();
}

nlohmann::json Service::health() const {
  std::lock_guard lock(mu_);
  int64_t queued = 0, running = 0;
  for (const auto& [id, j] : jobs_) {
    queued += j->state == JobState::queued;
    running += j->state == JobState::running;
  }
  return {{"status", "ok"},
          {"models",
           {{"generator", static_cast<bool>(models_.generator)},
            {"encoder", static_cast<bool>(models_.encoder)},
            {"classifier", static_cast<bool>(models_.classifier)},
            {"reference", static_cast<bool>(models_.reference)},
            {"segmenter", static_cast<bool>(models_.segmenter)}}},
          {"sessions", sessions_.size()},
          {"jobs", {{"queued", queued}, {"running", running}, {"total", jobs_.size()}}}};
}

bool Service::verify_cf_record(const nlohmann::json& record) const {
  auto latent = store_->get(record.at("latent"));
  if (!latent || !models_.generator) return false;
  auto z = inversion::latent_from_archive(deserialize(*latent));
  torch::Tensor image;
  {
    torch::NoGradGuard no_grad;
    blob::Generator g = models_.generator;
    image = g->generate(z);
  }
  if (sha256_hex(tensor_bytes(image)) != record.at("image_tensor").get<std::string>()) return false;
  if (record.at("target").is_object()) {
    cf::ClassTarget t{record.at("target").at("head"), record.at("target").at("value")};
    models::Classifier m = models_.classifier;
    return cf::verify_success(image, t, m) == record.at("success").get<bool>();
  }
  return true;
}

}  // namespace octet::service
