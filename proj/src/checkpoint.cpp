#include "octet/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace octet {

namespace {

constexpr char kMagic[8] = {'O', 'C', 'T', 'E', 'T', 'C', 'K', '\0'};

uint8_t dtype_code(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return 0;
    case torch::kFloat64: return 1;
    case torch::kInt64: return 2;
    case torch::kUInt8: return 3;
    default: throw std::invalid_argument("checkpoint: unsupported tensor dtype");
  }
}

torch::ScalarType dtype_from_code(uint8_t c) {
  switch (c) {
    case 0: return torch::kFloat32;
    case 1: return torch::kFloat64;
    case 2: return torch::kInt64;
    case 3: return torch::kUInt8;
    default: throw std::runtime_error("checkpoint: unknown dtype code " + std::to_string(c));
  }
}

class Writer {
 public:
  void bytes(const void* p, size_t n) {
    auto* b = static_cast<const uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename T>
  void pod(T v) { bytes(&v, sizeof(T)); }
  void str(const std::string& s) {
    pod<uint32_t>(static_cast<uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<uint8_t> take() { return std::move(out_); }

 private:
  std::vector<uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<uint8_t>& in) : in_(in) {}
  void bytes(void* p, size_t n) {
    if (pos_ + n > in_.size()) throw std::runtime_error("checkpoint: truncated stream");
    std::memcpy(p, in_.data() + pos_, n);
    pos_ += n;
  }
  template <typename T>
  T pod() {
    T v;
    bytes(&v, sizeof(T));
    return v;
  }
  std::string str() {
    auto n = pod<uint32_t>();
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  const std::vector<uint8_t>& in_;
  size_t pos_ = 0;
};

}  // namespace

const torch::Tensor& TensorArchive::get(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
}

bool TensorArchive::contains(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

void TensorArchive::put(std::string name, torch::Tensor t) {
  for (auto& [n, existing] : tensors)
    if (n == name) {
      existing = std::move(t);
      return;
    }
  tensors.emplace_back(std::move(name), std::move(t));
}

std::vector<uint8_t> serialize(const TensorArchive& archive) {
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.pod<uint32_t>(kCheckpointVersion);
  w.str(archive.meta.dump());
  w.pod<uint32_t>(static_cast<uint32_t>(archive.tensors.size()));
  for (const auto& [name, t_in] : archive.tensors) {
    auto t = t_in.detach().cpu().contiguous();
    w.str(name);
    w.pod<uint8_t>(dtype_code(t.scalar_type()));
    w.pod<uint32_t>(static_cast<uint32_t>(t.dim()));
    for (auto d : t.sizes()) w.pod<int64_t>(d);
    w.bytes(t.data_ptr(), t.numel() * t.element_size());
  }
  return w.take();
}

TensorArchive deserialize(const std::vector<uint8_t>& bytes) {
  Reader r(bytes);
  char magic[8];
  r.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw std::runtime_error("checkpoint: bad magic");
  const auto version = r.pod<uint32_t>();
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  TensorArchive archive;
  archive.meta = nlohmann::json::parse(r.str());
  const auto count = r.pod<uint32_t>();
  for (uint32_t i = 0; i < count; ++i) {
    auto name = r.str();
    auto dtype = dtype_from_code(r.pod<uint8_t>());
    const auto rank = r.pod<uint32_t>();
    std::vector<int64_t> dims(rank);
    for (auto& d : dims) d = r.pod<int64_t>();
    auto t = torch::empty(dims, torch::TensorOptions().dtype(dtype));
    r.bytes(t.data_ptr(), t.numel() * t.element_size());
    archive.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");
  return archive;
}

std::vector<uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void save_archive(const TensorArchive& archive, const std::filesystem::path& path) {
  write_file(path, serialize(archive));
}

TensorArchive load_archive(const std::filesystem::path& path) { return deserialize(read_file(path)); }

void export_module(TensorArchive& archive, const torch::nn::Module& module, const std::string& prefix) {
  for (const auto& p : module.named_parameters(true)) archive.put(prefix + p.key(), p.value().detach().clone());
  for (const auto& b : module.named_buffers(true)) archive.put(prefix + b.key(), b.value().detach().clone());
}

void import_module(const TensorArchive& archive, torch::nn::Module& module, const std::string& prefix) {
  torch::NoGradGuard no_grad;
  auto assign = [&](const std::string& key, torch::Tensor& dst) {
    const auto& src = archive.get(prefix + key);
    if (src.sizes() != dst.sizes())
      throw std::runtime_error("checkpoint: shape mismatch for '" + prefix + key + "'");
    dst.copy_(src);
  };
  for (auto& p : module.named_parameters(true)) assign(p.key(), p.value());
  for (auto& b : module.named_buffers(true)) assign(b.key(), b.value());
}

}  // namespace octet
