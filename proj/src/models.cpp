#include "octet/models.hpp"

#include <cmath>

namespace octet::models {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace {

nn::Conv2d conv(int64_t in, int64_t out, int64_t k, int64_t stride = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, k).stride(stride).padding(k / 2));
}

torch::Tensor normalize_input(const torch::Tensor& x) { return 2.0 * x - 1.0; }

void check_dims(const NetConfig& cfg, const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != cfg.height || images.size(3) != cfg.width)
    throw std::invalid_argument("model input must be [B, 3, " + std::to_string(cfg.height) + ", " +
                                std::to_string(cfg.width) + "]");
}

int probe_block(const std::string& name) {
  for (int i = 1; i <= 5; ++i)
    if (name == "block" + std::to_string(i)) return i - 1;
  throw std::invalid_argument("unknown probe layer '" + name + "' (expected block1..block5)");
}

std::vector<nn::Conv2d> make_blocks(nn::Module& owner, int64_t c) {
  const std::array<int64_t, 6> ch{3, c, 2 * c, 2 * c, 4 * c, 4 * c};
  std::vector<nn::Conv2d> blocks;
  for (int i = 0; i < 5; ++i)
    blocks.push_back(owner.register_module("block" + std::to_string(i + 1), conv(ch[i], ch[i + 1], 3, i == 0 ? 1 : 2)));
  return blocks;
}

int64_t flat_size(const NetConfig& cfg) { return 4 * cfg.channels * ((cfg.height + 15) / 16) * ((cfg.width + 15) / 16); }

struct Split {
  scene::Dataset train, val;
};

Split split(const scene::Dataset& data, double val_fraction) {
  const int64_t n = data.size();
  if (n == 0) throw std::invalid_argument("training: empty dataset");
  int64_t n_val = static_cast<int64_t>(std::round(static_cast<double>(n) * val_fraction));
  n_val = std::clamp<int64_t>(n_val, n > 1 ? 1 : 0, n - 1);
  if (n == 1) return {data, data};
  return {data.subset(0, n - n_val), data.subset(n - n_val, n)};
}

template <typename Net, typename LossFn, typename EvalFn>
void fit(Net& net, const scene::Dataset& train, const TrainConfig& tcfg, TrainingReport* report, LossFn&& loss_fn,
         EvalFn&& eval_fn) {
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(tcfg.lr));
  const int64_t n = train.size();
  for (int64_t epoch = 1; epoch <= tcfg.epochs; ++epoch) {
    net->train();
    auto perm = torch::randperm(n, torch::kLong);
    double total = 0.0;
    int64_t batches = 0;
    for (int64_t b = 0; b < n; b += tcfg.batch_size) {
      auto idx = perm.slice(0, b, std::min(n, b + tcfg.batch_size));
      opt.zero_grad();
      auto loss = loss_fn(idx);
      loss.backward();
      opt.step();
      total += loss.template item<double>();
      ++batches;
    }
    net->eval();
    auto metrics = eval_fn();
    if (report) report->epochs.push_back({epoch, total / std::max<int64_t>(1, batches), metrics});
    if (report) report->final_metrics = metrics;
  }
  net->eval();
}

}  // namespace

nlohmann::json NetConfig::to_json() const {
  return {{"height", height}, {"width", width}, {"channels", channels}, {"probe_layer", probe_layer}};
}

NetConfig NetConfig::from_json(const nlohmann::json& j) {
  NetConfig c;
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.channels = j.value("channels", c.channels);
  c.probe_layer = j.value("probe_layer", c.probe_layer);
  return c;
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs}, {"batch_size", batch_size}, {"lr", lr}, {"seed", seed}, {"val_fraction", val_fraction}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.seed = j.value("seed", c.seed);
  c.val_fraction = j.value("val_fraction", c.val_fraction);
  return c;
}

nlohmann::json TrainingReport::to_json() const {
  nlohmann::json e = nlohmann::json::array();
  for (const auto& r : epochs) e.push_back({{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"metrics", r.metrics}});
  return {{"epochs", e}, {"final", final_metrics}};
}

ClassifierImpl::ClassifierImpl(const NetConfig& c) : cfg(c) {
  probe_index = probe_block(cfg.probe_layer);
  blocks = make_blocks(*this, cfg.channels);
  fc = register_module("fc", nn::Linear(flat_size(cfg), 64));
  head = register_module("head", nn::Linear(64, kNumHeads));
}

ClassifierImpl::Output ClassifierImpl::run(const torch::Tensor& images) {
  check_dims(cfg, images);
  auto x = normalize_input(images);
  torch::Tensor probe;
  for (size_t i = 0; i < blocks.size(); ++i) {
    x = torch::silu(blocks[i]->forward(x));
    if (static_cast<int>(i) == probe_index) probe = x;
  }
  auto h = torch::silu(fc->forward(x.flatten(1)));
  return {head->forward(h), probe};
}

std::vector<int64_t> ClassifierImpl::probe_shape() const {
  const std::array<int64_t, 5> ch{cfg.channels, 2 * cfg.channels, 2 * cfg.channels, 4 * cfg.channels, 4 * cfg.channels};
  int64_t h = cfg.height, w = cfg.width;
  for (int i = 1; i <= probe_index; ++i) {
    h = (h + 1) / 2;
    w = (w + 1) / 2;
  }
  return {ch[probe_index], h, w};
}

torch::Tensor predict(Classifier& m, const torch::Tensor& images) { return torch::sigmoid(m->logits(images)); }

torch::Tensor decisions(Classifier& m, const torch::Tensor& images) { return predict(m, images) > 0.5; }

torch::Tensor features(Classifier& m, const torch::Tensor& images, const std::string& layer) {
  const int idx = probe_block(layer);
  check_dims(m->cfg, images);
  auto x = normalize_input(images);
  for (int i = 0; i <= idx; ++i) x = torch::silu(m->blocks[i]->forward(x));
  return x;
}

torch::Tensor features(Classifier& m, const torch::Tensor& images) { return m->run(images).probe; }

SegmenterImpl::SegmenterImpl(const NetConfig& c) : cfg(c) {
  if (cfg.height % 8 != 0 || cfg.width % 8 != 0) throw std::invalid_argument("segmenter: dims must be multiples of 8");
  const int64_t ch = cfg.channels;
  e1a = register_module("e1a", conv(3, ch, 3));
  e1b = register_module("e1b", conv(ch, ch, 3));
  e2a = register_module("e2a", conv(ch, 2 * ch, 3, 2));
  e2b = register_module("e2b", conv(2 * ch, 2 * ch, 3));
  e3a = register_module("e3a", conv(2 * ch, 4 * ch, 3, 2));
  e3b = register_module("e3b", conv(4 * ch, 4 * ch, 3));
  e4 = register_module("e4", conv(4 * ch, 4 * ch, 3, 2));
  d3 = register_module("d3", conv(8 * ch, 4 * ch, 3));
  d2 = register_module("d2", conv(6 * ch, 2 * ch, 3));
  d1 = register_module("d1", conv(3 * ch, ch, 3));
  out = register_module("out", conv(ch, scene::kNumSegClasses, 1));
}

torch::Tensor SegmenterImpl::forward(const torch::Tensor& images) {
  check_dims(cfg, images);
  auto up = [](const torch::Tensor& t, const torch::Tensor& like) {
    return F::interpolate(t, F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{like.size(2), like.size(3)})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
  };
  auto x = normalize_input(images);
  auto s1 = torch::silu(e1b->forward(torch::silu(e1a->forward(x))));
  auto s2 = torch::silu(e2b->forward(torch::silu(e2a->forward(s1))));
  auto s3 = torch::silu(e3b->forward(torch::silu(e3a->forward(s2))));
  auto s4 = torch::silu(e4->forward(s3));
  auto y = torch::silu(d3->forward(torch::cat({up(s4, s3), s3}, 1)));
  y = torch::silu(d2->forward(torch::cat({up(y, s2), s2}, 1)));
  y = torch::silu(d1->forward(torch::cat({up(y, s1), s1}, 1)));
  return out->forward(y);
}

torch::Tensor segment(Segmenter& s, const torch::Tensor& images) { return s->forward(images).argmax(1); }

ReferenceNetImpl::ReferenceNetImpl(const NetConfig& c) : cfg(c) {
  blocks = make_blocks(*this, cfg.channels);
  fc = register_module("fc", nn::Linear(flat_size(cfg), kEmbeddingDim));
  label_head = register_module("label_head", nn::Linear(kEmbeddingDim, kNumHeads));
  left_head = register_module("left_head", nn::Linear(kEmbeddingDim, 4));
  right_head = register_module("right_head", nn::Linear(kEmbeddingDim, 4));
  count_head = register_module("count_head", nn::Linear(kEmbeddingDim, 1));
}

ReferenceNetImpl::Output ReferenceNetImpl::run(const torch::Tensor& images) {
  check_dims(cfg, images);
  Output o;
  auto x = normalize_input(images);
  for (size_t i = 0; i < blocks.size(); ++i) {
    x = torch::silu(blocks[i]->forward(x));
    if (i >= 1) o.taps.push_back(x);
  }
  o.embedding = torch::silu(fc->forward(x.flatten(1)));
  o.label_logits = label_head->forward(o.embedding);
  o.left_logits = left_head->forward(o.embedding);
  o.right_logits = right_head->forward(o.embedding);
  o.count = count_head->forward(o.embedding).squeeze(1);
  return o;
}

torch::Tensor batched(const torch::Tensor& images, int64_t chunk,
                      const std::function<torch::Tensor(const torch::Tensor&)>& fn) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> outs;
  for (int64_t b = 0; b < images.size(0); b += chunk)
    outs.push_back(fn(images.slice(0, b, std::min(images.size(0), b + chunk))));
  return torch::cat(outs, 0);
}

std::vector<double> head_accuracy(Classifier& m, const torch::Tensor& images, const torch::Tensor& labels) {
  auto pred = batched(images, 256, [&](const torch::Tensor& x) { return decisions(m, x); });
  auto correct = (pred == (labels > 0.5)).to(torch::kFloat64).mean(0);
  std::vector<double> acc(kNumHeads);
  for (int64_t i = 0; i < kNumHeads; ++i) acc[i] = correct[i].item<double>();
  return acc;
}

torch::Tensor per_image_iou(const torch::Tensor& predicted, const torch::Tensor& target) {
  if (predicted.sizes() != target.sizes()) throw std::invalid_argument("iou: shape mismatch");
  auto p = predicted.reshape({predicted.size(0), -1});
  auto t = target.reshape({target.size(0), -1});
  auto iou_sum = torch::zeros({p.size(0)}, torch::kFloat64);
  auto present = torch::zeros({p.size(0)}, torch::kFloat64);
  for (int64_t c = 0; c < scene::kNumSegClasses; ++c) {
    auto pc = p == c;
    auto tc = t == c;
    auto inter = (pc & tc).sum(1).to(torch::kFloat64);
    auto uni = (pc | tc).sum(1).to(torch::kFloat64);
    auto has = uni > 0;
    iou_sum += torch::where(has, inter / uni.clamp_min(1.0), torch::zeros_like(inter));
    present += has.to(torch::kFloat64);
  }
  return iou_sum / present.clamp_min(1.0);
}

double mean_iou(const torch::Tensor& predicted, const torch::Tensor& target) {
  return per_image_iou(predicted, target).mean().item<double>();
}

Classifier train_classifier(const scene::Dataset& data, const NetConfig& cfg, const TrainConfig& tcfg, bool bias_flag,
                            TrainingReport* report) {
  torch::manual_seed(tcfg.seed);
  auto [train, val] = split(data, tcfg.val_fraction);
  const auto& train_labels = bias_flag ? train.biased_labels : train.labels;
  const auto& val_labels = bias_flag ? val.biased_labels : val.labels;
  Classifier net(cfg);
  fit(
      net, train, tcfg, report,
      [&](const torch::Tensor& idx) {
        auto logits = net->logits(train.images.index_select(0, idx));
        return F::binary_cross_entropy_with_logits(logits, train_labels.index_select(0, idx));
      },
      [&] {
        auto acc = head_accuracy(net, val.images, val_labels);
        nlohmann::json j;
        for (int64_t i = 0; i < kNumHeads; ++i) j[scene::kHeadNames[i]] = acc[i];
        return j;
      });
  return net;
}

Segmenter train_segmenter(const scene::Dataset& data, const NetConfig& cfg, const TrainConfig& tcfg,
                          TrainingReport* report) {
  torch::manual_seed(tcfg.seed);
  auto [train, val] = split(data, tcfg.val_fraction);
  Segmenter net(cfg);
  fit(
      net, train, tcfg, report,
      [&](const torch::Tensor& idx) {
        auto logits = net->forward(train.images.index_select(0, idx));
        return F::cross_entropy(logits, train.masks.index_select(0, idx));
      },
      [&] {
        auto pred = batched(val.images, 128, [&](const torch::Tensor& x) { return segment(net, x); });
        return nlohmann::json{{"mean_iou", mean_iou(pred, val.masks)}};
      });
  return net;
}

ReferenceNet train_reference(const scene::Dataset& data, const NetConfig& cfg, const TrainConfig& tcfg,
                             TrainingReport* report) {
  torch::manual_seed(tcfg.seed);
  auto [train, val] = split(data, tcfg.val_fraction);
  ReferenceNet net(cfg);
  fit(
      net, train, tcfg, report,
      [&](const torch::Tensor& idx) {
        auto o = net->run(train.images.index_select(0, idx));
        auto attrs = train.attributes.index_select(0, idx);
        return F::binary_cross_entropy_with_logits(o.label_logits, train.labels.index_select(0, idx)) +
               F::cross_entropy(o.left_logits, attrs.select(1, 0)) +
               F::cross_entropy(o.right_logits, attrs.select(1, 1)) +
               F::mse_loss(o.count, attrs.select(1, 2).to(torch::kFloat32));
      },
      [&] {
        torch::NoGradGuard no_grad;
        auto o = net->run(val.images);
        auto left_acc = (o.left_logits.argmax(1) == val.attributes.select(1, 0)).to(torch::kFloat64).mean().item<double>();
        auto right_acc = (o.right_logits.argmax(1) == val.attributes.select(1, 1)).to(torch::kFloat64).mean().item<double>();
        return nlohmann::json{{"left_marking_acc", left_acc}, {"right_marking_acc", right_acc}};
      });
  return net;
}

namespace {

template <typename Net>
void save_net(const Net& m, const std::string& kind, const std::filesystem::path& path, const nlohmann::json& extra) {
  TensorArchive a;
  a.meta = {{"kind", kind}, {"config", m->cfg.to_json()}};
  if (!extra.is_null()) a.meta["extra"] = extra;
  export_module(a, *m, "m.");
  save_archive(a, path);
}

template <typename Net>
Net load_net(const std::string& kind, const std::filesystem::path& path) {
  auto a = load_archive(path);
  if (a.meta.value("kind", "") != kind) throw std::runtime_error(path.string() + " is not a " + kind + " checkpoint");
  Net m(NetConfig::from_json(a.meta.at("config")));
  import_module(a, *m, "m.");
  m->eval();
  return m;
}

}  // namespace

void save_classifier(const Classifier& m, const std::filesystem::path& path, const nlohmann::json& extra) {
  save_net(m, "classifier", path, extra);
}
Classifier load_classifier(const std::filesystem::path& path) { return load_net<Classifier>("classifier", path); }
void save_segmenter(const Segmenter& m, const std::filesystem::path& path) { save_net(m, "segmenter", path, {}); }
Segmenter load_segmenter(const std::filesystem::path& path) { return load_net<Segmenter>("segmenter", path); }
void save_reference(const ReferenceNet& m, const std::filesystem::path& path) { save_net(m, "reference", path, {}); }
ReferenceNet load_reference(const std::filesystem::path& path) { return load_net<ReferenceNet>("reference", path); }

}  // namespace octet::models
