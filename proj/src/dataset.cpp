#include "octet/dataset.hpp"

#include <cstdio>
#include <fstream>

#include "octet/checkpoint.hpp"

namespace octet::scene {

namespace {

torch::Tensor labels_tensor(const SceneLabels& l) {
  auto a = l.as_array();
  return torch::tensor({a[0] ? 1.0f : 0.0f, a[1] ? 1.0f : 0.0f, a[2] ? 1.0f : 0.0f, a[3] ? 1.0f : 0.0f});
}

torch::Tensor mask_tensor(const SegMask& m) {
  auto t = torch::empty({m.height, m.width}, torch::kLong);
  auto* p = t.data_ptr<int64_t>();
  for (size_t i = 0; i < m.cls.size(); ++i) p[i] = m.cls[i];
  return t;
}

std::string index_name(int64_t i) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%06lld", static_cast<long long>(i));
  return buf;
}

torch::Tensor attribute_tensor(const SceneSpec& spec) {
  int64_t cars = 0;
  for (const auto& o : spec.objects) cars += o.category == Category::car ? 1 : 0;
  return torch::tensor({static_cast<int64_t>(spec.marking(Side::left)), static_cast<int64_t>(spec.marking(Side::right)), cars},
                       torch::kLong);
}

}  // namespace

Dataset Dataset::subset(int64_t begin, int64_t end) const {
  Dataset d;
  d.images = images.slice(0, begin, end);
  d.labels = labels.slice(0, begin, end);
  d.biased_labels = biased_labels.slice(0, begin, end);
  d.masks = masks.slice(0, begin, end);
  d.attributes = attributes.slice(0, begin, end);
  d.specs.assign(specs.begin() + begin, specs.begin() + end);
  return d;
}

Dataset build_dataset(uint64_t first_seed, int64_t count, const SceneGenConfig& config) {
  config.validate();
  if (count < 0) throw std::invalid_argument("build_dataset: negative count");
  std::vector<torch::Tensor> imgs, labs, blabs, masks, attrs;
  Dataset d;
  for (int64_t i = 0; i < count; ++i) {
    auto s = generate_scene(first_seed + static_cast<uint64_t>(i), config);
    imgs.push_back(to_tensor(s.image));
    labs.push_back(labels_tensor(s.labels));
    blabs.push_back(labels_tensor(s.biased_labels));
    masks.push_back(mask_tensor(s.mask));
    attrs.push_back(attribute_tensor(s.spec));
    d.specs.push_back(std::move(s.spec));
  }
  if (count == 0) {
    d.images = torch::empty({0, 3, config.height, config.width});
    d.labels = torch::empty({0, 4});
    d.biased_labels = torch::empty({0, 4});
    d.masks = torch::empty({0, config.height, config.width}, torch::kLong);
    d.attributes = torch::empty({0, 3}, torch::kLong);
    return d;
  }
  d.images = torch::stack(imgs);
  d.labels = torch::stack(labs);
  d.biased_labels = torch::stack(blabs);
  d.masks = torch::stack(masks);
  d.attributes = torch::stack(attrs);
  return d;
}

void export_dataset(const Dataset& data, const SceneGenConfig& config, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  std::ofstream meta(dir / "metadata.jsonl");
  for (int64_t i = 0; i < data.size(); ++i) {
    const auto name = index_name(i);
    write_png(from_tensor(data.images[i]), dir / "images" / (name + ".png"));
    auto m = data.masks[i].to(torch::kUInt8).contiguous();
    std::vector<uint8_t> px(m.data_ptr<uint8_t>(), m.data_ptr<uint8_t>() + m.numel());
    // class ids scaled for visibility; divide by 85 on load
    for (auto& p : px) p = static_cast<uint8_t>(p * 85);
    write_file(dir / "masks" / (name + ".png"), encode_png_gray(px, static_cast<int>(m.size(0)), static_cast<int>(m.size(1))));
    const auto& spec = data.specs[static_cast<size_t>(i)];
    nlohmann::json rec{{"index", i},
                       {"seed", spec.rng_seed},
                       {"image", "images/" + name + ".png"},
                       {"mask", "masks/" + name + ".png"},
                       {"spec", to_json(spec)},
                       {"labels", to_json(label_oracle(spec, false))},
                       {"biased_labels", to_json(label_oracle(spec, true))}};
    meta << rec.dump() << '\n';
  }
  std::ofstream(dir / "config.json") << to_json(config).dump(2) << '\n';

  TensorArchive cache;
  cache.meta = {{"kind", "dataset"}, {"count", data.size()}};
  cache.put("images", data.images);
  cache.put("labels", data.labels);
  cache.put("biased_labels", data.biased_labels);
  cache.put("masks", data.masks);
  cache.put("attributes", data.attributes);
  save_archive(cache, dir / "tensors.ckpt");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "metadata.jsonl"))
    throw std::runtime_error("dataset: " + (dir / "metadata.jsonl").string() + " not found");
  Dataset d;
  std::ifstream meta(dir / "metadata.jsonl");
  std::string line;
  while (std::getline(meta, line)) {
    if (line.empty()) continue;
    d.specs.push_back(spec_from_json(nlohmann::json::parse(line).at("spec")));
  }
  if (std::filesystem::exists(dir / "tensors.ckpt")) {
    auto a = load_archive(dir / "tensors.ckpt");
    d.images = a.get("images");
    d.labels = a.get("labels");
    d.biased_labels = a.get("biased_labels");
    d.masks = a.get("masks");
    d.attributes = a.get("attributes");
    if (d.images.size(0) != static_cast<int64_t>(d.specs.size()))
      throw std::runtime_error("dataset: tensor cache and metadata disagree");
    return d;
  }
  auto cfg = scene_config_from_json(nlohmann::json::parse(std::ifstream(dir / "config.json")));
  std::vector<torch::Tensor> imgs, labs, blabs, masks, attrs;
  for (size_t i = 0; i < d.specs.size(); ++i) {
    const auto name = index_name(static_cast<int64_t>(i));
    imgs.push_back(to_tensor(read_png(dir / "images" / (name + ".png"))));
    labs.push_back(labels_tensor(label_oracle(d.specs[i], false)));
    blabs.push_back(labels_tensor(label_oracle(d.specs[i], true)));
    masks.push_back(mask_tensor(seg_oracle(d.specs[i], cfg.height, cfg.width)));
    attrs.push_back(attribute_tensor(d.specs[i]));
  }
  d.images = torch::stack(imgs);
  d.labels = torch::stack(labs);
  d.biased_labels = torch::stack(blabs);
  d.masks = torch::stack(masks);
  d.attributes = torch::stack(attrs);
  return d;
}

}  // namespace octet::scene
