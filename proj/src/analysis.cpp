#include "octet/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace octet::eval {

namespace {

constexpr const char* kClassNames[scene::kNumSegClasses] = {"background", "primary_lane", "secondary_lane", "vehicle"};
constexpr int64_t kChunk = 25;

std::string fmt(double v, int precision = 3) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

/// Minimal SVG canvas with a plotting area mapped to data coordinates.
class Svg {
 public:
  Svg(double w, double h) : w_(w), h_(h) {
    out_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
         << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
         << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  }
  void line(double x1, double y1, double x2, double y2, const std::string& color = "black") {
    out_ << "<line x1=\"" << x1 << "\" y1=\"" << y1 << "\" x2=\"" << x2 << "\" y2=\"" << y2 << "\" stroke=\"" << color
         << "\"/>\n";
  }
  void rect(double x, double y, double w, double h, const std::string& fill) {
    out_ << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << w << "\" height=\"" << h << "\" fill=\"" << fill
         << "\"/>\n";
  }
  void circle(double x, double y, double r, const std::string& fill) {
    out_ << "<circle cx=\"" << x << "\" cy=\"" << y << "\" r=\"" << r << "\" fill=\"" << fill << "\"/>\n";
  }
  void text(double x, double y, const std::string& s, const std::string& anchor = "start") {
    out_ << "<text x=\"" << x << "\" y=\"" << y << "\" text-anchor=\"" << anchor << "\">" << s << "</text>\n";
  }
  void save(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path);
    f << out_.str() << "</svg>\n";
    if (!f) throw std::runtime_error("cannot write " + path.string());
  }
  double width() const { return w_; }
  double height() const { return h_; }

 private:
  double w_, h_;
  std::ostringstream out_;
};

std::string gray(double t) {
  const int v = static_cast<int>(std::lround(255.0 * (1.0 - std::clamp(t, 0.0, 1.0))));
  std::ostringstream s;
  s << "rgb(" << v << "," << v << "," << 255 << ")";
  return s.str();
}

std::array<int64_t, scene::kNumSegClasses> class_counts(const torch::Tensor& mask) {
  std::array<int64_t, scene::kNumSegClasses> c{};
  auto counts = torch::bincount(mask.flatten(), {}, scene::kNumSegClasses).contiguous();
  for (int i = 0; i < scene::kNumSegClasses; ++i) c[i] = counts[i].item<int64_t>();
  return c;
}

BlobLatent sample_latents(blob::Generator& generator, int64_t n, uint64_t seed) {
  torch::NoGradGuard no_grad;
  torch::manual_seed(seed);
  return generator->sample_layout(generator->random_noise(n)).z;
}

}  // namespace

nlohmann::json TradeoffPoint::to_json() const {
  return {{"lambda", lambda},           {"fid", fid},       {"perceptual", perceptual},
          {"success_rate", success_rate}, {"mean_l_dist", mean_l_dist}, {"mean_modified", mean_modified},
          {"jobs", jobs},               {"failures", failures}};
}

std::vector<double> default_lambda_grid() { return {0.0, 0.01, 0.03, 0.1, 0.3, 1.0}; }

std::vector<TradeoffPoint> sweep_lambda(const BlobLatent& queries, const std::vector<cf::ClassTarget>& targets,
                                        const std::vector<double>& lambdas, const cf::CFRequest& base,
                                        blob::Generator& generator, models::Classifier& model,
                                        models::ReferenceNet& reference, const FeatureStats& real_stats,
                                        std::vector<std::vector<cf::CFResult>>* results) {
  if (lambdas.empty()) throw std::invalid_argument("sweep_lambda: empty lambda list");
  if (!std::is_sorted(lambdas.begin(), lambdas.end())) throw std::invalid_argument("sweep_lambda: lambdas must be sorted");
  if (static_cast<int64_t>(targets.size()) != queries.batch())
    throw std::invalid_argument("sweep_lambda: one target per query required");
  torch::Tensor query_images;
  {
    torch::NoGradGuard no_grad;
    query_images = generator->generate(queries);
  }
  const auto mask = cf::effective_mask(base, queries.num_blobs());

  std::vector<TradeoffPoint> points;
  for (double lambda : lambdas) {
    cf::CFRequest req = base;
    req.lambda_dist = lambda;
    std::vector<cf::CFResult> done;
    std::vector<int64_t> done_index;
    TradeoffPoint p;
    p.lambda = lambda;
    for (int64_t begin = 0; begin < queries.batch(); begin += kChunk) {
      const int64_t end = std::min(queries.batch(), begin + kChunk);
      std::vector<BlobLatent> parts;
      for (int64_t i = begin; i < end; ++i) parts.push_back(queries.slice(i));
      std::vector<cf::ClassTarget> tg(targets.begin() + begin, targets.begin() + end);
      try {
        auto r = cf::counterfactual_batch(BlobLatent::cat(parts), tg, req, generator, model);
        for (int64_t i = begin; i < end; ++i) done_index.push_back(i);
        std::move(r.begin(), r.end(), std::back_inserter(done));
      } catch (const std::exception&) {
        // retry one by one so a single bad job does not sink the chunk
        for (int64_t i = begin; i < end; ++i) {
          try {
            auto r = cf::counterfactual_batch(queries.slice(i), {targets[i]}, req, generator, model);
            done_index.push_back(i);
            done.push_back(std::move(r[0]));
          } catch (const std::exception&) {
            ++p.failures;
          }
        }
      }
    }
    p.jobs = queries.batch();
    if (!done.empty()) {
      std::vector<torch::Tensor> imgs;
      std::vector<bool> ok;
      double dist = 0.0, modified = 0.0;
      for (size_t j = 0; j < done.size(); ++j) {
        imgs.push_back(done[j].image);
        ok.push_back(done[j].success);
        dist += cf::l_dist(done[j].z_cf, queries.slice(done_index[j]), mask).item<double>();
        modified += static_cast<double>(done[j].modified_count());
      }
      auto cf_images = torch::cat(imgs, 0);
      auto originals = query_images.index_select(0, torch::tensor(done_index, torch::kLong));
      torch::NoGradGuard no_grad;
      double perc = 0.0;
      for (int64_t b = 0; b < cf_images.size(0); b += 128) {
        const int64_t e = std::min(cf_images.size(0), b + 128);
        perc += perceptual_distance(reference, cf_images.slice(0, b, e), originals.slice(0, b, e)).sum().item<double>();
      }
      const double n = static_cast<double>(done.size());
      p.perceptual = perc / n;
      p.success_rate = success_rate(ok);
      p.mean_l_dist = dist / n;
      p.mean_modified = modified / n;
      p.fid = done.size() >= 2 ? fid(image_stats(reference, cf_images), real_stats) : 0.0;
    }
    points.push_back(p);
    if (results) results->push_back(std::move(done));
  }
  return points;
}

void write_sweep_csv(const std::vector<TradeoffPoint>& points, const std::filesystem::path& path) {
  std::ofstream f(path);
  f << "lambda,fid,perceptual,success_rate,mean_l_dist,mean_modified,jobs,failures\n";
  f << std::setprecision(10);
  for (const auto& p : points)
    f << p.lambda << ',' << p.fid << ',' << p.perceptual << ',' << p.success_rate << ',' << p.mean_l_dist << ','
      << p.mean_modified << ',' << p.jobs << ',' << p.failures << '\n';
  if (!f) throw std::runtime_error("cannot write " + path.string());
}

void plot_tradeoff(const std::vector<TradeoffPoint>& points, const std::filesystem::path& svg_path) {
  Svg svg(520, 380);
  const double left = 60, right = 490, top = 30, bottom = 330;
  double xmax = 1e-9, ymax = 1e-9;
  for (const auto& p : points) {
    xmax = std::max(xmax, p.perceptual);
    ymax = std::max(ymax, p.fid);
  }
  xmax *= 1.15;
  ymax *= 1.15;
  svg.line(left, bottom, right, bottom);
  svg.line(left, bottom, left, top);
  svg.text((left + right) / 2, 365, "perceptual distance", "middle");
  svg.text(15, (top + bottom) / 2, "FID");
  svg.text(left, 20, "FID vs perceptual distance (labels: lambda, success rate)");
  for (int t = 0; t <= 4; ++t) {
    const double fx = t / 4.0;
    svg.text(left + fx * (right - left), bottom + 15, fmt(fx * xmax, 3), "middle");
    svg.text(left - 5, bottom - fx * (bottom - top) + 4, fmt(fx * ymax, 1), "end");
  }
  for (const auto& p : points) {
    const double x = left + p.perceptual / xmax * (right - left);
    const double y = bottom - p.fid / ymax * (bottom - top);
    svg.circle(x, y, 4, "steelblue");
    svg.text(x + 6, y - 4, "l=" + fmt(p.lambda, 2) + " s=" + fmt(100.0 * p.success_rate, 0) + "%");
  }
  svg.save(svg_path);
}

nlohmann::json SparsityReport::to_json() const { return {{"histogram", histogram}, {"mean", mean}, {"n", n}}; }

SparsityReport sparsity_report(const std::vector<std::vector<cf::BlobChange>>& changes) {
  SparsityReport r;
  double total = 0.0;
  for (const auto& c : changes) {
    const auto count = std::count_if(c.begin(), c.end(), [](const cf::BlobChange& b) { return b.modified; });
    if (static_cast<int64_t>(r.histogram.size()) <= count) r.histogram.resize(count + 1, 0);
    ++r.histogram[count];
    total += static_cast<double>(count);
  }
  r.n = static_cast<int64_t>(changes.size());
  r.mean = r.n > 0 ? total / static_cast<double>(r.n) : 0.0;
  return r;
}

SparsityReport sparsity_report(const std::vector<cf::CFResult>& results) {
  std::vector<std::vector<cf::BlobChange>> c;
  for (const auto& r : results) c.push_back(r.changes);
  return sparsity_report(c);
}

nlohmann::json PixelDrop::to_json() const {
  std::vector<std::string> names(std::begin(kClassNames), std::end(kClassNames));
  nlohmann::json signed_drop, drop;
  for (int c = 0; c < scene::kNumSegClasses; ++c) {
    signed_drop[names[c]] = mean_signed[c];
    drop[names[c]] = mean_drop[c];
  }
  return {{"blob", blob}, {"samples", samples}, {"active", active}, {"mean_signed", signed_drop}, {"mean_drop", drop}};
}

namespace {

struct DropSetup {
  BlobLatent z;
  torch::Tensor base_masks;
};

DropSetup drop_setup(blob::Generator& generator, models::Segmenter& segmenter, int64_t n, uint64_t seed) {
  if (n < 1) throw std::invalid_argument("class_pixel_drop: n must be >= 1");
  DropSetup s;
  s.z = sample_latents(generator, n, seed);
  torch::NoGradGuard no_grad;
  s.base_masks = models::batched(generator->generate(s.z), 128, [&](const torch::Tensor& x) { return models::segment(segmenter, x); });
  return s;
}

PixelDrop drop_for(const DropSetup& s, blob::Generator& generator, models::Segmenter& segmenter, int64_t k) {
  if (k < 0 || k >= s.z.num_blobs()) throw std::out_of_range("class_pixel_drop: blob index out of range");
  torch::NoGradGuard no_grad;
  const int64_t n = s.z.batch();
  auto removed = blob::edit_blob(s.z, k, blob::BlobEdit().set(blob::kScale, -1.0));
  auto masks = models::batched(generator->generate(removed), 128, [&](const torch::Tensor& x) { return models::segment(segmenter, x); });
  auto active = s.z.spatial.select(1, k).select(1, blob::kScale) > 0;
  PixelDrop d;
  d.blob = k;
  d.samples = n;
  d.active = active.sum().item<int64_t>();
  for (int64_t i = 0; i < n; ++i) {
    d.before.push_back(class_counts(s.base_masks[i]));
    d.after.push_back(class_counts(masks[i]));
    for (int c = 0; c < scene::kNumSegClasses; ++c)
      d.mean_signed[c] += static_cast<double>(d.before.back()[c] - d.after.back()[c]);
  }
  for (int c = 0; c < scene::kNumSegClasses; ++c) {
    d.mean_signed[c] /= static_cast<double>(n);
    d.mean_drop[c] = std::max(0.0, d.mean_signed[c]);
  }
  return d;
}

}  // namespace

PixelDrop class_pixel_drop(blob::Generator& generator, models::Segmenter& segmenter, int64_t k, int64_t n,
                           uint64_t seed) {
  generator->eval();
  segmenter->eval();
  return drop_for(drop_setup(generator, segmenter, n, seed), generator, segmenter, k);
}

double Heatmap::entropy() const {
  if (mass == 0) return 0.0;
  double h = 0.0;
  for (auto c : counts)
    if (c > 0) {
      const double p = static_cast<double>(c) / static_cast<double>(mass);
      h -= p * std::log(p);
    }
  return h;
}

nlohmann::json Heatmap::to_json() const {
  return {{"blob", blob},       {"bins_x", bins_x},   {"bins_y", bins_y},
          {"counts", counts},   {"mass", mass},       {"entropy", entropy()},
          {"uniform_entropy", uniform_entropy()}, {"mean_cx", mean_cx}, {"mean_cy", mean_cy}};
}

namespace {

Heatmap heatmap_for(const BlobLatent& z, int64_t k, int64_t bins_x, int64_t bins_y) {
  if (k < 0 || k >= z.num_blobs()) throw std::out_of_range("centroid_distribution: blob index out of range");
  Heatmap h;
  h.blob = k;
  h.bins_x = bins_x;
  h.bins_y = bins_y;
  h.counts.assign(static_cast<size_t>(bins_x * bins_y), 0);
  auto sp = z.spatial.select(1, k).to(torch::kFloat64).contiguous();
  for (int64_t i = 0; i < z.batch(); ++i) {
    if (sp[i][blob::kScale].item<double>() <= 0.0) continue;
    const double cx = sp[i][blob::kCx].item<double>(), cy = sp[i][blob::kCy].item<double>();
    const auto bx = std::clamp<int64_t>(static_cast<int64_t>(std::floor(cx * bins_x)), 0, bins_x - 1);
    const auto by = std::clamp<int64_t>(static_cast<int64_t>(std::floor(cy * bins_y)), 0, bins_y - 1);
    ++h.counts[by * bins_x + bx];
    ++h.mass;
    h.mean_cx += cx;
    h.mean_cy += cy;
  }
  if (h.mass > 0) {
    h.mean_cx /= static_cast<double>(h.mass);
    h.mean_cy /= static_cast<double>(h.mass);
  }
  return h;
}

std::string region_name(double cx, double cy) {
  std::string side = cx < scene::kLaneBoundaryLeft ? "left" : (cx < scene::kLaneBoundaryRight ? "center" : "right");
  return side + (cy >= scene::kNearZoneTop ? ", near" : ", far");
}

}  // namespace

Heatmap centroid_distribution(blob::Generator& generator, int64_t k, int64_t n, uint64_t seed, int64_t bins_x,
                              int64_t bins_y) {
  if (n < 1) throw std::invalid_argument("centroid_distribution: n must be >= 1");
  generator->eval();
  return heatmap_for(sample_latents(generator, n, seed), k, bins_x, bins_y);
}

nlohmann::json BlobSemanticsReport::to_json() const {
  nlohmann::json blobs = nlohmann::json::array();
  for (size_t i = 0; i < labels.size(); ++i)
    blobs.push_back({{"blob", labels[i].blob},
                     {"category", labels[i].category},
                     {"region", labels[i].region},
                     {"dominant_drop", labels[i].dominant_drop},
                     {"entropy", labels[i].entropy},
                     {"localized", labels[i].localized},
                     {"pixel_drop", drops[i].to_json()},
                     {"heatmap", heatmaps[i].to_json()}});
  return {{"blobs", blobs}};
}

BlobSemanticsReport blob_semantics(blob::Generator& generator, models::Segmenter& segmenter, int64_t n,
                                   uint64_t seed) {
  generator->eval();
  segmenter->eval();
  auto setup = drop_setup(generator, segmenter, n, seed);
  BlobSemanticsReport r;
  for (int64_t k = 0; k < setup.z.num_blobs(); ++k) {
    r.drops.push_back(drop_for(setup, generator, segmenter, k));
    r.heatmaps.push_back(heatmap_for(setup.z, k, 8, 4));
    const auto& d = r.drops.back();
    const auto& h = r.heatmaps.back();
    BlobLabel l;
    l.blob = k;
    const auto best = std::max_element(d.mean_drop.begin(), d.mean_drop.end()) - d.mean_drop.begin();
    l.dominant_drop = d.mean_drop[best];
    l.category = l.dominant_drop >= kMinLabelDrop ? kClassNames[best] : "none";
    l.region = h.mass > 0 ? region_name(h.mean_cx, h.mean_cy) : "inactive";
    l.entropy = h.entropy();
    l.localized = h.mass > 0 && l.entropy < h.uniform_entropy();
    r.labels.push_back(l);
  }
  return r;
}

void plot_pixel_drops(const BlobSemanticsReport& report, const std::filesystem::path& svg_path) {
  const double group = 60;
  Svg svg(80 + group * static_cast<double>(report.drops.size()), 300);
  const double left = 50, bottom = 250, top = 30;
  double ymax = 1.0;
  for (const auto& d : report.drops)
    for (double v : d.mean_drop) ymax = std::max(ymax, v);
  const char* colors[] = {"#999999", "#4477aa", "#66ccee", "#ee6677"};
  svg.text(left, 18, "mean pixels removed per class when a blob is dropped");
  svg.line(left, bottom, svg.width() - 20, bottom);
  svg.line(left, bottom, left, top);
  svg.text(left - 5, top + 4, fmt(ymax, 0), "end");
  for (size_t i = 0; i < report.drops.size(); ++i) {
    const double x0 = left + 5 + group * static_cast<double>(i);
    for (int c = 0; c < scene::kNumSegClasses; ++c) {
      const double h = report.drops[i].mean_drop[c] / ymax * (bottom - top);
      svg.rect(x0 + 12 * c, bottom - h, 11, h, colors[c]);
    }
    svg.text(x0 + 24, bottom + 15, std::to_string(i), "middle");
  }
  for (int c = 0; c < scene::kNumSegClasses; ++c) {
    svg.rect(left + 130 * c, 275, 10, 10, colors[c]);
    svg.text(left + 130 * c + 14, 284, kClassNames[c]);
  }
  svg.save(svg_path);
}

void plot_heatmaps(const BlobSemanticsReport& report, const std::filesystem::path& svg_path) {
  const double cell = 12, pad = 20;
  const size_t per_row = 4;
  if (report.heatmaps.empty()) throw std::invalid_argument("plot_heatmaps: empty report");
  const auto& first = report.heatmaps.front();
  const double tile_w = cell * first.bins_x + pad, tile_h = cell * first.bins_y + pad + 12;
  const size_t rows = (report.heatmaps.size() + per_row - 1) / per_row;
  Svg svg(pad + tile_w * per_row, pad + tile_h * rows);
  for (size_t i = 0; i < report.heatmaps.size(); ++i) {
    const auto& h = report.heatmaps[i];
    const double x0 = pad + tile_w * static_cast<double>(i % per_row);
    const double y0 = pad + tile_h * static_cast<double>(i / per_row);
    svg.text(x0, y0 - 4, "blob " + std::to_string(h.blob) + " (" + report.labels[i].category + ")");
    const auto peak = std::max<int64_t>(1, *std::max_element(h.counts.begin(), h.counts.end()));
    for (int64_t by = 0; by < h.bins_y; ++by)
      for (int64_t bx = 0; bx < h.bins_x; ++bx)
        svg.rect(x0 + cell * bx, y0 + cell * by, cell - 1, cell - 1,
                 gray(static_cast<double>(h.counts[by * h.bins_x + bx]) / static_cast<double>(peak)));
  }
  svg.save(svg_path);
}

std::vector<AblationVariant> inversion_ablation_variants(const inversion::InversionConfig& base) {
  std::vector<AblationVariant> v;
  v.push_back({"full", base});
  auto drop = [&](const std::string& name, double inversion::InversionConfig::*field) {
    auto c = base;
    c.*field = 0.0;
    v.push_back({name, c});
  };
  drop("w/o perceptual", &inversion::InversionConfig::w_perceptual);
  drop("w/o pixel L2", &inversion::InversionConfig::w_pixel);
  drop("w/o L2 on f_M", &inversion::InversionConfig::w_features);
  drop("w/o latent proximity", &inversion::InversionConfig::w_proximity);
  return v;
}

nlohmann::json AblationRow::to_json() const {
  return {{"name", name}, {"fid", fid}, {"perceptual", perceptual}, {"preservation", preservation}};
}

AblationRow score_reconstructions(const std::string& name, const torch::Tensor& originals,
                                  const torch::Tensor& reconstructions, models::Classifier& model,
                                  models::ReferenceNet& reference, const FeatureStats& real_stats) {
  AblationRow row;
  row.name = name;
  torch::NoGradGuard no_grad;
  double perc = 0.0;
  for (int64_t b = 0; b < originals.size(0); b += 128) {
    const int64_t e = std::min(originals.size(0), b + 128);
    perc += perceptual_distance(reference, reconstructions.slice(0, b, e), originals.slice(0, b, e)).sum().item<double>();
  }
  row.perceptual = perc / static_cast<double>(originals.size(0));
  row.preservation = inversion::decision_preservation(originals, reconstructions, model);
  row.fid = originals.size(0) >= 2 ? fid(image_stats(reference, reconstructions), real_stats) : 0.0;
  return row;
}

std::vector<AblationRow> ablation_table(const std::vector<AblationVariant>& variants, const torch::Tensor& images,
                                        inversion::Encoder& encoder, blob::Generator& generator,
                                        models::Classifier& model, models::ReferenceNet& reference,
                                        const FeatureStats& real_stats) {
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    auto res = inversion::invert(images, encoder, generator, model, reference, v.config);
    std::vector<torch::Tensor> recon;
    for (const auto& r : res) recon.push_back(r.reconstruction);
    rows.push_back(score_reconstructions(v.name, images, torch::cat(recon, 0), model, reference, real_stats));
  }
  return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path) {
  std::ofstream f(path);
  f << "variant,fid,perceptual,preservation\n" << std::setprecision(10);
  for (const auto& r : rows) f << '"' << r.name << "\"," << r.fid << ',' << r.perceptual << ',' << r.preservation << '\n';
  if (!f) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace octet::eval
