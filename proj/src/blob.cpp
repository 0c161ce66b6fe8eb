#include "octet/blob.hpp"

#include <stdexcept>
#include <string>

namespace octet::blob {

BlobLatent BlobLatent::clone() const { return {spatial.clone(), style.clone(), background.clone()}; }

BlobLatent BlobLatent::detach() const { return {spatial.detach(), style.detach(), background.detach()}; }

BlobLatent BlobLatent::to(torch::ScalarType dtype) const {
  return {spatial.to(dtype), style.to(dtype), background.to(dtype)};
}

BlobLatent BlobLatent::slice(int64_t b) const {
  return {spatial.slice(0, b, b + 1), style.slice(0, b, b + 1), background.slice(0, b, b + 1)};
}

BlobLatent BlobLatent::requires_grad(bool on) const {
  BlobLatent z = detach().clone();
  z.spatial.set_requires_grad(on);
  z.style.set_requires_grad(on);
  z.background.set_requires_grad(on);
  return z;
}

torch::Tensor BlobLatent::flat() const {
  const auto b = batch();
  return torch::cat({spatial.reshape({b, -1}), style.reshape({b, -1}), background.reshape({b, -1})}, 1);
}

bool BlobLatent::equal(const BlobLatent& o) const {
  return spatial.sizes() == o.spatial.sizes() && style.sizes() == o.style.sizes() &&
         background.sizes() == o.background.sizes() && torch::equal(spatial, o.spatial) &&
         torch::equal(style, o.style) && torch::equal(background, o.background);
}

BlobLatent BlobLatent::cat(const std::vector<BlobLatent>& parts) {
  std::vector<torch::Tensor> sp, st, bg;
  for (const auto& p : parts) {
    sp.push_back(p.spatial);
    st.push_back(p.style);
    bg.push_back(p.background);
  }
  return {torch::cat(sp, 0), torch::cat(st, 0), torch::cat(bg, 0)};
}

void check_shape(const BlobLatent& z, int64_t num_blobs, int64_t style_dim) {
  if (!z.spatial.defined() || !z.style.defined() || !z.background.defined())
    throw std::invalid_argument("latent: undefined tensor");
  if (z.spatial.dim() != 3 || z.spatial.size(1) != num_blobs || z.spatial.size(2) != kSpatialDim)
    throw std::invalid_argument("latent: spatial must be [B, " + std::to_string(num_blobs) + ", 5]");
  if (z.style.dim() != 3 || z.style.size(0) != z.spatial.size(0) || z.style.size(1) != num_blobs ||
      z.style.size(2) != style_dim)
    throw std::invalid_argument("latent: style must be [B, " + std::to_string(num_blobs) + ", " +
                                std::to_string(style_dim) + "]");
  if (z.background.dim() != 2 || z.background.size(0) != z.spatial.size(0) || z.background.size(1) != style_dim)
    throw std::invalid_argument("latent: background must be [B, " + std::to_string(style_dim) + "]");
}

torch::Tensor render_blobs(const torch::Tensor& spatial, int64_t height, int64_t width, double tau) {
  if (height <= 0 || width <= 0) throw std::invalid_argument("render_blobs: dims must be positive");
  if (tau <= 0.0) throw std::invalid_argument("render_blobs: tau must be positive");
  auto opts = spatial.options().requires_grad(false);
  auto u = (torch::arange(width, opts) + 0.5) / static_cast<double>(width);
  auto v = (torch::arange(height, opts) + 0.5) / static_cast<double>(height);
  u = u.view({1, 1, 1, width});
  v = v.view({1, 1, height, 1});

  auto param = [&](int64_t f) { return spatial.select(2, f).unsqueeze(-1).unsqueeze(-1); };
  auto cx = param(kCx), cy = param(kCy), s = param(kScale), a = param(kAspect).clamp_min(kMinAspect),
       theta = param(kAngle);

  const double aspect = static_cast<double>(width) / static_cast<double>(height);
  auto dx = (u - cx) * aspect;
  auto dy = v - cy;
  auto c = torch::cos(theta);
  auto sn = torch::sin(theta);
  auto xr = c * dx + sn * dy;
  auto yr = -sn * dx + c * dy;
  auto d = torch::sqrt(xr * xr / a + yr * yr * a + 1e-12);
  auto alpha = torch::sigmoid((s - d) / tau);
  return torch::where(s > 0, alpha, torch::zeros_like(alpha));
}

Composite compose_features(const torch::Tensor& alpha, const torch::Tensor& style, const torch::Tensor& background) {
  const auto k_blobs = alpha.size(1);
  if (style.size(1) != k_blobs || style.size(0) != alpha.size(0) || background.size(0) != alpha.size(0) ||
      background.size(1) != style.size(2))
    throw std::invalid_argument("compose_features: inconsistent shapes");
  std::vector<torch::Tensor> w(k_blobs + 1);
  auto transmittance = torch::ones_like(alpha.select(1, 0));
  for (int64_t k = k_blobs - 1; k >= 0; --k) {
    auto a = alpha.select(1, k);
    w[k] = a * transmittance;
    transmittance = transmittance * (1.0 - a);
  }
  w[k_blobs] = transmittance;
  auto weights = torch::stack(w, 1);
  auto blob_w = weights.slice(1, 0, k_blobs);
  auto feats = torch::einsum("bkhw,bkd->bdhw", {blob_w, style}) +
               weights.select(1, k_blobs).unsqueeze(1) * background.unsqueeze(-1).unsqueeze(-1);
  return {feats, weights};
}

BlobLatent edit_blob(const BlobLatent& z, int64_t k, const BlobEdit& edit, std::optional<int64_t> batch_index) {
  if (k < 0 || k >= z.num_blobs())
    throw std::out_of_range("edit_blob: blob index " + std::to_string(k) + " outside [0, " +
                            std::to_string(z.num_blobs()) + ")");
  if (batch_index && (*batch_index < 0 || *batch_index >= z.batch()))
    throw std::out_of_range("edit_blob: batch index out of range");
  torch::NoGradGuard no_grad;
  BlobLatent out = z.detach().clone();
  auto rows = [&](const torch::Tensor& t) {
    return batch_index ? t.slice(0, *batch_index, *batch_index + 1) : t;
  };
  for (const auto& [field, op, value] : edit.spatial) {
    auto entry = rows(out.spatial).select(1, k).select(1, field);
    if (op == BlobEdit::Op::set)
      entry.fill_(value);
    else
      entry.add_(value);
  }
  if (edit.style) {
    if (edit.style->numel() != z.style_dim()) throw std::invalid_argument("edit_blob: style size mismatch");
    rows(out.style).select(1, k).copy_(edit.style->to(out.style.scalar_type()).view({1, -1}).expand_as(rows(out.style).select(1, k)));
  }
  return out;
}

torch::Tensor active_mask(const BlobLatent& z) { return z.spatial.select(2, kScale) > 0; }

}  // namespace octet::blob
