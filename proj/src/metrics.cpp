#include "octet/metrics.hpp"

#include <cmath>
#include <sstream>

namespace octet::eval {

namespace {

torch::Tensor unit_channels(const torch::Tensor& t) {
  return t / torch::sqrt(t.pow(2).sum(1, true) + 1e-10);
}

}  // namespace

torch::Tensor perceptual_distance(models::ReferenceNet& net, const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes()) throw std::invalid_argument("perceptual_distance: image shapes differ");
  auto ta = net->run(a).taps;
  auto tb = net->run(b).taps;
  auto d = torch::zeros({a.size(0)}, a.options());
  for (size_t l = 0; l < ta.size(); ++l)
    d = d + (unit_channels(ta[l]) - unit_channels(tb[l])).pow(2).sum(1).mean({1, 2});
  return d;
}

FeatureStats FeatureStats::from_samples(const Eigen::MatrixXd& x) {
  if (x.rows() < 2) throw std::invalid_argument("FeatureStats: need at least two samples");
  FeatureStats s;
  s.n = x.rows();
  s.mu = x.colwise().mean();
  Eigen::MatrixXd centered = x.rowwise() - s.mu.transpose();
  s.sigma = (centered.transpose() * centered) / static_cast<double>(s.n - 1);
  return s;
}

double fid(const FeatureStats& a, const FeatureStats& b) {
  if (a.mu.size() != b.mu.size() || a.sigma.rows() != b.sigma.rows())
    throw std::invalid_argument("fid: feature dimensions differ");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(0.5 * (a.sigma + a.sigma.transpose()));
  if (ea.info() != Eigen::Success) throw std::runtime_error("fid: eigendecomposition of the first covariance failed");
  Eigen::VectorXd la = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  Eigen::MatrixXd root_a = ea.eigenvectors() * la.asDiagonal() * ea.eigenvectors().transpose();
  Eigen::MatrixXd m = root_a * b.sigma * root_a;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(0.5 * (m + m.transpose()));
  if (em.info() != Eigen::Success) {
    std::ostringstream msg;
    msg << "fid: eigendecomposition of the product failed (dim " << m.rows() << ", trace " << m.trace() << ")";
    throw std::runtime_error(msg.str());
  }
  const double tr_sqrt = em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (a.mu - b.mu).squaredNorm() + a.sigma.trace() + b.sigma.trace() - 2.0 * tr_sqrt;
  if (!std::isfinite(d)) throw std::runtime_error("fid: non-finite result");
  return std::max(d, 0.0);
}

Eigen::MatrixXd embeddings(models::ReferenceNet& net, const torch::Tensor& images) {
  auto e = models::batched(images, 128, [&](const torch::Tensor& x) { return net->run(x).embedding; })
               .to(torch::kFloat64)
               .contiguous();
  Eigen::MatrixXd out(e.size(0), e.size(1));
  auto acc = e.accessor<double, 2>();
  for (int64_t i = 0; i < e.size(0); ++i)
    for (int64_t j = 0; j < e.size(1); ++j) out(i, j) = acc[i][j];
  return out;
}

FeatureStats image_stats(models::ReferenceNet& net, const torch::Tensor& images) {
  return FeatureStats::from_samples(embeddings(net, images));
}

double success_rate(const std::vector<bool>& flags) {
  if (flags.empty()) throw std::invalid_argument("success_rate: no results");
  double n = 0;
  for (bool f : flags) n += f ? 1.0 : 0.0;
  return n / static_cast<double>(flags.size());
}

}  // namespace octet::eval
