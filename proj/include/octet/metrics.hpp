#pragma once

#include <vector>

#include <Eigen/Dense>
#include <torch/torch.h>

#include "octet/models.hpp"

namespace octet::eval {

/// LPIPS-style distance: per tap of the reference net, unit-normalize the
/// channel vector at every location, take the squared difference summed over
/// channels and averaged over locations, then sum over taps. Returns [B] and
/// is differentiable in both arguments.
torch::Tensor perceptual_distance(models::ReferenceNet& net, const torch::Tensor& a, const torch::Tensor& b);

/// Mean and covariance of a feature set (rows are samples).
struct FeatureStats {
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;
  int64_t n = 0;

  static FeatureStats from_samples(const Eigen::MatrixXd& x);
};

/// Frechet distance between Gaussian fits. The matrix square root is taken
/// through the symmetric form sqrt(A) B sqrt(A) with eigenvalues clamped at 0.
double fid(const FeatureStats& a, const FeatureStats& b);

/// Reference-net embeddings of an image set as an [N, kEmbeddingDim] matrix.
Eigen::MatrixXd embeddings(models::ReferenceNet& net, const torch::Tensor& images);
FeatureStats image_stats(models::ReferenceNet& net, const torch::Tensor& images);

/// Mean of success flags; throws std::invalid_argument for an empty list.
double success_rate(const std::vector<bool>& flags);

}  // namespace octet::eval
