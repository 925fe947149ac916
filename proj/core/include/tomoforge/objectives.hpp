#pragma once

#include <cstddef>
#include <span>

#include "tomoforge/autograd.hpp"
#include "tomoforge/random.hpp"
#include "tomoforge/sensor.hpp"

namespace tomoforge {

struct GanConfig {
  double lambda = 0.05;
  /// Informational: each critic layer is normalized to Lipschitz constant 1.
  double critic_lip = 1.0;
  int n_critic = 5;

  void validate() const;
};

// ---- scalar reference forms (double, any equal-length spans) ---------------

/// sum_i (v_i / sigma_i)^2
double weighted_sino_norm(std::span<const double> v, std::span<const double> sigma);

/// mean_i [(y_i - mu_i)^2 / sigma_i^2 + 2 log sigma_i]
double posterior_nll(std::span<const double> y, std::span<const double> mu,
                     std::span<const double> sigma);

/// 2 log(sigma / sigma_p) + (sigma_p / sigma)^2; at least 1, equal to 1 iff sigma_p == sigma.
double sigma_p_term(double sigma, double sigma_p);

/// sqrt((y1 - y2)^2 / 2) floored at kSigmaFloor.
double pair_sigma(double y1, double y2);

/// ||(y1 + y2)/2 - mu||^2_sigma + sum_i sigma_p_term(sigma_i, sigma_p_i).
double kl_diversity_loss(std::span<const double> y1, std::span<const double> y2,
                         std::span<const double> mu, std::span<const double> sigma);

// ---- graph forms --------------------------------------------------------------
// Inputs are [B, ...]; sums run over every non-batch entry and the result is
// averaged over the batch (the expectation over readings).

template <typename T>
Var<T> weighted_sino_norm(Var<T> v, Var<T> sigma);

/// Mean over all entries, matching the scalar form.
template <typename T>
Var<T> posterior_nll(Var<T> y, Var<T> mu, Var<T> sigma);

template <typename T>
Var<T> kl_diversity_loss(Var<T> y1, Var<T> y2, Var<T> mu, Var<T> sigma);

/// kl_diversity_loss(A x1, A x2, mu, sigma) + lambda * mean_b (D(x1) + D(x2)) / 2.
/// x1, x2: [B,1,N,N] generator outputs for two latent draws; d1, d2: [B,1]
/// critic scores of those outputs.
template <typename T>
Var<T> generator_loss(Var<T> x1, Var<T> x2, Var<T> mu, Var<T> sigma, Var<T> d1, Var<T> d2,
                      const ScanGeometry& g, double lambda);

/// mean D(real) - mean D(fake); the critic descends this value.
template <typename T>
Var<T> critic_loss(Var<T> d_real, Var<T> d_fake);

/// ||A x - mu||^2_sigma + lambda * D(x), averaged over the batch.
template <typename T>
Var<T> refinement_objective(Var<T> x, Var<T> mu, Var<T> sigma, Var<T> d, const ScanGeometry& g,
                            double lambda);

// ---- latent sphere --------------------------------------------------------------

/// Gaussian draw normalized to unit l2 norm over all elements.
template <typename T>
Tensor<T> sample_latent_sphere(const Shape& shape, RandomStream& rng);

/// z / ||z||; throws NumericError for a zero or non-finite vector.
template <typename T>
void project_to_sphere(Tensor<T>& z);

}  // namespace tomoforge
