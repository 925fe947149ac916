#include "tomoforge/objectives.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace tomoforge {

void GanConfig::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("gan.lambda must be >= 0");
  if (n_critic < 1) throw std::invalid_argument("gan.n_critic must be >= 1");
}

namespace {

void require_equal(std::size_t a, std::size_t b, const char* op) {
  if (a != b)
    throw ShapeError(std::string(op) + ": length mismatch " + std::to_string(a) + " vs " +
                     std::to_string(b));
}

template <typename T>
std::size_t batch_of(const Var<T>& v, const char* op) {
  if (v.shape().empty() || v.dim(0) == 0) throw ShapeError(std::string(op) + ": missing batch axis");
  return v.dim(0);
}

}  // namespace

double weighted_sino_norm(std::span<const double> v, std::span<const double> sigma) {
  require_equal(v.size(), sigma.size(), "weighted_sino_norm");
  double acc = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double q = v[i] / sigma[i];
    acc += q * q;
  }
  return acc;
}

double posterior_nll(std::span<const double> y, std::span<const double> mu,
                     std::span<const double> sigma) {
  require_equal(y.size(), mu.size(), "posterior_nll");
  require_equal(y.size(), sigma.size(), "posterior_nll");
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double q = (y[i] - mu[i]) / sigma[i];
    acc += q * q + 2.0 * std::log(sigma[i]);
  }
  return acc / static_cast<double>(y.size());
}

double sigma_p_term(double sigma, double sigma_p) {
  const double q = sigma_p / sigma;
  return -2.0 * std::log(q) + q * q;
}

double pair_sigma(double y1, double y2) {
  return std::max(std::abs(y1 - y2) / std::sqrt(2.0), kSigmaFloor);
}

double kl_diversity_loss(std::span<const double> y1, std::span<const double> y2,
                         std::span<const double> mu, std::span<const double> sigma) {
  require_equal(y1.size(), y2.size(), "kl_diversity_loss");
  require_equal(y1.size(), mu.size(), "kl_diversity_loss");
  require_equal(y1.size(), sigma.size(), "kl_diversity_loss");
  double acc = 0.0;
  for (std::size_t i = 0; i < y1.size(); ++i) {
    const double q = (0.5 * (y1[i] + y2[i]) - mu[i]) / sigma[i];
    acc += q * q + sigma_p_term(sigma[i], pair_sigma(y1[i], y2[i]));
  }
  return acc;
}

template <typename T>
Var<T> weighted_sino_norm(Var<T> v, Var<T> sigma) {
  const T inv_b = T(1) / static_cast<T>(batch_of(v, "weighted_sino_norm"));
  return scale(sum(square(div(v, sigma))), inv_b);
}

template <typename T>
Var<T> posterior_nll(Var<T> y, Var<T> mu, Var<T> sigma) {
  Var<T> q = square(div(sub(y, mu), sigma));
  return mean(add(q, scale(log(sigma), T(2))));
}

template <typename T>
Var<T> kl_diversity_loss(Var<T> y1, Var<T> y2, Var<T> mu, Var<T> sigma) {
  const T inv_b = T(1) / static_cast<T>(batch_of(y1, "kl_diversity_loss"));
  Var<T> centre = sub(scale(add(y1, y2), T(0.5)), mu);
  Var<T> fit = square(div(centre, sigma));
  // sigma_p^2 = (y1 - y2)^2 / 2, floored; 2 log(sigma / sigma_p) = 2 log sigma - log sigma_p^2.
  const T floor2 = static_cast<T>(kSigmaFloor * kSigmaFloor);
  Var<T> sp2 = clamp_min(scale(square(sub(y1, y2)), T(0.5)), floor2);
  Var<T> spread = add(sub(scale(log(sigma), T(2)), log(sp2)), div(sp2, square(sigma)));
  return scale(sum(add(fit, spread)), inv_b);
}

template <typename T>
Var<T> generator_loss(Var<T> x1, Var<T> x2, Var<T> mu, Var<T> sigma, Var<T> d1, Var<T> d2,
                      const ScanGeometry& g, double lambda) {
  Var<T> kl = kl_diversity_loss(radon_forward(x1, g), radon_forward(x2, g), mu, sigma);
  Var<T> critic = scale(add(mean(d1), mean(d2)), static_cast<T>(0.5 * lambda));
  return add(kl, critic);
}

template <typename T>
Var<T> critic_loss(Var<T> d_real, Var<T> d_fake) {
  return sub(mean(d_real), mean(d_fake));
}

template <typename T>
Var<T> refinement_objective(Var<T> x, Var<T> mu, Var<T> sigma, Var<T> d, const ScanGeometry& g,
                            double lambda) {
  Var<T> fit = weighted_sino_norm(sub(radon_forward(x, g), mu), sigma);
  return add(fit, scale(mean(d), static_cast<T>(lambda)));
}

template <typename T>
void project_to_sphere(Tensor<T>& z) {
  double n2 = 0.0;
  for (T v : z.values()) n2 += static_cast<double>(v) * v;
  const double n = std::sqrt(n2);
  if (!(n > 0.0) || !std::isfinite(n)) throw NumericError("project_to_sphere: zero or non-finite vector");
  for (T& v : z.values()) v = static_cast<T>(v / n);
}

template <typename T>
Tensor<T> sample_latent_sphere(const Shape& shape, RandomStream& rng) {
  Tensor<T> z(shape);
  if (z.numel() == 0) throw ShapeError("sample_latent_sphere: empty shape");
  for (T& v : z.values()) v = static_cast<T>(rng.normal());
  project_to_sphere(z);
  return z;
}

#define TOMOFORGE_INSTANTIATE_OBJECTIVES(T)                                                    \
  template Var<T> weighted_sino_norm(Var<T>, Var<T>);                                          \
  template Var<T> posterior_nll(Var<T>, Var<T>, Var<T>);                                       \
  template Var<T> kl_diversity_loss(Var<T>, Var<T>, Var<T>, Var<T>);                           \
  template Var<T> generator_loss(Var<T>, Var<T>, Var<T>, Var<T>, Var<T>, Var<T>,               \
                                 const ScanGeometry&, double);                                 \
  template Var<T> critic_loss(Var<T>, Var<T>);                                                 \
  template Var<T> refinement_objective(Var<T>, Var<T>, Var<T>, Var<T>, const ScanGeometry&,    \
                                       double);                                                \
  template void project_to_sphere(Tensor<T>&);                                                 \
  template Tensor<T> sample_latent_sphere(const Shape&, RandomStream&);

TOMOFORGE_INSTANTIATE_OBJECTIVES(float)
TOMOFORGE_INSTANTIATE_OBJECTIVES(double)

}  // namespace tomoforge
