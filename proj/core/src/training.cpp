#include "tomoforge/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>
#include <stdexcept>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "tomoforge/checkpoint.hpp"
#include "tomoforge/metrics.hpp"

namespace tomoforge {

namespace {

// Stream ids separating the uses of the master seed.
constexpr std::uint64_t kTrainNoise = 0x7452;
constexpr std::uint64_t kHeldoutNoise = 0x4844;
constexpr std::uint64_t kIidValues = 0x4949;
constexpr std::uint64_t kLatent = 0x5a5a;
constexpr std::uint64_t kHeldoutPhantoms = 0x9e3779b97f4a7c15ULL;

std::uint64_t signal_key(double s) { return std::bit_cast<std::uint64_t>(s); }

/// Turns gradients off for every parameter of a store while alive.
class Freeze {
 public:
  explicit Freeze(ParamStore<float>& store) {
    for (auto* p : store.all())
      if (p->trainable) {
        p->trainable = false;
        frozen_.push_back(p);
      }
  }
  ~Freeze() {
    for (auto* p : frozen_) p->trainable = true;
  }
  Freeze(const Freeze&) = delete;
  Freeze& operator=(const Freeze&) = delete;

 private:
  std::vector<Parameter<float>*> frozen_;
};

void check_finite(double v, const char* what, std::int64_t step) {
  if (!std::isfinite(v))
    throw NumericError(std::string(what) + " became non-finite at step " + std::to_string(step));
}

Tensor<float> clean_tensor(const Batch& b) {
  Tensor<float> t(Shape{b.size, 1, b.rows(), b.cols()});
  for (std::size_t i = 0; i < b.clean.size(); ++i) t[i] = static_cast<float>(b.clean[i]);
  return t;
}

double scalar(const Var<float>& v) { return static_cast<double>(v.value()[0]); }

void finish_step(RunState& state, const TrainConfig& cfg, const TrainHooks& hooks, StepLog log) {
  ++state.step;
  log.step = state.step;
  if (hooks.on_step) hooks.on_step(log);
  if (hooks.on_checkpoint && (state.step % cfg.checkpoint_every == 0 || state.step == cfg.steps))
    hooks.on_checkpoint(state.step);
}

std::size_t circle_pixels(int n) {
  const auto& m = circle_mask_tensor<float>(n);
  return static_cast<std::size_t>(std::count(m.values().begin(), m.values().end(), 1.0f));
}

}  // namespace

// ---- data --------------------------------------------------------------------

void DataConfig::validate() const {
  noise.validate();
  if (train_phantoms < 1) throw ConfigError("phantom.train_count", "need at least one training phantom");
  if (!(prior.hi > prior.lo) || !(prior.step > 0)) throw ConfigError("posterior.y_lo", "bad posterior prior grid");
  if (phantom.min_ellipses < 0 || phantom.max_ellipses < phantom.min_ellipses)
    throw ConfigError("phantom.min_ellipses", "ellipse count range is empty");
}

Array2<double> Batch::image(std::size_t b) const {
  const int n = geometry.image_size;
  Array2<double> out(n, n);
  const std::size_t np = geometry.image_pixels();
  for (std::size_t i = 0; i < np; ++i) out.values()[i] = images[b * np + i];
  return out;
}

SensorReadings Batch::reading(std::size_t b) const {
  SensorReadings r(geometry, noise);
  std::copy_n(readings.begin() + static_cast<std::ptrdiff_t>(b * entries()), entries(), r.values().begin());
  return r;
}

Sinogram<double> Batch::clean_sinogram(std::size_t b) const {
  return Sinogram<double>(geometry, std::span<const double>(clean).subspan(b * entries(), entries()));
}

SceneSimulator::SceneSimulator(ScanGeometry g, DataConfig d, std::uint64_t seed)
    : geom_(g), data_(std::move(d)), seed_(seed) {
  geom_.validate();
  data_.validate();
}

Batch SceneSimulator::simulate(std::vector<ImageGrid<double>> images, std::vector<std::uint64_t> ids, double s,
                               const RandomStream& noise) const {
  Batch b;
  b.size = images.size();
  b.geometry = geom_;
  b.noise = data_.noise;
  b.noise.s = s;
  b.noise.validate();
  b.ids = std::move(ids);
  const std::size_t np = geom_.image_pixels(), ne = geom_.sinogram_entries();
  b.images = Tensor<float>(Shape{b.size, 1, static_cast<std::size_t>(geom_.image_size),
                                 static_cast<std::size_t>(geom_.image_size)});
  b.clean.resize(b.size * ne);
  b.readings.resize(b.size * ne);
  for (std::size_t i = 0; i < b.size; ++i) {
    const auto& img = images[i];
    for (std::size_t p = 0; p < np; ++p) b.images[i * np + p] = static_cast<float>(img.values()[p]);
    const auto sino = forward_project(img, geom_);
    std::copy(sino.values().begin(), sino.values().end(), b.clean.begin() + static_cast<std::ptrdiff_t>(i * ne));
    const auto r = simulate_readings(sino, b.noise, noise.substream(i));
    std::copy(r.values().begin(), r.values().end(), b.readings.begin() + static_cast<std::ptrdiff_t>(i * ne));
  }
  return b;
}

Batch SceneSimulator::train_batch(std::int64_t step, int batch_size, double s, std::uint64_t stream) const {
  std::vector<ImageGrid<double>> images;
  std::vector<std::uint64_t> ids;
  const auto total = static_cast<std::uint64_t>(data_.train_phantoms);
  // Spread the critic's extra batches over the set as well.
  const std::uint64_t base = (static_cast<std::uint64_t>(step) * (stream + 1) + stream * 7919) *
                             static_cast<std::uint64_t>(batch_size);
  for (int i = 0; i < batch_size; ++i) {
    const std::uint64_t id = (base + static_cast<std::uint64_t>(i)) % total;
    images.push_back(make_phantom(geom_.image_size, data_.phantom, id));
    ids.push_back(id);
  }
  const RandomStream noise =
      RandomStream(seed_, kTrainNoise).substream(static_cast<std::uint64_t>(step)).substream(stream);
  return simulate(std::move(images), std::move(ids), s, noise);
}

Batch SceneSimulator::heldout_batch(std::uint64_t first, int count, double s) const {
  PhantomSpec spec = data_.phantom;
  spec.seed ^= kHeldoutPhantoms;
  std::vector<ImageGrid<double>> images;
  std::vector<std::uint64_t> ids;
  for (int i = 0; i < count; ++i) {
    images.push_back(make_phantom(geom_.image_size, spec, first + static_cast<std::uint64_t>(i)));
    ids.push_back(first + static_cast<std::uint64_t>(i));
  }
  // Per-id noise so batching does not change the draws.
  Batch b;
  for (int i = 0; i < count; ++i) {
    const RandomStream noise = RandomStream(seed_, kHeldoutNoise).substream(ids[i]).substream(signal_key(s));
    Batch one = simulate({images[i]}, {ids[i]}, s, noise.substream(0));
    if (i == 0) {
      b = std::move(one);
      continue;
    }
    Tensor<float> merged(Shape{b.size + 1, 1, b.images.dim(2), b.images.dim(3)});
    std::copy(b.images.values().begin(), b.images.values().end(), merged.values().begin());
    std::copy(one.images.values().begin(), one.images.values().end(),
              merged.values().begin() + static_cast<std::ptrdiff_t>(b.images.numel()));
    b.images = std::move(merged);
    b.clean.insert(b.clean.end(), one.clean.begin(), one.clean.end());
    b.readings.insert(b.readings.end(), one.readings.begin(), one.readings.end());
    b.ids.push_back(one.ids[0]);
    ++b.size;
  }
  return b;
}

Batch SceneSimulator::iid_batch(std::int64_t step, int batch_size, double s, std::uint64_t stream) const {
  Batch b;
  b.size = static_cast<std::size_t>(batch_size);
  b.geometry = geom_;
  b.noise = data_.noise;
  b.noise.s = s;
  b.noise.validate();
  const std::size_t ne = geom_.sinogram_entries();
  b.clean.resize(b.size * ne);
  b.readings.resize(b.size * ne);
  const RandomStream root =
      RandomStream(seed_, kIidValues).substream(static_cast<std::uint64_t>(step)).substream(stream);
  for (std::size_t i = 0; i < b.size; ++i) {
    b.ids.push_back(i);
    RandomStream values = root.substream(2 * i);
    Sinogram<double> y(geom_);
    for (auto& v : y.values()) v = data_.prior.lo + (data_.prior.hi - data_.prior.lo) * values.uniform();
    const auto r = simulate_readings(y, b.noise, root.substream(2 * i + 1));
    std::copy(y.values().begin(), y.values().end(), b.clean.begin() + static_cast<std::ptrdiff_t>(i * ne));
    std::copy(r.values().begin(), r.values().end(), b.readings.begin() + static_cast<std::ptrdiff_t>(i * ne));
  }
  return b;
}

Batch SceneSimulator::posterior_batch(std::int64_t step, int batch_size, double s, std::uint64_t stream) const {
  return data_.posterior_data == PosteriorData::iid ? iid_batch(step, batch_size, s, stream)
                                                    : train_batch(step, batch_size, s, stream);
}

Batch SceneSimulator::from_images(const std::vector<ImageGrid<double>>& images, double s,
                                  const RandomStream& noise) const {
  std::vector<std::uint64_t> ids(images.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  return simulate(images, std::move(ids), s, noise);
}

// ---- posterior estimates --------------------------------------------------------

PixelPosterior OraclePosterior::at(std::int32_t r, const NoiseParams& p) const {
  const Key key{p.s, p.epsilon, p.k, p.b, r};
  {
    std::lock_guard lock(mutex_);
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
  }
  PixelPosterior post;
  try {
    post = posterior_oracle_pixel(r, p, grid_);
  } catch (const std::domain_error&) {
    // Reading impossible under the prior: the likelihood favours the end
    // whose expected count is nearer.
    const double expected_lo = p.photon_mean(grid_.lo) / p.k;
    post.mu = static_cast<double>(r) > expected_lo ? grid_.lo : grid_.hi;
    post.sigma = grid_.step;
    post.boundary_mass = 1.0;
  }
  post.sigma = std::max(post.sigma, kSigmaFloor);
  std::lock_guard lock(mutex_);
  cache_.emplace(key, post);
  return post;
}

PosteriorEstimate OraclePosterior::estimate(const Batch& b) const {
  PosteriorEstimate e{Tensor<float>(Shape{b.size, 1, b.rows(), b.cols()}),
                      Tensor<float>(Shape{b.size, 1, b.rows(), b.cols()})};
  for (std::size_t i = 0; i < b.readings.size(); ++i) {
    const auto post = at(b.readings[i], b.noise);
    e.mu[i] = static_cast<float>(post.mu);
    e.sigma[i] = static_cast<float>(post.sigma);
  }
  return e;
}

NetPosterior::NetPosterior(const PosteriorNet<float>* mu, const PosteriorNet<float>* sigma) : mu_(mu), sigma_(sigma) {
  if (!mu_) throw std::invalid_argument("NetPosterior: mu network required");
}

PosteriorEstimate NetPosterior::estimate(const Batch& b) const {
  Tape<float> tape;
  auto x = tape.constant(batch_features(b));
  PosteriorEstimate e;
  auto out = mu_->forward(x);
  e.mu = out.mu.value();
  if (sigma_ == mu_ && out.sigma.valid()) {
    e.sigma = out.sigma.value();
  } else if (sigma_) {
    e.sigma = sigma_->forward(x).sigma.value();
  } else {
    e.sigma = Tensor<float>(e.mu.shape(), 1.0f);
  }
  return e;
}

Tensor<float> batch_features(const Batch& b) {
  return posterior_features<float>(b.readings, b.size, b.rows(), b.cols(), b.noise);
}

Tensor<float> batch_embedding(const Batch& b, const ModelDescriptor& d) {
  return embed_readings<float>(b.readings, b.size, b.rows(), b.cols(), d.bits, d.embedding);
}

// ---- training ------------------------------------------------------------------

double TrainConfig::signal_at(std::int64_t step) const {
  return signal_ladder[static_cast<std::size_t>(step) % signal_ladder.size()];
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train.batch_size", "batch_size must be positive");
  if (steps < 0) throw ConfigError("train.steps", "steps must be >= 0");
  if (signal_ladder.empty()) throw ConfigError("noise.signal_ladder", "signal ladder is empty");
  if (checkpoint_every < 1) throw ConfigError("train.checkpoint_every", "checkpoint_every must be positive");
  if (!(schedule.peak > 0) || schedule.warmup_batches < 0 || schedule.halve_every < 1)
    throw ConfigError("train.lr_peak", "bad learning-rate schedule");
}

void train_posterior_mu(PosteriorNet<float>& mu, const SceneSimulator& sim, const TrainConfig& cfg, RunState& state,
                        const TrainHooks& hooks) {
  cfg.validate();
  auto params = mu.store().trainable();
  while (state.step < cfg.steps) {
    const std::int64_t step = state.step;
    const double s = cfg.signal_at(step);
    const Batch b = sim.posterior_batch(step, cfg.batch_size, s);
    Tape<float> tape;
    auto out = mu.forward(tape.constant(batch_features(b)));
    auto loss = mean(square(out.mu - tape.constant(clean_tensor(b))));
    check_finite(scalar(loss), "posterior mu loss", step);
    mu.store().zero_grad();
    tape.backward(loss);
    const double lr = lr_at(step, cfg.schedule);
    auto& opt = state.optim["mu"];
    opt.hyper = cfg.adam;
    adam_step<float>(params, opt, lr);
    finish_step(state, cfg, hooks, {0, s, lr, scalar(loss), 0});
  }
}

void train_posterior_sigma(PosteriorNet<float>& sigma, const PosteriorNet<float>& mu, const SceneSimulator& sim,
                           const TrainConfig& cfg, RunState& state, const TrainHooks& hooks) {
  cfg.validate();
  auto params = sigma.store().trainable();
  while (state.step < cfg.steps) {
    const std::int64_t step = state.step;
    const double s = cfg.signal_at(step);
    const Batch b = sim.posterior_batch(step, cfg.batch_size, s);
    const Tensor<float> feats = batch_features(b);
    Tensor<float> mu_value;
    {
      Tape<float> frozen;
      mu_value = mu.forward(frozen.constant(feats)).mu.value();
    }
    Tape<float> tape;
    auto out = sigma.forward(tape.constant(feats));
    auto loss = posterior_nll(tape.constant(clean_tensor(b)), tape.constant(std::move(mu_value)), out.sigma);
    check_finite(scalar(loss), "posterior sigma loss", step);
    sigma.store().zero_grad();
    tape.backward(loss);
    const double lr = lr_at(step, cfg.schedule);
    auto& opt = state.optim["sigma"];
    opt.hyper = cfg.adam;
    adam_step<float>(params, opt, lr);
    finish_step(state, cfg, hooks, {0, s, lr, scalar(loss), 0});
  }
}

void distill_posterior(PosteriorNet<float>& joint, const PosteriorNet<float>& mu, const PosteriorNet<float>& sigma,
                       const SceneSimulator& sim, const TrainConfig& cfg, RunState& state, const TrainHooks& hooks) {
  cfg.validate();
  if (joint.descriptor().kind != ModelKind::posterior_joint)
    throw ConfigError("model.kind", "distillation needs a posterior_joint student");
  const NetPosterior teacher(&mu, &sigma);
  auto params = joint.store().trainable();
  while (state.step < cfg.steps) {
    const std::int64_t step = state.step;
    const double s = cfg.signal_at(step);
    const Batch b = sim.posterior_batch(step, cfg.batch_size, s);
    auto target = teacher.estimate(b);
    Tape<float> tape;
    auto out = joint.forward(tape.constant(batch_features(b)));
    auto loss = mean(square(out.mu - tape.constant(std::move(target.mu)))) +
                mean(square(out.sigma - tape.constant(std::move(target.sigma))));
    check_finite(scalar(loss), "distillation loss", step);
    joint.store().zero_grad();
    tape.backward(loss);
    const double lr = lr_at(step, cfg.schedule);
    auto& opt = state.optim["joint"];
    opt.hyper = cfg.adam;
    adam_step<float>(params, opt, lr);
    finish_step(state, cfg, hooks, {0, s, lr, scalar(loss), 0});
  }
}

void train_recon(ReconNet<float>& model, const SceneSimulator& sim, const TrainConfig& cfg, RunState& state,
                 const TrainHooks& hooks) {
  cfg.validate();
  if (model.has_latent()) throw ConfigError("model.kind", "train_recon needs an end2end model");
  if (!(model.geometry() == sim.geometry()))
    throw ConfigError("geometry.image_size", "model and simulator geometries differ");
  auto params = model.store().trainable();
  const float inv = 1.0f / static_cast<float>(static_cast<std::size_t>(cfg.batch_size) *
                                              circle_pixels(sim.geometry().image_size));
  while (state.step < cfg.steps) {
    const std::int64_t step = state.step;
    const double s = cfg.signal_at(step);
    const Batch b = sim.train_batch(step, cfg.batch_size, s);
    Tape<float> tape;
    auto out = model.forward(tape.constant(batch_embedding(b, model.descriptor())));
    // Output and phantom are both zero outside the circle.
    auto loss = scale(sum(square(out - tape.constant(b.images))), inv);
    check_finite(scalar(loss), "reconstruction loss", step);
    model.store().zero_grad();
    tape.backward(loss);
    const double lr = lr_at(step, cfg.schedule);
    auto& opt = state.optim["recon"];
    opt.hyper = cfg.adam;
    adam_step<float>(params, opt, lr);
    finish_step(state, cfg, hooks, {0, s, lr, scalar(loss), 0});
  }
}

Tensor<float> sample_latent_batch(const ReconNet<float>& g, std::size_t batch, RandomStream& rng) {
  const Shape full = g.latent_shape(batch);
  Shape one = full;
  one[0] = 1;
  Tensor<float> z(full);
  const std::size_t per = shape_numel(one);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto zb = sample_latent_sphere<float>(one, rng);
    std::copy(zb.values().begin(), zb.values().end(), z.values().begin() + static_cast<std::ptrdiff_t>(b * per));
  }
  return z;
}

namespace {

Tensor<float> stack2(const Tensor<float>& a, const Tensor<float>& b) {
  Shape s = a.shape();
  s[0] += b.dim(0);
  Tensor<float> out(s);
  std::copy(a.values().begin(), a.values().end(), out.values().begin());
  std::copy(b.values().begin(), b.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(a.numel()));
  return out;
}

}  // namespace

void train_wgan(ReconNet<float>& g, Discriminator<float>& d, const PosteriorSource& posterior,
                const SceneSimulator& sim, const TrainConfig& cfg, const GanConfig& gan, RunState& state,
                const TrainHooks& hooks) {
  cfg.validate();
  gan.validate();
  if (cfg.batch_size < 2) throw ConfigError("train.batch_size", "GAN training needs batch_size >= 2");
  if (!g.has_latent()) throw ConfigError("model.kind", "train_wgan needs a generator");
  if (!(g.geometry() == sim.geometry()))
    throw ConfigError("geometry.image_size", "model and simulator geometries differ");
  auto g_params = g.store().trainable();
  auto d_params = d.store().trainable();
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  while (state.step < cfg.steps) {
    const std::int64_t step = state.step;
    const double s = cfg.signal_at(step);
    const double lr = lr_at(step, cfg.schedule);
    const RandomStream latent_root = RandomStream(sim.seed(), kLatent).substream(static_cast<std::uint64_t>(step));
    double critic_value = 0;

    for (int j = 0; j < gan.n_critic; ++j) {
      const Batch b = sim.train_batch(step, cfg.batch_size, s, static_cast<std::uint64_t>(j) + 1);
      RandomStream zr = latent_root.substream(static_cast<std::uint64_t>(j) + 1);
      Tensor<float> fake;
      {
        Tape<float> gt;
        fake = g.forward(gt.constant(batch_embedding(b, g.descriptor())), gt.constant(sample_latent_batch(g, batch, zr)))
                   .value();
      }
      Tape<float> tape;
      auto both = d.forward(tape.constant(stack2(b.images, fake)));
      auto loss = critic_loss(slice(both, 0, 0, batch), slice(both, 0, batch, batch));
      critic_value = scalar(loss);
      check_finite(critic_value, "critic loss", step);
      d.store().zero_grad();
      tape.backward(loss);
      auto& opt = state.optim["d"];
      opt.hyper = cfg.adam;
      adam_step<float>(d_params, opt, lr);
    }

    const Batch b = sim.train_batch(step, cfg.batch_size, s, 0);
    const auto post = posterior.estimate(b);
    RandomStream zr = latent_root.substream(0);
    const Tensor<float> z1 = sample_latent_batch(g, batch, zr);
    const Tensor<float> z2 = sample_latent_batch(g, batch, zr);
    const Tensor<float> input = batch_embedding(b, g.descriptor());
    Tape<float> tape;
    Var<float> loss;
    {
      Freeze freeze(d.store());
      auto out = g.forward(tape.constant(stack2(input, input)), tape.constant(stack2(z1, z2)));
      auto x1 = slice(out, 0, 0, batch), x2 = slice(out, 0, batch, batch);
      auto scores = d.forward(out, false);
      loss = generator_loss(x1, x2, tape.constant(post.mu), tape.constant(post.sigma), slice(scores, 0, 0, batch),
                            slice(scores, 0, batch, batch), g.geometry(), gan.lambda);
      check_finite(scalar(loss), "generator loss", step);
      g.store().zero_grad();
      tape.backward(loss);
    }
    auto& opt = state.optim["g"];
    opt.hyper = cfg.adam;
    adam_step<float>(g_params, opt, lr);
    finish_step(state, cfg, hooks, {0, s, lr, scalar(loss), critic_value});
  }
}

// ---- refinement ------------------------------------------------------------------

namespace {

Var<float> refine_forward(const ReconNet<float>& g, const Discriminator<float>& d, Tape<float>& tape,
                          const Tensor<float>& input, const Tensor<float>& mu, const Tensor<float>& sigma, Var<float> z,
                          double lambda, Tensor<float>* image) {
  auto x = g.forward(tape.constant(input), z);
  if (image) *image = x.value();
  auto score = d.forward(x, false);
  return refinement_objective(x, tape.constant(mu), tape.constant(sigma), score, g.geometry(), lambda);
}

Array2<double> first_image(const Tensor<float>& t) {
  const int n = static_cast<int>(t.dim(2));
  Array2<double> out(n, n);
  for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = t[i];
  return out;
}

double norm2(const Tensor<float>& z) {
  double acc = 0;
  for (float v : z.values()) acc += static_cast<double>(v) * v;
  return std::sqrt(acc);
}

}  // namespace

double refinement_value(const ReconNet<float>& g, const Discriminator<float>& d, const Tensor<float>& input,
                        const Tensor<float>& mu, const Tensor<float>& sigma, const Tensor<float>& z, double lambda) {
  Tape<float> tape;
  return scalar(refine_forward(g, d, tape, input, mu, sigma, tape.constant(z), lambda, nullptr));
}

RefineResult refine_reconstruction(const ReconNet<float>& g, const Discriminator<float>& d, const Tensor<float>& input,
                                   const Tensor<float>& mu, const Tensor<float>& sigma, Tensor<float> z0,
                                   const RefineConfig& cfg) {
  if (!g.has_latent()) throw ConfigError("model.kind", "refinement needs a generator");
  if (cfg.iters < 0 || cfg.snapshots < 0 || !(cfg.lr >= 0))
    throw ConfigError("refine.iters", "iters, snapshots and lr must be non-negative");
  if (input.dim(0) != 1) throw ShapeError("refine_reconstruction: one reading at a time");
  // Parameters are bound as leaves on every forward; with them marked
  // non-trainable no weight gradients are formed.
  auto& gs = const_cast<ParamStore<float>&>(g.store());
  auto& ds = const_cast<ParamStore<float>&>(d.store());
  Freeze freeze_g(gs), freeze_d(ds);

  std::vector<int> snap_at;
  for (int k = 1; k <= cfg.snapshots; ++k)
    snap_at.push_back(static_cast<int>(std::llround(static_cast<double>(k) * cfg.iters / cfg.snapshots)));

  Parameter<float> zp{"z", std::move(z0), {}, true};
  project_to_sphere(zp.value);
  OptimizerState<float> opt;
  opt.hyper = cfg.adam;
  std::vector<Parameter<float>*> zs{&zp};
  RefineResult res;
  for (int it = 0;; ++it) {
    Tape<float> tape;
    Tensor<float> image;
    auto obj = refine_forward(g, d, tape, input, mu, sigma, tape.parameter(zp), cfg.lambda, &image);
    const double v = scalar(obj);
    res.objective.push_back(v);
    res.z_norm.push_back(norm2(zp.value));
    if (!std::isfinite(v)) throw NumericError("refinement objective became non-finite at iteration " + std::to_string(it));
    if (std::find(snap_at.begin(), snap_at.end(), it) != snap_at.end()) {
      res.snapshot_iters.push_back(it);
      res.snapshots.push_back(first_image(image));
    }
    if (it == cfg.iters) {
      res.image = first_image(image);
      break;
    }
    zp.zero_grad();
    tape.backward(obj);
    adam_step<float>(zs, opt, cfg.lr);
    project_to_sphere(zp.value);
  }
  res.z = zp.value;
  return res;
}

// ---- evaluation ------------------------------------------------------------------

Reconstructor fbp_reconstructor(const PosteriorSource& posterior) {
  return [&posterior](const Batch& b) {
    const auto est = posterior.estimate(b);
    std::vector<Array2<double>> out;
    for (std::size_t i = 0; i < b.size; ++i) {
      Sinogram<double> mu(b.geometry);
      for (std::size_t e = 0; e < b.entries(); ++e) mu.values()[e] = est.mu[i * b.entries() + e];
      out.push_back(fbp_reconstruct(mu, b.geometry));
    }
    return out;
  };
}

Reconstructor model_reconstructor(const ReconNet<float>& model, std::uint64_t latent_seed) {
  return [&model, latent_seed](const Batch& b) {
    Tape<float> tape;
    auto x = tape.constant(batch_embedding(b, model.descriptor()));
    Var<float> out;
    if (model.has_latent()) {
      // One fixed draw per sample id, independent of batching.
      Tensor<float> z(model.latent_shape(b.size));
      const std::size_t per = z.numel() / b.size;
      for (std::size_t i = 0; i < b.size; ++i) {
        RandomStream rng = RandomStream(latent_seed, kLatent).substream(b.ids[i]);
        const auto zi = sample_latent_batch(model, 1, rng);
        std::copy(zi.values().begin(), zi.values().end(), z.values().begin() + static_cast<std::ptrdiff_t>(i * per));
      }
      out = model.forward(x, tape.constant(std::move(z)));
    } else {
      out = model.forward(x);
    }
    std::vector<Array2<double>> imgs;
    const std::size_t np = b.geometry.image_pixels();
    for (std::size_t i = 0; i < b.size; ++i) {
      Array2<double> img(b.geometry.image_size, b.geometry.image_size);
      for (std::size_t p = 0; p < np; ++p) img.values()[p] = out.value()[i * np + p];
      imgs.push_back(std::move(img));
    }
    return imgs;
  };
}

std::vector<EvalRow> evaluate(const std::vector<std::pair<std::string, Reconstructor>>& methods,
                              const SceneSimulator& sim, const std::vector<double>& ladder, int count, int batch) {
  if (count < 1 || batch < 1) throw ConfigError("eval.count", "count and batch must be positive");
  std::vector<EvalRow> rows;
  for (double s : ladder) {
    for (int first = 0; first < count; first += batch) {
      const int n = std::min(batch, count - first);
      const Batch b = sim.heldout_batch(static_cast<std::uint64_t>(first), n, s);
      for (const auto& [name, recon] : methods) {
        const auto imgs = recon(b);
        for (std::size_t i = 0; i < b.size; ++i) rows.push_back({b.ids[i], s, name, ssim(b.image(i), imgs[i])});
      }
    }
  }
  return rows;
}

std::map<std::pair<std::string, double>, double> mean_ssim(const std::vector<EvalRow>& rows) {
  std::map<std::pair<std::string, double>, std::pair<double, int>> acc;
  for (const auto& r : rows) {
    auto& a = acc[{r.method, r.signal_s}];
    a.first += r.ssim;
    ++a.second;
  }
  std::map<std::pair<std::string, double>, double> out;
  for (const auto& [k, v] : acc) out[k] = v.first / v.second;
  return out;
}

void write_eval_csv(const std::string& path, const std::vector<EvalRow>& rows) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << "sample_id,signal_s,method,ssim\n";
  os.precision(10);
  for (const auto& r : rows) os << r.sample_id << ',' << r.signal_s << ',' << r.method << ',' << r.ssim << '\n';
  if (!os) throw IoError("write failed: " + path);
}

// ---- checkpoints -------------------------------------------------------------------

std::string checkpoint_path(const std::string& dir, std::int64_t step) {
  return (std::filesystem::path(dir) / ("step-" + std::to_string(step) + ".tnsr")).string();
}

void save_checkpoint(const std::string& path, const std::string& run_ini, const std::vector<CheckpointModel>& models,
                     const RunState& state) {
  std::vector<NamedTensor> entries;
  std::ostringstream head;
  head << "[checkpoint]\nstep=" << state.step << "\nroles=";
  for (std::size_t i = 0; i < models.size(); ++i) head << (i ? "," : "") << models[i].role;
  head << "\n" << run_ini;
  entries.push_back(make_ini_entry(head.str()));
  for (const auto& m : models) {
    entries.push_back(make_text_entry("model:" + m.role, m.descriptor.to_ini()));
    for (auto& e : m.store->export_tensors(m.role + "/")) entries.push_back(std::move(e));
  }
  for (const auto& [role, opt] : state.optim) {
    const std::string p = "opt/" + role + "/";
    entries.push_back({p + "step", Tensor<double>(Shape{1}, static_cast<double>(opt.step))});
    for (std::size_t i = 0; i < opt.m.size(); ++i) {
      entries.push_back({p + "m/" + std::to_string(i), opt.m[i]});
      entries.push_back({p + "v/" + std::to_string(i), opt.v[i]});
    }
  }
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  write_tnsr(std::filesystem::path(path), entries);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  LoadedCheckpoint ck;
  ck.entries = read_tnsr(std::filesystem::path(path));
  const auto head = find_ini_entry(ck.entries);
  if (!head) throw IoError(path + ": no checkpoint metadata");
  namespace pt = boost::property_tree;
  pt::ptree t;
  std::istringstream is(*head);
  try {
    pt::read_ini(is, t);
  } catch (const pt::ini_parser_error& e) {
    throw IoError(path + ": bad checkpoint metadata: " + e.what());
  }
  ck.state.step = t.get<std::int64_t>("checkpoint.step", 0);
  // Everything after the [checkpoint] section is the run configuration.
  const auto pos = head->find("\n[", 1);
  ck.run_ini = pos == std::string::npos ? std::string() : head->substr(pos + 1);
  std::string roles = t.get<std::string>("checkpoint.roles", "");
  std::stringstream rs(roles);
  for (std::string role; std::getline(rs, role, ',');) {
    const auto text = find_text_entry(ck.entries, "model:" + role);
    if (!text) throw IoError(path + ": missing descriptor for " + role);
    ck.descriptors.emplace(role, ModelDescriptor::from_ini(*text));
    ck.roles.push_back(role);
  }
  for (const auto& e : ck.entries) {
    if (!e.name.starts_with("opt/") || !e.name.ends_with("/step")) continue;
    const std::string role = e.name.substr(4, e.name.size() - 9);
    auto& opt = ck.state.optim[role];
    opt.step = static_cast<std::int64_t>(e.as<double>()[0]);
    for (std::size_t i = 0;; ++i) {
      const auto* m = find_tensor(ck.entries, "opt/" + role + "/m/" + std::to_string(i));
      const auto* v = find_tensor(ck.entries, "opt/" + role + "/v/" + std::to_string(i));
      if (!m || !v) break;
      opt.m.push_back(m->as<float>());
      opt.v.push_back(v->as<float>());
    }
  }
  return ck;
}

void LoadedCheckpoint::load_params(const std::string& role, ParamStore<float>& store) const {
  store.import_tensors(entries, role + "/");
}

const ModelDescriptor& LoadedCheckpoint::descriptor(const std::string& role) const {
  auto it = descriptors.find(role);
  if (it == descriptors.end()) throw IoError("checkpoint has no model '" + role + "'");
  return it->second;
}

std::optional<std::string> latest_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) return std::nullopt;
  static const std::regex re(R"(step-(\d+)\.tnsr)");
  std::optional<std::string> best;
  long long best_step = -1;
  for (const auto& e : fs::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = e.path().filename().string();
    if (std::regex_match(name, m, re) && std::stoll(m[1]) > best_step) {
      best_step = std::stoll(m[1]);
      best = e.path().string();
    }
  }
  return best;
}

}  // namespace tomoforge
