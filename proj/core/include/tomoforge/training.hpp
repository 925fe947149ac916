#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <tuple>
#include <vector>

#include "tomoforge/data.hpp"
#include "tomoforge/models.hpp"
#include "tomoforge/objectives.hpp"
#include "tomoforge/optim.hpp"
#include "tomoforge/sensor.hpp"

namespace tomoforge {

// ---- data --------------------------------------------------------------------

enum class PosteriorData { iid, phantom };

struct DataConfig {
  PhantomSpec phantom;
  /// Training phantoms are indices [0, train_phantoms) of the phantom seed;
  /// held-out phantoms come from a separate seed.
  std::int64_t train_phantoms = 4096;
  NoiseParams noise;  // s is replaced by the signal level of each batch
  YGrid prior{0.0, 2.5, 1e-3};
  PosteriorData posterior_data = PosteriorData::iid;

  void validate() const;
};

/// One simulated batch at a single signal level.
struct Batch {
  std::size_t size = 0;
  ScanGeometry geometry;
  NoiseParams noise;
  std::vector<std::uint64_t> ids;
  Tensor<float> images;                // [B,1,N,N]; empty for i.i.d. sinograms
  std::vector<double> clean;           // [B,A,D] noiseless sinograms
  std::vector<std::int32_t> readings;  // [B,A,D]

  std::size_t rows() const { return static_cast<std::size_t>(geometry.n_angles); }
  std::size_t cols() const { return static_cast<std::size_t>(geometry.n_detectors); }
  std::size_t entries() const { return rows() * cols(); }
  Array2<double> image(std::size_t b) const;
  SensorReadings reading(std::size_t b) const;
  Sinogram<double> clean_sinogram(std::size_t b) const;
};

/// Phantom -> sinogram -> readings. Noise is drawn from streams keyed by
/// (seed, purpose, step, slot), so every step sees fresh readings and a
/// whole run replays from the seed.
class SceneSimulator {
 public:
  SceneSimulator(ScanGeometry g, DataConfig d, std::uint64_t seed);

  const ScanGeometry& geometry() const { return geom_; }
  const DataConfig& config() const { return data_; }
  std::uint64_t seed() const { return seed_; }

  /// Phantoms (step*B + i) mod train_phantoms, with `stream` separating uses
  /// within a step (critic vs generator batches).
  Batch train_batch(std::int64_t step, int batch_size, double s, std::uint64_t stream = 0) const;
  /// Held-out phantoms first .. first+count-1; the noise depends on (id, s) only.
  Batch heldout_batch(std::uint64_t first, int count, double s) const;
  /// Sinograms with i.i.d. entries y ~ U[prior.lo, prior.hi].
  Batch iid_batch(std::int64_t step, int batch_size, double s, std::uint64_t stream = 0) const;
  /// Posterior training batches: i.i.d. or phantom sinograms per the config.
  Batch posterior_batch(std::int64_t step, int batch_size, double s, std::uint64_t stream = 0) const;
  /// Readings for given images.
  Batch from_images(const std::vector<ImageGrid<double>>& images, double s, const RandomStream& noise) const;

 private:
  Batch simulate(std::vector<ImageGrid<double>> images, std::vector<std::uint64_t> ids, double s,
                 const RandomStream& noise) const;

  ScanGeometry geom_;
  DataConfig data_;
  std::uint64_t seed_;
};

// ---- posterior estimates --------------------------------------------------------

/// mu(r), sigma(r) for every entry of a batch, [B,1,A,D].
struct PosteriorEstimate {
  Tensor<float> mu;
  Tensor<float> sigma;
};

class PosteriorSource {
 public:
  virtual ~PosteriorSource() = default;
  virtual PosteriorEstimate estimate(const Batch& b) const = 0;
};

/// Exact per-entry posterior under the uniform prior, memoized by
/// (noise parameters, reading). Readings with zero likelihood on the grid
/// map to the nearer grid end with sigma = grid step.
class OraclePosterior : public PosteriorSource {
 public:
  explicit OraclePosterior(YGrid grid) : grid_(grid) {}
  PixelPosterior at(std::int32_t r, const NoiseParams& p) const;
  PosteriorEstimate estimate(const Batch& b) const override;
  const YGrid& grid() const { return grid_; }

 private:
  using Key = std::tuple<double, double, double, int, std::int32_t>;
  YGrid grid_;
  mutable std::mutex mutex_;
  mutable std::map<Key, PixelPosterior> cache_;
};

/// Network posterior: a joint net, or a mu net with an optional sigma net.
class NetPosterior : public PosteriorSource {
 public:
  NetPosterior(const PosteriorNet<float>* mu, const PosteriorNet<float>* sigma);
  explicit NetPosterior(const PosteriorNet<float>* joint) : NetPosterior(joint, joint) {}
  PosteriorEstimate estimate(const Batch& b) const override;

 private:
  const PosteriorNet<float>* mu_;
  const PosteriorNet<float>* sigma_;
};

Tensor<float> batch_features(const Batch& b);
Tensor<float> batch_embedding(const Batch& b, const ModelDescriptor& d);

// ---- training ------------------------------------------------------------------

struct TrainConfig {
  int batch_size = 8;
  std::int64_t steps = 2000;
  LrSchedule schedule{1e-3, 100, 800, 5.0};
  AdamHyper adam;
  std::vector<double> signal_ladder{3.0, 4.5, 6.0};
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 500;

  /// Batch b uses ladder level b mod L.
  double signal_at(std::int64_t step) const;
  void validate() const;
};

/// Step counter and optimizer states by role ("mu", "g", "d", ...).
struct RunState {
  std::int64_t step = 0;
  std::map<std::string, OptimizerState<float>> optim;
};

struct StepLog {
  std::int64_t step = 0;  // 1-based count of completed steps
  double signal_s = 0;
  double lr = 0;
  double loss = 0;
  double aux = 0;  // critic loss for the GAN, 0 elsewhere
};

struct TrainHooks {
  std::function<void(const StepLog&)> on_step;
  /// Called with the completed step count every checkpoint_every steps and at the end.
  std::function<void(std::int64_t)> on_checkpoint;
};

/// MSE of mu against the noiseless sinogram.
void train_posterior_mu(PosteriorNet<float>& mu, const SceneSimulator& sim, const TrainConfig& cfg,
                        RunState& state, const TrainHooks& hooks = {});
/// posterior_nll with mu frozen.
void train_posterior_sigma(PosteriorNet<float>& sigma, const PosteriorNet<float>& mu, const SceneSimulator& sim,
                           const TrainConfig& cfg, RunState& state, const TrainHooks& hooks = {});
/// Joint net trained by MSE on both heads against the frozen teachers.
void distill_posterior(PosteriorNet<float>& joint, const PosteriorNet<float>& mu, const PosteriorNet<float>& sigma,
                       const SceneSimulator& sim, const TrainConfig& cfg, RunState& state,
                       const TrainHooks& hooks = {});

/// Per-pixel MSE over the inscribed circle against the phantom.
void train_recon(ReconNet<float>& model, const SceneSimulator& sim, const TrainConfig& cfg, RunState& state,
                 const TrainHooks& hooks = {});

/// Per generator step: n_critic critic steps on critic_loss, then one
/// generator step on generator_loss with two latent draws per reading
/// (stacked along the batch). Throws NumericError on non-finite losses.
void train_wgan(ReconNet<float>& g, Discriminator<float>& d, const PosteriorSource& posterior,
                const SceneSimulator& sim, const TrainConfig& cfg, const GanConfig& gan, RunState& state,
                const TrainHooks& hooks = {});

/// Independent unit-sphere draws per sample, stacked to [B, zc, zh, zw].
Tensor<float> sample_latent_batch(const ReconNet<float>& g, std::size_t batch, RandomStream& rng);

// ---- refinement ------------------------------------------------------------------

struct RefineConfig {
  double lr = 1e-4;
  int iters = 200;
  double lambda = 0.05;
  int snapshots = 0;  // images kept at evenly spaced iterations, ending at the last
  AdamHyper adam;
};

struct RefineResult {
  Tensor<float> z;                  // final latent, unit norm
  std::vector<double> objective;    // objective at z_0 .. z_iters
  std::vector<double> z_norm;       // ||z_i|| for i = 0 .. iters
  std::vector<int> snapshot_iters;
  std::vector<Array2<double>> snapshots;
  Array2<double> image;             // G(r, z_final)
};

/// Minimizes ||A G(r,z) - mu||^2_sigma + lambda D(G(r,z)) over z on the unit
/// sphere: an Adam step on z, then z <- z / ||z||. Only z changes; the critic
/// runs with its stored spectral state. Throws NumericError on a non-finite
/// objective.
RefineResult refine_reconstruction(const ReconNet<float>& g, const Discriminator<float>& d, const Tensor<float>& input,
                                   const Tensor<float>& mu, const Tensor<float>& sigma, Tensor<float> z0,
                                   const RefineConfig& cfg);

/// Objective value only (no gradient).
double refinement_value(const ReconNet<float>& g, const Discriminator<float>& d, const Tensor<float>& input,
                        const Tensor<float>& mu, const Tensor<float>& sigma, const Tensor<float>& z, double lambda);

// ---- evaluation ------------------------------------------------------------------

struct EvalRow {
  std::uint64_t sample_id = 0;
  double signal_s = 0;
  std::string method;
  double ssim = 0;
};

/// Reconstructs every image of a batch.
using Reconstructor = std::function<std::vector<Array2<double>>(const Batch&)>;

/// FBP (Ram-Lak) of the posterior mean sinogram.
Reconstructor fbp_reconstructor(const PosteriorSource& posterior);
Reconstructor model_reconstructor(const ReconNet<float>& model, std::uint64_t latent_seed = 0);

/// Held-out phantoms [0, count) at every signal level, batched by `batch`.
std::vector<EvalRow> evaluate(const std::vector<std::pair<std::string, Reconstructor>>& methods,
                              const SceneSimulator& sim, const std::vector<double>& ladder, int count,
                              int batch = 8);

/// Mean SSIM per (method, signal).
std::map<std::pair<std::string, double>, double> mean_ssim(const std::vector<EvalRow>& rows);

void write_eval_csv(const std::string& path, const std::vector<EvalRow>& rows);

// ---- checkpoints -------------------------------------------------------------------

/// A model store under a role prefix plus its descriptor.
struct CheckpointModel {
  std::string role;
  ModelDescriptor descriptor;
  ParamStore<float>* store = nullptr;
};

/// "<dir>/step-<n>.tnsr"
std::string checkpoint_path(const std::string& dir, std::int64_t step);

/// Run metadata in "@ini", descriptors in "@model:<role>", parameters as
/// "<role>/<name>", Adam moments as "opt/<role>/m/<i>" and "opt/<role>/v/<i>".
void save_checkpoint(const std::string& path, const std::string& run_ini, const std::vector<CheckpointModel>& models,
                     const RunState& state);

struct LoadedCheckpoint {
  std::string run_ini;
  std::map<std::string, ModelDescriptor> descriptors;
  std::vector<std::string> roles;  // in stored order
  std::vector<NamedTensor> entries;
  RunState state;

  /// Strict parameter load for one role.
  void load_params(const std::string& role, ParamStore<float>& store) const;
  const ModelDescriptor& descriptor(const std::string& role) const;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

/// Newest step-<n>.tnsr in a directory, if any.
std::optional<std::string> latest_checkpoint(const std::string& dir);

}  // namespace tomoforge
