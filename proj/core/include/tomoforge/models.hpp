#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tomoforge/autograd.hpp"
#include "tomoforge/checkpoint.hpp"
#include "tomoforge/random.hpp"
#include "tomoforge/sensor.hpp"

namespace tomoforge {

// ---- presets ---------------------------------------------------------------

/// Residual-block counts per U-net block: `down` from full resolution to the
/// bottleneck, `up` from the first up-sampling block back to full resolution.
struct UNetPreset {
  std::string name;
  int base_channels = 32;
  std::vector<int> down;
  std::vector<int> up;
  bool desk = false;  // T16 / T32, not part of the original table

  static UNetPreset named(std::string_view name);
  static std::vector<std::string> names();

  int levels() const { return static_cast<int>(down.size()); }
  /// Channels at a level: base doubled every two strided convolutions.
  int channels(int level) const { return base_channels << (level / 2); }
  /// Throws ShapeError if an h x w input cannot be halved levels-1 times.
  void check_input(std::size_t h, std::size_t w) const;
  void validate() const;
};

struct BlockSpec {
  int resolution_divisor;  // input size / block resolution
  int channels;
  int residual_blocks;
  bool attention;          // up blocks only
};

std::vector<BlockSpec> block_specs(const UNetPreset& p);

// ---- parameters --------------------------------------------------------------

/// Owns every parameter of a model. Parameters never move once added, so
/// layers keep raw pointers into the store.
template <typename T>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;

  Parameter<T>& add(std::string name, Tensor<T> value, bool trainable = true);
  Parameter<T>* find(const std::string& name);
  std::vector<Parameter<T>*> all();
  std::vector<Parameter<T>*> trainable();
  std::size_t trainable_count() const;
  void zero_grad();

  /// Every parameter (trainable or not) under "<prefix><name>".
  std::vector<NamedTensor> export_tensors(const std::string& prefix = "") const;
  /// Strict load: every parameter must be present with the stored dtype and shape.
  void import_tensors(const std::vector<NamedTensor>& entries, const std::string& prefix = "");

 private:
  std::deque<Parameter<T>> params_;
};

// ---- layers --------------------------------------------------------------------

template <typename T>
struct Conv {
  Parameter<T>* w = nullptr;
  Parameter<T>* b = nullptr;
  int stride = 1;
  int padding = 0;
  Var<T> operator()(Var<T> x) const;
};

template <typename T>
struct PRelu {
  Parameter<T>* slope = nullptr;
  Var<T> operator()(Var<T> x) const;
};

/// conv3x3 -> PReLU -> conv3x3, plus the identity.
template <typename T>
struct ResidualBlock {
  Conv<T> c1, c2;
  PRelu<T> act;
  Var<T> operator()(Var<T> x) const;
};

/// Squeeze-excitation gates: pool -> linear C/r -> PReLU -> linear C -> sigmoid.
template <typename T>
struct ChannelAttention {
  Parameter<T>* w1 = nullptr;
  Parameter<T>* b1 = nullptr;
  Parameter<T>* w2 = nullptr;
  Parameter<T>* b2 = nullptr;
  PRelu<T> act;
  Var<T> gates(Var<T> x) const;
  Var<T> operator()(Var<T> x) const;
};

/// Builders draw He-normal weights (PReLU slope 0.25) from `rng`.
template <typename T>
struct LayerFactory {
  ParamStore<T>& store;
  RandomStream& rng;

  /// padding < 0 means k / 2.
  Conv<T> conv(const std::string& name, int in, int out, int k, int stride = 1, double gain = 1.0,
               int padding = -1);
  PRelu<T> prelu(const std::string& name, int channels);
  ResidualBlock<T> residual(const std::string& name, int channels, int k = 3);
  ChannelAttention<T> attention(const std::string& name, int channels, int reduction = 8);
};

/// Channels {x/N - 0.5, y/N - 0.5, radius / (N/2) capped at 1, atan2(y, x) / pi}
/// at pixel centres, x to the right and y up. Shape [4, N, N].
template <typename T>
const Tensor<T>& positional_features(int n);

/// Inscribed-circle mask [1, 1, N, N].
template <typename T>
Tensor<T> circle_mask_tensor(int n);

// ---- U-net -------------------------------------------------------------------

/// Where the latent enters a generator: the third-from-last block of g2.
struct LatentSpec {
  int channels = 8;
  int height = 4;
  int width = 4;
  bool operator==(const LatentSpec&) const = default;
};

template <typename T>
class UNet {
 public:
  UNet() = default;
  UNet(const UNetPreset& preset, int in_ch, int out_ch, LayerFactory<T> f, const std::string& prefix,
       std::optional<LatentSpec> latent = std::nullopt);

  /// x [B, in, H, W] -> [B, out, H, W]; z [B, zc, zh, zw] required iff built with a latent.
  Var<T> forward(Var<T> x, OptionalVar<T> z = std::nullopt) const;
  const UNetPreset& preset() const { return preset_; }
  /// Up-block index receiving the latent, or -1.
  int latent_block() const { return latent_block_; }

 private:
  struct Down {
    std::optional<Conv<T>> stride_conv;
    PRelu<T> act;
    std::vector<ResidualBlock<T>> res;
  };
  struct Up {
    ChannelAttention<T> att;
    Conv<T> shrink;  // 1x1, or the 3x3 entry conv of the latent block
    PRelu<T> act;    // latent block only
    std::vector<ResidualBlock<T>> res;
  };

  UNetPreset preset_;
  int in_ch_ = 0;
  int out_ch_ = 0;
  Conv<T> stem_;
  PRelu<T> stem_act_;
  std::vector<Down> down_;
  std::vector<Up> up_;
  Conv<T> readout_;
  int latent_block_ = -1;
  LatentSpec latent_;
};

// ---- models ----------------------------------------------------------------------

enum class ModelKind { end2end, generator, discriminator, posterior_mu, posterior_sigma, posterior_joint };
std::string_view to_string(ModelKind k);
ModelKind model_kind_from_string(std::string_view s);

enum class ReadingEmbedding { linear, log };

/// Everything needed to rebuild a model; stored as INI text in checkpoints.
struct ModelDescriptor {
  ModelKind kind = ModelKind::end2end;
  int image_size = 64;
  int n_angles = 64;
  int n_detectors = 64;
  double pixel_spacing = 2.0 / 64;
  std::string g1 = "T16";
  std::string g2 = "T32";
  int bridge_channels = 16;
  LatentSpec latent;
  ReadingEmbedding embedding = ReadingEmbedding::log;
  int bits = 16;
  int disc_channels = 16;
  int disc_depth = 5;
  int posterior_channels = 32;
  int posterior_blocks = 3;
  int posterior_kernel = 1;
  std::uint64_t init_seed = 0;

  ScanGeometry geometry() const;
  std::string to_ini() const;
  static ModelDescriptor from_ini(const std::string& text);
  friend bool operator==(const ModelDescriptor&, const ModelDescriptor&) = default;
};

/// Readings [B, A, D] (row-major ints) to the network input [B, 1, A, D]:
/// linear r / (2^b - 1) or log1p(r) / log(2^b).
template <typename T>
Tensor<T> embed_readings(std::span<const std::int32_t> r, std::size_t batch, std::size_t rows, std::size_t cols,
                         int bits, ReadingEmbedding e);

/// g(r) = g2([c A^T g1(r), positional]), circle-masked; with a latent this is
/// the generator G(r, z). c = pi / (2 n_angles) keeps the backprojection at
/// image scale.
template <typename T>
class ReconNet {
 public:
  explicit ReconNet(const ModelDescriptor& d);
  ReconNet(ReconNet&&) = default;

  Var<T> forward(Var<T> embedded_readings, OptionalVar<T> z = std::nullopt) const;
  ParamStore<T>& store() { return store_; }
  const ParamStore<T>& store() const { return store_; }
  const ModelDescriptor& descriptor() const { return desc_; }
  const ScanGeometry& geometry() const { return geom_; }
  bool has_latent() const { return desc_.kind == ModelKind::generator; }
  Shape latent_shape(std::size_t batch) const;

 private:
  ModelDescriptor desc_;
  ScanGeometry geom_;
  ParamStore<T> store_;
  UNet<T> g1_, g2_;
  Tensor<T> mask_;
};

/// Strided spectral-normalized convolutions with PReLU, global average pool
/// and a spectral-normalized linear head. Output [B, 1].
template <typename T>
class Discriminator {
 public:
  explicit Discriminator(const ModelDescriptor& d);
  Discriminator(Discriminator&&) = default;

  /// `update_sn` runs 5 power iterations per weight before normalizing
  /// (training); without it the stored vectors are used as they are.
  Var<T> forward(Var<T> x, bool update_sn = true) const;
  /// Raw weights in layer order (convolutions, then the head), matching
  /// spectral_states().
  std::vector<const Tensor<T>*> weights() const;
  std::vector<SpectralState<T>> spectral_states() const { return sn_; }
  ParamStore<T>& store() { return store_; }
  const ParamStore<T>& store() const { return store_; }
  const ModelDescriptor& descriptor() const { return desc_; }

 private:
  ModelDescriptor desc_;
  ParamStore<T> store_;
  std::vector<Parameter<T>*> w_;
  std::vector<Parameter<T>*> b_;
  std::vector<PRelu<T>> act_;
  std::vector<SpectralState<T>> sn_;
};

/// Per-entry input of the posterior networks, [B, 4, A, D]:
/// naive estimate (s - log(max(r, 0.5) k)) / 4, s / 10, r == 0, r == 2^b - 1.
template <typename T>
Tensor<T> posterior_features(std::span<const std::int32_t> r, std::size_t batch, std::size_t rows,
                             std::size_t cols, const NoiseParams& p);

inline constexpr int kPosteriorFeatures = 4;

template <typename T>
struct PosteriorOutput {
  Var<T> mu;     // invalid for a sigma-only net
  Var<T> sigma;  // invalid for a mu-only net
};

/// Residual CNN on sinogram entries. mu = naive estimate + head; sigma =
/// exp(head) + kSigmaFloor. Heads start at zero.
template <typename T>
class PosteriorNet {
 public:
  explicit PosteriorNet(const ModelDescriptor& d);
  PosteriorNet(PosteriorNet&&) = default;

  PosteriorOutput<T> forward(Var<T> features) const;
  ParamStore<T>& store() { return store_; }
  const ParamStore<T>& store() const { return store_; }
  const ModelDescriptor& descriptor() const { return desc_; }

 private:
  ModelDescriptor desc_;
  ParamStore<T> store_;
  Conv<T> stem_;
  PRelu<T> act_;
  std::vector<ResidualBlock<T>> res_;
  std::optional<Conv<T>> mu_head_, sigma_head_;
};

}  // namespace tomoforge
