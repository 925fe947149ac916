#include "tomoforge/models.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <set>
#include <sstream>

namespace tomoforge {

// ---- presets ------------------------------------------------------------------

UNetPreset UNetPreset::named(std::string_view name) {
  static const std::vector<UNetPreset> table{
      {"XXS", 32, {1, 1, 2}, {2, 1}, false},
      {"XS", 32, {1, 1, 1, 2}, {2, 2, 2}, false},
      {"S", 32, {1, 1, 1, 2, 2}, {2, 2, 2, 2}, false},
      {"S-64", 64, {1, 1, 1, 2, 2}, {2, 2, 2, 2}, false},
      {"M", 64, {2, 1, 1, 1, 1, 2}, {2, 2, 2, 2, 2}, false},
      {"L", 64, {2, 2, 2, 2, 2, 3}, {3, 3, 3, 3, 4}, false},
      {"XL", 64, {3, 3, 3, 3, 3, 5}, {4, 4, 4, 4, 4}, false},
      {"XXL", 64, {5, 5, 5, 5, 5, 9}, {6, 6, 6, 6, 6}, false},
      {"T16", 16, {1, 1, 1, 1}, {1, 1, 1}, true},
      {"T32", 16, {1, 1, 2, 2}, {2, 1, 1}, true},
  };
  for (const auto& p : table)
    if (p.name == name) return p;
  throw ConfigError("preset", "unknown U-net preset '" + std::string(name) + "'");
}

std::vector<std::string> UNetPreset::names() {
  return {"XXS", "XS", "S", "S-64", "M", "L", "XL", "XXL", "T16", "T32"};
}

void UNetPreset::validate() const {
  if (down.empty() || up.size() + 1 != down.size())
    throw ConfigError("preset", "preset " + name + ": need one fewer up block than down blocks");
  if (base_channels < 1) throw ConfigError("preset", "preset " + name + ": base_channels < 1");
  for (int n : down)
    if (n < 0) throw ConfigError("preset", "negative block count");
  for (int n : up)
    if (n < 0) throw ConfigError("preset", "negative block count");
}

void UNetPreset::check_input(std::size_t h, std::size_t w) const {
  const std::size_t f = std::size_t{1} << (levels() - 1);
  if (h % f != 0 || w % f != 0 || h / f < 1 || w / f < 1)
    throw ShapeError("preset " + name + " needs input sides divisible by " + std::to_string(f) + ", got " +
                     std::to_string(h) + "x" + std::to_string(w));
}

std::vector<BlockSpec> block_specs(const UNetPreset& p) {
  p.validate();
  std::vector<BlockSpec> out;
  for (int l = 0; l < p.levels(); ++l) out.push_back({1 << l, p.channels(l), p.down[l], false});
  for (std::size_t u = 0; u < p.up.size(); ++u) {
    const int l = p.levels() - 2 - static_cast<int>(u);
    out.push_back({1 << l, p.channels(l), p.up[u], true});
  }
  return out;
}

// ---- parameter store ---------------------------------------------------------------

template <typename T>
Parameter<T>& ParamStore<T>::add(std::string name, Tensor<T> value, bool trainable) {
  if (find(name)) throw std::logic_error("duplicate parameter " + name);
  Parameter<T> p;
  p.name = std::move(name);
  p.value = std::move(value);
  p.trainable = trainable;
  p.zero_grad();
  params_.push_back(std::move(p));
  return params_.back();
}

template <typename T>
Parameter<T>* ParamStore<T>::find(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

template <typename T>
std::vector<Parameter<T>*> ParamStore<T>::all() {
  std::vector<Parameter<T>*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

template <typename T>
std::vector<Parameter<T>*> ParamStore<T>::trainable() {
  std::vector<Parameter<T>*> out;
  for (auto& p : params_)
    if (p.trainable) out.push_back(&p);
  return out;
}

template <typename T>
std::size_t ParamStore<T>::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p.trainable) n += p.value.numel();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename T>
std::vector<NamedTensor> ParamStore<T>::export_tensors(const std::string& prefix) const {
  std::vector<NamedTensor> out;
  for (const auto& p : params_) out.push_back({prefix + p.name, p.value});
  return out;
}

template <typename T>
void ParamStore<T>::import_tensors(const std::vector<NamedTensor>& entries, const std::string& prefix) {
  for (auto& p : params_) {
    const NamedTensor* e = find_tensor(entries, prefix + p.name);
    if (!e) throw IoError("checkpoint is missing " + prefix + p.name);
    if (e->is_double() != std::is_same_v<T, double>) throw IoError("dtype mismatch for " + prefix + p.name);
    Tensor<T> v = e->as<T>();
    if (v.shape() != p.value.shape())
      throw IoError("shape mismatch for " + prefix + p.name + ": " + shape_string(v.shape()) + " vs " +
                    shape_string(p.value.shape()));
    p.value = std::move(v);
  }
}

// ---- layers ---------------------------------------------------------------------------

template <typename T>
Var<T> Conv<T>::operator()(Var<T> x) const {
  Tape<T>& t = x.tape();
  OptionalVar<T> bias;
  if (b) bias = t.parameter(*b);
  return conv2d(x, t.parameter(*w), bias, stride, padding);
}

template <typename T>
Var<T> PRelu<T>::operator()(Var<T> x) const {
  return prelu(x, x.tape().parameter(*slope));
}

template <typename T>
Var<T> ResidualBlock<T>::operator()(Var<T> x) const {
  return add(x, c2(act(c1(x))));
}

template <typename T>
Var<T> ChannelAttention<T>::gates(Var<T> x) const {
  Tape<T>& t = x.tape();
  Var<T> h = linear(global_avg_pool(x), t.parameter(*w1), t.parameter(*b1));
  h = act(h);
  return sigmoid(linear(h, t.parameter(*w2), t.parameter(*b2)));
}

template <typename T>
Var<T> ChannelAttention<T>::operator()(Var<T> x) const {
  return channel_scale(x, gates(x));
}

namespace {

constexpr double kInitSlope = 0.25;

template <typename T>
Tensor<T> he_normal(Shape s, std::size_t fan_in, double gain, RandomStream& rng) {
  Tensor<T> w(std::move(s));
  const double sd = gain * std::sqrt(2.0 / ((1.0 + kInitSlope * kInitSlope) * static_cast<double>(fan_in)));
  for (T& v : w.values()) v = static_cast<T>(sd * rng.normal());
  return w;
}

}  // namespace

template <typename T>
Conv<T> LayerFactory<T>::conv(const std::string& name, int in, int out, int k, int stride, double gain,
                              int padding) {
  Conv<T> c;
  const auto fan_in = static_cast<std::size_t>(in) * k * k;
  const Shape s{static_cast<std::size_t>(out), static_cast<std::size_t>(in), static_cast<std::size_t>(k),
                static_cast<std::size_t>(k)};
  c.w = &store.add(name + ".w", gain == 0.0 ? Tensor<T>(s) : he_normal<T>(s, fan_in, gain, rng));
  c.b = &store.add(name + ".b", Tensor<T>(Shape{static_cast<std::size_t>(out)}));
  c.stride = stride;
  c.padding = padding < 0 ? k / 2 : padding;
  return c;
}

template <typename T>
PRelu<T> LayerFactory<T>::prelu(const std::string& name, int channels) {
  return {&store.add(name + ".slope", Tensor<T>(Shape{static_cast<std::size_t>(channels)}, T(kInitSlope)))};
}

template <typename T>
ResidualBlock<T> LayerFactory<T>::residual(const std::string& name, int channels, int k) {
  ResidualBlock<T> r;
  r.c1 = conv(name + ".c1", channels, channels, k);
  r.act = prelu(name + ".act", channels);
  // Small second conv: each block starts close to the identity.
  r.c2 = conv(name + ".c2", channels, channels, k, 1, 0.1);
  return r;
}

template <typename T>
ChannelAttention<T> LayerFactory<T>::attention(const std::string& name, int channels, int reduction) {
  ChannelAttention<T> a;
  const int hidden = std::max(1, channels / reduction);
  const auto c = static_cast<std::size_t>(channels), h = static_cast<std::size_t>(hidden);
  a.w1 = &store.add(name + ".w1", he_normal<T>(Shape{h, c}, c, 1.0, rng));
  a.b1 = &store.add(name + ".b1", Tensor<T>(Shape{h}));
  a.act = prelu(name + ".act", hidden);
  a.w2 = &store.add(name + ".w2", he_normal<T>(Shape{c, h}, h, 1.0, rng));
  a.b2 = &store.add(name + ".b2", Tensor<T>(Shape{c}));
  return a;
}

template <typename T>
const Tensor<T>& positional_features(int n) {
  static std::mutex m;
  static std::map<int, Tensor<T>> cache;
  std::lock_guard lock(m);
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  if (n < 1) throw ShapeError("positional_features: n must be >= 1");
  const auto un = static_cast<std::size_t>(n);
  Tensor<T> f(Shape{4, un, un});
  const double half = 0.5 * n;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double x = (j + 0.5) / n - 0.5, y = 0.5 - (i + 0.5) / n;
      const std::size_t k = static_cast<std::size_t>(i) * un + j;
      f[k] = static_cast<T>(x);
      f[un * un + k] = static_cast<T>(y);
      f[2 * un * un + k] = static_cast<T>(std::min(1.0, std::hypot(x, y) * n / half));
      f[3 * un * un + k] = static_cast<T>(std::atan2(y, x) / std::numbers::pi);
    }
  return cache.emplace(n, std::move(f)).first->second;
}

template <typename T>
Tensor<T> circle_mask_tensor(int n) {
  const auto g = ScanGeometry::make(n, 1);
  const auto un = static_cast<std::size_t>(n);
  Tensor<T> m(Shape{1, 1, un, un});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (g.inside_circle(i, j)) m[static_cast<std::size_t>(i) * un + j] = T(1);
  return m;
}

namespace {

/// Repeats a [1, C, H, W] or [C, H, W] constant along a new batch axis.
template <typename T>
Tensor<T> repeat_batch(const Tensor<T>& t, std::size_t batch) {
  Shape s = t.shape();
  if (s.size() == 4) s.erase(s.begin());
  Shape out_shape{batch};
  out_shape.insert(out_shape.end(), s.begin(), s.end());
  Tensor<T> out(out_shape);
  for (std::size_t b = 0; b < batch; ++b) std::copy(t.values().begin(), t.values().end(), out.data() + b * t.numel());
  return out;
}

}  // namespace

// ---- U-net -----------------------------------------------------------------------------

template <typename T>
UNet<T>::UNet(const UNetPreset& preset, int in_ch, int out_ch, LayerFactory<T> f, const std::string& prefix,
              std::optional<LatentSpec> latent)
    : preset_(preset), in_ch_(in_ch), out_ch_(out_ch) {
  preset_.validate();
  const int levels = preset_.levels();
  stem_ = f.conv(prefix + "stem", in_ch, preset_.channels(0), 3);
  stem_act_ = f.prelu(prefix + "stem.act", preset_.channels(0));
  for (int l = 0; l < levels; ++l) {
    Down d;
    const std::string n = prefix + "down" + std::to_string(l);
    if (l > 0) {
      d.stride_conv = f.conv(n + ".stride", preset_.channels(l - 1), preset_.channels(l), 3, 2);
      d.act = f.prelu(n + ".act", preset_.channels(l));
    }
    for (int r = 0; r < preset_.down[l]; ++r) d.res.push_back(f.residual(n + ".res" + std::to_string(r), preset_.channels(l)));
    down_.push_back(std::move(d));
  }
  if (latent) {
    latent_block_ = static_cast<int>(preset_.up.size()) - 3;
    if (latent_block_ < 0)
      throw ConfigError("latent", "preset " + preset_.name + " has fewer than three up blocks for the latent");
    latent_ = *latent;
  }
  for (std::size_t u = 0; u < preset_.up.size(); ++u) {
    Up up;
    const int l = levels - 2 - static_cast<int>(u);
    const int c_in = preset_.channels(l + 1) + preset_.channels(l);
    const std::string n = prefix + "up" + std::to_string(u);
    if (static_cast<int>(u) == latent_block_) {
      if (latent_.channels < 1 || latent_.channels >= preset_.channels(l))
        throw ConfigError("latent", "latent channels must be in [1, " + std::to_string(preset_.channels(l)) + ")");
      up.shrink = f.conv(n + ".entry", c_in, preset_.channels(l), 3);
      up.act = f.prelu(n + ".entry.act", preset_.channels(l));
    } else {
      up.att = f.attention(n + ".att", c_in);
      up.shrink = f.conv(n + ".shrink", c_in, preset_.channels(l), 1);
    }
    for (int r = 0; r < preset_.up[u]; ++r) up.res.push_back(f.residual(n + ".res" + std::to_string(r), preset_.channels(l)));
    up_.push_back(std::move(up));
  }
  readout_ = f.conv(prefix + "readout", 3 * preset_.channels(0), out_ch, 3);
}

template <typename T>
Var<T> UNet<T>::forward(Var<T> x, OptionalVar<T> z) const {
  if (x.shape().size() != 4 || x.dim(1) != static_cast<std::size_t>(in_ch_))
    throw ShapeError("UNet " + preset_.name + ": expected [B," + std::to_string(in_ch_) + ",H,W], got " +
                     shape_string(x.shape()));
  preset_.check_input(x.dim(2), x.dim(3));
  if ((latent_block_ >= 0) != z.has_value())
    throw ShapeError(latent_block_ >= 0 ? "UNet: latent required" : "UNet: no latent block");
  const Var<T> embedding = stem_act_(stem_(x));
  std::vector<Var<T>> skips;
  Var<T> h = embedding;
  for (std::size_t l = 0; l < down_.size(); ++l) {
    const Down& d = down_[l];
    if (d.stride_conv) h = d.act((*d.stride_conv)(h));
    for (const auto& r : d.res) h = r(h);
    skips.push_back(h);
  }
  for (std::size_t u = 0; u < up_.size(); ++u) {
    const Up& up = up_[u];
    const std::size_t l = down_.size() - 2 - u;
    Var<T> cat = concat(std::vector<Var<T>>{upsample_bilinear(h, 2), skips[l]}, 1);
    if (static_cast<int>(u) == latent_block_) {
      h = up.act(up.shrink(cat));
      const std::size_t c = h.dim(1), zc = static_cast<std::size_t>(latent_.channels);
      const Var<T>& zv = *z;
      if (zv.shape().size() != 4 || zv.dim(0) != h.dim(0) || zv.dim(1) != zc || h.dim(2) % zv.dim(2) != 0 ||
          h.dim(3) % zv.dim(3) != 0 || h.dim(2) / zv.dim(2) != h.dim(3) / zv.dim(3))
        throw ShapeError("UNet: latent " + shape_string(zv.shape()) + " incompatible with block " +
                         shape_string(h.shape()));
      const int factor = static_cast<int>(h.dim(2) / zv.dim(2));
      auto parts = split(h, {c - zc, zc}, 1);
      Var<T> scaled = mul(exp(parts[1]), upsample_bilinear(zv, factor));
      h = concat(std::vector<Var<T>>{parts[0], scaled}, 1);
    } else {
      h = up.shrink(up.att(cat));
    }
    for (const auto& r : up.res) h = r(h);
  }
  return readout_(concat(std::vector<Var<T>>{embedding, skips[0], h}, 1));
}

// ---- descriptors ------------------------------------------------------------------------

std::string_view to_string(ModelKind k) {
  switch (k) {
    case ModelKind::end2end: return "end2end";
    case ModelKind::generator: return "generator";
    case ModelKind::discriminator: return "discriminator";
    case ModelKind::posterior_mu: return "posterior_mu";
    case ModelKind::posterior_sigma: return "posterior_sigma";
    case ModelKind::posterior_joint: return "posterior_joint";
  }
  return "?";
}

ModelKind model_kind_from_string(std::string_view s) {
  for (auto k : {ModelKind::end2end, ModelKind::generator, ModelKind::discriminator, ModelKind::posterior_mu,
                 ModelKind::posterior_sigma, ModelKind::posterior_joint})
    if (to_string(k) == s) return k;
  throw ConfigError("model.kind", "unknown model kind '" + std::string(s) + "'");
}

ScanGeometry ModelDescriptor::geometry() const {
  return ScanGeometry::make(image_size, n_angles, n_detectors, pixel_spacing);
}

std::string ModelDescriptor::to_ini() const {
  namespace pt = boost::property_tree;
  pt::ptree t;
  auto put = [&](const std::string& k, const auto& v) { t.put("model." + k, v); };
  put("kind", std::string(to_string(kind)));
  put("image_size", image_size);
  put("n_angles", n_angles);
  put("n_detectors", n_detectors);
  std::ostringstream ps;
  ps.precision(17);
  ps << pixel_spacing;
  put("pixel_spacing", ps.str());
  put("g1", g1);
  put("g2", g2);
  put("bridge_channels", bridge_channels);
  put("latent_channels", latent.channels);
  put("latent_height", latent.height);
  put("latent_width", latent.width);
  put("embedding", std::string(embedding == ReadingEmbedding::log ? "log" : "linear"));
  put("bits", bits);
  put("disc_channels", disc_channels);
  put("disc_depth", disc_depth);
  put("posterior_channels", posterior_channels);
  put("posterior_blocks", posterior_blocks);
  put("posterior_kernel", posterior_kernel);
  put("init_seed", init_seed);
  std::ostringstream os;
  pt::write_ini(os, t);
  return os.str();
}

ModelDescriptor ModelDescriptor::from_ini(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree t;
  std::istringstream is(text);
  try {
    pt::read_ini(is, t);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("model", std::string("model descriptor: ") + e.what());
  }
  ModelDescriptor d;
  const auto sec = t.get_child_optional("model");
  if (!sec) throw ConfigError("model", "model descriptor: missing [model] section");
  static const std::set<std::string> known{
      "kind", "image_size", "n_angles", "n_detectors", "pixel_spacing", "g1", "g2", "bridge_channels",
      "latent_channels", "latent_height", "latent_width", "embedding", "bits", "disc_channels", "disc_depth",
      "posterior_channels", "posterior_blocks", "posterior_kernel", "init_seed"};
  for (const auto& [k, v] : *sec)
    if (!known.count(k)) throw ConfigError("model." + k, "unknown model key model." + k);
  auto get = [&](const std::string& k, auto& out) {
    if (auto v = sec->get_optional<std::decay_t<decltype(out)>>(k)) out = *v;
    else if (sec->count(k)) throw ConfigError("model." + k, "bad value for model." + k);
  };
  std::string kind(to_string(d.kind)), emb = "log";
  get("kind", kind);
  d.kind = model_kind_from_string(kind);
  get("image_size", d.image_size);
  get("n_angles", d.n_angles);
  get("n_detectors", d.n_detectors);
  get("pixel_spacing", d.pixel_spacing);
  get("g1", d.g1);
  get("g2", d.g2);
  get("bridge_channels", d.bridge_channels);
  get("latent_channels", d.latent.channels);
  get("latent_height", d.latent.height);
  get("latent_width", d.latent.width);
  get("embedding", emb);
  if (emb != "log" && emb != "linear") throw ConfigError("model.embedding", "embedding must be log or linear");
  d.embedding = emb == "log" ? ReadingEmbedding::log : ReadingEmbedding::linear;
  get("bits", d.bits);
  get("disc_channels", d.disc_channels);
  get("disc_depth", d.disc_depth);
  get("posterior_channels", d.posterior_channels);
  get("posterior_blocks", d.posterior_blocks);
  get("posterior_kernel", d.posterior_kernel);
  get("init_seed", d.init_seed);
  return d;
}

template <typename T>
Tensor<T> embed_readings(std::span<const std::int32_t> r, std::size_t batch, std::size_t rows, std::size_t cols,
                         int bits, ReadingEmbedding e) {
  if (r.size() != batch * rows * cols) throw ShapeError("embed_readings: size mismatch");
  if (bits < 1 || bits > 30) throw std::invalid_argument("embed_readings: bits out of range");
  Tensor<T> out(Shape{batch, 1, rows, cols});
  const double top = static_cast<double>((std::int64_t{1} << bits) - 1);
  const double log_top = std::log(top + 1.0);
  for (std::size_t i = 0; i < r.size(); ++i)
    out[i] = static_cast<T>(e == ReadingEmbedding::linear ? r[i] / top : std::log1p(static_cast<double>(r[i])) / log_top);
  return out;
}

// ---- end-to-end / generator ----------------------------------------------------------------

template <typename T>
ReconNet<T>::ReconNet(const ModelDescriptor& d) : desc_(d), geom_(d.geometry()) {
  geom_.validate();
  if (d.kind != ModelKind::end2end && d.kind != ModelKind::generator)
    throw ConfigError("model.kind", "ReconNet needs kind end2end or generator");
  if (d.bridge_channels < 1) throw ConfigError("model.bridge_channels", "bridge_channels must be >= 1");
  const UNetPreset p1 = UNetPreset::named(d.g1), p2 = UNetPreset::named(d.g2);
  p1.check_input(static_cast<std::size_t>(geom_.n_angles), static_cast<std::size_t>(geom_.n_detectors));
  p2.check_input(static_cast<std::size_t>(geom_.image_size), static_cast<std::size_t>(geom_.image_size));
  RandomStream rng(d.init_seed);
  std::optional<LatentSpec> latent;
  if (d.kind == ModelKind::generator) {
    latent = d.latent;
    const int level = p2.levels() - 2 - (static_cast<int>(p2.up.size()) - 3);
    const int res = geom_.image_size >> level;
    if (d.latent.height < 1 || d.latent.width < 1 || res % d.latent.height != 0 || res % d.latent.width != 0 ||
        res / d.latent.height != res / d.latent.width)
      throw ConfigError("model.latent", "latent " + std::to_string(d.latent.height) + "x" +
                                            std::to_string(d.latent.width) + " does not divide block resolution " +
                                            std::to_string(res));
  }
  g1_ = UNet<T>(p1, 1, d.bridge_channels, LayerFactory<T>{store_, rng}, "g1.");
  g2_ = UNet<T>(p2, d.bridge_channels + 4, 1, LayerFactory<T>{store_, rng}, "g2.", latent);
  mask_ = circle_mask_tensor<T>(geom_.image_size);
}

template <typename T>
Shape ReconNet<T>::latent_shape(std::size_t batch) const {
  return {batch, static_cast<std::size_t>(desc_.latent.channels), static_cast<std::size_t>(desc_.latent.height),
          static_cast<std::size_t>(desc_.latent.width)};
}

template <typename T>
Var<T> ReconNet<T>::forward(Var<T> r, OptionalVar<T> z) const {
  Tape<T>& t = r.tape();
  if (r.shape().size() != 4 || r.dim(1) != 1 || r.dim(2) != static_cast<std::size_t>(geom_.n_angles) ||
      r.dim(3) != static_cast<std::size_t>(geom_.n_detectors))
    throw ShapeError("ReconNet: readings must be [B,1," + std::to_string(geom_.n_angles) + "," +
                     std::to_string(geom_.n_detectors) + "], got " + shape_string(r.shape()));
  const std::size_t batch = r.dim(0);
  Var<T> sino = g1_.forward(r);
  Var<T> bp = scale(radon_backproject(sino, geom_), static_cast<T>(std::numbers::pi / (2.0 * geom_.n_angles)));
  Var<T> pos = t.constant(repeat_batch(positional_features<T>(geom_.image_size), batch));
  Var<T> out = g2_.forward(concat(std::vector<Var<T>>{bp, pos}, 1), z);
  return mul(out, t.constant(repeat_batch(mask_, batch)));
}

// ---- discriminator ------------------------------------------------------------------------------

template <typename T>
Discriminator<T>::Discriminator(const ModelDescriptor& d) : desc_(d) {
  if (d.kind != ModelKind::discriminator) throw ConfigError("model.kind", "Discriminator needs kind discriminator");
  if (d.disc_depth < 1 || d.disc_channels < 1) throw ConfigError("model.disc_depth", "disc depth/channels must be >= 1");
  if (d.image_size % (1 << d.disc_depth) != 0)
    throw ConfigError("model.disc_depth", "image size must be divisible by 2^disc_depth");
  RandomStream rng(d.init_seed);
  LayerFactory<T> f{store_, rng};
  int in = 1;
  for (int i = 0; i < d.disc_depth; ++i) {
    const int out = d.disc_channels << std::min(i, 3);
    const std::string n = "d.conv" + std::to_string(i);
    const auto fan_in = static_cast<std::size_t>(in) * 16;
    Parameter<T>& w = store_.add(n + ".w", he_normal<T>(Shape{static_cast<std::size_t>(out), static_cast<std::size_t>(in), 4, 4}, fan_in, 1.0, rng));
    w_.push_back(&w);
    b_.push_back(&store_.add(n + ".b", Tensor<T>(Shape{static_cast<std::size_t>(out)})));
    act_.push_back(f.prelu(n + ".act", out));
    in = out;
  }
  Parameter<T>& head = store_.add("d.head.w", he_normal<T>(Shape{1, static_cast<std::size_t>(in)}, static_cast<std::size_t>(in), 1.0, rng));
  w_.push_back(&head);
  b_.push_back(&store_.add("d.head.b", Tensor<T>(Shape{1})));
  for (Parameter<T>* w : w_) {
    Parameter<T> s = make_spectral_state(w->value, rng, w->name + ".sn");
    sn_.push_back({&store_.add(s.name, s.value, false)});
  }
}

template <typename T>
std::vector<const Tensor<T>*> Discriminator<T>::weights() const {
  std::vector<const Tensor<T>*> out;
  for (const Parameter<T>* w : w_) out.push_back(&w->value);
  return out;
}

template <typename T>
Var<T> Discriminator<T>::forward(Var<T> x, bool update_sn) const {
  Tape<T>& t = x.tape();
  const auto n = static_cast<std::size_t>(desc_.image_size);
  if (x.shape() .size() != 4 || x.dim(1) != 1 || x.dim(2) != n || x.dim(3) != n)
    throw ShapeError("Discriminator: expected [B,1," + std::to_string(n) + "," + std::to_string(n) + "], got " +
                     shape_string(x.shape()));
  Var<T> h = x;
  const std::size_t convs = act_.size();
  for (std::size_t i = 0; i < convs; ++i) {
    Var<T> w = spectral_normalize(t.parameter(*w_[i]), sn_[i], 5, update_sn);
    h = act_[i](conv2d(h, w, t.parameter(*b_[i]), 2, 1));
  }
  Var<T> w = spectral_normalize(t.parameter(*w_[convs]), sn_[convs], 5, update_sn);
  return linear(global_avg_pool(h), w, t.parameter(*b_[convs]));
}

// ---- posterior nets ------------------------------------------------------------------------------

template <typename T>
Tensor<T> posterior_features(std::span<const std::int32_t> r, std::size_t batch, std::size_t rows, std::size_t cols,
                             const NoiseParams& p) {
  if (r.size() != batch * rows * cols) throw ShapeError("posterior_features: size mismatch");
  const std::size_t plane = rows * cols;
  Tensor<T> f(Shape{batch, static_cast<std::size_t>(kPosteriorFeatures), rows, cols});
  const std::int32_t top = p.max_reading();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < plane; ++i) {
      const std::int32_t v = r[b * plane + i];
      const double naive = p.s - std::log(std::max(static_cast<double>(v), 0.5) * p.k);
      T* base = f.data() + b * kPosteriorFeatures * plane + i;
      base[0] = static_cast<T>(naive / 4.0);
      base[plane] = static_cast<T>(p.s / 10.0);
      base[2 * plane] = v == 0 ? T(1) : T(0);
      base[3 * plane] = v == top ? T(1) : T(0);
    }
  return f;
}

template <typename T>
PosteriorNet<T>::PosteriorNet(const ModelDescriptor& d) : desc_(d) {
  if (d.kind != ModelKind::posterior_mu && d.kind != ModelKind::posterior_sigma && d.kind != ModelKind::posterior_joint)
    throw ConfigError("model.kind", "PosteriorNet needs a posterior kind");
  if (d.posterior_channels < 1 || d.posterior_blocks < 0 || d.posterior_kernel < 1 || d.posterior_kernel % 2 == 0)
    throw ConfigError("model.posterior", "posterior channels >= 1, blocks >= 0, odd kernel required");
  RandomStream rng(d.init_seed);
  LayerFactory<T> f{store_, rng};
  const int c = d.posterior_channels, k = d.posterior_kernel;
  stem_ = f.conv("p.stem", kPosteriorFeatures, c, k);
  act_ = f.prelu("p.stem.act", c);
  for (int i = 0; i < d.posterior_blocks; ++i) res_.push_back(f.residual("p.res" + std::to_string(i), c, k));
  if (d.kind != ModelKind::posterior_sigma) mu_head_ = f.conv("p.mu", c, 1, 1, 1, 0.0);
  if (d.kind != ModelKind::posterior_mu) sigma_head_ = f.conv("p.sigma", c, 1, 1, 1, 0.0);
}

template <typename T>
PosteriorOutput<T> PosteriorNet<T>::forward(Var<T> x) const {
  if (x.shape().size() != 4 || x.dim(1) != static_cast<std::size_t>(kPosteriorFeatures))
    throw ShapeError("PosteriorNet: expected [B,4,A,D], got " + shape_string(x.shape()));
  Var<T> h = act_(stem_(x));
  for (const auto& r : res_) h = r(h);
  PosteriorOutput<T> out;
  if (mu_head_) out.mu = add(scale(slice(x, 1, 0, 1), T(4)), (*mu_head_)(h));
  if (sigma_head_) out.sigma = add_scalar(exp((*sigma_head_)(h)), static_cast<T>(kSigmaFloor));
  return out;
}

#define TOMOFORGE_INSTANTIATE_MODELS(T)                                                                  \
  template class ParamStore<T>;                                                                          \
  template struct Conv<T>;                                                                               \
  template struct PRelu<T>;                                                                              \
  template struct ResidualBlock<T>;                                                                      \
  template struct ChannelAttention<T>;                                                                   \
  template struct LayerFactory<T>;                                                                       \
  template const Tensor<T>& positional_features<T>(int);                                                 \
  template Tensor<T> circle_mask_tensor<T>(int);                                                         \
  template class UNet<T>;                                                                                \
  template Tensor<T> embed_readings<T>(std::span<const std::int32_t>, std::size_t, std::size_t, std::size_t, \
                                       int, ReadingEmbedding);                                           \
  template class ReconNet<T>;                                                                            \
  template class Discriminator<T>;                                                                       \
  template Tensor<T> posterior_features<T>(std::span<const std::int32_t>, std::size_t, std::size_t,      \
                                           std::size_t, const NoiseParams&);                             \
  template class PosteriorNet<T>;

TOMOFORGE_INSTANTIATE_MODELS(float)
TOMOFORGE_INSTANTIATE_MODELS(double)

}  // namespace tomoforge
