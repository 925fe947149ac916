#include "run_config.hpp"

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace tomoforge::cli {

namespace {

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <typename I>
I parse_int(const std::string& key, const std::string& v) {
  I out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key, "bad integer for " + key + ": '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError(key, "bad number for " + key + ": '" + v + "'");
}

std::string choice(const std::string& key, const std::string& v, std::initializer_list<const char*> allowed) {
  for (const char* a : allowed)
    if (v == a) return v;
  std::string list;
  for (const char* a : allowed) list += std::string(list.empty() ? "" : "|") + a;
  throw ConfigError(key, key + " must be one of " + list + ", got '" + v + "'");
}

std::string ladder_string(const std::vector<double>& l) {
  std::string s;
  for (double v : l) s += (s.empty() ? "" : ",") + fmt(v);
  return s;
}

std::vector<double> parse_ladder(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(parse_double(key, item));
  if (out.empty()) throw ConfigError(key, key + " is empty");
  return out;
}

#define TF_INT(k, expr)                                                                              \
  Field{k, [](const RunConfig& c) { return std::to_string(c.expr); },                                \
        [](RunConfig& c, const std::string& v) { c.expr = parse_int<std::decay_t<decltype(c.expr)>>(k, v); }}
#define TF_DBL(k, expr)                                                                              \
  Field{k, [](const RunConfig& c) { return fmt(c.expr); },                                           \
        [](RunConfig& c, const std::string& v) { c.expr = parse_double(k, v); }}
#define TF_STR(k, expr)                                                                              \
  Field{k, [](const RunConfig& c) { return c.expr; }, [](RunConfig& c, const std::string& v) { c.expr = v; }}

const std::vector<Field>& fields() {
  static const std::vector<Field> f{
      Field{"run.profile", [](const RunConfig& c) { return c.profile; },
            [](RunConfig& c, const std::string& v) { c.profile = choice("run.profile", v, {"desk", "paper"}); }},
      TF_INT("run.seed", seed),

      TF_INT("geometry.image_size", geometry.image_size),
      TF_INT("geometry.n_angles", geometry.n_angles),
      TF_INT("geometry.n_detectors", geometry.n_detectors),
      TF_DBL("geometry.pixel_spacing", geometry.pixel_spacing),

      TF_DBL("noise.s", data.noise.s),
      TF_DBL("noise.epsilon", data.noise.epsilon),
      TF_DBL("noise.k", data.noise.k),
      TF_INT("noise.bits", data.noise.b),
      Field{"noise.signal_ladder", [](const RunConfig& c) { return ladder_string(c.train.signal_ladder); },
            [](RunConfig& c, const std::string& v) { c.train.signal_ladder = parse_ladder("noise.signal_ladder", v); }},

      Field{"phantom.kind",
            [](const RunConfig& c) {
              return std::string(c.data.phantom.kind == PhantomSpec::Kind::shepp_logan ? "shepp_logan"
                                                                                     : "random_ellipses");
            },
            [](RunConfig& c, const std::string& v) {
              c.data.phantom.kind = choice("phantom.kind", v, {"shepp_logan", "random_ellipses"}) == "shepp_logan"
                                        ? PhantomSpec::Kind::shepp_logan
                                        : PhantomSpec::Kind::random_ellipses;
            }},
      TF_INT("phantom.min_ellipses", data.phantom.min_ellipses),
      TF_INT("phantom.max_ellipses", data.phantom.max_ellipses),
      TF_DBL("phantom.intensity_lo", data.phantom.intensity_lo),
      TF_DBL("phantom.intensity_hi", data.phantom.intensity_hi),
      TF_INT("phantom.seed", data.phantom.seed),
      TF_INT("phantom.train_count", data.train_phantoms),

      TF_DBL("posterior.y_lo", data.prior.lo),
      TF_DBL("posterior.y_hi", data.prior.hi),
      TF_DBL("posterior.y_step", data.prior.step),
      Field{"posterior.data",
            [](const RunConfig& c) { return std::string(c.data.posterior_data == PosteriorData::iid ? "iid" : "phantom"); },
            [](RunConfig& c, const std::string& v) {
              c.data.posterior_data =
                  choice("posterior.data", v, {"iid", "phantom"}) == "iid" ? PosteriorData::iid : PosteriorData::phantom;
            }},
      Field{"posterior.source",
            [](const RunConfig& c) {
              return std::string(c.posterior_source == PosteriorSourceKind::oracle ? "oracle" : "net");
            },
            [](RunConfig& c, const std::string& v) {
              c.posterior_source = choice("posterior.source", v, {"oracle", "net"}) == "oracle"
                                       ? PosteriorSourceKind::oracle
                                       : PosteriorSourceKind::net;
            }},
      TF_INT("posterior.channels", model.posterior_channels),
      TF_INT("posterior.blocks", model.posterior_blocks),
      TF_INT("posterior.kernel", model.posterior_kernel),
      TF_INT("posterior.steps", posterior_steps),

      TF_STR("model.g1", model.g1),
      TF_STR("model.g2", model.g2),
      TF_INT("model.bridge_channels", model.bridge_channels),
      TF_INT("model.latent_channels", model.latent.channels),
      TF_INT("model.latent_height", model.latent.height),
      TF_INT("model.latent_width", model.latent.width),
      Field{"model.embedding",
            [](const RunConfig& c) { return std::string(c.model.embedding == ReadingEmbedding::log ? "log" : "linear"); },
            [](RunConfig& c, const std::string& v) {
              c.model.embedding =
                  choice("model.embedding", v, {"log", "linear"}) == "log" ? ReadingEmbedding::log : ReadingEmbedding::linear;
            }},
      TF_INT("model.disc_channels", model.disc_channels),
      TF_INT("model.disc_depth", model.disc_depth),
      TF_INT("model.init_seed", model.init_seed),

      TF_INT("train.batch_size", train.batch_size),
      TF_INT("train.steps", train.steps),
      TF_DBL("train.lr_peak", train.schedule.peak),
      TF_INT("train.warmup_batches", train.schedule.warmup_batches),
      TF_INT("train.halve_every", train.schedule.halve_every),
      TF_DBL("train.warmup_gamma", train.schedule.gamma),
      TF_DBL("train.beta1", train.adam.beta1),
      TF_DBL("train.beta2", train.adam.beta2),
      TF_DBL("train.adam_eps", train.adam.eps),
      TF_INT("train.checkpoint_every", train.checkpoint_every),

      TF_DBL("gan.lambda", gan.lambda),
      TF_DBL("gan.critic_lip", gan.critic_lip),
      TF_INT("gan.n_critic", gan.n_critic),
      TF_INT("gan.steps", gan_steps),
      TF_DBL("gan.lr_peak", gan_lr_peak),
      TF_DBL("gan.beta1", gan_adam.beta1),
      TF_DBL("gan.beta2", gan_adam.beta2),

      TF_DBL("refine.lr", refine.lr),
      TF_INT("refine.iters", refine.iters),
      TF_INT("refine.snapshots", refine.snapshots),

      TF_INT("eval.count", eval_count),
      TF_INT("eval.batch", eval_batch),

      TF_DBL("preprocess.threshold_hu", preprocess.threshold_hu),
      TF_DBL("preprocess.window_lo_hu", preprocess.window_lo_hu),
      TF_DBL("preprocess.window_hi_hu", preprocess.window_hi_hu),
      TF_INT("preprocess.size", preprocess.n),

      TF_STR("paths.run_dir", run_dir),
      TF_STR("paths.posterior_checkpoint", posterior_checkpoint),
  };
  return f;
}

#undef TF_INT
#undef TF_DBL
#undef TF_STR

const Field& field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return f;
  throw ConfigError(key, "unknown config key " + key);
}

}  // namespace

RunConfig RunConfig::defaults(const std::string& profile) {
  RunConfig c;
  c.profile = choice("run.profile", profile, {"desk", "paper"});
  c.refine.snapshots = 8;
  if (profile == "paper") {
    c.geometry = ScanGeometry::make(256, 256, 256, 2.0 / 256);
    c.model.g1 = "XXS";
    c.model.g2 = "S-64";
    c.model.bridge_channels = 16;
    c.model.latent = {32, 16, 16};
    c.model.disc_channels = 64;
    c.model.disc_depth = 6;
    c.train.batch_size = 16;
    c.train.schedule = LrSchedule{3e-4, 5000, 80000, 5.0};
    c.train.steps = 10 * c.data.train_phantoms / c.train.batch_size;
    c.preprocess.n = 256;
  }
  return c;
}

RunConfig RunConfig::from_ini(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree t;
  std::istringstream is(text);
  try {
    pt::read_ini(is, t);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("ini", std::string("config: ") + e.what());
  }
  RunConfig c = defaults(t.get<std::string>("run.profile", "desk"));
  for (const auto& [section, body] : t) {
    if (body.empty() && !body.data().empty()) throw ConfigError(section, "config key outside a section: " + section);
    for (const auto& [k, v] : body) c.set(section + "." + k, v.data());
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return from_ini(ss.str());
}

void RunConfig::set(const std::string& key, const std::string& value) { field(key).set(*this, value); }

std::string RunConfig::get(const std::string& key) const { return field(key).get(*this); }

std::vector<std::string> RunConfig::keys() const {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.push_back(f.key);
  return out;
}

std::string RunConfig::to_ini() const {
  std::ostringstream os;
  std::string section;
  for (const auto& f : fields()) {
    const auto dot = f.key.find('.');
    const std::string sec = f.key.substr(0, dot);
    if (sec != section) {
      os << (section.empty() ? "" : "\n") << '[' << sec << "]\n";
      section = sec;
    }
    os << f.key.substr(dot + 1) << " = " << f.get(*this) << '\n';
  }
  return os.str();
}

void RunConfig::validate() const {
  try {
    geometry.validate();
  } catch (const std::exception& e) {
    throw ConfigError("geometry.image_size", e.what());
  }
  if (profile == "paper" && geometry.image_size != 256)
    throw ConfigError("geometry.image_size", "profile paper requires image_size = 256");
  try {
    data.validate();
    train.validate();
    gan.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("noise", e.what());
  }
  for (const auto& name : {model.g1, model.g2}) {
    try {
      UNetPreset::named(name).check_input(static_cast<std::size_t>(geometry.image_size),
                                          static_cast<std::size_t>(geometry.image_size));
    } catch (const std::exception& e) {
      throw ConfigError(name == model.g1 ? "model.g1" : "model.g2", e.what());
    }
  }
  if (posterior_steps < 0) throw ConfigError("posterior.steps", "posterior.steps must be >= 0");
  if (gan_steps < 0) throw ConfigError("gan.steps", "gan.steps must be >= 0");
  if (!(gan_lr_peak > 0)) throw ConfigError("gan.lr_peak", "gan.lr_peak must be positive");
  if (refine.iters < 0) throw ConfigError("refine.iters", "refine.iters must be >= 0");
  if (refine.snapshots < 0) throw ConfigError("refine.snapshots", "refine.snapshots must be >= 0");
  if (!(refine.lr >= 0)) throw ConfigError("refine.lr", "refine.lr must be >= 0");
  if (eval_count < 1) throw ConfigError("eval.count", "eval.count must be positive");
  if (eval_batch < 1) throw ConfigError("eval.batch", "eval.batch must be positive");
  if (posterior_source == PosteriorSourceKind::net && posterior_checkpoint.empty())
    throw ConfigError("paths.posterior_checkpoint", "posterior.source = net needs paths.posterior_checkpoint");
}

ModelDescriptor RunConfig::descriptor(ModelKind kind) const {
  ModelDescriptor d = model;
  d.kind = kind;
  d.image_size = geometry.image_size;
  d.n_angles = geometry.n_angles;
  d.n_detectors = geometry.n_detectors;
  d.pixel_spacing = geometry.pixel_spacing;
  d.bits = data.noise.b;
  // Distinct but reproducible initial weights per role.
  d.init_seed = model.init_seed * 16 + static_cast<std::uint64_t>(kind) + 1;
  return d;
}

TrainConfig RunConfig::posterior_train() const {
  TrainConfig t = train;
  t.steps = posterior_steps;
  t.seed = seed;
  t.schedule.warmup_batches = std::min<std::int64_t>(t.schedule.warmup_batches, std::max<std::int64_t>(1, posterior_steps / 10));
  t.schedule.halve_every = std::max<std::int64_t>(1, posterior_steps / 3);
  t.schedule.peak = 3e-3;
  return t;
}

TrainConfig RunConfig::gan_train() const {
  TrainConfig t = train;
  t.steps = gan_steps;
  t.seed = seed;
  t.schedule.peak = gan_lr_peak;
  t.adam = gan_adam;
  return t;
}

SceneSimulator RunConfig::simulator() const { return SceneSimulator(geometry, data, seed); }

}  // namespace tomoforge::cli
