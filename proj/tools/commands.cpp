#include "commands.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>

#include <CLI11.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "tomoforge/checkpoint.hpp"
#include "tomoforge/image_io.hpp"
#include "tomoforge/metrics.hpp"
#include "tomoforge/parallel.hpp"

namespace tomoforge::cli {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kSimulateStream = 0x53494d;
constexpr std::uint64_t kSampleStream = 0x534d504c;
constexpr std::uint64_t kRefineStream = 0x52464e;

// ---- readings files ---------------------------------------------------------------

Tensor<double> to_tensor(Shape s, const std::vector<double>& v) { return Tensor<double>(std::move(s), v); }

}  // namespace

Batch ReadingsFile::batch() const {
  Batch b;
  b.size = count;
  b.geometry = geometry;
  b.noise = noise;
  for (std::size_t i = 0; i < count; ++i) b.ids.push_back(i);
  b.readings = readings;
  b.clean = clean;
  if (!truth.empty()) {
    const auto n = static_cast<std::size_t>(geometry.image_size);
    b.images = Tensor<float>(Shape{count, 1, n, n});
    for (std::size_t i = 0; i < truth.size(); ++i) b.images[i] = static_cast<float>(truth[i]);
  }
  return b;
}

void write_readings(const std::string& path, const ReadingsFile& f) {
  std::ostringstream ini;
  ini.precision(17);
  ini << "[readings]\ncount=" << f.count << "\nimage_size=" << f.geometry.image_size
      << "\nn_angles=" << f.geometry.n_angles << "\nn_detectors=" << f.geometry.n_detectors
      << "\npixel_spacing=" << f.geometry.pixel_spacing << "\ns=" << f.noise.s << "\nepsilon=" << f.noise.epsilon
      << "\nk=" << f.noise.k << "\nbits=" << f.noise.b << "\n";
  const std::size_t a = static_cast<std::size_t>(f.geometry.n_angles), d = static_cast<std::size_t>(f.geometry.n_detectors);
  const std::size_t n = static_cast<std::size_t>(f.geometry.image_size);
  std::vector<NamedTensor> entries{make_ini_entry(ini.str())};
  entries.push_back({"readings", to_tensor({f.count, a, d}, std::vector<double>(f.readings.begin(), f.readings.end()))});
  if (!f.clean.empty()) entries.push_back({"clean", to_tensor({f.count, a, d}, f.clean)});
  if (!f.truth.empty()) entries.push_back({"truth", to_tensor({f.count, n, n}, f.truth)});
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  write_tnsr(fs::path(path), entries);
}

ReadingsFile read_readings(const std::string& path) {
  const auto entries = read_tnsr(fs::path(path));
  const auto ini = find_ini_entry(entries);
  if (!ini) throw IoError(path + ": not a readings file (no metadata)");
  namespace pt = boost::property_tree;
  pt::ptree t;
  std::istringstream is(*ini);
  ReadingsFile f;
  try {
    pt::read_ini(is, t);
    f.count = t.get<std::size_t>("readings.count");
    f.geometry = ScanGeometry::make(t.get<int>("readings.image_size"), t.get<int>("readings.n_angles"),
                                    t.get<int>("readings.n_detectors"), t.get<double>("readings.pixel_spacing"));
    f.noise.s = t.get<double>("readings.s");
    f.noise.epsilon = t.get<double>("readings.epsilon");
    f.noise.k = t.get<double>("readings.k");
    f.noise.b = t.get<int>("readings.bits");
  } catch (const std::exception& e) {
    throw IoError(path + ": bad readings metadata: " + e.what());
  }
  const auto* r = find_tensor(entries, "readings");
  if (!r) throw IoError(path + ": no readings tensor");
  const auto rv = r->as<double>();
  if (rv.numel() != f.count * f.geometry.sinogram_entries()) throw IoError(path + ": readings size mismatch");
  for (double v : rv.values()) f.readings.push_back(static_cast<std::int32_t>(v));
  if (const auto* c = find_tensor(entries, "clean")) {
    const auto cv = c->as<double>();
    f.clean.assign(cv.values().begin(), cv.values().end());
  }
  if (const auto* tr = find_tensor(entries, "truth")) {
    const auto tv = tr->as<double>();
    f.truth.assign(tv.values().begin(), tv.values().end());
  }
  return f;
}

namespace {

// ---- shared plumbing ----------------------------------------------------------------

struct Globals {
  std::string config;
  std::string profile = "desk";
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  int threads = 0;
};

RunConfig load_config(const Globals& g) {
  RunConfig c = g.config.empty() ? RunConfig::defaults(g.profile) : RunConfig::load(g.config);
  for (const auto& kv : g.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError(kv, "--set expects key=value, got '" + kv + "'");
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (g.seed) c.seed = *g.seed;
  c.validate();
  return c;
}

void apply_threads(const Globals& g) {
  int n = g.threads;
  if (n <= 0) {
    if (const char* env = std::getenv("TOMOFORGE_THREADS")) {
      try {
        n = std::stoi(env);
      } catch (const std::exception&) {
        throw ConfigError("TOMOFORGE_THREADS", std::string("bad TOMOFORGE_THREADS value '") + env + "'");
      }
    }
  }
  set_num_threads(n > 0 ? n : 1);
}

/// Posterior nets kept alive next to the source that points into them.
struct PosteriorHandle {
  std::vector<std::unique_ptr<PosteriorNet<float>>> nets;
  std::unique_ptr<PosteriorSource> source;
};

PosteriorHandle load_posterior_nets(const std::string& path) {
  PosteriorHandle h;
  const auto ck = load_checkpoint(path);
  auto load = [&](const std::string& role) {
    auto net = std::make_unique<PosteriorNet<float>>(ck.descriptor(role));
    ck.load_params(role, net->store());
    h.nets.push_back(std::move(net));
    return h.nets.back().get();
  };
  if (ck.descriptors.count("joint")) {
    h.source = std::make_unique<NetPosterior>(load("joint"));
  } else if (ck.descriptors.count("mu")) {
    auto* mu = load("mu");
    auto* sigma = ck.descriptors.count("sigma") ? load("sigma") : nullptr;
    h.source = std::make_unique<NetPosterior>(mu, sigma);
  } else {
    throw IoError(path + ": no posterior model in checkpoint");
  }
  return h;
}

PosteriorHandle make_posterior(const RunConfig& c, const std::string& override_path) {
  if (!override_path.empty()) return load_posterior_nets(override_path);
  if (c.posterior_source == PosteriorSourceKind::net) return load_posterior_nets(c.posterior_checkpoint);
  PosteriorHandle h;
  h.source = std::make_unique<OraclePosterior>(c.data.prior);
  return h;
}

std::vector<Array2<double>> split_images(const std::vector<double>& flat, std::size_t count, int n) {
  std::vector<Array2<double>> out;
  const std::size_t np = static_cast<std::size_t>(n) * n;
  for (std::size_t i = 0; i < count; ++i) {
    Array2<double> img(n, n);
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(i * np), np, img.values().begin());
    out.push_back(std::move(img));
  }
  return out;
}

void write_grid(const std::string& path, const std::vector<Array2<double>>& images, int cols) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  if (images.size() == 1) write_image_png16(path, images[0]);
  else write_image_png16(path, tile_images(images, cols));
}

std::vector<Array2<double>> fbp_on_posterior(const Batch& b, const PosteriorSource& post) {
  return fbp_reconstructor(post)(b);
}

// ---- simulate -------------------------------------------------------------------------

struct SimulateOpts {
  std::string out;
  std::string phantom;
  int count = 4;
  std::uint64_t first = 0;
  std::optional<double> signal;
  std::vector<std::string> pngs;
};

int cmd_simulate(const Globals& g, const SimulateOpts& o, std::ostream& out) {
  const RunConfig c = load_config(g);
  const auto sim = c.simulator();
  const double s = o.signal.value_or(c.data.noise.s);
  std::vector<ImageGrid<double>> images;
  if (!o.pngs.empty()) {
    PreprocessConfig pc = c.preprocess;
    if (pc.n != c.geometry.image_size)
      throw ConfigError("preprocess.size", "preprocess.size must equal geometry.image_size");
    int rejected = 0;
    for (const auto& p : o.pngs) {
      auto res = preprocess_ct_slice(read_png16(p), pc);
      if (!res.accepted()) {
        ++rejected;
        out << "rejected " << p << ": " << res.reason << "\n";
        continue;
      }
      images.push_back(ImageGrid<double>(c.geometry, res.image->values()));
    }
    out << "slices accepted " << images.size() << " rejected " << rejected << "\n";
    if (images.empty()) throw IoError("no slice survived preprocessing");
  } else {
    PhantomSpec spec = c.data.phantom;
    if (!o.phantom.empty()) {
      if (o.phantom == "shepp_logan") spec.kind = PhantomSpec::Kind::shepp_logan;
      else if (o.phantom == "random_ellipses") spec.kind = PhantomSpec::Kind::random_ellipses;
      else throw ConfigError("--phantom", "phantom must be shepp_logan or random_ellipses");
    }
    for (int i = 0; i < o.count; ++i)
      images.push_back(spec.kind == PhantomSpec::Kind::shepp_logan
                           ? shepp_logan(c.geometry.image_size)
                           : make_phantom(c.geometry.image_size, spec, o.first + static_cast<std::uint64_t>(i)));
  }
  const Batch b = sim.from_images(images, s, RandomStream(c.seed, kSimulateStream));
  ReadingsFile f;
  f.geometry = c.geometry;
  f.noise = b.noise;
  f.count = b.size;
  f.readings = b.readings;
  f.clean = b.clean;
  for (const auto& img : images) f.truth.insert(f.truth.end(), img.values().begin(), img.values().end());
  write_readings(o.out, f);
  const auto preview = fs::path(o.out).replace_extension("").string() + "-truth.png";
  write_grid(preview, split_images(f.truth, f.count, c.geometry.image_size), 4);
  const auto max_r = *std::max_element(f.readings.begin(), f.readings.end());
  out << "wrote " << f.count << " readings to " << o.out << " (s=" << s << ", max reading " << max_r << ")\n";
  return kOk;
}

// ---- fbp --------------------------------------------------------------------------------

struct FbpOpts {
  std::string input;
  std::string kind = "readings";
  std::string out;
  std::string posterior;
  std::string window = "ramlak";
};

int cmd_fbp(const Globals& g, const FbpOpts& o, std::ostream& out) {
  const RunConfig c = load_config(g);
  const RampWindow w = o.window == "hann" ? RampWindow::hann : RampWindow::ramlak;
  if (o.window != "hann" && o.window != "ramlak") throw ConfigError("--window", "window must be ramlak or hann");
  std::vector<Array2<double>> images;
  if (o.kind == "readings") {
    const auto f = read_readings(o.input);
    auto post = make_posterior(c, o.posterior);
    const Batch b = f.batch();
    const auto est = post.source->estimate(b);
    for (std::size_t i = 0; i < b.size; ++i) {
      Sinogram<double> mu(b.geometry);
      for (std::size_t e = 0; e < b.entries(); ++e) mu.values()[e] = est.mu[i * b.entries() + e];
      images.push_back(fbp_reconstruct(mu, b.geometry, w));
    }
  } else if (o.kind == "sinogram") {
    const auto entries = read_tnsr(fs::path(o.input));
    ScanGeometry geom = c.geometry;
    const NamedTensor* t = find_tensor(entries, "sinogram");
    if (!t) t = find_tensor(entries, "clean");
    if (!t) throw IoError(o.input + ": no 'sinogram' or 'clean' tensor");
    if (find_tensor(entries, "readings")) geom = read_readings(o.input).geometry;
    const auto v = t->as<double>();
    const std::size_t per = geom.sinogram_entries();
    if (v.numel() % per != 0) throw IoError(o.input + ": sinogram size does not match the geometry");
    for (std::size_t i = 0; i < v.numel() / per; ++i)
      images.push_back(fbp_reconstruct(Sinogram<double>(geom, v.values().subspan(i * per, per)), geom, w));
  } else {
    throw ConfigError("--input-kind", "input kind must be readings or sinogram");
  }
  write_grid(o.out, images, 4);
  out << "wrote " << images.size() << " reconstruction(s) to " << o.out << "\n";
  return kOk;
}

// ---- train ---------------------------------------------------------------------------------

struct TrainOpts {
  std::string kind;
  std::string run_dir;
  bool resume = false;
};

class LossCsv {
 public:
  LossCsv(const std::string& path, std::int64_t keep_upto, bool resume) : path_(path) {
    std::vector<std::string> kept;
    if (resume && fs::exists(path)) {
      std::ifstream is(path);
      std::string line;
      std::getline(is, line);
      while (std::getline(is, line)) {
        if (std::stoll(line.substr(0, line.find(','))) <= keep_upto) kept.push_back(line);
      }
    }
    os_.open(path, std::ios::trunc);
    if (!os_) throw IoError("cannot write " + path);
    os_ << "step,phase,signal_s,lr,loss,aux\n";
    for (const auto& l : kept) os_ << l << '\n';
    os_.precision(10);
  }
  void row(std::int64_t step, const std::string& phase, const StepLog& l) {
    os_ << step << ',' << phase << ',' << l.signal_s << ',' << l.lr << ',' << l.loss << ',' << l.aux << '\n';
    os_.flush();
  }

 private:
  std::string path_;
  std::ofstream os_;
};

int cmd_train(const Globals& g, const TrainOpts& o, std::ostream& out) {
  RunConfig c = load_config(g);
  const std::string dir = o.run_dir.empty() ? c.run_dir : o.run_dir;
  fs::create_directories(dir);
  std::optional<LoadedCheckpoint> ck;
  if (o.resume) {
    if (auto latest = latest_checkpoint(dir)) {
      ck = load_checkpoint(*latest);
      out << "resuming from " << *latest << " at step " << ck->state.step << "\n";
    }
  }
  {
    std::ofstream cfg(fs::path(dir) / "config.ini");
    cfg << c.to_ini();
    if (!cfg) throw IoError("cannot write config.ini in " + dir);
  }
  const std::string run_ini = c.to_ini();
  const auto sim = c.simulator();
  LossCsv csv((fs::path(dir) / "loss.csv").string(), ck ? ck->state.step : 0, o.resume);
  const auto report = [&out](std::int64_t step, const StepLog& l) {
    if (step % 100 == 0) out << "step " << step << " loss " << l.loss << "\n" << std::flush;
  };

  if (o.kind == "posterior") {
    PosteriorNet<float> mu(c.descriptor(ModelKind::posterior_mu));
    PosteriorNet<float> sigma(c.descriptor(ModelKind::posterior_sigma));
    PosteriorNet<float> joint(c.descriptor(ModelKind::posterior_joint));
    RunState all;
    if (ck) {
      ck->load_params("mu", mu.store());
      ck->load_params("sigma", sigma.store());
      ck->load_params("joint", joint.store());
      all = ck->state;
    }
    const TrainConfig tc = c.posterior_train();
    const std::int64_t per = tc.steps;
    const std::vector<CheckpointModel> models{{"mu", mu.descriptor(), &mu.store()},
                                              {"sigma", sigma.descriptor(), &sigma.store()},
                                              {"joint", joint.descriptor(), &joint.store()}};
    const char* names[3] = {"mu", "sigma", "joint"};
    for (int phase = 0; phase < 3; ++phase) {
      RunState st;
      st.step = std::clamp<std::int64_t>(all.step - phase * per, 0, per);
      st.optim = all.optim;
      TrainHooks hooks;
      hooks.on_step = [&, phase](const StepLog& l) {
        csv.row(phase * per + l.step, names[phase], l);
        report(phase * per + l.step, l);
      };
      hooks.on_checkpoint = [&, phase](std::int64_t local) {
        RunState snapshot = st;
        snapshot.step = phase * per + local;
        save_checkpoint(checkpoint_path(dir, snapshot.step), run_ini, models, snapshot);
      };
      if (phase == 0) train_posterior_mu(mu, sim, tc, st, hooks);
      if (phase == 1) train_posterior_sigma(sigma, mu, sim, tc, st, hooks);
      if (phase == 2) distill_posterior(joint, mu, sigma, sim, tc, st, hooks);
      all.optim = st.optim;
      all.step = std::max(all.step, phase * per + st.step);
    }
  } else if (o.kind == "recon") {
    ReconNet<float> model(c.descriptor(ModelKind::end2end));
    RunState st;
    if (ck) {
      ck->load_params("recon", model.store());
      st = ck->state;
    }
    TrainConfig tc = c.train;
    tc.seed = c.seed;
    const std::vector<CheckpointModel> models{{"recon", model.descriptor(), &model.store()}};
    TrainHooks hooks;
    hooks.on_step = [&](const StepLog& l) {
      csv.row(l.step, "recon", l);
      report(l.step, l);
    };
    hooks.on_checkpoint = [&](std::int64_t step) {
      save_checkpoint(checkpoint_path(dir, step), run_ini, models, st);
    };
    train_recon(model, sim, tc, st, hooks);
  } else if (o.kind == "gan") {
    ReconNet<float> gen(c.descriptor(ModelKind::generator));
    Discriminator<float> disc(c.descriptor(ModelKind::discriminator));
    RunState st;
    if (ck) {
      ck->load_params("g", gen.store());
      ck->load_params("d", disc.store());
      st = ck->state;
    }
    auto post = make_posterior(c, "");
    const TrainConfig tc = c.gan_train();
    const std::vector<CheckpointModel> models{{"g", gen.descriptor(), &gen.store()},
                                              {"d", disc.descriptor(), &disc.store()}};
    TrainHooks hooks;
    hooks.on_step = [&](const StepLog& l) {
      csv.row(l.step, "gan", l);
      report(l.step, l);
    };
    hooks.on_checkpoint = [&](std::int64_t step) {
      save_checkpoint(checkpoint_path(dir, step), run_ini, models, st);
    };
    train_wgan(gen, disc, *post.source, sim, tc, c.gan, st, hooks);
  } else {
    throw ConfigError("kind", "train kind must be posterior, recon or gan");
  }
  out << "training finished; checkpoints in " << dir << "\n";
  return kOk;
}

// ---- sample / refine ---------------------------------------------------------------------

struct GanHandle {
  std::unique_ptr<ReconNet<float>> g;
  std::unique_ptr<Discriminator<float>> d;
};

GanHandle load_gan(const std::string& path) {
  const auto ck = load_checkpoint(path);
  GanHandle h;
  h.g = std::make_unique<ReconNet<float>>(ck.descriptor("g"));
  ck.load_params("g", h.g->store());
  if (ck.descriptors.count("d")) {
    h.d = std::make_unique<Discriminator<float>>(ck.descriptor("d"));
    ck.load_params("d", h.d->store());
  }
  return h;
}

void check_geometry(const ScanGeometry& model, const ScanGeometry& data) {
  if (!(model == data)) throw ConfigError("geometry.image_size", "readings geometry does not match the model");
}

Tensor<float> one_input(const Batch& b, std::size_t i, const ModelDescriptor& d) {
  return embed_readings<float>(std::span<const std::int32_t>(b.readings).subspan(i * b.entries(), b.entries()), 1,
                               b.rows(), b.cols(), d.bits, d.embedding);
}

Tensor<float> plane(const Tensor<float>& t, std::size_t i) {
  const std::size_t per = t.numel() / t.dim(0);
  Shape s = t.shape();
  s[0] = 1;
  return Tensor<float>(s, std::vector<float>(t.values().begin() + static_cast<std::ptrdiff_t>(i * per),
                                             t.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * per)));
}

struct SampleOpts {
  std::string checkpoint;
  std::string input;
  int n = 4;
  std::string out;
  std::string posterior;
};

int cmd_sample(const Globals& g, const SampleOpts& o, std::ostream& out) {
  const RunConfig c = load_config(g);
  if (o.n < 1) throw ConfigError("--n", "need at least one sample");
  const auto gan = load_gan(o.checkpoint);
  const auto f = read_readings(o.input);
  check_geometry(gan.g->geometry(), f.geometry);
  auto post = make_posterior(c, o.posterior);
  const Batch b = f.batch();
  const auto fbp = fbp_on_posterior(b, *post.source);
  std::vector<Array2<double>> tiles;
  for (std::size_t i = 0; i < b.size; ++i) {
    tiles.push_back(fbp[i]);
    RandomStream rng = RandomStream(c.seed, kSampleStream).substream(i);
    const Tensor<float> input = one_input(b, i, gan.g->descriptor());
    std::vector<Array2<double>> samples;
    for (int j = 0; j < o.n; ++j) {
      Tape<float> tape;
      const auto z = sample_latent_batch(*gan.g, 1, rng);
      const auto x = gan.g->forward(tape.constant(input), tape.constant(z)).value();
      Array2<double> img(b.geometry.image_size, b.geometry.image_size);
      for (std::size_t p = 0; p < img.size(); ++p) img.values()[p] = x[p];
      samples.push_back(img);
      tiles.push_back(std::move(img));
    }
    double dist = 0;
    int pairs = 0;
    for (int p = 0; p < o.n; ++p)
      for (int q = p + 1; q < o.n; ++q, ++pairs) {
        double acc = 0;
        for (std::size_t e = 0; e < samples[p].size(); ++e) {
          const double dv = samples[p].values()[e] - samples[q].values()[e];
          acc += dv * dv;
        }
        dist += std::sqrt(acc);
      }
    out << "reading " << i << " mean pairwise distance " << (pairs ? dist / pairs : 0.0) << "\n";
  }
  write_grid(o.out, tiles, 1 + o.n);
  out << "wrote sample grid to " << o.out << "\n";
  return kOk;
}

struct RefineOpts {
  std::string checkpoint;
  std::string input;
  std::size_t index = 0;
  std::optional<int> iters;
  std::optional<double> lr;
  std::optional<int> snapshots;
  std::string out;
  std::string posterior;
};

int cmd_refine(const Globals& g, const RefineOpts& o, std::ostream& out) {
  const RunConfig c = load_config(g);
  RefineConfig rc = c.refine;
  rc.lambda = c.gan.lambda;
  if (o.iters) rc.iters = *o.iters;
  if (o.lr) rc.lr = *o.lr;
  if (o.snapshots) rc.snapshots = *o.snapshots;
  const auto gan = load_gan(o.checkpoint);
  if (!gan.d) throw IoError(o.checkpoint + ": refinement needs the critic ('d') in the checkpoint");
  const auto f = read_readings(o.input);
  check_geometry(gan.g->geometry(), f.geometry);
  if (o.index >= f.count) throw ConfigError("--index", "reading index out of range");
  auto post = make_posterior(c, o.posterior);
  const Batch b = f.batch();
  const auto est = post.source->estimate(b);
  RandomStream rng = RandomStream(c.seed, kRefineStream).substream(o.index);
  const auto z0 = sample_latent_batch(*gan.g, 1, rng);
  const auto res = refine_reconstruction(*gan.g, *gan.d, one_input(b, o.index, gan.g->descriptor()),
                                         plane(est.mu, o.index), plane(est.sigma, o.index), z0, rc);
  fs::create_directories(o.out);
  {
    std::ofstream csv(fs::path(o.out) / "objective.csv");
    csv.precision(12);
    csv << "iteration,objective,z_norm\n";
    for (std::size_t i = 0; i < res.objective.size(); ++i)
      csv << i << ',' << res.objective[i] << ',' << res.z_norm[i] << '\n';
    if (!csv) throw IoError("cannot write objective.csv in " + o.out);
  }
  for (std::size_t k = 0; k < res.snapshots.size(); ++k) {
    std::ostringstream name;
    name << "snapshot-" << std::setw(4) << std::setfill('0') << res.snapshot_iters[k] << ".png";
    write_image_png16((fs::path(o.out) / name.str()).string(), res.snapshots[k]);
  }
  if (!res.snapshots.empty())
    write_grid((fs::path(o.out) / "trajectory.png").string(), res.snapshots, static_cast<int>(res.snapshots.size()));
  write_image_png16((fs::path(o.out) / "final.png").string(), res.image);
  out.precision(12);
  out << "snapshots " << res.snapshots.size() << "\nfinal objective " << res.objective.back() << "\n";
  return kOk;
}

// ---- eval -------------------------------------------------------------------------------------

struct EvalOpts {
  std::vector<std::string> checkpoints;
  std::string out;
  std::optional<int> count;
  std::string posterior;
};

int cmd_eval(const Globals& g, const EvalOpts& o, std::ostream& out) {
  const RunConfig c = load_config(g);
  const auto sim = c.simulator();
  auto post = make_posterior(c, o.posterior);
  std::vector<std::unique_ptr<ReconNet<float>>> models;
  std::vector<std::pair<std::string, Reconstructor>> methods{{"fbp", fbp_reconstructor(*post.source)}};
  for (const auto& path : o.checkpoints) {
    const auto ck = load_checkpoint(path);
    for (const auto& [role, desc] : ck.descriptors) {
      if (desc.kind != ModelKind::end2end && desc.kind != ModelKind::generator) continue;
      auto m = std::make_unique<ReconNet<float>>(desc);
      ck.load_params(role, m->store());
      check_geometry(m->geometry(), sim.geometry());
      std::string name = desc.kind == ModelKind::end2end ? "end2end" : "gan";
      for (const auto& [existing, fn] : methods)
        if (existing == name) name += ":" + fs::path(path).stem().string();
      methods.emplace_back(name, model_reconstructor(*m, c.seed));
      models.push_back(std::move(m));
    }
  }
  const auto rows = evaluate(methods, sim, c.train.signal_ladder, o.count.value_or(c.eval_count), c.eval_batch);
  const auto parent = fs::path(o.out).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  write_eval_csv(o.out, rows);
  out << std::fixed << std::setprecision(4);
  for (const auto& [key, v] : mean_ssim(rows)) out << key.first << " s=" << key.second << " mean ssim " << v << "\n";
  return kOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"tomoforge: low-dose CT simulation, reconstruction and sampling"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config, "INI run configuration");
  app.add_option("--profile", g.profile, "default profile when no config is given")->check(CLI::IsMember({"desk", "paper"}));
  app.add_option("--set", g.sets, "override a config key (section.key=value)");
  auto* seed_opt = app.add_option("--seed", seed, "master seed (overrides run.seed)");
  app.add_option("--threads", g.threads, "worker threads (default TOMOFORGE_THREADS, else 1)");

  SimulateOpts so;
  auto* sim = app.add_subcommand("simulate", "simulate readings from phantoms or CT slices");
  sim->add_option("--out", so.out, "readings file (.tnsr)")->required();
  sim->add_option("--phantom", so.phantom, "shepp_logan or random_ellipses");
  sim->add_option("--count", so.count, "number of phantoms");
  sim->add_option("--first", so.first, "first phantom index");
  sim->add_option("--signal", so.signal, "signal level s");
  sim->add_option("--png", so.pngs, "16-bit CT slices to preprocess instead of phantoms");

  FbpOpts fo;
  auto* fbp = app.add_subcommand("fbp", "filtered back-projection");
  fbp->add_option("--input", fo.input, "readings or sinogram file")->required();
  fbp->add_option("--input-kind", fo.kind, "readings or sinogram")->check(CLI::IsMember({"readings", "sinogram"}));
  fbp->add_option("--out", fo.out, "16-bit PNG")->required();
  fbp->add_option("--posterior", fo.posterior, "posterior checkpoint (default per config)");
  fbp->add_option("--window", fo.window, "ramlak or hann");

  TrainOpts to;
  auto* train = app.add_subcommand("train", "train posterior, recon or gan models");
  train->add_option("kind", to.kind, "posterior | recon | gan")->required()->check(CLI::IsMember({"posterior", "recon", "gan"}));
  train->add_option("--run-dir", to.run_dir, "output directory (default paths.run_dir)");
  train->add_flag("--resume", to.resume, "continue from the newest checkpoint in the run directory");

  SampleOpts sa;
  auto* sample = app.add_subcommand("sample", "draw generator samples next to the FBP baseline");
  sample->add_option("--checkpoint", sa.checkpoint, "GAN checkpoint")->required();
  sample->add_option("--input", sa.input, "readings file")->required();
  sample->add_option("--n", sa.n, "samples per reading");
  sample->add_option("--out", sa.out, "grid PNG")->required();
  sample->add_option("--posterior", sa.posterior, "posterior checkpoint for the FBP column");

  RefineOpts ro;
  auto* refine = app.add_subcommand("refine", "projected-gradient refinement of the latent");
  refine->add_option("--checkpoint", ro.checkpoint, "GAN checkpoint")->required();
  refine->add_option("--input", ro.input, "readings file")->required();
  refine->add_option("--index", ro.index, "reading index");
  refine->add_option("--iters", ro.iters, "iterations");
  refine->add_option("--lr", ro.lr, "learning rate");
  refine->add_option("--snapshots", ro.snapshots, "snapshot count");
  refine->add_option("--out", ro.out, "output directory")->required();
  refine->add_option("--posterior", ro.posterior, "posterior checkpoint");

  EvalOpts eo;
  auto* eval = app.add_subcommand("eval", "SSIM report on held-out phantoms");
  eval->add_option("--checkpoint", eo.checkpoints, "model checkpoints");
  eval->add_option("--out", eo.out, "CSV report")->required();
  eval->add_option("--count", eo.count, "held-out phantoms per signal level");
  eval->add_option("--posterior", eo.posterior, "posterior checkpoint for the FBP baseline");

  auto* config = app.add_subcommand("config", "configuration utilities");
  config->require_subcommand(1);
  auto* dump = config->add_subcommand("dump", "print the effective configuration");

  std::vector<std::string> argv_store{"tomoforge"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigError;
  }
  if (*seed_opt) g.seed = seed;

  try {
    apply_threads(g);
    if (sim->parsed()) return cmd_simulate(g, so, out);
    if (fbp->parsed()) return cmd_fbp(g, fo, out);
    if (train->parsed()) return cmd_train(g, to, out);
    if (sample->parsed()) return cmd_sample(g, sa, out);
    if (refine->parsed()) return cmd_refine(g, ro, out);
    if (eval->parsed()) return cmd_eval(g, eo, out);
    if (dump->parsed()) {
      out << load_config(g).to_ini();
      return kOk;
    }
  } catch (const ConfigError& e) {
    err << "config error [" << e.key() << "]: " << e.what() << "\n";
    return kConfigError;
  } catch (const NumericError& e) {
    err << "numeric divergence: " << e.what() << "\n";
    return kDivergence;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kIoError;
  } catch (const fs::filesystem_error& e) {
    err << "i/o error: " << e.what() << "\n";
    return kIoError;
  }
  return kConfigError;
}

}  // namespace tomoforge::cli
