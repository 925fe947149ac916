#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tomoforge/data.hpp"
#include "tomoforge/models.hpp"
#include "tomoforge/objectives.hpp"
#include "tomoforge/training.hpp"

namespace tomoforge::cli {

enum class PosteriorSourceKind { oracle, net };

/// Every tunable default in one place. INI sections: run, geometry, noise,
/// phantom, posterior, model, train, gan, refine, eval, preprocess, paths.
struct RunConfig {
  std::string profile = "desk";
  std::uint64_t seed = 0;

  ScanGeometry geometry = ScanGeometry::make(64, 64, 64, 2.0 / 64);
  DataConfig data;
  ModelDescriptor model;
  TrainConfig train;
  std::int64_t posterior_steps = 600;
  PosteriorSourceKind posterior_source = PosteriorSourceKind::oracle;
  GanConfig gan;
  std::int64_t gan_steps = 1000;
  double gan_lr_peak = 2e-4;
  AdamHyper gan_adam{0.5, 0.9, 1e-8};
  RefineConfig refine;
  int eval_count = 48;
  int eval_batch = 8;
  PreprocessConfig preprocess;
  std::string run_dir = "runs/default";
  std::string posterior_checkpoint;

  /// Defaults of a named profile ("desk" or "paper").
  static RunConfig defaults(const std::string& profile);
  /// Profile from [run] profile, then every other key on top. Unknown keys
  /// and unparsable values throw ConfigError naming the key.
  static RunConfig from_ini(const std::string& text);
  static RunConfig load(const std::string& path);

  /// One "section.key" = value override.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  std::string to_ini() const;
  std::vector<std::string> keys() const;

  /// Cross-field checks; the paper profile requires 256 x 256 images.
  void validate() const;

  /// Descriptor for a model role, geometry and init seed filled in.
  ModelDescriptor descriptor(ModelKind kind) const;
  TrainConfig posterior_train() const;
  TrainConfig gan_train() const;
  SceneSimulator simulator() const;
};

}  // namespace tomoforge::cli
