#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>

#include "tapl/episodes.hpp"
#include "tapl/metaloop.hpp"

namespace tapl::harness {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Family { Blob, Shapes, Directory };

struct TaskSection {
  Family family = Family::Blob;
  std::size_t dim = 16;
  std::size_t num_classes = 100;
  double separation = 6.0;
  double noise = 1.0;
  std::size_t samples_per_class = 600;
  std::size_t image_size = 16;
  std::string root;
  std::uint64_t data_seed = 0;
  std::size_t n_way = 5;
  std::size_t k_shot = 1;
  std::size_t n_query = 15;

  bool operator==(const TaskSection&) const = default;
};

struct ModelSection {
  nets::Arch arch = nets::Arch::Mlp;
  std::size_t hidden = 32;
  std::size_t depth = 3;
  std::size_t conv_width = 32;
  std::size_t graph_layers = 2;
  std::size_t graph_hidden = 16;
  std::size_t modulator_hidden = 32;

  bool operator==(const ModelSection&) const = default;
};

struct PropagationSection {
  double alpha_init = 0.99;
  std::size_t knn = 0;

  bool operator==(const PropagationSection&) const = default;
};

struct AdaptSection {
  std::size_t inner_steps = 5;
  double inner_lr = 0.01;
  double outer_lr = 1e-3;
  std::size_t meta_batch = 4;
  double prop_weight = 1.0;
  bool second_order = true;

  bool operator==(const AdaptSection&) const = default;
};

struct TrainSection {
  std::size_t iterations = 500;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 100;
  std::size_t eval_episodes = 200;
  std::uint64_t eval_seed = 7;
  bool record_wall_time = false;
  metaloop::Modulation modulation = metaloop::Modulation::Task;
  bool pseudo_labels = true;

  bool operator==(const TrainSection&) const = default;
};

/// Everything a run depends on. Text form: `[section]` headers and
/// `key = value` lines, `#` comments. Unknown sections or keys are errors.
struct RunConfig {
  TaskSection task;
  ModelSection model;
  PropagationSection propagation;
  AdaptSection adapt;
  TrainSection train;

  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::string& path);
  /// Canonical text listing every key; parse(to_text()) == *this.
  std::string to_text() const;

  /// Pipeline settings for data whose samples have `sample_shape`.
  metaloop::PipelineConfig pipeline(const Shape& sample_shape) const;
  std::unique_ptr<episodes::Source> make_source() const;

  bool operator==(const RunConfig&) const = default;
};

}  // namespace tapl::harness
