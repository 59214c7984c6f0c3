#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "tapl/autodiff.hpp"
#include "tapl/rng.hpp"

namespace tapl::episodes {

class EpisodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Split : std::size_t { Train = 0, Val = 1, Test = 2 };
const char* split_name(Split s);

struct SplitManifest {
  std::string dataset_id;
  std::array<std::vector<std::string>, 3> classes;  // indexed by Split
  std::string checksum;

  const std::vector<std::string>& of(Split s) const { return classes[static_cast<std::size_t>(s)]; }
  /// Throws DatasetError naming the first class found in two splits.
  void verify_disjoint() const;
};

/// Immutable pool of samples grouped by split and class.
class Source {
 public:
  virtual ~Source() = default;
  virtual const SplitManifest& manifest() const = 0;
  virtual Shape sample_shape() const = 0;
  virtual std::size_t samples_in_class(Split split, std::size_t cls) const = 0;
  virtual std::vector<double> sample(Split split, std::size_t cls, std::size_t index) const = 0;

  std::size_t class_count(Split split) const { return manifest().of(split).size(); }
};

struct SampleId {
  std::string class_name;
  std::size_t index = 0;
  bool operator==(const SampleId&) const = default;
};

/// One N-way K-shot task in canonical order (class-major, shot-minor).
struct Episode {
  std::size_t n_way = 0;
  std::size_t k_shot = 0;
  std::size_t n_query = 0;
  Tensor support_x;  // NK x sample shape
  Tensor query_x;    // Q x sample shape
  std::vector<int> support_labels;
  std::vector<int> query_labels;  // ground truth; scoring only at meta-test
  std::vector<std::string> class_names;
  std::vector<SampleId> support_ids;
  std::vector<SampleId> query_ids;

  std::size_t n_support() const { return n_way * k_shot; }
  std::size_t size() const { return n_support() + n_query; }
};

Episode sample_episode(const Source& source, Split split, std::size_t n_way, std::size_t k_shot,
                       std::size_t n_query, Rng& rng);

std::vector<Episode> sample_episodes(const Source& source, Split split, std::size_t count,
                                     std::size_t n_way, std::size_t k_shot, std::size_t n_query,
                                     Rng& rng);

// ---------------------------------------------------------------------------
// synthetic families
// ---------------------------------------------------------------------------

struct BlobConfig {
  std::size_t dim = 16;
  std::size_t num_classes = 100;  // split 64% / 16% / 20%
  double separation = 6.0;        // norm of every class mean
  double noise = 1.0;             // RMS norm of the noise vector (per-coordinate sd noise / sqrt(dim))
  std::uint64_t seed = 0;
  std::size_t samples_per_class = 600;
};

/// Isotropic Gaussian classes with frozen random means of norm `separation`.
/// Both `separation` and `noise` are vector norms, so their ratio does not
/// depend on the dimension.
std::unique_ptr<Source> blob_family(const BlobConfig& cfg);

struct ShapeConfig {
  std::size_t image_size = 16;
  std::size_t num_classes = 40;
  std::uint64_t seed = 0;
  std::size_t samples_per_class = 100;
};

/// 3-channel images of (shape type, colour) classes at random position and
/// scale, values in [0, 1].
std::unique_ptr<Source> shape_family(const ShapeConfig& cfg);

/// Class counts for a meta-split of `total` classes (64/16/20 proportions).
std::array<std::size_t, 3> split_counts(std::size_t total);

// ---------------------------------------------------------------------------
// on-disk datasets
// ---------------------------------------------------------------------------

/// "TPLT", version 1, u8 rank, rank x u32 LE dims, f64 LE values.
void write_sample(const std::filesystem::path& path, const Shape& shape,
                  const std::vector<double>& values);
std::pair<Shape, std::vector<double>> read_sample(const std::filesystem::path& path);

/// Loads root/{train,val,test}/<class>/<sample files>. Verifies split
/// disjointness and records a content checksum.
std::unique_ptr<Source> load_dataset(const std::filesystem::path& root);

/// Writes every sample of `source` in the layout load_dataset reads.
void write_dataset(const Source& source, const std::filesystem::path& root);

}  // namespace tapl::episodes
