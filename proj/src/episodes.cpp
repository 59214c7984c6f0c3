#include "tapl/episodes.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

namespace tapl::episodes {

namespace fs = std::filesystem;

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

void SplitManifest::verify_disjoint() const {
  std::set<std::string> seen;
  for (std::size_t s = 0; s < 3; ++s) {
    for (const auto& c : classes[s]) {
      if (!seen.insert(c).second) {
        throw DatasetError("class '" + c + "' appears in more than one meta-split (again in " +
                           split_name(static_cast<Split>(s)) + ")");
      }
    }
  }
}

std::array<std::size_t, 3> split_counts(std::size_t total) {
  const std::size_t train = total * 64 / 100;
  const std::size_t val = total * 16 / 100;
  return {train, val, total - train - val};
}

namespace {

// Partial Fisher-Yates: `count` distinct values from [0, n).
std::vector<std::size_t> draw_without_replacement(std::size_t n, std::size_t count, Rng& rng) {
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), 0);
  for (std::size_t i = 0; i < count; ++i) {
    std::swap(pool[i], pool[i + rng.below(n - i)]);
  }
  pool.resize(count);
  return pool;
}

class Fnv1a {
 public:
  void update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001b3ULL;
    }
  }
  void update(const std::string& s) { update(s.data(), s.size()); }
  std::string hex() const {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h_;
    return os.str();
  }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

// Split-local class index -> global class number for generated families.
std::size_t global_class(const std::array<std::size_t, 3>& counts, Split split, std::size_t cls) {
  std::size_t offset = 0;
  for (std::size_t s = 0; s < static_cast<std::size_t>(split); ++s) offset += counts[s];
  return offset + cls;
}

SplitManifest generated_manifest(std::string id, const std::string& prefix,
                                 const std::array<std::size_t, 3>& counts) {
  SplitManifest m;
  m.dataset_id = std::move(id);
  std::size_t g = 0;
  Fnv1a h;
  h.update(m.dataset_id);
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t c = 0; c < counts[s]; ++c, ++g) {
      std::ostringstream name;
      name << prefix << '_' << std::setw(4) << std::setfill('0') << g;
      m.classes[s].push_back(name.str());
      h.update(m.classes[s].back());
    }
  }
  m.checksum = h.hex();
  m.verify_disjoint();
  return m;
}

class BlobSource final : public Source {
 public:
  explicit BlobSource(const BlobConfig& cfg) : cfg_(cfg), counts_(split_counts(cfg.num_classes)) {
    std::ostringstream id;
    id << "blob:d=" << cfg.dim << ",classes=" << cfg.num_classes << ",sep=" << cfg.separation
       << ",noise=" << cfg.noise << ",seed=" << cfg.seed;
    manifest_ = generated_manifest(id.str(), "blob", counts_);
    means_.resize(cfg.num_classes);
    for (std::size_t c = 0; c < cfg.num_classes; ++c) {
      Rng rng(mix_seed(cfg.seed, 0x6d65616eULL, c));
      std::vector<double> dir(cfg.dim);
      double norm = 0.0;
      for (auto& v : dir) {
        v = rng.normal();
        norm += v * v;
      }
      norm = std::sqrt(norm);
      for (auto& v : dir) v = cfg.separation * v / norm;
      means_[c] = std::move(dir);
    }
  }

  const SplitManifest& manifest() const override { return manifest_; }
  Shape sample_shape() const override { return {cfg_.dim}; }
  std::size_t samples_in_class(Split, std::size_t) const override { return cfg_.samples_per_class; }

  std::vector<double> sample(Split split, std::size_t cls, std::size_t index) const override {
    const std::size_t g = global_class(counts_, split, cls);
    Rng rng(mix_seed(cfg_.seed, g + 1, index));
    std::vector<double> x = means_.at(g);
    const double sd = cfg_.noise / std::sqrt(static_cast<double>(cfg_.dim));
    for (auto& v : x) v += sd * rng.normal();
    return x;
  }

 private:
  BlobConfig cfg_;
  std::array<std::size_t, 3> counts_;
  SplitManifest manifest_;
  std::vector<std::vector<double>> means_;
};

enum class Glyph { Square, Circle, Triangle, Cross, Ring, HBar, VBar, Diamond };
constexpr std::size_t kGlyphs = 8;
constexpr std::array<std::array<double, 3>, 8> kColours{{{1.0, 0.0, 0.0},
                                                         {0.0, 1.0, 0.0},
                                                         {0.0, 0.3, 1.0},
                                                         {1.0, 1.0, 0.0},
                                                         {0.0, 1.0, 1.0},
                                                         {1.0, 0.0, 1.0},
                                                         {1.0, 1.0, 1.0},
                                                         {1.0, 0.5, 0.0}}};

bool inside(Glyph g, double dx, double dy, double r) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  const double d = std::sqrt(dx * dx + dy * dy);
  switch (g) {
    case Glyph::Square: return ax <= r && ay <= r;
    case Glyph::Circle: return d <= r;
    case Glyph::Triangle: return dy <= r && dy >= -r && ax <= (dy + r) / 2.0;
    case Glyph::Cross: return (ax <= r / 3.0 && ay <= r) || (ay <= r / 3.0 && ax <= r);
    case Glyph::Ring: return d <= r && d >= 0.55 * r;
    case Glyph::HBar: return ay <= r / 3.0 && ax <= r;
    case Glyph::VBar: return ax <= r / 3.0 && ay <= r;
    case Glyph::Diamond: return ax + ay <= r;
  }
  return false;
}

class ShapeSource final : public Source {
 public:
  explicit ShapeSource(const ShapeConfig& cfg) : cfg_(cfg), counts_(split_counts(cfg.num_classes)) {
    std::ostringstream id;
    id << "shapes:size=" << cfg.image_size << ",classes=" << cfg.num_classes << ",seed=" << cfg.seed;
    manifest_ = generated_manifest(id.str(), "shape", counts_);
    Rng rng(mix_seed(cfg.seed, 0x73686170ULL));
    std::vector<std::size_t> pairs(kGlyphs * kColours.size());
    std::iota(pairs.begin(), pairs.end(), 0);
    for (std::size_t i = pairs.size(); i-- > 1;) std::swap(pairs[i], pairs[rng.below(i + 1)]);
    pairs.resize(cfg.num_classes);
    pairs_ = std::move(pairs);
  }

  const SplitManifest& manifest() const override { return manifest_; }
  Shape sample_shape() const override { return {3, cfg_.image_size, cfg_.image_size}; }
  std::size_t samples_in_class(Split, std::size_t) const override { return cfg_.samples_per_class; }

  std::vector<double> sample(Split split, std::size_t cls, std::size_t index) const override {
    const std::size_t g = global_class(counts_, split, cls);
    const std::size_t pair = pairs_.at(g);
    const auto glyph = static_cast<Glyph>(pair % kGlyphs);
    const auto& colour = kColours[pair / kGlyphs];
    Rng rng(mix_seed(cfg_.seed, g + 1, index));
    const double size = static_cast<double>(cfg_.image_size);
    const double r = rng.uniform(0.22, 0.4) * size;
    const double cx = rng.uniform(r, size - r);
    const double cy = rng.uniform(r, size - r);
    const double brightness = rng.uniform(0.75, 1.0);
    const std::size_t s = cfg_.image_size;
    std::vector<double> img(3 * s * s);
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        const bool on = inside(glyph, static_cast<double>(x) + 0.5 - cx,
                               static_cast<double>(y) + 0.5 - cy, r);
        for (std::size_t ch = 0; ch < 3; ++ch) {
          const double bg = 0.1 * rng.uniform();
          img[(ch * s + y) * s + x] = on ? std::clamp(brightness * colour[ch] + bg, 0.0, 1.0) : bg;
        }
      }
    return img;
  }

 private:
  ShapeConfig cfg_;
  std::array<std::size_t, 3> counts_;
  SplitManifest manifest_;
  std::vector<std::size_t> pairs_;
};

class DirectorySource final : public Source {
 public:
  DirectorySource(SplitManifest manifest, Shape shape,
                  std::array<std::vector<std::vector<std::vector<double>>>, 3> data)
      : manifest_(std::move(manifest)), shape_(std::move(shape)), data_(std::move(data)) {}

  const SplitManifest& manifest() const override { return manifest_; }
  Shape sample_shape() const override { return shape_; }
  std::size_t samples_in_class(Split split, std::size_t cls) const override {
    return data_[static_cast<std::size_t>(split)].at(cls).size();
  }
  std::vector<double> sample(Split split, std::size_t cls, std::size_t index) const override {
    return data_[static_cast<std::size_t>(split)].at(cls).at(index);
  }

 private:
  SplitManifest manifest_;
  Shape shape_;
  std::array<std::vector<std::vector<std::vector<double>>>, 3> data_;
};

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_f64(std::ostream& os, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

}  // namespace

// ---------------------------------------------------------------------------

std::unique_ptr<Source> blob_family(const BlobConfig& cfg) {
  if (cfg.dim < 2) throw DatasetError("blob_family: dimension must be >= 2");
  if (!(cfg.separation >= 0.0)) throw DatasetError("blob_family: separation must be >= 0");
  if (!(cfg.noise > 0.0)) throw DatasetError("blob_family: noise must be > 0");
  if (cfg.num_classes < 3) throw DatasetError("blob_family: need at least 3 classes");
  return std::make_unique<BlobSource>(cfg);
}

std::unique_ptr<Source> shape_family(const ShapeConfig& cfg) {
  if (cfg.image_size < 16 || cfg.image_size % 8 != 0) {
    throw DatasetError("shape_family: image size must be >= 16 and a multiple of 8, got " +
                       std::to_string(cfg.image_size));
  }
  if (cfg.num_classes < 3 || cfg.num_classes > kGlyphs * kColours.size()) {
    throw DatasetError("shape_family: class count must be in [3, 64]");
  }
  return std::make_unique<ShapeSource>(cfg);
}

Episode sample_episode(const Source& source, Split split, std::size_t n_way, std::size_t k_shot,
                       std::size_t n_query, Rng& rng) {
  if (n_way == 0 || k_shot == 0) throw EpisodeError("sample_episode: N and K must be positive");
  if (n_query % n_way != 0) {
    throw EpisodeError("sample_episode: query count " + std::to_string(n_query) +
                       " is not divisible by N = " + std::to_string(n_way));
  }
  const auto& names = source.manifest().of(split);
  if (names.size() < n_way) {
    throw EpisodeError(std::string("sample_episode: split '") + split_name(split) + "' has " +
                       std::to_string(names.size()) + " classes, " + std::to_string(n_way) +
                       " needed (deficit " + std::to_string(n_way - names.size()) + ")");
  }
  const std::size_t per_query = n_query / n_way;
  const std::size_t per_class = k_shot + per_query;

  Episode ep;
  ep.n_way = n_way;
  ep.k_shot = k_shot;
  ep.n_query = n_query;
  const auto classes = draw_without_replacement(names.size(), n_way, rng);
  std::vector<double> sx, qx;
  for (std::size_t label = 0; label < n_way; ++label) {
    const std::size_t cls = classes[label];
    const std::size_t have = source.samples_in_class(split, cls);
    if (have < per_class) {
      throw EpisodeError("sample_episode: class '" + names[cls] + "' has " + std::to_string(have) +
                         " samples, " + std::to_string(per_class) + " needed (deficit " +
                         std::to_string(per_class - have) + ")");
    }
    ep.class_names.push_back(names[cls]);
    const auto picks = draw_without_replacement(have, per_class, rng);
    for (std::size_t i = 0; i < per_class; ++i) {
      auto x = source.sample(split, cls, picks[i]);
      const bool support = i < k_shot;
      auto& dst = support ? sx : qx;
      dst.insert(dst.end(), x.begin(), x.end());
      (support ? ep.support_labels : ep.query_labels).push_back(static_cast<int>(label));
      (support ? ep.support_ids : ep.query_ids).push_back({names[cls], picks[i]});
    }
  }
  Shape s = source.sample_shape();
  Shape support_shape{n_way * k_shot};
  support_shape.insert(support_shape.end(), s.begin(), s.end());
  Shape query_shape{n_query};
  query_shape.insert(query_shape.end(), s.begin(), s.end());
  ep.support_x = Tensor::constant(std::move(support_shape), std::move(sx), "support_x");
  ep.query_x = Tensor::constant(std::move(query_shape), std::move(qx), "query_x");
  return ep;
}

std::vector<Episode> sample_episodes(const Source& source, Split split, std::size_t count,
                                     std::size_t n_way, std::size_t k_shot, std::size_t n_query,
                                     Rng& rng) {
  std::vector<Episode> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(sample_episode(source, split, n_way, k_shot, n_query, rng));
  }
  return out;
}

// ---------------------------------------------------------------------------

void write_sample(const fs::path& path, const Shape& shape, const std::vector<double>& values) {
  if (numel(shape) != values.size()) throw DatasetError("write_sample: shape/value count mismatch");
  if (shape.size() > 255) throw DatasetError("write_sample: rank above 255");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DatasetError("cannot write " + path.string());
  os.write("TPLT", 4);
  os.put(1);
  os.put(static_cast<char>(shape.size()));
  for (auto d : shape) put_u32(os, static_cast<std::uint32_t>(d));
  for (double v : values) put_f64(os, v);
  if (!os) throw DatasetError("write failed: " + path.string());
}

std::pair<Shape, std::vector<double>> read_sample(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DatasetError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  auto fail = [&](const std::string& why) { return DatasetError("malformed sample file " + path.string() + ": " + why); };
  if (bytes.size() < 6 || std::memcmp(bytes.data(), "TPLT", 4) != 0) throw fail("bad magic");
  if (bytes[4] != 1) throw fail("unsupported version " + std::to_string(bytes[4]));
  const std::size_t rank = bytes[5];
  std::size_t pos = 6;
  if (bytes.size() < pos + 4 * rank) throw fail("truncated header");
  Shape shape(rank);
  for (std::size_t r = 0; r < rank; ++r, pos += 4) {
    std::uint32_t d = 0;
    for (int i = 0; i < 4; ++i) d |= static_cast<std::uint32_t>(bytes[pos + i]) << (8 * i);
    shape[r] = d;
  }
  const std::size_t n = numel(shape);
  if (bytes.size() != pos + 8 * n) throw fail("payload size does not match dims");
  std::vector<double> values(n);
  for (std::size_t k = 0; k < n; ++k, pos += 8) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[pos + i]) << (8 * i);
    values[k] = std::bit_cast<double>(bits);
  }
  return {std::move(shape), std::move(values)};
}

std::unique_ptr<Source> load_dataset(const fs::path& root) {
  if (!fs::is_directory(root)) throw DatasetError("dataset root is not a directory: " + root.string());
  SplitManifest manifest;
  manifest.dataset_id = "dir:" + root.filename().string();
  std::array<std::vector<std::vector<std::vector<double>>>, 3> data;
  std::optional<Shape> shape;
  Fnv1a h;
  for (std::size_t s = 0; s < 3; ++s) {
    const fs::path dir = root / split_name(static_cast<Split>(s));
    if (!fs::is_directory(dir)) throw DatasetError("missing split directory " + dir.string());
    std::vector<fs::path> class_dirs;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_directory()) class_dirs.push_back(e.path());
    }
    std::sort(class_dirs.begin(), class_dirs.end());
    for (const auto& cd : class_dirs) {
      manifest.classes[s].push_back(cd.filename().string());
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(cd)) {
        if (e.is_regular_file()) files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
      std::vector<std::vector<double>> samples;
      for (const auto& f : files) {
        auto [sh, values] = read_sample(f);
        if (!shape) shape = sh;
        if (sh != *shape) {
          throw DatasetError("malformed sample file " + f.string() + ": shape " + shape_str(sh) +
                             " differs from " + shape_str(*shape));
        }
        h.update(fs::relative(f, root).generic_string());
        h.update(values.data(), values.size() * sizeof(double));
        samples.push_back(std::move(values));
      }
      data[s].push_back(std::move(samples));
    }
  }
  manifest.verify_disjoint();
  if (!shape) throw DatasetError("dataset " + root.string() + " contains no samples");
  manifest.checksum = h.hex();
  return std::make_unique<DirectorySource>(std::move(manifest), *shape, std::move(data));
}

void write_dataset(const Source& source, const fs::path& root) {
  const Shape shape = source.sample_shape();
  for (std::size_t s = 0; s < 3; ++s) {
    const auto split = static_cast<Split>(s);
    const auto& names = source.manifest().of(split);
    for (std::size_t c = 0; c < names.size(); ++c) {
      const fs::path dir = root / split_name(split) / names[c];
      fs::create_directories(dir);
      for (std::size_t i = 0; i < source.samples_in_class(split, c); ++i) {
        std::ostringstream name;
        name << std::setw(6) << std::setfill('0') << i << ".tplt";
        write_sample(dir / name.str(), shape, source.sample(split, c, i));
      }
    }
  }
}

}  // namespace tapl::episodes
