#include "tapl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace tapl::harness {

namespace {

class Writer {
 public:
  template <class T>
  void put(T v) {
    static_assert(std::is_integral_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      out_.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xffu));
    }
  }
  void put_f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    out_ += s;
  }
  void put_raw(std::string_view s) { out_ += s; }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}

  template <class T>
  T get() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  double get_f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(in_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::string_view get_raw(std::size_t n) {
    need(n);
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) {
      throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
    }
  }

  std::string_view in_;
  std::size_t pos_ = 0;
};

void put_doubles(Writer& w, const std::vector<double>& v) {
  w.put(static_cast<std::uint32_t>(v.size()));
  for (double d : v) w.put_f64(d);
}

std::vector<double> get_doubles(Reader& r) {
  std::vector<double> v(r.get<std::uint32_t>());
  for (auto& d : v) d = r.get_f64();
  return v;
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& c) {
  Writer w;
  w.put_raw("TAPL");
  w.put(kCheckpointVersion);
  w.put_string(c.config);

  w.put(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    if (t.shape.size() > 255) throw CheckpointError("tensor rank above 255");
    if (numel(t.shape) != t.values.size()) throw CheckpointError("tensor record shape/value mismatch");
    w.put(static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) w.put(static_cast<std::uint32_t>(d));
    for (double v : t.values) w.put_f64(v);
  }

  w.put(static_cast<std::uint64_t>(c.adam.t));
  w.put_f64(c.adam.beta1);
  w.put_f64(c.adam.beta2);
  w.put_f64(c.adam.eps);
  if (c.adam.m.size() != c.adam.v.size()) throw CheckpointError("optimizer moments differ in length");
  w.put(static_cast<std::uint32_t>(c.adam.m.size()));
  for (std::size_t i = 0; i < c.adam.m.size(); ++i) {
    put_doubles(w, c.adam.m[i]);
    put_doubles(w, c.adam.v[i]);
  }

  w.put(static_cast<std::uint32_t>(c.rng_states.size()));
  for (const auto& [name, state] : c.rng_states) {
    w.put_string(name);
    w.put_string(state);
  }
  w.put(c.iteration);
  return w.take();
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.get_raw(4) != "TAPL") throw CheckpointError("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint format version " + std::to_string(version) +
                          " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint c;
  c.config = r.get_string();

  c.tensors.resize(r.get<std::uint32_t>());
  for (auto& t : c.tensors) {
    t.shape.resize(r.get<std::uint8_t>());
    for (auto& d : t.shape) d = r.get<std::uint32_t>();
    t.values.resize(numel(t.shape));
    for (auto& v : t.values) v = r.get_f64();
  }

  c.adam.t = r.get<std::uint64_t>();
  c.adam.beta1 = r.get_f64();
  c.adam.beta2 = r.get_f64();
  c.adam.eps = r.get_f64();
  const auto slots = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < slots; ++i) {
    c.adam.m.push_back(get_doubles(r));
    c.adam.v.push_back(get_doubles(r));
  }

  const auto rngs = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < rngs; ++i) {
    auto name = r.get_string();
    auto state = r.get_string();
    c.rng_states.emplace_back(std::move(name), std::move(state));
  }
  c.iteration = r.get<std::uint64_t>();
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint");
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(ckpt);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot write checkpoint " + path.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw CheckpointError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  try {
    return decode_checkpoint(ss.str());
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

std::vector<TensorRecord> capture(const metaloop::MetaParams& params) {
  std::vector<TensorRecord> out;
  for (const auto& t : params.flat()) {
    out.push_back({t.shape(), std::vector<double>(t.values().begin(), t.values().end())});
  }
  return out;
}

metaloop::MetaParams restore(const metaloop::MetaParams& like, const std::vector<TensorRecord>& records) {
  const auto flat = like.flat();
  if (flat.size() != records.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(records.size()) + " tensors, model has " +
                          std::to_string(flat.size()));
  }
  std::vector<std::vector<double>> values;
  for (std::size_t i = 0; i < flat.size(); ++i) {
    if (flat[i].shape() != records[i].shape) {
      throw CheckpointError("tensor " + std::to_string(i) + " has shape " + shape_str(records[i].shape) +
                            " in the checkpoint, model expects " + shape_str(flat[i].shape()));
    }
    values.push_back(records[i].values);
  }
  return like.with_values(values);
}

const std::string& rng_state(const Checkpoint& ckpt, std::string_view name) {
  for (const auto& [n, s] : ckpt.rng_states) {
    if (n == name) return s;
  }
  throw CheckpointError("checkpoint has no rng stream '" + std::string(name) + "'");
}

}  // namespace tapl::harness
