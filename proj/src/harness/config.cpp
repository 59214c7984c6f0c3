#include "tapl/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace tapl::harness {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("invalid value for '" + key + "': '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError("invalid boolean for '" + key + "': '" + v + "' (use true or false)");
}

// One entry per key: how to read it into a config and how to print it.
struct Field {
  std::function<void(RunConfig&, const std::string&)> read;
  std::function<std::string(const RunConfig&)> write;
};

#define TAPL_NUM(member, type)                                                                   \
  Field {                                                                                        \
    [](RunConfig& c, const std::string& v) { c.member = parse_number<type>(#member, v); },       \
        [](const RunConfig& c) {                                                                 \
          if constexpr (std::is_floating_point_v<type>) return fmt_double(c.member);             \
          else return std::to_string(c.member);                                                  \
        }                                                                                        \
  }

#define TAPL_BOOL(member)                                                                \
  Field {                                                                                \
    [](RunConfig& c, const std::string& v) { c.member = parse_bool(#member, v); },       \
        [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); }      \
  }

using Schema = std::vector<std::pair<std::string, std::vector<std::pair<std::string, Field>>>>;

const Schema& schema() {
  static const Schema s = {
      {"task",
       {{"family",
         {[](RunConfig& c, const std::string& v) {
            if (v == "blob") c.task.family = Family::Blob;
            else if (v == "shapes") c.task.family = Family::Shapes;
            else if (v == "directory") c.task.family = Family::Directory;
            else throw ConfigError("task.family must be blob, shapes or directory, got '" + v + "'");
          },
          [](const RunConfig& c) {
            switch (c.task.family) {
              case Family::Blob: return std::string("blob");
              case Family::Shapes: return std::string("shapes");
              case Family::Directory: return std::string("directory");
            }
            return std::string();
          }}},
        {"dim", TAPL_NUM(task.dim, std::size_t)},
        {"num_classes", TAPL_NUM(task.num_classes, std::size_t)},
        {"separation", TAPL_NUM(task.separation, double)},
        {"noise", TAPL_NUM(task.noise, double)},
        {"samples_per_class", TAPL_NUM(task.samples_per_class, std::size_t)},
        {"image_size", TAPL_NUM(task.image_size, std::size_t)},
        {"root",
         {[](RunConfig& c, const std::string& v) { c.task.root = v; },
          [](const RunConfig& c) { return c.task.root; }}},
        {"data_seed", TAPL_NUM(task.data_seed, std::uint64_t)},
        {"n_way", TAPL_NUM(task.n_way, std::size_t)},
        {"k_shot", TAPL_NUM(task.k_shot, std::size_t)},
        {"n_query", TAPL_NUM(task.n_query, std::size_t)}}},
      {"model",
       {{"arch",
         {[](RunConfig& c, const std::string& v) {
            if (v == "mlp") c.model.arch = nets::Arch::Mlp;
            else if (v == "conv4") c.model.arch = nets::Arch::Conv4;
            else throw ConfigError("model.arch must be mlp or conv4, got '" + v + "'");
          },
          [](const RunConfig& c) {
            return std::string(c.model.arch == nets::Arch::Conv4 ? "conv4" : "mlp");
          }}},
        {"hidden", TAPL_NUM(model.hidden, std::size_t)},
        {"depth", TAPL_NUM(model.depth, std::size_t)},
        {"conv_width", TAPL_NUM(model.conv_width, std::size_t)},
        {"graph_layers", TAPL_NUM(model.graph_layers, std::size_t)},
        {"graph_hidden", TAPL_NUM(model.graph_hidden, std::size_t)},
        {"modulator_hidden", TAPL_NUM(model.modulator_hidden, std::size_t)}}},
      {"propagation",
       {{"alpha_init", TAPL_NUM(propagation.alpha_init, double)},
        {"knn", TAPL_NUM(propagation.knn, std::size_t)}}},
      {"adapt",
       {{"inner_steps", TAPL_NUM(adapt.inner_steps, std::size_t)},
        {"inner_lr", TAPL_NUM(adapt.inner_lr, double)},
        {"outer_lr", TAPL_NUM(adapt.outer_lr, double)},
        {"meta_batch", TAPL_NUM(adapt.meta_batch, std::size_t)},
        {"prop_weight", TAPL_NUM(adapt.prop_weight, double)},
        {"second_order", TAPL_BOOL(adapt.second_order)}}},
      {"train",
       {{"iterations", TAPL_NUM(train.iterations, std::size_t)},
        {"seed", TAPL_NUM(train.seed, std::uint64_t)},
        {"checkpoint_every", TAPL_NUM(train.checkpoint_every, std::size_t)},
        {"eval_episodes", TAPL_NUM(train.eval_episodes, std::size_t)},
        {"eval_seed", TAPL_NUM(train.eval_seed, std::uint64_t)},
        {"record_wall_time", TAPL_BOOL(train.record_wall_time)},
        {"modulation",
         {[](RunConfig& c, const std::string& v) {
            using metaloop::Modulation;
            if (v == "task") c.train.modulation = Modulation::Task;
            else if (v == "ones") c.train.modulation = Modulation::ForcedOnes;
            else if (v == "off") c.train.modulation = Modulation::Bypass;
            else throw ConfigError("train.modulation must be task, ones or off, got '" + v + "'");
          },
          [](const RunConfig& c) {
            switch (c.train.modulation) {
              case metaloop::Modulation::Task: return std::string("task");
              case metaloop::Modulation::ForcedOnes: return std::string("ones");
              case metaloop::Modulation::Bypass: return std::string("off");
            }
            return std::string();
          }}},
        {"pseudo_labels", TAPL_BOOL(train.pseudo_labels)}}},
  };
  return s;
}

#undef TAPL_NUM
#undef TAPL_BOOL

void validate(const RunConfig& c) {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  need(c.task.n_way >= 2, "task.n_way must be >= 2");
  need(c.task.k_shot >= 1, "task.k_shot must be >= 1");
  need(c.task.n_query % c.task.n_way == 0, "task.n_query must be divisible by task.n_way");
  need(c.task.family != Family::Directory || !c.task.root.empty(), "task.root is required for family = directory");
  need(c.adapt.inner_lr >= 0.0, "adapt.inner_lr must be >= 0");
  need(c.adapt.outer_lr >= 0.0, "adapt.outer_lr must be >= 0");
  need(c.adapt.prop_weight >= 0.0, "adapt.prop_weight must be >= 0");
  need(c.adapt.meta_batch >= 1, "adapt.meta_batch must be >= 1");
  need(c.propagation.alpha_init > 0.0 && c.propagation.alpha_init < 1.0, "propagation.alpha_init must lie in (0, 1)");
  need(c.model.graph_layers >= 1, "model.graph_layers must be >= 1");
  need(c.model.depth >= 1, "model.depth must be >= 1");
}

}  // namespace

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig c;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  const std::vector<std::pair<std::string, Field>>* section = nullptr;
  std::string section_name;
  std::set<std::string> seen;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const std::string where = "line " + std::to_string(lineno) + ": ";
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError(where + "malformed section header '" + t + "'");
      section_name = trim(std::string_view(t).substr(1, t.size() - 2));
      section = nullptr;
      for (const auto& [name, fields] : schema()) {
        if (name == section_name) section = &fields;
      }
      if (!section) throw ConfigError(where + "unknown section [" + section_name + "]");
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value', got '" + t + "'");
    if (!section) throw ConfigError(where + "key outside of any section");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string value = trim(std::string_view(t).substr(eq + 1));
    const Field* field = nullptr;
    for (const auto& [name, f] : *section) {
      if (name == key) field = &f;
    }
    if (!field) throw ConfigError(where + "unknown key '" + key + "' in [" + section_name + "]");
    if (!seen.insert(section_name + "." + key).second) {
      throw ConfigError(where + "duplicate key '" + section_name + "." + key + "'");
    }
    try {
      field->read(c, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  validate(c);
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  bool first = true;
  for (const auto& [name, fields] : schema()) {
    if (!first) os << '\n';
    first = false;
    os << '[' << name << "]\n";
    for (const auto& [key, f] : fields) os << key << " = " << f.write(*this) << '\n';
  }
  return os.str();
}

metaloop::PipelineConfig RunConfig::pipeline(const Shape& sample_shape) const {
  metaloop::PipelineConfig p;
  if (model.arch == nets::Arch::Mlp) {
    if (sample_shape.size() != 1) {
      throw ConfigError("model.arch = mlp needs flat samples, data has shape " + shape_str(sample_shape));
    }
    p.backbone.input_dim = sample_shape[0];
  } else {
    if (sample_shape.size() != 3) {
      throw ConfigError("model.arch = conv4 needs C x H x W samples, data has shape " + shape_str(sample_shape));
    }
    p.backbone.channels = sample_shape[0];
    p.backbone.height = sample_shape[1];
    p.backbone.width = sample_shape[2];
  }
  p.n_way = task.n_way;
  p.k_shot = task.k_shot;
  p.n_query = task.n_query;
  p.backbone.arch = model.arch;
  p.backbone.n_way = task.n_way;
  p.backbone.hidden = model.hidden;
  p.backbone.depth = model.depth;
  p.backbone.conv_width = model.conv_width;
  p.graph_layers = model.graph_layers;
  p.graph_hidden = model.graph_hidden;
  p.modulator_hidden = model.modulator_hidden;
  p.knn = propagation.knn;
  p.adapt = {adapt.inner_steps, adapt.inner_lr, adapt.outer_lr, adapt.meta_batch, adapt.prop_weight,
             adapt.second_order};
  p.modulation = train.modulation;
  p.pseudo_labels = train.pseudo_labels;
  return p;
}

std::unique_ptr<episodes::Source> RunConfig::make_source() const {
  switch (task.family) {
    case Family::Blob:
      return episodes::blob_family({task.dim, task.num_classes, task.separation, task.noise,
                                    task.data_seed, task.samples_per_class});
    case Family::Shapes:
      return episodes::shape_family({task.image_size, task.num_classes, task.data_seed,
                                     task.samples_per_class});
    case Family::Directory:
      return episodes::load_dataset(task.root);
  }
  throw ConfigError("unknown task family");
}

}  // namespace tapl::harness
