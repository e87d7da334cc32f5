// SPDX-License-Identifier: Apache-2.0
#include "lmlite/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "lmlite/rng.hpp"

namespace lmlite::config {

namespace pt = boost::property_tree;

tok::TokenizerConfig RunConfig::desk_tokenizer() {
  tok::TokenizerConfig t;
  t.max_crop = 3;
  t.min_timesteps = 3;
  t.max_timesteps = 3;
  return t;
}

train::OptimConfig RunConfig::desk_optim() {
  train::OptimConfig o;
  o.batch_size = 8;
  o.micro_batch_size = 8;
  return o;
}

namespace {

std::string format(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}
std::string format(bool v) { return v ? "true" : "false"; }
template <typename T>
  requires std::is_integral_v<T>
std::string format(T v) {
  return std::to_string(v);
}

void parse_value(const std::string& s, double& out) {
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("expected a number, got '" + s + "'");
}
void parse_value(const std::string& s, bool& out) {
  if (s == "true" || s == "1") out = true;
  else if (s == "false" || s == "0") out = false;
  else throw ConfigError("expected true or false, got '" + s + "'");
}
template <typename T>
  requires std::is_integral_v<T>
void parse_value(const std::string& s, T& out) {
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("expected an integer, got '" + s + "'");
}

template <std::size_t N>
std::string format_probs(const std::array<double, N>& a) {
  std::string out;
  for (std::size_t i = 0; i < N; ++i) out += (i ? "," : "") + format(a[i]);
  return out;
}
template <std::size_t N>
void parse_probs(const std::string& s, std::array<double, N>& a) {
  std::stringstream ss(s);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i == N) throw ConfigError("expected " + std::to_string(N) + " comma-separated values");
    parse_value(item, a[i++]);
  }
  if (i != N) throw ConfigError("expected " + std::to_string(N) + " comma-separated values");
}

struct Field {
  std::string section;  // empty for top-level
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;

  std::string full() const { return section.empty() ? key : section + "." + key; }
};

template <typename T>
Field field(std::string section, std::string key, T& (*ref)(RunConfig&)) {
  return {std::move(section), std::move(key),
          [ref](const RunConfig& c) { return format(ref(const_cast<RunConfig&>(c))); },
          [ref](RunConfig& c, const std::string& s) { parse_value(s, ref(c)); }};
}

Field text(std::string section, std::string key, std::string& (*ref)(RunConfig&),
           std::function<void(const std::string&)> check = {}) {
  return {std::move(section), std::move(key), [ref](const RunConfig& c) { return ref(const_cast<RunConfig&>(c)); },
          [ref, check](RunConfig& c, const std::string& s) {
            if (check) check(s);
            ref(c) = s;
          }};
}

#define LMLITE_REF(expr) +[](RunConfig& c) -> auto& { return expr; }

const std::vector<Field>& fields() {
  static const std::vector<Field> all = [] {
    std::vector<Field> f;
    f.push_back(field("", "seed", LMLITE_REF(c.seed)));
    f.push_back(field("", "threads", LMLITE_REF(c.threads)));
    f.push_back(field("", "checkpoint_every", LMLITE_REF(c.checkpoint_every)));
    f.push_back(field("", "probe_samples", LMLITE_REF(c.probe_samples)));
    f.push_back(field("", "collapse_fraction", LMLITE_REF(c.collapse_fraction)));

    f.push_back(field("data", "count", LMLITE_REF(c.data.count)));
    f.push_back(field("data", "map_classes", LMLITE_REF(c.data.map_classes)));
    f.push_back(field("data", "height", LMLITE_REF(c.data.height)));
    f.push_back(field("data", "width", LMLITE_REF(c.data.width)));
    f.push_back(field("data", "min_timesteps", LMLITE_REF(c.data.min_timesteps)));
    f.push_back(field("data", "max_timesteps", LMLITE_REF(c.data.max_timesteps)));
    f.push_back(field("data", "latent_channels", LMLITE_REF(c.data.latent_channels)));
    f.push_back(field("data", "noise_scale", LMLITE_REF(c.data.noise_scale)));
    f.push_back(field("data", "nuisance_scale", LMLITE_REF(c.data.nuisance_scale)));
    f.push_back(field("data", "presence_prob", LMLITE_REF(c.data.presence_prob)));
    f.push_back(field("data", "modality_drop_prob", LMLITE_REF(c.data.modality_drop_prob)));
    f.push_back(field("data", "mixing_seed", LMLITE_REF(c.data.mixing_seed)));

    f.push_back(field("tokenizer", "base_patch_size", LMLITE_REF(c.tokenizer.base_patch_size)));
    f.push_back(field("tokenizer", "min_patch_size", LMLITE_REF(c.tokenizer.min_patch_size)));
    f.push_back(field("tokenizer", "max_patch_size", LMLITE_REF(c.tokenizer.max_patch_size)));
    f.push_back(field("tokenizer", "min_crop", LMLITE_REF(c.tokenizer.min_crop)));
    f.push_back(field("tokenizer", "max_crop", LMLITE_REF(c.tokenizer.max_crop)));
    f.push_back(field("tokenizer", "min_timesteps", LMLITE_REF(c.tokenizer.min_timesteps)));
    f.push_back(field("tokenizer", "max_timesteps", LMLITE_REF(c.tokenizer.max_timesteps)));

    f.push_back(field("masking", "mask_ratio", LMLITE_REF(c.masking.mask_ratio)));
    f.push_back({"masking", "observation_probs", [](const RunConfig& c) { return format_probs(c.masking.observation_probs); },
                 [](RunConfig& c, const std::string& s) { parse_probs(s, c.masking.observation_probs); }});
    f.push_back({"masking", "map_probs", [](const RunConfig& c) { return format_probs(c.masking.map_probs); },
                 [](RunConfig& c, const std::string& s) { parse_probs(s, c.masking.map_probs); }});
    f.push_back(field("masking", "min_encoded", LMLITE_REF(c.masking.min_encoded)));
    f.push_back(field("masking", "min_decoded", LMLITE_REF(c.masking.min_decoded)));
    f.push_back(field("masking", "max_retries", LMLITE_REF(c.masking.max_retries)));
    f.push_back({"masking", "mode", [](const RunConfig& c) { return mask::to_string(c.masking.mode); },
                 [](RunConfig& c, const std::string& s) { c.masking.mode = mask::masking_mode_from_string(s); }});

    f.push_back(field("model", "depth", LMLITE_REF(c.model.encoder.depth)));
    f.push_back(field("model", "dim", LMLITE_REF(c.model.encoder.dim)));
    f.push_back(field("model", "heads", LMLITE_REF(c.model.encoder.heads)));
    f.push_back(field("model", "mlp_ratio", LMLITE_REF(c.model.encoder.mlp_ratio)));
    f.push_back(field("model", "decoder_depth", LMLITE_REF(c.model.decoder.depth)));
    f.push_back(field("model", "decoder_self_attention", LMLITE_REF(c.model.decoder.query_self_attention)));

    f.push_back(field("loss", "tau_patch", LMLITE_REF(c.loss.tau_patch)));
    f.push_back(field("loss", "tau_inst", LMLITE_REF(c.loss.tau_inst)));
    f.push_back(field("loss", "lambda_inst", LMLITE_REF(c.loss.lambda_inst)));
    f.push_back({"loss", "negative_scope", [](const RunConfig& c) { return obj::to_string(c.loss.negative_scope); },
                 [](RunConfig& c, const std::string& s) { c.loss.negative_scope = obj::negative_scope_from_string(s); }});
    f.push_back({"loss", "scope_unit", [](const RunConfig& c) { return obj::to_string(c.loss.scope_unit); },
                 [](RunConfig& c, const std::string& s) { c.loss.scope_unit = obj::scope_unit_from_string(s); }});
    f.push_back(field("loss", "smooth_l1_beta", LMLITE_REF(c.loss.smooth_l1_beta)));
    f.push_back(field("loss", "ema_momentum", LMLITE_REF(c.loss.ema_momentum)));

    f.push_back(field("optim", "base_lr", LMLITE_REF(c.optim.base_lr)));
    f.push_back(field("optim", "weight_decay", LMLITE_REF(c.optim.weight_decay)));
    f.push_back(field("optim", "batch_size", LMLITE_REF(c.optim.batch_size)));
    f.push_back(field("optim", "micro_batch_size", LMLITE_REF(c.optim.micro_batch_size)));
    f.push_back(field("optim", "warmup_steps", LMLITE_REF(c.optim.warmup_steps)));
    f.push_back(field("optim", "total_steps", LMLITE_REF(c.optim.total_steps)));
    f.push_back(field("optim", "final_lr_fraction", LMLITE_REF(c.optim.final_lr_fraction)));
    f.push_back(field("optim", "beta1", LMLITE_REF(c.optim.beta1)));
    f.push_back(field("optim", "beta2", LMLITE_REF(c.optim.beta2)));
    f.push_back(field("optim", "eps", LMLITE_REF(c.optim.eps)));

    f.push_back(text("eval", "task", LMLITE_REF(c.eval.task), [](const std::string& s) { task_spec(s); }));
    f.push_back(field("eval", "task_count", LMLITE_REF(c.eval.task_count)));
    f.push_back(field("eval", "k", LMLITE_REF(c.eval.k)));
    f.push_back(field("eval", "patch_size", LMLITE_REF(c.eval.patch_size)));
    f.push_back(field("eval", "max_timesteps", LMLITE_REF(c.eval.max_timesteps)));
    f.push_back(text("eval", "pooling", LMLITE_REF(c.eval.pooling)));
    f.push_back(text("eval", "norm", LMLITE_REF(c.eval.norm)));
    f.push_back(field("eval", "probe_epochs", LMLITE_REF(c.eval.probe_epochs)));
    f.push_back(field("eval", "finetune_epochs", LMLITE_REF(c.eval.finetune_epochs)));
    f.push_back(field("eval", "finetune_lr", LMLITE_REF(c.eval.finetune_lr)));
    f.push_back(field("eval", "finetune_weight_decay", LMLITE_REF(c.eval.finetune_weight_decay)));
    f.push_back(field("eval", "finetune_batch", LMLITE_REF(c.eval.finetune_batch)));
    f.push_back(field("eval", "finetune_max_timesteps", LMLITE_REF(c.eval.finetune_max_timesteps)));
    f.push_back(text("eval", "head", LMLITE_REF(c.eval.head),
                     [](const std::string& s) { eval::head_kind_from_string(s); }));

    f.push_back(text("ablation", "name", LMLITE_REF(c.ablation.name)));
    f.push_back(text("ablation", "target", LMLITE_REF(c.ablation.target),
                     [](const std::string& s) { model::target_mode_from_string(s); }));
    f.push_back(field("ablation", "use_maps", LMLITE_REF(c.ablation.use_maps)));
    return f;
  }();
  return all;
}

#undef LMLITE_REF

const Field* find_field(const std::string& section, const std::string& key) {
  for (const auto& f : fields()) {
    if (f.section == section && f.key == key) return &f;
  }
  return nullptr;
}

void set_field(RunConfig& c, const std::string& section, const std::string& key, const std::string& value,
               const std::string& where) {
  const Field* f = find_field(section, key);
  if (!f) {
    throw ConfigError(where + "unknown key '" + (section.empty() ? key : section + "." + key) + "'");
  }
  try {
    f->set(c, value);
  } catch (const ConfigError& e) {
    throw ConfigError(where + f->full() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(where + f->full() + ": " + e.what());
  }
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

RunConfig parse(const std::string& text) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config line " + std::to_string(e.line()) + ": " + e.message());
  }
  RunConfig c;
  for (const auto& [name, node] : tree) {
    if (node.empty()) {
      set_field(c, "", name, node.data(), "config: ");
      continue;
    }
    const bool known_section = std::any_of(fields().begin(), fields().end(),
                                           [&](const Field& f) { return f.section == name; });
    if (!known_section) throw ConfigError("config: unknown section [" + name + "]");
    for (const auto& [key, leaf] : node) set_field(c, name, key, leaf.data(), "config: ");
  }
  return c;
}

RunConfig load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string lhs = assignment.substr(0, eq);
  const auto dot = lhs.find('.');
  const std::string section = dot == std::string::npos ? "" : lhs.substr(0, dot);
  const std::string key = dot == std::string::npos ? lhs : lhs.substr(dot + 1);
  set_field(c, section, key, assignment.substr(eq + 1), "override: ");
}

std::string serialize(const RunConfig& c) {
  std::ostringstream os;
  std::string section = "\x01";
  for (const auto& f : fields()) {
    if (f.section != section) {
      section = f.section;
      if (!section.empty()) os << "\n[" << section << "]\n";
    }
    os << f.key << " = " << f.get(c) << "\n";
  }
  return os.str();
}

std::vector<std::string> known_keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.push_back(f.full());
  return out;
}

std::vector<std::string> check(const RunConfig& c) {
  std::vector<std::string> errors;
  auto guard = [&](const std::string& what, auto&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      errors.push_back(what + ": " + e.what());
    }
  };
  guard("data", [&] { data::synth_generate(0, 0, generator(c)); });
  if (c.threads < 1) errors.push_back("threads must be >= 1");
  if (c.eval.k < 1) errors.push_back("eval.k must be >= 1");
  if (c.eval.task_count < 10) errors.push_back("eval.task_count must be >= 10");
  guard("eval.pooling", [&] {
    const auto items = split_list(c.eval.pooling);
    if (items.empty()) throw std::invalid_argument("empty sweep");
    for (const auto& p : items) eval::pooling_from_string(p);
  });
  guard("eval.norm", [&] {
    const auto items = split_list(c.eval.norm);
    if (items.empty()) throw std::invalid_argument("empty sweep");
    for (const auto& p : items) {
      if (p != "pretraining" && p != "eval_set") throw std::invalid_argument("unknown norm '" + p + "'");
    }
  });
  const train::PretrainConfig pc = pretrain_config(c);
  for (auto& e : train::check(pc)) errors.push_back(std::move(e));
  return errors;
}

data::GeneratorConfig generator(const RunConfig& c) {
  data::GeneratorConfig g;
  g.registry = data::Registry::default_registry(c.data.map_classes);
  g.height = c.data.height;
  g.width = c.data.width;
  g.min_timesteps = c.data.min_timesteps;
  g.max_timesteps = c.data.max_timesteps;
  g.latent_channels = c.data.latent_channels;
  g.noise_scale = c.data.noise_scale;
  g.nuisance_scale = c.data.nuisance_scale;
  g.presence_prob = c.data.presence_prob;
  g.modality_drop_prob = c.data.modality_drop_prob;
  g.mixing_seed = c.data.mixing_seed;
  return g;
}

train::PretrainConfig pretrain_config(const RunConfig& c) {
  train::PretrainConfig p;
  p.registry = data::Registry::default_registry(c.data.map_classes);
  p.tokenizer = c.tokenizer;
  p.tokenizer.model_dim = c.model.encoder.dim;
  p.masking = c.masking;
  p.model = c.model;
  p.model.base_patch_size = c.tokenizer.base_patch_size;
  p.loss = c.loss;
  p.optim = c.optim;
  p.target_mode = model::target_mode_from_string(c.ablation.target);
  p.use_maps = c.ablation.use_maps;
  p.seed = c.seed;
  p.checkpoint_every = c.checkpoint_every;
  p.probe_samples = c.probe_samples;
  p.collapse_fraction = c.collapse_fraction;
  p.threads = c.threads;
  return p;
}

void set_ablation(RunConfig& c, const train::AblationSpec& spec) {
  c.ablation.name = spec.name;
  c.ablation.target = model::to_string(spec.target_mode);
  c.ablation.use_maps = spec.use_maps;
  c.masking.mode = spec.masking_mode;
  c.loss.negative_scope = spec.negative_scope;
  c.loss.lambda_inst = spec.lambda_inst;
}

// ---------------------------------------------------------------------------

TaskSpec task_spec(const std::string& name) {
  if (name == "cls5") return {name, false, 5};
  if (name == "cls3") return {name, false, 3};
  if (name == "seg5") return {name, true, 5};
  throw std::invalid_argument("unknown task '" + name + "' (expected cls5, cls3 or seg5)");
}

std::vector<std::string> task_names() { return {"cls5", "cls3", "seg5"}; }

eval::TaskData make_task(const RunConfig& c, const std::string& name) {
  const TaskSpec spec = task_spec(name);
  data::GeneratorConfig g = generator(c);
  g.registry = data::Registry::default_registry(spec.num_classes);
  auto samples = data::synth_generate(derive_seed(c.seed, "task:" + name), c.eval.task_count, g);

  eval::TaskData task;
  task.name = name;
  task.segmentation = spec.segmentation;
  task.num_classes = spec.num_classes;
  for (const auto& b : g.registry.bandsets()) {
    if (b.kind == data::ModalityKind::Map) task.map_bandset = b.spec.id;
  }
  // Order by location id so the split does not depend on generation order.
  std::stable_sort(samples.begin(), samples.end(),
                   [](const data::Sample& a, const data::Sample& b) { return a.location_id < b.location_id; });
  const std::size_t n = samples.size();
  const std::size_t n_train = n * 3 / 5;
  const std::size_t n_val = n / 5;
  for (std::size_t i = 0; i < n; ++i) {
    auto& dst = i < n_train ? task.train : i < n_train + n_val ? task.val : task.test;
    dst.push_back(std::move(samples[i]));
  }
  eval::check_splits(task);
  return task;
}

}  // namespace lmlite::config
