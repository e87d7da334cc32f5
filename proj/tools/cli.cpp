// SPDX-License-Identifier: Apache-2.0
#include "cli.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "lmlite/rng.hpp"

namespace lmlite::cli {

using nlohmann::json;

fs::path default_out_root() {
  const char* env = std::getenv(kOutRootEnv);
  return env && *env ? fs::path(env) : fs::path("runs");
}

namespace {

struct Flags {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::string out;
  std::string data;
  std::string checkpoint;
  std::string task;
  std::string mode = "knn";
  std::string matrix;
  std::optional<std::size_t> count;
  bool dry_run = false;
  bool force = false;
};

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << text;
}

config::RunConfig resolve_config(const Flags& f) {
  config::RunConfig c = f.config_path.empty() ? config::RunConfig{} : config::load(f.config_path);
  for (const auto& s : f.sets) config::apply_override(c, s);
  if (f.seed) c.seed = *f.seed;
  if (f.threads) c.threads = *f.threads;
  return c;
}

void require_valid(const config::RunConfig& c) {
  const auto errors = config::check(c);
  if (errors.empty()) return;
  std::string msg = "invalid config (" + std::to_string(errors.size()) + " problem" + (errors.size() > 1 ? "s" : "") +
                    "):";
  for (const auto& e : errors) msg += "\n  - " + e;
  throw UsageError(msg);
}

bool non_empty_dir(const fs::path& p) { return fs::exists(p) && fs::is_directory(p) && !fs::is_empty(p); }

// Prepares an output directory. Without --force an existing non-empty
// directory is refused; with it, only files matching `owned` are removed.
void prepare_out(const fs::path& dir, bool force, const std::function<bool(const fs::path&)>& owned) {
  if (fs::exists(dir) && !fs::is_directory(dir)) throw UsageError(dir.string() + " exists and is not a directory");
  if (non_empty_dir(dir)) {
    if (!force) throw UsageError("refusing to write into non-empty directory " + dir.string() + " (use --force)");
    for (const auto& e : fs::directory_iterator(dir)) {
      if (owned(e.path())) fs::remove_all(e.path());
    }
  }
  fs::create_directories(dir);
}

fs::path out_dir(const Flags& f, const std::string& fallback) {
  return f.out.empty() ? default_out_root() / fallback : fs::path(f.out);
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

// ---------------------------------------------------------------------------

int cmd_synth(const Flags& f, std::ostream& out) {
  config::RunConfig c = resolve_config(f);
  if (f.count) c.data.count = *f.count;
  require_valid(c);
  const fs::path dir = out_dir(f, "data-" + std::to_string(c.seed));
  prepare_out(dir, f.force, [](const fs::path& p) {
    const auto name = p.filename().string();
    return name == "manifest.json" || name == "config.ini" || name.starts_with("sample_");
  });
  const auto gen = config::generator(c);
  const auto samples = data::synth_generate(c.seed, c.data.count, gen);
  const auto manifest = data::write_dataset(dir, samples, c.seed, gen);
  write_file(dir / "config.ini", config::serialize(c));
  out << "wrote " << manifest.count << " samples to " << dir.string() << " (generator " << hex64(manifest.generator_hash)
      << ", content " << hex64(manifest.content_hash) << ")\n";
  return 0;
}

std::vector<data::Sample> load_data(const Flags& f, const config::RunConfig& c) {
  if (f.data.empty()) throw UsageError("--data is required");
  data::DatasetManifest m;
  auto samples = data::read_dataset(f.data, &m);
  const data::Registry reg = data::Registry::default_registry(c.data.map_classes);
  for (const auto& id : m.bandsets) {
    if (!reg.find_bandset(id)) throw UsageError("dataset bandset '" + id + "' is not in the configured registry");
  }
  return samples;
}

bool pretrain_owned(const fs::path& p) {
  const auto name = p.filename().string();
  return name == "config.ini" || name == "metrics.jsonl" || name == "checkpoints.jsonl" || name == "summary.json" ||
         name.starts_with("ckpt_");
}

json summary_json(const train::PretrainResult& r) {
  json j;
  j["steps"] = r.state.step;
  j["halted"] = r.halted;
  j["halt_reason"] = r.halt_reason;
  j["frozen_hash"] = hex64(r.frozen_hash);
  j["initial_target_variance"] = r.initial_target_variance;
  j["collapse_detected"] = r.collapse_detected;
  j["collapse_step"] = r.collapse_step ? json(*r.collapse_step) : json(nullptr);
  json ck = json::array();
  for (const auto& c : r.checkpoints) {
    ck.push_back({{"step", c.step}, {"file", c.path.filename().string()}, {"probe_target_variance", c.probe_variance}});
  }
  j["checkpoints"] = ck;
  return j;
}

int cmd_pretrain(const Flags& f, std::ostream& out, std::ostream& err) {
  config::RunConfig c = resolve_config(f);
  require_valid(c);
  const train::PretrainConfig pc = config::pretrain_config(c);
  const std::string text = config::serialize(c);
  if (f.dry_run) {
    out << text << "\n# learned parameters: "
        << model::learned_param_count(pc.model, train::effective_registry(pc), pc.target_mode) << "\n";
    return 0;
  }
  const auto samples = load_data(f, c);
  const fs::path dir = out_dir(f, "pretrain-" + std::to_string(c.seed));
  train::PretrainOptions opt;
  opt.out_dir = dir;
  opt.config_text = text;
  if (!f.checkpoint.empty()) {
    opt.resume_from = fs::path(f.checkpoint);
    fs::create_directories(dir);
  } else {
    prepare_out(dir, f.force, pretrain_owned);
  }
  write_file(dir / "config.ini", text);
  const auto total = c.optim.total_steps;
  opt.on_step = [&](const train::StepMetrics& m) {
    if (m.step == total || m.step % 100 == 0) out << "step " << m.step << "/" << total << " loss " << m.loss_total << "\n";
  };
  const train::PretrainResult r = train::pretrain(pc, samples, opt);
  write_file(dir / "summary.json", summary_json(r).dump(2) + "\n");
  if (r.halted) {
    err << "training halted at step " << r.state.step << ": " << r.halt_reason << "\n";
    return 1;
  }
  out << "done: " << r.state.step << " steps, checkpoints in " << dir.string() << "\n";
  return 0;
}

int cmd_eval(const Flags& f, std::ostream& out) {
  if (f.checkpoint.empty()) throw UsageError("--checkpoint is required");
  const LoadedEncoder enc = load_encoder(f.checkpoint);
  // The checkpoint fixes data and model; the eval section may come from --config.
  config::RunConfig c = enc.config;
  if (!f.config_path.empty()) c.eval = config::load(f.config_path).eval;
  for (const auto& s : f.sets) config::apply_override(c, s);
  if (f.threads) c.threads = *f.threads;
  if (!f.task.empty()) c.eval.task = f.task;
  require_valid(c);
  const auto spec = config::task_spec(c.eval.task);
  if (spec.segmentation && f.mode != "finetune") {
    throw UsageError("mode '" + f.mode + "' needs a pooled per-sample label, but task '" + spec.name +
                     "' is segmentation; use --mode finetune");
  }
  const fs::path dir = out_dir(f, "eval-" + c.eval.task + "-" + f.mode);
  prepare_out(dir, f.force, [](const fs::path& p) {
    const auto name = p.filename().string();
    return name == "report.json" || name == "report.txt" || name == "config.ini";
  });
  const auto task = config::make_task(c, c.eval.task);
  const eval::EvalReport report = evaluate(enc, c, task, f.mode, "ckpt-" + hex64(enc.frozen_hash).substr(0, 8));
  write_file(dir / "config.ini", config::serialize(c));
  write_file(dir / "report.json", eval::to_json(report));
  write_file(dir / "report.txt", eval::to_text(report));
  out << eval::to_text(report);
  return 0;
}

// ---------------------------------------------------------------------------

struct ArmOutcome {
  std::string name;
  std::string status;  // complete | incomplete | failed
  std::string detail;
  double test_metric = 0.0;
  json diagnostics;
};

ArmOutcome run_arm(const config::RunConfig& base, const train::AblationSpec& spec,
                   std::span<const data::Sample> samples, const fs::path& dir, bool force, std::ostream& out) {
  ArmOutcome o;
  o.name = spec.name;
  const fs::path status_file = dir / "status";
  if (!force && fs::exists(dir / "report.json") && fs::exists(status_file)) {
    std::ifstream s(status_file);
    std::string st;
    std::getline(s, st);
    if (st == "complete") {
      const json rep = json::parse(std::ifstream(dir / "report.json"));
      const json summ = json::parse(std::ifstream(dir / "summary.json"));
      o.status = "complete";
      o.test_metric = rep.at("test_metric").get<double>();
      o.diagnostics = summ;
      out << "arm " << spec.name << ": reusing completed results\n";
      return o;
    }
  }
  config::RunConfig c = base;
  config::set_ablation(c, spec);
  fs::create_directories(dir);
  for (const auto& e : fs::directory_iterator(dir)) {
    if (pretrain_owned(e.path()) || e.path().filename() == "report.json" || e.path().filename() == "report.txt") {
      fs::remove_all(e.path());
    }
  }
  write_file(status_file, "incomplete\n");
  const std::string text = config::serialize(c);
  write_file(dir / "config.ini", text);
  try {
    if (auto errors = config::check(c); !errors.empty()) {
      std::string msg;
      for (const auto& e : errors) msg += (msg.empty() ? "" : "; ") + e;
      throw UsageError(msg);
    }
    train::PretrainOptions opt;
    opt.out_dir = dir;
    opt.config_text = text;
    const train::PretrainResult r = train::pretrain(config::pretrain_config(c), samples, opt);
    json summ = summary_json(r);
    json trace = json::array();
    for (const auto& m : r.history) trace.push_back({m.step, m.target_variance});
    summ["target_variance_trace"] = trace;
    write_file(dir / "summary.json", summ.dump(2) + "\n");
    o.diagnostics = summ;
    if (r.halted) throw train::TrainingError(r.halt_reason);

    LoadedEncoder enc;
    enc.config = c;
    enc.step = r.state.step;
    enc.frozen_hash = r.frozen_hash;
    enc.encoder = eval::Encoder{c.model, train::effective_registry(config::pretrain_config(c)), r.state.params, r.stats};
    enc.encoder.config.base_patch_size = c.tokenizer.base_patch_size;
    const auto task = config::make_task(c, c.eval.task);
    const auto report = evaluate(enc, c, task, "knn", spec.name);
    write_file(dir / "report.json", eval::to_json(report));
    write_file(dir / "report.txt", eval::to_text(report));
    o.test_metric = report.test_metric();
    o.status = "complete";
  } catch (const std::exception& e) {
    o.status = "failed";
    o.detail = e.what();
  }
  write_file(status_file, o.status + (o.detail.empty() ? "" : ": " + o.detail) + "\n");
  out << "arm " << spec.name << ": " << o.status;
  if (o.status == "complete") out << ", knn test accuracy " << o.test_metric;
  else out << " (" << o.detail << ")";
  out << "\n";
  return o;
}

int cmd_ablate(const Flags& f, std::ostream& out) {
  if (f.matrix.empty()) throw UsageError("--matrix is required (table4 or table5)");
  std::vector<train::AblationSpec> arms;
  try {
    arms = train::ablation_matrix(f.matrix);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  config::RunConfig c = resolve_config(f);
  require_valid(c);
  const fs::path dir = out_dir(f, "ablate-" + f.matrix + "-" + std::to_string(c.seed));
  fs::create_directories(dir);
  std::vector<data::Sample> samples =
      f.data.empty() ? data::synth_generate(c.seed, c.data.count, config::generator(c)) : load_data(f, c);

  out << "matrix " << f.matrix << ": " << arms.size() << " arms:";
  for (const auto& a : arms) out << " " << a.name;
  out << "\n";
  write_file(dir / "config.ini", config::serialize(c));

  std::vector<ArmOutcome> outcomes;
  for (const auto& spec : arms) outcomes.push_back(run_arm(c, spec, samples, dir / spec.name, f.force, out));

  json j;
  j["matrix"] = f.matrix;
  j["task"] = c.eval.task;
  j["metric"] = "knn_accuracy";
  json arr = json::array();
  std::map<std::string, std::map<std::string, double>> results;
  for (std::size_t i = 0; i < arms.size(); ++i) {
    const auto& a = arms[i];
    const auto& o = outcomes[i];
    json row;
    row["name"] = a.name;
    row["target"] = model::to_string(a.target_mode);
    row["masking"] = mask::to_string(a.masking_mode);
    row["negative_scope"] = obj::to_string(a.negative_scope);
    row["lambda_inst"] = a.lambda_inst;
    row["use_maps"] = a.use_maps;
    row["status"] = o.status;
    if (!o.detail.empty()) row["detail"] = o.detail;
    if (o.status == "complete") {
      row["test_metric"] = o.test_metric;
      results[a.name][c.eval.task] = o.test_metric;
    }
    if (!o.diagnostics.is_null()) {
      row["initial_target_variance"] = o.diagnostics.value("initial_target_variance", 0.0);
      row["collapse_detected"] = o.diagnostics.value("collapse_detected", false);
      row["collapse_step"] = o.diagnostics.value("collapse_step", json(nullptr));
    }
    arr.push_back(row);
  }
  j["arms"] = arr;
  if (f.matrix == "table4" && results.count("latent_mim_lite") && results.count("full_latent_mim")) {
    // Reported only; at desk scale the ordering is not expected to be stable.
    j["lite_beats_full_latent_mim"] =
        results["latent_mim_lite"][c.eval.task] > results["full_latent_mim"][c.eval.task];
  }
  const bool partial = std::any_of(outcomes.begin(), outcomes.end(), [](const auto& o) { return o.status != "complete"; });
  j["complete"] = !partial;
  write_file(dir / "ablation.json", j.dump(2) + "\n");
  if (results.size() >= 2) {
    const auto rows = eval::rank_summary(results);
    write_file(dir / "ranks.txt", eval::rank_table_text(rows));
    write_file(dir / "ranks.csv", eval::rank_table_csv(rows));
    out << eval::rank_table_text(rows);
  }
  if (partial) {
    out << "some arms did not complete; partial results are in " << dir.string() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace

// ---------------------------------------------------------------------------

LoadedEncoder load_encoder(const fs::path& checkpoint) {
  const model::Checkpoint ck = model::read_checkpoint(checkpoint);
  LoadedEncoder out;
  out.config = config::parse(ck.config_text);
  out.step = ck.step;
  out.frozen_hash = ck.frozen_hash;
  const train::PretrainConfig pc = config::pretrain_config(out.config);
  out.encoder.config = pc.model;
  out.encoder.registry = train::effective_registry(pc);
  out.encoder.params = model::load_params(ck);
  out.encoder.stats = train::restore_stats(ck);
  eval::check_encoder(out.encoder);
  return out;
}

eval::EvalReport evaluate(const LoadedEncoder& enc, const config::RunConfig& c, const eval::TaskData& task,
                          const std::string& mode, const std::string& model_name) {
  eval::EvalReport rep;
  rep.task = task.name;
  rep.model = model_name;
  rep.mode = mode;
  rep.provenance["checkpoint_step"] = std::to_string(enc.step);
  rep.provenance["frozen_hash"] = hex64(enc.frozen_hash);
  rep.provenance["seed"] = std::to_string(c.seed);
  rep.provenance["split"] = "60/20/20 by location_id";
  rep.provenance["selection"] = "best val, earliest grid point on ties";

  if (mode == "knn" || mode == "lp") {
    if (task.segmentation) throw UsageError("mode '" + mode + "' cannot evaluate segmentation task " + task.name);
    rep.metric_name = "accuracy";
    const auto poolings = split_list(c.eval.pooling);
    const auto norms = split_list(c.eval.norm);
    rep.provenance["pooling_sweep"] = c.eval.pooling;
    rep.provenance["norm_sweep"] = c.eval.norm;
    rep.provenance["patch_size"] = std::to_string(c.eval.patch_size);
    if (mode == "knn") {
      rep.provenance["k"] = std::to_string(c.eval.k);
      rep.provenance["similarity"] = "cosine";
    } else {
      rep.provenance["optimizer"] = "adamw, weight_decay 0, full batch";
      rep.provenance["epochs"] = std::to_string(c.eval.probe_epochs);
    }
    const data::NormStats eval_stats =
        data::compute_stats(task.train, enc.encoder.registry, data::StatsProvenance::EvalSet);
    std::vector<eval::Pooling> pools;
    for (const auto& pool : poolings) pools.push_back(eval::pooling_from_string(pool));
    for (const auto& norm : norms) {
      eval::EmbedOptions o;
      o.patch_size = c.eval.patch_size;
      o.max_timesteps = c.eval.max_timesteps;
      if (norm == "eval_set") o.stats_override = eval_stats;
      const auto trs = eval::embed(enc.encoder, task.train, o, pools, eval::Split::Train);
      const auto vas = eval::embed(enc.encoder, task.val, o, pools, eval::Split::Val);
      const auto tes = eval::embed(enc.encoder, task.test, o, pools, eval::Split::Test);
      for (std::size_t k = 0; k < poolings.size(); ++k) {
        const auto& pool = poolings[k];
        const auto& tr = trs[k];
        const auto& va = vas[k];
        const auto& te = tes[k];
        if (mode == "knn") {
          eval::SweepPoint pt;
          pt.params = {{"pooling", pool}, {"norm", norm}};
          pt.val = eval::accuracy(eval::knn_classify(tr.vectors, tr.labels, va.vectors, c.eval.k), va.labels);
          pt.test = eval::accuracy(eval::knn_classify(tr.vectors, tr.labels, te.vectors, c.eval.k), te.labels);
          rep.sweep.grid.push_back(pt);
        } else {
          eval::ProbeConfig pcfg;
          pcfg.epochs = c.eval.probe_epochs;
          pcfg.seed = c.seed;
          for (auto pt : eval::linear_probe(tr, va, te, pcfg).grid) {
            pt.params["pooling"] = pool;
            pt.params["norm"] = norm;
            rep.sweep.grid.push_back(pt);
          }
        }
      }
    }
    rep.sweep.selected = eval::select_best(rep.sweep.grid);
    return rep;
  }
  if (mode == "finetune") {
    eval::FinetuneRecipe r;
    r.epochs = c.eval.finetune_epochs;
    r.lr = c.eval.finetune_lr;
    r.weight_decay = c.eval.finetune_weight_decay;
    r.batch_size = c.eval.finetune_batch;
    r.patch_size = c.eval.patch_size;
    r.max_timesteps = c.eval.finetune_max_timesteps;
    r.seed = derive_seed(c.seed, "finetune");
    r.head = task.segmentation ? eval::HeadKind::TransposedConvSeg : eval::head_kind_from_string(c.eval.head);
    if (!task.segmentation && r.head == eval::HeadKind::TransposedConvSeg) {
      throw UsageError("head tconv_seg produces per-pixel output; task " + task.name + " is classification");
    }
    rep.provenance["head"] = eval::to_string(r.head);
    rep.provenance["epochs"] = std::to_string(r.epochs);
    rep.provenance["frozen_epochs"] = std::to_string(eval::frozen_epochs(r));
    rep.provenance["plateau"] = "factor 0.2, patience 2, cooldown 10";
    const auto res = eval::finetune(enc.encoder, task, r);
    rep.metric_name = res.metric_name;
    rep.sweep = res.sweep;
    rep.epochs = res.epochs;
    return rep;
  }
  throw UsageError("unknown mode '" + mode + "' (expected knn, lp or finetune)");
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multimodal latent masked-modeling pretraining at desk scale", "lmlite"};
  app.require_subcommand(1);
  Flags f;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config_path, "Run config file (INI sections)")->check(CLI::ExistingFile);
    sub->add_option("--set", f.sets, "Override a config value: section.key=value");
    sub->add_option("--seed", f.seed, "Run seed");
    sub->add_option("--out", f.out, std::string("Output directory (default under $") + kOutRootEnv + ")");
    sub->add_option("--threads", f.threads, "Worker threads for micro-batches");
    sub->add_flag("--force", f.force, "Overwrite results in a non-empty output directory");
  };
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  common(synth);
  synth->add_option("--count", f.count, "Number of samples");

  auto* pre = app.add_subcommand("pretrain", "Pretrain an encoder");
  common(pre);
  pre->add_option("--data", f.data, "Dataset directory");
  pre->add_option("--checkpoint", f.checkpoint, "Resume from this checkpoint");
  pre->add_flag("--dry-run", f.dry_run, "Print the effective config and parameter count");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a synthetic task");
  common(ev);
  ev->add_option("--checkpoint", f.checkpoint, "Checkpoint file")->required();
  ev->add_option("--task", f.task, "cls5, cls3 or seg5");
  ev->add_option("--mode", f.mode, "knn, lp or finetune")->check(CLI::IsMember({"knn", "lp", "finetune"}));

  auto* abl = app.add_subcommand("ablate", "Run an ablation matrix");
  common(abl);
  abl->add_option("--matrix", f.matrix, "table4 or table5")->required();
  abl->add_option("--data", f.data, "Dataset directory (default: synthesize from the config)");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 2;
  }
  try {
    if (synth->parsed()) return cmd_synth(f, out);
    if (pre->parsed()) return cmd_pretrain(f, out, err);
    if (ev->parsed()) return cmd_eval(f, out);
    if (abl->parsed()) return cmd_ablate(f, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const config::ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace lmlite::cli
