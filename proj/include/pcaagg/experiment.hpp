#pragma once
// Experiment orchestration: strict JSON spec parsing, seeded single runs
// with a reproducible run-directory layout, paired-seed variant comparison,
// and CSV emission for the redundancy/coupling figures.

#include <atomic>
#include <chrono>
#include <cstdio>
#include <iostream>
#include <mutex>
#include <thread>

#include "pcaagg/cca.hpp"
#include "pcaagg/train.hpp"

namespace pcaagg {

struct ExperimentSpec {
  ModelConfig model;
  TaskParams task;
  TrainParams train;
  uint64_t seed = 0;
  // Sweep axes for `compare`: field name -> values (JSON-typed).
  std::vector<std::pair<std::string, std::vector<nlohmann::json>>> sweep;
};

namespace detail {

inline void expect_keys(const nlohmann::json& obj, const std::string& where,
                        const std::vector<std::string>& allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      throw ConfigError(where + "." + it.key() + ": unknown key");
  }
}

template <typename V>
void set_if(const nlohmann::json& obj, const char* key, V& out) {
  if (obj.contains(key)) out = obj.at(key).get<V>();
}

}  // namespace detail

// Applies one named field (model/task/train namespace union) to the spec.
// Shared by spec parsing and sweep overrides.
inline void apply_spec_field(ExperimentSpec& spec, const std::string& key,
                             const nlohmann::json& value) {
  auto geti = [&]() { return value.get<int64_t>(); };
  auto getd = [&]() { return value.get<double>(); };
  if (key == "height") spec.model.height = geti();
  else if (key == "width") spec.model.width = geti();
  else if (key == "num_classes") spec.model.num_classes = geti();
  else if (key == "channels") spec.model.channels = geti();
  else if (key == "enc_channels") spec.model.enc_channels = geti();
  else if (key == "experts") spec.model.experts = geti();
  else if (key == "num_blocks") spec.model.num_blocks = geti();
  else if (key == "architecture")
    spec.model.architecture = architecture_from_string(value.get<std::string>());
  else if (key == "fuse") spec.model.fuse = fuse_mode_from_string(value.get<std::string>());
  else if (key == "lambda") spec.model.lambda = getd();
  else if (key == "heads") spec.model.attention.heads = geti();
  else if (key == "window") spec.model.attention.window = geti();
  else if (key == "residuals") spec.model.attention.residuals = value.get<bool>();
  else if (key == "upsample") spec.model.upsample = geti();
  else if (key == "fod_per_class") spec.model.fod_per_class = value.get<bool>();
  else if (key == "fod_detach")
    spec.model.fod_detach = fod_detach_from_string(value.get<std::string>());
  else if (key == "sigma") spec.task.sigma = getd();
  else if (key == "rho") spec.task.rho = getd();
  else if (key == "seen_fraction") spec.task.seen_fraction = getd();
  else if (key == "text_sigma") spec.task.text_sigma = getd();
  else if (key == "steps") spec.train.steps = geti();
  else if (key == "lr") spec.train.opt.lr = getd();
  else if (key == "beta1") spec.train.opt.beta1 = getd();
  else if (key == "beta2") spec.train.opt.beta2 = getd();
  else if (key == "eps") spec.train.opt.eps = getd();
  else if (key == "weight_decay") spec.train.opt.weight_decay = getd();
  else if (key == "eval_every") spec.train.eval_every = geti();
  else if (key == "early_stop_miou") spec.train.early_stop_miou = getd();
  else if (key == "dump_every") spec.train.dump_every = geti();
  else throw ConfigError("sweep." + key + ": not a sweepable field");
}

// Task parameters mirror the model geometry; only the noise/split knobs are
// independent.
inline TaskParams resolved_task_params(const ExperimentSpec& spec) {
  TaskParams p = spec.task;
  p.height = spec.model.height;
  p.width = spec.model.width;
  p.num_classes = spec.model.num_classes;
  p.enc_channels = spec.model.enc_channels;
  p.upsample = spec.model.upsample;
  return p;
}

inline ExperimentSpec parse_spec(const nlohmann::json& j) {
  ExperimentSpec spec;
  detail::expect_keys(j, "spec", {"schema_version", "model", "task", "train", "seed", "sweep"});
  if (!j.contains("schema_version") || j.at("schema_version").get<int64_t>() != 1)
    throw ConfigError("spec.schema_version: must be present and equal to 1");
  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::expect_keys(m, "model",
                        {"height", "width", "num_classes", "channels", "enc_channels", "experts",
                         "num_blocks", "architecture", "fuse", "lambda", "heads", "window",
                         "residuals", "upsample", "fod_per_class", "fod_detach"});
    for (auto it = m.begin(); it != m.end(); ++it) apply_spec_field(spec, it.key(), it.value());
  }
  if (j.contains("task")) {
    const auto& t = j.at("task");
    detail::expect_keys(t, "task", {"sigma", "rho", "seen_fraction", "text_sigma"});
    for (auto it = t.begin(); it != t.end(); ++it) apply_spec_field(spec, it.key(), it.value());
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::expect_keys(t, "train",
                        {"steps", "lr", "beta1", "beta2", "eps", "weight_decay", "eval_every",
                         "early_stop_miou", "dump_every"});
    for (auto it = t.begin(); it != t.end(); ++it) apply_spec_field(spec, it.key(), it.value());
  }
  detail::set_if(j, "seed", spec.seed);
  if (j.contains("sweep")) {
    const auto& s = j.at("sweep");
    if (!s.is_object()) throw ConfigError("spec.sweep: must be an object of axis -> values");
    for (auto it = s.begin(); it != s.end(); ++it) {
      if (!it.value().is_array() || it.value().empty())
        throw ConfigError("sweep." + it.key() + ": must be a non-empty array");
      std::vector<nlohmann::json> vals(it.value().begin(), it.value().end());
      spec.sweep.emplace_back(it.key(), std::move(vals));
    }
    std::sort(spec.sweep.begin(), spec.sweep.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
  }
  spec.model.validate();
  return spec;
}

inline ExperimentSpec load_spec(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open spec: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const std::exception& e) {
    throw ConfigError("spec parse error in " + path.string() + ": " + e.what());
  }
  return parse_spec(j);
}

inline nlohmann::json spec_to_json(const ExperimentSpec& spec) {
  nlohmann::json j;
  j["schema_version"] = 1;
  nlohmann::json m;
  m["height"] = spec.model.height;
  m["width"] = spec.model.width;
  m["num_classes"] = spec.model.num_classes;
  m["channels"] = spec.model.channels;
  m["enc_channels"] = spec.model.enc_channels;
  m["experts"] = spec.model.experts;
  m["num_blocks"] = spec.model.num_blocks;
  m["architecture"] = to_string(spec.model.architecture);
  m["fuse"] = to_string(spec.model.fuse);
  m["lambda"] = spec.model.lambda;
  m["heads"] = spec.model.attention.heads;
  m["window"] = spec.model.attention.window;
  m["residuals"] = spec.model.attention.residuals;
  m["upsample"] = spec.model.upsample;
  m["fod_per_class"] = spec.model.fod_per_class;
  m["fod_detach"] = to_string(spec.model.fod_detach);
  j["model"] = m;
  nlohmann::json t;
  t["sigma"] = spec.task.sigma;
  t["rho"] = spec.task.rho;
  t["seen_fraction"] = spec.task.seen_fraction;
  t["text_sigma"] = spec.task.text_sigma;
  j["task"] = t;
  nlohmann::json tr;
  tr["steps"] = spec.train.steps;
  tr["lr"] = spec.train.opt.lr;
  tr["beta1"] = spec.train.opt.beta1;
  tr["beta2"] = spec.train.opt.beta2;
  tr["eps"] = spec.train.opt.eps;
  tr["weight_decay"] = spec.train.opt.weight_decay;
  tr["eval_every"] = spec.train.eval_every;
  tr["early_stop_miou"] = spec.train.early_stop_miou;
  tr["dump_every"] = spec.train.dump_every;
  j["train"] = tr;
  j["seed"] = spec.seed;
  return j;
}

// ---------------------------------------------------------------------------
// Single run
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

inline std::string fmt_opt(const std::optional<double>& v) {
  return v ? fmt_double(*v) : std::string();
}

}  // namespace detail

struct RunArtifacts {
  std::filesystem::path dir;
  EvalReport report;
  int64_t steps_run = 0;
  int64_t param_count = 0;
  double l_sup_final = 0.0;
  double l_od_final = 0.0;
  std::optional<double> coupling_final;
  uint64_t task_checksum = 0;
};

using Real = float;  // training/inference default precision

// Executes one seeded run into `out_dir`: config.json, trace.csv,
// checkpoints/step-K/, final_metrics.json, optional dumps/.
inline RunArtifacts run_experiment(ExperimentSpec spec, uint64_t seed,
                                   const std::filesystem::path& out_dir) {
  spec.seed = seed;
  spec.model.seed = seed;
  spec.model.validate();
  namespace fs = std::filesystem;

  SyntheticTask<Real> task = synthesize_task<Real>(resolved_task_params(spec), seed);
  Model<Real> model = Model<Real>::init(spec.model);

  RunArtifacts art;
  art.dir = out_dir;
  art.param_count = model.params.total_parameters();
  art.task_checksum = task.content_hash();

  fs::create_directories(out_dir);
  {
    nlohmann::json cfg = spec_to_json(spec);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)art.task_checksum);
    cfg["task_checksum"] = std::string(buf);
    cfg["param_count"] = art.param_count;
    std::ofstream f(out_dir / "config.json");
    f << cfg.dump(2) << "\n";
  }

  std::ofstream trace(out_dir / "trace.csv");
  trace << "step,l_sup,l_od,total";
  for (int64_t b = 1; b <= spec.model.num_blocks; ++b) trace << ",mean_abs_sim_block" << b;
  trace << "\n";

  fs::path dump_dir = out_dir / "dumps";
  nlohmann::json dump_manifest = nlohmann::json::array();

  AdamW<Real> opt(spec.train.opt);
  TrainHooks<Real> hooks;
  hooks.on_step = [&](const TraceRow& row) {
    trace << row.step << ',' << detail::fmt_double(row.l_sup) << ','
          << detail::fmt_double(row.l_od) << ',' << detail::fmt_double(row.total);
    for (double m : row.mean_abs_sim) trace << ',' << detail::fmt_double(m);
    trace << "\n";
  };
  hooks.on_dump = [&](const DumpSet<Real>& dump) {
    fs::create_directories(dump_dir);
    for (size_t b = 0; b < dump.spatial_streams.size(); ++b) {
      std::string stem = "step-" + std::to_string(dump.step) + "_block-" + std::to_string(b + 1);
      auto record = [&](const std::string& kind, const std::string& file, int64_t expert) {
        nlohmann::json e;
        e["step"] = dump.step;
        e["block"] = int64_t(b + 1);
        e["kind"] = kind;
        if (expert > 0) e["expert"] = expert;
        e["file"] = file;
        dump_manifest.push_back(e);
      };
      save_ptns(dump.spatial_streams[b], dump_dir / (stem + "_spatial.ptns"));
      record("spatial", stem + "_spatial.ptns", 0);
      save_ptns(dump.semantic_streams[b], dump_dir / (stem + "_semantic.ptns"));
      record("semantic", stem + "_semantic.ptns", 0);
      for (size_t z = 0; z < dump.expert_outputs[b].size(); ++z) {
        std::string file = stem + "_expert-" + std::to_string(z + 1) + ".ptns";
        save_ptns(dump.expert_outputs[b][z], dump_dir / file);
        record("expert", file, int64_t(z + 1));
      }
    }
  };
  hooks.on_divergence = [&](const ParamStore<Real>& params, int64_t last_good_step) {
    fs::path ck = out_dir / "checkpoints" / ("step-" + std::to_string(last_good_step));
    params.save(ck / "params");
  };

  TrainResult tr;
  try {
    tr = train(model, opt, task, spec.train, hooks);
  } catch (const DivergenceError&) {
    trace.flush();
    if (!dump_manifest.empty()) {
      std::ofstream f(dump_dir / "manifest.json");
      f << dump_manifest.dump(2) << "\n";
    }
    throw;
  }
  trace.flush();
  art.steps_run = tr.steps_run;
  if (!tr.trace.empty()) {
    art.l_sup_final = tr.trace.back().l_sup;
    art.l_od_final = tr.trace.back().l_od;
  }
  if (!dump_manifest.empty()) {
    std::ofstream f(dump_dir / "manifest.json");
    f << dump_manifest.dump(2) << "\n";
  }

  // End-of-training checkpoint: parameters, optimizer moments, BN buffers.
  {
    fs::path ck = out_dir / "checkpoints" / ("step-" + std::to_string(tr.steps_run));
    model.params.save(ck / "params");
    opt.save(ck / "optimizer");
    nlohmann::json bn;
    for (auto& [key, state] : model.bn_states) {
      if (!state.initialized) continue;
      save_ptns(state.running_mean, ck / (key + ".running_mean.ptns"));
      save_ptns(state.running_var, ck / (key + ".running_var.ptns"));
      bn[key] = true;
    }
    nlohmann::json st;
    st["step"] = tr.steps_run;
    st["bn_initialized"] = bn;
    std::ofstream f(ck / "state.json");
    f << st.dump(2) << "\n";
  }

  // Final metrics and redundancy analysis from a reporting forward pass.
  {
    Graph<Real> g;
    ParamBinding<Real> binding(g, model.params);
    ForwardResult<Real> fwd = reporting_forward(model, g, binding, task);
    std::vector<int> pred = argmax_last(fwd.logits.value());
    ConfusionMatrix cm(task.num_classes());
    accumulate_confusion(pred, task.labels, cm);
    art.report = compute_miou(cm, task.seen);

    nlohmann::json metrics;
    metrics["miou"] = art.report.miou;
    nlohmann::json per_class = nlohmann::json::array();
    for (size_t c = 0; c < art.report.per_class_iou.size(); ++c) {
      nlohmann::json e;
      e["id"] = int64_t(c);
      e["name"] = task.class_names[c];
      if (art.report.per_class_iou[c])
        e["iou"] = *art.report.per_class_iou[c];
      else
        e["iou"] = nullptr;
      per_class.push_back(e);
    }
    metrics["per_class"] = per_class;
    metrics["seen_miou"] =
        art.report.seen_miou ? nlohmann::json(*art.report.seen_miou) : nlohmann::json(nullptr);
    metrics["unseen_miou"] =
        art.report.unseen_miou ? nlohmann::json(*art.report.unseen_miou) : nlohmann::json(nullptr);
    metrics["hiou"] = art.report.hiou ? nlohmann::json(*art.report.hiou) : nlohmann::json(nullptr);

    nlohmann::json red;
    nlohmann::json experts_m = nlohmann::json::array();
    if (!fwd.expert_outputs.empty() && !fwd.expert_outputs[0].empty()) {
      // Average the per-block expert redundancy matrices.
      size_t Z = fwd.expert_outputs[0].size();
      std::vector<std::vector<double>> acc(Z, std::vector<double>(Z, 0.0));
      int64_t blocks = 0;
      for (const auto& block : fwd.expert_outputs) {
        std::vector<Tensor<double>> feats;
        for (const auto& e : block) feats.push_back(flatten_features(e.value()));
        RedundancyReport rr = expert_redundancy(feats);
        for (size_t i = 0; i < Z; ++i)
          for (size_t j = 0; j < Z; ++j) acc[i][j] += rr.experts[i][j];
        ++blocks;
      }
      for (size_t i = 0; i < Z; ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (size_t j = 0; j < Z; ++j) row.push_back(acc[i][j] / double(blocks));
        experts_m.push_back(row);
      }
    }
    red["experts"] = experts_m;
    if (!fwd.pairs.empty()) {
      double coupling = 0;
      for (const auto& pair : fwd.pairs)
        coupling += stream_coupling(pair.spatial.value(), pair.semantic.value());
      coupling /= double(fwd.pairs.size());
      art.coupling_final = coupling;
      red["coupling_final"] = coupling;
    } else {
      red["coupling_final"] = nullptr;
    }
    metrics["redundancy"] = red;
    std::ofstream f(out_dir / "final_metrics.json");
    f << metrics.dump(2) << "\n";
  }
  return art;
}

// ---------------------------------------------------------------------------
// Variant comparison over paired seeds
// ---------------------------------------------------------------------------

struct VariantRun {
  std::string variant;
  uint64_t seed = 0;
  RunArtifacts art;
  double wallclock_s = 0.0;
};

struct ComparisonSummary {
  std::vector<VariantRun> runs;  // sorted by (variant order, seed)
  std::vector<std::string> variant_names;
};

inline int worker_count_from_env(int64_t jobs) {
  int hw = int(std::thread::hardware_concurrency());
  if (hw < 1) hw = 1;
  int cap = hw;
  if (const char* env = std::getenv("PCAAGG_THREADS")) {
    int v = std::atoi(env);
    if (v >= 1) cap = v;
  }
  return int(std::min<int64_t>(cap, jobs));
}

namespace detail {

struct Variant {
  std::string name;
  std::vector<std::pair<std::string, nlohmann::json>> overrides;
};

inline std::string value_str(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

inline std::vector<Variant> expand_sweep(const ExperimentSpec& spec) {
  std::vector<Variant> variants;
  variants.push_back({"", {}});
  for (const auto& [axis, values] : spec.sweep) {
    std::vector<Variant> next;
    for (const auto& base : variants)
      for (const auto& val : values) {
        Variant v = base;
        v.name = v.name.empty() ? axis + "=" + value_str(val)
                                : v.name + "_" + axis + "=" + value_str(val);
        v.overrides.emplace_back(axis, val);
        next.push_back(std::move(v));
      }
    variants = std::move(next);
  }
  return variants;
}

}  // namespace detail

// Runs every sweep variant on identical seeded tasks (paired seeds
// spec.seed .. spec.seed+num_seeds-1), writes per-run directories plus
// summary.csv and comparison.json under out_root. Worker concurrency is
// capped by PCAAGG_THREADS.
inline ComparisonSummary compare_experiments(const ExperimentSpec& spec, int64_t num_seeds,
                                             const std::filesystem::path& out_root) {
  if (num_seeds < 1) throw ConfigError("compare: --seeds must be >= 1");
  std::vector<detail::Variant> variants = detail::expand_sweep(spec);
  if (variants.size() < 2)
    throw ConfigError("compare: spec must define a sweep with at least 2 variants");

  struct Job {
    size_t variant_index;
    uint64_t seed;
  };
  std::vector<Job> jobs;
  for (size_t vi = 0; vi < variants.size(); ++vi)
    for (int64_t s = 0; s < num_seeds; ++s)
      jobs.push_back({vi, spec.seed + uint64_t(s)});

  ComparisonSummary summary;
  summary.runs.resize(jobs.size());
  for (const auto& v : variants) summary.variant_names.push_back(v.name);

  std::atomic<size_t> next{0};
  std::vector<std::exception_ptr> errors;
  std::mutex err_mu;
  int workers = worker_count_from_env(int64_t(jobs.size()));
  auto body = [&]() {
    for (size_t i; (i = next.fetch_add(1)) < jobs.size();) {
      const Job& job = jobs[i];
      const detail::Variant& variant = variants[job.variant_index];
      ExperimentSpec vspec = spec;
      vspec.sweep.clear();
      for (const auto& [k, v] : variant.overrides) apply_spec_field(vspec, k, v);
      vspec.model.validate();
      std::filesystem::path dir =
          out_root / variant.name / ("seed-" + std::to_string(job.seed));
      auto t0 = std::chrono::steady_clock::now();
      VariantRun run;
      run.variant = variant.name;
      run.seed = job.seed;
      run.art = run_experiment(vspec, job.seed, dir);
      run.wallclock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      summary.runs[i] = std::move(run);
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&]() {
      try {
        body();
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        errors.push_back(std::current_exception());
        next.store(jobs.size());
      }
    });
  for (auto& th : pool) th.join();
  if (!errors.empty()) std::rethrow_exception(errors.front());

  std::filesystem::create_directories(out_root);
  {
    std::ofstream f(out_root / "summary.csv");
    f << "variant,seed,miou,seen_miou,unseen_miou,hiou,l_sup_final,l_od_final,"
         "coupling_final,param_count,steps_run\n";
    for (const auto& run : summary.runs) {
      f << run.variant << ',' << run.seed << ',' << detail::fmt_double(run.art.report.miou)
        << ',' << detail::fmt_opt(run.art.report.seen_miou) << ','
        << detail::fmt_opt(run.art.report.unseen_miou) << ','
        << detail::fmt_opt(run.art.report.hiou) << ','
        << detail::fmt_double(run.art.l_sup_final) << ','
        << detail::fmt_double(run.art.l_od_final) << ','
        << detail::fmt_opt(run.art.coupling_final) << ',' << run.art.param_count << ','
        << run.art.steps_run << "\n";
    }
  }
  {
    nlohmann::json agg;
    for (size_t vi = 0; vi < variants.size(); ++vi) {
      std::vector<double> mious;
      double wall = 0;
      int64_t params = 0;
      for (const auto& run : summary.runs)
        if (run.variant == variants[vi].name) {
          mious.push_back(run.art.report.miou);
          wall += run.wallclock_s;
          params = run.art.param_count;
        }
      double mu = 0;
      for (double m : mious) mu += m;
      mu /= double(mious.size());
      double sd = 0;
      if (mious.size() > 1) {
        for (double m : mious) sd += (m - mu) * (m - mu);
        sd = std::sqrt(sd / double(mious.size() - 1));
      }
      nlohmann::json v;
      v["miou_mean"] = mu;
      v["miou_stddev"] = sd;
      v["seeds"] = mious.size();
      v["param_count"] = params;
      v["wallclock_s_total"] = wall;  // volatile; not reproducible byte-for-byte
      agg[variants[vi].name] = v;
    }
    std::ofstream f(out_root / "comparison.json");
    f << agg.dump(2) << "\n";
  }
  return summary;
}

// ---------------------------------------------------------------------------
// Figure data from dumped features
// ---------------------------------------------------------------------------

// For each run directory containing dumps/: writes coupling.csv
// (step,value; mean over blocks) and redundancy.csv (Z x Z matrix from the
// final dumped step, averaged over blocks). Runs without dumps get a warning.
inline int emit_figure_data(const std::vector<std::filesystem::path>& run_dirs,
                            std::ostream& warnings = std::cerr) {
  namespace fs = std::filesystem;
  int emitted = 0;
  for (const auto& dir : run_dirs) {
    fs::path manifest_path = dir / "dumps" / "manifest.json";
    if (!fs::exists(manifest_path)) {
      warnings << "warning: " << dir.string() << ": no feature dumps; skipping\n";
      continue;
    }
    std::ifstream mf(manifest_path);
    nlohmann::json manifest = nlohmann::json::parse(mf);

    struct Entry {
      int64_t step, block, expert;
      std::string kind, file;
    };
    std::vector<Entry> entries;
    for (const auto& e : manifest)
      entries.push_back({e.at("step").get<int64_t>(), e.at("block").get<int64_t>(),
                         e.value("expert", int64_t(0)), e.at("kind").get<std::string>(),
                         e.at("file").get<std::string>()});

    std::vector<int64_t> steps;
    for (const auto& e : entries)
      if (std::find(steps.begin(), steps.end(), e.step) == steps.end()) steps.push_back(e.step);
    std::sort(steps.begin(), steps.end());
    if (steps.empty()) {
      warnings << "warning: " << dir.string() << ": empty dump manifest; skipping\n";
      continue;
    }

    auto load = [&](const Entry& e) { return load_ptns<double>(dir / "dumps" / e.file); };

    {
      std::ofstream f(dir / "coupling.csv");
      f << "step,value\n";
      for (int64_t step : steps) {
        double total = 0;
        int64_t blocks = 0;
        for (const auto& e : entries) {
          if (e.step != step || e.kind != "spatial") continue;
          const Entry* match = nullptr;
          for (const auto& o : entries)
            if (o.step == step && o.block == e.block && o.kind == "semantic") match = &o;
          if (!match) continue;
          Tensor<double> b = load(e);
          Tensor<double> sem = load(*match);
          int64_t feat = b.dims[3];
          Tensor<double> bf({b.dims[0] * b.dims[1] * b.dims[2], feat});
          bf.data = b.data;
          Tensor<double> ef({sem.dims[0] * sem.dims[1] * sem.dims[2], feat});
          ef.data = sem.data;
          total += cca_mean_correlation(bf, ef).mean_correlation;
          ++blocks;
        }
        if (blocks > 0) f << step << ',' << detail::fmt_double(total / double(blocks)) << "\n";
      }
    }

    int64_t last = steps.back();
    int64_t z_max = 0;
    for (const auto& e : entries)
      if (e.step == last && e.kind == "expert") z_max = std::max(z_max, e.expert);
    if (z_max > 0) {
      std::vector<std::vector<double>> acc(size_t(z_max), std::vector<double>(size_t(z_max), 0));
      int64_t blocks = 0;
      std::vector<int64_t> block_ids;
      for (const auto& e : entries)
        if (e.step == last && e.kind == "expert" &&
            std::find(block_ids.begin(), block_ids.end(), e.block) == block_ids.end())
          block_ids.push_back(e.block);
      std::sort(block_ids.begin(), block_ids.end());
      for (int64_t blk : block_ids) {
        std::vector<Tensor<double>> feats(static_cast<size_t>(z_max));
        for (const auto& e : entries)
          if (e.step == last && e.block == blk && e.kind == "expert") {
            Tensor<double> t = load(e);
            Tensor<double> flat({t.dims[0] * t.dims[1] * t.dims[2], t.dims[3]});
            flat.data = t.data;
            feats[size_t(e.expert - 1)] = std::move(flat);
          }
        RedundancyReport rr = expert_redundancy(feats);
        for (int64_t i = 0; i < z_max; ++i)
          for (int64_t j = 0; j < z_max; ++j) acc[size_t(i)][size_t(j)] += rr.experts[size_t(i)][size_t(j)];
        ++blocks;
      }
      std::ofstream f(dir / "redundancy.csv");
      for (int64_t j = 0; j < z_max; ++j) f << (j ? "," : "") << "expert_" << (j + 1);
      f << "\n";
      for (int64_t i = 0; i < z_max; ++i) {
        for (int64_t j = 0; j < z_max; ++j)
          f << (j ? "," : "") << detail::fmt_double(acc[size_t(i)][size_t(j)] / double(blocks));
        f << "\n";
      }
    }
    ++emitted;
  }
  return emitted;
}

}  // namespace pcaagg
