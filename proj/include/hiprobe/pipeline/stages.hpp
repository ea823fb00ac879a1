#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hiprobe/analysis/head_impact.hpp"
#include "hiprobe/analysis/stats.hpp"
#include "hiprobe/data/dataset_io.hpp"
#include "hiprobe/data/distractors.hpp"
#include "hiprobe/data/generate.hpp"
#include "hiprobe/data/pnm.hpp"
#include "hiprobe/data/units.hpp"
#include "hiprobe/error.hpp"
#include "hiprobe/eval/metrics.hpp"
#include "hiprobe/model/model.hpp"
#include "hiprobe/model/weights_io.hpp"
#include "hiprobe/peft/lora.hpp"
#include "hiprobe/peft/setups.hpp"
#include "hiprobe/peft/train.hpp"
#include "hiprobe/pipeline/run_config.hpp"
#include "hiprobe/util/hash.hpp"

namespace hiprobe {

namespace fs = std::filesystem;

/// A stage that could not complete; the command line maps it to exit code 1.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& message)
      : Error("stage " + stage + " failed: " + message), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

/// Progress sink: (stage name, message).
using StageLog = std::function<void(const std::string&, const std::string&)>;

inline StageLog stderr_log() {
  return [](const std::string& stage, const std::string& msg) { std::cerr << "[" << stage << "] " << msg << std::endl; };
}

/// Independent sub-seed for one consumer of the run seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  return Fnv1a().update(seed).update(tag).digest();
}

inline constexpr const char* kStageRecord = "stage.json";

namespace detail {

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
  if (!out) throw FormatError("write failed for " + path.string());
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline std::string fixed6(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << v;
  return os.str();
}

/// Digest of every file under `dir` except the stage record, keyed by relative path.
inline nlohmann::json digest_tree(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().filename() != kStageRecord) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  nlohmann::json out = nlohmann::json::object();
  for (const auto& f : files) out[fs::relative(f, dir).generic_string()] = file_digest(f);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Artifact formats shared by stages and tests.

inline nlohmann::json kw_json(const KwResult& r) {
  return {{"statistic", r.statistic},           {"df", r.df},
          {"p_value", r.p_value},               {"group_sizes", r.group_sizes},
          {"tie_correction", r.tie_correction}, {"degenerate", r.degenerate}};
}

inline std::string hi_csv(const HiMatrix& hi) {
  std::ostringstream os;
  for (std::size_t l = 0; l < hi.n_layers; ++l) {
    for (std::size_t h = 0; h < hi.n_heads; ++h) os << (h ? "," : "") << detail::fixed6(hi.at(l, h));
    os << '\n';
  }
  return os.str();
}

/// Reads a layers x heads score grid; `n_units` is not stored in the CSV.
inline HiMatrix read_hi_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  HiMatrix hi;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream cells(line);
    std::string cell;
    while (std::getline(cells, cell, ',')) {
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(cell, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != cell.size() || cell.empty() || !std::isfinite(v)) {
        throw FormatError(path.string() + ": bad value '" + cell + "' in row " + std::to_string(hi.n_layers + 1));
      }
      row.push_back(v);
    }
    if (hi.n_layers == 0) hi.n_heads = row.size();
    if (row.size() != hi.n_heads) throw FormatError(path.string() + ": ragged row " + std::to_string(hi.n_layers + 1));
    hi.scores.insert(hi.scores.end(), row.begin(), row.end());
    ++hi.n_layers;
  }
  if (hi.n_layers == 0 || hi.n_heads == 0) throw FormatError(path.string() + ": empty score grid");
  return hi;
}

/// Scores mapped linearly onto 0..255 (min to max), one `cell` x `cell` block per head.
inline void write_hi_heatmap(const HiMatrix& hi, const fs::path& path, std::size_t cell = 16) {
  const auto [lo, hi_it] = std::minmax_element(hi.scores.begin(), hi.scores.end());
  const double range = *hi_it - *lo;
  const std::size_t width = hi.n_heads * cell, height = hi.n_layers * cell;
  std::vector<std::uint8_t> gray(width * height, 0);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const double v = hi.at(y / cell, x / cell);
      gray[y * width + x] = range > 0 ? static_cast<std::uint8_t>(std::lround(255.0 * (v - *lo) / range)) : 0;
    }
  }
  write_pgm(width, height, gray, path);
}

inline nlohmann::json rankings_json(const HiMatrix& hi, std::size_t k, std::uint64_t random_seed) {
  return {{"k", k},
          {"layer_means", hi.layer_means()},
          {"order", layers_by_score(hi)},
          {"top", rank_layers(hi, k, LayerStrategy::top)},
          {"bottom", rank_layers(hi, k, LayerStrategy::bottom)},
          {"random", rank_layers(hi, k, LayerStrategy::random_excluding, random_seed)},
          {"random_seed", random_seed}};
}

// ---------------------------------------------------------------------------
// Stage table.

struct StageSpec {
  std::string name;
  std::string dir;
  std::vector<std::string> upstream;
  std::function<nlohmann::json(const RunConfig&)> inputs;
  std::function<void(const RunConfig&, const fs::path& out, const StageLog&)> run;
};

inline std::uint64_t finetune_seed(const RunConfig& c) { return derive_seed(c.seed, "finetune"); }

namespace detail {

inline Dataset load_data(const fs::path& out) { return read_dataset(out / "data"); }

inline void run_gen_data(const RunConfig& c, const fs::path& out, const StageLog& log) {
  Dataset d;
  d.seed = c.seed;
  d.samples = generate_dataset(c.dataset_size, c.seed);
  d.splits = make_splits(d.samples, c.seed);
  write_dataset(d, out / "data");
  log("gen-data", std::to_string(d.samples.size()) + " samples (hi " + std::to_string(d.splits.hi.size()) +
                      ", train " + std::to_string(d.splits.train.size()) + ", val " +
                      std::to_string(d.splits.val.size()) + ", test " + std::to_string(d.splits.test.size()) + ")");
}

inline void run_pretrain(const RunConfig& c, const fs::path& out, const StageLog& log) {
  const Dataset d = load_data(out);
  Model model{init_model(c.model, derive_seed(c.seed, "init")), {}};
  model.base.set_trainable(true);
  TrainConfig tc = c.pretrain;
  tc.seed = derive_seed(c.seed, "pretrain");
  const auto train_units = caption_units(d.split(d.splits.train));
  const auto val_units = caption_units(d.split(d.splits.val));
  log("pretrain", std::to_string(train_units.size()) + " train units, " + std::to_string(val_units.size()) +
                      " val units, " + std::to_string(count_params(model).total) + " parameters");
  TrainResult r = train(std::move(model), train_units, val_units, tc, [&](const EpochReport& e) {
    log("pretrain", "epoch " + std::to_string(e.epoch) + "/" + std::to_string(tc.epochs) + " train " +
                        fixed6(e.train_loss) + " val " + fixed6(e.val_loss));
  });
  const fs::path dir = out / "pretrain";
  save_weights(r.model.base, dir / "model.bin");
  write_json(dir / "history.json", {{"train_config", tc}, {"history", r.history}});
  log("pretrain", "best val loss " + fixed6(r.history.best_val_loss) + " at epoch " +
                      std::to_string(r.history.best_epoch));
}

inline void run_hi(const RunConfig& c, const fs::path& out, const StageLog& log) {
  const Dataset d = load_data(out);
  const Model model{load_weights(out / "pretrain" / "model.bin"), {}};
  const auto samples = d.split(d.splits.hi);
  const HiMatrix scores = head_impact(model, samples, {c.tau, c.workers});
  const fs::path dir = out / "hi";
  write_text(dir / "hi_scores.csv", hi_csv(scores));
  // Everything downstream works from the emitted grid.
  HiMatrix hi = read_hi_csv(dir / "hi_scores.csv");
  hi.n_units = scores.n_units;
  write_hi_heatmap(hi, dir / "hi_heatmap.pgm");
  const HiTests tests = layer_tests(hi);
  write_json(dir / "stats.json", {{"n_units", hi.n_units},
                                  {"coverage", c.tau},
                                  {"layers", kw_json(tests.layers)},
                                  {"heads", kw_json(tests.heads)}});
  write_json(dir / "rankings.json", rankings_json(hi, c.effective_k(), finetune_seed(c)));
  log("hi", std::to_string(hi.n_units) + " units; layers p " + fixed6(tests.layers.p_value) + ", heads p " +
                fixed6(tests.heads.p_value));
}

inline void run_finetune(const RunConfig& c, const fs::path& out, const StageLog& log) {
  const Dataset d = load_data(out);
  const ModelWeights base = load_weights(out / "pretrain" / "model.bin");
  const HiMatrix hi = read_hi_csv(out / "hi" / "hi_scores.csv");
  if (hi.n_layers != base.config.n_layers || hi.n_heads != base.config.n_heads) {
    throw FormatError("hi_scores.csv shape does not match the pretrained model");
  }
  TrainConfig tc = c.finetune;
  tc.seed = finetune_seed(c);
  const auto train_units = caption_units(d.split(d.splits.train));
  const auto val_units = caption_units(d.split(d.splits.val));
  for (const auto& name : setup_names()) {
    const fs::path dir = out / "finetune" / name;
    fs::create_directories(dir);
    const SetupResult r = run_setup(name, base, hi, c.effective_k(), train_units, val_units, tc, c.lora,
                                    [&](const EpochReport& e) {
                                      log("finetune", name + " epoch " + std::to_string(e.epoch) + "/" +
                                                          std::to_string(tc.epochs) + " train " +
                                                          fixed6(e.train_loss) + " val " + fixed6(e.val_loss));
                                    });
    nlohmann::json meta = setup_metadata(r);
    if (r.trained) {
      save_model(r.model, dir / "model.bin");
      meta["checkpoint"] = "model.bin";
      meta["history"] = r.history;
      meta["train_config"] = tc;
    } else {
      meta["checkpoint"] = "../../pretrain/model.bin";
    }
    write_json(dir / "setup.json", meta);
    std::ostringstream layers;
    for (std::size_t i = 0; i < r.layers.size(); ++i) layers << (i ? "," : "") << r.layers[i];
    log("finetune", name + ": layers [" + layers.str() + "], trainable " + std::to_string(r.params.trainable) +
                        " of " + std::to_string(r.params.total));
  }
}

inline Model load_setup_model(const fs::path& out, const std::string& name) {
  const fs::path dir = out / "finetune" / name;
  const auto meta = read_json(dir / "setup.json");
  if (!meta.contains("checkpoint") || !meta.at("checkpoint").is_string()) {
    throw FormatError((dir / "setup.json").string() + ": missing checkpoint reference");
  }
  return load_model(dir / meta.at("checkpoint").get<std::string>());
}

inline void run_eval(const RunConfig& c, const fs::path& out, const StageLog& log) {
  const Dataset d = load_data(out);
  std::vector<const Sample*> all;
  for (const auto& s : d.samples) all.push_back(&s);
  const auto pool = caption_pool(all);
  const auto units = caption_units(d.split(d.splits.test));
  const std::uint64_t seed = derive_seed(c.seed, "eval");
  const fs::path dir = out / "eval";
  std::vector<EvalResult> results;
  for (const auto& name : setup_names()) {
    const Model model = load_setup_model(out, name);
    results.push_back(evaluate(name, model, units, pool, seed));
    const auto& r = results.back();
    write_json(dir / (name + ".json"), r);
    log("eval", name + ": perplexity " + fixed6(r.perplexity) + ", accuracy " + fixed6(r.accuracy) + ", ans_prob " +
                    fixed6(r.ans_prob));
  }
  const Comparison cmp = compare_setups(results, "original");
  write_json(dir / "results.json", {{"baseline", "original"}, {"n_units", units.size()}, {"results", results}});
  write_text(dir / "comparison.csv", comparison_csv(cmp));
  write_text(dir / "comparison.txt", comparison_table(cmp));
}

}  // namespace detail

inline const std::vector<StageSpec>& stage_table() {
  static const std::vector<StageSpec> table{
      {"gen-data", "data", {},
       [](const RunConfig& c) { return nlohmann::json{{"seed", c.seed}, {"dataset_size", c.dataset_size}}; },
       detail::run_gen_data},
      {"pretrain", "pretrain", {"gen-data"},
       [](const RunConfig& c) {
         return nlohmann::json{{"seed", c.seed}, {"model", c.model}, {"pretrain", train_json(c.pretrain)}};
       },
       detail::run_pretrain},
      {"hi", "hi", {"gen-data", "pretrain"},
       [](const RunConfig& c) { return nlohmann::json{{"seed", c.seed}, {"tau", c.tau}, {"k", c.effective_k()}}; },
       detail::run_hi},
      {"finetune", "finetune", {"gen-data", "pretrain", "hi"},
       [](const RunConfig& c) {
         return nlohmann::json{{"seed", c.seed},
                               {"k", c.effective_k()},
                               {"finetune", train_json(c.finetune)},
                               {"lora", {{"rank", c.lora.rank}, {"alpha", c.lora.alpha}, {"init_std", c.lora.init_std}}}};
       },
       detail::run_finetune},
      {"eval", "eval", {"gen-data", "pretrain", "hi", "finetune"},
       [](const RunConfig& c) { return nlohmann::json{{"seed", c.seed}}; }, detail::run_eval},
  };
  return table;
}

inline const StageSpec& stage_spec(const std::string& name) {
  for (const auto& s : stage_table()) {
    if (s.name == name) return s;
  }
  throw ConfigError("unknown stage '" + name + "'");
}

// ---------------------------------------------------------------------------
// Cache records.

/// Reads a stage record and checks that every listed output still has its
/// recorded digest. Returns nothing when the record is absent or stale.
inline std::optional<nlohmann::json> valid_record(const fs::path& out, const StageSpec& spec) {
  const fs::path dir = out / spec.dir;
  const fs::path path = dir / kStageRecord;
  if (!fs::exists(path)) return std::nullopt;
  nlohmann::json rec;
  try {
    rec = detail::read_json(path);
    if (!rec.contains("key") || !rec.contains("outputs")) return std::nullopt;
    if (rec.at("outputs") != detail::digest_tree(dir)) return std::nullopt;
  } catch (const Error&) {
    return std::nullopt;
  }
  return rec;
}

/// Cache key of a stage: its config subset plus the output digests of every upstream stage.
inline std::string stage_key(const RunConfig& c, const fs::path& out, const StageSpec& spec) {
  nlohmann::json upstream = nlohmann::json::object();
  for (const auto& name : spec.upstream) {
    const auto rec = valid_record(out, stage_spec(name));
    if (!rec) {
      throw StageError(spec.name, "upstream stage " + name + " has no valid outputs in " + out.string() + "; run " +
                                      name + " first");
    }
    upstream[name] = rec->at("key");
    upstream[name + ":outputs"] = rec->at("outputs");
  }
  const nlohmann::json material{{"stage", spec.name}, {"inputs", spec.inputs(c)}, {"upstream", upstream}};
  return Fnv1a().update(material.dump()).hex();
}

inline bool stage_is_cached(const RunConfig& c, const fs::path& out, const StageSpec& spec) {
  const auto rec = valid_record(out, spec);
  if (!rec) return false;
  try {
    return rec->at("key") == stage_key(c, out, spec);
  } catch (const StageError&) {
    return false;
  }
}

/// Runs one stage unconditionally and records its cache entry.
inline void run_stage(const RunConfig& c, const StageSpec& spec, const StageLog& log) {
  const fs::path& out = c.out;
  const std::string key = stage_key(c, out, spec);
  const fs::path dir = out / spec.dir;
  try {
    fs::remove_all(dir);
    fs::create_directories(dir);
    spec.run(c, out, log);
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(spec.name, e.what());
  }
  const nlohmann::json record{
      {"stage", spec.name}, {"key", key}, {"inputs", spec.inputs(c)}, {"outputs", detail::digest_tree(dir)}};
  detail::write_json(dir / kStageRecord, record);
}

struct StageStatus {
  std::string name;
  bool cached = false;
};

inline void prepare_out_dir(const RunConfig& c) {
  fs::create_directories(c.out);
  detail::write_json(c.out / "config.json", run_config_json(c));
}

/// Stages in order up to and including `last`, skipping those whose record
/// matches the current key.
inline std::vector<StageStatus> run_all(const RunConfig& c, const std::string& last = "eval",
                                        const StageLog& log = stderr_log()) {
  c.validate();
  stage_spec(last);
  prepare_out_dir(c);
  std::vector<StageStatus> status;
  for (const auto& spec : stage_table()) {
    const bool cached = stage_is_cached(c, c.out, spec);
    if (cached) {
      log(spec.name, "cached");
    } else {
      run_stage(c, spec, log);
    }
    status.push_back({spec.name, cached});
    if (spec.name == last) break;
  }
  return status;
}

/// One stage on demand; upstream stages must already be valid for this config.
inline void run_single(const RunConfig& c, const std::string& name, const StageLog& log = stderr_log()) {
  c.validate();
  const StageSpec& spec = stage_spec(name);
  prepare_out_dir(c);
  for (const auto& up : spec.upstream) {
    if (!stage_is_cached(c, c.out, stage_spec(up))) {
      throw StageError(name, "upstream stage " + up + " is missing or stale for this config; run " + up + " first");
    }
  }
  run_stage(c, spec, log);
}

}  // namespace hiprobe
