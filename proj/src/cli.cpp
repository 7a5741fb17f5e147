#include "headmask/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "headmask/analysis.hpp"
#include "headmask/errors.hpp"
#include "headmask/importance.hpp"
#include "headmask/plot.hpp"

namespace headmask {

namespace fs = std::filesystem;

// ---- run config ---------------------------------------------------------------

namespace {

int to_int(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(value, &used);
    if (used == value.size()) return static_cast<int>(v);
  } catch (const std::logic_error&) {
  }
  throw UsageError("config key '" + key + "' expects an integer, got '" + value + "'");
}

float to_float(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const float v = std::stof(value, &used);
    if (used == value.size()) return v;
  } catch (const std::logic_error&) {
  }
  throw UsageError("config key '" + key + "' expects a number, got '" + value + "'");
}

std::string fmt(double v) { return format_number(v); }

// Shortest text that reads back as the same float.
std::string fmt(float v) {
  char buf[32];
  for (int precision = 6; precision <= 9; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, static_cast<double>(v));
    if (std::strtof(buf, nullptr) == v) break;
  }
  return buf;
}

}  // namespace

RunConfig::RunConfig() {
  model.vocab_src = 0;
  model.vocab_tgt = 0;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (is_model_config_key(key)) {
    apply_model_config_entry(model, key, value);
  } else if (key == "variant") {
    train.variant = parse_variant(value);
  } else if (key == "mask_n") {
    train.mask_n = to_int(key, value);
  } else if (key == "max_steps") {
    train.max_steps = to_int(key, value);
  } else if (key == "batch_size") {
    train.batch_size = to_int(key, value);
  } else if (key == "warmup_steps") {
    train.warmup_steps = to_int(key, value);
  } else if (key == "adam_beta1") {
    train.adam_beta1 = to_float(key, value);
  } else if (key == "adam_beta2") {
    train.adam_beta2 = to_float(key, value);
  } else if (key == "adam_eps") {
    train.adam_eps = to_float(key, value);
  } else if (key == "label_smoothing") {
    train.label_smoothing = to_float(key, value);
  } else if (key == "lr_scale") {
    train.lr_scale = to_float(key, value);
  } else if (key == "eval_every") {
    train.eval_every = to_int(key, value);
  } else if (key == "seed") {
    const int s = to_int(key, value);
    if (s < 0) throw UsageError("seed must be >= 0");
    train.seed = static_cast<std::uint64_t>(s);
  } else if (key == "task") {
    if (value != "reversal" && value != "copy" && value != "tsv") {
      throw UsageError("task must be reversal, copy or tsv, got '" + value + "'");
    }
    task.task = value;
  } else if (key == "task_vocab") {
    task.vocab = to_int(key, value);
  } else if (key == "task_min_len") {
    task.min_len = to_int(key, value);
  } else if (key == "task_max_len") {
    task.max_len = to_int(key, value);
  } else if (key == "task_pairs") {
    task.pairs = to_int(key, value);
  } else if (key == "data") {
    task.data = value;
  } else {
    throw UsageError("unknown config key '" + key + "'");
  }
}

std::vector<std::pair<std::string, std::string>> RunConfig::entries() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [k, v] : model_config_entries(model)) out.emplace_back(k, v);
  out.emplace_back("variant", std::string(variant_name(train.variant)));
  out.emplace_back("mask_n", std::to_string(train.mask_n));
  out.emplace_back("max_steps", std::to_string(train.max_steps));
  out.emplace_back("batch_size", std::to_string(train.batch_size));
  out.emplace_back("warmup_steps", std::to_string(train.warmup_steps));
  out.emplace_back("adam_beta1", fmt(train.adam_beta1));
  out.emplace_back("adam_beta2", fmt(train.adam_beta2));
  out.emplace_back("adam_eps", fmt(train.adam_eps));
  out.emplace_back("label_smoothing", fmt(train.label_smoothing));
  out.emplace_back("lr_scale", fmt(train.lr_scale));
  out.emplace_back("eval_every", std::to_string(train.eval_every));
  out.emplace_back("seed", std::to_string(train.seed));
  out.emplace_back("task", task.task);
  out.emplace_back("task_vocab", std::to_string(task.vocab));
  out.emplace_back("task_min_len", std::to_string(task.min_len));
  out.emplace_back("task_max_len", std::to_string(task.max_len));
  out.emplace_back("task_pairs", std::to_string(task.pairs));
  out.emplace_back("data", task.data);
  return out;
}

RunConfig read_run_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open config " + path.string());
  RunConfig config;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(path.string() + ":" + std::to_string(line_no) + ": expected key=value");
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    try {
      config.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const UsageError& e) {
      throw UsageError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return config;
}

void write_run_config(const RunConfig& config, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& [k, v] : config.entries()) out << k << '=' << v << '\n';
}

ParallelCorpus load_task_data(const RunConfig& config) {
  const TaskConfig& t = config.task;
  if (t.task == "tsv") {
    if (t.data.empty()) throw UsageError("task=tsv needs a data path");
    return load_tsv_corpus(t.data);
  }
  if (!t.data.empty()) return load_tsv_corpus(t.data);
  if (t.task == "copy") {
    return gen_copy_task(t.vocab, t.min_len, t.max_len, t.pairs, config.train.seed);
  }
  return gen_reversal_task(t.vocab, t.min_len, t.max_len, t.pairs, config.train.seed);
}

// ---- commands -----------------------------------------------------------------

namespace {

struct Context {
  std::ostream& out;
  std::ostream& err;
};

void created(Context& ctx, const fs::path& p) { ctx.out << "wrote " << p.string() << '\n'; }

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("cannot create output directory " + dir.string());
}

void apply_env_seed(RunConfig& config) {
  if (const char* env = std::getenv("HEADMASK_SEED"); env && *env) {
    try {
      config.set("seed", env);
    } catch (const UsageError& e) {
      throw UsageError(std::string("HEADMASK_SEED: ") + e.what());
    }
  }
}

void apply_overrides(RunConfig& config, const std::vector<std::string>& sets) {
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    config.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
}

void fill_vocab(RunConfig& config, const ParallelCorpus& corpus) {
  auto check = [](int& field, int actual, const char* name) {
    if (field != 0 && field != actual) {
      throw UsageError(std::string("config ") + name + "=" + std::to_string(field) +
                       " but the data has " + std::to_string(actual) + " tokens");
    }
    field = actual;
  };
  check(config.model.vocab_src, corpus.src_vocab.size(), "vocab_src");
  check(config.model.vocab_tgt, corpus.tgt_vocab.size(), "vocab_tgt");
}

struct LoadedRun {
  RunConfig config;
  Transformer model;
  ParallelCorpus corpus;
};

// Checkpoint directory + its config, with the corpus it was trained on (or
// `data_override`) whose vocabularies must match the saved ones.
LoadedRun load_run(const fs::path& dir, const std::string& data_override) {
  if (!fs::is_directory(dir)) throw DataError("checkpoint directory " + dir.string() + " not found");
  RunConfig config = read_run_config(dir / "config.txt");
  if (!data_override.empty()) config.task.data = data_override;
  Transformer model = load_checkpoint(dir / "model.manifest");
  if (!(model.config() == config.model)) {
    throw DataError("checkpoint " + (dir / "model.manifest").string() +
                    " does not match the model described by " + (dir / "config.txt").string());
  }
  ParallelCorpus corpus = load_task_data(config);
  const Vocab src = read_vocab(dir / "src.vocab");
  const Vocab tgt = read_vocab(dir / "tgt.vocab");
  if (!(corpus.src_vocab == src) || !(corpus.tgt_vocab == tgt)) {
    throw DataError("data vocabulary does not match the checkpoint's vocabulary in " + dir.string());
  }
  return {std::move(config), std::move(model), std::move(corpus)};
}

const std::vector<SentencePair>& split_or_throw(const ParallelCorpus& c, const std::string& name) {
  const auto& pairs = c.split(parse_split(name));
  if (pairs.empty()) throw DataError("split '" + name + "' is empty");
  return pairs;
}

std::vector<int> checked_heads(const std::string& text, int total) {
  std::vector<int> ids = parse_head_ids(text);
  for (int id : ids) {
    if (id < 0 || id >= total) {
      throw UsageError("head id " + std::to_string(id) + " out of range [0, " +
                       std::to_string(total) + ")");
    }
  }
  return ids;
}

// -- train / gen-data

struct TrainArgs {
  std::string config, data, variant, out;
  int mask_n = -1000;
  long long seed = -1;
  int steps = -1;
  std::vector<std::string> sets;
};

RunConfig resolve_config(const std::string& path, const std::vector<std::string>& sets,
                         long long seed) {
  RunConfig config = path.empty() ? RunConfig{} : read_run_config(path);
  apply_env_seed(config);
  apply_overrides(config, sets);
  if (seed >= 0) config.set("seed", std::to_string(seed));
  return config;
}

int cmd_train(Context& ctx, const TrainArgs& a) {
  RunConfig config = resolve_config(a.config, a.sets, a.seed);
  if (!a.variant.empty()) config.train.variant = parse_variant(a.variant);
  if (a.mask_n != -1000) {
    if (a.mask_n < 0) throw UsageError("--mask-n must be >= 0");
    config.train.mask_n = a.mask_n;
  }
  if (a.steps >= 0) config.train.max_steps = a.steps;
  if (!a.data.empty()) config.task.data = a.data;
  // Everything checkable without data is checked before any work starts.
  config.train.validate(ModelConfig{config.model}.total_heads());

  ParallelCorpus corpus = load_task_data(config);
  fill_vocab(config, corpus);
  config.model.validate();
  config.train.validate(config.model.total_heads());
  if (config.train.variant != Variant::Baseline) {
    config.train.mask_n = config.train.resolved_mask_n(config.model.total_heads());
  }

  const fs::path out(a.out);
  ensure_dir(out);
  Transformer model = init_model(config.model, config.train.seed);
  ctx.err << "training " << variant_name(config.train.variant) << " for "
          << config.train.max_steps << " steps (" << model.parameter_count() << " parameters, "
          << config.train.resolved_mask_n(config.model.total_heads()) << " heads masked per batch)\n";
  const TrainState state = train(model, corpus, config.train, [&](const StepRecord& r) {
    if (r.dev_metric) {
      ctx.err << "step " << r.step << " loss " << fmt(r.loss) << " dev_acc "
              << fmt(*r.dev_metric) << '\n';
    }
  });

  save_checkpoint(model, out / "model.manifest");
  created(ctx, out / "model.manifest");
  created(ctx, out / "model.bin");
  write_vocab(corpus.src_vocab, out / "src.vocab");
  created(ctx, out / "src.vocab");
  write_vocab(corpus.tgt_vocab, out / "tgt.vocab");
  created(ctx, out / "tgt.vocab");
  write_training_log(state, config.train.variant, out / "train_log.csv");
  created(ctx, out / "train_log.csv");
  write_run_config(config, out / "config.txt");
  created(ctx, out / "config.txt");
  return 0;
}

int cmd_gen_data(Context& ctx, const TrainArgs& a) {
  RunConfig config = resolve_config(a.config, a.sets, a.seed);
  if (config.task.task == "tsv") throw UsageError("gen-data needs task=reversal or task=copy");
  config.task.data.clear();
  const ParallelCorpus corpus = load_task_data(config);
  const fs::path out(a.out);
  ensure_dir(out);
  write_tsv_corpus(corpus, out);
  for (const char* name : {"train.tsv", "dev.tsv", "test.tsv"}) created(ctx, out / name);
  write_run_config(config, out / "config.txt");
  created(ctx, out / "config.txt");
  return 0;
}

// -- analysis commands

struct AnalysisArgs {
  std::string checkpoint, data, split, out, importance, mode = "groups", mask;
  bool mask_given = false;
  int batch_size = 100;
  int groups = 8;
  int jobs = 1;
  bool bleu = false;
  bool no_bleu = false;
};

int cmd_importance(Context& ctx, const AnalysisArgs& a) {
  if (a.batch_size < 1) throw UsageError("--batch-size must be >= 1");
  LoadedRun run = load_run(a.checkpoint, a.data);
  const auto& pairs = split_or_throw(run.corpus, a.split);
  const std::vector<Batch> batches = epoch_batches(pairs, a.batch_size);
  ImportanceOptions opts;
  opts.label_smoothing = run.config.train.label_smoothing;
  const ImportanceReport report =
      estimate_importance(run.model, batches, MaskSet{}, opts, a.split, run.config.train.max_steps);
  const fs::path out(a.out);
  ensure_dir(out);
  write_importance_csv(report, out / "importance.csv");
  created(ctx, out / "importance.csv");
  return 0;
}

int cmd_sweep(Context& ctx, const AnalysisArgs& a) {
  std::vector<SweepOrder> orders;
  {
    std::stringstream ss(a.mode);
    std::string part;
    while (std::getline(ss, part, ',')) orders.push_back(parse_sweep_order(part));
    if (orders.empty()) throw UsageError("--mode is empty");
  }
  if (a.jobs < 1) throw UsageError("--jobs must be >= 1");
  LoadedRun run = load_run(a.checkpoint, a.data);
  const ImportanceReport report = read_importance_csv(a.importance);
  if (!(report.layout == run.model.config().layout())) {
    throw DataError(a.importance + " describes " + std::to_string(report.layout.total()) +
                    " heads but the checkpoint has " +
                    std::to_string(run.model.config().total_heads()));
  }
  const auto& pairs = split_or_throw(run.corpus, a.split);
  SweepOptions opts;
  opts.num_groups = a.groups;
  opts.jobs = a.jobs;
  opts.eval.with_bleu = a.bleu;
  std::vector<SweepResult> sweeps;
  for (SweepOrder order : orders) {
    sweeps.push_back(order == SweepOrder::PerGroup
                         ? sweep_group_masking(run.model, report, pairs, opts)
                         : sweep_cumulative(run.model, report, pairs, order, opts));
    if (order != SweepOrder::PerGroup) {
      ctx.err << sweep_order_name(order) << " area "
              << fmt(sweep_area(sweeps.back(), run.model.config().total_heads())) << '\n';
    }
  }
  const fs::path out(a.out);
  ensure_dir(out);
  write_sweep_csv(sweeps, out / "sweep.csv");
  created(ctx, out / "sweep.csv");
  return 0;
}

int cmd_eval(Context& ctx, const AnalysisArgs& a) {
  LoadedRun run = load_run(a.checkpoint, a.data);
  const std::vector<int> heads = checked_heads(a.mask, run.model.config().total_heads());
  const auto& pairs = split_or_throw(run.corpus, a.split);
  EvalOptions opts;
  opts.with_bleu = !a.no_bleu;
  const MaskSet mask = MaskSet::masking(heads);
  const Metrics m = evaluate(run.model, pairs, mask, opts);
  ctx.out << "token_accuracy=" << fmt(m.token_accuracy) << '\n';
  if (m.bleu) ctx.out << "bleu=" << fmt(*m.bleu) << '\n';
  const fs::path out(a.out);
  ensure_dir(out);
  write_metrics_csv(m, mask.masked_ids(), out / "metrics.csv");
  created(ctx, out / "metrics.csv");
  return 0;
}

// -- stats

struct StatsArgs {
  std::vector<std::string> inputs;
  std::string tags, out;
  int bins = 20;
};

int cmd_stats(Context& ctx, const StatsArgs& a) {
  if (a.inputs.size() < 2) throw UsageError("stats needs at least two importance files");
  std::vector<std::string> tags;
  if (!a.tags.empty()) {
    std::stringstream ss(a.tags);
    std::string t;
    while (std::getline(ss, t, ',')) tags.push_back(t);
    if (tags.size() != a.inputs.size()) {
      throw UsageError("--tags has " + std::to_string(tags.size()) + " entries for " +
                       std::to_string(a.inputs.size()) + " files");
    }
  }
  std::vector<ImportanceReport> reports;
  for (std::size_t i = 0; i < a.inputs.size(); ++i) {
    ImportanceReport r = read_importance_csv(a.inputs[i]);
    const fs::path p(a.inputs[i]);
    // Default tag: the directory holding the file (one run per directory).
    const std::string parent = p.parent_path().filename().string();
    r.dataset_tag = !tags.empty() ? tags[i] : (parent.empty() ? p.stem().string() : parent);
    reports.push_back(std::move(r));
  }
  const DistributionTable table = compare_distributions(reports, a.bins);
  const fs::path out(a.out);
  ensure_dir(out);
  write_stats_csv(table, out / "stats.csv");
  created(ctx, out / "stats.csv");
  write_histogram_csv(table, out / "histogram.csv");
  created(ctx, out / "histogram.csv");
  return 0;
}

// -- plot

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

CsvTable read_csv(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  CsvTable t;
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    std::string cell;
    std::stringstream ss(s);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!s.empty() && s.back() == ',') cells.emplace_back();
    return cells;
  };
  if (!std::getline(in, line)) throw DataError(path.string() + " is empty");
  t.header = split(line);
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    t.rows.push_back(split(line));
    if (t.rows.back().size() != t.header.size()) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                      std::to_string(t.header.size()) + " columns");
    }
  }
  return t;
}

double cell_number(const std::string& s) {
  if (s.empty()) return std::nan("");
  try {
    return std::stod(s);
  } catch (const std::logic_error&) {
    throw DataError("not a number: '" + s + "'");
  }
}

std::size_t column(const CsvTable& t, const std::string& name) {
  for (std::size_t i = 0; i < t.header.size(); ++i) {
    if (t.header[i] == name) return i;
  }
  throw DataError("missing column " + name);
}

// One series per distinct value of `key`, in order of first appearance.
std::vector<Series> series_by(const CsvTable& t, const std::string& key, const std::string& x,
                              const std::string& y) {
  const std::size_t k = column(t, key), xi = column(t, x), yi = column(t, y);
  std::vector<Series> out;
  std::map<std::string, std::size_t> index;
  for (const auto& row : t.rows) {
    auto [it, fresh] = index.emplace(row[k], out.size());
    if (fresh) out.push_back(Series{row[k], {}, {}});
    out[it->second].x.push_back(cell_number(row[xi]));
    out[it->second].y.push_back(cell_number(row[yi]));
  }
  return out;
}

Chart chart_for(const fs::path& path) {
  const CsvTable t = read_csv(path);
  const std::string h = [&] {
    std::string s;
    for (std::size_t i = 0; i < t.header.size(); ++i) s += (i ? "," : "") + t.header[i];
    return s;
  }();
  Chart c;
  c.title = path.filename().string();
  if (h == "order_tag,row,n_masked,masked_heads,token_accuracy,bleu") {
    std::vector<Series> all = series_by(t, "order_tag", "n_masked", "token_accuracy");
    bool only_groups = true;
    for (const auto& s : all) only_groups = only_groups && s.name == "groups";
    if (only_groups) {
      c.series = series_by(t, "order_tag", "row", "token_accuracy");
      c.bars = true;
      c.x_label = "masked group (0 = none)";
    } else {
      for (auto& s : all) {
        if (s.name != "groups") c.series.push_back(std::move(s));
      }
      c.x_label = "heads masked";
    }
    c.y_label = "token accuracy";
  } else if (h == "model_tag,mean,variance,max") {
    const std::size_t tag = column(t, "model_tag"), var = column(t, "variance");
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
      c.series.push_back(Series{t.rows[i][tag], {static_cast<double>(i)},
                                {cell_number(t.rows[i][var])}});
    }
    c.bars = true;
    c.x_label = "model";
    c.y_label = "importance variance";
  } else if (h == "model_tag,bin_low,bin_high,count") {
    c.series = series_by(t, "model_tag", "bin_low", "count");
    c.x_label = "head importance";
    c.y_label = "heads";
  } else if (h == "flat_id,attn_type,layer,head,importance") {
    c.series = series_by(t, "attn_type", "flat_id", "importance");
    c.bars = true;
    c.x_label = "flat head id";
    c.y_label = "importance";
  } else if (h == "step,variant,loss,lr,dev_metric,masked_heads") {
    c.series = series_by(t, "variant", "step", "loss");
    c.x_label = "step";
    c.y_label = "training loss";
  } else {
    throw DataError(path.string() + ": unrecognized CSV header '" + h + "'");
  }
  return c;
}

struct PlotArgs {
  std::vector<std::string> inputs;
  std::string out;
};

int cmd_plot(Context& ctx, const PlotArgs& a) {
  const fs::path out(a.out);
  std::vector<std::pair<Chart, fs::path>> charts;
  std::set<std::string> names;
  for (const auto& in : a.inputs) {
    fs::path target = out / (fs::path(in).stem().string() + ".svg");
    if (!names.insert(target.string()).second) {
      const std::string parent = fs::path(in).parent_path().filename().string();
      target = out / (parent + "_" + fs::path(in).stem().string() + ".svg");
      if (!names.insert(target.string()).second) {
        throw UsageError("two inputs would both be plotted to " + target.string());
      }
    }
    charts.emplace_back(chart_for(in), target);
  }
  ensure_dir(out);
  for (const auto& [chart, target] : charts) {
    write_svg(chart, target);
    created(ctx, target);
  }
  return 0;
}

// -- heads

struct HeadsArgs {
  std::string what = "list", checkpoint, config;
  std::vector<std::string> sets;
};

int cmd_heads(Context& ctx, const HeadsArgs& a) {
  if (a.what != "list") throw UsageError("heads: unknown action '" + a.what + "' (expected list)");
  ModelConfig mc;
  if (!a.checkpoint.empty()) {
    mc = read_run_config(fs::path(a.checkpoint) / "config.txt").model;
  } else {
    RunConfig rc = a.config.empty() ? RunConfig{} : read_run_config(a.config);
    apply_overrides(rc, a.sets);
    mc = rc.model;
  }
  const HeadLayout layout = mc.layout();
  if (layout.layers < 1 || layout.heads_per_layer < 1) throw UsageError("model has no heads");
  ctx.out << "flat_id,attn_type,layer,head\n";
  for (int f = 0; f < layout.total(); ++f) {
    const HeadId id = HeadId::from_flat(f, layout);
    ctx.out << f << ',' << attn_type_name(id.type) << ',' << id.layer << ',' << id.head << '\n';
  }
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Attention-head importance and head-masking experiments"};
  app.name("headmask");
  app.require_subcommand(1);
  Context ctx{out, err};

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint directory");
  train_cmd->add_option("--config", train_args.config, "Run config (key=value file)");
  train_cmd->add_option("--data", train_args.data, "TSV corpus file or directory");
  train_cmd->add_option("--variant", train_args.variant, "baseline, random or impt");
  train_cmd->add_option("--mask-n", train_args.mask_n, "Heads masked per batch");
  train_cmd->add_option("--seed", train_args.seed, "Seed for every random stream");
  train_cmd->add_option("--steps", train_args.steps, "Training steps");
  train_cmd->add_option("--set", train_args.sets, "Override a config key (key=value)");
  train_cmd->add_option("--out", train_args.out, "Output directory")->required();

  TrainArgs gen_args;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic corpus as TSV files");
  gen_cmd->add_option("--config", gen_args.config, "Run config (key=value file)");
  gen_cmd->add_option("--seed", gen_args.seed, "Corpus seed");
  gen_cmd->add_option("--set", gen_args.sets, "Override a config key (key=value)");
  gen_cmd->add_option("--out", gen_args.out, "Output directory")->required();

  AnalysisArgs imp_args;
  imp_args.split = "dev";
  auto* imp_cmd = app.add_subcommand("importance", "Estimate head importance on a split");
  imp_cmd->add_option("--checkpoint", imp_args.checkpoint, "Checkpoint directory")->required();
  imp_cmd->add_option("--data", imp_args.data, "TSV corpus overriding the run's data");
  imp_cmd->add_option("--split", imp_args.split, "train, dev or test");
  imp_cmd->add_option("--batch-size", imp_args.batch_size, "Sentences per batch");
  imp_cmd->add_option("--out", imp_args.out, "Output directory")->required();

  AnalysisArgs sweep_args;
  sweep_args.split = "dev";
  auto* sweep_cmd = app.add_subcommand("sweep", "Mask importance groups and evaluate");
  sweep_cmd->add_option("--checkpoint", sweep_args.checkpoint, "Checkpoint directory")->required();
  sweep_cmd->add_option("--importance", sweep_args.importance, "importance.csv")->required();
  sweep_cmd->add_option("--data", sweep_args.data, "TSV corpus overriding the run's data");
  sweep_cmd->add_option("--split", sweep_args.split, "train, dev or test");
  sweep_cmd->add_option("--mode", sweep_args.mode,
                        "groups, ascending, descending (comma-separated list allowed)");
  sweep_cmd->add_option("--groups", sweep_args.groups, "Number of importance groups");
  sweep_cmd->add_option("--jobs", sweep_args.jobs, "Worker threads");
  sweep_cmd->add_flag("--bleu", sweep_args.bleu, "Also decode and score BLEU");
  sweep_cmd->add_option("--out", sweep_args.out, "Output directory")->required();

  StatsArgs stats_args;
  auto* stats_cmd = app.add_subcommand("stats", "Compare importance distributions");
  stats_cmd->add_option("inputs", stats_args.inputs, "importance.csv files")->required();
  stats_cmd->add_option("--tags", stats_args.tags, "Comma-separated model tags");
  stats_cmd->add_option("--bins", stats_args.bins, "Histogram bins");
  stats_cmd->add_option("--out", stats_args.out, "Output directory")->required();

  AnalysisArgs eval_args;
  eval_args.split = "test";
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint, optionally with heads masked");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint directory")->required();
  eval_cmd->add_option("--data", eval_args.data, "TSV corpus overriding the run's data");
  eval_cmd->add_option("--split", eval_args.split, "train, dev or test");
  eval_cmd->add_option("--mask", eval_args.mask, "Flat head ids to mask, e.g. \"3;7\"");
  eval_cmd->add_flag("--no-bleu", eval_args.no_bleu, "Skip greedy decoding");
  eval_cmd->add_option("--out", eval_args.out, "Output directory")->required();

  PlotArgs plot_args;
  auto* plot_cmd = app.add_subcommand("plot", "Render CSV outputs as SVG charts");
  plot_cmd->add_option("inputs", plot_args.inputs, "CSV files")->required();
  plot_cmd->add_option("--out", plot_args.out, "Output directory")->required();

  HeadsArgs heads_args;
  auto* heads_cmd = app.add_subcommand("heads", "Print the flat head id table");
  heads_cmd->add_option("action", heads_args.what, "list");
  heads_cmd->add_option("--checkpoint", heads_args.checkpoint, "Checkpoint directory");
  heads_cmd->add_option("--config", heads_args.config, "Run config");
  heads_cmd->add_option("--set", heads_args.sets, "Override a config key (key=value)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*train_cmd) return cmd_train(ctx, train_args);
    if (*gen_cmd) return cmd_gen_data(ctx, gen_args);
    if (*imp_cmd) return cmd_importance(ctx, imp_args);
    if (*sweep_cmd) return cmd_sweep(ctx, sweep_args);
    if (*stats_cmd) return cmd_stats(ctx, stats_args);
    if (*eval_cmd) return cmd_eval(ctx, eval_args);
    if (*plot_cmd) return cmd_plot(ctx, plot_args);
    if (*heads_cmd) return cmd_heads(ctx, heads_args);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return 3;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return 4;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace headmask
