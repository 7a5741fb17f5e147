// End-to-end acceptance run on the desk configuration. Prints one PASS/FAIL
// line per criterion and exits non-zero when any criterion fails. Artifacts
// (importance, sweeps, logs, summary) go to argv[1] or ./acceptance_out.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "grad_check.hpp"
#include "headmask/analysis.hpp"
#include "headmask/cli.hpp"
#include "headmask/importance.hpp"
#include "headmask/training.hpp"

using namespace headmask;
using headmask::testing::grad_check;
using headmask::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

constexpr int kSeeds[] = {1, 2, 3};
constexpr Variant kVariants[] = {Variant::Baseline, Variant::RandomN, Variant::ImptN};

int failures = 0;

void report(int id, bool ok, const std::string& what, const std::string& detail) {
  std::printf("%s criterion %d: %s (%s)\n", ok ? "PASS" : "FAIL", id, what.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

// ---- criterion 1

void gradient_checks() {
  constexpr double tol = 1e-3;
  Rng rng(1);
  double worst = 0.0;
  auto op = [&](const testing::OpFn& f, std::vector<Tensor> in) {
    worst = std::max(worst, grad_check(f, std::move(in)));
  };
  Tensor a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 3, 4}, rng);
  Tensor bias = random_tensor({4}, rng);
  op([](Tape& t, const auto& x) { return add(t, x[0], x[1]); }, {a, b});
  op([](Tape& t, const auto& x) { return add(t, x[0], x[1]); }, {a, bias});
  op([](Tape& t, const auto& x) { return sub(t, x[0], x[1]); }, {a, b});
  op([](Tape& t, const auto& x) { return mul(t, x[0], x[1]); }, {a, b});
  op([](Tape& t, const auto& x) { return scale(t, x[0], -2.5f); }, {a});
  op([](Tape& t, const auto& x) { return add_scalar(t, x[0], 3.0f); }, {a});
  op([](Tape& t, const auto& x) { return reshape(t, x[0], {6, 4}); }, {a});
  op([](Tape& t, const auto& x) { return transpose(t, x[0], 0, 2); }, {a});
  op([](Tape& t, const auto& x) { return concat(t, {x[0], x[1]}, 1); }, {a, b});
  op([](Tape& t, const auto& x) { return sum(t, x[0]); }, {a});
  op([](Tape& t, const auto& x) { return mean(t, x[0]); }, {a});
  Tensor ma = random_tensor({2, 3, 5}, rng), mb = random_tensor({2, 5, 4}, rng);
  op([](Tape& t, const auto& x) { return matmul(t, x[0], x[1]); }, {ma, mb});
  Tensor s = random_tensor({2, 3, 5}, rng, true, -2.0f, 2.0f);
  op([](Tape& t, const auto& x) { return softmax(t, x[0], -1); }, {s});
  Tensor scores = random_tensor({2, 2, 3, 4}, rng, true, -2.0f, 2.0f);
  std::vector<unsigned char> keep(2 * 3 * 4, 1);
  keep[3] = keep[7] = keep[11] = 0;
  op([&](Tape& t, const auto& x) { return masked_softmax(t, x[0], keep); }, {scores});
  std::vector<float> v(24);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (i % 2 ? 1.0f : -1.0f) * (0.1f + 0.05f * i);
  op([](Tape& t, const auto& x) { return relu(t, x[0]); }, {Tensor::from_data({4, 6}, v, true)});
  Tensor x = random_tensor({3, 8}, rng, true, -2.0f, 2.0f);
  Tensor gamma = random_tensor({8}, rng, true, 0.5f, 1.5f), beta = random_tensor({8}, rng);
  op([](Tape& t, const auto& in) { return layer_norm(t, in[0], in[1], in[2]); }, {x, gamma, beta});
  op([](Tape& t, const auto& in) {
    Rng drop(42);
    return dropout(t, in[0], 0.3f, drop, true);
  }, {x});
  const std::vector<int> ids{1, 3, 1, 0, 5, 3};
  op([&](Tape& t, const auto& in) { return embedding(t, in[0], ids, {2, 3}); },
     {random_tensor({6, 4}, rng)});
  op([](Tape& t, const auto& in) { return gate_heads(t, in[0], in[1]); },
     {random_tensor({2, 3, 2, 2}, rng), random_tensor({2, 3}, rng, true, 0.5f, 1.5f)});
  Tensor logits = random_tensor({5, 7}, rng, true, -3.0f, 3.0f);
  const std::vector<int> targets{0, 3, 6, 2, 2};
  const std::vector<float> weights{0.2f, 0.0f, 0.5f, 0.1f, 1.0f};
  op([&](Tape& t, const auto& in) {
    return smoothed_cross_entropy(t, in[0], targets, weights, 0.1f);
  }, {logits});
  op([&](Tape& t, const auto& in) { return cross_entropy(t, in[0], targets); }, {logits});

  // Whole model, sampled parameters.
  const ParallelCorpus c = gen_reversal_task(16, 2, 8, 50, 4);
  ModelConfig mc;
  mc.d_model = 16;
  mc.d_ff = 32;
  mc.vocab_src = c.src_vocab.size();
  mc.vocab_tgt = c.tgt_vocab.size();
  mc.dropout = 0.0f;
  Transformer model = init_model(mc, 4);
  const Batch batch = make_batch(std::span<const SentencePair>(c.train.data(), 4));
  ForwardOptions fo;
  fo.label_smoothing = 0.1f;
  model.zero_grad();
  {
    Tape tape;
    tape.backward(model.forward(tape, batch, fo).loss);
  }
  Rng pick(10);
  const auto& params = model.parameters();
  int sampled = 0;
  double diff = 0.0, norm = 0.0;
  for (; sampled < 32; ++sampled) {
    const auto& p = params[pick.below(params.size())];
    const std::size_t i = pick.below(p.value.numel());
    const double analytic = p.value.has_grad() ? p.value.grad()[i] : 0.0;
    Tensor handle = p.value;
    auto data = handle.mutable_data();
    const float orig = data[i];
    const double eps = 1e-3;
    data[i] = static_cast<float>(orig + eps);
    Tape up(false);
    const double lu = model.forward(up, batch, fo).loss.item();
    data[i] = static_cast<float>(orig - eps);
    Tape down(false);
    const double ld = model.forward(down, batch, fo).loss.item();
    data[i] = orig;
    const double numeric = (lu - ld) / (2 * eps);
    diff += (analytic - numeric) * (analytic - numeric);
    norm += std::max(analytic * analytic, numeric * numeric);
  }
  const double e2e = std::sqrt(diff / norm);
  report(1, worst < tol && e2e < 2e-2 && sampled >= 20, "finite-difference gradients",
         "worst op " + fmt("%.2e", worst) + " < 1e-3, model " + fmt("%.2e", e2e) + " < 2e-2 on " +
             std::to_string(sampled) + " parameters");
}

// ---- criterion 2

double sentence_loss(const Transformer& model, const Batch& b, const std::vector<float>& gates) {
  ForwardOptions fo;
  fo.gate_values = gates;
  fo.label_smoothing = 0.1f;
  fo.reduction = LossReduction::SentenceSum;
  Tape tape(false);
  return model.forward(tape, b, fo).loss.item();
}

void importance_checks() {
  const ParallelCorpus c = gen_reversal_task(16, 2, 8, 50, 5);
  ModelConfig mc;
  mc.d_model = 16;
  mc.d_ff = 32;
  mc.vocab_src = c.src_vocab.size();
  mc.vocab_tgt = c.tgt_vocab.size();
  mc.dropout = 0.0f;
  const Transformer model = init_model(mc, 5);
  const Batch batch = make_batch(std::span<const SentencePair>(c.train.data(), 6));
  const auto g = sentence_gate_gradients(model, batch, MaskSet{}, {});
  const auto k = sentence_context_contractions(model, batch, MaskSet{}, {});
  double contraction = 0.0;
  for (std::size_t r = 0; r < g.size(); ++r) {
    for (std::size_t h = 0; h < g[r].size(); ++h) {
      contraction = std::max(contraction, static_cast<double>(std::abs(g[r][h] - k[r][h])));
    }
  }

  // Gate perturbation, one sentence at a time. Norm-wise over the head vector,
  // as for the op checks: heads with |I| near the float noise floor would make
  // a per-head ratio meaningless.
  const int total = mc.total_heads();
  const double eps = 1e-3;
  double rel = 0.0;
  for (int s = 0; s < 4; ++s) {
    const Batch one = make_batch(std::span<const SentencePair>(c.train.data() + s, 1));
    const auto grads = sentence_gate_gradients(model, one, MaskSet{}, {});
    const std::vector<float> ones(total, 1.0f);
    double diff = 0.0, ni = 0.0, nf = 0.0;
    for (int h = 0; h < total; ++h) {
      std::vector<float> up = ones, down = ones;
      up[h] = static_cast<float>(1.0 + eps);
      down[h] = static_cast<float>(1.0 - eps);
      const double fd = (sentence_loss(model, one, up) - sentence_loss(model, one, down)) / (2 * eps);
      const double ig = grads[0][h];
      diff += (ig - fd) * (ig - fd);
      ni += ig * ig;
      nf += fd * fd;
    }
    rel = std::max(rel, std::sqrt(diff) / std::max(std::sqrt(ni), std::sqrt(nf)));
  }
  report(2, contraction <= 1e-5 && rel <= 5e-2, "importance equals contraction and gate perturbation",
         "contraction gap " + fmt("%.2e", contraction) + " <= 1e-5, perturbation rel " +
             fmt("%.2e", rel) + " <= 5e-2");
}

// ---- criterion 3

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.numel() == b.numel() &&
         std::equal(a.data().begin(), a.data().end(), b.data().begin(),
                    [](float x, float y) { return std::memcmp(&x, &y, sizeof x) == 0; });
}

struct MaskIdentity {
  bool ones_equal = true;
  bool all_masked_independent = true;
  double all_masked_accuracy = 0.0;
  double chance = 0.0;
};

MaskIdentity mask_identities(const Transformer& model, const ParallelCorpus& c) {
  MaskIdentity out;
  const int total = model.config().total_heads();
  MaskSet ones;
  for (int h = 0; h < total; ++h) ones.set_gate(h, 1);
  std::vector<int> all(total);
  for (int h = 0; h < total; ++h) all[h] = h;
  const MaskSet none_open = MaskSet::masking(all);

  for (std::size_t start = 0; start + 8 <= std::min<std::size_t>(c.dev.size(), 200); start += 8) {
    std::vector<SentencePair> pairs(c.dev.begin() + start, c.dev.begin() + start + 8);
    const Batch b = make_batch(std::span<const SentencePair>(pairs));
    ForwardOptions plain, gated;
    gated.mask = &ones;
    Tape t1(false), t2(false);
    out.ones_equal = out.ones_equal &&
                     same_bits(model.forward(t1, b, plain).logits, model.forward(t2, b, gated).logits);

    // Same targets, sources taken from other sentences.
    std::vector<SentencePair> swapped = pairs;
    for (std::size_t i = 0; i < swapped.size(); ++i) {
      swapped[i].src = c.dev[(start + i + 97) % c.dev.size()].src;
    }
    const Batch bs = make_batch(std::span<const SentencePair>(swapped));
    ForwardOptions masked;
    masked.mask = &none_open;
    Tape t3(false), t4(false);
    Tensor la = model.forward(t3, b, masked).logits, lb = model.forward(t4, bs, masked).logits;
    out.all_masked_independent = out.all_masked_independent && same_bits(la, lb);
  }
  out.all_masked_accuracy = token_accuracy(model, c.dev, &none_open);
  out.chance = 1.0 / model.config().vocab_tgt;
  return out;
}

// ---- desk runs

struct Run {
  Variant variant;
  int seed;
  TrainState state{0};
  double cpu_seconds = 0.0;
  double dev_accuracy = 0.0;
  ImportanceReport importance;
  DistributionStats stats;
  SweepResult groups, ascending, descending;
  double area_asc = 0.0, area_desc = 0.0;
};

ModelConfig desk_model(const ParallelCorpus& c) {
  ModelConfig mc;
  mc.vocab_src = c.src_vocab.size();
  mc.vocab_tgt = c.tgt_vocab.size();
  return mc;
}

}  // namespace

int run(int argc, char** argv) {
  const fs::path out_dir = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_out");
  fs::create_directories(out_dir);

  gradient_checks();
  importance_checks();

  std::vector<Run> runs;
  MaskIdentity identities;
  bool zero_n_identical = true;
  bool mechanics_ok = true;
  std::string mechanics_detail;
  long impt_steps_checked = 0;

  for (const int seed : kSeeds) {
    const ParallelCorpus corpus = gen_reversal_task(64, 5, 12, 20000, seed);
    const ModelConfig mc = desk_model(corpus);
    const auto dev_batches = epoch_batches(corpus.dev, 100);
    for (const Variant v : kVariants) {
      Run r{v, seed};
      Transformer model = init_model(mc, seed);
      TrainConfig tc;
      tc.variant = v;
      tc.seed = seed;
      tc.eval_every = 0;
      const std::clock_t c0 = std::clock();
      r.state = train(model, corpus, tc);
      r.cpu_seconds = static_cast<double>(std::clock() - c0) / CLOCKS_PER_SEC;
      r.dev_accuracy = token_accuracy(model, corpus.dev, nullptr);
      const std::string tag = std::string(variant_name(v)) + "_seed" + std::to_string(seed);
      r.importance = estimate_importance(model, dev_batches, MaskSet{}, {}, tag, r.state.step);
      r.stats = distribution_stats(r.importance);
      SweepOptions so;
      so.eval.with_bleu = false;
      r.groups = sweep_group_masking(model, r.importance, corpus.dev, so);
      r.ascending = sweep_cumulative(model, r.importance, corpus.dev, SweepOrder::Ascending, so);
      r.descending = sweep_cumulative(model, r.importance, corpus.dev, SweepOrder::Descending, so);
      for (SweepResult* s : {&r.groups, &r.ascending, &r.descending}) s->model_tag = tag;
      r.area_asc = sweep_area(r.ascending, mc.total_heads());
      r.area_desc = sweep_area(r.descending, mc.total_heads());
      write_importance_csv(r.importance, out_dir / (tag + "_importance.csv"));
      write_sweep_csv(std::vector<SweepResult>{r.groups, r.ascending, r.descending},
                      out_dir / (tag + "_sweep.csv"));
      write_training_log(r.state, v, out_dir / (tag + "_train_log.csv"));

      if (v == Variant::Baseline && seed == kSeeds[0]) identities = mask_identities(model, corpus);

      if (v == Variant::ImptN) {
        const int n = tc.resolved_mask_n(mc.total_heads());
        bool ok = r.state.optimizer_steps == r.state.batches && r.state.batches == tc.max_steps &&
                  static_cast<int>(r.state.impt_checks.size()) == tc.max_steps;
        for (std::size_t i = 0; i < r.state.impt_checks.size(); ++i) {
          const auto& ck = r.state.impt_checks[i];
          std::vector<int> top = ck.top_n;
          std::sort(top.begin(), top.end());
          ok = ok && ck.checksum_before_pass1 == ck.checksum_after_pass1 && top == ck.masked &&
               static_cast<int>(ck.masked.size()) == n && ck.masked == r.state.log[i].masked_heads;
          ++impt_steps_checked;
        }
        if (seed == kSeeds[0]) {
          // Pass 1 of the first step recomputed independently of the trainer.
          const Transformer start = init_model(mc, seed);
          RngStreams streams(seed);
          BatchIterator it = make_batches(corpus.train, tc.batch_size, seed, true);
          const Batch first = it.next();
          ImportanceOptions opts;
          opts.train = true;
          opts.dropout_rng = &streams.dropout;
          ImportanceAccumulator acc(mc.layout());
          acc.add(sentence_gate_gradients(start, first, MaskSet{}, opts));
          ok = ok && top_n_heads(acc.report("", 0), n) == r.state.impt_checks.at(0).top_n;
        }
        mechanics_ok = mechanics_ok && ok;
      }
      std::printf("  %s: dev %.4f var %.4g aucA %.4f aucD %.4f %.0fs cpu\n", tag.c_str(), r.dev_accuracy,
                  r.stats.variance, r.area_asc, r.area_desc, r.cpu_seconds);
      std::fflush(stdout);
      runs.push_back(std::move(r));
    }

    if (seed == kSeeds[0]) {
      // mask_n = 0 under Random-N replays the baseline trajectory.
      TrainConfig base;
      base.max_steps = 200;
      base.seed = seed;
      base.eval_every = 0;
      TrainConfig zero = base;
      zero.variant = Variant::RandomN;
      zero.mask_n = 0;
      Transformer m1 = init_model(mc, seed), m2 = init_model(mc, seed);
      const TrainState s1 = train(m1, corpus, base), s2 = train(m2, corpus, zero);
      for (std::size_t i = 0; i < s1.log.size(); ++i) {
        zero_n_identical = zero_n_identical && s1.log[i].loss == s2.log[i].loss;
      }
      zero_n_identical = zero_n_identical && parameter_checksum(m1, &s1) == parameter_checksum(m2, &s2);
    }
  }

  auto find = [&](Variant v, int seed) -> const Run& {
    for (const auto& r : runs) {
      if (r.variant == v && r.seed == seed) return r;
    }
    throw std::logic_error("missing run");
  };

  report(3, identities.ones_equal && zero_n_identical && identities.all_masked_independent,
         "mask identities",
         std::string("all-ones mask ") + (identities.ones_equal ? "bit-identical" : "differs") +
             ", mask_n=0 " + (zero_n_identical ? "bit-identical" : "differs") + ", all-masked " +
             (identities.all_masked_independent ? "source-independent" : "source-dependent") +
             ", all-masked dev accuracy " + fmt("%.4f", identities.all_masked_accuracy) +
             " vs 1/vocab " + fmt("%.4f", identities.chance));

  {
    bool ok = true;
    std::string detail;
    for (const int seed : kSeeds) {
      const Run& r = find(Variant::Baseline, seed);
      ok = ok && r.dev_accuracy > 0.90 && r.state.step <= 3000 && r.cpu_seconds < 30 * 60;
      detail += "seed " + std::to_string(seed) + " " + fmt("%.4f", r.dev_accuracy) + " in " +
                fmt("%.0f", r.cpu_seconds) + "s; ";
    }
    report(4, ok, "baseline dev token accuracy > 0.90 within 3000 steps and 30 CPU-minutes",
           detail.substr(0, detail.size() - 2));
  }

  {
    bool ok = true;
    std::string detail;
    for (const int seed : kSeeds) {
      const Run& r = find(Variant::Baseline, seed);
      const double base = r.groups.rows[0].metric_value;
      const double drop_most = base - r.groups.rows[1].metric_value;
      const double drop_least = base - r.groups.rows.back().metric_value;
      ok = ok && drop_most > drop_least && r.area_desc <= r.area_asc;
      detail += "seed " + std::to_string(seed) + " drop " + fmt("%.4f", drop_most) + " > " +
                fmt("%.4f", drop_least) + ", auc " + fmt("%.4f", r.area_desc) + " <= " +
                fmt("%.4f", r.area_asc) + "; ";
    }
    report(5, ok, "most important group matters most; descending curve under ascending",
           detail.substr(0, detail.size() - 2));
  }

  {
    int wins = 0;
    std::string detail;
    for (const int seed : kSeeds) {
      const double b = find(Variant::Baseline, seed).stats.variance;
      const double rn = find(Variant::RandomN, seed).stats.variance;
      const double im = find(Variant::ImptN, seed).stats.variance;
      if (im < rn && rn < b) ++wins;
      detail += "seed " + std::to_string(seed) + " impt " + fmt("%.3g", im) + " random " +
                fmt("%.3g", rn) + " baseline " + fmt("%.3g", b) + "; ";
    }
    report(6, wins >= 2, "importance variance Impt-N < Random-N < Baseline in >= 2 of 3 seeds",
           std::to_string(wins) + "/3: " + detail.substr(0, detail.size() - 2));
  }

  {
    int wins = 0;
    std::string detail;
    for (const int seed : kSeeds) {
      const double rn = find(Variant::RandomN, seed).area_desc;
      const double b = find(Variant::Baseline, seed).area_desc;
      if (rn > b) ++wins;
      detail += "seed " + std::to_string(seed) + " " + fmt("%.4f", rn) + " vs " + fmt("%.4f", b) + "; ";
    }
    report(7, wins >= 2, "Random-N descending area exceeds baseline in >= 2 of 3 seeds",
           std::to_string(wins) + "/3: " + detail.substr(0, detail.size() - 2));
  }

  report(8, mechanics_ok && impt_steps_checked > 0, "importance-guided step mechanics",
         std::to_string(impt_steps_checked) + " steps: checksum stable across pass 1, masked = top-n, "
         "one optimizer step per batch");

  // ---- criterion 9: every command twice, outputs compared byte for byte.
  {
    const fs::path a = out_dir / "determinism_a", b = out_dir / "determinism_b";
    fs::remove_all(a);
    fs::remove_all(b);
    std::vector<std::string> tiny{"--set", "d_model=16", "--set", "d_ff=32", "--set", "task_vocab=16",
                                  "--set", "task_min_len=2", "--set", "task_max_len=6", "--set",
                                  "task_pairs=300", "--set", "batch_size=8", "--set", "warmup_steps=10",
                                  "--set", "eval_every=10"};
    auto commands = [&](const fs::path& d) {
      std::vector<std::vector<std::string>> cmds;
      for (const char* v : {"baseline", "random", "impt"}) {
        std::vector<std::string> c{"train", "--variant", v, "--steps", "30", "--seed", "7", "--out",
                                   (d / v).string()};
        c.insert(c.end(), tiny.begin(), tiny.end());
        cmds.push_back(c);
      }
      std::vector<std::string> gen{"gen-data", "--seed", "7", "--out", (d / "data").string()};
      gen.insert(gen.end(), tiny.begin(), tiny.end());
      cmds.push_back(gen);
      const std::string ck = (d / "impt").string();
      cmds.push_back({"importance", "--checkpoint", ck, "--out", ck});
      cmds.push_back({"sweep", "--checkpoint", ck, "--importance", ck + "/importance.csv", "--mode",
                      "groups,ascending,descending", "--bleu", "--out", ck});
      cmds.push_back({"importance", "--checkpoint", (d / "random").string(), "--out", (d / "random").string()});
      cmds.push_back({"stats", ck + "/importance.csv", (d / "random/importance.csv").string(), "--out",
                      (d / "stats").string()});
      cmds.push_back({"eval", "--checkpoint", ck, "--mask", "1;2", "--out", ck});
      cmds.push_back({"plot", ck + "/sweep.csv", (d / "stats/stats.csv").string(), "--out",
                      (d / "plots").string()});
      return cmds;
    };
    bool ok = true;
    for (const fs::path& d : {a, b}) {
      for (const auto& cmd : commands(d)) {
        std::ostringstream o, e;
        if (run_cli(cmd, o, e) != 0) {
          ok = false;
          std::printf("  %s failed: %s", cmd[0].c_str(), e.str().c_str());
        }
      }
    }
    int compared = 0;
    for (const auto& entry : fs::recursive_directory_iterator(a)) {
      if (!entry.is_regular_file()) continue;
      const fs::path rel = fs::relative(entry.path(), a);
      ok = ok && fs::exists(b / rel) && slurp(entry.path()) == slurp(b / rel);
      ++compared;
    }
    // Short desk-size runs, compared by parameter and optimizer checksum.
    const ParallelCorpus corpus = gen_reversal_task(64, 5, 12, 20000, 1);
    for (const Variant v : kVariants) {
      TrainConfig tc;
      tc.variant = v;
      tc.max_steps = 40;
      tc.eval_every = 0;
      Transformer m1 = init_model(desk_model(corpus), 1), m2 = init_model(desk_model(corpus), 1);
      const TrainState s1 = train(m1, corpus, tc), s2 = train(m2, corpus, tc);
      ok = ok && parameter_checksum(m1, &s1) == parameter_checksum(m2, &s2);
      ++compared;
    }
    report(9, ok && compared > 20, "re-runs are byte-identical",
           std::to_string(compared) + " files and checkpoints compared");
  }

  {
    std::ofstream summary(out_dir / "summary.csv");
    summary << "variant,seed,dev_accuracy,importance_mean,importance_variance,area_ascending,"
               "area_descending,train_cpu_seconds\n";
    for (const auto& r : runs) {
      summary << variant_name(r.variant) << ',' << r.seed << ',' << format_number(r.dev_accuracy) << ','
              << format_number(r.stats.mean) << ',' << format_number(r.stats.variance) << ','
              << format_number(r.area_asc) << ',' << format_number(r.area_desc) << ','
              << format_number(r.cpu_seconds) << '\n';
    }
  }
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::printf("FAIL acceptance run aborted: %s\n", e.what());
    return 1;
  }
}
