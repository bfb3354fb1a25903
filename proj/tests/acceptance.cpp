// End-to-end acceptance gate. Each numbered criterion prints exactly one
// PASS/FAIL line with the measured values; the process exits 0 only if all
// eight pass. Heavier checks reuse a shared set of training runs on the
// synthetic modes (2 targets x 3 classes x 100 records, noise 0.1, seed 7).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "dime/data.hpp"
#include "dime/gradcheck.hpp"
#include "dime/kernels.hpp"
#include "dime/metrics.hpp"
#include "dime/model.hpp"
#include "dime/rng.hpp"
#include "dime/trainer.hpp"

using namespace dime;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool ok = false;
  std::string detail;
};

int g_passed = 0;

void print_verdict(int idx, const std::string& name, const Outcome& o) {
  std::printf("%s  criterion %d (%s): %s\n", o.ok ? "PASS" : "FAIL", idx, name.c_str(),
              o.detail.c_str());
  std::fflush(stdout);
  if (o.ok) ++g_passed;
}

std::string fmt(const char* pattern, double a, double b = 0, double c = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, pattern, a, b, c);
  return buf;
}

// ---------------------------------------------------------------------------
// Criterion 1: finite-difference gradient verification
// ---------------------------------------------------------------------------

Outcome criterion_gradcheck() {
  auto t0 = Clock::now();

  ModelConfig mc;
  mc.frontend.d_text_in = 6;
  mc.frontend.d_visual_in = 5;
  mc.frontend.d_common = 8;
  mc.fusion.d_model = 8;
  mc.fusion.n_heads = 2;
  mc.fusion.d_ffn = 12;
  mc.gating.d_hidden = 8;
  mc.seed = 7;

  Rng rng = Rng::derive(7, kDataStream);
  auto unit_vec = [&](int n) {
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = rng.normal();
    double norm = l2_norm(std::span<const double>(v));
    std::vector<float> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] / norm);
    return out;
  };
  Dataset ds;
  ds.d_text = 6;
  ds.d_visual = 5;
  ds.default_prompt_embedding = unit_vec(6);
  for (int r = 0; r < 2; ++r) {
    EmbeddingRecord rec;
    rec.id = "probe" + std::to_string(r);
    rec.target = "probe";
    rec.label = r;
    rec.e_text = unit_vec(6);
    rec.e_visual = unit_vec(5);
    ds.records.push_back(std::move(rec));
  }
  std::vector<std::size_t> indices{0, 1};

  DimeModel<double> model = DimeModel<double>::init(mc);
  auto forward = [&](bool with_grad) {
    Tape<double> tape;
    ParamVars<double> P(tape, model);
    Rng unused(0);
    BatchGraph<double> g =
        build_batch_graph(tape, P, model, ds, indices, /*training=*/false, unused);
    if (with_grad) tape.backward(g.l_total);
    return tape.val(g.l_total).data[0];
  };
  std::vector<Parameter<double>*> params = model.parameters();
  GradCheckReport report = check_gradients(
      params, [&] { return forward(false); }, [&] { forward(true); }, GradCheckOptions{});

  double elapsed = seconds_since(t0);
  std::set<std::string> groups;
  for (const auto& gr : report.groups) groups.insert(gr.name);
  bool all_groups = groups == std::set<std::string>{"frontend",  "fusion_t", "fusion_v",
                                                    "fusion_tv", "gating",   "classifier"};
  bool ok = report.pass && report.max_rel_err < 1e-4 && all_groups && elapsed < 60.0;
  return {ok, fmt("max rel err %.3e over %.0f coordinates, 6/6 parameter groups, %.1f s",
                  report.max_rel_err, static_cast<double>(report.checked), elapsed)};
}

// ---------------------------------------------------------------------------
// Criterion 2: closed-form unit suite for the expert losses, gate, expert
// fusion, classifier, and total loss, plus the 1000-triple mirror identity
// ---------------------------------------------------------------------------

Outcome criterion_formulas() {
  int failures = 0;
  double worst = 0;
  auto expect = [&](double got, double want) {
    double err = std::abs(got - want);
    worst = std::max(worst, err);
    if (!(err < 1e-9)) ++failures;
  };

  Tape<double> tape;
  ExpertLossConfig ec;  // margin 1.0
  auto vec = [&](std::vector<double> v) { return tape.leaf(TensorData<double>::vector(std::move(v))); };
  auto val = [&](Var v) { return tape.val(v).data[0]; };

  // Triplet hinge: anchor at the origin, positive at distance 0.5, negative
  // at distance 0.2 -> 1 + 0.5 - 0.2.
  {
    Var tv = vec({0, 0}), t = vec({0.5, 0}), v = vec({0.2, 0});
    expect(val(loss_textual(tape, t, v, tv, ec)), 1.3);
    expect(val(loss_visual(tape, v, t, tv, ec)), 1.3);  // mirrored arguments
  }
  // Equal positive and negative -> the margin itself, for both hinges.
  {
    Var tv = vec({1, 0}), t = vec({0.3, 0.4}), v = vec({0.3, 0.4});
    expect(val(loss_textual(tape, t, v, tv, ec)), 1.0);
    expect(val(loss_visual(tape, t, v, tv, ec)), 1.0);
  }
  // Saturated hinge -> exactly zero.
  {
    Var tv = vec({0, 0}), t = vec({0.1, 0}), v = vec({5, 0});
    expect(val(loss_textual(tape, t, v, tv, ec)), 0.0);
  }
  // Cosine consistency: colinear 0, orthogonal 2, anti-aligned 4.
  {
    Var u = vec({1, 2, 2});
    expect(val(loss_alignment(tape, u, u, u, ec)), 0.0);
    Var tv = vec({1, 0, 0}), t = vec({0, 1, 0}), v = vec({0, 0, 1});
    expect(val(loss_alignment(tape, t, v, tv, ec)), 2.0);
    Var w = vec({1, 1}), nw = vec({-1, -1});
    expect(val(loss_alignment(tape, w, w, nw, ec)), 4.0);
  }
  // Zero margin with a coincident triple: all three losses vanish.
  {
    ExpertLossConfig m0 = ec;
    m0.margin_m = 0.0;
    Var u = vec({0.6, 0.8});
    expect(val(loss_textual(tape, u, u, u, m0)), 0.0);
    expect(val(loss_visual(tape, u, u, u, m0)), 0.0);
    expect(val(loss_alignment(tape, u, u, u, m0)), 0.0);
  }
  // Mirror identity on 1000 random triples.
  {
    Rng rng(123);
    double max_gap = 0;
    for (int trial = 0; trial < 1000; ++trial) {
      std::vector<double> a(4), b(4), c(4);
      for (int i = 0; i < 4; ++i) {
        a[i] = rng.normal();
        b[i] = rng.normal();
        c[i] = rng.normal();
      }
      Var va = vec(a), vb = vec(b), vc = vec(c);
      double lv = val(loss_visual(tape, va, vb, vc, ec));
      double lt = val(loss_textual(tape, vb, va, vc, ec));
      max_gap = std::max(max_gap, std::abs(lv - lt));
    }
    worst = std::max(worst, max_gap);
    if (!(max_gap < 1e-9)) ++failures;
  }

  // Gate behaviour through a real model's gating head.
  {
    ModelConfig mc;
    mc.frontend.d_text_in = 6;
    mc.frontend.d_visual_in = 5;
    mc.frontend.d_common = 4;
    mc.fusion.d_model = 4;
    mc.fusion.n_heads = 2;
    mc.fusion.d_ffn = 8;
    mc.gating.d_hidden = 5;
    mc.seed = 1;
    DimeModel<double> model = DimeModel<double>::init(mc);
    std::fill(model.gating.W2.value.data.begin(), model.gating.W2.value.data.end(), 0.0);
    model.gating.b2.value.data = {0, 0, 0};

    Tape<double> gt;
    ParamVars<double> P(gt, model);
    Var e_t = gt.leaf(TensorData<double>::vector({0.5, -0.5, 0.5, -0.5}));
    Var e_v = gt.leaf(TensorData<double>::vector({0.1, 0.2, 0.3, 0.4}));

    // Zero logits -> exactly uniform.
    Var pi = gate(gt, P, model.cfg.gating, model.gating, e_t, e_v);
    for (double p : gt.val(pi).data) expect(p, 1.0 / 3.0);

    // Low temperature with logits [1,0,0] -> near one-hot on pi_t.
    model.gating.b2.value.data = {1, 0, 0};
    GatingConfig sharp = model.cfg.gating;
    sharp.tau = 0.01;
    Tape<double> gt2;
    ParamVars<double> P2(gt2, model);
    Var pi2 = gate(gt2, P2, sharp, model.gating,
                   gt2.leaf(TensorData<double>::vector({0.5, -0.5, 0.5, -0.5})),
                   gt2.leaf(TensorData<double>::vector({0.1, 0.2, 0.3, 0.4})));
    if (!(gt2.val(pi2).data[0] > 0.999)) ++failures;

    // argmax is stable across tau in {0.5, 1, 2}.
    model.gating.b2.value.data = {0.3, 0.9, 0.1};
    int first_argmax = -1;
    for (double tau : {0.5, 1.0, 2.0}) {
      GatingConfig gc = model.cfg.gating;
      gc.tau = tau;
      Tape<double> gt3;
      ParamVars<double> P3(gt3, model);
      Var pi3 = gate(gt3, P3, gc, model.gating,
                     gt3.leaf(TensorData<double>::vector({0.5, -0.5, 0.5, -0.5})),
                     gt3.leaf(TensorData<double>::vector({0.1, 0.2, 0.3, 0.4})));
      const auto& d = gt3.val(pi3).data;
      int am = static_cast<int>(std::max_element(d.begin(), d.end()) - d.begin());
      if (first_argmax < 0) first_argmax = am;
      if (am != first_argmax) ++failures;
      double sum = std::accumulate(d.begin(), d.end(), 0.0);
      expect(sum, 1.0);
    }

    // Expert fusion: one-hot gate returns that expert exactly; a convex
    // combination of identical experts is a fixed point.
    Var h_t = vec({1, 2, 3}), h_v = vec({4, 5, 6}), h_tv = vec({7, 8, 9});
    Var one_hot = vec({1, 0, 0});
    Var fused = fuse_experts(tape, one_hot, h_t, h_v, h_tv);
    {
      const auto& d = tape.val(fused).data;
      expect(d[0], 1);
      expect(d[1], 2);
      expect(d[2], 3);
    }
    Var even = vec({0.25, 0.5, 0.25});
    Var u = vec({-3, 0.5, 11});
    const auto& du = tape.val(fuse_experts(tape, even, u, u, u)).data;
    expect(du[0], -3);
    expect(du[1], 0.5);
    expect(du[2], 11);

    // Classifier: zero weights -> uniform probabilities; probabilities are
    // normalized for random inputs; shifting every bias leaves argmax alone.
    std::fill(model.classifier.W_c.value.data.begin(), model.classifier.W_c.value.data.end(),
              0.0);
    model.classifier.b_c.value.data = {0, 0, 0};
    Tape<double> ct;
    ParamVars<double> CP(ct, model);
    auto [logits_u, probs_u] =
        classify(ct, CP, model.classifier, ct.leaf(TensorData<double>::vector({1, -1, 2, 0.5})));
    (void)logits_u;
    for (double p : ct.val(probs_u).data) expect(p, 1.0 / 3.0);

    Rng crng(5);
    for (auto& w : model.classifier.W_c.value.data) w = crng.normal();
    model.classifier.b_c.value.data = {0.2, -0.1, 0.4};
    auto argmax_with_bias_shift = [&](double shift) {
      DimeModel<double>& m = model;
      std::array<double, 3> saved{m.classifier.b_c.value.data[0], m.classifier.b_c.value.data[1],
                                  m.classifier.b_c.value.data[2]};
      for (int k = 0; k < 3; ++k) m.classifier.b_c.value.data[k] += shift;
      Tape<double> st;
      ParamVars<double> SP(st, m);
      auto [lg, pb] =
          classify(st, SP, m.classifier, st.leaf(TensorData<double>::vector({1, -1, 2, 0.5})));
      (void)lg;
      const auto& d = st.val(pb).data;
      for (int k = 0; k < 3; ++k) m.classifier.b_c.value.data[k] = saved[k];
      double sum = std::accumulate(d.begin(), d.end(), 0.0);
      expect(sum, 1.0);
      return static_cast<int>(std::max_element(d.begin(), d.end()) - d.begin());
    };
    if (argmax_with_bias_shift(0.0) != argmax_with_bias_shift(0.7)) ++failures;
  }

  // Total loss is the plain unweighted sum.
  {
    Var total = add(tape, add(tape, tape.scalar(0.5), tape.scalar(0.3)),
                    add(tape, tape.scalar(0.1), tape.scalar(1.1)));
    expect(val(total), 2.0);
    Var zero = add(tape, add(tape, tape.scalar(0.0), tape.scalar(0.0)),
                   add(tape, tape.scalar(0.0), tape.scalar(0.0)));
    expect(val(zero), 0.0);
  }

  return {failures == 0, fmt("max formula error %.3e (tolerance 1e-9), mirror identity on 1000 "
                             "triples, %.0f sub-checks failed",
                             worst, static_cast<double>(failures))};
}

// ---------------------------------------------------------------------------
// Shared training runs over the synthetic modes
// ---------------------------------------------------------------------------

struct ModeRun {
  std::string name;
  Dataset data;
  Splits splits;
  TrainResult<float> result;
  EvalReport test_report;
  double train_seconds = 0;
};

Dataset make_synth(Dominance mode) {
  SyntheticConfig sc;
  sc.targets = {"A", "B"};
  sc.n_per_class_per_target = 100;
  sc.d_text = 64;
  sc.d_visual = 64;
  sc.dominance = mode;
  sc.noise_sigma = 0.1;
  sc.seed = 7;
  return generate_synthetic(sc);
}

ModeRun run_mode(const std::string& name, Dominance mode, bool ablate) {
  ModeRun run;
  run.name = name;
  run.data = make_synth(mode);

  SplitSpec spec;
  spec.seed = 7;
  run.splits = split_dataset(run.data, spec);

  ModelConfig mc;  // default architecture; input dims follow the data
  mc.frontend.d_text_in = run.data.d_text;
  mc.frontend.d_visual_in = run.data.d_visual;
  mc.ablate_alignment = ablate;
  mc.seed = 7;
  TrainConfig tc;  // default optimizer settings, max_epochs 15
  tc.seed = 7;

  auto t0 = Clock::now();
  DimeModel<float> model = DimeModel<float>::init(mc);
  run.result = train(model, run.splits.train, run.splits.dev, tc);
  run.train_seconds = seconds_since(t0);

  DimeModel<float> best = model_from_checkpoint<float>(run.result.best);
  run.test_report = evaluate(best, run.splits.test);
  return run;
}

// ---------------------------------------------------------------------------
// Criterion 3: loss composition and per-mode convergence
// ---------------------------------------------------------------------------

Outcome criterion_objective(const std::vector<const ModeRun*>& runs) {
  double worst_gap = 0;
  bool all_decrease = true;
  std::string decreases;
  for (const ModeRun* run : runs) {
    for (const EpochStats& e : run->result.history) {
      double gap = std::abs(e.l_total - (e.l_t + e.l_v + e.l_s + e.l_ce));
      worst_gap = std::max(worst_gap, gap);
    }
    double first = run->result.history.front().l_total;
    double last = run->result.history.back().l_total;
    if (!(last < first)) all_decrease = false;
    decreases += run->name + " " + fmt("%.3f->%.3f ", first, last);
  }
  bool ok = worst_gap <= 1e-6 && all_decrease;
  return {ok, "max |L_total - (L_T+L_V+L_S+L_CE)| = " + fmt("%.2e", worst_gap) +
                  " (tol 1e-6); first->last epoch L_total: " + decreases};
}

// ---------------------------------------------------------------------------
// Criterion 4: gate specialization toward the signal-bearing modality
// ---------------------------------------------------------------------------

Outcome criterion_specialization(const ModeRun& text, const ModeRun& visual) {
  double pt = text.test_report.mean_pi[0], pv = text.test_report.mean_pi[1];
  double qt = visual.test_report.mean_pi[0], qv = visual.test_report.mean_pi[1];
  bool ok = pt > pv && qv > qt;
  return {ok, fmt("text-dominant test split: pi_t=%.4f vs pi_v=%.4f (margin %+.4f); ", pt, pv,
                  pt - pv) +
                  fmt("visual-dominant: pi_v=%.4f vs pi_t=%.4f (margin %+.4f)", qv, qt, qv - qt)};
}

// ---------------------------------------------------------------------------
// Criterion 5: end-to-end accuracy and the alignment-expert ablation
// ---------------------------------------------------------------------------

Dataset subset_by_mode(const Dataset& ds, const std::string& mode) {
  Dataset out = ds;
  out.records.clear();
  for (const EmbeddingRecord& rec : ds.records) {
    auto it = rec.meta.find("mode");
    if (it != rec.meta.end() && it->second == mode) out.records.push_back(rec);
  }
  return out;
}

Outcome criterion_accuracy(const ModeRun& text, const ModeRun& mixed_full,
                           const ModeRun& mixed_ablated) {
  double f1 = text.test_report.pooled_macro_f1;
  std::size_t epochs = text.result.history.size();
  bool text_ok = f1 >= 0.90 && epochs <= 15 && text.train_seconds < 300.0;

  Dataset shared_subset = subset_by_mode(mixed_full.splits.test, "shared");
  DimeModel<float> full_best = model_from_checkpoint<float>(mixed_full.result.best);
  DimeModel<float> ablated_best = model_from_checkpoint<float>(mixed_ablated.result.best);
  double full_f1 = evaluate(full_best, shared_subset).pooled_macro_f1;
  double ablated_f1 = evaluate(ablated_best, shared_subset).pooled_macro_f1;
  bool ablation_ok = full_f1 >= ablated_f1;

  return {text_ok && ablation_ok,
          fmt("text-dominant test macro-F1 %.4f in %.0f epochs, %.1f s (need >= 0.90, <= 15, "
              "< 300 s); ",
              f1, static_cast<double>(epochs), text.train_seconds) +
              fmt("shared-subset of mixed test (n=%.0f): full %.4f vs ablated %.4f",
                  static_cast<double>(shared_subset.records.size()), full_f1, ablated_f1)};
}

// ---------------------------------------------------------------------------
// Criterion 6: metrics against independent naive oracles
// ---------------------------------------------------------------------------

double naive_macro_f1(const std::vector<int>& gold, const std::vector<int>& pred) {
  double sum = 0;
  for (int c = 0; c < 3; ++c) {
    long tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
      if (pred[i] == c && gold[i] == c)
        ++tp;
      else if (pred[i] == c)
        ++fp;
      else if (gold[i] == c)
        ++fn;
    }
    sum += (2 * tp + fp + fn) == 0 ? 0.0 : 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
  }
  return sum / 3.0;
}

Outcome criterion_metrics() {
  double worst = 0;
  long cases = 0;

  // Exhaustive: every (gold, pred) pair of 3-class sequences up to length 6.
  for (int len = 1; len <= 6; ++len) {
    long n = 1;
    for (int i = 0; i < len; ++i) n *= 3;
    std::vector<int> gold(len), pred(len);
    for (long g = 0; g < n; ++g) {
      long gg = g;
      for (int i = 0; i < len; ++i) {
        gold[i] = gg % 3;
        gg /= 3;
      }
      for (long p = 0; p < n; ++p) {
        long pp = p;
        for (int i = 0; i < len; ++i) {
          pred[i] = pp % 3;
          pp /= 3;
        }
        double lib = macro_f1(gold, pred);
        double ora = naive_macro_f1(gold, pred);
        worst = std::max(worst, std::abs(lib - ora));
        ++cases;
      }
    }
  }

  // Randomized per-target reports against an independent group-and-score pass.
  Rng rng(99);
  double worst_report = 0;
  for (int trial = 0; trial < 20; ++trial) {
    int n = 50;
    std::vector<std::string> targets(n);
    std::vector<int> gold(n), pred(n);
    std::vector<std::array<double, 3>> pis(n);
    const char* names[4] = {"tgtA", "tgtB", "tgtC", "tgtD"};
    for (int i = 0; i < n; ++i) {
      targets[i] = names[static_cast<int>(rng.uniform_int(4))];
      gold[i] = static_cast<int>(rng.uniform_int(3));
      pred[i] = static_cast<int>(rng.uniform_int(3));
      double a = rng.uniform(), b = rng.uniform(), c = rng.uniform();
      double s = a + b + c;
      pis[i] = {a / s, b / s, c / s};
    }
    EvalReport rep = per_target_report(targets, gold, pred, pis);

    std::map<std::string, std::vector<int>> idx;
    for (int i = 0; i < n; ++i) idx[targets[i]].push_back(i);
    double avg_sum = 0;
    std::size_t t = 0;
    for (const auto& [name, rows] : idx) {
      std::vector<int> g, p;
      std::array<double, 3> mean_pi{};
      for (int i : rows) {
        g.push_back(gold[i]);
        p.push_back(pred[i]);
        for (int k = 0; k < 3; ++k) mean_pi[k] += pis[i][k] / rows.size();
      }
      double f1 = naive_macro_f1(g, p);
      avg_sum += f1;
      const TargetReport& tr = rep.per_target.at(t);
      if (tr.target != name) worst_report = 1.0;
      worst_report = std::max(worst_report, std::abs(tr.macro_f1 - f1));
      for (int k = 0; k < 3; ++k)
        worst_report = std::max(worst_report, std::abs(tr.mean_pi[k] - mean_pi[k]));
      ++t;
    }
    worst_report =
        std::max(worst_report, std::abs(rep.avg_macro_f1 - avg_sum / static_cast<double>(idx.size())));
    worst_report = std::max(worst_report, std::abs(rep.pooled_macro_f1 - naive_macro_f1(gold, pred)));
  }

  bool ok = worst <= 1e-12 && worst_report <= 1e-12;
  return {ok, fmt("exhaustive |lib - oracle| = %.2e over %.0f label-sequence pairs; "
                  "randomized reports max gap %.2e (tol 1e-12)",
                  worst, static_cast<double>(cases), worst_report)};
}

// ---------------------------------------------------------------------------
// Criterion 7: split protocol
// ---------------------------------------------------------------------------

Outcome criterion_splits() {
  Dataset ds = make_synth(Dominance::mixed);  // 600 records, 2 targets x 3 classes

  // Stratified 70/10/20 with at most +-1 drift per stratum, exact partition.
  double worst_drift = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SplitSpec spec;
    spec.seed = seed;
    Splits sp = split_dataset(ds, spec);
    if (sp.train.records.size() + sp.dev.records.size() + sp.test.records.size() !=
        ds.records.size())
      return {false, "in-target split is not a partition"};

    std::map<std::pair<std::string, int>, std::array<int, 3>> strata;
    auto count = [&](const Dataset& part, int slot) {
      for (const auto& r : part.records) strata[{r.target, r.label}][slot] += 1;
    };
    count(sp.train, 0);
    count(sp.dev, 1);
    count(sp.test, 2);
    const double ratios[3] = {0.7, 0.1, 0.2};
    for (const auto& [key, counts] : strata) {
      int total = counts[0] + counts[1] + counts[2];
      for (int k = 0; k < 3; ++k) {
        double drift = std::abs(counts[k] - ratios[k] * total);
        worst_drift = std::max(worst_drift, drift);
        if (drift > 1.0 + 1e-9)
          return {false, fmt("stratum drifted %.2f records from its ratio", drift)};
      }
    }
  }

  // Zero-shot: held-out targets form exactly the test target set, disjoint
  // from train and dev, across 100 seeded configurations.
  SyntheticConfig sc;
  sc.targets = {"P", "Q", "R", "S"};
  sc.n_per_class_per_target = 5;
  sc.d_text = 8;
  sc.d_visual = 8;
  sc.seed = 3;
  Dataset multi = generate_synthetic(sc);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng pick(seed);
    std::vector<std::string> held;
    for (const auto& t : multi.targets())
      if (pick.uniform() < 0.4) held.push_back(t);
    if (held.empty()) held.push_back(multi.targets()[seed % 4]);
    if (held.size() == 4) held.pop_back();

    SplitSpec spec;
    spec.mode = SplitMode::zero_shot;
    spec.held_out_targets = held;
    spec.seed = seed;
    Splits sp = split_dataset(multi, spec);

    std::set<std::string> test_targets, seen_targets, held_set(held.begin(), held.end());
    for (const auto& r : sp.test.records) test_targets.insert(r.target);
    for (const auto& r : sp.train.records) seen_targets.insert(r.target);
    for (const auto& r : sp.dev.records) seen_targets.insert(r.target);
    if (test_targets != held_set) return {false, "zero-shot test targets != held-out set"};
    for (const auto& t : held_set)
      if (seen_targets.count(t)) return {false, "zero-shot leak: held-out target in train/dev"};
    if (sp.train.records.size() + sp.dev.records.size() + sp.test.records.size() !=
        multi.records.size())
      return {false, "zero-shot split is not a partition"};
  }

  return {true, fmt("10 stratified splits at 70/10/20 with max drift %.2f records per stratum; "
                    "100 zero-shot seeds fully disjoint",
                    worst_drift)};
}

// ---------------------------------------------------------------------------
// Criterion 8: determinism and persistence
// ---------------------------------------------------------------------------

Outcome criterion_determinism() {
  // Byte-identical synthetic generation.
  SyntheticConfig sc;
  sc.targets = {"A", "B"};
  sc.n_per_class_per_target = 10;
  sc.d_text = 16;
  sc.d_visual = 12;
  sc.dominance = Dominance::mixed;
  sc.seed = 21;
  std::string bytes1 = dataset_to_string(generate_synthetic(sc));
  std::string bytes2 = dataset_to_string(generate_synthetic(sc));
  if (bytes1 != bytes2) return {false, "same-seed synthetic datasets differ"};

  // Identical single-threaded training histories.
  kernels::set_max_threads(1);
  SyntheticConfig tiny = sc;
  tiny.d_text = 6;
  tiny.d_visual = 5;
  tiny.targets = {"A"};
  tiny.n_per_class_per_target = 6;
  Dataset ds = generate_synthetic(tiny);

  ModelConfig mc;
  mc.frontend.d_text_in = 6;
  mc.frontend.d_visual_in = 5;
  mc.frontend.d_common = 8;
  mc.fusion.d_model = 8;
  mc.fusion.n_heads = 2;
  mc.fusion.d_ffn = 12;
  mc.gating.d_hidden = 8;
  mc.seed = 11;
  TrainConfig tc;
  tc.batch_size = 6;
  tc.max_epochs = 4;
  tc.seed = 11;

  DimeModel<float> m1 = DimeModel<float>::init(mc);
  DimeModel<float> m2 = DimeModel<float>::init(mc);
  TrainResult<float> r1 = train(m1, ds, ds, tc);
  TrainResult<float> r2 = train(m2, ds, ds, tc);
  kernels::set_max_threads(0);
  if (r1.history.size() != r2.history.size())
    return {false, "same-seed training runs differ in length"};
  for (std::size_t i = 0; i < r1.history.size(); ++i) {
    const EpochStats &a = r1.history[i], &b = r2.history[i];
    if (a.l_t != b.l_t || a.l_v != b.l_v || a.l_s != b.l_s || a.l_ce != b.l_ce ||
        a.l_total != b.l_total || a.dev_macro_f1 != b.dev_macro_f1 || a.mean_pi != b.mean_pi)
      return {false, fmt("histories diverge at epoch %.0f", static_cast<double>(i + 1))};
  }

  // Checkpoint persistence: save -> load reproduces eval logits bit for bit.
  std::string path = "acceptance_checkpoint.dime";
  save_checkpoint(r1.best, path);
  Checkpoint loaded = load_checkpoint(path);
  std::remove(path.c_str());
  DimeModel<float> direct = model_from_checkpoint<float>(r1.best);
  DimeModel<float> reloaded = model_from_checkpoint<float>(loaded);
  for (const EmbeddingRecord& rec : ds.records) {
    RecordTrace<float> ta = eval_record(direct, ds, rec);
    RecordTrace<float> tb = eval_record(reloaded, ds, rec);
    if (ta.logits.data != tb.logits.data || ta.probs.data != tb.probs.data)
      return {false, "reloaded checkpoint changed eval logits for record " + rec.id};
  }

  return {true,
          fmt("byte-identical generation, identical %.0f-epoch histories, bit-identical logits "
              "across save/load on %.0f records",
              static_cast<double>(r1.history.size()), static_cast<double>(ds.records.size()))};
}

}  // namespace

int main() {
  struct Step {
    int idx;
    std::string name;
    std::function<Outcome()> fn;
  };

  // The training-dependent criteria share one set of runs.
  std::vector<ModeRun> runs;
  auto ensure_runs = [&]() -> std::vector<ModeRun>& {
    if (runs.empty()) {
      runs.push_back(run_mode("text_dominant", Dominance::text_dominant, false));
      runs.push_back(run_mode("visual_dominant", Dominance::visual_dominant, false));
      runs.push_back(run_mode("shared", Dominance::shared, false));
      runs.push_back(run_mode("mixed", Dominance::mixed, false));
      runs.push_back(run_mode("mixed_ablated", Dominance::mixed, true));
    }
    return runs;
  };

  std::vector<Step> steps = {
      {1, "gradient fidelity", criterion_gradcheck},
      {2, "formula unit suite", criterion_formulas},
      {3, "objective composition and convergence",
       [&] {
         auto& r = ensure_runs();
         return criterion_objective({&r[0], &r[1], &r[2], &r[3]});
       }},
      {4, "gate specialization",
       [&] {
         auto& r = ensure_runs();
         return criterion_specialization(r[0], r[1]);
       }},
      {5, "end-to-end accuracy and ablation",
       [&] {
         auto& r = ensure_runs();
         return criterion_accuracy(r[0], r[3], r[4]);
       }},
      {6, "metrics oracle equivalence", criterion_metrics},
      {7, "split protocol", criterion_splits},
      {8, "determinism and persistence", criterion_determinism},
  };

  for (const Step& step : steps) {
    Outcome outcome;
    try {
      outcome = step.fn();
    } catch (const std::exception& e) {
      outcome = {false, std::string("exception: ") + e.what()};
    }
    print_verdict(step.idx, step.name, outcome);
  }

  std::printf("ACCEPTANCE: %d/8 passed\n", g_passed);
  return g_passed == 8 ? 0 : 1;
}
