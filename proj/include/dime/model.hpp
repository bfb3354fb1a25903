#pragma once

#include <array>
#include <cmath>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dime/data.hpp"
#include "dime/tape.hpp"

namespace dime {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct FrontendConfig {
  int d_text_in = 768;
  int d_visual_in = 512;
  int d_common = 512;
  double eps_norm = 1e-12;
  // Scale of the stochastic visual prompt e_r before normalization. The only
  // supported policy: resample per training forward pass, freeze one
  // seed-derived vector for evaluation.
  double e_r_sigma = 1.0;
};

struct FusionConfig {
  int d_model = 256;
  int n_heads = 4;
  int n_layers = 1;  // 1 or 2
  int d_ffn = 512;
  double dropout_p = 0.1;
  double eps_ln = 1e-5;
};

struct ExpertLossConfig {
  double margin_m = 1.0;
  double eps_cos = 1e-12;
};

struct GatingConfig {
  int d_hidden = 256;
  double tau = 1.0;
};

struct ModelConfig {
  FrontendConfig frontend;
  FusionConfig fusion;  // shared hyperparameters; the three blocks have separate weights
  ExpertLossConfig experts;
  GatingConfig gating;
  // "w/o AE" ablation: drop L_S from the objective and gate over the textual
  // and visual experts with a 2-way softmax over the first two gate logits.
  bool ablate_alignment = false;
  std::uint64_t seed = 0;  // parameter initialization and e_r_eval

  void validate() const {
    const auto& f = frontend;
    if (f.d_text_in < 1 || f.d_visual_in < 1 || f.d_common < 1)
      throw ValueError("model: frontend dims must be positive");
    if (!(f.eps_norm > 0)) throw ValueError("model: eps_norm must be positive");
    if (f.e_r_sigma < 0) throw ValueError("model: e_r_sigma must be >= 0");
    if (fusion.d_model < 1 || fusion.n_heads < 1 || fusion.d_ffn < 1)
      throw ValueError("model: fusion dims must be positive");
    if (fusion.d_model % fusion.n_heads != 0)
      throw ValueError("model: d_model " + std::to_string(fusion.d_model) +
                       " not divisible by n_heads " + std::to_string(fusion.n_heads));
    if (fusion.n_layers < 1 || fusion.n_layers > 2)
      throw ValueError("model: n_layers must be 1 or 2");
    if (!(fusion.dropout_p >= 0 && fusion.dropout_p < 1))
      throw ValueError("model: dropout_p must lie in [0, 1)");
    if (!(fusion.eps_ln > 0)) throw ValueError("model: eps_ln must be positive");
    if (experts.margin_m < 0) throw ValueError("model: margin must be >= 0");
    if (!(experts.eps_cos > 0)) throw ValueError("model: eps_cos must be positive");
    if (gating.d_hidden < 1) throw ValueError("model: d_hidden must be positive");
    if (!(gating.tau > 0)) throw ValueError("model: tau must be positive");
  }
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <class T>
struct FrontendParams {
  Parameter<T> W_text, b_text;
  Parameter<T> W_visual, b_visual;
  Parameter<T> W_prompt, b_prompt;
  TensorData<T> e_r_eval;  // frozen after init, never trained
};

template <class T>
struct FusionLayerParams {
  Parameter<T> ln1_gamma, ln1_beta;
  Parameter<T> Wq, bq, Wk, bk, Wv, bv, Wo, bo;
  Parameter<T> ln2_gamma, ln2_beta;
  Parameter<T> W_ffn1, b_ffn1, W_ffn2, b_ffn2;
};

template <class T>
struct FusionParams {
  Parameter<T> W_in, b_in;
  Parameter<T> type0, type1;  // learned token-type embeddings for the two slots
  std::vector<FusionLayerParams<T>> layers;
};

template <class T>
struct GatingParams {
  Parameter<T> W1, b1;  // d_hidden x (2 d_common)
  Parameter<T> W2, b2;  // 3 x d_hidden
};

template <class T>
struct ClassifierParams {
  Parameter<T> W_c, b_c;  // 3 x d_model
};

template <class T>
class DimeModel {
 public:
  ModelConfig cfg;
  FrontendParams<T> frontend;
  FusionParams<T> fusion_t, fusion_v, fusion_tv;
  GatingParams<T> gating;
  ClassifierParams<T> classifier;

  static DimeModel init(const ModelConfig& cfg);

  // Every trainable parameter in a fixed, documented order (checkpoint and
  // optimizer state both key off this order).
  std::vector<Parameter<T>*> parameters();
  std::vector<const Parameter<T>*> parameters() const;

  void zero_grad() {
    for (Parameter<T>* p : parameters()) p->zero_grad();
  }
};

namespace detail {

template <class T>
TensorData<T> uniform_fan_in(Rng& rng, int rows, int cols) {
  // uniform in +-sqrt(1/fan_in), fan_in = input width
  T bound = static_cast<T>(std::sqrt(1.0 / cols));
  TensorData<T> w(Shape{rows, cols});
  for (auto& v : w.data) v = static_cast<T>((2 * rng.uniform() - 1)) * bound;
  return w;
}

template <class T>
TensorData<T> uniform_vec(Rng& rng, int n, double bound) {
  TensorData<T> w(Shape{n});
  for (auto& v : w.data) v = static_cast<T>((2 * rng.uniform() - 1) * bound);
  return w;
}

template <class T>
TensorData<T> zeros_vec(int n) {
  return TensorData<T>(Shape{n});
}

template <class T>
TensorData<T> ones_vec(int n) {
  TensorData<T> w(Shape{n});
  std::fill(w.data.begin(), w.data.end(), T(1));
  return w;
}

// sigma * standard-normal vector, L2-normalized (zero vector when sigma = 0).
template <class T>
TensorData<T> sampled_prompt(Rng& rng, int n, double sigma, double eps) {
  std::vector<double> g(static_cast<std::size_t>(n));
  for (auto& v : g) v = sigma * rng.normal();
  double norm = l2_norm(std::span<const double>(g));
  double denom = std::max(norm, eps);
  TensorData<T> out(Shape{n});
  for (int i = 0; i < n; ++i) out.data[static_cast<std::size_t>(i)] = static_cast<T>(g[i] / denom);
  return out;
}

template <class T>
FusionParams<T> init_fusion(Rng& rng, const FusionConfig& fc, int d_in, const std::string& prefix) {
  FusionParams<T> p;
  int d = fc.d_model;
  double type_bound = std::sqrt(1.0 / d);  // keeps pre-norm activations O(1)
  p.W_in = {prefix + ".W_in", uniform_fan_in<T>(rng, d, d_in)};
  p.b_in = {prefix + ".b_in", zeros_vec<T>(d)};
  p.type0 = {prefix + ".type0", uniform_vec<T>(rng, d, type_bound)};
  p.type1 = {prefix + ".type1", uniform_vec<T>(rng, d, type_bound)};
  for (int l = 0; l < fc.n_layers; ++l) {
    std::string lp = prefix + ".layer" + std::to_string(l);
    FusionLayerParams<T> lay;
    lay.ln1_gamma = {lp + ".ln1_gamma", ones_vec<T>(d)};
    lay.ln1_beta = {lp + ".ln1_beta", zeros_vec<T>(d)};
    lay.Wq = {lp + ".Wq", uniform_fan_in<T>(rng, d, d)};
    lay.bq = {lp + ".bq", zeros_vec<T>(d)};
    lay.Wk = {lp + ".Wk", uniform_fan_in<T>(rng, d, d)};
    lay.bk = {lp + ".bk", zeros_vec<T>(d)};
    lay.Wv = {lp + ".Wv", uniform_fan_in<T>(rng, d, d)};
    lay.bv = {lp + ".bv", zeros_vec<T>(d)};
    lay.Wo = {lp + ".Wo", uniform_fan_in<T>(rng, d, d)};
    lay.bo = {lp + ".bo", zeros_vec<T>(d)};
    lay.ln2_gamma = {lp + ".ln2_gamma", ones_vec<T>(d)};
    lay.ln2_beta = {lp + ".ln2_beta", zeros_vec<T>(d)};
    lay.W_ffn1 = {lp + ".W_ffn1", uniform_fan_in<T>(rng, fc.d_ffn, d)};
    lay.b_ffn1 = {lp + ".b_ffn1", zeros_vec<T>(fc.d_ffn)};
    lay.W_ffn2 = {lp + ".W_ffn2", uniform_fan_in<T>(rng, d, fc.d_ffn)};
    lay.b_ffn2 = {lp + ".b_ffn2", zeros_vec<T>(d)};
    p.layers.push_back(std::move(lay));
  }
  return p;
}

template <class T>
void collect_fusion(FusionParams<T>& p, std::vector<Parameter<T>*>& out) {
  out.push_back(&p.W_in);
  out.push_back(&p.b_in);
  out.push_back(&p.type0);
  out.push_back(&p.type1);
  for (auto& lay : p.layers) {
    for (Parameter<T>* q :
         {&lay.ln1_gamma, &lay.ln1_beta, &lay.Wq, &lay.bq, &lay.Wk, &lay.bk, &lay.Wv, &lay.bv,
          &lay.Wo, &lay.bo, &lay.ln2_gamma, &lay.ln2_beta, &lay.W_ffn1, &lay.b_ffn1, &lay.W_ffn2,
          &lay.b_ffn2})
      out.push_back(q);
  }
}

}  // namespace detail

template <class T>
DimeModel<T> DimeModel<T>::init(const ModelConfig& cfg) {
  cfg.validate();
  DimeModel<T> m;
  m.cfg = cfg;
  Rng rng = Rng::derive(cfg.seed, kInitStream);
  const auto& f = cfg.frontend;
  m.frontend.W_text = {"frontend.W_text", detail::uniform_fan_in<T>(rng, f.d_common, f.d_text_in)};
  m.frontend.b_text = {"frontend.b_text", detail::zeros_vec<T>(f.d_common)};
  m.frontend.W_visual = {"frontend.W_visual",
                         detail::uniform_fan_in<T>(rng, f.d_common, f.d_visual_in)};
  m.frontend.b_visual = {"frontend.b_visual", detail::zeros_vec<T>(f.d_common)};
  m.frontend.W_prompt = {"frontend.W_prompt",
                         detail::uniform_fan_in<T>(rng, f.d_common, f.d_text_in)};
  m.frontend.b_prompt = {"frontend.b_prompt", detail::zeros_vec<T>(f.d_common)};
  m.frontend.e_r_eval = detail::sampled_prompt<T>(rng, f.d_common, f.e_r_sigma, f.eps_norm);
  m.fusion_t = detail::init_fusion<T>(rng, cfg.fusion, f.d_common, "fusion_t");
  m.fusion_v = detail::init_fusion<T>(rng, cfg.fusion, f.d_common, "fusion_v");
  m.fusion_tv = detail::init_fusion<T>(rng, cfg.fusion, f.d_common, "fusion_tv");
  m.gating.W1 = {"gating.W1", detail::uniform_fan_in<T>(rng, cfg.gating.d_hidden, 2 * f.d_common)};
  m.gating.b1 = {"gating.b1", detail::zeros_vec<T>(cfg.gating.d_hidden)};
  m.gating.W2 = {"gating.W2", detail::uniform_fan_in<T>(rng, 3, cfg.gating.d_hidden)};
  m.gating.b2 = {"gating.b2", detail::zeros_vec<T>(3)};
  m.classifier.W_c = {"classifier.W_c", detail::uniform_fan_in<T>(rng, 3, cfg.fusion.d_model)};
  m.classifier.b_c = {"classifier.b_c", detail::zeros_vec<T>(3)};
  return m;
}

template <class T>
std::vector<Parameter<T>*> DimeModel<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (Parameter<T>* p : {&frontend.W_text, &frontend.b_text, &frontend.W_visual,
                          &frontend.b_visual, &frontend.W_prompt, &frontend.b_prompt})
    out.push_back(p);
  detail::collect_fusion(fusion_t, out);
  detail::collect_fusion(fusion_v, out);
  detail::collect_fusion(fusion_tv, out);
  for (Parameter<T>* p : {&gating.W1, &gating.b1, &gating.W2, &gating.b2, &classifier.W_c,
                          &classifier.b_c})
    out.push_back(p);
  return out;
}

template <class T>
std::vector<const Parameter<T>*> DimeModel<T>::parameters() const {
  auto mut = const_cast<DimeModel<T>*>(this)->parameters();
  return std::vector<const Parameter<T>*>(mut.begin(), mut.end());
}

// ---------------------------------------------------------------------------
// Graph builders
// ---------------------------------------------------------------------------

// Each Parameter gets exactly one tape node per tape; reuse across records in
// a batch makes gradient accumulation automatic.
template <class T>
class ParamVars {
 public:
  ParamVars(Tape<T>& tape, DimeModel<T>& model) : tape_(&tape) {
    for (Parameter<T>* p : model.parameters()) vars_[p] = tape.param(*p);
  }

  Var operator()(Parameter<T>& p) const {
    auto it = vars_.find(&p);
    if (it == vars_.end()) throw ValueError("parameter not bound to this tape: " + p.name);
    return it->second;
  }

 private:
  Tape<T>* tape_;
  std::unordered_map<const Parameter<T>*, Var> vars_;
};

template <class T>
struct ProjectedVars {
  Var e_p, e_t, e_v, e_r;
};

// Linear projection + L2 normalization of each raw embedding into the common
// space, plus the stochastic visual prompt e_r (resampled per training
// forward, frozen e_r_eval otherwise; gradients never flow into e_r).
template <class T>
ProjectedVars<T> project(Tape<T>& tape, const ParamVars<T>& P, const FrontendConfig& cfg,
                         FrontendParams<T>& params, const EmbeddingRecord& rec,
                         const std::vector<float>& prompt, bool training, Rng& rng) {
  if (static_cast<int>(rec.e_text.size()) != cfg.d_text_in)
    throw ShapeError("record '" + rec.id + "': e_text length " +
                     std::to_string(rec.e_text.size()) + " does not match d_text_in " +
                     std::to_string(cfg.d_text_in));
  if (static_cast<int>(rec.e_visual.size()) != cfg.d_visual_in)
    throw ShapeError("record '" + rec.id + "': e_visual length " +
                     std::to_string(rec.e_visual.size()) + " does not match d_visual_in " +
                     std::to_string(cfg.d_visual_in));
  if (static_cast<int>(prompt.size()) != cfg.d_text_in)
    throw ShapeError("record '" + rec.id + "': e_prompt length " + std::to_string(prompt.size()) +
                     " does not match d_text_in " + std::to_string(cfg.d_text_in));
  T eps = static_cast<T>(cfg.eps_norm);
  Var x_t = tape.leaf(TensorData<T>::from(std::span<const float>(rec.e_text)));
  Var x_v = tape.leaf(TensorData<T>::from(std::span<const float>(rec.e_visual)));
  Var x_p = tape.leaf(TensorData<T>::from(std::span<const float>(prompt)));
  ProjectedVars<T> out;
  out.e_t = l2_normalize(tape, add(tape, matvec(tape, P(params.W_text), x_t), P(params.b_text)),
                         eps);
  out.e_v = l2_normalize(
      tape, add(tape, matvec(tape, P(params.W_visual), x_v), P(params.b_visual)), eps);
  out.e_p = l2_normalize(
      tape, add(tape, matvec(tape, P(params.W_prompt), x_p), P(params.b_prompt)), eps);
  out.e_r = tape.leaf(training
                          ? detail::sampled_prompt<T>(rng, cfg.d_common, cfg.e_r_sigma,
                                                      cfg.eps_norm)
                          : params.e_r_eval);
  return out;
}

// Per-layer, per-head attention probabilities captured during fuse().
template <class T>
struct FuseDebug {
  std::vector<std::vector<TensorData<T>>> attn;  // [layer][head] -> 2x2 rows sum to 1
};

// Two-token pre-norm Transformer encoder: tokens proj(a)+type0, proj(b)+type1;
// per layer multi-head self-attention and a GELU FFN, each with a residual;
// mean pooling over the two final tokens.
template <class T>
Var fuse(Tape<T>& tape, const ParamVars<T>& P, const FusionConfig& cfg, FusionParams<T>& params,
         Var a, Var b, bool training, Rng& rng, FuseDebug<T>* dbg = nullptr) {
  T p = static_cast<T>(cfg.dropout_p);
  T eps = static_cast<T>(cfg.eps_ln);
  int dh = cfg.d_model / cfg.n_heads;
  Var t0 = add(tape, add(tape, matvec(tape, P(params.W_in), a), P(params.b_in)), P(params.type0));
  Var t1 = add(tape, add(tape, matvec(tape, P(params.W_in), b), P(params.b_in)), P(params.type1));
  Var x = stack_rows<T>(tape, {t0, t1});
  for (auto& lay : params.layers) {
    if (dbg) dbg->attn.emplace_back();
    Var xn = layer_norm(tape, x, P(lay.ln1_gamma), P(lay.ln1_beta), eps);
    Var q = add_row_bias(tape, matmul_nt(tape, xn, P(lay.Wq)), P(lay.bq));
    Var k = add_row_bias(tape, matmul_nt(tape, xn, P(lay.Wk)), P(lay.bk));
    Var v = add_row_bias(tape, matmul_nt(tape, xn, P(lay.Wv)), P(lay.bv));
    std::vector<Var> heads;
    for (int h = 0; h < cfg.n_heads; ++h) {
      Var qh = slice_cols(tape, q, h * dh, dh);
      Var kh = slice_cols(tape, k, h * dh, dh);
      Var vh = slice_cols(tape, v, h * dh, dh);
      Var scores = scale(tape, matmul_nt(tape, qh, kh), static_cast<T>(1.0 / std::sqrt(dh)));
      Var probs = softmax_with_temperature(tape, scores, T(1));
      if (dbg) dbg->attn.back().push_back(tape.val(probs));
      probs = dropout(tape, probs, p, training, rng);
      heads.push_back(matmul(tape, probs, vh));
    }
    Var ctx = concat_cols(tape, std::span<const Var>(heads));
    Var attn_out = add_row_bias(tape, matmul_nt(tape, ctx, P(lay.Wo)), P(lay.bo));
    x = add(tape, x, attn_out);
    Var x2n = layer_norm(tape, x, P(lay.ln2_gamma), P(lay.ln2_beta), eps);
    Var hid = gelu(tape, add_row_bias(tape, matmul_nt(tape, x2n, P(lay.W_ffn1)), P(lay.b_ffn1)));
    hid = dropout(tape, hid, p, training, rng);
    Var ffn_out = add_row_bias(tape, matmul_nt(tape, hid, P(lay.W_ffn2)), P(lay.b_ffn2));
    x = add(tape, x, ffn_out);
  }
  return mean_rows(tape, x);
}

template <class T>
struct FusedTriple {
  Var E_t, E_v, E_tv;
};

// E_t = Fuse_t(e_p, e_t); E_v = Fuse_v(e_r, e_v); E_tv = Fuse_tv(e_t, e_v) —
// three independent parameter sets over the shared architecture.
template <class T>
FusedTriple<T> compute_fused_triple(Tape<T>& tape, const ParamVars<T>& P, DimeModel<T>& model,
                                    const ProjectedVars<T>& pv, bool training, Rng& rng,
                                    FuseDebug<T>* dbg_t = nullptr, FuseDebug<T>* dbg_v = nullptr,
                                    FuseDebug<T>* dbg_tv = nullptr) {
  FusedTriple<T> out;
  out.E_t = fuse(tape, P, model.cfg.fusion, model.fusion_t, pv.e_p, pv.e_t, training, rng, dbg_t);
  out.E_v = fuse(tape, P, model.cfg.fusion, model.fusion_v, pv.e_r, pv.e_v, training, rng, dbg_v);
  out.E_tv = fuse(tape, P, model.cfg.fusion, model.fusion_tv, pv.e_t, pv.e_v, training, rng,
                  dbg_tv);
  return out;
}

// Triplet hinge: max(0, m + d(E_tv, E_t) - d(E_tv, E_v)). Anchor E_tv,
// positive E_t, negative E_v.
template <class T>
Var loss_textual(Tape<T>& tape, Var E_t, Var E_v, Var E_tv, const ExpertLossConfig& cfg) {
  Var d_pos = euclidean_distance(tape, E_tv, E_t);
  Var d_neg = euclidean_distance(tape, E_tv, E_v);
  return relu(tape, add_const(tape, sub(tape, d_pos, d_neg), static_cast<T>(cfg.margin_m)));
}

// Mirror of loss_textual: positive E_v, negative E_t.
template <class T>
Var loss_visual(Tape<T>& tape, Var E_t, Var E_v, Var E_tv, const ExpertLossConfig& cfg) {
  return loss_textual(tape, E_v, E_t, E_tv, cfg);
}

// Cosine consistency: (1 - cos(E_tv, E_t)) + (1 - cos(E_tv, E_v)), in [0, 4].
template <class T>
Var loss_alignment(Tape<T>& tape, Var E_t, Var E_v, Var E_tv, const ExpertLossConfig& cfg) {
  T eps = static_cast<T>(cfg.eps_cos);
  Var c1 = cosine_similarity(tape, E_tv, E_t, eps);
  Var c2 = cosine_similarity(tape, E_tv, E_v, eps);
  return add_const(tape, scale(tape, add(tape, c1, c2), T(-1)), T(2));
}

// pi = softmax_tau(W2 relu(W1 [e_t; e_v] + b1) + b2), ordered [pi_t, pi_v,
// pi_tv]. In ablated mode the softmax runs over the first two logits only and
// the result has two components.
template <class T>
Var gate(Tape<T>& tape, const ParamVars<T>& P, const GatingConfig& cfg, GatingParams<T>& params,
         Var e_t, Var e_v, bool ablate_alignment = false) {
  Var cat = concat(tape, e_t, e_v);
  Var hidden = relu(tape, add(tape, matvec(tape, P(params.W1), cat), P(params.b1)));
  Var logits = add(tape, matvec(tape, P(params.W2), hidden), P(params.b2));
  if (ablate_alignment) logits = slice(tape, logits, 0, 2);
  return softmax_with_temperature(tape, logits, static_cast<T>(cfg.tau));
}

// h = pi_t h_t + pi_v h_v (+ pi_tv h_tv). Expert heads are the identity, so
// the h_x arguments are the fused triple itself.
template <class T>
Var fuse_experts(Tape<T>& tape, Var pi, Var h_t, Var h_v, Var h_tv = Var{}) {
  std::vector<Var> experts{h_t, h_v};
  if (h_tv.valid()) experts.push_back(h_tv);
  return mix(tape, pi, std::span<const Var>(experts));
}

// logits = W_c h + b_c; probs = softmax(logits) at unit temperature.
template <class T>
std::pair<Var, Var> classify(Tape<T>& tape, const ParamVars<T>& P, ClassifierParams<T>& params,
                             Var h) {
  Var logits = add(tape, matvec(tape, P(params.W_c), h), P(params.b_c));
  Var probs = softmax_with_temperature(tape, logits, T(1));
  return {logits, probs};
}

// ---------------------------------------------------------------------------
// Per-record and per-batch assembly
// ---------------------------------------------------------------------------

template <class T>
struct RecordGraph {
  ProjectedVars<T> proj;
  FusedTriple<T> fused;
  Var pi;  // 3 components, or 2 in ablated mode
  Var h, logits, probs;
  Var l_t, l_v, l_s, l_ce;  // l_s is invalid in ablated mode
};

template <class T>
RecordGraph<T> build_record_graph(Tape<T>& tape, const ParamVars<T>& P, DimeModel<T>& model,
                                  const EmbeddingRecord& rec, const std::vector<float>& prompt,
                                  bool training, Rng& rng) {
  const ModelConfig& cfg = model.cfg;
  RecordGraph<T> g;
  g.proj = project(tape, P, cfg.frontend, model.frontend, rec, prompt, training, rng);
  g.fused = compute_fused_triple(tape, P, model, g.proj, training, rng);
  g.l_t = loss_textual(tape, g.fused.E_t, g.fused.E_v, g.fused.E_tv, cfg.experts);
  g.l_v = loss_visual(tape, g.fused.E_t, g.fused.E_v, g.fused.E_tv, cfg.experts);
  if (!cfg.ablate_alignment)
    g.l_s = loss_alignment(tape, g.fused.E_t, g.fused.E_v, g.fused.E_tv, cfg.experts);
  g.pi = gate(tape, P, cfg.gating, model.gating, g.proj.e_t, g.proj.e_v, cfg.ablate_alignment);
  g.h = cfg.ablate_alignment
            ? fuse_experts(tape, g.pi, g.fused.E_t, g.fused.E_v)
            : fuse_experts(tape, g.pi, g.fused.E_t, g.fused.E_v, g.fused.E_tv);
  auto [logits, probs] = classify(tape, P, model.classifier, g.h);
  g.logits = logits;
  g.probs = probs;
  int label[1] = {rec.label};
  g.l_ce = cross_entropy_loss(tape, g.logits, label);
  return g;
}

template <class T>
struct BatchGraph {
  std::vector<RecordGraph<T>> records;
  Var l_t, l_v, l_s, l_ce, l_total;  // batch means; l_s is a constant 0 when ablated
};

template <class T>
BatchGraph<T> build_batch_graph(Tape<T>& tape, const ParamVars<T>& P, DimeModel<T>& model,
                                const Dataset& ds, std::span<const std::size_t> indices,
                                bool training, Rng& rng) {
  if (indices.empty()) throw ValueError("batch: no records");
  BatchGraph<T> g;
  std::vector<Var> lts, lvs, lss, lces;
  for (std::size_t i : indices) {
    const EmbeddingRecord& rec = ds.records[i];
    RecordGraph<T> rg = build_record_graph(tape, P, model, rec, ds.prompt_for(rec), training, rng);
    lts.push_back(rg.l_t);
    lvs.push_back(rg.l_v);
    if (!model.cfg.ablate_alignment) lss.push_back(rg.l_s);
    lces.push_back(rg.l_ce);
    g.records.push_back(std::move(rg));
  }
  g.l_t = mean_scalars(tape, std::span<const Var>(lts));
  g.l_v = mean_scalars(tape, std::span<const Var>(lvs));
  g.l_s = model.cfg.ablate_alignment ? tape.scalar(T(0))
                                     : mean_scalars(tape, std::span<const Var>(lss));
  g.l_ce = mean_scalars(tape, std::span<const Var>(lces));
  g.l_total = add(tape, add(tape, g.l_t, g.l_v), add(tape, g.l_s, g.l_ce));
  return g;
}

// ---------------------------------------------------------------------------
// Value-level traces (no grads) for tests, reports, and prediction
// ---------------------------------------------------------------------------

template <class T>
struct RecordTrace {
  TensorData<T> e_p, e_t, e_v, e_r;
  TensorData<T> E_t, E_v, E_tv;
  std::array<double, 3> pi{};  // ablated mode stores [pi_t, pi_v, 0]
  TensorData<T> h, logits, probs;
  double l_t = 0, l_v = 0, l_s = 0, l_ce = 0, l_total = 0;
  int pred = 0;
};

template <class T>
RecordTrace<T> extract_record_trace(const Tape<T>& tape, const RecordGraph<T>& g) {
  RecordTrace<T> tr;
  tr.e_p = tape.val(g.proj.e_p);
  tr.e_t = tape.val(g.proj.e_t);
  tr.e_v = tape.val(g.proj.e_v);
  tr.e_r = tape.val(g.proj.e_r);
  tr.E_t = tape.val(g.fused.E_t);
  tr.E_v = tape.val(g.fused.E_v);
  tr.E_tv = tape.val(g.fused.E_tv);
  const auto& pi = tape.val(g.pi);
  for (std::size_t k = 0; k < pi.data.size(); ++k) tr.pi[k] = static_cast<double>(pi.data[k]);
  tr.h = tape.val(g.h);
  tr.logits = tape.val(g.logits);
  tr.probs = tape.val(g.probs);
  tr.l_t = static_cast<double>(tape.val(g.l_t).data[0]);
  tr.l_v = static_cast<double>(tape.val(g.l_v).data[0]);
  tr.l_s = g.l_s.valid() ? static_cast<double>(tape.val(g.l_s).data[0]) : 0.0;
  tr.l_ce = static_cast<double>(tape.val(g.l_ce).data[0]);
  tr.l_total = tr.l_t + tr.l_v + tr.l_s + tr.l_ce;
  tr.pred = argmax(std::span<const T>(tr.logits.data));
  return tr;
}

// Deterministic eval-mode forward for one record on a private tape.
template <class T>
RecordTrace<T> eval_record(DimeModel<T>& model, const Dataset& ds, const EmbeddingRecord& rec) {
  Tape<T> tape;
  ParamVars<T> P(tape, model);
  Rng unused(0);  // eval consumes no randomness
  RecordGraph<T> g =
      build_record_graph(tape, P, model, rec, ds.prompt_for(rec), /*training=*/false, unused);
  return extract_record_trace(tape, g);
}

}  // namespace dime
