#include "dime/trainer.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <exception>
#include <numeric>

#include "dime/config_json.hpp"
#include "dime/kernels.hpp"

namespace dime {

const char* precision_name(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision parse_precision(const std::string& name) {
  if (name == "f32") return Precision::f32;
  if (name == "f64") return Precision::f64;
  throw ValueError("unknown precision '" + name + "' (expected f32 or f64)");
}

void TrainConfig::validate() const {
  if (lr < 0) throw ValueError("train: lr must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1))
    throw ValueError("train: betas must lie in [0, 1)");
  if (!(adam_eps > 0)) throw ValueError("train: adam_eps must be positive");
  if (weight_decay < 0) throw ValueError("train: weight_decay must be >= 0");
  if (batch_size < 1) throw ValueError("train: batch_size must be >= 1");
  if (max_epochs < 1) throw ValueError("train: max_epochs must be >= 1");
  if (patience < 1) throw ValueError("train: patience must be >= 1");
  if (clip_norm < 0) throw ValueError("train: clip_norm must be >= 0 (0 disables)");
}

namespace {

std::string real_str(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

std::string history_to_tsv(const std::vector<EpochStats>& history) {
  std::string out =
      "epoch\tl_t\tl_v\tl_s\tl_ce\tl_total\tdev_macro_f1\tmean_pi_t\tmean_pi_v\tmean_pi_tv\n";
  for (const auto& e : history) {
    out += std::to_string(e.epoch);
    for (double v : {e.l_t, e.l_v, e.l_s, e.l_ce, e.l_total, e.dev_macro_f1, e.mean_pi[0],
                     e.mean_pi[1], e.mean_pi[2]}) {
      out += '\t';
      out += real_str(v);
    }
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint binary format (little-endian throughout):
//   "DIME" | u32 version | u64 fnv1a(config_json) | u8 dtype_bytes |
//   u32 json_len | json | u32 n_groups |
//   per group: u32 name_len | name | u8 rank | i32 dim... | u64 count | values
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'D', 'I', 'M', 'E'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_i32(std::string& out, std::int32_t v) { put_u32(out, static_cast<std::uint32_t>(v)); }

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) const {
    if (pos + n > buf.size())
      throw DataError("checkpoint parse error at offset " + std::to_string(pos) +
                      ": unexpected end of file while reading " + what);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(buf[pos++]);
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

const Checkpoint::Group* Checkpoint::find(const std::string& name) const {
  for (const auto& g : groups)
    if (g.name == name) return &g;
  return nullptr;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, ckpt.version);
  put_u64(out, fnv1a64(ckpt.config_json));
  out.push_back(static_cast<char>(ckpt.dtype_bytes));
  put_u32(out, static_cast<std::uint32_t>(ckpt.config_json.size()));
  out += ckpt.config_json;
  put_u32(out, static_cast<std::uint32_t>(ckpt.groups.size()));
  for (const auto& g : ckpt.groups) {
    put_u32(out, static_cast<std::uint32_t>(g.name.size()));
    out += g.name;
    out.push_back(static_cast<char>(g.shape.size()));
    for (int d : g.shape) put_i32(out, d);
    put_u64(out, g.values.size());
    if (ckpt.dtype_bytes == 4) {
      for (double v : g.values) {
        std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
        put_u32(out, bits);
      }
    } else {
      for (double v : g.values) put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
  }
  write_file_atomic(path, out);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::string buf = read_file(path);
  Reader r{buf};
  std::string magic = r.bytes(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0)
    throw DataError("'" + path + "' is not a checkpoint (bad magic)");
  Checkpoint ckpt;
  ckpt.version = r.u32("version");
  if (ckpt.version != 1)
    throw DataError("unsupported checkpoint version " + std::to_string(ckpt.version) +
                    " (expected 1)");
  std::uint64_t digest = r.u64("config digest");
  ckpt.dtype_bytes = r.u8("dtype");
  if (ckpt.dtype_bytes != 4 && ckpt.dtype_bytes != 8)
    throw DataError("checkpoint parse error: invalid dtype width " +
                    std::to_string(ckpt.dtype_bytes));
  std::uint32_t json_len = r.u32("config length");
  ckpt.config_json = r.bytes(json_len, "config json");
  if (fnv1a64(ckpt.config_json) != digest)
    throw DataError("checkpoint config digest mismatch (corrupt file)");
  std::uint32_t n_groups = r.u32("group count");
  for (std::uint32_t gi = 0; gi < n_groups; ++gi) {
    Checkpoint::Group g;
    std::uint32_t name_len = r.u32("group name length");
    g.name = r.bytes(name_len, "group name");
    std::uint8_t rank = r.u8("group rank");
    if (rank > 2)
      throw DataError("checkpoint parse error at offset " + std::to_string(r.pos) +
                      ": group '" + g.name + "' has rank " + std::to_string(rank));
    for (int d = 0; d < rank; ++d)
      g.shape.push_back(static_cast<int>(r.u32("group dim")));
    std::uint64_t count = r.u64("value count");
    if (count != static_cast<std::uint64_t>(numel(g.shape)))
      throw DataError("checkpoint parse error: group '" + g.name + "' count " +
                      std::to_string(count) + " does not match shape " + shape_str(g.shape));
    g.values.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
      if (ckpt.dtype_bytes == 4) {
        float f = std::bit_cast<float>(r.u32("value"));
        g.values.push_back(static_cast<double>(f));
      } else {
        g.values.push_back(std::bit_cast<double>(r.u64("value")));
      }
    }
    ckpt.groups.push_back(std::move(g));
  }
  if (r.pos != buf.size())
    throw DataError("checkpoint parse error at offset " + std::to_string(r.pos) +
                    ": trailing bytes");
  return ckpt;
}

template <class T>
Checkpoint make_checkpoint(const DimeModel<T>& model, const TrainConfig& cfg, int epoch,
                           double dev_macro_f1, const std::string& rng_state) {
  Checkpoint ckpt;
  ckpt.dtype_bytes = static_cast<int>(sizeof(T));
  ojson j;
  j["model"] = model_config_to_json(model.cfg);
  j["train"] = train_config_to_json(cfg);
  j["epoch"] = epoch;
  j["dev_macro_f1"] = real_str(dev_macro_f1);
  j["rng_state"] = rng_state;
  ckpt.config_json = j.dump();
  auto add_group = [&](const std::string& name, const TensorData<T>& t) {
    Checkpoint::Group g;
    g.name = name;
    g.shape = t.shape;
    g.values.assign(t.data.begin(), t.data.end());
    ckpt.groups.push_back(std::move(g));
  };
  for (const Parameter<T>* p : model.parameters()) add_group(p->name, p->value);
  add_group("frontend.e_r_eval", model.frontend.e_r_eval);
  return ckpt;
}

ModelConfig model_config_of(const Checkpoint& ckpt) {
  ojson j = ojson::parse(ckpt.config_json);
  ModelConfig cfg;
  if (j.contains("model")) model_config_update(cfg, j["model"]);
  return cfg;
}

TrainConfig train_config_of(const Checkpoint& ckpt) {
  ojson j = ojson::parse(ckpt.config_json);
  TrainConfig cfg;
  if (j.contains("train")) train_config_update(cfg, j["train"]);
  return cfg;
}

template <class T>
DimeModel<T> model_from_checkpoint(const Checkpoint& ckpt) {
  DimeModel<T> model = DimeModel<T>::init(model_config_of(ckpt));
  auto restore = [&](const std::string& name, TensorData<T>& dst) {
    const Checkpoint::Group* g = ckpt.find(name);
    if (!g) throw DataError("checkpoint is missing parameter group '" + name + "'");
    if (g->shape != dst.shape)
      throw DataError("checkpoint group '" + name + "' has shape " + shape_str(g->shape) +
                      ", model expects " + shape_str(dst.shape));
    for (std::size_t i = 0; i < g->values.size(); ++i)
      dst.data[i] = static_cast<T>(g->values[i]);
  };
  for (Parameter<T>* p : model.parameters()) restore(p->name, p->value);
  restore("frontend.e_r_eval", model.frontend.e_r_eval);
  return model;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

template <class T>
std::vector<Prediction> predict_all(DimeModel<T>& model, const Dataset& ds) {
  if (ds.records.empty()) throw DataError("evaluate: dataset is empty");
  if (ds.d_text != model.cfg.frontend.d_text_in || ds.d_visual != model.cfg.frontend.d_visual_in)
    throw ShapeError("evaluate: dataset dims (" + std::to_string(ds.d_text) + ", " +
                     std::to_string(ds.d_visual) + ") do not match the model's input dims (" +
                     std::to_string(model.cfg.frontend.d_text_in) + ", " +
                     std::to_string(model.cfg.frontend.d_visual_in) + ")");
  std::vector<Prediction> out(ds.records.size());
  int n = static_cast<int>(ds.records.size());
  int nt = kernels::max_threads();
  // Exceptions must not unwind across the parallel region; stash the first
  // one and rethrow after the join.
  std::exception_ptr error;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(nt) if (nt > 1 && n > 1)
#endif
  for (int i = 0; i < n; ++i) {
    try {
      RecordTrace<T> tr = eval_record(model, ds, ds.records[i]);
      Prediction& p = out[static_cast<std::size_t>(i)];
      p.pred = tr.pred;
      for (std::size_t k = 0; k < tr.probs.data.size() && k < 3; ++k)
        p.probs[k] = static_cast<double>(tr.probs.data[k]);
      p.pi = tr.pi;
    } catch (...) {
#ifdef _OPENMP
#pragma omp critical(dime_predict_all_error)
#endif
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
  return out;
}

template <class T>
EvalReport evaluate(DimeModel<T>& model, const Dataset& ds) {
  std::vector<Prediction> preds = predict_all(model, ds);
  std::vector<std::string> targets;
  std::vector<int> gold, pred;
  std::vector<std::array<double, 3>> pis;
  targets.reserve(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    targets.push_back(ds.records[i].target);
    gold.push_back(ds.records[i].label);
    pred.push_back(preds[i].pred);
    pis.push_back(preds[i].pi);
  }
  return per_target_report(targets, gold, pred, pis);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

template <class T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  std::int64_t t = 0;

  explicit AdamState(const std::vector<Parameter<T>*>& params) {
    for (const Parameter<T>* p : params) {
      m.emplace_back(p->value.data.size(), T(0));
      v.emplace_back(p->value.data.size(), T(0));
    }
  }

  void step(const std::vector<Parameter<T>*>& params, const TrainConfig& cfg) {
    ++t;
    T lr = static_cast<T>(cfg.lr);
    T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    T eps = static_cast<T>(cfg.adam_eps);
    T wd = static_cast<T>(cfg.weight_decay);
    T corr1 = T(1) - static_cast<T>(std::pow(cfg.beta1, static_cast<double>(t)));
    T corr2 = T(1) - static_cast<T>(std::pow(cfg.beta2, static_cast<double>(t)));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      Parameter<T>& p = *params[pi];
      for (std::size_t i = 0; i < p.grad.size(); ++i) {
        T g = p.grad[i] + wd * p.value.data[i];
        m[pi][i] = b1 * m[pi][i] + (T(1) - b1) * g;
        v[pi][i] = b2 * v[pi][i] + (T(1) - b2) * g * g;
        T mhat = m[pi][i] / corr1;
        T vhat = v[pi][i] / corr2;
        p.value.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }
};

// Scales all gradients so the global L2 norm is at most clip_norm.
template <class T>
void clip_global_norm(const std::vector<Parameter<T>*>& params, double clip_norm) {
  if (clip_norm <= 0) return;
  double sq = 0;
  for (const Parameter<T>* p : params)
    for (T g : p->grad) sq += static_cast<double>(g) * static_cast<double>(g);
  double norm = std::sqrt(sq);
  if (norm <= clip_norm) return;
  T factor = static_cast<T>(clip_norm / norm);
  for (Parameter<T>* p : params)
    for (T& g : p->grad) g *= factor;
}

}  // namespace

template <class T>
TrainResult<T> train(DimeModel<T>& model, const Dataset& train_ds, const Dataset& dev_ds,
                     const TrainConfig& cfg) {
  cfg.validate();
  if (train_ds.records.empty()) throw DataError("train: training dataset is empty");
  if (dev_ds.records.empty()) throw DataError("train: dev dataset is empty");
  if (train_ds.d_text != model.cfg.frontend.d_text_in ||
      train_ds.d_visual != model.cfg.frontend.d_visual_in)
    throw ShapeError("train: dataset dims (" + std::to_string(train_ds.d_text) + ", " +
                     std::to_string(train_ds.d_visual) + ") do not match model inputs (" +
                     std::to_string(model.cfg.frontend.d_text_in) + ", " +
                     std::to_string(model.cfg.frontend.d_visual_in) + ")");

  std::vector<Parameter<T>*> params = model.parameters();
  AdamState<T> adam(params);
  Rng rng = Rng::derive(cfg.seed, kTrainStream);

  TrainResult<T> result;
  double best_f1 = -1;
  int epochs_since_best = 0;
  std::size_t n = train_ds.records.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    rng.shuffle(order);
    double sum_t = 0, sum_v = 0, sum_s = 0, sum_ce = 0, sum_total = 0;
    int batch_index = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size, ++batch_index) {
      std::size_t stop = std::min(n, start + cfg.batch_size);
      std::span<const std::size_t> batch(order.data() + start, stop - start);
      Tape<T> tape;
      ParamVars<T> P(tape, model);
      BatchGraph<T> g = build_batch_graph(tape, P, model, train_ds, batch, /*training=*/true, rng);
      double l_total = static_cast<double>(tape.val(g.l_total).data[0]);
      if (!std::isfinite(l_total))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch_index));
      double w = static_cast<double>(batch.size());
      sum_t += static_cast<double>(tape.val(g.l_t).data[0]) * w;
      sum_v += static_cast<double>(tape.val(g.l_v).data[0]) * w;
      sum_s += static_cast<double>(tape.val(g.l_s).data[0]) * w;
      sum_ce += static_cast<double>(tape.val(g.l_ce).data[0]) * w;
      sum_total += l_total * w;
      model.zero_grad();
      tape.backward(g.l_total);
      clip_global_norm(params, cfg.clip_norm);
      adam.step(params, cfg);
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.l_t = sum_t / static_cast<double>(n);
    stats.l_v = sum_v / static_cast<double>(n);
    stats.l_s = sum_s / static_cast<double>(n);
    stats.l_ce = sum_ce / static_cast<double>(n);
    stats.l_total = sum_total / static_cast<double>(n);
    EvalReport dev = evaluate(model, dev_ds);
    stats.dev_macro_f1 = dev.pooled_macro_f1;
    stats.mean_pi = dev.mean_pi;
    result.history.push_back(stats);

    if (stats.dev_macro_f1 > best_f1) {
      best_f1 = stats.dev_macro_f1;
      epochs_since_best = 0;
      result.best_epoch = epoch;
      result.best_dev_f1 = best_f1;
      result.best = make_checkpoint(model, cfg, epoch, best_f1, rng.state());
    } else {
      ++epochs_since_best;
      if (epochs_since_best >= cfg.patience) break;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------

template Checkpoint make_checkpoint<float>(const DimeModel<float>&, const TrainConfig&, int,
                                           double, const std::string&);
template Checkpoint make_checkpoint<double>(const DimeModel<double>&, const TrainConfig&, int,
                                            double, const std::string&);
template DimeModel<float> model_from_checkpoint<float>(const Checkpoint&);
template DimeModel<double> model_from_checkpoint<double>(const Checkpoint&);
template std::vector<Prediction> predict_all<float>(DimeModel<float>&, const Dataset&);
template std::vector<Prediction> predict_all<double>(DimeModel<double>&, const Dataset&);
template EvalReport evaluate<float>(DimeModel<float>&, const Dataset&);
template EvalReport evaluate<double>(DimeModel<double>&, const Dataset&);
template TrainResult<float> train<float>(DimeModel<float>&, const Dataset&, const Dataset&,
                                         const TrainConfig&);
template TrainResult<double> train<double>(DimeModel<double>&, const Dataset&, const Dataset&,
                                           const TrainConfig&);

}  // namespace dime
