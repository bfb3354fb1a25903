// dime: disentangled multi-expert multi-modal stance detection over
// precomputed embedding files. Subcommands: gen-synth, train, eval,
// gradcheck, predict.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dime/config_json.hpp"
#include "dime/data.hpp"
#include "dime/gradcheck.hpp"
#include "dime/kernels.hpp"
#include "dime/model.hpp"
#include "dime/trainer.hpp"

namespace {

using namespace dime;

std::string default_out_dir() {
  const char* env = std::getenv("DIME_OUT_DIR");
  return env && *env ? std::string(env) : std::string(".");
}

ojson load_config_file(const std::string& path) {
  if (path.empty()) return ojson::object();
  try {
    return ojson::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ValueError("config file '" + path + "': " + std::string(e.what()));
  }
}

std::vector<std::string> parse_list(const std::string& csv) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : csv) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

void parse_ratios(const std::string& csv, SplitSpec& spec) {
  std::vector<std::string> parts = parse_list(csv);
  if (parts.size() != 3)
    throw ValueError("--ratios expects three comma-separated numbers, got '" + csv + "'");
  try {
    spec.train_ratio = std::stod(parts[0]);
    spec.dev_ratio = std::stod(parts[1]);
    spec.test_ratio = std::stod(parts[2]);
  } catch (const std::exception&) {
    throw ValueError("--ratios: cannot parse '" + csv + "'");
  }
}

void echo_run_config(const std::string& out_dir, const ojson& j) {
  write_file_atomic(out_dir + "/run_config.json", j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// gen-synth
// ---------------------------------------------------------------------------

struct GenSynthArgs {
  std::string out, config, out_dir;
  std::string mode = "text_dominant";
  std::string targets = "A,B";
  int n = 100;
  int d_text = 64, d_visual = 64;
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;
};

int run_gen_synth(const GenSynthArgs& a) {
  SyntheticConfig cfg;
  synth_config_update(cfg, load_config_file(a.config).value("synth", ojson::object()));
  cfg.dominance = parse_dominance(a.mode);
  cfg.targets = parse_list(a.targets);
  cfg.n_per_class_per_target = a.n;
  cfg.d_text = a.d_text;
  cfg.d_visual = a.d_visual;
  cfg.noise_sigma = a.noise_sigma;
  cfg.seed = a.seed;

  Dataset ds = generate_synthetic(cfg);
  save_dataset(ds, a.out);
  std::cout << "wrote " << ds.records.size() << " records (" << cfg.targets.size()
            << " targets x 3 classes x " << cfg.n_per_class_per_target << ") to " << a.out
            << "\n";

  ojson echo;
  echo["command"] = "gen-synth";
  echo["synth"] = synth_config_to_json(cfg);
  echo["paths"] = {{"out", a.out}};
  std::string dir = a.out_dir.empty()
                        ? std::filesystem::path(a.out).parent_path().string()
                        : a.out_dir;
  echo_run_config(dir.empty() ? "." : dir, echo);
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string data, config;
  std::string out_dir = default_out_dir();
  std::string split_mode = "in-target";
  std::optional<std::string> ratios, hold_out;
  std::optional<std::uint64_t> split_seed;
  std::uint64_t seed = 0;
  // model overrides
  std::optional<int> d_common, d_model, heads, layers, d_ffn, d_hidden;
  std::optional<double> dropout, margin, tau, e_r_sigma;
  bool ablate_alignment = false;
  // train overrides
  std::optional<double> lr, clip_norm, weight_decay;
  std::optional<int> batch_size, max_epochs, patience;
  std::optional<std::string> precision;
  int threads = 0;
};

void apply_model_flags(ModelConfig& mc, const TrainArgs& a) {
  if (a.d_common) mc.frontend.d_common = *a.d_common;
  if (a.e_r_sigma) mc.frontend.e_r_sigma = *a.e_r_sigma;
  if (a.d_model) mc.fusion.d_model = *a.d_model;
  if (a.heads) mc.fusion.n_heads = *a.heads;
  if (a.layers) mc.fusion.n_layers = *a.layers;
  if (a.d_ffn) mc.fusion.d_ffn = *a.d_ffn;
  if (a.dropout) mc.fusion.dropout_p = *a.dropout;
  if (a.margin) mc.experts.margin_m = *a.margin;
  if (a.tau) mc.gating.tau = *a.tau;
  if (a.d_hidden) mc.gating.d_hidden = *a.d_hidden;
  if (a.ablate_alignment) mc.ablate_alignment = true;
}

template <class T>
int run_train_typed(const TrainArgs& a, ModelConfig mc, TrainConfig tc, SplitSpec spec,
                    const Dataset& ds) {
  Splits splits = split_dataset(ds, spec);
  DimeModel<T> model = DimeModel<T>::init(mc);
  TrainResult<T> result = train(model, splits.train, splits.dev, tc);

  std::string ckpt_path = a.out_dir + "/checkpoint.dime";
  save_checkpoint(result.best, ckpt_path);
  write_file_atomic(a.out_dir + "/history.tsv", history_to_tsv(result.history));

  DimeModel<T> best = model_from_checkpoint<T>(result.best);
  EvalReport dev_report = evaluate(best, splits.dev);
  EvalReport test_report = evaluate(best, splits.test);
  write_file_atomic(a.out_dir + "/dev_report.txt", report_to_text(dev_report));
  write_file_atomic(a.out_dir + "/dev_report.jsonl", report_to_jsonl(dev_report));
  write_file_atomic(a.out_dir + "/test_report.txt", report_to_text(test_report));
  write_file_atomic(a.out_dir + "/test_report.jsonl", report_to_jsonl(test_report));

  std::cout << "train " << splits.train.records.size() << " / dev " << splits.dev.records.size()
            << " / test " << splits.test.records.size() << " records\n";
  std::cout << "best epoch " << result.best_epoch << " (dev macro-F1 "
            << result.best_dev_f1 << "), " << result.history.size() << " epochs run\n";
  std::cout << "checkpoint: " << ckpt_path << "\n\ntest set:\n" << report_to_text(test_report);
  return 0;
}

int run_train(const TrainArgs& a) {
  ojson file = load_config_file(a.config);
  ModelConfig mc;
  TrainConfig tc;
  SplitSpec spec;
  model_config_update(mc, file.value("model", ojson::object()));
  train_config_update(tc, file.value("train", ojson::object()));
  split_spec_update(spec, file.value("split", ojson::object()));

  apply_model_flags(mc, a);
  if (a.lr) tc.lr = *a.lr;
  if (a.batch_size) tc.batch_size = *a.batch_size;
  if (a.max_epochs) tc.max_epochs = *a.max_epochs;
  if (a.patience) tc.patience = *a.patience;
  if (a.clip_norm) tc.clip_norm = *a.clip_norm;
  if (a.weight_decay) tc.weight_decay = *a.weight_decay;
  if (a.precision) tc.precision = parse_precision(*a.precision);
  mc.seed = a.seed;
  tc.seed = a.seed;
  spec.seed = a.split_seed ? *a.split_seed : a.seed;

  if (a.split_mode == "in-target" || a.split_mode == "in_target")
    spec.mode = SplitMode::in_target;
  else if (a.split_mode == "zero-shot" || a.split_mode == "zero_shot")
    spec.mode = SplitMode::zero_shot;
  else
    throw ValueError("--split must be in-target or zero-shot, got '" + a.split_mode + "'");
  if (a.ratios) parse_ratios(*a.ratios, spec);
  if (a.hold_out) spec.held_out_targets = parse_list(*a.hold_out);

  kernels::set_max_threads(a.threads);
  Dataset ds = load_dataset(a.data);
  mc.frontend.d_text_in = ds.d_text;
  mc.frontend.d_visual_in = ds.d_visual;
  mc.validate();
  tc.validate();

  ojson echo;
  echo["command"] = "train";
  echo["model"] = model_config_to_json(mc);
  echo["train"] = train_config_to_json(tc);
  echo["split"] = split_spec_to_json(spec);
  echo["paths"] = {{"data", a.data}, {"out_dir", a.out_dir}};
  echo_run_config(a.out_dir, echo);

  return tc.precision == Precision::f32 ? run_train_typed<float>(a, mc, tc, spec, ds)
                                        : run_train_typed<double>(a, mc, tc, spec, ds);
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, data, config;
  std::string out_dir = default_out_dir();
  std::optional<std::string> split_mode, ratios, hold_out;
  std::optional<std::uint64_t> split_seed;
  int threads = 0;
};

template <class T>
int run_eval_typed(const EvalArgs& a, const Checkpoint& ckpt, const Dataset& ds) {
  DimeModel<T> model = model_from_checkpoint<T>(ckpt);
  if (ds.d_text != model.cfg.frontend.d_text_in || ds.d_visual != model.cfg.frontend.d_visual_in)
    throw ShapeError("checkpoint expects input dims (" +
                     std::to_string(model.cfg.frontend.d_text_in) + ", " +
                     std::to_string(model.cfg.frontend.d_visual_in) + ") but dataset has (" +
                     std::to_string(ds.d_text) + ", " + std::to_string(ds.d_visual) + ")");
  EvalReport report = evaluate(model, ds);
  write_file_atomic(a.out_dir + "/eval_report.txt", report_to_text(report));
  write_file_atomic(a.out_dir + "/eval_report.jsonl", report_to_jsonl(report));
  std::cout << report_to_text(report);
  return 0;
}

int run_eval(const EvalArgs& a) {
  kernels::set_max_threads(a.threads);
  Checkpoint ckpt = load_checkpoint(a.checkpoint);
  Dataset ds = load_dataset(a.data);

  SplitSpec spec;
  split_spec_update(spec, load_config_file(a.config).value("split", ojson::object()));
  bool use_split = a.split_mode.has_value();
  if (use_split) {
    if (*a.split_mode == "in-target" || *a.split_mode == "in_target")
      spec.mode = SplitMode::in_target;
    else if (*a.split_mode == "zero-shot" || *a.split_mode == "zero_shot")
      spec.mode = SplitMode::zero_shot;
    else
      throw ValueError("--split must be in-target or zero-shot, got '" + *a.split_mode + "'");
  } else if (a.hold_out) {
    spec.mode = SplitMode::zero_shot;  // --hold-out alone implies zero-shot
    use_split = true;
  }
  if (a.ratios) parse_ratios(*a.ratios, spec);
  if (a.hold_out) spec.held_out_targets = parse_list(*a.hold_out);
  if (a.split_seed) spec.seed = *a.split_seed;

  Dataset eval_ds = use_split ? split_dataset(ds, spec).test : ds;

  ojson echo;
  echo["command"] = "eval";
  echo["split"] = use_split ? split_spec_to_json(spec) : ojson(nullptr);
  echo["paths"] = {{"checkpoint", a.checkpoint}, {"data", a.data}, {"out_dir", a.out_dir}};
  echo_run_config(a.out_dir, echo);

  TrainConfig tc = train_config_of(ckpt);
  return tc.precision == Precision::f32 ? run_eval_typed<float>(a, ckpt, eval_ds)
                                        : run_eval_typed<double>(a, ckpt, eval_ds);
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

struct GradcheckArgs {
  double tol = 1e-4;
  std::uint64_t seed = 7;
  int d_text = 6, d_visual = 5, d_common = 8;
  int d_model = 8, heads = 2, layers = 1, d_ffn = 12, d_hidden = 8;
  int batch = 2;
  int max_per_param = 0;
  std::string out_dir;  // optional echo
};

int run_gradcheck(const GradcheckArgs& a) {
  ModelConfig mc;
  mc.frontend.d_text_in = a.d_text;
  mc.frontend.d_visual_in = a.d_visual;
  mc.frontend.d_common = a.d_common;
  mc.fusion.d_model = a.d_model;
  mc.fusion.n_heads = a.heads;
  mc.fusion.n_layers = a.layers;
  mc.fusion.d_ffn = a.d_ffn;
  mc.gating.d_hidden = a.d_hidden;
  mc.seed = a.seed;
  mc.validate();

  // Small random batch; finite differences run against the deterministic
  // eval-mode forward (dropout identity, frozen prompt).
  Rng rng = Rng::derive(a.seed, kDataStream);
  Dataset ds;
  ds.d_text = a.d_text;
  ds.d_visual = a.d_visual;
  auto unit_vec = [&](int n) {
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = rng.normal();
    double norm = l2_norm(std::span<const double>(v));
    std::vector<float> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] / norm);
    return out;
  };
  ds.default_prompt_embedding = unit_vec(a.d_text);
  for (int r = 0; r < a.batch; ++r) {
    EmbeddingRecord rec;
    rec.id = "probe" + std::to_string(r);
    rec.target = "probe";
    rec.label = r % 3;
    rec.e_text = unit_vec(a.d_text);
    rec.e_visual = unit_vec(a.d_visual);
    ds.records.push_back(std::move(rec));
  }
  std::vector<std::size_t> indices(ds.records.size());
  std::iota(indices.begin(), indices.end(), std::size_t{0});

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
  GradCheckOptions opt;
  opt.tolerance = a.tol;
  opt.max_per_param = a.max_per_param;
  std::vector<Parameter<double>*> params = model.parameters();
  GradCheckReport report = check_gradients(
      params, [&] { return forward(false); }, [&] { forward(true); }, opt);
  std::cout << to_text(report, a.tol);
  if (!a.out_dir.empty()) {
    ojson echo;
    echo["command"] = "gradcheck";
    echo["model"] = model_config_to_json(mc);
    echo["tol"] = a.tol;
    echo["batch"] = a.batch;
    echo_run_config(a.out_dir, echo);
  }
  return report.pass ? 0 : 3;
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

struct PredictArgs {
  std::string checkpoint, data, id;
};

template <class T>
int run_predict_typed(const PredictArgs& a, const Checkpoint& ckpt, const Dataset& ds,
                      const EmbeddingRecord& rec) {
  DimeModel<T> model = model_from_checkpoint<T>(ckpt);
  RecordTrace<T> tr = eval_record(model, ds, rec);
  std::cout << "id: " << rec.id << "\n";
  std::cout << "target: " << rec.target << "\n";
  std::cout << "gold: " << kLabelNames[rec.label] << "\n";
  std::cout << "pred: " << kLabelNames[tr.pred] << "\n";
  char buf[160];
  std::snprintf(buf, sizeof buf, "probs: Favor=%.4f Against=%.4f Neutral=%.4f\n",
                static_cast<double>(tr.probs.data[0]), static_cast<double>(tr.probs.data[1]),
                static_cast<double>(tr.probs.data[2]));
  std::cout << buf;
  std::snprintf(buf, sizeof buf, "pi: pi_t=%.4f pi_v=%.4f pi_tv=%.4f\n", tr.pi[0], tr.pi[1],
                tr.pi[2]);
  std::cout << buf;
  return 0;
}

int run_predict(const PredictArgs& a) {
  Checkpoint ckpt = load_checkpoint(a.checkpoint);
  Dataset ds = load_dataset(a.data);
  if (ds.records.empty()) throw DataError("dataset '" + a.data + "' has no records");
  const EmbeddingRecord* rec = nullptr;
  if (a.id.empty()) {
    rec = &ds.records.front();
  } else {
    for (const auto& r : ds.records)
      if (r.id == a.id) rec = &r;
    if (!rec) throw DataError("record id '" + a.id + "' not found in " + a.data);
  }
  TrainConfig tc = train_config_of(ckpt);
  return tc.precision == Precision::f32 ? run_predict_typed<float>(a, ckpt, ds, *rec)
                                        : run_predict_typed<double>(a, ckpt, ds, *rec);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "dime: disentangled multi-expert multi-modal stance detection over precomputed "
      "embeddings"};
  app.require_subcommand(1);

  GenSynthArgs gs;
  CLI::App* gen = app.add_subcommand("gen-synth", "generate a synthetic embedding dataset");
  gen->add_option("--out", gs.out, "output dataset path")->required();
  gen->add_option("--mode", gs.mode, "text_dominant|visual_dominant|shared|mixed");
  gen->add_option("--targets", gs.targets, "comma-separated target names");
  gen->add_option("--n", gs.n, "records per class per target")
      ->check(CLI::PositiveNumber);
  gen->add_option("--d-text", gs.d_text, "text embedding dim")->check(CLI::PositiveNumber);
  gen->add_option("--d-visual", gs.d_visual, "visual embedding dim")->check(CLI::PositiveNumber);
  gen->add_option("--noise-sigma", gs.noise_sigma, "gaussian noise scale");
  gen->add_option("--seed", gs.seed, "generation seed");
  gen->add_option("--config", gs.config, "JSON config file (synth section)");
  gen->add_option("--out-dir", gs.out_dir, "directory for the run_config echo");

  TrainArgs ta;
  CLI::App* tr = app.add_subcommand("train", "split, train, and write checkpoint + reports");
  tr->add_option("--data", ta.data, "dataset path")->required();
  tr->add_option("--out-dir", ta.out_dir, "output directory (env DIME_OUT_DIR)");
  tr->add_option("--config", ta.config, "JSON config file; flags override it");
  tr->add_option("--split", ta.split_mode, "in-target|zero-shot");
  tr->add_option("--ratios", ta.ratios, "train,dev,test ratios (default 0.7,0.1,0.2)");
  tr->add_option("--hold-out", ta.hold_out, "held-out targets for zero-shot");
  tr->add_option("--split-seed", ta.split_seed, "split seed (default --seed)");
  tr->add_option("--seed", ta.seed, "master seed (init, training, split)");
  tr->add_option("--d-common", ta.d_common, "common projection dim");
  tr->add_option("--d-model", ta.d_model, "fusion dim");
  tr->add_option("--heads", ta.heads, "attention heads");
  tr->add_option("--layers", ta.layers, "fusion layers (1 or 2)");
  tr->add_option("--d-ffn", ta.d_ffn, "fusion FFN dim");
  tr->add_option("--d-hidden", ta.d_hidden, "gating hidden dim");
  tr->add_option("--dropout", ta.dropout, "dropout probability");
  tr->add_option("--margin", ta.margin, "triplet margin");
  tr->add_option("--tau", ta.tau, "gate softmax temperature");
  tr->add_option("--e-r-sigma", ta.e_r_sigma, "stochastic prompt scale");
  tr->add_flag("--ablate-alignment", ta.ablate_alignment, "drop L_S and gate over two experts");
  tr->add_option("--lr", ta.lr, "Adam learning rate");
  tr->add_option("--batch-size", ta.batch_size, "minibatch size");
  tr->add_option("--max-epochs", ta.max_epochs, "epoch cap");
  tr->add_option("--patience", ta.patience, "early-stop patience (dev macro-F1)");
  tr->add_option("--clip-norm", ta.clip_norm, "global grad-norm clip (0 disables)");
  tr->add_option("--weight-decay", ta.weight_decay, "Adam weight decay");
  tr->add_option("--precision", ta.precision, "f32|f64");
  tr->add_option("--threads", ta.threads, "max kernel threads (0 = auto)");

  EvalArgs ea;
  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  ev->add_option("--checkpoint", ea.checkpoint, "checkpoint path")->required();
  ev->add_option("--data", ea.data, "dataset path")->required();
  ev->add_option("--out-dir", ea.out_dir, "output directory (env DIME_OUT_DIR)");
  ev->add_option("--config", ea.config, "JSON config file (split section)");
  ev->add_option("--split", ea.split_mode, "evaluate the test split: in-target|zero-shot");
  ev->add_option("--ratios", ea.ratios, "train,dev,test ratios");
  ev->add_option("--hold-out", ea.hold_out, "held-out targets (implies zero-shot)");
  ev->add_option("--split-seed", ea.split_seed, "split seed");
  ev->add_option("--threads", ea.threads, "max kernel threads (0 = auto)");

  GradcheckArgs ga;
  CLI::App* gc = app.add_subcommand("gradcheck",
                                    "finite-difference gradient verification (64-bit)");
  gc->add_option("--tol", ga.tol, "max allowed relative error");
  gc->add_option("--seed", ga.seed, "model + probe seed");
  gc->add_option("--d-text", ga.d_text, "probe text dim");
  gc->add_option("--d-visual", ga.d_visual, "probe visual dim");
  gc->add_option("--d-common", ga.d_common, "common projection dim");
  gc->add_option("--d-model", ga.d_model, "fusion dim");
  gc->add_option("--heads", ga.heads, "attention heads");
  gc->add_option("--layers", ga.layers, "fusion layers");
  gc->add_option("--d-ffn", ga.d_ffn, "fusion FFN dim");
  gc->add_option("--d-hidden", ga.d_hidden, "gating hidden dim");
  gc->add_option("--batch", ga.batch, "probe batch size")->check(CLI::PositiveNumber);
  gc->add_option("--max-per-param", ga.max_per_param, "coords per parameter (0 = all)");
  gc->add_option("--out-dir", ga.out_dir, "optional run_config echo directory");

  PredictArgs pa;
  CLI::App* pr = app.add_subcommand("predict", "single-record stance + gate weights");
  pr->add_option("--checkpoint", pa.checkpoint, "checkpoint path")->required();
  pr->add_option("--data", pa.data, "dataset path")->required();
  pr->add_option("--id", pa.id, "record id (default: first record)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return run_gen_synth(gs);
    if (tr->parsed()) return run_train(ta);
    if (ev->parsed()) return run_eval(ea);
    if (gc->parsed()) return run_gradcheck(ga);
    if (pr->parsed()) return run_predict(pa);
  } catch (const ValueError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {  // ShapeError, DataError, IoError
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 3;
  }
  return 1;
}
