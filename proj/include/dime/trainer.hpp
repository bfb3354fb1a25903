#pragma once

#include <array>
#include <string>
#include <vector>

#include "dime/metrics.hpp"
#include "dime/model.hpp"

namespace dime {

enum class Precision { f32, f64 };

const char* precision_name(Precision p);
Precision parse_precision(const std::string& name);  // throws ValueError

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  int batch_size = 32;
  int max_epochs = 15;
  int patience = 5;        // epochs without dev macro-F1 improvement before stopping
  double clip_norm = 5.0;  // global-norm gradient clip; 0 disables
  std::uint64_t seed = 0;
  Precision precision = Precision::f32;

  void validate() const;
};

struct EpochStats {
  int epoch = 0;  // 1-based
  // Record-weighted means of the training-mode losses over the epoch, so the
  // values are independent of how records fall into batches.
  double l_t = 0, l_v = 0, l_s = 0, l_ce = 0, l_total = 0;
  double dev_macro_f1 = 0;
  std::array<double, 3> mean_pi{};  // mean gate weights on the dev set (eval mode)
};

std::string history_to_tsv(const std::vector<EpochStats>& history);

// Versioned container for everything needed to restore a model exactly:
// config blob (model + train config, epoch, dev F1, rng state, precision)
// plus every parameter group, including the frozen e_r_eval vector.
struct Checkpoint {
  std::uint32_t version = 1;
  int dtype_bytes = 4;  // 4 = f32, 8 = f64 payload values
  std::string config_json;

  struct Group {
    std::string name;
    Shape shape;
    std::vector<double> values;  // exact for both payload widths
  };
  std::vector<Group> groups;

  const Group* find(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

template <class T>
Checkpoint make_checkpoint(const DimeModel<T>& model, const TrainConfig& cfg, int epoch,
                           double dev_macro_f1, const std::string& rng_state);

ModelConfig model_config_of(const Checkpoint& ckpt);
TrainConfig train_config_of(const Checkpoint& ckpt);

// Rebuilds the model from the embedded config and overwrites every parameter
// (and e_r_eval) with the stored values. Shape or missing-group problems are
// data errors naming the group.
template <class T>
DimeModel<T> model_from_checkpoint(const Checkpoint& ckpt);

struct Prediction {
  int pred = 0;
  std::array<double, 3> probs{};
  std::array<double, 3> pi{};  // ablated models report [pi_t, pi_v, 0]
};

// Deterministic eval-mode forward over every record; fans out across worker
// threads (read-only parameters), results merged in record order.
template <class T>
std::vector<Prediction> predict_all(DimeModel<T>& model, const Dataset& ds);

template <class T>
EvalReport evaluate(DimeModel<T>& model, const Dataset& ds);

template <class T>
struct TrainResult {
  Checkpoint best;  // checkpoint at the best dev macro-F1 epoch (ties: earliest)
  std::vector<EpochStats> history;
  int best_epoch = 0;
  double best_dev_f1 = 0;
};

// Adam over L_total = L_T + L_V + L_S + L_CE with per-epoch shuffling, dev
// evaluation, early stopping, and best-checkpoint tracking. Deterministic
// given (seed, data, config) — kernels are bitwise thread-count independent
// and the evaluation fan-out merges by record order.
template <class T>
TrainResult<T> train(DimeModel<T>& model, const Dataset& train_ds, const Dataset& dev_ds,
                     const TrainConfig& cfg);

}  // namespace dime
