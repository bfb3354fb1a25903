#pragma once

#include <string>

#include "json.hpp"

#include "dime/data.hpp"
#include "dime/model.hpp"
#include "dime/trainer.hpp"

namespace dime {

// JSON round-trips for every config block. Parsing accepts partial objects:
// absent keys keep the caller-supplied defaults, so a config file and flag
// overrides compose naturally.

using ojson = nlohmann::ordered_json;

inline ojson model_config_to_json(const ModelConfig& c) {
  ojson j;
  j["frontend"] = {{"d_text_in", c.frontend.d_text_in},
                   {"d_visual_in", c.frontend.d_visual_in},
                   {"d_common", c.frontend.d_common},
                   {"eps_norm", c.frontend.eps_norm},
                   {"e_r_sigma", c.frontend.e_r_sigma}};
  j["fusion"] = {{"d_model", c.fusion.d_model},   {"n_heads", c.fusion.n_heads},
                 {"n_layers", c.fusion.n_layers}, {"d_ffn", c.fusion.d_ffn},
                 {"dropout_p", c.fusion.dropout_p}, {"eps_ln", c.fusion.eps_ln}};
  j["experts"] = {{"margin_m", c.experts.margin_m}, {"eps_cos", c.experts.eps_cos}};
  j["gating"] = {{"d_hidden", c.gating.d_hidden}, {"tau", c.gating.tau}};
  j["ablate_alignment"] = c.ablate_alignment;
  j["seed"] = c.seed;
  return j;
}

inline void model_config_update(ModelConfig& c, const ojson& j) {
  if (j.contains("frontend")) {
    const auto& f = j["frontend"];
    c.frontend.d_text_in = f.value("d_text_in", c.frontend.d_text_in);
    c.frontend.d_visual_in = f.value("d_visual_in", c.frontend.d_visual_in);
    c.frontend.d_common = f.value("d_common", c.frontend.d_common);
    c.frontend.eps_norm = f.value("eps_norm", c.frontend.eps_norm);
    c.frontend.e_r_sigma = f.value("e_r_sigma", c.frontend.e_r_sigma);
  }
  if (j.contains("fusion")) {
    const auto& f = j["fusion"];
    c.fusion.d_model = f.value("d_model", c.fusion.d_model);
    c.fusion.n_heads = f.value("n_heads", c.fusion.n_heads);
    c.fusion.n_layers = f.value("n_layers", c.fusion.n_layers);
    c.fusion.d_ffn = f.value("d_ffn", c.fusion.d_ffn);
    c.fusion.dropout_p = f.value("dropout_p", c.fusion.dropout_p);
    c.fusion.eps_ln = f.value("eps_ln", c.fusion.eps_ln);
  }
  if (j.contains("experts")) {
    const auto& f = j["experts"];
    c.experts.margin_m = f.value("margin_m", c.experts.margin_m);
    c.experts.eps_cos = f.value("eps_cos", c.experts.eps_cos);
  }
  if (j.contains("gating")) {
    const auto& f = j["gating"];
    c.gating.d_hidden = f.value("d_hidden", c.gating.d_hidden);
    c.gating.tau = f.value("tau", c.gating.tau);
  }
  c.ablate_alignment = j.value("ablate_alignment", c.ablate_alignment);
  c.seed = j.value("seed", c.seed);
}

inline ojson train_config_to_json(const TrainConfig& c) {
  ojson j;
  j["lr"] = c.lr;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["adam_eps"] = c.adam_eps;
  j["weight_decay"] = c.weight_decay;
  j["batch_size"] = c.batch_size;
  j["max_epochs"] = c.max_epochs;
  j["patience"] = c.patience;
  j["clip_norm"] = c.clip_norm;
  j["seed"] = c.seed;
  j["precision"] = precision_name(c.precision);
  return j;
}

inline void train_config_update(TrainConfig& c, const ojson& j) {
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.seed = j.value("seed", c.seed);
  if (j.contains("precision")) c.precision = parse_precision(j["precision"].get<std::string>());
}

inline ojson split_spec_to_json(const SplitSpec& s) {
  ojson j;
  j["mode"] = s.mode == SplitMode::in_target ? "in_target" : "zero_shot";
  j["ratios"] = {s.train_ratio, s.dev_ratio, s.test_ratio};
  j["held_out_targets"] = s.held_out_targets;
  j["seed"] = s.seed;
  return j;
}

inline void split_spec_update(SplitSpec& s, const ojson& j) {
  if (j.contains("mode")) {
    std::string m = j["mode"].get<std::string>();
    if (m == "in_target")
      s.mode = SplitMode::in_target;
    else if (m == "zero_shot")
      s.mode = SplitMode::zero_shot;
    else
      throw ValueError("split mode must be in_target or zero_shot, got '" + m + "'");
  }
  if (j.contains("ratios")) {
    const auto& r = j["ratios"];
    if (!r.is_array() || r.size() != 3) throw ValueError("split ratios must be 3 numbers");
    s.train_ratio = r[0].get<double>();
    s.dev_ratio = r[1].get<double>();
    s.test_ratio = r[2].get<double>();
  }
  if (j.contains("held_out_targets"))
    s.held_out_targets = j["held_out_targets"].get<std::vector<std::string>>();
  s.seed = j.value("seed", s.seed);
}

inline ojson synth_config_to_json(const SyntheticConfig& c) {
  ojson j;
  j["n_per_class_per_target"] = c.n_per_class_per_target;
  j["targets"] = c.targets;
  j["d_text"] = c.d_text;
  j["d_visual"] = c.d_visual;
  j["dominance"] = dominance_name(c.dominance);
  j["noise_sigma"] = c.noise_sigma;
  j["seed"] = c.seed;
  return j;
}

inline void synth_config_update(SyntheticConfig& c, const ojson& j) {
  c.n_per_class_per_target = j.value("n_per_class_per_target", c.n_per_class_per_target);
  if (j.contains("targets")) c.targets = j["targets"].get<std::vector<std::string>>();
  c.d_text = j.value("d_text", c.d_text);
  c.d_visual = j.value("d_visual", c.d_visual);
  if (j.contains("dominance")) c.dominance = parse_dominance(j["dominance"].get<std::string>());
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  c.seed = j.value("seed", c.seed);
}

}  // namespace dime
