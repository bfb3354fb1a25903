#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dime/common.hpp"
#include "dime/rng.hpp"

namespace dime {

// Stance label coding used everywhere in the library and in dataset files.
inline constexpr int kNumClasses = 3;
inline constexpr std::array<const char*, 3> kLabelNames = {"Favor", "Against", "Neutral"};

// One sample: precomputed embeddings plus the gold stance label. e_text
// already folds in any upstream rationale text; meta is opaque provenance
// that the model never reads.
struct EmbeddingRecord {
  std::string id;
  std::string target;
  int label = 0;  // 0=Favor, 1=Against, 2=Neutral
  std::vector<float> e_text;
  std::vector<float> e_visual;
  std::optional<std::vector<float>> e_prompt;  // length d_text when present
  std::map<std::string, std::string> meta;     // sorted => deterministic output
};

struct Dataset {
  int d_text = 0;
  int d_visual = 0;
  std::optional<std::vector<float>> default_prompt_embedding;  // length d_text
  std::vector<EmbeddingRecord> records;

  // The prompt embedding a record actually uses (record-level override wins).
  const std::vector<float>& prompt_for(const EmbeddingRecord& rec) const;
  std::vector<std::string> targets() const;  // unique, sorted
  void validate() const;                     // throws DataError on any broken invariant
};

enum class SplitMode { in_target, zero_shot };

struct SplitSpec {
  SplitMode mode = SplitMode::in_target;
  double train_ratio = 0.7;
  double dev_ratio = 0.1;
  double test_ratio = 0.2;
  std::vector<std::string> held_out_targets;  // zero_shot only
  std::uint64_t seed = 0;

  void validate() const;
};

struct Splits {
  Dataset train, dev, test;
};

enum class Dominance { text_dominant, visual_dominant, shared, mixed };

const char* dominance_name(Dominance d);
Dominance parse_dominance(const std::string& name);  // throws ValueError

struct SyntheticConfig {
  int n_per_class_per_target = 100;
  std::vector<std::string> targets;
  int d_text = 64;
  int d_visual = 64;
  Dominance dominance = Dominance::text_dominant;
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

// Line-delimited text format; see save_dataset for the exact layout. Errors
// carry the 1-based line number, or the record id once one is known.
Dataset load_dataset(const std::string& path);
void save_dataset(const Dataset& ds, const std::string& path);
std::string dataset_to_string(const Dataset& ds);

// Stratified by (target, label), proportions within +-1 record per stratum,
// exact partition, deterministic given spec.seed.
Splits split_in_target(const Dataset& ds, const SplitSpec& spec);

// test = all records of held-out targets; the rest is split train/dev by the
// first two ratios renormalized. Target sets of train+dev and test are
// disjoint by construction.
Splits split_zero_shot(const Dataset& ds, const SplitSpec& spec);

Splits split_dataset(const Dataset& ds, const SplitSpec& spec);

// Planted-signal generator: per (target, class) a unit class direction per
// modality; which modality carries the signal depends on the dominance mode.
// Gaussian noise of scale noise_sigma is added, then every vector is
// L2-normalized. Deterministic given cfg.seed.
Dataset generate_synthetic(const SyntheticConfig& cfg);

}  // namespace dime
