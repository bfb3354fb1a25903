#include "dime/data.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <sstream>

#include "json.hpp"

namespace dime {

using json = nlohmann::ordered_json;

namespace {

constexpr int kFormatVersion = 1;

// Floats travel as shortest-round-trip decimal strings so files are exact at
// 32 bits and byte-stable across save/load/save.
std::string float_to_string(float v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

float string_to_float(const std::string& s, const std::string& where) {
  float v = 0.0f;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw DataError(where + ": cannot parse '" + s + "' as a real number");
  if (!std::isfinite(v)) throw DataError(where + ": non-finite value '" + s + "'");
  return v;
}

json vector_to_json(const std::vector<float>& v) {
  json arr = json::array();
  for (float x : v) arr.push_back(float_to_string(x));
  return arr;
}

std::vector<float> json_to_vector(const json& arr, const std::string& where) {
  if (!arr.is_array()) throw DataError(where + ": expected an array of decimal strings");
  std::vector<float> out;
  out.reserve(arr.size());
  for (const auto& el : arr) {
    if (!el.is_string()) throw DataError(where + ": vector elements must be decimal strings");
    out.push_back(string_to_float(el.get<std::string>(), where));
  }
  return out;
}

void check_length(const std::vector<float>& v, int expected, const std::string& where) {
  if (static_cast<int>(v.size()) != expected)
    throw DataError(where + ": vector length " + std::to_string(v.size()) + " does not match " +
                    std::to_string(expected));
}

// Normalize in double, store as float, then rescale so the norm of the
// *stored* 32-bit values is 1 to within a few ulps.
std::vector<float> to_unit_f32(const std::vector<double>& v) {
  double norm = 0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (norm == 0) return std::vector<float>(v.size(), 0.0f);
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] / norm);
  double fnorm = 0;
  for (float x : out) fnorm += static_cast<double>(x) * x;
  fnorm = std::sqrt(fnorm);
  for (auto& x : out) x = static_cast<float>(x / fnorm);
  return out;
}

std::vector<double> normal_vector(Rng& rng, int n) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = rng.normal();
  return v;
}

}  // namespace

const std::vector<float>& Dataset::prompt_for(const EmbeddingRecord& rec) const {
  if (rec.e_prompt) return *rec.e_prompt;
  if (default_prompt_embedding) return *default_prompt_embedding;
  throw DataError("record '" + rec.id +
                  "': no prompt embedding and the dataset has no default_prompt_embedding");
}

std::vector<std::string> Dataset::targets() const {
  std::set<std::string> uniq;
  for (const auto& r : records) uniq.insert(r.target);
  return std::vector<std::string>(uniq.begin(), uniq.end());
}

void Dataset::validate() const {
  if (d_text <= 0 || d_visual <= 0)
    throw DataError("dataset: d_text and d_visual must be positive");
  if (default_prompt_embedding)
    check_length(*default_prompt_embedding, d_text, "default_prompt_embedding");
  std::set<std::string> ids;
  for (const auto& rec : records) {
    std::string where = "record '" + rec.id + "'";
    if (rec.id.empty()) throw DataError("record with empty id");
    if (!ids.insert(rec.id).second) throw DataError(where + ": duplicate id");
    if (rec.target.empty()) throw DataError(where + ": empty target");
    if (rec.label < 0 || rec.label >= kNumClasses)
      throw DataError(where + ": label " + std::to_string(rec.label) + " out of range {0,1,2}");
    check_length(rec.e_text, d_text, where + ".e_text");
    check_length(rec.e_visual, d_visual, where + ".e_visual");
    if (rec.e_prompt) check_length(*rec.e_prompt, d_text, where + ".e_prompt");
    if (!rec.e_prompt && !default_prompt_embedding)
      throw DataError(where + ": no prompt embedding and no dataset default");
    for (float v : rec.e_text)
      if (!std::isfinite(v)) throw DataError(where + ".e_text: non-finite value");
    for (float v : rec.e_visual)
      if (!std::isfinite(v)) throw DataError(where + ".e_visual: non-finite value");
  }
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

std::string dataset_to_string(const Dataset& ds) {
  json header;
  header["version"] = kFormatVersion;
  header["d_text"] = ds.d_text;
  header["d_visual"] = ds.d_visual;
  header["label_names"] = json::array({kLabelNames[0], kLabelNames[1], kLabelNames[2]});
  if (ds.default_prompt_embedding)
    header["default_prompt_embedding"] = vector_to_json(*ds.default_prompt_embedding);
  std::string out = header.dump() + "\n";
  for (const auto& rec : ds.records) {
    json line;
    line["id"] = rec.id;
    line["target"] = rec.target;
    line["label"] = rec.label;
    line["e_text"] = vector_to_json(rec.e_text);
    line["e_visual"] = vector_to_json(rec.e_visual);
    if (rec.e_prompt) line["e_prompt"] = vector_to_json(*rec.e_prompt);
    if (!rec.meta.empty()) {
      json meta = json::object();
      for (const auto& [k, v] : rec.meta) meta[k] = v;
      line["meta"] = meta;
    }
    out += line.dump() + "\n";
  }
  return out;
}

void save_dataset(const Dataset& ds, const std::string& path) {
  ds.validate();
  write_file_atomic(path, dataset_to_string(ds));
}

Dataset load_dataset(const std::string& path) {
  std::string content = read_file(path);
  Dataset ds;
  std::istringstream in(content);
  std::string line;
  int line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::string where = "line " + std::to_string(line_no);
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError(where + ": malformed record: " + e.what());
    }
    if (!obj.is_object()) throw DataError(where + ": expected an object");
    try {
      if (!have_header) {
        if (!obj.contains("version") || !obj["version"].is_number_integer())
          throw DataError(where + ": header missing integer 'version'");
        int version = obj["version"].get<int>();
        if (version != kFormatVersion)
          throw DataError(where + ": unsupported dataset version " + std::to_string(version) +
                          " (expected " + std::to_string(kFormatVersion) + ")");
        if (!obj.contains("d_text") || !obj.contains("d_visual"))
          throw DataError(where + ": header missing d_text / d_visual");
        ds.d_text = obj["d_text"].get<int>();
        ds.d_visual = obj["d_visual"].get<int>();
        if (ds.d_text <= 0 || ds.d_visual <= 0)
          throw DataError(where + ": d_text and d_visual must be positive");
        if (!obj.contains("label_names") || !obj["label_names"].is_array() ||
            obj["label_names"].size() != 3)
          throw DataError(where + ": header must list exactly 3 label_names");
        for (int i = 0; i < kNumClasses; ++i)
          if (obj["label_names"][i].get<std::string>() != kLabelNames[i])
            throw DataError(where + ": label_names[" + std::to_string(i) + "] must be '" +
                            kLabelNames[i] + "'");
        if (obj.contains("default_prompt_embedding")) {
          ds.default_prompt_embedding =
              json_to_vector(obj["default_prompt_embedding"], where + ".default_prompt_embedding");
          check_length(*ds.default_prompt_embedding, ds.d_text,
                       where + ".default_prompt_embedding");
        }
        have_header = true;
        continue;
      }
      EmbeddingRecord rec;
      if (!obj.contains("id") || !obj["id"].is_string() || obj["id"].get<std::string>().empty())
        throw DataError(where + ": record missing nonempty string 'id'");
      rec.id = obj["id"].get<std::string>();
      where = "record '" + rec.id + "' (line " + std::to_string(line_no) + ")";
      if (!obj.contains("target") || !obj["target"].is_string() ||
          obj["target"].get<std::string>().empty())
        throw DataError(where + ": missing nonempty string 'target'");
      rec.target = obj["target"].get<std::string>();
      if (!obj.contains("label") || !obj["label"].is_number_integer())
        throw DataError(where + ": missing integer 'label'");
      rec.label = obj["label"].get<int>();
      if (rec.label < 0 || rec.label >= kNumClasses)
        throw DataError(where + ": label " + std::to_string(rec.label) + " out of range {0,1,2}");
      if (!obj.contains("e_text") || !obj.contains("e_visual"))
        throw DataError(where + ": missing e_text / e_visual");
      rec.e_text = json_to_vector(obj["e_text"], where + ".e_text");
      check_length(rec.e_text, ds.d_text, where + ".e_text");
      rec.e_visual = json_to_vector(obj["e_visual"], where + ".e_visual");
      check_length(rec.e_visual, ds.d_visual, where + ".e_visual");
      if (obj.contains("e_prompt")) {
        rec.e_prompt = json_to_vector(obj["e_prompt"], where + ".e_prompt");
        check_length(*rec.e_prompt, ds.d_text, where + ".e_prompt");
      }
      if (obj.contains("meta")) {
        if (!obj["meta"].is_object()) throw DataError(where + ".meta: expected an object");
        for (const auto& [k, v] : obj["meta"].items()) {
          if (!v.is_string()) throw DataError(where + ".meta." + k + ": values must be strings");
          rec.meta[k] = v.get<std::string>();
        }
      }
      if (!rec.e_prompt && !ds.default_prompt_embedding)
        throw DataError(where + ": no prompt embedding and no dataset default");
      ds.records.push_back(std::move(rec));
    } catch (const json::exception& e) {
      throw DataError(where + ": malformed record: " + e.what());
    }
  }
  if (!have_header) throw DataError("'" + path + "': empty file, expected a header line");
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

void SplitSpec::validate() const {
  if (!(train_ratio > 0 && dev_ratio > 0 && test_ratio > 0))
    throw ValueError("split: ratios must be positive");
  double sum = train_ratio + dev_ratio + test_ratio;
  if (std::fabs(sum - 1.0) > 1e-9)
    throw ValueError("split: ratios must sum to 1, got " + std::to_string(sum));
  if (mode == SplitMode::zero_shot && held_out_targets.empty())
    throw ValueError("split: zero_shot mode requires held_out_targets");
}

namespace {

// Largest-remainder allocation of n items over the given ratios: each part
// gets floor(n * r) plus at most one extra, so every part is within +-1 of
// its exact quota and the counts sum to n.
std::vector<int> allocate_counts(int n, std::span<const double> ratios) {
  std::vector<int> counts(ratios.size());
  std::vector<std::pair<double, std::size_t>> frac;  // (-fractional part, index)
  int assigned = 0;
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    double quota = n * ratios[i];
    counts[i] = static_cast<int>(std::floor(quota));
    assigned += counts[i];
    frac.emplace_back(-(quota - counts[i]), i);
  }
  std::stable_sort(frac.begin(), frac.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  for (int r = 0; r < n - assigned; ++r) counts[frac[static_cast<std::size_t>(r)].second] += 1;
  return counts;
}

Dataset with_records(const Dataset& ds, const std::vector<std::size_t>& idx) {
  Dataset out;
  out.d_text = ds.d_text;
  out.d_visual = ds.d_visual;
  out.default_prompt_embedding = ds.default_prompt_embedding;
  std::vector<std::size_t> sorted = idx;
  std::sort(sorted.begin(), sorted.end());
  out.records.reserve(sorted.size());
  for (std::size_t i : sorted) out.records.push_back(ds.records[i]);
  return out;
}

// Shuffle each (target, label) stratum and hand out largest-remainder counts
// to the parts in order. Strata are visited in sorted key order and the rng
// is consumed sequentially, so the result is a pure function of the seed.
std::vector<std::vector<std::size_t>> stratified_assign(const Dataset& ds,
                                                        std::span<const std::size_t> pool,
                                                        std::span<const double> ratios, Rng& rng) {
  std::map<std::pair<std::string, int>, std::vector<std::size_t>> strata;
  for (std::size_t i : pool)
    strata[{ds.records[i].target, ds.records[i].label}].push_back(i);
  std::vector<std::vector<std::size_t>> parts(ratios.size());
  for (auto& [key, members] : strata) {
    rng.shuffle(members);
    std::vector<int> counts = allocate_counts(static_cast<int>(members.size()), ratios);
    std::size_t cursor = 0;
    for (std::size_t p = 0; p < parts.size(); ++p)
      for (int c = 0; c < counts[p]; ++c) parts[p].push_back(members[cursor++]);
  }
  return parts;
}

}  // namespace

Splits split_in_target(const Dataset& ds, const SplitSpec& spec) {
  spec.validate();
  if (spec.mode != SplitMode::in_target) throw ValueError("split_in_target: wrong mode in spec");
  if (ds.records.empty()) throw DataError("split: dataset is empty");
  std::vector<std::size_t> pool(ds.records.size());
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  Rng rng = Rng::derive(spec.seed, kDataStream);
  const double ratios[3] = {spec.train_ratio, spec.dev_ratio, spec.test_ratio};
  auto parts = stratified_assign(ds, pool, ratios, rng);
  return Splits{with_records(ds, parts[0]), with_records(ds, parts[1]), with_records(ds, parts[2])};
}

Splits split_zero_shot(const Dataset& ds, const SplitSpec& spec) {
  spec.validate();
  if (spec.mode != SplitMode::zero_shot) throw ValueError("split_zero_shot: wrong mode in spec");
  if (ds.records.empty()) throw DataError("split: dataset is empty");
  std::vector<std::string> all = ds.targets();
  std::set<std::string> held(spec.held_out_targets.begin(), spec.held_out_targets.end());
  for (const auto& t : held)
    if (!std::binary_search(all.begin(), all.end(), t))
      throw DataError("split: held-out target '" + t + "' does not occur in the dataset");
  if (held.size() >= all.size())
    throw DataError("split: held-out targets cover every dataset target (train would be empty)");

  std::vector<std::size_t> test_idx, rest;
  for (std::size_t i = 0; i < ds.records.size(); ++i)
    (held.count(ds.records[i].target) ? test_idx : rest).push_back(i);

  double denom = spec.train_ratio + spec.dev_ratio;
  const double ratios[2] = {spec.train_ratio / denom, spec.dev_ratio / denom};
  Rng rng = Rng::derive(spec.seed, kDataStream);
  auto parts = stratified_assign(ds, rest, ratios, rng);
  return Splits{with_records(ds, parts[0]), with_records(ds, parts[1]),
                with_records(ds, test_idx)};
}

Splits split_dataset(const Dataset& ds, const SplitSpec& spec) {
  return spec.mode == SplitMode::in_target ? split_in_target(ds, spec) : split_zero_shot(ds, spec);
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

const char* dominance_name(Dominance d) {
  switch (d) {
    case Dominance::text_dominant: return "text_dominant";
    case Dominance::visual_dominant: return "visual_dominant";
    case Dominance::shared: return "shared";
    case Dominance::mixed: return "mixed";
  }
  return "?";
}

Dominance parse_dominance(const std::string& name) {
  for (Dominance d : {Dominance::text_dominant, Dominance::visual_dominant, Dominance::shared,
                      Dominance::mixed})
    if (name == dominance_name(d)) return d;
  throw ValueError("unknown dominance mode '" + name +
                   "' (expected text_dominant|visual_dominant|shared|mixed)");
}

void SyntheticConfig::validate() const {
  if (n_per_class_per_target < 1) throw ValueError("gen-synth: n must be >= 1");
  if (targets.empty()) throw ValueError("gen-synth: at least one target required");
  std::set<std::string> uniq(targets.begin(), targets.end());
  if (uniq.size() != targets.size()) throw ValueError("gen-synth: duplicate target names");
  for (const auto& t : targets)
    if (t.empty()) throw ValueError("gen-synth: empty target name");
  if (d_text < 2 || d_visual < 2) throw ValueError("gen-synth: embedding dims must be >= 2");
  if (noise_sigma < 0) throw ValueError("gen-synth: noise_sigma must be >= 0");
}

Dataset generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  Rng rng = Rng::derive(cfg.seed, kDataStream);
  Dataset ds;
  ds.d_text = cfg.d_text;
  ds.d_visual = cfg.d_visual;
  ds.default_prompt_embedding = to_unit_f32(normal_vector(rng, cfg.d_text));

  // One unit class direction per (target, class) per modality.
  int nt = static_cast<int>(cfg.targets.size());
  std::vector<std::vector<double>> dir_text, dir_visual;
  for (int t = 0; t < nt; ++t)
    for (int c = 0; c < kNumClasses; ++c) {
      auto unit = [&](std::vector<double> v) {
        double norm = 0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        for (auto& x : v) x /= norm;
        return v;
      };
      dir_text.push_back(unit(normal_vector(rng, cfg.d_text)));
      dir_visual.push_back(unit(normal_vector(rng, cfg.d_visual)));
    }

  for (int t = 0; t < nt; ++t) {
    for (int c = 0; c < kNumClasses; ++c) {
      const auto& u_text = dir_text[static_cast<std::size_t>(t) * kNumClasses + c];
      const auto& u_visual = dir_visual[static_cast<std::size_t>(t) * kNumClasses + c];
      for (int i = 0; i < cfg.n_per_class_per_target; ++i) {
        Dominance mode = cfg.dominance;
        EmbeddingRecord rec;
        if (cfg.dominance == Dominance::mixed) {
          mode = std::array<Dominance, 3>{Dominance::text_dominant, Dominance::visual_dominant,
                                          Dominance::shared}[rng.uniform_int(3)];
          rec.meta["mode"] = dominance_name(mode);
        }
        bool text_signal = mode == Dominance::text_dominant || mode == Dominance::shared;
        bool visual_signal = mode == Dominance::visual_dominant || mode == Dominance::shared;
        // The signal-free modality is pure isotropic noise: class-blind by
        // construction, so a probe on it can only reach chance accuracy.
        std::vector<double> base_text = text_signal ? u_text : normal_vector(rng, cfg.d_text);
        std::vector<double> base_visual =
            visual_signal ? u_visual : normal_vector(rng, cfg.d_visual);
        std::vector<double> g_text = normal_vector(rng, cfg.d_text);
        std::vector<double> g_visual = normal_vector(rng, cfg.d_visual);
        for (int j = 0; j < cfg.d_text; ++j) base_text[j] += cfg.noise_sigma * g_text[j];
        for (int j = 0; j < cfg.d_visual; ++j) base_visual[j] += cfg.noise_sigma * g_visual[j];
        char id[128];
        std::snprintf(id, sizeof id, "%s_c%d_%04d", cfg.targets[t].c_str(), c, i);
        rec.id = id;
        rec.target = cfg.targets[t];
        rec.label = c;
        rec.e_text = to_unit_f32(base_text);
        rec.e_visual = to_unit_f32(base_visual);
        ds.records.push_back(std::move(rec));
      }
    }
  }
  ds.validate();
  return ds;
}

}  // namespace dime
