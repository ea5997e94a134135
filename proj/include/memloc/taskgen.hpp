#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "memloc/error.hpp"
#include "memloc/model.hpp"
#include "memloc/rng.hpp"

namespace memloc {

struct Example {
  std::vector<std::int32_t> tokens;  // starts with kClsToken
  int original_label = 0;
  int assigned_label = 0;
  bool noisy = false;
  std::int64_t example_id = 0;

  friend bool operator==(const Example&, const Example&) = default;
};

enum class TaskKind { SurfaceKeyToken, OrderSensitive, CompositionalParity, Ingested };

NLOHMANN_JSON_SERIALIZE_ENUM(TaskKind, {{TaskKind::SurfaceKeyToken, "surface-key-token"},
                                        {TaskKind::OrderSensitive, "order-sensitive"},
                                        {TaskKind::CompositionalParity, "compositional-parity"},
                                        {TaskKind::Ingested, "ingested"}})

struct TaskSpec {
  std::string name = "task";
  TaskKind kind = TaskKind::SurfaceKeyToken;
  int n_classes = 2;
  int n_train = 2000;
  int n_val = 400;
  int vocab_size = 64;
  /// Body length range; a CLS token is prepended, so sequences are one longer.
  int seq_len_min = 12;
  int seq_len_max = 12;
  /// surface: key tokens per class; order: max markers per example;
  /// parity: number of order-encoded bits per example.
  int key_tokens = 2;
  /// surface only: probability of a confusing key from another class.
  double distractor_rate = 0.0;
  std::uint64_t seed = 1;
  /// Ingested tasks.
  std::string path;
  std::string val_path;
  std::string vocab_path;

  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

inline void to_json(nlohmann::json& j, const TaskSpec& t) {
  j = nlohmann::json{{"name", t.name},
                     {"kind", t.kind},
                     {"n_classes", t.n_classes},
                     {"n_train", t.n_train},
                     {"n_val", t.n_val},
                     {"vocab_size", t.vocab_size},
                     {"seq_len_min", t.seq_len_min},
                     {"seq_len_max", t.seq_len_max},
                     {"key_tokens", t.key_tokens},
                     {"distractor_rate", t.distractor_rate},
                     {"seed", t.seed}};
  if (t.kind == TaskKind::Ingested) {
    j["path"] = t.path;
    j["val_path"] = t.val_path;
    j["vocab_path"] = t.vocab_path;
  }
}

inline void from_json(const nlohmann::json& j, TaskSpec& t) {
  TaskSpec d;
  t.name = j.value("name", d.name);
  t.kind = j.value("kind", d.kind);
  t.n_classes = j.value("n_classes", d.n_classes);
  t.n_train = j.value("n_train", d.n_train);
  t.n_val = j.value("n_val", d.n_val);
  t.vocab_size = j.value("vocab_size", d.vocab_size);
  t.seq_len_min = j.value("seq_len_min", d.seq_len_min);
  t.seq_len_max = j.value("seq_len_max", d.seq_len_max);
  t.key_tokens = j.value("key_tokens", d.key_tokens);
  t.distractor_rate = j.value("distractor_rate", d.distractor_rate);
  t.seed = j.value("seed", d.seed);
  t.path = j.value("path", d.path);
  t.val_path = j.value("val_path", d.val_path);
  t.vocab_path = j.value("vocab_path", d.vocab_path);
}

struct Dataset {
  std::vector<Example> examples;
  int n_classes = 2;
  int vocab_size = 0;
  double noise_rate = 0.0;
  std::uint64_t perturbation_seed = 0;
  std::string provenance;

  std::size_t size() const { return examples.size(); }
  std::size_t noisy_count() const {
    return static_cast<std::size_t>(
        std::count_if(examples.begin(), examples.end(), [](const Example& e) { return e.noisy; }));
  }
  std::size_t max_length() const {
    std::size_t m = 0;
    for (const auto& e : examples) m = std::max(m, e.tokens.size());
    return m;
  }
  std::vector<std::size_t> class_counts(bool original = true) const {
    std::vector<std::size_t> c(static_cast<std::size_t>(n_classes), 0);
    for (const auto& e : examples) ++c[static_cast<std::size_t>(original ? e.original_label : e.assigned_label)];
    return c;
  }
  Dataset subset(const std::vector<std::size_t>& indices) const {
    Dataset out = *this;
    out.examples.clear();
    for (auto i : indices) out.examples.push_back(examples.at(i));
    return out;
  }
  Dataset filtered(bool keep_noisy) const {
    Dataset out = *this;
    out.examples.clear();
    for (const auto& e : examples)
      if (e.noisy == keep_noisy) out.examples.push_back(e);
    return out;
  }
};

struct TaskData {
  Dataset train;
  Dataset val;
  std::vector<std::string> label_names;
};

namespace detail {

inline void check_spec(const TaskSpec& s) {
  if (s.n_classes < 2) throw ConfigError(s.name + ": n_classes must be >= 2");
  if (s.n_train < 0 || s.n_val < 0) throw ConfigError(s.name + ": negative split size");
  if (s.seq_len_min < 1 || s.seq_len_max < s.seq_len_min)
    throw ConfigError(s.name + ": invalid seq_len range");
  if (s.key_tokens < 1) throw ConfigError(s.name + ": key_tokens must be >= 1");
  if (s.distractor_rate < 0.0 || s.distractor_rate > 1.0)
    throw ConfigError(s.name + ": distractor_rate outside [0, 1]");
}

// Places `items` at distinct random body positions of `body`; positions are
// returned sorted so that item order is preserved when `ordered` is set.
inline void place(std::vector<std::int32_t>& body, const std::vector<std::int32_t>& items,
                  bool ordered, Rng& rng) {
  auto pos = permutation(body.size(), rng);
  pos.resize(items.size());
  if (ordered) std::sort(pos.begin(), pos.end());
  for (std::size_t i = 0; i < items.size(); ++i) body[pos[i]] = items[i];
}

}  // namespace detail

/// Token layout for synthetic tasks: 0 = pad, 1 = CLS, then task-specific
/// informative tokens, then filler tokens up to vocab_size.
inline Dataset generate_examples(const TaskSpec& spec, std::size_t count, std::uint64_t seed) {
  detail::check_spec(spec);
  const int C = spec.n_classes, K = spec.key_tokens, V = spec.vocab_size;
  int informative = 0;
  switch (spec.kind) {
    case TaskKind::SurfaceKeyToken:
      informative = C * K;
      break;
    case TaskKind::OrderSensitive:
      informative = C;
      if (K > C) throw ConfigError(spec.name + ": order-sensitive needs key_tokens <= n_classes");
      if (spec.seq_len_min < K) throw ConfigError(spec.name + ": sequences too short for markers");
      break;
    case TaskKind::CompositionalParity:
      informative = 2 * K;  // one token pair per bit
      if (C > K + 1)
        throw ConfigError(spec.name + ": parity with " + std::to_string(K) +
                          " items distinguishes at most " + std::to_string(K + 1) + " classes");
      if (spec.seq_len_min < 2 * K) throw ConfigError(spec.name + ": sequences too short for items");
      break;
    case TaskKind::Ingested:
      throw ConfigError(spec.name + ": ingested tasks are loaded, not generated");
  }
  const int first_filler = 2 + informative;
  if (first_filler >= V)
    throw ConfigError(spec.name + ": vocab_size " + std::to_string(V) + " cannot hold " +
                      std::to_string(informative) + " informative tokens plus fillers");
  const int n_fillers = V - first_filler;

  Rng rng(seed);
  Dataset ds;
  ds.n_classes = C;
  ds.vocab_size = V;
  ds.provenance = "synthetic:" + spec.name;
  ds.examples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % static_cast<std::size_t>(C));
    const auto len = static_cast<std::size_t>(
        spec.seq_len_min + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(
                                                                spec.seq_len_max - spec.seq_len_min + 1))));
    std::vector<std::int32_t> body(len);
    for (auto& t : body) t = first_filler + static_cast<std::int32_t>(uniform_index(rng, n_fillers));
    switch (spec.kind) {
      case TaskKind::SurfaceKeyToken: {
        auto key_of = [&](int c) {
          return 2 + c * K + static_cast<std::int32_t>(uniform_index(rng, static_cast<std::uint64_t>(K)));
        };
        std::vector<std::int32_t> items{key_of(label)};
        if (len >= 3 && uniform01(rng) < spec.distractor_rate) {
          int other = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(C - 1)));
          if (other >= label) ++other;
          items.push_back(key_of(label));
          items.push_back(key_of(other));
        }
        detail::place(body, items, false, rng);
        break;
      }
      case TaskKind::OrderSensitive: {
        // The label is the marker that appears first; up to K-1 other
        // markers follow it.
        std::vector<int> others;
        for (int c = 0; c < C; ++c)
          if (c != label) others.push_back(c);
        shuffle(others, rng);
        const auto extra = static_cast<std::size_t>(uniform_index(rng, static_cast<std::uint64_t>(K)));
        std::vector<std::int32_t> items{2 + label};
        for (std::size_t j = 0; j < extra; ++j) items.push_back(2 + others[j]);
        detail::place(body, items, true, rng);
        break;
      }
      case TaskKind::CompositionalParity: {
        // Bit j is 1 when token 2+2j precedes token 3+2j; label = (number of
        // set bits) mod C. Every example holds every pair exactly once, so
        // token counts carry no label information.
        std::vector<int> bits(static_cast<std::size_t>(K));
        int ones = 0;
        do {
          ones = 0;
          for (auto& b : bits) {
            b = static_cast<int>(uniform_index(rng, 2));
            ones += b;
          }
        } while (ones % C != label);
        auto pos = permutation(len, rng);
        for (int j = 0; j < K; ++j) {
          auto p = pos[static_cast<std::size_t>(2 * j)], q = pos[static_cast<std::size_t>(2 * j + 1)];
          if (p > q) std::swap(p, q);
          const std::int32_t a = 2 + 2 * j, b = 3 + 2 * j;
          body[p] = bits[static_cast<std::size_t>(j)] ? a : b;
          body[q] = bits[static_cast<std::size_t>(j)] ? b : a;
        }
        break;
      }
      case TaskKind::Ingested:
        break;
    }
    Example ex;
    ex.tokens.reserve(len + 1);
    ex.tokens.push_back(kClsToken);
    ex.tokens.insert(ex.tokens.end(), body.begin(), body.end());
    ex.original_label = ex.assigned_label = label;
    ds.examples.push_back(std::move(ex));
  }
  shuffle(ds.examples, rng);
  for (std::size_t i = 0; i < ds.examples.size(); ++i) ds.examples[i].example_id = static_cast<std::int64_t>(i);
  return ds;
}

/// Clean train and validation sets for a synthetic task, deterministic in spec.seed.
inline TaskData generate_task(const TaskSpec& spec) {
  auto all = generate_examples(spec, static_cast<std::size_t>(spec.n_train + spec.n_val),
                               derive_seed(spec.seed, 0x7a5c));
  TaskData out;
  out.train = all;
  out.val = all;
  out.train.examples.assign(all.examples.begin(), all.examples.begin() + spec.n_train);
  out.val.examples.assign(all.examples.begin() + spec.n_train, all.examples.end());
  for (int c = 0; c < spec.n_classes; ++c) out.label_names.push_back("class_" + std::to_string(c));
  return out;
}

/// Relabels exactly round(rate * N) uniformly chosen examples to a uniform
/// draw over the other C-1 classes. Tokens, ids and order are untouched.
inline Dataset perturb_labels(const Dataset& data, double rate, std::uint64_t seed) {
  if (!(rate >= 0.0) || rate >= 1.0)
    throw ParameterError("noise rate must lie in [0, 1), got " + std::to_string(rate));
  Dataset out = data;
  out.noise_rate = rate;
  out.perturbation_seed = seed;
  for (auto& e : out.examples) {
    e.assigned_label = e.original_label;
    e.noisy = false;
  }
  const auto n = static_cast<std::size_t>(std::llround(rate * static_cast<double>(data.size())));
  if (n == 0) return out;
  Rng rng(seed);
  auto order = permutation(out.size(), rng);
  for (std::size_t i = 0; i < n; ++i) {
    auto& e = out.examples[order[i]];
    int r = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(out.n_classes - 1)));
    if (r >= e.original_label) ++r;
    e.assigned_label = r;
    e.noisy = true;
  }
  return out;
}

/// Keeps the two most frequent original classes (ties to the lower id) and
/// remaps them to {0, 1} in ascending id order. Examples whose assigned label
/// falls outside the pair are dropped.
inline Dataset binarise(const Dataset& data) {
  const auto counts = data.class_counts(true);
  std::vector<int> order(counts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return counts[static_cast<std::size_t>(a)] > counts[static_cast<std::size_t>(b)]; });
  if (order.size() < 2 || counts[static_cast<std::size_t>(order[1])] == 0)
    throw DataError("binarise: fewer than two non-empty classes");
  const int lo = std::min(order[0], order[1]);
  const int hi = std::max(order[0], order[1]);
  auto remap = [&](int c) { return c == lo ? 0 : (c == hi ? 1 : -1); };
  Dataset out = data;
  out.n_classes = 2;
  out.examples.clear();
  for (const auto& e : data.examples) {
    const int o = remap(e.original_label), a = remap(e.assigned_label);
    if (o < 0 || a < 0) continue;
    Example x = e;
    x.original_label = o;
    x.assigned_label = a;
    x.noisy = o != a;
    out.examples.push_back(std::move(x));
  }
  return out;
}

/// Random disjoint halves (first has ceil(N/2)); relative order is kept.
inline std::pair<Dataset, Dataset> half_split(const Dataset& data, std::uint64_t seed) {
  Rng rng(seed);
  auto perm = permutation(data.size(), rng);
  const std::size_t first = (data.size() + 1) / 2;
  std::vector<std::size_t> a(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(first));
  std::vector<std::size_t> b(perm.begin() + static_cast<std::ptrdiff_t>(first), perm.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return {data.subset(a), data.subset(b)};
}

struct TokenizerSpec {
  int vocab_size = 4096;
  int max_seq_len = 64;
  /// Optional vocabulary file, one token per line. Empty = hashing tokenizer.
  std::string vocab_path;
};

inline constexpr std::int32_t kUnkToken = 2;

/// Lower-cased alphanumeric words mapped to ids. Ids 0..2 are pad, CLS, unk.
class Tokenizer {
 public:
  explicit Tokenizer(TokenizerSpec spec) : spec_(std::move(spec)) {
    if (spec_.vocab_size < 4) throw ConfigError("tokenizer vocab_size must be >= 4");
    if (spec_.max_seq_len < 2) throw ConfigError("tokenizer max_seq_len must be >= 2");
    if (!spec_.vocab_path.empty()) {
      std::ifstream in(spec_.vocab_path);
      if (!in) throw Error("cannot open vocabulary " + spec_.vocab_path);
      std::string line;
      std::int32_t next = 3;
      while (std::getline(in, line)) {
        if (line.empty() || vocab_.count(line)) continue;
        if (next >= spec_.vocab_size) break;
        vocab_[line] = next++;
      }
    }
  }

  std::vector<std::int32_t> encode(const std::string& text) const {
    std::vector<std::int32_t> ids{kClsToken};
    std::string word;
    auto flush = [&] {
      if (word.empty()) return;
      if (ids.size() < static_cast<std::size_t>(spec_.max_seq_len)) ids.push_back(id_of(word));
      word.clear();
    };
    for (unsigned char c : text) {
      if (std::isalnum(c)) word.push_back(static_cast<char>(std::tolower(c)));
      else flush();
    }
    flush();
    return ids;
  }

 private:
  std::int32_t id_of(const std::string& w) const {
    if (!spec_.vocab_path.empty()) {
      auto it = vocab_.find(w);
      return it == vocab_.end() ? kUnkToken : it->second;
    }
    return 3 + static_cast<std::int32_t>(fnv1a(w) % static_cast<std::uint64_t>(spec_.vocab_size - 3));
  }

  TokenizerSpec spec_;
  std::unordered_map<std::string, std::int32_t> vocab_;
};

struct IngestResult {
  Dataset data;
  std::vector<std::string> label_names;
};

/// Reads JSONL lines {"text": ..., "label": ...}. Labels get dense ids in
/// first-seen order unless `known_labels` is given, in which case an unseen
/// label raises LabelError.
inline IngestResult ingest_jsonl(const std::string& path, const TokenizerSpec& tok,
                                 const std::vector<std::string>* known_labels = nullptr) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  Tokenizer tokenizer(tok);
  IngestResult out;
  std::map<std::string, int> label_ids;
  if (known_labels) {
    out.label_names = *known_labels;
    for (std::size_t i = 0; i < known_labels->size(); ++i) label_ids[(*known_labels)[i]] = static_cast<int>(i);
  }
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what(), line_no);
    }
    if (!j.is_object() || !j.contains("text") || !j["text"].is_string())
      throw ParseError(path + ":" + std::to_string(line_no) + ": missing string field \"text\"", line_no);
    if (!j.contains("label"))
      throw ParseError(path + ":" + std::to_string(line_no) + ": missing field \"label\"", line_no);
    const std::string label = j["label"].is_string() ? j["label"].get<std::string>() : j["label"].dump();
    auto it = label_ids.find(label);
    if (it == label_ids.end()) {
      if (known_labels)
        throw LabelError(path + ":" + std::to_string(line_no) + ": unseen label \"" + label + "\"");
      it = label_ids.emplace(label, static_cast<int>(out.label_names.size())).first;
      out.label_names.push_back(label);
    }
    Example ex;
    ex.tokens = tokenizer.encode(j["text"].get<std::string>());
    ex.original_label = ex.assigned_label = it->second;
    ex.example_id = static_cast<std::int64_t>(out.data.examples.size());
    out.data.examples.push_back(std::move(ex));
  }
  out.data.n_classes = static_cast<int>(std::max<std::size_t>(2, out.label_names.size()));
  out.data.vocab_size = tok.vocab_size;
  out.data.provenance = "ingest:" + path;
  return out;
}

inline void export_jsonl(const Dataset& data, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  for (const auto& e : data.examples) {
    nlohmann::json j{{"id", e.example_id},
                     {"tokens", e.tokens},
                     {"original_label", e.original_label},
                     {"assigned_label", e.assigned_label},
                     {"noisy", e.noisy}};
    out << j.dump() << '\n';
  }
}

inline Dataset read_exported_jsonl(const std::string& path, int n_classes, int vocab_size) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  Dataset ds;
  ds.n_classes = n_classes;
  ds.vocab_size = vocab_size;
  ds.provenance = "export:" + path;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      Example e;
      e.example_id = j.at("id").get<std::int64_t>();
      e.tokens = j.at("tokens").get<std::vector<std::int32_t>>();
      e.original_label = j.at("original_label").get<int>();
      e.assigned_label = j.at("assigned_label").get<int>();
      e.noisy = j.at("noisy").get<bool>();
      ds.examples.push_back(std::move(e));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what(), line_no);
    }
  }
  return ds;
}

/// Loads an ingested task: train file, plus the val file or else a
/// deterministic 10% hold-out of the train file.
inline TaskData load_ingested_task(const TaskSpec& spec) {
  TokenizerSpec tok{spec.vocab_size, spec.seq_len_max + 1, spec.vocab_path};
  auto train = ingest_jsonl(spec.path, tok);
  TaskData out;
  out.label_names = train.label_names;
  if (!spec.val_path.empty()) {
    out.train = std::move(train.data);
    out.val = ingest_jsonl(spec.val_path, tok, &out.label_names).data;
    out.val.n_classes = out.train.n_classes;
  } else {
    Rng rng(derive_seed(spec.seed, 0x1a7e));
    auto perm = permutation(train.data.size(), rng);
    const std::size_t n_val = train.data.size() / 10;
    std::vector<std::size_t> v(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<std::size_t> t(perm.begin() + static_cast<std::ptrdiff_t>(n_val), perm.end());
    std::sort(v.begin(), v.end());
    std::sort(t.begin(), t.end());
    out.train = train.data.subset(t);
    out.val = train.data.subset(v);
  }
  return out;
}

inline TaskData load_task(const TaskSpec& spec) {
  return spec.kind == TaskKind::Ingested ? load_ingested_task(spec) : generate_task(spec);
}

}  // namespace memloc
