#pragma once

// Multilingual instruction corpus (JSON lines) and embedding matrices (binary).
//
// Corpus file layout, UTF-8, one JSON object per line:
//
//   line 1   {"format":"ecr-corpus","version":1,
//             "labels":{"task":[...],"language":[...],"emotion":[...],"intent":[...]}}
//   line 2+  {"dialog_id":..., "task":..., "language":..., "emotion":..., "intent":...,
//             "EN_Q":..., "ZH_Q":..., "HI_Q":..., "EN_A":..., "ZH_A":..., "HI_A":...}
//
// Blank lines are skipped. The header declares the label inventory for each
// factor; every record label must come from it.
//
// Embedding file layout (all integers and floats little-endian):
//
//   offset  size      field
//   0       4         magic "ECRM"
//   4       4         u32 version (= 1)
//   8       8         u64 n (rows)
//   16      8         u64 d (columns)
//   24      4*n*d     f32 values, row-major
//   ...     n times   u32 byte length + UTF-8 id

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "ecr/error.hpp"
#include "ecr/io.hpp"
#include "ecr/vector_ops.hpp"

namespace ecr {

enum class Lang : std::uint8_t { En = 0, Zh = 1, Hi = 2 };

inline constexpr std::array<Lang, 3> kLanguages{Lang::En, Lang::Zh, Lang::Hi};

inline std::string_view lang_code(Lang l) {
  switch (l) {
    case Lang::En: return "en";
    case Lang::Zh: return "zh";
    case Lang::Hi: return "hi";
  }
  return "?";
}

/// Maps a corpus language label ("en", "English", "zh", ...) to its slot.
inline std::optional<Lang> parse_lang(std::string_view label) {
  std::string s(label);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "en" || s == "english") return Lang::En;
  if (s == "zh" || s == "chinese") return Lang::Zh;
  if (s == "hi" || s == "hindi") return Lang::Hi;
  return std::nullopt;
}

struct CorpusRecord {
  std::string dialog_id;
  std::string task;
  std::string language;
  std::string emotion;
  std::string intent;
  std::string en_q, zh_q, hi_q;
  std::string en_a, zh_a, hi_a;

  const std::string& query(Lang l) const {
    return l == Lang::En ? en_q : l == Lang::Zh ? zh_q : hi_q;
  }
  const std::string& answer(Lang l) const {
    return l == Lang::En ? en_a : l == Lang::Zh ? zh_a : hi_a;
  }

  bool operator==(const CorpusRecord&) const = default;
};

struct LabelInventory {
  std::vector<std::string> task;
  std::vector<std::string> language;
  std::vector<std::string> emotion;
  std::vector<std::string> intent;

  /// Inventory for a schema field name ("task", "language", ...).
  const std::vector<std::string>& field(std::string_view name) const {
    if (name == "task") return task;
    if (name == "language") return language;
    if (name == "emotion") return emotion;
    if (name == "intent") return intent;
    throw ValidationError("corpus", "no label inventory for field '" + std::string(name) + "'");
  }

  bool operator==(const LabelInventory&) const = default;
};

inline const std::string& label_of(const CorpusRecord& r, std::string_view field) {
  if (field == "task") return r.task;
  if (field == "language") return r.language;
  if (field == "emotion") return r.emotion;
  if (field == "intent") return r.intent;
  throw ValidationError("corpus", "unknown label field '" + std::string(field) + "'");
}

inline constexpr std::array<std::string_view, 4> kLabelFields{"task", "language", "emotion",
                                                              "intent"};

struct Corpus {
  LabelInventory labels;
  std::vector<CorpusRecord> records;

  /// Record count per label value of `field`, in inventory order.
  std::vector<std::pair<std::string, std::size_t>> counts(std::string_view field) const {
    std::vector<std::pair<std::string, std::size_t>> out;
    for (const auto& name : labels.field(field)) out.emplace_back(name, 0);
    for (const auto& r : records) {
      const auto& value = label_of(r, field);
      for (auto& [name, count] : out) {
        if (name == value) ++count;
      }
    }
    return out;
  }

  std::optional<std::size_t> find(std::string_view dialog_id) const {
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (records[i].dialog_id == dialog_id) return i;
    }
    return std::nullopt;
  }

  bool operator==(const Corpus&) const = default;
};

namespace detail {

inline constexpr std::array<std::pair<std::string_view, std::string CorpusRecord::*>, 11>
    kRecordFields{{
        {"dialog_id", &CorpusRecord::dialog_id},
        {"task", &CorpusRecord::task},
        {"language", &CorpusRecord::language},
        {"emotion", &CorpusRecord::emotion},
        {"intent", &CorpusRecord::intent},
        {"EN_Q", &CorpusRecord::en_q},
        {"ZH_Q", &CorpusRecord::zh_q},
        {"HI_Q", &CorpusRecord::hi_q},
        {"EN_A", &CorpusRecord::en_a},
        {"ZH_A", &CorpusRecord::zh_a},
        {"HI_A", &CorpusRecord::hi_a},
    }};

inline std::vector<std::string> read_inventory(const nlohmann::json& labels, std::string_view key,
                                               std::size_t line) {
  auto it = labels.find(std::string(key));
  if (it == labels.end() || !it->is_array()) {
    throw ParseError("corpus", line, "header is missing label inventory '" + std::string(key) + "'");
  }
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& v : *it) {
    if (!v.is_string()) {
      throw ParseError("corpus", line, "label inventory '" + std::string(key) + "' holds a non-string");
    }
    if (!seen.insert(v.get<std::string>()).second) {
      throw ValidationError("corpus", "line " + std::to_string(line) + ": duplicate label '" +
                                          v.get<std::string>() + "' in inventory " + std::string(key));
    }
    out.push_back(v.get<std::string>());
  }
  return out;
}

}  // namespace detail

/// Parses and validates a corpus stream. Throws ParseError for malformed lines
/// and ValidationError for invariant violations; both name the line.
inline Corpus parse_corpus(std::istream& in) {
  Corpus corpus;
  std::unordered_set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;

    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError("corpus", lineno, std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) {
      throw ParseError("corpus", lineno, "expected a JSON object");
    }

    if (!have_header) {
      if (j.value("format", "") != "ecr-corpus") {
        throw ParseError("corpus", lineno, "first line must be the ecr-corpus header");
      }
      if (j.value("version", 0) != 1) {
        throw ParseError("corpus", lineno, "unsupported corpus version");
      }
      auto labels = j.find("labels");
      if (labels == j.end() || !labels->is_object()) {
        throw ParseError("corpus", lineno, "header is missing the labels object");
      }
      corpus.labels.task = detail::read_inventory(*labels, "task", lineno);
      corpus.labels.language = detail::read_inventory(*labels, "language", lineno);
      corpus.labels.emotion = detail::read_inventory(*labels, "emotion", lineno);
      corpus.labels.intent = detail::read_inventory(*labels, "intent", lineno);
      have_header = true;
      continue;
    }

    CorpusRecord rec;
    for (const auto& [name, member] : detail::kRecordFields) {
      auto it = j.find(std::string(name));
      if (it == j.end()) {
        throw ValidationError("corpus", "line " + std::to_string(lineno) + ": missing field " +
                                            std::string(name));
      }
      if (!it->is_string()) {
        throw ParseError("corpus", lineno, "field " + std::string(name) + " must be a string");
      }
      rec.*member = it->get<std::string>();
    }
    if (rec.dialog_id.empty()) {
      throw ValidationError("corpus", "line " + std::to_string(lineno) + ": empty dialog_id");
    }
    for (auto [name, value] : {std::pair{"EN_Q", &rec.en_q}, std::pair{"ZH_Q", &rec.zh_q},
                               std::pair{"HI_Q", &rec.hi_q}}) {
      if (value->empty()) {
        throw ValidationError("corpus", "line " + std::to_string(lineno) + ": empty field " + name);
      }
    }
    for (auto field : kLabelFields) {
      const auto& inv = corpus.labels.field(field);
      const auto& value = label_of(rec, field);
      if (std::find(inv.begin(), inv.end(), value) == inv.end()) {
        throw ValidationError("corpus", "line " + std::to_string(lineno) + ": " +
                                            std::string(field) + " label '" + value +
                                            "' not declared in header");
      }
    }
    if (!ids.insert(rec.dialog_id).second) {
      throw ValidationError("corpus", "line " + std::to_string(lineno) + ": duplicate dialog_id '" +
                                          rec.dialog_id + "'");
    }
    corpus.records.push_back(std::move(rec));
  }
  if (!have_header) {
    throw ParseError("corpus", 0, "empty corpus file (no header)");
  }
  return corpus;
}

inline Corpus load_corpus(const std::filesystem::path& path) {
  auto text = io::read_file(path, "corpus");
  std::istringstream in(text);
  return parse_corpus(in);
}

inline std::string serialize_corpus(const Corpus& corpus) {
  nlohmann::ordered_json header;
  header["format"] = "ecr-corpus";
  header["version"] = 1;
  header["labels"]["task"] = corpus.labels.task;
  header["labels"]["language"] = corpus.labels.language;
  header["labels"]["emotion"] = corpus.labels.emotion;
  header["labels"]["intent"] = corpus.labels.intent;
  std::string out = header.dump() + "\n";
  for (const auto& r : corpus.records) {
    nlohmann::ordered_json j;
    for (const auto& [name, member] : detail::kRecordFields) j[std::string(name)] = r.*member;
    out += j.dump() + "\n";
  }
  return out;
}

inline void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  io::atomic_write(path, serialize_corpus(corpus), "corpus");
}

/// n x d row-major float matrix with one identifier per row.
struct EmbeddingMatrix {
  std::size_t n = 0;
  std::size_t d = 0;
  std::vector<float> data;
  std::vector<std::string> ids;

  EmbeddingMatrix() = default;
  EmbeddingMatrix(std::size_t rows, std::size_t cols)
      : n(rows), d(cols), data(rows * cols, 0.0f), ids(rows) {
    for (std::size_t i = 0; i < rows; ++i) ids[i] = std::to_string(i);
  }

  std::span<const float> row(std::size_t i) const { return {data.data() + i * d, d}; }
  std::span<float> mutable_row(std::size_t i) { return {data.data() + i * d, d}; }

  /// Throws ValidationError naming the first row with a non-finite entry.
  void validate() const {
    if (data.size() != n * d || ids.size() != n) {
      throw DimensionError("corpus", "embedding matrix storage does not match n x d");
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (float v : row(i)) {
        if (!std::isfinite(v)) {
          throw ValidationError("corpus", "non-finite value in embedding row " + std::to_string(i));
        }
      }
    }
  }

  std::unordered_map<std::string, std::size_t> id_index() const {
    std::unordered_map<std::string, std::size_t> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.emplace(ids[i], i);
    return out;
  }

  bool operator==(const EmbeddingMatrix&) const = default;
};

inline constexpr std::string_view kEmbeddingMagic = "ECRM";
inline constexpr std::uint32_t kEmbeddingVersion = 1;

inline std::string serialize_embeddings(const EmbeddingMatrix& m) {
  m.validate();
  io::ByteWriter w;
  w.put_bytes(kEmbeddingMagic);
  w.put(kEmbeddingVersion);
  w.put(static_cast<std::uint64_t>(m.n));
  w.put(static_cast<std::uint64_t>(m.d));
  for (float v : m.data) w.put(v);
  for (const auto& id : m.ids) w.put_string(id);
  return w.take();
}

inline EmbeddingMatrix parse_embeddings(std::string_view bytes) {
  io::ByteReader r(bytes, "corpus");
  if (r.get_bytes(4) != kEmbeddingMagic) {
    throw FormatError("corpus", "not an embedding file (bad magic)");
  }
  if (auto v = r.get<std::uint32_t>(); v != kEmbeddingVersion) {
    throw FormatError("corpus", "unsupported embedding file version " + std::to_string(v));
  }
  auto n = r.get<std::uint64_t>();
  auto d = r.get<std::uint64_t>();
  if (d == 0 && n > 0) {
    throw DimensionError("corpus", "embedding dimension must be positive");
  }
  if (n * d * 4 > r.remaining()) {
    throw FormatError("corpus", "truncated embedding file: header declares " + std::to_string(n) +
                                    "x" + std::to_string(d) + " values but only " +
                                    std::to_string(r.remaining() / 4) + " are present");
  }
  EmbeddingMatrix m;
  m.n = n;
  m.d = d;
  m.data.resize(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      float v = r.get<float>();
      if (!std::isfinite(v)) {
        throw ValidationError("corpus", "non-finite value in embedding row " + std::to_string(i));
      }
      m.data[i * d + j] = v;
    }
  }
  m.ids.reserve(n);
  for (std::size_t i = 0; i < n; ++i) m.ids.push_back(r.get_string());
  if (r.remaining() != 0) {
    throw FormatError("corpus", "trailing bytes after embedding id table");
  }
  return m;
}

inline EmbeddingMatrix load_embeddings(const std::filesystem::path& path) {
  return parse_embeddings(io::read_file(path, "corpus"));
}

inline void save_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path) {
  io::atomic_write(path, serialize_embeddings(m), "corpus");
}

}  // namespace ecr
