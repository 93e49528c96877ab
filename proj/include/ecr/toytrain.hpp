#pragma once

// Desk-scale model that consumes control-token prefixes, plus the paired
// baseline/conditioned experiment harness.
//
// Model: token embedding table with V_base base rows followed by K*B control
// rows, an output projection W (V_base x d) and bias b. For an input
// x' = [prefix, x]:
//   h         = mean of embedding rows over the base tokens of x (prefix excluded)
//   context_i = mean of embedding rows over x'[0..i]
//   logits_i  = W context_i + b, predicting x'[i+1]
// Only positions whose target lies in x count towards the loss, so both arms
// of an experiment predict exactly x[1..n-1].
//
// Config file: flat `key = value` lines, `#` starts a comment. Keys are the
// TrainConfig member names; see README for the list.

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "ecr/anchors.hpp"
#include "ecr/codec.hpp"
#include "ecr/corpus.hpp"
#include "ecr/error.hpp"
#include "ecr/geometry.hpp"
#include "ecr/synthetic.hpp"

namespace ecr {

// ---------------------------------------------------------------------------
// Samples

/// Parses whitespace-separated decimal token ids, each below `vocab`.
inline std::vector<TokenId> tokenize(std::string_view text, std::size_t vocab) {
  std::vector<TokenId> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i == text.size()) break;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    auto word = text.substr(i, j - i);
    unsigned long long v = 0;
    auto [p, ec] = std::from_chars(word.data(), word.data() + word.size(), v);
    if (ec != std::errc{} || p != word.data() + word.size()) {
      throw ValidationError("toytrain", "token '" + std::string(word) + "' is not a token id");
    }
    if (v >= vocab) {
      throw ValidationError("toytrain", "unknown token id " + std::string(word) + " (vocabulary " +
                                            std::to_string(vocab) + ")");
    }
    out.push_back(static_cast<TokenId>(v));
    i = j;
  }
  return out;
}

struct ToySample {
  std::string id;
  Lang lang = Lang::En;
  std::vector<TokenId> query;
  std::vector<TokenId> answer;  // answer[0] is the gold label token

  std::vector<TokenId> tokens() const {
    std::vector<TokenId> x(query);
    x.insert(x.end(), answer.begin(), answer.end());
    return x;
  }
};

/// One sample per record, in the record's own language.
inline std::vector<ToySample> make_samples(const Corpus& corpus, std::size_t base_vocab) {
  std::vector<ToySample> out;
  out.reserve(corpus.records.size());
  for (const auto& r : corpus.records) {
    auto lang = parse_lang(r.language);
    if (!lang) throw ValidationError("toytrain", "record '" + r.dialog_id + "' has unknown language '" + r.language + "'");
    ToySample s;
    s.id = r.dialog_id;
    s.lang = *lang;
    s.query = tokenize(r.query(*lang), base_vocab);
    s.answer = tokenize(r.answer(*lang), base_vocab);
    if (s.query.empty()) throw ValidationError("toytrain", "record '" + r.dialog_id + "' has an empty query");
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model

template <std::floating_point Real = float>
class ToyModel {
 public:
  ToyModel() = default;

  ToyModel(std::size_t base_vocab, std::size_t control_vocab, std::size_t dim, std::uint64_t seed,
           double init_scale = 0.1)
      : base_vocab_(base_vocab), control_vocab_(control_vocab), dim_(dim), seed_(seed) {
    if (base_vocab == 0 || dim == 0) throw DomainError("toytrain", "model needs base_vocab >= 1 and dim >= 1");
    embedding.resize((base_vocab + control_vocab) * dim);
    out_w.resize(base_vocab * dim);
    out_b.assign(base_vocab, Real(0));
    // Base parameters and control rows come from separate streams so that
    // models with different control vocabularies share their base weights.
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, init_scale);
    for (std::size_t i = 0; i < base_vocab * dim; ++i) embedding[i] = static_cast<Real>(normal(rng));
    for (auto& w : out_w) w = static_cast<Real>(normal(rng));
    std::mt19937_64 crng(seed ^ 0x9e3779b97f4a7c15ULL);
    for (std::size_t i = base_vocab * dim; i < embedding.size(); ++i) embedding[i] = static_cast<Real>(normal(crng));
  }

  std::size_t base_vocab() const { return base_vocab_; }
  std::size_t control_vocab() const { return control_vocab_; }
  std::size_t vocab() const { return base_vocab_ + control_vocab_; }
  std::size_t dim() const { return dim_; }
  std::uint64_t seed() const { return seed_; }
  bool is_control(TokenId t) const { return t >= base_vocab_; }

  std::span<Real> row(TokenId t) { return {embedding.data() + std::size_t{t} * dim_, dim_}; }
  std::span<const Real> row(TokenId t) const { return {embedding.data() + std::size_t{t} * dim_, dim_}; }

  /// Overwrites the base embedding rows with a (teacher) token table.
  void init_base_rows(const EmbeddingMatrix& table) {
    if (table.n != base_vocab_ || table.d != dim_) {
      throw DimensionError("toytrain", "token table is " + std::to_string(table.n) + "x" + std::to_string(table.d) +
                                           ", model expects " + std::to_string(base_vocab_) + "x" +
                                           std::to_string(dim_));
    }
    for (std::size_t i = 0; i < table.data.size(); ++i) embedding[i] = static_cast<Real>(table.data[i]);
  }

  bool operator==(const ToyModel&) const = default;

  std::vector<Real> embedding;  // (base_vocab + control_vocab) x dim
  std::vector<Real> out_w;      // base_vocab x dim
  std::vector<Real> out_b;      // base_vocab

 private:
  std::size_t base_vocab_ = 0;
  std::size_t control_vocab_ = 0;
  std::size_t dim_ = 0;
  std::uint64_t seed_ = 0;
};

namespace detail {
template <class Real>
void check_token(const ToyModel<Real>& m, TokenId t) {
  if (t >= m.vocab()) {
    throw ValidationError("toytrain", "unknown token id " + std::to_string(t) + " (vocabulary " +
                                          std::to_string(m.vocab()) + ")");
  }
}
}  // namespace detail

/// Mean embedding row over the non-control tokens of `tokens`.
template <class Real>
std::vector<double> embed_sequence(const ToyModel<Real>& m, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw ValidationError("toytrain", "cannot embed an empty token sequence");
  std::vector<double> h(m.dim(), 0.0);
  std::size_t used = 0;
  for (auto t : tokens) {
    detail::check_token(m, t);
    if (m.is_control(t)) continue;
    auto r = m.row(t);
    for (std::size_t j = 0; j < h.size(); ++j) h[j] += static_cast<double>(r[j]);
    ++used;
  }
  if (used == 0) throw ValidationError("toytrain", "token sequence has no base tokens");
  for (auto& v : h) v /= static_cast<double>(used);
  return h;
}

template <class Real>
std::vector<double> embed_sequence(const ToyModel<Real>& m, const std::vector<TokenId>& tokens) {
  return embed_sequence(m, std::span<const TokenId>(tokens));
}

/// Gradient buffers laid out like the model parameters.
struct Gradients {
  std::vector<double> embedding, out_w, out_b;

  template <class Real>
  explicit Gradients(const ToyModel<Real>& m)
      : embedding(m.embedding.size(), 0.0), out_w(m.out_w.size(), 0.0), out_b(m.out_b.size(), 0.0) {}

  void zero() {
    std::fill(embedding.begin(), embedding.end(), 0.0);
    std::fill(out_w.begin(), out_w.end(), 0.0);
    std::fill(out_b.begin(), out_b.end(), 0.0);
  }

  double norm() const {
    double s = 0.0;
    for (const auto* v : {&embedding, &out_w, &out_b}) {
      for (double g : *v) s += g * g;
    }
    return std::sqrt(s);
  }

  void scale(double f) {
    for (auto* v : {&embedding, &out_w, &out_b}) {
      for (double& g : *v) g *= f;
    }
  }
};

struct SequenceLoss {
  double total = 0.0;       // summed negative log-likelihood
  std::size_t targets = 0;  // number of predicted positions
};

namespace detail {

/// logits = W ctx + b, in double.
template <class Real>
void logits(const ToyModel<Real>& m, std::span<const double> ctx, std::vector<double>& out) {
  const std::size_t v = m.base_vocab(), d = m.dim();
  out.resize(v);
  for (std::size_t k = 0; k < v; ++k) {
    const Real* w = m.out_w.data() + k * d;
    double acc = static_cast<double>(m.out_b[k]);
    for (std::size_t j = 0; j < d; ++j) acc += static_cast<double>(w[j]) * ctx[j];
    out[k] = acc;
  }
}

inline double log_sum_exp(std::span<const double> z) {
  double mx = *std::max_element(z.begin(), z.end());
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double v : z) s += std::exp(v - mx);
  return mx + std::log(s);
}

}  // namespace detail

/// Next-token cross-entropy over x' = seq, where the first `prefix_len`
/// tokens are the control prefix. Context i predicts seq[i+1] for
/// i in [prefix_len, n-2]. When `grad` is given, adds weight * dLoss/dparam.
template <class Real>
SequenceLoss sequence_loss(const ToyModel<Real>& m, std::span<const TokenId> seq, std::size_t prefix_len,
                           Gradients* grad = nullptr, double weight = 1.0) {
  const std::size_t n = seq.size(), d = m.dim(), v = m.base_vocab();
  if (prefix_len > n) throw ValidationError("toytrain", "prefix longer than the sequence");
  for (std::size_t i = 0; i < n; ++i) {
    detail::check_token(m, seq[i]);
    // Prefix positions hold control tokens and nothing after them does, so
    // no control token can ever be a prediction target.
    if (m.is_control(seq[i]) != (i < prefix_len)) {
      throw ValidationError("toytrain", i < prefix_len ? "prefix position holds a base token"
                                                       : "control token at a prediction target position");
    }
  }
  SequenceLoss out;
  if (n < prefix_len + 2) return out;

  std::vector<double> sum(d, 0.0), ctx(d), z, dctx;
  std::vector<double> back;  // per-position d(loss)/d(context) / (i+1)
  if (grad) back.assign(n * d, 0.0);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    auto r = m.row(seq[i]);
    for (std::size_t j = 0; j < d; ++j) sum[j] += static_cast<double>(r[j]);
    if (i < prefix_len) continue;
    const double inv = 1.0 / static_cast<double>(i + 1);
    for (std::size_t j = 0; j < d; ++j) ctx[j] = sum[j] * inv;
    detail::logits(m, ctx, z);
    const TokenId target = seq[i + 1];
    const double lse = detail::log_sum_exp(z);
    out.total += lse - z[target];
    ++out.targets;
    if (!grad) continue;
    dctx.assign(d, 0.0);
    for (std::size_t k = 0; k < v; ++k) {
      double p = std::exp(z[k] - lse);
      if (k == target) p -= 1.0;
      p *= weight;
      grad->out_b[k] += p;
      double* gw = grad->out_w.data() + k * d;
      const Real* w = m.out_w.data() + k * d;
      for (std::size_t j = 0; j < d; ++j) {
        gw[j] += p * ctx[j];
        dctx[j] += p * static_cast<double>(w[j]);
      }
    }
    for (std::size_t j = 0; j < d; ++j) back[i * d + j] = dctx[j] * inv;
  }
  if (grad) {
    // Row seq[i] feeds every context at or after i.
    std::vector<double> acc(d, 0.0);
    for (std::size_t i = n - 1; i-- > 0;) {
      for (std::size_t j = 0; j < d; ++j) acc[j] += back[i * d + j];
      double* ge = grad->embedding.data() + std::size_t{seq[i]} * d;
      for (std::size_t j = 0; j < d; ++j) ge[j] += acc[j];
    }
  }
  return out;
}

template <class Real>
SequenceLoss sequence_loss(const ToyModel<Real>& m, const std::vector<TokenId>& seq, std::size_t prefix_len,
                           Gradients* grad = nullptr, double weight = 1.0) {
  return sequence_loss(m, std::span<const TokenId>(seq), prefix_len, grad, weight);
}

/// Logits for the context ending at position `pos` of `seq`.
template <class Real>
std::vector<double> predict_logits(const ToyModel<Real>& m, std::span<const TokenId> seq, std::size_t pos) {
  if (pos >= seq.size()) throw ValidationError("toytrain", "prediction position outside the sequence");
  std::vector<double> ctx(m.dim(), 0.0), z;
  for (std::size_t i = 0; i <= pos; ++i) {
    detail::check_token(m, seq[i]);
    auto r = m.row(seq[i]);
    for (std::size_t j = 0; j < ctx.size(); ++j) ctx[j] += static_cast<double>(r[j]);
  }
  for (auto& c : ctx) c /= static_cast<double>(pos + 1);
  detail::logits(m, ctx, z);
  return z;
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamWParams {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

/// Decoupled weight decay on embedding and output weights; the bias is not
/// decayed.
class AdamW {
 public:
  AdamW() = default;
  template <class Real>
  AdamW(const ToyModel<Real>& m, AdamWParams p)
      : p_(p), m_(Gradients(m)), v_(Gradients(m)) {}

  std::size_t steps() const { return t_; }

  template <class Real>
  void step(ToyModel<Real>& model, const Gradients& g, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(p_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(p_.beta2, static_cast<double>(t_));
    update(model.embedding, g.embedding, m_->embedding, v_->embedding, lr, c1, c2, true);
    update(model.out_w, g.out_w, m_->out_w, v_->out_w, lr, c1, c2, true);
    update(model.out_b, g.out_b, m_->out_b, v_->out_b, lr, c1, c2, false);
  }

 private:
  template <class Real>
  void update(std::vector<Real>& w, const std::vector<double>& g, std::vector<double>& m, std::vector<double>& v,
              double lr, double c1, double c2, bool decay) const {
    if (lr == 0.0) {
      // Moments still advance; parameters stay bit-identical.
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = p_.beta1 * m[i] + (1.0 - p_.beta1) * g[i];
        v[i] = p_.beta2 * v[i] + (1.0 - p_.beta2) * g[i] * g[i];
      }
      return;
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = p_.beta1 * m[i] + (1.0 - p_.beta1) * g[i];
      v[i] = p_.beta2 * v[i] + (1.0 - p_.beta2) * g[i] * g[i];
      double x = static_cast<double>(w[i]);
      double upd = (m[i] / c1) / (std::sqrt(v[i] / c2) + p_.eps);
      if (decay) upd += p_.weight_decay * x;
      w[i] = static_cast<Real>(x - lr * upd);
    }
  }

  AdamWParams p_;
  std::optional<Gradients> m_, v_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Configuration

enum class PrefixRefresh { Recompute, Frozen };
enum class LrSchedule { Constant, Linear };

struct TrainConfig {
  double learning_rate = 0.01;
  std::size_t epochs = 8;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  AdamWParams optimizer;
  double grad_clip = 0.0;  // 0 disables clipping
  std::size_t warmup_steps = 0;
  LrSchedule schedule = LrSchedule::Constant;
  std::size_t max_steps = 0;  // 0 = no cap

  bool ecr = false;
  std::uint32_t bins = 8;
  std::vector<Factor> factors{Factor::T, Factor::L};
  EncodeMode mode = EncodeMode::Global;
  std::size_t topk = 1;
  bool topk_per_factor = true;
  PrefixRefresh prefix = PrefixRefresh::Recompute;

  std::string precision = "float32";  // the only supported width
  double init_scale = 0.1;
  bool init_from_teacher = true;  // seed base rows from the token table when one exists
  double holdout = 0.2;
  double divergence_threshold = 1e3;
  std::size_t divergence_patience = 5;

  // Synthetic corpus, used when no corpus is supplied.
  std::size_t synthetic_n_per_lang = 100;
  std::size_t synthetic_labels = 4;
  std::size_t synthetic_dim = 32;

  EncodeOptions encode_options() const {
    EncodeOptions o;
    o.bins = bins;
    o.mode = mode;
    o.k = topk;
    o.per_factor = topk_per_factor;
    return o;
  }

  SyntheticParams synthetic() const {
    SyntheticParams p;
    p.seed = seed;
    p.n_per_lang = synthetic_n_per_lang;
    p.labels_per_factor = synthetic_labels;
    p.dim = synthetic_dim;
    return p;
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline bool parse_switch(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw ValidationError("toytrain", key + ": expected on|off, got '" + v + "'");
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  if constexpr (std::is_floating_point_v<T>) {
    std::size_t used = 0;
    try {
      out = static_cast<T>(std::stod(v, &used));
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size() || v.empty()) throw ValidationError("toytrain", key + ": '" + v + "' is not a number");
  } else {
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size()) {
      throw ValidationError("toytrain", key + ": '" + v + "' is not a non-negative integer");
    }
  }
  return out;
}

}  // namespace detail

/// Applies one `key = value` setting; unknown keys and bad values throw.
inline void set_config_value(TrainConfig& c, const std::string& key, const std::string& value) {
  using detail::parse_number;
  using detail::parse_switch;
  if (key == "learning_rate") c.learning_rate = parse_number<double>(key, value);
  else if (key == "epochs") c.epochs = parse_number<std::size_t>(key, value);
  else if (key == "batch_size") c.batch_size = parse_number<std::size_t>(key, value);
  else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "beta1") c.optimizer.beta1 = parse_number<double>(key, value);
  else if (key == "beta2") c.optimizer.beta2 = parse_number<double>(key, value);
  else if (key == "eps") c.optimizer.eps = parse_number<double>(key, value);
  else if (key == "weight_decay") c.optimizer.weight_decay = parse_number<double>(key, value);
  else if (key == "grad_clip") c.grad_clip = parse_number<double>(key, value);
  else if (key == "warmup_steps") c.warmup_steps = parse_number<std::size_t>(key, value);
  else if (key == "lr_schedule") {
    if (value == "constant") c.schedule = LrSchedule::Constant;
    else if (value == "linear") c.schedule = LrSchedule::Linear;
    else throw ValidationError("toytrain", "lr_schedule: expected constant|linear, got '" + value + "'");
  } else if (key == "max_steps") c.max_steps = parse_number<std::size_t>(key, value);
  else if (key == "ecr") c.ecr = parse_switch(key, value);
  else if (key == "bins") c.bins = parse_number<std::uint32_t>(key, value);
  else if (key == "factors") c.factors = parse_factor_list(value);
  else if (key == "mode") {
    if (value == "global") c.mode = EncodeMode::Global;
    else if (value == "retrieval") c.mode = EncodeMode::Retrieval;
    else throw ValidationError("toytrain", "mode: expected global|retrieval, got '" + value + "'");
  } else if (key == "topk") c.topk = parse_number<std::size_t>(key, value);
  else if (key == "topk_scope") {
    if (value == "factor") c.topk_per_factor = true;
    else if (value == "global") c.topk_per_factor = false;
    else throw ValidationError("toytrain", "topk_scope: expected factor|global, got '" + value + "'");
  } else if (key == "prefix") {
    if (value == "recompute") c.prefix = PrefixRefresh::Recompute;
    else if (value == "frozen") c.prefix = PrefixRefresh::Frozen;
    else throw ValidationError("toytrain", "prefix: expected recompute|frozen, got '" + value + "'");
  } else if (key == "precision") {
    if (value != "float32") throw ValidationError("toytrain", "precision: only float32 is supported");
    c.precision = value;
  } else if (key == "init_scale") c.init_scale = parse_number<double>(key, value);
  else if (key == "init_from_teacher") c.init_from_teacher = parse_switch(key, value);
  else if (key == "holdout") c.holdout = parse_number<double>(key, value);
  else if (key == "divergence_threshold") c.divergence_threshold = parse_number<double>(key, value);
  else if (key == "divergence_patience") c.divergence_patience = parse_number<std::size_t>(key, value);
  else if (key == "synthetic_n_per_lang") c.synthetic_n_per_lang = parse_number<std::size_t>(key, value);
  else if (key == "synthetic_labels") c.synthetic_labels = parse_number<std::size_t>(key, value);
  else if (key == "synthetic_dim") c.synthetic_dim = parse_number<std::size_t>(key, value);
  else throw ValidationError("toytrain", "unknown config key '" + key + "'");
}

inline void validate(const TrainConfig& c) {
  auto bad = [](const std::string& m) { throw ValidationError("toytrain", m); };
  if (!(c.learning_rate >= 0.0) || !std::isfinite(c.learning_rate)) bad("learning_rate must be finite and >= 0");
  if (c.epochs == 0) bad("epochs must be >= 1");
  if (c.batch_size == 0) bad("batch_size must be >= 1");
  if (!(c.grad_clip >= 0.0)) bad("grad_clip must be >= 0 (0 disables)");
  if (c.bins < 2) bad("bins must be >= 2");
  if (c.topk == 0) bad("topk must be >= 1");
  if (c.ecr && c.factors.empty()) bad("ecr is on but the factor selection is empty");
  if (!(c.holdout > 0.0 && c.holdout < 1.0)) bad("holdout must lie in (0, 1)");
  if (c.divergence_patience == 0) bad("divergence_patience must be >= 1");
  if (c.optimizer.beta1 < 0.0 || c.optimizer.beta1 >= 1.0 || c.optimizer.beta2 < 0.0 || c.optimizer.beta2 >= 1.0) {
    bad("optimizer betas must lie in [0, 1)");
  }
}

inline TrainConfig parse_config(std::istream& in, TrainConfig base = {}) {
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    auto t = detail::trim(line);
    if (t.empty()) continue;
    auto eq = t.find('=');
    if (eq == std::string::npos) throw ParseError("toytrain", no, "expected key = value");
    try {
      set_config_value(base, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
    } catch (const ValidationError& e) {
      throw ParseError("toytrain", no, e.what());
    }
  }
  return base;
}

inline TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw Error("toytrain", "cannot open config '" + path.string() + "'");
  return parse_config(in, std::move(base));
}

inline std::string config_text(const TrainConfig& c) {
  std::ostringstream o;
  auto num = [](double v) { return format_value(v); };
  o << "learning_rate = " << num(c.learning_rate) << "\n"
    << "epochs = " << c.epochs << "\n"
    << "batch_size = " << c.batch_size << "\n"
    << "seed = " << c.seed << "\n"
    << "beta1 = " << num(c.optimizer.beta1) << "\n"
    << "beta2 = " << num(c.optimizer.beta2) << "\n"
    << "eps = " << num(c.optimizer.eps) << "\n"
    << "weight_decay = " << num(c.optimizer.weight_decay) << "\n"
    << "grad_clip = " << num(c.grad_clip) << "\n"
    << "warmup_steps = " << c.warmup_steps << "\n"
    << "lr_schedule = " << (c.schedule == LrSchedule::Linear ? "linear" : "constant") << "\n"
    << "max_steps = " << c.max_steps << "\n"
    << "ecr = " << (c.ecr ? "on" : "off") << "\n"
    << "bins = " << c.bins << "\n"
    << "factors = " << factor_list_string(c.factors) << "\n"
    << "mode = " << (c.mode == EncodeMode::Global ? "global" : "retrieval") << "\n"
    << "topk = " << c.topk << "\n"
    << "topk_scope = " << (c.topk_per_factor ? "factor" : "global") << "\n"
    << "prefix = " << (c.prefix == PrefixRefresh::Frozen ? "frozen" : "recompute") << "\n"
    << "precision = " << c.precision << "\n"
    << "init_scale = " << num(c.init_scale) << "\n"
    << "init_from_teacher = " << (c.init_from_teacher ? "on" : "off") << "\n"
    << "holdout = " << num(c.holdout) << "\n"
    << "divergence_threshold = " << num(c.divergence_threshold) << "\n"
    << "divergence_patience = " << c.divergence_patience << "\n"
    << "synthetic_n_per_lang = " << c.synthetic_n_per_lang << "\n"
    << "synthetic_labels = " << c.synthetic_labels << "\n"
    << "synthetic_dim = " << c.synthetic_dim << "\n";
  return o.str();
}

// ---------------------------------------------------------------------------
// Conditioning

/// Turns a sample into x' for a model snapshot. Holds the anchors by const
/// reference: nothing in training can write to them.
class Conditioner {
 public:
  Conditioner() = default;
  Conditioner(const AnchorSet& anchors, EncodeOptions opt) : anchors_(&anchors), opt_(opt) {}

  bool enabled() const { return anchors_ != nullptr; }
  const AnchorSet* anchors() const { return anchors_; }
  std::size_t control_vocab() const { return anchors_ ? anchors_->size() * opt_.bins : 0; }

  /// Control token ids (before the base-vocabulary offset) for one sample.
  template <class Real>
  std::vector<TokenId> prefix(const ToyModel<Real>& m, const ToySample& s) const {
    if (!anchors_) return {};
    auto h = embed_sequence(m, s.query);
    return encode(h, *anchors_, opt_).tokens;
  }

  /// x' with control ids shifted past the base vocabulary.
  template <class Real>
  std::vector<TokenId> input(const ToyModel<Real>& m, const ToySample& s,
                             const std::vector<TokenId>* frozen = nullptr) const {
    ControlPrefix p;
    p.tokens = frozen ? *frozen : prefix(m, s);
    auto x = s.tokens();
    return build_input(p, x, static_cast<TokenId>(m.base_vocab()));
  }

 private:
  const AnchorSet* anchors_ = nullptr;
  EncodeOptions opt_;
};

/// Prefixes keyed by sample id, for the frozen-prefix mode.
using PrefixCache = std::unordered_map<std::string, std::vector<TokenId>>;

template <class Real>
PrefixCache freeze_prefixes(const ToyModel<Real>& m, const Conditioner& cond, std::span<const ToySample> samples) {
  PrefixCache cache;
  if (!cond.enabled()) return cache;
  for (const auto& s : samples) cache.emplace(s.id, cond.prefix(m, s));
  return cache;
}

namespace detail {
inline const std::vector<TokenId>* cached(const PrefixCache* cache, const std::string& id) {
  if (!cache) return nullptr;
  auto it = cache->find(id);
  if (it == cache->end()) throw ValidationError("toytrain", "no frozen prefix for sample '" + id + "'");
  return &it->second;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Training step

struct StepResult {
  double loss = 0.0;  // mean token NLL over the batch
  std::size_t targets = 0;
  double grad_norm = 0.0;  // before clipping
};

template <class Real>
StepResult train_step(ToyModel<Real>& m, AdamW& opt, std::span<const ToySample> batch, const Conditioner& cond,
                      const TrainConfig& cfg, double lr, const PrefixCache* frozen = nullptr) {
  if (batch.empty()) throw ValidationError("toytrain", "empty batch");
  std::vector<std::vector<TokenId>> inputs;
  std::vector<std::size_t> prefix_len;
  std::size_t total = 0;
  for (const auto& s : batch) {
    inputs.push_back(cond.input(m, s, detail::cached(frozen, s.id)));
    prefix_len.push_back(inputs.back().size() - s.query.size() - s.answer.size());
    total += s.query.size() + s.answer.size() - 1;
  }
  if (total == 0) throw ValidationError("toytrain", "batch has no prediction targets");
  Gradients g(m);
  StepResult r;
  const double w = 1.0 / static_cast<double>(total);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto l = sequence_loss(m, inputs[i], prefix_len[i], &g, w);
    r.loss += l.total;
    r.targets += l.targets;
  }
  if (r.targets != total) throw ValidationError("toytrain", "target count differs from the unconditioned input");
  r.loss /= static_cast<double>(total);
  r.grad_norm = g.norm();
  if (cfg.grad_clip > 0.0 && r.grad_norm > cfg.grad_clip) g.scale(cfg.grad_clip / r.grad_norm);
  opt.step(m, g, lr);
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation

struct NllReport {
  std::vector<std::pair<std::string, double>> per_language;  // En, Zh, Hi order
  double overall = 0.0;
  std::size_t tokens = 0;
};

/// Mean token NLL per language, on the same x' pipeline as training.
/// `languages` lists buckets that must be non-empty; default: those present.
template <class Real>
NllReport nll_eval(const ToyModel<Real>& m, std::span<const ToySample> data, const Conditioner& cond = {},
                   const PrefixCache* frozen = nullptr, std::span<const Lang> languages = {}) {
  if (data.empty()) throw ValidationError("toytrain", "empty evaluation set");
  std::array<double, 3> sum{};
  std::array<std::size_t, 3> cnt{};
  for (const auto& s : data) {
    auto x = cond.input(m, s, detail::cached(frozen, s.id));
    auto l = sequence_loss(m, x, x.size() - s.query.size() - s.answer.size());
    sum[static_cast<int>(s.lang)] += l.total;
    cnt[static_cast<int>(s.lang)] += l.targets;
  }
  for (auto l : languages) {
    if (cnt[static_cast<int>(l)] == 0) {
      throw ValidationError("toytrain", "empty language bucket '" + std::string(lang_code(l)) + "'");
    }
  }
  NllReport r;
  double all = 0.0;
  for (auto l : kLanguages) {
    auto i = static_cast<int>(l);
    if (cnt[i] == 0) continue;
    r.per_language.emplace_back(std::string(lang_code(l)), sum[i] / static_cast<double>(cnt[i]));
    all += sum[i];
    r.tokens += cnt[i];
  }
  if (r.tokens == 0) throw ValidationError("toytrain", "evaluation set has no prediction targets");
  r.overall = all / static_cast<double>(r.tokens);
  return r;
}

/// Fraction of samples whose argmax prediction at the first answer position
/// equals the gold token there. Ties go to the lower token id.
template <class Real>
double task_accuracy(const ToyModel<Real>& m, std::span<const ToySample> data, const Conditioner& cond = {},
                     const PrefixCache* frozen = nullptr) {
  if (data.empty()) throw ValidationError("toytrain", "empty evaluation set");
  std::size_t hit = 0;
  for (const auto& s : data) {
    if (s.answer.empty()) throw ValidationError("toytrain", "sample '" + s.id + "' has no gold label position");
    auto x = cond.input(m, s, detail::cached(frozen, s.id));
    const std::size_t gold_pos = x.size() - s.answer.size();
    auto z = predict_logits(m, std::span<const TokenId>(x), gold_pos - 1);
    auto best = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
    if (best == s.answer.front()) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Experiment harness

/// Per-factor top-1 anchors over every factor except Language, whose anchor
/// differs between the variants of a triplet by definition.
inline std::vector<std::size_t> crosslingual_subset(const AffinityVector& aff, const AnchorSet& anchors) {
  std::vector<std::size_t> out;
  for (auto k : topk_per_factor(aff, anchors, 1)) {
    if (anchors.factor_of(k) != Factor::L) out.push_back(k);
  }
  if (out.empty()) throw ValidationError("geometry", "cross-lingual selection needs a factor other than L");
  return out;
}

/// Corpus, teacher record embeddings and an optional teacher token table.
struct ToyData {
  Corpus corpus;
  EmbeddingMatrix teacher;
  std::optional<EmbeddingMatrix> token_table;
  std::size_t base_vocab = 0;

  static ToyData from(SyntheticData s) {
    ToyData d;
    d.corpus = std::move(s.corpus);
    d.teacher = std::move(s.teacher);
    d.token_table = std::move(s.token_table);
    d.base_vocab = s.base_vocab;
    return d;
  }
};

/// Deterministic train/held-out split of records.
struct Split {
  std::vector<std::size_t> train, test;  // record indices
};

inline Split split_records(std::size_t n, double holdout, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  auto n_test = static_cast<std::size_t>(std::llround(holdout * static_cast<double>(n)));
  n_test = std::clamp<std::size_t>(n_test, 1, n > 1 ? n - 1 : 1);
  Split s;
  s.test.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
  s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  std::sort(s.test.begin(), s.test.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

struct EpochSnapshot {
  std::size_t epoch = 0;  // 0 = before training
  std::size_t step = 0;
  NllReport nll;
  double task_accuracy = 0.0;
  GeometryReport geometry;  // held-out student h, manifolds = task labels
  PurityReport purity;      // held-out student h, by language
  double teacher_similarity = 0.0;
  ConsistencyRate retrieval;     // teacher vs student top anchors
  ConsistencyRate crosslingual;  // per-factor top-1 subsets of En/Zh/Hi queries
};

struct ExperimentReport {
  std::string name;
  TrainConfig config;
  std::vector<double> loss_curve;
  std::vector<EpochSnapshot> epochs;
  bool diverged = false;
  std::optional<std::size_t> diverged_at;  // step index
  std::size_t steps = 0;
  std::uint64_t anchor_checksum_before = 0;
  std::uint64_t anchor_checksum_after = 0;

  const EpochSnapshot& final_snapshot() const { return epochs.back(); }
};

/// Everything the arms of one experiment share.
class Experiment {
 public:
  Experiment(ToyData data, const TrainConfig& base) : data_(std::move(data)) {
    validate(base);
    split_ = split_records(data_.corpus.records.size(), base.holdout, base.seed + 11);
    auto samples = make_samples(data_.corpus, data_.base_vocab);
    for (auto i : split_.train) train_.push_back(samples[i]);
    for (auto i : split_.test) test_.push_back(samples[i]);

    // Metric anchors: label centroids of the training rows, all labelled factors.
    auto rows = data_.teacher.id_index();
    EmbeddingMatrix tt(split_.train.size(), data_.teacher.d);
    for (std::size_t i = 0; i < split_.train.size(); ++i) {
      const auto& id = data_.corpus.records[split_.train[i]].dialog_id;
      auto it = rows.find(id);
      if (it == rows.end()) throw ValidationError("toytrain", "record '" + id + "' has no teacher embedding");
      std::copy_n(data_.teacher.row(it->second).begin(), tt.d, tt.mutable_row(i).begin());
      tt.ids[i] = id;
    }
    const std::array<Factor, 4> all{Factor::T, Factor::L, Factor::E, Factor::I};
    AnchorBuildParams ap;
    ap.mode = DeriveMode::Label;
    ap.seed = base.seed;
    anchors_.emplace(build_anchor_set(tt, data_.corpus, all, ap));

    teacher_test_ = EmbeddingMatrix(test_.size(), data_.teacher.d);
    for (std::size_t i = 0; i < test_.size(); ++i) {
      auto it = rows.find(test_[i].id);
      if (it == rows.end()) throw ValidationError("toytrain", "record '" + test_[i].id + "' has no teacher embedding");
      std::copy_n(data_.teacher.row(it->second).begin(), teacher_test_.d, teacher_test_.mutable_row(i).begin());
      teacher_test_.ids[i] = test_[i].id;
      language_of_[test_[i].id] = std::string(lang_code(test_[i].lang));
    }
  }

  const ToyData& data() const { return data_; }
  const AnchorSet& anchors() const { return *anchors_; }
  std::span<const ToySample> train() const { return train_; }
  std::span<const ToySample> test() const { return test_; }

  /// Trains one arm from scratch. Divergence is recorded, never raised.
  ExperimentReport run(const TrainConfig& cfg, std::string name) const {
    validate(cfg);
    ExperimentReport rep;
    rep.name = std::move(name);
    rep.config = cfg;

    std::optional<AnchorSet> arm_anchors;
    Conditioner cond;
    if (cfg.ecr) {
      arm_anchors.emplace(anchors_->select(cfg.factors));
      cond = Conditioner(*arm_anchors, cfg.encode_options());
      rep.anchor_checksum_before = arm_anchors->checksum();
    }

    ToyModel<float> model(data_.base_vocab, cond.control_vocab(), data_.teacher.d, cfg.seed, cfg.init_scale);
    if (cfg.init_from_teacher && data_.token_table) model.init_base_rows(*data_.token_table);
    AdamW opt(model, cfg.optimizer);

    std::optional<PrefixCache> frozen;
    if (cfg.ecr && cfg.prefix == PrefixRefresh::Frozen) {
      frozen = freeze_prefixes(model, cond, train_);
      auto more = freeze_prefixes(model, cond, test_);
      frozen->insert(more.begin(), more.end());
    }
    const PrefixCache* fz = frozen ? &*frozen : nullptr;

    const std::size_t per_epoch = (train_.size() + cfg.batch_size - 1) / cfg.batch_size;
    std::size_t planned = per_epoch * cfg.epochs;
    if (cfg.max_steps) planned = std::min(planned, cfg.max_steps);

    rep.epochs.push_back(snapshot(model, cond, fz, 0, 0));
    std::mt19937_64 order_rng(cfg.seed + 1);
    std::vector<std::size_t> order(train_.size());
    std::size_t step = 0, bad = 0;
    for (std::size_t epoch = 1; epoch <= cfg.epochs && step < planned && !rep.diverged; ++epoch) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), order_rng);
      for (std::size_t b = 0; b < per_epoch && step < planned; ++b) {
        std::vector<ToySample> batch;
        for (std::size_t i = b * cfg.batch_size; i < std::min(train_.size(), (b + 1) * cfg.batch_size); ++i) {
          batch.push_back(train_[order[i]]);
        }
        auto r = train_step(model, opt, std::span<const ToySample>(batch), cond, cfg, lr_at(cfg, step, planned), fz);
        rep.loss_curve.push_back(r.loss);
        ++step;
        if (!std::isfinite(r.loss) || r.loss > cfg.divergence_threshold) {
          if (++bad >= cfg.divergence_patience) {
            rep.diverged = true;
            rep.diverged_at = step - 1;
            break;
          }
        } else {
          bad = 0;
        }
      }
      if (!rep.diverged) rep.epochs.push_back(snapshot(model, cond, fz, epoch, step));
    }
    rep.steps = step;
    if (arm_anchors) rep.anchor_checksum_after = arm_anchors->checksum();
    return rep;
  }

 private:
  static double lr_at(const TrainConfig& cfg, std::size_t step, std::size_t total) {
    double lr = cfg.learning_rate;
    if (cfg.warmup_steps && step < cfg.warmup_steps) {
      return lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
    }
    if (cfg.schedule == LrSchedule::Linear && total > cfg.warmup_steps) {
      double t = static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(total - cfg.warmup_steps);
      lr *= std::max(0.0, 1.0 - t);
    }
    return lr;
  }

  EpochSnapshot snapshot(const ToyModel<float>& m, const Conditioner& cond, const PrefixCache* fz,
                         std::size_t epoch, std::size_t step) const {
    EpochSnapshot s;
    s.epoch = epoch;
    s.step = step;
    s.nll = nll_eval(m, std::span<const ToySample>(test_), cond, fz);
    s.task_accuracy = task_accuracy(m, std::span<const ToySample>(test_), cond, fz);

    EmbeddingMatrix h(test_.size(), m.dim());
    std::vector<std::string> tasks, langs;
    std::vector<Selection> teacher_sel, student_sel;
    std::vector<TripletSelection> triplets;
    auto by_id = [&](const std::string& id) -> const CorpusRecord& {
      return data_.corpus.records[*data_.corpus.find(id)];
    };
    for (std::size_t i = 0; i < test_.size(); ++i) {
      const auto& smp = test_[i];
      auto v = embed_sequence(m, smp.query);
      std::copy(v.begin(), v.end(), h.mutable_row(i).begin());
      h.ids[i] = smp.id;
      const auto& rec = by_id(smp.id);
      tasks.push_back(rec.task);
      langs.push_back(std::string(lang_code(smp.lang)));
      teacher_sel.push_back({smp.id, topk_indices(project(teacher_test_.row(i), *anchors_).values, 1)});
      student_sel.push_back({smp.id, topk_indices(project(v, *anchors_).values, 1)});
      TripletSelection t;
      t.id = smp.id;
      for (auto l : kLanguages) {
        auto q = tokenize(rec.query(l), data_.base_vocab);
        auto hv = embed_sequence(m, q);
        t.subsets[static_cast<int>(l)] = crosslingual_subset(project(hv, *anchors_), *anchors_);
      }
      triplets.push_back(std::move(t));
    }
    h.validate();
    s.geometry = geometry_report(h, ManifoldPartition::from_labels(tasks, "task"));
    std::set<std::string> distinct(langs.begin(), langs.end());
    if (distinct.size() >= 2) s.purity = purity(h, langs);
    s.teacher_similarity = teacher_similarity(teacher_test_, h, language_of_).overall;
    s.retrieval = retrieval_consistency(teacher_sel, student_sel);
    s.crosslingual = crosslingual_consistency(triplets);
    return s;
  }

  ToyData data_;
  Split split_;
  std::vector<ToySample> train_, test_;
  std::optional<AnchorSet> anchors_;
  EmbeddingMatrix teacher_test_;
  std::unordered_map<std::string, std::string> language_of_;
};

struct PairedReport {
  ExperimentReport baseline;
  ExperimentReport ecr;
};

/// Baseline and conditioned arms sharing seed, data order and every
/// hyperparameter except the conditioning settings in `ecr_cfg`.
inline PairedReport run_experiment(const Experiment& exp, const TrainConfig& ecr_cfg) {
  TrainConfig base = ecr_cfg;
  base.ecr = false;
  TrainConfig cond = ecr_cfg;
  cond.ecr = true;
  return {exp.run(base, "baseline"), exp.run(cond, "ecr:" + factor_list_string(cond.factors))};
}

/// Factor subsets of the ablation axis: none, L, E, I, L+E+I.
inline std::vector<std::vector<Factor>> ablation_subsets() {
  return {{}, {Factor::L}, {Factor::E}, {Factor::I}, {Factor::L, Factor::E, Factor::I}};
}

inline std::vector<ExperimentReport> run_ablation(const Experiment& exp, const TrainConfig& cfg,
                                                  const std::vector<std::vector<Factor>>& subsets = ablation_subsets()) {
  std::vector<ExperimentReport> out;
  for (const auto& s : subsets) {
    TrainConfig c = cfg;
    c.ecr = !s.empty();
    c.factors = s;
    out.push_back(exp.run(c, factor_list_string(s)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report output

inline std::string table_header() {
  return "arm\tmanifolds\tnll\tconsistency_sim\tspread\tcrosslingual_exact\tcrosslingual_jaccard\t"
         "task_accuracy\tsteps\tdiverged\n";
}

inline std::string table_row(const ExperimentReport& r) {
  const auto& s = r.final_snapshot();
  std::ostringstream o;
  o << r.name << '\t' << (r.config.ecr ? factor_list_string(r.config.factors) : std::string("none")) << '\t'
    << format_value(s.nll.overall) << '\t' << format_value(s.teacher_similarity) << '\t'
    << format_value(s.geometry.spread) << '\t' << format_value(s.crosslingual.exact) << '\t'
    << format_value(s.crosslingual.jaccard) << '\t' << format_value(s.task_accuracy) << '\t' << r.steps << '\t'
    << (r.diverged ? "yes" : "no") << '\n';
  return o.str();
}

inline std::string table(std::span<const ExperimentReport> reports) {
  std::string out = table_header();
  for (const auto& r : reports) out += table_row(r);
  return out;
}

inline std::string to_text(const ExperimentReport& r) {
  std::ostringstream o;
  char buf[64];
  o << "== arm " << r.name << "\n";
  o << "steps: " << r.steps << "\n";
  o << "diverged: " << (r.diverged ? "yes" : "no") << "\n";
  if (r.diverged_at) o << "diverged_at_step: " << *r.diverged_at << "\n";
  if (r.config.ecr) {
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(r.anchor_checksum_before));
    o << "anchor_checksum_before: " << buf << "\n";
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(r.anchor_checksum_after));
    o << "anchor_checksum_after: " << buf << "\n";
  }
  for (const auto& s : r.epochs) {
    o << "epoch " << s.epoch << " step " << s.step << ": nll " << format_value(s.nll.overall);
    for (const auto& [lang, v] : s.nll.per_language) o << " " << lang << "=" << format_value(v);
    o << " | acc " << format_value(s.task_accuracy) << " | intra " << format_value(s.geometry.intra) << " inter "
      << format_value(s.geometry.inter) << " ratio " << format_value(s.geometry.ratio) << " spread "
      << format_value(s.geometry.spread) << " | purity " << format_value(s.purity.overall) << " | sim "
      << format_value(s.teacher_similarity) << " | retrieval " << format_value(s.retrieval.exact) << " | xling "
      << format_value(s.crosslingual.exact) << "/" << format_value(s.crosslingual.jaccard) << "\n";
  }
  o << "loss_curve:";
  for (std::size_t i = 0; i < r.loss_curve.size(); ++i) {
    std::snprintf(buf, sizeof buf, " %.17g", r.loss_curve[i]);
    o << buf;
  }
  o << "\n";
  return o.str();
}

/// Full report: header with seed and config, one block per arm, final table.
inline std::string report_text(std::span<const ExperimentReport> arms, const std::string& title) {
  std::ostringstream o;
  o << "# " << title << "\n";
  if (!arms.empty()) {
    o << "# seed: " << arms.front().config.seed << "\n";
    std::istringstream cfg(config_text(arms.front().config));
    std::string line;
    while (std::getline(cfg, line)) o << "# config " << line << "\n";
  }
  for (const auto& a : arms) o << to_text(a);
  o << "== table\n" << table(arms);
  return o.str();
}

}  // namespace ecr
