#pragma once

// Affinity projection, B-bin quantization and control-token prefixes.
//
// Pipeline for one embedding h:
//   affinity = project(h, anchors)           K cosines against unit anchors
//   code     = quantize(affinity, B)         K bins in [0, B)
//   prefix   = emit_tokens(code, anchors)    one token per (factor, anchor, bin)
//   input    = build_input(prefix, x)        prefix tokens followed by x
//
// Token ids: anchor k (global index, canonical factor order) in bin b has id
// k * B + b, so the control vocabulary has K * B entries. The text rendering
// is "<F{local anchor}:{bin}>", e.g. "<L0:3>".

#include <algorithm>
#include <charconv>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ecr/anchors.hpp"
#include "ecr/error.hpp"
#include "ecr/vector_ops.hpp"

namespace ecr {

using TokenId = std::uint32_t;

struct AffinityVector {
  std::vector<double> values;
  std::uint64_t anchor_set = 0;  // AnchorSet::checksum() of the set used
};

struct ControlCode {
  std::vector<std::uint32_t> bins;
  std::uint32_t num_bins = 0;

  bool operator==(const ControlCode&) const = default;
};

struct ControlToken {
  Factor factor = Factor::T;
  std::uint32_t anchor = 0;  // index within the factor group
  std::uint32_t bin = 0;

  auto operator<=>(const ControlToken&) const = default;
};

struct ControlPrefix {
  std::vector<TokenId> tokens;
  std::string rendering;

  bool operator==(const ControlPrefix&) const = default;
};

/// cos(h/|h|, mu_k/|mu_k|) for every anchor. O(K d).
template <std::floating_point T>
AffinityVector project(std::span<const T> h, const AnchorSet& anchors) {
  if (h.size() != anchors.dim()) {
    throw DimensionError("ecr_codec", "embedding has d=" + std::to_string(h.size()) +
                                          ", anchors have d=" + std::to_string(anchors.dim()));
  }
  double n = l2_norm(h);
  if (!(n > 0.0) || !std::isfinite(n)) {
    throw DomainError("ecr_codec", "cannot project an embedding with norm " + std::to_string(n));
  }
  AffinityVector out;
  out.anchor_set = anchors.checksum();
  out.values.resize(anchors.size());
  for (std::size_t k = 0; k < anchors.size(); ++k) {
    out.values[k] = dot(h, anchors.unit_anchor(k)) / n;
  }
  return out;
}

template <std::floating_point T>
AffinityVector project(const std::vector<T>& h, const AnchorSet& anchors) {
  return project(std::span<const T>(h), anchors);
}

/// Maps a cosine in [-1, 1] to a bin. Equal-width bins by default; a quantile
/// scheme fitted on sample affinities is available as an alternative.
class Quantizer {
 public:
  static Quantizer equal_width(std::uint32_t bins) {
    check_bins(bins);
    Quantizer q;
    q.bins_ = bins;
    return q;
  }

  /// Interior edges at the i/B sample quantiles. Bins may be unreachable when
  /// the sample has many ties.
  static Quantizer quantile(std::uint32_t bins, std::span<const double> samples) {
    check_bins(bins);
    if (samples.empty()) throw DomainError("ecr_codec", "quantile quantizer needs samples");
    std::vector<double> s(samples.begin(), samples.end());
    std::sort(s.begin(), s.end());
    Quantizer q;
    q.bins_ = bins;
    for (std::uint32_t i = 1; i < bins; ++i) {
      auto idx = static_cast<std::size_t>(static_cast<double>(i) * static_cast<double>(s.size()) / bins);
      q.edges_.push_back(s[std::min(idx, s.size() - 1)]);
    }
    return q;
  }

  std::uint32_t bins() const { return bins_; }
  bool is_equal_width() const { return edges_.empty(); }

  std::uint32_t bin(double c) const {
    if (std::isnan(c)) throw DomainError("ecr_codec", "cannot quantize NaN");
    if (edges_.empty()) {
      double scaled = std::floor((c + 1.0) / 2.0 * static_cast<double>(bins_));
      if (scaled < 0.0) return 0;
      if (scaled > static_cast<double>(bins_ - 1)) return bins_ - 1;
      return static_cast<std::uint32_t>(scaled);
    }
    auto it = std::upper_bound(edges_.begin(), edges_.end(), c);
    return static_cast<std::uint32_t>(it - edges_.begin());
  }

 private:
  static void check_bins(std::uint32_t bins) {
    if (bins < 2) throw DomainError("ecr_codec", "bin count must be >= 2, got " + std::to_string(bins));
  }

  std::uint32_t bins_ = 0;
  std::vector<double> edges_;
};

inline ControlCode quantize(const AffinityVector& affinity, const Quantizer& q) {
  ControlCode code;
  code.num_bins = q.bins();
  code.bins.reserve(affinity.values.size());
  for (double c : affinity.values) code.bins.push_back(q.bin(c));
  return code;
}

/// z_i = clamp(floor((c_i + 1) / 2 * B), 0, B - 1).
inline ControlCode quantize(const AffinityVector& affinity, std::uint32_t bins) {
  return quantize(affinity, Quantizer::equal_width(bins));
}

/// Bijection between (factor, anchor, bin) triples and dense token ids for a
/// fixed factor layout and bin count.
class TokenCodec {
 public:
  TokenCodec(std::vector<std::pair<Factor, std::size_t>> layout, std::uint32_t bins)
      : layout_(std::move(layout)), bins_(bins) {
    if (bins_ < 2) throw DomainError("ecr_codec", "bin count must be >= 2");
    std::sort(layout_.begin(), layout_.end());
    for (std::size_t i = 0; i < layout_.size(); ++i) {
      if (i > 0 && layout_[i].first == layout_[i - 1].first) {
        throw ValidationError("ecr_codec", "duplicate factor in token layout");
      }
      offsets_.push_back(total_);
      total_ += layout_[i].second;
    }
  }

  TokenCodec(const AnchorSet& anchors, std::uint32_t bins) : TokenCodec(layout_of(anchors), bins) {}

  std::uint32_t bins() const { return bins_; }
  std::size_t anchor_count() const { return total_; }
  std::size_t vocabulary_size() const { return total_ * bins_; }

  TokenId encode(const ControlToken& t) const {
    std::size_t g = group(t.factor);
    if (t.anchor >= layout_[g].second) {
      throw DomainError("ecr_codec", std::string("anchor index out of range for factor ") +
                                         factor_code(t.factor));
    }
    if (t.bin >= bins_) {
      throw DomainError("ecr_codec", "bin " + std::to_string(t.bin) + " out of range for B=" +
                                         std::to_string(bins_));
    }
    return static_cast<TokenId>((offsets_[g] + t.anchor) * bins_ + t.bin);
  }

  /// Token for global anchor index k (canonical order) in bin b.
  TokenId encode_global(std::size_t k, std::uint32_t bin) const {
    if (k >= total_) throw DomainError("ecr_codec", "anchor index out of range");
    if (bin >= bins_) {
      throw DomainError("ecr_codec", "bin " + std::to_string(bin) + " out of range for B=" +
                                         std::to_string(bins_));
    }
    return static_cast<TokenId>(k * bins_ + bin);
  }

  ControlToken decode(TokenId id) const {
    if (id >= vocabulary_size()) throw DomainError("ecr_codec", "token id out of range");
    std::size_t k = id / bins_;
    auto g = static_cast<std::size_t>(
        std::upper_bound(offsets_.begin(), offsets_.end(), k) - offsets_.begin() - 1);
    return {layout_[g].first, static_cast<std::uint32_t>(k - offsets_[g]),
            static_cast<std::uint32_t>(id % bins_)};
  }

  static std::string render(const ControlToken& t) {
    return "<" + std::string(1, factor_code(t.factor)) + std::to_string(t.anchor) + ":" +
           std::to_string(t.bin) + ">";
  }

  std::string render(TokenId id) const { return render(decode(id)); }

  /// Parses one "<F{anchor}:{bin}>" token; nullopt on malformed text.
  static std::optional<ControlToken> parse(std::string_view s) {
    if (s.size() < 6 || s.front() != '<' || s.back() != '>') return std::nullopt;
    auto f = parse_factor(s[1]);
    if (!f) return std::nullopt;
    auto body = s.substr(2, s.size() - 3);
    auto colon = body.find(':');
    if (colon == std::string_view::npos) return std::nullopt;
    ControlToken t{*f, 0, 0};
    auto a = body.substr(0, colon), b = body.substr(colon + 1);
    if (a.empty() || b.empty()) return std::nullopt;
    auto ra = std::from_chars(a.data(), a.data() + a.size(), t.anchor);
    auto rb = std::from_chars(b.data(), b.data() + b.size(), t.bin);
    if (ra.ec != std::errc() || ra.ptr != a.data() + a.size()) return std::nullopt;
    if (rb.ec != std::errc() || rb.ptr != b.data() + b.size()) return std::nullopt;
    return t;
  }

  /// Splits a rendered prefix back into token ids.
  std::vector<TokenId> parse_prefix(std::string_view text) const {
    std::vector<TokenId> out;
    std::size_t pos = 0;
    while (pos < text.size()) {
      auto end = text.find('>', pos);
      if (text[pos] != '<' || end == std::string_view::npos) {
        throw ValidationError("ecr_codec", "malformed prefix text");
      }
      auto t = parse(text.substr(pos, end - pos + 1));
      if (!t) throw ValidationError("ecr_codec", "malformed control token");
      out.push_back(encode(*t));
      pos = end + 1;
    }
    return out;
  }

 private:
  static std::vector<std::pair<Factor, std::size_t>> layout_of(const AnchorSet& anchors) {
    std::vector<std::pair<Factor, std::size_t>> out;
    for (const auto& g : anchors.groups()) out.emplace_back(g.factor, g.count);
    return out;
  }

  std::size_t group(Factor f) const {
    for (std::size_t g = 0; g < layout_.size(); ++g) {
      if (layout_[g].first == f) return g;
    }
    throw DomainError("ecr_codec", std::string("factor ") + factor_code(f) + " not in token layout");
  }

  std::vector<std::pair<Factor, std::size_t>> layout_;
  std::vector<std::size_t> offsets_;
  std::size_t total_ = 0;
  std::uint32_t bins_;
};

/// Tokens for the listed global anchor indices (all K when empty), emitted in
/// canonical order.
inline ControlPrefix emit_tokens(const ControlCode& code, const AnchorSet& anchors,
                                 std::span<const std::size_t> selected = {}) {
  if (code.bins.size() != anchors.size()) {
    throw DimensionError("ecr_codec", "control code has " + std::to_string(code.bins.size()) +
                                          " bins but the anchor set has " +
                                          std::to_string(anchors.size()) + " anchors");
  }
  TokenCodec codec(anchors, code.num_bins);
  std::vector<std::size_t> order(selected.begin(), selected.end());
  if (order.empty()) {
    order.resize(anchors.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
  }
  std::sort(order.begin(), order.end());
  ControlPrefix prefix;
  prefix.tokens.reserve(order.size());
  for (auto k : order) {
    auto id = codec.encode_global(k, code.bins.at(k));
    prefix.tokens.push_back(id);
    prefix.rendering += codec.render(id);
  }
  return prefix;
}

/// x' = [prefix, x]. `control_offset` is added to every prefix token, for
/// models that place control tokens after their base vocabulary.
inline std::vector<TokenId> build_input(const ControlPrefix& prefix, std::span<const TokenId> x,
                                        TokenId control_offset = 0) {
  std::vector<TokenId> out;
  out.reserve(prefix.tokens.size() + x.size());
  for (auto t : prefix.tokens) out.push_back(t + control_offset);
  out.insert(out.end(), x.begin(), x.end());
  return out;
}

/// Indices of the k largest values, descending; ties go to the lower index.
inline std::vector<std::size_t> topk_indices(std::span<const double> values, std::size_t k) {
  if (k == 0 || k > values.size()) {
    throw DomainError("ecr_codec", "k=" + std::to_string(k) + " outside [1, " +
                                       std::to_string(values.size()) + "]");
  }
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      return values[a] > values[b] || (values[a] == values[b] && a < b);
                    });
  idx.resize(k);
  return idx;
}

/// The k anchors with the largest cosine affinity to h, descending.
template <std::floating_point T>
std::vector<std::size_t> topk_anchors(std::span<const T> h, const AnchorSet& anchors, std::size_t k) {
  auto aff = project(h, anchors);
  return topk_indices(aff.values, k);
}

/// Per-factor top-k over an affinity vector: k best anchors inside each factor
/// group (clamped to the group size), as global indices in canonical order.
inline std::vector<std::size_t> topk_per_factor(const AffinityVector& aff, const AnchorSet& anchors,
                                                std::size_t k) {
  if (k == 0) throw DomainError("ecr_codec", "k must be >= 1");
  std::vector<std::size_t> out;
  for (std::size_t g = 0; g < anchors.groups().size(); ++g) {
    auto off = anchors.group_offset(g);
    auto cnt = anchors.groups()[g].count;
    std::span<const double> vals(aff.values.data() + off, cnt);
    for (auto i : topk_indices(vals, std::min(k, cnt))) out.push_back(off + i);
  }
  std::sort(out.begin(), out.end());
  return out;
}

enum class EncodeMode { Global, Retrieval };

struct EncodeOptions {
  std::uint32_t bins = 8;
  EncodeMode mode = EncodeMode::Global;
  std::size_t k = 1;
  /// Retrieval mode: top-k inside each factor (default) or over all K anchors.
  bool per_factor = true;
};

inline ControlPrefix encode_affinity(const AffinityVector& aff, const AnchorSet& anchors,
                                     const EncodeOptions& opt) {
  auto code = quantize(aff, opt.bins);
  if (opt.mode == EncodeMode::Global) return emit_tokens(code, anchors);
  std::vector<std::size_t> chosen =
      opt.per_factor ? topk_per_factor(aff, anchors, opt.k) : topk_indices(aff.values, opt.k);
  return emit_tokens(code, anchors, chosen);
}

/// Projection, quantization and token emission for one embedding.
template <std::floating_point T>
ControlPrefix encode(std::span<const T> h, const AnchorSet& anchors, const EncodeOptions& opt) {
  return encode_affinity(project(h, anchors), anchors, opt);
}

template <std::floating_point T>
ControlPrefix encode(const std::vector<T>& h, const AnchorSet& anchors, const EncodeOptions& opt) {
  return encode(std::span<const T>(h), anchors, opt);
}

}  // namespace ecr
