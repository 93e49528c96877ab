#pragma once

// Desk-scale stand-in for the teacher-generated multilingual corpus.
//
// Vocabulary: three disjoint per-language ranges. Each range holds generic
// query tokens, a query slice per task, one answer label token per task and
// an answer-body slice per task:
//
//   [generic query | task query slices | task label tokens | task answer slices]
//
// A query mixes generic tokens with tokens from its task slice, so the task is
// only weakly visible in the text. The answer starts with the task's label
// token (the gold position for task accuracy) and its body is drawn mostly
// from the (language, task) answer slice. Emotion and intent labels do not
// influence the text.
//
// Teacher side: every factor label has a centre vector; all centres are
// mutually orthogonal. A record's teacher embedding is the sum of its
// language, task, emotion and intent centres plus Gaussian noise. The teacher
// token table places each token at its language centre, plus its task centre
// for task-specific tokens, plus noise.
//
// Text fields hold whitespace-separated decimal token ids.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ecr/corpus.hpp"
#include "ecr/error.hpp"

namespace ecr {

struct SyntheticParams {
  std::uint64_t seed = 0;
  std::size_t n_per_lang = 100;
  std::size_t labels_per_factor = 4;  // task, emotion and intent inventories
  std::size_t dim = 32;
  std::size_t generic_query_tokens = 16;
  std::size_t task_query_tokens = 4;
  std::size_t task_answer_tokens = 6;
  std::size_t query_length = 10;
  std::size_t answer_length = 8;
  double task_token_rate = 0.35;   // share of query tokens drawn from the task slice
  double answer_focus = 0.75;      // share of answer-body tokens from the (language, task) slice
  double language_norm = 3.0;
  double task_norm = 3.0;
  double aux_norm = 2.0;           // emotion and intent centres
  double record_noise = 0.3;       // per-dimension std of teacher record noise
  double token_noise = 0.25;       // per-dimension std of teacher token noise
};

struct SyntheticData {
  Corpus corpus;
  EmbeddingMatrix teacher;      // one row per record, id = dialog_id
  EmbeddingMatrix token_table;  // one row per base token, id = token id
  std::size_t base_vocab = 0;
};

/// Token layout helper for the synthetic vocabulary.
struct SyntheticVocab {
  std::size_t tasks = 0;
  std::size_t generic = 0;
  std::size_t task_query = 0;
  std::size_t task_answer = 0;

  std::size_t per_language() const { return generic + tasks * task_query + tasks + tasks * task_answer; }
  std::size_t size() const { return 3 * per_language(); }
  std::size_t base(std::size_t lang) const { return lang * per_language(); }
  std::size_t generic_token(std::size_t lang, std::size_t i) const { return base(lang) + i; }
  std::size_t query_token(std::size_t lang, std::size_t task, std::size_t i) const {
    return base(lang) + generic + task * task_query + i;
  }
  std::size_t label_token(std::size_t lang, std::size_t task) const {
    return base(lang) + generic + tasks * task_query + task;
  }
  std::size_t answer_token(std::size_t lang, std::size_t task, std::size_t i) const {
    return base(lang) + generic + tasks * task_query + tasks + task * task_answer + i;
  }
};

inline SyntheticData make_synthetic_corpus(const SyntheticParams& p) {
  if (p.n_per_lang == 0) throw DomainError("toytrain", "synthetic corpus needs n_per_lang >= 1");
  if (p.labels_per_factor == 0) throw DomainError("toytrain", "synthetic corpus needs labels_per_factor >= 1");
  const std::size_t nl = 3, nt = p.labels_per_factor;
  const std::size_t centres = nl + 3 * nt;
  if (centres > p.dim) {
    throw DomainError("toytrain", "dim=" + std::to_string(p.dim) + " is too small for " + std::to_string(centres) +
                                      " orthogonal factor centres");
  }
  std::mt19937_64 rng(p.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto pick = [&](std::size_t n) { return std::min(n - 1, static_cast<std::size_t>(unit(rng) * static_cast<double>(n))); };

  // Orthonormal centre directions from a QR of a Gaussian matrix.
  Eigen::MatrixXd g(p.dim, centres);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = normal(rng);
  Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ() *
                      Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(p.dim), static_cast<Eigen::Index>(centres));
  auto centre = [&](std::size_t idx, double norm) -> Eigen::VectorXd { return q.col(static_cast<Eigen::Index>(idx)) * norm; };
  std::vector<Eigen::VectorXd> lang_c, task_c, emo_c, intent_c;
  for (std::size_t i = 0; i < nl; ++i) lang_c.push_back(centre(i, p.language_norm));
  for (std::size_t i = 0; i < nt; ++i) task_c.push_back(centre(nl + i, p.task_norm));
  for (std::size_t i = 0; i < nt; ++i) emo_c.push_back(centre(nl + nt + i, p.aux_norm));
  for (std::size_t i = 0; i < nt; ++i) intent_c.push_back(centre(nl + 2 * nt + i, p.aux_norm));

  SyntheticVocab vocab{nt, p.generic_query_tokens, p.task_query_tokens, p.task_answer_tokens};
  SyntheticData out;
  out.base_vocab = vocab.size();

  auto& inv = out.corpus.labels;
  inv.language = {"en", "zh", "hi"};
  for (std::size_t i = 0; i < nt; ++i) {
    inv.task.push_back("t" + std::to_string(i));
    inv.emotion.push_back("e" + std::to_string(i));
    inv.intent.push_back("i" + std::to_string(i));
  }

  auto join = [](const std::vector<std::size_t>& toks) {
    std::string s;
    for (auto t : toks) {
      if (!s.empty()) s += ' ';
      s += std::to_string(t);
    }
    return s;
  };

  const std::size_t n = nl * p.n_per_lang;
  out.teacher = EmbeddingMatrix(n, p.dim);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t lang = r % nl;
    const std::size_t task = pick(nt), emo = pick(nt), intent = pick(nt);
    CorpusRecord rec;
    char id[32];
    std::snprintf(id, sizeof id, "d%06zu", r);
    rec.dialog_id = id;
    rec.language = inv.language[lang];
    rec.task = inv.task[task];
    rec.emotion = inv.emotion[emo];
    rec.intent = inv.intent[intent];
    for (std::size_t l = 0; l < nl; ++l) {
      std::vector<std::size_t> qt, at;
      for (std::size_t i = 0; i < p.query_length; ++i) {
        qt.push_back(unit(rng) < p.task_token_rate ? vocab.query_token(l, task, pick(p.task_query_tokens))
                                                   : vocab.generic_token(l, pick(p.generic_query_tokens)));
      }
      at.push_back(vocab.label_token(l, task));
      for (std::size_t i = 1; i < p.answer_length; ++i) {
        if (unit(rng) < p.answer_focus) {
          at.push_back(vocab.answer_token(l, task, pick(p.task_answer_tokens)));
        } else {
          at.push_back(vocab.answer_token(l, pick(nt), pick(p.task_answer_tokens)));
        }
      }
      auto lang_enum = static_cast<Lang>(l);
      (lang_enum == Lang::En ? rec.en_q : lang_enum == Lang::Zh ? rec.zh_q : rec.hi_q) = join(qt);
      (lang_enum == Lang::En ? rec.en_a : lang_enum == Lang::Zh ? rec.zh_a : rec.hi_a) = join(at);
    }
    Eigen::VectorXd e = lang_c[lang] + task_c[task] + emo_c[emo] + intent_c[intent];
    auto row = out.teacher.mutable_row(r);
    for (std::size_t j = 0; j < p.dim; ++j) {
      row[j] = static_cast<float>(e(static_cast<Eigen::Index>(j)) + p.record_noise * normal(rng));
    }
    out.teacher.ids[r] = rec.dialog_id;
    out.corpus.records.push_back(std::move(rec));
  }

  out.token_table = EmbeddingMatrix(vocab.size(), p.dim);
  for (std::size_t l = 0; l < nl; ++l) {
    auto put = [&](std::size_t tok, const Eigen::VectorXd& v) {
      auto row = out.token_table.mutable_row(tok);
      for (std::size_t j = 0; j < p.dim; ++j) {
        row[j] = static_cast<float>(v(static_cast<Eigen::Index>(j)) + p.token_noise * normal(rng));
      }
    };
    for (std::size_t i = 0; i < p.generic_query_tokens; ++i) put(vocab.generic_token(l, i), lang_c[l]);
    for (std::size_t t = 0; t < nt; ++t) {
      for (std::size_t i = 0; i < p.task_query_tokens; ++i) put(vocab.query_token(l, t, i), lang_c[l] + task_c[t]);
      put(vocab.label_token(l, t), lang_c[l] + task_c[t]);
      for (std::size_t i = 0; i < p.task_answer_tokens; ++i) put(vocab.answer_token(l, t, i), lang_c[l] + task_c[t]);
    }
  }
  return out;
}

}  // namespace ecr
