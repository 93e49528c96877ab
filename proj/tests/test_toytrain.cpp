#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "ecr/toytrain.hpp"
#include "support.hpp"

using namespace ecr;

namespace {

std::vector<ToySample> random_samples(std::size_t n, std::size_t vocab, std::size_t qlen, std::size_t alen,
                                      std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<ToySample> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].id = "s" + std::to_string(i);
    out[i].lang = kLanguages[i % 3];
    for (std::size_t j = 0; j < qlen; ++j) out[i].query.push_back(static_cast<TokenId>(rng() % vocab));
    for (std::size_t j = 0; j < alen; ++j) out[i].answer.push_back(static_cast<TokenId>(rng() % vocab));
  }
  return out;
}

TrainConfig small_config(std::uint64_t seed = 0) {
  TrainConfig c;
  c.seed = seed;
  c.epochs = 2;
  c.synthetic_n_per_lang = 40;
  return c;
}

Experiment small_experiment(const TrainConfig& c) {
  return Experiment(ToyData::from(make_synthetic_corpus(c.synthetic())), c);
}

}  // namespace

TEST(Tokenize, ParsesAndValidates) {
  EXPECT_EQ(tokenize(" 3 14  15\t9 ", 20), (std::vector<TokenId>{3, 14, 15, 9}));
  EXPECT_TRUE(tokenize("   ", 20).empty());
  EXPECT_THROW(tokenize("3 x", 20), ValidationError);
  EXPECT_THROW(tokenize("3 20", 20), ValidationError);
  EXPECT_THROW(tokenize("-1", 20), ValidationError);
}

TEST(Synthetic, ShapeAndTriplets) {
  SyntheticParams p;
  auto s = make_synthetic_corpus(p);
  ASSERT_EQ(s.corpus.records.size(), 300u);
  EXPECT_EQ(s.teacher.n, 300u);
  EXPECT_EQ(s.token_table.n, s.base_vocab);
  for (const auto& [lang, n] : s.corpus.counts("language")) EXPECT_EQ(n, 100u) << lang;
  std::set<std::string> ids;
  for (std::size_t i = 0; i < 300; ++i) {
    const auto& r = s.corpus.records[i];
    EXPECT_EQ(s.teacher.ids[i], r.dialog_id);
    ids.insert(r.dialog_id);
    for (auto l : kLanguages) {
      EXPECT_FALSE(tokenize(r.query(l), s.base_vocab).empty());
      EXPECT_EQ(tokenize(r.answer(l), s.base_vocab).size(), p.answer_length);
    }
  }
  EXPECT_EQ(ids.size(), 300u);
  // The corpus survives its own serialization.
  std::istringstream in(serialize_corpus(s.corpus));
  EXPECT_EQ(parse_corpus(in), s.corpus);
}

TEST(Synthetic, LanguageRangesDisjoint) {
  auto s = make_synthetic_corpus({});
  std::array<std::set<TokenId>, 3> used;
  for (const auto& r : s.corpus.records) {
    for (auto l : kLanguages) {
      for (auto t : tokenize(r.query(l) + " " + r.answer(l), s.base_vocab)) used[static_cast<int>(l)].insert(t);
    }
  }
  for (int a = 0; a < 3; ++a) {
    for (int b = a + 1; b < 3; ++b) {
      for (auto t : used[a]) EXPECT_FALSE(used[b].count(t));
    }
  }
}

TEST(Synthetic, TeacherPurityIsOne) {
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    SyntheticParams p;
    p.seed = seed;
    auto s = make_synthetic_corpus(p);
    std::vector<std::string> langs;
    for (const auto& r : s.corpus.records) langs.push_back(r.language);
    auto pr = purity(s.teacher, langs);
    for (const auto& [l, v] : pr.per_language) EXPECT_EQ(v, 1.0) << l;
  }
}

TEST(Synthetic, SameSeedSameBytes) {
  SyntheticParams p;
  p.seed = 17;
  auto a = make_synthetic_corpus(p), b = make_synthetic_corpus(p);
  EXPECT_EQ(serialize_corpus(a.corpus), serialize_corpus(b.corpus));
  EXPECT_EQ(serialize_embeddings(a.teacher), serialize_embeddings(b.teacher));
  EXPECT_EQ(serialize_embeddings(a.token_table), serialize_embeddings(b.token_table));
  p.seed = 18;
  EXPECT_NE(serialize_corpus(make_synthetic_corpus(p).corpus), serialize_corpus(a.corpus));
}

TEST(Synthetic, DimensionTooSmall) {
  SyntheticParams p;
  p.dim = 10;
  EXPECT_THROW(make_synthetic_corpus(p), DomainError);
}

TEST(Samples, OnePerRecordInOwnLanguage) {
  auto s = make_synthetic_corpus({});
  auto samples = make_samples(s.corpus, s.base_vocab);
  ASSERT_EQ(samples.size(), 300u);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& r = s.corpus.records[i];
    EXPECT_EQ(std::string(lang_code(samples[i].lang)), r.language);
    EXPECT_EQ(samples[i].query, tokenize(r.query(samples[i].lang), s.base_vocab));
  }
}

TEST(Embed, SingleAndPair) {
  ToyModel<float> m(10, 4, 3, 1);
  std::vector<TokenId> one{7};
  auto h = embed_sequence(m, one);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(h[j], static_cast<double>(m.row(7)[j]));
  std::vector<TokenId> two{2, 5};
  auto h2 = embed_sequence(m, two);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_NEAR(h2[j], (static_cast<double>(m.row(2)[j]) + m.row(5)[j]) / 2.0, 1e-12);
  }
}

TEST(Embed, LoopOracleAndControlSkipped) {
  ToyModel<float> m(50, 8, 6, 2);
  std::mt19937_64 rng(3);
  for (int t = 0; t < 30; ++t) {
    std::vector<TokenId> seq;
    std::vector<TokenId> base;
    for (int i = 0; i < 12; ++i) {
      auto tok = static_cast<TokenId>(rng() % 58);
      seq.push_back(tok);
      if (tok < 50) base.push_back(tok);
    }
    if (base.empty()) continue;
    auto h = embed_sequence(m, seq);
    for (std::size_t j = 0; j < 6; ++j) {
      double s = 0.0;
      for (auto b : base) s += m.row(b)[j];
      EXPECT_NEAR(h[j], s / base.size(), 1e-9);
    }
  }
}

TEST(Embed, Errors) {
  ToyModel<float> m(10, 2, 3, 1);
  EXPECT_THROW(embed_sequence(m, std::vector<TokenId>{}), ValidationError);
  EXPECT_THROW(embed_sequence(m, std::vector<TokenId>{12}), ValidationError);
  EXPECT_THROW(embed_sequence(m, std::vector<TokenId>{10, 11}), ValidationError);
}

TEST(Model, ControlRowsExistAndBaseIndependent) {
  ToyModel<float> a(30, 0, 4, 9), b(30, 24, 4, 9);
  EXPECT_EQ(b.embedding.size(), (30u + 24u) * 4u);
  EXPECT_TRUE(std::equal(a.embedding.begin(), a.embedding.end(), b.embedding.begin()));
  EXPECT_EQ(a.out_w, b.out_w);
}

TEST(Loss, PrefixNeverATarget) {
  ToyModel<float> m(10, 4, 3, 1);
  std::vector<TokenId> good{11, 12, 3, 4, 5};
  EXPECT_EQ(sequence_loss(m, good, 2).targets, 2u);
  std::vector<TokenId> bad{11, 3, 12, 4};
  EXPECT_THROW(sequence_loss(m, bad, 1), ValidationError);
  std::vector<TokenId> short_prefix{11, 12, 3};
  EXPECT_THROW(sequence_loss(m, short_prefix, 1), ValidationError);
}

TEST(Gradient, MatchesCentralDifferences) {
  // Three-token instance, one control token in front.
  ToyModel<double> m(5, 2, 3, 4, 0.5);
  for (std::size_t k = 0; k < m.out_b.size(); ++k) m.out_b[k] = 0.1 * static_cast<double>(k);
  std::vector<TokenId> seq{6, 1, 3, 2};
  Gradients g(m);
  sequence_loss(m, seq, 1, &g);
  auto loss = [&](ToyModel<double>& mm) { return sequence_loss(mm, seq, 1).total; };
  const double eps = 1e-6;
  auto check = [&](std::vector<double>& params, const std::vector<double>& grad, const char* what) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      double keep = params[i];
      params[i] = keep + eps;
      double up = loss(m);
      params[i] = keep - eps;
      double down = loss(m);
      params[i] = keep;
      double fd = (up - down) / (2 * eps);
      double scale = std::max({std::abs(fd), std::abs(grad[i]), 1e-6});
      EXPECT_LE(std::abs(fd - grad[i]) / scale, 1e-4) << what << "[" << i << "] fd=" << fd << " an=" << grad[i];
    }
  };
  check(m.out_w, g.out_w, "out_w");
  check(m.out_b, g.out_b, "out_b");
  check(m.embedding, g.embedding, "embedding");
}

TEST(Train, ZeroLearningRateKeepsParameters) {
  auto data = make_synthetic_corpus({});
  auto samples = make_samples(data.corpus, data.base_vocab);
  auto anchors = test::random_anchor_set({{Factor::T, 4}, {Factor::L, 3}}, 32, 1);
  Conditioner cond(anchors, EncodeOptions{});
  ToyModel<float> m(data.base_vocab, cond.control_vocab(), 32, 5);
  auto before = m;
  AdamW opt(m, AdamWParams{});
  TrainConfig cfg;
  for (int s = 0; s < 5; ++s) {
    train_step(m, opt, std::span<const ToySample>(samples.data() + 8 * s, 8), cond, cfg, 0.0);
  }
  EXPECT_TRUE(m == before);
}

TEST(Train, OneStepDecreasesLoss) {
  auto data = make_synthetic_corpus({});
  auto samples = make_samples(data.corpus, data.base_vocab);
  std::vector<ToySample> batch(4, samples[0]);
  auto anchors = test::random_anchor_set({{Factor::T, 4}}, 32, 1);
  Conditioner cond(anchors, EncodeOptions{});
  ToyModel<float> m(data.base_vocab, cond.control_vocab(), 32, 5);
  AdamW opt(m, AdamWParams{});
  TrainConfig cfg;
  auto first = train_step(m, opt, std::span<const ToySample>(batch), cond, cfg, 1e-3);
  auto second = train_step(m, opt, std::span<const ToySample>(batch), cond, cfg, 0.0);
  EXPECT_LT(second.loss, first.loss);
}

TEST(Train, AnchorsUntouchedAfterHundredSteps) {
  auto data = make_synthetic_corpus({});
  auto samples = make_samples(data.corpus, data.base_vocab);
  std::vector<Factor> fs{Factor::T, Factor::L, Factor::E};
  auto anchors = build_anchor_set(data.teacher, data.corpus, fs, {});
  auto bytes = serialize_anchors(anchors);
  Conditioner cond(anchors, EncodeOptions{});
  ToyModel<float> m(data.base_vocab, cond.control_vocab(), 32, 5);
  AdamW opt(m, AdamWParams{});
  TrainConfig cfg;
  for (std::size_t s = 0; s < 100; ++s) {
    std::span<const ToySample> batch(samples.data() + (s * 3) % 290, 8);
    train_step(m, opt, batch, cond, cfg, 0.01);
  }
  EXPECT_EQ(serialize_anchors(anchors), bytes);
  EXPECT_EQ(io::fnv1a(bytes), anchors.checksum());
}

TEST(Train, PrefixDeterministicForSnapshot) {
  auto data = make_synthetic_corpus({});
  auto samples = make_samples(data.corpus, data.base_vocab);
  std::vector<Factor> fs{Factor::T, Factor::L};
  auto anchors = build_anchor_set(data.teacher, data.corpus, fs, {});
  ToyModel<float> m(data.base_vocab, anchors.size() * 8, 32, 1);
  m.init_base_rows(data.token_table);
  Conditioner cond(anchors, EncodeOptions{});
  for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(cond.prefix(m, samples[i]), cond.prefix(m, samples[i]));
  auto frozen = freeze_prefixes(m, cond, std::span<const ToySample>(samples));
  EXPECT_EQ(frozen.size(), samples.size());
  EXPECT_EQ(cond.input(m, samples[3], &frozen.at(samples[3].id)), cond.input(m, samples[3]));
}

TEST(Eval, UniformModelNllIsLogV) {
  ToyModel<float> m(256, 0, 16, 3, 1e-4);
  auto data = random_samples(200, 256, 5, 50, 4);
  auto r = nll_eval(m, std::span<const ToySample>(data));
  EXPECT_GE(r.tokens, 10000u);
  EXPECT_NEAR(r.overall, std::log(256.0), 0.02 * std::log(256.0));
}

TEST(Eval, ConstructedPerfectModel) {
  ToyModel<float> m(4, 0, 2, 1);
  std::fill(m.out_w.begin(), m.out_w.end(), 0.0f);
  m.out_b = {0.0f, 0.0f, 40.0f, 0.0f};
  std::vector<ToySample> data(6);
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] = {"p" + std::to_string(i), kLanguages[i % 3], {2, 2, 2}, {2, 2}};
  }
  auto r = nll_eval(m, std::span<const ToySample>(data));
  EXPECT_LT(r.overall, 1e-9);
  EXPECT_EQ(task_accuracy(m, std::span<const ToySample>(data)), 1.0);
}

TEST(Eval, RandomModelAccuracyNearChance) {
  const std::size_t C = 4, n = 3000;
  ToyModel<float> m(C, 0, 8, 7, 1.0);
  auto data = random_samples(n, C, 6, 1, 8);
  double acc = task_accuracy(m, std::span<const ToySample>(data));
  double sigma = std::sqrt(0.25 * 0.75 / n);
  EXPECT_NEAR(acc, 1.0 / C, 3 * sigma);
}

TEST(Eval, Errors) {
  ToyModel<float> m(4, 0, 2, 1);
  std::vector<ToySample> none;
  EXPECT_THROW(nll_eval(m, std::span<const ToySample>(none)), ValidationError);
  EXPECT_THROW(task_accuracy(m, std::span<const ToySample>(none)), ValidationError);
  std::vector<ToySample> en{{"a", Lang::En, {1, 2}, {3}}};
  std::vector<Lang> want{Lang::En, Lang::Hi};
  EXPECT_THROW(nll_eval(m, std::span<const ToySample>(en), {}, nullptr, want), ValidationError);
  std::vector<ToySample> no_answer{{"a", Lang::En, {1, 2}, {}}};
  EXPECT_THROW(task_accuracy(m, std::span<const ToySample>(no_answer)), ValidationError);
}

TEST(Config, RoundTripAndErrors) {
  TrainConfig c;
  c.learning_rate = 0.003;
  c.ecr = true;
  c.factors = {Factor::L, Factor::E, Factor::I};
  c.prefix = PrefixRefresh::Frozen;
  c.grad_clip = 1.5;
  std::istringstream in(config_text(c));
  auto back = parse_config(in);
  EXPECT_EQ(config_text(back), config_text(c));

  std::istringstream comments("# leading comment\n\nlearning_rate = 0.5  # trailing\nfactors = none\n");
  auto p = parse_config(comments);
  EXPECT_EQ(p.learning_rate, 0.5);
  EXPECT_TRUE(p.factors.empty());

  std::istringstream unknown("lr = 1\n");
  try {
    parse_config(unknown);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 1u);
    EXPECT_NE(std::string(e.what()).find("unknown config key"), std::string::npos);
  }
  std::istringstream bad_value("\nepochs = many\n");
  EXPECT_THROW(parse_config(bad_value), ParseError);
  std::istringstream bf16("precision = bfloat16\n");
  EXPECT_THROW(parse_config(bf16), ParseError);

  TrainConfig v;
  v.ecr = true;
  v.factors.clear();
  EXPECT_THROW(validate(v), ValidationError);
  v = TrainConfig{};
  v.holdout = 1.0;
  EXPECT_THROW(validate(v), ValidationError);
}

TEST(Split, DisjointCover) {
  auto s = split_records(100, 0.2, 3);
  EXPECT_EQ(s.test.size(), 20u);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  for (auto i : s.test) EXPECT_TRUE(all.insert(i).second);
  EXPECT_EQ(all.size(), 100u);
  EXPECT_EQ(split_records(100, 0.2, 3).test, s.test);
}

TEST(Experiment, PairedArmsAlignAndAnchorsStable) {
  auto cfg = small_config(2);
  auto exp = small_experiment(cfg);
  auto pr = run_experiment(exp, cfg);
  EXPECT_EQ(pr.baseline.steps, pr.ecr.steps);
  EXPECT_EQ(pr.baseline.loss_curve.size(), pr.ecr.loss_curve.size());
  EXPECT_EQ(pr.baseline.epochs.size(), cfg.epochs + 1);
  EXPECT_EQ(pr.ecr.epochs.size(), cfg.epochs + 1);
  EXPECT_FALSE(pr.baseline.diverged);
  EXPECT_FALSE(pr.ecr.diverged);
  EXPECT_NE(pr.ecr.anchor_checksum_before, 0u);
  EXPECT_EQ(pr.ecr.anchor_checksum_before, pr.ecr.anchor_checksum_after);
  // Both arms predict the same targets, so their initial NLL covers the same token count.
  EXPECT_EQ(pr.baseline.epochs[0].nll.tokens, pr.ecr.epochs[0].nll.tokens);
  EXPECT_EQ(pr.baseline.final_snapshot().nll.per_language.size(), 3u);
}

TEST(Experiment, SameSeedBitIdentical) {
  auto cfg = small_config(4);
  cfg.ecr = true;
  auto a = small_experiment(cfg).run(cfg, "x");
  auto b = small_experiment(cfg).run(cfg, "x");
  ASSERT_EQ(a.loss_curve.size(), b.loss_curve.size());
  for (std::size_t i = 0; i < a.loss_curve.size(); ++i) {
    EXPECT_EQ(std::memcmp(&a.loss_curve[i], &b.loss_curve[i], sizeof(double)), 0);
  }
  EXPECT_EQ(to_text(a), to_text(b));
}

TEST(Experiment, FrozenAndRetrievalModesRun) {
  auto cfg = small_config(1);
  cfg.ecr = true;
  cfg.epochs = 1;
  auto exp = small_experiment(cfg);
  cfg.prefix = PrefixRefresh::Frozen;
  auto frozen = exp.run(cfg, "frozen");
  EXPECT_FALSE(frozen.diverged);
  cfg.prefix = PrefixRefresh::Recompute;
  cfg.mode = EncodeMode::Retrieval;
  cfg.factors = {Factor::T, Factor::L, Factor::E, Factor::I};
  auto retr = exp.run(cfg, "retrieval");
  EXPECT_EQ(retr.steps, frozen.steps);
}

TEST(Experiment, DivergenceRecordedNotRaised) {
  auto cfg = small_config(0);
  cfg.learning_rate = 1e6;
  cfg.grad_clip = 0.0;
  cfg.epochs = 4;
  auto exp = small_experiment(cfg);
  ExperimentReport r;
  ASSERT_NO_THROW(r = exp.run(cfg, "hot"));
  EXPECT_TRUE(r.diverged);
  ASSERT_TRUE(r.diverged_at.has_value());
  EXPECT_EQ(*r.diverged_at + 1, r.steps);
  EXPECT_GE(r.steps, cfg.divergence_patience);
  EXPECT_NE(to_text(r).find("diverged: yes"), std::string::npos);
}

TEST(Experiment, AblationTableHasFiveRows) {
  auto cfg = small_config(3);
  cfg.epochs = 1;
  auto exp = small_experiment(cfg);
  auto rows = run_ablation(exp, cfg);
  ASSERT_EQ(rows.size(), 5u);
  auto t = table(rows);
  std::istringstream in(t);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line + "\n", table_header());
  std::vector<std::string> manifolds;
  while (std::getline(in, line)) {
    std::vector<std::string> cols;
    std::istringstream ls(line);
    std::string c;
    while (std::getline(ls, c, '\t')) cols.push_back(c);
    ASSERT_EQ(cols.size(), 10u) << line;
    manifolds.push_back(cols[1]);
    for (int k : {2, 3, 4, 5, 6}) {
      EXPECT_FALSE(cols[k].empty());
      EXPECT_TRUE(std::isfinite(std::stod(cols[k]))) << cols[k];
    }
  }
  EXPECT_EQ(manifolds, (std::vector<std::string>{"none", "L", "E", "I", "L+E+I"}));
}

TEST(Experiment, CrosslingualExcludesLanguageFactor) {
  std::vector<Factor> onlyL{Factor::L};
  auto set = test::random_anchor_set({{Factor::T, 2}, {Factor::L, 3}}, 4, 1);
  AffinityVector aff{{0.1, 0.2, 0.9, 0.0, 0.3}, 0};
  EXPECT_EQ(crosslingual_subset(aff, set), (std::vector<std::size_t>{1}));
  auto lonly = set.select(onlyL);
  EXPECT_THROW(crosslingual_subset(AffinityVector{{0.1, 0.2, 0.3}, 0}, lonly), ValidationError);
}
