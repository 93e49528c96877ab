#pragma once

// Command-line front end. `dispatch` takes the arguments after the program
// name so tests can drive it in-process.
//
// Exit codes: 0 success, 1 operation error ("module: cause" on stderr),
// 2 usage error (unknown subcommand or flag, bad flag value).

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ecr/anchors.hpp"
#include "ecr/codec.hpp"
#include "ecr/corpus.hpp"
#include "ecr/error.hpp"
#include "ecr/geometry.hpp"
#include "ecr/hnsw.hpp"
#include "ecr/io.hpp"
#include "ecr/pca.hpp"
#include "ecr/synthetic.hpp"
#include "ecr/toytrain.hpp"

namespace ecr::cli {

namespace detail {

inline std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string header(const std::string& cmd, std::uint64_t seed) {
  return "# ecr " + cmd + " seed=" + std::to_string(seed) + "\n";
}

/// Text output goes to `path` atomically, or to `out` when no path is given.
inline void emit(const std::string& path, const std::string& text, std::ostream& out, const std::string& module) {
  if (path.empty()) {
    out << text;
  } else {
    io::atomic_write(path, text, module);
  }
}

inline EmbeddingMatrix uniform_matrix(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  EmbeddingMatrix m(n, d);
  for (auto& v : m.data) v = u(rng);
  return m;
}

inline std::vector<std::string> labels_for(const EmbeddingMatrix& e, const Corpus& corpus, const std::string& field) {
  std::unordered_map<std::string, const CorpusRecord*> by_id;
  for (const auto& r : corpus.records) by_id.emplace(r.dialog_id, &r);
  std::vector<std::string> out;
  out.reserve(e.n);
  for (const auto& id : e.ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw ValidationError("geometry", "embedding id '" + id + "' has no corpus record");
    out.push_back(label_of(*it->second, field));
  }
  return out;
}

inline std::string anchor_name(const AnchorSet& a, std::size_t k) {
  const auto& g = a.groups()[a.group_of(k)];
  std::string s(1, factor_code(g.factor));
  s += std::to_string(a.local_index(k));
  if (!g.label_names.empty()) s += "(" + g.label_names[a.local_index(k)] + ")";
  return s;
}

inline std::string describe(const std::string& path) {
  auto bytes = io::read_file(path, "cli");
  std::ostringstream o;
  auto magic = bytes.substr(0, std::min<std::size_t>(4, bytes.size()));
  if (magic == kAnchorMagic) {
    auto a = parse_anchors(bytes);
    o << "kind: anchors\n"
      << "dim: " << a.dim() << "\n"
      << "anchors: " << a.size() << "\n"
      << "mode: " << anchor_mode_name(a.provenance().mode) << "\n"
      << "seed: " << a.provenance().seed << "\n"
      << "checksum: " << hex64(a.checksum()) << "\n";
    for (const auto& g : a.groups()) {
      o << "factor." << factor_code(g.factor) << ": " << g.count;
      for (const auto& n : g.label_names) o << " " << n;
      o << "\n";
    }
  } else if (magic == kEmbeddingMagic) {
    auto e = parse_embeddings(bytes);
    o << "kind: embeddings\n"
      << "rows: " << e.n << "\n"
      << "dim: " << e.d << "\n";
    double mn = std::numeric_limits<double>::infinity(), mx = 0.0, sum = 0.0;
    for (std::size_t i = 0; i < e.n; ++i) {
      double nrm = l2_norm(e.row(i));
      mn = std::min(mn, nrm);
      mx = std::max(mx, nrm);
      sum += nrm;
    }
    if (e.n) {
      o << "norm.min: " << format_value(mn) << "\n"
        << "norm.mean: " << format_value(sum / static_cast<double>(e.n)) << "\n"
        << "norm.max: " << format_value(mx) << "\n";
    }
  } else if (magic == kPcaMagic) {
    auto m = parse_pca(bytes);
    o << "kind: pca\n"
      << "input_dim: " << m.d << "\n"
      << "output_dim: " << m.r << "\n"
      << "degenerate: " << (m.degenerate ? "yes" : "no") << "\n";
    double total = 0.0;
    for (double v : m.explained_variance) total += v;
    o << "explained_variance.total: " << format_value(total) << "\n";
    for (std::size_t j = 0; j < m.r; ++j) {
      o << "explained_variance." << j << ": " << format_value(m.explained_variance[j]) << "\n";
    }
  } else if (magic == kIndexMagic) {
    auto idx = HnswIndex::parse(bytes);
    auto chk = idx.check();
    o << "kind: hnsw-index\n"
      << "size: " << idx.size() << "\n"
      << "dim: " << idx.dim() << "\n"
      << "M: " << idx.params().M << "\n"
      << "ef_construction: " << idx.params().ef_construction << "\n"
      << "seed: " << idx.params().seed << "\n"
      << "max_level: " << idx.max_level() << "\n"
      << "structure: " << (chk.ok ? "ok" : "invalid") << "\n";
    for (const auto& p : chk.problems) o << "problem: " << p << "\n";
  } else {
    std::istringstream in(bytes);
    auto c = parse_corpus(in);
    o << "kind: corpus\n"
      << "records: " << c.records.size() << "\n";
    for (auto field : kLabelFields) {
      for (const auto& [name, n] : c.counts(field)) o << field << "." << name << ": " << n << "\n";
    }
  }
  return o.str();
}

}  // namespace detail

inline int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Embedding consistency regulation toolkit", "ecr"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  std::uint64_t seed = 0;
  std::string out_path;
  std::function<void()> action;
  auto add_seed = [&](CLI::App* s) { s->add_option("--seed", seed, "Seed for every random choice")->capture_default_str(); };

  // make-synthetic
  std::size_t n_per_lang = 100, n_labels = 4, syn_dim = 32;
  std::string corpus_out, emb_out, tokens_out;
  {
    auto* s = app.add_subcommand("make-synthetic", "Generate the synthetic multilingual corpus and teacher embeddings");
    add_seed(s);
    s->add_option("--n-per-lang", n_per_lang, "Records per language")->capture_default_str();
    s->add_option("--labels", n_labels, "Labels per factor (task, emotion, intent)")->capture_default_str();
    s->add_option("--dim", syn_dim, "Teacher embedding dimension")->capture_default_str();
    s->add_option("--corpus-out", corpus_out, "Corpus file to write")->required();
    s->add_option("--embeddings-out", emb_out, "Teacher embedding file to write")->required();
    s->add_option("--tokens-out", tokens_out, "Teacher token table to write");
    s->callback([&] {
      action = [&] {
        SyntheticParams p;
        p.seed = seed;
        p.n_per_lang = n_per_lang;
        p.labels_per_factor = n_labels;
        p.dim = syn_dim;
        auto d = make_synthetic_corpus(p);
        save_corpus(d.corpus, corpus_out);
        save_embeddings(d.teacher, emb_out);
        if (!tokens_out.empty()) save_embeddings(d.token_table, tokens_out);
        out << detail::header("make-synthetic", seed) << "records: " << d.corpus.records.size() << "\n"
            << "base_vocab: " << d.base_vocab << "\n"
            << "dim: " << d.teacher.d << "\n";
      };
    });
  }

  // build-anchors
  std::string emb_path, corpus_path, factors_text = "T,L,E,I", derive = "auto";
  std::size_t kmeans_k = 8, max_iter = 100;
  {
    auto* s = app.add_subcommand("build-anchors", "Derive per-factor anchors from teacher embeddings");
    add_seed(s);
    s->add_option("--embeddings", emb_path, "Teacher embedding file")->required();
    s->add_option("--corpus", corpus_path, "Corpus supplying factor labels");
    s->add_option("--factors", factors_text, "Comma-separated factors from T,L,E,I,P")->capture_default_str();
    s->add_option("--mode", derive, "auto | label | kmeans")
        ->check(CLI::IsMember({"auto", "label", "kmeans"}))
        ->capture_default_str();
    s->add_option("--k", kmeans_k, "Anchors per factor in kmeans mode")->capture_default_str();
    s->add_option("--max-iter", max_iter, "k-means iteration cap")->capture_default_str();
    s->add_option("--out", out_path, "Anchor file to write")->required();
    s->callback([&] {
      action = [&] {
        auto x = load_embeddings(emb_path);
        Corpus corpus;
        if (!corpus_path.empty()) corpus = load_corpus(corpus_path);
        AnchorBuildParams p;
        p.mode = derive == "label" ? DeriveMode::Label : derive == "kmeans" ? DeriveMode::KMeans : DeriveMode::Auto;
        if (corpus_path.empty() && p.mode != DeriveMode::KMeans) {
          if (p.mode == DeriveMode::Label) throw ValidationError("anchors", "label mode needs --corpus");
          p.mode = DeriveMode::KMeans;
        }
        p.k = kmeans_k;
        p.seed = seed;
        p.max_iter = max_iter;
        auto factors = parse_factor_list(factors_text);
        auto set = build_anchor_set(x, corpus, factors, p);
        save_anchors(set, out_path);
        out << detail::header("build-anchors", seed) << "anchors: " << set.size() << "\n"
            << "factors: " << factor_list_string(set.factors()) << "\n"
            << "mode: " << anchor_mode_name(set.provenance().mode) << "\n"
            << "checksum: " << detail::hex64(set.checksum()) << "\n";
      };
    });
  }

  // encode
  std::string anchors_path, enc_mode = "global", topk_scope = "factor";
  std::uint32_t bins = 8;
  std::size_t enc_k = 1;
  {
    auto* s = app.add_subcommand("encode", "Emit control-token prefixes for every embedding row");
    add_seed(s);
    s->add_option("--anchors", anchors_path, "Anchor file")->required();
    s->add_option("--embeddings", emb_path, "Embedding file")->required();
    s->add_option("--bins", bins, "Quantization bins B")->capture_default_str();
    s->add_option("--mode", enc_mode, "global | retrieval")
        ->check(CLI::IsMember({"global", "retrieval"}))
        ->capture_default_str();
    s->add_option("--k", enc_k, "Anchors kept in retrieval mode")->capture_default_str();
    s->add_option("--topk-scope", topk_scope, "factor | global")
        ->check(CLI::IsMember({"factor", "global"}))
        ->capture_default_str();
    s->add_option("--out", out_path, "Output file (stdout if omitted)");
    s->callback([&] {
      action = [&] {
        auto a = load_anchors(anchors_path);
        auto x = load_embeddings(emb_path);
        EncodeOptions opt;
        opt.bins = bins;
        opt.mode = enc_mode == "global" ? EncodeMode::Global : EncodeMode::Retrieval;
        opt.k = enc_k;
        opt.per_factor = topk_scope == "factor";
        std::ostringstream o;
        o << detail::header("encode", seed) << "# bins=" << bins << " mode=" << enc_mode
          << " anchors=" << detail::hex64(a.checksum()) << "\n"
          << "id\tprefix\ttoken_ids\n";
        for (std::size_t i = 0; i < x.n; ++i) {
          auto p = encode(x.row(i), a, opt);
          o << x.ids[i] << '\t' << p.rendering << '\t';
          for (std::size_t j = 0; j < p.tokens.size(); ++j) o << (j ? "," : "") << p.tokens[j];
          o << '\n';
        }
        detail::emit(out_path, o.str(), out, "ecr_codec");
      };
    });
  }

  // topk
  std::size_t topk_k = 5;
  {
    auto* s = app.add_subcommand("topk", "Nearest anchors by cosine for every embedding row");
    add_seed(s);
    s->add_option("--anchors", anchors_path, "Anchor file")->required();
    s->add_option("--embeddings", emb_path, "Embedding file")->required();
    s->add_option("--k", topk_k, "Anchors per row")->capture_default_str();
    s->add_option("--out", out_path, "Output file (stdout if omitted)");
    s->callback([&] {
      action = [&] {
        auto a = load_anchors(anchors_path);
        auto x = load_embeddings(emb_path);
        std::ostringstream o;
        o << detail::header("topk", seed) << "id\trank\tanchor\tname\tcosine\n";
        for (std::size_t i = 0; i < x.n; ++i) {
          auto aff = project(x.row(i), a);
          auto idx = topk_indices(aff.values, topk_k);
          for (std::size_t r = 0; r < idx.size(); ++r) {
            o << x.ids[i] << '\t' << r + 1 << '\t' << idx[r] << '\t' << detail::anchor_name(a, idx[r]) << '\t'
              << format_value(aff.values[idx[r]]) << '\n';
          }
        }
        detail::emit(out_path, o.str(), out, "ecr_codec");
      };
    });
  }

  // pca-fit
  std::size_t pca_dim = 64;
  std::string solver = "auto", transform_out;
  {
    auto* s = app.add_subcommand("pca-fit", "Fit a PCA reduction model");
    add_seed(s);
    s->add_option("--embeddings", emb_path, "Embedding file")->required();
    s->add_option("--dim", pca_dim, "Output dimension r")->capture_default_str();
    s->add_option("--solver", solver, "auto | eigen | subspace")
        ->check(CLI::IsMember({"auto", "eigen", "subspace"}))
        ->capture_default_str();
    s->add_option("--out", out_path, "PCA model file to write")->required();
    s->add_option("--transform-out", transform_out, "Also write the reduced embeddings here");
    s->callback([&] {
      action = [&] {
        auto x = load_embeddings(emb_path);
        auto sv = solver == "eigen" ? PcaSolver::Eigen : solver == "subspace" ? PcaSolver::Subspace : PcaSolver::Auto;
        auto m = fit_pca(x, pca_dim, sv, seed);
        save_pca(m, out_path);
        if (!transform_out.empty()) save_embeddings(pca_transform(m, x), transform_out);
        if (m.degenerate) err << "retrieval: warning: input has zero variance; components are arbitrary\n";
        double total = 0.0;
        for (double v : m.explained_variance) total += v;
        out << detail::header("pca-fit", seed) << "input_dim: " << m.d << "\n"
            << "output_dim: " << m.r << "\n"
            << "explained_variance.total: " << format_value(total) << "\n";
      };
    });
  }

  // index-build
  HnswParams hp;
  std::string pca_path;
  {
    auto* s = app.add_subcommand("index-build", "Build an HNSW cosine index");
    add_seed(s);
    s->add_option("--embeddings", emb_path, "Vectors to index")->required();
    s->add_option("--pca", pca_path, "Reduce vectors with this PCA model first");
    s->add_option("--m", hp.M, "Max neighbours per node on upper layers")->capture_default_str();
    s->add_option("--efc", hp.ef_construction, "Construction beam width")->capture_default_str();
    s->add_option("--out", out_path, "Index file to write")->required();
    s->callback([&] {
      action = [&] {
        auto x = load_embeddings(emb_path);
        if (!pca_path.empty()) x = pca_transform(load_pca(pca_path), x);
        hp.seed = seed;
        auto idx = HnswIndex::build(x, hp);
        save_index(idx, out_path);
        out << detail::header("index-build", seed) << "size: " << idx.size() << "\n"
            << "dim: " << idx.dim() << "\n"
            << "max_level: " << idx.max_level() << "\n";
      };
    });
  }

  // index-query
  std::string index_path, queries_path;
  std::size_t q_k = 5, q_ef = 64;
  {
    auto* s = app.add_subcommand("index-query", "Top-k cosine queries against an index");
    add_seed(s);
    s->add_option("--index", index_path, "Index file")->required();
    s->add_option("--queries", queries_path, "Query embedding file")->required();
    s->add_option("--pca", pca_path, "Reduce queries with this PCA model first");
    s->add_option("--k", q_k, "Results per query")->capture_default_str();
    s->add_option("--ef", q_ef, "Search beam width")->capture_default_str();
    s->add_option("--out", out_path, "Output file (stdout if omitted)");
    s->callback([&] {
      action = [&] {
        auto idx = load_index(index_path);
        auto q = load_embeddings(queries_path);
        if (!pca_path.empty()) q = pca_transform(load_pca(pca_path), q);
        std::ostringstream o;
        o << detail::header("index-query", seed) << "query\trank\tid\tcosine\tvisited\n";
        for (std::size_t i = 0; i < q.n; ++i) {
          auto r = idx.query(q.row(i), q_k, q_ef);
          for (std::size_t j = 0; j < r.ids.size(); ++j) {
            o << q.ids[i] << '\t' << j + 1 << '\t' << r.ids[j] << '\t' << format_value(r.scores[j]) << '\t'
              << r.visited << '\n';
          }
        }
        detail::emit(out_path, o.str(), out, "retrieval");
      };
    });
  }

  // bench
  std::size_t bench_n = 100000, bench_dim = 64, bench_queries = 1000, recall_sample = 0;
  {
    auto* s = app.add_subcommand("bench", "Query latency report (p50/p99) for an HNSW index");
    add_seed(s);
    s->add_option("--index", index_path, "Existing index (otherwise random vectors are indexed)");
    s->add_option("--queries", queries_path, "Query embedding file (otherwise random queries)");
    s->add_option("--n", bench_n, "Random vectors to index")->capture_default_str();
    s->add_option("--dim", bench_dim, "Dimension of random vectors")->capture_default_str();
    s->add_option("--num-queries", bench_queries, "Minimum timed queries")->capture_default_str();
    s->add_option("--k", q_k, "Results per query")->capture_default_str();
    s->add_option("--ef", q_ef, "Search beam width")->capture_default_str();
    s->add_option("--m", hp.M, "Max neighbours per node (random index)")->capture_default_str();
    s->add_option("--efc", hp.ef_construction, "Construction beam width (random index)")->capture_default_str();
    s->add_option("--recall-sample", recall_sample, "Also measure recall against brute force on this many queries");
    s->add_option("--out", out_path, "Report file (stdout if omitted)");
    s->callback([&] {
      action = [&] {
        std::mt19937_64 rng(seed);
        std::optional<EmbeddingMatrix> base;
        std::optional<HnswIndex> idx;
        double build_s = 0.0;
        if (!index_path.empty()) {
          idx.emplace(load_index(index_path));
        } else {
          base.emplace(detail::uniform_matrix(bench_n, bench_dim, rng));
          hp.seed = seed;
          auto t0 = std::chrono::steady_clock::now();
          idx.emplace(HnswIndex::build(*base, hp));
          build_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        }
        EmbeddingMatrix q = queries_path.empty() ? detail::uniform_matrix(bench_queries, idx->dim(), rng)
                                                 : load_embeddings(queries_path);
        auto rep = bench_query_latency(*idx, q, q_k, q_ef, bench_queries);
        std::ostringstream o;
        o << detail::header("bench", seed) << "index_size: " << idx->size() << "\n"
          << "dim: " << idx->dim() << "\n"
          << "M: " << idx->params().M << "\n"
          << "ef_construction: " << idx->params().ef_construction << "\n"
          << "k: " << q_k << "\n"
          << "ef_search: " << q_ef << "\n";
        if (base) o << "build_seconds: " << format_value(build_s) << "\n";
        o << "queries: " << rep.queries << "\n"
          << "visited_total: " << rep.visited_total << "\n"
          << "latency_mean_us: " << format_value(rep.mean_us) << "\n"
          << "latency_p50_us: " << format_value(rep.p50_us) << "\n"
          << "latency_p99_us: " << format_value(rep.p99_us) << "\n"
          << "latency_max_us: " << format_value(rep.max_us) << "\n"
          << "p99_soft_target_us: 2000\n"
          << "p99_within_soft_target: " << (rep.p99_us < 2000.0 ? "yes" : "no") << "\n";
        if (recall_sample && base) {
          double hit = 0.0;
          std::size_t m = std::min(recall_sample, q.n);
          for (std::size_t i = 0; i < m; ++i) {
            auto a = idx->query(q.row(i), q_k, q_ef);
            auto b = brute_force_topk(*base, q.row(i), q_k);
            for (auto l : b.labels) hit += static_cast<double>(std::count(a.labels.begin(), a.labels.end(), l));
          }
          o << "recall_at_k: " << format_value(hit / static_cast<double>(m * q_k)) << "\n";
        }
        detail::emit(out_path, o.str(), out, "retrieval");
      };
    });
  }

  // geometry
  std::string field = "task";
  std::size_t geo_kmeans = 0;
  {
    auto* s = app.add_subcommand("geometry", "Intra/inter/ratio/spread of an embedding set");
    add_seed(s);
    s->add_option("--embeddings", emb_path, "Embedding file")->required();
    s->add_option("--corpus", corpus_path, "Corpus supplying manifold labels");
    s->add_option("--field", field, "Label field defining manifolds: task | language | emotion | intent")
        ->check(CLI::IsMember({"task", "language", "emotion", "intent"}))
        ->capture_default_str();
    s->add_option("--kmeans", geo_kmeans, "Partition by k-means with this many clusters instead of labels");
    s->add_option("--out", out_path, "Report file (stdout if omitted)");
    s->callback([&] {
      action = [&] {
        auto e = load_embeddings(emb_path);
        ManifoldPartition part;
        if (geo_kmeans) {
          auto km = kmeans(e, KMeansParams{geo_kmeans, seed, 100, 1e-9});
          std::vector<std::string> labels;
          for (auto a : km.assignment) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "c%03zu", a);
            labels.emplace_back(buf);
          }
          part = ManifoldPartition::from_labels(labels, "kmeans");
        } else {
          if (corpus_path.empty()) throw ValidationError("geometry", "label partition needs --corpus (or use --kmeans)");
          auto labels = detail::labels_for(e, load_corpus(corpus_path), field);
          part = ManifoldPartition::from_labels(labels, field);
        }
        detail::emit(out_path, detail::header("geometry", seed) + to_text(geometry_report(e, part)), out, "geometry");
      };
    });
  }

  // purity
  {
    auto* s = app.add_subcommand("purity", "Language manifold purity (nearest language prototype)");
    add_seed(s);
    s->add_option("--embeddings", emb_path, "Embedding file")->required();
    s->add_option("--corpus", corpus_path, "Corpus supplying language labels")->required();
    s->add_option("--out", out_path, "Report file (stdout if omitted)");
    s->callback([&] {
      action = [&] {
        auto e = load_embeddings(emb_path);
        auto labels = detail::labels_for(e, load_corpus(corpus_path), "language");
        detail::emit(out_path, detail::header("purity", seed) + to_text(purity(e, labels)), out, "geometry");
      };
    });
  }

  // consistency
  std::string teacher_path, student_path, triplets_text;
  std::size_t shared_dim = 0;
  {
    auto* s = app.add_subcommand("consistency", "Teacher similarity, retrieval and cross-lingual consistency");
    add_seed(s);
    s->add_option("--teacher", teacher_path, "Teacher embedding file")->required();
    s->add_option("--student", student_path, "Student embedding file (same ids)")->required();
    s->add_option("--corpus", corpus_path, "Corpus supplying language labels")->required();
    s->add_option("--shared-dim", shared_dim, "Reduce both sides by PCA to this dimension first");
    s->add_option("--anchors", anchors_path, "Anchors for retrieval and cross-lingual consistency");
    s->add_option("--k", topk_k, "Anchors per selection (retrieval consistency)")->capture_default_str();
    s->add_option("--triplets", triplets_text, "Comma-separated En,Zh,Hi student embedding files");
    s->add_option("--out", out_path, "Report file (stdout if omitted)");
    s->callback([&] {
      action = [&] {
        auto t = load_embeddings(teacher_path);
        auto st = load_embeddings(student_path);
        auto corpus = load_corpus(corpus_path);
        std::unordered_map<std::string, std::string> lang;
        for (const auto& r : corpus.records) lang.emplace(r.dialog_id, r.language);
        auto sim = teacher_similarity(t, st, lang, shared_dim ? std::optional<std::size_t>(shared_dim) : std::nullopt);
        std::ostringstream o;
        o << detail::header("consistency", seed);
        for (const auto& [l, v] : sim.per_language) o << "teacher_similarity." << l << ": " << format_value(v) << "\n";
        o << "teacher_similarity.overall: " << format_value(sim.overall) << "\n"
          << "pairs: " << sim.pairs << "\n";
        if (!anchors_path.empty()) {
          auto a = load_anchors(anchors_path);
          if (t.d == a.dim() && st.d == a.dim()) {
            std::vector<Selection> ts, ss;
            auto rows = st.id_index();
            for (std::size_t i = 0; i < t.n; ++i) {
              ts.push_back({t.ids[i], topk_indices(project(t.row(i), a).values, topk_k)});
              ss.push_back({t.ids[i], topk_indices(project(st.row(rows.at(t.ids[i])), a).values, topk_k)});
            }
            auto rc = retrieval_consistency(ts, ss);
            o << "retrieval_consistency.top1: " << format_value(rc.exact) << "\n"
              << "retrieval_consistency.jaccard: " << format_value(rc.jaccard) << "\n";
          } else {
            o << "retrieval_consistency: skipped (anchor dimension differs from the embeddings)\n";
          }
          if (!triplets_text.empty()) {
            std::vector<std::string> files;
            std::stringstream ss(triplets_text);
            for (std::string f; std::getline(ss, f, ',');) files.push_back(f);
            if (files.size() != 3) throw ValidationError("geometry", "--triplets needs exactly three files (En,Zh,Hi)");
            std::array<EmbeddingMatrix, 3> m{load_embeddings(files[0]), load_embeddings(files[1]), load_embeddings(files[2])};
            std::array<std::unordered_map<std::string, std::size_t>, 3> idx{m[0].id_index(), m[1].id_index(),
                                                                             m[2].id_index()};
            std::vector<TripletSelection> trips;
            for (const auto& id : m[0].ids) {
              TripletSelection tsel;
              tsel.id = id;
              for (int l = 0; l < 3; ++l) {
                auto it = idx[l].find(id);
                if (it == idx[l].end()) throw ValidationError("geometry", "incomplete triplet for id '" + id + "'");
                tsel.subsets[l] = crosslingual_subset(project(m[l].row(it->second), a), a);
              }
              trips.push_back(std::move(tsel));
            }
            auto xc = crosslingual_consistency(trips);
            o << "crosslingual.exact: " << format_value(xc.exact) << "\n"
              << "crosslingual.jaccard: " << format_value(xc.jaccard) << "\n"
              << "crosslingual.samples: " << xc.samples << "\n";
          }
        }
        detail::emit(out_path, o.str(), out, "geometry");
      };
    });
  }

  // train-toy
  std::string config_path, ecr_flag, factors_flag, tokens_path, table_out;
  std::optional<std::uint32_t> bins_flag;
  std::optional<double> clip_flag, lr_flag;
  std::optional<std::size_t> epochs_flag;
  bool seed_given = false, sweep = false;
  {
    auto* s = app.add_subcommand("train-toy", "Train the toy model: paired baseline/ECR run or ablation sweep");
    s->add_option("--seed", seed, "Seed for data split, initialisation and batch order");
    s->add_option("--config", config_path, "Flat key = value config file");
    s->add_option("--ecr", ecr_flag, "Run only one arm: on | off (default: both arms)")
        ->check(CLI::IsMember({"on", "off"}));
    s->add_option("--factors", factors_flag, "Conditioning factors, e.g. T,L or L,E,I");
    s->add_option("--bins", bins_flag, "Quantization bins B");
    s->add_option("--grad-clip", clip_flag, "Global gradient norm cap (0 disables)");
    s->add_option("--lr", lr_flag, "Learning rate");
    s->add_option("--epochs", epochs_flag, "Epochs");
    s->add_flag("--sweep", sweep, "Ablation over factor subsets none, L, E, I, L+E+I");
    s->add_option("--corpus", corpus_path, "Corpus with token-id text (synthetic corpus if omitted)");
    s->add_option("--embeddings", emb_path, "Teacher record embeddings for --corpus");
    s->add_option("--tokens", tokens_path, "Teacher token table for --corpus");
    s->add_option("--out", out_path, "Report file (stdout if omitted)");
    s->add_option("--table-out", table_out, "Also write the tab-separated result table here");
    s->callback([&, s] {
      seed_given = s->count("--seed") > 0;
      action = [&] {
        TrainConfig cfg;
        if (!config_path.empty()) cfg = load_config(config_path);
        if (seed_given) cfg.seed = seed;
        if (bins_flag) cfg.bins = *bins_flag;
        if (clip_flag) cfg.grad_clip = *clip_flag;
        if (lr_flag) cfg.learning_rate = *lr_flag;
        if (epochs_flag) cfg.epochs = *epochs_flag;
        if (!factors_flag.empty()) cfg.factors = parse_factor_list(factors_flag);
        validate(cfg);

        ToyData data;
        if (corpus_path.empty()) {
          data = ToyData::from(make_synthetic_corpus(cfg.synthetic()));
        } else {
          if (emb_path.empty()) throw ValidationError("toytrain", "--corpus needs --embeddings");
          data.corpus = load_corpus(corpus_path);
          data.teacher = load_embeddings(emb_path);
          if (!tokens_path.empty()) {
            data.token_table = load_embeddings(tokens_path);
            data.base_vocab = data.token_table->n;
          } else {
            std::size_t mx = 0;
            for (const auto& r : data.corpus.records) {
              for (auto l : kLanguages) {
                for (auto t : tokenize(r.query(l), std::numeric_limits<TokenId>::max())) mx = std::max<std::size_t>(mx, t);
                for (auto t : tokenize(r.answer(l), std::numeric_limits<TokenId>::max())) mx = std::max<std::size_t>(mx, t);
              }
            }
            data.base_vocab = mx + 1;
          }
        }
        Experiment exp(std::move(data), cfg);
        std::vector<ExperimentReport> arms;
        std::string title;
        if (sweep) {
          arms = run_ablation(exp, cfg);
          title = "ecr train-toy ablation";
        } else if (!ecr_flag.empty()) {
          cfg.ecr = ecr_flag == "on";
          arms.push_back(exp.run(cfg, cfg.ecr ? "ecr:" + factor_list_string(cfg.factors) : "baseline"));
          title = "ecr train-toy single arm";
        } else {
          auto p = run_experiment(exp, cfg);
          arms = {std::move(p.baseline), std::move(p.ecr)};
          title = "ecr train-toy paired";
        }
        detail::emit(out_path, report_text(arms, title), out, "toytrain");
        if (!table_out.empty()) io::atomic_write(table_out, table(arms), "toytrain");
      };
    });
  }

  // report
  std::string in_path;
  {
    auto* s = app.add_subcommand("report", "Describe an artifact file (anchors, embeddings, PCA, index, corpus)");
    add_seed(s);
    s->add_option("--in", in_path, "File to describe")->required();
    s->add_option("--out", out_path, "Report file (stdout if omitted)");
    s->callback([&] {
      action = [&] { detail::emit(out_path, detail::header("report", seed) + detail::describe(in_path), out, "cli"); };
    });
  }

  if (!args.empty() && !args.front().empty() && args.front().front() != '-' &&
      app.get_subcommand_no_throw(args.front()) == nullptr) {
    err << "usage error: unknown subcommand '" << args.front() << "'\n" << app.help();
    return 2;
  }
  std::vector<std::string> argv_store{"ecr"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    auto subs = app.get_subcommands();
    out << (subs.empty() ? app.help() : subs.front()->help());
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return 2;
  }
  try {
    if (action) action();
    return 0;
  } catch (const Error& e) {
    err << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "cli: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace ecr::cli
