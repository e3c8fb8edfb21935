#pragma once

// Ranking and text-overlap metrics, plus the MetricReport container.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "posgen/core/error.hpp"
#include "posgen/corpus.hpp"

namespace posgen::eval {

/// Shortest text that parses back to exactly `v`.
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct TracePoint {
  long step = 0;
  std::string metric;
  double value = 0;
};

/// Named scalars in insertion order plus a (step, metric, value) trace.
struct MetricReport {
  std::vector<std::pair<std::string, double>> scalars;
  std::vector<TracePoint> trace;

  void set(const std::string& name, double v) {
    for (auto& [n, x] : scalars) {
      if (n == name) {
        x = v;
        return;
      }
    }
    scalars.emplace_back(name, v);
  }

  bool has(const std::string& name) const {
    return std::any_of(scalars.begin(), scalars.end(), [&](const auto& s) { return s.first == name; });
  }

  double get(const std::string& name) const {
    for (const auto& [n, x] : scalars)
      if (n == name) return x;
    throw MetricError("report has no metric '" + name + "'");
  }

  void log(long step, const std::string& metric, double value) { trace.push_back({step, metric, value}); }

  /// Values of one metric in trace order.
  std::vector<std::pair<long, double>> series(const std::string& metric) const {
    std::vector<std::pair<long, double>> out;
    for (const auto& p : trace)
      if (p.metric == metric) out.emplace_back(p.step, p.value);
    return out;
  }

  std::string format_scalars() const {
    std::string s;
    for (const auto& [n, x] : scalars) s += n + "\t" + format_double(x) + "\n";
    return s;
  }

  std::string format_trace() const {
    std::string s;
    for (const auto& p : trace) s += std::to_string(p.step) + "\t" + p.metric + "\t" + format_double(p.value) + "\n";
    return s;
  }
};

// ---------------------------------------------------------------------------
// Ranking

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from mid-ranks (rank-sum form).
inline double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw MetricError("auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] != 0) {
        pos_rank_sum += mid;
        ++pos;
      }
    }
    i = j;
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) throw MetricError("auc undefined: only one class present");
  const double p = static_cast<double>(pos);
  return (pos_rank_sum - p * (p + 1) / 2.0) / (p * static_cast<double>(neg));
}

struct RankedItem {
  int topic = 0;
  double score = 0;
  int relevance = 0;
};

using RankingInstance = std::vector<RankedItem>;

/// Items ordered by descending score, ties by ascending topic id.
inline RankingInstance ranked(RankingInstance items) {
  std::sort(items.begin(), items.end(), [](const RankedItem& a, const RankedItem& b) {
    return a.score != b.score ? a.score > b.score : a.topic < b.topic;
  });
  return items;
}

inline void check_n(int n) {
  if (n < 1) throw MetricError("@N metrics need N >= 1");
}

/// DCG with gain = relevance and discount 1/log2(rank + 1) over the top N,
/// divided by the DCG of the ideal ordering. 0 when nothing is relevant.
inline double ndcg_at_n(const RankingInstance& inst, int n) {
  check_n(n);
  const auto r = ranked(inst);
  int positives = 0;
  for (const auto& it : r) positives += it.relevance != 0;
  if (positives == 0) return 0.0;
  double dcg = 0;
  for (int i = 0; i < std::min<int>(n, static_cast<int>(r.size())); ++i) {
    if (r[static_cast<std::size_t>(i)].relevance != 0) dcg += 1.0 / std::log2(i + 2.0);
  }
  double ideal = 0;
  for (int i = 0; i < std::min(n, positives); ++i) ideal += 1.0 / std::log2(i + 2.0);
  return dcg / ideal;
}

/// Relevant items in the top N over min(total relevant, N). 0 when nothing
/// is relevant.
inline double recall_at_n(const RankingInstance& inst, int n) {
  check_n(n);
  const auto r = ranked(inst);
  int positives = 0;
  for (const auto& it : r) positives += it.relevance != 0;
  if (positives == 0) return 0.0;
  int hits = 0;
  for (int i = 0; i < std::min<int>(n, static_cast<int>(r.size())); ++i) hits += r[static_cast<std::size_t>(i)].relevance != 0;
  return static_cast<double>(hits) / static_cast<double>(std::min(positives, n));
}

struct RankingSummary {
  double auc = 0;
  double ndcg = 0;
  double recall = 0;
  int users = 0;
};

/// Test protocol shared by every topic recommender. AUC is pooled over all
/// test samples. NDCG@N and Recall@N are computed per distinct user over
/// the full topic vocabulary (relevant = topics with a positive test label)
/// and averaged over users with at least one positive.
///
/// `score_topics(user)` must return one score per topic.
template <class ScoreTopics>
RankingSummary evaluate_ranking(const std::vector<corpus::TalkSample>& test, int topic_vocab, int n,
                                ScoreTopics&& score_topics) {
  std::map<corpus::UserFeatures, std::vector<const corpus::TalkSample*>> by_user;
  for (const auto& t : test) by_user[t.user].push_back(&t);
  std::vector<double> scores;
  std::vector<int> labels;
  RankingSummary out;
  double ndcg = 0, recall = 0;
  for (const auto& [user, samples] : by_user) {
    const std::vector<double> all = score_topics(user);
    if (static_cast<int>(all.size()) != topic_vocab) throw ContractError("scorer returned wrong width");
    std::vector<int> rel(static_cast<std::size_t>(topic_vocab), 0);
    for (const auto* s : samples) {
      scores.push_back(all[static_cast<std::size_t>(s->topic)]);
      labels.push_back(s->label);
      if (s->label) rel[static_cast<std::size_t>(s->topic)] = 1;
    }
    if (std::count(rel.begin(), rel.end(), 1) == 0) continue;
    RankingInstance inst;
    for (int t = 0; t < topic_vocab; ++t) inst.push_back({t, all[static_cast<std::size_t>(t)], rel[static_cast<std::size_t>(t)]});
    ndcg += ndcg_at_n(inst, n);
    recall += recall_at_n(inst, n);
    ++out.users;
  }
  out.auc = auc(scores, labels);
  if (out.users > 0) {
    out.ndcg = ndcg / out.users;
    out.recall = recall / out.users;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sequences and sentences

/// Single-reference BLEU up to order `max_order`: clipped n-gram precisions,
/// geometric mean, brevity penalty exp(1 - r/c) when the candidate is
/// shorter. No smoothing, so any zero precision gives 0.
inline double bleu(std::span<const int> candidate, std::span<const int> reference, int max_order) {
  if (reference.empty()) throw MetricError("bleu: empty reference");
  if (max_order < 1) throw MetricError("bleu: order must be >= 1");
  if (candidate.empty()) return 0.0;
  double log_sum = 0;
  for (int n = 1; n <= max_order; ++n) {
    if (static_cast<int>(candidate.size()) < n) return 0.0;
    std::map<std::vector<int>, int> ref_counts;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= reference.size(); ++i) {
      ++ref_counts[std::vector<int>(reference.begin() + static_cast<long>(i), reference.begin() + static_cast<long>(i) + n)];
    }
    std::map<std::vector<int>, int> cand_counts;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= candidate.size(); ++i) {
      ++cand_counts[std::vector<int>(candidate.begin() + static_cast<long>(i), candidate.begin() + static_cast<long>(i) + n)];
    }
    int matched = 0;
    for (const auto& [gram, c] : cand_counts) {
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) matched += std::min(c, it->second);
    }
    const int total = static_cast<int>(candidate.size()) - n + 1;
    if (matched == 0) return 0.0;
    log_sum += std::log(static_cast<double>(matched) / total);
  }
  const double c = static_cast<double>(candidate.size());
  const double r = static_cast<double>(reference.size());
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return bp * std::exp(log_sum / max_order);
}

inline std::size_t lcs_length(std::span<const int> a, std::span<const int> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// Order-sensitive agreement: |LCS| / max(|pred|, |ref|).
inline double sequence_similarity(std::span<const int> pred, std::span<const int> ref) {
  if (ref.empty()) throw MetricError("similarity: empty reference");
  if (pred.empty()) return 0.0;
  return static_cast<double>(lcs_length(pred, ref)) / static_cast<double>(std::max(pred.size(), ref.size()));
}

/// Order-free agreement: |multiset intersection| / |ref|.
inline double coverage(std::span<const int> pred, std::span<const int> ref) {
  if (ref.empty()) throw MetricError("coverage: empty reference");
  if (pred.empty()) return 0.0;
  std::map<int, int> counts;
  for (int r : ref) ++counts[r];
  std::size_t hit = 0;
  for (int p : pred) {
    auto it = counts.find(p);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++hit;
    }
  }
  return static_cast<double>(hit) / static_cast<double>(ref.size());
}

inline bool is_reserved_word(int w) { return w >= 0 && w < static_cast<int>(corpus::kReservedWords.size()); }

/// Inverse document frequency over `sentences`: log((1 + N) / (1 + df)) + 1.
inline std::vector<double> idf_weights(const std::vector<std::vector<int>>& sentences, int vocab) {
  std::vector<int> df(static_cast<std::size_t>(vocab), 0);
  for (const auto& s : sentences) {
    std::vector<int> uniq(s.begin(), s.end());
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    for (int w : uniq)
      if (w >= 0 && w < vocab) ++df[static_cast<std::size_t>(w)];
  }
  std::vector<double> idf(static_cast<std::size_t>(vocab));
  const double n = static_cast<double>(sentences.size());
  for (int w = 0; w < vocab; ++w) idf[static_cast<std::size_t>(w)] = std::log((1.0 + n) / (1.0 + df[static_cast<std::size_t>(w)])) + 1.0;
  return idf;
}

/// The k most salient non-reserved token occurrences of `s` (ties keep the
/// earlier position).
inline std::vector<int> top_k_tokens(std::span<const int> s, std::span<const double> salience, int k) {
  std::vector<std::pair<int, int>> pos;  // (position, word)
  for (std::size_t i = 0; i < s.size(); ++i)
    if (!is_reserved_word(s[i])) pos.emplace_back(static_cast<int>(i), s[i]);
  std::stable_sort(pos.begin(), pos.end(), [&](const auto& a, const auto& b) {
    return salience[static_cast<std::size_t>(a.second)] > salience[static_cast<std::size_t>(b.second)];
  });
  if (static_cast<int>(pos.size()) > k) pos.resize(static_cast<std::size_t>(k));
  std::vector<int> out;
  for (const auto& p : pos) out.push_back(p.second);
  return out;
}

/// Cosine between the mean embeddings of each sentence's top-k salient
/// tokens, floored at 0. `embeddings` is (vocab x dim).
inline double sentence_similarity(std::span<const int> pred, std::span<const int> ref,
                                  const Eigen::MatrixXd& embeddings, std::span<const double> salience, int k = 8) {
  if (ref.empty()) throw MetricError("similarity: empty reference");
  const auto a = top_k_tokens(pred, salience, k);
  const auto b = top_k_tokens(ref, salience, k);
  if (a.empty() || b.empty()) return 0.0;
  Eigen::VectorXd va = Eigen::VectorXd::Zero(embeddings.cols()), vb = va;
  for (int w : a) va += embeddings.row(w).transpose();
  for (int w : b) vb += embeddings.row(w).transpose();
  va /= static_cast<double>(a.size());
  vb /= static_cast<double>(b.size());
  const double na = va.norm(), nb = vb.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(va.dot(vb) / (na * nb), 0.0, 1.0);
}

/// Relative improvement of `ours` over the best baseline.
inline double relative_improvement(double ours, double best_other) { return (ours - best_other) / best_other; }

}  // namespace posgen::eval
