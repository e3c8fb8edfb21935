#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "posgen/eval.hpp"
#include "posgen/core/rng.hpp"

using namespace posgen;
using namespace posgen::eval;

TEST(Auc, Examples) {
  EXPECT_DOUBLE_EQ(auc(std::vector<double>{0.9, 0.8, 0.1}, std::vector<int>{1, 1, 0}), 1.0);
  EXPECT_DOUBLE_EQ(auc(std::vector<double>{0.5, 0.5, 0.5, 0.5}, std::vector<int>{1, 0, 1, 0}), 0.5);
  EXPECT_DOUBLE_EQ(auc(std::vector<double>{0.9, 0.8, 0.3}, std::vector<int>{1, 0, 1}), 0.5);
  EXPECT_THROW(auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), MetricError);
}

TEST(Auc, InvariantUnderIncreasingTransformAndJointShuffle) {
  const std::vector<double> s{0.1, 0.7, 0.3, 0.3, 0.9, 0.2};
  const std::vector<int> y{0, 1, 0, 1, 1, 0};
  std::vector<double> t;
  for (double x : s) t.push_back(std::exp(3 * x) + 1);
  EXPECT_DOUBLE_EQ(auc(s, y), auc(t, y));
  const std::vector<double> s2{0.9, 0.3, 0.1, 0.2, 0.7, 0.3};
  const std::vector<int> y2{1, 1, 0, 0, 1, 0};
  EXPECT_DOUBLE_EQ(auc(s, y), auc(s2, y2));
}

TEST(Ranking, NdcgAndRecallExamples) {
  RankingInstance ideal{{0, 0.9, 1}, {1, 0.8, 1}, {2, 0.1, 0}};
  EXPECT_DOUBLE_EQ(ndcg_at_n(ideal, 2), 1.0);
  EXPECT_DOUBLE_EQ(recall_at_n(ideal, 2), 1.0);
  RankingInstance second{{0, 0.9, 0}, {1, 0.8, 1}, {2, 0.1, 0}};
  EXPECT_NEAR(ndcg_at_n(second, 2), 1.0 / std::log2(3.0), 1e-15);
  RankingInstance none{{0, 0.9, 0}, {1, 0.8, 0}};
  EXPECT_EQ(ndcg_at_n(none, 2), 0.0);
  EXPECT_EQ(recall_at_n(none, 2), 0.0);
  EXPECT_THROW(ndcg_at_n(ideal, 0), MetricError);
}

TEST(Ranking, RecallUsesTruncatedIdeal) {
  RankingInstance many{{0, 0.9, 1}, {1, 0.8, 1}, {2, 0.7, 1}, {3, 0.1, 0}};
  EXPECT_DOUBLE_EQ(recall_at_n(many, 2), 1.0);
}

TEST(Ranking, TiesBreakByTopicId) {
  RankingInstance tie{{3, 0.5, 0}, {1, 0.5, 1}};
  EXPECT_DOUBLE_EQ(recall_at_n(tie, 1), 1.0);
}

TEST(Bleu, Examples) {
  const std::vector<int> ref{1, 2, 3};
  EXPECT_DOUBLE_EQ(bleu(ref, ref, 4 > 3 ? 3 : 3), 1.0);
  EXPECT_DOUBLE_EQ(bleu(std::vector<int>{7, 8, 9}, ref, 1), 0.0);
  EXPECT_NEAR(bleu(std::vector<int>{1, 1, 2}, ref, 1), 2.0 / 3.0, 1e-15);
  EXPECT_EQ(bleu(std::vector<int>{}, ref, 1), 0.0);
  const std::vector<int> long_ref{5, 6, 7, 8, 9, 10};
  EXPECT_DOUBLE_EQ(bleu(long_ref, long_ref, 4), 1.0);
}

TEST(Bleu, BrevityPenalty) {
  const std::vector<int> ref{1, 2, 3, 4};
  EXPECT_NEAR(bleu(std::vector<int>{1, 2}, ref, 1), std::exp(1.0 - 2.0), 1e-15);
}

TEST(Sequences, SimilarityAndCoverage) {
  const std::vector<int> a{4, 9}, b{9, 4};
  EXPECT_DOUBLE_EQ(sequence_similarity(a, a), 1.0);
  EXPECT_DOUBLE_EQ(coverage(a, a), 1.0);
  EXPECT_DOUBLE_EQ(coverage(a, b), 1.0);
  EXPECT_DOUBLE_EQ(sequence_similarity(a, b), 0.5);
  EXPECT_EQ(sequence_similarity(std::vector<int>{}, b), 0.0);
}

TEST(Sentences, CosineOfSalientTokens) {
  Eigen::MatrixXd emb = Eigen::MatrixXd::Zero(8, 2);
  emb.row(4) << 1, 0;
  emb.row(5) << 0, 1;
  emb.row(6) << 1, 1;
  const std::vector<double> sal(8, 1.0);
  EXPECT_NEAR(sentence_similarity(std::vector<int>{4, 2}, std::vector<int>{4, 2}, emb, sal), 1.0, 1e-12);
  EXPECT_NEAR(sentence_similarity(std::vector<int>{4}, std::vector<int>{5}, emb, sal), 0.0, 1e-12);
  EXPECT_NEAR(sentence_similarity(std::vector<int>{6}, std::vector<int>{4}, emb, sal), 1 / std::sqrt(2.0), 1e-12);
}

TEST(Sentences, TopKKeepsMostSalient) {
  const std::vector<int> s{4, 5, 6, 7, 2};
  const std::vector<double> sal{0, 0, 0, 0, 1.0, 3.0, 2.0, 0.5};
  EXPECT_EQ(top_k_tokens(s, sal, 2), (std::vector<int>{5, 6}));
}

TEST(Report, RelativeImprovement) { EXPECT_NEAR(relative_improvement(0.80, 0.685), 0.115 / 0.685, 1e-15); }

TEST(Report, FormatDoubleRoundTrips) {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, 12345.678}) EXPECT_EQ(std::stod(format_double(v)), v);
}

TEST(Oracles, RandomInstancesAgreeWithBruteForce) {
  Rng rng(17);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = 2 + static_cast<int>(rng.index(9));
    std::vector<double> s;
    std::vector<int> y;
    eval::RankingInstance inst;
    for (int i = 0; i < n; ++i) {
      s.push_back(static_cast<double>(rng.index(4)) / 4);  // coarse grid forces ties
      y.push_back(rng.bernoulli(0.4) ? 1 : 0);
      inst.push_back({i, s.back(), y.back()});
    }
    y[0] = 1;
    y[1] = 0;
    inst[0].relevance = 1;
    inst[1].relevance = 0;
    EXPECT_NEAR(auc(s, y), oracle::auc(s, y), 1e-12);
    const int at = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(n)));
    EXPECT_NEAR(ndcg_at_n(inst, at), oracle::ndcg(inst, at), 1e-12);
    EXPECT_NEAR(recall_at_n(inst, at), oracle::recall(inst, at), 1e-12);

    std::vector<int> a, b;
    for (std::size_t i = 0, la = 1 + rng.index(10); i < la; ++i) a.push_back(static_cast<int>(rng.index(4)));
    for (std::size_t i = 0, lb = 1 + rng.index(10); i < lb; ++i) b.push_back(static_cast<int>(rng.index(4)));
    EXPECT_NEAR(bleu(a, b, 1), oracle::bleu(a, b, 1), 1e-12);
    EXPECT_NEAR(bleu(a, b, 4), oracle::bleu(a, b, 4), 1e-12);
    EXPECT_NEAR(sequence_similarity(a, b), oracle::similarity(a, b), 1e-12);
    EXPECT_NEAR(coverage(a, b), oracle::coverage(a, b), 1e-12);
  }
}
