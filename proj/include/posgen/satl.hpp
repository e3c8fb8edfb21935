#pragma once

// Selective attentive transfer learning: a shared embedding table read by
// an auxiliary-behavior tower and a topic tower, a bank of experts over the
// user embedding, and one bilinear attention unit per task that mixes the
// expert outputs. Also hosts the logistic-regression baseline.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "posgen/core/autograd.hpp"
#include "posgen/core/checkpoint.hpp"
#include "posgen/core/config_json.hpp"
#include "posgen/core/layers.hpp"
#include "posgen/core/optim.hpp"
#include "posgen/core/rng.hpp"
#include "posgen/corpus.hpp"
#include "posgen/eval.hpp"

namespace posgen::satl {

using ag::Matrix;
using ag::Parameter;
using ag::Tape;
using ag::Var;
using json = nlohmann::json;

struct SatlConfig {
  int emb_size = 128;
  int private_dnn_layer = 6;
  int expert_dnn_layer = 4;
  int final_dnn_layer = 2;
  int expert_num = 16;
  /// Weight of the auxiliary loss in the joint phase.
  double alpha = 0.5;
  /// Coefficient of the squared-norm regularizer.
  double lambda = 1e-6;
  int check_period = 50;
  double embedding_init_std = 0.1;

  int phase1_epochs = 2;
  int phase2_epochs = 40;
  int aux_batch = 256;
  /// Each joint-phase step draws one talk batch and one aux batch, so the
  /// aux:talk interleave ratio is joint_aux_batch : talk_batch.
  int talk_batch = 64;
  int joint_aux_batch = 128;
  /// Joint phase trains only the topic branch (topic tower, its attention
  /// matrix and head) on the talk loss; everything learned in phase 1 is
  /// frozen. Used to isolate low-level transfer.
  bool freeze_shared = false;
  /// Restore the parameters with the best validation AUC at the end of the
  /// joint phase (needs a validation set).
  bool keep_best = true;
  optim::AdamOptions adam{};

  void validate() const {
    if (emb_size < 1) throw ConfigError("satl.emb_size must be >= 1");
    if (private_dnn_layer < 1 || expert_dnn_layer < 1 || final_dnn_layer < 1) {
      throw ConfigError("satl layer counts must be >= 1");
    }
    if (expert_num < 1) throw ConfigError("satl.expert_num must be >= 1");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("satl.alpha must lie in [0, 1]");
    if (lambda < 0.0) throw ConfigError("satl.lambda must be >= 0");
    if (check_period < 1) throw ConfigError("satl.check_period must be >= 1");
    if (phase1_epochs < 0 || phase2_epochs < 0) throw ConfigError("satl epochs must be >= 0");
    if (aux_batch < 1 || talk_batch < 1 || joint_aux_batch < 1) throw ConfigError("satl batch sizes must be >= 1");
    if (adam.learning_rate <= 0) throw ConfigError("satl.learning_rate must be > 0");
  }

  json to_json() const {
    return {{"emb_size", emb_size},
            {"private_dnn_layer", private_dnn_layer},
            {"expert_dnn_layer", expert_dnn_layer},
            {"final_dnn_layer", final_dnn_layer},
            {"expert_num", expert_num},
            {"alpha", alpha},
            {"lambda", lambda},
            {"check_period", check_period},
            {"embedding_init_std", embedding_init_std},
            {"phase1_epochs", phase1_epochs},
            {"phase2_epochs", phase2_epochs},
            {"aux_batch", aux_batch},
            {"talk_batch", talk_batch},
            {"joint_aux_batch", joint_aux_batch},
            {"freeze_shared", freeze_shared},
            {"keep_best", keep_best},
            {"learning_rate", adam.learning_rate},
            {"beta1", adam.beta1},
            {"beta2", adam.beta2},
            {"epsilon", adam.epsilon},
            {"clip_norm", adam.clip_norm}};
  }

  static SatlConfig from_json(const json& j) {
    SatlConfig c;
    StrictObject o(j, "satl");
    o.get("emb_size", c.emb_size)
        .get("private_dnn_layer", c.private_dnn_layer)
        .get("expert_dnn_layer", c.expert_dnn_layer)
        .get("final_dnn_layer", c.final_dnn_layer)
        .get("expert_num", c.expert_num)
        .get("alpha", c.alpha)
        .get("lambda", c.lambda)
        .get("check_period", c.check_period)
        .get("embedding_init_std", c.embedding_init_std)
        .get("phase1_epochs", c.phase1_epochs)
        .get("phase2_epochs", c.phase2_epochs)
        .get("aux_batch", c.aux_batch)
        .get("talk_batch", c.talk_batch)
        .get("joint_aux_batch", c.joint_aux_batch)
        .get("freeze_shared", c.freeze_shared)
        .get("keep_best", c.keep_best)
        .get("learning_rate", c.adam.learning_rate)
        .get("beta1", c.adam.beta1)
        .get("beta2", c.adam.beta2)
        .get("epsilon", c.adam.epsilon)
        .get("clip_norm", c.adam.clip_norm);
    o.finish();
    c.validate();
    return c;
  }
};

enum class Branch { aux, topic };

/// Rows of the shared embedding table for one batch.
struct Batch {
  std::vector<std::vector<int>> user_rows;
  std::vector<int> entity_rows;
  std::vector<double> labels;

  std::size_t size() const { return entity_rows.size(); }
};

inline Batch make_aux_batch(const corpus::FeatureSpace& space, const std::vector<corpus::AuxSample>& data,
                            std::span<const std::size_t> idx) {
  Batch b;
  for (std::size_t i : idx) {
    const auto& s = data[i];
    corpus::encode_sample(space, s.user, s.item, corpus::EntityKind::item);
    b.user_rows.push_back(corpus::user_rows(space, s.user));
    b.entity_rows.push_back(space.item_row(s.item));
    b.labels.push_back(s.label);
  }
  return b;
}

inline Batch make_talk_batch(const corpus::FeatureSpace& space, const std::vector<corpus::TalkSample>& data,
                             std::span<const std::size_t> idx) {
  Batch b;
  for (std::size_t i : idx) {
    const auto& s = data[i];
    corpus::encode_sample(space, s.user, s.topic, corpus::EntityKind::topic);
    b.user_rows.push_back(corpus::user_rows(space, s.user));
    b.entity_rows.push_back(space.topic_row(s.topic));
    b.labels.push_back(s.label);
  }
  return b;
}

template <class T>
struct AttentionResult {
  Var<T> output;   // (B x d)
  Var<T> weights;  // (B x E), rows sum to 1
};

/// Bilinear attention over experts: a_e = tower W F_e^T per row,
/// w = softmax(a), output = sum_e w_e F_e.
template <class T>
AttentionResult<T> attention_mix(Tape<T>& tape, Var<T> tower, const std::vector<Var<T>>& experts, Var<T> w) {
  if (experts.empty()) throw ContractError("attention_mix: no experts");
  if (w.rows() != tower.cols() || w.cols() != experts.front().cols()) {
    throw ContractError("attention_mix: W must be (tower width x expert width)");
  }
  for (const auto& e : experts) {
    if (e.rows() != tower.rows() || e.cols() != experts.front().cols()) {
      throw ContractError("attention_mix: expert output shape mismatch");
    }
  }
  (void)tape;
  Var<T> projected = ag::matmul(tower, w);
  std::vector<Var<T>> logits;
  logits.reserve(experts.size());
  for (const auto& e : experts) logits.push_back(ag::rows_dot(projected, e));
  Var<T> weights = ag::softmax_rows(ag::concat_cols<T>(logits));
  Var<T> out = ag::mul_col(experts[0], ag::slice_cols(weights, 0, 1));
  for (std::size_t e = 1; e < experts.size(); ++e) {
    out = ag::add(out, ag::mul_col(experts[e], ag::slice_cols(weights, static_cast<Eigen::Index>(e), 1)));
  }
  return {out, weights};
}

/// Value-level attention_mix for a single tower row.
template <class T>
Matrix<T> attention_mix(const Matrix<T>& tower, const std::vector<Matrix<T>>& experts, const Matrix<T>& w,
                        Matrix<T>* weights_out = nullptr) {
  Tape<T> tape(false);
  std::vector<Var<T>> ev;
  for (const auto& e : experts) ev.push_back(tape.constant(e));
  auto r = attention_mix(tape, tape.constant(tower), ev, tape.constant(w));
  if (weights_out) *weights_out = r.weights.value();
  return r.output.value();
}

template <class T>
class SatlModel {
 public:
  Parameter<T> embedding;
  nn::Mlp<T> aux_tower;
  nn::Mlp<T> topic_tower;
  std::vector<nn::Mlp<T>> experts;
  Parameter<T> w_aux;
  Parameter<T> w_topic;
  nn::Mlp<T> head_aux;
  nn::Mlp<T> head_topic;

  SatlModel() = default;

  SatlModel(const corpus::FeatureSpace& space, const SatlConfig& cfg, std::uint64_t seed)
      : space_(space), config_(cfg), initialized_(true) {
    space.validate();
    cfg.validate();
    Rng rng(seed);
    const int e = cfg.emb_size;
    embedding.value = nn::normal_matrix<T>(space.shared_width(), e, static_cast<T>(cfg.embedding_init_std), rng);
    std::vector<int> tower_w{2 * e};
    for (int i = 0; i < cfg.private_dnn_layer; ++i) tower_w.push_back(e);
    aux_tower = nn::Mlp<T>(tower_w, true, rng);
    topic_tower = nn::Mlp<T>(tower_w, true, rng);
    std::vector<int> expert_w{e};
    for (int i = 0; i < cfg.expert_dnn_layer; ++i) expert_w.push_back(e);
    for (int i = 0; i < cfg.expert_num; ++i) experts.emplace_back(expert_w, true, rng);
    const T att = static_cast<T>(1.0 / e);
    w_aux.value = nn::uniform_matrix<T>(e, e, att, rng);
    w_topic.value = nn::uniform_matrix<T>(e, e, att, rng);
    std::vector<int> head_w{2 * e};
    for (int i = 1; i < cfg.final_dnn_layer; ++i) head_w.push_back(e);
    head_w.push_back(1);
    head_aux = nn::Mlp<T>(head_w, false, rng);
    head_topic = nn::Mlp<T>(head_w, false, rng);
  }

  bool initialized() const { return initialized_; }
  const SatlConfig& config() const { return config_; }
  const corpus::FeatureSpace& space() const { return space_; }

  struct Forward {
    Var<T> logit;    // (B x 1)
    Var<T> weights;  // attention weights (B x E)
    Var<T> tower;    // H or G
    Var<T> user;     // pooled user embedding
  };

  /// [attention; tower] -> head -> logit.
  Forward forward(Tape<T>& tape, const Batch& batch, Branch branch) const {
    require_initialized();
    Var<T> table = tape.param(embedding);
    Var<T> user = ag::embedding_bag(table, batch.user_rows);
    Var<T> entity = ag::gather_rows<T>(table, batch.entity_rows);
    Var<T> x = ag::concat_cols<T>({user, entity});
    const bool aux = branch == Branch::aux;
    Var<T> tower = aux ? aux_tower(tape, x) : topic_tower(tape, x);
    std::vector<Var<T>> outs;
    outs.reserve(experts.size());
    for (const auto& ex : experts) outs.push_back(ex(tape, user));
    auto att = attention_mix(tape, tower, outs, tape.param(aux ? w_aux : w_topic));
    Var<T> head_in = ag::concat_cols<T>({att.output, tower});
    Var<T> logit = aux ? head_aux(tape, head_in) : head_topic(tape, head_in);
    return {logit, att.weights, tower, user};
  }

  /// Probabilities for a batch, inference mode.
  std::vector<double> predict(const Batch& batch, Branch branch) const {
    Tape<T> tape(false);
    auto f = forward(tape, batch, branch);
    std::vector<double> p;
    p.reserve(batch.size());
    for (Eigen::Index i = 0; i < f.logit.rows(); ++i) p.push_back(corpus::sigmoid(static_cast<double>(f.logit.value()(i, 0))));
    return p;
  }

  template <class Self, class F>
  static void visit_params(Self& self, const std::string& prefix, F& f) {
    f(nn::join(prefix, "embedding"), self.embedding);
    nn::Mlp<T>::visit_params(self.aux_tower, nn::join(prefix, "aux_tower"), f);
    nn::Mlp<T>::visit_params(self.topic_tower, nn::join(prefix, "topic_tower"), f);
    for (std::size_t i = 0; i < self.experts.size(); ++i) {
      nn::Mlp<T>::visit_params(self.experts[i], nn::join(prefix, "expert" + std::to_string(i)), f);
    }
    f(nn::join(prefix, "w_aux"), self.w_aux);
    f(nn::join(prefix, "w_topic"), self.w_topic);
    nn::Mlp<T>::visit_params(self.head_aux, nn::join(prefix, "head_aux"), f);
    nn::Mlp<T>::visit_params(self.head_topic, nn::join(prefix, "head_topic"), f);
  }

  void require_initialized() const {
    if (!initialized_) throw ContractError("SATL model is not initialized");
  }

 private:
  corpus::FeatureSpace space_;
  SatlConfig config_;
  bool initialized_ = false;
};

/// Parameters that receive signal from the auxiliary task alone.
inline bool is_phase1_param(const std::string& name) {
  return name == "embedding" || name.rfind("aux_tower", 0) == 0 || name.rfind("expert", 0) == 0 ||
         name == "w_aux" || name.rfind("head_aux", 0) == 0;
}

inline bool is_topic_branch_param(const std::string& name) {
  return name.rfind("topic_tower", 0) == 0 || name == "w_topic" || name.rfind("head_topic", 0) == 0;
}

/// lambda * (sum of squares of the parameters accepted by `keep`).
template <class T, class Keep>
Var<T> regularizer(Tape<T>& tape, const SatlModel<T>& model, double lambda, Keep&& keep) {
  Var<T> total = tape.constant(Matrix<T>::Zero(1, 1));
  nn::for_each_param(model, "", [&](const std::string& name, const Parameter<T>& p) {
    if (keep(name)) total = ag::add(total, ag::sq_sum(tape.param(p)));
  });
  return ag::scale(total, static_cast<T>(lambda));
}

template <class T>
Var<T> branch_loss(Tape<T>& tape, const SatlModel<T>& model, const Batch& batch, Branch branch) {
  auto f = model.forward(tape, batch, branch);
  std::vector<T> y(batch.labels.begin(), batch.labels.end());
  return ag::bce_with_logits<T>(f.logit, y);
}

/// Phase-1 objective: auxiliary cross-entropy + lambda * Omega over the
/// phase-1 parameters.
template <class T>
Var<T> aux_phase_loss(Tape<T>& tape, const SatlModel<T>& model, const Batch& aux, double lambda) {
  Var<T> l = branch_loss(tape, model, aux, Branch::aux);
  if (lambda == 0.0) return l;
  return ag::add(l, regularizer(tape, model, lambda, is_phase1_param));
}

/// Joint objective alpha * L_aux + (1 - alpha) * L_tp + lambda * Omega(all).
template <class T>
Var<T> joint_loss(Tape<T>& tape, const SatlModel<T>& model, const Batch& aux, const Batch& talk, double alpha,
                  double lambda) {
  Var<T> la = branch_loss(tape, model, aux, Branch::aux);
  Var<T> lt = branch_loss(tape, model, talk, Branch::topic);
  Var<T> l = ag::add(ag::scale(la, static_cast<T>(alpha)), ag::scale(lt, static_cast<T>(1.0 - alpha)));
  if (lambda == 0.0) return l;
  return ag::add(l, regularizer(tape, model, lambda, [](const std::string&) { return true; }));
}

template <class T>
double forward_aux(const SatlModel<T>& model, const corpus::AuxSample& s) {
  model.require_initialized();
  const std::size_t idx[] = {0};
  return model.predict(make_aux_batch(model.space(), std::vector<corpus::AuxSample>{s}, idx), Branch::aux).front();
}

template <class T>
double forward_topic(const SatlModel<T>& model, const corpus::TalkSample& s) {
  model.require_initialized();
  const std::size_t idx[] = {0};
  return model.predict(make_talk_batch(model.space(), std::vector<corpus::TalkSample>{s}, idx), Branch::topic).front();
}

/// Topic-branch probability of every topic for one user, indexed by topic id.
template <class T>
std::vector<double> score_all_topics(const SatlModel<T>& model, const corpus::UserFeatures& user) {
  model.require_initialized();
  const auto& space = model.space();
  Batch b;
  const auto rows = corpus::user_rows(space, user);
  for (int t = 0; t < space.topic_vocab_size; ++t) {
    b.user_rows.push_back(rows);
    b.entity_rows.push_back(space.topic_row(t));
    b.labels.push_back(0);
  }
  return model.predict(b, Branch::topic);
}

struct ScoredTopic {
  int topic = 0;
  double score = 0;
  bool operator==(const ScoredTopic&) const = default;
};

inline constexpr int kDefaultTopK = 10;

/// Top-k topics by descending score, ties by ascending topic id.
template <class T>
std::vector<ScoredTopic> recommend_topics(const SatlModel<T>& model, const corpus::UserFeatures& user,
                                          int k = kDefaultTopK) {
  model.require_initialized();
  if (k < 1 || k > model.space().topic_vocab_size) {
    throw ValidationError("k = " + std::to_string(k) + " outside [1, " +
                          std::to_string(model.space().topic_vocab_size) + "]");
  }
  const auto scores = score_all_topics(model, user);
  std::vector<ScoredTopic> all;
  for (int t = 0; t < static_cast<int>(scores.size()); ++t) all.push_back({t, scores[static_cast<std::size_t>(t)]});
  std::sort(all.begin(), all.end(), [](const ScoredTopic& a, const ScoredTopic& b) {
    return a.score != b.score ? a.score > b.score : a.topic < b.topic;
  });
  all.resize(static_cast<std::size_t>(k));
  return all;
}

struct UserEmbedding {
  corpus::UserFeatures user;
  Eigen::VectorXd vector;
};

/// Sum of the shared-table rows of the user's features.
template <class T>
UserEmbedding user_embedding(const SatlModel<T>& model, const corpus::UserFeatures& user) {
  model.require_initialized();
  Eigen::VectorXd v = Eigen::VectorXd::Zero(model.config().emb_size);
  for (int r : corpus::user_rows(model.space(), user)) v += model.embedding.value.row(r).transpose().template cast<double>();
  return {user, v};
}

/// Topic rows of the shared table, (topic_vocab x emb_size).
template <class T>
Eigen::MatrixXd topic_embeddings(const SatlModel<T>& model) {
  const auto& s = model.space();
  return model.embedding.value.middleRows(s.topic_row(0), s.topic_vocab_size).template cast<double>();
}

// ---------------------------------------------------------------------------
// Training

struct Validation {
  std::vector<corpus::AuxSample> aux;
  std::vector<corpus::TalkSample> talk;
};

namespace detail {

template <class T, class Data, class MakeBatch>
double auc_of(const SatlModel<T>& model, const Data& data, MakeBatch make, Branch branch) {
  std::vector<double> scores;
  std::vector<int> labels;
  constexpr std::size_t kChunk = 1024;
  for (std::size_t at = 0; at < data.size(); at += kChunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = at; i < std::min(data.size(), at + kChunk); ++i) idx.push_back(i);
    auto p = model.predict(make(model.space(), data, idx), branch);
    scores.insert(scores.end(), p.begin(), p.end());
    for (std::size_t i : idx) labels.push_back(data[i].label);
  }
  try {
    return eval::auc(scores, labels);
  } catch (const MetricError&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

/// Cycles through a shuffled index order, reshuffling at each wrap.
class BatchCursor {
 public:
  BatchCursor(std::size_t n, Rng& rng) : order_(n), rng_(rng) {
    std::iota(order_.begin(), order_.end(), 0);
    rng_.shuffle(order_);
  }
  std::vector<std::size_t> next(std::size_t size) {
    std::vector<std::size_t> out;
    while (out.size() < size && !order_.empty()) {
      if (pos_ == order_.size()) {
        rng_.shuffle(order_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  Rng& rng_;
};

}  // namespace detail

template <class T>
double aux_auc(const SatlModel<T>& model, const std::vector<corpus::AuxSample>& data) {
  return detail::auc_of(model, data, make_aux_batch, Branch::aux);
}

template <class T>
double talk_auc(const SatlModel<T>& model, const std::vector<corpus::TalkSample>& data) {
  return detail::auc_of(model, data, make_talk_batch, Branch::topic);
}

/// Two-phase training. Phase 1 fits embedding, aux tower, experts, W_aux
/// and the aux head on auxiliary samples. Phase 2 minimizes the joint
/// objective over steps that each pair one talk batch with one aux batch.
/// Trace metrics: phase1.loss, phase2.loss (mean over each check period),
/// val.aux_auc, val.talk_auc (when validation data is given).
template <class T>
std::pair<SatlModel<T>, eval::MetricReport> train_satl(SatlModel<T> model, const std::vector<corpus::AuxSample>& aux,
                                                      const std::vector<corpus::TalkSample>& talk,
                                                      const SatlConfig& cfg, std::uint64_t seed,
                                                      const Validation* val = nullptr) {
  model.require_initialized();
  cfg.validate();
  if (aux.empty() || talk.empty()) throw ValidationError("train_satl needs non-empty aux and talk sets");
  const auto& space = model.space();
  Rng rng(seed);
  eval::MetricReport report;
  long step = 0;

  auto check = [&](const T loss) {
    if (!std::isfinite(static_cast<double>(loss))) throw DivergenceError("SATL loss is not finite", step);
  };
  auto apply = [&](optim::Adam<T>& opt, Tape<T>& tape, auto&& keep) {
    auto g = optim::GradientBatch<T, SatlModel<T>>::collect(model, tape);
    std::size_t i = 0;
    nn::for_each_param(model, "", [&](const std::string& name, const Parameter<T>&) {
      if (!keep(name)) g.grads[i].setZero();
      ++i;
    });
    opt.step(g.params, g.grads);
  };

  // Phase 1.
  {
    optim::Adam<T> opt(cfg.adam);
    detail::BatchCursor cursor(aux.size(), rng);
    const long steps = static_cast<long>(cfg.phase1_epochs) *
                       static_cast<long>((aux.size() + static_cast<std::size_t>(cfg.aux_batch) - 1) / static_cast<std::size_t>(cfg.aux_batch));
    double window = 0;
    int in_window = 0;
    for (long s = 0; s < steps; ++s, ++step) {
      const auto idx = cursor.next(static_cast<std::size_t>(cfg.aux_batch));
      Tape<T> tape;
      Var<T> loss = aux_phase_loss(tape, model, make_aux_batch(space, aux, idx), cfg.lambda);
      check(loss.scalar());
      tape.backward(loss);
      apply(opt, tape, is_phase1_param);
      window += static_cast<double>(loss.scalar());
      ++in_window;
      if ((s + 1) % cfg.check_period == 0 || s + 1 == steps) {
        report.log(step, "phase1.loss", window / in_window);
        window = 0;
        in_window = 0;
        if (val && !val->aux.empty()) report.log(step, "val.aux_auc", aux_auc(model, val->aux));
      }
    }
  }

  // Phase 2.
  {
    optim::Adam<T> opt(cfg.adam);
    detail::BatchCursor talk_cursor(talk.size(), rng);
    detail::BatchCursor aux_cursor(aux.size(), rng);
    const long steps = static_cast<long>(cfg.phase2_epochs) *
                       static_cast<long>((talk.size() + static_cast<std::size_t>(cfg.talk_batch) - 1) / static_cast<std::size_t>(cfg.talk_batch));
    double best = -1;
    std::optional<SatlModel<T>> best_model;
    double window = 0;
    int in_window = 0;
    for (long s = 0; s < steps; ++s, ++step) {
      const auto ti = talk_cursor.next(static_cast<std::size_t>(cfg.talk_batch));
      Tape<T> tape;
      Var<T> loss;
      if (cfg.freeze_shared) {
        loss = branch_loss(tape, model, make_talk_batch(space, talk, ti), Branch::topic);
        if (cfg.lambda != 0.0) loss = ag::add(loss, regularizer(tape, model, cfg.lambda, is_topic_branch_param));
      } else {
        const auto ai = aux_cursor.next(static_cast<std::size_t>(cfg.joint_aux_batch));
        loss = joint_loss(tape, model, make_aux_batch(space, aux, ai), make_talk_batch(space, talk, ti), cfg.alpha,
                          cfg.lambda);
      }
      check(loss.scalar());
      tape.backward(loss);
      if (cfg.freeze_shared) {
        apply(opt, tape, is_topic_branch_param);
      } else {
        apply(opt, tape, [](const std::string&) { return true; });
      }
      window += static_cast<double>(loss.scalar());
      ++in_window;
      if ((s + 1) % cfg.check_period == 0 || s + 1 == steps) {
        report.log(step, "phase2.loss", window / in_window);
        window = 0;
        in_window = 0;
        if (val && !val->talk.empty()) {
          const double a = talk_auc(model, val->talk);
          report.log(step, "val.talk_auc", a);
          if (cfg.keep_best && std::isfinite(a) && a > best) {
            best = a;
            best_model = model;
          }
        }
      }
    }
    if (best_model) {
      model = std::move(*best_model);
      report.set("val.best_talk_auc", best);
    }
  }
  report.set("train.steps", static_cast<double>(step));
  return {std::move(model), std::move(report)};
}

// ---------------------------------------------------------------------------
// Checkpoints

template <class T>
Checkpoint<T> to_checkpoint(const SatlModel<T>& model) {
  model.require_initialized();
  Checkpoint<T> ck;
  ck.kind = "satl";
  ck.meta["config"] = model.config().to_json();
  ck.meta["feature_space"] = model.space().to_json();
  ck.meta["feature_space_hash"] = model.space().hash();
  store_parameters(ck, model);
  return ck;
}

/// Rebuilds a model; `expected` (when given) must match the stored
/// FeatureSpace exactly.
template <class T>
SatlModel<T> from_checkpoint(const Checkpoint<T>& ck, const corpus::FeatureSpace* expected = nullptr) {
  if (ck.kind != "satl") throw CheckpointError("expected a satl checkpoint, found '" + ck.kind + "'");
  const auto space = corpus::FeatureSpace::from_json(ck.meta.at("feature_space"));
  if (space.hash() != ck.meta.at("feature_space_hash").template get<std::string>()) {
    throw CheckpointError("satl checkpoint feature-space hash does not match its feature space");
  }
  if (expected && expected->hash() != space.hash()) {
    throw CheckpointError("satl checkpoint was trained on a different feature space (" + space.hash() + " vs " +
                          expected->hash() + ")");
  }
  SatlModel<T> m(space, SatlConfig::from_json(ck.meta.at("config")), 0);
  restore_parameters(ck, m);
  return m;
}

// ---------------------------------------------------------------------------
// Logistic-regression baseline on raw multi-hot talk features.

/// L2-regularized logistic regression over [user slots | topic] one-hots,
/// fitted by Newton iterations (IRLS).
struct LogisticRegression {
  corpus::FeatureSpace space;
  Eigen::VectorXd weights;  // user_width + topic_vocab, then bias
  double l2 = 1e-2;

  int width() const { return space.user_width() + space.topic_vocab_size; }

  double logit(const corpus::UserFeatures& user, int topic) const {
    double z = weights(width());
    for (int i : corpus::encode_sample(space, user, topic, corpus::EntityKind::topic)) z += weights(i);
    return z;
  }

  std::vector<double> score_all_topics(const corpus::UserFeatures& user) const {
    std::vector<double> s;
    for (int t = 0; t < space.topic_vocab_size; ++t) s.push_back(corpus::sigmoid(logit(user, t)));
    return s;
  }

  static LogisticRegression untrained(const corpus::FeatureSpace& space) {
    LogisticRegression lr;
    lr.space = space;
    lr.weights = Eigen::VectorXd::Zero(lr.width() + 1);
    return lr;
  }

  static LogisticRegression fit(const corpus::FeatureSpace& space, const std::vector<corpus::TalkSample>& train,
                                double l2 = 1e-2, int iterations = 30) {
    if (train.empty()) throw ValidationError("logistic regression needs training samples");
    const auto pos = std::count_if(train.begin(), train.end(), [](const auto& s) { return s.label != 0; });
    if (pos == 0 || pos == static_cast<long>(train.size())) {
      throw ValidationError("logistic regression training set has a single class");
    }
    LogisticRegression lr = untrained(space);
    lr.l2 = l2;
    const int d = lr.width() + 1;
    std::vector<std::vector<int>> rows;
    for (const auto& s : train) {
      auto r = corpus::encode_sample(space, s.user, s.topic, corpus::EntityKind::topic);
      r.push_back(lr.width());
      rows.push_back(std::move(r));
    }
    const double n = static_cast<double>(train.size());
    for (int it = 0; it < iterations; ++it) {
      Eigen::VectorXd grad = l2 * lr.weights;
      Eigen::MatrixXd hess = l2 * Eigen::MatrixXd::Identity(d, d);
      grad(d - 1) -= l2 * lr.weights(d - 1);  // bias is not penalized
      hess(d - 1, d - 1) -= l2;
      for (std::size_t i = 0; i < train.size(); ++i) {
        double z = 0;
        for (int j : rows[i]) z += lr.weights(j);
        const double p = corpus::sigmoid(z);
        const double r = (p - train[i].label) / n;
        const double w = p * (1 - p) / n;
        for (int a : rows[i]) {
          grad(a) += r;
          for (int b : rows[i]) hess(a, b) += w;
        }
      }
      hess.diagonal().array() += 1e-9;
      const Eigen::VectorXd delta = hess.ldlt().solve(grad);
      lr.weights -= delta;
      if (delta.norm() < 1e-10) break;
    }
    return lr;
  }
};

/// Fits LR on the talk training set only and reports AUC, NDCG@n and
/// Recall@n under the shared ranking protocol.
inline eval::MetricReport lr_baseline(const corpus::FeatureSpace& space, const std::vector<corpus::TalkSample>& train,
                                      const std::vector<corpus::TalkSample>& test, int n = kDefaultTopK) {
  if (test.empty()) throw ValidationError("lr_baseline needs a non-empty test set");
  const auto lr = LogisticRegression::fit(space, train);
  const auto s = eval::evaluate_ranking(test, space.topic_vocab_size, n,
                                        [&](const corpus::UserFeatures& u) { return lr.score_all_topics(u); });
  eval::MetricReport r;
  r.set("auc", s.auc);
  r.set("ndcg@" + std::to_string(n), s.ndcg);
  r.set("recall@" + std::to_string(n), s.recall);
  return r;
}

template <class T>
eval::MetricReport evaluate_satl(const SatlModel<T>& model, const std::vector<corpus::TalkSample>& test,
                                 int n = kDefaultTopK) {
  const auto s = eval::evaluate_ranking(test, model.space().topic_vocab_size, n,
                                        [&](const corpus::UserFeatures& u) { return score_all_topics(model, u); });
  eval::MetricReport r;
  r.set("auc", s.auc);
  r.set("ndcg@" + std::to_string(n), s.ndcg);
  r.set("recall@" + std::to_string(n), s.recall);
  return r;
}

}  // namespace posgen::satl
