#pragma once

// Context management unit: a recurrent topic planner conditioned on the user
// embedding, trained with the cumulated softmax loss over teacher-forced
// prefixes and decoded with beam search.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
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

namespace posgen::cmu {

using ag::Matrix;
using ag::Parameter;
using ag::Tape;
using ag::Var;
using json = nlohmann::json;

struct CmuConfig {
  int user_emb_size = 128;
  /// Width of the topic embeddings fed to the recurrent unit.
  int item_emb_size = 128;
  double stop_prob = 4e-2;
  int max_topic_len = 5;
  int beam_width = 4;
  int hidden_size = 64;
  /// Number of linear layers in the output head (>= 1).
  int head_layers = 2;
  int head_width = 64;
  /// Beam score = log p / len^length_penalty.
  double length_penalty = 1.0;
  /// When false the planner sees a constant vector instead of the user
  /// embedding (the no-user-conditioning ablation).
  bool use_user = true;
  int epochs = 40;
  int batch_size = 32;
  optim::AdamOptions adam{};

  void validate() const {
    if (user_emb_size < 1 || item_emb_size < 1) throw ConfigError("cmu embedding widths must be >= 1");
    if (!(stop_prob > 0.0 && stop_prob < 1.0)) throw ConfigError("cmu.stop_prob must lie in (0, 1)");
    if (max_topic_len < 1) throw ConfigError("cmu.max_topic_len must be >= 1");
    if (beam_width < 1) throw ConfigError("cmu.beam_width must be >= 1");
    if (hidden_size < 1 || head_layers < 1 || head_width < 1) throw ConfigError("cmu widths/depths must be >= 1");
    if (length_penalty < 0.0) throw ConfigError("cmu.length_penalty must be >= 0");
    if (epochs < 0 || batch_size < 1) throw ConfigError("cmu.epochs >= 0 and cmu.batch_size >= 1 required");
    if (adam.learning_rate <= 0) throw ConfigError("cmu.learning_rate must be > 0");
  }

  json to_json() const {
    return {{"user_emb_size", user_emb_size}, {"item_emb_size", item_emb_size},
            {"stop_prob", stop_prob},         {"max_topic_len", max_topic_len},
            {"beam_width", beam_width},       {"hidden_size", hidden_size},
            {"head_layers", head_layers},     {"head_width", head_width},
            {"length_penalty", length_penalty}, {"use_user", use_user},
            {"epochs", epochs},               {"batch_size", batch_size},
            {"learning_rate", adam.learning_rate}, {"beta1", adam.beta1},
            {"beta2", adam.beta2},            {"epsilon", adam.epsilon},
            {"clip_norm", adam.clip_norm}};
  }

  static CmuConfig from_json(const json& j) {
    CmuConfig c;
    StrictObject o(j, "cmu");
    o.get("user_emb_size", c.user_emb_size)
        .get("item_emb_size", c.item_emb_size)
        .get("stop_prob", c.stop_prob)
        .get("max_topic_len", c.max_topic_len)
        .get("beam_width", c.beam_width)
        .get("hidden_size", c.hidden_size)
        .get("head_layers", c.head_layers)
        .get("head_width", c.head_width)
        .get("length_penalty", c.length_penalty)
        .get("use_user", c.use_user)
        .get("epochs", c.epochs)
        .get("batch_size", c.batch_size)
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

/// Planner parameters.
///   h_n   = GRU(v_{n-1}, h_{n-1}),  v_0 = 0, h_0 = 0
///   a_j   = softmax_j(u W O_j) over O_1..O_n (O_j = h_j)
///   Att   = sum_j a_j O_j
///   logits = head([Att; u])
template <class T>
class CmuModel {
 public:
  Parameter<T> topic_embedding;  // topics x item_emb_size
  nn::GruCell<T> cell;
  Parameter<T> w_cmu;            // user_emb_size x hidden
  nn::Mlp<T> head;
  /// Stand-in for u when use_user is false.
  Matrix<T> user_constant;

  CmuModel() = default;

  CmuModel(int topic_vocab, const CmuConfig& cfg, std::uint64_t seed) : config_(cfg), topics_(topic_vocab) {
    cfg.validate();
    if (topic_vocab < 1) throw ConfigError("cmu needs at least one topic");
    Rng rng(seed);
    topic_embedding.value = nn::normal_matrix<T>(topic_vocab, cfg.item_emb_size, T(0.1), rng);
    cell = nn::GruCell<T>(cfg.item_emb_size, cfg.hidden_size, rng);
    w_cmu.value = nn::uniform_matrix<T>(cfg.user_emb_size, cfg.hidden_size,
                                        static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.user_emb_size))), rng);
    std::vector<int> widths{cfg.hidden_size + cfg.user_emb_size};
    for (int i = 1; i < cfg.head_layers; ++i) widths.push_back(cfg.head_width);
    widths.push_back(topic_vocab);
    head = nn::Mlp<T>(widths, false, rng);
    user_constant = Matrix<T>::Zero(1, cfg.user_emb_size);
    initialized_ = true;
  }

  bool initialized() const { return initialized_; }
  const CmuConfig& config() const { return config_; }
  int topic_vocab() const { return topics_; }
  int hidden() const { return config_.hidden_size; }

  void require_initialized() const {
    if (!initialized_) throw ContractError("CMU model is not initialized");
  }

  /// Row the planner conditions on for user vector `u`.
  Matrix<T> user_row(const Eigen::VectorXd& u) const {
    if (u.size() != config_.user_emb_size) {
      throw ValidationError("user embedding has width " + std::to_string(u.size()) + ", planner expects " +
                            std::to_string(config_.user_emb_size));
    }
    if (!config_.use_user) return user_constant;
    return u.transpose().cast<T>();
  }

  /// Attention over `outputs` followed by the head; returns (B x topics).
  Var<T> logits(Tape<T>& tape, Var<T> user, const std::vector<Var<T>>& outputs) const {
    Var<T> q = ag::matmul(user, tape.param(w_cmu));
    std::vector<Var<T>> scores;
    scores.reserve(outputs.size());
    for (const auto& o : outputs) scores.push_back(ag::rows_dot(q, o));
    Var<T> a = ag::softmax_rows(ag::concat_cols<T>(scores));
    Var<T> att = ag::mul_col(outputs[0], ag::slice_cols(a, 0, 1));
    for (std::size_t j = 1; j < outputs.size(); ++j) {
      att = ag::add(att, ag::mul_col(outputs[j], ag::slice_cols(a, static_cast<Eigen::Index>(j), 1)));
    }
    return head(tape, ag::concat_cols<T>({att, user}));
  }

  template <class Self, class F>
  static void visit_params(Self& self, const std::string& prefix, F& f) {
    f(nn::join(prefix, "topic_embedding"), self.topic_embedding);
    nn::GruCell<T>::visit_params(self.cell, nn::join(prefix, "cell"), f);
    f(nn::join(prefix, "w_cmu"), self.w_cmu);
    nn::Mlp<T>::visit_params(self.head, nn::join(prefix, "head"), f);
  }

 private:
  CmuConfig config_;
  int topics_ = 0;
  bool initialized_ = false;
};

/// Planner state after consuming `prefix`.
template <class T>
struct PlanState {
  std::vector<int> prefix;
  Matrix<T> hidden;                // 1 x H, h_{n-1}
  std::vector<Matrix<T>> outputs;  // O_1..O_{n-1}

  int step() const { return static_cast<int>(prefix.size()) + 1; }

  static PlanState initial(const CmuModel<T>& m) { return {{}, Matrix<T>::Zero(1, m.hidden()), {}}; }
};

template <class T>
struct StepResult {
  /// Probability of each candidate, aligned with the candidate list.
  std::vector<double> probs;
  Matrix<T> hidden;  // h_n
};

/// Distribution over `candidates` for the next topic. Used candidates get 0;
/// the rest are renormalized.
template <class T>
StepResult<T> plan_step(const CmuModel<T>& model, const PlanState<T>& state, const Eigen::VectorXd& u,
                        std::span<const int> candidates) {
  model.require_initialized();
  if (candidates.empty()) throw ValidationError("plan_step: empty candidate set");
  if (state.hidden.cols() != model.hidden() || state.outputs.size() != state.prefix.size()) {
    throw ContractError("plan_step: inconsistent plan state");
  }
  std::vector<char> used(static_cast<std::size_t>(model.topic_vocab()), 0);
  for (int t : state.prefix) used[static_cast<std::size_t>(t)] = 1;
  bool any = false;
  for (int c : candidates) {
    if (c < 0 || c >= model.topic_vocab()) throw ValidationError("candidate topic " + std::to_string(c) + " out of range");
    any = any || !used[static_cast<std::size_t>(c)];
  }
  if (!any) throw ValidationError("plan_step: every candidate topic is already used");

  Tape<T> tape(false);
  Var<T> x = state.prefix.empty()
                 ? tape.constant(Matrix<T>::Zero(1, model.config().item_emb_size))
                 : tape.constant(model.topic_embedding.value.row(state.prefix.back()));
  Var<T> h = model.cell(tape, x, tape.constant(state.hidden));
  std::vector<Var<T>> outs;
  for (const auto& o : state.outputs) outs.push_back(tape.constant(o));
  outs.push_back(h);
  const Matrix<T> z = model.logits(tape, tape.constant(model.user_row(u)), outs).value();

  StepResult<T> r;
  r.hidden = h.value();
  double m = -std::numeric_limits<double>::infinity();
  for (int c : candidates)
    if (!used[static_cast<std::size_t>(c)]) m = std::max(m, static_cast<double>(z(0, c)));
  double total = 0;
  r.probs.resize(candidates.size(), 0.0);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const int c = candidates[i];
    if (used[static_cast<std::size_t>(c)]) continue;
    // a duplicated candidate id keeps only its first slot
    if (std::find(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(i), c) !=
        candidates.begin() + static_cast<std::ptrdiff_t>(i)) {
      continue;
    }
    r.probs[i] = std::exp(static_cast<double>(z(0, c)) - m);
    total += r.probs[i];
  }
  for (double& p : r.probs) p /= total;
  return r;
}

/// State after appending `topic` to the prefix, given the step that chose it.
template <class T>
PlanState<T> advance(const PlanState<T>& s, const StepResult<T>& step, int topic) {
  PlanState<T> n = s;
  n.prefix.push_back(topic);
  n.outputs.push_back(step.hidden);
  n.hidden = step.hidden;
  return n;
}

inline double beam_score(double logp, std::size_t len, double length_penalty) {
  return len == 0 ? -std::numeric_limits<double>::infinity()
                  : logp / std::pow(static_cast<double>(len), length_penalty);
}

struct Plan {
  std::vector<int> topics;
  double log_prob = 0;
  double score = 0;
};

/// Orders plans by score descending, then topic sequence ascending.
inline bool better_plan(const Plan& a, const Plan& b) {
  return a.score != b.score ? a.score > b.score : a.topics < b.topics;
}

/// Beam search. A hypothesis terminates when it reaches max_topic_len, when
/// no unused candidate remains, or (once non-empty) when the largest
/// next-step probability is below stop_prob. Live hypotheses are ranked by
/// cumulative log-probability; finished ones by length-normalized score.
template <class T>
Plan beam_search_plan(const CmuModel<T>& model, const Eigen::VectorXd& u, std::span<const int> candidates,
                      const CmuConfig& cfg) {
  model.require_initialized();
  cfg.validate();
  if (candidates.empty()) throw ValidationError("beam_search_plan: empty candidate set");
  struct Hyp {
    PlanState<T> state;
    double logp;
  };
  std::vector<Hyp> live{{PlanState<T>::initial(model), 0.0}};
  std::vector<Plan> done;
  auto finish = [&](const Hyp& h) {
    done.push_back({h.state.prefix, h.logp, beam_score(h.logp, h.state.prefix.size(), cfg.length_penalty)});
  };
  while (!live.empty()) {
    struct Ext {
      std::size_t parent;
      int topic;
      double logp;
      std::vector<int> seq;
    };
    std::vector<Ext> exts;
    std::vector<StepResult<T>> steps(live.size());
    for (std::size_t b = 0; b < live.size(); ++b) {
      const auto& h = live[b];
      const bool exhausted = std::all_of(candidates.begin(), candidates.end(), [&](int c) {
        return std::find(h.state.prefix.begin(), h.state.prefix.end(), c) != h.state.prefix.end();
      });
      if (exhausted) {
        finish(h);
        continue;
      }
      steps[b] = plan_step(model, h.state, u, candidates);
      const double pmax = *std::max_element(steps[b].probs.begin(), steps[b].probs.end());
      if (!h.state.prefix.empty() && pmax < cfg.stop_prob) {
        finish(h);
        continue;
      }
      for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (steps[b].probs[i] <= 0.0) continue;
        auto seq = h.state.prefix;
        seq.push_back(candidates[i]);
        exts.push_back({b, candidates[i], h.logp + std::log(steps[b].probs[i]), std::move(seq)});
      }
    }
    std::sort(exts.begin(), exts.end(), [](const Ext& a, const Ext& b) {
      return a.logp != b.logp ? a.logp > b.logp : a.seq < b.seq;
    });
    if (exts.size() > static_cast<std::size_t>(cfg.beam_width)) exts.resize(static_cast<std::size_t>(cfg.beam_width));
    std::vector<Hyp> next;
    for (const auto& e : exts) {
      Hyp h{advance(live[e.parent].state, steps[e.parent], e.topic), e.logp};
      if (static_cast<int>(h.state.prefix.size()) >= cfg.max_topic_len) {
        finish(h);
      } else {
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
  }
  return *std::min_element(done.begin(), done.end(), better_plan);
}

/// -(1/K) sum_k log p_k for the probabilities the model gave the gold topics.
inline double cumulated_softmax_loss(std::span<const double> gold_probs) {
  if (gold_probs.empty()) throw ValidationError("cumulated_softmax_loss: empty script");
  double s = 0;
  for (double p : gold_probs) s -= std::log(p);
  return s / static_cast<double>(gold_probs.size());
}

struct PlanExample {
  Eigen::VectorXd user;
  std::vector<int> topics;
};

/// Mean over the batch of the per-script cumulated softmax loss, teacher
/// forced. At step n the softmax spans topics not in the gold prefix.
template <class T>
Var<T> cmu_loss(Tape<T>& tape, const CmuModel<T>& model, std::span<const PlanExample> batch) {
  model.require_initialized();
  if (batch.empty()) throw ValidationError("cmu_loss: empty batch");
  const auto B = static_cast<Eigen::Index>(batch.size());
  const int V = model.topic_vocab();
  std::size_t steps = 0;
  Matrix<T> users(B, model.config().user_emb_size);
  for (Eigen::Index i = 0; i < B; ++i) {
    const auto& ex = batch[static_cast<std::size_t>(i)];
    if (ex.topics.empty()) throw ValidationError("cmu_loss: script without topics");
    for (int t : ex.topics)
      if (t < 0 || t >= V) throw ValidationError("cmu_loss: topic out of range");
    steps = std::max(steps, ex.topics.size());
    users.row(i) = model.user_row(ex.user);
  }
  Var<T> user = tape.constant(users);
  Var<T> table = tape.param(model.topic_embedding);
  Var<T> h = tape.constant(Matrix<T>::Zero(B, model.hidden()));
  std::vector<Var<T>> outs;
  Var<T> total = tape.constant(Matrix<T>::Zero(1, 1));
  for (std::size_t n = 0; n < steps; ++n) {
    Var<T> x;
    Matrix<T> mask(B, 1);
    std::vector<int> prev(static_cast<std::size_t>(B), 0);
    for (Eigen::Index i = 0; i < B; ++i) {
      const auto& tp = batch[static_cast<std::size_t>(i)].topics;
      mask(i, 0) = n < tp.size() ? T(1) : T(0);
      if (n > 0 && n - 1 < tp.size()) prev[static_cast<std::size_t>(i)] = tp[n - 1];
    }
    if (n == 0) {
      x = tape.constant(Matrix<T>::Zero(B, model.config().item_emb_size));
    } else {
      // rows past their script's end read an arbitrary topic; their steps
      // carry zero weight and their state is frozen by the mask
      x = ag::gather_rows<T>(table, prev);
    }
    Var<T> next = model.cell(tape, x, h);
    h = ag::add(h, ag::mul_col(ag::sub(next, h), tape.constant(mask)));
    outs.push_back(h);
    Var<T> z = model.logits(tape, user, outs);
    std::vector<int> targets(static_cast<std::size_t>(B), 0);
    std::vector<T> weights(static_cast<std::size_t>(B), T(0));
    Matrix<T> allowed = Matrix<T>::Ones(B, V);
    for (Eigen::Index i = 0; i < B; ++i) {
      const auto& tp = batch[static_cast<std::size_t>(i)].topics;
      if (n >= tp.size()) continue;
      targets[static_cast<std::size_t>(i)] = tp[n];
      weights[static_cast<std::size_t>(i)] = static_cast<T>(1.0 / (static_cast<double>(tp.size()) * B));
      for (std::size_t j = 0; j < n; ++j) allowed(i, tp[j]) = T(0);
    }
    total = ag::add(total, ag::masked_nll<T>(z, targets, weights, allowed));
  }
  return total;
}

template <class T>
std::pair<CmuModel<T>, eval::MetricReport> train_cmu(CmuModel<T> model, const std::vector<PlanExample>& data,
                                                    const CmuConfig& cfg, std::uint64_t seed) {
  model.require_initialized();
  cfg.validate();
  if (data.empty()) throw ValidationError("train_cmu needs scripts");
  for (const auto& ex : data) {
    std::vector<int> s = ex.topics;
    std::sort(s.begin(), s.end());
    if (std::adjacent_find(s.begin(), s.end()) != s.end()) throw ValidationError("script repeats a topic");
  }
  if (!cfg.use_user) {
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(cfg.user_emb_size);
    for (const auto& ex : data) mean += ex.user;
    model.user_constant = (mean / static_cast<double>(data.size())).transpose().cast<T>();
  }
  Rng rng(seed);
  optim::Adam<T> opt(cfg.adam);
  eval::MetricReport report;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double sum = 0;
    int batches = 0;
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<PlanExample> batch;
      for (std::size_t i = at; i < std::min(order.size(), at + static_cast<std::size_t>(cfg.batch_size)); ++i) {
        batch.push_back(data[order[i]]);
      }
      Tape<T> tape;
      Var<T> loss = cmu_loss<T>(tape, model, batch);
      if (!std::isfinite(static_cast<double>(loss.scalar()))) throw DivergenceError("CMU loss is not finite", step);
      tape.backward(loss);
      auto g = optim::GradientBatch<T, CmuModel<T>>::collect(model, tape);
      opt.step(g.params, g.grads);
      sum += static_cast<double>(loss.scalar());
      ++batches;
      ++step;
    }
    report.log(step, "cmu.loss", sum / batches);
  }
  report.set("train.steps", static_cast<double>(step));
  return {std::move(model), std::move(report)};
}

template <class T>
Checkpoint<T> to_checkpoint(const CmuModel<T>& model, const std::string& satl_checkpoint_id) {
  model.require_initialized();
  Checkpoint<T> ck;
  ck.kind = "cmu";
  ck.meta["config"] = model.config().to_json();
  ck.meta["topic_vocab_size"] = model.topic_vocab();
  ck.meta["satl_checkpoint"] = satl_checkpoint_id;
  store_parameters(ck, model);
  ck.tensors.emplace_back("user_constant", model.user_constant);
  return ck;
}

template <class T>
CmuModel<T> from_checkpoint(const Checkpoint<T>& ck) {
  if (ck.kind != "cmu") throw CheckpointError("expected a cmu checkpoint, found '" + ck.kind + "'");
  CmuModel<T> m(ck.meta.at("topic_vocab_size").template get<int>(), CmuConfig::from_json(ck.meta.at("config")), 0);
  Checkpoint<T> params = ck;
  const auto it = std::find_if(params.tensors.begin(), params.tensors.end(),
                               [](const auto& p) { return p.first == "user_constant"; });
  if (it == params.tensors.end()) throw CheckpointError("cmu checkpoint has no user_constant");
  m.user_constant = it->second;
  params.tensors.erase(it);
  restore_parameters(params, m);
  return m;
}

}  // namespace posgen::cmu
