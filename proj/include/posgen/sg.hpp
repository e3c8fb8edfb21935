#pragma once

// Sentence generator: a conditional VAE over one sentence per planned topic.
//   context      c  = [Emb(topic); enc(S_{n-1})]     (enc of absent sentence = 0)
//   prior        p(z | c)               -> (mu, log sigma)
//   posterior    q(z | enc(S_n), c)     -> (mu', log sigma')
//   decoder init h_0^l = tanh(L([Emb(topic); enc(S_{n-1}); z]))_l per layer
// The encoder is a bidirectional GRU whose final forward and backward
// top-layer states are concatenated; the decoder is a unidirectional GRU.

#include <algorithm>
#include <cmath>
#include <cstdint>
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

namespace posgen::sg {

using ag::Matrix;
using ag::Parameter;
using ag::Tape;
using ag::Var;
using json = nlohmann::json;

struct SgConfig {
  int max_doc_len = 100;
  int emb_size = 100;
  int latent_size = 300;
  double dropout_rate = 0.1;
  int hidden_size = 64;
  int num_layers = 4;
  /// Width of the topic embedding (taken from the recommender's table).
  int topic_emb_size = 128;
  /// Hidden width of the prior and posterior networks.
  int latent_net_width = 128;
  int cycle = 4000;
  double k = 0.003;
  int sp0 = 1000;
  /// "cyclical" or "constant".
  std::string schedule = "cyclical";
  double constant_beta = 1.0;
  /// "target" conditions the posterior on enc(S_n); "previous" on enc(S_{n-1}).
  std::string posterior_input = "target";
  int epochs = 30;
  int batch_size = 32;
  optim::AdamOptions adam{};

  void validate() const {
    if (max_doc_len < 1 || emb_size < 1 || hidden_size < 1 || num_layers < 1 || topic_emb_size < 1 ||
        latent_net_width < 1) {
      throw ConfigError("sg widths, depths and max_doc_len must be >= 1");
    }
    if (latent_size < 1) throw ConfigError("sg.latent_size must be >= 1");
    if (cycle < 1) throw ConfigError("sg.cycle must be >= 1");
    if (!(k > 0.0)) throw ConfigError("sg.k must be > 0");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("sg.dropout_rate must lie in [0, 1)");
    if (schedule != "cyclical" && schedule != "constant") throw ConfigError("sg.schedule must be cyclical or constant");
    if (!(constant_beta >= 0.0 && constant_beta <= 1.0)) throw ConfigError("sg.constant_beta must lie in [0, 1]");
    if (posterior_input != "target" && posterior_input != "previous") {
      throw ConfigError("sg.posterior_input must be target or previous");
    }
    if (epochs < 0 || batch_size < 1) throw ConfigError("sg.epochs >= 0 and sg.batch_size >= 1 required");
    if (adam.learning_rate <= 0) throw ConfigError("sg.learning_rate must be > 0");
  }

  json to_json() const {
    return {{"max_doc_len", max_doc_len},   {"emb_size", emb_size},
            {"latent_size", latent_size},   {"dropout_rate", dropout_rate},
            {"hidden_size", hidden_size},   {"num_layers", num_layers},
            {"topic_emb_size", topic_emb_size}, {"latent_net_width", latent_net_width},
            {"cycle", cycle},               {"k", k},
            {"sp0", sp0},                   {"schedule", schedule},
            {"constant_beta", constant_beta}, {"posterior_input", posterior_input},
            {"epochs", epochs},             {"batch_size", batch_size},
            {"learning_rate", adam.learning_rate}, {"beta1", adam.beta1},
            {"beta2", adam.beta2},          {"epsilon", adam.epsilon},
            {"clip_norm", adam.clip_norm}};
  }

  static SgConfig from_json(const json& j) {
    SgConfig c;
    StrictObject o(j, "sg");
    o.get("max_doc_len", c.max_doc_len)
        .get("emb_size", c.emb_size)
        .get("latent_size", c.latent_size)
        .get("dropout_rate", c.dropout_rate)
        .get("hidden_size", c.hidden_size)
        .get("num_layers", c.num_layers)
        .get("topic_emb_size", c.topic_emb_size)
        .get("latent_net_width", c.latent_net_width)
        .get("cycle", c.cycle)
        .get("k", c.k)
        .get("sp0", c.sp0)
        .get("schedule", c.schedule)
        .get("constant_beta", c.constant_beta)
        .get("posterior_input", c.posterior_input)
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

/// Remainder of (step - sp0) by cycle for step >= sp0; plain step - sp0 before.
inline long schedule_remainder(long step, int cycle, int sp0) {
  const long d = step - sp0;
  return d >= 0 ? d % cycle : d;
}

/// KL weight at `step`: 1 / (1 + exp(-k * rem)), or the constant.
inline double beta_schedule(long step, const SgConfig& cfg) {
  if (step < 0) throw ValidationError("beta_schedule: negative step");
  if (cfg.schedule == "constant") return cfg.constant_beta;
  const double rem = static_cast<double>(schedule_remainder(step, cfg.cycle, cfg.sp0));
  return 1.0 / (1.0 + std::exp(-cfg.k * rem));
}

template <class T>
class SgModel {
 public:
  Parameter<T> word_embedding;   // vocab x emb
  Parameter<T> topic_embedding;  // topics x topic_emb
  nn::Gru<T> enc_forward;
  nn::Gru<T> enc_backward;
  nn::Mlp<T> prior;
  nn::Mlp<T> posterior;
  nn::Linear<T> init;
  nn::Gru<T> decoder;
  nn::Linear<T> output;

  SgModel() = default;

  SgModel(int topic_vocab, int word_vocab, const SgConfig& cfg, std::uint64_t seed)
      : config_(cfg), topics_(topic_vocab), words_(word_vocab) {
    cfg.validate();
    if (topic_vocab < 1) throw ConfigError("sg needs at least one topic");
    if (word_vocab <= static_cast<int>(corpus::kReservedWords.size())) {
      throw ConfigError("sg word vocabulary must extend past the reserved tokens");
    }
    Rng rng(seed);
    const int H = cfg.hidden_size;
    const int L = cfg.num_layers;
    word_embedding.value = nn::normal_matrix<T>(word_vocab, cfg.emb_size, T(0.1), rng);
    topic_embedding.value = nn::normal_matrix<T>(topic_vocab, cfg.topic_emb_size, T(0.1), rng);
    enc_forward = nn::Gru<T>(cfg.emb_size, H, L, rng);
    enc_backward = nn::Gru<T>(cfg.emb_size, H, L, rng);
    const int ctx = context_width();
    const int post_in = (cfg.posterior_input == "target" ? 2 * H : 0) + ctx;
    prior = nn::Mlp<T>({ctx, cfg.latent_net_width, 2 * cfg.latent_size}, false, rng);
    posterior = nn::Mlp<T>({post_in, cfg.latent_net_width, 2 * cfg.latent_size}, false, rng);
    init = nn::Linear<T>(ctx + cfg.latent_size, L * H, rng);
    decoder = nn::Gru<T>(cfg.emb_size, H, L, rng);
    output = nn::Linear<T>(H, word_vocab, rng);
    initialized_ = true;
  }

  bool initialized() const { return initialized_; }
  const SgConfig& config() const { return config_; }
  int topic_vocab() const { return topics_; }
  int word_vocab() const { return words_; }
  int encoding_width() const { return 2 * config_.hidden_size; }
  int context_width() const { return config_.topic_emb_size + encoding_width(); }

  void require_initialized() const {
    if (!initialized_) throw ContractError("SG model is not initialized");
  }

  template <class Self, class F>
  static void visit_params(Self& self, const std::string& prefix, F& f) {
    f(nn::join(prefix, "word_embedding"), self.word_embedding);
    f(nn::join(prefix, "topic_embedding"), self.topic_embedding);
    nn::Gru<T>::visit_params(self.enc_forward, nn::join(prefix, "enc_forward"), f);
    nn::Gru<T>::visit_params(self.enc_backward, nn::join(prefix, "enc_backward"), f);
    nn::Mlp<T>::visit_params(self.prior, nn::join(prefix, "prior"), f);
    nn::Mlp<T>::visit_params(self.posterior, nn::join(prefix, "posterior"), f);
    nn::Linear<T>::visit_params(self.init, nn::join(prefix, "init"), f);
    nn::Gru<T>::visit_params(self.decoder, nn::join(prefix, "decoder"), f);
    nn::Linear<T>::visit_params(self.output, nn::join(prefix, "output"), f);
  }

 private:
  SgConfig config_;
  int topics_ = 0;
  int words_ = 0;
  bool initialized_ = false;
};

inline void check_sentence(std::span<const int> s, int max_doc_len, int vocab, bool require_eos = true) {
  if (static_cast<int>(s.size()) > max_doc_len) {
    throw ValidationError("sentence of length " + std::to_string(s.size()) + " exceeds max_doc_len " +
                          std::to_string(max_doc_len));
  }
  if (s.empty()) return;
  if (require_eos && s.back() != corpus::kEos) throw ValidationError("sentence is not EOS-terminated");
  for (int w : s)
    if (w < 0 || w >= vocab) throw ValidationError("word id " + std::to_string(w) + " out of range");
}

/// Encodes a batch of sentences; empty sentences encode to zeros. (B x 2H)
template <class T>
Var<T> encode_batch(Tape<T>& tape, const SgModel<T>& model, const std::vector<std::span<const int>>& sentences,
                    Rng* dropout_rng = nullptr, bool require_eos = true) {
  const auto B = static_cast<Eigen::Index>(sentences.size());
  const int H = model.config().hidden_size;
  std::size_t len = 0;
  for (const auto& s : sentences) {
    check_sentence(s, model.config().max_doc_len, model.word_vocab(), require_eos);
    len = std::max(len, s.size());
  }
  std::vector<Var<T>> h0(static_cast<std::size_t>(model.config().num_layers),
                         tape.constant(Matrix<T>::Zero(B, H)));
  if (len == 0) return tape.constant(Matrix<T>::Zero(B, 2 * H));
  Var<T> table = tape.param(model.word_embedding);
  std::vector<Var<T>> fwd, bwd, masks;
  for (std::size_t t = 0; t < len; ++t) {
    std::vector<int> f(static_cast<std::size_t>(B), corpus::kPad), b(static_cast<std::size_t>(B), corpus::kPad);
    Matrix<T> m = Matrix<T>::Zero(B, 1);
    for (Eigen::Index i = 0; i < B; ++i) {
      const auto& s = sentences[static_cast<std::size_t>(i)];
      if (t < s.size()) {
        f[static_cast<std::size_t>(i)] = s[t];
        b[static_cast<std::size_t>(i)] = s[s.size() - 1 - t];
        m(i, 0) = T(1);
      }
    }
    fwd.push_back(nn::dropout(tape, ag::gather_rows<T>(table, f), model.config().dropout_rate, dropout_rng));
    bwd.push_back(nn::dropout(tape, ag::gather_rows<T>(table, b), model.config().dropout_rate, dropout_rng));
    masks.push_back(tape.constant(std::move(m)));
  }
  auto rf = model.enc_forward.run(tape, fwd, h0, masks);
  auto rb = model.enc_backward.run(tape, bwd, h0, masks);
  return ag::concat_cols<T>({rf.final.back(), rb.final.back()});
}

/// enc(S) in inference mode; zero vector for an empty sentence.
template <class T>
Eigen::VectorXd encode_sentence(const SgModel<T>& model, std::span<const int> sentence) {
  model.require_initialized();
  Tape<T> tape(false);
  const std::vector<std::span<const int>> one{sentence};
  return encode_batch(tape, model, one).value().row(0).transpose().template cast<double>();
}

/// One training example: sentence `target` for `topic`, preceded by `prev`
/// (empty at the first position of a script).
struct SgStep {
  int topic = 0;
  std::vector<int> prev;
  std::vector<int> target;
};

template <class T>
struct LatentState {
  Var<T> mu_prior, log_sigma_prior;
  Var<T> mu_post, log_sigma_post;
  Var<T> z;
};

template <class T>
struct ElboTerms {
  Var<T> loss;   // beta * kl + recon
  Var<T> kl;     // batch mean of KL(q || p)
  Var<T> recon;  // batch mean of per-sentence word NLL
  LatentState<T> latent;
};

namespace detail {

template <class T>
std::pair<Var<T>, Var<T>> split_gaussian(Var<T> out, int latent) {
  return {ag::slice_cols(out, 0, latent), ag::slice_cols(out, latent, latent)};
}

template <class T>
void check_log_sigma(const Var<T>& ls, long step) {
  if (!ls.value().allFinite() || !ls.value().array().exp().allFinite()) {
    throw DivergenceError("non-finite sigma in the latent network", step);
  }
}

/// (rows x vocab) mask allowing every word except PAD and BOS.
template <class T>
Matrix<T> emit_mask(Eigen::Index rows, int vocab) {
  Matrix<T> m = Matrix<T>::Ones(rows, vocab);
  m.col(corpus::kPad).setZero();
  m.col(corpus::kBos).setZero();
  return m;
}

template <class T>
std::vector<Var<T>> initial_states(Tape<T>& tape, const SgModel<T>& model, Var<T> ctx, Var<T> z) {
  const int H = model.config().hidden_size;
  Var<T> all = ag::tanh(model.init(tape, ag::concat_cols<T>({ctx, z})));
  std::vector<Var<T>> h;
  for (int l = 0; l < model.config().num_layers; ++l) h.push_back(ag::slice_cols(all, l * H, H));
  return h;
}

}  // namespace detail

/// Negative ELBO with the reparameterized posterior sample z = mu' + eps sigma'.
/// `eps` is (B x latent); `dropout_rng` enables dropout when non-null.
template <class T>
ElboTerms<T> elbo_loss(Tape<T>& tape, const SgModel<T>& model, std::span<const SgStep> batch, double beta,
                       const Matrix<T>& eps, Rng* dropout_rng = nullptr, long step = -1) {
  model.require_initialized();
  if (batch.empty()) throw ValidationError("elbo_loss: empty batch");
  if (!(beta >= 0.0 && beta <= 1.0)) throw ValidationError("elbo_loss: beta outside [0, 1]");
  const auto& cfg = model.config();
  const auto B = static_cast<Eigen::Index>(batch.size());
  const int Z = cfg.latent_size;
  if (eps.rows() != B || eps.cols() != Z) throw ContractError("elbo_loss: eps must be (batch x latent)");

  std::vector<std::span<const int>> prev, target;
  std::vector<int> topics;
  std::size_t len = 0;
  for (const auto& s : batch) {
    if (s.target.empty()) throw ValidationError("elbo_loss: empty target sentence");
    if (s.topic < 0 || s.topic >= model.topic_vocab()) throw ValidationError("elbo_loss: topic out of range");
    prev.emplace_back(s.prev);
    target.emplace_back(s.target);
    topics.push_back(s.topic);
    len = std::max(len, s.target.size());
  }
  const double rate = cfg.dropout_rate;
  Var<T> enc_prev = encode_batch(tape, model, prev, dropout_rng);
  Var<T> temb = ag::gather_rows<T>(tape.param(model.topic_embedding), topics);
  Var<T> ctx = ag::concat_cols<T>({temb, enc_prev});

  LatentState<T> lat;
  std::tie(lat.mu_prior, lat.log_sigma_prior) = detail::split_gaussian(model.prior(tape, ctx), Z);
  Var<T> post_in = cfg.posterior_input == "target"
                       ? ag::concat_cols<T>({encode_batch(tape, model, target, dropout_rng), ctx})
                       : ctx;
  std::tie(lat.mu_post, lat.log_sigma_post) = detail::split_gaussian(model.posterior(tape, post_in), Z);
  detail::check_log_sigma(lat.log_sigma_prior, step);
  detail::check_log_sigma(lat.log_sigma_post, step);
  lat.z = ag::add(lat.mu_post, ag::mul(tape.constant(eps), ag::exp(lat.log_sigma_post)));

  Var<T> kl = ag::mean(ag::gaussian_kl(lat.mu_post, lat.log_sigma_post, lat.mu_prior, lat.log_sigma_prior));

  // Teacher-forced decoding: inputs <bos> w_1 .. w_{L-1}, targets w_1 .. w_L.
  Var<T> table = tape.param(model.word_embedding);
  std::vector<Var<T>> inputs, masks;
  std::vector<int> targets;
  std::vector<T> weights;
  for (std::size_t t = 0; t < len; ++t) {
    std::vector<int> in(static_cast<std::size_t>(B), corpus::kPad);
    Matrix<T> m = Matrix<T>::Zero(B, 1);
    for (Eigen::Index i = 0; i < B; ++i) {
      const auto& s = batch[static_cast<std::size_t>(i)].target;
      const bool real = t < s.size();
      in[static_cast<std::size_t>(i)] = t == 0 ? corpus::kBos : (real ? s[t - 1] : corpus::kPad);
      m(i, 0) = real ? T(1) : T(0);
      targets.push_back(real ? s[t] : corpus::kEos);
      weights.push_back(real ? static_cast<T>(1.0 / static_cast<double>(B)) : T(0));
    }
    inputs.push_back(nn::dropout(tape, ag::gather_rows<T>(table, in), rate, dropout_rng));
    masks.push_back(tape.constant(std::move(m)));
  }
  auto run = model.decoder.run(tape, inputs, detail::initial_states(tape, model, ctx, lat.z), masks);
  Var<T> outs = nn::dropout(tape, ag::concat_rows<T>(run.outputs), rate, dropout_rng);
  Var<T> logits = model.output(tape, outs);
  Var<T> recon = ag::masked_nll<T>(logits, targets, weights,
                                   detail::emit_mask<T>(logits.rows(), model.word_vocab()));
  Var<T> loss = ag::add(ag::scale(kl, static_cast<T>(beta)), recon);
  return {loss, kl, recon, lat};
}

/// Draws the (B x latent) standard-normal matrix used by the reparameterization.
template <class T>
Matrix<T> draw_eps(Eigen::Index rows, int latent, Rng& rng) {
  Matrix<T> e(rows, latent);
  for (Eigen::Index j = 0; j < e.cols(); ++j)
    for (Eigen::Index i = 0; i < e.rows(); ++i) e(i, j) = static_cast<T>(rng.normal());
  return e;
}

/// Flattens scripts into per-sentence training steps.
inline std::vector<SgStep> script_steps(const std::vector<corpus::ScriptSample>& scripts) {
  std::vector<SgStep> out;
  for (const auto& s : scripts) {
    for (std::size_t n = 0; n < s.topics.size(); ++n) {
      out.push_back({s.topics[n], n == 0 ? std::vector<int>{} : s.sentences[n - 1], s.sentences[n]});
    }
  }
  return out;
}

/// Trains on every script step. Per-step trace metrics: loss, kl, recon,
/// beta. Per-epoch means: epoch.kl, epoch.recon, epoch.loss.
template <class T>
std::pair<SgModel<T>, eval::MetricReport> train_sg(SgModel<T> model, const std::vector<corpus::ScriptSample>& scripts,
                                                  const SgConfig& cfg, std::uint64_t seed) {
  model.require_initialized();
  cfg.validate();
  auto steps = script_steps(scripts);
  if (steps.empty()) throw ValidationError("train_sg needs script sentences");
  Rng rng(seed);
  Rng eps_rng = rng.fork(1);
  Rng drop_rng = rng.fork(2);
  optim::Adam<T> opt(cfg.adam);
  eval::MetricReport report;
  std::vector<std::size_t> order(steps.size());
  std::iota(order.begin(), order.end(), 0);
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double kl_sum = 0, rec_sum = 0, loss_sum = 0;
    int batches = 0;
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<SgStep> batch;
      for (std::size_t i = at; i < std::min(order.size(), at + static_cast<std::size_t>(cfg.batch_size)); ++i) {
        batch.push_back(steps[order[i]]);
      }
      const double beta = beta_schedule(step, cfg);
      Tape<T> tape;
      const auto eps = draw_eps<T>(static_cast<Eigen::Index>(batch.size()), cfg.latent_size, eps_rng);
      auto terms = elbo_loss<T>(tape, model, batch, beta, eps, &drop_rng, step);
      const double loss = static_cast<double>(terms.loss.scalar());
      if (!std::isfinite(loss)) throw DivergenceError("SG loss is not finite", step);
      tape.backward(terms.loss);
      auto g = optim::GradientBatch<T, SgModel<T>>::collect(model, tape);
      opt.step(g.params, g.grads);
      const double kl = static_cast<double>(terms.kl.scalar());
      const double rec = static_cast<double>(terms.recon.scalar());
      report.log(step, "loss", loss);
      report.log(step, "kl", kl);
      report.log(step, "recon", rec);
      report.log(step, "beta", beta);
      kl_sum += kl;
      rec_sum += rec;
      loss_sum += loss;
      ++batches;
      ++step;
    }
    report.log(epoch, "epoch.kl", kl_sum / batches);
    report.log(epoch, "epoch.recon", rec_sum / batches);
    report.log(epoch, "epoch.loss", loss_sum / batches);
  }
  report.set("train.steps", static_cast<double>(step));
  return {std::move(model), std::move(report)};
}

/// Greedy decoding of one sentence from hidden states `h` (one per layer).
template <class T>
std::vector<int> greedy_decode(const SgModel<T>& model, std::vector<Matrix<T>> h) {
  const auto& cfg = model.config();
  std::vector<int> out;
  int prev = corpus::kBos;
  while (static_cast<int>(out.size()) < cfg.max_doc_len) {
    Tape<T> tape(false);
    Var<T> x = tape.constant(model.word_embedding.value.row(prev));
    for (std::size_t l = 0; l < h.size(); ++l) {
      x = model.decoder.cells[l](tape, x, tape.constant(h[l]));
      h[l] = x.value();
    }
    const Matrix<T> z = model.output(tape, x).value();
    int best = -1;
    for (int w = 0; w < model.word_vocab(); ++w) {
      if (w == corpus::kPad || w == corpus::kBos) continue;
      if (best < 0 || z(0, w) > z(0, best)) best = w;
    }
    out.push_back(best);
    if (best == corpus::kEos) break;
    prev = best;
  }
  return out;
}

/// Generates one sentence per topic, sampling z from the prior with
/// standard-normal draws taken from `eps_source`.
template <class T>
std::vector<std::vector<int>> generate_script(const SgModel<T>& model, std::span<const int> topics, Rng& eps_source) {
  model.require_initialized();
  if (topics.empty()) throw ValidationError("generate_script: empty topic sequence");
  const auto& cfg = model.config();
  std::vector<std::vector<int>> script;
  std::vector<int> prev;
  for (int topic : topics) {
    if (topic < 0 || topic >= model.topic_vocab()) throw ValidationError("generate_script: topic out of range");
    Tape<T> tape(false);
    const std::vector<std::span<const int>> one{prev};
    // a sentence cut at max_doc_len has no EOS but still feeds the next step
    Var<T> enc = encode_batch(tape, model, one, nullptr, false);
    Var<T> ctx = ag::concat_cols<T>({tape.constant(model.topic_embedding.value.row(topic)), enc});
    auto [mu, ls] = detail::split_gaussian(model.prior(tape, ctx), cfg.latent_size);
    detail::check_log_sigma(ls, -1);
    Var<T> z = ag::add(mu, ag::mul(tape.constant(draw_eps<T>(1, cfg.latent_size, eps_source)), ag::exp(ls)));
    std::vector<Matrix<T>> h;
    for (const auto& v : detail::initial_states(tape, model, ctx, z)) h.push_back(v.value());
    auto sentence = greedy_decode(model, std::move(h));
    prev = sentence;
    script.push_back(std::move(sentence));
  }
  return script;
}

template <class T>
Checkpoint<T> to_checkpoint(const SgModel<T>& model, const std::string& word_vocab_hash,
                            const std::string& satl_checkpoint_id) {
  model.require_initialized();
  Checkpoint<T> ck;
  ck.kind = "sg";
  ck.meta["config"] = model.config().to_json();
  ck.meta["topic_vocab_size"] = model.topic_vocab();
  ck.meta["word_vocab_size"] = model.word_vocab();
  ck.meta["word_vocab_hash"] = word_vocab_hash;
  ck.meta["satl_checkpoint"] = satl_checkpoint_id;
  store_parameters(ck, model);
  return ck;
}

template <class T>
SgModel<T> from_checkpoint(const Checkpoint<T>& ck) {
  if (ck.kind != "sg") throw CheckpointError("expected an sg checkpoint, found '" + ck.kind + "'");
  SgModel<T> m(ck.meta.at("topic_vocab_size").template get<int>(), ck.meta.at("word_vocab_size").template get<int>(),
               SgConfig::from_json(ck.meta.at("config")), 0);
  restore_parameters(ck, m);
  return m;
}

}  // namespace posgen::sg
