#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "posgen/core/autograd.hpp"
#include "posgen/core/rng.hpp"

namespace posgen::nn {

using ag::Matrix;
using ag::Parameter;
using ag::Tape;
using ag::Var;

template <class T>
Matrix<T> uniform_matrix(Eigen::Index rows, Eigen::Index cols, T limit, Rng& rng) {
  Matrix<T> m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = static_cast<T>(rng.uniform(-limit, limit));
  return m;
}

template <class T>
Matrix<T> normal_matrix(Eigen::Index rows, Eigen::Index cols, T stddev, Rng& rng) {
  Matrix<T> m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = static_cast<T>(rng.normal(0.0, stddev));
  return m;
}

/// Calls f(name, param) for every parameter of `obj`, in a fixed order.
/// Works for const and non-const objects alike.
template <class Obj, class F>
void for_each_param(Obj& obj, const std::string& prefix, F&& f) {
  std::remove_const_t<Obj>::visit_params(obj, prefix, f);
}

template <class T, class Obj>
std::vector<std::pair<std::string, Parameter<T>*>> parameter_list(Obj& obj) {
  std::vector<std::pair<std::string, Parameter<T>*>> out;
  for_each_param(obj, "", [&](const std::string& name, Parameter<T>& p) { out.emplace_back(name, &p); });
  return out;
}

template <class T, class Obj>
std::size_t parameter_count(const Obj& obj) {
  std::size_t n = 0;
  for_each_param(obj, "", [&](const std::string&, const Parameter<T>& p) {
    n += static_cast<std::size_t>(p.value.size());
  });
  return n;
}

inline std::string join(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

/// y = x W + b with W of shape (in x out).
template <class T>
struct Linear {
  Parameter<T> weight;
  Parameter<T> bias;

  Linear() = default;
  Linear(int in, int out, Rng& rng) {
    // He-uniform for the ReLU stacks this library builds.
    const T limit = static_cast<T>(std::sqrt(6.0 / in));
    weight.value = uniform_matrix<T>(in, out, limit, rng);
    bias.value = Matrix<T>::Zero(1, out);
  }

  int in_features() const { return static_cast<int>(weight.value.rows()); }
  int out_features() const { return static_cast<int>(weight.value.cols()); }

  Var<T> operator()(Tape<T>& tape, Var<T> x) const {
    return ag::add(ag::matmul(x, tape.param(weight)), tape.param(bias));
  }

  template <class Self, class F>
  static void visit_params(Self& self, const std::string& prefix, F& f) {
    f(join(prefix, "weight"), self.weight);
    f(join(prefix, "bias"), self.bias);
  }
};

/// Stack of Linear layers with ReLU between them; the last layer is linear
/// unless `relu_last` is set.
template <class T>
struct Mlp {
  std::vector<Linear<T>> layers;
  bool relu_last = false;

  Mlp() = default;
  /// widths = {in, h1, ..., out}; widths.size() - 1 layers.
  Mlp(const std::vector<int>& widths, bool relu_on_last, Rng& rng) : relu_last(relu_on_last) {
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) layers.emplace_back(widths[i], widths[i + 1], rng);
  }

  int out_features() const { return layers.back().out_features(); }

  Var<T> operator()(Tape<T>& tape, Var<T> x) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](tape, x);
      if (i + 1 < layers.size() || relu_last) x = ag::relu(x);
    }
    return x;
  }

  template <class Self, class F>
  static void visit_params(Self& self, const std::string& prefix, F& f) {
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      Linear<T>::visit_params(self.layers[i], join(prefix, "l" + std::to_string(i)), f);
    }
  }
};

/// Gated recurrent cell. With gate pre-activations split as [r | z | n]:
///   r  = sigmoid(x Wr + br + h Ur + cr)
///   z  = sigmoid(x Wz + bz + h Uz + cz)
///   n  = tanh(x Wn + bn + r * (h Un + cn))
///   h' = (1 - z) * n + z * h  =  n + z * (h - n)
template <class T>
struct GruCell {
  Parameter<T> w_input;   // in x 3H
  Parameter<T> w_hidden;  // H x 3H
  Parameter<T> b_input;   // 1 x 3H
  Parameter<T> b_hidden;  // 1 x 3H

  GruCell() = default;
  GruCell(int in, int hidden, Rng& rng) {
    const T limit = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hidden)));
    w_input.value = uniform_matrix<T>(in, 3 * hidden, limit, rng);
    w_hidden.value = uniform_matrix<T>(hidden, 3 * hidden, limit, rng);
    b_input.value = uniform_matrix<T>(1, 3 * hidden, limit, rng);
    b_hidden.value = uniform_matrix<T>(1, 3 * hidden, limit, rng);
  }

  int hidden() const { return static_cast<int>(w_hidden.value.rows()); }
  int in_features() const { return static_cast<int>(w_input.value.rows()); }

  Var<T> operator()(Tape<T>& tape, Var<T> x, Var<T> h) const {
    const Eigen::Index hs = hidden();
    Var<T> gx = ag::add(ag::matmul(x, tape.param(w_input)), tape.param(b_input));
    Var<T> gh = ag::add(ag::matmul(h, tape.param(w_hidden)), tape.param(b_hidden));
    Var<T> r = ag::sigmoid(ag::add(ag::slice_cols(gx, 0, hs), ag::slice_cols(gh, 0, hs)));
    Var<T> z = ag::sigmoid(ag::add(ag::slice_cols(gx, hs, hs), ag::slice_cols(gh, hs, hs)));
    Var<T> n = ag::tanh(ag::add(ag::slice_cols(gx, 2 * hs, hs), ag::mul(r, ag::slice_cols(gh, 2 * hs, hs))));
    return ag::add(n, ag::mul(z, ag::sub(h, n)));
  }

  template <class Self, class F>
  static void visit_params(Self& self, const std::string& prefix, F& f) {
    f(join(prefix, "w_input"), self.w_input);
    f(join(prefix, "w_hidden"), self.w_hidden);
    f(join(prefix, "b_input"), self.b_input);
    f(join(prefix, "b_hidden"), self.b_hidden);
  }
};

/// Stacked unidirectional GRU over a padded batch of sequences.
template <class T>
struct Gru {
  std::vector<GruCell<T>> cells;

  Gru() = default;
  Gru(int in, int hidden, int num_layers, Rng& rng) {
    for (int l = 0; l < num_layers; ++l) cells.emplace_back(l == 0 ? in : hidden, hidden, rng);
  }

  int hidden() const { return cells.front().hidden(); }
  int num_layers() const { return static_cast<int>(cells.size()); }

  struct Result {
    std::vector<Var<T>> outputs;  // top-layer output per step
    std::vector<Var<T>> final;    // last hidden state per layer
  };

  /// Runs `inputs` (one (B x in) matrix per step) from initial states `h0`
  /// (one per layer). `masks[t]` is (B x 1) with 1 where step t is real and 0
  /// on padding; padded rows carry their previous state through unchanged.
  /// An empty `masks` means no padding.
  Result run(Tape<T>& tape, const std::vector<Var<T>>& inputs, std::vector<Var<T>> h0,
             const std::vector<Var<T>>& masks = {}) const {
    Result res;
    std::vector<Var<T>> layer_in = inputs;
    for (std::size_t l = 0; l < cells.size(); ++l) {
      Var<T> h = h0[l];
      std::vector<Var<T>> layer_out;
      layer_out.reserve(layer_in.size());
      for (std::size_t s = 0; s < layer_in.size(); ++s) {
        Var<T> next = cells[l](tape, layer_in[s], h);
        if (!masks.empty()) next = ag::add(h, ag::mul_col(ag::sub(next, h), masks[s]));
        h = next;
        layer_out.push_back(h);
      }
      res.final.push_back(h);
      layer_in = std::move(layer_out);
    }
    res.outputs = std::move(layer_in);
    return res;
  }

  template <class Self, class F>
  static void visit_params(Self& self, const std::string& prefix, F& f) {
    for (std::size_t i = 0; i < self.cells.size(); ++i) {
      GruCell<T>::visit_params(self.cells[i], join(prefix, "layer" + std::to_string(i)), f);
    }
  }
};

/// Inverted dropout. Identity when `rate` is 0 or the tape is not recording.
template <class T>
Var<T> dropout(Tape<T>& tape, Var<T> x, double rate, Rng* rng) {
  if (rate <= 0.0 || rng == nullptr || !tape.recording()) return x;
  Matrix<T> mask(x.rows(), x.cols());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  for (Eigen::Index j = 0; j < mask.cols(); ++j)
    for (Eigen::Index i = 0; i < mask.rows(); ++i) mask(i, j) = rng->uniform() < rate ? T(0) : keep_scale;
  return ag::mul(x, tape.constant(std::move(mask)));
}

}  // namespace posgen::nn
