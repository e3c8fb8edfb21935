#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "posgen/core/autograd.hpp"
#include "posgen/core/layers.hpp"

namespace posgen::optim {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Global gradient-norm clip; <= 0 disables clipping.
  double clip_norm = 5.0;
};

/// Adam with bias correction. State is positional: the caller must pass the
/// same parameter list, in the same order, on every step.
template <class T>
class Adam {
 public:
  explicit Adam(AdamOptions opts = {}) : opts_(opts) {}

  const AdamOptions& options() const { return opts_; }
  long steps() const { return step_; }

  /// Applies one update. Returns the pre-clip global gradient norm.
  double step(const std::vector<ag::Parameter<T>*>& params, std::vector<ag::Matrix<T>>& grads) {
    if (first_.empty()) {
      for (const auto* p : params) {
        first_.push_back(ag::Matrix<T>::Zero(p->value.rows(), p->value.cols()));
        second_.push_back(ag::Matrix<T>::Zero(p->value.rows(), p->value.cols()));
      }
    }
    if (first_.size() != params.size() || grads.size() != params.size()) {
      throw ContractError("Adam: parameter list changed between steps");
    }
    double sq = 0.0;
    for (const auto& g : grads) sq += static_cast<double>(g.squaredNorm());
    const double norm = std::sqrt(sq);
    if (opts_.clip_norm > 0.0 && norm > opts_.clip_norm) {
      const T s = static_cast<T>(opts_.clip_norm / norm);
      for (auto& g : grads) g *= s;
    }
    ++step_;
    const T b1 = static_cast<T>(opts_.beta1);
    const T b2 = static_cast<T>(opts_.beta2);
    const T c1 = static_cast<T>(1.0 - std::pow(opts_.beta1, static_cast<double>(step_)));
    const T c2 = static_cast<T>(1.0 - std::pow(opts_.beta2, static_cast<double>(step_)));
    const T lr = static_cast<T>(opts_.learning_rate);
    const T eps = static_cast<T>(opts_.epsilon);
    for (std::size_t i = 0; i < params.size(); ++i) {
      first_[i] = b1 * first_[i] + (T(1) - b1) * grads[i];
      second_[i] = b2 * second_[i] + (T(1) - b2) * grads[i].cwiseProduct(grads[i]);
      params[i]->value.array() -=
          lr * (first_[i].array() / c1) / ((second_[i].array() / c2).sqrt() + eps);
    }
    return norm;
  }

 private:
  AdamOptions opts_;
  std::vector<ag::Matrix<T>> first_;
  std::vector<ag::Matrix<T>> second_;
  long step_ = 0;
};

/// Pulls the gradient of every parameter of `model` off `tape`.
template <class T, class Model>
struct GradientBatch {
  std::vector<ag::Parameter<T>*> params;
  std::vector<ag::Matrix<T>> grads;

  static GradientBatch collect(Model& model, const ag::Tape<T>& tape) {
    GradientBatch b;
    nn::for_each_param(model, "", [&](const std::string&, ag::Parameter<T>& p) {
      b.params.push_back(&p);
      b.grads.push_back(tape.grad(p));
    });
    return b;
  }
};

}  // namespace posgen::optim
