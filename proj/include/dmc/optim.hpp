#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dmc/errors.hpp"
#include "dmc/params.hpp"
#include "dmc/tensor.hpp"

namespace dmc {

// SGD with (Nesterov) momentum:
//   v <- mu*v - lr*g
//   p <- p + mu*v - lr*g   (nesterov)
//   p <- p + v             (classic)
struct SgdNesterov {
  double momentum = 0.99;
  bool nesterov = true;
  std::vector<Tensor> velocity;

  void reset(const ParamStore& params) {
    velocity.clear();
    velocity.reserve(params.count());
    for (const auto& e : params.entries()) velocity.emplace_back(e.shape);
  }

  void step(ParamStore& params, const std::vector<Tensor>& grads, double lr) {
    if (velocity.empty()) reset(params);
    if (grads.size() != params.count() || velocity.size() != params.count()) {
      throw ContractError("SgdNesterov::step: gradient/velocity count mismatch");
    }
    for (std::size_t i = 0; i < params.count(); ++i) {
      Tensor& p = params.value(static_cast<int>(i));
      Tensor& v = velocity[i];
      const Tensor& g = grads[i];
      if (!p.same_shape(g) || !p.same_shape(v)) {
        throw ShapeError("SgdNesterov::step: shape mismatch for " +
                         params.entry(static_cast<int>(i)).name);
      }
      for (std::int64_t j = 0; j < p.size(); ++j) {
        v[j] = momentum * v[j] - lr * g[j];
        p[j] += nesterov ? momentum * v[j] - lr * g[j] : v[j];
      }
    }
  }
};

// lr = base * (1 - epoch/max_epochs)^power
inline double poly_lr(std::int64_t epoch, std::int64_t max_epochs = 1000,
                      double base_lr = 1e-3, double power = 0.9) {
  if (epoch < 0 || epoch >= max_epochs) {
    throw ContractError("poly_lr: epoch " + std::to_string(epoch) + " outside [0, " +
                        std::to_string(max_epochs) + ")");
  }
  return base_lr *
         std::pow(1.0 - static_cast<double>(epoch) / static_cast<double>(max_epochs), power);
}

}  // namespace dmc
