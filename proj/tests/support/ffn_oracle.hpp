#pragma once

// Materializing FFN reference in double precision, straight from the
// definition: hidden = act(x W_in + b_in), out = hidden W_out + b_out.

#include <cmath>
#include <cstddef>
#include <vector>

#include "flashsvd/ffn.hpp"
#include "flashsvd/tensor.hpp"

namespace oracle {

inline double act_f64(double v, flashsvd::Activation act) {
  switch (act) {
    case flashsvd::Activation::GeluErf:
      return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
    case flashsvd::Activation::GeluTanh:
      return 0.5 * v *
             (1.0 + std::tanh(std::sqrt(2.0 / 3.141592653589793) *
                              (v + 0.044715 * v * v * v)));
    case flashsvd::Activation::Relu:
      return v > 0.0 ? v : 0.0;
    case flashsvd::Activation::Identity:
      return v;
  }
  return v;
}

inline flashsvd::Tensor ffn_f64(const flashsvd::Tensor& x,
                                const flashsvd::Tensor& w_in,
                                const flashsvd::Tensor& b_in,
                                const flashsvd::Tensor& w_out,
                                const flashsvd::Tensor& b_out,
                                flashsvd::Activation act) {
  const std::size_t batch = x.shape()[0], seq = x.shape()[1], d = x.shape()[2];
  const std::size_t d_ff = w_in.shape()[1];
  flashsvd::Tensor out({batch, seq, d});
  std::vector<double> hidden(d_ff);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < seq; ++i) {
      for (std::size_t j = 0; j < d_ff; ++j) {
        double acc = b_in.at(j);
        for (std::size_t kk = 0; kk < d; ++kk)
          acc += static_cast<double>(x.at(b, i, kk)) *
                 static_cast<double>(w_in.at(kk, j));
        hidden[j] = act_f64(acc, act);
      }
      for (std::size_t j = 0; j < d; ++j) {
        double acc = b_out.at(j);
        for (std::size_t kk = 0; kk < d_ff; ++kk)
          acc += hidden[kk] * static_cast<double>(w_out.at(kk, j));
        out.at(b, i, j) = static_cast<float>(acc);
      }
    }
  return out;
}

}  // namespace oracle
