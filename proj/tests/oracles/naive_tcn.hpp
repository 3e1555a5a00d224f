/*
 * Copyright 2026 The mgptcn Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

// Step-by-step TCN evaluation with plain loops, written directly from the
// block definition. Used to check the graph-based implementation.

#include <cmath>
#include <vector>

#include "mgptcn/tcn.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;  // [channel][time]

inline Mat naive_conv(const Mat& x, const mgptcn::tcn::Tensor& k, const mgptcn::tcn::Tensor& b,
                      std::size_t dilation) {
  const std::size_t cout = k.shape[0], cin = k.shape[1], w = k.shape[2], t = x[0].size();
  Mat y(cout, std::vector<double>(t, 0.0));
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t s = 0; s < t; ++s) {
      double acc = b.values[o];
      for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t j = 0; j < w; ++j) {
          const long src = static_cast<long>(s) - static_cast<long>(j * dilation);
          if (src >= 0) acc += k.values[(o * cin + c) * w + j] * x[c][static_cast<std::size_t>(src)];
        }
      y[o][s] = acc;
    }
  return y;
}

inline Mat naive_relu_norm(const Mat& x, const mgptcn::tcn::Tensor& gain,
                           const mgptcn::tcn::Tensor& bias) {
  Mat y = x;
  const std::size_t c = x.size(), t = x[0].size();
  for (std::size_t s = 0; s < t; ++s) {
    double m = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
      y[i][s] = std::max(0.0, x[i][s]);
      m += y[i][s];
    }
    m /= c;
    double v = 0.0;
    for (std::size_t i = 0; i < c; ++i) v += (y[i][s] - m) * (y[i][s] - m);
    v /= c;
    for (std::size_t i = 0; i < c; ++i)
      y[i][s] = (y[i][s] - m) / std::sqrt(v + 1e-5) * gain.values[i] + bias.values[i];
  }
  return y;
}

inline Mat naive_block(const Mat& x, const mgptcn::tcn::BlockWeights& b, std::size_t dilation) {
  Mat h = naive_relu_norm(naive_conv(x, b.conv1, b.bias1, dilation), b.norm1_gain, b.norm1_bias);
  h = naive_relu_norm(naive_conv(h, b.conv2, b.bias2, dilation), b.norm2_gain, b.norm2_bias);
  Mat res = b.proj ? naive_conv(x, *b.proj, *b.proj_bias, 1) : x;
  for (std::size_t i = 0; i < h.size(); ++i)
    for (std::size_t s = 0; s < h[i].size(); ++s) h[i][s] += res[i][s];
  return h;
}

inline double naive_logit(const Mat& z, const mgptcn::tcn::TCNWeights& w) {
  Mat h = z;
  std::size_t d = 1;
  for (const auto& b : w.blocks) {
    h = naive_block(h, b, d);
    d *= 2;
  }
  double logit = w.head_bias.values[0];
  for (std::size_t i = 0; i < h.size(); ++i) logit += w.head.values[i] * h[i].back();
  return logit;
}

// Earliest input time index whose perturbation changes the logit.
inline std::size_t measured_receptive_field(const Mat& z, const mgptcn::tcn::TCNWeights& w) {
  const double base = naive_logit(z, w);
  const std::size_t t = z[0].size();
  std::size_t earliest = t;
  for (std::size_t s = 0; s < t; ++s) {
    Mat p = z;
    for (auto& row : p) row[s] += 3.0;
    if (naive_logit(p, w) != base) {
      earliest = s;
      break;
    }
  }
  return t - earliest;
}

}  // namespace oracle
