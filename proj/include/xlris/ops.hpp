// SPDX-License-Identifier: Apache-2.0
//
// xlris - hybrid-field XL-RIS channel simulation and estimation
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
// http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// ------------------------------------------------------------------------

#pragma once

// Differentiable primitives. Every function records its vector-Jacobian
// product on the given tape when the tape records and an input requires
// grad. Image tensors are [C, H, W]; kernels are [Cout, Cin, kh, kw].
// Convolutions use the cross-correlation convention (no kernel flip).

#include <cstdint>

#include "xlris/tensor.hpp"

namespace xlris::ops {

// Multiply-accumulate count of convolution and matmul primitives executed
// on this thread (forward only). Reset by assigning 0.
std::uint64_t& mac_count();

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, double c);
// s is a one-element tensor.
Tensor scale(Tape& tape, const Tensor& x, const Tensor& s);
// Multiplies channel c of x [C,H,W] by m[c]; m has shape [C,1,1].
Tensor channel_mul(Tape& tape, const Tensor& x, const Tensor& m);
// Adds b[c] to every element of channel c of x [C,H,W].
Tensor add_channel_bias(Tape& tape, const Tensor& x, const Tensor& b);
Tensor relu(Tape& tape, const Tensor& x);
Tensor sum(Tape& tape, const Tensor& x);
// Returns sum((a - b)^2) as a one-element tensor.
Tensor squared_distance(Tape& tape, const Tensor& a, const Tensor& b);
Tensor squared_norm(Tape& tape, const Tensor& x);
// Concatenates [Ca,H,W] and [Cb,H,W] into [Ca+Cb,H,W].
Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b);

// input [Cin,H,W], kernel [Cout,Cin,kh,kw], bias [Cout] or undefined.
// Output [Cout, (H+2p-kh)/s+1, (W+2p-kw)/s+1].
Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride = 1,
              int padding = 0);
// input [Cin,H,W], kernel [Cin,Cout,kh,kw]; the linear adjoint of conv2d with
// the same kernel, stride and padding. Output [Cout, (H-1)s-2p+kh, (W-1)s-2p+kw].
Tensor conv2d_transpose(Tape& tape, const Tensor& input, const Tensor& kernel, int stride = 1, int padding = 0);
// input [C,H,W], kernel [C,1,kh,kw], stride 1; bias [C] or undefined.
Tensor depthwise_conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, int padding,
                        const Tensor& bias = Tensor());

// x [C,...], slope [C].
Tensor prelu(Tape& tape, const Tensor& x, const Tensor& slope);
// max(|x| - tau, 0) sign(x). The derivative is taken as 0 on |x| <= tau.
Tensor soft_threshold(Tape& tape, const Tensor& x, double tau);
// Learnable threshold: tau is a one-element tensor and receives gradient.
Tensor soft_threshold(Tape& tape, const Tensor& x, const Tensor& tau);
// Normalizes x [C,H,W] over C at every (h,w), then applies per-channel
// scale [C] and shift [C].
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& scale, const Tensor& shift, double eps = 1e-5);
// [C,H,W] -> [C,1,1] spatial mean.
Tensor global_avg_pool(Tape& tape, const Tensor& x);
// [C*r*r, H, W] -> [C, H*r, W*r] with out[c][h*r+i][w*r+j] = in[c*r*r + i*r + j][h][w].
Tensor pixel_shuffle(Tape& tape, const Tensor& x, int r);
// Inverse of pixel_shuffle.
Tensor space_to_depth(Tape& tape, const Tensor& x, int r);

// x [C,R,K] times m [K,P] -> [C,R,P] (each channel plane right-multiplied).
Tensor matmul_right(Tape& tape, const Tensor& x, const Tensor& m);
// x [C,R,P] times m^T with m [K,P] -> [C,R,K].
Tensor matmul_right_transposed(Tape& tape, const Tensor& x, const Tensor& m);

}  // namespace xlris::ops
