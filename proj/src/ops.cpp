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

#include "xlris/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>

#include "xlris/errors.hpp"

namespace xlris::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using NodePtr = std::shared_ptr<detail::TensorNode>;

bool wants(const Tensor& t) { return t.defined() && t.requires_grad(); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank)
    throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
}

double* grad_of(const NodePtr& n) {
  n->ensure_grad();
  return n->grad.data();
}

struct ConvGeometry {
  std::ptrdiff_t channels, height, width;  // input side
  std::ptrdiff_t kh, kw, stride, pad;
  std::ptrdiff_t out_h, out_w;
  std::ptrdiff_t rows() const { return channels * kh * kw; }
  std::ptrdiff_t cols() const { return out_h * out_w; }
};

// col[(c*kh + i)*kw + j][oh*out_w + ow] = x[c][oh*s - p + i][ow*s - p + j] (0 outside).
void im2col(const ConvGeometry& g, const double* x, double* col) {
  const auto ncols = g.cols();
  for (std::ptrdiff_t c = 0; c < g.channels; ++c) {
    const double* xc = x + c * g.height * g.width;
    for (std::ptrdiff_t i = 0; i < g.kh; ++i) {
      for (std::ptrdiff_t j = 0; j < g.kw; ++j) {
        double* row = col + ((c * g.kh + i) * g.kw + j) * ncols;
        for (std::ptrdiff_t oh = 0; oh < g.out_h; ++oh) {
          double* dst = row + oh * g.out_w;
          const std::ptrdiff_t ih = oh * g.stride - g.pad + i;
          if (ih < 0 || ih >= g.height) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          const double* src = xc + ih * g.width;
          if (g.stride == 1) {
            const std::ptrdiff_t shift = j - g.pad;
            const std::ptrdiff_t lo = std::clamp<std::ptrdiff_t>(-shift, 0, g.out_w);
            const std::ptrdiff_t hi = std::clamp<std::ptrdiff_t>(g.width - shift, 0, g.out_w);
            std::fill(dst, dst + lo, 0.0);
            for (std::ptrdiff_t ow = lo; ow < hi; ++ow) dst[ow] = src[ow + shift];
            std::fill(dst + std::max(lo, hi), dst + g.out_w, 0.0);
          } else {
            for (std::ptrdiff_t ow = 0; ow < g.out_w; ++ow) {
              const std::ptrdiff_t iw = ow * g.stride - g.pad + j;
              dst[ow] = (iw >= 0 && iw < g.width) ? src[iw] : 0.0;
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates col back into x.
void col2im(const ConvGeometry& g, const double* col, double* x) {
  const auto ncols = g.cols();
  for (std::ptrdiff_t c = 0; c < g.channels; ++c) {
    double* xc = x + c * g.height * g.width;
    for (std::ptrdiff_t i = 0; i < g.kh; ++i) {
      for (std::ptrdiff_t j = 0; j < g.kw; ++j) {
        const double* row = col + ((c * g.kh + i) * g.kw + j) * ncols;
        for (std::ptrdiff_t oh = 0; oh < g.out_h; ++oh) {
          const std::ptrdiff_t ih = oh * g.stride - g.pad + i;
          if (ih < 0 || ih >= g.height) continue;
          const double* src = row + oh * g.out_w;
          double* dst = xc + ih * g.width;
          if (g.stride == 1) {
            const std::ptrdiff_t shift = j - g.pad;
            const std::ptrdiff_t lo = std::clamp<std::ptrdiff_t>(-shift, 0, g.out_w);
            const std::ptrdiff_t hi = std::clamp<std::ptrdiff_t>(g.width - shift, 0, g.out_w);
            for (std::ptrdiff_t ow = lo; ow < hi; ++ow) dst[ow + shift] += src[ow];
          } else {
            for (std::ptrdiff_t ow = 0; ow < g.out_w; ++ow) {
              const std::ptrdiff_t iw = ow * g.stride - g.pad + j;
              if (iw >= 0 && iw < g.width) dst[iw] += src[ow];
            }
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeometry& g) { return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0; }

ConvGeometry conv_geometry(const char* op, std::size_t channels, std::size_t height, std::size_t width,
                           std::size_t kh, std::size_t kw, int stride, int padding) {
  if (stride < 1) throw ArgumentError(std::string(op) + ": stride must be >= 1, got " + std::to_string(stride));
  if (padding < 0) throw ArgumentError(std::string(op) + ": padding must be >= 0, got " + std::to_string(padding));
  ConvGeometry g{static_cast<std::ptrdiff_t>(channels),
                 static_cast<std::ptrdiff_t>(height),
                 static_cast<std::ptrdiff_t>(width),
                 static_cast<std::ptrdiff_t>(kh),
                 static_cast<std::ptrdiff_t>(kw),
                 stride,
                 padding,
                 0,
                 0};
  const auto ph = g.height + 2 * g.pad;
  const auto pw = g.width + 2 * g.pad;
  if (g.kh > ph || g.kw > pw)
    throw DimensionError(std::string(op) + ": kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " exceeds padded input " + std::to_string(ph) + "x" + std::to_string(pw) + " (axes 1,2)");
  g.out_h = (ph - g.kh) / g.stride + 1;
  g.out_w = (pw - g.kw) / g.stride + 1;
  return g;
}

}  // namespace

std::uint64_t& mac_count() {
  thread_local std::uint64_t count = 0;
  return count;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Buffer v(a.numel());
  const auto da = a.data();
  const auto db = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = da[i] + db[i];
  auto out = make_op_output(tape, a.shape(), std::move(v), wants(a) || wants(b));
  if (out.requires_grad()) {
    tape.record([an = a.node(), bn = b.node(), on = out.node()] {
      if (on->grad.empty()) return;
      const std::size_t n = on->value.size();
      if (an->requires_grad) {
        double* ga = grad_of(an);
        for (std::size_t i = 0; i < n; ++i) ga[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        double* gb = grad_of(bn);
        for (std::size_t i = 0; i < n; ++i) gb[i] += on->grad[i];
      }
    });
  }
  return out;
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Buffer v(a.numel());
  const auto da = a.data();
  const auto db = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = da[i] - db[i];
  auto out = make_op_output(tape, a.shape(), std::move(v), wants(a) || wants(b));
  if (out.requires_grad()) {
    tape.record([an = a.node(), bn = b.node(), on = out.node()] {
      if (on->grad.empty()) return;
      const std::size_t n = on->value.size();
      if (an->requires_grad) {
        double* ga = grad_of(an);
        for (std::size_t i = 0; i < n; ++i) ga[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        double* gb = grad_of(bn);
        for (std::size_t i = 0; i < n; ++i) gb[i] -= on->grad[i];
      }
    });
  }
  return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Buffer v(a.numel());
  const auto da = a.data();
  const auto db = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = da[i] * db[i];
  auto out = make_op_output(tape, a.shape(), std::move(v), wants(a) || wants(b));
  if (out.requires_grad()) {
    tape.record([an = a.node(), bn = b.node(), on = out.node()] {
      if (on->grad.empty()) return;
      const std::size_t n = on->value.size();
      if (an->requires_grad) {
        double* ga = grad_of(an);
        for (std::size_t i = 0; i < n; ++i) ga[i] += on->grad[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        double* gb = grad_of(bn);
        for (std::size_t i = 0; i < n; ++i) gb[i] += on->grad[i] * an->value[i];
      }
    });
  }
  return out;
}

Tensor scale(Tape& tape, const Tensor& x, double c) {
  Buffer v(x.data().begin(), x.data().end());
  for (auto& e : v) e *= c;
  auto out = make_op_output(tape, x.shape(), std::move(v), wants(x));
  if (out.requires_grad()) {
    tape.record([xn = x.node(), on = out.node(), c] {
      if (on->grad.empty()) return;
      double* gx = grad_of(xn);
      for (std::size_t i = 0; i < on->grad.size(); ++i) gx[i] += c * on->grad[i];
    });
  }
  return out;
}

Tensor scale(Tape& tape, const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw DimensionError("scale: factor must have one element, got " + shape_str(s.shape()));
  const double c = s[0];
  Buffer v(x.data().begin(), x.data().end());
  for (auto& e : v) e *= c;
  auto out = make_op_output(tape, x.shape(), std::move(v), wants(x) || wants(s));
  if (out.requires_grad()) {
    tape.record([xn = x.node(), sn = s.node(), on = out.node()] {
      if (on->grad.empty()) return;
      const double c = sn->value[0];
      const std::size_t n = on->grad.size();
      if (xn->requires_grad) {
        double* gx = grad_of(xn);
        for (std::size_t i = 0; i < n; ++i) gx[i] += c * on->grad[i];
      }
      if (sn->requires_grad) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += xn->value[i] * on->grad[i];
        grad_of(sn)[0] += acc;
      }
    });
  }
  return out;
}

Tensor channel_mul(Tape& tape, const Tensor& x, const Tensor& m) {
  require_rank(x, 3, "channel_mul", "input");
  if (m.numel() != x.dim(0))
    throw DimensionError("channel_mul: map has " + std::to_string(m.numel()) + " entries for " +
                         std::to_string(x.dim(0)) + " channels (axis 0)");
  const std::size_t C = x.dim(0);
  const std::size_t hw = x.numel() / C;
  Buffer v(x.numel());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t p = 0; p < hw; ++p) v[c * hw + p] = x[c * hw + p] * m[c];
  auto out = make_op_output(tape, x.shape(), std::move(v), wants(x) || wants(m));
  if (out.requires_grad()) {
    tape.record([xn = x.node(), mn = m.node(), on = out.node(), C, hw] {
      if (on->grad.empty()) return;
      if (xn->requires_grad) {
        double* gx = grad_of(xn);
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t p = 0; p < hw; ++p) gx[c * hw + p] += on->grad[c * hw + p] * mn->value[c];
      }
      if (mn->requires_grad) {
        double* gm = grad_of(mn);
        for (std::size_t c = 0; c < C; ++c) {
          double acc = 0.0;
          for (std::size_t p = 0; p < hw; ++p) acc += on->grad[c * hw + p] * xn->value[c * hw + p];
          gm[c] += acc;
        }
      }
    });
  }
  return out;
}

Tensor add_channel_bias(Tape& tape, const Tensor& x, const Tensor& b) {
  require_rank(x, 3, "add_channel_bias", "input");
  if (b.numel() != x.dim(0))
    throw DimensionError("add_channel_bias: bias has " + std::to_string(b.numel()) + " entries for " +
                         std::to_string(x.dim(0)) + " channels (axis 0)");
  const std::size_t C = x.dim(0);
  const std::size_t hw = x.numel() / C;
  Buffer v(x.data().begin(), x.data().end());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t p = 0; p < hw; ++p) v[c * hw + p] += b[c];
  auto out = make_op_output(tape, x.shape(), std::move(v), wants(x) || wants(b));
  if (out.requires_grad()) {
    tape.record([xn = x.node(), bn = b.node(), on = out.node(), C, hw] {
      if (on->grad.empty()) return;
      if (xn->requires_grad) {
        double* gx = grad_of(xn);
        for (std::size_t i = 0; i < on->grad.size(); ++i) gx[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        double* gb = grad_of(bn);
        for (std::size_t c = 0; c < C; ++c) {
          double acc = 0.0;
          for (std::size_t p = 0; p < hw; ++p) acc += on->grad[c * hw + p];
          gb[c] += acc;
        }
      }
    });
  }
  return out;
}

Tensor relu(Tape& tape, const Tensor& x) {
  Buffer v(x.data().begin(), x.data().end());
  for (auto& e : v) e = e > 0.0 ? e : 0.0;
  auto out = make_op_output(tape, x.shape(), std::move(v), wants(x));
  if (out.requires_grad()) {
    tape.record([xn = x.node(), on = out.node()] {
      if (on->grad.empty()) return;
      double* gx = grad_of(xn);
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        if (xn->value[i] > 0.0) gx[i] += on->grad[i];
    });
  }
  return out;
}

Tensor sum(Tape& tape, const Tensor& x) {
  double acc = 0.0;
  for (double e : x.data()) acc += e;
  auto out = make_op_output(tape, {1}, {acc}, wants(x));
  if (out.requires_grad()) {
    tape.record([xn = x.node(), on = out.node()] {
      if (on->grad.empty()) return;
      double* gx = grad_of(xn);
      const double g = on->grad[0];
      for (std::size_t i = 0; i < xn->value.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

Tensor squared_distance(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "squared_distance");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  auto out = make_op_output(tape, {1}, {acc}, wants(a) || wants(b));
  if (out.requires_grad()) {
    tape.record([an = a.node(), bn = b.node(), on = out.node()] {
      if (on->grad.empty()) return;
      const double g = 2.0 * on->grad[0];
      const std::size_t n = an->value.size();
      if (an->requires_grad) {
        double* ga = grad_of(an);
        for (std::size_t i = 0; i < n; ++i) ga[i] += g * (an->value[i] - bn->value[i]);
      }
      if (bn->requires_grad) {
        double* gb = grad_of(bn);
        for (std::size_t i = 0; i < n; ++i) gb[i] -= g * (an->value[i] - bn->value[i]);
      }
    });
  }
  return out;
}

Tensor squared_norm(Tape& tape, const Tensor& x) {
  double acc = 0.0;
  for (double e : x.data()) acc += e * e;
  auto out = make_op_output(tape, {1}, {acc}, wants(x));
  if (out.requires_grad()) {
    tape.record([xn = x.node(), on = out.node()] {
      if (on->grad.empty()) return;
      double* gx = grad_of(xn);
      const double g = 2.0 * on->grad[0];
      for (std::size_t i = 0; i < xn->value.size(); ++i) gx[i] += g * xn->value[i];
    });
  }
  return out;
}

Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank(a, 3, "concat_channels", "first input");
  require_rank(b, 3, "concat_channels", "second input");
  if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
    throw DimensionError("concat_channels: spatial mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()) + " (axes 1,2)");
  Buffer v;
  v.reserve(a.numel() + b.numel());
  v.insert(v.end(), a.data().begin(), a.data().end());
  v.insert(v.end(), b.data().begin(), b.data().end());
  auto out = make_op_output(tape, {a.dim(0) + b.dim(0), a.dim(1), a.dim(2)}, std::move(v), wants(a) || wants(b));
  if (out.requires_grad()) {
    tape.record([an = a.node(), bn = b.node(), on = out.node()] {
      if (on->grad.empty()) return;
      const std::size_t na = an->value.size();
      if (an->requires_grad) {
        double* ga = grad_of(an);
        for (std::size_t i = 0; i < na; ++i) ga[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        double* gb = grad_of(bn);
        for (std::size_t i = 0; i < bn->value.size(); ++i) gb[i] += on->grad[na + i];
      }
    });
  }
  return out;
}

Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride, int padding) {
  require_rank(input, 3, "conv2d", "input");
  require_rank(kernel, 4, "conv2d", "kernel");
  if (kernel.dim(1) != input.dim(0))
    throw DimensionError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) + " input channels, input " +
                         shape_str(input.shape()) + " has " + std::to_string(input.dim(0)) +
                         " (kernel axis 1 vs input axis 0)");
  const std::size_t cout = kernel.dim(0);
  if (bias.defined() && bias.numel() != cout)
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " does not match " + std::to_string(cout) +
                         " output channels (kernel axis 0)");
  const auto g =
      conv_geometry("conv2d", input.dim(0), input.dim(1), input.dim(2), kernel.dim(2), kernel.dim(3), stride, padding);
  const auto rows = g.rows();
  const auto cols = g.cols();

  Buffer col;
  const double* colp = input.data().data();
  if (!is_pointwise(g)) {
    col.resize(static_cast<std::size_t>(rows * cols));
    im2col(g, input.data().data(), col.data());
    colp = col.data();
  }
  mac_count() += static_cast<std::uint64_t>(cout) * static_cast<std::uint64_t>(rows * cols);
  Buffer v(cout * static_cast<std::size_t>(cols));
  {
    MapMat o(v.data(), static_cast<Eigen::Index>(cout), cols);
    CMapMat k(kernel.data().data(), static_cast<Eigen::Index>(cout), rows);
    CMapMat c(colp, rows, cols);
    o.noalias() = k * c;
    if (bias.defined())
      for (std::size_t co = 0; co < cout; ++co) o.row(static_cast<Eigen::Index>(co)).array() += bias[co];
  }
  auto out = make_op_output(tape, {cout, static_cast<std::size_t>(g.out_h), static_cast<std::size_t>(g.out_w)},
                            std::move(v), wants(input) || wants(kernel) || wants(bias));
  if (out.requires_grad()) {
    tape.record([in = input.node(), kn = kernel.node(), bn = bias.defined() ? bias.node() : NodePtr{},
                 on = out.node(), g, col = std::move(col), cout] {
      if (on->grad.empty()) return;
      const auto rows = g.rows();
      const auto cols = g.cols();
      const auto co = static_cast<Eigen::Index>(cout);
      CMapMat dout(on->grad.data(), co, cols);
      const double* colp = col.empty() ? in->value.data() : col.data();
      if (kn->requires_grad) {
        MapMat dk(grad_of(kn), co, rows);
        dk.noalias() += dout * CMapMat(colp, rows, cols).transpose();
      }
      if (bn && bn->requires_grad) {
        double* gb = grad_of(bn);
        for (Eigen::Index c = 0; c < co; ++c) gb[c] += dout.row(c).sum();
      }
      if (in->requires_grad) {
        CMapMat k(kn->value.data(), co, rows);
        if (is_pointwise(g)) {
          MapMat dx(grad_of(in), rows, cols);
          dx.noalias() += k.transpose() * dout;
        } else {
          RowMat dcol = k.transpose() * dout;
          col2im(g, dcol.data(), grad_of(in));
        }
      }
    });
  }
  return out;
}

Tensor conv2d_transpose(Tape& tape, const Tensor& input, const Tensor& kernel, int stride, int padding) {
  require_rank(input, 3, "conv2d_transpose", "input");
  require_rank(kernel, 4, "conv2d_transpose", "kernel");
  if (kernel.dim(0) != input.dim(0))
    throw DimensionError("conv2d_transpose: kernel expects " + std::to_string(kernel.dim(0)) +
                         " input channels, input " + shape_str(input.shape()) + " has " +
                         std::to_string(input.dim(0)) + " (kernel axis 0 vs input axis 0)");
  if (stride < 1) throw ArgumentError("conv2d_transpose: stride must be >= 1, got " + std::to_string(stride));
  if (padding < 0) throw ArgumentError("conv2d_transpose: padding must be >= 0");
  const std::size_t cin = input.dim(0);
  const std::size_t cout = kernel.dim(1);
  const auto kh = static_cast<std::ptrdiff_t>(kernel.dim(2));
  const auto kw = static_cast<std::ptrdiff_t>(kernel.dim(3));
  const auto out_h = (static_cast<std::ptrdiff_t>(input.dim(1)) - 1) * stride - 2 * padding + kh;
  const auto out_w = (static_cast<std::ptrdiff_t>(input.dim(2)) - 1) * stride - 2 * padding + kw;
  if (out_h < 1 || out_w < 1)
    throw DimensionError("conv2d_transpose: empty output for input " + shape_str(input.shape()) + " (axes 1,2)");
  // Geometry of the forward conv this op is the adjoint of: [cout, out_h, out_w] -> [cin, H, W].
  const auto g = conv_geometry("conv2d_transpose", cout, static_cast<std::size_t>(out_h),
                               static_cast<std::size_t>(out_w), kernel.dim(2), kernel.dim(3), stride, padding);
  if (g.out_h != static_cast<std::ptrdiff_t>(input.dim(1)) || g.out_w != static_cast<std::ptrdiff_t>(input.dim(2)))
    throw DimensionError("conv2d_transpose: inconsistent geometry for input " + shape_str(input.shape()));
  const auto rows = g.rows();  // cout * kh * kw
  const auto cols = g.cols();  // H * W

  mac_count() += static_cast<std::uint64_t>(cin) * static_cast<std::uint64_t>(rows * cols);
  CMapMat k(kernel.data().data(), static_cast<Eigen::Index>(cin), rows);
  CMapMat x(input.data().data(), static_cast<Eigen::Index>(cin), cols);
  Buffer v(cout * static_cast<std::size_t>(out_h * out_w), 0.0);
  if (is_pointwise(g)) {
    MapMat o(v.data(), rows, cols);
    o.noalias() = k.transpose() * x;
  } else {
    RowMat col = k.transpose() * x;
    col2im(g, col.data(), v.data());
  }
  auto out = make_op_output(tape, {cout, static_cast<std::size_t>(out_h), static_cast<std::size_t>(out_w)},
                            std::move(v), wants(input) || wants(kernel));
  if (out.requires_grad()) {
    tape.record([in = input.node(), kn = kernel.node(), on = out.node(), g, cin] {
      if (on->grad.empty()) return;
      const auto rows = g.rows();
      const auto cols = g.cols();
      const auto ci = static_cast<Eigen::Index>(cin);
      Buffer col;
      const double* colp = on->grad.data();
      if (!is_pointwise(g)) {
        col.resize(static_cast<std::size_t>(rows * cols));
        im2col(g, on->grad.data(), col.data());
        colp = col.data();
      }
      CMapMat dcol(colp, rows, cols);
      if (in->requires_grad) {
        MapMat dx(grad_of(in), ci, cols);
        dx.noalias() += CMapMat(kn->value.data(), ci, rows) * dcol;
      }
      if (kn->requires_grad) {
        MapMat dk(grad_of(kn), ci, rows);
        dk.noalias() += CMapMat(in->value.data(), ci, cols) * dcol.transpose();
      }
    });
  }
  return out;
}

Tensor depthwise_conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, int padding, const Tensor& bias) {
  require_rank(input, 3, "depthwise_conv2d", "input");
  require_rank(kernel, 4, "depthwise_conv2d", "kernel");
  const std::size_t C = input.dim(0);
  if (kernel.dim(0) != C || kernel.dim(1) != 1)
    throw DimensionError("depthwise_conv2d: kernel " + shape_str(kernel.shape()) + " must be [" +
                         std::to_string(C) + ",1,kh,kw] for input " + shape_str(input.shape()) + " (axes 0,1)");
  if (bias.defined() && bias.numel() != C)
    throw DimensionError("depthwise_conv2d: bias " + shape_str(bias.shape()) + " for " + std::to_string(C) +
                         " channels");
  const auto g = conv_geometry("depthwise_conv2d", 1, input.dim(1), input.dim(2), kernel.dim(2), kernel.dim(3), 1,
                               padding);
  const auto H = g.height, W = g.width, Ho = g.out_h, Wo = g.out_w, kh = g.kh, kw = g.kw, p = g.pad;

  mac_count() += static_cast<std::uint64_t>(C) * static_cast<std::uint64_t>(Ho * Wo * kh * kw);
  Buffer v(C * static_cast<std::size_t>(Ho * Wo), 0.0);
  const double* x = input.data().data();
  const double* k = kernel.data().data();
  for (std::size_t c = 0; c < C; ++c) {
    const double* xc = x + c * H * W;
    double* oc = v.data() + c * Ho * Wo;
    const double* kc = k + c * kh * kw;
    if (bias.defined()) std::fill(oc, oc + Ho * Wo, bias[c]);
    for (std::ptrdiff_t i = 0; i < kh; ++i) {
      for (std::ptrdiff_t j = 0; j < kw; ++j) {
        const double w = kc[i * kw + j];
        const std::ptrdiff_t shift = j - p;
        const std::ptrdiff_t lo = std::clamp<std::ptrdiff_t>(-shift, 0, Wo);
        const std::ptrdiff_t hi = std::clamp<std::ptrdiff_t>(W - shift, 0, Wo);
        for (std::ptrdiff_t oh = 0; oh < Ho; ++oh) {
          const std::ptrdiff_t ih = oh - p + i;
          if (ih < 0 || ih >= H) continue;
          const double* src = xc + ih * W + shift;
          double* dst = oc + oh * Wo;
          for (std::ptrdiff_t ow = lo; ow < hi; ++ow) dst[ow] += w * src[ow];
        }
      }
    }
  }
  auto out = make_op_output(tape, {C, static_cast<std::size_t>(Ho), static_cast<std::size_t>(Wo)}, std::move(v),
                            wants(input) || wants(kernel) || wants(bias));
  if (out.requires_grad()) {
    tape.record([in = input.node(), kn = kernel.node(), bn = bias.defined() ? bias.node() : NodePtr{},
                 on = out.node(), g, C] {
      if (on->grad.empty()) return;
      const auto H = g.height, W = g.width, Ho = g.out_h, Wo = g.out_w, kh = g.kh, kw = g.kw, p = g.pad;
      const double* dout = on->grad.data();
      double* dx = in->requires_grad ? grad_of(in) : nullptr;
      double* dk = kn->requires_grad ? grad_of(kn) : nullptr;
      for (std::size_t c = 0; c < C; ++c) {
        const double* doc = dout + c * Ho * Wo;
        if (bn && bn->requires_grad) {
          double acc = 0.0;
          for (std::ptrdiff_t q = 0; q < Ho * Wo; ++q) acc += doc[q];
          grad_of(bn)[c] += acc;
        }
        const double* xc = in->value.data() + c * H * W;
        const double* kc = kn->value.data() + c * kh * kw;
        for (std::ptrdiff_t i = 0; i < kh; ++i) {
          for (std::ptrdiff_t j = 0; j < kw; ++j) {
            const double w = kc[i * kw + j];
            const std::ptrdiff_t shift = j - p;
            const std::ptrdiff_t lo = std::clamp<std::ptrdiff_t>(-shift, 0, Wo);
            const std::ptrdiff_t hi = std::clamp<std::ptrdiff_t>(W - shift, 0, Wo);
            double acc = 0.0;
            for (std::ptrdiff_t oh = 0; oh < Ho; ++oh) {
              const std::ptrdiff_t ih = oh - p + i;
              if (ih < 0 || ih >= H) continue;
              const double* d = doc + oh * Wo;
              const double* src = xc + ih * W + shift;
              if (dk)
                for (std::ptrdiff_t ow = lo; ow < hi; ++ow) acc += d[ow] * src[ow];
              if (dx) {
                double* dst = dx + c * H * W + ih * W + shift;
                for (std::ptrdiff_t ow = lo; ow < hi; ++ow) dst[ow] += w * d[ow];
              }
            }
            if (dk) dk[c * kh * kw + i * kw + j] += acc;
          }
        }
      }
    });
  }
  return out;
}

Tensor prelu(Tape& tape, const Tensor& x, const Tensor& slope) {
  if (x.rank() < 1 || slope.numel() != x.dim(0))
    throw DimensionError("prelu: slope " + shape_str(slope.shape()) + " must have one entry per channel of " +
                         shape_str(x.shape()) + " (axis 0)");
  const std::size_t C = x.dim(0);
  const std::size_t inner = x.numel() / C;
  Buffer v(x.numel());
  for (std::size_t c = 0; c < C; ++c) {
    const double a = slope[c];
    for (std::size_t p = 0; p < inner; ++p) {
      const double e = x[c * inner + p];
      v[c * inner + p] = e >= 0.0 ? e : a * e;
    }
  }
  auto out = make_op_output(tape, x.shape(), std::move(v), wants(x) || wants(slope));
  if (out.requires_grad()) {
    tape.record([xn = x.node(), sn = slope.node(), on = out.node(), C, inner] {
      if (on->grad.empty()) return;
      double* gx = xn->requires_grad ? grad_of(xn) : nullptr;
      double* gs = sn->requires_grad ? grad_of(sn) : nullptr;
      for (std::size_t c = 0; c < C; ++c) {
        const double a = sn->value[c];
        double acc = 0.0;
        for (std::size_t p = 0; p < inner; ++p) {
          const std::size_t i = c * inner + p;
          const double e = xn->value[i];
          const double d = on->grad[i];
          if (e >= 0.0) {
            if (gx) gx[i] += d;
          } else {
            if (gx) gx[i] += a * d;
            acc += e * d;
          }
        }
        if (gs) gs[c] += acc;
      }
    });
  }
  return out;
}

namespace {

Tensor soft_threshold_impl(Tape& tape, const Tensor& x, double tau, const Tensor& tau_tensor) {
  if (!(tau >= 0.0)) throw ArgumentError("soft_threshold: tau must be >= 0, got " + std::to_string(tau));
  Buffer v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double e = x[i];
    const double m = std::abs(e) - tau;
    v[i] = m > 0.0 ? std::copysign(m, e) : 0.0;
  }
  auto out = make_op_output(tape, x.shape(), std::move(v), wants(x) || wants(tau_tensor));
  if (out.requires_grad()) {
    tape.record([xn = x.node(), tn = tau_tensor.defined() ? tau_tensor.node() : NodePtr{}, on = out.node(), tau] {
      if (on->grad.empty()) return;
      double* gx = xn->requires_grad ? grad_of(xn) : nullptr;
      double acc = 0.0;
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        const double e = xn->value[i];
        if (std::abs(e) > tau) {
          if (gx) gx[i] += on->grad[i];
          acc -= (e > 0.0 ? 1.0 : -1.0) * on->grad[i];
        }
      }
      if (tn && tn->requires_grad) grad_of(tn)[0] += acc;
    });
  }
  return out;
}

}  // namespace

Tensor soft_threshold(Tape& tape, const Tensor& x, double tau) { return soft_threshold_impl(tape, x, tau, Tensor()); }

Tensor soft_threshold(Tape& tape, const Tensor& x, const Tensor& tau) {
  if (tau.numel() != 1)
    throw DimensionError("soft_threshold: tau must have one element, got " + shape_str(tau.shape()));
  return soft_threshold_impl(tape, x, tau[0], tau);
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& scale, const Tensor& shift, double eps) {
  require_rank(x, 3, "layer_norm", "input");
  const std::size_t C = x.dim(0);
  const std::size_t hw = x.dim(1) * x.dim(2);
  if (scale.numel() != C || shift.numel() != C)
    throw DimensionError("layer_norm: scale/shift must have " + std::to_string(C) + " entries (axis 0)");
  Buffer xhat(x.numel());
  Buffer inv_std(hw);
  Buffer v(x.numel());
  const double* xd = x.data().data();
  for (std::size_t p = 0; p < hw; ++p) {
    double mean = 0.0;
    for (std::size_t c = 0; c < C; ++c) mean += xd[c * hw + p];
    mean /= static_cast<double>(C);
    double var = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double d = xd[c * hw + p] - mean;
      var += d * d;
    }
    var /= static_cast<double>(C);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[p] = is;
    for (std::size_t c = 0; c < C; ++c) {
      const double xh = (xd[c * hw + p] - mean) * is;
      xhat[c * hw + p] = xh;
      v[c * hw + p] = scale[c] * xh + shift[c];
    }
  }
  auto out = make_op_output(tape, x.shape(), std::move(v), wants(x) || wants(scale) || wants(shift));
  if (out.requires_grad()) {
    tape.record([xn = x.node(), sn = scale.node(), bn = shift.node(), on = out.node(), xhat = std::move(xhat),
                 inv_std = std::move(inv_std), C, hw] {
      if (on->grad.empty()) return;
      const double* d = on->grad.data();
      if (sn->requires_grad || bn->requires_grad) {
        double* gs = sn->requires_grad ? grad_of(sn) : nullptr;
        double* gb = bn->requires_grad ? grad_of(bn) : nullptr;
        for (std::size_t c = 0; c < C; ++c) {
          double as = 0.0, ab = 0.0;
          for (std::size_t p = 0; p < hw; ++p) {
            as += d[c * hw + p] * xhat[c * hw + p];
            ab += d[c * hw + p];
          }
          if (gs) gs[c] += as;
          if (gb) gb[c] += ab;
        }
      }
      if (xn->requires_grad) {
        double* gx = grad_of(xn);
        const double invc = 1.0 / static_cast<double>(C);
        for (std::size_t p = 0; p < hw; ++p) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t c = 0; c < C; ++c) {
            const double dxh = d[c * hw + p] * sn->value[c];
            m1 += dxh;
            m2 += dxh * xhat[c * hw + p];
          }
          m1 *= invc;
          m2 *= invc;
          for (std::size_t c = 0; c < C; ++c) {
            const double dxh = d[c * hw + p] * sn->value[c];
            gx[c * hw + p] += inv_std[p] * (dxh - m1 - xhat[c * hw + p] * m2);
          }
        }
      }
    });
  }
  return out;
}

Tensor global_avg_pool(Tape& tape, const Tensor& x) {
  require_rank(x, 3, "global_avg_pool", "input");
  const std::size_t C = x.dim(0);
  const std::size_t hw = x.dim(1) * x.dim(2);
  Buffer v(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    double acc = 0.0;
    for (std::size_t p = 0; p < hw; ++p) acc += x[c * hw + p];
    v[c] = acc / static_cast<double>(hw);
  }
  auto out = make_op_output(tape, {C, 1, 1}, std::move(v), wants(x));
  if (out.requires_grad()) {
    tape.record([xn = x.node(), on = out.node(), C, hw] {
      if (on->grad.empty()) return;
      double* gx = grad_of(xn);
      for (std::size_t c = 0; c < C; ++c) {
        const double g = on->grad[c] / static_cast<double>(hw);
        for (std::size_t p = 0; p < hw; ++p) gx[c * hw + p] += g;
      }
    });
  }
  return out;
}

namespace {

// Index map shared by pixel_shuffle and its inverse: for every output
// element of pixel_shuffle, the flat index of its source element.
std::vector<std::size_t> shuffle_map(std::size_t C, std::size_t H, std::size_t W, std::size_t r) {
  std::vector<std::size_t> src(C * H * r * W * r);
  const std::size_t Ho = H * r, Wo = W * r;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t oh = 0; oh < Ho; ++oh)
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        const std::size_t h = oh / r, i = oh % r, w = ow / r, j = ow % r;
        src[(c * Ho + oh) * Wo + ow] = ((c * r * r + i * r + j) * H + h) * W + w;
      }
  return src;
}

Tensor gather(Tape& tape, const Tensor& x, Shape shape, std::vector<std::size_t> src) {
  Buffer v(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) v[i] = x[src[i]];
  auto out = make_op_output(tape, std::move(shape), std::move(v), wants(x));
  if (out.requires_grad()) {
    tape.record([xn = x.node(), on = out.node(), src = std::move(src)] {
      if (on->grad.empty()) return;
      double* gx = grad_of(xn);
      for (std::size_t i = 0; i < src.size(); ++i) gx[src[i]] += on->grad[i];
    });
  }
  return out;
}

}  // namespace

Tensor pixel_shuffle(Tape& tape, const Tensor& x, int r) {
  require_rank(x, 3, "pixel_shuffle", "input");
  if (r < 1) throw ArgumentError("pixel_shuffle: factor must be >= 1");
  const auto rr = static_cast<std::size_t>(r);
  if (x.dim(0) % (rr * rr) != 0)
    throw ArgumentError("pixel_shuffle: " + std::to_string(x.dim(0)) + " channels not divisible by r^2 = " +
                        std::to_string(rr * rr));
  const std::size_t C = x.dim(0) / (rr * rr);
  return gather(tape, x, {C, x.dim(1) * rr, x.dim(2) * rr}, shuffle_map(C, x.dim(1), x.dim(2), rr));
}

Tensor space_to_depth(Tape& tape, const Tensor& x, int r) {
  require_rank(x, 3, "space_to_depth", "input");
  if (r < 1) throw ArgumentError("space_to_depth: factor must be >= 1");
  const auto rr = static_cast<std::size_t>(r);
  if (x.dim(1) % rr != 0 || x.dim(2) % rr != 0)
    throw ArgumentError("space_to_depth: spatial dims " + shape_str(x.shape()) + " not divisible by " +
                        std::to_string(rr));
  const std::size_t C = x.dim(0), H = x.dim(1) / rr, W = x.dim(2) / rr;
  // Invert the shuffle map: output element src[i] of space_to_depth comes from i.
  const auto fwd = shuffle_map(C, H, W, rr);
  std::vector<std::size_t> src(fwd.size());
  for (std::size_t i = 0; i < fwd.size(); ++i) src[fwd[i]] = i;
  return gather(tape, x, {C * rr * rr, H, W}, std::move(src));
}

Tensor matmul_right(Tape& tape, const Tensor& x, const Tensor& m) {
  require_rank(x, 3, "matmul_right", "input");
  require_rank(m, 2, "matmul_right", "matrix");
  if (x.dim(2) != m.dim(0))
    throw DimensionError("matmul_right: input " + shape_str(x.shape()) + " axis 2 does not match matrix " +
                         shape_str(m.shape()) + " axis 0");
  const auto rows = static_cast<Eigen::Index>(x.dim(0) * x.dim(1));
  const auto k = static_cast<Eigen::Index>(m.dim(0));
  const auto p = static_cast<Eigen::Index>(m.dim(1));
  mac_count() += static_cast<std::uint64_t>(rows * k * p);
  Buffer v(static_cast<std::size_t>(rows * p));
  MapMat(v.data(), rows, p).noalias() = CMapMat(x.data().data(), rows, k) * CMapMat(m.data().data(), k, p);
  auto out = make_op_output(tape, {x.dim(0), x.dim(1), m.dim(1)}, std::move(v), wants(x) || wants(m));
  if (out.requires_grad()) {
    tape.record([xn = x.node(), mn = m.node(), on = out.node(), rows, k, p] {
      if (on->grad.empty()) return;
      CMapMat d(on->grad.data(), rows, p);
      if (xn->requires_grad) MapMat(grad_of(xn), rows, k).noalias() += d * CMapMat(mn->value.data(), k, p).transpose();
      if (mn->requires_grad)
        MapMat(grad_of(mn), k, p).noalias() += CMapMat(xn->value.data(), rows, k).transpose() * d;
    });
  }
  return out;
}

Tensor matmul_right_transposed(Tape& tape, const Tensor& x, const Tensor& m) {
  require_rank(x, 3, "matmul_right_transposed", "input");
  require_rank(m, 2, "matmul_right_transposed", "matrix");
  if (x.dim(2) != m.dim(1))
    throw DimensionError("matmul_right_transposed: input " + shape_str(x.shape()) +
                         " axis 2 does not match matrix " + shape_str(m.shape()) + " axis 1");
  const auto rows = static_cast<Eigen::Index>(x.dim(0) * x.dim(1));
  const auto k = static_cast<Eigen::Index>(m.dim(0));
  const auto p = static_cast<Eigen::Index>(m.dim(1));
  mac_count() += static_cast<std::uint64_t>(rows * k * p);
  Buffer v(static_cast<std::size_t>(rows * k));
  MapMat(v.data(), rows, k).noalias() = CMapMat(x.data().data(), rows, p) * CMapMat(m.data().data(), k, p).transpose();
  auto out = make_op_output(tape, {x.dim(0), x.dim(1), m.dim(0)}, std::move(v), wants(x) || wants(m));
  if (out.requires_grad()) {
    tape.record([xn = x.node(), mn = m.node(), on = out.node(), rows, k, p] {
      if (on->grad.empty()) return;
      CMapMat d(on->grad.data(), rows, k);
      if (xn->requires_grad) MapMat(grad_of(xn), rows, p).noalias() += d * CMapMat(mn->value.data(), k, p);
      if (mn->requires_grad)
        MapMat(grad_of(mn), k, p).noalias() += d.transpose() * CMapMat(xn->value.data(), rows, p);
    });
  }
  return out;
}

}  // namespace xlris::ops
