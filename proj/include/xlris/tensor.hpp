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

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace xlris {

// Storage for tensor values and gradients. The fixed alignment keeps Eigen's
// vectorized kernels on the same code path for every buffer, so results do
// not depend on where the allocator happened to place the data.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

using Shape = std::vector<std::size_t>;

class Tape;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorNode {
  Shape shape;
  Buffer value;
  Buffer grad;  // empty until first accumulation
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

// Dense row-major fp64 array taking part in reverse-mode differentiation.
//
// A Tensor is a handle: copies share storage, the way activations flow
// through a graph. Use clone() for an independent copy. Complex channel
// quantities are carried as a leading real/imaginary axis of size 2.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, Buffer data, bool requires_grad = false);
  Tensor(Shape shape, const std::vector<double>& data, bool requires_grad = false);
  Tensor(Shape shape, std::initializer_list<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  std::span<double> data() { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return node_->grad.size() == node_->value.size() && !node_->value.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> grad() { return node_->grad; }
  void zero_grad();

  // Deep copy; the copy is a leaf with the same requires_grad flag.
  Tensor clone() const;
  // Deep copy detached from any gradient bookkeeping.
  Tensor detach() const;
  // Same storage viewed with a different shape of equal element count.
  // Only valid outside a recording tape (used for parameter plumbing).
  void reshape_inplace(Shape shape);

  const std::shared_ptr<detail::TensorNode>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
  friend class Tape;
  friend Tensor make_op_output(Tape& tape, Shape shape, Buffer data, bool any_input_grad);

  std::shared_ptr<detail::TensorNode> node_;
};

// Ordered record of executed primitives. Each entry is the vector-Jacobian
// product of one op, appended after its inputs were produced; backward()
// replays them in reverse. One Tape per thread.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape no_grad() { return Tape(false); }

  bool recording() const { return recording_; }
  std::size_t size() const { return steps_.size(); }

  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }

  // Seeds d(loss)/d(loss) = 1 and propagates to every reachable leaf with
  // requires_grad. Leaf gradients accumulate; the tape is consumed.
  void backward(const Tensor& loss);
  void clear() { steps_.clear(); }

 private:
  bool recording_;
  std::vector<std::function<void()>> steps_;
};

// Creates the output tensor of a primitive. The output requires grad iff the
// tape records and at least one input requires grad.
Tensor make_op_output(Tape& tape, Shape shape, Buffer data, bool any_input_grad);

// Little-endian "TNSR" | u32 rank | u64 dims[rank] | f64 payload (row-major).
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace xlris
