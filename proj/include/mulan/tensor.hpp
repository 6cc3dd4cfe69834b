// Copyright 2026 The Mulan Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mulan/errors.hpp"

namespace mulan {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a backward pass reaches this tensor
  bool requires_grad = false;
  bool is_leaf = true;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

/// Handle to a dense row-major array. Copies share storage; use clone() for a
/// deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : impl_(std::make_shared<TensorStorage<T>>()) {
    validate(shape);
    impl_->value.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<TensorStorage<T>>()) {
    validate(shape);
    if (values.size() != shape_numel(shape)) {
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->value = std::move(values);
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->value.size(); }

  std::span<const T> values() const { return impl_->value; }
  /// Mutable access for leaves (parameters, buffers, inputs). Op outputs are
  /// treated as immutable.
  std::span<T> values_mut() { return impl_->value; }
  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->value[0];
  }
  T at(std::size_t flat) const { return impl_->value.at(flat); }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return impl_->is_leaf; }

  bool has_grad() const { return impl_->grad.size() == impl_->value.size() && numel() > 0; }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> grad_mut() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }

  /// Deep copy of the values, detached from any tape.
  Tensor clone() const { return Tensor(impl_->shape, impl_->value); }
  Tensor detach() const { return clone(); }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(impl_->shape, std::vector<U>(impl_->value.begin(), impl_->value.end()));
  }

  const std::shared_ptr<TensorStorage<T>>& storage() const { return impl_; }
  static Tensor wrap(std::shared_ptr<TensorStorage<T>> s) {
    Tensor t;
    t.impl_ = std::move(s);
    return t;
  }

  bool same_as(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  static void validate(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    }
  }

  std::shared_ptr<TensorStorage<T>> impl_;
};

/// Ordered record of differentiable operations. Entries are appended in
/// execution order, so inputs of an entry always precede it.
template <typename T>
class Tape {
 public:
  using Storage = TensorStorage<T>;

  struct Entry {
    std::string_view op;
    std::vector<std::shared_ptr<Storage>> inputs;
    std::shared_ptr<Storage> output;
    std::function<void(const Entry&)> backward;

    bool needs_grad(std::size_t i) const { return inputs[i]->requires_grad; }
    std::span<T> input_grad(std::size_t i) const {
      inputs[i]->ensure_grad();
      return inputs[i]->grad;
    }
    std::span<const T> output_grad() const { return output->grad; }
  };

  Tape() = default;
  explicit Tape(bool enabled) : enabled_(enabled) {}
  static Tape no_grad() { return Tape(false); }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  bool enabled() const { return enabled_; }

  template <typename... Ts>
  bool should_record(const Ts&... inputs) const {
    return enabled_ && (inputs.requires_grad() || ...);
  }

  /// Append an entry producing `out` from `inputs`. Marks `out` as a
  /// non-leaf that requires grad.
  void record(std::string_view op, std::vector<Tensor<T>> inputs, Tensor<T>& out,
              std::function<void(const Entry&)> rule) {
    Entry e;
    e.op = op;
    e.inputs.reserve(inputs.size());
    for (auto& t : inputs) e.inputs.push_back(t.storage());
    out.storage()->requires_grad = true;
    out.storage()->is_leaf = false;
    e.output = out.storage();
    e.backward = std::move(rule);
    live_values_ += out.numel();
    entries_.push_back(std::move(e));
    high_water_entries_ = std::max(high_water_entries_, entries_.size());
    high_water_values_ = std::max(high_water_values_, live_values_);
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t live_values() const { return live_values_; }
  std::size_t high_water_entries() const { return high_water_entries_; }
  std::size_t high_water_values() const { return high_water_values_; }
  void reset_high_water() {
    high_water_entries_ = entries_.size();
    high_water_values_ = live_values_;
  }

  /// Drop all entries, releasing the activations they keep alive.
  void clear() {
    entries_.clear();
    live_values_ = 0;
  }

 private:
  std::vector<Entry> entries_;
  std::size_t live_values_ = 0;
  std::size_t high_water_entries_ = 0;
  std::size_t high_water_values_ = 0;
  bool enabled_ = true;
};

/// Reverse-mode pass from a scalar loss. Leaf gradients accumulate across
/// calls; intermediate gradients are recomputed from scratch each time.
template <typename T>
void backward(const Tensor<T>& loss, Tape<T>& tape) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad() || loss.is_leaf()) {
    throw ContractError("backward(): loss is not recorded on the tape");
  }
  auto& entries = tape.entries();
  bool found = false;
  for (const auto& e : entries) {
    e.output->grad.assign(e.output->value.size(), T(0));
    found = found || e.output == loss.storage();
  }
  if (!found) throw ContractError("backward(): loss is not recorded on the tape");
  loss.storage()->grad[0] = T(1);
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
    it->backward(*it);
  }
}

template <typename T>
void check_finite(const Tensor<T>& t, std::string_view op) {
  for (T v : t.values()) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite value produced by " + std::string(op) + " (shape " +
                         shape_str(t.shape()) + ")");
    }
  }
}

}  // namespace mulan
