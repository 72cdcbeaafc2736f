#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "core/rng.hpp"
#include "core/tensor.hpp"

namespace trompt {

enum class ParamKind : std::uint8_t { DenseWeight, Bias, Embedding };

struct ParamInfo {
  std::string name;
  Shape shape;
  ParamKind kind;
  std::size_t fan_in = 0;
  std::size_t fan_out = 0;
};

// One graph's view of the registry: every parameter recorded as a
// requires_grad leaf. Passing nullptr for the graph yields plain value
// tensors, which turns the same forward code into a recording-free
// evaluation path.
template <typename T>
struct BoundParams {
  std::unordered_map<std::string, Tensor<T>> leaves;

  const Tensor<T>& operator[](const std::string& name) const {
    auto it = leaves.find(name);
    if (it == leaves.end()) throw_internal("unbound parameter " + name);
    return it->second;
  }
};

// Ordered name -> tensor store for every trainable array, plus one
// gradient slot per parameter. Iteration order is declaration order and
// defines the optimizer update order.
template <typename T>
class ParamRegistry {
 public:
  void declare(std::string name, Shape shape, ParamKind kind,
               std::size_t fan_in = 0, std::size_t fan_out = 0) {
    if (index_.count(name))
      throw_usage("parameter declared twice: " + name);
    index_.emplace(name, infos_.size());
    infos_.push_back(ParamInfo{name, shape, kind, fan_in, fan_out});
    values_.emplace_back(shape_numel(shape), T(0));
    grads_.emplace_back(shape_numel(shape), T(0));
  }

  // Glorot-uniform dense weights, zero biases, normal(0, 1/sqrt(d))
  // embedding rows. One RNG stream over declaration order, so a seed
  // pins every value.
  void init(std::uint64_t seed) {
    Rng rng(seed);
    for (std::size_t i = 0; i < infos_.size(); ++i) {
      const ParamInfo& info = infos_[i];
      auto& v = values_[i];
      switch (info.kind) {
        case ParamKind::DenseWeight: {
          double a = std::sqrt(6.0 / double(info.fan_in + info.fan_out));
          for (auto& x : v) x = static_cast<T>(rng.uniform(-a, a));
          break;
        }
        case ParamKind::Bias:
          std::fill(v.begin(), v.end(), T(0));
          break;
        case ParamKind::Embedding: {
          double sd = 1.0 / std::sqrt(double(info.shape.back()));
          for (auto& x : v) x = static_cast<T>(rng.normal(0.0, sd));
          break;
        }
      }
    }
  }

  std::size_t count() const { return infos_.size(); }
  const std::vector<ParamInfo>& infos() const { return infos_; }

  const ParamInfo& info(const std::string& name) const {
    return infos_[index_of(name)];
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Tensor<T> value(const std::string& name) const {
    std::size_t i = index_of(name);
    return Tensor<T>(infos_[i].shape, values_[i]);
  }

  std::vector<T>& raw_values(std::size_t i) { return values_[i]; }
  const std::vector<T>& raw_values(std::size_t i) const { return values_[i]; }
  std::vector<T>& raw_grads(std::size_t i) { return grads_[i]; }

  void set_value(const std::string& name, const std::vector<T>& v) {
    std::size_t i = index_of(name);
    if (v.size() != values_[i].size())
      throw_usage("set_value: size mismatch for " + name);
    values_[i] = v;
  }

  void zero_grads() {
    for (auto& g : grads_) std::fill(g.begin(), g.end(), T(0));
  }

  // Records every parameter on `g` (or binds plain values when g is
  // null) and remembers node ids so backward results can be routed back.
  BoundParams<T> bind(Graph<T>* g) {
    BoundParams<T> bp;
    bound_nodes_.clear();
    for (std::size_t i = 0; i < infos_.size(); ++i) {
      Tensor<T> v(infos_[i].shape, values_[i]);
      if (g != nullptr) {
        Tensor<T> leaf = g->leaf(v, true);
        bound_nodes_.push_back(leaf.node());
        bp.leaves.emplace(infos_[i].name, std::move(leaf));
      } else {
        bound_nodes_.push_back(-1);
        bp.leaves.emplace(infos_[i].name, std::move(v));
      }
    }
    return bp;
  }

  // Adds dLoss/dParam from a backward() result into the grad slots.
  void accumulate_grads(const std::unordered_map<int, Tensor<T>>& grad_map) {
    for (std::size_t i = 0; i < bound_nodes_.size(); ++i) {
      if (bound_nodes_[i] < 0) continue;
      auto it = grad_map.find(bound_nodes_[i]);
      if (it == grad_map.end()) continue;
      const auto& src = it->second.values();
      auto& dst = grads_[i];
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  }

  std::vector<std::vector<T>> snapshot() const { return values_; }
  void restore(const std::vector<std::vector<T>>& snap) {
    if (snap.size() != values_.size())
      throw_internal("registry restore: parameter count changed");
    values_ = snap;
  }

 private:
  std::vector<ParamInfo> infos_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::vector<T>> values_;
  std::vector<std::vector<T>> grads_;
  std::vector<int> bound_nodes_;

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw_usage("unknown parameter " + name);
    return it->second;
  }
};

// x[...,in] * W[in,out] + b[out], applied over the last axis. Composed
// from the primitive set so it is differentiable w.r.t. all three.
template <typename T>
Tensor<T> dense_forward(const Tensor<T>& x, const Tensor<T>& weight,
                        const Tensor<T>& bias) {
  const Shape& sx = x.shape();
  const Shape& sw = weight.shape();
  if (sw.size() != 2 || sx.empty() || sx.back() != sw[0])
    throw_usage("dense: input " + shape_str(sx) + " does not match weight " +
                shape_str(sw));
  if (bias.shape() != Shape{sw[1]})
    throw_usage("dense: bias " + shape_str(bias.shape()) +
                " does not match weight " + shape_str(sw));
  std::size_t in_dim = sw[0], out_dim = sw[1];
  std::size_t rows = x.size() / in_dim;

  auto flat = reshape(x, Shape{1, rows, in_dim});
  auto w3 = stack_batch(weight, 1);
  auto y = reshape(batched_matmul(flat, w3), Shape{rows, out_dim});
  auto out = add(y, stack_batch(bias, rows));

  Shape so(sx);
  so.back() = out_dim;
  return reshape(out, so);
}

// Embedding lookup with bounds checking; `what` names the column in
// error messages.
template <typename T>
Tensor<T> embedding_forward(const Tensor<T>& table,
                            const std::vector<std::size_t>& idx,
                            const std::string& what = "embedding") {
  const Shape& s = table.shape();
  if (s.size() != 2) throw_usage("embedding table must be rank 2");
  for (std::size_t r : idx)
    if (r >= s[0])
      throw_data(what + ": index " + std::to_string(r) +
                 " out of range (cardinality " + std::to_string(s[0]) + ")");
  return gather_rows(table, idx);
}

}  // namespace trompt
