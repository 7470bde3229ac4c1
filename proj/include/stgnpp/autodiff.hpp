#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "stgnpp/tensor.hpp"

namespace stgnpp {

// Named learnable array plus its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
    grad = Tensor::zeros(value.shape);
  }
  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }
};

class Tape;

// Lightweight handle for a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int32_t id = -1;

  const Tensor& val() const;
  const Shape& shape() const { return val().shape; }
  bool valid() const { return tape != nullptr; }
};

// Recorded forward computation. Values are computed eagerly; backward()
// replays the tape in reverse, pushing gradients to parents, then
// accumulates leaf gradients into the bound Parameters.
class Tape {
 public:
  using BackFn = std::function<void(Tape&, int32_t self)>;

  Var constant(Tensor v) { return push(std::move(v), {}, nullptr, false); }
  Var param(Parameter& p);

  Var push(Tensor value, std::vector<int32_t> parents, BackFn fn, bool needs_grad);

  const Tensor& val(int32_t id) const { return nodes_[static_cast<size_t>(id)].value; }
  bool needs_grad(int32_t id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }
  Tensor& grad(int32_t id);           // lazily zero-initialized
  bool has_grad(int32_t id) const { return !nodes_[static_cast<size_t>(id)].grad.data.empty(); }
  const std::vector<int32_t>& parents(int32_t id) const {
    return nodes_[static_cast<size_t>(id)].parents;
  }

  // root must be scalar; seeds d(root)=1 and accumulates into Parameter::grad.
  void backward(Var root);

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<int32_t> parents;
    BackFn backward;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
  std::vector<std::pair<int32_t, Parameter*>> param_leaves_;
};

// ---- operation set (closed; everything else is composed from these) ----

Var matmul(Var a, Var b, bool ta = false, bool tb = false);
Var add(Var a, Var b);   // broadcast
Var sub(Var a, Var b);   // broadcast
Var mul(Var a, Var b);   // broadcast elementwise
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var neg(Var a);

enum class Activation { Sigmoid, Tanh, Relu, Softplus };
Var activation(Var a, Activation kind);
Var sigmoid(Var a);
Var vtanh(Var a);
Var relu(Var a);
Var softplus(Var a);
Var vlog(Var a);
Var rsqrt(Var a);
Var vabs(Var a);
Var clamp_min(Var a, double floor);

Var softmax_last(Var a);
Var sum_all(Var a);                    // -> [1]
Var mean_last(Var a, bool keepdim);
Var concat_last(Var a, Var b);
Var reshape(Var a, Shape s);
Var permute(Var a, std::vector<int> axes);
Var index_rows(Var table, std::vector<int64_t> idx);  // gather on dim 0
Var slice_axis1(Var x, int64_t i);                    // [A,B,C] -> [A,C]
Var stack_axis1(const std::vector<Var>& parts);       // B x [A,C] -> [A,B,C]

// composed helpers
Var linear(Var x, Var w, Var b);                      // x*w + b
Var layer_norm_last(Var x, Var gain, Var bias, double eps = 1e-5);

// scalar math shared by tape ops and the no-grad fast paths
double sigmoid_s(double x);
double softplus_s(double x);

// ---- finite-difference gradient checker ----

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int64_t worst_index = -1;
  int64_t n_entries = 0;
  bool passed = false;
};

// eval(true) must zero nothing itself: the checker zeroes grads, then
// eval(true) runs forward+backward accumulating into Parameter::grad and
// returns the loss; eval(false) runs forward only. Central differences
// with the given step, relative error floored at 1e-2 denominators so
// near-zero gradients are compared absolutely.
GradCheckReport grad_check(const std::function<double(bool)>& eval,
                           const std::vector<Parameter*>& params, double tol,
                           double step = 1e-5);

}  // namespace stgnpp
