#include "stgnpp/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace stgnpp {

const Tensor& Var::val() const { return tape->val(id); }

Var Tape::param(Parameter& p) {
  Var v = push(p.value, {}, nullptr, true);
  param_leaves_.emplace_back(v.id, &p);
  return v;
}

Var Tape::push(Tensor value, std::vector<int32_t> parents, BackFn fn, bool needs_grad) {
  Node n;
  n.value = std::move(value);
  n.parents = std::move(parents);
  n.backward = std::move(fn);
  n.needs_grad = needs_grad;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int32_t>(nodes_.size() - 1)};
}

Tensor& Tape::grad(int32_t id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
  return n.grad;
}

void Tape::backward(Var root) {
  if (root.tape != this) throw std::logic_error("backward: var belongs to another tape");
  if (val(root.id).numel() != 1) throw std::logic_error("backward: root must be scalar");
  grad(root.id).data[0] = 1.0;
  for (int32_t id = root.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.needs_grad || n.grad.data.empty() || !n.backward) continue;
    n.backward(*this, id);
  }
  for (auto& [id, p] : param_leaves_) {
    if (!has_grad(id)) continue;
    const Tensor& src = grad(id);
    for (int64_t i = 0; i < src.numel(); ++i) p->grad.data[static_cast<size_t>(i)] += src.data[static_cast<size_t>(i)];
  }
}

namespace {

bool any_needs(std::initializer_list<Var> vs) {
  for (Var v : vs)
    if (v.tape->needs_grad(v.id)) return true;
  return false;
}

void accumulate(Tensor& dst, const Tensor& src) {
  for (int64_t i = 0; i < dst.numel(); ++i) dst.data[static_cast<size_t>(i)] += src.data[static_cast<size_t>(i)];
}

// Generic broadcast binary map with fast paths for the shapes the model
// actually produces (same shape, scalar, right-aligned suffix, last-dim-1).
template <class F>
Tensor broadcast_bin(const Tensor& a, const Tensor& b, F f) {
  if (a.shape == b.shape) {
    Tensor out(a.shape);
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data[static_cast<size_t>(i)] = f(a.data[static_cast<size_t>(i)], b.data[static_cast<size_t>(i)]);
    return out;
  }
  if (b.numel() == 1) {
    Tensor out(a.shape);
    const double bv = b.data[0];
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data[static_cast<size_t>(i)] = f(a.data[static_cast<size_t>(i)], bv);
    return out;
  }
  if (a.numel() == 1) {
    Tensor out(b.shape);
    const double av = a.data[0];
    const int64_t n = b.numel();
    for (int64_t i = 0; i < n; ++i) out.data[static_cast<size_t>(i)] = f(av, b.data[static_cast<size_t>(i)]);
    return out;
  }
  // b is a right-aligned suffix of a's shape
  if (b.ndim() <= a.ndim() &&
      std::equal(b.shape.begin(), b.shape.end(), a.shape.end() - b.ndim())) {
    Tensor out(a.shape);
    const int64_t bn = b.numel(), n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data[static_cast<size_t>(i)] = f(a.data[static_cast<size_t>(i)], b.data[static_cast<size_t>(i % bn)]);
    return out;
  }
  // identical except b's last dim is 1 (per-row scalar)
  if (a.ndim() == b.ndim() && b.dim(-1) == 1 &&
      std::equal(a.shape.begin(), a.shape.end() - 1, b.shape.begin())) {
    Tensor out(a.shape);
    const int64_t d = a.dim(-1), rows = a.numel() / d;
    for (int64_t r = 0; r < rows; ++r) {
      const double bv = b.data[static_cast<size_t>(r)];
      const double* ap = a.data.data() + r * d;
      double* op = out.data.data() + r * d;
      for (int64_t j = 0; j < d; ++j) op[j] = f(ap[j], bv);
    }
    return out;
  }
  // general strided fallback
  Shape os = broadcast_shapes(a.shape, b.shape);
  Tensor out(os);
  const size_t nd = os.size();
  std::vector<int64_t> as(nd, 0), bs(nd, 0);
  int64_t acc = 1;
  for (size_t i = a.shape.size(); i-- > 0;) {
    size_t oi = i + (nd - a.shape.size());
    as[oi] = (a.shape[i] == 1 && os[oi] != 1) ? 0 : acc;
    acc *= a.shape[i];
  }
  acc = 1;
  for (size_t i = b.shape.size(); i-- > 0;) {
    size_t oi = i + (nd - b.shape.size());
    bs[oi] = (b.shape[i] == 1 && os[oi] != 1) ? 0 : acc;
    acc *= b.shape[i];
  }
  std::vector<int64_t> idx(nd, 0);
  const int64_t n = out.numel();
  for (int64_t flat = 0; flat < n; ++flat) {
    int64_t ao = 0, bo = 0;
    for (size_t i = 0; i < nd; ++i) {
      ao += idx[i] * as[i];
      bo += idx[i] * bs[i];
    }
    out.data[static_cast<size_t>(flat)] = f(a.data[static_cast<size_t>(ao)], b.data[static_cast<size_t>(bo)]);
    for (size_t i = nd; i-- > 0;) {
      if (++idx[i] < os[i]) break;
      idx[i] = 0;
    }
  }
  return out;
}

Var binary_op(Var a, Var b, double (*fwd)(double, double), int which) {
  Tape& t = *a.tape;
  Tensor out = broadcast_bin(a.val(), b.val(), fwd);
  bool ng = any_needs({a, b});
  int32_t ai = a.id, bi = b.id;
  Tape::BackFn fn = nullptr;
  if (ng) {
    switch (which) {
      case 0:  // add
        fn = [ai, bi](Tape& t, int32_t self) {
          const Tensor& g = t.grad(self);
          if (t.needs_grad(ai)) accumulate(t.grad(ai), reduce_to_shape(g, t.val(ai).shape));
          if (t.needs_grad(bi)) accumulate(t.grad(bi), reduce_to_shape(g, t.val(bi).shape));
        };
        break;
      case 1:  // sub
        fn = [ai, bi](Tape& t, int32_t self) {
          const Tensor& g = t.grad(self);
          if (t.needs_grad(ai)) accumulate(t.grad(ai), reduce_to_shape(g, t.val(ai).shape));
          if (t.needs_grad(bi)) {
            Tensor r = reduce_to_shape(g, t.val(bi).shape);
            Tensor& dst = t.grad(bi);
            for (int64_t i = 0; i < dst.numel(); ++i) dst.data[static_cast<size_t>(i)] -= r.data[static_cast<size_t>(i)];
          }
        };
        break;
      case 2:  // mul
        fn = [ai, bi](Tape& t, int32_t self) {
          const Tensor& g = t.grad(self);
          if (t.needs_grad(ai)) {
            Tensor ga = broadcast_bin(g, t.val(bi), [](double x, double y) { return x * y; });
            accumulate(t.grad(ai), reduce_to_shape(ga, t.val(ai).shape));
          }
          if (t.needs_grad(bi)) {
            Tensor gb = broadcast_bin(g, t.val(ai), [](double x, double y) { return x * y; });
            accumulate(t.grad(bi), reduce_to_shape(gb, t.val(bi).shape));
          }
        };
        break;
    }
  }
  return t.push(std::move(out), {ai, bi}, std::move(fn), ng);
}

}  // namespace

Var matmul(Var a, Var b, bool ta, bool tb) {
  Tape& t = *a.tape;
  Tensor out = matmul_raw(a.val(), b.val(), ta, tb);
  bool ng = any_needs({a, b});
  int32_t ai = a.id, bi = b.id;
  Tape::BackFn fn = nullptr;
  if (ng) {
    fn = [ai, bi, ta, tb](Tape& t, int32_t self) {
      const Tensor& g = t.grad(self);
      const Tensor& A = t.val(ai);
      const Tensor& B = t.val(bi);
      if (t.needs_grad(ai)) {
        Tensor da;
        if (!ta && !tb)
          da = matmul_raw(g, B, false, true);
        else if (!ta && tb)
          da = matmul_raw(g, B, false, false);
        else if (ta && !tb)
          da = matmul_raw(B, g, false, true);
        else
          da = matmul_raw(B, g, true, true);
        accumulate(t.grad(ai), reduce_to_shape(da, A.shape));
      }
      if (t.needs_grad(bi)) {
        Tensor db;
        if (!ta && !tb)
          db = matmul_raw(A, g, true, false);
        else if (!ta && tb)
          db = matmul_raw(g, A, true, false);
        else if (ta && !tb)
          db = matmul_raw(A, g, false, false);
        else
          db = matmul_raw(g, A, true, true);
        accumulate(t.grad(bi), reduce_to_shape(db, B.shape));
      }
    };
  }
  return t.push(std::move(out), {ai, bi}, std::move(fn), ng);
}

Var add(Var a, Var b) { return binary_op(a, b, [](double x, double y) { return x + y; }, 0); }
Var sub(Var a, Var b) { return binary_op(a, b, [](double x, double y) { return x - y; }, 1); }
Var mul(Var a, Var b) { return binary_op(a, b, [](double x, double y) { return x * y; }, 2); }

Var scale(Var a, double s) {
  Tape& t = *a.tape;
  Tensor out = a.val();
  for (double& v : out.data) v *= s;
  bool ng = t.needs_grad(a.id);
  int32_t ai = a.id;
  Tape::BackFn fn = nullptr;
  if (ng)
    fn = [ai, s](Tape& t, int32_t self) {
      const Tensor& g = t.grad(self);
      Tensor& dst = t.grad(ai);
      for (int64_t i = 0; i < dst.numel(); ++i) dst.data[static_cast<size_t>(i)] += s * g.data[static_cast<size_t>(i)];
    };
  return t.push(std::move(out), {ai}, std::move(fn), ng);
}

Var add_scalar(Var a, double s) {
  Tape& t = *a.tape;
  Tensor out = a.val();
  for (double& v : out.data) v += s;
  bool ng = t.needs_grad(a.id);
  int32_t ai = a.id;
  Tape::BackFn fn = nullptr;
  if (ng)
    fn = [ai](Tape& t, int32_t self) { accumulate(t.grad(ai), t.grad(self)); };
  return t.push(std::move(out), {ai}, std::move(fn), ng);
}

Var neg(Var a) { return scale(a, -1.0); }

double sigmoid_s(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }
double softplus_s(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

namespace {

// dy/dx expressed from input x and output y so each kind stays one lambda.
Var unary_op(Var a, double (*fwd)(double), double (*dfn)(double x, double y)) {
  Tape& t = *a.tape;
  Tensor out(a.val().shape);
  const Tensor& x = a.val();
  for (int64_t i = 0; i < x.numel(); ++i) out.data[static_cast<size_t>(i)] = fwd(x.data[static_cast<size_t>(i)]);
  bool ng = t.needs_grad(a.id);
  int32_t ai = a.id;
  Tape::BackFn fn = nullptr;
  if (ng)
    fn = [ai, dfn](Tape& t, int32_t self) {
      const Tensor& g = t.grad(self);
      const Tensor& x = t.val(ai);
      const Tensor& y = t.val(self);
      Tensor& dst = t.grad(ai);
      for (int64_t i = 0; i < dst.numel(); ++i)
        dst.data[static_cast<size_t>(i)] += g.data[static_cast<size_t>(i)] * dfn(x.data[static_cast<size_t>(i)], y.data[static_cast<size_t>(i)]);
    };
  return t.push(std::move(out), {ai}, std::move(fn), ng);
}

}  // namespace

Var sigmoid(Var a) {
  return unary_op(a, [](double x) { return sigmoid_s(x); },
                  [](double, double y) { return y * (1.0 - y); });
}
Var vtanh(Var a) {
  return unary_op(a, [](double x) { return std::tanh(x); },
                  [](double, double y) { return 1.0 - y * y; });
}
Var relu(Var a) {
  return unary_op(a, [](double x) { return x > 0 ? x : 0.0; },
                  [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}
Var softplus(Var a) {
  return unary_op(a, [](double x) { return softplus_s(x); },
                  [](double x, double) { return sigmoid_s(x); });
}
Var vlog(Var a) {
  return unary_op(a, [](double x) { return std::log(x); },
                  [](double x, double) { return 1.0 / x; });
}
Var rsqrt(Var a) {
  return unary_op(a, [](double x) { return 1.0 / std::sqrt(x); },
                  [](double, double y) { return -0.5 * y * y * y; });
}
Var vabs(Var a) {
  return unary_op(a, [](double x) { return std::fabs(x); },
                  [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var clamp_min(Var a, double floor) {
  Tape& t = *a.tape;
  Tensor out(a.val().shape);
  const Tensor& x = a.val();
  for (int64_t i = 0; i < x.numel(); ++i) out.data[static_cast<size_t>(i)] = std::max(x.data[static_cast<size_t>(i)], floor);
  bool ng = t.needs_grad(a.id);
  int32_t ai = a.id;
  Tape::BackFn fn = nullptr;
  if (ng)
    fn = [ai, floor](Tape& t, int32_t self) {
      const Tensor& g = t.grad(self);
      const Tensor& x = t.val(ai);
      Tensor& dst = t.grad(ai);
      for (int64_t i = 0; i < dst.numel(); ++i)
        if (x.data[static_cast<size_t>(i)] > floor) dst.data[static_cast<size_t>(i)] += g.data[static_cast<size_t>(i)];
    };
  return t.push(std::move(out), {ai}, std::move(fn), ng);
}

Var activation(Var a, Activation kind) {
  switch (kind) {
    case Activation::Sigmoid: return sigmoid(a);
    case Activation::Tanh: return vtanh(a);
    case Activation::Relu: return relu(a);
    case Activation::Softplus: return softplus(a);
  }
  throw std::logic_error("unknown activation");
}

Var softmax_last(Var a) {
  Tape& t = *a.tape;
  const Tensor& x = a.val();
  if (x.ndim() < 1 || x.dim(-1) < 1)
    throw std::invalid_argument("softmax_last needs a non-empty last dimension, got " +
                                shape_str(x.shape));
  Tensor out(x.shape);
  const int64_t d = x.dim(-1), rows = x.numel() / d;
  for (int64_t r = 0; r < rows; ++r) {
    const double* xp = x.data.data() + r * d;
    double* op = out.data.data() + r * d;
    double m = xp[0];
    for (int64_t j = 1; j < d; ++j) m = std::max(m, xp[j]);
    double s = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      op[j] = std::exp(xp[j] - m);
      s += op[j];
    }
    const double inv = 1.0 / s;
    for (int64_t j = 0; j < d; ++j) op[j] *= inv;
  }
  bool ng = t.needs_grad(a.id);
  int32_t ai = a.id;
  Tape::BackFn fn = nullptr;
  if (ng)
    fn = [ai, d](Tape& t, int32_t self) {
      const Tensor& g = t.grad(self);
      const Tensor& y = t.val(self);
      Tensor& dst = t.grad(ai);
      const int64_t rows = y.numel() / d;
      for (int64_t r = 0; r < rows; ++r) {
        const double* gp = g.data.data() + r * d;
        const double* yp = y.data.data() + r * d;
        double* dp = dst.data.data() + r * d;
        double dot = 0.0;
        for (int64_t j = 0; j < d; ++j) dot += gp[j] * yp[j];
        for (int64_t j = 0; j < d; ++j) dp[j] += yp[j] * (gp[j] - dot);
      }
    };
  return t.push(std::move(out), {ai}, std::move(fn), ng);
}

Var sum_all(Var a) {
  Tape& t = *a.tape;
  double s = 0.0;
  for (double v : a.val().data) s += v;
  bool ng = t.needs_grad(a.id);
  int32_t ai = a.id;
  Tape::BackFn fn = nullptr;
  if (ng)
    fn = [ai](Tape& t, int32_t self) {
      const double g = t.grad(self).data[0];
      Tensor& dst = t.grad(ai);
      for (double& v : dst.data) v += g;
    };
  return t.push(Tensor::scalar(s), {ai}, std::move(fn), ng);
}

Var mean_last(Var a, bool keepdim) {
  Tape& t = *a.tape;
  const Tensor& x = a.val();
  const int64_t d = x.dim(-1), rows = x.numel() / d;
  Shape os(x.shape.begin(), x.shape.end() - 1);
  if (keepdim) os.push_back(1);
  if (os.empty()) os.push_back(1);
  Tensor out(os);
  for (int64_t r = 0; r < rows; ++r) {
    double s = 0.0;
    const double* xp = x.data.data() + r * d;
    for (int64_t j = 0; j < d; ++j) s += xp[j];
    out.data[static_cast<size_t>(r)] = s / static_cast<double>(d);
  }
  bool ng = t.needs_grad(a.id);
  int32_t ai = a.id;
  Tape::BackFn fn = nullptr;
  if (ng)
    fn = [ai, d](Tape& t, int32_t self) {
      const Tensor& g = t.grad(self);
      Tensor& dst = t.grad(ai);
      const int64_t rows = dst.numel() / d;
      const double inv = 1.0 / static_cast<double>(d);
      for (int64_t r = 0; r < rows; ++r) {
        const double gv = g.data[static_cast<size_t>(r)] * inv;
        double* dp = dst.data.data() + r * d;
        for (int64_t j = 0; j < d; ++j) dp[j] += gv;
      }
    };
  return t.push(std::move(out), {ai}, std::move(fn), ng);
}

Var concat_last(Var a, Var b) {
  Tape& t = *a.tape;
  const Tensor& x = a.val();
  const Tensor& y = b.val();
  if (x.ndim() != y.ndim() ||
      !std::equal(x.shape.begin(), x.shape.end() - 1, y.shape.begin()))
    throw std::invalid_argument("concat_last shape mismatch: " + shape_str(x.shape) + " vs " +
                                shape_str(y.shape));
  const int64_t dx = x.dim(-1), dy = y.dim(-1), rows = x.numel() / dx;
  Shape os(x.shape);
  os.back() = dx + dy;
  Tensor out(os);
  for (int64_t r = 0; r < rows; ++r) {
    std::copy_n(x.data.data() + r * dx, dx, out.data.data() + r * (dx + dy));
    std::copy_n(y.data.data() + r * dy, dy, out.data.data() + r * (dx + dy) + dx);
  }
  bool ng = any_needs({a, b});
  int32_t ai = a.id, bi = b.id;
  Tape::BackFn fn = nullptr;
  if (ng)
    fn = [ai, bi, dx, dy](Tape& t, int32_t self) {
      const Tensor& g = t.grad(self);
      const int64_t rows = g.numel() / (dx + dy);
      if (t.needs_grad(ai)) {
        Tensor& da = t.grad(ai);
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < dx; ++j) da.data[static_cast<size_t>(r * dx + j)] += g.data[static_cast<size_t>(r * (dx + dy) + j)];
      }
      if (t.needs_grad(bi)) {
        Tensor& db = t.grad(bi);
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < dy; ++j) db.data[static_cast<size_t>(r * dy + j)] += g.data[static_cast<size_t>(r * (dx + dy) + dx + j)];
      }
    };
  return t.push(std::move(out), {ai, bi}, std::move(fn), ng);
}

Var reshape(Var a, Shape s) {
  Tape& t = *a.tape;
  if (shape_numel(s) != a.val().numel())
    throw std::invalid_argument("reshape " + shape_str(a.val().shape) + " -> " + shape_str(s) +
                                " changes element count");
  Tensor out = a.val();
  out.shape = s;
  bool ng = t.needs_grad(a.id);
  int32_t ai = a.id;
  Tape::BackFn fn = nullptr;
  if (ng)
    fn = [ai](Tape& t, int32_t self) { accumulate(t.grad(ai), t.grad(self)); };
  return t.push(std::move(out), {ai}, std::move(fn), ng);
}

namespace {

Tensor permute_raw(const Tensor& x, const std::vector<int>& axes) {
  const size_t nd = x.shape.size();
  Shape os(nd);
  for (size_t i = 0; i < nd; ++i) os[i] = x.shape[static_cast<size_t>(axes[i])];
  std::vector<int64_t> xstride(nd, 1);
  for (size_t i = nd - 1; i-- > 0;) xstride[i] = xstride[i + 1] * x.shape[i + 1];
  std::vector<int64_t> ostride_in_x(nd);
  for (size_t i = 0; i < nd; ++i) ostride_in_x[i] = xstride[static_cast<size_t>(axes[i])];
  Tensor out(os);
  std::vector<int64_t> idx(nd, 0);
  const int64_t n = out.numel();
  for (int64_t flat = 0; flat < n; ++flat) {
    int64_t xo = 0;
    for (size_t i = 0; i < nd; ++i) xo += idx[i] * ostride_in_x[i];
    out.data[static_cast<size_t>(flat)] = x.data[static_cast<size_t>(xo)];
    for (size_t i = nd; i-- > 0;) {
      if (++idx[i] < os[i]) break;
      idx[i] = 0;
    }
  }
  return out;
}

}  // namespace

Var permute(Var a, std::vector<int> axes) {
  Tape& t = *a.tape;
  if (axes.size() != a.val().shape.size())
    throw std::invalid_argument("permute axes rank mismatch for " + shape_str(a.val().shape));
  Tensor out = permute_raw(a.val(), axes);
  bool ng = t.needs_grad(a.id);
  int32_t ai = a.id;
  Tape::BackFn fn = nullptr;
  if (ng) {
    std::vector<int> inv(axes.size());
    for (size_t i = 0; i < axes.size(); ++i) inv[static_cast<size_t>(axes[i])] = static_cast<int>(i);
    fn = [ai, inv](Tape& t, int32_t self) {
      accumulate(t.grad(ai), permute_raw(t.grad(self), inv));
    };
  }
  return t.push(std::move(out), {ai}, std::move(fn), ng);
}

Var index_rows(Var table, std::vector<int64_t> idx) {
  Tape& t = *table.tape;
  const Tensor& x = table.val();
  const int64_t rows = x.dim(0), rowlen = x.numel() / rows;
  for (int64_t i : idx)
    if (i < 0 || i >= rows)
      throw std::out_of_range("index_rows: index " + std::to_string(i) + " out of [0," +
                              std::to_string(rows) + ")");
  Shape os(x.shape);
  os[0] = static_cast<int64_t>(idx.size());
  Tensor out(os);
  for (size_t r = 0; r < idx.size(); ++r)
    std::copy_n(x.data.data() + idx[r] * rowlen, rowlen, out.data.data() + static_cast<int64_t>(r) * rowlen);
  bool ng = t.needs_grad(table.id);
  int32_t ai = table.id;
  Tape::BackFn fn = nullptr;
  if (ng)
    fn = [ai, idx, rowlen](Tape& t, int32_t self) {
      const Tensor& g = t.grad(self);
      Tensor& dst = t.grad(ai);
      for (size_t r = 0; r < idx.size(); ++r)
        for (int64_t j = 0; j < rowlen; ++j)
          dst.data[static_cast<size_t>(idx[r] * rowlen + j)] += g.data[static_cast<size_t>(static_cast<int64_t>(r) * rowlen + j)];
    };
  return t.push(std::move(out), {ai}, std::move(fn), ng);
}

Var slice_axis1(Var x, int64_t i) {
  Tape& t = *x.tape;
  const Tensor& v = x.val();
  if (v.ndim() != 3) throw std::invalid_argument("slice_axis1 expects rank 3, got " + shape_str(v.shape));
  const int64_t A = v.dim(0), B = v.dim(1), C = v.dim(2);
  if (i < 0 || i >= B) throw std::out_of_range("slice_axis1 index out of range");
  Tensor out(Shape{A, C});
  for (int64_t a = 0; a < A; ++a)
    std::copy_n(v.data.data() + (a * B + i) * C, C, out.data.data() + a * C);
  bool ng = t.needs_grad(x.id);
  int32_t ai = x.id;
  Tape::BackFn fn = nullptr;
  if (ng)
    fn = [ai, i, B, C](Tape& t, int32_t self) {
      const Tensor& g = t.grad(self);
      Tensor& dst = t.grad(ai);
      const int64_t A = g.dim(0);
      for (int64_t a = 0; a < A; ++a)
        for (int64_t c = 0; c < C; ++c) dst.data[static_cast<size_t>((a * B + i) * C + c)] += g.data[static_cast<size_t>(a * C + c)];
    };
  return t.push(std::move(out), {ai}, std::move(fn), ng);
}

Var stack_axis1(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("stack_axis1: empty part list");
  Tape& t = *parts[0].tape;
  const int64_t A = parts[0].val().dim(0), C = parts[0].val().dim(1);
  const int64_t B = static_cast<int64_t>(parts.size());
  Tensor out(Shape{A, B, C});
  std::vector<int32_t> pids;
  bool ng = false;
  for (int64_t b = 0; b < B; ++b) {
    const Tensor& p = parts[static_cast<size_t>(b)].val();
    if (p.shape != Shape{A, C})
      throw std::invalid_argument("stack_axis1: inconsistent part shape " + shape_str(p.shape));
    for (int64_t a = 0; a < A; ++a)
      std::copy_n(p.data.data() + a * C, C, out.data.data() + (a * B + b) * C);
    pids.push_back(parts[static_cast<size_t>(b)].id);
    ng = ng || t.needs_grad(parts[static_cast<size_t>(b)].id);
  }
  Tape::BackFn fn = nullptr;
  if (ng)
    fn = [pids, B, C](Tape& t, int32_t self) {
      const Tensor& g = t.grad(self);
      const int64_t A = g.dim(0);
      for (int64_t b = 0; b < B; ++b) {
        if (!t.needs_grad(pids[static_cast<size_t>(b)])) continue;
        Tensor& dst = t.grad(pids[static_cast<size_t>(b)]);
        for (int64_t a = 0; a < A; ++a)
          for (int64_t c = 0; c < C; ++c) dst.data[static_cast<size_t>(a * C + c)] += g.data[static_cast<size_t>((a * B + b) * C + c)];
      }
    };
  return t.push(std::move(out), pids, std::move(fn), ng);
}

Var linear(Var x, Var w, Var b) { return add(matmul(x, w), b); }

Var layer_norm_last(Var x, Var gain, Var bias, double eps) {
  Var mu = mean_last(x, true);
  Var d = sub(x, mu);
  Var var = mean_last(mul(d, d), true);
  Var inv = rsqrt(add_scalar(var, eps));
  Var xhat = mul(d, inv);
  return add(mul(xhat, gain), bias);
}

GradCheckReport grad_check(const std::function<double(bool)>& eval,
                           const std::vector<Parameter*>& params, double tol, double step) {
  for (Parameter* p : params) p->zero_grad();
  const double f0 = eval(true);
  if (!std::isfinite(f0)) throw std::runtime_error("grad_check: non-finite objective");
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad);

  GradCheckReport rep;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    for (int64_t i = 0; i < p.value.numel(); ++i) {
      const double old = p.value.data[static_cast<size_t>(i)];
      p.value.data[static_cast<size_t>(i)] = old + step;
      const double fp = eval(false);
      p.value.data[static_cast<size_t>(i)] = old - step;
      const double fm = eval(false);
      p.value.data[static_cast<size_t>(i)] = old;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw std::runtime_error("grad_check: non-finite objective at perturbed " + p.name);
      const double gfd = (fp - fm) / (2.0 * step);
      const double ga = analytic[pi].data[static_cast<size_t>(i)];
      const double denom = std::max({std::fabs(ga), std::fabs(gfd), 1e-2});
      const double rel = std::fabs(ga - gfd) / denom;
      ++rep.n_entries;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = p.name;
        rep.worst_index = i;
      }
    }
  }
  rep.passed = rep.max_rel_err <= tol;
  return rep;
}

}  // namespace stgnpp
