#include "stgnpp/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace stgnpp {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size()))
    throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
}

Tensor Tensor::full(Shape s, double v) {
  Tensor t(std::move(s));
  std::fill(t.data.begin(), t.data.end(), v);
  return t;
}

Tensor Tensor::scalar(double v) {
  Tensor t(Shape{1});
  t.data[0] = v;
  return t;
}

int64_t Tensor::dim(int i) const {
  int n = ndim();
  if (i < 0) i += n;
  if (i < 0 || i >= n) throw std::out_of_range("dim index " + std::to_string(i));
  return shape[static_cast<size_t>(i)];
}

bool Tensor::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data) m = std::max(m, std::fabs(v));
  return m;
}

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  size_t n = std::max(a.size(), b.size());
  Shape out(n, 1);
  for (size_t i = 0; i < n; ++i) {
    int64_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
    int64_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
    if (da != db && da != 1 && db != 1)
      throw std::invalid_argument("cannot broadcast shapes " + shape_str(a) + " and " +
                                  shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

Tensor reduce_to_shape(const Tensor& g, const Shape& target) {
  if (g.shape == target) return g;
  Tensor out(target);
  size_t gn = g.shape.size(), tn = target.size();
  // strides of the target, treated as right-aligned against g's shape
  std::vector<int64_t> tstride(gn, 0);
  {
    int64_t acc = 1;
    for (size_t i = tn; i-- > 0;) {
      size_t gi = i + (gn - tn);
      tstride[gi] = (target[i] == 1) ? 0 : acc;
      acc *= target[i];
    }
  }
  std::vector<int64_t> idx(gn, 0);
  const int64_t n = g.numel();
  for (int64_t flat = 0; flat < n; ++flat) {
    int64_t toff = 0;
    for (size_t i = 0; i < gn; ++i) toff += idx[i] * tstride[i];
    out.data[static_cast<size_t>(toff)] += g.data[static_cast<size_t>(flat)];
    for (size_t i = gn; i-- > 0;) {
      if (++idx[i] < g.shape[i]) break;
      idx[i] = 0;
    }
  }
  return out;
}

namespace {

// C += A*B, all row-major dense blocks.
void gemm_nn(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N) {
  for (int64_t i = 0; i < M; ++i) {
    const double* a = A + i * K;
    double* c = C + i * N;
    for (int64_t k = 0; k < K; ++k) {
      const double av = a[k];
      const double* b = B + k * N;
      for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C += A*B^T where B is stored [N,K].
void gemm_nt(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N) {
  for (int64_t i = 0; i < M; ++i) {
    const double* a = A + i * K;
    double* c = C + i * N;
    for (int64_t j = 0; j < N; ++j) {
      const double* b = B + j * K;
      double acc = 0.0;
      for (int64_t k = 0; k < K; ++k) acc += a[k] * b[k];
      c[j] += acc;
    }
  }
}

// C += A^T*B where A is stored [K,M].
void gemm_tn(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N) {
  for (int64_t k = 0; k < K; ++k) {
    const double* a = A + k * M;
    const double* b = B + k * N;
    for (int64_t i = 0; i < M; ++i) {
      const double av = a[i];
      double* c = C + i * N;
      for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C += A^T*B^T where A is stored [K,M] and B is stored [N,K].
void gemm_tt(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N) {
  for (int64_t i = 0; i < M; ++i) {
    double* c = C + i * N;
    for (int64_t j = 0; j < N; ++j) {
      const double* b = B + j * K;
      double acc = 0.0;
      for (int64_t k = 0; k < K; ++k) acc += A[k * M + i] * b[k];
      c[j] += acc;
    }
  }
}

}  // namespace

Tensor matmul_raw(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  if (a.ndim() < 2 || b.ndim() < 2)
    throw std::invalid_argument("matmul needs rank >= 2, got " + shape_str(a.shape) + " x " +
                                shape_str(b.shape));
  const int64_t ar = a.dim(-2), ac = a.dim(-1);
  const int64_t br = b.dim(-2), bc = b.dim(-1);
  const int64_t M = ta ? ac : ar, Ka = ta ? ar : ac;
  const int64_t Kb = tb ? bc : br, N = tb ? br : bc;
  if (Ka != Kb)
    throw std::invalid_argument("matmul inner dimensions disagree: " + shape_str(a.shape) +
                                (ta ? "^T" : "") + " x " + shape_str(b.shape) + (tb ? "^T" : ""));

  Shape abatch(a.shape.begin(), a.shape.end() - 2);
  Shape bbatch(b.shape.begin(), b.shape.end() - 2);
  Shape obatch = broadcast_shapes(abatch, bbatch);
  Shape oshape = obatch;
  oshape.push_back(M);
  oshape.push_back(N);
  Tensor out(oshape);

  const int64_t nbatch = shape_numel(obatch);
  const int64_t amat = ar * ac, bmat = br * bc, omat = M * N;
  const size_t nb = obatch.size();
  // per-dim strides into a/b batch space, 0 where broadcast
  std::vector<int64_t> astride(nb, 0), bstride(nb, 0);
  {
    int64_t acc = 1;
    for (size_t i = abatch.size(); i-- > 0;) {
      size_t oi = i + (nb - abatch.size());
      astride[oi] = (abatch[i] == 1 && obatch[oi] != 1) ? 0 : acc;
      acc *= abatch[i];
    }
    acc = 1;
    for (size_t i = bbatch.size(); i-- > 0;) {
      size_t oi = i + (nb - bbatch.size());
      bstride[oi] = (bbatch[i] == 1 && obatch[oi] != 1) ? 0 : acc;
      acc *= bbatch[i];
    }
  }

  std::vector<int64_t> idx(nb, 0);
  for (int64_t batch = 0; batch < nbatch; ++batch) {
    int64_t aoff = 0, boff = 0;
    for (size_t i = 0; i < nb; ++i) {
      aoff += idx[i] * astride[i];
      boff += idx[i] * bstride[i];
    }
    const double* A = a.data.data() + aoff * amat;
    const double* B = b.data.data() + boff * bmat;
    double* C = out.data.data() + batch * omat;
    if (!ta && !tb)
      gemm_nn(A, B, C, M, Ka, N);
    else if (!ta && tb)
      gemm_nt(A, B, C, M, Ka, N);
    else if (ta && !tb)
      gemm_tn(A, B, C, M, Ka, N);
    else
      gemm_tt(A, B, C, M, Ka, N);
    for (size_t i = nb; i-- > 0;) {
      if (++idx[i] < obatch[i]) break;
      idx[i] = 0;
    }
  }
  return out;
}

Tensor randn(Shape s, Rng& rng, double sd) {
  Tensor t(std::move(s));
  for (double& v : t.data) v = rng.normal(0.0, sd);
  return t;
}

Tensor rand_uniform(Shape s, Rng& rng, double lo, double hi) {
  Tensor t(std::move(s));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

Tensor glorot(Shape s, Rng& rng) {
  if (s.size() < 2) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), 0.0);
    return t;
  }
  double fan_in = static_cast<double>(s[s.size() - 2]);
  double fan_out = static_cast<double>(s[s.size() - 1]);
  double bound = std::sqrt(6.0 / (fan_in + fan_out));
  return rand_uniform(std::move(s), rng, -bound, bound);
}

}  // namespace stgnpp
