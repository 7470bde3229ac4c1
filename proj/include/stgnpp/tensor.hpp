#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace stgnpp {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major 64-bit float array. All model state and intermediates
// live in these; shapes are small (desk scale), so everything is owned
// and contiguous.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), 0.0) {}
  Tensor(Shape s, std::vector<double> d);

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, double v);
  static Tensor scalar(double v);
  static Tensor from(Shape s, std::vector<double> d) { return Tensor(std::move(s), std::move(d)); }

  int ndim() const { return static_cast<int>(shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int64_t dim(int i) const;  // negative i counts from the back

  double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }
  double& at(int64_t i, int64_t j) { return data[static_cast<size_t>(i * dim(1) + j)]; }
  double at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * dim(1) + j)]; }
  double& at(int64_t i, int64_t j, int64_t k) {
    return data[static_cast<size_t>((i * dim(1) + j) * dim(2) + k)];
  }
  double at(int64_t i, int64_t j, int64_t k) const {
    return data[static_cast<size_t>((i * dim(1) + j) * dim(2) + k)];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
  double max_abs() const;
};

// numpy-style broadcast of two shapes; throws std::invalid_argument
// naming both shapes when they are incompatible.
Shape broadcast_shapes(const Shape& a, const Shape& b);

// Sums g over broadcast dimensions so the result has shape `target`.
Tensor reduce_to_shape(const Tensor& g, const Shape& target);

// C = op(a) * op(b) over the last two dims; leading dims broadcast.
// ta/tb transpose the stored last-two-dims layout.
Tensor matmul_raw(const Tensor& a, const Tensor& b, bool ta = false, bool tb = false);

// Deterministic RNG wrapper; every randomized artifact takes one of these
// seeded explicitly so runs are reproducible bit-for-bit.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}
  double uniform(double a, double b) { return std::uniform_real_distribution<double>(a, b)(eng_); }
  double normal(double mean, double sd) { return std::normal_distribution<double>(mean, sd)(eng_); }
  double exponential(double rate) { return std::exponential_distribution<double>(rate)(eng_); }
  int64_t randint(int64_t lo, int64_t hi) {  // inclusive range
    return std::uniform_int_distribution<int64_t>(lo, hi)(eng_);
  }
  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

Tensor randn(Shape s, Rng& rng, double sd = 1.0);
Tensor rand_uniform(Shape s, Rng& rng, double lo, double hi);
// Glorot-style uniform init keyed on fan-in/fan-out of the last two dims.
Tensor glorot(Shape s, Rng& rng);

}  // namespace stgnpp
