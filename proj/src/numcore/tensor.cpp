#include "numcore/tensor.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace dast::nc {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> d, bool rg)
    : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one axis");
  for (auto dim : shape) {
    if (dim == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_size(shape) != data.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) + " values");
  }
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::filled(Shape shape, double value, bool requires_grad) {
  auto n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
  return Tensor({rows, cols}, std::move(data));
}

Tensor Tensor::row(std::vector<double> data) {
  auto n = data.size();
  return Tensor({1, n}, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t = zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

std::size_t Tensor::rows() const {
  if (shape.size() == 1) return 1;
  if (shape.size() == 2) return shape[0];
  throw ShapeError("expected a matrix, got " + shape_str(shape));
}

std::size_t Tensor::cols() const {
  if (shape.size() == 1) return shape[0];
  if (shape.size() == 2) return shape[1];
  throw ShapeError("expected a matrix, got " + shape_str(shape));
}

void Tensor::check_finite(const std::string& context) const {
  for (double v : data) {
    if (!std::isfinite(v)) throw NumericError("non-finite value in " + context);
  }
}

double Rng::normal(double mean, double stddev) {
  std::normal_distribution<double> dist(mean, stddev);
  return dist(engine_);
}

double Rng::uniform(double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  return dist(engine_);
}

std::size_t Rng::index(std::size_t n) {
  std::uniform_int_distribution<std::size_t> dist(0, n - 1);
  return dist(engine_);
}

Tensor normal_tensor(Shape shape, double stddev, Rng& rng, bool requires_grad) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (auto& v : t.data) v = rng.normal(0.0, stddev);
  return t;
}

std::uint64_t checksum(const Tensor& t) {
  std::uint64_t h = 1469598103934665603ull;
  for (double v : t.data) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &v, sizeof(double));
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 1099511628211ull;
    }
  }
  for (auto d : t.shape) {
    h ^= d;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace dast::nc
