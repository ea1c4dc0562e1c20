#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace dast::nc {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised when an operation produces or receives NaN/Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array of doubles with an optional gradient slot.
// Rank-1 tensors behave as a single row wherever a matrix is expected.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty when no gradient has been accumulated
  bool requires_grad = false;

  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  static Tensor row(std::vector<double> data);
  static Tensor identity(std::size_t n);

  std::size_t size() const { return data.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  bool has_grad() const { return !grad.empty(); }
  void zero_grad() { grad.assign(data.size(), 0.0); }
  void clear_grad() { grad.clear(); }

  // Throws NumericError naming `context` if any value is non-finite.
  void check_finite(const std::string& context) const;
};

// Seeded source used for every random initialisation in the project.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double normal(double mean, double stddev);
  double uniform(double lo, double hi);
  std::uint64_t next_u64() { return engine_(); }
  std::size_t index(std::size_t n);  // uniform in [0, n)
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

Tensor normal_tensor(Shape shape, double stddev, Rng& rng, bool requires_grad = true);

// FNV-1a over the raw bytes of the data payload; used for freeze checksums.
std::uint64_t checksum(const Tensor& t);

}  // namespace dast::nc
