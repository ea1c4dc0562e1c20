// Shared helpers and straight-line oracles for the test binaries.
#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "encoder/encoder.hpp"
#include "numcore/tensor.hpp"

namespace dast::test {

// softmax(Q Kᵀ / √C) V with plain loops.
inline std::vector<double> attention_oracle(const nc::Tensor& q, const nc::Tensor& k, const nc::Tensor& v,
                                            std::vector<double>* weights_out = nullptr) {
  const std::size_t m = q.rows(), n = k.rows(), c = q.cols(), dv = v.cols();
  std::vector<double> out(m * dv, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<double> s(n);
    double mx = -1e300;
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t t = 0; t < c; ++t) dot += q.at(i, t) * k.at(j, t);
      s[j] = dot / std::sqrt(static_cast<double>(c));
      mx = std::max(mx, s[j]);
    }
    double z = 0.0;
    for (auto& e : s) z += (e = std::exp(e - mx));
    for (std::size_t j = 0; j < n; ++j) {
      const double w = s[j] / z;
      if (weights_out) weights_out->push_back(w);
      for (std::size_t t = 0; t < dv; ++t) out[i * dv + t] += w * v.at(j, t);
    }
  }
  return out;
}

inline std::vector<double> layer_norm_oracle(const std::vector<double>& row, const std::vector<double>& gamma,
                                             const std::vector<double>& beta, double eps = 1e-5) {
  const double n = static_cast<double>(row.size());
  double mean = 0.0, var = 0.0;
  for (double v : row) mean += v;
  mean /= n;
  for (double v : row) var += (v - mean) * (v - mean);
  var /= n;
  std::vector<double> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = (row[i] - mean) / std::sqrt(var + eps) * gamma[i] + beta[i];
  return out;
}

inline encoder::ImageSample random_image(std::size_t h, std::size_t w, std::uint64_t seed, const std::string& id = "s0") {
  nc::Rng rng(seed);
  encoder::ImageSample s;
  s.height = h;
  s.width = w;
  s.study_id = id;
  for (std::size_t i = 0; i < h * w; ++i) s.pixels.push_back(rng.uniform(0.0, 1.0));
  return s;
}

inline std::vector<double> row_of(const nc::Tensor& t, std::size_t r) {
  return {t.data.begin() + static_cast<long>(r * t.cols()), t.data.begin() + static_cast<long>((r + 1) * t.cols())};
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("dastlab_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void spit(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << bytes;
}

}  // namespace dast::test
