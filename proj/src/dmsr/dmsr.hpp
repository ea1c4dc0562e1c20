#pragma once

#include <array>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ontology/ontology.hpp"

namespace dast::dmsr {

class IndexError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ExemplarRecord {
  std::string study_id;
  std::vector<double> z_bar;
  std::array<double, kNumDiseases> logits{};
  std::string report;

  bool operator==(const ExemplarRecord&) const = default;
};

// Which space the disease term compares logits in.
enum class LogitSpace { raw, probability };

struct QueryOptions {
  double lambda = 0.5;
  std::size_t k = 1;
  std::optional<std::string> exclude_id;
  LogitSpace space = LogitSpace::raw;
};

struct Hit {
  std::string study_id;
  double score = 0.0;
  std::size_t position = 0;  // insertion index

  bool operator==(const Hit&) const = default;
};

// Exemplar database scored by s_k = cos(z̄, z̄_k) + λ·cos(l, l_k).
class ExemplarIndex {
 public:
  explicit ExemplarIndex(std::size_t width, double lambda_default = 0.5);

  void add(ExemplarRecord record);

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  std::size_t width() const { return width_; }
  double lambda_default() const { return lambda_default_; }
  const std::vector<ExemplarRecord>& records() const { return records_; }
  const ExemplarRecord* find(std::string_view study_id) const;

  // Ranked by descending score; ties go to the earlier insertion.
  std::vector<Hit> query(std::span<const double> z_bar, std::span<const double> logits, const QueryOptions& opts) const;

  void save(const std::string& path) const;
  // Throws IndexError on any format problem; nothing is returned partially.
  static ExemplarIndex load(const std::string& path, std::optional<std::size_t> expected_width = std::nullopt);

  bool operator==(const ExemplarIndex& other) const { return width_ == other.width_ && records_ == other.records_; }

 private:
  std::size_t width_;
  double lambda_default_;
  std::vector<ExemplarRecord> records_;
  std::vector<double> visual_norms_;
  std::vector<double> logit_norms_raw_;
  std::vector<double> logit_norms_prob_;
};

// Exhaustive straight-line scoring of every record, then a full stable sort.
std::vector<Hit> brute_force_oracle(const ExemplarIndex& index, std::span<const double> z_bar,
                                    std::span<const double> logits, const QueryOptions& opts);

}  // namespace dast::dmsr
