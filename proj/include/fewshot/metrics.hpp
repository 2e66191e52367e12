#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace fewshot {

/// counts[truth * classes + predicted].
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes);

  void add(int truth, int predicted);
  std::size_t classes() const { return classes_; }
  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts_[truth * classes_ + predicted]; }
  std::uint64_t total() const;
  std::uint64_t row_sum(std::size_t truth) const;
  std::uint64_t col_sum(std::size_t predicted) const;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

ConfusionMatrix confusion_matrix(std::span<const int> truth, std::span<const int> predicted, std::size_t classes);

enum class F1Average { macro, micro, weighted };

const char* f1_average_name(F1Average avg);
F1Average parse_f1_average(const std::string& text);

double accuracy(const ConfusionMatrix& cm);
/// Per-class F1 with 0/0 defined as 0.
std::vector<double> per_class_f1(const ConfusionMatrix& cm);
/// Unweighted mean of per-class F1 over every class, present or not.
double macro_f1(const ConfusionMatrix& cm);
double f1_score(const ConfusionMatrix& cm, F1Average avg);

/// Index of the largest value; ties go to the lowest index.
std::size_t argmax(std::span<const float> row);

}  // namespace fewshot
