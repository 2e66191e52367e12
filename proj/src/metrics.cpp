#include "fewshot/metrics.hpp"

#include <numeric>

#include "fewshot/error.hpp"

namespace fewshot {

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {
  if (classes == 0) throw Error(Errc::invalid_argument, "confusion matrix needs at least one class");
}

void ConfusionMatrix::add(int truth, int predicted) {
  const auto c = static_cast<int>(classes_);
  if (truth < 0 || truth >= c || predicted < 0 || predicted >= c) {
    throw Error(Errc::label_out_of_range, "confusion matrix entry (" + std::to_string(truth) + ", " +
                                              std::to_string(predicted) + ") outside " + std::to_string(c) +
                                              " classes");
  }
  ++counts_[static_cast<std::size_t>(truth) * classes_ + static_cast<std::size_t>(predicted)];
}

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t truth) const {
  std::uint64_t s = 0;
  for (std::size_t p = 0; p < classes_; ++p) s += at(truth, p);
  return s;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t predicted) const {
  std::uint64_t s = 0;
  for (std::size_t t = 0; t < classes_; ++t) s += at(t, predicted);
  return s;
}

ConfusionMatrix confusion_matrix(std::span<const int> truth, std::span<const int> predicted, std::size_t classes) {
  if (truth.size() != predicted.size()) {
    throw Error(Errc::shape_mismatch, "truth and prediction counts differ");
  }
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < truth.size(); ++i) cm.add(truth[i], predicted[i]);
  return cm;
}

const char* f1_average_name(F1Average avg) {
  switch (avg) {
    case F1Average::macro: return "macro";
    case F1Average::micro: return "micro";
    case F1Average::weighted: return "weighted";
  }
  return "?";
}

F1Average parse_f1_average(const std::string& text) {
  if (text == "macro") return F1Average::macro;
  if (text == "micro") return F1Average::micro;
  if (text == "weighted") return F1Average::weighted;
  throw Error(Errc::config, "unknown F1 averaging '" + text + "' (macro, micro, weighted)");
}

namespace {

void require_nonempty(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw Error(Errc::invalid_argument, "metrics of an empty confusion matrix are undefined");
}

}  // namespace

double accuracy(const ConfusionMatrix& cm) {
  require_nonempty(cm);
  std::uint64_t correct = 0;
  for (std::size_t k = 0; k < cm.classes(); ++k) correct += cm.at(k, k);
  return static_cast<double>(correct) / static_cast<double>(cm.total());
}

std::vector<double> per_class_f1(const ConfusionMatrix& cm) {
  require_nonempty(cm);
  std::vector<double> f1(cm.classes(), 0.0);
  for (std::size_t k = 0; k < cm.classes(); ++k) {
    const double tp = static_cast<double>(cm.at(k, k));
    const double denom = static_cast<double>(cm.row_sum(k) + cm.col_sum(k));
    f1[k] = denom > 0 ? 2.0 * tp / denom : 0.0;
  }
  return f1;
}

double macro_f1(const ConfusionMatrix& cm) {
  const auto f1 = per_class_f1(cm);
  return std::accumulate(f1.begin(), f1.end(), 0.0) / static_cast<double>(f1.size());
}

double f1_score(const ConfusionMatrix& cm, F1Average avg) {
  switch (avg) {
    case F1Average::macro:
      return macro_f1(cm);
    case F1Average::micro:
      // single-label: micro precision = micro recall = accuracy
      return accuracy(cm);
    case F1Average::weighted: {
      const auto f1 = per_class_f1(cm);
      double s = 0.0;
      for (std::size_t k = 0; k < f1.size(); ++k) s += f1[k] * static_cast<double>(cm.row_sum(k));
      return s / static_cast<double>(cm.total());
    }
  }
  return 0.0;
}

std::size_t argmax(std::span<const float> row) {
  if (row.empty()) throw Error(Errc::invalid_argument, "argmax of an empty row");
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i) {
    if (row[i] > row[best]) best = i;
  }
  return best;
}

}  // namespace fewshot
