#pragma once

#include <string>
#include <vector>

#include "fewshot/harness.hpp"

namespace fewshot {

/// %.6g, the precision of every number in the emitted CSVs and plots.
std::string fmt6(double v);

/// Header `epoch,train_loss` for pretraining records, or
/// `epoch,train_loss,val_loss,accuracy,f1,restored_best` when any record
/// carries validation metrics. Timing lives in a separate file so reruns give
/// identical bytes.
std::string epoch_csv(const std::vector<EpochRecord>& records);
std::string timing_csv(const std::vector<EpochRecord>& records);
std::vector<EpochRecord> parse_epoch_csv(const std::string& text);

/// Rows are true classes, columns predictions, with a header row and a
/// leading class-name column.
std::string confusion_csv(const ConfusionMatrix& cm, const std::vector<std::string>& class_names);

/// Per-run rows (kind=run) followed by one summary row per arm.
std::string ablation_csv(const AblationReport& report);
std::string ablation_text(const AblationReport& report);

struct PlotSeries {
  std::string name;
  std::vector<double> y;  // plotted against 0..n-1
};

/// Self-contained SVG line plot. Every polyline carries a data-values
/// attribute listing its points in fmt6 form.
std::string line_plot_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<PlotSeries>& series);

/// Values of the data-values attribute of each polyline, in order.
std::vector<std::vector<double>> parse_plot_values(const std::string& svg);

}  // namespace fewshot
