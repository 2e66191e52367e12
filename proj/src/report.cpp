#include "fewshot/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace fewshot {

std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) out.push_back(f);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string opt6(const std::optional<double>& v) { return v ? fmt6(*v) : ""; }

double to_double(const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw Error(Errc::invalid_argument, "bad number '" + s + "' in CSV");
    return v;
  } catch (const std::logic_error&) {
    throw Error(Errc::invalid_argument, "bad number '" + s + "' in CSV");
  }
}

bool has_validation(const std::vector<EpochRecord>& records) {
  return std::any_of(records.begin(), records.end(), [](const EpochRecord& r) { return r.val_loss.has_value(); });
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string epoch_csv(const std::vector<EpochRecord>& records) {
  const bool full = has_validation(records);
  std::string out = full ? "epoch,train_loss,val_loss,accuracy,f1,restored_best\n" : "epoch,train_loss\n";
  for (const auto& r : records) {
    out += std::to_string(r.epoch) + "," + fmt6(r.train_loss);
    if (full) {
      out += "," + opt6(r.val_loss) + "," + opt6(r.accuracy) + "," + opt6(r.f1) + "," + (r.restored_best ? "1" : "0");
    }
    out += "\n";
  }
  return out;
}

std::string timing_csv(const std::vector<EpochRecord>& records) {
  std::string out = "epoch,seconds\n";
  for (const auto& r : records) out += std::to_string(r.epoch) + "," + fmt6(r.seconds) + "\n";
  return out;
}

std::vector<EpochRecord> parse_epoch_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw Error(Errc::invalid_argument, "empty CSV");
  const auto header = split_fields(line);
  const bool full = header.size() == 6;
  if (!(header.size() == 2 || full) || header[0] != "epoch" || header[1] != "train_loss") {
    throw Error(Errc::invalid_argument, "unrecognised epoch CSV header");
  }
  std::vector<EpochRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != header.size()) throw Error(Errc::invalid_argument, "CSV row has the wrong field count");
    EpochRecord r;
    r.epoch = static_cast<int>(to_double(f[0]));
    r.train_loss = to_double(f[1]);
    if (full) {
      if (!f[2].empty()) r.val_loss = to_double(f[2]);
      if (!f[3].empty()) r.accuracy = to_double(f[3]);
      if (!f[4].empty()) r.f1 = to_double(f[4]);
      r.restored_best = f[5] == "1";
    }
    out.push_back(r);
  }
  return out;
}

std::string confusion_csv(const ConfusionMatrix& cm, const std::vector<std::string>& class_names) {
  auto name = [&](std::size_t k) { return k < class_names.size() ? class_names[k] : "class" + std::to_string(k); };
  std::string out = "true\\pred";
  for (std::size_t p = 0; p < cm.classes(); ++p) out += "," + name(p);
  out += "\n";
  for (std::size_t t = 0; t < cm.classes(); ++t) {
    out += name(t);
    for (std::size_t p = 0; p < cm.classes(); ++p) out += "," + std::to_string(cm.at(t, p));
    out += "\n";
  }
  return out;
}

std::string ablation_csv(const AblationReport& report) {
  std::string out = "kind,arm,seed,accuracy,f1,accuracy_sd,f1_sd,finetune_epochs,best_epoch,split_fingerprint\n";
  for (const auto& r : report.runs) {
    char fp[32];
    std::snprintf(fp, sizeof fp, "%016llx", static_cast<unsigned long long>(r.split_fingerprint));
    out += "run," + r.arm + "," + std::to_string(r.seed) + "," + fmt6(r.accuracy) + "," + fmt6(r.f1) + ",,," +
           std::to_string(r.finetune_epochs) + "," + std::to_string(r.best_epoch) + "," + fp + "\n";
  }
  for (const auto* s : {&report.pretrained, &report.scratch}) {
    out += "summary," + s->arm + ",," + fmt6(s->acc_mean) + "," + fmt6(s->f1_mean) + "," + fmt6(s->acc_sd) + "," +
           fmt6(s->f1_sd) + ",,,\n";
  }
  return out;
}

std::string ablation_text(const AblationReport& report) {
  std::ostringstream os;
  char line[160];
  os << "arm          seed   accuracy   f1       epochs\n";
  for (const auto& r : report.runs) {
    std::snprintf(line, sizeof line, "%-12s %-6llu %-10.4f %-8.4f %d\n", r.arm.c_str(),
                  static_cast<unsigned long long>(r.seed), r.accuracy, r.f1, r.finetune_epochs);
    os << line;
  }
  os << "\n";
  for (const auto* s : {&report.pretrained, &report.scratch}) {
    std::snprintf(line, sizeof line, "%-12s accuracy %.4f +- %.4f   f1 %.4f +- %.4f\n", s->arm.c_str(), s->acc_mean,
                  s->acc_sd, s->f1_mean, s->f1_sd);
    os << line;
  }
  std::snprintf(line, sizeof line, "difference   accuracy %+.4f   f1 %+.4f\n", report.acc_difference,
                report.f1_difference);
  os << line;
  os << "splits identical across arms: " << (report.splits_identical ? "yes" : "no") << "\n";
  return os.str();
}

std::string line_plot_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<PlotSeries>& series) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
  const double width = 640, height = 400, left = 70, right = 150, top = 40, bottom = 50;
  const double pw = width - left - right, ph = height - top - bottom;

  double lo = INFINITY, hi = -INFINITY;
  std::size_t n = 0;
  for (const auto& s : series) {
    n = std::max(n, s.y.size());
    for (double v : s.y) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (!std::isfinite(lo)) lo = 0, hi = 1;
  if (hi - lo < 1e-12) lo -= 0.5, hi += 0.5;
  const double pad = 0.05 * (hi - lo);
  lo -= pad;
  hi += pad;
  const double xmax = n > 1 ? static_cast<double>(n - 1) : 1.0;
  auto px = [&](double i) { return left + pw * i / xmax; };
  auto py = [&](double v) { return top + ph * (hi - v) / (hi - lo); };

  std::ostringstream os;
  char buf[128];
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << xml_escape(title)
     << "</text>\n";
  os << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * t / 4.0;
    std::snprintf(buf, sizeof buf, "%.2f", py(v));
    os << "<line x1=\"" << left - 4 << "\" x2=\"" << left << "\" y1=\"" << buf << "\" y2=\"" << buf
       << "\" stroke=\"#444\"/>";
    os << "<text x=\"" << left - 8 << "\" y=\"" << buf << "\" text-anchor=\"end\" dominant-baseline=\"middle\">"
       << fmt6(v) << "</text>\n";
  }
  for (int t = 0; t <= 4; ++t) {
    const double i = xmax * t / 4.0;
    std::snprintf(buf, sizeof buf, "%.2f", px(i));
    os << "<text x=\"" << buf << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">" << fmt6(std::round(i))
       << "</text>\n";
  }
  os << "<text x=\"" << left + pw / 2 << "\" y=\"" << height - 10 << "\" text-anchor=\"middle\">"
     << xml_escape(x_label) << "</text>\n";
  os << "<text x=\"16\" y=\"" << top + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << top + ph / 2 << ")\">" << xml_escape(y_label) << "</text>\n";

  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = colors[k % 5];
    std::string points, values;
    for (std::size_t i = 0; i < s.y.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.2f,%.2f", px(static_cast<double>(i)), py(s.y[i]));
      if (i) {
        points += " ";
        values += " ";
      }
      points += buf;
      values += fmt6(s.y[i]);
    }
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" data-name=\"" << xml_escape(s.name)
       << "\" data-values=\"" << values << "\" points=\"" << points << "\"/>\n";
    const double ly = top + 14 + 18 * static_cast<double>(k);
    os << "<line x1=\"" << left + pw + 12 << "\" x2=\"" << left + pw + 32 << "\" y1=\"" << ly << "\" y2=\"" << ly
       << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>";
    os << "<text x=\"" << left + pw + 38 << "\" y=\"" << ly << "\" dominant-baseline=\"middle\">" << xml_escape(s.name)
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::vector<std::vector<double>> parse_plot_values(const std::string& svg) {
  std::vector<std::vector<double>> out;
  const std::string key = "data-values=\"";
  std::size_t pos = 0;
  while ((pos = svg.find(key, pos)) != std::string::npos) {
    pos += key.size();
    const auto end = svg.find('"', pos);
    std::istringstream in(svg.substr(pos, end - pos));
    std::vector<double> values;
    std::string tok;
    while (in >> tok) values.push_back(to_double(tok));
    out.push_back(std::move(values));
    pos = end;
  }
  return out;
}

}  // namespace fewshot
