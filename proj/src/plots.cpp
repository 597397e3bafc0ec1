#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <spdlog/spdlog.h>

#include "nestcal/error.hpp"
#include "nestcal/experiment.hpp"

namespace fs = std::filesystem;

namespace nestcal {

namespace {

const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

// Trailing moving average so the raw MINE objective is readable.
std::vector<double> smooth(const std::vector<double>& v, int window) {
  std::vector<double> out(v.size());
  double acc = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    acc += v[i];
    if (i >= static_cast<std::size_t>(window)) acc -= v[i - window];
    out[i] = acc / static_cast<double>(std::min<std::size_t>(i + 1, window));
  }
  return out;
}

}  // namespace

void write_line_plot(const fs::path& path, const std::string& title, const std::string& xlabel,
                     const std::string& ylabel, const std::vector<Series>& series, const std::vector<double>& markers) {
  const double W = 720, H = 440, left = 70, right = 170, top = 40, bottom = 55;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (!std::isfinite(x0)) throw ValidationError("plot: no finite points");
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;
  const double pw = W - left - right, ph = H - top - bottom;
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return top + (1 - (y - y0) / (y1 - y0)) * ph; };

  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << left + pw / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << escape(title)
      << "</text>\n";
  out << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 5; ++t) {
    const double xv = x0 + (x1 - x0) * t / 5, yv = y0 + (y1 - y0) * t / 5;
    out << "<text x=\"" << px(xv) << "\" y=\"" << top + ph + 16 << "\" text-anchor=\"middle\">" << fmt(xv)
        << "</text>\n";
    out << "<text x=\"" << left - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << fmt(yv) << "</text>\n";
    out << "<line x1=\"" << left << "\" x2=\"" << left + pw << "\" y1=\"" << py(yv) << "\" y2=\"" << py(yv)
        << "\" stroke=\"#ddd\"/>\n";
  }
  out << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << escape(xlabel)
      << "</text>\n";
  out << "<text transform=\"translate(18," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
      << escape(ylabel) << "</text>\n";
  for (double m : markers) {
    out << "<line x1=\"" << px(m) << "\" x2=\"" << px(m) << "\" y1=\"" << top << "\" y2=\"" << top + ph
        << "\" stroke=\"gray\" stroke-dasharray=\"4,3\"/>\n";
  }
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = kColors[s % std::size(kColors)];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < series[s].x.size(); ++i) {
      if (std::isfinite(series[s].y[i])) out << px(series[s].x[i]) << ',' << py(series[s].y[i]) << ' ';
    }
    out << "\"/>\n";
    const double ly = top + 14 + 18 * static_cast<double>(s);
    out << "<line x1=\"" << left + pw + 12 << "\" x2=\"" << left + pw + 32 << "\" y1=\"" << ly << "\" y2=\"" << ly
        << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    out << "<text x=\"" << left + pw + 38 << "\" y=\"" << ly + 4 << "\">" << escape(series[s].label) << "</text>\n";
  }
  out << "</svg>\n";
}

std::vector<fs::path> emit_plots(const fs::path& run_dir) {
  const auto hist_path = run_dir / "history.jsonl";
  if (!fs::exists(hist_path)) throw ValidationError("plot: " + hist_path.string() + " is missing");
  const auto hist = TrainHistory::read_jsonl(hist_path);
  const auto dir = run_dir / "plots";
  fs::create_directories(dir);
  std::vector<fs::path> written;

  // Accuracy per level against a global epoch axis; dashed lines mark cascade steps.
  std::vector<Series> acc;
  std::vector<double> markers;
  int prev_step = -1;
  for (std::size_t r = 0; r < hist.records.size(); ++r) {
    const auto& rec = hist.records[r];
    if (rec.step != prev_step && r > 0) markers.push_back(static_cast<double>(r));
    prev_step = rec.step;
    if (acc.size() < rec.val_accuracy.size()) acc.resize(rec.val_accuracy.size());
    for (std::size_t l = 0; l < rec.val_accuracy.size(); ++l) {
      if (!rec.val_accuracy[l]) continue;
      acc[l].x.push_back(static_cast<double>(r));
      acc[l].y.push_back(*rec.val_accuracy[l]);
    }
  }
  std::erase_if(acc, [](const Series& s) { return s.x.empty(); });
  for (std::size_t l = 0; l < acc.size(); ++l) acc[l].label = "level " + std::to_string(l);
  if (acc.empty()) {
    spdlog::info("plot: history has no accuracy records, accuracy plot skipped");
  } else {
    written.push_back(dir / "accuracy.svg");
    write_line_plot(written.back(), hist.mode + " training: validation accuracy", "epoch", "accuracy (%)", acc,
                    markers);
  }

  auto trace_plot = [&](const fs::path& src, const std::string& file, const std::string& title) {
    if (!fs::exists(src)) {
      spdlog::info("plot: {} absent, {} skipped", src.filename().string(), file);
      return;
    }
    std::ifstream in(src);
    const auto doc = nlohmann::json::parse(in);
    std::vector<Series> traces;
    const auto all = doc.value("traces", nlohmann::json::object());
    for (const auto& [key, values] : all.items()) {
      const auto raw = values.get<std::vector<double>>();
      Series s{key, {}, smooth(raw, 50)};
      for (std::size_t i = 0; i < raw.size(); ++i) s.x.push_back(static_cast<double>(i));
      traces.push_back(std::move(s));
    }
    if (traces.empty()) {
      spdlog::info("plot: {} has no traces, {} skipped", src.filename().string(), file);
      return;
    }
    written.push_back(dir / file);
    write_line_plot(written.back(), title, "iteration", "estimate (nats)", traces);
  };
  trace_plot(run_dir / "mi.json", "mi.svg", "mutual information estimates");
  trace_plot(run_dir / "mi_gap.json", "mi_gap.svg", "mutual information, with and without skips");
  return written;
}

}  // namespace nestcal
