#include <fstream>
#include <sstream>

#include "json.hpp"
#include "terra/eval_io.hpp"

namespace terra::eval {

std::string report_to_json(const MetricReport& report) {
  nlohmann::json j;
  j["dataset"] = report.dataset;
  j["trial"] = report.trial;
  j["metric"] = report.metric;
  j["mean"] = report.mean;
  if (report.sigma) j["sigma"] = *report.sigma;
  j["method"] = report.method;
  if (report.folds > 0) j["folds"] = report.folds;
  if (report.bootstraps > 0) j["bootstraps"] = report.bootstraps;
  j["seed"] = report.seed;
  return j.dump();
}

void append_report(const std::string& path, const MetricReport& report) {
  std::ofstream out(path, std::ios::app);
  if (!out) raise_io("report: cannot open for append: " + path);
  out << report_to_json(report) << "\n";
}

std::vector<MetricReport> read_reports(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise_io("report: cannot open: " + path);
  std::vector<MetricReport> reports;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    MetricReport r;
    r.dataset = j.value("dataset", "");
    r.trial = j.value("trial", "");
    r.metric = j.value("metric", "");
    r.mean = j.value("mean", 0.0);
    if (j.contains("sigma")) r.sigma = j["sigma"].get<double>();
    r.method = j.value("method", "");
    r.folds = j.value("folds", static_cast<int64_t>(0));
    r.bootstraps = j.value("bootstraps", static_cast<int64_t>(0));
    r.seed = j.value("seed", static_cast<uint64_t>(0));
    reports.push_back(std::move(r));
  }
  return reports;
}

// Minimal static bar chart with 1-sigma whiskers.
void write_report_plot(const std::string& svg_path, const std::string& csv_path,
                       const std::vector<MetricReport>& reports, const std::string& title) {
  check_input(!reports.empty(), "plot: nothing to draw");
  {
    std::ofstream csv(csv_path);
    if (!csv) raise_io("plot: cannot open for writing: " + csv_path);
    csv << "trial,metric,mean,sigma,method\n";
    for (const auto& r : reports) {
      csv << r.trial << ',' << r.metric << ',' << r.mean << ','
          << (r.sigma ? std::to_string(*r.sigma) : "") << ',' << r.method << "\n";
    }
  }

  const double bar_w = 46.0, gap = 18.0, left = 70.0, bottom = 40.0, top = 40.0;
  const double plot_h = 260.0;
  double lo = 0.0, hi = 0.0;
  for (const auto& r : reports) {
    double s = r.sigma.value_or(0.0);
    lo = std::min(lo, r.mean - s);
    hi = std::max(hi, r.mean + s);
  }
  if (hi <= lo) hi = lo + 1.0;
  hi *= 1.08;

  double width = left + reports.size() * (bar_w + gap) + 30.0;
  double height = top + plot_h + bottom + 30.0;
  auto y_of = [&](double v) { return top + plot_h - (v - lo) / (hi - lo) * plot_h; };

  std::ostringstream svg;
  svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height
      << "'>\n";
  svg << "<text x='" << left << "' y='24' font-family='sans-serif' font-size='15'>" << title
      << "</text>\n";
  svg << "<line x1='" << left - 8 << "' y1='" << y_of(lo) << "' x2='" << width - 20 << "' y2='"
      << y_of(lo) << "' stroke='#333'/>\n";
  for (int grid = 0; grid <= 4; ++grid) {
    double v = lo + (hi - lo) * grid / 4.0;
    svg << "<line x1='" << left - 8 << "' y1='" << y_of(v) << "' x2='" << width - 20 << "' y2='"
        << y_of(v) << "' stroke='#ddd'/>\n";
    svg << "<text x='8' y='" << y_of(v) + 4 << "' font-family='sans-serif' font-size='11'>"
        << static_cast<int>(v * 1000) / 1000.0 << "</text>\n";
  }
  for (size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    double x = left + i * (bar_w + gap);
    double y = y_of(std::max(r.mean, lo));
    double base = y_of(lo);
    svg << "<rect x='" << x << "' y='" << std::min(y, base) << "' width='" << bar_w
        << "' height='" << std::abs(base - y) << "' fill='#4878a8'/>\n";
    if (r.sigma) {
      double cx = x + bar_w / 2.0;
      svg << "<line x1='" << cx << "' y1='" << y_of(r.mean - *r.sigma) << "' x2='" << cx
          << "' y2='" << y_of(r.mean + *r.sigma) << "' stroke='#222' stroke-width='1.5'/>\n";
      for (double s : {-*r.sigma, *r.sigma}) {
        svg << "<line x1='" << cx - 5 << "' y1='" << y_of(r.mean + s) << "' x2='" << cx + 5
            << "' y2='" << y_of(r.mean + s) << "' stroke='#222' stroke-width='1.5'/>\n";
      }
    }
    svg << "<text x='" << x + bar_w / 2.0 << "' y='" << top + plot_h + 16
        << "' font-family='sans-serif' font-size='10' text-anchor='middle'>" << r.trial
        << "</text>\n";
  }
  svg << "</svg>\n";

  std::ofstream out(svg_path);
  if (!out) raise_io("plot: cannot open for writing: " + svg_path);
  out << svg.str();
}

}  // namespace terra::eval
