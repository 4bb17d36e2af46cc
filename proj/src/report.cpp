#include "dprobe/report.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "dprobe/error.hpp"

namespace dprobe {

namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&':
        out += "&amp;";
        break;
      case '<':
        out += "&lt;";
        break;
      case '>':
        out += "&gt;";
        break;
      case '"':
        out += "&quot;";
        break;
      default:
        out += c;
    }
  }
  return out;
}

std::string num(double v) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(2);
  s << v;
  return s.str();
}

const char* kPalette[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860",
                          "#da8bc3", "#8c8c8c"};

std::string safe_name(const std::string& id) {
  std::string out;
  for (char c : id) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
  return out;
}

}  // namespace

void write_file_atomic(const std::string& path, const std::string& contents) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write " + path);
    out << contents;
    if (!out) throw Error("write failed: " + path);
  }
  std::filesystem::rename(tmp, path);
}

std::string expected_layer_svg(const std::vector<ExpectedLayerRow>& rows, const std::string& title) {
  std::vector<std::string> groups;
  std::vector<std::string> cats;
  for (const auto& r : rows) {
    if (std::find(groups.begin(), groups.end(), r.group) == groups.end()) groups.push_back(r.group);
    const auto c = r.category.str();
    if (std::find(cats.begin(), cats.end(), c) == cats.end()) cats.push_back(c);
  }
  double ymax = 1.0;
  for (const auto& r : rows) {
    if (r.expected.valid()) ymax = std::max(ymax, r.expected.mean + r.expected.stddev);
  }
  ymax = std::ceil(ymax);

  const double bar_w = 18.0;
  const double group_gap = 30.0;
  const double left = 50.0;
  const double top = 40.0;
  const double plot_h = 240.0;
  const double group_w = bar_w * static_cast<double>(std::max<std::size_t>(1, cats.size())) + group_gap;
  const double width = left + group_w * static_cast<double>(std::max<std::size_t>(1, groups.size())) + 160.0;
  const double height = top + plot_h + 70.0;
  auto y_of = [&](double v) { return top + plot_h * (1.0 - v / ymax); };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width) << "\" height=\""
    << num(height) << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<text x=\"" << num(left) << "\" y=\"20\" font-size=\"14\">" << xml_escape(title) << "</text>\n";
  s << "<line x1=\"" << num(left) << "\" y1=\"" << num(top) << "\" x2=\"" << num(left) << "\" y2=\""
    << num(top + plot_h) << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= static_cast<int>(ymax); ++t) {
    s << "<text x=\"" << num(left - 8) << "\" y=\"" << num(y_of(t) + 4)
      << "\" text-anchor=\"end\">" << t << "</text>\n";
    s << "<line x1=\"" << num(left) << "\" y1=\"" << num(y_of(t)) << "\" x2=\"" << num(width - 160)
      << "\" y2=\"" << num(y_of(t)) << "\" stroke=\"#ddd\"/>\n";
  }
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double gx = left + 10.0 + group_w * static_cast<double>(g);
    s << "<g class=\"structure-set\" data-key=\"" << xml_escape(groups[g]) << "\">\n";
    for (const auto& r : rows) {
      if (r.group != groups[g] || !r.expected.valid()) continue;
      const auto c = static_cast<std::size_t>(
          std::find(cats.begin(), cats.end(), r.category.str()) - cats.begin());
      const double x = gx + bar_w * static_cast<double>(c);
      const double y = y_of(r.expected.mean);
      s << "<rect x=\"" << num(x) << "\" y=\"" << num(y) << "\" width=\"" << num(bar_w - 2)
        << "\" height=\"" << num(top + plot_h - y) << "\" fill=\"" << kPalette[c % 8] << "\"/>\n";
      const double cx = x + (bar_w - 2) / 2.0;
      const double lo = y_of(std::max(0.0, r.expected.mean - r.expected.stddev));
      const double hi = y_of(r.expected.mean + r.expected.stddev);
      s << "<line class=\"error-bar\" x1=\"" << num(cx) << "\" y1=\"" << num(lo) << "\" x2=\""
        << num(cx) << "\" y2=\"" << num(hi) << "\" stroke=\"black\"/>\n";
    }
    s << "<text x=\"" << num(gx) << "\" y=\"" << num(top + plot_h + 16) << "\">"
      << xml_escape(groups[g]) << "</text>\n";
    s << "</g>\n";
  }
  for (std::size_t c = 0; c < cats.size(); ++c) {
    const double ly = top + 14.0 * static_cast<double>(c);
    s << "<rect x=\"" << num(width - 150) << "\" y=\"" << num(ly) << "\" width=\"10\" height=\"10\" fill=\""
      << kPalette[c % 8] << "\"/>\n";
    s << "<text x=\"" << num(width - 135) << "\" y=\"" << num(ly + 9) << "\">" << xml_escape(cats[c])
      << "</text>\n";
  }
  s << "<text x=\"14\" y=\"" << num(top + plot_h / 2) << "\" transform=\"rotate(-90 14 "
    << num(top + plot_h / 2) << ")\" text-anchor=\"middle\">expected layer</text>\n";
  s << "</svg>\n";
  return s.str();
}

std::string trace_svg(const DerivationTrace& trace) {
  const double panel = 180.0;
  const std::size_t cols = std::min<std::size_t>(5, std::max<std::size_t>(1, trace.layers.size()));
  const std::size_t rows = (trace.layers.size() + cols - 1) / cols;
  const double width = panel * static_cast<double>(cols);
  const double height = panel * static_cast<double>(rows) + 30.0;

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width) << "\" height=\""
    << num(height) << "\" font-family=\"sans-serif\" font-size=\"9\">\n";
  s << "<text x=\"6\" y=\"18\" font-size=\"12\">" << xml_escape(trace.sentence_id) << " "
    << xml_escape(trace.label) << "</text>\n";
  for (std::size_t k = 0; k < trace.layers.size(); ++k) {
    const auto& tl = trace.layers[k];
    const double ox = panel * static_cast<double>(k % cols);
    const double oy = 30.0 + panel * static_cast<double>(k / cols);
    double span = 1e-9;
    for (Eigen::Index i = 0; i < tl.coords.rows(); ++i) {
      span = std::max({span, std::abs(tl.coords(i, 0)),
                       tl.coords.cols() > 1 ? std::abs(tl.coords(i, 1)) : 0.0});
    }
    auto px = [&](Eigen::Index i) { return ox + panel / 2 + (panel / 2 - 25) * tl.coords(i, 0) / span; };
    auto py = [&](Eigen::Index i) {
      return oy + panel / 2 - (panel / 2 - 25) * (tl.coords.cols() > 1 ? tl.coords(i, 1) : 0.0) / span;
    };
    s << "<g class=\"layer\" data-layer=\"" << tl.layer << "\">\n";
    s << "<rect x=\"" << num(ox + 2) << "\" y=\"" << num(oy + 2) << "\" width=\"" << num(panel - 4)
      << "\" height=\"" << num(panel - 4) << "\" fill=\"none\" stroke=\"#ccc\"/>\n";
    s << "<text x=\"" << num(ox + 8) << "\" y=\"" << num(oy + 14) << "\">layer " << tl.layer;
    if (auto it = tl.uuas.find("Global"); it != tl.uuas.end()) s << "  UUAS " << num(it->second);
    s << "</text>\n";
    for (const auto& e : tl.edges) {
      const auto a = static_cast<Eigen::Index>(e.first);
      const auto b = static_cast<Eigen::Index>(e.second);
      const bool gold = trace.gold.count(e) != 0;
      s << "<line x1=\"" << num(px(a)) << "\" y1=\"" << num(py(a)) << "\" x2=\"" << num(px(b))
        << "\" y2=\"" << num(py(b)) << "\" stroke=\"" << (gold ? "#4c72b0" : "#c44e52") << "\""
        << (gold ? "" : " stroke-dasharray=\"3,2\"") << "/>\n";
    }
    for (Eigen::Index i = 0; i < tl.coords.rows(); ++i) {
      s << "<circle cx=\"" << num(px(i)) << "\" cy=\"" << num(py(i)) << "\" r=\"2.5\"/>\n";
      s << "<text x=\"" << num(px(i) + 3) << "\" y=\"" << num(py(i) - 3) << "\">"
        << xml_escape(trace.tokens.at(static_cast<std::size_t>(i))) << "</text>\n";
    }
    s << "</g>\n";
  }
  s << "</svg>\n";
  return s.str();
}

std::vector<std::string> emit_reports(const ReportInputs& in, const ReportStamp& stamp,
                                      const std::string& outdir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(outdir, ec);
  if (ec || !fs::is_directory(outdir)) throw ValidationError("cannot create output directory " + outdir);

  std::vector<std::string> written;
  auto emit = [&](const std::string& name, const std::string& contents) {
    const std::string path = (fs::path(outdir) / name).string();
    write_file_atomic(path, contents);
    written.push_back(path);
  };

  if (!in.curves.empty()) {
    std::ostringstream csv;
    csv.precision(10);
    csv << stamp.csv_comment() << "model,seed,layer,uuas\n";
    for (const auto& c : in.curves) {
      for (std::size_t l = 0; l < c.scores.size(); ++l) {
        csv << c.model << ',' << c.seed << ',' << l << ',' << c.scores[l] << '\n';
      }
    }
    emit("global_uuas.csv", csv.str());
  }
  if (!in.expected_rows.empty()) {
    emit("expected_layers.csv", stamp.csv_comment() + rows_to_csv(in.expected_rows));
    nlohmann::json j = {{"stamp", stamp.to_json()}, {"rows", rows_to_json(in.expected_rows)}};
    emit("expected_layers.json", j.dump(2) + "\n");
    if (in.svg) emit("expected_layers.svg", expected_layer_svg(in.expected_rows, "Expected layer by structure set"));
  }
  if (in.agreement) {
    std::vector<ExpectedLayerRow> rows;
    nlohmann::json parts = nlohmann::json::array();
    for (const auto& p : in.agreement->partitions) {
      rows.insert(rows.end(), p.rows.begin(), p.rows.end());
      parts.push_back({{"name", p.name}, {"n", p.items.size()}});
    }
    emit("agreement.csv", stamp.csv_comment() + rows_to_csv(rows));
    nlohmann::json j = {{"stamp", stamp.to_json()},
                        {"total", in.agreement->total},
                        {"ties", in.agreement->ties},
                        {"excluded", in.agreement->excluded},
                        {"partitions", parts},
                        {"rows", rows_to_json(rows)}};
    emit("agreement.json", j.dump(2) + "\n");
    if (in.svg) emit("agreement.svg", expected_layer_svg(rows, "Expected layer: success vs failure"));
  }
  if (!in.traces.empty()) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& t : in.traces) arr.push_back(trace_to_json(t));
    emit("traces.json", nlohmann::json({{"stamp", stamp.to_json()}, {"traces", arr}}).dump(2) + "\n");
    if (in.svg) {
      for (const auto& t : in.traces) emit("trace_" + safe_name(t.sentence_id) + ".svg", trace_svg(t));
    }
  }
  return written;
}

}  // namespace dprobe
