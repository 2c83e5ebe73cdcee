#include "dmaf/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "dmaf/error.hpp"

namespace dmaf::report {

namespace {

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double num(const std::string& s) {
  if (s == "nan") return std::nan("");
  try {
    return std::stod(s);
  } catch (const std::exception&) {
    fail(ErrorCode::kFormat, "not a number: '" + s + "'");
  }
}

std::string short_fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

void require_columns(const CsvTable& t, const std::vector<std::string>& names, const std::string& what) {
  std::string missing;
  for (const auto& n : names)
    if (t.column(n) < 0) missing += (missing.empty() ? "" : ", ") + n;
  require(missing.empty(), ErrorCode::kFormat, what + " is missing column(s): " + missing);
}

std::vector<double> series(const CsvTable& t, const std::string& name) {
  const int c = t.column(name);
  std::vector<double> v;
  for (const auto& r : t.rows) v.push_back(num(r.at(c)));
  return v;
}

struct Series {
  std::string name;
  std::vector<double> y;
};

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

void write_line_svg(const std::filesystem::path& path, const std::string& title, const std::vector<double>& x,
                    const std::vector<Series>& ys) {
  const double w = 640, h = 360, ml = 60, mr = 140, mt = 30, mb = 40;
  double x0 = x.empty() ? 0 : x.front(), x1 = x.empty() ? 1 : x.back();
  double y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : ys)
    for (double v : s.y)
      if (std::isfinite(v)) y0 = std::min(y0, v), y1 = std::max(y1, v);
  if (!std::isfinite(y0)) y0 = 0, y1 = 1;
  if (y1 - y0 < 1e-12) y0 -= 0.5, y1 += 0.5;
  if (x1 - x0 < 1e-12) x1 = x0 + 1;
  auto px = [&](double v) { return ml + (v - x0) / (x1 - x0) * (w - ml - mr); };
  auto py = [&](double v) { return h - mb - (v - y0) / (y1 - y0) * (h - mt - mb); };

  std::ofstream os(path);
  require(os.good(), ErrorCode::kIo, "cannot write " + path.string());
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << ml << "\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">" << title << "</text>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << h - mb << "\" x2=\"" << w - mr << "\" y2=\"" << h - mb
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << h - mb << "\" stroke=\"black\"/>\n";
  os << "<text x=\"4\" y=\"" << mt + 10 << "\" font-size=\"10\">" << short_fmt(y1) << "</text>\n";
  os << "<text x=\"4\" y=\"" << h - mb << "\" font-size=\"10\">" << short_fmt(y0) << "</text>\n";
  os << "<text x=\"" << ml << "\" y=\"" << h - mb + 15 << "\" font-size=\"10\">" << short_fmt(x0) << "</text>\n";
  os << "<text x=\"" << w - mr - 30 << "\" y=\"" << h - mb + 15 << "\" font-size=\"10\">" << short_fmt(x1)
     << "</text>\n";
  for (std::size_t k = 0; k < ys.size(); ++k) {
    const char* color = kPalette[k % std::size(kPalette)];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1\" points=\"";
    bool first = true;
    for (std::size_t i = 0; i < x.size() && i < ys[k].y.size(); ++i) {
      if (!std::isfinite(ys[k].y[i])) continue;
      os << (first ? "" : " ") << short_fmt(px(x[i])) << ',' << short_fmt(py(ys[k].y[i]));
      first = false;
    }
    os << "\"/>\n";
    os << "<text x=\"" << w - mr + 10 << "\" y=\"" << mt + 15 * (k + 1) << "\" font-size=\"11\" fill=\"" << color
       << "\">" << ys[k].name << "</text>\n";
  }
  os << "</svg>\n";
}

void write_bar_svg(const std::filesystem::path& path, const std::string& title, const std::vector<std::string>& labels,
                   const std::vector<double>& values) {
  const double w = 80 + 50.0 * static_cast<double>(labels.size()), h = 320, mb = 90, mt = 30;
  std::ofstream os(path);
  require(os.good(), ErrorCode::kIo, "cannot write " + path.string());
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"40\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">" << title << "</text>\n";
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double v = std::isfinite(values[i]) ? std::clamp(values[i], 0.0, 1.0) : 0.0;
    const double bh = v * (h - mt - mb), x = 50 + 50.0 * static_cast<double>(i);
    os << "<rect x=\"" << x << "\" y=\"" << h - mb - bh << "\" width=\"36\" height=\"" << short_fmt(bh)
       << "\" fill=\"" << kPalette[0] << "\"/>\n";
    os << "<text x=\"" << x << "\" y=\"" << h - mb - bh - 4 << "\" font-size=\"10\">" << short_fmt(values[i])
       << "</text>\n";
    os << "<text x=\"" << x + 10 << "\" y=\"" << h - mb + 12 << "\" font-size=\"10\" transform=\"rotate(60 " << x + 10
       << ' ' << h - mb + 12 << ")\">" << labels[i] << "</text>\n";
  }
  os << "</svg>\n";
}

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  std::ofstream os(path);
  require(os.good(), ErrorCode::kIo, "cannot write " + path.string());
  for (std::size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
  os << '\n';
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << r[i];
    os << '\n';
  }
}

int count_modalities(const CsvTable& t) {
  int m = 0;
  while (t.column("w_" + std::to_string(m)) >= 0) ++m;
  return m;
}

std::vector<std::string> plot_runlog(const CsvTable& t, const std::filesystem::path& out) {
  const std::vector<std::string> losses = {"L_fuse", "L_sep", "L_rel", "L_proto", "total"};
  std::vector<std::string> need = {"step"};
  need.insert(need.end(), losses.begin(), losses.end());
  const int m_count = count_modalities(t);
  require(m_count > 0, ErrorCode::kFormat, "run log is missing column(s): w_0");
  const std::vector<std::string> fields = {"present", "w", "gamma", "g_total", "ema_gr", "ema_gp", "sim", "damped"};
  for (int m = 0; m < m_count; ++m)
    for (const auto& f : fields) need.push_back(f + "_" + std::to_string(m));
  require_columns(t, need, "run log");

  const int cs = t.column("step");
  auto project = [&](const std::vector<std::string>& cols) {
    std::vector<std::vector<std::string>> rows;
    for (const auto& r : t.rows) {
      std::vector<std::string> row = {r.at(cs)};
      for (const auto& c : cols) row.push_back(r.at(t.column(c)));
      rows.push_back(std::move(row));
    }
    return rows;
  };
  std::vector<std::string> written;
  auto header_with_step = [](std::vector<std::string> cols) {
    cols.insert(cols.begin(), "step");
    return cols;
  };

  write_csv(out / "losses.csv", header_with_step(losses), project(losses));
  written.push_back("losses.csv");
  for (const char* f : {"w", "gamma"}) {
    std::vector<std::string> cols;
    for (int m = 0; m < m_count; ++m) cols.push_back(std::string(f) + "_" + std::to_string(m));
    const std::string name = std::string(f == std::string("w") ? "weights" : "gammas") + ".csv";
    write_csv(out / name, header_with_step(cols), project(cols));
    written.push_back(name);
  }
  for (int m = 0; m < m_count; ++m) {
    std::vector<std::string> cols;
    for (const auto& f : fields) cols.push_back(f + "_" + std::to_string(m));
    const std::string name = "modality_" + std::to_string(m) + ".csv";
    write_csv(out / name, header_with_step(cols), project(cols));
    written.push_back(name);
  }

  const auto x = series(t, "step");
  std::vector<Series> ls;
  for (const auto& l : losses) ls.push_back({l, series(t, l)});
  write_line_svg(out / "losses.svg", "losses", x, ls);
  written.push_back("losses.svg");
  for (const char* f : {"w", "gamma", "g_total"}) {
    std::vector<Series> s;
    for (int m = 0; m < m_count; ++m) {
      // Absent steps carry no value for the modality; leave gaps in the line.
      auto y = series(t, std::string(f) + "_" + std::to_string(m));
      const auto present = series(t, "present_" + std::to_string(m));
      if (std::string(f) != "g_total")
        for (std::size_t i = 0; i < y.size(); ++i)
          if (present[i] == 0) y[i] = std::nan("");
      s.push_back({"m" + std::to_string(m), y});
    }
    const std::string name = std::string(f) + ".svg";
    write_line_svg(out / name, f, x, s);
    written.push_back(name);
  }
  return written;
}

std::vector<std::string> plot_combinations(const CsvTable& t, const std::filesystem::path& out) {
  require_columns(t, {"combination", "n_samples", "macro_dsc"}, "combination table");
  write_csv(out / "combination_table.csv", t.columns, t.rows);
  std::vector<std::string> labels;
  for (const auto& r : t.rows) labels.push_back(r.at(t.column("combination")));
  write_bar_svg(out / "combinations.svg", "macro DSC per modality combination", labels, series(t, "macro_dsc"));
  return {"combination_table.csv", "combinations.svg"};
}

}  // namespace

int CsvTable::column(const std::string& name) const {
  auto it = std::find(columns.begin(), columns.end(), name);
  return it == columns.end() ? -1 : static_cast<int>(it - columns.begin());
}

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  require(is.good(), ErrorCode::kIo, "cannot open " + path.string());
  CsvTable t;
  std::string line;
  require(static_cast<bool>(std::getline(is, line)), ErrorCode::kFormat, path.string() + " is empty");
  t.columns = split(line);
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto row = split(line);
    require(row.size() == t.columns.size(), ErrorCode::kFormat,
            path.string() + ":" + std::to_string(lineno) + " has " + std::to_string(row.size()) + " fields, expected " +
                std::to_string(t.columns.size()));
    t.rows.push_back(std::move(row));
  }
  return t;
}

std::vector<std::string> plot(const std::filesystem::path& input, const std::filesystem::path& out_dir) {
  const auto t = read_csv(input);
  std::filesystem::create_directories(out_dir);
  auto written = t.column("combination") >= 0 ? plot_combinations(t, out_dir) : plot_runlog(t, out_dir);
  std::sort(written.begin(), written.end());
  return written;
}

}  // namespace dmaf::report
