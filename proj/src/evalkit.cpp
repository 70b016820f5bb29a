#include "jrs/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace jrs {

SurfacePointSet extract_surface(const Mask& mask, const Vec3& sp, const Vec3& org) {
  const Dims3 d = mask.dims;
  SurfacePointSet s;
  auto bg = [&](int x, int y, int z) {
    if (x < 0 || y < 0 || z < 0 || x >= d.x || y >= d.y || z >= d.z) return true;
    return mask.at(x, y, z) == 0;
  };
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x) {
        if (!mask.at(x, y, z)) continue;
        if (bg(x - 1, y, z) || bg(x + 1, y, z) || bg(x, y - 1, z) || bg(x, y + 1, z) || bg(x, y, z - 1) ||
            bg(x, y, z + 1))
          s.points.push_back({org[0] + x * sp[0], org[1] + y * sp[1], org[2] + z * sp[2]});
      }
  if (s.points.empty()) throw std::invalid_argument("extract_surface: empty mask");
  return s;
}

std::vector<double> directed_distances(const SurfacePointSet& a, const SurfacePointSet& b) {
  if (a.points.empty() || b.points.empty()) throw std::invalid_argument("surface distance of an empty point set");
  // b sorted by x; scan outward from each query and stop once dx^2 alone exceeds the best
  std::vector<Vec3> sb = b.points;
  std::sort(sb.begin(), sb.end(), [](const Vec3& p, const Vec3& q) { return p[0] < q[0]; });
  std::vector<double> out(a.points.size());
  for (std::size_t i = 0; i < a.points.size(); ++i) {
    const Vec3& p = a.points[i];
    const auto mid = std::lower_bound(sb.begin(), sb.end(), p[0], [](const Vec3& q, double v) { return q[0] < v; });
    double best = INFINITY;
    auto d2 = [&](const Vec3& q) {
      const double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
      return dx * dx + dy * dy + dz * dz;
    };
    for (auto it = mid; it != sb.end(); ++it) {
      const double dx = (*it)[0] - p[0];
      if (dx * dx > best) break;
      best = std::min(best, d2(*it));
    }
    for (auto it = mid; it != sb.begin();) {
      --it;
      const double dx = p[0] - (*it)[0];
      if (dx * dx > best) break;
      best = std::min(best, d2(*it));
    }
    out[i] = std::sqrt(best);
  }
  return out;
}

double msd(const SurfacePointSet& a, const SurfacePointSet& b) {
  const auto ab = directed_distances(a, b), ba = directed_distances(b, a);
  const double mab = std::accumulate(ab.begin(), ab.end(), 0.0) / ab.size();
  const double mba = std::accumulate(ba.begin(), ba.end(), 0.0) / ba.size();
  return 0.5 * (mab + mba);
}

double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw std::invalid_argument("percentile of an empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * (v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  if (lo + 1 >= v.size()) return v.back();
  return v[lo] + (pos - lo) * (v[lo + 1] - v[lo]);
}

double hd95(const SurfacePointSet& a, const SurfacePointSet& b) {
  return std::max(percentile(directed_distances(a, b), 0.95), percentile(directed_distances(b, a), 0.95));
}

double dice_score(const Mask& a, const Mask& b) {
  if (!(a.dims == b.dims)) throw std::invalid_argument("dice_score: dims mismatch");
  std::size_t inter = 0, sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    inter += a.data[i] && b.data[i];
    sa += a.data[i] != 0;
    sb += b.data[i] != 0;
  }
  return sa + sb == 0 ? 1.0 : 2.0 * inter / static_cast<double>(sa + sb);
}

double jacobian_std(const DVF& dvf) {
  const Volume j = jacobian_determinant(dvf);
  double s = 0.0, q = 0.0;
  for (float v : j.data) s += v;
  const double mean = s / j.data.size();
  for (float v : j.data) q += (v - mean) * (v - mean);
  return std::sqrt(q / j.data.size());
}

// --- Wilcoxon -----------------------------------------------------------------------

double wilcoxon_signed_rank(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("wilcoxon: samples must be paired");
  std::vector<double> d;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] != y[i]) d.push_back(x[i] - y[i]);
  const std::size_t n = d.size();
  if (n == 0) return 1.0;
  if (n < 5) throw std::invalid_argument("wilcoxon: fewer than 5 non-zero differences");

  // average ranks of |d|, doubled so tied ranks stay integral
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return std::abs(d[a]) < std::abs(d[b]); });
  std::vector<long> rank2(n);
  double tie_term = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    const long r2 = static_cast<long>(i + j + 2);  // 2 * mean of ranks i+1..j+1
    for (std::size_t k = i; k <= j; ++k) rank2[order[k]] = r2;
    const double t = static_cast<double>(j - i + 1);
    tie_term += t * t * t - t;
    i = j + 1;
  }
  long w2 = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (d[i] > 0) w2 += rank2[i];

  if (n <= 12) {
    std::size_t le = 0, ge = 0;
    const std::size_t total = std::size_t{1} << n;
    for (std::size_t mask = 0; mask < total; ++mask) {
      long w = 0;
      for (std::size_t i = 0; i < n; ++i)
        if (mask >> i & 1) w += rank2[i];
      le += w <= w2;
      ge += w >= w2;
    }
    return std::min(1.0, 2.0 * static_cast<double>(std::min(le, ge)) / static_cast<double>(total));
  }
  const double nn = static_cast<double>(n);
  const double mean = nn * (nn + 1) / 4.0;
  const double var = nn * (nn + 1) * (2 * nn + 1) / 24.0 - tie_term / 48.0;
  if (var <= 0.0) return 1.0;
  const double z = (w2 / 2.0 - mean) / std::sqrt(var);
  return std::min(1.0, std::erfc(std::abs(z) / std::sqrt(2.0)));
}

// --- Per-case evaluation --------------------------------------------------------------

CaseResult evaluate_case(const std::string& case_id, const Segmentation& pred, const Segmentation& ref, const DVF* dvf,
                         double runtime_s) {
  if (!(pred.dims == ref.dims)) throw Error("evaluate: prediction and reference grids differ for case " + case_id);
  CaseResult r;
  r.case_id = case_id;
  r.runtime_s = runtime_s;
  for (const auto& [id, name] : ref.label_names) {
    if (id == 0) continue;
    int pid = id;
    for (const auto& [k, v] : pred.label_names)
      if (v == name) pid = k;
    const Mask a = label_mask(pred, pid), b = label_mask(ref, id);
    OrganMetrics m;
    m.dice = dice_score(a, b);
    if (a.count() == 0 || b.count() == 0) {
      m.msd_mm = m.hd95_mm = NAN;  // organ missing on one side
    } else {
      const auto sa = extract_surface(a, ref.spacing), sb = extract_surface(b, ref.spacing);
      m.msd_mm = msd(sa, sb);
      m.hd95_mm = hd95(sa, sb);
    }
    r.organs[name] = m;
  }
  if (dvf) r.dvf_jac_std = jacobian_std(*dvf);
  return r;
}

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

}  // namespace

void write_results_csv(const std::vector<CaseResult>& results, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "case_id,organ,metric,value\n";
  for (const auto& r : results) {
    for (const auto& [organ, m] : r.organs) {
      out << r.case_id << ',' << organ << ",msd," << fmt(m.msd_mm) << '\n';
      out << r.case_id << ',' << organ << ",hd95," << fmt(m.hd95_mm) << '\n';
      out << r.case_id << ',' << organ << ",dice," << fmt(m.dice) << '\n';
    }
    out << r.case_id << ",all,jac_std," << fmt(r.dvf_jac_std) << '\n';
    out << r.case_id << ",all,runtime_s," << fmt(r.runtime_s) << '\n';
  }
}

std::vector<CaseResult> read_results_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("case_id,organ,metric,value", 0) != 0) throw Error(path.string() + ": unexpected CSV header");
  std::vector<CaseResult> out;
  std::map<std::string, std::size_t> index;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 4) throw Error(path.string() + ":" + std::to_string(lineno) + ": expected 4 columns");
    double v;
    try {
      v = std::stod(f[3]);
    } catch (const std::exception&) {
      throw Error(path.string() + ":" + std::to_string(lineno) + ": bad value '" + f[3] + "'");
    }
    auto [it, fresh] = index.try_emplace(f[0], out.size());
    if (fresh) out.push_back(CaseResult{f[0], {}, 0.0, 0.0});
    CaseResult& r = out[it->second];
    if (f[2] == "jac_std") r.dvf_jac_std = v;
    else if (f[2] == "runtime_s") r.runtime_s = v;
    else if (f[2] == "msd") r.organs[f[1]].msd_mm = v;
    else if (f[2] == "hd95") r.organs[f[1]].hd95_mm = v;
    else if (f[2] == "dice") r.organs[f[1]].dice = v;
    else throw Error(path.string() + ":" + std::to_string(lineno) + ": unknown metric '" + f[2] + "'");
  }
  return out;
}

// --- Tables ---------------------------------------------------------------------------

namespace {

struct Stats {
  double mean = 0.0, std = 0.0;
};

Stats stats(std::span<const double> v) {
  Stats s;
  if (v.empty()) return s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
  if (v.size() > 1) {
    double q = 0.0;
    for (double x : v) q += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(q / (v.size() - 1));
  }
  return s;
}

double metric_of(const CaseResult& r, const std::string& organ, const std::string& metric) {
  if (metric == "jac_std") return r.dvf_jac_std;
  const auto it = r.organs.find(organ);
  if (it == r.organs.end()) throw Error("case " + r.case_id + " has no organ " + organ);
  if (metric == "msd") return it->second.msd_mm;
  if (metric == "hd95") return it->second.hd95_mm;
  return it->second.dice;
}

const char* const kMarkers[] = {"†", "‡", "§", "¶"};

std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

}  // namespace

std::string format_cell(std::span<const double> values, const std::string& metric) {
  const Stats s = stats(values);
  char buf[64];
  if (metric == "msd") std::snprintf(buf, sizeof(buf), "%.2f ± %.1f", s.mean, s.std);
  else if (metric == "hd95") std::snprintf(buf, sizeof(buf), "%.1f ± %.1f", s.mean, s.std);
  else std::snprintf(buf, sizeof(buf), "%.2f ± %.2f", s.mean, s.std);
  return buf;
}

ReportTables report_tables(const std::vector<MethodResults>& methods, const std::vector<std::string>& baseline_ids) {
  if (methods.empty()) throw Error("report: no result sets");
  if (baseline_ids.size() > 4) throw Error("report: at most 4 baselines");
  // identical case sets, in a common order
  std::vector<std::string> case_ids;
  for (const auto& c : methods[0].cases) case_ids.push_back(c.case_id);
  std::sort(case_ids.begin(), case_ids.end());
  std::vector<std::map<std::string, const CaseResult*>> lookup(methods.size());
  for (std::size_t m = 0; m < methods.size(); ++m) {
    std::vector<std::string> ids;
    for (const auto& c : methods[m].cases) {
      ids.push_back(c.case_id);
      lookup[m][c.case_id] = &c;
    }
    std::sort(ids.begin(), ids.end());
    if (ids != case_ids) throw Error("report: method " + methods[m].method + " was evaluated on a different case set");
  }
  std::vector<std::size_t> baseline_index;
  for (const auto& b : baseline_ids) {
    auto it = std::find_if(methods.begin(), methods.end(), [&](const MethodResults& r) { return r.method == b; });
    if (it == methods.end()) throw Error("report: unknown baseline '" + b + "'");
    baseline_index.push_back(static_cast<std::size_t>(it - methods.begin()));
  }
  std::set<std::string> organ_set;
  for (const auto& c : methods[0].cases)
    for (const auto& [o, m] : c.organs) organ_set.insert(o);
  const std::vector<std::string> organs(organ_set.begin(), organ_set.end());

  auto column = [&](std::size_t m, const std::string& organ, const std::string& metric) {
    std::vector<double> v;
    for (const auto& id : case_ids) v.push_back(metric_of(*lookup[m].at(id), organ, metric));
    return v;
  };

  ReportTables out;
  out.csv = "metric,method,organ,mean,std,cell,significant_vs\n";
  const std::pair<const char*, const char*> tables[] = {
      {"msd", "MSD (mm)"}, {"hd95", "95% HD (mm)"}, {"dice", "Dice"}};
  for (const auto& [metric, title] : tables) {
    const bool higher_better = std::string(metric) == "dice";
    std::vector<std::vector<std::string>> cells(methods.size(), std::vector<std::string>(organs.size()));
    for (std::size_t o = 0; o < organs.size(); ++o) {
      std::vector<double> means(methods.size());
      for (std::size_t m = 0; m < methods.size(); ++m) means[m] = stats(column(m, organs[o], metric)).mean;
      const auto best = higher_better ? std::max_element(means.begin(), means.end())
                                      : std::min_element(means.begin(), means.end());
      for (std::size_t m = 0; m < methods.size(); ++m) {
        const auto v = column(m, organs[o], metric);
        std::string cell = format_cell(v, metric);
        const Stats s = stats(v);
        std::string markers, against;
        for (std::size_t b = 0; b < baseline_index.size(); ++b) {
          if (baseline_index[b] == m) continue;
          double p = 1.0;
          try {
            p = wilcoxon_signed_rank(v, column(baseline_index[b], organs[o], metric));
          } catch (const std::invalid_argument&) {
            p = 1.0;  // too few non-zero differences to test
          }
          if (p < 0.05) {
            markers += kMarkers[b];
            against += (against.empty() ? "" : ";") + baseline_ids[b];
          }
        }
        if (means[m] == *best) cell = "**" + cell + "**";
        cells[m][o] = cell + markers;
        char num[64];
        std::snprintf(num, sizeof(num), "%.10g,%.10g", s.mean, s.std);
        out.csv += std::string(metric) + "," + csv_quote(methods[m].method) + "," + organs[o] + "," + num + "," +
                   csv_quote(cells[m][o]) + "," + against + "\n";
      }
    }
    out.text += title;
    out.text += "\n";
    std::string header = "method";
    for (const auto& o : organs) header += " | " + o;
    out.text += header + "\n";
    for (std::size_t m = 0; m < methods.size(); ++m) {
      std::string row = methods[m].method;
      for (const auto& c : cells[m]) row += " | " + c;
      out.text += row + "\n";
    }
    out.text += "\n";
  }
  if (!baseline_ids.empty()) {
    out.text += "Markers: p < 0.05 (Wilcoxon signed-rank) against";
    for (std::size_t b = 0; b < baseline_ids.size(); ++b)
      out.text += std::string(b ? "," : "") + " " + kMarkers[b] + " " + baseline_ids[b];
    out.text += "\n";
  }
  return out;
}

// --- Plots ---------------------------------------------------------------------------------

std::vector<std::filesystem::path> emit_plots(const std::vector<MethodResults>& methods,
                                              const std::filesystem::path& out_dir) {
  if (methods.empty()) throw Error("emit_plots: no result sets");
  std::filesystem::create_directories(out_dir);
  std::set<std::string> organs;
  for (const auto& m : methods)
    for (const auto& c : m.cases)
      for (const auto& [o, v] : c.organs) organs.insert(o);

  std::vector<std::filesystem::path> written;
  const double W = 120.0 * methods.size() + 80.0, H = 320.0, top = 30.0, bottom = 260.0;
  for (const auto& organ : organs) {
    std::vector<std::vector<double>> data;
    double hi = 0.0;
    for (const auto& m : methods) {
      std::vector<double> v;
      for (const auto& c : m.cases)
        if (auto it = c.organs.find(organ); it != c.organs.end() && std::isfinite(it->second.msd_mm))
          v.push_back(it->second.msd_mm);
      for (double x : v) hi = std::max(hi, x);
      data.push_back(std::move(v));
    }
    if (hi <= 0.0) hi = 1.0;
    auto ypix = [&](double v) { return bottom - (bottom - top) * v / (hi * 1.1); };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
    svg << "<text x=\"10\" y=\"18\" font-family=\"sans-serif\" font-size=\"14\">MSD (mm): " << organ << "</text>\n";
    svg << "<line x1=\"50\" y1=\"" << top << "\" x2=\"50\" y2=\"" << bottom << "\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 4; ++t) {
      const double v = hi * 1.1 * t / 4.0;
      svg << "<text x=\"5\" y=\"" << ypix(v) + 4 << "\" font-family=\"sans-serif\" font-size=\"10\">";
      char b[32];
      std::snprintf(b, sizeof(b), "%.2f", v);
      svg << b << "</text>\n";
    }
    for (std::size_t m = 0; m < methods.size(); ++m) {
      const double cx = 80.0 + 120.0 * m + 40.0;
      svg << "<text x=\"" << cx - 40 << "\" y=\"" << bottom + 20
          << "\" font-family=\"sans-serif\" font-size=\"11\">" << methods[m].method << "</text>\n";
      const auto& v = data[m];
      if (v.empty()) continue;
      const double q1 = percentile(v, 0.25), q2 = percentile(v, 0.5), q3 = percentile(v, 0.75);
      const double iqr = q3 - q1;
      double wlo = q1, whi = q3;
      for (double x : v) {
        if (x >= q1 - 1.5 * iqr) wlo = std::min(wlo, x);
        if (x <= q3 + 1.5 * iqr) whi = std::max(whi, x);
      }
      svg << "<rect x=\"" << cx - 25 << "\" y=\"" << ypix(q3) << "\" width=\"50\" height=\"" << ypix(q1) - ypix(q3)
          << "\" fill=\"#cfe0f3\" stroke=\"black\"/>\n";
      svg << "<line x1=\"" << cx - 25 << "\" y1=\"" << ypix(q2) << "\" x2=\"" << cx + 25 << "\" y2=\"" << ypix(q2)
          << "\" stroke=\"black\" stroke-width=\"2\"/>\n";
      svg << "<line x1=\"" << cx << "\" y1=\"" << ypix(q3) << "\" x2=\"" << cx << "\" y2=\"" << ypix(whi)
          << "\" stroke=\"black\"/>\n";
      svg << "<line x1=\"" << cx << "\" y1=\"" << ypix(q1) << "\" x2=\"" << cx << "\" y2=\"" << ypix(wlo)
          << "\" stroke=\"black\"/>\n";
      for (double x : v)
        if (x < wlo || x > whi)
          svg << "<circle cx=\"" << cx << "\" cy=\"" << ypix(x) << "\" r=\"3\" fill=\"none\" stroke=\"black\"/>\n";
    }
    svg << "</svg>\n";
    const auto path = out_dir / ("boxplot_msd_" + organ + ".svg");
    std::ofstream(path) << svg.str();
    written.push_back(path);
  }
  return written;
}

void write_heatmap(const Volume& a, const Volume& b, int z, const std::filesystem::path& path) {
  if (!(a.dims == b.dims)) throw Error("heatmap: volumes differ in size");
  if (z < 0 || z >= a.dims.z) throw Error("heatmap: slice out of range");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "P5\n" << a.dims.x << ' ' << a.dims.y << "\n255\n";
  for (int y = 0; y < a.dims.y; ++y)
    for (int x = 0; x < a.dims.x; ++x) {
      const double d = std::min(2.0, std::abs(static_cast<double>(a.at(x, y, z)) - b.at(x, y, z)));
      out.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * d / 2.0))));
    }
}

}  // namespace jrs
