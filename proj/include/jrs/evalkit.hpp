#pragma once

// Contour and deformation evaluation: surface distances, Dice, Jacobian
// spread, Wilcoxon signed-rank test, result tables and plots.

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "jrs/warpfield.hpp"

namespace jrs {

// Boundary voxel centers (6-connectivity, out-of-bounds counts as background), mm.
struct SurfacePointSet {
  std::vector<Vec3> points;
};

SurfacePointSet extract_surface(const Mask& mask, const Vec3& spacing, const Vec3& origin = {0, 0, 0});

// For every point of a, distance to the nearest point of b.
std::vector<double> directed_distances(const SurfacePointSet& a, const SurfacePointSet& b);

// Symmetric mean surface distance.
double msd(const SurfacePointSet& a, const SurfacePointSet& b);
// max of the two directed 95th percentiles (linear interpolation).
double hd95(const SurfacePointSet& a, const SurfacePointSet& b);
double percentile(std::vector<double> v, double q);

double dice_score(const Mask& a, const Mask& b);
// Population standard deviation of the Jacobian determinant.
double jacobian_std(const DVF& dvf);

// Two-sided p-value. Exact distribution for n <= 12 non-zero differences,
// tie-corrected normal approximation above. All-zero differences give 1;
// 1..4 non-zero differences throw std::invalid_argument.
double wilcoxon_signed_rank(std::span<const double> x, std::span<const double> y);

struct OrganMetrics {
  double msd_mm = 0.0;
  double hd95_mm = 0.0;
  double dice = 0.0;
};

struct CaseResult {
  std::string case_id;
  std::map<std::string, OrganMetrics> organs;
  double dvf_jac_std = 0.0;
  double runtime_s = 0.0;
};

// Per-organ metrics of `pred` against `ref` (labels matched by name).
CaseResult evaluate_case(const std::string& case_id, const Segmentation& pred, const Segmentation& ref,
                         const DVF* dvf = nullptr, double runtime_s = 0.0);

// CSV rows: case_id,organ,metric,value (organ "all" for jac_std and runtime_s).
void write_results_csv(const std::vector<CaseResult>& results, const std::filesystem::path& path);
std::vector<CaseResult> read_results_csv(const std::filesystem::path& path);

struct MethodResults {
  std::string method;
  std::vector<CaseResult> cases;
};

// "mean ± std" with sample std; precision per metric (msd: 2/1, hd95: 1/1,
// dice and jac_std: 2/2).
std::string format_cell(std::span<const double> values, const std::string& metric);

struct ReportTables {
  std::string text;
  std::string csv;
};

// One table per metric (msd, hd95, dice): rows are methods, columns organs.
// Daggers (†, ‡, §, ¶ for baselines 1..4) mark p < 0.05 against that
// baseline; the best mean per column is wrapped in ** **.
ReportTables report_tables(const std::vector<MethodResults>& methods, const std::vector<std::string>& baseline_ids);

// Per-organ MSD boxplots (SVG), one box per method. Returns written files.
std::vector<std::filesystem::path> emit_plots(const std::vector<MethodResults>& methods,
                                              const std::filesystem::path& out_dir);

// 8-bit PGM of |a - b| on axial slice z; pixel = round(255 * min(|d|, 2) / 2).
void write_heatmap(const Volume& a, const Volume& b, int z, const std::filesystem::path& path);

}  // namespace jrs
