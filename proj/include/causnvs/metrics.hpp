#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "causnvs/geometry.hpp"
#include "causnvs/image.hpp"
#include "causnvs/types.hpp"
#include "json.hpp"

namespace causnvs {

constexpr double kPsnrCap = 99.0;

/// Images in [-1, 1] are compared on [0, 1]; 99 dB when MSE < 1e-10.
double psnr(const Image& a, const Image& b);

/// PSNR over the pixels where mask is true; nullopt when the mask is empty.
std::optional<double> masked_psnr(const Image& a, const Image& b,
                                  const Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>& mask);

/// Warps gen_i into view j through the ground-truth depth of view i and
/// scores it against gen_j on the covered pixels. Poses are in the units of
/// the depth map. nullopt when nothing lands in view j.
std::optional<double> warp_consistency(const Image& gen_i, const Image& gen_j, const RowMat& gt_depth_i,
                                       const Pose& pose_i, const Pose& pose_j, const Intrinsics& intrinsics);

/// Least-squares slope of PSNR against frame index (dB / frame). Needs >= 4 values.
double drift_curve(const std::vector<double>& per_frame_psnr);

struct EvalReport {
  std::string run_id;
  std::vector<double> per_frame_psnr;
  double mean_psnr = 0.0;
  std::optional<double> warp_consistency_mean;
  std::optional<double> drift_slope;  // present when there are >= 4 frames
  nlohmann::json config;

  static EvalReport from_frames(std::string run_id, std::vector<double> per_frame_psnr,
                                const std::vector<std::optional<double>>& warp_psnr, nlohmann::json config);
};

void to_json(nlohmann::json& j, const EvalReport& r);

/// One row of metrics.csv.
struct MetricsRow {
  std::string run_id;
  std::string model;
  std::string mode;
  int n_inputs = 0;
  int frames = 0;
  int frame_idx = 0;
  double psnr = 0.0;
  std::optional<double> warp_psnr;
};

std::string metrics_csv_header();
std::string to_csv_line(const MetricsRow& row);
std::string metrics_csv(const std::vector<MetricsRow>& rows);
/// Parses text produced by metrics_csv (header required).
std::vector<MetricsRow> parse_metrics_csv(const std::string& text);

/// Ablation grid: rows {causal-AR, noncausal-parallel, noncausal-AR} x N,
/// columns F; cells are mean PSNR.
struct AblationKey {
  std::string mode;  // "causal-AR", "noncausal-parallel", "noncausal-AR"
  int n_inputs = 1;
  int frames = 8;
  auto operator<=>(const AblationKey&) const = default;
};

struct AblationTable {
  std::map<AblationKey, double> cells;
  std::vector<std::string> modes = {"causal-AR", "noncausal-parallel", "noncausal-AR"};
  std::vector<int> inputs = {1, 2, 4};
  std::vector<int> frame_counts = {2, 4, 8, 32};

  std::optional<double> get(const std::string& mode, int n, int f) const;
  /// Published reference value for the same cell, when one exists.
  static std::optional<double> reference(const std::string& mode, int n, int f);
  /// mode,N,F,psnr,reference (missing cells as "--").
  std::string to_csv() const;
  static AblationTable from_csv(const std::string& text);
  /// Aligned text table; each cell shows "ours (ref)".
  std::string to_text() const;
};

AblationTable ablation_table(const std::map<AblationKey, EvalReport>& runs);

}  // namespace causnvs
