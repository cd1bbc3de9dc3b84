#include "causnvs/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "causnvs/worldgen.hpp"

namespace causnvs {

namespace {

double mse_to_psnr(double mse) {
  if (mse < 1e-10) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

}  // namespace

double psnr(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("psnr: shape mismatch");
  double sse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = 0.5 * (a.data[i] - b.data[i]);
    sse += d * d;
  }
  return mse_to_psnr(sse / static_cast<double>(a.size()));
}

std::optional<double> masked_psnr(const Image& a, const Image& b,
                                  const Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>& mask) {
  if (!a.same_shape(b) || mask.rows() != a.height || mask.cols() != a.width) {
    throw std::invalid_argument("masked_psnr: shape mismatch");
  }
  double sse = 0.0;
  std::size_t n = 0;
  for (int y = 0; y < a.height; ++y) {
    for (int x = 0; x < a.width; ++x) {
      if (!mask(y, x)) continue;
      for (int c = 0; c < 3; ++c) {
        const double d = 0.5 * (a.at(y, x, c) - b.at(y, x, c));
        sse += d * d;
      }
      n += 3;
    }
  }
  if (n == 0) return std::nullopt;
  return mse_to_psnr(sse / static_cast<double>(n));
}

std::optional<double> warp_consistency(const Image& gen_i, const Image& gen_j, const RowMat& gt_depth_i,
                                       const Pose& pose_i, const Pose& pose_j, const Intrinsics& intrinsics) {
  const WarpResult w = warp(gen_i, gt_depth_i, pose_i, pose_j, intrinsics);
  return masked_psnr(w.image, gen_j, w.mask);
}

double drift_curve(const std::vector<double>& y) {
  if (y.size() < 4) throw std::invalid_argument("drift_curve: need at least 4 frames");
  const double n = static_cast<double>(y.size());
  const double xm = (n - 1.0) / 2.0;
  const double ym = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0;
  double sxx = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double dx = static_cast<double>(i) - xm;
    sxy += dx * (y[i] - ym);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

EvalReport EvalReport::from_frames(std::string run_id, std::vector<double> per_frame_psnr,
                                   const std::vector<std::optional<double>>& warp_psnr, nlohmann::json config) {
  EvalReport r;
  r.run_id = std::move(run_id);
  r.per_frame_psnr = std::move(per_frame_psnr);
  r.config = std::move(config);
  if (!r.per_frame_psnr.empty()) {
    r.mean_psnr = std::accumulate(r.per_frame_psnr.begin(), r.per_frame_psnr.end(), 0.0) /
                  static_cast<double>(r.per_frame_psnr.size());
  }
  double sum = 0.0;
  int n = 0;
  for (const auto& w : warp_psnr) {
    if (w) sum += *w, ++n;
  }
  if (n > 0) r.warp_consistency_mean = sum / n;
  if (r.per_frame_psnr.size() >= 4) r.drift_slope = drift_curve(r.per_frame_psnr);
  return r;
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"run_id", r.run_id}, {"per_frame_psnr", r.per_frame_psnr}, {"mean_psnr", r.mean_psnr}, {"config", r.config}};
  j["warp_consistency_mean"] = r.warp_consistency_mean ? nlohmann::json(*r.warp_consistency_mean) : nlohmann::json();
  j["drift_slope"] = r.drift_slope ? nlohmann::json(*r.drift_slope) : nlohmann::json();
}

std::string metrics_csv_header() { return "run_id,model,mode,N,F,frame_idx,psnr,warp_psnr"; }

std::string to_csv_line(const MetricsRow& r) {
  std::ostringstream os;
  os << r.run_id << ',' << r.model << ',' << r.mode << ',' << r.n_inputs << ',' << r.frames << ',' << r.frame_idx
     << ',' << format_double(r.psnr) << ',' << (r.warp_psnr ? format_double(*r.warp_psnr) : std::string());
  return os.str();
}

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out = metrics_csv_header() + "\n";
  for (const auto& r : rows) out += to_csv_line(r) + "\n";
  return out;
}

std::vector<MetricsRow> parse_metrics_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != metrics_csv_header()) {
    throw std::invalid_argument("metrics.csv: missing or unexpected header");
  }
  std::vector<MetricsRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 8) throw std::invalid_argument("metrics.csv: expected 8 fields");
    MetricsRow r;
    r.run_id = f[0];
    r.model = f[1];
    r.mode = f[2];
    r.n_inputs = std::stoi(f[3]);
    r.frames = std::stoi(f[4]);
    r.frame_idx = std::stoi(f[5]);
    r.psnr = std::stod(f[6]);
    if (!f[7].empty()) r.warp_psnr = std::stod(f[7]);
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Ablation table

std::optional<double> AblationTable::get(const std::string& mode, int n, int f) const {
  auto it = cells.find({mode, n, f});
  if (it == cells.end()) return std::nullopt;
  return it->second;
}

std::optional<double> AblationTable::reference(const std::string& mode, int n, int f) {
  // Published RealEstate10K PSNR for the 915M-parameter models.
  static const std::map<AblationKey, double> ref = {
      {{"causal-AR", 1, 2}, 16.56},          {{"causal-AR", 1, 4}, 17.25},          {{"causal-AR", 1, 8}, 18.08},
      {{"causal-AR", 1, 32}, 17.44},         {{"causal-AR", 1, 64}, 16.98},         {{"causal-AR", 2, 4}, 19.52},
      {{"causal-AR", 2, 8}, 20.40},          {{"causal-AR", 2, 32}, 21.10},         {{"causal-AR", 2, 64}, 19.31},
      {{"causal-AR", 4, 8}, 23.27},          {{"causal-AR", 4, 32}, 24.55},         {{"causal-AR", 4, 64}, 23.35},
      {{"causal-AR", 16, 32}, 28.13},        {{"causal-AR", 16, 64}, 27.64},        {{"noncausal-parallel", 1, 2}, 9.84},
      {{"noncausal-parallel", 1, 4}, 13.15}, {{"noncausal-parallel", 1, 8}, 17.52}, {{"noncausal-parallel", 1, 32}, 19.27},
      {{"noncausal-parallel", 1, 64}, 18.15}, {{"noncausal-parallel", 2, 4}, 18.38},
      {{"noncausal-parallel", 2, 8}, 20.61}, {{"noncausal-parallel", 2, 32}, 21.86},
      {{"noncausal-parallel", 2, 64}, 21.42}, {{"noncausal-parallel", 4, 8}, 23.97},
      {{"noncausal-parallel", 4, 32}, 25.12}, {{"noncausal-parallel", 4, 64}, 24.29},
      {{"noncausal-parallel", 16, 32}, 28.56}, {{"noncausal-parallel", 16, 64}, 27.64},
      {{"noncausal-AR", 2, 8}, 13.62},
  };
  auto it = ref.find({mode, n, f});
  if (it == ref.end()) return std::nullopt;
  return it->second;
}

std::string AblationTable::to_csv() const {
  std::ostringstream os;
  os << "mode,N,F,psnr,reference\n";
  for (const auto& m : modes) {
    for (int n : inputs) {
      for (int f : frame_counts) {
        const auto v = get(m, n, f);
        const auto r = reference(m, n, f);
        os << m << ',' << n << ',' << f << ',' << (v ? format_double(*v) : "--") << ','
           << (r ? format_double(*r) : "--") << '\n';
      }
    }
  }
  return os.str();
}

AblationTable AblationTable::from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "mode,N,F,psnr,reference") {
    throw std::invalid_argument("ablation csv: unexpected header");
  }
  AblationTable t;
  t.modes.clear();
  t.inputs.clear();
  t.frame_counts.clear();
  auto add_unique = [](auto& v, const auto& x) {
    if (std::find(v.begin(), v.end(), x) == v.end()) v.push_back(x);
  };
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 5) throw std::invalid_argument("ablation csv: expected 5 fields");
    const int n = std::stoi(f[1]);
    const int fr = std::stoi(f[2]);
    add_unique(t.modes, f[0]);
    add_unique(t.inputs, n);
    add_unique(t.frame_counts, fr);
    if (f[3] != "--") t.cells[{f[0], n, fr}] = std::stod(f[3]);
  }
  return t;
}

std::string AblationTable::to_text() const {
  auto cell = [](std::optional<double> v, std::optional<double> r) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    if (v) {
      os << *v;
    } else {
      os << "--";
    }
    os << " (";
    if (r) {
      os << *r;
    } else {
      os << "--";
    }
    os << ")";
    return os.str();
  };
  std::ostringstream os;
  os << std::left << std::setw(20) << "mode" << std::setw(4) << "N";
  for (int f : frame_counts) os << std::setw(18) << ("F=" + std::to_string(f));
  os << '\n';
  for (const auto& m : modes) {
    for (int n : inputs) {
      os << std::left << std::setw(20) << m << std::setw(4) << n;
      for (int f : frame_counts) os << std::setw(18) << cell(get(m, n, f), reference(m, n, f));
      os << '\n';
    }
  }
  os << "cells: ours (published reference)\n";
  return os.str();
}

AblationTable ablation_table(const std::map<AblationKey, EvalReport>& runs) {
  AblationTable t;
  for (const auto& [key, report] : runs) {
    t.cells[key] = report.mean_psnr;
    auto add_unique = [](auto& v, const auto& x) {
      if (std::find(v.begin(), v.end(), x) == v.end()) v.push_back(x);
    };
    add_unique(t.modes, key.mode);
    add_unique(t.inputs, key.n_inputs);
    add_unique(t.frame_counts, key.frames);
  }
  std::sort(t.inputs.begin(), t.inputs.end());
  std::sort(t.frame_counts.begin(), t.frame_counts.end());
  return t;
}

}  // namespace causnvs
