#pragma once

#include "core.hpp"
#include "csv.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <vector>

namespace tmd {

struct MetricReport {
  double nmae = 0.0;
  double nrmse = 0.0;
  std::vector<double> tre;  // NaN for slots with zero reference column sum
  double mmd2 = std::numeric_limits<double>::quiet_NaN();
  long observed_count = 0;
  long unobserved_count = 0;
};

struct KernelConfig {
  std::optional<double> bandwidth;  // fixed sigma; empty = median heuristic
};

// Errors are evaluated where mask = 0 (the pseudo-missing protocol).
inline double nmae(const Matrix& X, const Matrix& Xhat, const Matrix& mask) {
  require(X.rows() == Xhat.rows() && X.cols() == Xhat.cols() && X.rows() == mask.rows() &&
              X.cols() == mask.cols(),
          "nmae shape mismatch");
  double num = 0.0, den = 0.0;
  for (int i = 0; i < X.rows(); ++i)
    for (int j = 0; j < X.cols(); ++j)
      if (mask(i, j) < 0.5) {
        num += std::abs(X(i, j) - Xhat(i, j));
        den += std::abs(X(i, j));
      }
  require(den > 0, "nmae denominator is zero");
  return num / den;
}

inline double nrmse(const Matrix& X, const Matrix& Xhat, const Matrix& mask) {
  require(X.rows() == Xhat.rows() && X.cols() == Xhat.cols() && X.rows() == mask.rows() &&
              X.cols() == mask.cols(),
          "nrmse shape mismatch");
  double num = 0.0, den = 0.0;
  for (int i = 0; i < X.rows(); ++i)
    for (int j = 0; j < X.cols(); ++j)
      if (mask(i, j) < 0.5) {
        double d = X(i, j) - Xhat(i, j);
        num += d * d;
        den += X(i, j) * X(i, j);
      }
  require(den > 0, "nrmse denominator is zero");
  return std::sqrt(num) / std::sqrt(den);
}

// Per-slot relative absolute error; zero-reference slots yield NaN.
inline std::vector<double> tre(const Matrix& X, const Matrix& Xhat) {
  require(X.rows() == Xhat.rows() && X.cols() == Xhat.cols(), "tre shape mismatch");
  std::vector<double> out(X.cols());
  for (int j = 0; j < X.cols(); ++j) {
    double num = (X.col(j) - Xhat.col(j)).cwiseAbs().sum();
    double den = X.col(j).sum();
    out[j] = den > 0 ? num / den : std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

// Mean-aggregates consecutive groups of `group` slots; NaNs are dropped
// within a group, an all-NaN group stays NaN.
inline std::vector<double> aggregate_tre(const std::vector<double>& t, int group) {
  require(group > 0, "aggregation group must be positive");
  std::vector<double> out;
  for (size_t start = 0; start < t.size(); start += group) {
    double sum = 0.0;
    int n = 0;
    for (size_t j = start; j < std::min(t.size(), start + group); ++j)
      if (!std::isnan(t[j])) {
        sum += t[j];
        ++n;
      }
    out.push_back(n ? sum / n : std::numeric_limits<double>::quiet_NaN());
  }
  return out;
}

inline double median_heuristic_bandwidth(const std::vector<Vector>& pooled) {
  std::vector<double> d;
  for (size_t i = 0; i < pooled.size(); ++i)
    for (size_t j = i + 1; j < pooled.size(); ++j) {
      double dist = (pooled[i] - pooled[j]).norm();
      if (dist > 0) d.push_back(dist);
    }
  if (d.empty()) return 1.0;
  std::nth_element(d.begin(), d.begin() + d.size() / 2, d.end());
  return d[d.size() / 2];
}

// Unbiased MMD^2 estimator with Gaussian kernel exp(-||x-y||^2 / (2 sigma^2)).
inline double mmd2(const std::vector<Vector>& xs, const std::vector<Vector>& ys,
                   const KernelConfig& k = {}) {
  size_t n = xs.size(), m = ys.size();
  require(n >= 2 && m >= 2, "mmd2 needs at least 2 samples per set");
  double sigma;
  if (k.bandwidth) {
    sigma = *k.bandwidth;
    require(sigma > 0, "kernel bandwidth must be positive");
  } else {
    std::vector<Vector> pooled = xs;
    pooled.insert(pooled.end(), ys.begin(), ys.end());
    sigma = median_heuristic_bandwidth(pooled);
  }
  double inv = 1.0 / (2.0 * sigma * sigma);
  auto kern = [&](const Vector& a, const Vector& b) {
    return std::exp(-(a - b).squaredNorm() * inv);
  };
  double xx = 0.0, yy = 0.0, xy = 0.0;
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < n; ++j)
      if (i != j) xx += kern(xs[i], xs[j]);
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < m; ++j)
      if (i != j) yy += kern(ys[i], ys[j]);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < m; ++j) xy += kern(xs[i], ys[j]);
  return xx / (double(n) * (n - 1)) - 2.0 * xy / (double(m) * n) + yy / (double(m) * (m - 1));
}

// Std of the MMD^2 null distribution estimated by label permutation.
inline double mmd2_permutation_std(const std::vector<Vector>& xs, const std::vector<Vector>& ys,
                                   const KernelConfig& k, int permutations, std::uint64_t seed) {
  std::vector<Vector> pooled = xs;
  pooled.insert(pooled.end(), ys.begin(), ys.end());
  Rng rng(seed);
  std::vector<double> vals;
  for (int p = 0; p < permutations; ++p) {
    std::shuffle(pooled.begin(), pooled.end(), rng);
    std::vector<Vector> a(pooled.begin(), pooled.begin() + xs.size());
    std::vector<Vector> b(pooled.begin() + xs.size(), pooled.end());
    vals.push_back(mmd2(a, b, k));
  }
  double mean = 0.0;
  for (double v : vals) mean += v;
  mean /= vals.size();
  double var = 0.0;
  for (double v : vals) var += (v - mean) * (v - mean);
  var /= vals.size();
  return std::sqrt(var);
}

inline std::vector<Vector> flatten_windows(const std::vector<Matrix>& windows) {
  std::vector<Vector> out;
  out.reserve(windows.size());
  for (const auto& w : windows) {
    Vector v(w.size());
    int k = 0;
    for (int j = 0; j < w.cols(); ++j)
      for (int i = 0; i < w.rows(); ++i) v(k++) = w(i, j);
    out.push_back(std::move(v));
  }
  return out;
}

// CSV with a label column {real, synth} and one flattened window per row.
inline void export_flat_samples(const std::vector<Matrix>& real, const std::vector<Matrix>& synth,
                                const std::string& path) {
  auto rf = flatten_windows(real);
  auto sf = flatten_windows(synth);
  for (const auto& v : rf)
    require(rf.empty() || v.size() == rf[0].size(), "real windows have mixed dimensions");
  if (!rf.empty() && !sf.empty())
    require(rf[0].size() == sf[0].size(), "real/synth feature dimension mismatch");
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write file: " + path);
  out << std::setprecision(17);
  auto dump = [&](const char* label, const std::vector<Vector>& vs) {
    for (const auto& v : vs) {
      out << label;
      for (int i = 0; i < v.size(); ++i) out << ',' << v(i);
      out << '\n';
    }
  };
  dump("real", rf);
  dump("synth", sf);
}

inline void write_metric_report(const MetricReport& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write file: " + path);
  out << std::setprecision(17);
  out << "nmae=" << r.nmae << "\n";
  out << "nrmse=" << r.nrmse << "\n";
  out << "mmd2=" << r.mmd2 << "\n";
  out << "observed_count=" << r.observed_count << "\n";
  out << "unobserved_count=" << r.unobserved_count << "\n";
}

}  // namespace tmd
