#pragma once

#include "core.hpp"
#include "csv.hpp"
#include "data.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <vector>

namespace tmd {

// Per-step noise schedule. Index convention: t in 1..T are noisy states,
// t=0 is clean data and alpha_bar[0] = 1.
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> beta;           // beta[t], t in 1..T (beta[0] unused = 0)
  std::vector<double> alpha;          // alpha[t] = 1 - beta[t]
  std::vector<double> alpha_bar;      // running product, alpha_bar[0] = 1
  std::vector<double> posterior_var;  // beta_t (1-abar_{t-1}) / (1-abar_t)

  void check_step(int t) const {
    if (t < 1 || t > steps)
      throw ValidationError("diffusion step " + std::to_string(t) + " out of range [1," +
                            std::to_string(steps) + "]");
  }
};

inline NoiseSchedule cosine_schedule(int T) {
  require(T >= 2, "schedule needs at least 2 steps");
  const double s = 0.008;
  auto f = [&](double t) {
    double u = ((t / T + s) / (1.0 + s)) * std::numbers::pi / 2.0;
    double c = std::cos(u);
    return c * c;
  };
  NoiseSchedule sch;
  sch.steps = T;
  sch.beta.assign(T + 1, 0.0);
  sch.alpha.assign(T + 1, 1.0);
  sch.alpha_bar.assign(T + 1, 1.0);
  sch.posterior_var.assign(T + 1, 0.0);
  double f0 = f(0.0);
  double prev_abar_target = 1.0;
  for (int t = 1; t <= T; ++t) {
    double abar_target = f(static_cast<double>(t)) / f0;
    double b = 1.0 - abar_target / prev_abar_target;
    b = std::min(b, 0.999);
    prev_abar_target = abar_target;
    sch.beta[t] = b;
    sch.alpha[t] = 1.0 - b;
    sch.alpha_bar[t] = sch.alpha_bar[t - 1] * sch.alpha[t];
    sch.posterior_var[t] = b * (1.0 - sch.alpha_bar[t - 1]) / (1.0 - sch.alpha_bar[t]);
  }
  return sch;
}

// x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps
inline Matrix forward_sample(const Matrix& x0, int t, const Matrix& eps, const NoiseSchedule& s) {
  s.check_step(t);
  require(x0.rows() == eps.rows() && x0.cols() == eps.cols(), "shape mismatch in forward_sample");
  double ab = s.alpha_bar[t];
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

// Posterior mean of x0 given x_t and the marginal score at x_t.
inline Matrix x0_from_score(const Matrix& x_t, const Matrix& score, int t,
                            const NoiseSchedule& s) {
  s.check_step(t);
  double ab = s.alpha_bar[t];
  return (x_t + (1.0 - ab) * score) / std::sqrt(ab);
}

inline Matrix score_from_x0(const Matrix& x_t, const Matrix& x0_hat, int t,
                            const NoiseSchedule& s) {
  s.check_step(t);
  double ab = s.alpha_bar[t];
  return -(x_t - std::sqrt(ab) * x0_hat) / (1.0 - ab);
}

// One reverse DDPM transition. z is forced to zero at t=1.
inline Matrix ddpm_step(const Matrix& x_t, const Matrix& x0_hat, int t, const Matrix& z,
                        const NoiseSchedule& s) {
  s.check_step(t);
  double ab_t = s.alpha_bar[t];
  double ab_p = s.alpha_bar[t - 1];
  double c_xt = std::sqrt(s.alpha[t]) * (1.0 - ab_p) / (1.0 - ab_t);
  double c_x0 = std::sqrt(ab_p) * s.beta[t] / (1.0 - ab_t);
  Matrix out = c_xt * x_t + c_x0 * x0_hat;
  if (t > 1) out += std::sqrt(s.posterior_var[t]) * z;
  return out;
}

// Accelerated transition over a stride dt. dt=1 delegates to ddpm_step so the
// two are bit-identical; for dt>1 the stride is treated as a single step of
// the coarsened schedule (alpha_eff = abar_t/abar_{t-dt}), which reduces the
// last step to exactly x0_hat. z is zero on the terminal stride.
inline Matrix ddim_step(const Matrix& x_t, const Matrix& x0_hat, int t, int dt, const Matrix& z,
                        const NoiseSchedule& s) {
  s.check_step(t);
  require(dt >= 1 && dt <= t, "ddim stride must satisfy 1 <= dt <= t");
  if (dt == 1) return ddpm_step(x_t, x0_hat, t, z, s);
  double ab_t = s.alpha_bar[t];
  double ab_p = s.alpha_bar[t - dt];
  double a_eff = ab_t / ab_p;
  double b_eff = 1.0 - a_eff;
  double c_xt = std::sqrt(a_eff) * (1.0 - ab_p) / (1.0 - ab_t);
  double c_x0 = std::sqrt(ab_p) * b_eff / (1.0 - ab_t);
  Matrix out = c_xt * x_t + c_x0 * x0_hat;
  if (t > dt) {
    double var = b_eff * (1.0 - ab_p) / (1.0 - ab_t);
    out += std::sqrt(var) * z;
  }
  return out;
}

// Mean squared error over observed entries only.
inline double masked_loss(const Matrix& x0, const Matrix& x0_hat, const Matrix& mask) {
  require(x0.rows() == x0_hat.rows() && x0.cols() == x0_hat.cols() && x0.rows() == mask.rows() &&
              x0.cols() == mask.cols(),
          "shape mismatch in masked_loss");
  double count = mask.sum();
  require(count > 0, "masked_loss with all-zero mask");
  Matrix diff = (x0 - x0_hat).cwiseProduct(mask);
  return diff.squaredNorm() / count;
}

inline void export_schedule_csv(const NoiseSchedule& s, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write file: " + path);
  out << std::setprecision(17);
  out << "t,beta,alpha,alpha_bar\n";
  for (int t = 1; t <= s.steps; ++t)
    out << t << ',' << s.beta[t] << ',' << s.alpha[t] << ',' << s.alpha_bar[t] << '\n';
}

inline NoiseSchedule import_schedule_csv(const std::string& path) {
  CsvTable tab = read_csv_table(path);
  require(tab.rows.size() >= 2, "schedule CSV too short: " + path);
  int T = static_cast<int>(tab.rows.size()) - 1;
  NoiseSchedule s;
  s.steps = T;
  s.beta.assign(T + 1, 0.0);
  s.alpha.assign(T + 1, 1.0);
  s.alpha_bar.assign(T + 1, 1.0);
  s.posterior_var.assign(T + 1, 0.0);
  for (int t = 1; t <= T; ++t) {
    const auto& row = tab.rows[t];
    require(row.size() == 4, path + ": expected 4 columns at line " + std::to_string(t + 1));
    double tv, b, a, ab;
    parse_cell(row[0], tv);
    parse_cell(row[1], b);
    parse_cell(row[2], a);
    parse_cell(row[3], ab);
    require(static_cast<int>(tv) == t, path + ": unexpected step index");
    s.beta[t] = b;
    s.alpha[t] = a;
    s.alpha_bar[t] = ab;
    s.posterior_var[t] = b * (1.0 - s.alpha_bar[t - 1]) / (1.0 - ab);
  }
  return s;
}

}  // namespace tmd
