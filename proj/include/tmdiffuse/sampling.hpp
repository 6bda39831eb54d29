#pragma once

#include "core.hpp"
#include "data.hpp"
#include "model.hpp"
#include "schedule.hpp"

#include <cmath>
#include <optional>
#include <vector>

namespace tmd {

enum class RhoMode { Fixed, Schedule };

struct GuidanceConfig {
  RhoMode rho_mode = RhoMode::Fixed;
  double rho_fixed = 0.05;
  double sigma_z = 0.0;   // used by the schedule mode
  int ddim_stride = 1;
  int em_iters = 20;
  std::uint64_t seed = 0;

  double rho(int t, const NoiseSchedule& s) const {
    if (rho_mode == RhoMode::Fixed) return rho_fixed;
    require(sigma_z > 0, "schedule rho mode needs sigma_z > 0");
    double a = s.alpha[t];
    return (1.0 - a) / (std::sqrt(a) * sigma_z * sigma_z);
  }
};

struct MeasurementSet {
  std::optional<RoutingMatrix> A;
  std::optional<Matrix> Y;    // links x w, normalized space
  std::optional<Matrix> Xo;   // N x w, normalized space
  std::optional<Matrix> mask; // N x w
};

struct SampleResult {
  Matrix x0;
  std::vector<double> residual_trace;  // residual value per reverse step, when guided
};

// Multiplicative EM fixed-point iteration for A x = y on one flow vector.
inline Vector em_refine(Vector x, const Matrix& A, const Vector& y, int iters) {
  require(A.rows() == y.size() && A.cols() == x.size(), "em_refine shape mismatch");
  require(A.minCoeff() >= 0, "routing matrix must be nonnegative");
  if (y.size() > 0 && y.minCoeff() < 0) throw ValidationError("negative link load in em_refine");
  const double eps = 1e-9;
  x = x.cwiseMax(eps);
  Vector col_sum = A.colwise().sum();
  for (int it = 0; it < iters; ++it) {
    Vector ax = A * x;
    Vector next = x;
    for (int j = 0; j < x.size(); ++j) {
      if (col_sum(j) <= 0) continue;
      double acc = 0.0;
      for (int i = 0; i < y.size(); ++i) {
        if (A(i, j) == 0.0 || ax(i) < eps) continue;
        acc += A(i, j) * y(i) / ax(i);
      }
      next(j) = x(j) / col_sum(j) * acc;
    }
    x = next;
  }
  return x;
}

// Columnwise EM refinement of an N x w window against Y (links x w).
inline Matrix em_refine_window(const Matrix& x, const RoutingMatrix& A, const Matrix& Y,
                               int iters) {
  require(Y.rows() == A.link_count() && Y.cols() == x.cols(), "em_refine_window shape mismatch");
  Matrix out = x;
  for (int j = 0; j < x.cols(); ++j)
    out.col(j) = em_refine(x.col(j), A.entries, Y.col(j), iters);
  return out;
}

// Replacement guidance: observed positions get exact forward-process samples
// of Xo at step t (Xo itself at t=0); unobserved positions are untouched.
inline Matrix replace_known(const Matrix& x, const Matrix& Xo, const Matrix& mask, int t,
                            const NoiseSchedule& s, Rng& rng) {
  require(x.rows() == Xo.rows() && x.cols() == Xo.cols() && x.rows() == mask.rows() &&
              x.cols() == mask.cols(),
          "replace_known shape mismatch");
  if (mask.sum() <= 0) return x;
  Matrix known;
  if (t >= 1) {
    Matrix eps = random_normal(static_cast<int>(x.rows()), static_cast<int>(x.cols()), rng);
    known = forward_sample(Xo, t, eps, s);
  } else {
    known = Xo;
  }
  return mask.cwiseProduct(known) + (Matrix::Ones(x.rows(), x.cols()) - mask).cwiseProduct(x);
}

namespace detail {

// Shared reverse loop. The residual spec may be empty (unconditional); the
// replacement pair may be null. Guidance applies the gradient as a descent
// correction on the post-step state.
inline SampleResult reverse_loop(const DenoiseModel& model, const NoiseSchedule& s,
                                 const GuidanceConfig& cfg, int rows, int cols,
                                 const ResidualSpec& residual, const Matrix* replace_xo,
                                 const Matrix* replace_mask, Rng& rng) {
  require(cfg.ddim_stride >= 1, "ddim stride must be >= 1");
  SampleResult res;
  Matrix x = random_normal(rows, cols, rng);
  int t = s.steps;
  while (t > 0) {
    int dt = std::min(cfg.ddim_stride, t);
    Matrix x0_hat = model.predict(x, t);
    if (!residual.empty()) res.residual_trace.push_back(residual.value(x0_hat));
    Matrix z = Matrix::Zero(rows, cols);
    if (t > dt) z = random_normal(rows, cols, rng);
    Matrix next = ddim_step(x, x0_hat, t, dt, z, s);
    if (!residual.empty() && cfg.rho(t, s) != 0.0) {
      Matrix g = model.residual_input_gradient(x, t, residual);
      next -= cfg.rho(t, s) * g;
    }
    t -= dt;
    if (replace_xo && replace_mask)
      next = replace_known(next, *replace_xo, *replace_mask, t, s, rng);
    if (!next.allFinite()) throw NumericError("non-finite state during reverse sampling");
    x = std::move(next);
  }
  res.x0 = std::move(x);
  return res;
}

}  // namespace detail

inline SampleResult sample_unconditional(const DenoiseModel& model, const NoiseSchedule& s,
                                         const GuidanceConfig& cfg, int rows, int cols,
                                         Rng& rng) {
  return detail::reverse_loop(model, s, cfg, rows, cols, ResidualSpec{}, nullptr, nullptr, rng);
}

inline SampleResult sample_unconditional(const DenoiseModel& model, const NoiseSchedule& s,
                                         const GuidanceConfig& cfg, int rows, int cols) {
  Rng rng(cfg.seed);
  return sample_unconditional(model, s, cfg, rows, cols, rng);
}

// Tomography: guided reverse diffusion against ||Y - A x0_hat||^2, then EM
// refinement of the result.
inline SampleResult sample_tomography(const DenoiseModel& model, const NoiseSchedule& s,
                                      const RoutingMatrix& A, const Matrix& Y,
                                      const GuidanceConfig& cfg, int cols, Rng& rng) {
  require(Y.rows() == A.link_count() && Y.cols() == cols, "link loads shape mismatch");
  ResidualSpec spec;
  spec.A = &A.entries;
  spec.Y = &Y;
  SampleResult res =
      detail::reverse_loop(model, s, cfg, A.flow_count(), cols, spec, nullptr, nullptr, rng);
  if (cfg.em_iters > 0) res.x0 = em_refine_window(res.x0, A, Y, cfg.em_iters);
  return res;
}

inline SampleResult sample_tomography(const DenoiseModel& model, const NoiseSchedule& s,
                                      const RoutingMatrix& A, const Matrix& Y,
                                      const GuidanceConfig& cfg, int cols) {
  Rng rng(cfg.seed);
  return sample_tomography(model, s, A, Y, cfg, cols, rng);
}

// Completion: guided reverse diffusion against the observed entries (plus the
// tomography residual when link loads are supplied), with replacement
// guidance after every step. Observed entries of the output equal Xo exactly.
inline SampleResult sample_completion(const DenoiseModel& model, const NoiseSchedule& s,
                                      const Matrix& Xo, const Matrix& mask,
                                      const GuidanceConfig& cfg, Rng& rng,
                                      const RoutingMatrix* A = nullptr,
                                      const Matrix* Y = nullptr) {
  ResidualSpec spec;
  spec.Xo = &Xo;
  spec.mask = &mask;
  if (A && Y) {
    require(Y->rows() == A->link_count() && Y->cols() == Xo.cols(),
            "link loads shape mismatch in completion");
    spec.A = &A->entries;
    spec.Y = Y;
  }
  return detail::reverse_loop(model, s, cfg, static_cast<int>(Xo.rows()),
                              static_cast<int>(Xo.cols()), spec, &Xo, &mask, rng);
}

inline SampleResult sample_completion(const DenoiseModel& model, const NoiseSchedule& s,
                                      const Matrix& Xo, const Matrix& mask,
                                      const GuidanceConfig& cfg,
                                      const RoutingMatrix* A = nullptr,
                                      const Matrix* Y = nullptr) {
  Rng rng(cfg.seed);
  return sample_completion(model, s, Xo, mask, cfg, rng, A, Y);
}

// Inverse of make_windows; overlapping cells are averaged, gaps are an error.
inline TrafficTensor assemble_series(const std::vector<Matrix>& windows,
                                     const std::vector<int>& origin_times) {
  require(!windows.empty() && windows.size() == origin_times.size(),
          "assemble_series needs matching windows and origins");
  int N = static_cast<int>(windows[0].rows());
  int w = static_cast<int>(windows[0].cols());
  int T = 0;
  for (size_t k = 0; k < windows.size(); ++k) {
    require(windows[k].rows() == N && windows[k].cols() == w, "inconsistent window shapes");
    T = std::max(T, origin_times[k] + w);
  }
  Matrix sum = Matrix::Zero(N, T);
  Eigen::RowVectorXd count = Eigen::RowVectorXd::Zero(T);
  for (size_t k = 0; k < windows.size(); ++k) {
    sum.middleCols(origin_times[k], w) += windows[k];
    count.segment(origin_times[k], w).array() += 1.0;
  }
  for (int j = 0; j < T; ++j) {
    if (count(j) == 0.0)
      throw ValidationError("coverage gap at time slot " + std::to_string(j));
    sum.col(j) /= count(j);
  }
  return TrafficTensor{std::move(sum)};
}

}  // namespace tmd
