#pragma once

#include "autodiff.hpp"
#include "core.hpp"

namespace tmd {

// Measurement residual evaluated on a predicted clean sample x0_hat (N x w).
// Either or both terms may be active:
//   tomography: ||Y - A x0_hat||^2       (A: links x N, Y: links x w)
//   completion: ||Mask .* (Xo - x0_hat)||^2
struct ResidualSpec {
  const Matrix* A = nullptr;
  const Matrix* Y = nullptr;
  const Matrix* Xo = nullptr;
  const Matrix* mask = nullptr;

  bool has_tomography() const { return A && Y; }
  bool has_completion() const { return Xo && mask; }
  bool empty() const { return !has_tomography() && !has_completion(); }

  // Builds the scalar residual on the tape given the x0_hat node.
  int build(Tape& tp, int x0_hat) const {
    int total = -1;
    if (has_tomography()) {
      int a = tp.constant(*A);
      int y = tp.constant(*Y);
      int diff = tp.sub(y, tp.matmul(a, x0_hat));
      total = tp.sum(tp.square(diff));
    }
    if (has_completion()) {
      int m = tp.constant(*mask);
      int xo = tp.constant(*Xo);
      int diff = tp.cmul(m, tp.sub(xo, x0_hat));
      int term = tp.sum(tp.square(diff));
      total = total < 0 ? term : tp.add(total, term);
    }
    if (total < 0) total = tp.constant(Matrix::Zero(1, 1));
    return total;
  }

  double value(const Matrix& x0_hat) const {
    double r = 0.0;
    if (has_tomography()) r += (*Y - *A * x0_hat).squaredNorm();
    if (has_completion()) r += mask->cwiseProduct(*Xo - x0_hat).squaredNorm();
    return r;
  }
};

// A clean-sample predictor x0_hat(x_t, t). The sampler only needs the
// prediction and the gradient of a measurement residual wrt its input.
class DenoiseModel {
 public:
  virtual ~DenoiseModel() = default;
  virtual Matrix predict(const Matrix& x_t, int t) const = 0;
  virtual Matrix residual_input_gradient(const Matrix& x_t, int t,
                                         const ResidualSpec& residual) const = 0;
};

// Test/diagnostic model: always returns a fixed target, ignoring the input.
class FixedTargetModel : public DenoiseModel {
 public:
  explicit FixedTargetModel(Matrix target) : target_(std::move(target)) {}
  Matrix predict(const Matrix&, int) const override { return target_; }
  Matrix residual_input_gradient(const Matrix& x_t, int, const ResidualSpec&) const override {
    return Matrix::Zero(x_t.rows(), x_t.cols());
  }

 private:
  Matrix target_;
};

}  // namespace tmd
