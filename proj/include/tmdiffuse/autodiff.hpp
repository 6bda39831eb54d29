#pragma once

#include "core.hpp"

#include <cmath>
#include <functional>
#include <vector>

namespace tmd {

// Small reverse-mode tape over dense matrices. One tape per forward pass;
// nodes are referenced by index. backward() walks the node list in reverse.
class Tape {
 public:
  struct Node {
    Matrix val;
    Matrix grad;
    std::function<void()> back;  // empty for leaves/constants
  };

  int leaf(Matrix v) {
    nodes_.push_back({std::move(v), {}, {}});
    return last();
  }

  int constant(Matrix v) { return leaf(std::move(v)); }

  const Matrix& val(int id) const { return nodes_[id].val; }
  Matrix& grad(int id) { return nodes_[id].grad; }

  int add(int a, int b) {
    int id = leaf(val(a) + val(b));
    nodes_[id].back = [this, id, a, b] {
      grad(a) += grad(id);
      grad(b) += grad(id);
    };
    return id;
  }

  int sub(int a, int b) {
    int id = leaf(val(a) - val(b));
    nodes_[id].back = [this, id, a, b] {
      grad(a) += grad(id);
      grad(b) -= grad(id);
    };
    return id;
  }

  int cmul(int a, int b) {
    int id = leaf(val(a).cwiseProduct(val(b)));
    nodes_[id].back = [this, id, a, b] {
      grad(a) += grad(id).cwiseProduct(val(b));
      grad(b) += grad(id).cwiseProduct(val(a));
    };
    return id;
  }

  int scale(int a, double c) {
    int id = leaf(val(a) * c);
    nodes_[id].back = [this, id, a, c] { grad(a) += grad(id) * c; };
    return id;
  }

  int matmul(int a, int b) {
    int id = leaf(val(a) * val(b));
    nodes_[id].back = [this, id, a, b] {
      grad(a) += grad(id) * val(b).transpose();
      grad(b) += val(a).transpose() * grad(id);
    };
    return id;
  }

  int transpose(int a) {
    int id = leaf(val(a).transpose());
    nodes_[id].back = [this, id, a] { grad(a) += grad(id).transpose(); };
    return id;
  }

  // X + broadcast of a 1 x cols row vector.
  int add_rowvec(int x, int v) {
    int id = leaf(val(x).rowwise() + val(v).row(0));
    nodes_[id].back = [this, id, x, v] {
      grad(x) += grad(id);
      grad(v) += grad(id).colwise().sum();
    };
    return id;
  }

  // X .* broadcast of a 1 x cols row vector.
  int mul_rowvec(int x, int v) {
    Matrix out = val(x).array().rowwise() * val(v).row(0).array();
    int id = leaf(std::move(out));
    nodes_[id].back = [this, id, x, v] {
      grad(x) += (grad(id).array().rowwise() * val(v).row(0).array()).matrix();
      grad(v) += grad(id).cwiseProduct(val(x)).colwise().sum();
    };
    return id;
  }

  int relu(int a) {
    int id = leaf(val(a).cwiseMax(0.0));
    nodes_[id].back = [this, id, a] {
      grad(a) += grad(id).cwiseProduct(
          (val(a).array() > 0.0).cast<double>().matrix());
    };
    return id;
  }

  int sigmoid(int a) {
    Matrix y = (1.0 / (1.0 + (-val(a).array()).exp())).matrix();
    int id = leaf(std::move(y));
    nodes_[id].back = [this, id, a] {
      const auto& y = val(id).array();
      grad(a) += (grad(id).array() * y * (1.0 - y)).matrix();
    };
    return id;
  }

  int tanh_(int a) {
    int id = leaf(val(a).array().tanh().matrix());
    nodes_[id].back = [this, id, a] {
      const auto& y = val(id).array();
      grad(a) += (grad(id).array() * (1.0 - y * y)).matrix();
    };
    return id;
  }

  // Row-wise softmax (attention weights over key positions).
  int softmax_rows(int a) {
    Matrix y = val(a);
    for (int i = 0; i < y.rows(); ++i) {
      Eigen::ArrayXd row = y.row(i).array();
      row -= row.maxCoeff();
      row = row.exp();
      y.row(i) = (row / row.sum()).matrix();
    }
    int id = leaf(std::move(y));
    nodes_[id].back = [this, id, a] {
      const Matrix& y = val(id);
      const Matrix& g = grad(id);
      for (int i = 0; i < y.rows(); ++i) {
        double dot = y.row(i).dot(g.row(i));
        grad(a).row(i) += (y.row(i).array() * (g.row(i).array() - dot)).matrix();
      }
    };
    return id;
  }

  // Row-wise normalization to zero mean / unit variance across features.
  int layer_norm_rows(int a, double eps = 1e-5) {
    const Matrix& x = val(a);
    int n = static_cast<int>(x.cols());
    Matrix y(x.rows(), n);
    Vector inv_sigma(x.rows());
    for (int i = 0; i < x.rows(); ++i) {
      double mu = x.row(i).mean();
      double var = (x.row(i).array() - mu).square().mean();
      double is = 1.0 / std::sqrt(var + eps);
      inv_sigma(i) = is;
      y.row(i) = ((x.row(i).array() - mu) * is).matrix();
    }
    int id = leaf(std::move(y));
    nodes_[id].back = [this, id, a, inv_sigma] {
      const Matrix& y = val(id);
      const Matrix& g = grad(id);
      int n = static_cast<int>(y.cols());
      for (int i = 0; i < y.rows(); ++i) {
        double gm = g.row(i).mean();
        double gy = g.row(i).cwiseProduct(y.row(i)).mean();
        grad(a).row(i) +=
            (inv_sigma(i) * (g.row(i).array() - gm - y.row(i).array() * gy)).matrix();
      }
      (void)n;
    };
    return id;
  }

  int slice_cols(int a, int start, int count) {
    int id = leaf(val(a).middleCols(start, count));
    nodes_[id].back = [this, id, a, start, count] {
      grad(a).middleCols(start, count) += grad(id);
    };
    return id;
  }

  int hcat(int a, int b) {
    Matrix out(val(a).rows(), val(a).cols() + val(b).cols());
    out << val(a), val(b);
    int id = leaf(std::move(out));
    nodes_[id].back = [this, id, a, b] {
      grad(a) += grad(id).leftCols(val(a).cols());
      grad(b) += grad(id).rightCols(val(b).cols());
    };
    return id;
  }

  int vcat(int a, int b) {
    Matrix out(val(a).rows() + val(b).rows(), val(a).cols());
    out << val(a), val(b);
    int id = leaf(std::move(out));
    nodes_[id].back = [this, id, a, b] {
      grad(a) += grad(id).topRows(val(a).rows());
      grad(b) += grad(id).bottomRows(val(b).rows());
    };
    return id;
  }

  int square(int a) {
    int id = leaf(val(a).cwiseProduct(val(a)));
    nodes_[id].back = [this, id, a] {
      grad(a) += 2.0 * grad(id).cwiseProduct(val(a));
    };
    return id;
  }

  int abs_(int a) {
    int id = leaf(val(a).cwiseAbs());
    nodes_[id].back = [this, id, a] {
      grad(a) += grad(id).cwiseProduct(val(a).array().sign().matrix());
    };
    return id;
  }

  int one_minus(int a) {
    int id = leaf((1.0 - val(a).array()).matrix());
    nodes_[id].back = [this, id, a] { grad(a) -= grad(id); };
    return id;
  }

  // Sum of all entries, as a 1x1 node.
  int sum(int a) {
    Matrix s(1, 1);
    s(0, 0) = val(a).sum();
    int id = leaf(std::move(s));
    nodes_[id].back = [this, id, a] {
      grad(a).array() += grad(id)(0, 0);
    };
    return id;
  }

  int add_scalar(int a, int b) { return add(a, b); }

  double scalar(int a) const { return val(a)(0, 0); }

  // Seeds the root (must be 1x1) with 1 and propagates.
  void backward(int root) {
    for (auto& n : nodes_) n.grad = Matrix::Zero(n.val.rows(), n.val.cols());
    nodes_[root].grad(0, 0) = 1.0;
    for (int i = root; i >= 0; --i)
      if (nodes_[i].back) nodes_[i].back();
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  int last() const { return static_cast<int>(nodes_.size()) - 1; }
  std::vector<Node> nodes_;
};

}  // namespace tmd
