#pragma once

#include "autodiff.hpp"
#include "core.hpp"
#include "data.hpp"
#include "model.hpp"
#include "schedule.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

namespace tmd {

struct DenoiserConfig {
  int model_dim = 96;
  int heads = 8;
  int encoder_blocks = 2;
  int decoder_blocks = 2;
  int ff_dim = 0;  // defaults to 4 * model_dim
  int window_len = 12;
  int flow_count = 0;
  int diffusion_steps = 300;

  int ff() const { return ff_dim > 0 ? ff_dim : 4 * model_dim; }

  void validate() const {
    require(model_dim > 0 && heads > 0 && encoder_blocks > 0 && decoder_blocks > 0 &&
                window_len > 0 && flow_count > 0 && diffusion_steps > 0,
            "denoiser config fields must be positive");
    require(model_dim % heads == 0, "model_dim must be divisible by heads");
  }

  bool operator==(const DenoiserConfig&) const = default;
};

enum class LossKind { Squared, Absolute };

struct TrainConfig {
  int batch_size = 64;
  double learning_rate = 8e-4;
  int warmup_iters = 500;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.96;
  int epochs_pre = 200;
  int epochs_diff = 400;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::Squared;
};

// Named parameter tensors with Adam moment state.
struct ParamStore {
  std::vector<std::string> names;
  std::vector<Matrix> w, m, v;
  long adam_t = 0;

  int add(const std::string& name, int rows, int cols, Rng& rng, double init_scale = -1.0) {
    Matrix mat;
    if (init_scale == 0.0) {
      mat = Matrix::Zero(rows, cols);
    } else {
      double s = init_scale > 0 ? init_scale : 1.0 / std::sqrt(static_cast<double>(rows));
      std::uniform_real_distribution<double> dist(-s, s);
      mat.resize(rows, cols);
      for (int j = 0; j < cols; ++j)
        for (int i = 0; i < rows; ++i) mat(i, j) = dist(rng);
    }
    names.push_back(name);
    w.push_back(mat);
    m.push_back(Matrix::Zero(rows, cols));
    v.push_back(Matrix::Zero(rows, cols));
    return static_cast<int>(w.size()) - 1;
  }

  void adam_step(const std::vector<Matrix>& grads, double lr, double b1, double b2,
                 double eps = 1e-8) {
    ++adam_t;
    double c1 = 1.0 - std::pow(b1, static_cast<double>(adam_t));
    double c2 = 1.0 - std::pow(b2, static_cast<double>(adam_t));
    for (size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * grads[i];
      v[i] = (b2 * v[i].array() + (1.0 - b2) * grads[i].array().square()).matrix();
      Eigen::ArrayXXd mhat = m[i].array() / c1;
      Eigen::ArrayXXd vhat = v[i].array() / c2;
      w[i].array() -= lr * mhat / (vhat.sqrt() + eps);
      if (!w[i].allFinite()) throw NumericError("non-finite parameter after Adam step: " + names[i]);
    }
  }
};

inline Vector sinusoidal_step_embedding(int t, int dim) {
  require(dim > 0 && dim % 2 == 0, "embedding dimension must be even");
  Vector e(dim);
  int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    double freq = std::pow(10000.0, -2.0 * i / static_cast<double>(dim));
    e(2 * i) = std::sin(t * freq);
    e(2 * i + 1) = std::cos(t * freq);
  }
  return e;
}

// a_t * LayerNorm(w) + b_t with (a_t, b_t) linear in the step embedding.
// Zero-initialized projections make this start as a plain layer norm.
struct AdaLnIdx {
  int wa, ba, wb, bb;
};

inline int adaln_forward(Tape& tp, int x, int emb, int wa, int ba, int wb, int bb) {
  int a = tp.add(tp.add_rowvec(tp.matmul(emb, wa), ba), tp.constant(Matrix::Ones(1, tp.val(ba).cols())));
  int b = tp.add_rowvec(tp.matmul(emb, wb), bb);
  int normed = tp.layer_norm_rows(x);
  return tp.add_rowvec(tp.mul_rowvec(normed, a), b);
}

// Standalone adaptive layer norm on plain matrices (w: tokens x d, emb: 1 x d).
struct AdaLnParams {
  Matrix Wa, ba, Wb, bb;  // Wa, Wb: d x d; ba, bb: 1 x d
};

inline Matrix adaptive_layer_norm(const Matrix& w, const Matrix& emb, const AdaLnParams& p) {
  Tape tp;
  int x = tp.constant(w);
  int e = tp.constant(emb);
  int out = adaln_forward(tp, x, e, tp.constant(p.Wa), tp.constant(p.ba), tp.constant(p.Wb),
                          tp.constant(p.bb));
  return tp.val(out);
}

class TransformerDenoiser : public DenoiseModel {
 public:
  TransformerDenoiser(DenoiserConfig cfg, std::uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(init_seed);
    int d = cfg_.model_dim, N = cfg_.flow_count, w = cfg_.window_len, ff = cfg_.ff();
    in_w_ = ps_.add("in.w", N, d, rng);
    in_b_ = ps_.add("in.b", 1, d, rng, 0.0);
    pos_ = ps_.add("pos", w, d, rng);
    emb_w1_ = ps_.add("emb.w1", d, d, rng);
    emb_b1_ = ps_.add("emb.b1", 1, d, rng, 0.0);
    emb_w2_ = ps_.add("emb.w2", d, d, rng);
    emb_b2_ = ps_.add("emb.b2", 1, d, rng, 0.0);
    auto add_adaln = [&](const std::string& p) {
      return AdaLnIdx{ps_.add(p + ".wa", d, d, rng, 0.0), ps_.add(p + ".ba", 1, d, rng, 0.0),
                      ps_.add(p + ".wb", d, d, rng, 0.0), ps_.add(p + ".bb", 1, d, rng, 0.0)};
    };
    auto add_attn = [&](const std::string& p) {
      return AttnIdx{ps_.add(p + ".wq", d, d, rng), ps_.add(p + ".bq", 1, d, rng, 0.0),
                     ps_.add(p + ".wk", d, d, rng), ps_.add(p + ".bk", 1, d, rng, 0.0),
                     ps_.add(p + ".wv", d, d, rng), ps_.add(p + ".bv", 1, d, rng, 0.0),
                     ps_.add(p + ".wo", d, d, rng), ps_.add(p + ".bo", 1, d, rng, 0.0)};
    };
    auto add_ffn = [&](const std::string& p) {
      return FfnIdx{ps_.add(p + ".w1", d, ff, rng), ps_.add(p + ".b1", 1, ff, rng, 0.0),
                    ps_.add(p + ".w2", ff, d, rng), ps_.add(p + ".b2", 1, d, rng, 0.0)};
    };
    for (int i = 0; i < cfg_.encoder_blocks; ++i) {
      std::string p = "enc" + std::to_string(i);
      enc_.push_back({add_adaln(p + ".ln1"), add_attn(p + ".attn"), add_adaln(p + ".ln2"),
                      add_ffn(p + ".ff")});
    }
    for (int i = 0; i < cfg_.decoder_blocks; ++i) {
      std::string p = "dec" + std::to_string(i);
      dec_.push_back({add_adaln(p + ".ln1"), add_attn(p + ".self"), add_adaln(p + ".ln2"),
                      add_attn(p + ".cross"), add_adaln(p + ".ln3"), add_ffn(p + ".ff")});
    }
    out_w_ = ps_.add("out.w", d, N, rng, 1e-3);
    out_b_ = ps_.add("out.b", 1, N, rng, 0.0);
  }

  const DenoiserConfig& config() const { return cfg_; }
  ParamStore& params() { return ps_; }
  const ParamStore& params() const { return ps_; }

  // Builds the full forward pass on the tape. x_node is the N x w input;
  // returns the N x w output node. param_nodes, when given, receives the
  // tape node id of every parameter (index-aligned with the store).
  int forward(Tape& tp, int x_node, int t, std::vector<int>* param_nodes = nullptr) const {
    if (!tp.val(x_node).allFinite()) throw NumericError("NaN in denoiser input");
    std::vector<int> pn(ps_.w.size());
    for (size_t i = 0; i < ps_.w.size(); ++i) pn[i] = tp.leaf(ps_.w[i]);
    if (param_nodes) *param_nodes = pn;

    int d = cfg_.model_dim;
    Vector e0 = sinusoidal_step_embedding(t, d);
    int emb0 = tp.constant(e0.transpose());
    int emb = tp.add_rowvec(
        tp.matmul(tp.tanh_(tp.add_rowvec(tp.matmul(emb0, pn[emb_w1_]), pn[emb_b1_])), pn[emb_w2_]),
        pn[emb_b2_]);

    // tokens are time positions: w x N input, projected to w x d
    int seq = tp.transpose(x_node);
    int h = tp.add(tp.add_rowvec(tp.matmul(seq, pn[in_w_]), pn[in_b_]), pn[pos_]);

    int enc_out = h;
    for (const auto& blk : enc_) {
      int a = attention(tp, adaln(tp, enc_out, emb, blk.ln1, pn), -1, blk.attn, pn);
      enc_out = tp.add(enc_out, a);
      int f = ffn(tp, adaln(tp, enc_out, emb, blk.ln2, pn), blk.ff, pn);
      enc_out = tp.add(enc_out, f);
    }

    int dec_out = h;
    for (const auto& blk : dec_) {
      int a = attention(tp, adaln(tp, dec_out, emb, blk.ln1, pn), -1, blk.self_attn, pn);
      dec_out = tp.add(dec_out, a);
      int c = attention(tp, adaln(tp, dec_out, emb, blk.ln2, pn), enc_out, blk.cross_attn, pn);
      dec_out = tp.add(dec_out, c);
      int f = ffn(tp, adaln(tp, dec_out, emb, blk.ln3, pn), blk.ff, pn);
      dec_out = tp.add(dec_out, f);
    }

    int out = tp.sigmoid(tp.add_rowvec(tp.matmul(dec_out, pn[out_w_]), pn[out_b_]));
    return tp.transpose(out);
  }

  Matrix predict(const Matrix& x_t, int t) const override {
    check_shape(x_t);
    Tape tp;
    int x = tp.constant(x_t);
    int out = forward(tp, x, t);
    return tp.val(out);
  }

  // Exact reverse-mode gradient of residual(x0_hat(x_t, t)) wrt x_t.
  Matrix residual_input_gradient(const Matrix& x_t, int t,
                                 const ResidualSpec& residual) const override {
    check_shape(x_t);
    if (residual.empty()) return Matrix::Zero(x_t.rows(), x_t.cols());
    Tape tp;
    int x = tp.leaf(x_t);
    int out = forward(tp, x, t);
    int r = residual.build(tp, out);
    tp.backward(r);
    Matrix g = tp.grad(x);
    if (!g.allFinite()) throw NumericError("non-finite guidance gradient");
    return g;
  }

 private:
  struct AttnIdx {
    int wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct FfnIdx {
    int w1, b1, w2, b2;
  };
  struct EncBlock {
    AdaLnIdx ln1;
    AttnIdx attn;
    AdaLnIdx ln2;
    FfnIdx ff;
  };
  struct DecBlock {
    AdaLnIdx ln1;
    AttnIdx self_attn;
    AdaLnIdx ln2;
    AttnIdx cross_attn;
    AdaLnIdx ln3;
    FfnIdx ff;
  };

  void check_shape(const Matrix& x) const {
    require(x.rows() == cfg_.flow_count && x.cols() == cfg_.window_len,
            "denoiser input must be " + std::to_string(cfg_.flow_count) + "x" +
                std::to_string(cfg_.window_len));
  }

  int adaln(Tape& tp, int x, int emb, const AdaLnIdx& ln, const std::vector<int>& pn) const {
    return adaln_forward(tp, x, emb, pn[ln.wa], pn[ln.ba], pn[ln.wb], pn[ln.bb]);
  }

  // Multi-head attention; kv < 0 means self-attention.
  int attention(Tape& tp, int q_in, int kv, const AttnIdx& at, const std::vector<int>& pn) const {
    int kv_in = kv < 0 ? q_in : kv;
    int q = tp.add_rowvec(tp.matmul(q_in, pn[at.wq]), pn[at.bq]);
    int k = tp.add_rowvec(tp.matmul(kv_in, pn[at.wk]), pn[at.bk]);
    int v = tp.add_rowvec(tp.matmul(kv_in, pn[at.wv]), pn[at.bv]);
    int dh = cfg_.model_dim / cfg_.heads;
    double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    int merged = -1;
    for (int hh = 0; hh < cfg_.heads; ++hh) {
      int qh = tp.slice_cols(q, hh * dh, dh);
      int kh = tp.slice_cols(k, hh * dh, dh);
      int vh = tp.slice_cols(v, hh * dh, dh);
      int logits = tp.scale(tp.matmul(qh, tp.transpose(kh)), inv_sqrt);
      int attn = tp.matmul(tp.softmax_rows(logits), vh);
      merged = merged < 0 ? attn : tp.hcat(merged, attn);
    }
    return tp.add_rowvec(tp.matmul(merged, pn[at.wo]), pn[at.bo]);
  }

  int ffn(Tape& tp, int x, const FfnIdx& ff, const std::vector<int>& pn) const {
    int h = tp.relu(tp.add_rowvec(tp.matmul(x, pn[ff.w1]), pn[ff.b1]));
    return tp.add_rowvec(tp.matmul(h, pn[ff.w2]), pn[ff.b2]);
  }

  DenoiserConfig cfg_;
  ParamStore ps_;
  int in_w_, in_b_, pos_, emb_w1_, emb_b1_, emb_w2_, emb_b2_, out_w_, out_b_;
  std::vector<EncBlock> enc_;
  std::vector<DecBlock> dec_;
};

// Linear warmup to the base rate, then linear decay to zero.
inline double lr_at(const TrainConfig& cfg, long iter, long total_iters) {
  double warm = static_cast<double>(std::min<long>(cfg.warmup_iters, total_iters - 1));
  double i = static_cast<double>(iter);
  if (warm > 0 && i < warm) return cfg.learning_rate * (i + 1) / warm;
  double denom = static_cast<double>(total_iters) - warm;
  if (denom <= 0) return cfg.learning_rate;
  return cfg.learning_rate * (static_cast<double>(total_iters) - i) / denom;
}

// Masked x0-reconstruction training (second stage of the training scheme).
// Inputs are windows of the imputed tensor plus matching mask windows; the
// mask gates the loss while imputed values fill the unobserved inputs.
inline std::vector<double> train_denoiser(TransformerDenoiser& model,
                                          const std::vector<Matrix>& windows,
                                          const std::vector<Matrix>& mask_windows,
                                          const TrainConfig& cfg, const NoiseSchedule& schedule) {
  require(!windows.empty() && windows.size() == mask_windows.size(),
          "training needs matching window and mask lists");
  int K = static_cast<int>(windows.size());
  int batches_per_epoch = (K + cfg.batch_size - 1) / cfg.batch_size;
  long total_iters = static_cast<long>(cfg.epochs_diff) * batches_per_epoch;
  Rng rng(cfg.seed);
  std::vector<int> order(K);
  std::iota(order.begin(), order.end(), 0);
  std::uniform_int_distribution<int> t_dist(1, schedule.steps);

  std::vector<double> loss_trace;
  std::vector<Matrix> grads(model.params().w.size());
  long iter = 0;
  for (int epoch = 0; epoch < cfg.epochs_diff; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (int b = 0; b < batches_per_epoch; ++b) {
      for (size_t i = 0; i < grads.size(); ++i)
        grads[i] = Matrix::Zero(model.params().w[i].rows(), model.params().w[i].cols());
      double batch_loss = 0.0;
      double batch_count = 0.0;
      int begin = b * cfg.batch_size;
      int end = std::min(K, begin + cfg.batch_size);
      for (int k = begin; k < end; ++k) {
        const Matrix& x0 = windows[order[k]];
        const Matrix& msk = mask_windows[order[k]];
        double observed = msk.sum();
        if (observed <= 0) continue;
        int t = t_dist(rng);
        Matrix eps = random_normal(static_cast<int>(x0.rows()), static_cast<int>(x0.cols()), rng);
        Matrix x_t = forward_sample(x0, t, eps, schedule);
        Tape tp;
        int x_node = tp.constant(x_t);
        std::vector<int> pn;
        int out = model.forward(tp, x_node, t, &pn);
        int diff = tp.cmul(tp.constant(msk), tp.sub(tp.constant(x0), out));
        int err = cfg.loss == LossKind::Squared ? tp.square(diff) : tp.abs_(diff);
        int loss = tp.scale(tp.sum(err), 1.0 / observed);
        tp.backward(loss);
        double lv = tp.scalar(loss);
        if (!std::isfinite(lv)) throw NumericError("denoiser training loss is not finite");
        batch_loss += lv;
        batch_count += 1.0;
        for (size_t i = 0; i < grads.size(); ++i) grads[i] += tp.grad(pn[i]);
      }
      if (batch_count == 0) continue;
      for (auto& g : grads) g /= batch_count;
      model.params().adam_step(grads, lr_at(cfg, iter, total_iters), cfg.adam_beta1,
                               cfg.adam_beta2);
      loss_trace.push_back(batch_loss / batch_count);
      ++iter;
    }
  }
  return loss_trace;
}

}  // namespace tmd
