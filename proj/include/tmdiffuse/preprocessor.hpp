#pragma once

#include "autodiff.hpp"
#include "core.hpp"
#include "data.hpp"
#include "denoiser.hpp"

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

namespace tmd {

// Autoencoder pre-processor: two ReLU fully connected layers, a bidirectional
// GRU over the time sequence, and a sigmoid output layer.
class Preprocessor {
 public:
  Preprocessor(int flow_count, std::uint64_t init_seed) : N_(flow_count) {
    require(flow_count > 0, "flow count must be positive");
    h1_ = std::max(2, N_ / 2);
    h2_ = std::max(2, N_ / 4);
    Rng rng(init_seed);
    w1_ = ps_.add("ae.w1", N_, h1_, rng);
    b1_ = ps_.add("ae.b1", 1, h1_, rng, 0.0);
    w2_ = ps_.add("ae.w2", h1_, h2_, rng);
    b2_ = ps_.add("ae.b2", 1, h2_, rng, 0.0);
    for (int dir = 0; dir < 2; ++dir) {
      std::string p = dir == 0 ? "gru.fwd" : "gru.bwd";
      gru_[dir] = GruIdx{ps_.add(p + ".wr", h2_, h2_, rng), ps_.add(p + ".ur", h2_, h2_, rng),
                         ps_.add(p + ".br", 1, h2_, rng, 0.0),
                         ps_.add(p + ".wz", h2_, h2_, rng), ps_.add(p + ".uz", h2_, h2_, rng),
                         ps_.add(p + ".bz", 1, h2_, rng, 0.0),
                         ps_.add(p + ".wn", h2_, h2_, rng), ps_.add(p + ".un", h2_, h2_, rng),
                         ps_.add(p + ".bn", 1, h2_, rng, 0.0)};
    }
    w3_ = ps_.add("ae.w3", 2 * h2_, N_, rng);
    b3_ = ps_.add("ae.b3", 1, N_, rng, 0.0);
  }

  int flow_count() const { return N_; }
  ParamStore& params() { return ps_; }
  const ParamStore& params() const { return ps_; }

  // seq is N x K (one column per time point); returns the N x K output node.
  int forward(Tape& tp, int seq_node, std::vector<int>* param_nodes = nullptr) const {
    require(tp.val(seq_node).rows() == N_, "preprocessor input must have " + std::to_string(N_) +
                                               " flows");
    int K = static_cast<int>(tp.val(seq_node).cols());
    require(K >= 1, "empty sequence");
    std::vector<int> pn(ps_.w.size());
    for (size_t i = 0; i < ps_.w.size(); ++i) pn[i] = tp.leaf(ps_.w[i]);
    if (param_nodes) *param_nodes = pn;

    std::vector<int> enc(K);
    for (int i = 0; i < K; ++i) {
      int s = tp.transpose(tp.slice_cols(seq_node, i, 1));  // 1 x N point
      int a = tp.relu(tp.add_rowvec(tp.matmul(s, pn[w1_]), pn[b1_]));
      enc[i] = tp.relu(tp.add_rowvec(tp.matmul(a, pn[w2_]), pn[b2_]));
    }

    std::vector<int> fwd(K), bwd(K);
    int h = tp.constant(Matrix::Zero(1, h2_));
    for (int i = 0; i < K; ++i) h = fwd[i] = gru_cell(tp, enc[i], h, gru_[0], pn);
    h = tp.constant(Matrix::Zero(1, h2_));
    for (int i = K - 1; i >= 0; --i) h = bwd[i] = gru_cell(tp, enc[i], h, gru_[1], pn);

    int out_rows = -1;
    for (int i = 0; i < K; ++i) {
      int h3 = tp.hcat(fwd[i], bwd[i]);
      int f = tp.sigmoid(tp.add_rowvec(tp.matmul(h3, pn[w3_]), pn[b3_]));
      out_rows = out_rows < 0 ? f : tp.vcat(out_rows, f);
    }
    return tp.transpose(out_rows);
  }

  Matrix reconstruct(const Matrix& seq) const {
    Tape tp;
    int s = tp.constant(seq);
    int out = forward(tp, s);
    return tp.val(out);
  }

 private:
  struct GruIdx {
    int wr, ur, br, wz, uz, bz, wn, un, bn;
  };

  int gru_cell(Tape& tp, int x, int h, const GruIdx& g, const std::vector<int>& pn) const {
    int r = tp.sigmoid(tp.add(tp.add_rowvec(tp.matmul(x, pn[g.wr]), pn[g.br]),
                              tp.matmul(h, pn[g.ur])));
    int z = tp.sigmoid(tp.add(tp.add_rowvec(tp.matmul(x, pn[g.wz]), pn[g.bz]),
                              tp.matmul(h, pn[g.uz])));
    int n = tp.tanh_(tp.add(tp.add_rowvec(tp.matmul(x, pn[g.wn]), pn[g.bn]),
                            tp.cmul(r, tp.matmul(h, pn[g.un]))));
    return tp.add(tp.cmul(tp.one_minus(z), n), tp.cmul(z, h));
  }

  int N_, h1_, h2_;
  ParamStore ps_;
  int w1_, b1_, w2_, b2_, w3_, b3_;
  GruIdx gru_[2];
};

inline Matrix preprocess_forward(const Matrix& seq, const Preprocessor& pre) {
  return pre.reconstruct(seq);
}

// Masked reconstruction training (first stage). The network only ever sees
// the masked input, so unobserved dataset entries cannot influence anything.
inline std::vector<double> train_preprocessor(Preprocessor& pre,
                                              const std::vector<Matrix>& windows,
                                              const std::vector<Matrix>& mask_windows,
                                              const TrainConfig& cfg) {
  require(!windows.empty() && windows.size() == mask_windows.size(),
          "training needs matching window and mask lists");
  int K = static_cast<int>(windows.size());
  int batches_per_epoch = (K + cfg.batch_size - 1) / cfg.batch_size;
  Rng rng(cfg.seed + 0x9e3779b97f4a7c15ULL);
  std::vector<int> order(K);
  std::iota(order.begin(), order.end(), 0);

  std::vector<double> loss_trace;
  std::vector<Matrix> grads(pre.params().w.size());
  for (int epoch = 0; epoch < cfg.epochs_pre; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (int b = 0; b < batches_per_epoch; ++b) {
      for (size_t i = 0; i < grads.size(); ++i)
        grads[i] = Matrix::Zero(pre.params().w[i].rows(), pre.params().w[i].cols());
      double batch_loss = 0.0, batch_count = 0.0;
      int begin = b * cfg.batch_size;
      int end = std::min(K, begin + cfg.batch_size);
      for (int k = begin; k < end; ++k) {
        const Matrix& msk = mask_windows[order[k]];
        double observed = msk.sum();
        if (observed <= 0) continue;
        Matrix input = windows[order[k]].cwiseProduct(msk);
        Tape tp;
        int s = tp.constant(input);
        std::vector<int> pn;
        int out = pre.forward(tp, s, &pn);
        int diff = tp.cmul(tp.constant(msk), tp.sub(tp.constant(input), out));
        int err = cfg.loss == LossKind::Squared ? tp.square(diff) : tp.abs_(diff);
        int loss = tp.scale(tp.sum(err), 1.0 / observed);
        tp.backward(loss);
        double lv = tp.scalar(loss);
        if (!std::isfinite(lv)) throw NumericError("preprocessor training loss is not finite");
        batch_loss += lv;
        batch_count += 1.0;
        for (size_t i = 0; i < grads.size(); ++i) grads[i] += tp.grad(pn[i]);
      }
      if (batch_count == 0) continue;
      for (auto& g : grads) g /= batch_count;
      pre.params().adam_step(grads, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2);
      loss_trace.push_back(batch_loss / batch_count);
    }
  }
  return loss_trace;
}

// M .* Xo + (1-M) .* AE(M .* Xo); observed entries are preserved exactly.
inline TrafficTensor impute_dataset(const Preprocessor& pre, const TrafficTensor& Xo,
                                    const ObservationMask& M) {
  Matrix masked = Xo.values.cwiseProduct(M.bits);
  Matrix recon = pre.reconstruct(masked);
  Matrix out = M.bits.cwiseProduct(Xo.values) +
               (Matrix::Ones(M.bits.rows(), M.bits.cols()) - M.bits).cwiseProduct(recon);
  return TrafficTensor{std::move(out)};
}

}  // namespace tmd
