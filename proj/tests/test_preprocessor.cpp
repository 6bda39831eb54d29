#include <catch2/catch_amalgamated.hpp>

#include <tmdiffuse/preprocessor.hpp>

using namespace tmd;

TEST_CASE("reconstruct output shape and range") {
  Preprocessor pre(8, 3);
  Rng rng(1);
  Matrix seq = random_uniform(8, 10, rng);
  Matrix out = pre.reconstruct(seq);
  CHECK(out.rows() == 8);
  CHECK(out.cols() == 10);
  CHECK(out.minCoeff() > 0.0);
  CHECK(out.maxCoeff() < 1.0);
}

TEST_CASE("single-point sequence works and matches column slices") {
  Preprocessor pre(6, 5);
  Rng rng(2);
  Matrix seq = random_uniform(6, 1, rng);
  Matrix out = pre.reconstruct(seq);
  CHECK(out.cols() == 1);
  CHECK(out.allFinite());
}

TEST_CASE("reconstruct is deterministic and time-dependent") {
  Preprocessor pre(5, 7);
  Rng rng(3);
  Matrix seq = random_uniform(5, 6, rng);
  CHECK(pre.reconstruct(seq) == pre.reconstruct(seq));

  // the recurrent pass couples time points: perturbing one column moves others
  Matrix pert = seq;
  pert(2, 0) += 0.5;
  Matrix a = pre.reconstruct(seq), b = pre.reconstruct(pert);
  CHECK((a.rightCols(5) - b.rightCols(5)).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("gradient of reconstruction loss matches finite differences") {
  Preprocessor pre(4, 9);
  Rng rng(4);
  Matrix seq = random_uniform(4, 5, rng);
  Matrix target = random_uniform(4, 5, rng);

  auto value = [&](const Matrix& sv) {
    Tape tp;
    int out = pre.forward(tp, tp.constant(sv));
    int diff = tp.sub(tp.constant(target), out);
    return tp.scalar(tp.sum(tp.square(diff)));
  };
  Tape tp;
  int s = tp.leaf(seq);
  int out = pre.forward(tp, s);
  int diff = tp.sub(tp.constant(target), out);
  tp.backward(tp.sum(tp.square(diff)));
  const Matrix g = tp.grad(s);

  const double h = 1e-5;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 5; ++j) {
      Matrix sp = seq, sm = seq;
      sp(i, j) += h;
      sm(i, j) -= h;
      double fd = (value(sp) - value(sm)) / (2 * h);
      double rel = std::abs(g(i, j) - fd) / std::max({std::abs(fd), std::abs(g(i, j)), 1e-8});
      CHECK(rel < 1e-4);
    }
}

TEST_CASE("training reduces reconstruction loss on observed data") {
  const int N = 6, K = 8;
  Rng rng(11);
  Matrix window = random_uniform(N, K, rng) * 0.8 + Matrix::Constant(N, K, 0.1);
  Matrix mask = Matrix::Ones(N, K);

  TrainConfig tc;
  tc.batch_size = 1;
  tc.epochs_pre = 800;
  tc.learning_rate = 5e-3;
  tc.seed = 1;

  Preprocessor pre(N, 13);
  auto trace = train_preprocessor(pre, {window}, {mask}, tc);
  REQUIRE(trace.size() == 800);
  double head = 0, tail = 0;
  for (int i = 0; i < 20; ++i) head += trace[i];
  for (size_t i = trace.size() - 20; i < trace.size(); ++i) tail += trace[i];
  CHECK(tail / 20 < 0.2 * (head / 20));
  CHECK(tail / 20 < 1e-2);
}

TEST_CASE("training is blind to masked-out dataset entries") {
  const int N = 6, K = 8;
  Rng rng(12);
  Matrix window = random_uniform(N, K, rng);
  Matrix mask = Matrix::Zero(N, K);
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < K; j += 2) mask(i, j) = 1.0;

  Matrix pert = window;
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < K; ++j)
      if (mask(i, j) < 0.5) pert(i, j) = 123.0;

  TrainConfig tc;
  tc.batch_size = 1;
  tc.epochs_pre = 30;
  tc.seed = 4;

  Preprocessor a(N, 17), b(N, 17);
  auto ta = train_preprocessor(a, {window}, {mask}, tc);
  auto tb = train_preprocessor(b, {pert}, {mask}, tc);
  CHECK(ta == tb);
  for (size_t i = 0; i < a.params().w.size(); ++i) CHECK(a.params().w[i] == b.params().w[i]);
}

TEST_CASE("fixed seed reproduces the training trace") {
  const int N = 5, K = 6;
  Rng rng(13);
  std::vector<Matrix> wins{random_uniform(N, K, rng), random_uniform(N, K, rng)};
  std::vector<Matrix> masks{Matrix::Ones(N, K), Matrix::Ones(N, K)};
  TrainConfig tc;
  tc.batch_size = 2;
  tc.epochs_pre = 10;
  tc.seed = 99;

  Preprocessor a(N, 21), b(N, 21);
  CHECK(train_preprocessor(a, wins, masks, tc) == train_preprocessor(b, wins, masks, tc));
}

TEST_CASE("impute_dataset preserves observed entries exactly") {
  const int N = 7, T = 12;
  Rng rng(14);
  TrafficTensor X{random_uniform(N, T, rng)};
  auto M = build_random_mask(N, T, 0.5, 5);
  Preprocessor pre(N, 23);

  auto out = impute_dataset(pre, X, M);
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < T; ++j) {
      if (M.bits(i, j) > 0.5)
        CHECK(out.values(i, j) == X.values(i, j));
      else
        CHECK(out.values(i, j) != X.values(i, j));  // AE output, almost surely different
    }
  // imputed values inherit the sigmoid range
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < T; ++j)
      if (M.bits(i, j) < 0.5) {
        CHECK(out.values(i, j) > 0.0);
        CHECK(out.values(i, j) < 1.0);
      }
}

TEST_CASE("impute_dataset ignores values hidden by the mask") {
  const int N = 5, T = 9;
  Rng rng(15);
  TrafficTensor X{random_uniform(N, T, rng)};
  auto M = build_random_mask(N, T, 0.6, 6);
  TrafficTensor pert{X.values};
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < T; ++j)
      if (M.bits(i, j) < 0.5) pert.values(i, j) = 1e6;

  Preprocessor pre(N, 29);
  Matrix a = impute_dataset(pre, X, M).values;
  Matrix b = impute_dataset(pre, pert, M).values;
  CHECK(a == b);
}
