#include <catch2/catch_amalgamated.hpp>

#include <tmdiffuse/data.hpp>
#include <tmdiffuse/denoiser.hpp>
#include <tmdiffuse/sampling.hpp>

using namespace tmd;

namespace {

// Counts predict() calls so step-count invariants can be checked.
class CountingModel : public DenoiseModel {
 public:
  explicit CountingModel(Matrix target) : inner_(std::move(target)) {}
  Matrix predict(const Matrix& x, int t) const override {
    ++predict_calls;
    return inner_.predict(x, t);
  }
  Matrix residual_input_gradient(const Matrix& x, int t,
                                 const ResidualSpec& r) const override {
    ++gradient_calls;
    return inner_.residual_input_gradient(x, t, r);
  }
  mutable int predict_calls = 0;
  mutable int gradient_calls = 0;

 private:
  FixedTargetModel inner_;
};

DenoiserConfig tiny_config(int N, int w, int T) {
  DenoiserConfig cfg;
  cfg.model_dim = 8;
  cfg.heads = 2;
  cfg.encoder_blocks = 1;
  cfg.decoder_blocks = 1;
  cfg.ff_dim = 16;
  cfg.window_len = w;
  cfg.flow_count = N;
  cfg.diffusion_steps = T;
  return cfg;
}

}  // namespace

TEST_CASE("em_refine hand example and fixed point") {
  SECTION("A=[1 1], y=4, x=(1,1) converges to (2,2) in one iteration") {
    Matrix A(1, 2);
    A << 1, 1;
    Vector y(1);
    y << 4;
    Vector x(2);
    x << 1, 1;
    Vector out = em_refine(x, A, y, 1);
    CHECK(out(0) == Catch::Approx(2.0).epsilon(1e-12));
    CHECK(out(1) == Catch::Approx(2.0).epsilon(1e-12));
    // further iterations stay put
    Vector out2 = em_refine(out, A, y, 50);
    CHECK((out2 - out).cwiseAbs().maxCoeff() < 1e-12);
  }
  SECTION("consistent solution is a fixed point") {
    Rng rng(1);
    Matrix A = (random_uniform(3, 5, rng).array() > 0.5).cast<double>().matrix();
    A.row(0).setOnes();  // no all-zero column
    Vector x_true = (random_uniform(5, 1, rng).array() + 0.1).matrix().col(0);
    Vector y = A * x_true;
    Vector out = em_refine(x_true, A, y, 25);
    CHECK((out - x_true).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("em_refine residual non-increasing, output nonnegative") {
  Rng rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    Matrix A = (random_uniform(4, 8, rng).array() > 0.4).cast<double>().matrix();
    A.row(0).setOnes();
    Vector x_true = (random_uniform(8, 1, rng).array() + 0.05).matrix().col(0);
    Vector y = A * x_true;
    Vector x = (random_uniform(8, 1, rng).array() + 0.05).matrix().col(0);
    double prev = (y - A * x.cwiseMax(1e-9)).cwiseAbs().sum();
    for (int it = 0; it < 100; ++it) {
      x = em_refine(x, A, y, 1);
      double cur = (y - A * x).cwiseAbs().sum();
      CHECK(cur <= prev + 1e-9);
      CHECK(x.minCoeff() >= 0.0);
      prev = cur;
    }
    CHECK(prev < 0.2 * (y - A * Vector::Constant(8, 0.5)).cwiseAbs().sum() + 1e-9);
  }
}

TEST_CASE("em_refine leaves unrouted flows alone") {
  Matrix A(2, 3);
  A << 1, 0, 0, 0, 1, 0;  // flow 2 appears on no link
  Vector y(2);
  y << 3, 5;
  Vector x(3);
  x << 1, 1, 7;
  Vector out = em_refine(x, A, y, 30);
  CHECK(out(0) == Catch::Approx(3.0));
  CHECK(out(1) == Catch::Approx(5.0));
  CHECK(out(2) == 7.0);
}

TEST_CASE("em_refine_window equals per-column em_refine") {
  Rng rng(3);
  Matrix A = (random_uniform(3, 6, rng).array() > 0.5).cast<double>().matrix();
  A.row(0).setOnes();
  RoutingMatrix R{A};
  Matrix X = (random_uniform(6, 4, rng).array() + 0.1).matrix();
  Matrix Y = A * ((random_uniform(6, 4, rng).array() + 0.1).matrix());
  Matrix out = em_refine_window(X, R, Y, 10);
  for (int j = 0; j < 4; ++j) {
    Vector col = em_refine(X.col(j), A, Y.col(j), 10);
    CHECK((out.col(j) - col).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("replace_known") {
  auto s = cosine_schedule(100);
  Rng rng(4);
  SECTION("t=0 copies observed entries exactly") {
    Matrix x = random_normal(4, 3, rng);
    Matrix Xo = random_uniform(4, 3, rng);
    Matrix mask = Matrix::Zero(4, 3);
    mask(1, 1) = mask(3, 0) = 1.0;
    Matrix out = replace_known(x, Xo, mask, 0, s, rng);
    CHECK(out(1, 1) == Xo(1, 1));
    CHECK(out(3, 0) == Xo(3, 0));
    CHECK(out(0, 0) == x(0, 0));
    CHECK(out(2, 2) == x(2, 2));
  }
  SECTION("empty mask consumes no randomness") {
    Rng a(5), b(5);
    Matrix x = random_normal(3, 3, rng);
    replace_known(x, Matrix::Zero(3, 3), Matrix::Zero(3, 3), 50, s, a);
    CHECK(a() == b());
  }
  SECTION("observed entries follow the forward marginal N(sqrt(ab) Xo, 1-ab)") {
    const int t = 40, n = 20000;
    const double xo = 0.7;
    Matrix Xo = Matrix::Constant(1, 1, xo);
    Matrix mask = Matrix::Ones(1, 1);
    double sum = 0, sum2 = 0;
    Rng r(6);
    for (int i = 0; i < n; ++i) {
      double v = replace_known(Matrix::Zero(1, 1), Xo, mask, t, s, r)(0, 0);
      sum += v;
      sum2 += v * v;
    }
    double mean = sum / n;
    double var = sum2 / n - mean * mean;
    double ab = s.alpha_bar[t];
    CHECK(std::abs(mean - std::sqrt(ab) * xo) < 4.0 * std::sqrt((1 - ab) / n));
    CHECK(std::abs(var - (1 - ab)) < 0.05);
  }
}

TEST_CASE("unconditional sampling with a fixed-target model returns the target") {
  auto s = cosine_schedule(50);
  Matrix target = Matrix::Constant(3, 4, 0.42);
  FixedTargetModel model(target);
  GuidanceConfig cfg;
  SECTION("stride 1: final DDPM step pins the output to x0_hat") {
    cfg.ddim_stride = 1;
    auto res = sample_unconditional(model, s, cfg, 3, 4);
    CHECK((res.x0 - target).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(res.residual_trace.empty());
  }
  SECTION("one giant stride returns x0_hat exactly") {
    cfg.ddim_stride = 50;
    auto res = sample_unconditional(model, s, cfg, 3, 4);
    CHECK(res.x0 == target);
  }
}

TEST_CASE("ddim stride controls the number of network evaluations") {
  auto s = cosine_schedule(300);
  CountingModel model(Matrix::Constant(2, 3, 0.5));
  GuidanceConfig cfg;
  cfg.ddim_stride = 3;
  sample_unconditional(model, s, cfg, 2, 3);
  CHECK(model.predict_calls == 100);

  CountingModel m2(Matrix::Constant(2, 3, 0.5));
  cfg.ddim_stride = 7;  // 300 = 42*7 + 6, so 43 evaluations
  sample_unconditional(m2, s, cfg, 2, 3);
  CHECK(m2.predict_calls == 43);
}

TEST_CASE("rho=0 guided sampling is bit-identical to unconditional") {
  const int N = 6, w = 4, T = 30;
  auto s = cosine_schedule(T);
  TransformerDenoiser model(tiny_config(N, w, T), 77);
  GuidanceConfig cfg;
  cfg.rho_fixed = 0.0;
  cfg.em_iters = 0;
  cfg.seed = 9;

  auto uncond = sample_unconditional(model, s, cfg, N, w);

  // tomography with rho=0 and no EM
  auto A = shortest_path_routing(undirected_graph(3, {{0, 1}, {1, 2}}));
  REQUIRE(A.flow_count() == N);
  Matrix Y = Matrix::Zero(A.link_count(), w);
  auto tomo = sample_tomography(model, s, A, Y, cfg, w);
  CHECK(tomo.x0 == uncond.x0);
  CHECK(tomo.residual_trace.size() == 30);

  // completion with rho=0 and an all-zero mask (no replacement either)
  auto comp = sample_completion(model, s, Matrix::Zero(N, w), Matrix::Zero(N, w), cfg);
  CHECK(comp.x0 == uncond.x0);
}

namespace {

// Identity predictor with the exact residual gradient; guidance on it is
// plain gradient descent on the measurement residual.
class IdentityModel : public DenoiseModel {
 public:
  Matrix predict(const Matrix& x, int) const override { return x; }
  Matrix residual_input_gradient(const Matrix& x, int,
                                 const ResidualSpec& r) const override {
    Matrix g = Matrix::Zero(x.rows(), x.cols());
    if (r.has_tomography()) g += -2.0 * r.A->transpose() * (*r.Y - *r.A * x);
    if (r.has_completion()) g += -2.0 * r.mask->cwiseProduct(*r.Xo - x);
    return g;
  }
};

}  // namespace

TEST_CASE("guidance applies exactly -rho * residual gradient per step") {
  // single-step chain: the guided and unguided samples differ by rho * g(x_T)
  const int w = 3, T = 2;
  auto A = shortest_path_routing(undirected_graph(3, {{0, 1}, {1, 2}}));
  const int N = A.flow_count();
  auto s = cosine_schedule(T);
  TransformerDenoiser model(tiny_config(N, w, T), 78);
  Matrix Y = Matrix::Constant(A.link_count(), w, 0.8);

  GuidanceConfig off;
  off.rho_fixed = 0.0;
  off.em_iters = 0;
  off.ddim_stride = 2;
  off.seed = 3;
  GuidanceConfig on = off;
  on.rho_fixed = 0.05;

  auto a = sample_tomography(model, s, A, Y, off, w);
  auto b = sample_tomography(model, s, A, Y, on, w);

  Rng rng(off.seed);
  Matrix x_init = random_normal(N, w, rng);
  ResidualSpec spec;
  spec.A = &A.entries;
  spec.Y = &Y;
  Matrix g = model.residual_input_gradient(x_init, 2, spec);
  CHECK((b.x0 - (a.x0 - 0.05 * g)).cwiseAbs().maxCoeff() < 1e-14);
  CHECK((a.x0 - b.x0).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("guidance drives the measurement residual down") {
  const int w = 3, T = 25;
  auto A = shortest_path_routing(undirected_graph(3, {{0, 1}, {1, 2}}));
  const int N = A.flow_count();
  auto s = cosine_schedule(T);
  IdentityModel model;
  Rng rng(16);
  Matrix x_true = (random_uniform(N, w, rng).array() * 0.5 + 0.2).matrix();
  Matrix Y = A.entries * x_true;

  GuidanceConfig off;
  off.rho_fixed = 0.0;
  off.em_iters = 0;
  off.seed = 3;
  GuidanceConfig on = off;
  on.rho_fixed = 0.05;

  auto a = sample_tomography(model, s, A, Y, off, w);
  auto b = sample_tomography(model, s, A, Y, on, w);
  double ra = (Y - A.entries * a.x0).squaredNorm();
  double rb = (Y - A.entries * b.x0).squaredNorm();
  CHECK(rb < ra);
}

TEST_CASE("tomography EM refinement tightens the link-load fit") {
  const int w = 2, T = 20;
  auto A = shortest_path_routing(undirected_graph(4, {{0, 1}, {1, 2}, {2, 3}}));
  const int N = A.flow_count();
  auto s = cosine_schedule(T);
  Rng rng(11);
  Matrix x_true = (random_uniform(N, w, rng).array() * 0.5 + 0.2).matrix();
  Matrix Y = A.entries * x_true;
  FixedTargetModel model((random_uniform(N, w, rng).array() * 0.5 + 0.2).matrix());

  GuidanceConfig no_em;
  no_em.rho_fixed = 0.0;
  no_em.em_iters = 0;
  no_em.seed = 2;
  GuidanceConfig with_em = no_em;
  with_em.em_iters = 50;

  auto raw = sample_tomography(model, s, A, Y, no_em, w);
  auto ref = sample_tomography(model, s, A, Y, with_em, w);
  double r_raw = (Y - A.entries * raw.x0).cwiseAbs().sum();
  double r_ref = (Y - A.entries * ref.x0).cwiseAbs().sum();
  CHECK(r_ref < r_raw);
  CHECK(ref.x0.minCoeff() >= 0.0);
}

TEST_CASE("completion copies observed entries back exactly") {
  const int N = 5, w = 4, T = 30;
  auto s = cosine_schedule(T);
  Rng rng(13);
  Matrix Xo = random_uniform(N, w, rng);
  auto M = build_random_mask(N, w, 0.5, 7);
  FixedTargetModel model(Matrix::Constant(N, w, 0.5));
  GuidanceConfig cfg;
  cfg.seed = 4;

  auto res = sample_completion(model, s, Xo, M.bits, cfg);
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < w; ++j)
      if (M.bits(i, j) > 0.5) CHECK(res.x0(i, j) == Xo(i, j));
  CHECK(res.residual_trace.size() == 30);
}

TEST_CASE("completion residual trace is constant for a fixed-target model") {
  const int N = 4, w = 3, T = 15;
  auto s = cosine_schedule(T);
  Rng rng(14);
  Matrix target = random_uniform(N, w, rng);
  Matrix Xo = random_uniform(N, w, rng);
  Matrix mask = Matrix::Ones(N, w);
  FixedTargetModel model(target);
  GuidanceConfig cfg;
  cfg.seed = 5;
  auto res = sample_completion(model, s, Xo, mask, cfg);
  REQUIRE(res.residual_trace.size() == 15);
  double expected = mask.cwiseProduct(Xo - target).squaredNorm();
  for (double r : res.residual_trace) CHECK(r == Catch::Approx(expected).epsilon(1e-12));
}

TEST_CASE("rho schedule mode") {
  auto s = cosine_schedule(100);
  GuidanceConfig cfg;
  cfg.rho_mode = RhoMode::Schedule;
  SECTION("needs sigma_z") { CHECK_THROWS_AS(cfg.rho(10, s), ValidationError); }
  SECTION("matches (1-alpha)/(sqrt(alpha) sigma^2)") {
    cfg.sigma_z = 0.3;
    for (int t : {1, 25, 99}) {
      double a = s.alpha[t];
      CHECK(cfg.rho(t, s) ==
            Catch::Approx((1 - a) / (std::sqrt(a) * 0.09)).epsilon(1e-12));
    }
  }
}

TEST_CASE("assemble_series") {
  Rng rng(15);
  SECTION("inverts make_windows with overlap") {
    TrafficTensor X{random_uniform(4, 20, rng)};
    auto b = make_windows(X, 6, 1);
    auto back = assemble_series(b.windows, b.origin_times);
    CHECK(back.values.rows() == 4);
    CHECK(back.values.cols() == 20);
    CHECK((back.values - X.values).cwiseAbs().maxCoeff() < 1e-12);
  }
  SECTION("inverts make_windows without overlap") {
    TrafficTensor X{random_uniform(3, 24, rng)};
    auto b = make_windows(X, 8, 8);
    auto back = assemble_series(b.windows, b.origin_times);
    CHECK(back.values == X.values);
  }
  SECTION("overlapping cells are averaged") {
    Matrix w1 = Matrix::Constant(2, 3, 1.0);
    Matrix w2 = Matrix::Constant(2, 3, 3.0);
    auto out = assemble_series({w1, w2}, {0, 2});
    CHECK(out.values(0, 0) == 1.0);
    CHECK(out.values(0, 2) == 2.0);  // overlap slot: mean of 1 and 3
    CHECK(out.values(0, 4) == 3.0);
  }
  SECTION("coverage gap rejected") {
    Matrix w1 = Matrix::Ones(2, 2);
    CHECK_THROWS_AS(assemble_series({w1, w1}, {0, 3}), ValidationError);
  }
}

TEST_CASE("seeded overloads are reproducible") {
  const int N = 3, w = 2, T = 20;
  auto s = cosine_schedule(T);
  TransformerDenoiser model(tiny_config(N, w, T), 80);
  GuidanceConfig cfg;
  cfg.seed = 21;
  auto a = sample_unconditional(model, s, cfg, N, w);
  auto b = sample_unconditional(model, s, cfg, N, w);
  CHECK(a.x0 == b.x0);
  cfg.seed = 22;
  auto c = sample_unconditional(model, s, cfg, N, w);
  CHECK(a.x0 != c.x0);
}
