// tm-diffuse: train a diffusion model on partially observed traffic matrices
// and sample it for tomography, completion, and synthesis.

#include <tmdiffuse/tmdiffuse.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

using namespace tmd;

namespace {

using ConfigMap = std::map<std::string, std::string>;

ConfigMap default_config() {
  const char* env = std::getenv("TM_DIFFUSE_DATA_DIR");
  return {
      {"data_dir", env ? env : "."},
      {"out_dir", ""},  // empty: same as data_dir
      {"input_csv", "trace.csv"},
      {"layout", "rows_are_time"},
      {"train_len", "3000"},
      {"test_len", "672"},
      {"window_len", "12"},
      {"window_stride", "12"},
      {"mask_rate", "0.3"},
      {"mask_seed", "1"},
      {"diffusion_steps", "300"},
      {"schedule", "cosine"},
      {"model_dim", "96"},
      {"heads", "8"},
      {"encoder_blocks", "2"},
      {"decoder_blocks", "2"},
      {"ff_dim", "0"},
      {"batch_size", "64"},
      {"learning_rate", "8e-4"},
      {"warmup_iters", "500"},
      {"epochs_pre", "200"},
      {"epochs_diff", "400"},
      {"loss", "squared"},
      {"seed", "0"},
      {"rho", "0.05"},
      {"rho_mode", "fixed"},
      {"sigma_z", "0"},
      {"ddim_stride", "1"},
      {"em_iters", "20"},
      {"jobs", "1"},
      {"num_samples", "16"},
      {"routing_csv", ""},
      {"linkload_csv", ""},
      {"link_noise", "0"},
      {"use_link_loads", "0"},
      {"eval_mask_rate", "0.5"},
      {"eval_mask_seed", "7"},
      {"truth_csv", ""},
      {"estimate_csv", ""},
      {"mask_csv", ""},
      {"checkpoint", "checkpoint.json"},
      {"resume", "0"},
      {"simulate", "0"},
  };
}

// Flat key=value file; '#' starts a comment, blank lines ignored.
void apply_config_file(ConfigMap& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file: " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    size_t a = line.find_first_not_of(" \t");
    if (a == std::string::npos) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError(path + ":" + std::to_string(lineno) + ": expected key=value");
    auto trim = [](std::string s) {
      size_t x = s.find_first_not_of(" \t");
      size_t y = s.find_last_not_of(" \t");
      return x == std::string::npos ? std::string() : s.substr(x, y - x + 1);
    };
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (!cfg.count(key))
      throw ValidationError(path + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    cfg[key] = val;
  }
}

int cfg_int(const ConfigMap& c, const std::string& k) {
  try {
    return std::stoi(c.at(k));
  } catch (const std::exception&) {
    throw ValidationError("config key '" + k + "' is not an integer: " + c.at(k));
  }
}

double cfg_real(const ConfigMap& c, const std::string& k) {
  try {
    return std::stod(c.at(k));
  } catch (const std::exception&) {
    throw ValidationError("config key '" + k + "' is not a number: " + c.at(k));
  }
}

std::uint64_t cfg_seed(const ConfigMap& c, const std::string& k) {
  try {
    return std::stoull(c.at(k));
  } catch (const std::exception&) {
    throw ValidationError("config key '" + k + "' is not a seed: " + c.at(k));
  }
}

bool cfg_flag(const ConfigMap& c, const std::string& k) { return c.at(k) == "1"; }

std::string join_dir(const std::string& dir, const std::string& name) {
  if (name.empty() || name.front() == '/') return name;
  return dir + "/" + name;
}

std::string data_path(const ConfigMap& c, const std::string& key) {
  return join_dir(c.at("data_dir"), c.at(key));
}

std::string out_dir(const ConfigMap& c) {
  return c.at("out_dir").empty() ? c.at("data_dir") : c.at("out_dir");
}

std::string out_path(const ConfigMap& c, const std::string& name) {
  return join_dir(out_dir(c), name);
}

CsvLayout parse_layout(const ConfigMap& c) {
  const std::string& l = c.at("layout");
  if (l == "rows_are_time") return CsvLayout::RowsAreTime;
  if (l == "rows_are_flows") return CsvLayout::RowsAreFlows;
  throw ValidationError("layout must be rows_are_time or rows_are_flows, got " + l);
}

DenoiserConfig denoiser_config(const ConfigMap& c, int flow_count) {
  DenoiserConfig d;
  d.model_dim = cfg_int(c, "model_dim");
  d.heads = cfg_int(c, "heads");
  d.encoder_blocks = cfg_int(c, "encoder_blocks");
  d.decoder_blocks = cfg_int(c, "decoder_blocks");
  d.ff_dim = cfg_int(c, "ff_dim");
  d.window_len = cfg_int(c, "window_len");
  d.flow_count = flow_count;
  d.diffusion_steps = cfg_int(c, "diffusion_steps");
  d.validate();
  return d;
}

TrainConfig train_config(const ConfigMap& c) {
  TrainConfig t;
  t.batch_size = cfg_int(c, "batch_size");
  t.learning_rate = cfg_real(c, "learning_rate");
  t.warmup_iters = cfg_int(c, "warmup_iters");
  t.epochs_pre = cfg_int(c, "epochs_pre");
  t.epochs_diff = cfg_int(c, "epochs_diff");
  t.seed = cfg_seed(c, "seed");
  const std::string& l = c.at("loss");
  if (l == "squared")
    t.loss = LossKind::Squared;
  else if (l == "absolute")
    t.loss = LossKind::Absolute;
  else
    throw ValidationError("loss must be squared or absolute, got " + l);
  return t;
}

GuidanceConfig guidance_config(const ConfigMap& c) {
  GuidanceConfig g;
  g.rho_fixed = cfg_real(c, "rho");
  const std::string& m = c.at("rho_mode");
  if (m == "fixed")
    g.rho_mode = RhoMode::Fixed;
  else if (m == "schedule")
    g.rho_mode = RhoMode::Schedule;
  else
    throw ValidationError("rho_mode must be fixed or schedule, got " + m);
  g.sigma_z = cfg_real(c, "sigma_z");
  g.ddim_stride = cfg_int(c, "ddim_stride");
  g.em_iters = cfg_int(c, "em_iters");
  g.seed = cfg_seed(c, "seed");
  return g;
}

NoiseSchedule schedule_for(const ConfigMap& c) {
  require(c.at("schedule") == "cosine", "unknown schedule type: " + c.at("schedule"));
  return cosine_schedule(cfg_int(c, "diffusion_steps"));
}

NormalizationParams read_norm(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open normalization file: " + path);
  NormalizationParams p;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::string key;
    if (!std::getline(ss, key, '=')) continue;
    double v;
    ss >> v;
    if (key == "clip_value") p.clip_value = v;
    if (key == "scale") p.scale = v;
  }
  require(p.clip_value > 0 && p.scale > 0, "malformed normalization file: " + path);
  return p;
}

void write_norm(const std::string& path, const NormalizationParams& p) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write file: " + path);
  out << std::setprecision(17);
  out << "clip_value=" << p.clip_value << "\n";
  out << "scale=" << p.scale << "\n";
}

void write_manifest(const ConfigMap& c, const std::string& command,
                    const nlohmann::json& results) {
  nlohmann::json j;
  j["command"] = command;
  j["config"] = c;
  j["results"] = results;
  std::string path = out_path(c, "manifest_" + command + ".json");
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write manifest: " + path);
  out << j.dump(2) << "\n";
}

// Window origins covering [0, T) completely: fixed stride plus a tail window.
std::vector<int> cover_origins(int T, int w, int stride) {
  require(T >= w, "series shorter than one window");
  std::vector<int> out;
  for (int o = 0; o + w <= T; o += stride) out.push_back(o);
  if (out.back() + w < T) out.push_back(T - w);
  return out;
}

template <typename Fn>
void parallel_for(int n, int jobs, Fn fn) {
  jobs = std::max(1, std::min(jobs, n));
  if (jobs == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(jobs);
  for (int t = 0; t < jobs; ++t)
    pool.emplace_back([&, t] {
      try {
        for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// Minimal line chart; one polyline over an axis frame, no dependencies.
void write_svg_line(const std::string& path, const std::vector<double>& ys,
                    const std::string& title) {
  const int W = 640, H = 360, pad = 48;
  double ymin = 0.0, ymax = 1e-12;
  for (double y : ys)
    if (std::isfinite(y)) ymax = std::max(ymax, y);
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write file: " + path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\">\n";
  out << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
  out << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title
      << "</text>\n";
  out << "<line x1=\"" << pad << "\" y1=\"" << H - pad << "\" x2=\"" << W - pad << "\" y2=\""
      << H - pad << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << pad << "\" y1=\"" << pad << "\" x2=\"" << pad << "\" y2=\"" << H - pad
      << "\" stroke=\"black\"/>\n";
  out << "<text x=\"" << pad - 4 << "\" y=\"" << pad << "\" text-anchor=\"end\" font-size=\"10\">"
      << std::setprecision(3) << ymax << "</text>\n";
  out << "<text x=\"" << pad - 4 << "\" y=\"" << H - pad << "\" text-anchor=\"end\" "
      << "font-size=\"10\">0</text>\n";
  out << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"";
  int n = static_cast<int>(ys.size());
  for (int i = 0; i < n; ++i) {
    if (!std::isfinite(ys[i])) continue;
    double x = pad + (W - 2.0 * pad) * (n > 1 ? double(i) / (n - 1) : 0.5);
    double y = H - pad - (H - 2.0 * pad) * (ys[i] - ymin) / (ymax - ymin);
    out << std::setprecision(6) << x << ',' << y << ' ';
  }
  out << "\"/>\n</svg>\n";
}

struct LoadedCheckpoint {
  Checkpoint ck;
  NoiseSchedule schedule;
};

LoadedCheckpoint load_model(const ConfigMap& c) {
  LoadedCheckpoint lc{load_checkpoint(data_path(c, "checkpoint")), {}};
  require(lc.ck.schedule_type == c.at("schedule"),
          "checkpoint schedule '" + lc.ck.schedule_type + "' does not match config");
  lc.schedule = cosine_schedule(lc.ck.config.diffusion_steps);
  return lc;
}

// ---------------------------------------------------------------------------

int cmd_ingest(const ConfigMap& c) {
  auto [X, Mfile] = ingest_csv(data_path(c, "input_csv"), parse_layout(c));
  int train_len = cfg_int(c, "train_len");
  int test_len = cfg_int(c, "test_len");
  auto [train_raw, test_raw] = train_test_split(X, train_len, test_len);

  // normalization is fitted on the training split only
  auto [train_norm, norm] = clip_and_normalize(train_raw);
  TrafficTensor test_norm = apply_normalization(test_raw, norm);

  int N = X.flow_count();
  auto train_rand = build_random_mask(N, train_len, cfg_real(c, "mask_rate"),
                                      cfg_seed(c, "mask_seed"));
  Matrix train_mask = train_rand.bits.cwiseProduct(Mfile.bits.leftCols(train_len));
  Matrix test_mask = Mfile.bits.middleCols(train_len, test_len);

  write_csv_matrix(out_path(c, "train.csv"), train_norm.values);
  write_csv_matrix(out_path(c, "test.csv"), test_norm.values);
  write_csv_matrix(out_path(c, "train_mask.csv"), train_mask);
  write_csv_matrix(out_path(c, "test_mask.csv"), test_mask);
  write_norm(out_path(c, "norm.txt"), norm);

  nlohmann::json res;
  res["flow_count"] = N;
  res["train_len"] = train_len;
  res["test_len"] = test_len;
  res["clip_value"] = norm.clip_value;
  res["scale"] = norm.scale;
  res["train_observed"] = train_mask.sum();
  write_manifest(c, "ingest", res);
  std::cout << "ingested " << N << " flows, " << train_len << "+" << test_len << " slots\n";
  return 0;
}

int cmd_train(const ConfigMap& c) {
  Matrix train = read_csv_matrix(out_path(c, "train.csv"));
  Matrix mask = read_csv_matrix(out_path(c, "train_mask.csv"));
  NormalizationParams norm = read_norm(out_path(c, "norm.txt"));
  require(train.rows() == mask.rows() && train.cols() == mask.cols(),
          "train tensor and mask shapes differ");
  int N = static_cast<int>(train.rows());
  int w = cfg_int(c, "window_len");
  int stride = cfg_int(c, "window_stride");
  DenoiserConfig dcfg = denoiser_config(c, N);
  TrainConfig tcfg = train_config(c);
  NoiseSchedule schedule = schedule_for(c);

  Checkpoint ck;
  ck.config = dcfg;
  ck.norm = norm;
  ck.schedule_type = c.at("schedule");
  if (cfg_flag(c, "resume")) {
    ck = load_checkpoint(data_path(c, "checkpoint"), dcfg);
    require(ck.preprocessor != nullptr, "resume checkpoint lacks a preprocessor");
  } else {
    ck.denoiser = std::make_unique<TransformerDenoiser>(dcfg, tcfg.seed);
    ck.preprocessor = std::make_unique<Preprocessor>(N, tcfg.seed + 1);
  }

  TrafficTensor Xt{train};
  ObservationMask M{mask};
  auto raw_windows = make_windows(Xt, w, stride).windows;
  auto msk_windows = mask_windows(M, w, stride);

  std::vector<double> pre_trace, diff_trace;
  if (!cfg_flag(c, "resume"))
    pre_trace = train_preprocessor(*ck.preprocessor, raw_windows, msk_windows, tcfg);
  TrafficTensor imputed = impute_dataset(*ck.preprocessor, Xt, M);
  auto imp_windows = make_windows(imputed, w, stride).windows;
  diff_trace = train_denoiser(*ck.denoiser, imp_windows, msk_windows, tcfg, schedule);

  // write-then-rename keeps the previous checkpoint intact on failure
  std::string final_path = out_path(c, c.at("checkpoint"));
  std::string tmp_path = final_path + ".tmp";
  save_checkpoint(ck, tmp_path);
  if (std::rename(tmp_path.c_str(), final_path.c_str()) != 0)
    throw ValidationError("cannot move checkpoint into place: " + final_path);

  std::ofstream lc(out_path(c, "loss_curve.csv"));
  if (!lc) throw ValidationError("cannot write loss curve");
  lc << std::setprecision(17) << "stage,iter,loss\n";
  for (size_t i = 0; i < pre_trace.size(); ++i) lc << "pre," << i << ',' << pre_trace[i] << '\n';
  for (size_t i = 0; i < diff_trace.size(); ++i)
    lc << "diffusion," << i << ',' << diff_trace[i] << '\n';

  nlohmann::json res;
  res["pre_iters"] = pre_trace.size();
  res["diffusion_iters"] = diff_trace.size();
  res["final_pre_loss"] = pre_trace.empty() ? 0.0 : pre_trace.back();
  res["final_diffusion_loss"] = diff_trace.empty() ? 0.0 : diff_trace.back();
  write_manifest(c, "train", res);
  std::cout << "trained: " << pre_trace.size() << " pre iters, " << diff_trace.size()
            << " diffusion iters\n";
  return 0;
}

int cmd_synth(const ConfigMap& c) {
  auto lc = load_model(c);
  const DenoiserConfig& dcfg = lc.ck.config;
  GuidanceConfig gcfg = guidance_config(c);
  int k = cfg_int(c, "num_samples");
  require(k >= 1, "num_samples must be >= 1");
  std::uint64_t base_seed = cfg_seed(c, "seed");

  std::vector<Matrix> synth(k);
  parallel_for(k, cfg_int(c, "jobs"), [&](int i) {
    GuidanceConfig g = gcfg;
    g.seed = base_seed + static_cast<std::uint64_t>(i);
    synth[i] = sample_unconditional(*lc.ck.denoiser, lc.schedule, g, dcfg.flow_count,
                                    dcfg.window_len)
                   .x0;
  });

  // denormalized samples, one flattened window per row
  std::ofstream out(out_path(c, "synth_windows.csv"));
  if (!out) throw ValidationError("cannot write synth windows");
  out << std::setprecision(17);
  for (const auto& win : synth) {
    Matrix d = win * lc.ck.norm.scale;
    if (d.minCoeff() < 0 || d.maxCoeff() > lc.ck.norm.scale)
      throw NumericError("synthesized sample outside [0, scale]");
    bool first = true;
    for (int j = 0; j < d.cols(); ++j)
      for (int i = 0; i < d.rows(); ++i) {
        if (!first) out << ',';
        out << d(i, j);
        first = false;
      }
    out << '\n';
  }
  out.close();

  nlohmann::json res;
  res["num_samples"] = k;
  Matrix test = read_csv_matrix(out_path(c, "test.csv"));
  require(test.rows() == dcfg.flow_count, "test tensor flow count differs from checkpoint");
  auto real = make_windows(TrafficTensor{test}, dcfg.window_len, dcfg.window_len).windows;
  export_flat_samples(real, synth, out_path(c, "flat_samples.csv"));
  if (real.size() >= 2 && synth.size() >= 2)
    res["mmd2"] = mmd2(flatten_windows(real), flatten_windows(synth));
  write_manifest(c, "synth", res);
  std::cout << "synthesized " << k << " windows\n";
  return 0;
}

int cmd_tomo(const ConfigMap& c) {
  auto lc = load_model(c);
  const DenoiserConfig& dcfg = lc.ck.config;
  int w = dcfg.window_len;
  require(!c.at("routing_csv").empty(), "tomo needs routing_csv");
  RoutingMatrix A{read_csv_matrix(data_path(c, "routing_csv"))};
  require(A.flow_count() == dcfg.flow_count,
          "routing matrix has " + std::to_string(A.flow_count()) + " flows, model has " +
              std::to_string(dcfg.flow_count));

  Matrix truth;  // normalized; empty when unavailable
  if (std::ifstream(out_path(c, "test.csv")).good())
    truth = read_csv_matrix(out_path(c, "test.csv"));

  Matrix Y;
  if (cfg_flag(c, "simulate")) {
    require(truth.size() > 0, "--simulate needs an ingested test split");
    auto ll = link_loads(A, TrafficTensor{truth}, cfg_real(c, "link_noise"),
                         cfg_seed(c, "mask_seed"));
    Y = ll.values;
  } else {
    require(!c.at("linkload_csv").empty(), "tomo needs linkload_csv or simulate=1");
    Y = read_csv_matrix(data_path(c, "linkload_csv")) / lc.ck.norm.scale;
    require(Y.rows() == A.link_count(), "link loads have " + std::to_string(Y.rows()) +
                                            " links, routing matrix has " +
                                            std::to_string(A.link_count()));
  }

  int T = static_cast<int>(Y.cols());
  GuidanceConfig gcfg = guidance_config(c);
  std::uint64_t base_seed = cfg_seed(c, "seed");
  auto origins = cover_origins(T, w, cfg_int(c, "window_stride"));
  int K = static_cast<int>(origins.size());
  std::vector<Matrix> est(K);
  std::vector<std::vector<double>> traces(K);
  parallel_for(K, cfg_int(c, "jobs"), [&](int i) {
    GuidanceConfig g = gcfg;
    g.seed = base_seed + static_cast<std::uint64_t>(i);
    auto r = sample_tomography(*lc.ck.denoiser, lc.schedule, A, Y.middleCols(origins[i], w), g, w);
    est[i] = std::move(r.x0);
    traces[i] = std::move(r.residual_trace);
  });
  Matrix Xhat = assemble_series(est, origins).values;

  double rel_residual = (Y - A.entries * Xhat).norm() / std::max(Y.norm(), 1e-300);
  write_csv_matrix(out_path(c, "xhat_tomo.csv"), Xhat * lc.ck.norm.scale);

  nlohmann::json res;
  res["windows"] = K;
  res["rel_residual"] = rel_residual;
  for (const auto& t : traces) res["residual_traces"].push_back(t);
  if (truth.size() > 0) {
    Matrix truth_d = truth * lc.ck.norm.scale;
    Matrix xhat_d = Xhat * lc.ck.norm.scale;
    Matrix none = Matrix::Zero(truth.rows(), truth.cols());
    res["nmae"] = nmae(truth_d, xhat_d, none);
    res["nrmse"] = nrmse(truth_d, xhat_d, none);
    auto t = tre(truth_d, xhat_d);
    std::ofstream tc(out_path(c, "tre.csv"));
    if (!tc) throw ValidationError("cannot write tre.csv");
    tc << std::setprecision(17) << "slot,tre\n";
    for (size_t j = 0; j < t.size(); ++j) tc << j << ',' << t[j] << '\n';
    write_svg_line(out_path(c, "tre.svg"), t, "temporal relative error");
    MetricReport rep;
    rep.nmae = res["nmae"];
    rep.nrmse = res["nrmse"];
    rep.unobserved_count = truth.size();
    write_metric_report(rep, out_path(c, "report_tomo.txt"));
  }
  write_manifest(c, "tomo", res);
  std::cout << "tomography rel_residual=" << rel_residual << "\n";
  return 0;
}

int cmd_complete(const ConfigMap& c) {
  auto lc = load_model(c);
  const DenoiserConfig& dcfg = lc.ck.config;
  int w = dcfg.window_len;
  Matrix truth = read_csv_matrix(out_path(c, "test.csv"));
  require(truth.rows() == dcfg.flow_count, "test tensor flow count differs from checkpoint");
  int N = static_cast<int>(truth.rows());
  int T = static_cast<int>(truth.cols());

  double rate = cfg_real(c, "eval_mask_rate");
  auto M = build_random_mask(N, T, rate, cfg_seed(c, "eval_mask_seed"));
  Matrix Xo = truth.cwiseProduct(M.bits);

  nlohmann::json res;
  res["eval_mask_rate"] = rate;
  Matrix Xhat;
  if (M.bits.sum() >= static_cast<double>(M.bits.size())) {
    Xhat = truth;  // fully observed: nothing to complete
    res["nmae"] = "na";
    res["nrmse"] = "na";
  } else {
    require(M.bits.sum() > 0, "empty observation mask");
    const RoutingMatrix* Aptr = nullptr;
    const Matrix* Yptr = nullptr;
    RoutingMatrix A;
    Matrix Y;
    if (cfg_flag(c, "use_link_loads")) {
      require(!c.at("routing_csv").empty(), "use_link_loads needs routing_csv");
      A.entries = read_csv_matrix(data_path(c, "routing_csv"));
      Y = A.entries * truth;  // fully measured link loads for the hybrid mode
      Aptr = &A;
      Yptr = &Y;
    }

    GuidanceConfig gcfg = guidance_config(c);
    std::uint64_t base_seed = cfg_seed(c, "seed");
    auto origins = cover_origins(T, w, cfg_int(c, "window_stride"));
    int K = static_cast<int>(origins.size());
    std::vector<Matrix> est(K);
    parallel_for(K, cfg_int(c, "jobs"), [&](int i) {
      GuidanceConfig g = gcfg;
      g.seed = base_seed + static_cast<std::uint64_t>(i);
      Matrix xo_win = Xo.middleCols(origins[i], w);
      Matrix m_win = M.bits.middleCols(origins[i], w);
      Matrix y_win;
      const Matrix* yw = nullptr;
      if (Yptr) {
        y_win = Yptr->middleCols(origins[i], w);
        yw = &y_win;
      }
      est[i] = sample_completion(*lc.ck.denoiser, lc.schedule, xo_win, m_win, g, Aptr, yw).x0;
    });
    Xhat = assemble_series(est, origins).values;
    // overlap averaging never mixes observed entries with anything else,
    // but re-pin them so the contract is exact
    Xhat = M.bits.cwiseProduct(truth) + (Matrix::Ones(N, T) - M.bits).cwiseProduct(Xhat);

    Matrix truth_d = truth * lc.ck.norm.scale;
    Matrix xhat_d = Xhat * lc.ck.norm.scale;
    MetricReport rep;
    rep.nmae = nmae(truth_d, xhat_d, M.bits);
    rep.nrmse = nrmse(truth_d, xhat_d, M.bits);
    rep.observed_count = static_cast<long>(M.bits.sum());
    rep.unobserved_count = static_cast<long>(M.bits.size()) - rep.observed_count;
    write_metric_report(rep, out_path(c, "report_complete.txt"));
    res["nmae"] = rep.nmae;
    res["nrmse"] = rep.nrmse;

    Matrix base_d = baseline_interpolate(TrafficTensor{truth}, M).values * lc.ck.norm.scale;
    res["baseline_nmae"] = nmae(truth_d, base_d, M.bits);
  }
  write_csv_matrix(out_path(c, "xhat_complete.csv"), Xhat * lc.ck.norm.scale);
  write_manifest(c, "complete", res);
  std::cout << "completion nmae="
            << (res["nmae"].is_string() ? res["nmae"].get<std::string>()
                                        : std::to_string(res["nmae"].get<double>()))
            << "\n";
  return 0;
}

int cmd_eval(const ConfigMap& c) {
  require(!c.at("truth_csv").empty() && !c.at("estimate_csv").empty(),
          "eval needs truth_csv and estimate_csv");
  Matrix truth = read_csv_matrix(data_path(c, "truth_csv"));
  Matrix est = read_csv_matrix(data_path(c, "estimate_csv"));
  require(truth.rows() == est.rows() && truth.cols() == est.cols(),
          "truth is " + std::to_string(truth.rows()) + "x" + std::to_string(truth.cols()) +
              ", estimate is " + std::to_string(est.rows()) + "x" + std::to_string(est.cols()));
  Matrix mask;
  if (!c.at("mask_csv").empty()) {
    mask = read_csv_matrix(data_path(c, "mask_csv"));
    require(mask.rows() == truth.rows() && mask.cols() == truth.cols(),
            "mask shape differs from truth");
  } else {
    mask = Matrix::Zero(truth.rows(), truth.cols());  // evaluate every entry
  }

  MetricReport rep;
  rep.nmae = nmae(truth, est, mask);
  rep.nrmse = nrmse(truth, est, mask);
  rep.tre = tre(truth, est);
  for (int i = 0; i < mask.rows(); ++i)
    for (int j = 0; j < mask.cols(); ++j)
      (mask(i, j) > 0.5 ? rep.observed_count : rep.unobserved_count)++;
  write_metric_report(rep, out_path(c, "report_eval.txt"));

  nlohmann::json res;
  res["nmae"] = rep.nmae;
  res["nrmse"] = rep.nrmse;
  write_manifest(c, "eval", res);
  std::cout << std::setprecision(17) << "nmae=" << rep.nmae << "\nnrmse=" << rep.nrmse << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"diffusion-based traffic matrix analysis"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed = 0;
  int jobs = 0, steps = 0, stride = 0;
  double rho = -1.0;
  bool simulate = false;

  std::vector<std::pair<std::string, CLI::App*>> subs;
  for (const char* name : {"ingest", "train", "synth", "tomo", "complete", "eval"}) {
    CLI::App* s = app.add_subcommand(name);
    s->add_option("--config", config_path, "key=value config file");
    s->add_option("--seed", seed, "base RNG seed");
    s->add_option("--jobs", jobs, "worker threads for window sampling");
    s->add_option("--steps", steps, "diffusion steps T");
    s->add_option("--stride", stride, "DDIM sampling stride");
    s->add_option("--rho", rho, "guidance strength");
    s->add_flag("--simulate", simulate, "synthesize link loads from ground truth");
    subs.emplace_back(name, s);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    ConfigMap cfg = default_config();
    if (!config_path.empty()) apply_config_file(cfg, config_path);
    for (auto& [name, s] : subs) {
      if (!s->parsed()) continue;
      if (s->count("--seed")) cfg["seed"] = std::to_string(seed);
      if (s->count("--jobs")) cfg["jobs"] = std::to_string(jobs);
      if (s->count("--steps")) cfg["diffusion_steps"] = std::to_string(steps);
      if (s->count("--stride")) cfg["ddim_stride"] = std::to_string(stride);
      if (s->count("--rho")) {
        std::ostringstream ss;
        ss << std::setprecision(17) << rho;
        cfg["rho"] = ss.str();
      }
      if (simulate) cfg["simulate"] = "1";
      if (name == "ingest") return cmd_ingest(cfg);
      if (name == "train") return cmd_train(cfg);
      if (name == "synth") return cmd_synth(cfg);
      if (name == "tomo") return cmd_tomo(cfg);
      if (name == "complete") return cmd_complete(cfg);
      if (name == "eval") return cmd_eval(cfg);
    }
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 1;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
