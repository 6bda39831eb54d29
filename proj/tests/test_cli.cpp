#include <catch2/catch_amalgamated.hpp>

#include <tmdiffuse/csv.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

using namespace tmd;
namespace fs = std::filesystem;

namespace {

std::string binary() {
  const char* b = std::getenv("TM_DIFFUSE_BIN");
  REQUIRE(b != nullptr);
  return b;
}

int run(const std::string& args) {
  std::string cmd = binary() + " " + args + " >/dev/null 2>&1";
  int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

struct Workdir {
  fs::path dir;
  Workdir() {
    dir = fs::temp_directory_path() / ("tmdiffuse_cli_" + std::to_string(::getpid()) + "_" +
                                       std::to_string(counter++));
    fs::create_directories(dir);
  }
  ~Workdir() { fs::remove_all(dir); }
  std::string path(const std::string& name) const { return (dir / name).string(); }
  static int counter;
};
int Workdir::counter = 0;

void write_trace(const std::string& path, int T, int N) {
  std::ofstream out(path);
  for (int t = 0; t < T; ++t) {
    for (int f = 0; f < N; ++f) {
      if (f) out << ',';
      out << 50.0 + 30.0 * std::sin(2 * M_PI * t / 24.0 + f) + 0.1 * ((t * 7 + f * 3) % 11);
    }
    out << '\n';
  }
}

void write_config(const std::string& path, const std::string& dir,
                  const std::string& extra = "") {
  std::ofstream out(path);
  out << "data_dir = " << dir << "\n"
      << "input_csv = trace.csv\n"
      << "train_len = 120\n"
      << "test_len = 24\n"
      << "window_len = 12\n"
      << "window_stride = 12\n"
      << "mask_rate = 0.8\n"
      << "diffusion_steps = 20\n"
      << "model_dim = 8\nheads = 2\nencoder_blocks = 1\ndecoder_blocks = 1\nff_dim = 16\n"
      << "batch_size = 8\nepochs_pre = 5\nepochs_diff = 5\nwarmup_iters = 5\n"
      << "ddim_stride = 2\nnum_samples = 3\neval_mask_rate = 0.5\n"
      << extra;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("bad invocations exit with code 2") {
  CHECK(run("ingest --config /no/such/config.txt") == 2);
  CHECK(run("bogus-subcommand") == 2);

  Workdir wd;
  write_config(wd.path("config.txt"), wd.dir.string());  // trace.csv missing
  CHECK(run("ingest --config " + wd.path("config.txt")) == 2);

  std::ofstream(wd.path("bad.txt")) << "no_such_key = 1\n";
  CHECK(run("ingest --config " + wd.path("bad.txt")) == 2);
}

TEST_CASE("pipeline end to end") {
  Workdir wd;
  write_trace(wd.path("trace.csv"), 150, 4);
  write_config(wd.path("config.txt"), wd.dir.string());
  std::string cfg = " --config " + wd.path("config.txt");

  REQUIRE(run("ingest" + cfg) == 0);
  CHECK(fs::exists(wd.path("train.csv")));
  CHECK(fs::exists(wd.path("test.csv")));
  CHECK(fs::exists(wd.path("train_mask.csv")));
  CHECK(fs::exists(wd.path("norm.txt")));
  CHECK(fs::exists(wd.path("manifest_ingest.json")));
  Matrix train = read_csv_matrix(wd.path("train.csv"));
  CHECK(train.rows() == 4);
  CHECK(train.cols() == 120);
  CHECK(train.maxCoeff() <= 1.0);
  CHECK(train.minCoeff() >= 0.0);

  REQUIRE(run("train" + cfg) == 0);
  CHECK(fs::exists(wd.path("checkpoint.json")));
  CHECK(fs::exists(wd.path("loss_curve.csv")));

  REQUIRE(run("synth" + cfg) == 0);
  Matrix synth = read_csv_matrix(wd.path("synth_windows.csv"));
  CHECK(synth.rows() == 3);   // num_samples
  CHECK(synth.cols() == 48);  // N * w
  CHECK(fs::exists(wd.path("flat_samples.csv")));

  std::ofstream rt(wd.path("routing.csv"));
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) rt << (i == j ? "1" : "0") << (j < 3 ? "," : "");
    rt << '\n';
  }
  rt.close();
  std::ofstream(wd.path("config2.txt")) << slurp(wd.path("config.txt"))
                                        << "routing_csv = routing.csv\n";
  REQUIRE(run("tomo --simulate --config " + wd.path("config2.txt")) == 0);
  CHECK(fs::exists(wd.path("xhat_tomo.csv")));
  CHECK(fs::exists(wd.path("tre.csv")));
  CHECK(fs::exists(wd.path("tre.svg")));

  REQUIRE(run("complete" + cfg) == 0);
  Matrix xhat = read_csv_matrix(wd.path("xhat_complete.csv"));
  CHECK(xhat.rows() == 4);
  CHECK(xhat.cols() == 24);
  CHECK(xhat.minCoeff() >= 0.0);
  CHECK(fs::exists(wd.path("report_complete.txt")));

  // eval on identical files reports zeros
  std::ofstream(wd.path("config3.txt")) << slurp(wd.path("config.txt"))
                                        << "truth_csv = test.csv\nestimate_csv = test.csv\n";
  REQUIRE(run("eval --config " + wd.path("config3.txt")) == 0);
  std::string report = slurp(wd.path("report_eval.txt"));
  CHECK(report.find("nmae=0\n") != std::string::npos);
  CHECK(report.find("nrmse=0\n") != std::string::npos);
}

TEST_CASE("fixed seeds give bit-identical outputs, different seeds differ") {
  Workdir wd;
  write_trace(wd.path("trace.csv"), 150, 4);
  write_config(wd.path("config.txt"), wd.dir.string());
  std::string cfg = " --config " + wd.path("config.txt");
  REQUIRE(run("ingest" + cfg) == 0);
  REQUIRE(run("train" + cfg) == 0);

  REQUIRE(run("synth --seed 5" + cfg) == 0);
  std::string a = slurp(wd.path("synth_windows.csv"));
  REQUIRE(run("synth --seed 5" + cfg) == 0);
  CHECK(slurp(wd.path("synth_windows.csv")) == a);
  REQUIRE(run("synth --seed 6" + cfg) == 0);
  CHECK(slurp(wd.path("synth_windows.csv")) != a);

  // training is seed-reproducible too
  std::string ck = slurp(wd.path("checkpoint.json"));
  REQUIRE(run("train" + cfg) == 0);
  CHECK(slurp(wd.path("checkpoint.json")) == ck);
}

TEST_CASE("mask rate 1.0 writes an all-ones training mask") {
  Workdir wd;
  write_trace(wd.path("trace.csv"), 150, 4);
  write_config(wd.path("config.txt"), wd.dir.string(), "");
  std::ofstream(wd.path("config_full.txt")) << slurp(wd.path("config.txt"))
                                            << "mask_rate = 1.0\n";
  REQUIRE(run("ingest --config " + wd.path("config_full.txt")) == 0);
  Matrix m = read_csv_matrix(wd.path("train_mask.csv"));
  CHECK(m.sum() == double(m.size()));
}

TEST_CASE("fully observed completion returns the input and reports nmae=na") {
  Workdir wd;
  write_trace(wd.path("trace.csv"), 150, 4);
  write_config(wd.path("config.txt"), wd.dir.string(), "eval_mask_rate = 1.0\n");
  std::string cfg = " --config " + wd.path("config.txt");
  REQUIRE(run("ingest" + cfg) == 0);
  REQUIRE(run("train" + cfg) == 0);
  REQUIRE(run("complete" + cfg) == 0);
  Matrix truth = read_csv_matrix(wd.path("test.csv"));
  Matrix xhat = read_csv_matrix(wd.path("xhat_complete.csv"));
  std::ifstream nf(wd.path("norm.txt"));
  std::string line;
  double scale = 0;
  while (std::getline(nf, line))
    if (line.rfind("scale=", 0) == 0) scale = std::stod(line.substr(6));
  REQUIRE(scale > 0);
  CHECK((xhat - truth * scale).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(slurp(wd.path("manifest_complete.json")).find("\"nmae\": \"na\"") != std::string::npos);
}

TEST_CASE("jobs flag does not change sampling results") {
  Workdir wd;
  write_trace(wd.path("trace.csv"), 150, 4);
  write_config(wd.path("config.txt"), wd.dir.string());
  std::string cfg = " --config " + wd.path("config.txt");
  REQUIRE(run("ingest" + cfg) == 0);
  REQUIRE(run("train" + cfg) == 0);
  REQUIRE(run("complete --seed 3 --jobs 1" + cfg) == 0);
  std::string a = slurp(wd.path("xhat_complete.csv"));
  REQUIRE(run("complete --seed 3 --jobs 4" + cfg) == 0);
  CHECK(slurp(wd.path("xhat_complete.csv")) == a);
}
