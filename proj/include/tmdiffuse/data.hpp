#pragma once

#include "core.hpp"
#include "csv.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <utility>
#include <vector>

namespace tmd {

// Flows x time matrix of nonnegative traffic volumes.
struct TrafficTensor {
  Matrix values;  // N x T
  int flow_count() const { return static_cast<int>(values.rows()); }
  int time_count() const { return static_cast<int>(values.cols()); }
};

// Binary flows x time matrix marking measured entries.
struct ObservationMask {
  Matrix bits;  // N x T over {0,1}
};

// M_links x N_flows matrix with entries in [0,1].
struct RoutingMatrix {
  Matrix entries;
  int link_count() const { return static_cast<int>(entries.rows()); }
  int flow_count() const { return static_cast<int>(entries.cols()); }
};

struct LinkLoads {
  Matrix values;  // M_links x T
  double noise_sigma = 0.0;
};

struct NormalizationParams {
  double clip_value = 0.0;
  double scale = 0.0;
};

struct WindowBatch {
  std::vector<Matrix> windows;  // each N x w
  int window_len = 0;
  std::vector<int> origin_times;
};

enum class CsvLayout { RowsAreTime, RowsAreFlows };

// Reads a trace CSV. Empty cells become value 0 with mask bit 0.
inline std::pair<TrafficTensor, ObservationMask> ingest_csv(const std::string& path,
                                                            CsvLayout layout) {
  CsvTable t = read_csv_table(path);
  require(!t.rows.empty(), "empty trace file: " + path);
  size_t cols = t.rows[0].size();
  int R = static_cast<int>(t.rows.size());
  int C = static_cast<int>(cols);
  Matrix vals(R, C), bits(R, C);
  for (int i = 0; i < R; ++i) {
    if (t.rows[i].size() != cols)
      throw ValidationError(path + ": ragged row at line " + std::to_string(i + 1));
    for (int j = 0; j < C; ++j) {
      double v = 0.0;
      if (parse_cell(t.rows[i][j], v) && std::isfinite(v)) {
        if (v < 0)
          throw ValidationError(path + ": negative value at line " + std::to_string(i + 1));
        vals(i, j) = v;
        bits(i, j) = 1.0;
      } else {
        vals(i, j) = 0.0;
        bits(i, j) = 0.0;
      }
    }
  }
  if (layout == CsvLayout::RowsAreTime) {
    vals.transposeInPlace();
    bits.transposeInPlace();
  }
  return {TrafficTensor{std::move(vals)}, ObservationMask{std::move(bits)}};
}

// Linear interpolation between order statistics, q in [0,1].
inline double percentile(std::vector<double> v, double q) {
  require(!v.empty(), "percentile of empty set");
  std::sort(v.begin(), v.end());
  double pos = q * (static_cast<double>(v.size()) - 1.0);
  size_t lo = static_cast<size_t>(std::floor(pos));
  size_t hi = static_cast<size_t>(std::ceil(pos));
  double frac = pos - static_cast<double>(lo);
  return v[lo] * (1.0 - frac) + v[hi] * frac;
}

// Clips at the empirical 99th percentile, then divides by the post-clip maximum.
inline std::pair<TrafficTensor, NormalizationParams> clip_and_normalize(const TrafficTensor& X) {
  require(X.values.maxCoeff() > 0, "all-zero tensor: normalization scale undefined");
  std::vector<double> flat(X.values.data(), X.values.data() + X.values.size());
  double clip = percentile(flat, 0.99);
  Matrix clipped = X.values.cwiseMin(clip);
  double scale = clipped.maxCoeff();
  require(scale > 0, "post-clip maximum is zero");
  NormalizationParams p{clip, scale};
  return {TrafficTensor{clipped / scale}, p};
}

inline TrafficTensor denormalize(const TrafficTensor& Xn, const NormalizationParams& p) {
  return TrafficTensor{Xn.values * p.scale};
}

// Applies the fitted clip+scale to another tensor (e.g. the test split).
inline TrafficTensor apply_normalization(const TrafficTensor& X, const NormalizationParams& p) {
  return TrafficTensor{X.values.cwiseMin(p.clip_value) / p.scale};
}

inline WindowBatch make_windows(const TrafficTensor& X, int w, int stride) {
  require(w > 0 && stride > 0, "window and stride must be positive");
  require(X.time_count() >= w, "window longer than series");
  WindowBatch b;
  b.window_len = w;
  int count = (X.time_count() - w) / stride + 1;
  for (int k = 0; k < count; ++k) {
    int origin = k * stride;
    b.windows.push_back(X.values.middleCols(origin, w));
    b.origin_times.push_back(origin);
  }
  return b;
}

inline std::vector<Matrix> mask_windows(const ObservationMask& M, int w, int stride) {
  TrafficTensor t{M.bits};
  return make_windows(t, w, stride).windows;
}

// Exactly round(rate*N*T) ones placed uniformly at random.
inline ObservationMask build_random_mask(int N, int T, double rate, std::uint64_t seed) {
  require(rate > 0.0 && rate <= 1.0, "mask rate must be in (0,1]");
  long total = static_cast<long>(N) * T;
  long ones = std::lround(rate * static_cast<double>(total));
  std::vector<long> idx(total);
  for (long i = 0; i < total; ++i) idx[i] = i;
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  Matrix bits = Matrix::Zero(N, T);
  for (long k = 0; k < ones; ++k) {
    long i = idx[k];
    bits(static_cast<int>(i % N), static_cast<int>(i / N)) = 1.0;
  }
  return ObservationMask{std::move(bits)};
}

// Y = A*X + z with z iid N(0, sigma_z^2).
inline LinkLoads link_loads(const RoutingMatrix& A, const TrafficTensor& X, double sigma_z,
                            std::uint64_t seed) {
  require(A.flow_count() == X.flow_count(),
          "routing matrix has " + std::to_string(A.flow_count()) + " flows, tensor has " +
              std::to_string(X.flow_count()));
  Matrix Y = A.entries * X.values;
  if (sigma_z > 0) {
    Rng rng(seed);
    Y += sigma_z * random_normal(static_cast<int>(Y.rows()), static_cast<int>(Y.cols()), rng);
  }
  return LinkLoads{std::move(Y), sigma_z};
}

// X_base(i,j) = mean + row deviation + col deviation over observed entries,
// with observed entries copied back verbatim.
inline TrafficTensor baseline_interpolate(const TrafficTensor& X, const ObservationMask& M) {
  require(M.bits.sum() > 0, "empty observation mask");
  int N = X.flow_count(), T = X.time_count();
  double total = 0.0;
  long count = 0;
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < T; ++j)
      if (M.bits(i, j) > 0.5) {
        total += X.values(i, j);
        ++count;
      }
  double global_mean = total / static_cast<double>(count);
  Vector row_dev = Vector::Zero(N), col_dev = Vector::Zero(T);
  for (int i = 0; i < N; ++i) {
    double s = 0.0;
    int c = 0;
    for (int j = 0; j < T; ++j)
      if (M.bits(i, j) > 0.5) {
        s += X.values(i, j) - global_mean;
        ++c;
      }
    row_dev(i) = c ? s / c : 0.0;  // unobserved row falls back to the global mean
  }
  for (int j = 0; j < T; ++j) {
    double s = 0.0;
    int c = 0;
    for (int i = 0; i < N; ++i)
      if (M.bits(i, j) > 0.5) {
        s += X.values(i, j) - global_mean;
        ++c;
      }
    col_dev(j) = c ? s / c : 0.0;
  }
  Matrix out(N, T);
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < T; ++j)
      out(i, j) = M.bits(i, j) > 0.5 ? X.values(i, j) : global_mean + row_dev(i) + col_dev(j);
  return TrafficTensor{std::move(out)};
}

// Deterministic shortest paths over an undirected graph given as an adjacency
// list of directed links; a_{ij}=1 iff link i lies on the path of OD flow j.
// Flows enumerate all ordered node pairs (s,d), s != d; ties broken by lowest
// node index via BFS visiting neighbors in index order.
struct Graph {
  int node_count = 0;
  std::vector<std::pair<int, int>> links;  // directed (from, to)
};

inline Graph undirected_graph(int nodes, const std::vector<std::pair<int, int>>& edges) {
  Graph g;
  g.node_count = nodes;
  for (auto [a, b] : edges) {
    g.links.emplace_back(a, b);
    g.links.emplace_back(b, a);
  }
  return g;
}

inline RoutingMatrix shortest_path_routing(const Graph& g) {
  int V = g.node_count;
  int L = static_cast<int>(g.links.size());
  std::vector<std::vector<std::pair<int, int>>> adj(V);  // (neighbor, link index)
  for (int l = 0; l < L; ++l) adj[g.links[l].first].emplace_back(g.links[l].second, l);
  for (auto& a : adj) std::sort(a.begin(), a.end());

  int flows = V * (V - 1);
  Matrix A = Matrix::Zero(L, flows);
  int j = 0;
  for (int s = 0; s < V; ++s) {
    // BFS from s; parent link per node, neighbors in index order gives the
    // lowest-index tie break.
    std::vector<int> parent_link(V, -1), parent(V, -1);
    std::vector<bool> seen(V, false);
    std::deque<int> q{s};
    seen[s] = true;
    while (!q.empty()) {
      int u = q.front();
      q.pop_front();
      for (auto [v, l] : adj[u])
        if (!seen[v]) {
          seen[v] = true;
          parent[v] = u;
          parent_link[v] = l;
          q.push_back(v);
        }
    }
    for (int d = 0; d < V; ++d) {
      if (d == s) continue;
      if (!seen[d]) throw ValidationError("graph is disconnected");
      for (int v = d; v != s; v = parent[v]) A(parent_link[v], j) = 1.0;
      ++j;
    }
  }
  return RoutingMatrix{std::move(A)};
}

inline std::pair<TrafficTensor, TrafficTensor> train_test_split(const TrafficTensor& X,
                                                                int train_len, int test_len) {
  require(train_len > 0 && test_len > 0, "split lengths must be positive");
  require(X.time_count() >= train_len + test_len,
          "series of length " + std::to_string(X.time_count()) + " too short for split " +
              std::to_string(train_len) + "+" + std::to_string(test_len));
  return {TrafficTensor{X.values.leftCols(train_len)},
          TrafficTensor{X.values.middleCols(train_len, test_len)}};
}

}  // namespace tmd
