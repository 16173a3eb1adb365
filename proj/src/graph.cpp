#include "transllm/graph.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace transllm {

Tensor build_spatial_from_edges(const std::vector<std::tuple<std::size_t, std::size_t, double>>& edges,
                                std::size_t n) {
  Tensor adj({n, n});
  for (const auto& [i, j, w] : edges) {
    if (i >= n || j >= n) {
      throw std::invalid_argument("edge (" + std::to_string(i) + "," + std::to_string(j) +
                                  ") out of range for n=" + std::to_string(n));
    }
    if (i == j) throw std::invalid_argument("self-edge at node " + std::to_string(i));
    if (w <= 0.0) throw std::invalid_argument("non-positive edge weight");
    if (adj(i, j) != 0.0 && adj(i, j) != w) {
      throw std::invalid_argument("conflicting duplicate edge (" + std::to_string(i) + "," +
                                  std::to_string(j) + ")");
    }
    adj(i, j) = w;
    adj(j, i) = w;
  }
  return adj;
}

Tensor build_grid_adjacency(std::size_t rows, std::size_t cols) {
  if (rows < 1 || cols < 1) throw std::invalid_argument("grid dims must be >= 1");
  const std::size_t n = rows * cols;
  Tensor adj({n, n});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      if (c + 1 < cols) {
        adj(i, i + 1) = 1.0;
        adj(i + 1, i) = 1.0;
      }
      if (r + 1 < rows) {
        adj(i, i + cols) = 1.0;
        adj(i + cols, i) = 1.0;
      }
    }
  return adj;
}

double dtw_distance(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("dtw_distance: empty input");
  const std::size_t la = a.size(), lb = b.size();
  constexpr double inf = 1e300;
  std::vector<double> prev(lb + 1, inf), cur(lb + 1, inf);
  prev[0] = 0.0;
  for (std::size_t i = 1; i <= la; ++i) {
    cur[0] = inf;
    for (std::size_t j = 1; j <= lb; ++j) {
      const double cost = std::fabs(a[i - 1] - b[j - 1]);
      cur[j] = cost + std::min({prev[j], cur[j - 1], prev[j - 1]});
    }
    std::swap(prev, cur);
  }
  return prev[lb];
}

namespace {

std::vector<double> znorm_subsample(const SeriesDataset& ds, std::size_t node) {
  const std::size_t l = ds.length();
  const std::size_t step = (l + 287) / 288;  // keep <= 288 points
  std::vector<double> v;
  for (std::size_t t = 0; t < l; t += step) v.push_back(ds.values(t, node, 0));
  double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  const double sd = std::max(std::sqrt(var / static_cast<double>(v.size())), 1e-6);
  for (double& x : v) x = (x - mean) / sd;
  return v;
}

}  // namespace

Tensor build_semantic(const SeriesDataset& ds, std::size_t k) {
  const std::size_t n = ds.num_nodes();
  if (k < 1) throw std::invalid_argument("build_semantic: k must be >= 1");
  k = std::min(k, n - 1);

  std::vector<std::vector<double>> series(n);
  for (std::size_t i = 0; i < n; ++i) series[i] = znorm_subsample(ds, i);

  Tensor dist({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = dtw_distance(series[i], series[j]);
      dist(i, j) = d;
      dist(j, i) = d;
    }

  Tensor adj({n, n});
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (a == i) return false;
      if (b == i) return true;
      return dist(i, a) < dist(i, b);
    });
    for (std::size_t r = 0; r < k; ++r) adj(i, order[r]) = 1.0;
  }
  // symmetrize by max, clear the diagonal
  for (std::size_t i = 0; i < n; ++i) {
    adj(i, i) = 0.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double m = std::max(adj(i, j), adj(j, i));
      adj(i, j) = m;
      adj(j, i) = m;
    }
  }
  return adj;
}

void save_graph_json(const Tensor& adj, const std::string& path) {
  const std::size_t n = adj.dim(0);
  nlohmann::json edges = nlohmann::json::array();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (adj(i, j) != 0.0) edges.push_back({i, j, adj(i, j)});
  nlohmann::json doc{{"n", n}, {"edges", edges}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write graph file: " + path);
  out << doc.dump(2) << "\n";
}

Tensor load_graph_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open graph file: " + path);
  nlohmann::json doc;
  in >> doc;
  const std::size_t n = doc.at("n").get<std::size_t>();
  std::vector<std::tuple<std::size_t, std::size_t, double>> edges;
  for (const auto& e : doc.at("edges")) {
    edges.emplace_back(e.at(0).get<std::size_t>(), e.at(1).get<std::size_t>(), e.at(2).get<double>());
  }
  return build_spatial_from_edges(edges, n);
}

}  // namespace transllm
