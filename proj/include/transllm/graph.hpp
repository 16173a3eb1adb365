#pragma once

#include <string>
#include <tuple>
#include <vector>

#include "transllm/data_io.hpp"
#include "transllm/tensor.hpp"

namespace transllm {

/// The two adjacency views the encoder consumes. Both symmetric with zero
/// diagonal; self-loops are added inside the attention layer.
struct AdjacencyPair {
  Tensor spatial;   // N x N
  Tensor semantic;  // N x N
  std::size_t n = 0;
};

Tensor build_spatial_from_edges(const std::vector<std::tuple<std::size_t, std::size_t, double>>& edges,
                                std::size_t n);

/// 4-connectivity lattice with unit weights.
Tensor build_grid_adjacency(std::size_t rows, std::size_t cols);

/// Classic dynamic-programming alignment cost with local cost |a_i - b_j|.
double dtw_distance(const std::vector<double>& a, const std::vector<double>& b);

/// Binary top-k DTW neighbors per node, symmetrized by max. Each node's series
/// is z-normalized and subsampled to at most 288 points before alignment.
Tensor build_semantic(const SeriesDataset& ds, std::size_t k);

void save_graph_json(const Tensor& adj, const std::string& path);
Tensor load_graph_json(const std::string& path);

}  // namespace transllm
