#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dprobe/corpus.hpp"
#include "dprobe/embedstore.hpp"
#include "dprobe/probe.hpp"

namespace dprobe {

// Symmetric, zero-diagonal, row-major T x T matrix.
struct DistanceMatrix {
  std::size_t n = 0;
  std::vector<double> values;

  DistanceMatrix() = default;
  explicit DistanceMatrix(std::size_t n_) : n(n_), values(n_ * n_, 0.0) {}

  double& operator()(std::size_t i, std::size_t j) { return values[i * n + j]; }
  double operator()(std::size_t i, std::size_t j) const { return values[i * n + j]; }
};

// Pairwise probe distances; `h` must cover layers 0..p.layer.
DistanceMatrix distance_matrix(const ProbeParams& p, const LayerTensor& h);

// T-1 undirected edges.
using PredictedTree = EdgeSet;

// Dense O(T^2) Prim. Among equal-weight candidates the edge with the lowest
// smaller index wins, then the lowest larger index. Throws ValidationError on
// non-finite entries.
PredictedTree prim_mst(const DistanceMatrix& d);

struct UuasCount {
  std::size_t correct = 0;
  std::size_t total = 0;

  // Undefined for an empty gold set.
  std::optional<double> score() const {
    if (total == 0) return std::nullopt;
    return static_cast<double>(correct) / static_cast<double>(total);
  }
};

UuasCount uuas(const EdgeSet& predicted, const EdgeSet& gold);

// The full tree is decoded once; only the comparison is restricted.
UuasCount subgraph_uuas(const PredictedTree& tree, const SubgraphEdges& sub);

// Corpus-level aggregate. Sentences with an empty gold set contribute nothing.
struct UuasAggregate {
  std::size_t correct = 0;
  std::size_t total = 0;
  double score_sum = 0.0;
  std::size_t scored_sentences = 0;

  void add(const UuasCount& c);
  std::optional<double> micro() const;  // sum correct / sum total
  std::optional<double> macro() const;  // mean of per-sentence scores
};

// "# sent_id = X" then one "i<TAB>j" line (1-based) per edge, blank line after.
void write_edge_lists(std::ostream& out, const std::vector<std::string>& ids,
                      const std::vector<PredictedTree>& trees);

struct EdgeListEntry {
  std::string id;
  PredictedTree tree;
};

std::vector<EdgeListEntry> read_edge_lists(std::istream& in);

}  // namespace dprobe
