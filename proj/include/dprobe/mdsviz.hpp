#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "dprobe/corpus.hpp"
#include "dprobe/decode.hpp"
#include "dprobe/probe.hpp"

namespace dprobe {

struct MdsConfig {
  std::size_t dims = 2;
  std::size_t n_init = 4;
  std::size_t max_iter = 300;
  double eps = 1e-3;  // stop when the relative stress decrease falls below this
  std::uint64_t seed = 0;
  // Start the first restart from classical (Torgerson) scaling; the others
  // start from seeded random configurations.
  bool classical_first = true;
};

struct MdsResult {
  Eigen::MatrixXd coords;  // T x dims, centred
  double stress = 0.0;     // sum_{i<j} (d_ij(X) - delta_ij)^2
  std::size_t iterations = 0;
  std::vector<double> stress_history;  // of the returned restart, starting at its initial value
};

// Metric SMACOF on a dissimilarity matrix. Restart initialisations depend on
// each point's sorted dissimilarity row, not its index, so relabelling the
// input permutes the output the same way.
MdsResult smacof(const DistanceMatrix& dissimilarities, const MdsConfig& cfg = {});

// Rows of `points` are T points in any dimension; dissimilarities are their
// Euclidean distances. Requires T >= 2.
MdsResult smacof_mds(const Eigen::MatrixXd& points, const MdsConfig& cfg = {});

// Rotation/reflection of `x` that best matches `reference` (both T x k,
// centred first). Presentation only.
Eigen::MatrixXd procrustes_align(const Eigen::MatrixXd& x, const Eigen::MatrixXd& reference);

struct TraceLayer {
  std::size_t layer = 0;
  Eigen::MatrixXd coords;
  PredictedTree edges;
  std::map<std::string, double> uuas;  // category -> score (categories with gold edges only)
  double stress = 0.0;
};

struct DerivationTrace {
  std::string sentence_id;
  std::string label;  // free-form, e.g. "success"
  std::vector<std::string> tokens;
  EdgeSet gold;
  std::vector<TraceLayer> layers;
};

struct TraceOptions {
  MdsConfig mds;
  bool procrustes = false;
  SubgraphConfig subgraph;
  std::vector<Category> categories{Category::global(), Category::macro()};
};

// Projects B_l m_i^l for every layer's probe, runs SMACOF per layer and
// decodes/scores the tree. `h` must cover layers 0..probes.size()-1.
DerivationTrace build_trace(std::span<const ProbeParams> probes, const LayerTensor& h,
                            const DepSentence& sent, const TraceOptions& opts = {});

nlohmann::json trace_to_json(const DerivationTrace& trace);

}  // namespace dprobe
