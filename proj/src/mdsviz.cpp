#include "dprobe/mdsviz.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>

#include "dprobe/error.hpp"
#include "dprobe/rng.hpp"

namespace dprobe {

namespace {

double raw_stress(const Eigen::MatrixXd& x, const DistanceMatrix& delta) {
  double s = 0.0;
  for (std::size_t i = 0; i < delta.n; ++i) {
    for (std::size_t j = i + 1; j < delta.n; ++j) {
      const double d = (x.row(static_cast<Eigen::Index>(i)) - x.row(static_cast<Eigen::Index>(j))).norm();
      s += (d - delta(i, j)) * (d - delta(i, j));
    }
  }
  return s;
}

Eigen::MatrixXd centred(const Eigen::MatrixXd& x) {
  return x.rowwise() - x.colwise().mean();
}

Eigen::MatrixXd classical_scaling(const DistanceMatrix& delta, std::size_t dims) {
  const auto n = static_cast<Eigen::Index>(delta.n);
  Eigen::MatrixXd sq(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const double v = delta(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
      sq(i, j) = v * v;
    }
  }
  const Eigen::MatrixXd centering =
      Eigen::MatrixXd::Identity(n, n) - Eigen::MatrixXd::Constant(n, n, 1.0 / static_cast<double>(n));
  const Eigen::MatrixXd gram = -0.5 * centering * sq * centering;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(dims));
  const Eigen::Index k = std::min<Eigen::Index>(static_cast<Eigen::Index>(dims), n);
  for (Eigen::Index c = 0; c < k; ++c) {
    const Eigen::Index src = n - 1 - c;  // eigenvalues ascend
    const double lambda = std::max(0.0, eig.eigenvalues()[src]);
    Eigen::VectorXd col = eig.eigenvectors().col(src) * std::sqrt(lambda);
    // Sign convention that does not depend on point order.
    if (col.array().cube().sum() < 0.0) col = -col;
    x.col(c) = col;
  }
  return x;
}

std::uint64_t row_fingerprint(const DistanceMatrix& delta, std::size_t i) {
  std::vector<double> row(delta.values.begin() + static_cast<std::ptrdiff_t>(i * delta.n),
                          delta.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * delta.n));
  std::sort(row.begin(), row.end());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : row) h = mix_seed(h, std::bit_cast<std::uint64_t>(v));
  return h;
}

Eigen::MatrixXd random_start(const DistanceMatrix& delta, std::size_t dims, std::uint64_t seed,
                             std::size_t restart) {
  double scale = 0.0;
  for (double v : delta.values) scale = std::max(scale, v);
  Eigen::MatrixXd x(static_cast<Eigen::Index>(delta.n), static_cast<Eigen::Index>(dims));
  for (std::size_t i = 0; i < delta.n; ++i) {
    Rng rng(mix_seed(mix_seed(seed, restart), row_fingerprint(delta, i)));
    for (std::size_t c = 0; c < dims; ++c) {
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = rng.uniform(-scale, scale);
    }
  }
  return x;
}

MdsResult run_smacof(const DistanceMatrix& delta, Eigen::MatrixXd x, const MdsConfig& cfg) {
  const auto n = static_cast<Eigen::Index>(delta.n);
  MdsResult r;
  x = centred(x);
  double stress = raw_stress(x, delta);
  r.stress_history.push_back(stress);
  Eigen::MatrixXd b(n, n);
  for (std::size_t it = 0; it < cfg.max_iter; ++it) {
    // Guttman transform with unit weights: X <- B(X) X / n
    b.setZero();
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        if (i == j) continue;
        const double d = (x.row(i) - x.row(j)).norm();
        if (d > 0.0) {
          b(i, j) = -delta(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) / d;
        }
      }
      b(i, i) = -b.row(i).sum();
    }
    x = (b * x) / static_cast<double>(n);
    const double next = raw_stress(x, delta);
    r.stress_history.push_back(next);
    ++r.iterations;
    const double previous = stress;
    stress = next;
    if (previous <= 0.0 || (previous - next) / previous < cfg.eps) break;
  }
  r.coords = x;
  r.stress = stress;
  return r;
}

}  // namespace

MdsResult smacof(const DistanceMatrix& delta, const MdsConfig& cfg) {
  if (delta.n < 2) throw ValidationError("smacof: need at least 2 points");
  if (cfg.dims < 1) throw ValidationError("smacof: dims must be >= 1");
  for (double v : delta.values) {
    if (!std::isfinite(v) || v < 0.0) throw ValidationError("smacof: invalid dissimilarity");
  }
  const auto n = static_cast<Eigen::Index>(delta.n);
  const auto dims = static_cast<Eigen::Index>(cfg.dims);

  MdsResult best;
  if (std::all_of(delta.values.begin(), delta.values.end(), [](double v) { return v == 0.0; })) {
    best.coords = Eigen::MatrixXd::Zero(n, dims);
    best.stress_history = {0.0};
    return best;
  }
  if (delta.n == 2) {
    best.coords = Eigen::MatrixXd::Zero(n, dims);
    best.coords(0, 0) = -delta(0, 1) / 2.0;
    best.coords(1, 0) = delta(0, 1) / 2.0;
    best.stress_history = {0.0};
    return best;
  }

  // A later restart must beat the incumbent by more than rounding noise;
  // otherwise near-exact embeddings would be picked by the last few ulps.
  double scale = 0.0;
  for (double v : delta.values) scale += v * v;
  const double tie_tolerance = 1e-10 * scale;

  best.stress = std::numeric_limits<double>::infinity();
  const std::size_t restarts = std::max<std::size_t>(1, cfg.n_init);
  for (std::size_t r = 0; r < restarts; ++r) {
    Eigen::MatrixXd start = (r == 0 && cfg.classical_first) ? classical_scaling(delta, cfg.dims)
                                                            : random_start(delta, cfg.dims, cfg.seed, r);
    MdsResult run = run_smacof(delta, std::move(start), cfg);
    if (run.stress < best.stress - tie_tolerance) best = std::move(run);
  }
  return best;
}

MdsResult smacof_mds(const Eigen::MatrixXd& points, const MdsConfig& cfg) {
  DistanceMatrix delta(static_cast<std::size_t>(points.rows()));
  for (std::size_t i = 0; i < delta.n; ++i) {
    for (std::size_t j = i + 1; j < delta.n; ++j) {
      const double v = (points.row(static_cast<Eigen::Index>(i)) - points.row(static_cast<Eigen::Index>(j))).norm();
      delta(i, j) = v;
      delta(j, i) = v;
    }
  }
  return smacof(delta, cfg);
}

Eigen::MatrixXd procrustes_align(const Eigen::MatrixXd& x, const Eigen::MatrixXd& reference) {
  const Eigen::MatrixXd a = centred(x);
  const Eigen::MatrixXd b = centred(reference);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a.transpose() * b, Eigen::ComputeFullU | Eigen::ComputeFullV);
  return a * (svd.matrixU() * svd.matrixV().transpose());
}

DerivationTrace build_trace(std::span<const ProbeParams> probes, const LayerTensor& h,
                            const DepSentence& sent, const TraceOptions& opts) {
  DerivationTrace trace;
  trace.sentence_id = sent.id;
  trace.tokens = sent.tokens;
  trace.gold = gold_edges(sent);

  std::vector<SubgraphEdges> subs;
  for (const auto& cat : opts.categories) {
    subs.push_back(extract_subgraph_edges(sent, cat, opts.subgraph));
  }

  for (std::size_t l = 0; l < probes.size(); ++l) {
    const ProbeParams& p = probes[l];
    const LayerTensor slice = h.layers == p.layer + 1 ? h : h.prefix(p.layer + 1);
    const RowMatrixXd projected = mix_embeddings(p, slice) * p.projection.cast<double>().transpose();
    TraceLayer tl;
    tl.layer = p.layer;
    MdsResult mds = smacof_mds(projected, opts.mds);
    tl.coords = mds.coords;
    tl.stress = mds.stress;
    if (opts.procrustes && !trace.layers.empty()) {
      tl.coords = procrustes_align(tl.coords, trace.layers.back().coords);
    }
    tl.edges = prim_mst(distance_matrix(p, slice));
    for (const auto& sub : subs) {
      if (auto score = subgraph_uuas(tl.edges, sub).score()) tl.uuas[sub.category.str()] = *score;
    }
    trace.layers.push_back(std::move(tl));
  }
  return trace;
}

nlohmann::json trace_to_json(const DerivationTrace& trace) {
  auto edges_json = [](const EdgeSet& edges) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : edges) arr.push_back({e.first, e.second});
    return arr;
  };
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& tl : trace.layers) {
    nlohmann::json coords = nlohmann::json::array();
    for (Eigen::Index i = 0; i < tl.coords.rows(); ++i) {
      nlohmann::json row = nlohmann::json::array();
      for (Eigen::Index c = 0; c < tl.coords.cols(); ++c) row.push_back(tl.coords(i, c));
      coords.push_back(row);
    }
    layers.push_back({{"layer", tl.layer},
                      {"coords", coords},
                      {"edges", edges_json(tl.edges)},
                      {"uuas", tl.uuas},
                      {"stress", tl.stress}});
  }
  return {{"schema_version", 1},
          {"sentence_id", trace.sentence_id},
          {"label", trace.label},
          {"tokens", trace.tokens},
          {"gold_edges", edges_json(trace.gold)},
          {"layers", layers}};
}

}  // namespace dprobe
