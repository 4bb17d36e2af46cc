#include "dprobe/decode.hpp"

#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "dprobe/error.hpp"

namespace dprobe {

DistanceMatrix distance_matrix(const ProbeParams& p, const LayerTensor& h) {
  const RowMatrixXd m =
      mix_embeddings(p, h.layers == p.layer + 1 ? h : h.prefix(p.layer + 1));
  const RowMatrixXd z = m * p.projection.cast<double>().transpose();
  DistanceMatrix d(h.tokens);
  for (std::size_t i = 0; i < d.n; ++i) {
    for (std::size_t j = i + 1; j < d.n; ++j) {
      const double v = (z.row(static_cast<Eigen::Index>(i)) - z.row(static_cast<Eigen::Index>(j))).norm();
      d(i, j) = v;
      d(j, i) = v;
    }
  }
  return d;
}

PredictedTree prim_mst(const DistanceMatrix& d) {
  const std::size_t n = d.n;
  for (double v : d.values) {
    if (!std::isfinite(v)) throw ValidationError("prim_mst: non-finite distance");
  }
  PredictedTree tree;
  if (n <= 1) return tree;

  constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::vector<bool> in_tree(n, false);
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  std::vector<std::size_t> link(n, kNone);

  // Strict order on candidate edges: weight, then smaller index, then larger.
  auto better = [](double w, Edge e, double w_ref, Edge e_ref) {
    if (w != w_ref) return w < w_ref;
    return e < e_ref;
  };

  std::size_t added = 0;
  in_tree[added] = true;
  for (std::size_t step = 1; step < n; ++step) {
    for (std::size_t v = 0; v < n; ++v) {
      if (in_tree[v]) continue;
      const double w = d(added, v);
      if (link[v] == kNone || better(w, make_edge(added, v), best[v], make_edge(link[v], v))) {
        best[v] = w;
        link[v] = added;
      }
    }
    std::size_t pick = kNone;
    for (std::size_t v = 0; v < n; ++v) {
      if (in_tree[v]) continue;
      if (pick == kNone ||
          better(best[v], make_edge(link[v], v), best[pick], make_edge(link[pick], pick))) {
        pick = v;
      }
    }
    in_tree[pick] = true;
    tree.insert(make_edge(link[pick], pick));
    added = pick;
  }
  return tree;
}

UuasCount uuas(const EdgeSet& predicted, const EdgeSet& gold) {
  UuasCount c;
  c.total = gold.size();
  for (const Edge& e : predicted) {
    if (gold.count(make_edge(e.first, e.second))) ++c.correct;
  }
  return c;
}

UuasCount subgraph_uuas(const PredictedTree& tree, const SubgraphEdges& sub) {
  return uuas(tree, sub.edges);
}

void UuasAggregate::add(const UuasCount& c) {
  if (c.total == 0) return;
  correct += c.correct;
  total += c.total;
  score_sum += *c.score();
  ++scored_sentences;
}

std::optional<double> UuasAggregate::micro() const {
  if (total == 0) return std::nullopt;
  return static_cast<double>(correct) / static_cast<double>(total);
}

std::optional<double> UuasAggregate::macro() const {
  if (scored_sentences == 0) return std::nullopt;
  return score_sum / static_cast<double>(scored_sentences);
}

void write_edge_lists(std::ostream& out, const std::vector<std::string>& ids,
                      const std::vector<PredictedTree>& trees) {
  for (std::size_t s = 0; s < trees.size(); ++s) {
    out << "# sent_id = " << ids.at(s) << '\n';
    for (const Edge& e : trees[s]) out << (e.first + 1) << '\t' << (e.second + 1) << '\n';
    out << '\n';
  }
}

std::vector<EdgeListEntry> read_edge_lists(std::istream& in) {
  std::vector<EdgeListEntry> out;
  std::string line;
  bool open = false;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) {
      open = false;
      continue;
    }
    if (line.rfind("# sent_id = ", 0) == 0) {
      out.push_back({line.substr(12), {}});
      open = true;
      continue;
    }
    std::istringstream row(line);
    std::size_t i = 0;
    std::size_t j = 0;
    if (!open || !(row >> i >> j) || i == 0 || j == 0) {
      throw FormatError("edge list line " + std::to_string(line_no) + ": malformed");
    }
    out.back().tree.insert(make_edge(i - 1, j - 1));
  }
  return out;
}

}  // namespace dprobe
