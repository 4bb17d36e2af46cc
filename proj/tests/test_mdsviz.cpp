#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dprobe/error.hpp"
#include "dprobe/mdsviz.hpp"
#include "dprobe/report.hpp"
#include "dprobe/rng.hpp"
#include "support/synthetic.hpp"
#include "support/tempdir.hpp"

using namespace dprobe;
using namespace dprobe::testing;

namespace {

Eigen::MatrixXd random_points(std::size_t n, std::size_t dim, Rng& rng) {
  Eigen::MatrixXd x(n, dim);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  return x;
}

double max_distance_error(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  double worst = 0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = i + 1; j < a.rows(); ++j)
      worst = std::max(worst, std::abs((a.row(i) - a.row(j)).norm() - (b.row(i) - b.row(j)).norm()));
  return worst;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("planar points are recovered up to a rigid motion") {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_points(3 + rng.below(15), 2, rng);
    const auto r = smacof_mds(x);
    CHECK(r.stress <= 1e-6);
    CHECK(max_distance_error(r.coords, x) < 1e-4);
    CHECK(r.coords.colwise().sum().norm() < 1e-9);
  }
}

TEST_CASE("unit square embedded in 10-D") {
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(4, 10);
  x(1, 3) = 1;
  x(2, 7) = 1;
  x(3, 3) = 1;
  x(3, 7) = 1;
  x.rowwise() += Eigen::RowVectorXd::Constant(10, 0.25);
  const auto r = smacof_mds(x);
  CHECK(max_distance_error(r.coords, x) <= 1e-3);
}

TEST_CASE("two points sit at plus and minus half the distance along an axis") {
  Eigen::MatrixXd x(2, 3);
  x << 0, 0, 0, 3, 4, 0;
  const auto r = smacof_mds(x);
  CHECK(r.stress == doctest::Approx(0.0));
  CHECK(std::abs(r.coords(0, 0)) == doctest::Approx(2.5));
  CHECK(r.coords(0, 0) == doctest::Approx(-r.coords(1, 0)));
  CHECK(r.coords(0, 1) == 0.0);
}

TEST_CASE("identical points give zero coordinates and zero stress") {
  Eigen::MatrixXd x = Eigen::MatrixXd::Constant(5, 4, 1.5);
  const auto r = smacof_mds(x);
  CHECK(r.stress == 0.0);
  CHECK(r.coords.norm() == 0.0);
  CHECK_THROWS_AS(smacof_mds(Eigen::MatrixXd::Zero(1, 3)), ValidationError);
}

TEST_CASE("stress never increases across iterations") {
  Rng rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    MdsConfig cfg;
    cfg.classical_first = trial % 2 == 0;
    cfg.eps = 1e-9;
    cfg.seed = rng.next();
    const auto r = smacof_mds(random_points(4 + rng.below(20), 6, rng), cfg);
    REQUIRE(r.stress_history.size() >= 1);
    for (std::size_t k = 1; k < r.stress_history.size(); ++k)
      CHECK(r.stress_history[k] <= r.stress_history[k - 1] * (1 + 1e-12) + 1e-15);
    CHECK(r.stress == doctest::Approx(r.stress_history.back()));
  }
}

TEST_CASE("relabelling the input permutes the output the same way") {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 3 + rng.below(12);
    const auto x = random_points(n, 5, rng);
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    rng.shuffle(std::span<std::size_t>(perm));
    Eigen::MatrixXd xp(n, 5);
    for (std::size_t i = 0; i < n; ++i) xp.row(i) = x.row(perm[i]);
    MdsConfig cfg;
    cfg.seed = 77;
    cfg.classical_first = trial % 2 == 0;
    const auto a = smacof_mds(x, cfg);
    const auto b = smacof_mds(xp, cfg);
    CHECK(b.stress == doctest::Approx(a.stress).epsilon(1e-6));
    double worst = 0;
    for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, (b.coords.row(i) - a.coords.row(perm[i])).norm());
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("same seed gives identical output") {
  Rng rng(4);
  const auto x = random_points(12, 8, rng);
  MdsConfig cfg;
  cfg.seed = 5;
  CHECK(smacof_mds(x, cfg).coords == smacof_mds(x, cfg).coords);
}

TEST_CASE("procrustes alignment undoes a rotation and reflection") {
  Rng rng(9);
  const auto x = random_points(10, 2, rng);
  Eigen::Matrix2d rot;
  const double t = 0.7;
  rot << std::cos(t), std::sin(t), std::sin(t), -std::cos(t);
  const Eigen::MatrixXd centred = x.rowwise() - x.colwise().mean();
  const Eigen::MatrixXd moved = centred * rot;
  CHECK((procrustes_align(moved, centred) - centred).norm() < 1e-9);
}

TEST_CASE("trace building uses each layer's projection") {
  Rng rng(2);
  DepSentence s{"t", {"The", "cat", "sat", "."}, {2, 3, 0, 3}, {"det", "nsubj", "ROOT", "punct"}};
  const auto vecs = path_indicators(s, 4);
  const auto h = tensor_from_vectors(vecs, 2);
  std::vector<ProbeParams> probes;
  for (std::size_t l = 0; l < 2; ++l) {
    ProbeParams p;
    p.layer = l;
    p.mix_logits = Eigen::VectorXf::Zero(static_cast<Eigen::Index>(l + 1));
    p.projection = Eigen::MatrixXf::Identity(4, 4);
    probes.push_back(p);
  }
  TraceOptions opts;
  opts.procrustes = true;
  const auto trace = build_trace(probes, h, s, opts);
  REQUIRE(trace.layers.size() == 2);
  CHECK(trace.layers[1].edges == gold_edges(s));
  CHECK(trace.layers[1].uuas.at("Global") == 1.0);
  CHECK(trace.layers[0].coords.rows() == 4);
  const auto j = trace_to_json(trace);
  CHECK(j["schema_version"] == 1);
  CHECK(j["layers"].size() == 2);
}

TEST_CASE("report files: CSV shape, SVG structure and byte-identical reruns") {
  TempDir a, b;
  ReportInputs in;
  for (std::uint64_t seed = 1; seed <= 2; ++seed) in.curves.push_back({"toy", seed, {0.1, 0.4, 0.6, 0.7}});
  ExpectedLayerRow row;
  row.group = "dobj,nsubj";
  row.category = Category::macro();
  row.sentences = 10;
  row.expected = summarize({2.0, 2.5});
  in.expected_rows = {row};
  row.group = "dobj,nsubj,prep";
  in.expected_rows.push_back(row);
  const ReportStamp stamp{"abcdef0123456789"};
  const auto written = emit_reports(in, stamp, a.path().string());
  emit_reports(in, stamp, b.path().string());
  CHECK_FALSE(written.empty());

  const auto csv = slurp(a.file("global_uuas.csv"));
  std::istringstream lines(csv);
  std::size_t data_rows = 0;
  for (std::string line; std::getline(lines, line);)
    if (!line.empty() && line[0] != '#' && line.rfind("model,", 0) != 0) ++data_rows;
  CHECK(data_rows == 2 * 4);
  CHECK(csv.find("abcdef0123456789") != std::string::npos);

  const auto svg = slurp(a.file("expected_layers.svg"));
  std::size_t groups = 0;
  for (std::size_t pos = 0; (pos = svg.find("class=\"structure-set\"", pos)) != std::string::npos; ++pos) ++groups;
  CHECK(groups == 2);

  for (const auto& entry : std::filesystem::directory_iterator(a.path())) {
    const auto name = entry.path().filename().string();
    CHECK_MESSAGE(slurp(entry.path().string()) == slurp(b.file(name)), name);
  }
}
