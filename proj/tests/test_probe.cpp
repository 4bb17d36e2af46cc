#include <doctest.h>

#include <cmath>
#include <cstring>

#include "dprobe/error.hpp"
#include "dprobe/probe.hpp"
#include "dprobe/rng.hpp"
#include "support/probe_oracle.hpp"
#include "support/synthetic.hpp"
#include "support/tempdir.hpp"

using namespace dprobe;
using namespace dprobe::testing;

namespace {

ProbeParams identity_probe(std::size_t layer, std::size_t dim) {
  ProbeParams p;
  p.layer = layer;
  p.mix_logits = Eigen::VectorXf::Zero(static_cast<Eigen::Index>(layer + 1));
  p.scale = 1.0f;
  p.projection = Eigen::MatrixXf::Identity(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim));
  return p;
}

LayerTensor random_tensor(std::size_t layers, std::size_t tokens, std::size_t dim, Rng& rng) {
  LayerTensor t(layers, tokens, dim);
  for (auto& v : t.data) v = static_cast<float>(rng.normal());
  return t;
}

ProbeParams random_probe(std::size_t layer, std::size_t dim, std::size_t rank, Rng& rng) {
  ProbeParams p = init_probe(layer, dim, rank, rng.next());
  for (Eigen::Index k = 0; k < p.mix_logits.size(); ++k) p.mix_logits[k] = static_cast<float>(rng.normal());
  p.scale = static_cast<float>(rng.uniform(0.5, 1.5));
  return p;
}

ShadowParams shadow(const ProbeParams& p) {
  ShadowParams s;
  for (Eigen::Index k = 0; k < p.mix_logits.size(); ++k) s.logits.push_back(p.mix_logits[k]);
  s.scale = p.scale;
  s.proj.assign(p.rank(), std::vector<double>(p.dim()));
  for (std::size_t r = 0; r < p.rank(); ++r)
    for (std::size_t c = 0; c < p.dim(); ++c) s.proj[r][c] = p.projection(r, c);
  return s;
}

double rel_err(double a, double f) { return std::abs(a - f) / std::max({std::abs(a), std::abs(f), 1e-6}); }

// Gradient of the shadow loss by central differences, in the same layout as
// Gradients.
struct FdGrad {
  std::vector<double> logits, proj;
  double scale = 0;
};

FdGrad finite_differences(const ShadowParams& base, const std::vector<ProbeExample>& batch, double h = 1e-4) {
  auto loss = [&](const ShadowParams& s) {
    double total = 0;
    for (const auto& ex : batch) total += shadow_loss(s, ex.embeddings, ex.gold);
    return total / double(batch.size());
  };
  FdGrad g;
  for (std::size_t k = 0; k < base.logits.size(); ++k) {
    auto up = base, dn = base;
    up.logits[k] += h;
    dn.logits[k] -= h;
    g.logits.push_back((loss(up) - loss(dn)) / (2 * h));
  }
  {
    auto up = base, dn = base;
    up.scale += h;
    dn.scale -= h;
    g.scale = (loss(up) - loss(dn)) / (2 * h);
  }
  for (std::size_t r = 0; r < base.proj.size(); ++r)
    for (std::size_t c = 0; c < base.proj[r].size(); ++c) {
      auto up = base, dn = base;
      up.proj[r][c] += h;
      dn.proj[r][c] -= h;
      g.proj.push_back((loss(up) - loss(dn)) / (2 * h));
    }
  return g;
}

}  // namespace

TEST_CASE("mix_embeddings hand examples") {
  LayerTensor h(2, 1, 2);
  h.vec(0, 0)[0] = 2;
  h.vec(1, 0)[1] = 2;
  auto p = identity_probe(1, 2);
  const auto m = mix_embeddings(p, h);
  CHECK(m(0, 0) == doctest::Approx(1.0));
  CHECK(m(0, 1) == doctest::Approx(1.0));
  p.scale = 0;
  CHECK(mix_embeddings(p, h).norm() == 0.0);

  auto p0 = identity_probe(0, 2);
  p0.scale = 3;
  p0.mix_logits[0] = -7;
  const auto m0 = mix_embeddings(p0, h.prefix(1));
  CHECK(m0(0, 0) == doctest::Approx(6.0));
  CHECK(m0(0, 1) == doctest::Approx(0.0));
  CHECK_THROWS_AS(mix_embeddings(p0, h), ValidationError);
}

TEST_CASE("predict_distance hand examples") {
  auto p = identity_probe(0, 2);
  Eigen::VectorXd a(2), b(2);
  a << 4, 6;
  b << 1, 2;
  CHECK(predict_distance(p, a, b) == doctest::Approx(5.0));
  CHECK(predict_distance(p, a, a) == 0.0);
  p.projection.setZero();
  CHECK(predict_distance(p, a, b) == 0.0);
}

TEST_CASE("predict_distance is a pseudometric and invariant under orthogonal B rotations") {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t dim = 2 + rng.below(6), rank = 1 + rng.below(dim);
    auto p = random_probe(0, dim, rank, rng);
    Eigen::MatrixXd g(rank, rank);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
    const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
    auto rotated = p;
    rotated.projection = (q * p.projection.cast<double>()).cast<float>();
    std::vector<Eigen::VectorXd> pts;
    for (int i = 0; i < 3; ++i) {
      Eigen::VectorXd v(dim);
      for (auto& x : v) x = rng.normal();
      pts.push_back(v);
    }
    const double dab = predict_distance(p, pts[0], pts[1]);
    const double dbc = predict_distance(p, pts[1], pts[2]);
    const double dac = predict_distance(p, pts[0], pts[2]);
    CHECK(dab >= 0);
    CHECK(dab == doctest::Approx(predict_distance(p, pts[1], pts[0])));
    CHECK(dac <= dab + dbc + 1e-9);
    CHECK(predict_distance(rotated, pts[0], pts[1]) == doctest::Approx(dab).epsilon(1e-5));
  }
}

TEST_CASE("sentence_loss hand examples") {
  // |s| = 2, gold 2, predicted 1.5
  LayerTensor h(1, 2, 1);
  h.vec(0, 1)[0] = 1.5f;
  GoldDistances gold{2, {0, 2, 2, 0}};
  const auto p = identity_probe(0, 1);
  CHECK(sentence_loss(p, h, gold) == doctest::Approx(0.125));

  // a chain has tree distance |i - j|, so its 1-D embedding is a perfect probe
  DepSentence chain{"c", {"a", "b", "c", "d"}, {0, 1, 2, 3}, {"root", "x", "x", "x"}};
  LayerTensor line(1, 4, 1);
  for (std::size_t i = 0; i < 4; ++i) line.vec(0, i)[0] = static_cast<float>(i);
  const auto chain_gold = gold_distances(chain);
  CHECK(sentence_loss(p, line, chain_gold) == 0.0);
  auto doubled = p;
  doubled.scale = 2;
  double expected = 0;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = i + 1; j < 4; ++j) expected += chain_gold(i, j);
  CHECK(sentence_loss(doubled, line, chain_gold) == doctest::Approx(expected / 16.0));
  CHECK(sentence_loss(doubled, line, chain_gold) == doctest::Approx(shadow_loss(shadow(doubled), line, chain_gold)));
}

TEST_CASE("sentence_loss agrees with the loop oracle and is permutation invariant") {
  Rng rng(23);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 2 + rng.below(9), dim = 1 + rng.below(5), layer = rng.below(3);
    const auto s = random_tree(n, rng);
    const auto gold = gold_distances(s);
    const auto h = random_tensor(layer + 1, n, dim, rng);
    const auto p = random_probe(layer, dim, 1 + rng.below(dim), rng);
    const double loss = sentence_loss(p, h, gold);
    CHECK(loss == doctest::Approx(shadow_loss(shadow(p), h, gold)).epsilon(1e-9));

    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    rng.shuffle(std::span<std::size_t>(perm));
    LayerTensor hp(h.layers, n, dim);
    GoldDistances gp{n, std::vector<int>(n * n)};
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t l = 0; l < h.layers; ++l)
        std::copy(h.vec(l, perm[i]).begin(), h.vec(l, perm[i]).end(), hp.vec(l, i).begin());
      for (std::size_t j = 0; j < n; ++j) gp.values[i * n + j] = gold(perm[i], perm[j]);
    }
    CHECK(sentence_loss(p, hp, gp) == doctest::Approx(loss).epsilon(1e-9));
  }
}

TEST_CASE("analytic gradients match central differences") {
  Rng rng(31);
  int checked = 0;
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t dim = 1 + rng.below(4), layer = rng.below(3), rank = 1 + rng.below(dim);
    std::vector<ProbeExample> batch;
    for (int b = 0; b < 2; ++b) {
      const std::size_t n = 2 + rng.below(5);
      batch.push_back({random_tensor(layer + 1, n, dim, rng), gold_distances(random_tree(n, rng))});
    }
    const auto p = random_probe(layer, dim, rank, rng);
    const auto g = gradients(p, batch);
    const auto fd = finite_differences(shadow(p), batch);
    double worst = 0;
    for (Eigen::Index k = 0; k < g.mix_logits.size(); ++k) worst = std::max(worst, rel_err(g.mix_logits[k], fd.logits[k]));
    worst = std::max(worst, rel_err(g.scale, fd.scale));
    for (std::size_t r = 0; r < rank; ++r)
      for (std::size_t c = 0; c < dim; ++c) worst = std::max(worst, rel_err(g.projection(r, c), fd.proj[r * dim + c]));
    // kinks of |.| can spoil a finite difference; they are rare but possible
    if (worst < 1e-3) ++checked;
    CHECK(g.loss == doctest::Approx(0.5 * (sentence_loss(p, batch[0].embeddings, batch[0].gold) +
                                           sentence_loss(p, batch[1].embeddings, batch[1].gold))));
  }
  CHECK(checked >= 28);
}

TEST_CASE("scale gradient at scale 0 matches finite differences") {
  Rng rng(8);
  const std::size_t dim = 3;
  std::vector<ProbeExample> batch{{random_tensor(2, 4, dim, rng), gold_distances(random_tree(4, rng))}};
  auto p = random_probe(1, dim, dim, rng);
  p.scale = 0;
  const auto g = gradients(p, batch);
  CHECK(g.zero_distance_pairs == 6);
  // d is |scale| * c, so the one-sided derivative from the right is -sum c/|s|^2;
  // compare against a forward difference.
  auto s = shadow(p);
  const double h = 1e-6;
  const double base = shadow_loss(s, batch[0].embeddings, batch[0].gold);
  s.scale = h;
  const double fwd = (shadow_loss(s, batch[0].embeddings, batch[0].gold) - base) / h;
  CHECK(g.scale == doctest::Approx(fwd).epsilon(1e-4));
}

TEST_CASE("zero-loss configuration has zero gradient") {
  DepSentence chain{"c", {"a", "b", "c"}, {0, 1, 2}, {"root", "x", "x"}};
  LayerTensor line(1, 3, 1);
  for (std::size_t i = 0; i < 3; ++i) line.vec(0, i)[0] = static_cast<float>(i);
  std::vector<ProbeExample> batch{{line, gold_distances(chain)}};
  const auto g = gradients(identity_probe(0, 1), batch);
  CHECK(g.loss == 0.0);
  CHECK(g.projection.norm() == 0.0);
  CHECK(g.scale == 0.0);
}

TEST_CASE("a small full-batch gradient step does not increase the loss") {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t dim = 2 + rng.below(4);
    std::vector<ProbeExample> batch;
    for (int b = 0; b < 3; ++b) {
      const std::size_t n = 3 + rng.below(5);
      batch.push_back({random_tensor(1, n, dim, rng), gold_distances(random_tree(n, rng))});
    }
    const auto p = random_probe(0, dim, dim, rng);
    const auto g = gradients(p, batch);
    bool decreased = false;
    for (double step = 1e-1; step > 1e-8 && !decreased; step *= 0.5) {
      auto q = p;
      q.projection = (p.projection.cast<double>() - step * g.projection).cast<float>();
      q.scale = static_cast<float>(p.scale - step * g.scale);
      decreased = gradients(q, batch).loss <= g.loss;
    }
    CHECK(decreased);
  }
}

TEST_CASE("training is deterministic, keeps softmax weights a distribution, and lr 0 is a no-op") {
  Rng rng(4);
  std::vector<ProbeExample> train_ex, dev_ex;
  for (int i = 0; i < 40; ++i) {
    const std::size_t n = 3 + rng.below(5);
    const auto s = random_tree(n, rng);
    auto t = tensor_from_vectors(path_indicators(s, 8), 2);
    for (auto& v : t.data) v += static_cast<float>(0.05 * rng.normal());
    (i < 30 ? train_ex : dev_ex).push_back({t, gold_distances(s)});
  }
  const InMemorySource train(train_ex), dev(dev_ex);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 8;
  cfg.learning_rate = 1e-2;
  cfg.seed = 99;
  const auto a = train_probe(1, 8, train, dev, cfg);
  const auto b = train_probe(1, 8, train, dev, cfg);
  REQUIRE(a.history.size() == 4);
  CHECK(std::memcmp(a.params.projection.data(), b.params.projection.data(), sizeof(float) * a.params.projection.size()) == 0);
  CHECK(std::memcmp(a.params.mix_logits.data(), b.params.mix_logits.data(), sizeof(float) * 2) == 0);
  const auto w = a.params.mix_weights();
  CHECK(w.sum() == doctest::Approx(1.0));
  CHECK(w.minCoeff() >= 0.0);
  CHECK(a.history.back().dev_loss < a.history.front().train_loss * 2);

  cfg.learning_rate = 0;
  const auto frozen = train_probe(1, 8, train, dev, cfg);
  CHECK(frozen.params.projection == frozen.initial.projection);
  CHECK(frozen.params.mix_logits == frozen.initial.mix_logits);
  CHECK(frozen.params.scale == frozen.initial.scale);
  CHECK(frozen.best_epoch == 0);

  const auto csv = history_csv(a.history);
  CHECK(csv.rfind("epoch,train_loss,dev_loss,learning_rate,lr_reduced\n", 0) == 0);
}

TEST_CASE("training config JSON round-trip") {
  TrainConfig cfg;
  cfg.learning_rate = 0.25;
  cfg.rank = 3;
  cfg.seed = 12345678901ULL;
  const auto back = TrainConfig::from_json(cfg.to_json());
  CHECK(back.learning_rate == 0.25);
  CHECK(back.rank == 3);
  CHECK(back.seed == 12345678901ULL);
  CHECK(back.epochs == 40);
}

TEST_CASE("checkpoint round-trip is bitwise exact") {
  TempDir dir;
  Rng rng(2);
  const auto p = random_probe(3, 6, 4, rng);
  const auto path = dir.file("p.ckpt");
  save_checkpoint(path, p, {{"seed", 7}});
  const auto ck = load_checkpoint(path);
  CHECK(ck.params.layer == 3);
  CHECK(ck.params.rank() == 4);
  CHECK(ck.params.dim() == 6);
  CHECK(std::memcmp(&ck.params.scale, &p.scale, sizeof(float)) == 0);
  CHECK(ck.params.projection == p.projection);
  CHECK(ck.params.mix_logits == p.mix_logits);
  CHECK(ck.meta["seed"] == 7);

  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 4);
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("truncated"), FormatError);
}
