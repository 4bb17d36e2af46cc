#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "dprobe/error.hpp"
#include "dprobe/metrics.hpp"
#include "support/synthetic.hpp"

using namespace dprobe;
using namespace dprobe::testing;

namespace {

DepSentence concert(const std::string& id = "concert") {
  return {id,
          {"The", "concert", "caused", "a", "major", "stir", "."},
          {2, 3, 0, 6, 6, 3, 3},
          {"det", "nsubj", "ROOT", "det", "amod", "dobj", "punct"}};
}

DepSentence film(const std::string& id = "film") {
  return {id,
          {"The", "film", "received", "positive", "reviews", "from", "critics", "."},
          {2, 3, 0, 5, 3, 3, 6, 3},
          {"det", "nsubj", "ROOT", "amod", "dobj", "prep", "pobj", "punct"}};
}

EdgeSet chain(std::size_t n) {
  EdgeSet e;
  for (std::size_t i = 0; i + 1 < n; ++i) e.insert({i, i + 1});
  return e;
}

}  // namespace

TEST_CASE("expected_layer hand examples") {
  const std::vector<double> one_step{0, 1};
  CHECK(expected_layer(one_step).value == doctest::Approx(1.0));
  const std::vector<double> s{0.2, 0.5, 0.6};
  const auto e = expected_layer(s);
  CHECK(e.valid);
  CHECK(e.value == doctest::Approx(1.25));
  CHECK(e.deltas.size() == 2);
  CHECK(e.denominator == doctest::Approx(0.4));
  const std::vector<double> flat{0.7, 0.7, 0.7};
  CHECK_FALSE(expected_layer(flat).valid);
  const std::vector<double> single{0.7};
  CHECK_FALSE(expected_layer(single).valid);
}

TEST_CASE("expected_layer uses raw deltas unless clamping is requested") {
  const std::vector<double> s{0.0, 0.6, 0.4, 0.8};
  // deltas 0.6, -0.2, 0.4
  CHECK(expected_layer(s).value == doctest::Approx((0.6 - 0.4 + 1.2) / 0.8));
  CHECK(expected_layer(s, true).value == doctest::Approx((0.6 + 1.2) / 1.0));
}

TEST_CASE("expected_layer properties on random series") {
  Rng rng(101);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t len = 2 + rng.below(12);
    std::vector<double> s(len);
    double acc = rng.uniform();
    for (auto& v : s) v = acc += rng.uniform(0.0, 0.1);
    const auto e = expected_layer(s);
    REQUIRE(e.valid);
    // bounds for non-decreasing series
    CHECK(e.value >= 1.0 - 1e-12);
    CHECK(e.value <= double(len - 1) + 1e-12);
    if (len >= 3) {
      CHECK(e.value > 1.0);
      CHECK(e.value < double(len - 1));
    }
    // shift invariance
    const double c = rng.uniform(-5, 5);
    auto shifted = s;
    for (auto& v : shifted) v += c;
    CHECK(expected_layer(shifted).value == doctest::Approx(e.value).epsilon(1e-9));

    // concatenation: deltas of b appended after those of s
    const std::size_t len2 = 2 + rng.below(8);
    std::vector<double> b(len2);
    double acc2 = rng.uniform();
    for (auto& v : b) v = acc2 += rng.uniform(0.0, 0.1);
    auto joined = s;
    for (std::size_t k = 1; k < len2; ++k) joined.push_back(s.back() + (b[k] - b[0]));
    const auto eb = expected_layer(b);
    const double offset = double(len - 1);
    const double combined =
        (e.denominator * e.value + eb.denominator * (eb.value + offset)) / (e.denominator + eb.denominator);
    CHECK(expected_layer(joined).value == doctest::Approx(combined).epsilon(1e-9));
  }
}

TEST_CASE("summarize uses the population standard deviation over valid seeds") {
  const auto s = summarize({2.0, std::nullopt, 4.0});
  CHECK(s.valid_seeds == 2);
  CHECK(s.mean == doctest::Approx(3.0));
  CHECK(s.stddev == doctest::Approx(1.0));
  const auto one = summarize({1.5});
  CHECK(one.stddev == 0.0);
  CHECK_FALSE(summarize({std::nullopt}).valid());
}

TEST_CASE("layer_scores from persisted trees") {
  const std::vector<DepSentence> sents{concert()};
  const auto gold = gold_edges(sents[0]);
  const DecodedLayers trees{{chain(7)}, {chain(7)}, {gold}};
  const std::vector<std::size_t> all{0};
  const auto global = layer_scores(trees, sents, all, Category::global(), std::nullopt);
  REQUIRE(global.valid);
  CHECK(global.scores == std::vector<double>{0.5, 0.5, 1.0});
  CHECK(global.gold_edges == 6);
  CHECK(expected_layer(global).value == doctest::Approx(2.0));

  // chain keeps (The, concert) at every layer: flat series, invalid E
  const auto nsubj = layer_scores(trees, sents, all, Category::micro("nsubj"), std::nullopt);
  CHECK(nsubj.scores == std::vector<double>{1, 1, 1});
  CHECK_FALSE(expected_layer(nsubj).valid);

  for (std::size_t l = 0; l < 3; ++l)
    CHECK(global.scores[l] == *uuas(trees[l][0], gold).score());
  CHECK_THROWS_AS(layer_scores(trees, sents, {}, Category::global(), std::nullopt), ValidationError);
}

TEST_CASE("micro versus macro sentence averaging") {
  const std::vector<DepSentence> sents{concert(), film()};
  const DecodedLayers trees{{gold_edges(sents[0]), chain(8)}};
  const std::vector<std::size_t> all{0, 1};
  ScoreOptions micro, macro;
  macro.averaging = Averaging::Macro;
  const auto chain_correct = uuas(chain(8), gold_edges(sents[1])).correct;
  CHECK(layer_scores(trees, sents, all, Category::global(), std::nullopt, micro).scores[0] ==
        doctest::Approx((6.0 + chain_correct) / 13.0));
  CHECK(layer_scores(trees, sents, all, Category::global(), std::nullopt, macro).scores[0] ==
        doctest::Approx((1.0 + chain_correct / 7.0) / 2.0));
}

TEST_CASE("perfect trees score 1 in every category") {
  Rng rng(3);
  std::vector<DepSentence> sents;
  for (int i = 0; i < 30; ++i) sents.push_back(random_tree(3 + rng.below(8), rng));
  DecodedLayers trees(2);
  for (const auto& s : sents)
    for (auto& layer : trees) layer.push_back(gold_edges(s));
  std::vector<std::size_t> all(sents.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  std::vector<std::size_t> with_nsubj;
  for (std::size_t i = 0; i < sents.size(); ++i) {
    const auto key = structure_key(sents[i]);
    if (std::find(key.rels.begin(), key.rels.end(), "nsubj") != key.rels.end()) with_nsubj.push_back(i);
  }
  REQUIRE_FALSE(with_nsubj.empty());
  for (const auto& cat : {Category::global(), Category::macro(), Category::micro("nsubj")}) {
    const auto& members = cat.kind == Category::Kind::Micro ? with_nsubj : all;
    const auto series = layer_scores(trees, sents, members, cat, std::nullopt);
    if (!series.valid) continue;
    for (double v : series.scores) CHECK(v == 1.0);
  }
}

TEST_CASE("structure_set_report rows, seed statistics and invalid entries") {
  std::vector<DepSentence> test;
  for (int i = 0; i < 3; ++i) test.push_back(concert("c" + std::to_string(i)));
  test.push_back(film("f0"));
  const auto g0 = gold_edges(test[0]);
  // concert: layer 0 chain, layer 1 gold. film: gold at both layers.
  const DecodedLayers seed_a{{chain(7), chain(7), chain(7), gold_edges(test[3])},
                             {g0, g0, g0, gold_edges(test[3])}};
  auto seed_b = seed_a;
  const std::vector<StructureSetKey> groups{structure_key(concert()), structure_key(film())};
  const auto rows = structure_set_report(groups, {seed_a, seed_b}, test);
  // concert key {dobj,nsubj}: Macro, Micro(dobj), Micro(nsubj); film adds prep
  REQUIRE(rows.size() == 7);
  CHECK(rows[0].group == "dobj,nsubj");
  CHECK(rows[0].category.str() == "Macro");
  CHECK(rows[0].sentences == 3);
  CHECK(rows[0].expected.valid());
  CHECK(rows[0].expected.mean == doctest::Approx(1.0));
  CHECK(rows[0].expected.stddev == 0.0);
  CHECK(rows[1].category.str() == "Micro(dobj)");
  CHECK(rows[2].category.str() == "Micro(nsubj)");
  CHECK_FALSE(rows[2].expected.valid());  // flat: the chain already holds (The, concert)
  CHECK(rows[3].group == "dobj,nsubj,prep");
  CHECK_FALSE(rows[3].expected.valid());  // perfect everywhere is also flat

  const auto csv = rows_to_csv(rows);
  CHECK(csv.rfind("group,category,n,valid,valid_seeds,e_mean,e_std\n", 0) == 0);
  const auto json = rows_to_json(rows);
  CHECK(json.size() == 7);
  CHECK(json[2]["e_mean"].is_null());
}

TEST_CASE("agreement_split_analysis partitions by PLL with a tie policy") {
  std::vector<AgreementItem> items;
  const double plls[][2] = {{-1, -2}, {-3, -2}, {-1, -1}, {-5, -6}};
  DepSentence gold{"g",
                   {"The", "author", "near", "the", "senators", "likes", "spicy", "dishes", "."},
                   {2, 6, 2, 5, 3, 0, 8, 6, 6},
                   {"det", "nsubj", "prep", "det", "pobj", "ROOT", "amod", "dobj", "punct"}};
  for (int i = 0; i < 4; ++i) {
    AgreementItem it;
    it.id = "i" + std::to_string(i);
    it.gold = gold;
    it.pll_grammatical = plls[i][0];
    it.pll_ungrammatical = plls[i][1];
    items.push_back(it);
  }
  const auto g = gold_edges(gold);
  const DecodedLayers trees{std::vector<PredictedTree>(4, chain(9)), std::vector<PredictedTree>(4, g)};

  const auto a = agreement_split_analysis(items, {trees});
  CHECK(a.total == 4);
  CHECK(a.ties == 1);
  REQUIRE(a.partitions.size() == 2);
  CHECK(a.partitions[0].name == "success");
  CHECK(a.partitions[0].items == std::vector<std::size_t>{0, 3});
  CHECK(a.partitions[1].items == std::vector<std::size_t>{1, 2});
  REQUIRE(a.partitions[0].rows.size() == 4);
  CHECK(a.partitions[0].rows[0].category.str() == "Global");
  CHECK(a.partitions[0].rows[3].category.str() == "Micro(dobj)");

  const auto ex = agreement_split_analysis(items, {trees}, TiePolicy::Exclude);
  CHECK(ex.excluded == 1);
  CHECK(ex.partitions[0].items.size() + ex.partitions[1].items.size() + ex.excluded == ex.total);

  // all correct: failure partition empty, reported with n = 0
  for (auto& it : items) it.pll_ungrammatical = *it.pll_grammatical - 1;
  const auto ok = agreement_split_analysis(items, {trees});
  CHECK(ok.partitions[1].items.empty());
  CHECK(ok.partitions[1].rows[0].sentences == 0);
  CHECK_FALSE(ok.partitions[1].rows[0].expected.valid());

  items[0].pll_grammatical.reset();
  CHECK_THROWS_AS(agreement_split_analysis(items, {trees}), ValidationError);
  CHECK(parse_tie_policy("exclude") == TiePolicy::Exclude);
  CHECK_THROWS_AS(parse_tie_policy("coin"), ValidationError);
}
