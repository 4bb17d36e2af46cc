#include "dprobe/metrics.hpp"

#include <cmath>
#include <set>
#include <sstream>

#include "dprobe/error.hpp"

namespace dprobe {

DecodedLayers decode_layers(std::span<const ProbeParams> probes, std::size_t sentence_count,
                            const EmbeddingLookup& embeddings) {
  DecodedLayers trees(probes.size(), std::vector<PredictedTree>(sentence_count));
  for (std::size_t s = 0; s < sentence_count; ++s) {
    const LayerTensor h = embeddings(s);
    for (std::size_t l = 0; l < probes.size(); ++l) {
      if (probes[l].layer != l) {
        throw ValidationError("decode_layers: probes must be ordered by layer");
      }
      trees[l][s] = prim_mst(distance_matrix(probes[l], h));
    }
  }
  return trees;
}

LayerScoreSeries layer_scores(const DecodedLayers& trees, const std::vector<DepSentence>& sents,
                              std::span<const std::size_t> members, const Category& category,
                              const std::optional<StructureSetKey>& key,
                              const ScoreOptions& opts) {
  if (members.empty()) {
    throw ValidationError("layer_scores: empty sentence set for " + category.str() +
                          (key ? " in " + key->str() : std::string()));
  }
  LayerScoreSeries series;
  series.category = category;
  series.key = key;
  series.sentences = members.size();

  std::vector<SubgraphEdges> subs;
  subs.reserve(members.size());
  for (std::size_t idx : members) {
    subs.push_back(extract_subgraph_edges(sents.at(idx), category, opts.subgraph));
  }
  for (std::size_t l = 0; l < trees.size(); ++l) {
    UuasAggregate agg;
    for (std::size_t k = 0; k < members.size(); ++k) {
      agg.add(subgraph_uuas(trees[l].at(members[k]), subs[k]));
    }
    series.gold_edges = agg.total;
    const auto score = opts.averaging == Averaging::Micro ? agg.micro() : agg.macro();
    series.valid = score.has_value();
    series.scores.push_back(score.value_or(0.0));
  }
  return series;
}

LayerScoreSeries layer_scores(std::span<const ProbeParams> probes,
                              const std::vector<DepSentence>& sents,
                              const EmbeddingLookup& embeddings, const Category& category,
                              const std::optional<StructureSetKey>& key,
                              const ScoreOptions& opts) {
  const DecodedLayers trees = decode_layers(probes, sents.size(), embeddings);
  std::vector<std::size_t> all(sents.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return layer_scores(trees, sents, all, category, key, opts);
}

ExpectedLayerResult expected_layer(std::span<const double> scores, bool clamp_negative) {
  ExpectedLayerResult r;
  if (scores.size() < 2) return r;
  double weighted = 0.0;
  for (std::size_t l = 1; l < scores.size(); ++l) {
    double delta = scores[l] - scores[l - 1];
    if (clamp_negative && delta < 0.0) delta = 0.0;
    r.deltas.push_back(delta);
    r.denominator += delta;
    weighted += static_cast<double>(l) * delta;
  }
  r.valid = std::abs(r.denominator) > 1e-12;
  if (r.valid) r.value = weighted / r.denominator;
  return r;
}

ExpectedLayerResult expected_layer(const LayerScoreSeries& series, bool clamp_negative) {
  if (!series.valid) return {};
  return expected_layer(series.scores, clamp_negative);
}

SeedSummary summarize(std::vector<std::optional<double>> per_seed) {
  SeedSummary s;
  s.per_seed = std::move(per_seed);
  double sum = 0.0;
  for (const auto& v : s.per_seed) {
    if (v) {
      sum += *v;
      ++s.valid_seeds;
    }
  }
  if (s.valid_seeds == 0) return s;
  s.mean = sum / static_cast<double>(s.valid_seeds);
  double sq = 0.0;
  for (const auto& v : s.per_seed) {
    if (v) sq += (*v - s.mean) * (*v - s.mean);
  }
  s.stddev = std::sqrt(sq / static_cast<double>(s.valid_seeds));
  return s;
}

namespace {

std::vector<Category> categories_for(const StructureSetKey& key) {
  std::vector<Category> cats{Category::macro()};
  std::set<std::string> seen;
  for (const auto& rel : key.rels) {
    if (seen.insert(rel).second) cats.push_back(Category::micro(rel));
  }
  return cats;
}

ExpectedLayerRow expected_row(const std::string& group, const Category& cat,
                              const std::vector<DecodedLayers>& trees_by_seed,
                              const std::vector<DepSentence>& sents,
                              std::span<const std::size_t> members, const ScoreOptions& opts,
                              bool clamp_negative) {
  ExpectedLayerRow row;
  row.group = group;
  row.category = cat;
  row.sentences = members.size();
  std::vector<std::optional<double>> per_seed;
  for (const auto& trees : trees_by_seed) {
    if (members.empty()) {
      per_seed.push_back(std::nullopt);
      continue;
    }
    const auto series = layer_scores(trees, sents, members, cat, std::nullopt, opts);
    const auto e = expected_layer(series, clamp_negative);
    per_seed.push_back(e.valid ? std::optional<double>(e.value) : std::nullopt);
  }
  row.expected = summarize(std::move(per_seed));
  return row;
}

}  // namespace

std::vector<ExpectedLayerRow> structure_set_report(
    const std::vector<StructureSetKey>& groups, const std::vector<DecodedLayers>& trees_by_seed,
    const std::vector<DepSentence>& test, const ScoreOptions& opts, const KeyConfig& key_cfg,
    bool clamp_negative) {
  if (trees_by_seed.empty()) throw ValidationError("structure_set_report: no seeds");
  std::vector<ExpectedLayerRow> rows;
  for (const auto& key : groups) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < test.size(); ++i) {
      if (structure_key(test[i], key_cfg) == key) members.push_back(i);
    }
    for (const auto& cat : categories_for(key)) {
      rows.push_back(
          expected_row(key.str(), cat, trees_by_seed, test, members, opts, clamp_negative));
    }
  }
  return rows;
}

TiePolicy parse_tie_policy(const std::string& text) {
  if (text == "failure") return TiePolicy::Failure;
  if (text == "success") return TiePolicy::Success;
  if (text == "exclude") return TiePolicy::Exclude;
  throw ValidationError("unknown tie policy: " + text);
}

AgreementAnalysis agreement_split_analysis(const std::vector<AgreementItem>& items,
                                           const std::vector<DecodedLayers>& trees_by_seed,
                                           TiePolicy ties, const ScoreOptions& opts) {
  if (trees_by_seed.empty()) throw ValidationError("agreement analysis: no seeds");
  AgreementAnalysis out;
  out.total = items.size();
  AgreementPartition success{"success", {}, {}};
  AgreementPartition failure{"failure", {}, {}};
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    if (!it.pll_grammatical || !it.pll_ungrammatical) {
      throw ValidationError("agreement analysis: item " + it.id + " has no PLL scores");
    }
    if (*it.pll_grammatical > *it.pll_ungrammatical) {
      success.items.push_back(i);
    } else if (*it.pll_grammatical < *it.pll_ungrammatical) {
      failure.items.push_back(i);
    } else {
      ++out.ties;
      switch (ties) {
        case TiePolicy::Failure:
          failure.items.push_back(i);
          break;
        case TiePolicy::Success:
          success.items.push_back(i);
          break;
        case TiePolicy::Exclude:
          ++out.excluded;
          break;
      }
    }
  }

  std::vector<DepSentence> sents;
  sents.reserve(items.size());
  for (const auto& it : items) sents.push_back(it.gold);
  const std::vector<Category> cats{Category::global(), Category::macro(),
                                   Category::micro("nsubj"), Category::micro("dobj")};
  for (auto* part : {&success, &failure}) {
    for (const auto& cat : cats) {
      part->rows.push_back(
          expected_row(part->name, cat, trees_by_seed, sents, part->items, opts, false));
    }
  }
  out.partitions.push_back(std::move(success));
  out.partitions.push_back(std::move(failure));
  return out;
}

nlohmann::json rows_to_json(const std::vector<ExpectedLayerRow>& rows) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json per_seed = nlohmann::json::array();
    for (const auto& v : r.expected.per_seed) per_seed.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
    arr.push_back(nlohmann::json{{"group", r.group},
                   {"category", r.category.str()},
                   {"n", r.sentences},
                   {"valid", r.expected.valid()},
                   {"valid_seeds", r.expected.valid_seeds},
                   {"e_mean", r.expected.valid() ? nlohmann::json(r.expected.mean) : nlohmann::json(nullptr)},
                   {"e_std", r.expected.valid() ? nlohmann::json(r.expected.stddev) : nlohmann::json(nullptr)},
                   {"e_per_seed", per_seed}});
  }
  return arr;
}

std::string rows_to_csv(const std::vector<ExpectedLayerRow>& rows) {
  std::ostringstream out;
  out.precision(10);
  out << "group,category,n,valid,valid_seeds,e_mean,e_std\n";
  for (const auto& r : rows) {
    out << '"' << r.group << "\"," << r.category.str() << ',' << r.sentences << ','
        << (r.expected.valid() ? 1 : 0) << ',' << r.expected.valid_seeds << ',';
    if (r.expected.valid()) {
      out << r.expected.mean << ',' << r.expected.stddev;
    } else {
      out << "invalid,invalid";
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace dprobe
