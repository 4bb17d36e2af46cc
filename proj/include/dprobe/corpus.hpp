#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace dprobe {

// A gold dependency tree. Token positions are 0-based in code; `heads`
// keeps the CoNLL-U convention (1-based, 0 = attached to the root).
struct DepSentence {
  std::string id;
  std::vector<std::string> tokens;
  std::vector<int> heads;
  std::vector<std::string> rels;

  std::size_t size() const { return tokens.size(); }

  // 0-based index of the single token whose head is 0.
  std::size_t root() const;

  // 0-based indices of the tokens attached to `token` (0-based).
  std::vector<std::size_t> children(std::size_t token) const;
};

// Throws FormatError describing the first violated invariant.
void validate(const DepSentence& sent);

struct SkippedSentence {
  std::string id;
  std::size_t line = 0;  // first line of the sentence block
  std::string reason;
};

struct ConlluResult {
  std::vector<DepSentence> sentences;
  std::vector<SkippedSentence> skipped;
};

// Reads CoNLL-U. Multiword-token ranges ("3-4") and empty nodes ("5.1") are
// ignored. Malformed lines throw FormatError carrying the line number;
// sentences that are not single-rooted trees are skipped and reported.
ConlluResult parse_conllu(std::istream& in);
ConlluResult read_conllu_file(const std::string& path);

void write_conllu(std::ostream& out, const std::vector<DepSentence>& sents);
void write_conllu_file(const std::string& path, const std::vector<DepSentence>& sents);

struct FilterConfig {
  std::set<std::string> banned_rels{"relcl", "acl:relcl", "csubj", "csubjpass", "dep"};
  std::string punct_label = "punct";
  // Only a single punct token in sentence-final position survives.
  bool final_punct_only = true;
};

struct FilterStats {
  std::size_t input = 0;
  std::size_t kept = 0;
  std::size_t banned_relation = 0;
  std::size_t punctuation = 0;
};

std::vector<DepSentence> filter_sentences(const std::vector<DepSentence>& sents,
                                          const FilterConfig& cfg, FilterStats* stats = nullptr);

// Sorted multiset of labels on the root's outgoing edges.
struct StructureSetKey {
  std::vector<std::string> rels;

  std::string str() const;  // "dobj,nsubj"
  static StructureSetKey parse(const std::string& text);

  auto operator<=>(const StructureSetKey&) const = default;
};

struct KeyConfig {
  std::set<std::string> excluded{"punct"};
};

StructureSetKey structure_key(const DepSentence& sent, const KeyConfig& cfg = {});

struct GroupStats {
  std::size_t total = 0;
  double threshold = 0.10;
  // every group seen, before pruning
  std::map<StructureSetKey, std::size_t> counts;
};

// Keeps groups whose share of the input is strictly greater than
// `threshold`. Throws ValidationError on empty input.
std::map<StructureSetKey, std::vector<DepSentence>> group_and_prune(
    const std::vector<DepSentence>& sents, double threshold = 0.10, GroupStats* stats = nullptr,
    const KeyConfig& key_cfg = {});

nlohmann::json group_report(const GroupStats& stats);

// An undirected edge, stored with first < second (0-based token indices).
using Edge = std::pair<std::size_t, std::size_t>;
using EdgeSet = std::set<Edge>;

inline Edge make_edge(std::size_t a, std::size_t b) { return a < b ? Edge{a, b} : Edge{b, a}; }

struct Category {
  enum class Kind { Global, Macro, Micro };
  Kind kind = Kind::Global;
  std::string label;  // Micro only

  static Category global() { return {Kind::Global, {}}; }
  static Category macro() { return {Kind::Macro, {}}; }
  static Category micro(std::string label) { return {Kind::Micro, std::move(label)}; }

  std::string str() const;  // "Global", "Macro", "Micro(nsubj)"
  static Category parse(const std::string& text);

  auto operator<=>(const Category&) const = default;
};

struct SubgraphEdges {
  Category category;
  EdgeSet edges;
};

struct SubgraphConfig {
  std::string punct_label = "punct";
  // Whether the root's punct attachment counts toward Macro.
  bool macro_includes_punct = false;
};

// Global: every gold edge. Macro: edges from the root to its dependents.
// Micro(label): edges inside the subtrees of root dependents attached via
// `label`, excluding the attachment edge itself. Throws ValidationError if
// the root has no dependent with that label.
SubgraphEdges extract_subgraph_edges(const DepSentence& sent, const Category& category,
                                     const SubgraphConfig& cfg = {});

EdgeSet gold_edges(const DepSentence& sent);

struct Splits {
  std::vector<DepSentence> train;
  std::vector<DepSentence> dev;
  std::vector<DepSentence> test;
};

struct SplitSizes {
  std::size_t train = 40000;
  std::size_t dev = 5000;
  std::size_t test = 5000;
};

// Uniform sampling without replacement; disjoint, reproducible under seed.
Splits split_dataset(const std::vector<DepSentence>& sents, const SplitSizes& sizes,
                     std::uint64_t seed);

// Row-major T x T path-length matrix over the undirected gold tree.
struct GoldDistances {
  std::size_t n = 0;
  std::vector<int> values;

  int operator()(std::size_t i, std::size_t j) const { return values[i * n + j]; }
};

GoldDistances gold_distances(const DepSentence& sent);

}  // namespace dprobe
