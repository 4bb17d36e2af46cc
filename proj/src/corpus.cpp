#include "dprobe/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <queue>
#include <sstream>

#include "dprobe/error.hpp"
#include "dprobe/rng.hpp"

namespace dprobe {

std::size_t DepSentence::root() const {
  for (std::size_t i = 0; i < heads.size(); ++i) {
    if (heads[i] == 0) return i;
  }
  throw FormatError("sentence " + id + ": no root token");
}

std::vector<std::size_t> DepSentence::children(std::size_t token) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < heads.size(); ++i) {
    if (heads[i] == static_cast<int>(token) + 1) out.push_back(i);
  }
  return out;
}

namespace {

// Empty string when the sentence is a well-formed single-rooted tree.
std::string tree_problem(const DepSentence& s) {
  const std::size_t n = s.tokens.size();
  if (s.heads.size() != n || s.rels.size() != n) return "column length mismatch";
  if (n < 2) return "fewer than 2 tokens";
  std::size_t roots = 0;
  for (int h : s.heads) {
    if (h < 0 || h > static_cast<int>(n)) return "head index out of range";
    if (h == 0) ++roots;
  }
  if (roots != 1) return "no unique root";
  // Walk up from every token; more than n steps means a cycle.
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t cur = i;
    std::size_t steps = 0;
    while (s.heads[cur] != 0) {
      cur = static_cast<std::size_t>(s.heads[cur] - 1);
      if (++steps > n) return "cycle in head structure";
    }
  }
  return {};
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

bool parse_int(const std::string& text, int& value) {
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  return ec == std::errc{} && ptr == end;
}

}  // namespace

void validate(const DepSentence& sent) {
  if (auto problem = tree_problem(sent); !problem.empty()) {
    throw FormatError("sentence " + sent.id + ": " + problem);
  }
}

ConlluResult parse_conllu(std::istream& in) {
  ConlluResult result;
  DepSentence cur;
  std::string error;
  std::size_t block_line = 0;
  std::size_t line_no = 0;
  std::size_t auto_id = 0;
  bool open = false;

  auto flush = [&] {
    if (!open) return;
    if (cur.id.empty()) cur.id = "s" + std::to_string(auto_id);
    ++auto_id;
    if (error.empty()) error = tree_problem(cur);
    if (error.empty()) {
      result.sentences.push_back(std::move(cur));
    } else {
      result.skipped.push_back({cur.id, block_line, error});
    }
    cur = DepSentence{};
    error.clear();
    open = false;
  };

  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      flush();
      continue;
    }
    if (!open) {
      open = true;
      block_line = line_no;
    }
    if (line[0] == '#') {
      const std::string tag = "# sent_id";
      if (line.rfind(tag, 0) == 0) {
        auto eq = line.find('=');
        if (eq != std::string::npos) {
          auto value = line.substr(eq + 1);
          value.erase(0, value.find_first_not_of(' '));
          value.erase(value.find_last_not_of(' ') + 1);
          cur.id = value;
        }
      }
      continue;
    }
    if (!error.empty()) continue;

    auto cols = split_tabs(line);
    if (cols.size() != 10) {
      error = "line " + std::to_string(line_no) + ": expected 10 columns, found " +
              std::to_string(cols.size());
      continue;
    }
    if (cols[0].find_first_of("-.") != std::string::npos) continue;  // multiword / empty node

    int id = 0;
    int head = 0;
    if (!parse_int(cols[0], id) || id != static_cast<int>(cur.tokens.size()) + 1) {
      error = "line " + std::to_string(line_no) + ": bad token id '" + cols[0] + "'";
      continue;
    }
    if (!parse_int(cols[6], head)) {
      error = "line " + std::to_string(line_no) + ": bad head '" + cols[6] + "'";
      continue;
    }
    cur.tokens.push_back(cols[1]);
    cur.heads.push_back(head);
    cur.rels.push_back(cols[7]);
  }
  flush();
  return result;
}

ConlluResult read_conllu_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open treebank: " + path);
  return parse_conllu(in);
}

void write_conllu(std::ostream& out, const std::vector<DepSentence>& sents) {
  for (const auto& s : sents) {
    out << "# sent_id = " << s.id << '\n';
    for (std::size_t i = 0; i < s.size(); ++i) {
      out << (i + 1) << '\t' << s.tokens[i] << "\t_\t_\t_\t_\t" << s.heads[i] << '\t' << s.rels[i]
          << "\t_\t_\n";
    }
    out << '\n';
  }
}

void write_conllu_file(const std::string& path, const std::vector<DepSentence>& sents) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write treebank: " + path);
  write_conllu(out, sents);
}

std::vector<DepSentence> filter_sentences(const std::vector<DepSentence>& sents,
                                          const FilterConfig& cfg, FilterStats* stats) {
  FilterStats local;
  local.input = sents.size();
  std::vector<DepSentence> kept;
  for (const auto& s : sents) {
    const bool banned = std::any_of(s.rels.begin(), s.rels.end(), [&](const std::string& r) {
      return cfg.banned_rels.count(r) != 0;
    });
    if (banned) {
      ++local.banned_relation;
      continue;
    }
    if (cfg.final_punct_only) {
      bool bad = false;
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (s.rels[i] == cfg.punct_label && i + 1 != s.size()) bad = true;
      }
      if (bad) {
        ++local.punctuation;
        continue;
      }
    }
    kept.push_back(s);
  }
  local.kept = kept.size();
  if (stats) *stats = local;
  return kept;
}

std::string StructureSetKey::str() const {
  std::string out;
  for (std::size_t i = 0; i < rels.size(); ++i) {
    if (i) out += ',';
    out += rels[i];
  }
  return out;
}

StructureSetKey StructureSetKey::parse(const std::string& text) {
  StructureSetKey key;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (!part.empty()) key.rels.push_back(part);
  }
  std::sort(key.rels.begin(), key.rels.end());
  return key;
}

StructureSetKey structure_key(const DepSentence& sent, const KeyConfig& cfg) {
  StructureSetKey key;
  for (std::size_t c : sent.children(sent.root())) {
    if (cfg.excluded.count(sent.rels[c]) == 0) key.rels.push_back(sent.rels[c]);
  }
  std::sort(key.rels.begin(), key.rels.end());
  return key;
}

std::map<StructureSetKey, std::vector<DepSentence>> group_and_prune(
    const std::vector<DepSentence>& sents, double threshold, GroupStats* stats,
    const KeyConfig& key_cfg) {
  if (sents.empty()) throw ValidationError("group_and_prune: no sentences to group");
  std::map<StructureSetKey, std::vector<DepSentence>> groups;
  for (const auto& s : sents) groups[structure_key(s, key_cfg)].push_back(s);

  GroupStats local;
  local.total = sents.size();
  local.threshold = threshold;
  for (auto& [key, members] : groups) local.counts[key] = members.size();

  const double total = static_cast<double>(sents.size());
  std::erase_if(groups, [&](const auto& kv) {
    return !(static_cast<double>(kv.second.size()) / total > threshold);
  });
  if (stats) *stats = std::move(local);
  return groups;
}

nlohmann::json group_report(const GroupStats& stats) {
  nlohmann::json groups = nlohmann::json::array();
  const double total = static_cast<double>(stats.total);
  for (const auto& [key, count] : stats.counts) {
    const double share = total > 0 ? static_cast<double>(count) / total : 0.0;
    groups.push_back({{"key", key.str()},
                      {"count", count},
                      {"share", share},
                      {"retained", share > stats.threshold}});
  }
  return {{"total", stats.total}, {"threshold", stats.threshold}, {"groups", groups}};
}

std::string Category::str() const {
  switch (kind) {
    case Kind::Global:
      return "Global";
    case Kind::Macro:
      return "Macro";
    case Kind::Micro:
      return "Micro(" + label + ")";
  }
  return {};
}

Category Category::parse(const std::string& text) {
  if (text == "Global") return global();
  if (text == "Macro") return macro();
  if (text.rfind("Micro(", 0) == 0 && text.size() > 7 && text.back() == ')') {
    return micro(text.substr(6, text.size() - 7));
  }
  throw ValidationError("unknown category: " + text);
}

EdgeSet gold_edges(const DepSentence& sent) {
  EdgeSet edges;
  for (std::size_t i = 0; i < sent.size(); ++i) {
    if (sent.heads[i] != 0) edges.insert(make_edge(i, static_cast<std::size_t>(sent.heads[i] - 1)));
  }
  return edges;
}

SubgraphEdges extract_subgraph_edges(const DepSentence& sent, const Category& category,
                                     const SubgraphConfig& cfg) {
  SubgraphEdges out{category, {}};
  const std::size_t root = sent.root();
  switch (category.kind) {
    case Category::Kind::Global:
      out.edges = gold_edges(sent);
      break;
    case Category::Kind::Macro:
      for (std::size_t c : sent.children(root)) {
        if (!cfg.macro_includes_punct && sent.rels[c] == cfg.punct_label) continue;
        out.edges.insert(make_edge(root, c));
      }
      break;
    case Category::Kind::Micro: {
      std::vector<std::size_t> stack;
      for (std::size_t c : sent.children(root)) {
        if (sent.rels[c] == category.label) stack.push_back(c);
      }
      if (stack.empty()) {
        throw ValidationError("sentence " + sent.id + ": root has no '" + category.label +
                              "' dependent");
      }
      while (!stack.empty()) {
        const std::size_t head = stack.back();
        stack.pop_back();
        for (std::size_t c : sent.children(head)) {
          out.edges.insert(make_edge(head, c));
          stack.push_back(c);
        }
      }
      break;
    }
  }
  return out;
}

Splits split_dataset(const std::vector<DepSentence>& sents, const SplitSizes& sizes,
                     std::uint64_t seed) {
  const std::size_t wanted = sizes.train + sizes.dev + sizes.test;
  if (wanted > sents.size()) {
    throw ValidationError("split_dataset: need " + std::to_string(wanted) + " sentences, have " +
                          std::to_string(sents.size()) + " (short by " +
                          std::to_string(wanted - sents.size()) + ")");
  }
  std::vector<std::size_t> order(sents.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));

  Splits out;
  std::size_t pos = 0;
  auto take = [&](std::size_t count, std::vector<DepSentence>& dst) {
    dst.reserve(count);
    for (std::size_t k = 0; k < count; ++k) dst.push_back(sents[order[pos++]]);
  };
  take(sizes.train, out.train);
  take(sizes.dev, out.dev);
  take(sizes.test, out.test);
  return out;
}

GoldDistances gold_distances(const DepSentence& sent) {
  const std::size_t n = sent.size();
  std::vector<std::vector<std::size_t>> adj(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (sent.heads[i] != 0) {
      const auto h = static_cast<std::size_t>(sent.heads[i] - 1);
      adj[i].push_back(h);
      adj[h].push_back(i);
    }
  }
  GoldDistances d;
  d.n = n;
  d.values.assign(n * n, -1);
  for (std::size_t src = 0; src < n; ++src) {
    std::queue<std::size_t> q;
    d.values[src * n + src] = 0;
    q.push(src);
    while (!q.empty()) {
      const std::size_t u = q.front();
      q.pop();
      for (std::size_t v : adj[u]) {
        if (d.values[src * n + v] < 0) {
          d.values[src * n + v] = d.values[src * n + u] + 1;
          q.push(v);
        }
      }
    }
  }
  return d;
}

}  // namespace dprobe
