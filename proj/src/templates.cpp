#include "dprobe/templates.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "dprobe/error.hpp"
#include "dprobe/rng.hpp"

namespace dprobe {

namespace {

std::vector<std::vector<std::string>> read_rows(const std::filesystem::path& path,
                                                std::size_t columns) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open lexicon file: " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    std::vector<std::string> row;
    std::string word;
    while (ss >> word) row.push_back(word);
    if (row.empty()) continue;
    if (row.size() != columns) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                            std::to_string(columns) + " column(s)");
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<NumberPair> read_pairs(const std::filesystem::path& path) {
  std::vector<NumberPair> out;
  for (auto& row : read_rows(path, 2)) out.push_back({row[0], row[1]});
  return out;
}

std::vector<std::string> read_words(const std::filesystem::path& path) {
  std::vector<std::string> out;
  for (auto& row : read_rows(path, 1)) out.push_back(row[0]);
  return out;
}

std::string join_sentence(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0 && tokens[i] != ".") out += ' ';
    out += tokens[i];
  }
  return out;
}

}  // namespace

Lexicon Lexicon::load(const std::string& dir) {
  const std::filesystem::path base(dir);
  Lexicon lex;
  lex.subjects = read_pairs(base / "subjects.txt");
  lex.attractors = read_pairs(base / "attractors.txt");
  lex.verbs = read_pairs(base / "verbs.txt");
  lex.prepositions = read_words(base / "prepositions.txt");
  lex.adjectives = read_words(base / "adjectives.txt");
  lex.objects = read_words(base / "objects.txt");
  return lex;
}

std::vector<AgreementItem> generate_agreement_pairs(const Lexicon& lex, const GenerateConfig& cfg) {
  if (lex.subjects.empty() || lex.attractors.empty() || lex.verbs.empty() ||
      lex.prepositions.empty() || lex.adjectives.empty() || lex.objects.empty()) {
    throw ValidationError("lexicon: every word list needs at least one entry");
  }
  // Attractor adjective slot: none or one of the adjectives.
  const double adj_slots = cfg.attractor_adjective_rate > 0.0
                               ? static_cast<double>(lex.adjectives.size()) +
                                     (cfg.attractor_adjective_rate < 1.0 ? 1.0 : 0.0)
                               : 1.0;
  const double space = static_cast<double>(lex.subjects.size()) * 2.0 *
                       (cfg.attractor_mismatch ? 1.0 : 2.0) *
                       static_cast<double>(lex.prepositions.size()) *
                       static_cast<double>(lex.attractors.size()) * adj_slots *
                       static_cast<double>(lex.verbs.size()) *
                       static_cast<double>(lex.adjectives.size()) *
                       static_cast<double>(lex.objects.size());
  if (space < static_cast<double>(cfg.count)) {
    throw ValidationError("lexicon too small: " + std::to_string(static_cast<long long>(space)) +
                          " distinct items possible, " + std::to_string(cfg.count) + " requested");
  }

  Rng rng(cfg.seed);
  std::set<std::string> seen;
  std::vector<AgreementItem> items;
  items.reserve(cfg.count);
  while (items.size() < cfg.count) {
    const bool subj_plural = rng.below(2) == 1;
    const bool attr_plural = cfg.attractor_mismatch ? !subj_plural : rng.below(2) == 1;
    const auto& subj = lex.subjects[rng.below(lex.subjects.size())];
    const auto& prep = lex.prepositions[rng.below(lex.prepositions.size())];
    const auto& attr = lex.attractors[rng.below(lex.attractors.size())];
    std::string attr_adj;
    if (cfg.attractor_adjective_rate > 0.0 && rng.uniform() < cfg.attractor_adjective_rate) {
      attr_adj = lex.adjectives[rng.below(lex.adjectives.size())];
    }
    const auto& verb = lex.verbs[rng.below(lex.verbs.size())];
    const auto& obj_adj = lex.adjectives[rng.below(lex.adjectives.size())];
    const auto& obj = lex.objects[rng.below(lex.objects.size())];

    std::vector<std::string> tokens{"The", subj_plural ? subj.plural : subj.singular, prep, "the"};
    std::vector<int> heads{2, 0, 2, 0};
    std::vector<std::string> rels{"det", "nsubj", "prep", "det"};
    const int attr_pos = static_cast<int>(attr_adj.empty() ? 5 : 6);
    if (!attr_adj.empty()) {
      tokens.push_back(attr_adj);
      heads.push_back(attr_pos);
      rels.push_back("amod");
    }
    heads[3] = attr_pos;
    tokens.push_back(attr_plural ? attr.plural : attr.singular);
    heads.push_back(3);
    rels.push_back("pobj");
    const int verb_pos = attr_pos + 1;
    heads[1] = verb_pos;
    tokens.push_back(subj_plural ? verb.plural : verb.singular);
    heads.push_back(0);
    rels.push_back("ROOT");
    tokens.push_back(obj_adj);
    heads.push_back(verb_pos + 2);
    rels.push_back("amod");
    tokens.push_back(obj);
    heads.push_back(verb_pos);
    rels.push_back("dobj");
    tokens.push_back(".");
    heads.push_back(verb_pos);
    rels.push_back("punct");

    const std::string grammatical = join_sentence(tokens);
    if (!seen.insert(grammatical).second) continue;

    AgreementItem item;
    item.id = "agr" + std::to_string(items.size() + 1);
    item.grammatical = grammatical;
    item.verb_index = static_cast<std::size_t>(verb_pos - 1);
    item.ungrammatical_verb = subj_plural ? verb.singular : verb.plural;
    auto swapped = tokens;
    swapped[item.verb_index] = item.ungrammatical_verb;
    item.ungrammatical = join_sentence(swapped);
    item.gold = DepSentence{item.id, std::move(tokens), std::move(heads), std::move(rels)};
    validate(item.gold);
    item.subject_number = subj_plural ? "pl" : "sg";
    item.attractor_number = attr_plural ? "pl" : "sg";
    items.push_back(std::move(item));
  }
  return items;
}

nlohmann::json items_to_json(const std::vector<AgreementItem>& items) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& it : items) {
    nlohmann::json row = {{"id", it.id},
                          {"grammatical", it.grammatical},
                          {"ungrammatical", it.ungrammatical},
                          {"tokens", it.gold.tokens},
                          {"heads", it.gold.heads},
                          {"rels", it.gold.rels},
                          {"verb_index", it.verb_index},
                          {"ungrammatical_verb", it.ungrammatical_verb},
                          {"subject_number", it.subject_number},
                          {"attractor_number", it.attractor_number},
                          {"pll_grammatical", nullptr},
                          {"pll_ungrammatical", nullptr}};
    if (it.pll_grammatical) row["pll_grammatical"] = *it.pll_grammatical;
    if (it.pll_ungrammatical) row["pll_ungrammatical"] = *it.pll_ungrammatical;
    arr.push_back(std::move(row));
  }
  return {{"format_version", 1}, {"items", arr}};
}

std::vector<AgreementItem> items_from_json(const nlohmann::json& j) {
  std::vector<AgreementItem> items;
  try {
    if (j.at("format_version").get<int>() != 1) {
      throw FormatError("items manifest: unsupported format_version");
    }
    for (const auto& row : j.at("items")) {
      AgreementItem it;
      it.id = row.at("id").get<std::string>();
      it.grammatical = row.at("grammatical").get<std::string>();
      it.ungrammatical = row.at("ungrammatical").get<std::string>();
      it.gold.id = it.id;
      it.gold.tokens = row.at("tokens").get<std::vector<std::string>>();
      it.gold.heads = row.at("heads").get<std::vector<int>>();
      it.gold.rels = row.at("rels").get<std::vector<std::string>>();
      it.verb_index = row.at("verb_index").get<std::size_t>();
      it.ungrammatical_verb = row.value("ungrammatical_verb", "");
      it.subject_number = row.value("subject_number", "");
      it.attractor_number = row.value("attractor_number", "");
      if (row.contains("pll_grammatical") && !row["pll_grammatical"].is_null()) {
        it.pll_grammatical = row["pll_grammatical"].get<double>();
      }
      if (row.contains("pll_ungrammatical") && !row["pll_ungrammatical"].is_null()) {
        it.pll_ungrammatical = row["pll_ungrammatical"].get<double>();
      }
      validate(it.gold);
      items.push_back(std::move(it));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed items manifest: ") + e.what());
  }
  return items;
}

void write_agreement_outputs(const std::vector<AgreementItem>& items, const std::string& dir) {
  const std::filesystem::path base(dir);
  std::filesystem::create_directories(base);
  {
    std::ofstream out(base / "sentences.tsv");
    if (!out) throw ValidationError("cannot write into " + dir);
    for (const auto& it : items) {
      out << it.id << "\tgrammatical\t" << it.grammatical << '\n';
      out << it.id << "\tungrammatical\t" << it.ungrammatical << '\n';
    }
  }
  std::vector<DepSentence> trees;
  trees.reserve(items.size());
  for (const auto& it : items) trees.push_back(it.gold);
  write_conllu_file((base / "agreement.conllu").string(), trees);
  std::ofstream out(base / "items.json");
  out << items_to_json(items).dump(2) << '\n';
}

}  // namespace dprobe
