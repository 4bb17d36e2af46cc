#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dprobe/corpus.hpp"

namespace dprobe {

// Subject-verb agreement pair with an attractor inside a prepositional
// phrase: "The N_subj P the [Adj] N_attr V Adj N_obj ."
struct AgreementItem {
  std::string id;
  std::string grammatical;
  std::string ungrammatical;
  DepSentence gold;  // tree of the grammatical sentence
  std::size_t verb_index = 0;
  std::string ungrammatical_verb;
  std::string subject_number;  // "sg" | "pl"
  std::string attractor_number;
  std::optional<double> pll_grammatical;
  std::optional<double> pll_ungrammatical;
};

struct NumberPair {
  std::string singular;
  std::string plural;
};

// Plain-text word lists, one entry per line; '#' starts a comment.
//   subjects.txt, attractors.txt, verbs.txt: "<singular> <plural>"
//   prepositions.txt, adjectives.txt, objects.txt: one word per line
struct Lexicon {
  std::vector<NumberPair> subjects;
  std::vector<NumberPair> attractors;
  std::vector<NumberPair> verbs;  // singular = 3rd person -s form
  std::vector<std::string> prepositions;
  std::vector<std::string> adjectives;
  std::vector<std::string> objects;

  static Lexicon load(const std::string& dir);
};

struct GenerateConfig {
  std::size_t count = 1000;
  std::uint64_t seed = 0;
  bool attractor_mismatch = true;  // attractor always differs in number from the subject
  double attractor_adjective_rate = 0.5;
};

// Throws ValidationError when the lexicon cannot supply `count` distinct items.
std::vector<AgreementItem> generate_agreement_pairs(const Lexicon& lex, const GenerateConfig& cfg);

nlohmann::json items_to_json(const std::vector<AgreementItem>& items);
std::vector<AgreementItem> items_from_json(const nlohmann::json& j);

// Writes sentences.tsv (item_id, variant, sentence), agreement.conllu (gold
// trees of grammatical members) and items.json into `dir`.
void write_agreement_outputs(const std::vector<AgreementItem>& items, const std::string& dir);

}  // namespace dprobe
