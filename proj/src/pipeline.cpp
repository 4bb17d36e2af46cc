#include "dprobe/pipeline.hpp"

#include <atomic>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "dprobe/embedstore.hpp"
#include "dprobe/error.hpp"
#include "dprobe/report.hpp"
#include "dprobe/templates.hpp"
#include "dprobe/rng.hpp"

namespace dprobe {

namespace fs = std::filesystem;

namespace {

std::string resolve(const std::string& base, const std::string& p) {
  if (p.empty()) return p;
  const fs::path path(p);
  return path.is_absolute() ? p : (fs::path(base) / path).lexically_normal().string();
}

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw ValidationError(what + " path is not set in the config");
  if (!fs::exists(path)) throw ValidationError(what + " not found: " + path);
}

// Runs fn(i) for i in [0, count) on at most `workers` threads. The first
// exception is rethrown after all threads stop.
template <typename Fn>
void run_pool(std::size_t count, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, count));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= count) return;
      {
        std::lock_guard lock(failure_mutex);
        if (failure) return;
      }
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (failure) std::rethrow_exception(failure);
}

std::vector<DepSentence> load_split(const RunConfig& cfg, const std::string& name) {
  const std::string path = (fs::path(cfg.prepared_dir()) / (name + ".conllu")).string();
  require_file(path, name + " split (run `prepare` first)");
  auto parsed = read_conllu_file(path);
  if (!parsed.skipped.empty()) {
    throw FormatError(path + ": " + std::to_string(parsed.skipped.size()) +
                      " sentences failed to parse");
  }
  return std::move(parsed.sentences);
}

std::vector<StructureSetKey> retained_groups(const RunConfig& cfg,
                                             const std::vector<DepSentence>& test) {
  const std::string path = (fs::path(cfg.prepared_dir()) / "groups.json").string();
  std::vector<StructureSetKey> keys;
  if (fs::exists(path)) {
    std::ifstream in(path);
    const auto j = nlohmann::json::parse(in);
    for (const auto& g : j.at("groups")) {
      if (g.at("retained").get<bool>()) keys.push_back(StructureSetKey::parse(g.at("key").get<std::string>()));
    }
    return keys;
  }
  for (const auto& [key, members] : group_and_prune(test, cfg.group_threshold, nullptr, cfg.key)) {
    keys.push_back(key);
  }
  return keys;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

}  // namespace

std::string config_hash(const nlohmann::json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : j.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return hex64(h);
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config " + path + " is not valid JSON: " + e.what());
  }
  return from_json(j, fs::absolute(path).parent_path().string());
}

RunConfig RunConfig::from_json(const nlohmann::json& j, const std::string& base) {
  RunConfig c;
  c.raw = j;
  try {
    c.output_dir = resolve(base, j.value("output_dir", c.output_dir));
    if (const char* env = std::getenv("DPROBE_OUTPUT_DIR"); env && *env) c.output_dir = env;
    c.treebank = resolve(base, j.value("treebank", std::string()));
    if (j.contains("filter")) {
      const auto& f = j["filter"];
      if (f.contains("banned_rels")) c.filter.banned_rels = f["banned_rels"].get<std::set<std::string>>();
      c.filter.punct_label = f.value("punct_label", c.filter.punct_label);
      c.filter.final_punct_only = f.value("final_punct_only", c.filter.final_punct_only);
    }
    if (j.contains("key_excluded")) c.key.excluded = j["key_excluded"].get<std::set<std::string>>();
    c.group_threshold = j.value("group_threshold", c.group_threshold);
    if (j.contains("split")) {
      const auto& s = j["split"];
      c.split.train = s.value("train", c.split.train);
      c.split.dev = s.value("dev", c.split.dev);
      c.split.test = s.value("test", c.split.test);
      c.split_seed = s.value("seed", c.split_seed);
    }
    const std::string prepared = (fs::path(c.output_dir) / "prepared").string();
    auto bundle_default = [&](const char* name) { return (fs::path(prepared) / (std::string(name) + ".bundle")).string(); };
    c.train_bundle = bundle_default("train");
    c.dev_bundle = bundle_default("dev");
    c.test_bundle = bundle_default("test");
    if (j.contains("bundles")) {
      const auto& b = j["bundles"];
      if (b.contains("train")) c.train_bundle = resolve(base, b["train"].get<std::string>());
      if (b.contains("dev")) c.dev_bundle = resolve(base, b["dev"].get<std::string>());
      if (b.contains("test")) c.test_bundle = resolve(base, b["test"].get<std::string>());
    }
    if (j.contains("train")) c.train = TrainConfig::from_json(j["train"]);
    if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    if (c.seeds.empty()) throw ValidationError("config: seeds list must not be empty");
    c.model_name = j.value("model_name", c.model_name);
    if (j.contains("evaluate")) {
      const auto& e = j["evaluate"];
      const auto avg = e.value("averaging", std::string("micro"));
      if (avg != "micro" && avg != "macro") throw ValidationError("evaluate.averaging must be micro or macro");
      c.scoring.averaging = avg == "micro" ? Averaging::Micro : Averaging::Macro;
      c.scoring.subgraph.macro_includes_punct =
          e.value("macro_includes_punct", c.scoring.subgraph.macro_includes_punct);
      c.scoring.subgraph.punct_label = c.filter.punct_label;
      c.clamp_negative = e.value("clamp_negative", c.clamp_negative);
      c.svg = e.value("svg", c.svg);
    }
    if (j.contains("agreement")) {
      const auto& a = j["agreement"];
      auto& ac = c.agreement;
      ac.stage = a.value("stage", ac.stage);
      if (ac.stage != "generate" && ac.stage != "analyze") {
        throw ValidationError("agreement.stage must be generate or analyze");
      }
      ac.lexicon = resolve(base, a.value("lexicon", ac.lexicon));
      ac.generate.count = a.value("count", ac.generate.count);
      ac.generate.seed = a.value("seed", ac.generate.seed);
      ac.generate.attractor_mismatch = a.value("attractor_mismatch", ac.generate.attractor_mismatch);
      ac.generate.attractor_adjective_rate =
          a.value("attractor_adjective_rate", ac.generate.attractor_adjective_rate);
      ac.items = resolve(base, a.value("items", std::string()));
      ac.bundle = resolve(base, a.value("bundle", std::string()));
      ac.ties = parse_tie_policy(a.value("tie_policy", std::string("failure")));
      ac.trace_items = a.value("trace_items", ac.trace_items);
      ac.procrustes = a.value("procrustes", ac.procrustes);
      if (a.contains("mds")) {
        const auto& m = a["mds"];
        ac.mds.n_init = m.value("n_init", ac.mds.n_init);
        ac.mds.max_iter = m.value("max_iter", ac.mds.max_iter);
        ac.mds.eps = m.value("eps", ac.mds.eps);
        ac.mds.seed = m.value("seed", ac.mds.seed);
        ac.mds.classical_first = m.value("classical_first", ac.mds.classical_first);
      }
    } else {
      c.agreement.lexicon = resolve(base, c.agreement.lexicon);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  if (c.agreement.items.empty()) {
    c.agreement.items = (fs::path(c.agreement_dir()) / "items.json").string();
  }
  return c;
}

std::string RunConfig::hash() const { return config_hash(raw); }

std::string RunConfig::train_hash() const {
  return config_hash({{"train", train.to_json()},
                      {"train_bundle", train_bundle},
                      {"dev_bundle", dev_bundle},
                      {"split", {split.train, split.dev, split.test, split_seed}}});
}

std::string RunConfig::prepared_dir() const { return (fs::path(output_dir) / "prepared").string(); }
std::string RunConfig::probes_dir() const { return (fs::path(output_dir) / "probes").string(); }
std::string RunConfig::eval_dir() const { return (fs::path(output_dir) / "eval").string(); }
std::string RunConfig::agreement_dir() const { return (fs::path(output_dir) / "agreement").string(); }

std::string RunConfig::checkpoint_path(std::size_t layer, std::uint64_t seed) const {
  return (fs::path(probes_dir()) /
          ("layer" + std::to_string(layer) + "_seed" + std::to_string(seed) + ".ckpt"))
      .string();
}

void cmd_prepare(const RunConfig& cfg, std::ostream& log) {
  require_file(cfg.treebank, "treebank");
  const ReportStamp stamp{cfg.hash()};

  auto parsed = read_conllu_file(cfg.treebank);
  log << "parsed " << parsed.sentences.size() << " sentences, skipped " << parsed.skipped.size() << '\n';
  FilterStats fstats;
  const auto filtered = filter_sentences(parsed.sentences, cfg.filter, &fstats);
  log << "filter kept " << fstats.kept << " of " << fstats.input << '\n';
  GroupStats gstats;
  const auto groups = group_and_prune(filtered, cfg.group_threshold, &gstats, cfg.key);
  std::vector<DepSentence> pool;
  for (const auto& [key, members] : groups) log << "  retained [" << key.str() << "] " << members.size() << '\n';
  for (const auto& s : filtered) {
    if (groups.count(structure_key(s, cfg.key))) pool.push_back(s);
  }
  const Splits splits = split_dataset(pool, cfg.split, cfg.split_seed);

  fs::create_directories(cfg.prepared_dir());
  auto write_split = [&](const char* name, const std::vector<DepSentence>& sents) {
    std::ostringstream out;
    out << "# generator = " << stamp.version << ", config " << stamp.config_hash << '\n';
    write_conllu(out, sents);
    write_file_atomic((fs::path(cfg.prepared_dir()) / (std::string(name) + ".conllu")).string(), out.str());
  };
  write_split("train", splits.train);
  write_split("dev", splits.dev);
  write_split("test", splits.test);

  nlohmann::json skipped = nlohmann::json::array();
  for (const auto& s : parsed.skipped) skipped.push_back({{"id", s.id}, {"line", s.line}, {"reason", s.reason}});
  nlohmann::json groups_json = group_report(gstats);
  groups_json["stamp"] = stamp.to_json();
  write_file_atomic((fs::path(cfg.prepared_dir()) / "groups.json").string(), groups_json.dump(2) + "\n");

  nlohmann::json manifest = {
      {"stamp", stamp.to_json()},
      {"treebank", cfg.treebank},
      {"parsed", parsed.sentences.size()},
      {"skipped", skipped},
      {"filter",
       {{"banned_rels", cfg.filter.banned_rels},
        {"punct_label", cfg.filter.punct_label},
        {"final_punct_only", cfg.filter.final_punct_only},
        {"input", fstats.input},
        {"kept", fstats.kept},
        {"removed_banned_relation", fstats.banned_relation},
        {"removed_punctuation", fstats.punctuation}}},
      {"key_excluded", cfg.key.excluded},
      {"group_threshold", cfg.group_threshold},
      {"group_threshold_strict", true},
      {"retained_pool", pool.size()},
      {"split", {{"train", splits.train.size()}, {"dev", splits.dev.size()}, {"test", splits.test.size()}, {"seed", cfg.split_seed}}}};
  write_file_atomic((fs::path(cfg.prepared_dir()) / "prepare_manifest.json").string(), manifest.dump(2) + "\n");
  log << "wrote splits " << splits.train.size() << '/' << splits.dev.size() << '/' << splits.test.size()
      << " to " << cfg.prepared_dir() << '\n';
}

void cmd_train(const RunConfig& cfg, const RunOptions& opts, std::ostream& log) {
  require_file(cfg.train_bundle, "train bundle");
  require_file(cfg.dev_bundle, "dev bundle");
  const auto train_sents = load_split(cfg, "train");
  const auto dev_sents = load_split(cfg, "dev");
  const BundleReader train_reader(cfg.train_bundle);
  const BundleReader dev_reader(cfg.dev_bundle);
  verify_alignment(train_reader.manifest(), train_sents);
  verify_alignment(dev_reader.manifest(), dev_sents);
  const std::size_t num_layers = train_reader.manifest().num_layers;
  const std::size_t dim = train_reader.manifest().hidden_dim;
  if (dev_reader.manifest().num_layers != num_layers || dev_reader.manifest().hidden_dim != dim) {
    throw ValidationError("train and dev bundles disagree on layer count or hidden size");
  }

  const std::string train_hash = cfg.train_hash();
  struct Unit {
    std::size_t layer;
    std::uint64_t seed;
    bool done;
  };
  std::vector<Unit> plan;
  for (std::uint64_t seed : cfg.seeds) {
    for (std::size_t layer = 0; layer <= num_layers; ++layer) {
      bool done = false;
      const std::string path = cfg.checkpoint_path(layer, seed);
      if (opts.resume && fs::exists(path)) {
        const auto ck = load_checkpoint(path);
        if (ck.meta.value("train_hash", std::string()) != train_hash) {
          throw ValidationError("refusing to resume: " + path +
                                " was trained with a different configuration");
        }
        done = true;
      }
      plan.push_back({layer, seed, done});
    }
  }
  if (opts.dry_run) {
    for (const auto& u : plan) {
      log << "layer=" << u.layer << " seed=" << u.seed << (u.done ? " done" : " pending") << '\n';
    }
    return;
  }

  fs::create_directories(cfg.probes_dir());
  std::vector<Unit> pending;
  for (const auto& u : plan) {
    if (!u.done) pending.push_back(u);
  }
  std::mutex log_mutex;
  run_pool(pending.size(), opts.workers, [&](std::size_t i) {
    const Unit& u = pending[i];
    TrainConfig tc = cfg.train;
    tc.seed = mix_seed(u.seed, u.layer);
    const BundleSource train(train_reader, train_sents, u.layer + 1);
    const BundleSource dev(dev_reader, dev_sents, u.layer + 1);
    const TrainResult result = train_probe(u.layer, dim, train, dev, tc);
    const std::string path = cfg.checkpoint_path(u.layer, u.seed);
    write_file_atomic(path.substr(0, path.size() - 5) + ".history.csv",
                      ReportStamp{cfg.hash()}.csv_comment() + history_csv(result.history));
    save_checkpoint(path, result.params,
                    {{"seed", u.seed},
                     {"train_seed", tc.seed},
                     {"train_hash", train_hash},
                     {"config_hash", cfg.hash()},
                     {"version", kCodeVersion},
                     {"model_name", train_reader.manifest().model_name},
                     {"best_epoch", result.best_epoch}});
    std::lock_guard lock(log_mutex);
    log << "trained layer " << u.layer << " seed " << u.seed << " best epoch " << result.best_epoch
        << " dev loss "
        << (result.best_epoch ? result.history[result.best_epoch - 1].dev_loss : 0.0) << '\n';
  });
}

std::vector<ProbeParams> load_probes(const RunConfig& cfg, std::size_t num_layers,
                                     std::uint64_t seed) {
  std::vector<ProbeParams> probes;
  for (std::size_t layer = 0; layer <= num_layers; ++layer) {
    const std::string path = cfg.checkpoint_path(layer, seed);
    require_file(path, "checkpoint (run `train` first)");
    probes.push_back(load_checkpoint(path).params);
    if (probes.back().layer != layer) throw FormatError(path + ": checkpoint is for another layer");
  }
  return probes;
}

void cmd_evaluate(const RunConfig& cfg, const RunOptions& opts, std::ostream& log) {
  require_file(cfg.test_bundle, "test bundle");
  const auto test = load_split(cfg, "test");
  const BundleReader reader(cfg.test_bundle);
  verify_alignment(reader.manifest(), test);
  const std::size_t num_layers = reader.manifest().num_layers;
  std::vector<std::vector<ProbeParams>> probes;
  for (std::uint64_t seed : cfg.seeds) probes.push_back(load_probes(cfg, num_layers, seed));

  std::vector<DecodedLayers> trees(cfg.seeds.size());
  run_pool(cfg.seeds.size(), opts.workers, [&](std::size_t s) {
    trees[s] = decode_layers(probes[s], test.size(), [&](std::size_t i) { return reader.read(i); });
  });

  const ReportStamp stamp{cfg.hash()};
  fs::create_directories(fs::path(cfg.eval_dir()) / "trees");
  std::vector<std::string> ids;
  for (const auto& s : test) ids.push_back(s.id);
  for (std::size_t s = 0; s < cfg.seeds.size(); ++s) {
    for (std::size_t l = 0; l <= num_layers; ++l) {
      std::ostringstream out;
      out << stamp.csv_comment();
      write_edge_lists(out, ids, trees[s][l]);
      write_file_atomic((fs::path(cfg.eval_dir()) / "trees" /
                         ("layer" + std::to_string(l) + "_seed" + std::to_string(cfg.seeds[s]) + ".edges"))
                            .string(),
                        out.str());
    }
  }

  ReportInputs in;
  in.svg = cfg.svg;
  std::vector<std::size_t> all(test.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const std::string model = cfg.model_name.empty() ? reader.manifest().model_name : cfg.model_name;
  for (std::size_t s = 0; s < cfg.seeds.size(); ++s) {
    const auto series = layer_scores(trees[s], test, all, Category::global(), std::nullopt, cfg.scoring);
    in.curves.push_back({model, cfg.seeds[s], series.scores});
  }
  const auto groups = retained_groups(cfg, test);
  in.expected_rows = structure_set_report(groups, trees, test, cfg.scoring, cfg.key, cfg.clamp_negative);
  const auto files = emit_reports(in, stamp, cfg.eval_dir());
  log << "wrote " << files.size() << " report files to " << cfg.eval_dir() << '\n';
  for (const auto& r : in.expected_rows) {
    log << "  [" << r.group << "] " << r.category.str() << " E=";
    if (r.expected.valid()) {
      log << r.expected.mean << " +- " << r.expected.stddev;
    } else {
      log << "invalid";
    }
    log << " (n=" << r.sentences << ")\n";
  }
}

void cmd_agreement(const RunConfig& cfg, const RunOptions& opts, std::ostream& log) {
  const auto& ac = cfg.agreement;
  if (ac.stage == "generate") {
    require_file(ac.lexicon, "lexicon directory");
    const Lexicon lex = Lexicon::load(ac.lexicon);
    const auto items = generate_agreement_pairs(lex, ac.generate);
    write_agreement_outputs(items, cfg.agreement_dir());
    log << "generated " << items.size() << " agreement pairs in " << cfg.agreement_dir() << '\n';
    return;
  }

  require_file(ac.items, "agreement items manifest");
  require_file(ac.bundle, "agreement bundle");
  nlohmann::json j;
  {
    std::ifstream in(ac.items);
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(ac.items + " is not valid JSON: " + e.what());
    }
  }
  const auto items = items_from_json(j);
  for (const auto& it : items) {
    if (!it.pll_grammatical || !it.pll_ungrammatical) {
      throw ValidationError("item " + it.id + " has no PLL scores; run the extractor's pll step first");
    }
  }
  std::vector<DepSentence> sents;
  for (const auto& it : items) sents.push_back(it.gold);
  const BundleReader reader(ac.bundle);
  verify_alignment(reader.manifest(), sents);
  const std::size_t num_layers = reader.manifest().num_layers;

  std::vector<std::vector<ProbeParams>> probes;
  for (std::uint64_t seed : cfg.seeds) probes.push_back(load_probes(cfg, num_layers, seed));
  std::vector<DecodedLayers> trees(cfg.seeds.size());
  run_pool(cfg.seeds.size(), opts.workers, [&](std::size_t s) {
    trees[s] = decode_layers(probes[s], sents.size(), [&](std::size_t i) { return reader.read(i); });
  });

  ReportInputs in;
  in.svg = cfg.svg;
  in.agreement = agreement_split_analysis(items, trees, ac.ties, cfg.scoring);

  TraceOptions topts;
  topts.mds = ac.mds;
  topts.procrustes = ac.procrustes;
  topts.subgraph = cfg.scoring.subgraph;
  topts.categories = {Category::global(), Category::macro(), Category::micro("nsubj"),
                      Category::micro("dobj")};
  for (const auto& part : in.agreement->partitions) {
    for (std::size_t k = 0; k < std::min(ac.trace_items, part.items.size()); ++k) {
      const std::size_t idx = part.items[k];
      auto trace = build_trace(probes.front(), reader.read(idx), sents[idx], topts);
      trace.label = part.name;
      in.traces.push_back(std::move(trace));
    }
  }

  const std::string outdir = (fs::path(cfg.agreement_dir()) / "report").string();
  emit_reports(in, ReportStamp{cfg.hash()}, outdir);
  const auto& a = *in.agreement;
  log << "agreement: " << a.partitions[0].items.size() << " success, " << a.partitions[1].items.size()
      << " failure, " << a.ties << " ties (of " << a.total << ")\n";
}

}  // namespace dprobe
