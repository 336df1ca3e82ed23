// SPDX-License-Identifier: Apache-2.0
#include "cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <fstream>
#include <optional>
#include <sstream>

#include "cwamsn/error.hpp"
#include "cwamsn/hcsdata.hpp"
#include "cwamsn/kvconfig.hpp"
#include "cwamsn/retrieval.hpp"
#include "cwamsn/synthetic.hpp"
#include "cwamsn/trainloop.hpp"

namespace cwamsn::cli {
namespace fs = std::filesystem;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
  std::optional<std::size_t> prototypes;
  std::optional<double> fraction;
  std::optional<std::size_t> permutations;
  std::optional<std::string> out, dataset, checkpoint, embeddings, targets;
  std::vector<std::string> relationships;
};

/// Every option family parsed up front so that a bad value fails before any
/// work starts, whichever command reads it.
struct RunConfig {
  KeyValueConfig kv;
  hcs::SyntheticConfig data;
  train::TrainConfig train;
  double fraction = 0.05;
  std::size_t permutations = 1000;
  std::string embed_encoder = "anchor";
  std::string out, dataset, checkpoint, embeddings, targets;
  std::vector<std::string> relationships;

  /// Paths are left out of the copies written next to outputs, so those
  /// files do not depend on where a run was placed.
  KeyValueConfig resolved(bool with_paths = true) const {
    KeyValueConfig r;
    data.write_to(r);
    train.write_to(r);
    r.set("eval.fraction", format_double(fraction));
    r.set("eval.permutations", std::to_string(permutations));
    r.set("embed.encoder", embed_encoder);
    if (!with_paths) return r;
    auto path = [&](const char* key, const std::string& v) {
      if (!v.empty()) r.set(key, v);
    };
    path("out", out);
    path("dataset", dataset);
    path("checkpoint", checkpoint);
    path("embeddings", embeddings);
    path("targets", targets);
    std::string rel;
    for (const auto& p : relationships) rel += (rel.empty() ? "" : ",") + p;
    path("relationships", rel);
    return r;
  }
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

RunConfig resolve(const Flags& f, bool seed_is_data_seed) {
  RunConfig rc;
  if (!f.config.empty()) rc.kv = KeyValueConfig::load(f.config);
  auto& kv = rc.kv;
  if (f.seed) kv.set(seed_is_data_seed ? "data.seed" : "seed", std::to_string(*f.seed));
  if (f.mode) kv.set("train.mode", *f.mode);
  if (f.prototypes) kv.set("train.prototypes", std::to_string(*f.prototypes));
  if (f.fraction) kv.set("eval.fraction", format_double(*f.fraction));
  if (f.permutations) kv.set("eval.permutations", std::to_string(*f.permutations));
  auto flag_path = [&](const char* key, const std::optional<std::string>& v) {
    if (v) kv.set(key, *v);
  };
  flag_path("out", f.out);
  flag_path("dataset", f.dataset);
  flag_path("checkpoint", f.checkpoint);
  flag_path("embeddings", f.embeddings);
  flag_path("targets", f.targets);
  if (!f.relationships.empty()) {
    std::string joined;
    for (const auto& p : f.relationships) joined += (joined.empty() ? "" : ",") + p;
    kv.set("relationships", joined);
  }

  rc.data = hcs::SyntheticConfig::read_from(kv);
  rc.train = train::TrainConfig::read_from(kv);
  rc.fraction = kv.get_double("eval.fraction", rc.fraction);
  if (!(rc.fraction > 0.0 && rc.fraction <= 0.5)) throw ConfigError("eval.fraction must be in (0, 0.5]");
  rc.permutations = kv.get_size("eval.permutations", rc.permutations);
  if (rc.permutations < 100) throw ConfigError("eval.permutations must be >= 100");
  rc.embed_encoder = kv.get_string("embed.encoder", rc.embed_encoder);
  if (rc.embed_encoder != "anchor" && rc.embed_encoder != "target") {
    throw ConfigError("embed.encoder must be anchor or target, got '" + rc.embed_encoder + "'");
  }
  rc.out = kv.get_string("out", "");
  rc.dataset = kv.get_string("dataset", "");
  rc.checkpoint = kv.get_string("checkpoint", "");
  rc.embeddings = kv.get_string("embeddings", "");
  rc.targets = kv.get_string("targets", "");
  rc.relationships = split_list(kv.get_string("relationships", ""));
  if (const auto unknown = kv.unused_keys(); !unknown.empty()) {
    std::string list;
    for (const auto& k : unknown) list += (list.empty() ? "" : ", ") + k;
    throw ConfigError("unknown config keys: " + list);
  }
  return rc;
}

void require(const std::string& value, const char* name) {
  if (value.empty()) throw ConfigError(std::string("missing required option --") + name);
}

void echo(const RunConfig& rc, std::ostream& err) { err << "# resolved config\n" << rc.resolved().dump(); }

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw IoError("cannot write " + path.string());
}

void warn_ineligible(const std::vector<std::string>& ids, std::ostream& err) {
  if (ids.empty()) return;
  err << "warning: " << ids.size() << " perturbation(s) have fewer than 2 wells and cannot be paired cross-well:";
  for (const auto& id : ids) err << ' ' << id;
  err << '\n';
}

// ---------------------------------------------------------------- commands

int cmd_generate(const RunConfig& rc, std::ostream& out, std::ostream& err) {
  require(rc.out, "out");
  const auto ds = hcs::generate_synthetic(rc.data, rc.out);
  write_text(fs::path(rc.out) / "config.txt", rc.resolved(false).dump());
  std::size_t gene = 0;
  for (const auto& p : ds.manifest.perturbations()) gene += p.kind == hcs::PerturbationKind::gene_knockout;
  out << "wrote " << ds.manifest.records().size() << " wells of " << ds.manifest.n_perturbations() << " perturbations ("
      << gene << " genes, " << ds.manifest.n_perturbations() - gene << " compounds) to " << rc.out << "\n"
      << ds.truth.relationships.size() << " relationships, " << ds.truth.compound_targets.size()
      << " compound targets\n";
  warn_ineligible(ds.ineligible_cross_well, err);
  return kOk;
}

int cmd_train(const RunConfig& rc, std::ostream& out, std::ostream& err) {
  require(rc.dataset, "dataset");
  require(rc.out, "out");
  const auto manifest = hcs::load_manifest(fs::path(rc.dataset) / "manifest.csv");
  if (rc.train.mode == sampler::PairMode::cross_well) {
    warn_ineligible(sampler::eligible_perturbations(manifest, rc.train.mode).skipped, err);
  }
  const fs::path dir(rc.out);
  fs::create_directories(dir);
  write_text(dir / "config.txt", rc.resolved(false).dump());

  std::ofstream pairs(dir / "pairs.csv");
  if (!pairs) throw IoError("cannot write " + (dir / "pairs.csv").string());
  pairs << "step,perturbation_id,anchor_well,target_well\n";
  const auto start = std::chrono::steady_clock::now();
  std::size_t last_epoch = SIZE_MAX;
  double epoch_loss = 0.0, epoch_h = 0.0;
  std::size_t epoch_steps = 0;
  auto report_epoch = [&] {
    if (epoch_steps == 0) return;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    err << "epoch " << last_epoch << " loss " << epoch_loss / epoch_steps << " entropy " << epoch_h / epoch_steps
        << " (" << secs << " s)\n";
  };

  train::TrainOutputs outputs;
  outputs.checkpoint = dir / "model.ckpt";
  outputs.metrics_csv = dir / "metrics.csv";
  outputs.on_step = [&](const train::MetricsRow& row, const sampler::ViewBatch& batch) {
    for (std::size_t i = 0; i < batch.rows(); ++i) {
      pairs << row.step << ',' << batch.perturbation_ids[i] << ',' << batch.anchor_wells[i].str() << ','
            << batch.target_wells[i].str() << '\n';
    }
    if (row.epoch != last_epoch) {
      report_epoch();
      last_epoch = row.epoch;
      epoch_loss = epoch_h = 0.0;
      epoch_steps = 0;
    }
    epoch_loss += row.loss;
    epoch_h += row.entropy;
    ++epoch_steps;
  };
  const auto st = train::train(manifest, rc.train, outputs);
  report_epoch();
  out << "trained " << st.step << " steps over " << rc.train.epochs << " epochs; checkpoint " << outputs.checkpoint.string()
      << "\n";
  return kOk;
}

int cmd_embed(const RunConfig& rc, std::ostream& out, std::ostream&) {
  require(rc.checkpoint, "checkpoint");
  require(rc.dataset, "dataset");
  require(rc.out, "out");
  const auto model = train::load_training_checkpoint(rc.checkpoint);
  const auto manifest = hcs::load_manifest(fs::path(rc.dataset) / "manifest.csv");
  const auto& weights = rc.embed_encoder == "target" ? model.target : model.anchor;
  const auto rows = train::extract_embeddings(manifest, weights, model.config.encoder);
  if (fs::path(rc.out).has_parent_path()) fs::create_directories(fs::path(rc.out).parent_path());
  train::write_embeddings_csv(rc.out, rows);
  out << "wrote " << rows.size() << " embeddings of width " << model.config.encoder.embed_dim << " to " << rc.out
      << "\n";
  return kOk;
}

std::vector<std::string> gene_universe(const RunConfig& rc) {
  if (rc.dataset.empty()) return {};
  return retrieval::gene_ids(hcs::load_manifest(fs::path(rc.dataset) / "manifest.csv"));
}

retrieval::Aggregates load_aggregates(const RunConfig& rc, std::ostream& err) {
  require(rc.embeddings, "embeddings");
  auto ag = retrieval::aggregate(train::read_embeddings_csv(rc.embeddings));
  for (const auto& id : ag.zero_norm) err << "warning: " << id << " has a zero-norm aggregate and is excluded\n";
  return ag;
}

int cmd_eval_gg(const RunConfig& rc, std::ostream& out, std::ostream& err) {
  if (rc.relationships.empty()) throw ConfigError("missing required option --relationships");
  const auto ag = load_aggregates(rc, err);
  const auto universe = gene_universe(rc);
  std::vector<retrieval::GeneGeneReport> reports;
  for (const auto& path : rc.relationships) {
    const auto known = hcs::read_pairs_csv(path);
    reports.push_back(retrieval::gene_gene_recall(ag, known, rc.fraction, fs::path(path).stem().string(), universe));
    if (!reports.back().dropped.empty()) {
      err << "note: " << reports.back().dropped.size() << " pair(s) of " << path
          << " are self-pairs or outside the ranked perturbations\n";
    }
  }
  const auto csv = retrieval::gene_gene_csv(reports);
  out << csv;
  if (!rc.out.empty()) write_text(rc.out, csv);
  return kOk;
}

int cmd_eval_cg(const RunConfig& rc, std::ostream& out, std::ostream& err) {
  require(rc.targets, "targets");
  const auto ag = load_aggregates(rc, err);
  const auto universe = gene_universe(rc);
  const auto targets = hcs::read_pairs_csv(rc.targets);
  const auto report = retrieval::compound_gene_metrics(ag, targets, universe);
  for (const auto& [c, why] : report.excluded) err << "excluded compound " << c << ": " << why << '\n';
  const auto z = retrieval::zscore_vs_random(report, ag, targets, rc.permutations, rc.train.seed, universe);
  const auto csv = retrieval::compound_gene_csv(report, z);
  out << csv;
  if (!rc.out.empty()) write_text(rc.out, csv);
  return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Cross-well aligned masked siamese network on synthetic cell-painting screens"};
  app.require_subcommand(1);
  Flags f;

  auto common = [&](CLI::App* c) {
    c->add_option("--config", f.config, "key=value config file")->check(CLI::ExistingFile);
  };
  auto* gen = app.add_subcommand("generate", "write a synthetic screen and its ground truth");
  common(gen);
  gen->add_option("--seed", f.seed, "dataset seed (data.seed)");
  gen->add_option("--out", f.out, "output directory");

  auto* tr = app.add_subcommand("train", "pretrain an encoder on a dataset");
  common(tr);
  tr->add_option("--seed", f.seed, "training seed");
  tr->add_option("--dataset", f.dataset, "dataset directory");
  tr->add_option("--mode", f.mode, "cross-well or single-well");
  tr->add_option("--prototypes", f.prototypes, "number of prototypes");
  tr->add_option("--out", f.out, "run directory");

  auto* em = app.add_subcommand("embed", "extract one feature per well");
  common(em);
  em->add_option("--checkpoint", f.checkpoint, "trained checkpoint");
  em->add_option("--dataset", f.dataset, "dataset directory");
  em->add_option("--out", f.out, "embeddings CSV");

  auto* gg = app.add_subcommand("eval-gg", "gene-gene relationship recall");
  common(gg);
  gg->add_option("--embeddings", f.embeddings, "embeddings CSV");
  gg->add_option("--relationships", f.relationships, "relationship CSV(s); one report row per file")->delimiter(',');
  gg->add_option("--fraction", f.fraction, "tail fraction per side");
  gg->add_option("--dataset", f.dataset, "dataset directory; restricts ranking to gene knockouts");
  gg->add_option("--out", f.out, "report CSV");

  auto* cg = app.add_subcommand("eval-cg", "compound-gene target ranking");
  common(cg);
  cg->add_option("--embeddings", f.embeddings, "embeddings CSV");
  cg->add_option("--targets", f.targets, "compound-target CSV");
  cg->add_option("--permutations", f.permutations, "random baseline draws");
  cg->add_option("--seed", f.seed, "permutation seed");
  cg->add_option("--dataset", f.dataset, "dataset directory; restricts candidates to gene knockouts");
  cg->add_option("--out", f.out, "report CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kConfig;
  }

  try {
    const bool is_gen = gen->parsed();
    const auto rc = resolve(f, is_gen);
    echo(rc, err);
    if (is_gen) return cmd_generate(rc, out, err);
    if (tr->parsed()) return cmd_train(rc, out, err);
    if (em->parsed()) return cmd_embed(rc, out, err);
    if (gg->parsed()) return cmd_eval_gg(rc, out, err);
    return cmd_eval_cg(rc, out, err);
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const Error& e) {
    err << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const fs::filesystem_error& e) {
    err << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kInternal;
  }
}

}  // namespace cwamsn::cli
