// SPDX-License-Identifier: Apache-2.0
//
// Gene-gene relationship recall and compound-gene ranking benchmarks over
// per-perturbation aggregate embeddings.
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "cwamsn/trainloop.hpp"

namespace cwamsn::retrieval {

/// Mean of each perturbation's well features, L2-normalized.
struct Aggregates {
  std::vector<std::string> ids;  // first-appearance order
  std::vector<std::vector<double>> vectors;
  /// Perturbations whose mean feature had zero norm; excluded from `ids`.
  std::vector<std::string> zero_norm;

  const std::vector<double>* find(const std::string& id) const;
};

Aggregates aggregate(const std::vector<train::EmbeddingRow>& rows);

double cosine(const std::vector<double>& a, const std::vector<double>& b);

struct GeneGeneReport {
  std::string source;
  double fraction = 0.05;
  std::size_t n_perturbations = 0;
  std::size_t n_pairs = 0;
  std::size_t k = 0;         // per tail
  std::size_t selected = 0;  // |top-k U bottom-k|
  std::size_t known = 0;     // resolvable known pairs
  std::size_t discovered = 0;
  double recall = 0.0;
  /// Known pairs dropped as self-pairs or with ids outside the universe.
  std::vector<std::pair<std::string, std::string>> dropped;
};

/// Selection size per tail: max(1, round-half-up(fraction * pairs)).
std::size_t tail_size(double fraction, std::size_t pairs);

/// Ranks every unordered pair of `universe` (all aggregates when empty) by
/// cosine similarity and counts known pairs among the k most and k least
/// similar. Ties are broken by the lexicographic (a, b) pair id.
GeneGeneReport gene_gene_recall(const Aggregates& aggregates, const std::vector<std::pair<std::string, std::string>>& known,
                                double fraction, const std::string& source = "relationships",
                                const std::vector<std::string>& universe = {});

struct CompoundScore {
  std::string compound;
  std::size_t n_targets = 0;
  std::size_t n_genes = 0;
  double auc = 0.0;
  double ap = 0.0;
};

struct CompoundGeneReport {
  std::vector<CompoundScore> compounds;
  double auc_mean = 0, auc_std = 0, ap_mean = 0, ap_std = 0;
  /// Compounds left out, with the reason.
  std::vector<std::pair<std::string, std::string>> excluded;
};

/// Mann-Whitney AUC (ties count one half) of targets against non-targets.
double auc_of(const std::vector<double>& target_scores, const std::vector<double>& other_scores);
/// Mean precision at each target's rank, ranking by (score desc, id asc).
double average_precision(const std::vector<std::pair<double, std::string>>& scored_genes,
                         const std::set<std::string>& targets);

/// `genes`: the candidate gene universe; when empty, every aggregate that is
/// not a compound key of `targets`.
CompoundGeneReport compound_gene_metrics(const Aggregates& aggregates,
                                         const std::vector<std::pair<std::string, std::string>>& targets,
                                         const std::vector<std::string>& genes = {});

struct ZScores {
  std::size_t n_permutations = 0;
  double auc_baseline_mean = 0, auc_baseline_std = 0;
  double ap_baseline_mean = 0, ap_baseline_std = 0;
  /// Empty when the baseline std is zero.
  std::optional<double> auc_z, ap_z;
};

/// Baseline: mean AUC / AP with each compound's targets redrawn uniformly
/// (same count) from the gene universe, n_permutations times.
ZScores zscore_vs_random(const CompoundGeneReport& report, const Aggregates& aggregates,
                         const std::vector<std::pair<std::string, std::string>>& targets, std::size_t n_permutations,
                         std::uint64_t seed, const std::vector<std::string>& genes = {});

/// Gene-kind perturbation ids of a manifest.
std::vector<std::string> gene_ids(const hcs::DatasetManifest& manifest);

std::string gene_gene_csv(const std::vector<GeneGeneReport>& reports);
std::string compound_gene_csv(const CompoundGeneReport& report, const ZScores& z);

}  // namespace cwamsn::retrieval
