// SPDX-License-Identifier: Apache-2.0
#include "cwamsn/retrieval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <unordered_map>

#include "cwamsn/error.hpp"
#include "cwamsn/kvconfig.hpp"
#include "cwamsn/rng.hpp"

namespace cwamsn::retrieval {
namespace {

struct MeanStd {
  double mean = 0.0, std = 0.0;
};

/// Sample standard deviation (n - 1); zero for fewer than two values.
MeanStd mean_std(const std::vector<double>& v) {
  MeanStd out;
  if (v.empty()) return out;
  out.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() < 2) return out;
  double ss = 0.0;
  for (double x : v) ss += (x - out.mean) * (x - out.mean);
  out.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  return out;
}

/// Scores of every gene against one compound, sorted by (score desc, id asc),
/// with midranks (ascending, 1-based) for the Mann-Whitney statistic.
struct RankedGenes {
  std::vector<std::string> ids;  // sorted order
  std::vector<double> scores;
  std::vector<double> midrank_asc;
  std::unordered_map<std::string, std::size_t> position;

  explicit RankedGenes(std::vector<std::pair<double, std::string>> scored) {
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    const std::size_t n = scored.size();
    midrank_asc.resize(n);
    for (std::size_t i = 0; i < n;) {
      std::size_t j = i;
      while (j < n && scored[j].first == scored[i].first) ++j;
      // positions i..j-1 (descending) are ranks n-j+1..n-i ascending
      const double mid = (static_cast<double>(n - j + 1) + static_cast<double>(n - i)) / 2.0;
      for (std::size_t k = i; k < j; ++k) midrank_asc[k] = mid;
      i = j;
    }
    for (std::size_t i = 0; i < n; ++i) {
      ids.push_back(scored[i].second);
      scores.push_back(scored[i].first);
      position[ids.back()] = i;
    }
  }

  /// AUC and AP for targets given by sorted positions.
  std::pair<double, double> metrics(std::vector<std::size_t> positions) const {
    std::sort(positions.begin(), positions.end());
    const double t = static_cast<double>(positions.size());
    const double others = static_cast<double>(ids.size()) - t;
    double rank_sum = 0.0, ap = 0.0;
    for (std::size_t i = 0; i < positions.size(); ++i) {
      rank_sum += midrank_asc[positions[i]];
      ap += static_cast<double>(i + 1) / static_cast<double>(positions[i] + 1);
    }
    const double u = rank_sum - t * (t + 1.0) / 2.0;
    return {u / (t * others), ap / t};
  }
};

struct Evaluation {
  std::vector<std::string> compounds;
  std::vector<RankedGenes> ranked;
  std::vector<std::vector<std::size_t>> target_positions;
  std::vector<std::pair<std::string, std::string>> excluded;
  std::vector<std::string> genes;
};

Evaluation prepare(const Aggregates& aggregates, const std::vector<std::pair<std::string, std::string>>& targets,
                   const std::vector<std::string>& gene_universe) {
  std::vector<std::string> compound_order;
  std::map<std::string, std::set<std::string>> target_sets;
  for (const auto& [c, g] : targets) {
    if (!target_sets.count(c)) compound_order.push_back(c);
    target_sets[c].insert(g);
  }
  Evaluation ev;
  if (gene_universe.empty()) {
    for (const auto& id : aggregates.ids) {
      if (!target_sets.count(id)) ev.genes.push_back(id);
    }
  } else {
    for (const auto& id : gene_universe) {
      if (aggregates.find(id) && !target_sets.count(id)) ev.genes.push_back(id);
    }
  }
  for (const auto& c : compound_order) {
    const auto* cv = aggregates.find(c);
    if (!cv) {
      ev.excluded.emplace_back(c, "no embedding");
      continue;
    }
    std::vector<std::pair<double, std::string>> scored;
    for (const auto& g : ev.genes) scored.emplace_back(cosine(*cv, *aggregates.find(g)), g);
    RankedGenes ranked(std::move(scored));
    std::vector<std::size_t> positions;
    for (const auto& g : target_sets[c]) {
      if (auto it = ranked.position.find(g); it != ranked.position.end()) positions.push_back(it->second);
    }
    if (positions.empty()) {
      ev.excluded.emplace_back(c, "no resolvable target genes");
      continue;
    }
    if (positions.size() == ev.genes.size()) {
      ev.excluded.emplace_back(c, "no non-target genes");
      continue;
    }
    ev.compounds.push_back(c);
    ev.ranked.push_back(std::move(ranked));
    ev.target_positions.push_back(std::move(positions));
  }
  return ev;
}

}  // namespace

const std::vector<double>* Aggregates::find(const std::string& id) const {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == id) return &vectors[i];
  }
  return nullptr;
}

Aggregates aggregate(const std::vector<train::EmbeddingRow>& rows) {
  std::vector<std::string> order;
  std::map<std::string, std::pair<std::vector<double>, std::size_t>> sums;
  std::size_t d = rows.empty() ? 0 : rows.front().feature.size();
  for (const auto& r : rows) {
    if (r.feature.size() != d) throw ShapeError("aggregate: embedding rows have different widths");
    auto [it, fresh] = sums.try_emplace(r.perturbation_id, std::vector<double>(d, 0.0), 0);
    if (fresh) order.push_back(r.perturbation_id);
    for (std::size_t j = 0; j < d; ++j) it->second.first[j] += static_cast<double>(r.feature[j]);
    ++it->second.second;
  }
  Aggregates out;
  for (const auto& id : order) {
    auto& [sum, count] = sums[id];
    double norm = 0.0;
    for (auto& x : sum) {
      x /= static_cast<double>(count);
      norm += x * x;
    }
    norm = std::sqrt(norm);
    if (!(norm > 1e-12)) {
      out.zero_norm.push_back(id);
      continue;
    }
    for (auto& x : sum) x /= norm;
    out.ids.push_back(id);
    out.vectors.push_back(std::move(sum));
  }
  return out;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    dot += a[j] * b[j];
    na += a[j] * a[j];
    nb += b[j] * b[j];
  }
  return dot / std::sqrt(na * nb);
}

std::size_t tail_size(double fraction, std::size_t pairs) {
  const auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(pairs) + 0.5));
  return std::max<std::size_t>(1, k);
}

GeneGeneReport gene_gene_recall(const Aggregates& aggregates,
                                const std::vector<std::pair<std::string, std::string>>& known, double fraction,
                                const std::string& source, const std::vector<std::string>& universe) {
  if (!(fraction > 0.0 && fraction <= 0.5)) {
    throw ConfigError("gene-gene fraction must be in (0, 0.5], got " + format_double(fraction));
  }
  std::vector<std::string> ids;
  if (universe.empty()) {
    ids = aggregates.ids;
  } else {
    for (const auto& id : universe) {
      if (aggregates.find(id)) ids.push_back(id);
    }
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  if (ids.size() < 2) throw UsageError("gene-gene recall needs at least 2 perturbations, got " + std::to_string(ids.size()));

  GeneGeneReport rep;
  rep.source = source;
  rep.fraction = fraction;
  rep.n_perturbations = ids.size();
  const std::set<std::string> present(ids.begin(), ids.end());
  std::set<std::pair<std::string, std::string>> known_set;
  for (auto [a, b] : known) {
    if (a == b || !present.count(a) || !present.count(b)) {
      rep.dropped.emplace_back(a, b);
      continue;
    }
    if (b < a) std::swap(a, b);
    known_set.emplace(a, b);
  }
  if (known_set.empty()) throw UsageError("relationship source '" + source + "' has no pairs among the embedded perturbations");
  rep.known = known_set.size();

  struct Pair {
    double sim;
    std::size_t a, b;  // indices into sorted ids, a < b
  };
  std::vector<const std::vector<double>*> vec;
  for (const auto& id : ids) vec.push_back(aggregates.find(id));
  std::vector<Pair> pairs;
  pairs.reserve(ids.size() * (ids.size() - 1) / 2);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    for (std::size_t j = i + 1; j < ids.size(); ++j) pairs.push_back({cosine(*vec[i], *vec[j]), i, j});
  }
  rep.n_pairs = pairs.size();
  rep.k = std::min(tail_size(fraction, pairs.size()), pairs.size());
  // (i, j) index order over sorted ids is the lexicographic pair-id order
  auto id_less = [](const Pair& x, const Pair& y) { return x.a != y.a ? x.a < y.a : x.b < y.b; };
  auto top = pairs, bottom = pairs;
  std::partial_sort(top.begin(), top.begin() + static_cast<std::ptrdiff_t>(rep.k), top.end(),
                    [&](const Pair& x, const Pair& y) { return x.sim != y.sim ? x.sim > y.sim : id_less(x, y); });
  std::partial_sort(bottom.begin(), bottom.begin() + static_cast<std::ptrdiff_t>(rep.k), bottom.end(),
                    [&](const Pair& x, const Pair& y) { return x.sim != y.sim ? x.sim < y.sim : id_less(x, y); });
  std::set<std::pair<std::size_t, std::size_t>> selected;
  for (std::size_t i = 0; i < rep.k; ++i) {
    selected.emplace(top[i].a, top[i].b);
    selected.emplace(bottom[i].a, bottom[i].b);
  }
  rep.selected = selected.size();
  for (const auto& [a, b] : selected) rep.discovered += known_set.count({ids[a], ids[b]});
  rep.recall = static_cast<double>(rep.discovered) / static_cast<double>(rep.known);
  return rep;
}

double auc_of(const std::vector<double>& target_scores, const std::vector<double>& other_scores) {
  if (target_scores.empty() || other_scores.empty()) throw UsageError("AUC needs targets and non-targets");
  std::vector<std::pair<double, std::string>> scored;
  std::set<std::string> targets;
  for (std::size_t i = 0; i < target_scores.size(); ++i) {
    scored.emplace_back(target_scores[i], "t" + std::to_string(i));
    targets.insert(scored.back().second);
  }
  for (std::size_t i = 0; i < other_scores.size(); ++i) scored.emplace_back(other_scores[i], "o" + std::to_string(i));
  RankedGenes ranked(std::move(scored));
  std::vector<std::size_t> pos;
  for (const auto& t : targets) pos.push_back(ranked.position.at(t));
  return ranked.metrics(pos).first;
}

double average_precision(const std::vector<std::pair<double, std::string>>& scored_genes,
                         const std::set<std::string>& targets) {
  RankedGenes ranked(scored_genes);
  std::vector<std::size_t> pos;
  for (const auto& t : targets) {
    if (auto it = ranked.position.find(t); it != ranked.position.end()) pos.push_back(it->second);
  }
  if (pos.empty()) throw UsageError("average precision needs at least one ranked target");
  if (pos.size() == ranked.ids.size()) return 1.0;
  return ranked.metrics(pos).second;
}

CompoundGeneReport compound_gene_metrics(const Aggregates& aggregates,
                                         const std::vector<std::pair<std::string, std::string>>& targets,
                                         const std::vector<std::string>& genes) {
  const auto ev = prepare(aggregates, targets, genes);
  CompoundGeneReport rep;
  rep.excluded = ev.excluded;
  std::vector<double> aucs, aps;
  for (std::size_t i = 0; i < ev.compounds.size(); ++i) {
    const auto [auc, ap] = ev.ranked[i].metrics(ev.target_positions[i]);
    rep.compounds.push_back({ev.compounds[i], ev.target_positions[i].size(), ev.genes.size(), auc, ap});
    aucs.push_back(auc);
    aps.push_back(ap);
  }
  const auto a = mean_std(aucs), p = mean_std(aps);
  rep.auc_mean = a.mean;
  rep.auc_std = a.std;
  rep.ap_mean = p.mean;
  rep.ap_std = p.std;
  return rep;
}

ZScores zscore_vs_random(const CompoundGeneReport& report, const Aggregates& aggregates,
                         const std::vector<std::pair<std::string, std::string>>& targets, std::size_t n_permutations,
                         std::uint64_t seed, const std::vector<std::string>& genes) {
  if (n_permutations < 100) {
    throw ConfigError("n_permutations must be >= 100, got " + std::to_string(n_permutations));
  }
  const auto ev = prepare(aggregates, targets, genes);
  if (ev.compounds.empty()) throw UsageError("no compound could be evaluated against the gene universe");
  const std::size_t n_genes = ev.genes.size();
  std::vector<double> auc_means, ap_means;
  std::vector<std::size_t> deck(n_genes);
  for (std::size_t p = 0; p < n_permutations; ++p) {
    Rng rng(seed, "permute", {p});
    double auc_sum = 0.0, ap_sum = 0.0;
    for (std::size_t c = 0; c < ev.compounds.size(); ++c) {
      const std::size_t t = ev.target_positions[c].size();
      std::iota(deck.begin(), deck.end(), std::size_t{0});
      for (std::size_t i = 0; i < t; ++i) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i),
                                                                static_cast<std::int64_t>(n_genes - 1)));
        std::swap(deck[i], deck[j]);
      }
      const auto [auc, ap] = ev.ranked[c].metrics(std::vector<std::size_t>(deck.begin(), deck.begin() + t));
      auc_sum += auc;
      ap_sum += ap;
    }
    auc_means.push_back(auc_sum / static_cast<double>(ev.compounds.size()));
    ap_means.push_back(ap_sum / static_cast<double>(ev.compounds.size()));
  }
  ZScores z;
  z.n_permutations = n_permutations;
  const auto a = mean_std(auc_means), p = mean_std(ap_means);
  z.auc_baseline_mean = a.mean;
  z.auc_baseline_std = a.std;
  z.ap_baseline_mean = p.mean;
  z.ap_baseline_std = p.std;
  if (a.std > 0.0) z.auc_z = (report.auc_mean - a.mean) / a.std;
  if (p.std > 0.0) z.ap_z = (report.ap_mean - p.mean) / p.std;
  return z;
}

std::vector<std::string> gene_ids(const hcs::DatasetManifest& manifest) {
  std::vector<std::string> out;
  for (const auto& p : manifest.perturbations()) {
    if (p.kind == hcs::PerturbationKind::gene_knockout) out.push_back(p.id);
  }
  return out;
}

std::string gene_gene_csv(const std::vector<GeneGeneReport>& reports) {
  std::string out = "source,fraction,perturbations,pairs,k,selected,known,discovered,recall\n";
  for (const auto& r : reports) {
    out += r.source + "," + format_double(r.fraction) + "," + std::to_string(r.n_perturbations) + "," +
           std::to_string(r.n_pairs) + "," + std::to_string(r.k) + "," + std::to_string(r.selected) + "," +
           std::to_string(r.known) + "," + std::to_string(r.discovered) + "," + format_double(r.recall) + "\n";
  }
  return out;
}

std::string compound_gene_csv(const CompoundGeneReport& report, const ZScores& z) {
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string("undefined"); };
  std::string out = "metric,compounds,mean,std,baseline_mean,baseline_std,z,permutations\n";
  const auto n = std::to_string(report.compounds.size());
  const auto perms = std::to_string(z.n_permutations);
  out += "auc," + n + "," + format_double(report.auc_mean) + "," + format_double(report.auc_std) + "," + format_double(z.auc_baseline_mean) + "," +
         format_double(z.auc_baseline_std) + "," + opt(z.auc_z) + "," + perms + "\n";
  out += "ap," + n + "," + format_double(report.ap_mean) + "," + format_double(report.ap_std) + "," + format_double(z.ap_baseline_mean) + "," +
         format_double(z.ap_baseline_std) + "," + opt(z.ap_z) + "," + perms + "\n";
  return out;
}

}  // namespace cwamsn::retrieval
