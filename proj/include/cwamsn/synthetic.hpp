// SPDX-License-Identifier: Apache-2.0
//
// Synthetic high-content screen with planted phenotype clusters and explicit
// batch nuisances. Per channel c a well image is
//
//   x_c = g_{b,c} * render_c(phenotype_p, layout_w) + o_{b,c} + noise
//
// clamped to [0, 1], where g_{b,c} ~ LogNormal(0, batch_gain_std) and
// o_{b,c} ~ Normal(0, batch_offset_std) are shared by every well of batch b.
// Perturbations in the same cluster share a phenotype up to a small jitter;
// the ground truth relationships are exactly the same-cluster pairs.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cwamsn/hcsdata.hpp"
#include "cwamsn/kvconfig.hpp"
#include "cwamsn/tensor.hpp"

namespace cwamsn::hcs {

struct SyntheticConfig {
  std::size_t n_perturbations = 40;
  std::size_t n_clusters = 8;
  std::size_t wells_per_perturbation = 6;
  std::size_t n_batches = 3;
  std::size_t plates_per_batch = 2;
  std::size_t channels = 5;
  std::size_t height = 64;
  std::size_t width = 64;
  double batch_gain_std = 0.4;
  double batch_offset_std = 0.1;
  double pixel_noise_std = 0.05;
  /// Spread of cluster phenotypes around the midpoint of each render
  /// parameter's range (1: anywhere in the range, 0: every cluster identical).
  double phenotype_effect = 1.0;
  /// Std of each perturbation's offset from its cluster phenotype.
  double phenotype_jitter = 0.05;
  /// Leading members of each cluster that are compounds; the rest are genes.
  std::size_t compounds_per_cluster = 1;
  std::uint64_t seed = 7;

  /// Throws ConfigError when an invariant is violated.
  void validate() const;
  /// Keys data.*; a missing key keeps its default.
  void write_to(KeyValueConfig& kv) const;
  static SyntheticConfig read_from(const KeyValueConfig& kv);
};

/// Cluster-level phenotype vector after jitter, mapped to render parameters.
struct Phenotype {
  std::size_t cell_count = 0;
  std::vector<double> radius;      // per channel, pixels
  std::vector<double> intensity;   // per channel, peak brightness
  std::vector<double> elongation;  // per channel, axis ratio >= 1
};

struct CellPlacement {
  double y = 0, x = 0;
  double angle = 0;
  double scale = 1;  // multiplies every channel's radius
  double brightness = 1;
};

/// Per-well layout randomness.
struct Layout {
  std::vector<CellPlacement> cells;
};

struct BatchNuisance {
  std::vector<double> gain;    // per channel
  std::vector<double> offset;  // per channel
};

struct GroundTruthGraph {
  std::map<std::string, std::size_t> cluster_of;
  /// Every same-cluster pair (a < b in generation order).
  std::vector<std::pair<std::string, std::string>> relationships;
  /// compound -> genes of its cluster.
  std::vector<std::pair<std::string, std::string>> compound_targets;
};

struct SyntheticDataset {
  DatasetManifest manifest;
  GroundTruthGraph truth;
  /// Perturbations with fewer than two wells (not sampleable cross-well).
  std::vector<std::string> ineligible_cross_well;
};

std::size_t cluster_of_index(const SyntheticConfig& cfg, std::size_t perturbation);
PerturbationId perturbation_id(const SyntheticConfig& cfg, std::size_t perturbation);
Phenotype phenotype_of(const SyntheticConfig& cfg, std::size_t perturbation);
Layout sample_layout(const SyntheticConfig& cfg, std::size_t perturbation, std::size_t well,
                     const Phenotype& phenotype);
BatchNuisance batch_nuisance(const SyntheticConfig& cfg, std::size_t batch);
/// Noise-free render (C x H x W) before batch nuisances.
nd::Tensor render(const SyntheticConfig& cfg, const Phenotype& phenotype, const Layout& layout);

/// Batch / plate placement of well `well` of perturbation `perturbation`:
/// round-robin so consecutive wells land in different batches.
std::pair<std::size_t, std::size_t> placement_of(const SyntheticConfig& cfg, std::size_t perturbation,
                                                 std::size_t well);

GroundTruthGraph ground_truth(const SyntheticConfig& cfg);

/// Writes the full dataset directory; returns the indexed manifest.
SyntheticDataset generate_synthetic(const SyntheticConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace cwamsn::hcs
