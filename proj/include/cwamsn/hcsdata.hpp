// SPDX-License-Identifier: Apache-2.0
//
// Batch / plate / well / perturbation data model and the on-disk dataset
// layout:
//
//   <root>/manifest.csv
//   <root>/images/<batch>/<plate>/<well>.ndt
//   <root>/truth/relationships.csv      perturbation_a,perturbation_b
//   <root>/truth/compound_targets.csv   compound_id,gene_id
#pragma once

#include <compare>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cwamsn/tensor.hpp"

namespace cwamsn::hcs {

enum class PerturbationKind { compound, gene_knockout, control };

std::string_view to_string(PerturbationKind kind);
/// Accepts "compound", "gene-knockout" (or "gene") and "control".
PerturbationKind parse_kind(std::string_view text);

struct PerturbationId {
  std::string id;
  PerturbationKind kind = PerturbationKind::gene_knockout;
};

struct WellKey {
  std::string batch_id;
  std::string plate_id;
  std::string well_id;

  auto operator<=>(const WellKey&) const = default;
  std::string str() const { return batch_id + "/" + plate_id + "/" + well_id; }
};

struct WellRecord {
  std::string batch_id;
  std::string plate_id;
  std::string well_id;
  PerturbationId perturbation;
  std::filesystem::path image_path;  // relative to the dataset root
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::optional<double> dose;

  WellKey key() const { return {batch_id, plate_id, well_id}; }
};

/// Records plus the per-perturbation well index W_i.
class DatasetManifest {
 public:
  DatasetManifest() = default;
  /// Indexes `records`; throws IoError on duplicate well keys or on a
  /// perturbation id listed with two different kinds.
  explicit DatasetManifest(std::vector<WellRecord> records, std::filesystem::path root = {});

  const std::vector<WellRecord>& records() const { return records_; }
  const std::filesystem::path& root() const { return root_; }

  /// Perturbations in order of first appearance.
  const std::vector<PerturbationId>& perturbations() const { return perturbations_; }
  std::size_t n_perturbations() const { return perturbations_.size(); }
  const PerturbationId* find(std::string_view id) const;

  /// Record indices of the wells of perturbation `id` (W_i); empty if unknown.
  std::span<const std::size_t> wells_of(std::string_view id) const;
  /// M_i.
  std::size_t well_count(std::string_view id) const { return wells_of(id).size(); }

 private:
  std::vector<WellRecord> records_;
  std::filesystem::path root_;
  std::vector<PerturbationId> perturbations_;
  std::map<std::string, std::vector<std::size_t>, std::less<>> wells_;
};

/// Parses `manifest.csv` (columns batch_id,plate_id,well_id,perturbation_id,
/// kind,image_path,C,H,W with an optional trailing dose). Image paths are
/// resolved against the manifest's directory and must exist. Errors carry the
/// offending line number.
DatasetManifest load_manifest(const std::filesystem::path& manifest_csv);
void write_manifest(const std::filesystem::path& manifest_csv, std::span<const WellRecord> records);

/// Loads the NDT1 image of `record`, checking its header against C, H, W.
nd::Tensor load_well_image(const WellRecord& record, const std::filesystem::path& root);

/// Unordered pairs, one per line, with header perturbation_a,perturbation_b.
std::vector<std::pair<std::string, std::string>> read_pairs_csv(const std::filesystem::path& path);
void write_pairs_csv(const std::filesystem::path& path, std::string_view header,
                     std::span<const std::pair<std::string, std::string>> pairs);

}  // namespace cwamsn::hcs
