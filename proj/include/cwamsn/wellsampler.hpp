// SPDX-License-Identifier: Apache-2.0
//
// Anchor/target well pairing, crop-and-flip views, patchification with
// anchor masking, and mini-batch collation.
#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cwamsn/hcsdata.hpp"
#include "cwamsn/rng.hpp"
#include "cwamsn/tensor.hpp"

namespace cwamsn::sampler {

enum class PairMode { cross_well, single_well };

std::string_view to_string(PairMode mode);
/// Accepts "cross-well" / "cross" and "single-well" / "single".
PairMode parse_pair_mode(std::string_view text);

struct AnchorTargetPair {
  hcs::PerturbationId perturbation;
  hcs::WellRecord anchor_well;
  hcs::WellRecord target_well;
};

struct AugmentConfig {
  std::size_t view_height = 64;
  std::size_t view_width = 64;
  double global_scale_min = 0.3;
  double global_scale_max = 1.0;
  double focal_scale_min = 0.05;
  double focal_scale_max = 0.3;
  double hflip_prob = 0.5;
  double vflip_prob = 0.5;
  double mask_ratio = 0.15;
  std::size_t n_anchor_views = 11;

  void validate() const;
};

/// Draws the anchor and target wells of `perturbation`. In cross-well mode the
/// two wells are distinct and uniform without replacement; nullopt when the
/// perturbation has fewer than two wells.
std::optional<AnchorTargetPair> sample_pair(const hcs::PerturbationId& perturbation,
                                            const hcs::DatasetManifest& manifest, Rng& rng, PairMode mode);

/// Crop box in source pixels.
struct CropBox {
  std::size_t top = 0, left = 0, height = 0, width = 0;
};

/// Random resized crop box: area fraction from [scale_min, scale_max], log-uniform
/// aspect ratio in [3/4, 4/3], ten attempts then a centred fallback.
CropBox random_resized_crop_box(std::size_t height, std::size_t width, double scale_min, double scale_max,
                                Rng& rng);

/// Bilinear resize of a C x H x W crop to C x out_h x out_w (half-pixel centres).
nd::Tensor crop_and_resize(const nd::Tensor& image, const CropBox& box, std::size_t out_h, std::size_t out_w);

struct WellViews {
  nd::Tensor anchors;  // V_a x C x h x w
  nd::Tensor target;   // 1 x C x h x w
};

/// View 0 is a global crop, views 1..V_a-1 are focal crops; the target is one
/// global crop of the target well. Every view flips independently.
WellViews make_views(const nd::Tensor& anchor_image, const nd::Tensor& target_image, const AugmentConfig& cfg,
                     Rng& rng);

struct PatchTokens {
  nd::Tensor tokens;               // n_keep x (C * patch * patch)
  std::vector<std::size_t> keep;   // sorted patch indices, row-major over the patch grid
};

std::size_t masked_patch_count(std::size_t n_patches, double mask_ratio);

/// Sorted indices of the patches kept after dropping floor(ratio * n) uniformly.
std::vector<std::size_t> sample_keep_indices(std::size_t n_patches, double mask_ratio, Rng& rng);

/// Splits a C x h x w view into patch tokens whose features are ordered
/// (channel, row, column) and keeps only `keep`.
nd::Tensor patchify(const nd::Tensor& view, std::size_t patch_size, const std::vector<std::size_t>& keep);

PatchTokens patchify_and_mask(const nd::Tensor& view, std::size_t patch_size, double mask_ratio, Rng& rng);

/// Loads each well image once and keeps it in memory.
class WellImageCache {
 public:
  explicit WellImageCache(const hcs::DatasetManifest& manifest) : manifest_(&manifest) {}
  const nd::Tensor& get(const hcs::WellRecord& record);

 private:
  const hcs::DatasetManifest* manifest_;
  std::map<hcs::WellKey, nd::Tensor> images_;
};

struct ViewBatch {
  nd::Tensor anchors;  // B x V_a x C x h x w
  nd::Tensor targets;  // B x 1 x C x h x w
  /// keep[row][view]: patch indices kept for each anchor view.
  std::vector<std::vector<std::vector<std::size_t>>> anchor_keep;
  std::vector<std::string> perturbation_ids;
  std::vector<hcs::WellKey> anchor_wells;
  std::vector<hcs::WellKey> target_wells;
  /// Perturbations dropped because they could not be paired.
  std::vector<std::string> skipped;

  std::size_t rows() const { return perturbation_ids.size(); }
};

/// Pairs, augments, masks and stacks one mini-batch. Throws UsageError when
/// every perturbation is skipped.
ViewBatch collate_minibatch(const std::vector<hcs::PerturbationId>& batch, const hcs::DatasetManifest& manifest,
                            WellImageCache& images, const AugmentConfig& cfg, std::size_t patch_size, Rng& rng,
                            PairMode mode);

ViewBatch collate_minibatch(const std::vector<hcs::PerturbationId>& batch, const hcs::DatasetManifest& manifest,
                            const AugmentConfig& cfg, std::size_t patch_size, Rng& rng, PairMode mode);

struct Eligibility {
  std::vector<hcs::PerturbationId> eligible;
  std::vector<std::string> skipped;
};

/// Perturbations that can be paired in `mode`, in manifest order.
Eligibility eligible_perturbations(const hcs::DatasetManifest& manifest, PairMode mode);

/// Seeded shuffle of `perturbations` split into batches of `batch_size`; the
/// last batch may be short.
std::vector<std::vector<hcs::PerturbationId>> plan_epoch(const std::vector<hcs::PerturbationId>& perturbations,
                                                         std::size_t batch_size, std::uint64_t seed,
                                                         std::size_t epoch);

/// Random stream for batch `batch` of epoch `epoch`.
Rng batch_rng(std::uint64_t seed, std::size_t epoch, std::size_t batch);

}  // namespace cwamsn::sampler
