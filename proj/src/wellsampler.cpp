// SPDX-License-Identifier: Apache-2.0
#include "cwamsn/wellsampler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cwamsn/error.hpp"

namespace cwamsn::sampler {

namespace {

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(v[i - 1], v[j]);
  }
}

void flip_inplace(nd::Tensor& view, bool horizontal, bool vertical) {
  if (!horizontal && !vertical) return;
  const std::size_t C = view.size(0), H = view.size(1), W = view.size(2);
  auto d = view.data_mut();
  for (std::size_t c = 0; c < C; ++c) {
    float* plane = d.data() + c * H * W;
    if (horizontal) {
      for (std::size_t y = 0; y < H; ++y) std::reverse(plane + y * W, plane + (y + 1) * W);
    }
    if (vertical) {
      for (std::size_t y = 0; y < H / 2; ++y) std::swap_ranges(plane + y * W, plane + (y + 1) * W, plane + (H - 1 - y) * W);
    }
  }
}

nd::Tensor augmented_view(const nd::Tensor& image, double scale_min, double scale_max, const AugmentConfig& cfg,
                          Rng& rng) {
  const auto box = random_resized_crop_box(image.size(1), image.size(2), scale_min, scale_max, rng);
  auto view = crop_and_resize(image, box, cfg.view_height, cfg.view_width);
  const bool h = rng.bernoulli(cfg.hflip_prob);
  const bool v = rng.bernoulli(cfg.vflip_prob);
  flip_inplace(view, h, v);
  return view;
}

void check_patch_grid(const nd::Tensor& view, std::size_t patch_size) {
  if (view.rank() != 3) throw ShapeError("patchify: expected C x h x w, got " + nd::to_string(view.shape()));
  if (patch_size == 0 || view.size(1) % patch_size != 0 || view.size(2) % patch_size != 0) {
    throw ConfigError("view " + std::to_string(view.size(1)) + "x" + std::to_string(view.size(2)) +
                      " is not divisible by patch size " + std::to_string(patch_size));
  }
}

}  // namespace

std::string_view to_string(PairMode mode) {
  return mode == PairMode::cross_well ? "cross-well" : "single-well";
}

PairMode parse_pair_mode(std::string_view text) {
  if (text == "cross-well" || text == "cross") return PairMode::cross_well;
  if (text == "single-well" || text == "single") return PairMode::single_well;
  throw ConfigError("unknown sampling mode '" + std::string(text) + "' (expected cross-well or single-well)");
}

void AugmentConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("augment config: " + msg); };
  if (view_height < 1 || view_width < 1) fail("view size must be positive");
  auto range_ok = [](double lo, double hi) { return lo > 0 && lo <= hi && hi <= 1; };
  if (!range_ok(global_scale_min, global_scale_max)) fail("global crop scale range must lie in (0, 1]");
  if (!range_ok(focal_scale_min, focal_scale_max)) fail("focal crop scale range must lie in (0, 1]");
  if (!(hflip_prob >= 0 && hflip_prob <= 1) || !(vflip_prob >= 0 && vflip_prob <= 1)) {
    fail("flip probabilities must lie in [0, 1]");
  }
  if (!(mask_ratio >= 0 && mask_ratio < 1)) fail("mask ratio must lie in [0, 1)");
  if (n_anchor_views < 1) fail("n_anchor_views must be >= 1");
}

std::optional<AnchorTargetPair> sample_pair(const hcs::PerturbationId& perturbation,
                                            const hcs::DatasetManifest& manifest, Rng& rng, PairMode mode) {
  const auto wells = manifest.wells_of(perturbation.id);
  const auto m = static_cast<std::int64_t>(wells.size());
  if (m == 0 || (mode == PairMode::cross_well && m < 2)) return std::nullopt;
  const auto& records = manifest.records();
  const auto a = static_cast<std::size_t>(rng.uniform_int(0, m - 1));
  if (mode == PairMode::single_well) return AnchorTargetPair{perturbation, records[wells[a]], records[wells[a]]};
  auto t = static_cast<std::size_t>(rng.uniform_int(0, m - 2));
  if (t >= a) ++t;
  return AnchorTargetPair{perturbation, records[wells[a]], records[wells[t]]};
}

CropBox random_resized_crop_box(std::size_t height, std::size_t width, double scale_min, double scale_max,
                                Rng& rng) {
  const double area = static_cast<double>(height * width);
  const double log_lo = std::log(3.0 / 4.0), log_hi = std::log(4.0 / 3.0);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * (scale_min == scale_max ? scale_min : rng.uniform(scale_min, scale_max));
    const double ratio = std::exp(rng.uniform(log_lo, log_hi));
    const auto w = static_cast<long>(std::lround(std::sqrt(target * ratio)));
    const auto h = static_cast<long>(std::lround(std::sqrt(target / ratio)));
    if (w > 0 && h > 0 && static_cast<std::size_t>(w) <= width && static_cast<std::size_t>(h) <= height) {
      CropBox box;
      box.height = static_cast<std::size_t>(h);
      box.width = static_cast<std::size_t>(w);
      box.top = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(height - box.height)));
      box.left = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(width - box.width)));
      return box;
    }
  }
  // centred crop at the clamped aspect ratio
  const double in_ratio = static_cast<double>(width) / static_cast<double>(height);
  CropBox box{0, 0, height, width};
  if (in_ratio < 3.0 / 4.0) {
    box.height = static_cast<std::size_t>(std::lround(static_cast<double>(width) / (3.0 / 4.0)));
  } else if (in_ratio > 4.0 / 3.0) {
    box.width = static_cast<std::size_t>(std::lround(static_cast<double>(height) * (4.0 / 3.0)));
  }
  box.top = (height - box.height) / 2;
  box.left = (width - box.width) / 2;
  return box;
}

nd::Tensor crop_and_resize(const nd::Tensor& image, const CropBox& box, std::size_t out_h, std::size_t out_w) {
  if (image.rank() != 3) throw ShapeError("crop_and_resize: expected C x H x W, got " + nd::to_string(image.shape()));
  const std::size_t C = image.size(0), H = image.size(1), W = image.size(2);
  if (box.height == 0 || box.width == 0 || box.top + box.height > H || box.left + box.width > W) {
    throw ShapeError("crop_and_resize: crop box outside image " + nd::to_string(image.shape()));
  }
  auto src = image.data();
  std::vector<float> out(C * out_h * out_w);
  const double sy = static_cast<double>(box.height) / static_cast<double>(out_h);
  const double sx = static_cast<double>(box.width) / static_cast<double>(out_w);

  struct Tap {
    std::size_t i0, i1;
    double w1;
  };
  auto taps = [](std::size_t n_out, double scale, std::size_t offset, std::size_t extent) {
    std::vector<Tap> t(n_out);
    for (std::size_t o = 0; o < n_out; ++o) {
      double pos = (static_cast<double>(o) + 0.5) * scale - 0.5;
      pos = std::clamp(pos, 0.0, static_cast<double>(extent - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(pos));
      const std::size_t i1 = std::min(i0 + 1, extent - 1);
      t[o] = {offset + i0, offset + i1, pos - static_cast<double>(i0)};
    }
    return t;
  };
  const auto ty = taps(out_h, sy, box.top, box.height);
  const auto tx = taps(out_w, sx, box.left, box.width);
  for (std::size_t c = 0; c < C; ++c) {
    const float* plane = src.data() + c * H * W;
    float* dst = out.data() + c * out_h * out_w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto& a = ty[y];
      for (std::size_t x = 0; x < out_w; ++x) {
        const auto& b = tx[x];
        const double top = plane[a.i0 * W + b.i0] * (1 - b.w1) + plane[a.i0 * W + b.i1] * b.w1;
        const double bottom = plane[a.i1 * W + b.i0] * (1 - b.w1) + plane[a.i1 * W + b.i1] * b.w1;
        dst[y * out_w + x] = static_cast<float>(top * (1 - a.w1) + bottom * a.w1);
      }
    }
  }
  return nd::Tensor::from_data({C, out_h, out_w}, std::move(out));
}

WellViews make_views(const nd::Tensor& anchor_image, const nd::Tensor& target_image, const AugmentConfig& cfg,
                     Rng& rng) {
  cfg.validate();
  for (const auto* img : {&anchor_image, &target_image}) {
    if (img->rank() != 3) throw ShapeError("make_views: expected C x H x W, got " + nd::to_string(img->shape()));
    if (img->size(1) < cfg.view_height || img->size(2) < cfg.view_width) {
      throw ConfigError("view size " + std::to_string(cfg.view_height) + "x" + std::to_string(cfg.view_width) +
                        " exceeds source image " + nd::to_string(img->shape()));
    }
  }
  if (anchor_image.size(0) != target_image.size(0)) {
    throw ShapeError("make_views: channel mismatch " + nd::to_string(anchor_image.shape()) + " vs " +
                     nd::to_string(target_image.shape()));
  }
  const std::size_t view_numel = anchor_image.size(0) * cfg.view_height * cfg.view_width;
  std::vector<float> anchors;
  anchors.reserve(cfg.n_anchor_views * view_numel);
  for (std::size_t v = 0; v < cfg.n_anchor_views; ++v) {
    const bool global = v == 0;
    auto view = augmented_view(anchor_image, global ? cfg.global_scale_min : cfg.focal_scale_min,
                               global ? cfg.global_scale_max : cfg.focal_scale_max, cfg, rng);
    anchors.insert(anchors.end(), view.data().begin(), view.data().end());
  }
  auto target = augmented_view(target_image, cfg.global_scale_min, cfg.global_scale_max, cfg, rng);
  const std::size_t C = anchor_image.size(0);
  return {nd::Tensor::from_data({cfg.n_anchor_views, C, cfg.view_height, cfg.view_width}, std::move(anchors)),
          nd::Tensor::from_data({1, C, cfg.view_height, cfg.view_width}, target.to_vector())};
}

std::size_t masked_patch_count(std::size_t n_patches, double mask_ratio) {
  return static_cast<std::size_t>(std::floor(mask_ratio * static_cast<double>(n_patches)));
}

std::vector<std::size_t> sample_keep_indices(std::size_t n_patches, double mask_ratio, Rng& rng) {
  if (!(mask_ratio >= 0 && mask_ratio < 1)) throw ConfigError("mask ratio must lie in [0, 1)");
  std::vector<std::size_t> order(n_patches);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t drop = masked_patch_count(n_patches, mask_ratio);
  if (drop == 0) return order;
  shuffle(order, rng);
  order.resize(n_patches - drop);
  std::sort(order.begin(), order.end());
  return order;
}

nd::Tensor patchify(const nd::Tensor& view, std::size_t patch_size, const std::vector<std::size_t>& keep) {
  check_patch_grid(view, patch_size);
  const std::size_t C = view.size(0), H = view.size(1), W = view.size(2);
  const std::size_t gw = W / patch_size, n = (H / patch_size) * gw;
  const std::size_t dim = C * patch_size * patch_size;
  auto src = view.data();
  std::vector<float> out(keep.size() * dim);
  for (std::size_t t = 0; t < keep.size(); ++t) {
    if (keep[t] >= n) throw ShapeError("patchify: patch index " + std::to_string(keep[t]) + " out of range");
    const std::size_t py = keep[t] / gw, px = keep[t] % gw;
    float* dst = out.data() + t * dim;
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t dy = 0; dy < patch_size; ++dy) {
        const float* row = src.data() + c * H * W + (py * patch_size + dy) * W + px * patch_size;
        std::copy(row, row + patch_size, dst);
        dst += patch_size;
      }
    }
  }
  return nd::Tensor::from_data({keep.size(), dim}, std::move(out));
}

PatchTokens patchify_and_mask(const nd::Tensor& view, std::size_t patch_size, double mask_ratio, Rng& rng) {
  check_patch_grid(view, patch_size);
  const std::size_t n = (view.size(1) / patch_size) * (view.size(2) / patch_size);
  auto keep = sample_keep_indices(n, mask_ratio, rng);
  auto tokens = patchify(view, patch_size, keep);
  return {std::move(tokens), std::move(keep)};
}

const nd::Tensor& WellImageCache::get(const hcs::WellRecord& record) {
  auto key = record.key();
  auto it = images_.find(key);
  if (it == images_.end()) it = images_.emplace(std::move(key), hcs::load_well_image(record, manifest_->root())).first;
  return it->second;
}

ViewBatch collate_minibatch(const std::vector<hcs::PerturbationId>& batch, const hcs::DatasetManifest& manifest,
                            WellImageCache& images, const AugmentConfig& cfg, std::size_t patch_size, Rng& rng,
                            PairMode mode) {
  cfg.validate();
  if (patch_size == 0 || cfg.view_height % patch_size != 0 || cfg.view_width % patch_size != 0) {
    throw ConfigError("view size must be divisible by patch size " + std::to_string(patch_size));
  }
  const std::size_t n_patches = (cfg.view_height / patch_size) * (cfg.view_width / patch_size);
  ViewBatch out;
  std::vector<float> anchors, targets;
  std::size_t channels = 0;
  for (const auto& p : batch) {
    auto pair = sample_pair(p, manifest, rng, mode);
    if (!pair) {
      out.skipped.push_back(p.id);
      continue;
    }
    const auto& a_img = images.get(pair->anchor_well);
    const auto& t_img = images.get(pair->target_well);
    if (channels == 0) channels = a_img.size(0);
    if (a_img.size(0) != channels) throw ShapeError("collate_minibatch: wells differ in channel count");
    auto views = make_views(a_img, t_img, cfg, rng);
    anchors.insert(anchors.end(), views.anchors.data().begin(), views.anchors.data().end());
    targets.insert(targets.end(), views.target.data().begin(), views.target.data().end());
    std::vector<std::vector<std::size_t>> keep;
    for (std::size_t v = 0; v < cfg.n_anchor_views; ++v) keep.push_back(sample_keep_indices(n_patches, cfg.mask_ratio, rng));
    out.anchor_keep.push_back(std::move(keep));
    out.perturbation_ids.push_back(p.id);
    out.anchor_wells.push_back(pair->anchor_well.key());
    out.target_wells.push_back(pair->target_well.key());
  }
  if (out.rows() == 0) throw UsageError("collate_minibatch: every perturbation in the batch was skipped");
  const std::size_t B = out.rows();
  out.anchors = nd::Tensor::from_data({B, cfg.n_anchor_views, channels, cfg.view_height, cfg.view_width},
                                      std::move(anchors));
  out.targets = nd::Tensor::from_data({B, 1, channels, cfg.view_height, cfg.view_width}, std::move(targets));
  return out;
}

ViewBatch collate_minibatch(const std::vector<hcs::PerturbationId>& batch, const hcs::DatasetManifest& manifest,
                            const AugmentConfig& cfg, std::size_t patch_size, Rng& rng, PairMode mode) {
  WellImageCache images(manifest);
  return collate_minibatch(batch, manifest, images, cfg, patch_size, rng, mode);
}

Eligibility eligible_perturbations(const hcs::DatasetManifest& manifest, PairMode mode) {
  Eligibility e;
  const std::size_t need = mode == PairMode::cross_well ? 2 : 1;
  for (const auto& p : manifest.perturbations()) {
    if (manifest.well_count(p.id) >= need) {
      e.eligible.push_back(p);
    } else {
      e.skipped.push_back(p.id);
    }
  }
  return e;
}

std::vector<std::vector<hcs::PerturbationId>> plan_epoch(const std::vector<hcs::PerturbationId>& perturbations,
                                                         std::size_t batch_size, std::uint64_t seed,
                                                         std::size_t epoch) {
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  std::vector<std::size_t> order(perturbations.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed, "epoch_order", {epoch});
  shuffle(order, rng);
  std::vector<std::vector<hcs::PerturbationId>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    auto& b = batches.emplace_back();
    for (std::size_t j = i; j < std::min(order.size(), i + batch_size); ++j) b.push_back(perturbations[order[j]]);
  }
  return batches;
}

Rng batch_rng(std::uint64_t seed, std::size_t epoch, std::size_t batch) {
  return Rng(seed, "minibatch", {epoch, batch});
}

}  // namespace cwamsn::sampler
