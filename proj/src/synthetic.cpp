// SPDX-License-Identifier: Apache-2.0
#include "cwamsn/synthetic.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "cwamsn/error.hpp"
#include "cwamsn/ndt_io.hpp"
#include "cwamsn/rng.hpp"

namespace cwamsn::hcs {
namespace fs = std::filesystem;

namespace {

constexpr double kBackground = 0.05;
constexpr std::size_t kWellsPerRow = 24;

std::size_t members_before(const SyntheticConfig& cfg, std::size_t perturbation) {
  // perturbation i is member number i / K of cluster i % K
  return perturbation / cfg.n_clusters;
}

std::string well_name(std::size_t slot) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%c%02zu", static_cast<char>('A' + slot / kWellsPerRow), slot % kWellsPerRow + 1);
  return buf;
}

}  // namespace

void SyntheticConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("synthetic config: " + msg); };
  if (n_clusters < 1) fail("n_clusters must be >= 1");
  if (n_perturbations < n_clusters) fail("n_perturbations must be >= n_clusters");
  if (wells_per_perturbation < 1) fail("wells_per_perturbation must be >= 1");
  if (n_batches < 1 || plates_per_batch < 1) fail("n_batches and plates_per_batch must be >= 1");
  if (channels < 1 || height < 1 || width < 1) fail("C, H, W must be >= 1");
  if (!(phenotype_effect >= 0 && phenotype_effect <= 1)) fail("phenotype_effect must be in [0, 1]");
  if (!(batch_gain_std >= 0) || !(batch_offset_std >= 0) || !(pixel_noise_std >= 0) || !(phenotype_jitter >= 0)) {
    fail("standard deviations must be >= 0");
  }
  if (compounds_per_cluster > 0 && compounds_per_cluster >= n_perturbations / n_clusters) {
    fail("compounds_per_cluster must leave at least one gene in every cluster");
  }
  const std::size_t plates = n_batches * plates_per_batch;
  const std::size_t per_plate = (n_perturbations * wells_per_perturbation + plates - 1) / plates;
  if (per_plate > 26 * kWellsPerRow) fail("too many wells per plate (max 624)");
}

void SyntheticConfig::write_to(KeyValueConfig& kv) const {
  kv.set("data.seed", std::to_string(seed));
  kv.set("data.perturbations", std::to_string(n_perturbations));
  kv.set("data.clusters", std::to_string(n_clusters));
  kv.set("data.wells_per_perturbation", std::to_string(wells_per_perturbation));
  kv.set("data.batches", std::to_string(n_batches));
  kv.set("data.plates_per_batch", std::to_string(plates_per_batch));
  kv.set("data.channels", std::to_string(channels));
  kv.set("data.height", std::to_string(height));
  kv.set("data.width", std::to_string(width));
  kv.set("data.batch_gain_std", format_double(batch_gain_std));
  kv.set("data.batch_offset_std", format_double(batch_offset_std));
  kv.set("data.pixel_noise_std", format_double(pixel_noise_std));
  kv.set("data.phenotype_effect", format_double(phenotype_effect));
  kv.set("data.phenotype_jitter", format_double(phenotype_jitter));
  kv.set("data.compounds_per_cluster", std::to_string(compounds_per_cluster));
}

SyntheticConfig SyntheticConfig::read_from(const KeyValueConfig& kv) {
  SyntheticConfig c;
  c.seed = kv.get_u64("data.seed", c.seed);
  c.n_perturbations = kv.get_size("data.perturbations", c.n_perturbations);
  c.n_clusters = kv.get_size("data.clusters", c.n_clusters);
  c.wells_per_perturbation = kv.get_size("data.wells_per_perturbation", c.wells_per_perturbation);
  c.n_batches = kv.get_size("data.batches", c.n_batches);
  c.plates_per_batch = kv.get_size("data.plates_per_batch", c.plates_per_batch);
  c.channels = kv.get_size("data.channels", c.channels);
  c.height = kv.get_size("data.height", c.height);
  c.width = kv.get_size("data.width", c.width);
  c.batch_gain_std = kv.get_double("data.batch_gain_std", c.batch_gain_std);
  c.batch_offset_std = kv.get_double("data.batch_offset_std", c.batch_offset_std);
  c.pixel_noise_std = kv.get_double("data.pixel_noise_std", c.pixel_noise_std);
  c.phenotype_effect = kv.get_double("data.phenotype_effect", c.phenotype_effect);
  c.phenotype_jitter = kv.get_double("data.phenotype_jitter", c.phenotype_jitter);
  c.compounds_per_cluster = kv.get_size("data.compounds_per_cluster", c.compounds_per_cluster);
  c.validate();
  return c;
}

std::size_t cluster_of_index(const SyntheticConfig& cfg, std::size_t perturbation) {
  return perturbation % cfg.n_clusters;
}

PerturbationId perturbation_id(const SyntheticConfig& cfg, std::size_t perturbation) {
  char buf[32];
  const bool compound = members_before(cfg, perturbation) < cfg.compounds_per_cluster;
  std::snprintf(buf, sizeof(buf), compound ? "cpd_%03zu" : "gene_%03zu", perturbation);
  return {buf, compound ? PerturbationKind::compound : PerturbationKind::gene_knockout};
}

Phenotype phenotype_of(const SyntheticConfig& cfg, std::size_t perturbation) {
  const std::size_t cluster = cluster_of_index(cfg, perturbation);
  const std::size_t dims = 1 + 3 * cfg.channels;
  Rng cluster_rng(cfg.seed, "cluster_phenotype", {cluster});
  Rng jitter_rng(cfg.seed, "perturbation_jitter", {perturbation});
  std::vector<double> phi(dims);
  for (auto& v : phi) v = 0.5 + cfg.phenotype_effect * (cluster_rng.uniform() - 0.5);
  for (auto& v : phi) v = std::clamp(v + jitter_rng.normal(0.0, 1.0) * cfg.phenotype_jitter, 0.0, 1.0);

  Phenotype p;
  p.cell_count = 4 + static_cast<std::size_t>(std::lround(10.0 * phi[0]));
  for (std::size_t c = 0; c < cfg.channels; ++c) {
    p.radius.push_back(1.5 + 3.0 * phi[1 + c]);
    p.intensity.push_back(0.25 + 0.6 * phi[1 + cfg.channels + c]);
    p.elongation.push_back(1.0 + 1.5 * phi[1 + 2 * cfg.channels + c]);
  }
  return p;
}

Layout sample_layout(const SyntheticConfig& cfg, std::size_t perturbation, std::size_t well,
                     const Phenotype& phenotype) {
  Rng rng(cfg.seed, "well_layout", {perturbation, well});
  Layout layout;
  for (std::size_t k = 0; k < phenotype.cell_count; ++k) {
    CellPlacement cell;
    cell.y = rng.uniform(0.0, static_cast<double>(cfg.height));
    cell.x = rng.uniform(0.0, static_cast<double>(cfg.width));
    cell.angle = rng.uniform(0.0, std::numbers::pi);
    cell.scale = std::exp(0.15 * rng.normal());
    cell.brightness = std::exp(0.15 * rng.normal());
    layout.cells.push_back(cell);
  }
  return layout;
}

BatchNuisance batch_nuisance(const SyntheticConfig& cfg, std::size_t batch) {
  Rng rng(cfg.seed, "batch_nuisance", {batch});
  BatchNuisance n;
  for (std::size_t c = 0; c < cfg.channels; ++c) n.gain.push_back(std::exp(cfg.batch_gain_std * rng.normal()));
  for (std::size_t c = 0; c < cfg.channels; ++c) n.offset.push_back(cfg.batch_offset_std * rng.normal());
  return n;
}

nd::Tensor render(const SyntheticConfig& cfg, const Phenotype& phenotype, const Layout& layout) {
  const std::size_t H = cfg.height, W = cfg.width;
  std::vector<double> img(cfg.channels * H * W, kBackground);
  for (std::size_t c = 0; c < cfg.channels; ++c) {
    double* plane = img.data() + c * H * W;
    for (const auto& cell : layout.cells) {
      const double r = phenotype.radius[c] * cell.scale;
      const double e = std::sqrt(phenotype.elongation[c]);
      const double sa = r * e, sb = r / e;
      const double ca = std::cos(cell.angle), sn = std::sin(cell.angle);
      const double amp = phenotype.intensity[c] * cell.brightness;
      const double reach = 3.0 * sa;
      const auto y0 = static_cast<std::ptrdiff_t>(std::max(0.0, std::floor(cell.y - reach)));
      const auto y1 = static_cast<std::ptrdiff_t>(std::min<double>(H - 1, std::ceil(cell.y + reach)));
      const auto x0 = static_cast<std::ptrdiff_t>(std::max(0.0, std::floor(cell.x - reach)));
      const auto x1 = static_cast<std::ptrdiff_t>(std::min<double>(W - 1, std::ceil(cell.x + reach)));
      for (auto y = y0; y <= y1; ++y) {
        for (auto x = x0; x <= x1; ++x) {
          const double dy = static_cast<double>(y) + 0.5 - cell.y;
          const double dx = static_cast<double>(x) + 0.5 - cell.x;
          const double u = ca * dx + sn * dy;
          const double v = -sn * dx + ca * dy;
          plane[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)] +=
              amp * std::exp(-0.5 * (u * u / (sa * sa) + v * v / (sb * sb)));
        }
      }
    }
  }
  std::vector<float> out(img.begin(), img.end());
  return nd::Tensor::from_data({cfg.channels, H, W}, std::move(out));
}

std::pair<std::size_t, std::size_t> placement_of(const SyntheticConfig& cfg, std::size_t perturbation,
                                                 std::size_t well) {
  const std::size_t slot = perturbation + well;
  return {slot % cfg.n_batches, (slot / cfg.n_batches) % cfg.plates_per_batch};
}

GroundTruthGraph ground_truth(const SyntheticConfig& cfg) {
  GroundTruthGraph g;
  std::vector<PerturbationId> ids;
  for (std::size_t i = 0; i < cfg.n_perturbations; ++i) {
    ids.push_back(perturbation_id(cfg, i));
    g.cluster_of[ids.back().id] = cluster_of_index(cfg, i);
  }
  for (std::size_t a = 0; a < ids.size(); ++a) {
    for (std::size_t b = a + 1; b < ids.size(); ++b) {
      if (cluster_of_index(cfg, a) == cluster_of_index(cfg, b)) g.relationships.emplace_back(ids[a].id, ids[b].id);
    }
  }
  for (std::size_t a = 0; a < ids.size(); ++a) {
    if (ids[a].kind != PerturbationKind::compound) continue;
    for (std::size_t b = 0; b < ids.size(); ++b) {
      if (ids[b].kind == PerturbationKind::gene_knockout && cluster_of_index(cfg, a) == cluster_of_index(cfg, b)) {
        g.compound_targets.emplace_back(ids[a].id, ids[b].id);
      }
    }
  }
  return g;
}

SyntheticDataset generate_synthetic(const SyntheticConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  fs::create_directories(out_dir / "truth", ec);
  if (ec || !fs::is_directory(out_dir / "truth")) {
    throw IoError("cannot create dataset directory " + out_dir.string() + (ec ? ": " + ec.message() : ""));
  }

  std::vector<BatchNuisance> nuisances;
  for (std::size_t b = 0; b < cfg.n_batches; ++b) nuisances.push_back(batch_nuisance(cfg, b));

  std::vector<std::size_t> plate_fill(cfg.n_batches * cfg.plates_per_batch, 0);
  std::vector<WellRecord> records;
  SyntheticDataset result;
  for (std::size_t i = 0; i < cfg.n_perturbations; ++i) {
    const PerturbationId pid = perturbation_id(cfg, i);
    const Phenotype phenotype = phenotype_of(cfg, i);
    if (cfg.wells_per_perturbation < 2) result.ineligible_cross_well.push_back(pid.id);
    for (std::size_t j = 0; j < cfg.wells_per_perturbation; ++j) {
      const auto [batch, plate] = placement_of(cfg, i, j);
      WellRecord r;
      r.batch_id = "B" + std::to_string(batch);
      r.plate_id = "P" + std::to_string(plate);
      r.well_id = well_name(plate_fill[batch * cfg.plates_per_batch + plate]++);
      r.perturbation = pid;
      r.channels = cfg.channels;
      r.height = cfg.height;
      r.width = cfg.width;
      r.image_path = fs::path("images") / r.batch_id / r.plate_id / (r.well_id + ".ndt");

      nd::Tensor clean = render(cfg, phenotype, sample_layout(cfg, i, j, phenotype));
      auto pixels = clean.data_mut();
      const auto& nuis = nuisances[batch];
      Rng noise(cfg.seed, "pixel_noise", {i, j});
      const std::size_t plane = cfg.height * cfg.width;
      for (std::size_t k = 0; k < pixels.size(); ++k) {
        const std::size_t c = k / plane;
        double v = nuis.gain[c] * pixels[k] + nuis.offset[c];
        if (cfg.pixel_noise_std > 0) v += cfg.pixel_noise_std * noise.normal();
        pixels[k] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
      fs::create_directories(out_dir / r.image_path.parent_path(), ec);
      nd::save_ndt(out_dir / r.image_path, clean);
      records.push_back(std::move(r));
    }
  }
  write_manifest(out_dir / "manifest.csv", records);
  result.truth = ground_truth(cfg);
  write_pairs_csv(out_dir / "truth" / "relationships.csv", "perturbation_a,perturbation_b", result.truth.relationships);
  write_pairs_csv(out_dir / "truth" / "compound_targets.csv", "compound_id,gene_id", result.truth.compound_targets);
  result.manifest = DatasetManifest(std::move(records), out_dir);
  return result;
}

}  // namespace cwamsn::hcs
