// SPDX-License-Identifier: Apache-2.0
//
// Training driver: schedules, optimizer and EMA steps, metrics, checkpoints,
// and the embedding-extraction pass.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "cwamsn/adamw.hpp"
#include "cwamsn/hcsdata.hpp"
#include "cwamsn/kvconfig.hpp"
#include "cwamsn/msnloss.hpp"
#include "cwamsn/vitencoder.hpp"
#include "cwamsn/wellsampler.hpp"

namespace cwamsn::train {

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  double base_lr = 2e-4;
  std::size_t warmup_epochs = 15;
  double final_lr = 1e-6;
  double wd_start = 0.04;
  double wd_end = 0.4;
  msn::EmaSchedule ema;
  std::size_t n_prototypes = 1024;
  double tau_anchor = 0.1;
  double tau_target = 0.025;
  msn::LossConfig loss;
  sampler::PairMode mode = sampler::PairMode::cross_well;
  std::uint64_t seed = 0;
  vit::EncoderConfig encoder;
  sampler::AugmentConfig augment;
  /// Also write a checkpoint every this many epochs (0: only at the end).
  std::size_t checkpoint_every = 0;

  void validate() const;
  /// Keys: train.*, loss.*, ema.*, augment.*, encoder.* and seed.
  void write_to(KeyValueConfig& kv) const;
  static TrainConfig read_from(const KeyValueConfig& kv);
};

/// Step-indexed schedule constants for one run.
struct Schedule {
  std::size_t steps_per_epoch = 1;
  std::size_t total_steps = 1;
  std::size_t warmup_steps = 0;
  double base_lr = 2e-4, final_lr = 1e-6;
  double wd_start = 0.04, wd_end = 0.4;
  double momentum_start = 0.996, momentum_end = 1.0;

  static Schedule make(const TrainConfig& cfg, std::size_t steps_per_epoch);
  std::size_t final_step() const { return total_steps - 1; }
};

/// Linear 0 -> base over the warmup, then half-cosine base -> final, reaching
/// final exactly at the last step.
double lr_at(std::size_t step, const Schedule& s);
/// Increasing half-cosine wd_start -> wd_end over all steps.
double wd_at(std::size_t step, const Schedule& s);
/// Linear momentum_start -> momentum_end over all steps.
double momentum_at(std::size_t step, const Schedule& s);

struct MetricsRow {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0, ce = 0, entropy = 0, lr = 0, wd = 0, momentum = 0;
};

struct TrainState {
  vit::EncoderWeights<float> anchor;
  vit::EncoderWeights<float> target;
  msn::PrototypeBank bank;
  nd::AdamWState optimizer;
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::vector<MetricsRow> history;
};

/// Fresh state: target is an exact copy of the anchor.
TrainState init_state(const TrainConfig& cfg);

struct TrainOutputs {
  std::filesystem::path checkpoint;  // written at the end; empty to skip
  std::filesystem::path metrics_csv;  // step,epoch,loss,ce,entropy,lr,wd,momentum
  /// Called after every step (progress reporting).
  std::function<void(const MetricsRow&, const sampler::ViewBatch&)> on_step;
};

/// Runs cfg.epochs epochs over the perturbations eligible for cfg.mode.
/// Throws UsageError when none are eligible and NumericError (naming the
/// batch's perturbations and wells) when the loss becomes non-finite.
TrainState train(const hcs::DatasetManifest& manifest, const TrainConfig& cfg, const TrainOutputs& outputs = {});

/// Anchor tokens [B * V, n_keep, token_dim] with their keep indices, and
/// unmasked target tokens [B, n_patches, token_dim].
struct BatchTokens {
  nd::Tensor anchor;
  std::vector<std::size_t> anchor_keep;
  nd::Tensor target;
  std::vector<std::size_t> target_keep;
};
BatchTokens tokenize(const sampler::ViewBatch& batch, std::size_t patch_size);

/// Forward pass of one mini-batch; the target branch runs without recording.
msn::LossTerms<float> batch_loss(const BatchTokens& tokens, std::size_t rows, const TrainState& state,
                                 const TrainConfig& cfg);

// ---------------------------------------------------------------- checkpoints

vit::Checkpoint make_checkpoint(const TrainState& state, const TrainConfig& cfg);
void save_training_checkpoint(const std::filesystem::path& path, const TrainState& state, const TrainConfig& cfg);

struct LoadedModel {
  TrainConfig config;
  vit::EncoderWeights<float> anchor;
  vit::EncoderWeights<float> target;
  msn::PrototypeBank bank;
};
LoadedModel load_training_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------- embeddings

struct EmbeddingRow {
  hcs::WellKey well;
  std::string perturbation_id;
  std::vector<float> feature;
};

/// One backbone feature per record, in manifest order. Throws ShapeError when
/// the images do not match the encoder's channel count.
std::vector<EmbeddingRow> extract_embeddings(const hcs::DatasetManifest& manifest,
                                             const vit::EncoderWeights<float>& weights,
                                             const vit::EncoderConfig& cfg);

/// Header batch_id,plate_id,well_id,perturbation_id,f0..f{d-1}.
void write_embeddings_csv(const std::filesystem::path& path, const std::vector<EmbeddingRow>& rows);
std::vector<EmbeddingRow> read_embeddings_csv(const std::filesystem::path& path);

}  // namespace cwamsn::train
