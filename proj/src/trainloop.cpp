// SPDX-License-Identifier: Apache-2.0
#include "cwamsn/trainloop.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numbers>
#include <sstream>

#include "cwamsn/error.hpp"
#include "cwamsn/ops.hpp"

namespace cwamsn::train {
namespace {

/// a at w == 0 and b at w == 1, exactly.
double blend(double a, double b, double w) { return a * (1.0 - w) + b * w; }

std::string batch_description(const sampler::ViewBatch& batch) {
  std::string out;
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    if (!out.empty()) out += "; ";
    out += batch.perturbation_ids[r] + " (anchor " + batch.anchor_wells[r].str() + ", target " +
           batch.target_wells[r].str() + ")";
  }
  return out;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("train.epochs must be >= 1");
  if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
  if (warmup_epochs >= epochs) {
    throw ConfigError("train.warmup_epochs (" + std::to_string(warmup_epochs) + ") must be < train.epochs (" +
                      std::to_string(epochs) + ")");
  }
  if (!(base_lr > 0.0) || !(final_lr >= 0.0) || final_lr > base_lr) {
    throw ConfigError("learning rates must satisfy 0 <= train.final_lr <= train.base_lr and base_lr > 0");
  }
  if (!(wd_start >= 0.0) || !(wd_end >= 0.0)) throw ConfigError("weight decay must be >= 0");
  ema.validate();
  loss.validate();
  encoder.validate();
  augment.validate();
  if (augment.view_height != encoder.image_size || augment.view_width != encoder.image_size) {
    throw ConfigError("augment view size " + std::to_string(augment.view_height) + "x" +
                      std::to_string(augment.view_width) + " must equal encoder.image_size " +
                      std::to_string(encoder.image_size));
  }
  if (n_prototypes < 2) throw ConfigError("train.prototypes must be >= 2, got " + std::to_string(n_prototypes));
  if (!(tau_target > 0.0) || !(tau_target <= tau_anchor)) {
    throw ConfigError("temperatures must satisfy 0 < train.tau_target <= train.tau_anchor");
  }
}

void TrainConfig::write_to(KeyValueConfig& kv) const {
  kv.set("seed", std::to_string(seed));
  kv.set("train.epochs", std::to_string(epochs));
  kv.set("train.batch_size", std::to_string(batch_size));
  kv.set("train.base_lr", format_double(base_lr));
  kv.set("train.warmup_epochs", std::to_string(warmup_epochs));
  kv.set("train.final_lr", format_double(final_lr));
  kv.set("train.wd_start", format_double(wd_start));
  kv.set("train.wd_end", format_double(wd_end));
  kv.set("train.mode", std::string(sampler::to_string(mode)));
  kv.set("train.prototypes", std::to_string(n_prototypes));
  kv.set("train.tau_anchor", format_double(tau_anchor));
  kv.set("train.tau_target", format_double(tau_target));
  kv.set("train.checkpoint_every", std::to_string(checkpoint_every));
  kv.set("ema.start", format_double(ema.start));
  kv.set("ema.end", format_double(ema.end));
  kv.set("loss.lambda1", format_double(loss.lambda1));
  kv.set("loss.lambda2", format_double(loss.lambda2));
  kv.set("augment.global_scale_min", format_double(augment.global_scale_min));
  kv.set("augment.global_scale_max", format_double(augment.global_scale_max));
  kv.set("augment.focal_scale_min", format_double(augment.focal_scale_min));
  kv.set("augment.focal_scale_max", format_double(augment.focal_scale_max));
  kv.set("augment.hflip_prob", format_double(augment.hflip_prob));
  kv.set("augment.vflip_prob", format_double(augment.vflip_prob));
  kv.set("augment.mask_ratio", format_double(augment.mask_ratio));
  kv.set("augment.anchor_views", std::to_string(augment.n_anchor_views));
  encoder.write_to(kv);
}

TrainConfig TrainConfig::read_from(const KeyValueConfig& kv) {
  TrainConfig c;
  c.seed = kv.get_u64("seed", c.seed);
  c.epochs = kv.get_size("train.epochs", c.epochs);
  c.batch_size = kv.get_size("train.batch_size", c.batch_size);
  c.base_lr = kv.get_double("train.base_lr", c.base_lr);
  c.warmup_epochs = kv.get_size("train.warmup_epochs", c.warmup_epochs);
  c.final_lr = kv.get_double("train.final_lr", c.final_lr);
  c.wd_start = kv.get_double("train.wd_start", c.wd_start);
  c.wd_end = kv.get_double("train.wd_end", c.wd_end);
  c.mode = sampler::parse_pair_mode(kv.get_string("train.mode", std::string(sampler::to_string(c.mode))));
  c.n_prototypes = kv.get_size("train.prototypes", c.n_prototypes);
  c.tau_anchor = kv.get_double("train.tau_anchor", c.tau_anchor);
  c.tau_target = kv.get_double("train.tau_target", c.tau_target);
  c.checkpoint_every = kv.get_size("train.checkpoint_every", c.checkpoint_every);
  c.ema.start = kv.get_double("ema.start", c.ema.start);
  c.ema.end = kv.get_double("ema.end", c.ema.end);
  c.loss.lambda1 = kv.get_double("loss.lambda1", c.loss.lambda1);
  c.loss.lambda2 = kv.get_double("loss.lambda2", c.loss.lambda2);
  auto& a = c.augment;
  a.global_scale_min = kv.get_double("augment.global_scale_min", a.global_scale_min);
  a.global_scale_max = kv.get_double("augment.global_scale_max", a.global_scale_max);
  a.focal_scale_min = kv.get_double("augment.focal_scale_min", a.focal_scale_min);
  a.focal_scale_max = kv.get_double("augment.focal_scale_max", a.focal_scale_max);
  a.hflip_prob = kv.get_double("augment.hflip_prob", a.hflip_prob);
  a.vflip_prob = kv.get_double("augment.vflip_prob", a.vflip_prob);
  a.mask_ratio = kv.get_double("augment.mask_ratio", a.mask_ratio);
  a.n_anchor_views = kv.get_size("augment.anchor_views", a.n_anchor_views);
  c.encoder = vit::EncoderConfig::read_from(kv);
  a.view_height = a.view_width = c.encoder.image_size;
  c.validate();
  return c;
}

// ---------------------------------------------------------------- schedules

Schedule Schedule::make(const TrainConfig& cfg, std::size_t steps_per_epoch) {
  if (steps_per_epoch == 0) throw UsageError("schedule needs at least one step per epoch");
  Schedule s;
  s.steps_per_epoch = steps_per_epoch;
  s.total_steps = cfg.epochs * steps_per_epoch;
  s.warmup_steps = cfg.warmup_epochs * steps_per_epoch;
  s.base_lr = cfg.base_lr;
  s.final_lr = cfg.final_lr;
  s.wd_start = cfg.wd_start;
  s.wd_end = cfg.wd_end;
  s.momentum_start = cfg.ema.start;
  s.momentum_end = cfg.ema.end;
  return s;
}

double lr_at(std::size_t step, const Schedule& s) {
  if (step < s.warmup_steps) return s.base_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  const std::size_t span = s.final_step() > s.warmup_steps ? s.final_step() - s.warmup_steps : 0;
  const double progress =
      span == 0 ? 1.0 : std::min(1.0, static_cast<double>(step - s.warmup_steps) / static_cast<double>(span));
  const double w = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return blend(s.final_lr, s.base_lr, w);
}

double wd_at(std::size_t step, const Schedule& s) {
  const double t =
      s.final_step() == 0 ? 1.0 : std::min(1.0, static_cast<double>(step) / static_cast<double>(s.final_step()));
  return blend(s.wd_start, s.wd_end, 0.5 * (1.0 - std::cos(std::numbers::pi * t)));
}

double momentum_at(std::size_t step, const Schedule& s) {
  const double t =
      s.final_step() == 0 ? 1.0 : std::min(1.0, static_cast<double>(step) / static_cast<double>(s.final_step()));
  return blend(s.momentum_start, s.momentum_end, t);
}

// ---------------------------------------------------------------- training

TrainState init_state(const TrainConfig& cfg) {
  cfg.validate();
  TrainState st;
  st.anchor = vit::init_encoder(cfg.encoder, cfg.seed);
  st.target = st.anchor.clone();
  st.bank = msn::PrototypeBank::init(cfg.n_prototypes, cfg.encoder.projection_dim, cfg.seed);
  st.bank.tau_anchor = cfg.tau_anchor;
  st.bank.tau_target = cfg.tau_target;
  return st;
}

BatchTokens tokenize(const sampler::ViewBatch& batch, std::size_t patch_size) {
  const auto& as = batch.anchors.shape();  // B x V x C x h x w
  const std::size_t B = as[0], V = as[1], C = as[2], h = as[3], w = as[4];
  const std::size_t grid_h = h / patch_size, grid_w = w / patch_size, n = grid_h * grid_w;
  const std::size_t td = C * patch_size * patch_size, view_size = C * h * w;
  const std::size_t n_keep = batch.anchor_keep.at(0).at(0).size();

  auto gather = [&](const float* view, std::span<const std::size_t> keep, float* out) {
    for (std::size_t t = 0; t < keep.size(); ++t) {
      const std::size_t py = keep[t] / grid_w, px = keep[t] % grid_w;
      float* dst = out + t * td;
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t dy = 0; dy < patch_size; ++dy) {
          const float* src = view + (c * h + py * patch_size + dy) * w + px * patch_size;
          std::copy(src, src + patch_size, dst);
          dst += patch_size;
        }
      }
    }
  };

  BatchTokens out;
  std::vector<float> anchor(B * V * n_keep * td);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t v = 0; v < V; ++v) {
      const auto& keep = batch.anchor_keep[b][v];
      if (keep.size() != n_keep) throw ShapeError("tokenize: views keep different patch counts");
      gather(batch.anchors.data().data() + (b * V + v) * view_size, keep,
             anchor.data() + (b * V + v) * n_keep * td);
      out.anchor_keep.insert(out.anchor_keep.end(), keep.begin(), keep.end());
    }
  }
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  std::vector<float> target(B * n * td);
  for (std::size_t b = 0; b < B; ++b) {
    gather(batch.targets.data().data() + b * view_size, all, target.data() + b * n * td);
    out.target_keep.insert(out.target_keep.end(), all.begin(), all.end());
  }
  out.anchor = nd::Tensor::from_data({B * V, n_keep, td}, std::move(anchor));
  out.target = nd::Tensor::from_data({B, n, td}, std::move(target));
  return out;
}

msn::LossTerms<float> batch_loss(const BatchTokens& tokens, std::size_t rows, const TrainState& state,
                                 const TrainConfig& cfg) {
  const std::size_t views = tokens.anchor.size(0) / rows, D = cfg.encoder.projection_dim;
  nd::Tensor s_plus;
  {
    nd::NoGradGuard no_grad;
    auto zt = vit::project(vit::encode(tokens.target, tokens.target_keep, state.target, cfg.encoder), state.target);
    s_plus = msn::assignment_scores(state.bank.prototypes, zt, state.bank.tau_target);
  }
  auto z = vit::project(vit::encode(tokens.anchor, tokens.anchor_keep, state.anchor, cfg.encoder), state.anchor);
  auto s = msn::assignment_scores(state.bank.prototypes, nd::reshape(z, {rows, views, D}), state.bank.tau_anchor);
  return msn::msn_loss(s_plus, s, cfg.loss);
}

TrainState train(const hcs::DatasetManifest& manifest, const TrainConfig& cfg, const TrainOutputs& outputs) {
  cfg.validate();
  nd::keep_heap_warm();
  const auto eligibility = sampler::eligible_perturbations(manifest, cfg.mode);
  if (eligibility.eligible.empty()) {
    throw UsageError("no perturbation can be paired in " + std::string(sampler::to_string(cfg.mode)) + " mode");
  }
  for (const auto& r : manifest.records()) {
    if (r.channels != cfg.encoder.in_channels) {
      throw ConfigError("well " + r.key().str() + " has " + std::to_string(r.channels) +
                        " channels but encoder.in_channels is " + std::to_string(cfg.encoder.in_channels));
    }
  }
  const std::size_t steps_per_epoch = (eligibility.eligible.size() + cfg.batch_size - 1) / cfg.batch_size;
  const auto schedule = Schedule::make(cfg, steps_per_epoch);

  TrainState st = init_state(cfg);
  std::vector<nd::Tensor> params;
  std::vector<std::string> names;
  st.anchor.for_each_parameter([&](const std::string& name, nd::Tensor& t) {
    t.set_requires_grad(true);
    params.push_back(t);
    names.push_back(name);
  });
  st.bank.prototypes.set_requires_grad(true);
  params.push_back(st.bank.prototypes);
  names.emplace_back("prototypes");
  // prototypes are exempt from decay along with norms, biases and the class token
  auto decay = std::make_unique<bool[]>(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) decay[i] = names[i] != "prototypes" && vit::takes_weight_decay(names[i]);
  const std::span<const bool> mask(decay.get(), params.size());

  std::ofstream metrics;
  if (!outputs.metrics_csv.empty()) {
    metrics.open(outputs.metrics_csv);
    if (!metrics) throw IoError("cannot write metrics file: " + outputs.metrics_csv.string());
    metrics << "step,epoch,loss,ce,entropy,lr,wd,momentum\n";
  }

  sampler::WellImageCache images(manifest);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    st.epoch = epoch;
    const auto plan = sampler::plan_epoch(eligibility.eligible, cfg.batch_size, cfg.seed, epoch);
    for (std::size_t bi = 0; bi < plan.size(); ++bi) {
      auto rng = sampler::batch_rng(cfg.seed, epoch, bi);
      const auto batch = sampler::collate_minibatch(plan[bi], manifest, images, cfg.augment, cfg.encoder.patch_size,
                                                    rng, cfg.mode);
      const auto tokens = tokenize(batch, cfg.encoder.patch_size);

      msn::LossTerms<float> terms;
      try {
        terms = batch_loss(tokens, batch.rows(), st, cfg);
      } catch (const NumericError& e) {
        throw NumericError("non-finite value at step " + std::to_string(st.step) + " (epoch " +
                           std::to_string(epoch) + ", batch " + std::to_string(bi) + "): " + e.what() +
                           "; batch: " + batch_description(batch));
      }
      nd::backward(terms.loss);

      MetricsRow row{st.step, epoch, static_cast<double>(terms.loss.item()), terms.cross_entropy, terms.entropy,
                     lr_at(st.step, schedule), wd_at(st.step, schedule), momentum_at(st.step, schedule)};
      nd::adamw_step(params, st.optimizer, row.lr, row.wd, mask);
      for (auto& p : params) p.clear_grad();
      msn::ema_update(st.target, st.anchor, row.momentum);

      if (metrics.is_open()) {
        metrics << row.step << ',' << row.epoch << ',' << format_double(row.loss) << ',' << format_double(row.ce) << ','
                << format_double(row.entropy) << ',' << format_double(row.lr) << ',' << format_double(row.wd) << ',' << format_double(row.momentum) << '\n';
      }
      st.history.push_back(row);
      if (outputs.on_step) outputs.on_step(row, batch);
      ++st.step;
    }
    if (cfg.checkpoint_every != 0 && !outputs.checkpoint.empty() && (epoch + 1) % cfg.checkpoint_every == 0 &&
        epoch + 1 != cfg.epochs) {
      auto path = outputs.checkpoint;
      path.replace_extension(".epoch" + std::to_string(epoch + 1) + outputs.checkpoint.extension().string());
      save_training_checkpoint(path, st, cfg);
    }
  }
  st.epoch = cfg.epochs;
  if (!outputs.checkpoint.empty()) save_training_checkpoint(outputs.checkpoint, st, cfg);
  return st;
}

// ---------------------------------------------------------------- checkpoints

vit::Checkpoint make_checkpoint(const TrainState& state, const TrainConfig& cfg) {
  vit::Checkpoint ckpt;
  cfg.write_to(ckpt.config);
  ckpt.config.set("state.step", std::to_string(state.step));
  ckpt.config.set("state.epoch", std::to_string(state.epoch));
  vit::add_weights(ckpt, "anchor.", state.anchor);
  vit::add_weights(ckpt, "target.", state.target);
  ckpt.tensors.emplace_back("prototypes", state.bank.prototypes.detach());
  return ckpt;
}

void save_training_checkpoint(const std::filesystem::path& path, const TrainState& state, const TrainConfig& cfg) {
  vit::save_checkpoint(path, make_checkpoint(state, cfg));
}

LoadedModel load_training_checkpoint(const std::filesystem::path& path) {
  const auto ckpt = vit::load_checkpoint(path);
  LoadedModel m;
  m.config = TrainConfig::read_from(ckpt.config);
  m.anchor = vit::read_weights(ckpt, "anchor.", m.config.encoder);
  m.target = vit::read_weights(ckpt, "target.", m.config.encoder);
  m.bank.prototypes = ckpt.tensor("prototypes").detach();
  m.bank.tau_anchor = m.config.tau_anchor;
  m.bank.tau_target = m.config.tau_target;
  if (m.bank.prototypes.shape() != nd::Shape{m.config.n_prototypes, m.config.encoder.projection_dim}) {
    throw ShapeError("checkpoint prototypes have shape " + nd::to_string(m.bank.prototypes.shape()));
  }
  return m;
}

// ---------------------------------------------------------------- embeddings

std::vector<EmbeddingRow> extract_embeddings(const hcs::DatasetManifest& manifest,
                                             const vit::EncoderWeights<float>& weights,
                                             const vit::EncoderConfig& cfg) {
  std::vector<EmbeddingRow> rows;
  const auto& records = manifest.records();
  constexpr std::size_t chunk = 32;
  for (std::size_t start = 0; start < records.size(); start += chunk) {
    std::vector<nd::Tensor> images;
    for (std::size_t i = start; i < std::min(records.size(), start + chunk); ++i) {
      const auto& r = records[i];
      if (r.channels != cfg.in_channels) {
        throw ShapeError("well " + r.key().str() + " has " + std::to_string(r.channels) +
                         " channels but the encoder expects " + std::to_string(cfg.in_channels));
      }
      images.push_back(hcs::load_well_image(r, manifest.root()));
    }
    auto feats = vit::embed_for_eval(images, weights, cfg);
    for (std::size_t k = 0; k < feats.size(); ++k) {
      const auto& r = records[start + k];
      rows.push_back({r.key(), r.perturbation.id, std::move(feats[k])});
    }
  }
  return rows;
}

void write_embeddings_csv(const std::filesystem::path& path, const std::vector<EmbeddingRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write embeddings file: " + path.string());
  const std::size_t d = rows.empty() ? 0 : rows.front().feature.size();
  out << "batch_id,plate_id,well_id,perturbation_id";
  for (std::size_t j = 0; j < d; ++j) out << ",f" << j;
  out << '\n';
  char buf[32];
  for (const auto& r : rows) {
    if (r.feature.size() != d) throw ShapeError("embedding rows have different widths");
    out << r.well.batch_id << ',' << r.well.plate_id << ',' << r.well.well_id << ',' << r.perturbation_id;
    for (float v : r.feature) {
      auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
      out << ',' << std::string_view(buf, static_cast<std::size_t>(end - buf));
    }
    out << '\n';
  }
  if (!out) throw IoError("failed writing embeddings file: " + path.string());
}

std::vector<EmbeddingRow> read_embeddings_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open embeddings file: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw IoError(path.string() + ": empty embeddings file");
  const auto header = split_csv(line);
  if (header.size() < 4 || header[0] != "batch_id" || header[1] != "plate_id" || header[2] != "well_id" ||
      header[3] != "perturbation_id") {
    throw IoError(path.string() + " line 1: expected header batch_id,plate_id,well_id,perturbation_id,f0,...");
  }
  const std::size_t d = header.size() - 4;
  std::vector<EmbeddingRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != header.size()) {
      throw IoError(path.string() + " line " + std::to_string(line_no) + ": expected " +
                    std::to_string(header.size()) + " fields, got " + std::to_string(cells.size()));
    }
    EmbeddingRow r{{cells[0], cells[1], cells[2]}, cells[3], std::vector<float>(d)};
    for (std::size_t j = 0; j < d; ++j) {
      const auto& c = cells[4 + j];
      auto [ptr, ec] = std::from_chars(c.data(), c.data() + c.size(), r.feature[j]);
      if (ec != std::errc() || ptr != c.data() + c.size() || !std::isfinite(r.feature[j])) {
        throw IoError(path.string() + " line " + std::to_string(line_no) + ": bad feature value '" + c + "'");
      }
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace cwamsn::train
