// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "../support/temp_dir.hpp"
#include "cwamsn/error.hpp"
#include "cwamsn/synthetic.hpp"
#include "cwamsn/trainloop.hpp"

using namespace cwamsn;
using namespace cwamsn::train;
using cwamsn::testing::TempDir;

namespace {

hcs::SyntheticConfig small_data() {
  hcs::SyntheticConfig c;
  c.n_perturbations = 6;
  c.n_clusters = 2;
  c.wells_per_perturbation = 3;
  c.n_batches = 3;
  c.plates_per_batch = 1;
  c.channels = 2;
  c.height = 16;
  c.width = 16;
  c.compounds_per_cluster = 1;
  c.seed = 3;
  return c;
}

TrainConfig small_train() {
  TrainConfig c;
  c.encoder = vit::EncoderConfig::tiny();
  c.augment.view_height = 16;
  c.augment.view_width = 16;
  c.augment.n_anchor_views = 2;
  c.n_prototypes = 8;
  c.epochs = 2;
  c.warmup_epochs = 1;
  c.batch_size = 4;
  c.seed = 11;
  return c;
}

std::vector<float> flat(const vit::EncoderWeights<float>& w) {
  std::vector<float> out;
  w.for_each_parameter([&](const std::string&, const nd::Tensor& t) {
    out.insert(out.end(), t.data().begin(), t.data().end());
  });
  return out;
}

std::size_t count_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

}  // namespace

TEST_CASE("schedules hit their endpoints exactly") {
  TrainConfig cfg;  // 100 epochs, 15 warmup
  const auto s = Schedule::make(cfg, 10);
  CHECK(s.total_steps == 1000);
  CHECK(s.warmup_steps == 150);
  CHECK(lr_at(0, s) == 0.0);
  CHECK(lr_at(75, s) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(lr_at(150, s) == 2e-4);
  CHECK(lr_at(s.final_step(), s) == 1e-6);
  CHECK(wd_at(0, s) == 0.04);
  CHECK(wd_at(s.final_step(), s) == 0.4);
  CHECK(momentum_at(0, s) == 0.996);
  CHECK(momentum_at(s.final_step(), s) == 1.0);

  cfg.epochs = 101;
  const auto odd = Schedule::make(cfg, 1);  // final step 100, midpoint 50
  CHECK(wd_at(50, odd) == doctest::Approx(0.22).epsilon(1e-12));
  CHECK(momentum_at(50, odd) == doctest::Approx(0.998).epsilon(1e-12));
}

TEST_CASE("lr decays monotonically after warmup and wd and momentum increase") {
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.warmup_epochs = 3;
  const auto s = Schedule::make(cfg, 7);
  for (std::size_t t = 1; t <= s.final_step(); ++t) {
    if (t <= s.warmup_steps) {
      CHECK(lr_at(t, s) > lr_at(t - 1, s));
    } else {
      CHECK(lr_at(t, s) <= lr_at(t - 1, s));
    }
    CHECK(wd_at(t, s) >= wd_at(t - 1, s));
    CHECK(momentum_at(t, s) >= momentum_at(t - 1, s));
  }
}

TEST_CASE("config validation and key-value round trip") {
  auto cfg = small_train();
  cfg.mode = sampler::PairMode::single_well;
  cfg.loss.lambda2 = 0.5;
  cfg.base_lr = 3.7e-4;
  cfg.checkpoint_every = 5;
  KeyValueConfig kv;
  cfg.write_to(kv);
  const auto back = TrainConfig::read_from(kv);
  KeyValueConfig kv2;
  back.write_to(kv2);
  CHECK(kv.dump() == kv2.dump());
  CHECK(back.base_lr == 3.7e-4);
  CHECK(back.mode == sampler::PairMode::single_well);

  auto bad = small_train();
  bad.warmup_epochs = bad.epochs;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = small_train();
  bad.augment.view_height = 32;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = small_train();
  bad.tau_target = 0.2;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = small_train();
  bad.n_prototypes = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("fresh state has target equal to anchor") {
  const auto st = init_state(small_train());
  CHECK(flat(st.anchor) == flat(st.target));
  CHECK(st.bank.prototypes.shape() == nd::Shape{8, 16});
}

TEST_CASE("training writes one metrics row per step and finite losses") {
  TempDir dir("trainloop");
  const auto ds = hcs::generate_synthetic(small_data(), dir / "data");
  auto cfg = small_train();
  TrainOutputs out;
  out.metrics_csv = dir / "metrics.csv";
  out.checkpoint = dir / "model.ckpt";
  const auto st = train::train(ds.manifest, cfg, out);
  const std::size_t steps_per_epoch = 2;  // ceil(6 / 4)
  CHECK(st.step == cfg.epochs * steps_per_epoch);
  CHECK(st.history.size() == st.step);
  CHECK(count_lines(out.metrics_csv) == st.step + 1);
  for (const auto& r : st.history) {
    CHECK(std::isfinite(r.loss));
    CHECK(r.entropy >= 0.0);
    CHECK(r.entropy <= std::log(8.0) + 1e-6);
  }
  CHECK(st.history.back().lr == cfg.final_lr);
  CHECK(st.history.back().momentum == 1.0);
  CHECK(std::filesystem::exists(out.checkpoint));
}

TEST_CASE("training is bit-reproducible for a fixed seed") {
  TempDir dir("trainloop");
  const auto ds = hcs::generate_synthetic(small_data(), dir / "data");
  auto cfg = small_train();
  TrainOutputs a, b;
  a.checkpoint = dir / "a.ckpt";
  b.checkpoint = dir / "b.ckpt";
  a.metrics_csv = dir / "a.csv";
  b.metrics_csv = dir / "b.csv";
  train::train(ds.manifest, cfg, a);
  train::train(ds.manifest, cfg, b);
  CHECK(testing::read_file(a.checkpoint) == testing::read_file(b.checkpoint));
  CHECK(testing::read_file(a.metrics_csv) == testing::read_file(b.metrics_csv));

  cfg.seed = 12;
  TrainOutputs c;
  c.checkpoint = dir / "c.ckpt";
  train::train(ds.manifest, cfg, c);
  CHECK(testing::read_file(a.checkpoint) != testing::read_file(c.checkpoint));
}

TEST_CASE("with both loss weights at zero only weight decay moves the parameters") {
  TempDir dir("trainloop");
  const auto ds = hcs::generate_synthetic(small_data(), dir / "data");
  auto cfg = small_train();
  cfg.loss.lambda1 = 0.0;
  cfg.loss.lambda2 = 0.0;
  cfg.epochs = 1;
  cfg.warmup_epochs = 0;
  cfg.batch_size = 6;  // a single step
  const auto before = init_state(cfg);
  const auto after = train::train(ds.manifest, cfg);
  REQUIRE(after.step == 1);
  const double shrink = 1.0 - after.history[0].lr * after.history[0].wd;

  std::vector<std::pair<std::string, std::vector<float>>> initial;
  before.anchor.for_each_parameter([&](const std::string& name, const nd::Tensor& t) {
    initial.emplace_back(name, std::vector<float>(t.data().begin(), t.data().end()));
  });
  std::size_t i = 0;
  after.anchor.for_each_parameter([&](const std::string& name, const nd::Tensor& t) {
    const auto& [n0, v0] = initial[i++];
    REQUIRE(n0 == name);
    const double factor = vit::takes_weight_decay(name) ? shrink : 1.0;
    for (std::size_t k = 0; k < v0.size(); ++k) {
      CHECK(t.data()[k] == doctest::Approx(v0[k] * factor).epsilon(1e-6));
    }
  });
  CHECK(std::vector<float>(after.bank.prototypes.data().begin(), after.bank.prototypes.data().end()) ==
        std::vector<float>(before.bank.prototypes.data().begin(), before.bank.prototypes.data().end()));
}

TEST_CASE("a diverging run reports the step and the batch") {
  TempDir dir("trainloop");
  const auto ds = hcs::generate_synthetic(small_data(), dir / "data");
  auto cfg = small_train();
  cfg.base_lr = 1e30;
  cfg.final_lr = 1e30;
  cfg.warmup_epochs = 0;
  cfg.epochs = 3;
  std::string message;
  try {
    train::train(ds.manifest, cfg);
  } catch (const NumericError& e) {
    message = e.what();
  }
  REQUIRE_FALSE(message.empty());
  CHECK(message.find("step") != std::string::npos);
  CHECK(message.find("batch") != std::string::npos);
  CHECK(message.find("gene_") != std::string::npos);
}

TEST_CASE("checkpoint and embeddings round trip") {
  TempDir dir("trainloop");
  const auto ds = hcs::generate_synthetic(small_data(), dir / "data");
  auto cfg = small_train();
  cfg.epochs = 1;
  cfg.warmup_epochs = 0;
  TrainOutputs out;
  out.checkpoint = dir / "model.ckpt";
  const auto st = train::train(ds.manifest, cfg, out);
  const auto loaded = load_training_checkpoint(out.checkpoint);
  CHECK(flat(loaded.anchor) == flat(st.anchor));
  CHECK(flat(loaded.target) == flat(st.target));
  CHECK(loaded.config.seed == cfg.seed);
  CHECK(loaded.bank.tau_target == cfg.tau_target);

  const auto rows = extract_embeddings(ds.manifest, loaded.anchor, loaded.config.encoder);
  CHECK(rows.size() == ds.manifest.records().size());
  CHECK(rows.front().feature.size() == cfg.encoder.embed_dim);
  write_embeddings_csv(dir / "emb.csv", rows);
  const auto back = read_embeddings_csv(dir / "emb.csv");
  REQUIRE(back.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(back[i].perturbation_id == rows[i].perturbation_id);
    CHECK(back[i].well.str() == rows[i].well.str());
    CHECK(back[i].feature == rows[i].feature);
  }

  auto wrong = cfg.encoder;
  wrong.in_channels = 3;
  CHECK_THROWS_AS(extract_embeddings(ds.manifest, loaded.anchor, wrong), ShapeError);
}

TEST_CASE("malformed embeddings files name the offending line") {
  TempDir dir("trainloop");
  {
    std::ofstream f(dir / "bad.csv");
    f << "batch_id,plate_id,well_id,perturbation_id,f0,f1\nB0,P0,A01,G1,0.5,0.25\nB0,P0,A02,G1,0.5\n";
  }
  try {
    read_embeddings_csv(dir / "bad.csv");
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
  {
    std::ofstream f(dir / "hdr.csv");
    f << "well,f0\n";
  }
  CHECK_THROWS_AS(read_embeddings_csv(dir / "hdr.csv"), IoError);
  CHECK_THROWS_AS(read_embeddings_csv(dir / "missing.csv"), IoError);
}

TEST_CASE("single-well mode needs no second well") {
  TempDir dir("trainloop");
  auto dcfg = small_data();
  dcfg.wells_per_perturbation = 1;
  dcfg.n_batches = 1;
  const auto ds = hcs::generate_synthetic(dcfg, dir / "data");
  auto cfg = small_train();
  cfg.epochs = 1;
  cfg.warmup_epochs = 0;
  CHECK_THROWS_AS(train::train(ds.manifest, cfg), UsageError);
  cfg.mode = sampler::PairMode::single_well;
  CHECK(train::train(ds.manifest, cfg).step == 2);
}
