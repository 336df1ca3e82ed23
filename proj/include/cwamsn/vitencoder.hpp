// SPDX-License-Identifier: Apache-2.0
//
// Pre-norm vision transformer over (possibly masked) patch tokens, with a
// class token and a learned positional table indexed by original patch
// position, followed by a 3-layer MLP projection head.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cwamsn/kvconfig.hpp"
#include "cwamsn/tensor.hpp"

namespace cwamsn::vit {

struct EncoderConfig {
  std::size_t in_channels = 5;
  std::size_t image_size = 64;  // square views; grid = image_size / patch_size
  std::size_t patch_size = 8;
  std::size_t embed_dim = 192;
  std::size_t depth = 6;
  std::size_t n_heads = 6;
  std::size_t mlp_ratio = 4;
  std::size_t projection_dim = 256;

  static EncoderConfig desk();
  static EncoderConfig vit_s16();
  static EncoderConfig tiny();
  /// "desk", "vit-s16" or "tiny".
  static EncoderConfig preset(const std::string& name);

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t n_patches() const { return grid() * grid(); }
  std::size_t token_dim() const { return in_channels * patch_size * patch_size; }

  void validate() const;
  void write_to(KeyValueConfig& kv, const std::string& prefix = "encoder.") const;
  static EncoderConfig read_from(const KeyValueConfig& kv, const std::string& prefix = "encoder.");
  bool operator==(const EncoderConfig&) const = default;
};

/// weight is [in, out]; y = x W + b.
template <typename T>
struct Linear {
  nd::BasicTensor<T> weight, bias;
};

template <typename T>
struct Norm {
  nd::BasicTensor<T> gamma, beta;
};

template <typename T>
struct Block {
  Norm<T> norm1;
  Linear<T> qkv, proj;
  Norm<T> norm2;
  Linear<T> fc1, fc2;
};

template <typename T>
struct EncoderWeights {
  Linear<T> patch_embed;
  nd::BasicTensor<T> pos_embed;  // n_patches x embed_dim
  nd::BasicTensor<T> cls_token;  // 1 x embed_dim
  std::vector<Block<T>> blocks;
  Norm<T> norm;
  Linear<T> head[3];

  /// Visits every parameter in a fixed order with its dotted name.
  template <typename F>
  void for_each_parameter(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each_parameter(F&& f) const {
    visit(*this, f);
  }

  std::vector<std::pair<std::string, nd::BasicTensor<T>>> named_parameters() const;
  std::size_t parameter_count() const;
  /// Deep copy with fresh storage and no gradient tracking.
  EncoderWeights clone() const;
  template <typename U>
  EncoderWeights<U> cast() const;

 private:
  template <typename Self, typename F>
  static void visit(Self& self, F& f) {
    auto lin = [&](const std::string& n, auto& l) {
      f(n + ".weight", l.weight);
      f(n + ".bias", l.bias);
    };
    auto nrm = [&](const std::string& n, auto& l) {
      f(n + ".gamma", l.gamma);
      f(n + ".beta", l.beta);
    };
    lin("patch_embed", self.patch_embed);
    f(std::string("pos_embed"), self.pos_embed);
    f(std::string("cls_token"), self.cls_token);
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      const std::string p = "blocks." + std::to_string(i) + ".";
      nrm(p + "norm1", self.blocks[i].norm1);
      lin(p + "attn.qkv", self.blocks[i].qkv);
      lin(p + "attn.proj", self.blocks[i].proj);
      nrm(p + "norm2", self.blocks[i].norm2);
      lin(p + "mlp.fc1", self.blocks[i].fc1);
      lin(p + "mlp.fc2", self.blocks[i].fc2);
    }
    nrm("norm", self.norm);
    for (int i = 0; i < 3; ++i) lin("head." + std::to_string(i), self.head[i]);
  }
};

/// Parameter count implied by `cfg`, without allocating weights.
std::size_t parameter_count(const EncoderConfig& cfg);

/// False for biases, norm parameters and the class token.
bool takes_weight_decay(const std::string& parameter_name);

/// Truncated normal (std 0.02, cut at 2 std) for matrices and tables, zeros for
/// biases, unit gamma / zero beta for norms.
EncoderWeights<float> init_encoder(const EncoderConfig& cfg, std::uint64_t seed);

/// Rebuilds weights from tensors listed in for_each_parameter order.
template <typename T>
EncoderWeights<T> weights_from_list(const EncoderConfig& cfg, const std::vector<nd::BasicTensor<T>>& tensors);

/// Checks every parameter shape against `cfg`; throws ShapeError naming the first mismatch.
template <typename T>
void check_weights(const EncoderWeights<T>& w, const EncoderConfig& cfg);

/// tokens: G x n_keep x token_dim (or n_keep x token_dim), keep: the G * n_keep
/// original patch indices, row-major by view. Returns G x embed_dim (or
/// embed_dim) class-token features after the final norm.
template <typename T>
nd::BasicTensor<T> encode(const nd::BasicTensor<T>& tokens, std::span<const std::size_t> keep,
                          const EncoderWeights<T>& w, const EncoderConfig& cfg);

/// 3-layer MLP with GELU between layers: [..., embed_dim] -> [..., projection_dim].
template <typename T>
nd::BasicTensor<T> project(const nd::BasicTensor<T>& feature, const EncoderWeights<T>& w);

/// Backbone features of whole images (C x H x W each), centre-resized to the
/// view size, with no masking. Runs without gradient recording.
std::vector<std::vector<float>> embed_for_eval(const std::vector<nd::Tensor>& images, const EncoderWeights<float>& w,
                                               const EncoderConfig& cfg, std::size_t chunk = 32);
std::vector<float> embed_for_eval(const nd::Tensor& image, const EncoderWeights<float>& w, const EncoderConfig& cfg);

// ---------------------------------------------------------------- checkpoints

/// On-disk layout:
///
///   CWAMSN-CHECKPOINT 1
///   <config, key=value lines>
///   ---
///   name,offset,shape
///   <one row per tensor; offset in bytes from the start of the blob section,
///    shape as dims joined by 'x'>
///   ---
///   <NDT1 blobs back to back>
struct Checkpoint {
  KeyValueConfig config;
  std::vector<std::pair<std::string, nd::Tensor>> tensors;

  const nd::Tensor& tensor(const std::string& name) const;
  /// Tensors whose names start with `prefix`, with the prefix stripped.
  std::vector<std::pair<std::string, nd::Tensor>> with_prefix(const std::string& prefix) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Adds `weights` to the checkpoint under `prefix`.
void add_weights(Checkpoint& ckpt, const std::string& prefix, const EncoderWeights<float>& weights);
/// Reads the weights stored under `prefix`, checking shapes against `cfg`.
EncoderWeights<float> read_weights(const Checkpoint& ckpt, const std::string& prefix, const EncoderConfig& cfg);

}  // namespace cwamsn::vit
