// SPDX-License-Identifier: Apache-2.0
#include "cwamsn/vitencoder.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "cwamsn/error.hpp"
#include "cwamsn/ndt_io.hpp"
#include "cwamsn/ops.hpp"
#include "cwamsn/rng.hpp"
#include "cwamsn/wellsampler.hpp"

namespace cwamsn::vit {

using nd::BasicTensor;
using nd::Shape;

namespace {

constexpr std::string_view kCheckpointMagic = "CWAMSN-CHECKPOINT 1";

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

/// Parameter names and shapes in for_each_parameter order.
std::vector<std::pair<std::string, Shape>> expected_shapes(const EncoderConfig& cfg) {
  const std::size_t d = cfg.embed_dim, h = cfg.mlp_ratio * d;
  std::vector<std::pair<std::string, Shape>> out;
  auto lin = [&](const std::string& n, std::size_t in, std::size_t o) {
    out.emplace_back(n + ".weight", Shape{in, o});
    out.emplace_back(n + ".bias", Shape{o});
  };
  auto nrm = [&](const std::string& n) {
    out.emplace_back(n + ".gamma", Shape{d});
    out.emplace_back(n + ".beta", Shape{d});
  };
  lin("patch_embed", cfg.token_dim(), d);
  out.emplace_back("pos_embed", Shape{cfg.n_patches(), d});
  out.emplace_back("cls_token", Shape{1, d});
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    nrm(p + "norm1");
    lin(p + "attn.qkv", d, 3 * d);
    lin(p + "attn.proj", d, d);
    nrm(p + "norm2");
    lin(p + "mlp.fc1", d, h);
    lin(p + "mlp.fc2", h, d);
  }
  nrm("norm");
  lin("head.0", d, d);
  lin("head.1", d, d);
  lin("head.2", d, cfg.projection_dim);
  return out;
}

template <typename T>
EncoderWeights<T> skeleton(std::size_t depth) {
  EncoderWeights<T> w;
  w.blocks.resize(depth);
  return w;
}

template <typename T>
EncoderWeights<T> assign_in_order(std::size_t depth, const std::vector<BasicTensor<T>>& tensors) {
  auto w = skeleton<T>(depth);
  std::size_t i = 0;
  w.for_each_parameter([&](const std::string& name, BasicTensor<T>& t) {
    if (i >= tensors.size()) throw ShapeError("encoder weights: missing tensor for " + name);
    t = tensors[i++];
  });
  if (i != tensors.size()) {
    throw ShapeError("encoder weights: expected " + std::to_string(i) + " tensors, got " +
                     std::to_string(tensors.size()));
  }
  return w;
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const Linear<T>& l) {
  return nd::affine(x, l.weight, l.bias);
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const Norm<T>& n) {
  return nd::layer_norm(x, n.gamma, n.beta);
}

/// Multi-head self-attention over x: G x L x d.
template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& x, const Block<T>& b, std::size_t heads) {
  return linear(nd::multi_head_attention(linear(x, b.qkv), heads), b.proj);
}

}  // namespace

// ---------------------------------------------------------------- config

EncoderConfig EncoderConfig::desk() { return {}; }

EncoderConfig EncoderConfig::vit_s16() {
  EncoderConfig c;
  c.image_size = 224;
  c.patch_size = 16;
  c.embed_dim = 384;
  c.depth = 12;
  c.n_heads = 6;
  return c;
}

EncoderConfig EncoderConfig::tiny() {
  EncoderConfig c;
  c.in_channels = 2;
  c.image_size = 16;
  c.patch_size = 4;
  c.embed_dim = 32;
  c.depth = 2;
  c.n_heads = 2;
  c.mlp_ratio = 2;
  c.projection_dim = 16;
  return c;
}

EncoderConfig EncoderConfig::preset(const std::string& name) {
  if (name == "desk") return desk();
  if (name == "vit-s16" || name == "vit_s16") return vit_s16();
  if (name == "tiny") return tiny();
  throw ConfigError("unknown encoder preset '" + name + "' (expected desk, vit-s16 or tiny)");
}

void EncoderConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("encoder config: " + msg); };
  if (in_channels < 1 || embed_dim < 1 || depth < 1 || n_heads < 1 || mlp_ratio < 1) {
    fail("channels, embed_dim, depth, n_heads and mlp_ratio must be >= 1");
  }
  if (embed_dim % n_heads != 0) fail("embed_dim must be divisible by n_heads");
  if (projection_dim < 1) fail("projection_dim must be >= 1");
  if (patch_size < 1 || image_size % patch_size != 0) fail("image_size must be a multiple of patch_size");
}

void EncoderConfig::write_to(KeyValueConfig& kv, const std::string& prefix) const {
  kv.set(prefix + "in_channels", std::to_string(in_channels));
  kv.set(prefix + "image_size", std::to_string(image_size));
  kv.set(prefix + "patch_size", std::to_string(patch_size));
  kv.set(prefix + "embed_dim", std::to_string(embed_dim));
  kv.set(prefix + "depth", std::to_string(depth));
  kv.set(prefix + "n_heads", std::to_string(n_heads));
  kv.set(prefix + "mlp_ratio", std::to_string(mlp_ratio));
  kv.set(prefix + "projection_dim", std::to_string(projection_dim));
}

EncoderConfig EncoderConfig::read_from(const KeyValueConfig& kv, const std::string& prefix) {
  EncoderConfig c = preset(kv.get_string(prefix + "preset", "desk"));
  c.in_channels = kv.get_size(prefix + "in_channels", c.in_channels);
  c.image_size = kv.get_size(prefix + "image_size", c.image_size);
  c.patch_size = kv.get_size(prefix + "patch_size", c.patch_size);
  c.embed_dim = kv.get_size(prefix + "embed_dim", c.embed_dim);
  c.depth = kv.get_size(prefix + "depth", c.depth);
  c.n_heads = kv.get_size(prefix + "n_heads", c.n_heads);
  c.mlp_ratio = kv.get_size(prefix + "mlp_ratio", c.mlp_ratio);
  c.projection_dim = kv.get_size(prefix + "projection_dim", c.projection_dim);
  c.validate();
  return c;
}

// ---------------------------------------------------------------- weights

template <typename T>
std::vector<std::pair<std::string, BasicTensor<T>>> EncoderWeights<T>::named_parameters() const {
  std::vector<std::pair<std::string, BasicTensor<T>>> out;
  for_each_parameter([&](const std::string& name, const BasicTensor<T>& t) { out.emplace_back(name, t); });
  return out;
}

template <typename T>
std::size_t EncoderWeights<T>::parameter_count() const {
  std::size_t n = 0;
  for_each_parameter([&](const std::string&, const BasicTensor<T>& t) { n += t.numel(); });
  return n;
}

template <typename T>
EncoderWeights<T> EncoderWeights<T>::clone() const {
  EncoderWeights<T> copy = *this;
  copy.for_each_parameter([](const std::string&, BasicTensor<T>& t) { t = t.detach(); });
  return copy;
}

template <typename T>
template <typename U>
EncoderWeights<U> EncoderWeights<T>::cast() const {
  std::vector<BasicTensor<U>> tensors;
  for_each_parameter([&](const std::string&, const BasicTensor<T>& t) { tensors.push_back(t.template cast<U>()); });
  return assign_in_order<U>(blocks.size(), tensors);
}

bool takes_weight_decay(const std::string& name) {
  return !(ends_with(name, ".bias") || ends_with(name, ".gamma") || ends_with(name, ".beta") || name == "cls_token");
}

std::size_t parameter_count(const EncoderConfig& cfg) {
  std::size_t n = 0;
  for (const auto& [name, shape] : expected_shapes(cfg)) n += nd::numel_of(shape);
  return n;
}

EncoderWeights<float> init_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed, "encoder_init");
  std::vector<nd::Tensor> tensors;
  for (const auto& [name, shape] : expected_shapes(cfg)) {
    std::vector<float> v(nd::numel_of(shape), 0.0f);
    if (ends_with(name, ".gamma")) {
      std::fill(v.begin(), v.end(), 1.0f);
    } else if (!ends_with(name, ".bias") && !ends_with(name, ".beta")) {
      for (auto& x : v) {
        double z = 0;
        do {
          z = rng.normal();
        } while (std::abs(z) > 2.0);
        x = static_cast<float>(0.02 * z);
      }
    }
    tensors.push_back(nd::Tensor::from_data(shape, std::move(v)));
  }
  return assign_in_order<float>(cfg.depth, tensors);
}

template <typename T>
void check_weights(const EncoderWeights<T>& w, const EncoderConfig& cfg) {
  const auto expected = expected_shapes(cfg);
  const auto actual = w.named_parameters();
  if (actual.size() != expected.size()) {
    throw ShapeError("encoder weights: expected " + std::to_string(expected.size()) + " tensors for depth " +
                     std::to_string(cfg.depth) + ", got " + std::to_string(actual.size()));
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (!actual[i].second.defined() || actual[i].second.shape() != expected[i].second) {
      throw ShapeError("encoder weights: " + expected[i].first + " has shape " +
                       (actual[i].second.defined() ? nd::to_string(actual[i].second.shape()) : "<undefined>") +
                       ", expected " + nd::to_string(expected[i].second));
    }
  }
}

template <typename T>
EncoderWeights<T> weights_from_list(const EncoderConfig& cfg, const std::vector<BasicTensor<T>>& tensors) {
  auto w = assign_in_order<T>(cfg.depth, tensors);
  check_weights(w, cfg);
  return w;
}

// ---------------------------------------------------------------- forward

template <typename T>
BasicTensor<T> encode(const BasicTensor<T>& tokens, std::span<const std::size_t> keep, const EncoderWeights<T>& w,
                      const EncoderConfig& cfg) {
  if (tokens.rank() == 2) {
    auto batched = nd::reshape(tokens, {1, tokens.size(0), tokens.size(1)});
    return nd::reshape(encode(batched, keep, w, cfg), {cfg.embed_dim});
  }
  if (tokens.rank() != 3 || tokens.size(2) != cfg.token_dim()) {
    throw ShapeError("encode: expected G x n x " + std::to_string(cfg.token_dim()) + " tokens, got " +
                     nd::to_string(tokens.shape()));
  }
  const std::size_t G = tokens.size(0), n = tokens.size(1), d = cfg.embed_dim;
  if (keep.size() != G * n) {
    throw ShapeError("encode: " + std::to_string(keep.size()) + " keep indices for " + std::to_string(G * n) +
                     " tokens");
  }
  for (std::size_t k : keep) {
    if (k >= cfg.n_patches()) {
      throw ShapeError("encode: patch index " + std::to_string(k) + " outside the " + std::to_string(cfg.grid()) +
                       "x" + std::to_string(cfg.grid()) + " grid");
    }
  }
  auto x = linear(tokens, w.patch_embed);
  x = nd::add(x, nd::reshape(nd::gather_rows(w.pos_embed, keep), {G, n, d}));
  const std::vector<std::size_t> cls_rows(G, 0);
  auto cls = nd::reshape(nd::gather_rows(w.cls_token, std::span<const std::size_t>(cls_rows)), {G, 1, d});
  x = nd::concat(std::vector<BasicTensor<T>>{cls, x}, 1);
  for (const auto& b : w.blocks) {
    x = nd::add(x, attention(layer_norm(x, b.norm1), b, cfg.n_heads));
    x = nd::add(x, linear(nd::gelu(linear(layer_norm(x, b.norm2), b.fc1)), b.fc2));
  }
  return layer_norm(nd::reshape(nd::slice(x, 1, 0, 1), {G, d}), w.norm);
}

template <typename T>
BasicTensor<T> project(const BasicTensor<T>& feature, const EncoderWeights<T>& w) {
  auto h = nd::gelu(linear(feature, w.head[0]));
  h = nd::gelu(linear(h, w.head[1]));
  return linear(h, w.head[2]);
}

std::vector<std::vector<float>> embed_for_eval(const std::vector<nd::Tensor>& images, const EncoderWeights<float>& w,
                                               const EncoderConfig& cfg, std::size_t chunk) {
  nd::NoGradGuard no_grad;
  const std::size_t n = cfg.n_patches(), td = cfg.token_dim();
  std::vector<std::size_t> identity(n);
  for (std::size_t i = 0; i < n; ++i) identity[i] = i;
  std::vector<std::vector<float>> out;
  out.reserve(images.size());
  chunk = std::max<std::size_t>(chunk, 1);
  for (std::size_t start = 0; start < images.size(); start += chunk) {
    const std::size_t G = std::min(chunk, images.size() - start);
    std::vector<float> tokens;
    tokens.reserve(G * n * td);
    std::vector<std::size_t> keep;
    for (std::size_t g = 0; g < G; ++g) {
      const auto& img = images[start + g];
      if (img.rank() != 3 || img.size(0) != cfg.in_channels) {
        throw ShapeError("embed_for_eval: expected " + std::to_string(cfg.in_channels) + " x H x W image, got " +
                         nd::to_string(img.shape()));
      }
      auto view = sampler::crop_and_resize(img, {0, 0, img.size(1), img.size(2)}, cfg.image_size, cfg.image_size);
      auto t = sampler::patchify(view, cfg.patch_size, identity);
      tokens.insert(tokens.end(), t.data().begin(), t.data().end());
      keep.insert(keep.end(), identity.begin(), identity.end());
    }
    auto feats = encode(nd::Tensor::from_data({G, n, td}, std::move(tokens)), keep, w, cfg);
    const auto f = feats.data();
    for (std::size_t g = 0; g < G; ++g) {
      out.emplace_back(f.begin() + static_cast<std::ptrdiff_t>(g * cfg.embed_dim),
                       f.begin() + static_cast<std::ptrdiff_t>((g + 1) * cfg.embed_dim));
    }
  }
  return out;
}

std::vector<float> embed_for_eval(const nd::Tensor& image, const EncoderWeights<float>& w, const EncoderConfig& cfg) {
  return embed_for_eval(std::vector<nd::Tensor>{image}, w, cfg, 1).front();
}

// ---------------------------------------------------------------- checkpoints

const nd::Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw IoError("checkpoint has no tensor named '" + name + "'");
}

std::vector<std::pair<std::string, nd::Tensor>> Checkpoint::with_prefix(const std::string& prefix) const {
  std::vector<std::pair<std::string, nd::Tensor>> out;
  for (const auto& [n, t] : tensors) {
    if (n.rfind(prefix, 0) == 0) out.emplace_back(n.substr(prefix.size()), t);
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ostringstream blobs(std::ios::binary);
  std::ostringstream table;
  table << "name,offset,shape\n";
  std::set<std::string> names;
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.find_first_of(",\n") != std::string::npos) throw IoError("checkpoint: invalid tensor name '" + name + "'");
    if (!names.insert(name).second) throw IoError("checkpoint: duplicate tensor name '" + name + "'");
    table << name << ',' << static_cast<std::size_t>(blobs.tellp()) << ',';
    for (std::size_t i = 0; i < t.rank(); ++i) table << (i ? "x" : "") << t.shape()[i];
    table << '\n';
    nd::write_ndt(blobs, t);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint: " + path.string());
  out << kCheckpointMagic << '\n' << ckpt.config.dump() << "---\n" << table.str() << "---\n" << blobs.str();
  if (!out) throw IoError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointMagic) {
    throw IoError(path.string() + ": not a checkpoint (bad magic)");
  }
  std::string config_text;
  bool closed = false;
  while (std::getline(in, line)) {
    if (line == "---") {
      closed = true;
      break;
    }
    config_text += line + "\n";
  }
  if (!closed) throw IoError(path.string() + ": truncated checkpoint header");
  Checkpoint ckpt;
  try {
    ckpt.config = KeyValueConfig::parse(config_text, path.string());
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint config: ") + e.what());
  }

  struct Row {
    std::string name;
    std::size_t offset;
    std::string shape;
  };
  std::vector<Row> rows;
  if (!std::getline(in, line) || line != "name,offset,shape") throw IoError(path.string() + ": missing tensor table");
  closed = false;
  while (std::getline(in, line)) {
    if (line == "---") {
      closed = true;
      break;
    }
    const auto c1 = line.find(','), c2 = line.rfind(',');
    if (c1 == std::string::npos || c1 == c2) throw IoError(path.string() + ": malformed table row '" + line + "'");
    Row r{line.substr(0, c1), 0, line.substr(c2 + 1)};
    try {
      r.offset = std::stoull(line.substr(c1 + 1, c2 - c1 - 1));
    } catch (const std::exception&) {
      throw IoError(path.string() + ": malformed offset in row '" + line + "'");
    }
    rows.push_back(std::move(r));
  }
  if (!closed) throw IoError(path.string() + ": truncated tensor table");
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  for (const auto& r : rows) {
    if (r.offset >= blob.size()) {
      throw IoError(path.string() + ": tensor '" + r.name + "' offset past end of file");
    }
    std::istringstream s(blob.substr(r.offset), std::ios::binary);
    auto t = nd::read_ndt(s);
    std::string shape;
    for (std::size_t i = 0; i < t.rank(); ++i) shape += (i ? "x" : "") + std::to_string(t.shape()[i]);
    if (shape != r.shape) {
      throw IoError(path.string() + ": tensor '" + r.name + "' has shape " + shape + " but the table says " + r.shape);
    }
    ckpt.tensors.emplace_back(r.name, std::move(t));
  }
  return ckpt;
}

void add_weights(Checkpoint& ckpt, const std::string& prefix, const EncoderWeights<float>& weights) {
  weights.for_each_parameter(
      [&](const std::string& name, const nd::Tensor& t) { ckpt.tensors.emplace_back(prefix + name, t.detach()); });
}

EncoderWeights<float> read_weights(const Checkpoint& ckpt, const std::string& prefix, const EncoderConfig& cfg) {
  std::vector<nd::Tensor> tensors;
  for (const auto& [name, shape] : expected_shapes(cfg)) {
    const auto& t = ckpt.tensor(prefix + name);
    if (t.shape() != shape) {
      throw ShapeError("checkpoint tensor " + prefix + name + " has shape " + nd::to_string(t.shape()) +
                       " but the encoder config expects " + nd::to_string(shape));
    }
    tensors.push_back(t.detach());
  }
  return assign_in_order<float>(cfg.depth, tensors);
}

#define CWAMSN_INSTANTIATE(T)                                                                                      \
  template struct EncoderWeights<T>;                                                                               \
  template void check_weights<T>(const EncoderWeights<T>&, const EncoderConfig&);                                  \
  template EncoderWeights<T> weights_from_list<T>(const EncoderConfig&, const std::vector<BasicTensor<T>>&);       \
  template BasicTensor<T> encode<T>(const BasicTensor<T>&, std::span<const std::size_t>, const EncoderWeights<T>&, \
                                    const EncoderConfig&);                                                         \
  template BasicTensor<T> project<T>(const BasicTensor<T>&, const EncoderWeights<T>&);

CWAMSN_INSTANTIATE(float)
CWAMSN_INSTANTIATE(double)
#undef CWAMSN_INSTANTIATE

template EncoderWeights<double> EncoderWeights<float>::cast<double>() const;
template EncoderWeights<float> EncoderWeights<double>::cast<float>() const;
template EncoderWeights<float> EncoderWeights<float>::cast<float>() const;
template EncoderWeights<double> EncoderWeights<double>::cast<double>() const;

}  // namespace cwamsn::vit
