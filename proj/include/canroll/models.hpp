#pragma once

#include <canroll/nn.hpp>

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace canroll {

enum class ModelKind { GeneratorImage, DiscriminatorImage, GeneratorToy, DiscriminatorToy, AutoencoderImage };

struct LayerDesc {
  enum class Op { Dense, Conv, ConvT, BatchNorm, LeakyRelu, Relu, Tanh };
  Op op;
  std::string name;  // parameter prefix for parameterized layers
  int in = 0;
  int out = 0;          // dense dims
  nn::ConvGeom geom{};  // conv / convT
  int bn_c = 0;
  int bn_hw = 1;
  double slope = 0.2;
};

struct ModelSpec {
  ModelKind kind;
  int K = 1;
  int latent_dim = 0;
  int image_size = 128;
  std::vector<LayerDesc> trunk;
  std::optional<LayerDesc> head_real;   // discriminators
  std::optional<LayerDesc> head_class;  // discriminators with K >= 2
  std::string profile_id;

  int input_dim() const;
  int output_dim() const;
};

namespace layers {

inline LayerDesc dense(std::string name, int in, int out) {
  LayerDesc l{LayerDesc::Op::Dense, std::move(name)};
  l.in = in;
  l.out = out;
  return l;
}

inline LayerDesc conv(std::string name, int in_c, int out_c, int kernel, int stride, int pad, int in_hw) {
  LayerDesc l{LayerDesc::Op::Conv, std::move(name)};
  l.geom = nn::ConvGeom{in_c, out_c, kernel, stride, pad, in_hw};
  return l;
}

inline LayerDesc conv_t(std::string name, int in_c, int out_c, int kernel, int stride, int pad, int in_hw) {
  LayerDesc l{LayerDesc::Op::ConvT, std::move(name)};
  l.geom = nn::ConvGeom{in_c, out_c, kernel, stride, pad, in_hw};
  return l;
}

inline LayerDesc batch_norm(std::string name, int channels, int hw) {
  LayerDesc l{LayerDesc::Op::BatchNorm, std::move(name)};
  l.bn_c = channels;
  l.bn_hw = hw;
  return l;
}

inline LayerDesc leaky_relu(double slope = 0.2) {
  LayerDesc l{LayerDesc::Op::LeakyRelu, {}};
  l.slope = slope;
  return l;
}

inline LayerDesc relu() { return LayerDesc{LayerDesc::Op::Relu, {}}; }
inline LayerDesc tanh() { return LayerDesc{LayerDesc::Op::Tanh, {}}; }

}  // namespace layers

// ---- model spec builders ----

struct ToyLayout {
  int latent_dim = 16;
  int g_hidden = 64;
  int d_hidden = 64;
  double d_slope = 0.2;
};

// Latent 100 -> c0 x 4 x 4 -> ... -> 1 x side x side. side=128 is the full
// profile (512/256/128/64 channels, with the 8->32 stage a single stride-4
// kernel-8 transposed convolution); side=32 is the reduced test profile.
inline std::vector<LayerDesc> generator_image_trunk(int side, int latent_dim) {
  using namespace layers;
  std::vector<LayerDesc> t;
  if (side == 128) {
    t.push_back(dense("proj", latent_dim, 512 * 4 * 4));
    t.push_back(batch_norm("bn_proj", 512, 16));
    t.push_back(relu());
    t.push_back(conv_t("ct1", 512, 256, 4, 2, 1, 4));  // 4 -> 8
    t.push_back(batch_norm("bn1", 256, 8 * 8));
    t.push_back(relu());
    t.push_back(conv_t("ct2", 256, 128, 8, 4, 2, 8));  // 8 -> 32
    t.push_back(batch_norm("bn2", 128, 32 * 32));
    t.push_back(relu());
    t.push_back(conv_t("ct3", 128, 64, 4, 2, 1, 32));  // 32 -> 64
    t.push_back(batch_norm("bn3", 64, 64 * 64));
    t.push_back(relu());
    t.push_back(conv_t("ct4", 64, 1, 4, 2, 1, 64));  // 64 -> 128
    t.push_back(tanh());
  } else if (side == 32) {
    t.push_back(dense("proj", latent_dim, 128 * 4 * 4));
    t.push_back(batch_norm("bn_proj", 128, 16));
    t.push_back(relu());
    t.push_back(conv_t("ct1", 128, 64, 4, 2, 1, 4));  // 4 -> 8
    t.push_back(batch_norm("bn1", 64, 8 * 8));
    t.push_back(relu());
    t.push_back(conv_t("ct2", 64, 32, 4, 2, 1, 8));  // 8 -> 16
    t.push_back(batch_norm("bn2", 32, 16 * 16));
    t.push_back(relu());
    t.push_back(conv_t("ct3", 32, 1, 4, 2, 1, 16));  // 16 -> 32
    t.push_back(tanh());
  } else {
    fail(Errc::ShapeMismatch, "unsupported image size " + std::to_string(side));
  }
  return t;
}

inline std::vector<LayerDesc> discriminator_image_trunk(int side, double slope = 0.2) {
  using namespace layers;
  require(side == 128 || side == 32, Errc::ShapeMismatch, "unsupported image size");
  std::vector<LayerDesc> t;
  const int h1 = side / 2, h2 = side / 4;
  t.push_back(conv("conv1", 1, 64, 4, 2, 1, side));
  t.push_back(batch_norm("bn1", 64, h1 * h1));
  t.push_back(leaky_relu(slope));
  t.push_back(conv("conv2", 64, 128, 4, 2, 1, h1));
  t.push_back(batch_norm("bn2", 128, h2 * h2));
  t.push_back(leaky_relu(slope));
  return t;
}

inline ModelSpec generator_image_spec(int side = 128, int latent_dim = 100) {
  ModelSpec s{ModelKind::GeneratorImage};
  s.latent_dim = latent_dim;
  s.image_size = side;
  s.trunk = generator_image_trunk(side, latent_dim);
  s.profile_id = "generator_image_" + std::to_string(side);
  return s;
}

inline ModelSpec discriminator_image_spec(int K, int side = 128, double slope = 0.2) {
  ModelSpec s{ModelKind::DiscriminatorImage};
  s.K = K;
  s.image_size = side;
  s.trunk = discriminator_image_trunk(side, slope);
  const int feat = 128 * (side / 4) * (side / 4);
  s.head_real = layers::dense("head_r", feat, 1);
  if (K >= 2) s.head_class = layers::dense("head_c", feat, K);
  s.profile_id = "discriminator_image_" + std::to_string(side) + "_K" + std::to_string(K);
  return s;
}

inline ModelSpec generator_toy_spec(const ToyLayout& toy = {}) {
  using namespace layers;
  ModelSpec s{ModelKind::GeneratorToy};
  s.latent_dim = toy.latent_dim;
  s.trunk = {dense("fc1", toy.latent_dim, toy.g_hidden), tanh(),
             dense("fc2", toy.g_hidden, toy.g_hidden), tanh(),
             dense("fc3", toy.g_hidden, 2)};
  s.profile_id = "generator_toy_h" + std::to_string(toy.g_hidden);
  return s;
}

inline ModelSpec discriminator_toy_spec(int K, const ToyLayout& toy = {}) {
  using namespace layers;
  ModelSpec s{ModelKind::DiscriminatorToy};
  s.K = K;
  s.trunk = {dense("fc1", 2, toy.d_hidden), leaky_relu(toy.d_slope),
             dense("fc2", toy.d_hidden, toy.d_hidden), leaky_relu(toy.d_slope)};
  s.head_real = layers::dense("head_r", toy.d_hidden, 1);
  if (K >= 2) s.head_class = layers::dense("head_c", toy.d_hidden, K);
  s.profile_id = "discriminator_toy_h" + std::to_string(toy.d_hidden) + "_K" + std::to_string(K);
  return s;
}

// Encoder mirrors the discriminator trunk down to a 100-wide bottleneck; the
// decoder mirrors the generator.
inline ModelSpec autoencoder_image_spec(int side = 128, int bottleneck = 100) {
  ModelSpec s{ModelKind::AutoencoderImage};
  s.latent_dim = bottleneck;
  s.image_size = side;
  std::vector<LayerDesc> t = discriminator_image_trunk(side);
  for (auto& l : t) l.name = l.name.empty() ? l.name : "enc_" + l.name;
  const int feat = 128 * (side / 4) * (side / 4);
  t.push_back(layers::dense("enc_fc", feat, bottleneck));
  std::vector<LayerDesc> dec = generator_image_trunk(side, bottleneck);
  for (auto& l : dec) l.name = l.name.empty() ? l.name : "dec_" + l.name;
  t.insert(t.end(), dec.begin(), dec.end());
  s.trunk = std::move(t);
  s.profile_id = "autoencoder_image_" + std::to_string(side);
  return s;
}

inline int ModelSpec::input_dim() const {
  switch (kind) {
    case ModelKind::GeneratorImage:
    case ModelKind::GeneratorToy:
      return latent_dim;
    case ModelKind::DiscriminatorImage:
    case ModelKind::AutoencoderImage:
      return image_size * image_size;
    case ModelKind::DiscriminatorToy:
      return 2;
  }
  return 0;
}

inline int ModelSpec::output_dim() const {
  switch (kind) {
    case ModelKind::GeneratorImage:
    case ModelKind::AutoencoderImage:
      return image_size * image_size;
    case ModelKind::GeneratorToy:
      return 2;
    case ModelKind::DiscriminatorImage:
    case ModelKind::DiscriminatorToy:
      return 1;
  }
  return 0;
}

// ---- parameters ----

template <class S>
struct ParamEntryT {
  std::string name;
  MatX<S> value;
  bool trainable = true;
};

template <class S>
struct ModelParamsT {
  std::string profile_id;
  std::vector<ParamEntryT<S>> entries;

  int index_of(std::string_view name) const {
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].name == name) return static_cast<int>(i);
    return -1;
  }

  const MatX<S>& at(std::string_view name) const {
    const int i = index_of(name);
    require(i >= 0, Errc::ShapeMismatch, "unknown parameter " + std::string(name));
    return entries[static_cast<std::size_t>(i)].value;
  }

  MatX<S>& at(std::string_view name) {
    const int i = index_of(name);
    require(i >= 0, Errc::ShapeMismatch, "unknown parameter " + std::string(name));
    return entries[static_cast<std::size_t>(i)].value;
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& e : entries)
      if (e.trainable) n += static_cast<std::size_t>(e.value.size());
    return n;
  }
};

using ModelParams = ModelParamsT<double>;

// Deep copy; value semantics already guarantee independence, the named
// operation exists so call sites read as intent.
template <class S>
ModelParamsT<S> clone_params(const ModelParamsT<S>& p) {
  return p;
}

namespace detail {

template <class S>
void push_layer_params(ModelParamsT<S>& mp, const LayerDesc& l, Rng& rng, double init_std) {
  switch (l.op) {
    case LayerDesc::Op::Dense:
      mp.entries.push_back({l.name + "/W", rng.normal_matrix<S>(l.in, l.out, init_std), true});
      mp.entries.push_back({l.name + "/b", MatX<S>::Zero(1, l.out), true});
      break;
    case LayerDesc::Op::Conv:
      mp.entries.push_back({l.name + "/W",
                            rng.normal_matrix<S>(l.geom.in_c * l.geom.kernel * l.geom.kernel, l.geom.out_c,
                                                 init_std),
                            true});
      mp.entries.push_back({l.name + "/b", MatX<S>::Zero(1, l.geom.out_c), true});
      break;
    case LayerDesc::Op::ConvT:
      mp.entries.push_back({l.name + "/W",
                            rng.normal_matrix<S>(l.geom.in_c, l.geom.out_c * l.geom.kernel * l.geom.kernel,
                                                 init_std),
                            true});
      mp.entries.push_back({l.name + "/b", MatX<S>::Zero(1, l.geom.out_c), true});
      break;
    case LayerDesc::Op::BatchNorm:
      mp.entries.push_back({l.name + "/gamma", MatX<S>::Ones(1, l.bn_c), true});
      mp.entries.push_back({l.name + "/beta", MatX<S>::Zero(1, l.bn_c), true});
      mp.entries.push_back({l.name + "/running_mean", MatX<S>::Zero(1, l.bn_c), false});
      mp.entries.push_back({l.name + "/running_var", MatX<S>::Ones(1, l.bn_c), false});
      break;
    default:
      break;
  }
}

}  // namespace detail

// Weights ~ N(0, 0.02), biases 0, normalization scale 1 / shift 0. Entry order
// (and therefore the draw order) is the layer order, so a seed pins every value.
template <class S = double>
ModelParamsT<S> init_params(const ModelSpec& spec, std::uint64_t seed, double init_std = 0.02) {
  Rng rng(seed);
  ModelParamsT<S> mp;
  mp.profile_id = spec.profile_id;
  for (const auto& l : spec.trunk) detail::push_layer_params(mp, l, rng, init_std);
  if (spec.head_real) detail::push_layer_params(mp, *spec.head_real, rng, init_std);
  if (spec.head_class) detail::push_layer_params(mp, *spec.head_class, rng, init_std);
  return mp;
}

// ---- graph-level forwards ----

// Parameter leaves on a tape, parallel to ModelParams entries. Updated copies
// (virtual lookahead steps) swap in new vars and keep the same metadata.
template <class S>
struct ParamVarsT {
  const ModelParamsT<S>* params = nullptr;
  std::vector<ad::Var<S>> vars;

  ad::Var<S> at(std::string_view name) const {
    const int i = params->index_of(name);
    require(i >= 0, Errc::ShapeMismatch, "unknown parameter " + std::string(name));
    return vars[static_cast<std::size_t>(i)];
  }
};

template <class S>
ParamVarsT<S> lift(ad::Tape<S>& t, const ModelParamsT<S>& mp) {
  ParamVarsT<S> pv;
  pv.params = &mp;
  pv.vars.reserve(mp.entries.size());
  for (const auto& e : mp.entries) pv.vars.push_back(t.leaf(e.value));
  return pv;
}

template <class S>
struct BnStatsT {
  struct LayerStats {
    std::string name;
    MatX<S> mean;
    MatX<S> var;
  };
  std::vector<LayerStats> layers;
};

using BnStats = BnStatsT<double>;

template <class S>
ad::Var<S> sequential_forward(const std::vector<LayerDesc>& net, const ParamVarsT<S>& pv, ad::Var<S> x,
                              bool train_mode, BnStatsT<S>* stats_out = nullptr) {
  for (const auto& l : net) {
    switch (l.op) {
      case LayerDesc::Op::Dense:
        x = nn::dense(x, pv.at(l.name + "/W"), pv.at(l.name + "/b"));
        break;
      case LayerDesc::Op::Conv:
        x = nn::conv2d(x, pv.at(l.name + "/W"), pv.at(l.name + "/b"), l.geom);
        break;
      case LayerDesc::Op::ConvT:
        x = nn::conv2d_transpose(x, pv.at(l.name + "/W"), pv.at(l.name + "/b"), l.geom);
        break;
      case LayerDesc::Op::BatchNorm: {
        if (train_mode) {
          auto out = nn::batch_norm_train(x, pv.at(l.name + "/gamma"), pv.at(l.name + "/beta"), l.bn_c,
                                          l.bn_hw, S(1e-5));
          if (stats_out) stats_out->layers.push_back({l.name, out.batch_mean, out.batch_var});
          x = out.y;
        } else {
          x = nn::batch_norm_inference(x, pv.at(l.name + "/gamma"), pv.at(l.name + "/beta"),
                                       pv.at(l.name + "/running_mean"), pv.at(l.name + "/running_var"),
                                       l.bn_c, l.bn_hw, S(1e-5));
        }
        break;
      }
      case LayerDesc::Op::LeakyRelu:
        x = ad::leaky_relu(x, static_cast<S>(l.slope));
        break;
      case LayerDesc::Op::Relu:
        x = ad::relu(x);
        break;
      case LayerDesc::Op::Tanh:
        x = ad::tanh_v(x);
        break;
    }
  }
  return x;
}

// Fold freshly observed batch statistics into the running statistics. Only
// committed steps call this; virtual lookahead copies never do.
template <class S>
void update_running_stats(ModelParamsT<S>& mp, const BnStatsT<S>& stats, double momentum = 0.1) {
  for (const auto& ls : stats.layers) {
    auto& rm = mp.at(ls.name + "/running_mean");
    auto& rv = mp.at(ls.name + "/running_var");
    rm = (1.0 - momentum) * rm + momentum * ls.mean;
    rv = (1.0 - momentum) * rv + momentum * ls.var;
  }
}

template <class S>
ad::Var<S> generator_forward_graph(const ModelSpec& spec, const ParamVarsT<S>& pv, ad::Var<S> z,
                                   bool train_mode, BnStatsT<S>* stats_out = nullptr) {
  require(spec.kind == ModelKind::GeneratorImage || spec.kind == ModelKind::GeneratorToy,
          Errc::ShapeMismatch, "generator_forward on non-generator spec");
  require(z.cols() == spec.latent_dim, Errc::ShapeMismatch, "latent vector length mismatch");
  return sequential_forward(spec.trunk, pv, z, train_mode, stats_out);
}

template <class S>
struct DiscOutVars {
  ad::Var<S> realness;         // N x 1, in (0,1)
  ad::Var<S> class_posterior;  // N x K, rows on the simplex; invalid when K == 1
  bool has_class = false;
};

template <class S>
DiscOutVars<S> discriminator_forward_graph(const ModelSpec& spec, const ParamVarsT<S>& pv, ad::Var<S> x,
                                           bool train_mode, BnStatsT<S>* stats_out = nullptr) {
  require(spec.kind == ModelKind::DiscriminatorImage || spec.kind == ModelKind::DiscriminatorToy,
          Errc::ShapeMismatch, "discriminator_forward on non-discriminator spec");
  require(x.cols() == spec.input_dim(), Errc::ShapeMismatch, "discriminator input shape");
  ad::Var<S> h = sequential_forward(spec.trunk, pv, x, train_mode, stats_out);
  DiscOutVars<S> out;
  out.realness = ad::sigmoid_v(nn::dense(h, pv.at("head_r/W"), pv.at("head_r/b")));
  if (spec.head_class) {
    out.class_posterior = ad::softmax_rows(nn::dense(h, pv.at("head_c/W"), pv.at("head_c/b")));
    out.has_class = true;
  }
  return out;
}

template <class S>
ad::Var<S> autoencoder_forward_graph(const ModelSpec& spec, const ParamVarsT<S>& pv, ad::Var<S> x,
                                     bool train_mode, BnStatsT<S>* stats_out = nullptr) {
  require(spec.kind == ModelKind::AutoencoderImage, Errc::ShapeMismatch,
          "autoencoder_forward on non-autoencoder spec");
  require(x.cols() == spec.input_dim(), Errc::ShapeMismatch, "autoencoder input shape");
  return sequential_forward(spec.trunk, pv, x, train_mode, stats_out);
}

// ---- value-level convenience API ----

struct DiscriminatorOutput {
  Eigen::VectorXd realness;
  Mat class_posterior;  // N x K; empty when K == 1
  bool has_class = false;
};

inline Mat generator_forward(const ModelSpec& spec, const ModelParams& params, const Mat& z,
                             bool train_mode = false) {
  ad::Tape<double> t;
  auto pv = lift(t, params);
  return generator_forward_graph(spec, pv, t.constant(z), train_mode).value();
}

inline DiscriminatorOutput discriminator_forward(const ModelSpec& spec, const ModelParams& params,
                                                 const Mat& x, bool train_mode = false) {
  ad::Tape<double> t;
  auto pv = lift(t, params);
  auto out = discriminator_forward_graph(spec, pv, t.constant(x), train_mode);
  DiscriminatorOutput r;
  r.realness = out.realness.value().col(0);
  if (out.has_class) {
    r.class_posterior = out.class_posterior.value();
    r.has_class = true;
  }
  return r;
}

inline Mat autoencoder_forward(const ModelSpec& spec, const ModelParams& params, const Mat& x,
                               bool train_mode = false) {
  ad::Tape<double> t;
  auto pv = lift(t, params);
  return autoencoder_forward_graph(spec, pv, t.constant(x), train_mode).value();
}

enum class LatentPrior { Normal01, UniformSym };

inline Mat draw_latents(Rng& rng, int n, int dim, LatentPrior prior) {
  return prior == LatentPrior::Normal01 ? rng.normal_matrix<double>(n, dim)
                                        : rng.uniform_matrix<double>(n, dim, -1.0, 1.0);
}

}  // namespace canroll
