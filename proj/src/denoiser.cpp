#include "causnvs/denoiser.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "causnvs/errors.hpp"

namespace causnvs {

// ---------------------------------------------------------------------------
// Config

bool DenoiserConfig::has_framewise(int block) const { return framewise_layer(block) >= 0; }

int DenoiserConfig::framewise_layer(int block) const {
  for (std::size_t i = 0; i < framewise_attention_at.size(); ++i) {
    if (framewise_attention_at[i] == block) return static_cast<int>(i);
  }
  return -1;
}

void DenoiserConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0) {
    throw ConfigError("denoiser: image_size must be a positive multiple of patch_size");
  }
  if (channels != 3) throw ConfigError("denoiser: only 3 channels are supported");
  if (heads <= 0 || head_dim <= 0 || width != heads * head_dim) throw ConfigError("denoiser: width must equal heads * head_dim");
  if (cape && head_dim % 4 != 0) throw ConfigError("denoiser: head_dim must be divisible by 4 for CaPE");
  if (depth <= 0) throw ConfigError("denoiser: depth must be positive");
  if (noise_embed_dim <= 0 || noise_embed_dim % 2 != 0) throw ConfigError("denoiser: noise_embed_dim must be even");
  if (mlp_ratio <= 0) throw ConfigError("denoiser: mlp_ratio must be positive");
  if (num_timesteps < 2) throw ConfigError("denoiser: num_timesteps must be >= 2");
  std::set<int> seen;
  int prev = -1;
  for (int b : framewise_attention_at) {
    if (b < 0 || b >= depth) throw ConfigError("denoiser: framewise_attention_at entries must lie in [0, depth)");
    if (!seen.insert(b).second || b < prev) throw ConfigError("denoiser: framewise_attention_at must be strictly increasing");
    prev = b;
  }
}

void to_json(nlohmann::json& j, const DenoiserConfig& c) {
  j = {{"image_size", c.image_size},
       {"channels", c.channels},
       {"patch_size", c.patch_size},
       {"width", c.width},
       {"depth", c.depth},
       {"heads", c.heads},
       {"head_dim", c.head_dim},
       {"framewise_attention_at", c.framewise_attention_at},
       {"noise_embed_dim", c.noise_embed_dim},
       {"zero_init_frame_attention", c.zero_init_frame_attention},
       {"mlp_ratio", c.mlp_ratio},
       {"num_timesteps", c.num_timesteps},
       {"cape", c.cape}};
}

void from_json(const nlohmann::json& j, DenoiserConfig& c) {
  c.image_size = j.at("image_size").get<int>();
  c.channels = j.at("channels").get<int>();
  c.patch_size = j.at("patch_size").get<int>();
  c.width = j.at("width").get<int>();
  c.depth = j.at("depth").get<int>();
  c.heads = j.at("heads").get<int>();
  c.head_dim = j.at("head_dim").get<int>();
  c.framewise_attention_at = j.at("framewise_attention_at").get<std::vector<int>>();
  c.noise_embed_dim = j.at("noise_embed_dim").get<int>();
  c.zero_init_frame_attention = j.at("zero_init_frame_attention").get<bool>();
  c.mlp_ratio = j.at("mlp_ratio").get<int>();
  c.num_timesteps = j.at("num_timesteps").get<int>();
  c.cape = j.at("cape").get<bool>();
}

void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = {{"learning_rate", c.learning_rate}, {"warmup_steps", c.warmup_steps}, {"beta1", c.beta1},
       {"beta2", c.beta2},                 {"epsilon", c.epsilon},           {"grad_clip", c.grad_clip},
       {"ema_decay", c.ema_decay}};
}

void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  c.learning_rate = j.at("learning_rate").get<double>();
  c.warmup_steps = j.at("warmup_steps").get<int>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.epsilon = j.at("epsilon").get<double>();
  c.grad_clip = j.at("grad_clip").get<double>();
  c.ema_decay = j.at("ema_decay").get<double>();
}

// ---------------------------------------------------------------------------
// Parameters

int ParamLayout::add(std::string name, Eigen::Index rows, Eigen::Index cols) {
  if (by_name_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
  ParamInfo info{name, rows, cols, total_};
  total_ += info.size();
  by_name_[name] = static_cast<int>(entries_.size());
  entries_.push_back(std::move(info));
  return static_cast<int>(entries_.size()) - 1;
}

int ParamLayout::index(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw std::out_of_range("unknown parameter " + name);
  return it->second;
}

namespace {

struct LinearIds {
  int w = -1;
  int b = -1;
};

struct NormIds {
  int g = -1;
  int b = -1;
};

struct BlockIds {
  NormIds ln1;
  LinearIds qkv, proj;
  bool frame = false;
  NormIds lnf;
  LinearIds fqkv, fproj;
  NormIds ln2;
  LinearIds fc1, fc2;
};

struct NetIds {
  LinearIds patch_in;
  int pos = -1;
  LinearIds t1, t2;
  std::vector<BlockIds> blocks;
  NormIds ln_out;
  LinearIds out;
};

LinearIds add_linear(ParamLayout& L, const std::string& name, Eigen::Index out, Eigen::Index in) {
  return {L.add(name + ".w", out, in), L.add(name + ".b", 1, out)};
}

NormIds add_norm(ParamLayout& L, const std::string& name, Eigen::Index width) {
  return {L.add(name + ".g", 1, width), L.add(name + ".b", 1, width)};
}

NetIds register_params(const DenoiserConfig& c, ParamLayout& L) {
  NetIds ids;
  const Eigen::Index W = c.width;
  ids.patch_in = add_linear(L, "patch_in", W, c.patch_dim());
  ids.pos = L.add("pos_embed", c.tokens_per_frame(), W);
  ids.t1 = add_linear(L, "noise_embed.fc1", W, c.noise_embed_dim);
  ids.t2 = add_linear(L, "noise_embed.fc2", W, W);
  for (int b = 0; b < c.depth; ++b) {
    const std::string p = "blocks." + std::to_string(b);
    BlockIds blk;
    blk.ln1 = add_norm(L, p + ".ln1", W);
    blk.qkv = add_linear(L, p + ".attn.qkv", 3 * W, W);
    blk.proj = add_linear(L, p + ".attn.proj", W, W);
    if (c.has_framewise(b)) {
      blk.frame = true;
      blk.lnf = add_norm(L, p + ".frame.ln", W);
      blk.fqkv = add_linear(L, p + ".frame.qkv", 3 * W, W);
      blk.fproj = add_linear(L, p + ".frame.proj", W, W);
    }
    blk.ln2 = add_norm(L, p + ".ln2", W);
    blk.fc1 = add_linear(L, p + ".mlp.fc1", static_cast<Eigen::Index>(c.mlp_ratio) * W, W);
    blk.fc2 = add_linear(L, p + ".mlp.fc2", W, static_cast<Eigen::Index>(c.mlp_ratio) * W);
    ids.blocks.push_back(blk);
  }
  ids.ln_out = add_norm(L, "ln_out", W);
  ids.out = add_linear(L, "out", c.patch_dim(), W);
  return ids;
}

NetIds ids_for(const DenoiserConfig& c) {
  ParamLayout scratch;
  return register_params(c, scratch);
}

}  // namespace

std::shared_ptr<const ParamLayout> make_layout(const DenoiserConfig& config) {
  auto layout = std::make_shared<ParamLayout>();
  register_params(config, *layout);
  return layout;
}

void round_to_float(std::span<double> values) {
  for (double& v : values) v = static_cast<double>(static_cast<float>(v));
}

Eigen::Map<const RowMat> DenoiserParams::view(int id) const {
  const auto& e = layout->entries().at(static_cast<std::size_t>(id));
  return Eigen::Map<const RowMat>(values.data() + e.offset, e.rows, e.cols);
}

Eigen::Map<RowMat> DenoiserParams::view(int id) {
  const auto& e = layout->entries().at(static_cast<std::size_t>(id));
  return Eigen::Map<RowMat>(values.data() + e.offset, e.rows, e.cols);
}

bool DenoiserParams::all_finite() const {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

DenoiserParams DenoiserParams::init(const DenoiserConfig& config, std::uint64_t seed) {
  config.validate();
  DenoiserParams p;
  p.config = config;
  p.layout = make_layout(config);
  p.values.assign(p.layout->total(), 0.0);
  const NetIds ids = ids_for(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  auto fill = [&](int id, double stddev) {
    auto m = p.view(id);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * normal(rng);
  };
  auto fan_in = [&](int id) { return static_cast<double>(p.layout->entries()[static_cast<std::size_t>(id)].cols); };
  auto linear = [&](const LinearIds& l, double gain) { fill(l.w, gain / std::sqrt(fan_in(l.w))); };
  auto norm = [&](const NormIds& n) { p.view(n.g).setOnes(); };

  const double residual_gain = 1.0 / std::sqrt(2.0 * config.depth);
  linear(ids.patch_in, 1.0);
  fill(ids.pos, 0.1);
  linear(ids.t1, 1.0);
  linear(ids.t2, 1.0);
  for (const auto& blk : ids.blocks) {
    norm(blk.ln1);
    linear(blk.qkv, 1.0);
    linear(blk.proj, residual_gain);
    if (blk.frame) {
      norm(blk.lnf);
      linear(blk.fqkv, 1.0);
      if (!config.zero_init_frame_attention) linear(blk.fproj, residual_gain);
    }
    norm(blk.ln2);
    linear(blk.fc1, 1.0);
    linear(blk.fc2, residual_gain);
  }
  norm(ids.ln_out);
  linear(ids.out, 0.1);
  round_to_float(p.values);
  return p;
}

// ---------------------------------------------------------------------------
// Noise-level embedding

RowVec sinusoidal_embedding(int t, int dim) {
  if (dim <= 0 || dim % 2 != 0) throw std::invalid_argument("sinusoidal_embedding: dim must be positive and even");
  const int half = dim / 2;
  RowVec e(dim);
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    e(i) = std::sin(t * freq);
    e(half + i) = std::cos(t * freq);
  }
  return e;
}

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); }

double gelu_grad(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double th = std::tanh(u);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

struct NoiseEmbedTape {
  RowVec base;
  RowVec pre;
  RowVec hidden;
};

RowVec noise_embed_forward(const DenoiserParams& p, const NetIds& ids, int t, NoiseEmbedTape* tape) {
  if (t < 0 || t >= p.config.num_timesteps) {
    throw std::out_of_range("noise level " + std::to_string(t) + " outside [0, T)");
  }
  RowVec base = sinusoidal_embedding(t, p.config.noise_embed_dim);
  RowVec pre = base * p.view(ids.t1.w).transpose() + p.view(ids.t1.b);
  RowVec hidden = pre.unaryExpr([](double x) { return x * sigmoid(x); });
  RowVec out = hidden * p.view(ids.t2.w).transpose() + p.view(ids.t2.b);
  if (tape) *tape = {std::move(base), std::move(pre), std::move(hidden)};
  return out;
}

}  // namespace

RowVec embed_noise_level(const DenoiserParams& params, int t) {
  return noise_embed_forward(params, ids_for(params.config), t, nullptr);
}

// ---------------------------------------------------------------------------
// Forward / backward

struct NormTape {
  RowMat xhat;
  Eigen::VectorXd rstd;
};

struct AttnTape {
  NormTape norm;
  RowMat x_norm;
  RowMat q, k, v;
  AttentionState state;
  RowMat attended;
};

struct MlpTape {
  NormTape norm;
  RowMat x_norm;
  RowMat pre;
  RowMat act;
};

struct BlockTape {
  AttnTape spatial;
  bool has_frame = false;
  AttnTape frame;
  MlpTape mlp;
};

struct ForwardTape {
  int frames = 0;
  RowMat patches;
  std::vector<NoiseEmbedTape> noise;
  std::vector<BlockTape> blocks;
  NormTape out_norm;
  RowMat out_x_norm;
  FrameMask spatial_mask;
  FrameMask frame_mask;
  std::vector<Pose> poses;
};

namespace {

constexpr double kNormEps = 1e-5;

RowMat layer_norm(const RowMat& x, const RowVec& g, const RowVec& b, NormTape* tape) {
  const Eigen::Index n = x.rows();
  const double w = static_cast<double>(x.cols());
  RowMat xhat(x.rows(), x.cols());
  Eigen::VectorXd rstd(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mean = x.row(r).sum() / w;
    const double var = (x.row(r).array() - mean).square().sum() / w;
    rstd(r) = 1.0 / std::sqrt(var + kNormEps);
    xhat.row(r) = (x.row(r).array() - mean) * rstd(r);
  }
  RowMat y = xhat.array().rowwise() * g.array();
  y.rowwise() += b;
  if (tape) *tape = {std::move(xhat), std::move(rstd)};
  return y;
}

RowMat layer_norm_backward(const RowMat& dy, const RowVec& g, const NormTape& tape, Eigen::Ref<RowMat> dg,
                           Eigen::Ref<RowMat> db) {
  const double w = static_cast<double>(dy.cols());
  dg += (dy.array() * tape.xhat.array()).colwise().sum().matrix();
  db += dy.colwise().sum();
  const RowMat dxhat = dy.array().rowwise() * g.array();
  RowMat dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double m1 = dxhat.row(r).sum() / w;
    const double m2 = (dxhat.row(r).array() * tape.xhat.row(r).array()).sum() / w;
    dx.row(r) = tape.rstd(r) * (dxhat.row(r).array() - m1 - tape.xhat.row(r).array() * m2);
  }
  return dx;
}

RowMat linear(const RowMat& x, const Eigen::Map<const RowMat>& w, const Eigen::Map<const RowMat>& b) {
  RowMat y(x.rows(), w.rows());
  y.noalias() = x * w.transpose();
  y.rowwise() += b.row(0);
  return y;
}

/// Accumulates dW, db and returns dx.
RowMat linear_backward(const RowMat& dy, const RowMat& x, const Eigen::Map<const RowMat>& w, Eigen::Ref<RowMat> dw,
                       Eigen::Ref<RowMat> db) {
  dw.noalias() += dy.transpose() * x;
  db += dy.colwise().sum();
  RowMat dx(dy.rows(), w.cols());
  dx.noalias() = dy * w;
  return dx;
}

RowMat patchify(std::span<const Image* const> images, const DenoiserConfig& c) {
  const int g = c.grid();
  const int ps = c.patch_size;
  const int P = c.tokens_per_frame();
  RowMat x(static_cast<Eigen::Index>(images.size()) * P, c.patch_dim());
  for (std::size_t f = 0; f < images.size(); ++f) {
    const Image& img = *images[f];
    if (img.height != c.image_size || img.width != c.image_size) {
      throw std::invalid_argument("denoiser: image size does not match config");
    }
    for (int py = 0; py < g; ++py) {
      for (int px = 0; px < g; ++px) {
        const Eigen::Index row = static_cast<Eigen::Index>(f) * P + py * g + px;
        int col = 0;
        for (int dy = 0; dy < ps; ++dy) {
          for (int dx = 0; dx < ps; ++dx) {
            for (int ch = 0; ch < 3; ++ch) x(row, col++) = img.at(py * ps + dy, px * ps + dx, ch);
          }
        }
      }
    }
  }
  return x;
}

Image unpatchify_frame(const RowMat& y, int frame, const DenoiserConfig& c) {
  const int g = c.grid();
  const int ps = c.patch_size;
  const int P = c.tokens_per_frame();
  Image img(c.image_size, c.image_size);
  for (int py = 0; py < g; ++py) {
    for (int px = 0; px < g; ++px) {
      const Eigen::Index row = static_cast<Eigen::Index>(frame) * P + py * g + px;
      int col = 0;
      for (int dy = 0; dy < ps; ++dy) {
        for (int dx = 0; dx < ps; ++dx) {
          for (int ch = 0; ch < 3; ++ch) img.at(py * ps + dy, px * ps + dx, ch) = y(row, col++);
        }
      }
    }
  }
  return img;
}

struct ParamGrads {
  const ParamLayout* layout;
  std::vector<double>* g;
  Eigen::Map<RowMat> view(int id) {
    const auto& e = layout->entries().at(static_cast<std::size_t>(id));
    return Eigen::Map<RowMat>(g->data() + e.offset, e.rows, e.cols);
  }
};

struct Internal {
  bool skip_framewise = false;
};

/// One attention branch (norm, qkv, attention, output projection); returns the residual update.
RowMat attention_branch(const DenoiserParams& p, const RowMat& h, const NormIds& norm, const LinearIds& qkv_ids,
                        const LinearIds& proj_ids, const AttentionInputs& shape, AttnTape* tape,
                        AttentionState* state_out, RowMat* v_out) {
  const Eigen::Index W = p.config.width;
  NormTape nt;
  RowMat xn = layer_norm(h, p.view(norm.g).row(0), p.view(norm.b).row(0), tape ? &nt : nullptr);
  const RowMat qkv = linear(xn, p.view(qkv_ids.w), p.view(qkv_ids.b));
  RowMat q = qkv.leftCols(W);
  RowMat k = qkv.middleCols(W, W);
  RowMat v = qkv.rightCols(W);
  AttentionInputs in = shape;
  in.q = &q;
  in.k = &k;
  in.v = &v;
  AttentionState state;
  state.keep_probs = tape != nullptr;
  RowMat attended = attention_forward(in, &state);
  RowMat out = linear(attended, p.view(proj_ids.w), p.view(proj_ids.b));
  if (v_out) *v_out = v;
  if (tape) {
    tape->norm = std::move(nt);
    tape->x_norm = std::move(xn);
    tape->q = std::move(q);
    tape->k = std::move(k);
    tape->v = std::move(v);
    tape->attended = std::move(attended);
    tape->state = std::move(state);
  } else if (state_out) {
    *state_out = std::move(state);
  }
  if (tape && state_out) state_out->flops = tape->state.flops;
  return out;
}

RowMat attention_branch_backward(const DenoiserParams& p, ParamGrads& grads, const RowMat& d_out, const NormIds& norm,
                                 const LinearIds& qkv_ids, const LinearIds& proj_ids, const AttentionInputs& shape,
                                 const AttnTape& tape) {
  const Eigen::Index W = p.config.width;
  const RowMat d_att = linear_backward(d_out, tape.attended, p.view(proj_ids.w), grads.view(proj_ids.w),
                                       grads.view(proj_ids.b));
  AttentionInputs in = shape;
  in.q = &tape.q;
  in.k = &tape.k;
  in.v = &tape.v;
  const AttentionGrads ag = attention_backward(in, tape.state, d_att);
  RowMat d_qkv(d_out.rows(), 3 * W);
  d_qkv.leftCols(W) = ag.dq;
  d_qkv.middleCols(W, W) = ag.dk;
  d_qkv.rightCols(W) = ag.dv;
  const RowMat d_xn = linear_backward(d_qkv, tape.x_norm, p.view(qkv_ids.w), grads.view(qkv_ids.w),
                                      grads.view(qkv_ids.b));
  return layer_norm_backward(d_xn, p.view(norm.g).row(0), tape.norm, grads.view(norm.g), grads.view(norm.b));
}

ForwardResult forward_impl(const DenoiserParams& p, std::span<const NoisyFrame> frames, const ForwardOptions& opt,
                           const Internal& internal) {
  const DenoiserConfig& c = p.config;
  const NetIds ids = ids_for(c);
  const Eigen::Index F = static_cast<Eigen::Index>(frames.size());
  const int P = c.tokens_per_frame();
  ForwardResult result;
  if (F == 0) return result;
  ForwardTape* tape = opt.tape;
  if (tape && opt.context && std::any_of(opt.context->begin(), opt.context->end(),
                                         [](const auto& l) { return !l.empty(); })) {
    throw std::invalid_argument("denoiser: cached context is not supported while recording a tape");
  }
  if (opt.context && static_cast<int>(opt.context->size()) != c.num_framewise_layers()) {
    throw std::invalid_argument("denoiser: context must have one entry list per frame-wise layer");
  }

  std::vector<const Image*> images;
  std::vector<Pose> poses;
  for (const auto& f : frames) {
    images.push_back(&f.image);
    poses.push_back(f.pose);
  }
  RowMat x = patchify(images, c);
  RowMat h = linear(x, p.view(ids.patch_in.w), p.view(ids.patch_in.b));
  const auto pos = p.view(ids.pos);
  if (tape) {
    tape->frames = static_cast<int>(F);
    tape->noise.assign(static_cast<std::size_t>(F), {});
    tape->blocks.assign(static_cast<std::size_t>(c.depth), {});
    tape->poses = poses;
  }
  for (Eigen::Index f = 0; f < F; ++f) {
    const RowVec temb = noise_embed_forward(p, ids, frames[static_cast<std::size_t>(f)].timestep,
                                            tape ? &tape->noise[static_cast<std::size_t>(f)] : nullptr);
    auto rows = h.middleRows(f * P, P);
    rows += pos;
    rows.rowwise() += temb;
  }
  if (tape) tape->patches = std::move(x);

  FrameMask spatial_mask = FrameMask::Zero(F, F);
  spatial_mask.diagonal().setConstant(true);
  FrameMask frame_mask;
  if (opt.mask) {
    if (opt.mask->rows() != F || opt.mask->cols() != F) throw std::invalid_argument("denoiser: mask shape");
    frame_mask = *opt.mask;
  } else {
    std::vector<int> positions(static_cast<std::size_t>(F));
    std::iota(positions.begin(), positions.end(), 0);
    frame_mask = build_frame_causal_mask(positions, positions, opt.causal);
  }

  AttentionInputs spatial;
  spatial.tokens_per_frame = P;
  spatial.heads = c.heads;
  spatial.head_dim = c.head_dim;
  spatial.cape = false;
  spatial.mask = &spatial_mask;

  AttentionInputs framewise = spatial;
  framewise.cape = c.cape;
  framewise.poses = poses;
  framewise.mask = &frame_mask;

  if (opt.capture_kv) result.captured_kv.assign(static_cast<std::size_t>(c.num_framewise_layers()), {});
  const int last_frame_block = c.framewise_attention_at.empty() ? -1 : c.framewise_attention_at.back();

  for (int b = 0; b < c.depth; ++b) {
    const BlockIds& blk = ids.blocks[static_cast<std::size_t>(b)];
    BlockTape* bt = tape ? &tape->blocks[static_cast<std::size_t>(b)] : nullptr;
    h += attention_branch(p, h, blk.ln1, blk.qkv, blk.proj, spatial, bt ? &bt->spatial : nullptr, nullptr, nullptr);
    if (blk.frame && !internal.skip_framewise) {
      const int layer = c.framewise_layer(b);
      AttentionInputs fw = framewise;
      if (opt.context) fw.context = (*opt.context)[static_cast<std::size_t>(layer)];
      AttentionState state;
      RowMat v;
      h += attention_branch(p, h, blk.lnf, blk.fqkv, blk.fproj, fw, bt ? &bt->frame : nullptr, &state, &v);
      if (bt) bt->has_frame = true;
      const AttentionState& st = bt ? bt->frame.state : state;
      result.framewise_flops += st.flops;
      if (opt.capture_kv) {
        auto& layer_kv = result.captured_kv[static_cast<std::size_t>(layer)];
        for (Eigen::Index f = 0; f < F; ++f) {
          layer_kv.emplace_back(st.k_encoded.middleRows(f * P, P), v.middleRows(f * P, P));
        }
      }
      if (opt.capture_only && b == last_frame_block) return result;
    }
    NormTape nt;
    RowMat xn = layer_norm(h, p.view(blk.ln2.g).row(0), p.view(blk.ln2.b).row(0), bt ? &nt : nullptr);
    RowMat pre = linear(xn, p.view(blk.fc1.w), p.view(blk.fc1.b));
    RowMat act = pre.unaryExpr([](double v) { return gelu(v); });
    h += linear(act, p.view(blk.fc2.w), p.view(blk.fc2.b));
    if (bt) bt->mlp = {std::move(nt), std::move(xn), std::move(pre), std::move(act)};
  }

  NormTape nt;
  RowMat xn = layer_norm(h, p.view(ids.ln_out.g).row(0), p.view(ids.ln_out.b).row(0), tape ? &nt : nullptr);
  const RowMat y = linear(xn, p.view(ids.out.w), p.view(ids.out.b));
  if (tape) {
    tape->out_norm = std::move(nt);
    tape->out_x_norm = std::move(xn);
    tape->spatial_mask = spatial_mask;
    tape->frame_mask = frame_mask;
  }
  for (Eigen::Index f = 0; f < F; ++f) result.eps.push_back(unpatchify_frame(y, static_cast<int>(f), c));
  return result;
}

/// d loss / d params given d loss / d eps_hat per frame.
void backward_impl(const DenoiserParams& p, const ForwardTape& tape, std::span<const Image> d_eps,
                   std::vector<double>& grad) {
  const DenoiserConfig& c = p.config;
  const NetIds ids = ids_for(c);
  const int P = c.tokens_per_frame();
  const Eigen::Index F = tape.frames;
  grad.assign(p.values.size(), 0.0);
  ParamGrads grads{p.layout.get(), &grad};

  std::vector<const Image*> d_images;
  for (const auto& d : d_eps) d_images.push_back(&d);
  const RowMat dy = patchify(d_images, c);

  RowMat dxn = linear_backward(dy, tape.out_x_norm, p.view(ids.out.w), grads.view(ids.out.w), grads.view(ids.out.b));
  RowMat dh = layer_norm_backward(dxn, p.view(ids.ln_out.g).row(0), tape.out_norm, grads.view(ids.ln_out.g),
                                  grads.view(ids.ln_out.b));

  AttentionInputs spatial;
  spatial.tokens_per_frame = P;
  spatial.heads = c.heads;
  spatial.head_dim = c.head_dim;
  spatial.cape = false;
  spatial.mask = &tape.spatial_mask;
  AttentionInputs framewise = spatial;
  framewise.cape = c.cape;
  framewise.poses = tape.poses;
  framewise.mask = &tape.frame_mask;

  for (int b = c.depth - 1; b >= 0; --b) {
    const BlockIds& blk = ids.blocks[static_cast<std::size_t>(b)];
    const BlockTape& bt = tape.blocks[static_cast<std::size_t>(b)];
    // MLP branch
    const RowMat d_act = linear_backward(dh, bt.mlp.act, p.view(blk.fc2.w), grads.view(blk.fc2.w),
                                         grads.view(blk.fc2.b));
    const RowMat d_pre = d_act.array() * bt.mlp.pre.unaryExpr([](double v) { return gelu_grad(v); }).array();
    const RowMat d_xn2 = linear_backward(d_pre, bt.mlp.x_norm, p.view(blk.fc1.w), grads.view(blk.fc1.w),
                                         grads.view(blk.fc1.b));
    dh += layer_norm_backward(d_xn2, p.view(blk.ln2.g).row(0), bt.mlp.norm, grads.view(blk.ln2.g),
                              grads.view(blk.ln2.b));
    if (bt.has_frame) {
      dh += attention_branch_backward(p, grads, dh, blk.lnf, blk.fqkv, blk.fproj, framewise, bt.frame);
    }
    dh += attention_branch_backward(p, grads, dh, blk.ln1, blk.qkv, blk.proj, spatial, bt.spatial);
  }

  // Token embedding: patches, positions, noise embedding.
  linear_backward(dh, tape.patches, p.view(ids.patch_in.w), grads.view(ids.patch_in.w), grads.view(ids.patch_in.b));
  auto d_pos = grads.view(ids.pos);
  for (Eigen::Index f = 0; f < F; ++f) {
    const auto rows = dh.middleRows(f * P, P);
    d_pos += rows;
    const RowVec d_temb = rows.colwise().sum();
    const NoiseEmbedTape& nt = tape.noise[static_cast<std::size_t>(f)];
    grads.view(ids.t2.w).noalias() += d_temb.transpose() * nt.hidden;
    grads.view(ids.t2.b) += d_temb;
    RowVec d_hidden = d_temb * p.view(ids.t2.w);
    for (Eigen::Index i = 0; i < d_hidden.size(); ++i) {
      const double s = sigmoid(nt.pre(i));
      d_hidden(i) *= s * (1.0 + nt.pre(i) * (1.0 - s));
    }
    grads.view(ids.t1.w).noalias() += d_hidden.transpose() * nt.base;
    grads.view(ids.t1.b) += d_hidden;
  }
}

}  // namespace

ForwardResult denoiser_forward(const DenoiserParams& params, std::span<const NoisyFrame> frames,
                               const ForwardOptions& options) {
  return forward_impl(params, frames, options, Internal{});
}

std::vector<Image> denoiser_forward_spatial_only(const DenoiserParams& params, std::span<const NoisyFrame> frames) {
  Internal internal;
  internal.skip_framewise = true;
  return forward_impl(params, frames, ForwardOptions{}, internal).eps;
}

LossResult loss_causal(const DenoiserParams& params, std::span<const TrainingFrame> batch, const NoiseSchedule& schedule,
                       bool causal, bool with_grad, const FrameMask* mask) {
  if (batch.empty()) throw std::invalid_argument("loss_causal: empty batch");
  std::vector<NoisyFrame> frames;
  frames.reserve(batch.size());
  double weight_sum = 0.0;
  for (const auto& tf : batch) {
    frames.push_back({add_noise(tf.clean, tf.timestep, tf.eps, schedule), tf.pose, tf.timestep});
    weight_sum += tf.loss_weight;
  }
  if (!(weight_sum > 0.0)) throw std::invalid_argument("loss_causal: loss weights must sum to a positive value");

  ForwardTape tape;
  ForwardOptions opt;
  opt.causal = causal;
  opt.mask = mask;
  opt.tape = with_grad ? &tape : nullptr;
  const ForwardResult fr = denoiser_forward(params, frames, opt);

  LossResult out;
  std::vector<Image> d_eps;
  for (std::size_t f = 0; f < batch.size(); ++f) {
    const Image& pred = fr.eps[f];
    const Image& target = batch[f].eps;
    double sse = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double d = pred.data[i] - target.data[i];
      sse += d * d;
    }
    const double n = static_cast<double>(pred.size());
    out.per_frame.push_back(sse / n);
    out.loss += batch[f].loss_weight * sse / n / weight_sum;
    if (with_grad) {
      Image d(pred.height, pred.width);
      const double scale = 2.0 * batch[f].loss_weight / (n * weight_sum);
      for (std::size_t i = 0; i < pred.size(); ++i) d.data[i] = scale * (pred.data[i] - target.data[i]);
      d_eps.push_back(std::move(d));
    }
  }
  if (with_grad) backward_impl(params, tape, d_eps, out.grad);
  return out;
}

// ---------------------------------------------------------------------------
// Optimization

OptimizerState OptimizerState::init(const DenoiserParams& params) {
  OptimizerState s;
  s.m.assign(params.values.size(), 0.0);
  s.v.assign(params.values.size(), 0.0);
  s.ema = params.values;
  return s;
}

StepResult train_step(DenoiserParams& params, OptimizerState& state, std::span<const TrainingFrame> batch,
                      const NoiseSchedule& schedule, const OptimizerConfig& opt, bool causal, const FrameMask* mask) {
  LossResult lr = loss_causal(params, batch, schedule, causal, true, mask);
  if (!std::isfinite(lr.loss)) {
    std::ostringstream os;
    os << "non-finite loss at step " << state.step << " (per-frame:";
    for (double v : lr.per_frame) os << ' ' << v;
    os << "; timesteps:";
    for (const auto& f : batch) os << ' ' << f.timestep;
    os << ')';
    throw NumericError(os.str());
  }
  double norm2 = 0.0;
  for (double g : lr.grad) norm2 += g * g;
  const double grad_norm = std::sqrt(norm2);
  if (!std::isfinite(grad_norm)) throw NumericError("non-finite gradient at step " + std::to_string(state.step));
  const double clip = (opt.grad_clip > 0.0 && grad_norm > opt.grad_clip) ? opt.grad_clip / grad_norm : 1.0;

  const std::int64_t t = state.step + 1;
  const double warm = opt.warmup_steps > 0 ? std::min(1.0, static_cast<double>(t) / opt.warmup_steps) : 1.0;
  const double rate = opt.learning_rate * warm;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.values.size(); ++i) {
    const double g = lr.grad[i] * clip;
    state.m[i] = static_cast<float>(opt.beta1 * state.m[i] + (1.0 - opt.beta1) * g);
    state.v[i] = static_cast<float>(opt.beta2 * state.v[i] + (1.0 - opt.beta2) * g * g);
    const double update = rate * (state.m[i] / bc1) / (std::sqrt(state.v[i] / bc2) + opt.epsilon);
    params.values[i] = static_cast<float>(params.values[i] - update);
    state.ema[i] = static_cast<float>(opt.ema_decay * state.ema[i] + (1.0 - opt.ema_decay) * params.values[i]);
  }
  state.step = t;
  return {lr.loss, grad_norm, rate};
}

DenoiserParams with_ema(const DenoiserParams& params, const OptimizerState& state) {
  DenoiserParams out = params;
  out.values = state.ema;
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[8] = {'C', 'N', 'V', 'S', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("checkpoint: truncated file");
  return v;
}

struct ArrayRef {
  std::string name;
  std::uint64_t rows;
  std::uint64_t cols;
  const double* data;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& header, const DenoiserParams& params,
                     const OptimizerState* optimizer) {
  nlohmann::json h = header;
  h["denoiser"] = params.config;
  h["format"] = "causnvs-checkpoint";
  h["has_optimizer"] = optimizer != nullptr;
  if (optimizer) h["optimizer_step"] = optimizer->step;
  const std::string hs = h.dump();

  std::vector<ArrayRef> arrays;
  auto add_set = [&](const std::string& prefix, const std::vector<double>& values) {
    for (const auto& e : params.layout->entries()) {
      arrays.push_back({prefix + e.name, static_cast<std::uint64_t>(e.rows), static_cast<std::uint64_t>(e.cols),
                        values.data() + e.offset});
    }
  };
  add_set("params/", params.values);
  if (optimizer) {
    add_set("ema/", optimizer->ema);
    add_set("adam_m/", optimizer->m);
    add_set("adam_v/", optimizer->v);
  }

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kVersion);
  put<std::uint64_t>(os, hs.size());
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(arrays.size()));
  std::uint64_t offset = 0;
  for (const auto& a : arrays) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(a.name.size()));
    os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
    put<std::uint64_t>(os, a.rows);
    put<std::uint64_t>(os, a.cols);
    put<std::uint64_t>(os, offset);
    offset += a.rows * a.cols * sizeof(float);
  }
  std::vector<float> buf;
  for (const auto& a : arrays) {
    buf.resize(a.rows * a.cols);
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(a.data[i]);
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!os) throw IoError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw IoError("checkpoint: bad magic");
  if (get<std::uint32_t>(is) != kVersion) throw IoError("checkpoint: unsupported version");
  const auto hlen = get<std::uint64_t>(is);
  if (hlen > (1u << 26)) throw IoError("checkpoint: header too large");
  std::string hs(hlen, '\0');
  is.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!is) throw IoError("checkpoint: truncated header");

  Checkpoint ck;
  try {
    ck.header = nlohmann::json::parse(hs);
    ck.params.config = ck.header.at("denoiser").get<DenoiserConfig>();
    ck.params.config.validate();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: bad header: ") + e.what());
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint: bad model config: ") + e.what());
  }
  ck.params.layout = make_layout(ck.params.config);
  ck.params.values.assign(ck.params.layout->total(), 0.0);

  struct IndexEntry {
    std::string name;
    std::uint64_t rows, cols, offset;
  };
  const auto n = get<std::uint32_t>(is);
  std::vector<IndexEntry> index;
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto len = get<std::uint32_t>(is);
    if (len > 4096) throw IoError("checkpoint: bad array name");
    std::string name(len, '\0');
    is.read(name.data(), len);
    IndexEntry e{name, get<std::uint64_t>(is), get<std::uint64_t>(is), get<std::uint64_t>(is)};
    index.push_back(std::move(e));
  }
  const auto data_start = is.tellg();

  const bool has_opt = ck.header.value("has_optimizer", false);
  OptimizerState opt;
  if (has_opt) {
    opt.step = ck.header.value("optimizer_step", std::int64_t{0});
    opt.m.assign(ck.params.values.size(), 0.0);
    opt.v.assign(ck.params.values.size(), 0.0);
    opt.ema.assign(ck.params.values.size(), 0.0);
  }
  std::map<std::string, std::vector<double>*> sets = {{"params/", &ck.params.values}};
  if (has_opt) {
    sets["ema/"] = &opt.ema;
    sets["adam_m/"] = &opt.m;
    sets["adam_v/"] = &opt.v;
  }
  std::set<std::string> loaded;
  std::vector<float> buf;
  for (const auto& e : index) {
    const auto slash = e.name.find('/');
    if (slash == std::string::npos) continue;
    auto it = sets.find(e.name.substr(0, slash + 1));
    if (it == sets.end()) continue;
    int id;
    try {
      id = ck.params.layout->index(e.name.substr(slash + 1));
    } catch (const std::out_of_range&) {
      throw IoError("checkpoint: unexpected array " + e.name);
    }
    const auto& info = ck.params.layout->entries()[static_cast<std::size_t>(id)];
    if (e.rows != static_cast<std::uint64_t>(info.rows) || e.cols != static_cast<std::uint64_t>(info.cols)) {
      throw IoError("checkpoint: shape mismatch for " + e.name);
    }
    buf.resize(info.size());
    is.seekg(data_start + static_cast<std::streamoff>(e.offset));
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!is) throw IoError("checkpoint: truncated data for " + e.name);
    for (std::size_t i = 0; i < buf.size(); ++i) (*it->second)[info.offset + i] = buf[i];
    loaded.insert(e.name);
  }
  for (const auto& [prefix, _] : sets) {
    for (const auto& info : ck.params.layout->entries()) {
      if (!loaded.count(prefix + info.name)) throw IoError("checkpoint: missing array " + prefix + info.name);
    }
  }
  if (has_opt) ck.optimizer = std::move(opt);
  return ck;
}

}  // namespace causnvs
