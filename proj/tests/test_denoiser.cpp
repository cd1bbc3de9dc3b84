#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <fstream>
#include <random>

#include "causnvs/denoiser.hpp"
#include "causnvs/errors.hpp"

using namespace causnvs;

namespace {

DenoiserConfig tiny_config() {
  DenoiserConfig c;
  c.image_size = 8;
  c.patch_size = 2;
  c.width = 16;
  c.heads = 2;
  c.head_dim = 8;
  c.depth = 2;
  c.framewise_attention_at = {0, 1};
  c.noise_embed_dim = 8;
  c.mlp_ratio = 2;
  c.zero_init_frame_attention = false;
  return c;
}

Pose random_pose(Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Vec3 axis(n(rng), n(rng), n(rng));
  Pose p;
  p.rotation = axis_angle(axis.normalized(), n(rng));
  p.translation = Vec3(n(rng), n(rng), n(rng)) * 0.5;
  return p;
}

std::vector<TrainingFrame> random_batch(const DenoiserConfig& c, int frames, Rng& rng) {
  std::uniform_int_distribution<int> t(0, c.num_timesteps - 1);
  std::vector<TrainingFrame> batch;
  for (int f = 0; f < frames; ++f) {
    TrainingFrame tf;
    tf.clean = gaussian_image(c.image_size, c.image_size, rng);
    for (auto& v : tf.clean.data) v = std::tanh(v);
    tf.eps = gaussian_image(c.image_size, c.image_size, rng);
    tf.pose = random_pose(rng);
    tf.timestep = t(rng);
    batch.push_back(std::move(tf));
  }
  return batch;
}

}  // namespace

TEST(Denoiser, GradientMatchesFiniteDifferences) {
  const auto c = tiny_config();
  auto params = DenoiserParams::init(c, 3);
  Rng rng(11);
  const auto batch = random_batch(c, 3, rng);
  const auto schedule = make_schedule(ScheduleKind::Cosine, c.num_timesteps);
  const auto lr = loss_causal(params, batch, schedule, true, true);
  std::uniform_int_distribution<std::size_t> pick(0, params.values.size() - 1);
  int checked = 0;
  int bad = 0;
  const double h = 1e-5;
  for (int i = 0; i < 150; ++i) {
    const std::size_t idx = pick(rng);
    const double orig = params.values[idx];
    params.values[idx] = orig + h;
    const double lp = loss_causal(params, batch, schedule, true, false).loss;
    params.values[idx] = orig - h;
    const double lm = loss_causal(params, batch, schedule, true, false).loss;
    params.values[idx] = orig;
    const double fd = (lp - lm) / (2 * h);
    const double an = lr.grad[idx];
    const double err = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
    if (err > 1e-3) {
      ++bad;
      ADD_FAILURE() << params.layout->entries().size() << " idx " << idx << " fd " << fd << " an " << an;
    }
    ++checked;
  }
  EXPECT_EQ(bad, 0);
  EXPECT_GE(checked, 100);
}

namespace {

// Straight-line forward: explicit loops over tokens, heads and blocks.
struct Ref {
  const DenoiserParams& p;
  Eigen::MatrixXd get(const std::string& name) const { return p.view(p.layout->index(name)); }
  Eigen::VectorXd vec(const std::string& name) const { return get(name).row(0).transpose(); }

  Eigen::MatrixXd lin(const Eigen::MatrixXd& x, const std::string& name) const {
    return (x * get(name + ".w").transpose()).rowwise() + vec(name + ".b").transpose();
  }

  Eigen::MatrixXd norm(const Eigen::MatrixXd& x, const std::string& name) const {
    const Eigen::VectorXd g = vec(name + ".g"), b = vec(name + ".b");
    Eigen::MatrixXd y(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      double mean = 0.0, var = 0.0;
      for (Eigen::Index c = 0; c < x.cols(); ++c) mean += x(r, c);
      mean /= x.cols();
      for (Eigen::Index c = 0; c < x.cols(); ++c) var += (x(r, c) - mean) * (x(r, c) - mean);
      var /= x.cols();
      for (Eigen::Index c = 0; c < x.cols(); ++c) y(r, c) = (x(r, c) - mean) / std::sqrt(var + 1e-5) * g[c] + b[c];
    }
    return y;
  }

  // visible(i, j): query frame i may attend key frame j. Empty poses means no CaPE.
  Eigen::MatrixXd attend(const Eigen::MatrixXd& h, const std::string& name, int frames,
                         const std::function<bool(int, int)>& visible, const std::vector<Pose>& poses) const {
    const DenoiserConfig& c = p.config;
    const int P = c.tokens_per_frame(), W = c.width, hd = c.head_dim;
    const Eigen::MatrixXd qkv = lin(norm(h, name == "attn" ? ln_spatial : ln_frame), prefix + name + ".qkv");
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(h.rows(), W);
    for (int head = 0; head < c.heads; ++head) {
      for (int fi = 0; fi < frames; ++fi) {
        for (int a = 0; a < P; ++a) {
          Eigen::VectorXd q = qkv.row(fi * P + a).segment(head * hd, hd).transpose();
          if (!poses.empty()) q = phi(inverse(poses[fi]), hd).transpose() * q;
          std::vector<double> s;
          std::vector<int> rows;
          for (int fj = 0; fj < frames; ++fj) {
            if (!visible(fi, fj)) continue;
            for (int b = 0; b < P; ++b) {
              Eigen::VectorXd k = qkv.row(fj * P + b).segment(W + head * hd, hd).transpose();
              if (!poses.empty()) k = phi(poses[fj], hd) * k;
              s.push_back(q.dot(k) / std::sqrt(double(hd)));
              rows.push_back(fj * P + b);
            }
          }
          const double m = *std::max_element(s.begin(), s.end());
          double z = 0.0;
          for (double& v : s) z += (v = std::exp(v - m));
          for (std::size_t i = 0; i < s.size(); ++i) {
            out.row(fi * P + a).segment(head * hd, hd) += s[i] / z * qkv.row(rows[i]).segment(2 * W + head * hd, hd);
          }
        }
      }
    }
    return lin(out, prefix + name + ".proj");
  }

  std::string prefix, ln_spatial, ln_frame;

  std::vector<Image> forward(const std::vector<NoisyFrame>& frames, bool causal) {
    const DenoiserConfig& c = p.config;
    const int F = static_cast<int>(frames.size()), P = c.tokens_per_frame(), g = c.grid(), ps = c.patch_size;
    Eigen::MatrixXd x(F * P, c.patch_dim());
    for (int f = 0; f < F; ++f) {
      for (int py = 0; py < g; ++py) {
        for (int px = 0; px < g; ++px) {
          int col = 0;
          for (int dy = 0; dy < ps; ++dy) {
            for (int dx = 0; dx < ps; ++dx) {
              for (int ch = 0; ch < 3; ++ch) x(f * P + py * g + px, col++) = frames[f].image.at(py * ps + dy, px * ps + dx, ch);
            }
          }
        }
      }
    }
    Eigen::MatrixXd h = lin(x, "patch_in");
    const Eigen::MatrixXd pos = get("pos_embed");
    for (int f = 0; f < F; ++f) {
      const int half = c.noise_embed_dim / 2;
      Eigen::RowVectorXd base(c.noise_embed_dim);
      for (int i = 0; i < half; ++i) {
        const double w = std::pow(10000.0, -double(i) / half);
        base[i] = std::sin(frames[f].timestep * w);
        base[half + i] = std::cos(frames[f].timestep * w);
      }
      Eigen::MatrixXd e = lin(base, "noise_embed.fc1");
      for (Eigen::Index i = 0; i < e.size(); ++i) e(i) = e(i) / (1.0 + std::exp(-e(i)));
      e = lin(e, "noise_embed.fc2");
      for (int tok = 0; tok < P; ++tok) h.row(f * P + tok) += pos.row(tok) + e.row(0);
    }
    std::vector<Pose> poses;
    for (const auto& f : frames) poses.push_back(f.pose);
    for (int b = 0; b < c.depth; ++b) {
      prefix = "blocks." + std::to_string(b) + ".";
      ln_spatial = prefix + "ln1";
      ln_frame = prefix + "frame.ln";
      h += attend(h, "attn", F, [](int i, int j) { return i == j; }, {});
      if (c.has_framewise(b)) {
        h += attend(h, "frame", F, [&](int i, int j) { return !causal || j <= i; }, poses);
      }
      Eigen::MatrixXd a = lin(norm(h, prefix + "ln2"), prefix + "mlp.fc1");
      for (Eigen::Index i = 0; i < a.size(); ++i) {
        const double v = a(i);
        a(i) = 0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (v + 0.044715 * v * v * v)));
      }
      h += lin(a, prefix + "mlp.fc2");
    }
    const Eigen::MatrixXd y = lin(norm(h, "ln_out"), "out");
    std::vector<Image> out;
    for (int f = 0; f < F; ++f) {
      Image img(c.image_size, c.image_size);
      for (int py = 0; py < g; ++py) {
        for (int px = 0; px < g; ++px) {
          int col = 0;
          for (int dy = 0; dy < ps; ++dy) {
            for (int dx = 0; dx < ps; ++dx) {
              for (int ch = 0; ch < 3; ++ch) img.at(py * ps + dy, px * ps + dx, ch) = y(f * P + py * g + px, col++);
            }
          }
        }
      }
      out.push_back(img);
    }
    return out;
  }
};

std::vector<NoisyFrame> noisy_frames(const DenoiserConfig& c, int n, Rng& rng) {
  std::vector<NoisyFrame> frames;
  std::uniform_int_distribution<int> t(0, c.num_timesteps - 1);
  for (int i = 0; i < n; ++i) frames.push_back({gaussian_image(c.image_size, c.image_size, rng), random_pose(rng), t(rng)});
  return frames;
}

double max_diff(const Image& a, const Image& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace

TEST(Denoiser, NoiseEmbedding) {
  const RowVec e0 = sinusoidal_embedding(0, 8);
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(e0[i], 0.0);
    EXPECT_EQ(e0[4 + i], 1.0);
  }
  const double w[4] = {1.0, 0.1, 0.01, 0.001};
  for (int t : {1, 2}) {
    const RowVec e = sinusoidal_embedding(t, 8);
    for (int i = 0; i < 4; ++i) {
      EXPECT_NEAR(e[i], std::sin(t * w[i]), 1e-12);
      EXPECT_NEAR(e[4 + i], std::cos(t * w[i]), 1e-12);
    }
  }
  const auto c = tiny_config();
  const auto params = DenoiserParams::init(c, 1);
  EXPECT_EQ(embed_noise_level(params, 5), embed_noise_level(params, 5));
  EXPECT_GT((embed_noise_level(params, 0) - embed_noise_level(params, c.num_timesteps - 1)).norm(), 0.0);
  EXPECT_THROW(embed_noise_level(params, c.num_timesteps), std::out_of_range);
  EXPECT_THROW(embed_noise_level(params, -1), std::out_of_range);
}

TEST(Denoiser, MatchesStraightLineReference) {
  DenoiserConfig c = tiny_config();
  c.image_size = 16;
  c.patch_size = 4;
  c.depth = 3;
  c.framewise_attention_at = {1, 2};
  const auto params = DenoiserParams::init(c, 21);
  Rng rng(22);
  const auto frames = noisy_frames(c, 2, rng);
  for (bool causal : {true, false}) {
    ForwardOptions opt;
    opt.causal = causal;
    const auto got = denoiser_forward(params, frames, opt).eps;
    Ref ref{params, {}, {}, {}};
    const auto expect = ref.forward(frames, causal);
    for (int f = 0; f < 2; ++f) EXPECT_LT(max_diff(got[f], expect[f]), 1e-5);
  }
}

TEST(Denoiser, ZeroInitEqualsSpatialOnly) {
  DenoiserConfig c = tiny_config();
  c.zero_init_frame_attention = true;
  const auto params = DenoiserParams::init(c, 4);
  Rng rng(5);
  for (int n : {1, 3}) {
    const auto frames = noisy_frames(c, n, rng);
    const auto full = denoiser_forward(params, frames).eps;
    const auto spatial = denoiser_forward_spatial_only(params, frames);
    for (int f = 0; f < n; ++f) EXPECT_EQ(full[f].data, spatial[f].data);
  }
  const auto proj = params.view(params.layout->index("blocks.0.frame.proj.w"));
  EXPECT_EQ(proj.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Denoiser, CausalForward) {
  const auto c = tiny_config();
  const auto params = DenoiserParams::init(c, 6);
  Rng rng(7);
  auto frames = noisy_frames(c, 3, rng);
  const auto base = denoiser_forward(params, frames).eps;
  auto changed = frames;
  changed[1].image = gaussian_image(c.image_size, c.image_size, rng);
  changed[2].timestep = (changed[2].timestep + 7) % c.num_timesteps;
  const auto out = denoiser_forward(params, changed).eps;
  EXPECT_EQ(out[0].data, base[0].data);
  EXPECT_GT(max_diff(out[1], base[1]), 1e-6);
  ForwardOptions full;
  full.causal = false;
  EXPECT_GT(max_diff(denoiser_forward(params, changed, full).eps[0], denoiser_forward(params, frames, full).eps[0]), 1e-6);
}

TEST(Denoiser, LossTermsDependOnlyOnEarlierFrames) {
  const auto c = tiny_config();
  const auto params = DenoiserParams::init(c, 8);
  const auto schedule = make_schedule(ScheduleKind::Cosine, c.num_timesteps);
  Rng rng(9);
  const auto batch = random_batch(c, 4, rng);
  const auto base = loss_causal(params, batch, schedule, true, false);
  for (int j = 0; j < 4; ++j) {
    auto moved = batch;
    for (auto& v : moved[j].clean.data) v += 1e-3;
    const auto out = loss_causal(params, moved, schedule, true, false);
    for (int i = 0; i < 4; ++i) {
      const double d = (out.per_frame[i] - base.per_frame[i]) / 1e-3;
      if (i < j) {
        EXPECT_EQ(d, 0.0) << "term " << i << " frame " << j;
      } else if (i == j) {
        EXPECT_NE(d, 0.0);
      }
    }
  }
}

TEST(Denoiser, LossEdgeCases) {
  DenoiserConfig c = tiny_config();
  c.image_size = 16;
  auto params = DenoiserParams::init(c, 10);
  params.view(params.layout->index("out.w")).setZero();
  params.view(params.layout->index("out.b")).setZero();
  const auto schedule = make_schedule(ScheduleKind::Cosine, c.num_timesteps);
  Rng rng(11);
  auto batch = random_batch(c, 8, rng);
  const auto zero_pred = loss_causal(params, batch, schedule, true, false);
  EXPECT_NEAR(zero_pred.loss, 1.0, 0.05);
  for (auto& f : batch) f.eps = Image(c.image_size, c.image_size);
  EXPECT_EQ(loss_causal(params, batch, schedule, true, false).loss, 0.0);
  for (auto& f : batch) f.loss_weight = 0.0;
  EXPECT_THROW(loss_causal(params, batch, schedule, true, false), std::invalid_argument);
}

TEST(Denoiser, OptimizerEdgeCases) {
  const auto c = tiny_config();
  const auto schedule = make_schedule(ScheduleKind::Cosine, c.num_timesteps);
  Rng rng(12);
  const auto batch = random_batch(c, 2, rng);
  auto params = DenoiserParams::init(c, 13);
  const auto init = params.values;
  auto state = OptimizerState::init(params);
  OptimizerConfig frozen;
  frozen.learning_rate = 0.0;
  frozen.ema_decay = 1.0;
  for (int i = 0; i < 3; ++i) train_step(params, state, batch, schedule, frozen, true);
  EXPECT_EQ(params.values, init);

  OptimizerConfig moving;
  moving.learning_rate = 1e-3;
  moving.warmup_steps = 0;
  moving.ema_decay = 1.0;
  for (int i = 0; i < 3; ++i) train_step(params, state, batch, schedule, moving, true);
  EXPECT_NE(params.values, init);
  EXPECT_EQ(state.ema, init);
  EXPECT_EQ(with_ema(params, state).values, init);
}

TEST(Denoiser, DeterministicTraining) {
  const auto c = tiny_config();
  const auto schedule = make_schedule(ScheduleKind::Cosine, c.num_timesteps);
  auto run = [&] {
    auto params = DenoiserParams::init(c, 14);
    auto state = OptimizerState::init(params);
    Rng rng(15);
    OptimizerConfig opt;
    opt.learning_rate = 1e-3;
    opt.warmup_steps = 2;
    std::vector<double> losses;
    for (int i = 0; i < 10; ++i) losses.push_back(train_step(params, state, random_batch(c, 2, rng), schedule, opt, true).loss);
    return losses;
  };
  EXPECT_EQ(run(), run());
}

TEST(Denoiser, SmokeTrainingOnRepeatedBatch) {
  const auto c = tiny_config();
  const auto schedule = make_schedule(ScheduleKind::Cosine, c.num_timesteps);
  Rng rng(16);
  const auto batch = random_batch(c, 2, rng);
  auto params = DenoiserParams::init(c, 17);
  auto state = OptimizerState::init(params);
  OptimizerConfig opt;
  opt.learning_rate = 3e-3;
  opt.warmup_steps = 10;
  std::vector<double> losses;
  for (int i = 0; i < 200; ++i) losses.push_back(train_step(params, state, batch, schedule, opt, true).loss);
  EXPECT_LT(losses.back(), 0.5 * losses.front());
  EXPECT_TRUE(params.all_finite());
}

TEST(Denoiser, CheckpointRoundTrip) {
  const auto c = tiny_config();
  auto params = DenoiserParams::init(c, 18);
  auto state = OptimizerState::init(params);
  const auto schedule = make_schedule(ScheduleKind::Cosine, c.num_timesteps);
  Rng rng(19);
  OptimizerConfig opt;
  opt.warmup_steps = 0;
  train_step(params, state, random_batch(c, 2, rng), schedule, opt, true);
  const auto dir = std::filesystem::temp_directory_path() / "causnvs_test_ckpt";
  std::filesystem::create_directories(dir);
  const auto path = dir / "a.ckpt";
  save_checkpoint(path, {{"step", 1}}, params, &state);
  const auto ck = load_checkpoint(path);
  EXPECT_EQ(ck.header.at("step"), 1);
  EXPECT_EQ(ck.params.values, params.values);
  ASSERT_TRUE(ck.optimizer.has_value());
  EXPECT_EQ(ck.optimizer->step, state.step);
  EXPECT_EQ(ck.optimizer->ema, state.ema);
  EXPECT_EQ(ck.optimizer->m, state.m);
  EXPECT_EQ(ck.params.config.width, c.width);

  save_checkpoint(dir / "b.ckpt", {}, params, nullptr);
  EXPECT_FALSE(load_checkpoint(dir / "b.ckpt").optimizer.has_value());
  {
    std::ofstream f(dir / "bad.ckpt", std::ios::binary);
    f << "not a checkpoint";
  }
  EXPECT_THROW(load_checkpoint(dir / "bad.ckpt"), IoError);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), IoError);
  std::filesystem::remove_all(dir);
}

TEST(Denoiser, ConfigValidation) {
  auto c = tiny_config();
  EXPECT_NO_THROW(c.validate());
  auto bad = c;
  bad.image_size = 9;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.width = 20;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.framewise_attention_at = {2};
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.head_dim = 6;
  bad.width = 12;
  EXPECT_THROW(bad.validate(), ConfigError);
  const nlohmann::json j = c;
  EXPECT_EQ(j.get<DenoiserConfig>().framewise_attention_at, c.framewise_attention_at);
}
