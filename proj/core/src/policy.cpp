#include "kil/policy.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <fstream>

namespace kil::policy {

using nlohmann::json;
using nn::Mat;

void PolicyConfig::validate() const {
  require(keypoint_slots >= 1, "invalid-policy-config", "keypoint_slots >= 1");
  require(obs_horizon >= 1 && pred_horizon >= 1, "invalid-policy-config",
          "horizons must be positive");
  require(act_horizon >= 1 && act_horizon <= pred_horizon,
          "invalid-policy-config", "need 1 <= act_horizon <= pred_horizon");
  require(d_model % n_heads == 0, "invalid-policy-config",
          "d_model must be divisible by n_heads");
  require(train_diffusion_steps >= 2, "invalid-policy-config",
          "train_diffusion_steps >= 2");
  require(inference_steps >= 1 && inference_steps <= train_diffusion_steps,
          "invalid-policy-config", "inference_steps within the train schedule");
}

std::string encoder_mode_name(PolicyConfig::EncoderMode m) {
  return m == PolicyConfig::EncoderMode::None ? "none" : "transformer";
}

PolicyConfig::EncoderMode encoder_mode_from_name(const std::string& s) {
  if (s == "none") return PolicyConfig::EncoderMode::None;
  if (s == "transformer") return PolicyConfig::EncoderMode::Transformer;
  fail("unknown-encoder-mode", s);
}

std::string pooling_name(PolicyConfig::Pooling p) {
  return p == PolicyConfig::Pooling::Mean ? "mean" : "class_maxpool";
}

PolicyConfig::Pooling pooling_from_name(const std::string& s) {
  if (s == "mean") return PolicyConfig::Pooling::Mean;
  if (s == "class_maxpool") return PolicyConfig::Pooling::ClassMaxpool;
  fail("unknown-pooling", s);
}

void NormStats::validate() const {
  require(min.size() == max.size(), "invalid-stats", "min/max size mismatch");
  require(min.allFinite() && max.allFinite(), "invalid-stats",
          "stats must be finite");
  require(((max - min).array() >= 0.0).all(), "invalid-stats",
          "max must be >= min");
}

NormStats compute_stats(const Mat& rows) {
  require(rows.rows() >= 1, "invalid-stats", "no rows");
  NormStats s;
  s.min = rows.colwise().minCoeff();
  s.max = rows.colwise().maxCoeff();
  return s;
}

namespace {
constexpr double kDegenerateRange = 1e-8;
}

Mat normalize_rows(const Mat& rows, const NormStats& stats) {
  stats.validate();
  require(rows.cols() == stats.min.size(), "shape", "stats dimension mismatch");
  Mat out(rows.rows(), rows.cols());
  for (int c = 0; c < rows.cols(); ++c) {
    const double range = stats.max[c] - stats.min[c];
    if (range < kDegenerateRange) {
      out.col(c).setZero();
    } else {
      out.col(c) = 2.0 * (rows.col(c).array() - stats.min[c]) / range - 1.0;
    }
  }
  return out;
}

Mat denormalize_rows(const Mat& rows, const NormStats& stats) {
  stats.validate();
  require(rows.cols() == stats.min.size(), "shape", "stats dimension mismatch");
  Mat out(rows.rows(), rows.cols());
  for (int c = 0; c < rows.cols(); ++c) {
    const double range = stats.max[c] - stats.min[c];
    if (range < kDegenerateRange) {
      out.col(c).setConstant(stats.min[c]);
    } else {
      out.col(c) = (rows.col(c).array() + 1.0) / 2.0 * range + stats.min[c];
    }
  }
  return out;
}

Eigen::RowVectorXd flatten_observation(const nn::Mat& keypoints,
                                       const Eigen::VectorXd& proprio,
                                       const nn::Mat& sims, bool with_sims) {
  const int kk = static_cast<int>(keypoints.rows());
  const int width =
      3 * kk + static_cast<int>(proprio.size()) + (with_sims ? kk * kk : 0);
  Eigen::RowVectorXd out(width);
  for (int k = 0; k < kk; ++k) out.segment(3 * k, 3) = keypoints.row(k);
  out.segment(3 * kk, proprio.size()) = proprio.transpose();
  if (with_sims) {
    require(sims.rows() == kk && sims.cols() == kk, "shape",
            "similarity matrix must be K x K");
    for (int k = 0; k < kk; ++k) {
      out.segment(3 * kk + static_cast<int>(proprio.size()) + kk * k, kk) =
          sims.row(k);
    }
  }
  return out;
}

DiffusionSchedule DiffusionSchedule::squared_cosine(int steps) {
  require(steps >= 2, "invalid-timestep", "schedule needs >= 2 steps");
  DiffusionSchedule s;
  s.alpha_bar.resize(steps);
  const double offset = 0.008;
  const double half_pi = 1.57079632679489661923;
  auto f = [&](double u) {
    const double a = std::cos((u + offset) / (1.0 + offset) * half_pi);
    return a * a;
  };
  double prod = 1.0;
  double prev = f(0.0);
  for (int t = 0; t < steps; ++t) {
    const double cur = f(static_cast<double>(t + 1) / steps);
    const double beta = std::min(1.0 - cur / prev, 0.999);
    prod *= 1.0 - beta;
    s.alpha_bar[t] = prod;
    prev = cur;
  }
  return s;
}

Mat ddpm_forward(const Mat& x0, int t, const Mat& noise,
                 const DiffusionSchedule& schedule) {
  require(t >= 0 && t < schedule.steps(), "invalid-timestep",
          "t out of schedule range");
  require(x0.rows() == noise.rows() && x0.cols() == noise.cols(), "shape",
          "x0/noise shape mismatch");
  const double ab = schedule.alpha_bar[t];
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * noise;
}

std::vector<int> ddim_timesteps(int train_steps, int inference_steps) {
  require(inference_steps >= 1 && inference_steps <= train_steps,
          "invalid-timestep", "bad inference step count");
  const int stride = train_steps / inference_steps;
  std::vector<int> ts;
  for (int i = inference_steps - 1; i >= 0; --i) ts.push_back(i * stride);
  return ts;
}

Mat ddim_sample(const DenoiserFn& denoiser, const DiffusionSchedule& schedule,
                int inference_steps, int chunk_dim, Rng& rng) {
  const std::vector<int> ts = ddim_timesteps(schedule.steps(), inference_steps);
  Mat x(1, chunk_dim);
  for (int i = 0; i < chunk_dim; ++i) x(0, i) = rng.normal();

  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const double ab_t = schedule.alpha_bar[t];
    const double ab_prev = (i + 1 < ts.size()) ? schedule.alpha_bar[ts[i + 1]] : 1.0;
    const Mat eps = denoiser(x, t);
    Mat x0 = (x - std::sqrt(1.0 - ab_t) * eps) / std::sqrt(ab_t);
    x0 = x0.cwiseMax(-1.0).cwiseMin(1.0);
    x = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps;
  }
  return x;
}

PolicyNet::PolicyNet(const PolicyConfig& cfg, std::uint64_t init_seed)
    : cfg_(cfg), schedule_(DiffusionSchedule::squared_cosine(cfg.train_diffusion_steps)) {
  cfg_.validate();
  Rng init(mix64(init_seed, 0x1217ULL));
  if (cfg_.encoder_mode == PolicyConfig::EncoderMode::Transformer) {
    nn::EncoderConfig ec;
    ec.keypoint_slots = cfg_.keypoint_slots;
    ec.token_in_dim = cfg_.token_in_dim();
    ec.d_model = cfg_.d_model;
    ec.n_heads = cfg_.n_heads;
    ec.n_layers = cfg_.n_layers;
    ec.ff_dim = cfg_.ff_dim;
    ec.class_maxpool = cfg_.pooling == PolicyConfig::Pooling::ClassMaxpool;
    encoder_.emplace(ec, "enc.", &params_, &init);
  }
  nn::DenoiserConfig dc;
  dc.x_dim = cfg_.chunk_dim();
  dc.t_embed_dim = 128;
  dc.cond_dim = cfg_.cond_dim();
  dc.hidden = cfg_.denoiser_hidden;
  dc.train_steps = cfg_.train_diffusion_steps;
  denoiser_.emplace(dc, "den.", &params_, &init);
}

nn::Mat PolicyNet::encode(const ObsBatch& obs, nn::EncoderCache* cache) const {
  const int t_o = cfg_.obs_horizon;
  const int kk = cfg_.keypoint_slots;
  const int frames = static_cast<int>(obs.proprio.rows());
  require(frames % t_o == 0, "shape", "frame count not a multiple of obs_horizon");
  const int batch = frames / t_o;

  if (cfg_.encoder_mode == PolicyConfig::EncoderMode::None) {
    // Flatten (keypoints | proprio | sims) per frame, concatenate frames.
    const int od = cfg_.obs_dim();
    Mat cond(batch, t_o * od);
    for (int b = 0; b < batch; ++b) {
      for (int f = 0; f < t_o; ++f) {
        const int fr = b * t_o + f;
        int col = f * od;
        for (int k = 0; k < kk; ++k) {
          cond.block(b, col + 3 * k, 1, 3) = obs.keypoints.row(fr * kk + k);
        }
        col += 3 * kk;
        cond.block(b, col, 1, 7) = obs.proprio.row(fr);
        col += 7;
        if (cfg_.append_similarities) {
          for (int k = 0; k < kk; ++k) {
            cond.block(b, col + kk * k, 1, kk) = obs.sims.row(fr * kk + k);
          }
        }
      }
    }
    return cond;
  }

  Mat kp_in;
  if (cfg_.append_similarities) {
    require(obs.sims.rows() == obs.keypoints.rows() && obs.sims.cols() == kk,
            "shape", "similarity feature shape mismatch");
    kp_in.resize(obs.keypoints.rows(), 3 + kk);
    kp_in.leftCols(3) = obs.keypoints;
    kp_in.rightCols(kk) = obs.sims;
  } else {
    kp_in = obs.keypoints;
  }
  const Mat pooled = encoder_->forward(params_, kp_in, obs.proprio, cache);

  Mat cond(batch, cfg_.cond_dim());
  const int d = cfg_.d_model;
  for (int b = 0; b < batch; ++b) {
    for (int f = 0; f < t_o; ++f) {
      cond.block(b, f * d, 1, d) = pooled.row(b * t_o + f);
    }
  }
  return cond;
}

nn::Mat PolicyNet::denoise(const Mat& x, const std::vector<int>& t,
                           const Mat& cond, nn::DenoiserCache* cache) const {
  return denoiser_->forward(params_, x, t, cond, cache);
}

void PolicyNet::backward(const nn::EncoderCache& enc_cache,
                         const nn::DenoiserCache& den_cache, const Mat& d_eps,
                         nn::ParamSet* grads) const {
  Mat d_cond;
  denoiser_->backward(params_, den_cache, d_eps, grads, nullptr, &d_cond);
  if (cfg_.encoder_mode != PolicyConfig::EncoderMode::Transformer) return;

  const int t_o = cfg_.obs_horizon;
  const int d = cfg_.d_model;
  const int batch = static_cast<int>(d_cond.rows());
  Mat d_pooled(batch * t_o, d);
  for (int b = 0; b < batch; ++b) {
    for (int f = 0; f < t_o; ++f) {
      d_pooled.row(b * t_o + f) = d_cond.block(b, f * d, 1, d);
    }
  }
  encoder_->backward(params_, enc_cache, d_pooled, grads, nullptr, nullptr);
}

nn::Mat PolicyNet::sample_chunk(const ObsBatch& obs, Rng& rng) const {
  nn::EncoderCache enc_cache;
  const Mat cond = encode(obs, &enc_cache);
  require(cond.rows() == 1, "shape", "sample_chunk expects a single sample");
  nn::DenoiserCache den_cache;
  auto fn = [&](const Mat& x, int t) {
    return denoise(x, std::vector<int>(1, t), cond, &den_cache);
  };
  return ddim_sample(fn, schedule_, cfg_.inference_steps, cfg_.chunk_dim(), rng);
}

namespace {

json config_to_json(const PolicyConfig& c) {
  return json{{"keypoint_slots", c.keypoint_slots},
              {"obs_horizon", c.obs_horizon},
              {"pred_horizon", c.pred_horizon},
              {"act_horizon", c.act_horizon},
              {"encoder_mode", encoder_mode_name(c.encoder_mode)},
              {"append_similarities", c.append_similarities},
              {"pooling", pooling_name(c.pooling)},
              {"d_model", c.d_model},
              {"n_heads", c.n_heads},
              {"n_layers", c.n_layers},
              {"ff_dim", c.ff_dim},
              {"denoiser_hidden", c.denoiser_hidden},
              {"train_diffusion_steps", c.train_diffusion_steps},
              {"inference_steps", c.inference_steps}};
}

PolicyConfig config_from_json(const json& j) {
  PolicyConfig c;
  c.keypoint_slots = j.at("keypoint_slots").get<int>();
  c.obs_horizon = j.at("obs_horizon").get<int>();
  c.pred_horizon = j.at("pred_horizon").get<int>();
  c.act_horizon = j.at("act_horizon").get<int>();
  c.encoder_mode = encoder_mode_from_name(j.at("encoder_mode").get<std::string>());
  c.append_similarities = j.at("append_similarities").get<bool>();
  c.pooling = pooling_from_name(j.at("pooling").get<std::string>());
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.ff_dim = j.at("ff_dim").get<int>();
  c.denoiser_hidden = j.at("denoiser_hidden").get<int>();
  c.train_diffusion_steps = j.at("train_diffusion_steps").get<int>();
  c.inference_steps = j.at("inference_steps").get<int>();
  return c;
}

json stats_to_json(const NormStats& s) {
  std::vector<double> mn(s.min.data(), s.min.data() + s.min.size());
  std::vector<double> mx(s.max.data(), s.max.data() + s.max.size());
  return json{{"min", mn}, {"max", mx}};
}

NormStats stats_from_json(const json& j) {
  NormStats s;
  const auto mn = j.at("min").get<std::vector<double>>();
  const auto mx = j.at("max").get<std::vector<double>>();
  s.min = Eigen::Map<const Eigen::VectorXd>(mn.data(), mn.size());
  s.max = Eigen::Map<const Eigen::VectorXd>(mx.data(), mx.size());
  return s;
}

constexpr char kMagic[8] = {'K', 'I', 'L', 'C', 'K', 'P', 'T', '1'};

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  json header;
  header["version"] = 1;
  header["config"] = config_to_json(ckpt.config);
  header["obs_stats"] = stats_to_json(ckpt.obs_stats);
  header["act_stats"] = stats_to_json(ckpt.act_stats);
  header["train_step"] = ckpt.train_step;
  header["meta"] = ckpt.meta_json;

  json table = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors.tensors) {
    table.push_back(json{{"name", name},
                         {"rows", t.rows()},
                         {"cols", t.cols()},
                         {"offset", offset}});
    offset += static_cast<std::uint64_t>(t.size()) * sizeof(double);
  }
  header["tensors"] = table;
  const std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("checkpoint-io", "cannot open " + path + " for writing");
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t hlen = header_str.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(header_str.data(), static_cast<std::streamsize>(hlen));
  std::vector<double> row_major;
  for (const auto& [name, t] : ckpt.tensors.tensors) {
    row_major.resize(static_cast<std::size_t>(t.size()));
    for (int r = 0; r < t.rows(); ++r) {
      for (int c = 0; c < t.cols(); ++c) {
        row_major[static_cast<std::size_t>(r) * t.cols() + c] = t(r, c);
      }
    }
    out.write(reinterpret_cast<const char*>(row_major.data()),
              static_cast<std::streamsize>(row_major.size() * sizeof(double)));
  }
  if (!out) fail("checkpoint-io", "write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("checkpoint-io", "cannot open " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    fail("checkpoint-io", path + " is not a checkpoint file");
  }
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string header_str(hlen, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(hlen));
  if (!in) fail("checkpoint-io", "truncated header in " + path);

  json header;
  try {
    header = json::parse(header_str);
  } catch (const json::exception& e) {
    fail("checkpoint-io", std::string("corrupt header: ") + e.what());
  }

  Checkpoint ckpt;
  ckpt.config = config_from_json(header.at("config"));
  ckpt.obs_stats = stats_from_json(header.at("obs_stats"));
  ckpt.act_stats = stats_from_json(header.at("act_stats"));
  ckpt.train_step = header.at("train_step").get<long long>();
  ckpt.meta_json = header.at("meta").get<std::string>();

  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const int rows = entry.at("rows").get<int>();
    const int cols = entry.at("cols").get<int>();
    Mat& t = ckpt.tensors.add(name, rows, cols);
    std::vector<double> row_major(static_cast<std::size_t>(rows) * cols);
    in.read(reinterpret_cast<char*>(row_major.data()),
            static_cast<std::streamsize>(row_major.size() * sizeof(double)));
    if (!in) fail("checkpoint-io", "truncated tensor data in " + path);
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        t(r, c) = row_major[static_cast<std::size_t>(r) * cols + c];
      }
    }
  }
  return ckpt;
}

PolicyNet net_from_checkpoint(const Checkpoint& ckpt) {
  PolicyNet net(ckpt.config, 0);
  auto& dst = net.params().tensors;
  require(dst.size() == ckpt.tensors.tensors.size(), "checkpoint-io",
          "tensor count mismatch against config");
  for (auto& [name, t] : dst) {
    const auto it = ckpt.tensors.tensors.find(name);
    require(it != ckpt.tensors.tensors.end(), "checkpoint-io",
            "missing tensor " + name);
    require(it->second.rows() == t.rows() && it->second.cols() == t.cols(),
            "checkpoint-io", "shape mismatch for " + name);
    t = it->second;
  }
  return net;
}

}  // namespace kil::policy
