#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "kil/nn.hpp"
#include "kil/rng.hpp"

namespace kil::policy {

struct PolicyConfig {
  int keypoint_slots = 4;
  int obs_horizon = 2;
  int pred_horizon = 16;
  int act_horizon = 8;
  enum class EncoderMode { None, Transformer };
  EncoderMode encoder_mode = EncoderMode::Transformer;
  bool append_similarities = false;
  enum class Pooling { Mean, ClassMaxpool };
  Pooling pooling = Pooling::Mean;
  int d_model = 128;
  int n_heads = 8;
  int n_layers = 4;
  int ff_dim = 512;
  int denoiser_hidden = 512;
  int train_diffusion_steps = 100;
  int inference_steps = 14;

  void validate() const;  // throws "invalid-policy-config"

  int action_dim() const { return 10; }
  int chunk_dim() const { return pred_horizon * action_dim(); }
  // Flat per-frame observation width (keypoints | proprio | similarities).
  int obs_dim() const {
    return 3 * keypoint_slots + 7 +
           (append_similarities ? keypoint_slots * keypoint_slots : 0);
  }
  int token_in_dim() const {
    return 3 + (append_similarities ? keypoint_slots : 0);
  }
  int frame_feature_dim() const {
    return encoder_mode == EncoderMode::Transformer ? d_model : obs_dim();
  }
  int cond_dim() const { return obs_horizon * frame_feature_dim(); }
};

std::string encoder_mode_name(PolicyConfig::EncoderMode m);
PolicyConfig::EncoderMode encoder_mode_from_name(const std::string& s);
std::string pooling_name(PolicyConfig::Pooling p);
PolicyConfig::Pooling pooling_from_name(const std::string& s);

// Min-max scaling to (-1, 1). Dimensions with a degenerate range (< 1e-8)
// normalize to 0 and denormalize back to the minimum.
struct NormStats {
  Eigen::VectorXd min, max;

  void validate() const;  // throws "invalid-stats"
};

NormStats compute_stats(const nn::Mat& rows);
nn::Mat normalize_rows(const nn::Mat& rows, const NormStats& stats);
nn::Mat denormalize_rows(const nn::Mat& rows, const NormStats& stats);

// Cumulative signal fraction of the squared-cosine noise schedule
// (betas clipped at 0.999).
struct DiffusionSchedule {
  Eigen::VectorXd alpha_bar;

  static DiffusionSchedule squared_cosine(int steps);
  int steps() const { return static_cast<int>(alpha_bar.size()); }
};

// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise.
// Throws "invalid-timestep" when t is out of range.
nn::Mat ddpm_forward(const nn::Mat& x0, int t, const nn::Mat& noise,
                     const DiffusionSchedule& schedule);

// Descending sampling timesteps: `inference_steps` indices evenly strided
// over the training schedule, ending at 0.
std::vector<int> ddim_timesteps(int train_steps, int inference_steps);

using DenoiserFn = std::function<nn::Mat(const nn::Mat& x, int t)>;

// Deterministic DDIM (eta = 0): from Gaussian noise, alternate the clipped
// x0 estimate with the re-noising step down the strided schedule.
nn::Mat ddim_sample(const DenoiserFn& denoiser, const DiffusionSchedule& schedule,
                    int inference_steps, int chunk_dim, Rng& rng);

// Normalized observation minibatch. B samples, each obs_horizon frames.
// keypoints: (B * T_o * K) x 3, proprio: (B * T_o) x 7, sims (optional):
// (B * T_o * K) x K.
struct ObsBatch {
  nn::Mat keypoints;
  nn::Mat proprio;
  nn::Mat sims;
};

// Flat per-frame observation layout shared by training and inference:
// [keypoint rows | proprio | similarity rows].
Eigen::RowVectorXd flatten_observation(const nn::Mat& keypoints,
                                       const Eigen::VectorXd& proprio,
                                       const nn::Mat& sims, bool with_sims);

class PolicyNet {
 public:
  PolicyNet(const PolicyConfig& cfg, std::uint64_t init_seed);

  // Conditioning vectors, B x cond_dim.
  nn::Mat encode(const ObsBatch& obs, nn::EncoderCache* cache) const;
  nn::Mat denoise(const nn::Mat& x, const std::vector<int>& t,
                  const nn::Mat& cond, nn::DenoiserCache* cache) const;
  // Backpropagates d_eps through the denoiser and (in transformer mode) the
  // encoder, accumulating into `grads`.
  void backward(const nn::EncoderCache& enc_cache,
                const nn::DenoiserCache& den_cache, const nn::Mat& d_eps,
                nn::ParamSet* grads) const;

  // Single-sample DDIM rollout helper; returns a normalized chunk row.
  nn::Mat sample_chunk(const ObsBatch& obs, Rng& rng) const;

  const PolicyConfig& config() const { return cfg_; }
  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }
  nn::TransformerEncoder* encoder() {
    return encoder_ ? &*encoder_ : nullptr;
  }
  const DiffusionSchedule& schedule() const { return schedule_; }

 private:
  PolicyConfig cfg_;
  nn::ParamSet params_;
  std::optional<nn::TransformerEncoder> encoder_;
  std::optional<nn::Denoiser> denoiser_;
  DiffusionSchedule schedule_;
};

// Self-describing checkpoint container: JSON header (config, normalization
// stats, training step, metadata, tensor table) followed by row-major fp64
// tensor blobs. Round trips are bitwise exact.
struct Checkpoint {
  PolicyConfig config;
  NormStats obs_stats, act_stats;
  long long train_step = 0;
  std::string meta_json;  // free-form provenance (task, extraction, seed)
  nn::ParamSet tensors;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);  // throws "checkpoint-io"

// Rebuilds the network from a checkpoint (shape-checked).
PolicyNet net_from_checkpoint(const Checkpoint& ckpt);

}  // namespace kil::policy
