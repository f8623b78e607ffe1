#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "kil/nn.hpp"
#include "kil/perception.hpp"
#include "kil/policy.hpp"
#include "kil/worldsim.hpp"

namespace kil::train {

struct AugConfig {
  double kp_noise_sigma = 0.001;       // meters
  double st_max_translation = 0.3;     // meters, uniform +/-
  double st_max_yaw = 0.6;             // radians, uniform +/-
  double eef_pos_sigma = 0.002;        // meters
  double eef_ori_sigma = 0.017453292519943295;  // 1 degree, per Euler angle
  double eef_grip_sigma = 0.02;

  void validate() const;  // throws "invalid-train-config"
};

struct TrainConfig {
  int batch_size = 128;
  double peak_lr = 1e-4;
  int total_steps = 20000;
  double weight_decay = 1e-5;
  AugConfig aug;
  std::uint64_t seed = 0;
  int log_every = 100;
  int checkpoint_every = 0;  // 0 = final checkpoint only
  int n_workers = 1;

  void validate() const;
};

// peak * 0.5 * (1 + cos(pi * step / total_steps))
double cosine_lr(double peak, long long step, long long total_steps);

// One (observation history, future action chunk) pair in raw (unnormalized,
// unaugmented) units.
struct TrainingSample {
  nn::Mat keypoints;                   // (T_o * K) x 3, world frame
  std::vector<std::uint8_t> kp_valid;  // T_o * K; zero-padded slots are 0
  nn::Mat proprio;                     // T_o x 7
  nn::Mat sims;                        // (T_o * K) x K, empty unless exported
  nn::Mat actions;                     // T_p x 10, edge-padded at episode ends
};

struct Dataset {
  std::vector<TrainingSample> samples;
  policy::NormStats obs_stats;  // over the flat per-frame observation
  policy::NormStats act_stats;  // over the 10 action dims
  int keypoint_slots = 0;
  int obs_horizon = 2;
  int pred_horizon = 16;
  bool has_sims = false;
};

// Replays each demonstration through the chosen extraction method and windows
// the result into training pairs. Stats are computed before augmentation.
// Episodes shorter than 2 steps are skipped with a warning on stderr.
Dataset build_dataset(const std::vector<sim::Demonstration>& demos,
                      percep::ExtractionMethod method, const sim::TaskSpec& task,
                      const sim::TaskAssets& assets,
                      const percep::PerceptionConfig& pcfg,
                      const policy::PolicyConfig& cfg, std::uint64_t seed);

// Keypoint noise, EEF noise, and one SE(2) transform shared by the whole
// history and chunk. Padded keypoints stay exactly zero; gripper commands are
// untouched.
TrainingSample augment(const TrainingSample& sample, const AugConfig& aug,
                       Rng& rng);

// Normalized minibatch ready for the networks.
struct PreparedBatch {
  policy::ObsBatch obs;
  nn::Mat x_t;            // B x chunk_dim
  std::vector<int> t;
  nn::Mat noise;          // B x chunk_dim, regression targets
};

PreparedBatch prepare_batch(const Dataset& ds, const std::vector<int>& indices,
                            const policy::PolicyConfig& cfg,
                            const TrainConfig& tc,
                            const policy::DiffusionSchedule& schedule,
                            long long step);

struct TrainLogRow {
  long long step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

class Trainer {
 public:
  Trainer(const policy::PolicyConfig& pcfg, const TrainConfig& tcfg,
          const Dataset& ds);

  // Runs one optimization step and returns the batch loss.
  // Throws "diverged" on a non-finite loss.
  double step(long long step_index);

  // Mean diffusion loss over up to n un-augmented samples with a fixed
  // evaluation noise stream; a deterministic progress metric.
  double validation_loss(int n, std::uint64_t eval_seed) const;

  policy::PolicyNet& net() { return net_; }
  const policy::PolicyNet& net() const { return net_; }
  policy::Checkpoint checkpoint(long long step, const std::string& meta) const;

  // Test hook: when set, replaces the denoiser output in step() (no
  // parameter update is applied on such steps).
  std::function<nn::Mat(const PreparedBatch&)> eps_override;

 private:
  policy::PolicyConfig pcfg_;
  TrainConfig tcfg_;
  const Dataset& ds_;
  policy::PolicyNet net_;
  nn::AdamW opt_;
  nn::ParamSet grads_;
  nn::EncoderCache enc_cache_;
  nn::DenoiserCache den_cache_;
};

// Full training loop: seeded minibatches with replacement, cosine schedule,
// periodic checkpoints via `on_checkpoint` (when checkpoint_every > 0) and a
// log callback per log_every steps. Returns the final checkpoint.
policy::Checkpoint train(
    const Dataset& ds, const policy::PolicyConfig& pcfg, const TrainConfig& tcfg,
    const std::string& meta,
    const std::function<void(const TrainLogRow&)>& on_log = nullptr,
    const std::function<void(long long, const policy::Checkpoint&)>& on_checkpoint =
        nullptr);

}  // namespace kil::train
