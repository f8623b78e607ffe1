#pragma once

#include <Eigen/Dense>
#include <map>
#include <string>
#include <vector>

#include "kil/common.hpp"
#include "kil/rng.hpp"

namespace kil::nn {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Named parameter tensors. std::map keeps iteration order stable, which the
// optimizer and the checkpoint format rely on.
struct ParamSet {
  std::map<std::string, Mat> tensors;

  Mat& add(const std::string& name, int rows, int cols);
  Mat& at(const std::string& name);
  const Mat& at(const std::string& name) const;
  ParamSet zeros_like() const;
  void set_zero();
  std::size_t scalar_count() const;
};

// Sinusoidal position table: row p is
//   [sin(p*w_0) ... sin(p*w_{d/2-1}), cos(p*w_0) ... cos(p*w_{d/2-1})]
// with w_i = 10000^(-i / (d/2)). Throws "invalid-dim" unless d is even, >= 2.
Mat sincos_embed(int d, int n);

double gelu(double x);
double gelu_grad(double x);

// ---------------------------------------------------------------------------
// Transformer keypoint encoder: tokens = projected keypoints + positional
// rows, plus one proprioception token from a 3-layer MLP; n_layers pre-norm
// blocks (MHA then GeLU feed-forward, residuals, no dropout, no final norm);
// mean pooling or class-token/maxpool pooling.

struct EncoderConfig {
  int keypoint_slots = 4;
  int token_in_dim = 3;   // 3, or 3 + keypoint_slots with similarity features
  int proprio_dim = 7;
  int d_model = 128;
  int n_heads = 8;
  int n_layers = 4;
  int ff_dim = 512;
  bool class_maxpool = false;  // false = mean pooling

  int tokens_per_frame() const {
    return keypoint_slots + 1 + (class_maxpool ? 1 : 0);
  }
};

struct EncoderLayerCache {
  Mat x_in;
  Mat xhat1;
  Vec inv_std1;
  Mat q, k, v;
  Mat probs;        // (frames * heads * N) x N softmax rows
  Mat attn_concat;  // pre out-projection
  Mat x_mid;
  Mat xhat2;
  Vec inv_std2;
  Mat ff_pre;
  Mat ff_act;
};

struct EncoderCache {
  int frames = 0;
  Mat kp_in;
  Mat proprio_in;
  Mat ee_pre0, ee_act0, ee_pre1, ee_act1, ee_pre2;
  std::vector<EncoderLayerCache> layers;
  Mat x_out;  // final token matrix
  std::vector<int> max_index;  // (frames * d_model), class_maxpool argmax rows
  Mat pool_concat;             // frames x 2d, class_maxpool
};

class TransformerEncoder {
 public:
  TransformerEncoder(const EncoderConfig& cfg, const std::string& prefix,
                     ParamSet* params, Rng* init_rng);

  // kp_in: (frames * keypoint_slots) x token_in_dim, frame-major.
  // proprio: frames x proprio_dim. Returns frames x d_model.
  Mat forward(const ParamSet& params, const Mat& kp_in, const Mat& proprio,
              EncoderCache* cache) const;

  // d_out: frames x d_model. Accumulates into `grads`; optionally emits
  // gradients w.r.t. the inputs.
  void backward(const ParamSet& params, const EncoderCache& cache,
                const Mat& d_out, ParamSet* grads, Mat* d_kp_in,
                Mat* d_proprio) const;

  const EncoderConfig& config() const { return cfg_; }
  // Positional table (keypoint_slots + 1 rows). Exposed non-const so tests
  // can zero it to check permutation symmetry.
  Mat positional;

 private:
  std::string key(const std::string& suffix) const { return prefix_ + suffix; }

  EncoderConfig cfg_;
  std::string prefix_;
};

// ---------------------------------------------------------------------------
// Denoiser: residual MLP over the flattened action chunk, conditioned on a
// sinusoidal timestep embedding and the encoder output.

struct DenoiserConfig {
  int x_dim = 160;  // pred_horizon * action_dim
  int t_embed_dim = 128;
  int cond_dim = 256;
  int hidden = 512;
  int train_steps = 100;

  int input_dim() const { return x_dim + t_embed_dim + cond_dim; }
};

struct DenoiserCache {
  Mat input;
  Mat pre1, act1;
  Mat pre2, h2;
  Mat pre3, h3;
};

class Denoiser {
 public:
  Denoiser(const DenoiserConfig& cfg, const std::string& prefix,
           ParamSet* params, Rng* init_rng);

  // x: B x x_dim (normalized noisy chunk rows), t: per-row timestep indices,
  // cond: B x cond_dim. Returns B x x_dim noise prediction.
  Mat forward(const ParamSet& params, const Mat& x, const std::vector<int>& t,
              const Mat& cond, DenoiserCache* cache) const;

  void backward(const ParamSet& params, const DenoiserCache& cache,
                const Mat& d_out, ParamSet* grads, Mat* d_x, Mat* d_cond) const;

  const DenoiserConfig& config() const { return cfg_; }

 private:
  std::string key(const std::string& suffix) const { return prefix_ + suffix; }

  DenoiserConfig cfg_;
  std::string prefix_;
  Mat t_table_;  // train_steps x t_embed_dim
};

// ---------------------------------------------------------------------------
// Decoupled-weight-decay adaptive-moment optimizer (AdamW) with bias
// correction: theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).

struct AdamW {
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
  long long step_count = 0;
  ParamSet m, v;

  explicit AdamW(const ParamSet& params);
  void update(ParamSet* params, const ParamSet& grads, double lr,
              double weight_decay);
};

}  // namespace kil::nn
