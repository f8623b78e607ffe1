#include "kil/training.hpp"

#include <cmath>
#include <iostream>

namespace kil::train {

using nn::Mat;

void AugConfig::validate() const {
  require(kp_noise_sigma >= 0 && st_max_translation >= 0 && st_max_yaw >= 0 &&
              eef_pos_sigma >= 0 && eef_ori_sigma >= 0 && eef_grip_sigma >= 0,
          "invalid-train-config", "augmentation parameters must be >= 0");
}

void TrainConfig::validate() const {
  require(batch_size >= 1, "invalid-train-config", "batch_size >= 1");
  require(total_steps >= 0, "invalid-train-config", "total_steps >= 0");
  require(peak_lr > 0 && weight_decay >= 0, "invalid-train-config",
          "bad optimizer settings");
  require(n_workers >= 1, "invalid-train-config", "n_workers >= 1");
  aug.validate();
}

double cosine_lr(double peak, long long step, long long total_steps) {
  if (total_steps <= 0) return peak;
  const double x = static_cast<double>(step) / static_cast<double>(total_steps);
  return peak * 0.5 * (1.0 + std::cos(geom::kPi * x));
}

namespace {

// Flat per-frame observation row: [keypoints | proprio | similarities].
Eigen::RowVectorXd flatten_frame(const TrainingSample& s, int frame, int kk,
                                 bool sims) {
  const nn::Mat kps = s.keypoints.middleRows(frame * kk, kk);
  const Eigen::VectorXd proprio = s.proprio.row(frame).transpose();
  const nn::Mat sim_rows =
      sims ? nn::Mat(s.sims.middleRows(frame * kk, kk)) : nn::Mat();
  return policy::flatten_observation(kps, proprio, sim_rows, sims);
}

}  // namespace

Dataset build_dataset(const std::vector<sim::Demonstration>& demos,
                      percep::ExtractionMethod method, const sim::TaskSpec& task,
                      const sim::TaskAssets& assets,
                      const percep::PerceptionConfig& pcfg,
                      const policy::PolicyConfig& cfg, std::uint64_t seed) {
  require(!demos.empty(), "invalid-argument", "no demonstrations");
  cfg.validate();

  Dataset ds;
  ds.keypoint_slots = cfg.keypoint_slots;
  ds.obs_horizon = cfg.obs_horizon;
  ds.pred_horizon = cfg.pred_horizon;
  ds.has_sims = cfg.append_similarities;
  const int kk = cfg.keypoint_slots;
  const int t_o = cfg.obs_horizon;
  const int t_p = cfg.pred_horizon;

  percep::KeypointExtractor extractor(task, assets, method, pcfg,
                                      sim::default_camera(),
                                      cfg.append_similarities);
  require(extractor.keypoint_slots() == kk, "shape",
          "policy keypoint_slots does not match the task");

  struct FrameObs {
    Mat kps;     // K x 3
    Mat sims;    // K x K or empty
    std::vector<std::uint8_t> valid;
    sim::Proprio proprio;
  };

  std::vector<Eigen::RowVectorXd> obs_rows;
  std::vector<Eigen::RowVectorXd> act_rows;

  for (const auto& demo : demos) {
    const int len = static_cast<int>(demo.steps.size());
    if (len < 2) {
      std::cerr << "warning: skipping demonstration " << demo.episode_id
                << " with fewer than 2 steps\n";
      continue;
    }
    extractor.begin_episode(demo.steps.front().scene,
                            mix64(seed, 0xB01DULL, demo.episode_id));

    std::vector<FrameObs> frames(len);
    for (int s = 0; s < len; ++s) {
      FrameObs& fo = frames[s];
      if (method == percep::ExtractionMethod::Oracle) {
        fo.kps.resize(kk, 3);
        for (int k = 0; k < kk; ++k) {
          fo.kps.row(k) = demo.steps[s].keypoints[k].transpose();
        }
        fo.valid.assign(kk, 1);
        if (cfg.append_similarities) fo.sims = Mat::Zero(kk, kk);
      } else {
        percep::Extraction ext = extractor.extract(demo.steps[s].scene, s);
        fo.kps = ext.keypoints_world;
        fo.valid = ext.valid;
        if (cfg.append_similarities) fo.sims = ext.similarities;
      }
      fo.proprio = demo.steps[s].proprio;
    }

    for (int s = 0; s < len; ++s) {
      TrainingSample sample;
      sample.keypoints.resize(t_o * kk, 3);
      sample.proprio.resize(t_o, 7);
      sample.kp_valid.assign(t_o * kk, 0);
      if (cfg.append_similarities) sample.sims.resize(t_o * kk, kk);
      for (int f = 0; f < t_o; ++f) {
        const int src = std::max(0, s - (t_o - 1) + f);
        const FrameObs& fo = frames[src];
        sample.keypoints.middleRows(f * kk, kk) = fo.kps;
        sample.proprio.row(f) = fo.proprio.transpose();
        for (int k = 0; k < kk; ++k) sample.kp_valid[f * kk + k] = fo.valid[k];
        if (cfg.append_similarities) sample.sims.middleRows(f * kk, kk) = fo.sims;
      }
      sample.actions.resize(t_p, 10);
      for (int j = 0; j < t_p; ++j) {
        const int src = std::min(s + j, len - 1);
        sample.actions.row(j) = demo.steps[src].action.transpose();
      }
      ds.samples.push_back(std::move(sample));
    }

    for (int s = 0; s < len; ++s) {
      // Stats come from the per-step frames, not the windowed copies.
      TrainingSample probe;
      probe.keypoints = frames[s].kps;
      probe.proprio = frames[s].proprio.transpose();
      probe.sims = frames[s].sims;
      obs_rows.push_back(flatten_frame(probe, 0, kk, cfg.append_similarities));
      act_rows.push_back(demo.steps[s].action.transpose());
    }
  }
  require(!ds.samples.empty(), "invalid-argument", "all demonstrations skipped");

  Mat obs_mat(static_cast<int>(obs_rows.size()), cfg.obs_dim());
  for (int i = 0; i < obs_mat.rows(); ++i) obs_mat.row(i) = obs_rows[i];
  Mat act_mat(static_cast<int>(act_rows.size()), 10);
  for (int i = 0; i < act_mat.rows(); ++i) act_mat.row(i) = act_rows[i];
  ds.obs_stats = policy::compute_stats(obs_mat);
  ds.act_stats = policy::compute_stats(act_mat);
  return ds;
}

TrainingSample augment(const TrainingSample& sample, const AugConfig& aug,
                       Rng& rng) {
  TrainingSample out = sample;
  const int n_kp_rows = static_cast<int>(out.keypoints.rows());

  // (1) i.i.d. keypoint noise on non-padded slots.
  for (int r = 0; r < n_kp_rows; ++r) {
    if (!out.kp_valid[r]) continue;
    for (int c = 0; c < 3; ++c) {
      out.keypoints(r, c) += rng.normal(aug.kp_noise_sigma);
    }
  }

  // (2) EEF noise: position, Euler angles, gripper opening.
  for (int f = 0; f < out.proprio.rows(); ++f) {
    for (int c = 0; c < 3; ++c) out.proprio(f, c) += rng.normal(aug.eef_pos_sigma);
    for (int c = 3; c < 6; ++c) out.proprio(f, c) += rng.normal(aug.eef_ori_sigma);
    out.proprio(f, 6) += rng.normal(aug.eef_grip_sigma);
  }

  // (3) One SE(2) transform for the whole sample.
  geom::Se2 st;
  st.dx = rng.uniform(-aug.st_max_translation, aug.st_max_translation);
  st.dy = rng.uniform(-aug.st_max_translation, aug.st_max_translation);
  st.theta = rng.uniform(-aug.st_max_yaw, aug.st_max_yaw);
  if (st.dx != 0.0 || st.dy != 0.0 || st.theta != 0.0) {
    for (int r = 0; r < n_kp_rows; ++r) {
      if (!out.kp_valid[r]) continue;
      const geom::Vec3 p = out.keypoints.row(r).transpose();
      out.keypoints.row(r) = geom::se2_apply_point(st, p).transpose();
    }
    for (int f = 0; f < out.proprio.rows(); ++f) {
      const geom::Vec3 p(out.proprio(f, 0), out.proprio(f, 1), out.proprio(f, 2));
      const geom::Vec3 q = geom::se2_apply_point(st, p);
      out.proprio(f, 0) = q.x();
      out.proprio(f, 1) = q.y();
      out.proprio(f, 2) = q.z();
      // Intrinsic ZYX: a left-composed z-rotation adds directly to yaw.
      out.proprio(f, 5) = geom::wrap_angle(out.proprio(f, 5) + st.theta);
    }
    const geom::Mat3 rz = geom::rot_z(st.theta);
    for (int j = 0; j < out.actions.rows(); ++j) {
      const geom::Vec3 p = out.actions.block<1, 3>(j, 0).transpose();
      out.actions.block<1, 3>(j, 0) = geom::se2_apply_point(st, p).transpose();
      // The 6d encoding holds the first two rotation columns; left-composing
      // Rz acts linearly on them.
      const geom::Vec3 c1 = out.actions.block<1, 3>(j, 3).transpose();
      const geom::Vec3 c2 = out.actions.block<1, 3>(j, 6).transpose();
      out.actions.block<1, 3>(j, 3) = (rz * c1).transpose();
      out.actions.block<1, 3>(j, 6) = (rz * c2).transpose();
    }
  }
  return out;
}

PreparedBatch prepare_batch(const Dataset& ds, const std::vector<int>& indices,
                            const policy::PolicyConfig& cfg,
                            const TrainConfig& tc,
                            const policy::DiffusionSchedule& schedule,
                            long long step) {
  const int batch = static_cast<int>(indices.size());
  const int kk = cfg.keypoint_slots;
  const int t_o = cfg.obs_horizon;
  const int chunk = cfg.chunk_dim();

  PreparedBatch pb;
  pb.obs.keypoints.resize(batch * t_o * kk, 3);
  pb.obs.proprio.resize(batch * t_o, 7);
  if (cfg.append_similarities) pb.obs.sims.resize(batch * t_o * kk, kk);
  pb.x_t.resize(batch, chunk);
  pb.noise.resize(batch, chunk);
  pb.t.resize(batch);

  for (int i = 0; i < batch; ++i) {
    Rng rng(mix64(tc.seed, 0xA6A6ULL, static_cast<std::uint64_t>(step), i));
    const TrainingSample aug = augment(ds.samples[indices[i]], tc.aug, rng);

    // Normalize the flat observation per frame, then scatter.
    for (int f = 0; f < t_o; ++f) {
      const Eigen::RowVectorXd row = flatten_frame(aug, f, kk, cfg.append_similarities);
      const Mat normed = policy::normalize_rows(row, ds.obs_stats);
      for (int k = 0; k < kk; ++k) {
        pb.obs.keypoints.row((i * t_o + f) * kk + k) = normed.block(0, 3 * k, 1, 3);
      }
      pb.obs.proprio.row(i * t_o + f) = normed.block(0, 3 * kk, 1, 7);
      if (cfg.append_similarities) {
        for (int k = 0; k < kk; ++k) {
          pb.obs.sims.row((i * t_o + f) * kk + k) =
              normed.block(0, 3 * kk + 7 + kk * k, 1, kk);
        }
      }
    }

    const Mat actions_normed = policy::normalize_rows(aug.actions, ds.act_stats);
    Eigen::RowVectorXd x0(chunk);
    for (int j = 0; j < aug.actions.rows(); ++j) {
      x0.segment(j * 10, 10) = actions_normed.row(j);
    }

    pb.t[i] = rng.uniform_int(cfg.train_diffusion_steps);
    for (int c = 0; c < chunk; ++c) pb.noise(i, c) = rng.normal();
    pb.x_t.row(i) =
        policy::ddpm_forward(x0, pb.t[i], pb.noise.row(i), schedule).row(0);
  }
  return pb;
}

Trainer::Trainer(const policy::PolicyConfig& pcfg, const TrainConfig& tcfg,
                 const Dataset& ds)
    : pcfg_(pcfg),
      tcfg_(tcfg),
      ds_(ds),
      net_(pcfg, mix64(tcfg.seed, 0x171A17ULL)),
      opt_(net_.params()),
      grads_(net_.params().zeros_like()) {
  pcfg_.validate();
  tcfg_.validate();
  require(ds.keypoint_slots == pcfg.keypoint_slots &&
              ds.obs_horizon == pcfg.obs_horizon &&
              ds.pred_horizon == pcfg.pred_horizon &&
              ds.has_sims == pcfg.append_similarities,
          "shape", "dataset was built for a different policy configuration");
}

double Trainer::step(long long step_index) {
  Rng batch_rng(mix64(tcfg_.seed, 0xBA7C4ULL, static_cast<std::uint64_t>(step_index)));
  std::vector<int> indices(tcfg_.batch_size);
  for (int& idx : indices) {
    idx = batch_rng.uniform_int(static_cast<int>(ds_.samples.size()));
  }
  const PreparedBatch pb =
      prepare_batch(ds_, indices, pcfg_, tcfg_, net_.schedule(), step_index);

  const int batch = tcfg_.batch_size;
  const int chunk = pcfg_.chunk_dim();

  Mat eps_hat;
  bool updated = false;
  if (eps_override) {
    eps_hat = eps_override(pb);
  } else {
    const Mat cond = net_.encode(pb.obs, &enc_cache_);
    eps_hat = net_.denoise(pb.x_t, pb.t, cond, &den_cache_);
  }

  const Mat residual = eps_hat - pb.noise;
  const double loss = residual.squaredNorm() / static_cast<double>(batch * chunk);
  if (!std::isfinite(loss)) fail("diverged", "non-finite training loss");

  if (!eps_override) {
    const Mat d_eps = residual * (2.0 / static_cast<double>(batch * chunk));
    grads_.set_zero();
    net_.backward(enc_cache_, den_cache_, d_eps, &grads_);
    const double lr = cosine_lr(tcfg_.peak_lr, step_index, tcfg_.total_steps);
    opt_.update(&net_.params(), grads_, lr, tcfg_.weight_decay);
    updated = true;
  }
  (void)updated;
  return loss;
}

double Trainer::validation_loss(int n, std::uint64_t eval_seed) const {
  const int count = std::min<int>(n, static_cast<int>(ds_.samples.size()));
  require(count >= 1, "invalid-argument", "empty validation set");
  const int kk = pcfg_.keypoint_slots;
  const int t_o = pcfg_.obs_horizon;
  const int chunk = pcfg_.chunk_dim();

  policy::ObsBatch obs;
  obs.keypoints.resize(count * t_o * kk, 3);
  obs.proprio.resize(count * t_o, 7);
  if (pcfg_.append_similarities) obs.sims.resize(count * t_o * kk, kk);
  Mat x_t(count, chunk), noise(count, chunk);
  std::vector<int> t(count);

  Rng pick(mix64(eval_seed, 0x7E57ULL));
  for (int i = 0; i < count; ++i) {
    const int idx = pick.uniform_int(static_cast<int>(ds_.samples.size()));
    const TrainingSample& s = ds_.samples[idx];
    for (int f = 0; f < t_o; ++f) {
      const Eigen::RowVectorXd row = flatten_frame(s, f, kk, pcfg_.append_similarities);
      const Mat normed = policy::normalize_rows(row, ds_.obs_stats);
      for (int k = 0; k < kk; ++k) {
        obs.keypoints.row((i * t_o + f) * kk + k) = normed.block(0, 3 * k, 1, 3);
      }
      obs.proprio.row(i * t_o + f) = normed.block(0, 3 * kk, 1, 7);
      if (pcfg_.append_similarities) {
        for (int k = 0; k < kk; ++k) {
          obs.sims.row((i * t_o + f) * kk + k) =
              normed.block(0, 3 * kk + 7 + kk * k, 1, kk);
        }
      }
    }
    const Mat actions_normed = policy::normalize_rows(s.actions, ds_.act_stats);
    Eigen::RowVectorXd x0(chunk);
    for (int j = 0; j < s.actions.rows(); ++j) {
      x0.segment(j * 10, 10) = actions_normed.row(j);
    }
    t[i] = pick.uniform_int(pcfg_.train_diffusion_steps);
    for (int c = 0; c < chunk; ++c) noise(i, c) = pick.normal();
    x_t.row(i) = policy::ddpm_forward(x0, t[i], noise.row(i), net_.schedule()).row(0);
  }

  nn::EncoderCache ec;
  nn::DenoiserCache dc;
  const Mat cond = net_.encode(obs, &ec);
  const Mat eps_hat = net_.denoise(x_t, t, cond, &dc);
  return (eps_hat - noise).squaredNorm() / static_cast<double>(count * chunk);
}

policy::Checkpoint Trainer::checkpoint(long long step, const std::string& meta) const {
  policy::Checkpoint ckpt;
  ckpt.config = pcfg_;
  ckpt.obs_stats = ds_.obs_stats;
  ckpt.act_stats = ds_.act_stats;
  ckpt.train_step = step;
  ckpt.meta_json = meta;
  ckpt.tensors = net_.params();
  return ckpt;
}

policy::Checkpoint train(
    const Dataset& ds, const policy::PolicyConfig& pcfg, const TrainConfig& tcfg,
    const std::string& meta,
    const std::function<void(const TrainLogRow&)>& on_log,
    const std::function<void(long long, const policy::Checkpoint&)>& on_checkpoint) {
  Trainer trainer(pcfg, tcfg, ds);
  for (long long step = 0; step < tcfg.total_steps; ++step) {
    const double loss = trainer.step(step);
    if (on_log && (step % std::max(1, tcfg.log_every) == 0 ||
                   step + 1 == tcfg.total_steps)) {
      on_log({step, cosine_lr(tcfg.peak_lr, step, tcfg.total_steps), loss});
    }
    if (on_checkpoint && tcfg.checkpoint_every > 0 &&
        (step + 1) % tcfg.checkpoint_every == 0) {
      on_checkpoint(step + 1, trainer.checkpoint(step + 1, meta));
    }
  }
  return trainer.checkpoint(tcfg.total_steps, meta);
}

}  // namespace kil::train
