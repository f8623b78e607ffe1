#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "kil/perception.hpp"
#include "kil/policy.hpp"
#include "kil/worldsim.hpp"

namespace kil::eval {

// Regularized incomplete beta I_x(a, b) via continued fraction.
double regularized_incomplete_beta(double a, double b, double x);

// Inverse Beta CDF by bisection to 1e-10.
double beta_inv(double p, double a, double b);

// Exact binomial interval: lo = BetaInv(alpha/2; k, n-k+1),
// hi = BetaInv(1-alpha/2; k+1, n-k), with the k=0 / k=n boundary cases.
// Throws "invalid-counts".
std::pair<double, double> clopper_pearson_ci(int k, int n,
                                             double confidence = 0.95);

// mu_hat +/- 1.96 * sigma_hat / sqrt(N) with the sample (N-1) deviation.
// Throws "insufficient-samples" when N < 2.
std::pair<double, double> wald_ci(const std::vector<double>& scores,
                                  double confidence = 0.95);

struct EvalProtocol {
  int n_per_split = 10;
  std::vector<sim::Split> splits = {sim::Split::InDist, sim::Split::UnseenObj,
                                    sim::Split::SceneVar};
  std::uint64_t shared_seed_base = 0;
  std::optional<double> orientation_override;  // radians half-range
  percep::ExtractionMethod extraction = percep::ExtractionMethod::Oracle;
  percep::PerceptionConfig perception;

  void validate() const;
};

struct RolloutRecord {
  std::string policy;
  std::string task;
  std::string split;
  int index = 0;
  std::uint64_t seed = 0;
  bool success = false;
  std::string failure_reason;
  double completion = 0.0;
  int steps = 0;
  double kp_error_mean_px = 0.0;
  double kp_error_max_px = 0.0;
};

// Raw observation frame handed to a policy (unnormalized).
struct ObsFrame {
  Eigen::MatrixXd keypoints;  // K x 3 world
  Eigen::MatrixXd sims;       // K x K or empty
  std::vector<std::uint8_t> valid;
  sim::Proprio proprio;
};

// A policy that predicts a denormalized chunk of pred_horizon actions. The
// current scene is passed for oracle policies (the learned policy ignores
// it).
class ChunkPolicy {
 public:
  virtual ~ChunkPolicy() = default;
  virtual void begin_episode(const sim::SceneState& scene0, std::uint64_t seed);
  virtual nn::Mat predict(const std::vector<ObsFrame>& history,
                          const sim::SceneState& scene, Rng& rng) = 0;
  virtual int pred_horizon() const = 0;
  virtual int act_horizon() const = 0;
};

// DDIM-sampling policy loaded from a checkpoint.
class DiffusionChunkPolicy : public ChunkPolicy {
 public:
  explicit DiffusionChunkPolicy(const policy::Checkpoint& ckpt);

  nn::Mat predict(const std::vector<ObsFrame>& history,
                  const sim::SceneState& scene, Rng& rng) override;
  int pred_horizon() const override { return net_.config().pred_horizon; }
  int act_horizon() const override { return net_.config().act_horizon; }
  const policy::PolicyConfig& config() const { return net_.config(); }

 private:
  policy::PolicyNet net_;
  policy::NormStats obs_stats_, act_stats_;
};

// The scripted expert wrapped in the chunked-control protocol: it simulates
// its own future to fill a chunk. Validates the rollout loop and the
// simulator against a known-good controller.
class ExpertChunkPolicy : public ChunkPolicy {
 public:
  ExpertChunkPolicy(const sim::TaskSpec& task, int pred_horizon = 16,
                    int act_horizon = 8);

  void begin_episode(const sim::SceneState& scene0, std::uint64_t seed) override;
  nn::Mat predict(const std::vector<ObsFrame>& history,
                  const sim::SceneState& scene, Rng& rng) override;
  int pred_horizon() const override { return pred_horizon_; }
  int act_horizon() const override { return act_horizon_; }

 private:
  sim::TaskSpec task_;
  int pred_horizon_, act_horizon_;
  std::optional<sim::ScriptedExpert> expert_;
};

// Chunked-control rollout: keeps a T_o observation history (first frame
// duplicated), extracts keypoints per simulator step, executes act_horizon
// actions per inference, and terminates on task status or the time limit.
// Extraction or policy errors become failure records, never exceptions.
RolloutRecord rollout(ChunkPolicy& pol, const sim::TaskSpec& task,
                      const sim::TaskAssets& assets,
                      const sim::SceneState& scene0,
                      percep::KeypointExtractor& extractor,
                      std::uint64_t rollout_seed);

// Spec-shaped convenience wrapper around a checkpoint.
RolloutRecord rollout_checkpoint(const policy::Checkpoint& ckpt,
                                 const sim::TaskSpec& task,
                                 const sim::TaskAssets& assets,
                                 const sim::SceneState& scene0,
                                 percep::ExtractionMethod method,
                                 const percep::PerceptionConfig& pcfg,
                                 std::uint64_t rollout_seed);

using PolicyFactory = std::function<std::unique_ptr<ChunkPolicy>()>;

struct PolicyEntry {
  std::string name;
  PolicyFactory make;
};

// Scene seed for one protocol cell; identical across policies by
// construction.
std::uint64_t protocol_scene_seed(const EvalProtocol& protocol,
                                  const std::string& task_name, sim::Split split,
                                  int index);

// Runs every (policy, task, split, index) cell with shared scene seeds.
// `jobs` parallelizes across cells; records come back sorted by
// (policy, task, split, index) regardless.
std::vector<RolloutRecord> run_protocol(const std::vector<PolicyEntry>& policies,
                                        const std::vector<sim::TaskSpec>& tasks,
                                        const EvalProtocol& protocol, int jobs = 1);

struct Report {
  std::string text;
  std::string json;  // serialized document with records and aggregates
};

// Table-I style layout: per-task split counts, split averages, overall
// average and Clopper-Pearson CI per policy (Wald CI on completion when any
// multi-instance style completion scoring is present).
Report make_report(const std::vector<RolloutRecord>& records);

std::vector<RolloutRecord> records_from_report_json(const std::string& json_text);

}  // namespace kil::eval
