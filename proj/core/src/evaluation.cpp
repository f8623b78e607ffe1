#include "kil/evaluation.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

namespace kil::eval {

using nlohmann::json;
using nn::Mat;

void EvalProtocol::validate() const {
  require(n_per_split >= 1, "invalid-protocol", "n_per_split must be >= 1");
  require(!splits.empty(), "invalid-protocol", "no splits selected");
  perception.validate();
}

void ChunkPolicy::begin_episode(const sim::SceneState&, std::uint64_t) {}

DiffusionChunkPolicy::DiffusionChunkPolicy(const policy::Checkpoint& ckpt)
    : net_(policy::net_from_checkpoint(ckpt)),
      obs_stats_(ckpt.obs_stats),
      act_stats_(ckpt.act_stats) {}

nn::Mat DiffusionChunkPolicy::predict(const std::vector<ObsFrame>& history,
                                      const sim::SceneState& scene, Rng& rng) {
  (void)scene;
  const auto& cfg = net_.config();
  const int t_o = cfg.obs_horizon;
  const int kk = cfg.keypoint_slots;
  require(static_cast<int>(history.size()) == t_o, "shape",
          "history length must equal obs_horizon");

  policy::ObsBatch obs;
  obs.keypoints.resize(t_o * kk, 3);
  obs.proprio.resize(t_o, 7);
  if (cfg.append_similarities) obs.sims.resize(t_o * kk, kk);
  for (int f = 0; f < t_o; ++f) {
    const ObsFrame& fr = history[f];
    require(static_cast<int>(fr.keypoints.rows()) == kk, "shape",
            "extraction width does not match the checkpoint");
    const Eigen::RowVectorXd row = policy::flatten_observation(
        fr.keypoints, fr.proprio, fr.sims, cfg.append_similarities);
    const Mat normed = policy::normalize_rows(row, obs_stats_);
    for (int k = 0; k < kk; ++k) {
      obs.keypoints.row(f * kk + k) = normed.block(0, 3 * k, 1, 3);
    }
    obs.proprio.row(f) = normed.block(0, 3 * kk, 1, 7);
    if (cfg.append_similarities) {
      for (int k = 0; k < kk; ++k) {
        obs.sims.row(f * kk + k) = normed.block(0, 3 * kk + 7 + kk * k, 1, kk);
      }
    }
  }

  const Mat chunk_flat = net_.sample_chunk(obs, rng);
  Mat chunk(cfg.pred_horizon, cfg.action_dim());
  for (int j = 0; j < cfg.pred_horizon; ++j) {
    chunk.row(j) = chunk_flat.block(0, j * 10, 1, 10);
  }
  return policy::denormalize_rows(chunk, act_stats_);
}

ExpertChunkPolicy::ExpertChunkPolicy(const sim::TaskSpec& task, int pred_horizon,
                                     int act_horizon)
    : task_(task), pred_horizon_(pred_horizon), act_horizon_(act_horizon) {}

void ExpertChunkPolicy::begin_episode(const sim::SceneState& scene0,
                                      std::uint64_t seed) {
  expert_.emplace(task_, scene0, mix64(seed, 0xE85EEDULL));
}

nn::Mat ExpertChunkPolicy::predict(const std::vector<ObsFrame>& history,
                                   const sim::SceneState& scene, Rng& rng) {
  (void)history;
  (void)rng;
  require(expert_.has_value(), "internal", "begin_episode not called");
  Mat chunk(pred_horizon_, 10);
  sim::SceneState sim_scene = scene;
  for (int j = 0; j < pred_horizon_; ++j) {
    const sim::Action a = expert_->act(sim_scene);
    chunk.row(j) = a.transpose();
    sim_scene = sim::step(sim_scene, a);
  }
  return chunk;
}

namespace {

struct SlotLayout {
  std::vector<std::string> category;  // per slot
  std::vector<int> kp_index;
};

SlotLayout slot_layout(const sim::TaskSpec& task, const sim::TaskAssets& assets) {
  SlotLayout layout;
  for (const auto& role : task.categories) {
    const auto& cat = assets.find(role.category);
    const int kk = static_cast<int>(cat.training.front()->keypoint_offsets.size());
    for (int i = 0; i < role.n_instances; ++i) {
      for (int k = 0; k < kk; ++k) {
        layout.category.push_back(role.category);
        layout.kp_index.push_back(k);
      }
    }
  }
  return layout;
}

}  // namespace

RolloutRecord rollout(ChunkPolicy& pol, const sim::TaskSpec& task,
                      const sim::TaskAssets& assets,
                      const sim::SceneState& scene0,
                      percep::KeypointExtractor& extractor,
                      std::uint64_t rollout_seed) {
  RolloutRecord rec;
  rec.task = task.name;
  rec.seed = rollout_seed;

  const geom::CameraModel camera = sim::default_camera();
  const SlotLayout layout = slot_layout(task, assets);
  const int slots = extractor.keypoint_slots();
  const int t_o = 2;

  double err_sum = 0.0, err_max = 0.0;
  long long err_count = 0;

  sim::SceneState scene = scene0;
  sim::TaskStatus status;
  try {
    extractor.begin_episode(scene0, mix64(rollout_seed, 0xE87ACULL));
    pol.begin_episode(scene0, mix64(rollout_seed, 0x901CULL));
    Rng rng(mix64(rollout_seed, 0x5A3AULL));

    auto observe = [&](const sim::SceneState& s, int t) {
      const percep::Extraction ext = extractor.extract(s, t);
      ObsFrame frame;
      frame.keypoints = ext.keypoints_world;
      frame.sims = ext.similarities;
      frame.valid = ext.valid;
      frame.proprio = sim::proprio_of(s);
      // Extraction-vs-truth pixel error (nearest same-semantic ground truth).
      const std::vector<int> order = sim::slot_instance_order(task, s);
      const auto gt = sim::ground_truth_keypoints(task, s, order);
      for (int i = 0; i < slots; ++i) {
        if (!ext.valid[i]) continue;
        double best = std::numeric_limits<double>::infinity();
        for (int j = 0; j < slots; ++j) {
          if (layout.category[j] != layout.category[i] ||
              layout.kp_index[j] != layout.kp_index[i]) {
            continue;
          }
          try {
            const geom::PixelDepth pd = geom::project(camera, gt[j]);
            const double du = ext.keypoints_px(i, 0) - pd.u;
            const double dv = ext.keypoints_px(i, 1) - pd.v;
            best = std::min(best, std::sqrt(du * du + dv * dv));
          } catch (const Error&) {
          }
        }
        if (std::isfinite(best)) {
          err_sum += best;
          err_max = std::max(err_max, best);
          ++err_count;
        }
      }
      return frame;
    };

    std::vector<ObsFrame> history(t_o, observe(scene, 0));
    status = sim::check_success(task, scene);

    while (!status.terminal()) {
      const Mat chunk = pol.predict(history, scene, rng.child(scene.time_step));
      require(chunk.rows() >= pol.act_horizon() && chunk.cols() == 10, "shape",
              "policy returned a malformed chunk");
      for (int j = 0; j < pol.act_horizon(); ++j) {
        sim::Action a = chunk.row(j).transpose();
        scene = sim::step(scene, a);
        status = sim::check_success(task, scene);
        history.erase(history.begin());
        history.push_back(observe(scene, scene.time_step));
        if (status.terminal()) break;
      }
    }
    rec.success = status.success();
    rec.failure_reason = status.failure_reason;
  } catch (const Error& e) {
    rec.success = false;
    rec.failure_reason = e.code();
  } catch (const std::exception& e) {
    rec.success = false;
    rec.failure_reason = std::string("error: ") + e.what();
  }

  rec.steps = scene.time_step;
  rec.completion = rec.success ? 1.0 : sim::completion_score(task, scene);
  rec.kp_error_mean_px = err_count > 0 ? err_sum / err_count : 0.0;
  rec.kp_error_max_px = err_max;
  return rec;
}

RolloutRecord rollout_checkpoint(const policy::Checkpoint& ckpt,
                                 const sim::TaskSpec& task,
                                 const sim::TaskAssets& assets,
                                 const sim::SceneState& scene0,
                                 percep::ExtractionMethod method,
                                 const percep::PerceptionConfig& pcfg,
                                 std::uint64_t rollout_seed) {
  DiffusionChunkPolicy pol(ckpt);
  percep::KeypointExtractor extractor(task, assets, method, pcfg,
                                      sim::default_camera(),
                                      ckpt.config.append_similarities);
  return rollout(pol, task, assets, scene0, extractor, rollout_seed);
}

std::uint64_t protocol_scene_seed(const EvalProtocol& protocol,
                                  const std::string& task_name, sim::Split split,
                                  int index) {
  return mix64(protocol.shared_seed_base, hash_str(task_name),
               static_cast<std::uint64_t>(split) + 1, index);
}

std::vector<RolloutRecord> run_protocol(const std::vector<PolicyEntry>& policies,
                                        const std::vector<sim::TaskSpec>& tasks,
                                        const EvalProtocol& protocol, int jobs) {
  protocol.validate();
  require(!policies.empty() && !tasks.empty(), "invalid-protocol",
          "need at least one policy and one task");

  struct Cell {
    int policy, task, split_idx, index;
  };
  std::vector<Cell> cells;
  for (int p = 0; p < static_cast<int>(policies.size()); ++p) {
    for (int t = 0; t < static_cast<int>(tasks.size()); ++t) {
      for (int s = 0; s < static_cast<int>(protocol.splits.size()); ++s) {
        for (int i = 0; i < protocol.n_per_split; ++i) {
          cells.push_back({p, t, s, i});
        }
      }
    }
  }

  std::vector<RolloutRecord> records(cells.size());
  std::exception_ptr first_error;

#pragma omp parallel for schedule(dynamic) num_threads(std::max(1, jobs))
  for (int c = 0; c < static_cast<int>(cells.size()); ++c) {
    try {
      const Cell& cell = cells[c];
      sim::TaskSpec task = tasks[cell.task];
      if (protocol.orientation_override.has_value()) {
        task.orientation_range = *protocol.orientation_override;
      }
      const sim::TaskAssets assets = sim::builtin_assets(task);
      const sim::Split split = protocol.splits[cell.split_idx];
      const std::uint64_t scene_seed =
          protocol_scene_seed(protocol, task.name, split, cell.index);
      const sim::SceneState scene0 =
          sim::sample_initial_scene(task, assets, split, scene_seed);

      // Rollout randomness is split per policy so adding policies never
      // perturbs scene seeds.
      const std::uint64_t rollout_seed =
          mix64(scene_seed, hash_str(policies[cell.policy].name), 0x9011ULL);

      auto pol = policies[cell.policy].make();
      percep::KeypointExtractor extractor(
          task, assets, protocol.extraction, protocol.perception,
          sim::default_camera(), /*with_similarities=*/true);
      RolloutRecord rec =
          rollout(*pol, task, assets, scene0, extractor, rollout_seed);
      rec.policy = policies[cell.policy].name;
      rec.split = sim::split_name(split);
      rec.index = cell.index;
      records[c] = std::move(rec);
    } catch (...) {
#pragma omp critical
      if (!first_error) first_error = std::current_exception();
    }
  }
  if (first_error) std::rethrow_exception(first_error);
  return records;
}

namespace {

json record_to_json(const RolloutRecord& r) {
  return json{{"policy", r.policy},
              {"task", r.task},
              {"split", r.split},
              {"index", r.index},
              {"seed", r.seed},
              {"outcome", r.success ? "success" : "failure"},
              {"failure_reason", r.failure_reason},
              {"completion", r.completion},
              {"steps", r.steps},
              {"kp_error_stats",
               {{"mean_px", r.kp_error_mean_px}, {"max_px", r.kp_error_max_px}}}};
}

RolloutRecord record_from_json(const json& j) {
  RolloutRecord r;
  r.policy = j.at("policy").get<std::string>();
  r.task = j.at("task").get<std::string>();
  r.split = j.at("split").get<std::string>();
  r.index = j.at("index").get<int>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.success = j.at("outcome").get<std::string>() == "success";
  r.failure_reason = j.at("failure_reason").get<std::string>();
  r.completion = j.at("completion").get<double>();
  r.steps = j.at("steps").get<int>();
  r.kp_error_mean_px = j.at("kp_error_stats").at("mean_px").get<double>();
  r.kp_error_max_px = j.at("kp_error_stats").at("max_px").get<double>();
  return r;
}

std::vector<std::string> ordered_unique(const std::vector<RolloutRecord>& records,
                                        const std::function<std::string(const RolloutRecord&)>& get) {
  std::vector<std::string> out;
  for (const auto& r : records) {
    const std::string v = get(r);
    if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
  }
  return out;
}

std::string pct(double x) {
  std::ostringstream os;
  os << static_cast<int>(std::lround(100.0 * x));
  return os.str();
}

}  // namespace

Report make_report(const std::vector<RolloutRecord>& records) {
  Report report;
  json doc;
  doc["records"] = json::array();
  for (const auto& r : records) doc["records"].push_back(record_to_json(r));

  const auto policies =
      ordered_unique(records, [](const RolloutRecord& r) { return r.policy; });
  const auto tasks =
      ordered_unique(records, [](const RolloutRecord& r) { return r.task; });
  const auto splits =
      ordered_unique(records, [](const RolloutRecord& r) { return r.split; });

  std::ostringstream os;
  if (records.empty()) {
    os << "(no rollout records)\n";
    doc["policies"] = json::array();
    report.text = os.str();
    report.json = doc.dump(2);
    return report;
  }

  os << "policy";
  for (const auto& t : tasks) {
    for (const auto& s : splits) os << " | " << t << ":" << s;
  }
  for (const auto& s : splits) os << " | avg:" << s << "%";
  os << " | avg% | ci% | completion | wald\n";

  json policy_rows = json::array();
  for (const auto& pname : policies) {
    os << pname;
    json row;
    row["policy"] = pname;
    json cell_list = json::array();
    int total_k = 0, total_n = 0;
    std::vector<double> completions;
    std::map<std::string, std::pair<int, int>> split_totals;

    for (const auto& t : tasks) {
      for (const auto& s : splits) {
        int k = 0, n = 0;
        double completion_sum = 0.0;
        for (const auto& r : records) {
          if (r.policy != pname || r.task != t || r.split != s) continue;
          ++n;
          if (r.success) ++k;
          completion_sum += r.completion;
          completions.push_back(r.completion);
        }
        total_k += k;
        total_n += n;
        split_totals[s].first += k;
        split_totals[s].second += n;
        os << " | " << k << "/" << n;
        cell_list.push_back(json{{"task", t},
                                 {"split", s},
                                 {"successes", k},
                                 {"trials", n},
                                 {"completion_sum", completion_sum}});
      }
    }

    for (const auto& s : splits) {
      const auto [k, n] = split_totals[s];
      os << " | " << (n > 0 ? pct(static_cast<double>(k) / n) : "-");
    }

    const auto [lo, hi] = clopper_pearson_ci(total_k, std::max(total_n, 1));
    os << " | " << pct(static_cast<double>(total_k) / std::max(total_n, 1));
    os << " | [" << pct(lo) << ", " << pct(hi) << "]";

    double mean_completion = 0.0;
    for (double c : completions) mean_completion += c;
    mean_completion /= std::max<std::size_t>(completions.size(), 1);
    os << " | " << pct(mean_completion);
    if (completions.size() >= 2) {
      const auto [wlo, whi] = wald_ci(completions);
      os << " | [" << pct(wlo) << ", " << pct(whi) << "]";
      row["wald_ci"] = {wlo, whi};
    } else {
      os << " | -";
      row["wald_ci"] = nullptr;
    }
    os << "\n";

    row["cells"] = cell_list;
    row["successes"] = total_k;
    row["trials"] = total_n;
    row["ci"] = {lo, hi};
    row["mean_completion"] = mean_completion;
    policy_rows.push_back(row);
  }

  doc["policies"] = policy_rows;
  report.text = os.str();
  report.json = doc.dump(2);
  return report;
}

std::vector<RolloutRecord> records_from_report_json(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    fail("report-io", std::string("invalid results JSON: ") + e.what());
  }
  std::vector<RolloutRecord> out;
  for (const auto& j : doc.at("records")) out.push_back(record_from_json(j));
  return out;
}

}  // namespace kil::eval
