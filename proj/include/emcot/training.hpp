#pragma once

#include "emcot/annotator.hpp"
#include "emcot/envsim.hpp"
#include "emcot/model.hpp"
#include "emcot/tokenstream.hpp"

#include <map>
#include <string>
#include <utility>
#include <vector>

namespace emcot::training {

struct StageConfig {
  std::string stage = "pretrain";  // "pretrain" | "finetune"
  double lr = 1e-4;
  int warmup_steps = 100;
  int total_steps = 2000;
  double w_ce = 0.25, w_mse = 0.5, w_l1 = 1.0;
  std::vector<std::pair<std::string, double>> mixture;  // kind -> ratio
  int batch = 16;
  uint64_t seed = 0;
  int checkpoint_every = 500;
  double weight_decay = 0.0;

  void validate() const;
  static StageConfig from(const RunConfig& cfg, const std::string& stage);
};

// Linear warm-up to the configured rate, constant afterwards. Step 0 has
// rate 0; the full rate is reached at step == warmup_steps.
double lr_at(const StageConfig& sc, int step);

// Adam with decoupled weight decay; t counts optimizer steps from 1.
// Consumes and clears the accumulated gradients.
void adam_step(ParamStore& params, double lr, int64_t t, double weight_decay = 0.0,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

void save_optimizer_state(const std::string& path, const ParamStore& params, int64_t t);
// Returns the stored step count; parameter shapes must already match.
int64_t load_optimizer_state(const std::string& path, ParamStore& params);

// Weighted categorical draw over sample kinds.
class MixtureSampler {
 public:
  explicit MixtureSampler(std::vector<std::pair<std::string, double>> kinds);
  const std::string& draw(Rng& rng) const;

 private:
  std::vector<std::pair<std::string, double>> kinds_;
  double total_ = 0;
};

// Trajectory shards plus their annotation records, linked by trajectory_id.
struct Dataset {
  std::vector<envsim::Trajectory> trajectories;
  std::vector<annotator::CotRecord> records;  // parallel to trajectories
  std::string config_hash;
};

void save_manifest(const std::string& path, const std::string& traj_file,
                   const std::string& records_file, const std::string& config_hash);
Dataset load_dataset(const std::string& manifest_path);

// Fits the model's frozen latent codec on every rendered frame of the
// dataset; gates come from train.codec_mse_gate / train.codec_psnr_gate.
model::CodecReport fit_codec(model::Model& model, const Dataset& data,
                             const RunConfig& cfg);

// Scene question answerable from the simulator's initial state for the
// trajectory's seed: object color, relative position, or count.
tokenstream::VqaSample make_vqa_sample(const envsim::Env& env,
                                       const envsim::Trajectory& traj,
                                       const model::Model& model, Rng& rng);

struct StepLog {
  int step = 0;
  double lr = 0;
  double total = 0;
  double ce = -1, mse = -1, l1 = -1;  // -1 when the component is absent
};

struct TrainReport {
  std::string stage;
  std::vector<StepLog> steps;
  std::map<std::string, long> mixture_counts;
  double wall_seconds = 0;
  std::vector<std::string> checkpoints;
  std::string config_hash;

  Json to_json() const;
};

// One optimizer pass over a stage. Deterministic given the seed: every step
// draws from a freshly derived per-step generator, so resuming from a
// checkpoint reproduces an uninterrupted run bit-exactly. Periodic
// checkpoints (with optimizer sidecars) land in out_dir. Throws on a NaN
// component loss or on divergence (total > 10x the initial loss for 100
// consecutive steps).
TrainReport run_stage(model::Model& model, const Dataset& data, const StageConfig& sc,
                      const RunConfig& cfg, const std::string& out_dir,
                      int start_step = 0);

}  // namespace emcot::training
