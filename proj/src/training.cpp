#include "emcot/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace emcot::training {

using model::Model;
using tokenstream::PackedSequence;
using tokenstream::Role;
using tokenstream::SampleSource;
using tokenstream::StreamOptions;
using tokenstream::Vocabulary;

// --- Stage configuration ---

StageConfig StageConfig::from(const RunConfig& cfg, const std::string& stage) {
  StageConfig sc;
  sc.stage = stage;
  sc.warmup_steps = static_cast<int>(cfg.integer("train.warmup_steps"));
  sc.total_steps = static_cast<int>(cfg.integer("train.steps"));
  sc.batch = static_cast<int>(cfg.integer("train.batch"));
  sc.seed = static_cast<uint64_t>(cfg.integer("train.seed"));
  sc.checkpoint_every = static_cast<int>(cfg.integer("train.checkpoint_every"));
  if (stage == "pretrain") {
    sc.lr = cfg.num("train.lr_pretrain");
    sc.w_ce = cfg.num("train.w_ce");
    sc.w_mse = cfg.num("train.w_mse");
    sc.w_l1 = cfg.num("train.w_l1");
    sc.mixture = {{"vqa", cfg.num("train.mix_vqa")},
                  {"vg", cfg.num("train.mix_vg")},
                  {"ap", cfg.num("train.mix_ap")}};
  } else if (stage == "finetune") {
    sc.lr = cfg.num("train.lr_finetune");
    sc.w_ce = sc.w_mse = sc.w_l1 = 1.0;  // unweighted reasoning + subgoal + action
    sc.mixture = {{"emcot", cfg.num("train.finetune_emcot_ratio")},
                  {"vqa", cfg.num("train.finetune_vqa_ratio")}};
  } else {
    throw std::invalid_argument("unknown training stage '" + stage + "'");
  }
  sc.validate();
  return sc;
}

void StageConfig::validate() const {
  if (stage != "pretrain" && stage != "finetune")
    throw std::invalid_argument("unknown training stage '" + stage + "'");
  if (lr <= 0 || w_ce <= 0 || w_mse <= 0 || w_l1 <= 0)
    throw std::invalid_argument("stage config: rates and loss weights must be positive");
  if (warmup_steps < 0 || total_steps < 1 || batch < 1 || checkpoint_every < 1)
    throw std::invalid_argument("stage config: step counts must be positive");
  if (mixture.empty()) throw std::invalid_argument("stage config: empty mixture");
  for (const auto& [kind, w] : mixture)
    if (w <= 0) throw std::invalid_argument("stage config: mixture ratio for '" + kind +
                                            "' must be positive");
}

double lr_at(const StageConfig& sc, int step) {
  if (sc.warmup_steps <= 0 || step >= sc.warmup_steps) return sc.lr;
  return sc.lr * static_cast<double>(step) / sc.warmup_steps;
}

// --- Optimizer ---

void adam_step(ParamStore& params, double lr, int64_t t, double weight_decay,
               double beta1, double beta2, double eps) {
  if (t < 1) throw std::invalid_argument("adam_step: t counts from 1");
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (auto& p : params.all()) {
    p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * p.grad;
    p.adam_v = beta2 * p.adam_v.array() + (1.0 - beta2) * p.grad.array().square();
    Mat update = (p.adam_m / bc1).array() / ((p.adam_v / bc2).array().sqrt() + eps);
    if (weight_decay != 0.0) update += weight_decay * p.value;
    p.value -= lr * update;
  }
  params.zero_grad();
}

namespace {
constexpr char kOptMagic[] = "EMCOTOP1\n";
}

void save_optimizer_state(const std::string& path, const ParamStore& params, int64_t t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path);
  out.write(kOptMagic, sizeof(kOptMagic) - 1);
  uint64_t step = static_cast<uint64_t>(t);
  uint64_t n = params.all().size();
  out.write(reinterpret_cast<const char*>(&step), sizeof(step));
  out.write(reinterpret_cast<const char*>(&n), sizeof(n));
  for (const auto& p : params.all()) {
    out.write(reinterpret_cast<const char*>(p.adam_m.data()), p.adam_m.size() * sizeof(double));
    out.write(reinterpret_cast<const char*>(p.adam_v.data()), p.adam_v.size() * sizeof(double));
  }
  if (!out) throw std::runtime_error("short write to " + path);
}

int64_t load_optimizer_state(const std::string& path, ParamStore& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  char magic[sizeof(kOptMagic) - 1];
  in.read(magic, sizeof(magic));
  if (!in || std::string(magic, sizeof(magic)) != std::string(kOptMagic, sizeof(magic)))
    throw std::runtime_error("not an optimizer state file: " + path);
  uint64_t step = 0, n = 0;
  in.read(reinterpret_cast<char*>(&step), sizeof(step));
  in.read(reinterpret_cast<char*>(&n), sizeof(n));
  if (!in || n != params.all().size())
    throw std::runtime_error("optimizer state does not match the parameter set");
  for (auto& p : params.all()) {
    in.read(reinterpret_cast<char*>(p.adam_m.data()), p.adam_m.size() * sizeof(double));
    in.read(reinterpret_cast<char*>(p.adam_v.data()), p.adam_v.size() * sizeof(double));
  }
  if (!in) throw std::runtime_error("truncated optimizer state: " + path);
  return static_cast<int64_t>(step);
}

// --- Mixture sampling ---

MixtureSampler::MixtureSampler(std::vector<std::pair<std::string, double>> kinds)
    : kinds_(std::move(kinds)) {
  for (const auto& [kind, w] : kinds_) {
    if (w <= 0) throw std::invalid_argument("mixture ratio must be positive");
    total_ += w;
  }
  if (kinds_.empty()) throw std::invalid_argument("empty mixture");
}

const std::string& MixtureSampler::draw(Rng& rng) const {
  std::uniform_real_distribution<double> uni(0.0, total_);
  double u = uni(rng);
  double acc = 0;
  for (const auto& [kind, w] : kinds_) {
    acc += w;
    if (u < acc) return kind;
  }
  return kinds_.back().first;
}

// --- Dataset ---

void save_manifest(const std::string& path, const std::string& traj_file,
                   const std::string& records_file, const std::string& config_hash) {
  Json j{{"tool_version", kToolVersion},
         {"config_hash", config_hash},
         {"trajectories", traj_file},
         {"records", records_file}};
  write_file(path, j.dump(2) + "\n");
}

namespace {

std::string resolve(const std::string& manifest_path, const std::string& entry) {
  std::filesystem::path p(entry);
  if (p.is_absolute()) return entry;
  return (std::filesystem::path(manifest_path).parent_path() / p).string();
}

std::string traj_id(const envsim::Trajectory& t) {
  return t.task.id + ":" + std::to_string(t.seed);
}

}  // namespace

Dataset load_dataset(const std::string& manifest_path) {
  Json j = Json::parse(read_file(manifest_path));
  Dataset d;
  d.config_hash = j.at("config_hash").get<std::string>();
  d.trajectories =
      envsim::load_trajectories(resolve(manifest_path, j.at("trajectories")));
  d.records = annotator::load_records(resolve(manifest_path, j.at("records")));
  if (d.records.size() != d.trajectories.size())
    throw std::runtime_error("dataset: trajectory and record counts differ");
  for (size_t i = 0; i < d.records.size(); ++i)
    if (d.records[i].trajectory_id != traj_id(d.trajectories[i]))
      throw std::runtime_error("dataset: record " + std::to_string(i) +
                               " does not match its trajectory");
  return d;
}

model::CodecReport fit_codec(model::Model& model, const Dataset& data,
                             const RunConfig& cfg) {
  std::vector<Image> corpus;
  for (const auto& t : data.trajectories)
    for (const auto& f : t.frames) corpus.push_back(f.obs.image);
  return model::fit_latent_codec(model.codec(), corpus, cfg.num("train.codec_mse_gate"),
                                 cfg.num("train.codec_psnr_gate"));
}

// --- Synthetic VQA ---

tokenstream::VqaSample make_vqa_sample(const envsim::Env& env,
                                       const envsim::Trajectory& traj,
                                       const model::Model& model, Rng& rng) {
  envsim::WorldState state = env.reset(traj.task, traj.seed);
  envsim::Observation obs = env.observe(state);

  std::vector<const envsim::Object*> blocks, named;
  for (const auto& o : state.objects) {
    if (o.shape == "block") blocks.push_back(&o);
    if (!o.distractor) named.push_back(&o);
  }

  tokenstream::VqaSample s;
  s.image = model.encode_observation(obs.image);
  s.frame = 0;
  std::uniform_int_distribution<int> pick(0, 2);
  int kind = pick(rng);
  if (kind == 2 && named.size() < 2) kind = 0;
  if (kind == 1 && blocks.empty()) kind = 0;
  switch (kind) {
    case 0: {
      s.question = "how many blocks are on the table";
      s.answer = std::to_string(blocks.size());
      break;
    }
    case 1: {
      const envsim::Object* best = nullptr;
      double best_d = 0;
      for (const auto* b : blocks) {
        double d = std::hypot(b->x - state.arms[0].ee.x(), b->y - state.arms[0].ee.y());
        if (!best || d < best_d) {
          best = b;
          best_d = d;
        }
      }
      s.question = "what color is the block nearest to the left arm";
      s.answer = best->color;
      break;
    }
    default: {
      std::uniform_int_distribution<size_t> pa(0, named.size() - 1);
      size_t ia = pa(rng);
      size_t ib = (ia + 1) % named.size();
      const auto *a = named[ia], *b = named[ib];
      s.question =
          "is the " + a->color + " " + a->shape + " left or right of the " + b->color +
          " " + b->shape;
      s.answer = a->x <= b->x ? "left" : "right";
      break;
    }
  }
  return s;
}

// --- Stage runner ---

Json TrainReport::to_json() const {
  Json steps_j = Json::array();
  for (const auto& s : steps)
    steps_j.push_back({{"step", s.step},
                       {"lr", s.lr},
                       {"total", s.total},
                       {"ce", s.ce},
                       {"mse", s.mse},
                       {"l1", s.l1}});
  return Json{{"tool_version", kToolVersion},
              {"stage", stage},
              {"config_hash", config_hash},
              {"wall_seconds", wall_seconds},
              {"mixture_counts", mixture_counts},
              {"checkpoints", checkpoints},
              {"steps", steps_j}};
}

namespace {

SampleSource make_source(const Dataset& data, size_t i, const Model& model) {
  const envsim::Trajectory& traj = data.trajectories[i];
  SampleSource src;
  src.record = &data.records[i];
  src.num_frames = static_cast<int>(traj.frames.size());
  src.encode = [&traj, &model](int f) {
    f = std::clamp(f, 0, static_cast<int>(traj.frames.size()) - 1);
    return model.encode_observation(traj.frames[f].obs.image);
  };
  src.action = [&traj](int t) {
    t = std::clamp(t, 0, static_cast<int>(traj.frames.size()) - 1);
    return Vec(traj.frames[t].action);
  };
  src.proprio = [&traj](int t) {
    t = std::clamp(t, 0, static_cast<int>(traj.frames.size()) - 1);
    return Vec(traj.frames[t].obs.proprio);
  };
  return src;
}

void check_finite(double v, const char* component, int step) {
  if (!std::isfinite(v))
    throw std::runtime_error(std::string("training aborted: ") + component +
                             " loss is not finite at step " + std::to_string(step));
}

std::string checkpoint_path(const std::string& out_dir, const std::string& stage,
                            int step) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06d", step);
  return (std::filesystem::path(out_dir) / (stage + "_step" + buf + ".ckpt")).string();
}

}  // namespace

TrainReport run_stage(Model& model, const Dataset& data, const StageConfig& sc,
                      const RunConfig& cfg, const std::string& out_dir, int start_step) {
  sc.validate();
  if (data.trajectories.empty()) throw std::invalid_argument("run_stage: empty dataset");
  if (!model.codec().fitted)
    throw std::invalid_argument("run_stage: the latent codec must be fitted first");
  std::filesystem::create_directories(out_dir);

  const Vocabulary vocab;
  const StreamOptions opt = StreamOptions::from(cfg);
  const envsim::Env env(envsim::EnvConfig::from(cfg));
  const MixtureSampler mix(sc.mixture);
  const auto t0 = std::chrono::steady_clock::now();

  TrainReport report;
  report.stage = sc.stage;
  report.config_hash = cfg.hash();
  for (const auto& [kind, w] : sc.mixture) report.mixture_counts[kind] = 0;

  double initial_total = 0;
  int diverged_run = 0;
  for (int step = start_step; step < sc.total_steps; ++step) {
    Rng rng = make_rng(derive_seed(sc.seed, sc.stage + ":step:" + std::to_string(step)));
    std::uniform_int_distribution<size_t> pick_traj(0, data.trajectories.size() - 1);

    std::vector<std::vector<tokenstream::TokenRecord>> seqs;
    for (int b = 0; b < sc.batch; ++b) {
      const std::string& kind = mix.draw(rng);
      report.mixture_counts[kind]++;
      size_t i = pick_traj(rng);
      SampleSource src = make_source(data, i, model);
      std::uniform_int_distribution<int> pick_t(0, src.num_frames - 1);
      int t = pick_t(rng);
      if (kind == "emcot")
        seqs.push_back(tokenstream::assemble_emcot_sequence(src, t, opt, vocab));
      else if (kind == "vg")
        seqs.push_back(tokenstream::assemble_vg_sequence(src, t, opt, vocab));
      else if (kind == "ap")
        seqs.push_back(tokenstream::assemble_ap_sequence(src, t, opt, vocab));
      else if (kind == "vqa")
        seqs.push_back(tokenstream::assemble_vqa_sequence(
            make_vqa_sample(env, data.trajectories[i], model, rng), vocab));
      else
        throw std::invalid_argument("unknown mixture kind '" + kind + "'");
    }

    auto packs = tokenstream::pack_samples(std::move(seqs), opt);
    const double inv = 1.0 / static_cast<double>(packs.size());
    double total = 0, ce_sum = 0, mse_sum = 0, l1_sum = 0;
    long ce_n = 0, mse_n = 0, l1_n = 0;
    model.params().zero_grad();
    for (auto& pack : packs) {
      auto noise = model::apply_flow_noise(pack, rng);
      Graph g;
      auto l = model.losses(g, pack, noise, sc.w_ce, sc.w_mse, sc.w_l1);
      if (l.ce >= 0) {
        double v = g.val(l.ce)(0, 0);
        check_finite(v, "cross-entropy", step);
        ce_sum += v * l.text_count;
        ce_n += l.text_count;
      }
      if (l.mse >= 0) {
        double v = g.val(l.mse)(0, 0);
        check_finite(v, "subgoal flow", step);
        mse_sum += v * l.vis_count;
        mse_n += l.vis_count;
      }
      if (l.l1 >= 0) {
        double v = g.val(l.l1)(0, 0);
        check_finite(v, "action flow", step);
        l1_sum += v * l.act_count;
        l1_n += l.act_count;
      }
      total += g.val(l.total)(0, 0) * inv;
      g.backward(g.weighted_sum({{l.total, inv}}));
    }
    check_finite(total, "total", step);

    StepLog log;
    log.step = step;
    log.lr = lr_at(sc, step);
    log.total = total;
    log.ce = ce_n ? ce_sum / ce_n : -1;
    log.mse = mse_n ? mse_sum / mse_n : -1;
    log.l1 = l1_n ? l1_sum / l1_n : -1;
    report.steps.push_back(log);

    if (step == start_step) initial_total = total;
    diverged_run = total > 10.0 * initial_total ? diverged_run + 1 : 0;
    if (diverged_run >= 100)
      throw std::runtime_error(
          "training aborted: loss exceeded 10x its initial value for 100 consecutive "
          "steps (step " + std::to_string(step) + ")");

    adam_step(model.params(), log.lr, step + 1, sc.weight_decay);

    if ((step + 1) % sc.checkpoint_every == 0 || step + 1 == sc.total_steps) {
      std::string path = checkpoint_path(out_dir, sc.stage, step + 1);
      Json extra{{"stage", sc.stage}, {"step", step + 1}, {"seed", sc.seed}};
      model::save_checkpoint(path, model, report.config_hash,
                             std::to_string(sc.seed), extra);
      save_optimizer_state(path + ".opt", model.params(), step + 1);
      report.checkpoints.push_back(path);
    }
  }

  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace emcot::training
