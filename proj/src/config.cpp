#include "emcot/config.hpp"

#include "emcot/util.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace emcot {

const char* kToolVersion = "0.1.0";

Json RunConfig::defaults() {
  return Json{
      {"env",
       {{"table_size", 16},
        {"image_size", 64},
        {"step_limit", 200},
        {"grasp_radius", 1.5},
        {"max_speed", 1.0},
        {"hold_frames", 4},
        {"image_format", "png"},  // "png" (base64 inline) or "blob" (sibling file)
        {"hard_distractors", 3}}},
      {"thresholds",
       {{"vel", 0.1},
        {"dg", 0.2},
        {"min_idle", 3},
        {"dir", 0.7},
        {"literal_idle_subsegments", false}}},
      {"annotator",
       {{"backend", "template"},  // "template" or "external"
        {"endpoint", ""},
        {"model", ""},
        {"timeout_ms", 5000},
        {"max_retries", 2},
        {"goal_shift_minus_one", false}}},
      {"tokens",
       {{"max_len", 2048},
        {"vg_context_k", 2},
        {"vg_horizon_h", 4},
        {"cross_noise_groups_attend", false}}},
      {"model",
       {{"d_model", 128},
        {"n_layers", 4},
        {"n_heads", 4},
        {"patch", 8},
        {"latent_grid", 8},
        {"latent_channels", 4},
        {"action_dim", 8},
        {"chunk", 16},
        {"flow_steps", 5},
        {"context_frames", 3},}},
      {"train",
       {{"lr_pretrain", 1e-4},
        {"lr_finetune", 5e-5},
        {"warmup_steps", 100},
        {"steps", 2000},
        {"batch", 16},
        {"seed", 0},
        {"w_ce", 0.25},
        {"w_mse", 0.5},
        {"w_l1", 1.0},
        {"mix_vqa", 1},
        {"mix_vg", 1},
        {"mix_ap", 2},
        {"finetune_emcot_ratio", 4},
        {"finetune_vqa_ratio", 1},
        {"checkpoint_every", 500},
        {"codec_mse_gate", 4e-3},
        {"codec_psnr_gate", 25.0}}},
      {"rollout",
       {{"mode", "full"},  // full | no_text | no_vis | none
        {"context", 3},
        {"chunk", 16},
        {"replan_chunks", 1},
        {"flow_steps", 5},
        {"max_text_tokens", 48},
        {"step_limit", 200}}}};
}

namespace {

void check_unknown(const Json& user, const Json& ref, const std::string& prefix) {
  if (!user.is_object()) return;
  for (auto it = user.begin(); it != user.end(); ++it) {
    std::string full = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!ref.contains(it.key()))
      throw std::invalid_argument("config: unknown key '" + full + "'");
    if (it.value().is_object()) check_unknown(it.value(), ref.at(it.key()), full);
  }
}

void merge_into(Json& base, const Json& user) {
  for (auto it = user.begin(); it != user.end(); ++it) {
    if (it.value().is_object() && base.contains(it.key()) && base[it.key()].is_object())
      merge_into(base[it.key()], it.value());
    else
      base[it.key()] = it.value();
  }
}

const Json* walk(const Json& tree, const std::string& dotted) {
  const Json* cur = &tree;
  size_t start = 0;
  while (true) {
    size_t dot = dotted.find('.', start);
    std::string key = dotted.substr(start, dot == std::string::npos ? dot : dot - start);
    if (!cur->contains(key)) return nullptr;
    cur = &cur->at(key);
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  return cur;
}

}  // namespace

RunConfig RunConfig::from_json(const Json& partial) {
  Json ref = defaults();
  check_unknown(partial, ref, "");
  merge_into(ref, partial);
  RunConfig cfg;
  cfg.tree_ = std::move(ref);
  return cfg;
}

RunConfig RunConfig::load(const std::string& path_or_empty,
                          const std::vector<std::string>& overrides) {
  Json user = Json::object();
  if (!path_or_empty.empty()) {
    std::ifstream in(path_or_empty);
    if (!in) throw std::invalid_argument("config: cannot open " + path_or_empty);
    in >> user;
  }
  RunConfig cfg = from_json(user);
  for (const auto& ov : overrides) {
    size_t eq = ov.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: override must be key=value, got '" + ov + "'");
    std::string key = ov.substr(0, eq);
    std::string val = ov.substr(eq + 1);
    // Navigate to the parent object, creating nothing: key must exist.
    Json* cur = &cfg.tree_;
    size_t start = 0;
    while (true) {
      size_t dot = key.find('.', start);
      std::string part = key.substr(start, dot == std::string::npos ? dot : dot - start);
      if (!cur->contains(part))
        throw std::invalid_argument("config: unknown key '" + key + "'");
      if (dot == std::string::npos) {
        Json& slot = (*cur)[part];
        Json parsed = Json::parse(val, nullptr, false);
        if (parsed.is_discarded()) parsed = val;  // bare strings
        if (slot.is_string() && !parsed.is_string()) parsed = val;
        slot = parsed;
        break;
      }
      cur = &(*cur)[part];
      start = dot + 1;
    }
  }
  return cfg;
}

std::string RunConfig::canonical() const { return tree_.dump(); }

std::string RunConfig::hash() const { return hash_hex(fnv1a(canonical())); }

double RunConfig::num(const std::string& dotted) const {
  const Json* v = walk(tree_, dotted);
  if (!v) throw std::invalid_argument("config: missing key " + dotted);
  return v->get<double>();
}

int64_t RunConfig::integer(const std::string& dotted) const {
  const Json* v = walk(tree_, dotted);
  if (!v) throw std::invalid_argument("config: missing key " + dotted);
  return v->get<int64_t>();
}

bool RunConfig::flag(const std::string& dotted) const {
  const Json* v = walk(tree_, dotted);
  if (!v) throw std::invalid_argument("config: missing key " + dotted);
  return v->get<bool>();
}

std::string RunConfig::str(const std::string& dotted) const {
  const Json* v = walk(tree_, dotted);
  if (!v) throw std::invalid_argument("config: missing key " + dotted);
  return v->get<std::string>();
}

}  // namespace emcot
