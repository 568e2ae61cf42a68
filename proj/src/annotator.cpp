#include "emcot/annotator.hpp"

#include "emcot/util.hpp"

#include <httplib.h>

#include <algorithm>
#include <fstream>
#include <sstream>

namespace emcot::annotator {

namespace {

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

int word_count(const std::string& s) {
  std::istringstream in(s);
  std::string w;
  int n = 0;
  while (in >> w) ++n;
  return n;
}

std::string lower_first(std::string s) {
  if (!s.empty()) s[0] = static_cast<char>(std::tolower(static_cast<unsigned char>(s[0])));
  return s;
}

// Cut at the last sentence end that keeps the text within max_words; if no
// sentence boundary fits, hard-cut after max_words words.
std::string truncate_words(const std::string& text, int max_words) {
  std::istringstream in(text);
  std::string w, out, last_sentence;
  int n = 0;
  while (in >> w && n < max_words) {
    out += (out.empty() ? "" : " ") + w;
    ++n;
    if (!w.empty() && (w.back() == '.' || w.back() == '!' || w.back() == '?'))
      last_sentence = out;
  }
  if (!last_sentence.empty()) return last_sentence;
  return out + ".";
}

std::string frame_action_lines(const primitives::LabelTable& labels) {
  std::string out;
  for (size_t t = 0; t < labels.size(); ++t) {
    out += "    " + std::to_string(t + 1) + ". Frame_id:" + std::to_string(t) +
           ", Left arm action:" + labels[t][0].sentence +
           ", Right arm action:" + labels[t][1].sentence + "\n";
  }
  return out;
}

}  // namespace

void validate(const Narrative& n) {
  if (trim(n.text).empty()) throw std::invalid_argument("narrative: empty");
  if (n.text.find("\n\n") != std::string::npos)
    throw std::invalid_argument("narrative: must be a single paragraph");
}

void validate(const SubtaskPlan& p) {
  if (p.subtasks.empty() || p.subtasks.size() > 8)
    throw std::invalid_argument("plan: subtask count must be in [1, 8], got " +
                                std::to_string(p.subtasks.size()));
  for (size_t i = 0; i + 1 < p.subtasks.size(); ++i)
    if (p.subtasks[i] == p.subtasks[i + 1])
      throw std::invalid_argument("plan: adjacent duplicate subtask at position " +
                                  std::to_string(i));
  for (const auto& s : p.subtasks)
    if (trim(s).empty()) throw std::invalid_argument("plan: empty subtask string");
}

void validate(const SubtaskAlignment& a, const SubtaskPlan& plan,
              const std::vector<bool>& frame_active) {
  const int T = static_cast<int>(frame_active.size());
  if (a.entries.empty()) throw std::invalid_argument("alignment: empty");
  std::string errors;
  int expect = 0;
  for (size_t i = 0; i < a.entries.size(); ++i) {
    const auto& e = a.entries[i];
    if (e.start > e.end || e.start < 0 || e.end >= T)
      errors += " entry " + std::to_string(i) + " range [" + std::to_string(e.start) + "," +
                std::to_string(e.end) + "] out of order or bounds;";
    if (e.start < expect)
      errors += " entry " + std::to_string(i) + " overlaps at frame " +
                std::to_string(e.start) + ";";
    if (e.start > expect)
      errors += " gap before entry " + std::to_string(i) + " at frame " +
                std::to_string(expect) + ";";
    if (std::find(plan.subtasks.begin(), plan.subtasks.end(), e.subtask) ==
        plan.subtasks.end())
      errors += " entry " + std::to_string(i) + " subtask not in plan;";
    expect = e.end + 1;
  }
  if (expect != T) errors += " coverage ends at frame " + std::to_string(expect - 1) + ";";
  if (!errors.empty()) throw std::invalid_argument("alignment:" + errors);

  // Physical alignment: a range may not be all idle, except a final tail.
  for (size_t i = 0; i < a.entries.size(); ++i) {
    const auto& e = a.entries[i];
    bool active = false;
    for (int t = e.start; t <= e.end && !active; ++t) active = frame_active[t];
    if (active) continue;
    bool tail = i + 1 == a.entries.size();
    for (int t = e.start; t < T && tail; ++t) tail = !frame_active[t];
    if (!tail)
      throw std::invalid_argument("alignment: entry " + std::to_string(i) +
                                  " covers only idle frames");
  }
}

void validate(const CotRecord& r) {
  validate(r.narrative);
  validate(r.plan);
  const int T = static_cast<int>(r.frames.size());
  if (T == 0) throw std::invalid_argument("record: no frames");
  for (int t = 0; t < T; ++t) {
    const auto& f = r.frames[t];
    if (f.subtask.empty() || f.reasoning.empty())
      throw std::invalid_argument("record: frame " + std::to_string(t) + " missing fields");
    if (f.goal < 0 || f.goal >= T)
      throw std::invalid_argument("record: frame " + std::to_string(t) +
                                  " goal out of range");
    if (t > 0 && r.frames[t - 1].subtask == f.subtask && r.frames[t - 1].goal != f.goal)
      throw std::invalid_argument("record: goal changes inside subtask at frame " +
                                  std::to_string(t));
  }
}

Json to_json(const CotRecord& r) {
  Json align = Json::array();
  for (const auto& e : r.alignment.entries)
    align.push_back({{"subtask", e.subtask},
                     {"frame", {e.start, e.end}},
                     {"reasoning", e.reasoning}});
  Json frames = Json::array();
  for (const auto& f : r.frames)
    frames.push_back({{"subtask", f.subtask}, {"reasoning", f.reasoning}, {"goal", f.goal}});
  return Json{{"trajectory", r.trajectory_id}, {"instruction", r.instruction},
              {"narrative", r.narrative.text}, {"plan", r.plan.subtasks},
              {"alignment", align},            {"frames", frames},
              {"backend", r.backend},          {"prompt_hash", r.prompt_hash},
              {"config_hash", r.config_hash},  {"warnings", r.warnings}};
}

CotRecord record_from_json(const Json& j) {
  CotRecord r;
  r.trajectory_id = j.at("trajectory");
  r.instruction = j.at("instruction");
  r.narrative.text = j.at("narrative");
  r.plan.subtasks = j.at("plan").get<std::vector<std::string>>();
  for (const auto& e : j.at("alignment"))
    r.alignment.entries.push_back(
        {e.at("subtask"), e.at("frame").at(0), e.at("frame").at(1), e.at("reasoning")});
  for (const auto& f : j.at("frames"))
    r.frames.push_back({f.at("subtask"), f.at("reasoning"), f.at("goal")});
  r.backend = j.at("backend");
  r.prompt_hash = j.at("prompt_hash");
  r.config_hash = j.at("config_hash");
  r.warnings = j.at("warnings").get<std::vector<std::string>>();
  return r;
}

void save_records(const std::string& path, const std::vector<CotRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path);
  for (const auto& r : records) out << to_json(r).dump() << "\n";
}

std::vector<CotRecord> load_records(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<CotRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    out.push_back(record_from_json(Json::parse(line)));
  }
  return out;
}

ParseError::ParseError(const std::string& what, std::string raw_reply)
    : std::runtime_error(what), raw(std::move(raw_reply)) {}

HttpBackend::HttpBackend(ClientOptions opt) : opt_(std::move(opt)) {}

std::string HttpBackend::complete(const std::string& prompt) {
  httplib::Client cli(opt_.endpoint);
  cli.set_connection_timeout(0, opt_.timeout_ms * 1000);
  cli.set_read_timeout(0, opt_.timeout_ms * 1000);
  Json body{{"model", opt_.model}, {"prompt", prompt}};
  auto res = cli.Post(opt_.path, body.dump(), "application/json");
  if (!res) throw std::runtime_error("annotator endpoint unreachable: " + opt_.endpoint);
  if (res->status != 200)
    throw std::runtime_error("annotator endpoint status " + std::to_string(res->status));
  Json reply = Json::parse(res->body, nullptr, false);
  if (reply.is_discarded() || !reply.contains("text") || !reply["text"].is_string())
    throw ParseError("annotator reply missing \"text\" field", res->body);
  return reply["text"];
}

Options Options::from(const RunConfig& cfg) {
  Options o;
  o.use_external = cfg.str("annotator.backend") == "external";
  if (!o.use_external && cfg.str("annotator.backend") != "template")
    throw std::invalid_argument("annotator.backend must be template or external");
  o.goal_shift_minus_one = cfg.flag("annotator.goal_shift_minus_one");
  o.client.endpoint = cfg.str("annotator.endpoint");
  o.client.model = cfg.str("annotator.model");
  o.client.timeout_ms = static_cast<int>(cfg.integer("annotator.timeout_ms"));
  o.client.max_retries = static_cast<int>(cfg.integer("annotator.max_retries"));
  return o;
}

std::string render_stage1_prompt(const std::string& instruction,
                                 const primitives::LabelTable& labels) {
  std::string p;
  p += "You are an expert roboticist analyzing a human or robot demonstration. Your task "
       "is to write a SINGLE, COHERENT, HIGH-LEVEL NARRATIVE paragraph that STRICTLY "
       "follows the TEMPORAL ORDER.\n\n";
  p += "- Overall Goal: " + instruction + "\n";
  p += "- Per-frame low-level actions are provided for context only. DO NOT copy or list "
       "them.\n";
  p += "- Low-level Arm Actions:\n" + frame_action_lines(labels) + "\n";
  p += "Instructions:\n";
  p += "1. Describe the task step by step in exact chronological order.\n";
  p += "2. Explicitly state simultaneous bimanual actions (e.g., \"At the same time, the "
       "left hand stabilizes... while the right hand unscrews...\").\n";
  p += "3. Focus on purpose: explain what each action achieves toward the goal.\n";
  p += "4. Use specific object names when identifiable.\n\n";
  p += "Output Rules: Produce exactly one fluent paragraph (2-4 sentences). Output ONLY "
       "the narrative. No markdown, bullets, or extra text.\n";
  return p;
}

std::string render_stage2_prompt(const Narrative& narrative) {
  std::string p;
  p += "You are an expert in robotic task analysis. Based on the task narrative below, "
       "decompose the task into a sequence of HIGH-SEMANTIC, GOAL-ORIENTED SUBTASKS.\n\n";
  p += "- Task Narrative: " + narrative.text + "\n\n";
  p += "Instructions:\n";
  p += "1. Split the narrative into discrete subtasks in strict chronological order.\n";
  p += "2. Represent coordinated bimanual actions as ONE subtask (never split).\n";
  p += "3. Express high-level intent (e.g., \"Assemble the lid onto the container\"), not "
       "low-level motions (e.g., \"move\", \"grab\").\n";
  p += "4. Use imperative, active voice; keep the list short (typically 2-5 subtasks).\n\n";
  p += "Output Format: Return ONLY a JSON list of strings. Example: [\"Pick up red cup\", "
       "\"Pour water into cup\"]\n";
  return p;
}

std::string render_stage3_prompt(const std::string& instruction, const SubtaskPlan& plan,
                                 const primitives::LabelTable& labels) {
  std::string p;
  p += "You are the autonomous onboard controller of a robot. You are currently executing "
       "a task. Describe your reasoning in the FIRST PERSON (\"I\", \"me\").\n\n";
  p += "- Overall Goal: " + instruction + "\n";
  p += "- Planned Subtask Sequence:\n";
  for (size_t i = 0; i < plan.subtasks.size(); ++i)
    p += "    " + std::to_string(i + 1) + ". " + plan.subtasks[i] + "\n";
  p += "- Low-level Arm Actions:\n" + frame_action_lines(labels) + "\n";
  p += "Instructions:\n";
  p += "1. For each segment, explain your internal decision-making logic from a "
       "first-person view.\n";
  p += "2. Include: (a) visual observation, (b) goal-driven inference, (c) movement "
       "logic.\n";
  p += "3. Ensure physical alignment: do not claim a subtask has started if low-level "
       "logs show idle.\n";
  p += "4. Keep reasoning under 50 words per segment; account for every frame.\n\n";
  p += "Output Format: Return ONLY a JSON list of objects with keys: \"subtask\", "
       "\"frame\" (as [start, end]), and \"reasoning\".\n";
  return p;
}

SubtaskPlan parse_plan_reply(const std::string& reply) {
  Json j = Json::parse(reply, nullptr, false);
  if (j.is_discarded()) throw ParseError("plan reply is not JSON", reply);
  if (!j.is_array()) throw ParseError("plan reply is not a JSON list", reply);
  SubtaskPlan p;
  for (const auto& e : j) {
    if (!e.is_string()) throw ParseError("plan reply contains a non-string entry", reply);
    p.subtasks.push_back(e.get<std::string>());
  }
  return p;
}

SubtaskAlignment parse_alignment_reply(const std::string& reply) {
  Json j = Json::parse(reply, nullptr, false);
  if (j.is_discarded()) throw ParseError("alignment reply is not JSON", reply);
  if (!j.is_array()) throw ParseError("alignment reply is not a JSON list", reply);
  SubtaskAlignment a;
  for (const auto& e : j) {
    if (!e.is_object() || !e.contains("subtask") || !e.contains("frame") ||
        !e.contains("reasoning") || !e["frame"].is_array() || e["frame"].size() != 2)
      throw ParseError("alignment entry has the wrong shape", reply);
    a.entries.push_back({e["subtask"], e["frame"][0], e["frame"][1], e["reasoning"]});
  }
  return a;
}

std::vector<int> extract_subgoals(const std::vector<std::string>& subtask_per_frame,
                                  bool shift_minus_one, std::vector<std::string>* warnings) {
  const int T = static_cast<int>(subtask_per_frame.size());
  if (T == 0) throw std::invalid_argument("extract_subgoals: empty sequence");
  std::vector<int> goals(T);
  std::vector<std::string> seen;
  for (int s = 0; s < T;) {
    int e = s;
    while (e + 1 < T && subtask_per_frame[e + 1] == subtask_per_frame[s]) ++e;
    if (warnings &&
        std::find(seen.begin(), seen.end(), subtask_per_frame[s]) != seen.end())
      warnings->push_back("revisited subtask \"" + subtask_per_frame[s] +
                          "\": a name-keyed goal map would merge its occurrences");
    seen.push_back(subtask_per_frame[s]);
    int goal = shift_minus_one ? e : std::min(e + 1, T - 1);
    for (int t = s; t <= e; ++t) goals[t] = goal;
    s = e + 1;
  }
  return goals;
}

std::vector<int> extract_subgoals(const SubtaskAlignment& a, int frame_count,
                                  bool shift_minus_one, std::vector<std::string>* warnings) {
  std::vector<std::string> seq(frame_count);
  for (const auto& e : a.entries)
    for (int t = e.start; t <= e.end && t < frame_count; ++t) seq[t] = e.subtask;
  for (int t = 0; t < frame_count; ++t)
    if (seq[t].empty()) throw std::invalid_argument("extract_subgoals: uncovered frame");
  return extract_subgoals(seq, shift_minus_one, warnings);
}

std::vector<bool> active_frames(const primitives::LabelTable& labels) {
  std::vector<bool> active(labels.size());
  for (size_t t = 0; t < labels.size(); ++t)
    active[t] = labels[t][0].kind != primitives::Kind::kIdle ||
                labels[t][1].kind != primitives::Kind::kIdle;
  return active;
}

Pipeline::Pipeline(Options opt, TextBackend* client) : opt_(std::move(opt)), client_(client) {}

namespace {

// One annotation stage against the external backend: each attempt covers the
// transport call plus parsing and validation, so malformed replies are
// retried like timeouts are. Exhausted retries flag the record as fallback.
template <typename Parse>
auto attempt_external(TextBackend* client, const Options& opt, const std::string& prompt,
                      CotRecord& rec, Parse parse)
    -> std::optional<decltype(parse(std::string{}))> {
  if (!opt.use_external || client == nullptr) return std::nullopt;
  for (int attempt = 0; attempt <= opt.client.max_retries; ++attempt) {
    try {
      return parse(client->complete(prompt));
    } catch (const std::exception& e) {
      rec.warnings.push_back("external attempt " + std::to_string(attempt + 1) +
                             " failed: " + e.what());
    }
  }
  rec.backend = "external:fallback";
  return std::nullopt;
}

}  // namespace

Narrative Pipeline::generate_narrative(const std::string& instruction,
                                       const primitives::LabelTable& labels,
                                       const std::vector<std::string>& expert_plan,
                                       CotRecord& rec) {
  if (labels.empty()) throw std::invalid_argument("generate_narrative: no labels");
  auto got = attempt_external(client_, opt_, render_stage1_prompt(instruction, labels),
                              rec, [](const std::string& reply) {
                                Narrative n{trim(reply)};
                                validate(n);
                                return n;
                              });
  if (got) return *got;

  // Template backend: stitch the expert plan into a short chronological story.
  std::string steps;
  for (size_t i = 0; i < expert_plan.size(); ++i) {
    if (i == 0)
      steps += "First, I " + lower_first(expert_plan[i]);
    else if (i + 1 == expert_plan.size())
      steps += ", and finally I " + lower_first(expert_plan[i]);
    else
      steps += ", then I " + lower_first(expert_plan[i]);
  }
  if (expert_plan.size() == 1) steps = "I " + lower_first(expert_plan[0]);
  Narrative n{"The task is to " + instruction + ". " + steps +
              ". Each step follows the previous one without pause."};
  validate(n);
  return n;
}

SubtaskPlan Pipeline::extract_subtasks(const Narrative& narrative,
                                       const std::vector<std::string>& expert_plan,
                                       CotRecord& rec) {
  validate(narrative);
  auto got = attempt_external(client_, opt_, render_stage2_prompt(narrative), rec,
                              [](const std::string& reply) {
                                SubtaskPlan p = parse_plan_reply(reply);
                                validate(p);
                                return p;
                              });
  if (got) return *got;
  SubtaskPlan p{expert_plan};
  validate(p);
  return p;
}

SubtaskAlignment Pipeline::align_subtasks(const std::string& instruction,
                                          const SubtaskPlan& plan,
                                          const primitives::LabelTable& labels,
                                          const std::vector<envsim::Boundary>& boundaries,
                                          CotRecord& rec) {
  if (plan.subtasks.empty()) throw std::invalid_argument("align_subtasks: empty plan");
  auto active = active_frames(labels);
  auto got = attempt_external(
      client_, opt_, render_stage3_prompt(instruction, plan, labels), rec,
      [&](const std::string& reply) {
        SubtaskAlignment a = parse_alignment_reply(reply);
        for (auto& e : a.entries)
          if (word_count(e.reasoning) > 50) {
            rec.warnings.push_back("reasoning over 50 words for subtask \"" + e.subtask +
                                   "\", truncated");
            e.reasoning = truncate_words(e.reasoning, 50);
          }
        validate(a, plan, active);
        return a;
      });
  if (got) return *got;

  // Template backend: expert boundaries plus templated first-person reasoning
  // with observation, inference and movement parts.
  SubtaskAlignment a;
  for (const auto& b : boundaries) {
    if (!a.entries.empty() && a.entries.back().subtask == b.subtask) {
      a.entries.back().end = b.end;
      continue;
    }
    AlignEntry e{b.subtask, b.start, b.end, ""};
    e.reasoning = "I see the workspace ready for the next step. Since my goal is to " +
                  instruction + ", I now " + lower_first(b.subtask) +
                  ". I move my arms steadily through this segment until it is done.";
    if (word_count(e.reasoning) > 50) {
      rec.warnings.push_back("reasoning over 50 words for subtask \"" + b.subtask +
                             "\", truncated");
      e.reasoning = truncate_words(e.reasoning, 50);
    }
    a.entries.push_back(e);
  }
  // Normalize coverage to [0, T-1] in case boundaries have gaps at the edges.
  if (!a.entries.empty()) {
    a.entries.front().start = 0;
    for (size_t i = 1; i < a.entries.size(); ++i)
      a.entries[i].start = a.entries[i - 1].end + 1;
    a.entries.back().end = static_cast<int>(labels.size()) - 1;
  }
  validate(a, plan, active);
  return a;
}

CotRecord Pipeline::annotate(const envsim::Trajectory& traj,
                             const primitives::LabelTable& labels,
                             const std::string& config_hash) {
  if (labels.size() != traj.frames.size())
    throw std::invalid_argument("annotate: label table does not match trajectory length");
  CotRecord rec;
  rec.trajectory_id = traj.task.id + ":" + std::to_string(traj.seed);
  rec.instruction = traj.task.instruction;
  rec.config_hash = config_hash;
  rec.backend = opt_.use_external && client_ ? "external" : "template";

  rec.narrative = generate_narrative(traj.task.instruction, labels, traj.plan, rec);
  rec.plan = extract_subtasks(rec.narrative, traj.plan, rec);
  rec.alignment =
      align_subtasks(traj.task.instruction, rec.plan, labels, traj.boundaries, rec);

  const int T = static_cast<int>(traj.frames.size());
  auto goals = extract_subgoals(rec.alignment, T, opt_.goal_shift_minus_one, &rec.warnings);
  rec.frames.resize(T);
  for (const auto& e : rec.alignment.entries)
    for (int t = e.start; t <= e.end; ++t)
      rec.frames[t] = {e.subtask, e.reasoning, goals[t]};

  rec.prompt_hash =
      hash_hex(fnv1a(render_stage1_prompt(traj.task.instruction, labels) +
                     render_stage2_prompt(rec.narrative) +
                     render_stage3_prompt(traj.task.instruction, rec.plan, labels)));
  validate(rec);
  return rec;
}

}  // namespace emcot::annotator
