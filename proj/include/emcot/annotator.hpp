#pragma once

#include "emcot/config.hpp"
#include "emcot/envsim.hpp"
#include "emcot/primitives.hpp"

#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace emcot::annotator {

struct Narrative {
  std::string text;
};
void validate(const Narrative& n);

struct SubtaskPlan {
  std::vector<std::string> subtasks;
};
void validate(const SubtaskPlan& p);

struct AlignEntry {
  std::string subtask;
  int start = 0;
  int end = 0;  // inclusive
  std::string reasoning;
};

struct SubtaskAlignment {
  std::vector<AlignEntry> entries;
};

// Checks chronology, exact coverage of [0, T-1], plan membership and the
// physical-alignment rule: every range must touch a non-idle frame, except a
// final range lying entirely in an all-idle tail.
void validate(const SubtaskAlignment& a, const SubtaskPlan& plan,
              const std::vector<bool>& frame_active);

struct FrameAnnotation {
  std::string subtask;
  std::string reasoning;
  int goal = 0;
};

struct CotRecord {
  std::string trajectory_id;
  std::string instruction;
  Narrative narrative;
  SubtaskPlan plan;
  SubtaskAlignment alignment;
  std::vector<FrameAnnotation> frames;
  std::string backend;  // "template", "external", or "external:fallback"
  std::string prompt_hash;
  std::string config_hash;
  std::vector<std::string> warnings;
};
void validate(const CotRecord& r);

Json to_json(const CotRecord& r);
CotRecord record_from_json(const Json& j);
void save_records(const std::string& path, const std::vector<CotRecord>& records);
std::vector<CotRecord> load_records(const std::string& path);

// Raised when an external reply has the wrong shape; keeps the raw text.
struct ParseError : std::runtime_error {
  explicit ParseError(const std::string& what, std::string raw_reply);
  std::string raw;
};

// Text-completion transport: prompt in, reply out.
class TextBackend {
 public:
  virtual ~TextBackend() = default;
  virtual std::string complete(const std::string& prompt) = 0;
};

struct ClientOptions {
  std::string endpoint = "http://127.0.0.1:8080";
  std::string path = "/complete";
  std::string model = "annotator";
  int timeout_ms = 5000;
  int max_retries = 2;
};

// HTTP client posting {"model", "prompt"} and expecting {"text": "..."}.
class HttpBackend : public TextBackend {
 public:
  explicit HttpBackend(ClientOptions opt);
  std::string complete(const std::string& prompt) override;

 private:
  ClientOptions opt_;
};

struct Options {
  bool use_external = false;
  bool goal_shift_minus_one = false;
  ClientOptions client;
  static Options from(const RunConfig& cfg);
};

// Verbatim prompt templates with slot substitution.
std::string render_stage1_prompt(const std::string& instruction,
                                 const primitives::LabelTable& labels);
std::string render_stage2_prompt(const Narrative& narrative);
std::string render_stage3_prompt(const std::string& instruction, const SubtaskPlan& plan,
                                 const primitives::LabelTable& labels);

// Parsers for external replies (strict shapes).
SubtaskPlan parse_plan_reply(const std::string& reply);
SubtaskAlignment parse_alignment_reply(const std::string& reply);

// Per-frame goal indices. Each contiguous subtask run gets the first frame of
// the next run, or T-1 for the final run; with shift_minus_one the run's own
// last frame. Revisited subtask names are reported through warnings.
std::vector<int> extract_subgoals(const std::vector<std::string>& subtask_per_frame,
                                  bool shift_minus_one = false,
                                  std::vector<std::string>* warnings = nullptr);
std::vector<int> extract_subgoals(const SubtaskAlignment& a, int frame_count,
                                  bool shift_minus_one = false,
                                  std::vector<std::string>* warnings = nullptr);

class Pipeline {
 public:
  // client may be null; then the template backend is used regardless of
  // options. External failures retry, then fall back to the template path.
  Pipeline(Options opt, TextBackend* client = nullptr);

  Narrative generate_narrative(const std::string& instruction,
                               const primitives::LabelTable& labels,
                               const std::vector<std::string>& expert_plan,
                               CotRecord& rec);
  SubtaskPlan extract_subtasks(const Narrative& narrative,
                               const std::vector<std::string>& expert_plan,
                               CotRecord& rec);
  SubtaskAlignment align_subtasks(const std::string& instruction, const SubtaskPlan& plan,
                                  const primitives::LabelTable& labels,
                                  const std::vector<envsim::Boundary>& boundaries,
                                  CotRecord& rec);

  // Full three-stage pipeline plus subgoal extraction for one trajectory.
  CotRecord annotate(const envsim::Trajectory& traj, const primitives::LabelTable& labels,
                     const std::string& config_hash = "");

 private:
  Options opt_;
  TextBackend* client_ = nullptr;
};

// Frames where at least one arm is non-idle.
std::vector<bool> active_frames(const primitives::LabelTable& labels);

}  // namespace emcot::annotator
