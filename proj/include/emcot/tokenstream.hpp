#pragma once

#include "emcot/annotator.hpp"
#include "emcot/config.hpp"
#include "emcot/kernels.hpp"

#include <functional>
#include <string>
#include <vector>

namespace emcot::tokenstream {

// Character-level tokenizer plus a small word list and special phase markers.
class Vocabulary {
 public:
  Vocabulary();

  std::vector<int> tokenize(const std::string& text) const;
  std::string detokenize(const std::vector<int>& ids) const;

  int special(const std::string& name) const;  // e.g. "think_start"
  bool is_special(int id) const;
  int size() const { return static_cast<int>(pieces_.size()); }

 private:
  std::vector<std::string> pieces_;        // id -> string
  std::vector<std::string> special_names_;  // parallel, empty for base ids
  int first_special_ = 0;
};

enum class Role { kText, kVisUnd, kVisClean, kVisNoise, kActNoise };
std::string role_name(Role r);
bool is_noise(Role r);

struct TokenRecord {
  int sample = 0;  // pack-local sample id
  int pos = 0;     // position within the sample
  Role role = Role::kText;
  int frame = -1;         // visual roles
  int group = -1;         // noise roles
  int token = -1;         // text payload
  Vec payload;            // latent / noise vector payload
  bool loss = false;
  int target_token = -1;  // next-token target for text loss
  Vec target;             // latent / action target for noise loss
  int target_group = -1;  // set on clean records duplicating a noise group's target
  bool padded = false;    // value repeated past the trajectory end
};

struct PackedSequence {
  std::vector<TokenRecord> records;
  MaskMat mask;
  int n_samples = 0;
  int length() const { return static_cast<int>(records.size()); }
};

// Dual-path visual tokens for one frame.
struct FrameTokens {
  std::vector<Vec> und;
  std::vector<Vec> clean;
};

// Data accessors the assemblers need; keeps this module independent of the
// model's encoder.
struct SampleSource {
  const annotator::CotRecord* record = nullptr;
  std::function<FrameTokens(int frame)> encode;
  std::function<Vec(int t)> action;   // action taken at step t
  std::function<Vec(int t)> proprio;  // 8-dim arm state at step t; optional
  int num_frames = 0;
};

struct StreamOptions {
  int max_len = 2048;
  int context = 3;    // c, observation frames per sample
  int chunk = 16;     // K, action chunk length
  int vg_context = 2; // k, context frames for future-frame prediction
  int vg_horizon = 4; // h, foresight horizon
  bool cross_noise_groups_attend = false;
  static StreamOptions from(const RunConfig& cfg);
};

// Fixed-width text rendering of an 8-dim arm state, appended to the
// instruction line of action-producing sequences.
std::string proprio_text(const Vec& p);

// Reasoning -> subgoal -> action layout for frame t of an annotated
// trajectory. Context is left-padded by repeating frame 0; the action chunk
// is right-padded by repeating the final action (padded flag set).
std::vector<TokenRecord> assemble_emcot_sequence(const SampleSource& src, int t,
                                                 const StreamOptions& opt,
                                                 const Vocabulary& vocab);

struct VqaSample {
  FrameTokens image;
  int frame = 0;
  std::string question;
  std::string answer;
};
std::vector<TokenRecord> assemble_vqa_sequence(const VqaSample& s, const Vocabulary& vocab);

// Future-frame prediction: instruction + k context frames, then a noise group
// targeting the frame h steps ahead.
std::vector<TokenRecord> assemble_vg_sequence(const SampleSource& src, int t,
                                              const StreamOptions& opt,
                                              const Vocabulary& vocab);

// Action prediction: the EM-CoT layout minus the think and vision spans.
std::vector<TokenRecord> assemble_ap_sequence(const SampleSource& src, int t,
                                              const StreamOptions& opt,
                                              const Vocabulary& vocab);

// Pairwise attention permissions; records may span several packed samples.
MaskMat build_attention_mask(const std::vector<TokenRecord>& records,
                             bool cross_noise_groups_attend = false);

std::vector<PackedSequence> pack_samples(std::vector<std::vector<TokenRecord>> sequences,
                                         const StreamOptions& opt);

std::string mask_to_pgm(const MaskMat& mask);
std::string mask_to_csv(const MaskMat& mask);

}  // namespace emcot::tokenstream
