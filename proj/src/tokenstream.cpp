#include "emcot/tokenstream.hpp"

#include <algorithm>
#include <stdexcept>

namespace emcot::tokenstream {

namespace {

const char* kSpecialNames[] = {
    "subtask_start", "subtask_end", "plan_start",   "plan_end",
    "move_start",    "move_end",    "action_start", "action_end",
    "vision_start",  "vision_end",  "think_start",  "think_end",
};

const char* kWordList[] = {
    "the",    "block",  "blocks", "red",    "blue",   "green", "orange", "yellow",
    "white",  "gray",   "zone",   "button", "pad",    "arm",   "arms",   "gripper",
    "left",   "right",  "pick",   "place",  "stack",  "press", "sweep",  "move",
    "hand",   "over",   "center", "into",   "onto",   "with",  "and",    "then",
    "finally","first",  "task",   "goal",   "step",   "now",   "see",    "close",
    "open",   "grasp",  "release","forward","backward","up",   "down",   "behind",
    "above",  "table",  "next",   "this",
};

}  // namespace

Vocabulary::Vocabulary() {
  for (int c = 32; c <= 126; ++c) pieces_.push_back(std::string(1, static_cast<char>(c)));
  pieces_.push_back("\n");
  for (const char* w : kWordList) pieces_.push_back(w);
  first_special_ = static_cast<int>(pieces_.size());
  special_names_.assign(pieces_.size(), "");
  for (const char* s : kSpecialNames) {
    pieces_.push_back(std::string("<") + s + ">");
    special_names_.push_back(s);
  }
  if (size() > 512) throw std::logic_error("vocabulary exceeds 512 ids");
}

int Vocabulary::special(const std::string& name) const {
  std::string canonical = name == "visual_start" ? "vision_start"
                          : name == "visual_end" ? "vision_end"
                                                 : name;
  for (size_t i = first_special_; i < pieces_.size(); ++i)
    if (special_names_[i] == canonical) return static_cast<int>(i);
  throw std::invalid_argument("unknown special token " + name);
}

bool Vocabulary::is_special(int id) const {
  return id >= first_special_ && id < size();
}

std::vector<int> Vocabulary::tokenize(const std::string& text) const {
  std::vector<int> out;
  size_t i = 0;
  while (i < text.size()) {
    // Accept the parse-time alias for the vision markers.
    for (const char* alias : {"<visual_start>", "<visual_end>"}) {
      size_t n = std::string(alias).size();
      if (text.compare(i, n, alias) == 0) {
        out.push_back(special(std::string(alias).substr(1, n - 2)));
        i += n;
        goto next;
      }
    }
    {
      int best = -1;
      size_t best_len = 0;
      for (int id = 0; id < size(); ++id) {
        const std::string& p = pieces_[id];
        if (p.size() > best_len && text.compare(i, p.size(), p) == 0) {
          best = id;
          best_len = p.size();
        }
      }
      if (best < 0)
        throw std::invalid_argument("unsupported character in text at offset " +
                                    std::to_string(i));
      out.push_back(best);
      i += best_len;
    }
  next:;
  }
  return out;
}

std::string Vocabulary::detokenize(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= size()) throw std::invalid_argument("token id out of range");
    out += pieces_[id];
  }
  return out;
}

std::string role_name(Role r) {
  switch (r) {
    case Role::kText: return "text";
    case Role::kVisUnd: return "vis_und";
    case Role::kVisClean: return "vis_clean";
    case Role::kVisNoise: return "vis_noise";
    case Role::kActNoise: return "act_noise";
  }
  return "?";
}

bool is_noise(Role r) { return r == Role::kVisNoise || r == Role::kActNoise; }

StreamOptions StreamOptions::from(const RunConfig& cfg) {
  StreamOptions o;
  o.max_len = static_cast<int>(cfg.integer("tokens.max_len"));
  o.context = static_cast<int>(cfg.integer("model.context_frames"));
  o.chunk = static_cast<int>(cfg.integer("model.chunk"));
  o.vg_context = static_cast<int>(cfg.integer("tokens.vg_context_k"));
  o.vg_horizon = static_cast<int>(cfg.integer("tokens.vg_horizon_h"));
  o.cross_noise_groups_attend = cfg.flag("tokens.cross_noise_groups_attend");
  if (o.max_len < 1 || o.context < 1 || o.chunk < 1 || o.vg_context < 1 || o.vg_horizon < 1)
    throw std::invalid_argument("token stream options out of range");
  return o;
}

namespace {

struct Builder {
  std::vector<TokenRecord> out;
  int pos = 0;

  TokenRecord& push(Role role) {
    TokenRecord r;
    r.role = role;
    r.pos = pos++;
    out.push_back(r);
    return out.back();
  }

  void push_text(const std::vector<int>& ids) {
    for (int id : ids) push(Role::kText).token = id;
  }

  void push_frame(const FrameTokens& ft, int frame, bool padded, int clean_target_group) {
    for (const Vec& v : ft.und) {
      auto& r = push(Role::kVisUnd);
      r.frame = frame;
      r.payload = v;
      r.padded = padded;
    }
    for (const Vec& v : ft.clean) {
      auto& r = push(Role::kVisClean);
      r.frame = frame;
      r.payload = v;
      r.padded = padded;
      r.target_group = clean_target_group;
    }
  }

  void push_clean(const FrameTokens& ft, int frame, int clean_target_group) {
    for (const Vec& v : ft.clean) {
      auto& r = push(Role::kVisClean);
      r.frame = frame;
      r.payload = v;
      r.target_group = clean_target_group;
    }
  }

  void push_context(const SampleSource& src, int t, int c) {
    for (int k = t - c + 1; k <= t; ++k) {
      int f = std::max(0, k);
      push_frame(src.encode(f), f, k < 0, -1);
    }
  }

  // Noise records covering one latent frame; payload zeros, targets clean.
  void push_vis_noise(const FrameTokens& target, int frame, int group, bool padded) {
    for (const Vec& v : target.clean) {
      auto& r = push(Role::kVisNoise);
      r.frame = frame;
      r.group = group;
      r.payload = Vec::Zero(v.size());
      r.loss = true;
      r.target = v;
      r.padded = padded;
    }
  }

  void push_action_chunk(const SampleSource& src, int t, int chunk, int group) {
    for (int j = 0; j < chunk; ++j) {
      int step = t + j;
      int clamped = std::min(step, src.num_frames - 1);
      auto& r = push(Role::kActNoise);
      r.group = group;
      r.loss = true;
      r.target = src.action(clamped);
      r.payload = Vec::Zero(r.target.size());
      r.padded = step != clamped;
    }
  }
};

void check_source(const SampleSource& src, int t) {
  if (!src.encode || !src.action) throw std::invalid_argument("sample source incomplete");
  if (src.num_frames < 1 || t < 0 || t >= src.num_frames)
    throw std::invalid_argument("frame index out of range");
}

// Next-token loss over the records [first, last]; the record after `last`
// supplies the final target.
void mark_next_token_loss(std::vector<TokenRecord>& recs, int first, int last,
                          int final_target) {
  for (int i = first; i <= last; ++i) {
    recs[i].loss = true;
    recs[i].target_token = i + 1 <= last ? recs[i + 1].token : final_target;
  }
}

}  // namespace

std::string proprio_text(const Vec& p) {
  if (p.size() == 0) return "";
  std::string out = "; arms";
  char buf[16];
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    std::snprintf(buf, sizeof(buf), " %.1f", p(i));
    out += buf;
    if (i == 3) out += " /";
  }
  return out;
}

namespace {

void push_observation_line(Builder& b, const SampleSource& src, int t,
                           const std::string& instruction, const Vocabulary& vocab) {
  std::string line = instruction;
  if (src.proprio) line += proprio_text(src.proprio(t));
  b.push_text(vocab.tokenize(line));
}

}  // namespace

std::vector<TokenRecord> assemble_emcot_sequence(const SampleSource& src, int t,
                                                 const StreamOptions& opt,
                                                 const Vocabulary& vocab) {
  check_source(src, t);
  if (!src.record) throw std::invalid_argument("emcot sample needs an annotation record");
  const auto& rec = *src.record;
  if (static_cast<int>(rec.frames.size()) != src.num_frames)
    throw std::invalid_argument("annotation record length mismatch");

  Builder b;
  b.push_context(src, t, opt.context);
  push_observation_line(b, src, t, rec.instruction, vocab);

  int think_first = static_cast<int>(b.out.size());
  b.push(Role::kText).token = vocab.special("think_start");
  b.push_text(vocab.tokenize(rec.frames[t].reasoning));
  b.push(Role::kText).token = vocab.special("think_end");
  int think_last = static_cast<int>(b.out.size()) - 1;
  mark_next_token_loss(b.out, think_first, think_last, vocab.special("vision_start"));

  int goal = rec.frames[t].goal;
  FrameTokens goal_tokens = src.encode(goal);
  b.push(Role::kText).token = vocab.special("vision_start");
  b.push_vis_noise(goal_tokens, goal, 0, false);
  b.push(Role::kText).token = vocab.special("vision_end");
  b.push_clean(goal_tokens, goal, 0);

  b.push(Role::kText).token = vocab.special("action_start");
  b.push_action_chunk(src, t, opt.chunk, 1);
  b.push(Role::kText).token = vocab.special("action_end");
  return std::move(b.out);
}

std::vector<TokenRecord> assemble_vqa_sequence(const VqaSample& s, const Vocabulary& vocab) {
  if (s.image.und.empty() || s.question.empty() || s.answer.empty())
    throw std::invalid_argument("vqa sample missing a modality");
  Builder b;
  for (const Vec& v : s.image.und) {
    auto& r = b.push(Role::kVisUnd);
    r.frame = s.frame;
    r.payload = v;
  }
  b.push_text(vocab.tokenize(s.question));
  int q_last = static_cast<int>(b.out.size()) - 1;
  b.push_text(vocab.tokenize(s.answer));
  int a_last = static_cast<int>(b.out.size()) - 1;
  // Predict each answer token from its predecessor; the final answer token
  // has no successor and carries no loss.
  mark_next_token_loss(b.out, q_last, a_last - 1, b.out[a_last].token);
  return std::move(b.out);
}

std::vector<TokenRecord> assemble_vg_sequence(const SampleSource& src, int t,
                                              const StreamOptions& opt,
                                              const Vocabulary& vocab) {
  check_source(src, t);
  Builder b;
  if (src.record) b.push_text(vocab.tokenize(src.record->instruction));
  b.push_context(src, t, opt.vg_context);
  int target = std::min(t + opt.vg_horizon, src.num_frames - 1);
  b.push(Role::kText).token = vocab.special("vision_start");
  b.push_vis_noise(src.encode(target), target, 0, target != t + opt.vg_horizon);
  b.push(Role::kText).token = vocab.special("vision_end");
  return std::move(b.out);
}

std::vector<TokenRecord> assemble_ap_sequence(const SampleSource& src, int t,
                                              const StreamOptions& opt,
                                              const Vocabulary& vocab) {
  check_source(src, t);
  Builder b;
  b.push_context(src, t, opt.context);
  push_observation_line(b, src, t, src.record ? src.record->instruction : "", vocab);
  b.push(Role::kText).token = vocab.special("action_start");
  b.push_action_chunk(src, t, opt.chunk, 0);
  b.push(Role::kText).token = vocab.special("action_end");
  return std::move(b.out);
}

MaskMat build_attention_mask(const std::vector<TokenRecord>& records,
                             bool cross_noise_groups_attend) {
  const int n = static_cast<int>(records.size());
  MaskMat m(n, n);
  m.setZero();
  for (int i = 0; i < n; ++i) {
    const auto& a = records[i];
    for (int j = 0; j < n; ++j) {
      const auto& b = records[j];
      if (a.sample != b.sample) continue;
      bool allowed = false;
      if (is_noise(a.role)) {
        if (is_noise(b.role)) {
          allowed = a.group == b.group || (cross_noise_groups_attend && j < i);
        } else {
          allowed = j < i && b.target_group != a.group;
        }
      } else if (a.role == Role::kText) {
        allowed = j <= i && !is_noise(b.role);
      } else {  // vis_und / vis_clean
        if (is_noise(b.role)) {
          allowed = false;
        } else if ((b.role == Role::kVisUnd || b.role == Role::kVisClean) &&
                   b.frame == a.frame) {
          allowed = true;  // bidirectional within a frame
        } else {
          allowed = j < i;
        }
      }
      m(i, j) = allowed ? 1 : 0;
    }
  }
  return m;
}

std::vector<PackedSequence> pack_samples(std::vector<std::vector<TokenRecord>> sequences,
                                         const StreamOptions& opt) {
  std::vector<int> order(sequences.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return sequences[a].size() > sequences[b].size();
  });

  struct Bin {
    std::vector<int> members;
    int used = 0;
  };
  std::vector<Bin> bins;
  for (int idx : order) {
    int len = static_cast<int>(sequences[idx].size());
    if (len > opt.max_len)
      throw std::runtime_error(
          "sequence of length " + std::to_string(len) + " exceeds max_len " +
          std::to_string(opt.max_len) +
          "; reduce image resolution, context frames, or chunk length");
    bool placed = false;
    for (auto& bin : bins)
      if (bin.used + len <= opt.max_len) {
        bin.members.push_back(idx);
        bin.used += len;
        placed = true;
        break;
      }
    if (!placed) bins.push_back(Bin{{idx}, len});
  }

  std::vector<PackedSequence> out;
  for (const auto& bin : bins) {
    PackedSequence ps;
    ps.n_samples = static_cast<int>(bin.members.size());
    int sample = 0;
    for (int idx : bin.members) {
      for (TokenRecord r : sequences[idx]) {
        r.sample = sample;
        ps.records.push_back(std::move(r));
      }
      ++sample;
    }
    ps.mask = build_attention_mask(ps.records, opt.cross_noise_groups_attend);
    out.push_back(std::move(ps));
  }
  return out;
}

std::string mask_to_pgm(const MaskMat& mask) {
  std::string out = "P2\n" + std::to_string(mask.cols()) + " " +
                    std::to_string(mask.rows()) + "\n255\n";
  for (Eigen::Index i = 0; i < mask.rows(); ++i) {
    for (Eigen::Index j = 0; j < mask.cols(); ++j)
      out += (mask(i, j) ? "255" : "0") + std::string(j + 1 < mask.cols() ? " " : "");
    out += "\n";
  }
  return out;
}

std::string mask_to_csv(const MaskMat& mask) {
  std::string out;
  for (Eigen::Index i = 0; i < mask.rows(); ++i) {
    for (Eigen::Index j = 0; j < mask.cols(); ++j)
      out += std::to_string(static_cast<int>(mask(i, j))) +
             (j + 1 < mask.cols() ? "," : "");
    out += "\n";
  }
  return out;
}

}  // namespace emcot::tokenstream
