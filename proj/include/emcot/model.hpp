#pragma once

#include "emcot/config.hpp"
#include "emcot/graph.hpp"
#include "emcot/image.hpp"
#include "emcot/tokenstream.hpp"
#include "emcot/util.hpp"

#include <map>
#include <string>
#include <utility>
#include <vector>

namespace emcot::model {

struct ModelConfig {
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int head_dim = 32;
  int vocab = 0;
  int image_size = 64;
  int patch = 8;
  int latent_grid = 8;
  int latent_channels = 4;
  int action_dim = 8;
  int chunk = 16;
  int flow_steps = 5;
  int context_frames = 3;

  static ModelConfig from(const RunConfig& cfg, int vocab_size);
  void validate() const;
  Json to_json() const;
  static ModelConfig config_from_json(const Json& j);
  bool operator==(const ModelConfig&) const = default;
};

// Linear patch autoencoder fit by principal components; applied to
// non-overlapping cells, frozen after its pre-fit.
struct Codec {
  int image_size = 0;
  int grid = 0;      // g: latent grid side
  int channels = 0;  // per-cell latent dimension
  int cell = 0;      // pixels per cell side
  Vec mean;          // cell*cell*3
  Mat basis;         // (cell*cell*3) x channels, orthonormal columns
  bool fitted = false;

  // Row-major g*g latent vectors.
  std::vector<Vec> encode(const Image& img) const;
  Image decode(const std::vector<Vec>& latents) const;
  uint64_t param_hash() const;
};

struct CodecReport {
  double train_mse = 0;
  double holdout_mse = 0;
  double holdout_psnr = 0;
  std::vector<double> component_curve;  // residual MSE as components are added
};

// Principal-component fit over all image cells; throws if the configured
// gates are not met, reporting the residual curve.
CodecReport fit_latent_codec(Codec& codec, const std::vector<Image>& corpus,
                             double mse_gate, double psnr_gate);

// Routing table: role -> expert index {0 = und, 1 = gen, 2 = act}.
int expert_of(tokenstream::Role role);
std::string expert_name(int e);

// Flow-matching noise applied in place: for each (sample, group) draw
// t ~ U(0,1), per record eps ~ N(0,I), payload = (1-t) eps + t target.
struct FlowNoise {
  std::map<std::pair<int, int>, double> t;  // (sample, group) -> time
  Mat vis_vstar;                            // target velocities, record order
  Mat act_vstar;
};
FlowNoise apply_flow_noise(tokenstream::PackedSequence& pack, Rng& rng);

class Model {
 public:
  Model(ModelConfig cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  Codec& codec() { return codec_; }
  const Codec& codec() const { return codec_; }

  // Dual-path tokens for one rendered frame (deterministic).
  tokenstream::FrameTokens encode_observation(const Image& img) const;

  struct ForwardOut {
    NodeId hidden = -1;          // (n x d_model), record order
    std::vector<NodeId> attention;  // softmax nodes, layer-major then head
    std::vector<int> text_loss_rows;
    std::vector<int> text_loss_targets;
    std::vector<int> vis_rows;   // vis_noise record indices
    std::vector<int> act_rows;   // act_noise record indices
  };
  // attention_identity replaces the attention matrix with identity; used by
  // the expert-locality diagnostic.
  ForwardOut forward(Graph& g, const tokenstream::PackedSequence& pack,
                     const std::map<std::pair<int, int>, double>& t_flow,
                     bool attention_identity = false);

  NodeId text_logits(Graph& g, const ForwardOut& out);      // loss rows x vocab
  NodeId vis_velocity(Graph& g, const ForwardOut& out);     // vis rows x channels
  NodeId act_velocity(Graph& g, const ForwardOut& out);     // act rows x action_dim

  struct Losses {
    NodeId ce = -1, mse = -1, l1 = -1, total = -1;
    int text_count = 0, vis_count = 0, act_count = 0;
  };
  Losses losses(Graph& g, const tokenstream::PackedSequence& noised_pack,
                const FlowNoise& noise, double w_ce, double w_mse, double w_l1,
                bool attention_identity = false);

  // Euler flow sampling for the noise records of (sample, group): start from
  // eps, integrate the predicted velocity over N uniform steps. Returns one
  // row per noise record. Throws on NaN with the offending step index.
  Mat sample_flow(tokenstream::PackedSequence& pack, int sample, int group, int steps,
                  Rng& rng);

  // Greedy next-token prediction given the current pack (last text record).
  int greedy_next_token(const tokenstream::PackedSequence& pack);

 private:
  std::vector<std::vector<int>> route_rows(
      const std::vector<tokenstream::TokenRecord>& recs) const;

  ModelConfig cfg_;
  ParamStore params_;
  Codec codec_;
};

struct Checkpoint {
  ModelConfig config;
  std::string config_hash;
  std::string rng_state;
  Json extra;  // stage metadata
};

void save_checkpoint(const std::string& path, const Model& model,
                     const std::string& config_hash, const std::string& rng_state,
                     const Json& extra = Json::object());
// Throws on magic/version/config mismatch with the expected config.
Model load_checkpoint(const std::string& path, const ModelConfig& expected,
                      Checkpoint* meta = nullptr);
// Reads only the stored header (no parameter data validation against a config).
Checkpoint peek_checkpoint(const std::string& path);
Model load_checkpoint_any(const std::string& path, Checkpoint* meta = nullptr);

}  // namespace emcot::model
