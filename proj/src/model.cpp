#include "emcot/model.hpp"

#include <cmath>
#include <fstream>
#include <set>

namespace emcot::model {

using tokenstream::PackedSequence;
using tokenstream::Role;
using tokenstream::TokenRecord;

ModelConfig ModelConfig::from(const RunConfig& cfg, int vocab_size) {
  ModelConfig m;
  m.d_model = static_cast<int>(cfg.integer("model.d_model"));
  m.n_layers = static_cast<int>(cfg.integer("model.n_layers"));
  m.n_heads = static_cast<int>(cfg.integer("model.n_heads"));
  m.vocab = vocab_size;
  m.image_size = static_cast<int>(cfg.integer("env.image_size"));
  m.patch = static_cast<int>(cfg.integer("model.patch"));
  m.latent_grid = static_cast<int>(cfg.integer("model.latent_grid"));
  m.latent_channels = static_cast<int>(cfg.integer("model.latent_channels"));
  m.action_dim = static_cast<int>(cfg.integer("model.action_dim"));
  m.chunk = static_cast<int>(cfg.integer("model.chunk"));
  m.flow_steps = static_cast<int>(cfg.integer("model.flow_steps"));
  m.context_frames = static_cast<int>(cfg.integer("model.context_frames"));
  m.head_dim = m.n_heads > 0 ? m.d_model / m.n_heads : 0;
  m.validate();
  return m;
}

void ModelConfig::validate() const {
  if (d_model < 2 || n_layers < 1 || n_heads < 1 || vocab < 1 || action_dim < 1 ||
      chunk < 1 || flow_steps < 1 || context_frames < 1)
    throw std::invalid_argument("model config: field out of range");
  if (d_model % n_heads != 0 || head_dim != d_model / n_heads)
    throw std::invalid_argument("model config: d_model must equal n_heads * head_dim");
  if (head_dim % 2 != 0)
    throw std::invalid_argument("model config: head_dim must be even for rotary pairs");
  if (image_size % patch != 0)
    throw std::invalid_argument("model config: patch must divide image_size");
  if (image_size % latent_grid != 0)
    throw std::invalid_argument("model config: latent grid must divide image_size");
}

Json ModelConfig::to_json() const {
  return Json{{"d_model", d_model},
              {"n_layers", n_layers},
              {"n_heads", n_heads},
              {"head_dim", head_dim},
              {"vocab", vocab},
              {"image_size", image_size},
              {"patch", patch},
              {"latent_grid", latent_grid},
              {"latent_channels", latent_channels},
              {"action_dim", action_dim},
              {"chunk", chunk},
              {"flow_steps", flow_steps},
              {"context_frames", context_frames}};
}

ModelConfig ModelConfig::config_from_json(const Json& j) {
  ModelConfig m;
  m.d_model = j.at("d_model");
  m.n_layers = j.at("n_layers");
  m.n_heads = j.at("n_heads");
  m.head_dim = j.at("head_dim");
  m.vocab = j.at("vocab");
  m.image_size = j.at("image_size");
  m.patch = j.at("patch");
  m.latent_grid = j.at("latent_grid");
  m.latent_channels = j.at("latent_channels");
  m.action_dim = j.at("action_dim");
  m.chunk = j.at("chunk");
  m.flow_steps = j.at("flow_steps");
  m.context_frames = j.at("context_frames");
  m.validate();
  return m;
}

// --- Codec ---

namespace {

Vec cell_vector(const Image& img, int cell, int cy, int cx) {
  Vec v(cell * cell * 3);
  int k = 0;
  for (int y = 0; y < cell; ++y)
    for (int x = 0; x < cell; ++x) {
      const uint8_t* p = img.px(cx * cell + x, cy * cell + y);
      for (int c = 0; c < 3; ++c) v(k++) = p[c] / 255.0;
    }
  return v;
}

}  // namespace

std::vector<Vec> Codec::encode(const Image& img) const {
  if (!fitted) throw std::logic_error("codec not fitted");
  if (img.width != image_size || img.height != image_size)
    throw std::invalid_argument("codec: image must be " + std::to_string(image_size) +
                                " px square");
  std::vector<Vec> out;
  out.reserve(static_cast<size_t>(grid) * grid);
  for (int cy = 0; cy < grid; ++cy)
    for (int cx = 0; cx < grid; ++cx)
      out.push_back(basis.transpose() * (cell_vector(img, cell, cy, cx) - mean));
  return out;
}

Image Codec::decode(const std::vector<Vec>& latents) const {
  if (!fitted) throw std::logic_error("codec not fitted");
  if (static_cast<int>(latents.size()) != grid * grid)
    throw std::invalid_argument("codec: wrong latent count");
  Image img(image_size, image_size);
  for (int cy = 0; cy < grid; ++cy)
    for (int cx = 0; cx < grid; ++cx) {
      Vec v = basis * latents[cy * grid + cx] + mean;
      int k = 0;
      for (int y = 0; y < cell; ++y)
        for (int x = 0; x < cell; ++x) {
          uint8_t* p = img.px(cx * cell + x, cy * cell + y);
          for (int c = 0; c < 3; ++c) {
            double val = std::clamp(v(k++), 0.0, 1.0);
            p[c] = static_cast<uint8_t>(std::lround(val * 255.0));
          }
        }
    }
  return img;
}

uint64_t Codec::param_hash() const {
  std::string bytes;
  auto append = [&bytes](const double* p, size_t n) {
    bytes.append(reinterpret_cast<const char*>(p), n * sizeof(double));
  };
  append(mean.data(), mean.size());
  append(basis.data(), basis.size());
  return fnv1a(bytes);
}

CodecReport fit_latent_codec(Codec& codec, const std::vector<Image>& corpus,
                             double mse_gate, double psnr_gate) {
  if (corpus.size() < 1000)
    throw std::invalid_argument("codec fit needs at least 1000 renders, got " +
                                std::to_string(corpus.size()));
  if (codec.grid <= 0 || codec.channels <= 0 || codec.image_size % codec.grid != 0)
    throw std::invalid_argument("codec fit: latent grid must divide the image size");
  codec.cell = codec.image_size / codec.grid;
  const int D = codec.cell * codec.cell * 3;
  const int C = codec.channels;

  // Every 10th image held out for the gate measurement.
  std::vector<const Image*> train, hold;
  for (size_t i = 0; i < corpus.size(); ++i)
    (i % 10 == 9 ? hold : train).push_back(&corpus[i]);

  Vec mean = Vec::Zero(D);
  size_t n_cells = 0;
  for (const Image* img : train)
    for (int cy = 0; cy < codec.grid; ++cy)
      for (int cx = 0; cx < codec.grid; ++cx) {
        mean += cell_vector(*img, codec.cell, cy, cx);
        ++n_cells;
      }
  mean /= static_cast<double>(n_cells);

  Mat cov = Mat::Zero(D, D);
  for (const Image* img : train)
    for (int cy = 0; cy < codec.grid; ++cy)
      for (int cx = 0; cx < codec.grid; ++cx) {
        Vec v = cell_vector(*img, codec.cell, cy, cx) - mean;
        cov.selfadjointView<Eigen::Lower>().rankUpdate(v);
      }
  cov = cov.selfadjointView<Eigen::Lower>();
  cov /= static_cast<double>(n_cells);

  Eigen::SelfAdjointEigenSolver<Mat> solver(cov);
  if (solver.info() != Eigen::Success)
    throw std::runtime_error("codec fit: eigendecomposition failed");
  // Eigen returns ascending eigenvalues; take the top C, largest first, with
  // a sign convention so the fit is reproducible.
  Mat basis(D, C);
  CodecReport report;
  double total_var = solver.eigenvalues().sum();
  double captured = 0;
  for (int c = 0; c < C; ++c) {
    Vec v = solver.eigenvectors().col(D - 1 - c);
    Eigen::Index imax;
    v.cwiseAbs().maxCoeff(&imax);
    if (v(imax) < 0) v = -v;
    basis.col(c) = v;
    captured += solver.eigenvalues()(D - 1 - c);
    report.component_curve.push_back((total_var - captured) / D);
  }
  codec.mean = mean;
  codec.basis = basis;
  codec.fitted = true;

  auto corpus_mse = [&](const std::vector<const Image*>& imgs) {
    double se = 0;
    size_t n = 0;
    for (const Image* img : imgs)
      for (int cy = 0; cy < codec.grid; ++cy)
        for (int cx = 0; cx < codec.grid; ++cx) {
          Vec v = cell_vector(*img, codec.cell, cy, cx);
          Vec r = basis * (basis.transpose() * (v - mean)) + mean;
          se += (v - r).squaredNorm();
          n += static_cast<size_t>(D);
        }
    return se / static_cast<double>(n);
  };
  report.train_mse = corpus_mse(train);
  report.holdout_mse = corpus_mse(hold);
  report.holdout_psnr = -10.0 * std::log10(std::max(report.holdout_mse, 1e-300));

  if (report.holdout_mse > mse_gate || report.holdout_psnr < psnr_gate) {
    std::string curve;
    for (double r : report.component_curve) curve += std::to_string(r) + " ";
    throw std::runtime_error(
        "codec fit did not converge to the configured gates: holdout mse " +
        std::to_string(report.holdout_mse) + ", psnr " +
        std::to_string(report.holdout_psnr) + " dB; residual curve per component: " +
        curve);
  }
  return report;
}

// --- Routing ---

int expert_of(Role role) {
  switch (role) {
    case Role::kText:
    case Role::kVisUnd: return 0;
    case Role::kVisClean:
    case Role::kVisNoise: return 1;
    case Role::kActNoise: return 2;
  }
  throw std::logic_error("unmapped role");
}

std::string expert_name(int e) {
  switch (e) {
    case 0: return "und";
    case 1: return "gen";
    case 2: return "act";
  }
  throw std::logic_error("bad expert index");
}

FlowNoise apply_flow_noise(PackedSequence& pack, Rng& rng) {
  FlowNoise out;
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<Vec> vis, act;
  for (auto& r : pack.records) {
    if (!tokenstream::is_noise(r.role)) continue;
    auto key = std::make_pair(r.sample, r.group);
    if (!out.t.count(key)) out.t[key] = uni(rng);
    double t = out.t[key];
    Vec eps(r.target.size());
    for (Eigen::Index i = 0; i < eps.size(); ++i) eps(i) = gauss(rng);
    r.payload = (1.0 - t) * eps + t * r.target;
    Vec vstar = r.target - eps;
    (r.role == Role::kVisNoise ? vis : act).push_back(vstar);
  }
  auto stack = [](const std::vector<Vec>& rows) {
    if (rows.empty()) return Mat(0, 0);
    Mat m(rows.size(), rows[0].size());
    for (size_t i = 0; i < rows.size(); ++i) m.row(i) = rows[i];
    return m;
  };
  out.vis_vstar = stack(vis);
  out.act_vstar = stack(act);
  return out;
}

// --- Model ---

Model::Model(ModelConfig cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  const int d = cfg_.d_model;
  auto init = [&](const std::string& name, int rows, int cols, double scale) {
    Param& p = params_.add(name, rows, cols);
    Rng rng = make_rng(derive_seed(seed, "init:" + name));
    std::normal_distribution<double> gauss(0.0, scale);
    for (Eigen::Index j = 0; j < p.value.cols(); ++j)
      for (Eigen::Index i = 0; i < p.value.rows(); ++i) p.value(i, j) = gauss(rng);
  };
  auto ones = [&](const std::string& name, int cols) {
    params_.add(name, 1, cols).value.setOnes();
  };

  init("txt_emb", cfg_.vocab, d, 0.02);
  init("patch_proj", cfg_.patch * cfg_.patch * 3, d, 0.02);
  params_.add("patch_bias", 1, d);
  init("lat_proj", cfg_.latent_channels, d, 0.02);
  params_.add("lat_bias", 1, d);
  init("act_proj", cfg_.action_dim, d, 0.02);
  params_.add("act_bias", 1, d);
  init("vis_head", d, cfg_.latent_channels, 0.02);
  init("act_head", d, cfg_.action_dim, 0.02);

  double out_scale = 0.02 / std::sqrt(2.0 * cfg_.n_layers);
  for (int e = 0; e < 3; ++e) {
    std::string en = expert_name(e);
    for (int l = 0; l < cfg_.n_layers; ++l) {
      std::string base = en + ".l" + std::to_string(l) + ".";
      ones(base + "ln1", d);
      init(base + "wq", d, d, 0.02);
      init(base + "wk", d, d, 0.02);
      init(base + "wv", d, d, 0.02);
      init(base + "wo", d, d, out_scale);
      ones(base + "ln2", d);
      init(base + "w1", d, 4 * d, 0.02);
      init(base + "w2", 4 * d, d, out_scale);
    }
    ones(en + ".lnf", d);
  }

  codec_.image_size = cfg_.image_size;
  codec_.grid = cfg_.latent_grid;
  codec_.channels = cfg_.latent_channels;
  codec_.cell = cfg_.image_size / cfg_.latent_grid;
}

tokenstream::FrameTokens Model::encode_observation(const Image& img) const {
  if (img.width != cfg_.image_size || img.height != cfg_.image_size)
    throw std::invalid_argument("encode_observation: image must be " +
                                std::to_string(cfg_.image_size) + " px square");
  tokenstream::FrameTokens ft;
  const int p = cfg_.patch;
  const int per_side = cfg_.image_size / p;
  for (int py = 0; py < per_side; ++py)
    for (int px = 0; px < per_side; ++px) {
      Vec v(p * p * 3);
      int k = 0;
      for (int y = 0; y < p; ++y)
        for (int x = 0; x < p; ++x) {
          const uint8_t* q = img.px(px * p + x, py * p + y);
          for (int c = 0; c < 3; ++c) v(k++) = q[c] / 255.0;
        }
      ft.und.push_back(std::move(v));
    }
  ft.clean = codec_.encode(img);
  return ft;
}

std::vector<std::vector<int>> Model::route_rows(const std::vector<TokenRecord>& recs) const {
  std::vector<std::vector<int>> idx(3);
  for (size_t i = 0; i < recs.size(); ++i)
    idx[expert_of(recs[i].role)].push_back(static_cast<int>(i));
  return idx;
}

namespace {

Vec sinusoid(double t, int d) {
  Vec v(d);
  for (int j = 0; j * 2 < d; ++j) {
    double freq = std::pow(10000.0, -2.0 * j / d);
    v(2 * j) = std::sin(t * freq * 1000.0);
    if (2 * j + 1 < d) v(2 * j + 1) = std::cos(t * freq * 1000.0);
  }
  return v;
}

}  // namespace

Model::ForwardOut Model::forward(Graph& g, const PackedSequence& pack,
                                 const std::map<std::pair<int, int>, double>& t_flow,
                                 bool attention_identity) {
  const auto& recs = pack.records;
  const int n = static_cast<int>(recs.size());
  if (n == 0) throw std::invalid_argument("forward: empty pack");
  if (pack.mask.rows() != n || pack.mask.cols() != n)
    throw std::invalid_argument("forward: mask shape mismatch");
  const int d = cfg_.d_model;

  // Embed per input kind, then restore record order.
  std::vector<int> text_ids, text_pos, und_pos, lat_pos, act_pos;
  std::vector<const Vec*> und_pay, lat_pay, act_pay;
  for (int i = 0; i < n; ++i) {
    const auto& r = recs[i];
    switch (r.role) {
      case Role::kText:
        if (r.token < 0 || r.token >= cfg_.vocab)
          throw std::invalid_argument("forward: token id out of range");
        text_ids.push_back(r.token);
        text_pos.push_back(i);
        break;
      case Role::kVisUnd:
        if (r.payload.size() != cfg_.patch * cfg_.patch * 3)
          throw std::invalid_argument("forward: und payload size mismatch");
        und_pay.push_back(&r.payload);
        und_pos.push_back(i);
        break;
      case Role::kVisClean:
      case Role::kVisNoise:
        if (r.payload.size() != cfg_.latent_channels)
          throw std::invalid_argument("forward: latent payload size mismatch");
        lat_pay.push_back(&r.payload);
        lat_pos.push_back(i);
        break;
      case Role::kActNoise:
        if (r.payload.size() != cfg_.action_dim)
          throw std::invalid_argument("forward: action payload size mismatch");
        act_pay.push_back(&r.payload);
        act_pos.push_back(i);
        break;
    }
  }
  auto stack = [](const std::vector<const Vec*>& rows) {
    Mat m(rows.size(), rows.empty() ? 0 : rows[0]->size());
    for (size_t i = 0; i < rows.size(); ++i) m.row(i) = *rows[i];
    return m;
  };

  std::vector<NodeId> parts;
  std::vector<int> perm;
  if (!text_ids.empty()) {
    parts.push_back(g.gather_rows(g.param(params_.at("txt_emb")), text_ids));
    perm.insert(perm.end(), text_pos.begin(), text_pos.end());
  }
  if (!und_pos.empty()) {
    parts.push_back(g.add_row_broadcast(
        g.matmul(g.constant(stack(und_pay)), g.param(params_.at("patch_proj"))),
        g.param(params_.at("patch_bias"))));
    perm.insert(perm.end(), und_pos.begin(), und_pos.end());
  }
  if (!lat_pos.empty()) {
    parts.push_back(g.add_row_broadcast(
        g.matmul(g.constant(stack(lat_pay)), g.param(params_.at("lat_proj"))),
        g.param(params_.at("lat_bias"))));
    perm.insert(perm.end(), lat_pos.begin(), lat_pos.end());
  }
  if (!act_pos.empty()) {
    parts.push_back(g.add_row_broadcast(
        g.matmul(g.constant(stack(act_pay)), g.param(params_.at("act_proj"))),
        g.param(params_.at("act_bias"))));
    perm.insert(perm.end(), act_pos.begin(), act_pos.end());
  }
  std::vector<int> inv(n);
  for (int k = 0; k < n; ++k) inv[perm[k]] = k;
  NodeId x = g.gather_rows(g.concat_rows(parts), inv);

  // Flow-time conditioning on noise records only.
  Mat time_emb = Mat::Zero(n, d);
  for (int i = 0; i < n; ++i) {
    if (!tokenstream::is_noise(recs[i].role)) continue;
    auto key = std::make_pair(recs[i].sample, recs[i].group);
    auto it = t_flow.find(key);
    if (it == t_flow.end())
      throw std::invalid_argument("forward: missing flow time for sample " +
                                  std::to_string(key.first) + " group " +
                                  std::to_string(key.second));
    time_emb.row(i) = sinusoid(it->second, d);
  }
  x = g.add(x, g.constant(time_emb));

  // Absolute position signal in the residual stream. Rotary phases only
  // rotate queries and keys, so without this the value vectors of visual
  // patch rows carry no trace of which patch they came from and attention
  // cannot read a location out of a matched patch.
  Mat pos_emb(n, d);
  for (int i = 0; i < n; ++i) pos_emb.row(i) = sinusoid(recs[i].pos / 1000.0, d);
  x = g.add(x, g.constant(pos_emb));

  // Rotary tables from per-sample positions; packing order is immaterial.
  auto cos_t = std::make_shared<Mat>(n, d / 2);
  auto sin_t = std::make_shared<Mat>(n, d / 2);
  for (int i = 0; i < n; ++i)
    for (int p = 0; p * 2 < d; ++p) {
      int j = p % (cfg_.head_dim / 2);
      double theta = recs[i].pos * std::pow(10000.0, -2.0 * j / cfg_.head_dim);
      (*cos_t)(i, p) = std::cos(theta);
      (*sin_t)(i, p) = std::sin(theta);
    }
  auto mask = std::make_shared<const MaskMat>(pack.mask);

  auto idx = route_rows(recs);
  // Apply a per-expert transform and reassemble in record order.
  auto routed = [&](NodeId in, auto&& fn) {
    std::vector<NodeId> outs;
    std::vector<int> order;
    for (int e = 0; e < 3; ++e) {
      if (idx[e].empty()) continue;
      outs.push_back(fn(e, g.gather_rows(in, idx[e])));
      order.insert(order.end(), idx[e].begin(), idx[e].end());
    }
    std::vector<int> back(n);
    for (int k = 0; k < n; ++k) back[order[k]] = k;
    return g.gather_rows(g.concat_rows(outs), back);
  };

  std::vector<NodeId> attn_nodes;
  for (int l = 0; l < cfg_.n_layers; ++l) {
    auto w = [&](int e, const char* name) -> Param& {
      return params_.at(expert_name(e) + ".l" + std::to_string(l) + "." + name);
    };
    auto proj = [&](const char* mat) {
      return routed(x, [&](int e, NodeId xe) {
        return g.matmul(g.rms_norm(xe, g.param(w(e, "ln1"))), g.param(w(e, mat)));
      });
    };
    NodeId Q = g.rotary(proj("wq"), cos_t, sin_t);
    NodeId K = g.rotary(proj("wk"), cos_t, sin_t);
    NodeId V = proj("wv");

    std::vector<NodeId> heads;
    for (int h = 0; h < cfg_.n_heads; ++h) {
      NodeId vh = g.slice_cols(V, h * cfg_.head_dim, cfg_.head_dim);
      if (attention_identity) {
        heads.push_back(vh);
        continue;
      }
      NodeId qh = g.slice_cols(Q, h * cfg_.head_dim, cfg_.head_dim);
      NodeId kh = g.slice_cols(K, h * cfg_.head_dim, cfg_.head_dim);
      NodeId logits = g.scale(g.matmul(qh, g.transpose(kh)), 1.0 / std::sqrt(cfg_.head_dim));
      NodeId attn = g.masked_softmax(logits, mask);
      attn_nodes.push_back(attn);
      heads.push_back(g.matmul(attn, vh));
    }
    NodeId merged = g.concat_cols(heads);
    NodeId att = routed(merged, [&](int e, NodeId he) { return g.matmul(he, g.param(w(e, "wo"))); });
    x = g.add(x, att);

    NodeId ffn = routed(x, [&](int e, NodeId xe) {
      NodeId ne = g.rms_norm(xe, g.param(w(e, "ln2")));
      return g.matmul(g.silu(g.matmul(ne, g.param(w(e, "w1")))), g.param(w(e, "w2")));
    });
    x = g.add(x, ffn);
  }

  ForwardOut out;
  out.attention = attn_nodes;
  out.hidden = routed(x, [&](int e, NodeId xe) {
    return g.rms_norm(xe, g.param(params_.at(expert_name(e) + ".lnf")));
  });
  for (int i = 0; i < n; ++i) {
    const auto& r = recs[i];
    if (r.role == Role::kText && r.loss) {
      out.text_loss_rows.push_back(i);
      out.text_loss_targets.push_back(r.target_token);
    }
    if (r.role == Role::kVisNoise) out.vis_rows.push_back(i);
    if (r.role == Role::kActNoise) out.act_rows.push_back(i);
  }
  return out;
}

NodeId Model::text_logits(Graph& g, const ForwardOut& out) {
  if (out.text_loss_rows.empty()) throw std::logic_error("no loss-bearing text rows");
  return g.matmul(g.gather_rows(out.hidden, out.text_loss_rows),
                  g.transpose(g.param(params_.at("txt_emb"))));
}

NodeId Model::vis_velocity(Graph& g, const ForwardOut& out) {
  if (out.vis_rows.empty()) throw std::logic_error("no vis noise rows");
  return g.matmul(g.gather_rows(out.hidden, out.vis_rows),
                  g.param(params_.at("vis_head")));
}

NodeId Model::act_velocity(Graph& g, const ForwardOut& out) {
  if (out.act_rows.empty()) throw std::logic_error("no act noise rows");
  return g.matmul(g.gather_rows(out.hidden, out.act_rows),
                  g.param(params_.at("act_head")));
}

Model::Losses Model::losses(Graph& g, const PackedSequence& noised_pack,
                            const FlowNoise& noise, double w_ce, double w_mse,
                            double w_l1, bool attention_identity) {
  auto out = forward(g, noised_pack, noise.t, attention_identity);
  Losses res;
  std::vector<std::pair<NodeId, double>> terms;
  if (!out.text_loss_rows.empty()) {
    res.ce = g.cross_entropy_rows(text_logits(g, out), out.text_loss_targets);
    res.text_count = static_cast<int>(out.text_loss_rows.size());
    terms.push_back({res.ce, w_ce});
  }
  if (!out.vis_rows.empty()) {
    res.mse = g.mse(vis_velocity(g, out), noise.vis_vstar);
    res.vis_count = static_cast<int>(out.vis_rows.size());
    terms.push_back({res.mse, w_mse});
  }
  if (!out.act_rows.empty()) {
    res.l1 = g.l1(act_velocity(g, out), noise.act_vstar);
    res.act_count = static_cast<int>(out.act_rows.size());
    terms.push_back({res.l1, w_l1});
  }
  if (terms.empty()) throw std::invalid_argument("losses: pack has no loss records");
  res.total = g.weighted_sum(terms);
  return res;
}

Mat Model::sample_flow(PackedSequence& pack, int sample, int group, int steps, Rng& rng) {
  if (steps < 1) throw std::invalid_argument("sample_flow: steps must be >= 1");
  std::vector<int> rows;
  Role kind = Role::kText;
  for (size_t i = 0; i < pack.records.size(); ++i) {
    const auto& r = pack.records[i];
    if (tokenstream::is_noise(r.role) && r.sample == sample && r.group == group) {
      rows.push_back(static_cast<int>(i));
      kind = r.role;
    }
  }
  if (rows.empty()) throw std::invalid_argument("sample_flow: no such noise group");
  const int dim = kind == Role::kVisNoise ? cfg_.latent_channels : cfg_.action_dim;

  std::normal_distribution<double> gauss(0.0, 1.0);
  Mat x(rows.size(), dim);
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) = gauss(rng);

  // Other noise groups keep their current payloads at time 0.
  std::map<std::pair<int, int>, double> t_flow;
  for (const auto& r : pack.records)
    if (tokenstream::is_noise(r.role)) t_flow[{r.sample, r.group}] = 0.0;

  for (int k = 0; k < steps; ++k) {
    t_flow[{sample, group}] = static_cast<double>(k) / steps;
    for (size_t i = 0; i < rows.size(); ++i) pack.records[rows[i]].payload = x.row(i);
    Graph g;
    auto out = forward(g, pack, t_flow);
    NodeId vel = kind == Role::kVisNoise ? vis_velocity(g, out) : act_velocity(g, out);
    const auto& all_rows = kind == Role::kVisNoise ? out.vis_rows : out.act_rows;
    for (size_t i = 0, v = 0; v < all_rows.size(); ++v) {
      if (i < rows.size() && all_rows[v] == rows[i]) {
        x.row(i) += g.val(vel).row(v) / steps;
        ++i;
      }
    }
    if (!x.allFinite())
      throw std::runtime_error("flow sampling produced a non-finite value at step " +
                               std::to_string(k));
  }
  for (size_t i = 0; i < rows.size(); ++i) pack.records[rows[i]].payload = x.row(i);
  return x;
}

int Model::greedy_next_token(const PackedSequence& pack) {
  std::map<std::pair<int, int>, double> t_flow;
  for (const auto& r : pack.records)
    if (tokenstream::is_noise(r.role)) t_flow[{r.sample, r.group}] = 0.0;
  Graph g;
  auto out = forward(g, pack, t_flow);
  std::vector<int> last = {static_cast<int>(pack.records.size()) - 1};
  NodeId logits = g.matmul(g.gather_rows(out.hidden, last),
                           g.transpose(g.param(params_.at("txt_emb"))));
  Eigen::Index best;
  g.val(logits).row(0).maxCoeff(&best);
  return static_cast<int>(best);
}

// --- Checkpoints ---

namespace {
constexpr char kMagic[] = "EMCOTCK1\n";
}

void save_checkpoint(const std::string& path, const Model& model,
                     const std::string& config_hash, const std::string& rng_state,
                     const Json& extra) {
  Json params = Json::array();
  for (const auto& p : model.params().all())
    params.push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}});
  const Codec& codec = model.codec();
  Json header{{"version", 1},
              {"config", model.config().to_json()},
              {"config_hash", config_hash},
              {"rng_state", rng_state},
              {"extra", extra},
              {"params", params},
              {"codec_fitted", codec.fitted}};
  std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path);
  out.write(kMagic, sizeof(kMagic) - 1);
  uint64_t len = hs.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(hs.data(), hs.size());
  for (const auto& p : model.params().all())
    out.write(reinterpret_cast<const char*>(p.value.data()),
              p.value.size() * sizeof(double));
  if (codec.fitted) {
    out.write(reinterpret_cast<const char*>(codec.mean.data()),
              codec.mean.size() * sizeof(double));
    out.write(reinterpret_cast<const char*>(codec.basis.data()),
              codec.basis.size() * sizeof(double));
  }
  if (!out) throw std::runtime_error("short write to " + path);
}

Checkpoint peek_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  char magic[sizeof(kMagic) - 1];
  in.read(magic, sizeof(magic));
  if (!in || std::string(magic, sizeof(magic)) != std::string(kMagic, sizeof(magic)))
    throw std::runtime_error("not a checkpoint file: " + path);
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string hs(len, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("truncated checkpoint header: " + path);
  Json header = Json::parse(hs);
  if (header.at("version") != 1)
    throw std::runtime_error("unsupported checkpoint version");
  Checkpoint meta;
  meta.config = ModelConfig::config_from_json(header.at("config"));
  meta.config_hash = header.at("config_hash");
  meta.rng_state = header.at("rng_state");
  meta.extra = header.at("extra");
  return meta;
}

Model load_checkpoint_any(const std::string& path, Checkpoint* meta_out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  char magic[sizeof(kMagic) - 1];
  in.read(magic, sizeof(magic));
  if (!in || std::string(magic, sizeof(magic)) != std::string(kMagic, sizeof(magic)))
    throw std::runtime_error("not a checkpoint file: " + path);
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string hs(len, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(len));
  Json header = Json::parse(hs);
  if (header.at("version") != 1)
    throw std::runtime_error("unsupported checkpoint version");

  Model model(ModelConfig::config_from_json(header.at("config")), 0);
  const auto& listed = header.at("params");
  auto& params = model.params().all();
  if (listed.size() != params.size())
    throw std::runtime_error("checkpoint parameter list mismatch");
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& meta = listed[i];
    if (meta.at("name") != params[i].name ||
        meta.at("rows").get<Eigen::Index>() != params[i].value.rows() ||
        meta.at("cols").get<Eigen::Index>() != params[i].value.cols())
      throw std::runtime_error("checkpoint parameter mismatch at " +
                               meta.at("name").get<std::string>());
    in.read(reinterpret_cast<char*>(params[i].value.data()),
            params[i].value.size() * sizeof(double));
  }
  if (header.at("codec_fitted").get<bool>()) {
    Codec& c = model.codec();
    c.mean = Vec(c.cell * c.cell * 3);
    c.basis = Mat(c.cell * c.cell * 3, c.channels);
    in.read(reinterpret_cast<char*>(c.mean.data()), c.mean.size() * sizeof(double));
    in.read(reinterpret_cast<char*>(c.basis.data()), c.basis.size() * sizeof(double));
    c.fitted = true;
  }
  if (!in) throw std::runtime_error("truncated checkpoint data: " + path);
  if (meta_out) {
    meta_out->config = model.config();
    meta_out->config_hash = header.at("config_hash");
    meta_out->rng_state = header.at("rng_state");
    meta_out->extra = header.at("extra");
  }
  return model;
}

Model load_checkpoint(const std::string& path, const ModelConfig& expected,
                      Checkpoint* meta) {
  Checkpoint local;
  Model model = load_checkpoint_any(path, &local);
  if (!(model.config() == expected))
    throw std::runtime_error("checkpoint config does not match the run config");
  if (meta) *meta = local;
  return model;
}

}  // namespace emcot::model
