#include "emcot/graph.hpp"

#include <cmath>
#include <stdexcept>

namespace emcot {

Param& ParamStore::add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  if (index_.count(name)) throw std::invalid_argument("param exists: " + name);
  index_[name] = params_.size();
  Param p;
  p.name = name;
  p.value = Mat::Zero(rows, cols);
  p.grad = Mat::Zero(rows, cols);
  p.adam_m = Mat::Zero(rows, cols);
  p.adam_v = Mat::Zero(rows, cols);
  params_.push_back(std::move(p));
  return params_.back();
}

Param& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("no such param: " + name);
  return params_[it->second];
}

const Param& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("no such param: " + name);
  return params_[it->second];
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.grad.setZero();
}

size_t ParamStore::scalar_count() const {
  size_t n = 0;
  for (const auto& p : params_) n += static_cast<size_t>(p.value.size());
  return n;
}

NodeId Graph::push(Mat value, bool needs_grad, std::function<void()> back) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

Mat& Graph::grad(NodeId id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Graph::add_grad(NodeId id, const Mat& g) {
  if (!nodes_[id].needs_grad) return;
  grad(id) += g;
}

NodeId Graph::constant(Mat v) { return push(std::move(v), false); }

NodeId Graph::param(Param& p) {
  NodeId id = push(p.value, true);
  Param* pp = &p;
  nodes_[id].back = [this, id, pp] {
    if (nodes_[id].grad.size()) pp->grad += nodes_[id].grad;
  };
  return id;
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  Mat out;
  kernels::matmul(nodes_[a].value, nodes_[b].value, out);
  bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
  NodeId id = push(std::move(out), ng);
  if (ng)
    nodes_[id].back = [this, id, a, b] {
      const Mat& g = nodes_[id].grad;
      if (g.size() == 0) return;
      if (nodes_[a].needs_grad) {
        Mat bt = nodes_[b].value.transpose();
        kernels::matmul_add(g, bt, grad(a));
      }
      if (nodes_[b].needs_grad) {
        Mat at = nodes_[a].value.transpose();
        kernels::matmul_add(at, g, grad(b));
      }
    };
  return id;
}

NodeId Graph::transpose(NodeId a) {
  NodeId id = push(nodes_[a].value.transpose(), nodes_[a].needs_grad);
  if (nodes_[id].needs_grad)
    nodes_[id].back = [this, id, a] {
      if (nodes_[id].grad.size()) add_grad(a, nodes_[id].grad.transpose());
    };
  return id;
}

NodeId Graph::add(NodeId a, NodeId b) {
  bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
  NodeId id = push(nodes_[a].value + nodes_[b].value, ng);
  if (ng)
    nodes_[id].back = [this, id, a, b] {
      if (nodes_[id].grad.size() == 0) return;
      add_grad(a, nodes_[id].grad);
      add_grad(b, nodes_[id].grad);
    };
  return id;
}

NodeId Graph::sub(NodeId a, NodeId b) {
  bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
  NodeId id = push(nodes_[a].value - nodes_[b].value, ng);
  if (ng)
    nodes_[id].back = [this, id, a, b] {
      if (nodes_[id].grad.size() == 0) return;
      add_grad(a, nodes_[id].grad);
      add_grad(b, -nodes_[id].grad);
    };
  return id;
}

NodeId Graph::hadamard(NodeId a, NodeId b) {
  bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
  NodeId id = push(nodes_[a].value.cwiseProduct(nodes_[b].value), ng);
  if (ng)
    nodes_[id].back = [this, id, a, b] {
      if (nodes_[id].grad.size() == 0) return;
      add_grad(a, nodes_[id].grad.cwiseProduct(nodes_[b].value));
      add_grad(b, nodes_[id].grad.cwiseProduct(nodes_[a].value));
    };
  return id;
}

NodeId Graph::scale(NodeId a, double s) {
  NodeId id = push(nodes_[a].value * s, nodes_[a].needs_grad);
  if (nodes_[id].needs_grad)
    nodes_[id].back = [this, id, a, s] {
      if (nodes_[id].grad.size()) add_grad(a, nodes_[id].grad * s);
    };
  return id;
}

NodeId Graph::add_row_broadcast(NodeId a, NodeId bias_row) {
  if (nodes_[bias_row].value.rows() != 1)
    throw std::invalid_argument("add_row_broadcast: bias must be a row");
  Mat out = nodes_[a].value;
  out.rowwise() += Eigen::RowVectorXd(nodes_[bias_row].value.row(0));
  bool ng = nodes_[a].needs_grad || nodes_[bias_row].needs_grad;
  NodeId id = push(std::move(out), ng);
  if (ng)
    nodes_[id].back = [this, id, a, bias_row] {
      if (nodes_[id].grad.size() == 0) return;
      add_grad(a, nodes_[id].grad);
      if (nodes_[bias_row].needs_grad) grad(bias_row) += nodes_[id].grad.colwise().sum();
    };
  return id;
}

NodeId Graph::rms_norm(NodeId a, NodeId gain_row, double eps) {
  const Mat& x = nodes_[a].value;
  const Eigen::Index n = x.cols();
  Vec inv_rms(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    inv_rms(i) = 1.0 / std::sqrt(x.row(i).squaredNorm() / n + eps);
  Mat normed = inv_rms.asDiagonal() * x;
  Mat out = normed;
  out.array().rowwise() *= nodes_[gain_row].value.row(0).array();
  bool ng = nodes_[a].needs_grad || nodes_[gain_row].needs_grad;
  NodeId id = push(std::move(out), ng);
  if (ng)
    nodes_[id].back = [this, id, a, gain_row, inv_rms, normed, n] {
      const Mat& g = nodes_[id].grad;
      if (g.size() == 0) return;
      const Mat& x = nodes_[a].value;
      Eigen::RowVectorXd gain = nodes_[gain_row].value.row(0);
      if (nodes_[gain_row].needs_grad)
        grad(gain_row) += (g.cwiseProduct(normed)).colwise().sum();
      if (nodes_[a].needs_grad) {
        Mat gg = g;
        gg.array().rowwise() *= gain.array();
        Mat dx(x.rows(), x.cols());
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
          double dot = gg.row(i).dot(x.row(i));
          dx.row(i) = gg.row(i) * inv_rms(i) -
                      x.row(i) * (dot * inv_rms(i) * inv_rms(i) * inv_rms(i) / n);
        }
        grad(a) += dx;
      }
    };
  return id;
}

NodeId Graph::silu(NodeId a) {
  const Mat& x = nodes_[a].value;
  Mat s = (1.0 / (1.0 + (-x.array()).exp())).matrix();
  NodeId id = push(x.cwiseProduct(s), nodes_[a].needs_grad);
  if (nodes_[id].needs_grad)
    nodes_[id].back = [this, id, a, s] {
      if (nodes_[id].grad.size() == 0) return;
      const Mat& x = nodes_[a].value;
      Mat d = s.array() * (1.0 + x.array() * (1.0 - s.array()));
      grad(a) += nodes_[id].grad.cwiseProduct(d);
    };
  return id;
}

NodeId Graph::sigmoid(NodeId a) {
  Mat y = (1.0 / (1.0 + (-nodes_[a].value.array()).exp())).matrix();
  NodeId id = push(y, nodes_[a].needs_grad);
  if (nodes_[id].needs_grad)
    nodes_[id].back = [this, id, a, y] {
      if (nodes_[id].grad.size() == 0) return;
      Mat d = y.array() * (1.0 - y.array());
      grad(a) += nodes_[id].grad.cwiseProduct(d);
    };
  return id;
}

NodeId Graph::masked_softmax(NodeId logits, std::shared_ptr<const MaskMat> mask) {
  Mat out;
  kernels::masked_softmax_rows(nodes_[logits].value, *mask, out);
  NodeId id = push(out, nodes_[logits].needs_grad);
  if (nodes_[id].needs_grad)
    nodes_[id].back = [this, id, logits] {
      const Mat& g = nodes_[id].grad;
      if (g.size() == 0) return;
      const Mat& p = nodes_[id].value;
      Mat gp = g.cwiseProduct(p);
      Vec rowsum = gp.rowwise().sum();
      Mat d = gp - (rowsum.asDiagonal() * p);
      grad(logits) += d;
    };
  return id;
}

NodeId Graph::gather_rows(NodeId a, std::vector<int> idx) {
  const Mat& x = nodes_[a].value;
  Mat out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(idx[i]);
  NodeId id = push(std::move(out), nodes_[a].needs_grad);
  if (nodes_[id].needs_grad)
    nodes_[id].back = [this, id, a, idx = std::move(idx)] {
      const Mat& g = nodes_[id].grad;
      if (g.size() == 0) return;
      Mat& ga = grad(a);
      for (size_t i = 0; i < idx.size(); ++i)
        ga.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    };
  return id;
}

NodeId Graph::concat_rows(const std::vector<NodeId>& parts) {
  Eigen::Index rows = 0;
  bool ng = false;
  for (NodeId p : parts) {
    rows += nodes_[p].value.rows();
    ng = ng || nodes_[p].needs_grad;
  }
  Mat out(rows, nodes_[parts.front()].value.cols());
  Eigen::Index r = 0;
  for (NodeId p : parts) {
    out.middleRows(r, nodes_[p].value.rows()) = nodes_[p].value;
    r += nodes_[p].value.rows();
  }
  NodeId id = push(std::move(out), ng);
  if (ng)
    nodes_[id].back = [this, id, parts] {
      const Mat& g = nodes_[id].grad;
      if (g.size() == 0) return;
      Eigen::Index r = 0;
      for (NodeId p : parts) {
        add_grad(p, g.middleRows(r, nodes_[p].value.rows()));
        r += nodes_[p].value.rows();
      }
    };
  return id;
}

NodeId Graph::concat_cols(const std::vector<NodeId>& parts) {
  Eigen::Index cols = 0;
  bool ng = false;
  for (NodeId p : parts) {
    cols += nodes_[p].value.cols();
    ng = ng || nodes_[p].needs_grad;
  }
  Mat out(nodes_[parts.front()].value.rows(), cols);
  Eigen::Index c = 0;
  for (NodeId p : parts) {
    out.middleCols(c, nodes_[p].value.cols()) = nodes_[p].value;
    c += nodes_[p].value.cols();
  }
  NodeId id = push(std::move(out), ng);
  if (ng)
    nodes_[id].back = [this, id, parts] {
      const Mat& g = nodes_[id].grad;
      if (g.size() == 0) return;
      Eigen::Index c = 0;
      for (NodeId p : parts) {
        add_grad(p, g.middleCols(c, nodes_[p].value.cols()));
        c += nodes_[p].value.cols();
      }
    };
  return id;
}

NodeId Graph::slice_cols(NodeId a, Eigen::Index start, Eigen::Index n) {
  NodeId id = push(nodes_[a].value.middleCols(start, n), nodes_[a].needs_grad);
  if (nodes_[id].needs_grad)
    nodes_[id].back = [this, id, a, start, n] {
      const Mat& g = nodes_[id].grad;
      if (g.size() == 0) return;
      grad(a).middleCols(start, n) += g;
    };
  return id;
}

NodeId Graph::slice_rows(NodeId a, Eigen::Index start, Eigen::Index n) {
  NodeId id = push(nodes_[a].value.middleRows(start, n), nodes_[a].needs_grad);
  if (nodes_[id].needs_grad)
    nodes_[id].back = [this, id, a, start, n] {
      const Mat& g = nodes_[id].grad;
      if (g.size() == 0) return;
      grad(a).middleRows(start, n) += g;
    };
  return id;
}

NodeId Graph::rotary(NodeId a, std::shared_ptr<const Mat> cos, std::shared_ptr<const Mat> sin) {
  const Mat& x = nodes_[a].value;
  if (x.cols() % 2 != 0 || cos->rows() != x.rows() || cos->cols() * 2 != x.cols())
    throw std::invalid_argument("rotary: shape mismatch");
  Mat out(x.rows(), x.cols());
  for (Eigen::Index j = 0; j * 2 < x.cols(); ++j) {
    out.col(2 * j) =
        x.col(2 * j).cwiseProduct(cos->col(j)) - x.col(2 * j + 1).cwiseProduct(sin->col(j));
    out.col(2 * j + 1) =
        x.col(2 * j).cwiseProduct(sin->col(j)) + x.col(2 * j + 1).cwiseProduct(cos->col(j));
  }
  NodeId id = push(std::move(out), nodes_[a].needs_grad);
  if (nodes_[id].needs_grad)
    nodes_[id].back = [this, id, a, cos, sin] {
      const Mat& g = nodes_[id].grad;
      if (g.size() == 0) return;
      Mat& ga = grad(a);
      for (Eigen::Index j = 0; j * 2 < g.cols(); ++j) {
        ga.col(2 * j) +=
            g.col(2 * j).cwiseProduct(cos->col(j)) + g.col(2 * j + 1).cwiseProduct(sin->col(j));
        ga.col(2 * j + 1) += g.col(2 * j + 1).cwiseProduct(cos->col(j)) -
                             g.col(2 * j).cwiseProduct(sin->col(j));
      }
    };
  return id;
}

NodeId Graph::cross_entropy_rows(NodeId logits, std::vector<int> targets) {
  const Mat& z = nodes_[logits].value;
  if (static_cast<Eigen::Index>(targets.size()) != z.rows())
    throw std::invalid_argument("cross_entropy: target count mismatch");
  int nvalid = 0;
  double total = 0;
  Mat probs(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    double mx = z.row(i).maxCoeff();
    Eigen::ArrayXd e = (z.row(i).array() - mx).exp();
    double sum = e.sum();
    probs.row(i) = (e / sum).matrix();
    if (targets[i] >= 0) {
      total += std::log(sum) + mx - z(i, targets[i]);
      ++nvalid;
    }
  }
  Mat out(1, 1);
  out(0, 0) = nvalid ? total / nvalid : 0.0;
  NodeId id = push(out, nodes_[logits].needs_grad && nvalid > 0);
  if (nodes_[id].needs_grad)
    nodes_[id].back = [this, id, logits, targets = std::move(targets), probs, nvalid] {
      if (nodes_[id].grad.size() == 0) return;
      double up = nodes_[id].grad(0, 0);
      Mat d = Mat::Zero(probs.rows(), probs.cols());
      for (Eigen::Index i = 0; i < probs.rows(); ++i) {
        if (targets[i] < 0) continue;
        d.row(i) = probs.row(i);
        d(i, targets[i]) -= 1.0;
      }
      grad(logits) += d * (up / nvalid);
    };
  return id;
}

NodeId Graph::mse(NodeId a, Mat target) {
  const Mat& x = nodes_[a].value;
  Mat diff = x - target;
  double n = static_cast<double>(x.size());
  Mat out(1, 1);
  out(0, 0) = diff.squaredNorm() / n;
  NodeId id = push(out, nodes_[a].needs_grad);
  if (nodes_[id].needs_grad)
    nodes_[id].back = [this, id, a, diff, n] {
      if (nodes_[id].grad.size() == 0) return;
      grad(a) += diff * (2.0 * nodes_[id].grad(0, 0) / n);
    };
  return id;
}

NodeId Graph::l1(NodeId a, Mat target) {
  const Mat& x = nodes_[a].value;
  Mat diff = x - target;
  double n = static_cast<double>(x.size());
  Mat out(1, 1);
  out(0, 0) = diff.cwiseAbs().sum() / n;
  NodeId id = push(out, nodes_[a].needs_grad);
  if (nodes_[id].needs_grad)
    nodes_[id].back = [this, id, a, diff, n] {
      if (nodes_[id].grad.size() == 0) return;
      Mat sign = diff.unaryExpr([](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
      grad(a) += sign * (nodes_[id].grad(0, 0) / n);
    };
  return id;
}

NodeId Graph::weighted_sum(const std::vector<std::pair<NodeId, double>>& terms) {
  double total = 0;
  bool ng = false;
  for (const auto& [n, w] : terms) {
    total += nodes_[n].value(0, 0) * w;
    ng = ng || nodes_[n].needs_grad;
  }
  Mat out(1, 1);
  out(0, 0) = total;
  NodeId id = push(out, ng);
  if (ng)
    nodes_[id].back = [this, id, terms] {
      if (nodes_[id].grad.size() == 0) return;
      double up = nodes_[id].grad(0, 0);
      for (const auto& [n, w] : terms) {
        if (!nodes_[n].needs_grad) continue;
        Mat g(1, 1);
        g(0, 0) = up * w;
        add_grad(n, g);
      }
    };
  return id;
}

void Graph::backward(NodeId root) {
  if (nodes_[root].value.size() != 1)
    throw std::invalid_argument("backward: root must be scalar");
  grad(root).setConstant(1.0);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
    if (it->back && it->grad.size() != 0) it->back();
}

}  // namespace emcot
