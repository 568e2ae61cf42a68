#pragma once

#include "emcot/kernels.hpp"

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace emcot {

using NodeId = int32_t;

// Named trainable parameter with Adam state. Gradients accumulate across
// sample graphs until the optimizer consumes them.
struct Param {
  std::string name;
  Mat value;
  Mat grad;
  Mat adam_m;
  Mat adam_v;
};

class ParamStore {
 public:
  Param& add(const std::string& name, Eigen::Index rows, Eigen::Index cols);
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  bool has(const std::string& name) const { return index_.count(name) > 0; }
  std::vector<Param>& all() { return params_; }
  const std::vector<Param>& all() const { return params_; }
  void zero_grad();
  size_t scalar_count() const;

 private:
  std::vector<Param> params_;
  std::map<std::string, size_t> index_;
};

// Reverse-mode tape over Eigen matrices. One graph per sample; backward()
// walks the tape in reverse creation order. Parameter nodes push their
// gradient into the owning Param so batches accumulate naturally.
class Graph {
 public:
  NodeId constant(Mat v);
  NodeId param(Param& p);

  const Mat& val(NodeId id) const { return nodes_[id].value; }
  const Mat& grad_of(NodeId id) const { return nodes_[id].grad; }

  NodeId matmul(NodeId a, NodeId b);
  NodeId transpose(NodeId a);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId hadamard(NodeId a, NodeId b);
  NodeId scale(NodeId a, double s);
  NodeId add_row_broadcast(NodeId a, NodeId bias_row);
  NodeId rms_norm(NodeId a, NodeId gain_row, double eps = 1e-6);
  NodeId silu(NodeId a);
  NodeId sigmoid(NodeId a);
  NodeId masked_softmax(NodeId logits, std::shared_ptr<const MaskMat> mask);
  NodeId gather_rows(NodeId a, std::vector<int> idx);
  NodeId concat_rows(const std::vector<NodeId>& parts);
  NodeId concat_cols(const std::vector<NodeId>& parts);
  NodeId slice_cols(NodeId a, Eigen::Index start, Eigen::Index n);
  NodeId slice_rows(NodeId a, Eigen::Index start, Eigen::Index n);
  // Rotary pairwise rotation; cos/sin are (rows, cols/2), expanded over pairs.
  NodeId rotary(NodeId a, std::shared_ptr<const Mat> cos, std::shared_ptr<const Mat> sin);

  // Scalar (1x1) losses.
  // targets: one class id per row; rows with id < 0 are ignored.
  NodeId cross_entropy_rows(NodeId logits, std::vector<int> targets);
  NodeId mse(NodeId a, Mat target);
  NodeId l1(NodeId a, Mat target);
  NodeId weighted_sum(const std::vector<std::pair<NodeId, double>>& terms);

  void backward(NodeId root);

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad = false;
    std::function<void()> back;  // may be empty for leaves/constants
  };

  NodeId push(Mat value, bool needs_grad, std::function<void()> back = {});
  Mat& grad(NodeId id);
  void add_grad(NodeId id, const Mat& g);

  std::vector<Node> nodes_;
};

}  // namespace emcot
