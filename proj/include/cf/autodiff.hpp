#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "cf/tensor.hpp"

namespace cf {

enum class OpKind : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kRelu,
  kLog,
  kExp,
  kAbs,
  kScale,
  kSigmoid,
  kMatmul,
  kConv2d,
  kSum,
  kSumAxis,
  kMean,
  kMeanAxis,
  kMax,
  kMaxAxis,
  kReshape,
  kConcatRows,
  kDense,
  kScaledNorm,
  kMaxPool,
  kAvgPool,
  kSoftmaxTau,
  kLogSoftmaxTau,
};

// One recorded operation. Constant operands (inputs[i] == kNoNode) are
// copied into `saved` in slot order so backward and replay can read them.
struct TapeNode {
  OpKind kind = OpKind::kLeaf;
  std::vector<NodeId> inputs;
  std::vector<Tensor> saved;
  std::vector<double> fargs;
  std::vector<std::int64_t> iargs;
  Tensor value;
};

// Per-channel batch statistics actually used by a train-mode normalization
// forward; the layer owner folds them into its running estimates.
struct NormBatchStats {
  std::vector<double> mean;
  std::vector<double> var;
};

// Reverse-mode tape. Nodes are appended in execution order, so every node
// only references smaller ids. An op records a node exactly when at least
// one operand requires grad; pure-constant arithmetic stays off the tape.
// A Tape instance is confined to a single thread.
class Tape {
 public:
  // Validated tensor creation. When requires_grad is set, a leaf node is
  // registered and the returned tensor carries its id.
  Tensor create(std::vector<std::size_t> shape, std::vector<double> data,
                bool requires_grad);

  // Elementwise. Binary ops demand exactly equal shapes; the only
  // broadcasting anywhere is scale-by-scalar.
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor relu(const Tensor& x);
  Tensor log(const Tensor& x);
  Tensor exp(const Tensor& x);
  Tensor abs(const Tensor& x);
  Tensor scale(const Tensor& x, double c);
  Tensor sigmoid(const Tensor& x);

  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor conv2d(const Tensor& input, const Tensor& kernel, std::int64_t stride,
                std::int64_t padding);
  Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                std::int64_t stride, std::int64_t padding);

  // Reductions. Max routes its gradient to the first maximal element.
  Tensor sum(const Tensor& x);
  Tensor sum(const Tensor& x, std::size_t axis);
  Tensor mean(const Tensor& x);
  Tensor mean(const Tensor& x, std::size_t axis);
  Tensor max(const Tensor& x);
  Tensor max(const Tensor& x, std::size_t axis);

  Tensor reshape(const Tensor& x, std::vector<std::size_t> shape);
  Tensor concat_rows(const Tensor& a, const Tensor& b);

  // y = x W + 1 b^T for x [N,F], W [F,U], b [U].
  Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b);

  // Channel normalization with learnable scale/shift. With use_batch_stats
  // the statistics come from x and are reported through batch_stats_out;
  // otherwise running_mean/running_var are used as constants (eval mode).
  Tensor scaled_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                     const std::vector<double>& running_mean,
                     const std::vector<double>& running_var, double eps,
                     bool use_batch_stats, NormBatchStats* batch_stats_out);

  Tensor max_pool(const Tensor& x, std::size_t window, std::size_t stride);
  Tensor avg_pool(const Tensor& x, std::size_t window, std::size_t stride);

  // Row-wise temperature softmax with the max-shift trick.
  Tensor softmax_tau(const Tensor& logits, double tau);
  Tensor log_softmax_tau(const Tensor& logits, double tau);

  // Reverse sweep from a scalar loss. Fills the gradient map for every
  // node reachable from the loss; grad(loss) == 1.
  void backward(const Tensor& loss);

  const Tensor* grad(NodeId id) const;
  const TapeNode& node(NodeId id) const;
  std::size_t node_count() const { return nodes_.size(); }

  // Recompute a node's forward output from its stored inputs. Replaying
  // ids in order reproduces the recorded forward pass bit-for-bit.
  Tensor recompute(NodeId id) const;

 private:
  NodeId record(TapeNode node);
  Tensor result(OpKind kind, std::vector<const Tensor*> operands,
                Tensor value, std::vector<double> fargs,
                std::vector<std::int64_t> iargs);
  const Tensor& operand(const TapeNode& node, std::size_t slot) const;
  void accumulate(NodeId id, const std::vector<double>& contribution,
                  const std::vector<std::size_t>& shape);
  void backward_node(NodeId id);

  std::vector<TapeNode> nodes_;
  std::vector<std::optional<Tensor>> grads_;
};

}  // namespace cf
