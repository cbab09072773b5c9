#pragma once

#include <vector>

#include "ulab/matrix.hpp"

namespace ulab {

using NodeId = int;

enum class Op {
    Leaf,
    Matmul,
    Transpose,
    Add,
    Sub,
    Scale,
    AddConst,
    Gelu,
    Softplus,
    RmsNorm,
    SoftmaxRows,
    VStack,
    GatherRows,
    Reshape,
    SumAll,
    MeanAll,
    SoftmaxXentMean,
    GatherLogSoftmax,
    PpoSurrogate,
    KlPolicyRefMean,
    KlRefPolicyMean,
};

// Reverse-mode tape over whole matrices. Nodes are appended in evaluation
// order, so every parent id is smaller than its child id; backward walks ids
// in descending order, which fixes the accumulation order.
class Graph {
public:
    struct Node {
        Op op;
        std::vector<NodeId> parents;
        Matrix value;
        Matrix grad;
        double scalar = 0.0;   // Scale factor, RmsNorm eps, PpoSurrogate clip eps
        double scalar2 = 0.0;  // PpoSurrogate advantage
        std::vector<int> ids;  // row / class indices for gather and xent ops
        Matrix aux;            // op constants: AddConst term, old logprobs, reference logits
        Matrix aux2;           // cached forward intermediates needed by backward
    };

    NodeId leaf(Matrix value);
    NodeId matmul(NodeId a, NodeId b);
    NodeId transpose(NodeId a);
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId scale(NodeId a, double c);
    NodeId add_const(NodeId a, Matrix c);
    NodeId gelu(NodeId a);
    NodeId softplus(NodeId a);
    NodeId rms_norm(NodeId x, NodeId gain, double eps);
    NodeId softmax_rows(NodeId a);
    NodeId vstack(const std::vector<NodeId>& parts);
    NodeId gather_rows(NodeId table, std::vector<int> row_ids);
    NodeId reshape(NodeId a, int rows, int cols);
    NodeId sum_all(NodeId a);
    NodeId mean_all(NodeId a);

    // mean over rows of -log softmax(logits)[row][target]
    NodeId softmax_xent_mean(NodeId logits, std::vector<int> targets);
    // rows x 1 vector of log softmax(logits)[row][target]
    NodeId gather_log_softmax(NodeId logits, std::vector<int> targets);
    // tokenwise min(r*A, clip(r, 1-eps, 1+eps)*A) with r = exp(lp - old_lp)
    NodeId ppo_surrogate(NodeId logprobs, Matrix old_logprobs, double advantage, double clip_eps);
    // mean over rows of KL(softmax(logits) || softmax(ref_logits))
    NodeId kl_policy_ref_mean(NodeId logits, Matrix ref_logits);
    // mean over rows of KL(softmax(ref_logits) || softmax(logits))
    NodeId kl_ref_policy_mean(NodeId logits, Matrix ref_logits);

    const Matrix& value(NodeId id) const { return nodes_[id].value; }
    const Matrix& grad(NodeId id) const { return nodes_[id].grad; }

    // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every node the
    // loss depends on. `loss` must be 1x1. Grads from a previous backward call
    // on this graph are reset first.
    void backward(NodeId loss);

    size_t node_count() const { return nodes_.size(); }

private:
    NodeId push(Node n);
    std::vector<Node> nodes_;
};

}  // namespace ulab
