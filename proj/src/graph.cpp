#include "ulab/graph.hpp"

#include <cmath>

#include "ulab/errors.hpp"
#include "ulab/mathops.hpp"

namespace ulab {

NodeId Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::leaf(Matrix value) {
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(value);
    return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
    Node n;
    n.op = Op::Matmul;
    n.parents = {a, b};
    n.value = ulab::matmul(nodes_[a].value, nodes_[b].value);
    return push(std::move(n));
}

NodeId Graph::transpose(NodeId a) {
    Node n;
    n.op = Op::Transpose;
    n.parents = {a};
    n.value = ulab::transpose(nodes_[a].value);
    return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
    Node n;
    n.op = Op::Add;
    n.parents = {a, b};
    n.value = ulab::add(nodes_[a].value, nodes_[b].value);
    return push(std::move(n));
}

NodeId Graph::sub(NodeId a, NodeId b) {
    Node n;
    n.op = Op::Sub;
    n.parents = {a, b};
    n.value = ulab::sub(nodes_[a].value, nodes_[b].value);
    return push(std::move(n));
}

NodeId Graph::scale(NodeId a, double c) {
    Node n;
    n.op = Op::Scale;
    n.parents = {a};
    n.scalar = c;
    n.value = ulab::scale(nodes_[a].value, c);
    return push(std::move(n));
}

NodeId Graph::add_const(NodeId a, Matrix c) {
    check_same_shape(nodes_[a].value, c, "add_const");
    Node n;
    n.op = Op::AddConst;
    n.parents = {a};
    n.value = ulab::add(nodes_[a].value, c);
    n.aux = std::move(c);
    return push(std::move(n));
}

NodeId Graph::gelu(NodeId a) {
    Node n;
    n.op = Op::Gelu;
    n.parents = {a};
    n.value = ulab::gelu(nodes_[a].value);
    return push(std::move(n));
}

NodeId Graph::softplus(NodeId a) {
    Node n;
    n.op = Op::Softplus;
    n.parents = {a};
    n.value = ulab::softplus(nodes_[a].value);
    return push(std::move(n));
}

NodeId Graph::rms_norm(NodeId x, NodeId gain, double eps) {
    Node n;
    n.op = Op::RmsNorm;
    n.parents = {x, gain};
    n.scalar = eps;
    n.value = ulab::rms_norm(nodes_[x].value, nodes_[gain].value, eps, &n.aux2);
    return push(std::move(n));
}

NodeId Graph::softmax_rows(NodeId a) {
    Node n;
    n.op = Op::SoftmaxRows;
    n.parents = {a};
    n.value = ulab::softmax_rows(nodes_[a].value);
    return push(std::move(n));
}

NodeId Graph::vstack(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw DimError("vstack: no parts");
    int rows = 0;
    const int cols = nodes_[parts[0]].value.cols;
    for (NodeId p : parts) {
        if (nodes_[p].value.cols != cols) throw DimError("vstack: column mismatch");
        rows += nodes_[p].value.rows;
    }
    Node n;
    n.op = Op::VStack;
    n.parents = parts;
    n.value = Matrix(rows, cols);
    int r0 = 0;
    for (NodeId p : parts) {
        const Matrix& v = nodes_[p].value;
        for (int r = 0; r < v.rows; ++r) {
            for (int c = 0; c < cols; ++c) n.value(r0 + r, c) = v(r, c);
        }
        r0 += v.rows;
    }
    return push(std::move(n));
}

NodeId Graph::gather_rows(NodeId table, std::vector<int> row_ids) {
    const Matrix& t = nodes_[table].value;
    Node n;
    n.op = Op::GatherRows;
    n.parents = {table};
    n.value = Matrix(static_cast<int>(row_ids.size()), t.cols);
    for (size_t r = 0; r < row_ids.size(); ++r) {
        const int src = row_ids[r];
        if (src < 0 || src >= t.rows) throw DimError("gather_rows: row id out of range");
        for (int c = 0; c < t.cols; ++c) n.value(static_cast<int>(r), c) = t(src, c);
    }
    n.ids = std::move(row_ids);
    return push(std::move(n));
}

NodeId Graph::reshape(NodeId a, int rows, int cols) {
    const Matrix& v = nodes_[a].value;
    if (static_cast<size_t>(rows) * cols != v.size()) throw DimError("reshape: element count mismatch");
    Node n;
    n.op = Op::Reshape;
    n.parents = {a};
    n.value = Matrix(rows, cols, v.data);
    return push(std::move(n));
}

NodeId Graph::sum_all(NodeId a) {
    Node n;
    n.op = Op::SumAll;
    n.parents = {a};
    double s = 0.0;
    for (double x : nodes_[a].value.data) s += x;
    n.value = Matrix(1, 1, {s});
    return push(std::move(n));
}

NodeId Graph::mean_all(NodeId a) {
    Node n;
    n.op = Op::MeanAll;
    n.parents = {a};
    double s = 0.0;
    for (double x : nodes_[a].value.data) s += x;
    n.value = Matrix(1, 1, {s / static_cast<double>(nodes_[a].value.size())});
    return push(std::move(n));
}

NodeId Graph::softmax_xent_mean(NodeId logits, std::vector<int> targets) {
    const Matrix& z = nodes_[logits].value;
    if (static_cast<int>(targets.size()) != z.rows) throw DimError("softmax_xent_mean: one target per row required");
    Node n;
    n.op = Op::SoftmaxXentMean;
    n.parents = {logits};
    n.aux2 = ulab::softmax_rows(z);
    const Matrix lp = ulab::log_softmax_rows(z);
    double loss = 0.0;
    for (int r = 0; r < z.rows; ++r) {
        const int t = targets[r];
        if (t < 0 || t >= z.cols) throw DimError("softmax_xent_mean: target out of range");
        loss -= lp(r, t);
    }
    n.value = Matrix(1, 1, {loss / z.rows});
    n.ids = std::move(targets);
    return push(std::move(n));
}

NodeId Graph::gather_log_softmax(NodeId logits, std::vector<int> targets) {
    const Matrix& z = nodes_[logits].value;
    if (static_cast<int>(targets.size()) != z.rows) throw DimError("gather_log_softmax: one target per row required");
    Node n;
    n.op = Op::GatherLogSoftmax;
    n.parents = {logits};
    n.aux2 = ulab::softmax_rows(z);
    const Matrix lp = ulab::log_softmax_rows(z);
    n.value = Matrix(z.rows, 1);
    for (int r = 0; r < z.rows; ++r) {
        const int t = targets[r];
        if (t < 0 || t >= z.cols) throw DimError("gather_log_softmax: target out of range");
        n.value(r, 0) = lp(r, t);
    }
    n.ids = std::move(targets);
    return push(std::move(n));
}

NodeId Graph::ppo_surrogate(NodeId logprobs, Matrix old_logprobs, double advantage, double clip_eps) {
    const Matrix& lp = nodes_[logprobs].value;
    if (lp.cols != 1) throw DimError("ppo_surrogate: logprobs must be rows x 1");
    check_same_shape(lp, old_logprobs, "ppo_surrogate");
    Node n;
    n.op = Op::PpoSurrogate;
    n.parents = {logprobs};
    n.scalar = clip_eps;
    n.scalar2 = advantage;
    n.value = Matrix(lp.rows, 1);
    for (int r = 0; r < lp.rows; ++r) {
        const double ratio = std::exp(lp(r, 0) - old_logprobs(r, 0));
        const double clipped = std::min(std::max(ratio, 1.0 - clip_eps), 1.0 + clip_eps);
        n.value(r, 0) = std::min(ratio * advantage, clipped * advantage);
    }
    n.aux = std::move(old_logprobs);
    return push(std::move(n));
}

NodeId Graph::kl_policy_ref_mean(NodeId logits, Matrix ref_logits) {
    const Matrix& z = nodes_[logits].value;
    check_same_shape(z, ref_logits, "kl_policy_ref_mean");
    Node n;
    n.op = Op::KlPolicyRefMean;
    n.parents = {logits};
    n.aux2 = ulab::softmax_rows(z);
    const Matrix lp = ulab::log_softmax_rows(z);
    const Matrix lq = ulab::log_softmax_rows(ref_logits);
    // aux stores log p - log q; row KLs are cached in ids-free scalar form below
    n.aux = ulab::sub(lp, lq);
    double total = 0.0;
    for (int r = 0; r < z.rows; ++r) {
        double row = 0.0;
        for (int c = 0; c < z.cols; ++c) row += n.aux2(r, c) * n.aux(r, c);
        total += row;
    }
    n.value = Matrix(1, 1, {total / z.rows});
    return push(std::move(n));
}

NodeId Graph::kl_ref_policy_mean(NodeId logits, Matrix ref_logits) {
    const Matrix& z = nodes_[logits].value;
    check_same_shape(z, ref_logits, "kl_ref_policy_mean");
    Node n;
    n.op = Op::KlRefPolicyMean;
    n.parents = {logits};
    n.aux2 = ulab::softmax_rows(z);
    n.aux = ulab::softmax_rows(ref_logits);
    const Matrix lp = ulab::log_softmax_rows(z);
    const Matrix lq = ulab::log_softmax_rows(ref_logits);
    double total = 0.0;
    for (int r = 0; r < z.rows; ++r) {
        for (int c = 0; c < z.cols; ++c) total += n.aux(r, c) * (lq(r, c) - lp(r, c));
    }
    n.value = Matrix(1, 1, {total / z.rows});
    return push(std::move(n));
}

void Graph::backward(NodeId loss) {
    Node& top = nodes_[loss];
    if (top.value.rows != 1 || top.value.cols != 1) throw DimError("backward: loss must be 1x1");

    std::vector<char> reachable(nodes_.size(), 0);
    std::vector<NodeId> stack = {loss};
    reachable[loss] = 1;
    while (!stack.empty()) {
        const NodeId id = stack.back();
        stack.pop_back();
        for (NodeId p : nodes_[id].parents) {
            if (!reachable[p]) {
                reachable[p] = 1;
                stack.push_back(p);
            }
        }
    }
    for (size_t i = 0; i < nodes_.size(); ++i) {
        if (reachable[i]) {
            nodes_[i].grad = Matrix(nodes_[i].value.rows, nodes_[i].value.cols);
        }
    }
    top.grad(0, 0) = 1.0;

    for (NodeId id = loss; id >= 0; --id) {
        if (!reachable[id]) continue;
        Node& n = nodes_[id];
        const Matrix& g = n.grad;
        switch (n.op) {
            case Op::Leaf:
                break;
            case Op::Matmul: {
                Node& a = nodes_[n.parents[0]];
                Node& b = nodes_[n.parents[1]];
                add_in_place(a.grad, matmul_nt(g, b.value));
                add_in_place(b.grad, matmul_tn(a.value, g));
                break;
            }
            case Op::Transpose:
                add_in_place(nodes_[n.parents[0]].grad, ulab::transpose(g));
                break;
            case Op::Add:
                add_in_place(nodes_[n.parents[0]].grad, g);
                add_in_place(nodes_[n.parents[1]].grad, g);
                break;
            case Op::Sub:
                add_in_place(nodes_[n.parents[0]].grad, g);
                axpy_in_place(nodes_[n.parents[1]].grad, -1.0, g);
                break;
            case Op::Scale:
                axpy_in_place(nodes_[n.parents[0]].grad, n.scalar, g);
                break;
            case Op::AddConst:
                add_in_place(nodes_[n.parents[0]].grad, g);
                break;
            case Op::Gelu: {
                Node& a = nodes_[n.parents[0]];
                for (size_t i = 0; i < g.size(); ++i) {
                    a.grad.data[i] += g.data[i] * gelu_grad_scalar(a.value.data[i]);
                }
                break;
            }
            case Op::Softplus: {
                Node& a = nodes_[n.parents[0]];
                for (size_t i = 0; i < g.size(); ++i) {
                    a.grad.data[i] += g.data[i] * sigmoid_scalar(a.value.data[i]);
                }
                break;
            }
            case Op::RmsNorm: {
                Node& x = nodes_[n.parents[0]];
                Node& gain = nodes_[n.parents[1]];
                const int d = x.value.cols;
                for (int r = 0; r < x.value.rows; ++r) {
                    const double s = n.aux2(r, 0);
                    double inner = 0.0;  // sum_j gy_j * gain_j * x_j
                    for (int c = 0; c < d; ++c) {
                        inner += g(r, c) * gain.value(0, c) * x.value(r, c);
                        gain.grad(0, c) += g(r, c) * x.value(r, c) * s;
                    }
                    const double k = s * s * s * inner / d;
                    for (int c = 0; c < d; ++c) {
                        x.grad(r, c) += s * gain.value(0, c) * g(r, c) - k * x.value(r, c);
                    }
                }
                break;
            }
            case Op::SoftmaxRows: {
                Node& a = nodes_[n.parents[0]];
                const Matrix& p = n.value;
                for (int r = 0; r < p.rows; ++r) {
                    double dot = 0.0;
                    for (int c = 0; c < p.cols; ++c) dot += g(r, c) * p(r, c);
                    for (int c = 0; c < p.cols; ++c) a.grad(r, c) += p(r, c) * (g(r, c) - dot);
                }
                break;
            }
            case Op::VStack: {
                int r0 = 0;
                for (NodeId pid : n.parents) {
                    Node& p = nodes_[pid];
                    for (int r = 0; r < p.value.rows; ++r) {
                        for (int c = 0; c < p.value.cols; ++c) p.grad(r, c) += g(r0 + r, c);
                    }
                    r0 += p.value.rows;
                }
                break;
            }
            case Op::GatherRows: {
                Node& t = nodes_[n.parents[0]];
                for (size_t r = 0; r < n.ids.size(); ++r) {
                    for (int c = 0; c < t.value.cols; ++c) {
                        t.grad(n.ids[r], c) += g(static_cast<int>(r), c);
                    }
                }
                break;
            }
            case Op::Reshape: {
                Node& a = nodes_[n.parents[0]];
                for (size_t i = 0; i < g.size(); ++i) a.grad.data[i] += g.data[i];
                break;
            }
            case Op::SumAll: {
                Node& a = nodes_[n.parents[0]];
                const double gs = g(0, 0);
                for (double& v : a.grad.data) v += gs;
                break;
            }
            case Op::MeanAll: {
                Node& a = nodes_[n.parents[0]];
                const double gs = g(0, 0) / static_cast<double>(a.value.size());
                for (double& v : a.grad.data) v += gs;
                break;
            }
            case Op::SoftmaxXentMean: {
                Node& a = nodes_[n.parents[0]];
                const double gs = g(0, 0) / n.aux2.rows;
                for (int r = 0; r < n.aux2.rows; ++r) {
                    for (int c = 0; c < n.aux2.cols; ++c) a.grad(r, c) += gs * n.aux2(r, c);
                    a.grad(r, n.ids[r]) -= gs;
                }
                break;
            }
            case Op::GatherLogSoftmax: {
                Node& a = nodes_[n.parents[0]];
                for (int r = 0; r < n.aux2.rows; ++r) {
                    const double gr = g(r, 0);
                    if (gr == 0.0) continue;
                    for (int c = 0; c < n.aux2.cols; ++c) a.grad(r, c) -= gr * n.aux2(r, c);
                    a.grad(r, n.ids[r]) += gr;
                }
                break;
            }
            case Op::PpoSurrogate: {
                Node& a = nodes_[n.parents[0]];
                const double adv = n.scalar2;
                for (int r = 0; r < a.value.rows; ++r) {
                    const double ratio = std::exp(a.value(r, 0) - n.aux(r, 0));
                    const double clipped = std::min(std::max(ratio, 1.0 - n.scalar), 1.0 + n.scalar);
                    // unclipped branch owns the gradient (ties included)
                    if (ratio * adv <= clipped * adv) {
                        a.grad(r, 0) += g(r, 0) * adv * ratio;
                    }
                }
                break;
            }
            case Op::KlPolicyRefMean: {
                Node& a = nodes_[n.parents[0]];
                const double gs = g(0, 0) / n.aux2.rows;
                for (int r = 0; r < n.aux2.rows; ++r) {
                    double row_kl = 0.0;
                    for (int c = 0; c < n.aux2.cols; ++c) row_kl += n.aux2(r, c) * n.aux(r, c);
                    for (int c = 0; c < n.aux2.cols; ++c) {
                        a.grad(r, c) += gs * n.aux2(r, c) * (n.aux(r, c) - row_kl);
                    }
                }
                break;
            }
            case Op::KlRefPolicyMean: {
                Node& a = nodes_[n.parents[0]];
                const double gs = g(0, 0) / n.aux2.rows;
                for (int r = 0; r < n.aux2.rows; ++r) {
                    for (int c = 0; c < n.aux2.cols; ++c) {
                        a.grad(r, c) += gs * (n.aux2(r, c) - n.aux(r, c));
                    }
                }
                break;
            }
        }
    }
}

}  // namespace ulab
