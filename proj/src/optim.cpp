#include "ulab/optim.hpp"

#include <cmath>

#include "ulab/errors.hpp"

namespace ulab {

std::vector<NodeId> ordered_param_nodes(const ParamNodes& nodes) {
    std::vector<NodeId> out = {nodes.token_embedding, nodes.position_embedding, nodes.vision_adapter, nodes.head};
    for (const auto& l : nodes.layers) {
        out.push_back(l.wq);
        out.push_back(l.wk);
        out.push_back(l.wv);
        out.push_back(l.wo);
        out.push_back(l.w_up);
        out.push_back(l.w_down);
        out.push_back(l.gain_attn);
        out.push_back(l.gain_mlp);
    }
    return out;
}

Adam::Adam(const AdamConfig& cfg) : cfg_(cfg) {
    if (cfg.lr <= 0.0 || cfg.beta1 < 0.0 || cfg.beta1 >= 1.0 || cfg.beta2 < 0.0 || cfg.beta2 >= 1.0 ||
        cfg.eps <= 0.0) {
        throw ConfigError("Adam: invalid hyperparameters");
    }
}

void Adam::step(ModelParams& params, const Graph& g, const ParamNodes& nodes) {
    std::vector<Matrix> grads;
    for (NodeId id : ordered_param_nodes(nodes)) grads.push_back(g.grad(id));
    step(params, grads);
}

void Adam::step(ModelParams& params, const std::vector<Matrix>& grads) {
    std::vector<Matrix*> slots;
    for_each_tensor(params, [&](const std::string&, Matrix& w) { slots.push_back(&w); });
    if (slots.size() != grads.size()) throw DimError("Adam: gradient count does not match parameter count");
    if (m_.empty()) {
        for (const Matrix* w : slots) {
            m_.push_back(Matrix::zeros(w->rows, w->cols));
            v_.push_back(Matrix::zeros(w->rows, w->cols));
        }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < slots.size(); ++i) {
        Matrix& w = *slots[i];
        const Matrix& grad = grads[i];
        check_same_shape(w, grad, "Adam::step");
        check_finite(grad, "Adam::step gradient");
        Matrix& m = m_[i];
        Matrix& v = v_[i];
        for (size_t k = 0; k < w.data.size(); ++k) {
            const double gk = grad.data[k];
            m.data[k] = cfg_.beta1 * m.data[k] + (1.0 - cfg_.beta1) * gk;
            v.data[k] = cfg_.beta2 * v.data[k] + (1.0 - cfg_.beta2) * gk * gk;
            const double mhat = m.data[k] / bc1;
            const double vhat = v.data[k] / bc2;
            w.data[k] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

}  // namespace ulab
