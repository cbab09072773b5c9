#pragma once

#include <cstdint>
#include <vector>

#include "ulab/graph.hpp"
#include "ulab/model.hpp"

namespace ulab {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Lists the graph nodes of registered parameters in the same fixed order
// for_each_tensor walks concrete weights; optimizer slots index this order.
std::vector<NodeId> ordered_param_nodes(const ParamNodes& nodes);

class Adam {
public:
    explicit Adam(const AdamConfig& cfg = {});

    // One update from the gradients stored on the registered parameter nodes.
    // Moment slots are sized on first use; shapes must not change afterwards.
    void step(ModelParams& params, const Graph& g, const ParamNodes& nodes);

    // Same update from externally assembled gradients, one matrix per tensor
    // in for_each_tensor order. Used by trainers that combine several losses.
    void step(ModelParams& params, const std::vector<Matrix>& grads);

    int64_t steps_taken() const { return t_; }

private:
    AdamConfig cfg_;
    int64_t t_ = 0;
    std::vector<Matrix> m_, v_;
};

}  // namespace ulab
