#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "kclflow/acpf.hpp"
#include "kclflow/grid.hpp"
#include "kclflow/projection.hpp"
#include "kclflow/scenario.hpp"

namespace kclflow {

struct SurrogateConfig {
    int hidden = 64;     // H
    int heads = 4;       // K
    int head_dim = 64;   // width of each attention head's transform
    double leaky_slope = 0.01;

    bool operator==(const SurrogateConfig&) const = default;
};

/// All learnable tensors. Linear maps act on row vectors: out = in · W + b.
/// The same layout doubles as the gradient container.
struct SurrogateParams {
    SurrogateConfig config;

    // message MLP: [x_i, x_j, e_ij] (8) → H → H
    Eigen::MatrixXd w1, b1, w2, b2;
    // attention, one entry per head: transform (2H+2)×head_dim and scoring vector head_dim×1
    std::vector<Eigen::MatrixXd> att_w, att_a;
    // skip: 3 → H
    Eigen::MatrixXd w_skip;
    // EdgeMLP: [x̂_i, x̂_j, e_ij] (2H+2) → H → 4
    Eigen::MatrixXd we1, be1, we2, be2;

    /// Bumped whenever the values change through the optimizer; tapes remember it.
    std::uint64_t version = 0;

    static SurrogateParams zeros(const SurrogateConfig& config);

    std::vector<Eigen::MatrixXd*> tensors();
    std::vector<const Eigen::MatrixXd*> tensors() const;
    std::vector<std::string> tensor_names() const;
    std::size_t num_scalars() const;
    bool is_weight(std::size_t tensor_index) const;  // false for bias vectors
    bool all_finite() const;

    bool operator==(const SurrogateParams& other) const;
};

/// Xavier-normal weights (std = sqrt(2 / (fan_in + fan_out))), zero biases.
SurrogateParams init_params(const SurrogateConfig& config, std::uint64_t seed);

/// Branch endpoints plus the directed-edge index used by message passing and attention.
/// Directed edge 2e runs to bus from(e) from neighbor to(e); 2e+1 the reverse.
struct GraphTopology {
    std::size_t num_buses = 0;
    std::vector<BusId> from;
    std::vector<BusId> to;
    std::vector<BusId> receiver;   // per directed edge: i
    std::vector<BusId> neighbor;   // per directed edge: j
    std::vector<std::size_t> in_offsets;  // CSR over receivers
    std::vector<std::size_t> in_edges;

    static std::shared_ptr<const GraphTopology> from_grid(const Grid& grid);
    std::size_t num_branches() const { return from.size(); }
    std::size_t num_directed() const { return receiver.size(); }
};

struct GraphInput {
    std::shared_ptr<const GraphTopology> topology;
    Eigen::MatrixXd x;          // N × 3, normalized node features
    Eigen::MatrixXd edge_attr;  // |E| × 2, normalized (r, x)
};

GraphInput make_graph_input(const Grid& grid, const Eigen::MatrixXd& node_inputs, const FeatureStats& stats,
                            std::shared_ptr<const GraphTopology> topology = nullptr);

/// Intermediates cached by forward, consumed by backward.
struct ForwardTape {
    std::uint64_t params_version = 0;
    const SurrogateParams* params = nullptr;
    std::shared_ptr<const GraphTopology> topology;
    std::shared_ptr<const KclOperator> projection;  // null when the projection layer is off

    Eigen::MatrixXd x;          // N × 3
    Eigen::MatrixXd z;          // M × 8 message inputs
    Eigen::MatrixXd msg_pre;    // M × H
    Eigen::MatrixXd msg_act;    // M × H
    Eigen::MatrixXd x1;         // N × H, aggregated messages x'
    Eigen::MatrixXd u;          // M × (2H+2) attention inputs
    std::vector<Eigen::MatrixXd> att_pre;   // per head M × head_dim
    std::vector<Eigen::VectorXd> att_coef;  // per head M, softmax over each receiver
    Eigen::VectorXd coef;       // M, head-averaged
    Eigen::MatrixXd x2;         // N × H, attention output x''
    Eigen::MatrixXd xhat;       // N × H
    Eigen::MatrixXd ze;         // |E| × (2H+2)
    Eigen::MatrixXd edge_pre;   // |E| × H
    Eigen::MatrixXd edge_act;   // |E| × H
    FlowSet raw;                // EdgeMLP output before projection
    FlowSet output;

    bool operator==(const ForwardTape& other) const;
};

Eigen::MatrixXd leaky_relu(const Eigen::MatrixXd& m, double slope);

/// x'_i = Σ_{j∈N(i)} W2 LeakyReLU(W1 [x_i, x_j, e_ij] + b1) + b2.
Eigen::MatrixXd message_pass(const SurrogateParams& params, const GraphInput& input, ForwardTape* tape = nullptr);

/// x''_i = Σ_j a_ij x'_j with a_ij the head-averaged softmax of a_k · LeakyReLU(W_k [x'_i, x'_j, e_ij]).
Eigen::MatrixXd attention_refine(const SurrogateParams& params, const GraphInput& input, const Eigen::MatrixXd& x1,
                                 ForwardTape* tape = nullptr);

/// Full forward pass. When `system` is non-null the terminal layer projects onto A y + b = 0.
FlowSet forward(const SurrogateParams& params, const GraphInput& input, const ConstraintSystem* system,
                ForwardTape* tape = nullptr);

/// Reverse-mode gradients of ⟨upstream, output⟩ with respect to every parameter tensor.
/// Throws StaleTape if the parameters changed since the tape was recorded.
SurrogateParams backward(const SurrogateParams& params, const ForwardTape& tape, const Eigen::VectorXd& upstream);

/// As above, accumulating into an existing gradient container.
void backward_accumulate(const SurrogateParams& params, const ForwardTape& tape, const Eigen::VectorXd& upstream,
                         SurrogateParams& grads);

nlohmann::json params_to_json(const SurrogateParams& params);
SurrogateParams params_from_json(const nlohmann::json& doc);

}  // namespace kclflow
