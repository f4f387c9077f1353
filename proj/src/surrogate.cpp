#include "kclflow/surrogate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "kclflow/error.hpp"

namespace kclflow {

namespace {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

Index idx(std::size_t v) { return static_cast<Index>(v); }

void leaky_grad_inplace(MatrixXd& grad, const MatrixXd& pre, double slope) {
    grad = (pre.array() > 0.0).select(grad, slope * grad);
}

MatrixXd add_bias(MatrixXd m, const MatrixXd& bias) {
    m.rowwise() += bias.row(0);
    return m;
}

void require_shape(const MatrixXd& m, Index rows, Index cols, const char* name) {
    if (m.rows() != rows || m.cols() != cols)
        throw Error(ErrorKind::ShapeMismatch, std::string(name) + " has shape " + std::to_string(m.rows()) + "x" +
                                                  std::to_string(m.cols()) + ", expected " + std::to_string(rows) +
                                                  "x" + std::to_string(cols));
}

void check_params(const SurrogateParams& p) {
    const SurrogateConfig& c = p.config;
    const Index h = c.hidden;
    require_shape(p.w1, 8, h, "w1");
    require_shape(p.b1, 1, h, "b1");
    require_shape(p.w2, h, h, "w2");
    require_shape(p.b2, 1, h, "b2");
    if (p.att_w.size() != static_cast<std::size_t>(c.heads) || p.att_a.size() != p.att_w.size())
        throw Error(ErrorKind::ShapeMismatch, "attention head count does not match config");
    for (std::size_t k = 0; k < p.att_w.size(); ++k) {
        require_shape(p.att_w[k], 2 * h + 2, c.head_dim, "att_w");
        require_shape(p.att_a[k], c.head_dim, 1, "att_a");
    }
    require_shape(p.w_skip, 3, h, "w_skip");
    require_shape(p.we1, 2 * h + 2, h, "we1");
    require_shape(p.be1, 1, h, "be1");
    require_shape(p.we2, h, 4, "we2");
    require_shape(p.be2, 1, 4, "be2");
}

void check_input(const SurrogateParams& params, const GraphInput& in) {
    if (!in.topology) throw Error(ErrorKind::ShapeMismatch, "graph input has no topology");
    const GraphTopology& t = *in.topology;
    require_shape(in.x, idx(t.num_buses), 3, "node features");
    require_shape(in.edge_attr, idx(t.num_branches()), 2, "edge attributes");
    check_params(params);
}

}  // namespace

SurrogateParams SurrogateParams::zeros(const SurrogateConfig& c) {
    if (c.hidden < 1 || c.heads < 1 || c.head_dim < 1)
        throw Error(ErrorKind::InvalidArgument, "hidden, heads and head_dim must be >= 1");
    const Index h = c.hidden;
    SurrogateParams p;
    p.config = c;
    p.w1 = MatrixXd::Zero(8, h);
    p.b1 = MatrixXd::Zero(1, h);
    p.w2 = MatrixXd::Zero(h, h);
    p.b2 = MatrixXd::Zero(1, h);
    for (int k = 0; k < c.heads; ++k) {
        p.att_w.push_back(MatrixXd::Zero(2 * h + 2, c.head_dim));
        p.att_a.push_back(MatrixXd::Zero(c.head_dim, 1));
    }
    p.w_skip = MatrixXd::Zero(3, h);
    p.we1 = MatrixXd::Zero(2 * h + 2, h);
    p.be1 = MatrixXd::Zero(1, h);
    p.we2 = MatrixXd::Zero(h, 4);
    p.be2 = MatrixXd::Zero(1, 4);
    return p;
}

std::vector<MatrixXd*> SurrogateParams::tensors() {
    std::vector<MatrixXd*> out{&w1, &b1, &w2, &b2};
    for (std::size_t k = 0; k < att_w.size(); ++k) {
        out.push_back(&att_w[k]);
        out.push_back(&att_a[k]);
    }
    for (MatrixXd* m : {&w_skip, &we1, &be1, &we2, &be2}) out.push_back(m);
    return out;
}

std::vector<const MatrixXd*> SurrogateParams::tensors() const {
    auto mutable_view = const_cast<SurrogateParams*>(this)->tensors();
    return {mutable_view.begin(), mutable_view.end()};
}

std::vector<std::string> SurrogateParams::tensor_names() const {
    std::vector<std::string> out{"w1", "b1", "w2", "b2"};
    for (std::size_t k = 0; k < att_w.size(); ++k) {
        out.push_back("att_w" + std::to_string(k));
        out.push_back("att_a" + std::to_string(k));
    }
    for (const char* n : {"w_skip", "we1", "be1", "we2", "be2"}) out.emplace_back(n);
    return out;
}

bool SurrogateParams::is_weight(std::size_t tensor_index) const {
    return tensor_names().at(tensor_index)[0] != 'b';
}

std::size_t SurrogateParams::num_scalars() const {
    std::size_t n = 0;
    for (const MatrixXd* m : tensors()) n += static_cast<std::size_t>(m->size());
    return n;
}

bool SurrogateParams::all_finite() const {
    for (const MatrixXd* m : tensors()) {
        if (!m->allFinite()) return false;
    }
    return true;
}

bool SurrogateParams::operator==(const SurrogateParams& other) const {
    if (!(config == other.config)) return false;
    const auto a = tensors();
    const auto b = other.tensors();
    if (a.size() != b.size()) return false;
    for (std::size_t k = 0; k < a.size(); ++k) {
        if (a[k]->rows() != b[k]->rows() || a[k]->cols() != b[k]->cols() || *a[k] != *b[k]) return false;
    }
    return true;
}

SurrogateParams init_params(const SurrogateConfig& config, std::uint64_t seed) {
    SurrogateParams p = SurrogateParams::zeros(config);
    std::mt19937_64 rng(seed);
    auto ts = p.tensors();
    for (std::size_t k = 0; k < ts.size(); ++k) {
        if (!p.is_weight(k)) continue;
        MatrixXd& w = *ts[k];
        const double sd = std::sqrt(2.0 / static_cast<double>(w.rows() + w.cols()));
        std::normal_distribution<double> dist(0.0, sd);
        // column-major fill keeps the stream layout fixed for a given shape
        for (Index j = 0; j < w.cols(); ++j)
            for (Index i = 0; i < w.rows(); ++i) w(i, j) = dist(rng);
    }
    return p;
}

std::shared_ptr<const GraphTopology> GraphTopology::from_grid(const Grid& grid) {
    auto t = std::make_shared<GraphTopology>();
    t->num_buses = grid.num_buses();
    for (const Branch& br : grid.branches()) {
        t->from.push_back(br.from_bus);
        t->to.push_back(br.to_bus);
        t->receiver.push_back(br.from_bus);
        t->neighbor.push_back(br.to_bus);
        t->receiver.push_back(br.to_bus);
        t->neighbor.push_back(br.from_bus);
    }
    for (const Bus& bus : grid.buses()) {
        if (grid.degree(bus.id) == 0)
            throw Error(ErrorKind::IsolatedBus, "bus " + std::to_string(bus.id) + " has no neighbors");
    }
    t->in_offsets.assign(t->num_buses + 1, 0);
    for (BusId r : t->receiver) ++t->in_offsets[r + 1];
    for (std::size_t i = 0; i < t->num_buses; ++i) t->in_offsets[i + 1] += t->in_offsets[i];
    t->in_edges.resize(t->receiver.size());
    std::vector<std::size_t> cursor(t->in_offsets.begin(), t->in_offsets.end() - 1);
    for (std::size_t d = 0; d < t->receiver.size(); ++d) t->in_edges[cursor[t->receiver[d]]++] = d;
    return t;
}

GraphInput make_graph_input(const Grid& grid, const Eigen::MatrixXd& node_inputs, const FeatureStats& stats,
                            std::shared_ptr<const GraphTopology> topology) {
    if (node_inputs.rows() != idx(grid.num_buses()) || node_inputs.cols() != 3)
        throw Error(ErrorKind::ShapeMismatch, "node inputs must be N x 3");
    GraphInput in;
    in.topology = topology ? std::move(topology) : GraphTopology::from_grid(grid);
    in.x.resize(node_inputs.rows(), 3);
    for (int f = 0; f < 3; ++f)
        in.x.col(f) = (node_inputs.col(f).array() - stats.node_mean[f]) / stats.node_std[f];
    in.edge_attr.resize(idx(grid.num_branches()), 2);
    for (const Branch& br : grid.branches()) {
        in.edge_attr(idx(br.id), 0) = (br.r - stats.edge_mean[0]) / stats.edge_std[0];
        in.edge_attr(idx(br.id), 1) = (br.x - stats.edge_mean[1]) / stats.edge_std[1];
    }
    return in;
}

Eigen::MatrixXd leaky_relu(const Eigen::MatrixXd& m, double slope) {
    return (m.array() > 0.0).select(m, slope * m);
}

Eigen::MatrixXd message_pass(const SurrogateParams& params, const GraphInput& input, ForwardTape* tape) {
    check_input(params, input);
    const GraphTopology& t = *input.topology;
    const Index m = idx(t.num_directed());
    const double slope = params.config.leaky_slope;

    MatrixXd z(m, 8);
    for (Index d = 0; d < m; ++d) {
        const auto i = idx(t.receiver[static_cast<std::size_t>(d)]);
        const auto j = idx(t.neighbor[static_cast<std::size_t>(d)]);
        z.block<1, 3>(d, 0) = input.x.row(i);
        z.block<1, 3>(d, 3) = input.x.row(j);
        z.block<1, 2>(d, 6) = input.edge_attr.row(d / 2);
    }
    MatrixXd pre = add_bias(z * params.w1, params.b1);
    MatrixXd act = leaky_relu(pre, slope);
    const MatrixXd msg = add_bias(act * params.w2, params.b2);

    MatrixXd x1 = MatrixXd::Zero(idx(t.num_buses), params.config.hidden);
    for (Index d = 0; d < m; ++d) x1.row(idx(t.receiver[static_cast<std::size_t>(d)])) += msg.row(d);

    if (tape) {
        tape->z = std::move(z);
        tape->msg_pre = std::move(pre);
        tape->msg_act = std::move(act);
        tape->x1 = x1;
    }
    return x1;
}

Eigen::MatrixXd attention_refine(const SurrogateParams& params, const GraphInput& input, const Eigen::MatrixXd& x1,
                                 ForwardTape* tape) {
    check_input(params, input);
    const GraphTopology& t = *input.topology;
    const Index h = params.config.hidden;
    const Index m = idx(t.num_directed());
    require_shape(x1, idx(t.num_buses), h, "x'");
    const double slope = params.config.leaky_slope;

    MatrixXd u(m, 2 * h + 2);
    for (Index d = 0; d < m; ++d) {
        u.row(d).segment(0, h) = x1.row(idx(t.receiver[static_cast<std::size_t>(d)]));
        u.row(d).segment(h, h) = x1.row(idx(t.neighbor[static_cast<std::size_t>(d)]));
        u.row(d).segment(2 * h, 2) = input.edge_attr.row(d / 2);
    }

    const auto heads = static_cast<std::size_t>(params.config.heads);
    std::vector<MatrixXd> pre(heads);
    std::vector<VectorXd> coef(heads);
    VectorXd mean_coef = VectorXd::Zero(m);
    for (std::size_t k = 0; k < heads; ++k) {
        pre[k] = u * params.att_w[k];
        const VectorXd logits = leaky_relu(pre[k], slope) * params.att_a[k];
        coef[k].resize(m);
        for (std::size_t i = 0; i < t.num_buses; ++i) {
            const std::size_t lo = t.in_offsets[i], hi = t.in_offsets[i + 1];
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t s = lo; s < hi; ++s) mx = std::max(mx, logits(idx(t.in_edges[s])));
            double denom = 0.0;
            for (std::size_t s = lo; s < hi; ++s) {
                const Index d = idx(t.in_edges[s]);
                coef[k](d) = std::exp(logits(d) - mx);
                denom += coef[k](d);
            }
            for (std::size_t s = lo; s < hi; ++s) coef[k](idx(t.in_edges[s])) /= denom;
        }
        mean_coef += coef[k];
    }
    mean_coef /= static_cast<double>(heads);

    MatrixXd x2 = MatrixXd::Zero(idx(t.num_buses), h);
    for (Index d = 0; d < m; ++d) {
        x2.row(idx(t.receiver[static_cast<std::size_t>(d)])) +=
            mean_coef(d) * x1.row(idx(t.neighbor[static_cast<std::size_t>(d)]));
    }

    if (tape) {
        tape->u = std::move(u);
        tape->att_pre = std::move(pre);
        tape->att_coef = std::move(coef);
        tape->coef = mean_coef;
        tape->x2 = x2;
    }
    return x2;
}

FlowSet forward(const SurrogateParams& params, const GraphInput& input, const ConstraintSystem* system,
                ForwardTape* tape) {
    ForwardTape local;
    ForwardTape& tp = tape ? *tape : local;
    const GraphTopology& t = *input.topology;
    const Index h = params.config.hidden;
    const Index e_count = idx(t.num_branches());
    if (system && system->op->flow_dim() != 4 * t.num_branches())
        throw Error(ErrorKind::ShapeMismatch, "constraint system does not match the graph topology");
    if (system && system->op->num_buses() != t.num_buses)
        throw Error(ErrorKind::ShapeMismatch, "constraint system bus count does not match the graph");

    const MatrixXd x1 = message_pass(params, input, &tp);
    const MatrixXd x2 = attention_refine(params, input, x1, &tp);
    MatrixXd xhat = x2 + input.x * params.w_skip;

    MatrixXd ze(e_count, 2 * h + 2);
    for (Index e = 0; e < e_count; ++e) {
        ze.row(e).segment(0, h) = xhat.row(idx(t.from[static_cast<std::size_t>(e)]));
        ze.row(e).segment(h, h) = xhat.row(idx(t.to[static_cast<std::size_t>(e)]));
        ze.row(e).segment(2 * h, 2) = input.edge_attr.row(e);
    }
    MatrixXd edge_pre = add_bias(ze * params.we1, params.be1);
    MatrixXd edge_act = leaky_relu(edge_pre, params.config.leaky_slope);
    const MatrixXd out4 = add_bias(edge_act * params.we2, params.be2);  // |E| × 4 = (p_from, p_to, q_from, q_to)

    // Column-major flattening of |E|×4 is exactly the FlowSet layout.
    FlowSet raw = Eigen::Map<const VectorXd>(out4.data(), out4.size());
    FlowSet output = system ? project_global(*system, raw) : raw;

    tp.params_version = params.version;
    tp.params = &params;
    tp.topology = input.topology;
    tp.projection = system ? system->op : nullptr;
    tp.x = input.x;
    tp.xhat = std::move(xhat);
    tp.ze = std::move(ze);
    tp.edge_pre = std::move(edge_pre);
    tp.edge_act = std::move(edge_act);
    tp.raw = std::move(raw);
    tp.output = output;
    return output;
}

void backward_accumulate(const SurrogateParams& params, const ForwardTape& tape, const Eigen::VectorXd& upstream,
                         SurrogateParams& g) {
    if (tape.params != &params || tape.params_version != params.version || !tape.topology)
        throw Error(ErrorKind::StaleTape, "tape was recorded with different parameters");
    const GraphTopology& t = *tape.topology;
    const Index h = params.config.hidden;
    const Index e_count = idx(t.num_branches());
    const Index m = idx(t.num_directed());
    const double slope = params.config.leaky_slope;
    if (upstream.size() != 4 * e_count) throw Error(ErrorKind::DimMismatch, "upstream gradient must have length 4|E|");
    if (!(g.config == params.config)) g = SurrogateParams::zeros(params.config);

    // projection layer: (I − A†A) is symmetric
    VectorXd g_raw = upstream;
    if (tape.projection) g_raw = upstream - tape.projection->a_pinv() * (tape.projection->a() * upstream);
    const Eigen::Map<const MatrixXd> g_out4(g_raw.data(), e_count, 4);

    // EdgeMLP
    g.we2.noalias() += tape.edge_act.transpose() * g_out4;
    g.be2 += g_out4.colwise().sum();
    MatrixXd g_edge = g_out4 * params.we2.transpose();
    leaky_grad_inplace(g_edge, tape.edge_pre, slope);
    g.we1.noalias() += tape.ze.transpose() * g_edge;
    g.be1 += g_edge.colwise().sum();
    const MatrixXd g_ze = g_edge * params.we1.transpose();

    MatrixXd g_xhat = MatrixXd::Zero(idx(t.num_buses), h);
    for (Index e = 0; e < e_count; ++e) {
        g_xhat.row(idx(t.from[static_cast<std::size_t>(e)])) += g_ze.row(e).segment(0, h);
        g_xhat.row(idx(t.to[static_cast<std::size_t>(e)])) += g_ze.row(e).segment(h, h);
    }

    // skip
    g.w_skip.noalias() += tape.x.transpose() * g_xhat;

    // attention: x''_i = Σ_d coef_d x'_j
    const MatrixXd& g_x2 = g_xhat;
    MatrixXd g_x1 = MatrixXd::Zero(idx(t.num_buses), h);
    VectorXd g_coef(m);
    for (Index d = 0; d < m; ++d) {
        const auto i = idx(t.receiver[static_cast<std::size_t>(d)]);
        const auto j = idx(t.neighbor[static_cast<std::size_t>(d)]);
        g_coef(d) = g_x2.row(i).dot(tape.x1.row(j));
        g_x1.row(j) += tape.coef(d) * g_x2.row(i);
    }
    const auto heads = static_cast<std::size_t>(params.config.heads);
    const VectorXd g_coef_head = g_coef / static_cast<double>(heads);
    MatrixXd g_u = MatrixXd::Zero(m, 2 * h + 2);
    for (std::size_t k = 0; k < heads; ++k) {
        const VectorXd& c = tape.att_coef[k];
        VectorXd g_logit(m);
        for (std::size_t i = 0; i < t.num_buses; ++i) {
            const std::size_t lo = t.in_offsets[i], hi = t.in_offsets[i + 1];
            double weighted = 0.0;
            for (std::size_t s = lo; s < hi; ++s) {
                const Index d = idx(t.in_edges[s]);
                weighted += c(d) * g_coef_head(d);
            }
            for (std::size_t s = lo; s < hi; ++s) {
                const Index d = idx(t.in_edges[s]);
                g_logit(d) = c(d) * (g_coef_head(d) - weighted);
            }
        }
        const MatrixXd act = leaky_relu(tape.att_pre[k], slope);
        g.att_a[k].noalias() += act.transpose() * g_logit;
        MatrixXd g_pre = g_logit * params.att_a[k].transpose();
        leaky_grad_inplace(g_pre, tape.att_pre[k], slope);
        g.att_w[k].noalias() += tape.u.transpose() * g_pre;
        g_u.noalias() += g_pre * params.att_w[k].transpose();
    }
    for (Index d = 0; d < m; ++d) {
        g_x1.row(idx(t.receiver[static_cast<std::size_t>(d)])) += g_u.row(d).segment(0, h);
        g_x1.row(idx(t.neighbor[static_cast<std::size_t>(d)])) += g_u.row(d).segment(h, h);
    }

    // message MLP: x'_i = Σ_d msg_d
    MatrixXd g_msg(m, h);
    for (Index d = 0; d < m; ++d) g_msg.row(d) = g_x1.row(idx(t.receiver[static_cast<std::size_t>(d)]));
    g.w2.noalias() += tape.msg_act.transpose() * g_msg;
    g.b2 += g_msg.colwise().sum();
    MatrixXd g_pre = g_msg * params.w2.transpose();
    leaky_grad_inplace(g_pre, tape.msg_pre, slope);
    g.w1.noalias() += tape.z.transpose() * g_pre;
    g.b1 += g_pre.colwise().sum();
}

SurrogateParams backward(const SurrogateParams& params, const ForwardTape& tape, const Eigen::VectorXd& upstream) {
    SurrogateParams g = SurrogateParams::zeros(params.config);
    backward_accumulate(params, tape, upstream, g);
    return g;
}

bool ForwardTape::operator==(const ForwardTape& o) const {
    auto same = [](const auto& a, const auto& b) { return a.rows() == b.rows() && a.cols() == b.cols() && a == b; };
    if (params_version != o.params_version || att_pre.size() != o.att_pre.size()) return false;
    for (std::size_t k = 0; k < att_pre.size(); ++k) {
        if (!same(att_pre[k], o.att_pre[k]) || !same(att_coef[k], o.att_coef[k])) return false;
    }
    return same(x, o.x) && same(z, o.z) && same(msg_pre, o.msg_pre) && same(msg_act, o.msg_act) && same(x1, o.x1) &&
           same(u, o.u) && same(coef, o.coef) && same(x2, o.x2) && same(xhat, o.xhat) && same(ze, o.ze) &&
           same(edge_pre, o.edge_pre) && same(edge_act, o.edge_act) && same(raw, o.raw) && same(output, o.output);
}

nlohmann::json params_to_json(const SurrogateParams& params) {
    nlohmann::json doc;
    doc["hidden"] = params.config.hidden;
    doc["heads"] = params.config.heads;
    doc["head_dim"] = params.config.head_dim;
    doc["leaky_slope"] = params.config.leaky_slope;
    auto& tensors = doc["tensors"] = nlohmann::json::object();
    const auto names = params.tensor_names();
    const auto ts = params.tensors();
    for (std::size_t k = 0; k < ts.size(); ++k) {
        const MatrixXd& m = *ts[k];
        std::vector<double> flat(static_cast<std::size_t>(m.size()));
        Eigen::Map<MatrixXd>(flat.data(), m.rows(), m.cols()) = m;
        tensors[names[k]] = {{"rows", m.rows()}, {"cols", m.cols()}, {"data", flat}};
    }
    return doc;
}

SurrogateParams params_from_json(const nlohmann::json& doc) {
    SurrogateConfig c;
    c.hidden = doc.at("hidden").get<int>();
    c.heads = doc.at("heads").get<int>();
    c.head_dim = doc.at("head_dim").get<int>();
    c.leaky_slope = doc.at("leaky_slope").get<double>();
    SurrogateParams p = SurrogateParams::zeros(c);
    const auto names = p.tensor_names();
    auto ts = p.tensors();
    for (std::size_t k = 0; k < ts.size(); ++k) {
        const auto& entry = doc.at("tensors").at(names[k]);
        const auto rows = entry.at("rows").get<Index>();
        const auto cols = entry.at("cols").get<Index>();
        const auto flat = entry.at("data").get<std::vector<double>>();
        if (rows != ts[k]->rows() || cols != ts[k]->cols() || static_cast<Index>(flat.size()) != rows * cols)
            throw Error(ErrorKind::ShapeMismatch, "checkpoint tensor " + names[k] + " has the wrong shape");
        *ts[k] = Eigen::Map<const MatrixXd>(flat.data(), rows, cols);
    }
    return p;
}

}  // namespace kclflow
