#pragma once

#include <map>
#include <unordered_map>

#include "ddp/graph.hpp"

namespace ddp {

// Named, ordered collection of learnable tensors plus non-learnable buffers
// (batch-norm running statistics).
template <typename T>
struct ParameterStore {
    std::vector<std::string> param_order;
    std::unordered_map<std::string, Var<T>> params;
    std::vector<std::string> buffer_order;
    std::unordered_map<std::string, TensorT<T>> buffers;

    Var<T>& param(const std::string& name) {
        auto it = params.find(name);
        if (it == params.end()) throw UsageError("unknown parameter '" + name + "'");
        return it->second;
    }

    TensorT<T>& buffer(const std::string& name) {
        auto it = buffers.find(name);
        if (it == buffers.end()) throw UsageError("unknown buffer '" + name + "'");
        return it->second;
    }

    std::int64_t learnable_count() const {
        std::int64_t total = 0;
        for (const auto& name : param_order) total += params.at(name)->value.numel();
        return total;
    }

    void zero_grad() {
        for (const auto& name : param_order) {
            auto& p = params.at(name);
            p->has_grad = false;
            p->grad = TensorT<T>();
        }
    }

    GradientSetT<T> gradients() const {
        GradientSetT<T> out;
        for (const auto& name : param_order) {
            const auto& p = params.at(name);
            out.emplace(name, p->has_grad ? p->grad : TensorT<T>(p->value.shape()));
        }
        return out;
    }
};

inline bool is_weight_param(const std::string& name) {
    return name.size() > 2 && name.compare(name.size() - 2, 2, ".w") == 0;
}

// He-normal for conv weights (fan-in variance 2/fan_in), gamma 1, beta 0,
// biases 0; running stats start at the identity normalization.
template <typename T>
ParameterStore<T> init_parameters(const LayerGraph& graph, std::uint64_t seed) {
    ParameterStore<T> store;
    Rng rng = substream(seed, "init");
    for (const auto& decl : graph.params) {
        if (!decl.learnable) {
            const bool is_var = decl.name.find(".running_var") != std::string::npos;
            store.buffer_order.push_back(decl.name);
            store.buffers.emplace(decl.name, TensorT<T>(decl.shape, is_var ? T(1) : T(0)));
            continue;
        }
        TensorT<T> value(decl.shape);
        if (is_weight_param(decl.name)) {
            const double fan_in =
                static_cast<double>(decl.shape.c * decl.shape.h * decl.shape.w);
            std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
            for (std::int64_t i = 0; i < value.numel(); ++i)
                value[i] = static_cast<T>(dist(rng));
        } else if (decl.name.find(".gamma") != std::string::npos) {
            value.fill(T(1));
        }
        store.param_order.push_back(decl.name);
        store.params.emplace(decl.name, leaf<T>(std::move(value), true));
    }
    return store;
}

// Forward interpretation of a LayerGraph. Intermediate values are released as
// soon as their last consumer has run so inference-scale inputs stay within a
// small working set. `observed` receives every node's output shape.
template <typename T>
Var<T> forward_graph(const LayerGraph& graph, ParameterStore<T>& store,
                     const std::vector<Var<T>>& inputs, const ops::OpCtx& ctx,
                     std::map<int, Shape>* observed = nullptr,
                     std::map<int, Var<T>>* keep = nullptr) {
    std::vector<int> remaining(graph.nodes.size(), 0);
    for (const auto& node : graph.nodes)
        for (int in : node.inputs) ++remaining[static_cast<std::size_t>(in)];
    ++remaining[static_cast<std::size_t>(graph.output)];
    if (keep)
        for (const auto& [id, _] : *keep) ++remaining[static_cast<std::size_t>(id)];

    std::vector<Var<T>> values(graph.nodes.size());
    std::size_t next_input = 0;
    for (const auto& node : graph.nodes) {
        Var<T> out;
        try {
            switch (node.kind) {
                case NodeKind::Input:
                    if (next_input >= inputs.size())
                        throw UsageError("graph expects more inputs than provided");
                    out = inputs[next_input++];
                    break;
                case NodeKind::Conv: {
                    const auto& x = values[static_cast<std::size_t>(node.inputs[0])];
                    auto& w = store.param(node.param + ".w");
                    Var<T> b = node.conv.has_bias ? store.param(node.param + ".b") : nullptr;
                    out = ops::conv2d(ctx, x, w, b, node.conv);
                    break;
                }
                case NodeKind::BatchNorm: {
                    const auto& x = values[static_cast<std::size_t>(node.inputs[0])];
                    out = ops::batch_norm(ctx, x, store.param(node.param + ".gamma"),
                                          store.param(node.param + ".beta"),
                                          store.buffer(node.param + ".running_mean"),
                                          store.buffer(node.param + ".running_var"), T(0.1),
                                          T(1e-5));
                    break;
                }
                case NodeKind::Relu:
                    out = ops::relu(ctx, values[static_cast<std::size_t>(node.inputs[0])]);
                    break;
                case NodeKind::Dropout:
                    out = ops::dropout(ctx, values[static_cast<std::size_t>(node.inputs[0])],
                                       node.p);
                    break;
                case NodeKind::MaxPool2:
                    out = ops::pool2x2(ctx, values[static_cast<std::size_t>(node.inputs[0])],
                                       ops::PoolKind::Max);
                    break;
                case NodeKind::AvgPool2:
                    out = ops::pool2x2(ctx, values[static_cast<std::size_t>(node.inputs[0])],
                                       ops::PoolKind::Avg);
                    break;
                case NodeKind::Concat: {
                    std::vector<Var<T>> parts;
                    for (int in : node.inputs)
                        parts.push_back(values[static_cast<std::size_t>(in)]);
                    out = ops::concat(ctx, parts);
                    break;
                }
                case NodeKind::Slice:
                    out = ops::slice_channels(
                        ctx, values[static_cast<std::size_t>(node.inputs[0])], node.c0, node.clen);
                    break;
                case NodeKind::Add:
                    out = ops::add_op(ctx, values[static_cast<std::size_t>(node.inputs[0])],
                                      values[static_cast<std::size_t>(node.inputs[1])]);
                    break;
                case NodeKind::Bilinear:
                    out = ops::bilinear_upsample(
                        ctx, values[static_cast<std::size_t>(node.inputs[0])], node.factor);
                    break;
                case NodeKind::PixelShuffle:
                    out = ops::pixel_shuffle(
                        ctx, values[static_cast<std::size_t>(node.inputs[0])], node.factor);
                    break;
                case NodeKind::ChannelSoftmax:
                    out = ops::channel_softmax(ctx,
                                               values[static_cast<std::size_t>(node.inputs[0])]);
                    break;
                case NodeKind::DynamicFilter:
                    out = ops::dynamic_filter_apply(
                        ctx, values[static_cast<std::size_t>(node.inputs[0])],
                        values[static_cast<std::size_t>(node.inputs[1])]);
                    break;
            }
        } catch (const ShapeError& e) {
            throw ShapeError(std::string(e.what()) + " [layer " + node.name + "]");
        }
        values[static_cast<std::size_t>(node.id)] = out;
        if (observed) (*observed)[node.id] = out->value.shape();
        if (keep) {
            auto it = keep->find(node.id);
            if (it != keep->end()) it->second = out;
        }
        for (int in : node.inputs)
            if (--remaining[static_cast<std::size_t>(in)] == 0)
                values[static_cast<std::size_t>(in)].reset();
    }
    return values[static_cast<std::size_t>(graph.output)];
}

enum class Mode { Train, Eval };

template <typename T>
struct ModelT {
    ModelSpec spec;
    LayerGraph graph;
    ParameterStore<T> store;
};

using Model = ModelT<float>;

template <typename T>
ModelT<T> build_ddpnet(const ModelSpec& spec, std::uint64_t seed) {
    ModelT<T> m;
    m.spec = spec;
    m.graph = build_ddpnet_graph(spec);
    m.store = init_parameters<T>(m.graph, seed);
    return m;
}

template <typename T>
void check_model_input(const ModelT<T>& m, const Shape& s) {
    if (s.c != 3) throw ShapeError("model input must have 3 channels, got " + s.str());
    if (s.h % m.graph.input_divisor != 0 || s.w % m.graph.input_divisor != 0)
        throw ShapeError("input extents " + s.str() + " must be divisible by " +
                         std::to_string(m.graph.input_divisor));
}

// Deterministic in eval mode; train mode consumes rng (dropout) and updates
// batch-norm running statistics.
template <typename T>
Var<T> forward(ModelT<T>& m, const TensorT<T>& input, Mode mode, Rng* rng = nullptr,
               bool record = false, std::map<int, Shape>* observed = nullptr) {
    check_model_input(m, input.shape());
    ops::OpCtx ctx;
    ctx.train = mode == Mode::Train;
    ctx.record = record;
    ctx.rng = rng;
    return forward_graph(m.graph, m.store, {leaf<T>(input)}, ctx, observed);
}

}  // namespace ddp
