#include "ddp/analysis.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <ostream>

namespace ddp {

namespace {

Shape infer_node(const GraphNode& node, const std::vector<Shape>& shapes) {
    auto in = [&](std::size_t i) -> const Shape& {
        return shapes[static_cast<std::size_t>(node.inputs[i])];
    };
    switch (node.kind) {
        case NodeKind::Input:
            throw UsageError("input shape must be supplied");
        case NodeKind::Conv:
            return ops::conv_output_shape(in(0), node.conv);
        case NodeKind::BatchNorm:
            if (in(0).c != node.channels)
                throw ShapeError("batch_norm: channel mismatch " + in(0).str());
            return in(0);
        case NodeKind::Relu:
        case NodeKind::Dropout:
        case NodeKind::ChannelSoftmax:
            return in(0);
        case NodeKind::MaxPool2:
        case NodeKind::AvgPool2: {
            const Shape& s = in(0);
            if (s.h % 2 != 0 || s.w % 2 != 0) throw ShapeError("pool2x2: odd extents " + s.str());
            return Shape{s.n, s.c, s.h / 2, s.w / 2};
        }
        case NodeKind::Concat: {
            Shape s = in(0);
            std::int64_t c = 0;
            for (std::size_t i = 0; i < node.inputs.size(); ++i) {
                const Shape& p = in(i);
                if (p.n != s.n || p.h != s.h || p.w != s.w)
                    throw ShapeError("concat: mismatched extents " + p.str());
                c += p.c;
            }
            s.c = c;
            return s;
        }
        case NodeKind::Slice: {
            const Shape& s = in(0);
            if (node.c0 + node.clen > s.c) throw ShapeError("slice: range exceeds " + s.str());
            return Shape{s.n, node.clen, s.h, s.w};
        }
        case NodeKind::Add:
            if (!(in(0) == in(1)))
                throw ShapeError("add: " + in(0).str() + " vs " + in(1).str());
            return in(0);
        case NodeKind::Bilinear: {
            const Shape& s = in(0);
            return Shape{s.n, s.c, s.h * node.factor, s.w * node.factor};
        }
        case NodeKind::PixelShuffle: {
            const Shape& s = in(0);
            const std::int64_t r2 = node.factor * node.factor;
            if (s.c % r2 != 0)
                throw ShapeError("pixel_shuffle: channels not divisible by r^2 in " + s.str());
            return Shape{s.n, s.c / r2, s.h * node.factor, s.w * node.factor};
        }
        case NodeKind::DynamicFilter: {
            const Shape& h = in(0);
            const Shape& f = in(1);
            const auto k = static_cast<std::int64_t>(std::llround(std::sqrt(double(f.c))));
            if (k * k != f.c)
                throw ShapeError("dynamic_filter: non-square filter channels " + f.str());
            if (f.n != h.n || f.h != h.h || f.w != h.w)
                throw ShapeError("dynamic_filter: " + f.str() + " vs " + h.str());
            return h;
        }
    }
    throw UsageError("unhandled node kind");
}

std::int64_t node_flops(const GraphNode& node, const std::vector<Shape>& shapes,
                        const Shape& out) {
    auto in = [&](std::size_t i) -> const Shape& {
        return shapes[static_cast<std::size_t>(node.inputs[i])];
    };
    switch (node.kind) {
        case NodeKind::Conv: {
            std::int64_t f = 2 * out.numel() * node.conv.in_channels * node.conv.kh * node.conv.kw;
            if (node.conv.has_bias) f += out.numel();
            return f;
        }
        case NodeKind::BatchNorm:
            return 2 * out.numel();
        case NodeKind::Relu:
        case NodeKind::Add:
            return out.numel();
        case NodeKind::MaxPool2:
        case NodeKind::AvgPool2:
            return 4 * out.numel();
        case NodeKind::Bilinear:
            return 8 * out.numel();
        case NodeKind::ChannelSoftmax:
            return 5 * out.numel();
        case NodeKind::DynamicFilter:
            return 2 * in(1).c * out.numel();
        default:
            return 0;
    }
}

// stem/blockN/decoder grouping; a block's transition belongs to the block
std::string group_of(const std::string& name) {
    const std::string head = name.substr(0, name.find('.'));
    if (head.rfind("transition", 0) == 0) return "block" + head.substr(10);
    if (head.rfind("decoder", 0) == 0) return "decoder";
    return head;
}

}  // namespace

std::vector<Shape> shape_infer(const LayerGraph& graph, const std::vector<Shape>& input_shapes) {
    std::vector<Shape> shapes(graph.nodes.size());
    std::size_t next_input = 0;
    for (const auto& node : graph.nodes) {
        if (node.kind == NodeKind::Input) {
            if (next_input >= input_shapes.size())
                throw UsageError("shape_infer: graph expects more inputs");
            shapes[static_cast<std::size_t>(node.id)] = input_shapes[next_input++];
            continue;
        }
        try {
            shapes[static_cast<std::size_t>(node.id)] = infer_node(node, shapes);
        } catch (const ShapeError& e) {
            throw ShapeError(std::string(e.what()) + " [layer " + node.name + "]");
        }
    }
    return shapes;
}

Shape shape_at_mark(const LayerGraph& graph, const std::vector<Shape>& shapes,
                    const std::string& mark) {
    for (const auto& [name, id] : graph.marks)
        if (name == mark) return shapes[static_cast<std::size_t>(id)];
    throw UsageError("unknown mark '" + mark + "'");
}

std::int64_t count_params(const LayerGraph& graph) {
    std::int64_t total = 0;
    for (const auto& decl : graph.params)
        if (decl.learnable) total += decl.shape.numel();
    return total;
}

std::int64_t count_flops(const LayerGraph& graph, const Shape& input_shape) {
    return cost_report(graph, input_shape).total_flops;
}

CostReport cost_report(const LayerGraph& graph, const Shape& input_shape) {
    CostReport rep;
    const auto shapes = shape_infer(graph, {input_shape});

    std::unordered_map<std::string, std::int64_t> params_by_layer;
    for (const auto& decl : graph.params) {
        if (!decl.learnable) continue;
        // "block1.layer0.conv1x1.w" -> owning layer "block1.layer0.conv1x1"
        const std::string layer = decl.name.substr(0, decl.name.find_last_of('.'));
        params_by_layer[layer] += decl.shape.numel();
    }

    std::unordered_map<std::string, std::size_t> group_index;
    for (const auto& node : graph.nodes) {
        if (node.kind == NodeKind::Input) continue;
        const Shape& out = shapes[static_cast<std::size_t>(node.id)];
        CostRow row;
        row.name = node.name;
        row.out = out;
        row.flops = node_flops(node, shapes, out);
        row.activation_bytes = out.numel() * static_cast<std::int64_t>(sizeof(float));
        std::string pkey = node.param.empty() ? node.name : node.param;
        if (node.kind == NodeKind::BatchNorm) pkey = node.param;
        auto it = params_by_layer.find(pkey);
        if (it != params_by_layer.end()) {
            row.params = it->second;
            params_by_layer.erase(it);  // attribute each parameter exactly once
        }
        rep.layers.push_back(row);

        const std::string g = group_of(node.name);
        auto [git, inserted] = group_index.try_emplace(g, rep.groups.size());
        if (inserted) rep.groups.push_back(CostRow{.name = g});
        CostRow& grow = rep.groups[git->second];
        grow.out = out;  // last shape in the group
        grow.params += row.params;
        grow.flops += row.flops;
        grow.activation_bytes = std::max(grow.activation_bytes, row.activation_bytes);

        rep.total_params += row.params;
        rep.total_flops += row.flops;
        if (g != "decoder") rep.backbone_flops += row.flops;
        rep.peak_activation_bytes = std::max(rep.peak_activation_bytes, row.activation_bytes);
    }
    return rep;
}

void print_report(std::ostream& os, const CostReport& rep) {
    os << std::left << std::setw(28) << "group" << std::right << std::setw(20) << "output shape"
       << std::setw(12) << "params" << std::setw(16) << "flops" << std::setw(14) << "act bytes"
       << "\n";
    for (const auto& g : rep.groups) {
        os << std::left << std::setw(28) << g.name << std::right << std::setw(20) << g.out.str()
           << std::setw(12) << g.params << std::setw(16) << g.flops << std::setw(14)
           << g.activation_bytes << "\n";
    }
    os << std::left << std::setw(28) << "total" << std::right << std::setw(20) << ""
       << std::setw(12) << rep.total_params << std::setw(16) << rep.total_flops << std::setw(14)
       << rep.peak_activation_bytes << "\n";
    os << "params: " << std::fixed << std::setprecision(3) << rep.total_params / 1e6 << "M  flops: "
       << rep.total_flops / 1e9 << "G  (backbone only: " << rep.backbone_flops / 1e9 << "G)\n";
    os.unsetf(std::ios::fixed);
}

void print_report_csv(std::ostream& os, const CostReport& rep) {
    os << "name,out_n,out_c,out_h,out_w,params,flops,activation_bytes\n";
    for (const auto& r : rep.layers)
        os << r.name << "," << r.out.n << "," << r.out.c << "," << r.out.h << "," << r.out.w << ","
           << r.params << "," << r.flops << "," << r.activation_bytes << "\n";
    os << "total,,,,," << rep.total_params << "," << rep.total_flops << ","
       << rep.peak_activation_bytes << "\n";
}

BenchResult benchmark_fps(Model& model, const Shape& input_shape, int frames, int warmup) {
    if (frames < 1) throw ConfigError("benchmark: frames must be >= 1");
    Rng rng = substream(1234, "bench");
    std::uniform_real_distribution<float> dist(0.0f, 1.0f);
    Tensor input(input_shape);
    for (std::int64_t i = 0; i < input.numel(); ++i) input[i] = dist(rng);

    for (int i = 0; i < warmup; ++i) (void)forward(model, input, Mode::Eval);

    std::vector<double> lat(static_cast<std::size_t>(frames));
    for (int i = 0; i < frames; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        (void)forward(model, input, Mode::Eval);
        const auto t1 = std::chrono::steady_clock::now();
        lat[static_cast<std::size_t>(i)] =
            std::chrono::duration<double, std::milli>(t1 - t0).count();
    }
    BenchResult r;
    r.frames = frames;
    r.warmup = warmup;
    double sum = 0.0;
    for (double v : lat) sum += v;
    r.mean_ms = sum / frames;
    double sq = 0.0;
    for (double v : lat) sq += (v - r.mean_ms) * (v - r.mean_ms);
    r.stddev_ms = frames > 1 ? std::sqrt(sq / (frames - 1)) : 0.0;
    r.fps = 1000.0 / r.mean_ms;
    return r;
}

}  // namespace ddp
