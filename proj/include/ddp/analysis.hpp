#pragma once

#include <iosfwd>

#include "ddp/model.hpp"

namespace ddp {

// Static shape propagation; no activations are allocated. Throws ShapeError
// naming the offending layer.
std::vector<Shape> shape_infer(const LayerGraph& graph, const std::vector<Shape>& input_shapes);

// Shape at a named probe point (see LayerGraph::marks).
Shape shape_at_mark(const LayerGraph& graph, const std::vector<Shape>& shapes,
                    const std::string& mark);

struct CostRow {
    std::string name;
    Shape out;
    std::int64_t params = 0;
    std::int64_t flops = 0;
    std::int64_t activation_bytes = 0;
};

// Cost conventions (documented constants; 1 multiply-accumulate = 2 FLOPs):
//   conv        2*N*OH*OW*OC*IC*KH*KW, + N*OH*OW*OC when biased
//   batch norm  2 per element (eval-mode scale + shift)
//   relu, add   1 per element
//   bilinear    8 per output element
//   pool 2x2    4 per output element
//   softmax     5 per element
//   dyn filter  2*K*K per output element
//   dropout, pixel shuffle, slice, concat: 0 (identity / data movement)
struct CostReport {
    std::vector<CostRow> layers;  // one row per graph node with a cost or shape
    std::vector<CostRow> groups;  // block-level aggregation (stem/blockN/decoder)
    std::int64_t total_params = 0;
    std::int64_t total_flops = 0;
    std::int64_t backbone_flops = 0;  // total minus decoder
    std::int64_t peak_activation_bytes = 0;
};

std::int64_t count_params(const LayerGraph& graph);
std::int64_t count_flops(const LayerGraph& graph, const Shape& input_shape);
CostReport cost_report(const LayerGraph& graph, const Shape& input_shape);

void print_report(std::ostream& os, const CostReport& report);
void print_report_csv(std::ostream& os, const CostReport& report);

struct BenchResult {
    int frames = 0;
    int warmup = 0;
    double mean_ms = 0.0;
    double stddev_ms = 0.0;
    double fps = 0.0;
};

// Mean-over-N-frames latency protocol: `warmup` untimed forwards, then
// `frames` timed eval-mode forwards on a fixed random input.
BenchResult benchmark_fps(Model& model, const Shape& input_shape, int frames, int warmup = 3);

}  // namespace ddp
