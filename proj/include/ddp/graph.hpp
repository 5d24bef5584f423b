#pragma once

#include <string>
#include <vector>

#include "ddp/ops.hpp"

namespace ddp {

enum class NodeKind {
    Input,
    Conv,
    BatchNorm,
    Relu,
    Dropout,
    MaxPool2,
    AvgPool2,
    Concat,
    Slice,
    Add,
    Bilinear,
    PixelShuffle,
    ChannelSoftmax,
    DynamicFilter,
};

struct GraphNode {
    int id = -1;
    NodeKind kind = NodeKind::Input;
    std::string name;          // layer-name context for errors and reports
    std::vector<int> inputs;   // node ids
    ops::ConvParams conv;      // Conv
    std::string param;         // Conv / BatchNorm parameter base name
    std::int64_t channels = 0; // BatchNorm
    std::int64_t c0 = 0, clen = 0;  // Slice
    double p = 0.0;            // Dropout
    std::int64_t factor = 1;   // Bilinear / PixelShuffle
};

struct ParamDecl {
    std::string name;
    Shape shape;
    bool learnable = true;  // false: running statistics and other buffers
};

// Declarative network description: forward execution, differentiation and
// cost analysis all interpret this one structure.
struct LayerGraph {
    std::vector<GraphNode> nodes;
    std::vector<ParamDecl> params;
    int output = -1;
    std::int64_t input_divisor = 1;  // required divisibility of input H and W
    std::vector<int> taps;  // pre-pool transition outputs feeding the decoder
    std::vector<std::pair<std::string, int>> marks;  // named probe points for reports/tests
};

enum class LayerVariant { Plain, DpmB, DpmC };

struct BlockSpec {
    int layers = 0;
    LayerVariant variant = LayerVariant::Plain;
    std::vector<int> dilations;  // one per layer for DPM blocks
};

struct ModelSpec {
    std::string name = "custom";
    std::string variant = "cityscapes";  // cityscapes | camvid (stem + block count)
    int classes = 19;
    int stem_width = 32;  // per branch; stem output is 2*stem_width
    int growth = 32;
    std::vector<BlockSpec> blocks;
    int plain_bottleneck = 128;      // 1x1 stage width of a plain dense layer
    int dpm_branch_bottleneck = 56;  // per-branch 1x1 width inside a DPM
    int decoder_compress = 64;       // C_m
    int filter_window = 3;           // K
    int shuffle_r = 2;
    double dropout_p = 0.1;
};

ModelSpec preset_cityscapes();
ModelSpec preset_camvid();
ModelSpec preset_tiny();
ModelSpec resolve_preset(const std::string& name);

std::string serialize_spec(const ModelSpec& spec);
ModelSpec parse_spec(const std::string& text);
void validate_spec(const ModelSpec& spec);

// Per-spec-contract structural builders. Each returns a self-contained graph
// whose first node is the input.
LayerGraph build_initial_block(int stem_width);
LayerGraph build_dense_layer(int in_channels, int growth, int bottleneck);
LayerGraph build_dpm(int in_channels, int growth, int branch_bottleneck, int dilation,
                     LayerVariant variant, double dropout_p);
LayerGraph build_transition(int channels, bool downsample);
LayerGraph build_upsampling_module(int tap_channels, int classes, int compressed, int filter_k,
                                   int shuffle_r);

LayerGraph build_backbone(const ModelSpec& spec);
LayerGraph build_ddpnet_graph(const ModelSpec& spec);

// Downsample factor between network input and the finest decoder tap.
int stem_downsample(const ModelSpec& spec);

}  // namespace ddp
