#include "ddp/graph.hpp"

#include <algorithm>
#include <sstream>

namespace ddp {

namespace {

class GraphBuilder {
public:
    LayerGraph g;

    int input() { return push({.kind = NodeKind::Input, .name = "input"}); }

    int conv(const std::string& name, int in, ops::ConvParams p) {
        g.params.push_back({name + ".w", Shape{p.out_channels, p.in_channels, p.kh, p.kw}, true});
        if (p.has_bias) g.params.push_back({name + ".b", Shape{1, p.out_channels, 1, 1}, true});
        GraphNode n{.kind = NodeKind::Conv, .name = name, .inputs = {in}, .conv = p, .param = name};
        return push(std::move(n));
    }

    int bn(const std::string& name, int in, std::int64_t channels) {
        g.params.push_back({name + ".gamma", Shape{1, channels, 1, 1}, true});
        g.params.push_back({name + ".beta", Shape{1, channels, 1, 1}, true});
        g.params.push_back({name + ".running_mean", Shape{1, channels, 1, 1}, false});
        g.params.push_back({name + ".running_var", Shape{1, channels, 1, 1}, false});
        GraphNode n{.kind = NodeKind::BatchNorm, .name = name, .inputs = {in}, .param = name,
                    .channels = channels};
        return push(std::move(n));
    }

    int relu(const std::string& name, int in) {
        return push({.kind = NodeKind::Relu, .name = name, .inputs = {in}});
    }

    int dropout(const std::string& name, int in, double p) {
        return push({.kind = NodeKind::Dropout, .name = name, .inputs = {in}, .p = p});
    }

    int maxpool2(const std::string& name, int in) {
        return push({.kind = NodeKind::MaxPool2, .name = name, .inputs = {in}});
    }

    int avgpool2(const std::string& name, int in) {
        return push({.kind = NodeKind::AvgPool2, .name = name, .inputs = {in}});
    }

    int concat(const std::string& name, std::vector<int> ins) {
        return push({.kind = NodeKind::Concat, .name = name, .inputs = std::move(ins)});
    }

    int slice(const std::string& name, int in, std::int64_t c0, std::int64_t clen) {
        return push({.kind = NodeKind::Slice, .name = name, .inputs = {in}, .c0 = c0, .clen = clen});
    }

    int add(const std::string& name, int a, int b) {
        return push({.kind = NodeKind::Add, .name = name, .inputs = {a, b}});
    }

    int bilinear(const std::string& name, int in, std::int64_t factor) {
        return push({.kind = NodeKind::Bilinear, .name = name, .inputs = {in}, .factor = factor});
    }

    int shuffle(const std::string& name, int in, std::int64_t r) {
        return push({.kind = NodeKind::PixelShuffle, .name = name, .inputs = {in}, .factor = r});
    }

    int softmax(const std::string& name, int in) {
        return push({.kind = NodeKind::ChannelSoftmax, .name = name, .inputs = {in}});
    }

    int dynfilter(const std::string& name, int heat, int filt) {
        return push({.kind = NodeKind::DynamicFilter, .name = name, .inputs = {heat, filt}});
    }

    // conv -> BN -> ReLU, the post-activation composite
    int conv_bn_relu(const std::string& name, int in, ops::ConvParams p) {
        int c = conv(name, in, p);
        int b = bn(name + ".bn", c, p.out_channels);
        return relu(name + ".relu", b);
    }

private:
    int push(GraphNode n) {
        n.id = static_cast<int>(g.nodes.size());
        g.nodes.push_back(std::move(n));
        return g.nodes.back().id;
    }
};

ops::ConvParams conv1x1(std::int64_t in_c, std::int64_t out_c, bool bias = false) {
    return {.in_channels = in_c, .out_channels = out_c, .kh = 1, .kw = 1, .has_bias = bias};
}

ops::ConvParams conv3x3(std::int64_t in_c, std::int64_t out_c, std::int64_t stride = 1,
                        std::int64_t dilation = 1) {
    return {.in_channels = in_c,
            .out_channels = out_c,
            .kh = 3,
            .kw = 3,
            .sh = stride,
            .sw = stride,
            .ph = dilation,
            .pw = dilation,
            .dh = dilation,
            .dw = dilation};
}

int emit_initial_block(GraphBuilder& b, int in, int stem_width) {
    if (stem_width % 2 != 0) throw ConfigError("initial block: stem width must be even");
    int c1 = b.conv_bn_relu("stem.conv1", in, conv3x3(3, stem_width, 2));
    int branch_conv = b.conv_bn_relu("stem.conv2", c1, conv3x3(stem_width, stem_width, 2));
    int branch_pool = b.maxpool2("stem.pool", c1);
    return b.concat("stem.concat", {branch_conv, branch_pool});
}

int emit_dense_layer(GraphBuilder& b, const std::string& prefix, int in, int in_ch, int growth,
                     int bottleneck) {
    if (growth <= 0) throw ConfigError(prefix + ": growth rate must be positive");
    int c1 = b.conv_bn_relu(prefix + ".conv1x1", in, conv1x1(in_ch, bottleneck));
    int c2 = b.conv_bn_relu(prefix + ".conv3x3", c1, conv3x3(bottleneck, growth));
    return b.concat(prefix + ".concat", {in, c2});
}

int emit_dpm(GraphBuilder& b, const std::string& prefix, int in, int in_ch, int growth,
             int branch_bottleneck, int dilation, LayerVariant variant, double dropout_p) {
    if (growth % 2 != 0) throw ConfigError(prefix + ": DPM growth rate must be even");
    if (dilation < 1) throw ConfigError(prefix + ": dilation must be >= 1");
    const int half = growth / 2;
    int h1, h2;
    if (variant == LayerVariant::DpmC) {
        int shared = b.conv_bn_relu(prefix + ".conv1x1", in, conv1x1(in_ch, 2 * branch_bottleneck));
        h1 = b.slice(prefix + ".split1", shared, 0, branch_bottleneck);
        h2 = b.slice(prefix + ".split2", shared, branch_bottleneck, branch_bottleneck);
    } else {
        h1 = b.conv_bn_relu(prefix + ".conv1x1a", in, conv1x1(in_ch, branch_bottleneck));
        h2 = b.conv_bn_relu(prefix + ".conv1x1b", in, conv1x1(in_ch, branch_bottleneck));
    }
    int b1 = b.conv_bn_relu(prefix + ".branch1", h1, conv3x3(branch_bottleneck, half));
    int b2 = b.conv_bn_relu(prefix + ".branch2", h2, conv3x3(branch_bottleneck, half, 1, dilation));
    int cat = b.concat(prefix + ".merge", {b1, b2});
    int drop = b.dropout(prefix + ".dropout", cat, dropout_p);
    return b.concat(prefix + ".concat", {in, drop});
}

// Returns {output, tap}; tap is the pre-pool point-wise output.
std::pair<int, int> emit_transition(GraphBuilder& b, const std::string& prefix, int in,
                                    int channels, bool downsample) {
    if (channels <= 0) throw ConfigError(prefix + ": channel count must be positive");
    int tap = b.conv_bn_relu(prefix + ".conv1x1", in, conv1x1(channels, channels));
    int out = downsample ? b.avgpool2(prefix + ".pool", tap) : tap;
    return {out, tap};
}

// Returns refined heatmap at doubled resolution.
int emit_upsampling_module(GraphBuilder& b, const std::string& prefix, int heat, int tap,
                           int tap_channels, int compressed, int filter_k, int shuffle_r) {
    const std::int64_t gen_out =
        static_cast<std::int64_t>(shuffle_r) * shuffle_r * filter_k * filter_k;
    int f1 = b.conv_bn_relu(prefix + ".compress", tap, conv1x1(tap_channels, compressed));
    int f2 = b.conv(prefix + ".generate", f1, conv3x3(compressed, gen_out));
    int f3 = b.bn(prefix + ".generate.bn", f2, gen_out);
    int ps = b.shuffle(prefix + ".shuffle", f3, shuffle_r);
    int sm = b.softmax(prefix + ".softmax", ps);
    int up = b.bilinear(prefix + ".bilinear", heat, 2);
    return b.dynfilter(prefix + ".filter", up, sm);
}

std::vector<int> block_dilations(const BlockSpec& bs) {
    if (bs.variant == LayerVariant::Plain) return std::vector<int>(bs.layers, 1);
    if (!bs.dilations.empty()) {
        if (static_cast<int>(bs.dilations.size()) != bs.layers)
            throw ConfigError("dilation sequence length != layer count");
        return bs.dilations;
    }
    static const int pattern[4] = {2, 4, 8, 16};
    std::vector<int> d(bs.layers);
    for (int i = 0; i < bs.layers; ++i) d[static_cast<std::size_t>(i)] = pattern[i % 4];
    return d;
}

}  // namespace

int stem_downsample(const ModelSpec& spec) { return spec.variant == "camvid" ? 2 : 4; }

void validate_spec(const ModelSpec& spec) {
    if (spec.variant != "cityscapes" && spec.variant != "camvid")
        throw ConfigError("unknown variant '" + spec.variant + "'");
    const std::size_t want_blocks = spec.variant == "camvid" ? 3 : 4;
    if (spec.blocks.size() != want_blocks)
        throw ConfigError(spec.variant + " variant requires " + std::to_string(want_blocks) +
                          " blocks, got " + std::to_string(spec.blocks.size()));
    if (spec.classes < 2) throw ConfigError("class count must be >= 2");
    if (spec.stem_width < 2 || spec.stem_width % 2 != 0)
        throw ConfigError("stem width must be a positive even number");
    if (spec.growth <= 0) throw ConfigError("growth rate must be positive");
    if (spec.shuffle_r != 2) throw ConfigError("upsampling module requires shuffle factor 2");
    if (spec.filter_window < 1 || spec.filter_window % 2 != 1)
        throw ConfigError("filter window must be odd");
    if (spec.dropout_p < 0.0 || spec.dropout_p >= 1.0) throw ConfigError("dropout must be in [0,1)");
    for (const auto& bs : spec.blocks) {
        if (bs.layers < 1) throw ConfigError("every block needs at least one layer");
        if (bs.variant != LayerVariant::Plain && spec.growth % 2 != 0)
            throw ConfigError("DPM blocks require an even growth rate");
    }
}

LayerGraph build_initial_block(int stem_width) {
    GraphBuilder b;
    int in = b.input();
    b.g.output = emit_initial_block(b, in, stem_width);
    b.g.input_divisor = 4;
    return std::move(b.g);
}

LayerGraph build_dense_layer(int in_channels, int growth, int bottleneck) {
    GraphBuilder b;
    int in = b.input();
    b.g.output = emit_dense_layer(b, "layer", in, in_channels, growth, bottleneck);
    return std::move(b.g);
}

LayerGraph build_dpm(int in_channels, int growth, int branch_bottleneck, int dilation,
                     LayerVariant variant, double dropout_p) {
    if (variant == LayerVariant::Plain) throw ConfigError("build_dpm: variant must be dpm_b or dpm_c");
    GraphBuilder b;
    int in = b.input();
    b.g.output = emit_dpm(b, "layer", in, in_channels, growth, branch_bottleneck, dilation, variant,
                          dropout_p);
    return std::move(b.g);
}

LayerGraph build_transition(int channels, bool downsample) {
    GraphBuilder b;
    int in = b.input();
    auto [out, tap] = emit_transition(b, "transition", in, channels, downsample);
    b.g.output = out;
    b.g.taps.push_back(tap);
    return std::move(b.g);
}

LayerGraph build_upsampling_module(int tap_channels, int classes, int compressed, int filter_k,
                                   int shuffle_r) {
    GraphBuilder b;
    int heat = b.input();
    int tap = b.input();
    (void)classes;
    b.g.output = emit_upsampling_module(b, "up", heat, tap, tap_channels, compressed, filter_k,
                                        shuffle_r);
    return std::move(b.g);
}

namespace {

int emit_backbone(GraphBuilder& b, const ModelSpec& spec) {
    int in = b.input();
    int cur;
    if (spec.variant == "camvid") {
        cur = b.conv_bn_relu("stem.conv1", in, conv3x3(3, 2 * spec.stem_width, 2));
    } else {
        cur = emit_initial_block(b, in, spec.stem_width);
    }
    b.g.marks.emplace_back("initial", cur);
    int ch = 2 * spec.stem_width;
    for (std::size_t bi = 0; bi < spec.blocks.size(); ++bi) {
        const BlockSpec& bs = spec.blocks[bi];
        const std::string bname = "block" + std::to_string(bi + 1);
        const auto dil = block_dilations(bs);
        for (int li = 0; li < bs.layers; ++li) {
            const std::string lname = bname + ".layer" + std::to_string(li);
            if (bs.variant == LayerVariant::Plain)
                cur = emit_dense_layer(b, lname, cur, ch, spec.growth, spec.plain_bottleneck);
            else
                cur = emit_dpm(b, lname, cur, ch, spec.growth, spec.dpm_branch_bottleneck,
                               dil[static_cast<std::size_t>(li)], bs.variant, spec.dropout_p);
            ch += spec.growth;
        }
        b.g.marks.emplace_back(bname, cur);
        const bool last = bi + 1 == spec.blocks.size();
        const std::string tname = "transition" + std::to_string(bi + 1);
        auto [out, tap] = emit_transition(b, tname, cur, ch, !last);
        b.g.taps.push_back(tap);
        b.g.marks.emplace_back(tname, out);
        cur = out;
    }
    b.g.output = cur;
    b.g.input_divisor = 32;
    return cur;
}

}  // namespace

LayerGraph build_backbone(const ModelSpec& spec) {
    validate_spec(spec);
    GraphBuilder b;
    emit_backbone(b, spec);
    return std::move(b.g);
}

LayerGraph build_ddpnet_graph(const ModelSpec& spec) {
    validate_spec(spec);
    GraphBuilder b;
    emit_backbone(b, spec);

    // tap channel counts follow the block arithmetic
    std::vector<int> tap_channels;
    int ch = 2 * spec.stem_width;
    for (const auto& bs : spec.blocks) {
        ch += bs.layers * spec.growth;
        tap_channels.push_back(ch);
    }

    const int n_taps = static_cast<int>(b.g.taps.size());
    std::vector<int> heats(static_cast<std::size_t>(n_taps));
    for (int i = 0; i < n_taps; ++i) {
        const std::string hname = "decoder.heat" + std::to_string(i + 1);
        heats[static_cast<std::size_t>(i)] =
            b.conv(hname, b.g.taps[static_cast<std::size_t>(i)],
                   conv1x1(tap_channels[static_cast<std::size_t>(i)], spec.classes, true));
    }

    int cur = heats[static_cast<std::size_t>(n_taps - 1)];
    for (int i = n_taps - 1; i >= 1; --i) {
        const std::string uname = "decoder.up" + std::to_string(i + 1);
        int up = emit_upsampling_module(b, uname, cur, b.g.taps[static_cast<std::size_t>(i)],
                                        tap_channels[static_cast<std::size_t>(i)],
                                        spec.decoder_compress, spec.filter_window, spec.shuffle_r);
        cur = b.add(uname + ".skip", up, heats[static_cast<std::size_t>(i - 1)]);
    }
    cur = b.bilinear("decoder.final", cur, stem_downsample(spec));
    b.g.output = cur;
    b.g.marks.emplace_back("logits", cur);
    b.g.input_divisor = 32;
    return std::move(b.g);
}

// ---------------------------------------------------------------------------
// Presets and spec text format
// ---------------------------------------------------------------------------

ModelSpec preset_cityscapes() {
    ModelSpec s;
    s.name = "cityscapes";
    s.variant = "cityscapes";
    s.classes = 19;
    s.stem_width = 32;
    s.growth = 32;
    s.blocks = {
        {2, LayerVariant::Plain, {}},
        {4, LayerVariant::Plain, {}},
        {8, LayerVariant::DpmC, {2, 4, 8, 16, 2, 4, 8, 16}},
        {8, LayerVariant::DpmC, {2, 4, 8, 16, 2, 4, 8, 16}},
    };
    s.plain_bottleneck = 128;
    s.dpm_branch_bottleneck = 56;
    s.decoder_compress = 64;
    return s;
}

ModelSpec preset_camvid() {
    ModelSpec s = preset_cityscapes();
    s.name = "camvid";
    s.variant = "camvid";
    s.classes = 11;
    s.blocks.pop_back();
    return s;
}

ModelSpec preset_tiny() {
    ModelSpec s;
    s.name = "tiny";
    s.variant = "cityscapes";
    s.classes = 3;
    s.stem_width = 8;
    s.growth = 8;
    s.blocks = {
        {1, LayerVariant::Plain, {}},
        {1, LayerVariant::Plain, {}},
        {2, LayerVariant::DpmC, {2, 4}},
        {2, LayerVariant::DpmC, {2, 4}},
    };
    s.plain_bottleneck = 32;
    s.dpm_branch_bottleneck = 16;
    s.decoder_compress = 16;
    return s;
}

ModelSpec resolve_preset(const std::string& name) {
    if (name == "cityscapes") return preset_cityscapes();
    if (name == "camvid") return preset_camvid();
    if (name == "tiny") return preset_tiny();
    throw ConfigError("unknown preset '" + name + "'");
}

namespace {

std::string variant_name(LayerVariant v) {
    switch (v) {
        case LayerVariant::Plain: return "plain";
        case LayerVariant::DpmB: return "dpm_b";
        case LayerVariant::DpmC: return "dpm_c";
    }
    return "plain";
}

LayerVariant variant_from(const std::string& s) {
    if (s == "plain") return LayerVariant::Plain;
    if (s == "dpm_b") return LayerVariant::DpmB;
    if (s == "dpm_c") return LayerVariant::DpmC;
    throw ConfigError("unknown layer variant '" + s + "'");
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (!std::isspace(static_cast<unsigned char>(c))) {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

std::string serialize_spec(const ModelSpec& spec) {
    std::ostringstream os;
    os << "name = " << spec.name << "\n";
    os << "variant = " << spec.variant << "\n";
    os << "classes = " << spec.classes << "\n";
    os << "stem_width = " << spec.stem_width << "\n";
    os << "growth = " << spec.growth << "\n";
    os << "blocks = ";
    for (std::size_t i = 0; i < spec.blocks.size(); ++i)
        os << (i ? "," : "") << spec.blocks[i].layers;
    os << "\n";
    os << "block_variants = ";
    for (std::size_t i = 0; i < spec.blocks.size(); ++i)
        os << (i ? "," : "") << variant_name(spec.blocks[i].variant);
    os << "\n";
    for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
        if (spec.blocks[i].dilations.empty()) continue;
        os << "dilations" << (i + 1) << " = ";
        for (std::size_t j = 0; j < spec.blocks[i].dilations.size(); ++j)
            os << (j ? "," : "") << spec.blocks[i].dilations[j];
        os << "\n";
    }
    os << "plain_bottleneck = " << spec.plain_bottleneck << "\n";
    os << "dpm_branch_bottleneck = " << spec.dpm_branch_bottleneck << "\n";
    os << "decoder_compress = " << spec.decoder_compress << "\n";
    os << "filter_window = " << spec.filter_window << "\n";
    os << "shuffle_r = " << spec.shuffle_r << "\n";
    os << "dropout = " << spec.dropout_p << "\n";
    return os.str();
}

ModelSpec parse_spec(const std::string& text) {
    ModelSpec s = preset_cityscapes();
    s.name = "custom";
    s.blocks.clear();
    std::vector<int> layer_counts;
    std::vector<LayerVariant> variants;
    std::vector<std::pair<int, std::vector<int>>> dilations;

    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::string stripped = trim(line.substr(0, line.find('#')));
        if (stripped.empty()) continue;
        const std::size_t eq = stripped.find('=');
        if (eq == std::string::npos)
            throw ConfigError("spec line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(stripped.substr(0, eq));
        const std::string val = trim(stripped.substr(eq + 1));
        try {
            if (key == "name") s.name = val;
            else if (key == "variant") s.variant = val;
            else if (key == "classes") s.classes = std::stoi(val);
            else if (key == "stem_width") s.stem_width = std::stoi(val);
            else if (key == "growth") s.growth = std::stoi(val);
            else if (key == "plain_bottleneck") s.plain_bottleneck = std::stoi(val);
            else if (key == "dpm_branch_bottleneck") s.dpm_branch_bottleneck = std::stoi(val);
            else if (key == "decoder_compress") s.decoder_compress = std::stoi(val);
            else if (key == "filter_window") s.filter_window = std::stoi(val);
            else if (key == "shuffle_r") s.shuffle_r = std::stoi(val);
            else if (key == "dropout") s.dropout_p = std::stod(val);
            else if (key == "blocks") {
                for (const auto& t : split_csv(val)) layer_counts.push_back(std::stoi(t));
            } else if (key == "block_variants") {
                for (const auto& t : split_csv(val)) variants.push_back(variant_from(t));
            } else if (key.rfind("dilations", 0) == 0) {
                const int idx = std::stoi(key.substr(9)) - 1;
                std::vector<int> d;
                for (const auto& t : split_csv(val)) d.push_back(std::stoi(t));
                dilations.emplace_back(idx, std::move(d));
            } else {
                throw ConfigError("unknown spec key '" + key + "'");
            }
        } catch (const std::invalid_argument&) {
            throw ConfigError("spec line " + std::to_string(lineno) + ": bad value '" + val + "'");
        }
    }
    if (layer_counts.empty()) throw ConfigError("spec is missing 'blocks'");
    if (!variants.empty() && variants.size() != layer_counts.size())
        throw ConfigError("block_variants length != blocks length");
    for (std::size_t i = 0; i < layer_counts.size(); ++i) {
        BlockSpec bs;
        bs.layers = layer_counts[i];
        bs.variant = variants.empty() ? LayerVariant::Plain : variants[i];
        s.blocks.push_back(bs);
    }
    for (auto& [idx, d] : dilations) {
        if (idx < 0 || idx >= static_cast<int>(s.blocks.size()))
            throw ConfigError("dilations index out of range");
        s.blocks[static_cast<std::size_t>(idx)].dilations = std::move(d);
    }
    validate_spec(s);
    return s;
}

}  // namespace ddp
