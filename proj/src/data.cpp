#include "ddp/data.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>

namespace ddp {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// PPM / PGM codecs
// ---------------------------------------------------------------------------

namespace {

struct PnmHeader {
    std::int64_t w = 0, h = 0, maxval = 0;
    std::streamoff payload_offset = 0;
};

PnmHeader read_pnm_header(std::istream& is, const std::string& magic, const fs::path& path) {
    std::string got(2, '\0');
    is.read(got.data(), 2);
    if (!is || got != magic)
        throw CodecError(path.string() + ": bad magic at byte 0 (expected " + magic + ")");
    PnmHeader hd;
    std::int64_t fields[3];
    for (int f = 0; f < 3; ++f) {
        // skip whitespace and '#' comments
        int c = is.get();
        while (is && (std::isspace(c) || c == '#')) {
            if (c == '#')
                while (is && is.get() != '\n') {}
            c = is.get();
        }
        std::string tok;
        while (is && !std::isspace(c)) {
            tok.push_back(static_cast<char>(c));
            c = is.get();
        }
        try {
            fields[f] = std::stoll(tok);
        } catch (...) {
            throw CodecError(path.string() + ": malformed header near byte " +
                             std::to_string(static_cast<long long>(is.tellg())));
        }
    }
    hd.w = fields[0];
    hd.h = fields[1];
    hd.maxval = fields[2];
    if (hd.w < 1 || hd.h < 1) throw CodecError(path.string() + ": non-positive extents");
    if (hd.maxval != 255) throw CodecError(path.string() + ": only maxval 255 is supported");
    hd.payload_offset = is.tellg();
    return hd;
}

std::vector<unsigned char> read_payload(std::istream& is, std::size_t count, const fs::path& path,
                                        std::streamoff offset) {
    std::vector<unsigned char> buf(count);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(count));
    if (static_cast<std::size_t>(is.gcount()) != count)
        throw CodecError(path.string() + ": truncated payload at byte " +
                         std::to_string(static_cast<long long>(offset) + is.gcount()));
    return buf;
}

}  // namespace

Tensor read_ppm(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CodecError(path.string() + ": cannot open");
    const PnmHeader hd = read_pnm_header(is, "P6", path);
    const auto payload =
        read_payload(is, static_cast<std::size_t>(3 * hd.w * hd.h), path, hd.payload_offset);
    Tensor img(Shape{1, 3, hd.h, hd.w});
    for (std::int64_t y = 0; y < hd.h; ++y)
        for (std::int64_t x = 0; x < hd.w; ++x)
            for (std::int64_t c = 0; c < 3; ++c)
                img.at(0, c, y, x) =
                    static_cast<float>(payload[static_cast<std::size_t>((y * hd.w + x) * 3 + c)]) /
                    255.0f;
    return img;
}

void write_ppm(const fs::path& path, const Tensor& image) {
    const Shape& s = image.shape();
    if (s.n != 1 || s.c != 3) throw CodecError("write_ppm: image must be (1,3,H,W), got " + s.str());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CodecError(path.string() + ": cannot open for writing");
    os << "P6\n" << s.w << " " << s.h << "\n255\n";
    std::vector<unsigned char> payload(static_cast<std::size_t>(3 * s.h * s.w));
    for (std::int64_t y = 0; y < s.h; ++y)
        for (std::int64_t x = 0; x < s.w; ++x)
            for (std::int64_t c = 0; c < 3; ++c) {
                const float v = std::clamp(image.at(0, c, y, x), 0.0f, 1.0f);
                payload[static_cast<std::size_t>((y * s.w + x) * 3 + c)] =
                    static_cast<unsigned char>(std::lround(v * 255.0f));
            }
    os.write(reinterpret_cast<const char*>(payload.data()),
             static_cast<std::streamsize>(payload.size()));
    if (!os) throw CodecError(path.string() + ": write failed");
}

LabelMap read_label_pgm(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CodecError(path.string() + ": cannot open");
    const PnmHeader hd = read_pnm_header(is, "P5", path);
    const auto payload =
        read_payload(is, static_cast<std::size_t>(hd.w * hd.h), path, hd.payload_offset);
    LabelMap lab(hd.h, hd.w);
    for (std::size_t i = 0; i < payload.size(); ++i)
        lab.v[i] = static_cast<std::int32_t>(payload[i]);
    return lab;
}

void write_label_pgm(const fs::path& path, const LabelMap& label) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CodecError(path.string() + ": cannot open for writing");
    os << "P5\n" << label.w << " " << label.h << "\n255\n";
    std::vector<unsigned char> payload(label.v.size());
    for (std::size_t i = 0; i < payload.size(); ++i) {
        const std::int32_t v = label.v[i];
        if (v < 0 || v > 255) throw CodecError("write_label_pgm: label value out of 8-bit range");
        payload[i] = static_cast<unsigned char>(v);
    }
    os.write(reinterpret_cast<const char*>(payload.data()),
             static_cast<std::streamsize>(payload.size()));
    if (!os) throw CodecError(path.string() + ": write failed");
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

Tensor resize_bilinear(const Tensor& image, std::int64_t out_h, std::int64_t out_w) {
    const Shape& s = image.shape();
    Tensor out(Shape{s.n, s.c, out_h, out_w});
    const double sy = static_cast<double>(s.h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(s.w) / static_cast<double>(out_w);
    for (std::int64_t n = 0; n < s.n; ++n)
        for (std::int64_t c = 0; c < s.c; ++c)
            for (std::int64_t y = 0; y < out_h; ++y) {
                double fy = (y + 0.5) * sy - 0.5;
                fy = std::clamp(fy, 0.0, static_cast<double>(s.h - 1));
                const std::int64_t y0 = static_cast<std::int64_t>(fy);
                const std::int64_t y1 = std::min(y0 + 1, s.h - 1);
                const double wy = fy - y0;
                for (std::int64_t x = 0; x < out_w; ++x) {
                    double fx = (x + 0.5) * sx - 0.5;
                    fx = std::clamp(fx, 0.0, static_cast<double>(s.w - 1));
                    const std::int64_t x0 = static_cast<std::int64_t>(fx);
                    const std::int64_t x1 = std::min(x0 + 1, s.w - 1);
                    const double wx = fx - x0;
                    const double top =
                        image.at(n, c, y0, x0) * (1 - wx) + image.at(n, c, y0, x1) * wx;
                    const double bot =
                        image.at(n, c, y1, x0) * (1 - wx) + image.at(n, c, y1, x1) * wx;
                    out.at(n, c, y, x) = static_cast<float>(top * (1 - wy) + bot * wy);
                }
            }
    return out;
}

LabelMap resize_nearest(const LabelMap& label, std::int64_t out_h, std::int64_t out_w) {
    LabelMap out(out_h, out_w);
    for (std::int64_t y = 0; y < out_h; ++y) {
        const std::int64_t sy =
            std::min<std::int64_t>(label.h - 1, (y * label.h + label.h / 2) / out_h);
        for (std::int64_t x = 0; x < out_w; ++x) {
            const std::int64_t sx =
                std::min<std::int64_t>(label.w - 1, (x * label.w + label.w / 2) / out_w);
            out.at(y, x) = label.at(sy, sx);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

namespace {

Sample load_pair(const fs::path& image_path, const fs::path& label_path,
                 const std::string& context) {
    if (!fs::exists(image_path))
        throw DataError(context + ": missing image file " + image_path.string());
    if (!fs::exists(label_path))
        throw DataError(context + ": missing label file " + label_path.string());
    Sample s;
    s.image = read_ppm(image_path);
    s.label = read_label_pgm(label_path);
    if (s.image.shape().h != s.label.h || s.image.shape().w != s.label.w)
        throw DataError(context + ": image/label extents differ for " + image_path.string());
    s.name = image_path.stem().string();
    return s;
}

}  // namespace

std::vector<Sample> load_manifest(const fs::path& manifest) {
    std::ifstream is(manifest);
    if (!is) throw DataError("cannot open manifest " + manifest.string());
    const fs::path base = manifest.parent_path();
    std::vector<Sample> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::size_t tab = line.find('\t');
        const std::string context = manifest.string() + ":" + std::to_string(lineno);
        if (tab == std::string::npos)
            throw DataError(context + ": expected tab-separated image and label paths");
        fs::path img = line.substr(0, tab);
        fs::path lab = line.substr(tab + 1);
        if (img.is_relative()) img = base / img;
        if (lab.is_relative()) lab = base / lab;
        out.push_back(load_pair(img, lab, context));
    }
    return out;
}

std::vector<Sample> load_dataset_dir(const fs::path& root) {
    const fs::path images = root / "images";
    const fs::path labels = root / "labels";
    if (!fs::is_directory(images))
        throw DataError("dataset directory " + root.string() + " has no images/ subdirectory");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(images))
        if (e.path().extension() == ".ppm") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::vector<Sample> out;
    for (const auto& f : files)
        out.push_back(load_pair(f, labels / (f.stem().string() + ".pgm"), root.string()));
    return out;
}

std::vector<Sample> load_dataset(const fs::path& root) {
    if (!fs::exists(root)) throw DataError("dataset path does not exist: " + root.string());
    if (fs::is_regular_file(root)) return load_manifest(root);
    if (fs::exists(root / "manifest.txt")) return load_manifest(root / "manifest.txt");
    return load_dataset_dir(root);
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

namespace {

const unsigned char kPalette[19][3] = {
    {128, 64, 128}, {244, 35, 232}, {70, 70, 70},   {102, 102, 156}, {190, 153, 153},
    {153, 153, 153}, {250, 170, 30}, {220, 220, 0},  {107, 142, 35},  {152, 251, 152},
    {70, 130, 180},  {220, 20, 60},  {255, 0, 0},    {0, 0, 142},     {0, 0, 70},
    {0, 60, 100},    {0, 80, 100},   {0, 0, 230},    {119, 11, 32}};

}  // namespace

Tensor colorize_labels(const LabelMap& label) {
    Tensor img(Shape{1, 3, label.h, label.w});
    for (std::int64_t y = 0; y < label.h; ++y)
        for (std::int64_t x = 0; x < label.w; ++x) {
            const std::int32_t v = label.at(y, x);
            if (v == kIgnoreLabel) continue;  // black
            const auto& rgb = kPalette[static_cast<std::size_t>(v) % 19];
            for (int c = 0; c < 3; ++c) img.at(0, c, y, x) = rgb[c] / 255.0f;
        }
    return img;
}

void gen_synthetic(const fs::path& root, int count, std::int64_t h, std::int64_t w, int classes,
                   std::uint64_t seed) {
    if (h % 32 != 0 || w % 32 != 0)
        throw ConfigError("gen_synthetic: extents must be divisible by 32");
    if (classes < 2) throw ConfigError("gen_synthetic: need at least 2 classes");
    fs::create_directories(root / "images");
    fs::create_directories(root / "labels");
    Rng rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::ofstream manifest(root / "manifest.txt");
    if (!manifest) throw DataError("cannot write manifest under " + root.string());

    for (int i = 0; i < count; ++i) {
        Tensor img(Shape{1, 3, h, w});
        LabelMap lab(h, w, 0);
        // textured background: smooth gradient plus per-pixel noise
        const double gx = uni(rng), gy = uni(rng), base = 0.2 + 0.3 * uni(rng);
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x) {
                const double g = base + 0.2 * (gx * x / w + gy * y / h);
                for (int c = 0; c < 3; ++c)
                    img.at(0, c, y, x) = static_cast<float>(
                        std::clamp(g * (0.6 + 0.2 * c) + 0.05 * (uni(rng) - 0.5), 0.0, 1.0));
            }
        for (int cls = 1; cls < classes; ++cls) {
            const bool ellipse = (cls + i) % 2 == 0;
            const std::int64_t cw = static_cast<std::int64_t>((0.15 + 0.25 * uni(rng)) * w);
            const std::int64_t ch = static_cast<std::int64_t>((0.15 + 0.25 * uni(rng)) * h);
            const std::int64_t cx =
                static_cast<std::int64_t>(uni(rng) * (w - cw)) + cw / 2;
            const std::int64_t cy =
                static_cast<std::int64_t>(uni(rng) * (h - ch)) + ch / 2;
            const auto& rgb = kPalette[static_cast<std::size_t>(cls) % 19];
            for (std::int64_t y = std::max<std::int64_t>(0, cy - ch / 2);
                 y < std::min(h, cy + ch / 2); ++y)
                for (std::int64_t x = std::max<std::int64_t>(0, cx - cw / 2);
                     x < std::min(w, cx + cw / 2); ++x) {
                    if (ellipse) {
                        const double dx = 2.0 * (x - cx) / cw, dy = 2.0 * (y - cy) / ch;
                        if (dx * dx + dy * dy > 1.0) continue;
                    }
                    lab.at(y, x) = cls;
                    for (int c = 0; c < 3; ++c)
                        img.at(0, c, y, x) = static_cast<float>(
                            std::clamp(rgb[c] / 255.0 + 0.05 * (uni(rng) - 0.5), 0.0, 1.0));
                }
        }
        char name[32];
        std::snprintf(name, sizeof(name), "img_%04d", i);
        write_ppm(root / "images" / (std::string(name) + ".ppm"), img);
        write_label_pgm(root / "labels" / (std::string(name) + ".pgm"), lab);
        manifest << "images/" << name << ".ppm\tlabels/" << name << ".pgm\n";
    }
}

Tensor dataset_mean(const std::vector<Sample>& samples) {
    Tensor mean(Shape{1, 3, 1, 1});
    if (samples.empty()) return mean;
    double acc[3] = {0, 0, 0};
    std::int64_t total = 0;
    for (const auto& s : samples) {
        const Shape& sh = s.image.shape();
        for (std::int64_t c = 0; c < 3; ++c)
            for (std::int64_t i = 0; i < sh.h * sh.w; ++i)
                acc[c] += s.image.data()[(0 * 3 + c) * sh.h * sh.w + i];
        total += sh.h * sh.w;
    }
    for (int c = 0; c < 3; ++c) mean[c] = static_cast<float>(acc[c] / total);
    return mean;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

void accumulate(ConfusionMatrix& cm, const LabelMap& truth, const LabelMap& pred,
                std::int32_t ignore_label) {
    if (truth.h != pred.h || truth.w != pred.w)
        throw ShapeError("confusion: truth and prediction extents differ");
    for (std::size_t i = 0; i < truth.v.size(); ++i) {
        const std::int32_t t = truth.v[i];
        if (t == ignore_label) continue;
        const std::int32_t p = pred.v[i];
        if (t < 0 || t >= cm.classes || p < 0 || p >= cm.classes)
            throw DataError("confusion: label out of range (truth " + std::to_string(t) +
                            ", pred " + std::to_string(p) + ")");
        ++cm.at(t, p);
    }
}

IoUResult miou(const ConfusionMatrix& cm) {
    IoUResult r;
    r.per_class.resize(static_cast<std::size_t>(cm.classes));
    r.defined.resize(static_cast<std::size_t>(cm.classes));
    double sum = 0.0;
    int defined = 0;
    for (int c = 0; c < cm.classes; ++c) {
        std::int64_t row = 0, col = 0;
        for (int k = 0; k < cm.classes; ++k) {
            row += cm.at(c, k);
            col += cm.at(k, c);
        }
        const std::int64_t inter = cm.at(c, c);
        const std::int64_t denom = row + col - inter;
        if (denom == 0) {
            r.per_class[static_cast<std::size_t>(c)] = std::nan("");
            r.defined[static_cast<std::size_t>(c)] = false;
        } else {
            const double iou = static_cast<double>(inter) / static_cast<double>(denom);
            r.per_class[static_cast<std::size_t>(c)] = iou;
            r.defined[static_cast<std::size_t>(c)] = true;
            sum += iou;
            ++defined;
        }
    }
    r.mean = defined > 0 ? sum / defined : 0.0;
    return r;
}

LabelMap argmax_labels(const Tensor& logits) {
    const Shape& s = logits.shape();
    LabelMap out(s.h, s.w);
    for (std::int64_t y = 0; y < s.h; ++y)
        for (std::int64_t x = 0; x < s.w; ++x) {
            std::int32_t best = 0;
            float bv = logits.at(0, 0, y, x);
            for (std::int64_t c = 1; c < s.c; ++c) {
                const float v = logits.at(0, c, y, x);
                if (v > bv) {
                    bv = v;
                    best = static_cast<std::int32_t>(c);
                }
            }
            out.at(y, x) = best;
        }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'D', 'D', 'P', 'N', 'E', 'T', 'C', 'K'};

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is, const std::string& what) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw CheckpointError("truncated while reading " + what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_record(std::ostream& os, const std::string& name, const Tensor& t) {
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    os.put(1);  // dtype: f32
    const Shape& s = t.shape();
    put_u32(os, 4);
    for (std::int64_t e : {s.n, s.c, s.h, s.w}) put_u32(os, static_cast<std::uint32_t>(e));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * sizeof(float)));
}

std::pair<std::string, Tensor> read_record(std::istream& is) {
    const std::uint32_t name_len = get_u32(is, "record name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw CheckpointError("truncated record name");
    const int dtype = is.get();
    if (dtype != 1) throw CheckpointError("unsupported dtype " + std::to_string(dtype));
    const std::uint32_t rank = get_u32(is, "rank");
    if (rank != 4) throw CheckpointError("unsupported rank " + std::to_string(rank));
    Shape s;
    s.n = get_u32(is, "extent");
    s.c = get_u32(is, "extent");
    s.h = get_u32(is, "extent");
    s.w = get_u32(is, "extent");
    Tensor t(s);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!is) throw CheckpointError("truncated tensor payload for '" + name + "'");
    return {name, std::move(t)};
}

}  // namespace

void save_checkpoint(const fs::path& path, const Model& model,
                     const std::map<std::string, Tensor>* extra) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("cannot open " + path.string() + " for writing");
    os.write(kMagic, 8);
    put_u32(os, kCheckpointVersion);
    const std::string spec_text = serialize_spec(model.spec);
    put_u32(os, static_cast<std::uint32_t>(spec_text.size()));
    os.write(spec_text.data(), static_cast<std::streamsize>(spec_text.size()));

    std::uint32_t count = static_cast<std::uint32_t>(model.store.param_order.size() +
                                                     model.store.buffer_order.size());
    if (extra) count += static_cast<std::uint32_t>(extra->size());
    put_u32(os, count);
    for (const auto& name : model.store.param_order)
        write_record(os, name, model.store.params.at(name)->value);
    for (const auto& name : model.store.buffer_order)
        write_record(os, name, model.store.buffers.at(name));
    if (extra)
        for (const auto& [name, t] : *extra) write_record(os, name, t);
    if (!os) throw CheckpointError("write failed for " + path.string());
}

Model load_checkpoint(const fs::path& path, std::map<std::string, Tensor>* extra) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0)
        throw CheckpointError(path.string() + ": bad magic bytes");
    const std::uint32_t version = get_u32(is, "version");
    if (version != kCheckpointVersion)
        throw CheckpointError(path.string() + ": version " + std::to_string(version) +
                              " unsupported (expected " + std::to_string(kCheckpointVersion) + ")");
    const std::uint32_t spec_len = get_u32(is, "spec length");
    std::string spec_text(spec_len, '\0');
    is.read(spec_text.data(), spec_len);
    if (!is) throw CheckpointError(path.string() + ": truncated spec text");

    Model model;
    model.spec = parse_spec(spec_text);
    model.graph = build_ddpnet_graph(model.spec);
    model.store = init_parameters<float>(model.graph, 0);

    const std::uint32_t count = get_u32(is, "record count");
    for (std::uint32_t i = 0; i < count; ++i) {
        auto [name, t] = read_record(is);
        if (auto it = model.store.params.find(name); it != model.store.params.end()) {
            if (!(it->second->value.shape() == t.shape()))
                throw CheckpointError("shape mismatch for '" + name + "': checkpoint " +
                                      t.shape().str() + " vs spec " +
                                      it->second->value.shape().str());
            it->second->value = std::move(t);
        } else if (auto bt = model.store.buffers.find(name); bt != model.store.buffers.end()) {
            if (!(bt->second.shape() == t.shape()))
                throw CheckpointError("shape mismatch for buffer '" + name + "'");
            bt->second = std::move(t);
        } else if (extra) {
            extra->emplace(std::move(name), std::move(t));
        } else if (name.rfind("input.", 0) == 0) {
            model.store.buffer_order.push_back(name);
            model.store.buffers.emplace(std::move(name), std::move(t));
        } else {
            throw CheckpointError("unknown record '" + name + "'");
        }
    }
    return model;
}

}  // namespace ddp
