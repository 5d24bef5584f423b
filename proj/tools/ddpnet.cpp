// ddpnet: command-line front end for the segmentation kit.
// Exit codes: 0 success, 1 runtime/data failure, 2 usage error.

#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "ddp/analysis.hpp"
#include "ddp/gradcheck.hpp"
#include "ddp/train.hpp"

namespace {

using namespace ddp;

Shape parse_input_size(const std::string& text) {
    std::int64_t h = 0, w = 0;
    char x = 0;
    std::istringstream is(text);
    if (!(is >> h >> x >> w) || (x != 'x' && x != 'X') || h < 1 || w < 1 || !(is >> std::ws).eof())
        throw UsageError("--input must be HxW (e.g. 1024x2048), got '" + text + "'");
    return Shape{1, 3, h, w};
}

ModelSpec spec_from_flags(const std::string& preset, const std::string& spec_path) {
    if (!preset.empty() && !spec_path.empty())
        throw UsageError("--preset and --spec are mutually exclusive");
    if (!spec_path.empty()) {
        std::ifstream is(spec_path);
        if (!is) throw DataError("cannot open spec file " + spec_path);
        std::stringstream ss;
        ss << is.rdbuf();
        ModelSpec spec = parse_spec(ss.str());
        validate_spec(spec);
        return spec;
    }
    return resolve_preset(preset.empty() ? "cityscapes" : preset);
}

// Default crop for training: full frame for the tiny preset's desk-scale
// datasets, the documented crop sizes for the full presets.
std::pair<std::int64_t, std::int64_t> default_crop(const ModelSpec& spec) {
    if (spec.variant == "camvid") return {352, 480};
    if (spec.name == "tiny") return {64, 64};
    return {768, 768};
}

Model model_for_inference(const std::string& checkpoint, const std::string& preset,
                          const std::string& spec_path, std::uint64_t seed) {
    if (!checkpoint.empty()) return load_checkpoint(checkpoint);
    return build_ddpnet<float>(spec_from_flags(preset, spec_path), seed);
}

Tensor inference_mean(Model& model, const std::vector<Sample>& samples) {
    if (model.store.buffers.count("input.mean")) return model.store.buffer("input.mean");
    return dataset_mean(samples);
}

int cmd_describe(const std::string& preset, const std::string& spec_path, const std::string& input,
                 bool csv) {
    const ModelSpec spec = spec_from_flags(preset, spec_path);
    const LayerGraph graph = build_ddpnet_graph(spec);
    const Shape in = parse_input_size(input);
    if (in.h % graph.input_divisor != 0 || in.w % graph.input_divisor != 0)
        throw UsageError("--input extents must be divisible by " +
                         std::to_string(graph.input_divisor));
    const CostReport rep = cost_report(graph, in);
    std::cout << "model: " << spec.name << "  input: " << in.h << "x" << in.w << "\n";
    if (csv)
        print_report_csv(std::cout, rep);
    else
        print_report(std::cout, rep);
    return 0;
}

int cmd_check_grad(std::uint64_t seed) {
    const auto results = run_gradient_checks(seed);
    return print_gradient_checks(std::cout, results) ? 0 : 1;
}

int cmd_selftest(std::uint64_t seed) {
    bool ok = true;
    auto report = [&](const std::string& name, bool pass) {
        std::cout << (pass ? "PASS  " : "FAIL  ") << name << "\n";
        ok = ok && pass;
    };

    // static shape inference agrees with the executed forward pass
    {
        auto model = build_ddpnet<float>(preset_tiny(), seed);
        const Shape in{1, 3, 64, 64};
        const auto predicted = shape_infer(model.graph, {in});
        Tensor x(in);
        Rng rng = substream(seed, "selftest");
        std::uniform_real_distribution<float> d(0.0f, 1.0f);
        for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = d(rng);
        std::map<int, Shape> observed;
        auto y1 = forward(model, x, Mode::Eval, nullptr, false, &observed);
        bool same = true;
        for (const auto& [id, s] : observed)
            same = same && (s == predicted[static_cast<std::size_t>(id)]);
        report("shape inference matches executed forward (tiny, 64x64)", same);

        // eval-mode forward is bitwise deterministic
        auto y2 = forward(model, x, Mode::Eval);
        bool det = y1->value.numel() == y2->value.numel();
        for (std::int64_t i = 0; det && i < y1->value.numel(); ++i)
            det = y1->value[i] == y2->value[i];
        report("eval forward deterministic (bitwise)", det);
        report("logits cover the class dimension",
               y1->value.shape() == Shape{1, 3, 64, 64});
    }

    // checkpoint round trip is bitwise
    {
        auto model = build_ddpnet<float>(preset_tiny(), seed + 1);
        const auto tmp = std::filesystem::temp_directory_path() / "ddpnet_selftest.ddpck";
        save_checkpoint(tmp, model);
        Model back = load_checkpoint(tmp);
        bool same = back.store.param_order == model.store.param_order;
        for (const auto& name : model.store.param_order) {
            const auto& a = model.store.params.at(name)->value;
            const auto& b = back.store.params.at(name)->value;
            same = same && a.shape() == b.shape();
            for (std::int64_t i = 0; same && i < a.numel(); ++i) same = a[i] == b[i];
        }
        std::filesystem::remove(tmp);
        report("checkpoint round trip bitwise", same);
    }

    std::cout << (ok ? "selftest passed" : "selftest FAILED") << "\n";
    return ok ? 0 : 1;
}

int cmd_train(const std::string& preset, const std::string& spec_path, const std::string& data,
              const std::string& val_data, const std::string& out_dir, int epochs, int batch,
              double lr, const std::string& crop, bool no_augment, std::uint64_t seed) {
    const ModelSpec spec = spec_from_flags(preset, spec_path);
    auto model = build_ddpnet<float>(spec, seed);
    const auto train_set = load_dataset(data);
    std::vector<Sample> val_set;
    if (!val_data.empty()) val_set = load_dataset(val_data);

    TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.batch = batch;
    cfg.lr = lr;
    cfg.seed = seed;
    auto [ch, cw] = default_crop(spec);
    if (!crop.empty()) {
        const Shape c = parse_input_size(crop);
        ch = c.h;
        cw = c.w;
    }
    cfg.aug.crop_h = ch;
    cfg.aug.crop_w = cw;
    cfg.aug.enabled = !no_augment;
    if (ch % model.graph.input_divisor != 0 || cw % model.graph.input_divisor != 0)
        throw UsageError("crop extents must be divisible by " +
                         std::to_string(model.graph.input_divisor));

    std::filesystem::create_directories(out_dir);
    std::ofstream log(std::filesystem::path(out_dir) / "train.log");

    struct Tee : std::ostream, std::streambuf {
        std::ostream &a, &b;
        Tee(std::ostream& a_, std::ostream& b_) : std::ostream(this), a(a_), b(b_) {}
        int overflow(int c) override {
            if (c != EOF) {
                a.put(static_cast<char>(c));
                b.put(static_cast<char>(c));
            }
            return c;
        }
    } tee(std::cout, log);

    const TrainResult res = fit(model, train_set, val_set, cfg, tee);
    tee << "final loss " << res.final_loss << "\n";

    save_checkpoint(std::filesystem::path(out_dir) / "model.ddpck", model);
    tee << "checkpoint written to " << (std::filesystem::path(out_dir) / "model.ddpck").string()
        << "\n";
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& preset,
             const std::string& spec_path, const std::string& data, std::uint64_t seed) {
    Model model = model_for_inference(checkpoint, preset, spec_path, seed);
    const auto samples = load_dataset(data);
    if (samples.empty()) throw DataError("eval: empty dataset " + data);
    const Tensor mean = inference_mean(model, samples);
    ConfusionMatrix cm(model.spec.classes);
    for (const auto& s : samples) {
        auto logits = forward(model, preprocess(s.image, mean), Mode::Eval);
        accumulate(cm, s.label, argmax_labels(logits->value));
    }
    const IoUResult r = miou(cm);
    for (int c = 0; c < model.spec.classes; ++c) {
        std::cout << "class " << c << "  IoU ";
        if (r.defined[static_cast<std::size_t>(c)])
            std::cout << r.per_class[static_cast<std::size_t>(c)];
        else
            std::cout << "undefined";
        std::cout << "\n";
    }
    std::cout << "mIoU " << r.mean << "\n";
    return 0;
}

int cmd_infer(const std::string& checkpoint, const std::string& preset,
              const std::string& spec_path, const std::string& data, const std::string& out_dir,
              std::uint64_t seed) {
    Model model = model_for_inference(checkpoint, preset, spec_path, seed);
    std::vector<Sample> samples;
    if (std::filesystem::is_regular_file(data) &&
        std::filesystem::path(data).extension() == ".ppm") {
        Sample s;
        s.image = read_ppm(data);
        s.label = LabelMap(s.image.shape().h, s.image.shape().w, kIgnoreLabel);
        s.name = std::filesystem::path(data).stem().string();
        samples.push_back(std::move(s));
    } else {
        samples = load_dataset(data);
    }
    if (samples.empty()) throw DataError("infer: no inputs under " + data);
    const Tensor mean = inference_mean(model, samples);
    std::filesystem::create_directories(out_dir);
    for (const auto& s : samples) {
        auto logits = forward(model, preprocess(s.image, mean), Mode::Eval);
        const LabelMap pred = argmax_labels(logits->value);
        const auto base = std::filesystem::path(out_dir) / s.name;
        write_label_pgm(base.string() + "_pred.pgm", pred);
        write_ppm(base.string() + "_pred.ppm", colorize_labels(pred));
        std::cout << s.name << " -> " << base.string() << "_pred.{pgm,ppm}\n";
    }
    return 0;
}

template <typename T>
BenchResult bench_typed(const ModelSpec& spec, const Shape& in, int frames, std::uint64_t seed) {
    auto model = build_ddpnet<T>(spec, seed);
    if constexpr (std::is_same_v<T, float>) {
        return benchmark_fps(model, in, frames);
    } else {
        Rng rng = substream(1234, "bench");
        std::uniform_real_distribution<double> dist(0.0, 1.0);
        TensorT<T> input(in);
        for (std::int64_t i = 0; i < input.numel(); ++i) input[i] = static_cast<T>(dist(rng));
        for (int i = 0; i < 3; ++i) (void)forward(model, input, Mode::Eval);
        BenchResult r;
        r.frames = frames;
        r.warmup = 3;
        std::vector<double> lat;
        for (int i = 0; i < frames; ++i) {
            const auto t0 = std::chrono::steady_clock::now();
            (void)forward(model, input, Mode::Eval);
            const auto t1 = std::chrono::steady_clock::now();
            lat.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
        for (double v : lat) r.mean_ms += v;
        r.mean_ms /= frames;
        for (double v : lat) r.stddev_ms += (v - r.mean_ms) * (v - r.mean_ms);
        r.stddev_ms = frames > 1 ? std::sqrt(r.stddev_ms / (frames - 1)) : 0.0;
        r.fps = 1000.0 / r.mean_ms;
        return r;
    }
}

int cmd_bench(const std::string& preset, const std::string& spec_path,
              const std::string& checkpoint, const std::string& input, int frames,
              const std::string& precision, std::uint64_t seed) {
    if (precision != "single" && precision != "double")
        throw UsageError("--precision must be single or double");
    const Shape in = parse_input_size(input);
    BenchResult r;
    if (!checkpoint.empty()) {
        Model model = load_checkpoint(checkpoint);
        r = benchmark_fps(model, in, frames);
    } else {
        const ModelSpec spec = spec_from_flags(preset, spec_path);
        r = precision == "double" ? bench_typed<double>(spec, in, frames, seed)
                                  : bench_typed<float>(spec, in, frames, seed);
    }
    std::cout << "frames " << r.frames << " (+" << r.warmup << " warmup)  mean " << r.mean_ms
              << " ms  stddev " << r.stddev_ms << " ms  fps " << r.fps << "\n";
    return 0;
}

int cmd_gen_data(const std::string& out_dir, int count, const std::string& size, int classes,
                 std::uint64_t seed) {
    const Shape s = parse_input_size(size);
    gen_synthetic(out_dir, count, s.h, s.w, classes, seed);
    std::cout << "wrote " << count << " samples (" << s.h << "x" << s.w << ", " << classes
              << " classes) under " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DDPNet semantic segmentation kit"};
    app.require_subcommand(1);

    std::string preset, spec_path, input = "1024x2048", data, val_data, out_dir = "out";
    std::string checkpoint, precision = "single", crop, size = "64x64";
    std::uint64_t seed = 0;
    int epochs = 1, batch = 8, frames = 100, count = 16, classes = 3;
    double lr = 5e-4;
    bool csv = false, no_augment = false;

    auto add_spec_flags = [&](CLI::App* c) {
        c->add_option("--preset", preset, "cityscapes | camvid | tiny");
        c->add_option("--spec", spec_path, "model spec file (key = value lines)");
    };

    auto* describe = app.add_subcommand("describe", "per-layer shapes, parameters and FLOPs");
    add_spec_flags(describe);
    describe->add_option("--input", input, "input size HxW");
    describe->add_flag("--csv", csv, "machine-readable rows");

    auto* selftest = app.add_subcommand("selftest", "quick internal consistency checks");
    selftest->add_option("--seed", seed);

    auto* checkgrad = app.add_subcommand("check-grad", "finite-difference gradient certification");
    checkgrad->add_option("--seed", seed);

    auto* train = app.add_subcommand("train", "train a model");
    add_spec_flags(train);
    train->add_option("--data", data, "dataset root or manifest")->required();
    train->add_option("--val-data", val_data, "validation dataset");
    train->add_option("--out", out_dir, "output directory");
    train->add_option("--epochs", epochs);
    train->add_option("--batch", batch);
    train->add_option("--lr", lr);
    train->add_option("--crop", crop, "training crop HxW");
    train->add_flag("--no-augment", no_augment, "disable scale/flip augmentation");
    train->add_option("--seed", seed);

    auto* evalc = app.add_subcommand("eval", "per-class IoU and mIoU on a dataset");
    add_spec_flags(evalc);
    evalc->add_option("--checkpoint", checkpoint);
    evalc->add_option("--data", data)->required();
    evalc->add_option("--seed", seed);

    auto* infer = app.add_subcommand("infer", "write predicted label maps");
    add_spec_flags(infer);
    infer->add_option("--checkpoint", checkpoint);
    infer->add_option("--data", data, "dataset, directory or single .ppm")->required();
    infer->add_option("--out", out_dir);
    infer->add_option("--seed", seed);

    auto* bench = app.add_subcommand("bench", "latency / FPS measurement");
    add_spec_flags(bench);
    bench->add_option("--checkpoint", checkpoint);
    bench->add_option("--input", input, "input size HxW");
    bench->add_option("--frames", frames);
    bench->add_option("--precision", precision, "single | double");
    bench->add_option("--seed", seed);

    auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset");
    gen->add_option("--out", out_dir)->required();
    gen->add_option("--count", count);
    gen->add_option("--size", size, "sample size HxW");
    gen->add_option("--classes", classes);
    gen->add_option("--seed", seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (describe->parsed()) return cmd_describe(preset, spec_path, input, csv);
        if (selftest->parsed()) return cmd_selftest(seed);
        if (checkgrad->parsed()) return cmd_check_grad(seed);
        if (train->parsed())
            return cmd_train(preset, spec_path, data, val_data, out_dir, epochs, batch, lr, crop,
                             no_augment, seed);
        if (evalc->parsed()) return cmd_eval(checkpoint, preset, spec_path, data, seed);
        if (infer->parsed()) return cmd_infer(checkpoint, preset, spec_path, data, out_dir, seed);
        if (bench->parsed())
            return cmd_bench(preset, spec_path, checkpoint, input, frames, precision, seed);
        if (gen->parsed()) return cmd_gen_data(out_dir, count, size, classes, seed);
    } catch (const ddp::UsageError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const ddp::ConfigError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return 1;
    }
    return 2;
}
