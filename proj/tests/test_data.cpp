#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>

#include "ddp/data.hpp"

using namespace ddp;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("ddp_test_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

void write_bytes(const fs::path& p, const std::string& bytes) {
    std::ofstream os(p, std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Tensor random_image(const Shape& s, Rng& rng) {
    std::uniform_int_distribution<int> d(0, 255);
    Tensor t(s);
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(d(rng)) / 255.0f;
    return t;
}

}  // namespace

TEST_CASE("ppm round trip is exact for 8-bit-representable values") {
    TempDir tmp;
    Rng rng(1);
    const Tensor img = random_image(Shape{1, 3, 7, 5}, rng);
    write_ppm(tmp.path / "a.ppm", img);
    const Tensor back = read_ppm(tmp.path / "a.ppm");
    REQUIRE(back.shape() == img.shape());
    for (std::int64_t i = 0; i < img.numel(); ++i)
        CHECK(std::abs(back[i] - img[i]) <= 0.5f / 255.0f);
}

TEST_CASE("single white pixel decodes to exactly 1.0") {
    TempDir tmp;
    write_bytes(tmp.path / "w.ppm", std::string("P6\n1 1\n255\n") + "\xff\xff\xff");
    const Tensor t = read_ppm(tmp.path / "w.ppm");
    CHECK(t.shape() == Shape{1, 3, 1, 1});
    CHECK(t[0] == 1.0f);
    CHECK(t[1] == 1.0f);
    CHECK(t[2] == 1.0f);
}

TEST_CASE("ppm header comments are skipped") {
    TempDir tmp;
    write_bytes(tmp.path / "c.ppm",
                std::string("P6\n# a comment\n1 1\n# another\n255\n") + std::string(3, '\0'));
    const Tensor t = read_ppm(tmp.path / "c.ppm");
    CHECK(t[0] == 0.0f);
}

TEST_CASE("codec errors: bad magic, bad maxval, truncated payload") {
    TempDir tmp;
    write_bytes(tmp.path / "bad.ppm", "P3\n1 1\n255\n0 0 0\n");
    CHECK_THROWS_AS(read_ppm(tmp.path / "bad.ppm"), CodecError);
    write_bytes(tmp.path / "deep.ppm", std::string("P6\n1 1\n65535\n") + std::string(6, '\0'));
    CHECK_THROWS_AS(read_ppm(tmp.path / "deep.ppm"), CodecError);
    write_bytes(tmp.path / "short.ppm", std::string("P6\n2 2\n255\n") + std::string(5, '\0'));
    try {
        (void)read_ppm(tmp.path / "short.ppm");
        FAIL("expected CodecError");
    } catch (const CodecError& e) {
        // truncation errors report a byte offset
        CHECK(std::string(e.what()).find("byte") != std::string::npos);
    }
    CHECK_THROWS_AS(read_ppm(tmp.path / "missing.ppm"), CodecError);
}

TEST_CASE("label pgm round trip, including the ignore value") {
    TempDir tmp;
    LabelMap m(3, 4, 0);
    for (std::size_t i = 0; i < m.v.size(); ++i) m.v[i] = static_cast<std::int32_t>(i % 7);
    m.at(2, 3) = kIgnoreLabel;
    write_label_pgm(tmp.path / "l.pgm", m);
    const LabelMap back = read_label_pgm(tmp.path / "l.pgm");
    REQUIRE(back.h == m.h);
    REQUIRE(back.w == m.w);
    CHECK(back.v == m.v);
}

TEST_CASE("bilinear resize: identity and constant preservation") {
    Rng rng(2);
    const Tensor img = random_image(Shape{1, 3, 6, 9}, rng);
    CHECK(resize_bilinear(img, 6, 9) == img);
    const Tensor flat(Shape{1, 3, 4, 4}, 0.25f);
    const Tensor up = resize_bilinear(flat, 9, 13);
    for (std::int64_t i = 0; i < up.numel(); ++i) CHECK(up[i] == doctest::Approx(0.25f));
}

TEST_CASE("nearest resize keeps the label alphabet") {
    LabelMap m(2, 2, 0);
    m.at(0, 1) = 5;
    m.at(1, 0) = 9;
    m.at(1, 1) = kIgnoreLabel;
    const LabelMap up = resize_nearest(m, 5, 5);
    for (auto v : up.v) CHECK((v == 0 || v == 5 || v == 9 || v == kIgnoreLabel));
    CHECK(up.at(0, 0) == 0);
    CHECK(up.at(4, 4) == kIgnoreLabel);
}

TEST_CASE("manifest loading resolves paths against the manifest directory") {
    TempDir tmp;
    fs::create_directories(tmp.path / "img");
    Rng rng(3);
    for (int i = 0; i < 3; ++i) {
        write_ppm(tmp.path / "img" / ("s" + std::to_string(i) + ".ppm"),
                  random_image(Shape{1, 3, 4, 4}, rng));
        LabelMap m(4, 4, i);
        write_label_pgm(tmp.path / "img" / ("s" + std::to_string(i) + ".pgm"), m);
    }
    std::ofstream man(tmp.path / "manifest.txt");
    for (int i = 0; i < 3; ++i)
        man << "img/s" << i << ".ppm\timg/s" << i << ".pgm\n";
    man.close();
    const auto samples = load_manifest(tmp.path / "manifest.txt");
    REQUIRE(samples.size() == 3);
    CHECK(samples[1].label.at(0, 0) == 1);
    CHECK(samples[2].image.shape() == Shape{1, 3, 4, 4});
}

TEST_CASE("manifest errors name the offending line") {
    TempDir tmp;
    std::ofstream man(tmp.path / "manifest.txt");
    man << "nolabel.ppm\n";
    man.close();
    try {
        (void)load_manifest(tmp.path / "manifest.txt");
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find(":1") != std::string::npos);
    }

    std::ofstream man2(tmp.path / "m2.txt");
    man2 << "ghost.ppm\tghost.pgm\n";
    man2.close();
    CHECK_THROWS_AS(load_manifest(tmp.path / "m2.txt"), DataError);
    CHECK_THROWS_AS(load_dataset(tmp.path / "nope"), DataError);
}

TEST_CASE("synthetic data generator is deterministic and loadable") {
    TempDir tmp;
    gen_synthetic(tmp.path / "a", 4, 64, 64, 3, 9);
    gen_synthetic(tmp.path / "b", 4, 64, 64, 3, 9);
    const auto da = load_dataset(tmp.path / "a");
    const auto db = load_dataset(tmp.path / "b");
    REQUIRE(da.size() == 4);
    REQUIRE(db.size() == 4);
    for (std::size_t i = 0; i < da.size(); ++i) {
        CHECK(da[i].image == db[i].image);
        CHECK(da[i].label.v == db[i].label.v);
    }
    // every image contains background plus at least one shape class
    for (const auto& s : da) {
        std::vector<bool> seen(3, false);
        for (auto v : s.label.v)
            if (v >= 0 && v < 3) seen[static_cast<std::size_t>(v)] = true;
        CHECK(seen[0]);
        CHECK((seen[1] || seen[2]));
    }
    CHECK_THROWS_AS(gen_synthetic(tmp.path / "c", 1, 60, 64, 3, 1), ConfigError);
    CHECK_THROWS_AS(gen_synthetic(tmp.path / "d", 1, 64, 64, 1, 1), ConfigError);
}

TEST_CASE("dataset mean averages over pixels of all samples") {
    std::vector<Sample> samples;
    Sample a{Tensor(Shape{1, 3, 2, 2}, 0.5f), LabelMap(2, 2, 0), "a"};
    Sample b{Tensor(Shape{1, 3, 2, 2}, 1.0f), LabelMap(2, 2, 0), "b"};
    samples.push_back(a);
    samples.push_back(b);
    const Tensor m = dataset_mean(samples);
    REQUIRE(m.shape() == Shape{1, 3, 1, 1});
    for (int c = 0; c < 3; ++c) CHECK(m[c] == doctest::Approx(0.75f));
}

TEST_CASE("miou hand case: half the pixels wrong, all predicted class 0") {
    // truth: half 0 half 1; prediction: all 0.
    // IoU(0) = 2/(2+2) = 0.5, IoU(1) = 0/2 = 0, mean 0.25
    ConfusionMatrix cm(2);
    LabelMap truth(1, 4, 0);
    truth.at(0, 2) = 1;
    truth.at(0, 3) = 1;
    LabelMap pred(1, 4, 0);
    accumulate(cm, truth, pred);
    const IoUResult r = miou(cm);
    CHECK(r.per_class[0] == doctest::Approx(0.5));
    CHECK(r.per_class[1] == doctest::Approx(0.0));
    CHECK(r.mean == doctest::Approx(0.25));
}

TEST_CASE("miou: perfect prediction scores 1.0") {
    ConfusionMatrix cm(3);
    LabelMap truth(2, 3, 0);
    truth.at(0, 1) = 1;
    truth.at(1, 2) = 2;
    accumulate(cm, truth, truth);
    const IoUResult r = miou(cm);
    CHECK(r.mean == doctest::Approx(1.0));
    for (int c = 0; c < 3; ++c) CHECK(r.per_class[static_cast<std::size_t>(c)] == doctest::Approx(1.0));
}

TEST_CASE("classes absent from truth and prediction are undefined, not zero") {
    ConfusionMatrix cm(3);
    LabelMap truth(1, 2, 0);
    LabelMap pred(1, 2, 0);
    accumulate(cm, truth, pred);
    const IoUResult r = miou(cm);
    CHECK(r.defined[0]);
    CHECK_FALSE(r.defined[1]);
    CHECK_FALSE(r.defined[2]);
    CHECK(std::isnan(r.per_class[1]));
    CHECK(r.mean == doctest::Approx(1.0));  // mean over defined classes only
}

TEST_CASE("ignore-labeled pixels never enter the confusion matrix") {
    ConfusionMatrix cm(2);
    LabelMap truth(1, 3, 0);
    truth.at(0, 1) = kIgnoreLabel;
    LabelMap pred(1, 3, 1);  // would be all-wrong if counted
    accumulate(cm, truth, pred);
    CHECK(cm.total() == 2);
    LabelMap bad(1, 3, 7);  // out-of-range truth that is not the ignore value
    CHECK_THROWS_AS(accumulate(cm, bad, pred), DataError);
}

TEST_CASE("argmax_labels picks the first maximum") {
    Tensor logits(Shape{1, 3, 1, 2});
    // pixel 0: tie between class 0 and 2 -> 0; pixel 1: class 1 wins
    logits.at(0, 0, 0, 0) = 2.0f;
    logits.at(0, 1, 0, 0) = 1.0f;
    logits.at(0, 2, 0, 0) = 2.0f;
    logits.at(0, 0, 0, 1) = 0.0f;
    logits.at(0, 1, 0, 1) = 3.0f;
    logits.at(0, 2, 0, 1) = -1.0f;
    const LabelMap m = argmax_labels(logits);
    CHECK(m.at(0, 0) == 0);
    CHECK(m.at(0, 1) == 1);
}

TEST_CASE("checkpoint round trip is bitwise and preserves inference") {
    TempDir tmp;
    auto model = build_ddpnet<float>(preset_tiny(), 21);
    model.store.buffer_order.push_back("input.mean");
    model.store.buffers.emplace("input.mean", Tensor(Shape{1, 3, 1, 1}, 0.4f));
    save_checkpoint(tmp.path / "m.ddpck", model);
    CHECK(fs::file_size(tmp.path / "m.ddpck") < 10u * 1024 * 1024);

    Model loaded = load_checkpoint(tmp.path / "m.ddpck");
    REQUIRE(loaded.store.param_order == model.store.param_order);
    for (const auto& name : model.store.param_order)
        CHECK(loaded.store.params.at(name)->value == model.store.params.at(name)->value);
    for (const auto& name : model.store.buffer_order)
        CHECK(loaded.store.buffers.at(name) == model.store.buffers.at(name));

    Rng rng(5);
    const Tensor x = random_image(Shape{1, 3, 64, 64}, rng);
    auto y0 = forward(model, x, Mode::Eval);
    auto y1 = forward(loaded, x, Mode::Eval);
    CHECK(y0->value == y1->value);

    // saving the loaded model reproduces the file byte for byte
    save_checkpoint(tmp.path / "m2.ddpck", loaded);
    std::ifstream f1(tmp.path / "m.ddpck", std::ios::binary);
    std::ifstream f2(tmp.path / "m2.ddpck", std::ios::binary);
    const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
}

TEST_CASE("checkpoint extra records round trip") {
    TempDir tmp;
    auto model = build_ddpnet<float>(preset_tiny(), 22);
    std::map<std::string, Tensor> extra;
    extra.emplace("opt.t", Tensor(Shape{1, 1, 1, 1}, 17.0f));
    extra.emplace("opt.m.stem.conv1.w", Tensor(Shape{8, 3, 3, 3}, 0.125f));
    save_checkpoint(tmp.path / "o.ddpck", model, &extra);
    std::map<std::string, Tensor> back;
    (void)load_checkpoint(tmp.path / "o.ddpck", &back);
    REQUIRE(back.size() == 2);
    CHECK(back.at("opt.t")[0] == 17.0f);
    CHECK(back.at("opt.m.stem.conv1.w") == extra.at("opt.m.stem.conv1.w"));
}

TEST_CASE("checkpoint corruption is rejected") {
    TempDir tmp;
    auto model = build_ddpnet<float>(preset_tiny(), 23);
    save_checkpoint(tmp.path / "m.ddpck", model);
    std::fstream f(tmp.path / "m.ddpck",
                   std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXXXXXX", 8);  // clobber the magic
    f.close();
    CHECK_THROWS_AS(load_checkpoint(tmp.path / "m.ddpck"), CheckpointError);

    // truncated file
    save_checkpoint(tmp.path / "t.ddpck", model);
    const auto full = fs::file_size(tmp.path / "t.ddpck");
    fs::resize_file(tmp.path / "t.ddpck", full / 2);
    CHECK_THROWS_AS(load_checkpoint(tmp.path / "t.ddpck"), CheckpointError);
    CHECK_THROWS_AS(load_checkpoint(tmp.path / "absent.ddpck"), CheckpointError);
}

TEST_CASE("colorize maps distinct labels to distinct colors and ignore to black") {
    LabelMap m(1, 4, 0);
    m.at(0, 1) = 1;
    m.at(0, 2) = 2;
    m.at(0, 3) = kIgnoreLabel;
    const Tensor c = colorize_labels(m);
    REQUIRE(c.shape() == Shape{1, 3, 1, 4});
    auto px = [&](std::int64_t x) {
        return std::array<float, 3>{c.at(0, 0, 0, x), c.at(0, 1, 0, x), c.at(0, 2, 0, x)};
    };
    CHECK(px(0) != px(1));
    CHECK(px(1) != px(2));
    CHECK(px(3) == std::array<float, 3>{0.0f, 0.0f, 0.0f});
}

TEST_CASE("directory dataset pairs images with labels by stem, sorted") {
    TempDir tmp;
    fs::create_directories(tmp.path / "images");
    fs::create_directories(tmp.path / "labels");
    Rng rng(8);
    for (const char* stem : {"b", "a"}) {
        write_ppm(tmp.path / "images" / (std::string(stem) + ".ppm"),
                  random_image(Shape{1, 3, 4, 4}, rng));
        write_label_pgm(tmp.path / "labels" / (std::string(stem) + ".pgm"), LabelMap(4, 4, 0));
    }
    const auto samples = load_dataset_dir(tmp.path);
    REQUIRE(samples.size() == 2);
    CHECK(samples[0].name < samples[1].name);

    fs::remove(tmp.path / "labels" / "a.pgm");
    CHECK_THROWS_AS(load_dataset_dir(tmp.path), DataError);
}
