#pragma once

#include <cmath>
#include <numbers>
#include <ostream>

#include "ddp/data.hpp"

namespace ddp {

// --- learning-rate schedule ------------------------------------------------

// Half-cosine decay over `total` steps with a linear warmup ramp: during the
// first `warmup` steps the rate climbs linearly to the cosine value at the end
// of the ramp, then follows l_i = 1/2 (1 + cos(i*pi/total)) * base.
struct ScheduleConfig {
    double base_lr = 5e-4;
    int total = 1;
    int warmup = 5;
};

inline double lr_at(const ScheduleConfig& cfg, int step) {
    if (cfg.total < 1) throw ConfigError("schedule: total steps must be >= 1");
    auto cosine = [&](int i) {
        // i/total first: exact at the 0, 1/2 and 1 anchor fractions, so the
        // schedule hits base, base/2 and 0 without rounding residue
        return 0.5 * (1.0 + std::cos(static_cast<double>(i) / cfg.total * std::numbers::pi)) *
               cfg.base_lr;
    };
    if (cfg.warmup > 0 && step < cfg.warmup)
        return static_cast<double>(step + 1) / cfg.warmup * cosine(cfg.warmup);
    return cosine(step);
}

// --- optimizer -------------------------------------------------------------

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 2e-4;  // L2 on conv weights only (not biases / norms)
};

struct AdamState {
    std::int64_t t = 0;
    std::map<std::string, Tensor> m;
    std::map<std::string, Tensor> v;
};

inline void adam_step(ParameterStore<float>& store, const GradientSetT<float>& grads,
                      AdamState& state, const AdamConfig& cfg, double lr) {
    ++state.t;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (const auto& name : store.param_order) {
        auto& p = store.params.at(name);
        const auto git = grads.find(name);
        if (git == grads.end()) continue;
        const Tensor& g = git->second;
        auto [mit, fresh_m] = state.m.try_emplace(name, p->value.shape());
        auto [vit, fresh_v] = state.v.try_emplace(name, p->value.shape());
        Tensor& m = mit->second;
        Tensor& v = vit->second;
        const bool decay = cfg.weight_decay != 0.0 && is_weight_param(name);
        for (std::int64_t i = 0; i < p->value.numel(); ++i) {
            double gi = g[i];
            if (decay) gi += cfg.weight_decay * p->value[i];
            m[i] = static_cast<float>(cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi);
            v[i] = static_cast<float>(cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi);
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            p->value[i] -= static_cast<float>(lr * mh / (std::sqrt(vh) + cfg.eps));
        }
    }
}

// Optimizer state <-> flat tensor map, for embedding in checkpoints.
inline std::map<std::string, Tensor> adam_to_records(const AdamState& s) {
    std::map<std::string, Tensor> out;
    Tensor t(Shape{1, 1, 1, 1});
    t[0] = static_cast<float>(s.t);
    out.emplace("opt.t", std::move(t));
    for (const auto& [k, v] : s.m) out.emplace("opt.m." + k, v);
    for (const auto& [k, v] : s.v) out.emplace("opt.v." + k, v);
    return out;
}

inline AdamState adam_from_records(const std::map<std::string, Tensor>& records) {
    AdamState s;
    for (const auto& [k, v] : records) {
        if (k == "opt.t")
            s.t = static_cast<std::int64_t>(v[0]);
        else if (k.rfind("opt.m.", 0) == 0)
            s.m.emplace(k.substr(6), v);
        else if (k.rfind("opt.v.", 0) == 0)
            s.v.emplace(k.substr(6), v);
    }
    return s;
}

// --- preprocessing and augmentation ----------------------------------------

// Mean subtraction; `mean` is a (1,3,1,1) per-channel tensor.
inline Tensor preprocess(const Tensor& image, const Tensor& mean) {
    const Shape& s = image.shape();
    Tensor out(s);
    const std::int64_t plane = s.h * s.w;
    for (std::int64_t n = 0; n < s.n; ++n)
        for (std::int64_t c = 0; c < s.c; ++c) {
            const float mu = mean[c];
            const float* src = image.data() + (n * s.c + c) * plane;
            float* dst = out.data() + (n * s.c + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) dst[i] = src[i] - mu;
        }
    return out;
}

struct AugmentConfig {
    bool enabled = true;
    bool flip = true;
    double scale_min = 0.75;
    double scale_max = 2.0;
    std::int64_t crop_h = 768;
    std::int64_t crop_w = 768;
};

// Random scale + flip + fixed-size crop. Images shorter than the crop are
// padded with the dataset mean; padded label pixels carry the ignore label.
inline Sample augment(const Sample& in, const Tensor& mean, const AugmentConfig& cfg, Rng& rng) {
    Sample out;
    out.name = in.name;
    Tensor img = in.image;
    LabelMap lab = in.label;

    if (cfg.enabled) {
        std::uniform_real_distribution<double> sdist(cfg.scale_min, cfg.scale_max);
        const double s = sdist(rng);
        const auto sh = std::max<std::int64_t>(1, std::llround(in.image.shape().h * s));
        const auto sw = std::max<std::int64_t>(1, std::llround(in.image.shape().w * s));
        img = resize_bilinear(img, sh, sw);
        lab = resize_nearest(lab, sh, sw);
        if (cfg.flip && std::uniform_int_distribution<int>(0, 1)(rng)) {
            Tensor f(img.shape());
            LabelMap fl(lab.h, lab.w);
            for (std::int64_t c = 0; c < 3; ++c)
                for (std::int64_t y = 0; y < img.shape().h; ++y)
                    for (std::int64_t x = 0; x < img.shape().w; ++x)
                        f.at(0, c, y, x) = img.at(0, c, y, img.shape().w - 1 - x);
            for (std::int64_t y = 0; y < lab.h; ++y)
                for (std::int64_t x = 0; x < lab.w; ++x) fl.at(y, x) = lab.at(y, lab.w - 1 - x);
            img = std::move(f);
            lab = std::move(fl);
        }
    }

    const std::int64_t ch = cfg.crop_h, cw = cfg.crop_w;
    Tensor cimg(Shape{1, 3, ch, cw});
    for (std::int64_t c = 0; c < 3; ++c)
        for (std::int64_t i = 0; i < ch * cw; ++i) cimg.data()[c * ch * cw + i] = mean[c];
    LabelMap clab(ch, cw, kIgnoreLabel);

    const std::int64_t ph = std::min(ch, img.shape().h);
    const std::int64_t pw = std::min(cw, img.shape().w);
    std::int64_t oy = 0, ox = 0;
    if (cfg.enabled) {
        if (img.shape().h > ch)
            oy = std::uniform_int_distribution<std::int64_t>(0, img.shape().h - ch)(rng);
        if (img.shape().w > cw)
            ox = std::uniform_int_distribution<std::int64_t>(0, img.shape().w - cw)(rng);
    }
    for (std::int64_t c = 0; c < 3; ++c)
        for (std::int64_t y = 0; y < ph; ++y)
            for (std::int64_t x = 0; x < pw; ++x)
                cimg.at(0, c, y, x) = img.at(0, c, oy + y, ox + x);
    for (std::int64_t y = 0; y < ph; ++y)
        for (std::int64_t x = 0; x < pw; ++x) clab.at(y, x) = lab.at(oy + y, ox + x);

    out.image = std::move(cimg);
    out.label = std::move(clab);
    return out;
}

// --- evaluation ------------------------------------------------------------

inline IoUResult evaluate(Model& model, const std::vector<Sample>& samples) {
    if (samples.empty()) throw DataError("evaluate: empty dataset");
    const Tensor& mean = model.store.buffer("input.mean");
    ConfusionMatrix cm(model.spec.classes);
    for (const auto& s : samples) {
        const Tensor x = preprocess(s.image, mean);
        auto logits = forward(model, x, Mode::Eval);
        accumulate(cm, s.label, argmax_labels(logits->value));
    }
    return miou(cm);
}

// --- training loop ---------------------------------------------------------

struct TrainConfig {
    int epochs = 1;
    int batch = 8;
    double lr = 5e-4;
    int warmup = 5;
    AdamConfig adam;
    AugmentConfig aug;
    std::uint64_t seed = 0;
    int log_every = 1;       // epochs between progress lines
    int val_every = 0;       // 0: only after the final epoch
};

struct TrainResult {
    double final_loss = 0.0;
    double val_miou = -1.0;  // -1 when no validation set was supplied
    int steps = 0;
};

// One-network Adam training with the cosine schedule stepped per epoch.
// Throws TrainingError on a non-finite loss (divergence guard).
inline TrainResult fit(Model& model, const std::vector<Sample>& train,
                       const std::vector<Sample>& val, const TrainConfig& cfg, std::ostream& log) {
    if (train.empty()) throw DataError("fit: empty training set");
    if (cfg.epochs < 1) throw ConfigError("fit: epochs must be >= 1");
    if (cfg.batch < 1) throw ConfigError("fit: batch must be >= 1");

    // Dataset statistics ride along with the model so inference uses the
    // same normalization.
    const Tensor mean = dataset_mean(train);
    if (!model.store.buffers.count("input.mean")) model.store.buffer_order.push_back("input.mean");
    model.store.buffers["input.mean"] = mean;

    const ScheduleConfig sched{cfg.lr, cfg.epochs, cfg.warmup};
    AdamState opt;
    Rng shuffle_rng = substream(cfg.seed, "shuffle");
    Rng aug_rng = substream(cfg.seed, "augment");
    Rng drop_rng = substream(cfg.seed, "dropout");

    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    TrainResult res;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_at(sched, epoch);
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double epoch_loss = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch)) {
            const std::size_t stop =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
            const std::int64_t bn = static_cast<std::int64_t>(stop - start);
            Tensor batch(Shape{bn, 3, cfg.aug.crop_h, cfg.aug.crop_w});
            std::vector<std::int32_t> labels(
                static_cast<std::size_t>(bn * cfg.aug.crop_h * cfg.aug.crop_w));
            for (std::int64_t b = 0; b < bn; ++b) {
                Sample s = augment(train[order[start + static_cast<std::size_t>(b)]], mean,
                                   cfg.aug, aug_rng);
                const Tensor x = preprocess(s.image, mean);
                std::copy(x.data(), x.data() + x.numel(),
                          batch.data() + b * 3 * cfg.aug.crop_h * cfg.aug.crop_w);
                std::copy(s.label.v.begin(), s.label.v.end(),
                          labels.begin() + b * cfg.aug.crop_h * cfg.aug.crop_w);
            }

            model.store.zero_grad();
            ops::OpCtx ctx;
            ctx.record = true;
            ctx.train = true;
            ctx.rng = &drop_rng;
            auto logits = forward_graph(model.graph, model.store,
                                        {leaf<float>(batch)}, ctx);
            auto loss = ops::cross_entropy_loss(ctx, logits, labels, kIgnoreLabel);
            const double lv = loss->value[0];
            if (!std::isfinite(lv))
                throw TrainingError("non-finite loss at epoch " + std::to_string(epoch));
            backward(loss);
            logits.reset();
            loss.reset();
            adam_step(model.store, model.store.gradients(), opt, cfg.adam, lr);
            epoch_loss += lv;
            ++batches;
            ++res.steps;
        }
        res.final_loss = epoch_loss / std::max(1, batches);
        if (cfg.log_every > 0 && (epoch % cfg.log_every == 0 || epoch + 1 == cfg.epochs))
            log << "epoch " << epoch + 1 << "/" << cfg.epochs << "  lr " << lr << "  loss "
                << res.final_loss << "\n";
        if (!val.empty() && cfg.val_every > 0 && (epoch + 1) % cfg.val_every == 0) {
            res.val_miou = evaluate(model, val).mean;
            log << "  val mIoU " << res.val_miou << "\n";
        }
    }
    if (!val.empty() && res.val_miou < 0) {
        res.val_miou = evaluate(model, val).mean;
        log << "final val mIoU " << res.val_miou << "\n";
    }
    return res;
}

}  // namespace ddp
