#include "ssg/training.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <string>

#include "ssg/error.hpp"
#include "ssg/rng.hpp"

namespace ssg::training {
namespace {

using dit::ModelConfig;
using dit::Params;
using dit::ParamGroup;
using features::Point;

constexpr double kBlobSigmaCells = 1.0;
constexpr double kBlobAmp = 0.3;
constexpr double kDriftPerFrame = 0.05;
constexpr double kSceneBlobSigmaPx = 1.5;
constexpr std::uint32_t kSceneSize = dit::kVisualImage;

constexpr std::array<Point, 9> kAnchors = {{
    {1.0 / 6, 1.0 / 6}, {0.5, 1.0 / 6}, {5.0 / 6, 1.0 / 6},
    {1.0 / 6, 0.5},     {0.5, 0.5},     {5.0 / 6, 0.5},
    {1.0 / 6, 5.0 / 6}, {0.5, 5.0 / 6}, {5.0 / 6, 5.0 / 6},
}};

LatentClip normal_clip(const LatentClip& like, SplitMix64& rng) {
    LatentClip out(like.frames, like.height, like.width, like.channels);
    for (auto& v : out.values) v = static_cast<float>(rng.normal());
    return out;
}

template <typename T>
struct ConditionInput {
    std::uint32_t caption = 0;
    bool use_text = true;
    Mat<T> patches;
};

// Loss of one example; accumulates scale * dLoss/dParams when grads != null.
template <typename T>
T example_loss(const SsgDitModel<T>& model, const Mat<T>& raw_zt, std::uint32_t t, const Mat<T>& eps_raw,
               const ConditionInput<T>* cond, dit::Params<T>* grads, T scale) {
    Mat<T> text, visual, fused;
    dit::VisualCache<T> vcache;
    if (cond) {
        if (cond->use_text) text = model.text_tokens(cond->caption);
        visual = model.encode_visual_patches(cond->patches, grads ? &vcache : nullptr);
        fused = dit::fuse_conditions(text, visual);
    }
    dit::ForwardCache<T> cache;
    const Mat<T> out = model.forward_tokens(raw_zt, t, cond ? &fused : nullptr, grads ? &cache : nullptr);
    const Mat<T> diff = out - eps_raw;
    const T n = static_cast<T>(diff.size());
    const T loss = diff.squaredNorm() / n;
    if (grads) {
        const Mat<T> d_out = diff * (T(2) * scale / n);
        Mat<T> d_cond;
        model.backward(cache, cond ? &fused : nullptr, d_out, *grads, cond ? &d_cond : nullptr);
        if (cond) {
            const auto n_text = text.rows();
            if (n_text > 0) model.backward_text(cond->caption, d_cond.topRows(n_text), *grads);
            model.backward_visual(vcache, d_cond.bottomRows(visual.rows()), *grads);
        }
    }
    return loss;
}

bool updatable(const SsgDitModel<float>& model, const std::string& name, ParamGroup group, Phase phase) {
    if (model.is_frozen(name)) return false;
    return phase == Phase::Adapter || group == ParamGroup::Backbone;
}

}  // namespace

// ---------------------------------------------------------------------------

NoiseSchedule NoiseSchedule::linear(std::uint32_t T, double beta_start, double beta_end) {
    if (T < 1) throw ValidationError("noise schedule: T must be >= 1");
    NoiseSchedule s;
    s.T = T;
    s.betas.resize(T);
    s.alphas.resize(T);
    s.alpha_bars.resize(T);
    double prod = 1.0;
    for (std::uint32_t t = 0; t < T; ++t) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(t) / (T - 1);
        s.betas[t] = beta_start + (beta_end - beta_start) * frac;
        s.alphas[t] = 1.0 - s.betas[t];
        prod *= s.alphas[t];
        s.alpha_bars[t] = prod;
    }
    s.validate();
    return s;
}

void NoiseSchedule::validate() const {
    if (T < 1 || betas.size() != T || alphas.size() != T || alpha_bars.size() != T)
        throw ValidationError("noise schedule: table sizes must equal T");
    for (std::uint32_t t = 0; t < T; ++t) {
        if (!(betas[t] > 0.0 && betas[t] < 1.0)) throw ValidationError("noise schedule: beta outside (0,1)");
        if (t > 0 && !(betas[t] > betas[t - 1])) throw ValidationError("noise schedule: betas must increase");
    }
}

LatentClip forward_noise(const LatentClip& z0, std::uint32_t t, const LatentClip& eps, const NoiseSchedule& schedule) {
    if (!z0.same_shape(eps)) throw ValidationError("forward_noise: noise shape does not match the latent");
    if (t >= schedule.T) throw ValidationError("forward_noise: timestep outside the schedule");
    const double a = std::sqrt(schedule.alpha_bars[t]);
    const double b = std::sqrt(1.0 - schedule.alpha_bars[t]);
    LatentClip out = z0;
    for (std::size_t i = 0; i < out.values.size(); ++i)
        out.values[i] = static_cast<float>(a * z0.values[i] + b * eps.values[i]);
    return out;
}

// ---------------------------------------------------------------------------

std::span<const Point> anchors() { return kAnchors; }

std::uint32_t caption_for_anchor(Point p) {
    for (std::uint32_t k = 0; k < kAnchors.size(); ++k)
        if (std::abs(kAnchors[k].x - p.x) < 1e-9 && std::abs(kAnchors[k].y - p.y) < 1e-9) return k;
    throw ValidationError("point is not an anchor");
}

LatentClip render_clip(const ModelConfig& cfg, Point center, Point drift) {
    static constexpr double kChannelAmp[] = {1.0, 0.5, -0.5, 0.25};
    LatentClip clip(cfg.L, cfg.H, cfg.W, cfg.C);
    for (std::uint32_t f = 0; f < cfg.L; ++f) {
        const double cx = (center.x + f * drift.x) * cfg.W;
        const double cy = (center.y + f * drift.y) * cfg.H;
        for (std::uint32_t i = 0; i < cfg.H; ++i)
            for (std::uint32_t j = 0; j < cfg.W; ++j) {
                const double dx = j + 0.5 - cx;
                const double dy = i + 0.5 - cy;
                const double g = std::exp(-(dx * dx + dy * dy) / (2.0 * kBlobSigmaCells * kBlobSigmaCells));
                for (std::uint32_t c = 0; c < cfg.C; ++c)
                    clip.at(f, i, j, c) = static_cast<float>(kBlobAmp * kChannelAmp[c % 4] * g);
            }
    }
    return clip;
}

prompting::Image render_scene() {
    prompting::Image img(kSceneSize, kSceneSize, 1);
    for (std::uint32_t i = 0; i < kSceneSize; ++i)
        for (std::uint32_t j = 0; j < kSceneSize; ++j) {
            double peak = 0.0;
            for (const auto& a : kAnchors) {
                const double dx = j + 0.5 - a.x * kSceneSize;
                const double dy = i + 0.5 - a.y * kSceneSize;
                peak = std::max(peak, std::exp(-(dx * dx + dy * dy) / (2.0 * kSceneBlobSigmaPx * kSceneBlobSigmaPx)));
            }
            img.at(i, j) = static_cast<float>(0.1 + 0.8 * peak);
        }
    return img;
}

prompting::Image anchor_prompt(Point center, std::uint64_t bundle_seed, const DataOptions& opts) {
    static const prompting::Image scene = render_scene();
    const auto bundle = features::synth_bundle(bundle_seed, 24, 24, 16, kSceneSize, kSceneSize, center);
    prompting::PromptParams params;
    params.branches = opts.branches;
    return prompting::make_prompt(scene, bundle, params).prompt;
}

std::vector<SyntheticSample> gen_dataset(std::uint64_t seed, std::size_t n, const ModelConfig& cfg,
                                         const DataOptions& opts) {
    if (n < 1) throw ValidationError("gen_dataset: n must be >= 1");
    cfg.validate();
    SplitMix64 rng(seed);
    std::vector<SyntheticSample> out;
    out.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
        SyntheticSample s;
        s.caption_id = static_cast<std::uint32_t>(rng.below(kAnchors.size()));
        s.blob_center = kAnchors[s.caption_id];
        s.drift = {kDriftPerFrame * rng.symmetric(), kDriftPerFrame * rng.symmetric()};
        const std::uint64_t bundle_seed = rng.next();
        s.clip = render_clip(cfg, s.blob_center, s.drift);
        s.prompt_image = anchor_prompt(s.blob_center, bundle_seed, opts);
        out.push_back(std::move(s));
    }
    return out;
}

Point blob_centroid(const LatentClip& clip, std::uint32_t frame) {
    if (frame >= clip.frames) throw ValidationError("blob_centroid: frame out of range");
    double sw = 0.0, sx = 0.0, sy = 0.0;
    for (std::uint32_t i = 0; i < clip.height; ++i)
        for (std::uint32_t j = 0; j < clip.width; ++j) {
            const double v = std::max(0.0, static_cast<double>(clip.at(frame, i, j, 0)));
            const double w = v * v * v * v;
            sw += w;
            sx += w * (j + 0.5);
            sy += w * (i + 0.5);
        }
    if (sw <= 0.0) return {0.5, 0.5};
    return {sx / sw / clip.width, sy / sw / clip.height};
}

double pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) throw ValidationError("pearson: need two equal-length series");
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx <= 0.0 || syy <= 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------------------

double default_lr(Phase phase) { return phase == Phase::Backbone ? 0.3 : 2.0; }

void TrainConfig::validate() const {
    if (steps < 1 || batch < 1 || T < 1) throw ValidationError("train config: counts must be positive");
    if (!(effective_lr() >= 0.0)) throw ValidationError("train config: lr must be >= 0");
}

ValidationSet make_validation_set(std::uint64_t seed, std::size_t n, const ModelConfig& cfg, const DataOptions& opts) {
    ValidationSet v;
    v.samples = gen_dataset(seed, n, cfg, opts);
    SplitMix64 rng(seed ^ 0x5DEECE66DULL);
    for (const auto& s : v.samples) {
        v.steps.push_back(static_cast<std::uint32_t>(rng.below(cfg.T)));
        v.noise.push_back(normal_clip(s.clip, rng));
    }
    return v;
}

Mat<float> build_condition(const SsgDitModel<float>& model, std::uint32_t caption_id, const prompting::Image& prompt,
                           ConditionMode mode) {
    Mat<float> text;
    if (mode == ConditionMode::TextAndVisual) text = model.text_tokens(caption_id);
    return dit::fuse_conditions(text, model.encode_visual(prompt));
}

double loss_and_grad(const SsgDitModel<float>& model, std::span<const Example> batch, const NoiseSchedule& schedule,
                     bool use_adapter, ConditionMode mode, Params<float>* grads) {
    if (batch.empty()) throw ValidationError("loss_and_grad: empty batch");
    const auto& cfg = model.config();
    const float scale = 1.0f / static_cast<float>(batch.size());
    double total = 0.0;
    for (const auto& ex : batch) {
        const LatentClip zt = forward_noise(ex.sample->clip, ex.t, ex.eps, schedule);
        const Mat<float> raw = dit::patchify(zt, cfg.patch);
        const Mat<float> eps_raw = dit::patchify(ex.eps, cfg.patch);
        ConditionInput<float> cond;
        if (use_adapter) {
            cond.caption = ex.sample->caption_id;
            cond.use_text = mode == ConditionMode::TextAndVisual;
            cond.patches = dit::visual_patches(ex.sample->prompt_image);
        }
        total += example_loss<float>(model, raw, ex.t, eps_raw, use_adapter ? &cond : nullptr, grads, scale);
    }
    return total / static_cast<double>(batch.size());
}

double apply_sgd(SsgDitModel<float>& model, const Params<float>& grads, double lr, Phase phase) {
    double sq = 0.0;
    std::vector<std::pair<Mat<float>*, const Mat<float>*>> updates;
    visit_tensors(
        [&](const std::string& name, ParamGroup group, Mat<float>& p, const Mat<float>& g) {
            if (!updatable(model, name, group, phase)) return;
            sq += g.template cast<double>().squaredNorm();
            updates.emplace_back(&p, &g);
        },
        model.params(), grads);
    const auto step = static_cast<float>(lr);
    for (auto [p, g] : updates) *p -= step * *g;
    return std::sqrt(sq);
}

TrainReport train(SsgDitModel<float>& model, const std::vector<SyntheticSample>& data, const TrainConfig& cfg,
                  const ValidationSet* val, const std::function<void(std::uint32_t, double)>& progress) {
    cfg.validate();
    if (data.empty()) throw ValidationError("train: empty dataset");
    if (cfg.T != model.config().T) throw ConfigError("train: schedule length differs from the model's T");
    if (cfg.phase == Phase::Adapter && !model.backbone_frozen())
        throw ConfigError("train: adapter phase requires a pretrained, frozen backbone");
    const NoiseSchedule schedule = cfg.schedule();
    const bool use_adapter = cfg.phase == Phase::Adapter;
    const double lr = cfg.effective_lr();

    TrainReport report;
    report.backbone_checksum_before = model.backbone_checksum();
    SplitMix64 rng(cfg.seed);
    std::vector<Example> batch(cfg.batch);

    for (std::uint32_t step = 0; step < cfg.steps; ++step) {
        for (auto& ex : batch) {
            ex.sample = &data[rng.below(data.size())];
            ex.t = static_cast<std::uint32_t>(rng.below(schedule.T));
            ex.eps = normal_clip(ex.sample->clip, rng);
        }
        Params<float> grads = dit::zero_params<float>(model.config());
        const double loss = loss_and_grad(model, batch, schedule, use_adapter, cfg.condition, &grads);
        if (!std::isfinite(loss))
            throw DivergenceError("train: non-finite loss at step " + std::to_string(step), step);
        const double gnorm = apply_sgd(model, grads, lr, cfg.phase);
        report.loss.push_back(loss);
        report.grad_norm.push_back(gnorm);
        if (val && cfg.val_every > 0 && step >= cfg.val_start && (step + 1) % cfg.val_every == 0)
            report.val_loss.emplace_back(step, validation_loss(model, *val, cfg.condition, use_adapter));
        if (progress) progress(step, loss);
    }
    if (cfg.phase == Phase::Backbone) model.freeze_backbone();
    report.backbone_checksum_after = model.backbone_checksum();
    return report;
}

double validation_loss(const SsgDitModel<float>& model, const ValidationSet& val, ConditionMode mode,
                       bool use_adapter) {
    std::vector<Example> batch(val.samples.size());
    for (std::size_t i = 0; i < batch.size(); ++i) batch[i] = {&val.samples[i], val.steps[i], val.noise[i]};
    NoiseSchedule schedule = NoiseSchedule::linear(model.config().T);
    return loss_and_grad(model, batch, schedule, use_adapter, mode, nullptr);
}

double tail_val_loss(const TrainReport& report, std::uint32_t steps, std::uint32_t window) {
    const std::uint32_t start = steps > window ? steps - window : 0;
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& [step, loss] : report.val_loss)
        if (step >= start) {
            sum += loss;
            ++n;
        }
    if (n == 0) throw ValidationError("tail_val_loss: no validation losses in the window");
    return sum / static_cast<double>(n);
}

void write_report_csv(const TrainReport& report, std::ostream& out) {
    out << "step,loss,grad_norm\n";
    out << std::setprecision(9);
    for (std::size_t i = 0; i < report.loss.size(); ++i)
        out << i << ',' << report.loss[i] << ',' << report.grad_norm[i] << '\n';
}

// ---------------------------------------------------------------------------

LatentClip sample(const SsgDitModel<float>& model, const Mat<float>* cond, const NoiseSchedule& schedule,
                  std::uint64_t seed) {
    const auto& cfg = model.config();
    if (schedule.T != cfg.T) throw ValidationError("sample: schedule length differs from the model's T");
    SplitMix64 rng(seed);
    LatentClip x(cfg.L, cfg.H, cfg.W, cfg.C);
    for (auto& v : x.values) v = static_cast<float>(rng.normal());

    for (std::uint32_t t = cfg.T; t-- > 0;) {
        const LatentClip eps = dit::dit_forward<float>(x, t, cond, model);
        const double abar = schedule.alpha_bars[t];
        const double abar_prev = t > 0 ? schedule.alpha_bars[t - 1] : 1.0;
        const double beta = schedule.betas[t];
        const double c0 = beta * std::sqrt(abar_prev) / (1.0 - abar);
        const double ct = (1.0 - abar_prev) * std::sqrt(schedule.alphas[t]) / (1.0 - abar);
        const double sigma = std::sqrt(beta * (1.0 - abar_prev) / (1.0 - abar));
        for (std::size_t i = 0; i < x.values.size(); ++i) {
            const double x0 =
                std::clamp((x.values[i] - std::sqrt(1.0 - abar) * eps.values[i]) / std::sqrt(abar), -1.0, 1.0);
            double next = c0 * x0 + ct * x.values[i];
            if (t > 0) next += sigma * rng.normal();
            x.values[i] = static_cast<float>(next);
        }
    }
    return x;
}

Controllability evaluate_controllability(const SsgDitModel<float>& model, const NoiseSchedule& schedule,
                                         const ControlEvalOptions& opts) {
    Controllability out;
    std::vector<double> tx, ty, cx, cy;
    for (std::uint32_t k = 0; k < kAnchors.size(); ++k) {
        const auto prompt = anchor_prompt(kAnchors[k], opts.bundle_seed, opts.data);
        const Mat<float> cond = build_condition(model, k, prompt, opts.condition);
        for (std::uint32_t s = 0; s < opts.seeds_per_anchor; ++s) {
            const LatentClip clip = sample(model, &cond, schedule, opts.seed + 1000 * k + s);
            const Point c = blob_centroid(clip, 0);
            out.targets.push_back(kAnchors[k]);
            out.centroids.push_back(c);
            tx.push_back(kAnchors[k].x);
            ty.push_back(kAnchors[k].y);
            cx.push_back(c.x);
            cy.push_back(c.y);
        }
    }
    out.r_x = pearson(tx, cx);
    out.r_y = pearson(ty, cy);
    return out;
}

// ---------------------------------------------------------------------------

double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), 1e-8);
}

ModelConfig gradcheck_config() {
    ModelConfig c;
    c.L = 2;
    c.H = 4;
    c.W = 4;
    c.C = 2;
    c.patch = {1, 2, 2};
    c.D = 8;
    c.heads = 2;
    c.blocks = 1;
    c.ffn_mult = 2;
    c.d_cond = 8;
    c.n_text_tokens = 2;
    c.T = 10;
    c.n_captions = 2;
    return c;
}

namespace {

// Central differences over every tensor of `params`, compared with `analytic`.
template <typename LossFn>
GradcheckReport compare_gradients(Params<double>& params, const Params<double>& analytic, LossFn&& loss,
                                  const GradcheckOptions& opts) {
    GradcheckReport report;
    visit_tensors(
        [&](const std::string& name, ParamGroup, Mat<double>& p, const Mat<double>& g) {
            GradcheckEntry e{name, 0.0, static_cast<std::size_t>(p.size())};
            const double factor = name == opts.corrupt_tensor ? opts.corrupt_factor : 1.0;
            for (std::int64_t i = 0; i < p.size(); ++i) {
                const double orig = p.data()[i];
                p.data()[i] = orig + opts.step;
                const double up = loss();
                p.data()[i] = orig - opts.step;
                const double down = loss();
                p.data()[i] = orig;
                const double numeric = (up - down) / (2.0 * opts.step);
                e.max_rel_err = std::max(e.max_rel_err, relative_error(factor * g.data()[i], numeric));
            }
            report.max_rel_err = std::max(report.max_rel_err, e.max_rel_err);
            report.tensors.push_back(std::move(e));
        },
        params, analytic);
    return report;
}

}  // namespace

GradcheckReport gradcheck(std::uint64_t seed, const GradcheckOptions& opts) {
    const ModelConfig cfg = gradcheck_config();
    SsgDitModel<double> model(cfg, seed);
    SplitMix64 rng(seed ^ 0xA5A5A5A5ULL);
    // Non-zero adapter output projection and biases so every tensor carries
    // a non-trivial gradient.
    visit_tensors(
        [&](const std::string& name, ParamGroup, Mat<double>& m) {
            if (name.find("adapter.wo") != std::string::npos || name.find(".b") != std::string::npos ||
                name.find("norm") != std::string::npos)
                for (std::int64_t i = 0; i < m.size(); ++i) m.data()[i] += 0.3 * rng.normal();
        },
        model.params());

    LatentClip z0(cfg.L, cfg.H, cfg.W, cfg.C), eps(cfg.L, cfg.H, cfg.W, cfg.C);
    for (auto& v : z0.values) v = static_cast<float>(rng.symmetric());
    for (auto& v : eps.values) v = static_cast<float>(rng.normal());
    prompting::Image prompt(dit::kVisualImage, dit::kVisualImage, 1);
    for (auto& v : prompt.values) v = static_cast<float>(rng.uniform());

    const std::uint32_t t = static_cast<std::uint32_t>(rng.below(cfg.T));
    const NoiseSchedule schedule = NoiseSchedule::linear(cfg.T);
    const Mat<double> raw = dit::patchify(forward_noise(z0, t, eps, schedule), cfg.patch).cast<double>();
    const Mat<double> eps_raw = dit::patchify(eps, cfg.patch).cast<double>();
    ConditionInput<double> cond;
    cond.caption = 1;
    cond.patches = dit::visual_patches(prompt).cast<double>();

    Params<double> analytic = dit::zero_params<double>(cfg);
    example_loss<double>(model, raw, t, eps_raw, &cond, &analytic, 1.0);
    auto loss = [&] { return example_loss<double>(model, raw, t, eps_raw, &cond, nullptr, 1.0); };
    return compare_gradients(model.params(), analytic, loss, opts);
}

GradcheckReport gradcheck_linear(std::uint64_t seed, const GradcheckOptions& opts) {
    SplitMix64 rng(seed);
    Mat<double> x(5, 4), y(5, 3), w(4, 3);
    for (auto* m : {&x, &y, &w})
        for (std::int64_t i = 0; i < m->size(); ++i) m->data()[i] = rng.normal();
    auto loss = [&] { return 0.5 * (x * w - y).squaredNorm(); };
    const Mat<double> grad = x.transpose() * (x * w - y);

    GradcheckReport report;
    GradcheckEntry e{"linear.w", 0.0, static_cast<std::size_t>(w.size())};
    const double factor = opts.corrupt_tensor == e.name ? opts.corrupt_factor : 1.0;
    for (std::int64_t i = 0; i < w.size(); ++i) {
        const double orig = w.data()[i];
        w.data()[i] = orig + opts.step;
        const double up = loss();
        w.data()[i] = orig - opts.step;
        const double down = loss();
        w.data()[i] = orig;
        e.max_rel_err = std::max(e.max_rel_err, relative_error(factor * grad.data()[i], (up - down) / (2 * opts.step)));
    }
    report.max_rel_err = e.max_rel_err;
    report.tensors.push_back(e);
    return report;
}

}  // namespace ssg::training
