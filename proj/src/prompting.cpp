#include "ssg/prompting.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ssg/error.hpp"

namespace ssg::prompting {
namespace {

std::string dims(std::uint32_t h, std::uint32_t w) {
    return std::to_string(h) + "x" + std::to_string(w);
}

void check_finite(const ScoreMask& m, const char* op) {
    for (float v : m.values)
        if (!std::isfinite(v)) throw ValidationError(std::string(op) + ": non-finite mask value");
}

void check_unit_range(const ScoreMask& m, const char* op) {
    for (float v : m.values)
        if (!(v >= 0.0f && v <= 1.0f))
            throw ValidationError(std::string(op) + ": mask value outside [0,1]");
}

double cubic_weight(double x) {
    constexpr double a = -0.5;
    x = std::abs(x);
    if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
    if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
    return 0.0;
}

// Reflect-101 index folding (d c b | a b c d | c b a).
std::int64_t reflect(std::int64_t i, std::int64_t n) {
    if (n == 1) return 0;
    const std::int64_t period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

struct Tap {
    std::int64_t index;
    double weight;
};

// Per-output-index taps for one axis of the cubic resampler. The first tap is
// the anchor sample; the resampler accumulates weighted differences from it.
std::vector<std::vector<Tap>> cubic_taps(std::uint32_t in, std::uint32_t out) {
    std::vector<std::vector<Tap>> taps(out);
    const double scale = static_cast<double>(in) / out;
    for (std::uint32_t d = 0; d < out; ++d) {
        const double src = (d + 0.5) * scale - 0.5;
        const double fl = std::floor(src);
        const double t = src - fl;
        const auto i0 = static_cast<std::int64_t>(fl);
        auto clamp = [&](std::int64_t i) { return std::clamp<std::int64_t>(i, 0, in - 1); };
        taps[d] = {{clamp(i0), cubic_weight(t)},
                   {clamp(i0 - 1), cubic_weight(1.0 + t)},
                   {clamp(i0 + 1), cubic_weight(1.0 - t)},
                   {clamp(i0 + 2), cubic_weight(2.0 - t)}};
    }
    return taps;
}

// out = x[anchor] + sum_k w_k (x[k] - x[anchor]). With weights summing to one
// this is the ordinary weighted sum, but constants and the zero-offset
// identity case come out bit-exact.
template <typename Get>
double anchored_sum(const std::vector<Tap>& taps, Get&& get) {
    const double base = get(taps.front().index);
    double acc = 0.0;
    for (std::size_t k = 1; k < taps.size(); ++k) acc += taps[k].weight * (get(taps[k].index) - base);
    return base + acc;
}

struct Span1d {
    std::uint32_t first;
    std::vector<double> weights;
};

std::vector<Span1d> area_spans(std::uint32_t in, std::uint32_t out) {
    std::vector<Span1d> spans(out);
    const double scale = static_cast<double>(in) / out;
    for (std::uint32_t d = 0; d < out; ++d) {
        const double lo = d * scale;
        const double hi = (d + 1) * scale;
        const auto first = static_cast<std::uint32_t>(std::floor(lo));
        const auto last = std::min<std::uint32_t>(in - 1, static_cast<std::uint32_t>(std::ceil(hi)) - 1);
        spans[d].first = first;
        double total = 0.0;
        for (std::uint32_t s = first; s <= last; ++s) {
            const double overlap = std::min(hi, s + 1.0) - std::max(lo, double(s));
            spans[d].weights.push_back(std::max(0.0, overlap));
            total += spans[d].weights.back();
        }
        for (auto& w : spans[d].weights) w /= total;
    }
    return spans;
}

}  // namespace

ScoreMask::ScoreMask(std::uint32_t h_, std::uint32_t w_, float fill)
    : h(h_), w(w_), values(std::size_t{h_} * w_, fill) {
    if (h < 1 || w < 1) throw ValidationError("score mask dimensions must be >= 1");
}

ScoreMask::ScoreMask(std::uint32_t h_, std::uint32_t w_, std::vector<float> v)
    : h(h_), w(w_), values(std::move(v)) {
    if (h < 1 || w < 1) throw ValidationError("score mask dimensions must be >= 1");
    if (values.size() != std::size_t{h} * w)
        throw ValidationError("score mask: value count does not match " + dims(h, w));
}

GuidanceMask::GuidanceMask(std::uint32_t h, std::uint32_t w, std::vector<float> v)
    : h_(h), w_(w), values_(std::move(v)) {
    if (h < 1 || w < 1) throw ValidationError("guidance mask dimensions must be >= 1");
    if (values_.size() != std::size_t{h} * w)
        throw ValidationError("guidance mask: value count does not match " + dims(h, w));
    for (float x : values_)
        if (!(x >= 0.0f && x <= 1.0f)) throw ValidationError("guidance mask value outside [0,1]");
}

GuidanceMask GuidanceMask::filled(std::uint32_t h, std::uint32_t w, float alpha) {
    return GuidanceMask(h, w, std::vector<float>(std::size_t{h} * w, alpha));
}

Image::Image(std::uint32_t h_, std::uint32_t w_, std::uint32_t c_, float fill)
    : h(h_), w(w_), channels(c_), values(std::size_t{h_} * w_ * c_, fill) {
    validate(*this);
}

void validate(const Image& img) {
    if (img.h < 1 || img.w < 1) throw ValidationError("image dimensions must be >= 1");
    if (img.channels != 1 && img.channels != 3)
        throw ValidationError("image must have 1 or 3 channels");
    if (img.values.size() != std::size_t{img.h} * img.w * img.channels)
        throw ValidationError("image: value count does not match dimensions");
    for (float v : img.values)
        if (!(v >= 0.0f && v <= 1.0f)) throw ValidationError("image value outside [0,1]");
}

double PromptParams::resolved_sigma(std::uint32_t h, std::uint32_t w) const {
    if (blur_sigma) return *blur_sigma;
    return std::max(3.0, 0.02 * std::min(h, w));
}

void validate(const PromptParams& p) {
    if (!(p.gamma > 0.0)) throw ValidationError("prompt params: gamma must be > 0");
    if (p.blur_sigma && !(*p.blur_sigma > 0.0))
        throw ValidationError("prompt params: blur sigma must be > 0");
    if (!(p.eps > 0.0)) throw ValidationError("prompt params: eps must be > 0");
}

std::vector<float> l2_normalize(std::span<const float> v, double eps) {
    double s = 0.0;
    for (float x : v) s += double{x} * x;
    const double norm = std::sqrt(s);
    if (!(norm > eps)) throw DegenerateInputError("l2_normalize: vector norm is (near) zero");
    std::vector<float> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] / norm);
    return out;
}

std::pair<ScoreMask, ScoreMask> response_masks(const features::FeatureBundle& bundle) {
    features::validate(bundle);
    ScoreMask attn(bundle.grid_h, bundle.grid_w), mlp(bundle.grid_h, bundle.grid_w);
    const std::size_t d = bundle.d_e;
    for (std::size_t cell = 0; cell < bundle.cells(); ++cell) {
        double sa = 0.0, sm = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            sa += double{bundle.attn_feats[cell * d + k]} * bundle.text_embed[k];
            sm += double{bundle.mlp_feats[cell * d + k]} * bundle.text_embed[k];
        }
        attn.values[cell] = static_cast<float>(sa);
        mlp.values[cell] = static_cast<float>(sm);
    }
    return {std::move(attn), std::move(mlp)};
}

ScoreMask minmax_normalize(const ScoreMask& m, double eps) {
    check_finite(m, "minmax_normalize");
    const auto [lo_it, hi_it] = std::minmax_element(m.values.begin(), m.values.end());
    const double lo = *lo_it;
    const double range = double{*hi_it} - lo;
    ScoreMask out(m.h, m.w);
    if (range < eps) {
        std::fill(out.values.begin(), out.values.end(), 0.5f);
        return out;
    }
    for (std::size_t i = 0; i < m.size(); ++i)
        out.values[i] = static_cast<float>((m.values[i] - lo) / range);
    return out;
}

ScoreMask enhance(const ScoreMask& m, double gamma) {
    if (!(gamma > 0.0)) throw ValidationError("enhance: gamma must be > 0");
    check_unit_range(m, "enhance");
    ScoreMask out(m.h, m.w);
    for (std::size_t i = 0; i < m.size(); ++i)
        out.values[i] = static_cast<float>(std::pow(double{m.values[i]}, gamma));
    return out;
}

ScoreMask inverse_normalize(const ScoreMask& m, double eps) {
    ScoreMask out = minmax_normalize(m, eps);
    for (auto& v : out.values) v = 1.0f - v;
    return out;
}

ScoreMask avg_pool_3x3(const ScoreMask& m) {
    check_finite(m, "avg_pool_3x3");
    ScoreMask out(m.h, m.w);
    const auto last_i = static_cast<std::int64_t>(m.h) - 1;
    const auto last_j = static_cast<std::int64_t>(m.w) - 1;
    for (std::int64_t i = 0; i <= last_i; ++i) {
        for (std::int64_t j = 0; j <= last_j; ++j) {
            double s = 0.0;
            for (std::int64_t di = -1; di <= 1; ++di)
                for (std::int64_t dj = -1; dj <= 1; ++dj)
                    s += m.at(static_cast<std::uint32_t>(std::clamp<std::int64_t>(i + di, 0, last_i)),
                              static_cast<std::uint32_t>(std::clamp<std::int64_t>(j + dj, 0, last_j)));
            out.at(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j)) =
                static_cast<float>(s / 9.0);
        }
    }
    return out;
}

ScoreMask prob_or(const ScoreMask& a, const ScoreMask& b) {
    if (a.h != b.h || a.w != b.w)
        throw ValidationError("prob_or: shape mismatch " + dims(a.h, a.w) + " vs " + dims(b.h, b.w));
    check_unit_range(a, "prob_or");
    check_unit_range(b, "prob_or");
    ScoreMask out(a.h, a.w);
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a.values[i];
        const double y = b.values[i];
        out.values[i] = static_cast<float>(x + y - x * y);
    }
    return out;
}

ScoreMask fuse_guidance(const ScoreMask& m_attn, const ScoreMask& m_mlp, const PromptParams& params) {
    validate(params);
    if (m_attn.h != m_mlp.h || m_attn.w != m_mlp.w)
        throw ValidationError("fuse_guidance: shape mismatch " + dims(m_attn.h, m_attn.w) + " vs " +
                              dims(m_mlp.h, m_mlp.w));
    auto maybe_pool = [&](ScoreMask m) { return params.pool ? avg_pool_3x3(m) : m; };

    const ScoreMask zero(m_attn.h, m_attn.w, 0.0f);
    const bool use_attn = params.branches != MaskBranches::MlpOnly;
    const bool use_mlp = params.branches != MaskBranches::AttentionOnly;
    const ScoreMask attn =
        use_attn ? maybe_pool(enhance(minmax_normalize(m_attn, params.eps), params.gamma)) : zero;
    const ScoreMask mlp = use_mlp ? maybe_pool(inverse_normalize(m_mlp, params.eps)) : zero;
    return prob_or(attn, mlp);
}

ScoreMask bicubic_upsample(const ScoreMask& m, std::uint32_t out_h, std::uint32_t out_w) {
    if (out_h < 1 || out_w < 1) throw ValidationError("bicubic_upsample: target dimensions must be >= 1");
    check_finite(m, "bicubic_upsample");
    const auto rows = cubic_taps(m.h, out_h);
    const auto cols = cubic_taps(m.w, out_w);

    std::vector<double> horiz(std::size_t{m.h} * out_w);
    for (std::uint32_t i = 0; i < m.h; ++i)
        for (std::uint32_t j = 0; j < out_w; ++j)
            horiz[std::size_t{i} * out_w + j] =
                anchored_sum(cols[j], [&](std::int64_t s) { return double{m.at(i, std::uint32_t(s))}; });

    ScoreMask out(out_h, out_w);
    for (std::uint32_t i = 0; i < out_h; ++i)
        for (std::uint32_t j = 0; j < out_w; ++j)
            out.at(i, j) = static_cast<float>(
                anchored_sum(rows[i], [&](std::int64_t s) { return horiz[std::size_t(s) * out_w + j]; }));
    return out;
}

GuidanceMask to_guidance(const ScoreMask& m, double eps) {
    ScoreMask n = minmax_normalize(m, eps);
    return GuidanceMask(n.h, n.w, std::move(n.values));
}

Image gaussian_blur(const Image& img, double sigma) {
    if (!(sigma > 0.0)) throw ValidationError("gaussian_blur: sigma must be > 0");
    validate(img);
    const auto radius = static_cast<std::int64_t>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(2 * radius + 1);
    double total = 0.0;
    for (std::int64_t k = -radius; k <= radius; ++k) {
        kernel[k + radius] = std::exp(-double(k * k) / (2.0 * sigma * sigma));
        total += kernel[k + radius];
    }
    for (auto& w : kernel) w /= total;

    // Centre tap first so anchored_sum keeps constants exact.
    auto taps_for = [&](std::int64_t pos, std::int64_t n) {
        std::vector<Tap> taps;
        taps.reserve(kernel.size());
        taps.push_back({reflect(pos, n), kernel[radius]});
        for (std::int64_t k = -radius; k <= radius; ++k)
            if (k != 0) taps.push_back({reflect(pos + k, n), kernel[k + radius]});
        return taps;
    };

    const std::int64_t H = img.h, W = img.w, C = img.channels;
    std::vector<double> horiz(img.values.size());
    for (std::int64_t j = 0; j < W; ++j) {
        const auto taps = taps_for(j, W);
        for (std::int64_t i = 0; i < H; ++i)
            for (std::int64_t c = 0; c < C; ++c)
                horiz[(i * W + j) * C + c] = anchored_sum(
                    taps, [&](std::int64_t s) { return double{img.values[(i * W + s) * C + c]}; });
    }

    Image out = img;
    for (std::int64_t i = 0; i < H; ++i) {
        const auto taps = taps_for(i, H);
        for (std::int64_t j = 0; j < W; ++j)
            for (std::int64_t c = 0; c < C; ++c) {
                const double v =
                    anchored_sum(taps, [&](std::int64_t s) { return horiz[(s * W + j) * C + c]; });
                out.values[(i * W + j) * C + c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
    }
    return out;
}

Image alpha_blend(const Image& img, const Image& bg, const GuidanceMask& mask) {
    validate(img);
    validate(bg);
    if (img.h != bg.h || img.w != bg.w || img.channels != bg.channels)
        throw ValidationError("alpha_blend: image " + dims(img.h, img.w) + " and background " +
                              dims(bg.h, bg.w) + " differ");
    if (img.h != mask.h() || img.w != mask.w())
        throw ValidationError("alpha_blend: image " + dims(img.h, img.w) + " and mask " +
                              dims(mask.h(), mask.w()) + " differ");
    Image out = img;
    const std::size_t C = img.channels;
    for (std::size_t p = 0; p < mask.values().size(); ++p) {
        const double m = mask.values()[p];
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t k = p * C + c;
            out.values[k] = static_cast<float>(img.values[k] * m + bg.values[k] * (1.0 - m));
        }
    }
    return out;
}

Image compose_prompt(const Image& img, const GuidanceMask& mask, double sigma) {
    return alpha_blend(img, gaussian_blur(img, sigma), mask);
}

PromptResult make_prompt(const Image& img, const features::FeatureBundle& bundle,
                         const PromptParams& params) {
    validate(img);
    validate(params);
    if (bundle.image_h != img.h || bundle.image_w != img.w)
        throw ValidationError("make_prompt: feature bundle expects image " +
                              dims(bundle.image_h, bundle.image_w) + " but image is " +
                              dims(img.h, img.w));
    auto [m_attn, m_mlp] = response_masks(bundle);
    ScoreMask fused = fuse_guidance(m_attn, m_mlp, params);
    ScoreMask upsampled = bicubic_upsample(fused, img.h, img.w);
    GuidanceMask mask = to_guidance(upsampled, params.eps);
    Image prompt = compose_prompt(img, mask, params.resolved_sigma(img.h, img.w));
    return PromptResult{std::move(prompt), std::move(mask),
                        PromptIntermediates{std::move(m_attn), std::move(m_mlp), std::move(fused),
                                            std::move(upsampled)}};
}

Image to_gray(const Image& img) {
    validate(img);
    if (img.channels == 1) return img;
    Image out(img.h, img.w, 1);
    for (std::size_t p = 0; p < out.values.size(); ++p)
        out.values[p] = static_cast<float>(
            (double{img.values[3 * p]} + img.values[3 * p + 1] + img.values[3 * p + 2]) / 3.0);
    return out;
}

Image resize_area(const Image& img, std::uint32_t out_h, std::uint32_t out_w) {
    validate(img);
    if (out_h < 1 || out_w < 1) throw ValidationError("resize_area: target dimensions must be >= 1");
    if (out_h == img.h && out_w == img.w) return img;
    const auto rows = area_spans(img.h, out_h);
    const auto cols = area_spans(img.w, out_w);
    const std::size_t C = img.channels;
    Image out(out_h, out_w, img.channels);
    for (std::uint32_t i = 0; i < out_h; ++i)
        for (std::uint32_t j = 0; j < out_w; ++j)
            for (std::size_t c = 0; c < C; ++c) {
                double acc = 0.0;
                for (std::size_t a = 0; a < rows[i].weights.size(); ++a)
                    for (std::size_t b = 0; b < cols[j].weights.size(); ++b)
                        acc += rows[i].weights[a] * cols[j].weights[b] *
                               img.at(rows[i].first + std::uint32_t(a), cols[j].first + std::uint32_t(b),
                                      std::uint32_t(c));
                out.at(i, j, std::uint32_t(c)) = static_cast<float>(std::clamp(acc, 0.0, 1.0));
            }
    return out;
}

}  // namespace ssg::prompting
