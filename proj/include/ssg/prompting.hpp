#pragma once

// Text-conditioned guidance masks and visual-prompt synthesis.
//
// Pipeline: response masks from patch features scored against the caption
// embedding, differentiated preprocessing of the two masks, probabilistic-OR
// fusion, bicubic upsampling to image size, and an alpha blend of the image
// over its Gaussian-blurred copy.

#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "ssg/feature_io.hpp"

namespace ssg::prompting {

/// Raw or intermediate 2D score grid, row-major. Values are finite but not
/// range-bounded.
struct ScoreMask {
    std::uint32_t h = 0;
    std::uint32_t w = 0;
    std::vector<float> values;

    ScoreMask() = default;
    ScoreMask(std::uint32_t h, std::uint32_t w, float fill = 0.0f);
    ScoreMask(std::uint32_t h, std::uint32_t w, std::vector<float> v);

    float& at(std::uint32_t i, std::uint32_t j) { return values[std::size_t{i} * w + j]; }
    float at(std::uint32_t i, std::uint32_t j) const { return values[std::size_t{i} * w + j]; }
    std::size_t size() const { return values.size(); }

    bool operator==(const ScoreMask&) const = default;
};

/// Per-pixel alpha in [0,1]. Only constructible from in-range values.
class GuidanceMask {
public:
    GuidanceMask(std::uint32_t h, std::uint32_t w, std::vector<float> v);
    static GuidanceMask filled(std::uint32_t h, std::uint32_t w, float alpha);

    std::uint32_t h() const { return h_; }
    std::uint32_t w() const { return w_; }
    const std::vector<float>& values() const { return values_; }
    float at(std::uint32_t i, std::uint32_t j) const { return values_[std::size_t{i} * w_ + j]; }

private:
    std::uint32_t h_;
    std::uint32_t w_;
    std::vector<float> values_;
};

/// 1- or 3-channel image, values in [0,1], interleaved row-major.
struct Image {
    std::uint32_t h = 0;
    std::uint32_t w = 0;
    std::uint32_t channels = 1;
    std::vector<float> values;

    Image() = default;
    Image(std::uint32_t h, std::uint32_t w, std::uint32_t channels, float fill = 0.0f);

    float& at(std::uint32_t i, std::uint32_t j, std::uint32_t c = 0) {
        return values[(std::size_t{i} * w + j) * channels + c];
    }
    float at(std::uint32_t i, std::uint32_t j, std::uint32_t c = 0) const {
        return values[(std::size_t{i} * w + j) * channels + c];
    }

    bool operator==(const Image&) const = default;
};

void validate(const Image& img);

/// Which response masks feed the fusion. The single-branch settings exist
/// for ablation runs.
enum class MaskBranches { Fused, AttentionOnly, MlpOnly };

struct PromptParams {
    double gamma = 2.0;
    bool pool = true;
    // Defaults to max(3, 0.02 * min(h, w)) when unset.
    std::optional<double> blur_sigma;
    double eps = 1e-12;
    MaskBranches branches = MaskBranches::Fused;

    double resolved_sigma(std::uint32_t h, std::uint32_t w) const;
};

void validate(const PromptParams& p);

std::vector<float> l2_normalize(std::span<const float> v, double eps = 1e-12);

std::pair<ScoreMask, ScoreMask> response_masks(const features::FeatureBundle& bundle);

ScoreMask minmax_normalize(const ScoreMask& m, double eps = 1e-12);
ScoreMask enhance(const ScoreMask& m, double gamma);
ScoreMask inverse_normalize(const ScoreMask& m, double eps = 1e-12);

/// Stride-1, same-size 3x3 mean with edge-replicate padding.
ScoreMask avg_pool_3x3(const ScoreMask& m);

ScoreMask prob_or(const ScoreMask& a, const ScoreMask& b);

ScoreMask fuse_guidance(const ScoreMask& m_attn, const ScoreMask& m_mlp, const PromptParams& params);

/// Cubic convolution (a = -0.5), half-pixel centres, clamped edges.
ScoreMask bicubic_upsample(const ScoreMask& m, std::uint32_t out_h, std::uint32_t out_w);

GuidanceMask to_guidance(const ScoreMask& m, double eps = 1e-12);

/// Separable Gaussian, radius ceil(3 sigma), reflect-101 borders.
Image gaussian_blur(const Image& img, double sigma);

Image alpha_blend(const Image& img, const Image& bg, const GuidanceMask& mask);

/// Blend of `img` over its blur with an explicit mask.
Image compose_prompt(const Image& img, const GuidanceMask& mask, double sigma);

struct PromptIntermediates {
    ScoreMask m_attn;
    ScoreMask m_mlp;
    ScoreMask fused;
    ScoreMask upsampled;
};

struct PromptResult {
    Image prompt;
    GuidanceMask mask;
    PromptIntermediates intermediates;
};

PromptResult make_prompt(const Image& img, const features::FeatureBundle& bundle,
                         const PromptParams& params = {});

// Image utilities used by the visual encoder and the dataset renderer.

/// Channel mean; identity on single-channel images.
Image to_gray(const Image& img);

/// Area-weighted resampling to an arbitrary size.
Image resize_area(const Image& img, std::uint32_t out_h, std::uint32_t out_w);

}  // namespace ssg::prompting
