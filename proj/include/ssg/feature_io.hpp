#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace ssg::features {

/// Patch-level encoder features for one image plus the caption embedding
/// they are scored against. `attn_feats` and `mlp_feats` hold one row of
/// `d_e` floats per grid cell, row-major over the grid.
struct FeatureBundle {
    std::uint32_t grid_h = 0;
    std::uint32_t grid_w = 0;
    std::uint32_t d_e = 0;
    std::uint32_t image_h = 0;
    std::uint32_t image_w = 0;
    std::vector<float> attn_feats;
    std::vector<float> mlp_feats;
    std::vector<float> text_embed;
    std::string text;

    std::size_t cells() const { return std::size_t{grid_h} * grid_w; }

    bool operator==(const FeatureBundle&) const = default;
};

inline constexpr char kMagic[4] = {'S', 'S', 'G', 'F'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr double kNormTolerance = 1e-5;

/// Throws ValidationError when any bundle invariant is broken.
void validate(const FeatureBundle& b);

/// Serializes to SSGF v1. Nothing is written if validation fails.
std::size_t write_bundle(const FeatureBundle& b, std::ostream& sink);
FeatureBundle read_bundle(std::istream& source);

void save_bundle(const FeatureBundle& b, const std::string& path);
FeatureBundle load_bundle(const std::string& path);

struct Point {
    double x = 0.5;
    double y = 0.5;
};

/// Deterministic stand-in for encoder features.
///
/// Draws come from one SplitMix64 stream in this order: attn_feats noise
/// (row-major, d_e values per cell), mlp_feats noise, then the raw text
/// vector. Noise is uniform in [-1, 1). The text vector is L2-normalized,
/// and each feature row is its noise with the text-parallel component
/// removed plus a response term along the text direction:
///   attention: +exp(-d^2 / 2s^2),  s = 0.25 * min(grid_h, grid_w)
///   mlp:       -exp(-d^2 / 2s^2),  s = 0.5  * min(grid_h, grid_w)
/// where d is the cell-centre distance (in cells) to `center` scaled to the
/// grid. The attention score is therefore exactly monotone in distance.
FeatureBundle synth_bundle(std::uint64_t seed, std::uint32_t grid_h, std::uint32_t grid_w,
                           std::uint32_t d_e, std::uint32_t image_h, std::uint32_t image_w,
                           Point center, std::string text = "synthetic");

}  // namespace ssg::features
