#include "ssg/feature_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <string_view>

#include "ssg/binary_io.hpp"
#include "ssg/error.hpp"
#include "ssg/rng.hpp"

namespace ssg::features {
namespace {

bool all_finite(const std::vector<float>& v) {
    for (float x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

double l2_norm(const std::vector<float>& v) {
    double s = 0.0;
    for (float x : v) s += double{x} * x;
    return std::sqrt(s);
}

// Bytes left in a seekable stream, or -1 when unknown.
std::streamoff remaining(std::istream& in) {
    const auto here = in.tellg();
    if (here < 0) return -1;
    in.seekg(0, std::ios::end);
    const auto end = in.tellg();
    in.seekg(here);
    if (end < 0 || !in) {
        in.clear();
        return -1;
    }
    return end - here;
}

}  // namespace

void validate(const FeatureBundle& b) {
    if (b.grid_h < 1 || b.grid_w < 1 || b.d_e < 1)
        throw ValidationError("feature bundle: grid and embedding dimensions must be >= 1");
    if (b.image_h < 1 || b.image_w < 1)
        throw ValidationError("feature bundle: image dimensions must be >= 1");
    const std::size_t n = b.cells() * b.d_e;
    if (b.attn_feats.size() != n || b.mlp_feats.size() != n)
        throw ValidationError("feature bundle: feature arrays must hold grid_h*grid_w*d_e floats");
    if (b.text_embed.size() != b.d_e)
        throw ValidationError("feature bundle: text embedding length must equal d_e");
    if (!all_finite(b.attn_feats) || !all_finite(b.mlp_feats) || !all_finite(b.text_embed))
        throw ValidationError("feature bundle: non-finite value");
    const double norm = l2_norm(b.text_embed);
    if (std::abs(norm - 1.0) > kNormTolerance)
        throw ValidationError("feature bundle: text embedding norm " + std::to_string(norm) +
                              " is not 1");
}

std::size_t write_bundle(const FeatureBundle& b, std::ostream& sink) {
    validate(b);
    binary::Writer w;
    w.bytes(std::string_view(kMagic, 4));
    w.u32(kVersion);
    w.u32(b.grid_h);
    w.u32(b.grid_w);
    w.u32(b.d_e);
    w.u32(b.image_h);
    w.u32(b.image_w);
    w.f32s(b.attn_feats);
    w.f32s(b.mlp_feats);
    w.f32s(b.text_embed);
    w.u32(static_cast<std::uint32_t>(b.text.size()));
    w.bytes(b.text);

    const auto& buf = w.buffer();
    sink.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!sink) throw IoError("feature bundle: write failed");
    return buf.size();
}

FeatureBundle read_bundle(std::istream& source) {
    if (!source) throw IoError("feature bundle: unreadable source");
    binary::Reader r(source);
    if (r.bytes(4, "magic") != std::string_view(kMagic, 4))
        throw FormatError("feature bundle: bad magic (expected SSGF)");
    const auto version = r.u32("version");
    if (version != kVersion)
        throw FormatError("feature bundle: unsupported version " + std::to_string(version));

    FeatureBundle b;
    b.grid_h = r.u32("grid_h");
    b.grid_w = r.u32("grid_w");
    b.d_e = r.u32("d_e");
    b.image_h = r.u32("image_h");
    b.image_w = r.u32("image_w");
    if (b.grid_h < 1 || b.grid_w < 1 || b.d_e < 1)
        throw ValidationError("feature bundle: grid and embedding dimensions must be >= 1");

    const std::uint64_t n = std::uint64_t{b.grid_h} * b.grid_w * b.d_e;
    const std::uint64_t payload = (2 * n + b.d_e) * 4 + 4;
    if (const auto left = remaining(source); left >= 0 && static_cast<std::uint64_t>(left) < payload)
        throw FormatError("feature bundle: truncated feature arrays");

    b.attn_feats.resize(n);
    b.mlp_feats.resize(n);
    b.text_embed.resize(b.d_e);
    r.f32s(b.attn_feats, "attn_feats");
    r.f32s(b.mlp_feats, "mlp_feats");
    r.f32s(b.text_embed, "text_embed");
    const auto text_len = r.u32("text_len");
    if (const auto left = remaining(source); left >= 0 && static_cast<std::uint64_t>(left) < text_len)
        throw FormatError("feature bundle: truncated text");
    b.text = r.bytes(text_len, "text");

    validate(b);
    return b;
}

void save_bundle(const FeatureBundle& b, const std::string& path) {
    validate(b);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    write_bundle(b, out);
}

FeatureBundle load_bundle(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    return read_bundle(in);
}

FeatureBundle synth_bundle(std::uint64_t seed, std::uint32_t grid_h, std::uint32_t grid_w,
                           std::uint32_t d_e, std::uint32_t image_h, std::uint32_t image_w,
                           Point center, std::string text) {
    if (grid_h < 1 || grid_w < 1 || d_e < 1 || image_h < 1 || image_w < 1)
        throw ValidationError("synth_bundle: dimensions must be >= 1");
    if (!(center.x >= 0.0 && center.x <= 1.0 && center.y >= 0.0 && center.y <= 1.0))
        throw ValidationError("synth_bundle: blob centre must lie in [0,1]^2");

    const std::size_t cells = std::size_t{grid_h} * grid_w;
    SplitMix64 rng(seed);
    std::vector<double> attn_noise(cells * d_e), mlp_noise(cells * d_e), t(d_e);
    for (auto& v : attn_noise) v = rng.symmetric();
    for (auto& v : mlp_noise) v = rng.symmetric();
    for (auto& v : t) v = rng.symmetric();

    double norm = 0.0;
    for (double v : t) norm += v * v;
    norm = std::sqrt(norm);
    if (norm < 1e-12) {
        // Only reachable for d_e == 1 with a zero draw.
        t.assign(d_e, 0.0);
        t[0] = 1.0;
        norm = 1.0;
    }
    for (auto& v : t) v /= norm;

    const double min_side = std::min(grid_h, grid_w);
    const double s_attn = 0.25 * min_side;
    const double s_mlp = 0.5 * min_side;
    const double cx = center.x * grid_w;
    const double cy = center.y * grid_h;

    FeatureBundle b;
    b.grid_h = grid_h;
    b.grid_w = grid_w;
    b.d_e = d_e;
    b.image_h = image_h;
    b.image_w = image_w;
    b.attn_feats.resize(cells * d_e);
    b.mlp_feats.resize(cells * d_e);
    b.text = std::move(text);

    auto emit = [&](const std::vector<double>& noise, std::vector<float>& out, std::size_t cell,
                    double response) {
        const double* row = noise.data() + cell * d_e;
        double along = 0.0;
        for (std::uint32_t k = 0; k < d_e; ++k) along += row[k] * t[k];
        for (std::uint32_t k = 0; k < d_e; ++k)
            out[cell * d_e + k] = static_cast<float>(0.5 * (row[k] - along * t[k]) + response * t[k]);
    };

    for (std::uint32_t i = 0; i < grid_h; ++i) {
        for (std::uint32_t j = 0; j < grid_w; ++j) {
            const double dx = j + 0.5 - cx;
            const double dy = i + 0.5 - cy;
            const double d2 = dx * dx + dy * dy;
            const std::size_t cell = std::size_t{i} * grid_w + j;
            emit(attn_noise, b.attn_feats, cell, std::exp(-d2 / (2.0 * s_attn * s_attn)));
            emit(mlp_noise, b.mlp_feats, cell, -std::exp(-d2 / (2.0 * s_mlp * s_mlp)));
        }
    }

    b.text_embed.resize(d_e);
    for (std::uint32_t k = 0; k < d_e; ++k) b.text_embed[k] = static_cast<float>(t[k]);
    return b;
}

}  // namespace ssg::features
