#pragma once

// Toy diffusion transformer with the dual-branch adapter attention.
//
// Token convention: sequences are row-major (tokens x width) matrices and
// projections act on the right, Y = X * W. All projection biases are zero
// and therefore not stored; the visual encoder's affine layers do carry
// biases.

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "ssg/prompting.hpp"

namespace ssg::dit {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct PatchSize {
    std::uint32_t t = 1;
    std::uint32_t h = 2;
    std::uint32_t w = 2;
};

/// Latent video z, layout [frame][row][col][channel].
struct LatentClip {
    std::uint32_t frames = 0;
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    std::uint32_t channels = 0;
    std::vector<float> values;

    LatentClip() = default;
    LatentClip(std::uint32_t L, std::uint32_t H, std::uint32_t W, std::uint32_t C, float fill = 0.0f);

    std::size_t index(std::uint32_t f, std::uint32_t i, std::uint32_t j, std::uint32_t c) const {
        return ((std::size_t{f} * height + i) * width + j) * channels + c;
    }
    float& at(std::uint32_t f, std::uint32_t i, std::uint32_t j, std::uint32_t c) { return values[index(f, i, j, c)]; }
    float at(std::uint32_t f, std::uint32_t i, std::uint32_t j, std::uint32_t c) const {
        return values[index(f, i, j, c)];
    }
    bool same_shape(const LatentClip& o) const {
        return frames == o.frames && height == o.height && width == o.width && channels == o.channels;
    }
    bool operator==(const LatentClip&) const = default;
};

/// Visual encoder input geometry: the prompt is resampled to this square
/// size and cut into kVisualPatch-sized patches.
inline constexpr std::uint32_t kVisualImage = 32;
inline constexpr std::uint32_t kVisualPatch = 8;
inline constexpr std::uint32_t kVisualTokens = (kVisualImage / kVisualPatch) * (kVisualImage / kVisualPatch);
inline constexpr std::uint32_t kVisualPatchDim = kVisualPatch * kVisualPatch;

struct ModelConfig {
    std::uint32_t L = 4, H = 8, W = 8, C = 4;
    PatchSize patch{};
    std::uint32_t D = 64;
    std::uint32_t heads = 4;
    std::uint32_t blocks = 2;
    std::uint32_t ffn_mult = 4;
    std::uint32_t d_cond = 64;
    std::uint32_t n_text_tokens = 8;
    std::uint32_t n_visual_tokens = kVisualTokens;
    std::uint32_t T = 100;
    std::uint32_t n_captions = 9;

    std::uint32_t tokens() const { return (L / patch.t) * (H / patch.h) * (W / patch.w); }
    std::uint32_t raw_dim() const { return patch.t * patch.h * patch.w * C; }
    std::uint32_t head_dim() const { return D / heads; }
    std::uint32_t ffn_dim() const { return D * ffn_mult; }

    void validate() const;
    bool operator==(const ModelConfig& o) const;
};

enum class ParamGroup { Backbone, Adapter };

template <typename T>
struct BlockParams {
    Mat<T> norm1_gain, norm1_bias;
    Mat<T> wq, wk, wv, wo;
    Mat<T> norm2_gain, norm2_bias;
    Mat<T> ffn_in, ffn_out;
    // Adapter: cross-attention key/value from the fused condition and the
    // zero-initialised output projection.
    Mat<T> cross_wk, cross_wv, cross_wo;
};

template <typename T>
struct Params {
    Mat<T> patch_in, pos;
    Mat<T> time_w1, time_w2;
    std::vector<BlockParams<T>> blocks;
    Mat<T> final_gain, final_bias, unpatch;
    Mat<T> visual_patch, visual_pos, visual_w1, visual_b1, visual_w2, visual_b2;
    Mat<T> text_table;
};

/// Calls f(name, group, p.x, q.x, ...) for every tensor, in a fixed order,
/// on any number of structurally identical Params.
template <typename F, typename P, typename... Ps>
void visit_tensors(F&& f, P& p, Ps&... ps) {
    using G = ParamGroup;
    f("patch_in", G::Backbone, p.patch_in, ps.patch_in...);
    f("pos", G::Backbone, p.pos, ps.pos...);
    f("time.w1", G::Backbone, p.time_w1, ps.time_w1...);
    f("time.w2", G::Backbone, p.time_w2, ps.time_w2...);
    for (std::size_t b = 0; b < p.blocks.size(); ++b) {
        const std::string pre = "blocks." + std::to_string(b) + ".";
        f(pre + "norm1.gain", G::Backbone, p.blocks[b].norm1_gain, ps.blocks[b].norm1_gain...);
        f(pre + "norm1.bias", G::Backbone, p.blocks[b].norm1_bias, ps.blocks[b].norm1_bias...);
        f(pre + "attn.wq", G::Backbone, p.blocks[b].wq, ps.blocks[b].wq...);
        f(pre + "attn.wk", G::Backbone, p.blocks[b].wk, ps.blocks[b].wk...);
        f(pre + "attn.wv", G::Backbone, p.blocks[b].wv, ps.blocks[b].wv...);
        f(pre + "attn.wo", G::Backbone, p.blocks[b].wo, ps.blocks[b].wo...);
        f(pre + "norm2.gain", G::Backbone, p.blocks[b].norm2_gain, ps.blocks[b].norm2_gain...);
        f(pre + "norm2.bias", G::Backbone, p.blocks[b].norm2_bias, ps.blocks[b].norm2_bias...);
        f(pre + "ffn.in", G::Backbone, p.blocks[b].ffn_in, ps.blocks[b].ffn_in...);
        f(pre + "ffn.out", G::Backbone, p.blocks[b].ffn_out, ps.blocks[b].ffn_out...);
        f(pre + "adapter.wk", G::Adapter, p.blocks[b].cross_wk, ps.blocks[b].cross_wk...);
        f(pre + "adapter.wv", G::Adapter, p.blocks[b].cross_wv, ps.blocks[b].cross_wv...);
        f(pre + "adapter.wo", G::Adapter, p.blocks[b].cross_wo, ps.blocks[b].cross_wo...);
    }
    f("final_norm.gain", G::Backbone, p.final_gain, ps.final_gain...);
    f("final_norm.bias", G::Backbone, p.final_bias, ps.final_bias...);
    f("unpatch", G::Backbone, p.unpatch, ps.unpatch...);
    f("visual.patch", G::Adapter, p.visual_patch, ps.visual_patch...);
    f("visual.pos", G::Adapter, p.visual_pos, ps.visual_pos...);
    f("visual.w1", G::Adapter, p.visual_w1, ps.visual_w1...);
    f("visual.b1", G::Adapter, p.visual_b1, ps.visual_b1...);
    f("visual.w2", G::Adapter, p.visual_w2, ps.visual_w2...);
    f("visual.b2", G::Adapter, p.visual_b2, ps.visual_b2...);
    f("text_table", G::Backbone, p.text_table, ps.text_table...);
}

/// Zero tensors with the shapes implied by `cfg`.
template <typename T>
Params<T> zero_params(const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// Patchification

/// Non-overlapping spatio-temporal patches, frame-major then row-major; each
/// token is the patch flattened as [dt][dh][dw][channel].
Mat<float> patchify(const LatentClip& z, PatchSize patch);
LatentClip unpatchify(const Mat<float>& tokens, std::uint32_t L, std::uint32_t H, std::uint32_t W,
                      std::uint32_t C, PatchSize patch);

// ---------------------------------------------------------------------------
// Attention pieces (exposed for oracle tests)

template <typename T>
struct SelfAttentionState {
    Mat<T> q, k, v;
    std::vector<Mat<T>> probs;  // per head, tokens x tokens
    Mat<T> heads_out;           // concatenated heads before W_O
    Mat<T> out;
};

template <typename T>
struct CrossAttentionState {
    Mat<T> k, v;
    std::vector<Mat<T>> probs;  // per head, tokens x condition tokens
    Mat<T> heads_out;
    Mat<T> out;
};

/// Observer for the shared-query contract: both callbacks receive the
/// query matrix actually consumed by each branch.
template <typename T>
struct AttentionProbe {
    std::function<void(std::size_t block, const Mat<T>& q)> on_self_query;
    std::function<void(std::size_t block, const Mat<T>& q)> on_cross_query;
};

template <typename T>
SelfAttentionState<T> self_attention(const Mat<T>& x, const BlockParams<T>& bp, std::uint32_t heads);

/// `q` is the self branch's query matrix (tokens x D); head h owns columns
/// [h*d_k, (h+1)*d_k).
template <typename T>
CrossAttentionState<T> cross_attention(const Mat<T>& q, const Mat<T>& cond, const BlockParams<T>& bp,
                                       std::uint32_t heads);

/// Row-wise softmax(q_h k_h^T / sqrt(d_k)) for each head.
template <typename T>
std::vector<Mat<T>> attention_probs(const Mat<T>& q, const Mat<T>& k, std::uint32_t heads);

template <typename T>
struct NormState {
    Mat<T> xhat;
    Eigen::Matrix<T, Eigen::Dynamic, 1> rstd;
    Mat<T> out;
};

template <typename T>
NormState<T> layer_norm(const Mat<T>& x, const Mat<T>& gain, const Mat<T>& bias);

template <typename T>
struct BlockState {
    Mat<T> x;
    NormState<T> norm1;
    SelfAttentionState<T> self;
    bool has_cross = false;
    CrossAttentionState<T> cross;
    Mat<T> attn_out;  // X + O_self + O_cross
    NormState<T> norm2;
    Mat<T> hidden;    // tanh(norm2 * ffn_in)
    Mat<T> out;
};

/// One transformer block. `cond == nullptr` disables the adapter branch.
template <typename T>
BlockState<T> ssg_block(const Mat<T>& x, const Mat<T>* cond, const BlockParams<T>& bp, std::uint32_t heads,
                        std::size_t block_index = 0, const AttentionProbe<T>* probe = nullptr);

template <typename T>
Mat<T> timestep_features(std::uint32_t t, std::uint32_t dim);

// ---------------------------------------------------------------------------
// Model

template <typename T>
struct ForwardCache {
    Mat<T> raw;
    Mat<T> time_feat, time_hidden;
    std::vector<BlockState<T>> blocks;
    NormState<T> final_norm;
};

template <typename T>
struct VisualCache {
    Mat<T> patches;   // kVisualTokens x kVisualPatchDim
    Mat<T> embedded;  // patches * W + positional table
    Mat<T> hidden;    // tanh(...) activations
};

template <typename T>
class SsgDitModel {
public:
    SsgDitModel(const ModelConfig& cfg, std::uint64_t seed);
    SsgDitModel(const ModelConfig& cfg, Params<T> params);

    const ModelConfig& config() const { return cfg_; }
    Params<T>& params() { return params_; }
    const Params<T>& params() const { return params_; }

    /// Marks every backbone tensor frozen.
    void freeze_backbone();
    bool backbone_frozen() const;
    bool is_frozen(const std::string& name) const;
    void set_frozen(const std::string& name, bool frozen);

    /// FNV-1a over names and raw bytes of all backbone tensors.
    std::uint64_t backbone_checksum() const;

    /// X_in = patches * W_patch + P_pos.
    Mat<T> embed_input(const Mat<T>& raw_tokens) const;

    /// Token-level forward: raw patch tokens in, predicted noise tokens out.
    /// `cond == nullptr` runs the adapter-free backbone.
    Mat<T> forward_tokens(const Mat<T>& raw_tokens, std::uint32_t t, const Mat<T>* cond,
                          ForwardCache<T>* cache = nullptr, const AttentionProbe<T>* probe = nullptr) const;

    /// Accumulates parameter gradients into `grads`; if `d_cond` is non-null
    /// it receives the gradient w.r.t. the fused condition.
    void backward(const ForwardCache<T>& cache, const Mat<T>* cond, const Mat<T>& d_out, Params<T>& grads,
                  Mat<T>* d_cond) const;

    /// Visual encoder on prepared patches (kVisualTokens x kVisualPatchDim).
    Mat<T> encode_visual_patches(const Mat<T>& patches, VisualCache<T>* cache = nullptr) const;
    void backward_visual(const VisualCache<T>& cache, const Mat<T>& d_tokens, Params<T>& grads) const;

    Mat<T> encode_visual(const prompting::Image& prompt) const;
    Mat<T> text_tokens(std::uint32_t caption_id) const;
    void backward_text(std::uint32_t caption_id, const Mat<T>& d_tokens, Params<T>& grads) const;

    template <typename U>
    SsgDitModel<U> cast() const;

private:
    ModelConfig cfg_;
    Params<T> params_;
    std::unordered_map<std::string, bool> frozen_;
};

/// Grayscale 32x32 resample of the prompt cut into 8x8 patches.
Mat<float> visual_patches(const prompting::Image& prompt);

/// Sequence concatenation, text tokens first.
template <typename T>
Mat<T> fuse_conditions(const Mat<T>& text, const Mat<T>& visual);

/// Full predictor: patchify, embed, blocks, unpatchify.
template <typename T>
LatentClip dit_forward(const LatentClip& z_t, std::uint32_t t, const Mat<T>* cond, const SsgDitModel<T>& model);

template <typename T>
template <typename U>
SsgDitModel<U> SsgDitModel<T>::cast() const {
    Params<U> out = zero_params<U>(cfg_);
    visit_tensors([](const std::string&, ParamGroup, const Mat<T>& src, Mat<U>& dst) { dst = src.template cast<U>(); },
                  params_, out);
    SsgDitModel<U> m(cfg_, std::move(out));
    for (const auto& [name, fr] : frozen_) m.set_frozen(name, fr);
    return m;
}

}  // namespace ssg::dit
