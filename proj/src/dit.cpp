#include "ssg/dit.hpp"

#include <cmath>
#include <cstring>
#include <string>

#include "ssg/error.hpp"
#include "ssg/rng.hpp"

namespace ssg::dit {
namespace {

template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

constexpr double kNormEps = 1e-5;

template <typename T>
Mat<T> randn(std::int64_t rows, std::int64_t cols, double std_dev, SplitMix64& rng) {
    Mat<T> m(rows, cols);
    for (std::int64_t i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(std_dev * rng.normal());
    return m;
}

template <typename T>
Mat<T> ones_row(std::int64_t n) {
    return Mat<T>::Ones(1, n);
}

template <typename T>
Mat<T> zeros(std::int64_t r, std::int64_t c) {
    return Mat<T>::Zero(r, c);
}

// Gradient of row-wise softmax: dS = P .* (dP - rowsum(dP .* P)).
template <typename T>
Mat<T> softmax_backward(const Mat<T>& p, const Mat<T>& dp) {
    const Eigen::Matrix<T, Eigen::Dynamic, 1> dot = (dp.array() * p.array()).rowwise().sum();
    return (p.array() * (dp.colwise() - dot).array()).matrix();
}

template <typename T>
Mat<T> layer_norm_backward(const NormState<T>& st, const Mat<T>& gain, const Mat<T>& dy, Mat<T>& d_gain,
                           Mat<T>& d_bias) {
    d_gain += (dy.array() * st.xhat.array()).colwise().sum().matrix();
    d_bias += dy.colwise().sum();
    const Mat<T> dxhat = (dy.array().rowwise() * gain.row(0).array()).matrix();
    const auto n = static_cast<T>(dy.cols());
    Mat<T> dx(dy.rows(), dy.cols());
    for (std::int64_t r = 0; r < dy.rows(); ++r) {
        const T mean_d = dxhat.row(r).sum() / n;
        const T mean_dx = (dxhat.row(r).array() * st.xhat.row(r).array()).sum() / n;
        dx.row(r) = st.rstd(r) * (dxhat.row(r).array() - mean_d - st.xhat.row(r).array() * mean_dx).matrix();
    }
    return dx;
}

// Shared multi-head attention backward for one branch. Accumulates into dq
// and returns (dk, dv) for the branch's key/value inputs.
template <typename T>
void attention_backward(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, const std::vector<Mat<T>>& probs,
                        const Mat<T>& d_heads, std::uint32_t heads, Mat<T>& dq, Mat<T>& dk, Mat<T>& dv) {
    const std::int64_t dh = q.cols() / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    dk.setZero(k.rows(), k.cols());
    dv.setZero(v.rows(), v.cols());
    for (std::uint32_t h = 0; h < heads; ++h) {
        const std::int64_t c0 = h * dh;
        const Mat<T> dho = d_heads.middleCols(c0, dh);
        const Mat<T> dp = dho * v.middleCols(c0, dh).transpose();
        dv.middleCols(c0, dh).noalias() += probs[h].transpose() * dho;
        const Mat<T> ds = softmax_backward<T>(probs[h], dp) * scale;
        dq.middleCols(c0, dh).noalias() += ds * k.middleCols(c0, dh);
        dk.middleCols(c0, dh).noalias() += ds.transpose() * q.middleCols(c0, dh);
    }
}

template <typename T>
Mat<T> concat_heads(const std::vector<Mat<T>>& probs, const Mat<T>& v, std::uint32_t heads, std::int64_t rows) {
    const std::int64_t dh = v.cols() / heads;
    Mat<T> out(rows, v.cols());
    for (std::uint32_t h = 0; h < heads; ++h) out.middleCols(h * dh, dh).noalias() = probs[h] * v.middleCols(h * dh, dh);
    return out;
}

template <typename T>
void check_finite(const Mat<T>& m, const char* what) {
    if (!m.allFinite()) throw ValidationError(std::string(what) + ": non-finite input");
}

template <typename T>
BlockState<T> run_block(const Mat<T>& x, const Mat<T>* cond, const BlockParams<T>& bp, std::uint32_t heads,
                        std::size_t block_index, const AttentionProbe<T>* probe) {
    BlockState<T> st;
    st.x = x;
    st.norm1 = layer_norm(x, bp.norm1_gain, bp.norm1_bias);
    st.self = self_attention(st.norm1.out, bp, heads);
    if (probe && probe->on_self_query) probe->on_self_query(block_index, st.self.q);
    st.attn_out = x + st.self.out;
    if (cond) {
        if (probe && probe->on_cross_query) probe->on_cross_query(block_index, st.self.q);
        st.cross = cross_attention(st.self.q, *cond, bp, heads);
        st.has_cross = true;
        st.attn_out += st.cross.out;
    }
    st.norm2 = layer_norm(st.attn_out, bp.norm2_gain, bp.norm2_bias);
    st.hidden = (st.norm2.out * bp.ffn_in).array().tanh().matrix();
    st.out = st.attn_out + st.hidden * bp.ffn_out;
    return st;
}

template <typename T>
Mat<T> block_backward(const BlockState<T>& st, const Mat<T>* cond, const BlockParams<T>& bp, std::uint32_t heads,
                      const Mat<T>& d_out, BlockParams<T>& g, Mat<T>* d_cond) {
    // FFN residual
    Mat<T> d_attn = d_out;
    g.ffn_out.noalias() += st.hidden.transpose() * d_out;
    const Mat<T> d_hidden = d_out * bp.ffn_out.transpose();
    const Mat<T> d_pre = (d_hidden.array() * (T(1) - st.hidden.array().square())).matrix();
    g.ffn_in.noalias() += st.norm2.out.transpose() * d_pre;
    const Mat<T> d_n2 = d_pre * bp.ffn_in.transpose();
    d_attn += layer_norm_backward(st.norm2, bp.norm2_gain, d_n2, g.norm2_gain, g.norm2_bias);

    // Attention residual: d(X + O_self + O_cross) flows to all three terms.
    Mat<T> dq = zeros<T>(st.self.q.rows(), st.self.q.cols());
    Mat<T> dk, dv;

    g.wo.noalias() += st.self.heads_out.transpose() * d_attn;
    const Mat<T> d_self_heads = d_attn * bp.wo.transpose();
    attention_backward(st.self.q, st.self.k, st.self.v, st.self.probs, d_self_heads, heads, dq, dk, dv);

    if (st.has_cross) {
        g.cross_wo.noalias() += st.cross.heads_out.transpose() * d_attn;
        const Mat<T> d_cross_heads = d_attn * bp.cross_wo.transpose();
        Mat<T> dkc, dvc;
        attention_backward(st.self.q, st.cross.k, st.cross.v, st.cross.probs, d_cross_heads, heads, dq, dkc, dvc);
        g.cross_wk.noalias() += cond->transpose() * dkc;
        g.cross_wv.noalias() += cond->transpose() * dvc;
        if (d_cond) {
            d_cond->noalias() += dkc * bp.cross_wk.transpose();
            d_cond->noalias() += dvc * bp.cross_wv.transpose();
        }
    }

    const Mat<T>& n1 = st.norm1.out;
    g.wq.noalias() += n1.transpose() * dq;
    g.wk.noalias() += n1.transpose() * dk;
    g.wv.noalias() += n1.transpose() * dv;
    Mat<T> d_n1 = dq * bp.wq.transpose();
    d_n1.noalias() += dk * bp.wk.transpose();
    d_n1.noalias() += dv * bp.wv.transpose();

    Mat<T> dx = d_attn;
    dx += layer_norm_backward(st.norm1, bp.norm1_gain, d_n1, g.norm1_gain, g.norm1_bias);
    return dx;
}

void fnv1a(std::uint64_t& h, const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ULL;
    }
}

}  // namespace

LatentClip::LatentClip(std::uint32_t L, std::uint32_t H, std::uint32_t W, std::uint32_t C, float fill)
    : frames(L), height(H), width(W), channels(C), values(std::size_t{L} * H * W * C, fill) {
    if (L < 1 || H < 1 || W < 1 || C < 1) throw ValidationError("latent clip dimensions must be >= 1");
}

void ModelConfig::validate() const {
    const std::uint32_t all[] = {L, H, W, C, patch.t, patch.h, patch.w, D, heads, blocks,
                                 ffn_mult, d_cond, n_text_tokens, n_visual_tokens, T, n_captions};
    for (auto v : all)
        if (v == 0) throw ValidationError("model config: all sizes must be positive");
    if (D % heads != 0) throw ValidationError("model config: D must be divisible by heads");
    if (L % patch.t != 0 || H % patch.h != 0 || W % patch.w != 0)
        throw ValidationError("model config: latent dims must be divisible by the patch size");
    if (n_visual_tokens != kVisualTokens)
        throw ValidationError("model config: the visual encoder emits " + std::to_string(kVisualTokens) + " tokens");
}

bool ModelConfig::operator==(const ModelConfig& o) const {
    return L == o.L && H == o.H && W == o.W && C == o.C && patch.t == o.patch.t && patch.h == o.patch.h &&
           patch.w == o.patch.w && D == o.D && heads == o.heads && blocks == o.blocks && ffn_mult == o.ffn_mult &&
           d_cond == o.d_cond && n_text_tokens == o.n_text_tokens && n_visual_tokens == o.n_visual_tokens &&
           T == o.T && n_captions == o.n_captions;
}

template <typename T>
Params<T> zero_params(const ModelConfig& cfg) {
    cfg.validate();
    const std::int64_t D = cfg.D, N = cfg.tokens(), R = cfg.raw_dim(), F = cfg.ffn_dim(), DC = cfg.d_cond;
    Params<T> p;
    p.patch_in = zeros<T>(R, D);
    p.pos = zeros<T>(N, D);
    p.time_w1 = zeros<T>(D, D);
    p.time_w2 = zeros<T>(D, D);
    p.blocks.resize(cfg.blocks);
    for (auto& b : p.blocks) {
        b.norm1_gain = zeros<T>(1, D);
        b.norm1_bias = zeros<T>(1, D);
        b.wq = zeros<T>(D, D);
        b.wk = zeros<T>(D, D);
        b.wv = zeros<T>(D, D);
        b.wo = zeros<T>(D, D);
        b.norm2_gain = zeros<T>(1, D);
        b.norm2_bias = zeros<T>(1, D);
        b.ffn_in = zeros<T>(D, F);
        b.ffn_out = zeros<T>(F, D);
        b.cross_wk = zeros<T>(DC, D);
        b.cross_wv = zeros<T>(DC, D);
        b.cross_wo = zeros<T>(D, D);
    }
    p.final_gain = zeros<T>(1, D);
    p.final_bias = zeros<T>(1, D);
    p.unpatch = zeros<T>(D, R);
    p.visual_patch = zeros<T>(kVisualPatchDim, DC);
    p.visual_pos = zeros<T>(cfg.n_visual_tokens, DC);
    p.visual_w1 = zeros<T>(DC, DC);
    p.visual_b1 = zeros<T>(1, DC);
    p.visual_w2 = zeros<T>(DC, DC);
    p.visual_b2 = zeros<T>(1, DC);
    p.text_table = zeros<T>(std::int64_t{cfg.n_captions} * cfg.n_text_tokens, DC);
    return p;
}

Mat<float> patchify(const LatentClip& z, PatchSize patch) {
    if (patch.t == 0 || patch.h == 0 || patch.w == 0) throw ValidationError("patchify: patch sizes must be positive");
    if (z.frames % patch.t || z.height % patch.h || z.width % patch.w)
        throw ValidationError("patchify: latent " + std::to_string(z.frames) + "x" + std::to_string(z.height) + "x" +
                              std::to_string(z.width) + " is not divisible by the patch size");
    const std::uint32_t nt = z.frames / patch.t, nh = z.height / patch.h, nw = z.width / patch.w;
    const std::uint32_t raw = patch.t * patch.h * patch.w * z.channels;
    Mat<float> out(std::int64_t{nt} * nh * nw, raw);
    std::int64_t tok = 0;
    for (std::uint32_t a = 0; a < nt; ++a)
        for (std::uint32_t b = 0; b < nh; ++b)
            for (std::uint32_t c = 0; c < nw; ++c, ++tok) {
                std::int64_t k = 0;
                for (std::uint32_t dt = 0; dt < patch.t; ++dt)
                    for (std::uint32_t dh = 0; dh < patch.h; ++dh)
                        for (std::uint32_t dw = 0; dw < patch.w; ++dw)
                            for (std::uint32_t ch = 0; ch < z.channels; ++ch)
                                out(tok, k++) = z.at(a * patch.t + dt, b * patch.h + dh, c * patch.w + dw, ch);
            }
    return out;
}

LatentClip unpatchify(const Mat<float>& tokens, std::uint32_t L, std::uint32_t H, std::uint32_t W, std::uint32_t C,
                      PatchSize patch) {
    if (L % patch.t || H % patch.h || W % patch.w) throw ValidationError("unpatchify: indivisible latent dims");
    const std::uint32_t nt = L / patch.t, nh = H / patch.h, nw = W / patch.w;
    if (tokens.rows() != std::int64_t{nt} * nh * nw || tokens.cols() != std::int64_t{patch.t} * patch.h * patch.w * C)
        throw ValidationError("unpatchify: token matrix shape does not match the latent geometry");
    LatentClip z(L, H, W, C);
    std::int64_t tok = 0;
    for (std::uint32_t a = 0; a < nt; ++a)
        for (std::uint32_t b = 0; b < nh; ++b)
            for (std::uint32_t c = 0; c < nw; ++c, ++tok) {
                std::int64_t k = 0;
                for (std::uint32_t dt = 0; dt < patch.t; ++dt)
                    for (std::uint32_t dh = 0; dh < patch.h; ++dh)
                        for (std::uint32_t dw = 0; dw < patch.w; ++dw)
                            for (std::uint32_t ch = 0; ch < C; ++ch)
                                z.at(a * patch.t + dt, b * patch.h + dh, c * patch.w + dw, ch) = tokens(tok, k++);
            }
    return z;
}

template <typename T>
std::vector<Mat<T>> attention_probs(const Mat<T>& q, const Mat<T>& k, std::uint32_t heads) {
    const std::int64_t dh = q.cols() / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<Mat<T>> probs(heads);
    for (std::uint32_t h = 0; h < heads; ++h) {
        Mat<T> s = (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) * scale;
        for (std::int64_t r = 0; r < s.rows(); ++r) {
            const T mx = s.row(r).maxCoeff();
            s.row(r) = (s.row(r).array() - mx).exp().matrix();
            s.row(r) /= s.row(r).sum();
        }
        probs[h] = std::move(s);
    }
    return probs;
}

template <typename T>
NormState<T> layer_norm(const Mat<T>& x, const Mat<T>& gain, const Mat<T>& bias) {
    NormState<T> st;
    const auto n = static_cast<T>(x.cols());
    st.xhat.resize(x.rows(), x.cols());
    st.rstd.resize(x.rows());
    for (std::int64_t r = 0; r < x.rows(); ++r) {
        const T mean = x.row(r).sum() / n;
        const T var = (x.row(r).array() - mean).square().sum() / n;
        st.rstd(r) = T(1) / std::sqrt(var + static_cast<T>(kNormEps));
        st.xhat.row(r) = (x.row(r).array() - mean) * st.rstd(r);
    }
    st.out = ((st.xhat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array()).matrix();
    return st;
}

template <typename T>
SelfAttentionState<T> self_attention(const Mat<T>& x, const BlockParams<T>& bp, std::uint32_t heads) {
    if (x.cols() != bp.wq.rows()) throw ValidationError("self_attention: input width does not match D");
    check_finite(x, "self_attention");
    SelfAttentionState<T> st;
    st.q = x * bp.wq;
    st.k = x * bp.wk;
    st.v = x * bp.wv;
    st.probs = attention_probs(st.q, st.k, heads);
    st.heads_out = concat_heads(st.probs, st.v, heads, x.rows());
    st.out = st.heads_out * bp.wo;
    return st;
}

template <typename T>
CrossAttentionState<T> cross_attention(const Mat<T>& q, const Mat<T>& cond, const BlockParams<T>& bp,
                                       std::uint32_t heads) {
    if (cond.cols() != bp.cross_wk.rows())
        throw ValidationError("cross_attention: condition width " + std::to_string(cond.cols()) +
                              " does not match d_cond " + std::to_string(bp.cross_wk.rows()));
    if (q.cols() != bp.cross_wk.cols()) throw ValidationError("cross_attention: query width does not match D");
    if (cond.rows() < 1) throw ValidationError("cross_attention: empty condition");
    CrossAttentionState<T> st;
    st.k = cond * bp.cross_wk;
    st.v = cond * bp.cross_wv;
    st.probs = attention_probs(q, st.k, heads);
    st.heads_out = concat_heads(st.probs, st.v, heads, q.rows());
    st.out = st.heads_out * bp.cross_wo;
    return st;
}

template <typename T>
BlockState<T> ssg_block(const Mat<T>& x, const Mat<T>* cond, const BlockParams<T>& bp, std::uint32_t heads,
                        std::size_t block_index, const AttentionProbe<T>* probe) {
    return run_block(x, cond, bp, heads, block_index, probe);
}

template <typename T>
Mat<T> timestep_features(std::uint32_t t, std::uint32_t dim) {
    Mat<T> f = Mat<T>::Zero(1, dim);
    const std::uint32_t half = dim / 2;
    for (std::uint32_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        f(0, i) = static_cast<T>(std::sin(t * freq));
        f(0, i + half) = static_cast<T>(std::cos(t * freq));
    }
    return f;
}

template <typename T>
SsgDitModel<T>::SsgDitModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), params_(zero_params<T>(cfg)) {
    SplitMix64 rng(seed);
    const double D = cfg.D, R = cfg.raw_dim(), F = cfg.ffn_dim(), DC = cfg.d_cond;
    auto& p = params_;
    p.patch_in = randn<T>(p.patch_in.rows(), p.patch_in.cols(), 1.0 / std::sqrt(R), rng);
    p.pos = randn<T>(p.pos.rows(), p.pos.cols(), 1.0, rng);
    p.time_w1 = randn<T>(cfg.D, cfg.D, 1.0 / std::sqrt(D), rng);
    p.time_w2 = randn<T>(cfg.D, cfg.D, 1.0 / std::sqrt(D), rng);
    for (auto& b : p.blocks) {
        b.norm1_gain = ones_row<T>(cfg.D);
        b.norm2_gain = ones_row<T>(cfg.D);
        b.wq = randn<T>(cfg.D, cfg.D, 1.0 / std::sqrt(D), rng);
        b.wk = randn<T>(cfg.D, cfg.D, 1.0 / std::sqrt(D), rng);
        b.wv = randn<T>(cfg.D, cfg.D, 1.0 / std::sqrt(D), rng);
        b.wo = randn<T>(cfg.D, cfg.D, 1.0 / std::sqrt(D), rng);
        b.ffn_in = randn<T>(cfg.D, cfg.ffn_dim(), 1.0 / std::sqrt(D), rng);
        b.ffn_out = randn<T>(cfg.ffn_dim(), cfg.D, 1.0 / std::sqrt(F), rng);
        b.cross_wk = randn<T>(cfg.d_cond, cfg.D, 1.0 / std::sqrt(DC), rng);
        b.cross_wv = randn<T>(cfg.d_cond, cfg.D, 1.0 / std::sqrt(DC), rng);
        // cross_wo stays zero: the adapter is a no-op until trained.
    }
    p.final_gain = ones_row<T>(cfg.D);
    p.unpatch = randn<T>(cfg.D, cfg.raw_dim(), 1.0 / std::sqrt(D), rng);
    p.visual_patch = randn<T>(kVisualPatchDim, cfg.d_cond, 1.0 / std::sqrt(double(kVisualPatchDim)), rng);
    p.visual_pos = randn<T>(cfg.n_visual_tokens, cfg.d_cond, 0.1, rng);
    p.visual_w1 = randn<T>(cfg.d_cond, cfg.d_cond, 1.0 / std::sqrt(DC), rng);
    p.visual_w2 = randn<T>(cfg.d_cond, cfg.d_cond, 1.0 / std::sqrt(DC), rng);
    p.text_table = randn<T>(p.text_table.rows(), cfg.d_cond, 1.0, rng);
    visit_tensors([&](const std::string& name, ParamGroup, const Mat<T>&) { frozen_[name] = false; }, params_);
}

template <typename T>
SsgDitModel<T>::SsgDitModel(const ModelConfig& cfg, Params<T> params) : cfg_(cfg), params_(std::move(params)) {
    const Params<T> ref = zero_params<T>(cfg);
    visit_tensors(
        [&](const std::string& name, ParamGroup, const Mat<T>& have, const Mat<T>& want) {
            if (have.rows() != want.rows() || have.cols() != want.cols())
                throw ValidationError("model: tensor " + name + " has the wrong shape");
            frozen_[name] = false;
        },
        params_, ref);
}

template <typename T>
void SsgDitModel<T>::freeze_backbone() {
    visit_tensors(
        [&](const std::string& name, ParamGroup g, const Mat<T>&) {
            if (g == ParamGroup::Backbone) frozen_[name] = true;
        },
        params_);
}

template <typename T>
bool SsgDitModel<T>::backbone_frozen() const {
    bool all = true;
    visit_tensors(
        [&](const std::string& name, ParamGroup g, const Mat<T>&) {
            if (g == ParamGroup::Backbone && !frozen_.at(name)) all = false;
        },
        params_);
    return all;
}

template <typename T>
bool SsgDitModel<T>::is_frozen(const std::string& name) const {
    const auto it = frozen_.find(name);
    if (it == frozen_.end()) throw ValidationError("model: unknown tensor " + name);
    return it->second;
}

template <typename T>
void SsgDitModel<T>::set_frozen(const std::string& name, bool frozen) {
    const auto it = frozen_.find(name);
    if (it == frozen_.end()) throw ValidationError("model: unknown tensor " + name);
    it->second = frozen;
}

template <typename T>
std::uint64_t SsgDitModel<T>::backbone_checksum() const {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    visit_tensors(
        [&](const std::string& name, ParamGroup g, const Mat<T>& m) {
            if (g != ParamGroup::Backbone) return;
            fnv1a(h, name.data(), name.size());
            fnv1a(h, m.data(), sizeof(T) * static_cast<std::size_t>(m.size()));
        },
        params_);
    return h;
}

template <typename T>
Mat<T> SsgDitModel<T>::embed_input(const Mat<T>& raw_tokens) const {
    if (raw_tokens.rows() != params_.pos.rows())
        throw ValidationError("embed_input: " + std::to_string(raw_tokens.rows()) + " tokens but positional table has " +
                              std::to_string(params_.pos.rows()) + " rows");
    if (raw_tokens.cols() != params_.patch_in.rows())
        throw ValidationError("embed_input: raw token width does not match the patch projection");
    return raw_tokens * params_.patch_in + params_.pos;
}

template <typename T>
Mat<T> SsgDitModel<T>::forward_tokens(const Mat<T>& raw_tokens, std::uint32_t t, const Mat<T>* cond,
                                      ForwardCache<T>* cache, const AttentionProbe<T>* probe) const {
    if (t >= cfg_.T) throw ValidationError("dit_forward: timestep " + std::to_string(t) + " outside [0, T)");
    check_finite(raw_tokens, "dit_forward");
    if (cond && cond->cols() != cfg_.d_cond) throw ValidationError("dit_forward: condition width does not match d_cond");

    ForwardCache<T> local;
    ForwardCache<T>& c = cache ? *cache : local;
    c.raw = raw_tokens;
    c.time_feat = timestep_features<T>(t, cfg_.D);
    c.time_hidden = (c.time_feat * params_.time_w1).array().tanh().matrix();
    const Mat<T> temb = c.time_hidden * params_.time_w2;

    Mat<T> x = embed_input(raw_tokens);
    x.rowwise() += temb.row(0);
    c.blocks.clear();
    c.blocks.reserve(params_.blocks.size());
    for (std::size_t b = 0; b < params_.blocks.size(); ++b) {
        c.blocks.push_back(run_block(x, cond, params_.blocks[b], cfg_.heads, b, probe));
        x = c.blocks.back().out;
    }
    c.final_norm = layer_norm(x, params_.final_gain, params_.final_bias);
    return c.final_norm.out * params_.unpatch;
}

template <typename T>
void SsgDitModel<T>::backward(const ForwardCache<T>& cache, const Mat<T>* cond, const Mat<T>& d_out, Params<T>& g,
                              Mat<T>* d_cond) const {
    if (d_cond && cond) d_cond->setZero(cond->rows(), cond->cols());
    g.unpatch.noalias() += cache.final_norm.out.transpose() * d_out;
    Mat<T> d = d_out * params_.unpatch.transpose();
    d = layer_norm_backward(cache.final_norm, params_.final_gain, d, g.final_gain, g.final_bias);
    for (std::size_t b = params_.blocks.size(); b-- > 0;)
        d = block_backward(cache.blocks[b], cond, params_.blocks[b], cfg_.heads, d, g.blocks[b], d_cond);

    g.pos += d;
    g.patch_in.noalias() += cache.raw.transpose() * d;
    const Mat<T> d_temb = d.colwise().sum();
    g.time_w2.noalias() += cache.time_hidden.transpose() * d_temb;
    const Mat<T> d_th = d_temb * params_.time_w2.transpose();
    const Mat<T> d_pre = (d_th.array() * (T(1) - cache.time_hidden.array().square())).matrix();
    g.time_w1.noalias() += cache.time_feat.transpose() * d_pre;
}

template <typename T>
Mat<T> SsgDitModel<T>::encode_visual_patches(const Mat<T>& patches, VisualCache<T>* cache) const {
    if (patches.rows() != cfg_.n_visual_tokens || patches.cols() != kVisualPatchDim)
        throw ValidationError("encode_visual: expected " + std::to_string(cfg_.n_visual_tokens) + "x" +
                              std::to_string(kVisualPatchDim) + " patches");
    VisualCache<T> local;
    VisualCache<T>& c = cache ? *cache : local;
    c.patches = patches;
    c.embedded = patches * params_.visual_patch + params_.visual_pos;
    Mat<T> pre = c.embedded * params_.visual_w1;
    pre.rowwise() += params_.visual_b1.row(0);
    c.hidden = pre.array().tanh().matrix();
    Mat<T> out = c.hidden * params_.visual_w2;
    out.rowwise() += params_.visual_b2.row(0);
    return out;
}

template <typename T>
void SsgDitModel<T>::backward_visual(const VisualCache<T>& c, const Mat<T>& d, Params<T>& g) const {
    g.visual_w2.noalias() += c.hidden.transpose() * d;
    g.visual_b2 += d.colwise().sum();
    const Mat<T> dh = d * params_.visual_w2.transpose();
    const Mat<T> d_pre = (dh.array() * (T(1) - c.hidden.array().square())).matrix();
    g.visual_w1.noalias() += c.embedded.transpose() * d_pre;
    g.visual_b1 += d_pre.colwise().sum();
    const Mat<T> d_emb = d_pre * params_.visual_w1.transpose();
    g.visual_patch.noalias() += c.patches.transpose() * d_emb;
    g.visual_pos += d_emb;
}

template <typename T>
Mat<T> SsgDitModel<T>::encode_visual(const prompting::Image& prompt) const {
    return encode_visual_patches(visual_patches(prompt).cast<T>());
}

template <typename T>
Mat<T> SsgDitModel<T>::text_tokens(std::uint32_t caption_id) const {
    if (caption_id >= cfg_.n_captions)
        throw ValidationError("caption id " + std::to_string(caption_id) + " outside [0, " +
                              std::to_string(cfg_.n_captions) + ")");
    return params_.text_table.middleRows(std::int64_t{caption_id} * cfg_.n_text_tokens, cfg_.n_text_tokens);
}

template <typename T>
void SsgDitModel<T>::backward_text(std::uint32_t caption_id, const Mat<T>& d_tokens, Params<T>& g) const {
    g.text_table.middleRows(std::int64_t{caption_id} * cfg_.n_text_tokens, cfg_.n_text_tokens) += d_tokens;
}

Mat<float> visual_patches(const prompting::Image& prompt) {
    if (prompt.h < 1 || prompt.w < 1 || prompt.values.empty()) throw ValidationError("encode_visual: empty image");
    const prompting::Image small = prompting::resize_area(prompting::to_gray(prompt), kVisualImage, kVisualImage);
    constexpr std::uint32_t per_row = kVisualImage / kVisualPatch;
    Mat<float> out(kVisualTokens, kVisualPatchDim);
    for (std::uint32_t pi = 0; pi < per_row; ++pi)
        for (std::uint32_t pj = 0; pj < per_row; ++pj)
            for (std::uint32_t di = 0; di < kVisualPatch; ++di)
                for (std::uint32_t dj = 0; dj < kVisualPatch; ++dj)
                    out(pi * per_row + pj, di * kVisualPatch + dj) =
                        small.at(pi * kVisualPatch + di, pj * kVisualPatch + dj);
    return out;
}

template <typename T>
Mat<T> fuse_conditions(const Mat<T>& text, const Mat<T>& visual) {
    if (visual.rows() == 0) return text;
    if (text.rows() == 0) return visual;
    if (text.cols() != visual.cols())
        throw ValidationError("fuse_conditions: text width " + std::to_string(text.cols()) + " != visual width " +
                              std::to_string(visual.cols()));
    Mat<T> out(text.rows() + visual.rows(), text.cols());
    out.topRows(text.rows()) = text;
    out.bottomRows(visual.rows()) = visual;
    return out;
}

template <typename T>
LatentClip dit_forward(const LatentClip& z_t, std::uint32_t t, const Mat<T>* cond, const SsgDitModel<T>& model) {
    const auto& cfg = model.config();
    if (z_t.frames != cfg.L || z_t.height != cfg.H || z_t.width != cfg.W || z_t.channels != cfg.C)
        throw ValidationError("dit_forward: latent shape does not match the model config");
    const Mat<T> raw = patchify(z_t, cfg.patch).template cast<T>();
    const Mat<T> out = model.forward_tokens(raw, t, cond);
    return unpatchify(out.template cast<float>(), cfg.L, cfg.H, cfg.W, cfg.C, cfg.patch);
}

#define SSG_INSTANTIATE(T)                                                                                     \
    template Params<T> zero_params<T>(const ModelConfig&);                                                     \
    template std::vector<Mat<T>> attention_probs<T>(const Mat<T>&, const Mat<T>&, std::uint32_t);               \
    template NormState<T> layer_norm<T>(const Mat<T>&, const Mat<T>&, const Mat<T>&);                           \
    template SelfAttentionState<T> self_attention<T>(const Mat<T>&, const BlockParams<T>&, std::uint32_t);      \
    template CrossAttentionState<T> cross_attention<T>(const Mat<T>&, const Mat<T>&, const BlockParams<T>&,     \
                                                       std::uint32_t);                                          \
    template BlockState<T> ssg_block<T>(const Mat<T>&, const Mat<T>*, const BlockParams<T>&, std::uint32_t,     \
                                        std::size_t, const AttentionProbe<T>*);                                 \
    template Mat<T> timestep_features<T>(std::uint32_t, std::uint32_t);                                         \
    template class SsgDitModel<T>;                                                                              \
    template Mat<T> fuse_conditions<T>(const Mat<T>&, const Mat<T>&);                                           \
    template LatentClip dit_forward<T>(const LatentClip&, std::uint32_t, const Mat<T>*, const SsgDitModel<T>&);

SSG_INSTANTIATE(float)
SSG_INSTANTIATE(double)

}  // namespace ssg::dit
