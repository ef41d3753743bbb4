#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "ssg/error.hpp"
#include "ssg/feature_io.hpp"
#include "ssg/prompting.hpp"
#include "ssg/rng.hpp"

using namespace ssg;
using namespace ssg::prompting;

namespace {

ScoreMask random_mask(SplitMix64& rng, std::uint32_t h, std::uint32_t w, double lo, double hi) {
    ScoreMask m(h, w);
    for (auto& v : m.values) v = static_cast<float>(lo + (hi - lo) * rng.uniform());
    return m;
}

ScoreMask random_unit_mask(SplitMix64& rng) {
    return random_mask(rng, 1 + std::uint32_t(rng.below(12)), 1 + std::uint32_t(rng.below(12)), 0.0, 1.0);
}

Image random_image(SplitMix64& rng, std::uint32_t h, std::uint32_t w, std::uint32_t c) {
    Image img(h, w, c);
    for (auto& v : img.values) v = static_cast<float>(rng.uniform());
    return img;
}

bool in_unit(const std::vector<float>& v) {
    return std::all_of(v.begin(), v.end(), [](float x) { return x >= 0.0f && x <= 1.0f; });
}

std::size_t argmax(const std::vector<float>& v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

features::FeatureBundle constant_bundle(std::uint32_t grid, std::uint32_t image) {
    features::FeatureBundle b;
    b.grid_h = b.grid_w = grid;
    b.d_e = 2;
    b.image_h = b.image_w = image;
    b.attn_feats.assign(std::size_t{grid} * grid * 2, 0.3f);
    b.mlp_feats.assign(std::size_t{grid} * grid * 2, -0.2f);
    b.text_embed = {1.0f, 0.0f};
    b.text = "flat";
    return b;
}

}  // namespace

TEST_CASE("l2_normalize") {
    const std::vector<float> v{3.0f, 4.0f};
    const auto n = l2_normalize(v);
    CHECK(n[0] == doctest::Approx(0.6).epsilon(1e-7));
    CHECK(n[1] == doctest::Approx(0.8).epsilon(1e-7));
    const std::vector<float> unit{0.0f, 1.0f, 0.0f};
    CHECK(l2_normalize(unit) == unit);
    const std::vector<float> zero{0.0f, 0.0f};
    CHECK_THROWS_AS(l2_normalize(zero), DegenerateInputError);

    SplitMix64 rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<float> x(1 + rng.below(40));
        for (auto& e : x) e = static_cast<float>(rng.symmetric() * 100.0);
        const auto y = l2_normalize(x);
        double s = 0.0, dot = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            s += double{y[i]} * y[i];
            dot += double{y[i]} * x[i];
        }
        CHECK(std::abs(std::sqrt(s) - 1.0) < 1e-6);
        CHECK(dot > 0.0);
    }
}

TEST_CASE("response_masks") {
    features::FeatureBundle b;
    b.grid_h = 2;
    b.grid_w = 3;
    b.d_e = 2;
    b.image_h = b.image_w = 4;
    b.attn_feats.assign(12, 0.0f);
    b.mlp_feats.assign(12, 0.0f);
    b.text_embed = {0.6f, 0.8f};
    b.mlp_feats[2 * 4] = 0.6f;  // cell (1,1) equals the text embedding
    b.mlp_feats[2 * 4 + 1] = 0.8f;
    const auto [a, m] = response_masks(b);
    CHECK(a.h == 2);
    CHECK(a.w == 3);
    CHECK(std::all_of(a.values.begin(), a.values.end(), [](float x) { return x == 0.0f; }));
    CHECK(m.at(1, 1) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(m.at(0, 0) == 0.0f);
}

TEST_CASE("minmax_normalize") {
    const ScoreMask m(1, 3, {1.0f, 2.0f, 3.0f});
    CHECK(minmax_normalize(m).values == std::vector<float>{0.0f, 0.5f, 1.0f});
    const ScoreMask flat(1, 3, {5.0f, 5.0f, 5.0f});
    CHECK(minmax_normalize(flat).values == std::vector<float>{0.5f, 0.5f, 0.5f});
    const ScoreMask unit(1, 4, {0.0f, 0.25f, 1.0f, 0.7f});
    CHECK(minmax_normalize(unit) == unit);
    CHECK_THROWS_AS(minmax_normalize(ScoreMask(1, 2, {0.0f, NAN})), ValidationError);
}

TEST_CASE("enhance") {
    const ScoreMask m(1, 4, {0.0f, 0.5f, 0.3f, 1.0f});
    CHECK(enhance(m, 1.0) == m);
    const auto e = enhance(m, 2.0);
    CHECK(e.values[1] == 0.25f);
    for (double g : {0.1, 0.5, 2.0, 7.0}) {
        const auto x = enhance(m, g);
        CHECK(x.values[0] == 0.0f);
        CHECK(x.values[3] == 1.0f);
    }
    CHECK_THROWS_AS(enhance(ScoreMask(1, 1, {1.5f}), 2.0), ValidationError);
    CHECK_THROWS_AS(enhance(m, 0.0), ValidationError);
}

TEST_CASE("inverse_normalize") {
    const ScoreMask m(1, 3, {1.0f, 2.0f, 3.0f});
    CHECK(inverse_normalize(m).values == std::vector<float>{1.0f, 0.5f, 0.0f});
    CHECK(inverse_normalize(ScoreMask(1, 2, {4.0f, 4.0f})).values == std::vector<float>{0.5f, 0.5f});
    SplitMix64 rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        const auto x = random_mask(rng, 3, 5, -2.0, 3.0);
        const auto twice = inverse_normalize(inverse_normalize(x));
        const auto once = minmax_normalize(x);
        for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(twice.values[i] - once.values[i]) <= 1e-6);
    }
}

TEST_CASE("avg_pool_3x3") {
    CHECK(avg_pool_3x3(ScoreMask(4, 5, 0.37f)) == ScoreMask(4, 5, 0.37f));
    ScoreMask spike(3, 3, 0.0f);
    spike.at(1, 1) = 1.0f;
    CHECK(avg_pool_3x3(spike).at(1, 1) == doctest::Approx(1.0 / 9.0).epsilon(1e-7));
    CHECK(avg_pool_3x3(ScoreMask(1, 1, {0.42f})).values[0] == doctest::Approx(0.42).epsilon(1e-7));

    // Hand-computed corner with replicate padding: neighbourhood rows {0,0,1}, cols {0,0,1}.
    const ScoreMask g(2, 2, {1.0f, 2.0f, 3.0f, 4.0f});
    CHECK(avg_pool_3x3(g).at(0, 0) == doctest::Approx((4 * 1.0 + 2 * 2.0 + 2 * 3.0 + 4.0) / 9.0).epsilon(1e-7));

    SplitMix64 rng(12);
    for (int trial = 0; trial < 1000; ++trial) {
        const auto x = random_mask(rng, 1 + std::uint32_t(rng.below(10)), 1 + std::uint32_t(rng.below(10)), -3.0, 4.0);
        const auto [lo, hi] = std::minmax_element(x.values.begin(), x.values.end());
        const auto y = avg_pool_3x3(x);
        for (float v : y.values) {
            REQUIRE(v >= *lo);
            REQUIRE(v <= *hi);
        }
    }
}

TEST_CASE("prob_or algebra") {
    CHECK(prob_or(ScoreMask(1, 1, {0.5f}), ScoreMask(1, 1, {0.5f})).values[0] == 0.75f);
    SplitMix64 rng(13);
    for (int trial = 0; trial < 1000; ++trial) {
        const auto a = random_unit_mask(rng);
        const auto b = random_mask(rng, a.h, a.w, 0.0, 1.0);
        const ScoreMask zero(a.h, a.w, 0.0f), one(a.h, a.w, 1.0f);
        REQUIRE(prob_or(a, zero) == a);
        REQUIRE(prob_or(zero, a) == a);
        REQUIRE(prob_or(one, a) == one);
        REQUIRE(prob_or(a, one) == one);
        const auto ab = prob_or(a, b);
        REQUIRE(ab == prob_or(b, a));
        REQUIRE(in_unit(ab.values));
        // Monotone: raising b never lowers the result.
        ScoreMask b2 = b;
        for (auto& v : b2.values) v = std::min(1.0f, v + static_cast<float>(rng.uniform() * 0.3));
        const auto ab2 = prob_or(a, b2);
        for (std::size_t i = 0; i < a.size(); ++i) {
            REQUIRE(ab.values[i] >= std::max(a.values[i], b.values[i]));
            REQUIRE(ab2.values[i] >= ab.values[i]);
        }
    }
    CHECK_THROWS_AS(prob_or(ScoreMask(1, 2, 0.1f), ScoreMask(2, 1, 0.1f)), ValidationError);
    CHECK_THROWS_AS(prob_or(ScoreMask(1, 1, {1.2f}), ScoreMask(1, 1, {0.1f})), ValidationError);
}

TEST_CASE("fuse_guidance on constant masks") {
    const auto f = fuse_guidance(ScoreMask(4, 4, 2.0f), ScoreMask(4, 4, -1.0f), PromptParams{});
    for (float v : f.values) CHECK(v == doctest::Approx(0.625).epsilon(1e-7));
}

TEST_CASE("fuse_guidance matches the reference composition for seed 7") {
    const auto b = features::synth_bundle(7, 24, 24, 16, 336, 336, {0.25, 0.5});
    const auto [a, m] = response_masks(b);
    const auto f = fuse_guidance(a, m, PromptParams{});
    double mean = 0.0;
    for (float v : f.values) mean += v;
    mean /= f.size();
    // tests/oracle/reference.py
    CHECK(std::abs(mean - 0.603148552) < 1e-6);
    // Rows 11 and 12 tie exactly (the centre lies on their boundary).
    const std::size_t am = argmax(f.values);
    CHECK((am == 11 * 24 + 5 || am == 12 * 24 + 5));
    CHECK(std::abs(f.at(11, 5) - f.at(12, 5)) < 1e-6);

    PromptParams no_pool;
    no_pool.pool = false;
    const auto g = fuse_guidance(a, m, no_pool);
    double mean_np = 0.0;
    for (float v : g.values) mean_np += v;
    CHECK(std::abs(mean_np / g.size() - 0.601688725) < 1e-6);
}

TEST_CASE("minmax and enhance keep the attention argmax") {
    SplitMix64 rng(14);
    for (int trial = 0; trial < 1000; ++trial) {
        const auto x = random_mask(rng, 1 + std::uint32_t(rng.below(24)), 1 + std::uint32_t(rng.below(24)), -5.0, 5.0);
        if (x.size() < 2) continue;
        const auto n = minmax_normalize(x);
        const auto e = enhance(n, 0.25 + 3.0 * rng.uniform());
        const float mx = *std::max_element(x.values.begin(), x.values.end());
        for (std::size_t i = 0; i < x.size(); ++i) {
            if (x.values[i] == mx) {
                REQUIRE(n.values[i] == 1.0f);
                REQUIRE(e.values[i] == 1.0f);
            }
        }
        REQUIRE(in_unit(n.values));
        REQUIRE(in_unit(e.values));
    }
}

TEST_CASE("pooling changes a spiked mask") {
    ScoreMask attn(6, 6, 0.0f);
    attn.at(2, 3) = 1.0f;
    const ScoreMask mlp(6, 6, 0.0f);
    PromptParams on, off;
    off.pool = false;
    const auto a = fuse_guidance(attn, mlp, on);
    const auto b = fuse_guidance(attn, mlp, off);
    CHECK(a != b);
    CHECK(b.at(2, 3) == 1.0f);
    // MLP branch is the constant 0.5; spike branch after pooling is 1/9.
    CHECK(a.at(2, 3) == doctest::Approx(1.0 / 9.0 + 0.5 - 0.5 / 9.0).epsilon(1e-6));
}

TEST_CASE("fuse_guidance range safety") {
    SplitMix64 rng(15);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::uint32_t h = 1 + std::uint32_t(rng.below(16)), w = 1 + std::uint32_t(rng.below(16));
        const auto a = random_mask(rng, h, w, -10.0, 10.0);
        const auto m = random_mask(rng, h, w, -10.0, 10.0);
        PromptParams p;
        p.gamma = 0.1 + 4.0 * rng.uniform();
        p.pool = rng.below(2) == 0;
        REQUIRE(in_unit(fuse_guidance(a, m, p).values));
    }
}

TEST_CASE("bicubic laws") {
    SplitMix64 rng(16);
    for (int trial = 0; trial < 200; ++trial) {
        const std::uint32_t h = 1 + std::uint32_t(rng.below(10)), w = 1 + std::uint32_t(rng.below(10));
        const float c = static_cast<float>(rng.symmetric() * 3.0);
        const auto up = bicubic_upsample(ScoreMask(h, w, c), 1 + std::uint32_t(rng.below(60)),
                                         1 + std::uint32_t(rng.below(60)));
        for (float v : up.values) REQUIRE(v == c);
        const auto x = random_mask(rng, h, w, -1.0, 2.0);
        REQUIRE(bicubic_upsample(x, h, w) == x);
    }
    CHECK_THROWS_AS(bicubic_upsample(ScoreMask(2, 2, 0.0f), 0, 3), ValidationError);
}

TEST_CASE("bicubic 2x2 to 4x4 matches the a=-0.5 kernel evaluated by hand") {
    const ScoreMask m(2, 2, {0.0f, 1.0f, 0.0f, 1.0f});
    const auto up = bicubic_upsample(m, 4, 4);
    // Source positions -0.25, 0.25, 0.75, 1.25 with clamped taps (reference.py).
    const double profile[4] = {-0.0703125, 0.203125, 0.796875, 1.0703125};
    for (std::uint32_t i = 0; i < 4; ++i)
        for (std::uint32_t j = 0; j < 4; ++j) CHECK(up.at(i, j) == doctest::Approx(profile[j]).epsilon(1e-7));
}

TEST_CASE("to_guidance") {
    const auto g = to_guidance(ScoreMask(1, 3, {-0.1f, 0.4f, 0.9f}));
    CHECK(g.values()[0] == 0.0f);
    CHECK(g.values()[1] == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(g.values()[2] == 1.0f);
    const auto flat = to_guidance(ScoreMask(2, 2, 3.0f));
    for (float v : flat.values()) CHECK(v == 0.5f);
    SplitMix64 rng(17);
    for (int trial = 0; trial < 1000; ++trial) {
        const auto x = random_mask(rng, 1 + std::uint32_t(rng.below(20)), 1 + std::uint32_t(rng.below(20)), -50.0, 50.0);
        REQUIRE(in_unit(to_guidance(x).values()));
    }
    CHECK_THROWS_AS(GuidanceMask(1, 1, {1.5f}), ValidationError);
}

TEST_CASE("gaussian_blur") {
    CHECK(gaussian_blur(Image(9, 7, 3, 0.3f), 2.0) == Image(9, 7, 3, 0.3f));

    Image dot(15, 15, 1, 0.0f);
    dot.at(7, 7) = 1.0f;
    const auto b = gaussian_blur(dot, 1.0);
    // Normalized 7x7 discrete kernel from tests/oracle/reference.py.
    CHECK(b.at(7, 7) == doctest::Approx(0.15924112569070245).epsilon(1e-6));
    CHECK(b.at(7, 8) == doctest::Approx(0.09658462501856413).epsilon(1e-6));
    CHECK(b.at(7, 11) == 0.0f);

    SplitMix64 rng(18);
    for (int trial = 0; trial < 200; ++trial) {
        const auto img = random_image(rng, 1 + std::uint32_t(rng.below(20)), 1 + std::uint32_t(rng.below(20)),
                                      rng.below(2) ? 3 : 1);
        const auto out = gaussian_blur(img, 0.3 + 3.0 * rng.uniform());
        const auto [lo, hi] = std::minmax_element(img.values.begin(), img.values.end());
        for (float v : out.values) {
            REQUIRE(v >= *lo);
            REQUIRE(v <= *hi);
        }
    }

    // Mass is approximately conserved away from strong border effects.
    const auto img = random_image(rng, 64, 64, 1);
    const auto out = gaussian_blur(img, 1.5);
    double m0 = 0.0, m1 = 0.0;
    for (std::size_t i = 0; i < img.values.size(); ++i) {
        m0 += img.values[i];
        m1 += out.values[i];
    }
    CHECK(std::abs(m0 - m1) / img.values.size() < 1e-3);
    CHECK_THROWS_AS(gaussian_blur(img, 0.0), ValidationError);
}

TEST_CASE("alpha_blend") {
    SplitMix64 rng(19);
    const auto img = random_image(rng, 5, 6, 3);
    const auto bg = random_image(rng, 5, 6, 3);
    CHECK(alpha_blend(img, bg, GuidanceMask::filled(5, 6, 1.0f)) == img);
    CHECK(alpha_blend(img, bg, GuidanceMask::filled(5, 6, 0.0f)) == bg);
    Image a(1, 1, 1, 0.8f), c(1, 1, 1, 0.4f);
    CHECK(alpha_blend(a, c, GuidanceMask::filled(1, 1, 0.5f)).values[0] == doctest::Approx(0.6).epsilon(1e-6));
    for (int trial = 0; trial < 1000; ++trial) {
        const std::uint32_t h = 1 + std::uint32_t(rng.below(8)), w = 1 + std::uint32_t(rng.below(8));
        const auto x = random_image(rng, h, w, 1), y = random_image(rng, h, w, 1);
        std::vector<float> m(std::size_t{h} * w);
        for (auto& v : m) v = static_cast<float>(rng.uniform());
        REQUIRE(in_unit(alpha_blend(x, y, GuidanceMask(h, w, m)).values));
    }
    try {
        alpha_blend(img, Image(4, 6, 3), GuidanceMask::filled(5, 6, 1.0f));
        FAIL("expected a validation error");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("5x6") != std::string::npos);
        CHECK(std::string(e.what()).find("4x6") != std::string::npos);
    }
}

TEST_CASE("compose_prompt with forced masks") {
    SplitMix64 rng(20);
    const auto img = random_image(rng, 40, 30, 3);
    CHECK(compose_prompt(img, GuidanceMask::filled(40, 30, 1.0f), 3.0) == img);
    CHECK(compose_prompt(img, GuidanceMask::filled(40, 30, 0.0f), 3.0) == gaussian_blur(img, 3.0));
}

TEST_CASE("make_prompt on a degenerate bundle") {
    SplitMix64 rng(21);
    const auto img = random_image(rng, 32, 32, 1);
    const auto r = make_prompt(img, constant_bundle(8, 32));
    for (float v : r.mask.values()) CHECK(v == 0.5f);
    const auto blur = gaussian_blur(img, 3.0);
    for (std::size_t i = 0; i < img.values.size(); ++i)
        CHECK(r.prompt.values[i] == doctest::Approx(0.5 * img.values[i] + 0.5 * blur.values[i]).epsilon(1e-6));
}

TEST_CASE("make_prompt on a flat gray image returns the image") {
    const Image gray(64, 64, 1, 0.5f);
    const auto b = features::synth_bundle(7, 24, 24, 16, 64, 64, {0.25, 0.5});
    CHECK(make_prompt(gray, b).prompt == gray);
}

TEST_CASE("make_prompt keeps the subject region sharp on white noise") {
    SplitMix64 rng(22);
    const std::uint32_t n = 96;
    const auto img = random_image(rng, n, n, 1);
    const auto b = features::synth_bundle(7, 24, 24, 16, n, n, {0.25, 0.5});
    const auto r = make_prompt(img, b);
    // Disc of radius 0.25 * side around the subject centre.
    double in_sum = 0.0, out_sum = 0.0;
    std::size_t in_n = 0, out_n = 0;
    for (std::uint32_t i = 0; i < n; ++i)
        for (std::uint32_t j = 0; j < n; ++j) {
            const double dx = (j + 0.5) / n - 0.25, dy = (i + 0.5) / n - 0.5;
            const double diff = std::abs(r.prompt.at(i, j) - img.at(i, j));
            if (dx * dx + dy * dy < 0.25 * 0.25) {
                in_sum += diff;
                ++in_n;
            } else {
                out_sum += diff;
                ++out_n;
            }
        }
    CHECK(in_sum / in_n < out_sum / out_n);
}

TEST_CASE("make_prompt rejects mismatched geometry and names both sizes") {
    const Image img(30, 40, 1, 0.5f);
    const auto b = features::synth_bundle(1, 4, 4, 4, 32, 32, {});
    try {
        make_prompt(img, b);
        FAIL("expected a validation error");
    } catch (const ValidationError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("32x32") != std::string::npos);
        CHECK(msg.find("30x40") != std::string::npos);
    }
}

TEST_CASE("make_prompt is deterministic and exposes intermediates") {
    SplitMix64 rng(23);
    const auto img = random_image(rng, 48, 40, 3);
    const auto b = features::synth_bundle(9, 24, 24, 16, 48, 40, {0.7, 0.3});
    const auto r1 = make_prompt(img, b);
    const auto r2 = make_prompt(img, b);
    CHECK(r1.prompt == r2.prompt);
    CHECK(r1.mask.values() == r2.mask.values());
    CHECK(r1.intermediates.m_attn.h == 24);
    CHECK(r1.intermediates.fused.w == 24);
    CHECK(r1.intermediates.upsampled.h == 48);
    CHECK(r1.intermediates.upsampled.w == 40);
    CHECK(in_unit(r1.prompt.values));
}

TEST_CASE("ablated branches") {
    const auto b = features::synth_bundle(7, 24, 24, 16, 64, 64, {0.25, 0.5});
    const auto [a, m] = response_masks(b);
    PromptParams attn_only, mlp_only;
    attn_only.branches = MaskBranches::AttentionOnly;
    mlp_only.branches = MaskBranches::MlpOnly;
    CHECK(fuse_guidance(a, m, attn_only) == avg_pool_3x3(enhance(minmax_normalize(a), 2.0)));
    CHECK(fuse_guidance(a, m, mlp_only) == avg_pool_3x3(inverse_normalize(m)));
}

TEST_CASE("image utilities") {
    Image rgb(2, 2, 3, 0.0f);
    rgb.at(0, 0, 0) = 0.3f;
    rgb.at(0, 0, 1) = 0.6f;
    rgb.at(0, 0, 2) = 0.9f;
    CHECK(to_gray(rgb).at(0, 0) == doctest::Approx(0.6).epsilon(1e-6));
    Image checker(4, 4, 1, 0.0f);
    for (std::uint32_t i = 0; i < 4; ++i)
        for (std::uint32_t j = 0; j < 4; ++j) checker.at(i, j) = float((i + j) % 2);
    const auto small = resize_area(checker, 2, 2);
    for (float v : small.values) CHECK(v == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(resize_area(Image(5, 3, 1, 0.25f), 8, 7) == Image(8, 7, 1, 0.25f));
}
