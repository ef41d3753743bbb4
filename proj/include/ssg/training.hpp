#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ssg/dit.hpp"
#include "ssg/feature_io.hpp"
#include "ssg/prompting.hpp"

namespace ssg::training {

using dit::LatentClip;
using dit::Mat;
using dit::SsgDitModel;

// ---------------------------------------------------------------------------
// Noise schedule

struct NoiseSchedule {
    std::uint32_t T = 0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;

    static NoiseSchedule linear(std::uint32_t T, double beta_start = 1e-4, double beta_end = 0.02);
    void validate() const;
};

/// z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps
LatentClip forward_noise(const LatentClip& z0, std::uint32_t t, const LatentClip& eps, const NoiseSchedule& schedule);

// ---------------------------------------------------------------------------
// Synthetic data

/// The 3x3 anchor grid; caption id k maps to anchor k (row-major).
std::span<const features::Point> anchors();
std::uint32_t caption_for_anchor(features::Point p);

struct SyntheticSample {
    LatentClip clip;
    std::uint32_t caption_id = 0;
    features::Point blob_center;
    features::Point drift;  // per frame, normalized units
    prompting::Image prompt_image;
};

struct DataOptions {
    prompting::MaskBranches branches = prompting::MaskBranches::Fused;
};

/// Blob clip on a zero background: channel c holds 0.3 * amp_c * g for a
/// Gaussian g of one latent cell width centred at blob_center + f * drift.
LatentClip render_clip(const dit::ModelConfig& cfg, features::Point center, features::Point drift);

/// 32x32 frame with a blob at every anchor. Which one is the subject is
/// only expressed through the guidance mask.
prompting::Image render_scene();

/// Visual prompt for an anchor, built with make_prompt over synth_bundle.
prompting::Image anchor_prompt(features::Point center, std::uint64_t bundle_seed, const DataOptions& opts = {});

std::vector<SyntheticSample> gen_dataset(std::uint64_t seed, std::size_t n, const dit::ModelConfig& cfg,
                                         const DataOptions& opts = {});

/// Intensity-weighted centroid of channel 0 of one frame, normalized to
/// [0,1] (x = column axis). Weights are max(v, 0)^4.
features::Point blob_centroid(const LatentClip& clip, std::uint32_t frame = 0);

double pearson(std::span<const double> x, std::span<const double> y);

// ---------------------------------------------------------------------------
// Training

enum class Phase { Backbone, Adapter };

/// Default SGD learning rate of a phase.
double default_lr(Phase phase);

inline constexpr std::size_t kTrainSamples = 512;
inline constexpr std::size_t kValSamples = 256;
/// Validation cadence and trailing window of the adapter loss comparison.
inline constexpr std::uint32_t kValEvery = 10;
inline constexpr std::uint32_t kValWindow = 100;

/// Which condition tokens feed the adapter.
enum class ConditionMode { TextAndVisual, VisualOnly };

struct TrainConfig {
    Phase phase = Phase::Backbone;
    std::uint32_t steps = 2000;
    std::uint32_t batch = 8;
    std::optional<double> lr;  // unset: default_lr(phase)
    std::uint64_t seed = 1;
    std::uint32_t T = 100;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    ConditionMode condition = ConditionMode::TextAndVisual;
    // Validation every `val_every` steps on `val_set` (0 disables), from
    // step `val_start` on.
    std::uint32_t val_every = 0;
    std::uint32_t val_start = 0;

    void validate() const;
    double effective_lr() const { return lr ? *lr : default_lr(phase); }
    NoiseSchedule schedule() const { return NoiseSchedule::linear(T, beta_start, beta_end); }
};

/// A fixed (sample, t, eps) triple set for comparable validation losses.
struct ValidationSet {
    std::vector<SyntheticSample> samples;
    std::vector<std::uint32_t> steps;
    std::vector<LatentClip> noise;
};

ValidationSet make_validation_set(std::uint64_t seed, std::size_t n, const dit::ModelConfig& cfg,
                                  const DataOptions& opts = {});

struct TrainReport {
    std::vector<double> loss;
    std::vector<double> grad_norm;
    std::vector<std::pair<std::uint32_t, double>> val_loss;
    std::uint64_t backbone_checksum_before = 0;
    std::uint64_t backbone_checksum_after = 0;
};

/// One denoising example: a clean sample, a timestep and the noise draw.
struct Example {
    const SyntheticSample* sample = nullptr;
    std::uint32_t t = 0;
    LatentClip eps;
};

/// Mean epsilon-MSE over `batch`. With `grads` non-null, accumulates the
/// gradient of that mean. `use_adapter = false` disables the adapter
/// branch (backbone pretraining and the unconditional baseline).
double loss_and_grad(const SsgDitModel<float>& model, std::span<const Example> batch, const NoiseSchedule& schedule,
                     bool use_adapter, ConditionMode mode, dit::Params<float>* grads);

/// p -= lr * g for every tensor the phase may update; returns the gradient
/// norm over those tensors.
double apply_sgd(SsgDitModel<float>& model, const dit::Params<float>& grads, double lr, Phase phase);

/// Condition tokens for one sample: text tokens for the caption followed by
/// the encoded prompt (text omitted in VisualOnly mode).
Mat<float> build_condition(const SsgDitModel<float>& model, std::uint32_t caption_id,
                           const prompting::Image& prompt, ConditionMode mode);

/// Plain SGD on the epsilon-prediction MSE.
///
/// Backbone phase: the adapter branch is disabled and every backbone tensor
/// is updated; the backbone is frozen afterwards. Adapter phase: requires a
/// frozen backbone and updates only unfrozen tensors.
TrainReport train(SsgDitModel<float>& model, const std::vector<SyntheticSample>& data, const TrainConfig& cfg,
                  const ValidationSet* val = nullptr,
                  const std::function<void(std::uint32_t step, double loss)>& progress = {});

/// Mean epsilon-MSE on a validation set; `use_adapter = false` evaluates
/// the adapter-free backbone.
double validation_loss(const SsgDitModel<float>& model, const ValidationSet& val, ConditionMode mode,
                       bool use_adapter);

/// Mean of the validation losses recorded in the last `window` steps.
double tail_val_loss(const TrainReport& report, std::uint32_t steps, std::uint32_t window = kValWindow);

void write_report_csv(const TrainReport& report, std::ostream& out);

// ---------------------------------------------------------------------------
// Sampling and evaluation

/// DDPM ancestral sampling from a seeded unit Gaussian, with the predicted
/// clean latent clipped to [-1, 1] at every step.
LatentClip sample(const SsgDitModel<float>& model, const Mat<float>* cond, const NoiseSchedule& schedule,
                  std::uint64_t seed);

struct Controllability {
    double r_x = 0.0;
    double r_y = 0.0;
    std::vector<features::Point> targets;
    std::vector<features::Point> centroids;

    double min_r() const { return r_x < r_y ? r_x : r_y; }
};

struct ControlEvalOptions {
    std::uint32_t seeds_per_anchor = 5;
    std::uint64_t seed = 1000;
    std::uint64_t bundle_seed = 77;
    ConditionMode condition = ConditionMode::TextAndVisual;
    DataOptions data{};
};

Controllability evaluate_controllability(const SsgDitModel<float>& model, const NoiseSchedule& schedule,
                                         const ControlEvalOptions& opts = {});

// ---------------------------------------------------------------------------
// Gradient checking

struct GradcheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    std::size_t elements = 0;
};

struct GradcheckReport {
    std::vector<GradcheckEntry> tensors;
    double max_rel_err = 0.0;
};

struct GradcheckOptions {
    double step = 1e-5;
    // Test fixture: multiplies the analytic gradient of this tensor.
    std::string corrupt_tensor;
    double corrupt_factor = 1.0;
};

/// Elementwise |a - n| / max(|a| + |n|, floor) with floor 1e-8.
double relative_error(double analytic, double numeric);

/// Tiny model in double precision (D=8, heads=2, blocks=1, 8 tokens),
/// every tensor checked against central differences of the MSE loss.
dit::ModelConfig gradcheck_config();
GradcheckReport gradcheck(std::uint64_t seed, const GradcheckOptions& opts = {});

/// Linear layer loss 0.5 |X W - Y|^2; exercises the checker itself.
GradcheckReport gradcheck_linear(std::uint64_t seed, const GradcheckOptions& opts = {});

}  // namespace ssg::training
