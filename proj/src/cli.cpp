#include "ssg/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "ssg/checkpoint.hpp"
#include "ssg/error.hpp"
#include "ssg/feature_io.hpp"
#include "ssg/image_io.hpp"
#include "ssg/prompting.hpp"
#include "ssg/training.hpp"

namespace ssg::cli {

namespace {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Argument parsing helpers

std::pair<std::uint32_t, std::uint32_t> parse_dims(const std::string& s, const char* flag) {
    unsigned a = 0, b = 0;
    char x = 0, extra = 0;
    if (std::sscanf(s.c_str(), "%u%c%u%c", &a, &x, &b, &extra) != 3 || (x != 'x' && x != 'X') || a == 0 || b == 0)
        throw ValidationError(std::string(flag) + ": expected HxW with positive sizes, got '" + s + "'");
    return {a, b};
}

features::Point parse_point(const std::string& s, const char* flag) {
    double x = 0, y = 0;
    char comma = 0, extra = 0;
    if (std::sscanf(s.c_str(), "%lf%c%lf%c", &x, &comma, &y, &extra) != 3 || comma != ',')
        throw ValidationError(std::string(flag) + ": expected X,Y, got '" + s + "'");
    return {x, y};
}

prompting::MaskBranches parse_branches(const std::string& s) {
    if (s == "fused") return prompting::MaskBranches::Fused;
    if (s == "attention") return prompting::MaskBranches::AttentionOnly;
    if (s == "mlp") return prompting::MaskBranches::MlpOnly;
    throw ValidationError("--branches: expected fused, attention or mlp, got '" + s + "'");
}

training::ConditionMode parse_condition(const std::string& s) {
    if (s == "text+visual") return training::ConditionMode::TextAndVisual;
    if (s == "visual") return training::ConditionMode::VisualOnly;
    throw ValidationError("--condition: expected text+visual or visual, got '" + s + "'");
}

const std::string& require(const std::string& value, const char* flag) {
    if (value.empty()) throw ValidationError(std::string(flag) + " is required");
    return value;
}

bool is_meta(const CLI::Option* opt) {
    const std::string name = opt->get_single_name();
    return name == "help" || name == "config";
}

// Applies a flat JSON object of option values. Values already given on the
// command line win; keys without a matching option are rejected.
void apply_config_file(CLI::App& sub, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path);
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw ValidationError("config file " + path + ": " + e.what());
    }
    if (!doc.is_object()) throw ValidationError("config file " + path + ": expected a JSON object");
    for (const auto& [key, value] : doc.items()) {
        CLI::Option* opt = sub.get_option_no_throw("--" + key);
        if (opt == nullptr || is_meta(opt))
            throw ConfigError("config file " + path + ": unknown key '" + key + "' for " + sub.get_name());
        if (opt->count() > 0) continue;
        std::string text;
        if (value.is_string())
            text = value.get<std::string>();
        else if (value.is_boolean() || value.is_number())
            text = value.dump();
        else
            throw ValidationError("config file " + path + ": key '" + key + "' must be a string, number or bool");
        opt->add_result(text);
        opt->run_callback();
    }
}

// Every non-meta option with its resolved value, as a config-file object.
json resolved_config(const CLI::App& sub) {
    json cfg = json::object();
    for (const CLI::Option* opt : sub.get_options()) {
        if (is_meta(opt)) continue;
        const auto& results = opt->results();
        std::string value = results.empty() ? opt->get_default_str() : results.back();
        cfg[opt->get_single_name()] = value;
    }
    return cfg;
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec || !std::filesystem::is_directory(dir)) throw IoError("cannot create directory " + dir);
}

std::string join(const std::string& dir, const std::string& name) {
    return (std::filesystem::path(dir) / name).string();
}

void dump_mask(const prompting::ScoreMask& m, const std::string& dir, const std::string& name) {
    image_io::write_heatmap_png(m.values, m.h, m.w, 0.0f, 1.0f, join(dir, name + ".png"));
    image_io::write_raw_f32(m.values, join(dir, name + ".f32"));
}

// ---------------------------------------------------------------------------
// Subcommands

struct PromptArgs {
    std::string image, features, out, dump_dir;
    double gamma = 2.0;
    bool pool = true;
    double blur_sigma = 0.0;
    std::string branches = "fused";
};

int cmd_prompt(const PromptArgs& a, std::ostream& out) {
    prompting::PromptParams params;
    params.gamma = a.gamma;
    params.pool = a.pool;
    if (a.blur_sigma > 0.0) params.blur_sigma = a.blur_sigma;
    params.branches = parse_branches(a.branches);
    const auto img = image_io::read_png(require(a.image, "--image"));
    const auto bundle = features::load_bundle(require(a.features, "--features"));
    require(a.out, "--out");
    const auto result = prompting::make_prompt(img, bundle, params);
    image_io::write_png(result.prompt, a.out);
    if (!a.dump_dir.empty()) {
        ensure_dir(a.dump_dir);
        dump_mask(result.intermediates.m_attn, a.dump_dir, "m_attn");
        dump_mask(result.intermediates.m_mlp, a.dump_dir, "m_mlp");
        dump_mask(result.intermediates.fused, a.dump_dir, "fused");
        dump_mask(result.intermediates.upsampled, a.dump_dir, "upsampled");
        image_io::write_heatmap_png(result.mask.values(), result.mask.h(), result.mask.w(), 0.0f, 1.0f,
                                    join(a.dump_dir, "guidance.png"));
        image_io::write_raw_f32(result.mask.values(), join(a.dump_dir, "guidance.f32"));
    }
    out << "wrote " << a.out << " (" << result.prompt.h << "x" << result.prompt.w << ")\n";
    return 0;
}

struct SynthArgs {
    std::uint64_t seed = 0;
    std::string grid = "24x24";
    std::uint32_t dim = 16;
    std::string center = "0.5,0.5";
    std::string image_size = "336x336";
    std::string text = "synthetic";
    std::string out;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
    const auto [gh, gw] = parse_dims(a.grid, "--grid");
    const auto [ih, iw] = parse_dims(a.image_size, "--image-size");
    const auto c = parse_point(a.center, "--center");
    auto bundle = features::synth_bundle(a.seed, gh, gw, a.dim, ih, iw, c);
    bundle.text = a.text;
    features::save_bundle(bundle, require(a.out, "--out"));
    out << "wrote " << a.out << "\n";
    return 0;
}

struct TrainArgs {
    std::string phase = "backbone";
    std::uint64_t seed = 1;
    std::uint32_t steps = 2000;
    std::uint32_t batch = training::TrainConfig{}.batch;
    double lr = 0.0;
    std::uint32_t samples = training::kTrainSamples;
    std::uint32_t val_samples = training::kValSamples;
    std::uint32_t val_every = training::kValEvery;
    std::string condition = "text+visual";
    std::string out, init, report;
    dit::ModelConfig model;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
    training::TrainConfig cfg;
    if (a.phase == "backbone")
        cfg.phase = training::Phase::Backbone;
    else if (a.phase == "adapter")
        cfg.phase = training::Phase::Adapter;
    else
        throw ValidationError("--phase: expected backbone or adapter, got '" + a.phase + "'");
    cfg.seed = a.seed;
    cfg.steps = a.steps;
    cfg.batch = a.batch;
    if (a.lr > 0.0) cfg.lr = a.lr;
    cfg.condition = parse_condition(a.condition);
    cfg.val_every = a.val_samples > 0 ? std::max<std::uint32_t>(a.val_every, 1) : 0;
    cfg.val_start = cfg.steps > training::kValWindow ? cfg.steps - training::kValWindow : 0;
    require(a.out, "--out");
    if (cfg.phase == training::Phase::Adapter && a.init.empty())
        throw ConfigError("adapter phase requires --init with a pretrained backbone checkpoint");

    auto model = a.init.empty() ? dit::SsgDitModel<float>(a.model, a.seed) : checkpoint::load_model(a.init);
    cfg.T = model.config().T;
    const auto data = training::gen_dataset(a.seed, a.samples, model.config());
    std::optional<training::ValidationSet> val;
    if (a.val_samples > 0) val = training::make_validation_set(a.seed + 1, a.val_samples, model.config());

    out << "lr=" << cfg.effective_lr() << "\n";
    const auto report = training::train(model, data, cfg, val ? &*val : nullptr, [&](std::uint32_t step, double loss) {
        if (step % 250 == 0 || step + 1 == cfg.steps) out << "step " << step << " loss " << loss << "\n";
    });
    checkpoint::save_model(model, a.out);
    if (!a.report.empty()) {
        std::ofstream csv(a.report);
        if (!csv) throw IoError("cannot open report file " + a.report);
        training::write_report_csv(report, csv);
        if (!csv) throw IoError("failed writing report file " + a.report);
    }
    out << "backbone_checksum_before=" << report.backbone_checksum_before
        << " backbone_checksum_after=" << report.backbone_checksum_after << "\n";
    if (val) {
        const bool adapter = cfg.phase == training::Phase::Adapter;
        out << "val_loss=" << (report.val_loss.empty() ? training::validation_loss(model, *val, cfg.condition, adapter)
                                                       : training::tail_val_loss(report, cfg.steps));
        if (adapter) out << " backbone_val_loss=" << training::validation_loss(model, *val, cfg.condition, false);
        out << "\n";
    }
    out << "wrote " << a.out << "\n";
    return 0;
}

struct SampleArgs {
    std::string ckpt, out;
    std::uint32_t caption_id = 0;
    std::uint64_t seed = 0;
    std::uint64_t prompt_seed = training::ControlEvalOptions{}.bundle_seed;
    std::string condition = "text+visual";
    std::string branches = "fused";
};

int cmd_sample(const SampleArgs& a, std::ostream& out) {
    const auto anchors = training::anchors();
    if (a.caption_id >= anchors.size())
        throw ValidationError("--caption-id must be below " + std::to_string(anchors.size()));
    training::DataOptions data;
    data.branches = parse_branches(a.branches);
    const auto mode = parse_condition(a.condition);
    const auto model = checkpoint::load_model(require(a.ckpt, "--ckpt"));
    require(a.out, "--out");
    const auto prompt = training::anchor_prompt(anchors[a.caption_id], a.prompt_seed, data);
    const auto cond = training::build_condition(model, a.caption_id, prompt, mode);
    const auto schedule = training::NoiseSchedule::linear(model.config().T);
    const auto clip = training::sample(model, &cond, schedule, a.seed);

    ensure_dir(a.out);
    image_io::write_png(prompt, join(a.out, "prompt.png"));
    const std::size_t frame_size = std::size_t{clip.height} * clip.width * clip.channels;
    for (std::uint32_t f = 0; f < clip.frames; ++f) {
        std::vector<float> ch0(std::size_t{clip.height} * clip.width);
        for (std::uint32_t i = 0; i < clip.height; ++i)
            for (std::uint32_t j = 0; j < clip.width; ++j) ch0[std::size_t{i} * clip.width + j] = clip.at(f, i, j, 0);
        std::ostringstream name;
        name << "frame_" << std::setw(3) << std::setfill('0') << f;
        image_io::write_heatmap_png(ch0, clip.height, clip.width, -1.0f, 1.0f, join(a.out, name.str() + ".png"));
        image_io::write_raw_f32(std::span(clip.values).subspan(f * frame_size, frame_size),
                                join(a.out, name.str() + ".f32"));
    }
    const auto c = training::blob_centroid(clip, 0);
    out << "target=" << anchors[a.caption_id].x << "," << anchors[a.caption_id].y << " centroid=" << c.x << ","
        << c.y << "\n";
    out << "wrote " << clip.frames << " frames to " << a.out << "\n";
    return 0;
}

int cmd_gradcheck(std::uint64_t seed, double step, std::ostream& out) {
    training::GradcheckOptions opts;
    opts.step = step;
    const auto report = training::gradcheck(seed, opts);
    for (const auto& e : report.tensors) out << e.name << " rel_err=" << e.max_rel_err << "\n";
    out << "max_rel_err=" << report.max_rel_err << "\n";
    return report.max_rel_err < 1e-4 ? 0 : 1;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Spatial-signal-guided video diffusion toolkit", "ssg"};
    app.set_help_flag();
    app.set_help_all_flag("-h,--help", "Print help for every subcommand and exit");
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();

    auto add_config = [](CLI::App* sub, std::string& path) {
        sub->add_option("--config", path, "JSON object of option values; command-line flags take precedence");
    };

    PromptArgs pa;
    std::string prompt_cfg;
    auto* prompt = app.add_subcommand("prompt", "Compose a visual prompt from an image and an SSGF feature bundle");
    prompt->add_option("--image", pa.image, "Input PNG (grayscale or RGB)");
    prompt->add_option("--features", pa.features, "SSGF feature bundle matching the image size");
    prompt->add_option("--out", pa.out, "Output prompt PNG");
    prompt->add_option("--dump-intermediates", pa.dump_dir, "Directory for mask heatmaps and f32 sidecars");
    prompt->add_option("--gamma", pa.gamma, "Mask enhancement exponent");
    prompt->add_option("--pool", pa.pool, "Apply the 3x3 mean pooling to the fused mask (true/false)");
    prompt->add_option("--blur-sigma", pa.blur_sigma, "Background blur sigma in pixels (0 = max(3, 0.02 * min side))");
    prompt->add_option("--branches", pa.branches, "Mask branches: fused, attention or mlp");
    add_config(prompt, prompt_cfg);

    SynthArgs sa;
    std::string synth_cfg;
    auto* synth = app.add_subcommand("synth-features", "Write a deterministic synthetic SSGF bundle");
    synth->add_option("--seed", sa.seed, "SplitMix64 seed");
    synth->add_option("--grid", sa.grid, "Patch grid HxW");
    synth->add_option("--dim", sa.dim, "Embedding width");
    synth->add_option("--center", sa.center, "Normalized response centre X,Y");
    synth->add_option("--image-size", sa.image_size, "Source image size HxW");
    synth->add_option("--text", sa.text, "Caption stored in the bundle");
    synth->add_option("--out", sa.out, "Output .ssgf path");
    add_config(synth, synth_cfg);

    TrainArgs ta;
    std::string train_cfg;
    auto* train = app.add_subcommand("train", "Train the backbone or the adapter on synthetic blob clips");
    train->add_option("--phase", ta.phase, "backbone or adapter");
    train->add_option("--seed", ta.seed, "Seed for data, initialization and batches");
    train->add_option("--steps", ta.steps, "SGD steps");
    train->add_option("--batch", ta.batch, "Examples per step");
    train->add_option("--lr", ta.lr, "Learning rate (0 = phase default)");
    train->add_option("--samples", ta.samples, "Training clips");
    train->add_option("--val-samples", ta.val_samples, "Validation clips (0 disables validation)");
    train->add_option("--val-every", ta.val_every, "Validation interval in steps");
    train->add_option("--condition", ta.condition, "Adapter condition: text+visual or visual");
    train->add_option("--out", ta.out, "Output checkpoint");
    train->add_option("--init", ta.init, "Initial checkpoint (required for the adapter phase)");
    train->add_option("--report", ta.report, "CSV of step,loss,grad_norm");
    train->add_option("--frames", ta.model.L, "Latent frames L");
    train->add_option("--height", ta.model.H, "Latent height H");
    train->add_option("--width", ta.model.W, "Latent width W");
    train->add_option("--channels", ta.model.C, "Latent channels C");
    train->add_option("--patch-t", ta.model.patch.t, "Patch size along frames");
    train->add_option("--patch-h", ta.model.patch.h, "Patch size along height");
    train->add_option("--patch-w", ta.model.patch.w, "Patch size along width");
    train->add_option("--model-dim", ta.model.D, "Model width D");
    train->add_option("--heads", ta.model.heads, "Attention heads");
    train->add_option("--blocks", ta.model.blocks, "Transformer blocks");
    train->add_option("--ffn-mult", ta.model.ffn_mult, "FFN hidden ratio");
    train->add_option("--cond-dim", ta.model.d_cond, "Condition token width");
    train->add_option("--text-tokens", ta.model.n_text_tokens, "Text tokens per caption");
    train->add_option("--timesteps", ta.model.T, "Diffusion steps T");
    add_config(train, train_cfg);

    SampleArgs sm;
    std::string sample_cfg;
    auto* sample = app.add_subcommand("sample", "Sample a clip conditioned on an anchor caption and its visual prompt");
    sample->add_option("--ckpt", sm.ckpt, "Checkpoint");
    sample->add_option("--caption-id", sm.caption_id, "Caption / anchor index 0..8");
    sample->add_option("--seed", sm.seed, "Sampling seed");
    sample->add_option("--prompt-seed", sm.prompt_seed, "Seed of the synthetic feature bundle behind the prompt");
    sample->add_option("--condition", sm.condition, "text+visual or visual");
    sample->add_option("--branches", sm.branches, "Prompt mask branches: fused, attention or mlp");
    sample->add_option("--out", sm.out, "Output directory");
    add_config(sample, sample_cfg);

    std::uint64_t gc_seed = 1;
    double gc_step = training::GradcheckOptions{}.step;
    std::string gc_cfg;
    auto* gradcheck = app.add_subcommand("gradcheck", "Compare analytic gradients with central differences");
    gradcheck->add_option("--seed", gc_seed, "Seed for the tiny model and data");
    gradcheck->add_option("--step", gc_step, "Finite-difference step");
    add_config(gradcheck, gc_cfg);

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }

    try {
        CLI::App* sub = app.get_subcommands().front();
        const std::string* cfg_path = sub == prompt      ? &prompt_cfg
                                      : sub == synth     ? &synth_cfg
                                      : sub == train     ? &train_cfg
                                      : sub == sample    ? &sample_cfg
                                                         : &gc_cfg;
        if (!cfg_path->empty()) apply_config_file(*sub, *cfg_path);
        out << "config " << sub->get_name() << " " << resolved_config(*sub).dump() << "\n";

        if (sub == prompt) return cmd_prompt(pa, out);
        if (sub == synth) return cmd_synth(sa, out);
        if (sub == train) return cmd_train(ta, out);
        if (sub == sample) return cmd_sample(sm, out);
        return cmd_gradcheck(gc_seed, gc_step, out);
    } catch (const IoError& e) {
        err << "io error: " << e.what() << "\n";
        return 2;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

int run(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return run(args, std::cout, std::cerr);
}

}  // namespace ssg::cli
