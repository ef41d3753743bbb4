#include "ssg/checkpoint.hpp"

#include <array>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <unordered_map>

#include "ssg/binary_io.hpp"
#include "ssg/error.hpp"

namespace ssg::checkpoint {
namespace {

using dit::Mat;
using dit::ModelConfig;
using dit::ParamGroup;

constexpr char kMagic[4] = {'S', 'S', 'G', 'M'};

std::array<std::uint32_t*, 16> config_fields(ModelConfig& c) {
    return {&c.L,      &c.H,        &c.W,      &c.C,      &c.patch.t,       &c.patch.h,
            &c.patch.w, &c.D,       &c.heads,  &c.blocks, &c.ffn_mult,      &c.d_cond,
            &c.n_text_tokens, &c.n_visual_tokens, &c.T, &c.n_captions};
}

}  // namespace

std::size_t write_model(const dit::SsgDitModel<float>& model, std::ostream& out) {
    binary::Writer w;
    w.bytes(std::string_view(kMagic, 4));
    w.u32(kVersion);
    ModelConfig cfg = model.config();
    for (auto* f : config_fields(cfg)) w.u32(*f);

    std::uint32_t count = 0;
    visit_tensors([&](const std::string&, ParamGroup, const Mat<float>&) { ++count; }, model.params());
    w.u32(count);
    visit_tensors(
        [&](const std::string& name, ParamGroup, const Mat<float>& m) {
            w.u32(static_cast<std::uint32_t>(name.size()));
            w.bytes(name);
            w.u32(2);
            w.u32(static_cast<std::uint32_t>(m.rows()));
            w.u32(static_cast<std::uint32_t>(m.cols()));
            w.f32s(std::span<const float>(m.data(), static_cast<std::size_t>(m.size())));
            w.u8(model.is_frozen(name) ? 1 : 0);
        },
        model.params());

    const auto& buf = w.buffer();
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("checkpoint: write failed");
    return buf.size();
}

dit::SsgDitModel<float> read_model(std::istream& in) {
    if (!in) throw IoError("checkpoint: unreadable source");
    binary::Reader r(in);
    if (r.bytes(4, "magic") != std::string_view(kMagic, 4)) throw FormatError("checkpoint: bad magic (expected SSGM)");
    const auto version = r.u32("version");
    if (version != kVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));

    ModelConfig cfg;
    for (auto* f : config_fields(cfg)) *f = r.u32("config");
    try {
        cfg.validate();
    } catch (const ValidationError& e) {
        throw FormatError(std::string("checkpoint: ") + e.what());
    }

    struct Loaded {
        Mat<float> value;
        bool frozen;
    };
    std::unordered_map<std::string, Loaded> tensors;
    const auto count = r.u32("tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = r.u32("tensor name length");
        if (name_len > 4096) throw FormatError("checkpoint: implausible tensor name length");
        std::string name = r.bytes(name_len, "tensor name");
        const auto rank = r.u32("tensor rank");
        if (rank != 2) throw FormatError("checkpoint: tensor " + name + " has unsupported rank " + std::to_string(rank));
        const auto rows = r.u32("tensor dims");
        const auto cols = r.u32("tensor dims");
        if (std::uint64_t{rows} * cols > (std::uint64_t{1} << 28))
            throw FormatError("checkpoint: tensor " + name + " is implausibly large");
        Mat<float> m(rows, cols);
        r.f32s(std::span<float>(m.data(), static_cast<std::size_t>(m.size())), "tensor data");
        const auto flag = r.u8("frozen flag");
        if (flag > 1) throw FormatError("checkpoint: bad frozen flag on " + name);
        if (!tensors.emplace(std::move(name), Loaded{std::move(m), flag == 1}).second)
            throw FormatError("checkpoint: duplicate tensor");
    }

    dit::Params<float> params = dit::zero_params<float>(cfg);
    std::size_t used = 0;
    visit_tensors(
        [&](const std::string& name, ParamGroup, Mat<float>& dst) {
            const auto it = tensors.find(name);
            if (it == tensors.end()) throw FormatError("checkpoint: missing tensor " + name);
            if (it->second.value.rows() != dst.rows() || it->second.value.cols() != dst.cols())
                throw FormatError("checkpoint: tensor " + name + " has the wrong shape");
            dst = it->second.value;
            ++used;
        },
        params);
    if (used != tensors.size()) throw FormatError("checkpoint: unexpected extra tensors");

    dit::SsgDitModel<float> model(cfg, std::move(params));
    for (const auto& [name, t] : tensors) model.set_frozen(name, t.frozen);
    return model;
}

void save_model(const dit::SsgDitModel<float>& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    write_model(model, out);
}

dit::SsgDitModel<float> load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path);
    return read_model(in);
}

}  // namespace ssg::checkpoint
