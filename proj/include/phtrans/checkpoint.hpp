#pragma once

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "phtrans/architecture.hpp"

namespace phtrans {

// Checkpoint container: magic "PHTR", format version, JSON block holding the
// serialized config plus free-form metadata, then named little-endian
// parameter tensors. Round trips are bitwise exact.

inline void to_json(nlohmann::json& j, const Window3& w) { j = nlohmann::json::array({w.d, w.h, w.w}); }
inline void from_json(const nlohmann::json& j, Window3& w) {
    w.d = j.at(0);
    w.h = j.at(1);
    w.w = j.at(2);
}

inline void to_json(nlohmann::json& j, const PHTransConfig& c) {
    j = nlohmann::json{{"n1", c.n1},
                       {"n2", c.n2},
                       {"m1", c.m1},
                       {"m2", c.m2},
                       {"base_channels", c.base_channels},
                       {"heads", c.heads},
                       {"windows", c.windows},
                       {"mlp_ratio", c.mlp_ratio},
                       {"num_classes", c.num_classes},
                       {"input_shape", c.input_shape},
                       {"in_channels", c.in_channels},
                       {"downsample_count", c.downsample_count},
                       {"position_bias", c.position_bias},
                       {"bottleneck_conv_blocks", c.bottleneck_conv_blocks},
                       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, PHTransConfig& c) {
    j.at("n1").get_to(c.n1);
    j.at("n2").get_to(c.n2);
    j.at("m1").get_to(c.m1);
    j.at("m2").get_to(c.m2);
    j.at("base_channels").get_to(c.base_channels);
    j.at("heads").get_to(c.heads);
    j.at("windows").get_to(c.windows);
    j.at("mlp_ratio").get_to(c.mlp_ratio);
    j.at("num_classes").get_to(c.num_classes);
    j.at("input_shape").get_to(c.input_shape);
    j.at("in_channels").get_to(c.in_channels);
    j.at("downsample_count").get_to(c.downsample_count);
    j.at("position_bias").get_to(c.position_bias);
    j.at("bottleneck_conv_blocks").get_to(c.bottleneck_conv_blocks);
    j.at("seed").get_to(c.seed);
}

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

template <class T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    PH_CHECK(bool(is), "checkpoint: unexpected end of file");
    return v;
}

}  // namespace detail

struct CheckpointData {
    PHTransConfig config;
    nlohmann::json meta;
    std::vector<std::pair<std::string, Tensor<float>>> tensors;

    const Tensor<float>* find(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }
};

inline void write_checkpoint(const std::string& path, const PHTransConfig& cfg,
                             const std::vector<std::pair<std::string, Tensor<float>>>& tensors,
                             const nlohmann::json& meta = nlohmann::json::object()) {
    std::ofstream os(path, std::ios::binary);
    PH_CHECK(bool(os), "checkpoint: cannot open '", path, "' for writing");
    os.write("PHTR", 4);
    detail::write_pod<uint32_t>(os, 1);  // format version
    nlohmann::json j;
    j["config"] = cfg;
    j["meta"] = meta;
    std::string js = j.dump();
    detail::write_pod<uint64_t>(os, js.size());
    os.write(js.data(), std::streamsize(js.size()));
    detail::write_pod<uint32_t>(os, uint32_t(tensors.size()));
    for (const auto& [name, t] : tensors) {
        detail::write_pod<uint32_t>(os, uint32_t(name.size()));
        os.write(name.data(), std::streamsize(name.size()));
        detail::write_pod<uint8_t>(os, 0);  // dtype: f32
        detail::write_pod<uint8_t>(os, uint8_t(t.shape().size()));
        for (int64_t e : t.shape()) detail::write_pod<int64_t>(os, e);
        os.write(reinterpret_cast<const char*>(t.values().data()), std::streamsize(t.numel() * 4));
    }
    PH_CHECK(bool(os), "checkpoint: write to '", path, "' failed");
}

inline CheckpointData read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    PH_CHECK(bool(is), "checkpoint: cannot open '", path, "'");
    char magic[4];
    is.read(magic, 4);
    PH_CHECK(bool(is) && std::string(magic, 4) == "PHTR", "checkpoint: bad magic in '", path, "'");
    uint32_t version = detail::read_pod<uint32_t>(is);
    PH_CHECK(version == 1, "checkpoint: unsupported format version ", version);
    uint64_t jlen = detail::read_pod<uint64_t>(is);
    std::string js(jlen, '\0');
    is.read(js.data(), std::streamsize(jlen));
    PH_CHECK(bool(is), "checkpoint: truncated JSON block");
    nlohmann::json j = nlohmann::json::parse(js);

    CheckpointData out;
    out.config = j.at("config").get<PHTransConfig>();
    out.meta = j.at("meta");
    uint32_t count = detail::read_pod<uint32_t>(is);
    out.tensors.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t nlen = detail::read_pod<uint32_t>(is);
        std::string name(nlen, '\0');
        is.read(name.data(), std::streamsize(nlen));
        uint8_t dtype = detail::read_pod<uint8_t>(is);
        PH_CHECK(dtype == 0, "checkpoint: unsupported tensor dtype ", int(dtype));
        uint8_t ndim = detail::read_pod<uint8_t>(is);
        Shape shape(ndim);
        for (auto& e : shape) e = detail::read_pod<int64_t>(is);
        Tensor<float> t = Tensor<float>::zeros(shape);
        is.read(reinterpret_cast<char*>(t.values().data()), std::streamsize(t.numel() * 4));
        PH_CHECK(bool(is), "checkpoint: truncated tensor payload for '", name, "'");
        out.tensors.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

// model <-> checkpoint glue (float models only; training runs in fp32)

inline void save_model(const std::string& path, PHTransModel<float>& model,
                       const nlohmann::json& meta = nlohmann::json::object(),
                       const std::vector<std::pair<std::string, Tensor<float>>>& extra = {}) {
    std::vector<std::pair<std::string, Tensor<float>>> tensors;
    for (auto& p : model.parameters()) tensors.emplace_back(p.name, p.tensor);
    for (const auto& e : extra) tensors.push_back(e);
    write_checkpoint(path, model.cfg, tensors, meta);
}

inline PHTransModel<float> load_model(const CheckpointData& ckpt) {
    PHTransModel<float> model(ckpt.config);
    for (auto& p : model.parameters()) {
        const Tensor<float>* src = ckpt.find(p.name);
        PH_CHECK(src != nullptr, "checkpoint: missing parameter '", p.name, "'");
        PH_CHECK(src->shape() == p.tensor.shape(), "checkpoint: shape mismatch for '", p.name, "': file has ",
                 shape_str(src->shape()), ", model expects ", shape_str(p.tensor.shape()));
        std::copy(src->values().begin(), src->values().end(), p.tensor.values().begin());
    }
    return model;
}

inline PHTransModel<float> load_model(const std::string& path) { return load_model(read_checkpoint(path)); }

}  // namespace phtrans
