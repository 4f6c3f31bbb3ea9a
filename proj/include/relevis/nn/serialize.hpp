#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "../container.hpp"
#include "../errors.hpp"
#include "model.hpp"

namespace relevis::nn {

inline const container::Magic kModelMagic{'R', 'V', 'M', 'O', 'D', 'E', 'L', '1'};
inline constexpr int kModelFormatVersion = 1;

/// Layer descriptions go in the JSON header; parameters and BN moving statistics follow
/// as float32 in layer order (conv: weight, bias; batchnorm: gamma, beta, mean, var; dense: weight, bias).
inline void save_model(const Model<float> &m, const std::filesystem::path &path) {
    nlohmann::json layers = nlohmann::json::array();
    std::vector<float> payload;
    auto put = [&](const std::vector<float> &v) { payload.insert(payload.end(), v.begin(), v.end()); };
    for (const auto &layer : m.layers) {
        nlohmann::json j{{"type", layer_name(layer)}};
        std::visit(overloaded{
                       [&](const Conv3D<float> &c) {
                           j["in_channels"] = c.in_channels;
                           j["out_channels"] = c.out_channels;
                           put(c.weight);
                           put(c.bias);
                       },
                       [&](const BatchNorm<float> &b) {
                           j["channels"] = b.channels;
                           j["momentum"] = b.momentum;
                           j["epsilon"] = b.epsilon;
                           put(b.gamma);
                           put(b.beta);
                           put(b.moving_mean);
                           put(b.moving_var);
                       },
                       [&](const Dense<float> &d) {
                           j["in_features"] = d.in_features;
                           j["out_features"] = d.out_features;
                           j["l2"] = d.l2;
                           put(d.weight);
                           put(d.bias);
                       },
                       [&](const Dropout &d) { j["rate"] = d.rate; },
                       [](const auto &) {},
                   },
                   layer);
        layers.push_back(std::move(j));
    }
    const nlohmann::json header{
        {"format", "relevis-model"},
        {"version", kModelFormatVersion},
        {"input_dims", {m.input_dims.nx, m.input_dims.ny, m.input_dims.nz}},
        {"seed", m.seed},
        {"layers", layers},
        {"payload_floats", payload.size()},
    };
    container::write(path, kModelMagic, header, payload);
}

inline Model<float> load_model(const std::filesystem::path &path) {
    const auto blob = container::read(path, kModelMagic);
    const auto &h = blob.header;
    try {
        if (h.at("format").get<std::string>() != "relevis-model") throw FormatError(path.string() + ": not a model file");
        if (h.at("version").get<int>() != kModelFormatVersion)
            throw FormatError(path.string() + ": unsupported model version " + h.at("version").dump());
        Model<float> m;
        const auto dims = h.at("input_dims").get<std::vector<std::size_t>>();
        if (dims.size() != 3) throw FormatError(path.string() + ": input_dims must have 3 entries");
        m.input_dims = {dims[0], dims[1], dims[2]};
        m.seed = h.at("seed").get<std::uint64_t>();
        std::size_t offset = 0;
        auto take = [&](std::size_t n) {
            if (offset + n > blob.payload.size()) throw FormatError(path.string() + ": payload too short");
            std::vector<float> v(blob.payload.begin() + long(offset), blob.payload.begin() + long(offset + n));
            offset += n;
            return v;
        };
        for (const auto &j : h.at("layers")) {
            const auto type = j.at("type").get<std::string>();
            if (type == "conv3d") {
                Conv3D<float> c;
                c.in_channels = j.at("in_channels").get<std::size_t>();
                c.out_channels = j.at("out_channels").get<std::size_t>();
                c.weight = take(c.in_channels * c.out_channels * kernels::kTaps);
                c.bias = take(c.out_channels);
                m.layers.push_back(std::move(c));
            } else if (type == "batchnorm") {
                BatchNorm<float> b;
                b.channels = j.at("channels").get<std::size_t>();
                b.momentum = j.at("momentum").get<double>();
                b.epsilon = j.at("epsilon").get<double>();
                b.gamma = take(b.channels);
                b.beta = take(b.channels);
                b.moving_mean = take(b.channels);
                b.moving_var = take(b.channels);
                m.layers.push_back(std::move(b));
            } else if (type == "dense") {
                Dense<float> d;
                d.in_features = j.at("in_features").get<std::size_t>();
                d.out_features = j.at("out_features").get<std::size_t>();
                d.l2 = j.at("l2").get<bool>();
                d.weight = take(d.in_features * d.out_features);
                d.bias = take(d.out_features);
                m.layers.push_back(std::move(d));
            } else if (type == "dropout") {
                m.layers.push_back(Dropout{j.at("rate").get<double>()});
            } else if (type == "relu") {
                m.layers.push_back(ReLU{});
            } else if (type == "maxpool3d") {
                m.layers.push_back(MaxPool3D{});
            } else if (type == "flatten") {
                m.layers.push_back(Flatten{});
            } else if (type == "softmax") {
                m.layers.push_back(Softmax{});
            } else {
                throw FormatError(path.string() + ": unknown layer type " + type);
            }
        }
        if (offset != blob.payload.size()) throw FormatError(path.string() + ": payload size does not match layers");
        validate_architecture(m);
        const auto shapes = m.shapes();
        for (std::size_t i = 0; i < m.layers.size(); ++i)
            if (const auto *d = std::get_if<Dense<float>>(&m.layers[i]); d && d->in_features != shapes[i].size())
                throw FormatError(path.string() + ": dense layer " + std::to_string(i) + " does not fit input dims");
        return m;
    } catch (const nlohmann::json::exception &e) {
        throw FormatError(path.string() + ": malformed model header (" + e.what() + ")");
    }
}

} // namespace relevis::nn
