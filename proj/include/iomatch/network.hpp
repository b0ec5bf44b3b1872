#pragma once

// The model family: MLP encoder f, projection head g, closed-set classifier
// phi (K-way over features), multi-binary classifier chi (K two-way
// classifiers over projections), and open-set classifier psi ((K+1)-way over
// projections). phi reads only features h; chi and psi read only the
// projection z, so the closed-set and multi-binary classifiers live in
// decoupled feature spaces.

#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "iomatch/errors.hpp"
#include "iomatch/tensor.hpp"

namespace iomatch {

struct NetworkDims {
    int input_dim = 16;
    std::vector<int> encoder_hidden = {64, 64};
    int feature_dim = 32;   // D
    std::vector<int> projector_hidden = {32};
    int projection_dim = 8; // d
};

struct LinearLayer {
    TensorPtr weight; // in x out
    TensorPtr bias;   // 1 x out
};

namespace detail {

inline LinearLayer init_linear(int in, int out, std::mt19937_64& rng) {
    if (in <= 0 || out <= 0) {
        throw ConfigError("layer widths must be positive, got " + std::to_string(in) + " -> " +
                          std::to_string(out));
    }
    LinearLayer layer{make_tensor(in, out, true), make_tensor(1, out, true)};
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : layer.weight->values()) v = dist(rng);
    return layer;
}

inline TensorPtr linear(Tape& tape, const LinearLayer& layer, const TensorPtr& x) {
    return add(tape, matmul(tape, x, layer.weight), layer.bias);
}

} // namespace detail

// K independent two-way softmaxes over 2K logits laid out as
// [inlier_0, outlier_0, inlier_1, outlier_1, ...]; returns the K inlier
// probabilities o_k = sigmoid(inlier_logit - outlier_logit), so each
// (o_k, 1 - o_k) pair sums to one by construction.
inline TensorPtr pair_softmax(Tape& tape, const TensorPtr& logits) {
    if (logits->cols() % 2 != 0) {
        throw ShapeError("pair_softmax expects an even column count, got " + logits->shape_string());
    }
    const int n = logits->rows();
    const int k = logits->cols() / 2;
    const bool rg = logits->requires_grad();
    auto out = make_tensor(n, k, rg);
    for (int i = 0; i < n; ++i) {
        for (int c = 0; c < k; ++c) {
            const double t = logits->at(i, 2 * c) - logits->at(i, 2 * c + 1);
            const double s = t >= 0.0 ? 1.0 / (1.0 + std::exp(-t))
                                      : std::exp(t) / (1.0 + std::exp(t));
            out->at(i, c) = s;
        }
    }
    if (rg) {
        tape.record([logits, out, n, k] {
            for (int i = 0; i < n; ++i) {
                for (int c = 0; c < k; ++c) {
                    const double s = out->at(i, c);
                    const double d = out->grad_at(i, c) * s * (1.0 - s);
                    logits->grad_at(i, 2 * c) += d;
                    logits->grad_at(i, 2 * c + 1) -= d;
                }
            }
        });
    }
    return out;
}

class NetworkParams {
public:
    NetworkParams() = default;

    static NetworkParams init(std::uint64_t seed, const NetworkDims& dims, int num_seen) {
        if (num_seen < 2) {
            throw ConfigError("at least 2 seen classes are required, got " + std::to_string(num_seen));
        }
        NetworkParams net;
        net.dims_ = dims;
        net.num_seen_ = num_seen;
        net.seed_ = seed;
        std::mt19937_64 rng(seed);
        int in = dims.input_dim;
        for (int width : dims.encoder_hidden) {
            net.encoder_.push_back(detail::init_linear(in, width, rng));
            in = width;
        }
        net.encoder_.push_back(detail::init_linear(in, dims.feature_dim, rng));
        in = dims.feature_dim;
        for (int width : dims.projector_hidden) {
            net.projector_.push_back(detail::init_linear(in, width, rng));
            in = width;
        }
        net.projector_.push_back(detail::init_linear(in, dims.projection_dim, rng));
        net.closed_head_ = detail::init_linear(dims.feature_dim, num_seen, rng);
        net.multibinary_head_ = detail::init_linear(dims.projection_dim, 2 * num_seen, rng);
        net.open_head_ = detail::init_linear(dims.projection_dim, num_seen + 1, rng);
        return net;
    }

    int num_seen() const { return num_seen_; }
    std::uint64_t seed() const { return seed_; }
    const NetworkDims& dims() const { return dims_; }

    const std::vector<LinearLayer>& encoder() const { return encoder_; }
    const std::vector<LinearLayer>& projector() const { return projector_; }
    const LinearLayer& closed_head() const { return closed_head_; }
    const LinearLayer& multibinary_head() const { return multibinary_head_; }
    const LinearLayer& open_head() const { return open_head_; }

    std::vector<TensorPtr> parameters() const {
        std::vector<TensorPtr> out;
        auto push = [&out](const LinearLayer& l) {
            out.push_back(l.weight);
            out.push_back(l.bias);
        };
        for (const auto& l : encoder_) push(l);
        for (const auto& l : projector_) push(l);
        push(closed_head_);
        push(multibinary_head_);
        push(open_head_);
        return out;
    }

    void zero_grad() const {
        for (const auto& p : parameters()) p->zero_grad();
    }

    static std::size_t layer_count(const LinearLayer& l) {
        return l.weight->size() + l.bias->size();
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : parameters()) n += p->size();
        return n;
    }

    // Encoder, projector, and closed-set head: the part a FixMatch-style
    // baseline trains.
    std::size_t trunk_parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : encoder_) n += layer_count(l);
        for (const auto& l : projector_) n += layer_count(l);
        return n + layer_count(closed_head_);
    }

    // The two extra classifier heads (multi-binary and open-set).
    std::size_t extra_head_parameter_count() const {
        return layer_count(multibinary_head_) + layer_count(open_head_);
    }

    NetworkParams clone() const {
        NetworkParams copy;
        copy.dims_ = dims_;
        copy.num_seen_ = num_seen_;
        copy.seed_ = seed_;
        auto clone_layer = [](const LinearLayer& l) {
            LinearLayer c{make_tensor(l.weight->rows(), l.weight->cols(), true),
                          make_tensor(l.bias->rows(), l.bias->cols(), true)};
            c.weight->values() = l.weight->values();
            c.bias->values() = l.bias->values();
            return c;
        };
        for (const auto& l : encoder_) copy.encoder_.push_back(clone_layer(l));
        for (const auto& l : projector_) copy.projector_.push_back(clone_layer(l));
        copy.closed_head_ = clone_layer(closed_head_);
        copy.multibinary_head_ = clone_layer(multibinary_head_);
        copy.open_head_ = clone_layer(open_head_);
        return copy;
    }

    // Flat key -> {rows, cols, data} mapping; doubles round-trip bit-exactly
    // through the shortest-representation JSON encoding.
    void save(const std::string& path) const {
        nlohmann::json j;
        j["format"] = "iomatch-checkpoint-v1";
        j["num_seen"] = num_seen_;
        j["seed"] = seed_;
        j["dims"] = {{"input_dim", dims_.input_dim},
                     {"encoder_hidden", dims_.encoder_hidden},
                     {"feature_dim", dims_.feature_dim},
                     {"projector_hidden", dims_.projector_hidden},
                     {"projection_dim", dims_.projection_dim}};
        nlohmann::json layers;
        for_each_named_layer([&layers](const std::string& name, const LinearLayer& l) {
            auto dump = [](const TensorPtr& t) {
                return nlohmann::json{{"rows", t->rows()}, {"cols", t->cols()}, {"data", t->values()}};
            };
            layers[name + ".weight"] = dump(l.weight);
            layers[name + ".bias"] = dump(l.bias);
        });
        j["layers"] = std::move(layers);
        std::ofstream out(path);
        if (!out) throw DataError("cannot open checkpoint file for writing: " + path);
        out << j.dump(2) << '\n';
    }

    static NetworkParams load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw DataError("cannot open checkpoint file: " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("checkpoint " + path + ": " + e.what());
        }
        if (j.value("format", "") != std::string("iomatch-checkpoint-v1")) {
            throw ParseError("checkpoint " + path + ": unknown format");
        }
        NetworkDims dims;
        const auto& jd = j.at("dims");
        dims.input_dim = jd.at("input_dim").get<int>();
        dims.encoder_hidden = jd.at("encoder_hidden").get<std::vector<int>>();
        dims.feature_dim = jd.at("feature_dim").get<int>();
        dims.projector_hidden = jd.at("projector_hidden").get<std::vector<int>>();
        dims.projection_dim = jd.at("projection_dim").get<int>();
        NetworkParams net = init(j.at("seed").get<std::uint64_t>(), dims, j.at("num_seen").get<int>());
        const auto& layers = j.at("layers");
        net.for_each_named_layer([&layers, &path](const std::string& name, const LinearLayer& l) {
            auto restore = [&path](const nlohmann::json& jt, const TensorPtr& t) {
                if (jt.at("rows").get<int>() != t->rows() || jt.at("cols").get<int>() != t->cols()) {
                    throw ParseError("checkpoint " + path + ": shape mismatch");
                }
                t->values() = jt.at("data").get<std::vector<double>>();
            };
            restore(layers.at(name + ".weight"), l.weight);
            restore(layers.at(name + ".bias"), l.bias);
        });
        return net;
    }

private:
    template <typename Fn>
    void for_each_named_layer(Fn&& fn) const {
        for (std::size_t i = 0; i < encoder_.size(); ++i)
            fn("encoder." + std::to_string(i), encoder_[i]);
        for (std::size_t i = 0; i < projector_.size(); ++i)
            fn("projector." + std::to_string(i), projector_[i]);
        fn("closed_head", closed_head_);
        fn("multibinary_head", multibinary_head_);
        fn("open_head", open_head_);
    }

    NetworkDims dims_;
    int num_seen_ = 0;
    std::uint64_t seed_ = 0;
    std::vector<LinearLayer> encoder_;
    std::vector<LinearLayer> projector_;
    LinearLayer closed_head_;
    LinearLayer multibinary_head_;
    LinearLayer open_head_;
};

struct ForwardOutputs {
    TensorPtr h;      // n x D features
    TensorPtr z;      // n x d projections
    TensorPtr p;      // n x K closed-set probabilities
    TensorPtr o;      // n x K per-class inlier probabilities, entries in (0,1)
    TensorPtr q_open; // n x (K+1) open-set probabilities
};

inline ForwardOutputs forward(Tape& tape, const NetworkParams& net, const TensorPtr& x) {
    if (x->cols() != net.dims().input_dim) {
        throw ShapeError("forward: input has " + std::to_string(x->cols()) +
                         " columns, network expects " + std::to_string(net.dims().input_dim));
    }
    ForwardOutputs out;
    TensorPtr cur = x;
    for (const auto& layer : net.encoder()) cur = relu(tape, detail::linear(tape, layer, cur));
    out.h = cur;
    for (std::size_t i = 0; i + 1 < net.projector().size(); ++i)
        cur = relu(tape, detail::linear(tape, net.projector()[i], cur));
    out.z = detail::linear(tape, net.projector().back(), cur);
    out.p = softmax_rows(tape, detail::linear(tape, net.closed_head(), out.h));
    out.o = pair_softmax(tape, detail::linear(tape, net.multibinary_head(), out.z));
    out.q_open = softmax_rows(tape, detail::linear(tape, net.open_head(), out.z));
    return out;
}

// Two independent passes over shared parameters; the strong-view open-head
// probabilities are the ones the open-set loss consumes.
inline std::pair<ForwardOutputs, ForwardOutputs> forward_views(Tape& tape, const NetworkParams& net,
                                                               const TensorPtr& x_weak,
                                                               const TensorPtr& x_strong) {
    if (x_weak->rows() != x_strong->rows() || x_weak->cols() != x_strong->cols()) {
        throw ShapeError("forward_views: view shapes differ, " + x_weak->shape_string() + " vs " +
                         x_strong->shape_string());
    }
    return {forward(tape, net, x_weak), forward(tape, net, x_strong)};
}

} // namespace iomatch
