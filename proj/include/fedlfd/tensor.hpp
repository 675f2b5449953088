#pragma once

// Numeric substrate: flat parameter vectors with layer metadata, a small
// fully connected network with hand-derived backprop, MSE / cross-entropy
// losses and a plain SGD step.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedlfd/error.hpp"
#include "fedlfd/seed.hpp"

namespace fedlfd {

struct LayerShape {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;

    std::size_t size() const { return rows * cols; }
    bool operator==(const LayerShape&) const = default;
};

class ParamVector {
public:
    ParamVector() = default;

    ParamVector(std::vector<double> values, std::vector<LayerShape> shape)
        : values_(std::move(values)), shape_(std::move(shape)) {
        std::size_t expected = 0;
        for (const auto& l : shape_) expected += l.size();
        if (expected != values_.size())
            throw ShapeError("ParamVector: " + std::to_string(values_.size()) +
                             " values but shape metadata implies " + std::to_string(expected));
    }

    // Single-layer vector named "flat"; handy for hand-built deltas.
    static ParamVector flat(std::vector<double> values) {
        const std::size_t n = values.size();
        return ParamVector(std::move(values), {LayerShape{"flat", n, 1}});
    }

    static ParamVector zeros_like(const ParamVector& other) {
        return ParamVector(std::vector<double>(other.size(), 0.0), other.shape_);
    }

    std::size_t size() const { return values_.size(); }
    bool empty() const { return values_.empty(); }

    double operator[](std::size_t i) const { return values_[i]; }
    double& operator[](std::size_t i) { return values_[i]; }

    std::span<const double> values() const { return values_; }
    std::span<double> values() { return values_; }
    const std::vector<double>& raw() const { return values_; }
    const std::vector<LayerShape>& shape() const { return shape_; }

    // [begin, end) offsets of a named layer.
    std::pair<std::size_t, std::size_t> layer_range(const std::string& name) const {
        std::size_t offset = 0;
        for (const auto& l : shape_) {
            if (l.name == name) return {offset, offset + l.size()};
            offset += l.size();
        }
        throw NotFoundError("no layer named '" + name + "'");
    }

    bool all_finite() const {
        return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
    }

    bool operator==(const ParamVector&) const = default;

private:
    std::vector<double> values_;
    std::vector<LayerShape> shape_;
};

inline void require_same_length(const ParamVector& a, const ParamVector& b, const char* what) {
    if (a.size() != b.size())
        throw ShapeError(std::string(what) + ": length mismatch " + std::to_string(a.size()) +
                         " vs " + std::to_string(b.size()));
}

inline ParamVector operator+(const ParamVector& a, const ParamVector& b) {
    require_same_length(a, b, "add");
    ParamVector out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

inline ParamVector operator-(const ParamVector& a, const ParamVector& b) {
    require_same_length(a, b, "subtract");
    ParamVector out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    return out;
}

inline ParamVector operator*(double s, const ParamVector& a) {
    ParamVector out = a;
    for (auto& v : out.values()) v *= s;
    return out;
}

inline double dot(const ParamVector& a, const ParamVector& b) {
    require_same_length(a, b, "dot");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

inline double l2_norm(std::span<const double> v) {
    double acc = 0.0;
    for (double x : v) acc += x * x;
    return std::sqrt(acc);
}

inline double l2_norm(const ParamVector& a) { return l2_norm(a.values()); }

inline double l2_distance(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("distance: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(acc);
}

inline double l2_distance(const ParamVector& a, const ParamVector& b) {
    return l2_distance(a.values(), b.values());
}

// ---------------------------------------------------------------------------

enum class Activation { tanh, relu, identity };

enum class LossKind { mse, cross_entropy };

inline const char* to_string(Activation a) {
    switch (a) {
        case Activation::tanh: return "tanh";
        case Activation::relu: return "relu";
        case Activation::identity: return "identity";
    }
    return "?";
}

inline const char* to_string(LossKind k) { return k == LossKind::mse ? "mse" : "cross_entropy"; }

inline Activation activation_from_string(const std::string& s) {
    if (s == "tanh") return Activation::tanh;
    if (s == "relu") return Activation::relu;
    if (s == "identity") return Activation::identity;
    throw ConfigError("unknown activation '" + s + "'");
}

inline LossKind loss_from_string(const std::string& s) {
    if (s == "mse") return LossKind::mse;
    if (s == "cross_entropy") return LossKind::cross_entropy;
    throw ConfigError("unknown loss '" + s + "'");
}

// One training example. For cross-entropy the target holds a single class index.
struct Sample {
    std::vector<double> input;
    std::vector<double> target;
};

struct MlpArch {
    std::vector<std::size_t> layer_sizes;
    Activation hidden = Activation::tanh;  // output layer is always identity
    bool bias = true;

    std::size_t num_layers() const { return layer_sizes.empty() ? 0 : layer_sizes.size() - 1; }
    std::size_t input_dim() const { return layer_sizes.front(); }
    std::size_t output_dim() const { return layer_sizes.back(); }

    std::vector<LayerShape> shape() const {
        std::vector<LayerShape> s;
        for (std::size_t i = 0; i < num_layers(); ++i) {
            s.push_back({"W" + std::to_string(i), layer_sizes[i + 1], layer_sizes[i]});
            if (bias) s.push_back({"b" + std::to_string(i), layer_sizes[i + 1], 1});
        }
        return s;
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& l : shape()) n += l.size();
        return n;
    }

    void validate() const {
        if (layer_sizes.size() < 2) throw ConfigError("layer_sizes needs at least input and output size");
        for (auto n : layer_sizes)
            if (n == 0) throw ConfigError("layer sizes must be positive");
    }

    bool operator==(const MlpArch&) const = default;
};

struct MlpModel {
    MlpArch arch;
    ParamVector params;

    MlpModel() = default;
    MlpModel(MlpArch a, ParamVector p) : arch(std::move(a)), params(std::move(p)) {
        arch.validate();
        if (params.size() != arch.param_count())
            throw ShapeError("MlpModel: params length " + std::to_string(params.size()) +
                             " does not match architecture (" + std::to_string(arch.param_count()) + ")");
    }

    // Uniform in [-0.5, 0.5] / sqrt(fan_in) for weights and biases alike.
    static MlpModel initialized(MlpArch arch, std::uint64_t seed) {
        arch.validate();
        Rng rng(seed);
        std::uniform_real_distribution<double> u(-0.5, 0.5);
        std::vector<double> values;
        values.reserve(arch.param_count());
        for (const auto& l : arch.shape()) {
            const std::size_t fan_in = l.name[0] == 'W' ? l.cols : arch.layer_sizes[std::stoul(l.name.substr(1))];
            const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
            for (std::size_t k = 0; k < l.size(); ++k) values.push_back(u(rng) * scale);
        }
        auto shape = arch.shape();
        return MlpModel(std::move(arch), ParamVector(std::move(values), std::move(shape)));
    }

    MlpModel with_params(ParamVector p) const { return MlpModel(arch, std::move(p)); }
};

namespace detail {

inline double activate(Activation a, double z) {
    switch (a) {
        case Activation::tanh: return std::tanh(z);
        case Activation::relu: return z > 0.0 ? z : 0.0;
        case Activation::identity: return z;
    }
    return z;
}

// Derivative expressed through the pre-activation z and the output y.
inline double activate_grad(Activation a, double z, double y) {
    switch (a) {
        case Activation::tanh: return 1.0 - y * y;
        case Activation::relu: return z > 0.0 ? 1.0 : 0.0;
        case Activation::identity: return 1.0;
    }
    return 1.0;
}

struct LayerOffsets {
    std::size_t weight;
    std::size_t bias;  // unused when the arch has no bias
};

inline std::vector<LayerOffsets> layer_offsets(const MlpArch& arch) {
    std::vector<LayerOffsets> out;
    std::size_t offset = 0;
    for (std::size_t i = 0; i < arch.num_layers(); ++i) {
        LayerOffsets o{offset, 0};
        offset += arch.layer_sizes[i] * arch.layer_sizes[i + 1];
        if (arch.bias) {
            o.bias = offset;
            offset += arch.layer_sizes[i + 1];
        }
        out.push_back(o);
    }
    return out;
}

// Pre-activations and activations per layer; activations[0] is the input.
struct Trace {
    std::vector<std::vector<double>> pre;
    std::vector<std::vector<double>> post;
};

inline Trace forward_trace(const MlpModel& model, std::span<const double> input) {
    const auto& arch = model.arch;
    if (input.size() != arch.input_dim())
        throw ShapeError("input dimension " + std::to_string(input.size()) + " but network expects " +
                         std::to_string(arch.input_dim()));
    const auto offsets = layer_offsets(arch);
    const auto p = model.params.values();
    Trace t;
    t.post.emplace_back(input.begin(), input.end());
    t.pre.emplace_back();
    for (std::size_t i = 0; i < arch.num_layers(); ++i) {
        const std::size_t in = arch.layer_sizes[i];
        const std::size_t out = arch.layer_sizes[i + 1];
        const bool last = i + 1 == arch.num_layers();
        const Activation act = last ? Activation::identity : arch.hidden;
        const auto& x = t.post.back();
        std::vector<double> z(out), y(out);
        for (std::size_t r = 0; r < out; ++r) {
            double acc = arch.bias ? p[offsets[i].bias + r] : 0.0;
            const double* w = p.data() + offsets[i].weight + r * in;
            for (std::size_t c = 0; c < in; ++c) acc += w[c] * x[c];
            z[r] = acc;
            y[r] = activate(act, acc);
            if (!std::isfinite(y[r]))
                throw NumericError("non-finite activation in layer " + std::to_string(i) + " unit " +
                                   std::to_string(r));
        }
        t.pre.push_back(std::move(z));
        t.post.push_back(std::move(y));
    }
    return t;
}

inline std::vector<double> softmax(std::span<const double> logits) {
    const double m = *std::max_element(logits.begin(), logits.end());
    std::vector<double> out(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - m);
        sum += out[i];
    }
    for (auto& v : out) v /= sum;
    return out;
}

inline std::size_t class_index(const Sample& s, std::size_t classes) {
    if (s.target.size() != 1) throw ShapeError("cross_entropy target must be a single class index");
    const double t = s.target[0];
    if (!(t >= 0.0) || t != std::floor(t) || t >= static_cast<double>(classes))
        throw ShapeError("cross_entropy target is not a valid class index");
    return static_cast<std::size_t>(t);
}

}  // namespace detail

inline std::vector<double> forward(const MlpModel& model, std::span<const double> input) {
    return std::move(detail::forward_trace(model, input).post.back());
}

// Per-sample loss value of an output vector against a target.
inline double sample_loss(std::span<const double> output, const Sample& s, LossKind loss) {
    if (loss == LossKind::mse) {
        if (s.target.size() != output.size()) throw ShapeError("mse target dimension mismatch");
        double acc = 0.0;
        for (std::size_t k = 0; k < output.size(); ++k) acc += (output[k] - s.target[k]) * (output[k] - s.target[k]);
        return acc;
    }
    const std::size_t cls = detail::class_index(s, output.size());
    const double m = *std::max_element(output.begin(), output.end());
    double sum = 0.0;
    for (double o : output) sum += std::exp(o - m);
    return -(output[cls] - m - std::log(sum));
}

struct LossAndGrad {
    double loss = 0.0;
    ParamVector grad;
};

// Mean loss over the batch (sum of squared errors per sample for mse) and its
// gradient. weight_decay adds 0.5 * wd * ||params||^2.
inline LossAndGrad loss_and_grad(const MlpModel& model, std::span<const Sample> batch, LossKind loss,
                                 double weight_decay = 0.0) {
    if (batch.empty()) throw UsageError("loss_and_grad: empty batch");
    const auto& arch = model.arch;
    const auto offsets = detail::layer_offsets(arch);
    const auto p = model.params.values();
    LossAndGrad out{0.0, ParamVector::zeros_like(model.params)};
    auto g = out.grad.values();
    const double inv_n = 1.0 / static_cast<double>(batch.size());

    for (const auto& s : batch) {
        const auto t = detail::forward_trace(model, s.input);
        const auto& y = t.post.back();
        out.loss += sample_loss(y, s, loss) * inv_n;

        // dL/d(output pre-activation); output layer is identity.
        std::vector<double> delta(y.size());
        if (loss == LossKind::mse) {
            for (std::size_t k = 0; k < y.size(); ++k) delta[k] = 2.0 * (y[k] - s.target[k]) * inv_n;
        } else {
            const auto prob = detail::softmax(y);
            const std::size_t cls = detail::class_index(s, y.size());
            for (std::size_t k = 0; k < y.size(); ++k) delta[k] = (prob[k] - (k == cls ? 1.0 : 0.0)) * inv_n;
        }

        for (std::size_t i = arch.num_layers(); i-- > 0;) {
            const std::size_t in = arch.layer_sizes[i];
            const std::size_t outn = arch.layer_sizes[i + 1];
            const auto& x = t.post[i];
            for (std::size_t r = 0; r < outn; ++r) {
                double* gw = g.data() + offsets[i].weight + r * in;
                for (std::size_t c = 0; c < in; ++c) gw[c] += delta[r] * x[c];
                if (arch.bias) g[offsets[i].bias + r] += delta[r];
            }
            if (i == 0) break;
            std::vector<double> prev(in, 0.0);
            for (std::size_t r = 0; r < outn; ++r) {
                const double* w = p.data() + offsets[i].weight + r * in;
                for (std::size_t c = 0; c < in; ++c) prev[c] += w[c] * delta[r];
            }
            for (std::size_t c = 0; c < in; ++c)
                prev[c] *= detail::activate_grad(arch.hidden, t.pre[i][c], t.post[i][c]);
            delta = std::move(prev);
        }
    }

    if (weight_decay != 0.0) {
        for (std::size_t i = 0; i < p.size(); ++i) {
            out.loss += 0.5 * weight_decay * p[i] * p[i];
            g[i] += weight_decay * p[i];
        }
    }
    if (!std::isfinite(out.loss)) throw NumericError("non-finite loss");
    if (!out.grad.all_finite()) throw NumericError("non-finite gradient");
    return out;
}

inline double mean_loss(const MlpModel& model, std::span<const Sample> batch, LossKind loss) {
    if (batch.empty()) throw UsageError("mean_loss: empty batch");
    double acc = 0.0;
    for (const auto& s : batch) acc += sample_loss(forward(model, s.input), s, loss);
    return acc / static_cast<double>(batch.size());
}

// params - lr * grad. Inputs are untouched.
inline ParamVector sgd_step(const ParamVector& params, const ParamVector& grad, double lr) {
    if (!(lr > 0.0)) throw UsageError("sgd_step: learning rate must be positive");
    require_same_length(params, grad, "sgd_step");
    ParamVector out = params;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= lr * grad[i];
    if (!out.all_finite()) throw NumericError("sgd_step produced non-finite parameters");
    return out;
}

}  // namespace fedlfd
