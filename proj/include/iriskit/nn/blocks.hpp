#pragma once

#include <random>
#include <string>
#include <utility>

#include "iriskit/nn/adam.hpp"
#include "iriskit/nn/ops.hpp"

namespace iriskit::nn {

// Parameter-owning layers assembled by the network builder. Convolutions are
// bias-free and followed by batchnorm, except transposed-conv heads which use
// a bias and no norm.

template <typename T>
struct ConvBnT {
    enum class Kind { Standard, Depthwise, Transposed };

    Kind kind = Kind::Standard;
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 3;
    int stride = 1;
    int padding = 0;
    bool relu = true;

    VarT<T> weight;
    VarT<T> gamma;
    VarT<T> beta;
    TensorT<T> running_mean;
    TensorT<T> running_var;

    ConvBnT() = default;

    ConvBnT(Kind kind, int in_ch, int out_ch, int kernel, int stride, int padding, bool relu,
            std::mt19937& rng)
        : kind(kind), in_channels(in_ch), out_channels(out_ch), kernel(kernel),
          stride(stride), padding(padding), relu(relu) {
        std::vector<int> wshape;
        int fan_in = in_ch * kernel * kernel;
        switch (kind) {
        case Kind::Standard: wshape = {out_ch, in_ch, kernel, kernel}; break;
        case Kind::Depthwise:
            wshape = {out_ch, 1, kernel, kernel};
            fan_in = kernel * kernel;
            break;
        case Kind::Transposed: wshape = {in_ch, out_ch, kernel, kernel}; break;
        }
        weight = VarT<T>::leaf(TensorT<T>::uniform_fan_in(wshape, fan_in, rng), true);
        gamma = VarT<T>::leaf(TensorT<T>::full({out_ch}, T(1)), true);
        beta = VarT<T>::leaf(TensorT<T>::zeros({out_ch}), true);
        running_mean = TensorT<T>::zeros({out_ch});
        running_var = TensorT<T>::full({out_ch}, T(1));
    }

    VarT<T> forward(const VarT<T>& x, bool training) {
        VarT<T> y;
        switch (kind) {
        case Kind::Standard: y = conv2d(x, weight, stride, padding); break;
        case Kind::Depthwise: y = depthwise_conv2d(x, weight, stride, padding); break;
        case Kind::Transposed: y = conv_transpose2d(x, weight, stride, padding); break;
        }
        BatchNormOptions<T> opts;
        opts.training = training;
        y = batchnorm(y, gamma, beta, running_mean, running_var, opts);
        return relu ? relu6(y) : y;
    }

    template <typename F>
    void visit_params(const std::string& prefix, F&& fn) {
        fn(prefix + ".conv.weight", weight);
        fn(prefix + ".bn.gamma", gamma);
        fn(prefix + ".bn.beta", beta);
    }

    template <typename F>
    void visit_buffers(const std::string& prefix, F&& fn) {
        fn(prefix + ".bn.running_mean", running_mean);
        fn(prefix + ".bn.running_var", running_var);
    }
};

// MobileNetV2 bottleneck: pointwise expand -> relu6 -> depthwise -> relu6 ->
// pointwise project, residual shortcut when stride 1 and matching widths.
template <typename T>
struct InvertedResidualT {
    int in_channels = 0;
    int out_channels = 0;
    int expansion = 1;
    int stride = 1;

    ConvBnT<T> expand;    // unused when expansion == 1
    ConvBnT<T> depthwise;
    ConvBnT<T> project;

    InvertedResidualT() = default;

    InvertedResidualT(int in_ch, int out_ch, int expansion, int stride, int kernel,
                      std::mt19937& rng)
        : in_channels(in_ch), out_channels(out_ch), expansion(expansion), stride(stride) {
        if (expansion < 1) throw ConfigError("inverted residual expansion must be >= 1");
        const int mid = in_ch * expansion;
        using Kind = typename ConvBnT<T>::Kind;
        if (expansion > 1) {
            expand = ConvBnT<T>(Kind::Standard, in_ch, mid, 1, 1, 0, true, rng);
        }
        depthwise = ConvBnT<T>(Kind::Depthwise, mid, mid, kernel, stride, kernel / 2, true, rng);
        project = ConvBnT<T>(Kind::Standard, mid, out_ch, 1, 1, 0, false, rng);
    }

    bool has_residual() const { return stride == 1 && in_channels == out_channels; }
    int expanded_channels() const { return in_channels * expansion; }

    VarT<T> forward(const VarT<T>& x, bool training) {
        VarT<T> y = x;
        if (expansion > 1) y = expand.forward(y, training);
        y = depthwise.forward(y, training);
        y = project.forward(y, training);
        if (has_residual()) y = add(y, x);
        return y;
    }

    template <typename F>
    void visit_params(const std::string& prefix, F&& fn) {
        if (expansion > 1) expand.visit_params(prefix + ".expand", fn);
        depthwise.visit_params(prefix + ".depthwise", fn);
        project.visit_params(prefix + ".project", fn);
    }

    template <typename F>
    void visit_buffers(const std::string& prefix, F&& fn) {
        if (expansion > 1) expand.visit_buffers(prefix + ".expand", fn);
        depthwise.visit_buffers(prefix + ".depthwise", fn);
        project.visit_buffers(prefix + ".project", fn);
    }
};

// Transposed-conv output head: bias, no norm, no activation (the network
// applies the sigmoid).
template <typename T>
struct ConvTransposeHeadT {
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 4;
    int stride = 2;
    int padding = 1;

    VarT<T> weight;
    VarT<T> bias;

    ConvTransposeHeadT() = default;

    ConvTransposeHeadT(int in_ch, int out_ch, int kernel, int stride, int padding,
                       std::mt19937& rng)
        : in_channels(in_ch), out_channels(out_ch), kernel(kernel), stride(stride),
          padding(padding) {
        weight = VarT<T>::leaf(
            TensorT<T>::uniform_fan_in({in_ch, out_ch, kernel, kernel}, in_ch * kernel * kernel, rng),
            true);
        bias = VarT<T>::leaf(TensorT<T>::zeros({out_ch}), true);
    }

    VarT<T> forward(const VarT<T>& x) {
        return conv_transpose2d(x, weight, bias, stride, padding);
    }

    template <typename F>
    void visit_params(const std::string& prefix, F&& fn) {
        fn(prefix + ".conv.weight", weight);
        fn(prefix + ".conv.bias", bias);
    }

    template <typename F>
    void visit_buffers(const std::string&, F&&) {}
};

using ConvBn = ConvBnT<float>;
using InvertedResidual = InvertedResidualT<float>;

} // namespace iriskit::nn
