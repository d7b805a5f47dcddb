#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "iriskit/nn/autograd.hpp"
#include "iriskit/nn/tensor.hpp"

namespace iriskit::nn {

// Output extent of a cross-correlation along one axis.
inline int conv_output_size(int in, int k, int stride, int padding) {
    if (k > in + 2 * padding) {
        throw DimensionError("conv kernel " + std::to_string(k) + " exceeds padded input " +
                             std::to_string(in + 2 * padding));
    }
    return (in + 2 * padding - k) / stride + 1;
}

// Output extent of the transposed (adjoint) form.
inline int conv_transpose_output_size(int in, int k, int stride, int padding,
                                      int output_padding) {
    const int out = (in - 1) * stride - 2 * padding + k + output_padding;
    if (out <= 0) {
        throw DimensionError("conv_transpose output size " + std::to_string(out) +
                             " is not positive");
    }
    return out;
}

namespace detail {

// Valid output-index range [lo, hi) such that o*stride + offset lands in
// [0, limit) for every o in the range.
inline std::pair<int, int> valid_range(int offset, int stride, int limit, int out_limit) {
    int lo = 0;
    if (offset < 0) lo = (-offset + stride - 1) / stride;
    int hi = limit - 1 - offset < 0 ? 0 : (limit - 1 - offset) / stride + 1;
    if (hi > out_limit) hi = out_limit;
    if (lo > hi) lo = hi;
    return {lo, hi};
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

template <typename T>
VarT<T> add(const VarT<T>& a, const VarT<T>& b) {
    require_same_shape(a.tensor(), b.tensor(), "add");
    TensorT<T> out(a.shape());
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = a.tensor()[i] + b.tensor()[i];
    return make_op<T>(std::move(out), {a, b}, [](NodeT<T>* self) {
        return [self]() {
            for (int pi = 0; pi < 2; ++pi) {
                NodeT<T>* p = self->parents[pi].get();
                if (!p->requires_grad) continue;
                p->ensure_grad();
                const std::size_t n = self->grad.size();
                for (std::size_t i = 0; i < n; ++i) p->grad[i] += self->grad[i];
            }
        };
    });
}

template <typename T>
VarT<T> sub(const VarT<T>& a, const VarT<T>& b) {
    require_same_shape(a.tensor(), b.tensor(), "sub");
    TensorT<T> out(a.shape());
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = a.tensor()[i] - b.tensor()[i];
    return make_op<T>(std::move(out), {a, b}, [](NodeT<T>* self) {
        return [self]() {
            NodeT<T>* pa = self->parents[0].get();
            NodeT<T>* pb = self->parents[1].get();
            const std::size_t n = self->grad.size();
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) pa->grad[i] += self->grad[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) pb->grad[i] -= self->grad[i];
            }
        };
    });
}

template <typename T>
VarT<T> mul(const VarT<T>& a, const VarT<T>& b) {
    require_same_shape(a.tensor(), b.tensor(), "mul");
    TensorT<T> out(a.shape());
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = a.tensor()[i] * b.tensor()[i];
    return make_op<T>(std::move(out), {a, b}, [](NodeT<T>* self) {
        return [self]() {
            NodeT<T>* pa = self->parents[0].get();
            NodeT<T>* pb = self->parents[1].get();
            const std::size_t n = self->grad.size();
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) pa->grad[i] += self->grad[i] * pb->value[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) pb->grad[i] += self->grad[i] * pa->value[i];
            }
        };
    });
}

template <typename T>
VarT<T> div(const VarT<T>& a, const VarT<T>& b) {
    require_same_shape(a.tensor(), b.tensor(), "div");
    TensorT<T> out(a.shape());
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = a.tensor()[i] / b.tensor()[i];
    return make_op<T>(std::move(out), {a, b}, [](NodeT<T>* self) {
        return [self]() {
            NodeT<T>* pa = self->parents[0].get();
            NodeT<T>* pb = self->parents[1].get();
            const std::size_t n = self->grad.size();
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) pa->grad[i] += self->grad[i] / pb->value[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    const T bv = pb->value[i];
                    pb->grad[i] -= self->grad[i] * pa->value[i] / (bv * bv);
                }
            }
        };
    });
}

template <typename T>
VarT<T> add_scalar(const VarT<T>& a, T c) {
    TensorT<T> out(a.shape());
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = a.tensor()[i] + c;
    return make_op<T>(std::move(out), {a}, [](NodeT<T>* self) {
        return [self]() {
            NodeT<T>* p = self->parents[0].get();
            p->ensure_grad();
            const std::size_t n = self->grad.size();
            for (std::size_t i = 0; i < n; ++i) p->grad[i] += self->grad[i];
        };
    });
}

template <typename T>
VarT<T> mul_scalar(const VarT<T>& a, T c) {
    TensorT<T> out(a.shape());
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = a.tensor()[i] * c;
    return make_op<T>(std::move(out), {a}, [c](NodeT<T>* self) {
        return [self, c]() {
            NodeT<T>* p = self->parents[0].get();
            p->ensure_grad();
            const std::size_t n = self->grad.size();
            for (std::size_t i = 0; i < n; ++i) p->grad[i] += self->grad[i] * c;
        };
    });
}

// c - x, used for loss = 1 - dice.
template <typename T>
VarT<T> rsub_scalar(T c, const VarT<T>& a) {
    TensorT<T> out(a.shape());
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = c - a.tensor()[i];
    return make_op<T>(std::move(out), {a}, [](NodeT<T>* self) {
        return [self]() {
            NodeT<T>* p = self->parents[0].get();
            p->ensure_grad();
            const std::size_t n = self->grad.size();
            for (std::size_t i = 0; i < n; ++i) p->grad[i] -= self->grad[i];
        };
    });
}

template <typename T>
VarT<T> sum(const VarT<T>& a) {
    T total = T(0);
    for (const T& v : a.tensor().values()) total += v;
    return make_op<T>(TensorT<T>::scalar(total), {a}, [](NodeT<T>* self) {
        return [self]() {
            NodeT<T>* p = self->parents[0].get();
            p->ensure_grad();
            const T g = self->grad[0];
            for (T& v : p->grad.values()) v += g;
        };
    });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename T>
VarT<T> relu6(const VarT<T>& x) {
    TensorT<T> out(x.shape());
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) {
        const T v = x.tensor()[i];
        out[i] = v < T(0) ? T(0) : (v > T(6) ? T(6) : v);
    }
    return make_op<T>(std::move(out), {x}, [](NodeT<T>* self) {
        return [self]() {
            NodeT<T>* p = self->parents[0].get();
            p->ensure_grad();
            const std::size_t n = self->grad.size();
            for (std::size_t i = 0; i < n; ++i) {
                const T v = p->value[i];
                if (v > T(0) && v < T(6)) p->grad[i] += self->grad[i];
            }
        };
    });
}

template <typename T>
VarT<T> sigmoid(const VarT<T>& x) {
    TensorT<T> out(x.shape());
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = T(1) / (T(1) + std::exp(-x.tensor()[i]));
    }
    return make_op<T>(std::move(out), {x}, [](NodeT<T>* self) {
        return [self]() {
            NodeT<T>* p = self->parents[0].get();
            p->ensure_grad();
            const std::size_t n = self->grad.size();
            for (std::size_t i = 0; i < n; ++i) {
                const T y = self->value[i];
                p->grad[i] += self->grad[i] * y * (T(1) - y);
            }
        };
    });
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

namespace detail {

// out[co] += sum_ci cross_correlate(x[ci], w[co][ci]); shared by the forward
// pass and by conv_transpose's input gradient. Weights are indexed
// [out-side channel][in-side channel][kh][kw] of this computation, which in
// both uses coincides with the stored layout.
template <typename T>
void conv2d_accumulate(const TensorT<T>& x, const TensorT<T>& w, int stride, int padding,
                       TensorT<T>& out) {
    const int ci_n = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int co_n = out.dim(0), ho = out.dim(1), wo = out.dim(2);
    const int k = w.dim(2);
    for (int co = 0; co < co_n; ++co) {
        for (int ci = 0; ci < ci_n; ++ci) {
            const std::size_t wbase = (static_cast<std::size_t>(co) * ci_n + ci) * k * k;
            for (int kh = 0; kh < k; ++kh) {
                for (int kw = 0; kw < k; ++kw) {
                    const T wv = w[wbase + static_cast<std::size_t>(kh) * k + kw];
                    if (wv == T(0)) continue;
                    const auto [oh_lo, oh_hi] = valid_range(kh - padding, stride, h, ho);
                    const auto [ow_lo, ow_hi] = valid_range(kw - padding, stride, wd, wo);
                    for (int oh = oh_lo; oh < oh_hi; ++oh) {
                        const int ih = oh * stride - padding + kh;
                        const T* in_row = &x.at(ci, ih, 0);
                        T* out_row = &out.at(co, oh, 0);
                        int iw = ow_lo * stride - padding + kw;
                        for (int ow = ow_lo; ow < ow_hi; ++ow, iw += stride) {
                            out_row[ow] += wv * in_row[iw];
                        }
                    }
                }
            }
        }
    }
}

// gw[co][ci][kh][kw] += sum_{oh,ow} x[ci][ih][iw] * gout[co][oh][ow], with
// (oh,ow) dense over gout and ih = oh*stride - padding + kh into x.
template <typename T>
void conv2d_weight_grad(const TensorT<T>& x, const TensorT<T>& gout, int stride,
                        int padding, TensorT<T>& gw) {
    const int ci_n = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int co_n = gout.dim(0), ho = gout.dim(1), wo = gout.dim(2);
    const int k = gw.dim(2);
    for (int co = 0; co < co_n; ++co) {
        for (int ci = 0; ci < ci_n; ++ci) {
            const std::size_t wbase = (static_cast<std::size_t>(co) * ci_n + ci) * k * k;
            for (int kh = 0; kh < k; ++kh) {
                for (int kw = 0; kw < k; ++kw) {
                    const auto [oh_lo, oh_hi] = valid_range(kh - padding, stride, h, ho);
                    const auto [ow_lo, ow_hi] = valid_range(kw - padding, stride, wd, wo);
                    T acc = T(0);
                    for (int oh = oh_lo; oh < oh_hi; ++oh) {
                        const int ih = oh * stride - padding + kh;
                        const T* in_row = &x.at(ci, ih, 0);
                        const T* g_row = &gout.at(co, oh, 0);
                        int iw = ow_lo * stride - padding + kw;
                        for (int ow = ow_lo; ow < ow_hi; ++ow, iw += stride) {
                            acc += in_row[iw] * g_row[ow];
                        }
                    }
                    gw[wbase + static_cast<std::size_t>(kh) * k + kw] += acc;
                }
            }
        }
    }
}

// Scatter form: out[co][ih*s-p+kh][iw*s-p+kw] += x[ci][ih][iw] * w[ci][co][kh][kw].
// This is, multiply-add for multiply-add, the adjoint of conv2d_accumulate.
template <typename T>
void conv_transpose_scatter(const TensorT<T>& x, const TensorT<T>& w, int stride,
                            int padding, TensorT<T>& out) {
    const int ci_n = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int co_n = out.dim(0), ho = out.dim(1), wo = out.dim(2);
    const int k = w.dim(2);
    for (int ci = 0; ci < ci_n; ++ci) {
        for (int co = 0; co < co_n; ++co) {
            const std::size_t wbase = (static_cast<std::size_t>(ci) * co_n + co) * k * k;
            for (int kh = 0; kh < k; ++kh) {
                for (int kw = 0; kw < k; ++kw) {
                    const T wv = w[wbase + static_cast<std::size_t>(kh) * k + kw];
                    if (wv == T(0)) continue;
                    const auto [ih_lo, ih_hi] = valid_range(kh - padding, stride, ho, h);
                    const auto [iw_lo, iw_hi] = valid_range(kw - padding, stride, wo, wd);
                    for (int ih = ih_lo; ih < ih_hi; ++ih) {
                        const int oh = ih * stride - padding + kh;
                        const T* in_row = &x.at(ci, ih, 0);
                        T* out_row = &out.at(co, oh, 0);
                        int ow = iw_lo * stride - padding + kw;
                        for (int iw = iw_lo; iw < iw_hi; ++iw, ow += stride) {
                            out_row[ow] += wv * in_row[iw];
                        }
                    }
                }
            }
        }
    }
}

} // namespace detail

// Standard cross-correlation. x: [Ci,H,W], w: [Co,Ci,k,k], bias: [Co] (optional).
template <typename T>
VarT<T> conv2d(const VarT<T>& x, const VarT<T>& w, const VarT<T>& bias, int stride,
               int padding) {
    const TensorT<T>& xt = x.tensor();
    const TensorT<T>& wt = w.tensor();
    if (xt.rank() != 3 || wt.rank() != 4) {
        throw DimensionError("conv2d expects input [C,H,W] and weights [Co,Ci,k,k], got " +
                             xt.shape_string() + " and " + wt.shape_string());
    }
    if (wt.dim(2) != wt.dim(3)) throw DimensionError("conv2d kernels must be square");
    if (xt.dim(0) != wt.dim(1)) {
        throw DimensionError("conv2d channel mismatch: input " + xt.shape_string() +
                             " vs weights " + wt.shape_string());
    }
    if (stride < 1) throw ValueError("conv2d stride must be >= 1");
    const int co = wt.dim(0), k = wt.dim(2);
    const int ho = conv_output_size(xt.dim(1), k, stride, padding);
    const int wo = conv_output_size(xt.dim(2), k, stride, padding);
    if (bias.defined() && (bias.tensor().rank() != 1 || bias.tensor().dim(0) != co)) {
        throw DimensionError("conv2d bias shape " + bias.tensor().shape_string() +
                             " does not match " + std::to_string(co) + " output channels");
    }

    TensorT<T> out({co, ho, wo});
    if (bias.defined()) {
        for (int c = 0; c < co; ++c) {
            const T bv = bias.tensor()[c];
            T* plane = &out.at(c, 0, 0);
            std::fill(plane, plane + static_cast<std::size_t>(ho) * wo, bv);
        }
    }
    detail::conv2d_accumulate(xt, wt, stride, padding, out);

    std::vector<VarT<T>> parents = {x, w};
    if (bias.defined()) parents.push_back(bias);
    return make_op<T>(std::move(out), std::move(parents), [stride, padding](NodeT<T>* self) {
        return [self, stride, padding]() {
            NodeT<T>* px = self->parents[0].get();
            NodeT<T>* pw = self->parents[1].get();
            if (px->requires_grad) {
                px->ensure_grad();
                // grad_x = adjoint of the forward correlation
                detail::conv_transpose_scatter(self->grad, pw->value, stride, padding,
                                               px->grad);
            }
            if (pw->requires_grad) {
                pw->ensure_grad();
                detail::conv2d_weight_grad(px->value, self->grad, stride, padding,
                                           pw->grad);
            }
            if (self->parents.size() > 2 && self->parents[2]->requires_grad) {
                NodeT<T>* pb = self->parents[2].get();
                pb->ensure_grad();
                const int co = self->value.dim(0);
                const std::size_t plane = static_cast<std::size_t>(self->value.dim(1)) *
                                          self->value.dim(2);
                for (int c = 0; c < co; ++c) {
                    T acc = T(0);
                    const T* g = &self->grad.at(c, 0, 0);
                    for (std::size_t i = 0; i < plane; ++i) acc += g[i];
                    pb->grad[c] += acc;
                }
            }
        };
    });
}

template <typename T>
VarT<T> conv2d(const VarT<T>& x, const VarT<T>& w, int stride, int padding) {
    return conv2d(x, w, VarT<T>(), stride, padding);
}

// Per-channel convolution. x: [C,H,W], w: [C,1,k,k].
template <typename T>
VarT<T> depthwise_conv2d(const VarT<T>& x, const VarT<T>& w, int stride, int padding) {
    const TensorT<T>& xt = x.tensor();
    const TensorT<T>& wt = w.tensor();
    if (xt.rank() != 3 || wt.rank() != 4 || wt.dim(1) != 1) {
        throw DimensionError("depthwise_conv2d expects input [C,H,W] and weights [C,1,k,k], got " +
                             xt.shape_string() + " and " + wt.shape_string());
    }
    if (wt.dim(2) != wt.dim(3)) throw DimensionError("depthwise kernels must be square");
    if (xt.dim(0) != wt.dim(0)) {
        throw DimensionError("depthwise_conv2d channel mismatch: input " + xt.shape_string() +
                             " vs weights " + wt.shape_string());
    }
    if (stride < 1) throw ValueError("depthwise_conv2d stride must be >= 1");
    const int c_n = xt.dim(0), h = xt.dim(1), wd = xt.dim(2), k = wt.dim(2);
    const int ho = conv_output_size(h, k, stride, padding);
    const int wo = conv_output_size(wd, k, stride, padding);

    TensorT<T> out({c_n, ho, wo});
    for (int c = 0; c < c_n; ++c) {
        for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
                const T wv = wt[(static_cast<std::size_t>(c) * k + kh) * k + kw];
                if (wv == T(0)) continue;
                const auto [oh_lo, oh_hi] = detail::valid_range(kh - padding, stride, h, ho);
                const auto [ow_lo, ow_hi] = detail::valid_range(kw - padding, stride, wd, wo);
                for (int oh = oh_lo; oh < oh_hi; ++oh) {
                    const int ih = oh * stride - padding + kh;
                    const T* in_row = &xt.at(c, ih, 0);
                    T* out_row = &out.at(c, oh, 0);
                    int iw = ow_lo * stride - padding + kw;
                    for (int ow = ow_lo; ow < ow_hi; ++ow, iw += stride) {
                        out_row[ow] += wv * in_row[iw];
                    }
                }
            }
        }
    }

    return make_op<T>(std::move(out), {x, w}, [stride, padding, k](NodeT<T>* self) {
        return [self, stride, padding, k]() {
            NodeT<T>* px = self->parents[0].get();
            NodeT<T>* pw = self->parents[1].get();
            const int c_n = px->value.dim(0), h = px->value.dim(1), wd = px->value.dim(2);
            const int ho = self->value.dim(1), wo = self->value.dim(2);
            if (px->requires_grad) px->ensure_grad();
            if (pw->requires_grad) pw->ensure_grad();
            for (int c = 0; c < c_n; ++c) {
                for (int kh = 0; kh < k; ++kh) {
                    for (int kw = 0; kw < k; ++kw) {
                        const std::size_t widx = (static_cast<std::size_t>(c) * k + kh) * k + kw;
                        const T wv = pw->value[widx];
                        const auto [oh_lo, oh_hi] =
                            detail::valid_range(kh - padding, stride, h, ho);
                        const auto [ow_lo, ow_hi] =
                            detail::valid_range(kw - padding, stride, wd, wo);
                        T wacc = T(0);
                        for (int oh = oh_lo; oh < oh_hi; ++oh) {
                            const int ih = oh * stride - padding + kh;
                            const T* g_row = &self->grad.at(c, oh, 0);
                            const T* in_row = &px->value.at(c, ih, 0);
                            T* gx_row = px->requires_grad ? &px->grad.at(c, ih, 0) : nullptr;
                            int iw = ow_lo * stride - padding + kw;
                            for (int ow = ow_lo; ow < ow_hi; ++ow, iw += stride) {
                                if (gx_row) gx_row[iw] += wv * g_row[ow];
                                wacc += in_row[iw] * g_row[ow];
                            }
                        }
                        if (pw->requires_grad) pw->grad[widx] += wacc;
                    }
                }
            }
        };
    });
}

// Transposed convolution (adjoint of conv2d under shared weights).
// x: [Ci,H,W], w: [Ci,Co,k,k], bias: [Co] (optional).
template <typename T>
VarT<T> conv_transpose2d(const VarT<T>& x, const VarT<T>& w, const VarT<T>& bias, int stride,
                         int padding, int output_padding = 0) {
    const TensorT<T>& xt = x.tensor();
    const TensorT<T>& wt = w.tensor();
    if (xt.rank() != 3 || wt.rank() != 4) {
        throw DimensionError("conv_transpose2d expects input [C,H,W] and weights [Ci,Co,k,k], got " +
                             xt.shape_string() + " and " + wt.shape_string());
    }
    if (wt.dim(2) != wt.dim(3)) throw DimensionError("conv_transpose2d kernels must be square");
    if (xt.dim(0) != wt.dim(0)) {
        throw DimensionError("conv_transpose2d channel mismatch: input " + xt.shape_string() +
                             " vs weights " + wt.shape_string());
    }
    if (stride < 1) throw ValueError("conv_transpose2d stride must be >= 1");
    const int co = wt.dim(1), k = wt.dim(2);
    const int ho = conv_transpose_output_size(xt.dim(1), k, stride, padding, output_padding);
    const int wo = conv_transpose_output_size(xt.dim(2), k, stride, padding, output_padding);
    if (bias.defined() && (bias.tensor().rank() != 1 || bias.tensor().dim(0) != co)) {
        throw DimensionError("conv_transpose2d bias shape " + bias.tensor().shape_string() +
                             " does not match " + std::to_string(co) + " output channels");
    }

    TensorT<T> out({co, ho, wo});
    if (bias.defined()) {
        for (int c = 0; c < co; ++c) {
            const T bv = bias.tensor()[c];
            T* plane = &out.at(c, 0, 0);
            std::fill(plane, plane + static_cast<std::size_t>(ho) * wo, bv);
        }
    }
    detail::conv_transpose_scatter(xt, wt, stride, padding, out);

    std::vector<VarT<T>> parents = {x, w};
    if (bias.defined()) parents.push_back(bias);
    return make_op<T>(std::move(out), std::move(parents), [stride, padding](NodeT<T>* self) {
        return [self, stride, padding]() {
            NodeT<T>* px = self->parents[0].get();
            NodeT<T>* pw = self->parents[1].get();
            if (px->requires_grad) {
                px->ensure_grad();
                // grad_x gathers: the adjoint of scatter is the correlation
                detail::conv2d_accumulate(self->grad, pw->value, stride, padding, px->grad);
            }
            if (pw->requires_grad) {
                pw->ensure_grad();
                // gw[ci][co][kh][kw] += sum x[ci][ih][iw] * gout[co][oh][ow];
                // the conv2d weight-grad kernel with the roles swapped.
                detail::conv2d_weight_grad(self->grad, px->value, stride, padding, pw->grad);
            }
            if (self->parents.size() > 2 && self->parents[2]->requires_grad) {
                NodeT<T>* pb = self->parents[2].get();
                pb->ensure_grad();
                const int co = self->value.dim(0);
                const std::size_t plane = static_cast<std::size_t>(self->value.dim(1)) *
                                          self->value.dim(2);
                for (int c = 0; c < co; ++c) {
                    T acc = T(0);
                    const T* g = &self->grad.at(c, 0, 0);
                    for (std::size_t i = 0; i < plane; ++i) acc += g[i];
                    pb->grad[c] += acc;
                }
            }
        };
    });
}

template <typename T>
VarT<T> conv_transpose2d(const VarT<T>& x, const VarT<T>& w, int stride, int padding,
                         int output_padding = 0) {
    return conv_transpose2d(x, w, VarT<T>(), stride, padding, output_padding);
}

// ---------------------------------------------------------------------------
// Batch normalization (single image: statistics over H*W per channel)
// ---------------------------------------------------------------------------

template <typename T>
struct BatchNormOptions {
    T momentum = T(0.1);
    T epsilon = T(1e-5);
    bool training = false;
};

template <typename T>
VarT<T> batchnorm(const VarT<T>& x, const VarT<T>& gamma, const VarT<T>& beta,
                  TensorT<T>& running_mean, TensorT<T>& running_var,
                  const BatchNormOptions<T>& opts) {
    const TensorT<T>& xt = x.tensor();
    if (xt.rank() != 3) {
        throw DimensionError("batchnorm expects input [C,H,W], got " + xt.shape_string());
    }
    const int c_n = xt.dim(0), h = xt.dim(1), wd = xt.dim(2);
    const std::size_t m = static_cast<std::size_t>(h) * wd;
    auto check_c = [&](const TensorT<T>& p, const char* name) {
        if (p.rank() != 1 || p.dim(0) != c_n) {
            throw DimensionError(std::string("batchnorm ") + name + " shape " +
                                 p.shape_string() + " does not match " +
                                 std::to_string(c_n) + " channels");
        }
    };
    check_c(gamma.tensor(), "gamma");
    check_c(beta.tensor(), "beta");
    check_c(running_mean, "running_mean");
    check_c(running_var, "running_var");

    TensorT<T> out(xt.shape());
    TensorT<T> xhat(xt.shape());
    std::vector<T> inv_std(c_n);
    for (int c = 0; c < c_n; ++c) {
        T mean, var;
        if (opts.training) {
            T s = T(0);
            const T* in = &xt.at(c, 0, 0);
            for (std::size_t i = 0; i < m; ++i) s += in[i];
            mean = s / static_cast<T>(m);
            T sq = T(0);
            for (std::size_t i = 0; i < m; ++i) {
                const T d = in[i] - mean;
                sq += d * d;
            }
            var = sq / static_cast<T>(m);
            const T unbiased = m > 1 ? sq / static_cast<T>(m - 1) : var;
            running_mean[c] = (T(1) - opts.momentum) * running_mean[c] + opts.momentum * mean;
            running_var[c] = (T(1) - opts.momentum) * running_var[c] + opts.momentum * unbiased;
        } else {
            mean = running_mean[c];
            var = running_var[c];
        }
        const T istd = T(1) / std::sqrt(var + opts.epsilon);
        inv_std[c] = istd;
        const T g = gamma.tensor()[c];
        const T b = beta.tensor()[c];
        const T* in = &xt.at(c, 0, 0);
        T* xh = &xhat.at(c, 0, 0);
        T* o = &out.at(c, 0, 0);
        for (std::size_t i = 0; i < m; ++i) {
            xh[i] = (in[i] - mean) * istd;
            o[i] = g * xh[i] + b;
        }
    }

    const bool training = opts.training;
    return make_op<T>(std::move(out), {x, gamma, beta},
                      [xhat = std::move(xhat), inv_std = std::move(inv_std), m,
                       training](NodeT<T>* self) {
        return [self, xhat, inv_std, m, training]() {
            NodeT<T>* px = self->parents[0].get();
            NodeT<T>* pg = self->parents[1].get();
            NodeT<T>* pb = self->parents[2].get();
            const int c_n = self->value.dim(0);
            if (px->requires_grad) px->ensure_grad();
            if (pg->requires_grad) pg->ensure_grad();
            if (pb->requires_grad) pb->ensure_grad();
            for (int c = 0; c < c_n; ++c) {
                const T* g = &self->grad.at(c, 0, 0);
                const T* xh = &xhat.at(c, 0, 0);
                T gsum = T(0), gxsum = T(0);
                for (std::size_t i = 0; i < m; ++i) {
                    gsum += g[i];
                    gxsum += g[i] * xh[i];
                }
                if (pg->requires_grad) pg->grad[c] += gxsum;
                if (pb->requires_grad) pb->grad[c] += gsum;
                if (px->requires_grad) {
                    const T gam = pg->value[c];
                    const T istd = inv_std[c];
                    T* gx = &px->grad.at(c, 0, 0);
                    if (training) {
                        // batch statistics depend on x
                        const T gmean = gsum / static_cast<T>(m);
                        const T gxmean = gxsum / static_cast<T>(m);
                        for (std::size_t i = 0; i < m; ++i) {
                            gx[i] += gam * istd * (g[i] - gmean - xh[i] * gxmean);
                        }
                    } else {
                        for (std::size_t i = 0; i < m; ++i) {
                            gx[i] += gam * istd * g[i];
                        }
                    }
                }
            }
        };
    });
}

} // namespace iriskit::nn
