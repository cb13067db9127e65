#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <vector>

#include "pnsamp/autodiff.hpp"
#include "pnsamp/parallel.hpp"
#include "pnsamp/tensor.hpp"

namespace pnsamp {

// ---------------------------------------------------------------------------
// Parameter bundles. Convolutions are 3x3x3 "same" zero padding, stride 1
// throughout the network; kernel size stays a parameter so the segmentation
// head can use 1x1x1.
// ---------------------------------------------------------------------------

template <typename T>
struct Conv3dParams {
    Tensor<T> kernel;  // [out_ch, in_ch, k, k, k], k odd
    Tensor<T> bias;    // [out_ch]

    std::size_t out_channels() const { return kernel.shape[0]; }
    std::size_t in_channels() const { return kernel.shape[1]; }
    std::size_t kernel_size() const { return kernel.shape[2]; }
};

template <typename T>
struct BatchNormParams {
    Tensor<T> gamma;         // [channels]
    Tensor<T> beta;          // [channels]
    Tensor<T> running_mean;  // [channels], buffer
    Tensor<T> running_var;   // [channels], buffer
    T epsilon = T(1e-5);
    T momentum = T(0.1);  // running = (1-momentum)*running + momentum*batch
};

template <typename T>
struct DenseParams {
    Tensor<T> weight;  // [out, in]
    Tensor<T> bias;    // [out]
};

// Weight init: zero-mean uniform scaled by fan-in (+-sqrt(6/fan_in)),
// biases zero, gamma one, beta zero.
template <typename T>
Conv3dParams<T> make_conv3d_params(std::size_t out_ch, std::size_t in_ch, std::size_t k,
                                   Rng& rng) {
    if (k % 2 == 0) throw ValueError("conv3d kernel size must be odd");
    const double bound = std::sqrt(6.0 / static_cast<double>(in_ch * k * k * k));
    Conv3dParams<T> p;
    p.kernel = Tensor<T>::uniform({out_ch, in_ch, k, k, k}, rng, static_cast<T>(-bound),
                                  static_cast<T>(bound), /*req_grad=*/true);
    p.bias = Tensor<T>({out_ch}, T(0), /*req_grad=*/true);
    return p;
}

template <typename T>
DenseParams<T> make_dense_params(std::size_t out, std::size_t in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in));
    DenseParams<T> p;
    p.weight = Tensor<T>::uniform({out, in}, rng, static_cast<T>(-bound),
                                  static_cast<T>(bound), /*req_grad=*/true);
    p.bias = Tensor<T>({out}, T(0), /*req_grad=*/true);
    return p;
}

template <typename T>
BatchNormParams<T> make_batchnorm_params(std::size_t channels) {
    BatchNormParams<T> p;
    p.gamma = Tensor<T>({channels}, T(1), /*req_grad=*/true);
    p.beta = Tensor<T>({channels}, T(0), /*req_grad=*/true);
    p.running_mean = Tensor<T>({channels}, T(0));
    p.running_var = Tensor<T>({channels}, T(1));
    return p;
}

// ---------------------------------------------------------------------------
// conv3d: direct convolution organized as shifted-row accumulation so the
// innermost loops run over the contiguous fastest axis.
// ---------------------------------------------------------------------------

namespace detail {

inline void check_conv_shapes(const Shape& x, const Shape& kernel, const Shape& bias,
                              const std::string& where) {
    if (x.size() != 5 || kernel.size() != 5 || bias.size() != 1) {
        throw ShapeError(cat(where, ": conv3d wants x[n,c,d,h,w], kernel[o,i,k,k,k], bias[o]; got x ",
                             shape_str(x), ", kernel ", shape_str(kernel), ", bias ", shape_str(bias)));
    }
    if (x[1] != kernel[1]) {
        throw ShapeError(cat(where, ": input channels ", x[1], " != kernel in_ch ", kernel[1],
                             " [x ", shape_str(x), ", kernel ", shape_str(kernel), "]"));
    }
    if (kernel[2] != kernel[3] || kernel[2] != kernel[4] || kernel[2] % 2 == 0) {
        throw ShapeError(cat(where, ": kernel must be cubic with odd size, got ", shape_str(kernel)));
    }
    if (bias[0] != kernel[0]) {
        throw ShapeError(cat(where, ": bias ", shape_str(bias), " vs kernel ", shape_str(kernel)));
    }
}

}  // namespace detail

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                 const std::string& where = "conv3d") {
    detail::check_conv_shapes(x.shape, kernel.shape, bias.shape, where);
    const std::size_t n = x.shape[0], ic = x.shape[1];
    const std::size_t d = x.shape[2], h = x.shape[3], w = x.shape[4];
    const std::size_t oc = kernel.shape[0], k = kernel.shape[2];
    const long pad = static_cast<long>(k / 2);

    Tensor<T> out({n, oc, d, h, w});
    const T* xd = x.data.data();
    const T* kd_ = kernel.data.data();
    const T* bd = bias.data.data();
    T* od_ = out.data.data();

    ThreadPool::instance().run(n * oc, [&](std::size_t begin, std::size_t end) {
        std::vector<T> acc(w);
        for (std::size_t job = begin; job < end; ++job) {
            const std::size_t nn = job / oc, co = job % oc;
            for (std::size_t od = 0; od < d; ++od) {
                for (std::size_t oh = 0; oh < h; ++oh) {
                    std::fill(acc.begin(), acc.end(), bd[co]);
                    for (std::size_t ci = 0; ci < ic; ++ci) {
                        for (std::size_t kz = 0; kz < k; ++kz) {
                            const long id_ = static_cast<long>(od) + static_cast<long>(kz) - pad;
                            if (id_ < 0 || id_ >= static_cast<long>(d)) continue;
                            for (std::size_t ky = 0; ky < k; ++ky) {
                                const long ih = static_cast<long>(oh) + static_cast<long>(ky) - pad;
                                if (ih < 0 || ih >= static_cast<long>(h)) continue;
                                const T* xrow = xd + (((nn * ic + ci) * d + id_) * h + ih) * w;
                                const T* krow = kd_ + (((co * ic + ci) * k + kz) * k + ky) * k;
                                for (std::size_t kx = 0; kx < k; ++kx) {
                                    const T wgt = krow[kx];
                                    const long shift = static_cast<long>(kx) - pad;
                                    const std::size_t lo = shift < 0 ? static_cast<std::size_t>(-shift) : 0;
                                    const std::size_t hi = shift > 0 ? w - static_cast<std::size_t>(shift) : w;
                                    const T* src = xrow + shift;
                                    for (std::size_t ow = lo; ow < hi; ++ow) acc[ow] += wgt * src[ow];
                                }
                            }
                        }
                    }
                    T* orow = od_ + (((nn * oc + co) * d + od) * h + oh) * w;
                    std::copy(acc.begin(), acc.end(), orow);
                }
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Conv3dParams<T>& p,
                 const std::string& where = "conv3d") {
    return conv3d(x, p.kernel, p.bias, where);
}

template <typename T>
void conv3d_backward_input(const std::vector<T>& dy, const Tensor<T>& kernel,
                           const Shape& x_shape, std::vector<T>& dx) {
    const std::size_t n = x_shape[0], ic = x_shape[1];
    const std::size_t d = x_shape[2], h = x_shape[3], w = x_shape[4];
    const std::size_t oc = kernel.shape[0], k = kernel.shape[2];
    const long pad = static_cast<long>(k / 2);
    const T* gd = dy.data();
    const T* kd_ = kernel.data.data();

    ThreadPool::instance().run(n * ic, [&](std::size_t begin, std::size_t end) {
        std::vector<T> acc(w);
        for (std::size_t job = begin; job < end; ++job) {
            const std::size_t nn = job / ic, ci = job % ic;
            for (std::size_t iz = 0; iz < d; ++iz) {
                for (std::size_t iy = 0; iy < h; ++iy) {
                    std::fill(acc.begin(), acc.end(), T(0));
                    for (std::size_t co = 0; co < oc; ++co) {
                        for (std::size_t kz = 0; kz < k; ++kz) {
                            const long od = static_cast<long>(iz) - static_cast<long>(kz) + pad;
                            if (od < 0 || od >= static_cast<long>(d)) continue;
                            for (std::size_t ky = 0; ky < k; ++ky) {
                                const long oh = static_cast<long>(iy) - static_cast<long>(ky) + pad;
                                if (oh < 0 || oh >= static_cast<long>(h)) continue;
                                const T* grow = gd + (((nn * oc + co) * d + od) * h + oh) * w;
                                const T* krow = kd_ + (((co * ic + ci) * k + kz) * k + ky) * k;
                                for (std::size_t kx = 0; kx < k; ++kx) {
                                    const T wgt = krow[kx];
                                    const long shift = pad - static_cast<long>(kx);  // ow = iw + shift
                                    const std::size_t lo = shift < 0 ? static_cast<std::size_t>(-shift) : 0;
                                    const std::size_t hi = shift > 0 ? w - static_cast<std::size_t>(shift) : w;
                                    const T* src = grow + shift;
                                    for (std::size_t iw = lo; iw < hi; ++iw) acc[iw] += wgt * src[iw];
                                }
                            }
                        }
                    }
                    T* drow = dx.data() + (((nn * ic + ci) * d + iz) * h + iy) * w;
                    for (std::size_t iw = 0; iw < w; ++iw) drow[iw] += acc[iw];
                }
            }
        }
    });
}

template <typename T>
void conv3d_backward_params(const std::vector<T>& dy, const Tensor<T>& x, const Shape& kshape,
                            std::vector<T>& dkernel, std::vector<T>& dbias) {
    const std::size_t n = x.shape[0], ic = x.shape[1];
    const std::size_t d = x.shape[2], h = x.shape[3], w = x.shape[4];
    const std::size_t oc = kshape[0], k = kshape[2];
    const long pad = static_cast<long>(k / 2);
    const T* gd = dy.data();
    const T* xd = x.data.data();

    // One output channel per job: each job owns a disjoint slice of dkernel
    // and dbias, keeping accumulation order fixed.
    ThreadPool::instance().run(oc, [&](std::size_t begin, std::size_t end) {
        std::vector<T> partial(k);
        for (std::size_t co = begin; co < end; ++co) {
            T bsum = T(0);
            for (std::size_t nn = 0; nn < n; ++nn) {
                const T* gbase = gd + ((nn * oc + co) * d) * h * w;
                for (std::size_t i = 0, m = d * h * w; i < m; ++i) bsum += gbase[i];
            }
            dbias[co] += bsum;
            for (std::size_t ci = 0; ci < ic; ++ci) {
                for (std::size_t kz = 0; kz < k; ++kz) {
                    for (std::size_t ky = 0; ky < k; ++ky) {
                        std::fill(partial.begin(), partial.end(), T(0));
                        for (std::size_t nn = 0; nn < n; ++nn) {
                            for (std::size_t od = 0; od < d; ++od) {
                                const long iz = static_cast<long>(od) + static_cast<long>(kz) - pad;
                                if (iz < 0 || iz >= static_cast<long>(d)) continue;
                                for (std::size_t oh = 0; oh < h; ++oh) {
                                    const long iy = static_cast<long>(oh) + static_cast<long>(ky) - pad;
                                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                                    const T* grow = gd + (((nn * oc + co) * d + od) * h + oh) * w;
                                    const T* xrow = xd + (((nn * ic + ci) * d + iz) * h + iy) * w;
                                    for (std::size_t kx = 0; kx < k; ++kx) {
                                        const long shift = static_cast<long>(kx) - pad;
                                        const std::size_t lo = shift < 0 ? static_cast<std::size_t>(-shift) : 0;
                                        const std::size_t hi = shift > 0 ? w - static_cast<std::size_t>(shift) : w;
                                        const T* src = xrow + shift;
                                        T dot = T(0);
                                        for (std::size_t ow = lo; ow < hi; ++ow) dot += grow[ow] * src[ow];
                                        partial[kx] += dot;
                                    }
                                }
                            }
                        }
                        T* krow = dkernel.data() + (((co * ic + ci) * k + kz) * k + ky) * k;
                        for (std::size_t kx = 0; kx < k; ++kx) krow[kx] += partial[kx];
                    }
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// batch normalization over the channel axis (axis 1), reducing across batch
// and spatial dims. Uses biased variance for both normalization and the
// running statistics.
// ---------------------------------------------------------------------------

template <typename T>
struct BatchNormSaved {
    std::vector<T> mean;
    std::vector<T> invstd;
};

template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, BatchNormParams<T>& p, bool train,
                    BatchNormSaved<T>* saved = nullptr,
                    const std::string& where = "batchnorm") {
    if (x.ndim() < 2) {
        throw ShapeError(detail::cat(where, ": needs [n, c, ...], got ", shape_str(x.shape)));
    }
    const std::size_t n = x.shape[0], c = x.shape[1];
    if (c != p.gamma.shape[0]) {
        throw ShapeError(detail::cat(where, ": ", c, " channels vs gamma ",
                                     shape_str(p.gamma.shape)));
    }
    if (train && n < 2) {
        throw ValueError(detail::cat(where, ": train mode needs batch size >= 2, got ", n));
    }
    std::size_t sp = 1;
    for (std::size_t i = 2; i < x.ndim(); ++i) sp *= x.shape[i];
    const std::size_t m = n * sp;

    Tensor<T> out(x.shape);
    std::vector<T> mean(c), invstd(c);
    if (train) {
        parallel_for(c, [&](std::size_t ch) {
            T sum = T(0), sq = T(0);
            for (std::size_t nn = 0; nn < n; ++nn) {
                const T* row = x.data.data() + (nn * c + ch) * sp;
                for (std::size_t i = 0; i < sp; ++i) {
                    sum += row[i];
                    sq += row[i] * row[i];
                }
            }
            const T mu = sum / static_cast<T>(m);
            T var = sq / static_cast<T>(m) - mu * mu;
            if (var < T(0)) var = T(0);  // guard against rounding
            mean[ch] = mu;
            invstd[ch] = T(1) / std::sqrt(var + p.epsilon);
            p.running_mean[ch] = (T(1) - p.momentum) * p.running_mean[ch] + p.momentum * mu;
            p.running_var[ch] = (T(1) - p.momentum) * p.running_var[ch] + p.momentum * var;
        });
    } else {
        for (std::size_t ch = 0; ch < c; ++ch) {
            mean[ch] = p.running_mean[ch];
            invstd[ch] = T(1) / std::sqrt(p.running_var[ch] + p.epsilon);
        }
    }
    parallel_for(n * c, [&](std::size_t j) {
        const std::size_t ch = j % c;
        const T* row = x.data.data() + j * sp;
        T* orow = out.data.data() + j * sp;
        const T mu = mean[ch], is = invstd[ch];
        const T gm = p.gamma[ch], bt = p.beta[ch];
        for (std::size_t i = 0; i < sp; ++i) orow[i] = gm * (row[i] - mu) * is + bt;
    });
    if (saved) {
        saved->mean = std::move(mean);
        saved->invstd = std::move(invstd);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Activations and pooling.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> elu(const Tensor<T>& x, T alpha = T(1)) {
    if (!(alpha > T(0))) throw ValueError("elu: alpha must be > 0");
    Tensor<T> out = x;
    for (auto& v : out.data) v = v > T(0) ? v : alpha * (std::exp(v) - T(1));
    return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    Tensor<T> out = x;
    for (auto& v : out.data) {
        if (v >= T(0)) {
            v = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            v = e / (T(1) + e);
        }
    }
    return out;
}

/// 2x2x2 max pooling, stride 2. Spatial dims must be even.
template <typename T>
Tensor<T> maxpool3d(const Tensor<T>& x, std::vector<std::size_t>* argmax = nullptr,
                    const std::string& where = "maxpool3d") {
    if (x.ndim() != 5) {
        throw ShapeError(detail::cat(where, ": wants [n,c,d,h,w], got ", shape_str(x.shape)));
    }
    const std::size_t n = x.shape[0], c = x.shape[1];
    const std::size_t d = x.shape[2], h = x.shape[3], w = x.shape[4];
    if (d % 2 || h % 2 || w % 2) {
        throw ShapeError(detail::cat(where, ": spatial dims must be divisible by 2, got ",
                                     shape_str(x.shape)));
    }
    const std::size_t od = d / 2, oh = h / 2, ow = w / 2;
    Tensor<T> out({n, c, od, oh, ow});
    if (argmax) argmax->assign(out.numel(), 0);

    parallel_for(n * c, [&](std::size_t j) {
        const T* base = x.data.data() + j * d * h * w;
        T* obase = out.data.data() + j * od * oh * ow;
        for (std::size_t z = 0; z < od; ++z) {
            for (std::size_t y = 0; y < oh; ++y) {
                for (std::size_t xx = 0; xx < ow; ++xx) {
                    T best = -std::numeric_limits<T>::infinity();
                    std::size_t best_idx = 0;
                    for (std::size_t kz = 0; kz < 2; ++kz) {
                        for (std::size_t ky = 0; ky < 2; ++ky) {
                            for (std::size_t kx = 0; kx < 2; ++kx) {
                                const std::size_t idx =
                                    ((2 * z + kz) * h + (2 * y + ky)) * w + (2 * xx + kx);
                                // strict > keeps the first voxel in scan order on ties
                                if (base[idx] > best) {
                                    best = base[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    const std::size_t o = (z * oh + y) * ow + xx;
                    obase[o] = best;
                    if (argmax) (*argmax)[j * od * oh * ow + o] = j * d * h * w + best_idx;
                }
            }
        }
    });
    return out;
}

/// Nearest-neighbor up-pooling: every voxel repeated into a 2x2x2 block.
template <typename T>
Tensor<T> uppool3d(const Tensor<T>& x, const std::string& where = "uppool3d") {
    if (x.ndim() != 5) {
        throw ShapeError(detail::cat(where, ": wants [n,c,d,h,w], got ", shape_str(x.shape)));
    }
    const std::size_t n = x.shape[0], c = x.shape[1];
    const std::size_t d = x.shape[2], h = x.shape[3], w = x.shape[4];
    Tensor<T> out({n, c, 2 * d, 2 * h, 2 * w});
    parallel_for(n * c, [&](std::size_t j) {
        const T* base = x.data.data() + j * d * h * w;
        T* obase = out.data.data() + j * 8 * d * h * w;
        for (std::size_t z = 0; z < 2 * d; ++z) {
            for (std::size_t y = 0; y < 2 * h; ++y) {
                const T* irow = base + ((z / 2) * h + y / 2) * w;
                T* orow = obase + (z * 2 * h + y) * 2 * w;
                for (std::size_t xx = 0; xx < 2 * w; ++xx) orow[xx] = irow[xx / 2];
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                const std::string& where = "dense") {
    if (x.ndim() != 2 || weight.ndim() != 2 || x.shape[1] != weight.shape[1] ||
        bias.shape != Shape{weight.shape[0]}) {
        throw ShapeError(detail::cat(where, ": x ", shape_str(x.shape), " vs weight ",
                                     shape_str(weight.shape), ", bias ", shape_str(bias.shape)));
    }
    const std::size_t n = x.shape[0], in = x.shape[1], out_n = weight.shape[0];
    Tensor<T> out({n, out_n});
    for (std::size_t nn = 0; nn < n; ++nn) {
        const T* xrow = x.data.data() + nn * in;
        T* orow = out.data.data() + nn * out_n;
        for (std::size_t o = 0; o < out_n; ++o) {
            const T* wrow = weight.data.data() + o * in;
            T acc = bias[o];
            for (std::size_t i = 0; i < in; ++i) acc += wrow[i] * xrow[i];
            orow[o] = acc;
        }
    }
    return out;
}

template <typename T>
Tensor<T> dense(const Tensor<T>& x, const DenseParams<T>& p,
                const std::string& where = "dense") {
    return dense(x, p.weight, p.bias, where);
}

/// Row-wise softmax over the last axis, computed with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
    if (x.ndim() < 1) throw ShapeError("softmax: rank-0 input");
    const std::size_t c = x.shape.back();
    const std::size_t rows = x.numel() / c;
    Tensor<T> out = x;
    for (std::size_t r = 0; r < rows; ++r) {
        T* row = out.data.data() + r * c;
        T mx = row[0];
        for (std::size_t i = 1; i < c; ++i) mx = std::max(mx, row[i]);
        T sum = T(0);
        for (std::size_t i = 0; i < c; ++i) {
            row[i] = std::exp(row[i] - mx);
            sum += row[i];
        }
        for (std::size_t i = 0; i < c; ++i) row[i] /= sum;
    }
    return out;
}

/// Concatenation along the channel axis (axis 1).
template <typename T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& parts,
                          const std::string& where = "concat") {
    if (parts.empty()) throw ValueError(detail::cat(where, ": nothing to concatenate"));
    const Shape& first = parts[0]->shape;
    if (first.size() < 2) {
        throw ShapeError(detail::cat(where, ": wants rank >= 2, got ", shape_str(first)));
    }
    std::size_t total_c = 0;
    for (const auto* t : parts) {
        if (t->ndim() != first.size() || t->shape[0] != first[0]) {
            throw ShapeError(detail::cat(where, ": mismatched shapes ", shape_str(first), " vs ",
                                         shape_str(t->shape)));
        }
        for (std::size_t i = 2; i < first.size(); ++i) {
            if (t->shape[i] != first[i]) {
                throw ShapeError(detail::cat(where, ": mismatched shapes ", shape_str(first),
                                             " vs ", shape_str(t->shape)));
            }
        }
        total_c += t->shape[1];
    }
    Shape out_shape = first;
    out_shape[1] = total_c;
    Tensor<T> out(out_shape);
    std::size_t sp = 1;
    for (std::size_t i = 2; i < first.size(); ++i) sp *= first[i];
    const std::size_t n = first[0];
    for (std::size_t nn = 0; nn < n; ++nn) {
        std::size_t coff = 0;
        for (const auto* t : parts) {
            const std::size_t tc = t->shape[1];
            std::copy(t->data.data() + nn * tc * sp, t->data.data() + (nn + 1) * tc * sp,
                      out.data.data() + (nn * total_c + coff) * sp);
            coff += tc;
        }
    }
    return out;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    return concat_channels<T>({&a, &b});
}

/// [n, c, spatial...] -> [n, c] by averaging over the spatial axes.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    if (x.ndim() < 3) throw ShapeError(detail::cat("global_avg_pool: got ", shape_str(x.shape)));
    const std::size_t n = x.shape[0], c = x.shape[1];
    std::size_t sp = 1;
    for (std::size_t i = 2; i < x.ndim(); ++i) sp *= x.shape[i];
    Tensor<T> out({n, c});
    for (std::size_t j = 0; j < n * c; ++j) {
        const T* row = x.data.data() + j * sp;
        T acc = T(0);
        for (std::size_t i = 0; i < sp; ++i) acc += row[i];
        out[j] = acc / static_cast<T>(sp);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Graph ops.
// ---------------------------------------------------------------------------

/// Inputs: x, kernel, bias.
template <typename T>
class Conv3dOp : public Op<T> {
public:
    const char* kind() const override { return "conv3d"; }
    Tensor<T> forward(Graph<T>& g, NodeId self) override {
        const auto& in = g.inputs_of(self);
        return conv3d(g.value(in[0]), g.value(in[1]), g.value(in[2]), g.label_of(self));
    }
    void backward(Graph<T>& g, NodeId self) override {
        const auto& in = g.inputs_of(self);
        const std::vector<T>& dy = g.grad_of(self);
        if (g.node_needs_grad(in[0])) {
            conv3d_backward_input(dy, g.value(in[1]), g.value(in[0]).shape, g.grad_of(in[0]));
        }
        if (g.node_needs_grad(in[1]) || g.node_needs_grad(in[2])) {
            conv3d_backward_params(dy, g.value(in[0]), g.value(in[1]).shape, g.grad_of(in[1]),
                                   g.grad_of(in[2]));
        }
    }
};

/// Inputs: x, gamma, beta. Running statistics live in the referenced params
/// struct and are updated by train-mode forward.
template <typename T>
class BatchNormOp : public Op<T> {
public:
    explicit BatchNormOp(BatchNormParams<T>* p) : params_(p) {}
    const char* kind() const override { return "batchnorm"; }

    Tensor<T> forward(Graph<T>& g, NodeId self) override {
        const auto& in = g.inputs_of(self);
        train_mode_ = g.training();
        return batchnorm(g.value(in[0]), *params_, train_mode_, &saved_, g.label_of(self));
    }

    void backward(Graph<T>& g, NodeId self) override {
        const auto& in = g.inputs_of(self);
        const Tensor<T>& x = g.value(in[0]);
        const std::vector<T>& dy = g.grad_of(self);
        const std::size_t n = x.shape[0], c = x.shape[1];
        std::size_t sp = 1;
        for (std::size_t i = 2; i < x.ndim(); ++i) sp *= x.shape[i];
        const std::size_t m = n * sp;

        std::vector<T>& dgamma = g.grad_of(in[1]);
        std::vector<T>& dbeta = g.grad_of(in[2]);
        const bool want_dx = g.node_needs_grad(in[0]);
        std::vector<T>* dx = want_dx ? &g.grad_of(in[0]) : nullptr;

        parallel_for(c, [&](std::size_t ch) {
            const T mu = saved_.mean[ch], is = saved_.invstd[ch];
            const T gm = params_->gamma[ch];
            T sum_dy = T(0), sum_dyxh = T(0);
            for (std::size_t nn = 0; nn < n; ++nn) {
                const std::size_t off = (nn * c + ch) * sp;
                const T* xrow = x.data.data() + off;
                const T* gr = dy.data() + off;
                for (std::size_t i = 0; i < sp; ++i) {
                    sum_dy += gr[i];
                    sum_dyxh += gr[i] * (xrow[i] - mu) * is;
                }
            }
            dgamma[ch] += sum_dyxh;
            dbeta[ch] += sum_dy;
            if (!dx) return;
            if (train_mode_) {
                const T mean_dy = sum_dy / static_cast<T>(m);
                const T mean_dyxh = sum_dyxh / static_cast<T>(m);
                for (std::size_t nn = 0; nn < n; ++nn) {
                    const std::size_t off = (nn * c + ch) * sp;
                    const T* xrow = x.data.data() + off;
                    const T* gr = dy.data() + off;
                    T* dst = dx->data() + off;
                    for (std::size_t i = 0; i < sp; ++i) {
                        const T xh = (xrow[i] - mu) * is;
                        dst[i] += gm * is * (gr[i] - mean_dy - xh * mean_dyxh);
                    }
                }
            } else {
                for (std::size_t nn = 0; nn < n; ++nn) {
                    const std::size_t off = (nn * c + ch) * sp;
                    const T* gr = dy.data() + off;
                    T* dst = dx->data() + off;
                    for (std::size_t i = 0; i < sp; ++i) dst[i] += gm * is * gr[i];
                }
            }
        });
    }

private:
    BatchNormParams<T>* params_;
    BatchNormSaved<T> saved_;
    bool train_mode_ = true;
};

template <typename T>
class EluOp : public Op<T> {
public:
    explicit EluOp(T alpha) : alpha_(alpha) {}
    const char* kind() const override { return "elu"; }
    Tensor<T> forward(Graph<T>& g, NodeId self) override {
        return elu(g.value(g.inputs_of(self)[0]), alpha_);
    }
    void backward(Graph<T>& g, NodeId self) override {
        const Tensor<T>& x = g.value(g.inputs_of(self)[0]);
        const Tensor<T>& y = g.value(self);
        const std::vector<T>& dy = g.grad_of(self);
        std::vector<T>& dx = g.grad_of(g.inputs_of(self)[0]);
        for (std::size_t i = 0; i < dy.size(); ++i) {
            dx[i] += dy[i] * (x[i] > T(0) ? T(1) : y[i] + alpha_);
        }
    }

private:
    T alpha_;
};

template <typename T>
class SigmoidOp : public Op<T> {
public:
    const char* kind() const override { return "sigmoid"; }
    Tensor<T> forward(Graph<T>& g, NodeId self) override {
        return sigmoid(g.value(g.inputs_of(self)[0]));
    }
    void backward(Graph<T>& g, NodeId self) override {
        const Tensor<T>& y = g.value(self);
        const std::vector<T>& dy = g.grad_of(self);
        std::vector<T>& dx = g.grad_of(g.inputs_of(self)[0]);
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * y[i] * (T(1) - y[i]);
    }
};

template <typename T>
class MaxPool3dOp : public Op<T> {
public:
    const char* kind() const override { return "maxpool3d"; }
    Tensor<T> forward(Graph<T>& g, NodeId self) override {
        return maxpool3d(g.value(g.inputs_of(self)[0]), &argmax_, g.label_of(self));
    }
    void backward(Graph<T>& g, NodeId self) override {
        const std::vector<T>& dy = g.grad_of(self);
        std::vector<T>& dx = g.grad_of(g.inputs_of(self)[0]);
        for (std::size_t i = 0; i < dy.size(); ++i) dx[argmax_[i]] += dy[i];
    }

private:
    std::vector<std::size_t> argmax_;
};

template <typename T>
class UpPool3dOp : public Op<T> {
public:
    const char* kind() const override { return "uppool3d"; }
    Tensor<T> forward(Graph<T>& g, NodeId self) override {
        return uppool3d(g.value(g.inputs_of(self)[0]), g.label_of(self));
    }
    void backward(Graph<T>& g, NodeId self) override {
        const Tensor<T>& x = g.value(g.inputs_of(self)[0]);
        const std::size_t n = x.shape[0], c = x.shape[1];
        const std::size_t d = x.shape[2], h = x.shape[3], w = x.shape[4];
        const std::vector<T>& dy = g.grad_of(self);
        std::vector<T>& dx = g.grad_of(g.inputs_of(self)[0]);
        // each input voxel collects the grads of its 2x2x2 replica block
        parallel_for(n * c, [&](std::size_t j) {
            const T* gbase = dy.data() + j * 8 * d * h * w;
            T* dbase = dx.data() + j * d * h * w;
            for (std::size_t z = 0; z < 2 * d; ++z) {
                for (std::size_t y = 0; y < 2 * h; ++y) {
                    const T* grow = gbase + (z * 2 * h + y) * 2 * w;
                    T* drow = dbase + ((z / 2) * h + y / 2) * w;
                    for (std::size_t xx = 0; xx < 2 * w; ++xx) drow[xx / 2] += grow[xx];
                }
            }
        });
    }
};

/// Inputs: x, weight, bias.
template <typename T>
class DenseOp : public Op<T> {
public:
    const char* kind() const override { return "dense"; }
    Tensor<T> forward(Graph<T>& g, NodeId self) override {
        const auto& in = g.inputs_of(self);
        return dense(g.value(in[0]), g.value(in[1]), g.value(in[2]), g.label_of(self));
    }
    void backward(Graph<T>& g, NodeId self) override {
        const auto& in = g.inputs_of(self);
        const Tensor<T>& x = g.value(in[0]);
        const Tensor<T>& wgt = g.value(in[1]);
        const std::vector<T>& dy = g.grad_of(self);
        const std::size_t n = x.shape[0], fin = x.shape[1], fout = wgt.shape[0];

        if (g.node_needs_grad(in[0])) {
            std::vector<T>& dx = g.grad_of(in[0]);
            for (std::size_t nn = 0; nn < n; ++nn) {
                for (std::size_t o = 0; o < fout; ++o) {
                    const T gv = dy[nn * fout + o];
                    const T* wrow = wgt.data.data() + o * fin;
                    T* drow = dx.data() + nn * fin;
                    for (std::size_t i = 0; i < fin; ++i) drow[i] += gv * wrow[i];
                }
            }
        }
        if (g.node_needs_grad(in[1])) {
            std::vector<T>& dw = g.grad_of(in[1]);
            for (std::size_t nn = 0; nn < n; ++nn) {
                const T* xrow = x.data.data() + nn * fin;
                for (std::size_t o = 0; o < fout; ++o) {
                    const T gv = dy[nn * fout + o];
                    T* wrow = dw.data() + o * fin;
                    for (std::size_t i = 0; i < fin; ++i) wrow[i] += gv * xrow[i];
                }
            }
        }
        if (g.node_needs_grad(in[2])) {
            std::vector<T>& db = g.grad_of(in[2]);
            for (std::size_t nn = 0; nn < n; ++nn) {
                for (std::size_t o = 0; o < fout; ++o) db[o] += dy[nn * fout + o];
            }
        }
    }
};

template <typename T>
class SoftmaxOp : public Op<T> {
public:
    const char* kind() const override { return "softmax"; }
    Tensor<T> forward(Graph<T>& g, NodeId self) override {
        return softmax(g.value(g.inputs_of(self)[0]));
    }
    void backward(Graph<T>& g, NodeId self) override {
        const Tensor<T>& y = g.value(self);
        const std::vector<T>& dy = g.grad_of(self);
        std::vector<T>& dx = g.grad_of(g.inputs_of(self)[0]);
        const std::size_t c = y.shape.back();
        const std::size_t rows = y.numel() / c;
        for (std::size_t r = 0; r < rows; ++r) {
            const T* yr = y.data.data() + r * c;
            const T* gr = dy.data() + r * c;
            T dot = T(0);
            for (std::size_t i = 0; i < c; ++i) dot += gr[i] * yr[i];
            T* dr = dx.data() + r * c;
            for (std::size_t i = 0; i < c; ++i) dr[i] += yr[i] * (gr[i] - dot);
        }
    }
};

template <typename T>
class ConcatChannelsOp : public Op<T> {
public:
    const char* kind() const override { return "concat"; }
    Tensor<T> forward(Graph<T>& g, NodeId self) override {
        std::vector<const Tensor<T>*> parts;
        for (NodeId id : g.inputs_of(self)) parts.push_back(&g.value(id));
        return concat_channels(parts, g.label_of(self));
    }
    void backward(Graph<T>& g, NodeId self) override {
        const std::vector<T>& dy = g.grad_of(self);
        const Tensor<T>& y = g.value(self);
        const std::size_t total_c = y.shape[1];
        std::size_t sp = 1;
        for (std::size_t i = 2; i < y.ndim(); ++i) sp *= y.shape[i];
        const std::size_t n = y.shape[0];
        std::size_t coff = 0;
        for (NodeId id : g.inputs_of(self)) {
            const std::size_t tc = g.value(id).shape[1];
            if (g.node_needs_grad(id)) {
                std::vector<T>& dx = g.grad_of(id);
                for (std::size_t nn = 0; nn < n; ++nn) {
                    const T* src = dy.data() + (nn * total_c + coff) * sp;
                    T* dst = dx.data() + nn * tc * sp;
                    for (std::size_t i = 0; i < tc * sp; ++i) dst[i] += src[i];
                }
            }
            coff += tc;
        }
    }
};

template <typename T>
class GlobalAvgPoolOp : public Op<T> {
public:
    const char* kind() const override { return "gap"; }
    Tensor<T> forward(Graph<T>& g, NodeId self) override {
        return global_avg_pool(g.value(g.inputs_of(self)[0]));
    }
    void backward(Graph<T>& g, NodeId self) override {
        const Tensor<T>& x = g.value(g.inputs_of(self)[0]);
        std::size_t sp = 1;
        for (std::size_t i = 2; i < x.ndim(); ++i) sp *= x.shape[i];
        const std::vector<T>& dy = g.grad_of(self);
        std::vector<T>& dx = g.grad_of(g.inputs_of(self)[0]);
        const T inv = T(1) / static_cast<T>(sp);
        for (std::size_t j = 0; j < dy.size(); ++j) {
            T* row = dx.data() + j * sp;
            const T gv = dy[j] * inv;
            for (std::size_t i = 0; i < sp; ++i) row[i] += gv;
        }
    }
};

// Builders. Parameter structs must outlive the graph.
template <typename T>
NodeId make_conv3d(Graph<T>& g, NodeId x, Conv3dParams<T>& p, const std::string& name) {
    NodeId kn = g.param(name + ".kernel", &p.kernel);
    NodeId bn = g.param(name + ".bias", &p.bias);
    return g.add_node(std::make_unique<Conv3dOp<T>>(), {x, kn, bn}, name);
}

template <typename T>
NodeId make_batchnorm(Graph<T>& g, NodeId x, BatchNormParams<T>& p, const std::string& name) {
    NodeId gn = g.param(name + ".gamma", &p.gamma);
    NodeId bn = g.param(name + ".beta", &p.beta);
    return g.add_node(std::make_unique<BatchNormOp<T>>(&p), {x, gn, bn}, name);
}

template <typename T>
NodeId make_elu(Graph<T>& g, NodeId x, T alpha = T(1)) {
    return g.add_node(std::make_unique<EluOp<T>>(alpha), {x});
}

template <typename T>
NodeId make_sigmoid(Graph<T>& g, NodeId x) {
    return g.add_node(std::make_unique<SigmoidOp<T>>(), {x});
}

template <typename T>
NodeId make_maxpool3d(Graph<T>& g, NodeId x) {
    return g.add_node(std::make_unique<MaxPool3dOp<T>>(), {x});
}

template <typename T>
NodeId make_uppool3d(Graph<T>& g, NodeId x) {
    return g.add_node(std::make_unique<UpPool3dOp<T>>(), {x});
}

template <typename T>
NodeId make_dense(Graph<T>& g, NodeId x, DenseParams<T>& p, const std::string& name) {
    NodeId wn = g.param(name + ".weight", &p.weight);
    NodeId bn = g.param(name + ".bias", &p.bias);
    return g.add_node(std::make_unique<DenseOp<T>>(), {x, wn, bn}, name);
}

template <typename T>
NodeId make_softmax(Graph<T>& g, NodeId x) {
    return g.add_node(std::make_unique<SoftmaxOp<T>>(), {x});
}

template <typename T>
NodeId make_concat_channels(Graph<T>& g, std::vector<NodeId> xs) {
    return g.add_node(std::make_unique<ConcatChannelsOp<T>>(), std::move(xs));
}

template <typename T>
NodeId make_global_avg_pool(Graph<T>& g, NodeId x) {
    return g.add_node(std::make_unique<GlobalAvgPoolOp<T>>(), {x});
}

}  // namespace pnsamp
