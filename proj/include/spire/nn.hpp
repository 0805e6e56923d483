#pragma once

// Minimal dense building blocks with hand-written backward passes: flat
// parameter storage with a named index map, 2D convolution (im2col + GEMM),
// residual blocks, global average pooling and affine layers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "spire/core.hpp"

namespace spire::nn {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using RowMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class T>
using ConstRowMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class T>
using VecMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <class T>
using ConstVecMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

// ---------------------------------------------------------------------------
// Parameter index map
// ---------------------------------------------------------------------------

class ParamLayout {
public:
    struct Block {
        std::string name;
        std::size_t offset = 0;
        std::size_t size = 0;
        std::vector<int> shape;
    };

    /// Appends a block and returns its offset.
    std::size_t add(std::string name, std::vector<int> shape) {
        std::size_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw ArgumentError("parameter block '" + name + "' has empty shape");
            n *= static_cast<std::size_t>(d);
        }
        for (const auto& b : blocks_)
            if (b.name == name) throw ArgumentError("duplicate parameter block '" + name + "'");
        blocks_.push_back({std::move(name), size_, n, std::move(shape)});
        size_ += n;
        return blocks_.back().offset;
    }

    std::size_t size() const noexcept { return size_; }
    const std::vector<Block>& blocks() const noexcept { return blocks_; }

    const Block& block(std::string_view name) const {
        for (const auto& b : blocks_)
            if (b.name == name) return b;
        throw ArgumentError("no parameter block named '" + std::string(name) + "'");
    }

    /// Block that owns flat index `i`.
    const Block& block_of(std::size_t i) const {
        for (const auto& b : blocks_)
            if (i >= b.offset && i < b.offset + b.size) return b;
        throw BoundsError("parameter index " + std::to_string(i) + " out of range");
    }

    bool operator==(const ParamLayout& o) const {
        if (size_ != o.size_ || blocks_.size() != o.blocks_.size()) return false;
        for (std::size_t k = 0; k < blocks_.size(); ++k)
            if (blocks_[k].name != o.blocks_[k].name || blocks_[k].offset != o.blocks_[k].offset ||
                blocks_[k].shape != o.blocks_[k].shape)
                return false;
        return true;
    }

private:
    std::vector<Block> blocks_;
    std::size_t size_ = 0;
};

// ---------------------------------------------------------------------------
// Activations: rows = channels, columns = (sample, y, x) flattened row-major.
// ---------------------------------------------------------------------------

template <class T>
struct Act {
    Matrix<T> x;
    int batch = 0, h = 0, w = 0;

    int channels() const { return static_cast<int>(x.rows()); }
    Eigen::Index column(int b, int y, int xx) const {
        return (static_cast<Eigen::Index>(b) * h + y) * w + xx;
    }
};

template <class T>
inline void relu_inplace(Matrix<T>& m) {
    m = m.cwiseMax(T(0));
}

// dx = dy where the forward output was positive.
template <class T>
inline void relu_backward_inplace(Matrix<T>& grad, const Matrix<T>& out) {
    grad = (out.array() > T(0)).select(grad, T(0));
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

/// Square-kernel convolution; weights stored [cout][ky][kx][cin].
struct Conv2d {
    int cin = 0, cout = 0, k = 1, stride = 1, pad = 0;
    std::size_t w_off = 0, b_off = 0;

    static Conv2d make(ParamLayout& layout, const std::string& name, int cin, int cout, int k,
                       int stride, int pad) {
        Conv2d c{cin, cout, k, stride, pad, 0, 0};
        c.w_off = layout.add(name + ".weight", {cout, k, k, cin});
        c.b_off = layout.add(name + ".bias", {cout});
        return c;
    }

    int out_size(int in) const { return (in + 2 * pad - k) / stride + 1; }
    int fan_in() const { return cin * k * k; }

    template <class T>
    Matrix<T> im2col(const Act<T>& in) const {
        const int ho = out_size(in.h), wo = out_size(in.w);
        const Eigen::Index rows = static_cast<Eigen::Index>(k) * k * cin;
        Matrix<T> cols = Matrix<T>::Zero(rows, static_cast<Eigen::Index>(in.batch) * ho * wo);
        const T* src = in.x.data();
        T* dst = cols.data();
        for (int b = 0; b < in.batch; ++b)
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox, dst += rows)
                    for (int ky = 0; ky < k; ++ky) {
                        const int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= in.h) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            const int ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= in.w) continue;
                            const T* s = src + in.column(b, iy, ix) * cin;
                            std::copy(s, s + cin, dst + (ky * k + kx) * cin);
                        }
                    }
        return cols;
    }

    template <class T>
    void col2im_add(const Matrix<T>& dcols, Act<T>& din) const {
        const int ho = out_size(din.h), wo = out_size(din.w);
        const Eigen::Index rows = static_cast<Eigen::Index>(k) * k * cin;
        T* dst = din.x.data();
        const T* src = dcols.data();
        for (int b = 0; b < din.batch; ++b)
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox, src += rows)
                    for (int ky = 0; ky < k; ++ky) {
                        const int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= din.h) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            const int ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= din.w) continue;
                            T* d = dst + din.column(b, iy, ix) * cin;
                            const T* s = src + (ky * k + kx) * cin;
                            for (int c = 0; c < cin; ++c) d[c] += s[c];
                        }
                    }
    }

    /// Returns the output activation; `cols` receives the im2col buffer for backward.
    template <class T>
    Act<T> forward(std::span<const T> params, const Act<T>& in, Matrix<T>& cols) const {
        cols = im2col(in);
        ConstRowMap<T> wm(params.data() + w_off, cout, static_cast<Eigen::Index>(k) * k * cin);
        ConstVecMap<T> bias(params.data() + b_off, cout);
        Act<T> out;
        out.batch = in.batch;
        out.h = out_size(in.h);
        out.w = out_size(in.w);
        out.x.noalias() = wm * cols;
        out.x.colwise() += bias;
        return out;
    }

    /// Accumulates weight/bias gradients and, if `din` is non-null, the input gradient.
    template <class T>
    void backward(std::span<const T> params, std::span<T> grad, const Matrix<T>& cols,
                  const Matrix<T>& dout, Act<T>* din) const {
        RowMap<T> gw(grad.data() + w_off, cout, static_cast<Eigen::Index>(k) * k * cin);
        VecMap<T> gb(grad.data() + b_off, cout);
        gw.noalias() += dout * cols.transpose();
        gb += dout.rowwise().sum();
        if (din) {
            ConstRowMap<T> wm(params.data() + w_off, cout, static_cast<Eigen::Index>(k) * k * cin);
            Matrix<T> dcols;
            dcols.noalias() = wm.transpose() * dout;
            col2im_add(dcols, *din);
        }
    }
};

// ---------------------------------------------------------------------------
// Affine
// ---------------------------------------------------------------------------

/// y = W x + b with W stored [out][in].
struct Linear {
    int in = 0, out = 0;
    std::size_t w_off = 0, b_off = 0;

    static Linear make(ParamLayout& layout, const std::string& name, int in, int out) {
        Linear l{in, out, 0, 0};
        l.w_off = layout.add(name + ".weight", {out, in});
        l.b_off = layout.add(name + ".bias", {out});
        return l;
    }

    template <class T>
    Matrix<T> forward(std::span<const T> params, const Matrix<T>& x) const {
        ConstRowMap<T> wm(params.data() + w_off, out, in);
        ConstVecMap<T> bias(params.data() + b_off, out);
        Matrix<T> y;
        y.noalias() = wm * x;
        y.colwise() += bias;
        return y;
    }

    template <class T>
    Matrix<T> backward(std::span<const T> params, std::span<T> grad, const Matrix<T>& x,
                       const Matrix<T>& dy, bool want_dx = true) const {
        RowMap<T> gw(grad.data() + w_off, out, in);
        VecMap<T> gb(grad.data() + b_off, out);
        gw.noalias() += dy * x.transpose();
        gb += dy.rowwise().sum();
        Matrix<T> dx;
        if (want_dx) {
            ConstRowMap<T> wm(params.data() + w_off, out, in);
            dx.noalias() = wm.transpose() * dy;
        }
        return dx;
    }
};

// ---------------------------------------------------------------------------
// Residual block (normalization-free)
// ---------------------------------------------------------------------------

/// out = relu(conv2(relu(conv1(x))) + shortcut(x)); the shortcut is a strided
/// 1×1 projection when the shape changes, identity otherwise.
struct ResBlock {
    Conv2d conv1, conv2;
    bool project = false;
    Conv2d shortcut;

    template <class T>
    struct Cache {
        Act<T> in;
        Matrix<T> cols1, cols2, cols_sc;
        Act<T> h1;   // post-relu
        Act<T> out;  // post-relu
    };

    static ResBlock make(ParamLayout& layout, const std::string& name, int cin, int cout,
                         int stride) {
        ResBlock b;
        b.conv1 = Conv2d::make(layout, name + ".conv1", cin, cout, 3, stride, 1);
        b.conv2 = Conv2d::make(layout, name + ".conv2", cout, cout, 3, 1, 1);
        b.project = cin != cout || stride != 1;
        if (b.project) b.shortcut = Conv2d::make(layout, name + ".shortcut", cin, cout, 1, stride, 0);
        return b;
    }

    template <class T>
    const Act<T>& forward(std::span<const T> params, Act<T> in, Cache<T>& c) const {
        c.in = std::move(in);
        c.h1 = conv1.forward(params, c.in, c.cols1);
        relu_inplace(c.h1.x);
        c.out = conv2.forward(params, c.h1, c.cols2);
        if (project) {
            Act<T> sc = shortcut.forward(params, c.in, c.cols_sc);
            c.out.x += sc.x;
        } else {
            c.out.x += c.in.x;
        }
        relu_inplace(c.out.x);
        return c.out;
    }

    /// dout: gradient w.r.t. the block output. Returns the gradient w.r.t. the input.
    template <class T>
    Act<T> backward(std::span<const T> params, std::span<T> grad, const Cache<T>& c,
                    Matrix<T> dout) const {
        relu_backward_inplace(dout, c.out.x);
        Act<T> dh1{Matrix<T>::Zero(c.h1.x.rows(), c.h1.x.cols()), c.h1.batch, c.h1.h, c.h1.w};
        conv2.backward(params, grad, c.cols2, dout, &dh1);
        relu_backward_inplace(dh1.x, c.h1.x);
        Act<T> din{Matrix<T>::Zero(c.in.x.rows(), c.in.x.cols()), c.in.batch, c.in.h, c.in.w};
        conv1.backward(params, grad, c.cols1, dh1.x, &din);
        if (project) {
            shortcut.backward(params, grad, c.cols_sc, dout, &din);
        } else {
            din.x += dout;
        }
        return din;
    }
};

// ---------------------------------------------------------------------------
// Aligned parameter access
// ---------------------------------------------------------------------------

inline bool is_max_aligned(const void* p) {
    return reinterpret_cast<std::uintptr_t>(p) % EIGEN_MAX_ALIGN_BYTES == 0;
}

template <class T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

/// Eigen chooses its vectorized loop peeling from the data address, so the
/// same weights stored at differently aligned addresses can round
/// differently. Layers therefore always read parameters from a fully aligned
/// base; misaligned input is copied once.
template <class T>
class AlignedParams {
public:
    explicit AlignedParams(std::span<const T> p) {
        if (is_max_aligned(p.data())) {
            view_ = p;
        } else {
            copy_.assign(p.begin(), p.end());
            view_ = std::span<const T>(copy_.data(), copy_.size());
        }
    }
    AlignedParams(const AlignedParams&) = delete;
    AlignedParams& operator=(const AlignedParams&) = delete;

    std::span<const T> span() const noexcept { return view_; }

private:
    AlignedVector<T> copy_;
    std::span<const T> view_;
};

// ---------------------------------------------------------------------------
// Initialization helpers
// ---------------------------------------------------------------------------

template <class T>
inline void fill_uniform(std::span<T> params, std::size_t offset, std::size_t count, double bound,
                         Rng& rng) {
    for (std::size_t i = 0; i < count; ++i)
        params[offset + i] = static_cast<T>(bound * (2.0 * uniform01(rng) - 1.0));
}

}  // namespace spire::nn
