#pragma once

// The three networks: orientation encoder, fluence predictor and the
// symmetrized sinusoidal intensity decoder. All weights live in one flat
// vector described by Model::layout().

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "spire/core.hpp"
#include "spire/geometry.hpp"
#include "spire/nn.hpp"
#include "spire/simulate.hpp"

namespace spire {

struct ModelConfig {
    int image_side = 48;
    std::vector<int> stage_widths{16, 32, 64};
    int blocks_per_stage = 2;
    int stem_kernel = 7;
    int siren_width = 256;
    int siren_layers = 5;
    double omega0 = 30.0;
    double omega = 1.0;
    double q_scale = 1.0;  ///< multiplies Rᵀq before the decoder; 1/q_max by convention

    void validate() const {
        if (image_side < 4) throw ArgumentError("model: image_side must be >= 4");
        if (stage_widths.empty()) throw ArgumentError("model: need at least one stage");
        for (int w : stage_widths)
            if (w < 1) throw ArgumentError("model: stage widths must be positive");
        if (blocks_per_stage < 1) throw ArgumentError("model: blocks_per_stage must be >= 1");
        if (stem_kernel < 1 || stem_kernel % 2 == 0)
            throw ArgumentError("model: stem_kernel must be odd");
        if (siren_width < 1 || siren_layers < 1)
            throw ArgumentError("model: decoder width and depth must be >= 1");
        if (!(q_scale > 0)) throw ArgumentError("model: q_scale must be positive");
    }

    bool operator==(const ModelConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Residual trunk
// ---------------------------------------------------------------------------

/// Stem conv (stride 2) + ReLU, residual stages, global average pool.
struct Trunk {
    nn::Conv2d stem;
    std::vector<nn::ResBlock> blocks;
    int features = 0;

    template <class T>
    struct Cache {
        nn::Act<T> input;
        nn::Matrix<T> stem_cols;
        nn::Act<T> stem_out;  // post-relu
        std::vector<nn::ResBlock::Cache<T>> blocks;
    };

    static Trunk make(nn::ParamLayout& layout, const std::string& name, const ModelConfig& cfg) {
        Trunk t;
        const int w0 = cfg.stage_widths.front();
        t.stem = nn::Conv2d::make(layout, name + ".stem", 1, w0, cfg.stem_kernel, 2,
                                  cfg.stem_kernel / 2);
        int cin = w0;
        for (std::size_t s = 0; s < cfg.stage_widths.size(); ++s)
            for (int b = 0; b < cfg.blocks_per_stage; ++b) {
                const int stride = (s > 0 && b == 0) ? 2 : 1;
                const std::string bn =
                    name + ".stage" + std::to_string(s) + ".block" + std::to_string(b);
                t.blocks.push_back(
                    nn::ResBlock::make(layout, bn, cin, cfg.stage_widths[s], stride));
                cin = cfg.stage_widths[s];
            }
        t.features = cin;
        return t;
    }

    /// `images`: batch × (side²) row-major pixels. Returns features × batch.
    template <class T>
    nn::Matrix<T> forward(std::span<const T> params, const nn::Matrix<T>& images, int side,
                          Cache<T>& c) const {
        if (images.cols() != static_cast<Eigen::Index>(side) * side)
            throw ShapeError("trunk: image row length does not match side²");
        c.input.batch = static_cast<int>(images.rows());
        c.input.h = c.input.w = side;
        c.input.x.resize(1, images.size());
        for (int b = 0; b < c.input.batch; ++b)
            c.input.x.block(0, static_cast<Eigen::Index>(b) * images.cols(), 1, images.cols()) =
                images.row(b);
        c.stem_out = stem.forward(params, c.input, c.stem_cols);
        nn::relu_inplace(c.stem_out.x);
        c.blocks.resize(blocks.size());
        const nn::Act<T>* cur = &c.stem_out;
        for (std::size_t k = 0; k < blocks.size(); ++k) cur = &blocks[k].forward(params, *cur, c.blocks[k]);
        const int hw = cur->h * cur->w;
        nn::Matrix<T> pooled(cur->channels(), cur->batch);
        for (int b = 0; b < cur->batch; ++b)
            pooled.col(b) = cur->x.middleCols(static_cast<Eigen::Index>(b) * hw, hw).rowwise().mean();
        return pooled;
    }

    template <class T>
    void backward(std::span<const T> params, std::span<T> grad, const Cache<T>& c,
                  const nn::Matrix<T>& dpooled) const {
        const nn::Act<T>& last = blocks.empty() ? c.stem_out : c.blocks.back().out;
        const int hw = last.h * last.w;
        nn::Matrix<T> d(last.x.rows(), last.x.cols());
        for (int b = 0; b < last.batch; ++b)
            d.middleCols(static_cast<Eigen::Index>(b) * hw, hw) =
                (dpooled.col(b) / T(hw)).replicate(1, hw);
        for (std::size_t k = blocks.size(); k-- > 0;) {
            nn::Act<T> din = blocks[k].backward(params, grad, c.blocks[k], std::move(d));
            d = std::move(din.x);
        }
        nn::relu_backward_inplace(d, c.stem_out.x);
        stem.backward<T>(params, grad, c.stem_cols, d, nullptr);
    }
};

// ---------------------------------------------------------------------------
// Symmetrized SIREN
// ---------------------------------------------------------------------------

/// y(x) = S(x) + S(−x), S = relu ∘ out ∘ sin(ω_L ·) ∘ … ∘ sin(ω₀ ·).
struct Siren {
    std::vector<nn::Linear> hidden;
    std::vector<double> omegas;
    nn::Linear out;

    template <class T>
    struct Branch {
        std::vector<nn::Matrix<T>> inputs;  // input of each hidden layer
        std::vector<nn::Matrix<T>> pre;     // Wx + b of each hidden layer
        nn::Matrix<T> last;                 // input of the output layer
        nn::Matrix<T> o;                    // output pre-activation (1 × P)
    };
    template <class T>
    struct Cache {
        Branch<T> pos, neg;
    };

    static Siren make(nn::ParamLayout& layout, const std::string& name, const ModelConfig& cfg) {
        Siren s;
        int in = 3;
        for (int l = 0; l < cfg.siren_layers; ++l) {
            s.hidden.push_back(
                nn::Linear::make(layout, name + ".hidden" + std::to_string(l), in, cfg.siren_width));
            s.omegas.push_back(l == 0 ? cfg.omega0 : cfg.omega);
            in = cfg.siren_width;
        }
        s.out = nn::Linear::make(layout, name + ".out", in, 1);
        return s;
    }

    template <class T>
    nn::Matrix<T> branch_forward(std::span<const T> params, nn::Matrix<T> x, Branch<T>* c) const {
        if (c) {
            c->inputs.resize(hidden.size());
            c->pre.resize(hidden.size());
        }
        for (std::size_t l = 0; l < hidden.size(); ++l) {
            nn::Matrix<T> z = hidden[l].forward(params, x);
            nn::Matrix<T> h = (T(omegas[l]) * z.array()).sin().matrix();
            if (c) {
                c->inputs[l] = std::move(x);
                c->pre[l] = std::move(z);
            }
            x = std::move(h);
        }
        nn::Matrix<T> o = out.forward(params, x);
        if (c) {
            c->last = std::move(x);
            c->o = o;
        }
        return o.cwiseMax(T(0));
    }

    template <class T>
    nn::Matrix<T> branch_backward(std::span<const T> params, std::span<T> grad, const Branch<T>& c,
                                  const nn::Matrix<T>& dy) const {
        nn::Matrix<T> d = (c.o.array() > T(0)).select(dy, T(0));
        d = out.backward(params, grad, c.last, d);
        for (std::size_t l = hidden.size(); l-- > 0;) {
            const T w = T(omegas[l]);
            d = (d.array() * w * (w * c.pre[l].array()).cos()).matrix();
            d = hidden[l].backward(params, grad, c.inputs[l], d);
        }
        return d;
    }

    /// x: 3 × P decoder inputs (already scaled). Returns 1 × P.
    template <class T>
    nn::Matrix<T> forward(std::span<const T> params, const nn::Matrix<T>& x,
                          Cache<T>* c = nullptr) const {
        nn::Matrix<T> yp = branch_forward(params, x, c ? &c->pos : nullptr);
        nn::Matrix<T> yn = branch_forward<T>(params, -x, c ? &c->neg : nullptr);
        return yp + yn;
    }

    /// Accumulates parameter gradients; returns dL/dx (3 × P).
    template <class T>
    nn::Matrix<T> backward(std::span<const T> params, std::span<T> grad, const Cache<T>& c,
                           const nn::Matrix<T>& dy) const {
        nn::Matrix<T> dxp = branch_backward(params, grad, c.pos, dy);
        nn::Matrix<T> dxn = branch_backward(params, grad, c.neg, dy);
        return dxp - dxn;
    }
};

// ---------------------------------------------------------------------------
// 6D → SO(3) on network outputs
// ---------------------------------------------------------------------------

template <class T>
using Mat3T = Eigen::Matrix<T, 3, 3>;
template <class T>
using Vec3T = Eigen::Matrix<T, 3, 1>;

template <class T>
struct SixDCache {
    Vec3T<T> r1, r2, b;
    T na{}, nu{};
};

/// Rows r1, r2, r3 as in six_d_to_rotation, in precision T.
template <class T>
Mat3T<T> six_d_forward(const T* v, SixDCache<T>* c = nullptr) {
    const Vec3T<T> a(v[0], v[1], v[2]);
    const Vec3T<T> b(v[3], v[4], v[5]);
    const T na = a.norm();
    if (!(na > T(kSixDEpsilon))) throw DegenerateError("6D rotation: first vector is (near) zero");
    const Vec3T<T> r1 = a / na;
    const Vec3T<T> u = b - r1.dot(b) * r1;
    const T nu = u.norm();
    if (!(nu > T(kSixDEpsilon)))
        throw DegenerateError("6D rotation: second vector is (near) parallel to the first");
    const Vec3T<T> r2 = u / nu;
    Mat3T<T> m;
    m.row(0) = r1.transpose();
    m.row(1) = r2.transpose();
    m.row(2) = r1.cross(r2).transpose();
    if (c) *c = {r1, r2, b, na, nu};
    return m;
}

/// dL/dv from dL/dR for the Gram-Schmidt map.
template <class T>
void six_d_backward(const SixDCache<T>& c, const Mat3T<T>& dm, T* dv) {
    Vec3T<T> g1 = dm.row(0).transpose();
    Vec3T<T> g2 = dm.row(1).transpose();
    const Vec3T<T> g3 = dm.row(2).transpose();
    g1 += c.r2.cross(g3);
    g2 += g3.cross(c.r1);
    const Vec3T<T> du = (g2 - c.r2 * c.r2.dot(g2)) / c.nu;
    const T r1b = c.r1.dot(c.b);
    const Vec3T<T> db = du - c.r1 * c.r1.dot(du);
    g1 += -c.r1.dot(du) * c.b - r1b * du;
    const Vec3T<T> da = (g1 - c.r1 * c.r1.dot(g1)) / c.na;
    for (int k = 0; k < 3; ++k) {
        dv[k] += da[k];
        dv[3 + k] += db[k];
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// ln(1+I) → I.
inline double intensity_from_y(double y) { return std::expm1(y); }

class Model {
public:
    explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        encoder_ = Trunk::make(layout_, "encoder", cfg_);
        encoder_head_ = nn::Linear::make(layout_, "encoder.head", encoder_.features, 6);
        fluence_ = Trunk::make(layout_, "fluence", cfg_);
        fluence_head_ = nn::Linear::make(layout_, "fluence.head", fluence_.features, 1);
        decoder_ = Siren::make(layout_, "decoder", cfg_);
    }

    const ModelConfig& config() const noexcept { return cfg_; }
    const nn::ParamLayout& layout() const noexcept { return layout_; }
    std::size_t parameter_count() const noexcept { return layout_.size(); }
    const Trunk& encoder() const noexcept { return encoder_; }
    const Trunk& fluence() const noexcept { return fluence_; }
    const nn::Linear& encoder_head() const noexcept { return encoder_head_; }
    const nn::Linear& fluence_head() const noexcept { return fluence_head_; }
    const Siren& decoder() const noexcept { return decoder_; }

    /// He-uniform convolutions (residual-branch output convs scaled down so
    /// the normalization-free trunk starts near identity), sine-aware decoder
    /// init, fluence head biased to γ = 1.
    template <class T>
    std::vector<T> init_params(std::uint64_t seed) const {
        std::vector<T> p(layout_.size(), T(0));
        Rng rng = make_rng(seed, 0x6d6f64656cULL);
        const std::span<T> s(p);
        const auto init_conv = [&](const nn::Conv2d& c, double gain) {
            nn::fill_uniform(s, c.w_off, static_cast<std::size_t>(c.cout) * c.fan_in(),
                             gain * std::sqrt(6.0 / c.fan_in()), rng);
        };
        for (const Trunk* t : {&encoder_, &fluence_}) {
            init_conv(t->stem, 1.0);
            for (const auto& b : t->blocks) {
                init_conv(b.conv1, 1.0);
                init_conv(b.conv2, 0.25);
                if (b.project) init_conv(b.shortcut, 1.0);
            }
        }
        for (const nn::Linear* h : {&encoder_head_, &fluence_head_})
            nn::fill_uniform(s, h->w_off, static_cast<std::size_t>(h->in) * h->out,
                             1.0 / std::sqrt(double(h->in)), rng);
        p[fluence_head_.b_off] = T(1);
        for (std::size_t l = 0; l < decoder_.hidden.size(); ++l) {
            const auto& L = decoder_.hidden[l];
            const double bound =
                l == 0 ? 1.0 / L.in : std::sqrt(6.0 / L.in) / decoder_.omegas[l];
            nn::fill_uniform(s, L.w_off, static_cast<std::size_t>(L.in) * L.out, bound, rng);
            nn::fill_uniform(s, L.b_off, static_cast<std::size_t>(L.out),
                             1.0 / std::sqrt(double(L.in)), rng);
        }
        const auto& O = decoder_.out;
        const double last_omega = decoder_.omegas.back();
        nn::fill_uniform(s, O.w_off, static_cast<std::size_t>(O.in), std::sqrt(6.0 / O.in) / last_omega,
                         rng);
        return p;
    }

    void check_params(std::size_t n) const {
        if (n != layout_.size())
            throw ShapeError("model: parameter vector has " + std::to_string(n) + " entries, expected " +
                             std::to_string(layout_.size()));
    }

    // -- batched forward pieces ------------------------------------------------

    /// Raw 6D encoder outputs, 6 × batch.
    template <class T>
    nn::Matrix<T> encoder_raw(std::span<const T> params, const nn::Matrix<T>& images,
                              Trunk::Cache<T>* cache = nullptr, nn::Matrix<T>* feats = nullptr) const {
        const nn::AlignedParams<T> aligned(params);
        params = aligned.span();
        Trunk::Cache<T> local;
        nn::Matrix<T> f = encoder_.forward(params, images, cfg_.image_side, cache ? *cache : local);
        nn::Matrix<T> out = encoder_head_.forward(params, f);
        if (feats) *feats = std::move(f);
        return out;
    }

    /// Fluence head pre-activation, 1 × batch (γ = max(·, 0)).
    template <class T>
    nn::Matrix<T> fluence_raw(std::span<const T> params, const nn::Matrix<T>& images,
                              Trunk::Cache<T>* cache = nullptr, nn::Matrix<T>* feats = nullptr) const {
        const nn::AlignedParams<T> aligned(params);
        params = aligned.span();
        Trunk::Cache<T> local;
        nn::Matrix<T> f = fluence_.forward(params, images, cfg_.image_side, cache ? *cache : local);
        nn::Matrix<T> out = fluence_head_.forward(params, f);
        if (feats) *feats = std::move(f);
        return out;
    }

    // -- single-sample operations ------------------------------------------------

    /// Orientation of one ln(1+I)-transformed image.
    template <class T = double>
    Rotation encoder_forward(std::span<const T> params, std::span<const T> image_log) const {
        check_params(params.size());
        const nn::Matrix<T> img = as_row<T>(image_log);
        const nn::Matrix<T> v = encoder_raw(params, img);
        std::array<double, 6> dv{};
        for (int k = 0; k < 6; ++k) dv[k] = static_cast<double>(v(k, 0));
        return six_d_to_rotation(dv);
    }

    template <class T = double>
    double fluence_forward(std::span<const T> params, std::span<const T> image_log) const {
        check_params(params.size());
        const nn::Matrix<T> g = fluence_raw(params, as_row<T>(image_log));
        return std::max(static_cast<double>(g(0, 0)), 0.0);
    }

    /// Decoder value y(q) at a physical q (Å⁻¹); q_scale defaults to the config's.
    template <class T = double>
    double siren_forward(std::span<const T> params, const Vec3& q, double q_scale = 0.0) const {
        const nn::AlignedParams<T> aligned(params);
        params = aligned.span();
        check_params(params.size());
        const double s = q_scale > 0 ? q_scale : cfg_.q_scale;
        nn::Matrix<T> x(3, 1);
        for (int k = 0; k < 3; ++k) x(k, 0) = static_cast<T>(s * q[k]);
        return static_cast<double>(decoder_.forward(params, x)(0, 0));
    }

    /// Decoder inputs for the rotated Ewald coordinates q_scale · Rᵀ q.
    template <class T>
    nn::Matrix<T> decoder_inputs(const Mat3T<T>& r, const nn::Matrix<T>& q) const {
        return (T(cfg_.q_scale) * r.transpose()) * q;
    }

    /// γ·(e^y − 1) over the detector for orientation R.
    template <class T = double>
    DiffractionImage predict_pattern(std::span<const T> params, const Rotation& rot,
                                     const QGrid& qgrid, double gamma) const {
        const nn::AlignedParams<T> aligned(params);
        params = aligned.span();
        check_params(params.size());
        const nn::Matrix<T> q = qgrid_matrix<T>(qgrid);
        const Mat3T<T> r = rot.matrix().cast<T>();
        DiffractionImage img(qgrid.n_side);
        constexpr Eigen::Index chunk = 4096;
        for (Eigen::Index p0 = 0; p0 < q.cols(); p0 += chunk) {
            const Eigen::Index np = std::min(chunk, q.cols() - p0);
            const nn::Matrix<T> y =
                decoder_.forward(params, decoder_inputs<T>(r, q.middleCols(p0, np)));
            for (Eigen::Index p = 0; p < np; ++p)
                img.pixels[static_cast<std::size_t>(p0 + p)] =
                    gamma * intensity_from_y(static_cast<double>(y(0, p)));
        }
        img.gamma = gamma;
        return img;
    }

    /// e^y − 1 on a centered m³ grid, with the decoder evaluated at g·q so a
    /// gauge rotation can bring the learned volume into another frame.
    template <class T = double>
    IntensityVolume decoder_volume(std::span<const T> params, int m, double q_spacing,
                                   const Mat3& g = Mat3::Identity()) const {
        const nn::AlignedParams<T> aligned(params);
        params = aligned.span();
        check_params(params.size());
        if (m < 2 || !(q_spacing > 0)) throw ArgumentError("decoder_volume: invalid grid");
        IntensityVolume vol{Grid3<double>(m, 0.0), q_spacing};
        const auto mm = static_cast<Eigen::Index>(m);
        nn::Matrix<T> x(3, mm * mm);
        for (int a = 0; a < m; ++a) {
            for (int b = 0; b < m; ++b)
                for (int c = 0; c < m; ++c) {
                    const Vec3 q((a - m / 2) * q_spacing, (b - m / 2) * q_spacing, (c - m / 2) * q_spacing);
                    x.col(static_cast<Eigen::Index>(b) * mm + c) = (cfg_.q_scale * (g * q)).cast<T>();
                }
            const nn::Matrix<T> y = decoder_.forward(params, x);
            for (Eigen::Index k = 0; k < mm * mm; ++k)
                vol.grid.data[static_cast<std::size_t>(a) * mm * mm + static_cast<std::size_t>(k)] =
                    intensity_from_y(static_cast<double>(y(0, k)));
        }
        return vol;
    }

    template <class T>
    static nn::Matrix<T> qgrid_matrix(const QGrid& qgrid) {
        nn::Matrix<T> q(3, static_cast<Eigen::Index>(qgrid.size()));
        for (std::size_t p = 0; p < qgrid.size(); ++p)
            q.col(static_cast<Eigen::Index>(p)) = qgrid.coords[p].cast<T>();
        return q;
    }

private:
    template <class T>
    nn::Matrix<T> as_row(std::span<const T> image_log) const {
        const auto px = static_cast<Eigen::Index>(cfg_.image_side) * cfg_.image_side;
        if (static_cast<Eigen::Index>(image_log.size()) != px)
            throw ShapeError("model: image has " + std::to_string(image_log.size()) +
                             " pixels, expected " + std::to_string(px));
        nn::Matrix<T> m(1, px);
        for (Eigen::Index p = 0; p < px; ++p) m(0, p) = image_log[static_cast<std::size_t>(p)];
        return m;
    }

    ModelConfig cfg_;
    nn::ParamLayout layout_;
    Trunk encoder_;
    nn::Linear encoder_head_;
    Trunk fluence_;
    nn::Linear fluence_head_;
    Siren decoder_;
};

}  // namespace spire
