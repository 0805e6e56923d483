#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "spire/core.hpp"
#include "spire/geometry.hpp"
#include "spire/model.hpp"
#include "spire/simulate.hpp"

namespace spire {

struct TrainConfig {
    double alpha_min = 1e-7;
    double alpha_max = 3e-4;
    double x_warmup = 5;
    double x_max = 1000;  ///< schedule horizon in epochs
    int epochs = 1000;
    double weight_decay = 1e-4;
    int batch_size = 64;
    std::uint64_t seed = 42;
    double validation_fraction = 0.05;  ///< 500 of 10000
    double input_scale = 1.0;           ///< premultiplier applied to photon counts
    bool pi_corrected = true;
    double pixel_fraction = 1.0;  ///< random pixel subset per step for the decoder term
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    void validate() const {
        if (!(alpha_min > 0 && alpha_min < alpha_max))
            throw ArgumentError("train: need 0 < alpha_min < alpha_max");
        if (!(x_warmup >= 0 && x_warmup < x_max))
            throw ArgumentError("train: need 0 <= x_warmup < x_max");
        if (batch_size < 1) throw ArgumentError("train: batch_size must be >= 1");
        if (epochs < 1) throw ArgumentError("train: epochs must be >= 1");
        if (!(weight_decay >= 0)) throw ArgumentError("train: weight_decay must be >= 0");
        if (!(validation_fraction > 0 && validation_fraction < 1))
            throw ArgumentError("train: validation_fraction must be in (0, 1)");
        if (!(input_scale > 0)) throw ArgumentError("train: input_scale must be positive");
        if (!(pixel_fraction > 0 && pixel_fraction <= 1))
            throw ArgumentError("train: pixel_fraction must be in (0, 1]");
    }
};

// ---------------------------------------------------------------------------
// Learning rate
// ---------------------------------------------------------------------------

/// Linear warmup to alpha_max, then cosine decay to alpha_min at x_max. With
/// pi_corrected off the cosine argument omits the π factor, as printed in
/// the original formula.
inline double lr_schedule(double x, const TrainConfig& cfg) {
    if (!(x >= 0 && x <= cfg.x_max))
        throw BoundsError("lr_schedule: epoch " + std::to_string(x) + " outside [0, x_max]");
    if (x <= cfg.x_warmup && cfg.x_warmup > 0) return cfg.alpha_max * x / cfg.x_warmup;
    double arg = (x - cfg.x_warmup) / (cfg.x_max - cfg.x_warmup);
    if (cfg.pi_corrected) arg *= std::numbers::pi;
    return cfg.alpha_min + 0.5 * (cfg.alpha_max - cfg.alpha_min) * (1.0 + std::cos(arg));
}

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay
// ---------------------------------------------------------------------------

template <class T>
struct OptimizerState {
    std::vector<T> m, v;
    std::int64_t step = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    OptimizerState() = default;
    explicit OptimizerState(std::size_t n, double b1 = 0.9, double b2 = 0.999, double e = 1e-8)
        : m(n, T(0)), v(n, T(0)), beta1(b1), beta2(b2), eps(e) {}
};

/// w ← w − α(m̂/(√v̂ + ε) + λw).
template <class T>
void adam_step(std::span<T> params, std::span<const T> grads, OptimizerState<T>& st, double alpha,
               double weight_decay) {
    if (params.size() != grads.size() || st.m.size() != params.size() ||
        st.v.size() != params.size())
        throw ShapeError("adam_step: parameter, gradient and state sizes differ");
    ++st.step;
    const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    const T b1 = T(st.beta1), b2 = T(st.beta2);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const T g = grads[i];
        st.m[i] = b1 * st.m[i] + (T(1) - b1) * g;
        st.v[i] = b2 * st.v[i] + (T(1) - b2) * g * g;
        const double mh = static_cast<double>(st.m[i]) / c1;
        const double vh = static_cast<double>(st.v[i]) / c2;
        const double w = static_cast<double>(params[i]);
        params[i] = static_cast<T>(w - alpha * (mh / (std::sqrt(vh) + st.eps) + weight_decay * w));
    }
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

inline constexpr double kLossClamp = 1e-12;

struct LossValue {
    double value = 0.0;
    std::size_t n_effective = 0;
    std::size_t clamped = 0;  ///< pixels whose inner log argument hit the clamp
};

/// (1/N) Σ [ln(1 + I) − ln(γe^y − γ + 1)]² over unmasked pixels (mask 1 = use).
inline LossValue loss(std::span<const double> y, double gamma, std::span<const double> i_exp,
                      std::span<const std::uint8_t> mask = {}) {
    if (y.size() != i_exp.size() || (!mask.empty() && mask.size() != y.size()))
        throw ShapeError("loss: prediction, target and mask sizes differ");
    LossValue out;
    double sum = 0;
    for (std::size_t p = 0; p < y.size(); ++p) {
        if (!mask.empty() && !mask[p]) continue;
        if (!(i_exp[p] >= 0)) throw ArgumentError("loss: measured intensities must be >= 0");
        double s = gamma * std::expm1(y[p]) + 1.0;
        if (s < kLossClamp) {
            s = kLossClamp;
            ++out.clamped;
        }
        const double r = std::log1p(i_exp[p]) - std::log(s);
        sum += r * r;
        ++out.n_effective;
    }
    out.value = out.n_effective ? sum / static_cast<double>(out.n_effective) : 0.0;
    return out;
}

// ---------------------------------------------------------------------------
// Training data and batched loss/gradient
// ---------------------------------------------------------------------------

/// Images in the log domain, one row per image: ln(1 + input_scale · I).
/// The same values feed the networks and serve as loss targets.
template <class T>
struct TrainingSet {
    nn::Matrix<T> log_images;  // N × P
    int side = 0;
    std::vector<std::uint8_t> mask;  // empty = all measured

    std::size_t size() const { return static_cast<std::size_t>(log_images.rows()); }
    std::size_t pixels() const { return static_cast<std::size_t>(log_images.cols()); }

    /// Indices of pixels that enter the loss.
    std::vector<int> measured_pixels() const {
        std::vector<int> out;
        for (std::size_t p = 0; p < pixels(); ++p)
            if (mask.empty() || mask[p]) out.push_back(static_cast<int>(p));
        return out;
    }
};

template <class T>
TrainingSet<T> make_training_set(const std::vector<DiffractionImage>& images, double input_scale,
                                 std::vector<std::uint8_t> mask = {}) {
    TrainingSet<T> ts;
    if (images.empty()) return ts;
    ts.side = images.front().n_side;
    const auto px = static_cast<Eigen::Index>(ts.side) * ts.side;
    if (!mask.empty() && static_cast<Eigen::Index>(mask.size()) != px)
        throw ShapeError("training set: mask does not match image size");
    ts.log_images.resize(static_cast<Eigen::Index>(images.size()), px);
    for (std::size_t k = 0; k < images.size(); ++k) {
        if (images[k].n_side != ts.side) throw ShapeError("training set: images differ in size");
        for (Eigen::Index p = 0; p < px; ++p) {
            const double v = images[k].pixels[static_cast<std::size_t>(p)];
            if (!(v >= 0) || !std::isfinite(v))
                throw ArgumentError("training set: pixel values must be finite and >= 0");
            const bool measured = mask.empty() || mask[static_cast<std::size_t>(p)];
            ts.log_images(static_cast<Eigen::Index>(k), p) =
                measured ? static_cast<T>(std::log1p(input_scale * v)) : T(0);
        }
    }
    ts.mask = std::move(mask);
    return ts;
}

struct BatchLoss {
    double loss = 0.0;             ///< mean over images of the per-image loss
    std::vector<double> per_image;
    std::size_t n_effective = 0;   ///< loss pixels per image
    std::size_t clamped = 0;
};

/// Loss of the batch `rows` of `data` using decoder pixels `pixels`, and, if
/// `grad` is non-empty, its gradient accumulated into `grad`.
template <class T>
BatchLoss loss_and_grad(const Model& model, std::span<const T> params, const TrainingSet<T>& data,
                        std::span<const std::size_t> rows, std::span<const int> pixels,
                        std::span<T> grad, const nn::Matrix<T>& qgrid) {
    model.check_params(params.size());
    if (!grad.empty()) model.check_params(grad.size());
    if (rows.empty()) throw ArgumentError("loss_and_grad: empty batch");
    const nn::AlignedParams<T> aligned(params);
    params = aligned.span();
    if (!grad.empty() && !nn::is_max_aligned(grad.data())) {
        nn::AlignedVector<T> g(grad.begin(), grad.end());
        BatchLoss out = loss_and_grad<T>(model, params, data, rows, pixels, std::span<T>(g.data(), g.size()), qgrid);
        std::copy(g.begin(), g.end(), grad.begin());
        return out;
    }
    const bool want_grad = !grad.empty();
    const auto B = static_cast<Eigen::Index>(rows.size());
    const auto S = static_cast<Eigen::Index>(pixels.size());

    nn::Matrix<T> x(B, data.log_images.cols());
    for (Eigen::Index b = 0; b < B; ++b)
        x.row(b) = data.log_images.row(static_cast<Eigen::Index>(rows[static_cast<std::size_t>(b)]));

    Trunk::Cache<T> enc_cache, flu_cache;
    nn::Matrix<T> enc_feat, flu_feat;
    const nn::Matrix<T> v = model.encoder_raw(params, x, &enc_cache, &enc_feat);
    const nn::Matrix<T> g = model.fluence_raw(params, x, &flu_cache, &flu_feat);

    nn::Matrix<T> q(3, S), target(B, S);
    for (Eigen::Index s = 0; s < S; ++s) {
        q.col(s) = qgrid.col(pixels[static_cast<std::size_t>(s)]);
        target.col(s) = x.col(pixels[static_cast<std::size_t>(s)]);
    }

    BatchLoss out;
    out.n_effective = static_cast<std::size_t>(S);
    out.per_image.assign(static_cast<std::size_t>(B), 0.0);
    nn::Matrix<T> dv = nn::Matrix<T>::Zero(6, B), dg = nn::Matrix<T>::Zero(1, B);
    const T inv = S > 0 ? T(1) / (T(B) * T(S)) : T(0);

    for (Eigen::Index b = 0; b < B; ++b) {
        if (S == 0) break;
        SixDCache<T> gs;
        const Mat3T<T> r = six_d_forward<T>(v.col(b).data(), &gs);
        const T gamma = std::max(g(0, b), T(0));
        Siren::Cache<T> sc;
        const nn::Matrix<T> xin = model.decoder_inputs<T>(r, q);
        const nn::Matrix<T> y = model.decoder().forward(params, xin, want_grad ? &sc : nullptr);
        nn::Matrix<T> dy(1, S);
        double sum = 0, dgamma = 0;
        for (Eigen::Index s = 0; s < S; ++s) {
            const T ey = std::exp(y(0, s));
            T arg = gamma * (ey - T(1)) + T(1);
            bool clamped = false;
            if (arg < T(kLossClamp)) {
                arg = T(kLossClamp);
                clamped = true;
                ++out.clamped;
            }
            const T res = target(b, s) - std::log(arg);
            sum += static_cast<double>(res) * static_cast<double>(res);
            if (clamped) {
                dy(0, s) = T(0);
            } else {
                dy(0, s) = T(-2) * inv * res * gamma * ey / arg;
                dgamma += static_cast<double>(T(-2) * inv * res * (ey - T(1)) / arg);
            }
        }
        out.per_image[static_cast<std::size_t>(b)] = sum / static_cast<double>(S);
        out.loss += sum / static_cast<double>(S) / static_cast<double>(B);
        if (!want_grad) continue;
        const nn::Matrix<T> dx = model.decoder().backward(params, grad, sc, dy);
        const Mat3T<T> dr = T(model.config().q_scale) * (q * dx.transpose());
        six_d_backward<T>(gs, dr, dv.col(b).data());
        dg(0, b) = g(0, b) > T(0) ? static_cast<T>(dgamma) : T(0);
    }

    if (want_grad) {
        const nn::Matrix<T> dfe = model.encoder_head().backward(params, grad, enc_feat, dv);
        model.encoder().backward(params, grad, enc_cache, dfe);
        const nn::Matrix<T> dff = model.fluence_head().backward(params, grad, flu_feat, dg);
        model.fluence().backward(params, grad, flu_cache, dff);
        for (std::size_t i = 0; i < grad.size(); ++i)
            if (!std::isfinite(static_cast<double>(grad[i])))
                throw NumericalError("non-finite gradient in parameter block '" +
                                     model.layout().block_of(i).name + "'");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Fit
// ---------------------------------------------------------------------------

struct HistoryRow {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_loss = 0.0;
};

inline void write_history_csv(std::ostream& os, const std::vector<HistoryRow>& rows) {
    os << "epoch,lr,train_loss,val_loss\n";
    os.precision(17);
    for (const auto& r : rows) os << r.epoch << ',' << r.lr << ',' << r.train_loss << ',' << r.val_loss << '\n';
}

template <class T>
struct FitResult {
    std::vector<HistoryRow> history;
    double initial_val_loss = 0.0;
    std::vector<T> best_params;
    int best_epoch = -1;
    double best_val_loss = std::numeric_limits<double>::infinity();
    bool diverged = false;
    std::string message;
};

/// Train/validation split sizes: the last ⌈fraction·N⌉ images validate.
inline std::pair<std::size_t, std::size_t> split_sizes(std::size_t n, double validation_fraction) {
    auto n_val = static_cast<std::size_t>(std::llround(validation_fraction * static_cast<double>(n)));
    n_val = std::clamp<std::size_t>(n_val, 1, n > 1 ? n - 1 : 1);
    return {n - n_val, n_val};
}

template <class T>
double evaluate_loss(const Model& model, std::span<const T> params, const TrainingSet<T>& data,
                     std::size_t first, std::size_t count, const nn::Matrix<T>& qgrid,
                     std::size_t chunk = 64) {
    if (count == 0) return 0.0;
    const std::vector<int> px = data.measured_pixels();
    double total = 0;
    std::vector<std::size_t> rows;
    for (std::size_t k = first; k < first + count; k += chunk) {
        rows.clear();
        for (std::size_t j = k; j < std::min(first + count, k + chunk); ++j) rows.push_back(j);
        const BatchLoss bl = loss_and_grad<T>(model, params, data, rows, px, {}, qgrid);
        for (double v : bl.per_image) total += v;
    }
    return total / static_cast<double>(count);
}

using EpochCallback = std::function<void(const HistoryRow&)>;

/// Jointly trains encoder, fluence predictor and decoder; keeps the
/// parameters with the lowest validation loss.
template <class T>
FitResult<T> fit(const Model& model, const std::vector<T>& initial, const TrainingSet<T>& data,
                 const QGrid& qgrid_in, const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
    cfg.validate();
    model.check_params(initial.size());
    nn::AlignedVector<T> params(initial.begin(), initial.end());
    if (data.size() < 2) throw ArgumentError("fit: need at least two images");
    const auto [n_train, n_val] = split_sizes(data.size(), cfg.validation_fraction);
    const nn::Matrix<T> qgrid = Model::qgrid_matrix<T>(qgrid_in);
    if (static_cast<std::size_t>(qgrid.cols()) != data.pixels())
        throw ShapeError("fit: q-grid does not match image size");
    const std::vector<int> measured = data.measured_pixels();
    const auto n_sel = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(cfg.pixel_fraction * static_cast<double>(measured.size()))));

    FitResult<T> res;
    res.initial_val_loss = evaluate_loss<T>(model, params, data, n_train, n_val, qgrid);
    res.best_params = initial;
    OptimizerState<T> opt(params.size(), cfg.beta1, cfg.beta2, cfg.eps);
    nn::AlignedVector<T> grad(params.size());
    std::vector<std::size_t> order(n_train);
    std::vector<int> sel = measured;

    for (int ep = 0; ep < cfg.epochs; ++ep) {
        const double alpha = lr_schedule(std::min<double>(ep, cfg.x_max), cfg);
        Rng rng = make_rng(cfg.seed, 0x7472000000000000ULL + static_cast<std::uint64_t>(ep));
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        double train_sum = 0;
        std::size_t train_count = 0;
        for (std::size_t b0 = 0; b0 < n_train; b0 += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t b1 = std::min(n_train, b0 + static_cast<std::size_t>(cfg.batch_size));
            const std::span<const std::size_t> rows(order.data() + b0, b1 - b0);
            if (n_sel < measured.size()) {
                sel = measured;
                std::shuffle(sel.begin(), sel.end(), rng);
                sel.resize(n_sel);
                std::sort(sel.begin(), sel.end());
            }
            std::fill(grad.begin(), grad.end(), T(0));
            BatchLoss bl;
            try {
                bl = loss_and_grad<T>(model, params, data, rows, sel, grad, qgrid);
            } catch (const NumericalError& e) {
                res.diverged = true;
                res.message = e.what();
                return res;
            }
            if (!std::isfinite(bl.loss)) {
                res.diverged = true;
                res.message = "non-finite training loss at epoch " + std::to_string(ep);
                return res;
            }
            adam_step<T>(params, grad, opt, alpha, cfg.weight_decay);
            train_sum += bl.loss * static_cast<double>(rows.size());
            train_count += rows.size();
        }
        HistoryRow row;
        row.epoch = ep;
        row.lr = alpha;
        row.train_loss = train_sum / static_cast<double>(train_count);
        row.val_loss = evaluate_loss<T>(model, params, data, n_train, n_val, qgrid);
        res.history.push_back(row);
        if (!std::isfinite(row.val_loss)) {
            res.diverged = true;
            res.message = "non-finite validation loss at epoch " + std::to_string(ep);
            return res;
        }
        if (row.val_loss < res.best_val_loss) {
            res.best_val_loss = row.val_loss;
            res.best_epoch = ep;
            res.best_params.assign(params.begin(), params.end());
        }
        if (on_epoch) on_epoch(row);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

struct Prediction {
    RotationBatch rotations;
    std::vector<double> gammas;
    std::vector<DiffractionImage> images;  ///< empty unless requested
};

template <class T>
Prediction predict_dataset(const Model& model, std::span<const T> params, const TrainingSet<T>& data,
                           const QGrid& qgrid, bool reconstruct_images = true,
                           std::size_t chunk = 64) {
    model.check_params(params.size());
    Prediction out;
    for (std::size_t k = 0; k < data.size(); k += chunk) {
        const auto n = static_cast<Eigen::Index>(std::min(chunk, data.size() - k));
        const nn::Matrix<T> x = data.log_images.middleRows(static_cast<Eigen::Index>(k), n);
        const nn::Matrix<T> v = model.encoder_raw(params, x);
        const nn::Matrix<T> g = model.fluence_raw(params, x);
        for (Eigen::Index b = 0; b < n; ++b) {
            std::array<double, 6> six{};
            for (int c = 0; c < 6; ++c) six[static_cast<std::size_t>(c)] = static_cast<double>(v(c, b));
            out.rotations.push_back(six_d_to_rotation(six));
            out.gammas.push_back(std::max(static_cast<double>(g(0, b)), 0.0));
        }
    }
    if (reconstruct_images)
        for (std::size_t k = 0; k < data.size(); ++k)
            out.images.push_back(model.predict_pattern<T>(params, out.rotations[k], qgrid, out.gammas[k]));
    return out;
}

}  // namespace spire
