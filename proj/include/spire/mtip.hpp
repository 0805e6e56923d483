#pragma once

// Multi-tiered iterative phasing: slice the current intensity model at a set
// of reference orientations, assign each measured image its best-matching
// orientation, merge the images back into a 3D intensity by least squares,
// and phase the result to get the next model.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "spire/core.hpp"
#include "spire/geometry.hpp"
#include "spire/metrics.hpp"
#include "spire/phasing.hpp"
#include "spire/simulate.hpp"

namespace spire {

enum class MtipMode { pure, ml_assisted };

inline std::string to_string(MtipMode m) { return m == MtipMode::pure ? "pure" : "ml-assisted"; }

inline MtipMode parse_mtip_mode(std::string_view s) {
    if (s == "pure") return MtipMode::pure;
    if (s == "ml-assisted" || s == "ml_assisted") return MtipMode::ml_assisted;
    throw ArgumentError("unknown M-TIP mode '" + std::string(s) + "'");
}

/// Phase retrieval for M-TIP iterations after the first: fewer restarts than a
/// standalone reconstruction, since restart 0 continues from the previous
/// density and support.
inline PhasingConfig default_mtip_phasing() {
    PhasingConfig p;
    p.n_blocks = 8;
    p.n_restarts = 2;
    return p;
}

struct MtipConfig {
    std::size_t n_reference = 20000;
    int grid_side = 64;
    double q_spacing = 0.0;  ///< 0: chosen so the detector corners fit the grid
    double lambda_reg = 0.0;
    double cg_tolerance = 1e-6;
    int cg_max_iterations = 500;
    int outer_iterations = 10;
    MtipMode mode = MtipMode::pure;
    bool log_matching = false;  ///< compare ln(1+x) instead of raw photons
    std::size_t match_chunk = 512;
    PhasingConfig initial_phasing{};  ///< first iteration (cold start)
    PhasingConfig phasing = default_mtip_phasing();
    bool align_rotation = false;  ///< rotation search when scoring against a truth density
    std::uint64_t seed = 42;

    void validate() const {
        if (n_reference < 1) throw ArgumentError("mtip: n_reference must be >= 1");
        if (grid_side < 4) throw ArgumentError("mtip: grid_side must be >= 4");
        if (!(lambda_reg >= 0)) throw ArgumentError("mtip: lambda_reg must be >= 0");
        if (outer_iterations < 1) throw ArgumentError("mtip: outer_iterations must be >= 1");
        if (cg_max_iterations < 1) throw ArgumentError("mtip: cg_max_iterations must be >= 1");
        if (match_chunk < 1) throw ArgumentError("mtip: match_chunk must be >= 1");
        initial_phasing.validate();
        phasing.validate();
    }

    double resolved_q_spacing(const QGrid& qgrid) const {
        if (q_spacing > 0) return q_spacing;
        return qgrid.max_norm() / (grid_side / 2 - 1);
    }
};

// ---------------------------------------------------------------------------
// Step 1: slicing
// ---------------------------------------------------------------------------

inline std::vector<DiffractionImage> slice_intensity(const IntensityVolume& intensity,
                                                     const RotationBatch& rotations, const QGrid& qgrid) {
    std::vector<DiffractionImage> out;
    out.reserve(rotations.size());
    for (const auto& r : rotations) out.push_back(render_pattern(intensity, r, qgrid, 1.0));
    return out;
}

// ---------------------------------------------------------------------------
// Step 2: orientation matching
// ---------------------------------------------------------------------------

struct MatchResult {
    std::vector<std::size_t> index;
    std::vector<double> distance;  ///< squared L2 over measured pixels
};

namespace detail {

inline double pixel_value(double v, bool log_transform) { return log_transform ? std::log1p(std::max(v, 0.0)) : v; }

/// Running per-image argmin over reference chunks. Distances are screened
/// with a GEMM expansion and the contenders re-evaluated exactly, so the
/// result (including the lowest-index tie rule) equals direct evaluation.
class Matcher {
public:
    Matcher(const std::vector<DiffractionImage>& images, std::span<const std::uint8_t> mask, bool log_transform)
        : log_(log_transform) {
        if (images.empty()) throw ArgumentError("match_orientations: no images");
        px_ = images.front().pixels.size();
        if (!mask.empty() && mask.size() != px_) throw ShapeError("match_orientations: mask size mismatch");
        for (std::size_t p = 0; p < px_; ++p)
            if (mask.empty() || mask[p]) used_.push_back(p);
        x_.resize(static_cast<Eigen::Index>(used_.size()), static_cast<Eigen::Index>(images.size()));
        for (std::size_t k = 0; k < images.size(); ++k) {
            if (images[k].pixels.size() != px_) throw ShapeError("match_orientations: image sizes differ");
            for (std::size_t u = 0; u < used_.size(); ++u)
                x_(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(k)) =
                    pixel_value(images[k].pixels[used_[u]], log_);
        }
        xn_ = x_.colwise().squaredNorm().transpose();
        result_.index.assign(images.size(), 0);
        result_.distance.assign(images.size(), std::numeric_limits<double>::infinity());
    }

    /// Offers references [offset, offset + slices.size()).
    void offer(const std::vector<DiffractionImage>& slices, std::size_t offset) {
        if (slices.empty()) return;
        Eigen::MatrixXd s(x_.rows(), static_cast<Eigen::Index>(slices.size()));
        for (std::size_t r = 0; r < slices.size(); ++r) {
            if (slices[r].pixels.size() != px_) throw ShapeError("match_orientations: slice size mismatch");
            for (std::size_t u = 0; u < used_.size(); ++u)
                s(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(r)) =
                    pixel_value(slices[r].pixels[used_[u]], log_);
        }
        const Eigen::VectorXd sn = s.colwise().squaredNorm().transpose();
        Eigen::MatrixXd d = -2.0 * (x_.transpose() * s);
        d.colwise() += xn_;
        d.rowwise() += sn.transpose();
        for (Eigen::Index k = 0; k < d.rows(); ++k) {
            const double approx_min = d.row(k).minCoeff();
            const double tol = 1e-9 * (xn_[k] + sn.maxCoeff()) + 1e-300;
            for (Eigen::Index r = 0; r < d.cols(); ++r) {
                if (d(k, r) > approx_min + tol) continue;
                const double exact = (x_.col(k) - s.col(r)).squaredNorm();
                auto& best = result_.distance[static_cast<std::size_t>(k)];
                if (exact < best) {
                    best = exact;
                    result_.index[static_cast<std::size_t>(k)] = offset + static_cast<std::size_t>(r);
                }
            }
        }
    }

    const MatchResult& result() const { return result_; }

private:
    bool log_;
    std::size_t px_ = 0;
    std::vector<std::size_t> used_;
    Eigen::MatrixXd x_;
    Eigen::VectorXd xn_;
    MatchResult result_;
};

}  // namespace detail

/// argmin over references of the squared L2 distance on measured pixels;
/// ties go to the lowest index.
inline MatchResult match_orientations(const std::vector<DiffractionImage>& images,
                                      const std::vector<DiffractionImage>& slices,
                                      std::span<const std::uint8_t> mask = {}, bool log_transform = false) {
    if (slices.empty()) throw ArgumentError("match_orientations: empty reference set");
    detail::Matcher m(images, mask, log_transform);
    m.offer(slices, 0);
    return m.result();
}

/// Matching against slices of `intensity` at `references`, generated chunk by chunk.
inline MatchResult match_to_volume(const std::vector<DiffractionImage>& images, const IntensityVolume& intensity,
                                   const RotationBatch& references, const QGrid& qgrid,
                                   std::span<const std::uint8_t> mask, bool log_transform, std::size_t chunk) {
    if (references.empty()) throw ArgumentError("match_orientations: empty reference set");
    detail::Matcher m(images, mask, log_transform);
    for (std::size_t r0 = 0; r0 < references.size(); r0 += chunk) {
        const RotationBatch part(references.begin() + static_cast<std::ptrdiff_t>(r0),
                                 references.begin() + static_cast<std::ptrdiff_t>(std::min(references.size(), r0 + chunk)));
        m.offer(slice_intensity(intensity, part, qgrid), r0);
    }
    return m.result();
}

// ---------------------------------------------------------------------------
// Step 3: merging
// ---------------------------------------------------------------------------

/// Trilinear sampling of a centered m³ grid at the rotated pixel coordinates
/// Rₙᵀq_p of every (image n, measured pixel p); rows whose coordinate leaves
/// the grid are dropped (their value is 0 and they receive no adjoint).
class SamplingOperator {
public:
    SamplingOperator(const RotationBatch& rotations, const QGrid& qgrid, int m, double q_spacing,
                     std::span<const std::uint8_t> mask = {})
        : m_(m), px_(qgrid.size()), n_images_(rotations.size()) {
        if (m < 2 || !(q_spacing > 0)) throw ArgumentError("sampling operator: invalid grid");
        if (!mask.empty() && mask.size() != px_) throw ShapeError("sampling operator: mask size mismatch");
        if (n_images_ * px_ > std::numeric_limits<std::uint32_t>::max())
            throw ArgumentError("sampling operator: too many measurements");
        const auto mm = static_cast<std::size_t>(m);
        for (std::size_t da = 0; da < 2; ++da)
            for (std::size_t db = 0; db < 2; ++db)
                for (std::size_t dc = 0; dc < 2; ++dc) corner_[(da * 2 + db) * 2 + dc] = (da * mm + db) * mm + dc;
        rows_.reserve(n_images_ * px_);
        std::size_t base;
        std::array<double, 3> f;
        for (std::size_t n = 0; n < n_images_; ++n) {
            const Mat3 rt = rotations[n].matrix().transpose();
            for (std::size_t p = 0; p < px_; ++p) {
                if (!mask.empty() && !mask[p]) continue;
                if (trilinear_cell(m, q_spacing, rt * qgrid.coords[p], base, f))
                    rows_.push_back({static_cast<std::uint32_t>(n * px_ + p), static_cast<std::uint32_t>(base), f});
            }
        }
    }

    std::size_t volume_size() const { return static_cast<std::size_t>(m_) * m_ * m_; }
    std::size_t data_size() const { return n_images_ * px_; }
    std::size_t row_count() const { return rows_.size(); }

    /// y = S a (length n_images · pixels; dropped rows are 0).
    std::vector<double> apply(std::span<const double> a) const {
        if (a.size() != volume_size()) throw ShapeError("sampling operator: volume size mismatch");
        std::vector<double> y(data_size(), 0.0);
        std::array<double, 8> w;
        for (const auto& r : rows_) {
            weights(r, w);
            const double* ab = a.data() + r.base;
            double v = 0;
            for (int k = 0; k < 8; ++k) v += w[k] * ab[corner_[k]];
            y[r.data] = v;
        }
        return y;
    }

    /// a = Sᵀ y.
    std::vector<double> adjoint(std::span<const double> y) const {
        if (y.size() != data_size()) throw ShapeError("sampling operator: data size mismatch");
        std::vector<double> a(volume_size(), 0.0);
        std::array<double, 8> w;
        for (const auto& r : rows_) {
            weights(r, w);
            double* ab = a.data() + r.base;
            const double v = y[r.data];
            for (int k = 0; k < 8; ++k) ab[corner_[k]] += w[k] * v;
        }
        return a;
    }

    /// diag(SᵀS): zero where no measurement touches a voxel.
    std::vector<double> coverage() const {
        std::vector<double> c(volume_size(), 0.0);
        std::array<double, 8> w;
        for (const auto& r : rows_) {
            weights(r, w);
            for (int k = 0; k < 8; ++k) c[r.base + corner_[k]] += w[k] * w[k];
        }
        return c;
    }

private:
    struct Row {
        std::uint32_t data;
        std::uint32_t base;
        std::array<double, 3> f;
    };

    static void weights(const Row& r, std::array<double, 8>& w) {
        const double gx[2] = {1.0 - r.f[0], r.f[0]}, gy[2] = {1.0 - r.f[1], r.f[1]}, gz[2] = {1.0 - r.f[2], r.f[2]};
        for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b) {
                const double ab = gx[a] * gy[b];
                w[(a * 2 + b) * 2] = ab * gz[0];
                w[(a * 2 + b) * 2 + 1] = ab * gz[1];
            }
    }

    int m_;
    std::size_t px_;
    std::size_t n_images_;
    std::array<std::size_t, 8> corner_{};
    std::vector<Row> rows_;
};

/// Centered-grid index of −q for each voxel (index 0 on an axis maps to itself).
inline std::vector<std::size_t> friedel_partner(int m) {
    std::vector<std::size_t> out(static_cast<std::size_t>(m) * m * m);
    for (int a = 0; a < m; ++a)
        for (int b = 0; b < m; ++b)
            for (int c = 0; c < m; ++c)
                out[(static_cast<std::size_t>(a) * m + b) * m + c] =
                    (static_cast<std::size_t>((m - a) % m) * m + (m - b) % m) * m + (m - c) % m;
    return out;
}

struct MergeOptions {
    double lambda_reg = 0.0;
    double cg_tolerance = 1e-10;
    int cg_max_iterations = 500;
    bool friedel = true;  ///< solve for a Friedel-symmetric volume
};

struct MergeResult {
    IntensityVolume volume;
    std::vector<std::uint8_t> known;  ///< centered; 1 where data constrain the voxel
    int cg_iterations = 0;
    double cg_residual = 0.0;  ///< ‖r‖/‖b‖ of the normal equations
    bool converged = false;
};

/// Least squares min ‖S A − I_exp‖² + λ‖A‖² by conjugate gradients on the
/// normal equations, started from zero. Negative voxels are clipped.
inline MergeResult merge(const std::vector<DiffractionImage>& images, const RotationBatch& rotations,
                         const QGrid& qgrid, int m, double q_spacing, const MergeOptions& opt = {},
                         std::span<const std::uint8_t> mask = {}) {
    if (images.empty()) throw ArgumentError("merge: no images");
    if (images.size() != rotations.size()) throw ShapeError("merge: one rotation per image required");
    const SamplingOperator S(rotations, qgrid, m, q_spacing, mask);
    std::vector<double> y(S.data_size());
    for (std::size_t n = 0; n < images.size(); ++n) {
        if (images[n].pixels.size() != qgrid.size()) throw ShapeError("merge: image/q-grid size mismatch");
        std::copy(images[n].pixels.begin(), images[n].pixels.end(), y.begin() + static_cast<std::ptrdiff_t>(n * qgrid.size()));
    }
    const std::vector<std::size_t> partner = opt.friedel ? friedel_partner(m) : std::vector<std::size_t>{};
    const auto sym = [&](std::vector<double> v) {
        if (!opt.friedel) return v;
        std::vector<double> o(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) o[i] = 0.5 * (v[i] + v[partner[i]]);
        return o;
    };
    const auto normal = [&](const std::vector<double>& a) {
        std::vector<double> out = sym(S.adjoint(S.apply(sym(a))));
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += opt.lambda_reg * a[i];
        return out;
    };
    const auto dot = [](const std::vector<double>& u, const std::vector<double>& v) {
        double s = 0;
        for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
        return s;
    };

    MergeResult res;
    const std::vector<double> b = sym(S.adjoint(y));
    std::vector<double> a(b.size(), 0.0), r = b, p = b;
    const double bnorm = std::sqrt(dot(b, b));
    double rr = dot(r, r);
    if (bnorm == 0) {
        res.converged = true;
    } else {
        for (int it = 0; it < opt.cg_max_iterations; ++it) {
            if (std::sqrt(rr) <= opt.cg_tolerance * bnorm) {
                res.converged = true;
                break;
            }
            const std::vector<double> ap = normal(p);
            const double pap = dot(p, ap);
            if (!(pap > 0)) break;
            const double alpha = rr / pap;
            for (std::size_t i = 0; i < a.size(); ++i) {
                a[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            const double rr_new = dot(r, r);
            for (std::size_t i = 0; i < p.size(); ++i) p[i] = r[i] + (rr_new / rr) * p[i];
            rr = rr_new;
            res.cg_iterations = it + 1;
        }
        if (std::sqrt(rr) <= opt.cg_tolerance * bnorm) res.converged = true;
    }
    res.cg_residual = bnorm > 0 ? std::sqrt(rr) / bnorm : 0.0;

    a = sym(std::move(a));
    std::vector<double> cov = S.coverage();
    if (opt.friedel)
        for (std::size_t i = 0; i < cov.size(); ++i) cov[i] = cov[i] + cov[partner[i]];
    res.volume = IntensityVolume{Grid3<double>(m, 0.0), q_spacing};
    res.known.assign(a.size(), 0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        res.volume.grid.data[i] = std::max(a[i], 0.0);
        res.known[i] = cov[i] > 0 ? 1 : 0;
    }
    return res;
}

// ---------------------------------------------------------------------------
// ML priors
// ---------------------------------------------------------------------------

struct InjectedPriors {
    RotationBatch references;  ///< uniform part first, then predicted
    std::size_t n_uniform = 0;
    std::size_t n_predicted = 0;
    std::vector<DiffractionImage> images;  ///< divided by the predicted γ
};

/// Reference set = uniform half + predicted half (predicted part capped at
/// n_reference/2 and by the number of predictions); images rescaled by 1/γ.
inline InjectedPriors inject_ml_priors(const MtipConfig& cfg, const RotationBatch& predicted,
                                       const std::vector<double>& gammas,
                                       const std::vector<DiffractionImage>& images) {
    if (!gammas.empty() && gammas.size() != images.size())
        throw ShapeError("inject_ml_priors: one gamma per image required");
    InjectedPriors out;
    out.n_predicted = std::min(predicted.size(), cfg.n_reference / 2);
    out.n_uniform = cfg.n_reference - out.n_predicted;
    out.references = sample_uniform_rotations(out.n_uniform, cfg.seed);
    out.references.insert(out.references.end(), predicted.begin(),
                          predicted.begin() + static_cast<std::ptrdiff_t>(out.n_predicted));
    out.images = images;
    for (std::size_t k = 0; k < gammas.size(); ++k) {
        if (!(gammas[k] > 0)) throw ArgumentError("inject_ml_priors: gamma must be positive");
        if (gammas[k] != 1.0)
            for (double& v : out.images[k].pixels) v /= gammas[k];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Outer loop
// ---------------------------------------------------------------------------

struct MtipRecord {
    int iteration = 0;
    Resolution resolution;  ///< against the truth density, when provided
    bool evaluated = false;
    int cg_iterations = 0;
    double cg_residual = 0.0;
    double phasing_residual = 0.0;
    double match_distance = 0.0;  ///< mean over images
    bool failed = false;          ///< non-finite update; the run stops here
};

struct MtipInputs {
    RotationBatch references;             ///< empty: n_reference uniform rotations
    RotationBatch initial_rotations;      ///< ml-assisted: orientations for the first merge
    RotationBatch forced_rotations;       ///< non-empty: skip matching entirely
    std::optional<DensityVolume> truth;   ///< on the M-TIP grid, for the resolution trace
    std::optional<IntensityVolume> initial_intensity;
    std::vector<std::uint8_t> pixel_mask;  ///< 1 = measured
};

struct MtipResult {
    std::vector<MtipRecord> trace;
    IntensityVolume intensity;
    DensityVolume density;
    RotationBatch rotations;  ///< final assignment
};

inline void write_mtip_trace_csv(std::ostream& os, const std::vector<MtipRecord>& trace) {
    os << "iteration,resolution_A,cg_iterations,cg_residual,phasing_residual,match_distance,failed\n";
    os.precision(10);
    for (const auto& r : trace)
        os << r.iteration << ',' << (r.evaluated ? format_resolution(r.resolution) : std::string("nan")) << ','
           << r.cg_iterations << ',' << r.cg_residual << ',' << r.phasing_residual << ',' << r.match_distance
           << ',' << (r.failed ? 1 : 0) << '\n';
}

/// Seeded random positive volume with I(q) = I(−q), scaled to `level`.
inline IntensityVolume random_friedel_volume(int m, double q_spacing, double level, std::uint64_t seed) {
    IntensityVolume v{Grid3<double>(m, 0.0), q_spacing};
    Rng rng = make_rng(seed, 0x1e0);
    for (double& x : v.grid.data) x = uniform01(rng);
    const auto partner = friedel_partner(m);
    std::vector<double> sym(v.grid.data.size());
    for (std::size_t i = 0; i < sym.size(); ++i) sym[i] = level * (v.grid.data[i] + v.grid.data[partner[i]]);
    v.grid.data = std::move(sym);
    return v;
}

inline MtipResult mtip_iterate(const std::vector<DiffractionImage>& images, const MtipConfig& cfg,
                               const QGrid& qgrid, const MtipInputs& in = {}) {
    cfg.validate();
    if (images.empty()) throw ArgumentError("mtip_iterate: no images");
    if (!in.forced_rotations.empty() && in.forced_rotations.size() != images.size())
        throw ShapeError("mtip_iterate: one forced rotation per image required");
    if (!in.initial_rotations.empty() && in.initial_rotations.size() != images.size())
        throw ShapeError("mtip_iterate: one initial rotation per image required");
    const int m = cfg.grid_side;
    const double qs = cfg.resolved_q_spacing(qgrid);
    if (in.truth && in.truth->n() != m) throw ShapeError("mtip_iterate: truth density must be on the M-TIP grid");

    const RotationBatch references =
        in.references.empty() ? sample_uniform_rotations(cfg.n_reference, cfg.seed) : in.references;

    MtipResult res;
    if (in.initial_intensity) {
        res.intensity = *in.initial_intensity;
    } else {
        double mean = 0;
        for (const auto& im : images) mean += im.total();
        mean /= static_cast<double>(images.size() * qgrid.size());
        res.intensity = random_friedel_volume(m, qs, mean, cfg.seed);
    }

    MergeOptions mo;
    mo.lambda_reg = cfg.lambda_reg;
    mo.cg_tolerance = cfg.cg_tolerance;
    mo.cg_max_iterations = cfg.cg_max_iterations;
    std::optional<DensityVolume> prev_rho;
    std::vector<std::uint8_t> prev_support;

    for (int j = 0; j < cfg.outer_iterations; ++j) {
        MtipRecord rec;
        rec.iteration = j;
        if (!in.forced_rotations.empty()) {
            res.rotations = in.forced_rotations;
        } else if (j == 0 && cfg.mode == MtipMode::ml_assisted && !in.initial_rotations.empty()) {
            res.rotations = in.initial_rotations;
        } else {
            const MatchResult mr = match_to_volume(images, res.intensity, references, qgrid, in.pixel_mask,
                                                   cfg.log_matching, cfg.match_chunk);
            res.rotations.clear();
            double dsum = 0;
            for (std::size_t k = 0; k < images.size(); ++k) {
                res.rotations.push_back(references[mr.index[k]]);
                dsum += mr.distance[k];
            }
            rec.match_distance = dsum / static_cast<double>(images.size());
        }

        const MergeResult merged = merge(images, res.rotations, qgrid, m, qs, mo, in.pixel_mask);
        rec.cg_iterations = merged.cg_iterations;
        rec.cg_residual = merged.cg_residual;

        PhasingConfig pc = prev_rho ? cfg.phasing : cfg.initial_phasing;
        pc.seed = derive_seed(cfg.seed, 0x9a5e0000ULL + static_cast<std::uint64_t>(j));
        PhasingResult ph;
        try {
            ph = retrieve_phase(merged.volume, pc, &merged.known, prev_rho ? &*prev_rho : nullptr,
                                prev_rho ? &prev_support : nullptr);
        } catch (const NumericalError&) {
            rec.failed = true;
        }
        if (!rec.failed)
            for (double v : ph.density.grid.data)
                if (!std::isfinite(v)) rec.failed = true;
        if (rec.failed) {
            res.trace.push_back(rec);
            break;
        }
        rec.phasing_residual = ph.residual;
        res.density = ph.density;
        prev_rho = ph.density;
        prev_support = ph.support;
        res.intensity = density_to_intensity(ph.density, 1);

        if (in.truth) {
            DensityAlignOptions ao;
            ao.search_rotation = cfg.align_rotation;
            ao.seed = cfg.seed;
            const DensityAlignment al = align_density(*in.truth, ph.density, ao);
            rec.resolution = resolution_at(fsc_density(*in.truth, al.aligned), 0.5);
            rec.evaluated = true;
        }
        res.trace.push_back(rec);
    }
    return res;
}

}  // namespace spire
