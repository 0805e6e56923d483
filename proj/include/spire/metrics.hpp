#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "spire/core.hpp"
#include "spire/fft.hpp"
#include "spire/geometry.hpp"
#include "spire/simulate.hpp"

namespace spire {

struct FscCurve {
    std::vector<double> q;       ///< shell centers, Å⁻¹
    std::vector<double> fsc;     ///< real part of the shell correlation
    std::vector<std::size_t> count;
    double shell_width = 0.0;

    std::size_t size() const noexcept { return q.size(); }
};

inline void write_fsc_csv(std::ostream& os, const FscCurve& c) {
    os << "q,fsc,count\n";
    os.precision(17);
    for (std::size_t s = 0; s < c.size(); ++s) os << c.q[s] << ',' << c.fsc[s] << ',' << c.count[s] << '\n';
}

namespace detail {

struct ShellAccumulator {
    std::vector<double> cross, a2, b2;
    std::vector<std::size_t> count;
    explicit ShellAccumulator(int n) : cross(n, 0.0), a2(n, 0.0), b2(n, 0.0), count(n, 0) {}

    FscCurve finish(double shell_width) const {
        FscCurve c;
        c.shell_width = shell_width;
        for (std::size_t s = 0; s < count.size(); ++s) {
            if (count[s] == 0) continue;
            const double den = std::sqrt(a2[s] * b2[s]);
            c.q.push_back((static_cast<double>(s) + 0.5) * shell_width);
            c.fsc.push_back(den > 0 ? cross[s] / den : 0.0);
            c.count.push_back(count[s]);
        }
        return c;
    }
};

/// Shell of a radius r (in units where the last shell ends at r_max), or −1
/// beyond r_max. The outer edge r = r_max belongs to the last shell.
inline int shell_of(double r, double r_max, int n_shells) {
    if (r > r_max * (1 + 1e-12)) return -1;
    return std::min(n_shells - 1, static_cast<int>(r / r_max * n_shells));
}

}  // namespace detail

/// Fourier shell correlation of two densities on the same grid, shells of
/// uniform width up to the Nyquist frequency 1/(2·voxel).
inline FscCurve fsc_density(const DensityVolume& a, const DensityVolume& b, int n_shells = 0) {
    const int n = a.n();
    if (b.n() != n) throw ShapeError("fsc_density: grids differ in size");
    if (n_shells <= 0) n_shells = n / 2;
    Fft3 fa(n), fb(n);
    std::copy(a.grid.data.begin(), a.grid.data.end(), fa.real().begin());
    std::copy(b.grid.data.begin(), b.grid.data.end(), fb.real().begin());
    fa.forward();
    fb.forward();
    const auto sa = fa.spectrum();
    const auto sb = fb.spectrum();
    const int h = fa.half();
    const double r_max = 0.5 * n;
    detail::ShellAccumulator acc(n_shells);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            for (int k = 0; k < h; ++k) {
                const double fi = fft_frequency(i, n), fj = fft_frequency(j, n), fk = k;
                const int s = detail::shell_of(std::sqrt(fi * fi + fj * fj + fk * fk), r_max, n_shells);
                if (s < 0) continue;
                // Entries with 0 < k < n/2 stand for themselves and their conjugate mirror.
                const int w = (k == 0 || 2 * k == n) ? 1 : 2;
                const std::size_t idx = (static_cast<std::size_t>(i) * n + j) * h + k;
                acc.cross[s] += w * std::real(sa[idx] * std::conj(sb[idx]));
                acc.a2[s] += w * std::norm(sa[idx]);
                acc.b2[s] += w * std::norm(sb[idx]);
                acc.count[s] += w;
            }
    const double nyquist = 1.0 / (2.0 * a.voxel_size);
    return acc.finish(nyquist / n_shells);
}

/// Shell correlation of √I₁ and √I₂ on the same centered reciprocal grid,
/// shells up to q = (m/2)·q_spacing.
inline FscCurve fsc_intensity(const IntensityVolume& a, const IntensityVolume& b, int n_shells = 0) {
    const int m = a.m();
    if (b.m() != m) throw ShapeError("fsc_intensity: grids differ in size");
    if (n_shells <= 0) n_shells = m / 2;
    const double r_max = m / 2;
    detail::ShellAccumulator acc(n_shells);
    const int c = m / 2;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j)
            for (int k = 0; k < m; ++k) {
                const double di = i - c, dj = j - c, dk = k - c;
                const int s = detail::shell_of(std::sqrt(di * di + dj * dj + dk * dk), r_max, n_shells);
                if (s < 0) continue;
                const double va = a.grid(i, j, k), vb = b.grid(i, j, k);
                if (va < 0 || vb < 0) throw ArgumentError("fsc_intensity: intensities must be >= 0");
                acc.cross[s] += std::sqrt(va * vb);
                acc.a2[s] += va;
                acc.b2[s] += vb;
                ++acc.count[s];
            }
    return acc.finish(r_max * a.q_spacing / n_shells);
}

struct Resolution {
    std::optional<double> angstrom;  ///< empty = indeterminate
    bool crossed = false;            ///< false if the curve never fell below threshold

    bool indeterminate() const noexcept { return !angstrom.has_value(); }
};

/// 1/q at the first linearly interpolated downward crossing of `threshold`;
/// 1/q_last if the curve stays above; indeterminate if it starts below.
inline Resolution resolution_at(const FscCurve& curve, double threshold) {
    Resolution r;
    if (curve.size() == 0 || curve.fsc.front() < threshold) return r;
    for (std::size_t s = 1; s < curve.size(); ++s) {
        if (curve.fsc[s] < threshold) {
            const double v0 = curve.fsc[s - 1], v1 = curve.fsc[s];
            const double t = (v0 - threshold) / (v0 - v1);
            const double q = curve.q[s - 1] + t * (curve.q[s] - curve.q[s - 1]);
            r.angstrom = 1.0 / q;
            r.crossed = true;
            return r;
        }
    }
    r.angstrom = 1.0 / curve.q.back();
    return r;
}

inline std::string format_resolution(const Resolution& r) {
    if (r.indeterminate()) return "indeterminate";
    return std::to_string(*r.angstrom);
}

// ---------------------------------------------------------------------------
// Fluence agreement
// ---------------------------------------------------------------------------

struct ThroughOriginFit {
    double slope = 0.0;
    double r2 = 0.0;           ///< 1 − SS_res / Σ y²
    double r2_centered = 0.0;  ///< 1 − SS_res / Σ (y − ȳ)²
};

/// Least-squares fit y ≈ k·x with no intercept.
inline ThroughOriginFit fit_through_origin(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.empty()) throw ShapeError("fit_through_origin: size mismatch");
    double sxy = 0, sxx = 0, syy = 0, sy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += x[i] * y[i];
        sxx += x[i] * x[i];
        syy += y[i] * y[i];
        sy += y[i];
    }
    ThroughOriginFit f;
    if (!(sxx > 0)) return f;
    f.slope = sxy / sxx;
    double ss = 0;
    for (std::size_t i = 0; i < x.size(); ++i) ss += (y[i] - f.slope * x[i]) * (y[i] - f.slope * x[i]);
    const double mean = sy / static_cast<double>(y.size());
    const double sst = syy - static_cast<double>(y.size()) * mean * mean;
    f.r2 = syy > 0 ? 1.0 - ss / syy : 0.0;
    f.r2_centered = sst > 0 ? 1.0 - ss / sst : 0.0;
    return f;
}

// ---------------------------------------------------------------------------
// Density alignment
// ---------------------------------------------------------------------------

/// ρ(−r) about the origin of the periodic grid (index a → (n − a) mod n).
inline DensityVolume invert_density(const DensityVolume& rho) {
    const int n = rho.n();
    DensityVolume out{Grid3<double>(n, 0.0), rho.voxel_size};
    for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b)
            for (int c = 0; c < n; ++c)
                out.grid((n - a) % n, (n - b) % n, (n - c) % n) = rho.grid(a, b, c);
    return out;
}

/// Trilinear resampling of ρ rotated by R about the box center (zero outside).
inline DensityVolume rotate_density(const DensityVolume& rho, const Rotation& rot) {
    const int n = rho.n();
    const double c = 0.5 * (n - 1);
    DensityVolume out{Grid3<double>(n, 0.0), rho.voxel_size};
    const Mat3 rt = rot.matrix().transpose();
    for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b)
            for (int k = 0; k < n; ++k) {
                const Vec3 src = rt * Vec3(a - c, b - c, k - c) + Vec3(c, c, c);
                int i0[3];
                double f[3];
                bool inside = true;
                for (int ax = 0; ax < 3; ++ax) {
                    if (src[ax] < 0 || src[ax] > n - 1) {
                        inside = false;
                        break;
                    }
                    i0[ax] = std::min(static_cast<int>(src[ax]), n - 2);
                    f[ax] = src[ax] - i0[ax];
                }
                if (!inside) continue;
                double v = 0;
                for (int da = 0; da < 2; ++da)
                    for (int db = 0; db < 2; ++db)
                        for (int dc = 0; dc < 2; ++dc) {
                            const double w = (da ? f[0] : 1 - f[0]) * (db ? f[1] : 1 - f[1]) *
                                             (dc ? f[2] : 1 - f[2]);
                            v += w * rho.grid(i0[0] + da, i0[1] + db, i0[2] + dc);
                        }
                out.grid(a, b, k) = v;
            }
    return out;
}

struct DensityAlignment {
    DensityVolume aligned;
    bool inverted = false;
    Vec3 shift = Vec3::Zero();  ///< voxels, applied to the (possibly inverted/rotated) input
    Rotation rotation;
    double correlation = 0.0;
};

struct DensityAlignOptions {
    bool search_rotation = false;
    std::size_t rotation_samples = 300;
    std::uint64_t seed = 42;
};

namespace detail {

struct ShiftResult {
    Vec3 shift = Vec3::Zero();
    double score = -1.0;
};

/// Best circular shift of `mov` onto `ref` by FFT cross-correlation, refined
/// to sub-voxel precision with a parabola per axis. Score is normalized.
inline ShiftResult best_shift(const DensityVolume& ref, const DensityVolume& mov) {
    const int n = ref.n();
    Fft3 fr(n), fm(n);
    std::copy(ref.grid.data.begin(), ref.grid.data.end(), fr.real().begin());
    std::copy(mov.grid.data.begin(), mov.grid.data.end(), fm.real().begin());
    fr.forward();
    fm.forward();
    auto sr = fr.spectrum();
    const auto sm = fm.spectrum();
    for (std::size_t i = 0; i < sr.size(); ++i) sr[i] = sr[i] * std::conj(sm[i]);
    const std::vector<std::complex<double>> cross(sr.begin(), sr.end());
    fr.backward();
    const auto cc = fr.real();
    std::size_t best = 0;
    for (std::size_t i = 1; i < cc.size(); ++i)
        if (cc[i] > cc[best]) best = i;
    const int bi = static_cast<int>(best / (static_cast<std::size_t>(n) * n));
    const int bj = static_cast<int>((best / n) % n);
    const int bk = static_cast<int>(best % n);
    const auto at = [&](int i, int j, int k) {
        return cc[(static_cast<std::size_t>((i + n) % n) * n + (j + n) % n) * n + (k + n) % n];
    };
    const double c0 = at(bi, bj, bk);
    const auto refine = [&](double m1, double p1) {
        const double den = m1 - 2 * c0 + p1;
        return den < 0 ? std::clamp(0.5 * (m1 - p1) / den, -0.5, 0.5) : 0.0;
    };
    ShiftResult r;
    r.shift = Vec3(fft_frequency(bi, n) + refine(at(bi - 1, bj, bk), at(bi + 1, bj, bk)),
                   fft_frequency(bj, n) + refine(at(bi, bj - 1, bk), at(bi, bj + 1, bk)),
                   fft_frequency(bk, n) + refine(at(bi, bj, bk - 1), at(bi, bj, bk + 1)));

    // Newton refinement of C(s) = Σ Re[X(f) e^{2πi f·s/n}], the continuous
    // cross-correlation of the band-limited volumes.
    const int h = n / 2 + 1;
    const double w0 = 2.0 * std::numbers::pi / n;
    const auto evaluate = [&](const Vec3& sh, Vec3* grad, Mat3* hess) {
        double c = 0;
        if (grad) grad->setZero();
        if (hess) hess->setZero();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                for (int k = 0; k < h; ++k) {
                    const Vec3 f((2 * i == n) ? 0 : fft_frequency(i, n), (2 * j == n) ? 0 : fft_frequency(j, n),
                                 (2 * k == n) ? 0 : k);
                    const double w = (k == 0 || 2 * k == n) ? 1.0 : 2.0;
                    const auto z = cross[(static_cast<std::size_t>(i) * n + j) * h + k] *
                                   std::polar(1.0, w0 * f.dot(sh));
                    c += w * z.real();
                    if (grad) *grad -= w * w0 * z.imag() * f;
                    if (hess) *hess -= w * w0 * w0 * z.real() * (f * f.transpose());
                }
        return c;
    };
    double c_best = evaluate(r.shift, nullptr, nullptr);
    for (int it = 0; it < 8; ++it) {
        Vec3 g;
        Mat3 H;
        evaluate(r.shift, &g, &H);
        if (!(H.eigenvalues().real().maxCoeff() < 0)) break;
        const Vec3 step = -H.ldlt().solve(g);
        if (!(step.norm() < 1.0)) break;
        const double c_new = evaluate(r.shift + step, nullptr, nullptr);
        if (!(c_new > c_best)) break;
        r.shift += step;
        c_best = c_new;
        if (step.norm() < 1e-6) break;
    }
    double nr = 0, nm = 0;
    for (double v : ref.grid.data) nr += v * v;
    for (double v : mov.grid.data) nm += v * v;
    const double norm = std::sqrt(nr * nm) * static_cast<double>(cc.size());
    r.score = norm > 0 ? std::max(c0, c_best) / norm : 0.0;
    return r;
}

}  // namespace detail

/// Circular translation by a (sub-voxel) shift via a Fourier phase ramp.
inline DensityVolume shift_density(const DensityVolume& rho, const Vec3& shift) {
    const int n = rho.n();
    Fft3 f(n);
    std::copy(rho.grid.data.begin(), rho.grid.data.end(), f.real().begin());
    f.forward();
    auto s = f.spectrum();
    const int h = f.half();
    const double two_pi = 2.0 * std::numbers::pi;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            for (int k = 0; k < h; ++k) {
                // Nyquist planes carry no well-defined phase ramp for a real signal.
                const double fi = (2 * i == n) ? 0 : fft_frequency(i, n);
                const double fj = (2 * j == n) ? 0 : fft_frequency(j, n);
                const double fk = (2 * k == n) ? 0 : k;
                const double ph = -two_pi * (fi * shift[0] + fj * shift[1] + fk * shift[2]) / n;
                s[(static_cast<std::size_t>(i) * n + j) * h + k] *= std::polar(1.0, ph);
            }
    f.backward();
    DensityVolume out{Grid3<double>(n, 0.0), rho.voxel_size};
    const double scale = 1.0 / static_cast<double>(f.real_size());
    for (std::size_t i = 0; i < out.grid.data.size(); ++i) out.grid.data[i] = f.real()[i] * scale;
    return out;
}

/// Aligns `moving` onto `reference` over inversion × translation (and
/// optionally rotation: a uniform coarse grid refined by local perturbation).
inline DensityAlignment align_density(const DensityVolume& reference, const DensityVolume& moving,
                                      const DensityAlignOptions& opt = {}) {
    if (reference.n() != moving.n()) throw ShapeError("align_density: grids differ in size");
    struct Candidate {
        bool inverted;
        Rotation rot;
        detail::ShiftResult shift;
    };
    Candidate best{false, Rotation::identity(), {}};
    const DensityVolume inverted = invert_density(moving);
    const auto consider = [&](bool inv, const Rotation& rot) {
        const DensityVolume& base = inv ? inverted : moving;
        const DensityVolume cand = opt.search_rotation ? rotate_density(base, rot) : base;
        const auto s = detail::best_shift(reference, cand);
        if (s.score > best.shift.score) best = {inv, rot, s};
    };
    for (bool inv : {false, true}) {
        consider(inv, Rotation::identity());
        if (!opt.search_rotation) continue;
        for (const auto& r : sample_uniform_rotations(opt.rotation_samples, opt.seed)) consider(inv, r);
    }
    if (opt.search_rotation) {
        Rng rng = make_rng(opt.seed, 1);
        double step = 0.15;
        for (int round = 0; round < 4; ++round, step *= 0.5)
            for (int t = 0; t < 24; ++t) {
                Vec3 v;
                for (int ax = 0; ax < 3; ++ax) v[ax] = step * (2 * uniform01(rng) - 1);
                consider(best.inverted, Rotation::exp(v) * best.rot);
            }
    }
    DensityAlignment out;
    out.inverted = best.inverted;
    out.rotation = best.rot;
    out.shift = best.shift.shift;
    out.correlation = best.shift.score;
    const DensityVolume& base = best.inverted ? inverted : moving;
    out.aligned = shift_density(opt.search_rotation ? rotate_density(base, best.rot) : base,
                                best.shift.shift);
    return out;
}

}  // namespace spire
