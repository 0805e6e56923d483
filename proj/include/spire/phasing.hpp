#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "spire/core.hpp"
#include "spire/fft.hpp"
#include "spire/simulate.hpp"

namespace spire {

struct PhasingConfig {
    double hio_beta = 0.9;
    int n_blocks = 20;
    int hio_per_block = 40;
    int er_per_block = 10;
    int shrinkwrap_every = 30;
    double shrinkwrap_sigma = 3.0;  ///< voxels, initial blur
    double shrinkwrap_decay = 0.98;
    double shrinkwrap_threshold = 0.08;
    double support_radius_fraction = 0.25;  ///< initial ball radius / side
    int n_restarts = 10;
    bool positivity = true;
    std::uint64_t seed = 42;

    int iterations() const { return n_blocks * (hio_per_block + er_per_block); }

    void validate() const {
        if (!(hio_beta > 0 && hio_beta < 2)) throw ArgumentError("phasing: hio_beta must be in (0, 2)");
        if (n_blocks < 1 || hio_per_block < 0 || er_per_block < 0 || iterations() < 1)
            throw ArgumentError("phasing: schedule must contain at least one iteration");
        if (n_restarts < 1) throw ArgumentError("phasing: n_restarts must be >= 1");
        if (shrinkwrap_every < 0) throw ArgumentError("phasing: shrinkwrap_every must be >= 0");
        if (!(shrinkwrap_threshold > 0 && shrinkwrap_threshold < 1))
            throw ArgumentError("phasing: shrinkwrap_threshold must be in (0, 1)");
        if (!(support_radius_fraction > 0)) throw ArgumentError("phasing: support radius must be positive");
    }
};

/// Measured Fourier amplitudes in FFT half-spectrum order (side n, last axis
/// n/2 + 1). Entries with known = 0 carry no magnitude constraint.
struct FourierConstraint {
    int n = 0;
    std::vector<double> amplitude;
    std::vector<std::uint8_t> known;
};

inline std::size_t half_size(int n) {
    return static_cast<std::size_t>(n) * n * (n / 2 + 1);
}

/// Converts a centered intensity volume (and optional centered known-mask)
/// to amplitude constraints.
inline FourierConstraint make_constraint(const IntensityVolume& intensity,
                                         const std::vector<std::uint8_t>* known_centered = nullptr) {
    const int m = intensity.m();
    if (known_centered && known_centered->size() != intensity.grid.size())
        throw ShapeError("make_constraint: known mask does not match the volume");
    FourierConstraint c;
    c.n = m;
    const int h = m / 2 + 1;
    c.amplitude.assign(half_size(m), 0.0);
    c.known.assign(half_size(m), 1);
    const auto shifted = [m](int k) { return (k + m / 2) % m; };
    for (int a = 0; a < m; ++a)
        for (int b = 0; b < m; ++b)
            for (int k = 0; k < h; ++k) {
                const std::size_t src = intensity.grid.index(shifted(a), shifted(b), shifted(k));
                const double v = intensity.grid.data[src];
                if (v < 0) throw ArgumentError("make_constraint: intensities must be >= 0");
                const std::size_t dst = (static_cast<std::size_t>(a) * m + b) * h + k;
                c.amplitude[dst] = std::sqrt(v);
                if (known_centered) c.known[dst] = (*known_centered)[src];
            }
    return c;
}

/// Replaces the known-set of a constraint (half-spectrum order).
inline FourierConstraint apply_unknown_mask(FourierConstraint c, const std::vector<std::uint8_t>& known) {
    if (known.size() != c.amplitude.size()) throw ShapeError("apply_unknown_mask: mask size mismatch");
    c.known = known;
    return c;
}

/// FFT workspace bound to one grid side.
class Phaser {
public:
    explicit Phaser(int n) : fft_(n) {}

    int n() const noexcept { return fft_.side(); }

    /// ρ ← F⁻¹[ P_M F[ρ] ]: known entries take the measured magnitude and keep
    /// their phase (zero phase where the iterate vanishes); unknown entries pass.
    void project_magnitude(std::vector<double>& rho, const FourierConstraint& c) {
        check(rho, c);
        std::copy(rho.begin(), rho.end(), fft_.real().begin());
        fft_.forward();
        auto s = fft_.spectrum();
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (!c.known[i]) continue;
            const double mag = std::abs(s[i]);
            s[i] = mag > 0 ? s[i] * (c.amplitude[i] / mag) : std::complex<double>(c.amplitude[i], 0.0);
        }
        fft_.backward();
        const double scale = 1.0 / static_cast<double>(fft_.real_size());
        const auto r = fft_.real();
        for (std::size_t i = 0; i < rho.size(); ++i) rho[i] = r[i] * scale;
    }

    /// Relative L2 misfit ‖|F[ρ]| − A‖ / ‖A‖ over known entries (Friedel
    /// mirrors counted twice).
    double residual(const std::vector<double>& rho, const FourierConstraint& c) {
        check(rho, c);
        std::copy(rho.begin(), rho.end(), fft_.real().begin());
        fft_.forward();
        const auto s = fft_.spectrum();
        const int n = fft_.side(), h = fft_.half();
        double num = 0, den = 0;
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (!c.known[i]) continue;
            const int k = static_cast<int>(i % h);
            const double w = (k == 0 || 2 * k == n) ? 1.0 : 2.0;
            const double d = std::abs(s[i]) - c.amplitude[i];
            num += w * d * d;
            den += w * c.amplitude[i] * c.amplitude[i];
        }
        return den > 0 ? std::sqrt(num / den) : std::sqrt(num);
    }

    /// Circular Gaussian blur with standard deviation sigma (voxels).
    std::vector<double> blur(const std::vector<double>& v, double sigma) {
        const int n = fft_.side(), h = fft_.half();
        std::copy(v.begin(), v.end(), fft_.real().begin());
        fft_.forward();
        auto s = fft_.spectrum();
        const double c = -2.0 * std::numbers::pi * std::numbers::pi * sigma * sigma / (double(n) * n);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                for (int k = 0; k < h; ++k) {
                    const double fi = fft_frequency(i, n), fj = fft_frequency(j, n);
                    s[(static_cast<std::size_t>(i) * n + j) * h + k] *=
                        std::exp(c * (fi * fi + fj * fj + double(k) * k));
                }
        fft_.backward();
        std::vector<double> out(v.size());
        const double scale = 1.0 / static_cast<double>(fft_.real_size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = fft_.real()[i] * scale;
        return out;
    }

private:
    void check(const std::vector<double>& rho, const FourierConstraint& c) const {
        if (c.n != fft_.side() || rho.size() != fft_.real_size() || c.amplitude.size() != half_size(c.n) ||
            c.known.size() != c.amplitude.size())
            throw ShapeError("phasing: iterate, constraint and workspace sizes differ");
    }

    Fft3 fft_;
};

/// Error reduction: magnitude projection, then zero outside the support (and
/// negative values inside when positivity is on).
inline void er_step(std::vector<double>& rho, const FourierConstraint& c,
                    const std::vector<std::uint8_t>& support, Phaser& ws, bool positivity = true) {
    if (support.size() != rho.size()) throw ShapeError("er_step: support size mismatch");
    ws.project_magnitude(rho, c);
    for (std::size_t i = 0; i < rho.size(); ++i)
        if (!support[i] || (positivity && rho[i] < 0)) rho[i] = 0.0;
}

/// Hybrid input-output: where the projected iterate ρ′ satisfies the
/// real-space constraints take ρ′, elsewhere ρ − βρ′.
inline void hio_step(std::vector<double>& rho, const FourierConstraint& c,
                     const std::vector<std::uint8_t>& support, double beta, Phaser& ws,
                     bool positivity = true) {
    if (support.size() != rho.size()) throw ShapeError("hio_step: support size mismatch");
    std::vector<double> proj = rho;
    ws.project_magnitude(proj, c);
    for (std::size_t i = 0; i < rho.size(); ++i) {
        const bool ok = support[i] && (!positivity || proj[i] >= 0);
        rho[i] = ok ? proj[i] : rho[i] - beta * proj[i];
    }
}

inline void er_step(std::vector<double>& rho, const FourierConstraint& c,
                    const std::vector<std::uint8_t>& support, bool positivity = true) {
    Phaser ws(c.n);
    er_step(rho, c, support, ws, positivity);
}

inline void hio_step(std::vector<double>& rho, const FourierConstraint& c,
                     const std::vector<std::uint8_t>& support, double beta, bool positivity = true) {
    Phaser ws(c.n);
    hio_step(rho, c, support, beta, ws, positivity);
}

/// Centered ball of the given radius (voxels) on an n³ grid.
inline std::vector<std::uint8_t> ball_support(int n, double radius) {
    std::vector<std::uint8_t> s(static_cast<std::size_t>(n) * n * n, 0);
    const double c = 0.5 * n;
    for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b)
            for (int k = 0; k < n; ++k) {
                const double da = a - c, db = b - c, dk = k - c;
                if (da * da + db * db + dk * dk <= radius * radius)
                    s[(static_cast<std::size_t>(a) * n + b) * n + k] = 1;
            }
    return s;
}

/// New support: voxels where the blurred non-negative part of ρ exceeds
/// `threshold` × its maximum. Keeps the old support if the result is empty.
inline std::vector<std::uint8_t> shrinkwrap(const std::vector<double>& rho, double sigma, double threshold,
                                            Phaser& ws, const std::vector<std::uint8_t>& old) {
    std::vector<double> pos(rho.size());
    for (std::size_t i = 0; i < rho.size(); ++i) pos[i] = std::max(rho[i], 0.0);
    const std::vector<double> b = ws.blur(pos, sigma);
    const double mx = *std::max_element(b.begin(), b.end());
    if (!(mx > 0)) return old;
    std::vector<std::uint8_t> s(rho.size(), 0);
    std::size_t count = 0;
    for (std::size_t i = 0; i < b.size(); ++i)
        if (b[i] > threshold * mx) {
            s[i] = 1;
            ++count;
        }
    return count ? s : old;
}

struct PhasingRun {
    std::vector<double> rho;
    std::vector<std::uint8_t> support;
    double residual = 0.0;
};

struct PhasingResult {
    DensityVolume density;
    double residual = 0.0;
    std::vector<std::uint8_t> support;
    int best_restart = 0;
    std::vector<double> restart_residuals;
    std::vector<double> residual_history;  ///< best restart, one entry per iteration
    std::vector<std::string> warnings;
};

/// One ER/HIO/shrinkwrap schedule from the given starting point.
inline PhasingRun run_phasing(const FourierConstraint& c, const PhasingConfig& cfg,
                              std::vector<double> rho, std::vector<std::uint8_t> support, Phaser& ws,
                              std::vector<double>* history = nullptr) {
    double sigma = cfg.shrinkwrap_sigma;
    int it = 0;
    for (int blk = 0; blk < cfg.n_blocks; ++blk) {
        for (int k = 0; k < cfg.hio_per_block + cfg.er_per_block; ++k, ++it) {
            if (k < cfg.hio_per_block)
                hio_step(rho, c, support, cfg.hio_beta, ws, cfg.positivity);
            else
                er_step(rho, c, support, ws, cfg.positivity);
            if (cfg.shrinkwrap_every > 0 && (it + 1) % cfg.shrinkwrap_every == 0) {
                support = shrinkwrap(rho, sigma, cfg.shrinkwrap_threshold, ws, support);
                sigma *= cfg.shrinkwrap_decay;
            }
            if (history) history->push_back(ws.residual(rho, c));
        }
    }
    // Finish on a constraint-satisfying iterate.
    er_step(rho, c, support, ws, cfg.positivity);
    PhasingRun run{std::move(rho), std::move(support), 0.0};
    run.residual = ws.residual(run.rho, c);
    return run;
}

/// Best-of-n phase retrieval. `init` (optional) seeds restart 0 instead of a
/// random start, with `init_support` as its support.
inline PhasingResult retrieve_phase(const IntensityVolume& intensity, const PhasingConfig& cfg,
                                    const std::vector<std::uint8_t>* known_centered = nullptr,
                                    const DensityVolume* init = nullptr,
                                    const std::vector<std::uint8_t>* init_support = nullptr,
                                    bool record_history = false) {
    cfg.validate();
    const int n = intensity.m();
    const FourierConstraint c = make_constraint(intensity, known_centered);
    const double voxel = 1.0 / (n * intensity.q_spacing);
    PhasingResult best;
    best.density = DensityVolume{Grid3<double>(n, 0.0), voxel};

    double energy = 0;  // Σ A² over the full spectrum = N · Σ ρ²
    {
        const int h = n / 2 + 1;
        for (std::size_t i = 0; i < c.amplitude.size(); ++i) {
            const int k = static_cast<int>(i % h);
            energy += ((k == 0 || 2 * k == n) ? 1.0 : 2.0) * c.amplitude[i] * c.amplitude[i];
        }
    }
    const std::vector<std::uint8_t> ball = ball_support(n, cfg.support_radius_fraction * n);
    const std::size_t ball_count = static_cast<std::size_t>(std::count(ball.begin(), ball.end(), 1));
    if (energy == 0) {
        best.support = ball;
        best.restart_residuals.assign(static_cast<std::size_t>(cfg.n_restarts), 0.0);
        return best;
    }

    Phaser ws(n);
    double best_res = std::numeric_limits<double>::infinity();
    for (int r = 0; r < cfg.n_restarts; ++r) {
        std::vector<double> rho(static_cast<std::size_t>(n) * n * n, 0.0);
        std::vector<std::uint8_t> support = ball;
        if (r == 0 && init) {
            if (init->n() != n) throw ShapeError("retrieve_phase: initial density has the wrong size");
            rho = init->grid.data;
            if (init_support) support = *init_support;
        } else {
            Rng rng = make_rng(cfg.seed, static_cast<std::uint64_t>(r));
            double sum2 = 0;
            for (std::size_t i = 0; i < rho.size(); ++i)
                if (support[i]) {
                    rho[i] = uniform01(rng);
                    sum2 += rho[i] * rho[i];
                }
            const double scale = std::sqrt(energy / static_cast<double>(rho.size()) / sum2);
            for (double& v : rho) v *= scale;
        }
        std::vector<double> hist;
        PhasingRun run = run_phasing(c, cfg, std::move(rho), std::move(support), ws,
                                     record_history ? &hist : nullptr);
        best.restart_residuals.push_back(run.residual);
        if (run.residual < best_res) {
            best_res = run.residual;
            best.best_restart = r;
            best.residual = run.residual;
            best.density.grid.data = std::move(run.rho);
            best.support = std::move(run.support);
            best.residual_history = std::move(hist);
        }
    }
    const std::size_t sup = static_cast<std::size_t>(std::count(best.support.begin(), best.support.end(), 1));
    if (2 * sup > best.support.size() || 2 * ball_count > best.support.size())
        best.warnings.push_back("support covers more than half the grid: intensities look under-sampled");
    return best;
}

}  // namespace spire
