#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <numbers>

#include "spire/metrics.hpp"
#include "spire/phasing.hpp"

using namespace spire;

namespace {

using Cplx = std::complex<double>;

// Naive full-spectrum DFT of an n³ real/complex array.
std::vector<Cplx> dft(const std::vector<Cplx>& x, int n, int sign) {
    std::vector<Cplx> out(x.size());
    std::vector<Cplx> tw(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) tw[k] = std::polar(1.0, sign * 2.0 * std::numbers::pi * k / n);
    for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b)
            for (int c = 0; c < n; ++c) {
                Cplx acc = 0;
                for (int x0 = 0; x0 < n; ++x0)
                    for (int y0 = 0; y0 < n; ++y0)
                        for (int z0 = 0; z0 < n; ++z0)
                            acc += x[(static_cast<std::size_t>(x0) * n + y0) * n + z0] *
                                   tw[(a * x0 + b * y0 + c * z0) % n];
                out[(static_cast<std::size_t>(a) * n + b) * n + c] = acc;
            }
    return out;
}

std::size_t full_index(int a, int b, int c, int n) { return (static_cast<std::size_t>(a) * n + b) * n + c; }

// Magnitude projection written against the naive DFT: known entries (full
// spectrum) take amplitude A with the iterate's phase.
std::vector<double> project_oracle(const std::vector<double>& rho, const std::vector<double>& amp_full,
                                   const std::vector<std::uint8_t>& known_full, int n) {
    std::vector<Cplx> x(rho.begin(), rho.end());
    auto f = dft(x, n, -1);
    for (std::size_t i = 0; i < f.size(); ++i) {
        if (!known_full[i]) continue;
        const double mag = std::abs(f[i]);
        f[i] = mag > 0 ? f[i] * (amp_full[i] / mag) : Cplx(amp_full[i], 0);
    }
    const auto back = dft(f, n, +1);
    std::vector<double> out(rho.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = back[i].real() / (double(n) * n * n);
    return out;
}

// Half-spectrum constraint from full-spectrum amplitudes and mask.
FourierConstraint half_constraint(const std::vector<double>& amp_full, const std::vector<std::uint8_t>& known_full,
                                  int n) {
    FourierConstraint c;
    c.n = n;
    const int h = n / 2 + 1;
    for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b)
            for (int k = 0; k < h; ++k) {
                c.amplitude.push_back(amp_full[full_index(a, b, k, n)]);
                c.known.push_back(known_full[full_index(a, b, k, n)]);
            }
    return c;
}

std::vector<double> random_field(std::size_t size, std::uint64_t seed, double lo = 0.0) {
    std::vector<double> v(size);
    Rng rng = make_rng(seed, 0);
    for (auto& x : v) x = lo + uniform01(rng);
    return v;
}

std::vector<double> amplitudes_of(const std::vector<double>& rho, int n) {
    const auto f = dft(std::vector<Cplx>(rho.begin(), rho.end()), n, -1);
    std::vector<double> a(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) a[i] = std::abs(f[i]);
    return a;
}

// Toy object: positive values inside a centered cube of side n/2.
std::vector<double> toy_object(int n, std::uint64_t seed, std::vector<std::uint8_t>& support) {
    auto rho = random_field(static_cast<std::size_t>(n) * n * n, seed, 0.2);
    support.assign(rho.size(), 0);
    for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b)
            for (int c = 0; c < n; ++c) {
                const bool in = a >= n / 4 && a < 3 * n / 4 && b >= n / 4 && b < 3 * n / 4 && c >= n / 4 && c < 3 * n / 4;
                support[full_index(a, b, c, n)] = in;
                if (!in) rho[full_index(a, b, c, n)] = 0.0;
            }
    return rho;
}

double l2(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

}  // namespace

TEST(ErStep, ConsistentIterateIsFixedPoint) {
    const int n = 8;
    std::vector<std::uint8_t> support;
    const auto truth = toy_object(n, 1, support);
    const auto c = half_constraint(amplitudes_of(truth, n), std::vector<std::uint8_t>(truth.size(), 1), n);
    auto rho = truth;
    er_step(rho, c, support);
    EXPECT_LT(l2(rho, truth), 1e-10);
    auto rho2 = truth;
    hio_step(rho2, c, support, 0.9);
    EXPECT_LT(l2(rho2, truth), 1e-10);
}

TEST(ErStep, ZeroAmplitudesGiveZero) {
    const int n = 8;
    FourierConstraint c;
    c.n = n;
    c.amplitude.assign(half_size(n), 0.0);
    c.known.assign(half_size(n), 1);
    auto rho = random_field(512, 2);
    er_step(rho, c, std::vector<std::uint8_t>(512, 1));
    for (double v : rho) EXPECT_NEAR(v, 0.0, 1e-14);
}

TEST(ErStep, ResidualNonIncreasing) {
    const int n = 8;
    std::vector<std::uint8_t> support;
    const auto truth = toy_object(n, 3, support);
    const auto c = half_constraint(amplitudes_of(truth, n), std::vector<std::uint8_t>(truth.size(), 1), n);
    Phaser ws(n);
    auto rho = random_field(truth.size(), 4);
    er_step(rho, c, support, ws);
    double prev = ws.residual(rho, c);
    for (int it = 0; it < 200; ++it) {
        er_step(rho, c, support, ws);
        const double r = ws.residual(rho, c);
        ASSERT_LE(r, prev * (1 + 1e-12) + 1e-15) << "iteration " << it;
        prev = r;
    }
    for (std::size_t i = 0; i < rho.size(); ++i)
        if (!support[i]) {
            EXPECT_EQ(rho[i], 0.0);
        }
}

TEST(ErStep, FullSupportConverges) {
    const int n = 8;
    for (std::uint64_t seed : {5, 6, 7}) {
        const auto truth = random_field(512, seed);
        const auto c = half_constraint(amplitudes_of(truth, n), std::vector<std::uint8_t>(512, 1), n);
        Phaser ws(n);
        const std::vector<std::uint8_t> all(512, 1);
        auto rho = random_field(512, seed + 100);
        for (int it = 0; it < 500; ++it) er_step(rho, c, all, ws);
        EXPECT_LT(ws.residual(rho, c), 1e-6) << "seed " << seed;
    }
}

TEST(HioStep, ZeroBetaKeepsPreviousOutsideSupport) {
    const int n = 8;
    std::vector<std::uint8_t> support;
    const auto truth = toy_object(n, 8, support);
    const auto c = half_constraint(amplitudes_of(truth, n), std::vector<std::uint8_t>(512, 1), n);
    const auto start = random_field(512, 9, -0.5);
    auto proj = start;
    Phaser ws(n);
    ws.project_magnitude(proj, c);
    auto rho = start;
    hio_step(rho, c, support, 0.0, ws);
    for (std::size_t i = 0; i < rho.size(); ++i) {
        const bool ok = support[i] && proj[i] >= 0;
        EXPECT_NEAR(rho[i], ok ? proj[i] : start[i], 1e-14);
    }
}

TEST(HioStep, MatchesScriptedOracle) {
    const int n = 6;
    const std::size_t size = 216;
    std::vector<std::uint8_t> support(size, 0);
    Rng rng = make_rng(10, 0);
    for (auto& s : support) s = uniform01(rng) < 0.4;
    const auto amp = amplitudes_of(random_field(size, 11), n);
    const std::vector<std::uint8_t> all(size, 1);
    auto rho = random_field(size, 12, -0.3);
    auto expect = rho;
    for (int it = 0; it < 3; ++it) {
        const auto proj = project_oracle(expect, amp, all, n);
        for (std::size_t i = 0; i < size; ++i) {
            const bool ok = support[i] && proj[i] >= 0;
            expect[i] = ok ? proj[i] : expect[i] - 0.9 * proj[i];
        }
    }
    const auto c = half_constraint(amp, all, n);
    for (int it = 0; it < 3; ++it) hio_step(rho, c, support, 0.9);
    EXPECT_LT(l2(rho, expect), 1e-10);
}

TEST(UnknownMask, AllKnownAllUnknownAndPartial) {
    const int n = 6;
    const std::size_t size = 216;
    const auto amp = amplitudes_of(random_field(size, 13), n);
    const auto rho = random_field(size, 14, -0.5);
    Phaser ws(n);

    const auto base = half_constraint(amp, std::vector<std::uint8_t>(size, 1), n);
    auto a = rho;
    ws.project_magnitude(a, apply_unknown_mask(base, std::vector<std::uint8_t>(half_size(n), 1)));
    EXPECT_LT(l2(a, project_oracle(rho, amp, std::vector<std::uint8_t>(size, 1), n)), 1e-10);

    auto b = rho;
    ws.project_magnitude(b, apply_unknown_mask(base, std::vector<std::uint8_t>(half_size(n), 0)));
    EXPECT_LT(l2(b, rho), 1e-12);

    // Friedel-symmetric partial mask: low frequencies unknown
    std::vector<std::uint8_t> known_full(size, 1);
    const auto f = [n](int x) { return x <= n / 2 ? x : x - n; };
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            for (int k = 0; k < n; ++k)
                if (f(i) * f(i) + f(j) * f(j) + f(k) * f(k) <= 2) known_full[full_index(i, j, k, n)] = 0;
    auto p = rho;
    ws.project_magnitude(p, half_constraint(amp, known_full, n));
    EXPECT_LT(l2(p, project_oracle(rho, amp, known_full, n)), 1e-10);
    EXPECT_THROW(apply_unknown_mask(base, std::vector<std::uint8_t>(3, 1)), ShapeError);
}

TEST(Projection, IdempotentAndShapePreserving) {
    const int n = 8;
    const auto c = half_constraint(amplitudes_of(random_field(512, 15), n), std::vector<std::uint8_t>(512, 1), n);
    Phaser ws(n);
    auto once = random_field(512, 16, -0.5);
    ws.project_magnitude(once, c);
    auto twice = once;
    ws.project_magnitude(twice, c);
    EXPECT_EQ(twice.size(), 512u);
    EXPECT_LT(l2(once, twice), 1e-12 * std::max(1.0, l2(once, std::vector<double>(512, 0.0))));
    for (double v : twice) EXPECT_TRUE(std::isfinite(v));
    auto bad = random_field(100, 1);
    EXPECT_THROW(ws.project_magnitude(bad, c), ShapeError);
}

TEST(Constraint, CenteredLayoutMatchesFftOrder) {
    const auto rho = make_blob_phantom({});
    const auto I = density_to_intensity(rho, 2);
    const auto c = make_constraint(I);
    // the padded density itself satisfies the constraint exactly
    Phaser ws(64);
    EXPECT_LT(ws.residual(pad_density(rho, 64).grid.data, c), 1e-12);
}

TEST(RetrievePhase, ZeroIntensityGivesZeroDensity) {
    const IntensityVolume I{Grid3<double>(16, 0.0), 0.01};
    PhasingConfig cfg;
    cfg.n_restarts = 2;
    const auto r = retrieve_phase(I, cfg);
    for (double v : r.density.grid.data) EXPECT_EQ(v, 0.0);
}

TEST(RetrievePhase, DeterministicPerSeed) {
    BlobPhantomSpec ps;
    ps.n = 16;
    ps.extent = 3;
    const auto I = density_to_intensity(make_blob_phantom(ps), 2);
    PhasingConfig cfg;
    cfg.n_restarts = 2;
    cfg.n_blocks = 3;
    const auto a = retrieve_phase(I, cfg), b = retrieve_phase(I, cfg);
    EXPECT_EQ(a.density.grid.data, b.density.grid.data);
    EXPECT_EQ(a.restart_residuals, b.restart_residuals);
    for (std::size_t i = 0; i < a.support.size(); ++i) {
        if (!a.support[i]) {
            EXPECT_EQ(a.density.grid.data[i], 0.0);
        }
        EXPECT_GE(a.density.grid.data[i], 0.0);
    }
    EXPECT_THROW(([&] {
                     PhasingConfig bad;
                     bad.hio_beta = 2.5;
                     retrieve_phase(I, bad);
                 }()),
                 ArgumentError);
}

TEST(RetrievePhase, UndersampledInputWarns) {
    DensityVolume rho{Grid3<double>(16, 0.0), 2.0};
    Rng rng = make_rng(17, 0);
    for (auto& v : rho.grid.data) v = uniform01(rng);
    PhasingConfig cfg;
    cfg.n_restarts = 1;
    cfg.n_blocks = 4;
    const auto r = retrieve_phase(density_to_intensity(rho, 1), cfg);
    EXPECT_FALSE(r.warnings.empty());
}

TEST(RetrievePhase, TwoBlobPhantomBestOfTen) {
    BlobPhantomSpec ps;
    ps.n_blobs = 2;
    ps.extent = 4;
    const auto rho = make_blob_phantom(ps);
    const auto I = density_to_intensity(rho, 2);
    const auto r = retrieve_phase(I, PhasingConfig{});
    EXPECT_EQ(r.restart_residuals.size(), 10u);
    EXPECT_LT(r.residual, 0.05);
    const auto truth = pad_density(rho, I.m());
    const auto al = align_density(truth, r.density);
    const auto res = resolution_at(fsc_density(truth, al.aligned), 0.5);
    ASSERT_FALSE(res.indeterminate());
    EXPECT_LE(*res.angstrom, 3.0 * rho.voxel_size);
}
