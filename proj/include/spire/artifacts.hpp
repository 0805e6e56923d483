#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "spire/core.hpp"
#include "spire/simulate.hpp"

namespace spire {

// ---------------------------------------------------------------------------
// F: shot-to-shot fluence
// ---------------------------------------------------------------------------

/// Distribution of the multiplicative fluence factor γ. Draws are truncated
/// (by rejection) to [gamma_min, gamma_max].
struct FluenceModel {
    enum class Kind { lognormal, empirical };

    Kind kind = Kind::lognormal;
    double mu_ln = 0.0;      ///< log of the median
    double sigma_ln = 0.45;
    std::vector<double> samples;  ///< empirical support points
    double bandwidth = 0.0;       ///< Gaussian KDE bandwidth for empirical draws
    double gamma_min = 0.3;
    double gamma_max = 2.6;

    static FluenceModel lognormal(double median = 1.0, double sigma_ln = 0.45,
                                  double gamma_min = 0.3, double gamma_max = 2.6) {
        FluenceModel m;
        m.mu_ln = std::log(median);
        m.sigma_ln = sigma_ln;
        m.gamma_min = gamma_min;
        m.gamma_max = gamma_max;
        m.validate();
        return m;
    }

    /// KDE resampler over user-supplied samples; bandwidth 0 selects
    /// Silverman's rule. The clip range defaults to the sample range.
    static FluenceModel empirical(std::vector<double> samples, double bandwidth = 0.0) {
        if (samples.empty()) throw ArgumentError("empirical fluence model needs samples");
        FluenceModel m;
        m.kind = Kind::empirical;
        m.samples = std::move(samples);
        const auto [lo, hi] = std::minmax_element(m.samples.begin(), m.samples.end());
        m.gamma_min = *lo;
        m.gamma_max = *hi;
        if (bandwidth <= 0) {
            const double n = static_cast<double>(m.samples.size());
            const double mean = std::accumulate(m.samples.begin(), m.samples.end(), 0.0) / n;
            double var = 0;
            for (double s : m.samples) var += (s - mean) * (s - mean);
            const double sd = n > 1 ? std::sqrt(var / (n - 1)) : 0.0;
            bandwidth = 1.06 * sd * std::pow(n, -0.2);
        }
        m.bandwidth = bandwidth;
        m.validate();
        return m;
    }

    /// Degenerate model that always yields `gamma`.
    static FluenceModel constant(double gamma) {
        FluenceModel m;
        m.mu_ln = std::log(gamma);
        m.sigma_ln = 0.0;
        m.gamma_min = gamma;
        m.gamma_max = gamma;
        m.validate();
        return m;
    }

    void validate() const {
        if (!(gamma_min > 0)) throw ArgumentError("fluence clip range must have gamma_min > 0");
        if (!(gamma_max >= gamma_min)) throw ArgumentError("fluence clip range is empty");
        for (double s : samples)
            if (!(s > 0) || !std::isfinite(s))
                throw ArgumentError("empirical fluence samples must be positive and finite");
    }
};

/// One float per line; blank lines and lines starting with '#' are skipped.
inline std::vector<double> read_fluence_samples(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open fluence sample file '" + path + "'");
    std::vector<double> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto t = detail::trim(line);
        if (t.empty() || t.front() == '#') continue;
        try {
            std::size_t used = 0;
            const double v = std::stod(std::string(t), &used);
            if (used != t.size()) throw std::invalid_argument("trailing characters");
            out.push_back(v);
        } catch (const std::exception&) {
            throw ParseError("malformed fluence sample '" + std::string(t) + "'", line_no);
        }
    }
    return out;
}

inline double sample_gamma(const FluenceModel& model, Rng& rng) {
    if (model.gamma_min == model.gamma_max) return model.gamma_min;
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int attempt = 0; attempt < 10000; ++attempt) {
        double g;
        if (model.kind == FluenceModel::Kind::lognormal) {
            g = std::exp(model.mu_ln + model.sigma_ln * normal(rng));
        } else {
            const auto k = static_cast<std::size_t>(uniform01(rng) *
                                                    static_cast<double>(model.samples.size()));
            g = model.samples[std::min(k, model.samples.size() - 1)] + model.bandwidth * normal(rng);
        }
        if (g >= model.gamma_min && g <= model.gamma_max) return g;
    }
    // Only reachable for a clip window far in the tails.
    return std::clamp(std::exp(model.mu_ln), model.gamma_min, model.gamma_max);
}

inline DiffractionImage apply_fluence(DiffractionImage img, double gamma) {
    if (!(gamma > 0)) throw ArgumentError("apply_fluence: gamma must be positive");
    for (auto& v : img.pixels) v *= gamma;
    return img;
}

// ---------------------------------------------------------------------------
// P: photon counting
// ---------------------------------------------------------------------------

inline DiffractionImage apply_poisson(DiffractionImage img, Rng& rng) {
    for (auto& v : img.pixels) {
        if (!(v >= 0) || !std::isfinite(v))
            throw ArgumentError("apply_poisson: pixel values must be finite and non-negative");
        if (v == 0.0) continue;
        std::poisson_distribution<std::int64_t> pois(v);
        v = static_cast<double>(pois(rng));
    }
    return img;
}

// ---------------------------------------------------------------------------
// G: readout noise
// ---------------------------------------------------------------------------

/// out = max(in + ε, 0) with a fresh ε ~ N(0, σ) per pixel.
inline DiffractionImage apply_gaussian(DiffractionImage img, double sigma, Rng& rng) {
    if (!(sigma >= 0)) throw ArgumentError("apply_gaussian: sigma must be >= 0");
    if (sigma == 0.0) return img;
    std::normal_distribution<double> normal(0.0, sigma);
    for (auto& v : img.pixels) v = std::max(v + normal(rng), 0.0);
    return img;
}

// ---------------------------------------------------------------------------
// B: beam stop
// ---------------------------------------------------------------------------

struct BeamstopMask {
    int n_side = 0;
    int disk_radius_px = 5;
    int strip_width_px = 3;
    std::vector<std::uint8_t> bits;  ///< 1 = measured, 0 = blocked

    std::uint8_t at(int i, int j) const { return bits[static_cast<std::size_t>(i) * n_side + j]; }
    std::size_t blocked_count() const {
        return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{0}));
    }
    static BeamstopMask all(int n_side, std::uint8_t value) {
        BeamstopMask m;
        m.n_side = n_side;
        m.bits.assign(static_cast<std::size_t>(n_side) * n_side, value);
        return m;
    }
};

/// Zero set: pixels within disk_radius of the geometric center ((n−1)/2 in
/// both axes), plus a strip_width-row band (rows centered on the center row,
/// i.e. 63, 64, 65 for n = 128) running from column 0 to column ⌊(n−1)/2⌋.
inline BeamstopMask build_beamstop_mask(int n_side, int disk_radius_px = 5,
                                        int strip_width_px = 3) {
    if (n_side < 16) throw ArgumentError("build_beamstop_mask: n_side must be >= 16");
    BeamstopMask m = BeamstopMask::all(n_side, 1);
    m.disk_radius_px = disk_radius_px;
    m.strip_width_px = strip_width_px;
    const double c = 0.5 * (n_side - 1);
    const double r2 = static_cast<double>(disk_radius_px) * disk_radius_px;
    const int row_mid = static_cast<int>(std::ceil(c));
    const int row_lo = row_mid - (strip_width_px - 1) / 2;
    const int row_hi = row_lo + strip_width_px - 1;
    const int col_hi = static_cast<int>(std::floor(c));
    for (int i = 0; i < n_side; ++i)
        for (int j = 0; j < n_side; ++j) {
            const double di = i - c, dj = j - c;
            const bool disk = di * di + dj * dj <= r2;
            const bool strip = i >= row_lo && i <= row_hi && j <= col_hi;
            if (disk || strip) m.bits[static_cast<std::size_t>(i) * n_side + j] = 0;
        }
    return m;
}

inline DiffractionImage apply_beamstop(DiffractionImage img, const BeamstopMask& mask) {
    if (mask.n_side != img.n_side || mask.bits.size() != img.pixels.size())
        throw ShapeError("apply_beamstop: mask and image shapes differ");
    for (std::size_t p = 0; p < img.pixels.size(); ++p)
        img.pixels[p] = mask.bits[p] ? img.pixels[p] : 0.0;
    return img;
}

// ---------------------------------------------------------------------------
// Composition
// ---------------------------------------------------------------------------

/// Enabled subset of {F, P, G, B}. Application order is always F→P→G→B.
struct ArtifactSet {
    bool fluence = false;
    bool poisson = false;
    bool gaussian = false;
    bool beamstop = false;

    /// Letters in any order, e.g. "FPGB", "bf", or "" for none.
    static ArtifactSet parse(std::string_view letters) {
        ArtifactSet s;
        for (char ch : letters) {
            switch (std::toupper(static_cast<unsigned char>(ch))) {
                case 'F': s.fluence = true; break;
                case 'P': s.poisson = true; break;
                case 'G': s.gaussian = true; break;
                case 'B': s.beamstop = true; break;
                case ' ': case ',': break;
                default:
                    throw ArgumentError(std::string("unknown artifact letter '") + ch + "'");
            }
        }
        return s;
    }
    std::string str() const {
        std::string s;
        if (fluence) s += 'F';
        if (poisson) s += 'P';
        if (gaussian) s += 'G';
        if (beamstop) s += 'B';
        return s;
    }
    bool operator==(const ArtifactSet&) const = default;
};

struct ArtifactConfig {
    ArtifactSet enabled;
    double gaussian_sigma = 0.05;
    FluenceModel fluence = FluenceModel::lognormal();
    std::uint64_t seed = 42;
};

struct CorruptResult {
    DiffractionImage image;
    double gamma = 1.0;
};

/// Applies the enabled operators in canonical order B[G[P[F[img]]]].
inline CorruptResult corrupt(DiffractionImage img, const ArtifactConfig& cfg, Rng& rng) {
    CorruptResult out;
    if (cfg.enabled.fluence) {
        out.gamma = sample_gamma(cfg.fluence, rng);
        img = apply_fluence(std::move(img), out.gamma);
    }
    if (cfg.enabled.poisson) img = apply_poisson(std::move(img), rng);
    if (cfg.enabled.gaussian) img = apply_gaussian(std::move(img), cfg.gaussian_sigma, rng);
    if (cfg.enabled.beamstop) img = apply_beamstop(std::move(img), build_beamstop_mask(img.n_side));
    img.gamma = out.gamma;
    out.image = std::move(img);
    return out;
}

/// Corrupts every image with its own sub-stream (cfg.seed, k).
inline std::vector<CorruptResult> corrupt_dataset(const std::vector<DiffractionImage>& images,
                                                  const ArtifactConfig& cfg) {
    std::vector<CorruptResult> out;
    out.reserve(images.size());
    for (std::size_t k = 0; k < images.size(); ++k) {
        Rng rng = make_rng(cfg.seed, k);
        out.push_back(corrupt(images[k], cfg, rng));
    }
    return out;
}

}  // namespace spire
