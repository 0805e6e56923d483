#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <complex>
#include <cstdint>
#include <istream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "spire/core.hpp"
#include "spire/fft.hpp"
#include "spire/geometry.hpp"

namespace spire {

// ---------------------------------------------------------------------------
// Atomic models
// ---------------------------------------------------------------------------

struct Atom {
    std::string element;
    Vec3 position;     ///< Å
    double electrons;  ///< q-independent scattering factor
};

using AtomList = std::vector<Atom>;

/// Electron count for an element symbol, or nullopt when the element is not
/// in the table.
inline std::optional<double> electron_count(std::string_view symbol) {
    struct Entry {
        std::string_view symbol;
        double electrons;
    };
    static constexpr Entry table[] = {
        {"H", 1},   {"C", 6},   {"N", 7},   {"O", 8},   {"F", 9},   {"NA", 11},
        {"MG", 12}, {"P", 15},  {"S", 16},  {"CL", 17}, {"K", 19},  {"CA", 20},
        {"MN", 25}, {"FE", 26}, {"CO", 27}, {"NI", 28}, {"CU", 29}, {"ZN", 30},
        {"SE", 34}, {"BR", 35}, {"I", 53},
    };
    for (const auto& e : table)
        if (e.symbol == symbol) return e.electrons;
    return std::nullopt;
}

namespace detail {

inline std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::string upper(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return out;
}

inline double parse_column_double(std::string_view line, std::size_t start, std::size_t width,
                                  const char* field, std::size_t line_no) {
    if (line.size() < start + width)
        throw ParseError(std::string("record too short for ") + field + " field", line_no);
    const auto text = trim(line.substr(start, width));
    double v = 0;
    const auto* first = text.data();
    const auto* last = text.data() + text.size();
    if (!text.empty() && *first == '+') ++first;
    const auto res = std::from_chars(first, last, v);
    if (text.empty() || res.ec != std::errc{} || res.ptr != last || !std::isfinite(v))
        throw ParseError(std::string("malformed ") + field + " coordinate '" +
                             std::string(text) + "'",
                         line_no);
    return v;
}

// Element from the atom-name columns when columns 77-78 are blank.
inline std::string element_from_name(std::string_view line) {
    if (line.size() < 14) return {};
    const std::string_view name = line.substr(12, std::min<std::size_t>(4, line.size() - 12));
    std::string letters;
    for (char c : name)
        if (std::isalpha(static_cast<unsigned char>(c))) letters.push_back(c);
    if (letters.empty()) return {};
    // Right-justified one-letter elements start in column 14.
    if (name[0] == ' ' || std::isdigit(static_cast<unsigned char>(name[0])))
        return upper(letters.substr(0, 1));
    return upper(letters.substr(0, std::min<std::size_t>(2, letters.size())));
}

}  // namespace detail

/// Reads ATOM/HETATM records from fixed-column PDB text. Coordinates come from
/// columns 31-54, the element from columns 77-78 (falling back to the atom
/// name when blank). Every other record is ignored.
inline AtomList parse_pdb_atoms(std::istream& in) {
    AtomList atoms;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string_view sv(line);
        if (!(sv.starts_with("ATOM  ") || sv.starts_with("HETATM") || sv == "ATOM")) continue;
        Atom a;
        a.position.x() = detail::parse_column_double(sv, 30, 8, "x", line_no);
        a.position.y() = detail::parse_column_double(sv, 38, 8, "y", line_no);
        a.position.z() = detail::parse_column_double(sv, 46, 8, "z", line_no);
        std::string element;
        if (sv.size() >= 77)
            element = detail::upper(detail::trim(sv.substr(76, std::min<std::size_t>(2, sv.size() - 76))));
        if (element.empty()) element = detail::element_from_name(sv);
        const auto electrons = electron_count(element);
        if (!electrons) throw UnsupportedElementError(element, line_no);
        a.element = element;
        a.electrons = *electrons;
        atoms.push_back(std::move(a));
    }
    return atoms;
}

inline AtomList parse_pdb_atoms(std::string_view text) {
    std::istringstream in{std::string(text)};
    return parse_pdb_atoms(in);
}

// ---------------------------------------------------------------------------
// Volumes
// ---------------------------------------------------------------------------

/// Real-space electron density, electrons per voxel.
struct DensityVolume {
    Grid3<double> grid;
    double voxel_size = 1.0;  ///< Å

    int n() const noexcept { return grid.n; }
    double total() const {
        double s = 0;
        for (double v : grid.data) s += v;
        return s;
    }
};

/// Reciprocal-space intensity on a centered grid: index a holds
/// q = (a − ⌊m/2⌋)·q_spacing along each axis.
struct IntensityVolume {
    Grid3<double> grid;
    double q_spacing = 1.0;  ///< Å⁻¹ per voxel

    int m() const noexcept { return grid.n; }
    /// Largest |q| reachable along an axis inside the grid.
    double q_axis_max() const noexcept { return (m() / 2 - 1) * q_spacing; }
};

/// Splats each atom as an isotropic Gaussian (separable, normalized to the
/// atom's electron count) into an n³ box whose center (n−1)/2 coincides with
/// the electron-weighted center of mass.
inline DensityVolume atoms_to_density(const AtomList& atoms, int n, double voxel_size,
                                      double blur_sigma) {
    if (n < 4) throw ArgumentError("atoms_to_density: grid side must be >= 4");
    if (!(voxel_size > 0)) throw ArgumentError("atoms_to_density: voxel size must be positive");
    if (!(blur_sigma >= 0)) throw ArgumentError("atoms_to_density: blur sigma must be >= 0");
    DensityVolume rho{Grid3<double>(n, 0.0), voxel_size};
    if (atoms.empty()) return rho;

    Vec3 com = Vec3::Zero();
    double total = 0;
    for (const auto& a : atoms) {
        com += a.electrons * a.position;
        total += a.electrons;
    }
    com /= total;
    const double center = 0.5 * (n - 1);
    const double s = blur_sigma / voxel_size;
    const int reach = static_cast<int>(std::ceil(4.0 * s)) + 1;

    std::vector<double> w[3];
    int lo[3];
    for (const auto& a : atoms) {
        const Vec3 p = (a.position - com) / voxel_size + Vec3::Constant(center);
        for (int ax = 0; ax < 3; ++ax) {
            if (!(p[ax] >= 0.0 && p[ax] <= n - 1.0))
                throw BoundsError("atoms_to_density: atom at " + std::to_string(a.position[ax]) +
                                  " Å falls outside the box");
            const int c0 = static_cast<int>(std::floor(p[ax]));
            lo[ax] = c0 - reach;
            w[ax].assign(static_cast<std::size_t>(2 * reach + 2), 0.0);
            double sum = 0;
            for (int k = 0; k < 2 * reach + 2; ++k) {
                const double d = (lo[ax] + k) - p[ax];
                const double v = s > 0 ? std::exp(-0.5 * d * d / (s * s)) : 0.0;
                w[ax][k] = v;
                sum += v;
            }
            if (!(sum > 0)) {
                // Sub-voxel blur: deposit on the nearest voxel.
                std::fill(w[ax].begin(), w[ax].end(), 0.0);
                const int nearest = static_cast<int>(std::lround(p[ax]));
                w[ax][nearest - lo[ax]] = 1.0;
                sum = 1.0;
            }
            for (auto& v : w[ax]) v /= sum;
        }
        const int len = 2 * reach + 2;
        for (int i = 0; i < len; ++i) {
            const int gi = lo[0] + i;
            if (gi < 0 || gi >= n || w[0][i] == 0.0) continue;
            for (int j = 0; j < len; ++j) {
                const int gj = lo[1] + j;
                if (gj < 0 || gj >= n || w[1][j] == 0.0) continue;
                const double wij = a.electrons * w[0][i] * w[1][j];
                for (int k = 0; k < len; ++k) {
                    const int gk = lo[2] + k;
                    if (gk < 0 || gk >= n) continue;
                    rho.grid(gi, gj, gk) += wij * w[2][k];
                }
            }
        }
    }
    return rho;
}

/// I = |F[ρ]|² on a zero-padded grid of side oversample·n, shifted so that
/// q = 0 sits at index m/2. Friedel pairs (a ↔ (m − a) mod m) are filled from
/// the same half-spectrum entry, so the symmetry holds bit-for-bit.
inline IntensityVolume density_to_intensity(const DensityVolume& rho, int oversample = 2) {
    if (oversample < 1) throw ArgumentError("density_to_intensity: oversample must be >= 1");
    const int n = rho.n();
    const int m = oversample * n;
    Fft3 fft(m);
    auto real = fft.real();
    std::fill(real.begin(), real.end(), 0.0);
    for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b)
            for (int c = 0; c < n; ++c)
                real[(static_cast<std::size_t>(a) * m + b) * m + c] = rho.grid(a, b, c);
    fft.forward();
    const auto spec = fft.spectrum();
    const int h = fft.half();

    IntensityVolume out{Grid3<double>(m, 0.0), 1.0 / (m * rho.voxel_size)};
    const auto shifted = [m](int k) { return (k + m / 2) % m; };
    for (int a = 0; a < m; ++a)
        for (int b = 0; b < m; ++b)
            for (int c = 0; c < h; ++c) {
                const double v = std::norm(spec[(static_cast<std::size_t>(a) * m + b) * h + c]);
                out.grid(shifted(a), shifted(b), shifted(c)) = v;
                const int na = (m - a) % m, nb = (m - b) % m, nc = (m - c) % m;
                out.grid(shifted(na), shifted(nb), shifted(nc)) = v;
            }
    return out;
}

/// Zero-pads ρ into the corner of an m³ box, the placement used by
/// density_to_intensity, so that it can be compared with phasing output.
inline DensityVolume pad_density(const DensityVolume& rho, int m) {
    const int n = rho.n();
    if (m < n) throw ArgumentError("pad_density: target grid is smaller than the density");
    DensityVolume out{Grid3<double>(m, 0.0), rho.voxel_size};
    for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b)
            for (int c = 0; c < n; ++c) out.grid(a, b, c) = rho.grid(a, b, c);
    return out;
}

/// The 8 grid entries and weights that trilinear interpolation combines at
/// reciprocal coordinate q on a centered grid of side m.
struct TrilinearStencil {
    std::array<std::size_t, 8> index{};
    std::array<double, 8> weight{};
};

/// Lower corner (flat index) and fractional offsets of the trilinear cell
/// containing q; false when q falls outside the grid.
inline bool trilinear_cell(int m, double q_spacing, const Vec3& q, std::size_t& base, std::array<double, 3>& f) {
    int i0[3];
    for (int ax = 0; ax < 3; ++ax) {
        const double u = q[ax] / q_spacing + static_cast<double>(m / 2);
        if (!(u >= 0.0 && u <= m - 1.0)) return false;
        i0[ax] = std::min(static_cast<int>(u), m - 2);
        f[static_cast<std::size_t>(ax)] = u - i0[ax];
    }
    base = (static_cast<std::size_t>(i0[0]) * m + i0[1]) * m + i0[2];
    return true;
}

/// Empty when q falls outside the grid.
inline std::optional<TrilinearStencil> trilinear_stencil(int m, double q_spacing, const Vec3& q) {
    std::size_t base;
    std::array<double, 3> f;
    if (!trilinear_cell(m, q_spacing, q, base, f)) return std::nullopt;
    const auto mm = static_cast<std::size_t>(m);
    TrilinearStencil st;
    int k = 0;
    for (std::size_t da = 0; da < 2; ++da)
        for (std::size_t db = 0; db < 2; ++db)
            for (std::size_t dc = 0; dc < 2; ++dc, ++k) {
                st.index[k] = base + (da * mm + db) * mm + dc;
                st.weight[k] = (da ? f[0] : 1.0 - f[0]) * (db ? f[1] : 1.0 - f[1]) * (dc ? f[2] : 1.0 - f[2]);
            }
    return st;
}

inline std::optional<double> sample_trilinear(const IntensityVolume& vol, const Vec3& q) {
    const auto st = trilinear_stencil(vol.m(), vol.q_spacing, q);
    if (!st) return std::nullopt;
    double acc = 0;
    for (int k = 0; k < 8; ++k) acc += st->weight[k] * vol.grid.data[st->index[k]];
    return acc;
}

// ---------------------------------------------------------------------------
// Detector images
// ---------------------------------------------------------------------------

struct DiffractionImage {
    int n_side = 0;
    std::vector<double> pixels;  ///< row-major photons
    std::int64_t orientation_id = -1;
    std::optional<double> gamma;      ///< true fluence factor for synthetic data
    std::size_t out_of_range = 0;     ///< pixels whose q fell outside the volume

    DiffractionImage() = default;
    explicit DiffractionImage(int side, double fill = 0.0)
        : n_side(side), pixels(static_cast<std::size_t>(side) * side, fill) {}

    double& at(int i, int j) { return pixels[static_cast<std::size_t>(i) * n_side + j]; }
    double at(int i, int j) const { return pixels[static_cast<std::size_t>(i) * n_side + j]; }
    double total() const {
        double s = 0;
        for (double v : pixels) s += v;
        return s;
    }
};

/// Ewald slice of `intensity` at orientation R: pixel p receives
/// flux_scale · I(Rᵀ q_p). Pixels outside the volume are 0 and counted.
inline DiffractionImage render_pattern(const IntensityVolume& intensity, const Rotation& rot,
                                       const QGrid& qgrid, double flux_scale = 1.0) {
    DiffractionImage img(qgrid.n_side);
    const Mat3 rt = rot.matrix().transpose();
    for (std::size_t p = 0; p < qgrid.size(); ++p) {
        const auto v = sample_trilinear(intensity, rt * qgrid.coords[p]);
        if (v) {
            img.pixels[p] = flux_scale * *v;
        } else {
            ++img.out_of_range;
        }
    }
    return img;
}

struct SimulatedDataset {
    std::vector<DiffractionImage> images;
    RotationBatch rotations;  ///< ground truth, for evaluation only
};

/// Noise-free patterns at sample_uniform_rotations(n_images, seed).
inline SimulatedDataset simulate_dataset(const IntensityVolume& intensity,
                                         const DetectorGeometry& geom, std::size_t n_images,
                                         double flux_scale, std::uint64_t seed) {
    if (n_images < 1) throw ArgumentError("simulate_dataset: n_images must be >= 1");
    SimulatedDataset ds;
    ds.rotations = sample_uniform_rotations(n_images, seed);
    const QGrid qgrid = build_qgrid(geom);
    ds.images.reserve(n_images);
    for (std::size_t k = 0; k < n_images; ++k) {
        ds.images.push_back(render_pattern(intensity, ds.rotations[k], qgrid, flux_scale));
        ds.images.back().orientation_id = static_cast<std::int64_t>(k);
    }
    return ds;
}

inline SimulatedDataset simulate_dataset(const DensityVolume& rho, const DetectorGeometry& geom,
                                         std::size_t n_images, double flux_scale,
                                         std::uint64_t seed, int oversample = 2) {
    return simulate_dataset(density_to_intensity(rho, oversample), geom, n_images, flux_scale,
                            seed);
}

/// Flux scale that gives `mean_photons` expected photons per image, averaged
/// over `n_probe` uniform orientations.
inline double calibrate_flux(const IntensityVolume& intensity, const QGrid& qgrid,
                             double mean_photons, std::uint64_t seed = 0,
                             std::size_t n_probe = 64) {
    const auto rots = sample_uniform_rotations(n_probe, seed ^ 0xca11b4a7eULL);
    double total = 0;
    for (const auto& r : rots) total += render_pattern(intensity, r, qgrid, 1.0).total();
    total /= static_cast<double>(n_probe);
    if (!(total > 0)) throw ArgumentError("calibrate_flux: volume renders to zero photons");
    return mean_photons / total;
}

// ---------------------------------------------------------------------------
// Synthetic phantoms
// ---------------------------------------------------------------------------

struct BlobPhantomSpec {
    int n = 32;
    double voxel_size = 3.5;    ///< Å
    int n_blobs = 12;
    double extent = 6.0;        ///< blob centers within ±extent voxels of the box center
    double sigma_min = 0.7;     ///< voxels
    double sigma_max = 1.2;
    double amplitude_min = 0.5;
    double amplitude_max = 1.5;
    std::uint64_t seed = 7;
};

/// Sum of Gaussian blobs with random centers, widths and heights.
inline DensityVolume make_blob_phantom(const BlobPhantomSpec& spec) {
    if (spec.n < 4) throw ArgumentError("phantom grid side must be >= 4");
    Rng rng = make_rng(spec.seed, 0);
    struct Blob {
        Vec3 c;
        double s, a;
    };
    std::vector<Blob> blobs;
    for (int b = 0; b < spec.n_blobs; ++b) {
        Blob bl;
        for (int ax = 0; ax < 3; ++ax) bl.c[ax] = spec.extent * (2.0 * uniform01(rng) - 1.0);
        bl.s = spec.sigma_min + (spec.sigma_max - spec.sigma_min) * uniform01(rng);
        bl.a = spec.amplitude_min + (spec.amplitude_max - spec.amplitude_min) * uniform01(rng);
        blobs.push_back(bl);
    }
    DensityVolume rho{Grid3<double>(spec.n, 0.0), spec.voxel_size};
    const double c = 0.5 * (spec.n - 1);
    for (int a = 0; a < spec.n; ++a)
        for (int b = 0; b < spec.n; ++b)
            for (int k = 0; k < spec.n; ++k) {
                const Vec3 r(a - c, b - c, k - c);
                double v = 0;
                for (const auto& bl : blobs)
                    v += bl.a * std::exp(-0.5 * (r - bl.c).squaredNorm() / (bl.s * bl.s));
                rho.grid(a, b, k) = v;
            }
    return rho;
}

}  // namespace spire
