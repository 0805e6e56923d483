#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "spire/core.hpp"

namespace spire {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// hc in keV·Å; wavelength[Å] = kHcKevAngstrom / energy[keV].
inline constexpr double kHcKevAngstrom = 12.398419;

// ---------------------------------------------------------------------------
// Detector
// ---------------------------------------------------------------------------

/// Square, flat detector centered on the beam axis, perpendicular to the beam.
class DetectorGeometry {
public:
    DetectorGeometry(int n_side, double pixel_size_m, double distance_m, double photon_energy_kev)
        : n_side_(n_side), pixel_size_(pixel_size_m), distance_(distance_m),
          photon_energy_(photon_energy_kev) {
        if (n_side < 2) throw ArgumentError("detector needs n_side >= 2");
        if (!(pixel_size_m > 0) || !(distance_m > 0) || !(photon_energy_kev > 0))
            throw ArgumentError("detector pixel size, distance and photon energy must be positive");
        wavelength_ = kHcKevAngstrom / photon_energy_kev;
    }

    /// 128 pixels spanning 0.1 m at 0.2 m, 4.6 keV.
    static DetectorGeometry reference_instrument() { return {128, 0.1 / 128, 0.2, 4.6}; }

    int n_side() const noexcept { return n_side_; }
    double pixel_size() const noexcept { return pixel_size_; }
    double distance() const noexcept { return distance_; }
    double photon_energy() const noexcept { return photon_energy_; }
    double wavelength() const noexcept { return wavelength_; }
    /// Fractional pixel coordinate of the beam axis (same for rows and columns).
    double center() const noexcept { return 0.5 * (n_side_ - 1); }
    std::size_t pixel_count() const noexcept {
        return static_cast<std::size_t>(n_side_) * n_side_;
    }

    bool operator==(const DetectorGeometry&) const = default;

private:
    int n_side_;
    double pixel_size_;
    double distance_;
    double photon_energy_;
    double wavelength_;
};

/// |q| (Å⁻¹) for scattering onto the detector at transverse radius r (meters).
inline double q_magnitude_at_radius(const DetectorGeometry& geom, double r_m) {
    const double theta = std::atan2(r_m, geom.distance());
    return 2.0 * std::sin(0.5 * theta) / geom.wavelength();
}

/// Momentum transfer q = k_out − k_in with |k| = 1/λ, beam along +z. Column j
/// maps to +x, row i maps to −y (rows count downward).
inline Vec3 pixel_to_q(const DetectorGeometry& geom, int i, int j) {
    if (i < 0 || j < 0 || i >= geom.n_side() || j >= geom.n_side())
        throw BoundsError("pixel (" + std::to_string(i) + ", " + std::to_string(j) +
                          ") outside detector of side " + std::to_string(geom.n_side()));
    const double c = geom.center();
    const double x = (j - c) * geom.pixel_size();
    const double y = (c - i) * geom.pixel_size();
    const double z = geom.distance();
    const double inv_len = 1.0 / std::sqrt(x * x + y * y + z * z);
    const double k = 1.0 / geom.wavelength();
    return {k * x * inv_len, k * y * inv_len, k * (z * inv_len - 1.0)};
}

/// Per-pixel reciprocal coordinates at the identity orientation, row-major.
struct QGrid {
    int n_side = 0;
    std::vector<Vec3> coords;

    const Vec3& at(int i, int j) const { return coords[static_cast<std::size_t>(i) * n_side + j]; }
    std::size_t size() const noexcept { return coords.size(); }

    /// Largest |q| on the grid (a detector corner).
    double max_norm() const {
        double m = 0;
        for (const auto& q : coords) m = std::max(m, q.norm());
        return m;
    }
};

inline QGrid build_qgrid(const DetectorGeometry& geom) {
    QGrid g;
    g.n_side = geom.n_side();
    g.coords.reserve(geom.pixel_count());
    for (int i = 0; i < geom.n_side(); ++i)
        for (int j = 0; j < geom.n_side(); ++j) g.coords.push_back(pixel_to_q(geom, i, j));
    return g;
}

// ---------------------------------------------------------------------------
// SO(3)
// ---------------------------------------------------------------------------

/// Element of SO(3). The matrix acts on column vectors; images are rendered by
/// sampling the intensity at Rᵀq.
class Rotation {
public:
    Rotation() : m_(Mat3::Identity()) {}

    /// Wraps `m` after checking orthonormality and det = +1 to `tol`.
    static Rotation from_matrix(const Mat3& m, double tol = 1e-9) {
        if (!is_rotation(m, tol)) throw ArgumentError("matrix is not a proper rotation");
        return Rotation(m, Unchecked{});
    }
    static Rotation identity() { return Rotation(); }

    /// Unit quaternion (w, x, y, z) to matrix; the input is normalized first.
    static Rotation from_quaternion(double w, double x, double y, double z) {
        const double s = 1.0 / std::sqrt(w * w + x * x + y * y + z * z);
        w *= s, x *= s, y *= s, z *= s;
        Mat3 m;
        m << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
        return Rotation(m, Unchecked{});
    }

    /// Exponential map of a rotation vector (axis · angle).
    static Rotation exp(const Vec3& v) {
        const double angle = v.norm();
        if (angle < 1e-300) return Rotation();
        const double s = std::sin(0.5 * angle) / angle;
        return from_quaternion(std::cos(0.5 * angle), s * v.x(), s * v.y(), s * v.z());
    }

    const Mat3& matrix() const noexcept { return m_; }
    double operator()(int r, int c) const { return m_(r, c); }

    Rotation operator*(const Rotation& o) const { return Rotation(m_ * o.m_, Unchecked{}); }
    Rotation inverse() const { return Rotation(m_.transpose(), Unchecked{}); }

    /// Quaternion (w, x, y, z) with w ≥ 0 (Shepperd's method).
    std::array<double, 4> quaternion() const {
        const Mat3& m = m_;
        const double tr = m.trace();
        double w, x, y, z;
        if (tr >= m(0, 0) && tr >= m(1, 1) && tr >= m(2, 2)) {
            const double r = std::sqrt(1.0 + tr);
            w = 0.5 * r;
            x = (m(2, 1) - m(1, 2)) / (2 * r);
            y = (m(0, 2) - m(2, 0)) / (2 * r);
            z = (m(1, 0) - m(0, 1)) / (2 * r);
        } else if (m(0, 0) >= m(1, 1) && m(0, 0) >= m(2, 2)) {
            const double r = std::sqrt(1.0 + m(0, 0) - m(1, 1) - m(2, 2));
            x = 0.5 * r;
            w = (m(2, 1) - m(1, 2)) / (2 * r);
            y = (m(0, 1) + m(1, 0)) / (2 * r);
            z = (m(0, 2) + m(2, 0)) / (2 * r);
        } else if (m(1, 1) >= m(2, 2)) {
            const double r = std::sqrt(1.0 - m(0, 0) + m(1, 1) - m(2, 2));
            y = 0.5 * r;
            w = (m(0, 2) - m(2, 0)) / (2 * r);
            x = (m(0, 1) + m(1, 0)) / (2 * r);
            z = (m(1, 2) + m(2, 1)) / (2 * r);
        } else {
            const double r = std::sqrt(1.0 - m(0, 0) - m(1, 1) + m(2, 2));
            z = 0.5 * r;
            w = (m(1, 0) - m(0, 1)) / (2 * r);
            x = (m(0, 2) + m(2, 0)) / (2 * r);
            y = (m(1, 2) + m(2, 1)) / (2 * r);
        }
        if (w < 0) w = -w, x = -x, y = -y, z = -z;
        const double s = 1.0 / std::sqrt(w * w + x * x + y * y + z * z);
        return {w * s, x * s, y * s, z * s};
    }

    /// Rotation vector with angle in [0, π].
    Vec3 log() const {
        const auto q = quaternion();
        const Vec3 v(q[1], q[2], q[3]);
        const double sn = v.norm();
        if (sn < 1e-300) return Vec3::Zero();
        return (2.0 * std::atan2(sn, q[0]) / sn) * v;
    }

    /// Rotation angle in [0, π].
    double angle() const {
        const auto q = quaternion();
        return 2.0 * std::atan2(std::sqrt(q[1] * q[1] + q[2] * q[2] + q[3] * q[3]), q[0]);
    }

    static bool is_rotation(const Mat3& m, double tol) {
        if (!m.allFinite()) return false;
        const double ortho = (m.transpose() * m - Mat3::Identity()).cwiseAbs().maxCoeff();
        return ortho <= tol && std::abs(m.determinant() - 1.0) <= tol;
    }

private:
    struct Unchecked {};
    Rotation(const Mat3& m, Unchecked) : m_(m) {}
    Mat3 m_;
};

using RotationBatch = std::vector<Rotation>;

/// Geodesic distance arccos((tr(AᵀB) − 1)/2), evaluated through the
/// quaternion of AᵀB so that nearly equal rotations keep full precision.
inline double geodesic_distance(const Rotation& a, const Rotation& b) {
    return (a.inverse() * b).angle();
}

/// Below this norm the 6D map is considered degenerate.
inline constexpr double kSixDEpsilon = 1e-8;

/// Gram-Schmidt map from a 6-vector (a, b) to the rotation with rows
/// r1 = a/|a|, r2 = normalized (b − (r1·b) r1), r3 = r1 × r2.
inline Rotation six_d_to_rotation(std::span<const double, 6> v) {
    const Vec3 a(v[0], v[1], v[2]);
    const Vec3 b(v[3], v[4], v[5]);
    const double na = a.norm();
    if (!(na > kSixDEpsilon)) throw DegenerateError("6D rotation: first vector is (near) zero");
    const Vec3 r1 = a / na;
    const Vec3 u = b - r1.dot(b) * r1;
    const double nu = u.norm();
    if (!(nu > kSixDEpsilon))
        throw DegenerateError("6D rotation: second vector is (near) parallel to the first");
    const Vec3 r2 = u / nu;
    const Vec3 r3 = r1.cross(r2);
    Mat3 m;
    m.row(0) = r1;
    m.row(1) = r2;
    m.row(2) = r3;
    return Rotation::from_matrix(m, 1e-9);
}

inline Rotation six_d_to_rotation(const std::array<double, 6>& v) {
    return six_d_to_rotation(std::span<const double, 6>(v));
}

/// Haar-uniform rotations from Shoemake's uniform quaternions. Element k is
/// drawn from the sub-stream (seed, k), so batches are prefix-stable.
inline RotationBatch sample_uniform_rotations(std::size_t n, std::uint64_t seed) {
    if (n == 0) throw ArgumentError("sample_uniform_rotations: n must be >= 1");
    RotationBatch out;
    out.reserve(n);
    constexpr double two_pi = 2.0 * std::numbers::pi;
    for (std::size_t k = 0; k < n; ++k) {
        Rng rng = make_rng(seed, k);
        const double u1 = uniform01(rng), u2 = uniform01(rng), u3 = uniform01(rng);
        const double s1 = std::sqrt(1.0 - u1), s2 = std::sqrt(u1);
        out.push_back(Rotation::from_quaternion(s2 * std::cos(two_pi * u3),
                                                s1 * std::sin(two_pi * u2),
                                                s1 * std::cos(two_pi * u2),
                                                s2 * std::sin(two_pi * u3)));
    }
    return out;
}

/// 180° about the beam axis. A nearly flat Ewald slice at R and at
/// kFriedelFlip·R see the same pattern up to curvature, because I(q) = I(−q).
inline Rotation friedel_flip() {
    Mat3 f = Mat3::Zero();
    f(0, 0) = -1;
    f(1, 1) = -1;
    f(2, 2) = 1;
    return Rotation::from_matrix(f);
}

struct AlignOptions {
    /// Score each pair against the better of truth[i] and friedel_flip()·truth[i].
    bool friedel = false;
    int max_iterations = 500;
};

struct AlignResult {
    Rotation gauge;
    double mean_error = 0;             ///< radians
    std::vector<double> errors;        ///< per pair, radians
    std::vector<std::uint8_t> flipped; ///< per pair, 1 when the flipped truth was closer
};

namespace detail {

struct PairSet {
    std::vector<Rotation> rel;   // predᵀ·truth
    std::vector<Rotation> relf;  // predᵀ·flip·truth (only used with friedel)
    bool friedel = false;

    double error(const Rotation& g, std::size_t i, bool* flipped = nullptr) const {
        const double e = geodesic_distance(g, rel[i]);
        if (!friedel) return e;
        const double ef = geodesic_distance(g, relf[i]);
        if (flipped) *flipped = ef < e;
        return std::min(e, ef);
    }
    double mean(const Rotation& g) const {
        double s = 0;
        for (std::size_t i = 0; i < rel.size(); ++i) s += error(g, i);
        return s / static_cast<double>(rel.size());
    }
};

inline Rotation project_to_so3(const Mat3& m) {
    Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 d = Mat3::Identity();
    d(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0 ? -1.0 : 1.0;
    return Rotation::from_matrix(svd.matrixU() * d * svd.matrixV().transpose(), 1e-8);
}

// Weiszfeld iteration for the geodesic L1 median, keeping the best iterate.
inline Rotation refine_median(const PairSet& ps, Rotation g, int max_iterations) {
    Rotation best = g;
    double best_f = ps.mean(g);
    for (int it = 0; it < max_iterations; ++it) {
        Vec3 num = Vec3::Zero();
        double den = 0;
        for (std::size_t i = 0; i < ps.rel.size(); ++i) {
            bool flipped = false;
            ps.error(g, i, &flipped);
            const Rotation& target = flipped ? ps.relf[i] : ps.rel[i];
            const Vec3 v = (g.inverse() * target).log();
            const double w = 1.0 / std::max(v.norm(), 1e-12);
            num += w * v;
            den += w;
        }
        const Vec3 step = num / den;
        g = g * Rotation::exp(step);
        const double f = ps.mean(g);
        if (f < best_f) {
            best_f = f;
            best = g;
        }
        if (step.norm() < 1e-14) break;
    }
    return best;
}

}  // namespace detail

/// Global gauge g minimizing the mean geodesic distance d(pred[i]·g, truth[i]).
///
/// Starts from the chordal (Procrustes) mean of the relative rotations and a
/// handful of per-pair candidates, then refines the best start with Weiszfeld
/// iterations for the geodesic median. The result never scores worse than the
/// identity gauge.
inline AlignResult align_rotation_sets(const RotationBatch& pred, const RotationBatch& truth,
                                       const AlignOptions& opt = {}) {
    if (pred.empty() || truth.empty()) throw ArgumentError("align_rotation_sets: empty batch");
    if (pred.size() != truth.size())
        throw ShapeError("align_rotation_sets: batches differ in length");
    const std::size_t n = pred.size();
    const Rotation flip = friedel_flip();

    detail::PairSet ps;
    ps.friedel = opt.friedel;
    ps.rel.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        ps.rel.push_back(pred[i].inverse() * truth[i]);
        if (opt.friedel) ps.relf.push_back(pred[i].inverse() * flip * truth[i]);
    }

    std::vector<Rotation> starts;
    Mat3 sum = Mat3::Zero();
    for (const auto& r : ps.rel) sum += r.matrix();
    if (sum.norm() > 1e-9 * static_cast<double>(n)) starts.push_back(detail::project_to_so3(sum));
    const std::size_t n_candidates = std::min<std::size_t>(n, 24);
    for (std::size_t k = 0; k < n_candidates; ++k) {
        const std::size_t i = k * n / n_candidates;
        starts.push_back(ps.rel[i]);
        if (opt.friedel) starts.push_back(ps.relf[i]);
    }

    Rotation best_start = starts.front();
    double best_f = ps.mean(best_start);
    for (const auto& s : starts) {
        const double f = ps.mean(s);
        if (f < best_f) best_f = f, best_start = s;
    }
    Rotation g = detail::refine_median(ps, best_start, opt.max_iterations);
    if (ps.mean(Rotation::identity()) < ps.mean(g)) g = Rotation::identity();

    AlignResult res;
    res.gauge = g;
    res.errors.resize(n);
    res.flipped.assign(n, 0);
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) {
        bool flipped = false;
        res.errors[i] = ps.error(g, i, &flipped);
        res.flipped[i] = flipped ? 1 : 0;
        s += res.errors[i];
    }
    res.mean_error = s / static_cast<double>(n);
    return res;
}

/// Median of a list of angles (radians).
inline double median(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
    std::nth_element(v.begin(), mid, v.end());
    if (v.size() % 2 == 1) return *mid;
    const double hi = *mid;
    const double lo = *std::max_element(v.begin(), mid);
    return 0.5 * (lo + hi);
}

}  // namespace spire
