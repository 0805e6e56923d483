#pragma once

// SPI1 container: "SPI1" | u32 LE header length | JSON header | raw LE payload.
// Plus the plain-text side outputs: PGM pattern grids, SVG plots, config hashing.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "spire/core.hpp"
#include "spire/geometry.hpp"
#include "spire/simulate.hpp"

static_assert(std::endian::native == std::endian::little, "container payloads are written in host order");

namespace spire::io {

using Json = nlohmann::ordered_json;

inline constexpr char kMagic[4] = {'S', 'P', 'I', '1'};
inline constexpr std::size_t kPreambleSize = 8;

/// Malformed container; offset() is the byte position where decoding failed.
class FormatError : public IoError {
public:
    FormatError(const std::string& what, std::size_t offset)
        : IoError("byte " + std::to_string(offset) + ": " + what), offset_(offset) {}
    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

class BadMagicError : public FormatError {
public:
    using FormatError::FormatError;
};

class TruncatedError : public FormatError {
public:
    TruncatedError(const std::string& what, std::size_t offset, std::size_t expected, std::size_t actual)
        : FormatError(what + " (expected " + std::to_string(expected) + " bytes, got " + std::to_string(actual) + ")",
                      offset),
          expected_(expected), actual_(actual) {}
    std::size_t expected() const noexcept { return expected_; }
    std::size_t actual() const noexcept { return actual_; }

private:
    std::size_t expected_, actual_;
};

class JsonParseError : public FormatError {
public:
    using FormatError::FormatError;
};

enum class DType { f32, f64, u8, i64 };

inline std::size_t dtype_size(DType d) {
    switch (d) {
        case DType::f32: return 4;
        case DType::f64: return 8;
        case DType::u8: return 1;
        case DType::i64: return 8;
    }
    return 0;
}

inline std::string dtype_name(DType d) {
    switch (d) {
        case DType::f32: return "f32";
        case DType::f64: return "f64";
        case DType::u8: return "u8";
        case DType::i64: return "i64";
    }
    return "?";
}

inline DType parse_dtype(const std::string& s) {
    if (s == "f32") return DType::f32;
    if (s == "f64") return DType::f64;
    if (s == "u8") return DType::u8;
    if (s == "i64") return DType::i64;
    throw ArgumentError("unknown dtype '" + s + "'");
}

template <class T>
constexpr DType dtype_of() {
    if constexpr (std::is_same_v<T, float>) return DType::f32;
    else if constexpr (std::is_same_v<T, double>) return DType::f64;
    else if constexpr (std::is_same_v<T, std::uint8_t>) return DType::u8;
    else if constexpr (std::is_same_v<T, std::int64_t>) return DType::i64;
    else static_assert(sizeof(T) == 0, "unsupported element type");
}

struct Container {
    Json header = Json::object();
    std::vector<std::uint8_t> payload;

    std::string role() const { return header.at("role").get<std::string>(); }
    DType dtype() const { return parse_dtype(header.at("dtype").get<std::string>()); }
    std::vector<std::size_t> shape() const { return header.at("shape").get<std::vector<std::size_t>>(); }
    std::size_t element_count() const {
        std::size_t n = 1;
        for (std::size_t d : shape()) n *= d;
        return n;
    }

    /// Payload as T, converting between floating-point widths when needed.
    template <class T>
    std::vector<T> values() const {
        const std::size_t n = element_count();
        std::vector<T> out(n);
        const DType d = dtype();
        if (d == dtype_of<T>()) {
            if (n) std::memcpy(out.data(), payload.data(), n * sizeof(T));
        } else if (d == DType::f32 && std::is_floating_point_v<T>) {
            for (std::size_t i = 0; i < n; ++i) {
                float v;
                std::memcpy(&v, payload.data() + 4 * i, 4);
                out[i] = static_cast<T>(v);
            }
        } else if (d == DType::f64 && std::is_floating_point_v<T>) {
            for (std::size_t i = 0; i < n; ++i) {
                double v;
                std::memcpy(&v, payload.data() + 8 * i, 8);
                out[i] = static_cast<T>(v);
            }
        } else {
            throw ShapeError("container holds " + dtype_name(d) + ", cannot read as requested type");
        }
        return out;
    }

    void expect_role(const std::string& r) const {
        if (role() != r) throw ArgumentError("expected a '" + r + "' container, got '" + role() + "'");
    }
};

template <class T>
Container make_container(const std::string& role, std::vector<std::size_t> shape, std::span<const T> data,
                         const Json& extra = Json::object()) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    if (n != data.size()) throw ShapeError("make_container: shape does not match data length");
    Container c;
    c.header["role"] = role;
    c.header["dtype"] = dtype_name(dtype_of<T>());
    c.header["shape"] = shape;
    for (auto it = extra.begin(); it != extra.end(); ++it) c.header[it.key()] = it.value();
    c.payload.resize(n * sizeof(T));
    if (n) std::memcpy(c.payload.data(), data.data(), c.payload.size());
    return c;
}

inline std::vector<std::uint8_t> serialize(const Container& c) {
    const std::string h = c.header.dump();
    const std::size_t expected = c.element_count() * dtype_size(c.dtype());
    if (c.payload.size() != expected) throw ShapeError("container payload does not match its shape");
    if (h.size() > 0xffffffffULL) throw ArgumentError("container header too large");
    std::vector<std::uint8_t> out(kPreambleSize + h.size() + c.payload.size());
    std::memcpy(out.data(), kMagic, 4);
    const std::uint32_t len = static_cast<std::uint32_t>(h.size());
    std::memcpy(out.data() + 4, &len, 4);
    std::memcpy(out.data() + kPreambleSize, h.data(), h.size());
    if (!c.payload.empty()) std::memcpy(out.data() + kPreambleSize + h.size(), c.payload.data(), c.payload.size());
    return out;
}

inline Container deserialize(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        std::size_t at = 0;
        while (at < std::min<std::size_t>(4, bytes.size()) && bytes[at] == static_cast<std::uint8_t>(kMagic[at])) ++at;
        if (at == bytes.size() && at < 4) throw TruncatedError("truncated magic", at, 4, bytes.size());
        throw BadMagicError("bad magic, not an SPI1 container", at);
    }
    if (bytes.size() < kPreambleSize) throw TruncatedError("truncated header length", 4, kPreambleSize, bytes.size());
    std::uint32_t len;
    std::memcpy(&len, bytes.data() + 4, 4);
    if (bytes.size() < kPreambleSize + len)
        throw TruncatedError("truncated header", bytes.size(), kPreambleSize + len, bytes.size());

    Container c;
    const char* hb = reinterpret_cast<const char*>(bytes.data() + kPreambleSize);
    try {
        c.header = Json::parse(hb, hb + len);
    } catch (const nlohmann::json::parse_error& e) {
        const std::size_t pos = e.byte > 0 ? e.byte - 1 : 0;
        throw JsonParseError(std::string("header JSON: ") + e.what(), kPreambleSize + pos);
    }
    std::size_t expected = 0;
    try {
        if (!c.header.is_object()) throw JsonParseError("header is not a JSON object", kPreambleSize);
        expected = c.element_count() * dtype_size(c.dtype());
    } catch (const nlohmann::json::exception& e) {
        throw JsonParseError(std::string("header fields: ") + e.what(), kPreambleSize);
    } catch (const ArgumentError& e) {
        throw JsonParseError(std::string("header fields: ") + e.what(), kPreambleSize);
    }
    const std::size_t start = kPreambleSize + len;
    const std::size_t actual = bytes.size() - start;
    if (actual < expected) throw TruncatedError("truncated payload", bytes.size(), expected, actual);
    if (actual > expected) throw FormatError("trailing bytes after payload", start + expected);
    c.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(start), bytes.end());
    return c;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failed for '" + path.string() + "'");
    return bytes;
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline void write_container(const std::filesystem::path& path, const Container& c) { write_file(path, serialize(c)); }

inline Container read_container(const std::filesystem::path& path) { return deserialize(read_file(path)); }

// ---------------------------------------------------------------------------
// Configuration hashing
// ---------------------------------------------------------------------------

/// 64-bit FNV-1a, hex encoded.
inline std::string fnv1a_hex(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

inline std::string config_hash(const Json& config) { return fnv1a_hex(config.dump()); }

/// Header fields every output container carries.
inline Json provenance(const Json& config, std::uint64_t seed) {
    Json j = Json::object();
    j["seed"] = seed;
    j["config"] = config;
    j["config_hash"] = config_hash(config);
    return j;
}

// ---------------------------------------------------------------------------
// Domain objects
// ---------------------------------------------------------------------------

inline Json geometry_json(const DetectorGeometry& g) {
    Json j = Json::object();
    j["n_side"] = g.n_side();
    j["pixel_size_m"] = g.pixel_size();
    j["distance_m"] = g.distance();
    j["photon_energy_kev"] = g.photon_energy();
    return j;
}

inline DetectorGeometry geometry_from_json(const Json& j) {
    return {j.at("n_side").get<int>(), j.at("pixel_size_m").get<double>(), j.at("distance_m").get<double>(),
            j.at("photon_energy_kev").get<double>()};
}

inline Container images_container(const std::vector<DiffractionImage>& images, const DetectorGeometry& geom,
                                  const Json& extra = Json::object()) {
    if (images.empty()) throw ArgumentError("no images to write");
    const std::size_t px = geom.pixel_count();
    std::vector<double> data;
    data.reserve(images.size() * px);
    for (const auto& im : images) {
        if (im.pixels.size() != px) throw ShapeError("image size does not match the detector");
        data.insert(data.end(), im.pixels.begin(), im.pixels.end());
    }
    Json h = extra;
    h["geometry"] = geometry_json(geom);
    const auto n = static_cast<std::size_t>(geom.n_side());
    return make_container<double>("images", {images.size(), n, n}, data, h);
}

inline std::vector<DiffractionImage> images_from(const Container& c) {
    c.expect_role("images");
    const auto shape = c.shape();
    if (shape.size() != 3 || shape[1] != shape[2]) throw ShapeError("images container must be N×n×n");
    const auto v = c.values<double>();
    const std::size_t px = shape[1] * shape[2];
    std::vector<DiffractionImage> out(shape[0], DiffractionImage(static_cast<int>(shape[1])));
    for (std::size_t k = 0; k < shape[0]; ++k) {
        std::copy(v.begin() + static_cast<std::ptrdiff_t>(k * px), v.begin() + static_cast<std::ptrdiff_t>((k + 1) * px),
                  out[k].pixels.begin());
        out[k].orientation_id = static_cast<std::int64_t>(k);
    }
    return out;
}

inline Container rotations_container(const RotationBatch& rots, const Json& extra = Json::object()) {
    std::vector<double> data;
    data.reserve(rots.size() * 9);
    for (const auto& r : rots)
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) data.push_back(r(i, j));
    return make_container<double>("rotations", {rots.size(), 3, 3}, data, extra);
}

inline RotationBatch rotations_from(const Container& c) {
    c.expect_role("rotations");
    const auto shape = c.shape();
    if (shape.size() != 3 || shape[1] != 3 || shape[2] != 3) throw ShapeError("rotations container must be N×3×3");
    const auto v = c.values<double>();
    RotationBatch out;
    out.reserve(shape[0]);
    for (std::size_t k = 0; k < shape[0]; ++k) {
        Mat3 m;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) m(i, j) = v[k * 9 + static_cast<std::size_t>(i * 3 + j)];
        out.push_back(Rotation::from_matrix(m, 1e-6));
    }
    return out;
}

inline Container gammas_container(const std::vector<double>& g, const Json& extra = Json::object()) {
    return make_container<double>("gammas", {g.size()}, g, extra);
}

inline std::vector<double> gammas_from(const Container& c) {
    c.expect_role("gammas");
    if (c.shape().size() != 1) throw ShapeError("gammas container must be one-dimensional");
    return c.values<double>();
}

inline Container density_container(const DensityVolume& rho, const Json& extra = Json::object()) {
    Json h = extra;
    h["voxel_size"] = rho.voxel_size;
    const auto n = static_cast<std::size_t>(rho.n());
    return make_container<double>("density", {n, n, n}, rho.grid.data, h);
}

inline DensityVolume density_from(const Container& c) {
    c.expect_role("density");
    const auto s = c.shape();
    if (s.size() != 3 || s[0] != s[1] || s[1] != s[2]) throw ShapeError("density container must be n×n×n");
    DensityVolume rho{Grid3<double>(static_cast<int>(s[0]), 0.0), c.header.at("voxel_size").get<double>()};
    rho.grid.data = c.values<double>();
    return rho;
}

inline Container intensity_container(const IntensityVolume& I, const Json& extra = Json::object()) {
    Json h = extra;
    h["q_spacing"] = I.q_spacing;
    const auto m = static_cast<std::size_t>(I.m());
    return make_container<double>("intensity", {m, m, m}, I.grid.data, h);
}

inline IntensityVolume intensity_from(const Container& c) {
    c.expect_role("intensity");
    const auto s = c.shape();
    if (s.size() != 3 || s[0] != s[1] || s[1] != s[2]) throw ShapeError("intensity container must be m×m×m");
    IntensityVolume I{Grid3<double>(static_cast<int>(s[0]), 0.0), c.header.at("q_spacing").get<double>()};
    I.grid.data = c.values<double>();
    return I;
}

// ---------------------------------------------------------------------------
// Plots
// ---------------------------------------------------------------------------

/// Tiles images into a grid (cols across) and writes a 16-bit binary PGM with
/// min-max scaling of ln(1+x); the scaling goes to `<path>.json`.
inline void write_pattern_grid_pgm(const std::filesystem::path& path, const std::vector<DiffractionImage>& images,
                                   int cols = 4, bool log_scale = true) {
    if (images.empty()) throw ArgumentError("no images to plot");
    const int n = images.front().n_side;
    cols = std::max(1, std::min<int>(cols, static_cast<int>(images.size())));
    const int rows = static_cast<int>((images.size() + static_cast<std::size_t>(cols) - 1) / static_cast<std::size_t>(cols));
    const int gap = 2;
    const int W = cols * n + (cols - 1) * gap, H = rows * n + (rows - 1) * gap;
    const auto tf = [&](double v) { return log_scale ? std::log1p(std::max(v, 0.0)) : v; };

    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& im : images) {
        if (im.n_side != n) throw ShapeError("pattern grid: images differ in size");
        for (double v : im.pixels) {
            lo = std::min(lo, tf(v));
            hi = std::max(hi, tf(v));
        }
    }
    const double span = hi > lo ? hi - lo : 1.0;
    std::vector<std::uint16_t> px(static_cast<std::size_t>(W) * H, 0);
    for (std::size_t k = 0; k < images.size(); ++k) {
        const int r0 = static_cast<int>(k / static_cast<std::size_t>(cols)) * (n + gap);
        const int c0 = static_cast<int>(k % static_cast<std::size_t>(cols)) * (n + gap);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                px[static_cast<std::size_t>(r0 + i) * W + c0 + j] =
                    static_cast<std::uint16_t>(std::lround(65535.0 * (tf(images[k].at(i, j)) - lo) / span));
    }
    std::string out = "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n65535\n";
    std::vector<std::uint8_t> bytes(out.begin(), out.end());
    for (std::uint16_t v : px) {
        bytes.push_back(static_cast<std::uint8_t>(v >> 8));
        bytes.push_back(static_cast<std::uint8_t>(v & 0xff));
    }
    write_file(path, bytes);

    Json side = Json::object();
    side["width"] = W;
    side["height"] = H;
    side["tiles"] = images.size();
    side["columns"] = cols;
    side["transform"] = log_scale ? "log1p" : "identity";
    side["min"] = lo;
    side["max"] = hi;
    write_text(path.string() + ".json", side.dump(2) + "\n");
}

struct Series {
    std::string label;
    std::vector<double> x, y;
};

namespace detail {

inline std::string fmt(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << v;
    return os.str();
}

inline std::string fmt_tick(double v) {
    std::ostringstream os;
    os << std::setprecision(3) << v;
    return os.str();
}

inline const char* palette(std::size_t i) {
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
    return colors[i % 6];
}

}  // namespace detail

struct PlotOptions {
    std::string title, xlabel, ylabel;
    bool lines = true;  ///< false: scatter
    std::optional<double> hline;  ///< e.g. an FSC threshold
    bool diagonal = false;        ///< y = x reference
};

/// Minimal fixed-format SVG chart.
inline std::string svg_plot(const std::vector<Series>& series, const PlotOptions& opt) {
    const double W = 480, H = 360, L = 60, R = 20, T = 30, B = 50;
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto& s : series) {
        if (s.x.size() != s.y.size()) throw ShapeError("plot series: x and y lengths differ");
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
            x0 = std::min(x0, s.x[i]);
            x1 = std::max(x1, s.x[i]);
            y0 = std::min(y0, s.y[i]);
            y1 = std::max(y1, s.y[i]);
        }
    }
    if (opt.hline) {
        y0 = std::min(y0, *opt.hline);
        y1 = std::max(y1, *opt.hline);
    }
    if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (opt.diagonal) {
        x0 = y0 = std::min(x0, y0);
        x1 = y1 = std::max(x1, y1);
    }
    if (x1 <= x0) x1 = x0 + 1;
    if (y1 <= y0) y1 = y0 + 1;
    const auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
    const auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
    using detail::fmt;

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
       << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << fmt(W / 2) << "\" y=\"18\" text-anchor=\"middle\">" << opt.title << "</text>\n";
    os << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << W - L - R << "\" height=\"" << H - T - B
       << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        const double xv = x0 + (x1 - x0) * k / 4, yv = y0 + (y1 - y0) * k / 4;
        os << "<text x=\"" << fmt(px(xv)) << "\" y=\"" << fmt(H - B + 16) << "\" text-anchor=\"middle\">"
           << detail::fmt_tick(xv) << "</text>\n";
        os << "<text x=\"" << fmt(L - 6) << "\" y=\"" << fmt(py(yv) + 4) << "\" text-anchor=\"end\">"
           << detail::fmt_tick(yv) << "</text>\n";
    }
    os << "<text x=\"" << fmt(L + (W - L - R) / 2) << "\" y=\"" << fmt(H - 12) << "\" text-anchor=\"middle\">"
       << opt.xlabel << "</text>\n";
    os << "<text x=\"14\" y=\"" << fmt(T + (H - T - B) / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
       << fmt(T + (H - T - B) / 2) << ")\">" << opt.ylabel << "</text>\n";
    if (opt.hline)
        os << "<line x1=\"" << fmt(px(x0)) << "\" y1=\"" << fmt(py(*opt.hline)) << "\" x2=\"" << fmt(px(x1))
           << "\" y2=\"" << fmt(py(*opt.hline)) << "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
    if (opt.diagonal)
        os << "<line x1=\"" << fmt(px(x0)) << "\" y1=\"" << fmt(py(y0)) << "\" x2=\"" << fmt(px(x1)) << "\" y2=\""
           << fmt(py(y1)) << "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
    for (std::size_t s = 0; s < series.size(); ++s) {
        const auto& sr = series[s];
        if (opt.lines) {
            os << "<polyline fill=\"none\" stroke=\"" << detail::palette(s) << "\" stroke-width=\"1.5\" points=\"";
            bool first = true;
            for (std::size_t i = 0; i < sr.x.size(); ++i) {
                if (!std::isfinite(sr.x[i]) || !std::isfinite(sr.y[i])) continue;
                os << (first ? "" : " ") << fmt(px(sr.x[i])) << ',' << fmt(py(sr.y[i]));
                first = false;
            }
            os << "\"/>\n";
        } else {
            for (std::size_t i = 0; i < sr.x.size(); ++i)
                if (std::isfinite(sr.x[i]) && std::isfinite(sr.y[i]))
                    os << "<circle cx=\"" << fmt(px(sr.x[i])) << "\" cy=\"" << fmt(py(sr.y[i]))
                       << "\" r=\"2\" fill=\"" << detail::palette(s) << "\" fill-opacity=\"0.6\"/>\n";
        }
        if (!sr.label.empty())
            os << "<text x=\"" << fmt(W - R - 6) << "\" y=\"" << fmt(T + 16 + 14 * static_cast<double>(s))
               << "\" text-anchor=\"end\" fill=\"" << detail::palette(s) << "\">" << sr.label << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

}  // namespace spire::io
