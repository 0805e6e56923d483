#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace spire {

// ---------------------------------------------------------------------------
// Error kinds. Everything thrown by the library derives from spire::Error so
// callers (and the CLI) can map failures onto exit codes.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Index or coordinate outside the valid domain.
class BoundsError : public Error {
public:
    using Error::Error;
};

/// Bad argument value (negative fluence, empty batch, ...).
class ArgumentError : public Error {
public:
    using Error::Error;
};

/// Mismatched array shapes.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Degenerate input to the 6D rotation map.
class DegenerateError : public Error {
public:
    using Error::Error;
};

/// Non-finite values encountered during optimization.
class NumericalError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class UnsupportedElementError : public Error {
public:
    UnsupportedElementError(const std::string& element, std::size_t line)
        : Error("line " + std::to_string(line) + ": unsupported element '" + element + "'"),
          element_(element), line_(line) {}
    const std::string& element() const noexcept { return element_; }
    std::size_t line() const noexcept { return line_; }

private:
    std::string element_;
    std::size_t line_;
};

/// File-level I/O failure (open, read, write).
class IoError : public Error {
public:
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Random streams
// ---------------------------------------------------------------------------

using Rng = std::mt19937_64;

/// splitmix64 finalizer
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Seed for the sub-stream `stream` of a run seeded with `seed`. Batched
/// operations draw element k from derive_seed(seed, k) so results do not
/// depend on evaluation order.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
    return mix64(mix64(seed) ^ mix64(stream + 0x632be59bd9b4e019ULL));
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream) {
    return Rng(derive_seed(seed, stream));
}

/// Uniform double in [0, 1) with 53 random bits; unlike
/// std::uniform_real_distribution its output is specified exactly.
inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// ---------------------------------------------------------------------------
// Cubic grid
// ---------------------------------------------------------------------------

/// Row-major n×n×n array; index (a, b, c) maps to (x, y, z).
template <class T>
struct Grid3 {
    int n = 0;
    std::vector<T> data;

    Grid3() = default;
    explicit Grid3(int side, T fill = T{})
        : n(side), data(static_cast<std::size_t>(side) * side * side, fill) {}

    std::size_t size() const noexcept { return data.size(); }
    std::size_t index(int a, int b, int c) const noexcept {
        return (static_cast<std::size_t>(a) * n + b) * n + c;
    }
    T& operator()(int a, int b, int c) noexcept { return data[index(a, b, c)]; }
    const T& operator()(int a, int b, int c) const noexcept { return data[index(a, b, c)]; }
};

}  // namespace spire
