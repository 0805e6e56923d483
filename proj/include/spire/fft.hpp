#pragma once

#include <complex>
#include <cstddef>
#include <memory>
#include <span>

#include <fftw3.h>

#include "spire/core.hpp"

namespace spire {

/// Real-to-half-complex 3D transform pair of side n, unnormalized in both
/// directions. Plans use FFTW_ESTIMATE so the algorithm choice, and with it
/// the floating-point result, is the same on every run.
class Fft3 {
public:
    explicit Fft3(int n) : n_(n) {
        if (n < 1) throw ArgumentError("Fft3: side must be positive");
        real_.reset(fftw_alloc_real(real_size()));
        spec_.reset(fftw_alloc_complex(spectrum_size()));
        forward_ = fftw_plan_dft_r2c_3d(n, n, n, real_.get(), spec_.get(), FFTW_ESTIMATE);
        backward_ = fftw_plan_dft_c2r_3d(n, n, n, spec_.get(), real_.get(), FFTW_ESTIMATE);
        if (!forward_ || !backward_) throw Error("Fft3: FFTW plan creation failed");
    }
    Fft3(const Fft3&) = delete;
    Fft3& operator=(const Fft3&) = delete;
    ~Fft3() {
        if (forward_) fftw_destroy_plan(forward_);
        if (backward_) fftw_destroy_plan(backward_);
    }

    int side() const noexcept { return n_; }
    /// Last (fastest) dimension of the half spectrum.
    int half() const noexcept { return n_ / 2 + 1; }
    std::size_t real_size() const noexcept {
        return static_cast<std::size_t>(n_) * n_ * n_;
    }
    std::size_t spectrum_size() const noexcept {
        return static_cast<std::size_t>(n_) * n_ * half();
    }

    std::span<double> real() noexcept { return {real_.get(), real_size()}; }
    std::span<std::complex<double>> spectrum() noexcept {
        return {reinterpret_cast<std::complex<double>*>(spec_.get()), spectrum_size()};
    }

    /// real() → spectrum()
    void forward() { fftw_execute(forward_); }
    /// spectrum() → real(); the spectrum buffer is clobbered.
    void backward() { fftw_execute(backward_); }

private:
    struct FftwFree {
        void operator()(void* p) const noexcept { fftw_free(p); }
    };
    int n_;
    std::unique_ptr<double, FftwFree> real_;
    std::unique_ptr<fftw_complex, FftwFree> spec_;
    fftw_plan forward_ = nullptr;
    fftw_plan backward_ = nullptr;
};

/// Signed frequency of FFT bin k on an n-point axis, in [−n/2, (n−1)/2]. This
/// matches the centered layout where grid index a holds frequency a − n/2.
constexpr int fft_frequency(int k, int n) noexcept { return k < (n + 1) / 2 ? k : k - n; }

}  // namespace spire
