#pragma once

// Iterative radix-2 FFT plus the real-input helpers the STFT stack uses.
// Power-of-two sizes only; the stft contract already guarantees that.

#include <cmath>
#include <complex>
#include <cstdint>
#include <vector>

#include "eqse/common.hpp"

namespace eqse {

inline bool is_pow2(int64_t n) { return n > 0 && (n & (n - 1)) == 0; }

template <typename Real>
void fft_inplace(std::vector<std::complex<Real>>& a, bool inverse) {
    const size_t n = a.size();
    if (!is_pow2(static_cast<int64_t>(n))) throw NumericError("fft size must be a power of two, got " + std::to_string(n));
    // bit-reversal permutation
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    const double sign = inverse ? 1.0 : -1.0;
    for (size_t len = 2; len <= n; len <<= 1) {
        const double ang = sign * 2.0 * 3.141592653589793238462643383279502884 / static_cast<double>(len);
        const std::complex<Real> wlen(static_cast<Real>(std::cos(ang)), static_cast<Real>(std::sin(ang)));
        for (size_t i = 0; i < n; i += len) {
            std::complex<Real> w(Real(1), Real(0));
            for (size_t k = 0; k < len / 2; ++k) {
                std::complex<Real> u = a[i + k];
                std::complex<Real> v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wlen;
            }
        }
    }
    if (inverse) {
        const Real inv = Real(1) / static_cast<Real>(n);
        for (auto& x : a) x *= inv;
    }
}

/// Real-input FFT: N samples -> N/2+1 bins.
template <typename Real>
void rfft(const Real* x, int64_t n, Real* re, Real* im) {
    std::vector<std::complex<Real>> buf(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) buf[static_cast<size_t>(i)] = std::complex<Real>(x[i], Real(0));
    fft_inplace(buf, false);
    const int64_t bins = n / 2 + 1;
    for (int64_t k = 0; k < bins; ++k) {
        re[k] = buf[static_cast<size_t>(k)].real();
        im[k] = buf[static_cast<size_t>(k)].imag();
    }
}

/// Inverse of rfft: N/2+1 bins -> N real samples. The imaginary parts of
/// bins 0 and N/2 are ignored (they are zero for any real signal).
template <typename Real>
void irfft(const Real* re, const Real* im, int64_t n, Real* x) {
    std::vector<std::complex<Real>> buf(static_cast<size_t>(n));
    const int64_t half = n / 2;
    buf[0] = std::complex<Real>(re[0], Real(0));
    buf[static_cast<size_t>(half)] = std::complex<Real>(re[half], Real(0));
    for (int64_t k = 1; k < half; ++k) {
        buf[static_cast<size_t>(k)] = std::complex<Real>(re[k], im[k]);
        buf[static_cast<size_t>(n - k)] = std::complex<Real>(re[k], -im[k]);
    }
    fft_inplace(buf, true);
    for (int64_t i = 0; i < n; ++i) x[i] = buf[static_cast<size_t>(i)].real();
}

/// Adjoint of irfft with respect to its (re, im) inputs. Given the gradient
/// g at the time-domain output, writes gradients for each bin.
template <typename Real>
void irfft_adjoint(const Real* g, int64_t n, Real* dre, Real* dim) {
    std::vector<Real> gre(static_cast<size_t>(n / 2 + 1)), gim(static_cast<size_t>(n / 2 + 1));
    rfft(g, n, gre.data(), gim.data());
    const int64_t half = n / 2;
    const Real inv_n = Real(1) / static_cast<Real>(n);
    dre[0] = gre[0] * inv_n;
    dim[0] = Real(0);
    dre[half] = gre[static_cast<size_t>(half)] * inv_n;
    dim[half] = Real(0);
    for (int64_t k = 1; k < half; ++k) {
        dre[k] = Real(2) * gre[static_cast<size_t>(k)] * inv_n;
        dim[k] = Real(2) * gim[static_cast<size_t>(k)] * inv_n;
    }
}

/// Periodic square-root Hann window; satisfies exact WOLA at 50% overlap.
template <typename Real>
std::vector<Real> sqrt_hann(int64_t n) {
    std::vector<Real> w(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        double h = 0.5 * (1.0 - std::cos(2.0 * 3.141592653589793238462643383279502884 * static_cast<double>(i) / static_cast<double>(n)));
        w[static_cast<size_t>(i)] = static_cast<Real>(std::sqrt(h));
    }
    return w;
}

} // namespace eqse
