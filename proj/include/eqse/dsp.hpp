#pragma once

// STFT analysis/synthesis, log-mel frontend, SNR mixing, and the intrusive
// metrics (SSNR, SI-SDR). Everything here runs in double; model code casts
// at its own boundary.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "eqse/fft.hpp"
#include "eqse/tensor.hpp"
#include "eqse/wav.hpp"

namespace eqse {

/// Complex spectrogram with the metadata needed to invert it.
struct Spectrogram {
    int64_t fft_size = 512;
    int64_t hop = 256;
    int64_t orig_len = 0;
    int64_t pad_front = 0;
    Tensor<double> re; // (T, F)
    Tensor<double> im; // (T, F)

    int64_t frames() const { return re.rank() == 2 ? re.shape[0] : 0; }
    int64_t bins() const { return re.rank() == 2 ? re.shape[1] : 0; }

    Tensor<double> magnitude() const {
        Tensor<double> m(re.shape);
        for (int64_t i = 0; i < re.numel(); ++i) m[i] = std::hypot(re[i], im[i]);
        return m;
    }
    Tensor<double> power() const {
        Tensor<double> p(re.shape);
        for (int64_t i = 0; i < re.numel(); ++i) p[i] = re[i] * re[i] + im[i] * im[i];
        return p;
    }
};

namespace detail {
/// Symmetric reflection of an arbitrary index into [0, len).
inline int64_t reflect_index(int64_t i, int64_t len) {
    if (len == 1) return 0;
    const int64_t period = 2 * (len - 1);
    int64_t j = i % period;
    if (j < 0) j += period;
    return j < len ? j : period - j;
}
} // namespace detail

/// Frame count follows T = ceil((len + fft/2) / hop); the signal is
/// reflect-padded fft/2 on the left and as much as needed on the right so
/// frame T-1 fits.
inline Spectrogram stft(const Waveform& wave, int64_t fft_size = 512, int64_t hop = 256) {
    if (wave.samples.empty()) throw DataError("stft: zero-length waveform");
    if (!is_pow2(fft_size)) throw NumericError("stft: fft_size must be a power of two, got " + std::to_string(fft_size));
    if (hop != fft_size / 2) throw NumericError("stft: hop must be fft_size/2 for exact WOLA, got " + std::to_string(hop));
    const int64_t len = wave.size();
    const int64_t pad = fft_size / 2;
    const int64_t T = (len + pad + hop - 1) / hop;
    const int64_t F = fft_size / 2 + 1;
    const int64_t padded_len = (T - 1) * hop + fft_size;

    std::vector<double> padded(static_cast<size_t>(padded_len));
    for (int64_t i = 0; i < padded_len; ++i)
        padded[static_cast<size_t>(i)] = wave.samples[static_cast<size_t>(detail::reflect_index(i - pad, len))];

    Spectrogram spec;
    spec.fft_size = fft_size;
    spec.hop = hop;
    spec.orig_len = len;
    spec.pad_front = pad;
    spec.re = Tensor<double>({T, F});
    spec.im = Tensor<double>({T, F});
    const std::vector<double> win = sqrt_hann<double>(fft_size);
    std::vector<double> frame(static_cast<size_t>(fft_size));
    for (int64_t t = 0; t < T; ++t) {
        const double* src = padded.data() + t * hop;
        for (int64_t i = 0; i < fft_size; ++i) frame[static_cast<size_t>(i)] = src[i] * win[static_cast<size_t>(i)];
        rfft(frame.data(), fft_size, spec.re.data.data() + t * F, spec.im.data.data() + t * F);
    }
    return spec;
}

inline Waveform istft(const Spectrogram& spec) {
    const int64_t T = spec.frames(), F = spec.bins();
    if (T == 0 || F != spec.fft_size / 2 + 1)
        throw NumericError("istft: inconsistent metadata, bins " + std::to_string(F) + " vs fft " + std::to_string(spec.fft_size));
    if (spec.orig_len <= 0) throw NumericError("istft: original length not recorded");
    const int64_t buf_len = (T - 1) * spec.hop + spec.fft_size;
    if (spec.pad_front + spec.orig_len > buf_len) throw NumericError("istft: recorded length exceeds synthesis buffer");
    const std::vector<double> win = sqrt_hann<double>(spec.fft_size);
    std::vector<double> buf(static_cast<size_t>(buf_len), 0.0);
    std::vector<double> frame(static_cast<size_t>(spec.fft_size));
    for (int64_t t = 0; t < T; ++t) {
        irfft(spec.re.data.data() + t * F, spec.im.data.data() + t * F, spec.fft_size, frame.data());
        double* dst = buf.data() + t * spec.hop;
        for (int64_t i = 0; i < spec.fft_size; ++i) dst[i] += frame[static_cast<size_t>(i)] * win[static_cast<size_t>(i)];
    }
    Waveform out;
    out.samples.assign(buf.begin() + spec.pad_front, buf.begin() + spec.pad_front + spec.orig_len);
    return out;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Triangular filters with Slaney-style area normalization; rows are mel
/// bands, columns are FFT bins.
inline Tensor<double> mel_filterbank(int64_t n_mels, int64_t n_bins, int64_t fft_size, double fmin, double fmax, int sample_rate = kSampleRate) {
    if (n_mels < 8) throw ConfigError("mel_filterbank: n_mels must be >= 8, got " + std::to_string(n_mels));
    if (!(fmin < fmax) || fmax > sample_rate / 2.0)
        throw ConfigError("mel_filterbank: need fmin < fmax <= nyquist, got fmin=" + std::to_string(fmin) + " fmax=" + std::to_string(fmax));
    const double mel_lo = hz_to_mel(fmin), mel_hi = hz_to_mel(fmax);
    std::vector<double> edges(static_cast<size_t>(n_mels + 2));
    for (int64_t m = 0; m < n_mels + 2; ++m)
        edges[static_cast<size_t>(m)] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(m) / static_cast<double>(n_mels + 1));
    Tensor<double> fb({n_mels, n_bins});
    for (int64_t m = 0; m < n_mels; ++m) {
        const double lo = edges[static_cast<size_t>(m)], c = edges[static_cast<size_t>(m + 1)], hi = edges[static_cast<size_t>(m + 2)];
        const double norm = 2.0 / (hi - lo);
        for (int64_t k = 0; k < n_bins; ++k) {
            const double hz = static_cast<double>(k) * sample_rate / static_cast<double>(fft_size);
            double w = 0.0;
            if (hz > lo && hz < hi) w = hz <= c ? (hz - lo) / (c - lo) : (hi - hz) / (hi - c);
            fb.at(m, k) = w * norm;
        }
    }
    return fb;
}

/// Power spectrum -> mel bands -> log(x + 1e-6); output (T, n_mels).
inline Tensor<double> log_mel(const Spectrogram& spec, int64_t n_mels = 64, double fmin = 0.0, double fmax = 8000.0) {
    const Tensor<double> fb = mel_filterbank(n_mels, spec.bins(), spec.fft_size, fmin, fmax);
    const Tensor<double> pw = spec.power();
    const int64_t T = spec.frames(), F = spec.bins();
    Tensor<double> out({T, n_mels});
    for (int64_t t = 0; t < T; ++t) {
        for (int64_t m = 0; m < n_mels; ++m) {
            double acc = 0;
            for (int64_t k = 0; k < F; ++k) acc += fb.at(m, k) * pw.at(t, k);
            out.at(t, m) = std::log(acc + 1e-6);
        }
    }
    return out;
}

struct MixResult {
    Waveform noisy;
    Waveform clean;  // post-normalization copy; store this one
    Waveform noise;  // scaled noise actually added
    double gain = 1;  // g applied to raw noise before normalization
    double scale = 1; // joint peak normalization factor (1 when no clipping)
};

/// noisy = clean + g*noise with g = rms(clean)/(rms(noise)*10^(snr/20)).
/// If the mix would clip, all three signals are scaled jointly so the noisy
/// peak is 0.95; relative levels (and thus the SNR) are preserved.
inline MixResult mix_at_snr(const Waveform& clean, const Waveform& noise, double snr_db) {
    if (clean.rms() <= 1e-6) throw DataError("mix_at_snr: clean signal is silent");
    if (noise.rms() <= 1e-6) throw DataError("mix_at_snr: noise signal is silent");
    const int64_t len = clean.size();
    Waveform looped;
    looped.samples.resize(static_cast<size_t>(len));
    for (int64_t i = 0; i < len; ++i) looped.samples[static_cast<size_t>(i)] = noise.samples[static_cast<size_t>(i % noise.size())];

    const double g = clean.rms() / (looped.rms() * std::pow(10.0, snr_db / 20.0));
    MixResult out;
    out.gain = g;
    out.noisy.samples.resize(static_cast<size_t>(len));
    for (int64_t i = 0; i < len; ++i)
        out.noisy.samples[static_cast<size_t>(i)] = clean.samples[static_cast<size_t>(i)] + g * looped.samples[static_cast<size_t>(i)];
    const double peak = out.noisy.peak();
    out.scale = peak > 0.95 ? 0.95 / peak : 1.0;
    out.clean.samples.resize(static_cast<size_t>(len));
    out.noise.samples.resize(static_cast<size_t>(len));
    for (int64_t i = 0; i < len; ++i) {
        out.noisy.samples[static_cast<size_t>(i)] *= out.scale;
        out.clean.samples[static_cast<size_t>(i)] = clean.samples[static_cast<size_t>(i)] * out.scale;
        out.noise.samples[static_cast<size_t>(i)] = g * looped.samples[static_cast<size_t>(i)] * out.scale;
    }
    return out;
}

/// Segmental SNR: 512-sample frames at 50% overlap, per-frame dB clamped to
/// [-10, 35], frames whose reference power is below -60 dBFS excluded.
inline double ssnr(const Waveform& reference, const Waveform& estimate) {
    if (reference.size() != estimate.size())
        throw DataError("ssnr: length mismatch, " + std::to_string(reference.size()) + " vs " + std::to_string(estimate.size()));
    const int64_t frame = 512, hop = 256;
    double sum = 0;
    int64_t active = 0;
    for (int64_t s = 0; s + frame <= reference.size(); s += hop) {
        double se = 0, ee = 0;
        for (int64_t i = s; i < s + frame; ++i) {
            const double r = reference.samples[static_cast<size_t>(i)];
            const double d = r - estimate.samples[static_cast<size_t>(i)];
            se += r * r;
            ee += d * d;
        }
        const double mean_power = se / static_cast<double>(frame);
        if (10.0 * std::log10(mean_power + 1e-300) < -60.0) continue;
        double snr = 10.0 * std::log10(se / (ee + 1e-300));
        snr = std::clamp(snr, -10.0, 35.0);
        sum += snr;
        ++active;
    }
    if (active == 0) throw DataError("ssnr: no active frames");
    return sum / static_cast<double>(active);
}

/// Scale-invariant SDR with zero-mean normalization, capped at +60 dB when
/// the residual vanishes.
inline double si_sdr(const Waveform& reference, const Waveform& estimate) {
    if (reference.size() != estimate.size())
        throw DataError("si_sdr: length mismatch, " + std::to_string(reference.size()) + " vs " + std::to_string(estimate.size()));
    const int64_t n = reference.size();
    if (n == 0) throw DataError("si_sdr: empty signals");
    double mr = 0, me = 0;
    for (int64_t i = 0; i < n; ++i) {
        mr += reference.samples[static_cast<size_t>(i)];
        me += estimate.samples[static_cast<size_t>(i)];
    }
    mr /= static_cast<double>(n);
    me /= static_cast<double>(n);
    double dot = 0, rr = 0;
    for (int64_t i = 0; i < n; ++i) {
        const double r = reference.samples[static_cast<size_t>(i)] - mr;
        const double e = estimate.samples[static_cast<size_t>(i)] - me;
        dot += e * r;
        rr += r * r;
    }
    if (rr <= 0) throw DataError("si_sdr: silent reference");
    const double alpha = dot / rr;
    double target = 0, residual = 0;
    for (int64_t i = 0; i < n; ++i) {
        const double r = reference.samples[static_cast<size_t>(i)] - mr;
        const double e = estimate.samples[static_cast<size_t>(i)] - me;
        const double t = alpha * r;
        target += t * t;
        residual += (e - t) * (e - t);
    }
    if (residual < 1e-12 * target) return 60.0;
    const double v = 10.0 * std::log10(target / residual);
    return std::min(v, 60.0);
}

} // namespace eqse
