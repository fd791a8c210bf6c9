#pragma once

// PCM16 mono RIFF/WAVE I/O at a fixed 16 kHz rate.
//
// Samples map to float via s/32768; writing rounds x*32768 and clamps to
// the int16 range, so read -> write -> read is bit-exact.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "eqse/common.hpp"

namespace eqse {

struct Waveform {
    std::vector<double> samples;
    int sample_rate = 16000;

    int64_t size() const { return static_cast<int64_t>(samples.size()); }
    double rms() const {
        double e = 0;
        for (double s : samples) e += s * s;
        return samples.empty() ? 0.0 : std::sqrt(e / static_cast<double>(samples.size()));
    }
    double peak() const {
        double p = 0;
        for (double s : samples) p = std::max(p, std::abs(s));
        return p;
    }
};

inline constexpr int kSampleRate = 16000;

inline void wav_write(const std::string& path, const Waveform& wave) {
    if (wave.sample_rate != kSampleRate)
        throw DataError("wav_write: sample_rate=" + std::to_string(wave.sample_rate) + ", expected " + std::to_string(kSampleRate));
    const uint32_t n = static_cast<uint32_t>(wave.samples.size());
    const uint32_t data_bytes = n * 2;
    ByteWriter w;
    w.str("RIFF");
    w.u32(36 + data_bytes);
    w.str("WAVE");
    w.str("fmt ");
    w.u32(16);
    w.u16(1); // PCM
    w.u16(1); // mono
    w.u32(kSampleRate);
    w.u32(kSampleRate * 2); // byte rate
    w.u16(2);               // block align
    w.u16(16);              // bits per sample
    w.str("data");
    w.u32(data_bytes);
    for (double s : wave.samples) {
        double q = std::nearbyint(s * 32768.0);
        if (q > 32767.0) q = 32767.0;
        if (q < -32768.0) q = -32768.0;
        w.i16(static_cast<int16_t>(q));
    }
    w.save(path);
}

inline Waveform wav_read(const std::string& path) {
    ByteReader r = ByteReader::from_file(path);
    if (r.str(4) != "RIFF") throw DataError("wav_read: not a RIFF file: " + path);
    r.u32(); // riff size, not trusted
    if (r.str(4) != "WAVE") throw DataError("wav_read: RIFF form is not WAVE: " + path);

    bool have_fmt = false;
    Waveform wave;
    while (!r.eof()) {
        const std::string id = r.str(4);
        const uint32_t size = r.u32();
        if (id == "fmt ") {
            const uint16_t format = r.u16();
            if (format != 1) throw DataError("wav_read: audio_format=" + std::to_string(format) + ", expected 1 (PCM)");
            const uint16_t channels = r.u16();
            if (channels != 1) throw DataError("wav_read: channels=" + std::to_string(channels) + ", expected 1");
            const uint32_t rate = r.u32();
            if (rate != kSampleRate) throw DataError("wav_read: sample_rate=" + std::to_string(rate) + ", expected " + std::to_string(kSampleRate));
            r.u32(); // byte rate
            r.u16(); // block align
            const uint16_t bits = r.u16();
            if (bits != 16) throw DataError("wav_read: bits_per_sample=" + std::to_string(bits) + ", expected 16");
            if (size > 16) r.str(size - 16); // extension bytes
            have_fmt = true;
        } else if (id == "data") {
            if (!have_fmt) throw DataError("wav_read: data chunk before fmt chunk: " + path);
            const uint32_t count = size / 2;
            wave.samples.resize(count);
            for (uint32_t i = 0; i < count; ++i) wave.samples[i] = static_cast<double>(r.i16()) / 32768.0;
            if (size % 2) r.u8(); // chunk padding
            return wave;
        } else {
            r.str(size + (size % 2)); // skip unknown chunk, word-aligned
        }
    }
    throw DataError("wav_read: no data chunk in " + path);
}

} // namespace eqse
