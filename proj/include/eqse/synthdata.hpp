#pragma once

// Procedural audio: ten event classes with fixed acoustic recipes, plus
// the dataset builders that mix speech and noise into train/val/test
// splits. Everything is a pure function of (config, seed); manifests are
// JSON-lines with relative paths so regeneration is byte-identical.

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "eqse/common.hpp"
#include "eqse/dsp.hpp"
#include "eqse/wav.hpp"

namespace eqse {

enum class EventClass {
    Car = 0,
    Bird,
    Engine,
    Dog,
    Rain,
    Alarm,
    Typing,
    Camera,
    ManSpeech,
    WomanSpeech,
};

inline constexpr int kNumClasses = 10;

inline const char* class_name(EventClass c) {
    switch (c) {
        case EventClass::Car: return "Car";
        case EventClass::Bird: return "Bird";
        case EventClass::Engine: return "Engine";
        case EventClass::Dog: return "Dog";
        case EventClass::Rain: return "Rain";
        case EventClass::Alarm: return "Alarm";
        case EventClass::Typing: return "Typing";
        case EventClass::Camera: return "Camera";
        case EventClass::ManSpeech: return "ManSpeech";
        case EventClass::WomanSpeech: return "WomanSpeech";
    }
    return "?";
}

inline EventClass class_from_name(const std::string& name) {
    for (int i = 0; i < kNumClasses; ++i)
        if (name == class_name(static_cast<EventClass>(i))) return static_cast<EventClass>(i);
    throw DataError("unknown event class: " + name);
}

inline bool is_speech(EventClass c) { return c == EventClass::ManSpeech || c == EventClass::WomanSpeech; }

/// 0 = man, 1 = woman, 2 = none. Shared by the embedding and metric formats.
inline int gender_code(EventClass c) {
    if (c == EventClass::ManSpeech) return 0;
    if (c == EventClass::WomanSpeech) return 1;
    return 2;
}

inline std::string gender_name(int code) {
    if (code == 0) return "man";
    if (code == 1) return "woman";
    return "";
}

// ---------------------------------------------------------------------------
// RBJ biquad filters, used by several recipes.
// ---------------------------------------------------------------------------

struct Biquad {
    double b0 = 1, b1 = 0, b2 = 0, a1 = 0, a2 = 0;
    double z1 = 0, z2 = 0;

    static Biquad lowpass(double fc, double q = 0.70710678) {
        const double w = 2.0 * M_PI * fc / kSampleRate, cw = std::cos(w), al = std::sin(w) / (2 * q);
        return normalized((1 - cw) / 2, 1 - cw, (1 - cw) / 2, 1 + al, -2 * cw, 1 - al);
    }
    static Biquad highpass(double fc, double q = 0.70710678) {
        const double w = 2.0 * M_PI * fc / kSampleRate, cw = std::cos(w), al = std::sin(w) / (2 * q);
        return normalized((1 + cw) / 2, -(1 + cw), (1 + cw) / 2, 1 + al, -2 * cw, 1 - al);
    }
    static Biquad bandpass(double fc, double q) {
        const double w = 2.0 * M_PI * fc / kSampleRate, cw = std::cos(w), al = std::sin(w) / (2 * q);
        return normalized(al, 0, -al, 1 + al, -2 * cw, 1 - al);
    }

    double process(double x) {
        const double y = b0 * x + z1;
        z1 = b1 * x - a1 * y + z2;
        z2 = b2 * x - a2 * y;
        return y;
    }
    void apply(std::vector<double>& xs) {
        for (double& x : xs) x = process(x);
    }

private:
    static Biquad normalized(double b0, double b1, double b2, double a0, double a1, double a2) {
        Biquad f;
        f.b0 = b0 / a0;
        f.b1 = b1 / a0;
        f.b2 = b2 / a0;
        f.a1 = a1 / a0;
        f.a2 = a2 / a0;
        return f;
    }
};

// ---------------------------------------------------------------------------
// Event recipes.
// ---------------------------------------------------------------------------

namespace recipes {

inline void peak_normalize(std::vector<double>& s, double target = 0.5) {
    double peak = 0;
    for (double v : s) peak = std::max(peak, std::abs(v));
    if (peak > 0)
        for (double& v : s) v *= target / peak;
}

/// Raised-cosine gate: 1 inside [on, off), with `ramp`-second edges.
inline double gate(double t, double on, double off, double ramp) {
    if (t < on || t >= off) return 0.0;
    if (t < on + ramp) return 0.5 - 0.5 * std::cos(M_PI * (t - on) / ramp);
    if (t > off - ramp) return 0.5 - 0.5 * std::cos(M_PI * (off - t) / ramp);
    return 1.0;
}

/// Harmonic voice: stacked partials under a three-resonance spectral
/// envelope, 5 Hz vibrato, syllabic on/off amplitude modulation.
inline std::vector<double> speech(Rng& rng, int64_t n, double f0_lo, double f0_hi) {
    const double f0 = rng.uniform(f0_lo, f0_hi);
    const double c1 = rng.uniform(300, 900), c2 = rng.uniform(900, 2200), c3 = rng.uniform(2200, 3200);
    const double bw1 = rng.uniform(80, 150), bw2 = rng.uniform(100, 200), bw3 = rng.uniform(150, 250);
    const double syllable_rate = rng.uniform(3.0, 5.0);

    auto envelope = [&](double f) {
        const double r1 = 1.0 / (1.0 + std::pow((f - c1) / bw1, 2.0));
        const double r2 = 0.7 / (1.0 + std::pow((f - c2) / bw2, 2.0));
        const double r3 = 0.4 / (1.0 + std::pow((f - c3) / bw3, 2.0));
        return r1 + r2 + r3 + 0.05;
    };

    const int n_harm = static_cast<int>(std::floor(7600.0 / (2.0 * f0 * 1.03)));
    std::vector<double> amp(static_cast<size_t>(n_harm));
    std::vector<double> phase(static_cast<size_t>(n_harm));
    for (int k = 0; k < n_harm; ++k) {
        amp[static_cast<size_t>(k)] = envelope((k + 1) * f0) / (k + 1);
        phase[static_cast<size_t>(k)] = rng.uniform(0.0, 2.0 * M_PI);
    }

    // syllable schedule: on-time with random duty, random per-syllable level
    const double period = 1.0 / syllable_rate;
    const double dur = static_cast<double>(n) / kSampleRate;
    struct Syl {
        double on, off, level;
    };
    std::vector<Syl> syls;
    for (double t0 = 0; t0 < dur; t0 += period)
        syls.push_back({t0, t0 + period * rng.uniform(0.5, 0.75), rng.uniform(0.75, 1.0)});

    std::vector<double> out(static_cast<size_t>(n), 0.0);
    const double dt = 1.0 / kSampleRate;
    double vib_phase = rng.uniform(0.0, 2.0 * M_PI);
    double base_phase = 0;
    for (int64_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) * dt;
        double env = 0;
        for (const Syl& s : syls)
            if (t >= s.on && t < s.off) {
                env = s.level * gate(t, s.on, s.off, 0.02);
                break;
            }
        const double f = f0 * (1.0 + 0.03 * std::sin(vib_phase));
        vib_phase += 2.0 * M_PI * 5.0 * dt;
        base_phase += 2.0 * M_PI * f * dt;
        if (env > 0) {
            double v = 0;
            for (int k = 0; k < n_harm; ++k) v += amp[static_cast<size_t>(k)] * std::sin((k + 1) * base_phase + phase[static_cast<size_t>(k)]);
            out[static_cast<size_t>(i)] = env * (v + 0.01 * rng.normal());
        }
    }
    return out;
}

inline std::vector<double> car(Rng& rng, int64_t n) {
    std::vector<double> s(static_cast<size_t>(n));
    for (auto& v : s) v = rng.normal();
    Biquad lp1 = Biquad::lowpass(300), lp2 = Biquad::lowpass(300);
    lp1.apply(s);
    lp2.apply(s);
    double rms = 0;
    for (double v : s) rms += v * v;
    rms = std::sqrt(rms / static_cast<double>(n));
    const double hum_amp = 1.2 * rms;
    const double wobble_rate = rng.uniform(0.3, 0.8);
    const double hum_phase = rng.uniform(0.0, 2.0 * M_PI);
    for (int64_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / kSampleRate;
        const double wobble = 1.0 + 0.25 * std::sin(2.0 * M_PI * wobble_rate * t);
        s[static_cast<size_t>(i)] = wobble * (s[static_cast<size_t>(i)] + hum_amp * std::sin(2.0 * M_PI * 25.0 * t + hum_phase));
    }
    return s;
}

inline std::vector<double> bird(Rng& rng, int64_t n) {
    std::vector<double> s(static_cast<size_t>(n), 0.0);
    const double dur = static_cast<double>(n) / kSampleRate;
    double t0 = rng.uniform(0.02, 0.2);
    while (t0 < dur) {
        const double chirp_dur = rng.uniform(0.08, 0.2);
        const double f_start = rng.uniform(2000, 6000);
        const double f_end = std::min(8000.0, f_start * rng.uniform(1.2, 2.0));
        const bool up = rng.uniform() < 0.7;
        const double fa = up ? f_start : f_end, fb = up ? f_end : f_start;
        double ph = rng.uniform(0.0, 2.0 * M_PI);
        const int64_t i0 = static_cast<int64_t>(t0 * kSampleRate);
        const int64_t i1 = std::min<int64_t>(n, i0 + static_cast<int64_t>(chirp_dur * kSampleRate));
        for (int64_t i = i0; i < i1; ++i) {
            const double u = static_cast<double>(i - i0) / static_cast<double>(i1 - i0);
            const double f = fa + (fb - fa) * u;
            ph += 2.0 * M_PI * f / kSampleRate;
            s[static_cast<size_t>(i)] += (0.5 - 0.5 * std::cos(2.0 * M_PI * u)) * std::sin(ph);
        }
        t0 += chirp_dur + rng.uniform(0.05, 0.3);
    }
    return s;
}

inline std::vector<double> engine(Rng& rng, int64_t n) {
    const int n_harm = 40;
    std::vector<double> phase(n_harm);
    for (auto& p : phase) p = rng.uniform(0.0, 2.0 * M_PI);
    const double am_rate = rng.uniform(0.5, 1.5);
    std::vector<double> s(static_cast<size_t>(n));
    double noise_rms = 0, tone_rms = 0;
    std::vector<double> tone(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / kSampleRate;
        double v = 0;
        for (int k = 1; k <= n_harm; ++k) v += std::pow(k, -0.7) * std::sin(2.0 * M_PI * 30.0 * k * t + phase[static_cast<size_t>(k - 1)]);
        tone[static_cast<size_t>(i)] = v;
        tone_rms += v * v;
        const double w = rng.normal();
        s[static_cast<size_t>(i)] = w;
        noise_rms += w * w;
    }
    tone_rms = std::sqrt(tone_rms / static_cast<double>(n));
    noise_rms = std::sqrt(noise_rms / static_cast<double>(n));
    const double g = 0.25 * tone_rms / noise_rms; // broadband floor ~ -12 dB
    for (int64_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / kSampleRate;
        const double am = 1.0 + 0.2 * std::sin(2.0 * M_PI * am_rate * t);
        s[static_cast<size_t>(i)] = am * (tone[static_cast<size_t>(i)] + g * s[static_cast<size_t>(i)]);
    }
    return s;
}

inline std::vector<double> dog(Rng& rng, int64_t n) {
    std::vector<double> s(static_cast<size_t>(n), 0.0);
    const double dur = static_cast<double>(n) / kSampleRate;
    double t0 = rng.uniform(0.05, 0.4);
    while (t0 + 0.15 < dur) {
        const double center = rng.uniform(400, 1200);
        Biquad bp = Biquad::bandpass(center, 2.0);
        const int64_t i0 = static_cast<int64_t>(t0 * kSampleRate);
        const int64_t len = static_cast<int64_t>(0.15 * kSampleRate);
        const double level = rng.uniform(0.6, 1.0);
        for (int64_t i = 0; i < len && i0 + i < n; ++i) {
            const double u = static_cast<double>(i) / static_cast<double>(len);
            const double env = std::exp(-6.0 * u) * (u < 0.05 ? u / 0.05 : 1.0);
            s[static_cast<size_t>(i0 + i)] += level * env * bp.process(rng.normal());
        }
        t0 += 0.15 + rng.uniform(0.25, 1.0);
    }
    return s;
}

inline std::vector<double> rain(Rng& rng, int64_t n) {
    std::vector<double> s(static_cast<size_t>(n), 0.0);
    const double p = 400.0 / kSampleRate; // Poisson impulse density
    for (int64_t i = 0; i < n; ++i)
        if (rng.uniform() < p) s[static_cast<size_t>(i)] = rng.uniform(-1.0, 1.0);
    Biquad hp = Biquad::highpass(1000), lp = Biquad::lowpass(6000);
    hp.apply(s);
    lp.apply(s);
    return s;
}

inline std::vector<double> alarm(Rng& rng, int64_t n) {
    // square-wave beeps: 2 per second, half-period on
    std::vector<double> s(static_cast<size_t>(n));
    const double phase0 = rng.uniform(0.0, 0.25);
    for (int64_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / kSampleRate;
        const double cyc = std::fmod(t + phase0, 0.5);
        const double env = gate(cyc, 0.0, 0.25, 0.005);
        const double sq = std::sin(2.0 * M_PI * 1000.0 * t) >= 0 ? 1.0 : -1.0;
        s[static_cast<size_t>(i)] = env * sq;
    }
    return s;
}

inline std::vector<double> typing(Rng& rng, int64_t n) {
    std::vector<double> s(static_cast<size_t>(n), 0.0);
    const double dur = static_cast<double>(n) / kSampleRate;
    double t0 = rng.uniform(0.01, 0.2);
    while (t0 < dur) {
        const int64_t i0 = static_cast<int64_t>(t0 * kSampleRate);
        const int64_t len = static_cast<int64_t>(0.005 * kSampleRate);
        const double level = rng.uniform(0.3, 1.0);
        for (int64_t i = 0; i < len && i0 + i < n; ++i)
            s[static_cast<size_t>(i0 + i)] += level * std::exp(-8.0 * static_cast<double>(i) / static_cast<double>(len)) * rng.normal();
        t0 += rng.uniform(0.06, 0.35);
    }
    Biquad hp = Biquad::highpass(2000);
    hp.apply(s);
    return s;
}

inline std::vector<double> camera(Rng& rng, int64_t n) {
    std::vector<double> s(static_cast<size_t>(n), 0.0);
    const double t_click = rng.uniform(0.1, 0.4);
    const int64_t c0 = static_cast<int64_t>(t_click * kSampleRate);
    const int64_t clen = static_cast<int64_t>(0.008 * kSampleRate);
    for (int64_t i = 0; i < clen && c0 + i < n; ++i)
        s[static_cast<size_t>(c0 + i)] += std::exp(-5.0 * static_cast<double>(i) / static_cast<double>(clen)) * rng.normal();
    Biquad hp = Biquad::highpass(1500);
    hp.apply(s);

    // 0.5 s narrowband motor whir after the click
    const double fc = rng.uniform(2500, 4500);
    const double wob_phase = rng.uniform(0.0, 2.0 * M_PI);
    double ph = rng.uniform(0.0, 2.0 * M_PI);
    const int64_t w0 = c0 + clen;
    const int64_t wlen = static_cast<int64_t>(0.5 * kSampleRate);
    for (int64_t i = 0; i < wlen && w0 + i < n; ++i) {
        const double t = static_cast<double>(i) / kSampleRate;
        const double f = fc + 50.0 * std::sin(2.0 * M_PI * 30.0 * t + wob_phase);
        ph += 2.0 * M_PI * f / kSampleRate;
        const double env = gate(t, 0.0, 0.5, 0.03);
        s[static_cast<size_t>(w0 + i)] += 0.6 * env * std::sin(ph);
    }
    return s;
}

} // namespace recipes

/// Deterministic per (class, seed): the same pair always yields the same
/// waveform, bit for bit.
inline Waveform gen_event(EventClass cls, uint64_t seed, double duration_s = 2.0) {
    if (duration_s < 1.0 || duration_s > 10.0)
        throw ConfigError("gen_event: duration must be in [1, 10] s, got " + std::to_string(duration_s));
    const int64_t n = static_cast<int64_t>(duration_s * kSampleRate);
    Rng rng = Rng::seeded(seed, std::string("event:") + class_name(cls));
    std::vector<double> s;
    switch (cls) {
        case EventClass::Car: s = recipes::car(rng, n); break;
        case EventClass::Bird: s = recipes::bird(rng, n); break;
        case EventClass::Engine: s = recipes::engine(rng, n); break;
        case EventClass::Dog: s = recipes::dog(rng, n); break;
        case EventClass::Rain: s = recipes::rain(rng, n); break;
        case EventClass::Alarm: s = recipes::alarm(rng, n); break;
        case EventClass::Typing: s = recipes::typing(rng, n); break;
        case EventClass::Camera: s = recipes::camera(rng, n); break;
        case EventClass::ManSpeech: s = recipes::speech(rng, n, 85, 155); break;
        case EventClass::WomanSpeech: s = recipes::speech(rng, n, 165, 255); break;
    }
    recipes::peak_normalize(s);
    Waveform w;
    w.samples = std::move(s);
    return w;
}

// ---------------------------------------------------------------------------
// Manifests.
// ---------------------------------------------------------------------------

struct ManifestRecord {
    std::string clip_id;
    std::string path; // relative to the manifest's directory
    std::string class_name;
    int gender = 2; // 0 man, 1 woman, 2 none
    std::optional<double> snr_db;
    std::optional<std::string> clean_path;
    uint64_t seed = 0;
    std::string split;
};

inline nlohmann::json record_to_json(const ManifestRecord& r) {
    nlohmann::json j;
    j["clip_id"] = r.clip_id;
    j["path"] = r.path;
    j["class"] = r.class_name;
    j["gender"] = r.gender == 2 ? nlohmann::json(nullptr) : nlohmann::json(gender_name(r.gender));
    j["snr_db"] = r.snr_db ? nlohmann::json(*r.snr_db) : nlohmann::json(nullptr);
    j["clean_path"] = r.clean_path ? nlohmann::json(*r.clean_path) : nlohmann::json(nullptr);
    j["seed"] = r.seed;
    j["split"] = r.split;
    return j;
}

inline ManifestRecord record_from_json(const nlohmann::json& j) {
    static const std::vector<std::string> keys = {"clean_path", "class", "clip_id", "gender", "path", "seed", "snr_db", "split"};
    for (const auto& k : keys)
        if (!j.contains(k)) throw DataError("manifest record missing key: " + k);
    if (j.size() != keys.size()) throw DataError("manifest record has unexpected keys");
    ManifestRecord r;
    r.clip_id = j["clip_id"].get<std::string>();
    r.path = j["path"].get<std::string>();
    r.class_name = j["class"].get<std::string>();
    class_from_name(r.class_name); // validates
    if (!j["gender"].is_null()) {
        const std::string g = j["gender"].get<std::string>();
        if (g == "man") r.gender = 0;
        else if (g == "woman") r.gender = 1;
        else throw DataError("manifest gender must be man/woman/null, got " + g);
    }
    if (!j["snr_db"].is_null()) r.snr_db = j["snr_db"].get<double>();
    if (!j["clean_path"].is_null()) r.clean_path = j["clean_path"].get<std::string>();
    r.seed = j["seed"].get<uint64_t>();
    r.split = j["split"].get<std::string>();
    if (r.split != "train" && r.split != "val" && r.split != "test")
        throw DataError("manifest split must be train/val/test, got " + r.split);
    return r;
}

inline void write_manifest(const std::string& path, const std::vector<ManifestRecord>& records) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open manifest for writing: " + path);
    for (const auto& r : records) out << record_to_json(r).dump() << "\n";
    if (!out) throw IoError("manifest write failed: " + path);
}

inline std::vector<ManifestRecord> read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest: " + path);
    std::vector<ManifestRecord> records;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError("manifest parse error at " + path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        records.push_back(record_from_json(j));
    }
    for (size_t i = 0; i < records.size(); ++i)
        for (size_t k = i + 1; k < records.size(); ++k)
            if (records[i].clip_id == records[k].clip_id)
                throw DataError("duplicate clip_id in manifest: " + records[i].clip_id);
    return records;
}

// ---------------------------------------------------------------------------
// Dataset builders. Per-clip seeds are laid out in disjoint ranges per
// split so provenance is readable from the manifest alone.
// ---------------------------------------------------------------------------

struct SedDataConfig {
    uint64_t root_seed = 1;
    std::string out_dir;
    int train_per_class = 200;
    int val_per_class = 40;
    int test_per_class = 40;
    double duration_s = 2.0;
};

struct SeDataConfig {
    uint64_t root_seed = 1;
    std::string out_dir;
    int train_pairs = 1000;
    int val_pairs = 100;
    int test_pairs = 200;
    double duration_s = 2.0;
    double snr_lo = -5.0;
    double snr_hi = 20.0;
};

namespace detail {
inline uint64_t clip_seed(uint64_t root, uint64_t split_base, uint64_t index) { return root * 1000000ull + split_base + index; }
inline constexpr uint64_t kSedTrainBase = 0, kSedValBase = 100000, kSedTestBase = 200000;
inline constexpr uint64_t kSeTrainBase = 300000, kSeValBase = 400000, kSeTestBase = 500000;

inline std::string zero_pad(int64_t v, int width) {
    std::string s = std::to_string(v);
    while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
    return s;
}
} // namespace detail

/// Class-balanced event clips for the classifier; returns manifest records
/// (also written to <out_dir>/sed_manifest.jsonl).
inline std::vector<ManifestRecord> build_sed_dataset(const SedDataConfig& cfg) {
    namespace fs = std::filesystem;
    if (cfg.train_per_class < 20 || cfg.val_per_class < 20 || cfg.test_per_class < 20)
        throw ConfigError("build_sed_dataset: per-class counts must be >= 20");
    std::vector<ManifestRecord> records;
    const struct {
        const char* split;
        int count;
        uint64_t base;
    } splits[] = {
        {"train", cfg.train_per_class, detail::kSedTrainBase},
        {"val", cfg.val_per_class, detail::kSedValBase},
        {"test", cfg.test_per_class, detail::kSedTestBase},
    };
    for (const auto& sp : splits) {
        fs::create_directories(fs::path(cfg.out_dir) / "sed" / sp.split);
        uint64_t index = 0;
        for (int c = 0; c < kNumClasses; ++c) {
            const EventClass cls = static_cast<EventClass>(c);
            for (int i = 0; i < sp.count; ++i, ++index) {
                const uint64_t seed = detail::clip_seed(cfg.root_seed, sp.base, index);
                const Waveform w = gen_event(cls, seed, cfg.duration_s);
                ManifestRecord r;
                r.clip_id = std::string("sed_") + sp.split + "_" + class_name(cls) + "_" + detail::zero_pad(i, 4);
                r.path = std::string("sed/") + sp.split + "/" + class_name(cls) + "_" + detail::zero_pad(i, 4) + ".wav";
                r.class_name = class_name(cls);
                r.gender = gender_code(cls);
                r.seed = seed;
                r.split = sp.split;
                wav_write((fs::path(cfg.out_dir) / r.path).string(), w);
                records.push_back(std::move(r));
            }
        }
    }
    write_manifest((fs::path(cfg.out_dir) / "sed_manifest.jsonl").string(), records);
    return records;
}

/// Speech+noise mixtures for enhancement. Each pair emits a clean record
/// and a noisy record referencing it; the stored clean is the
/// post-normalization signal so metrics can be recomputed exactly.
inline std::vector<ManifestRecord> build_se_dataset(const SeDataConfig& cfg) {
    namespace fs = std::filesystem;
    if (cfg.train_pairs <= 0 || cfg.val_pairs <= 0 || cfg.test_pairs <= 0)
        throw ConfigError("build_se_dataset: pair counts must be positive");
    static const EventClass noise_classes[] = {EventClass::Car, EventClass::Bird, EventClass::Engine, EventClass::Dog,
                                               EventClass::Rain, EventClass::Alarm, EventClass::Typing, EventClass::Camera};
    std::vector<ManifestRecord> records;
    const struct {
        const char* split;
        int count;
        uint64_t base;
    } splits[] = {
        {"train", cfg.train_pairs, detail::kSeTrainBase},
        {"val", cfg.val_pairs, detail::kSeValBase},
        {"test", cfg.test_pairs, detail::kSeTestBase},
    };
    for (const auto& sp : splits) {
        fs::create_directories(fs::path(cfg.out_dir) / "se" / sp.split);
        for (int i = 0; i < sp.count; ++i) {
            const uint64_t seed = detail::clip_seed(cfg.root_seed, sp.base, static_cast<uint64_t>(i));
            Rng rng = Rng::seeded(seed, "se:pair");
            const bool woman = rng.uniform() < 0.5;
            const EventClass speech_cls = woman ? EventClass::WomanSpeech : EventClass::ManSpeech;
            const EventClass noise_cls = noise_classes[rng.randint(8)];
            const double snr = rng.uniform(cfg.snr_lo, cfg.snr_hi);

            const Waveform speech = gen_event(speech_cls, seed, cfg.duration_s);
            const Waveform noise = gen_event(noise_cls, seed + 7000000ull, cfg.duration_s);
            const MixResult mix = mix_at_snr(speech, noise, snr);

            const std::string id_num = detail::zero_pad(i, 4);
            ManifestRecord clean;
            clean.clip_id = std::string("se_") + sp.split + "_" + id_num + "_clean";
            clean.path = std::string("se/") + sp.split + "/clean_" + id_num + ".wav";
            clean.class_name = class_name(speech_cls);
            clean.gender = woman ? 1 : 0;
            clean.seed = seed;
            clean.split = sp.split;
            wav_write((fs::path(cfg.out_dir) / clean.path).string(), mix.clean);

            ManifestRecord noisy;
            noisy.clip_id = std::string("se_") + sp.split + "_" + id_num;
            noisy.path = std::string("se/") + sp.split + "/noisy_" + id_num + ".wav";
            noisy.class_name = class_name(noise_cls);
            noisy.gender = woman ? 1 : 0;
            noisy.snr_db = snr;
            noisy.clean_path = clean.path;
            noisy.seed = seed;
            noisy.split = sp.split;
            wav_write((fs::path(cfg.out_dir) / noisy.path).string(), mix.noisy);

            records.push_back(std::move(clean));
            records.push_back(std::move(noisy));
        }
    }
    write_manifest((fs::path(cfg.out_dir) / "se_manifest.jsonl").string(), records);
    return records;
}

} // namespace eqse
