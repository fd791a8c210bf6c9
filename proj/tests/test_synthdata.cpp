#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <map>

#include "eqse/synthdata.hpp"

using namespace eqse;
namespace fs = std::filesystem;

namespace {

/// Median f0 via normalized autocorrelation with an octave-error guard:
/// the smallest lag within 10% of the best peak wins.
double median_pitch(const Waveform& w, double f_lo = 70.0, double f_hi = 300.0) {
    const int64_t frame = 2048, hop = 512;
    const int64_t lag_min = static_cast<int64_t>(kSampleRate / f_hi);
    const int64_t lag_max = static_cast<int64_t>(kSampleRate / f_lo);
    double max_energy = 0;
    std::vector<std::pair<int64_t, double>> frames; // (start, energy)
    for (int64_t s = 0; s + frame <= w.size(); s += hop) {
        double e = 0;
        for (int64_t i = s; i < s + frame; ++i) e += w.samples[static_cast<size_t>(i)] * w.samples[static_cast<size_t>(i)];
        frames.push_back({s, e});
        max_energy = std::max(max_energy, e);
    }
    std::vector<double> pitches;
    for (const auto& [s, e] : frames) {
        if (e < 0.2 * max_energy) continue; // unvoiced / gap
        double r0 = 0;
        for (int64_t i = s; i < s + frame; ++i) r0 += w.samples[static_cast<size_t>(i)] * w.samples[static_cast<size_t>(i)];
        double best = 0;
        std::vector<double> corr(static_cast<size_t>(lag_max + 1), 0.0);
        for (int64_t lag = lag_min; lag <= lag_max; ++lag) {
            double r = 0;
            for (int64_t i = s; i + lag < s + frame; ++i) r += w.samples[static_cast<size_t>(i)] * w.samples[static_cast<size_t>(i + lag)];
            corr[static_cast<size_t>(lag)] = r / (r0 + 1e-12);
            best = std::max(best, corr[static_cast<size_t>(lag)]);
        }
        if (best < 0.3) continue;
        for (int64_t lag = lag_min; lag <= lag_max; ++lag) {
            if (corr[static_cast<size_t>(lag)] >= 0.9 * best) {
                pitches.push_back(static_cast<double>(kSampleRate) / static_cast<double>(lag));
                break;
            }
        }
    }
    REQUIRE(pitches.size() >= 3);
    std::sort(pitches.begin(), pitches.end());
    return pitches[pitches.size() / 2];
}

/// Build-once small dataset trees for the manifest/probe tests.
const std::string& small_sed_dir() {
    static const std::string dir = [] {
        const std::string d = (fs::temp_directory_path() / "eqse_sed_small").string();
        fs::remove_all(d);
        SedDataConfig cfg;
        cfg.root_seed = 1;
        cfg.out_dir = d;
        cfg.train_per_class = 20;
        cfg.val_per_class = 20;
        cfg.test_per_class = 20;
        build_sed_dataset(cfg);
        return d;
    }();
    return dir;
}

} // namespace

TEST_CASE("alarm clips peak at the 1 kHz bin with odd harmonics") {
    for (uint64_t seed : {3ull, 14ull, 159ull}) {
        Waveform w = gen_event(EventClass::Alarm, seed);
        Spectrogram s = stft(w);
        Tensor<double> mag = s.magnitude();
        // mean magnitude over the loud frames only
        std::vector<double> mean_mag(static_cast<size_t>(s.bins()), 0.0);
        int64_t used = 0;
        for (int64_t t = 0; t < s.frames(); ++t) {
            double e = 0;
            for (int64_t k = 0; k < s.bins(); ++k) e += mag.at(t, k);
            if (e < 1.0) continue;
            for (int64_t k = 0; k < s.bins(); ++k) mean_mag[static_cast<size_t>(k)] += mag.at(t, k);
            ++used;
        }
        REQUIRE(used > 0);
        int64_t argmax = 1;
        for (int64_t k = 1; k < s.bins(); ++k)
            if (mean_mag[static_cast<size_t>(k)] > mean_mag[static_cast<size_t>(argmax)]) argmax = k;
        // 1000 Hz / (16000/512) = bin 32
        REQUIRE(std::abs(argmax - 32) <= 1);
        // odd harmonic at 3 kHz (bin 96) clearly above the absent even at 2 kHz (bin 64)
        REQUIRE(mean_mag[96] > 5.0 * mean_mag[64]);
    }
}

TEST_CASE("autocorrelation pitch separates man and woman voices") {
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        const double man = median_pitch(gen_event(EventClass::ManSpeech, seed));
        const double woman = median_pitch(gen_event(EventClass::WomanSpeech, seed));
        INFO("seed " << seed << ": man " << man << " Hz, woman " << woman << " Hz");
        REQUIRE(man < 160.0);
        REQUIRE(woman > 160.0);
    }
}

TEST_CASE("gen_event is deterministic per class and seed") {
    for (int c = 0; c < kNumClasses; ++c) {
        const EventClass cls = static_cast<EventClass>(c);
        Waveform a = gen_event(cls, 42);
        Waveform b = gen_event(cls, 42);
        REQUIRE(a.samples == b.samples);
        Waveform other = gen_event(cls, 43);
        REQUIRE(a.samples != other.samples);
    }
}

TEST_CASE("every class emits audio peaked at one half") {
    for (int c = 0; c < kNumClasses; ++c) {
        Waveform w = gen_event(static_cast<EventClass>(c), 7);
        REQUIRE(w.size() == 32000);
        REQUIRE(w.peak() == Catch::Approx(0.5).margin(1e-12));
        REQUIRE(w.rms() > 1e-6);
    }
}

TEST_CASE("gen_event validates duration and class names parse both ways") {
    REQUIRE_THROWS_AS(gen_event(EventClass::Car, 1, 0.5), ConfigError);
    REQUIRE_THROWS_AS(gen_event(EventClass::Car, 1, 11.0), ConfigError);
    for (int c = 0; c < kNumClasses; ++c)
        REQUIRE(class_from_name(class_name(static_cast<EventClass>(c))) == static_cast<EventClass>(c));
    REQUIRE_THROWS_AS(class_from_name("Helicopter"), DataError);
}

TEST_CASE("sed dataset is class balanced with unique ids and round-trips") {
    const auto records = read_manifest((fs::path(small_sed_dir()) / "sed_manifest.jsonl").string());
    REQUIRE(records.size() == 10 * 60);
    std::map<std::string, int> per_class, per_split;
    for (const auto& r : records) {
        per_class[r.class_name]++;
        per_split[r.split]++;
        REQUIRE_FALSE(r.snr_db.has_value());
        REQUIRE_FALSE(r.clean_path.has_value());
        REQUIRE(fs::exists(fs::path(small_sed_dir()) / r.path));
        const int expect_gender = gender_code(class_from_name(r.class_name));
        REQUIRE(r.gender == expect_gender);
    }
    REQUIRE(per_class.size() == 10);
    for (const auto& [name, count] : per_class) REQUIRE(count == 60);
    REQUIRE(per_split["train"] == 200);
    REQUIRE(per_split["val"] == 200);
    REQUIRE(per_split["test"] == 200);
}

TEST_CASE("sed dataset regeneration is byte-identical") {
    const std::string d2 = (fs::temp_directory_path() / "eqse_sed_small_again").string();
    fs::remove_all(d2);
    SedDataConfig cfg;
    cfg.root_seed = 1;
    cfg.out_dir = d2;
    cfg.train_per_class = 20;
    cfg.val_per_class = 20;
    cfg.test_per_class = 20;
    build_sed_dataset(cfg);
    REQUIRE(hash_file((fs::path(small_sed_dir()) / "sed_manifest.jsonl").string()) == hash_file((fs::path(d2) / "sed_manifest.jsonl").string()));
    REQUIRE(hash_file((fs::path(small_sed_dir()) / "sed/train/Car_0000.wav").string()) == hash_file((fs::path(d2) / "sed/train/Car_0000.wav").string()));
    REQUIRE(hash_file((fs::path(small_sed_dir()) / "sed/val/WomanSpeech_0019.wav").string()) == hash_file((fs::path(d2) / "sed/val/WomanSpeech_0019.wav").string()));
    fs::remove_all(d2);
}

TEST_CASE("se dataset stores verifiable mixtures") {
    const std::string d = (fs::temp_directory_path() / "eqse_se_small").string();
    fs::remove_all(d);
    SeDataConfig cfg;
    cfg.root_seed = 1;
    cfg.out_dir = d;
    cfg.train_pairs = 30;
    cfg.val_pairs = 10;
    cfg.test_pairs = 30;
    const auto records = build_se_dataset(cfg);
    REQUIRE(records.size() == 2 * (30 + 10 + 30));

    std::map<std::string, const ManifestRecord*> by_path;
    for (const auto& r : records) by_path[r.path] = &r;

    int men = 0, women = 0, noisy_count = 0;
    for (const auto& r : records) {
        if (!r.snr_db.has_value()) continue; // clean record
        ++noisy_count;
        REQUIRE(*r.snr_db >= -5.0);
        REQUIRE(*r.snr_db <= 20.0);
        REQUIRE(r.clean_path.has_value());
        REQUIRE(by_path.count(*r.clean_path) == 1); // references an existing clean record
        REQUIRE(by_path[*r.clean_path]->gender == r.gender);
        (r.gender == 0 ? men : women)++;

        // re-measure the SNR from the stored pair
        Waveform noisy = wav_read((fs::path(d) / r.path).string());
        Waveform clean = wav_read((fs::path(d) / *r.clean_path).string());
        double ce = 0, ne = 0;
        for (int64_t i = 0; i < noisy.size(); ++i) {
            const double nn = noisy.samples[static_cast<size_t>(i)] - clean.samples[static_cast<size_t>(i)];
            ce += clean.samples[static_cast<size_t>(i)] * clean.samples[static_cast<size_t>(i)];
            ne += nn * nn;
        }
        const double measured = 10.0 * std::log10(ce / ne);
        REQUIRE(measured == Catch::Approx(*r.snr_db).margin(0.1));
    }
    REQUIRE(noisy_count == 70);
    // binomial: 70 draws at p=0.5, allow 4 sigma (~17)
    REQUIRE(men >= 18);
    REQUIRE(women >= 18);
    fs::remove_all(d);
}

TEST_CASE("manifest reader rejects malformed rows") {
    const std::string path = (fs::temp_directory_path() / "eqse_manifest_bad.jsonl").string();
    auto write_line = [&](const std::string& line) {
        std::ofstream out(path, std::ios::trunc);
        out << line << "\n";
    };
    write_line("{not json");
    REQUIRE_THROWS_AS(read_manifest(path), DataError);
    write_line(R"({"clip_id":"a","path":"p","class":"Car","gender":null,"snr_db":null,"clean_path":null,"split":"train"})");
    REQUIRE_THROWS_AS(read_manifest(path), DataError); // missing seed
    write_line(R"({"clip_id":"a","path":"p","class":"Car","gender":null,"snr_db":null,"clean_path":null,"seed":1,"split":"train","extra":1})");
    REQUIRE_THROWS_AS(read_manifest(path), DataError); // unexpected key
    write_line(R"({"clip_id":"a","path":"p","class":"Jet","gender":null,"snr_db":null,"clean_path":null,"seed":1,"split":"train"})");
    REQUIRE_THROWS_AS(read_manifest(path), DataError); // unknown class
    {
        std::ofstream out(path, std::ios::trunc);
        out << R"({"clip_id":"a","path":"p","class":"Car","gender":null,"snr_db":null,"clean_path":null,"seed":1,"split":"train"})" << "\n";
        out << R"({"clip_id":"a","path":"q","class":"Car","gender":null,"snr_db":null,"clean_path":null,"seed":2,"split":"train"})" << "\n";
    }
    REQUIRE_THROWS_AS(read_manifest(path), DataError); // duplicate clip_id
    fs::remove(path);
}

TEST_CASE("a linear probe on mean log-mel features separates the classes") {
    const auto records = read_manifest((fs::path(small_sed_dir()) / "sed_manifest.jsonl").string());
    auto features = [&](const ManifestRecord& r) {
        Waveform w = wav_read((fs::path(small_sed_dir()) / r.path).string());
        Tensor<double> mel = log_mel(stft(w));
        Eigen::VectorXd f(65);
        for (int64_t m = 0; m < 64; ++m) {
            double acc = 0;
            for (int64_t t = 0; t < mel.shape[0]; ++t) acc += mel.at(t, m);
            f(m) = acc / static_cast<double>(mel.shape[0]);
        }
        f(64) = 1.0; // bias
        return f;
    };

    std::vector<Eigen::VectorXd> xs_train, xs_val;
    std::vector<int> ys_train, ys_val;
    for (const auto& r : records) {
        if (r.split == "test") continue;
        const int label = static_cast<int>(class_from_name(r.class_name));
        if (r.split == "train") {
            xs_train.push_back(features(r));
            ys_train.push_back(label);
        } else {
            xs_val.push_back(features(r));
            ys_val.push_back(label);
        }
    }
    const int n = static_cast<int>(xs_train.size());
    Eigen::MatrixXd X(n, 65);
    Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(n, 10);
    for (int i = 0; i < n; ++i) {
        X.row(i) = xs_train[static_cast<size_t>(i)];
        Y(i, ys_train[static_cast<size_t>(i)]) = 1.0;
    }
    // ridge regression to one-hot targets
    Eigen::MatrixXd A = X.transpose() * X + 1e-3 * Eigen::MatrixXd::Identity(65, 65);
    Eigen::MatrixXd W = A.ldlt().solve(X.transpose() * Y);

    int correct = 0;
    for (size_t i = 0; i < xs_val.size(); ++i) {
        Eigen::VectorXd scores = W.transpose() * xs_val[i];
        int best = 0;
        for (int c = 1; c < 10; ++c)
            if (scores(c) > scores(best)) best = c;
        if (best == ys_val[i]) ++correct;
    }
    const double acc = static_cast<double>(correct) / static_cast<double>(xs_val.size());
    INFO("linear probe accuracy " << acc);
    REQUIRE(acc > 0.6);
}
