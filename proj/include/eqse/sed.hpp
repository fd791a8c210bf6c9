#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "eqse/checkpoint.hpp"
#include "eqse/dsp.hpp"
#include "eqse/nn.hpp"
#include "eqse/synthdata.hpp"

namespace eqse {

/// Hierarchical transformer encoder over log-mel patches. 4x4 patching
/// followed by the per-stage merge factors gives a 32x reduction per axis,
/// so a (T, F) input pools down to a (T/32 x F/32) token grid of width D.
struct SedConfig {
    int n_mels = 64;
    int frames = 128; // clips are padded or cropped to this many STFT frames
    int patch_size = 4;
    std::vector<int> merge_factors = {1, 2, 2, 2};
    std::vector<int> dims = {32, 64, 96, 128};
    int blocks_per_stage = 1;
    int heads = 4;
    double dropout = 0.1;
    int n_classes = kNumClasses;

    int max_epochs = 30;
    int batch_size = 16;
    double lr = 1e-3;
    int patience = 5;

    int embed_dim() const { return dims.back(); }

    int reduction() const {
        int r = patch_size;
        for (int m : merge_factors) r *= m;
        return r;
    }

    void validate() const {
        if (merge_factors.size() != dims.size())
            throw ConfigError("sed: merge_factors and dims must have equal length");
        if (dims.empty()) throw ConfigError("sed: at least one stage required");
        if (reduction() != 32)
            throw ConfigError("sed: patch_size times merge factors must reduce by 32, got " +
                              std::to_string(reduction()));
        if (frames % 32 != 0 || n_mels % 32 != 0)
            throw ConfigError("sed: frames and n_mels must be divisible by 32, got " +
                              std::to_string(frames) + "x" + std::to_string(n_mels));
        for (int d : dims)
            if (d % heads != 0)
                throw ConfigError("sed: stage dim " + std::to_string(d) + " not divisible by " +
                                  std::to_string(heads) + " heads");
        for (size_t i = 0; i < merge_factors.size(); ++i) {
            if (merge_factors[i] != 1 && merge_factors[i] != 2)
                throw ConfigError("sed: merge factors must be 1 or 2");
            if (i == 0 && merge_factors[0] != 1)
                throw ConfigError("sed: first stage cannot merge");
            if (merge_factors[i] == 1 && i > 0 && dims[i] != dims[i - 1])
                throw ConfigError("sed: merge factor 1 requires equal adjacent dims");
        }
        if (blocks_per_stage < 1) throw ConfigError("sed: blocks_per_stage must be >= 1");
        if (batch_size < 1 || max_epochs < 1 || patience < 1 || lr <= 0)
            throw ConfigError("sed: invalid training hyperparameters");
    }
};

/// Log-mel features padded (with the silence floor) or cropped to a fixed
/// frame count, then standardized per clip.
template <typename Real>
Tensor<Real> sed_features(const Waveform& wave, const SedConfig& cfg) {
    Tensor<double> mel = log_mel(stft(wave), cfg.n_mels);
    const int64_t t_in = mel.shape[0];
    Tensor<double> fixed({cfg.frames, cfg.n_mels});
    const double silence = std::log(1e-6);
    for (int64_t t = 0; t < cfg.frames; ++t)
        for (int64_t m = 0; m < cfg.n_mels; ++m)
            fixed.at(t, m) = t < t_in ? mel.at(t, m) : silence;
    double mean = 0;
    for (double v : fixed.data) mean += v;
    mean /= static_cast<double>(fixed.data.size());
    double var = 0;
    for (double v : fixed.data) var += (v - mean) * (v - mean);
    const double inv_std = 1.0 / std::sqrt(var / static_cast<double>(fixed.data.size()) + 1e-12);
    Tensor<Real> out({cfg.frames, cfg.n_mels});
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = static_cast<Real>((fixed.data[i] - mean) * inv_std);
    return out;
}

template <typename Real>
struct SedModel {
    SedConfig cfg;
    ParamStore<Real> params;

    struct Forward {
        Var<Real> tokens;    // (grid_t * grid_f, D)
        Var<Real> embedding; // (1, D)
        Var<Real> logits;    // (1, n_classes)
        int64_t grid_t = 0, grid_f = 0;
    };

    static SedModel create(const SedConfig& cfg, uint64_t seed) {
        cfg.validate();
        SedModel model;
        model.cfg = cfg;
        nn::ParamFactory<Real> make(model.params, seed);
        const int p = cfg.patch_size;
        make.glorot("patch.w", {int64_t(p) * p, cfg.dims[0]});
        make.zeros("patch.b", {1, cfg.dims[0]});
        const int64_t n0 = int64_t(cfg.frames / p) * (cfg.n_mels / p);
        make.normal("pos", {n0, cfg.dims[0]}, 0.02);
        for (size_t s = 0; s < cfg.dims.size(); ++s) {
            const std::string sp = "s" + std::to_string(s) + ".";
            if (cfg.merge_factors[s] == 2) {
                make.glorot(sp + "merge.w", {4 * int64_t(cfg.dims[s - 1]), cfg.dims[s]});
                make.zeros(sp + "merge.b", {1, cfg.dims[s]});
            }
            const int64_t c = cfg.dims[s];
            for (int b = 0; b < cfg.blocks_per_stage; ++b) {
                const std::string bp = sp + "b" + std::to_string(b) + ".";
                make.constant(bp + "ln1.g", {1, c}, 1);
                make.zeros(bp + "ln1.b", {1, c});
                for (const char* m : {"q", "k", "v", "o"}) {
                    make.glorot(bp + "attn.w" + m, {c, c});
                    make.zeros(bp + "attn.b" + m, {1, c});
                }
                make.constant(bp + "ln2.g", {1, c}, 1);
                make.zeros(bp + "ln2.b", {1, c});
                make.glorot(bp + "mlp.w1", {c, 4 * c});
                make.zeros(bp + "mlp.b1", {1, 4 * c});
                make.glorot(bp + "mlp.w2", {4 * c, c});
                make.zeros(bp + "mlp.b2", {1, c});
            }
        }
        make.constant("norm.g", {1, cfg.embed_dim()}, 1);
        make.zeros("norm.b", {1, cfg.embed_dim()});
        make.glorot("head.w", {cfg.embed_dim(), cfg.n_classes});
        make.zeros("head.b", {1, cfg.n_classes});
        return model;
    }

    /// drop_rng == nullptr runs inference (dropout disabled).
    Forward forward(Tape<Real>& t, nn::ParamBinder<Real>& p, const Tensor<Real>& mel, Rng* drop_rng) const {
        if (mel.shape.size() != 2 || mel.shape[0] != cfg.frames || mel.shape[1] != cfg.n_mels)
            throw ConfigError("sed: expected input (" + std::to_string(cfg.frames) + "," +
                              std::to_string(cfg.n_mels) + "), got " + shape_str(mel.shape));
        const int64_t ps = cfg.patch_size;
        int64_t gt = cfg.frames / ps, gf = cfg.n_mels / ps;
        Var<Real> x = t.constant(mel);
        x = t.reshape(x, {gt, ps, gf, ps});
        x = t.transpose(x, {0, 2, 1, 3});
        x = t.reshape(x, {gt * gf, ps * ps});
        x = nn::linear(t, x, p("patch.w"), p("patch.b"));
        x = t.add(x, p("pos"));
        for (size_t s = 0; s < cfg.dims.size(); ++s) {
            const std::string sp = "s" + std::to_string(s) + ".";
            if (cfg.merge_factors[s] == 2) {
                const int64_t c_prev = cfg.dims[s - 1];
                x = t.reshape(x, {gt / 2, 2, gf / 2, 2, c_prev});
                x = t.transpose(x, {0, 2, 1, 3, 4});
                gt /= 2;
                gf /= 2;
                x = t.reshape(x, {gt * gf, 4 * c_prev});
                x = nn::linear(t, x, p(sp + "merge.w"), p(sp + "merge.b"));
            }
            for (int b = 0; b < cfg.blocks_per_stage; ++b) {
                const std::string bp = sp + "b" + std::to_string(b) + ".";
                nn::BlockWeights w;
                w.ln1_g = bp + "ln1.g";
                w.ln1_b = bp + "ln1.b";
                w.ln2_g = bp + "ln2.g";
                w.ln2_b = bp + "ln2.b";
                w.attn = {bp + "attn.wq", bp + "attn.bq", bp + "attn.wk", bp + "attn.bk",
                          bp + "attn.wv", bp + "attn.bv", bp + "attn.wo", bp + "attn.bo"};
                w.mlp_w1 = bp + "mlp.w1";
                w.mlp_b1 = bp + "mlp.b1";
                w.mlp_w2 = bp + "mlp.w2";
                w.mlp_b2 = bp + "mlp.b2";
                x = nn::transformer_block(t, p, x, cfg.heads, w, cfg.dropout, drop_rng);
            }
        }
        Forward f;
        f.tokens = nn::layer_norm_affine(t, x, p("norm.g"), p("norm.b"));
        f.embedding = t.mean(f.tokens, {0}, true);
        f.logits = nn::linear(t, f.embedding, p("head.w"), p("head.b"));
        f.grid_t = gt;
        f.grid_f = gf;
        return f;
    }

    /// Inference-only pass from features to (embedding, logits) values.
    std::pair<Tensor<Real>, Tensor<Real>> infer(const Tensor<Real>& mel) const {
        Tape<Real> tape;
        nn::ParamBinder<Real> bind(tape, params);
        Forward f = forward(tape, bind, mel, nullptr);
        return {f.embedding.val(), f.logits.val()};
    }
};

struct SedReport {
    double val_accuracy = 0;
    double gender_accuracy = 0;
    int epochs_run = 0;
    int best_epoch = -1;
    std::vector<double> val_history;
};

namespace detail {

struct LabeledClip {
    Tensor<float> features; // cached as float regardless of the training Real
    int label = 0;
    int gender = 2;
    std::string clip_id;
};

inline std::vector<LabeledClip> load_sed_clips(const std::vector<ManifestRecord>& records,
                                               const std::string& root, const SedConfig& cfg,
                                               const std::string& split) {
    std::vector<LabeledClip> clips;
    for (const auto& r : records) {
        if (r.split != split) continue;
        LabeledClip c;
        c.features = sed_features<float>(wav_read((std::filesystem::path(root) / r.path).string()), cfg);
        c.label = static_cast<int>(class_from_name(r.class_name));
        c.gender = r.gender;
        c.clip_id = r.clip_id;
        clips.push_back(std::move(c));
    }
    return clips;
}

} // namespace detail

/// Cross-entropy training with Adam and best-checkpoint early stopping on
/// val accuracy. On divergence the best weights survive in the model and a
/// NumericError describes the failing epoch.
template <typename Real>
std::pair<SedModel<Real>, SedReport> train_sed(const std::string& manifest_path, const SedConfig& cfg,
                                               uint64_t seed) {
    cfg.validate();
    const std::string root = std::filesystem::path(manifest_path).parent_path().string();
    const auto records = read_manifest(manifest_path);
    auto train = detail::load_sed_clips(records, root, cfg, "train");
    auto val = detail::load_sed_clips(records, root, cfg, "val");
    std::vector<int64_t> per_class_train(static_cast<size_t>(cfg.n_classes), 0);
    std::vector<int64_t> per_class_val(static_cast<size_t>(cfg.n_classes), 0);
    for (const auto& c : train) per_class_train[static_cast<size_t>(c.label)]++;
    for (const auto& c : val) per_class_val[static_cast<size_t>(c.label)]++;
    for (int k = 0; k < cfg.n_classes; ++k)
        if (per_class_train[static_cast<size_t>(k)] < 20 || per_class_val[static_cast<size_t>(k)] < 20)
            throw DataError("sed: need >= 20 train and val clips per class, class " +
                            std::string(class_name(static_cast<EventClass>(k))) + " has " +
                            std::to_string(per_class_train[static_cast<size_t>(k)]) + "/" +
                            std::to_string(per_class_val[static_cast<size_t>(k)]));

    SedModel<Real> model = SedModel<Real>::create(cfg, seed);
    Adam<Real> opt(cfg.lr);
    Rng shuffle_rng = Rng::seeded(seed, "sed:shuffle");
    Rng drop_rng = Rng::seeded(seed, "sed:dropout");

    auto val_metrics = [&](const SedModel<Real>& m) {
        int64_t correct = 0, gender_total = 0, gender_correct = 0;
        for (const auto& c : val) {
            auto [emb, logits] = m.infer(c.features.template cast<Real>());
            int pred = 0;
            for (int k = 1; k < cfg.n_classes; ++k)
                if (logits.data[static_cast<size_t>(k)] > logits.data[static_cast<size_t>(pred)]) pred = k;
            if (pred == c.label) ++correct;
            if (c.gender != 2) {
                ++gender_total;
                if (gender_code(static_cast<EventClass>(pred)) == c.gender) ++gender_correct;
            }
        }
        const double acc = static_cast<double>(correct) / static_cast<double>(val.size());
        const double gacc = gender_total == 0 ? 0.0 : static_cast<double>(gender_correct) / static_cast<double>(gender_total);
        return std::make_pair(acc, gacc);
    };

    SedReport report;
    std::vector<Tensor<Real>> best_values = model.params.values;
    double best_acc = -1;
    int stale = 0;
    std::vector<size_t> order(train.size());
    std::iota(order.begin(), order.end(), size_t(0));

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.randint(static_cast<uint64_t>(i))]);
        double epoch_loss = 0;
        int64_t batches = 0;
        try {
            for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
                const size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
                Tape<Real> tape;
                nn::ParamBinder<Real> bind(tape, model.params);
                Var<Real> loss = tape.constant(Tensor<Real>::scalar(0));
                for (size_t i = start; i < stop; ++i) {
                    const auto& clip = train[order[i]];
                    auto f = model.forward(tape, bind, clip.features.template cast<Real>(), &drop_rng);
                    loss = tape.add(loss, nn::nll_loss(tape, f.logits, clip.label));
                }
                loss = tape.mul(loss, tape.constant(Tensor<Real>::scalar(Real(1) / Real(stop - start))));
                tape.backward(loss);
                opt.step(model.params, bind.collect_grads());
                epoch_loss += static_cast<double>(loss.val().data[0]);
                ++batches;
            }
        } catch (const NumericError& e) {
            model.params.values = best_values;
            throw NumericError("sed: training diverged in epoch " + std::to_string(epoch + 1) + " (" +
                               e.what() + "); best weights from epoch " +
                               std::to_string(report.best_epoch + 1) + " retained");
        }
        auto [acc, gacc] = val_metrics(model);
        report.val_history.push_back(acc);
        report.epochs_run = epoch + 1;
        log_info("sed epoch " + std::to_string(epoch + 1) + ": loss " +
                 std::to_string(epoch_loss / std::max<int64_t>(1, batches)) + ", val acc " +
                 std::to_string(acc) + ", gender acc " + std::to_string(gacc));
        if (acc > best_acc) {
            best_acc = acc;
            best_values = model.params.values;
            report.best_epoch = epoch;
            stale = 0;
        } else if (++stale >= cfg.patience) {
            break;
        }
    }
    model.params.values = best_values;
    std::tie(report.val_accuracy, report.gender_accuracy) = val_metrics(model);
    return {std::move(model), std::move(report)};
}

// ---------------------------------------------------------------------------
// Embedding sets ("EQE1"): per-clip latent vectors with class/gender labels.

inline constexpr char kEmbeddingMagic[] = "EQE1";
inline constexpr uint32_t kEmbeddingVersion = 1;

struct EmbeddingRecord {
    std::string clip_id;
    uint8_t class_idx = 0;
    int gender = 2; // 0 man, 1 woman, 2 none
    std::vector<float> vec;
};

struct EmbeddingSet {
    uint32_t dim = 0;
    std::vector<EmbeddingRecord> records;
};

namespace detail {
// The file stores gender as 0=none, 1=man, 2=woman.
inline uint8_t gender_to_file(int g) { return g == 0 ? 1 : g == 1 ? 2 : 0; }
inline int gender_from_file(uint8_t g) { return g == 1 ? 0 : g == 2 ? 1 : 2; }
} // namespace detail

inline void write_embeddings(const std::string& path, const EmbeddingSet& set) {
    ByteWriter w;
    w.str(kEmbeddingMagic);
    w.u32(kEmbeddingVersion);
    w.u32(set.dim);
    w.u32(static_cast<uint32_t>(set.records.size()));
    for (const auto& r : set.records) {
        if (r.vec.size() != set.dim)
            throw IoError("embedding for " + r.clip_id + " has dim " + std::to_string(r.vec.size()) +
                          ", set dim " + std::to_string(set.dim));
        if (r.clip_id.size() > 0xffff) throw IoError("clip_id too long: " + r.clip_id);
        w.u16(static_cast<uint16_t>(r.clip_id.size()));
        w.str(r.clip_id);
        w.u8(r.class_idx);
        w.u8(detail::gender_to_file(r.gender));
        for (float v : r.vec) w.f32(v);
    }
    w.save(path);
}

inline EmbeddingSet read_embeddings(const std::string& path) {
    ByteReader r = ByteReader::from_file(path);
    if (r.str(4) != kEmbeddingMagic) throw IoError("bad embedding magic in " + path);
    if (r.u32() != kEmbeddingVersion) throw IoError("unsupported embedding version in " + path);
    EmbeddingSet set;
    set.dim = r.u32();
    const uint32_t count = r.u32();
    set.records.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        EmbeddingRecord rec;
        rec.clip_id = r.str(r.u16());
        rec.class_idx = r.u8();
        if (rec.class_idx >= kNumClasses)
            throw IoError("embedding record " + rec.clip_id + " has class index " +
                          std::to_string(int(rec.class_idx)));
        const uint8_t g = r.u8();
        if (g > 2) throw IoError("embedding record " + rec.clip_id + " has gender code " + std::to_string(int(g)));
        rec.gender = detail::gender_from_file(g);
        rec.vec.resize(set.dim);
        for (uint32_t d = 0; d < set.dim; ++d) rec.vec[d] = r.f32();
        set.records.push_back(std::move(rec));
    }
    if (!r.eof()) throw IoError("trailing bytes in embedding file " + path);
    return set;
}

/// One embedding per manifest record, in input order; inference-determinism
/// makes the output a pure function of (weights, clips).
template <typename Real>
EmbeddingSet extract_embeddings(const SedModel<Real>& model, const std::vector<ManifestRecord>& records,
                                const std::string& audio_root, int threads = 1) {
    EmbeddingSet set;
    set.dim = static_cast<uint32_t>(model.cfg.embed_dim());
    set.records.resize(records.size());
    nn::parallel_for(static_cast<int64_t>(records.size()), threads, [&](int64_t i) {
        const auto& r = records[static_cast<size_t>(i)];
        Tensor<Real> features =
            sed_features<Real>(wav_read((std::filesystem::path(audio_root) / r.path).string()), model.cfg);
        auto [emb, logits] = model.infer(features);
        EmbeddingRecord rec;
        rec.clip_id = r.clip_id;
        rec.class_idx = static_cast<uint8_t>(class_from_name(r.class_name));
        rec.gender = r.gender;
        rec.vec.resize(set.dim);
        for (uint32_t d = 0; d < set.dim; ++d) rec.vec[d] = static_cast<float>(emb.data[d]);
        set.records[static_cast<size_t>(i)] = std::move(rec);
    });
    return set;
}

} // namespace eqse
