#pragma once

// Query-conditioned speech enhancement: a magnitude-masking encoder/decoder
// over the STFT whose blocks are conditioned on a speech embedding chosen by
// a query policy. The attention policy scores two fixed "golden" embeddings
// against a pooled encoder key and trains the scorer jointly with the
// backbone; the other policies fix the query externally.

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <limits>
#include <mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "eqse/checkpoint.hpp"
#include "eqse/dsp.hpp"
#include "eqse/nn.hpp"
#include "eqse/queries.hpp"
#include "eqse/synthdata.hpp"

namespace eqse {

struct SeConfig {
    int64_t fft_size = 512;
    int64_t hop = 256;
    std::vector<int64_t> channels = {16, 32, 48, 64}; // encoder plan; decoder mirrors it
    int64_t kernel = 3;                               // square conv kernel, odd
    int64_t d_query = 128;                            // query embedding width
    int64_t d_att = 64;                               // attention hidden width
    double tau = 1.0;                                 // selection softmax temperature
    double lambda_spec = 0.5;                         // spectral L1 weight in the loss
    bool hard_train = false;                          // argmax selection during training
    double crop_seconds = 1.0;                        // training crop length
    int64_t batch_size = 4;
    int64_t max_epochs = 12;
    double lr = 1e-3;
    int64_t patience = 5;
    double grad_clip = 5.0; // global-norm ceiling per optimizer step, 0 disables

    int64_t bins() const { return fft_size / 2 + 1; }
    int64_t key_dim() const { return channels.front(); }
    int64_t crop_samples() const { return static_cast<int64_t>(std::llround(crop_seconds * kSampleRate)); }

    void validate() const {
        if (fft_size < 16 || (fft_size & (fft_size - 1)) != 0)
            throw ConfigError("se: fft_size must be a power of two >= 16, got " + std::to_string(fft_size));
        if (hop * 2 != fft_size)
            throw ConfigError("se: hop must be fft_size/2 for perfect reconstruction");
        if (channels.empty()) throw ConfigError("se: channel plan is empty");
        for (int64_t c : channels)
            if (c < 1) throw ConfigError("se: channel counts must be positive");
        if (kernel < 1 || kernel % 2 == 0)
            throw ConfigError("se: kernel must be odd and positive, got " + std::to_string(kernel));
        if (d_query < 1 || d_att < 1) throw ConfigError("se: d_query and d_att must be positive");
        if (tau <= 0) throw ConfigError("se: tau must be positive");
        if (lambda_spec < 0) throw ConfigError("se: lambda_spec must be >= 0");
        if (crop_seconds <= 0) throw ConfigError("se: crop_seconds must be positive");
        if (batch_size < 1) throw ConfigError("se: batch_size must be >= 1");
        if (max_epochs < 1 || max_epochs > 40)
            throw ConfigError("se: max_epochs must be in [1, 40], got " + std::to_string(max_epochs));
        if (patience < 1) throw ConfigError("se: patience must be >= 1");
        if (grad_clip < 0) throw ConfigError("se: grad_clip must be >= 0");
        // every stride-2 stage needs at least 2 frequency bins left
        int64_t f = bins();
        for (size_t i = 0; i < channels.size(); ++i) {
            if (f < 2) throw ConfigError("se: too many encoder blocks for " + std::to_string(bins()) + " bins");
            f = (f - 1) / 2 + 1;
        }
    }
};

// ---------------------------------------------------------------------------
// Query policies.

enum class PolicyKind { baseline, random_pool, random_two, golden_random, attention, gender_oracle, personalized };

inline const char* policy_name(PolicyKind k) {
    switch (k) {
        case PolicyKind::baseline: return "baseline";
        case PolicyKind::random_pool: return "ranl";
        case PolicyKind::random_two: return "ran";
        case PolicyKind::golden_random: return "gold";
        case PolicyKind::attention: return "att";
        case PolicyKind::gender_oracle: return "gen";
        case PolicyKind::personalized: return "per";
    }
    return "?";
}

inline PolicyKind policy_from_name(const std::string& name) {
    if (name == "baseline") return PolicyKind::baseline;
    if (name == "ranl") return PolicyKind::random_pool;
    if (name == "ran") return PolicyKind::random_two;
    if (name == "gold") return PolicyKind::golden_random;
    if (name == "att") return PolicyKind::attention;
    if (name == "gen") return PolicyKind::gender_oracle;
    if (name == "per") return PolicyKind::personalized;
    throw ConfigError("unknown policy: " + name + " (expected baseline|ranl|ran|gold|att|gen|per)");
}

/// gen./per. only swap the query at evaluation time; they reuse a model
/// trained with the attention policy.
inline bool policy_trainable(PolicyKind k) {
    return k != PolicyKind::gender_oracle && k != PolicyKind::personalized;
}

struct QueryPolicy {
    PolicyKind kind = PolicyKind::baseline;
    uint64_t seed = 1;
    GoldenQuerySet golden;                                            // gold. / att. / gen.
    std::vector<std::pair<int, std::vector<float>>> pool;             // ranl: (gender, embedding), 5 men + 5 women
    std::vector<std::pair<int, std::vector<float>>> targets;          // ran: all clean-target embeddings
    std::unordered_map<std::string, std::vector<float>> personalized; // per: clip_id -> clean embedding
};

struct ResolvedQuery {
    std::vector<float> vec;   // empty for baseline
    int gender = 2;           // gender of the chosen query
    std::string label = "none";
};

/// Draws the per-clip query for every policy except attention (which scores
/// its candidates inside the forward graph). `tag` isolates the random
/// stream per clip (and per epoch during training).
inline ResolvedQuery resolve_query(const QueryPolicy& p, const ManifestRecord& clip, const std::string& tag) {
    auto labelled = [](const std::vector<float>& v, int gender) {
        ResolvedQuery r;
        r.vec = v;
        r.gender = gender;
        r.label = gender == 0 ? "man" : gender == 1 ? "woman" : "none";
        return r;
    };
    switch (p.kind) {
        case PolicyKind::baseline:
            return {};
        case PolicyKind::attention:
            throw ConfigError("attention policy resolves queries inside the forward pass");
        case PolicyKind::random_pool: {
            if (p.pool.size() != 10)
                throw ConfigError("ranl policy needs a pool of 10 query embeddings, have " + std::to_string(p.pool.size()));
            Rng rng = Rng::seeded(p.seed, tag);
            const auto& e = p.pool[rng.randint(10)];
            return labelled(e.second, e.first);
        }
        case PolicyKind::random_two: {
            if (p.targets.size() < 2)
                throw ConfigError("ran policy needs at least 2 clean-target embeddings, have " + std::to_string(p.targets.size()));
            Rng rng = Rng::seeded(p.seed, tag);
            const uint64_t n = p.targets.size();
            const uint64_t a = rng.randint(n);
            uint64_t b = rng.randint(n - 1);
            if (b >= a) ++b; // two distinct candidates
            const auto& e = p.targets[rng.randint(2) == 0 ? a : b];
            return labelled(e.second, e.first);
        }
        case PolicyKind::golden_random: {
            if (p.golden.dim == 0) throw ConfigError("gold policy needs a golden query set");
            Rng rng = Rng::seeded(p.seed, tag);
            const bool woman = rng.randint(2) == 1;
            return labelled(woman ? p.golden.woman : p.golden.man, woman ? 1 : 0);
        }
        case PolicyKind::gender_oracle: {
            if (p.golden.dim == 0) throw ConfigError("gen policy needs a golden query set");
            if (clip.gender != 0 && clip.gender != 1)
                throw DataError("gen policy needs a speech clip with known gender: " + clip.clip_id);
            return labelled(clip.gender == 1 ? p.golden.woman : p.golden.man, clip.gender);
        }
        case PolicyKind::personalized: {
            auto it = p.personalized.find(clip.clip_id);
            if (it == p.personalized.end())
                throw DataError("per policy has no clean-target embedding for clip " + clip.clip_id);
            return labelled(it->second, clip.gender);
        }
    }
    throw ConfigError("unhandled policy");
}

// ---------------------------------------------------------------------------
// Model.

template <typename Real>
struct SeModel {
    SeConfig cfg;
    PolicyKind kind = PolicyKind::baseline; // decides which parameter groups exist
    ParamStore<Real> params;

    bool has_injectors() const { return kind != PolicyKind::baseline; }
    bool has_scorer() const { return kind == PolicyKind::attention; }

    /// Output channels of decoder block i; the plan mirrors the encoder and
    /// the final block stays at the first encoder width.
    int64_t decoder_out(size_t i) const {
        const size_t e = cfg.channels.size();
        return i + 2 <= e ? cfg.channels[e - 2 - i] : cfg.channels[0];
    }

    static SeModel create(const SeConfig& cfg, PolicyKind kind, uint64_t seed) {
        cfg.validate();
        if (!policy_trainable(kind))
            throw ConfigError(std::string("se: cannot build a model for evaluation-only policy ") + policy_name(kind));
        SeModel m;
        m.cfg = cfg;
        m.kind = kind;
        nn::ParamFactory<Real> make(m.params, seed);
        const int64_t k = cfg.kernel;
        auto conv = [&](const std::string& name, int64_t cout, int64_t cin, int64_t kk) {
            const double fan_in = static_cast<double>(cin * kk * kk);
            const double fan_out = static_cast<double>(cout * kk * kk);
            make.normal(name + ".w", {cout, cin, kk, kk}, std::sqrt(2.0 / (fan_in + fan_out)));
            make.zeros(name + ".b", {cout});
        };
        int64_t cin = 1;
        for (size_t i = 0; i < cfg.channels.size(); ++i) {
            conv("enc" + std::to_string(i), cfg.channels[i], cin, k);
            cin = cfg.channels[i];
        }
        for (size_t i = 0; i < cfg.channels.size(); ++i) {
            const int64_t cout = m.decoder_out(i);
            conv("dec" + std::to_string(i), cout, cin, k);
            cin = cout;
        }
        // gate starts open (mask ~ 0.88): training begins at the pass-through
        // plateau and refines downward instead of saturating the sigmoid
        make.normal("mask.w", {1, cin, 1, 1}, std::sqrt(2.0 / static_cast<double>(cin + 1)));
        make.constant("mask.b", {1}, Real(2));
        if (kind != PolicyKind::baseline) {
            auto injector = [&](const std::string& name, int64_t c) {
                make.glorot("inj." + name + ".w", {cfg.d_query, c});
                make.zeros("inj." + name + ".b", {c});
            };
            for (size_t i = 0; i < cfg.channels.size(); ++i) injector("enc" + std::to_string(i), cfg.channels[i]);
            for (size_t i = 0; i < cfg.channels.size(); ++i) injector("dec" + std::to_string(i), m.decoder_out(i));
        }
        if (kind == PolicyKind::attention) {
            make.glorot("scorer.w1", {cfg.key_dim(), cfg.d_att});
            make.glorot("scorer.w2", {cfg.d_query, cfg.d_att});
            make.glorot("scorer.v", {cfg.d_att, 1});
        }
        return m;
    }
};

/// Extra parameters the query mechanism adds on top of the plain backbone.
inline int64_t query_overhead_params(const SeConfig& cfg) {
    const auto base = SeModel<float>::create(cfg, PolicyKind::baseline, 0);
    const auto att = SeModel<float>::create(cfg, PolicyKind::attention, 0);
    return att.params.total_numel() - base.params.total_numel();
}

// ---------------------------------------------------------------------------
// Attention selection.

template <typename Real>
struct AttentionSelection {
    Var<Real> combined; // (1, D): soft mixture while training, chosen query at inference
    Var<Real> weights;  // (1, 2) softmax weights (diagnostic in hard mode)
    double score_man = 0, score_woman = 0;
    int hard_choice = 0; // 0 man, 1 woman; ties go to man
};

/// score_i = v^T tanh(W1 key + W2 q_i). Soft mode mixes the candidates by
/// softmax(score/tau) so the scorer receives gradients; hard mode picks the
/// argmax and cuts the scorer out of the gradient path.
template <typename Real>
AttentionSelection<Real> attention_select(Tape<Real>& t, Var<Real> key, Var<Real> q_man, Var<Real> q_woman,
                                          Var<Real> w1, Var<Real> w2, Var<Real> v, double tau, bool hard) {
    if (tau <= 0) throw ConfigError("attention_select: tau must be positive");
    Var<Real> key_proj = t.matmul(key, w1);
    auto score = [&](Var<Real> q) { return t.matmul(t.tanh(t.add(key_proj, t.matmul(q, w2))), v); };
    Var<Real> s_man = score(q_man);
    Var<Real> s_woman = score(q_woman);
    AttentionSelection<Real> out;
    out.score_man = static_cast<double>(s_man.val().data[0]);
    out.score_woman = static_cast<double>(s_woman.val().data[0]);
    out.hard_choice = out.score_man >= out.score_woman ? 0 : 1;
    Var<Real> scores = t.concat({s_man, s_woman}, 1);
    out.weights = t.softmax(t.mul(scores, t.scalar(static_cast<Real>(1.0 / tau))), 1);
    if (hard) {
        out.combined = out.hard_choice == 0 ? q_man : q_woman;
    } else {
        Var<Real> w_man = t.slice(out.weights, {0, 0}, {1, 1});
        Var<Real> w_woman = t.slice(out.weights, {0, 1}, {1, 2});
        out.combined = t.add(t.mul(q_man, w_man), t.mul(q_woman, w_woman));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Forward graph.

/// Query input of one forward pass: either a fixed embedding (possibly empty
/// for no injection) or the two attention candidates.
struct SeQuery {
    bool attention = false;
    std::vector<float> fixed;
    std::vector<float> man, woman;

    static SeQuery none() { return {}; }
    static SeQuery from(const ResolvedQuery& r) {
        SeQuery q;
        q.fixed = r.vec;
        return q;
    }
    static SeQuery candidates(const GoldenQuerySet& g) {
        SeQuery q;
        q.attention = true;
        q.man.assign(g.man.begin(), g.man.end());
        q.woman.assign(g.woman.begin(), g.woman.end());
        return q;
    }
};

template <typename Real>
struct SeForward {
    Var<Real> enhanced;   // (orig_len,) time signal
    Var<Real> mask;       // (T, F) in [0, 1]
    Var<Real> masked_mag; // (T, F) mask * noisy magnitude
    Var<Real> key;        // (1, key_dim) pooled first-block features
    Var<Real> weights;    // (1, 2) attention weights
    bool has_key = false, has_weights = false;
    double score_man = 0, score_woman = 0;
    int hard_choice = -1;
    // per-block taps for structural tests: pre-nonlinearity, post-activation
    // (pre-injection), and block output (post-injection)
    std::vector<Var<Real>> enc_pre, enc_act, enc_out, dec_pre, dec_act, dec_out;
};

namespace detail {

template <typename Real>
Tensor<Real> row_tensor(const std::vector<float>& v) {
    Tensor<Real> t({1, static_cast<int64_t>(v.size())});
    for (size_t i = 0; i < v.size(); ++i) t.data[i] = static_cast<Real>(v[i]);
    return t;
}

} // namespace detail

/// STFT magnitude in, masked complex spectrum out through WOLA synthesis.
/// The mask override skips the network entirely (unit-test hook).
template <typename Real>
SeForward<Real> se_forward(Tape<Real>& t, nn::ParamBinder<Real>& P, const SeModel<Real>& m,
                           const Spectrogram& noisy, const SeQuery& q, bool soft_selection,
                           const Tensor<Real>* mask_override = nullptr) {
    const SeConfig& cfg = m.cfg;
    if (noisy.fft_size != cfg.fft_size || noisy.hop != cfg.hop)
        throw ConfigError("se_forward: spectrogram framing (" + std::to_string(noisy.fft_size) + "/" +
                          std::to_string(noisy.hop) + ") does not match config (" + std::to_string(cfg.fft_size) +
                          "/" + std::to_string(cfg.hop) + ")");
    const int64_t T = noisy.frames(), F = noisy.bins();
    SeForward<Real> out;

    Var<Real> re = t.constant(noisy.re.template cast<Real>());
    Var<Real> im = t.constant(noisy.im.template cast<Real>());
    Var<Real> mag = t.constant(noisy.magnitude().template cast<Real>());

    if (mask_override != nullptr) {
        if (mask_override->shape != Shape{T, F})
            throw ConfigError("se_forward: mask override must be shaped " + shape_str({T, F}) + ", got " +
                              shape_str(mask_override->shape));
        out.mask = t.constant(*mask_override);
    } else {
        const bool wants_query = q.attention || !q.fixed.empty();
        if (wants_query && !m.has_injectors())
            throw ConfigError("se_forward: model has no injectors; train a non-baseline policy to use queries");
        if (q.attention && !m.has_scorer())
            throw ConfigError("se_forward: attention selection needs a model trained with the attention policy");
        auto check_dim = [&](const std::vector<float>& v, const char* which) {
            if (static_cast<int64_t>(v.size()) != cfg.d_query)
                throw ConfigError(std::string("se_forward: ") + which + " query dim " + std::to_string(v.size()) +
                                  " != configured " + std::to_string(cfg.d_query));
        };
        if (!q.fixed.empty()) check_dim(q.fixed, "fixed");
        if (q.attention) {
            check_dim(q.man, "man");
            check_dim(q.woman, "woman");
        }

        const int64_t pad = cfg.kernel / 2;
        const size_t E = cfg.channels.size();
        // log compression keeps the feature scale clip-independent; the mask
        // still multiplies the raw spectrum
        Tensor<Real> compressed = noisy.magnitude().template cast<Real>();
        for (auto& v : compressed.data) v = std::log1p(v);
        Var<Real> x = t.reshape(t.constant(std::move(compressed)), {1, T, F});
        Var<Real> query; // selected embedding, valid when injecting
        bool have_query = false;

        auto inject = [&](const std::string& name, Var<Real> feats) {
            if (!have_query) return feats;
            Var<Real> proj = t.add(t.matmul(query, P("inj." + name + ".w")), P("inj." + name + ".b"));
            const int64_t c = feats.shape()[0];
            return t.add(feats, t.reshape(proj, {c, 1, 1}));
        };

        for (size_t i = 0; i < E; ++i) {
            const std::string name = "enc" + std::to_string(i);
            x = t.conv2d(x, P(name + ".w"), 1, 2, pad, pad);
            x = t.add(x, t.reshape(P(name + ".b"), {cfg.channels[i], 1, 1}));
            out.enc_pre.push_back(x);
            x = t.relu(x);
            out.enc_act.push_back(x);
            if (i == 0) {
                // the attention key never sees injected features
                out.key = t.reshape(t.mean(x, {1, 2}, false), {1, cfg.key_dim()});
                out.has_key = true;
                if (q.attention) {
                    auto sel = attention_select(t, out.key, t.constant(detail::row_tensor<Real>(q.man)),
                                                t.constant(detail::row_tensor<Real>(q.woman)), P("scorer.w1"),
                                                P("scorer.w2"), P("scorer.v"), cfg.tau, !soft_selection);
                    query = sel.combined;
                    have_query = true;
                    out.weights = sel.weights;
                    out.has_weights = true;
                    out.score_man = sel.score_man;
                    out.score_woman = sel.score_woman;
                    out.hard_choice = sel.hard_choice;
                } else if (!q.fixed.empty()) {
                    query = t.constant(detail::row_tensor<Real>(q.fixed));
                    have_query = true;
                }
            }
            x = inject(name, x);
            out.enc_out.push_back(x);
        }

        for (size_t i = 0; i < E; ++i) {
            const std::string name = "dec" + std::to_string(i);
            const bool has_skip = i + 2 <= E;
            const int64_t target_f = has_skip ? out.enc_out[E - 2 - i].shape()[2] : F;
            x = t.upsample_f2(x, target_f);
            x = t.conv2d(x, P(name + ".w"), 1, 1, pad, pad);
            x = t.add(x, t.reshape(P(name + ".b"), {m.decoder_out(i), 1, 1}));
            if (has_skip) x = t.add(x, out.enc_out[E - 2 - i]);
            out.dec_pre.push_back(x);
            x = t.relu(x);
            out.dec_act.push_back(x);
            x = inject(name, x);
            out.dec_out.push_back(x);
        }

        Var<Real> logits = t.conv2d(x, P("mask.w"), 1, 1, 0, 0);
        logits = t.add(logits, t.reshape(P("mask.b"), {1, 1, 1}));
        out.mask = t.reshape(t.sigmoid(logits), {T, F});
    }

    out.masked_mag = t.mul(out.mask, mag);
    out.enhanced = t.istft(t.mul(out.mask, re), t.mul(out.mask, im), cfg.fft_size, cfg.hop, noisy.orig_len,
                           noisy.pad_front);
    return out;
}

/// Training objective: maximize SI-SDR of the synthesized signal while
/// pinning the masked magnitude to the clean magnitude with an L1 term.
template <typename Real>
Var<Real> se_loss(Tape<Real>& t, const SeForward<Real>& f, const Waveform& clean, double lambda_spec,
                  int64_t fft_size, int64_t hop) {
    if (clean.size() != f.enhanced.numel())
        throw DataError("se_loss: clean reference length " + std::to_string(clean.size()) +
                        " != enhanced length " + std::to_string(f.enhanced.numel()));
    Tensor<Real> ref({clean.size()});
    double ref_energy = 0;
    for (int64_t i = 0; i < clean.size(); ++i) {
        const double v = clean.samples[static_cast<size_t>(i)];
        ref[i] = static_cast<Real>(v);
        ref_energy += v * v;
    }
    if (ref_energy < 1e-12) throw DataError("se_loss: clean reference is silent");
    Var<Real> s = t.constant(std::move(ref));
    Var<Real> dot = t.reshape(t.sum_all(t.mul(f.enhanced, s)), {1});
    Var<Real> alpha = t.mul(dot, t.scalar(static_cast<Real>(1.0 / ref_energy)));
    Var<Real> target = t.mul(s, alpha);
    Var<Real> err = t.sub(f.enhanced, target);
    Var<Real> eps = t.scalar(static_cast<Real>(1e-9));
    Var<Real> ratio = t.div(t.add(t.reshape(t.sum_all(t.square(target)), {1}), eps),
                            t.add(t.reshape(t.sum_all(t.square(err)), {1}), eps));
    Var<Real> si_sdr_db = t.mul(t.log(ratio), t.scalar(static_cast<Real>(10.0 / std::log(10.0))));

    const Spectrogram clean_spec = stft(clean, fft_size, hop);
    Var<Real> clean_mag = t.constant(clean_spec.magnitude().template cast<Real>());
    Var<Real> l1 = t.reshape(t.mean_all(t.abs(t.sub(f.masked_mag, clean_mag))), {1});
    return t.add(t.mul(si_sdr_db, t.scalar(static_cast<Real>(-1))), t.mul(l1, t.scalar(static_cast<Real>(lambda_spec))));
}

// ---------------------------------------------------------------------------
// Training.

struct SeTrainReport {
    double best_val_si_sdr = -std::numeric_limits<double>::infinity();
    double noisy_val_si_sdr = 0; // SI-SDR of the unprocessed noisy val clips
    int epochs_run = 0;
    int best_epoch = -1;
    std::vector<double> val_history;
};

namespace detail {

struct SePair {
    ManifestRecord record;
    Waveform noisy, clean;
};

inline std::vector<SePair> load_se_pairs(const std::string& manifest_path, const std::string& split) {
    namespace fs = std::filesystem;
    const fs::path root = fs::path(manifest_path).parent_path();
    std::vector<SePair> pairs;
    for (const auto& r : read_manifest(manifest_path)) {
        if (r.split != split || !r.clean_path) continue;
        SePair p;
        p.record = r;
        p.noisy = wav_read((root / r.path).string());
        p.clean = wav_read((root / *r.clean_path).string());
        if (p.noisy.size() != p.clean.size())
            throw DataError("noisy/clean length mismatch for clip " + r.clip_id);
        pairs.push_back(std::move(p));
    }
    return pairs;
}

inline Waveform crop_wave(const Waveform& w, int64_t start, int64_t len) {
    Waveform out;
    out.samples.assign(w.samples.begin() + start, w.samples.begin() + start + len);
    return out;
}

/// Preprocessed clip ready for a forward pass.
struct SeWorkItem {
    Spectrogram noisy_spec;
    Waveform clean;
    SeQuery query;
};

/// Bounded single-producer/single-consumer queue; the producer prepares
/// crops and spectra while the consumer runs the tape.
class BoundedQueue {
public:
    explicit BoundedQueue(size_t cap) : cap_(cap) {}

    bool push(SeWorkItem item) {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] { return items_.size() < cap_ || aborted_; });
        if (aborted_) return false;
        items_.push_back(std::move(item));
        cv_.notify_all();
        return true;
    }

    bool pop(SeWorkItem& out) {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] { return !items_.empty() || closed_ || aborted_; });
        if (items_.empty()) return false;
        out = std::move(items_.front());
        items_.pop_front();
        cv_.notify_all();
        return true;
    }

    void close() {
        std::lock_guard<std::mutex> lk(mu_);
        closed_ = true;
        cv_.notify_all();
    }

    void abort() {
        std::lock_guard<std::mutex> lk(mu_);
        aborted_ = true;
        cv_.notify_all();
    }

private:
    std::mutex mu_;
    std::condition_variable cv_;
    std::deque<SeWorkItem> items_;
    size_t cap_;
    bool closed_ = false, aborted_ = false;
};

/// Mean SI-SDR of full-length enhanced val clips; hard selection for the
/// attention policy.
template <typename Real>
double validate_se(const SeModel<Real>& model, const std::vector<SePair>& val, const QueryPolicy& policy) {
    double total = 0;
    for (const auto& p : val) {
        Tape<Real> t;
        nn::ParamBinder<Real> bind(t, model.params);
        SeQuery q = policy.kind == PolicyKind::attention
                        ? SeQuery::candidates(policy.golden)
                        : SeQuery::from(resolve_query(policy, p.record, "policy:" + p.record.clip_id));
        auto f = se_forward(t, bind, model, stft(p.noisy, model.cfg.fft_size, model.cfg.hop), q, false);
        Waveform enhanced;
        enhanced.samples.resize(static_cast<size_t>(f.enhanced.numel()));
        const Tensor<Real>& e = f.enhanced.val();
        for (int64_t i = 0; i < e.numel(); ++i) enhanced.samples[static_cast<size_t>(i)] = static_cast<double>(e[i]);
        total += si_sdr(p.clean, enhanced);
    }
    return total / static_cast<double>(val.size());
}

} // namespace detail

template <typename Real>
SeModel<Real> train_se(const std::string& manifest_path, const QueryPolicy& policy, const SeConfig& cfg,
                       uint64_t seed, SeTrainReport* report = nullptr) {
    cfg.validate();
    if (!policy_trainable(policy.kind))
        throw ConfigError(std::string("se: policy ") + policy_name(policy.kind) +
                          " is evaluation-only; train with baseline|ranl|ran|gold|att");
    if (policy.kind == PolicyKind::attention && static_cast<int64_t>(policy.golden.dim) != cfg.d_query)
        throw ConfigError("se: golden query dim " + std::to_string(policy.golden.dim) + " != configured d_query " +
                          std::to_string(cfg.d_query));

    auto train = detail::load_se_pairs(manifest_path, "train");
    auto val = detail::load_se_pairs(manifest_path, "val");
    if (train.empty() || val.empty())
        throw DataError("se: manifest " + manifest_path + " needs noisy train and val clips");

    SeModel<Real> model = SeModel<Real>::create(cfg, policy.kind, seed);
    Adam<Real> opt(cfg.lr);
    Rng shuffle_rng = Rng::seeded(seed, "se:shuffle");
    Rng crop_rng = Rng::seeded(seed, "se:crop");
    const int64_t crop = cfg.crop_samples();

    SeTrainReport local;
    SeTrainReport& rep = report ? *report : local;
    for (const auto& p : val) rep.noisy_val_si_sdr += si_sdr(p.clean, p.noisy);
    rep.noisy_val_si_sdr /= static_cast<double>(val.size());

    ParamStore<Real> best = model.params;
    int since_best = 0;
    std::vector<size_t> order(train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.randint(i)]);

        // producer prepares crops, spectra, and queries while the consumer
        // runs the tape; items arrive in shuffled order, so the run is
        // identical to a serial loop
        detail::BoundedQueue queue(static_cast<size_t>(2 * cfg.batch_size));
        std::exception_ptr producer_err;
        std::thread producer([&] {
            try {
                for (size_t idx : order) {
                    const auto& p = train[idx];
                    int64_t start = 0;
                    if (p.noisy.size() > crop)
                        start = static_cast<int64_t>(crop_rng.randint(static_cast<uint64_t>(p.noisy.size() - crop + 1)));
                    const int64_t len = std::min(crop, p.noisy.size());
                    detail::SeWorkItem w;
                    w.noisy_spec = stft(detail::crop_wave(p.noisy, start, len), cfg.fft_size, cfg.hop);
                    w.clean = detail::crop_wave(p.clean, start, len);
                    const std::string tag = "policy:" + p.record.clip_id + ":e" + std::to_string(epoch);
                    w.query = policy.kind == PolicyKind::attention
                                  ? SeQuery::candidates(policy.golden)
                                  : SeQuery::from(resolve_query(policy, p.record, tag));
                    if (!queue.push(std::move(w))) return;
                }
            } catch (...) {
                producer_err = std::current_exception();
            }
            queue.close();
        });

        try {
            std::vector<Tensor<Real>> acc;
            size_t in_batch = 0, consumed = 0;
            detail::SeWorkItem w;
            while (queue.pop(w)) {
                if (in_batch == 0) {
                    acc.clear();
                    for (const auto& v : model.params.values) acc.push_back(Tensor<Real>::zeros(v.shape));
                }
                const size_t bn = std::min(static_cast<size_t>(cfg.batch_size), order.size() - (consumed - in_batch));
                Tape<Real> t;
                nn::ParamBinder<Real> bind(t, model.params);
                auto f = se_forward(t, bind, model, w.noisy_spec, w.query, !cfg.hard_train);
                Var<Real> loss = se_loss(t, f, w.clean, cfg.lambda_spec, cfg.fft_size, cfg.hop);
                t.backward(t.mul(loss, t.scalar(static_cast<Real>(1.0 / static_cast<double>(bn)))));
                auto grads = bind.collect_grads();
                for (size_t g = 0; g < grads.size(); ++g)
                    for (size_t e = 0; e < grads[g].data.size(); ++e) acc[g].data[e] += grads[g].data[e];
                ++consumed;
                if (++in_batch == bn) {
                    if (cfg.grad_clip > 0) {
                        double sq = 0;
                        for (const auto& g : acc)
                            for (const Real v : g.data) sq += static_cast<double>(v) * static_cast<double>(v);
                        const double norm = std::sqrt(sq);
                        if (norm > cfg.grad_clip) {
                            const Real scale = static_cast<Real>(cfg.grad_clip / norm);
                            for (auto& g : acc)
                                for (Real& v : g.data) v *= scale;
                        }
                    }
                    opt.step(model.params, acc);
                    in_batch = 0;
                }
            }
        } catch (const NumericError& e) {
            queue.abort();
            producer.join();
            model.params = best;
            throw NumericError("se: training diverged in epoch " + std::to_string(epoch) + ": " + e.what());
        } catch (...) {
            queue.abort();
            producer.join();
            throw;
        }
        producer.join();
        if (producer_err) std::rethrow_exception(producer_err);

        const double val_si_sdr = detail::validate_se(model, val, policy);
        rep.val_history.push_back(val_si_sdr);
        rep.epochs_run = epoch + 1;
        log_info("se[" + std::string(policy_name(policy.kind)) + "] epoch " + std::to_string(epoch) +
                 " val si-sdr " + std::to_string(val_si_sdr));
        if (val_si_sdr > rep.best_val_si_sdr) {
            rep.best_val_si_sdr = val_si_sdr;
            rep.best_epoch = epoch;
            best = model.params;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    model.params = best;
    return model;
}

// ---------------------------------------------------------------------------
// Checkpoints.

template <typename Real>
void save_se_model(const std::string& path, const SeModel<Real>& model) {
    save_checkpoint(path, model.params);
}

/// Kind is recovered from which parameter groups the checkpoint contains;
/// names and shapes are validated against a freshly built twin.
template <typename Real>
SeModel<Real> load_se_model(const std::string& path, const SeConfig& cfg) {
    ParamStore<Real> loaded = load_checkpoint<Real>(path);
    auto has = [&](const std::string& n) {
        return std::find(loaded.names.begin(), loaded.names.end(), n) != loaded.names.end();
    };
    PolicyKind kind = PolicyKind::baseline;
    if (has("scorer.w1")) kind = PolicyKind::attention;
    else if (has("inj.enc0.w")) kind = PolicyKind::golden_random;
    SeModel<Real> expected = SeModel<Real>::create(cfg, kind, 0);
    if (loaded.names != expected.params.names)
        throw ConfigError("se checkpoint " + path + " does not match the configured architecture");
    for (size_t i = 0; i < loaded.values.size(); ++i)
        if (loaded.values[i].shape != expected.params.values[i].shape)
            throw ConfigError("se checkpoint parameter " + loaded.names[i] + " has shape " +
                              shape_str(loaded.values[i].shape) + ", expected " +
                              shape_str(expected.params.values[i].shape));
    expected.params = std::move(loaded);
    return expected;
}

// ---------------------------------------------------------------------------
// Evaluation.

struct ClipResult {
    std::string clip_id;
    int gender = 2;
    double snr_db = 0;
    double ssnr_db = 0;
    double si_sdr_db = 0;
    double noisy_si_sdr_db = 0;
    std::string selected = "none";
    bool correct = false;
};

struct MetricsReport {
    std::string policy;
    std::vector<ClipResult> rows;
    double mean_ssnr = 0;
    double mean_si_sdr = 0;
    double mean_noisy_si_sdr = 0;
    double selection_accuracy = 0;
};

/// Enhance one clip outside the training loop. For the attention policy the
/// selection is hard; `selected_label` reports what was injected.
template <typename Real>
Waveform enhance_clip(const SeModel<Real>& model, const Waveform& noisy, const QueryPolicy& policy,
                      const ManifestRecord& meta, std::string* selected_label = nullptr) {
    Tape<Real> t;
    nn::ParamBinder<Real> bind(t, model.params);
    SeQuery q;
    std::string label = "none";
    if (policy.kind == PolicyKind::attention) {
        q = SeQuery::candidates(policy.golden);
    } else if (policy.kind != PolicyKind::baseline) {
        ResolvedQuery r = resolve_query(policy, meta, "policy:" + meta.clip_id);
        q = SeQuery::from(r);
        label = r.label;
    }
    auto f = se_forward(t, bind, model, stft(noisy, model.cfg.fft_size, model.cfg.hop), q, /*soft=*/false);
    if (policy.kind == PolicyKind::attention) label = f.hard_choice == 0 ? "man" : "woman";
    if (selected_label) *selected_label = label;
    Waveform out;
    out.samples.resize(static_cast<size_t>(f.enhanced.numel()));
    const Tensor<Real>& e = f.enhanced.val();
    for (int64_t i = 0; i < e.numel(); ++i) out.samples[static_cast<size_t>(i)] = static_cast<double>(e[i]);
    return out;
}

template <typename Real>
MetricsReport evaluate_se(const SeModel<Real>& model, const std::string& manifest_path, const QueryPolicy& policy,
                          const std::string& split = "test", int threads = 1) {
    auto pairs = detail::load_se_pairs(manifest_path, split);
    if (pairs.empty()) throw DataError("se: no noisy " + split + " clips in " + manifest_path);
    MetricsReport rep;
    rep.policy = policy_name(policy.kind);
    rep.rows.resize(pairs.size());
    nn::parallel_for(static_cast<int64_t>(pairs.size()), threads, [&](int64_t i) {
        const auto& p = pairs[static_cast<size_t>(i)];
        ClipResult& row = rep.rows[static_cast<size_t>(i)];
        row.clip_id = p.record.clip_id;
        row.gender = p.record.gender;
        row.snr_db = p.record.snr_db.value_or(0);
        std::string label;
        const Waveform enhanced = enhance_clip(model, p.noisy, policy, p.record, &label);
        row.selected = label;
        row.ssnr_db = ssnr(p.clean, enhanced);
        row.si_sdr_db = si_sdr(p.clean, enhanced);
        row.noisy_si_sdr_db = si_sdr(p.clean, p.noisy);
        row.correct = (label == "man" && p.record.gender == 0) || (label == "woman" && p.record.gender == 1);
    });
    for (const auto& r : rep.rows) {
        rep.mean_ssnr += r.ssnr_db;
        rep.mean_si_sdr += r.si_sdr_db;
        rep.mean_noisy_si_sdr += r.noisy_si_sdr_db;
        rep.selection_accuracy += r.correct ? 1 : 0;
    }
    const double n = static_cast<double>(rep.rows.size());
    rep.mean_ssnr /= n;
    rep.mean_si_sdr /= n;
    rep.mean_noisy_si_sdr /= n;
    rep.selection_accuracy /= n;
    return rep;
}

inline void write_metrics_csv(const std::string& path, const std::vector<MetricsReport>& reports) {
    std::string out = "policy,clip_id,gender,snr_db,ssnr_db,si_sdr_db,selected,correct_selection\n";
    char buf[160];
    for (const auto& rep : reports)
        for (const auto& r : rep.rows) {
            std::snprintf(buf, sizeof(buf), "%.6f,%.6f,%.6f", r.snr_db, r.ssnr_db, r.si_sdr_db);
            out += rep.policy + "," + r.clip_id + "," + (r.gender == 2 ? "none" : gender_name(r.gender)) + "," +
                   buf + "," + r.selected + "," + (r.correct ? "1" : "0") + "\n";
        }
    ByteWriter w;
    w.str(out);
    w.save(path);
}

// ---------------------------------------------------------------------------
// Ablation.

struct AblationRow {
    std::string policy;
    double mean_ssnr = 0;
    double mean_si_sdr = 0;
    double mean_noisy_si_sdr = 0;
    double si_sdr_gain = 0;
    double selection_accuracy = 0;
};

struct AblateInputs {
    std::string manifest;
    GoldenQuerySet golden;
    std::vector<std::pair<int, std::vector<float>>> ranl_pool;        // 5 man + 5 woman held-out speech
    std::vector<std::pair<int, std::vector<float>>> ran_targets;      // train-split clean-target embeddings
    std::unordered_map<std::string, std::vector<float>> personalized; // test clip -> clean embedding
};

template <typename Real>
struct AblateResult {
    std::vector<AblationRow> rows;        // baseline, ranl, ran, gold, att, gen, per
    std::vector<MetricsReport> reports;   // per-clip rows in the same order
    SeModel<Real> att_model;
    std::vector<SeTrainReport> train_reports;
};

inline AblationRow summarize_report(const MetricsReport& rep) {
    AblationRow row;
    row.policy = rep.policy;
    row.mean_ssnr = rep.mean_ssnr;
    row.mean_si_sdr = rep.mean_si_sdr;
    row.mean_noisy_si_sdr = rep.mean_noisy_si_sdr;
    row.si_sdr_gain = rep.mean_si_sdr - rep.mean_noisy_si_sdr;
    row.selection_accuracy = rep.selection_accuracy;
    return row;
}

/// Trains the five trainable policies on a shared seed schedule, then
/// evaluates the attention model under the two oracle policies as well.
template <typename Real>
AblateResult<Real> ablate(const AblateInputs& in, const SeConfig& cfg, uint64_t seed, int eval_threads = 1) {
    if (in.golden.dim == 0) throw ConfigError("ablate: golden query set is empty");
    int pool_men = 0, pool_women = 0;
    for (const auto& e : in.ranl_pool) (e.first == 0 ? pool_men : pool_women)++;
    if (in.ranl_pool.size() != 10 || pool_men != 5 || pool_women != 5)
        throw ConfigError("ablate: ranl pool must hold exactly 5 man and 5 woman embeddings");
    if (in.ran_targets.size() < 2) throw ConfigError("ablate: ran policy needs >= 2 clean-target embeddings");

    auto policy_for = [&](PolicyKind kind) {
        QueryPolicy p;
        p.kind = kind;
        p.seed = seed;
        p.golden = in.golden;
        p.pool = in.ranl_pool;
        p.targets = in.ran_targets;
        p.personalized = in.personalized;
        return p;
    };

    AblateResult<Real> out;
    const PolicyKind trained[] = {PolicyKind::baseline, PolicyKind::random_pool, PolicyKind::random_two,
                                  PolicyKind::golden_random, PolicyKind::attention};
    for (PolicyKind kind : trained) {
        QueryPolicy policy = policy_for(kind);
        SeTrainReport rep;
        SeModel<Real> model = train_se<Real>(in.manifest, policy, cfg, seed, &rep);
        out.train_reports.push_back(rep);
        out.reports.push_back(evaluate_se(model, in.manifest, policy, "test", eval_threads));
        out.rows.push_back(summarize_report(out.reports.back()));
        if (kind == PolicyKind::attention) out.att_model = std::move(model);
    }
    for (PolicyKind kind : {PolicyKind::gender_oracle, PolicyKind::personalized}) {
        out.reports.push_back(evaluate_se(out.att_model, in.manifest, policy_for(kind), "test", eval_threads));
        out.rows.push_back(summarize_report(out.reports.back()));
    }
    return out;
}

inline void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows) {
    std::string out = "policy,ssnr_db,si_sdr_db,noisy_si_sdr_db,si_sdr_gain_db,selection_accuracy\n";
    char buf[200];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f,%.6f,%.6f\n", r.policy.c_str(), r.mean_ssnr,
                      r.mean_si_sdr, r.mean_noisy_si_sdr, r.si_sdr_gain, r.selection_accuracy);
        out += buf;
    }
    ByteWriter w;
    w.str(out);
    w.save(path);
}

} // namespace eqse
