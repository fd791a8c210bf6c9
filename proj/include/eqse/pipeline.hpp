#pragma once

// Orchestration: a flat key=value config drives the seven-stage pipeline
// (synth, train-sed, embed, select-queries, train-se, evaluate, visualize).
// Each stage's artifacts are hashed into run_manifest.json; a stage is
// skipped when its recorded artifacts still match and nothing upstream ran,
// so re-runs are incremental and byte-reproducible.

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "eqse/qse.hpp"
#include "eqse/sed.hpp"
#include "eqse/svg.hpp"
#include "eqse/tsne.hpp"

namespace eqse {

struct PipelineConfig {
    uint64_t seed = 1;
    SedDataConfig sed_data; // out_dir ignored; the runner owns the layout
    SeDataConfig se_data;
    SedConfig sed;
    SeConfig se;
    GoldenOptions golden;   // seed and source_hash filled by the runner
    double viz_perplexity = 30.0;
    int viz_iters = 1000;
    int eval_threads = 1;
};

// ---------------------------------------------------------------------------
// Config file: flat key=value, unknown keys rejected, canonical serialization
// in registry order so that hash(config) is stable.

namespace detail {

struct ConfigKey {
    std::string name;
    std::function<void(PipelineConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const PipelineConfig&)> get;
};

inline int64_t parse_int(const std::string& key, const std::string& v) {
    size_t used = 0;
    int64_t out = 0;
    try {
        out = std::stoll(v, &used);
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": not an integer: '" + v + "'");
    }
    if (used != v.size()) throw ConfigError("config key " + key + ": not an integer: '" + v + "'");
    return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
    size_t used = 0;
    double out = 0;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": not a number: '" + v + "'");
    }
    if (used != v.size()) throw ConfigError("config key " + key + ": not a number: '" + v + "'");
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw ConfigError("config key " + key + ": expected 0|1|true|false, got '" + v + "'");
}

inline std::string fmt_real(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline const std::vector<ConfigKey>& config_registry() {
    static const std::vector<ConfigKey> keys = [] {
        std::vector<ConfigKey> r;
        auto u64 = [&](const std::string& n, uint64_t PipelineConfig::*f) {
            r.push_back({n,
                         [f](PipelineConfig& c, const std::string& k, const std::string& v) {
                             const int64_t x = parse_int(k, v);
                             if (x < 0) throw ConfigError("config key " + k + ": must be >= 0");
                             c.*f = static_cast<uint64_t>(x);
                         },
                         [f](const PipelineConfig& c) { return std::to_string(c.*f); }});
        };
        auto intk = [&]<typename T, typename M>(const std::string& n, M T::*f, T PipelineConfig::*outer) {
            r.push_back({n,
                         [f, outer](PipelineConfig& c, const std::string& k, const std::string& v) {
                             (c.*outer).*f = static_cast<M>(parse_int(k, v));
                         },
                         [f, outer](const PipelineConfig& c) { return std::to_string((c.*outer).*f); }});
        };
        auto realk = [&]<typename T, typename M>(const std::string& n, M T::*f, T PipelineConfig::*outer) {
            r.push_back({n,
                         [f, outer](PipelineConfig& c, const std::string& k, const std::string& v) {
                             (c.*outer).*f = static_cast<M>(parse_real(k, v));
                         },
                         [f, outer](const PipelineConfig& c) { return fmt_real(static_cast<double>((c.*outer).*f)); }});
        };

        u64("seed", &PipelineConfig::seed);

        intk("sed_data.train_per_class", &SedDataConfig::train_per_class, &PipelineConfig::sed_data);
        intk("sed_data.val_per_class", &SedDataConfig::val_per_class, &PipelineConfig::sed_data);
        intk("sed_data.test_per_class", &SedDataConfig::test_per_class, &PipelineConfig::sed_data);
        realk("sed_data.duration_s", &SedDataConfig::duration_s, &PipelineConfig::sed_data);

        intk("se_data.train_pairs", &SeDataConfig::train_pairs, &PipelineConfig::se_data);
        intk("se_data.val_pairs", &SeDataConfig::val_pairs, &PipelineConfig::se_data);
        intk("se_data.test_pairs", &SeDataConfig::test_pairs, &PipelineConfig::se_data);
        realk("se_data.duration_s", &SeDataConfig::duration_s, &PipelineConfig::se_data);
        realk("se_data.snr_lo", &SeDataConfig::snr_lo, &PipelineConfig::se_data);
        realk("se_data.snr_hi", &SeDataConfig::snr_hi, &PipelineConfig::se_data);

        intk("sed.max_epochs", &SedConfig::max_epochs, &PipelineConfig::sed);
        intk("sed.batch_size", &SedConfig::batch_size, &PipelineConfig::sed);
        intk("sed.patience", &SedConfig::patience, &PipelineConfig::sed);
        realk("sed.lr", &SedConfig::lr, &PipelineConfig::sed);
        realk("sed.dropout", &SedConfig::dropout, &PipelineConfig::sed);

        intk("se.max_epochs", &SeConfig::max_epochs, &PipelineConfig::se);
        intk("se.batch_size", &SeConfig::batch_size, &PipelineConfig::se);
        intk("se.patience", &SeConfig::patience, &PipelineConfig::se);
        realk("se.lr", &SeConfig::lr, &PipelineConfig::se);
        realk("se.tau", &SeConfig::tau, &PipelineConfig::se);
        realk("se.lambda_spec", &SeConfig::lambda_spec, &PipelineConfig::se);
        realk("se.crop_seconds", &SeConfig::crop_seconds, &PipelineConfig::se);
        r.push_back({"se.hard_train",
                     [](PipelineConfig& c, const std::string& k, const std::string& v) {
                         c.se.hard_train = parse_bool(k, v);
                     },
                     [](const PipelineConfig& c) { return std::string(c.se.hard_train ? "1" : "0"); }});

        r.push_back({"golden.space",
                     [](PipelineConfig& c, const std::string& k, const std::string& v) {
                         if (v != "latent" && v != "tsne2d")
                             throw ConfigError("config key " + k + ": expected latent|tsne2d, got '" + v + "'");
                         c.golden.space = v;
                     },
                     [](const PipelineConfig& c) { return c.golden.space; }});
        r.push_back({"golden.kernel",
                     [](PipelineConfig& c, const std::string& k, const std::string& v) {
                         if (v == "gaussian") c.golden.kernel = Kernel::gaussian;
                         else if (v == "flat") c.golden.kernel = Kernel::flat;
                         else throw ConfigError("config key " + k + ": expected gaussian|flat, got '" + v + "'");
                     },
                     [](const PipelineConfig& c) {
                         return std::string(c.golden.kernel == Kernel::gaussian ? "gaussian" : "flat");
                     }});
        realk("golden.bandwidth", &GoldenOptions::bandwidth, &PipelineConfig::golden);
        realk("golden.perplexity", &GoldenOptions::perplexity, &PipelineConfig::golden);
        intk("golden.tsne_iters", &GoldenOptions::tsne_iters, &PipelineConfig::golden);

        r.push_back({"viz.perplexity",
                     [](PipelineConfig& c, const std::string& k, const std::string& v) {
                         c.viz_perplexity = parse_real(k, v);
                     },
                     [](const PipelineConfig& c) { return fmt_real(c.viz_perplexity); }});
        r.push_back({"viz.iters",
                     [](PipelineConfig& c, const std::string& k, const std::string& v) {
                         c.viz_iters = static_cast<int>(parse_int(k, v));
                     },
                     [](const PipelineConfig& c) { return std::to_string(c.viz_iters); }});
        r.push_back({"eval.threads",
                     [](PipelineConfig& c, const std::string& k, const std::string& v) {
                         c.eval_threads = static_cast<int>(parse_int(k, v));
                         if (c.eval_threads < 1) throw ConfigError("config key " + k + ": must be >= 1");
                     },
                     [](const PipelineConfig& c) { return std::to_string(c.eval_threads); }});
        return r;
    }();
    return keys;
}

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

} // namespace detail

/// Parses `key = value` lines; '#' starts a comment, blank lines ignored.
/// Unknown and repeated keys are errors so configs stay exact.
inline PipelineConfig parse_pipeline_config(const std::string& text) {
    PipelineConfig cfg;
    std::vector<std::string> seen;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        const detail::ConfigKey* found = nullptr;
        for (const auto& k : detail::config_registry())
            if (k.name == key) found = &k;
        if (!found) throw ConfigError("unknown config key: " + key);
        for (const auto& s : seen)
            if (s == key) throw ConfigError("duplicate config key: " + key);
        seen.push_back(key);
        found->set(cfg, key, value);
    }
    return cfg;
}

inline PipelineConfig load_pipeline_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_pipeline_config(ss.str());
}

/// Every key in registry order; the hash of this string identifies the run.
inline std::string serialize_pipeline_config(const PipelineConfig& cfg) {
    std::string out;
    for (const auto& k : detail::config_registry()) out += k.name + " = " + k.get(cfg) + "\n";
    return out;
}

inline std::string pipeline_config_hash(const PipelineConfig& cfg) {
    return hash_bytes(serialize_pipeline_config(cfg));
}

// ---------------------------------------------------------------------------
// Checkpoint loader for the SED side (the SE side has its own).

template <typename Real>
SedModel<Real> load_sed_model(const std::string& path, const SedConfig& cfg) {
    ParamStore<Real> loaded = load_checkpoint<Real>(path);
    SedModel<Real> expected = SedModel<Real>::create(cfg, 0);
    if (loaded.names != expected.params.names)
        throw ConfigError("sed checkpoint " + path + " does not match the configured architecture");
    for (size_t i = 0; i < loaded.values.size(); ++i)
        if (loaded.values[i].shape != expected.params.values[i].shape)
            throw ConfigError("sed checkpoint parameter " + loaded.names[i] + " has shape " +
                              shape_str(loaded.values[i].shape) + ", expected " +
                              shape_str(expected.params.values[i].shape));
    expected.params = std::move(loaded);
    return expected;
}

// ---------------------------------------------------------------------------
// Visualization: exact t-SNE scatter with the two goldens starred.

struct VisualizeResult {
    TsneResult tsne;
    int64_t star_man = -1, star_woman = -1; // rows in the embedding set
};

inline VisualizeResult visualize_embeddings(const EmbeddingSet& set, const GoldenQuerySet& golden,
                                            const std::string& svg_path, const std::string& csv_path,
                                            double perplexity, int viz_iters, uint64_t seed) {
    std::vector<bool> class_seen(static_cast<size_t>(kNumClasses), false);
    for (const auto& r : set.records)
        if (r.class_idx < kNumClasses) class_seen[r.class_idx] = true;
    int present = 0;
    for (bool b : class_seen) present += b ? 1 : 0;
    if (present < kNumClasses)
        throw DataError("visualize: embedding set covers " + std::to_string(present) + " of " +
                        std::to_string(kNumClasses) + " classes");

    const int64_t n = static_cast<int64_t>(set.records.size());
    Tensor<double> points({n, static_cast<int64_t>(set.dim)});
    for (int64_t i = 0; i < n; ++i)
        for (uint32_t d = 0; d < set.dim; ++d)
            points.at(i, d) = static_cast<double>(set.records[static_cast<size_t>(i)].vec[d]);

    VisualizeResult out;
    out.tsne = tsne(points, perplexity, viz_iters, seed);

    const nlohmann::json prov = nlohmann::json::parse(golden.provenance_json);
    const std::string id_man = prov.at("clip_id_man").get<std::string>();
    const std::string id_woman = prov.at("clip_id_woman").get<std::string>();
    for (int64_t i = 0; i < n; ++i) {
        if (set.records[static_cast<size_t>(i)].clip_id == id_man) out.star_man = i;
        if (set.records[static_cast<size_t>(i)].clip_id == id_woman) out.star_woman = i;
    }
    if (out.star_man < 0 || out.star_woman < 0)
        throw DataError("visualize: golden clip ids " + id_man + "/" + id_woman + " not in the embedding set");

    std::vector<uint8_t> classes;
    std::vector<std::string> names;
    for (const auto& r : set.records) classes.push_back(r.class_idx);
    for (int c = 0; c < kNumClasses; ++c) names.push_back(class_name(static_cast<EventClass>(c)));
    SvgScatterOptions opt;
    opt.title = "embedding map";
    const std::string svg = render_scatter_svg(out.tsne.coords, classes, names, {out.star_man, out.star_woman}, opt);
    ByteWriter w;
    w.str(svg);
    w.save(svg_path);

    std::string csv = "clip_id,class,gender,x,y\n";
    char buf[80];
    for (int64_t i = 0; i < n; ++i) {
        const auto& r = set.records[static_cast<size_t>(i)];
        std::snprintf(buf, sizeof(buf), "%.6f,%.6f", out.tsne.coords.at(i, 0), out.tsne.coords.at(i, 1));
        csv += r.clip_id + "," + class_name(static_cast<EventClass>(r.class_idx)) + "," +
               (r.gender == 2 ? "none" : gender_name(r.gender)) + "," + buf + "\n";
    }
    ByteWriter cw;
    cw.str(csv);
    cw.save(csv_path);
    return out;
}

// ---------------------------------------------------------------------------
// Run manifest: every artifact with its content hash, per stage.

struct StageRecord {
    std::string name;
    std::vector<std::pair<std::string, std::string>> artifacts; // relative path, hash
};

struct RunManifest {
    std::string config_hash;
    std::vector<StageRecord> stages;

    const StageRecord* find(const std::string& name) const {
        for (const auto& s : stages)
            if (s.name == name) return &s;
        return nullptr;
    }
};

inline void write_run_manifest(const std::string& path, const RunManifest& m) {
    nlohmann::json stages = nlohmann::json::array();
    for (const auto& s : m.stages) {
        nlohmann::json arts = nlohmann::json::array();
        for (const auto& [p, h] : s.artifacts) arts.push_back({{"path", p}, {"hash", h}});
        stages.push_back({{"name", s.name}, {"artifacts", arts}});
    }
    const nlohmann::json j = {{"config_hash", m.config_hash}, {"stages", stages}};
    ByteWriter w;
    w.str(j.dump(2) + "\n");
    w.save(path);
}

inline RunManifest read_run_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open run manifest: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("run manifest " + path + " is not valid JSON: " + e.what());
    }
    RunManifest m;
    try {
        m.config_hash = j.at("config_hash").get<std::string>();
        for (const auto& s : j.at("stages")) {
            StageRecord rec;
            rec.name = s.at("name").get<std::string>();
            for (const auto& a : s.at("artifacts"))
                rec.artifacts.push_back({a.at("path").get<std::string>(), a.at("hash").get<std::string>()});
            m.stages.push_back(std::move(rec));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("run manifest " + path + " is missing fields: " + e.what());
    }
    return m;
}

// ---------------------------------------------------------------------------
// The stage runner.

struct StageStatus {
    std::string name;
    bool executed = false;
};

struct PipelineOutcome {
    std::vector<StageStatus> stages;

    bool executed(const std::string& name) const {
        for (const auto& s : stages)
            if (s.name == name) return s.executed;
        return false;
    }
};

class PipelineRunner {
public:
    PipelineRunner(PipelineConfig cfg, std::string out_dir) : cfg_(std::move(cfg)), out_(std::move(out_dir)) {
        cfg_.se.validate();
        cfg_.sed.validate();
        namespace fs = std::filesystem;
        fs::create_directories(out_);
        const std::string hash = pipeline_config_hash(cfg_);
        const std::string mpath = manifest_path();
        if (fs::exists(mpath)) {
            RunManifest prev = read_run_manifest(mpath);
            if (prev.config_hash == hash) manifest_ = std::move(prev);
        }
        manifest_.config_hash = hash;
    }

    static const std::vector<std::string>& stage_names() {
        static const std::vector<std::string> names = {"synth",    "train-sed", "embed",    "select-queries",
                                                       "train-se", "evaluate",  "visualize"};
        return names;
    }

    std::string manifest_path() const { return (std::filesystem::path(out_) / "run_manifest.json").string(); }
    std::string abs(const std::string& rel) const { return (std::filesystem::path(out_) / rel).string(); }

    /// Runs stages in order up to and including `upto`. A stage executes
    /// when its recorded artifacts are missing or stale, or when any earlier
    /// stage executed this run.
    PipelineOutcome run(const std::string& upto = "visualize") {
        bool found = false;
        for (const auto& n : stage_names()) found = found || n == upto;
        if (!found) throw ConfigError("unknown pipeline stage: " + upto);

        PipelineOutcome outcome;
        bool upstream_ran = false;
        for (const auto& name : stage_names()) {
            StageStatus status;
            status.name = name;
            if (upstream_ran || !stage_cached(name)) {
                log_info("pipeline: running stage " + name);
                execute(name);
                status.executed = true;
                upstream_ran = true;
            } else {
                log_info("pipeline: stage " + name + " is up to date");
            }
            outcome.stages.push_back(status);
            if (name == upto) break;
        }
        return outcome;
    }

    const PipelineConfig& config() const { return cfg_; }

private:
    bool stage_cached(const std::string& name) const {
        const StageRecord* rec = manifest_.find(name);
        if (!rec || rec->artifacts.empty()) return false;
        for (const auto& [rel, hash] : rec->artifacts) {
            const std::string p = abs(rel);
            if (!std::filesystem::exists(p) || hash_file(p) != hash) return false;
        }
        return true;
    }

    void record(const std::string& name, const std::vector<std::string>& rel_paths) {
        StageRecord rec;
        rec.name = name;
        for (const auto& rel : rel_paths) rec.artifacts.push_back({rel, hash_file(abs(rel))});
        bool replaced = false;
        for (auto& s : manifest_.stages)
            if (s.name == name) {
                s = rec;
                replaced = true;
            }
        if (!replaced) manifest_.stages.push_back(std::move(rec));
        write_run_manifest(manifest_path(), manifest_);
    }

    void execute(const std::string& name) {
        auto rethrow_tagged = [&](const auto& e) {
            using E = std::decay_t<decltype(e)>;
            throw E("stage " + name + ": " + e.what());
        };
        try {
            if (name == "synth") record(name, stage_synth());
            else if (name == "train-sed") record(name, stage_train_sed());
            else if (name == "embed") record(name, stage_embed());
            else if (name == "select-queries") record(name, stage_select_queries());
            else if (name == "train-se") record(name, stage_train_se());
            else if (name == "evaluate") record(name, stage_evaluate());
            else if (name == "visualize") record(name, stage_visualize());
            else throw ConfigError("unknown pipeline stage: " + name);
        } catch (const ConfigError& e) {
            rethrow_tagged(e);
        } catch (const DataError& e) {
            rethrow_tagged(e);
        } catch (const NumericError& e) {
            rethrow_tagged(e);
        } catch (const IoError& e) {
            rethrow_tagged(e);
        }
    }

    std::vector<std::string> dataset_artifacts(const std::string& sub, const std::string& manifest_file) const {
        std::vector<std::string> arts = {sub + "/" + manifest_file};
        for (const auto& r : read_manifest(abs(sub + "/" + manifest_file))) {
            arts.push_back(sub + "/" + r.path);
            if (r.clean_path) arts.push_back(sub + "/" + *r.clean_path);
        }
        return arts;
    }

    std::vector<std::string> stage_synth() {
        SedDataConfig sdc = cfg_.sed_data;
        sdc.root_seed = derive_seed(cfg_.seed, "synth:sed");
        sdc.out_dir = abs("sed");
        build_sed_dataset(sdc);
        SeDataConfig sec = cfg_.se_data;
        sec.root_seed = derive_seed(cfg_.seed, "synth:se");
        sec.out_dir = abs("se");
        build_se_dataset(sec);
        auto arts = dataset_artifacts("sed", "sed_manifest.jsonl");
        auto se_arts = dataset_artifacts("se", "se_manifest.jsonl");
        arts.insert(arts.end(), se_arts.begin(), se_arts.end());
        return arts;
    }

    std::vector<std::string> stage_train_sed() {
        auto [model, report] = train_sed<float>(abs("sed/sed_manifest.jsonl"), cfg_.sed,
                                                derive_seed(cfg_.seed, "train-sed"));
        save_checkpoint(abs("sed_model.eqw"), model.params);
        const nlohmann::json j = {{"val_accuracy", report.val_accuracy},
                                  {"gender_accuracy", report.gender_accuracy},
                                  {"epochs_run", report.epochs_run},
                                  {"best_epoch", report.best_epoch},
                                  {"val_history", report.val_history}};
        ByteWriter w;
        w.str(j.dump(2) + "\n");
        w.save(abs("sed_report.json"));
        return {"sed_model.eqw", "sed_report.json"};
    }

    std::vector<std::string> stage_embed() {
        auto model = load_sed_model<float>(abs("sed_model.eqw"), cfg_.sed);
        std::vector<ManifestRecord> val;
        for (const auto& r : read_manifest(abs("sed/sed_manifest.jsonl")))
            if (r.split == "val") val.push_back(r);
        if (val.empty()) throw DataError("embed: no val records in the sound event manifest");
        EmbeddingSet set = extract_embeddings(model, val, abs("sed"), cfg_.eval_threads);
        write_embeddings(abs("embeddings.eqe"), set);
        return {"embeddings.eqe"};
    }

    std::vector<std::string> stage_select_queries() {
        EmbeddingSet set = read_embeddings(abs("embeddings.eqe"));
        GoldenOptions opt = cfg_.golden;
        opt.seed = derive_seed(cfg_.seed, "golden");
        opt.source_hash = hash_file(abs("embeddings.eqe"));
        GoldenQuerySet golden = select_golden(set, opt);
        write_golden(abs("golden.gq"), golden);
        return {"golden.gq"};
    }

    std::vector<std::string> stage_train_se() {
        QueryPolicy policy;
        policy.kind = PolicyKind::attention;
        policy.seed = derive_seed(cfg_.seed, "policy:att");
        policy.golden = read_golden(abs("golden.gq"));
        SeTrainReport report;
        auto model = train_se<float>(abs("se/se_manifest.jsonl"), policy, cfg_.se,
                                     derive_seed(cfg_.seed, "train-se"), &report);
        save_se_model(abs("se_att.eqw"), model);
        const nlohmann::json j = {{"best_val_si_sdr", report.best_val_si_sdr},
                                  {"noisy_val_si_sdr", report.noisy_val_si_sdr},
                                  {"epochs_run", report.epochs_run},
                                  {"best_epoch", report.best_epoch},
                                  {"val_history", report.val_history}};
        ByteWriter w;
        w.str(j.dump(2) + "\n");
        w.save(abs("se_report.json"));
        return {"se_att.eqw", "se_report.json"};
    }

    std::vector<std::string> stage_evaluate() {
        auto model = load_se_model<float>(abs("se_att.eqw"), cfg_.se);
        QueryPolicy policy;
        policy.kind = PolicyKind::attention;
        policy.seed = derive_seed(cfg_.seed, "policy:att");
        policy.golden = read_golden(abs("golden.gq"));
        auto report = evaluate_se(model, abs("se/se_manifest.jsonl"), policy, "test", cfg_.eval_threads);
        write_metrics_csv(abs("metrics.csv"), {report});
        return {"metrics.csv"};
    }

    std::vector<std::string> stage_visualize() {
        EmbeddingSet set = read_embeddings(abs("embeddings.eqe"));
        GoldenQuerySet golden = read_golden(abs("golden.gq"));
        visualize_embeddings(set, golden, abs("tsne.svg"), abs("tsne_coords.csv"), cfg_.viz_perplexity,
                             cfg_.viz_iters, derive_seed(cfg_.seed, "viz"));
        return {"tsne.svg", "tsne_coords.csv"};
    }

    PipelineConfig cfg_;
    std::string out_;
    RunManifest manifest_;
};

inline PipelineOutcome run_pipeline(const PipelineConfig& cfg, const std::string& out_dir,
                                    const std::string& upto = "visualize") {
    PipelineRunner runner(cfg, out_dir);
    return runner.run(upto);
}

// ---------------------------------------------------------------------------
// Ablation front-end: resolves every policy's query inputs from pipeline
// artifacts, then runs the seven-row study.

namespace detail {

/// 5 man + 5 woman embeddings drawn without replacement from held-out
/// speech clips.
inline std::vector<std::pair<int, std::vector<float>>> pick_ranl_pool(const EmbeddingSet& set, uint64_t seed) {
    std::vector<size_t> men, women;
    for (size_t i = 0; i < set.records.size(); ++i) {
        if (set.records[i].gender == 0) men.push_back(i);
        if (set.records[i].gender == 1) women.push_back(i);
    }
    if (men.size() < 5 || women.size() < 5)
        throw DataError("ranl pool needs >= 5 held-out embeddings per gender, have " + std::to_string(men.size()) +
                        "/" + std::to_string(women.size()));
    Rng rng = Rng::seeded(seed, "ranl:pool");
    std::vector<std::pair<int, std::vector<float>>> pool;
    for (auto* side : {&men, &women}) {
        for (int k = 0; k < 5; ++k) {
            const size_t j = k + static_cast<size_t>(rng.randint(side->size() - k));
            std::swap((*side)[k], (*side)[j]);
            const auto& rec = set.records[(*side)[k]];
            pool.push_back({rec.gender, rec.vec});
        }
    }
    return pool;
}

} // namespace detail

/// Embeds the clean reference of every matching noisy record with the SED
/// model; keys are the noisy clip ids.
template <typename Real>
std::unordered_map<std::string, std::vector<float>> clean_target_embeddings(const SedModel<Real>& sed,
                                                                            const std::string& manifest_path,
                                                                            const std::string& split, int threads) {
    namespace fs = std::filesystem;
    const std::string root = fs::path(manifest_path).parent_path().string();
    std::vector<ManifestRecord> targets;
    for (const auto& r : read_manifest(manifest_path)) {
        if (r.split != split || !r.clean_path) continue;
        ManifestRecord t = r;
        t.path = *r.clean_path; // embed the clean reference, keep the noisy id
        targets.push_back(std::move(t));
    }
    if (targets.empty()) throw DataError("no noisy " + split + " records with clean references in " + manifest_path);
    EmbeddingSet set = extract_embeddings(sed, targets, root, threads);
    std::unordered_map<std::string, std::vector<float>> out;
    for (const auto& rec : set.records) out[rec.clip_id] = rec.vec;
    return out;
}

struct AblationArtifacts {
    std::vector<AblationRow> rows;
    std::vector<MetricsReport> reports;
    std::vector<SeTrainReport> train_reports;
};

/// Runs the full seven-policy study from a pipeline directory that already
/// holds datasets, the SED checkpoint, embeddings, and goldens.
inline AblationArtifacts run_ablation(const PipelineConfig& cfg, const std::string& dir,
                                      const std::string& table_csv, const std::string& metrics_csv) {
    namespace fs = std::filesystem;
    auto need = [&](const std::string& rel) {
        const std::string p = (fs::path(dir) / rel).string();
        if (!fs::exists(p)) throw DataError("ablate: missing artifact " + p + " (run the pipeline first)");
        return p;
    };
    const std::string manifest = need("se/se_manifest.jsonl");
    auto sed = load_sed_model<float>(need("sed_model.eqw"), cfg.sed);

    AblateInputs in;
    in.manifest = manifest;
    in.golden = read_golden(need("golden.gq"));
    in.ranl_pool = detail::pick_ranl_pool(read_embeddings(need("embeddings.eqe")), derive_seed(cfg.seed, "ranl"));
    auto train_targets = clean_target_embeddings(sed, manifest, "train", cfg.eval_threads);
    // stable order for the ran policy pool: manifest order, not hash order
    for (const auto& r : read_manifest(manifest))
        if (r.split == "train" && r.clean_path) {
            auto it = train_targets.find(r.clip_id);
            if (it != train_targets.end()) in.ran_targets.push_back({r.gender, it->second});
        }
    in.personalized = clean_target_embeddings(sed, manifest, "test", cfg.eval_threads);

    auto result = ablate<float>(in, cfg.se, derive_seed(cfg.seed, "ablate"), cfg.eval_threads);
    write_ablation_csv(table_csv, result.rows);
    write_metrics_csv(metrics_csv, result.reports);
    AblationArtifacts out;
    out.rows = std::move(result.rows);
    out.reports = std::move(result.reports);
    out.train_reports = std::move(result.train_reports);
    return out;
}

} // namespace eqse
