// Command-line front door: dataset synthesis, the staged pipeline, training,
// enhancement, evaluation, the ablation study, and visualization. Every
// subcommand prints a single-line `error: <kind>: <message>` on failure and
// exits 2 (config), 3 (data), 4 (numeric), 5 (I/O), or 1 (anything else).

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "eqse/pipeline.hpp"

namespace {

using namespace eqse;

struct Args {
    std::string subcommand;
    std::vector<std::pair<std::string, std::string>> flags;

    const std::string* find(const std::string& name) const {
        for (const auto& [k, v] : flags)
            if (k == name) return &v;
        return nullptr;
    }
    std::string require(const std::string& name) const {
        const std::string* v = find(name);
        if (!v) throw ConfigError(subcommand + ": missing required flag --" + name);
        return *v;
    }
    std::string get(const std::string& name, const std::string& fallback) const {
        const std::string* v = find(name);
        return v ? *v : fallback;
    }
    uint64_t seed() const {
        const std::string* v = find("seed");
        if (!v) return 1;
        return static_cast<uint64_t>(detail::parse_int("--seed", *v));
    }
};

Args parse_args(int argc, char** argv, const std::vector<std::string>& known) {
    Args a;
    a.subcommand = argv[1];
    for (int i = 2; i < argc; ++i) {
        std::string tok = argv[i];
        if (tok.rfind("--", 0) != 0) throw ConfigError(a.subcommand + ": unexpected argument '" + tok + "'");
        tok = tok.substr(2);
        std::string value;
        const size_t eq = tok.find('=');
        if (eq != std::string::npos) {
            value = tok.substr(eq + 1);
            tok = tok.substr(0, eq);
        } else {
            if (i + 1 >= argc) throw ConfigError(a.subcommand + ": flag --" + tok + " needs a value");
            value = argv[++i];
        }
        bool ok = tok == "config" || tok == "seed" || tok == "out" || tok == "log-level";
        for (const auto& k : known) ok = ok || k == tok;
        if (!ok) throw ConfigError(a.subcommand + ": unknown flag --" + tok);
        for (const auto& [k, v] : a.flags)
            if (k == tok) throw ConfigError(a.subcommand + ": duplicate flag --" + tok);
        a.flags.push_back({tok, value});
    }
    if (const std::string* lvl = a.find("log-level")) {
        if (*lvl == "quiet") log_level() = LogLevel::quiet;
        else if (*lvl == "info") log_level() = LogLevel::info;
        else if (*lvl == "debug") log_level() = LogLevel::debug;
        else throw ConfigError("--log-level must be quiet|info|debug, got '" + *lvl + "'");
    }
    return a;
}

PipelineConfig load_config(const Args& a) {
    PipelineConfig cfg;
    if (const std::string* path = a.find("config")) cfg = load_pipeline_config(*path);
    if (a.find("seed")) cfg.seed = a.seed();
    return cfg;
}

PolicyKind parse_policy(const Args& a) { return policy_from_name(a.require("policy")); }

/// Assembles the per-policy query inputs (goldens, pools, target maps) from
/// whatever artifact flags the subcommand received.
QueryPolicy build_policy(const Args& a, const PipelineConfig& cfg, PolicyKind kind, const std::string& manifest) {
    QueryPolicy policy;
    policy.kind = kind;
    policy.seed = derive_seed(cfg.seed, std::string("policy:") + policy_name(kind));
    switch (kind) {
    case PolicyKind::baseline:
    case PolicyKind::gender_oracle:
        break;
    case PolicyKind::golden_random:
    case PolicyKind::attention:
        policy.golden = read_golden(a.require("golden"));
        break;
    case PolicyKind::random_pool:
        policy.pool = detail::pick_ranl_pool(read_embeddings(a.require("embeddings")), derive_seed(cfg.seed, "ranl"));
        break;
    case PolicyKind::random_two: {
        auto sed = load_sed_model<float>(a.require("sed-model"), cfg.sed);
        auto targets = clean_target_embeddings(sed, manifest, "train", cfg.eval_threads);
        for (const auto& r : read_manifest(manifest))
            if (r.split == "train" && r.clean_path) {
                auto it = targets.find(r.clip_id);
                if (it != targets.end()) policy.targets.push_back({r.gender, it->second});
            }
        break;
    }
    case PolicyKind::personalized: {
        auto sed = load_sed_model<float>(a.require("sed-model"), cfg.sed);
        policy.personalized = clean_target_embeddings(sed, manifest, "test", cfg.eval_threads);
        break;
    }
    }
    return policy;
}

int cmd_synth(const Args& a) {
    PipelineConfig cfg = load_config(a);
    const std::string out = a.require("out");
    SedDataConfig sdc = cfg.sed_data;
    sdc.root_seed = derive_seed(cfg.seed, "synth:sed");
    sdc.out_dir = (std::filesystem::path(out) / "sed").string();
    build_sed_dataset(sdc);
    SeDataConfig sec = cfg.se_data;
    sec.root_seed = derive_seed(cfg.seed, "synth:se");
    sec.out_dir = (std::filesystem::path(out) / "se").string();
    build_se_dataset(sec);
    std::printf("wrote %s/sed/sed_manifest.jsonl and %s/se/se_manifest.jsonl\n", out.c_str(), out.c_str());
    return 0;
}

int cmd_train_sed(const Args& a) {
    PipelineConfig cfg = load_config(a);
    auto [model, report] = train_sed<float>(a.require("manifest"), cfg.sed, derive_seed(cfg.seed, "train-sed"));
    save_checkpoint(a.require("out"), model.params);
    std::printf("val_accuracy %.4f gender_accuracy %.4f epochs %d\n", report.val_accuracy, report.gender_accuracy,
                report.epochs_run);
    return 0;
}

int cmd_embed(const Args& a) {
    PipelineConfig cfg = load_config(a);
    const std::string manifest = a.require("manifest");
    const std::string split = a.get("split", "val");
    auto model = load_sed_model<float>(a.require("sed-model"), cfg.sed);
    std::vector<ManifestRecord> records;
    for (const auto& r : read_manifest(manifest))
        if (r.split == split) records.push_back(r);
    if (records.empty()) throw DataError("no '" + split + "' records in " + manifest);
    const std::string root = std::filesystem::path(manifest).parent_path().string();
    EmbeddingSet set = extract_embeddings(model, records, root, cfg.eval_threads);
    write_embeddings(a.require("out"), set);
    std::printf("wrote %zu embeddings (dim %u)\n", set.records.size(), set.dim);
    return 0;
}

int cmd_select_queries(const Args& a) {
    PipelineConfig cfg = load_config(a);
    const std::string epath = a.require("embeddings");
    EmbeddingSet set = read_embeddings(epath);
    GoldenOptions opt = cfg.golden;
    opt.seed = derive_seed(cfg.seed, "golden");
    opt.source_hash = hash_file(epath);
    GoldenQuerySet golden = select_golden(set, opt);
    write_golden(a.require("out"), golden);
    std::printf("wrote golden queries (dim %u)\n", golden.dim);
    return 0;
}

int cmd_train_se(const Args& a) {
    PipelineConfig cfg = load_config(a);
    const std::string manifest = a.require("manifest");
    const PolicyKind kind = parse_policy(a);
    QueryPolicy policy = build_policy(a, cfg, kind, manifest);
    SeTrainReport report;
    auto model = train_se<float>(manifest, policy, cfg.se, derive_seed(cfg.seed, "train-se"), &report);
    save_se_model(a.require("out"), model);
    std::printf("best_val_si_sdr %.4f noisy_val_si_sdr %.4f epochs %d\n", report.best_val_si_sdr,
                report.noisy_val_si_sdr, report.epochs_run);
    return 0;
}

int cmd_enhance(const Args& a) {
    PipelineConfig cfg = load_config(a);
    const std::string in_path = a.require("in");
    const PolicyKind kind = parse_policy(a);
    if (kind != PolicyKind::baseline && kind != PolicyKind::golden_random && kind != PolicyKind::attention)
        throw ConfigError("enhance supports --policy baseline|gold|att (others need a manifest)");
    QueryPolicy policy = build_policy(a, cfg, kind, "");
    auto model = load_se_model<float>(a.require("model"), cfg.se);
    ManifestRecord meta;
    meta.clip_id = std::filesystem::path(in_path).stem().string();
    std::string label;
    const Waveform enhanced = enhance_clip(model, wav_read(in_path), policy, meta, &label);
    wav_write(a.require("out"), enhanced);
    std::printf("query %s\n", label.c_str());
    return 0;
}

int cmd_evaluate(const Args& a) {
    PipelineConfig cfg = load_config(a);
    const std::string manifest = a.require("manifest");
    const PolicyKind kind = parse_policy(a);
    QueryPolicy policy = build_policy(a, cfg, kind, manifest);
    auto model = load_se_model<float>(a.require("model"), cfg.se);
    MetricsReport report = evaluate_se(model, manifest, policy, a.get("split", "test"), cfg.eval_threads);
    write_metrics_csv(a.require("out"), {report});
    std::printf("policy %s ssnr %.3f si_sdr %.3f noisy_si_sdr %.3f selection_accuracy %.3f\n", report.policy.c_str(),
                report.mean_ssnr, report.mean_si_sdr, report.mean_noisy_si_sdr, report.selection_accuracy);
    return 0;
}

int cmd_visualize(const Args& a) {
    PipelineConfig cfg = load_config(a);
    EmbeddingSet set = read_embeddings(a.require("embeddings"));
    GoldenQuerySet golden = read_golden(a.require("golden"));
    const std::string svg = a.require("out");
    const std::string csv = a.get("csv", svg + ".csv");
    visualize_embeddings(set, golden, svg, csv, cfg.viz_perplexity, cfg.viz_iters, derive_seed(cfg.seed, "viz"));
    std::printf("wrote %s and %s\n", svg.c_str(), csv.c_str());
    return 0;
}

int cmd_run(const Args& a) {
    PipelineConfig cfg = load_config(a);
    PipelineRunner runner(cfg, a.require("out"));
    PipelineOutcome outcome = runner.run();
    for (const auto& s : outcome.stages) std::printf("stage %s: %s\n", s.name.c_str(), s.executed ? "run" : "skip");
    return 0;
}

int cmd_ablate(const Args& a) {
    PipelineConfig cfg = load_config(a);
    const std::string dir = a.require("dir");
    // reuse or build everything the study needs (datasets through goldens)
    PipelineRunner runner(cfg, dir);
    runner.run("select-queries");
    const std::string out = a.require("out");
    const std::string metrics = a.get("metrics", out + ".clips.csv");
    AblationArtifacts res = run_ablation(cfg, dir, out, metrics);
    for (const auto& r : res.rows)
        std::printf("%-8s ssnr %.3f si_sdr %.3f gain %.3f sel_acc %.3f\n", r.policy.c_str(), r.mean_ssnr,
                    r.mean_si_sdr, r.si_sdr_gain, r.selection_accuracy);
    return 0;
}

int usage() {
    std::fprintf(stderr, "usage: eqse <subcommand> [flags]\n"
                         "subcommands:\n"
                         "  synth           --out DIR [--config FILE --seed N]\n"
                         "  train-sed       --manifest FILE --out CKPT [--config FILE --seed N]\n"
                         "  embed           --sed-model CKPT --manifest FILE --out FILE [--split S]\n"
                         "  select-queries  --embeddings FILE --out FILE [--config FILE --seed N]\n"
                         "  train-se        --manifest FILE --policy P --out CKPT\n"
                         "                  [--golden FILE --embeddings FILE --sed-model CKPT]\n"
                         "  enhance         --model CKPT --policy P --in WAV --out WAV [--golden FILE]\n"
                         "  evaluate        --manifest FILE --model CKPT --policy P --out CSV\n"
                         "                  [--split S --golden FILE --embeddings FILE --sed-model CKPT]\n"
                         "  ablate          --dir DIR --out CSV [--metrics CSV --config FILE --seed N]\n"
                         "  visualize       --embeddings FILE --golden FILE --out SVG [--csv CSV]\n"
                         "  run             --out DIR [--config FILE --seed N]\n"
                         "global flags: --config FILE --seed N --out PATH --log-level quiet|info|debug\n");
    return 2;
}

std::string one_line(std::string msg) {
    for (char& c : msg)
        if (c == '\n' || c == '\r') c = ' ';
    return msg;
}

} // namespace

int main(int argc, char** argv) {
    if (argc < 2) return usage();
    const std::string sub = argv[1];
    try {
        if (sub == "synth") return cmd_synth(parse_args(argc, argv, {}));
        if (sub == "train-sed") return cmd_train_sed(parse_args(argc, argv, {"manifest"}));
        if (sub == "embed") return cmd_embed(parse_args(argc, argv, {"sed-model", "manifest", "split"}));
        if (sub == "select-queries") return cmd_select_queries(parse_args(argc, argv, {"embeddings"}));
        if (sub == "train-se")
            return cmd_train_se(parse_args(argc, argv, {"manifest", "policy", "golden", "embeddings", "sed-model"}));
        if (sub == "enhance") return cmd_enhance(parse_args(argc, argv, {"model", "policy", "in", "golden"}));
        if (sub == "evaluate")
            return cmd_evaluate(
                parse_args(argc, argv, {"manifest", "model", "policy", "split", "golden", "embeddings", "sed-model"}));
        if (sub == "ablate") return cmd_ablate(parse_args(argc, argv, {"dir", "metrics"}));
        if (sub == "visualize") return cmd_visualize(parse_args(argc, argv, {"embeddings", "golden", "csv"}));
        if (sub == "run") return cmd_run(parse_args(argc, argv, {}));
        if (sub == "--help" || sub == "-h" || sub == "help") return usage(), 0;
        std::fprintf(stderr, "error: config: unknown subcommand '%s'\n", sub.c_str());
        return 2;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: config: %s\n", one_line(e.what()).c_str());
        return 2;
    } catch (const DataError& e) {
        std::fprintf(stderr, "error: data: %s\n", one_line(e.what()).c_str());
        return 3;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "error: numeric: %s\n", one_line(e.what()).c_str());
        return 4;
    } catch (const IoError& e) {
        std::fprintf(stderr, "error: io: %s\n", one_line(e.what()).c_str());
        return 5;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: internal: %s\n", one_line(e.what()).c_str());
        return 1;
    }
}
