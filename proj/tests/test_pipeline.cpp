#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "eqse/pipeline.hpp"

using namespace eqse;
namespace fs = std::filesystem;

namespace {

// smallest scale the data contracts allow: 20 clips per class per split for
// the classifier, a handful of enhancement pairs, one epoch each
PipelineConfig tiny_config() {
    PipelineConfig cfg;
    cfg.seed = 7;
    cfg.sed_data.train_per_class = 20;
    cfg.sed_data.val_per_class = 20;
    cfg.sed_data.test_per_class = 20;
    cfg.sed.max_epochs = 1;
    cfg.se_data.train_pairs = 8;
    cfg.se_data.val_pairs = 4;
    cfg.se_data.test_pairs = 6;
    cfg.se.max_epochs = 1;
    cfg.viz_iters = 300;
    return cfg;
}

struct Fixture {
    std::string dir;
    PipelineOutcome first_run;
};

// one full pipeline run shared by every caching test; tests that mutate
// state work on copies
const Fixture& fixture() {
    static const Fixture fix = [] {
        Fixture f;
        f.dir = (fs::temp_directory_path() / "eqse_pipeline_fix").string();
        fs::remove_all(f.dir);
        f.first_run = run_pipeline(tiny_config(), f.dir);
        std::ofstream(fs::path(f.dir) / "config.txt") << serialize_pipeline_config(tiny_config());
        return f;
    }();
    return fix;
}

std::string copy_fixture(const std::string& tag) {
    const std::string dst = (fs::temp_directory_path() / ("eqse_pipeline_" + tag)).string();
    fs::remove_all(dst);
    fs::copy(fixture().dir, dst, fs::copy_options::recursive);
    return dst;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int count_substr(const std::string& hay, const std::string& needle) {
    int n = 0;
    for (size_t at = hay.find(needle); at != std::string::npos; at = hay.find(needle, at + needle.size())) ++n;
    return n;
}

bool all_executed(const PipelineOutcome& o) {
    for (const auto& s : o.stages)
        if (!s.executed) return false;
    return true;
}

// 16 points covering all ten classes, both genders on the speech classes
EmbeddingSet fake_embeddings() {
    EmbeddingSet set;
    set.dim = 4;
    Rng rng(404);
    for (int i = 0; i < 16; ++i) {
        EmbeddingRecord r;
        r.clip_id = "pt" + std::to_string(i);
        r.class_idx = static_cast<uint8_t>(i % kNumClasses);
        r.gender = r.class_idx == 8 ? 0 : r.class_idx == 9 ? 1 : 2;
        for (uint32_t d = 0; d < set.dim; ++d) r.vec.push_back(static_cast<float>(rng.normal()));
        set.records.push_back(std::move(r));
    }
    return set;
}

GoldenQuerySet fake_golden_for(const std::string& man_id, const std::string& woman_id) {
    GoldenQuerySet g;
    g.dim = 4;
    g.man = {1, 0, 0, 0};
    g.woman = {0, 1, 0, 0};
    g.provenance_json = std::string("{\"clip_id_man\":\"") + man_id + "\",\"clip_id_woman\":\"" + woman_id + "\"}";
    return g;
}

int run_cli(const std::string& args, std::string* err_line = nullptr) {
    const std::string err_path = (fs::temp_directory_path() / "eqse_cli_err.txt").string();
    const std::string cmd = std::string(EQSE_CLI) + " " + args + " 2> " + err_path;
    const int status = std::system(cmd.c_str());
    if (err_line) {
        *err_line = read_file(err_path);
        if (!err_line->empty() && err_line->back() == '\n') err_line->pop_back();
    }
    return (status >> 8) & 0xff;
}

} // namespace

TEST_CASE("pipeline config serialization round-trips with a stable hash") {
    PipelineConfig cfg = tiny_config();
    const std::string text = serialize_pipeline_config(cfg);
    PipelineConfig back = parse_pipeline_config(text);
    CHECK(pipeline_config_hash(back) == pipeline_config_hash(cfg));
    CHECK(serialize_pipeline_config(back) == text);
    CHECK(pipeline_config_hash(PipelineConfig{}) != pipeline_config_hash(cfg));
}

TEST_CASE("pipeline config parser accepts comments and rejects bad input") {
    PipelineConfig ok = parse_pipeline_config("# comment\n\nseed = 3 # trailing\n  se.tau =  2.5\n");
    CHECK(ok.seed == 3);
    CHECK(ok.se.tau == 2.5);

    SECTION("unknown key") {
        CHECK_THROWS_AS(parse_pipeline_config("nonsense.key = 1\n"), ConfigError);
    }
    SECTION("duplicate key") {
        CHECK_THROWS_AS(parse_pipeline_config("seed = 1\nseed = 2\n"), ConfigError);
    }
    SECTION("missing equals") {
        CHECK_THROWS_AS(parse_pipeline_config("seed 4\n"), ConfigError);
    }
    SECTION("non-numeric value") {
        CHECK_THROWS_AS(parse_pipeline_config("seed = seven\n"), ConfigError);
        CHECK_THROWS_AS(parse_pipeline_config("se.lr = fast\n"), ConfigError);
        CHECK_THROWS_AS(parse_pipeline_config("se.hard_train = maybe\n"), ConfigError);
    }
    SECTION("out-of-domain value") {
        CHECK_THROWS_AS(parse_pipeline_config("golden.space = euclidean\n"), ConfigError);
        CHECK_THROWS_AS(parse_pipeline_config("golden.kernel = cubic\n"), ConfigError);
        CHECK_THROWS_AS(parse_pipeline_config("eval.threads = 0\n"), ConfigError);
        CHECK_THROWS_AS(parse_pipeline_config("seed = -1\n"), ConfigError);
    }
}

TEST_CASE("scatter svg contains one circle per point, one polygon per star, and a full legend") {
    const int64_t n = 25;
    Tensor<double> coords({n, 2});
    Rng rng(9);
    for (int64_t i = 0; i < n; ++i) {
        coords.at(i, 0) = rng.normal();
        coords.at(i, 1) = rng.normal();
    }
    std::vector<uint8_t> classes;
    for (int64_t i = 0; i < n; ++i) classes.push_back(static_cast<uint8_t>(i % kNumClasses));
    std::vector<std::string> names;
    for (int c = 0; c < kNumClasses; ++c) names.push_back(class_name(static_cast<EventClass>(c)));

    const std::string svg = render_scatter_svg(coords, classes, names, {0, 7}, {});
    CHECK(count_substr(svg, "<circle ") == n);
    CHECK(count_substr(svg, "<polygon ") == 2);
    for (const auto& name : names) CHECK(svg.find(">" + name + "<") != std::string::npos);
    CHECK(svg.rfind("</svg>\n") == svg.size() - 7);

    SECTION("byte determinism") {
        CHECK(render_scatter_svg(coords, classes, names, {0, 7}, {}) == svg);
    }
    SECTION("input validation") {
        CHECK_THROWS_AS(render_scatter_svg(Tensor<double>({n, 3}), classes, names, {0}, {}), ConfigError);
        CHECK_THROWS_AS(render_scatter_svg(coords, {1, 2}, names, {0}, {}), ConfigError);
        CHECK_THROWS_AS(render_scatter_svg(coords, classes, names, {n}, {}), ConfigError);
        auto bad = classes;
        bad[3] = 10;
        CHECK_THROWS_AS(render_scatter_svg(coords, bad, names, {0}, {}), ConfigError);
    }
}

TEST_CASE("run manifest round-trips and rejects malformed files") {
    RunManifest m;
    m.config_hash = "abc123";
    m.stages.push_back({"synth", {{"a/b.wav", "ff00"}, {"c.jsonl", "0a0b"}}});
    m.stages.push_back({"embed", {{"e.eqe", "1234"}}});
    const std::string path = (fs::temp_directory_path() / "eqse_manifest_rt.json").string();
    write_run_manifest(path, m);
    RunManifest back = read_run_manifest(path);
    CHECK(back.config_hash == m.config_hash);
    REQUIRE(back.stages.size() == 2);
    CHECK(back.stages[0].artifacts == m.stages[0].artifacts);
    CHECK(back.find("embed") != nullptr);
    CHECK(back.find("evaluate") == nullptr);

    std::ofstream(path) << "not json at all";
    CHECK_THROWS_AS(read_run_manifest(path), DataError);
    std::ofstream(path) << "{\"stages\": []}";
    CHECK_THROWS_AS(read_run_manifest(path), DataError);
    CHECK_THROWS_AS(read_run_manifest("/nonexistent/manifest.json"), IoError);
}

TEST_CASE("visualize validates class coverage and golden membership") {
    EmbeddingSet set = fake_embeddings();
    const std::string svg = (fs::temp_directory_path() / "eqse_viz_err.svg").string();
    const std::string csv = (fs::temp_directory_path() / "eqse_viz_err.csv").string();

    SECTION("all ten classes must appear") {
        EmbeddingSet narrow = set;
        for (auto& r : narrow.records) r.class_idx = static_cast<uint8_t>(r.class_idx % 9);
        CHECK_THROWS_AS(
            visualize_embeddings(narrow, fake_golden_for("pt0", "pt1"), svg, csv, 5.0, 300, 1),
            DataError);
    }
    SECTION("golden clip ids must be rows of the set") {
        CHECK_THROWS_AS(
            visualize_embeddings(set, fake_golden_for("missing_a", "missing_b"), svg, csv, 5.0, 300, 1),
            DataError);
    }
    SECTION("valid inputs produce both artifacts and star the golden rows") {
        VisualizeResult res = visualize_embeddings(set, fake_golden_for("pt8", "pt9"), svg, csv, 5.0, 300, 1);
        CHECK(res.star_man == 8);
        CHECK(res.star_woman == 9);
        const std::string bytes = read_file(svg);
        CHECK(count_substr(bytes, "<circle ") == 16);
        CHECK(count_substr(bytes, "<polygon ") == 2);
        CHECK(count_substr(read_file(csv), "\n") == 17); // header + 16 rows
    }
}

TEST_CASE("fresh pipeline run executes every stage and records the full inventory") {
    const Fixture& fix = fixture();
    CHECK(fix.first_run.stages.size() == 7);
    CHECK(all_executed(fix.first_run));

    RunManifest m = read_run_manifest((fs::path(fix.dir) / "run_manifest.json").string());
    CHECK(m.config_hash == pipeline_config_hash(tiny_config()));
    std::set<std::string> listed;
    for (const auto& s : m.stages)
        for (const auto& [rel, hash] : s.artifacts) {
            listed.insert(rel);
            const std::string p = (fs::path(fix.dir) / rel).string();
            REQUIRE(fs::exists(p));
            CHECK(hash_file(p) == hash); // recorded hash matches bytes on disk
        }
    for (const std::string rel : {"sed/sed_manifest.jsonl", "se/se_manifest.jsonl", "sed_model.eqw",
                                  "sed_report.json", "embeddings.eqe", "golden.gq", "se_att.eqw", "se_report.json",
                                  "metrics.csv", "tsne.svg", "tsne_coords.csv"})
        CHECK(listed.count(rel) == 1);
}

TEST_CASE("re-running with the same config skips every stage") {
    PipelineOutcome again = run_pipeline(tiny_config(), fixture().dir);
    CHECK(again.stages.size() == 7);
    for (const auto& s : again.stages) CHECK_FALSE(s.executed);
}

TEST_CASE("deleting the metrics table re-runs only evaluate and visualize") {
    const std::string dir = copy_fixture("metrics");
    const std::string before_svg = read_file((fs::path(dir) / "tsne.svg").string());
    fs::remove(fs::path(dir) / "metrics.csv");

    PipelineOutcome out = run_pipeline(tiny_config(), dir);
    CHECK_FALSE(out.executed("synth"));
    CHECK_FALSE(out.executed("train-sed"));
    CHECK_FALSE(out.executed("embed"));
    CHECK_FALSE(out.executed("select-queries"));
    CHECK_FALSE(out.executed("train-se"));
    CHECK(out.executed("evaluate"));
    CHECK(out.executed("visualize"));

    // rebuilt artifacts are byte-identical to the originals
    CHECK(read_file((fs::path(dir) / "metrics.csv").string()) ==
          read_file((fs::path(fixture().dir) / "metrics.csv").string()));
    CHECK(read_file((fs::path(dir) / "tsne.svg").string()) == before_svg);
}

TEST_CASE("corrupting an artifact re-runs its stage and everything downstream") {
    const std::string dir = copy_fixture("corrupt");
    std::ofstream((fs::path(dir) / "embeddings.eqe").string(), std::ios::binary) << "garbage";

    PipelineOutcome out = run_pipeline(tiny_config(), dir);
    CHECK_FALSE(out.executed("synth"));
    CHECK_FALSE(out.executed("train-sed"));
    CHECK(out.executed("embed"));
    CHECK(out.executed("select-queries"));
    CHECK(out.executed("train-se"));
    CHECK(out.executed("evaluate"));
    CHECK(out.executed("visualize"));

    // the rebuilt chain lands on the same bytes
    CHECK(read_file((fs::path(dir) / "embeddings.eqe").string()) ==
          read_file((fs::path(fixture().dir) / "embeddings.eqe").string()));
    CHECK(read_file((fs::path(dir) / "metrics.csv").string()) ==
          read_file((fs::path(fixture().dir) / "metrics.csv").string()));
}

TEST_CASE("changing the config invalidates the cache from the top") {
    const std::string dir = copy_fixture("cfgchange");
    PipelineConfig changed = tiny_config();
    changed.viz_iters = 301;
    PipelineRunner runner(changed, dir);
    PipelineOutcome out = runner.run("synth");
    REQUIRE(out.stages.size() == 1);
    CHECK(out.executed("synth"));
    CHECK(read_run_manifest(runner.manifest_path()).config_hash == pipeline_config_hash(changed));

    CHECK_THROWS_AS(runner.run("no-such-stage"), ConfigError);
}

TEST_CASE("a failing stage reports its name and keeps earlier artifacts") {
    const std::string dir = (fs::temp_directory_path() / "eqse_pipeline_fail").string();
    fs::remove_all(dir);
    PipelineConfig bad = tiny_config();
    bad.se_data.test_pairs = 0; // classifier data builds, enhancement data cannot

    bool threw = false;
    try {
        run_pipeline(bad, dir);
    } catch (const ConfigError& e) {
        threw = true;
        CHECK(std::string(e.what()).rfind("stage synth: ", 0) == 0);
    }
    CHECK(threw);
    CHECK(fs::exists(fs::path(dir) / "sed" / "sed_manifest.jsonl")); // partial output retained
}

TEST_CASE("sed checkpoints reload against the right architecture only") {
    const std::string ckpt = (fs::path(fixture().dir) / "sed_model.eqw").string();
    SedConfig cfg;
    auto model = load_sed_model<float>(ckpt, cfg);
    CHECK(model.params.total_numel() > 0);

    SedConfig other;
    other.dims = {16, 32, 48, 64};
    CHECK_THROWS_AS(load_sed_model<float>(ckpt, other), ConfigError);
}

TEST_CASE("ranl pool picking is seeded and validates gender counts") {
    EmbeddingSet set = read_embeddings((fs::path(fixture().dir) / "embeddings.eqe").string());
    auto pool_a = detail::pick_ranl_pool(set, 11);
    auto pool_b = detail::pick_ranl_pool(set, 11);
    REQUIRE(pool_a.size() == 10);
    CHECK(pool_a == pool_b);
    int men = 0, women = 0;
    for (const auto& [g, vec] : pool_a) (g == 0 ? men : women)++;
    CHECK(men == 5);
    CHECK(women == 5);

    EmbeddingSet thin = set;
    thin.records.erase(std::remove_if(thin.records.begin(), thin.records.end(),
                                      [](const EmbeddingRecord& r) { return r.gender == 0; }),
                       thin.records.end());
    CHECK_THROWS_AS(detail::pick_ranl_pool(thin, 11), DataError);
}

TEST_CASE("clean target embeddings are keyed by the noisy clip id") {
    const std::string manifest = (fs::path(fixture().dir) / "se" / "se_manifest.jsonl").string();
    auto sed = load_sed_model<float>((fs::path(fixture().dir) / "sed_model.eqw").string(), SedConfig{});
    auto targets = clean_target_embeddings(sed, manifest, "train", 1);
    CHECK(targets.size() == 8);
    for (const auto& r : read_manifest(manifest))
        if (r.split == "train" && r.clean_path) CHECK(targets.count(r.clip_id) == 1);
    CHECK_THROWS_AS(clean_target_embeddings(sed, manifest, "nosuch", 1), DataError);
}

TEST_CASE("cli rejects bad invocations with machine-parseable errors") {
    std::string err;
    CHECK(run_cli("", &err) == 2);
    CHECK(run_cli("frobnicate", &err) == 2);
    CHECK(err.rfind("error: config: ", 0) == 0);
    CHECK(run_cli("synth --out /tmp/x --bogus 1", &err) == 2);
    CHECK(err.rfind("error: config: ", 0) == 0);
    CHECK(err.find("\n") == std::string::npos);
    CHECK(run_cli("train-sed --manifest /does/not/exist.jsonl --out /tmp/x.eqw", &err) == 5);
    CHECK(err.rfind("error: io: ", 0) == 0);
    CHECK(run_cli("train-se --manifest x --policy gen --out y", &err) == 2);
    CHECK(err.rfind("error: config: ", 0) == 0);

    const std::string badcfg = (fs::temp_directory_path() / "eqse_bad.cfg").string();
    std::ofstream(badcfg) << "bogus.key = 1\n";
    CHECK(run_cli("synth --config " + badcfg + " --out /tmp/never", &err) == 2);
    CHECK(err.find("bogus.key") != std::string::npos);
}

TEST_CASE("cli visualize reproduces the pipeline artifact byte for byte") {
    const Fixture& fix = fixture();
    const std::string svg = (fs::temp_directory_path() / "eqse_cli_viz.svg").string();
    const std::string csv = (fs::temp_directory_path() / "eqse_cli_viz.csv").string();
    const int code = run_cli("visualize --config " + fix.dir + "/config.txt --embeddings " + fix.dir +
                             "/embeddings.eqe --golden " + fix.dir + "/golden.gq --out " + svg + " --csv " + csv);
    REQUIRE(code == 0);
    CHECK(read_file(svg) == read_file((fs::path(fix.dir) / "tsne.svg").string()));
    CHECK(read_file(csv) == read_file((fs::path(fix.dir) / "tsne_coords.csv").string()));
}

TEST_CASE("cli evaluate and enhance run against pipeline artifacts") {
    const Fixture& fix = fixture();
    const std::string out_csv = (fs::temp_directory_path() / "eqse_cli_eval.csv").string();
    REQUIRE(run_cli("evaluate --config " + fix.dir + "/config.txt --manifest " + fix.dir +
                    "/se/se_manifest.jsonl --model " + fix.dir + "/se_att.eqw --policy att --golden " + fix.dir +
                    "/golden.gq --out " + out_csv) == 0);
    CHECK(read_file(out_csv) == read_file((fs::path(fix.dir) / "metrics.csv").string()));

    ManifestRecord first;
    for (const auto& r : read_manifest((fs::path(fix.dir) / "se" / "se_manifest.jsonl").string()))
        if (r.split == "test" && r.clean_path) {
            first = r;
            break;
        }
    const std::string in_wav = (fs::path(fix.dir) / "se" / first.path).string();
    const std::string out_wav = (fs::temp_directory_path() / "eqse_cli_enh.wav").string();
    REQUIRE(run_cli("enhance --config " + fix.dir + "/config.txt --model " + fix.dir +
                    "/se_att.eqw --policy att --golden " + fix.dir + "/golden.gq --in " + in_wav + " --out " +
                    out_wav) == 0);
    CHECK(wav_read(out_wav).size() == wav_read(in_wav).size());

    std::string err;
    CHECK(run_cli("enhance --config " + fix.dir + "/config.txt --model " + fix.dir +
                      "/se_att.eqw --policy per --in " + in_wav + " --out " + out_wav,
                  &err) == 2);
    CHECK(err.rfind("error: config: ", 0) == 0);
}
