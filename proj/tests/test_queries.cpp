#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "eqse/queries.hpp"

using namespace eqse;

namespace {

Tensor<double> two_blobs(int per_blob, double sigma, double cx, double cy, uint64_t seed) {
    Rng rng = Rng::seeded(seed, "test:blobs");
    Tensor<double> pts({2 * per_blob, 2});
    for (int i = 0; i < per_blob; ++i) {
        pts.at(i, 0) = rng.normal() * sigma;
        pts.at(i, 1) = rng.normal() * sigma;
    }
    for (int i = per_blob; i < 2 * per_blob; ++i) {
        pts.at(i, 0) = cx + rng.normal() * sigma;
        pts.at(i, 1) = cy + rng.normal() * sigma;
    }
    return pts;
}

/// Independent oracle: kernel density evaluated on a dense grid, argmax
/// returned. Grid spacing bounds how far this can sit from the true mode.
struct GridMax {
    double x = 0, y = 0, density = 0;
};

GridMax kde_grid_argmax(const Tensor<double>& pts, double h, double x_lo, double x_hi, double y_lo,
                        double y_hi, double step) {
    GridMax best;
    best.density = -1;
    const int64_t n = pts.shape[0];
    for (double gx = x_lo; gx <= x_hi; gx += step) {
        for (double gy = y_lo; gy <= y_hi; gy += step) {
            double dens = 0;
            for (int64_t i = 0; i < n; ++i) {
                const double dx = gx - pts.at(i, 0), dy = gy - pts.at(i, 1);
                dens += std::exp(-(dx * dx + dy * dy) / (2 * h * h));
            }
            if (dens > best.density) best = {gx, gy, dens};
        }
    }
    return best;
}

EmbeddingRecord rec(const std::string& id, uint8_t cls, int gender, std::vector<float> v) {
    EmbeddingRecord r;
    r.clip_id = id;
    r.class_idx = cls;
    r.gender = gender;
    r.vec = std::move(v);
    return r;
}

std::filesystem::path tmp_path(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / "eqse_queries_tests";
    std::filesystem::create_directories(p);
    return p / name;
}

} // namespace

// ---------------------------------------------------------------------------
// mean shift

TEST_CASE("mean shift on a single point returns that point") {
    Tensor<double> pts({1, 3});
    pts.data = {1.5, -2.0, 0.25};
    MeanShiftResult r = mean_shift(pts, 1.0);
    REQUIRE(r.modes.shape == Shape{1, 3});
    CHECK(r.modes.data == pts.data);
    CHECK(r.assignments == std::vector<int>{0});
    CHECK(r.basin_sizes == std::vector<int>{1});
}

TEST_CASE("mean shift finds both blob modes near the grid KDE argmax") {
    Tensor<double> pts = two_blobs(60, 0.3, 5.0, 5.0, 42);
    MeanShiftResult r = mean_shift(pts, 1.0);
    REQUIRE(r.modes.shape[0] == 2);

    GridMax lo = kde_grid_argmax(pts, 1.0, -1.5, 1.5, -1.5, 1.5, 0.01);
    GridMax hi = kde_grid_argmax(pts, 1.0, 3.5, 6.5, 3.5, 6.5, 0.01);
    // match each found mode to its oracle by proximity
    for (int64_t m = 0; m < 2; ++m) {
        const double mx = r.modes.at(m, 0), my = r.modes.at(m, 1);
        const GridMax& target = mx < 2.5 ? lo : hi;
        CHECK(std::hypot(mx - target.x, my - target.y) < 0.1);
    }
    // every point belongs to the mode of its own blob
    for (int i = 0; i < 60; ++i) CHECK(r.assignments[size_t(i)] == r.assignments[0]);
    for (int i = 60; i < 120; ++i) CHECK(r.assignments[size_t(i)] == r.assignments[60]);
    CHECK(r.assignments[0] != r.assignments[60]);
    CHECK(r.basin_sizes == std::vector<int>{60, 60});
}

TEST_CASE("mean shift commutes exactly with scaling by a power of two") {
    Tensor<double> pts = two_blobs(20, 0.3, 4.0, 3.0, 7);
    Tensor<double> scaled = pts;
    for (auto& v : scaled.data) v *= 2.0;

    MeanShiftResult a = mean_shift(pts, 1.0, Kernel::gaussian, 300, 1e-6);
    MeanShiftResult b = mean_shift(scaled, 2.0, Kernel::gaussian, 300, 2e-6);
    REQUIRE(a.modes.shape == b.modes.shape);
    for (size_t i = 0; i < a.modes.data.size(); ++i) CHECK(b.modes.data[i] == 2.0 * a.modes.data[i]);
    CHECK(a.assignments == b.assignments);
}

TEST_CASE("returned modes are fixed points of the update") {
    Tensor<double> pts = two_blobs(40, 0.25, 6.0, -2.0, 11);
    const double h = 0.8;
    MeanShiftResult r = mean_shift(pts, h);
    for (int64_t m = 0; m < r.modes.shape[0]; ++m) {
        std::vector<double> x = {r.modes.at(m, 0), r.modes.at(m, 1)};
        std::vector<double> next(2);
        detail::mean_shift_step(pts, x, h, Kernel::gaussian, next);
        CHECK(std::hypot(next[0] - x[0], next[1] - x[1]) < 1e-4);
    }
}

TEST_CASE("flat kernel averages only points inside the window") {
    Tensor<double> pts({3, 1});
    pts.data = {0.0, 0.4, 10.0};
    MeanShiftResult r = mean_shift(pts, 1.0, Kernel::flat);
    REQUIRE(r.modes.shape[0] == 2);
    CHECK(r.modes.at(0, 0) == Catch::Approx(0.2).margin(1e-9));
    CHECK(r.modes.at(1, 0) == Catch::Approx(10.0).margin(1e-12));
    CHECK(r.basin_sizes == std::vector<int>{2, 1});
}

TEST_CASE("mean shift validates bandwidth and rank") {
    Tensor<double> pts({2, 2});
    CHECK_THROWS_AS(mean_shift(pts, 0.0), ConfigError);
    CHECK_THROWS_AS(mean_shift(pts, -1.0), ConfigError);
    Tensor<double> flat({4});
    CHECK_THROWS_AS(mean_shift(flat, 1.0), ConfigError);
}

// ---------------------------------------------------------------------------
// silhouette

TEST_CASE("silhouette is 1 for two coincident clusters far apart") {
    Tensor<double> pts({6, 2});
    pts.data = {0, 0, 0, 0, 0, 0, 10, 10, 10, 10, 10, 10};
    CHECK(silhouette(pts, {0, 0, 0, 1, 1, 1}) == Catch::Approx(1.0).margin(1e-15));
}

TEST_CASE("silhouette matches a hand-worked four point case") {
    Tensor<double> pts({4, 1});
    pts.data = {0, 1, 10, 11};
    // a is always the lone same-label distance, b the mean of the two others
    const double s0 = (10.5 - 1.0) / 10.5;
    const double s1 = (9.5 - 1.0) / 9.5;
    const double s2 = (9.5 - 1.0) / 9.5;
    const double s3 = (10.5 - 1.0) / 10.5;
    const double expected = (s0 + s1 + s2 + s3) / 4.0;
    CHECK(silhouette(pts, {0, 0, 1, 1}) == Catch::Approx(expected).margin(1e-12));
}

TEST_CASE("random labels on one blob give near zero silhouette") {
    Rng rng = Rng::seeded(3, "test:silhouette");
    Tensor<double> pts = Tensor<double>::randn({200, 2}, rng);
    std::vector<int> labels(200);
    for (auto& l : labels) l = static_cast<int>(rng.randint(2));
    CHECK(std::abs(silhouette(pts, labels)) < 0.1);
}

TEST_CASE("silhouette is invariant under rotation") {
    Tensor<double> pts = two_blobs(25, 0.4, 3.0, 1.0, 5);
    std::vector<int> labels(50);
    for (int i = 25; i < 50; ++i) labels[size_t(i)] = 1;
    const double base = silhouette(pts, labels);
    const double c = std::cos(0.7), s = std::sin(0.7);
    Tensor<double> rot({50, 2});
    for (int64_t i = 0; i < 50; ++i) {
        rot.at(i, 0) = c * pts.at(i, 0) - s * pts.at(i, 1);
        rot.at(i, 1) = s * pts.at(i, 0) + c * pts.at(i, 1);
    }
    CHECK(silhouette(rot, labels) == Catch::Approx(base).margin(1e-9));
}

TEST_CASE("singleton labels are excluded from the silhouette") {
    Tensor<double> pts({7, 1});
    pts.data = {0, 1, 2, 10, 11, 12, 100};
    const double with_singleton = silhouette(pts, {0, 0, 0, 1, 1, 1, 2});
    Tensor<double> trimmed({6, 1});
    trimmed.data = {0, 1, 2, 10, 11, 12};
    const double without = silhouette(trimmed, {0, 0, 0, 1, 1, 1});
    CHECK(with_singleton == without);

    Tensor<double> tiny({3, 1});
    tiny.data = {0, 1, 2};
    CHECK_THROWS_AS(silhouette(tiny, {0, 0, 1}), DataError); // label 1 is a singleton
    CHECK_THROWS_AS(silhouette(tiny, {0, 1, 2}), DataError);
}

// ---------------------------------------------------------------------------
// t-SNE

TEST_CASE("tsne separates two tight clusters") {
    Rng rng = Rng::seeded(9, "test:tsne");
    Tensor<double> pts({40, 10});
    std::vector<int> labels(40);
    for (int64_t i = 0; i < 40; ++i) {
        const double base = i < 20 ? 0.0 : 20.0;
        labels[size_t(i)] = i < 20 ? 0 : 1;
        for (int64_t k = 0; k < 10; ++k) pts.at(i, k) = base + 0.1 * rng.normal();
    }
    TsneResult r = tsne(pts, 5.0, 1000, 1);
    REQUIRE(r.coords.shape == Shape{40, 2});
    CHECK(r.coords.all_finite());
    CHECK(silhouette(r.coords, labels) > 0.8);
}

TEST_CASE("tsne KL drops after exaggeration ends") {
    Rng rng = Rng::seeded(14, "test:tsne-kl");
    Tensor<double> pts({30, 6});
    for (int64_t i = 0; i < 30; ++i)
        for (int64_t k = 0; k < 6; ++k) pts.at(i, k) = (i < 15 ? 0.0 : 8.0) + 0.5 * rng.normal();
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        TsneResult r = tsne(pts, 5.0, 600, seed);
        CHECK(r.kl_final < r.kl_end_exaggeration);
        CHECK(r.kl_final > 0.0);
        REQUIRE_FALSE(r.kl_trace.empty());
        for (double kl : r.kl_trace) CHECK(std::isfinite(kl));
    }
}

TEST_CASE("tsne is deterministic per seed") {
    Tensor<double> pts = two_blobs(15, 0.5, 6.0, 6.0, 21);
    TsneResult a = tsne(pts, 5.0, 300, 3);
    TsneResult b = tsne(pts, 5.0, 300, 3);
    CHECK(a.coords.data == b.coords.data);
    CHECK(a.kl_final == b.kl_final);
    TsneResult c = tsne(pts, 5.0, 300, 4);
    CHECK(a.coords.data != c.coords.data);
}

TEST_CASE("tsne validates its preconditions") {
    Tensor<double> pts = two_blobs(10, 0.5, 4.0, 4.0, 2);
    CHECK_THROWS_AS(tsne(pts, 4.0, 500), ConfigError);  // below minimum perplexity
    CHECK_THROWS_AS(tsne(pts, 7.0, 500), ConfigError);  // above (N-1)/3 for N=20
    CHECK_THROWS_AS(tsne(pts, 5.0, 100), ConfigError);  // too few iterations
    Tensor<double> flat({10});
    CHECK_THROWS_AS(tsne(flat, 5.0, 500), ConfigError);
    Tensor<double> same({20, 3});
    CHECK_THROWS_AS(tsne(same, 5.0, 500), DataError);   // all points identical
}

// ---------------------------------------------------------------------------
// golden query selection

namespace {

/// Embedding set whose man records are a 12 point clump (one member exactly
/// at the clump centre) plus 5 scattered outliers, mirrored for women at an
/// offset. The densest-member oracle is the planted centre.
EmbeddingSet planted_set() {
    EmbeddingSet set;
    set.dim = 2;
    auto add_class = [&set](const std::string& prefix, uint8_t cls, int gender, double ox, double oy) {
        set.records.push_back(rec(prefix + "_center", cls, gender,
                                  {static_cast<float>(ox), static_cast<float>(oy)}));
        for (int i = 0; i < 11; ++i) {
            const double ang = 2.0 * M_PI * i / 11.0;
            set.records.push_back(rec(prefix + "_ring" + std::to_string(i), cls, gender,
                                      {static_cast<float>(ox + 0.1 * std::cos(ang)),
                                       static_cast<float>(oy + 0.1 * std::sin(ang))}));
        }
        const double fx[5] = {3.0, -3.0, 4.0, -2.5, 3.5};
        const double fy[5] = {3.0, 2.0, -1.0, -3.0, 0.5};
        for (int i = 0; i < 5; ++i)
            set.records.push_back(rec(prefix + "_far" + std::to_string(i), cls, gender,
                                      {static_cast<float>(ox + fx[i]), static_cast<float>(oy + fy[i])}));
    };
    add_class("man", 8, 0, 0.0, 0.0);
    add_class("woman", 9, 1, 10.0, 10.0);
    return set;
}

} // namespace

TEST_CASE("golden query lands on the planted density peak") {
    EmbeddingSet set = planted_set();
    GoldenOptions opt;
    opt.bandwidth = 0.5;
    GoldenQuerySet g = select_golden(set, opt);
    REQUIRE(g.dim == 2);
    nlohmann::json prov = nlohmann::json::parse(g.provenance_json);
    CHECK(prov.at("clip_id_man") == "man_center");
    CHECK(prov.at("clip_id_woman") == "woman_center");
    CHECK(g.man == std::vector<float>{0.0f, 0.0f});
    CHECK(g.woman == std::vector<float>{10.0f, 10.0f});

    // independent confirmation: grid KDE argmax over the man points sits in
    // the clump, and the planted centre is its nearest member
    Tensor<double> man_pts({17, 2});
    int64_t row = 0;
    for (const auto& r : set.records)
        if (r.gender == 0) {
            man_pts.at(row, 0) = r.vec[0];
            man_pts.at(row, 1) = r.vec[1];
            ++row;
        }
    REQUIRE(row == 17);
    GridMax peak = kde_grid_argmax(man_pts, 0.5, -3.5, 4.5, -3.5, 3.5, 0.02);
    CHECK(std::hypot(peak.x, peak.y) < 0.1);
}

TEST_CASE("every returned golden query is an actual class member") {
    EmbeddingSet set = planted_set();
    GoldenOptions opt;
    opt.bandwidth = 0.5;
    GoldenQuerySet g = select_golden(set, opt);
    auto is_member = [&set](const std::vector<float>& v, int gender) {
        for (const auto& r : set.records)
            if (r.gender == gender && r.vec == v) return true;
        return false;
    };
    CHECK(is_member(g.man, 0));
    CHECK(is_member(g.woman, 1));
}

TEST_CASE("identical class embeddings select that vector with fallback bandwidth") {
    EmbeddingSet set;
    set.dim = 3;
    const std::vector<float> vm = {0.5f, -1.25f, 2.0f};
    const std::vector<float> vw = {4.0f, 4.5f, -0.5f};
    for (int i = 0; i < 10; ++i) {
        set.records.push_back(rec("m" + std::to_string(i), 8, 0, vm));
        set.records.push_back(rec("w" + std::to_string(i), 9, 1, vw));
    }
    GoldenQuerySet g = select_golden(set);
    CHECK(g.man == vm);
    CHECK(g.woman == vw);
    nlohmann::json prov = nlohmann::json::parse(g.provenance_json);
    CHECK(prov.at("bandwidth_man").get<double>() == 1.0);
    CHECK(prov.at("bandwidth_woman").get<double>() == 1.0);
}

TEST_CASE("automatic bandwidth is half the median within class distance") {
    EmbeddingSet set;
    set.dim = 1;
    for (int i = 0; i < 10; ++i) {
        set.records.push_back(rec("m" + std::to_string(i), 8, 0, {static_cast<float>(i)}));
        set.records.push_back(rec("w" + std::to_string(i), 9, 1, {static_cast<float>(100 + 2 * i)}));
    }
    GoldenQuerySet g = select_golden(set);
    nlohmann::json prov = nlohmann::json::parse(g.provenance_json);

    // oracle: all 45 pairwise distances among 0..9, median by nth_element
    std::vector<double> dists;
    for (int i = 0; i < 10; ++i)
        for (int j = i + 1; j < 10; ++j) dists.push_back(std::abs(double(i) - double(j)));
    std::nth_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(dists.size() / 2), dists.end());
    const double expected_man = 0.5 * dists[dists.size() / 2];
    CHECK(prov.at("bandwidth_man").get<double>() == expected_man);
    CHECK(prov.at("bandwidth_woman").get<double>() == 2.0 * expected_man);
}

TEST_CASE("man selection ignores woman and event records") {
    EmbeddingSet set = planted_set();
    GoldenOptions opt;
    opt.bandwidth = 0.5;
    GoldenQuerySet base = select_golden(set, opt);

    EmbeddingSet extended = set;
    for (int i = 0; i < 7; ++i)
        extended.records.push_back(rec("w_extra" + std::to_string(i), 9, 1,
                                       {static_cast<float>(50 + i), -30.0f}));
    for (int i = 0; i < 5; ++i)
        extended.records.push_back(rec("car" + std::to_string(i), 0, 2,
                                       {-40.0f, static_cast<float>(i)}));
    GoldenQuerySet moved = select_golden(extended, opt);
    CHECK(moved.man == base.man);
}

TEST_CASE("golden selection requires ten embeddings per speech class") {
    EmbeddingSet set = planted_set();
    EmbeddingSet few_men;
    few_men.dim = set.dim;
    int kept = 0;
    for (const auto& r : set.records)
        if (r.gender != 0 || kept++ < 9) few_men.records.push_back(r);
    CHECK_THROWS_WITH(select_golden(few_men), Catch::Matchers::ContainsSubstring("man"));

    EmbeddingSet no_women;
    no_women.dim = set.dim;
    for (const auto& r : set.records)
        if (r.gender == 0) no_women.records.push_back(r);
    CHECK_THROWS_AS(select_golden(no_women), DataError);
}

TEST_CASE("tsne2d space still returns latent member vectors") {
    Rng rng = Rng::seeded(31, "test:golden-tsne");
    EmbeddingSet set;
    set.dim = 8;
    for (int i = 0; i < 12; ++i) {
        std::vector<float> v(8), w(8);
        for (int k = 0; k < 8; ++k) {
            v[size_t(k)] = static_cast<float>(0.2 * rng.normal());
            w[size_t(k)] = static_cast<float>(9.0 + 0.2 * rng.normal());
        }
        set.records.push_back(rec("m" + std::to_string(i), 8, 0, v));
        set.records.push_back(rec("w" + std::to_string(i), 9, 1, w));
    }
    GoldenOptions opt;
    opt.space = "tsne2d";
    opt.perplexity = 5.0;
    opt.tsne_iters = 300;
    GoldenQuerySet g = select_golden(set, opt);
    auto is_member = [&set](const std::vector<float>& v, int gender) {
        for (const auto& r : set.records)
            if (r.gender == gender && r.vec == v) return true;
        return false;
    };
    CHECK(is_member(g.man, 0));
    CHECK(is_member(g.woman, 1));
    nlohmann::json prov = nlohmann::json::parse(g.provenance_json);
    CHECK(prov.at("space") == "tsne2d");

    GoldenQuerySet again = select_golden(set, opt);
    CHECK(again.man == g.man);
    CHECK(again.woman == g.woman);
}

TEST_CASE("golden selection rejects unknown spaces") {
    EmbeddingSet set = planted_set();
    GoldenOptions opt;
    opt.space = "pca";
    CHECK_THROWS_AS(select_golden(set, opt), ConfigError);
}

// ---------------------------------------------------------------------------
// golden query file format

TEST_CASE("golden query files round trip bit exactly") {
    EmbeddingSet set = planted_set();
    GoldenOptions opt;
    opt.bandwidth = 0.5;
    GoldenQuerySet g = select_golden(set, opt);
    const auto path = tmp_path("golden.gq");
    write_golden(path.string(), g);
    GoldenQuerySet back = read_golden(path.string());
    CHECK(back.dim == g.dim);
    CHECK(back.man == g.man);
    CHECK(back.woman == g.woman);
    CHECK(back.provenance_json == g.provenance_json);

    const auto rewrite = tmp_path("golden2.gq");
    write_golden(rewrite.string(), back);
    CHECK(hash_file(path.string()) == hash_file(rewrite.string()));
}

TEST_CASE("golden query reader rejects corrupted files") {
    GoldenQuerySet g;
    g.dim = 2;
    g.man = {1.0f, 2.0f};
    g.woman = {3.0f, 4.0f};
    g.provenance_json = "{}";
    const auto path = tmp_path("corrupt.gq");
    write_golden(path.string(), g);

    auto bytes = ByteReader::from_file(path.string()).bytes;
    {
        std::string bad = bytes;
        bad[0] = 'X';
        const auto p = tmp_path("badmagic.gq");
        ByteWriter w;
        w.str(bad);
        w.save(p.string());
        CHECK_THROWS_AS(read_golden(p.string()), IoError);
    }
    {
        std::string bad = bytes.substr(0, bytes.size() - 1);
        const auto p = tmp_path("trunc.gq");
        ByteWriter w;
        w.str(bad);
        w.save(p.string());
        CHECK_THROWS_AS(read_golden(p.string()), IoError);
    }
    {
        std::string bad = bytes + "z";
        const auto p = tmp_path("trail.gq");
        ByteWriter w;
        w.str(bad);
        w.save(p.string());
        CHECK_THROWS_AS(read_golden(p.string()), IoError);
    }
    {
        GoldenQuerySet mismatched = g;
        mismatched.man.pop_back();
        CHECK_THROWS_AS(write_golden(tmp_path("mismatch.gq").string(), mismatched), IoError);
    }
}
