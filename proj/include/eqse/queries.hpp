#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "eqse/sed.hpp"
#include "eqse/tsne.hpp"

namespace eqse {

enum class Kernel { gaussian, flat };

struct MeanShiftResult {
    Tensor<double> modes;          // (M, d), first-converged representative per merged mode
    std::vector<int> assignments;  // mode index per input point
    std::vector<int> basin_sizes;  // points assigned to each mode
};

namespace detail {

inline double sq_dist(const double* a, const double* b, int64_t d) {
    double acc = 0;
    for (int64_t k = 0; k < d; ++k) {
        const double diff = a[k] - b[k];
        acc += diff * diff;
    }
    return acc;
}

/// One kernel-weighted mean update; writes the new position into `out`.
inline void mean_shift_step(const Tensor<double>& points, const std::vector<double>& x, double bandwidth,
                            Kernel kernel, std::vector<double>& out) {
    const int64_t n = points.shape[0], d = points.shape[1];
    const double inv_2h2 = 1.0 / (2.0 * bandwidth * bandwidth);
    std::fill(out.begin(), out.end(), 0.0);
    double wsum = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double* pi = points.data.data() + i * d;
        const double d2 = sq_dist(x.data(), pi, d);
        double w;
        if (kernel == Kernel::gaussian) {
            w = std::exp(-d2 * inv_2h2);
        } else {
            w = d2 <= bandwidth * bandwidth ? 1.0 : 0.0;
        }
        if (w == 0.0) continue;
        wsum += w;
        for (int64_t k = 0; k < d; ++k) out[size_t(k)] += w * pi[k];
    }
    if (wsum == 0.0) return; // flat kernel with empty window: stay put
    for (auto& v : out) v /= wsum;
}

} // namespace detail

/// Mode seeking: every point ascends its kernel-density gradient until the
/// step shrinks below tol; converged positions closer than bandwidth/2 are
/// merged, keeping the first representative.
inline MeanShiftResult mean_shift(const Tensor<double>& points, double bandwidth,
                                  Kernel kernel = Kernel::gaussian, int max_iters = 300,
                                  double tol = 1e-6) {
    if (points.shape.size() != 2 || points.shape[0] < 1) throw ConfigError("mean_shift: points must be (N>=1, d)");
    if (bandwidth <= 0) throw ConfigError("mean_shift: bandwidth must be positive, got " + std::to_string(bandwidth));
    const int64_t n = points.shape[0], d = points.shape[1];
    std::vector<std::vector<double>> converged(static_cast<size_t>(n));
    std::vector<double> x(static_cast<size_t>(d)), next(static_cast<size_t>(d));
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t k = 0; k < d; ++k) x[size_t(k)] = points.data[size_t(i * d + k)];
        for (int iter = 0; iter < max_iters; ++iter) {
            detail::mean_shift_step(points, x, bandwidth, kernel, next);
            const double moved = std::sqrt(detail::sq_dist(x.data(), next.data(), d));
            x = next;
            if (moved < tol) break;
        }
        converged[size_t(i)] = x;
    }

    MeanShiftResult result;
    result.assignments.resize(static_cast<size_t>(n), -1);
    std::vector<std::vector<double>> modes;
    const double merge_r2 = (bandwidth / 2.0) * (bandwidth / 2.0);
    for (int64_t i = 0; i < n; ++i) {
        int found = -1;
        for (size_t m = 0; m < modes.size(); ++m) {
            if (detail::sq_dist(converged[size_t(i)].data(), modes[m].data(), d) < merge_r2) {
                found = static_cast<int>(m);
                break;
            }
        }
        if (found < 0) {
            found = static_cast<int>(modes.size());
            modes.push_back(converged[size_t(i)]);
        }
        result.assignments[size_t(i)] = found;
    }
    result.basin_sizes.assign(modes.size(), 0);
    for (int a : result.assignments) result.basin_sizes[size_t(a)]++;
    result.modes = Tensor<double>({static_cast<int64_t>(modes.size()), d});
    for (size_t m = 0; m < modes.size(); ++m)
        for (int64_t k = 0; k < d; ++k) result.modes.at(static_cast<int64_t>(m), k) = modes[m][size_t(k)];
    return result;
}

/// Mean silhouette coefficient with Euclidean distances. Labels occurring
/// once are excluded (with a warning); at least two multi-point labels must
/// remain.
inline double silhouette(const Tensor<double>& points, const std::vector<int>& labels) {
    if (points.shape.size() != 2) throw ConfigError("silhouette: points must be (N, d)");
    const int64_t n = points.shape[0], d = points.shape[1];
    if (labels.size() != static_cast<size_t>(n)) throw ConfigError("silhouette: one label per point required");
    std::vector<int> distinct;
    for (int l : labels)
        if (std::find(distinct.begin(), distinct.end(), l) == distinct.end()) distinct.push_back(l);
    std::vector<int> kept;
    for (int l : distinct) {
        const auto count = std::count(labels.begin(), labels.end(), l);
        if (count >= 2) {
            kept.push_back(l);
        } else {
            log_info("silhouette: excluding singleton label " + std::to_string(l));
        }
    }
    if (kept.size() < 2) throw DataError("silhouette: need at least 2 labels with >= 2 points each");

    double total = 0.0;
    int64_t used = 0;
    for (int64_t i = 0; i < n; ++i) {
        if (std::find(kept.begin(), kept.end(), labels[size_t(i)]) == kept.end()) continue;
        double a = 0.0;
        int64_t a_count = 0;
        std::vector<double> b_sum(kept.size(), 0.0);
        std::vector<int64_t> b_count(kept.size(), 0);
        for (int64_t j = 0; j < n; ++j) {
            if (j == i) continue;
            const auto pos = std::find(kept.begin(), kept.end(), labels[size_t(j)]);
            if (pos == kept.end()) continue;
            const double dist = std::sqrt(detail::sq_dist(points.data.data() + i * d, points.data.data() + j * d, d));
            if (labels[size_t(j)] == labels[size_t(i)]) {
                a += dist;
                ++a_count;
            } else {
                const size_t k = static_cast<size_t>(pos - kept.begin());
                b_sum[k] += dist;
                b_count[k]++;
            }
        }
        a /= static_cast<double>(a_count);
        double b = std::numeric_limits<double>::infinity();
        for (size_t k = 0; k < kept.size(); ++k)
            if (b_count[k] > 0) b = std::min(b, b_sum[k] / static_cast<double>(b_count[k]));
        const double denom = std::max(a, b);
        total += denom == 0.0 ? 0.0 : (b - a) / denom;
        ++used;
    }
    return total / static_cast<double>(used);
}

// ---------------------------------------------------------------------------
// Golden queries ("GQ01"): the densest man and woman embeddings.

inline constexpr char kGoldenMagic[] = "GQ01";

struct GoldenQuerySet {
    uint32_t dim = 0;
    std::vector<float> man, woman;
    std::string provenance_json; // stored verbatim for bit-exact round-trips
};

struct GoldenOptions {
    std::string space = "latent"; // "latent" or "tsne2d"
    double bandwidth = 0;         // <= 0 selects 0.5 x median within-class pairwise distance
    Kernel kernel = Kernel::gaussian;
    uint64_t seed = 1;            // t-SNE init seed for the tsne2d space
    double perplexity = 30.0;
    int tsne_iters = 1000;
    std::string source_hash;      // provenance: hash of the embedding file
};

inline void write_golden(const std::string& path, const GoldenQuerySet& g) {
    if (g.man.size() != g.dim || g.woman.size() != g.dim)
        throw IoError("golden query dims disagree with header dim " + std::to_string(g.dim));
    ByteWriter w;
    w.str(kGoldenMagic);
    w.u32(g.dim);
    for (float v : g.man) w.f32(v);
    for (float v : g.woman) w.f32(v);
    w.u32(static_cast<uint32_t>(g.provenance_json.size()));
    w.str(g.provenance_json);
    w.save(path);
}

inline GoldenQuerySet read_golden(const std::string& path) {
    ByteReader r = ByteReader::from_file(path);
    if (r.str(4) != kGoldenMagic) throw IoError("bad golden query magic in " + path);
    GoldenQuerySet g;
    g.dim = r.u32();
    g.man.resize(g.dim);
    g.woman.resize(g.dim);
    for (auto& v : g.man) v = r.f32();
    for (auto& v : g.woman) v = r.f32();
    g.provenance_json = r.str(r.u32());
    if (!r.eof()) throw IoError("trailing bytes in golden query file " + path);
    return g;
}

namespace detail {

/// Median of all pairwise distances among rows; 0 when all rows coincide.
inline double median_pairwise_distance(const Tensor<double>& points) {
    const int64_t n = points.shape[0], d = points.shape[1];
    std::vector<double> dists;
    dists.reserve(static_cast<size_t>(n * (n - 1) / 2));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = i + 1; j < n; ++j)
            dists.push_back(std::sqrt(sq_dist(points.data.data() + i * d, points.data.data() + j * d, d)));
    std::sort(dists.begin(), dists.end());
    return dists.empty() ? 0.0 : dists[dists.size() / 2];
}

struct ClassSelection {
    size_t record_index = 0; // into the full EmbeddingSet
    double bandwidth = 0;
};

/// Densest-mode selection for one gender inside the working space; returns
/// the index of the nearest actual class member to the dominant mode.
inline ClassSelection select_densest(const Tensor<double>& space_points, const std::vector<size_t>& class_rows,
                                     const GoldenOptions& opt) {
    const int64_t d = space_points.shape[1];
    Tensor<double> pts({static_cast<int64_t>(class_rows.size()), d});
    for (size_t i = 0; i < class_rows.size(); ++i)
        for (int64_t k = 0; k < d; ++k)
            pts.at(static_cast<int64_t>(i), k) = space_points.at(static_cast<int64_t>(class_rows[i]), k);
    double h = opt.bandwidth;
    if (h <= 0) h = 0.5 * median_pairwise_distance(pts);
    if (h <= 0) h = 1.0; // all members identical; any bandwidth yields that point
    MeanShiftResult ms = mean_shift(pts, h, opt.kernel);
    int best_mode = 0;
    for (size_t m = 1; m < ms.basin_sizes.size(); ++m)
        if (ms.basin_sizes[m] > ms.basin_sizes[size_t(best_mode)]) best_mode = static_cast<int>(m);
    size_t nearest = 0;
    double nearest_d2 = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < class_rows.size(); ++i) {
        const double d2 = sq_dist(pts.data.data() + static_cast<int64_t>(i) * d,
                                  ms.modes.data.data() + best_mode * d, d);
        if (d2 < nearest_d2) {
            nearest_d2 = d2;
            nearest = i;
        }
    }
    return {class_rows[nearest], h};
}

} // namespace detail

/// Per gender independently: mode-seek in the configured space, take the
/// largest basin, and return the actual class embedding nearest its mode.
inline GoldenQuerySet select_golden(const EmbeddingSet& set, const GoldenOptions& opt = {}) {
    if (opt.space != "latent" && opt.space != "tsne2d")
        throw ConfigError("select_golden: space must be latent or tsne2d, got " + opt.space);
    std::vector<size_t> man_rows, woman_rows;
    for (size_t i = 0; i < set.records.size(); ++i) {
        if (set.records[i].gender == 0) man_rows.push_back(i);
        if (set.records[i].gender == 1) woman_rows.push_back(i);
    }
    if (man_rows.size() < 10) throw DataError("select_golden: need >= 10 man embeddings, have " +
                                              std::to_string(man_rows.size()));
    if (woman_rows.size() < 10) throw DataError("select_golden: need >= 10 woman embeddings, have " +
                                                std::to_string(woman_rows.size()));

    Tensor<double> space_points;
    if (opt.space == "latent") {
        space_points = Tensor<double>({static_cast<int64_t>(set.records.size()), static_cast<int64_t>(set.dim)});
        for (size_t i = 0; i < set.records.size(); ++i)
            for (uint32_t k = 0; k < set.dim; ++k)
                space_points.at(static_cast<int64_t>(i), k) = static_cast<double>(set.records[i].vec[k]);
    } else {
        Tensor<double> latent({static_cast<int64_t>(set.records.size()), static_cast<int64_t>(set.dim)});
        for (size_t i = 0; i < set.records.size(); ++i)
            for (uint32_t k = 0; k < set.dim; ++k)
                latent.at(static_cast<int64_t>(i), k) = static_cast<double>(set.records[i].vec[k]);
        space_points = tsne(latent, opt.perplexity, opt.tsne_iters, opt.seed).coords;
    }

    // class isolation: each gender only ever sees its own rows
    const auto man_pick = detail::select_densest(space_points, man_rows, opt);
    const auto woman_pick = detail::select_densest(space_points, woman_rows, opt);

    GoldenQuerySet g;
    g.dim = set.dim;
    g.man = set.records[man_pick.record_index].vec;
    g.woman = set.records[woman_pick.record_index].vec;
    nlohmann::json prov;
    prov["space"] = opt.space;
    prov["kernel"] = opt.kernel == Kernel::gaussian ? "gaussian" : "flat";
    prov["bandwidth_man"] = man_pick.bandwidth;
    prov["bandwidth_woman"] = woman_pick.bandwidth;
    prov["clip_id_man"] = set.records[man_pick.record_index].clip_id;
    prov["clip_id_woman"] = set.records[woman_pick.record_index].clip_id;
    prov["source_hash"] = opt.source_hash;
    prov["source_count"] = set.records.size();
    g.provenance_json = prov.dump();
    return g;
}

} // namespace eqse
