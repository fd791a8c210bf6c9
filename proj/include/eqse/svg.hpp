#pragma once

// Static scatter rendering for embedding maps. Output is plain SVG text,
// byte-deterministic for a given input: fixed palette, fixed float
// formatting, and a precomputed star glyph instead of runtime trig.

#include <cstdio>
#include <string>
#include <vector>

#include "eqse/tensor.hpp"

namespace eqse {

struct SvgScatterOptions {
    int width = 760;       // plot area, legend panel extends beyond
    int height = 560;
    int margin = 50;
    double point_radius = 3.0;
    double star_radius = 10.0;
    std::string title;
};

namespace detail {

inline const std::vector<std::string>& scatter_palette() {
    static const std::vector<std::string> colors = {
        "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f",
        "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac",
    };
    return colors;
}

// unit 5-point star (outer radius 1, inner 0.4), first spike up
inline const double kStarUnit[10][2] = {
    {0.0, -1.0},      {0.2351, -0.3236}, {0.9511, -0.309}, {0.3804, 0.1236},  {0.5878, 0.809},
    {0.0, 0.4},       {-0.5878, 0.809},  {-0.3804, 0.1236}, {-0.9511, -0.309}, {-0.2351, -0.3236},
};

inline std::string fmt2(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

} // namespace detail

/// Class-colored scatter with optional star markers. `coords` is (N, 2),
/// `classes[i]` indexes `class_names` (every name gets a legend row even if
/// unused), `stars` lists point rows to overlay with a star glyph.
inline std::string render_scatter_svg(const Tensor<double>& coords, const std::vector<uint8_t>& classes,
                                      const std::vector<std::string>& class_names,
                                      const std::vector<int64_t>& stars, const SvgScatterOptions& opt = {}) {
    if (coords.rank() != 2 || coords.shape[1] != 2)
        throw ConfigError("render_scatter_svg: coords must be (N, 2), got " + shape_str(coords.shape));
    const int64_t n = coords.shape[0];
    if (static_cast<int64_t>(classes.size()) != n)
        throw ConfigError("render_scatter_svg: " + std::to_string(classes.size()) + " class labels for " +
                          std::to_string(n) + " points");
    if (class_names.size() > detail::scatter_palette().size())
        throw ConfigError("render_scatter_svg: palette holds " +
                          std::to_string(detail::scatter_palette().size()) + " colors, got " +
                          std::to_string(class_names.size()) + " classes");
    for (uint8_t c : classes)
        if (c >= class_names.size())
            throw ConfigError("render_scatter_svg: class index " + std::to_string(int(c)) + " out of range");
    for (int64_t s : stars)
        if (s < 0 || s >= n) throw ConfigError("render_scatter_svg: star index " + std::to_string(s) + " out of range");

    double lo_x = 0, hi_x = 0, lo_y = 0, hi_y = 0;
    for (int64_t i = 0; i < n; ++i) {
        const double x = coords.at(i, 0), y = coords.at(i, 1);
        if (i == 0 || x < lo_x) lo_x = x;
        if (i == 0 || x > hi_x) hi_x = x;
        if (i == 0 || y < lo_y) lo_y = y;
        if (i == 0 || y > hi_y) hi_y = y;
    }
    const double span_x = hi_x > lo_x ? hi_x - lo_x : 1.0;
    const double span_y = hi_y > lo_y ? hi_y - lo_y : 1.0;
    const double plot_w = opt.width - 2.0 * opt.margin;
    const double plot_h = opt.height - 2.0 * opt.margin;
    auto px = [&](double x) { return opt.margin + (x - lo_x) / span_x * plot_w; };
    auto py = [&](double y) { return opt.margin + (1.0 - (y - lo_y) / span_y) * plot_h; };

    const int legend_w = 170;
    const int total_w = opt.width + legend_w;
    std::string out;
    out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(total_w) + "\" height=\"" +
           std::to_string(opt.height) + "\" viewBox=\"0 0 " + std::to_string(total_w) + " " +
           std::to_string(opt.height) + "\">\n";
    out += "<rect x=\"0\" y=\"0\" width=\"" + std::to_string(total_w) + "\" height=\"" +
           std::to_string(opt.height) + "\" fill=\"#ffffff\"/>\n";
    if (!opt.title.empty())
        out += "<text x=\"" + std::to_string(opt.margin) + "\" y=\"28\" font-family=\"sans-serif\" font-size=\"16\">" +
               opt.title + "</text>\n";

    for (int64_t i = 0; i < n; ++i) {
        out += "<circle cx=\"" + detail::fmt2(px(coords.at(i, 0))) + "\" cy=\"" + detail::fmt2(py(coords.at(i, 1))) +
               "\" r=\"" + detail::fmt2(opt.point_radius) + "\" fill=\"" +
               detail::scatter_palette()[classes[static_cast<size_t>(i)]] + "\" fill-opacity=\"0.75\"/>\n";
    }
    for (int64_t s : stars) {
        const double cx = px(coords.at(s, 0)), cy = py(coords.at(s, 1));
        out += "<polygon points=\"";
        for (int k = 0; k < 10; ++k) {
            if (k) out += " ";
            out += detail::fmt2(cx + opt.star_radius * detail::kStarUnit[k][0]) + "," +
                   detail::fmt2(cy + opt.star_radius * detail::kStarUnit[k][1]);
        }
        out += "\" fill=\"#222222\" stroke=\"#ffffff\" stroke-width=\"1.5\"/>\n";
    }

    const int lx = opt.width + 10;
    for (size_t c = 0; c < class_names.size(); ++c) {
        const int ly = opt.margin + static_cast<int>(c) * 22;
        out += "<rect x=\"" + std::to_string(lx) + "\" y=\"" + std::to_string(ly) +
               "\" width=\"14\" height=\"14\" fill=\"" + detail::scatter_palette()[c] + "\"/>\n";
        out += "<text x=\"" + std::to_string(lx + 20) + "\" y=\"" + std::to_string(ly + 12) +
               "\" font-family=\"sans-serif\" font-size=\"13\">" + class_names[c] + "</text>\n";
    }
    out += "</svg>\n";
    return out;
}

} // namespace eqse
