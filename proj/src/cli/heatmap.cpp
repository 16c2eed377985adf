// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>

#include "finterp/cli.hpp"

namespace finterp::cli {

namespace {

constexpr int kCell = 36;
constexpr int kLeft = 80;
constexpr int kTop = 48;
constexpr int kBottom = 110;
constexpr int kLegend = 90;

std::string escape(std::string_view s) {
    std::string out;
    for (const char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default:
                // control bytes are not allowed in XML 1.0
                if (static_cast<unsigned char>(c) < 0x20 && c != '\t') {
                    out += ' ';
                } else {
                    out += c;
                }
        }
    }
    return out;
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

// t in [-1, 1]: blue (negative) through white to red (positive).
std::string color(double t) {
    t = std::clamp(t, -1.0, 1.0);
    const double a = std::abs(t);
    const int lo[3] = {255, 255, 255};
    const int pos[3] = {178, 24, 43};
    const int neg[3] = {33, 102, 172};
    const int* end = t >= 0 ? pos : neg;
    char buf[8];
    int rgb[3];
    for (int i = 0; i < 3; ++i) {
        rgb[i] = static_cast<int>(std::lround(lo[i] + (end[i] - lo[i]) * a));
    }
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", rgb[0], rgb[1], rgb[2]);
    return buf;
}

}  // namespace

std::string heatmap_svg(const ImpactMap& map) {
    const int rows = static_cast<int>(map.n_layers());
    const int cols = static_cast<int>(map.n_tokens());
    double vmax = 0.0;
    for (const double v : map.values.flat()) {
        vmax = std::max(vmax, std::abs(v));
    }
    const double scale = vmax > 0.0 ? vmax : 1.0;
    const int width = kLeft + cols * kCell + kLegend;
    const int height = kTop + rows * kCell + kBottom;

    std::string s;
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) + "\" height=\"" +
         std::to_string(height) + "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    s += "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n";
    std::string title = "Causal trace (" + map.site + ")";
    if (map.n_maps > 1) {
        title += ", mean of " + std::to_string(map.n_maps) + " prompts";
    }
    title += ": p_clean " + fmt("%.4g", map.p_clean) + ", p_corrupt " + fmt("%.4g", map.p_corrupt);
    s += "<text x=\"" + std::to_string(kLeft) + "\" y=\"20\" font-size=\"13\">" + escape(title) + "</text>\n";

    for (int l = 0; l < rows; ++l) {
        const int y = kTop + (rows - 1 - l) * kCell;
        s += "<text x=\"" + std::to_string(kLeft - 6) + "\" y=\"" + std::to_string(y + kCell / 2 + 4) +
             "\" text-anchor=\"end\">" + std::to_string(l) + "</text>\n";
        for (int p = 0; p < cols; ++p) {
            const double v = map.values(static_cast<std::size_t>(l), static_cast<std::size_t>(p));
            const std::string token =
                static_cast<std::size_t>(p) < map.token_texts.size() ? map.token_texts[static_cast<std::size_t>(p)] : "";
            s += "<rect x=\"" + std::to_string(kLeft + p * kCell) + "\" y=\"" + std::to_string(y) + "\" width=\"" +
                 std::to_string(kCell) + "\" height=\"" + std::to_string(kCell) + "\" fill=\"" + color(v / scale) +
                 "\"><title>layer " + std::to_string(l) + ", position " + std::to_string(p) + " (" +
                 escape(token) + "): impact " + fmt("%.9g", v) + "</title></rect>\n";
        }
    }

    const int axis_y = kTop + rows * kCell;
    for (int p = 0; p < cols; ++p) {
        const int x = kLeft + p * kCell + kCell / 2;
        const std::string token =
            static_cast<std::size_t>(p) < map.token_texts.size() ? map.token_texts[static_cast<std::size_t>(p)] : "";
        s += "<text x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(axis_y + 12) +
             "\" text-anchor=\"end\" transform=\"rotate(-60 " + std::to_string(x) + " " +
             std::to_string(axis_y + 12) + ")\" xml:space=\"preserve\">" + escape(token) + "</text>\n";
    }
    s += "<text x=\"20\" y=\"" + std::to_string(kTop + rows * kCell / 2) + "\" transform=\"rotate(-90 20 " +
         std::to_string(kTop + rows * kCell / 2) + ")\" text-anchor=\"middle\">layer</text>\n";
    s += "<text x=\"" + std::to_string(kLeft + cols * kCell / 2) + "\" y=\"" + std::to_string(height - 8) +
         "\" text-anchor=\"middle\">token</text>\n";

    // legend: 11 swatches from -scale to +scale
    const int lx = kLeft + cols * kCell + 24;
    const int steps = 11;
    const int sh = std::max(8, rows * kCell / steps);
    for (int i = 0; i < steps; ++i) {
        const double t = 1.0 - 2.0 * i / (steps - 1);
        s += "<rect x=\"" + std::to_string(lx) + "\" y=\"" + std::to_string(kTop + i * sh) + "\" width=\"14\" height=\"" +
             std::to_string(sh) + "\" fill=\"" + color(t) + "\"/>\n";
    }
    s += "<text x=\"" + std::to_string(lx + 18) + "\" y=\"" + std::to_string(kTop + 8) + "\">" +
         fmt("%+.3g", scale) + "</text>\n";
    s += "<text x=\"" + std::to_string(lx + 18) + "\" y=\"" + std::to_string(kTop + steps / 2 * sh + sh / 2 + 4) +
         "\">0</text>\n";
    s += "<text x=\"" + std::to_string(lx + 18) + "\" y=\"" + std::to_string(kTop + steps * sh) + "\">" +
         fmt("%+.3g", -scale) + "</text>\n";
    s += "</svg>\n";
    return s;
}

}  // namespace finterp::cli
