#pragma once

// Attention heatmap export: per head, a steps x contexts grid, either as a
// plain numeric CSV grid or as an SVG whose cell luminance is proportional
// to the weight (white = the head's maximum).

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "recosa/inference.hpp"

namespace recosa {

inline std::string heatmap_grid_csv(const AttentionRecord& rec, int head) {
    if (head < 0 || head >= rec.heads) fail_usage("heatmap: head out of range");
    std::ostringstream os;
    os.precision(17);
    for (int t = 0; t < rec.steps(); ++t) {
        for (int i = 0; i < rec.contexts; ++i) {
            if (i) os << ",";
            os << rec.w[static_cast<std::size_t>(head)][static_cast<std::size_t>(t)]
                       [static_cast<std::size_t>(i)];
        }
        os << "\n";
    }
    return os.str();
}

inline std::string heatmap_svg(const AttentionRecord& rec, int head) {
    if (head < 0 || head >= rec.heads) fail_usage("heatmap: head out of range");
    const int cell = 24, margin = 40;
    const int w = margin + rec.contexts * cell + 8;
    const int h = margin + rec.steps() * cell + 8;

    double max_w = 0.0;
    for (int t = 0; t < rec.steps(); ++t)
        for (int i = 0; i < rec.contexts; ++i)
            max_w = std::max(max_w, rec.w[static_cast<std::size_t>(head)][static_cast<std::size_t>(t)]
                                         [static_cast<std::size_t>(i)]);
    if (max_w <= 0.0) fail_data("heatmap: all-zero attention grid");

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
       << "\" viewBox=\"0 0 " << w << " " << h << "\">\n";
    os << "  <rect width=\"" << w << "\" height=\"" << h << "\" fill=\"#202020\"/>\n";
    for (int i = 0; i < rec.contexts; ++i)
        os << "  <text x=\"" << margin + i * cell + cell / 2 << "\" y=\"" << margin - 8
           << "\" fill=\"#cccccc\" font-size=\"10\" text-anchor=\"middle\">c" << i + 1 << "</text>\n";
    for (int t = 0; t < rec.steps(); ++t) {
        os << "  <text x=\"" << margin - 6 << "\" y=\"" << margin + t * cell + cell / 2 + 4
           << "\" fill=\"#cccccc\" font-size=\"10\" text-anchor=\"end\">t" << t + 1 << "</text>\n";
        for (int i = 0; i < rec.contexts; ++i) {
            const double v = rec.w[static_cast<std::size_t>(head)][static_cast<std::size_t>(t)]
                                  [static_cast<std::size_t>(i)];
            const int lum = static_cast<int>(std::lround(255.0 * v / max_w));
            os << "  <rect x=\"" << margin + i * cell << "\" y=\"" << margin + t * cell
               << "\" width=\"" << cell - 1 << "\" height=\"" << cell - 1 << "\" fill=\"rgb(" << lum
               << "," << lum << "," << lum << ")\"/>\n";
        }
    }
    os << "</svg>\n";
    return os.str();
}

// Writes <prefix>_head<h>.<csv|svg> for every head; returns the paths.
inline std::vector<std::string> export_heatmaps(const AttentionRecord& rec, const std::string& prefix,
                                                const std::string& format) {
    if (format != "csv-grid" && format != "svg")
        fail_usage("heatmap format must be csv-grid or svg, got '" + format + "'");
    rec.validate();
    std::vector<std::string> paths;
    for (int head = 0; head < rec.heads; ++head) {
        const std::string path =
            prefix + "_head" + std::to_string(head + 1) + (format == "svg" ? ".svg" : ".csv");
        write_text_atomic(path, format == "svg" ? heatmap_svg(rec, head) : heatmap_grid_csv(rec, head));
        paths.push_back(path);
    }
    return paths;
}

}  // namespace recosa
