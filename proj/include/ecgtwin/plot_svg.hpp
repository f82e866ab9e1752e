#pragma once

// Minimal SVG emission for the plot command: 12-panel ECG strips, 2-D
// projection scatters, loss curves, and attention overlays on a lead trace.

#include "ecgtwin/common.hpp"
#include "ecgtwin/signal_forge.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace ecgtwin::svg {

namespace detail {

inline std::string color_for(int idx) {
    // 12 distinguishable hues
    static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                    "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
                                    "#bcbd22", "#17becf", "#aec7e8", "#ffbb78"};
    return palette[idx % 12];
}

struct Doc {
    std::ostringstream out;
    double width, height;

    Doc(double w, double h) : width(w), height(h) {
        out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
            << "\" viewBox=\"0 0 " << w << " " << h << "\">\n";
        out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    }

    void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& color,
                  double stroke = 1.0) {
        out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"" << stroke
            << "\" points=\"";
        for (const auto& [x, y] : pts) out << x << "," << y << " ";
        out << "\"/>\n";
    }

    void line(double x1, double y1, double x2, double y2, const std::string& color,
              double stroke = 1.0) {
        out << "<line x1=\"" << x1 << "\" y1=\"" << y1 << "\" x2=\"" << x2 << "\" y2=\"" << y2
            << "\" stroke=\"" << color << "\" stroke-width=\"" << stroke << "\"/>\n";
    }

    void circle(double x, double y, double r, const std::string& color) {
        out << "<circle cx=\"" << x << "\" cy=\"" << y << "\" r=\"" << r << "\" fill=\"" << color
            << "\"/>\n";
    }

    void text(double x, double y, const std::string& s, int size = 11,
              const std::string& color = "#333") {
        out << "<text x=\"" << x << "\" y=\"" << y << "\" font-family=\"sans-serif\" font-size=\""
            << size << "\" fill=\"" << color << "\">" << s << "</text>\n";
    }

    void save(const std::filesystem::path& path) {
        out << "</svg>\n";
        std::ofstream f(path);
        if (!f) throw ValidationError("cannot write " + path.string());
        f << out.str();
    }
};

}  // namespace detail

// 12-panel strip, 6 rows x 2 columns
inline void write_ecg(const std::filesystem::path& path, const MatF& signal,
                      const std::string& title) {
    const double pw = 420, ph = 95, margin = 40;
    detail::Doc doc(2 * pw + margin * 2, 6 * ph + margin * 2);
    doc.text(margin, 22, title, 14);
    for (int l = 0; l < kLeads; ++l) {
        const int row = l % 6, col = l / 6;
        const double x0 = margin + col * pw, y0 = margin + row * ph;
        const double lo = signal.row(l).minCoeff(), hi = signal.row(l).maxCoeff();
        const double span = std::max(1e-6, static_cast<double>(hi - lo));
        std::vector<std::pair<double, double>> pts;
        pts.reserve(kSamples);
        for (int i = 0; i < kSamples; ++i) {
            const double x = x0 + (pw - 30) * i / (kSamples - 1.0);
            const double y = y0 + (ph - 20) * (1.0 - (signal(l, i) - lo) / span) + 10;
            pts.emplace_back(x, y);
        }
        doc.polyline(pts, "#1f77b4", 0.8);
        doc.text(x0, y0 + 12, kLeadNames[l], 10, "#777");
    }
    doc.save(path);
}

// lead trace with per-sample attention weights rendered as red intensity
inline void write_attention_overlay(const std::filesystem::path& path, const MatF& signal,
                                    int lead, const std::vector<double>& weights,
                                    const std::string& title) {
    const double w = 900, h = 260, margin = 45;
    detail::Doc doc(w, h);
    doc.text(margin, 24, title, 13);
    const double lo = signal.row(lead).minCoeff(), hi = signal.row(lead).maxCoeff();
    const double span = std::max(1e-6, static_cast<double>(hi - lo));
    double wmax = 1e-12;
    for (double v : weights) wmax = std::max(wmax, v);
    auto xy = [&](int i) {
        const double x = margin + (w - 2 * margin) * i / (kSamples - 1.0);
        const double y = margin + (h - 2 * margin) * (1.0 - (signal(lead, i) - lo) / span);
        return std::pair<double, double>(x, y);
    };
    // weights are given per attention position; stretch over the sample axis
    const size_t n_pos = weights.size();
    for (int i = 0; i + 1 < kSamples; ++i) {
        const size_t p = std::min(n_pos - 1, static_cast<size_t>(i) * n_pos / kSamples);
        const double frac = weights[p] / wmax;
        const int red = 255;
        const int gb = static_cast<int>(210 * (1.0 - frac));
        char color[8];
        std::snprintf(color, sizeof(color), "#%02x%02x%02x", red, gb, gb);
        auto [x1, y1] = xy(i);
        auto [x2, y2] = xy(i + 1);
        doc.line(x1, y1, x2, y2, color, 1.4);
    }
    doc.text(margin, h - 8, "lead " + std::string(kLeadNames[lead]) + ", redder = more attention",
             10, "#777");
    doc.save(path);
}

// per-label colored scatter
inline void write_projection(const std::filesystem::path& path,
                             const std::vector<std::pair<double, double>>& points,
                             const std::vector<std::string>& labels, const std::string& title) {
    const double w = 560, h = 520, margin = 45;
    detail::Doc doc(w, h);
    doc.text(margin, 24, title, 13);
    double xlo = 1e300, xhi = -1e300, ylo = 1e300, yhi = -1e300;
    for (const auto& [x, y] : points) {
        xlo = std::min(xlo, x);
        xhi = std::max(xhi, x);
        ylo = std::min(ylo, y);
        yhi = std::max(yhi, y);
    }
    const double xspan = std::max(1e-9, xhi - xlo), yspan = std::max(1e-9, yhi - ylo);
    std::vector<std::string> uniq;
    for (const auto& l : labels)
        if (std::find(uniq.begin(), uniq.end(), l) == uniq.end()) uniq.push_back(l);
    for (size_t i = 0; i < points.size(); ++i) {
        const double x = margin + (w - 2 * margin) * (points[i].first - xlo) / xspan;
        const double y = margin + (h - 2 * margin) * (1.0 - (points[i].second - ylo) / yspan);
        const auto it = std::find(uniq.begin(), uniq.end(), labels[i]);
        doc.circle(x, y, 3.0, detail::color_for(static_cast<int>(it - uniq.begin())));
    }
    for (size_t i = 0; i < uniq.size() && i < 14; ++i) {
        doc.circle(w - 130, 40 + 16 * i, 4, detail::color_for(static_cast<int>(i)));
        doc.text(w - 120, 44 + 16 * i, uniq[i], 10);
    }
    doc.save(path);
}

inline void write_loss(const std::filesystem::path& path, const std::vector<double>& loss,
                       const std::string& title) {
    const double w = 560, h = 340, margin = 50;
    detail::Doc doc(w, h);
    doc.text(margin, 24, title, 13);
    if (loss.size() < 2) {
        doc.text(margin, h / 2, "not enough points", 12);
        doc.save(path);
        return;
    }
    double lo = 1e300, hi = -1e300;
    for (double v : loss) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double span = std::max(1e-12, hi - lo);
    std::vector<std::pair<double, double>> pts;
    for (size_t i = 0; i < loss.size(); ++i)
        pts.emplace_back(margin + (w - 2 * margin) * i / (loss.size() - 1.0),
                         margin + (h - 2 * margin) * (1.0 - (loss[i] - lo) / span));
    doc.polyline(pts, "#d62728", 1.5);
    doc.line(margin, h - margin, w - margin, h - margin, "#999");
    doc.line(margin, margin, margin, h - margin, "#999");
    char buf[64];
    std::snprintf(buf, sizeof(buf), "min %.4g", lo);
    doc.text(w - margin - 80, h - margin - 6, buf, 10, "#777");
    doc.save(path);
}

}  // namespace ecgtwin::svg
