#include "docml/geometry.hpp"

#include <algorithm>
#include <string>

namespace docml {

PixelBox PixelBox::united(const PixelBox& o) const {
    return {std::min(x0, o.x0), std::min(y0, o.y0), std::max(x1, o.x1), std::max(y1, o.y1)};
}

namespace {

// round-half-up of (value * kNormRange / page), exact in integers
int scale_coord(long long value, long long page) {
    const long long num = value * kNormRange;
    const long long r = (2 * num + page) / (2 * page);
    return int(std::clamp(r, 0LL, (long long)kNormRange));
}

} // namespace

NormBox normalize_box(const PixelBox& b, int page_w, int page_h) {
    if (page_w <= 0 || page_h <= 0)
        throw DataError("normalize_box: invalid page dimensions " + std::to_string(page_w) + "x" +
                        std::to_string(page_h));
    if (b.x0 < 0 || b.y0 < 0 || b.x0 > b.x1 || b.y0 > b.y1 || b.x1 > page_w || b.y1 > page_h)
        throw DataError("normalize_box: box [" + std::to_string(b.x0) + "," + std::to_string(b.y0) + "," +
                        std::to_string(b.x1) + "," + std::to_string(b.y1) + "] outside page " +
                        std::to_string(page_w) + "x" + std::to_string(page_h));
    return {scale_coord(b.x0, page_w), scale_coord(b.y0, page_h), scale_coord(b.x1, page_w),
            scale_coord(b.y1, page_h)};
}

PatchGrid make_patch_grid(int h, int w, int p) {
    if (h <= 0 || w <= 0 || p <= 0)
        throw ConfigError("make_patch_grid: non-positive dimension");
    if (h % p != 0 || w % p != 0)
        throw ConfigError("make_patch_grid: patch size " + std::to_string(p) + " does not divide " +
                          std::to_string(h) + "x" + std::to_string(w));
    return {h / p, w / p, p, h, w};
}

NormBox patch_cell_box(const PatchGrid& g, int index) {
    const int r = index / g.cols;
    const int c = index % g.cols;
    // ceil for the low edge, floor for the high edge keeps the box strictly
    // inside the half-open cell.
    const auto lo = [](long long k, long long n) { return int((k * kNormRange + n - 1) / n); };
    const auto hi = [](long long k, long long n) { return int(k * kNormRange / n); };
    return {lo(c, g.cols), lo(r, g.rows), hi(c + 1, g.cols), hi(r + 1, g.rows)};
}

std::vector<int> word_patches(const NormBox& b, const PatchGrid& g) {
    std::vector<int> out;
    if (b.x0 == b.x1 || b.y0 == b.y1) {
        const int c = std::min(g.cols - 1, b.x0 * g.cols / kNormRange);
        const int r = std::min(g.rows - 1, b.y0 * g.rows / kNormRange);
        out.push_back(r * g.cols + c);
        return out;
    }
    // Positive-area overlap in exact integer arithmetic:
    //   (x0, x1) overlaps (1000*c/cols, 1000*(c+1)/cols) iff
    //   x1*cols > 1000*c and x0*cols < 1000*(c+1); same along y.
    std::vector<int> cols_hit, rows_hit;
    for (int c = 0; c < g.cols; ++c)
        if ((long long)b.x1 * g.cols > (long long)kNormRange * c &&
            (long long)b.x0 * g.cols < (long long)kNormRange * (c + 1))
            cols_hit.push_back(c);
    for (int r = 0; r < g.rows; ++r)
        if ((long long)b.y1 * g.rows > (long long)kNormRange * r &&
            (long long)b.y0 * g.rows < (long long)kNormRange * (r + 1))
            rows_hit.push_back(r);
    out.reserve(rows_hit.size() * cols_hit.size());
    for (int r : rows_hit)
        for (int c : cols_hit)
            out.push_back(r * g.cols + c);
    return out;
}

} // namespace docml
