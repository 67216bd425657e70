#pragma once

#include <vector>

#include "docml/error.hpp"

namespace docml {

// Layout coordinates are normalized to integers in [0, kNormRange].
inline constexpr int kNormRange = 1000;

// Axis-aligned box in pixel units, origin top-left. For rasterization the
// box is treated half-open: pixel (x, y) is inside iff x0 <= x < x1 and
// y0 <= y < y1.
struct PixelBox {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    bool operator==(const PixelBox&) const = default;
    PixelBox united(const PixelBox& o) const;
};

// Box in normalized layout units.
struct NormBox {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    bool operator==(const NormBox&) const = default;
    bool is_zero() const { return x0 == 0 && y0 == 0 && x1 == 0 && y1 == 0; }
    int width() const { return x1 - x0; }
    int height() const { return y1 - y0; }
    int center_x() const { return (x0 + x1) / 2; }
    int center_y() const { return (y0 + y1) / 2; }
};

// Uniform patch tiling of an image. Patches are indexed row-major:
// index k = row * cols + col, patch 0 top-left.
struct PatchGrid {
    int rows = 0, cols = 0;
    int patch_size = 0;
    int image_h = 0, image_w = 0;
    int patch_count() const { return rows * cols; }
    bool operator==(const PatchGrid&) const = default;
};

// Scale a pixel box onto [0, kNormRange] by the page size. Rounds half-up
// and clamps. Throws DataError for a non-positive page or an out-of-page box.
NormBox normalize_box(const PixelBox& b, int page_w, int page_h);

// Build the patch grid for an h x w image with patch size p. p must divide
// both dimensions exactly; there is no implicit cropping.
PatchGrid make_patch_grid(int h, int w, int p);

// Extent of one patch cell in normalized units, shrunk to the largest
// integer box strictly inside the cell so that word_patches() of the
// returned box hits exactly this one index.
NormBox patch_cell_box(const PatchGrid& g, int index);

// All patch indices whose cell has positive-area overlap with b. Cell (r, c)
// spans [c*1000/cols, (c+1)*1000/cols) x [r*1000/rows, (r+1)*1000/rows) in
// normalized units; boundary contact does not count. A zero-area box maps to
// the single cell containing its top-left corner.
std::vector<int> word_patches(const NormBox& b, const PatchGrid& g);

} // namespace docml
