#pragma once

// Box primitives shared by annotation parsing, matching, pseudo-labeling and
// evaluation. All boxes are center-form and normalized to the unit square;
// pixel coordinates appear only at I/O boundaries. Oriented boxes add a
// rotation angle theta in [-pi/2, pi/2) with theta = 0 reducing exactly to
// the axis-aligned case.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "owd/common.hpp"

namespace owd {


struct Vec2 {
    double x = 0.0;
    double y = 0.0;
};

inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
inline double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }

// Axis-aligned box, center form, normalized coordinates.
struct Box {
    double cx = 0.5;
    double cy = 0.5;
    double w = 1.0;
    double h = 1.0;

    double area() const { return w * h; }
    double x0() const { return cx - 0.5 * w; }
    double x1() const { return cx + 0.5 * w; }
    double y0() const { return cy - 0.5 * h; }
    double y1() const { return cy + 0.5 * h; }

    bool valid() const {
        return std::isfinite(cx) && std::isfinite(cy) && std::isfinite(w) && std::isfinite(h) &&
               cx >= 0.0 && cx <= 1.0 && cy >= 0.0 && cy <= 1.0 && w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0;
    }
};

// Axis-aligned box plus rotation about the center.
struct OrientedBox {
    double cx = 0.5;
    double cy = 0.5;
    double w = 1.0;
    double h = 1.0;
    double theta = 0.0;  // radians, [-pi/2, pi/2)

    double area() const { return w * h; }
    Box axis_aligned() const { return Box{cx, cy, w, h}; }

    bool valid() const {
        return axis_aligned().valid() && std::isfinite(theta) && theta >= -kHalfPi && theta < kHalfPi;
    }
};

// Reduce an angle to the canonical [-pi/2, pi/2) range (period pi).
inline double canonical_angle(double theta) {
    double t = std::fmod(theta + kHalfPi, kPi);
    if (t < 0.0) t += kPi;
    return t - kHalfPi;
}

// Corners in counter-clockwise order (x right, y up convention), starting at
// the (-w/2, -h/2) corner before rotation.
inline std::array<Vec2, 4> box_to_corners(const OrientedBox& b) {
    const double c = std::cos(b.theta);
    const double s = std::sin(b.theta);
    const double hw = 0.5 * b.w;
    const double hh = 0.5 * b.h;
    const std::array<Vec2, 4> local = {Vec2{-hw, -hh}, Vec2{hw, -hh}, Vec2{hw, hh}, Vec2{-hw, hh}};
    std::array<Vec2, 4> out;
    for (int i = 0; i < 4; ++i) {
        out[i] = Vec2{b.cx + c * local[i].x - s * local[i].y, b.cy + s * local[i].x + c * local[i].y};
    }
    return out;
}

inline std::array<Vec2, 4> box_to_corners(const Box& b) {
    return box_to_corners(OrientedBox{b.cx, b.cy, b.w, b.h, 0.0});
}

// Recover center form from four rectangle corners in the box_to_corners
// layout. Round-trips within 1e-9 for valid boxes: the c0->c1 edge carries
// the width direction, and canonical_angle shifts theta by multiples of pi
// only, which never exchanges the two extents.
inline OrientedBox corners_to_box(const std::array<Vec2, 4>& c) {
    Vec2 center = 0.25 * (c[0] + c[1] + c[2] + c[3]);
    Vec2 e01 = c[1] - c[0];
    Vec2 e03 = c[3] - c[0];
    double w = std::hypot(e01.x, e01.y);
    double h = std::hypot(e03.x, e03.y);
    double t = canonical_angle(std::atan2(e01.y, e01.x));
    return OrientedBox{center.x, center.y, w, h, t};
}

inline double iou(const Box& a, const Box& b) {
    const double ix = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
    const double iy = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
    const double inter = ix * iy;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

// Generalized IoU: iou minus the fraction of the enclosing box not covered by
// the union. Range (-1, 1].
inline double giou(const Box& a, const Box& b) {
    const double ix = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
    const double iy = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
    const double inter = ix * iy;
    const double uni = a.area() + b.area() - inter;
    const double ex = std::max(a.x1(), b.x1()) - std::min(a.x0(), b.x0());
    const double ey = std::max(a.y1(), b.y1()) - std::min(a.y0(), b.y0());
    const double enc = ex * ey;
    double out = uni > 0.0 ? inter / uni : 0.0;
    if (enc > 0.0) out -= (enc - uni) / enc;
    return out;
}

namespace detail {

inline double polygon_area(const std::vector<Vec2>& poly) {
    double a = 0.0;
    const std::size_t n = poly.size();
    for (std::size_t i = 0; i < n; ++i) {
        const Vec2& p = poly[i];
        const Vec2& q = poly[(i + 1) % n];
        a += cross(p, q);
    }
    return 0.5 * std::fabs(a);
}

// Sutherland-Hodgman clip of a polygon against one half-plane (left of a->b).
inline std::vector<Vec2> clip_edge(const std::vector<Vec2>& poly, Vec2 a, Vec2 b) {
    std::vector<Vec2> out;
    out.reserve(poly.size() + 1);
    const std::size_t n = poly.size();
    const double eps = 1e-12;
    for (std::size_t i = 0; i < n; ++i) {
        const Vec2& p = poly[i];
        const Vec2& q = poly[(i + 1) % n];
        const double sp = cross(b - a, p - a);
        const double sq = cross(b - a, q - a);
        const bool pin = sp >= -eps;
        const bool qin = sq >= -eps;
        if (pin && qin) {
            out.push_back(q);
        } else if (pin && !qin) {
            const double t = sp / (sp - sq);
            out.push_back(p + t * (q - p));
        } else if (!pin && qin) {
            const double t = sp / (sp - sq);
            out.push_back(p + t * (q - p));
            out.push_back(q);
        }
    }
    return out;
}

}  // namespace detail

// Exact rotated-rectangle IoU via convex polygon clipping. Symmetric; falls
// back to the closed-form axis-aligned path when neither box is rotated so
// that case is bit-identical to iou().
inline double oriented_iou(const OrientedBox& a, const OrientedBox& b) {
    if (a.theta == 0.0 && b.theta == 0.0) return iou(a.axis_aligned(), b.axis_aligned());
    const auto ca = box_to_corners(a);
    const auto cb = box_to_corners(b);
    std::vector<Vec2> poly(ca.begin(), ca.end());
    for (int i = 0; i < 4 && !poly.empty(); ++i) {
        poly = detail::clip_edge(poly, cb[i], cb[(i + 1) % 4]);
    }
    const double inter = poly.size() >= 3 ? detail::polygon_area(poly) : 0.0;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? std::min(1.0, inter / uni) : 0.0;
}

inline bool point_in_oriented_box(Vec2 p, const OrientedBox& b) {
    const double c = std::cos(b.theta);
    const double s = std::sin(b.theta);
    const double dx = p.x - b.cx;
    const double dy = p.y - b.cy;
    const double lx = c * dx + s * dy;
    const double ly = -s * dx + c * dy;
    return std::fabs(lx) <= 0.5 * b.w && std::fabs(ly) <= 0.5 * b.h;
}

// Minimum-area enclosing rectangle of a convex quad (DOTA corner annotations).
// Scans each hull edge as a candidate orientation.
inline OrientedBox min_area_rect(const std::array<Vec2, 4>& pts) {
    // Convex hull of 4 points, monotone chain.
    std::vector<Vec2> p(pts.begin(), pts.end());
    std::sort(p.begin(), p.end(), [](Vec2 a, Vec2 b) { return a.x < b.x || (a.x == b.x && a.y < b.y); });
    std::vector<Vec2> hull;
    for (int pass = 0; pass < 2; ++pass) {
        const std::size_t base = hull.size();
        for (const Vec2& q : p) {
            while (hull.size() >= base + 2 &&
                   cross(hull[hull.size() - 1] - hull[hull.size() - 2], q - hull[hull.size() - 2]) <= 0.0) {
                hull.pop_back();
            }
            hull.push_back(q);
        }
        hull.pop_back();
        std::reverse(p.begin(), p.end());
    }
    if (hull.size() < 3) {
        throw data_error("min_area_rect: degenerate corner set");
    }

    double best_area = std::numeric_limits<double>::infinity();
    OrientedBox best;
    const std::size_t n = hull.size();
    for (std::size_t i = 0; i < n; ++i) {
        Vec2 e = hull[(i + 1) % n] - hull[i];
        const double len = std::hypot(e.x, e.y);
        if (len < 1e-12) continue;
        const Vec2 u{e.x / len, e.y / len};
        const Vec2 v{-u.y, u.x};
        double lo_u = 1e300, hi_u = -1e300, lo_v = 1e300, hi_v = -1e300;
        for (const Vec2& q : hull) {
            const double pu = dot(q, u);
            const double pv = dot(q, v);
            lo_u = std::min(lo_u, pu);
            hi_u = std::max(hi_u, pu);
            lo_v = std::min(lo_v, pv);
            hi_v = std::max(hi_v, pv);
        }
        const double area = (hi_u - lo_u) * (hi_v - lo_v);
        if (area < best_area) {
            best_area = area;
            const double mu = 0.5 * (lo_u + hi_u);
            const double mv = 0.5 * (lo_v + hi_v);
            OrientedBox ob;
            ob.cx = mu * u.x + mv * v.x;
            ob.cy = mu * u.y + mv * v.y;
            ob.w = hi_u - lo_u;
            ob.h = hi_v - lo_v;
            ob.theta = canonical_angle(std::atan2(u.y, u.x));
            best = ob;
        }
    }
    // The (w, h, theta) representation is two-fold degenerate (quarter-turn
    // plus extent swap). Pick the |theta| <= pi/4 form so output is unique.
    if (best.theta > kPi / 4.0) {
        best.theta -= kHalfPi;
        std::swap(best.w, best.h);
    } else if (best.theta < -kPi / 4.0) {
        best.theta += kHalfPi;
        std::swap(best.w, best.h);
    }
    return best;
}

// Dense multi-channel grid. Houses both encoder feature maps and the
// query-modulated maps used for objectness scoring.
struct SpatialMap {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<double> values;  // row-major, (y, x, c)

    SpatialMap() = default;
    SpatialMap(int h, int w, int c, double fill = 0.0)
        : height(h), width(w), channels(c), values(static_cast<std::size_t>(h) * w * c, fill) {
        if (h < 1 || w < 1 || c < 1) throw shape_error("SpatialMap: all dimensions must be >= 1");
    }

    double& at(int y, int x, int c) {
        return values[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    double at(int y, int x, int c) const {
        return values[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
};

// A grid cell belongs to a box iff its center lies inside the box, with
// half-open [x0, x1) x [y0, y1) membership so shared edges are unambiguous.
struct CellRange {
    int x0 = 0, x1 = 0, y0 = 0, y1 = 0;  // half-open cell index ranges
    bool empty() const { return x0 >= x1 || y0 >= y1; }
};

inline CellRange box_cell_range(const Box& box, int height, int width) {
    // ceil(v*n - 0.5) is both the first cell whose center (i + 0.5)/n >= v
    // and one past the last cell with center < v, which matches the
    // half-open membership rule on both ends.
    auto cell = [](double v, int n) { return static_cast<int>(std::ceil(v * n - 0.5)); };
    CellRange r;
    r.x0 = std::max(0, cell(box.x0(), width));
    r.x1 = std::min(width, cell(box.x1(), width));
    r.y0 = std::max(0, cell(box.y0(), height));
    r.y1 = std::min(height, cell(box.y1(), height));
    return r;
}

inline bool covers_cells(const Box& box, int height, int width) {
    return !box_cell_range(box, height, width).empty();
}

// Mean of the cells whose centers fall inside the box, one channel.
// Throws when the box covers no cell at this resolution.
inline double pool_region(const SpatialMap& map, const Box& box, int channel = 0) {
    if (channel < 0 || channel >= map.channels) throw shape_error("pool_region: channel out of range");
    const CellRange r = box_cell_range(box, map.height, map.width);
    if (r.empty()) throw shape_error("empty pooling region");
    double sum = 0.0;
    for (int y = r.y0; y < r.y1; ++y) {
        for (int x = r.x0; x < r.x1; ++x) {
            sum += map.at(y, x, channel);
        }
    }
    return sum / (static_cast<double>(r.y1 - r.y0) * (r.x1 - r.x0));
}

}  // namespace owd
