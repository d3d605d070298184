#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "dso/rng.hpp"
#include "dso/tensor.hpp"
#include "dso/util.hpp"

namespace dso {

inline constexpr double kPi = 3.14159265358979323846;

struct Vec2 {
    double x = 0.0, y = 0.0;

    Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
    Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
    Vec2 operator*(double s) const { return {x * s, y * s}; }
};

inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
inline double norm(Vec2 a) { return std::sqrt(dot(a, a)); }
inline double dist(Vec2 a, Vec2 b) { return norm(a - b); }

// Latent vector a flow sample decodes from; one pre-activation radius per
// boundary direction.
struct ShapeLatent {
    std::vector<double> values;

    bool all_finite() const {
        for (double v : values)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

// Simple polygon, counter-clockwise, positive area.
struct Polygon2D {
    std::vector<Vec2> v;
};

struct PointSet {
    std::vector<Vec2> pts;
};

struct RigidTransform2D {
    double angle = 0.0;  // radians
    Vec2 t;

    Vec2 apply(Vec2 p) const {
        const double c = std::cos(angle), s = std::sin(angle);
        return {c * p.x - s * p.y + t.x, s * p.x + c * p.y + t.y};
    }

    RigidTransform2D inverse() const {
        const double c = std::cos(angle), s = std::sin(angle);
        return {-angle, {-(c * t.x + s * t.y), -(-s * t.x + c * t.y)}};
    }
};

// a then b: compose(b, a).apply(p) == b.apply(a.apply(p))
inline RigidTransform2D compose(const RigidTransform2D& b,
                                const RigidTransform2D& a) {
    const double c = std::cos(b.angle), s = std::sin(b.angle);
    return {b.angle + a.angle,
            {c * a.t.x - s * a.t.y + b.t.x, s * a.t.x + c * a.t.y + b.t.y}};
}

inline Polygon2D transformed(const Polygon2D& p, const RigidTransform2D& t) {
    Polygon2D out;
    out.v.reserve(p.v.size());
    for (Vec2 q : p.v) out.v.push_back(t.apply(q));
    return out;
}

inline double stable_softplus(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// Star-shaped decode: vertex i at angle 2*pi*i/K with radius
// r_min + softplus(latent_i). Simple and CCW by construction.
// Non-finite latents are decode failures (reported, not thrown) so callers
// can account them against the output rate.
inline std::optional<Polygon2D> decode_shape(const ShapeLatent& latent, int k,
                                             double r_min) {
    if (k < 3) throw InputError("decode_shape: need at least 3 directions");
    if (static_cast<int>(latent.values.size()) != k)
        throw InputError("decode_shape: latent dim must equal vertex count");
    if (r_min <= 0.0) throw InputError("decode_shape: r_min must be > 0");
    if (!latent.all_finite()) return std::nullopt;
    Polygon2D p;
    p.v.reserve(k);
    for (int i = 0; i < k; ++i) {
        const double phi = 2.0 * kPi * i / k;
        const double r = r_min + stable_softplus(latent.values[i]);
        p.v.push_back({r * std::cos(phi), r * std::sin(phi)});
    }
    return p;
}

inline double signed_area(const Polygon2D& p) {
    double a = 0.0;
    const std::size_t n = p.v.size();
    for (std::size_t i = 0; i < n; ++i) {
        const Vec2& u = p.v[i];
        const Vec2& w = p.v[(i + 1) % n];
        a += cross(u, w);
    }
    return 0.5 * a;
}

// Shoelace centroid and area of a uniform-density polygon.
inline std::pair<Vec2, double> centroid_area(const Polygon2D& p) {
    if (p.v.size() < 3) throw GeometryError("polygon needs >= 3 vertices");
    const std::size_t n = p.v.size();
    double a = 0.0, cx = 0.0, cy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const Vec2& u = p.v[i];
        const Vec2& w = p.v[(i + 1) % n];
        const double c = cross(u, w);
        a += c;
        cx += (u.x + w.x) * c;
        cy += (u.y + w.y) * c;
    }
    a *= 0.5;
    if (a <= 1e-12) throw GeometryError("degenerate polygon (area <= 1e-12)");
    return {{cx / (6.0 * a), cy / (6.0 * a)}, a};
}

// Monotone-chain hull, CCW, collinear boundary points dropped. Ties are
// broken by the lexicographic (x, y) sort, so the result is deterministic.
inline Polygon2D convex_hull(const std::vector<Vec2>& points) {
    if (points.size() < 3) throw GeometryError("hull needs >= 3 points");
    std::vector<Vec2> pts = points;
    std::sort(pts.begin(), pts.end(), [](Vec2 a, Vec2 b) {
        return a.x < b.x || (a.x == b.x && a.y < b.y);
    });
    pts.erase(std::unique(pts.begin(), pts.end(),
                          [](Vec2 a, Vec2 b) { return a.x == b.x && a.y == b.y; }),
              pts.end());
    const std::size_t n = pts.size();
    if (n < 3) throw GeometryError("hull needs >= 3 distinct points");

    std::vector<Vec2> h(2 * n);
    std::size_t k = 0;
    for (std::size_t i = 0; i < n; ++i) {  // lower chain
        while (k >= 2 && cross(h[k - 1] - h[k - 2], pts[i] - h[k - 2]) <= 0.0)
            --k;
        h[k++] = pts[i];
    }
    const std::size_t lower = k + 1;
    for (std::size_t i = n - 1; i-- > 0;) {  // upper chain
        while (k >= lower && cross(h[k - 1] - h[k - 2], pts[i] - h[k - 2]) <= 0.0)
            --k;
        h[k++] = pts[i];
    }
    h.resize(k - 1);
    if (h.size() < 3) throw GeometryError("all points collinear");
    Polygon2D out;
    out.v = std::move(h);
    return out;
}

inline double perimeter(const Polygon2D& p) {
    double len = 0.0;
    for (std::size_t i = 0; i < p.v.size(); ++i)
        len += dist(p.v[i], p.v[(i + 1) % p.v.size()]);
    return len;
}

// N boundary points, stratified uniformly by arc length: point i sits at
// arc position (i + u_i) * L / N.
inline PointSet sample_boundary(const Polygon2D& p, int n, std::uint64_t seed) {
    if (n < 2) throw InputError("sample_boundary: need n >= 2");
    if (p.v.size() < 3) throw GeometryError("polygon needs >= 3 vertices");
    const std::size_t m = p.v.size();
    std::vector<double> cum(m + 1, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        cum[i + 1] = cum[i] + dist(p.v[i], p.v[(i + 1) % m]);
    const double total = cum[m];
    if (total <= 0.0) throw GeometryError("zero-length boundary");

    Rng rng(seed);
    PointSet out;
    out.pts.reserve(n);
    std::size_t seg = 0;
    for (int i = 0; i < n; ++i) {
        const double s = (i + rng.uniform()) * total / n;
        while (seg + 1 < m && cum[seg + 1] < s) ++seg;
        const double w = cum[seg + 1] - cum[seg];
        const double f = w > 0.0 ? (s - cum[seg]) / w : 0.0;
        const Vec2 a = p.v[seg];
        const Vec2 b = p.v[(seg + 1) % m];
        out.pts.push_back(a + (b - a) * f);
    }
    return out;
}

inline double nearest_dist(Vec2 q, const PointSet& s) {
    double best = std::numeric_limits<double>::infinity();
    for (Vec2 p : s.pts) best = std::min(best, dist(q, p));
    return best;
}

// Symmetric Chamfer distance: mean of means of nearest-neighbor distances,
// halved.
inline double chamfer(const PointSet& a, const PointSet& b) {
    if (a.pts.empty() || b.pts.empty())
        throw InputError("chamfer: empty point set");
    double da = 0.0, db = 0.0;
    for (Vec2 q : a.pts) da += nearest_dist(q, b);
    for (Vec2 q : b.pts) db += nearest_dist(q, a);
    return 0.5 * (da / a.pts.size() + db / b.pts.size());
}

// Harmonic mean of precision/recall at threshold tau; in [0, 1].
inline double fscore(const PointSet& a, const PointSet& b, double tau) {
    if (a.pts.empty() || b.pts.empty())
        throw InputError("fscore: empty point set");
    if (tau <= 0.0) throw InputError("fscore: tau must be > 0");
    std::size_t hit_a = 0, hit_b = 0;
    for (Vec2 q : a.pts)
        if (nearest_dist(q, b) <= tau) ++hit_a;
    for (Vec2 q : b.pts)
        if (nearest_dist(q, a) <= tau) ++hit_b;
    const double precision = static_cast<double>(hit_a) / a.pts.size();
    const double recall = static_cast<double>(hit_b) / b.pts.size();
    if (precision + recall == 0.0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

struct BBox {
    double min_x, min_y, max_x, max_y;
    double width() const { return max_x - min_x; }
    double height() const { return max_y - min_y; }
};

inline BBox bounding_box(const Polygon2D& p) {
    BBox b{p.v[0].x, p.v[0].y, p.v[0].x, p.v[0].y};
    for (Vec2 q : p.v) {
        b.min_x = std::min(b.min_x, q.x);
        b.min_y = std::min(b.min_y, q.y);
        b.max_x = std::max(b.max_x, q.x);
        b.max_y = std::max(b.max_y, q.y);
    }
    return b;
}

// Isotropic rescale + translate into [0,1]^2: the longer bbox side spans
// [0,1], the shorter axis is centered. Idempotent and scale-invariant.
inline Polygon2D normalize_unit_box(const Polygon2D& p) {
    if (p.v.size() < 3) throw GeometryError("polygon needs >= 3 vertices");
    const BBox b = bounding_box(p);
    const double side = std::max(b.width(), b.height());
    if (!(side > 1e-12)) throw GeometryError("degenerate bounding box");
    const double s = 1.0 / side;
    const double off_x = (1.0 - b.width() * s) * 0.5;
    const double off_y = (1.0 - b.height() * s) * 0.5;
    Polygon2D out;
    out.v.reserve(p.v.size());
    for (Vec2 q : p.v)
        out.v.push_back({(q.x - b.min_x) * s + off_x, (q.y - b.min_y) * s + off_y});
    return out;
}

inline PointSet transformed(const PointSet& s, const RigidTransform2D& t) {
    PointSet out;
    out.pts.reserve(s.pts.size());
    for (Vec2 q : s.pts) out.pts.push_back(t.apply(q));
    return out;
}

struct IcpResult {
    RigidTransform2D transform;  // applied to the source set
    double cd = 0.0;             // Chamfer distance after alignment
    int iterations = 0;
};

// Point-to-point ICP with the closed-form 2D rigid fit (cross-covariance
// angle). Starts from the identity and never returns a transform that is
// worse than one already seen.
inline IcpResult icp_align(const PointSet& src, const PointSet& dst,
                           int max_iters = 50, double tol = 1e-9) {
    if (src.pts.size() < 3 || dst.pts.size() < 3)
        throw InputError("icp_align: need >= 3 points per set");
    IcpResult best;
    best.transform = {};
    best.cd = chamfer(src, dst);

    RigidTransform2D cur{};
    for (int it = 0; it < max_iters; ++it) {
        const PointSet moved = transformed(src, cur);
        // correspondences: each moved source point to its nearest target
        Vec2 mu_s{0, 0}, mu_d{0, 0};
        std::vector<Vec2> match(moved.pts.size());
        for (std::size_t i = 0; i < moved.pts.size(); ++i) {
            double bd = std::numeric_limits<double>::infinity();
            Vec2 bq{};
            for (Vec2 q : dst.pts) {
                const double d = dist(moved.pts[i], q);
                if (d < bd) {
                    bd = d;
                    bq = q;
                }
            }
            match[i] = bq;
            mu_s = mu_s + moved.pts[i];
            mu_d = mu_d + bq;
        }
        const double inv_n = 1.0 / static_cast<double>(moved.pts.size());
        mu_s = mu_s * inv_n;
        mu_d = mu_d * inv_n;
        double sc = 0.0, ss = 0.0;
        for (std::size_t i = 0; i < moved.pts.size(); ++i) {
            const Vec2 a = moved.pts[i] - mu_s;
            const Vec2 b = match[i] - mu_d;
            sc += dot(a, b);
            ss += cross(a, b);
        }
        const double theta = std::atan2(ss, sc);
        RigidTransform2D inc;
        inc.angle = theta;
        const double c = std::cos(theta), s = std::sin(theta);
        inc.t = {mu_d.x - (c * mu_s.x - s * mu_s.y),
                 mu_d.y - (s * mu_s.x + c * mu_s.y)};

        const RigidTransform2D cand = compose(inc, cur);
        const double cd = chamfer(transformed(src, cand), dst);
        if (best.cd - cd < tol) {
            if (cd < best.cd) {
                best.transform = cand;
                best.cd = cd;
                best.iterations = it + 1;
            }
            break;
        }
        cur = cand;
        best.transform = cand;
        best.cd = cd;
        best.iterations = it + 1;
    }
    return best;
}

}  // namespace dso
