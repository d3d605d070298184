#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "dso/geometry.hpp"
#include "dso/rng.hpp"
#include "dso/util.hpp"

namespace dso {

struct SimConfig {
    double contact_eps_frac = 1e-7;  // contact band, fraction of diameter
    int max_topple_events = 256;
    double cutoff_deg = 20.0;        // stability cutoff on equilibrium tilt
    double com_tol = 1e-10;          // absolute slack on COM-over-support
};

struct ToppleEvent {
    Vec2 pivot;        // world-frame pivot point
    double angle_rad;  // signed rotation of this event
    double com_before; // COM height entering the event
    double com_after;  // COM height after the event
};

struct StabilityReport {
    double tilt_deg = 0.0;  // |orientation change from upright|, wrapped to [0,180]
    bool stable = false;
    bool settled = false;   // false iff the event budget ran out
    int topple_count = 0;
    std::vector<ToppleEvent> events;
    RigidTransform2D pose;  // body frame -> world frame at rest
};

// Binary verdict: stable iff the body settled with tilt strictly below the
// cutoff.
inline int stability_oracle(const StabilityReport& r, const SimConfig& cfg) {
    return (r.settled && r.tilt_deg < cfg.cutoff_deg) ? 1 : 0;
}

namespace detail {

inline double wrap_pi(double a) {
    while (a > kPi) a -= 2.0 * kPi;
    while (a <= -kPi) a += 2.0 * kPi;
    return a;
}

inline double hull_diameter(const Polygon2D& hull) {
    double d = 0.0;
    for (std::size_t i = 0; i < hull.v.size(); ++i)
        for (std::size_t j = i + 1; j < hull.v.size(); ++j)
            d = std::max(d, dist(hull.v[i], hull.v[j]));
    return d;
}

// Rotation by phi about a fixed world point.
inline RigidTransform2D rotation_about(Vec2 p, double phi) {
    RigidTransform2D r;
    r.angle = phi;
    const double c = std::cos(phi), s = std::sin(phi);
    r.t = {p.x - (c * p.x - s * p.y), p.y - (s * p.x + c * p.y)};
    return r;
}

// Quasi-static toppling of a rigid body given its hull (contact geometry)
// and center of mass. Gravity acts in -y; the ground is y = 0; contacts do
// not slide.
inline StabilityReport settle_hull(const Polygon2D& hull, Vec2 com_body,
                                   double initial_rotation,
                                   const SimConfig& cfg) {
    if (!(std::abs(initial_rotation) < kPi))
        throw InputError("settle: |initial rotation| must be < 180 degrees");
    const double diam = hull_diameter(hull);
    if (!(diam > 0.0)) throw GeometryError("settle: degenerate hull");
    const double contact_eps = cfg.contact_eps_frac * diam;

    StabilityReport rep;
    rep.pose.angle = initial_rotation;
    rep.pose.t = {0.0, 0.0};

    std::vector<Vec2> w(hull.v.size());
    auto refresh = [&] {
        double min_y = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < hull.v.size(); ++i) {
            w[i] = rep.pose.apply(hull.v[i]);
            min_y = std::min(min_y, w[i].y);
        }
        rep.pose.t.y -= min_y;  // rest on the ground
        for (auto& q : w) q.y -= min_y;
    };
    refresh();

    double accumulated = 0.0;
    for (int ev = 0; ev < cfg.max_topple_events; ++ev) {
        // support interval from the contact band
        double x_lo = std::numeric_limits<double>::infinity();
        double x_hi = -std::numeric_limits<double>::infinity();
        for (const Vec2& q : w)
            if (q.y <= contact_eps) {
                x_lo = std::min(x_lo, q.x);
                x_hi = std::max(x_hi, q.x);
            }
        const Vec2 com = rep.pose.apply(com_body);
        if (com.x >= x_lo - cfg.com_tol && com.x <= x_hi + cfg.com_tol) {
            rep.settled = true;
            break;
        }

        // pivot at the support endpoint on the COM side; gravity torque sets
        // the rotation direction
        const bool ccw = com.x < x_lo;
        Vec2 pivot{ccw ? x_lo : x_hi, 0.0};
        // snap the pivot to the actual contact vertex
        for (const Vec2& q : w)
            if (q.y <= contact_eps && q.x == (ccw ? x_lo : x_hi)) pivot = q;

        // smallest rotation that grounds another hull vertex: a vertex at
        // polar angle psi about the pivot lands at psi = pi (ccw) or 0 (cw)
        double phi = std::numeric_limits<double>::infinity();
        for (const Vec2& q : w) {
            const Vec2 d = q - pivot;
            if (norm(d) <= 1e-12 * diam) continue;
            const double psi = std::atan2(std::max(d.y, 0.0), d.x);
            const double cand = ccw ? (kPi - psi) : psi;
            if (cand > 1e-14 && cand < phi) phi = cand;
        }
        if (!std::isfinite(phi)) break;  // no landing vertex: leave unsettled

        const double signed_phi = ccw ? phi : -phi;
        const double com_before = com.y;
        rep.pose = compose(rotation_about(pivot, signed_phi), rep.pose);
        refresh();
        const double com_after = rep.pose.apply(com_body).y;
        accumulated += signed_phi;
        rep.events.push_back({pivot, signed_phi, com_before, com_after});
    }
    rep.topple_count = static_cast<int>(rep.events.size());
    rep.tilt_deg =
        std::abs(wrap_pi(initial_rotation + accumulated)) * 180.0 / kPi;
    rep.stable = rep.settled && rep.tilt_deg < cfg.cutoff_deg;
    return rep;
}

}  // namespace detail

// Settles a uniform-density rigid polygon dropped upright (plus an optional
// initial rotation) onto flat ground. Deterministic.
inline StabilityReport settle(const Polygon2D& p, double initial_rotation,
                              const SimConfig& cfg) {
    const Polygon2D hull = convex_hull(p.v);
    const Vec2 com = centroid_area(p).first;
    return detail::settle_hull(hull, com, initial_rotation, cfg);
}

// Independent oracle: center-of-mass height h(theta) on a dense rotation
// grid, greedy neighbor descent from theta = 0 to the nearest local minimum.
// Returns |theta*| in degrees.
inline double brute_force_settle(const Polygon2D& p,
                                 double grid_step_deg = 0.05) {
    if (!(grid_step_deg > 0.0 && grid_step_deg <= 0.1))
        throw InputError("brute_force_settle: grid step must be in (0, 0.1]");
    const Polygon2D hull = convex_hull(p.v);
    const Vec2 com = centroid_area(p).first;

    const int n = static_cast<int>(std::lround(360.0 / grid_step_deg));
    const int j0 = n / 2;  // theta = 0
    std::vector<double> h(n);
    for (int j = 0; j < n; ++j) {
        const double theta = (j - j0) * grid_step_deg * kPi / 180.0;
        const double c = std::cos(theta), s = std::sin(theta);
        double min_y = std::numeric_limits<double>::infinity();
        for (const Vec2& q : hull.v) min_y = std::min(min_y, s * q.x + c * q.y);
        h[j] = (s * com.x + c * com.y) - min_y;
    }

    int cur = j0;
    for (int guard = 0; guard < 2 * n; ++guard) {
        const int l = (cur + n - 1) % n;
        const int r = (cur + 1) % n;
        if (h[l] < h[cur] && h[l] <= h[r])
            cur = l;
        else if (h[r] < h[cur])
            cur = r;
        else
            break;
    }
    return std::abs((cur - j0) * grid_step_deg);
}

// Average stability under random initial rotations in (-theta_max, theta_max).
inline double perturbation_sweep(const Polygon2D& p, double theta_max_rad,
                                 int n_runs, std::uint64_t seed,
                                 const SimConfig& cfg) {
    if (n_runs < 1) throw InputError("perturbation_sweep: need n_runs >= 1");
    if (!(theta_max_rad >= 0.0))
        throw InputError("perturbation_sweep: theta_max must be >= 0");
    const Polygon2D hull = convex_hull(p.v);
    const Vec2 com = centroid_area(p).first;
    Rng rng(seed);
    std::vector<double> thetas(n_runs);
    for (int i = 0; i < n_runs; ++i)
        thetas[i] = theta_max_rad > 0.0
                        ? rng.uniform(-theta_max_rad, theta_max_rad)
                        : 0.0;
    std::vector<int> bits(n_runs, 0);
    parallel_for(n_runs, [&](std::int64_t i) {
        const StabilityReport r =
            detail::settle_hull(hull, com, thetas[i], cfg);
        bits[i] = stability_oracle(r, cfg);
    });
    long total = 0;
    for (int b : bits) total += b;
    return static_cast<double>(total) / n_runs;
}

// Removes everything below y_min + z and closes the outline with a flat
// bottom edge (half-plane clip).
inline Polygon2D flat_cut(const Polygon2D& p, double z) {
    if (p.v.size() < 3) throw GeometryError("flat_cut: invalid polygon");
    const BBox bb = bounding_box(p);
    if (!(z > 0.0 && z < bb.height()))
        throw InputError("flat_cut: z must be in (0, bbox height)");
    const double cut = bb.min_y + z;

    std::vector<Vec2> out;
    const std::size_t n = p.v.size();
    for (std::size_t i = 0; i < n; ++i) {
        const Vec2 a = p.v[i];
        const Vec2 b = p.v[(i + 1) % n];
        const bool a_in = a.y >= cut;
        const bool b_in = b.y >= cut;
        if (a_in) out.push_back(a);
        if (a_in != b_in) {
            const double t = (cut - a.y) / (b.y - a.y);
            out.push_back({a.x + t * (b.x - a.x), cut});
        }
    }
    // drop duplicate consecutive vertices introduced by tangential cuts
    const double eps = 1e-12 * std::max(bb.width(), bb.height());
    Polygon2D q;
    for (const Vec2& v : out) {
        if (!q.v.empty() && dist(q.v.back(), v) <= eps) continue;
        q.v.push_back(v);
    }
    while (q.v.size() > 1 && dist(q.v.front(), q.v.back()) <= eps)
        q.v.pop_back();
    if (q.v.size() < 3 || signed_area(q) <= 1e-12)
        throw GeometryError("flat_cut: cut removes the entire polygon");
    return q;
}

}  // namespace dso
