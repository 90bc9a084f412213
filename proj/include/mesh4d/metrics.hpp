#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mesh4d/common.hpp"
#include "mesh4d/mesh.hpp"

namespace mesh4d {

struct Bounds {
    Vec3 lo, hi;

    void validate() const {
        MESH4D_CHECK(lo.finite() && hi.finite(), "Bounds: unbounded");
        MESH4D_CHECK(hi.x > lo.x && hi.y > lo.y && hi.z > lo.z, "Bounds: empty extent");
    }

    static Bounds of_mesh(const TriMesh& mesh) {
        Bounds b{mesh.vertices[0], mesh.vertices[0]};
        for (const Vec3& v : mesh.vertices) {
            b.lo = {std::min(b.lo.x, v.x), std::min(b.lo.y, v.y), std::min(b.lo.z, v.z)};
            b.hi = {std::max(b.hi.x, v.x), std::max(b.hi.y, v.y), std::max(b.hi.z, v.z)};
        }
        return b;
    }

    static Bounds union_of(const Bounds& a, const Bounds& b) {
        return {{std::min(a.lo.x, b.lo.x), std::min(a.lo.y, b.lo.y), std::min(a.lo.z, b.lo.z)},
                {std::max(a.hi.x, b.hi.x), std::max(a.hi.y, b.hi.y), std::max(a.hi.z, b.hi.z)}};
    }

    Bounds padded(double fraction) const {
        const Vec3 d = (hi - lo) * fraction;
        return {lo - d, hi + d};
    }
};

struct OccupancyGrid {
    std::size_t resolution = 0;
    Vec3 origin;
    Vec3 cell_size;
    std::vector<uint8_t> bits;  // resolution^3, x fastest
    bool used_winding_fallback = false;

    std::size_t index(std::size_t i, std::size_t j, std::size_t k) const {
        return (k * resolution + j) * resolution + i;
    }
    std::size_t count() const {
        std::size_t n = 0;
        for (uint8_t b : bits) n += b;
        return n;
    }
};

inline bool is_watertight(const TriMesh& mesh) {
    std::map<std::pair<uint32_t, uint32_t>, int> edges;
    for (const Face& f : mesh.faces)
        for (int e = 0; e < 3; ++e) {
            uint32_t a = f[e], b = f[(e + 1) % 3];
            if (a > b) std::swap(a, b);
            edges[{a, b}] += 1;
        }
    for (const auto& [e, n] : edges)
        if (n != 2) return false;
    return true;
}

namespace detail {

// Crossing x-coordinates of a +x ray from (x=-inf, y, z) with the mesh.
// Returns false when the ray grazes an edge/vertex and needs a jitter retry.
inline bool ray_crossings_x(const TriMesh& mesh, double y, double z, std::vector<double>& xs) {
    xs.clear();
    constexpr double kEdgeEps = 1e-9;
    for (const Face& f : mesh.faces) {
        const Vec3 &a = mesh.vertices[f[0]], &b = mesh.vertices[f[1]], &c = mesh.vertices[f[2]];
        const double d1y = b.y - a.y, d1z = b.z - a.z;
        const double d2y = c.y - a.y, d2z = c.z - a.z;
        const double det = d1y * d2z - d2y * d1z;  // x-component of the face normal
        if (std::abs(det) < 1e-14) continue;       // parallel to the ray
        const double py = y - a.y, pz = z - a.z;
        const double u = (py * d2z - d2y * pz) / det;
        const double v = (d1y * pz - py * d1z) / det;
        const double w = 1.0 - u - v;
        if (u < -kEdgeEps || v < -kEdgeEps || w < -kEdgeEps) continue;
        if (u < kEdgeEps || v < kEdgeEps || w < kEdgeEps) return false;  // edge graze
        xs.push_back(a.x + u * (b.x - a.x) + v * (c.x - a.x));
    }
    std::sort(xs.begin(), xs.end());
    return true;
}

inline double solid_angle(const Vec3& a, const Vec3& b, const Vec3& c) {
    const double la = a.norm(), lb = b.norm(), lc = c.norm();
    const double numer = a.dot(b.cross(c));
    const double denom = la * lb * lc + a.dot(b) * lc + a.dot(c) * lb + b.dot(c) * la;
    return 2.0 * std::atan2(numer, denom);
}

inline double winding_number(const TriMesh& mesh, const Vec3& p) {
    double w = 0.0;
    for (const Face& f : mesh.faces)
        w += solid_angle(mesh.vertices[f[0]] - p, mesh.vertices[f[1]] - p, mesh.vertices[f[2]] - p);
    return w / (4.0 * M_PI);
}

}  // namespace detail

// Voxel occupancy: cell occupied iff its center is inside the mesh. Watertight
// meshes use +x ray parity per scanline (with 1e-6 jitter on grazing hits);
// others fall back to generalized winding number thresholded at 0.5.
inline OccupancyGrid occupancy(const TriMesh& mesh, std::size_t resolution, const Bounds& bounds) {
    bounds.validate();
    MESH4D_CHECK(resolution >= 1, "occupancy: bad resolution");
    OccupancyGrid grid;
    grid.resolution = resolution;
    grid.origin = bounds.lo;
    grid.cell_size = {(bounds.hi.x - bounds.lo.x) / resolution, (bounds.hi.y - bounds.lo.y) / resolution,
                      (bounds.hi.z - bounds.lo.z) / resolution};
    grid.bits.assign(resolution * resolution * resolution, 0);
    if (mesh.faces.empty()) return grid;

    const double jitter = 1e-6 * std::max({bounds.hi.x - bounds.lo.x, bounds.hi.y - bounds.lo.y,
                                           bounds.hi.z - bounds.lo.z});
    if (is_watertight(mesh)) {
        std::vector<double> xs;
        for (std::size_t k = 0; k < resolution; ++k)
            for (std::size_t j = 0; j < resolution; ++j) {
                double y = grid.origin.y + (j + 0.5) * grid.cell_size.y;
                double z = grid.origin.z + (k + 0.5) * grid.cell_size.z;
                int attempts = 0;
                while (!detail::ray_crossings_x(mesh, y, z, xs) && attempts < 8) {
                    y += jitter;
                    z += jitter * 1.37;
                    ++attempts;
                }
                if (attempts == 8) continue;  // give up on a pathological row
                for (std::size_t i = 0; i < resolution; ++i) {
                    const double cx = grid.origin.x + (i + 0.5) * grid.cell_size.x;
                    const std::size_t crossings =
                        std::lower_bound(xs.begin(), xs.end(), cx) - xs.begin();
                    if (crossings % 2 == 1) grid.bits[grid.index(i, j, k)] = 1;
                }
            }
    } else {
        grid.used_winding_fallback = true;
        for (std::size_t k = 0; k < resolution; ++k)
            for (std::size_t j = 0; j < resolution; ++j)
                for (std::size_t i = 0; i < resolution; ++i) {
                    const Vec3 p{grid.origin.x + (i + 0.5) * grid.cell_size.x,
                                 grid.origin.y + (j + 0.5) * grid.cell_size.y,
                                 grid.origin.z + (k + 0.5) * grid.cell_size.z};
                    if (detail::winding_number(mesh, p) > 0.5) grid.bits[grid.index(i, j, k)] = 1;
                }
    }
    return grid;
}

// |a AND b| / |a OR b| over shared-bounds voxelizations. Both meshes empty is
// defined as 1.
inline double volumetric_iou(const TriMesh& a, const TriMesh& b, std::size_t resolution = 64) {
    const Bounds bounds = Bounds::union_of(Bounds::of_mesh(a), Bounds::of_mesh(b)).padded(0.05);
    const OccupancyGrid ga = occupancy(a, resolution, bounds);
    const OccupancyGrid gb = occupancy(b, resolution, bounds);
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < ga.bits.size(); ++i) {
        inter += ga.bits[i] & gb.bits[i];
        uni += ga.bits[i] | gb.bits[i];
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

// Exact closest point on a triangle (region-based).
inline Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
    const Vec3 ab = b - a, ac = c - a, ap = p - a;
    const double d1 = ab.dot(ap), d2 = ac.dot(ap);
    if (d1 <= 0.0 && d2 <= 0.0) return a;
    const Vec3 bp = p - b;
    const double d3 = ab.dot(bp), d4 = ac.dot(bp);
    if (d3 >= 0.0 && d4 <= d3) return b;
    const double vc = d1 * d4 - d3 * d2;
    if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) return a + ab * (d1 / (d1 - d3));
    const Vec3 cp = p - c;
    const double d5 = ab.dot(cp), d6 = ac.dot(cp);
    if (d6 >= 0.0 && d5 <= d6) return c;
    const double vb = d5 * d2 - d1 * d6;
    if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) return a + ac * (d2 / (d2 - d6));
    const double va = d3 * d6 - d5 * d4;
    if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0)
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    const double denom = 1.0 / (va + vb + vc);
    return a + ab * (vb * denom) + ac * (vc * denom);
}

// Mean distance from points to the closest triangle of the mesh.
inline double p2s(const std::vector<Vec3>& points, const TriMesh& mesh) {
    MESH4D_CHECK(!points.empty(), "p2s: empty point set");
    mesh.validate();
    double acc = 0.0;
    for (const Vec3& p : points) {
        double best = std::numeric_limits<double>::infinity();
        for (const Face& f : mesh.faces) {
            const Vec3 q = closest_point_on_triangle(p, mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
            best = std::min(best, (p - q).norm2());
        }
        acc += std::sqrt(best);
    }
    return acc / static_cast<double>(points.size());
}

namespace detail {

// Exact nearest-neighbor via a uniform grid with expanding-shell search;
// results equal brute force.
class PointGrid {
public:
    explicit PointGrid(const std::vector<Vec3>& pts) : pts_(pts) {
        lo_ = hi_ = pts[0];
        for (const Vec3& p : pts) {
            lo_ = {std::min(lo_.x, p.x), std::min(lo_.y, p.y), std::min(lo_.z, p.z)};
            hi_ = {std::max(hi_.x, p.x), std::max(hi_.y, p.y), std::max(hi_.z, p.z)};
        }
        const double target = std::cbrt(static_cast<double>(pts.size()));
        res_ = std::max<std::size_t>(1, static_cast<std::size_t>(target));
        cell_ = {std::max(1e-12, (hi_.x - lo_.x) / res_), std::max(1e-12, (hi_.y - lo_.y) / res_),
                 std::max(1e-12, (hi_.z - lo_.z) / res_)};
        cells_.resize(res_ * res_ * res_);
        for (std::size_t i = 0; i < pts.size(); ++i) cells_[cell_of(pts[i])].push_back(i);
    }

    // (index, squared distance) of the nearest stored point
    std::pair<std::size_t, double> nearest(const Vec3& q) const {
        const long ci = clamp_axis((q.x - lo_.x) / cell_.x);
        const long cj = clamp_axis((q.y - lo_.y) / cell_.y);
        const long ck = clamp_axis((q.z - lo_.z) / cell_.z);
        std::size_t best_idx = 0;
        double best = std::numeric_limits<double>::infinity();
        const double min_cell = std::min({cell_.x, cell_.y, cell_.z});
        for (long ring = 0; ring < static_cast<long>(res_) + 1; ++ring) {
            if (best < std::numeric_limits<double>::infinity()) {
                // all cells at Chebyshev distance `ring` are at least (ring-1)*min_cell away
                const double lower = (ring - 1) * min_cell;
                if (lower > 0.0 && lower * lower > best) break;
            }
            for (long dk = -ring; dk <= ring; ++dk)
                for (long dj = -ring; dj <= ring; ++dj)
                    for (long di = -ring; di <= ring; ++di) {
                        if (std::max({std::abs(di), std::abs(dj), std::abs(dk)}) != ring) continue;
                        const long i = ci + di, j = cj + dj, k = ck + dk;
                        if (i < 0 || j < 0 || k < 0 || i >= static_cast<long>(res_) ||
                            j >= static_cast<long>(res_) || k >= static_cast<long>(res_))
                            continue;
                        for (std::size_t idx : cells_[(static_cast<std::size_t>(k) * res_ + j) * res_ + i]) {
                            const double d = (pts_[idx] - q).norm2();
                            if (d < best) {
                                best = d;
                                best_idx = idx;
                            }
                        }
                    }
        }
        return {best_idx, best};
    }

private:
    long clamp_axis(double x) const {
        return std::clamp<long>(static_cast<long>(x), 0, static_cast<long>(res_) - 1);
    }
    std::size_t cell_of(const Vec3& p) const {
        const long i = clamp_axis((p.x - lo_.x) / cell_.x);
        const long j = clamp_axis((p.y - lo_.y) / cell_.y);
        const long k = clamp_axis((p.z - lo_.z) / cell_.z);
        return (static_cast<std::size_t>(k) * res_ + j) * res_ + i;
    }

    const std::vector<Vec3>& pts_;
    Vec3 lo_, hi_, cell_;
    std::size_t res_ = 1;
    std::vector<std::vector<std::size_t>> cells_;
};

}  // namespace detail

// Symmetric unsquared Chamfer distance between two point clouds.
inline double chamfer(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
    MESH4D_CHECK(!a.empty() && !b.empty(), "chamfer: empty point set");
    const detail::PointGrid ga(a), gb(b);
    double ab = 0.0, ba = 0.0;
    for (const Vec3& p : a) ab += std::sqrt(gb.nearest(p).second);
    for (const Vec3& p : b) ba += std::sqrt(ga.nearest(p).second);
    return 0.5 * (ab / a.size() + ba / b.size());
}

struct L2CorrResult {
    double aggregate = 0.0;           // mean over frames t >= 2
    std::vector<double> per_frame;    // frame 1 holds the matching residual
};

// Tracking error: match ground-truth frame-1 vertices to nearest predicted
// frame-1 vertices, then measure matched-pair distances at every frame.
inline L2CorrResult l2_corr(const MeshSequence& pred, const MeshSequence& gt) {
    MESH4D_CHECK(pred.frame_count() == gt.frame_count(), "l2_corr: frame count mismatch");
    MESH4D_CHECK(pred.vertex_count() > 0 && gt.vertex_count() > 0, "l2_corr: empty mesh");
    const detail::PointGrid grid(pred.frames[0]);
    std::vector<std::size_t> match(gt.vertex_count());
    for (std::size_t i = 0; i < gt.vertex_count(); ++i) match[i] = grid.nearest(gt.frames[0][i]).first;

    L2CorrResult r;
    for (std::size_t t = 0; t < gt.frame_count(); ++t) {
        double acc = 0.0;
        for (std::size_t i = 0; i < gt.vertex_count(); ++i)
            acc += (gt.frames[t][i] - pred.frames[t][match[i]]).norm();
        r.per_frame.push_back(acc / static_cast<double>(gt.vertex_count()));
    }
    if (gt.frame_count() >= 2) {
        double acc = 0.0;
        for (std::size_t t = 1; t < gt.frame_count(); ++t) acc += r.per_frame[t];
        r.aggregate = acc / static_cast<double>(gt.frame_count() - 1);
    }
    return r;
}

struct AlignmentTransform {
    double scale = 1.0;
    Mat3 rotation;
    Vec3 translation;

    Vec3 apply(const Vec3& p) const { return rotation * p * scale + translation; }
};

struct CpdResult {
    AlignmentTransform transform;
    double final_sigma2 = 0.0;
    std::vector<double> nll_per_iteration;
    std::size_t iterations = 0;
    bool sigma_collapsed = false;
};

// Coherent Point Drift, rigid + scale variant. EM over a GMM whose centroids
// are the transformed source points; closed-form M-step via SVD of the
// weighted cross-covariance.
inline CpdResult cpd_rigid(const std::vector<Vec3>& source, const std::vector<Vec3>& target,
                           double outlier_weight = 0.0, std::size_t max_iter = 100, double tol = 1e-8) {
    const std::size_t M = source.size(), N = target.size();
    MESH4D_CHECK(M >= 3 && N >= 3, "cpd_rigid: need at least 3 points per cloud");
    MESH4D_CHECK(outlier_weight >= 0.0 && outlier_weight < 1.0, "cpd_rigid: outlier weight outside [0,1)");

    auto check_rank3 = [](const std::vector<Vec3>& pts, const char* which) {
        Vec3 mean{};
        for (const Vec3& p : pts) mean += p;
        mean = mean / static_cast<double>(pts.size());
        Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
        for (const Vec3& p : pts) {
            Eigen::Vector3d d(p.x - mean.x, p.y - mean.y, p.z - mean.z);
            cov += d * d.transpose();
        }
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
        MESH4D_CHECK(es.eigenvalues()(0) > 1e-12 * std::max(1.0, es.eigenvalues()(2)),
                     std::string("cpd_rigid: degenerate (rank<3) ") + which + " configuration");
    };
    check_rank3(source, "source");
    check_rank3(target, "target");

    CpdResult res;
    double s = 1.0;
    Mat3 R = Mat3::identity();
    Vec3 t{};

    double sigma2 = 0.0;
    for (const Vec3& x : target)
        for (const Vec3& y : source) sigma2 += (x - y).norm2();
    sigma2 /= static_cast<double>(3 * M * N);

    std::vector<double> P(M * N);       // posterior, source-major
    std::vector<double> Pt1(N), P1(M);  // column / row sums

    for (std::size_t iter = 0; iter < max_iter; ++iter) {
        // E-step with current (s, R, t, sigma2)
        std::vector<Vec3> ty(M);
        for (std::size_t m = 0; m < M; ++m) ty[m] = R * source[m] * s + t;

        const double c_out = outlier_weight > 0.0
                                 ? std::pow(2.0 * M_PI * sigma2, 1.5) * (outlier_weight / (1.0 - outlier_weight)) *
                                       (static_cast<double>(M) / static_cast<double>(N))
                                 : 0.0;
        double nll = 0.0;
        std::fill(P1.begin(), P1.end(), 0.0);
        double Np = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
            double min_d2 = std::numeric_limits<double>::infinity();
            for (std::size_t m = 0; m < M; ++m)
                min_d2 = std::min(min_d2, (target[n] - ty[m]).norm2());
            double denom = 0.0;
            for (std::size_t m = 0; m < M; ++m) {
                const double e = std::exp(-((target[n] - ty[m]).norm2() - min_d2) / (2.0 * sigma2));
                P[m * N + n] = e;
                denom += e;
            }
            // outlier term shares the max-shift; may dominate when min_d2 is large
            double full_denom = denom;
            if (outlier_weight > 0.0) {
                const double log_c_shifted = std::log(c_out) + min_d2 / (2.0 * sigma2);
                full_denom += log_c_shifted > 300.0 ? std::numeric_limits<double>::infinity()
                                                    : std::exp(log_c_shifted);
            }
            if (outlier_weight == 0.0) {
                nll -= std::log(denom) - min_d2 / (2.0 * sigma2) - 1.5 * std::log(2.0 * M_PI * sigma2) -
                       std::log(static_cast<double>(M));
            } else {
                const double g = (1.0 - outlier_weight) * std::pow(2.0 * M_PI * sigma2, -1.5) /
                                 static_cast<double>(M) * denom;
                nll -= std::log(g * std::exp(-min_d2 / (2.0 * sigma2)) +
                                outlier_weight / static_cast<double>(N));
            }
            double col = 0.0;
            if (std::isinf(full_denom)) {
                for (std::size_t m = 0; m < M; ++m) P[m * N + n] = 0.0;
            } else {
                for (std::size_t m = 0; m < M; ++m) {
                    P[m * N + n] /= full_denom;
                    P1[m] += P[m * N + n];
                    col += P[m * N + n];
                }
            }
            Pt1[n] = col;
            Np += col;
        }
        res.nll_per_iteration.push_back(nll);
        res.iterations = iter + 1;
        if (Np < 1e-12) {
            res.sigma_collapsed = true;  // posterior mass vanished (all points explained as outliers)
            break;
        }

        // M-step
        Vec3 mu_x{}, mu_y{};
        for (std::size_t n = 0; n < N; ++n) mu_x += target[n] * Pt1[n];
        for (std::size_t m = 0; m < M; ++m) mu_y += source[m] * P1[m];
        mu_x = mu_x / Np;
        mu_y = mu_y / Np;

        Eigen::Matrix3d A = Eigen::Matrix3d::Zero();
        for (std::size_t m = 0; m < M; ++m) {
            const Vec3 yh = source[m] - mu_y;
            for (std::size_t n = 0; n < N; ++n) {
                const double p = P[m * N + n];
                if (p == 0.0) continue;
                const Vec3 xh = target[n] - mu_x;
                A(0, 0) += p * xh.x * yh.x;
                A(0, 1) += p * xh.x * yh.y;
                A(0, 2) += p * xh.x * yh.z;
                A(1, 0) += p * xh.y * yh.x;
                A(1, 1) += p * xh.y * yh.y;
                A(1, 2) += p * xh.y * yh.z;
                A(2, 0) += p * xh.z * yh.x;
                A(2, 1) += p * xh.z * yh.y;
                A(2, 2) += p * xh.z * yh.z;
            }
        }

        Eigen::JacobiSVD<Eigen::Matrix3d> svd(A, Eigen::ComputeFullU | Eigen::ComputeFullV);
        Eigen::Matrix3d C = Eigen::Matrix3d::Identity();
        C(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant();
        const Eigen::Matrix3d Re = svd.matrixU() * C * svd.matrixV().transpose();

        double yPy = 0.0, xPx = 0.0;
        for (std::size_t m = 0; m < M; ++m) yPy += P1[m] * (source[m] - mu_y).norm2();
        for (std::size_t n = 0; n < N; ++n) xPx += Pt1[n] * (target[n] - mu_x).norm2();
        const double trAR = (A.transpose() * Re).trace();
        const double new_s = trAR / yPy;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) R.m[i][j] = Re(i, j);
        s = new_s;
        t = mu_x - R * mu_y * s;

        const double new_sigma2 = std::max(0.0, (xPx - s * trAR) / (3.0 * Np));
        const double delta = std::abs(new_sigma2 - sigma2);
        sigma2 = new_sigma2;
        if (sigma2 < 1e-12) {
            res.sigma_collapsed = true;
            sigma2 = 1e-12;
            break;
        }
        if (delta < tol) break;
    }

    res.transform = AlignmentTransform{s, R, t};
    res.final_sigma2 = sigma2;
    return res;
}

struct EvalConfig {
    bool align = false;
    std::size_t grid_resolution = 64;
    std::size_t surface_samples = 10000;  // per side, for P2S and Chamfer
    double cpd_outlier_weight = 0.0;
    uint64_t seed = 7;
};

struct ReconMetrics {
    double iou = 0.0, p2s = 0.0, chamfer = 0.0, l2_corr = 0.0;
    std::vector<double> iou_per_frame, p2s_per_frame, chamfer_per_frame, l2_per_frame;
    AlignmentTransform alignment;
    std::size_t grid_resolution = 64;
};

// Full sequence evaluation: optional CPD alignment estimated on frame 1 and
// applied to all predicted frames, then per-frame IoU / P2S / Chamfer and the
// tracking metric.
inline ReconMetrics evaluate_sequence(const MeshSequence& pred_in, const MeshSequence& gt, const EvalConfig& cfg) {
    MESH4D_CHECK(pred_in.frame_count() == gt.frame_count(), "evaluate_sequence: frame count mismatch");
    ReconMetrics out;
    out.grid_resolution = cfg.grid_resolution;

    MeshSequence pred = pred_in;
    if (cfg.align) {
        const CpdResult cpd = cpd_rigid(pred.frames[0], gt.frames[0], cfg.cpd_outlier_weight);
        out.alignment = cpd.transform;
        for (auto& frame : pred.frames)
            for (Vec3& v : frame) v = cpd.transform.apply(v);
    }

    const std::size_t T = gt.frame_count();
    for (std::size_t t = 0; t < T; ++t) {
        const TriMesh pm = pred.frame_mesh(t);
        const TriMesh gm = gt.frame_mesh(t);
        out.iou_per_frame.push_back(volumetric_iou(pm, gm, cfg.grid_resolution));
        const SurfaceSampleSet gt_samples = sample_surface(gm, cfg.surface_samples, cfg.seed + 31 * t);
        out.p2s_per_frame.push_back(p2s(gt_samples.positions[0], pm));
        const SurfaceSampleSet pred_samples = sample_surface(pm, cfg.surface_samples, cfg.seed + 31 * t + 17);
        out.chamfer_per_frame.push_back(chamfer(gt_samples.positions[0], pred_samples.positions[0]));
    }
    const L2CorrResult l2 = l2_corr(pred, gt);
    out.l2_per_frame = l2.per_frame;
    out.l2_corr = l2.aggregate;

    auto mean = [](const std::vector<double>& v) {
        double acc = 0.0;
        for (double x : v) acc += x;
        return acc / static_cast<double>(v.size());
    };
    out.iou = mean(out.iou_per_frame);
    out.p2s = mean(out.p2s_per_frame);
    out.chamfer = mean(out.chamfer_per_frame);
    return out;
}

}  // namespace mesh4d
