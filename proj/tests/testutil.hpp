#pragma once

#include <map>
#include <utility>
#include <vector>

#include "mesh4d/mesh.hpp"

namespace testutil {

using mesh4d::Face;
using mesh4d::TriMesh;
using mesh4d::Vec3;

// Unit cube [0,1]^3, triangulated so the three faces meeting at (1,1,1) have
// their diagonals through that corner (and likewise (0,0,0)).
inline TriMesh unit_cube() {
    TriMesh m;
    m.vertices = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0}, {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
    m.faces = {
        {0, 2, 1}, {0, 3, 2},  // z = 0
        {4, 5, 6}, {4, 6, 7},  // z = 1
        {0, 7, 3}, {0, 4, 7},  // x = 0
        {1, 2, 6}, {1, 6, 5},  // x = 1
        {0, 1, 5}, {0, 5, 4},  // y = 0
        {3, 6, 2}, {3, 7, 6},  // y = 1
    };
    return m;
}

inline TriMesh make_box(const Vec3& lo, const Vec3& hi) {
    TriMesh m = unit_cube();
    for (Vec3& v : m.vertices)
        v = {lo.x + v.x * (hi.x - lo.x), lo.y + v.y * (hi.y - lo.y), lo.z + v.z * (hi.z - lo.z)};
    return m;
}

inline TriMesh translated(TriMesh m, const Vec3& d) {
    for (Vec3& v : m.vertices) v += d;
    return m;
}

// Unit icosphere by midpoint subdivision of an icosahedron.
inline TriMesh icosphere(int subdivisions) {
    const double t = (1.0 + std::sqrt(5.0)) / 2.0;
    TriMesh m;
    m.vertices = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                  {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
    for (Vec3& v : m.vertices) v = v.normalized();
    m.faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9},  {5, 11, 4},
               {11, 10, 2}, {10, 7, 6}, {7, 1, 8},   {3, 9, 4},  {3, 4, 2},   {3, 2, 6},  {3, 6, 8},
               {3, 8, 9},   {4, 9, 5},  {2, 4, 11},  {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
    for (int s = 0; s < subdivisions; ++s) {
        std::map<std::pair<uint32_t, uint32_t>, uint32_t> midpoint;
        auto mid = [&](uint32_t a, uint32_t b) {
            const auto key = std::make_pair(std::min(a, b), std::max(a, b));
            auto it = midpoint.find(key);
            if (it != midpoint.end()) return it->second;
            const Vec3 p = ((m.vertices[a] + m.vertices[b]) * 0.5).normalized();
            m.vertices.push_back(p);
            const uint32_t idx = static_cast<uint32_t>(m.vertices.size() - 1);
            midpoint.emplace(key, idx);
            return idx;
        };
        std::vector<Face> next;
        for (const Face& f : m.faces) {
            const uint32_t ab = mid(f[0], f[1]), bc = mid(f[1], f[2]), ca = mid(f[2], f[0]);
            next.push_back({f[0], ab, ca});
            next.push_back({f[1], bc, ab});
            next.push_back({f[2], ca, bc});
            next.push_back({ab, bc, ca});
        }
        m.faces = std::move(next);
    }
    return m;
}

inline TriMesh single_triangle() {
    TriMesh m;
    m.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
    m.faces = {{0, 1, 2}};
    return m;
}

}  // namespace testutil
