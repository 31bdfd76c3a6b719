#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "mvdiff/common.hpp"
#include "mvdiff/tensor.hpp"

namespace mvdiff {

struct Vec3 {
    double x = 0, y = 0, z = 0;
};

struct Triangle {
    int v0 = 0, v1 = 0, v2 = 0;
    std::array<double, 3> albedo{0.5, 0.5, 0.5};
};

struct Mesh {
    std::vector<Vec3> verts;
    std::vector<Triangle> tris;

    void add_tri(int a, int b, int c, const std::array<double, 3>& albedo) {
        tris.push_back({a, b, c, albedo});
    }

    double surface_area() const {
        double area = 0;
        for (const auto& t : tris) {
            const Vec3 &a = verts[t.v0], &b = verts[t.v1], &c = verts[t.v2];
            const double e1x = b.x - a.x, e1y = b.y - a.y, e1z = b.z - a.z;
            const double e2x = c.x - a.x, e2y = c.y - a.y, e2z = c.z - a.z;
            const double nx = e1y * e2z - e1z * e2y;
            const double ny = e1z * e2x - e1x * e2z;
            const double nz = e1x * e2y - e1y * e2x;
            area += 0.5 * std::sqrt(nx * nx + ny * ny + nz * nz);
        }
        return area;
    }
};

// Orthographic z-buffered rasterizer with headlight shading. The camera
// orbits the origin: azimuth about the vertical (+y) axis, then elevation.
// Brightness = albedo * |n . view|; background is the data-range maximum
// (+1, white). Triangles are double-sided.
inline Tensor<float> rasterize(const Mesh& mesh, double azimuth, double elevation, int resolution,
                               int channels, double extent = 0.9) {
    require(resolution >= 1 && (channels == 1 || channels == 3), "rasterize: bad size/channels");
    const int res = resolution;
    Tensor<float> img({channels, res, res});
    std::fill(img.vec().begin(), img.vec().end(), 1.0f);  // white background
    std::vector<double> zbuf(static_cast<size_t>(res) * res,
                             -std::numeric_limits<double>::infinity());

    const double ca = std::cos(azimuth), sa = std::sin(azimuth);
    const double ce = std::cos(elevation), se = std::sin(elevation);
    // world -> view: Ry(-azimuth) then Rx(elevation); +z is toward the camera
    std::vector<Vec3> v(mesh.verts.size());
    for (size_t i = 0; i < mesh.verts.size(); ++i) {
        const Vec3& p = mesh.verts[i];
        const double x1 = ca * p.x - sa * p.z;
        const double z1 = sa * p.x + ca * p.z;
        v[i] = {x1, ce * p.y - se * z1, se * p.y + ce * z1};
    }

    const double step = 2.0 * extent / res;
    const auto px = [&](int j) { return extent * ((2.0 * j + 1.0) / res - 1.0); };
    const auto py = [&](int i) { return -extent * ((2.0 * i + 1.0) / res - 1.0); };

    for (const auto& t : mesh.tris) {
        const Vec3 &a = v[static_cast<size_t>(t.v0)], &b = v[static_cast<size_t>(t.v1)],
                   &c = v[static_cast<size_t>(t.v2)];
        // headlight intensity from the view-space normal
        const double e1x = b.x - a.x, e1y = b.y - a.y, e1z = b.z - a.z;
        const double e2x = c.x - a.x, e2y = c.y - a.y, e2z = c.z - a.z;
        const double nx = e1y * e2z - e1z * e2y;
        const double ny = e1z * e2x - e1x * e2z;
        const double nz = e1x * e2y - e1y * e2x;
        const double nlen = std::sqrt(nx * nx + ny * ny + nz * nz);
        if (nlen == 0) continue;
        const double shade = std::abs(nz) / nlen;

        const double area = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
        if (area == 0) continue;  // edge-on
        const double minx = std::min({a.x, b.x, c.x}), maxx = std::max({a.x, b.x, c.x});
        const double miny = std::min({a.y, b.y, c.y}), maxy = std::max({a.y, b.y, c.y});
        int j0 = static_cast<int>(std::floor((minx + extent) / step));
        int j1 = static_cast<int>(std::ceil((maxx + extent) / step));
        int i0 = static_cast<int>(std::floor((extent - maxy) / step));
        int i1 = static_cast<int>(std::ceil((extent - miny) / step));
        j0 = std::max(j0, 0);
        i0 = std::max(i0, 0);
        j1 = std::min(j1, res - 1);
        i1 = std::min(i1, res - 1);

        for (int i = i0; i <= i1; ++i) {
            for (int j = j0; j <= j1; ++j) {
                const double x = px(j), y = py(i);
                const double w0 = (c.x - b.x) * (y - b.y) - (c.y - b.y) * (x - b.x);
                const double w1 = (a.x - c.x) * (y - c.y) - (a.y - c.y) * (x - c.x);
                const double w2 = (b.x - a.x) * (y - a.y) - (b.y - a.y) * (x - a.x);
                const bool inside = area > 0 ? (w0 >= 0 && w1 >= 0 && w2 >= 0)
                                             : (w0 <= 0 && w1 <= 0 && w2 <= 0);
                if (!inside) continue;
                const double depth = (w0 * a.z + w1 * b.z + w2 * c.z) / area;
                double& zref = zbuf[static_cast<size_t>(i) * res + j];
                if (depth <= zref) continue;
                zref = depth;
                for (int cc = 0; cc < channels; ++cc) {
                    const double value = t.albedo[static_cast<size_t>(cc)] * shade;
                    img.at3(cc, i, j) = static_cast<float>(value * 2.0 - 1.0);
                }
            }
        }
    }
    return img;
}

// ---- primitive solids; all centered at the origin, +y up ----

using FaceAlbedos = std::vector<std::array<double, 3>>;

inline Mesh make_box(double hx, double hy, double hz, const FaceAlbedos& faces) {
    require(faces.size() == 6, "make_box: need 6 face albedos (+x,-x,+y,-y,+z,-z)");
    Mesh m;
    m.verts = {{-hx, -hy, -hz}, {hx, -hy, -hz}, {hx, hy, -hz}, {-hx, hy, -hz},
               {-hx, -hy, hz},  {hx, -hy, hz},  {hx, hy, hz},  {-hx, hy, hz}};
    const auto quad = [&](int a, int b, int c, int d, const std::array<double, 3>& al) {
        m.add_tri(a, b, c, al);
        m.add_tri(a, c, d, al);
    };
    quad(1, 2, 6, 5, faces[0]);  // +x
    quad(0, 4, 7, 3, faces[1]);  // -x
    quad(3, 7, 6, 2, faces[2]);  // +y
    quad(0, 1, 5, 4, faces[3]);  // -y
    quad(4, 5, 6, 7, faces[4]);  // +z
    quad(0, 3, 2, 1, faces[5]);  // -z
    return m;
}

inline Mesh make_pyramid(double half_base, double height, const FaceAlbedos& faces) {
    require(faces.size() == 5, "make_pyramid: need 5 face albedos (4 sides + base)");
    Mesh m;
    const double y0 = -height / 2, y1 = height / 2;
    m.verts = {{-half_base, y0, -half_base},
               {half_base, y0, -half_base},
               {half_base, y0, half_base},
               {-half_base, y0, half_base},
               {0, y1, 0}};
    m.add_tri(0, 1, 4, faces[0]);
    m.add_tri(1, 2, 4, faces[1]);
    m.add_tri(2, 3, 4, faces[2]);
    m.add_tri(3, 0, 4, faces[3]);
    m.add_tri(0, 2, 1, faces[4]);
    m.add_tri(0, 3, 2, faces[4]);
    return m;
}

// Triangular cross-section in the xz-plane, extruded along y.
inline Mesh make_prism(double r, double height, const FaceAlbedos& faces) {
    require(faces.size() == 5, "make_prism: need 5 face albedos (3 sides + 2 caps)");
    Mesh m;
    const double y0 = -height / 2, y1 = height / 2;
    for (int k = 0; k < 3; ++k) {
        const double ang = 2.0 * 3.14159265358979323846 * k / 3.0;
        m.verts.push_back({r * std::sin(ang), y0, r * std::cos(ang)});
    }
    for (int k = 0; k < 3; ++k) {
        const double ang = 2.0 * 3.14159265358979323846 * k / 3.0;
        m.verts.push_back({r * std::sin(ang), y1, r * std::cos(ang)});
    }
    for (int k = 0; k < 3; ++k) {
        const int kn = (k + 1) % 3;
        m.add_tri(k, kn, 3 + kn, faces[static_cast<size_t>(k)]);
        m.add_tri(k, 3 + kn, 3 + k, faces[static_cast<size_t>(k)]);
    }
    m.add_tri(0, 1, 2, faces[3]);
    m.add_tri(3, 5, 4, faces[4]);
    return m;
}

// Two overlapping boxes forming an L cross-section (no mirror symmetry).
inline Mesh make_l_solid(double hx, double hy, double hz, double cut_x, double cut_y,
                         const FaceAlbedos& faces) {
    require(faces.size() == 12, "make_l_solid: need 12 face albedos");
    FaceAlbedos f1(faces.begin(), faces.begin() + 6);
    FaceAlbedos f2(faces.begin() + 6, faces.end());
    Mesh m = make_box(hx, hy * (1 - cut_y), hz, f1);
    Mesh arm = make_box(hx * cut_x, hy, hz, f2);
    const int base = static_cast<int>(m.verts.size());
    const double shift_x = -hx * (1 - cut_x);
    for (auto p : arm.verts) m.verts.push_back({p.x + shift_x, p.y, p.z});
    for (auto t : arm.tris) m.add_tri(base + t.v0, base + t.v1, base + t.v2, t.albedo);
    return m;
}

// n-gon prism approximating a cylinder, axis vertical.
inline Mesh make_ngon_prism(int n, double radius, double height, const FaceAlbedos& faces) {
    require(n >= 3, "make_ngon_prism: need n >= 3");
    require(faces.size() == 2, "make_ngon_prism: need 2 albedos (side, caps)");
    Mesh m;
    const double y0 = -height / 2, y1 = height / 2;
    for (int k = 0; k < n; ++k) {
        const double ang = 2.0 * 3.14159265358979323846 * k / n;
        m.verts.push_back({radius * std::sin(ang), y0, radius * std::cos(ang)});
    }
    for (int k = 0; k < n; ++k) {
        const double ang = 2.0 * 3.14159265358979323846 * k / n;
        m.verts.push_back({radius * std::sin(ang), y1, radius * std::cos(ang)});
    }
    m.verts.push_back({0, y0, 0});
    m.verts.push_back({0, y1, 0});
    for (int k = 0; k < n; ++k) {
        const int kn = (k + 1) % n;
        m.add_tri(k, kn, n + kn, faces[0]);
        m.add_tri(k, n + kn, n + k, faces[0]);
        m.add_tri(kn, k, 2 * n, faces[1]);      // bottom cap fan
        m.add_tri(n + k, n + kn, 2 * n + 1, faces[1]);  // top cap fan
    }
    return m;
}

}  // namespace mvdiff
