#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "anatembed/common.hpp"
#include "anatembed/rng.hpp"

namespace anatembed::phantom {

// Fraction of the image kept as border when the canonical unit cube is mapped
// onto pixels: px = (margin + u * (1 - 2*margin)) * (size - 1).
constexpr double kMargin = 0.03;

// Cap on the operator norm bound of the deformation gradient. Keeps the
// canonical-to-pixel warp bijective (det(I + grad d) > 0) and makes the
// fixed-point inversion a contraction.
constexpr double kGradCap = 0.6;

// Max displacement, in canonical units, at variation = 1.
constexpr double kDispCap = 0.15;

enum class ShapeKind { ellipsoid, tube, shell };

struct Primitive {
  std::string name;
  ShapeKind kind;
  VecD center;  // canonical coordinates, axis order (y,x) or (z,y,x)
  VecD radii;
  double intensity;
};

struct LandmarkDef {
  std::string name;
  VecD point;
};

struct CanonicalLayout {
  std::vector<Primitive> primitives;
  std::vector<LandmarkDef> landmark_defs;

  void validate(int dim) const {
    require(!primitives.empty(), "layout: needs at least one primitive");
    require(!landmark_defs.empty(), "layout: needs at least one landmark");
    auto check_vec = [&](const VecD& v, const std::string& what) {
      require((int)v.size() == dim, "layout: ", what, " needs ", dim, " entries");
      for (double x : v)
        require(x >= 0.0 && x <= 1.0, "layout: ", what, " outside [0,1]");
    };
    for (const auto& p : primitives) {
      check_vec(p.center, p.name + " center");
      require((int)p.radii.size() == dim, "layout: ", p.name, " radii rank");
      for (double r : p.radii)
        require(r > 0.0 && r <= 0.5, "layout: ", p.name, " radii must be in (0, 0.5]");
      require(p.intensity >= 0.0 && p.intensity <= 1.0, "layout: ", p.name,
              " intensity must be in [0,1]");
    }
    std::vector<std::string> names;
    for (const auto& l : landmark_defs) {
      check_vec(l.point, l.name + " point");
      names.push_back(l.name);
    }
    std::sort(names.begin(), names.end());
    require(std::adjacent_find(names.begin(), names.end()) == names.end(),
            "layout: duplicate landmark names");
  }

  uint64_t hash() const {
    uint64_t h = 14695981039346656037ull;
    auto mix = [&h](const std::string& s) {
      for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
      }
      h ^= '\x1f';
      h *= 1099511628211ull;
    };
    auto mixd = [&](double v) { mix(std::to_string(v)); };
    for (const auto& p : primitives) {
      mix(p.name);
      mix(std::to_string((int)p.kind));
      for (double v : p.center) mixd(v);
      for (double v : p.radii) mixd(v);
      mixd(p.intensity);
    }
    for (const auto& l : landmark_defs) {
      mix(l.name);
      for (double v : l.point) mixd(v);
    }
    return h;
  }

  // Torso-like arrangement; deliberately left-right asymmetric (heart and
  // stomach off-center, unequal lungs) with a mirrored hip pair.
  static CanonicalLayout default_layout(int dim) {
    CanonicalLayout lo;
    if (dim == 2) {
      lo.primitives = {
          {"torso", ShapeKind::ellipsoid, {0.52, 0.50}, {0.40, 0.36}, 0.30},
          {"lung_left", ShapeKind::ellipsoid, {0.38, 0.35}, {0.15, 0.11}, 0.12},
          {"heart", ShapeKind::ellipsoid, {0.45, 0.62}, {0.09, 0.11}, 0.62},
          {"stomach", ShapeKind::shell, {0.70, 0.40}, {0.075, 0.085}, 0.55},
          {"spine", ShapeKind::tube, {0.52, 0.50}, {0.30, 0.030}, 0.88},
          {"vessel", ShapeKind::tube, {0.50, 0.66}, {0.22, 0.016}, 0.80},
          {"hip_left", ShapeKind::ellipsoid, {0.80, 0.30}, {0.040, 0.045}, 0.72},
          {"hip_right", ShapeKind::ellipsoid, {0.80, 0.70}, {0.040, 0.045}, 0.72},
      };
      lo.landmark_defs = {
          {"heart_center", {0.45, 0.62}},   {"lung_center", {0.38, 0.35}},
          {"spine_top", {0.24, 0.50}},      {"spine_bottom", {0.80, 0.50}},
          {"stomach_center", {0.70, 0.40}}, {"vessel_top", {0.30, 0.66}},
          {"hip_left", {0.80, 0.30}},       {"hip_right", {0.80, 0.70}},
      };
    } else {
      lo.primitives = {
          {"torso", ShapeKind::ellipsoid, {0.50, 0.52, 0.50}, {0.42, 0.40, 0.36}, 0.30},
          {"lung_left", ShapeKind::ellipsoid, {0.42, 0.38, 0.33}, {0.22, 0.13, 0.10}, 0.12},
          {"lung_right", ShapeKind::ellipsoid, {0.42, 0.38, 0.67}, {0.26, 0.16, 0.13}, 0.12},
          {"heart", ShapeKind::ellipsoid, {0.45, 0.48, 0.60}, {0.12, 0.10, 0.11}, 0.62},
          {"stomach", ShapeKind::shell, {0.62, 0.55, 0.40}, {0.090, 0.075, 0.085}, 0.55},
          {"spine", ShapeKind::tube, {0.50, 0.60, 0.50}, {0.35, 0.035, 0.035}, 0.88},
          {"vessel", ShapeKind::tube, {0.50, 0.45, 0.56}, {0.30, 0.014, 0.014}, 0.80},
          {"kidney_left", ShapeKind::ellipsoid, {0.60, 0.58, 0.36}, {0.070, 0.050, 0.040}, 0.48},
          {"kidney_right", ShapeKind::ellipsoid, {0.60, 0.58, 0.64}, {0.070, 0.050, 0.040}, 0.48},
          {"hip_left", ShapeKind::ellipsoid, {0.82, 0.62, 0.32}, {0.050, 0.045, 0.050}, 0.72},
          {"hip_right", ShapeKind::ellipsoid, {0.82, 0.62, 0.68}, {0.050, 0.045, 0.050}, 0.72},
      };
      lo.landmark_defs = {
          {"heart_center", {0.45, 0.48, 0.60}},
          {"lung_left_center", {0.42, 0.38, 0.33}},
          {"lung_right_center", {0.42, 0.38, 0.67}},
          {"spine_top", {0.18, 0.60, 0.50}},
          {"spine_mid", {0.50, 0.60, 0.50}},
          {"spine_bottom", {0.82, 0.60, 0.50}},
          {"vessel_top", {0.22, 0.45, 0.56}},
          {"stomach_center", {0.62, 0.55, 0.40}},
          {"kidney_left", {0.60, 0.58, 0.36}},
          {"kidney_right", {0.60, 0.58, 0.64}},
          {"hip_left", {0.82, 0.62, 0.32}},
          {"hip_right", {0.82, 0.62, 0.68}},
      };
    }
    lo.validate(dim);
    return lo;
  }
};

struct Landmark {
  std::string name;
  VecD position_px;
};

namespace detail {

struct Mode {
  VecD freq;
  double phase = 0.0;
  double amp = 0.0;
};

// Canonical-to-pixel map: px = (margin + (u + d(u)) * (1 - 2*margin)) * (size-1)
// where d is a per-axis sum of low-frequency sinusoids. Amplitudes are
// rescaled so that |d| <= kDispCap * variation per axis and the analytic
// bound on ||grad d|| stays below kGradCap, which guarantees invertibility.
struct Warp {
  int dim = 0;
  VecD scale;   // px per canonical unit, per axis
  VecD shift;   // px offset, per axis
  std::vector<std::vector<Mode>> modes;  // [axis][mode]

  static Warp build(uint64_t seed, int dim, const Shape& size, double variation) {
    Warp w;
    w.dim = dim;
    for (int a = 0; a < dim; ++a) {
      w.scale.push_back((1.0 - 2.0 * kMargin) * (double)(size[(size_t)a] - 1));
      w.shift.push_back(kMargin * (double)(size[(size_t)a] - 1));
    }
    w.modes.assign((size_t)dim, {});
    if (variation <= 0.0) return w;
    rng::Stream rs(seed, rng::stream_id(0x9e0, 1));
    const int n_modes = 4;
    for (int a = 0; a < dim; ++a)
      for (int k = 0; k < n_modes; ++k) {
        Mode m;
        for (int b = 0; b < dim; ++b) m.freq.push_back(rs.uniform(0.4, 1.0));
        m.phase = rs.uniform(0.0, 2.0 * std::numbers::pi);
        m.amp = rs.uniform(0.4, 1.0);
        w.modes[(size_t)a].push_back(m);
      }
    // Per-axis displacement cap.
    for (int a = 0; a < dim; ++a) {
      double s = 0.0;
      for (const Mode& m : w.modes[(size_t)a]) s += std::abs(m.amp);
      double target = kDispCap * variation;
      for (Mode& m : w.modes[(size_t)a]) m.amp *= target / s;
    }
    // Global scale-down when the gradient bound exceeds the cap.
    double fro2 = 0.0;
    for (int a = 0; a < dim; ++a)
      for (int b = 0; b < dim; ++b) {
        double g = 0.0;
        for (const Mode& m : w.modes[(size_t)a])
          g += std::abs(m.amp) * 2.0 * std::numbers::pi * std::abs(m.freq[(size_t)b]);
        fro2 += g * g;
      }
    double bound = std::sqrt(fro2);
    if (bound > kGradCap)
      for (auto& axis : w.modes)
        for (Mode& m : axis) m.amp *= kGradCap / bound;
    return w;
  }

  VecD disp(const VecD& u) const {
    VecD d((size_t)dim, 0.0);
    for (int a = 0; a < dim; ++a)
      for (const Mode& m : modes[(size_t)a]) {
        double t = m.phase;
        for (int b = 0; b < dim; ++b)
          t += 2.0 * std::numbers::pi * m.freq[(size_t)b] * u[(size_t)b];
        d[(size_t)a] += m.amp * std::sin(t);
      }
    return d;
  }

  VecD to_px(const VecD& u) const {
    VecD d = disp(u);
    VecD px((size_t)dim);
    for (int a = 0; a < dim; ++a)
      px[(size_t)a] = shift[(size_t)a] + scale[(size_t)a] * (u[(size_t)a] + d[(size_t)a]);
    return px;
  }

  // Inverse by fixed-point iteration; the contraction factor is bounded by
  // kGradCap so ~70 iterations reach ~1e-13 canonical units.
  VecD to_canon(const VecD& px) const {
    VecD v((size_t)dim);
    for (int a = 0; a < dim; ++a)
      v[(size_t)a] = (px[(size_t)a] - shift[(size_t)a]) / scale[(size_t)a];
    VecD u = v;
    for (int it = 0; it < 90; ++it) {
      VecD d = disp(u);
      double delta = 0.0;
      for (int a = 0; a < dim; ++a) {
        double nu = v[(size_t)a] - d[(size_t)a];
        delta = std::max(delta, std::abs(nu - u[(size_t)a]));
        u[(size_t)a] = nu;
      }
      if (delta < 1e-13) break;
    }
    return u;
  }
};

inline double rho(const Primitive& pr, const VecD& u) {
  int dim = (int)u.size();
  switch (pr.kind) {
    case ShapeKind::ellipsoid: {
      double s = 0.0;
      for (int a = 0; a < dim; ++a) {
        double t = (u[(size_t)a] - pr.center[(size_t)a]) / pr.radii[(size_t)a];
        s += t * t;
      }
      return std::sqrt(s);
    }
    case ShapeKind::tube: {
      int ax = 0;
      for (int a = 1; a < dim; ++a)
        if (pr.radii[(size_t)a] > pr.radii[(size_t)ax]) ax = a;
      double radial = 0.0;
      for (int a = 0; a < dim; ++a) {
        if (a == ax) continue;
        double t = (u[(size_t)a] - pr.center[(size_t)a]) / pr.radii[(size_t)a];
        radial += t * t;
      }
      double axial = std::abs(u[(size_t)ax] - pr.center[(size_t)ax]) / pr.radii[(size_t)ax];
      return std::max(std::sqrt(radial), axial);
    }
    case ShapeKind::shell: {
      double s = 0.0;
      for (int a = 0; a < dim; ++a) {
        double t = (u[(size_t)a] - pr.center[(size_t)a]) / pr.radii[(size_t)a];
        s += t * t;
      }
      return std::abs(std::sqrt(s) - 0.85) / 0.15;
    }
  }
  return 1e30;
}

}  // namespace detail

struct Phantom {
  int dim = 0;
  Shape size;
  VecD spacing;  // mm per pixel, per axis
  double variation = 0.0;
  uint64_t seed = 0;
  uint64_t layout_hash = 0;
  std::vector<float> image;        // (size...)
  std::vector<float> coord_field;  // (dim, size...): canonical coords per pixel
  std::vector<uint8_t> body_mask;  // (size...)
  std::vector<Landmark> landmarks;

  int64_t npx() const { return numel(size); }

  bool in_bounds(const VecD& p) const {
    for (int a = 0; a < dim; ++a)
      if (p[(size_t)a] < 0.0 || p[(size_t)a] > (double)(size[(size_t)a] - 1))
        return false;
    return true;
  }

  // Multilinear interpolation of the canonical coordinate field at a
  // continuous pixel position (clamped to the valid domain).
  VecD coord_interp(const VecD& p) const {
    Shape strides = row_strides(size);
    std::vector<int64_t> base((size_t)dim);
    VecD frac((size_t)dim);
    for (int a = 0; a < dim; ++a) {
      double x = std::clamp(p[(size_t)a], 0.0, (double)(size[(size_t)a] - 1));
      double fl = std::floor(x);
      int64_t b = std::min((int64_t)fl, size[(size_t)a] - 2);
      if (size[(size_t)a] == 1) b = 0;
      base[(size_t)a] = std::max<int64_t>(b, 0);
      frac[(size_t)a] = x - (double)base[(size_t)a];
    }
    VecD out((size_t)dim, 0.0);
    int corners = 1 << dim;
    for (int c = 0; c < corners; ++c) {
      double wgt = 1.0;
      int64_t off = 0;
      for (int a = 0; a < dim; ++a) {
        int bit = (c >> a) & 1;
        int64_t ix = std::min(base[(size_t)a] + bit, size[(size_t)a] - 1);
        wgt *= bit ? frac[(size_t)a] : 1.0 - frac[(size_t)a];
        off += ix * strides[(size_t)a];
      }
      for (int a = 0; a < dim; ++a)
        out[(size_t)a] += wgt * (double)coord_field[(size_t)(a * npx() + off)];
    }
    return out;
  }

  double image_interp(const VecD& p) const {
    Shape strides = row_strides(size);
    std::vector<int64_t> base((size_t)dim);
    VecD frac((size_t)dim);
    for (int a = 0; a < dim; ++a) {
      double x = std::clamp(p[(size_t)a], 0.0, (double)(size[(size_t)a] - 1));
      int64_t b = std::min((int64_t)std::floor(x),
                           std::max<int64_t>(size[(size_t)a] - 2, 0));
      base[(size_t)a] = b;
      frac[(size_t)a] = x - (double)b;
    }
    double out = 0.0;
    int corners = 1 << dim;
    for (int c = 0; c < corners; ++c) {
      double wgt = 1.0;
      int64_t off = 0;
      for (int a = 0; a < dim; ++a) {
        int bit = (c >> a) & 1;
        int64_t ix = std::min(base[(size_t)a] + bit, size[(size_t)a] - 1);
        wgt *= bit ? frac[(size_t)a] : 1.0 - frac[(size_t)a];
        off += ix * strides[(size_t)a];
      }
      out += wgt * (double)image[(size_t)off];
    }
    return out;
  }

  bool body_at_nearest(const VecD& p) const {
    Shape strides = row_strides(size);
    int64_t off = 0;
    for (int a = 0; a < dim; ++a) {
      int64_t ix = (int64_t)std::llround(p[(size_t)a]);
      if (ix < 0 || ix >= size[(size_t)a]) return false;
      off += ix * strides[(size_t)a];
    }
    return body_mask[(size_t)off] != 0;
  }
};

inline Phantom generate(uint64_t seed, int dim, const Shape& size,
                        double variation, const CanonicalLayout& layout) {
  require(dim == 2 || dim == 3, "phantom: dim must be 2 or 3, got ", dim);
  require((int)size.size() == dim, "phantom: size needs ", dim, " entries");
  for (int64_t e : size)
    require(e >= 16, "phantom: every axis must be >= 16 px, got ", shape_str(size));
  require(variation >= 0.0 && variation <= 1.0,
          "phantom: variation must lie in [0, 1], got ", variation);
  layout.validate(dim);

  Phantom ph;
  ph.dim = dim;
  ph.size = size;
  ph.spacing.assign((size_t)dim, 1.0);
  ph.variation = variation;
  ph.seed = seed;
  ph.layout_hash = layout.hash();

  detail::Warp warp = detail::Warp::build(seed, dim, size, variation);

  int64_t n = ph.npx();
  ph.image.assign((size_t)n, 0.0f);
  ph.coord_field.assign((size_t)(dim * n), 0.0f);
  ph.body_mask.assign((size_t)n, 0);

  // Edge softness per primitive: about one pixel, expressed in units of the
  // normalized boundary distance.
  double min_scale = *std::min_element(warp.scale.begin(), warp.scale.end());
  std::vector<double> edge_w(layout.primitives.size());
  for (size_t i = 0; i < layout.primitives.size(); ++i) {
    const Primitive& pr = layout.primitives[i];
    double r_min = *std::min_element(pr.radii.begin(), pr.radii.end());
    if (pr.kind == ShapeKind::shell) r_min *= 0.15;
    edge_w[i] = std::clamp(1.0 / (r_min * min_scale), 0.02, 0.35);
  }

  // Bias field: one low-frequency multiplicative mode across the image.
  rng::Stream bias_rs(seed, rng::stream_id(0x9e0, 2));
  VecD bias_freq((size_t)dim);
  for (int a = 0; a < dim; ++a) bias_freq[(size_t)a] = bias_rs.uniform(0.5, 1.5);
  double bias_phase = bias_rs.uniform(0.0, 2.0 * std::numbers::pi);
  double bias_amp = 0.12 * variation;
  double noise_std = 0.02 + 0.03 * variation;
  uint64_t noise_stream = rng::stream_id(0x9e0, 3);

  Shape strides = row_strides(size);
  parallel_for(n, 4096, [&](int64_t lo, int64_t hi) {
    VecD px((size_t)dim), u((size_t)dim);
    for (int64_t f = lo; f < hi; ++f) {
      int64_t rem = f;
      for (int a = 0; a < dim; ++a) {
        px[(size_t)a] = (double)(rem / strides[(size_t)a]);
        rem %= strides[(size_t)a];
      }
      u = warp.to_canon(px);
      for (int a = 0; a < dim; ++a)
        ph.coord_field[(size_t)(a * n + f)] = (float)u[(size_t)a];

      double val = 0.0;
      bool body = false;
      for (size_t i = 0; i < layout.primitives.size(); ++i) {
        const Primitive& pr = layout.primitives[i];
        double r = detail::rho(pr, u);
        if (r <= 1.0) body = true;
        // The soft edge ramps down to exactly zero at the boundary, so the
        // painted support never leaks outside the body mask.
        double alpha = std::clamp((1.0 - r) / edge_w[i], 0.0, 1.0);
        if (alpha > 0.0) val = val * (1.0 - alpha) + pr.intensity * alpha;
      }
      ph.body_mask[(size_t)f] = body ? 1 : 0;
      if (body) {
        double t = bias_phase;
        for (int a = 0; a < dim; ++a)
          t += 2.0 * std::numbers::pi * bias_freq[(size_t)a] * px[(size_t)a] /
               (double)size[(size_t)a];
        val *= 1.0 + bias_amp * std::sin(t);
        val += noise_std * rng::normal_at(seed, noise_stream, (uint64_t)f);
        val = std::clamp(val, 0.0, 1.0);
      }
      ph.image[(size_t)f] = (float)val;
    }
  });

  for (const LandmarkDef& def : layout.landmark_defs) {
    VecD pos = warp.to_px(def.point);
    require(ph.in_bounds(pos), "phantom: landmark ", def.name,
            " fell outside the image; reduce variation or enlarge the image");
    ph.landmarks.push_back({def.name, pos});
  }
  return ph;
}

inline Phantom generate(uint64_t seed, int dim, const Shape& size, double variation) {
  return generate(seed, dim, size, variation, CanonicalLayout::default_layout(dim));
}

}  // namespace anatembed::phantom
