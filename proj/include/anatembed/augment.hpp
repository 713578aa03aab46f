#pragma once

#include <cmath>
#include <numbers>
#include <optional>
#include <vector>

#include "anatembed/config.hpp"
#include "anatembed/phantom.hpp"
#include "anatembed/rng.hpp"

namespace anatembed::augment {

// Smooth displacement field over the crop box: per-axis displacements of a
// multilinear control grid, in pixels. Displacements are bounded by a
// fraction of the smallest crop extent so the map stays invertible.
struct ElasticField {
  int dim = 0;
  int64_t grid = 0;  // cells per axis; grid+1 control nodes
  Shape crop;
  std::vector<double> node_disp;  // ((grid+1)^dim, dim) row major

  VecD at(const VecD& u) const {
    int64_t nodes = grid + 1;
    std::vector<int64_t> base((size_t)dim);
    VecD frac((size_t)dim);
    for (int a = 0; a < dim; ++a) {
      double span = (double)(crop[(size_t)a] - 1);
      double x = span > 0 ? std::clamp(u[(size_t)a], 0.0, span) / span * (double)grid
                          : 0.0;
      int64_t b = std::min((int64_t)std::floor(x), grid - 1);
      base[(size_t)a] = std::max<int64_t>(b, 0);
      frac[(size_t)a] = x - (double)base[(size_t)a];
    }
    VecD out((size_t)dim, 0.0);
    for (int c = 0; c < (1 << dim); ++c) {
      double w = 1.0;
      int64_t off = 0;
      for (int a = 0; a < dim; ++a) {
        int bit = (c >> a) & 1;
        w *= bit ? frac[(size_t)a] : 1.0 - frac[(size_t)a];
        off = off * nodes + (base[(size_t)a] + bit);
      }
      for (int a = 0; a < dim; ++a)
        out[(size_t)a] += w * node_disp[(size_t)(off * dim + a)];
    }
    return out;
  }
};

// Patch-to-source map: q = offset + elastic(rotate(flip(scale(p)))).
// scale uses the pixel-center convention u = (p + 0.5) * crop/out - 0.5;
// rotation is in-plane (last two axes) about the crop center.
struct SpatialTransform {
  int dim = 0;
  Shape output_size;  // patch extents
  Shape crop_size;    // source crop extents
  VecD crop_offset;
  double rotation_rad = 0.0;
  std::vector<uint8_t> flip_axes;
  std::optional<ElasticField> elastic;

  VecD forward(const VecD& p) const {
    VecD u((size_t)dim);
    for (int a = 0; a < dim; ++a) {
      double f = (double)crop_size[(size_t)a] / (double)output_size[(size_t)a];
      u[(size_t)a] = (p[(size_t)a] + 0.5) * f - 0.5;
      if (!flip_axes.empty() && flip_axes[(size_t)a])
        u[(size_t)a] = (double)(crop_size[(size_t)a] - 1) - u[(size_t)a];
    }
    if (rotation_rad != 0.0) rotate_inplace(u, rotation_rad);
    if (elastic) {
      VecD d = elastic->at(u);
      for (int a = 0; a < dim; ++a) u[(size_t)a] += d[(size_t)a];
    }
    for (int a = 0; a < dim; ++a) u[(size_t)a] += crop_offset[(size_t)a];
    return u;
  }

  VecD inverse(const VecD& q) const {
    VecD u((size_t)dim);
    for (int a = 0; a < dim; ++a) u[(size_t)a] = q[(size_t)a] - crop_offset[(size_t)a];
    if (elastic) {
      // Fixed point of w = u - E(w); contraction enforced at sampling time.
      VecD w = u;
      for (int it = 0; it < 300; ++it) {
        VecD d = elastic->at(w);
        double delta = 0.0;
        for (int a = 0; a < dim; ++a) {
          double nw = u[(size_t)a] - d[(size_t)a];
          delta = std::max(delta, std::abs(nw - w[(size_t)a]));
          w[(size_t)a] = nw;
        }
        if (delta < 5e-13) break;
      }
      u = w;
    }
    if (rotation_rad != 0.0) rotate_inplace(u, -rotation_rad);
    VecD p((size_t)dim);
    for (int a = 0; a < dim; ++a) {
      double v = u[(size_t)a];
      if (!flip_axes.empty() && flip_axes[(size_t)a])
        v = (double)(crop_size[(size_t)a] - 1) - v;
      double f = (double)output_size[(size_t)a] / (double)crop_size[(size_t)a];
      p[(size_t)a] = (v + 0.5) * f - 0.5;
    }
    return p;
  }

 private:
  void rotate_inplace(VecD& u, double theta) const {
    int ay = dim - 2, ax = dim - 1;
    double cy = 0.5 * (double)(crop_size[(size_t)ay] - 1);
    double cx = 0.5 * (double)(crop_size[(size_t)ax] - 1);
    double dy = u[(size_t)ay] - cy, dx = u[(size_t)ax] - cx;
    double c = std::cos(theta), s = std::sin(theta);
    u[(size_t)ay] = cy + c * dy - s * dx;
    u[(size_t)ax] = cx + s * dy + c * dx;
  }
};

struct PatchPair {
  int dim = 0;
  Shape patch_size;
  Shape source_size;
  VecD spacing;
  SpatialTransform tf_a, tf_b;
  std::vector<float> patch_a, patch_b;
  std::vector<uint8_t> body_a, body_b;  // source body, nearest-resampled
  std::vector<uint8_t> overlap_a;       // patch_a pixels visible in patch_b
};

namespace detail {

inline bool in_source(const VecD& q, const Shape& size) {
  for (size_t a = 0; a < size.size(); ++a)
    if (q[a] < 0.0 || q[a] > (double)(size[a] - 1)) return false;
  return true;
}

inline SpatialTransform sample_transform(const phantom::Phantom& ph,
                                         const config::AugmentConfig& cfg,
                                         rng::Stream& rs) {
  SpatialTransform tf;
  tf.dim = ph.dim;
  tf.output_size = cfg.patch_size;
  double s = cfg.scale_enabled ? rs.uniform(cfg.scale_lo, cfg.scale_hi) : 1.0;
  for (int a = 0; a < ph.dim; ++a) {
    int64_t want = (int64_t)std::llround((double)cfg.patch_size[(size_t)a] * s);
    tf.crop_size.push_back(std::clamp<int64_t>(want, 2, ph.size[(size_t)a]));
  }
  for (int a = 0; a < ph.dim; ++a)
    tf.crop_offset.push_back(
        (double)rs.below(ph.size[(size_t)a] - tf.crop_size[(size_t)a] + 1));
  if (cfg.deform_rotate_enabled && cfg.rotation_deg > 0.0)
    tf.rotation_rad = rs.uniform(-cfg.rotation_deg, cfg.rotation_deg) *
                      std::numbers::pi / 180.0;
  if (cfg.flip_enabled) {
    tf.flip_axes.assign((size_t)ph.dim, 0);
    for (int a = 0; a < ph.dim; ++a) tf.flip_axes[(size_t)a] = (uint8_t)rs.below(2);
  }
  if (cfg.deform_rotate_enabled && cfg.elastic_amplitude > 0.0) {
    ElasticField ef;
    ef.dim = ph.dim;
    ef.grid = cfg.elastic_grid;
    ef.crop = tf.crop_size;
    double min_crop = (double)*std::min_element(tf.crop_size.begin(), tf.crop_size.end());
    double amp = cfg.elastic_amplitude * min_crop;
    // Hard cap so the displacement Jacobian stays below 0.9 in the infinity
    // norm even for adversarial node draws; this keeps the fixed-point
    // inverse a contraction for every sampled field.
    double inv_span_sum = 0.0;
    for (int a = 0; a < ph.dim; ++a)
      inv_span_sum += 1.0 / (double)(tf.crop_size[(size_t)a] - 1);
    amp = std::min(amp, 0.9 / (2.0 * (double)ef.grid * inv_span_sum));
    int64_t n_nodes = 1;
    for (int a = 0; a < ph.dim; ++a) n_nodes *= ef.grid + 1;
    ef.node_disp.resize((size_t)(n_nodes * ph.dim));
    for (double& v : ef.node_disp) v = rs.uniform(-amp, amp);
    tf.elastic = std::move(ef);
  }
  return tf;
}

inline void render_view(const phantom::Phantom& ph, const SpatialTransform& tf,
                        std::vector<float>& patch, std::vector<uint8_t>& body) {
  int64_t n = numel(tf.output_size);
  patch.assign((size_t)n, 0.0f);
  body.assign((size_t)n, 0);
  Shape idx((size_t)ph.dim, 0);
  VecD p((size_t)ph.dim);
  int64_t f = 0;
  do {
    for (int a = 0; a < ph.dim; ++a) p[(size_t)a] = (double)idx[(size_t)a];
    VecD q = tf.forward(p);
    if (in_source(q, ph.size)) {
      patch[(size_t)f] = (float)ph.image_interp(q);
      body[(size_t)f] = ph.body_at_nearest(q) ? 1 : 0;
    }
    ++f;
  } while (next_index(idx, tf.output_size));
}

inline void jitter_intensity(std::vector<float>& patch,
                             const config::AugmentConfig& cfg, rng::Stream& rs) {
  double gamma = rs.uniform(cfg.gamma_lo, cfg.gamma_hi);
  double contrast = rs.uniform(0.8, 1.2);
  double brightness = rs.uniform(-0.1, 0.1);
  for (float& v : patch) {
    double x = std::pow(std::clamp((double)v, 0.0, 1.0), gamma);
    if (cfg.noise_std > 0.0) x += cfg.noise_std * rs.normal();
    v = (float)(contrast * x + brightness);
  }
}

}  // namespace detail

// Correspondence from a patch_a position to the matching patch_b position.
// Defined where the source point exists and the preimage lands inside
// patch_b; the map is exact up to the elastic fixed-point tolerance.
inline std::optional<VecD> correspondence(const SpatialTransform& tf_a,
                                          const SpatialTransform& tf_b,
                                          const Shape& source_size, const VecD& p) {
  VecD q = tf_a.forward(p);
  if (!detail::in_source(q, source_size)) return std::nullopt;
  VecD pb = tf_b.inverse(q);
  for (int a = 0; a < tf_b.dim; ++a)
    if (pb[(size_t)a] < 0.0 ||
        pb[(size_t)a] > (double)(tf_b.output_size[(size_t)a] - 1))
      return std::nullopt;
  return pb;
}

inline std::optional<VecD> correspondence(const PatchPair& pr, const VecD& p) {
  return correspondence(pr.tf_a, pr.tf_b, pr.source_size, p);
}

// Two augmented views of one phantom plus the masks that tie them together.
// Geometry and intensity use separate derived streams, so disabling the
// intensity jitter does not shift the geometric draws.
inline PatchPair sample_pair(const phantom::Phantom& ph,
                             const config::AugmentConfig& cfg, rng::Stream& rs) {
  require((int)cfg.patch_size.size() == ph.dim,
          "augment: patch_size rank does not match phantom dim");
  for (int a = 0; a < ph.dim; ++a)
    require(cfg.patch_size[(size_t)a] <= ph.size[(size_t)a],
            "augment: patch_size ", shape_str(cfg.patch_size),
            " exceeds image size ", shape_str(ph.size));
  rng::Stream geo(rs.next_u64(), 1);
  rng::Stream inten(rs.next_u64(), 2);

  PatchPair pr;
  pr.dim = ph.dim;
  pr.patch_size = cfg.patch_size;
  pr.source_size = ph.size;
  pr.spacing = ph.spacing;
  pr.tf_a = detail::sample_transform(ph, cfg, geo);
  pr.tf_b = detail::sample_transform(ph, cfg, geo);
  detail::render_view(ph, pr.tf_a, pr.patch_a, pr.body_a);
  detail::render_view(ph, pr.tf_b, pr.patch_b, pr.body_b);
  if (cfg.intensity_enabled) {
    detail::jitter_intensity(pr.patch_a, cfg, inten);
    detail::jitter_intensity(pr.patch_b, cfg, inten);
  }

  // Overlap: patch_a pixels whose source point falls in crop box b and whose
  // correspondence lands inside patch_b.
  int64_t n = numel(pr.patch_size);
  pr.overlap_a.assign((size_t)n, 0);
  Shape idx((size_t)ph.dim, 0);
  VecD p((size_t)ph.dim);
  int64_t f = 0;
  do {
    for (int a = 0; a < ph.dim; ++a) p[(size_t)a] = (double)idx[(size_t)a];
    VecD q = pr.tf_a.forward(p);
    bool ok = detail::in_source(q, ph.size);
    for (int a = 0; ok && a < ph.dim; ++a) {
      double lo = pr.tf_b.crop_offset[(size_t)a];
      double hi = lo + (double)(pr.tf_b.crop_size[(size_t)a] - 1);
      ok = q[(size_t)a] >= lo && q[(size_t)a] <= hi;
    }
    if (ok) {
      VecD pb = pr.tf_b.inverse(q);
      for (int a = 0; ok && a < ph.dim; ++a)
        ok = pb[(size_t)a] >= 0.0 &&
             pb[(size_t)a] <= (double)(pr.patch_size[(size_t)a] - 1);
      if (ok) pr.overlap_a[(size_t)f] = 1;
    }
    ++f;
  } while (next_index(idx, pr.patch_size));
  return pr;
}

}  // namespace anatembed::augment
