#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "anatembed/config.hpp"
#include "anatembed/net.hpp"
#include "anatembed/tensor_io.hpp"
#include "json.hpp"

namespace anatembed::infer {

// Whole-image global and local embedding fields. Image extent is divisible
// by both strides, so cells * stride recovers the pixel grid exactly.
struct EmbedResult {
  net::EmbeddingField global, local;

  Shape image_size() const {
    const Shape& vs = global.values.shape();
    Shape px(vs.size() - 1);
    for (size_t a = 0; a + 1 < vs.size(); ++a)
      px[a] = vs[a + 1] * global.stride[a];
    return px;
  }
};

namespace detail {

inline Tensor copy_window(const Tensor& img, const Shape& w0, const Shape& wext) {
  size_t d = wext.size();
  Shape src_sp(img.shape().begin() + 1, img.shape().end());
  Shape src_str = row_strides(src_sp);
  Shape out_shape = {1};
  for (int64_t e : wext) out_shape.push_back(e);
  std::vector<float> out((size_t)numel(out_shape));
  Shape rows(wext.begin(), wext.end() - 1);
  Shape idx(rows.size(), 0);
  int64_t run = wext[d - 1];
  int64_t dst = 0;
  do {
    int64_t off = w0[d - 1];
    for (size_t a = 0; a + 1 < d; ++a) off += (w0[a] + idx[a]) * src_str[a];
    std::copy_n(img.data() + off, run, out.data() + dst);
    dst += run;
  } while (next_index(idx, rows));
  return Tensor::from(std::move(out_shape), std::move(out));
}

// Copies the cell box `ext` from src (at s0) into the dst buffer (at d0);
// both are {embed, cells...} with dst cell extents dcells.
inline void paste_cells(const Tensor& src, const Shape& s0, std::vector<float>& dst,
                        const Shape& dcells, const Shape& d0, const Shape& ext) {
  size_t d = ext.size();
  int64_t embed = src.shape()[0];
  Shape scells(src.shape().begin() + 1, src.shape().end());
  Shape ss = row_strides(scells), ds = row_strides(dcells);
  int64_t s_ch = numel(scells), d_ch = numel(dcells);
  Shape rows(ext.begin(), ext.end() - 1);
  int64_t run = ext[d - 1];
  for (int64_t e = 0; e < embed; ++e) {
    Shape idx(rows.size(), 0);
    do {
      int64_t so = e * s_ch + s0[d - 1], do_ = e * d_ch + d0[d - 1];
      for (size_t a = 0; a + 1 < d; ++a) {
        so += (s0[a] + idx[a]) * ss[a];
        do_ += (d0[a] + idx[a]) * ds[a];
      }
      std::copy_n(src.data() + so, run, dst.data() + do_);
    } while (next_index(idx, rows));
  }
}

}  // namespace detail

// Embeds a whole image, cutting it into overlapping tiles when it exceeds
// tile_size. Core regions tile the image disjointly on a global-stride grid;
// each forward window adds tile_overlap pixels of context per side, so core
// cells come out identical to an untiled forward whenever the overlap covers
// the encoder's receptive field.
inline EmbedResult embed_image(const net::Encoder& enc, const Tensor& image,
                               const config::InferConfig& ic) {
  const config::EncoderConfig& cfg = enc.cfg;
  const Shape& xs = image.shape();
  size_t d = (size_t)cfg.dim;
  require(xs.size() == d + 1 && xs[0] == 1,
          "infer: expected image shaped {1, spatial...}, got ", shape_str(xs));
  require(ic.tile_size.size() == d, "infer: tile_size needs ", d, " entries");
  require(ic.tile_overlap.size() == d, "infer: tile_overlap needs ", d, " entries");
  Shape ext(xs.begin() + 1, xs.end());
  const Shape& g = cfg.global_stride;
  const Shape& l = cfg.local_stride;

  Shape core(d), ncore(d);
  bool tiled = false;
  for (size_t a = 0; a < d; ++a) {
    require(ext[a] % g[a] == 0, "infer: image extent ", ext[a],
            " not divisible by global stride ", g[a], " on axis ", a);
    if (ext[a] <= ic.tile_size[a]) {
      core[a] = ext[a];
      ncore[a] = 1;
      continue;
    }
    tiled = true;
    require(ic.tile_size[a] % g[a] == 0, "infer: tile_size ", ic.tile_size[a],
            " not divisible by global stride ", g[a], " on axis ", a);
    require(ic.tile_overlap[a] >= 0, "infer: tile_overlap must be >= 0");
    int64_t v = (ic.tile_overlap[a] + g[a] - 1) / g[a] * g[a];
    core[a] = ic.tile_size[a] - 2 * v;
    require(core[a] >= g[a], "infer: tile_size ", ic.tile_size[a], " on axis ", a,
            " leaves no core after overlap ", v, " per side");
    ncore[a] = (ext[a] + core[a] - 1) / core[a];
  }

  if (!tiled) {
    net::EncoderOut out = net::forward(enc, image);
    return {*out.global, *out.local};
  }

  Shape gshape = {cfg.embed_dim}, lshape = {cfg.embed_dim};
  Shape gcells(d), lcells(d);
  for (size_t a = 0; a < d; ++a) {
    gcells[a] = ext[a] / g[a];
    lcells[a] = ext[a] / l[a];
    gshape.push_back(gcells[a]);
    lshape.push_back(lcells[a]);
  }
  std::vector<float> gvals((size_t)numel(gshape)), lvals((size_t)numel(lshape));

  Shape tile(d, 0);
  do {
    Shape c0(d), c1(d), w0(d), wext(d);
    for (size_t a = 0; a < d; ++a) {
      int64_t v = (ic.tile_overlap[a] + g[a] - 1) / g[a] * g[a];
      c0[a] = tile[a] * core[a];
      c1[a] = std::min(c0[a] + core[a], ext[a]);
      w0[a] = ncore[a] == 1 ? 0 : std::max<int64_t>(0, c0[a] - v);
      int64_t w1 = ncore[a] == 1 ? ext[a] : std::min(ext[a], c1[a] + v);
      wext[a] = w1 - w0[a];
    }
    net::EncoderOut to = net::forward(enc, detail::copy_window(image, w0, wext));
    Shape sg(d), dg(d), eg(d), sl(d), dl(d), el(d);
    for (size_t a = 0; a < d; ++a) {
      sg[a] = (c0[a] - w0[a]) / g[a];
      dg[a] = c0[a] / g[a];
      eg[a] = (c1[a] - c0[a]) / g[a];
      sl[a] = (c0[a] - w0[a]) / l[a];
      dl[a] = c0[a] / l[a];
      el[a] = (c1[a] - c0[a]) / l[a];
    }
    detail::paste_cells(to.global->values, sg, gvals, gcells, dg, eg);
    detail::paste_cells(to.local->values, sl, lvals, lcells, dl, el);
  } while (next_index(tile, ncore));

  return {net::EmbeddingField{Tensor::from(std::move(gshape), std::move(gvals)), g},
          net::EmbeddingField{Tensor::from(std::move(lshape), std::move(lvals)), l}};
}

// Anchor embeddings cached for one named template point.
struct LandmarkAnchor {
  std::string name;
  VecD point;  // template-frame pixel coordinate
  std::vector<float> f_g, f_l;
};

struct Template {
  std::string image_id;
  std::vector<LandmarkAnchor> anchors;
};

namespace detail {

inline std::vector<float> anchor_column(const net::EmbeddingField& f, const VecD& p) {
  const Shape& vs = f.values.shape();
  Shape cells(vs.begin() + 1, vs.end());
  int64_t flat = flat_index(f.px_to_cell(p), row_strides(cells));
  int64_t n = numel(cells);
  std::vector<float> out((size_t)vs[0]);
  for (int64_t k = 0; k < vs[0]; ++k) out[(size_t)k] = f.values.data()[k * n + flat];
  return out;
}

inline double sqnorm(const std::vector<float>& v) {
  double n = 0.0;
  for (float x : v) n += (double)x * (double)x;
  return n;
}

}  // namespace detail

inline LandmarkAnchor extract_anchor(const EmbedResult& fields,
                                     const std::string& name, const VecD& point) {
  Shape ext = fields.image_size();
  require(point.size() == ext.size(), "infer: anchor point needs ", ext.size(),
          " coordinates, got ", point.size());
  for (size_t a = 0; a < ext.size(); ++a)
    require(point[a] >= 0.0 && point[a] <= (double)(ext[a] - 1),
            "infer: anchor point coordinate ", point[a], " outside image axis ",
            a, " of extent ", ext[a]);
  LandmarkAnchor anchor{name, point, detail::anchor_column(fields.global, point),
                        detail::anchor_column(fields.local, point)};
  require(detail::sqnorm(anchor.f_g) > 0.25 && detail::sqnorm(anchor.f_l) > 0.25,
          "infer: anchor \"", name, "\" has a zero embedding; the point sits on",
          " empty background");
  return anchor;
}

inline Template make_template(const std::string& image_id, const EmbedResult& fields,
                              const std::vector<std::pair<std::string, VecD>>& points) {
  Template t;
  t.image_id = image_id;
  for (const auto& [name, p] : points)
    t.anchors.push_back(extract_anchor(fields, name, p));
  return t;
}

enum class Variant { full, global_only, local_only };

inline Variant variant_from_string(const std::string& s) {
  if (s == "full") return Variant::full;
  if (s == "global_only") return Variant::global_only;
  if (s == "local_only") return Variant::local_only;
  fail("infer: unknown match variant \"", s,
       "\" (expected full, global_only or local_only)");
}

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::global_only: return "global_only";
    case Variant::local_only: return "local_only";
  }
  fail("infer: bad variant value");
}

struct MatchResult {
  VecD point;          // peak pixel coordinate in the query frame
  double score = 0.0;  // combined similarity at the peak
  double peak_global = 0.0, peak_local = 0.0;  // each map's own maximum
};

namespace detail {

// Cosine similarities of one anchor against every cell of a field.
inline std::vector<float> sim_map(const net::EmbeddingField& f,
                                  const std::vector<float>& anchor) {
  int64_t e = f.values.shape()[0];
  require((int64_t)anchor.size() == e, "infer: anchor embedding has ",
          anchor.size(), " dims, field has ", e);
  int64_t cells = 1;
  for (size_t a = 1; a < f.values.shape().size(); ++a) cells *= f.values.shape()[a];
  std::vector<double> acc((size_t)cells, 0.0);
  for (int64_t k = 0; k < e; ++k) {
    double w = anchor[(size_t)k];
    const float* row = f.values.data() + k * cells;
    for (int64_t c = 0; c < cells; ++c) acc[(size_t)c] += w * row[c];
  }
  std::vector<float> out((size_t)cells);
  for (int64_t c = 0; c < cells; ++c) out[(size_t)c] = (float)acc[(size_t)c];
  return out;
}

// Per-pixel linear interpolation table for one axis of a cell map whose cell
// i sits at pixel stride*i; pixels past the last center clamp to the edge.
struct AxisInterp {
  std::vector<int64_t> i0, i1;
  std::vector<double> w1;
};

inline AxisInterp axis_interp(int64_t px, int64_t cells, int64_t stride) {
  AxisInterp t;
  t.i0.resize((size_t)px);
  t.i1.resize((size_t)px);
  t.w1.resize((size_t)px);
  for (int64_t p = 0; p < px; ++p) {
    double c = std::min((double)p / (double)stride, (double)(cells - 1));
    int64_t lo = std::clamp<int64_t>((int64_t)std::floor(c), 0, cells - 1);
    t.i0[(size_t)p] = lo;
    t.i1[(size_t)p] = std::min<int64_t>(lo + 1, cells - 1);
    t.w1[(size_t)p] = c - (double)lo;
  }
  return t;
}

struct UpsampledMap {
  const std::vector<float>* s = nullptr;
  Shape cell_strides;
  std::vector<AxisInterp> axes;

  double at(const Shape& px) const {
    size_t d = axes.size();
    double out = 0.0;
    for (uint32_t m = 0; m < (1u << d); ++m) {
      double w = 1.0;
      int64_t off = 0;
      for (size_t a = 0; a < d; ++a) {
        const AxisInterp& t = axes[a];
        int64_t p = px[a];
        if (m >> a & 1u) {
          w *= t.w1[(size_t)p];
          off += t.i1[(size_t)p] * cell_strides[a];
        } else {
          w *= 1.0 - t.w1[(size_t)p];
          off += t.i0[(size_t)p] * cell_strides[a];
        }
      }
      if (w != 0.0) out += w * (double)(*s)[(size_t)off];
    }
    return out;
  }
};

inline UpsampledMap make_upsampled(const std::vector<float>& s, const Shape& cells,
                                   const Shape& stride, const Shape& px_extent) {
  UpsampledMap m;
  m.s = &s;
  m.cell_strides = row_strides(cells);
  for (size_t a = 0; a < cells.size(); ++a)
    m.axes.push_back(axis_interp(px_extent[a], cells[a], stride[a]));
  return m;
}

struct PeakScan {
  Shape point;
  double score = 0.0, peak_g = 0.0, peak_l = 0.0;
};

// Scans every pixel of the upsampled grids once; the combined peak keeps the
// first (lexicographically lowest) coordinate on ties. A null map is ignored
// entirely (never read) and reports 0 as its own peak.
inline PeakScan scan_peak(const UpsampledMap* mg, const UpsampledMap* ml,
                          const Shape& px_extent) {
  PeakScan best;
  double best_v = -std::numeric_limits<double>::infinity();
  double best_g = best_v, best_l = best_v;
  Shape px(px_extent.size(), 0);
  do {
    double v = 0.0;
    if (mg) {
      double sg = mg->at(px);
      best_g = std::max(best_g, sg);
      v += sg;
    }
    if (ml) {
      double sl = ml->at(px);
      best_l = std::max(best_l, sl);
      v += sl;
    }
    if (v > best_v) {
      best_v = v;
      best.point = px;
    }
  } while (next_index(px, px_extent));
  best.score = best_v;
  best.peak_g = mg ? best_g : 0.0;
  best.peak_l = ml ? best_l : 0.0;
  return best;
}

}  // namespace detail

// Computes the anchor's similarity against every used cell map, upsamples
// linearly to the pixel grid, and returns the peak of the summed maps. The
// single-map variants never read the other field's values.
inline MatchResult match(const LandmarkAnchor& anchor, const EmbedResult& query,
                         Variant variant = Variant::full) {
  Shape ext = query.image_size();
  for (size_t a = 0; a < ext.size(); ++a) {
    int64_t from_local =
        query.local.values.shape()[a + 1] * query.local.stride[a];
    require(from_local == ext[a], "infer: global and local fields disagree on",
            " image extent at axis ", a, ": ", ext[a], " vs ", from_local);
  }
  bool use_g = variant != Variant::local_only;
  bool use_l = variant != Variant::global_only;
  std::vector<float> sg, sl;
  detail::UpsampledMap mg, ml;
  if (use_g) {
    sg = detail::sim_map(query.global, anchor.f_g);
    Shape gcells(query.global.values.shape().begin() + 1,
                 query.global.values.shape().end());
    mg = detail::make_upsampled(sg, gcells, query.global.stride, ext);
  }
  if (use_l) {
    sl = detail::sim_map(query.local, anchor.f_l);
    Shape lcells(query.local.values.shape().begin() + 1,
                 query.local.values.shape().end());
    ml = detail::make_upsampled(sl, lcells, query.local.stride, ext);
  }
  detail::PeakScan pk =
      detail::scan_peak(use_g ? &mg : nullptr, use_l ? &ml : nullptr, ext);
  MatchResult r;
  r.point.assign(pk.point.begin(), pk.point.end());
  r.score = pk.score;
  r.peak_global = pk.peak_g;
  r.peak_local = pk.peak_l;
  return r;
}

inline std::optional<MatchResult> match_with_threshold(
    const LandmarkAnchor& anchor, const EmbedResult& query, double threshold,
    Variant variant = Variant::full) {
  MatchResult r = match(anchor, query, variant);
  if (r.score < threshold) return std::nullopt;
  return r;
}

// --- persistence ----------------------------------------------------------

inline void save_embed(const std::string& dir, const EmbedResult& f) {
  std::filesystem::create_directories(dir);
  nlohmann::json m;
  m["format"] = "anatembed-embed-v1";
  m["global_stride"] = f.global.stride;
  m["local_stride"] = f.local.stride;
  io::write_text_atomic(dir + "/embed.json", m.dump(2) + "\n");
  std::vector<float> g(f.global.values.data(),
                       f.global.values.data() + f.global.values.size());
  std::vector<float> l(f.local.values.data(),
                       f.local.values.data() + f.local.values.size());
  io::write_pet(dir + "/global.pet", f.global.values.shape(), g);
  io::write_pet(dir + "/local.pet", f.local.values.shape(), l);
}

inline EmbedResult load_embed(const std::string& dir) {
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(io::read_text(dir + "/embed.json"));
  } catch (const nlohmann::json::exception& e) {
    fail("infer: bad embed manifest in ", dir, ": ", e.what());
  }
  require(m.value("format", "") == "anatembed-embed-v1",
          "infer: unrecognized embed format in ", dir);
  auto [gs, gv] = io::read_pet_f32(dir + "/global.pet");
  auto [ls, lv] = io::read_pet_f32(dir + "/local.pet");
  EmbedResult f{{Tensor::from(gs, std::move(gv)), m.at("global_stride").get<Shape>()},
                {Tensor::from(ls, std::move(lv)), m.at("local_stride").get<Shape>()}};
  require(f.global.stride.size() + 1 == gs.size(),
          "infer: embed stride rank does not match tensor rank in ", dir);
  for (size_t a = 0; a < f.global.stride.size(); ++a)
    require(gs[a + 1] * f.global.stride[a] == ls[a + 1] * f.local.stride[a],
            "infer: stored global and local fields disagree on image extent");
  return f;
}

inline void save_template(const std::string& dir, const Template& t) {
  std::filesystem::create_directories(dir);
  int64_t e = t.anchors.empty() ? 0 : (int64_t)t.anchors[0].f_g.size();
  nlohmann::json m;
  m["format"] = "anatembed-template-v1";
  m["image_id"] = t.image_id;
  nlohmann::json pts = nlohmann::json::array();
  std::vector<float> ag, al;
  for (const LandmarkAnchor& a : t.anchors) {
    pts.push_back({{"name", a.name}, {"point", a.point}});
    require((int64_t)a.f_g.size() == e && (int64_t)a.f_l.size() == e,
            "infer: template anchors disagree on embed dim");
    ag.insert(ag.end(), a.f_g.begin(), a.f_g.end());
    al.insert(al.end(), a.f_l.begin(), a.f_l.end());
  }
  m["points"] = pts;
  io::write_text_atomic(dir + "/template.json", m.dump(2) + "\n");
  Shape s = {(int64_t)t.anchors.size(), e};
  io::write_pet(dir + "/anchors_g.pet", s, ag);
  io::write_pet(dir + "/anchors_l.pet", s, al);
}

inline Template load_template(const std::string& dir) {
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(io::read_text(dir + "/template.json"));
  } catch (const nlohmann::json::exception& e) {
    fail("infer: bad template manifest in ", dir, ": ", e.what());
  }
  require(m.value("format", "") == "anatembed-template-v1",
          "infer: unrecognized template format in ", dir);
  auto [gs, gv] = io::read_pet_f32(dir + "/anchors_g.pet");
  auto [ls, lv] = io::read_pet_f32(dir + "/anchors_l.pet");
  require(gs.size() == 2 && gs == ls, "infer: template anchor tensors must be",
          " {count, embed} and agree in shape");
  Template t;
  t.image_id = m.value("image_id", "");
  const auto& pts = m.at("points");
  require((int64_t)pts.size() == gs[0], "infer: template lists ", pts.size(),
          " points but stores ", gs[0], " anchors");
  for (size_t i = 0; i < pts.size(); ++i) {
    LandmarkAnchor a;
    a.name = pts[i].at("name").get<std::string>();
    a.point = pts[i].at("point").get<VecD>();
    a.f_g.assign(gv.begin() + (int64_t)i * gs[1], gv.begin() + ((int64_t)i + 1) * gs[1]);
    a.f_l.assign(lv.begin() + (int64_t)i * gs[1], lv.begin() + ((int64_t)i + 1) * gs[1]);
    t.anchors.push_back(std::move(a));
  }
  return t;
}

}  // namespace anatembed::infer
