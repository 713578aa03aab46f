#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "anatembed/augment.hpp"
#include "anatembed/ops.hpp"
#include "anatembed/rng.hpp"
#include "anatembed/tensor.hpp"

namespace anatembed::contrast {

// Contrastive loss for one anchor given raw similarity inputs. Embeddings
// must arrive unit length; tolerance matches the upstream normalization.
inline double info_nce(const std::vector<float>& anchor,
                       const std::vector<float>& positive,
                       const std::vector<std::vector<float>>& negatives,
                       double tau) {
  require(tau > 0.0, "info_nce: tau must be positive");
  auto check_unit = [&](const std::vector<float>& v, const char* what) {
    require(v.size() == anchor.size(), "info_nce: ", what, " has ", v.size(),
            " dims, anchor has ", anchor.size());
    double n2 = 0.0;
    for (float x : v) n2 += (double)x * x;
    require(std::abs(std::sqrt(n2) - 1.0) <= 1e-3, "info_nce: ", what,
            " is not unit length (norm ", std::sqrt(n2), ")");
  };
  check_unit(anchor, "anchor");
  check_unit(positive, "positive");
  auto dot = [&](const std::vector<float>& v) {
    double s = 0.0;
    for (size_t i = 0; i < anchor.size(); ++i) s += (double)anchor[i] * v[i];
    return s;
  };
  double sp = dot(positive);
  double m = sp;
  std::vector<double> sn(negatives.size());
  for (size_t j = 0; j < negatives.size(); ++j) {
    check_unit(negatives[j], "negative");
    sn[j] = dot(negatives[j]);
    m = std::max(m, sn[j]);
  }
  double z = std::exp((sp - m) / tau);
  for (double s : sn) z += std::exp((s - m) / tau);
  return -(sp - m) / tau + std::log(z);
}

// Column reference into one of the loss node's field tensors.
struct NegRef {
  int field = 0;
  int64_t cell = 0;
  bool operator==(const NegRef&) const = default;
};

struct LossTerm {
  int anchor_field = 0;
  int64_t anchor_cell = 0;
  int pos_field = 0;
  int64_t pos_cell = 0;  // anchor itself for the self-positive fallback
  std::vector<NegRef> negs;
};

// Sum of info_nce over terms as one graph node. Fields are {dim, cells}
// embedding tensors; the backward pass recomputes each term's softmax and
// scatters strided column updates into the field gradients.
inline Tensor info_nce_batch(const std::vector<Tensor>& fields,
                             std::vector<LossTerm> terms, double tau) {
  require(tau > 0.0, "info_nce_batch: tau must be positive");
  require(!fields.empty(), "info_nce_batch: no fields");
  int64_t dim = fields[0].shape()[0];
  for (const Tensor& f : fields)
    require(f.shape()[0] == dim, "info_nce_batch: field dim mismatch");
  auto cells_of = [&](int fi) {
    const Shape& s = fields[(size_t)fi].shape();
    return numel(s) / s[0];
  };
  auto col = [&](int fi, int64_t c) { return fields[(size_t)fi].data() + c; };
  auto cdot = [&](const float* a, int64_t sa, const float* b, int64_t sb) {
    double s = 0.0;
    for (int64_t e = 0; e < dim; ++e) s += (double)a[e * sa] * b[e * sb];
    return s;
  };
  for (const LossTerm& t : terms) {
    require(t.anchor_field >= 0 && t.anchor_field < (int)fields.size() &&
                t.pos_field >= 0 && t.pos_field < (int)fields.size(),
            "info_nce_batch: field index out of range");
    require(t.anchor_cell >= 0 && t.anchor_cell < cells_of(t.anchor_field) &&
                t.pos_cell >= 0 && t.pos_cell < cells_of(t.pos_field),
            "info_nce_batch: cell index out of range");
    for (const NegRef& n : t.negs)
      require(n.field >= 0 && n.field < (int)fields.size() && n.cell >= 0 &&
                  n.cell < cells_of(n.field),
              "info_nce_batch: negative reference out of range");
  }

  double total = 0.0;
  for (const LossTerm& t : terms) {
    int64_t ca = cells_of(t.anchor_field), cp = cells_of(t.pos_field);
    const float* a = col(t.anchor_field, t.anchor_cell);
    double sp = cdot(a, ca, col(t.pos_field, t.pos_cell), cp);
    double m = sp;
    std::vector<double> sn(t.negs.size());
    for (size_t j = 0; j < t.negs.size(); ++j) {
      sn[j] = cdot(a, ca, col(t.negs[j].field, t.negs[j].cell),
                   cells_of(t.negs[j].field));
      m = std::max(m, sn[j]);
    }
    double z = std::exp((sp - m) / tau);
    for (double s : sn) z += std::exp((s - m) / tau);
    total += -(sp - m) / tau + std::log(z);
  }

  std::vector<Tensor> parents = fields;
  return Tensor::op(
      {1}, {(float)total}, std::move(parents),
      [fields, terms = std::move(terms), tau, dim](diffcore::Node& self) {
        double g0 = (double)self.grad[0];
        auto cells_of = [&](int fi) {
          const Shape& s = fields[(size_t)fi].shape();
          return numel(s) / s[0];
        };
        for (const LossTerm& t : terms) {
          int64_t ca = cells_of(t.anchor_field), cp = cells_of(t.pos_field);
          const float* a = fields[(size_t)t.anchor_field].data() + t.anchor_cell;
          const float* p = fields[(size_t)t.pos_field].data() + t.pos_cell;
          auto cdot = [&](const float* x, int64_t sx, const float* y, int64_t sy) {
            double s = 0.0;
            for (int64_t e = 0; e < dim; ++e) s += (double)x[e * sx] * y[e * sy];
            return s;
          };
          double sp = cdot(a, ca, p, cp);
          double m = sp;
          std::vector<double> sn(t.negs.size());
          for (size_t j = 0; j < t.negs.size(); ++j) {
            const NegRef& nr = t.negs[j];
            sn[j] = cdot(a, ca, fields[(size_t)nr.field].data() + nr.cell,
                         cells_of(nr.field));
            m = std::max(m, sn[j]);
          }
          double z = std::exp((sp - m) / tau);
          for (double s : sn) z += std::exp((s - m) / tau);
          double wp = std::exp((sp - m) / tau) / z;
          // dL/ds_pos = (wp - 1)/tau, dL/ds_neg_j = w_j/tau
          Tensor fa = fields[(size_t)t.anchor_field];
          Tensor fp = fields[(size_t)t.pos_field];
          float* ga = fa.grad() + t.anchor_cell;
          float* gp = fp.grad() + t.pos_cell;
          double cpos = g0 * (wp - 1.0) / tau;
          for (int64_t e = 0; e < dim; ++e) {
            ga[e * ca] += (float)(cpos * (double)p[e * cp]);
            gp[e * cp] += (float)(cpos * (double)a[e * ca]);
          }
          for (size_t j = 0; j < t.negs.size(); ++j) {
            const NegRef& nr = t.negs[j];
            int64_t cn = cells_of(nr.field);
            const float* h = fields[(size_t)nr.field].data() + nr.cell;
            Tensor fn = fields[(size_t)nr.field];
            float* gn = fn.grad() + nr.cell;
            double cneg = g0 * std::exp((sn[j] - m) / tau) / z / tau;
            for (int64_t e = 0; e < dim; ++e) {
              ga[e * ca] += (float)(cneg * (double)h[e * cn]);
              gn[e * cn] += (float)(cneg * (double)a[e * ca]);
            }
          }
        }
      });
}

// Per-patch view used by negative selection: raw field values plus the
// source-space position of every cell for distance exclusion.
struct SelField {
  const float* values = nullptr;  // {embed_dim, cells}
  int64_t embed_dim = 0, cells = 0;
  std::vector<VecD> cell_mm;
  int image_id = 0;
  int tensor_index = 0;  // field slot in the loss node
};

inline std::vector<VecD> cell_positions_mm(const Shape& cell_shape,
                                           const Shape& stride,
                                           const augment::SpatialTransform& tf,
                                           const VecD& spacing) {
  std::vector<VecD> out;
  out.reserve((size_t)numel(cell_shape));
  Shape idx(cell_shape.size(), 0);
  VecD px(cell_shape.size());
  do {
    for (size_t a = 0; a < idx.size(); ++a)
      px[a] = (double)(idx[a] * stride[a]);
    VecD q = tf.forward(px);
    for (size_t a = 0; a < q.size(); ++a) q[a] *= spacing[a];
    out.push_back(std::move(q));
  } while (next_index(idx, cell_shape));
  return out;
}

namespace detail {

inline double dist2(const VecD& a, const VecD& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

// Candidate surviving exclusion, ordered by (value desc, field asc, cell asc).
struct Cand {
  float value;
  NegRef ref;
};

inline bool cand_less(const Cand& x, const Cand& y) {
  if (x.value != y.value) return x.value > y.value;
  if (x.ref.field != y.ref.field) return x.ref.field < y.ref.field;
  return x.ref.cell < y.ref.cell;
}

inline void collect(const float* sims, const SelField& f, const VecD& anchor_mm,
                    double delta_mm, int64_t own_cell, std::vector<Cand>& out) {
  double d2 = delta_mm * delta_mm;
  for (int64_t c = 0; c < f.cells; ++c) {
    if (c == own_cell) continue;
    if (delta_mm > 0.0 && dist2(f.cell_mm[(size_t)c], anchor_mm) < d2) continue;
    out.push_back({sims[c], {f.tensor_index, c}});
  }
}

}  // namespace detail

// Hardest surviving cells of the pair's two fields: top n by similarity,
// excluding the anchor/positive cells and anything within delta_mm of the
// anchor's source position. Returns fewer when exclusion leaves fewer.
inline std::vector<NegRef> hard_negatives(const float* sims0, const SelField& f0,
                                          const float* sims1, const SelField& f1,
                                          const VecD& anchor_mm, double delta_mm,
                                          int64_t own0, int64_t own1, int64_t n) {
  std::vector<detail::Cand> cand;
  cand.reserve((size_t)(f0.cells + f1.cells));
  detail::collect(sims0, f0, anchor_mm, delta_mm, own0, cand);
  detail::collect(sims1, f1, anchor_mm, delta_mm, own1, cand);
  size_t k = std::min<size_t>((size_t)std::max<int64_t>(n, 0), cand.size());
  std::partial_sort(cand.begin(), cand.begin() + (int64_t)k, cand.end(),
                    detail::cand_less);
  std::vector<NegRef> out(k);
  for (size_t i = 0; i < k; ++i) out[i] = cand[i].ref;
  return out;
}

// Uniform cells of the pair's two fields under the same exclusion rule.
// Draws with replacement; used by the no-hard-mining ablations.
inline std::vector<NegRef> random_own_pair(const SelField& f0, const SelField& f1,
                                           const VecD& anchor_mm, double delta_mm,
                                           int64_t own0, int64_t own1, int64_t n,
                                           rng::Stream& rs) {
  std::vector<NegRef> out;
  out.reserve((size_t)n);
  double d2 = delta_mm * delta_mm;
  int64_t total = f0.cells + f1.cells;
  int64_t attempts = 0, cap = 100 * n + 1000;
  while ((int64_t)out.size() < n && attempts++ < cap) {
    int64_t t = rs.below(total);
    const SelField& f = t < f0.cells ? f0 : f1;
    int64_t c = t < f0.cells ? t : t - f0.cells;
    int64_t own = t < f0.cells ? own0 : own1;
    if (c == own) continue;
    if (delta_mm > 0.0 && detail::dist2(f.cell_mm[(size_t)c], anchor_mm) < d2)
      continue;
    out.push_back({f.tensor_index, c});
  }
  return out;
}

// Uniform cells across every field in the batch. Distance exclusion only
// applies to draws that land on the anchor's own image; other images are
// different anatomy instances.
inline std::vector<NegRef> diverse_negatives(const std::vector<SelField>& all,
                                             int own_image, const VecD& anchor_mm,
                                             double delta_mm, int64_t n,
                                             rng::Stream& rs) {
  int64_t total = 0;
  for (const SelField& f : all) total += f.cells;
  require(total > 0, "diverse_negatives: empty field set");
  std::vector<NegRef> out;
  out.reserve((size_t)n);
  double d2 = delta_mm * delta_mm;
  int64_t attempts = 0, cap = 100 * n + 1000;
  while ((int64_t)out.size() < n && attempts++ < cap) {
    int64_t t = rs.below(total);
    size_t fi = 0;
    while (t >= all[fi].cells) t -= all[fi++].cells;
    const SelField& f = all[fi];
    if (f.image_id == own_image && delta_mm > 0.0 &&
        detail::dist2(f.cell_mm[(size_t)t], anchor_mm) < d2)
      continue;
    out.push_back({f.tensor_index, t});
  }
  return out;
}

// Local negatives: rank own-pair cells by the combined similarity maps, keep
// the top n_cand survivors, then subsample n uniformly without replacement.
// With subsample off the top n are taken directly.
inline std::vector<NegRef> local_negatives(const float* comb0, const SelField& f0,
                                           const float* comb1, const SelField& f1,
                                           const VecD& anchor_mm, double delta_mm,
                                           int64_t own0, int64_t own1,
                                           int64_t n_cand, int64_t n,
                                           bool subsample, rng::Stream& rs) {
  std::vector<detail::Cand> cand;
  cand.reserve((size_t)(f0.cells + f1.cells));
  detail::collect(comb0, f0, anchor_mm, delta_mm, own0, cand);
  detail::collect(comb1, f1, anchor_mm, delta_mm, own1, cand);
  size_t kc = std::min<size_t>((size_t)std::max<int64_t>(n_cand, 0), cand.size());
  std::partial_sort(cand.begin(), cand.begin() + (int64_t)kc, cand.end(),
                    detail::cand_less);
  size_t k = std::min<size_t>((size_t)std::max<int64_t>(n, 0), kc);
  std::vector<NegRef> out;
  out.reserve(k);
  if (!subsample || k == kc) {
    for (size_t i = 0; i < k; ++i) out.push_back(cand[i].ref);
    return out;
  }
  std::vector<int64_t> pick((size_t)kc);
  for (size_t i = 0; i < kc; ++i) pick[i] = (int64_t)i;
  std::vector<int64_t> chosen =
      rs.sample(std::span<const int64_t>(pick), (int64_t)k);
  for (int64_t i : chosen) out.push_back(cand[(size_t)i].ref);
  return out;
}

struct PosPair {
  VecD a, b;  // patch-a and patch-b pixel positions of one source point
};

// Positive pairs drawn with replacement from overlap-and-body pixels of
// patch a. Returns nullopt when the views share nothing; callers fall back
// to self positives.
inline std::optional<std::vector<PosPair>> sample_positive_pairs(
    const augment::PatchPair& pr, int64_t n, rng::Stream& rs) {
  std::vector<int64_t> pool;
  for (size_t i = 0; i < pr.overlap_a.size(); ++i)
    if (pr.overlap_a[i] && pr.body_a[i]) pool.push_back((int64_t)i);
  if (pool.empty()) return std::nullopt;
  Shape strides = row_strides(pr.patch_size);
  std::vector<PosPair> out;
  out.reserve((size_t)n);
  for (int64_t t = 0; t < n; ++t) {
    int64_t flat = pool[(size_t)rs.below((int64_t)pool.size())];
    VecD p((size_t)pr.dim);
    int64_t rem = flat;
    for (size_t a = 0; a < strides.size(); ++a) {
      p[a] = (double)(rem / strides[a]);
      rem %= strides[a];
    }
    auto q = augment::correspondence(pr, p);
    require(q.has_value(), "sample_positive_pairs: overlap mask out of sync");
    out.push_back({std::move(p), std::move(*q)});
  }
  return out;
}

// Body pixels of one patch, with replacement; empty when the patch has no
// body at all.
inline std::vector<VecD> sample_body_pixels(const std::vector<uint8_t>& body,
                                            const Shape& shape, int64_t n,
                                            rng::Stream& rs) {
  std::vector<int64_t> pool;
  for (size_t i = 0; i < body.size(); ++i)
    if (body[i]) pool.push_back((int64_t)i);
  if (pool.empty()) return {};
  Shape strides = row_strides(shape);
  std::vector<VecD> out;
  out.reserve((size_t)n);
  for (int64_t t = 0; t < n; ++t) {
    int64_t flat = pool[(size_t)rs.below((int64_t)pool.size())];
    VecD p(shape.size());
    int64_t rem = flat;
    for (size_t a = 0; a < strides.size(); ++a) {
      p[a] = (double)(rem / strides[a]);
      rem %= strides[a];
    }
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace anatembed::contrast
