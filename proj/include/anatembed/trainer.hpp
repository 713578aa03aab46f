#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "anatembed/augment.hpp"
#include "anatembed/config.hpp"
#include "anatembed/contrast.hpp"
#include "anatembed/gemm.hpp"
#include "anatembed/net.hpp"
#include "anatembed/phantom.hpp"
#include "anatembed/rng.hpp"
#include "anatembed/tensor_io.hpp"
#include "json.hpp"

namespace anatembed::trainer {

// Adam with optional rectified variance warmup. Moments are stored as f32
// but every update is computed in double.
struct Optim {
  int64_t step = 0;
  std::vector<std::vector<float>> m, v;

  void init(const net::Encoder& enc) {
    step = 0;
    m.clear();
    v.clear();
    for (auto& [name, t] : enc.params) {
      m.emplace_back((size_t)t.size(), 0.0f);
      v.emplace_back((size_t)t.size(), 0.0f);
    }
  }

  void update(net::Encoder& enc, double lr, bool radam) {
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++step;
    double bc1 = 1.0 - std::pow(b1, (double)step);
    double bc2 = 1.0 - std::pow(b2, (double)step);
    double rho_inf = 2.0 / (1.0 - b2) - 1.0;
    double rho = rho_inf - 2.0 * (double)step * std::pow(b2, (double)step) / bc2;
    bool rectified = !radam || rho > 4.0;
    double rect = 1.0;
    if (radam && rectified)
      rect = std::sqrt((rho - 4.0) * (rho - 2.0) * rho_inf /
                       ((rho_inf - 4.0) * (rho_inf - 2.0) * rho));
    for (size_t pi = 0; pi < enc.params.size(); ++pi) {
      Tensor& t = enc.params[pi].second;
      float* w = t.data();
      const std::vector<float>& g = t.grad_vec();
      if (g.empty()) continue;
      float* mm = m[pi].data();
      float* vv = v[pi].data();
      for (int64_t i = 0; i < t.size(); ++i) {
        double gi = (double)g[(size_t)i];
        double mi = b1 * (double)mm[(size_t)i] + (1.0 - b1) * gi;
        double vi = b2 * (double)vv[(size_t)i] + (1.0 - b2) * gi * gi;
        mm[(size_t)i] = (float)mi;
        vv[(size_t)i] = (float)vi;
        double mhat = mi / bc1;
        if (!radam) {
          w[(size_t)i] -= (float)(lr * mhat / (std::sqrt(vi / bc2) + eps));
        } else if (rectified) {
          w[(size_t)i] -= (float)(lr * rect * mhat / (std::sqrt(vi / bc2) + eps));
        } else {
          w[(size_t)i] -= (float)(lr * mhat);
        }
      }
    }
  }
};

namespace detail {

inline int64_t flatten_cell(const Shape& cell, const Shape& cell_shape) {
  Shape strides = row_strides(cell_shape);
  int64_t f = 0;
  for (size_t a = 0; a < cell.size(); ++a) f += cell[a] * strides[a];
  return f;
}

inline Shape spatial_of(const net::EmbeddingField& f) {
  return Shape(f.values.shape().begin() + 1, f.values.shape().end());
}

// One training view: rendered patch plus everything selection needs.
struct View {
  int image_id = 0;
  const augment::SpatialTransform* tf = nullptr;
  const std::vector<uint8_t>* body = nullptr;
  Shape patch_size;
  net::EmbeddingField global, local;  // global may be undefined in ablation
  contrast::SelField sel_g, sel_l;
  std::vector<int64_t> loc2glob;  // local cell -> global cell (combined map)
};

// Anchor rows {n, E} gathered from field columns, then sims = rows x field.
inline std::vector<float> sim_rows(const std::vector<int64_t>& anchor_cells,
                                   const net::EmbeddingField& anchors_from,
                                   const net::EmbeddingField& against) {
  int64_t e_dim = anchors_from.values.shape()[0];
  int64_t ca = anchors_from.values.size() / e_dim;
  int64_t cb = against.values.size() / e_dim;
  int64_t n = (int64_t)anchor_cells.size();
  std::vector<float> rows((size_t)(n * e_dim));
  const float* src = anchors_from.values.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t e = 0; e < e_dim; ++e)
      rows[(size_t)(i * e_dim + e)] = src[e * ca + anchor_cells[(size_t)i]];
  std::vector<float> sims((size_t)(n * cb));
  diffcore::gemm(rows.data(), against.values.data(), sims.data(), n, e_dim, cb);
  return sims;
}

}  // namespace detail

struct IterationStats {
  double global_loss = 0.0;  // per-anchor means
  double local_loss = 0.0;
  int64_t global_terms = 0, local_terms = 0;
};

// One optimization step, shared by training and the tests that need to poke
// at a single iteration. `it` is 1-based and fully determines every draw.
inline IterationStats run_iteration(net::Encoder& enc, Optim& opt,
                                    const config::RunConfig& rc,
                                    const std::vector<phantom::Phantom>& data,
                                    int64_t it) {
  const config::TrainConfig& tc = rc.train;
  const bool use_global = !tc.no_coarse_to_fine;
  require(!data.empty(), "trainer: empty dataset");
  int dim = data[0].dim;
  VecD spacing = data[0].spacing;

  rng::Stream img_rs(tc.seed, rng::stream_id(0xB001, (uint64_t)it));
  int64_t b = tc.batch_size;
  std::vector<int64_t> img_ids((size_t)b);
  for (int64_t i = 0; i < b; ++i)
    img_ids[(size_t)i] = img_rs.below((int64_t)data.size());

  // Render pairs and run the encoder on all 2b patches.
  std::vector<augment::PatchPair> pairs;
  pairs.reserve((size_t)b);
  std::vector<detail::View> views((size_t)(2 * b));
  for (int64_t i = 0; i < b; ++i) {
    const phantom::Phantom& ph = data[(size_t)img_ids[(size_t)i]];
    rng::Stream aug_rs(tc.seed, rng::stream_id(0xB002, (uint64_t)it, (uint64_t)i));
    pairs.push_back(augment::sample_pair(ph, rc.augment, aug_rs));
  }
  std::vector<Tensor> g_fields, l_fields;
  for (int64_t i = 0; i < b; ++i) {
    const augment::PatchPair& pr = pairs[(size_t)i];
    for (int side = 0; side < 2; ++side) {
      detail::View& vw = views[(size_t)(2 * i + side)];
      vw.image_id = (int)img_ids[(size_t)i];
      vw.tf = side == 0 ? &pr.tf_a : &pr.tf_b;
      vw.body = side == 0 ? &pr.body_a : &pr.body_b;
      vw.patch_size = pr.patch_size;
      Shape xshape = {1};
      xshape.insert(xshape.end(), pr.patch_size.begin(), pr.patch_size.end());
      Tensor x = Tensor::from(xshape, side == 0 ? pr.patch_a : pr.patch_b);
      net::EncoderOut out = net::forward(enc, x, use_global, true);
      // catch divergence before NaN similarities corrupt selection
      for (const net::EmbeddingField* f :
           {out.global ? &*out.global : nullptr, &*out.local}) {
        if (!f) continue;
        for (int64_t j = 0; j < f->values.size(); ++j)
          require(std::isfinite(f->values.data()[j]),
                  "trainer: non-finite embedding at iteration ", it, " (seed ",
                  tc.seed, ")");
      }
      vw.local = *out.local;
      l_fields.push_back(vw.local.values);
      vw.sel_l.values = vw.local.values.data();
      vw.sel_l.embed_dim = vw.local.values.shape()[0];
      vw.sel_l.cells = vw.local.values.size() / vw.sel_l.embed_dim;
      vw.sel_l.cell_mm = contrast::cell_positions_mm(
          detail::spatial_of(vw.local), vw.local.stride, *vw.tf, spacing);
      vw.sel_l.image_id = vw.image_id;
      vw.sel_l.tensor_index = (int)(2 * i + side);
      if (use_global) {
        vw.global = *out.global;
        g_fields.push_back(vw.global.values);
        vw.sel_g.values = vw.global.values.data();
        vw.sel_g.embed_dim = vw.global.values.shape()[0];
        vw.sel_g.cells = vw.global.values.size() / vw.sel_g.embed_dim;
        vw.sel_g.cell_mm = contrast::cell_positions_mm(
            detail::spatial_of(vw.global), vw.global.stride, *vw.tf, spacing);
        vw.sel_g.image_id = vw.image_id;
        vw.sel_g.tensor_index = (int)(2 * i + side);
        // nearest global cell for each local cell, for the combined maps
        Shape lsh = detail::spatial_of(vw.local);
        Shape gsh = detail::spatial_of(vw.global);
        vw.loc2glob.resize((size_t)numel(lsh));
        Shape idx(lsh.size(), 0);
        int64_t f = 0;
        do {
          VecD px(idx.size());
          for (size_t a = 0; a < idx.size(); ++a)
            px[a] = (double)(idx[a] * vw.local.stride[a]);
          vw.loc2glob[(size_t)f++] =
              detail::flatten_cell(vw.global.px_to_cell(px), gsh);
        } while (next_index(idx, lsh));
      }
    }
  }

  std::vector<contrast::SelField> all_g;
  if (use_global)
    for (auto& vw : views) all_g.push_back(vw.sel_g);

  std::vector<contrast::LossTerm> g_terms, l_terms;
  for (int64_t i = 0; i < b; ++i) {
    const augment::PatchPair& pr = pairs[(size_t)i];
    rng::Stream pos_rs(tc.seed, rng::stream_id(0xB003, (uint64_t)it, (uint64_t)i));
    auto pos = contrast::sample_positive_pairs(pr, tc.n_pos, pos_rs);
    for (int dir = 0; dir < 2; ++dir) {
      detail::View& va = views[(size_t)(2 * i + dir)];
      detail::View& vb = views[(size_t)(2 * i + (1 - dir))];
      rng::Stream neg_rs(tc.seed, rng::stream_id(0xB004, (uint64_t)it, (uint64_t)i,
                                                 (uint64_t)dir));
      // anchor/positive pixels in this direction
      std::vector<VecD> apx, ppx;
      bool self_positive = !pos.has_value();
      if (pos) {
        for (const contrast::PosPair& pp : *pos) {
          apx.push_back(dir == 0 ? pp.a : pp.b);
          ppx.push_back(dir == 0 ? pp.b : pp.a);
        }
      } else {
        apx = contrast::sample_body_pixels(*va.body, va.patch_size, tc.n_pos,
                                           pos_rs);
        ppx = apx;
      }
      if (apx.empty()) continue;
      int64_t n = (int64_t)apx.size();

      std::vector<int64_t> ag((size_t)n), pg((size_t)n), al((size_t)n),
          pl((size_t)n);
      Shape lsh_a = detail::spatial_of(va.local), lsh_b = detail::spatial_of(vb.local);
      for (int64_t k = 0; k < n; ++k) {
        al[(size_t)k] =
            detail::flatten_cell(va.local.px_to_cell(apx[(size_t)k]), lsh_a);
        pl[(size_t)k] = self_positive
                            ? al[(size_t)k]
                            : detail::flatten_cell(
                                  vb.local.px_to_cell(ppx[(size_t)k]), lsh_b);
      }
      if (use_global) {
        Shape gsh_a = detail::spatial_of(va.global),
              gsh_b = detail::spatial_of(vb.global);
        for (int64_t k = 0; k < n; ++k) {
          ag[(size_t)k] =
              detail::flatten_cell(va.global.px_to_cell(apx[(size_t)k]), gsh_a);
          pg[(size_t)k] = self_positive
                              ? ag[(size_t)k]
                              : detail::flatten_cell(
                                    vb.global.px_to_cell(ppx[(size_t)k]), gsh_b);
        }
      }

      // similarity rows for selection
      std::vector<float> sg_a, sg_b, sl_a, sl_b;
      if (use_global) {
        sg_a = detail::sim_rows(ag, va.global, va.global);
        sg_b = detail::sim_rows(ag, va.global, vb.global);
      }
      sl_a = detail::sim_rows(al, va.local, va.local);
      sl_b = detail::sim_rows(al, va.local, vb.local);

      int64_t lc_a = va.sel_l.cells, lc_b = vb.sel_l.cells;
      std::vector<float> comb_a((size_t)lc_a), comb_b((size_t)lc_b);
      for (int64_t k = 0; k < n; ++k) {
        VecD anchor_mm = va.tf->forward(apx[(size_t)k]);
        for (size_t a = 0; a < anchor_mm.size(); ++a) anchor_mm[a] *= spacing[a];

        if (use_global) {
          const float* ra = &sg_a[(size_t)(k * va.sel_g.cells)];
          const float* rb = &sg_b[(size_t)(k * vb.sel_g.cells)];
          contrast::LossTerm term;
          term.anchor_field = va.sel_g.tensor_index;
          term.anchor_cell = ag[(size_t)k];
          term.pos_field = self_positive ? va.sel_g.tensor_index : vb.sel_g.tensor_index;
          term.pos_cell = pg[(size_t)k];
          std::vector<contrast::NegRef> hard;
          if (tc.no_global_hard)
            hard = contrast::random_own_pair(
                va.sel_g, vb.sel_g, anchor_mm, tc.delta_mm, ag[(size_t)k],
                self_positive ? -1 : pg[(size_t)k], tc.n_neg, neg_rs);
          else
            hard = contrast::hard_negatives(
                ra, va.sel_g, rb, vb.sel_g, anchor_mm, tc.delta_mm,
                ag[(size_t)k], self_positive ? -1 : pg[(size_t)k], tc.n_neg);
          term.negs = std::move(hard);
          if (!tc.no_global_diverse) {
            auto div = contrast::diverse_negatives(all_g, va.image_id, anchor_mm,
                                                   tc.delta_mm, tc.n_rand_g, neg_rs);
            term.negs.insert(term.negs.end(), div.begin(), div.end());
          }
          g_terms.push_back(std::move(term));
        }

        {
          const float* la = &sl_a[(size_t)(k * lc_a)];
          const float* lb = &sl_b[(size_t)(k * lc_b)];
          contrast::LossTerm term;
          term.anchor_field = va.sel_l.tensor_index;
          term.anchor_cell = al[(size_t)k];
          term.pos_field = self_positive ? va.sel_l.tensor_index : vb.sel_l.tensor_index;
          term.pos_cell = pl[(size_t)k];
          if (tc.no_local_hard) {
            term.negs = contrast::random_own_pair(
                va.sel_l, vb.sel_l, anchor_mm, tc.delta_mm, al[(size_t)k],
                self_positive ? -1 : pl[(size_t)k], tc.n_neg, neg_rs);
          } else {
            const float* ca = la;
            const float* cb = lb;
            if (use_global) {
              const float* ra = &sg_a[(size_t)(k * va.sel_g.cells)];
              const float* rb = &sg_b[(size_t)(k * vb.sel_g.cells)];
              for (int64_t c = 0; c < lc_a; ++c)
                comb_a[(size_t)c] = la[c] + ra[va.loc2glob[(size_t)c]];
              for (int64_t c = 0; c < lc_b; ++c)
                comb_b[(size_t)c] = lb[c] + rb[vb.loc2glob[(size_t)c]];
              ca = comb_a.data();
              cb = comb_b.data();
            }
            term.negs = contrast::local_negatives(
                ca, va.sel_l, cb, vb.sel_l, anchor_mm, tc.delta_mm,
                al[(size_t)k], self_positive ? -1 : pl[(size_t)k], tc.n_cand_l,
                tc.n_neg, !tc.no_local_diverse, neg_rs);
          }
          l_terms.push_back(std::move(term));
        }
      }
    }
  }

  IterationStats st;
  st.global_terms = (int64_t)g_terms.size();
  st.local_terms = (int64_t)l_terms.size();
  Tensor total;
  if (use_global && !g_terms.empty()) {
    Tensor lg = contrast::info_nce_batch(g_fields, std::move(g_terms), tc.tau);
    st.global_loss = (double)lg.item() / (double)st.global_terms;
    total = ops::mul_scalar(lg, 1.0 / (double)st.global_terms);
  }
  if (!l_terms.empty()) {
    Tensor ll = contrast::info_nce_batch(l_fields, std::move(l_terms), tc.tau);
    st.local_loss = (double)ll.item() / (double)st.local_terms;
    Tensor scaled = ops::mul_scalar(ll, 1.0 / (double)st.local_terms);
    total = total.defined() ? ops::add(total, scaled) : scaled;
  }
  require(total.defined(), "trainer: iteration ", it,
          " produced no loss terms (empty body masks everywhere?)");
  require(std::isfinite(st.global_loss) && std::isfinite(st.local_loss),
          "trainer: non-finite loss at iteration ", it, " (seed ", tc.seed, ")");

  for (auto& [name, t] : enc.params) t.zero_grad();
  backward(total);
  opt.update(enc, tc.lr, tc.radam);
  return st;
}

namespace detail {

inline void save_optim(const std::string& dir, const net::Encoder& enc,
                       const Optim& opt, int64_t iteration) {
  std::filesystem::create_directories(dir + "/optim/m");
  std::filesystem::create_directories(dir + "/optim/v");
  for (size_t pi = 0; pi < enc.params.size(); ++pi) {
    const auto& [name, t] = enc.params[pi];
    io::write_pet(dir + "/optim/m/" + name + ".pet", t.shape(), opt.m[pi]);
    io::write_pet(dir + "/optim/v/" + name + ".pet", t.shape(), opt.v[pi]);
  }
  nlohmann::json s;
  s["format"] = "anatembed-optim-v1";
  s["step"] = opt.step;
  s["iteration"] = iteration;
  io::write_text_atomic(dir + "/optim/state.json", s.dump(2) + "\n");
}

inline int64_t load_optim(const std::string& dir, const net::Encoder& enc,
                          Optim& opt) {
  nlohmann::json s;
  try {
    s = nlohmann::json::parse(io::read_text(dir + "/optim/state.json"));
  } catch (const nlohmann::json::exception& e) {
    fail("trainer: bad optimizer state in ", dir, ": ", e.what());
  }
  require(s.value("format", "") == "anatembed-optim-v1",
          "trainer: unrecognized optimizer state format in ", dir);
  opt.init(enc);
  opt.step = s.at("step").get<int64_t>();
  for (size_t pi = 0; pi < enc.params.size(); ++pi) {
    const auto& [name, t] = enc.params[pi];
    auto [ms, mv] = io::read_pet_f32(dir + "/optim/m/" + name + ".pet");
    auto [vs, vv] = io::read_pet_f32(dir + "/optim/v/" + name + ".pet");
    require(ms == t.shape() && vs == t.shape(),
            "trainer: optimizer moment shape mismatch for ", name);
    opt.m[pi] = std::move(mv);
    opt.v[pi] = std::move(vv);
  }
  return s.at("iteration").get<int64_t>();
}

}  // namespace detail

struct TrainOutcome {
  int64_t iterations = 0;
  double last_global_loss = 0.0, last_local_loss = 0.0;
};

// Full run: fresh or resumed, checkpoints into out_dir, loss log rewritten
// deterministically at the end. Wall-clock timing goes to a sidecar file so
// everything else is byte reproducible.
inline TrainOutcome train(const config::RunConfig& rc,
                          const std::vector<phantom::Phantom>& data,
                          const std::string& out_dir, bool resume = false) {
  auto t0 = std::chrono::steady_clock::now();
  net::Encoder enc;
  Optim opt;
  int64_t start_iter = 0;
  std::vector<std::string> log_rows;
  if (resume) {
    config::RunConfig ck;
    enc = net::load_checkpoint(out_dir, &ck);
    require(ck.encoder.dim == rc.encoder.dim &&
                ck.encoder.embed_dim == rc.encoder.embed_dim,
            "trainer: resume config does not match checkpoint");
    start_iter = detail::load_optim(out_dir, enc, opt);
    std::istringstream old_log(io::read_text(out_dir + "/train_log.csv"));
    std::string line;
    while (std::getline(old_log, line)) {
      if (line.empty() || line.starts_with("iteration")) continue;
      int64_t row_it =
          config::parse_i64("train_log.iteration", line.substr(0, line.find(',')));
      // drop final-row entries from the interrupted run unless they land on
      // the periodic schedule of the full run
      bool scheduled = row_it % rc.train.log_every == 0 ||
                       row_it == rc.train.iterations;
      if (row_it <= start_iter && scheduled) log_rows.push_back(line);
    }
  } else {
    enc = net::make_encoder(rc.encoder, rc.train.seed);
    opt.init(enc);
  }

  TrainOutcome out;
  for (int64_t it = start_iter + 1; it <= rc.train.iterations; ++it) {
    IterationStats st = run_iteration(enc, opt, rc, data, it);
    out.iterations = it;
    out.last_global_loss = st.global_loss;
    out.last_local_loss = st.local_loss;
    if (it % rc.train.log_every == 0 || it == rc.train.iterations)
      log_rows.push_back(strcat(it, ",", config::fmt_f64(st.global_loss), ",",
                                config::fmt_f64(st.local_loss)));
    if (it % rc.train.checkpoint_every == 0 || it == rc.train.iterations) {
      net::save_checkpoint(out_dir, rc, enc);
      detail::save_optim(out_dir, enc, opt, it);
    }
  }
  if (start_iter >= rc.train.iterations) {
    // nothing to do; still refresh the checkpoint files for consistency
    net::save_checkpoint(out_dir, rc, enc);
    detail::save_optim(out_dir, enc, opt, start_iter);
    out.iterations = start_iter;
  }

  std::string log = "iteration,global_loss,local_loss\n";
  for (const std::string& row : log_rows) log += row + "\n";
  io::write_text_atomic(out_dir + "/train_log.csv", log);

  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                    .count();
  nlohmann::json tj;
  tj["wall_seconds"] = secs;
  tj["iterations_run"] = rc.train.iterations - start_iter;
  io::write_text_atomic(out_dir + "/timing.json", tj.dump(2) + "\n");
  return out;
}

}  // namespace anatembed::trainer
