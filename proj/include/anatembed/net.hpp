#pragma once

#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "anatembed/config.hpp"
#include "anatembed/ops.hpp"
#include "anatembed/rng.hpp"
#include "anatembed/tensor.hpp"
#include "anatembed/tensor_io.hpp"
#include "json.hpp"

namespace anatembed::net {

namespace detail {

inline uint64_t name_hash(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace detail

// Backbone weights in a fixed order so optimizer updates and checkpoints
// iterate identically everywhere. All convs are bias free.
struct Encoder {
  config::EncoderConfig cfg;
  std::vector<std::pair<std::string, Tensor>> params;

  Tensor& param(const std::string& name) {
    for (auto& [k, t] : params)
      if (k == name) return t;
    fail("encoder: no parameter named ", name);
  }
  const Tensor& param(const std::string& name) const {
    return const_cast<Encoder*>(this)->param(name);
  }
};

namespace detail {

inline Shape conv_w_shape(const config::EncoderConfig& cfg, int64_t cout,
                          int64_t cin, int64_t k) {
  Shape s = {cout, cin};
  for (int a = 0; a < cfg.dim; ++a) s.push_back(k);
  return s;
}

// Parameter names with shapes, in forward order.
inline std::vector<std::pair<std::string, Shape>> param_plan(
    const config::EncoderConfig& cfg) {
  std::vector<std::pair<std::string, Shape>> plan;
  size_t n = cfg.stage_channels.size();
  require(n >= 3, "encoder: need at least 3 stage channels, got ", n);
  plan.emplace_back("stem.w", conv_w_shape(cfg, cfg.stage_channels[0], 1, 3));
  for (size_t i = 1; i < n; ++i) {
    std::string p = strcat("stage", i);
    plan.emplace_back(p + ".a.w", conv_w_shape(cfg, cfg.stage_channels[i],
                                               cfg.stage_channels[i - 1], 3));
    plan.emplace_back(p + ".b.w", conv_w_shape(cfg, cfg.stage_channels[i],
                                               cfg.stage_channels[i], 3));
  }
  for (size_t i = 1; i < n; ++i)
    plan.emplace_back(strcat("lat", i, ".w"),
                      conv_w_shape(cfg, cfg.fpn_channels, cfg.stage_channels[i], 1));
  plan.emplace_back("head_g.w", conv_w_shape(cfg, cfg.embed_dim, cfg.fpn_channels, 3));
  plan.emplace_back("head_l.w", conv_w_shape(cfg, cfg.embed_dim, cfg.fpn_channels, 3));
  return plan;
}

}  // namespace detail

// He-uniform init, one counter stream per tensor keyed by parameter name so
// the draw is independent of construction order.
inline Encoder make_encoder(const config::EncoderConfig& cfg, uint64_t seed) {
  cfg.stage_factors();  // validates stride feasibility
  Encoder enc;
  enc.cfg = cfg;
  for (auto& [name, shape] : detail::param_plan(cfg)) {
    int64_t fan_in = 1;
    for (size_t a = 1; a < shape.size(); ++a) fan_in *= shape[a];
    double bound = std::sqrt(6.0 / (double)fan_in);
    rng::Stream rs(seed, rng::stream_id(0x696e6974, detail::name_hash(name)));
    std::vector<float> w((size_t)numel(shape));
    for (float& v : w) v = (float)rs.uniform(-bound, bound);
    Tensor t = Tensor::from(shape, std::move(w));
    t.set_requires_grad(true);
    enc.params.emplace_back(name, std::move(t));
  }
  return enc;
}

// Embedding field at a fixed stride; cell index i sits at pixel stride*i
// (kernel-3 stride-2 pad-1 convs keep index 0 anchored at pixel 0).
struct EmbeddingField {
  Tensor values;  // {embed_dim, cells...}
  Shape stride;

  VecD cell_to_px(const Shape& cell) const {
    VecD p(cell.size());
    for (size_t a = 0; a < cell.size(); ++a)
      p[a] = (double)(cell[a] * stride[a]);
    return p;
  }
  Shape px_to_cell(const VecD& px) const {
    const Shape& vs = values.shape();
    Shape cell(px.size());
    for (size_t a = 0; a < px.size(); ++a) {
      int64_t c = (int64_t)std::llround(px[a] / (double)stride[a]);
      cell[a] = std::clamp<int64_t>(c, 0, vs[a + 1] - 1);
    }
    return cell;
  }
};

struct EncoderOut {
  std::optional<EmbeddingField> global, local;
};

// Coarse-to-fine forward. The top pyramid level feeds only the global head;
// the level below restarts from its lateral alone, so the local path never
// sees the top stage. Finer levels add in the upsampled coarser level.
inline EncoderOut forward(const Encoder& enc, const Tensor& image,
                          bool want_global = true, bool want_local = true) {
  const config::EncoderConfig& cfg = enc.cfg;
  const Shape& xs = image.shape();
  require((int)xs.size() == cfg.dim + 1 && xs[0] == 1,
          "encoder: expected image shaped {1, spatial...}, got ", shape_str(xs));
  for (int a = 0; a < cfg.dim; ++a)
    require(xs[(size_t)a + 1] % cfg.global_stride[(size_t)a] == 0,
            "encoder: image extent ", xs[(size_t)a + 1],
            " not divisible by global stride ", cfg.global_stride[(size_t)a]);

  std::vector<Shape> factors = cfg.stage_factors();
  size_t top = cfg.stage_channels.size() - 1;
  size_t local_need = top >= 2 ? top - 1 : top;
  size_t deepest = want_global ? top : local_need;

  Shape ones((size_t)cfg.dim, 1), pad1((size_t)cfg.dim, 1), pad0((size_t)cfg.dim, 0);
  Tensor x = ops::relu(ops::conv(image, enc.param("stem.w"), ones, pad1));
  std::vector<Tensor> feat(top + 1);
  for (size_t i = 1; i <= deepest; ++i) {
    Shape entry((size_t)cfg.dim), second((size_t)cfg.dim);
    for (int a = 0; a < cfg.dim; ++a) {
      int64_t f = factors[i][(size_t)a];
      entry[(size_t)a] = std::min<int64_t>(f, 2);
      second[(size_t)a] = f / entry[(size_t)a];
    }
    x = ops::relu(ops::conv(x, enc.param(strcat("stage", i, ".a.w")), entry, pad1));
    x = ops::relu(ops::conv(x, enc.param(strcat("stage", i, ".b.w")), second, pad1));
    feat[i] = x;
  }

  auto lateral = [&](size_t i) {
    return ops::conv(feat[i], enc.param(strcat("lat", i, ".w")), ones, pad0);
  };

  EncoderOut out;
  if (want_global) {
    Tensor fg = ops::l2_normalize(
        ops::conv(lateral(top), enc.param("head_g.w"), ones, pad1));
    out.global = EmbeddingField{fg, cfg.global_stride};
  }
  if (want_local) {
    Tensor p = lateral(local_need);
    for (size_t i = local_need; i-- > 1;)
      p = ops::add(lateral(i), ops::upsample_nearest(p, factors[i + 1]));
    Tensor fl =
        ops::l2_normalize(ops::conv(p, enc.param("head_l.w"), ones, pad1));
    out.local = EmbeddingField{fl, cfg.local_stride};
  }
  return out;
}

inline void save_checkpoint(const std::string& dir, const config::RunConfig& rc,
                            const Encoder& enc) {
  std::filesystem::create_directories(dir + "/params");
  nlohmann::json m;
  m["format"] = "anatembed-checkpoint-v1";
  nlohmann::json conf = nlohmann::json::object();
  for (auto& [k, v] : rc.to_map()) conf[k] = v;
  m["config"] = conf;
  nlohmann::json names = nlohmann::json::array();
  for (auto& [name, t] : enc.params) names.push_back(name);
  m["params"] = names;
  for (auto& [name, t] : enc.params) {
    std::vector<float> vals(t.data(), t.data() + t.size());
    io::write_pet(dir + "/params/" + name + ".pet", t.shape(), vals);
  }
  io::write_text_atomic(dir + "/manifest.json", m.dump(2) + "\n");
}

inline Encoder load_checkpoint(const std::string& dir, config::RunConfig* rc_out) {
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(io::read_text(dir + "/manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    fail("checkpoint: bad manifest in ", dir, ": ", e.what());
  }
  require(m.value("format", "") == "anatembed-checkpoint-v1",
          "checkpoint: unrecognized manifest format in ", dir);
  std::map<std::string, std::string> kv;
  for (auto& [k, v] : m.at("config").items()) kv[k] = v.get<std::string>();
  config::RunConfig rc = config::RunConfig::resolve(kv);
  Encoder enc = make_encoder(rc.encoder, 0);
  require(m.at("params").size() == enc.params.size(),
          "checkpoint: expected ", enc.params.size(), " params, manifest lists ",
          m.at("params").size());
  for (auto& [name, t] : enc.params) {
    auto [shape, vals] = io::read_pet_f32(dir + "/params/" + name + ".pet");
    require(shape == t.shape(), "checkpoint: param ", name, " has shape ",
            shape_str(shape), ", expected ", shape_str(t.shape()));
    std::copy(vals.begin(), vals.end(), t.data());
  }
  if (rc_out) *rc_out = rc;
  return enc;
}

}  // namespace anatembed::net
