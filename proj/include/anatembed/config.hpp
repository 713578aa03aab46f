#pragma once

#include <charconv>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "anatembed/common.hpp"

namespace anatembed::config {

// --- properties dialect ---------------------------------------------------
// One `key = value` per line, `#` starts a comment, keys are dotted paths.
// Parsing is strict: malformed lines and duplicate keys are errors; unknown
// keys are rejected during resolution.

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::map<std::string, std::string> parse_properties(const std::string& text) {
  std::map<std::string, std::string> kv;
  size_t pos = 0;
  int lineno = 0;
  while (pos <= text.size()) {
    size_t eol = text.find('\n', pos);
    std::string line = text.substr(pos, eol == std::string::npos ? eol : eol - pos);
    pos = eol == std::string::npos ? text.size() + 1 : eol + 1;
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    require(eq != std::string::npos, "config: line ", lineno,
            " has no '=': \"", line, "\"");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    require(!key.empty(), "config: line ", lineno, " has an empty key");
    require(!kv.count(key), "config: duplicate key '", key, "' at line ", lineno);
    kv[key] = value;
  }
  return kv;
}

// --- typed value parsing ----------------------------------------------------

inline int64_t parse_i64(const std::string& key, const std::string& v) {
  int64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  require(ec == std::errc() && p == v.data() + v.size(),
          "config: key '", key, "' expects an integer, got \"", v, "\"");
  return out;
}

inline uint64_t parse_u64(const std::string& key, const std::string& v) {
  uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  require(ec == std::errc() && p == v.data() + v.size(),
          "config: key '", key, "' expects an unsigned integer, got \"", v, "\"");
  return out;
}

inline double parse_f64(const std::string& key, const std::string& v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  require(ec == std::errc() && p == v.data() + v.size(),
          "config: key '", key, "' expects a number, got \"", v, "\"");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  fail("config: key '", key, "' expects true or false, got \"", v, "\"");
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> parts;
  size_t pos = 0;
  while (true) {
    size_t c = v.find(',', pos);
    parts.push_back(trim(v.substr(pos, c == std::string::npos ? c : c - pos)));
    if (c == std::string::npos) break;
    pos = c + 1;
  }
  return parts;
}

inline std::vector<int64_t> parse_i64_list(const std::string& key, const std::string& v) {
  std::vector<int64_t> out;
  for (const std::string& p : split_list(v)) out.push_back(parse_i64(key, p));
  return out;
}

inline std::vector<double> parse_f64_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const std::string& p : split_list(v)) out.push_back(parse_f64(key, p));
  return out;
}

inline std::string fmt_f64(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

template <class T>
std::string fmt_list(const std::vector<T>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    if constexpr (std::is_same_v<T, double>)
      out += fmt_f64(v[i]);
    else
      out += std::to_string(v[i]);
  }
  return out;
}

// --- config sections --------------------------------------------------------

struct TrainConfig {
  int64_t batch_size = 4;
  int64_t iterations = 2000;
  double lr = 5e-4;
  double tau = 0.5;
  int64_t n_pos = 50;
  int64_t n_neg = 200;
  int64_t n_rand_g = 500;
  int64_t n_cand_l = 2000;
  double delta_mm = 3.0;
  uint64_t seed = 0;
  bool radam = false;
  int64_t log_every = 10;
  int64_t checkpoint_every = 500;
  bool no_coarse_to_fine = false;
  bool no_global_hard = false;
  bool no_global_diverse = false;
  bool no_local_hard = false;
  bool no_local_diverse = false;
};

struct AugmentConfig {
  Shape patch_size = {32, 32};
  double scale_lo = 0.6, scale_hi = 1.4;
  double rotation_deg = 30.0;
  double elastic_amplitude = 0.05;
  int64_t elastic_grid = 4;
  double gamma_lo = 0.7, gamma_hi = 1.4;
  double noise_std = 0.05;
  bool flip_enabled = false;
  bool scale_enabled = true;
  bool intensity_enabled = true;
  bool deform_rotate_enabled = true;
};

struct EncoderConfig {
  int dim = 2;
  std::vector<int64_t> stage_channels = {8, 16, 32, 48};
  Shape global_stride = {8, 8};
  Shape local_stride = {2, 2};
  int64_t embed_dim = 32;
  int64_t fpn_channels = 16;

  // Per-stage, per-axis downsampling factors. Stage 0 keeps full resolution,
  // stage 1 reaches local_stride, later stages share global/local between
  // them with factors in {1, 2, 4}, filled from the last stage backwards.
  std::vector<Shape> stage_factors() const {
    size_t n = stage_channels.size();
    std::vector<Shape> f(n, Shape((size_t)dim, 1));
    for (int a = 0; a < dim; ++a) {
      f[1][(size_t)a] = local_stride[(size_t)a];
      int64_t r = global_stride[(size_t)a] / local_stride[(size_t)a];
      for (size_t i = n - 1; i >= 2 && r > 1; --i) {
        f[i][(size_t)a] = 2;
        r /= 2;
      }
      for (size_t i = n - 1; i >= 2 && r > 1; --i) {
        require(f[i][(size_t)a] * 2 <= 4, "encoder: global/local stride ratio ",
                global_stride[(size_t)a] / local_stride[(size_t)a],
                " on axis ", a, " is too large for ", n, " stages");
        f[i][(size_t)a] *= 2;
        r /= 2;
      }
      require(r == 1, "encoder: global/local stride ratio on axis ", a,
              " not expressible with ", n, " stages");
    }
    return f;
  }
};

struct InferConfig {
  double threshold = 1.0;
  Shape tile_size = {256, 256};
  Shape tile_overlap = {64, 64};
};

struct EvalConfig {
  int64_t holdout = 20;
  double box_halfwidth = 4.0;
  std::string variant = "full";
};

struct RunConfig {
  TrainConfig train;
  AugmentConfig augment;
  EncoderConfig encoder;
  InferConfig infer;
  EvalConfig eval;

  static RunConfig defaults(int dim) {
    require(dim == 2 || dim == 3, "config: encoder.dim must be 2 or 3, got ", dim);
    RunConfig c;
    c.encoder.dim = dim;
    if (dim == 3) {
      c.augment.patch_size = {16, 48, 48};
      c.encoder.global_stride = {4, 16, 16};
      c.encoder.local_stride = {2, 2, 2};
      c.infer.tile_size = {64, 128, 128};
      c.infer.tile_overlap = {24, 48, 48};
    }
    return c;
  }

  void validate() const;
  std::map<std::string, std::string> to_map() const;
  static RunConfig resolve(const std::map<std::string, std::string>& kv);
  std::string echo() const {
    std::string out;
    for (const auto& [k, v] : to_map()) out += k + " = " + v + "\n";
    return out;
  }
};

inline void RunConfig::validate() const {
  const auto& t = train;
  require(t.batch_size >= 1, "config: train.batch_size must be >= 1");
  require(t.iterations >= 0, "config: train.iterations must be >= 0");
  require(t.lr > 0, "config: train.lr must be > 0");
  require(t.tau > 0, "config: train.tau must be > 0");
  require(t.n_pos >= 1, "config: train.n_pos must be >= 1");
  require(t.n_neg >= 1, "config: train.n_neg must be >= 1");
  require(t.n_rand_g >= 0, "config: train.n_rand_g must be >= 0");
  require(t.n_cand_l >= t.n_neg, "config: train.n_cand_l (", t.n_cand_l,
          ") must be >= train.n_neg (", t.n_neg, ")");
  require(t.delta_mm >= 0, "config: train.delta_mm must be >= 0");
  require(t.log_every >= 1, "config: train.log_every must be >= 1");
  require(t.checkpoint_every >= 1, "config: train.checkpoint_every must be >= 1");

  const auto& e = encoder;
  require(e.dim == 2 || e.dim == 3, "config: encoder.dim must be 2 or 3");
  require(e.stage_channels.size() >= 3, "config: encoder.stage_channels needs >= 3 stages");
  for (int64_t c : e.stage_channels)
    require(c >= 1, "config: encoder.stage_channels entries must be >= 1");
  require((int)e.global_stride.size() == e.dim, "config: encoder.global_stride needs ",
          e.dim, " entries");
  require((int)e.local_stride.size() == e.dim, "config: encoder.local_stride needs ",
          e.dim, " entries");
  for (int a = 0; a < e.dim; ++a) {
    require(e.local_stride[(size_t)a] >= 1, "config: encoder.local_stride must be >= 1");
    require(e.global_stride[(size_t)a] >= e.local_stride[(size_t)a],
            "config: encoder.global_stride must be >= local_stride per axis");
    require(e.global_stride[(size_t)a] % e.local_stride[(size_t)a] == 0,
            "config: encoder.global_stride must be a multiple of local_stride per axis");
    auto pow2 = [](int64_t v) { return v > 0 && (v & (v - 1)) == 0; };
    require(pow2(e.global_stride[(size_t)a]) && pow2(e.local_stride[(size_t)a]),
            "config: encoder strides must be powers of two");
  }
  e.stage_factors();  // throws when the ratio does not decompose
  require(e.embed_dim >= 1, "config: encoder.embed_dim must be >= 1");
  require(e.fpn_channels >= 1, "config: encoder.fpn_channels must be >= 1");

  const auto& a = augment;
  require((int)a.patch_size.size() == e.dim, "config: augment.patch_size needs ",
          e.dim, " entries");
  for (int ax = 0; ax < e.dim; ++ax) {
    require(a.patch_size[(size_t)ax] >= e.global_stride[(size_t)ax],
            "config: augment.patch_size must cover at least one global cell per axis");
    require(a.patch_size[(size_t)ax] % e.global_stride[(size_t)ax] == 0,
            "config: augment.patch_size must be divisible by encoder.global_stride");
  }
  require(a.scale_lo > 0 && a.scale_lo <= a.scale_hi,
          "config: augment.scale_range must satisfy 0 < lo <= hi");
  require(a.rotation_deg >= 0 && a.rotation_deg <= 180,
          "config: augment.rotation_deg must lie in [0, 180]");
  require(a.elastic_grid >= 1, "config: augment.elastic_grid must be >= 1");
  require(a.elastic_amplitude >= 0, "config: augment.elastic_amplitude must be >= 0");
  require(2.0 * a.elastic_amplitude * (double)a.elastic_grid <= 0.9,
          "config: elastic deformation too strong to invert; need "
          "2 * amplitude * grid <= 0.9");
  require(a.gamma_lo > 0 && a.gamma_lo <= a.gamma_hi,
          "config: augment.intensity_gamma_range must satisfy 0 < lo <= hi");
  require(a.noise_std >= 0, "config: augment.intensity_noise_std must be >= 0");

  const auto& inf = infer;
  require((int)inf.tile_size.size() == e.dim, "config: infer.tile_size needs ",
          e.dim, " entries");
  require((int)inf.tile_overlap.size() == e.dim, "config: infer.tile_overlap needs ",
          e.dim, " entries");
  for (int ax = 0; ax < e.dim; ++ax) {
    int64_t g = e.global_stride[(size_t)ax];
    require(inf.tile_size[(size_t)ax] % g == 0 && inf.tile_overlap[(size_t)ax] % g == 0,
            "config: infer.tile_size and tile_overlap must be divisible by "
            "encoder.global_stride");
    require(inf.tile_size[(size_t)ax] >= 2 * inf.tile_overlap[(size_t)ax] + g,
            "config: infer.tile_size must exceed twice the tile_overlap");
    require(inf.tile_overlap[(size_t)ax] >= 0, "config: infer.tile_overlap must be >= 0");
  }

  require(eval.holdout >= 1, "config: eval.holdout must be >= 1");
  require(eval.box_halfwidth >= 0, "config: eval.box_halfwidth must be >= 0");
  require(eval.variant == "full" || eval.variant == "global_only" ||
              eval.variant == "local_only",
          "config: eval.variant must be full, global_only or local_only");
}

inline std::map<std::string, std::string> RunConfig::to_map() const {
  std::map<std::string, std::string> m;
  m["train.batch_size"] = std::to_string(train.batch_size);
  m["train.iterations"] = std::to_string(train.iterations);
  m["train.lr"] = fmt_f64(train.lr);
  m["train.tau"] = fmt_f64(train.tau);
  m["train.n_pos"] = std::to_string(train.n_pos);
  m["train.n_neg"] = std::to_string(train.n_neg);
  m["train.n_rand_g"] = std::to_string(train.n_rand_g);
  m["train.n_cand_l"] = std::to_string(train.n_cand_l);
  m["train.delta_mm"] = fmt_f64(train.delta_mm);
  m["train.seed"] = std::to_string(train.seed);
  m["train.radam"] = train.radam ? "true" : "false";
  m["train.log_every"] = std::to_string(train.log_every);
  m["train.checkpoint_every"] = std::to_string(train.checkpoint_every);
  m["train.no_coarse_to_fine"] = train.no_coarse_to_fine ? "true" : "false";
  m["train.no_global_hard"] = train.no_global_hard ? "true" : "false";
  m["train.no_global_diverse"] = train.no_global_diverse ? "true" : "false";
  m["train.no_local_hard"] = train.no_local_hard ? "true" : "false";
  m["train.no_local_diverse"] = train.no_local_diverse ? "true" : "false";
  m["augment.patch_size"] = fmt_list(augment.patch_size);
  m["augment.scale_range"] = fmt_f64(augment.scale_lo) + "," + fmt_f64(augment.scale_hi);
  m["augment.rotation_deg"] = fmt_f64(augment.rotation_deg);
  m["augment.elastic_amplitude"] = fmt_f64(augment.elastic_amplitude);
  m["augment.elastic_grid"] = std::to_string(augment.elastic_grid);
  m["augment.intensity_gamma_range"] =
      fmt_f64(augment.gamma_lo) + "," + fmt_f64(augment.gamma_hi);
  m["augment.intensity_noise_std"] = fmt_f64(augment.noise_std);
  m["augment.flip_enabled"] = augment.flip_enabled ? "true" : "false";
  m["augment.scale_enabled"] = augment.scale_enabled ? "true" : "false";
  m["augment.intensity_enabled"] = augment.intensity_enabled ? "true" : "false";
  m["augment.deform_rotate_enabled"] = augment.deform_rotate_enabled ? "true" : "false";
  m["encoder.dim"] = std::to_string(encoder.dim);
  m["encoder.stage_channels"] = fmt_list(encoder.stage_channels);
  m["encoder.global_stride"] = fmt_list(encoder.global_stride);
  m["encoder.local_stride"] = fmt_list(encoder.local_stride);
  m["encoder.embed_dim"] = std::to_string(encoder.embed_dim);
  m["encoder.fpn_channels"] = std::to_string(encoder.fpn_channels);
  m["infer.threshold"] = fmt_f64(infer.threshold);
  m["infer.tile_size"] = fmt_list(infer.tile_size);
  m["infer.tile_overlap"] = fmt_list(infer.tile_overlap);
  m["eval.holdout"] = std::to_string(eval.holdout);
  m["eval.box_halfwidth"] = fmt_f64(eval.box_halfwidth);
  m["eval.variant"] = eval.variant;
  return m;
}

inline RunConfig RunConfig::resolve(const std::map<std::string, std::string>& kv) {
  int dim = 2;
  if (auto it = kv.find("encoder.dim"); it != kv.end())
    dim = (int)parse_i64("encoder.dim", it->second);
  RunConfig c = defaults(dim);
  std::set<std::string> known;
  for (const auto& [k, v] : c.to_map()) known.insert(k);
  for (const auto& [k, v] : kv)
    require(known.count(k), "config: unknown key '", k, "'");

  auto s = [&](const char* key) -> const std::string* {
    auto it = kv.find(key);
    return it == kv.end() ? nullptr : &it->second;
  };
  auto geti = [&](const char* key, int64_t& dst) {
    if (auto* v = s(key)) dst = parse_i64(key, *v);
  };
  auto getu = [&](const char* key, uint64_t& dst) {
    if (auto* v = s(key)) dst = parse_u64(key, *v);
  };
  auto getd = [&](const char* key, double& dst) {
    if (auto* v = s(key)) dst = parse_f64(key, *v);
  };
  auto getb = [&](const char* key, bool& dst) {
    if (auto* v = s(key)) dst = parse_bool(key, *v);
  };
  auto getil = [&](const char* key, Shape& dst) {
    if (auto* v = s(key)) dst = parse_i64_list(key, *v);
  };
  auto getrange = [&](const char* key, double& lo, double& hi) {
    if (auto* v = s(key)) {
      auto parts = parse_f64_list(key, *v);
      require(parts.size() == 2, "config: key '", key, "' expects two values");
      lo = parts[0];
      hi = parts[1];
    }
  };

  geti("train.batch_size", c.train.batch_size);
  geti("train.iterations", c.train.iterations);
  getd("train.lr", c.train.lr);
  getd("train.tau", c.train.tau);
  geti("train.n_pos", c.train.n_pos);
  geti("train.n_neg", c.train.n_neg);
  geti("train.n_rand_g", c.train.n_rand_g);
  geti("train.n_cand_l", c.train.n_cand_l);
  getd("train.delta_mm", c.train.delta_mm);
  getu("train.seed", c.train.seed);
  getb("train.radam", c.train.radam);
  geti("train.log_every", c.train.log_every);
  geti("train.checkpoint_every", c.train.checkpoint_every);
  getb("train.no_coarse_to_fine", c.train.no_coarse_to_fine);
  getb("train.no_global_hard", c.train.no_global_hard);
  getb("train.no_global_diverse", c.train.no_global_diverse);
  getb("train.no_local_hard", c.train.no_local_hard);
  getb("train.no_local_diverse", c.train.no_local_diverse);
  getil("augment.patch_size", c.augment.patch_size);
  getrange("augment.scale_range", c.augment.scale_lo, c.augment.scale_hi);
  getd("augment.rotation_deg", c.augment.rotation_deg);
  getd("augment.elastic_amplitude", c.augment.elastic_amplitude);
  geti("augment.elastic_grid", c.augment.elastic_grid);
  getrange("augment.intensity_gamma_range", c.augment.gamma_lo, c.augment.gamma_hi);
  getd("augment.intensity_noise_std", c.augment.noise_std);
  getb("augment.flip_enabled", c.augment.flip_enabled);
  getb("augment.scale_enabled", c.augment.scale_enabled);
  getb("augment.intensity_enabled", c.augment.intensity_enabled);
  getb("augment.deform_rotate_enabled", c.augment.deform_rotate_enabled);
  if (auto* v = s("encoder.stage_channels"))
    c.encoder.stage_channels = parse_i64_list("encoder.stage_channels", *v);
  getil("encoder.global_stride", c.encoder.global_stride);
  getil("encoder.local_stride", c.encoder.local_stride);
  geti("encoder.embed_dim", c.encoder.embed_dim);
  geti("encoder.fpn_channels", c.encoder.fpn_channels);
  getd("infer.threshold", c.infer.threshold);
  getil("infer.tile_size", c.infer.tile_size);
  getil("infer.tile_overlap", c.infer.tile_overlap);
  geti("eval.holdout", c.eval.holdout);
  getd("eval.box_halfwidth", c.eval.box_halfwidth);
  if (auto* v = s("eval.variant")) c.eval.variant = *v;

  c.validate();
  return c;
}

}  // namespace anatembed::config
