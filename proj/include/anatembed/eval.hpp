#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "anatembed/config.hpp"
#include "anatembed/infer.hpp"
#include "anatembed/phantom.hpp"
#include "anatembed/trainer.hpp"
#include "json.hpp"

namespace anatembed::eval {

// Whole phantom image as a {1, spatial...} tensor ready for the encoder.
inline Tensor image_tensor(const phantom::Phantom& ph) {
  Shape s = {1};
  for (int64_t e : ph.size) s.push_back(e);
  return Tensor::from(s, ph.image);
}

// --- error metrics ----------------------------------------------------------

// Euclidean distance in pixels.
inline double radial_error(const VecD& pred, const VecD& truth) {
  require(pred.size() == truth.size(), "eval: point dimensions disagree: ",
          pred.size(), " vs ", truth.size());
  double s = 0.0;
  for (size_t a = 0; a < pred.size(); ++a) {
    double d = pred[a] - truth[a];
    s += d * d;
  }
  return std::sqrt(s);
}

// Euclidean distance in millimeters under a per-axis mm-per-pixel spacing.
inline double radial_error(const VecD& pred, const VecD& truth,
                           const VecD& spacing) {
  require(pred.size() == truth.size() && pred.size() == spacing.size(),
          "eval: point and spacing dimensions disagree");
  double s = 0.0;
  for (size_t a = 0; a < pred.size(); ++a) {
    double d = (pred[a] - truth[a]) * spacing[a];
    s += d * d;
  }
  return std::sqrt(s);
}

inline VecD radial_errors(const std::vector<VecD>& pred,
                          const std::vector<VecD>& truth, const VecD& spacing) {
  require(pred.size() == truth.size(), "eval: prediction list has ",
          pred.size(), " points, truth has ", truth.size());
  VecD out;
  out.reserve(pred.size());
  for (size_t i = 0; i < pred.size(); ++i)
    out.push_back(radial_error(pred[i], truth[i], spacing));
  return out;
}

struct ErrorSummary {
  double mean = 0.0, stddev = 0.0, max = 0.0;
  int64_t n = 0;
};

// Mean, population standard deviation and maximum, accumulated left to right
// so a recomputation over the same list reproduces every field exactly.
inline ErrorSummary summarize(const VecD& errors) {
  require(!errors.empty(), "eval: cannot summarize an empty error list");
  ErrorSummary s;
  s.n = (int64_t)errors.size();
  s.max = errors[0];
  double sum = 0.0;
  for (double e : errors) {
    sum += e;
    s.max = std::max(s.max, e);
  }
  s.mean = sum / (double)s.n;
  double sq = 0.0;
  for (double e : errors) sq += (e - s.mean) * (e - s.mean);
  s.stddev = std::sqrt(sq / (double)s.n);
  return s;
}

// --- tolerance box ----------------------------------------------------------

// Closed cube: a point exactly on the boundary counts as inside.
inline bool in_box(const VecD& p, const VecD& center, double halfwidth) {
  require(p.size() == center.size(), "eval: point dimensions disagree: ",
          p.size(), " vs ", center.size());
  for (size_t a = 0; a < p.size(); ++a)
    if (std::abs(p[a] - center[a]) > halfwidth) return false;
  return true;
}

inline double box_accuracy(const std::vector<VecD>& pred,
                           const std::vector<VecD>& centers, double halfwidth) {
  require(pred.size() == centers.size(), "eval: prediction list has ",
          pred.size(), " points, box list has ", centers.size());
  require(!pred.empty(), "eval: box accuracy of an empty set is undefined");
  int64_t hits = 0;
  for (size_t i = 0; i < pred.size(); ++i)
    if (in_box(pred[i], centers[i], halfwidth)) ++hits;
  return (double)hits / (double)pred.size();
}

// --- template selection -----------------------------------------------------

// Per-axis min-max rescale of one image's landmark set to [0,1]; an axis with
// zero range maps to 0.
inline std::vector<VecD> normalize_landmarks(const std::vector<VecD>& pts) {
  require(!pts.empty(), "eval: cannot normalize an empty landmark set");
  size_t dim = pts[0].size();
  std::vector<VecD> out(pts.size(), VecD(dim, 0.0));
  for (size_t a = 0; a < dim; ++a) {
    double lo = pts[0][a], hi = pts[0][a];
    for (const VecD& p : pts) {
      require(p.size() == dim, "eval: landmark sets mix dimensions");
      lo = std::min(lo, p[a]);
      hi = std::max(hi, p[a]);
    }
    if (hi > lo)
      for (size_t i = 0; i < pts.size(); ++i)
        out[i][a] = (pts[i][a] - lo) / (hi - lo);
  }
  return out;
}

// Index of the image whose normalized landmark matrix is closest (squared
// Frobenius distance) to the average normalized matrix; ties keep the lowest
// index.
inline size_t select_template(const std::vector<std::vector<VecD>>& sets) {
  require(!sets.empty(), "eval: template selection needs at least one image");
  size_t np = sets[0].size(), dim = sets[0].empty() ? 0 : sets[0][0].size();
  require(np > 0, "eval: template selection needs at least one landmark");
  std::vector<std::vector<VecD>> norm;
  norm.reserve(sets.size());
  for (const auto& s : sets) {
    require(s.size() == np, "eval: landmark sets have different sizes: ", np,
            " vs ", s.size());
    norm.push_back(normalize_landmarks(s));
  }
  std::vector<VecD> avg(np, VecD(dim, 0.0));
  for (const auto& m : norm)
    for (size_t i = 0; i < np; ++i)
      for (size_t a = 0; a < dim; ++a) avg[i][a] += m[i][a];
  for (size_t i = 0; i < np; ++i)
    for (size_t a = 0; a < dim; ++a) avg[i][a] /= (double)norm.size();

  size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (size_t k = 0; k < norm.size(); ++k) {
    double d = 0.0;
    for (size_t i = 0; i < np; ++i)
      for (size_t a = 0; a < dim; ++a) {
        double t = norm[k][i][a] - avg[i][a];
        d += t * t;
      }
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

// --- benchmark --------------------------------------------------------------

struct QueryCase {
  std::string id;
  infer::EmbedResult fields;
  std::vector<phantom::Landmark> truth;
  VecD spacing;  // mm per pixel, per axis
};

struct BenchmarkRow {
  std::string query_id, landmark;
  VecD pred, truth;
  double err_px = 0.0, err_mm = 0.0, score = 0.0;
  bool hit = false;
};

struct LandmarkStats {
  std::string name;
  int64_t n = 0;
  double mre_px = 0.0, max_px = 0.0, mre_mm = 0.0, max_mm = 0.0;
  double accuracy = 0.0;
};

struct BenchmarkReport {
  std::string variant;
  double box_halfwidth = 0.0;
  std::vector<BenchmarkRow> rows;          // one per (query, landmark)
  std::vector<LandmarkStats> per_landmark; // aggregated over queries
  double mre_px = 0.0, std_px = 0.0, max_px = 0.0;
  double mre_mm = 0.0, std_mm = 0.0, max_mm = 0.0;
  double accuracy = 0.0;
  double wall_seconds = 0.0;  // timing sidecar only, never in report files
};

namespace detail {

inline void fill_summaries(BenchmarkReport& r, size_t n_anchors) {
  VecD epx, emm;
  epx.reserve(r.rows.size());
  emm.reserve(r.rows.size());
  int64_t hits = 0;
  for (const BenchmarkRow& row : r.rows) {
    epx.push_back(row.err_px);
    emm.push_back(row.err_mm);
    hits += row.hit ? 1 : 0;
  }
  ErrorSummary spx = summarize(epx), smm = summarize(emm);
  r.mre_px = spx.mean;
  r.std_px = spx.stddev;
  r.max_px = spx.max;
  r.mre_mm = smm.mean;
  r.std_mm = smm.stddev;
  r.max_mm = smm.max;
  r.accuracy = (double)hits / (double)r.rows.size();

  size_t nq = r.rows.size() / n_anchors;
  for (size_t ai = 0; ai < n_anchors; ++ai) {
    VecD px, mm;
    int64_t lm_hits = 0;
    for (size_t qi = 0; qi < nq; ++qi) {
      const BenchmarkRow& row = r.rows[qi * n_anchors + ai];
      px.push_back(row.err_px);
      mm.push_back(row.err_mm);
      lm_hits += row.hit ? 1 : 0;
    }
    ErrorSummary lpx = summarize(px), lmm = summarize(mm);
    r.per_landmark.push_back({r.rows[ai].landmark, lpx.n, lpx.mean, lpx.max,
                              lmm.mean, lmm.max,
                              (double)lm_hits / (double)lpx.n});
  }
}

}  // namespace detail

// Matches every template anchor in every query and aggregates radial errors.
// Rows are ordered query-major, anchors in template order; matching runs in
// parallel across queries, everything else is serial. The raw peak is always
// recorded; the no-match threshold plays no role here.
inline BenchmarkReport run_benchmark(const infer::Template& tmpl,
                                     const std::vector<QueryCase>& queries,
                                     infer::Variant variant,
                                     const config::EvalConfig& ec) {
  auto t0 = std::chrono::steady_clock::now();
  require(!tmpl.anchors.empty(), "eval: template has no anchors");
  require(!queries.empty(), "eval: benchmark needs at least one query");
  size_t na = tmpl.anchors.size();
  size_t dim = tmpl.anchors[0].point.size();

  // resolve every row's ground truth up front so failures surface serially
  std::vector<const phantom::Landmark*> truth(queries.size() * na, nullptr);
  for (size_t qi = 0; qi < queries.size(); ++qi) {
    const QueryCase& q = queries[qi];
    require(q.spacing.size() == dim, "eval: query ", q.id, " carries ",
            q.spacing.size(), " spacing entries, expected ", dim);
    for (size_t ai = 0; ai < na; ++ai) {
      const std::string& name = tmpl.anchors[ai].name;
      const phantom::Landmark* found = nullptr;
      for (const phantom::Landmark& lm : q.truth)
        if (lm.name == name) {
          found = &lm;
          break;
        }
      require(found != nullptr, "eval: query ", q.id, " lacks landmark \"",
              name, "\"");
      truth[qi * na + ai] = found;
    }
  }

  BenchmarkReport r;
  r.variant = infer::variant_name(variant);
  r.box_halfwidth = ec.box_halfwidth;
  r.rows.resize(queries.size() * na);
  parallel_for((int64_t)r.rows.size(), (int64_t)na, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) {
      size_t qi = (size_t)i / na, ai = (size_t)i % na;
      const QueryCase& q = queries[qi];
      infer::MatchResult m = infer::match(tmpl.anchors[ai], q.fields, variant);
      BenchmarkRow& row = r.rows[(size_t)i];
      row.query_id = q.id;
      row.landmark = tmpl.anchors[ai].name;
      row.pred = m.point;
      row.truth = truth[(size_t)i]->position_px;
      row.score = m.score;
      row.err_px = radial_error(row.pred, row.truth);
      row.err_mm = radial_error(row.pred, row.truth, q.spacing);
      row.hit = in_box(row.pred, row.truth, ec.box_halfwidth);
    }
  });
  detail::fill_summaries(r, na);
  r.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return r;
}

// --- dataset split driver ---------------------------------------------------

struct SplitEval {
  size_t template_index = 0;  // absolute index into the dataset
  double embed_seconds = 0.0;
  BenchmarkReport report;
};

// Splits a dataset into train images (all but the last eval.holdout) and query
// images (the last eval.holdout), picks the template among the train images,
// embeds template and queries, and runs the benchmark.
inline SplitEval evaluate_split(const net::Encoder& enc,
                                const std::vector<phantom::Phantom>& data,
                                const config::InferConfig& ic,
                                const config::EvalConfig& ec) {
  require((int64_t)data.size() > ec.holdout, "eval: need more than eval.holdout=",
          ec.holdout, " images, got ", data.size());
  size_t ntrain = data.size() - (size_t)ec.holdout;
  std::vector<std::vector<VecD>> sets;
  sets.reserve(ntrain);
  for (size_t i = 0; i < ntrain; ++i) {
    std::vector<VecD> pts;
    for (const phantom::Landmark& lm : data[i].landmarks)
      pts.push_back(lm.position_px);
    sets.push_back(std::move(pts));
  }
  SplitEval out;
  out.template_index = select_template(sets);

  auto t0 = std::chrono::steady_clock::now();
  const phantom::Phantom& tp = data[out.template_index];
  infer::EmbedResult tf = infer::embed_image(enc, image_tensor(tp), ic);
  std::vector<std::pair<std::string, VecD>> pts;
  for (const phantom::Landmark& lm : tp.landmarks)
    pts.push_back({lm.name, lm.position_px});
  infer::Template tmpl =
      infer::make_template(strcat("phantom-", tp.seed), tf, pts);

  std::vector<QueryCase> queries;
  queries.reserve((size_t)ec.holdout);
  for (size_t i = ntrain; i < data.size(); ++i)
    queries.push_back({strcat("phantom-", data[i].seed),
                       infer::embed_image(enc, image_tensor(data[i]), ic),
                       data[i].landmarks, data[i].spacing});
  out.embed_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();

  out.report =
      run_benchmark(tmpl, queries, infer::variant_from_string(ec.variant), ec);
  return out;
}

// --- parameter sweep --------------------------------------------------------

inline bool sweep_param_allowed(const std::string& p) {
  return p == "train.n_pos" || p == "train.n_neg" ||
         p == "encoder.embed_dim" || p == "augment.patch_size";
}

struct SweepRow {
  std::string value;
  size_t template_index = 0;
  double train_seconds = 0.0, eval_seconds = 0.0;
  BenchmarkReport report;
};

struct SweepResult {
  std::string param;
  std::vector<SweepRow> rows;
};

// Retrains from scratch for every value of one whitelisted parameter and
// benchmarks each run on the shared holdout split. Checkpoints land in
// work_dir/run-<k>.
inline SweepResult run_sweep(const config::RunConfig& base,
                             const std::vector<phantom::Phantom>& data,
                             const std::string& param,
                             const std::vector<std::string>& values,
                             const std::string& work_dir) {
  require(sweep_param_allowed(param), "eval: sweep over \"", param,
          "\" not supported; pick train.n_pos, train.n_neg, encoder.embed_dim"
          " or augment.patch_size");
  require(!values.empty(), "eval: sweep needs at least one value");
  require((int64_t)data.size() > base.eval.holdout,
          "eval: need more than eval.holdout=", base.eval.holdout,
          " images, got ", data.size());
  std::vector<phantom::Phantom> train_data(
      data.begin(), data.end() - (ptrdiff_t)base.eval.holdout);

  SweepResult out;
  out.param = param;
  for (size_t k = 0; k < values.size(); ++k) {
    auto kv = base.to_map();
    kv[param] = values[k];
    config::RunConfig rc = config::RunConfig::resolve(kv);
    rc.validate();
    std::string dir = strcat(work_dir, "/run-", k);
    auto t0 = std::chrono::steady_clock::now();
    trainer::train(rc, train_data, dir);
    net::Encoder enc = net::load_checkpoint(dir, nullptr);
    auto t1 = std::chrono::steady_clock::now();
    SplitEval se = evaluate_split(enc, data, rc.infer, rc.eval);
    SweepRow row;
    row.value = values[k];
    row.template_index = se.template_index;
    row.train_seconds = std::chrono::duration<double>(t1 - t0).count();
    row.eval_seconds = se.embed_seconds + se.report.wall_seconds;
    row.report = std::move(se.report);
    out.rows.push_back(std::move(row));
  }
  return out;
}

// --- report emission --------------------------------------------------------

inline std::string report_csv(const BenchmarkReport& r) {
  require(!r.rows.empty(), "eval: cannot format an empty report");
  size_t dim = r.rows[0].pred.size();
  std::string out = "query,landmark";
  for (size_t a = 0; a < dim; ++a) out += strcat(",pred_", a);
  for (size_t a = 0; a < dim; ++a) out += strcat(",truth_", a);
  out += ",err_px,err_mm,score,hit\n";
  for (const BenchmarkRow& row : r.rows) {
    out += row.query_id + "," + row.landmark;
    for (double v : row.pred) out += "," + config::fmt_f64(v);
    for (double v : row.truth) out += "," + config::fmt_f64(v);
    out += "," + config::fmt_f64(row.err_px) + "," + config::fmt_f64(row.err_mm) +
           "," + config::fmt_f64(row.score) + (row.hit ? ",1\n" : ",0\n");
  }
  return out;
}

inline nlohmann::json report_json(const BenchmarkReport& r) {
  nlohmann::json j;
  j["format"] = "anatembed-report-v1";
  j["variant"] = r.variant;
  j["box_halfwidth"] = r.box_halfwidth;
  j["summary"] = {{"n", (int64_t)r.rows.size()}, {"mre_px", r.mre_px},
                  {"std_px", r.std_px},          {"max_px", r.max_px},
                  {"mre_mm", r.mre_mm},          {"std_mm", r.std_mm},
                  {"max_mm", r.max_mm},          {"accuracy", r.accuracy}};
  j["per_landmark"] = nlohmann::json::array();
  for (const LandmarkStats& s : r.per_landmark)
    j["per_landmark"].push_back({{"name", s.name},
                                 {"n", s.n},
                                 {"mre_px", s.mre_px},
                                 {"max_px", s.max_px},
                                 {"mre_mm", s.mre_mm},
                                 {"max_mm", s.max_mm},
                                 {"accuracy", s.accuracy}});
  j["rows"] = nlohmann::json::array();
  for (const BenchmarkRow& row : r.rows)
    j["rows"].push_back({{"query", row.query_id},
                         {"landmark", row.landmark},
                         {"pred", row.pred},
                         {"truth", row.truth},
                         {"err_px", row.err_px},
                         {"err_mm", row.err_mm},
                         {"score", row.score},
                         {"hit", row.hit}});
  return j;
}

// report.csv and report.json are byte reproducible; wall-clock numbers go to
// timing.json only.
inline void write_report(const std::string& dir, const BenchmarkReport& r) {
  std::filesystem::create_directories(dir);
  io::write_text_atomic(dir + "/report.csv", report_csv(r));
  io::write_text_atomic(dir + "/report.json", report_json(r).dump(2) + "\n");
  nlohmann::json t;
  t["wall_seconds"] = r.wall_seconds;
  io::write_text_atomic(dir + "/timing.json", t.dump(2) + "\n");
}

inline std::string sweep_csv(const SweepResult& s) {
  std::string out =
      "param,value,n,mre_px,std_px,max_px,mre_mm,std_mm,max_mm,accuracy\n";
  for (const SweepRow& row : s.rows) {
    const BenchmarkReport& r = row.report;
    out += s.param + ",\"" + row.value + "\"," +
           std::to_string(r.rows.size()) + "," + config::fmt_f64(r.mre_px) +
           "," + config::fmt_f64(r.std_px) + "," + config::fmt_f64(r.max_px) +
           "," + config::fmt_f64(r.mre_mm) + "," + config::fmt_f64(r.std_mm) +
           "," + config::fmt_f64(r.max_mm) + "," +
           config::fmt_f64(r.accuracy) + "\n";
  }
  return out;
}

inline nlohmann::json sweep_json(const SweepResult& s) {
  nlohmann::json j;
  j["format"] = "anatembed-sweep-v1";
  j["param"] = s.param;
  j["rows"] = nlohmann::json::array();
  for (const SweepRow& row : s.rows) {
    const BenchmarkReport& r = row.report;
    j["rows"].push_back({{"value", row.value},
                         {"template_index", row.template_index},
                         {"n", (int64_t)r.rows.size()},
                         {"mre_px", r.mre_px},
                         {"std_px", r.std_px},
                         {"max_px", r.max_px},
                         {"mre_mm", r.mre_mm},
                         {"std_mm", r.std_mm},
                         {"max_mm", r.max_mm},
                         {"accuracy", r.accuracy}});
  }
  return j;
}

inline void write_sweep(const std::string& dir, const SweepResult& s) {
  std::filesystem::create_directories(dir);
  io::write_text_atomic(dir + "/sweep.csv", sweep_csv(s));
  io::write_text_atomic(dir + "/sweep.json", sweep_json(s).dump(2) + "\n");
  nlohmann::json t = nlohmann::json::array();
  for (const SweepRow& row : s.rows)
    t.push_back({{"value", row.value},
                 {"train_seconds", row.train_seconds},
                 {"eval_seconds", row.eval_seconds}});
  io::write_text_atomic(dir + "/timing.json",
                        nlohmann::json{{"runs", t}}.dump(2) + "\n");
}

}  // namespace anatembed::eval
