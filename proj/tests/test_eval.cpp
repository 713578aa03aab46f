#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "anatembed/eval.hpp"
#include "anatembed/phantom.hpp"

using namespace anatembed;

namespace {

config::EncoderConfig small_cfg() {
  config::EncoderConfig c;
  c.dim = 2;
  c.stage_channels = {8, 12, 16};
  c.embed_dim = 8;
  c.fpn_channels = 4;
  c.global_stride = {8, 8};
  c.local_stride = {2, 2};
  return c;
}

Tensor image_of(const phantom::Phantom& ph) {
  Shape s = {1};
  for (int64_t e : ph.size) s.push_back(e);
  return Tensor::from(s, ph.image);
}

std::string tmp_dir(const std::string& tag) {
  std::string d =
      (std::filesystem::temp_directory_path() / ("anatembed_" + tag)).string();
  std::filesystem::remove_all(d);
  return d;
}

net::EmbeddingField deep_copy(const net::EmbeddingField& f) {
  std::vector<float> v(f.values.data(), f.values.data() + f.values.size());
  return {Tensor::from(f.values.shape(), std::move(v)), f.stride};
}

eval::QueryCase query_of(const net::Encoder& enc, const phantom::Phantom& ph,
                         const config::InferConfig& ic, const std::string& id) {
  return {id, infer::embed_image(enc, image_of(ph), ic), ph.landmarks,
          ph.spacing};
}

infer::Template template_of(const net::Encoder& enc,
                            const phantom::Phantom& ph,
                            const config::InferConfig& ic,
                            const std::string& id) {
  infer::EmbedResult f = infer::embed_image(enc, image_of(ph), ic);
  std::vector<std::pair<std::string, VecD>> pts;
  for (const phantom::Landmark& lm : ph.landmarks)
    pts.push_back({lm.name, lm.position_px});
  return infer::make_template(id, f, pts);
}

// independent reimplementation of the template criterion on flat matrices
size_t oracle_select(const std::vector<std::vector<VecD>>& sets) {
  size_t ni = sets.size(), np = sets[0].size(), d = sets[0][0].size();
  std::vector<std::vector<double>> flat(ni, std::vector<double>(np * d, 0.0));
  for (size_t i = 0; i < ni; ++i)
    for (size_t a = 0; a < d; ++a) {
      double lo = sets[i][0][a], hi = sets[i][0][a];
      for (size_t p = 0; p < np; ++p) {
        lo = std::min(lo, sets[i][p][a]);
        hi = std::max(hi, sets[i][p][a]);
      }
      for (size_t p = 0; p < np; ++p)
        flat[i][p * d + a] = hi > lo ? (sets[i][p][a] - lo) / (hi - lo) : 0.0;
    }
  std::vector<double> avg(np * d, 0.0);
  for (size_t i = 0; i < ni; ++i)
    for (size_t k = 0; k < np * d; ++k) avg[k] += flat[i][k] / (double)ni;
  size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < ni; ++i) {
    double dist = 0.0;
    for (size_t k = 0; k < np * d; ++k)
      dist += (flat[i][k] - avg[k]) * (flat[i][k] - avg[k]);
    if (dist < best_d) {
      best_d = dist;
      best = i;
    }
  }
  return best;
}

config::RunConfig sweep_rc() {
  config::RunConfig rc = config::RunConfig::defaults(2);
  rc.encoder.stage_channels = {4, 6, 8};
  rc.encoder.embed_dim = 8;
  rc.encoder.fpn_channels = 4;
  rc.encoder.global_stride = {4, 4};
  rc.encoder.local_stride = {2, 2};
  rc.augment.patch_size = {16, 16};
  rc.train.batch_size = 2;
  rc.train.iterations = 2;
  rc.train.n_pos = 2;
  rc.train.n_neg = 4;
  rc.train.n_rand_g = 4;
  rc.train.n_cand_l = 8;
  rc.train.log_every = 1;
  rc.train.checkpoint_every = 2;
  rc.train.lr = 1e-3;
  rc.infer.tile_size = {48, 48};
  rc.infer.tile_overlap = {8, 8};
  rc.eval.holdout = 2;
  rc.validate();
  return rc;
}

std::vector<phantom::Phantom> sweep_data() {
  std::vector<phantom::Phantom> data;
  for (int i = 0; i < 4; ++i)
    data.push_back(phantom::generate((uint64_t)i, 2, {48, 48}, 0.4));
  return data;
}

}  // namespace

TEST(RadialErrors, KnownDistances) {
  EXPECT_EQ(eval::radial_error({1.0, 2.0}, {1.0, 2.0}), 0.0);
  EXPECT_EQ(eval::radial_error({3.0, 4.0}, {0.0, 0.0}), 5.0);
  EXPECT_DOUBLE_EQ(eval::radial_error({3.0, 4.0}, {0.0, 0.0}, {1.0, 2.0}),
                   std::sqrt(73.0));
  EXPECT_EQ(eval::radial_error({1.0, 2.0, 2.0}, {0.0, 0.0, 0.0}), 3.0);

  VecD errs = eval::radial_errors({{3.0, 4.0}, {5.0, 5.0}},
                                  {{0.0, 0.0}, {5.0, 5.0}}, {1.0, 1.0});
  ASSERT_EQ(errs.size(), 2u);
  EXPECT_EQ(errs[0], 5.0);
  EXPECT_EQ(errs[1], 0.0);

  EXPECT_THROW(eval::radial_error({1.0}, {1.0, 2.0}), Error);
  EXPECT_THROW(eval::radial_error({1.0, 2.0}, {1.0, 2.0}, {1.0}), Error);
  EXPECT_THROW(eval::radial_errors({{1.0, 2.0}}, {}, {1.0, 1.0}), Error);
}

TEST(RadialErrors, SummaryStatistics) {
  eval::ErrorSummary s = eval::summarize({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(s.mean, 2.5);
  EXPECT_DOUBLE_EQ(s.stddev, std::sqrt(1.25));
  EXPECT_EQ(s.max, 4.0);
  EXPECT_EQ(s.n, 4);

  eval::ErrorSummary one = eval::summarize({7.0});
  EXPECT_EQ(one.mean, 7.0);
  EXPECT_EQ(one.stddev, 0.0);
  EXPECT_EQ(one.max, 7.0);

  EXPECT_THROW(eval::summarize({}), Error);
}

TEST(BoxAccuracy, ClosedBoxConvention) {
  VecD c = {10.0, 10.0};
  EXPECT_TRUE(eval::in_box({14.0, 10.0}, c, 4.0));   // face, exactly on it
  EXPECT_TRUE(eval::in_box({14.0, 14.0}, c, 4.0));   // corner
  EXPECT_TRUE(eval::in_box({6.0, 6.0}, c, 4.0));
  EXPECT_FALSE(eval::in_box({14.001, 10.0}, c, 4.0));
  EXPECT_FALSE(eval::in_box({10.0, 5.9}, c, 4.0));

  double acc = eval::box_accuracy({{0.0, 0.0}, {3.0, 3.0}, {9.0, 0.0}},
                                  {{0.0, 0.0}, {0.0, 0.0}, {0.0, 0.0}}, 4.0);
  EXPECT_DOUBLE_EQ(acc, 2.0 / 3.0);

  EXPECT_THROW(eval::box_accuracy({}, {}, 4.0), Error);
  EXPECT_THROW(eval::box_accuracy({{0.0, 0.0}}, {}, 4.0), Error);
}

TEST(SelectTemplate, SingleConstructedAndTies) {
  EXPECT_EQ(eval::select_template({{{1.0, 2.0}, {3.0, 4.0}}}), 0u);

  // points already span [0,1] per axis, so normalization is the identity and
  // set C's third point equals the average of the three third points
  std::vector<VecD> A = {{0.0, 0.0}, {1.0, 1.0}, {0.2, 0.4}};
  std::vector<VecD> B = {{0.0, 0.0}, {1.0, 1.0}, {0.4, 0.2}};
  std::vector<VecD> C = {{0.0, 0.0}, {1.0, 1.0}, {0.3, 0.3}};
  EXPECT_EQ(eval::select_template({A, B, C}), 2u);

  // identical sets tie at distance zero; lowest index wins
  EXPECT_EQ(eval::select_template({A, A, A}), 0u);

  // a zero-range axis maps to zero and never dominates the distance
  std::vector<VecD> flat0 = {{5.0, 0.0}, {5.0, 1.0}, {5.0, 0.5}};
  std::vector<VecD> flat1 = {{9.0, 0.0}, {9.0, 1.0}, {9.0, 0.5}};
  EXPECT_EQ(eval::select_template({flat0, flat1}), 0u);
}

TEST(SelectTemplate, InvariantToPerImageAffineRescaling) {
  rng::Stream rs(33, 5);
  std::vector<std::vector<VecD>> sets(4, std::vector<VecD>(6, VecD(2)));
  for (auto& s : sets)
    for (auto& p : s)
      for (double& x : p) x = rs.uniform(0.0, 100.0);
  size_t base = eval::select_template(sets);

  std::vector<std::vector<VecD>> scaled = sets;
  for (size_t i = 0; i < scaled.size(); ++i) {
    double sy = rs.uniform(0.5, 3.0), sx = rs.uniform(0.5, 3.0);
    double oy = rs.uniform(-40.0, 40.0), ox = rs.uniform(-40.0, 40.0);
    for (VecD& p : scaled[i]) {
      p[0] = p[0] * sy + oy;
      p[1] = p[1] * sx + ox;
    }
  }
  EXPECT_EQ(eval::select_template(scaled), base);
}

TEST(SelectTemplate, MatchesBruteForceOracle) {
  for (uint64_t trial = 0; trial < 10; ++trial) {
    rng::Stream rs(100 + trial, 9);
    size_t ni = 5, np = 4 + trial % 3, d = trial % 2 ? 3 : 2;
    std::vector<std::vector<VecD>> sets(ni, std::vector<VecD>(np, VecD(d)));
    for (auto& s : sets)
      for (auto& p : s)
        for (double& x : p) x = rs.uniform(-50.0, 50.0);
    EXPECT_EQ(eval::select_template(sets), oracle_select(sets)) << trial;
  }
}

TEST(Benchmark, ReportArithmeticAndOrdering) {
  net::Encoder enc = net::make_encoder(small_cfg(), 7);
  config::InferConfig ic;
  ic.tile_size = {64, 64};
  ic.tile_overlap = {24, 24};
  config::EvalConfig ec;

  phantom::Phantom tp = phantom::generate(5, 2, {64, 64}, 0.3);
  infer::Template tmpl = template_of(enc, tp, ic, "tmpl");
  std::vector<eval::QueryCase> queries;
  queries.push_back(query_of(enc, phantom::generate(6, 2, {64, 64}, 0.3), ic, "qa"));
  queries.push_back(query_of(enc, phantom::generate(2, 2, {64, 64}, 0.3), ic, "qb"));

  eval::BenchmarkReport r =
      eval::run_benchmark(tmpl, queries, infer::Variant::full, ec);
  size_t na = tmpl.anchors.size();
  ASSERT_GT(na, 0u);
  ASSERT_EQ(r.rows.size(), 2 * na);
  EXPECT_EQ(r.variant, "full");
  EXPECT_EQ(r.box_halfwidth, 4.0);

  // query-major ordering, anchors in template order
  for (size_t qi = 0; qi < 2; ++qi)
    for (size_t ai = 0; ai < na; ++ai) {
      const eval::BenchmarkRow& row = r.rows[qi * na + ai];
      EXPECT_EQ(row.query_id, queries[qi].id);
      EXPECT_EQ(row.landmark, tmpl.anchors[ai].name);
      EXPECT_EQ(row.err_px, eval::radial_error(row.pred, row.truth));
      EXPECT_EQ(row.err_mm,
                eval::radial_error(row.pred, row.truth, queries[qi].spacing));
      EXPECT_EQ(row.hit, eval::in_box(row.pred, row.truth, ec.box_halfwidth));
      EXPECT_LE(row.score, 2.0 + 1e-5);
    }

  // summaries must reproduce exactly from the rows
  double sum = 0.0, mx = r.rows[0].err_px;
  int64_t hits = 0;
  for (const auto& row : r.rows) {
    sum += row.err_px;
    mx = std::max(mx, row.err_px);
    hits += row.hit ? 1 : 0;
  }
  double mean = sum / (double)r.rows.size();
  double sq = 0.0;
  for (const auto& row : r.rows) sq += (row.err_px - mean) * (row.err_px - mean);
  EXPECT_EQ(r.mre_px, mean);
  EXPECT_EQ(r.std_px, std::sqrt(sq / (double)r.rows.size()));
  EXPECT_EQ(r.max_px, mx);
  EXPECT_EQ(r.accuracy, (double)hits / (double)r.rows.size());
  EXPECT_LE(r.mre_px, r.max_px);
  EXPECT_LE(r.mre_mm, r.max_mm);
  EXPECT_GE(r.accuracy, 0.0);
  EXPECT_LE(r.accuracy, 1.0);

  // per-landmark aggregation in anchor order
  ASSERT_EQ(r.per_landmark.size(), na);
  for (size_t ai = 0; ai < na; ++ai) {
    const eval::LandmarkStats& s = r.per_landmark[ai];
    EXPECT_EQ(s.name, tmpl.anchors[ai].name);
    EXPECT_EQ(s.n, 2);
    double lsum = 0.0, lmx = r.rows[ai].err_px;
    int64_t lhits = 0;
    for (size_t qi = 0; qi < 2; ++qi) {
      const auto& row = r.rows[qi * na + ai];
      lsum += row.err_px;
      lmx = std::max(lmx, row.err_px);
      lhits += row.hit ? 1 : 0;
    }
    EXPECT_EQ(s.mre_px, lsum / 2.0);
    EXPECT_EQ(s.max_px, lmx);
    EXPECT_EQ(s.accuracy, (double)lhits / 2.0);
    EXPECT_LE(s.mre_px, s.max_px);
  }
}

TEST(Benchmark, SingleMapVariantsIgnoreThePoisonedMap) {
  net::Encoder enc = net::make_encoder(small_cfg(), 7);
  config::InferConfig ic;
  ic.tile_size = {64, 64};
  ic.tile_overlap = {24, 24};
  config::EvalConfig ec;

  infer::Template tmpl =
      template_of(enc, phantom::generate(5, 2, {64, 64}, 0.3), ic, "tmpl");
  phantom::Phantom qp = phantom::generate(6, 2, {64, 64}, 0.3);
  std::vector<eval::QueryCase> clean;
  clean.push_back(query_of(enc, qp, ic, "q"));

  float nan = std::numeric_limits<float>::quiet_NaN();
  {
    std::vector<eval::QueryCase> poisoned;
    poisoned.push_back({"q",
                        {deep_copy(clean[0].fields.global),
                         deep_copy(clean[0].fields.local)},
                        clean[0].truth, clean[0].spacing});
    Tensor& local = poisoned[0].fields.local.values;
    std::fill(local.data(), local.data() + local.size(), nan);

    eval::BenchmarkReport a =
        eval::run_benchmark(tmpl, clean, infer::Variant::global_only, ec);
    eval::BenchmarkReport b =
        eval::run_benchmark(tmpl, poisoned, infer::Variant::global_only, ec);
    ASSERT_EQ(a.rows.size(), b.rows.size());
    for (size_t i = 0; i < a.rows.size(); ++i) {
      EXPECT_EQ(a.rows[i].pred, b.rows[i].pred);
      EXPECT_EQ(a.rows[i].score, b.rows[i].score);
      EXPECT_EQ(a.rows[i].err_px, b.rows[i].err_px);
    }
    EXPECT_EQ(a.mre_px, b.mre_px);
    EXPECT_EQ(a.accuracy, b.accuracy);
  }
  {
    std::vector<eval::QueryCase> poisoned;
    poisoned.push_back({"q",
                        {deep_copy(clean[0].fields.global),
                         deep_copy(clean[0].fields.local)},
                        clean[0].truth, clean[0].spacing});
    Tensor& global = poisoned[0].fields.global.values;
    std::fill(global.data(), global.data() + global.size(), nan);

    eval::BenchmarkReport a =
        eval::run_benchmark(tmpl, clean, infer::Variant::local_only, ec);
    eval::BenchmarkReport b =
        eval::run_benchmark(tmpl, poisoned, infer::Variant::local_only, ec);
    ASSERT_EQ(a.rows.size(), b.rows.size());
    for (size_t i = 0; i < a.rows.size(); ++i) {
      EXPECT_EQ(a.rows[i].pred, b.rows[i].pred);
      EXPECT_EQ(a.rows[i].score, b.rows[i].score);
    }
    EXPECT_EQ(a.mre_px, b.mre_px);
  }
}

TEST(Benchmark, MissingLandmarkOrSpacingIsRejected) {
  net::Encoder enc = net::make_encoder(small_cfg(), 7);
  config::InferConfig ic;
  ic.tile_size = {64, 64};
  ic.tile_overlap = {24, 24};
  config::EvalConfig ec;
  infer::Template tmpl =
      template_of(enc, phantom::generate(5, 2, {64, 64}, 0.3), ic, "tmpl");
  eval::QueryCase q = query_of(enc, phantom::generate(6, 2, {64, 64}, 0.3), ic, "q");

  std::vector<eval::QueryCase> renamed;
  renamed.push_back({q.id,
                     {deep_copy(q.fields.global), deep_copy(q.fields.local)},
                     q.truth, q.spacing});
  renamed[0].truth[0].name = "something-else";
  EXPECT_THROW(
      eval::run_benchmark(tmpl, renamed, infer::Variant::full, ec), Error);

  std::vector<eval::QueryCase> badspace;
  badspace.push_back({q.id,
                      {deep_copy(q.fields.global), deep_copy(q.fields.local)},
                      q.truth, {1.0}});
  EXPECT_THROW(
      eval::run_benchmark(tmpl, badspace, infer::Variant::full, ec), Error);

  EXPECT_THROW(eval::run_benchmark(tmpl, {}, infer::Variant::full, ec), Error);
  EXPECT_THROW(eval::run_benchmark(infer::Template{"empty", {}},
                                   {std::move(badspace[0])},
                                   infer::Variant::full, ec),
               Error);
}

TEST(Benchmark, EvaluateSplitEndToEnd) {
  net::Encoder enc = net::make_encoder(small_cfg(), 11);
  config::InferConfig ic;
  ic.tile_size = {64, 64};
  ic.tile_overlap = {24, 24};
  config::EvalConfig ec;
  ec.holdout = 2;

  std::vector<phantom::Phantom> data;
  for (int i = 0; i < 5; ++i)
    data.push_back(phantom::generate((uint64_t)i, 2, {64, 64}, 0.4));

  eval::SplitEval se = eval::evaluate_split(enc, data, ic, ec);
  EXPECT_LT(se.template_index, 3u);
  size_t na = data[0].landmarks.size();
  ASSERT_EQ(se.report.rows.size(), 2 * na);
  EXPECT_EQ(se.report.rows[0].query_id, "phantom-3");
  EXPECT_EQ(se.report.rows[na].query_id, "phantom-4");
  EXPECT_EQ(se.report.variant, "full");

  // template choice ignores the holdout images
  std::vector<std::vector<VecD>> sets;
  for (size_t i = 0; i < 3; ++i) {
    std::vector<VecD> pts;
    for (const auto& lm : data[i].landmarks) pts.push_back(lm.position_px);
    sets.push_back(pts);
  }
  EXPECT_EQ(se.template_index, eval::select_template(sets));

  eval::SplitEval again = eval::evaluate_split(enc, data, ic, ec);
  EXPECT_EQ(eval::report_csv(se.report), eval::report_csv(again.report));
  EXPECT_EQ(eval::report_json(se.report), eval::report_json(again.report));

  config::EvalConfig too_many = ec;
  too_many.holdout = 5;
  EXPECT_THROW(eval::evaluate_split(enc, data, ic, too_many), Error);
}

TEST(Reports, FilesAreDeterministicAndParseable) {
  net::Encoder enc = net::make_encoder(small_cfg(), 7);
  config::InferConfig ic;
  ic.tile_size = {64, 64};
  ic.tile_overlap = {24, 24};
  config::EvalConfig ec;
  infer::Template tmpl =
      template_of(enc, phantom::generate(5, 2, {64, 64}, 0.3), ic, "tmpl");
  std::vector<eval::QueryCase> queries;
  queries.push_back(query_of(enc, phantom::generate(6, 2, {64, 64}, 0.3), ic, "q"));
  eval::BenchmarkReport r =
      eval::run_benchmark(tmpl, queries, infer::Variant::full, ec);

  std::string d1 = tmp_dir("report1"), d2 = tmp_dir("report2");
  eval::write_report(d1, r);
  eval::write_report(d2, r);
  EXPECT_EQ(io::read_text(d1 + "/report.csv"), io::read_text(d2 + "/report.csv"));
  EXPECT_EQ(io::read_text(d1 + "/report.json"),
            io::read_text(d2 + "/report.json"));
  EXPECT_TRUE(std::filesystem::exists(d1 + "/timing.json"));

  std::string csv = io::read_text(d1 + "/report.csv");
  EXPECT_TRUE(csv.starts_with(
      "query,landmark,pred_0,pred_1,truth_0,truth_1,err_px,err_mm,score,hit\n"));
  size_t lines = (size_t)std::count(csv.begin(), csv.end(), '\n');
  EXPECT_EQ(lines, 1 + r.rows.size());

  nlohmann::json j = nlohmann::json::parse(io::read_text(d1 + "/report.json"));
  EXPECT_EQ(j.at("format"), "anatembed-report-v1");
  EXPECT_EQ(j.at("summary").at("n").get<int64_t>(), (int64_t)r.rows.size());
  EXPECT_EQ(j.at("rows").size(), r.rows.size());
  EXPECT_EQ(j.at("per_landmark").size(), r.per_landmark.size());
  EXPECT_DOUBLE_EQ(j.at("summary").at("mre_px").get<double>(), r.mre_px);

  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);
}

TEST(Sweep, WhitelistIsEnforced) {
  config::RunConfig rc = sweep_rc();
  std::vector<phantom::Phantom> data = sweep_data();
  EXPECT_THROW(
      eval::run_sweep(rc, data, "train.lr", {"0.1"}, tmp_dir("sweep_bad")),
      Error);
  EXPECT_THROW(
      eval::run_sweep(rc, data, "train.n_pos", {}, tmp_dir("sweep_empty")),
      Error);
}

TEST(Sweep, RetrainsPerValueDeterministically) {
  config::RunConfig rc = sweep_rc();
  std::vector<phantom::Phantom> data = sweep_data();
  std::string d1 = tmp_dir("sweep1"), d2 = tmp_dir("sweep2");

  eval::SweepResult s1 =
      eval::run_sweep(rc, data, "train.n_pos", {"2", "3"}, d1);
  ASSERT_EQ(s1.rows.size(), 2u);
  EXPECT_EQ(s1.rows[0].value, "2");
  EXPECT_EQ(s1.rows[1].value, "3");
  size_t na = data[0].landmarks.size();
  for (const eval::SweepRow& row : s1.rows)
    EXPECT_EQ(row.report.rows.size(), 2 * na);
  EXPECT_TRUE(std::filesystem::exists(d1 + "/run-0/manifest.json"));
  EXPECT_TRUE(std::filesystem::exists(d1 + "/run-1/manifest.json"));

  eval::SweepResult s2 =
      eval::run_sweep(rc, data, "train.n_pos", {"2", "3"}, d2);
  EXPECT_EQ(eval::sweep_csv(s1), eval::sweep_csv(s2));
  EXPECT_EQ(eval::sweep_json(s1), eval::sweep_json(s2));

  eval::write_sweep(d1, s1);
  std::string csv = io::read_text(d1 + "/sweep.csv");
  EXPECT_TRUE(csv.starts_with(
      "param,value,n,mre_px,std_px,max_px,mre_mm,std_mm,max_mm,accuracy\n"));
  EXPECT_NE(csv.find("train.n_pos,\"2\","), std::string::npos);
  EXPECT_TRUE(std::filesystem::exists(d1 + "/sweep.json"));
  EXPECT_TRUE(std::filesystem::exists(d1 + "/timing.json"));

  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);
}

TEST(Sweep, HandlesGeometryAlteringParameters) {
  config::RunConfig rc = sweep_rc();
  std::vector<phantom::Phantom> data = sweep_data();
  std::string d = tmp_dir("sweep_geo");

  eval::SweepResult dims =
      eval::run_sweep(rc, data, "encoder.embed_dim", {"6"}, d + "/e");
  ASSERT_EQ(dims.rows.size(), 1u);
  EXPECT_GT(dims.rows[0].report.rows.size(), 0u);

  eval::SweepResult patch =
      eval::run_sweep(rc, data, "augment.patch_size", {"20,20"}, d + "/p");
  ASSERT_EQ(patch.rows.size(), 1u);
  std::string csv = eval::sweep_csv(patch);
  EXPECT_NE(csv.find("augment.patch_size,\"20,20\","), std::string::npos);

  std::filesystem::remove_all(d);
}
