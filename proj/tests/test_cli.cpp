#include <gtest/gtest.h>
#include <sys/wait.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "anatembed/config.hpp"
#include "anatembed/infer.hpp"
#include "anatembed/tensor_io.hpp"
#include "json.hpp"

using namespace anatembed;

namespace {

struct CmdResult {
  int code = -1;
  std::string out;  // stdout and stderr interleaved
};

CmdResult run_cli(const std::string& args) {
  std::string cmd = std::string(ANATEMBED_CLI) + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  EXPECT_NE(p, nullptr);
  CmdResult r;
  char buf[4096];
  size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  int st = pclose(p);
  r.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

std::string tmp_dir(const std::string& tag) {
  std::string d =
      (std::filesystem::temp_directory_path() / ("anatembed_cli_" + tag))
          .string();
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  EXPECT_TRUE(in.good()) << path;
  return std::string(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>());
}

void write_config(const std::string& path) {
  std::ofstream out(path);
  out << "encoder.dim = 2\n"
         "encoder.stage_channels = 4,6,8\n"
         "encoder.embed_dim = 8\n"
         "encoder.fpn_channels = 4\n"
         "encoder.global_stride = 4,4\n"
         "encoder.local_stride = 2,2\n"
         "augment.patch_size = 16,16\n"
         "train.batch_size = 2\n"
         "train.iterations = 3\n"
         "train.n_pos = 2\n"
         "train.n_neg = 4\n"
         "train.n_rand_g = 4\n"
         "train.n_cand_l = 8\n"
         "train.log_every = 1\n"
         "train.checkpoint_every = 2\n"
         "train.lr = 0.001\n"
         "infer.tile_size = 48,48\n"
         "infer.tile_overlap = 8,8\n"
         "eval.holdout = 2\n";
}

// one shared pipeline so the binary is exercised end to end exactly once;
// later tests reuse these artifacts read-only
struct Pipeline {
  std::string root, data, qdata, config, ckpt;
  Pipeline() {
    root = tmp_dir("pipeline");
    data = root + "/data";
    qdata = root + "/qdata";
    config = root + "/config.txt";
    ckpt = root + "/ckpt";
    write_config(config);
    CmdResult g = run_cli("generate --seed 0 --count 5 --size 48,48"
                          " --variation 0.4 --out " + data);
    EXPECT_EQ(g.code, 0) << g.out;
    CmdResult q = run_cli("generate --seed 20 --count 2 --size 48,48"
                          " --variation 0.4 --out " + qdata);
    EXPECT_EQ(q.code, 0) << q.out;
    CmdResult t = run_cli("train --config " + config + " --data " + data +
                          " --out " + ckpt);
    EXPECT_EQ(t.code, 0) << t.out;
  }
};

Pipeline& pipeline() {
  static Pipeline p;
  return p;
}

}  // namespace

TEST(Cli, GenerateIsDeterministic) {
  std::string a = tmp_dir("gen_a"), b = tmp_dir("gen_b"), c = tmp_dir("gen_c");
  EXPECT_EQ(run_cli("generate --seed 3 --count 2 --size 32,32 --out " + a).code, 0);
  EXPECT_EQ(run_cli("generate --seed 3 --count 2 --size 32,32 --out " + b).code, 0);
  EXPECT_EQ(run_cli("generate --seed 4 --count 2 --size 32,32 --out " + c).code, 0);
  for (const char* f : {"/phantom_0000/image.pet", "/phantom_0000/meta.json",
                        "/phantom_0001/image.pet", "/generate.json"})
    EXPECT_EQ(read_file(a + f), read_file(b + f)) << f;
  EXPECT_NE(read_file(a + "/phantom_0000/image.pet"),
            read_file(c + "/phantom_0000/image.pet"));
  std::filesystem::remove_all(a);
  std::filesystem::remove_all(b);
  std::filesystem::remove_all(c);
}

TEST(Cli, TrainWritesCheckpointAndConfigEcho) {
  Pipeline& p = pipeline();
  EXPECT_TRUE(std::filesystem::exists(p.ckpt + "/manifest.json"));
  EXPECT_TRUE(std::filesystem::exists(p.ckpt + "/train_log.csv"));
  EXPECT_TRUE(std::filesystem::exists(p.ckpt + "/config.txt"));
  // the echoed config is resolved: defaults filled in, parseable, idempotent
  auto kv = config::parse_properties(read_file(p.ckpt + "/config.txt"));
  config::RunConfig rc = config::RunConfig::resolve(kv);
  EXPECT_EQ(rc.train.iterations, 3);
  EXPECT_EQ(rc.echo(), read_file(p.ckpt + "/config.txt"));
}

TEST(Cli, TrainIsReproducible) {
  Pipeline& p = pipeline();
  std::string again = tmp_dir("train_again");
  CmdResult t = run_cli("train --config " + p.config + " --data " + p.data +
                        " --out " + again);
  ASSERT_EQ(t.code, 0) << t.out;
  EXPECT_EQ(read_file(p.ckpt + "/train_log.csv"),
            read_file(again + "/train_log.csv"));
  for (const auto& e :
       std::filesystem::directory_iterator(p.ckpt + "/params"))
    EXPECT_EQ(read_file(e.path().string()),
              read_file(again + "/params/" + e.path().filename().string()))
        << e.path();
  std::filesystem::remove_all(again);
}

TEST(Cli, ResumeAtFinalIterationIsANoOp) {
  Pipeline& p = pipeline();
  std::string copy = tmp_dir("resume_copy");
  std::filesystem::remove_all(copy);
  std::filesystem::copy(p.ckpt, copy, std::filesystem::copy_options::recursive);
  CmdResult r = run_cli("train --config " + p.config + " --data " + p.data +
                        " --out " + copy + " --resume");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("iteration 3"), std::string::npos) << r.out;
  for (const auto& e :
       std::filesystem::directory_iterator(p.ckpt + "/params"))
    EXPECT_EQ(read_file(e.path().string()),
              read_file(copy + "/params/" + e.path().filename().string()));
  std::filesystem::remove_all(copy);
}

TEST(Cli, EmbedRoundTrips) {
  Pipeline& p = pipeline();
  std::string out = tmp_dir("embed_out");
  CmdResult r = run_cli("embed --checkpoint " + p.ckpt + " --image " + p.data +
                        "/phantom_0000 --out " + out);
  ASSERT_EQ(r.code, 0) << r.out;
  infer::EmbedResult f = infer::load_embed(out);
  EXPECT_EQ(f.image_size(), Shape({48, 48}));
  EXPECT_TRUE(std::filesystem::exists(out + "/config.txt"));
  std::filesystem::remove_all(out);
}

TEST(Cli, SelfMatchReportsMatchedWithHighScore) {
  Pipeline& p = pipeline();
  CmdResult r = run_cli("match --checkpoint " + p.ckpt + " --template " +
                        p.data + "/phantom_0000 --query " + p.data +
                        "/phantom_0000 --point 24,24");
  ASSERT_EQ(r.code, 0) << r.out;
  nlohmann::json j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j.at("matched"), true);
  EXPECT_GE(j.at("score").get<double>(), 1.99);
  EXPECT_EQ(j.at("point").get<VecD>(), VecD({24.0, 24.0}));
  EXPECT_EQ(j.at("query_id"), "phantom-0");
  EXPECT_EQ(j.at("landmark"), "point");
}

TEST(Cli, MatchByLandmarkNameAndThreshold) {
  Pipeline& p = pipeline();
  nlohmann::json meta =
      nlohmann::json::parse(read_file(p.data + "/phantom_0000/meta.json"));
  std::string name = meta.at("landmarks")[0].at("name").get<std::string>();

  CmdResult r = run_cli("match --checkpoint " + p.ckpt + " --template " +
                        p.data + "/phantom_0000 --query " + p.data +
                        "/phantom_0001 --landmark " + name);
  ASSERT_EQ(r.code, 0) << r.out;
  nlohmann::json j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j.at("landmark"), name);
  EXPECT_EQ(j.at("point").get<VecD>().size(), 2u);

  // an unreachable threshold flips matched to false, score is unchanged
  CmdResult hi = run_cli("match --checkpoint " + p.ckpt + " --template " +
                         p.data + "/phantom_0000 --query " + p.data +
                         "/phantom_0001 --landmark " + name +
                         " --threshold 5.0");
  ASSERT_EQ(hi.code, 0) << hi.out;
  nlohmann::json jh = nlohmann::json::parse(hi.out);
  EXPECT_EQ(jh.at("matched"), false);
  EXPECT_EQ(jh.at("score"), j.at("score"));

  CmdResult both = run_cli("match --checkpoint " + p.ckpt + " --template " +
                           p.data + "/phantom_0000 --query " + p.data +
                           "/phantom_0001 --landmark " + name +
                           " --point 24,24");
  EXPECT_EQ(both.code, 1);
  EXPECT_NE(both.out.find("error:"), std::string::npos);
}

TEST(Cli, EvalReportIsInternallyConsistent) {
  Pipeline& p = pipeline();
  std::string rep = tmp_dir("eval_rep");
  CmdResult r = run_cli("eval --checkpoint " + p.ckpt + " --template-dir " +
                        p.data + " --query-dir " + p.qdata + " --report " + rep);
  ASSERT_EQ(r.code, 0) << r.out;
  nlohmann::json j = nlohmann::json::parse(read_file(rep + "/report.json"));
  double sum = 0.0, mx = 0.0;
  for (const auto& row : j.at("rows")) {
    sum += row.at("err_px").get<double>();
    mx = std::max(mx, row.at("err_px").get<double>());
  }
  double n = (double)j.at("rows").size();
  EXPECT_DOUBLE_EQ(j.at("summary").at("mre_px").get<double>(), sum / n);
  EXPECT_DOUBLE_EQ(j.at("summary").at("max_px").get<double>(), mx);
  EXPECT_LE(j.at("summary").at("mre_px").get<double>(),
            j.at("summary").at("max_px").get<double>());
  EXPECT_TRUE(std::filesystem::exists(rep + "/report.csv"));
  EXPECT_TRUE(std::filesystem::exists(rep + "/timing.json"));
  EXPECT_TRUE(std::filesystem::exists(rep + "/config.txt"));

  // per-variant runs agree on row count and stay in [0,1] accuracy
  for (const char* v : {"global_only", "local_only"}) {
    std::string vd = tmp_dir(std::string("eval_") + v);
    CmdResult rv = run_cli("eval --checkpoint " + p.ckpt + " --template-dir " +
                           p.data + " --query-dir " + p.qdata + " --variant " +
                           v + " --report " + vd);
    ASSERT_EQ(rv.code, 0) << rv.out;
    nlohmann::json jv = nlohmann::json::parse(read_file(vd + "/report.json"));
    EXPECT_EQ(jv.at("variant"), v);
    EXPECT_EQ(jv.at("rows").size(), j.at("rows").size());
    double acc = jv.at("summary").at("accuracy").get<double>();
    EXPECT_GE(acc, 0.0);
    EXPECT_LE(acc, 1.0);
    std::filesystem::remove_all(vd);
  }
  std::filesystem::remove_all(rep);
}

TEST(Cli, SweepEmitsQuotedValuesAndReports) {
  Pipeline& p = pipeline();
  std::string work = tmp_dir("sweep_work"), rep = tmp_dir("sweep_rep");
  CmdResult r = run_cli("sweep --config " + p.config + " --data " + p.data +
                        " --param augment.patch_size --values '16,16;20,20'" +
                        " --out " + work + " --report " + rep);
  ASSERT_EQ(r.code, 0) << r.out;
  std::string csv = read_file(rep + "/sweep.csv");
  EXPECT_NE(csv.find("augment.patch_size,\"16,16\","), std::string::npos) << csv;
  EXPECT_NE(csv.find("augment.patch_size,\"20,20\","), std::string::npos) << csv;
  EXPECT_TRUE(std::filesystem::exists(work + "/run-0/manifest.json"));
  EXPECT_TRUE(std::filesystem::exists(work + "/run-1/manifest.json"));
  EXPECT_TRUE(std::filesystem::exists(rep + "/sweep.json"));

  CmdResult bad = run_cli("sweep --config " + p.config + " --data " + p.data +
                          " --param train.lr --values 0.1 --out " + work +
                          " --report " + rep);
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.out.find("error:"), std::string::npos);
  std::filesystem::remove_all(work);
  std::filesystem::remove_all(rep);
}

TEST(Cli, ErrorsAreSingleLineWithNonzeroExit) {
  Pipeline& p = pipeline();
  CmdResult nocmd = run_cli("frobnicate");
  EXPECT_NE(nocmd.code, 0);

  CmdResult miss = run_cli("train --config " + p.config);
  EXPECT_NE(miss.code, 0);

  std::string badcfg =
      (std::filesystem::temp_directory_path() / "anatembed_cli_bad.txt").string();
  std::ofstream(badcfg) << "train.bogus_key = 1\n";
  CmdResult bad =
      run_cli("train --config " + badcfg + " --data " + p.data + " --out " +
              tmp_dir("bad_out"));
  EXPECT_EQ(bad.code, 1);
  ASSERT_FALSE(bad.out.empty());
  EXPECT_TRUE(bad.out.starts_with("error:")) << bad.out;
  // single line: exactly one newline, at the end
  EXPECT_EQ(std::count(bad.out.begin(), bad.out.end(), '\n'), 1);
  EXPECT_EQ(bad.out.back(), '\n');
  std::filesystem::remove(badcfg);

  CmdResult nodata = run_cli("eval --checkpoint " + p.ckpt +
                             " --template-dir /nonexistent --query-dir " +
                             p.qdata + " --report " + tmp_dir("nodata_rep"));
  EXPECT_EQ(nodata.code, 1);
  EXPECT_TRUE(nodata.out.starts_with("error:")) << nodata.out;
}
