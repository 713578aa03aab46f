#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "anatembed/eval.hpp"
#include "anatembed/phantom_io.hpp"
#include "json.hpp"

using namespace anatembed;

namespace {

config::RunConfig load_config(const std::string& path) {
  config::RunConfig rc =
      config::RunConfig::resolve(config::parse_properties(io::read_text(path)));
  rc.validate();
  return rc;
}

// values are ';'-separated so list-valued parameters keep their commas
std::vector<std::string> split_values(const std::string& s) {
  std::vector<std::string> out;
  size_t pos = 0;
  while (true) {
    size_t c = s.find(';', pos);
    std::string part =
        config::trim(s.substr(pos, c == std::string::npos ? c : c - pos));
    require(!part.empty(), "sweep: empty entry in --values \"", s, "\"");
    out.push_back(part);
    if (c == std::string::npos) break;
    pos = c + 1;
  }
  return out;
}

int cmd_generate(uint64_t seed, int64_t count, int dim, const std::string& size,
                 double variation, const std::string& out) {
  require(count >= 1, "generate: --count must be >= 1");
  Shape sz;
  if (size.empty())
    sz = dim == 3 ? Shape{64, 128, 128} : Shape{128, 128};
  else
    sz = config::parse_i64_list("--size", size);
  for (int64_t i = 0; i < count; ++i) {
    phantom::Phantom ph = phantom::generate(seed + (uint64_t)i, dim, sz, variation);
    phantom::save_phantom(out + "/" + phantom::phantom_dir_name(i), ph);
  }
  nlohmann::json j;
  j["format"] = "anatembed-generate-v1";
  j["seed"] = seed;
  j["count"] = count;
  j["dim"] = dim;
  j["size"] = sz;
  j["variation"] = variation;
  std::filesystem::create_directories(out);
  io::write_text_atomic(out + "/generate.json", j.dump(2) + "\n");
  std::printf("generated %lld phantoms under %s\n", (long long)count, out.c_str());
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out, bool resume) {
  config::RunConfig rc = load_config(config_path);
  std::vector<phantom::Phantom> data = phantom::load_dataset(data_dir);
  require(data[0].dim == rc.encoder.dim, "train: dataset is ", data[0].dim,
          "d but config expects ", rc.encoder.dim, "d");
  trainer::TrainOutcome t = trainer::train(rc, data, out, resume);
  io::write_text_atomic(out + "/config.txt", rc.echo());
  std::printf("trained to iteration %lld; last losses global=%s local=%s\n",
              (long long)t.iterations,
              config::fmt_f64(t.last_global_loss).c_str(),
              config::fmt_f64(t.last_local_loss).c_str());
  return 0;
}

int cmd_embed(const std::string& checkpoint, const std::string& image_dir,
              const std::string& out) {
  config::RunConfig rc;
  net::Encoder enc = net::load_checkpoint(checkpoint, &rc);
  phantom::Phantom ph = phantom::load_phantom(image_dir);
  require(ph.dim == rc.encoder.dim, "embed: image is ", ph.dim,
          "d but checkpoint expects ", rc.encoder.dim, "d");
  infer::EmbedResult f = infer::embed_image(enc, eval::image_tensor(ph), rc.infer);
  infer::save_embed(out, f);
  io::write_text_atomic(out + "/config.txt", rc.echo());
  std::printf("embedded %s into %s\n", image_dir.c_str(), out.c_str());
  return 0;
}

int cmd_match(const std::string& checkpoint, const std::string& template_dir,
              const std::string& query_dir, const std::string& landmark,
              const std::string& point, bool has_threshold, double threshold,
              const std::string& variant) {
  require(landmark.empty() != point.empty(),
          "match: pass exactly one of --landmark or --point");
  config::RunConfig rc;
  net::Encoder enc = net::load_checkpoint(checkpoint, &rc);
  phantom::Phantom tph = phantom::load_phantom(template_dir);
  phantom::Phantom qph = phantom::load_phantom(query_dir);
  infer::EmbedResult tf = infer::embed_image(enc, eval::image_tensor(tph), rc.infer);
  infer::EmbedResult qf = infer::embed_image(enc, eval::image_tensor(qph), rc.infer);

  std::string name = landmark;
  VecD p;
  if (!landmark.empty()) {
    for (const phantom::Landmark& lm : tph.landmarks)
      if (lm.name == landmark) p = lm.position_px;
    require(!p.empty(), "match: template has no landmark \"", landmark, "\"");
  } else {
    for (double v : config::parse_f64_list("--point", point)) p.push_back(v);
    name = "point";
  }
  infer::LandmarkAnchor anchor = infer::extract_anchor(tf, name, p);

  double thr = has_threshold ? threshold : rc.infer.threshold;
  infer::MatchResult r =
      infer::match(anchor, qf, infer::variant_from_string(variant));
  nlohmann::json j;
  j["query_id"] = strcat("phantom-", qph.seed);
  j["landmark"] = name;
  j["point"] = r.point;
  j["score"] = r.score;
  j["peak_global"] = r.peak_global;
  j["peak_local"] = r.peak_local;
  j["matched"] = r.score >= thr;
  std::printf("%s\n", j.dump().c_str());
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& template_dir,
             const std::string& query_dir, const std::string& variant,
             const std::string& report_dir) {
  config::RunConfig rc;
  net::Encoder enc = net::load_checkpoint(checkpoint, &rc);
  if (!variant.empty()) rc.eval.variant = variant;

  std::vector<phantom::Phantom> cands = phantom::load_dataset(template_dir);
  std::vector<phantom::Phantom> queries = phantom::load_dataset(query_dir);
  std::vector<std::vector<VecD>> sets;
  for (const phantom::Phantom& ph : cands) {
    std::vector<VecD> pts;
    for (const phantom::Landmark& lm : ph.landmarks)
      pts.push_back(lm.position_px);
    sets.push_back(std::move(pts));
  }
  size_t tidx = eval::select_template(sets);
  const phantom::Phantom& tp = cands[tidx];
  infer::EmbedResult tf = infer::embed_image(enc, eval::image_tensor(tp), rc.infer);
  std::vector<std::pair<std::string, VecD>> pts;
  for (const phantom::Landmark& lm : tp.landmarks)
    pts.push_back({lm.name, lm.position_px});
  infer::Template tmpl =
      infer::make_template(strcat("phantom-", tp.seed), tf, pts);

  std::vector<eval::QueryCase> cases;
  for (const phantom::Phantom& ph : queries)
    cases.push_back({strcat("phantom-", ph.seed),
                     infer::embed_image(enc, eval::image_tensor(ph), rc.infer),
                     ph.landmarks, ph.spacing});
  eval::BenchmarkReport rep = eval::run_benchmark(
      tmpl, cases, infer::variant_from_string(rc.eval.variant), rc.eval);
  eval::write_report(report_dir, rep);
  io::write_text_atomic(report_dir + "/config.txt", rc.echo());
  std::printf("template=%s n=%zu mre_px=%s max_px=%s accuracy=%s\n",
              tmpl.image_id.c_str(), rep.rows.size(),
              config::fmt_f64(rep.mre_px).c_str(),
              config::fmt_f64(rep.max_px).c_str(),
              config::fmt_f64(rep.accuracy).c_str());
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& data_dir,
              const std::string& param, const std::string& values,
              const std::string& out, const std::string& report_dir) {
  config::RunConfig rc = load_config(config_path);
  std::vector<phantom::Phantom> data = phantom::load_dataset(data_dir);
  require(data[0].dim == rc.encoder.dim, "sweep: dataset is ", data[0].dim,
          "d but config expects ", rc.encoder.dim, "d");
  eval::SweepResult res =
      eval::run_sweep(rc, data, param, split_values(values), out);
  eval::write_sweep(report_dir, res);
  io::write_text_atomic(report_dir + "/config.txt", rc.echo());
  std::printf("swept %s over %zu values; reports under %s\n", param.c_str(),
              res.rows.size(), report_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"self-supervised anatomical embeddings on procedural phantoms"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("generate", "create a phantom dataset");
  uint64_t g_seed = 0;
  int64_t g_count = 1;
  int g_dim = 2;
  double g_var = 0.5;
  std::string g_size, g_out;
  gen->add_option("--seed", g_seed, "seed of the first phantom (default 0)");
  gen->add_option("--count", g_count, "number of phantoms (default 1)");
  gen->add_option("--dim", g_dim, "2 or 3 (default 2)");
  gen->add_option("--size", g_size, "per-axis extent, e.g. 128,128");
  gen->add_option("--variation", g_var, "anatomy variation in [0,1] (default 0.5)");
  gen->add_option("--out", g_out, "output dataset directory")->required();

  auto* tr = app.add_subcommand("train", "train an encoder on a dataset");
  std::string t_config, t_data, t_out;
  bool t_resume = false;
  tr->add_option("--config", t_config, "key = value config file")->required();
  tr->add_option("--data", t_data, "dataset directory")->required();
  tr->add_option("--out", t_out, "checkpoint directory")->required();
  tr->add_flag("--resume", t_resume, "continue from the checkpoint in --out");

  auto* em = app.add_subcommand("embed", "embed one image with a checkpoint");
  std::string e_ckpt, e_image, e_out;
  em->add_option("--checkpoint", e_ckpt, "checkpoint directory")->required();
  em->add_option("--image", e_image, "phantom directory")->required();
  em->add_option("--out", e_out, "output directory")->required();

  auto* ma = app.add_subcommand("match", "locate a template point in a query");
  std::string m_ckpt, m_tmpl, m_query, m_landmark, m_point, m_variant = "full";
  double m_threshold = 0.0;
  ma->add_option("--checkpoint", m_ckpt, "checkpoint directory")->required();
  ma->add_option("--template", m_tmpl, "template phantom directory")->required();
  ma->add_option("--query", m_query, "query phantom directory")->required();
  ma->add_option("--landmark", m_landmark, "template landmark name");
  ma->add_option("--point", m_point, "template pixel, e.g. 32,40");
  auto* thr_opt = ma->add_option("--threshold", m_threshold,
                                 "no-match threshold (default from checkpoint)");
  ma->add_option("--variant", m_variant, "full, global_only or local_only");

  auto* ev = app.add_subcommand("eval", "benchmark a checkpoint");
  std::string v_ckpt, v_tmpl, v_query, v_variant, v_report;
  ev->add_option("--checkpoint", v_ckpt, "checkpoint directory")->required();
  ev->add_option("--template-dir", v_tmpl, "template candidate dataset")->required();
  ev->add_option("--query-dir", v_query, "query dataset")->required();
  ev->add_option("--variant", v_variant, "full, global_only or local_only");
  ev->add_option("--report", v_report, "report output directory")->required();

  auto* sw = app.add_subcommand("sweep", "retrain across parameter values");
  std::string s_config, s_data, s_param, s_values, s_out, s_report;
  sw->add_option("--config", s_config, "key = value config file")->required();
  sw->add_option("--data", s_data, "dataset directory")->required();
  sw->add_option("--param", s_param,
                 "train.n_pos, train.n_neg, encoder.embed_dim or augment.patch_size")
      ->required();
  sw->add_option("--values", s_values, "';'-separated values, e.g. 50;100")
      ->required();
  sw->add_option("--out", s_out, "work directory for per-value checkpoints")
      ->required();
  sw->add_option("--report", s_report, "sweep report directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_generate(g_seed, g_count, g_dim, g_size, g_var, g_out);
    if (*tr) return cmd_train(t_config, t_data, t_out, t_resume);
    if (*em) return cmd_embed(e_ckpt, e_image, e_out);
    if (*ma)
      return cmd_match(m_ckpt, m_tmpl, m_query, m_landmark, m_point,
                       thr_opt->count() > 0, m_threshold, m_variant);
    if (*ev) return cmd_eval(v_ckpt, v_tmpl, v_query, v_variant, v_report);
    if (*sw) return cmd_sweep(s_config, s_data, s_param, s_values, s_out, s_report);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
