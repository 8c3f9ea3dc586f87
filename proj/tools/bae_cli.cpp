// bae_cli: data generation, training, enhancement, evaluation and reports.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "bae/harness.hpp"

using namespace bae;

namespace {

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "experiment config file")->required()->check(CLI::ExistingFile);
  cmd->add_option("-o,--out", c.out, "output directory (overrides output_dir)");
  cmd->add_option("--seed", c.seed, "master seed (overrides master_seed)");
}

ExperimentConfig resolve(const Common& c) {
  auto cfg = load_config(c.config);
  if (!c.out.empty()) cfg.output_dir = c.out;
  if (c.seed) cfg.master_seed = *c.seed;
  return cfg;
}

void log(const std::string& msg) { std::cerr << "[bae] " << msg << "\n"; }

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ConfigError("cannot parse list entry '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError("empty list");
  return out;
}

Corpora corpora_for(const ExperimentConfig& cfg) {
  ModelPaths paths{cfg.output_dir};
  auto c = load_corpora(paths.data());
  c.attribute = cfg.attribute;
  return c;
}

int cmd_init_config(const std::string& path) {
  ExperimentConfig cfg;
  if (path.empty() || path == "-") {
    std::cout << write_config(cfg);
    return 0;
  }
  if (fs::exists(path)) throw IoError(path + " exists; refusing to overwrite");
  detail::write_text(path, write_config(cfg));
  return 0;
}

int cmd_gen_data(const ExperimentConfig& cfg, bool overwrite) {
  ModelPaths paths{cfg.output_dir};
  auto c = gen_synthetic_data(cfg);
  save_corpora(c, cfg, paths.data(), overwrite);
  detail::write_text(fs::path(cfg.output_dir) / "config.txt", write_config(cfg));
  log("wrote " + std::to_string(c.content.size()) + " content and " + std::to_string(c.style_images.size()) +
      " style images to " + paths.data().string());
  return 0;
}

int cmd_train_codec(const ExperimentConfig& cfg) {
  ModelPaths paths{cfg.output_dir};
  auto c = corpora_for(cfg);
  TransferReport rep;
  auto codec = train_codec_stage(c, cfg, &rep);
  detail::ensure_dir(paths.codec().parent_path());
  save_checkpoint(codec, paths.codec().string());
  log("codec trained; held-out reconstruction PSNR " + fmt(rep.reconstruction_psnr) + " dB");
  return 0;
}

int cmd_train_predictors(const ExperimentConfig& cfg) {
  ModelPaths paths{cfg.output_dir};
  auto c = corpora_for(cfg);
  auto codec = load_codec_checkpoint(paths.codec().string());
  PredictorStageReport rep;
  auto pair = train_predictors_stage(c, codec, cfg, &rep);
  save_predictors(pair, paths.predictors());
  auto show = [](const std::optional<double>& r) { return r ? fmt(*r) : std::string("undefined"); };
  log("predictors trained (" + to_string(cfg.attribute) + "); held-out Spearman internal " +
      show(rep.internal.holdout_spearman) + ", external " + show(rep.external.holdout_spearman));
  return 0;
}

int cmd_train_gan(const ExperimentConfig& cfg) {
  ModelPaths paths{cfg.output_dir};
  auto c = corpora_for(cfg);
  auto codec = load_codec_checkpoint(paths.codec().string());
  GanReport rep;
  auto gan = train_gan_stage(c, codec, cfg, &rep);
  detail::ensure_dir(paths.gan().parent_path());
  save_checkpoint(gan.generator, paths.gan().string());
  log("GAN trained for " + std::to_string(rep.wasserstein.size()) + " iterations; final Wasserstein estimate " +
      (rep.wasserstein.empty() ? std::string("n/a") : fmt(rep.wasserstein.back())));
  return 0;
}

struct EnhanceArgs {
  std::string method = "bae";
  std::optional<std::string> sampler;
  std::optional<std::string> tau, lambda;
  std::optional<double> alpha;
  std::optional<std::size_t> samples, limit;
  bool png = false;
};

int cmd_enhance(ExperimentConfig cfg, const EnhanceArgs& a) {
  ModelPaths paths{cfg.output_dir};
  Method method = parse_method(a.method);
  if (a.sampler) cfg.sampler = parse_sampler(*a.sampler);
  if (a.alpha) cfg.alpha = *a.alpha;
  if (a.samples) cfg.samples = *a.samples;
  std::vector<double> taus = a.tau ? parse_list(*a.tau) : std::vector<double>{cfg.tau};
  std::vector<double> lambdas = a.lambda ? parse_list(*a.lambda) : std::vector<double>{cfg.lambda};
  bool grid = taus.size() > 1 || lambdas.size() > 1;

  auto c = corpora_for(cfg);
  auto codec = load_codec_checkpoint(paths.codec().string());
  // only the internal predictor is loaded here
  auto internal = load_predictor(paths.predictors(), "internal.");
  if (internal.mode() != cfg.attribute) throw ConfigError("predictors were trained for a different attribute");
  std::optional<StyleGenerator> generator;
  if (method != Method::baseline) generator = load_generator_checkpoint(paths.gan().string());
  std::vector<StyleVector> styles;
  if (method == Method::baseline)
    for (const auto& s : c.style_images) styles.push_back(encode_style(s, codec.encoder));
  EnhanceModels models{&codec, &internal, generator ? &*generator : nullptr, &styles};

  auto ids = c.test_ids;
  if (a.limit && *a.limit < ids.size()) ids.resize(*a.limit);
  auto images = c.images(ids);

  for (double tau : taus)
    for (double lambda : lambdas) {
      cfg.tau = tau;
      cfg.lambda = lambda;
      cfg.validate();
      auto t0 = std::chrono::steady_clock::now();
      auto rep = enhance(images, ids, method, models, cfg, [&](std::size_t done) {
        if (done % 10 == 0 || done == images.size())
          log(method_label(method, cfg.sampler) + ": " + std::to_string(done) + "/" + std::to_string(images.size()));
      });
      if (grid) rep.label += "-tau" + fmt(tau) + "-lambda" + fmt(lambda);
      auto dir = paths.run(rep.label);
      save_method_report(rep, dir);
      if (a.png) {
        detail::ensure_dir(dir / "png");
        for (std::size_t i = 0; i < rep.images.size(); ++i) {
          auto id = std::to_string(rep.images[i].image_id);
          write_png((dir / "png" / (id + "_original.png")).string(), images[i], 8);
          write_png((dir / "png" / (id + "_top1.png")).string(), rep.images[i].images.at(0), 8);
        }
      }
      double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log("wrote " + dir.string() + " (" + fmt(secs) + " s)");
    }
  return 0;
}

std::vector<fs::path> run_dirs(const ExperimentConfig& cfg, const std::vector<std::string>& labels) {
  ModelPaths paths{cfg.output_dir};
  std::vector<fs::path> out;
  if (!labels.empty()) {
    for (const auto& l : labels) out.push_back(paths.run(l));
  } else if (fs::exists(paths.root / "runs")) {
    for (const auto& e : fs::directory_iterator(paths.root / "runs"))
      if (fs::exists(e.path() / "results.json")) out.push_back(e.path());
    std::sort(out.begin(), out.end());
  }
  if (out.empty()) throw ContractError("no runs found under " + (paths.root / "runs").string());
  return out;
}

int cmd_evaluate(const ExperimentConfig& cfg, const std::vector<std::string>& labels) {
  ModelPaths paths{cfg.output_dir};
  auto c = corpora_for(cfg);
  auto external_pred = load_predictor(paths.predictors(), "external.");
  ExternalScorer external(external_pred);
  std::map<std::size_t, const Tensor*> originals;
  for (auto id : c.test_ids) originals[id] = &c.content.at(id);

  std::vector<double> truth, predicted;
  for (auto id : c.test_ids) {
    truth.push_back(attribute_label(c.attribute, c.content[id]));
    predicted.push_back(external_pred.score(c.content[id]));
  }
  auto rho = spearman(truth, predicted);
  log("external predictor test-set Spearman: " + (rho ? fmt(*rho) : std::string("undefined")));

  for (const auto& dir : run_dirs(cfg, labels)) {
    auto rep = load_method_report(dir);
    evaluate_external(rep, originals, external);
    save_method_report(rep, dir);
    std::string line = rep.label + ":";
    for (auto n : cfg.top_n)
      if (n <= cfg.keep()) line += " top" + std::to_string(n) + " " + fmt(mean_topn_delta(rep, n));
    log(line);
  }
  return 0;
}

int cmd_report(const ExperimentConfig& cfg, const std::vector<std::string>& labels, const std::string& out) {
  std::vector<MethodReport> reps;
  for (const auto& dir : run_dirs(cfg, labels)) reps.push_back(load_method_report(dir, false));
  fs::path target = out.empty() ? fs::path(cfg.output_dir) / "report" : fs::path(out);
  emit_report(reps, cfg.top_n, target);
  log("report written to " + target.string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian attribute enhancement of images by style sampling"};
  app.require_subcommand(1);

  std::string init_path;
  auto* init = app.add_subcommand("init-config", "print or write a default experiment config");
  init->add_option("path", init_path, "destination file (stdout when omitted)");

  Common common;
  bool overwrite = false;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpora");
  add_common(gen, common);
  gen->add_flag("--overwrite", overwrite, "replace an existing corpus");

  auto* codec = app.add_subcommand("train-codec", "train the style-transfer encoder/decoder");
  add_common(codec, common);
  auto* preds = app.add_subcommand("train-predictors", "train the internal and external attribute predictors");
  add_common(preds, common);
  auto* gan = app.add_subcommand("train-gan", "train the style-space WGAN-GP");
  add_common(gan, common);

  EnhanceArgs ea;
  auto* enh = app.add_subcommand("enhance", "rank stylizations of the test images with one method");
  add_common(enh, common);
  enh->add_option("--method", ea.method, "baseline|bae|abae|random")->check(CLI::IsMember({"baseline", "b", "bae", "abae", "random"}));
  enh->add_option("--sampler", ea.sampler, "mh|langevin|hmc");
  enh->add_option("--tau", ea.tau, "initial step size (comma list for a grid)");
  enh->add_option("--lambda", ea.lambda, "normalization exponent (comma list for a grid)");
  enh->add_option("--alpha", ea.alpha, "fixed stylization coefficient");
  enh->add_option("--samples,-M", ea.samples, "number of samples M");
  enh->add_option("--limit", ea.limit, "only the first N test images");
  enh->add_flag("--png", ea.png, "write PNGs of the original and top-1 result");

  std::vector<std::string> runs;
  auto* eval = app.add_subcommand("evaluate", "score retained results with the external predictor");
  add_common(eval, common);
  eval->add_option("--run", runs, "run labels (default: all runs)");

  std::string report_out;
  auto* rep = app.add_subcommand("report", "emit CSV, JSON and SVG summaries of evaluated runs");
  add_common(rep, common);
  rep->add_option("--run", runs, "run labels (default: all runs)");
  rep->add_option("--report-dir", report_out, "destination (default: <output>/report)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (init->parsed()) return cmd_init_config(init_path);
    auto cfg = resolve(common);
    if (gen->parsed()) return cmd_gen_data(cfg, overwrite);
    if (codec->parsed()) return cmd_train_codec(cfg);
    if (preds->parsed()) return cmd_train_predictors(cfg);
    if (gan->parsed()) return cmd_train_gan(cfg);
    if (enh->parsed()) return cmd_enhance(cfg, ea);
    if (eval->parsed()) return cmd_evaluate(cfg, runs);
    if (rep->parsed()) return cmd_report(cfg, runs, report_out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
