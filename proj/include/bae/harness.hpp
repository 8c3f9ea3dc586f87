#pragma once

// Experiment pipeline: synthetic corpora, training stages, baseline B,
// BAE/ABAE enhancement, external evaluation and report emission.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "bae/attribute.hpp"
#include "bae/checkpoint.hpp"
#include "bae/errors.hpp"
#include "bae/image_io.hpp"
#include "bae/nets.hpp"
#include "bae/rng.hpp"
#include "bae/sampler.hpp"
#include "bae/stylegan.hpp"
#include "bae/styletx.hpp"
#include "bae/synth.hpp"
#include "json.hpp"

namespace bae {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Configuration

inline constexpr int kConfigVersion = 1;

enum class Method { baseline, bae, abae, random };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::baseline: return "baseline";
    case Method::bae: return "bae";
    case Method::abae: return "abae";
    default: return "random";
  }
}
inline Method parse_method(const std::string& s) {
  if (s == "baseline" || s == "b") return Method::baseline;
  if (s == "bae") return Method::bae;
  if (s == "abae") return Method::abae;
  if (s == "random") return Method::random;
  throw ConfigError("unknown method '" + s + "' (expected baseline|bae|abae|random)");
}

/// Everything one experiment needs. Serialised as `key = value` lines;
/// see write_config for the full schema.
struct ExperimentConfig {
  AttributeMode attribute = AttributeMode::regression;
  std::uint64_t master_seed = 0;
  std::string output_dir = "bae-out";

  // corpora
  std::size_t styles = 500;
  std::size_t codec_images = 400;
  std::size_t predictor_images = 600;  // per split
  std::size_t test_images = 100;

  // training
  std::size_t codec_autoencoder_steps = 1500;
  std::size_t codec_transfer_steps = 1500;
  std::size_t predictor_epochs = 12;
  std::size_t gan_iterations = 2000;
  std::size_t gan_z_dim = 64;
  double gan_lr = 1e-4;

  // enhancement
  SamplerKind sampler = SamplerKind::langevin;
  double tau = 0.1;
  double lambda = 100.0;
  std::size_t samples = 100;  // M
  std::size_t burn_in = 200;
  bool adaptive_gradient = true;
  bool adaptive_lr = true;
  CountMode count = CountMode::accepted;
  std::size_t leapfrog_steps = 10;
  double leapfrog_step = 0.05;
  double proposal_sigma = 0.1;
  double alpha = 0.5;
  double alpha_prior_mean = 0.5;
  double alpha_prior_var = 0.25;
  std::vector<std::size_t> top_n{1, 5, 10};
  std::size_t workers = 1;

  void validate() const {
    if (styles == 0 || codec_images == 0 || predictor_images == 0 || test_images == 0)
      throw ConfigError("dataset sizes must be positive");
    if (top_n.empty()) throw ConfigError("top_n must list at least one N");
    for (auto n : top_n)
      if (n == 0) throw ConfigError("top_n entries must be positive");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0,1]");
    if (!(alpha_prior_var > 0)) throw ConfigError("alpha prior variance must be positive");
    if (workers == 0) throw ConfigError("workers must be at least 1");
    normalization().validate();
    chain(0).validate();
  }

  std::size_t keep() const { return *std::max_element(top_n.begin(), top_n.end()); }

  NormalizationSpec normalization() const { return NormalizationSpec::for_attribute(attribute, lambda); }

  ChainConfig chain(std::uint64_t seed) const {
    ChainConfig c;
    c.sampler = sampler;
    c.tau = tau;
    c.samples = samples;
    c.adaptive_gradient = adaptive_gradient;
    c.adaptive_lr = adaptive_lr;
    c.burn_in = burn_in;
    c.seed = seed;
    c.leapfrog_steps = leapfrog_steps;
    c.leapfrog_step = leapfrog_step;
    c.proposal_sigma = proposal_sigma;
    c.count = count;
    return c;
  }

  BaeEnergyConfig energy(bool adaptive_alpha) const {
    BaeEnergyConfig e;
    e.norm = normalization();
    e.alpha_policy = adaptive_alpha ? AlphaPolicy::adaptive : AlphaPolicy::fixed;
    e.alpha = alpha;
    e.alpha_prior_mean = alpha_prior_mean;
    e.alpha_prior_var = alpha_prior_var;
    return e;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  T out{};
  is >> out;
  if (!is || !is.eof()) throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "': expected true|false, got '" + v + "'");
}

inline std::string count_name(CountMode m) { return m == CountMode::accepted ? "accepted" : "proposals"; }

}  // namespace detail

/// Schema version 1. Blank lines and `#` comments are ignored; the
/// `version` key is mandatory and unknown keys are rejected.
inline std::string write_config(const ExperimentConfig& c) {
  using detail::fmt_double;
  std::ostringstream os;
  os << "# BAE experiment configuration\n";
  os << "version = " << kConfigVersion << "\n";
  os << "attribute = " << to_string(c.attribute) << "\n";
  os << "master_seed = " << c.master_seed << "\n";
  os << "output_dir = " << c.output_dir << "\n";
  os << "styles = " << c.styles << "\n";
  os << "codec_images = " << c.codec_images << "\n";
  os << "predictor_images = " << c.predictor_images << "\n";
  os << "test_images = " << c.test_images << "\n";
  os << "codec_autoencoder_steps = " << c.codec_autoencoder_steps << "\n";
  os << "codec_transfer_steps = " << c.codec_transfer_steps << "\n";
  os << "predictor_epochs = " << c.predictor_epochs << "\n";
  os << "gan_iterations = " << c.gan_iterations << "\n";
  os << "gan_z_dim = " << c.gan_z_dim << "\n";
  os << "gan_lr = " << fmt_double(c.gan_lr) << "\n";
  os << "sampler = " << to_string(c.sampler) << "\n";
  os << "tau = " << fmt_double(c.tau) << "\n";
  os << "lambda = " << fmt_double(c.lambda) << "\n";
  os << "samples = " << c.samples << "\n";
  os << "burn_in = " << c.burn_in << "\n";
  os << "adaptive_gradient = " << (c.adaptive_gradient ? "true" : "false") << "\n";
  os << "adaptive_lr = " << (c.adaptive_lr ? "true" : "false") << "\n";
  os << "count = " << detail::count_name(c.count) << "\n";
  os << "leapfrog_steps = " << c.leapfrog_steps << "\n";
  os << "leapfrog_step = " << fmt_double(c.leapfrog_step) << "\n";
  os << "proposal_sigma = " << fmt_double(c.proposal_sigma) << "\n";
  os << "alpha = " << fmt_double(c.alpha) << "\n";
  os << "alpha_prior_mean = " << fmt_double(c.alpha_prior_mean) << "\n";
  os << "alpha_prior_var = " << fmt_double(c.alpha_prior_var) << "\n";
  os << "top_n = ";
  for (std::size_t i = 0; i < c.top_n.size(); ++i) os << (i ? "," : "") << c.top_n[i];
  os << "\n";
  os << "workers = " << c.workers << "\n";
  return os.str();
}

inline ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig c;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  bool versioned = false;
  std::map<std::string, std::function<void(const std::string&, const std::string&)>> setters;
  auto size_key = [&](std::size_t& field) {
    return [&field](const std::string& k, const std::string& v) { field = detail::parse_number<std::size_t>(k, v); };
  };
  auto real_key = [&](double& field) {
    return [&field](const std::string& k, const std::string& v) { field = detail::parse_number<double>(k, v); };
  };
  auto bool_key = [&](bool& field) {
    return [&field](const std::string& k, const std::string& v) { field = detail::parse_bool(k, v); };
  };
  setters["version"] = [&](const std::string& k, const std::string& v) {
    int ver = detail::parse_number<int>(k, v);
    if (ver != kConfigVersion)
      throw ConfigError("config version " + std::to_string(ver) + " is not supported (expected " +
                        std::to_string(kConfigVersion) + ")");
    versioned = true;
  };
  setters["attribute"] = [&](const std::string&, const std::string& v) { c.attribute = parse_attribute_mode(v); };
  setters["master_seed"] = [&](const std::string& k, const std::string& v) {
    c.master_seed = detail::parse_number<std::uint64_t>(k, v);
  };
  setters["output_dir"] = [&](const std::string&, const std::string& v) { c.output_dir = v; };
  setters["styles"] = size_key(c.styles);
  setters["codec_images"] = size_key(c.codec_images);
  setters["predictor_images"] = size_key(c.predictor_images);
  setters["test_images"] = size_key(c.test_images);
  setters["codec_autoencoder_steps"] = size_key(c.codec_autoencoder_steps);
  setters["codec_transfer_steps"] = size_key(c.codec_transfer_steps);
  setters["predictor_epochs"] = size_key(c.predictor_epochs);
  setters["gan_iterations"] = size_key(c.gan_iterations);
  setters["gan_z_dim"] = size_key(c.gan_z_dim);
  setters["gan_lr"] = real_key(c.gan_lr);
  setters["sampler"] = [&](const std::string&, const std::string& v) { c.sampler = parse_sampler(v); };
  setters["tau"] = real_key(c.tau);
  setters["lambda"] = real_key(c.lambda);
  setters["samples"] = size_key(c.samples);
  setters["burn_in"] = size_key(c.burn_in);
  setters["adaptive_gradient"] = bool_key(c.adaptive_gradient);
  setters["adaptive_lr"] = bool_key(c.adaptive_lr);
  setters["count"] = [&](const std::string& k, const std::string& v) {
    if (v == "accepted") c.count = CountMode::accepted;
    else if (v == "proposals") c.count = CountMode::proposals;
    else throw ConfigError("config key '" + k + "': expected accepted|proposals");
  };
  setters["leapfrog_steps"] = size_key(c.leapfrog_steps);
  setters["leapfrog_step"] = real_key(c.leapfrog_step);
  setters["proposal_sigma"] = real_key(c.proposal_sigma);
  setters["alpha"] = real_key(c.alpha);
  setters["alpha_prior_mean"] = real_key(c.alpha_prior_mean);
  setters["alpha_prior_var"] = real_key(c.alpha_prior_var);
  setters["top_n"] = [&](const std::string& k, const std::string& v) {
    c.top_n.clear();
    std::istringstream items(v);
    std::string item;
    while (std::getline(items, item, ',')) c.top_n.push_back(detail::parse_number<std::size_t>(k, detail::trim(item)));
  };
  setters["workers"] = size_key(c.workers);

  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    it->second(key, value);
  }
  if (!versioned) throw ConfigError("config has no version line");
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// ---------------------------------------------------------------------------
// Seeds
//
// Every stage draws from derive_seed(master, "<stage>") so any stage can be
// rerun alone; per-image chains use derive_seed(master, "<method>", image id).

struct StageSeeds {
  std::uint64_t content, styles, codec, internal, external, augment_internal, augment_external, gan;

  static StageSeeds from(std::uint64_t master) {
    return {derive_seed(master, "data.content"),     derive_seed(master, "data.styles"),
            derive_seed(master, "train.codec"),      derive_seed(master, "train.predictor.internal"),
            derive_seed(master, "train.predictor.external"), derive_seed(master, "augment.internal"),
            derive_seed(master, "augment.external"), derive_seed(master, "train.gan")};
  }
};

// ---------------------------------------------------------------------------
// Corpora

inline double attribute_label(AttributeMode m, const Tensor& img) {
  return m == AttributeMode::regression ? synth::memorability(img) : synth::scariness_label(img);
}

/// Content images carry global ids: [0, codec) codec set, then the internal
/// split, the external split and the test set, in that order.
struct Corpora {
  AttributeMode attribute = AttributeMode::regression;
  std::uint64_t master_seed = 0;
  std::vector<Tensor> content;  // indexed by id
  std::vector<Tensor> style_images;
  std::vector<std::size_t> codec_ids, internal_ids, external_ids, test_ids;

  std::vector<Tensor> images(const std::vector<std::size_t>& ids) const {
    std::vector<Tensor> out;
    out.reserve(ids.size());
    for (auto i : ids) out.push_back(content.at(i));
    return out;
  }
  std::vector<double> labels(const std::vector<std::size_t>& ids) const {
    std::vector<double> out;
    for (auto i : ids) out.push_back(attribute_label(attribute, content.at(i)));
    return out;
  }
  bool splits_disjoint() const {
    std::vector<int> owner(content.size(), -1);
    int k = 0;
    for (const auto* ids : {&codec_ids, &internal_ids, &external_ids, &test_ids}) {
      for (auto i : *ids) {
        if (i >= owner.size() || owner[i] != -1) return false;
        owner[i] = k;
      }
      ++k;
    }
    return true;
  }
};

inline Corpora gen_synthetic_data(const ExperimentConfig& cfg) {
  cfg.validate();
  auto seeds = StageSeeds::from(cfg.master_seed);
  Corpora c;
  c.attribute = cfg.attribute;
  c.master_seed = cfg.master_seed;
  Rng content_rng(seeds.content);
  std::size_t total = cfg.codec_images + 2 * cfg.predictor_images + cfg.test_images;
  for (std::size_t i = 0; i < total; ++i) c.content.push_back(synth::content_image(content_rng));
  std::size_t next = 0;
  auto take = [&](std::vector<std::size_t>& ids, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) ids.push_back(next++);
  };
  take(c.codec_ids, cfg.codec_images);
  take(c.internal_ids, cfg.predictor_images);
  take(c.external_ids, cfg.predictor_images);
  take(c.test_ids, cfg.test_images);
  Rng style_rng(seeds.styles);
  for (std::size_t i = 0; i < cfg.styles; ++i) c.style_images.push_back(synth::style_image(style_rng));
  return c;
}

namespace detail {

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
  if (!out) throw IoError("write failed for " + p.string());
}

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw IoError("cannot create directory " + p.string());
}

inline std::vector<double> as_doubles(const std::vector<std::size_t>& v) { return {v.begin(), v.end()}; }

}  // namespace detail

/// Writes <dir>/corpus.ck, manifest.json and one label CSV per split.
/// Refuses to touch an existing corpus unless `overwrite` is set.
inline void save_corpora(const Corpora& c, const ExperimentConfig& cfg, const fs::path& dir, bool overwrite) {
  if (fs::exists(dir / "corpus.ck") && !overwrite)
    throw IoError("corpus already exists at " + dir.string() + " (pass the overwrite flag to replace it)");
  detail::ensure_dir(dir);
  Checkpoint ck;
  ck.put_scalar("attribute", c.attribute == AttributeMode::binary ? 1.0 : 0.0);
  ck.put_scalar("master_seed", static_cast<double>(c.master_seed));
  for (std::size_t i = 0; i < c.content.size(); ++i) ck.put("content/" + std::to_string(i), c.content[i]);
  for (std::size_t i = 0; i < c.style_images.size(); ++i) ck.put("style/" + std::to_string(i), c.style_images[i]);
  auto put_ids = [&](const std::string& name, const std::vector<std::size_t>& ids) {
    ck.put("ids/" + name, {ids.size()}, detail::as_doubles(ids));
  };
  if (c.codec_ids.empty() || c.internal_ids.empty() || c.external_ids.empty() || c.test_ids.empty())
    throw ContractError("cannot save a corpus with an empty split");
  put_ids("codec", c.codec_ids);
  put_ids("internal", c.internal_ids);
  put_ids("external", c.external_ids);
  put_ids("test", c.test_ids);
  ck.save((dir / "corpus.ck").string());

  auto seeds = StageSeeds::from(cfg.master_seed);
  Json m;
  m["config_version"] = kConfigVersion;
  m["attribute"] = to_string(c.attribute);
  m["master_seed"] = cfg.master_seed;
  m["seeds"] = {{"data.content", seeds.content},         {"data.styles", seeds.styles},
                {"train.codec", seeds.codec},             {"train.predictor.internal", seeds.internal},
                {"train.predictor.external", seeds.external}, {"augment.internal", seeds.augment_internal},
                {"augment.external", seeds.augment_external}, {"train.gan", seeds.gan}};
  m["counts"] = {{"content", c.content.size()},     {"styles", c.style_images.size()},
                 {"codec", c.codec_ids.size()},     {"internal", c.internal_ids.size()},
                 {"external", c.external_ids.size()}, {"test", c.test_ids.size()}};
  m["style_images"] = {{"generator", "procedural abstract art"}, {"seed", seeds.styles}};
  detail::write_text(dir / "manifest.json", m.dump(2) + "\n");

  for (auto [name, ids] : {std::pair{"internal", &c.internal_ids}, std::pair{"external", &c.external_ids},
                           std::pair{"test", &c.test_ids}}) {
    std::ostringstream os;
    os << "image_id,label\n";
    auto labels = c.labels(*ids);
    for (std::size_t i = 0; i < ids->size(); ++i) os << (*ids)[i] << "," << detail::fmt_double(labels[i]) << "\n";
    detail::write_text(dir / (std::string("labels_") + name + ".csv"), os.str());
  }
}

inline Corpora load_corpora(const fs::path& dir) {
  auto ck = Checkpoint::load((dir / "corpus.ck").string());
  Corpora c;
  c.attribute = ck.scalar("attribute") != 0.0 ? AttributeMode::binary : AttributeMode::regression;
  c.master_seed = static_cast<std::uint64_t>(ck.scalar("master_seed"));
  auto ids = [&](const std::string& name) {
    auto v = ck.at("ids/" + name).values;
    return std::vector<std::size_t>(to_sizes(v));
  };
  c.codec_ids = ids("codec");
  c.internal_ids = ids("internal");
  c.external_ids = ids("external");
  c.test_ids = ids("test");
  for (std::size_t i = 0; ck.contains("content/" + std::to_string(i)); ++i) c.content.push_back(ck.tensor("content/" + std::to_string(i)));
  for (std::size_t i = 0; ck.contains("style/" + std::to_string(i)); ++i) c.style_images.push_back(ck.tensor("style/" + std::to_string(i)));
  if (!c.splits_disjoint()) throw IngestionError("corpus splits overlap or reference missing images");
  return c;
}

// ---------------------------------------------------------------------------
// Training stages

inline Codec train_codec_stage(const Corpora& c, const ExperimentConfig& cfg, TransferReport* report = nullptr) {
  TransferTrainConfig t;
  t.autoencoder_steps = cfg.codec_autoencoder_steps;
  t.transfer_steps = cfg.codec_transfer_steps;
  t.seed = StageSeeds::from(cfg.master_seed).codec;
  auto images = c.images(c.codec_ids);
  std::size_t held = std::max<std::size_t>(1, images.size() / 10);
  std::vector<Tensor> held_out(images.end() - static_cast<std::ptrdiff_t>(held), images.end());
  images.resize(images.size() - held);
  if (images.empty()) images = held_out;
  return train_transfer(images, c.style_images, held_out, t, report);
}

/// A split plus as many stylized versions of it (random corpus style,
/// alpha ~ U[0,1]), labelled by the hidden attribute, so the predictor sees
/// the decoder's output distribution it will later score.
inline std::pair<std::vector<Tensor>, std::vector<double>> augmented_split(const Corpora& c,
                                                                           const std::vector<std::size_t>& ids,
                                                                           const Codec& codec, std::uint64_t seed) {
  std::vector<Tensor> images = c.images(ids);
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, c.style_images.size() - 1);
  std::size_t n = images.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor& style = c.style_images[pick(rng)];
    double alpha = uniform01(rng);
    images.push_back(stylize_alpha(images[i], style, alpha, codec).detach());
  }
  std::vector<double> labels;
  for (const auto& img : images) labels.push_back(attribute_label(c.attribute, img));
  return {std::move(images), std::move(labels)};
}

struct PredictorStageReport {
  PredictorReport internal, external;
};

inline PredictorPair train_predictors_stage(const Corpora& c, const Codec& codec, const ExperimentConfig& cfg,
                                            PredictorStageReport* report = nullptr) {
  if (c.attribute != cfg.attribute) throw ConfigError("corpus attribute does not match the experiment attribute");
  auto seeds = StageSeeds::from(cfg.master_seed);
  PredictorStageReport local;
  PredictorStageReport& rep = report ? *report : local;
  auto train = [&](const std::vector<std::size_t>& ids, std::uint64_t aug_seed, std::uint64_t seed, PredictorReport& r) {
    auto [images, labels] = augmented_split(c, ids, codec, aug_seed);
    PredictorTrainConfig t;
    t.epochs = cfg.predictor_epochs;
    t.seed = seed;
    return train_predictor(images, labels, c.attribute, t, &r);
  };
  PredictorPair pair{train(c.internal_ids, seeds.augment_internal, seeds.internal, rep.internal),
                     train(c.external_ids, seeds.augment_external, seeds.external, rep.external), c.internal_ids,
                     c.external_ids};
  if (!pair.disjoint()) throw ContractError("internal and external predictor splits overlap");
  return pair;
}

inline StyleGan train_gan_stage(const Corpora& c, const Codec& codec, const ExperimentConfig& cfg,
                                GanReport* report = nullptr) {
  auto corpus = build_corpus(c.style_images, codec.encoder);
  GanConfig g;
  g.z_dim = cfg.gan_z_dim;
  g.iterations = cfg.gan_iterations;
  g.critic_adam.lr = g.generator_adam.lr = cfg.gan_lr;
  g.seed = StageSeeds::from(cfg.master_seed).gan;
  return train_wgan_gp(corpus, g, report);
}

// ---------------------------------------------------------------------------
// Enhancement

struct Candidate {
  std::size_t index = 0;  // sample index within the method's output
  double internal = 0;
  double alpha = 0;
  std::vector<double> style;  // flattened (mu, sigma)
  std::optional<double> external;
  std::optional<double> delta;
};

/// Ranked output of one method on one image. Only the top `keep`
/// candidates (and their stylized images) are retained.
struct ImageRun {
  std::size_t image_id = 0;
  std::size_t count = 0;  // candidates produced before truncation
  std::size_t proposals = 0;
  std::size_t accepted = 0;
  std::optional<double> original_external;
  std::vector<Candidate> ranked;
  std::vector<Tensor> images;  // stylized images, parallel to `ranked`
};

/// Descending internal score; ties broken by ascending sample index.
inline void rank_candidates(std::vector<Candidate>& c, std::vector<Tensor>& images) {
  std::vector<std::size_t> order(c.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (c[a].internal != c[b].internal) return c[a].internal > c[b].internal;
    return c[a].index < c[b].index;
  });
  std::vector<Candidate> rc;
  std::vector<Tensor> ri;
  for (auto i : order) {
    rc.push_back(std::move(c[i]));
    if (!images.empty()) ri.push_back(std::move(images[i]));
  }
  c = std::move(rc);
  images = std::move(ri);
}

inline void truncate_run(ImageRun& run, std::size_t keep) {
  if (run.ranked.size() > keep) run.ranked.resize(keep);
  if (run.images.size() > keep) run.images.resize(keep);
}

/// Internal-only view of the trained models used by every enhancement
/// method. The external predictor is deliberately absent.
struct EnhanceModels {
  const Codec* codec = nullptr;
  const Predictor* internal = nullptr;
  const StyleGenerator* generator = nullptr;  // not needed by the baseline
  const std::vector<StyleVector>* corpus_styles = nullptr;  // needed by the baseline

  BaeModels bae() const { return {generator, codec, internal}; }
};

inline ImageRun finish_run(std::size_t image_id, std::vector<Candidate> cands, std::vector<Tensor> images,
                           std::size_t keep) {
  ImageRun run;
  run.image_id = image_id;
  run.count = cands.size();
  rank_candidates(cands, images);
  run.ranked = std::move(cands);
  run.images = std::move(images);
  truncate_run(run, keep);
  return run;
}

/// Stylizes I with every corpus style at alpha and ranks by internal score.
inline ImageRun run_baseline_b(const Tensor& image, std::size_t image_id, const EnhanceModels& m, double alpha,
                               std::size_t keep) {
  if (!m.codec || !m.internal || !m.corpus_styles) throw ContractError("baseline needs a codec, a predictor and styles");
  if (m.corpus_styles->empty()) throw ContractError("baseline needs at least one style");
  check_alpha(alpha);
  Tensor feat = m.codec->encoder.forward(image.detach()).detach();
  std::vector<Candidate> cands;
  std::vector<Tensor> images;
  for (std::size_t k = 0; k < m.corpus_styles->size(); ++k) {
    const auto& s = (*m.corpus_styles)[k];
    Tensor out = m.codec->decoder.forward(stylized_features(feat, s, alpha)).detach();
    cands.push_back({k, m.internal->score(out), alpha, s.flatten(), std::nullopt, std::nullopt});
    images.push_back(std::move(out));
  }
  return finish_run(image_id, std::move(cands), std::move(images), keep);
}

inline ImageRun run_sampled(const Tensor& image, std::size_t image_id, const EnhanceModels& m,
                            const BaeEnergyConfig& ecfg, const ChainConfig& ccfg, std::size_t keep) {
  BaeSamples out;
  try {
    out = sample_styles_bae(image, m.bae(), ecfg, ccfg);
  } catch (const StuckChainError& e) {
    throw StuckChainError("image " + std::to_string(image_id) + ": " + e.what());
  } catch (const EnergyEvaluationError& e) {
    throw EnergyEvaluationError("image " + std::to_string(image_id) + ": " + e.what());
  }
  BaeEnergy energy(image, m.bae(), ecfg);
  std::vector<Candidate> cands;
  std::vector<Tensor> images;
  for (std::size_t i = 0; i < out.chain.samples.size(); ++i) {
    Tensor img = energy.stylized(out.chain.samples[i]).detach();
    cands.push_back({i, m.internal->score(img), out.alphas[i], out.styles[i].flatten(), std::nullopt, std::nullopt});
    images.push_back(std::move(img));
  }
  auto run = finish_run(image_id, std::move(cands), std::move(images), keep);
  run.proposals = out.chain.proposals;
  run.accepted = out.chain.accepted;
  return run;
}

inline ImageRun run_bae(const Tensor& image, std::size_t image_id, const EnhanceModels& m, BaeEnergyConfig ecfg,
                        const ChainConfig& ccfg, std::size_t keep) {
  ecfg.alpha_policy = AlphaPolicy::fixed;
  return run_sampled(image, image_id, m, ecfg, ccfg, keep);
}

inline ImageRun run_abae(const Tensor& image, std::size_t image_id, const EnhanceModels& m, BaeEnergyConfig ecfg,
                         const ChainConfig& ccfg, std::size_t keep) {
  ecfg.alpha_policy = AlphaPolicy::adaptive;
  return run_sampled(image, image_id, m, ecfg, ccfg, keep);
}

/// Control: M latents drawn from the prior, no MCMC, fixed alpha.
inline ImageRun run_random(const Tensor& image, std::size_t image_id, const EnhanceModels& m, double alpha,
                           std::size_t samples, std::uint64_t seed, std::size_t keep) {
  if (!m.codec || !m.internal || !m.generator) throw ContractError("random control needs a codec, a predictor and G");
  check_alpha(alpha);
  Tensor feat = m.codec->encoder.forward(image.detach()).detach();
  Rng rng(seed);
  std::vector<Candidate> cands;
  std::vector<Tensor> images;
  for (std::size_t i = 0; i < samples; ++i) {
    auto s = (*m.generator)(standard_normal(rng, m.generator->z_dim()));
    Tensor out = m.codec->decoder.forward(stylized_features(feat, s, alpha)).detach();
    cands.push_back({i, m.internal->score(out), alpha, s.flatten(), std::nullopt, std::nullopt});
    images.push_back(std::move(out));
  }
  return finish_run(image_id, std::move(cands), std::move(images), keep);
}

/// One method over the test images.
struct MethodReport {
  std::string label;  // e.g. "bae-langevin"
  Method method = Method::bae;
  std::optional<SamplerKind> sampler;
  Json params;
  std::vector<ImageRun> images;
};

inline std::string method_label(Method m, std::optional<SamplerKind> s) {
  if (m == Method::bae || m == Method::abae) return to_string(m) + "-" + to_string(s.value_or(SamplerKind::langevin));
  return to_string(m);
}

/// Runs `f(i)` for i in [0, n) on `workers` threads; results land at index i
/// so the output does not depend on scheduling.
template <class F>
void parallel_for(std::size_t n, std::size_t workers, F&& f) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, n); ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          f(i);
        } catch (...) {
          std::lock_guard lock(failure_mu);
          if (!failure) failure = std::current_exception();
          next = n;
        }
      }
    });
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

inline MethodReport enhance(const std::vector<Tensor>& images, const std::vector<std::size_t>& ids, Method method,
                            const EnhanceModels& m, const ExperimentConfig& cfg,
                            const std::function<void(std::size_t)>& progress = {}) {
  cfg.validate();
  if (images.size() != ids.size()) throw ContractError("one id per test image required");
  MethodReport rep;
  rep.method = method;
  if (method == Method::bae || method == Method::abae) rep.sampler = cfg.sampler;
  rep.label = method_label(method, rep.sampler);
  rep.params = {{"attribute", to_string(cfg.attribute)}, {"master_seed", cfg.master_seed}, {"alpha", cfg.alpha}};
  if (method != Method::baseline) rep.params["samples"] = cfg.samples;
  if (rep.sampler) {
    rep.params["sampler"] = to_string(*rep.sampler);
    rep.params["tau"] = cfg.tau;
    rep.params["lambda"] = cfg.lambda;
    rep.params["normalization"] = to_string(cfg.normalization().mode);
    rep.params["burn_in"] = cfg.burn_in;
    rep.params["adaptive_gradient"] = cfg.adaptive_gradient;
    rep.params["adaptive_lr"] = cfg.adaptive_lr;
    rep.params["count"] = detail::count_name(cfg.count);
  }
  if (method == Method::abae) rep.params["alpha_prior"] = {cfg.alpha_prior_mean, cfg.alpha_prior_var};
  rep.images.resize(images.size());
  std::atomic<std::size_t> done{0};
  parallel_for(images.size(), cfg.workers, [&](std::size_t i) {
    std::uint64_t seed = derive_seed(cfg.master_seed, "enhance." + rep.label, ids[i]);
    switch (method) {
      case Method::baseline: rep.images[i] = run_baseline_b(images[i], ids[i], m, cfg.alpha, cfg.keep()); break;
      case Method::bae: rep.images[i] = run_bae(images[i], ids[i], m, cfg.energy(false), cfg.chain(seed), cfg.keep()); break;
      case Method::abae: rep.images[i] = run_abae(images[i], ids[i], m, cfg.energy(true), cfg.chain(seed), cfg.keep()); break;
      case Method::random: rep.images[i] = run_random(images[i], ids[i], m, cfg.alpha, cfg.samples, seed, cfg.keep()); break;
    }
    if (progress) progress(++done);
  });
  return rep;
}

// ---------------------------------------------------------------------------
// External evaluation

/// The evaluation-only predictor, with a call counter so tests can verify
/// that sampling and ranking never consult it.
class ExternalScorer {
 public:
  explicit ExternalScorer(const Predictor& p) : p_(&p) {}
  double operator()(const Tensor& image) const {
    ++calls_;
    return p_->score(image);
  }
  std::size_t calls() const { return calls_.load(); }

 private:
  const Predictor* p_;
  mutable std::atomic<std::size_t> calls_{0};
};

/// delta_A(I, s) = E(stylized) - E(original).
inline double delta_a(const Tensor& original, const Tensor& stylized, const ExternalScorer& external) {
  return external(stylized) - external(original);
}

/// Fills external scores and deltas for every retained candidate.
inline void evaluate_external(MethodReport& rep, const std::map<std::size_t, const Tensor*>& originals,
                              const ExternalScorer& external) {
  for (auto& run : rep.images) {
    auto it = originals.find(run.image_id);
    if (it == originals.end()) throw ContractError("no original image for id " + std::to_string(run.image_id));
    if (run.images.size() != run.ranked.size())
      throw ContractError("stylized images missing for image " + std::to_string(run.image_id));
    double base = external(*it->second);
    run.original_external = base;
    for (std::size_t k = 0; k < run.ranked.size(); ++k) {
      run.ranked[k].external = external(run.images[k]);
      run.ranked[k].delta = *run.ranked[k].external - base;
    }
  }
}

/// Mean delta_A over the N internally top-ranked results.
inline double topn_mean_delta(const ImageRun& run, std::size_t n) {
  if (n == 0) throw ContractError("top-N needs N >= 1");
  if (n > run.count || n > run.ranked.size())
    throw ContractError("top-" + std::to_string(n) + " requested but only " +
                        std::to_string(std::min(run.count, run.ranked.size())) + " results available");
  double s = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (!run.ranked[k].delta) throw ContractError("result has not been evaluated by the external predictor");
    s += *run.ranked[k].delta;
  }
  return s / static_cast<double>(n);
}

/// Mean over images of topn_mean_delta.
inline double mean_topn_delta(const MethodReport& rep, std::size_t n) {
  if (rep.images.empty()) return 0.0;
  double s = 0;
  for (const auto& r : rep.images) s += topn_mean_delta(r, n);
  return s / static_cast<double>(rep.images.size());
}

// ---------------------------------------------------------------------------
// Serialisation of runs

inline Json to_json(const MethodReport& rep) {
  Json j;
  j["label"] = rep.label;
  j["method"] = to_string(rep.method);
  j["params"] = rep.params;
  Json imgs = Json::array();
  for (const auto& r : rep.images) {
    Json ji;
    ji["image_id"] = r.image_id;
    ji["count"] = r.count;
    ji["proposals"] = r.proposals;
    ji["accepted"] = r.accepted;
    ji["original_external"] = r.original_external ? Json(*r.original_external) : Json(nullptr);
    Json ranked = Json::array();
    for (const auto& c : r.ranked) {
      ranked.push_back({{"index", c.index},
                        {"internal", c.internal},
                        {"alpha", c.alpha},
                        {"external", c.external ? Json(*c.external) : Json(nullptr)},
                        {"delta", c.delta ? Json(*c.delta) : Json(nullptr)},
                        {"style", c.style}});
    }
    ji["ranked"] = std::move(ranked);
    imgs.push_back(std::move(ji));
  }
  j["images"] = std::move(imgs);
  return j;
}

inline MethodReport method_report_from_json(const Json& j) {
  MethodReport rep;
  try {
    rep.label = j.at("label").get<std::string>();
    rep.method = parse_method(j.at("method").get<std::string>());
    rep.params = j.at("params");
    if (rep.params.contains("sampler")) rep.sampler = parse_sampler(rep.params["sampler"].get<std::string>());
    for (const auto& ji : j.at("images")) {
      ImageRun r;
      r.image_id = ji.at("image_id").get<std::size_t>();
      r.count = ji.at("count").get<std::size_t>();
      r.proposals = ji.at("proposals").get<std::size_t>();
      r.accepted = ji.at("accepted").get<std::size_t>();
      if (!ji.at("original_external").is_null()) r.original_external = ji["original_external"].get<double>();
      for (const auto& jc : ji.at("ranked")) {
        Candidate c;
        c.index = jc.at("index").get<std::size_t>();
        c.internal = jc.at("internal").get<double>();
        c.alpha = jc.at("alpha").get<double>();
        if (!jc.at("external").is_null()) c.external = jc["external"].get<double>();
        if (!jc.at("delta").is_null()) c.delta = jc["delta"].get<double>();
        c.style = jc.at("style").get<std::vector<double>>();
        r.ranked.push_back(std::move(c));
      }
      rep.images.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(std::string("malformed run file: ") + e.what());
  }
  return rep;
}

/// <dir>/results.json plus <dir>/stylized.ck holding the retained images.
inline void save_method_report(const MethodReport& rep, const fs::path& dir) {
  detail::ensure_dir(dir);
  detail::write_text(dir / "results.json", to_json(rep).dump(1) + "\n");
  Checkpoint ck;
  for (const auto& r : rep.images)
    for (std::size_t k = 0; k < r.images.size(); ++k)
      ck.put(std::to_string(r.image_id) + "/" + std::to_string(k), r.images[k]);
  ck.save((dir / "stylized.ck").string());
}

inline MethodReport load_method_report(const fs::path& dir, bool with_images = true) {
  Json j;
  try {
    j = Json::parse(detail::read_text(dir / "results.json"));
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError("cannot parse " + (dir / "results.json").string() + ": " + e.what());
  }
  auto rep = method_report_from_json(j);
  if (with_images) {
    auto ck = Checkpoint::load((dir / "stylized.ck").string());
    for (auto& r : rep.images)
      for (std::size_t k = 0; k < r.ranked.size(); ++k) r.images.push_back(ck.tensor(std::to_string(r.image_id) + "/" + std::to_string(k)));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Reports

namespace detail {

inline std::string fmt_csv(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

struct Series {
  std::string name;
  std::string colour;
  std::vector<double> values;
};

/// Line plot of per-image sorted curves (index on x, value on y).
inline std::string svg_plot(const std::string& title, const std::string& ylabel, const std::vector<Series>& series) {
  const double W = 640, H = 400, L = 60, R = 150, T = 40, B = 50;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  std::size_t n = 0;
  for (const auto& s : series) {
    n = std::max(n, s.values.size());
    for (double v : s.values) lo = std::min(lo, v), hi = std::max(hi, v);
  }
  if (!(lo < hi)) {
    lo = std::isfinite(lo) ? lo - 1 : 0;
    hi = std::isfinite(hi) ? hi + 1 : 1;
  }
  auto X = [&](std::size_t i) { return L + (n > 1 ? (W - L - R) * static_cast<double>(i) / static_cast<double>(n - 1) : 0.0); };
  auto Y = [&](double v) { return T + (H - T - B) * (hi - v) / (hi - lo); };
  std::ostringstream os;
  char buf[160];
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  std::snprintf(buf, sizeof buf, "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n", L, H - B, W - R, H - B);
  os << buf;
  std::snprintf(buf, sizeof buf, "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n", L, T, L, H - B);
  os << buf;
  for (int k = 0; k <= 4; ++k) {
    double v = lo + (hi - lo) * k / 4.0;
    std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%.2f\" text-anchor=\"end\">%.3g</text>\n", L - 5, Y(v) + 4, v);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" text-anchor=\"middle\">images (sorted)</text>\n", (L + W - R) / 2, H - 15);
  os << buf;
  std::snprintf(buf, sizeof buf, "<text x=\"15\" y=\"%g\" transform=\"rotate(-90 15 %g)\" text-anchor=\"middle\">", (T + H - B) / 2, (T + H - B) / 2);
  os << buf << ylabel << "</text>\n";
  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    if (!s.values.empty()) {
      os << "<polyline fill=\"none\" stroke=\"" << s.colour << "\" stroke-width=\"1.5\" points=\"";
      for (std::size_t i = 0; i < s.values.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%s%.2f,%.2f", i ? " " : "", X(i), Y(s.values[i]));
        os << buf;
      }
      os << "\"/>\n";
    }
    double ly = T + 18.0 * static_cast<double>(si);
    std::snprintf(buf, sizeof buf, "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"%s\" stroke-width=\"2\"/>\n", W - R + 10, ly,
                  W - R + 30, ly, s.colour.c_str());
    os << buf;
    std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\">", W - R + 35, ly + 4);
    os << buf << s.name << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

inline const char* palette(std::size_t i) {
  static const char* colours[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  return colours[i % 8];
}

}  // namespace detail

/// CSV tables, JSON summary and SVG curves for a set of evaluated runs.
/// Output bytes depend only on the run contents.
inline void emit_report(const std::vector<MethodReport>& reports, const std::vector<std::size_t>& top_n,
                        const fs::path& out_dir) {
  detail::ensure_dir(out_dir);
  using detail::fmt_csv;
  std::ostringstream per_image, aggregate;
  per_image << "method,image_id,original_external,top1_internal,top1_external,top1_alpha";
  for (auto n : top_n) per_image << ",delta_top" << n;
  per_image << "\n";
  aggregate << "method,top_n,images,mean_delta\n";
  Json summary;
  summary["report_version"] = kConfigVersion;
  summary["top_n"] = top_n;
  summary["methods"] = Json::array();

  std::vector<detail::Series> delta_curves, score_curves;
  std::vector<double> originals;
  std::size_t largest_n = top_n.empty() ? 1 : *std::max_element(top_n.begin(), top_n.end());
  for (std::size_t mi = 0; mi < reports.size(); ++mi) {
    const auto& rep = reports[mi];
    Json jm;
    jm["label"] = rep.label;
    jm["params"] = rep.params;
    jm["images"] = rep.images.size();
    Json means = Json::object();
    std::vector<double> curve, top1_scores;
    for (const auto& r : rep.images) {
      if (r.ranked.empty() || !r.original_external || !r.ranked[0].external)
        throw ContractError("run '" + rep.label + "' has not been evaluated");
      per_image << rep.label << "," << r.image_id << "," << fmt_csv(*r.original_external) << ","
                << fmt_csv(r.ranked[0].internal) << "," << fmt_csv(*r.ranked[0].external) << "," << fmt_csv(r.ranked[0].alpha);
      for (auto n : top_n) per_image << "," << fmt_csv(topn_mean_delta(r, n));
      per_image << "\n";
      curve.push_back(topn_mean_delta(r, std::min(largest_n, r.ranked.size())));
      top1_scores.push_back(*r.ranked[0].external);
      if (mi == 0) originals.push_back(*r.original_external);
    }
    for (auto n : top_n) {
      double m = mean_topn_delta(rep, n);
      aggregate << rep.label << "," << n << "," << rep.images.size() << "," << fmt_csv(m) << "\n";
      means["top" + std::to_string(n)] = m;
    }
    jm["mean_delta"] = means;
    std::size_t proposals = 0, accepted = 0;
    for (const auto& r : rep.images) proposals += r.proposals, accepted += r.accepted;
    if (proposals > 0) jm["acceptance_rate"] = static_cast<double>(accepted) / static_cast<double>(proposals);
    summary["methods"].push_back(std::move(jm));
    std::sort(curve.begin(), curve.end(), std::greater<>());
    std::sort(top1_scores.begin(), top1_scores.end());
    delta_curves.push_back({rep.label, detail::palette(mi), std::move(curve)});
    score_curves.push_back({rep.label + " top-1", detail::palette(mi), std::move(top1_scores)});
  }
  std::sort(originals.begin(), originals.end());
  score_curves.insert(score_curves.begin(), {"original", "#000000", originals});

  detail::write_text(out_dir / "per_image.csv", per_image.str());
  detail::write_text(out_dir / "aggregate.csv", aggregate.str());
  detail::write_text(out_dir / "summary.json", summary.dump(2) + "\n");
  detail::write_text(out_dir / "delta_curves.svg",
                     detail::svg_plot("Sorted mean score difference (top-" + std::to_string(largest_n) + ")", "mean delta_A",
                                      delta_curves));
  detail::write_text(out_dir / "score_curves.svg",
                     detail::svg_plot("Sorted external scores", "external score", score_curves));
}

// ---------------------------------------------------------------------------
// Model bundle on disk

struct ModelPaths {
  fs::path root;
  fs::path codec() const { return root / "models" / "codec.ck"; }
  fs::path predictors() const { return root / "models" / "predictors.ck"; }
  fs::path gan() const { return root / "models" / "gan.ck"; }
  fs::path data() const { return root / "data"; }
  fs::path run(const std::string& label) const { return root / "runs" / label; }
};

inline void save_predictors(const PredictorPair& p, const fs::path& path) {
  detail::ensure_dir(path.parent_path());
  Checkpoint ck;
  p.internal.write(ck, "internal.");
  p.external.write(ck, "external.");
  ck.put("internal.ids", {p.internal_ids.size()}, detail::as_doubles(p.internal_ids));
  ck.put("external.ids", {p.external_ids.size()}, detail::as_doubles(p.external_ids));
  ck.save(path.string());
}

/// Loads one side of the pair ("internal." or "external.").
inline Predictor load_predictor(const fs::path& path, const std::string& which) {
  auto ck = Checkpoint::load(path.string());
  auto p = Predictor::read(ck, which);
  set_trainable(p.net().parameters(), false);
  return p;
}

}  // namespace bae
