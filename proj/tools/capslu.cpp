#include <algorithm>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "capslu/checkpoint.hpp"
#include "capslu/config.hpp"
#include "capslu/dataset.hpp"
#include "capslu/experiment.hpp"
#include "capslu/gradcheck.hpp"
#include "capslu/rng.hpp"
#include "capslu/synth.hpp"
#include "capslu/trainer.hpp"

namespace fs = std::filesystem;
using namespace capslu;

namespace {

// Seed streams derived from the root seed.
constexpr std::uint64_t kSplitStream = 2;
constexpr std::uint64_t kPlanStream = 3;

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t jobs = 1;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c, bool out_required) {
  cmd->add_option("--config", c.config_path, "key = value configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "root random seed (overrides the config)");
  auto* out = cmd->add_option("--out", c.out, "output directory");
  if (out_required) out->required();
  cmd->add_option("--jobs", c.jobs, "worker threads")->check(CLI::PositiveNumber);
  cmd->add_option("--set", c.overrides, "config override, section.key=value (repeatable)");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg;
  if (!c.config_path.empty()) cfg = load_config(c.config_path);
  for (const auto& o : c.overrides) cfg.apply_override(o);
  if (c.seed) cfg.seed = *c.seed;
  cfg.train.seed = cfg.seed;
  cfg.synth.seed = cfg.seed;
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

fs::path prepare_out(const std::string& out) {
  fs::path dir(out);
  fs::create_directories(dir);
  return dir;
}

void echo_config(const RunConfig& cfg, const fs::path& dir) {
  const std::string text = cfg.to_text();
  std::cerr << "# resolved config\n" << text << '\n';
  if (!dir.empty()) write_text(dir / "config.ini", text);
}

/// Adopts the data's feature width and label count into the model config.
void fit_model_to_corpus(RunConfig& cfg, const Corpus& corpus) {
  if (corpus.examples.empty()) throw std::runtime_error("manifest has no utterances");
  cfg.model.input_dim = corpus.examples.front().features.dim();
  cfg.model.n_labels = corpus.slots.n_labels();
  cfg.validate();
}

std::vector<Example> select_blocks(const Corpus& corpus, const std::vector<std::size_t>& block_of,
                                   const std::vector<std::size_t>& wanted) {
  std::vector<Example> out;
  for (std::size_t u = 0; u < corpus.examples.size(); ++u) {
    if (std::find(wanted.begin(), wanted.end(), block_of[u]) != wanted.end()) out.push_back(corpus.examples[u]);
  }
  if (out.empty()) throw std::runtime_error("no utterances in the selected blocks");
  return out;
}

std::vector<Example> subset(const Corpus& corpus, const DatasetManifest& manifest, const std::string& blocks_path,
                            const std::vector<std::size_t>& wanted) {
  if (blocks_path.empty()) {
    if (!wanted.empty()) throw std::runtime_error("block selection needs --blocks");
    return corpus.examples;
  }
  const auto block_of = read_blocks(blocks_path, manifest);
  if (wanted.empty()) return corpus.examples;
  return select_blocks(corpus, block_of, wanted);
}

int cmd_features(const Common& c, const std::string& manifest_path) {
  RunConfig cfg = resolve(c);
  cfg.validate();
  const fs::path dir = prepare_out(c.out);
  echo_config(cfg, dir);
  DatasetManifest m = read_manifest(manifest_path);
  DatasetManifest out = m;
  out.base_dir = dir;
  fs::create_directories(dir / "features");
  for (std::size_t i = 0; i < m.utterances.size(); ++i) {
    const Utterance& u = m.utterances[i];
    FeatureSequence f = !u.audio.empty() ? extract_features(load_wav(m.resolve(u.audio)), cfg.features)
                                         : read_feature_file(m.resolve(u.features));
    const std::string rel = "features/" + u.id + ".cslf";
    write_feature_file(dir / rel, f);
    out.utterances[i].features = rel;
    out.utterances[i].audio = u.audio.empty() ? std::string{} : fs::relative(fs::absolute(m.resolve(u.audio)), fs::absolute(dir)).string();
    std::cerr << u.id << ": " << f.length() << " frames x " << f.dim() << '\n';
  }
  write_manifest(dir / "manifest.jsonl", out);
  std::cout << "wrote " << m.utterances.size() << " feature files to " << (dir / "features").string() << '\n';
  return 0;
}

int cmd_split(const Common& c, const std::string& manifest_path, std::optional<std::size_t> n_blocks) {
  RunConfig cfg = resolve(c);
  if (n_blocks) cfg.experiment.n_blocks = *n_blocks;
  cfg.validate();
  const fs::path dir = prepare_out(c.out);
  echo_config(cfg, dir);
  const DatasetManifest m = read_manifest(manifest_path);
  const BlockSplit split =
      split_blocks(m, cfg.experiment.n_blocks, derive_seed(cfg.seed, kSplitStream), cfg.experiment.objective);
  write_blocks(dir / "blocks.csv", m, split);
  std::printf("blocks=%zu utterances=%zu objective_initial=%.6f objective=%.6f swaps=%zu\n", split.n_blocks,
              split.block_of.size(), split.initial_objective, split.objective, split.accepted_swaps);
  return 0;
}

int cmd_train(const Common& c, const std::string& manifest_path, const std::string& blocks_path,
              const std::vector<std::size_t>& train_blocks, const std::string& model) {
  RunConfig cfg = resolve(c);
  const ModelKind kind = parse_model_kind(model);
  const DatasetManifest m = read_manifest(manifest_path);
  const Corpus corpus = load_corpus(m, cfg.features);
  fit_model_to_corpus(cfg, corpus);
  const fs::path dir = prepare_out(c.out);
  echo_config(cfg, dir);
  const std::vector<Example> data = subset(corpus, m, blocks_path, train_blocks);
  std::cerr << "training " << to_string(kind) << " (" << count_params(kind, cfg.model) << " parameters) on "
            << data.size() << " utterances\n";
  TrainResult r = train(kind, cfg.model, data, cfg.train, [](std::size_t epoch, double loss) {
    std::fprintf(stderr, "epoch %zu mean_loss %.6f\n", epoch, loss);
  });
  save_checkpoint(dir / "model.ckpt", r.checkpoint);
  write_text(dir / "loss.csv", loss_history_csv(r.epoch_loss));
  std::printf("final_loss=%.6f checkpoint=%s\n", r.epoch_loss.back(), (dir / "model.ckpt").string().c_str());
  return 0;
}

int cmd_eval(const Common& c, const std::string& ckpt_path, const std::string& manifest_path,
             const std::string& blocks_path, const std::vector<std::size_t>& test_blocks) {
  RunConfig cfg = resolve(c);
  Checkpoint ck = load_checkpoint(ckpt_path);
  const DatasetManifest m = read_manifest(manifest_path);
  const Corpus corpus = load_corpus(m, cfg.features);
  const std::vector<Example> data = subset(corpus, m, blocks_path, test_blocks);
  const auto probs = predict_probs(ck, data);
  std::size_t correct = 0;
  std::ostringstream pred;
  pred << "id,correct,predicted,reference\n";
  auto names = [&](const std::vector<std::size_t>& idx) {
    std::string s;
    for (std::size_t j : idx) s += (s.empty() ? "" : " ") + corpus.slots.label_names.at(j);
    return s;
  };
  if (corpus.slots.n_labels() != ck.config.n_labels) throw std::runtime_error("checkpoint label count does not match the manifest");
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto decoded = decode<float>(probs[i], corpus.slots);
    const bool ok = decoded == data[i].labels;
    correct += ok;
    pred << data[i].id << ',' << ok << ',' << names(decoded) << ',' << names(data[i].labels) << '\n';
  }
  const double acc = static_cast<double>(correct) / static_cast<double>(data.size());
  std::printf("accuracy=%.6f correct=%zu n=%zu\n", acc, correct, data.size());
  if (!c.out.empty()) {
    const fs::path dir = prepare_out(c.out);
    char buf[96];
    std::snprintf(buf, sizeof buf, "n_examples,correct,accuracy\n%zu,%zu,%.6f\n", data.size(), correct, acc);
    write_text(dir / "eval.csv", buf);
    write_text(dir / "predictions.csv", pred.str());
  }
  return 0;
}

int cmd_curve(const Common& c, const std::string& manifest_path, const std::string& blocks_path) {
  RunConfig cfg = resolve(c);
  const DatasetManifest m = read_manifest(manifest_path);
  const Corpus corpus = load_corpus(m, cfg.features);
  fit_model_to_corpus(cfg, corpus);
  const std::vector<std::size_t> block_of = read_blocks(blocks_path, m);
  std::size_t n_blocks = 0;
  for (std::size_t b : block_of) n_blocks = std::max(n_blocks, b + 1);
  if (n_blocks != cfg.experiment.n_blocks) {
    std::cerr << "using " << n_blocks << " blocks from " << blocks_path << '\n';
    cfg.experiment.n_blocks = n_blocks;
    cfg.validate();
  }
  const fs::path dir = prepare_out(c.out);
  echo_config(cfg, dir);
  const CurvePlan plan = make_curve_plan(n_blocks, cfg.experiment.repeats, derive_seed(cfg.seed, kPlanStream),
                                         cfg.experiment.train_blocks);
  std::vector<CurvePoint> points;
  for (const std::string& name : cfg.experiment.models) {
    const ModelKind kind = parse_model_kind(name);
    std::cerr << "curve: " << to_string(kind) << ", " << plan.size() << " runs on " << c.jobs << " threads\n";
    auto pts = run_curve(corpus.examples, block_of, plan, to_string(kind),
                         model_runner(kind, cfg.model, cfg.train, corpus.slots), c.jobs);
    for (const CurvePoint& p : pts) {
      if (!p.ok) std::cerr << "curve: " << p.model << " k=" << p.n_train_blocks << " repeat=" << p.repeat << " failed: " << p.error << '\n';
    }
    points.insert(points.end(), pts.begin(), pts.end());
  }
  const auto smoothed = smooth_curve(points, cfg.experiment.lowess_frac, cfg.experiment.lowess_iters);
  write_text(dir / "curve.csv", curve_csv(points));
  write_text(dir / "curve_smoothed.csv", smoothed_csv(smoothed));
  write_text(dir / "curve.svg", curve_svg(points, smoothed));
  std::size_t failed = 0;
  for (const CurvePoint& p : points) failed += !p.ok;
  std::printf("points=%zu failed=%zu out=%s\n", points.size(), failed, dir.string().c_str());
  return failed == 0 ? 0 : 3;
}

int cmd_gradcheck(const Common& c, std::size_t seeds, const std::string& corrupt, const std::vector<std::string>& only) {
  RunConfig cfg = resolve(c);
  gradcheck::Options opt;
  opt.seeds = seeds;
  opt.root_seed = cfg.seed;
  opt.corrupt = corrupt;
  opt.only = only;
  const auto results = gradcheck::run(opt);
  const std::string report = gradcheck::format_report(results, opt.tolerance);
  std::cout << report;
  if (!c.out.empty()) write_text(prepare_out(c.out) / "gradcheck.txt", report);
  std::size_t failed = 0;
  for (const auto& r : results) failed += !r.passed;
  std::printf("%zu of %zu cases passed\n", results.size() - failed, results.size());
  return failed == 0 ? 0 : 2;
}

int cmd_synth(const Common& c) {
  RunConfig cfg = resolve(c);
  cfg.validate();
  const fs::path dir = prepare_out(c.out);
  echo_config(cfg, dir);
  const SynthCorpus corpus = generate_synthetic(cfg.synth);
  write_synthetic(dir, corpus);
  std::printf("utterances=%zu labels=%zu manifest=%s\n", corpus.features.size(), corpus.manifest.slots.n_labels(),
              (dir / "manifest.jsonl").string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Capsule-network spoken language understanding toolkit"};
  app.require_subcommand(1);

  Common common;
  std::string manifest, blocks, model = "capsule", checkpoint, corrupt;
  std::optional<std::size_t> n_blocks;
  std::vector<std::size_t> select;
  std::vector<std::string> only;
  std::size_t seeds = 20;

  auto* features = app.add_subcommand("features", "extract and cache features for a manifest");
  add_common(features, common, true);
  features->add_option("--manifest", manifest, "input manifest (JSON lines)")->required()->check(CLI::ExistingFile);

  auto* split = app.add_subcommand("split", "partition utterances into label-balanced blocks");
  add_common(split, common, true);
  split->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
  split->add_option("--n-blocks", n_blocks, "number of blocks (default from config)");

  auto* trn = app.add_subcommand("train", "train a model and write a checkpoint");
  add_common(trn, common, true);
  trn->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
  trn->add_option("--blocks", blocks, "block file from `split`")->check(CLI::ExistingFile);
  trn->add_option("--train-blocks", select, "blocks to train on (default: all)")->delimiter(',');
  trn->add_option("--model", model, "capsule or baseline");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(ev, common, false);
  ev->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  ev->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
  ev->add_option("--blocks", blocks, "block file from `split`")->check(CLI::ExistingFile);
  ev->add_option("--test-blocks", select, "blocks to evaluate on (default: all)")->delimiter(',');

  auto* curve = app.add_subcommand("curve", "learning-curve sweep over training block counts");
  add_common(curve, common, true);
  curve->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
  curve->add_option("--blocks", blocks)->required()->check(CLI::ExistingFile);

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every op and both models");
  add_common(gc, common, false);
  gc->add_option("--seeds", seeds, "random instances per case")->check(CLI::PositiveNumber);
  gc->add_option("--case", only, "restrict to these cases (repeatable)");
  gc->add_option("--corrupt", corrupt, "deliberately break the backward pass of one case");
  gc->add_flag_callback("--list", [] {
    for (const auto& n : gradcheck::case_names()) std::cout << n << '\n';
    std::exit(0);
  }, "list case names");

  auto* syn = app.add_subcommand("synth", "generate a synthetic command corpus");
  add_common(syn, common, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*features) return cmd_features(common, manifest);
    if (*split) return cmd_split(common, manifest, n_blocks);
    if (*trn) return cmd_train(common, manifest, blocks, select, model);
    if (*ev) return cmd_eval(common, checkpoint, manifest, blocks, select);
    if (*curve) return cmd_curve(common, manifest, blocks);
    if (*gc) return cmd_gradcheck(common, seeds, corrupt, only);
    if (*syn) return cmd_synth(common);
  } catch (const std::exception& e) {
    std::cerr << "capslu: error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
