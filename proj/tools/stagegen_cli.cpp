// stagegen: command-line driver for the two-stage edge -> grayscale GAN.
//
// Exit codes: 0 success, 2 usage or configuration error, 1 runtime error.
// Reports go to stdout, diagnostics to stderr.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "stagegen/stagegen.hpp"

namespace fs = std::filesystem;
using namespace stagegen;
using json = nlohmann::json;

namespace {

std::string absolute_str(const fs::path& p) { return fs::absolute(p).lexically_normal().string(); }

void emit(const json& report, const std::optional<fs::path>& file) {
  const auto text = dump_config(report);
  std::cout << text;
  if (file) {
    if (file->has_parent_path()) fs::create_directories(file->parent_path());
    write_text_atomic(*file, text);
  }
}

struct SynthArgs {
  std::int64_t n = 0;
  int side = 64;
  std::uint64_t seed = 0;
  double split = kDefaultSplitRatio;
  std::string out;
};

struct PreprocessArgs {
  std::string src, out;
  int side = 64;
  double subset = 1.0;
  double split = kDefaultSplitRatio;
  std::uint64_t seed = 0;
};

struct TrainArgs {
  int stage = 0;
  std::string config, edge_source, stage1_ckpt, resume, out, manifest;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> max_steps, epochs;
};

struct GenerateArgs {
  std::string stage1, stage2, out;
  std::int64_t n = 16;
  std::uint64_t seed = 0;
};

struct EvaluateArgs {
  std::string real, fake, embedder, kind = "gray", prefix, report;
  bool fit = false;
  int dim = 64;
  std::int64_t embed_steps = 400;
  std::uint64_t seed = 0;
  double eps_reg = kDefaultEpsReg;
};

struct ProbeArgs {
  std::string stage2, manifest, report;
  std::vector<double> sigmas{0.01, 0.1};
  std::int64_t pairs = 64;
  std::uint64_t seed = 0;
};

struct PlotArgs {
  std::string csv, out, title = "training losses";
};

struct SubsetArgs {
  std::string manifest, config, out, embedder;
  std::vector<double> fractions{0.25, 1.0};
  std::int64_t budget = 300;
  std::int64_t n_generated = 512;
  std::uint64_t seed = 0;
};

int synth_data(const SynthArgs& a) {
  const auto m = synth_faces(a.n, a.side, a.seed, a.out, a.split);
  echo_config(a.out, {{"command", "synth-data"}, {"n", a.n}, {"side", a.side}, {"seed", a.seed}, {"split", a.split}});
  std::cerr << "wrote " << m.records.size() << " records to " << a.out << "\n";
  return 0;
}

int preprocess(const PreprocessArgs& a) {
  BuildOptions opt;
  opt.image_side = a.side;
  opt.subset_fraction = a.subset;
  opt.split_ratio = a.split;
  opt.seed = a.seed;
  const auto m = build_dataset(a.src, a.out, opt);
  echo_config(a.out, {{"command", "preprocess"},
                      {"src", absolute_str(a.src)},
                      {"side", a.side},
                      {"subset", a.subset},
                      {"split", a.split},
                      {"seed", a.seed}});
  std::cerr << "wrote " << m.records.size() << " records (" << m.skipped << " skipped) to " << a.out << "\n";
  return 0;
}

int train(const TrainArgs& a) {
  RunConfig rc = load_run_config(a.config);
  auto& cfg = rc.train;
  cfg.stage = a.stage;
  if (!a.manifest.empty()) rc.manifest = a.manifest;
  if (!a.out.empty()) cfg.out_dir = a.out;
  if (a.seed) cfg.seed = *a.seed;
  if (a.max_steps) cfg.max_steps = *a.max_steps;
  if (a.epochs) cfg.epochs = *a.epochs;
  if (!a.edge_source.empty()) {
    if (a.stage != 2) throw ConfigError("--edge-source applies to stage 2 only");
    if (a.edge_source == "real") {
      cfg.edge_source = "real";
    } else if (a.edge_source == "ckpt") {
      if (a.stage1_ckpt.empty()) throw ConfigError("--edge-source ckpt needs --stage1-ckpt <path>");
      cfg.edge_source = a.stage1_ckpt;
    } else {
      cfg.edge_source = a.edge_source;
    }
  }
  if (cfg.edge_source != "real") cfg.edge_source = absolute_str(cfg.edge_source);
  if (rc.manifest.empty()) throw ConfigError("no manifest: set 'manifest' in the config or pass --manifest");
  if (cfg.out_dir.empty()) throw ConfigError("no output directory: set 'out_dir' in the config or pass --out");
  cfg.validate();  // before any data is touched
  rc.manifest = absolute_str(rc.manifest);
  cfg.out_dir = absolute_str(cfg.out_dir);

  const auto manifest = load_manifest(rc.manifest);
  echo_config(cfg.out_dir, rc);
  std::optional<fs::path> resume;
  if (!a.resume.empty()) resume = a.resume;
  const auto result = cfg.stage == 1 ? train_stage1(cfg, manifest, resume) : train_stage2(cfg, manifest, resume);
  const auto& rows = result.log.rows;
  json summary = {{"stage", cfg.stage},
                  {"steps", std::stoll(result.checkpoint.meta("step"))},
                  {"checkpoint", (fs::path(cfg.out_dir) / final_checkpoint_name(cfg.stage)).string()},
                  {"losses", (fs::path(cfg.out_dir) / loss_csv_name(cfg.stage)).string()}};
  if (!rows.empty()) {
    summary["final_d_loss"] = rows.back().d_loss;
    summary["final_g_loss_adv"] = rows.back().g_loss_adv;
    summary["final_g_loss_l1"] = rows.back().g_loss_l1;
  }
  emit(summary, std::nullopt);
  return 0;
}

int generate_cmd(const GenerateArgs& a) {
  const auto set = generate(a.stage1, a.stage2, a.n, a.seed, a.out);
  echo_config(a.out, {{"command", "generate"},
                      {"stage1", absolute_str(a.stage1)},
                      {"stage2", absolute_str(a.stage2)},
                      {"n", a.n},
                      {"seed", a.seed}});
  emit({{"n", a.n}, {"contact_sheet", set.sheet.string()}}, std::nullopt);
  return 0;
}

int evaluate(const EvaluateArgs& a) {
  const auto kind = parse_kind(a.kind);
  const auto real_manifest = load_manifest(a.real);
  json fit_info;
  if (a.fit) {
    EmbedderOptions eo;
    eo.dim = a.dim;
    eo.kind = kind;
    eo.steps = a.embed_steps;
    eo.seed = a.seed;
    const auto fitted = fit_embedder(real_manifest, eo);
    save_checkpoint(fitted.checkpoint, a.embedder);
    fit_info = {{"eval_l1_start", fitted.eval_l1_start}, {"eval_l1_end", fitted.eval_l1_end}};
  } else if (!fs::exists(a.embedder)) {
    throw ConfigError("embedder checkpoint " + a.embedder + " does not exist (pass --fit-embedder to create it)");
  }
  const Embedder embedder(load_checkpoint(a.embedder));
  if (embedder.kind() != kind) {
    throw ConfigError("embedder was fitted on " + kind_name(embedder.kind()) + " images, not " + a.kind);
  }
  const auto prefix = a.prefix.empty() ? kind_name(kind) + "_" : a.prefix;
  const auto real = manifest_images(real_manifest, kind);
  const auto fake = directory_images(a.fake, prefix);
  json report = fid_score(embedder, real, fake, a.eps_reg);
  report["kind"] = a.kind;
  if (!fit_info.is_null()) report["embedder_fit"] = fit_info;
  emit(report, a.report.empty() ? std::nullopt : std::optional<fs::path>(a.report));
  return 0;
}

int probe(const ProbeArgs& a) {
  const auto ck = load_checkpoint(a.stage2);
  const auto m = load_manifest(a.manifest);
  const auto edges = manifest_images(m, ImageKind::Edge);
  json reports = json::array();
  for (double sigma : a.sigmas) reports.push_back(contraction_probe(ck, edges, sigma, a.pairs, a.seed));
  emit({{"stage2", absolute_str(a.stage2)}, {"probes", reports}}, a.report.empty() ? std::nullopt : std::optional<fs::path>(a.report));
  return 0;
}

int plot_losses(const PlotArgs& a) {
  const auto svg = loss_plot_svg(LossLog::read(a.csv), a.title);
  const fs::path out(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_text_atomic(out, svg);
  return 0;
}

int subset_cmd(const SubsetArgs& a) {
  SubsetExperimentOptions opt;
  opt.fractions = a.fractions;
  opt.train_budget = a.budget;
  opt.seed = a.seed;
  opt.n_generated = a.n_generated;
  opt.out_dir = a.out;
  if (!a.config.empty()) opt.train = load_run_config(a.config).train;
  if (!a.embedder.empty()) opt.embedder = a.embedder;
  const auto report = subset_experiment(load_manifest(a.manifest), opt);
  emit(report, std::nullopt);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stagegen: two-stage GAN toolkit (noise -> edges -> grayscale)"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth-data", "render a procedural face corpus and preprocess it");
  c_synth->add_option("--n", synth.n, "number of images")->required();
  c_synth->add_option("--side", synth.side, "model image side")->capture_default_str();
  c_synth->add_option("--seed", synth.seed, "random seed")->capture_default_str();
  c_synth->add_option("--split", synth.split, "train fraction")->capture_default_str();
  c_synth->add_option("--out", synth.out, "output dataset directory")->required();

  PreprocessArgs pre;
  auto* c_pre = app.add_subcommand("preprocess", "convert RGB images into paired grayscale/edge images and a manifest");
  c_pre->add_option("--src", pre.src, "directory of RGB images")->required()->check(CLI::ExistingDirectory);
  c_pre->add_option("--out", pre.out, "output dataset directory")->required();
  c_pre->add_option("--side", pre.side, "model image side")->capture_default_str();
  c_pre->add_option("--subset", pre.subset, "fraction of source images to keep")->capture_default_str();
  c_pre->add_option("--split", pre.split, "train fraction")->capture_default_str();
  c_pre->add_option("--seed", pre.seed, "random seed")->capture_default_str();

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "train stage 1 (noise -> edges) or stage 2 (edges -> grayscale)");
  c_train->add_option("--stage", tr.stage, "1 or 2")->required()->check(CLI::IsMember({1, 2}));
  c_train->add_option("--config", tr.config, "run config JSON")->required()->check(CLI::ExistingFile);
  c_train->add_option("--edge-source", tr.edge_source, "stage 2 conditioning: 'real', 'ckpt', or a stage-1 checkpoint path");
  c_train->add_option("--stage1-ckpt", tr.stage1_ckpt, "stage-1 checkpoint used with --edge-source ckpt");
  c_train->add_option("--resume", tr.resume, "continue from a checkpoint of this run")->check(CLI::ExistingFile);
  c_train->add_option("--out", tr.out, "run directory (overrides out_dir)");
  c_train->add_option("--manifest", tr.manifest, "dataset manifest (overrides manifest)");
  c_train->add_option("--seed", tr.seed, "override seed");
  c_train->add_option("--max-steps", tr.max_steps, "override max_steps");
  c_train->add_option("--epochs", tr.epochs, "override epochs");

  GenerateArgs gen;
  auto* c_gen = app.add_subcommand("generate", "sample edges and their grayscale translations");
  c_gen->add_option("--stage1", gen.stage1, "stage-1 checkpoint")->required()->check(CLI::ExistingFile);
  c_gen->add_option("--stage2", gen.stage2, "stage-2 checkpoint")->required()->check(CLI::ExistingFile);
  c_gen->add_option("--n", gen.n, "number of samples")->capture_default_str();
  c_gen->add_option("--seed", gen.seed, "random seed")->capture_default_str();
  c_gen->add_option("--out", gen.out, "output directory")->required();

  EvaluateArgs ev;
  auto* c_eval = app.add_subcommand("evaluate", "Frechet distance between real and generated images");
  c_eval->add_option("--real", ev.real, "real dataset manifest")->required();
  c_eval->add_option("--fake", ev.fake, "directory of generated images")->required()->check(CLI::ExistingDirectory);
  c_eval->add_option("--embedder", ev.embedder, "embedder checkpoint (written when --fit-embedder)")->required();
  c_eval->add_flag("--fit-embedder", ev.fit, "fit the embedder on the real set first");
  c_eval->add_option("--kind", ev.kind, "image kind: edge or gray")->capture_default_str()->check(CLI::IsMember({"edge", "gray"}));
  c_eval->add_option("--prefix", ev.prefix, "generated file name prefix (default '<kind>_')");
  c_eval->add_option("--embed-dim", ev.dim, "embedding dimension when fitting")->capture_default_str();
  c_eval->add_option("--embed-steps", ev.embed_steps, "embedder training steps when fitting")->capture_default_str();
  c_eval->add_option("--seed", ev.seed, "embedder seed when fitting")->capture_default_str();
  c_eval->add_option("--eps-reg", ev.eps_reg, "covariance regularization")->capture_default_str();
  c_eval->add_option("--report", ev.report, "also write the JSON report here");

  ProbeArgs pr;
  auto* c_probe = app.add_subcommand("probe", "measure |f(x+h) - f(x)| / |h| for the stage-2 generator");
  c_probe->add_option("--stage2", pr.stage2, "stage-2 checkpoint")->required()->check(CLI::ExistingFile);
  c_probe->add_option("--manifest", pr.manifest, "dataset whose edge images are perturbed")->required();
  c_probe->add_option("--sigma", pr.sigmas, "perturbation standard deviation(s)")->capture_default_str()->delimiter(',');
  c_probe->add_option("--pairs", pr.pairs, "pairs per sigma")->capture_default_str();
  c_probe->add_option("--seed", pr.seed, "random seed")->capture_default_str();
  c_probe->add_option("--report", pr.report, "also write the JSON report here");

  PlotArgs pl;
  auto* c_plot = app.add_subcommand("plot-losses", "SVG line chart of d_loss and g_loss against step");
  c_plot->add_option("--csv", pl.csv, "loss CSV")->required()->check(CLI::ExistingFile);
  c_plot->add_option("--out", pl.out, "output SVG")->required();
  c_plot->add_option("--title", pl.title, "chart title")->capture_default_str();

  SubsetArgs sub;
  auto* c_sub = app.add_subcommand("subset-experiment", "train stage 1 on nested data subsets under one step budget and compare FID");
  c_sub->add_option("--manifest", sub.manifest, "full dataset manifest")->required();
  c_sub->add_option("--fractions", sub.fractions, "train fractions")->capture_default_str()->delimiter(',');
  c_sub->add_option("--budget", sub.budget, "optimizer steps per fraction")->capture_default_str();
  c_sub->add_option("--seed", sub.seed, "random seed")->capture_default_str();
  c_sub->add_option("--config", sub.config, "run config JSON for the stage-1 template")->check(CLI::ExistingFile);
  c_sub->add_option("--embedder", sub.embedder, "edge embedder checkpoint (fitted on the manifest when omitted)");
  c_sub->add_option("--n-generated", sub.n_generated, "generated edges scored per fraction")->capture_default_str();
  c_sub->add_option("--out", sub.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*c_synth) return synth_data(synth);
    if (*c_pre) return preprocess(pre);
    if (*c_train) return train(tr);
    if (*c_gen) return generate_cmd(gen);
    if (*c_eval) return evaluate(ev);
    if (*c_probe) return probe(pr);
    if (*c_plot) return plot_losses(pl);
    if (*c_sub) return subset_cmd(sub);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
