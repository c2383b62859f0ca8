#pragma once

// End-to-end composition (noise -> edges -> grayscale) and the training-set
// size experiment: stage 1 trained on nested subsets of one corpus under an
// equal step budget, each scored against the full real edge set.

#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "stagegen/config.hpp"
#include "stagegen/dataset.hpp"
#include "stagegen/metrics.hpp"
#include "stagegen/training.hpp"

namespace stagegen {

struct StackOutput {
  Tensor<float> edges;
  Tensor<float> grays;
};

/// gray = stage2(stage1(z)), both in eval mode; the intermediate edges are
/// returned so each stage can be scored on its own.
inline StackOutput run_stack(Stage1Generator<float>& g1, const ImageMap& stage2, const Tensor<float>& z) {
  NoGradGuard no_grad;
  StackOutput out;
  out.edges = g1.forward(z, Mode::Eval);
  out.grays = stage2(out.edges);
  return out;
}

/// Loads both generators from checkpoints (read-only). `seed` draws z2 when
/// the stage-2 latent input is enabled.
inline StackOutput run_stack(const std::filesystem::path& stage1_ckpt, const std::filesystem::path& stage2_ckpt, const Tensor<float>& z,
                             std::uint64_t seed = 0) {
  auto g1 = stage1_generator_from(load_checkpoint(stage1_ckpt));
  auto g2 = stage2_generator_from(load_checkpoint(stage2_ckpt));
  if (g1.spec().image_side != g2.spec().image_side) throw ConfigError("stage-1 and stage-2 checkpoints disagree on image side");
  Rng rng(derive_seed(seed, 0x57));
  const ImageMap stage2 = [&](const Tensor<float>& edges) {
    std::optional<Tensor<float>> z2;
    if (g2.spec().stage2_latent_enabled) z2 = sample_latent(edges.dim(0), g2.spec().latent_dim, rng);
    return g2.forward(edges, Mode::Eval, rng, z2);
  };
  return run_stack(g1, stage2, z);
}

/// Stage-1 edge samples in eval mode; the latent draw depends only on `seed`.
inline Tensor<float> sample_edges(Stage1Generator<float>& g1, std::int64_t n, std::uint64_t seed) {
  NoGradGuard no_grad;
  Rng rng(derive_seed(seed, 0x5E));
  return g1.forward(sample_latent(n, g1.spec().latent_dim, rng), Mode::Eval);
}

/// Keeps a seeded `fraction` of the train records and every eval record.
/// Subsets for the same seed are nested: a smaller fraction keeps a prefix
/// of the same permutation.
inline DatasetManifest subset_manifest(const DatasetManifest& m, double fraction, std::uint64_t seed) {
  std::vector<ManifestRecord> train, rest;
  for (const auto& r : m.records) (r.split == Split::Train ? train : rest).push_back(r);
  if (train.empty()) throw ConfigError("subset_manifest: no train records");
  auto out = m;
  out.records = rest;
  for (auto i : seeded_subset(train.size(), fraction, derive_seed(seed, 0x5AB))) out.records.push_back(train[i]);
  std::sort(out.records.begin(), out.records.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  out.subset_fraction = m.subset_fraction * fraction;
  return out;
}

struct SubsetExperimentOptions {
  std::vector<double> fractions{0.25, 1.0};
  std::int64_t train_budget = 300;  // optimizer steps per fraction
  std::uint64_t seed = 0;
  TrainConfig train;                // stage-1 template; stage, seed, epochs, max_steps and out_dir are set per run
  std::int64_t n_generated = 512;
  std::optional<std::filesystem::path> embedder;  // fitted on the full corpus when absent
  EmbedderOptions embedder_options{.kind = ImageKind::Edge};
  std::filesystem::path out_dir;    // empty: nothing is written
};

struct SubsetRow {
  double fraction = 0;
  std::int64_t n_train = 0;
  double fid = 0;
  std::uint64_t seed = 0;
  std::int64_t steps = 0;
};

struct SubsetReport {
  std::vector<SubsetRow> rows;
  std::string embedder_fingerprint;
  nlohmann::json train_config;

  /// fid at the smallest fraction exceeds fid at the largest.
  bool smaller_fraction_higher_fid() const {
    if (rows.size() < 2) return false;
    auto lo = rows.front(), hi = rows.front();
    for (const auto& r : rows) {
      if (r.fraction < lo.fraction) lo = r;
      if (r.fraction > hi.fraction) hi = r;
    }
    return lo.fid > hi.fid;
  }
};

inline void to_json(nlohmann::json& j, const SubsetRow& r) {
  j = {{"fraction", r.fraction}, {"n_train", r.n_train}, {"fid", r.fid}, {"seed", r.seed}, {"steps", r.steps}};
}

inline void to_json(nlohmann::json& j, const SubsetReport& r) {
  j = {{"rows", r.rows},
       {"equal_step_budget", true},
       {"budget_note", "every fraction gets the same number of optimizer steps, so smaller subsets see each image more often"},
       {"smaller_fraction_higher_fid", r.smaller_fraction_higher_fid()},
       {"embedder_fingerprint", r.embedder_fingerprint},
       {"train_config", r.train_config}};
}

/// Trains stage 1 once per fraction with identical configuration and seed,
/// then scores sample edges against every real edge image of `src`.
inline SubsetReport subset_experiment(const DatasetManifest& src, const SubsetExperimentOptions& opt) {
  if (opt.fractions.empty()) throw ConfigError("subset_experiment: no fractions given");
  for (double f : opt.fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("subset_experiment: fractions must be in (0, 1]");
  }
  if (opt.train_budget < 0) throw ConfigError("subset_experiment: train_budget must be >= 0");

  const Embedder embedder = opt.embedder ? Embedder(load_checkpoint(*opt.embedder)) : [&] {
    auto eo = opt.embedder_options;
    eo.seed = derive_seed(opt.seed, 0xE3);
    return Embedder(fit_embedder(src, eo));
  }();
  if (embedder.side() != src.image_side) throw ConfigError("subset_experiment: embedder side differs from dataset side");
  const auto real = manifest_images(src, embedder.kind());

  TrainConfig base = opt.train;
  base.stage = 1;
  base.seed = opt.seed;
  base.max_steps = opt.train_budget;
  base.out_dir.clear();

  SubsetReport report;
  report.embedder_fingerprint = embedder.fingerprint();
  {
    nlohmann::json echo = base;
    echo.erase("epochs");  // derived per fraction from the budget
    report.train_config = echo;
  }
  for (double f : opt.fractions) {
    const auto m = subset_manifest(src, f, opt.seed);
    const auto n_train = static_cast<std::int64_t>(m.records_in(Split::Train).size());
    TrainConfig cfg = base;
    const auto bs = cfg.effective_batch_size();
    const auto per_epoch = (n_train + bs - 1) / bs;
    cfg.epochs = std::max<std::int64_t>(1, (opt.train_budget + per_epoch - 1) / per_epoch);
    std::filesystem::path run_dir;
    if (!opt.out_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof name, "fraction_%.4g", f);
      run_dir = opt.out_dir / name;
      cfg.out_dir = run_dir.string();
      echo_config(run_dir, {{"train", cfg}, {"fraction", f}, {"n_train", n_train}, {"subset_seed", opt.seed}});
    }
    auto result = train_stage1(cfg, m);
    auto g1 = stage1_generator_from(result.checkpoint);
    const auto fake = sample_edges(g1, opt.n_generated, opt.seed);
    SubsetRow row;
    row.fraction = f;
    row.n_train = n_train;
    row.fid = fid_score(embedder, real, fake).fid;
    row.seed = opt.seed;
    row.steps = std::stoll(result.checkpoint.meta("step"));
    report.rows.push_back(row);
  }
  if (!opt.out_dir.empty()) write_text_atomic(opt.out_dir / "subset_report.json", dump_config(report));
  return report;
}

}  // namespace stagegen
