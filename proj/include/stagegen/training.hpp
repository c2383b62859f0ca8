#pragma once

// Adversarial training loops for both stages, the loss log, checkpoint
// assembly, and paired sample generation.
//
// Each step updates the discriminator once, then the generator once.
// Logged columns:
//   d_loss       0.5 · (bce(D(real), 1) + bce(D(fake), 0))
//   d_loss_real  bce(D(real), 1)
//   d_loss_fake  bce(D(fake), 0)
//   g_loss_adv   bce(D(fake), 1), measured before the generator update
//   g_loss_l1    lambda_l1 · l1(G(edge), target); 0 for stage 1 or lambda_l1 = 0
//   wall_ms      elapsed time, or 0 when log_wall_time is off
// so a stage-2 generator loss is adversarial_weight · g_loss_adv + g_loss_l1.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "stagegen/adam.hpp"
#include "stagegen/checkpoint.hpp"
#include "stagegen/dataset.hpp"
#include "stagegen/image.hpp"
#include "stagegen/image_io.hpp"
#include "stagegen/models.hpp"
#include "stagegen/ops.hpp"

namespace stagegen {

struct TrainConfig {
  int stage = 1;
  std::int64_t epochs = 1;
  std::int64_t batch_size = 0;  // 0: 32 for stage 1, 1 for stage 2
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double lambda_l1 = 100.0;
  double adversarial_weight = 1.0;
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 0;  // steps; 0 writes only the final checkpoint
  std::int64_t log_every = 1;
  std::string edge_source = "real";  // stage 2: "real" or a stage-1 checkpoint path
  std::int64_t max_steps = 0;        // 0: no cap beyond `epochs`
  bool identity_task = false;        // stage 2: target is the conditioning edge map itself
  bool freeze_discriminator = false;
  bool log_wall_time = true;
  std::string out_dir;  // checkpoints and CSV; empty keeps everything in memory
  ModelSpec model;

  std::int64_t effective_batch_size() const { return batch_size > 0 ? batch_size : (stage == 1 ? 32 : 1); }
  AdamHyper adam() const { return {lr, beta1, beta2, 1e-8}; }

  void validate() const {
    if (stage != 1 && stage != 2) throw ConfigError("stage must be 1 or 2");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_size < 0) throw ConfigError("batch_size must be >= 1");
    if (!(lr > 0) || !(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("invalid Adam hyperparameters");
    if (lambda_l1 < 0 || adversarial_weight < 0) throw ConfigError("loss weights must be >= 0");
    if (checkpoint_every < 0 || max_steps < 0) throw ConfigError("checkpoint_every and max_steps must be >= 0");
    if (log_every < 1) throw ConfigError("log_every must be >= 1");
    if (stage == 2 && edge_source != "real" && !std::filesystem::exists(edge_source)) {
      throw ConfigError("edge_source must be 'real' or an existing stage-1 checkpoint, got '" + edge_source + "'");
    }
    model.validate();
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"stage", c.stage},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"lambda_l1", c.lambda_l1},
       {"adversarial_weight", c.adversarial_weight},
       {"seed", c.seed},
       {"checkpoint_every", c.checkpoint_every},
       {"log_every", c.log_every},
       {"edge_source", c.edge_source},
       {"max_steps", c.max_steps},
       {"identity_task", c.identity_task},
       {"freeze_discriminator", c.freeze_discriminator},
       {"log_wall_time", c.log_wall_time},
       {"out_dir", c.out_dir},
       {"model", c.model}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const auto& k = it.key();
      const auto& v = it.value();
      if (k == "stage") c.stage = v.get<int>();
      else if (k == "epochs") c.epochs = v.get<std::int64_t>();
      else if (k == "batch_size") c.batch_size = v.get<std::int64_t>();
      else if (k == "lr") c.lr = v.get<double>();
      else if (k == "beta1") c.beta1 = v.get<double>();
      else if (k == "beta2") c.beta2 = v.get<double>();
      else if (k == "lambda_l1") c.lambda_l1 = v.get<double>();
      else if (k == "adversarial_weight") c.adversarial_weight = v.get<double>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "checkpoint_every") c.checkpoint_every = v.get<std::int64_t>();
      else if (k == "log_every") c.log_every = v.get<std::int64_t>();
      else if (k == "edge_source") c.edge_source = v.get<std::string>();
      else if (k == "max_steps") c.max_steps = v.get<std::int64_t>();
      else if (k == "identity_task") c.identity_task = v.get<bool>();
      else if (k == "freeze_discriminator") c.freeze_discriminator = v.get<bool>();
      else if (k == "log_wall_time") c.log_wall_time = v.get<bool>();
      else if (k == "out_dir") c.out_dir = v.get<std::string>();
      else if (k == "model") c.model = v.get<ModelSpec>();
      else throw ConfigError("unknown train config key '" + k + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
}

/// One logged step. Losses are float, matching the precision they are computed in.
struct LossRow {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  float d_loss = 0;
  float d_loss_real = 0;
  float d_loss_fake = 0;
  float g_loss_adv = 0;
  float g_loss_l1 = 0;
  std::int64_t wall_ms = 0;

  bool operator==(const LossRow&) const = default;
};

struct LossLog {
  static constexpr const char* kHeader = "step,epoch,d_loss,d_loss_real,d_loss_fake,g_loss_adv,g_loss_l1,wall_ms";
  std::vector<LossRow> rows;

  std::string to_csv() const {
    std::string out = std::string(kHeader) + "\n";
    char buf[256];
    for (const auto& r : rows) {
      // %.9g round-trips every float exactly.
      std::snprintf(buf, sizeof buf, "%lld,%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%lld\n", static_cast<long long>(r.step),
                    static_cast<long long>(r.epoch), r.d_loss, r.d_loss_real, r.d_loss_fake, r.g_loss_adv, r.g_loss_l1,
                    static_cast<long long>(r.wall_ms));
      out += buf;
    }
    return out;
  }

  static LossLog from_csv(const std::string& text, const std::string& identity = "loss log") {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != kHeader) throw FormatError(identity + ": missing or unexpected CSV header");
    LossLog log;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      LossRow r;
      long long step, epoch, wall;
      if (std::sscanf(line.c_str(), "%lld,%lld,%f,%f,%f,%f,%f,%lld", &step, &epoch, &r.d_loss, &r.d_loss_real, &r.d_loss_fake,
                      &r.g_loss_adv, &r.g_loss_l1, &wall) != 8) {
        throw FormatError(identity + ":" + std::to_string(line_no) + ": malformed row");
      }
      r.step = step;
      r.epoch = epoch;
      r.wall_ms = wall;
      if (!log.rows.empty() && r.step <= log.rows.back().step) throw FormatError(identity + ": steps not strictly increasing");
      log.rows.push_back(r);
    }
    return log;
  }

  static LossLog read(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return from_csv(std::string(bytes.begin(), bytes.end()), path.string());
  }

  void write(const std::filesystem::path& path) const { write_text_atomic(path, to_csv()); }

  /// Mean of a column over rows [begin, end).
  template <class Fn>
  double window_mean(std::size_t begin, std::size_t end, Fn column) const {
    if (begin >= end || end > rows.size()) throw ConfigError("window_mean: empty or out-of-range window");
    double s = 0;
    for (std::size_t i = begin; i < end; ++i) s += column(rows[i]);
    return s / static_cast<double>(end - begin);
  }
};

inline std::string loss_csv_name(int stage) { return "losses_stage" + std::to_string(stage) + ".csv"; }
inline std::string final_checkpoint_name(int stage) { return "stage" + std::to_string(stage) + ".sgck"; }
inline std::string step_checkpoint_name(int stage, std::int64_t step) {
  return "stage" + std::to_string(stage) + "_step" + std::to_string(step) + ".sgck";
}

struct TrainResult {
  Checkpoint checkpoint;
  LossLog log;
};

inline ModelSpec spec_from_checkpoint(const Checkpoint& ck) {
  try {
    return nlohmann::json::parse(ck.meta("model_spec")).get<ModelSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint model_spec: ") + e.what());
  }
}

inline void require_kind(const Checkpoint& ck, const std::string& kind) {
  if (ck.meta("kind") != kind) throw FormatError("expected a " + kind + " checkpoint, got " + ck.meta("kind"));
}

inline Stage1Generator<float> stage1_generator_from(const Checkpoint& ck) {
  require_kind(ck, "stage1");
  Stage1Generator<float> g(spec_from_checkpoint(ck));
  restore_module(ck, "g1", g);
  return g;
}

inline Stage2Generator<float> stage2_generator_from(const Checkpoint& ck) {
  require_kind(ck, "stage2");
  Stage2Generator<float> g(spec_from_checkpoint(ck));
  restore_module(ck, "g2", g);
  return g;
}

namespace detail {

inline void require_finite(double v, const char* what, std::int64_t step) {
  if (!std::isfinite(v)) {
    throw DivergenceError(std::string(what) + " became non-finite at step " + std::to_string(step) +
                          "; the last written checkpoint is kept");
  }
}

// Everything a loop needs besides its networks: optimizers, counters, RNG.
struct LoopState {
  AdamState<float> adam_g;
  AdamState<float> adam_d;
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  std::size_t batch_index = 0;  // next batch within `epoch`
  std::int64_t g_updates = 0;
  std::int64_t d_updates = 0;
  Rng rng;
};

template <class G, class D>
Checkpoint assemble_checkpoint(const TrainConfig& cfg, const std::string& g_name, const G& g, const std::string& d_name, const D& d,
                               const LoopState& s) {
  Checkpoint ck;
  store_module(ck, g_name, g);
  store_module(ck, d_name, d);
  store_adam(ck, "adam_g", g, s.adam_g);
  store_adam(ck, "adam_d", d, s.adam_d);
  ck.metadata["kind"] = "stage" + std::to_string(cfg.stage);
  auto echo = cfg;
  echo.out_dir.clear();  // a location, not a setting: identical runs in different directories match bytewise
  ck.metadata["config"] = nlohmann::json(echo).dump();
  ck.metadata["model_spec"] = nlohmann::json(cfg.model).dump();
  ck.metadata["rng"] = serialize_rng(s.rng);
  ck.metadata["step"] = std::to_string(s.step);
  ck.metadata["epoch"] = std::to_string(s.epoch);
  ck.metadata["batch_index"] = std::to_string(s.batch_index);
  ck.metadata["g_updates"] = std::to_string(s.g_updates);
  ck.metadata["d_updates"] = std::to_string(s.d_updates);
  return ck;
}

// Settings that must agree between a run and the checkpoint it resumes from.
inline nlohmann::json resume_identity(const TrainConfig& c) {
  return {{"stage", c.stage},           {"batch_size", c.effective_batch_size()}, {"seed", c.seed},
          {"lr", c.lr},                 {"beta1", c.beta1},                      {"beta2", c.beta2},
          {"lambda_l1", c.lambda_l1},   {"adversarial_weight", c.adversarial_weight},
          {"edge_source", c.edge_source}, {"identity_task", c.identity_task},  {"model", c.model}};
}

template <class G, class D>
void resume_into(const Checkpoint& ck, const TrainConfig& cfg, const std::string& g_name, G& g, const std::string& d_name, D& d,
                 LoopState& s) {
  require_kind(ck, "stage" + std::to_string(cfg.stage));
  TrainConfig saved;
  try {
    saved = nlohmann::json::parse(ck.meta("config")).get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  if (resume_identity(saved) != resume_identity(cfg)) {
    throw ConfigError("resume: checkpoint was written with a different configuration");
  }
  restore_module(ck, g_name, g);
  restore_module(ck, d_name, d);
  s.adam_g = restore_adam(ck, "adam_g", g);
  s.adam_d = restore_adam(ck, "adam_d", d);
  s.rng = deserialize_rng(ck.meta("rng"));
  s.step = std::stoll(ck.meta("step"));
  s.epoch = std::stoll(ck.meta("epoch"));
  s.batch_index = static_cast<std::size_t>(std::stoull(ck.meta("batch_index")));
  s.g_updates = std::stoll(ck.meta("g_updates"));
  s.d_updates = std::stoll(ck.meta("d_updates"));
}

inline LossLog prior_log(const TrainConfig& cfg, std::int64_t up_to_step) {
  LossLog log;
  if (cfg.out_dir.empty()) return log;
  const auto path = std::filesystem::path(cfg.out_dir) / loss_csv_name(cfg.stage);
  if (!std::filesystem::exists(path)) return log;
  for (const auto& r : LossLog::read(path).rows) {
    if (r.step <= up_to_step) log.rows.push_back(r);
  }
  return log;
}

// Shared epoch/batch driver. `step_fn(batch, row)` performs one update and fills the losses.
template <class StepFn, class CheckpointFn>
LossLog run_loop(const TrainConfig& cfg, const SplitData& data, LoopState& s, LossLog log, StepFn&& step_fn,
                 CheckpointFn&& make_checkpoint) {
  const auto bs = static_cast<std::size_t>(cfg.effective_batch_size());
  const auto started = std::chrono::steady_clock::now();
  const std::filesystem::path out(cfg.out_dir);
  auto flush = [&](const Checkpoint& ck, const std::string& name) {
    if (cfg.out_dir.empty()) return;
    save_checkpoint(ck, out / name);
    log.write(out / loss_csv_name(cfg.stage));
  };
  for (; s.epoch < cfg.epochs; ++s.epoch, s.batch_index = 0) {
    const auto plan = batch_plan(data.size(), bs, cfg.seed, s.epoch);
    for (; s.batch_index < plan.size(); ++s.batch_index) {
      if (cfg.max_steps > 0 && s.step >= cfg.max_steps) return log;
      LossRow row;
      row.step = s.step + 1;
      row.epoch = s.epoch;
      step_fn(data.gather(plan[s.batch_index]), row);
      ++s.step;
      if (cfg.log_wall_time) {
        row.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - started).count();
      }
      if (s.step % cfg.log_every == 0) log.rows.push_back(row);
      if (cfg.checkpoint_every > 0 && s.step % cfg.checkpoint_every == 0) {
        ++s.batch_index;  // the checkpoint resumes after this batch
        flush(make_checkpoint(), step_checkpoint_name(cfg.stage, s.step));
        --s.batch_index;
      }
    }
  }
  return log;
}

inline void finish(const TrainConfig& cfg, const Checkpoint& ck, const LossLog& log) {
  if (cfg.out_dir.empty()) return;
  const std::filesystem::path out(cfg.out_dir);
  save_checkpoint(ck, out / final_checkpoint_name(cfg.stage));
  log.write(out / loss_csv_name(cfg.stage));
}

inline SplitData training_split(const TrainConfig& cfg, const DatasetManifest& manifest) {
  if (cfg.model.image_side != manifest.image_side) {
    throw ConfigError("model image_side " + std::to_string(cfg.model.image_side) + " does not match dataset side " +
                      std::to_string(manifest.image_side));
  }
  return SplitData(manifest, Split::Train);
}

}  // namespace detail

/// Stage 1: DCGAN on edge images. `resume_from` continues a run from one of
/// its checkpoints; the remaining steps are identical to an uninterrupted run.
inline TrainResult train_stage1(const TrainConfig& cfg, const DatasetManifest& manifest,
                                const std::optional<std::filesystem::path>& resume_from = std::nullopt) {
  cfg.validate();
  if (cfg.stage != 1) throw ConfigError("train_stage1 requires stage = 1");
  const auto data = detail::training_split(cfg, manifest);
  auto models = init_params(cfg.model, cfg.seed);
  auto& g = models.g1;
  auto& d = models.d1;
  detail::LoopState s{AdamState<float>(g.params()), AdamState<float>(d.params()), 0, 0, 0, 0, 0, Rng(derive_seed(cfg.seed, 0x51))};
  LossLog log;
  if (resume_from) {
    detail::resume_into(load_checkpoint(*resume_from), cfg, "g1", g, "d1", d, s);
    log = detail::prior_log(cfg, s.step);
  }
  const auto hyper = cfg.adam();
  const int latent = cfg.model.latent_dim;

  auto step_fn = [&](const Batch& batch, LossRow& row) {
    const auto n = batch.edges.dim(0);
    const auto fake = g.forward(sample_latent(n, latent, s.rng), Mode::Train);

    const auto fake_const = fake.detach();
    if (cfg.freeze_discriminator) {
      NoGradGuard no_grad;
      row.d_loss_real = bce_with_logits(d.forward(batch.edges, Mode::Eval), 1.f).item();
      row.d_loss_fake = bce_with_logits(d.forward(fake_const, Mode::Eval), 0.f).item();
      row.d_loss = 0.5f * (row.d_loss_real + row.d_loss_fake);
    } else {
      d.zero_grad();
      auto real_loss = bce_with_logits(d.forward(batch.edges, Mode::Train), 1.f);
      auto fake_loss = bce_with_logits(d.forward(fake_const, Mode::Train), 0.f);
      auto d_loss = scale(add(real_loss, fake_loss), 0.5);
      row.d_loss_real = real_loss.item();
      row.d_loss_fake = fake_loss.item();
      row.d_loss = d_loss.item();
      detail::require_finite(row.d_loss, "stage-1 discriminator loss", s.step + 1);
      d_loss.backward();
      adam_step(d.params(), s.adam_d, hyper);
      ++s.d_updates;
    }

    g.zero_grad();
    d.set_requires_grad(false);
    auto g_loss = bce_with_logits(d.forward(fake, cfg.freeze_discriminator ? Mode::Eval : Mode::Train), 1.f);
    d.set_requires_grad(true);
    row.g_loss_adv = g_loss.item();
    detail::require_finite(row.g_loss_adv, "stage-1 generator loss", s.step + 1);
    g_loss.backward();
    adam_step(g.params(), s.adam_g, hyper);
    ++s.g_updates;
  };
  auto make_ck = [&] { return detail::assemble_checkpoint(cfg, "g1", g, "d1", d, s); };
  log = detail::run_loop(cfg, data, s, std::move(log), step_fn, make_ck);
  TrainResult result{make_ck(), std::move(log)};
  detail::finish(cfg, result.checkpoint, result.log);
  return result;
}

/// Stage 2: conditional translation edges -> grayscale with an L1 term.
/// With edge_source = a stage-1 checkpoint, the discriminator's fake pairs
/// are built on generated edges (the frozen stage-1 generator in eval mode),
/// while the L1 term keeps using the real (edge, gray) pairs that have a target.
inline TrainResult train_stage2(const TrainConfig& cfg, const DatasetManifest& manifest,
                                const std::optional<std::filesystem::path>& resume_from = std::nullopt) {
  cfg.validate();
  if (cfg.stage != 2) throw ConfigError("train_stage2 requires stage = 2");
  const auto data = detail::training_split(cfg, manifest);
  auto models = init_params(cfg.model, cfg.seed);
  auto& g = models.g2;
  auto& d = models.d2;
  std::optional<Stage1Generator<float>> g1;
  if (cfg.edge_source != "real") {
    g1.emplace(stage1_generator_from(load_checkpoint(cfg.edge_source)));
    if (g1->spec().image_side != cfg.model.image_side) throw ConfigError("stage-1 checkpoint side differs from stage-2 model side");
    g1->set_requires_grad(false);
  }
  detail::LoopState s{AdamState<float>(g.params()), AdamState<float>(d.params()), 0, 0, 0, 0, 0, Rng(derive_seed(cfg.seed, 0x52))};
  LossLog log;
  if (resume_from) {
    detail::resume_into(load_checkpoint(*resume_from), cfg, "g2", g, "d2", d, s);
    log = detail::prior_log(cfg, s.step);
  }
  const auto hyper = cfg.adam();

  auto step_fn = [&](const Batch& batch, LossRow& row) {
    const auto& edges = batch.edges;
    const auto& target = cfg.identity_task ? batch.edges : batch.grays;
    std::optional<Tensor<float>> z2;
    if (cfg.model.stage2_latent_enabled) z2 = sample_latent(edges.dim(0), cfg.model.latent_dim, s.rng);

    auto translated = g.forward(edges, Mode::Train, s.rng, z2);
    Tensor<float> cond = edges, fake = translated;
    if (g1) {
      {
        NoGradGuard no_grad;
        cond = g1->forward(sample_latent(edges.dim(0), cfg.model.latent_dim, s.rng), Mode::Eval);
      }
      fake = g.forward(cond, Mode::Train, s.rng, z2);
    }

    const auto d_mode = cfg.freeze_discriminator ? Mode::Eval : Mode::Train;
    const auto fake_const = fake.detach();
    if (cfg.freeze_discriminator) {
      NoGradGuard no_grad;
      row.d_loss_real = bce_with_logits(d.forward(edges, target, Mode::Eval), 1.f).item();
      row.d_loss_fake = bce_with_logits(d.forward(cond, fake_const, Mode::Eval), 0.f).item();
      row.d_loss = 0.5f * (row.d_loss_real + row.d_loss_fake);
    } else {
      d.zero_grad();
      auto real_loss = bce_with_logits(d.forward(edges, target, Mode::Train), 1.f);
      auto fake_loss = bce_with_logits(d.forward(cond, fake_const, Mode::Train), 0.f);
      auto d_loss = scale(add(real_loss, fake_loss), 0.5);
      row.d_loss_real = real_loss.item();
      row.d_loss_fake = fake_loss.item();
      row.d_loss = d_loss.item();
      detail::require_finite(row.d_loss, "stage-2 discriminator loss", s.step + 1);
      d_loss.backward();
      adam_step(d.params(), s.adam_d, hyper);
      ++s.d_updates;
    }

    g.zero_grad();
    d.set_requires_grad(false);
    auto adv = bce_with_logits(d.forward(cond, fake, d_mode), 1.f);
    d.set_requires_grad(true);
    row.g_loss_adv = adv.item();
    auto g_loss = scale(adv, cfg.adversarial_weight);
    if (cfg.lambda_l1 > 0) {
      auto l1 = scale(l1_loss(translated, target), cfg.lambda_l1);
      row.g_loss_l1 = l1.item();
      g_loss = add(g_loss, l1);
    }
    detail::require_finite(static_cast<double>(row.g_loss_adv) + row.g_loss_l1, "stage-2 generator loss", s.step + 1);
    g_loss.backward();
    adam_step(g.params(), s.adam_g, hyper);
    ++s.g_updates;
  };
  auto make_ck = [&] { return detail::assemble_checkpoint(cfg, "g2", g, "d2", d, s); };
  log = detail::run_loop(cfg, data, s, std::move(log), step_fn, make_ck);
  TrainResult result{make_ck(), std::move(log)};
  detail::finish(cfg, result.checkpoint, result.log);
  return result;
}

/// Tiles images into a grid (`cols` per row) on a mid-gray background with 2 px gutters.
inline ImageBuffer tile_images(const std::vector<ImageBuffer>& images, int cols) {
  if (images.empty()) throw ShapeError("tile_images: no images");
  const int w = images[0].width, h = images[0].height, gap = 2;
  cols = std::max(1, std::min<int>(cols, static_cast<int>(images.size())));
  const int rows = static_cast<int>((images.size() + cols - 1) / cols);
  ImageBuffer sheet(cols * (w + gap) + gap, rows * (h + gap) + gap, 1, 128);
  for (std::size_t k = 0; k < images.size(); ++k) {
    const auto gray = to_grayscale(images[k]);
    if (gray.width != w || gray.height != h) throw ShapeError("tile_images: images differ in size");
    const int ox = gap + static_cast<int>(k % cols) * (w + gap), oy = gap + static_cast<int>(k / cols) * (h + gap);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) sheet.at(ox + x, oy + y) = gray.at(x, y);
  }
  return sheet;
}

struct GeneratedSet {
  std::vector<std::filesystem::path> edges;
  std::vector<std::filesystem::path> grays;
  std::filesystem::path sheet;
};

/// Sampled edges from stage 1 and their stage-2 translations, both in eval
/// mode, as N×1×H×W tensors in [-1, 1].
inline std::pair<Tensor<float>, Tensor<float>> sample_pairs(Stage1Generator<float>& g1, Stage2Generator<float>& g2, std::int64_t n,
                                                            std::uint64_t seed) {
  NoGradGuard no_grad;
  Rng rng(derive_seed(seed, 0x6E));
  const auto& s2 = g2.spec();
  if (g1.spec().image_side != s2.image_side) throw ConfigError("stage-1 and stage-2 checkpoints disagree on image side");
  auto edges = g1.forward(sample_latent(n, g1.spec().latent_dim, rng), Mode::Eval);
  std::optional<Tensor<float>> z2;
  if (s2.stage2_latent_enabled) z2 = sample_latent(n, s2.latent_dim, rng);
  auto grays = g2.forward(edges, Mode::Eval, rng, z2);
  return {edges, grays};
}

/// Writes edge_<i>.png / gray_<i>.png for n samples plus contact_sheet.png
/// (edges on the top row of each pair of rows, their translations below).
inline GeneratedSet generate(const std::filesystem::path& stage1_ckpt, const std::filesystem::path& stage2_ckpt, std::int64_t n,
                             std::uint64_t seed, const std::filesystem::path& out_dir) {
  if (n < 1) throw ConfigError("generate: n must be >= 1");
  auto g1 = stage1_generator_from(load_checkpoint(stage1_ckpt));
  auto g2 = stage2_generator_from(load_checkpoint(stage2_ckpt));
  auto [edges, grays] = sample_pairs(g1, g2, n, seed);
  std::filesystem::create_directories(out_dir);
  GeneratedSet out;
  constexpr int kCols = 8;
  std::vector<ImageBuffer> tiles;
  for (std::int64_t start = 0; start < n; start += kCols) {
    const auto end = std::min<std::int64_t>(n, start + kCols);
    std::vector<ImageBuffer> top, bottom;
    for (std::int64_t i = start; i < end; ++i) {
      auto e = from_model_range(edges, i);
      auto g = from_model_range(grays, i);
      out.edges.push_back(out_dir / ("edge_" + std::to_string(i) + ".png"));
      out.grays.push_back(out_dir / ("gray_" + std::to_string(i) + ".png"));
      write_png(out.edges.back(), e);
      write_png(out.grays.back(), g);
      top.push_back(std::move(e));
      bottom.push_back(std::move(g));
    }
    // Pad short rows so the grid stays rectangular.
    while (start > 0 && static_cast<int>(top.size()) < kCols) {
      top.emplace_back(top[0].width, top[0].height, 1, 128);
      bottom.emplace_back(top[0].width, top[0].height, 1, 128);
    }
    tiles.insert(tiles.end(), top.begin(), top.end());
    tiles.insert(tiles.end(), bottom.begin(), bottom.end());
  }
  out.sheet = out_dir / "contact_sheet.png";
  write_png(out.sheet, tile_images(tiles, static_cast<int>(std::min<std::int64_t>(n, kCols))));
  return out;
}

}  // namespace stagegen
