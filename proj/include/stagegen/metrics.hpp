#pragma once

// Fréchet distance between embedded image sets, the autoencoder embedding
// used in place of an Inception network, and the stage-2 contraction probe.
//
// Scores from this embedder are only comparable with other scores from the
// same embedder (same fingerprint); they are not Inception FID values.

#include <Eigen/Dense>

#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "stagegen/adam.hpp"
#include "stagegen/checkpoint.hpp"
#include "stagegen/dataset.hpp"
#include "stagegen/image_io.hpp"
#include "stagegen/models.hpp"
#include "stagegen/ops.hpp"
#include "stagegen/parallel.hpp"
#include "stagegen/training.hpp"

namespace stagegen {

// ---------------------------------------------------------------- statistics

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  std::int64_t n = 0;

  Eigen::Index dim() const { return mean.size(); }
};

/// Sample mean and unbiased covariance of the rows of `x` (n×d, n >= 2).
/// Plain loops keep the summation order fixed.
inline GaussianStats gaussian_stats(const Eigen::MatrixXd& x) {
  const auto n = x.rows(), d = x.cols();
  if (n < 2) throw ShapeError("gaussian_stats: need at least 2 samples, got " + std::to_string(n));
  GaussianStats s;
  s.n = n;
  s.mean = Eigen::VectorXd::Zero(d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) s.mean(j) += x(i, j);
  s.mean /= static_cast<double>(n);
  s.cov = Eigen::MatrixXd::Zero(d, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index a = 0; a < d; ++a) {
      const double da = x(i, a) - s.mean(a);
      for (Eigen::Index b = a; b < d; ++b) s.cov(a, b) += da * (x(i, b) - s.mean(b));
    }
  }
  for (Eigen::Index a = 0; a < d; ++a) {
    for (Eigen::Index b = a; b < d; ++b) {
      s.cov(a, b) /= static_cast<double>(n - 1);
      s.cov(b, a) = s.cov(a, b);
    }
  }
  return s;
}

/// Welford accumulation, for sets too large to hold as one matrix.
class GaussianAccumulator {
 public:
  explicit GaussianAccumulator(Eigen::Index dim) : mean_(Eigen::VectorXd::Zero(dim)), m2_(Eigen::MatrixXd::Zero(dim, dim)) {}

  void add(const Eigen::VectorXd& v) {
    if (v.size() != mean_.size()) throw ShapeError("GaussianAccumulator: dimension mismatch");
    ++n_;
    const Eigen::VectorXd delta = v - mean_;
    mean_ += delta / static_cast<double>(n_);
    const Eigen::VectorXd after = v - mean_;
    for (Eigen::Index a = 0; a < mean_.size(); ++a)
      for (Eigen::Index b = a; b < mean_.size(); ++b) m2_(a, b) += delta(a) * after(b);
  }

  void add_rows(const Eigen::MatrixXd& x) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) add(x.row(i).transpose());
  }

  std::int64_t count() const { return n_; }

  GaussianStats stats() const {
    if (n_ < 2) throw ShapeError("GaussianAccumulator: need at least 2 samples, got " + std::to_string(n_));
    GaussianStats s;
    s.n = n_;
    s.mean = mean_;
    s.cov = Eigen::MatrixXd(mean_.size(), mean_.size());
    for (Eigen::Index a = 0; a < mean_.size(); ++a) {
      for (Eigen::Index b = a; b < mean_.size(); ++b) {
        s.cov(a, b) = m2_(a, b) / static_cast<double>(n_ - 1);
        s.cov(b, a) = s.cov(a, b);
      }
    }
    return s;
  }

 private:
  std::int64_t n_ = 0;
  Eigen::VectorXd mean_;
  Eigen::MatrixXd m2_;
};

/// Principal square root of a symmetric PSD matrix; negative eigenvalues
/// (round-off) are clamped to zero.
inline Eigen::MatrixXd matrix_sqrt_psd(const Eigen::MatrixXd& m, double symmetry_tol = 1e-9) {
  if (m.rows() != m.cols()) throw ShapeError("matrix_sqrt_psd: matrix is not square");
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  const double asym = (m - m.transpose()).cwiseAbs().maxCoeff();
  if (asym > symmetry_tol * scale) {
    throw Error("matrix_sqrt_psd: matrix is not symmetric (max |M - M^T| = " + std::to_string(asym) + ")");
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (m + m.transpose()));
  if (eig.info() != Eigen::Success) throw Error("matrix_sqrt_psd: eigendecomposition failed");
  const Eigen::VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

inline constexpr double kDefaultEpsReg = 1e-6;

/// d² = |μ1 - μ2|² + tr Σ1 + tr Σ2 - 2 tr (Σ1^½ Σ2 Σ1^½)^½, with eps_reg added
/// to both covariance diagonals. The symmetric cross term has the same trace
/// as (Σ1 Σ2)^½ but real eigenvalues.
inline double frechet_distance(const GaussianStats& a, const GaussianStats& b, double eps_reg = kDefaultEpsReg) {
  if (a.dim() != b.dim()) throw ShapeError("frechet_distance: embedding dimensions differ");
  if (eps_reg < 0) throw ConfigError("frechet_distance: eps_reg must be >= 0");
  const auto d = a.dim();
  const Eigen::MatrixXd reg = eps_reg * Eigen::MatrixXd::Identity(d, d);
  const Eigen::MatrixXd s1 = a.cov + reg, s2 = b.cov + reg;
  const Eigen::MatrixXd r1 = matrix_sqrt_psd(s1);
  Eigen::MatrixXd cross = r1 * s2 * r1;
  cross = 0.5 * (cross + cross.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cross, Eigen::EigenvaluesOnly);
  if (eig.info() != Eigen::Success) throw Error("frechet_distance: eigendecomposition failed");
  double tr_cross = 0;
  for (Eigen::Index i = 0; i < d; ++i) tr_cross += std::sqrt(std::max(0.0, eig.eigenvalues()(i)));
  const double dist = (a.mean - b.mean).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr_cross;
  return std::max(0.0, dist);
}

// ------------------------------------------------------------------ embedder

enum class ImageKind { Edge, Gray };

inline std::string kind_name(ImageKind k) { return k == ImageKind::Edge ? "edge" : "gray"; }

inline ImageKind parse_kind(const std::string& s) {
  if (s == "edge") return ImageKind::Edge;
  if (s == "gray") return ImageKind::Gray;
  throw ConfigError("image kind must be 'edge' or 'gray', got '" + s + "'");
}

/// Strided-conv encoder to a d-vector and a mirrored transposed-conv decoder.
/// No normalization layers, so an image's code never depends on its batch.
template <class T>
class ConvAutoencoder : public Module<T> {
 public:
  ConvAutoencoder(int side, int dim) : side_(side), dim_(dim) {
    if (side < 8 || (side & (side - 1)) != 0) throw ConfigError("embedder side must be a power of two >= 8");
    if (dim < 1) throw ConfigError("embedding dim must be >= 1");
    levels_ = log2_exact(side) - 2;
    std::int64_t ch = 1;
    for (int b = 0; b < levels_; ++b) {
      const std::int64_t out = width(b);
      this->add_param("enc" + std::to_string(b) + ".weight", {out, ch, 4, 4});
      this->add_param("enc" + std::to_string(b) + ".bias", {out});
      ch = out;
    }
    top_ = ch;
    this->add_param("code.weight", {dim, top_ * 16});
    this->add_param("code.bias", {dim});
    this->add_param("dec_proj.weight", {top_ * 16, dim});
    this->add_param("dec_proj.bias", {top_ * 16});
    for (int b = levels_ - 1; b >= 0; --b) {
      const std::int64_t out = b == 0 ? 1 : width(b - 1);
      this->add_param("dec" + std::to_string(b) + ".weight", {ch, out, 4, 4});
      this->add_param("dec" + std::to_string(b) + ".bias", {out});
      ch = out;
    }
  }

  int side() const { return side_; }
  int dim() const { return dim_; }

  /// Fan-in scaled normal weights, zero biases. The GAN initializer's fixed
  /// 0.02 scale lets Adam inflate every layer by an order of magnitude, which
  /// compounds into arbitrary code magnitudes.
  void init_scaled(std::uint64_t seed) {
    Rng rng(seed);
    for (std::size_t i = 0; i < this->params().size(); ++i) {
      const auto& name = this->param_names()[i];
      auto& p = this->params()[i];
      if (!name.ends_with(".weight")) {
        std::fill(p.values().begin(), p.values().end(), T(0));
        continue;
      }
      double fan_in = static_cast<double>(p.dim(1));                        // linear [out, in]
      if (p.rank() == 4) fan_in *= static_cast<double>(p.dim(2) * p.dim(3));  // conv [out, in, k, k]
      if (name.starts_with("dec") && p.rank() == 4) fan_in = static_cast<double>(p.dim(0)) * 4;  // stride-2 transposed conv [in, out, 4, 4]
      const bool linear_out = name == "code.weight" || name == "dec0.weight";
      fill_normal(p.data(), rng, 0.0, std::sqrt((linear_out ? 1.0 : 2.0) / fan_in));
    }
  }

  Tensor<T> encode(const Tensor<T>& x) const {
    require_shape(x, 4, "embedder input");
    if (x.dim(1) != 1 || x.dim(2) != side_ || x.dim(3) != side_) {
      throw ShapeError("embedder expects N×1×" + std::to_string(side_) + "×" + std::to_string(side_) + ", got " + shape_str(x.shape()));
    }
    auto h = x;
    for (int b = 0; b < levels_; ++b) {
      const auto name = "enc" + std::to_string(b);
      h = leaky_relu(conv2d(h, this->param(name + ".weight"), this->bias(name), 2, 1));
    }
    h = reshape(h, {x.dim(0), top_ * 16});
    return linear(h, this->param("code.weight"), this->bias("code"));
  }

  Tensor<T> decode(const Tensor<T>& z) const {
    auto h = relu(linear(z, this->param("dec_proj.weight"), this->bias("dec_proj")));
    h = reshape(h, {z.dim(0), top_, 4, 4});
    for (int b = levels_ - 1; b >= 0; --b) {
      const auto name = "dec" + std::to_string(b);
      h = conv_transpose2d(h, this->param(name + ".weight"), this->bias(name), 2, 1);
      h = b == 0 ? tanh(h) : relu(h);
    }
    return h;
  }

  Tensor<T> forward(const Tensor<T>& x) const { return decode(encode(x)); }

 private:
  static std::int64_t width(int b) { return std::min<std::int64_t>(64, 16LL << b); }

  int side_, dim_, levels_ = 0;
  std::int64_t top_ = 0;
};

struct EmbedderOptions {
  int dim = 64;
  ImageKind kind = ImageKind::Gray;
  std::int64_t steps = 400;
  std::int64_t batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

/// A fitted embedder. The checkpoint ("kind" = "embedder") carries the
/// encoder/decoder weights, the options, and a fingerprint over both.
struct EmbedderCheckpoint {
  Checkpoint checkpoint;
  std::string fingerprint;
  double eval_l1_start = 0;  // reconstruction L1 on the eval split before training
  double eval_l1_end = 0;
};

namespace detail {

inline std::string embedder_fingerprint(const Checkpoint& ck) {
  std::string blob = ck.meta("embedder_options");
  for (const auto& [name, t] : ck.tensors) {
    blob += name;
    blob.append(reinterpret_cast<const char*>(t.values().data()), t.values().size() * sizeof(float));
  }
  return fnv1a_hex(blob);
}

template <class T>
double mean_reconstruction_l1(const ConvAutoencoder<T>& net, const Tensor<float>& images) {
  NoGradGuard no_grad;
  const auto rec = net.forward(images.cast<T>());
  double s = 0;
  for (std::int64_t i = 0; i < rec.numel(); ++i) s += std::abs(static_cast<double>(rec[i]) - images[i]);
  return s / static_cast<double>(rec.numel());
}

}  // namespace detail

/// Trains the autoencoder on the train split of one image kind and reports
/// eval-split L1 before and after. The training loss is squared error: on
/// sparse edge maps an L1 objective settles on the per-pixel median, an
/// all-background image, and never learns a code.
inline EmbedderCheckpoint fit_embedder(const DatasetManifest& manifest, const EmbedderOptions& opt = {}) {
  if (opt.steps < 0 || opt.batch_size < 1) throw ConfigError("fit_embedder: steps must be >= 0 and batch_size >= 1");
  const SplitData train(manifest, Split::Train);
  const auto pick = [&](const Batch& b) { return opt.kind == ImageKind::Edge ? b.edges : b.grays; };
  Tensor<float> eval_images;
  if (manifest.records_in(Split::Eval).empty()) {
    eval_images = pick(train.all());
  } else {
    eval_images = pick(SplitData(manifest, Split::Eval).all());
  }

  ConvAutoencoder<float> net(manifest.image_side, opt.dim);
  net.init_scaled(derive_seed(opt.seed, 0xE3B));
  EmbedderCheckpoint out;
  out.eval_l1_start = detail::mean_reconstruction_l1(net, eval_images);

  AdamState<float> adam(net.params());
  const AdamHyper hyper{opt.lr, 0.9, 0.999, 1e-8};
  const auto bs = static_cast<std::size_t>(std::min<std::int64_t>(opt.batch_size, static_cast<std::int64_t>(train.size())));
  std::int64_t step = 0;
  for (std::int64_t epoch = 0; step < opt.steps; ++epoch) {
    for (const auto& idx : batch_plan(train.size(), bs, derive_seed(opt.seed, 0xE3C), epoch)) {
      if (step >= opt.steps) break;
      const auto x = pick(train.gather(idx));
      net.zero_grad();
      auto loss = mse_loss(net.forward(x), x);
      if (!std::isfinite(loss.item())) throw DivergenceError("embedder loss became non-finite at step " + std::to_string(step + 1));
      loss.backward();
      adam_step(net.params(), adam, hyper);
      ++step;
    }
  }
  out.eval_l1_end = detail::mean_reconstruction_l1(net, eval_images);

  auto& ck = out.checkpoint;
  store_module(ck, "embedder", net);
  const nlohmann::json options = {{"dim", opt.dim},
                                  {"kind", kind_name(opt.kind)},
                                  {"side", manifest.image_side},
                                  {"steps", opt.steps},
                                  {"batch_size", opt.batch_size},
                                  {"lr", opt.lr},
                                  {"seed", opt.seed},
                                  {"source_fingerprint", manifest.source_fingerprint}};
  ck.metadata["kind"] = "embedder";
  ck.metadata["embedder_options"] = options.dump();
  ck.metadata["eval_l1_start"] = nlohmann::json(out.eval_l1_start).dump();
  ck.metadata["eval_l1_end"] = nlohmann::json(out.eval_l1_end).dump();
  out.fingerprint = detail::embedder_fingerprint(ck);
  ck.metadata["fingerprint"] = out.fingerprint;
  return out;
}

/// Embeds images in double precision, one image at a time.
class Embedder {
 public:
  explicit Embedder(const Checkpoint& ck) : net_(load_net(ck)) {
    kind_ = parse_kind(options(ck).at("kind").get<std::string>());
    fingerprint_ = detail::embedder_fingerprint(ck);
    if (ck.metadata.count("fingerprint") && ck.meta("fingerprint") != fingerprint_) {
      throw FormatError("embedder fingerprint does not match its contents");
    }
  }

  explicit Embedder(const EmbedderCheckpoint& e) : Embedder(e.checkpoint) {}

  int dim() const { return net_.dim(); }
  int side() const { return net_.side(); }
  ImageKind kind() const { return kind_; }
  const std::string& fingerprint() const { return fingerprint_; }

  /// images N×1×S×S in [-1, 1] -> N×d.
  Eigen::MatrixXd embed(const Tensor<float>& images) const {
    require_shape(images, 4, "embed");
    const auto n = images.dim(0);
    const auto per = images.numel() / std::max<std::int64_t>(n, 1);
    Eigen::MatrixXd out(n, dim());
    parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
      NoGradGuard no_grad;
      Tensor<double> x(Shape{1, images.dim(1), images.dim(2), images.dim(3)});
      for (std::int64_t k = 0; k < per; ++k) x[k] = images[static_cast<std::int64_t>(i) * per + k];
      const auto z = net_.encode(x);
      for (int j = 0; j < dim(); ++j) out(static_cast<Eigen::Index>(i), j) = z[j];
    });
    return out;
  }

 private:
  static nlohmann::json options(const Checkpoint& ck) {
    require_kind(ck, "embedder");
    try {
      auto j = nlohmann::json::parse(ck.meta("embedder_options"));
      j.at("side").get<int>();
      j.at("dim").get<int>();
      j.at("kind").get<std::string>();
      return j;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("embedder options: ") + e.what());
    }
  }

  static ConvAutoencoder<double> load_net(const Checkpoint& ck) {
    const auto opt = options(ck);
    ConvAutoencoder<float> f(opt["side"].get<int>(), opt["dim"].get<int>());
    restore_module(ck, "embedder", f);
    ConvAutoencoder<double> net(f.side(), f.dim());
    net.copy_values_from(f);
    return net;
  }

  ConvAutoencoder<double> net_;
  ImageKind kind_ = ImageKind::Gray;
  std::string fingerprint_;
};

// ----------------------------------------------------------------------- FID

struct FidReport {
  double fid = 0;
  std::int64_t n_real = 0;
  std::int64_t n_fake = 0;
  int embed_dim = 0;
  double eps_reg = kDefaultEpsReg;
  std::string embedder_fingerprint;
};

inline void to_json(nlohmann::json& j, const FidReport& r) {
  j = {{"fid", r.fid},
       {"n_real", r.n_real},
       {"n_fake", r.n_fake},
       {"embed_dim", r.embed_dim},
       {"eps_reg", r.eps_reg},
       {"embedder_fingerprint", r.embedder_fingerprint}};
}

inline FidReport fid_score(const Embedder& embedder, const Tensor<float>& real, const Tensor<float>& fake,
                           double eps_reg = kDefaultEpsReg) {
  const std::int64_t need = embedder.dim() + 1;
  for (const auto* set : {&real, &fake}) {
    require_shape(*set, 4, "fid_score images");
    if (set->dim(0) < need) {
      throw ConfigError("fid_score: " + std::string(set == &real ? "real" : "fake") + " set has " + std::to_string(set->dim(0)) +
                        " images; at least " + std::to_string(need) + " (embed_dim + 1) are required");
    }
  }
  FidReport r;
  r.fid = frechet_distance(gaussian_stats(embedder.embed(real)), gaussian_stats(embedder.embed(fake)), eps_reg);
  r.n_real = real.dim(0);
  r.n_fake = fake.dim(0);
  r.embed_dim = embedder.dim();
  r.eps_reg = eps_reg;
  r.embedder_fingerprint = embedder.fingerprint();
  return r;
}

/// Every image of `kind` in the manifest (both splits).
inline Tensor<float> manifest_images(const DatasetManifest& m, ImageKind kind) {
  std::vector<ImageBuffer> images;
  for (const auto& r : m.records) {
    auto img = read_image(m.resolve(kind == ImageKind::Edge ? r.edge_path : r.gray_path));
    images.push_back(img.channels == 1 ? std::move(img) : to_grayscale(img));
  }
  return stack_model_range(images);
}

/// Every PNG/JPEG in `dir` whose file name starts with `prefix`, in sorted order.
inline Tensor<float> directory_images(const std::filesystem::path& dir, const std::string& prefix = "") {
  if (!std::filesystem::is_directory(dir)) throw IoError(dir.string() + ": not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && has_image_extension(e.path()) && e.path().filename().string().starts_with(prefix)) {
      files.push_back(e.path());
    }
  }
  if (files.empty()) throw IoError(dir.string() + ": no images" + (prefix.empty() ? "" : " named " + prefix + "*"));
  std::sort(files.begin(), files.end());
  std::vector<ImageBuffer> images;
  for (const auto& f : files) {
    auto img = read_image(f);
    images.push_back(img.channels == 1 ? std::move(img) : to_grayscale(img));
  }
  return stack_model_range(images);
}

// ----------------------------------------------------------- contraction probe

struct ContractionReport {
  double fraction_contractive = 0;
  double mean_ratio = 0;
  double min_ratio = 0;
  double max_ratio = 0;
  std::int64_t n_pairs = 0;
  double sigma = 0;
  std::uint64_t seed = 0;
  std::vector<double> ratios;
};

inline void to_json(nlohmann::json& j, const ContractionReport& r) {
  j = {{"fraction_contractive", r.fraction_contractive},
       {"mean_ratio", r.mean_ratio},
       {"min_ratio", r.min_ratio},
       {"max_ratio", r.max_ratio},
       {"n_pairs", r.n_pairs},
       {"sigma", r.sigma},
       {"seed", r.seed}};
}

using ImageMap = std::function<Tensor<float>(const Tensor<float>&)>;

/// For n_pairs draws of an edge map x and Gaussian h (stddev sigma per pixel),
/// r = |f(x + h) - f(x)| / |h| in the Euclidean norm over pixels.
inline ContractionReport contraction_probe(const ImageMap& f, const Tensor<float>& edges, double sigma, std::int64_t n_pairs,
                                           std::uint64_t seed) {
  require_shape(edges, 4, "contraction_probe edges");
  if (edges.dim(0) < 1) throw ConfigError("contraction_probe: no edge samples");
  if (!(sigma > 0) || n_pairs < 1) throw ConfigError("contraction_probe: sigma must be > 0 and n_pairs >= 1");
  Rng rng(derive_seed(seed, 0xC0));
  const auto per = edges.numel() / edges.dim(0);
  const Shape one{1, edges.dim(1), edges.dim(2), edges.dim(3)};
  ContractionReport r;
  r.n_pairs = n_pairs;
  r.sigma = sigma;
  r.seed = seed;
  std::int64_t contractive = 0;
  for (std::int64_t k = 0; k < n_pairs; ++k) {
    const auto idx = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(edges.dim(0)));
    Tensor<float> x(one), xh(one);
    for (std::int64_t i = 0; i < per; ++i) x[i] = edges[idx * per + i];
    Tensor<float> h(one);
    fill_normal(h.data(), rng, 0.0, sigma);
    for (std::int64_t i = 0; i < per; ++i) xh[i] = x[i] + h[i];
    const auto fx = f(x), fxh = f(xh);
    if (fx.numel() != fxh.numel()) throw ShapeError("contraction_probe: map output size changed");
    double num = 0, den = 0;
    for (std::int64_t i = 0; i < fx.numel(); ++i) num += std::pow(static_cast<double>(fxh[i]) - fx[i], 2);
    // |h| is measured on what actually reached f, after float rounding of x + h.
    for (std::int64_t i = 0; i < per; ++i) den += std::pow(static_cast<double>(xh[i]) - x[i], 2);
    const double ratio = std::sqrt(num) / std::sqrt(den);
    r.ratios.push_back(ratio);
    if (ratio < 1.0) ++contractive;
  }
  double s = 0;
  for (double v : r.ratios) s += v;
  r.mean_ratio = s / static_cast<double>(n_pairs);
  r.fraction_contractive = static_cast<double>(contractive) / static_cast<double>(n_pairs);
  r.min_ratio = *std::min_element(r.ratios.begin(), r.ratios.end());
  r.max_ratio = *std::max_element(r.ratios.begin(), r.ratios.end());
  return r;
}

/// Probe of a trained stage-2 generator in eval mode. With the latent input
/// enabled, each pair shares one z2 so only the edge map differs.
inline ContractionReport contraction_probe(const Checkpoint& stage2_ckpt, const Tensor<float>& edges, double sigma, std::int64_t n_pairs,
                                           std::uint64_t seed) {
  auto g2 = stage2_generator_from(stage2_ckpt);
  Rng z_rng(derive_seed(seed, 0xC1));
  std::optional<Tensor<float>> z2;
  std::int64_t calls = 0;
  const ImageMap f = [&](const Tensor<float>& x) {
    NoGradGuard no_grad;
    if (g2.spec().stage2_latent_enabled && calls++ % 2 == 0) z2 = sample_latent(1, g2.spec().latent_dim, z_rng);
    Rng unused(0);
    return g2.forward(x, Mode::Eval, unused, z2);
  };
  return contraction_probe(f, edges, sigma, n_pairs, seed);
}

}  // namespace stagegen
