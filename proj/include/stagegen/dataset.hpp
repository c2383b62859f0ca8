#pragma once

// Paired grayscale/edge training sets: ingestion from a directory of RGB
// images, the JSON Lines manifest, and deterministic batch iteration.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "stagegen/image.hpp"
#include "stagegen/image_io.hpp"
#include "stagegen/parallel.hpp"
#include "stagegen/rng.hpp"

namespace stagegen {

namespace fs = std::filesystem;

enum class Split { Train, Eval };

inline std::string split_name(Split s) { return s == Split::Train ? "train" : "eval"; }

inline Split parse_split(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "eval") return Split::Eval;
  throw ConfigError("unknown split '" + name + "' (expected train or eval)");
}

struct ManifestRecord {
  std::string id;
  std::string rgb_path;  // paths are relative to the manifest directory
  std::string gray_path;
  std::string edge_path;
  Split split = Split::Train;

  bool operator==(const ManifestRecord&) const = default;
};

struct DatasetManifest {
  fs::path root;  // directory holding manifest.jsonl; not serialized
  int image_side = 0;
  std::string source_fingerprint;
  std::int64_t skipped = 0;
  double split_ratio = 0.95;
  double subset_fraction = 1.0;
  std::uint64_t seed = 0;
  std::vector<ManifestRecord> records;

  fs::path resolve(const std::string& rel) const { return root / rel; }

  std::vector<ManifestRecord> records_in(Split s) const {
    std::vector<ManifestRecord> out;
    for (const auto& r : records) {
      if (r.split == s) out.push_back(r);
    }
    return out;
  }
};

inline constexpr const char* kManifestFile = "manifest.jsonl";
inline constexpr double kDefaultSplitRatio = 0.95;

/// FNV-1a 64-bit, hex encoded.
inline std::string fnv1a_hex(std::string_view data, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string serialize_manifest(const DatasetManifest& m) {
  using nlohmann::json;
  std::string out;
  json header = {{"kind", "header"},
                 {"format_version", 1},
                 {"image_side", m.image_side},
                 {"source_fingerprint", m.source_fingerprint},
                 {"skipped", m.skipped},
                 {"split_ratio", m.split_ratio},
                 {"subset_fraction", m.subset_fraction},
                 {"seed", m.seed},
                 {"n_records", m.records.size()}};
  out += header.dump() + "\n";
  for (const auto& r : m.records) {
    json rec = {{"kind", "record"},   {"id", r.id},           {"rgb_path", r.rgb_path},
                {"gray_path", r.gray_path}, {"edge_path", r.edge_path}, {"split", split_name(r.split)}};
    out += rec.dump() + "\n";
  }
  return out;
}

inline DatasetManifest parse_manifest(const std::string& text, const fs::path& root, const std::string& identity = "manifest") {
  using nlohmann::json;
  DatasetManifest m;
  m.root = root;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  std::size_t expected = 0;
  std::set<std::string> ids;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
      const auto kind = j.at("kind").get<std::string>();
      if (kind == "header") {
        if (have_header) throw FormatError("duplicate header");
        have_header = true;
        if (j.at("format_version").get<int>() != 1) throw FormatError("unsupported manifest format_version");
        m.image_side = j.at("image_side").get<int>();
        m.source_fingerprint = j.at("source_fingerprint").get<std::string>();
        m.skipped = j.at("skipped").get<std::int64_t>();
        m.split_ratio = j.at("split_ratio").get<double>();
        m.subset_fraction = j.at("subset_fraction").get<double>();
        m.seed = j.at("seed").get<std::uint64_t>();
        expected = j.at("n_records").get<std::size_t>();
      } else if (kind == "record") {
        if (!have_header) throw FormatError("record before header");
        ManifestRecord r{j.at("id").get<std::string>(), j.at("rgb_path").get<std::string>(), j.at("gray_path").get<std::string>(),
                         j.at("edge_path").get<std::string>(), parse_split(j.at("split").get<std::string>())};
        if (!ids.insert(r.id).second) throw FormatError("duplicate id '" + r.id + "'");
        m.records.push_back(std::move(r));
      } else {
        throw FormatError("unknown line kind '" + kind + "'");
      }
    } catch (const json::exception& e) {
      throw FormatError(identity + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      throw FormatError(identity + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!have_header) throw FormatError(identity + ": missing header line");
  if (expected != m.records.size()) {
    throw FormatError(identity + ": header declares " + std::to_string(expected) + " records, found " + std::to_string(m.records.size()));
  }
  return m;
}

inline void save_manifest(const DatasetManifest& m, const fs::path& path) { write_text_atomic(path, serialize_manifest(m)); }

/// Loads a manifest; `path` may name the file or its directory. With
/// `check_files`, every referenced gray/edge image must exist.
inline DatasetManifest load_manifest(fs::path path, bool check_files = true) {
  if (fs::is_directory(path)) path /= kManifestFile;
  const auto bytes = read_file_bytes(path);
  auto m = parse_manifest(std::string(bytes.begin(), bytes.end()), path.parent_path(), path.string());
  if (check_files) {
    for (const auto& r : m.records) {
      for (const auto* p : {&r.gray_path, &r.edge_path}) {
        if (!fs::exists(m.resolve(*p))) throw IoError(path.string() + ": record '" + r.id + "' references missing file " + *p);
      }
    }
  }
  return m;
}

/// Assigns the first round(ratio·n) records of a seeded permutation to train.
inline void assign_splits(std::vector<ManifestRecord>& records, double split_ratio, std::uint64_t seed) {
  if (!(split_ratio > 0.0 && split_ratio <= 1.0)) throw ConfigError("split_ratio must be in (0, 1]");
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, 0x5111));
  deterministic_shuffle(order, rng);
  const auto n_train = static_cast<std::size_t>(std::llround(split_ratio * static_cast<double>(records.size())));
  for (std::size_t k = 0; k < order.size(); ++k) records[order[k]].split = k < n_train ? Split::Train : Split::Eval;
}

/// Seeded subset of round(fraction·n) items (at least 1), returned in original order.
inline std::vector<std::size_t> seeded_subset(std::size_t n, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("subset fraction must be in (0, 1], got " + std::to_string(fraction));
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (fraction >= 1.0) return idx;
  Rng rng(derive_seed(seed, 0x5b5e7));
  deterministic_shuffle(idx, rng);
  const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))));
  idx.resize(std::min(k, n));
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Grayscale and edge images for one RGB source: edges are taken at source
/// resolution, then both are resized to `side`×`side`.
struct ProcessedPair {
  ImageBuffer gray;
  ImageBuffer edge;
};

inline ProcessedPair preprocess_image(const ImageBuffer& rgb, int side) {
  auto gray = to_grayscale(rgb);
  auto edge = sobel_edges(gray);
  return {resize_bilinear(gray, side, side), resize_bilinear(edge, side, side)};
}

inline bool has_image_extension(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

struct BuildOptions {
  int image_side = 64;
  double split_ratio = kDefaultSplitRatio;
  double subset_fraction = 1.0;
  std::uint64_t seed = 0;
  std::size_t min_source_images = 10;
};

/// Converts every (subset-selected) image in `src_dir` into paired
/// grayscale/edge PNGs under out_dir/{gray,edge}/ and writes out_dir/manifest.jsonl.
/// Undecodable files are reported on stderr and counted in `skipped`.
inline DatasetManifest build_dataset(const fs::path& src_dir, const fs::path& out_dir, const BuildOptions& opt) {
  if (opt.image_side < 3) throw ConfigError("image_side must be >= 3");
  if (!fs::is_directory(src_dir)) throw IoError("source directory not found: " + src_dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(src_dir)) {
    if (entry.is_regular_file() && has_image_extension(entry.path())) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.size() < opt.min_source_images) {
    throw ConfigError(src_dir.string() + " holds " + std::to_string(files.size()) + " images; at least " +
                      std::to_string(opt.min_source_images) + " are required");
  }
  std::string listing;
  for (const auto& f : files) listing += f.filename().string() + '\0' + std::to_string(fs::file_size(f)) + '\n';

  const auto chosen = seeded_subset(files.size(), opt.subset_fraction, opt.seed);
  fs::create_directories(out_dir / "gray");
  fs::create_directories(out_dir / "edge");

  std::map<std::string, int> stem_count;
  for (const auto& f : files) ++stem_count[f.stem().string()];

  std::vector<std::optional<ManifestRecord>> results(chosen.size());
  parallel_for(chosen.size(), [&](std::size_t k) {
    const auto& src = files[chosen[k]];
    std::string id = src.stem().string();
    if (stem_count[id] > 1) id += "_" + src.extension().string().substr(1);
    try {
      auto pair = preprocess_image(read_image(src), opt.image_side);
      const std::string gray_rel = "gray/" + id + ".png", edge_rel = "edge/" + id + ".png";
      write_png(out_dir / gray_rel, pair.gray);
      write_png(out_dir / edge_rel, pair.edge);
      results[k] = ManifestRecord{id, fs::proximate(src, out_dir).generic_string(), gray_rel, edge_rel, Split::Train};
    } catch (const Error& e) {
      std::cerr << "skipping " << src.string() << ": " << e.what() << '\n';
    }
  });

  DatasetManifest m;
  m.root = out_dir;
  m.image_side = opt.image_side;
  m.source_fingerprint = fnv1a_hex(listing);
  m.split_ratio = opt.split_ratio;
  m.subset_fraction = opt.subset_fraction;
  m.seed = opt.seed;
  for (auto& r : results) {
    if (r) m.records.push_back(std::move(*r));
    else ++m.skipped;
  }
  if (m.records.empty()) throw Error("build_dataset: no decodable images in " + src_dir.string());
  std::sort(m.records.begin(), m.records.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  assign_splits(m.records, opt.split_ratio, opt.seed);
  save_manifest(m, out_dir / kManifestFile);
  return m;
}

/// N×1×H×W edge and grayscale tensors in [-1, 1], aligned by id.
struct Batch {
  Tensor<float> edges;
  Tensor<float> grays;
  std::vector<std::string> ids;
};

/// Record indices (into records_in(split)) for every batch of one epoch.
/// The permutation depends only on (seed, epoch); the last batch may be short.
inline std::vector<std::vector<std::size_t>> batch_plan(std::size_t n_records, std::size_t batch_size, std::uint64_t seed,
                                                        std::int64_t epoch) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  std::vector<std::size_t> order(n_records);
  for (std::size_t i = 0; i < n_records; ++i) order[i] = i;
  Rng rng(derive_seed(seed, 0xE90C0000ULL + static_cast<std::uint64_t>(epoch)));
  deterministic_shuffle(order, rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t s = 0; s < n_records; s += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n_records, s + batch_size)));
  }
  return batches;
}

/// Decoded images of one split, held in memory as model-range planes.
class SplitData {
 public:
  SplitData() = default;

  SplitData(const DatasetManifest& m, Split split) : side_(m.image_side) {
    const auto recs = m.records_in(split);
    if (recs.empty()) throw ConfigError("split '" + split_name(split) + "' has no records");
    ids_.resize(recs.size());
    edges_.resize(recs.size());
    grays_.resize(recs.size());
    parallel_for(recs.size(), [&](std::size_t i) {
      ids_[i] = recs[i].id;
      edges_[i] = load_plane(m.resolve(recs[i].edge_path));
      grays_[i] = load_plane(m.resolve(recs[i].gray_path));
    });
  }

  std::size_t size() const { return ids_.size(); }
  int side() const { return side_; }
  const std::vector<std::string>& ids() const { return ids_; }

  Batch gather(const std::vector<std::size_t>& indices) const {
    const auto n = static_cast<std::int64_t>(indices.size());
    const std::size_t plane = static_cast<std::size_t>(side_) * side_;
    Batch b{Tensor<float>({n, 1, side_, side_}), Tensor<float>({n, 1, side_, side_}), {}};
    for (std::size_t k = 0; k < indices.size(); ++k) {
      const auto i = indices.at(k);
      std::copy(edges_.at(i).begin(), edges_.at(i).end(), b.edges.values().begin() + static_cast<std::ptrdiff_t>(k * plane));
      std::copy(grays_.at(i).begin(), grays_.at(i).end(), b.grays.values().begin() + static_cast<std::ptrdiff_t>(k * plane));
      b.ids.push_back(ids_[i]);
    }
    return b;
  }

  Batch all() const {
    std::vector<std::size_t> idx(size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return gather(idx);
  }

  /// Restricts to the given indices (used by the subset experiment).
  SplitData subset(const std::vector<std::size_t>& indices) const {
    SplitData s;
    s.side_ = side_;
    for (auto i : indices) {
      s.ids_.push_back(ids_.at(i));
      s.edges_.push_back(edges_.at(i));
      s.grays_.push_back(grays_.at(i));
    }
    return s;
  }

 private:
  std::vector<float> load_plane(const fs::path& p) const {
    auto img = read_image(p);
    if (img.channels != 1) img = to_grayscale(img);
    if (img.width != side_ || img.height != side_) {
      throw ShapeError(p.string() + ": expected " + std::to_string(side_) + "x" + std::to_string(side_) + " image");
    }
    auto t = to_model_range(img);
    return t.values();
  }

  int side_ = 0;
  std::vector<std::string> ids_;
  std::vector<std::vector<float>> edges_;
  std::vector<std::vector<float>> grays_;
};

/// All batches of one epoch of `split`, materialized from disk.
inline std::vector<Batch> iterate_batches(const DatasetManifest& m, const std::string& split, std::size_t batch_size,
                                          std::uint64_t shuffle_seed, std::int64_t epoch) {
  const SplitData data(m, parse_split(split));
  std::vector<Batch> out;
  for (const auto& idx : batch_plan(data.size(), batch_size, shuffle_seed, epoch)) out.push_back(data.gather(idx));
  return out;
}


// Procedural face-like images standing in for a photo corpus. Each image is
// drawn at twice the target side on a flat background: an elliptical head of
// random skin tone, optional hair cap, two eyes with pupils, eyebrows, a nose
// stroke and a mouth. Centre, scale, aspect and every intensity vary per image
// and depend only on (seed, index).
namespace detail {

struct Rgb {
  double r, g, b;
};

class Canvas {
 public:
  explicit Canvas(int side) : img_(side, side, 3) {}

  void fill(Rgb c) {
    for (int y = 0; y < img_.height; ++y)
      for (int x = 0; x < img_.width; ++x) put(x, y, c);
  }

  // Axis-aligned ellipse in unit coordinates, optionally rotated by `angle` radians.
  void ellipse(double cx, double cy, double rx, double ry, Rgb c, double angle = 0.0, double y_min = -1e9, double y_max = 1e9) {
    const double s = img_.width, ca = std::cos(angle), sa = std::sin(angle);
    for (int y = 0; y < img_.height; ++y) {
      const double v = (y + 0.5) / s;
      if (v < y_min || v > y_max) continue;
      for (int x = 0; x < img_.width; ++x) {
        const double dx = (x + 0.5) / s - cx, dy = v - cy;
        const double u = (ca * dx + sa * dy) / rx, w = (-sa * dx + ca * dy) / ry;
        if (u * u + w * w <= 1.0) put(x, y, c);
      }
    }
  }

  const ImageBuffer& image() const { return img_; }

 private:
  void put(int x, int y, Rgb c) {
    img_.at(x, y, 0) = clamp_u8(c.r);
    img_.at(x, y, 1) = clamp_u8(c.g);
    img_.at(x, y, 2) = clamp_u8(c.b);
  }

  ImageBuffer img_;
};

}  // namespace detail

inline ImageBuffer render_face(int render_side, std::uint64_t seed, std::uint64_t index) {
  Rng rng(derive_seed(seed, index));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  auto tone = [&](double base, double spread) {
    const double t = uni(-spread, spread);
    return detail::Rgb{base + t + uni(-10, 10), base + t + uni(-10, 10), base + t + uni(-10, 10)};
  };

  detail::Canvas canvas(render_side);
  canvas.fill(tone(uni(30, 200), 25));

  const double cx = 0.5 + uni(-0.07, 0.07), cy = 0.52 + uni(-0.06, 0.06);
  const double scale = uni(0.85, 1.1);
  const double rx = 0.28 * scale * uni(0.9, 1.1), ry = 0.38 * scale * uni(0.92, 1.08);
  const double skin = uni(90, 235);
  const detail::Rgb skin_c{skin + uni(10, 25), skin, skin - uni(10, 30)};

  if (u(rng) < 0.7) {
    const double hair = uni(10, 90);
    canvas.ellipse(cx, cy - 0.05 * scale, rx * 1.12, ry * 1.05, {hair, hair * 0.8, hair * 0.6}, 0.0, -1e9, cy);
  }
  canvas.ellipse(cx, cy, rx, ry, skin_c);

  const double eye_y = cy - ry * uni(0.15, 0.28), eye_dx = rx * uni(0.38, 0.5);
  const double eye_r = rx * uni(0.13, 0.2), eye_aspect = uni(0.5, 0.75);
  const double pupil = uni(0, 70);
  const double brow = std::max(0.0, skin - uni(80, 140));
  const double tilt = uni(-0.25, 0.25);
  for (int side : {-1, 1}) {
    const double ex = cx + side * eye_dx;
    canvas.ellipse(ex, eye_y, eye_r, eye_r * eye_aspect, {235, 235, 230});
    canvas.ellipse(ex, eye_y, eye_r * 0.45, eye_r * 0.45 * std::min(1.0, eye_aspect * 1.6), {pupil, pupil, pupil + 10});
    canvas.ellipse(ex, eye_y - eye_r * uni(1.1, 1.5), eye_r * 1.2, eye_r * 0.22, {brow, brow, brow}, side * tilt);
  }

  const double nose = skin - uni(35, 70);
  canvas.ellipse(cx, cy + ry * 0.08, rx * 0.06, ry * uni(0.14, 0.2), {nose, nose, nose});

  const double mouth_y = cy + ry * uni(0.45, 0.6), mouth_w = rx * uni(0.3, 0.55);
  canvas.ellipse(cx, mouth_y, mouth_w, mouth_w * uni(0.18, 0.4), {uni(120, 200), uni(30, 80), uni(40, 90)});
  return canvas.image();
}

/// Draws `n` faces into out_dir/rgb/ (at twice `image_side`) and ingests
/// them with build_dataset.
inline DatasetManifest synth_faces(std::int64_t n, int image_side, std::uint64_t seed, const fs::path& out_dir,
                                   double split_ratio = kDefaultSplitRatio) {
  if (n <= 0) throw ConfigError("synth_faces: n must be >= 1, got " + std::to_string(n));
  if (image_side < 3) throw ConfigError("synth_faces: image_side must be >= 3");
  const auto rgb_dir = out_dir / "rgb";
  fs::create_directories(rgb_dir);
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
    char name[32];
    std::snprintf(name, sizeof name, "face_%06zu.png", i);
    write_png(rgb_dir / name, render_face(2 * image_side, seed, i));
  });
  BuildOptions opt;
  opt.image_side = image_side;
  opt.split_ratio = split_ratio;
  opt.seed = seed;
  opt.min_source_images = 1;
  return build_dataset(rgb_dir, out_dir, opt);
}

}  // namespace stagegen
