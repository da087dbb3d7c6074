#include "samatch/data.hpp"

#include <png.h>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <memory>
#include <set>
#include <sstream>
#include <tuple>

#include "samatch/augment.hpp"

namespace samatch::data {

using nlohmann::json;

// ---------------------------------------------------------------------------
// PNG

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void png_error_handler(png_structp png, png_const_charp message) {
  auto* text = static_cast<std::string*>(png_get_error_ptr(png));
  if (text) *text = message;
  png_longjmp(png, 1);
}

void png_warning_handler(png_structp, png_const_charp) {}

template <typename Sample>
void write_png_impl(const fs::path& path, int width, int height, int bit_depth, int color_type, int channels,
                    const std::function<Sample(int, int, int)>& sample) {
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw IoError("cannot write PNG: " + path.string());
  std::string error;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &error, png_error_handler, png_warning_handler);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("cannot allocate PNG writer for " + path.string());
  }
  const std::size_t bytes = sizeof(Sample);
  std::vector<png_byte> row(static_cast<std::size_t>(width) * channels * bytes);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG write failed for " + path.string() + ": " + error);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      for (int ch = 0; ch < channels; ++ch) {
        const auto v = static_cast<std::uint32_t>(sample(r, c, ch));
        const std::size_t at = (static_cast<std::size_t>(c) * channels + ch) * bytes;
        if (bytes == 2) {
          row[at] = static_cast<png_byte>(v >> 8);
          row[at + 1] = static_cast<png_byte>(v & 0xff);
        } else {
          row[at] = static_cast<png_byte>(v);
        }
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

Plane16 read_png(const fs::path& path, int* bit_depth_out) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw IoError("cannot open PNG: " + path.string());
  png_byte signature[8];
  if (std::fread(signature, 1, 8, file.get()) != 8 || png_sig_cmp(signature, 0, 8) != 0) {
    throw IoError("not a PNG file: " + path.string());
  }
  std::string error;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &error, png_error_handler, png_warning_handler);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("cannot allocate PNG reader for " + path.string());
  }
  Plane16 out;
  std::vector<png_byte> row;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("corrupt PNG " + path.string() + ": " + error);
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const auto width = static_cast<int>(png_get_image_width(png, info));
  const auto height = static_cast<int>(png_get_image_height(png, info));
  int depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (color != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("expected a single-channel grayscale PNG: " + path.string());
  }
  if (depth < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
    depth = 8;
  }
  png_read_update_info(png, info);
  row.resize(png_get_rowbytes(png, info));
  out.resize(height, width);
  for (int r = 0; r < height; ++r) {
    png_read_row(png, row.data(), nullptr);
    for (int c = 0; c < width; ++c) {
      const auto at = static_cast<std::size_t>(c);
      out(r, c) = depth == 16 ? static_cast<std::uint16_t>((row[2 * at] << 8) | row[2 * at + 1]) : row[at];
    }
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  if (bit_depth_out) *bit_depth_out = depth;
  return out;
}

void write_png16(const fs::path& path, const Plane16& pixels) {
  write_png_impl<std::uint16_t>(path, static_cast<int>(pixels.cols()), static_cast<int>(pixels.rows()), 16,
                                PNG_COLOR_TYPE_GRAY, 1, [&](int r, int c, int) { return pixels(r, c); });
}

void write_png8(const fs::path& path, const Plane<std::uint8_t>& pixels) {
  write_png_impl<std::uint8_t>(path, static_cast<int>(pixels.cols()), static_cast<int>(pixels.rows()), 8,
                               PNG_COLOR_TYPE_GRAY, 1, [&](int r, int c, int) { return pixels(r, c); });
}

void write_png_rgb(const fs::path& path, const Plane<std::uint8_t>& r, const Plane<std::uint8_t>& g,
                   const Plane<std::uint8_t>& b) {
  write_png_impl<std::uint8_t>(path, static_cast<int>(r.cols()), static_cast<int>(r.rows()), 8, PNG_COLOR_TYPE_RGB,
                               3, [&](int row, int col, int ch) {
                                 return ch == 0 ? r(row, col) : ch == 1 ? g(row, col) : b(row, col);
                               });
}

void write_overlay(const fs::path& path, const PlaneD& image, const LabelMask& prediction) {
  if (image.rows() != prediction.height() || image.cols() != prediction.width()) {
    throw ShapeError("overlay: image and prediction shapes differ");
  }
  static const std::uint8_t palette[6][3] = {{255, 64, 64}, {64, 255, 64}, {64, 128, 255},
                                             {255, 255, 64}, {255, 64, 255}, {64, 255, 255}};
  const Plane<std::uint8_t> gray = (image.cwiseMax(0.0).cwiseMin(1.0) * 255.0).round().cast<std::uint8_t>();
  Plane<std::uint8_t> r = gray;
  Plane<std::uint8_t> g = gray;
  Plane<std::uint8_t> b = gray;
  const auto& cls = prediction.classes;
  for (Eigen::Index y = 0; y < cls.rows(); ++y) {
    for (Eigen::Index x = 0; x < cls.cols(); ++x) {
      const int k = cls(y, x);
      if (k == 0) continue;
      const bool edge = y == 0 || x == 0 || y == cls.rows() - 1 || x == cls.cols() - 1 || cls(y - 1, x) != k ||
                        cls(y + 1, x) != k || cls(y, x - 1) != k || cls(y, x + 1) != k;
      if (!edge) continue;
      const auto* colour = palette[(k - 1) % 6];
      r(y, x) = colour[0];
      g(y, x) = colour[1];
      b(y, x) = colour[2];
    }
  }
  write_png_rgb(path, r, g, b);
}

// ---------------------------------------------------------------------------
// Case metadata and manifests

namespace {

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& path, const json& doc) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << doc.dump(2) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

std::string slice_name(const char* prefix, int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%03d.png", prefix, index);
  return buf;
}

/// Sorted indices of `<prefix>_###.png` files in a case directory.
std::vector<int> slice_indices(const fs::path& dir, const std::string& prefix) {
  std::vector<int> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& item : fs::directory_iterator(dir)) {
    const std::string name = item.path().filename().string();
    if (name.size() != prefix.size() + 8 || name.compare(0, prefix.size() + 1, prefix + "_") != 0) continue;
    if (item.path().extension() != ".png") continue;
    const std::string digits = name.substr(prefix.size() + 1, 3);
    if (!std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; })) continue;
    out.push_back(std::stoi(digits));
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

CaseMeta read_case_meta(const fs::path& case_dir) {
  CaseMeta meta;
  const fs::path path = case_dir / "meta.json";
  if (!fs::exists(path)) return meta;
  const json doc = read_json_file(path);
  try {
    if (doc.contains("spacing") && !doc.at("spacing").is_null()) {
      const auto s = doc.at("spacing").get<std::vector<double>>();
      if (s.size() != 2 || s[0] <= 0 || s[1] <= 0) throw IoError("spacing must be two positive numbers");
      meta.spacing = PixelSpacing{s[0], s[1]};
    }
    meta.modality = doc.value("modality", "");
    meta.class_count = doc.value("class_count", 1);
    if (doc.contains("frames")) meta.frames = doc.at("frames").get<std::map<std::string, std::vector<int>>>();
  } catch (const json::exception& e) {
    throw IoError("bad metadata in " + path.string() + ": " + e.what());
  } catch (const IoError& e) {
    throw IoError("bad metadata in " + path.string() + ": " + e.what());
  }
  return meta;
}

void write_case_meta(const fs::path& case_dir, const CaseMeta& meta) {
  json doc{{"modality", meta.modality}, {"class_count", meta.class_count}};
  doc["spacing"] = meta.spacing ? json{meta.spacing->row_mm, meta.spacing->col_mm} : json(nullptr);
  if (!meta.frames.empty()) doc["frames"] = meta.frames;
  write_json_file(case_dir / "meta.json", doc);
}

std::string to_string(Split split) {
  switch (split) {
    case Split::train_labeled: return "train_labeled";
    case Split::train_unlabeled: return "train_unlabeled";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "test";
}

Split parse_split(const std::string& text) {
  for (const Split s : {Split::train_labeled, Split::train_unlabeled, Split::val, Split::test}) {
    if (to_string(s) == text) return s;
  }
  throw ConfigError("unknown split '" + text + "'");
}

std::vector<const ManifestEntry*> SplitManifest::select(Split split) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries) {
    if (e.split == split) out.push_back(&e);
  }
  return out;
}

json to_json(const SplitManifest& manifest) {
  json entries = json::array();
  for (const auto& e : manifest.entries) {
    json item{{"case_id", e.case_id}, {"image_path", e.image_path.string()}, {"split", to_string(e.split)}};
    item["label_path"] = e.label_path ? json(e.label_path->string()) : json(nullptr);
    if (!e.frame_filter.empty()) item["frame_filter"] = e.frame_filter;
    entries.push_back(std::move(item));
  }
  return json{{"dataset", manifest.dataset},
              {"class_count", manifest.class_count},
              {"provenance", {{"protocol", manifest.protocol}, {"seed", manifest.seed}, {"labeled_count", manifest.labeled_count}}},
              {"entries", entries}};
}

SplitManifest manifest_from_json(const json& doc, const fs::path& base) {
  auto resolve = [&](const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() || base.empty() ? path : base / path;
  };
  try {
    SplitManifest m;
    m.dataset = doc.at("dataset").get<std::string>();
    m.class_count = doc.value("class_count", 1);
    const auto& prov = doc.at("provenance");
    m.protocol = prov.at("protocol").get<std::string>();
    m.seed = prov.at("seed").get<std::uint64_t>();
    m.labeled_count = prov.at("labeled_count").get<int>();
    for (const auto& item : doc.at("entries")) {
      ManifestEntry e;
      e.case_id = item.at("case_id").get<std::string>();
      e.image_path = resolve(item.at("image_path").get<std::string>());
      if (item.contains("label_path") && !item.at("label_path").is_null()) {
        e.label_path = resolve(item.at("label_path").get<std::string>());
      }
      e.split = parse_split(item.at("split").get<std::string>());
      if (item.contains("frame_filter")) e.frame_filter = item.at("frame_filter").get<std::vector<int>>();
      m.entries.push_back(std::move(e));
    }
    return m;
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed manifest: ") + e.what());
  }
}

void save_manifest(const SplitManifest& manifest, const fs::path& path) {
  // Paths are stored relative to the manifest so a dataset tree can move.
  const fs::path base = fs::absolute(path).parent_path();
  SplitManifest portable = manifest;
  for (auto& e : portable.entries) {
    e.image_path = fs::absolute(e.image_path).lexically_normal().lexically_proximate(base);
    if (e.label_path) *e.label_path = fs::absolute(*e.label_path).lexically_normal().lexically_proximate(base);
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_json_file(path, to_json(portable));
}

SplitManifest load_manifest(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("manifest not found: " + path.string());
  return manifest_from_json(read_json_file(path), path.parent_path());
}

Protocol named_protocol(const std::string& name) {
  static const std::vector<Protocol> table = {
      {"acdc_1", "acdc", 1, 70, 10, 20, 100, "ED"},   {"acdc_3", "acdc", 3, 70, 10, 20, 100, ""},
      {"busi_10", "busi", 10, 330, 47, 170, 547, ""}, {"busi_30", "busi", 30, 330, 47, 170, 547, ""},
      {"mrliver_1", "mrliver", 1, 30, 6, 12, 48, ""}, {"mrliver_3", "mrliver", 3, 30, 6, 12, 48, ""},
      {"mrliver_5", "mrliver", 5, 30, 6, 12, 48, ""},
  };
  for (const auto& p : table) {
    if (p.name == name) return p;
  }
  throw ConfigError("unknown protocol '" + name + "'");
}

Protocol custom_protocol(int labeled, int val, int test) {
  if (labeled < 1 || val < 0 || test < 0) throw ConfigError("custom protocol needs >= 1 labeled and non-negative val/test");
  return Protocol{"custom", "custom", labeled, 0, val, test, 0, ""};
}

SplitManifest build_manifest(const fs::path& root, const Protocol& protocol, std::uint64_t seed) {
  if (!fs::is_directory(root)) throw IoError("dataset root not found: " + root.string());
  struct CaseInfo {
    std::string id;
    bool has_labels = false;
  };
  std::vector<CaseInfo> cases;
  std::vector<std::string> problems;
  for (const auto& item : fs::directory_iterator(root)) {
    if (!item.is_directory()) continue;
    const auto images = slice_indices(item.path(), "img");
    if (images.empty()) continue;
    const auto labels = slice_indices(item.path(), "lbl");
    const std::string id = item.path().filename().string();
    if (!labels.empty() && labels != images) problems.push_back(id + ": label slices do not match image slices");
    cases.push_back({id, !labels.empty()});
  }
  std::sort(cases.begin(), cases.end(), [](const CaseInfo& a, const CaseInfo& b) { return a.id < b.id; });

  const int n = static_cast<int>(cases.size());
  if (protocol.total > 0 && n != protocol.total) {
    problems.push_back("found " + std::to_string(n) + " cases, protocol " + protocol.name + " expects " +
                       std::to_string(protocol.total));
  }
  const int train = protocol.train > 0 ? protocol.train : n - protocol.val - protocol.test;
  if (train < protocol.labeled) {
    problems.push_back("only " + std::to_string(std::max(train, 0)) + " training cases for " +
                       std::to_string(protocol.labeled) + " labeled");
  }
  if (!problems.empty()) {
    std::ostringstream msg;
    msg << "dataset " << root.string() << " does not fit protocol " << protocol.name << ":";
    for (const auto& p : problems) msg << "\n  - " << p;
    throw IoError(msg.str());
  }

  std::vector<std::size_t> order(cases.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  // Val and test need labels, so labeled cases are dealt to them first.
  std::vector<std::size_t> labeled_pool;
  std::vector<std::size_t> unlabeled_pool;
  for (const auto i : order) (cases[i].has_labels ? labeled_pool : unlabeled_pool).push_back(i);
  const auto needed = static_cast<std::size_t>(protocol.val + protocol.test + protocol.labeled);
  if (labeled_pool.size() < needed) {
    throw IoError("dataset " + root.string() + " has " + std::to_string(labeled_pool.size()) +
                  " labeled cases; protocol " + protocol.name + " needs " + std::to_string(needed));
  }

  SplitManifest m;
  m.dataset = protocol.dataset;
  m.protocol = protocol.name;
  m.seed = seed;
  m.labeled_count = protocol.labeled;
  m.class_count = 1;
  std::size_t cursor = 0;
  auto add = [&](std::size_t index, Split split) {
    const auto& info = cases[index];
    const fs::path dir = root / info.id;
    ManifestEntry e;
    e.case_id = info.id;
    e.image_path = dir;
    if (info.has_labels) e.label_path = dir;
    e.split = split;
    if (split == Split::train_labeled && !protocol.labeled_frame.empty()) {
      const CaseMeta meta = read_case_meta(dir);
      const auto it = meta.frames.find(protocol.labeled_frame);
      if (it == meta.frames.end()) {
        throw IoError("case " + info.id + " has no '" + protocol.labeled_frame + "' frame listed in meta.json");
      }
      e.frame_filter = it->second;
    }
    m.class_count = std::max(m.class_count, read_case_meta(dir).class_count);
    m.entries.push_back(std::move(e));
  };
  for (int i = 0; i < protocol.test; ++i) add(labeled_pool[cursor++], Split::test);
  for (int i = 0; i < protocol.val; ++i) add(labeled_pool[cursor++], Split::val);
  for (int i = 0; i < protocol.labeled; ++i) add(labeled_pool[cursor++], Split::train_labeled);
  std::vector<std::size_t> rest(labeled_pool.begin() + static_cast<std::ptrdiff_t>(cursor), labeled_pool.end());
  rest.insert(rest.end(), unlabeled_pool.begin(), unlabeled_pool.end());
  const auto unlabeled = static_cast<std::size_t>(train - protocol.labeled);
  if (rest.size() < unlabeled) throw IoError("not enough cases left for " + std::to_string(unlabeled) + " unlabeled");
  for (std::size_t i = 0; i < unlabeled; ++i) add(rest[i], Split::train_unlabeled);

  std::stable_sort(m.entries.begin(), m.entries.end(), [](const ManifestEntry& a, const ManifestEntry& b) {
    return std::tie(a.split, a.case_id) < std::tie(b.split, b.case_id);
  });
  return m;
}

// ---------------------------------------------------------------------------
// Loading

std::vector<Slice> load_slices(const ManifestEntry& entry, int class_count, const LoadOptions& options) {
  const auto indices = slice_indices(entry.image_path, "img");
  if (indices.empty()) throw IoError("no img_###.png slices in " + entry.image_path.string());
  const CaseMeta meta = read_case_meta(entry.image_path);
  const bool want_labels = options.read_labels && entry.split != Split::train_unlabeled && entry.label_path;
  const std::set<int> keep(entry.frame_filter.begin(), entry.frame_filter.end());

  std::vector<Slice> out;
  for (const int index : indices) {
    if (!keep.empty() && !keep.count(index)) continue;
    const fs::path image_path = entry.image_path / slice_name("img", index);
    int depth = 16;
    const Plane16 raw = read_png(image_path, &depth);
    const double scale = depth == 16 ? 65535.0 : 255.0;
    PlaneD pixels = raw.cast<double>() / scale;
    const int h = options.image_size > 0 ? options.image_size : static_cast<int>(raw.rows());
    const int w = options.image_size > 0 ? options.image_size : static_cast<int>(raw.cols());
    std::optional<PixelSpacing> spacing = meta.spacing;
    if (spacing && (h != raw.rows() || w != raw.cols())) {
      spacing->row_mm *= double(raw.rows()) / h;
      spacing->col_mm *= double(raw.cols()) / w;
    }
    pixels = minmax_normalize(augment::resize_bilinear(pixels, h, w));

    Slice slice;
    slice.index = index;
    char id[16];
    std::snprintf(id, sizeof id, "%03d", index);
    slice.image.id = entry.case_id + "/" + id;
    slice.image.pixels = std::move(pixels);
    slice.image.spacing = spacing;
    slice.image.source = entry.split == Split::train_unlabeled ? SampleSource::unlabeled : SampleSource::labeled;
    if (want_labels) {
      const fs::path label_path = *entry.label_path / slice_name("lbl", index);
      const Plane16 lbl = read_png(label_path);
      if (lbl.rows() != raw.rows() || lbl.cols() != raw.cols()) {
        throw ShapeError("label " + label_path.string() + " does not match its image's shape");
      }
      LabelMask mask{augment::resize_nearest(lbl.cast<int>(), h, w), class_count};
      if (mask.classes.maxCoeff() > class_count) {
        throw IoError("label " + label_path.string() + " has class " + std::to_string(mask.classes.maxCoeff()) +
                      " above class_count " + std::to_string(class_count));
      }
      slice.label = std::move(mask);
    }
    out.push_back(std::move(slice));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic shapes

std::vector<SynthSample> synth_samples(const SynthConfig& cfg) {
  if (cfg.n_images < 1 || cfg.image_size < kMinImageSide) throw ConfigError("synth needs n_images >= 1 and image_size >= 8");
  if (cfg.min_shapes < 1 || cfg.max_shapes < cfg.min_shapes) throw ConfigError("synth shape counts must satisfy 1 <= min <= max");
  if (cfg.class_count < 1) throw ConfigError("synth class_count must be >= 1");
  Rng rng(cfg.seed);
  const int s = cfg.image_size;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);

  std::vector<SynthSample> out;
  for (int n = 0; n < cfg.n_images; ++n) {
    PlaneD img = PlaneD::Constant(s, s, cfg.background);
    ClassPlane classes = ClassPlane::Zero(s, s);
    if (cfg.bias_amplitude > 0.0) {
      const double angle = 2.0 * M_PI * unit(rng);
      const double dy = std::sin(angle) * cfg.bias_amplitude;
      const double dx = std::cos(angle) * cfg.bias_amplitude;
      for (int r = 0; r < s; ++r) {
        for (int c = 0; c < s; ++c) img(r, c) += dy * (double(r) / (s - 1) - 0.5) + dx * (double(c) / (s - 1) - 0.5);
      }
    }
    const int shapes = std::uniform_int_distribution<int>(cfg.min_shapes, cfg.max_shapes)(rng);
    for (int k = 0; k < shapes; ++k) {
      const int cls = (k % cfg.class_count) + 1;
      const double cy = (0.2 + 0.6 * unit(rng)) * s;
      const double cx = (0.2 + 0.6 * unit(rng)) * s;
      const double ry = (0.08 + 0.12 * unit(rng)) * s;
      const double rx = (0.08 + 0.12 * unit(rng)) * s;
      const bool ellipse = (cls % 2) == 1;
      const double level = cfg.background + cfg.contrast + cfg.class_contrast_step * (cls - 1);
      for (int r = 0; r < s; ++r) {
        for (int c = 0; c < s; ++c) {
          const double u = (r + 0.5 - cy) / ry;
          const double v = (c + 0.5 - cx) / rx;
          const bool inside = ellipse ? u * u + v * v <= 1.0 : std::abs(u) <= 1.0 && std::abs(v) <= 1.0;
          if (!inside) continue;
          img(r, c) += level - cfg.background;
          classes(r, c) = cls;
        }
      }
    }
    if (cfg.noise_sigma > 0.0) {
      for (Eigen::Index i = 0; i < img.size(); ++i) img.data()[i] += cfg.noise_sigma * noise(rng);
    }
    img = minmax_normalize(img.cwiseMax(0.0).cwiseMin(1.0));
    const PlaneD stored = (img * 65535.0).round() / 65535.0;

    char id[32];
    std::snprintf(id, sizeof id, "case_%03d", n);
    out.push_back({id, stored, LabelMask{classes, cfg.class_count}});
  }
  return out;
}

SplitManifest synth_generate(const SynthConfig& cfg, const fs::path& root) {
  const auto samples = synth_samples(cfg);
  fs::create_directories(root);
  for (const auto& sample : samples) {
    const fs::path dir = root / sample.case_id;
    fs::create_directories(dir);
    const Plane16 q = (sample.image * 65535.0).round().cast<std::uint16_t>();
    write_png16(dir / slice_name("img", 0), q);
    write_png8(dir / slice_name("lbl", 0), sample.label.classes.cast<std::uint8_t>());
    CaseMeta meta;
    meta.modality = "synthetic";
    meta.class_count = cfg.class_count;
    write_case_meta(dir, meta);
  }
  SplitManifest manifest = build_manifest(root, custom_protocol(cfg.labeled, cfg.val, cfg.test), cfg.seed);
  manifest.dataset = "synthetic";
  manifest.class_count = cfg.class_count;
  save_manifest(manifest, root / "manifest.json");
  return manifest;
}

// ---------------------------------------------------------------------------
// NIfTI-1

namespace {

struct Volume {
  int nx = 0;
  int ny = 0;
  int nz = 0;
  double dx = 1.0;
  double dy = 1.0;
  std::vector<double> voxels;  ///< x fastest
};

template <typename T>
T read_as(const unsigned char* p, bool swap) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, p, sizeof(T));
  if (swap) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

Volume read_nifti(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("volume not found: " + path.string());
  gzFile gz = gzopen(path.c_str(), "rb");
  if (!gz) throw IoError("cannot open volume: " + path.string());
  std::vector<unsigned char> bytes;
  unsigned char chunk[1 << 16];
  int got = 0;
  while ((got = gzread(gz, chunk, sizeof chunk)) > 0) bytes.insert(bytes.end(), chunk, chunk + got);
  const bool failed = got < 0;
  gzclose(gz);
  if (failed || bytes.size() < 348) throw IoError("truncated or unreadable NIfTI file: " + path.string());

  bool swap = false;
  if (read_as<std::int32_t>(bytes.data(), false) != 348) {
    if (read_as<std::int32_t>(bytes.data(), true) != 348) throw IoError("not a NIfTI-1 file: " + path.string());
    swap = true;
  }
  const unsigned char* h = bytes.data();
  const int ndim = read_as<std::int16_t>(h + 40, swap);
  const int nt = ndim >= 4 ? read_as<std::int16_t>(h + 48, swap) : 1;
  if (ndim < 2 || ndim > 4 || nt > 1) {
    throw IoError("only 2D/3D NIfTI volumes are supported (" + path.string() + " has " + std::to_string(ndim) + " dims)");
  }
  Volume vol;
  vol.nx = read_as<std::int16_t>(h + 42, swap);
  vol.ny = read_as<std::int16_t>(h + 44, swap);
  vol.nz = ndim >= 3 ? read_as<std::int16_t>(h + 46, swap) : 1;
  const int datatype = read_as<std::int16_t>(h + 70, swap);
  vol.dx = read_as<float>(h + 80, swap);
  vol.dy = read_as<float>(h + 84, swap);
  const auto offset = static_cast<std::size_t>(read_as<float>(h + 108, swap));
  double slope = read_as<float>(h + 112, swap);
  const double inter = read_as<float>(h + 116, swap);
  if (slope == 0.0 || !std::isfinite(slope)) slope = 1.0;
  if (vol.nx < 1 || vol.ny < 1 || vol.nz < 1) throw IoError("bad NIfTI dimensions in " + path.string());

  const std::size_t count = static_cast<std::size_t>(vol.nx) * vol.ny * vol.nz;
  std::size_t width = 0;
  switch (datatype) {
    case 2: case 256: width = 1; break;
    case 4: case 512: width = 2; break;
    case 8: case 16: case 768: width = 4; break;
    case 64: width = 8; break;
    default: throw IoError("unsupported NIfTI datatype " + std::to_string(datatype) + " in " + path.string());
  }
  if (bytes.size() < offset + count * width) throw IoError("NIfTI data shorter than its header states: " + path.string());
  vol.voxels.resize(count);
  const unsigned char* p = bytes.data() + offset;
  for (std::size_t i = 0; i < count; ++i, p += width) {
    double v = 0.0;
    switch (datatype) {
      case 2: v = *p; break;
      case 256: v = static_cast<std::int8_t>(*p); break;
      case 4: v = read_as<std::int16_t>(p, swap); break;
      case 512: v = read_as<std::uint16_t>(p, swap); break;
      case 8: v = read_as<std::int32_t>(p, swap); break;
      case 768: v = read_as<std::uint32_t>(p, swap); break;
      case 16: v = read_as<float>(p, swap); break;
      case 64: v = read_as<double>(p, swap); break;
    }
    vol.voxels[i] = v * slope + inter;
  }
  return vol;
}

PlaneD slice_of(const Volume& vol, int z) {
  PlaneD out(vol.ny, vol.nx);
  const std::size_t base = static_cast<std::size_t>(z) * vol.nx * vol.ny;
  for (int y = 0; y < vol.ny; ++y) {
    for (int x = 0; x < vol.nx; ++x) out(y, x) = vol.voxels[base + static_cast<std::size_t>(y) * vol.nx + x];
  }
  return out;
}

}  // namespace

void convert_nifti(const fs::path& image, const std::optional<fs::path>& label, const fs::path& root,
                   const ConvertOptions& options) {
  if (options.case_id.empty()) throw ConfigError("convert needs a case id");
  const Volume vol = read_nifti(image);
  std::optional<Volume> lbl;
  if (label) {
    lbl = read_nifti(*label);
    if (lbl->nx != vol.nx || lbl->ny != vol.ny || lbl->nz != vol.nz) {
      throw ShapeError("label volume " + label->string() + " does not match image " + image.string());
    }
  }
  const fs::path dir = root / options.case_id;
  fs::create_directories(dir);
  CaseMeta meta = read_case_meta(dir);
  meta.spacing = PixelSpacing{vol.dy > 0 ? vol.dy : 1.0, vol.dx > 0 ? vol.dx : 1.0};
  if (!options.modality.empty()) meta.modality = options.modality;
  meta.class_count = std::max(meta.class_count, options.class_count);
  const auto existing = slice_indices(dir, "img");
  int next = existing.empty() ? 0 : existing.back() + 1;
  for (int z = 0; z < vol.nz; ++z, ++next) {
    if (next > 999) throw IoError("case " + options.case_id + " exceeds 1000 slices");
    const PlaneD norm = minmax_normalize(slice_of(vol, z));
    write_png16(dir / slice_name("img", next), (norm * 65535.0).round().cast<std::uint16_t>());
    if (lbl) {
      const PlaneD classes = slice_of(*lbl, z).round();
      if (classes.minCoeff() < 0 || classes.maxCoeff() > options.class_count) {
        throw IoError("label volume " + label->string() + " has values outside [0," +
                      std::to_string(options.class_count) + "]");
      }
      write_png8(dir / slice_name("lbl", next), classes.cast<std::uint8_t>());
    }
    if (!options.frame.empty()) meta.frames[options.frame].push_back(next);
  }
  write_case_meta(dir, meta);
}

}  // namespace samatch::data
