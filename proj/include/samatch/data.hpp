#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "samatch/core.hpp"

namespace samatch::data {

namespace fs = std::filesystem;

using Plane16 = Plane<std::uint16_t>;

/// Grayscale PNG, 8- or 16-bit; 8-bit samples are returned unscaled.
Plane16 read_png(const fs::path& path, int* bit_depth = nullptr);
void write_png16(const fs::path& path, const Plane16& pixels);
void write_png8(const fs::path& path, const Plane<std::uint8_t>& pixels);
/// 8-bit RGB, used for overlays.
void write_png_rgb(const fs::path& path, const Plane<std::uint8_t>& r, const Plane<std::uint8_t>& g,
                   const Plane<std::uint8_t>& b);

/// Grayscale image with each class's contour drawn in its own colour.
void write_overlay(const fs::path& path, const PlaneD& image, const LabelMask& prediction);

/// Per-case metadata stored as `<case>/meta.json`.
struct CaseMeta {
  std::optional<PixelSpacing> spacing;
  std::string modality;
  int class_count = 1;
  std::map<std::string, std::vector<int>> frames;  ///< e.g. "ED" -> slice indices
};

CaseMeta read_case_meta(const fs::path& case_dir);
void write_case_meta(const fs::path& case_dir, const CaseMeta& meta);

enum class Split { train_labeled, train_unlabeled, val, test };
std::string to_string(Split split);
Split parse_split(const std::string& text);

struct ManifestEntry {
  std::string case_id;
  fs::path image_path;                ///< case directory holding img_###.png
  std::optional<fs::path> label_path;  ///< case directory holding lbl_###.png
  Split split = Split::train_unlabeled;
  std::vector<int> frame_filter;      ///< slice indices to keep; empty keeps all
};

struct SplitManifest {
  std::string dataset;
  std::string protocol;
  std::uint64_t seed = 0;
  int labeled_count = 0;
  int class_count = 1;
  std::vector<ManifestEntry> entries;

  std::vector<const ManifestEntry*> select(Split split) const;
};

nlohmann::json to_json(const SplitManifest& manifest);
SplitManifest manifest_from_json(const nlohmann::json& doc, const fs::path& base = {});
void save_manifest(const SplitManifest& manifest, const fs::path& path);
SplitManifest load_manifest(const fs::path& path);

/// Case-level split sizes. `total` of 0 accepts any case count (custom).
struct Protocol {
  std::string name;
  std::string dataset;
  int labeled = 0;
  int train = 0;  ///< labeled + unlabeled; 0 for custom means "all remaining"
  int val = 0;
  int test = 0;
  int total = 0;
  std::string labeled_frame;  ///< restricts labeled cases to one frame tag
};

/// acdc_1, acdc_3, busi_10, busi_30, mrliver_1, mrliver_3, mrliver_5.
Protocol named_protocol(const std::string& name);
Protocol custom_protocol(int labeled, int val, int test);

/// Seeded case-level split of every case directory under `root`. Labeled
/// cases are drawn from train cases with labels; val/test cases need labels.
SplitManifest build_manifest(const fs::path& root, const Protocol& protocol, std::uint64_t seed);

struct LoadOptions {
  int image_size = 0;  ///< square output side; 0 keeps the stored size
  bool read_labels = true;
};

struct Slice {
  ImageSample image;
  std::optional<LabelMask> label;
  int index = 0;
};

/// All slices of one case, ids "<case_id>/<3-digit index>". Images are resized
/// bilinearly then min-max normalized; labels are resized nearest. Labels are
/// never read for train_unlabeled entries.
std::vector<Slice> load_slices(const ManifestEntry& entry, int class_count, const LoadOptions& options = {});

struct SynthConfig {
  int n_images = 60;
  int image_size = 64;
  int min_shapes = 1;
  int max_shapes = 3;
  int class_count = 2;
  double background = 0.2;
  double contrast = 0.4;
  double class_contrast_step = 0.0;  ///< extra brightness per class id above 1
  double bias_amplitude = 0.0;      ///< amplitude of a random linear intensity ramp
  double noise_sigma = 0.05;
  int labeled = 2;
  int val = 5;
  int test = 15;
  std::uint64_t seed = 0;
};

struct SynthSample {
  std::string case_id;
  PlaneD image;  ///< exactly the stored values, q / 65535
  LabelMask label;
};

/// Draws the dataset in memory; deterministic given the seed.
std::vector<SynthSample> synth_samples(const SynthConfig& cfg);

/// Writes the dataset layout plus `<root>/manifest.json` and returns the manifest.
SplitManifest synth_generate(const SynthConfig& cfg, const fs::path& root);

/// NIfTI-1 (.nii or .nii.gz) 3D volume to one case directory. Slices along
/// the third axis are appended after any existing ones; `frame` tags them.
struct ConvertOptions {
  std::string case_id;
  std::string frame;
  std::string modality;
  int class_count = 1;
};
void convert_nifti(const fs::path& image, const std::optional<fs::path>& label, const fs::path& root,
                   const ConvertOptions& options);

}  // namespace samatch::data
