#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

#include <zlib.h>

#include "fixtures.hpp"
#include "samatch/data.hpp"

using namespace samatch;
using namespace samatch::data;
namespace fs = std::filesystem;

namespace {

void make_case(const fs::path& root, const std::string& id, bool labels, int slices = 1, int class_count = 1) {
  const fs::path dir = root / id;
  fs::create_directories(dir);
  for (int s = 0; s < slices; ++s) {
    char name[32];
    Plane16 img(8, 8);
    for (Eigen::Index i = 0; i < img.size(); ++i) img.data()[i] = static_cast<std::uint16_t>(i * 1000 + s);
    std::snprintf(name, sizeof name, "img_%03d.png", s);
    write_png16(dir / name, img);
    if (labels) {
      Plane<std::uint8_t> lbl = Plane<std::uint8_t>::Zero(8, 8);
      lbl.block(2, 2, 3, 3).setConstant(static_cast<std::uint8_t>(class_count));
      std::snprintf(name, sizeof name, "lbl_%03d.png", s);
      write_png8(dir / name, lbl);
    }
  }
  CaseMeta meta;
  meta.class_count = class_count;
  if (slices >= 2) meta.frames = {{"ED", {0}}, {"ES", {1}}};
  write_case_meta(dir, meta);
}

std::map<Split, int> split_counts(const SplitManifest& m) {
  std::map<Split, int> out;
  for (const auto& e : m.entries) ++out[e.split];
  return out;
}

/// Minimal single-file NIfTI-1 writer for int16 volumes.
void write_nifti(const fs::path& path, int nx, int ny, int nz, const std::vector<std::int16_t>& data, float dx,
                 float dy, bool gzip) {
  std::vector<unsigned char> buf(352, 0);
  auto put = [&](std::size_t at, auto v) { std::memcpy(buf.data() + at, &v, sizeof v); };
  put(0, std::int32_t{348});
  put(40, std::int16_t{3});
  put(42, static_cast<std::int16_t>(nx));
  put(44, static_cast<std::int16_t>(ny));
  put(46, static_cast<std::int16_t>(nz));
  put(70, std::int16_t{4});
  put(72, std::int16_t{16});
  put(80, dx);
  put(84, dy);
  put(108, 352.0f);
  put(112, 1.0f);
  std::memcpy(buf.data() + 344, "n+1", 4);
  const auto* raw = reinterpret_cast<const unsigned char*>(data.data());
  buf.insert(buf.end(), raw, raw + data.size() * sizeof(std::int16_t));
  if (gzip) {
    gzFile gz = gzopen(path.c_str(), "wb");
    gzwrite(gz, buf.data(), static_cast<unsigned>(buf.size()));
    gzclose(gz);
  } else {
    std::ofstream(path, std::ios::binary).write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
  }
}

}  // namespace

TEST(Png, SixteenAndEightBitRoundTrip) {
  fixtures::TempDir tmp("png");
  Plane16 a(5, 7);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = static_cast<std::uint16_t>(i * 1871);
  write_png16(tmp.path / "a.png", a);
  int depth = 0;
  EXPECT_TRUE((read_png(tmp.path / "a.png", &depth) == a).all());
  EXPECT_EQ(depth, 16);
  Plane<std::uint8_t> b(3, 4);
  for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = static_cast<std::uint8_t>(i * 20);
  write_png8(tmp.path / "b.png", b);
  EXPECT_TRUE((read_png(tmp.path / "b.png", &depth) == b.cast<std::uint16_t>()).all());
  EXPECT_EQ(depth, 8);
}

TEST(Png, RejectsColourAndMissingFiles) {
  fixtures::TempDir tmp("png_bad");
  const Plane<std::uint8_t> z = Plane<std::uint8_t>::Zero(4, 4);
  write_png_rgb(tmp.path / "rgb.png", z, z, z);
  EXPECT_THROW(read_png(tmp.path / "rgb.png"), IoError);
  EXPECT_THROW(read_png(tmp.path / "none.png"), IoError);
  std::ofstream(tmp.path / "junk.png") << "junk";
  EXPECT_THROW(read_png(tmp.path / "junk.png"), IoError);
}

TEST(Png, OverlayIsWritten) {
  fixtures::TempDir tmp("overlay");
  LabelMask pred{ClassPlane::Zero(16, 16), 2};
  pred.classes.block(4, 4, 5, 5) = 1;
  write_overlay(tmp.path / "o.png", PlaneD::Constant(16, 16, 0.5), pred);
  EXPECT_GT(fs::file_size(tmp.path / "o.png"), 0u);
}

TEST(Manifest, NamedProtocolSplitSizes) {
  fixtures::TempDir tmp("acdc");
  for (int i = 0; i < 100; ++i) {
    char id[16];
    std::snprintf(id, sizeof id, "patient%03d", i);
    make_case(tmp.path, id, true);
  }
  const auto m = build_manifest(tmp.path, named_protocol("acdc_3"), 1);
  auto counts = split_counts(m);
  EXPECT_EQ(counts[Split::train_labeled], 3);
  EXPECT_EQ(counts[Split::train_unlabeled], 67);
  EXPECT_EQ(counts[Split::val], 10);
  EXPECT_EQ(counts[Split::test], 20);
  EXPECT_EQ(m.protocol, "acdc_3");
  EXPECT_EQ(m.labeled_count, 3);

  // Seeded: same seed same split, different seed different split.
  const auto again = build_manifest(tmp.path, named_protocol("acdc_3"), 1);
  const auto other = build_manifest(tmp.path, named_protocol("acdc_3"), 2);
  EXPECT_EQ(to_json(m), to_json(again));
  EXPECT_NE(to_json(m), to_json(other));

  // Cases are not shared between splits.
  std::set<std::string> ids;
  for (const auto& e : m.entries) EXPECT_TRUE(ids.insert(e.case_id).second);
}

TEST(Manifest, CountMismatchListsDiscrepancies) {
  fixtures::TempDir tmp("short");
  for (int i = 0; i < 10; ++i) make_case(tmp.path, "c" + std::to_string(i), true);
  try {
    build_manifest(tmp.path, named_protocol("mrliver_1"), 0);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("expects 48"), std::string::npos);
  }
  EXPECT_THROW(named_protocol("acdc_2"), ConfigError);
  EXPECT_THROW(build_manifest(tmp.path / "missing", custom_protocol(1, 1, 1), 0), IoError);
}

TEST(Manifest, LabelFrameFilter) {
  fixtures::TempDir tmp("frames");
  for (int i = 0; i < 100; ++i) make_case(tmp.path, "p" + std::to_string(100 + i), true, 2);
  const auto m = build_manifest(tmp.path, named_protocol("acdc_1"), 3);
  const auto labeled = m.select(Split::train_labeled);
  ASSERT_EQ(labeled.size(), 1u);
  EXPECT_EQ(labeled[0]->frame_filter, std::vector<int>{0});
  const auto slices = load_slices(*labeled[0], 1);
  ASSERT_EQ(slices.size(), 1u);
  EXPECT_EQ(slices[0].index, 0);
  EXPECT_EQ(load_slices(*m.select(Split::test)[0], 1).size(), 2u);
}

TEST(Manifest, UnlabeledCasesOnlyFillTrainUnlabeled) {
  fixtures::TempDir tmp("mixed");
  for (int i = 0; i < 6; ++i) make_case(tmp.path, "l" + std::to_string(i), true);
  for (int i = 0; i < 4; ++i) make_case(tmp.path, "u" + std::to_string(i), false);
  const auto m = build_manifest(tmp.path, custom_protocol(2, 2, 2), 5);
  for (const auto& e : m.entries) {
    if (e.case_id[0] == 'u') EXPECT_EQ(e.split, Split::train_unlabeled);
  }
  EXPECT_EQ(split_counts(m)[Split::train_unlabeled], 4);
  EXPECT_THROW(build_manifest(tmp.path, custom_protocol(3, 2, 2), 5), IoError);
}

TEST(Manifest, SaveLoadResolvesRelativePaths) {
  fixtures::TempDir tmp("save");
  for (int i = 0; i < 5; ++i) make_case(tmp.path / "data", "c" + std::to_string(i), true);
  const auto m = build_manifest(tmp.path / "data", custom_protocol(1, 1, 1), 0);
  save_manifest(m, tmp.path / "data" / "manifest.json");
  std::ifstream in(tmp.path / "data" / "manifest.json");
  const auto doc = nlohmann::json::parse(in);
  EXPECT_EQ(doc.at("entries").at(0).at("image_path").get<std::string>().find('/'), std::string::npos);
  EXPECT_TRUE(doc.at("provenance").contains("seed"));
  const auto back = load_manifest(tmp.path / "data" / "manifest.json");
  ASSERT_EQ(back.entries.size(), m.entries.size());
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    EXPECT_TRUE(fs::equivalent(back.entries[i].image_path, m.entries[i].image_path));
    EXPECT_EQ(back.entries[i].split, m.entries[i].split);
  }
}

TEST(Slices, NormalizedResizedAndLabelsHidden) {
  fixtures::TempDir tmp("slices");
  make_case(tmp.path, "c", true, 1, 2);
  CaseMeta meta = read_case_meta(tmp.path / "c");
  meta.spacing = PixelSpacing{1.5, 0.5};
  write_case_meta(tmp.path / "c", meta);
  ManifestEntry e{"c", tmp.path / "c", tmp.path / "c", Split::train_labeled, {}};
  const auto s = load_slices(e, 2, LoadOptions{16, true});
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0].image.id, "c/000");
  EXPECT_EQ(s[0].image.height(), 16);
  EXPECT_DOUBLE_EQ(s[0].image.pixels.minCoeff(), 0.0);
  EXPECT_DOUBLE_EQ(s[0].image.pixels.maxCoeff(), 1.0);
  ASSERT_TRUE(s[0].label.has_value());
  EXPECT_EQ(s[0].label->classes.maxCoeff(), 2);
  EXPECT_DOUBLE_EQ(s[0].image.spacing->row_mm, 0.75);
  EXPECT_DOUBLE_EQ(s[0].image.spacing->col_mm, 0.25);

  e.split = Split::train_unlabeled;
  const auto u = load_slices(e, 2);
  EXPECT_FALSE(u[0].label.has_value());
  EXPECT_EQ(u[0].image.source, SampleSource::unlabeled);

  e.split = Split::val;
  EXPECT_THROW(load_slices(e, 1), IoError);  // class 2 above class_count 1
}

TEST(Synth, DeterministicAndWellFormed) {
  SynthConfig cfg;
  cfg.n_images = 10;
  cfg.image_size = 32;
  cfg.seed = 4;
  const auto a = synth_samples(cfg);
  const auto b = synth_samples(cfg);
  ASSERT_EQ(a.size(), 10u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE((a[i].image == b[i].image).all());
    EXPECT_TRUE((a[i].label.classes == b[i].label.classes).all());
    EXPECT_GE(a[i].label.classes.minCoeff(), 0);
    EXPECT_LE(a[i].label.classes.maxCoeff(), 2);
    EXPECT_GT((a[i].label.classes > 0).count(), 0);
    EXPECT_TRUE(((a[i].image * 65535.0).round() / 65535.0 == a[i].image).all());
  }
  cfg.seed = 5;
  EXPECT_FALSE((synth_samples(cfg)[0].image == a[0].image).all());
}

TEST(Synth, GeneratedFilesReloadBitExact) {
  fixtures::TempDir tmp("synth");
  SynthConfig cfg;
  cfg.n_images = 12;
  cfg.image_size = 32;
  cfg.labeled = 2;
  cfg.val = 2;
  cfg.test = 3;
  cfg.seed = 9;
  const auto samples = synth_samples(cfg);
  synth_generate(cfg, tmp.path);
  const auto m = load_manifest(tmp.path / "manifest.json");
  EXPECT_EQ(m.class_count, 2);
  EXPECT_EQ(m.dataset, "synthetic");
  auto counts = split_counts(m);
  EXPECT_EQ(counts[Split::train_labeled], 2);
  EXPECT_EQ(counts[Split::val], 2);
  EXPECT_EQ(counts[Split::test], 3);
  EXPECT_EQ(counts[Split::train_unlabeled], 5);
  std::map<std::string, const SynthSample*> by_id;
  for (const auto& s : samples) by_id[s.case_id] = &s;
  for (const auto& e : m.entries) {
    ManifestEntry labeled = e;
    labeled.split = Split::val;
    const auto slices = load_slices(labeled, m.class_count);
    const auto& s = *by_id.at(e.case_id);
    EXPECT_TRUE((slices[0].image.pixels == s.image).all()) << e.case_id;
    EXPECT_TRUE((slices[0].label->classes == s.label.classes).all()) << e.case_id;
  }
}

TEST(Nifti, ConvertsSlicesAppendsAndTagsFrames) {
  fixtures::TempDir tmp("nifti");
  const int nx = 10;
  const int ny = 8;
  const int nz = 2;
  std::vector<std::int16_t> img(nx * ny * nz);
  std::vector<std::int16_t> lbl(nx * ny * nz, 0);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<std::int16_t>(i * 3 - 50);
  lbl[nx * 2 + 3] = 1;  // z=0, y=2, x=3
  write_nifti(tmp.path / "img.nii.gz", nx, ny, nz, img, 1.25f, 2.5f, true);
  write_nifti(tmp.path / "lbl.nii", nx, ny, nz, lbl, 1.25f, 2.5f, false);
  ConvertOptions opt{"patient001", "ED", "MRI", 1};
  convert_nifti(tmp.path / "img.nii.gz", tmp.path / "lbl.nii", tmp.path / "root", opt);
  opt.frame = "ES";
  convert_nifti(tmp.path / "img.nii.gz", tmp.path / "lbl.nii", tmp.path / "root", opt);

  const fs::path dir = tmp.path / "root" / "patient001";
  const auto meta = read_case_meta(dir);
  EXPECT_EQ(meta.frames.at("ED"), (std::vector<int>{0, 1}));
  EXPECT_EQ(meta.frames.at("ES"), (std::vector<int>{2, 3}));
  ASSERT_TRUE(meta.spacing.has_value());
  EXPECT_DOUBLE_EQ(meta.spacing->row_mm, 2.5);
  EXPECT_DOUBLE_EQ(meta.spacing->col_mm, 1.25);
  const Plane16 slice0 = read_png(dir / "img_000.png");
  EXPECT_EQ(slice0.rows(), ny);
  EXPECT_EQ(slice0.cols(), nx);
  EXPECT_EQ(slice0(0, 0), 0);
  EXPECT_EQ(slice0(ny - 1, nx - 1), 65535);
  const Plane16 l0 = read_png(dir / "lbl_000.png");
  EXPECT_EQ(l0(2, 3), 1);
  EXPECT_EQ(l0.sum(), 1);

  opt.class_count = 0;
  std::vector<std::int16_t> bad(nx * ny * nz, 5);
  write_nifti(tmp.path / "bad.nii", nx, ny, nz, bad, 1, 1, false);
  opt.class_count = 1;
  EXPECT_THROW(convert_nifti(tmp.path / "img.nii.gz", tmp.path / "bad.nii", tmp.path / "root", opt), IoError);
  std::ofstream(tmp.path / "junk.nii") << std::string(400, 'x');
  EXPECT_THROW(convert_nifti(tmp.path / "junk.nii", std::nullopt, tmp.path / "root", opt), IoError);
}

TEST(Splits, NameRoundTrip) {
  for (const auto s : {Split::train_labeled, Split::train_unlabeled, Split::val, Split::test}) {
    EXPECT_EQ(parse_split(to_string(s)), s);
  }
  EXPECT_THROW(parse_split("holdout"), ConfigError);
}
