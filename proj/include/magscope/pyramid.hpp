#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "magscope/image.hpp"
#include "magscope/mag_level.hpp"

namespace magscope::pyramid {

/// One whole-slide base image and its objective power.
struct SlideManifest {
  std::string slide_id;
  double base_objective_power = 40.0;
  int width = 0;
  int height = 0;
  std::filesystem::path image_path;

  friend bool operator==(const SlideManifest&, const SlideManifest&) = default;
};

/// One snapshot at one magnification. Centers are in base-image pixels.
struct PatchRecord {
  std::string patch_id;
  std::string slide_id;
  MagLevel level = MagLevel::X40;
  int center_x = 0;
  int center_y = 0;
  int size = 0;
  std::filesystem::path image_path;

  friend bool operator==(const PatchRecord&, const PatchRecord&) = default;
};

struct SamplerConfig {
  int points_per_slide = 5;
  int patch_size = 224;
  std::uint64_t seed = 42;
};

struct Point {
  int x = 0;
  int y = 0;
  friend bool operator==(const Point&, const Point&) = default;
};

/// Square region of the base image, in base pixels.
struct Window {
  int x0 = 0;
  int y0 = 0;
  int side = 0;
};

inline constexpr int kDefaultPatchSize = 224;
/// Largest downsample factor used by any slide (2.5x from a 40x base).
inline constexpr int kMaxFactor = 16;

bool is_supported_base_power(double base_power) noexcept;

/// Levels a slide of the given base power can produce, canonical order.
std::vector<MagLevel> available_levels(double base_power);

// ---------------------------------------------------------------------------
// Synthetic slides

struct SynthSlide {
  SlideManifest manifest;
  Image image;
};

/// Procedural H&E-like texture with structure at wavelengths from 4 to 512
/// pixels (at 40x). A 20x-base slide is rendered as the exact 2x2 area
/// average of the 40x texture it would have been scanned from, so both
/// bases agree on what each magnification looks like. Deterministic in
/// (slide_id, width, height, seed, base_power); `threads` only affects speed.
/// The manifest's image_path is left empty for the caller to fill in.
///
/// Throws InvalidArgument unless both sides exceed kMaxFactor * patch_size
/// or the base power is not 20 or 40.
SynthSlide synth_slide(const std::string& slide_id, int width, int height, std::uint64_t seed,
                       double base_power = 40.0, int patch_size = kDefaultPatchSize,
                       unsigned threads = 1);

// ---------------------------------------------------------------------------
// Manifest

struct IngestResult {
  std::vector<SlideManifest> accepted;
  std::size_t discarded = 0;
};

/// Parses JSONL manifest text. Slides whose base power is neither 20 nor 40
/// are counted in `discarded`. Relative image paths are resolved against
/// `base_dir`. Blank lines are skipped.
/// Throws ParseError (with line number) or DuplicateSlideId.
IngestResult parse_manifest(std::istream& in, const std::filesystem::path& base_dir = {});

IngestResult ingest_manifest(const std::filesystem::path& path);

std::string manifest_line(const SlideManifest& slide);

void write_manifest(const std::filesystem::path& path, std::span<const SlideManifest> slides);

// ---------------------------------------------------------------------------
// Sampling and extraction

/// Half the side of the 2.5x window: patch_size * (base_power / 2.5) / 2.
int half_max_window(double base_power, int patch_size);

/// Draws cfg.points_per_slide centers uniformly from
/// [h, width - h) x [h, height - h), h = half_max_window. The stream is
/// keyed by (cfg.seed, slide_id).
std::vector<Point> sample_points(const SlideManifest& slide, const SamplerConfig& cfg);

/// Base-image window covered by a patch of `size` pixels at `factor`.
Window patch_window(Point center, int factor, int size) noexcept;

/// Exact per-block means (not rounded) of the factor x factor blocks of a
/// window, size x size x channels values, interleaved.
std::vector<double> block_means(const Image& base, Window window, int factor);

/// Area-average downsampling by an integer factor with half-away-from-zero
/// rounding. Image sides must be multiples of factor.
Image downsample(const Image& image, int factor);

/// Crops the window for `level` centered at `center` and box-filters it to
/// size x size. factor 1 is an exact crop.
/// Throws UnavailableLevel or OutOfBounds.
Image extract_patch(const Image& base, double base_power, Point center, MagLevel level, int size);

std::string make_patch_id(const std::string& slide_id, std::size_t point, MagLevel level);

/// Inverse of make_patch_id for the slide part. Throws InvalidArgument if
/// `patch_id` does not have the `<slide>-p<k>-<level>` shape.
std::string slide_of_patch_id(std::string_view patch_id);

// ---------------------------------------------------------------------------
// Dataset

/// Samples every slide, writes `out_dir/patches/<patch_id>.png` and
/// `out_dir/index.csv`, returning records in index order (slide order, then
/// point, then canonical level). Image paths in records are relative to
/// out_dir. On failure every file created here is removed before rethrowing.
std::vector<PatchRecord> build_dataset(std::span<const SlideManifest> slides,
                                       const SamplerConfig& cfg,
                                       const std::filesystem::path& out_dir,
                                       unsigned threads = 1);

inline constexpr const char* kIndexHeader =
    "patch_id,slide_id,level,center_x,center_y,size,image_path";

void write_index(std::ostream& out, std::span<const PatchRecord> records);
void write_index(const std::filesystem::path& path, std::span<const PatchRecord> records);

/// Reads a patch index. Relative image paths are resolved against the
/// index's directory.
std::vector<PatchRecord> read_index(const std::filesystem::path& path);
std::vector<PatchRecord> parse_index(std::istream& in, const std::filesystem::path& base_dir = {});

}  // namespace magscope::pyramid
