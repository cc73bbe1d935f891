#include "magscope/pyramid.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <mutex>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "magscope/error.hpp"
#include "magscope/parallel.hpp"
#include "magscope/rng.hpp"

namespace magscope::pyramid {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Texture model. Everything is defined in 40x pixel units ("physical").

constexpr int kOctaves = 8;
constexpr std::array<int, kOctaves> kWavelengths = {4, 8, 16, 32, 64, 128, 256, 512};

// Smooth optical-density fluctuations per stain. The uneven spectrum is
// deliberate: a self-similar (power-law) spectrum would make every
// magnification statistically identical.
constexpr std::array<double, kOctaves> kHemaAmp = {0.10, 0.06, 0.16, 0.04, 0.05, 0.10, 0.04, 0.22};
constexpr std::array<double, kOctaves> kEosinAmp = {0.06, 0.03, 0.05, 0.10, 0.04, 0.18, 0.05, 0.30};

// Tissue differs in how large its structures are; each slide scales all
// wavelengths by exp(U(-j, j)).
constexpr double kScaleJitter = 0.6;

// Hematoxylin / eosin optical density per RGB channel.
constexpr std::array<double, 3> kHemaOd = {0.650, 0.704, 0.286};
constexpr std::array<double, 3> kEosinOd = {0.072, 0.990, 0.105};

// Octave-space layout of the noise fields.
enum Field : int { kHema = 0, kEosin = 1, kNuclei = 2, kGland = 3, kFields = 4 };

// Lattice of uniform values in [-0.5, 0.5) covering `cols` x `rows` cells.
class Lattice {
 public:
  Lattice(std::uint64_t key, double wavelength, int phys_width, int phys_height)
      : wavelength_(wavelength),
        cols_(static_cast<int>(phys_width / wavelength) + 2),
        rows_(static_cast<int>(phys_height / wavelength) + 2),
        values_(static_cast<std::size_t>(cols_) * rows_) {
    for (int j = 0; j < rows_; ++j) {
      for (int i = 0; i < cols_; ++i) {
        const std::uint64_t h =
            splitmix64(key ^ splitmix64((static_cast<std::uint64_t>(j) << 32) | unsigned(i)));
        values_[static_cast<std::size_t>(j) * cols_ + i] =
            static_cast<float>(static_cast<double>(h >> 11) * 0x1.0p-53 - 0.5);
      }
    }
    // Column cell indices and smoothstep weights are shared by every row.
    col_index_.resize(phys_width);
    col_weight_.resize(phys_width);
    for (int u = 0; u < phys_width; ++u) {
      const double t = (u + 0.5) / wavelength_;
      const int i = static_cast<int>(t);
      const double f = t - i;
      col_index_[u] = i;
      col_weight_[u] = static_cast<float>(f * f * (3.0 - 2.0 * f));
    }
  }

  /// Adds amplitude * noise(u, v) for all u in the row to `acc`. `blend`
  /// is scratch space.
  void accumulate_row(int v, double amplitude, std::span<double> acc,
                      std::vector<double>& blend) const {
    const double t = (v + 0.5) / wavelength_;
    const int j = static_cast<int>(t);
    const double f = t - j;
    const double wy = f * f * (3.0 - 2.0 * f);
    const float* r0 = values_.data() + static_cast<std::size_t>(j) * cols_;
    const float* r1 = r0 + cols_;
    blend.resize(static_cast<std::size_t>(cols_));
    for (int i = 0; i < cols_; ++i) blend[i] = amplitude * (r0[i] + wy * (r1[i] - r0[i]));
    for (std::size_t u = 0; u < acc.size(); ++u) {
      const int i = col_index_[u];
      acc[u] += blend[i] + col_weight_[u] * (blend[i + 1] - blend[i]);
    }
  }

 private:
  double wavelength_;
  int cols_;
  int rows_;
  std::vector<float> values_;
  std::vector<int> col_index_;
  std::vector<float> col_weight_;
};

struct SlideStyle {
  double scale = 1.0;  // multiplies every wavelength
  std::array<double, kOctaves> hema_amp{};
  std::array<double, kOctaves> eosin_amp{};
  double hema_base = 0;
  double eosin_base = 0;
  double nuclei_threshold = 0;
  double nuclei_density = 0;
  double gland_threshold = 0;
};

SlideStyle draw_style(std::uint64_t texture_seed) {
  Rng rng(derive_seed(texture_seed, 0x5717e));
  SlideStyle s;
  s.scale = std::exp(rng.uniform(-kScaleJitter, kScaleJitter));
  for (int o = 0; o < kOctaves; ++o) {
    s.hema_amp[o] = kHemaAmp[o] * rng.uniform(0.75, 1.25);
    s.eosin_amp[o] = kEosinAmp[o] * rng.uniform(0.75, 1.25);
  }
  s.hema_base = rng.uniform(0.20, 0.35);
  s.eosin_base = rng.uniform(0.25, 0.45);
  s.nuclei_threshold = rng.uniform(0.14, 0.22);
  s.nuclei_density = rng.uniform(0.8, 1.2);
  s.gland_threshold = rng.uniform(0.22, 0.30);
  return s;
}

std::uint8_t round_channel(double v) {
  v = std::clamp(v, 0.0, 255.0);
  return static_cast<std::uint8_t>(std::floor(v + 0.5));
}

// Renders one 40x-scale RGB row at physical row v.
class TextureRenderer {
 public:
  TextureRenderer(std::uint64_t texture_seed, int phys_width, int phys_height)
      : style_(draw_style(texture_seed)), width_(phys_width) {
    lattices_.reserve(kFields * kOctaves);
    for (int field = 0; field < kFields; ++field) {
      for (int o = 0; o < kOctaves; ++o) {
        const std::uint64_t key = derive_seed(texture_seed, 1 + field * kOctaves + o);
        lattices_.emplace_back(key, kWavelengths[o] * style_.scale, phys_width, phys_height);
      }
    }
  }

  void render_row(int v, std::vector<double>& scratch, std::vector<double>& blend,
                  std::span<std::uint8_t> rgb) const {
    const auto w = static_cast<std::size_t>(width_);
    scratch.assign(4 * w, 0.0);
    std::span<double> hema(scratch.data(), w);
    std::span<double> eosin(scratch.data() + w, w);
    std::span<double> nuclei(scratch.data() + 2 * w, w);
    std::span<double> gland(scratch.data() + 3 * w, w);
    for (int o = 0; o < kOctaves; ++o) {
      lattice(kHema, o).accumulate_row(v, style_.hema_amp[o], hema, blend);
      lattice(kEosin, o).accumulate_row(v, style_.eosin_amp[o], eosin, blend);
    }
    // Nuclei: blobs a few pixels across at 40x. Glands: lumen-like holes
    // on the order of a hundred pixels.
    lattice(kNuclei, 1).accumulate_row(v, 1.0, nuclei, blend);
    lattice(kNuclei, 0).accumulate_row(v, 0.45, nuclei, blend);
    lattice(kGland, 5).accumulate_row(v, 1.0, gland, blend);
    lattice(kGland, 3).accumulate_row(v, 0.3, gland, blend);

    for (std::size_t u = 0; u < w; ++u) {
      const double nucleus = smooth_step(nuclei[u], style_.nuclei_threshold, 0.04);
      const double lumen = smooth_step(gland[u], style_.gland_threshold, 0.02);
      double h = style_.hema_base + hema[u] + 1.1 * style_.nuclei_density * nucleus;
      double e = style_.eosin_base + eosin[u];
      h *= 1.0 - 0.85 * lumen;
      e *= 1.0 - 0.85 * lumen;
      h = std::max(h, 0.0);
      e = std::max(e, 0.0);
      for (int c = 0; c < 3; ++c) {
        rgb[3 * u + c] = round_channel(255.0 * std::exp(-(kHemaOd[c] * h + kEosinOd[c] * e)));
      }
    }
  }

 private:
  static double smooth_step(double x, double edge, double width) {
    const double t = std::clamp((x - edge) / width + 0.5, 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
  }

  const Lattice& lattice(int field, int octave) const {
    return lattices_[static_cast<std::size_t>(field) * kOctaves + octave];
  }

  SlideStyle style_;
  int width_;
  std::vector<Lattice> lattices_;
};

bool valid_identifier(std::string_view id) {
  if (id.empty() || id == "." || id == "..") return false;
  return std::all_of(id.begin(), id.end(), [](unsigned char c) {
    return std::isalnum(c) || c == '-' || c == '_' || c == '.';
  });
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string::npos ? std::string::npos
                                                                 : comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

template <class T>
bool parse_number(const std::string& s, T& out) {
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

}  // namespace

bool is_supported_base_power(double base_power) noexcept {
  return base_power == 20.0 || base_power == 40.0;
}

std::vector<MagLevel> available_levels(double base_power) {
  std::vector<MagLevel> out;
  for (MagLevel level : kAllLevels) {
    if (downsample_factor(base_power, level)) out.push_back(level);
  }
  return out;
}

SynthSlide synth_slide(const std::string& slide_id, int width, int height, std::uint64_t seed,
                       double base_power, int patch_size, unsigned threads) {
  if (!valid_identifier(slide_id)) throw InvalidArgument("invalid slide id '" + slide_id + "'");
  if (!is_supported_base_power(base_power)) {
    throw InvalidArgument("synthetic slides need base power 20 or 40");
  }
  if (patch_size <= 0) throw InvalidArgument("patch size must be positive");
  const long min_side = static_cast<long>(kMaxFactor) * patch_size + 1;
  if (width < min_side || height < min_side) {
    throw InvalidArgument("slide " + std::to_string(width) + "x" + std::to_string(height) +
                          " is too small: each side must exceed 16 x patch size " +
                          std::to_string(patch_size) + " so a centered 2.5x window fits");
  }

  // A k x k block of physical pixels is averaged into each base pixel.
  const int k = static_cast<int>(40.0 / base_power);
  const std::uint64_t texture_seed = derive_seed(seed, hash_string(slide_id));
  const TextureRenderer renderer(texture_seed, width * k, height * k);

  SynthSlide out;
  out.manifest = SlideManifest{slide_id, base_power, width, height, {}};
  out.image = Image(width, height, 3);
  const int n = k * k;
  parallel_for(static_cast<std::size_t>(height), threads, [&](std::size_t y) {
    std::vector<double> scratch, blend;
    std::vector<std::uint8_t> phys(static_cast<std::size_t>(width) * k * 3);
    std::vector<int> sums(static_cast<std::size_t>(width) * 3, 0);
    for (int dy = 0; dy < k; ++dy) {
      renderer.render_row(static_cast<int>(y) * k + dy, scratch, blend, phys);
      for (int x = 0; x < width; ++x) {
        for (int dx = 0; dx < k; ++dx) {
          for (int c = 0; c < 3; ++c) sums[3 * x + c] += phys[3 * (x * k + dx) + c];
        }
      }
    }
    std::uint8_t* row = out.image.row(static_cast<int>(y));
    for (std::size_t i = 0; i < sums.size(); ++i) {
      row[i] = static_cast<std::uint8_t>((2 * sums[i] + n) / (2 * n));
    }
  });
  return out;
}

// ---------------------------------------------------------------------------

IngestResult parse_manifest(std::istream& in, const fs::path& base_dir) {
  IngestResult result;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;

    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(line_no, std::string("invalid JSON: ") + e.what());
    }
    if (!obj.is_object()) throw ParseError(line_no, "expected a JSON object");

    auto require = [&](const char* key) -> const json& {
      auto it = obj.find(key);
      if (it == obj.end()) throw ParseError(line_no, std::string("missing field '") + key + "'");
      return *it;
    };
    const json& id = require("slide_id");
    const json& power_field = require("base_objective_power");
    const json& w = require("width");
    const json& h = require("height");
    const json& path = require("image_path");
    if (!id.is_string() || !valid_identifier(id.get<std::string>())) {
      throw ParseError(line_no, "slide_id must be a non-empty string of [A-Za-z0-9._-]");
    }
    if (!power_field.is_number()) throw ParseError(line_no, "base_objective_power must be a number");
    if (!w.is_number_integer() || !h.is_number_integer() || w.get<long>() <= 0 ||
        h.get<long>() <= 0) {
      throw ParseError(line_no, "width and height must be positive integers");
    }
    if (!path.is_string() || path.get<std::string>().empty()) {
      throw ParseError(line_no, "image_path must be a non-empty string");
    }

    SlideManifest slide;
    slide.slide_id = id.get<std::string>();
    slide.base_objective_power = power_field.get<double>();
    slide.width = w.get<int>();
    slide.height = h.get<int>();
    slide.image_path = path.get<std::string>();
    if (slide.image_path.is_relative() && !base_dir.empty()) {
      slide.image_path = base_dir / slide.image_path;
    }
    if (!seen.insert(slide.slide_id).second) {
      throw DuplicateSlideId("line " + std::to_string(line_no) + ": duplicate slide_id '" +
                             slide.slide_id + "'");
    }
    if (is_supported_base_power(slide.base_objective_power)) {
      result.accepted.push_back(std::move(slide));
    } else {
      ++result.discarded;
    }
  }
  return result;
}

IngestResult ingest_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FileNotFound(path.string());
  return parse_manifest(in, path.parent_path());
}

std::string manifest_line(const SlideManifest& slide) {
  nlohmann::ordered_json obj;
  obj["slide_id"] = slide.slide_id;
  if (slide.base_objective_power == std::floor(slide.base_objective_power)) {
    obj["base_objective_power"] = static_cast<long>(slide.base_objective_power);
  } else {
    obj["base_objective_power"] = slide.base_objective_power;
  }
  obj["width"] = slide.width;
  obj["height"] = slide.height;
  obj["image_path"] = slide.image_path.generic_string();
  return obj.dump();
}

void write_manifest(const fs::path& path, std::span<const SlideManifest> slides) {
  std::string text;
  for (const auto& slide : slides) text += manifest_line(slide) + "\n";
  write_text_atomic(path, text);
}

// ---------------------------------------------------------------------------

int half_max_window(double base_power, int patch_size) {
  const auto factor = downsample_factor(base_power, MagLevel::X2_5);
  if (!factor) throw InvalidArgument("unsupported base power " + std::to_string(base_power));
  return patch_size * *factor / 2;
}

std::vector<Point> sample_points(const SlideManifest& slide, const SamplerConfig& cfg) {
  if (cfg.points_per_slide < 1) throw InvalidArgument("points_per_slide must be >= 1");
  if (cfg.patch_size < 1) throw InvalidArgument("patch_size must be >= 1");
  const int half = half_max_window(slide.base_objective_power, cfg.patch_size);
  const long span_x = static_cast<long>(slide.width) - 2L * half;
  const long span_y = static_cast<long>(slide.height) - 2L * half;
  if (span_x <= 0 || span_y <= 0) {
    throw InvalidArgument("slide " + slide.slide_id + " (" + std::to_string(slide.width) + "x" +
                          std::to_string(slide.height) +
                          ") leaves no room for a centered 2.5x window of half-size " +
                          std::to_string(half));
  }
  Rng rng(derive_seed(cfg.seed, hash_string(slide.slide_id)));
  std::vector<Point> points;
  points.reserve(static_cast<std::size_t>(cfg.points_per_slide));
  for (int i = 0; i < cfg.points_per_slide; ++i) {
    const int x = half + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(span_x)));
    const int y = half + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(span_y)));
    points.push_back({x, y});
  }
  return points;
}

Window patch_window(Point center, int factor, int size) noexcept {
  const int side = size * factor;
  return {center.x - side / 2, center.y - side / 2, side};
}

std::vector<double> block_means(const Image& base, Window window, int factor) {
  if (factor < 1 || window.side % factor != 0) {
    throw InvalidArgument("window side must be a multiple of the factor");
  }
  if (window.x0 < 0 || window.y0 < 0 || window.x0 + window.side > base.width ||
      window.y0 + window.side > base.height) {
    throw OutOfBounds("window outside image");
  }
  const int size = window.side / factor;
  const int ch = base.channels;
  std::vector<double> out(static_cast<std::size_t>(size) * size * ch, 0.0);
  const double inv = 1.0 / (static_cast<double>(factor) * factor);
  for (int py = 0; py < size; ++py) {
    for (int px = 0; px < size; ++px) {
      for (int c = 0; c < ch; ++c) {
        long sum = 0;
        for (int dy = 0; dy < factor; ++dy) {
          for (int dx = 0; dx < factor; ++dx) {
            sum += base.at(window.x0 + px * factor + dx, window.y0 + py * factor + dy, c);
          }
        }
        out[(static_cast<std::size_t>(py) * size + px) * ch + c] = sum * inv;
      }
    }
  }
  return out;
}

namespace {

Image box_filter(const Image& src, int x0, int y0, int out_w, int out_h, int factor) {
  Image out(out_w, out_h, src.channels);
  const int ch = src.channels;
  const long n = static_cast<long>(factor) * factor;
  std::vector<long> sums(static_cast<std::size_t>(out_w) * ch);
  for (int py = 0; py < out_h; ++py) {
    std::fill(sums.begin(), sums.end(), 0L);
    for (int dy = 0; dy < factor; ++dy) {
      const std::uint8_t* row = src.row(y0 + py * factor + dy) + static_cast<std::size_t>(x0) * ch;
      for (int px = 0; px < out_w; ++px) {
        const std::uint8_t* block = row + static_cast<std::size_t>(px) * factor * ch;
        for (int dx = 0; dx < factor; ++dx) {
          for (int c = 0; c < ch; ++c) sums[px * ch + c] += block[dx * ch + c];
        }
      }
    }
    std::uint8_t* dst = out.row(py);
    for (std::size_t i = 0; i < sums.size(); ++i) {
      // floor(mean + 1/2): half-away-from-zero for non-negative means.
      dst[i] = static_cast<std::uint8_t>((2 * sums[i] + n) / (2 * n));
    }
  }
  return out;
}

}  // namespace

Image downsample(const Image& image, int factor) {
  if (factor < 1 || image.width % factor != 0 || image.height % factor != 0) {
    throw InvalidArgument("image sides must be multiples of the downsample factor");
  }
  return box_filter(image, 0, 0, image.width / factor, image.height / factor, factor);
}

Image extract_patch(const Image& base, double base_power, Point center, MagLevel level,
                    int size) {
  if (size < 1) throw InvalidArgument("patch size must be positive");
  const auto factor = downsample_factor(base_power, level);
  if (!factor) {
    throw UnavailableLevel(std::string(to_string(level)) + " is not available from a base power of " +
                           std::to_string(base_power));
  }
  const Window w = patch_window(center, *factor, size);
  if (w.x0 < 0 || w.y0 < 0 || w.x0 + w.side > base.width || w.y0 + w.side > base.height) {
    throw OutOfBounds("window of side " + std::to_string(w.side) + " at (" +
                      std::to_string(center.x) + ", " + std::to_string(center.y) +
                      ") exceeds the " + std::to_string(base.width) + "x" +
                      std::to_string(base.height) + " base image");
  }
  return box_filter(base, w.x0, w.y0, size, size, *factor);
}

std::string make_patch_id(const std::string& slide_id, std::size_t point, MagLevel level) {
  return slide_id + "-p" + std::to_string(point) + "-" + std::string(to_string(level));
}

std::string slide_of_patch_id(std::string_view patch_id) {
  const auto bad = [&] { return InvalidArgument("not a patch id: '" + std::string(patch_id) + "'"); };
  const auto level_dash = patch_id.rfind('-');
  if (level_dash == std::string_view::npos || !level_from_string(patch_id.substr(level_dash + 1))) {
    throw bad();
  }
  const auto point_dash = patch_id.rfind('-', level_dash == 0 ? 0 : level_dash - 1);
  if (point_dash == std::string_view::npos || point_dash == 0) throw bad();
  const auto point = patch_id.substr(point_dash + 1, level_dash - point_dash - 1);
  if (point.size() < 2 || point[0] != 'p' ||
      !std::all_of(point.begin() + 1, point.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    throw bad();
  }
  return std::string(patch_id.substr(0, point_dash));
}

// ---------------------------------------------------------------------------

std::vector<PatchRecord> build_dataset(std::span<const SlideManifest> slides,
                                       const SamplerConfig& cfg, const fs::path& out_dir,
                                       unsigned threads) {
  if (slides.empty()) throw InvalidArgument("no accepted slides to sample");
  for (const auto& slide : slides) {
    if (!is_supported_base_power(slide.base_objective_power)) {
      throw InvalidArgument("slide " + slide.slide_id + " has unsupported base power");
    }
  }

  const fs::path patch_dir = out_dir / "patches";
  const bool created_dir = !fs::exists(patch_dir);
  fs::create_directories(patch_dir);

  // Record layout is known up front, so each slide fills its own slots.
  std::vector<std::size_t> offsets(slides.size() + 1, 0);
  for (std::size_t s = 0; s < slides.size(); ++s) {
    offsets[s + 1] = offsets[s] + static_cast<std::size_t>(cfg.points_per_slide) *
                                      available_levels(slides[s].base_objective_power).size();
  }
  std::vector<PatchRecord> records(offsets.back());

  std::mutex created_mu;
  std::vector<fs::path> created;

  auto cleanup = [&] {
    std::error_code ec;
    if (created_dir) {
      fs::remove_all(patch_dir, ec);
    } else {
      for (const auto& p : created) fs::remove(p, ec);
    }
    fs::remove(out_dir / "index.csv", ec);
  };

  try {
    parallel_for(slides.size(), threads, [&](std::size_t s) {
      const SlideManifest& slide = slides[s];
      const Image base = read_png(slide.image_path);
      if (base.width != slide.width || base.height != slide.height || base.channels != 3) {
        throw IoError("slide " + slide.slide_id + ": image " + slide.image_path.string() +
                      " is " + std::to_string(base.width) + "x" + std::to_string(base.height) +
                      "x" + std::to_string(base.channels) + ", manifest says " +
                      std::to_string(slide.width) + "x" + std::to_string(slide.height) + "x3");
      }
      const auto points = sample_points(slide, cfg);
      const auto levels = available_levels(slide.base_objective_power);
      std::size_t slot = offsets[s];
      for (std::size_t p = 0; p < points.size(); ++p) {
        for (MagLevel level : levels) {
          PatchRecord rec;
          rec.patch_id = make_patch_id(slide.slide_id, p, level);
          rec.slide_id = slide.slide_id;
          rec.level = level;
          rec.center_x = points[p].x;
          rec.center_y = points[p].y;
          rec.size = cfg.patch_size;
          rec.image_path = fs::path("patches") / (rec.patch_id + ".png");
          const Image patch =
              extract_patch(base, slide.base_objective_power, points[p], level, cfg.patch_size);
          const fs::path target = out_dir / rec.image_path;
          {
            std::lock_guard lock(created_mu);
            created.push_back(target);
          }
          write_png(target, patch);
          records[slot++] = std::move(rec);
        }
      }
    });
    write_index(out_dir / "index.csv", records);
  } catch (...) {
    cleanup();
    throw;
  }
  return records;
}

void write_index(std::ostream& out, std::span<const PatchRecord> records) {
  out << kIndexHeader << '\n';
  for (const auto& r : records) {
    const std::string path = r.image_path.generic_string();
    for (const std::string* field : {&r.patch_id, &r.slide_id, &path}) {
      if (field->find_first_of(",\"\n\r") != std::string::npos) {
        throw InvalidArgument("index field contains a CSV delimiter: " + *field);
      }
    }
    out << r.patch_id << ',' << r.slide_id << ',' << to_string(r.level) << ',' << r.center_x << ','
        << r.center_y << ',' << r.size << ',' << path << '\n';
  }
}

void write_index(const fs::path& path, std::span<const PatchRecord> records) {
  std::ostringstream out;
  write_index(out, records);
  const std::string text = out.str();
  write_text_atomic(path, text);
}

std::vector<PatchRecord> parse_index(std::istream& in, const fs::path& base_dir) {
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line)) throw ParseError(1, "missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kIndexHeader) throw ParseError(1, "unexpected header '" + line + "'");

  std::vector<PatchRecord> records;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 7) {
      throw ParseError(line_no, "expected 7 fields, got " + std::to_string(f.size()));
    }
    PatchRecord r;
    r.patch_id = f[0];
    r.slide_id = f[1];
    const auto level = level_from_string(f[2]);
    if (!level) throw ParseError(line_no, "unknown level '" + f[2] + "'");
    r.level = *level;
    if (!parse_number(f[3], r.center_x) || !parse_number(f[4], r.center_y) ||
        !parse_number(f[5], r.size) || r.size <= 0) {
      throw ParseError(line_no, "malformed numeric field");
    }
    if (r.patch_id.empty() || f[6].empty()) throw ParseError(line_no, "empty patch_id or path");
    r.image_path = f[6];
    if (r.image_path.is_relative() && !base_dir.empty()) r.image_path = base_dir / r.image_path;
    records.push_back(std::move(r));
  }
  return records;
}

std::vector<PatchRecord> read_index(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FileNotFound(path.string());
  return parse_index(in, path.parent_path());
}

}  // namespace magscope::pyramid
