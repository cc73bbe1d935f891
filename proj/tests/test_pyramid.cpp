#include <doctest.h>

#include <bit>
#include <fstream>
#include <set>
#include <sstream>

#include "magscope/error.hpp"
#include "magscope/pyramid.hpp"
#include "test_util.hpp"

using namespace magscope;
using namespace magscope::pyramid;

namespace {

SlideManifest slide(const std::string& id, double power, int w = 4096, int h = 4096) {
  return SlideManifest{id, power, w, h, {}};
}

}  // namespace

TEST_SUITE("pyramid") {
  TEST_CASE("synthetic slides are deterministic and seed sensitive") {
    const auto a = synth_slide("s0", 1088, 1088, 7, 40.0, 64);
    const auto b = synth_slide("s0", 1088, 1088, 7, 40.0, 64);
    const auto c = synth_slide("s0", 1088, 1088, 8, 40.0, 64);
    CHECK(a.image == b.image);
    CHECK(a.image.data != c.image.data);
    CHECK(encode_png(a.image) == encode_png(b.image));
    CHECK(a.manifest.width == 1088);
    CHECK(a.manifest.base_objective_power == 40.0);
  }

  TEST_CASE("synthesis threads do not change pixels") {
    const auto a = synth_slide("s1", 640, 544, 3, 20.0, 32, 1);
    const auto b = synth_slide("s1", 640, 544, 3, 20.0, 32, 3);
    CHECK(a.image == b.image);
  }

  TEST_CASE("a 20x base is the 2x2 area average of the 40x texture") {
    const auto hi = synth_slide("s2", 1088, 1088, 11, 40.0, 32);
    const auto lo = synth_slide("s2", 544, 544, 11, 20.0, 32);
    CHECK(downsample(hi.image, 2) == lo.image);
  }

  TEST_CASE("synthetic slide size limits") {
    CHECK_THROWS_AS(synth_slide("s0", 544, 544, 7, 40.0, 224), InvalidArgument);
    CHECK_THROWS_AS(synth_slide("s0", 544, 544, 7, 10.0, 32), InvalidArgument);
    CHECK_THROWS_AS(synth_slide("bad id", 544, 544, 7, 40.0, 32), InvalidArgument);
    CHECK_NOTHROW(synth_slide("s0", 544, 544, 7, 40.0, 32));
    CHECK_THROWS_AS(synth_slide("s0", 512, 544, 7, 40.0, 32), InvalidArgument);
  }

  TEST_CASE("manifest ingestion") {
    std::istringstream three(
        R"({"slide_id":"a","base_objective_power":40,"width":4096,"height":4096,"image_path":"a.png"})"
        "\n"
        R"({"slide_id":"b","base_objective_power":20,"width":4096,"height":4096,"image_path":"b.png"})"
        "\n\n"
        R"({"slide_id":"c","base_objective_power":10,"width":4096,"height":4096,"image_path":"c.png"})"
        "\n");
    const auto r = parse_manifest(three, "/data");
    REQUIRE(r.accepted.size() == 2);
    CHECK(r.discarded == 1);
    CHECK(r.accepted[0].slide_id == "a");
    CHECK(r.accepted[1].base_objective_power == 20.0);
    CHECK(r.accepted[0].image_path == std::filesystem::path("/data/a.png"));

    std::istringstream empty("");
    const auto e = parse_manifest(empty);
    CHECK(e.accepted.empty());
    CHECK(e.discarded == 0);

    std::istringstream dup(
        R"({"slide_id":"a","base_objective_power":40,"width":4096,"height":4096,"image_path":"a.png"})"
        "\n"
        R"({"slide_id":"a","base_objective_power":20,"width":4096,"height":4096,"image_path":"b.png"})"
        "\n");
    CHECK_THROWS_AS(parse_manifest(dup), DuplicateSlideId);

    std::istringstream broken("{\"slide_id\":\"a\"}\nnot json\n");
    try {
      parse_manifest(broken);
      FAIL("expected a parse error");
    } catch (const ParseError& err) {
      CHECK(err.line() == 1);
    }
  }

  TEST_CASE("manifest lines round trip") {
    testing::TempDir dir("man");
    std::vector<SlideManifest> slides = {slide("x", 40), slide("y", 20, 2048, 3000)};
    slides[0].image_path = dir / "x.png";
    slides[1].image_path = dir / "y.png";
    write_manifest(dir / "m.jsonl", slides);
    const auto r = ingest_manifest(dir / "m.jsonl");
    CHECK(r.accepted == slides);
    CHECK_THROWS_AS(ingest_manifest(dir / "missing.jsonl"), FileNotFound);
  }

  TEST_CASE("sample points respect the 2.5x margin") {
    SamplerConfig cfg;
    const auto s = slide("s0", 40);
    const auto pts = sample_points(s, cfg);
    CHECK(pts.size() == 5);
    CHECK(pts == sample_points(s, cfg));
    CHECK(half_max_window(40, 224) == 1792);
    CHECK(half_max_window(20, 224) == 896);
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      cfg.seed = seed;
      for (const auto& p : sample_points(s, cfg)) {
        CHECK((p.x >= 1792 && p.x < 2304 && p.y >= 1792 && p.y < 2304));
      }
    }
    cfg.seed = 1;
    CHECK(sample_points(s, cfg) != sample_points(slide("s1", 40), cfg));
    CHECK_THROWS_AS(sample_points(slide("s0", 40, 3584, 3584), cfg), InvalidArgument);
    CHECK(sample_points(slide("s0", 40, 3585, 3585), cfg)[0] == Point{1792, 1792});
  }

  TEST_CASE("patch extraction") {
    Image flat(4096, 4096, 3, 128);
    for (MagLevel level : kAllLevels) {
      const Image p = extract_patch(flat, 40, {2048, 2048}, level, 224);
      CHECK(p.width == 224);
      CHECK(std::all_of(p.data.begin(), p.data.end(), [](auto v) { return v == 128; }));
    }

    Image checker(2, 2, 1);
    checker.data = {0, 255, 255, 0};
    const Image one = extract_patch(checker, 20, {1, 1}, MagLevel::X10, 1);
    CHECK(one.data == std::vector<std::uint8_t>{128});

    CHECK_THROWS_AS(extract_patch(flat, 20, {2048, 2048}, MagLevel::X40, 224), UnavailableLevel);
    CHECK_THROWS_AS(extract_patch(flat, 40, {100, 2048}, MagLevel::X2_5, 224), OutOfBounds);
  }

  TEST_CASE("patches match a naive box average and exact crops") {
    const Image base = testing::random_image(300, 260, 3, 9);
    for (int factor : {1, 2, 4, 8}) {
      const MagLevel level = *level_from_ordinal(4 - static_cast<std::size_t>(std::countr_zero(unsigned(factor))));
      const Point c{150, 130};
      const Image p = extract_patch(base, 40, c, level, 24);
      const Window w = patch_window(c, factor, 24);
      Image crop(w.side, w.side, 3);
      for (int y = 0; y < w.side; ++y) {
        for (int x = 0; x < w.side; ++x) {
          for (int ch = 0; ch < 3; ++ch) crop.at(x, y, ch) = base.at(w.x0 + x, w.y0 + y, ch);
        }
      }
      CHECK(p.data == oracle::box_downsample(crop.data, w.side, w.side, 3, factor));
      const auto means = block_means(base, w, factor);
      for (std::size_t i = 0; i < means.size(); ++i) {
        CHECK(std::abs(means[i] - p.data[i]) <= 0.5);
      }
    }
  }

  TEST_CASE("patch ids") {
    CHECK(make_patch_id("slide-003", 2, MagLevel::X2_5) == "slide-003-p2-2.5x");
    CHECK(slide_of_patch_id("slide-003-p2-2.5x") == "slide-003");
    CHECK(slide_of_patch_id("a-p10-40x") == "a");
    CHECK_THROWS_AS(slide_of_patch_id("slide-003-2.5x"), InvalidArgument);
    CHECK_THROWS_AS(slide_of_patch_id("slide-p2-3x"), InvalidArgument);
  }

  TEST_CASE("dataset sizes and index round trip") {
    testing::TempDir dir("ds");
    std::vector<SlideManifest> slides;
    for (auto [id, power] : {std::pair{"a", 40.0}, std::pair{"b", 40.0}}) {
      auto s = synth_slide(id, 544, 544, 1, power, 32);
      s.manifest.image_path = dir / (std::string(id) + ".png");
      write_png(s.manifest.image_path, s.image, PngSpeed::Fast);
      slides.push_back(s.manifest);
    }
    SamplerConfig cfg{5, 32, 42};
    const auto records = build_dataset(slides, cfg, dir / "out");
    CHECK(records.size() == 50);
    const auto back = read_index(dir / "out" / "index.csv");
    REQUIRE(back.size() == records.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
      CHECK(back[i].patch_id == records[i].patch_id);
      CHECK(back[i].level == records[i].level);
      CHECK(read_png(back[i].image_path).width == 32);
    }
    std::ifstream head(dir / "out" / "index.csv");
    std::string first;
    std::getline(head, first);
    CHECK(first == kIndexHeader);

    auto s20 = synth_slide("c", 544, 544, 1, 20.0, 32);
    s20.manifest.image_path = dir / "c.png";
    write_png(s20.manifest.image_path, s20.image, PngSpeed::Fast);
    const std::vector<SlideManifest> one = {s20.manifest};
    const auto r20 = build_dataset(one, cfg, dir / "out20");
    CHECK(r20.size() == 20);
    CHECK(std::none_of(r20.begin(), r20.end(), [](const auto& r) { return r.level == MagLevel::X40; }));

    CHECK_THROWS_AS(build_dataset({}, cfg, dir / "none"), InvalidArgument);
  }

  TEST_CASE("failed dataset builds leave nothing behind") {
    testing::TempDir dir("ds");
    auto s = synth_slide("a", 544, 544, 1, 40.0, 32);
    s.manifest.image_path = dir / "a.png";
    write_png(s.manifest.image_path, s.image, PngSpeed::Fast);
    auto missing = s.manifest;
    missing.slide_id = "b";
    missing.image_path = dir / "b.png";
    const std::vector<SlideManifest> slides = {s.manifest, missing};
    CHECK_THROWS(build_dataset(slides, SamplerConfig{5, 32, 42}, dir / "out"));
    const bool clean = !std::filesystem::exists(dir / "out" / "index.csv") &&
                       (!std::filesystem::exists(dir / "out" / "patches") ||
                        std::filesystem::is_empty(dir / "out" / "patches"));
    CHECK(clean);
  }
}
