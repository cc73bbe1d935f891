#include <doctest.h>

#include <numeric>

#include "magscope/error.hpp"
#include "magscope/lbp.hpp"
#include "test_util.hpp"

using namespace magscope;
using namespace magscope::lbp;

TEST_SUITE("lbp") {
  TEST_CASE("grayscale conversion") {
    Image img(2, 1, 3);
    img.data = {77, 77, 77, 255, 0, 0};
    const GrayImage g = to_grayscale(img);
    CHECK(g.at(0, 0) == doctest::Approx(77.0).epsilon(1e-12));
    CHECK(g.at(1, 0) == doctest::Approx(76.245).epsilon(1e-12));
    const GrayImage z = to_grayscale(Image(4, 4, 3, 0));
    CHECK(std::all_of(z.values.begin(), z.values.end(), [](double v) { return v == 0.0; }));
    CHECK_THROWS_AS(to_grayscale(Image(4, 4, 1)), InvalidArgument);
  }

  TEST_CASE("codes on hand-made stencils") {
    CHECK(lbp_code(GrayImage(9, 9, 50.0), 4, 4, 1, 8) == 255u);

    GrayImage dark(9, 9, 10.0);
    dark.at(4, 4) = 100.0;
    CHECK(lbp_code(dark, 4, 4, 1, 8) == 0u);

    GrayImage axis(9, 9, 0.0);
    axis.at(5, 4) = axis.at(3, 4) = axis.at(4, 3) = axis.at(4, 5) = 255.0;
    const auto code = lbp_code(axis, 4, 4, 1, 8);
    CHECK(code == oracle::lbp_code(testing::to_oracle(axis), 4, 4, 1, 8));
    // Axis samples are bits 0, 2, 4, 6. Diagonal samples blend two of the
    // 255 pixels and land above the zero center, so every bit is set.
    CHECK((code & 0b01010101u) == 0b01010101u);
    CHECK(code == 255u);
    GrayImage axis_only(9, 9, 0.0);
    axis_only.at(5, 4) = axis_only.at(3, 4) = axis_only.at(4, 3) = axis_only.at(4, 5) = 255.0;
    axis_only.at(4, 4) = 200.0;
    CHECK(std::popcount(lbp_code(axis_only, 4, 4, 1, 8)) == 4);

    CHECK_THROWS_AS(lbp_code(dark, 1, 4, 1, 8), OutOfBounds);
    CHECK_THROWS_AS(lbp_code(dark, 4, 4, 0, 8), InvalidArgument);
  }

  TEST_CASE("riu2 mapping") {
    CHECK(riu2_bin(0, 8) == 0);
    CHECK(riu2_bin(0, 24) == 0);
    CHECK(riu2_bin(0b00001111, 8) == 4);
    CHECK(riu2_bin(0b01010101, 8) == 9);
    CHECK(riu2_bin(0xff, 8) == 8);
    CHECK(transitions(0b01010101, 8) == 8);
    CHECK_THROWS_AS(riu2_bin(0x100, 8), InvalidArgument);
    for (int p : {8, 16, 24}) {
      for (std::uint32_t code = 0; code < 4096; ++code) {
        const std::uint32_t c = code * 2654435761u & ((1u << p) - 1u);
        CHECK(riu2_bin(c, p) == oracle::riu2(c, p));
      }
    }
  }

  TEST_CASE("presets") {
    CHECK(preset_config(Preset::LBP1).bins() == 10);
    CHECK(preset_config(Preset::LBP2).bins() == 18);
    CHECK(preset_config(Preset::LBP3).bins() == 26);
    CHECK(preset_config(Preset::LBP3).radius == 3);
    CHECK(preset_from_name("LBP2") == Preset::LBP2);
    CHECK_FALSE(preset_from_name("LBP4"));
  }

  TEST_CASE("histograms") {
    const auto flat = lbp_histogram(GrayImage(16, 16, 3.0), {1, 8});
    REQUIRE(flat.size() == 10);
    CHECK(flat[8] == 1.0);
    for (int i = 0; i < 20; ++i) {
      const auto h = lbp_histogram(testing::random_gray(20 + i, 17, i), {2, 16});
      CHECK(std::accumulate(h.begin(), h.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-9));
    }
    CHECK_THROWS_AS(lbp_histogram(GrayImage(8, 8), {3, 24}), InvalidArgument);
    CHECK_NOTHROW(lbp_histogram(GrayImage(9, 9), {3, 24}));
  }

  TEST_CASE("optimized histograms equal the naive reference") {
    for (Preset preset : {Preset::LBP1, Preset::LBP2, Preset::LBP3}) {
      const auto cfg = preset_config(preset);
      for (std::uint64_t s = 0; s < 10; ++s) {
        const auto cont = testing::random_gray(32, 32, 1000 + s);
        CHECK(lbp_histogram(cont, cfg) == oracle::lbp_histogram(testing::to_oracle(cont), cfg.radius, cfg.neighbors));
        const auto quant = to_grayscale(testing::random_image(32, 32, 3, 2000 + s));
        CHECK(lbp_histogram(quant, cfg) == oracle::lbp_histogram(testing::to_oracle(quant), cfg.radius, cfg.neighbors));
        // Few distinct levels force many exact ties.
        auto coarse = testing::random_gray(32, 32, 3000 + s);
        for (auto& v : coarse.values) v = std::floor(v / 64.0);
        CHECK(lbp_histogram(coarse, cfg) == oracle::lbp_histogram(testing::to_oracle(coarse), cfg.radius, cfg.neighbors));
      }
    }
  }

  TEST_CASE("histograms are invariant to 90 degree rotations") {
    for (int p : {8, 16, 24}) {
      const LbpConfig cfg{p / 8, p};
      for (std::uint64_t s = 0; s < 5; ++s) {
        auto g = testing::to_oracle(testing::random_gray(29, 33, 40 + s));
        const auto ref = lbp_histogram(testing::from_oracle(g), cfg);
        for (int turn = 0; turn < 3; ++turn) {
          g = oracle::rotate90(g);
          CHECK(lbp_histogram(testing::from_oracle(g), cfg) == ref);
        }
      }
    }
  }

  TEST_CASE("batch extraction") {
    testing::TempDir dir("lbp");
    std::vector<pyramid::PatchRecord> records;
    for (int i = 0; i < 12; ++i) {
      pyramid::PatchRecord r;
      r.patch_id = "s-p" + std::to_string(i) + "-5x";
      r.slide_id = "s";
      r.level = MagLevel::X5;
      r.size = 24;
      r.image_path = dir / (r.patch_id + ".png");
      write_png(r.image_path, testing::random_image(24, 24, 3, static_cast<std::uint64_t>(i)));
      records.push_back(r);
    }
    const auto cfg = preset_config(Preset::LBP3);
    const auto serial = extract_lbp_batch(records, cfg, 1);
    const auto parallel = extract_lbp_batch(records, cfg, 4);
    CHECK(serial.size() == 12);
    CHECK(serial.dim == 26);
    CHECK(serial == parallel);
    CHECK(extract_lbp_batch({}, cfg).empty());

    std::size_t calls = 0;
    ExtractionStats stats;
    extract_lbp_batch(records, cfg, 1, &stats, [&](std::size_t done, std::size_t total) {
      ++calls;
      CHECK(done <= total);
    });
    CHECK(calls == 12);
    CHECK(stats.patches == 12);

    records[3].image_path = dir / "gone.png";
    try {
      extract_lbp_batch(records, cfg, 2);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("s-p3-5x") != std::string::npos);
    }
  }
}
