#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include "recttt/data.hpp"

using namespace recttt;
using Catch::Approx;

TEST_CASE("dataset generation is deterministic and balanced") {
  SECTION("same seed, same samples") {
    auto a = gen_dataset(Rng(42), 8, Split::Train);
    auto b = gen_dataset(Rng(42), 8, Split::Train);
    REQUIRE(a.size() == 8);
    for (std::size_t i = 0; i < a.size(); ++i) {
      REQUIRE(a[i].label == b[i].label);
      REQUIRE(bitwise_equal(a[i].image, b[i].image));
    }
  }
  SECTION("different splits and seeds differ") {
    auto a = gen_dataset(Rng(42), 4, Split::Train);
    auto b = gen_dataset(Rng(42), 4, Split::Test);
    auto c = gen_dataset(Rng(43), 4, Split::Train);
    REQUIRE_FALSE(bitwise_equal(a[0].image, b[0].image));
    REQUIRE_FALSE(bitwise_equal(a[0].image, c[0].image));
  }
  SECTION("class histogram of 400 samples is exactly balanced") {
    auto data = gen_dataset(Rng(7), 400, Split::Train);
    std::array<int, kNumClasses> hist{};
    for (const auto& s : data) hist[s.label]++;
    for (int h : hist) REQUIRE(h == 100);
  }
  SECTION("odd sizes stay balanced within one") {
    auto data = gen_dataset(Rng(7), 10, Split::Train);
    std::array<int, kNumClasses> hist{};
    for (const auto& s : data) hist[s.label]++;
    const int mn = *std::min_element(hist.begin(), hist.end());
    const int mx = *std::max_element(hist.begin(), hist.end());
    REQUIRE(mx - mn <= 1);
  }
  SECTION("pixels stay in range and the global mean sits in the mixture band") {
    auto data = gen_dataset(Rng(3), 2000, Split::Train);
    double acc = 0.0;
    for (const auto& s : data) {
      for (float v : s.image.data) {
        REQUIRE(v >= 0.0f);
        REQUIRE(v <= 1.0f);
      }
      acc += mean(s.image);
    }
    const double m = acc / data.size();
    // background mean ~0.225, foreground mean ~0.775, coverage ~10-20%
    REQUIRE(m > 0.24);
    REQUIRE(m < 0.42);
  }
}

TEST_CASE("corruptions") {
  Rng gen(5);
  auto data = gen_dataset(gen, 16, Split::Test);

  SECTION("brightness shifts a constant image exactly") {
    Tensor x = full<float>({3, kImageHw, kImageHw}, 0.5f);
    Rng rng(1);
    Tensor y = corrupt(x, {CorruptionKind::Brightness, 4}, rng);  // severity 4 -> +0.22
    for (float v : y.data) REQUIRE(v == Approx(0.72f));
  }
  SECTION("contrast compresses toward 0.5") {
    Tensor x({3, kImageHw, kImageHw});
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] = (i % 2) ? 0.9f : 0.1f;
    Rng rng(1);
    Tensor y = corrupt(x, {CorruptionKind::Contrast, 5}, rng);  // factor 0.2
    for (std::size_t i = 0; i < y.data.size(); ++i)
      REQUIRE(y.data[i] == Approx((x.data[i] - 0.5f) * 0.2f + 0.5f).margin(1e-6));
  }
  SECTION("pixelate enforces constant blocks from severity 3 up") {
    for (int sev : {3, 4, 5}) {
      Rng rng(1);
      Tensor y = corrupt(data[0].image, {CorruptionKind::Pixelate, sev}, rng);
      for (int c = 0; c < 3; ++c)
        for (int by = 0; by < kImageHw; by += 4)
          for (int bx = 0; bx < kImageHw; bx += 4) {
            const float v0 = y.data[(std::size_t(c) * kImageHw + by) * kImageHw + bx];
            for (int i = 0; i < 4; ++i)
              for (int j = 0; j < 4; ++j)
                REQUIRE(y.data[(std::size_t(c) * kImageHw + by + i) * kImageHw + bx + j] ==
                        Approx(v0).margin(1e-7));
          }
    }
  }
  SECTION("every corruption preserves shape and range") {
    for (CorruptionKind k : all_corruptions())
      for (int sev = 1; sev <= 5; ++sev) {
        Rng rng(11);
        Tensor y = corrupt(data[1].image, {k, sev}, rng);
        REQUIRE(y.shape == data[1].image.shape);
        for (float v : y.data) {
          REQUIRE(v >= 0.0f);
          REQUIRE(v <= 1.0f);
        }
      }
  }
  SECTION("corruption with a fixed seed is reproducible") {
    Rng r1(9), r2(9);
    Tensor a = corrupt(data[2].image, {CorruptionKind::GaussianNoise, 5}, r1);
    Tensor b = corrupt(data[2].image, {CorruptionKind::GaussianNoise, 5}, r2);
    REQUIRE(bitwise_equal(a, b));
  }
  SECTION("distortion grows with severity") {
    // Mean L2 distance from clean over 100 samples. Strictly increasing for
    // every kind except pixelate, whose block table repeats sizes at
    // severities 1-2 and 3-4 (equal distortion there by construction).
    auto many = gen_dataset(Rng(21), 100, Split::Test);
    for (CorruptionKind k : all_corruptions()) {
      std::array<double, 5> dist{};
      for (int sev = 1; sev <= 5; ++sev) {
        Rng rng(1000 + sev);
        double acc = 0.0;
        for (const auto& s : many) acc += norm2(sub(corrupt(s.image, {k, sev}, rng), s.image));
        dist[sev - 1] = acc / many.size();
      }
      for (int i = 1; i < 5; ++i) {
        if (k == CorruptionKind::Pixelate) {
          REQUIRE(dist[i] >= dist[i - 1] - 1e-9);
        } else {
          REQUIRE(dist[i] > dist[i - 1]);
        }
      }
      REQUIRE(dist[4] > dist[0]);
    }
  }
  SECTION("invalid specs rejected") {
    Rng rng(1);
    REQUIRE_THROWS_AS(corrupt(data[0].image, {CorruptionKind::GaussianNoise, 0}, rng), ConfigError);
    REQUIRE_THROWS_AS(corrupt(data[0].image, {CorruptionKind::GaussianNoise, 6}, rng), ConfigError);
    REQUIRE_THROWS_AS(corruption_from_name("fog"), ConfigError);
    REQUIRE(corruption_from_name("gaussian_blur") == CorruptionKind::GaussianBlur);
  }
}

TEST_CASE("hflip on samples") {
  auto data = gen_dataset(Rng(13), 4, Split::Train);
  SECTION("involution is exact") {
    for (const auto& s : data) REQUIRE(bitwise_equal(hflip(hflip(s.image)), s.image));
  }
  SECTION("2x2 example") {
    Tensor img({1, 2, 2}, {1, 2, 3, 4});
    REQUIRE(hflip(img).data == std::vector<float>{2, 1, 4, 3});
  }
  SECTION("width-symmetric image unchanged") {
    Tensor img({1, 2, 2}, {5, 5, 7, 7});
    REQUIRE(bitwise_equal(hflip(img), img));
  }
}

TEST_CASE("batching") {
  auto data = gen_dataset(Rng(17), 10, Split::Train);
  SECTION("final partial batch emitted") {
    Rng rng(1);
    auto batches = make_batches(data, 4, rng, false);
    REQUIRE(batches.size() == 3);
    REQUIRE(batches[0].x.shape[0] == 4);
    REQUIRE(batches[1].x.shape[0] == 4);
    REQUIRE(batches[2].x.shape[0] == 2);
  }
  SECTION("no shuffle keeps dataset order") {
    Rng rng(1);
    auto batches = make_batches(data, 4, rng, false);
    REQUIRE(batches[0].indices == std::vector<int>{0, 1, 2, 3});
    for (int i = 0; i < 4; ++i) REQUIRE(batches[0].labels[i] == data[i].label);
  }
  SECTION("same seed, same permutation") {
    Rng r1(77), r2(77);
    auto a = make_batches(data, 4, r1, true);
    auto b = make_batches(data, 4, r2, true);
    for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a[i].indices == b[i].indices);
    // and a different seed reorders
    Rng r3(78);
    auto c = make_batches(data, 4, r3, true);
    bool same = true;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i].indices != c[i].indices) same = false;
    REQUIRE_FALSE(same);
  }
  SECTION("shuffle covers every sample exactly once") {
    Rng rng(3);
    auto batches = make_batches(data, 3, rng, true);
    std::vector<int> seen;
    for (const auto& b : batches) seen.insert(seen.end(), b.indices.begin(), b.indices.end());
    std::sort(seen.begin(), seen.end());
    for (int i = 0; i < 10; ++i) REQUIRE(seen[i] == i);
  }
  SECTION("bad batch size rejected") {
    Rng rng(1);
    REQUIRE_THROWS_AS(make_batches(data, 0, rng, false), ConfigError);
  }
}

TEST_CASE("dataset export and import round trip") {
  namespace fs = std::filesystem;
  const std::string dir = (fs::temp_directory_path() / "recttt_data_rt").string();
  fs::remove_all(dir);

  auto data = gen_dataset(Rng(23), 6, Split::Test);
  export_dataset(dir, data, "test");
  auto loaded = import_dataset(dir);
  REQUIRE(loaded.size() == data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    REQUIRE(loaded[i].label == data[i].label);
    REQUIRE(bitwise_equal(loaded[i].image, data[i].image));
  }

  SECTION("missing index rejected") {
    REQUIRE_THROWS_AS(import_dataset(dir + "_nope"), IoError);
  }
  SECTION("truncated image file rejected") {
    std::ofstream f(fs::path(dir) / "img_00002.f32", std::ios::binary | std::ios::trunc);
    f << "short";
    f.close();
    REQUIRE_THROWS_AS(import_dataset(dir), IoError);
  }
  fs::remove_all(dir);
}
