#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "panp/pgm.hpp"
#include "panp/rng.hpp"
#include "panp/taskgen.hpp"
#include "panp/tensor.hpp"

using namespace panp;

TEST_CASE("rbf kernel pointwise values") {
  KernelConfig cfg;
  cfg.lengthscale = 1.0;
  cfg.signal_var = 1.0;
  Tensor x({2, 1}, {0.0, 1.0});
  Tensor k = rbf_kernel(x, x, cfg);
  CHECK_EQ(k.at(0, 0), doctest::Approx(1.0).epsilon(1e-15));
  CHECK_EQ(k.at(1, 1), doctest::Approx(1.0).epsilon(1e-15));
  CHECK_EQ(k.at(0, 1), doctest::Approx(std::exp(-0.5)).epsilon(1e-15));
  CHECK_EQ(k.at(0, 1), doctest::Approx(0.6065306597126334).epsilon(1e-12));

  cfg.signal_var = 2.5;
  Tensor kk = rbf_kernel(x, x, cfg);
  CHECK_EQ(kk.at(0, 0), doctest::Approx(2.5).epsilon(1e-15));
}

TEST_CASE("rbf kernel is symmetric on shared inputs") {
  Rng r(1);
  KernelConfig cfg;
  Tensor x = Tensor::randn({12, 2}, r);
  Tensor k = rbf_kernel(x, x, cfg);
  for (size_t i = 0; i < 12; ++i)
    for (size_t j = 0; j < 12; ++j)
      CHECK_EQ(k.at(i, j), doctest::Approx(k.at(j, i)).epsilon(1e-15));
  CHECK_THROWS_AS(rbf_kernel(Tensor({2, 1}), Tensor({2, 2}), cfg), std::invalid_argument);
}

TEST_CASE("single-point gp variance matches the kernel") {
  KernelConfig cfg;
  cfg.noise_std = 0.0;
  Rng r(2);
  Tensor x({1, 1}, std::vector<double>{0.3});
  const int n = 100000;
  double s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    double f = gp_sample(x, cfg, r).f.at(0);
    s2 += f * f;
  }
  const double var = s2 / n;
  CHECK_LT(std::abs(var - cfg.signal_var) / cfg.signal_var, 0.03);
}

TEST_CASE("gp covariance at two points matches the kernel within 5%") {
  KernelConfig cfg;
  cfg.noise_std = 0.0;
  Rng r(3);
  Tensor x({2, 1}, {0.2, 0.5});
  Tensor k = rbf_kernel(x, x, cfg);
  const int n = 10000;
  double s00 = 0, s01 = 0, s11 = 0;
  for (int i = 0; i < n; ++i) {
    SampledFunction s = gp_sample(x, cfg, r);
    s00 += s.f.at(0) * s.f.at(0);
    s01 += s.f.at(0) * s.f.at(1);
    s11 += s.f.at(1) * s.f.at(1);
  }
  CHECK_LT(std::abs(s00 / n - k.at(0, 0)) / k.at(0, 0), 0.05);
  CHECK_LT(std::abs(s11 / n - k.at(1, 1)) / k.at(1, 1), 0.05);
  CHECK_LT(std::abs(s01 / n - k.at(0, 1)) / k.at(0, 1), 0.05);
}

TEST_CASE("zero noise leaves observations clean") {
  KernelConfig cfg;
  cfg.noise_std = 0.0;
  Rng r(4);
  Tensor x({5, 1}, {0.1, 0.3, 0.5, 0.7, 0.9});
  SampledFunction s = gp_sample(x, cfg, r);
  for (size_t i = 0; i < 5; ++i) CHECK_EQ(s.y.at(i), s.f.at(i));
}

TEST_CASE("noise std shows up empirically") {
  KernelConfig cfg;
  cfg.noise_std = 0.25;
  Rng r(5);
  Tensor x({4, 1}, {0.0, 0.4, 0.6, 1.0});
  double s2 = 0.0;
  const int reps = 20000;
  for (int i = 0; i < reps; ++i) {
    SampledFunction s = gp_sample(x, cfg, r);
    for (size_t j = 0; j < 4; ++j) {
      const double d = s.y.at(j) - s.f.at(j);
      s2 += d * d;
    }
  }
  CHECK_LT(std::abs(std::sqrt(s2 / (4 * reps)) - 0.25), 0.01);
}

TEST_CASE("1d tasks keep contexts inside targets") {
  KernelConfig cfg;
  cfg.lengthscale = 1.0;
  Rng r(6);
  TaskBatch t = make_1d_task(r, 3, 3, 50, -2.0, 2.0, cfg);
  CHECK_EQ(t.kind, TaskBatch::Kind::Points);
  CHECK_EQ(t.ctx_x.rows(), 3u);
  CHECK_EQ(t.tgt_x.rows(), 50u);
  REQUIRE_EQ(t.ctx_indices.size(), 3u);
  for (size_t i = 0; i < 3; ++i) {
    const size_t idx = t.ctx_indices[i];
    REQUIRE_LT(idx, 50u);
    CHECK_EQ(t.ctx_x.at(i, 0), t.tgt_x.at(idx, 0));
    CHECK_EQ(t.ctx_y.at(i, 0), t.tgt_y.at(idx, 0));
  }
  for (size_t i = 0; i < 50; ++i) {
    CHECK_GE(t.tgt_x.at(i, 0), -2.0);
    CHECK_LT(t.tgt_x.at(i, 0), 2.0);
  }
}

TEST_CASE("1d task context count spans the requested range") {
  KernelConfig cfg;
  cfg.lengthscale = 1.0;
  Rng r(7);
  std::vector<bool> seen(11, false);
  for (int i = 0; i < 200; ++i) {
    TaskBatch t = make_1d_task(r, 3, 10, 20, -2.0, 2.0, cfg);
    REQUIRE_GE(t.ctx_x.rows(), 3u);
    REQUIRE_LE(t.ctx_x.rows(), 10u);
    seen[t.ctx_x.rows()] = true;
  }
  for (size_t c = 3; c <= 10; ++c) CHECK(seen[c]);
}

TEST_CASE("fixed seed reproduces the same task") {
  KernelConfig cfg;
  Rng a(8), b(8);
  TaskBatch t1 = make_1d_task(a, 3, 10, 30, -2.0, 2.0, cfg);
  TaskBatch t2 = make_1d_task(b, 3, 10, 30, -2.0, 2.0, cfg);
  REQUIRE_EQ(t1.ctx_x.rows(), t2.ctx_x.rows());
  for (size_t i = 0; i < t1.tgt_x.numel(); ++i) CHECK_EQ(t1.tgt_x.at(i), t2.tgt_x.at(i));
  for (size_t i = 0; i < t1.tgt_y.numel(); ++i) CHECK_EQ(t1.tgt_y.at(i), t2.tgt_y.at(i));
  CHECK_EQ(t1.ctx_indices, t2.ctx_indices);
}

TEST_CASE("image tasks are normalized and shaped") {
  KernelConfig cfg;
  Rng r(9);
  Tensor img = make_image_task(r, 16, cfg);
  CHECK_EQ(img.shape(), std::vector<size_t>({16, 16}));
  double lo = 1e9, hi = -1e9;
  for (double v : img.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK_GE(lo, 0.0);
  CHECK_LE(hi, 1.0);
  CHECK_EQ(lo, doctest::Approx(0.0).epsilon(1e-12));
  CHECK_EQ(hi, doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("image smoothness: short-range correlation beats long-range") {
  KernelConfig cfg;  // lengthscale 0.2
  Rng r(10);
  ImageGpSampler sampler(16, cfg);
  double corr1 = 0.0, corr8 = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    Tensor img = sampler.sample(r);
    double mean = 0.0;
    for (double v : img.data()) mean += v;
    mean /= 256.0;
    double var = 0.0;
    for (double v : img.data()) var += (v - mean) * (v - mean);
    var /= 256.0;
    auto lag_corr = [&](size_t lag) {
      double acc = 0.0;
      size_t cnt = 0;
      for (size_t i = 0; i < 16; ++i)
        for (size_t j = 0; j + lag < 16; ++j) {
          acc += (img.at(i, j) - mean) * (img.at(i, j + lag) - mean);
          ++cnt;
        }
      return acc / (static_cast<double>(cnt) * var);
    };
    corr1 += lag_corr(1);
    corr8 += lag_corr(8);
  }
  CHECK_GT(corr1 / 100.0, corr8 / 100.0);
  CHECK_GT(corr1 / 100.0, 0.8);
}

TEST_CASE("sampler caching matches the one-shot path") {
  KernelConfig cfg;
  Rng a(11), b(11);
  ImageGpSampler sampler(8, cfg);
  Tensor i1 = sampler.sample(a);
  Tensor i2 = make_image_task(b, 8, cfg);
  for (size_t i = 0; i < i1.numel(); ++i) CHECK_EQ(i1.at(i), i2.at(i));
}

TEST_CASE("patchify layout: 16x16 with P=4") {
  Rng r(12);
  KernelConfig cfg;
  Tensor img = make_image_task(r, 16, cfg);
  auto [rows, coords] = patchify(img, 4);
  CHECK_EQ(rows.shape(), std::vector<size_t>({16, 16}));
  REQUIRE_EQ(coords.size(), 16u);
  CHECK_EQ(coords[0].row, 0u);
  CHECK_EQ(coords[0].col, 0u);
  CHECK_EQ(coords[5].row, 1u);
  CHECK_EQ(coords[5].col, 1u);
  // first pixel of patch (1,1) is image pixel (4,4)
  CHECK_EQ(rows.at(5, 0), img.at(4, 4));
  CHECK_THROWS_AS(patchify(img, 5), std::invalid_argument);
  CHECK_THROWS_AS(patchify(Tensor({4, 6}), 2), std::invalid_argument);
}

TEST_CASE("patchify/unpatchify roundtrip is bit-exact for all valid pairs") {
  Rng r(13);
  for (size_t s : {8u, 16u, 32u}) {
    KernelConfig cfg;
    Tensor img = make_image_task(r, s, cfg);
    for (size_t p : {1u, 2u, 4u, 8u}) {
      if (s % p != 0) continue;
      auto [rows, coords] = patchify(img, p);
      Tensor back = unpatchify(rows, coords, p, s);
      REQUIRE_EQ(back.shape(), img.shape());
      for (size_t i = 0; i < img.numel(); ++i) CHECK_EQ(back.at(i), img.at(i));
    }
  }
}

TEST_CASE("constant image gives identical patch rows") {
  Tensor img = Tensor::full({8, 8}, 0.25);
  auto [rows, coords] = patchify(img, 2);
  for (size_t i = 0; i < rows.rows(); ++i)
    for (size_t j = 0; j < rows.cols(); ++j) CHECK_EQ(rows.at(i, j), 0.25);
}

TEST_CASE("unpatchify reassembles shuffled rows via coordinates") {
  Rng r(14);
  KernelConfig cfg;
  Tensor img = make_image_task(r, 8, cfg);
  auto [rows, coords] = patchify(img, 2);
  auto perm = r.permutation(coords.size());
  Tensor shuffled = rows_at(rows, perm);
  std::vector<GridCoord> shuffled_coords(coords.size());
  for (size_t i = 0; i < perm.size(); ++i) shuffled_coords[i] = coords[perm[i]];
  Tensor back = unpatchify(shuffled, shuffled_coords, 2, 8);
  for (size_t i = 0; i < img.numel(); ++i) CHECK_EQ(back.at(i), img.at(i));
  CHECK_THROWS_AS(unpatchify(rows, std::vector<GridCoord>(coords.begin(), coords.end() - 1), 2, 8),
                  std::invalid_argument);
}

TEST_CASE("patch split obeys the fraction and subset rules") {
  Rng r(15);
  KernelConfig cfg;
  Tensor img = make_image_task(r, 16, cfg);
  auto [rows, coords] = patchify(img, 4);

  TaskBatch full = split_context_target_patches(rows, coords, 16, 4, r, 1.0);
  CHECK_EQ(full.ctx_patches.rows(), 16u);
  CHECK_EQ(full.tgt_patches.rows(), 16u);

  TaskBatch quarter = split_context_target_patches(rows, coords, 16, 4, r, 0.25);
  CHECK_EQ(quarter.ctx_patches.rows(), 4u);
  CHECK_EQ(quarter.kind, TaskBatch::Kind::Patches);
  for (size_t i = 0; i < quarter.ctx_indices.size(); ++i) {
    const size_t idx = quarter.ctx_indices[i];
    REQUIRE_LT(idx, 16u);
    for (size_t j = 0; j < 16; ++j)
      CHECK_EQ(quarter.ctx_patches.at(i, j), quarter.tgt_patches.at(idx, j));
    CHECK_EQ(quarter.ctx_coords[i].row, quarter.tgt_coords[idx].row);
    CHECK_EQ(quarter.ctx_coords[i].col, quarter.tgt_coords[idx].col);
  }
  CHECK_THROWS_AS(split_context_target_patches(rows, coords, 16, 4, r, 0.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(split_context_target_patches(rows, coords, 16, 4, r, 1.5),
                  std::invalid_argument);

  Rng s1(77), s2(77);
  TaskBatch a = split_context_target_patches(rows, coords, 16, 4, s1, 0.3);
  TaskBatch b = split_context_target_patches(rows, coords, 16, 4, s2, 0.3);
  CHECK_EQ(a.ctx_indices, b.ctx_indices);
}

TEST_CASE("pgm roundtrip preserves quantized pixels") {
  Rng r(16);
  KernelConfig cfg;
  Tensor img = make_image_task(r, 16, cfg);
  const std::string path = "test_roundtrip.pgm";
  write_pgm(path, img);
  Tensor back = read_pgm(path);
  REQUIRE_EQ(back.shape(), img.shape());
  for (size_t i = 0; i < img.numel(); ++i)
    CHECK_LT(std::abs(back.at(i) - img.at(i)), 0.5 / 255.0 + 1e-12);
  // a second write/read of the quantized image is lossless
  write_pgm(path, back);
  Tensor again = read_pgm(path);
  for (size_t i = 0; i < img.numel(); ++i) CHECK_EQ(again.at(i), back.at(i));
  std::remove(path.c_str());
}

TEST_CASE("pgm rejects malformed files") {
  const std::string path = "test_bad.pgm";
  {
    std::ofstream out(path, std::ios::binary);
    out << "P2\n4 4\n255\n";
  }
  CHECK_THROWS_AS(read_pgm(path), std::runtime_error);
  {
    std::ofstream out(path, std::ios::binary);
    out << "P5\n4 4\n255\n";
    out.put(0);  // truncated body
  }
  CHECK_THROWS_AS(read_pgm(path), std::runtime_error);
  {
    std::ofstream out(path, std::ios::binary);
    out << "P5\n4 5\n255\n";
    for (int i = 0; i < 20; ++i) out.put(1);
  }
  CHECK_THROWS_AS(read_pgm(path), std::runtime_error);
  CHECK_THROWS_AS(read_pgm("no_such_file.pgm"), std::runtime_error);
  std::remove(path.c_str());
}
