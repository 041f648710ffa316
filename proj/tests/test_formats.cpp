#include "csg/image_io.hpp"
#include "csg/weights_io.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <gtest/gtest.h>

#include "csg/rng.hpp"
#include "csg/util.hpp"

namespace csg {
namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

TEST(PpmFormat, RoundTripQuantizesToByteGrid) {
  LatentTensor img(3, 5, 3);
  CounterRng rng(101);
  for (double& v : img.data) v = 2.2 * rng.uniform() - 1.1;  // include clamping
  const std::string path = temp_path("csg_test_rt.ppm");
  write_ppm(path, img);
  const LatentTensor back = read_ppm(path);
  ASSERT_EQ(back.height, 3);
  ASSERT_EQ(back.width, 5);
  ASSERT_EQ(back.channels, 3);
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double expect = detail::from_byte(detail::to_byte(img.data[i]));
    EXPECT_DOUBLE_EQ(back.data[i], expect) << "i=" << i;
  }
  // A second write-read pass is the identity: the byte grid is a fixed point.
  write_ppm(path, back);
  const LatentTensor again = read_ppm(path);
  for (std::size_t i = 0; i < img.size(); ++i)
    EXPECT_EQ(again.data[i], back.data[i]);
  std::remove(path.c_str());
}

TEST(PpmFormat, Errors) {
  LatentTensor gray(4, 4, 1);
  EXPECT_THROW(write_ppm(temp_path("csg_test_bad.ppm"), gray),
               std::invalid_argument);
  EXPECT_THROW(read_ppm(temp_path("csg_test_does_not_exist.ppm")),
               std::runtime_error);

  const std::string garbage = temp_path("csg_test_garbage.ppm");
  {
    std::ofstream out(garbage, std::ios::binary);
    out << "P3\n2 2\n255\n0 0 0";
  }
  EXPECT_THROW(read_ppm(garbage), std::runtime_error);

  const std::string truncated = temp_path("csg_test_trunc.ppm");
  {
    std::ofstream out(truncated, std::ios::binary);
    out << "P6\n4 4\n255\nxx";  // header promises 48 bytes
  }
  EXPECT_THROW(read_ppm(truncated), std::runtime_error);
  std::remove(garbage.c_str());
  std::remove(truncated.c_str());
}

TEST(PgmFormat, GridAndBoolRoundTrip) {
  Grid g(2, 3);
  g.v = {0.0, 0.25, 0.5, 0.75, 1.0, 0.1};
  const std::string path = temp_path("csg_test_rt.pgm");
  write_pgm(path, g);
  const Grid back = read_pgm(path);
  ASSERT_EQ(back.height, 2);
  ASSERT_EQ(back.width, 3);
  for (std::size_t i = 0; i < g.size(); ++i)
    EXPECT_NEAR(back.v[i], g.v[i], 0.5 / 255.0) << "i=" << i;

  BoolGrid b(2, 2);
  b.set(0, 0, true);
  b.set(1, 1, true);
  write_pgm(path, b);
  const Grid bb = read_pgm(path);
  EXPECT_DOUBLE_EQ(bb.at(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(bb.at(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(bb.at(1, 0), 0.0);
  EXPECT_DOUBLE_EQ(bb.at(1, 1), 1.0);
  std::remove(path.c_str());
}

std::vector<NamedTensor> sample_tensors(std::uint64_t seed) {
  CounterRng rng(seed);
  NamedTensor a;
  a.name = "layer.weight";
  a.dims = {3, 4};
  a.values.resize(12);
  // Snap to the f32 grid up front so the round trip is exact.
  for (double& v : a.values)
    v = static_cast<double>(static_cast<float>(rng.normal()));
  NamedTensor b;
  b.name = "bias";
  b.dims = {5};
  b.values.resize(5);
  for (double& v : b.values)
    v = static_cast<double>(static_cast<float>(10.0 * rng.normal()));
  return {a, b};
}

TEST(WeightsFile, RoundTripIsBitwiseOnF32Grid) {
  const std::vector<NamedTensor> tensors = sample_tensors(11);
  const std::string path = temp_path("csg_test_weights.csgw");
  save_weights_file(path, tensors);
  const std::vector<NamedTensor> back = load_weights_file(path);
  ASSERT_EQ(back.size(), tensors.size());
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    EXPECT_EQ(back[i].name, tensors[i].name);
    ASSERT_EQ(back[i].dims, tensors[i].dims);
    ASSERT_EQ(back[i].values.size(), tensors[i].values.size());
    for (std::size_t k = 0; k < tensors[i].values.size(); ++k)
      EXPECT_EQ(back[i].values[k], tensors[i].values[k])
          << "tensor " << i << " value " << k;
  }
  std::remove(path.c_str());
}

TEST(WeightsFile, SavedBytesAreDeterministic) {
  const std::string p1 = temp_path("csg_test_w1.csgw");
  const std::string p2 = temp_path("csg_test_w2.csgw");
  save_weights_file(p1, sample_tensors(13));
  save_weights_file(p2, sample_tensors(13));
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  const std::string b1((std::istreambuf_iterator<char>(f1)),
                       std::istreambuf_iterator<char>());
  const std::string b2((std::istreambuf_iterator<char>(f2)),
                       std::istreambuf_iterator<char>());
  EXPECT_FALSE(b1.empty());
  EXPECT_EQ(b1, b2);
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST(WeightsFile, Errors) {
  NamedTensor bad;
  bad.name = "broken";
  bad.dims = {2, 2};
  bad.values = {1.0};  // 1 value, dims promise 4
  EXPECT_THROW(save_weights_file(temp_path("csg_test_bad.csgw"), {bad}),
               std::logic_error);

  EXPECT_THROW(load_weights_file(temp_path("csg_test_missing.csgw")),
               std::runtime_error);

  const std::string corrupt = temp_path("csg_test_corrupt.csgw");
  {
    std::ofstream out(corrupt, std::ios::binary);
    out << "NOPE this is not a weights file";
  }
  EXPECT_THROW(load_weights_file(corrupt), std::runtime_error);

  // Valid magic, then truncation mid-payload.
  const std::string trunc = temp_path("csg_test_trunc.csgw");
  {
    std::vector<NamedTensor> tensors = sample_tensors(17);
    save_weights_file(trunc, tensors);
    std::error_code ec;
    std::filesystem::resize_file(trunc, 20, ec);
    ASSERT_FALSE(ec);
  }
  EXPECT_THROW(load_weights_file(trunc), std::runtime_error);
  std::remove(corrupt.c_str());
  std::remove(trunc.c_str());
}

TEST(LatentFile, RoundTrip) {
  LatentTensor x(4, 3, 2);
  CounterRng rng(19);
  for (double& v : x.data)
    v = static_cast<double>(static_cast<float>(rng.normal()));
  const std::string path = temp_path("csg_test_latent.csgw");
  save_latent_file(path, x);
  const LatentTensor back = load_latent_file(path);
  ASSERT_EQ(back.height, 4);
  ASSERT_EQ(back.width, 3);
  ASSERT_EQ(back.channels, 2);
  for (std::size_t i = 0; i < x.size(); ++i)
    EXPECT_EQ(back.data[i], x.data[i]);

  // A general weights file is not a latent container.
  save_weights_file(path, sample_tensors(23));
  EXPECT_THROW(load_latent_file(path), std::runtime_error);
  std::remove(path.c_str());
}

TEST(Rng, DeterministicStreams) {
  CounterRng a(42, 7);
  CounterRng b(42, 7);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());

  CounterRng c(42, 8);
  CounterRng d(42, 7);
  int differs = 0;
  for (int i = 0; i < 10; ++i) differs += (c.next_u64() != d.next_u64());
  EXPECT_GT(differs, 0);

  EXPECT_EQ(derive_seed(5, 1), derive_seed(5, 1));
  EXPECT_NE(derive_seed(5, 1), derive_seed(5, 2));
}

TEST(Rng, RangesAndMoments) {
  CounterRng rng(77);
  double sum = 0.0, sum_sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    const double g = rng.normal();
    sum += g;
    sum_sq += g * g;
  }
  EXPECT_NEAR(sum / n, 0.0, 0.05);
  EXPECT_NEAR(sum_sq / n, 1.0, 0.05);

  for (int i = 0; i < 200; ++i) {
    const int v = rng.uniform_int(3, 5);
    EXPECT_GE(v, 3);
    EXPECT_LE(v, 5);
  }
  EXPECT_THROW(rng.uniform_int(5, 3), std::invalid_argument);
}

TEST(Rng, CategoricalRespectsSupport) {
  CounterRng rng(88);
  const std::vector<double> w = {0.0, 0.0, 1.0, 0.0};
  for (int i = 0; i < 50; ++i) EXPECT_EQ(rng.categorical(w), 2u);

  int saw0 = 0, saw1 = 0;
  const std::vector<double> half = {0.5, 0.5};
  for (int i = 0; i < 200; ++i) {
    const std::size_t k = rng.categorical(half);
    saw0 += (k == 0);
    saw1 += (k == 1);
  }
  EXPECT_GT(saw0, 50);
  EXPECT_GT(saw1, 50);
  EXPECT_THROW(rng.categorical({-0.1, 1.1}), std::invalid_argument);
  EXPECT_THROW(rng.categorical({0.0, 0.0}), std::invalid_argument);
}

TEST(FormatDouble, RoundTripsExactly) {
  CounterRng rng(99);
  for (int i = 0; i < 200; ++i) {
    const double v = std::exp(20.0 * (rng.uniform() - 0.5)) *
                     (rng.uniform() < 0.5 ? -1.0 : 1.0);
    const std::string s = format_double(v);
    EXPECT_EQ(std::stod(s), v) << s;
  }
  EXPECT_EQ(std::stod(format_double(0.1)), 0.1);
}

TEST(ParallelFor, CoversAllIndicesAndPropagatesErrors) {
  std::vector<std::atomic<int>> hits(257);
  for (auto& h : hits) h = 0;
  parallel_for(257, 8, [&](int i) { hits[static_cast<std::size_t>(i)]++; });
  for (const auto& h : hits) EXPECT_EQ(h.load(), 1);

  EXPECT_THROW(
      parallel_for(16, 4,
                   [](int i) {
                     if (i == 7) throw std::runtime_error("worker failure");
                   }),
      std::runtime_error);
}

}  // namespace
}  // namespace csg
