#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "condsum/binary_io.hpp"
#include "condsum/core.hpp"

using namespace condsum;

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.uniform(), b.uniform());
}

TEST(Rng, UniformInUnitInterval) {
  Rng r(1);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
  }
}

TEST(Rng, NormalMoments) {
  Rng r(9);
  const int n = 200000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    s += z;
    s2 += z * z;
  }
  const double mean = s / n, var = s2 / n - mean * mean;
  EXPECT_NEAR(mean, 0.0, 4.0 / std::sqrt(n));
  EXPECT_NEAR(var, 1.0, 0.02);
}

TEST(Rng, IndexCoversRange) {
  Rng r(3);
  std::set<std::size_t> seen;
  for (int i = 0; i < 1000; ++i) seen.insert(r.index(7));
  EXPECT_EQ(seen.size(), 7u);
  EXPECT_EQ(*seen.rbegin(), 6u);
  EXPECT_THROW(r.index(0), ArgumentError);
}

TEST(Rng, ShuffleIsPermutation) {
  Rng r(5);
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  r.shuffle(v);
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
}

TEST(Seeds, MixingSeparatesStreams) {
  EXPECT_NE(mix_seed(1, "a"), mix_seed(1, "b"));
  EXPECT_NE(mix_seed(1, std::uint64_t{0}), mix_seed(2, std::uint64_t{0}));
  EXPECT_EQ(mix_seed(7, "video_3"), mix_seed(7, "video_3"));
  // FNV-1a 64 of "a".
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
}

TEST(RoundHalfUp, Values) {
  EXPECT_EQ(round_half_up(2.5), 3);
  EXPECT_EQ(round_half_up(9.6), 10);
  EXPECT_EQ(round_half_up(0.3 * 32), 10);
  EXPECT_EQ(round_half_up(0.3 * 15), 5);
  EXPECT_EQ(round_half_up(2.49), 2);
}

TEST(Container, RoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "condsum_container_test.bin";
  io::Container c;
  c.version = 3;
  c.header = {{"k", 1}};
  Matrix m(2, 3);
  m << 1, 2, 3, 4.5, -5, 6;
  io::append_matrix(c.payload, m);
  io::write_container(path, "TESTMAGX", c);
  const auto back = io::read_container(path, "TESTMAGX");
  EXPECT_EQ(back.version, 3u);
  EXPECT_EQ(back.header["k"], 1);
  EXPECT_TRUE(io::read_matrix(back.payload, 0, 2, 3).isApprox(m));
  EXPECT_THROW(io::read_container(path, "OTHERMAG"), LoadError);
  std::filesystem::remove(path);
}

TEST(Container, FeatureCacheRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "condsum_feat_test.feat";
  io::FeatureCache f{Matrix::Constant(4, 2, 0.25), "toy-d2-s1", 1};
  io::write_feature_cache(path, f);
  const auto back = io::read_feature_cache(path);
  EXPECT_EQ(back.encoder_id, "toy-d2-s1");
  EXPECT_EQ(back.seed, 1u);
  EXPECT_TRUE(back.features.isApprox(f.features));
  std::filesystem::remove(path);
}

TEST(Container, TruncatedFileRejected) {
  const auto path = std::filesystem::temp_directory_path() / "condsum_trunc_test.bin";
  {
    std::ofstream out(path, std::ios::binary);
    out << "CSFEAT";
  }
  EXPECT_THROW(io::read_feature_cache(path), LoadError);
  std::filesystem::remove(path);
}
