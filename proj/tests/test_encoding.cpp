#include <gtest/gtest.h>

#include <set>

#include "condsum/encoding.hpp"

using namespace condsum;

namespace {

VideoRecord one_video(int n_frames, int size = 32) { return generate_synthetic(1, n_frames, true, 3, size)[0]; }

}  // namespace

TEST(VideoEncoder, ToyShapeAndDeterminism) {
  const auto rec = one_video(32);
  const auto a = encode_video(rec, EncoderKind::toy, 7);
  const auto b = encode_video(rec, EncoderKind::toy, 7);
  EXPECT_EQ(a.features.rows(), 32);
  EXPECT_EQ(a.features.cols(), 64);
  EXPECT_EQ(a.features, b.features);
  EXPECT_EQ(a.encoder_id, "toy-d64-s7");
  EXPECT_FALSE(a.features == encode_video(rec, EncoderKind::toy, 8).features);
}

TEST(VideoEncoder, PerFrameIdenticalFramesGiveIdenticalRows) {
  auto rec = one_video(6);
  rec.frames[4] = rec.frames[1];
  const auto f = encode_video(rec, EncoderKind::per_frame_2d, 1, 16);
  EXPECT_EQ(f.features.rows(), 6);
  EXPECT_EQ(f.features.row(1), f.features.row(4));
  EXPECT_NE(f.features.row(1), f.features.row(2));
}

TEST(VideoEncoder, SpatiotemporalSeesNeighbours) {
  auto rec = one_video(8);
  const auto base = encode_video(rec, EncoderKind::spatiotemporal, 2, 16);
  EXPECT_EQ(base.features.rows(), 8);
  EXPECT_TRUE(base.features.allFinite());
  // Changing frame 5 moves rows within the temporal window only.
  for (auto& p : rec.frames[5].pixels) p = -p;
  const auto moved = encode_video(rec, EncoderKind::spatiotemporal, 2, 16);
  for (int f = 0; f < 8; ++f) {
    const bool in_window = std::abs(f - 5) <= 2 || f == 7;  // 7 reflects onto 5
    EXPECT_EQ(base.features.row(f) != moved.features.row(f), in_window) << "frame " << f;
  }
}

TEST(VideoEncoder, CachedFeaturesPassThrough) {
  VideoRecord rec;
  rec.video_id = "cached";
  rec.n_frames = 3;
  rec.features = Matrix::Constant(3, 64, 0.5);
  rec.features_encoder = "external";
  const auto f = encode_video(rec, EncoderKind::toy, 0);
  EXPECT_EQ(f.features, *rec.features);
  EXPECT_EQ(f.encoder_id, "external");
  rec.features = Matrix::Zero(3, 10);
  EXPECT_THROW(encode_video(rec, EncoderKind::toy, 0), ValidationError);
}

TEST(VideoEncoder, EmptyVideoAndBadArgs) {
  VideoRecord rec;
  rec.video_id = "empty";
  EXPECT_THROW(encode_video(rec, EncoderKind::toy, 0), ArgumentError);
  EXPECT_THROW(VideoEncoder(EncoderKind::toy, 0), ArgumentError);
  EXPECT_THROW(VideoEncoder(EncoderKind::spatiotemporal, 8, 0, 4), ArgumentError);
  EXPECT_THROW(parse_encoder_kind("resnet"), ArgumentError);
  EXPECT_EQ(parse_encoder_kind(to_string(EncoderKind::per_frame_2d)), EncoderKind::per_frame_2d);
}

TEST(VideoEncoder, FeatureCacheRoundTrip) {
  const auto rec = one_video(5, 16);
  const auto f = encode_video(rec, EncoderKind::toy, 4, 8);
  const auto path = std::filesystem::temp_directory_path() / "condsum_enc_test.feat";
  save_features(path, f, 4);
  const auto back = load_features(path);
  EXPECT_EQ(back.features, f.features.cast<float>().cast<double>().eval());
  EXPECT_EQ(back.encoder_id, f.encoder_id);
  std::filesystem::remove(path);
}

TEST(Vocabulary, SortedWithReservedIds) {
  const Vocabulary v({"Dog park", "the dog"});
  EXPECT_EQ(v.tokens(), (std::vector<std::string>{"<pad>", "<unk>", "dog", "park", "the"}));
  EXPECT_EQ(v.lookup("park"), 3);
  EXPECT_EQ(v.lookup("cat"), Vocabulary::kUnk);
  EXPECT_EQ(v.encode("The DOG  cat"), (std::vector<int>{4, 2, 1}));
  EXPECT_EQ(Vocabulary::from_tokens(v.tokens()).id(), v.id());
  EXPECT_NE(Vocabulary({"dog"}).id(), v.id());
  EXPECT_THROW(Vocabulary::from_tokens({"dog"}), ValidationError);
}

TEST(PositionalEncoding, ClosedFormAndDistinctRows) {
  const Matrix pe = positional_encoding(10, 16);
  EXPECT_EQ(pe(0, 0), 0.0);
  EXPECT_EQ(pe(0, 1), 1.0);
  EXPECT_NEAR(pe(3, 4), std::sin(3 / std::pow(10000.0, 4.0 / 16)), 1e-15);
  EXPECT_NEAR(pe(3, 5), std::cos(3 / std::pow(10000.0, 4.0 / 16)), 1e-15);
  for (int i = 0; i < 10; ++i)
    for (int j = i + 1; j < 10; ++j) EXPECT_GT((pe.row(i) - pe.row(j)).norm(), 1e-3);
}

TEST(EmbedQuery, ShapeAndPositionSensitivity) {
  const Vocabulary v({"dog park"});
  const Matrix table = init_embedding_table(v.size(), 16, 3);
  const auto t = embed_query("dog park", v, table);
  EXPECT_EQ(t.tokens.rows(), 2);
  EXPECT_EQ(t.tokens.cols(), 16);
  EXPECT_EQ(t.vocabulary_id, v.id());
  EXPECT_TRUE(t.tokens.row(0).isApprox(table.row(2) + positional_encoding(2, 16).row(0)));
  const auto same = embed_query("dog dog", v, table);
  EXPECT_NE(same.tokens.row(0), same.tokens.row(1));
}

TEST(EmbedQuery, Errors) {
  const Vocabulary v({"dog"});
  EXPECT_THROW(embed_query("", v, init_embedding_table(v.size(), 8, 0)), ArgumentError);
  EXPECT_THROW(embed_query("dog", v, Matrix::Zero(2, 8)), ArgumentError);
  EXPECT_THROW(embed_query_bow("  ", v, 8), ArgumentError);
}

TEST(EmbedQuery, BagOfWordsIgnoresOrder) {
  const Vocabulary v({"a b c"});
  const auto x = embed_query_bow("a b c b", v, 8);
  const auto y = embed_query_bow("b c b a", v, 8);
  EXPECT_EQ(x.tokens, y.tokens);
  EXPECT_EQ(x.tokens.rows(), 1);
  EXPECT_NEAR(x.tokens.sum(), 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(x.tokens(0, v.lookup("b")), 0.5);
}

TEST(EmbedQuery, TableIsSeededWithZeroPadRow) {
  const Matrix a = init_embedding_table(6, 8, 1);
  EXPECT_EQ(a, init_embedding_table(6, 8, 1));
  EXPECT_TRUE(a.row(Vocabulary::kPad).isZero());
  EXPECT_LE(a.cwiseAbs().maxCoeff(), std::sqrt(3.0 / 8));
}
