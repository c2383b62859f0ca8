#include <gtest/gtest.h>

#include "stagegen/checkpoint.hpp"
#include "test_util.hpp"

using namespace stagegen;

namespace {

ModelSpec tiny() {
  ModelSpec s;
  s.image_side = 32;
  s.latent_dim = 8;
  s.base_feature_maps_g = 4;
  s.base_feature_maps_d = 4;
  s.resnet_blocks = 1;
  return s;
}

Checkpoint sample_checkpoint() {
  auto m = init_params(tiny(), 3);
  Checkpoint ck;
  store_module(ck, "g1", m.g1);
  store_module(ck, "d1", m.d1);
  AdamState<float> adam(m.g1.params());
  adam.first_moment[0][0] = 0.25f;
  adam.step_count = 7;
  store_adam(ck, "adam_g", m.g1, adam);
  ck.metadata["rng"] = serialize_rng(Rng(5));
  ck.metadata["note"] = std::string("bytes \0 inside", 14);
  return ck;
}

}  // namespace

TEST(Checkpoint, RoundTripRestoresEveryTensor) {
  const auto ck = sample_checkpoint();
  const auto back = decode_checkpoint(encode_checkpoint(ck));
  ASSERT_EQ(back.tensors.size(), ck.tensors.size());
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    EXPECT_EQ(back.tensors[i].first, ck.tensors[i].first);
    EXPECT_EQ(back.tensors[i].second.shape(), ck.tensors[i].second.shape());
    EXPECT_EQ(back.tensors[i].second.values(), ck.tensors[i].second.values());
  }
  EXPECT_EQ(back.metadata, ck.metadata);

  auto fresh = init_params(tiny(), 99);
  restore_module(back, "g1", fresh.g1);
  auto orig = init_params(tiny(), 3);
  for (std::size_t i = 0; i < orig.g1.params().size(); ++i) EXPECT_EQ(fresh.g1.params()[i].values(), orig.g1.params()[i].values());
  const auto adam = restore_adam(back, "adam_g", fresh.g1);
  EXPECT_EQ(adam.step_count, 7);
  EXPECT_EQ(adam.first_moment[0][0], 0.25f);
  Rng expect(5);
  auto rng = deserialize_rng(back.meta("rng"));
  EXPECT_EQ(rng(), expect());
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  testutil::TempDir tmp("ckpt_bytes");
  save_checkpoint(sample_checkpoint(), tmp / "a.sgck");
  save_checkpoint(load_checkpoint(tmp / "a.sgck"), tmp / "b.sgck");
  EXPECT_EQ(testutil::slurp(tmp / "a.sgck"), testutil::slurp(tmp / "b.sgck"));
}

TEST(Checkpoint, HeaderLayout) {
  Checkpoint ck;
  ck.add("w", Tensor<float>({2}, {1.0f, -2.0f}));
  const auto b = encode_checkpoint(ck);
  // magic(4) version(4) count(4) namelen(4) "w"(1) rank(4) dim(8) payload(8) meta count(4) crc(4)
  ASSERT_EQ(b.size(), 45u);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "SGCK");
  EXPECT_EQ(b[4], 1);
  float first;
  std::memcpy(&first, b.data() + 29, 4);
  EXPECT_EQ(first, 1.0f);
}

TEST(Checkpoint, EverySingleByteFlipIsDetected) {
  Checkpoint ck;
  ck.add("w", Tensor<float>({3}, {1.f, 2.f, 3.f}));
  ck.metadata["k"] = "v";
  const auto good = encode_checkpoint(ck);
  for (std::size_t i = 0; i < good.size(); ++i) {
    auto bad = good;
    bad[i] ^= 0x10;
    EXPECT_THROW(decode_checkpoint(bad), FormatError) << "byte " << i;
  }
}

TEST(Checkpoint, StructuredErrors) {
  const auto good = encode_checkpoint(sample_checkpoint());
  auto msg = [](const std::vector<std::uint8_t>& b) {
    try {
      decode_checkpoint(b, "x.sgck");
    } catch (const FormatError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_NE(msg(bad_magic).find("magic"), std::string::npos);
  auto bad_version = good;
  bad_version[4] = 2;
  EXPECT_NE(msg(bad_version).find("version"), std::string::npos);
  auto truncated = std::vector<std::uint8_t>(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(good.size() / 2));
  EXPECT_NE(msg(truncated), "no error");
  EXPECT_NE(msg({'S', 'G'}).find("truncated"), std::string::npos);
  testutil::TempDir tmp("ckpt_missing");
  EXPECT_THROW(load_checkpoint(tmp / "nope.sgck"), IoError);
}

TEST(Checkpoint, RestoreRejectsLayoutMismatch) {
  const auto ck = sample_checkpoint();
  auto other = tiny();
  other.base_feature_maps_g = 8;
  ModelSet<float> m(other);
  EXPECT_THROW(restore_module(ck, "g1", m.g1), FormatError);
  EXPECT_THROW(restore_module(ck, "g2", m.g2), FormatError);
  Checkpoint dup;
  dup.add("a", Tensor<float>({1}));
  EXPECT_THROW(dup.add("a", Tensor<float>({1})), Error);
}
