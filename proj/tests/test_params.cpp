#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "ctsfda/params.hpp"

using namespace ctsfda;
namespace fs = std::filesystem;

namespace {

ModelParams<float> make_params(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ModelParams<float> p;
  p.add("w", randn<float>({4, 3}, rng));
  p.add("b", randn<float>({4}, rng));
  p.add("bn.running_mean", Tensor<float>::zeros({4}), true);
  return p;
}

}  // namespace

TEST(ModelParams, FingerprintChangesWithContent) {
  auto p = make_params(1);
  const auto h0 = p.fingerprint();
  p.at("w")[0] += 1.0f;
  EXPECT_NE(p.fingerprint(), h0);
  p.at("w")[0] -= 1.0f;
  EXPECT_EQ(p.fingerprint(), h0);
}

TEST(ModelParams, FreezeAndAssert) {
  auto p = make_params(2);
  freeze(p);
  EXPECT_TRUE(p.all_frozen());
  EXPECT_TRUE(assert_frozen(p));
  // deliberately perturb one frozen weight
  p.at("w")[3] += 1e-3f;
  EXPECT_FALSE(assert_frozen(p));
}

TEST(ModelParams, UnfrozenHasNoReference) {
  auto p = make_params(3);
  EXPECT_FALSE(assert_frozen(p));  // nothing frozen yet
}

TEST(Checkpoint, RoundTripBitIdentical) {
  auto p = make_params(4);
  freeze(p);
  auto dir = fs::temp_directory_path() / "ctsfda_test_ckpt";
  fs::remove_all(dir);
  save_checkpoint(p, dir);
  auto q = load_checkpoint<float>(dir);
  ASSERT_EQ(q.arrays.size(), p.arrays.size());
  for (const auto& [name, t] : p.arrays) {
    ASSERT_EQ(q.at(name).shape, t.shape);
    EXPECT_EQ(q.at(name).data, t.data) << name;
  }
  EXPECT_EQ(q.frozen, p.frozen);
  EXPECT_EQ(q.buffers, p.buffers);
  EXPECT_EQ(q.fingerprint(), p.fingerprint());
  EXPECT_TRUE(assert_frozen(q));
  fs::remove_all(dir);
}

TEST(Checkpoint, MissingManifestRejected) {
  auto dir = fs::temp_directory_path() / "ctsfda_test_ckpt_missing";
  fs::remove_all(dir);
  fs::create_directories(dir);
  EXPECT_THROW(load_checkpoint<float>(dir), ConfigError);
  fs::remove_all(dir);
}
