#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "ctsfda/eval.hpp"

using namespace ctsfda;
namespace fs = std::filesystem;

namespace {

// Independent confusion-matrix oracle for macro-F1.
double mf1_oracle(const std::vector<std::int64_t>& pred,
                  const std::vector<std::int64_t>& truth, std::int64_t k) {
  std::vector<std::vector<std::int64_t>> cm(
      static_cast<std::size_t>(k),
      std::vector<std::int64_t>(static_cast<std::size_t>(k), 0));
  for (std::size_t i = 0; i < pred.size(); ++i)
    ++cm[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(pred[i])];
  double sum = 0;
  for (std::int64_t c = 0; c < k; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    std::int64_t tp = cm[ci][ci], pred_c = 0, truth_c = 0;
    for (std::int64_t o = 0; o < k; ++o) {
      pred_c += cm[static_cast<std::size_t>(o)][ci];
      truth_c += cm[ci][static_cast<std::size_t>(o)];
    }
    const double prec = pred_c ? static_cast<double>(tp) / pred_c : 0;
    const double rec = truth_c ? static_cast<double>(tp) / truth_c : 0;
    sum += (prec + rec) > 0 ? 2 * prec * rec / (prec + rec) : 0;
  }
  return sum / static_cast<double>(k);
}

RunConfig<float> tiny_config() {
  auto cfg = ConfigMap::parse_string(R"(
seed = 3
synth.classes = 2
synth.n_per_class = 6
synth.length = 16
reshape.h = 4
reshape.w = 4
model.unet.base = 2
model.unet.depth = 2
model.warp.hidden = 3
model.warp.code_dim = 2
model.warp.codebook = 4
model.backbone.w1 = 4
model.backbone.w2 = 4
model.backbone.w3 = 4
stages.s1.epochs = 2
stages.s2.epochs = 2
stages.s3.epochs = 2
train.batch_size = 4
tta.n = 2
)");
  return RunConfig<float>::from(cfg);
}

}  // namespace

TEST(Mf1, PerfectPredictionsGiveOne) {
  LabelBatch labels({0, 1, 2, 1, 0}, 3);
  EXPECT_DOUBLE_EQ(mf1(labels.labels, labels, 3), 1.0);
}

TEST(Mf1, HandExampleOneThird) {
  // K=2: predictions all class 0, labels half-and-half.
  // class0: tp=2 fp=2 fn=0 -> F1 = 4/6; class1: 0. MF1 = 1/3.
  LabelBatch labels({0, 0, 1, 1}, 2);
  EXPECT_NEAR(mf1({0, 0, 0, 0}, labels, 2), 1.0 / 3.0, 1e-12);
}

TEST(Mf1, MatchesConfusionMatrixOracleRandomized) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::int64_t k = 2 + static_cast<std::int64_t>(rng() % 5);
    const std::size_t n = 1000;
    std::vector<std::int64_t> pred(n), truth(n);
    for (std::size_t i = 0; i < n; ++i) {
      pred[i] = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(k));
      truth[i] = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(k));
    }
    LabelBatch labels(truth, k);
    EXPECT_NEAR(mf1(pred, labels, k), mf1_oracle(pred, truth, k), 1e-12);
  }
}

TEST(Mf1, InstanceOrderInvariant) {
  std::vector<std::int64_t> pred{0, 1, 1, 2, 0, 2};
  std::vector<std::int64_t> truth{0, 2, 1, 2, 1, 0};
  const double a = mf1(pred, LabelBatch(truth, 3), 3);
  std::vector<std::size_t> perm{3, 0, 5, 2, 4, 1};
  std::vector<std::int64_t> pp(6), tt(6);
  for (std::size_t i = 0; i < 6; ++i) {
    pp[i] = pred[perm[i]];
    tt[i] = truth[perm[i]];
  }
  EXPECT_DOUBLE_EQ(mf1(pp, LabelBatch(tt, 3), 3), a);
}

TEST(Mf1, ClassRelabelInvariant) {
  std::vector<std::int64_t> pred{0, 1, 1, 2, 0, 2};
  std::vector<std::int64_t> truth{0, 2, 1, 2, 1, 0};
  const double a = mf1(pred, LabelBatch(truth, 3), 3);
  auto relabel = [](std::int64_t c) { return (c + 1) % 3; };
  std::vector<std::int64_t> pp, tt;
  for (std::size_t i = 0; i < 6; ++i) {
    pp.push_back(relabel(pred[i]));
    tt.push_back(relabel(truth[i]));
  }
  EXPECT_DOUBLE_EQ(mf1(pp, LabelBatch(tt, 3), 3), a);
}

TEST(Mf1, RejectsBadInputs) {
  LabelBatch labels({0, 1}, 2);
  EXPECT_THROW(mf1({0}, labels, 2), ShapeError);
  EXPECT_THROW(mf1({0, 5}, labels, 2), InvariantError);
}

TEST(NnDistance, ZeroForIdenticalSets) {
  std::mt19937_64 rng(2);
  auto f = randn<float>({4, 3}, rng);
  EXPECT_DOUBLE_EQ(nn_distance_stat(f, f), 0.0);
}

TEST(NnDistance, HandExampleFive) {
  // target [3,4]: nearest of {(0,0), (10,10)} is the origin, distance 5
  Tensor<double> tgt({1, 2}, {3, 4});
  Tensor<double> src({2, 2}, {0, 0, 10, 10});
  EXPECT_NEAR(nn_distance_stat(tgt, src), 5.0, 1e-12);
}

TEST(NnDistance, MeanOverTargets) {
  Tensor<double> tgt({2, 1}, {1, 7});
  Tensor<double> src({2, 1}, {0, 10});  // distances 1 and 3 -> mean 2
  EXPECT_NEAR(nn_distance_stat(tgt, src), 2.0, 1e-12);
}

TEST(NnDistance, RejectsBadShapes) {
  Tensor<double> a({2, 3});
  Tensor<double> b({2, 4});
  EXPECT_THROW(nn_distance_stat(a, b), ShapeError);
  Tensor<double> empty({0, 3});
  EXPECT_THROW(nn_distance_stat(empty, a), ShapeError);
}

TEST(Argmax, RowsAndProbs) {
  Tensor<float> logits({2, 3}, {0.1f, 2.0f, -1.0f, 5.0f, 0.0f, 4.0f});
  EXPECT_EQ(argmax_rows(logits), (std::vector<std::int64_t>{1, 0}));
  std::vector<ProbVector<float>> probs{{{0.2f, 0.5f, 0.3f}},
                                       {{0.7f, 0.1f, 0.2f}}};
  EXPECT_EQ(argmax_probs(probs), (std::vector<std::int64_t>{1, 0}));
}

TEST(Scenario, EndToEndOnTinyFixture) {
  auto rc = tiny_config();
  auto [source, target] = generate_synthetic_pair<float>(
      rc.synth_classes, rc.synth_n_per_class, rc.synth_d, rc.synth_length,
      rc.shift);
  TrainLog log_s3;
  auto r = run_scenario(source, target, rc,
                        static_cast<Pipeline<float>*>(nullptr), &log_s3);
  EXPECT_EQ(r.scenario_id, "synthetic-source->synthetic-target");
  for (double v : {r.mf1_no_adapt, r.mf1_source_replay, r.mf1_full,
                   r.mf1_full_with_ia}) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  for (double v : {r.nn_distance_no_adapt, r.nn_distance_source_replay,
                   r.nn_distance_full})
    EXPECT_TRUE(std::isfinite(v) && v >= 0.0);
  EXPECT_EQ(log_s3.epochs.size(), 2u);
}

TEST(Scenario, FilesWrittenWithExpectedLayout) {
  ScenarioResult r;
  r.scenario_id = "a->b";
  r.mf1_no_adapt = 0.25;
  r.mf1_full = 0.75;
  auto dir = fs::temp_directory_path() / "ctsfda_test_scenario";
  fs::remove_all(dir);
  write_scenario_files(r, dir);
  EXPECT_TRUE(fs::exists(dir / "scenario.json"));
  std::ifstream csv(dir / "table.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "Algorithm,a->b,AVG");
  std::ifstream nn(dir / "nn_distance.csv");
  std::getline(nn, header);
  EXPECT_EQ(header, "stage,distance");
  nlohmann::json j;
  std::ifstream(dir / "scenario.json") >> j;
  EXPECT_EQ(j["mf1_no_adapt"], 0.25);
  fs::remove_all(dir);
}

TEST(Ablation, BranchSuiteProducesThreeRows) {
  auto rc = tiny_config();
  auto [source, target] = generate_synthetic_pair<float>(
      rc.synth_classes, rc.synth_n_per_class, rc.synth_d, rc.synth_length,
      rc.shift);
  auto rows = run_ablation("branch", source, target, rc);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].variant, "CT w/o SR-branch");
  EXPECT_EQ(rows[1].variant, "CT w/o OC-branch");
  EXPECT_EQ(rows[2].variant, "Full CT");
  for (const auto& row : rows) {
    EXPECT_GE(row.mf1, 0.0);
    EXPECT_LE(row.mf1, 1.0);
  }
}

TEST(Ablation, UnknownSuiteRejected) {
  auto rc = tiny_config();
  auto [source, target] = generate_synthetic_pair<float>(
      rc.synth_classes, rc.synth_n_per_class, rc.synth_d, rc.synth_length,
      rc.shift);
  EXPECT_THROW(run_ablation("bogus", source, target, rc), ConfigError);
}

TEST(Ablation, FilesWritten) {
  std::vector<AblationRow> rows{{"A", 0.5}, {"B", 0.75}};
  auto dir = fs::temp_directory_path() / "ctsfda_test_ablation";
  fs::remove_all(dir);
  write_ablation_files("branch", rows, dir);
  nlohmann::json j;
  std::ifstream(dir / "ablation.json") >> j;
  EXPECT_EQ(j["suite"], "branch");
  ASSERT_EQ(j["rows"].size(), 2u);
  EXPECT_EQ(j["rows"][1]["mf1"], 0.75);
  std::ifstream csv(dir / "table.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "Variant,MF1");
  fs::remove_all(dir);
}

TEST(ConfigMap, ParseAndHash) {
  auto a = ConfigMap::parse_string("b = 2\na = 1 # comment\n\n");
  auto b = ConfigMap::parse_string("a = 1\nb = 2\n");
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_EQ(a.get_int("a", 0), 1);
  EXPECT_THROW(ConfigMap::parse_string("novalue\n"), ConfigError);
}

TEST(ConfigMap, TypedAccessors) {
  auto c = ConfigMap::parse_string("x = 1.5\nflag = true\nname = hi\n");
  EXPECT_DOUBLE_EQ(c.get_double("x", 0), 1.5);
  EXPECT_TRUE(c.get_bool("flag", false));
  EXPECT_EQ(c.get_str("name", ""), "hi");
  EXPECT_EQ(c.get_int("missing", 7), 7);
  EXPECT_THROW(c.get_int("x", 0), ConfigError);
  EXPECT_THROW(c.require_str("missing"), ConfigError);
}

TEST(RunConfig, DefaultsMatchContract) {
  auto rc = RunConfig<float>::from(ConfigMap::parse_string(""));
  EXPECT_EQ(rc.sched.s1.lr, 5e-3);
  EXPECT_EQ(rc.sched.s1.epochs, 8);
  EXPECT_EQ(rc.sched.s2.lr, 2e-3);
  EXPECT_EQ(rc.sched.s2.epochs, 20);
  EXPECT_EQ(rc.sched.s3.lr, 5e-3);
  EXPECT_EQ(rc.sched.s3.epochs, 8);
  EXPECT_EQ(rc.sched.batch_size, 32);
  EXPECT_FLOAT_EQ(rc.adapt.lambda, 0.1f);
  EXPECT_FLOAT_EQ(rc.adapt.q, 2.0f);
  EXPECT_FLOAT_EQ(rc.adapt.codebook_coeff, 1.0f);
  EXPECT_FLOAT_EQ(rc.adapt.commitment_coeff, 0.25f);
  EXPECT_DOUBLE_EQ(rc.tta.delta, 0.001);
  EXPECT_EQ(rc.tta.n, 10);
  EXPECT_EQ(rc.weighting, StabilityWeighting::kCosine);
}
