#include <gtest/gtest.h>

#include "bess/config.hpp"

namespace bess {
namespace {

std::string error_of(const std::string& text) {
  try {
    parse_run_config(text);
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), "config");
    return e.what();
  }
  return "";
}

TEST(RunConfig, DefaultsAreValidAndRoundTrip) {
  const RunConfig c;
  c.validate();
  EXPECT_EQ(parse_run_config(format_run_config(c)), c);
}

TEST(RunConfig, ParsesEverySection) {
  const auto c = parse_run_config(R"(
# TransE row
data.graph = train.kgt
model.score_fn = RotatE
model.embedding_dim = 64   # complex, so even
model.margin = 9.5
model.loss = SampledSoftmaxCE
sampler.micro_batch_size = 512
sampler.negative_count = 1024
sampler.filter_false_negatives = true
schedule.lr = 0.0005
schedule.optimizer = sgd
schedule.decay = constant
runtime.workers = 4
runtime.precision = half
runtime.seed = 17
eval.train_samples = 100
)");
  EXPECT_EQ(c.graph_path, "train.kgt");
  EXPECT_EQ(c.model.score_fn, ScoreFunction::RotatE);
  EXPECT_EQ(c.model.embedding_dim, 64U);
  EXPECT_EQ(c.model.margin, 9.5);
  EXPECT_EQ(c.model.loss, LossFunction::SampledSoftmax);
  EXPECT_TRUE(c.sampler.filter_false_negatives);
  EXPECT_EQ(c.schedule.initial_lr, 0.0005);
  EXPECT_EQ(c.schedule.optimizer, OptimizerKind::SGD);
  EXPECT_EQ(c.runtime.precision, Precision::Half);
  EXPECT_EQ(c.effective_sampler().shard_count, 4U);
  EXPECT_EQ(c.effective_sampler().seed, 17U);
  EXPECT_EQ(c.train_eval_samples, 100U);
  EXPECT_EQ(parse_run_config(format_run_config(c)), c);
}

TEST(RunConfig, RoundTripPreservesAwkwardDoubles) {
  RunConfig c;
  c.schedule.initial_lr = 0.1 + 0.2;
  c.model.lambda_t = 1e-300;
  c.schedule.epsilon = 3.0e-9;
  EXPECT_EQ(parse_run_config(format_run_config(c)), c);
}

TEST(RunConfig, UnknownKeysAndBadValuesNameTheLine) {
  EXPECT_NE(error_of("model.embeding_dim = 8\n").find("line 1: unknown key 'model.embeding_dim'"), std::string::npos);
  EXPECT_NE(error_of("\nmodel.embedding_dim = eight\n").find("line 2"), std::string::npos);
  EXPECT_NE(error_of("model.embedding_dim\n").find("line 1"), std::string::npos);
  EXPECT_NE(error_of("runtime.seed = 1\nruntime.seed = 2\n").find("already set on line 1"), std::string::npos);
  EXPECT_NE(error_of("sampler.filter_false_negatives = yes\n").find("true or false"), std::string::npos);
  EXPECT_NE(error_of("model.score_fn = TransX\n").find("TransX"), std::string::npos);
  EXPECT_NE(error_of("model.embedding_dim = 8, 16\n").find("sweep"), std::string::npos);
}

TEST(RunConfig, CrossFieldValidation) {
  EXPECT_NE(error_of("runtime.workers = 3\nsampler.micro_batch_size = 64\nsampler.negative_count = 63\n")
                .find("micro_batch_size=64 is not a multiple of D=3"),
            std::string::npos);
  EXPECT_NE(error_of("runtime.workers = 4\nsampler.negative_count = 66\n").find("negative_count"),
            std::string::npos);
  EXPECT_NE(error_of("model.score_fn = ComplEx\nmodel.embedding_dim = 7\n").find("even"), std::string::npos);
  EXPECT_NE(error_of("model.score_fn = DistMult\nmodel.margin = 1\n").find("margin"), std::string::npos);
  EXPECT_NE(error_of("model.distance_p = 3\n").find("distance_p"), std::string::npos);
  EXPECT_EQ(error_of("model.score_fn = DistMult\nmodel.embedding_dim = 7\n"), "");
}

TEST(Sweep, ExpandsCartesianProduct) {
  const auto points = expand_sweep(
      "model.embedding_dim = 256, 384\n"
      "schedule.lr = 0.0005, 0.001, 0.003\n"
      "runtime.seed = 4\n");
  ASSERT_EQ(points.size(), 6U);
  EXPECT_EQ(points[0].name, "cfg_0000");
  EXPECT_EQ(points[0].config.model.embedding_dim, 256U);
  EXPECT_EQ(points[0].config.schedule.initial_lr, 0.0005);
  EXPECT_EQ(points[1].config.schedule.initial_lr, 0.001);
  EXPECT_EQ(points[5].config.model.embedding_dim, 384U);
  EXPECT_EQ(points[5].config.schedule.initial_lr, 0.003);
  EXPECT_EQ(points[5].varied.size(), 2U);
  for (const auto& p : points) EXPECT_EQ(p.config.runtime.seed, 4U);
}

TEST(Sweep, InvalidPointIsNamed) {
  try {
    expand_sweep("runtime.workers = 1, 3\n");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("cfg_0001"), std::string::npos) << e.what();
  }
  EXPECT_EQ(expand_sweep("").size(), 1U);
}

}  // namespace
}  // namespace bess
