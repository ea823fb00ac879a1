#include <algorithm>
#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "hiprobe/data/generate.hpp"
#include "hiprobe/model/weights_io.hpp"
#include "hiprobe/peft/lora.hpp"
#include "hiprobe/peft/setups.hpp"
#include "hiprobe/peft/train.hpp"
#include "model_grad_check.hpp"
#include "test_util.hpp"

using namespace hiprobe;

namespace {

ModelConfig small_config(std::size_t layers = 4) {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = layers;
  c.n_heads = 2;
  c.head_dim = 8;
  c.ffn_dim = 32;
  return c;
}

std::vector<const Sample*> pointers(const std::vector<Sample>& samples, std::size_t begin, std::size_t end) {
  std::vector<const Sample*> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(&samples[i]);
  return out;
}

std::string adapter_hash(const Model& m) {
  Fnv1a h;
  for (const auto& a : m.adapters) h.update(a.a).update(a.b);
  return h.hex();
}

}  // namespace

TEST(AttachLora, ZeroInitIsExactIdentity) {
  const ModelConfig cfg;
  const ModelWeights base = init_model(cfg, 3);
  const Model adapted = attach_lora(base, {0, 1, 2, 3}, 9);
  EXPECT_EQ(adapted.adapters.size(), 12u);
  const auto samples = generate_dataset(10, 1);
  for (const auto& s : samples) {
    const auto layout = caption_prompt(s.objects[0].caption, cfg);
    EXPECT_EQ(forward(adapted, layout, s.image).logits, forward(base, layout, s.image).logits);
  }
  for (const auto& a : adapted.adapters) {
    EXPECT_EQ(a.a.shape(), (Shape{8, 64}));
    EXPECT_EQ(a.b.shape(), (Shape{64, 8}));
    EXPECT_DOUBLE_EQ(a.scaling(), 2.0);
    EXPECT_TRUE(a.a.requires_grad());
    for (double v : a.b.data()) EXPECT_EQ(v, 0.0);
  }
  double sq = 0;
  for (const auto& a : adapted.adapters)
    for (double v : a.a.data()) sq += v * v;
  EXPECT_NEAR(std::sqrt(sq / (12 * 8 * 64)), 0.02, 0.002);
  adapted.base.for_each([](const std::string& name, const Tensor& t) { EXPECT_FALSE(t.requires_grad()) << name; });
}

TEST(AttachLora, RejectsBadLayers) {
  const ModelWeights base = init_model(small_config(), 3);
  EXPECT_THROW(attach_lora(base, {1, 1}, 0), InvalidArgument);
  EXPECT_THROW(attach_lora(base, {4}, 0), InvalidArgument);
  EXPECT_EQ(attach_lora(base, {}, 0).adapters.size(), 0u);
}

TEST(CountParams, AdapterArithmetic) {
  const ModelConfig cfg;  // d_model 64
  const ModelWeights base = init_model(cfg, 1);
  const std::size_t base_total = base.parameter_count();
  Model one = attach_lora(base, {2}, 0);
  one.adapters.resize(1);
  EXPECT_EQ(count_params(one).trainable, 1024u);
  const auto four = count_params(attach_lora(base, {0, 1, 2, 3}, 0));
  EXPECT_EQ(four.trainable, 12288u);
  EXPECT_EQ(four.total, base_total + 12288u);
  EXPECT_DOUBLE_EQ(four.percent, 100.0 * 12288 / static_cast<double>(base_total + 12288));
  const auto original = count_params(attach_lora(base, {}, 0));
  EXPECT_EQ(original.trainable, 0u);
  EXPECT_EQ(original.percent, 0.0);
  EXPECT_EQ(original.total, base_total);
}

TEST(LoraGradient, MatchesFiniteDifferences) {
  ModelConfig cfg = small_config(1);
  cfg.d_model = 8;
  cfg.head_dim = 4;
  cfg.ffn_dim = 16;
  Model m = attach_lora(init_model(cfg, 4), {0}, 5, {4, 8.0, 0.3});
  Rng rng(6);
  m.base.for_each([&](const std::string&, Tensor& t) {
    for (auto& v : t.data()) v += 0.3 * rng.normal();
  });
  for (auto& a : m.adapters)
    for (auto& v : a.b.data()) v = 0.3 * rng.normal();
  const auto samples = generate_dataset(10, 2);
  const auto layout = caption_prompt(samples[1].objects[0].caption, cfg);
  EXPECT_LT(hiprobe::testing::model_gradient_error(m, layout, patchify(samples[1].image, cfg)), 1e-4);
}

TEST(CaptionLoss, EmptyCaptionRangeIsAnError) {
  const ModelConfig cfg = small_config(1);
  const Model m{init_model(cfg, 1), {}};
  const auto samples = generate_dataset(10, 1);
  PromptLayout layout = caption_prompt(samples[0].objects[0].caption, cfg);
  layout.caption.end = layout.caption.begin;
  Tape tape;
  EXPECT_THROW(caption_loss(tape, m, layout, patchify(samples[0].image, cfg)), InvalidArgument);
}

TEST(Train, FrozenTensorsNeverChange) {
  const ModelConfig cfg = small_config();
  const ModelWeights base = init_model(cfg, 1);
  const std::string before = weights_hash(base);
  const auto samples = generate_dataset(20, 3);
  const auto train_units = caption_units(pointers(samples, 0, 14));
  const auto val_units = caption_units(pointers(samples, 14, 20));
  Model adapted = attach_lora(base, {1, 3}, 2);
  const std::string adapters_before = adapter_hash(adapted);
  TrainConfig tc;
  tc.epochs = 1000;
  tc.batch_size = 2;
  tc.patience = 1000;
  tc.max_steps = 100;
  tc.learning_rate = 1e-2;
  const TrainResult r = train(adapted, train_units, val_units, tc);
  EXPECT_EQ(r.history.steps, 100u);
  EXPECT_EQ(weights_hash(r.model.base), before);
  EXPECT_NE(adapter_hash(r.model), adapters_before);
}

TEST(Train, NothingTrainableLeavesWeightsUnchanged) {
  const ModelConfig cfg = small_config();
  const ModelWeights base = init_model(cfg, 1);
  const auto samples = generate_dataset(12, 3);
  const TrainResult r = train(attach_lora(base, {}, 0), caption_units(pointers(samples, 0, 8)),
                              caption_units(pointers(samples, 8, 12)), TrainConfig{});
  EXPECT_EQ(weights_hash(r.model.base), weights_hash(base));
  EXPECT_EQ(r.history.steps, 0u);
  EXPECT_TRUE(r.history.train_loss.empty());
}

TEST(Train, RejectsEmptySplitsAndBadConfig) {
  const Model m{init_model(small_config(), 1), {}};
  const auto samples = generate_dataset(10, 3);
  const auto units = caption_units(pointers(samples, 0, 5));
  EXPECT_THROW(train(m, {}, units, TrainConfig{}), InvalidArgument);
  EXPECT_THROW(train(m, units, {}, TrainConfig{}), InvalidArgument);
  TrainConfig bad;
  bad.learning_rate = 0;
  EXPECT_THROW(train(m, units, units, bad), InvalidArgument);
}

TEST(Train, NonFiniteLossNamesTheStep) {
  Model m{init_model(small_config(), 1), {}};
  m.base.set_trainable(true);
  m.base.output_head[0] = NAN;
  const auto samples = generate_dataset(10, 3);
  const auto units = caption_units(pointers(samples, 0, 5));
  try {
    train(m, units, units, TrainConfig{});
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos) << e.what();
  }
}

TEST(Train, OverfitsTenUnits) {
  const ModelConfig cfg;
  Model m{init_model(cfg, 7), {}};
  m.base.set_trainable(true);
  const auto samples = generate_dataset(30, 5);
  std::vector<const Sample*> single;
  for (const auto& s : samples) {
    if (s.objects.size() == 1 && single.size() < 10) single.push_back(&s);
  }
  ASSERT_EQ(single.size(), 10u);
  const auto units = caption_units(single);
  TrainConfig tc;
  tc.epochs = 50;
  tc.batch_size = 2;
  tc.patience = 50;
  const TrainResult r = train(m, units, units, tc);
  EXPECT_NEAR(r.history.initial_val_loss, std::log(33.0), 0.05);
  EXPECT_LT(r.history.train_loss.back(), 0.5);
  EXPECT_LT(r.history.best_val_loss, 0.5);
  EXPECT_LT(r.history.train_loss.back(), r.history.train_loss.front());
}

TEST(Train, DeterministicPerSeed) {
  const ModelConfig cfg = small_config(2);
  const auto samples = generate_dataset(16, 5);
  const auto tr = caption_units(pointers(samples, 0, 10));
  const auto va = caption_units(pointers(samples, 10, 16));
  TrainConfig tc;
  tc.epochs = 2;
  const auto a = train(attach_lora(init_model(cfg, 1), {0}, 3), tr, va, tc);
  const auto b = train(attach_lora(init_model(cfg, 1), {0}, 3), tr, va, tc);
  EXPECT_EQ(a.history.train_loss, b.history.train_loss);
  EXPECT_EQ(a.history.val_loss, b.history.val_loss);
  EXPECT_EQ(adapter_hash(a.model), adapter_hash(b.model));
}

TEST(SetupSuite, LayerSelectionsAndMetadata) {
  const ModelConfig cfg = small_config(8);
  const ModelWeights base = init_model(cfg, 2);
  HiMatrix hi{8, 2, {0.5, 0.5, 0.1, 0.2, 0.9, 0.8, 0.3, 0.3, 0.05, 0.05, 0.6, 0.7, 0.4, 0.4, 0.2, 0.25}, 1};
  const auto samples = generate_dataset(12, 3);
  const auto tr = caption_units(pointers(samples, 0, 8));
  const auto va = caption_units(pointers(samples, 8, 12));
  TrainConfig tc;
  tc.epochs = 1;
  tc.seed = 4;
  const auto suite = run_setup_suite(base, hi, 2, tr, va, tc);
  ASSERT_EQ(suite.size(), 5u);
  EXPECT_EQ(suite[0].name, "original");
  EXPECT_FALSE(suite[0].trained);
  EXPECT_TRUE(suite[0].model.adapters.empty());
  EXPECT_EQ(suite[0].params.trainable, 0u);
  EXPECT_EQ(suite[1].layers, rank_layers(hi, 2, LayerStrategy::top));
  EXPECT_EQ(suite[1].layers, (std::vector<std::size_t>{2, 5}));
  EXPECT_EQ(suite[2].layers, (std::vector<std::size_t>{1, 4}));
  EXPECT_EQ(suite[3].layers, rank_layers(hi, 2, LayerStrategy::random_excluding, 4));
  EXPECT_EQ(suite[4].layers.size(), 8u);
  std::set<std::size_t> top(suite[1].layers.begin(), suite[1].layers.end());
  std::set<std::size_t> bottom(suite[2].layers.begin(), suite[2].layers.end());
  for (auto l : suite[2].layers) EXPECT_FALSE(top.count(l));
  for (auto l : suite[3].layers) EXPECT_FALSE(top.count(l) || bottom.count(l));
  for (const auto& s : suite) {
    EXPECT_EQ(s.params.trainable, s.layers.size() * 3 * 8 * (16 + 16)) << s.name;
    EXPECT_EQ(weights_hash(s.model.base), weights_hash(base)) << s.name;
    const auto meta = setup_metadata(s);
    EXPECT_EQ(meta.at("layers").get<std::vector<std::size_t>>(), s.layers);
  }
}

TEST(Checkpoint, AdaptedModelRoundTrip) {
  const auto dir = hiprobe::testing::temp_dir("adapter_ckpt");
  Model m = attach_lora(init_model(small_config(), 1), {0, 2}, 3);
  for (auto& v : m.adapters[4].b.data()) v = 0.5;
  save_model(m, dir / "m.bin");
  const Model back = load_model(dir / "m.bin");
  ASSERT_EQ(back.adapters.size(), 6u);
  EXPECT_EQ(adapter_hash(back), adapter_hash(m));
  EXPECT_EQ(weights_hash(back.base), weights_hash(m.base));
  EXPECT_EQ(back.adapters[4].layer, 2u);
  EXPECT_EQ(back.adapters[4].target, Projection::key);
}
