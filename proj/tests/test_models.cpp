#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "cta/datagen.hpp"
#include "cta/taskmodels.hpp"
#include "cta/training.hpp"
#include "test_util.hpp"

using namespace cta;
using namespace cta::models;

TEST(Datagen, SameSpecAndIndexIsBitIdentical) {
  data::SceneSpec spec;
  spec.rng_seed = 7;
  const auto a = data::generate_sample(spec, 0);
  const auto b = data::generate_sample(spec, 0);
  EXPECT_EQ(a.image.vec(), b.image.vec());
  EXPECT_EQ(a.mask, b.mask);
  EXPECT_EQ(a.boxes, b.boxes);
  EXPECT_EQ(a.class_label, b.class_label);
}

TEST(Datagen, InvariantsHoldAcrossIndices) {
  data::SceneSpec spec;
  for (int i = 0; i < 100; ++i) {
    const auto s = data::generate_sample(spec, i);
    EXPECT_EQ(data::check_invariants(s, spec.num_classes), "") << "index " << i;
    for (const auto& b : s.boxes) {
      int count = 0;
      for (auto m : s.mask) count += m == b.class_id + 1;
      EXPECT_GT(count, 0);
    }
  }
}

TEST(Datagen, SingleShapeLabelsItsBox) {
  data::SceneSpec spec;
  spec.min_shapes = spec.max_shapes = 1;
  for (int i = 0; i < 20; ++i) {
    const auto s = data::generate_sample(spec, i);
    ASSERT_EQ(s.boxes.size(), 1u);
    EXPECT_EQ(s.class_label, s.boxes[0].class_id);
  }
}

TEST(Datagen, ValidationNamesTheField) {
  data::SceneSpec spec;
  spec.contrast_min = 0.5;
  try {
    spec.validate();
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("contrast"), std::string::npos);
  }
}

TEST(Datagen, DatasetCountsRoundTripAndDeterminism) {
  const auto dir = std::filesystem::temp_directory_path() / "cta_test_datagen";
  std::filesystem::remove_all(dir);
  data::SceneSpec spec;
  spec.image_size = 32;
  const auto manifest = data::generate_dataset(spec, 256, 64, dir / "a");
  EXPECT_EQ(manifest.records.size(), 320u);
  EXPECT_EQ(std::count_if(manifest.records.begin(), manifest.records.end(),
                          [](const auto& r) { return r.split == "train"; }),
            256);
  data::generate_dataset(spec, 256, 64, dir / "b");
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  EXPECT_EQ(slurp(dir / "a" / "manifest.jsonl"), slurp(dir / "b" / "manifest.jsonl"));

  data::generate_dataset(spec, 1, 1, dir / "tiny");
  const auto ds = data::load_dataset(dir / "tiny");
  ASSERT_EQ(ds.train.size(), 1u);
  ASSERT_EQ(ds.test.size(), 1u);
  const auto fresh = data::generate_sample(spec, 1);
  EXPECT_EQ(ds.test[0].boxes, fresh.boxes);
  EXPECT_EQ(ds.test[0].mask, fresh.mask);
  EXPECT_EQ(ds.test[0].class_label, fresh.class_label);
  for (std::size_t i = 0; i < fresh.image.size(); ++i) {
    EXPECT_LE(std::abs(ds.test[0].image[i] - fresh.image[i]), 1.0f / 255.0f);
  }
  EXPECT_EQ(data::check_invariants(ds.test[0], spec.num_classes), "");
  std::filesystem::remove_all(dir);
}

TEST(Score, ClassifierTakesArgmaxLogit) {
  const Tensor<float> logits({1, 4, 1, 1}, std::vector<float>{2.0f, 5.0f, 1.0f, 0.5f});
  const auto s = task_scalar_score(Task::cls, logits);
  EXPECT_EQ(s.value, 5.0);
  EXPECT_EQ(s.class_id, 1);
}

TEST(Score, SegmenterSumsArgmaxLogits) {
  Tensor<float> logits({1, 3, 8, 8}, 0.0f);
  for (int p = 0; p < 64; ++p) logits[(p % 3) * 64 + p] = 1.0f;
  EXPECT_EQ(task_scalar_score(Task::seg, logits).value, 64.0);
}

TEST(Score, DetectorFallsBackToMaxObjectnessCell) {
  Rng rng(3);
  Tensor<float> out({1, 5 + 3, 4, 4});
  for (auto& v : out.vec()) v = static_cast<float>(rng.normal());
  for (int cell = 0; cell < 16; ++cell) out[cell] = -5.0f - static_cast<float>(cell);
  out[6] = -3.0f;  // highest objectness, still below tau
  const double v = task_scalar_score(Task::det, out).value;
  // Other cells do not contribute.
  Tensor<float> other = out;
  for (int ch = 5; ch < 8; ++ch) {
    for (int cell = 0; cell < 16; ++cell) {
      if (cell != 6) other[ch * 16 + cell] += 7.0f;
    }
  }
  EXPECT_EQ(task_scalar_score(Task::det, other).value, v);
  for (int ch = 5; ch < 8; ++ch) other[ch * 16 + 6] += 1.0f;
  EXPECT_NE(task_scalar_score(Task::det, other).value, v);
}

TEST(Decode, ArgmaxAndTieBreaks) {
  EXPECT_EQ(predict_class(Tensor<float>({1, 2, 1, 1}, std::vector<float>{0.1f, 0.9f})), 1);
  const Tensor<float> tied({1, 3, 2, 2}, 0.5f);
  for (auto v : predict_mask(tied)) EXPECT_EQ(v, 0);
}

TEST(Decode, NmsKeepsHigherConfidence) {
  const Box b{0, 0, 0, 10, 10};
  const auto kept = nms({{b, 0.8f}, {b, 0.9f}}, 0.45);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].confidence, 0.9f);
}

TEST(Models, FeaturesMatchTapAndArePure) {
  for (auto task : {Task::cls, Task::det, Task::seg}) {
    auto m = test::random_model(task, 4);
    const auto x = test::random_images(2, 32, 8);
    const auto a = m->forward(x);
    const auto b = m->forward(x);
    const auto tap = m->tap(32, 32);
    EXPECT_EQ(a.features.c(), tap.channels);
    EXPECT_EQ(a.features.h(), tap.height);
    EXPECT_EQ(a.features.w(), tap.width);
    EXPECT_EQ(a.features.vec(), b.features.vec());
    EXPECT_EQ(a.outputs.vec(), b.outputs.vec());
    for (int n = 0; n < 2; ++n) {
      const auto single = m->forward(x.slice(n, 1));
      const auto fs = a.features.sample(n);
      for (std::size_t i = 0; i < fs.size(); ++i) EXPECT_NEAR(single.features[i], fs[i], 1e-5f);
    }
  }
}

TEST(Models, ShapeMismatchThrows) {
  auto m = test::random_model(Task::cls, 4);
  EXPECT_THROW(m->forward(Tensor<float>({1, 3, 20, 20})), std::invalid_argument);
}

TEST(Training, ZeroEpochsRejected) {
  data::Dataset ds;
  TrainOptions opt;
  opt.epochs = 0;
  try {
    train_classifier(ds, opt);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("epochs must be"), std::string::npos);
  }
}

TEST(Training, SameSeedSameWeights) {
  data::SceneSpec spec;
  spec.image_size = 32;
  data::Dataset ds{spec, {}, {}};
  for (int i = 0; i < 16; ++i) ds.train.push_back(data::generate_sample(spec, i));
  for (int i = 16; i < 20; ++i) ds.test.push_back(data::generate_sample(spec, i));
  TrainOptions opt;
  opt.epochs = 1;
  opt.batch_size = 8;
  opt.widths = {4, 6, 8, 8};
  opt.enforce_gate = false;
  const auto a = train_classifier(ds, opt);
  const auto b = train_classifier(ds, opt);
  EXPECT_EQ(a.model->weights_hash(), b.model->weights_hash());
}
