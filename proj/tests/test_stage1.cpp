#include <cmath>

#include "doctest.h"
#include "numcore/grad_check.hpp"
#include "stage1/stage1.hpp"
#include "support.hpp"

using namespace dast;
using namespace dast::nc;

namespace {

stage1::DastBank bank_with(std::size_t width, std::uint64_t seed) {
  Rng rng(seed);
  return stage1::DastBank::init(width, 1, rng);
}

}  // namespace

TEST_SUITE("stage1") {

TEST_CASE("single visual token is copied into every DAST") {
  auto bank = bank_with(4, 1);
  Tape tape;
  Bindings bind(tape);
  auto z = tape.constant(Tensor::row({0.3, -1.0, 2.0, 0.5}));
  auto attn = scaled_dot_attention(bind(bank.tokens), z, z);
  for (std::size_t d = 0; d < kNumDiseases; ++d)
    for (std::size_t c = 0; c < 4; ++c) CHECK(attn.output.value().at(d, c) == z.value().data[c]);
}

TEST_CASE("two identical visual tokens share the weight evenly") {
  auto bank = bank_with(3, 2);
  Tape tape;
  Bindings bind(tape);
  auto z = tape.constant(Tensor::matrix(2, 3, {1, 2, 3, 1, 2, 3}));
  auto attn = scaled_dot_attention(bind(bank.tokens), z, z);
  for (double w : attn.weights.value().data) CHECK(w == 0.5);
}

TEST_CASE("refinement matches explicit formula") {
  auto bank = bank_with(5, 3);
  Rng rng(4);
  bank.norm_gamma[0] = normal_tensor({1, 5}, 1.0, rng);
  bank.norm_beta[0] = normal_tensor({1, 5}, 1.0, rng);
  Tensor z = normal_tensor({6, 5}, 1.0, rng, false);
  Tape tape;
  Bindings bind(tape);
  auto out = stage1::refine_dasts(bind, bank, tape.constant(z)).value();
  const auto att = test::attention_oracle(bank.tokens, z, z);
  for (std::size_t d = 0; d < kNumDiseases; ++d) {
    std::vector<double> row(5);
    for (std::size_t c = 0; c < 5; ++c) row[c] = bank.tokens.at(d, c) + att[d * 5 + c];
    auto ln = test::layer_norm_oracle(row, bank.norm_gamma[0].data, bank.norm_beta[0].data);
    for (std::size_t c = 0; c < 5; ++c) CHECK(std::abs(out.at(d, c) - ln[c]) < 1e-12);
  }
}

TEST_CASE("classifier heads") {
  auto bank = bank_with(4, 5);
  bank.head_weight = Tensor::zeros({kNumDiseases, 4}, true);
  for (std::size_t d = 0; d < kNumDiseases; ++d) bank.head_bias.data[d] = 0.1 * static_cast<double>(d);
  Rng rng(6);
  Tensor refined = normal_tensor({kNumDiseases, 4}, 1.0, rng, false);
  {
    Tape tape;
    Bindings bind(tape);
    auto l = stage1::classify(bind, tape.constant(refined), bank).value();
    CHECK(l.shape == Shape{kNumDiseases, 1});
    for (std::size_t d = 0; d < kNumDiseases; ++d) CHECK(l.data[d] == bank.head_bias.data[d]);
  }
  // unit head equal to the refined token, zero bias → logit 1
  bank.head_bias = Tensor::zeros({kNumDiseases, 1}, true);
  Tensor unit = Tensor::zeros({kNumDiseases, 4});
  for (std::size_t d = 0; d < kNumDiseases; ++d) unit.at(d, d % 4) = 1.0;
  bank.head_weight = unit;
  {
    Tape tape;
    Bindings bind(tape);
    auto l = stage1::classify(bind, tape.constant(unit), bank).value();
    for (double v : l.data) CHECK(v == 1.0);
  }
  // zeroing other refined tokens leaves logit d alone
  bank.head_weight = normal_tensor({kNumDiseases, 4}, 1.0, rng);
  Tensor probe = refined;
  for (std::size_t j = 0; j < kNumDiseases; ++j)
    if (j != 3)
      for (std::size_t c = 0; c < 4; ++c) probe.at(j, c) = 0.0;
  Tape tape;
  Bindings bind(tape);
  auto full = stage1::classify(bind, tape.constant(refined), bank).value();
  auto only = stage1::classify(bind, tape.constant(probe), bank).value();
  CHECK(full.data[3] == only.data[3]);
}

TEST_CASE("classification loss closed forms") {
  Tape tape;
  LabelArray mixed{1, 0, 1, 0, 0, 0, 1, 1, 0, 0, 1, 0, 0, 1};
  auto zero = stage1::loss_cls(tape.constant(Tensor::zeros({kNumDiseases, 1})), mixed).value().data[0];
  CHECK(std::abs(zero - std::log(2.0)) < 1e-15);
  LabelArray ones;
  ones.fill(1);
  auto conf = stage1::loss_cls(tape.constant(Tensor::filled({kNumDiseases, 1}, 20.0)), ones).value().data[0];
  CHECK(conf < 1e-8);

  Rng rng(7);
  Tensor l = normal_tensor({kNumDiseases, 1}, 2.0, rng, false);
  double expect = 0.0;
  for (std::size_t d = 0; d < kNumDiseases; ++d) {
    const double p = 1.0 / (1.0 + std::exp(-l.data[d]));
    expect -= mixed[d] ? std::log(p) : std::log(1.0 - p);
  }
  expect /= kNumDiseases;
  CHECK(std::abs(stage1::loss_cls(tape.constant(l), mixed).value().data[0] - expect) < 1e-12);
}

TEST_CASE("hash text encoder") {
  stage1::HashTextEncoder enc(16);
  auto a = enc.encode("There is a pleural effusion.");
  CHECK(a == enc.encode("There is a pleural effusion."));
  auto close = [&](const std::vector<double>& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst < 1e-12;
  };
  CHECK(close(enc.encode("effusion. pleural a is There")));
  CHECK(a == enc.encode("THERE is  a pleural\teffusion."));
  double norm = 0.0;
  for (double v : a) norm += v * v;
  CHECK(std::abs(norm - 1.0) < 1e-12);
  CHECK(enc.encode("no effusion") != enc.encode("effusion"));
  CHECK_THROWS(enc.encode("   "));
}

TEST_CASE("contrastive loss closed forms") {
  Tape tape;
  Tensor one = Tensor::row({0.2, 0.9});
  CHECK(stage1::loss_ctl(tape.constant(one), Tensor::row({-1, 3}), 0.07).value().data[0] == doctest::Approx(0.0));

  Tensor pair = Tensor::matrix(2, 2, {1, 0, 0, 1});
  const double ctl = stage1::loss_ctl(tape.constant(pair), pair, 1.0).value().data[0];
  CHECK(std::abs(ctl - std::log1p(std::exp(-1.0))) < 1e-12);
  CHECK(std::abs(ctl - 0.3133) < 1e-4);

  Rng rng(8);
  Tensor v = normal_tensor({4, 6}, 1.0, rng, false), t = normal_tensor({4, 6}, 1.0, rng, false);
  Tensor v10 = v;
  for (auto& x : v10.data) x *= 10.0;
  CHECK(std::abs(stage1::loss_ctl(tape.constant(v), t, 0.07).value().data[0] -
                 stage1::loss_ctl(tape.constant(v10), t, 0.07).value().data[0]) < 1e-12);
  CHECK_THROWS(stage1::loss_ctl(tape.constant(v), t, 0.0));
  CHECK_THROWS_AS(stage1::loss_ctl(tape.constant(v), Tensor::zeros({3, 6}), 0.07), ShapeError);
}

TEST_CASE("total loss is the sum of its parts") {
  Rng rng(9);
  auto model = stage1::Stage1Model::init({4, 8, 1}, 1, rng);
  stage1::HashTextEncoder text(8);
  auto a = test::random_image(8, 8, 10, "a");
  a.report = "There is pulmonary edema.";
  a.labels[5] = 1;
  auto b = test::random_image(8, 8, 11, "b");
  b.report = "The chest is clear.";
  {
    Tape tape;
    Bindings bind(tape);
    const encoder::ImageSample* one[] = {&a};
    auto out = stage1::stage1_loss(bind, model, one, text, 0.07);
    CHECK(out.ctl.value().data[0] == doctest::Approx(0.0));
    CHECK(out.total.value().data[0] == out.cls.value().data[0]);
  }
  Tape tape;
  Bindings bind(tape);
  const encoder::ImageSample* two[] = {&a, &b};
  auto out = stage1::stage1_loss(bind, model, two, text, 0.07);
  CHECK(out.total.value().data[0] == out.cls.value().data[0] + out.ctl.value().data[0]);
  CHECK(out.logits.size() == 2);
  CHECK(std::abs(0.6931 + 0.3133 - 1.0064) < 1e-12);
}

TEST_CASE("grad check on the full stage-1 loss") {
  Rng rng(12);
  auto model = stage1::Stage1Model::init({4, 6, 1}, 1, rng);
  model.bank.tokens = normal_tensor({kNumDiseases, 6}, 0.5, rng);
  model.bank.head_weight = normal_tensor({kNumDiseases, 6}, 0.5, rng);
  model.encoder.patch_weight = normal_tensor({16, 6}, 0.3, rng);
  stage1::HashTextEncoder text(6);
  auto a = test::random_image(8, 8, 13, "a");
  a.report = "A lung nodule is seen.";
  a.labels[4] = 1;
  auto b = test::random_image(8, 8, 14, "b");
  b.report = "There is no pneumothorax.";
  std::vector<Tensor*> params;
  model.visit([&](const std::string&, Tensor& t) { params.push_back(&t); });
  const encoder::ImageSample* batch[] = {&a, &b};
  auto rep = grad_check(
      [&](Tape& tape) {
        Bindings bind(tape);
        return stage1::stage1_loss(bind, model, batch, text, 0.5).total;
      },
      params);
  CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("feature extraction agrees with the training graph") {
  Rng rng(15);
  auto model = stage1::Stage1Model::init({4, 8, 1}, 1, rng);
  auto img = test::random_image(8, 8, 16);
  auto f = stage1::extract_features(model, img);
  CHECK(f.z_bar.size() == 8);
  CHECK(f.logits.size() == kNumDiseases);
  Tape tape;
  Bindings bind(tape);
  auto z = encoder::encode(bind, img, model.encoder);
  auto l = stage1::classify(bind, stage1::refine_dasts(bind, model.bank, z), model.bank);
  CHECK(l.value().data == f.logits);
}

}  // TEST_SUITE
