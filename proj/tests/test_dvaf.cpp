#include <cmath>

#include "doctest.h"
#include "dvaf/dvaf.hpp"
#include "generator/decoder.hpp"
#include "numcore/grad_check.hpp"
#include "support.hpp"

using namespace dast;
using namespace dast::nc;

namespace {

struct Fixture {
  Rng rng{21};
  stage1::DastBank bank = stage1::DastBank::init(6, 1, rng);
  dvaf::FusionParams fusion = dvaf::FusionParams::init(6, 10, rng);
};

}  // namespace

TEST_SUITE("dvaf") {

TEST_CASE("attention pool of identical tokens returns that token") {
  Rng rng(1);
  Tensor tok = Tensor::zeros({kNumDiseases, 5});
  for (std::size_t d = 0; d < kNumDiseases; ++d)
    for (std::size_t c = 0; c < 5; ++c) tok.at(d, c) = 0.1 * static_cast<double>(c) - 0.2;
  Tape tape;
  auto p = dvaf::attention_pool(tape.constant(tok), tape.constant(normal_tensor({1, 5}, 3.0, rng, false))).value();
  for (std::size_t c = 0; c < 5; ++c) CHECK(std::abs(p.data[c] - tok.at(0, c)) < 1e-15);
}

TEST_CASE("orthogonal pool query weights every token equally") {
  Rng rng(2);
  Tensor tok = normal_tensor({kNumDiseases, 4}, 1.0, rng, false);
  for (std::size_t d = 0; d < kNumDiseases; ++d) tok.at(d, 0) = 0.0;
  Tape tape;
  auto p = dvaf::attention_pool(tape.constant(tok), tape.constant(Tensor::row({1, 0, 0, 0}))).value();
  for (std::size_t c = 0; c < 4; ++c) {
    double mean = 0.0;
    for (std::size_t d = 0; d < kNumDiseases; ++d) mean += tok.at(d, c) / kNumDiseases;
    CHECK(std::abs(p.data[c] - mean) < 1e-12);
  }
}

TEST_CASE("cascade matches a step-by-step oracle") {
  Fixture fx;
  fx.fusion.self_gamma = normal_tensor({1, 6}, 1.0, fx.rng);
  fx.fusion.self_beta = normal_tensor({1, 6}, 1.0, fx.rng);
  fx.fusion.pool_query = normal_tensor({1, 6}, 1.0, fx.rng);
  Tensor z = normal_tensor({9, 6}, 1.0, fx.rng, false);
  Tape tape;
  Bindings bind(tape);
  auto p = dvaf::dvaf_pool(bind, fx.bank, tape.constant(z), fx.fusion).value();

  // cross-attention + norm
  const auto cross_att = test::attention_oracle(fx.bank.tokens, z, z);
  Tensor cross = Tensor::zeros({kNumDiseases, 6});
  for (std::size_t d = 0; d < kNumDiseases; ++d) {
    std::vector<double> row(6);
    for (std::size_t c = 0; c < 6; ++c) row[c] = fx.bank.tokens.at(d, c) + cross_att[d * 6 + c];
    auto ln = test::layer_norm_oracle(row, fx.bank.norm_gamma[0].data, fx.bank.norm_beta[0].data);
    for (std::size_t c = 0; c < 6; ++c) cross.at(d, c) = ln[c];
  }
  // self-attention + norm
  const auto self_att = test::attention_oracle(cross, cross, cross);
  Tensor self = Tensor::zeros({kNumDiseases, 6});
  for (std::size_t d = 0; d < kNumDiseases; ++d) {
    std::vector<double> row(6);
    for (std::size_t c = 0; c < 6; ++c) row[c] = cross.at(d, c) + self_att[d * 6 + c];
    auto ln = test::layer_norm_oracle(row, fx.fusion.self_gamma.data, fx.fusion.self_beta.data);
    for (std::size_t c = 0; c < 6; ++c) self.at(d, c) = ln[c];
  }
  const auto pooled = test::attention_oracle(fx.fusion.pool_query, self, self);
  for (std::size_t c = 0; c < 6; ++c) CHECK(std::abs(p.data[c] - pooled[c]) < 1e-10);
}

TEST_CASE("gate selects either input") {
  Fixture fx;
  Tensor p = normal_tensor({1, 6}, 1.0, fx.rng, false), zb = normal_tensor({1, 6}, 1.0, fx.rng, false);
  Tape tape;
  Bindings bind(tape);
  fx.fusion.w_gate = Tensor::zeros({6, 12}, true);
  for (std::size_t i = 0; i < 6; ++i) fx.fusion.w_gate.at(i, i) = 1.0;
  CHECK(dvaf::gate_fuse(bind, tape.constant(p), tape.constant(zb), fx.fusion).value().data == p.data);
  Tape tape2;
  Bindings bind2(tape2);
  fx.fusion.w_gate = Tensor::zeros({6, 12}, true);
  for (std::size_t i = 0; i < 6; ++i) fx.fusion.w_gate.at(i, 6 + i) = 1.0;
  CHECK(dvaf::gate_fuse(bind2, tape2.constant(p), tape2.constant(zb), fx.fusion).value().data == zb.data);
}

TEST_CASE("gate matches block-matrix oracle in both modes") {
  Fixture fx;
  fx.fusion.w_gate = normal_tensor({6, 12}, 1.0, fx.rng);
  Tensor p = normal_tensor({1, 6}, 1.0, fx.rng, false), zb = normal_tensor({1, 6}, 1.0, fx.rng, false);
  std::vector<double> mixed(6, 0.0);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) mixed[i] += fx.fusion.w_gate.at(i, j) * p.data[j] + fx.fusion.w_gate.at(i, 6 + j) * zb.data[j];
  Tape tape;
  Bindings bind(tape);
  auto lin = dvaf::gate_fuse(bind, tape.constant(p), tape.constant(zb), fx.fusion, dvaf::GateMode::linear).value();
  auto sig = dvaf::gate_fuse(bind, tape.constant(p), tape.constant(zb), fx.fusion, dvaf::GateMode::sigmoid).value();
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(std::abs(lin.data[i] - mixed[i]) < 1e-12);
    const double g = 1.0 / (1.0 + std::exp(-mixed[i]));
    CHECK(std::abs(sig.data[i] - (g * p.data[i] + (1 - g) * zb.data[i])) < 1e-12);
  }
}

TEST_CASE("visual sequence construction") {
  Tape tape;
  Rng rng(3);
  Tensor z = normal_tensor({2, 4}, 1.0, rng, false), f = normal_tensor({1, 4}, 1.0, rng, false);
  auto v = dvaf::build_visual_sequence(tape.constant(z), tape.constant(f)).value();
  CHECK(v.shape == Shape{3, 4});
  CHECK(test::row_of(v, 0) == test::row_of(z, 0));
  CHECK(test::row_of(v, 1) == test::row_of(z, 1));
  CHECK(test::row_of(v, 2) == f.data);
  auto v0 = dvaf::build_visual_sequence(tape.constant(z), tape.constant(Tensor::zeros({1, 4}))).value();
  CHECK(test::row_of(v0, 2) == std::vector<double>(4, 0.0));
  CHECK(std::vector<double>(v0.data.begin(), v0.data.begin() + 8) == z.data);
  CHECK_THROWS_AS(dvaf::build_visual_sequence(tape.constant(z), tape.constant(Tensor::zeros({1, 3}))), ShapeError);
}

TEST_CASE("projection normalises rows") {
  Rng rng(4);
  auto fusion = dvaf::FusionParams::init(5, 5, rng);
  fusion.w_proj = Tensor::identity(5);
  Tensor v = normal_tensor({3, 5}, 2.0, rng, false);
  Tape tape;
  Bindings bind(tape);
  auto out = dvaf::project(bind, tape.constant(v), fusion).value();
  for (std::size_t r = 0; r < 3; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t c = 0; c < 5; ++c) mean += out.at(r, c) / 5;
    for (std::size_t c = 0; c < 5; ++c) var += (out.at(r, c) - mean) * (out.at(r, c) - mean) / 5;
    CHECK(std::abs(mean) < 1e-12);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }
  fusion.proj_beta = Tensor::row({1, 2, 3, 4, 5});
  Tape tape2;
  Bindings bind2(tape2);
  auto zero = dvaf::project(bind2, tape2.constant(Tensor::zeros({2, 5})), fusion).value();
  for (std::size_t r = 0; r < 2; ++r) CHECK(test::row_of(zero, r) == fusion.proj_beta.data);
}

TEST_CASE("prefix row counts per fusion mode") {
  Fixture fx;
  Tensor z = normal_tensor({4, 6}, 1.0, fx.rng, false);
  auto rows = [&](dvaf::FusionMode m) {
    Tape tape;
    Bindings bind(tape);
    auto out = dvaf::visual_prefix(bind, fx.bank, tape.constant(z), fx.fusion, m, dvaf::GateMode::linear);
    CHECK(out.cols() == 10);
    return out.rows();
  };
  CHECK(rows(dvaf::FusionMode::none) == 4);
  CHECK(rows(dvaf::FusionMode::dvaf) == 5);
  CHECK(rows(dvaf::FusionMode::mean) == 5);
  CHECK(rows(dvaf::FusionMode::concat) == 4 + kNumDiseases);
  CHECK_THROWS(dvaf::parse_fusion_mode("sum"));
  CHECK_THROWS(dvaf::parse_gate_mode("relu"));
  CHECK(dvaf::parse_fusion_mode(dvaf::to_string(dvaf::FusionMode::concat)) == dvaf::FusionMode::concat);
}

TEST_CASE("gradient reaches the projection and not a frozen encoder") {
  Rng rng(5);
  auto enc = encoder::EncoderParams::init({4, 6, 1}, rng);
  Fixture fx;
  auto img = test::random_image(8, 8, 6);
  std::map<std::string, bool> mask;
  auto visit = [&](const encoder::ParamVisitor& fn) {
    enc.visit(fn);
    fx.bank.visit(fn);
    fx.fusion.visit(fn);
  };
  visit([&](const std::string& name, Tensor&) { mask[name] = name.rfind("proj.", 0) == 0; });
  gen::apply_freeze(visit, mask);
  Tape tape;
  Bindings bind(tape);
  auto z = encoder::encode(bind, img, enc);
  auto out = dvaf::visual_prefix(bind, fx.bank, z, fx.fusion, dvaf::FusionMode::dvaf, dvaf::GateMode::linear);
  Tensor w = normal_tensor({out.rows(), out.cols()}, 1.0, rng, false);
  tape.backward(sum(mul(out, tape.constant(w))));
  double proj_norm = 0.0;
  for (double g : fx.fusion.w_proj.grad) proj_norm += g * g;
  CHECK(proj_norm > 0.0);
  visit([&](const std::string& name, Tensor& t) {
    if (name.rfind("proj.", 0) != 0) CHECK_MESSAGE(!t.has_grad(), name);
  });
}

TEST_CASE("grad check through the full prefix path") {
  Fixture fx;
  fx.fusion.pool_query = normal_tensor({1, 6}, 0.5, fx.rng);
  fx.fusion.w_proj = normal_tensor({6, 10}, 0.5, fx.rng);
  Tensor z = normal_tensor({5, 6}, 1.0, fx.rng);
  std::vector<Tensor*> params{&z};
  fx.fusion.visit([&](const std::string&, Tensor& t) { params.push_back(&t); });
  fx.bank.visit([&](const std::string&, Tensor& t) { params.push_back(&t); });
  Tensor w = normal_tensor({6, 10}, 1.0, fx.rng, false);
  for (auto gate : {dvaf::GateMode::linear, dvaf::GateMode::sigmoid}) {
    auto rep = grad_check(
        [&](Tape& tape) {
          Bindings bind(tape);
          auto out = dvaf::visual_prefix(bind, fx.bank, bind(z), fx.fusion, dvaf::FusionMode::dvaf, gate);
          return sum(mul(out, tape.constant(w)));
        },
        params);
    CHECK(rep.max_rel_error < 1e-4);
  }
}

}  // TEST_SUITE
