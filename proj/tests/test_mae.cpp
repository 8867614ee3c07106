#include <doctest.h>

#include <cmath>
#include <utility>

#include "fedmae/error.hpp"
#include "fedmae/grad_check.hpp"
#include "fedmae/mae.hpp"
#include "helpers.hpp"

using namespace fedmae;
using testing::random_patches;
using testing::tiny_dims;
using testing::tiny_geometry;

namespace {

void zero_reference(MaeModel& m) {
  for (auto& [name, p] : m.params) {
    const bool bias = name.size() > 2 && name.substr(name.size() - 2) == ".b";
    const bool shift = name.size() > 2 && name.substr(name.size() - 2) == ".s";
    if (bias || shift || name == "dec.mask_token" || name == "enc.pos" || name == "dec.pos")
      p.value.fill(0.0);
  }
}

void perturb(MaeModel& m, double scale, std::uint64_t seed) {
  RngStream rng(seed);
  for (auto& [name, p] : m.params)
    for (auto& v : p.value.values()) v += scale * rng.normal();
}

}  // namespace

TEST_CASE("mae parameter names and shapes") {
  const MaeModel m = init_mae(tiny_geometry(), tiny_dims(), RngStream(1));
  CHECK(m.params.value("enc.embed.w").shape() == Shape{8, 8});
  CHECK(m.params.value("enc.pos").shape() == Shape{4, 8});
  CHECK(m.params.value("dec.proj.w").shape() == Shape{8, 4});
  CHECK(m.params.value("dec.mask_token").shape() == Shape{4});
  CHECK(m.params.value("dec.head.w").shape() == Shape{4, 8});
  CHECK(m.params.contains("enc.block.0.attn.q.w"));
  CHECK(m.params.contains("dec.block.0.mlp.fc2.b"));
  CHECK_FALSE(m.params.contains("enc.block.1.ln1.g"));
  for (double v : m.params.value("enc.pos").values()) CHECK(std::abs(v) <= 0.04);
}

TEST_CASE("initialization is per-component") {
  MaeDims d3 = tiny_dims();
  d3.depth = 3;
  const MaeModel one = init_mae(tiny_geometry(), tiny_dims(), RngStream(9));
  const MaeModel three = init_mae(tiny_geometry(), d3, RngStream(9));
  for (const auto& [name, p] : one.params) CHECK(three.params.value(name) == p.value);
  CHECK_FALSE(three.params.value("enc.block.1.attn.q.w") == three.params.value("enc.block.0.attn.q.w"));
  const MaeModel other = init_mae(tiny_geometry(), tiny_dims(), RngStream(10));
  CHECK_FALSE(other.params == one.params);
}

TEST_CASE("dims validation") {
  MaeDims d = tiny_dims();
  d.heads = 3;
  CHECK_THROWS_AS(d.validate(), ValidationError);
  d = tiny_dims();
  d.depth = 0;
  CHECK_THROWS_AS(d.validate(), ValidationError);
}

TEST_CASE("encode, decode and reconstruct shapes") {
  const MaeModel m = init_mae(tiny_geometry(), tiny_dims(), RngStream(2));
  const PatchSequence x = random_patches(tiny_geometry(), 3, 3);
  RngStream rng(4);
  const MaskPlan plan = sample_mask(3, 4, 0.5, MaskSemantics::FixedCount, rng);
  const Tensor z = encode_visible(m, x, plan);
  CHECK(z.shape() == Shape{3, 2, 8});
  const PatchSequence r = decode_full(m, z, plan);
  CHECK(r.data.shape() == Shape{3, 4, 8});
  CHECK(reconstruct(m, x, plan).data == r.data);
  const Tensor wrong({3, 3, 8});
  CHECK_THROWS_AS(decode_full(m, wrong, plan), ValidationError);
  RngStream rb(5);
  const MaskPlan bern = sample_mask(3, 4, 0.5, MaskSemantics::Bernoulli, rb);
  CHECK_THROWS_AS(encode_visible(m, x, bern), ValidationError);
}

TEST_CASE("the encoder never sees masked patches") {
  const MaeModel m = init_mae(tiny_geometry(), tiny_dims(), RngStream(2));
  PatchSequence x = random_patches(tiny_geometry(), 2, 3);
  const MaskPlan plan = MaskPlan::from_visible(4, {{1, 3}, {0, 2}});
  const Tensor z0 = encode_visible(m, x, plan);
  const PatchSequence r0 = reconstruct(m, x, plan);
  for (std::size_t i = 0; i < 2; ++i)
    for (auto t : plan.masked(i))
      for (std::size_t k = 0; k < 8; ++k) x.data[(i * 4 + t) * 8 + k] += 5.0;
  CHECK(encode_visible(m, x, plan) == z0);
  CHECK(reconstruct(m, x, plan).data == r0.data);
}

TEST_CASE("masked reconstruction loss by hand") {
  const auto geo = tiny_geometry();
  PatchSequence target = random_patches(geo, 2, 1);
  PatchSequence recon = random_patches(geo, 2, 2);
  const MaskPlan plan = MaskPlan::from_visible(4, {{0, 1, 2}, {0, 1, 2}});
  double sum = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t k = 0; k < 8; ++k) {
      const std::size_t idx = (i * 4 + 3) * 8 + k;
      const double e = recon.data[idx] - target.data[idx];
      sum += e * e;
      ++count;
    }
  CHECK(masked_recon_loss(recon, target, plan, LossMode::MaskedOnly) ==
        doctest::Approx(0.5 * sum / count).epsilon(1e-14));
  const MaskPlan full = MaskPlan::all_visible(2, 4);
  CHECK_THROWS_AS(masked_recon_loss(recon, target, full, LossMode::MaskedOnly), ValidationError);
  CHECK(masked_recon_loss(recon, recon, full, LossMode::All) == 0.0);
}

TEST_CASE("full mae loss passes the gradient check") {
  for (auto mode : {LossMode::MaskedOnly, LossMode::All}) {
    MaeModel m = init_mae(tiny_geometry(), tiny_dims(), RngStream(3));
    perturb(m, 0.05, 4);
    const PatchSequence x = random_patches(tiny_geometry(), 2, 5);
    const MaskPlan plan = MaskPlan::from_visible(4, {{0, 3}, {1, 2}});
    auto fn = [&](ParamStore& ps) {
      std::swap(m.params, ps);
      const double loss = mae_loss_and_grad(m, x, plan, mode);
      std::swap(m.params, ps);
      return loss;
    };
    ParamStore ps = m.params;
    const auto report = grad_check(fn, ps, 1e-4);
    CHECK(report.passed);
    CHECK(report.max_rel_error <= 1e-4);
  }
}

TEST_CASE("two-block encoder passes the gradient check") {
  MaeDims d = tiny_dims();
  d.depth = 2;
  MaeModel m = init_mae(tiny_geometry(), d, RngStream(6));
  perturb(m, 0.05, 7);
  const PatchSequence x = random_patches(tiny_geometry(), 2, 8);
  const MaskPlan plan = MaskPlan::from_visible(4, {{0, 1}, {2, 3}});
  auto fn = [&](ParamStore& ps) {
    std::swap(m.params, ps);
    const double loss = mae_loss_and_grad(m, x, plan, LossMode::MaskedOnly);
    std::swap(m.params, ps);
    return loss;
  };
  ParamStore ps = m.params;
  CHECK(grad_check(fn, ps, 1e-4).passed);
}

TEST_CASE("zero reference: encode(0) = 0 and decode(0) = 0") {
  MaeModel m = init_mae(tiny_geometry(), tiny_dims(), RngStream(11));
  zero_reference(m);
  PatchSequence zero = random_patches(tiny_geometry(), 2, 1);
  zero.data.fill(0.0);
  RngStream rng(2);
  const MaskPlan plan = sample_mask(2, 4, 0.5, MaskSemantics::FixedCount, rng);
  const Tensor z = encode_visible(m, zero, plan);
  for (double v : z.values()) REQUIRE(v == 0.0);
  const PatchSequence r = decode_full(m, z, plan);
  for (double v : r.data.values()) REQUIRE(v == 0.0);
}

TEST_CASE("training reduces the loss on a fixed batch") {
  MaeModel m = init_mae(tiny_geometry(), tiny_dims(), RngStream(12));
  AdamWConfig cfg;
  cfg.lr = 3e-3;
  AdamW opt(m.params, cfg);
  const PatchSequence x = random_patches(tiny_geometry(), 8, 13);
  const MaskPlan plan = MaskPlan::from_visible(4, std::vector<std::vector<std::size_t>>(8, {0, 1}));
  const double before = masked_recon_loss(reconstruct(m, x, plan), x, plan, LossMode::MaskedOnly);
  for (int s = 0; s < 200; ++s) train_step(m, opt, x, 0.5, RngStream(14).derive("step", s));
  const double after = masked_recon_loss(reconstruct(m, x, plan), x, plan, LossMode::MaskedOnly);
  CHECK(after < 0.5 * before);
  CHECK(opt.step_count() == 200);
}

TEST_CASE("non-finite loss is reported with its step and stream") {
  MaeModel m = init_mae(tiny_geometry(), tiny_dims(), RngStream(12));
  m.params.at("dec.head.b").value[0] = std::nan("");
  AdamW opt(m.params, AdamWConfig{});
  const PatchSequence x = random_patches(tiny_geometry(), 2, 13);
  try {
    train_step(m, opt, x, 0.5, RngStream(3).derive("batch", 7));
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("step 1") != std::string::npos);
    CHECK(msg.find("batch:7") != std::string::npos);
  }
}

TEST_CASE("feature interference of a linear surrogate is (x - x~) W") {
  MaeModel m = init_mae(tiny_geometry(), tiny_dims(), RngStream(15));
  // Residual branches off: each block is the identity.
  for (const char* n : {"enc.block.0.attn.o.w", "enc.block.0.attn.o.b", "enc.block.0.mlp.fc2.w",
                        "enc.block.0.mlp.fc2.b"})
    m.params.at(n).value.fill(0.0);
  const PatchSequence x = random_patches(tiny_geometry(), 3, 16);
  RngStream rng(17);
  const MaskPlan plan = sample_mask(3, 4, 0.5, MaskSemantics::FixedCount, rng);
  const Tensor dz = feature_interference(m, x, plan);
  const PatchSequence diff = [&] {
    PatchSequence d = x;
    const PatchSequence xt = apply_mask_zero(x, plan);
    for (std::size_t i = 0; i < d.data.size(); ++i) d.data[i] -= xt.data[i];
    return d;
  }();
  const Matrix expect = Matrix(diff.data.matrix()) * Matrix(m.params.value("enc.embed.w").matrix());
  CHECK((Matrix(dz.matrix()) - expect).cwiseAbs().maxCoeff() <= 1e-12);
}
