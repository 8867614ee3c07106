#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "fedmae/cascade.hpp"
#include "fedmae/checkpoint.hpp"
#include "fedmae/error.hpp"
#include "helpers.hpp"

using namespace fedmae;
using testing::tiny_dims;
using testing::tiny_geometry;

namespace {

std::vector<MaeModel> make_sources(std::size_t n) {
  std::vector<MaeModel> s;
  for (std::size_t i = 0; i < n; ++i)
    s.push_back(init_mae(tiny_geometry(), tiny_dims(), RngStream(100 + i)));
  return s;
}

bool block_equals(const ParamStore& a, std::size_t ia, const ParamStore& b, std::size_t ib) {
  const std::string pa = "enc.block." + std::to_string(ia) + ".";
  const std::string pb = "enc.block." + std::to_string(ib) + ".";
  std::size_t n = 0;
  for (const auto& [name, p] : a) {
    if (name.rfind(pa, 0) != 0) continue;
    ++n;
    if (!(b.value(pb + name.substr(pa.size())) == p.value)) return false;
  }
  return n > 0;
}

CascadeSpec spec_of(std::size_t depth, std::size_t pre, std::uint64_t seed = 5) {
  CascadeSpec s;
  s.depth = depth;
  s.pretrained = pre;
  s.init_seed = seed;
  return s;
}

ImageBatch synth(std::size_t per_class, double noise, std::uint64_t seed) {
  SynthSpec s;
  s.per_class = per_class;
  s.noise = noise;
  s.height = 8;
  s.width = 8;
  RngStream rng(seed);
  return synth_dataset(s, rng);
}

}  // namespace

TEST_CASE("pretrained slots are bit-exact copies, later slots are fresh") {
  const auto sources = make_sources(3);
  const auto clf = cascade_assemble(sources, spec_of(4, 3), 4);
  const auto fresh = init_classifier(tiny_geometry(), [] {
    MaeDims d = tiny_dims();
    d.depth = 4;
    return d;
  }(), 4, RngStream(5));
  for (std::size_t i = 0; i < 3; ++i) CHECK(block_equals(clf.params, i, sources[i].params, 0));
  CHECK(block_equals(clf.params, 3, fresh.params, 3));
  CHECK(clf.params.value("enc.embed.w") == sources[0].params.value("enc.embed.w"));
  CHECK(clf.params.value("enc.pos") == sources[0].params.value("enc.pos"));
  CHECK(clf.params.value("head.w") == fresh.params.value("head.w"));
  CHECK(clf.dims.depth == 4);
}

TEST_CASE("P_pre = 0 gives a fresh classifier") {
  const auto sources = make_sources(2);
  MaeDims d = tiny_dims();
  d.depth = 5;
  const auto clf = cascade_assemble(sources, spec_of(5, 0), 3);
  CHECK(clf.params == init_classifier(tiny_geometry(), d, 3, RngStream(5)).params);
  // Fresh slots do not depend on how many slots were pretrained.
  const auto partial = cascade_assemble(sources, spec_of(5, 2), 3);
  for (std::size_t i = 2; i < 5; ++i) CHECK(block_equals(partial.params, i, clf.params, i));
}

TEST_CASE("source selection: explicit, replicate and shuffled") {
  const auto sources = make_sources(4);
  CascadeSpec s = spec_of(3, 3);
  s.parse_source("2, 0,3");
  CHECK(s.resolved_sources(4) == std::vector<std::size_t>{2, 0, 3});
  const auto clf = cascade_assemble(sources, s, 4);
  CHECK(block_equals(clf.params, 0, sources[2].params, 0));
  CHECK(block_equals(clf.params, 2, sources[3].params, 0));
  CHECK(clf.params.value("enc.embed.w") == sources[2].params.value("enc.embed.w"));

  CascadeSpec r = spec_of(3, 3);
  r.parse_source("replicate:1");
  const auto rep = cascade_assemble(sources, r, 4);
  for (std::size_t i = 0; i < 3; ++i) CHECK(block_equals(rep.params, i, sources[1].params, 0));

  CascadeSpec sh = spec_of(3, 3);
  sh.shuffle_order = true;
  std::set<std::vector<std::size_t>> orders;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    sh.order_seed = seed;
    const auto o = sh.resolved_sources(4);
    CHECK(o.size() == 3);
    CHECK(std::set<std::size_t>(o.begin(), o.end()).size() == 3);
    CHECK(o == sh.resolved_sources(4));
    orders.insert(o);
  }
  CHECK(orders.size() > 1);

  CHECK_THROWS_AS(spec_of(2, 3).validate(4), ValidationError);
  CHECK_THROWS_AS(spec_of(5, 5).validate(4), ValidationError);
  CascadeSpec bad = spec_of(2, 2);
  bad.parse_source("0,7");
  CHECK_THROWS_AS(bad.validate(4), ValidationError);
  CHECK_THROWS_AS(bad.parse_source("replicate:x"), ValidationError);
}

TEST_CASE("incompatible sources are rejected") {
  auto sources = make_sources(1);
  MaeDims other = tiny_dims();
  other.d_enc = 4;
  sources.push_back(init_mae(tiny_geometry(), other, RngStream(1)));
  CHECK_THROWS_AS(cascade_assemble(sources, spec_of(2, 2), 4), ValidationError);
  CHECK_THROWS_AS(cascade_assemble(sources, spec_of(1, 1), 1), ValidationError);
}

TEST_CASE("depth-1 multi-block mae equals its source") {
  const auto sources = make_sources(2);
  const MaeModel m = assemble_multiblock_mae(std::span(sources).first(1), 1);
  CHECK(m.params == sources[0].params);
  const MaeModel two = assemble_multiblock_mae(sources, 2);
  CHECK(block_equals(two.params, 1, sources[1].params, 0));
  CHECK(two.params.value("dec.head.w") == sources[0].params.value("dec.head.w"));
}

TEST_CASE("refinement with no data or no epochs is a no-op") {
  MaeModel m = assemble_multiblock_mae(make_sources(2), 2);
  const MaeModel before = m;
  TrainSpec t;
  t.epochs = 0;
  const auto data = testing::random_patches(tiny_geometry(), 8, 1);
  CHECK(server_refine(m, data, t, RngStream(1)).empty());
  t.epochs = 2;
  CHECK(server_refine(m, PatchSequence{}, t, RngStream(1)).empty());
  CHECK(m.params == before.params);
  t.batch_size = 4;
  t.mask_ratio = 0.5;
  const auto losses = server_refine(m, data, t, RngStream(1));
  CHECK(losses.size() == 2);
  CHECK_FALSE(m.params == before.params);
}

TEST_CASE("stratified subsample") {
  std::vector<int> labels;
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 20; ++i) labels.push_back(c);
  RngStream rng(1);
  const auto idx = stratified_subsample(labels, 3, 0.1, rng);
  CHECK(idx.size() == 6);
  CHECK(std::is_sorted(idx.begin(), idx.end()));
  std::vector<int> per(3, 0);
  for (auto i : idx) per[labels[i]]++;
  CHECK(per == std::vector<int>{2, 2, 2});
  RngStream r2(1);
  CHECK(stratified_subsample(labels, 3, 0.001, r2).size() == 3);
  RngStream r3(1);
  CHECK_THROWS_AS(stratified_subsample(labels, 4, 0.5, r3), ValidationError);
}

TEST_CASE("fine-tuning fits noise-free data") {
  const ImageBatch data = synth(8, 0.0, 3);
  const ImageGeometry geo{3, 8, 8, 4};
  const PatchSequence patches = patchify(data, 4);
  MaeDims d = tiny_dims();
  d.d_enc = 16;
  ViTClassifier clf = init_classifier(geo, d, 4, RngStream(2));
  TrainSpec t;
  t.epochs = 40;
  t.batch_size = 8;
  t.optimizer.lr = 3e-3;
  const auto curve = finetune(clf, patches, data.labels, 1.0, t, RngStream(4));
  CHECK(curve.loss.size() == 40);
  CHECK(curve.used.size() == data.n);
  CHECK(curve.loss.back() < curve.loss.front());
  CHECK(curve.train_accuracy.back() >= 0.99);
  CHECK(evaluate(clf, patches, data.labels) >= 0.99);
  CHECK_THROWS_AS(finetune(clf, patches, data.labels, 0.05, t, RngStream(4)), ValidationError);
}

TEST_CASE("untrained classifier is at chance on random labels") {
  const ImageGeometry geo = tiny_geometry();
  const auto x = testing::random_patches(geo, 1000, 7);
  RngStream rng(8);
  std::vector<int> labels(1000);
  for (auto& l : labels) l = static_cast<int>(rng.below(4));
  const auto clf = init_classifier(geo, tiny_dims(), 4, RngStream(9));
  CHECK(std::abs(evaluate(clf, x, labels) - 0.25) <= 0.05);
}

TEST_CASE("evaluation: ties, order invariance and errors") {
  const ImageGeometry geo = tiny_geometry();
  const auto x = testing::random_patches(geo, 50, 7);
  ViTClassifier clf = init_classifier(geo, tiny_dims(), 3, RngStream(9));
  std::vector<int> labels(50);
  for (std::size_t i = 0; i < 50; ++i) labels[i] = static_cast<int>(i % 3);
  const double acc = evaluate(clf, x, labels);

  std::vector<std::size_t> perm(50);
  std::iota(perm.begin(), perm.end(), 0);
  RngStream(3).shuffle(perm);
  std::vector<int> plabels;
  for (auto i : perm) plabels.push_back(labels[i]);
  CHECK(evaluate(clf, x.subset(perm), plabels) == acc);

  const auto pred = predict(clf, x);
  CHECK(accuracy(pred, pred) == 1.0);

  clf.params.at("head.w").value.fill(0.0);
  clf.params.at("head.b").value.fill(0.0);
  for (int p : predict(clf, x)) CHECK(p == 0);
  CHECK(evaluate(clf, x, labels) == doctest::Approx(17.0 / 50));

  CHECK_THROWS_AS(accuracy(std::vector<int>{}, std::vector<int>{}), ValidationError);
  CHECK_THROWS_AS(accuracy(std::vector<int>{1}, std::vector<int>{1, 2}), ValidationError);
}

TEST_CASE("reconstruction dump") {
  testing::TempDir dir("dump");
  const ImageBatch images = synth(1, 0.5, 2);  // 4 images, 3x8x8
  const ImageGeometry geo{3, 8, 8, 4};
  const MaeModel fresh = init_mae(geo, tiny_dims(), RngStream(1));
  const MaeModel pre = init_mae(geo, tiny_dims(), RngStream(2));
  const auto dump = reconstruct_dump(fresh, pre, images, 0.75, RngStream(3), dir.path / "r.ppm");
  CHECK(dump.rows == 4);
  CHECK(dump.width == 32);
  CHECK(dump.height == 32);
  for (std::size_t i = 0; i < 4; ++i) CHECK(dump.plan.visible(i).size() == 1);

  std::ifstream in(dir.path / "r.ppm", std::ios::binary);
  std::string magic;
  std::size_t w = 0, h = 0, maxv = 0;
  in >> magic >> w >> h >> maxv;
  in.get();
  CHECK(magic == "P6");
  CHECK(w == 32);
  CHECK(h == 32);
  std::vector<unsigned char> px(w * h * 3);
  in.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  CHECK(in.gcount() == static_cast<std::streamsize>(px.size()));

  // With nothing masked the first column is the ground truth.
  reconstruct_dump(fresh, pre, images, 0.0, RngStream(3), dir.path / "p0.ppm");
  std::ifstream in0(dir.path / "p0.ppm", std::ios::binary);
  in0 >> magic >> w >> h >> maxv;
  in0.get();
  in0.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < 8 * 3; ++x)
      REQUIRE(px[y * w * 3 + x] == px[y * w * 3 + 24 * 3 + x]);
}

TEST_CASE("footprint matches hand counts") {
  CHECK(block_flops(4, 8, 16) == 8 * 4 * 64 + 2 * 16 * 8 + 2 * 16 * 8 + 4 * 4 * 8 * 16);
  const MaeModel m = init_mae(tiny_geometry(), tiny_dims(), RngStream(1));
  const auto fm = model_footprint(m);
  CHECK(fm.params == m.params.scalar_count());
  // 1 visible patch: embed 128, encoder block 1056, projection 64, decoder
  // block on 4 tokens 1280, head 256.
  CHECK(fm.flops == 2784);
  MaeDims d = tiny_dims();
  d.depth = 2;
  const auto clf = init_classifier(tiny_geometry(), d, 3, RngStream(1));
  const auto fc = model_footprint(clf);
  CHECK(fc.params == clf.params.scalar_count());
  CHECK(fc.flops == 512 + 2 * 4608 + 48);
}

TEST_CASE("classifier checkpoint round trip") {
  testing::TempDir dir("clf");
  MaeDims d = tiny_dims();
  d.depth = 2;
  const auto clf = init_classifier(tiny_geometry(), d, 3, RngStream(1));
  save_classifier(dir.path / "c.ckpt", clf);
  const auto back = load_classifier(dir.path / "c.ckpt");
  CHECK(back.num_classes == 3);
  CHECK(back.dims.depth == 2);
  for (const auto& [name, p] : clf.params)
    for (std::size_t i = 0; i < p.value.size(); ++i)
      REQUIRE(back.params.value(name)[i] == static_cast<double>(static_cast<float>(p.value[i])));
  save_mae(dir.path / "m.ckpt", init_mae(tiny_geometry(), tiny_dims(), RngStream(1)));
  CHECK_THROWS_AS(load_classifier(dir.path / "m.ckpt"), IoError);
}
