#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "fedmae/data.hpp"
#include "fedmae/error.hpp"
#include "helpers.hpp"

using namespace fedmae;

namespace {

ImageBatch counting_batch(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  ImageBatch b;
  b.n = n;
  b.channels = c;
  b.height = h;
  b.width = w;
  b.pixels.resize(n * c * h * w);
  for (std::size_t i = 0; i < b.pixels.size(); ++i) b.pixels[i] = static_cast<double>(i);
  return b;
}

std::vector<int> balanced_labels(std::size_t per_class, std::size_t classes) {
  std::vector<int> y;
  for (std::size_t i = 0; i < per_class * classes; ++i) y.push_back(static_cast<int>(i % classes));
  return y;
}

}  // namespace

TEST_CASE("patchify layout and round trip") {
  const ImageBatch b = counting_batch(2, 3, 4, 6);
  const PatchSequence p = patchify(b, 2);
  CHECK(p.num_patches() == 6);
  CHECK(p.patch_dim() == 12);
  // Patch 1 of image 0 is grid cell (0, 1): channel 0 rows 0-1, columns 2-3 first.
  CHECK(p.data[1 * 12 + 0] == b.at(0, 0, 0, 2));
  CHECK(p.data[1 * 12 + 1] == b.at(0, 0, 0, 3));
  CHECK(p.data[1 * 12 + 2] == b.at(0, 0, 1, 2));
  CHECK(p.data[1 * 12 + 4] == b.at(0, 1, 0, 2));
  // Patch 3 is grid cell (1, 0).
  CHECK(p.data[3 * 12] == b.at(0, 0, 2, 0));
  const ImageBatch back = unpatchify(p);
  CHECK(back.pixels == b.pixels);
  CHECK_THROWS_AS(patchify(b, 4), ValidationError);
}

TEST_CASE("fixed-count masks") {
  RngStream rng(1);
  const MaskPlan plan = sample_mask(50, 16, 0.75, MaskSemantics::FixedCount, rng);
  CHECK(plan.visible_count == 4);
  for (std::size_t i = 0; i < plan.n(); ++i) {
    auto vis = plan.visible(i);
    auto masked = plan.masked(i);
    CHECK(vis.size() == 4);
    CHECK(masked.size() == 12);
    CHECK(std::is_sorted(vis.begin(), vis.end()));
    CHECK(std::is_sorted(masked.begin(), masked.end()));
    std::set<std::size_t> all(vis.begin(), vis.end());
    all.insert(masked.begin(), masked.end());
    CHECK(all.size() == 16);
  }
  CHECK(plan.total_masked() == 50 * 12);

  RngStream r0(2);
  const MaskPlan none = sample_mask(3, 16, 0.0, MaskSemantics::FixedCount, r0);
  CHECK(none.visible_count == 16);
  CHECK(none.total_masked() == 0);
  RngStream r1(3);
  CHECK_THROWS_AS(sample_mask(1, 4, 0.9, MaskSemantics::FixedCount, r1), ValidationError);
  CHECK_THROWS_AS(sample_mask(1, 4, 1.0, MaskSemantics::Bernoulli, r1), ValidationError);
}

TEST_CASE("bernoulli masks hit the requested rate") {
  RngStream rng(4);
  const MaskPlan plan = sample_mask(2000, 16, 0.3, MaskSemantics::Bernoulli, rng);
  const double rate = static_cast<double>(plan.total_masked()) / (2000.0 * 16.0);
  CHECK(rate == doctest::Approx(0.3).epsilon(0.03));
  CHECK_FALSE(plan.fixed_count());
}

TEST_CASE("masks are uniform over visible subsets") {
  // B = 4, b = 2: six subsets, each ~1/6.
  RngStream rng(5);
  const MaskPlan plan = sample_mask(60000, 4, 0.5, MaskSemantics::FixedCount, rng);
  std::map<std::vector<std::size_t>, int> counts;
  for (std::size_t i = 0; i < plan.n(); ++i) {
    auto v = plan.visible(i);
    counts[{v.begin(), v.end()}]++;
  }
  CHECK(counts.size() == 6);
  for (const auto& [k, c] : counts) CHECK(std::abs(c - 10000) < 500);
}

TEST_CASE("apply_mask_zero zeroes exactly the masked patches") {
  const auto geo = testing::tiny_geometry();
  const PatchSequence p = testing::random_patches(geo, 3, 7);
  const MaskPlan plan = MaskPlan::from_visible(4, {{0, 2}, {1, 3}, {2, 3}});
  const PatchSequence z = apply_mask_zero(p, plan);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t k = 0; k < 8; ++k) {
        const std::size_t idx = (i * 4 + t) * 8 + k;
        CHECK(z.data[idx] == (plan.is_visible(i, t) ? p.data[idx] : 0.0));
      }
  CHECK_THROWS_AS(MaskPlan::from_visible(4, {{0, 2}, {1}}), ValidationError);
}

TEST_CASE("mask combinatorics") {
  CHECK(binomial(4, 1) == 4);
  CHECK(binomial(12, 6) == 924);
  CHECK(binomial(60, 30) == 118264581564861424ULL);
  CHECK_THROWS_AS(binomial(70, 35), ValidationError);
  CHECK(count_mask_variants(10, 16, 4) == 10 * 1820);
  CHECK(count_mask_variants(1, 4, 0) == 1);
  CHECK_THROWS_AS(count_mask_variants(1, 4, 5), ValidationError);
}

TEST_CASE("partition is a disjoint cover") {
  RngStream seeds(8);
  for (int t = 0; t < 30; ++t) {
    const std::size_t classes = 2 + seeds.below(5);
    const std::size_t n = 50 + seeds.below(300);
    std::vector<int> labels(n);
    for (auto& y : labels) y = static_cast<int>(seeds.below(classes));
    const double alphas[] = {0.0, 1e-3, 0.1, 1.0, 100.0};
    PartitionSpec spec{1 + seeds.below(10), alphas[seeds.below(5)], seeds.next_u64()};
    RngStream rng(spec.seed);
    const auto shards = partition(labels, classes, spec, rng);
    REQUIRE(shards.size() == spec.clients);
    std::vector<int> seen(n, 0);
    for (std::size_t k = 0; k < shards.size(); ++k) {
      CHECK(shards[k].client == k);
      CHECK_FALSE(shards[k].indices.empty());
      CHECK(std::is_sorted(shards[k].indices.begin(), shards[k].indices.end()));
      std::size_t hist_total = 0;
      for (auto c : shards[k].label_histogram) hist_total += c;
      CHECK(hist_total == shards[k].indices.size());
      for (auto i : shards[k].indices) seen[i]++;
    }
    for (int s : seen) REQUIRE(s == 1);
  }
}

TEST_CASE("iid partition is stratified up to rounding") {
  const auto labels = balanced_labels(103, 4);
  RngStream rng(1);
  const auto shards = partition(labels, 4, {10, 0.0, 1}, rng);
  for (const auto& s : shards)
    for (std::size_t c = 0; c < 4; ++c) {
      CHECK(s.label_histogram[c] >= 10);
      CHECK(s.label_histogram[c] <= 11);
    }
}

TEST_CASE("huge alpha approaches the global proportions") {
  const auto labels = balanced_labels(5000, 4);
  RngStream rng(2);
  const auto shards = partition(labels, 4, {10, 1e6, 2}, rng);
  for (const auto& s : shards) {
    double tv = 0;
    for (std::size_t c = 0; c < 4; ++c)
      tv += std::abs(static_cast<double>(s.label_histogram[c]) / s.indices.size() - 0.25);
    CHECK(0.5 * tv <= 0.05);
  }
}

TEST_CASE("tiny alpha concentrates clients on few classes") {
  const auto labels = balanced_labels(200, 4);
  RngStream rng(3);
  const auto shards = partition(labels, 4, {8, 1e-3, 3}, rng);
  double mean_max_share = 0;
  for (const auto& s : shards) {
    const auto mx = *std::max_element(s.label_histogram.begin(), s.label_histogram.end());
    mean_max_share += static_cast<double>(mx) / s.indices.size() / shards.size();
  }
  CHECK(mean_max_share > 0.8);
}

TEST_CASE("partition errors") {
  std::vector<int> labels = {0, 1, 0};
  RngStream rng(1);
  CHECK_THROWS_AS(partition(labels, 2, {4, 0.0, 1}, rng), ValidationError);
  CHECK_THROWS_AS(partition(labels, 2, {0, 0.0, 1}, rng), ValidationError);
  CHECK_THROWS_AS(partition(labels, 2, {1, -1.0, 1}, rng), ValidationError);
  std::vector<int> bad = {0, 5};
  CHECK_THROWS_AS(partition(bad, 2, {1, 0.0, 1}, rng), ValidationError);
}

TEST_CASE("synthetic data: determinism, range, templates") {
  SynthSpec spec;
  spec.per_class = 20;
  RngStream a(5), b(5);
  const ImageBatch x = synth_dataset(spec, a);
  const ImageBatch y = synth_dataset(spec, b);
  CHECK(x.pixels == y.pixels);
  CHECK(x.labels == y.labels);
  CHECK(x.n == 80);
  for (double v : x.pixels) REQUIRE((v >= 0.0 && v <= 1.0));
  for (std::size_t c = 0; c < 4; ++c)
    CHECK(std::count(x.labels.begin(), x.labels.end(), static_cast<int>(c)) == 20);

  SynthSpec clean = spec;
  clean.noise = 0.0;
  RngStream r(6);
  const ImageBatch z = synth_dataset(clean, r);
  for (std::size_t i = 0; i < 4; ++i) {
    const ImageBatch t = class_template(clean, z.labels[i]);
    for (std::size_t k = 0; k < t.pixels.size(); ++k)
      REQUIRE(z.pixels[i * t.pixels.size() + k] == t.pixels[k]);
  }
}

TEST_CASE("synthetic labels are recoverable by a nearest-template classifier") {
  SynthSpec spec;
  spec.per_class = 100;
  spec.noise = 0.3;
  RngStream rng(7);
  const ImageBatch x = synth_dataset(spec, rng);
  std::vector<ImageBatch> templates;
  for (int c = 0; c < 4; ++c) templates.push_back(class_template(spec, c));
  const std::size_t sz = x.image_size();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < x.n; ++i) {
    int best = 0;
    double best_d = 1e300;
    for (int c = 0; c < 4; ++c) {
      double d = 0;
      for (std::size_t k = 0; k < sz; ++k) {
        const double e = x.pixels[i * sz + k] - templates[c].pixels[k];
        d += e * e;
      }
      if (d < best_d) best_d = d, best = c;
    }
    hits += best == x.labels[i];
  }
  CHECK(static_cast<double>(hits) / x.n > 0.6);
}

TEST_CASE("dataset files round trip") {
  testing::TempDir dir("dataset");
  SynthSpec spec;
  spec.per_class = 3;
  RngStream rng(1);
  const ImageBatch x = synth_dataset(spec, rng);
  save_dataset(dir.path / "set.txt", x);
  const ImageBatch y = load_dataset(dir.path / "set.txt");
  CHECK(y.n == x.n);
  CHECK(y.labels == x.labels);
  for (std::size_t i = 0; i < x.pixels.size(); ++i)
    CHECK(y.pixels[i] == static_cast<double>(static_cast<float>(x.pixels[i])));
  CHECK_THROWS_AS(load_dataset(dir.path / "missing.txt"), IoError);
}

TEST_CASE("cifar-10 binary records") {
  testing::TempDir dir("cifar");
  std::ofstream out(dir.path / "batch.bin", std::ios::binary);
  for (int r = 0; r < 2; ++r) {
    out.put(static_cast<char>(r == 0 ? 3 : 9));
    for (int k = 0; k < 3072; ++k) out.put(static_cast<char>(k % 256));
  }
  out.close();
  const ImageBatch b = load_cifar10_binary(dir.path / "batch.bin");
  CHECK(b.n == 2);
  CHECK(b.labels == std::vector<int>{3, 9});
  CHECK(b.num_classes == 10);
  CHECK(b.at(1, 0, 0, 1) == doctest::Approx(1.0 / 255.0));
  CHECK(b.at(0, 2, 31, 31) == doctest::Approx(255.0 / 255.0));
  std::ofstream(dir.path / "short.bin", std::ios::binary) << "abc";
  CHECK_THROWS_AS(load_cifar10_binary(dir.path / "short.bin"), IoError);
}

TEST_CASE("subset keeps labels aligned") {
  SynthSpec spec;
  spec.per_class = 2;
  RngStream rng(1);
  const ImageBatch x = synth_dataset(spec, rng);
  std::vector<std::size_t> ids = {5, 1};
  const ImageBatch s = x.subset(ids);
  CHECK(s.labels == std::vector<int>{x.labels[5], x.labels[1]});
  CHECK(s.pixels[0] == x.pixels[5 * x.image_size()]);
  const PatchSequence p = patchify(x, 4).subset(ids);
  CHECK(p.n() == 2);
}
