#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace fedmae {

// Counter-based random stream. The stream key is a hash of the root seed and
// the derivation path, and draw i is mix(key, i), so a stream's values depend
// only on (seed, path) and never on what other streams have drawn.
//
// All distributions are implemented here rather than through <random>
// distributions, whose outputs differ between standard libraries.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0);

  RngStream derive(const std::string& label, std::int64_t index) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t key() const { return key_; }
  const std::vector<std::pair<std::string, std::int64_t>>& path() const { return path_; }
  std::string path_string() const;

  std::uint64_t next_u64();
  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  // Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);
  double normal();
  double normal(double mean, double stddev);
  // Normal truncated to [mean - 2 stddev, mean + 2 stddev].
  double truncated_normal(double stddev);
  bool bernoulli(double p);
  // Natural log of a Gamma(shape, 1) draw; stays finite for tiny shapes.
  double log_gamma_draw(double shape);
  std::vector<double> dirichlet(std::size_t k, double alpha);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::vector<std::size_t> permutation(std::size_t n);

 private:
  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  std::vector<std::pair<std::string, std::int64_t>> path_;
};

}  // namespace fedmae
