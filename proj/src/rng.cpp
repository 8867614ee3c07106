#include "fedmae/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "fedmae/error.hpp"

namespace fedmae {
namespace {

constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ULL;

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

RngStream::RngStream(std::uint64_t seed) : seed_(seed), key_(mix64(seed ^ 0x5eedf00dULL)) {}

RngStream RngStream::derive(const std::string& label, std::int64_t index) const {
  require(!label.empty(), "rng derivation label must be non-empty");
  RngStream child(*this);
  child.counter_ = 0;
  std::uint64_t k = mix64(key_ ^ mix64(fnv1a(label)));
  k = mix64(k + kGamma * (static_cast<std::uint64_t>(index) + 1));
  child.key_ = k;
  child.path_.emplace_back(label, index);
  return child;
}

std::string RngStream::path_string() const {
  std::ostringstream os;
  os << "seed=" << seed_;
  for (const auto& [label, index] : path_) os << '/' << label << ':' << index;
  return os.str();
}

std::uint64_t RngStream::next_u64() {
  ++counter_;
  return mix64(key_ + kGamma * counter_);
}

double RngStream::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double RngStream::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::uint64_t RngStream::below(std::uint64_t n) {
  require(n > 0, "below(0)");
  // Rejection keeps the draw exactly uniform.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double RngStream::normal() {
  // Marsaglia polar method; the second variate is discarded so every draw
  // consumes a whole number of counter steps.
  for (;;) {
    double u = 2.0 * uniform() - 1.0;
    double v = 2.0 * uniform() - 1.0;
    double s = u * u + v * v;
    if (s > 0.0 && s < 1.0) return u * std::sqrt(-2.0 * std::log(s) / s);
  }
}

double RngStream::normal(double mean, double stddev) { return mean + stddev * normal(); }

double RngStream::truncated_normal(double stddev) {
  for (;;) {
    double z = normal();
    if (std::abs(z) <= 2.0) return z * stddev;
  }
}

bool RngStream::bernoulli(double p) { return uniform() < p; }

double RngStream::log_gamma_draw(double shape) {
  require(shape > 0.0 && std::isfinite(shape), "gamma shape must be positive");
  if (shape < 1.0) {
    // G(a) = G(a + 1) * U^(1/a), taken in log space.
    double u = uniform();
    while (u <= 0.0) u = uniform();
    return log_gamma_draw(shape + 1.0) + std::log(u) / shape;
  }
  // Marsaglia–Tsang.
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = normal();
    double v = 1.0 + c * x;
    if (v <= 0.0) continue;
    v = v * v * v;
    double u = uniform();
    if (u <= 0.0) continue;
    if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return std::log(d * v);
  }
}

std::vector<double> RngStream::dirichlet(std::size_t k, double alpha) {
  require(k >= 1, "dirichlet needs at least one component");
  std::vector<double> logs(k);
  for (auto& l : logs) l = log_gamma_draw(alpha);
  const double mx = *std::max_element(logs.begin(), logs.end());
  std::vector<double> out(k);
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    out[i] = std::exp(logs[i] - mx);
    total += out[i];
  }
  for (auto& v : out) v /= total;
  return out;
}

std::vector<std::size_t> RngStream::permutation(std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  shuffle(p);
  return p;
}

}  // namespace fedmae
