#pragma once

#include <filesystem>
#include <string>

#include <unistd.h>

#include "fedmae/data.hpp"
#include "fedmae/mae.hpp"

namespace testing {

inline fedmae::ImageGeometry tiny_geometry() { return {2, 4, 4, 2}; }  // 4 patches of 8 values

inline fedmae::MaeDims tiny_dims() {
  fedmae::MaeDims d;
  d.d_enc = 8;
  d.d_dec = 4;
  d.heads = 2;
  d.mlp_ratio = 2;
  d.depth = 1;
  return d;
}

inline fedmae::PatchSequence random_patches(const fedmae::ImageGeometry& geo, std::size_t n,
                                            std::uint64_t seed) {
  fedmae::PatchSequence p;
  p.geometry = geo;
  p.data = fedmae::Tensor({n, geo.num_patches(), geo.patch_dim()});
  fedmae::RngStream rng(seed);
  for (auto& v : p.data.values()) v = rng.uniform();
  return p;
}

inline fedmae::Matrix random_matrix(std::size_t rows, std::size_t cols, fedmae::RngStream& rng,
                                    double scale = 1.0) {
  fedmae::Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) {
    path = std::filesystem::temp_directory_path() /
           ("fedmae_test_" + name + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

}  // namespace testing
