#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "fedmae/rng.hpp"
#include "fedmae/tensor.hpp"

namespace fedmae {

inline constexpr double kLayerNormEps = 1e-6;

struct Param {
  Tensor value;
  Tensor grad;
};

// Named parameters with gradients of identical shape. Iteration order is the
// lexicographic name order, which is also the checkpoint section order.
class ParamStore {
 public:
  using Map = std::map<std::string, Param>;

  Param& add(const std::string& name, Tensor value);
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  const Tensor& value(const std::string& name) const { return at(name).value; }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  void zero_grad();
  std::size_t scalar_count() const;
  std::vector<std::string> names() const;
  bool empty() const { return params_.empty(); }
  std::size_t size() const { return params_.size(); }

  Map::iterator begin() { return params_.begin(); }
  Map::iterator end() { return params_.end(); }
  Map::const_iterator begin() const { return params_.begin(); }
  Map::const_iterator end() const { return params_.end(); }

  // Same names, shapes and bitwise-equal values.
  friend bool operator==(const ParamStore& a, const ParamStore& b);

 private:
  Map params_;
};

// Initializers. Linear weights are Xavier-uniform, biases zero, LayerNorm
// gain one and shift zero.
void init_linear(ParamStore& ps, const std::string& prefix, std::size_t in, std::size_t out,
                 RngStream& rng);
void init_layer_norm(ParamStore& ps, const std::string& prefix, std::size_t dim);
void init_block(ParamStore& ps, const std::string& prefix, std::size_t dim, std::size_t hidden,
                RngStream& rng);

// y = x W + b, W stored as [in, out].
Matrix linear_forward(const ParamStore& ps, const std::string& prefix, const Matrix& x);
// Accumulates dW and db. Returns dx unless need_dx is false.
Matrix linear_backward(ParamStore& ps, const std::string& prefix, const Matrix& x,
                       const Matrix& dy, bool need_dx = true);

struct LayerNormCache {
  Matrix xhat;
  Eigen::VectorXd rstd;
};
Matrix layer_norm_forward(const ParamStore& ps, const std::string& prefix, const Matrix& x,
                          LayerNormCache* cache);
Matrix layer_norm_backward(ParamStore& ps, const std::string& prefix, const LayerNormCache& cache,
                           const Matrix& dy);

Matrix gelu(const Matrix& x);
Matrix gelu_backward(const Matrix& x, const Matrix& dy);

// Multi-head self-attention over contiguous sequences of seq_len rows.
struct AttentionCache {
  Matrix x;
  Matrix q, k, v;
  std::vector<Matrix> probs;  // one [seq_len, seq_len] per (sequence, head)
  Matrix context;
};
Matrix attention_forward(const ParamStore& ps, const std::string& prefix, const Matrix& x,
                         std::size_t seq_len, std::size_t heads, AttentionCache* cache);
Matrix attention_backward(ParamStore& ps, const std::string& prefix, const AttentionCache& cache,
                          const Matrix& dy, std::size_t seq_len, std::size_t heads);

struct MlpCache {
  Matrix x;
  Matrix pre;
  Matrix act;
};
Matrix mlp_forward(const ParamStore& ps, const std::string& prefix, const Matrix& x,
                   MlpCache* cache);
Matrix mlp_backward(ParamStore& ps, const std::string& prefix, const MlpCache& cache,
                    const Matrix& dy);

// Pre-norm transformer block:
//   h = x + attn(ln1(x)),  y = h + mlp(ln2(h))
struct BlockCache {
  LayerNormCache ln1, ln2;
  AttentionCache attn;
  MlpCache mlp;
};
Matrix block_forward(const ParamStore& ps, const std::string& prefix, const Matrix& x,
                     std::size_t seq_len, std::size_t heads, BlockCache* cache);
Matrix block_backward(ParamStore& ps, const std::string& prefix, const BlockCache& cache,
                      const Matrix& dy, std::size_t seq_len, std::size_t heads);

// Mean softmax cross-entropy over rows.
double softmax_cross_entropy(const Matrix& logits, std::span<const int> labels, Matrix* dlogits);

// 0.5 * mean squared error over the rows whose weight is nonzero (weights are
// 0/1 row selectors). Throws if no row is selected.
double masked_mse(const Matrix& recon, const Matrix& target, std::span<const double> row_weight,
                  Matrix* drecon);

}  // namespace fedmae
