#include "fedmae/layers.hpp"

#include <cmath>
#include <numbers>

#include "fedmae/error.hpp"

namespace fedmae {

Param& ParamStore::add(const std::string& name, Tensor value) {
  require(!params_.count(name), "duplicate parameter name: " + name);
  Tensor grad(value.shape(), 0.0);
  auto [it, ok] = params_.emplace(name, Param{std::move(value), std::move(grad)});
  return it->second;
}

Param& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ValidationError("unknown parameter: " + name);
  return it->second;
}

const Param& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ValidationError("unknown parameter: " + name);
  return it->second;
}

void ParamStore::zero_grad() {
  for (auto& [_, p] : params_) p.grad.fill(0.0);
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += p.value.size();
  return n;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, _] : params_) out.push_back(name);
  return out;
}

bool operator==(const ParamStore& a, const ParamStore& b) {
  if (a.params_.size() != b.params_.size()) return false;
  auto ib = b.params_.begin();
  for (const auto& [name, p] : a.params_) {
    if (name != ib->first || !(p.value == ib->second.value)) return false;
    ++ib;
  }
  return true;
}

// ---------------------------------------------------------------------------

void init_linear(ParamStore& ps, const std::string& prefix, std::size_t in, std::size_t out,
                 RngStream& rng) {
  Tensor w({in, out});
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  for (auto& v : w.values()) v = rng.uniform(-bound, bound);
  ps.add(prefix + ".w", std::move(w));
  ps.add(prefix + ".b", Tensor({out}, 0.0));
}

void init_layer_norm(ParamStore& ps, const std::string& prefix, std::size_t dim) {
  ps.add(prefix + ".g", Tensor({dim}, 1.0));
  ps.add(prefix + ".s", Tensor({dim}, 0.0));
}

void init_block(ParamStore& ps, const std::string& prefix, std::size_t dim, std::size_t hidden,
                RngStream& rng) {
  init_layer_norm(ps, prefix + ".ln1", dim);
  init_linear(ps, prefix + ".attn.q", dim, dim, rng);
  init_linear(ps, prefix + ".attn.k", dim, dim, rng);
  init_linear(ps, prefix + ".attn.v", dim, dim, rng);
  init_linear(ps, prefix + ".attn.o", dim, dim, rng);
  init_layer_norm(ps, prefix + ".ln2", dim);
  init_linear(ps, prefix + ".mlp.fc1", dim, hidden, rng);
  init_linear(ps, prefix + ".mlp.fc2", hidden, dim, rng);
}

// ---------------------------------------------------------------------------

Matrix linear_forward(const ParamStore& ps, const std::string& prefix, const Matrix& x) {
  const auto w = ps.value(prefix + ".w").matrix();
  const auto b = ps.value(prefix + ".b").matrix();
  require(x.cols() == w.rows(), "linear " + prefix + ": input width mismatch");
  Matrix y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

Matrix linear_backward(ParamStore& ps, const std::string& prefix, const Matrix& x,
                       const Matrix& dy, bool need_dx) {
  Param& w = ps.at(prefix + ".w");
  Param& b = ps.at(prefix + ".b");
  w.grad.matrix().noalias() += x.transpose() * dy;
  b.grad.matrix().row(0) += dy.colwise().sum();
  if (!need_dx) return {};
  return dy * w.value.matrix().transpose();
}

// ---------------------------------------------------------------------------

Matrix layer_norm_forward(const ParamStore& ps, const std::string& prefix, const Matrix& x,
                          LayerNormCache* cache) {
  const auto g = ps.value(prefix + ".g").matrix();
  const auto s = ps.value(prefix + ".s").matrix();
  const Eigen::Index n = x.rows(), d = x.cols();
  Matrix xhat(n, d);
  Eigen::VectorXd rstd(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    rstd(r) = 1.0 / std::sqrt(var + kLayerNormEps);
    xhat.row(r) = (x.row(r).array() - mean) * rstd(r);
  }
  Matrix y = xhat.array().rowwise() * g.row(0).array();
  y.rowwise() += s.row(0);
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

Matrix layer_norm_backward(ParamStore& ps, const std::string& prefix, const LayerNormCache& cache,
                           const Matrix& dy) {
  Param& g = ps.at(prefix + ".g");
  Param& s = ps.at(prefix + ".s");
  g.grad.matrix().row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  s.grad.matrix().row(0) += dy.colwise().sum();

  const Eigen::Index n = dy.rows(), d = dy.cols();
  Matrix dxhat = dy.array().rowwise() * g.value.matrix().row(0).array();
  Matrix dx(n, d);
  const double inv_d = 1.0 / static_cast<double>(d);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double sum_dxhat = dxhat.row(r).sum();
    const double sum_dxhat_xhat = dxhat.row(r).dot(cache.xhat.row(r));
    dx.row(r) = cache.rstd(r) * inv_d *
                (static_cast<double>(d) * dxhat.row(r).array() - sum_dxhat -
                 cache.xhat.row(r).array() * sum_dxhat_xhat);
  }
  return dx;
}

// ---------------------------------------------------------------------------

Matrix gelu(const Matrix& x) {
  return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2)); });
}

Matrix gelu_backward(const Matrix& x, const Matrix& dy) {
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  Matrix d = x.unaryExpr([&](double v) {
    const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2));
    return cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
  });
  return d.cwiseProduct(dy);
}

// ---------------------------------------------------------------------------

namespace {

void check_sequence(const Matrix& x, std::size_t seq_len, std::size_t heads) {
  require(seq_len > 0 && x.rows() % static_cast<Eigen::Index>(seq_len) == 0,
          "attention: row count is not a multiple of seq_len");
  require(heads > 0 && x.cols() % static_cast<Eigen::Index>(heads) == 0,
          "attention: head count must divide model width");
}

}  // namespace

Matrix attention_forward(const ParamStore& ps, const std::string& prefix, const Matrix& x,
                         std::size_t seq_len, std::size_t heads, AttentionCache* cache) {
  check_sequence(x, seq_len, heads);
  const Eigen::Index T = static_cast<Eigen::Index>(seq_len);
  const Eigen::Index H = static_cast<Eigen::Index>(heads);
  const Eigen::Index dh = x.cols() / H;
  const Eigen::Index nseq = x.rows() / T;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix q = linear_forward(ps, prefix + ".q", x);
  Matrix k = linear_forward(ps, prefix + ".k", x);
  Matrix v = linear_forward(ps, prefix + ".v", x);
  Matrix context(x.rows(), x.cols());
  if (cache) cache->probs.assign(static_cast<std::size_t>(nseq * H), Matrix());

  for (Eigen::Index s = 0; s < nseq; ++s) {
    for (Eigen::Index h = 0; h < H; ++h) {
      Matrix scores = q.block(s * T, h * dh, T, dh) * k.block(s * T, h * dh, T, dh).transpose();
      scores *= scale;
      for (Eigen::Index r = 0; r < T; ++r) {
        const double mx = scores.row(r).maxCoeff();
        scores.row(r) = (scores.row(r).array() - mx).exp();
        scores.row(r) /= scores.row(r).sum();
      }
      context.block(s * T, h * dh, T, dh).noalias() = scores * v.block(s * T, h * dh, T, dh);
      if (cache) cache->probs[static_cast<std::size_t>(s * H + h)] = std::move(scores);
    }
  }
  Matrix y = linear_forward(ps, prefix + ".o", context);
  if (cache) {
    cache->x = x;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->context = std::move(context);
  }
  return y;
}

Matrix attention_backward(ParamStore& ps, const std::string& prefix, const AttentionCache& cache,
                          const Matrix& dy, std::size_t seq_len, std::size_t heads) {
  const Eigen::Index T = static_cast<Eigen::Index>(seq_len);
  const Eigen::Index H = static_cast<Eigen::Index>(heads);
  const Eigen::Index dh = cache.x.cols() / H;
  const Eigen::Index nseq = cache.x.rows() / T;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix dcontext = linear_backward(ps, prefix + ".o", cache.context, dy);
  Matrix dq(cache.q.rows(), cache.q.cols());
  Matrix dk(cache.k.rows(), cache.k.cols());
  Matrix dv(cache.v.rows(), cache.v.cols());

  for (Eigen::Index s = 0; s < nseq; ++s) {
    for (Eigen::Index h = 0; h < H; ++h) {
      const Matrix& p = cache.probs[static_cast<std::size_t>(s * H + h)];
      const auto dctx = dcontext.block(s * T, h * dh, T, dh);
      const auto vh = cache.v.block(s * T, h * dh, T, dh);
      const auto qh = cache.q.block(s * T, h * dh, T, dh);
      const auto kh = cache.k.block(s * T, h * dh, T, dh);

      dv.block(s * T, h * dh, T, dh).noalias() = p.transpose() * dctx;
      Matrix dp = dctx * vh.transpose();
      // softmax backward: ds = p * (dp - rowsum(dp * p))
      Eigen::VectorXd inner = (dp.array() * p.array()).rowwise().sum();
      Matrix ds = p.array() * (dp.array().colwise() - inner.array());
      ds *= scale;
      dq.block(s * T, h * dh, T, dh).noalias() = ds * kh;
      dk.block(s * T, h * dh, T, dh).noalias() = ds.transpose() * qh;
    }
  }
  Matrix dx = linear_backward(ps, prefix + ".q", cache.x, dq);
  dx += linear_backward(ps, prefix + ".k", cache.x, dk);
  dx += linear_backward(ps, prefix + ".v", cache.x, dv);
  return dx;
}

// ---------------------------------------------------------------------------

Matrix mlp_forward(const ParamStore& ps, const std::string& prefix, const Matrix& x,
                   MlpCache* cache) {
  Matrix pre = linear_forward(ps, prefix + ".fc1", x);
  Matrix act = gelu(pre);
  Matrix y = linear_forward(ps, prefix + ".fc2", act);
  if (cache) {
    cache->x = x;
    cache->pre = std::move(pre);
    cache->act = std::move(act);
  }
  return y;
}

Matrix mlp_backward(ParamStore& ps, const std::string& prefix, const MlpCache& cache,
                    const Matrix& dy) {
  Matrix dact = linear_backward(ps, prefix + ".fc2", cache.act, dy);
  Matrix dpre = gelu_backward(cache.pre, dact);
  return linear_backward(ps, prefix + ".fc1", cache.x, dpre);
}

// ---------------------------------------------------------------------------

Matrix block_forward(const ParamStore& ps, const std::string& prefix, const Matrix& x,
                     std::size_t seq_len, std::size_t heads, BlockCache* cache) {
  Matrix n1 = layer_norm_forward(ps, prefix + ".ln1", x, cache ? &cache->ln1 : nullptr);
  Matrix h = x + attention_forward(ps, prefix + ".attn", n1, seq_len, heads,
                                   cache ? &cache->attn : nullptr);
  Matrix n2 = layer_norm_forward(ps, prefix + ".ln2", h, cache ? &cache->ln2 : nullptr);
  Matrix y = h + mlp_forward(ps, prefix + ".mlp", n2, cache ? &cache->mlp : nullptr);
  return y;
}

Matrix block_backward(ParamStore& ps, const std::string& prefix, const BlockCache& cache,
                      const Matrix& dy, std::size_t seq_len, std::size_t heads) {
  Matrix dn2 = mlp_backward(ps, prefix + ".mlp", cache.mlp, dy);
  Matrix dh = dy + layer_norm_backward(ps, prefix + ".ln2", cache.ln2, dn2);
  Matrix dn1 = attention_backward(ps, prefix + ".attn", cache.attn, dh, seq_len, heads);
  return dh + layer_norm_backward(ps, prefix + ".ln1", cache.ln1, dn1);
}

// ---------------------------------------------------------------------------

double softmax_cross_entropy(const Matrix& logits, std::span<const int> labels, Matrix* dlogits) {
  const Eigen::Index n = logits.rows(), c = logits.cols();
  require(static_cast<std::size_t>(n) == labels.size() && n > 0,
          "cross-entropy: label count does not match logits");
  if (dlogits) dlogits->resize(n, c);
  double loss = 0.0;
  for (Eigen::Index r = 0; r < n; ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    require(y >= 0 && y < c, "cross-entropy: label out of range");
    const double mx = logits.row(r).maxCoeff();
    Eigen::RowVectorXd e = (logits.row(r).array() - mx).exp();
    const double z = e.sum();
    loss += std::log(z) - (logits(r, y) - mx);
    if (dlogits) {
      dlogits->row(r) = e / z;
      (*dlogits)(r, y) -= 1.0;
    }
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  if (dlogits) *dlogits *= inv_n;
  return loss * inv_n;
}

double masked_mse(const Matrix& recon, const Matrix& target, std::span<const double> row_weight,
                  Matrix* drecon) {
  require(recon.rows() == target.rows() && recon.cols() == target.cols(),
          "masked_mse: shape mismatch");
  require(row_weight.size() == static_cast<std::size_t>(recon.rows()),
          "masked_mse: row weight count mismatch");
  double selected = 0.0;
  for (double w : row_weight) selected += (w != 0.0) ? 1.0 : 0.0;
  require(selected > 0.0, "masked_mse: no positions selected");
  const double count = selected * static_cast<double>(recon.cols());

  if (drecon) drecon->setZero(recon.rows(), recon.cols());
  double sum = 0.0;
  for (Eigen::Index r = 0; r < recon.rows(); ++r) {
    if (row_weight[static_cast<std::size_t>(r)] == 0.0) continue;
    Eigen::RowVectorXd diff = recon.row(r) - target.row(r);
    sum += diff.squaredNorm();
    if (drecon) drecon->row(r) = diff / count;
  }
  return 0.5 * sum / count;
}

}  // namespace fedmae
