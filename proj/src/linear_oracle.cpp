#include "fedmae/linear_oracle.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>

#include "fedmae/error.hpp"

namespace fedmae {

void CorruptionSpec::validate(std::size_t d) const {
  require(ratio >= 0.0 && ratio < 1.0, "corruption ratio must be in [0, 1)");
  if (groups.empty()) return;
  std::vector<bool> seen(d, false);
  for (const auto& g : groups) {
    require(!g.empty(), "corruption groups must be nonempty");
    for (auto c : g) {
      require(c < d, "corruption group coordinate " + std::to_string(c) + " out of range");
      require(!seen[c], "corruption groups overlap at coordinate " + std::to_string(c));
      seen[c] = true;
    }
  }
}

CorruptionSpec CorruptionSpec::for_image(const ImageGeometry& geo, MaskSemantics semantics,
                                         double ratio) {
  geo.validate();
  CorruptionSpec spec;
  spec.semantics = semantics;
  spec.ratio = ratio;
  const std::size_t P = geo.patch;
  for (std::size_t gy = 0; gy < geo.grid_h(); ++gy)
    for (std::size_t gx = 0; gx < geo.grid_w(); ++gx) {
      std::vector<std::size_t> g;
      for (std::size_t c = 0; c < geo.channels; ++c)
        for (std::size_t y = 0; y < P; ++y)
          for (std::size_t x = 0; x < P; ++x)
            g.push_back((c * geo.height + gy * P + y) * geo.width + gx * P + x);
      spec.groups.push_back(std::move(g));
    }
  return spec;
}

DenseMatrix apply_group_mask(const DenseMatrix& X, const CorruptionSpec& corruption,
                             const std::vector<std::vector<bool>>& mask) {
  const std::size_t d = static_cast<std::size_t>(X.rows());
  require(mask.size() == static_cast<std::size_t>(X.cols()), "mask count does not match columns");
  DenseMatrix out = X;
  for (std::size_t j = 0; j < mask.size(); ++j) {
    require(mask[j].size() == corruption.group_count(d), "mask size does not match group count");
    for (std::size_t g = 0; g < mask[j].size(); ++g) {
      if (!mask[j][g]) continue;
      if (corruption.groups.empty())
        out(static_cast<Eigen::Index>(g), static_cast<Eigen::Index>(j)) = 0.0;
      else
        for (auto c : corruption.groups[g])
          out(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(j)) = 0.0;
    }
  }
  return out;
}

LinearAEProblem build_problem(const DenseMatrix& X, std::size_t m, const CorruptionSpec& corruption,
                              const RngStream& rng) {
  require(m >= 1, "build_problem: variant count m must be >= 1");
  require(X.rows() >= 1 && X.cols() >= 1, "build_problem: empty data matrix");
  const std::size_t d = static_cast<std::size_t>(X.rows()), n = static_cast<std::size_t>(X.cols());
  corruption.validate(d);
  const std::size_t G = corruption.group_count(d);

  LinearAEProblem p;
  p.X = X;
  p.m = m;
  p.corruption = corruption;
  p.Xbar.resize(X.rows(), static_cast<Eigen::Index>(n * m));
  p.Xtilde.resize(X.rows(), static_cast<Eigen::Index>(n * m));
  for (std::size_t v = 0; v < m; ++v) {
    RngStream vr = rng.derive("variant", static_cast<std::int64_t>(v));
    const MaskPlan plan = sample_mask(n, G, corruption.ratio, corruption.semantics, vr);
    std::vector<std::vector<bool>> mask(n, std::vector<bool>(G, false));
    for (std::size_t i = 0; i < n; ++i)
      for (auto g : plan.masked(i)) mask[i][g] = true;
    const auto cols = Eigen::seqN(static_cast<Eigen::Index>(v * n), static_cast<Eigen::Index>(n));
    p.Xbar(Eigen::all, cols) = X;
    p.Xtilde(Eigen::all, cols) = apply_group_mask(X, corruption, mask);
  }
  return p;
}

double linear_residual(const DenseMatrix& W, const DenseMatrix& Xtilde, const DenseMatrix& Xbar) {
  require(Xtilde.cols() >= 1 && Xtilde.cols() == Xbar.cols(), "residual: column mismatch");
  return 0.5 * (Xbar - W * Xtilde).squaredNorm() / static_cast<double>(Xtilde.cols());
}

double default_lambda(const DenseMatrix& Xtilde) {
  const double trace = Xtilde.squaredNorm();
  const double lambda = 1e-8 * trace / static_cast<double>(Xtilde.rows());
  return lambda > 0.0 ? lambda : 1e-8;
}

namespace {

LinearSolution solve(const DenseMatrix& Xtilde, const DenseMatrix& Xbar, double lambda) {
  require(lambda >= 0.0, "lambda must be non-negative");
  LinearSolution s;
  s.lambda = lambda;
  s.W = linear_solve_ridge(Xtilde, Xbar, lambda);
  s.residual = linear_residual(s.W, Xtilde, Xbar);
  return s;
}

}  // namespace

LinearSolution solve_client(const LinearAEProblem& problem, double lambda) {
  return solve(problem.Xtilde, problem.Xbar, lambda);
}

LinearSolution solve_global(std::span<const LinearAEProblem> problems, double lambda) {
  require(!problems.empty(), "solve_global: no client problems");
  const Eigen::Index d = problems.front().Xtilde.rows();
  Eigen::Index total = 0;
  for (const auto& p : problems) {
    require(p.Xtilde.rows() == d, "solve_global: clients disagree on the data dimension");
    total += p.Xtilde.cols();
  }
  DenseMatrix Xt(d, total), Xb(d, total);
  Eigen::Index at = 0;
  for (const auto& p : problems) {
    Xt.middleCols(at, p.Xtilde.cols()) = p.Xtilde;
    Xb.middleCols(at, p.Xbar.cols()) = p.Xbar;
    at += p.Xtilde.cols();
  }
  return solve(Xt, Xb, lambda);
}

GdResult gd_linear_ae(const LinearAEProblem& problem, std::size_t steps, double lr, double lambda,
                      std::uint64_t init_seed) {
  require(lambda >= 0.0, "gd: lambda must be non-negative");
  const DenseMatrix& A = problem.Xtilde;
  const DenseMatrix& B = problem.Xbar;
  const double N = static_cast<double>(A.cols());
  const Eigen::Index d = A.rows();

  const DenseMatrix gram = A * A.transpose();
  const DenseMatrix cross = B * A.transpose();
  auto objective = [&](const DenseMatrix& W) {
    return 0.5 * ((B - W * A).squaredNorm() + lambda * W.squaredNorm()) / N;
  };

  GdResult r;
  r.W.resize(B.rows(), d);
  RngStream rng = RngStream(init_seed).derive("gd-init", 0);
  for (Eigen::Index i = 0; i < r.W.size(); ++i) r.W.data()[i] = 0.01 * rng.normal();
  if (lr <= 0.0) {
    Eigen::SelfAdjointEigenSolver<DenseMatrix> eig(gram, Eigen::EigenvaluesOnly);
    const double L = (eig.eigenvalues().maxCoeff() + lambda) / N;
    lr = L > 0.0 ? 1.0 / L : 1.0;
  }
  r.lr = lr;
  double f = objective(r.W);
  r.objective.push_back(f);

  for (std::size_t s = 0; s < steps;) {
    const DenseMatrix grad = (r.W * gram - cross + lambda * r.W) / N;
    if (grad.squaredNorm() == 0.0) break;
    const DenseMatrix next = r.W - r.lr * grad;
    const double f_next = objective(next);
    if (std::isfinite(f_next) && f_next <= f) {
      r.W = next;
      f = f_next;
      r.objective.push_back(f);
      ++s;
      continue;
    }
    // A rise within rounding of the current value means the minimum is reached.
    if (std::isfinite(f_next) && f_next - f <= 1e-13 * std::max(std::abs(f), 1e-300)) break;
    if (++r.halvings > 60)
      throw NonFiniteError("gd_linear_ae: diverged after 60 step-size halvings");
    r.lr *= 0.5;
  }
  return r;
}

LowRankFactors rank_one_factorize(const DenseMatrix& W, std::size_t rank) {
  return low_rank_factorize(W, rank);
}

LinearizationGap linearization_gap(const DenseMatrix& Xtilde, const DenseMatrix& Xbar,
                                   const DenseMatrix& Y, double lambda) {
  require(Xtilde.cols() >= 1, "linearization_gap: no data");
  require(Y.rows() == Xbar.rows() && Y.cols() == Xbar.cols() && Xtilde.cols() == Xbar.cols(),
          "linearization_gap: shape mismatch");
  LinearizationGap g;
  g.lambda = lambda < 0.0 ? default_lambda(Xtilde) : lambda;
  const DenseMatrix M = linear_solve_ridge(Xtilde, Y, g.lambda);
  const double ynorm = Y.norm();
  const double fit = (Y - M * Xtilde).norm();
  g.relative_fit_residual = ynorm > 0.0 ? fit / ynorm : fit;
  const double N = static_cast<double>(Xtilde.cols());
  g.model_loss = 0.5 * (Xbar - Y).squaredNorm() / N;
  g.linear_fit_loss = linear_residual(M, Xtilde, Xbar);
  g.closed_form_loss = linear_residual(linear_solve_ridge(Xtilde, Xbar, g.lambda), Xtilde, Xbar);
  return g;
}

LinearizationGap linearization_gap(const std::function<DenseMatrix(const DenseMatrix&)>& model,
                                   const DenseMatrix& Xtilde, const DenseMatrix& Xbar,
                                   double lambda) {
  return linearization_gap(Xtilde, Xbar, model(Xtilde), lambda);
}

namespace {

DenseMatrix columns_of(const PatchSequence& s) {
  const std::size_t n = s.n(), d = s.num_patches() * s.patch_dim();
  DenseMatrix out(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k)
      out(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i)) = s.data[i * d + k];
  return out;
}

}  // namespace

LinearizationGap linearization_gap(const MaeModel& model, const PatchSequence& data,
                                   const MaskPlan& plan, double lambda) {
  require(data.n() >= 1, "linearization_gap: no data");
  const DenseMatrix Xbar = columns_of(data);
  const DenseMatrix Xtilde = columns_of(apply_mask_zero(data, plan));
  const DenseMatrix Y = columns_of(reconstruct(model, data, plan));
  return linearization_gap(Xtilde, Xbar, Y, lambda);
}

CorruptionCheck corruption_equivalence(const DenseMatrix& W_h, const Eigen::VectorXd& x,
                                       const std::vector<bool>& mask) {
  require(static_cast<std::size_t>(x.size()) == mask.size(), "mask length does not match x");
  require(W_h.cols() == x.size(), "W_h columns do not match x");
  Eigen::VectorXd xt = x;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) xt(static_cast<Eigen::Index>(i)) = 0.0;
  const Eigen::VectorXd z = W_h * x;
  const Eigen::VectorXd zt = W_h * xt;
  CorruptionCheck c;
  c.dz = z - zt;
  c.norm = c.dz.norm();
  const Eigen::VectorXd direct = W_h * (x - xt);
  c.max_abs_error = c.dz.size() ? (c.dz - direct).cwiseAbs().maxCoeff() : 0.0;
  c.holds = c.max_abs_error <= 1e-12;
  return c;
}

std::size_t distinct_columns(const DenseMatrix& M) {
  std::set<std::vector<double>> seen;
  for (Eigen::Index j = 0; j < M.cols(); ++j) {
    std::vector<double> col(M.col(j).data(), M.col(j).data() + M.rows());
    seen.insert(std::move(col));
  }
  return seen.size();
}

std::vector<OracleRow> run_oracle_sweep(const OracleSweepSpec& spec) {
  require(!spec.clients.empty(), "oracle sweep: empty client list");
  require(spec.d >= 1 && spec.n >= 1 && spec.m >= 1, "oracle sweep: d, n and m must be positive");
  const RngStream root(spec.seed);
  CorruptionSpec corruption;
  corruption.semantics = spec.semantics;
  corruption.ratio = spec.p;
  std::vector<OracleRow> rows;
  for (auto K : spec.clients) {
    require(K >= 1, "oracle sweep: client count must be positive");
    std::vector<LinearAEProblem> problems;
    for (std::size_t k = 0; k < K; ++k) {
      RngStream data_rng = root.derive("client-data", static_cast<std::int64_t>(k));
      DenseMatrix X(static_cast<Eigen::Index>(spec.d), static_cast<Eigen::Index>(spec.n));
      for (Eigen::Index i = 0; i < X.size(); ++i) X.data()[i] = data_rng.uniform();
      problems.push_back(
          build_problem(X, spec.m, corruption, root.derive("client-mask", static_cast<std::int64_t>(k))));
    }
    LinearAEProblem all = problems.front();
    if (K > 1) {
      const Eigen::Index d = all.Xtilde.rows();
      DenseMatrix Xt(d, 0), Xb(d, 0);
      for (const auto& p : problems) {
        DenseMatrix t(d, Xt.cols() + p.Xtilde.cols()), b(d, Xb.cols() + p.Xbar.cols());
        t << Xt, p.Xtilde;
        b << Xb, p.Xbar;
        Xt = std::move(t);
        Xb = std::move(b);
      }
      all.Xtilde = std::move(Xt);
      all.Xbar = std::move(Xb);
    }
    const double lambda = default_lambda(all.Xtilde);
    const LinearSolution sol = solve_global(problems, lambda);
    const GdResult gd = gd_linear_ae(all, spec.gd_steps, 0.0, lambda, spec.seed);
    OracleRow row;
    row.K = K;
    row.n = spec.n;
    row.m = spec.m;
    row.p = spec.p;
    row.lambda = lambda;
    row.residual_closed_form = sol.residual;
    row.residual_gd = linear_residual(gd.W, all.Xtilde, all.Xbar);
    row.gap = row.residual_gd - row.residual_closed_form;
    rows.push_back(row);
  }
  return rows;
}

void write_oracle_csv(const std::filesystem::path& path, std::span<const OracleRow> rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "K,n,m,p,lambda,residual_closed_form,residual_gd,gap\n" << std::setprecision(17);
  for (const auto& r : rows)
    out << r.K << ',' << r.n << ',' << r.m << ',' << r.p << ',' << r.lambda << ','
        << r.residual_closed_form << ',' << r.residual_gd << ',' << r.gap << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace fedmae
