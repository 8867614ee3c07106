#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "fedmae/data.hpp"
#include "fedmae/linalg.hpp"
#include "fedmae/mae.hpp"
#include "fedmae/rng.hpp"

namespace fedmae {

// Patch-zeroing corruption of flattened column vectors. Each group is a set
// of coordinates masked together (a "patch"). Empty groups means one group per
// coordinate.
struct CorruptionSpec {
  MaskSemantics semantics = MaskSemantics::Bernoulli;
  double ratio = 0.0;
  std::vector<std::vector<std::size_t>> groups;

  std::size_t group_count(std::size_t d) const { return groups.empty() ? d : groups.size(); }
  void validate(std::size_t d) const;
  // Groups matching patchify over an image flattened as [channel, y, x].
  static CorruptionSpec for_image(const ImageGeometry& geo, MaskSemantics semantics, double ratio);
};

// X is [d, n]. Xbar and Xtilde are [d, n*m]; column j holds sample j mod n
// and, in Xtilde, its variant j / n.
struct LinearAEProblem {
  DenseMatrix X;
  std::size_t m = 0;
  CorruptionSpec corruption;
  DenseMatrix Xbar;
  DenseMatrix Xtilde;

  std::size_t d() const { return static_cast<std::size_t>(X.rows()); }
  std::size_t n() const { return static_cast<std::size_t>(X.cols()); }
  std::size_t columns() const { return static_cast<std::size_t>(Xtilde.cols()); }
};

// Variant v is drawn from rng.derive("variant", v).
LinearAEProblem build_problem(const DenseMatrix& X, std::size_t m, const CorruptionSpec& corruption,
                              const RngStream& rng);

// Zeroes the masked groups of every column; mask[j][g] true means group g of
// column j is masked.
DenseMatrix apply_group_mask(const DenseMatrix& X, const CorruptionSpec& corruption,
                             const std::vector<std::vector<bool>>& mask);

struct LinearSolution {
  DenseMatrix W;
  double lambda = 0.0;
  double residual = 0.0;
};

// 0.5 / N * ||Xbar - W Xtilde||_F^2 over the N columns.
double linear_residual(const DenseMatrix& W, const DenseMatrix& Xtilde, const DenseMatrix& Xbar);
// 1e-8 * tr(Xtilde Xtilde^T) / d.
double default_lambda(const DenseMatrix& Xtilde);

LinearSolution solve_client(const LinearAEProblem& problem, double lambda);
// All problems' columns concatenated, then solved as one.
LinearSolution solve_global(std::span<const LinearAEProblem> problems, double lambda);

struct GdResult {
  DenseMatrix W;
  std::vector<double> objective;  // per accepted step, starting with the init
  double lr = 0.0;                // final step size
  std::size_t halvings = 0;
};

// Full-batch gradient descent on
//   0.5 / N (||Xbar - W Xtilde||^2 + lambda ||W||^2)
// from a small random init. lr <= 0 picks 1 / L for the Lipschitz constant L.
// A step that increases the objective is undone and lr halved; after 60
// halvings the run fails with NonFiniteError.
GdResult gd_linear_ae(const LinearAEProblem& problem, std::size_t steps, double lr, double lambda,
                      std::uint64_t init_seed = 0);

LowRankFactors rank_one_factorize(const DenseMatrix& W, std::size_t rank);

struct LinearizationGap {
  double relative_fit_residual = 0.0;  // ||Y - M Xtilde|| / ||Y||, M the best linear fit
  double model_loss = 0.0;             // 0.5/N ||Xbar - Y||^2
  double linear_fit_loss = 0.0;        // 0.5/N ||Xbar - M Xtilde||^2
  double closed_form_loss = 0.0;       // 0.5/N ||Xbar - W* Xtilde||^2
  double lambda = 0.0;
};

// Y holds the network's reconstructions of the columns of Xtilde.
LinearizationGap linearization_gap(const DenseMatrix& Xtilde, const DenseMatrix& Xbar,
                                   const DenseMatrix& Y, double lambda);
LinearizationGap linearization_gap(const std::function<DenseMatrix(const DenseMatrix&)>& model,
                                   const DenseMatrix& Xtilde, const DenseMatrix& Xbar,
                                   double lambda);
// Columns are flattened patch sequences, corrupted by zeroing the plan's
// masked patches. lambda < 0 uses default_lambda.
LinearizationGap linearization_gap(const MaeModel& model, const PatchSequence& data,
                                   const MaskPlan& plan, double lambda = -1.0);

struct CorruptionCheck {
  Eigen::VectorXd dz;           // W_h x - W_h x~
  double norm = 0.0;            // ||dz||
  double max_abs_error = 0.0;   // max |dz - W_h (x - x~)|
  bool holds = false;           // max_abs_error <= 1e-12
};
// mask[i] true zeroes coordinate i of x.
CorruptionCheck corruption_equivalence(const DenseMatrix& W_h, const Eigen::VectorXd& x,
                                       const std::vector<bool>& mask);

std::size_t distinct_columns(const DenseMatrix& M);

struct OracleRow {
  std::size_t K = 0, n = 0, m = 0;
  double p = 0.0, lambda = 0.0;
  double residual_closed_form = 0.0;
  double residual_gd = 0.0;
  double gap = 0.0;  // residual_gd - residual_closed_form
};

struct OracleSweepSpec {
  std::vector<std::size_t> clients{1, 2, 5};
  std::size_t d = 8;
  std::size_t n = 6;
  std::size_t m = 10;
  double p = 0.5;
  MaskSemantics semantics = MaskSemantics::Bernoulli;
  std::size_t gd_steps = 2000;
  std::uint64_t seed = 0;
};

// Residual of the global closed form and of the GD oracle as the client count
// grows. Measurement only.
std::vector<OracleRow> run_oracle_sweep(const OracleSweepSpec& spec);
void write_oracle_csv(const std::filesystem::path& path, std::span<const OracleRow> rows);

}  // namespace fedmae
