#include "fedmae/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace fedmae {

GradCheckReport grad_check(const DifferentiableFn& fn, ParamStore& params, double tol,
                           double magnitude_floor) {
  GradCheckReport report;
  report.tolerance = tol;

  const double base = fn(params);
  if (!std::isfinite(base)) {
    report.diagnostic = "function value is non-finite at the unperturbed parameters";
    return report;
  }
  std::map<std::string, Tensor> analytic;
  for (auto& [name, p] : params) analytic.emplace(name, p.grad);

  for (const auto& name : params.names()) {
    GradCheckEntry entry;
    entry.name = name;
    const Tensor& grad = analytic.at(name);
    const std::size_t count = params.at(name).value.size();
    for (std::size_t i = 0; i < count; ++i) {
      double& slot = params.at(name).value[i];
      const double orig = slot;
      const double h = 1e-5 * (1.0 + std::abs(orig));
      slot = orig + h;
      const double fp = fn(params);
      slot = orig - h;
      const double fm = fn(params);
      slot = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        report.diagnostic = "function value is non-finite when perturbing " + name + "[" +
                            std::to_string(i) + "]";
        report.passed = false;
        return report;
      }
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = grad[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), magnitude_floor});
      const double rel = std::abs(a - numeric) / denom;
      if (i == 0 || rel > entry.max_rel_error) {
        entry.max_rel_error = rel;
        entry.worst_index = i;
        entry.analytic = a;
        entry.numeric = numeric;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  }
  // Leave the analytic gradients in the store as the caller last saw them.
  fn(params);
  report.passed = report.max_rel_error <= tol;
  return report;
}

}  // namespace fedmae
