#include "pmf/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "pmf/tape.hpp"

namespace pmf {

namespace {

double eval_loss(const std::function<Tensor()>& loss_fn) {
  NoGradScope scope;
  const double v = loss_fn().item();
  if (!std::isfinite(v)) throw Error("finite_diff_check: non-finite loss");
  return v;
}

}  // namespace

GradCheckReport finite_diff_check(const std::function<Tensor()>& loss_fn,
                                  const std::vector<NamedTensor>& params, double eps,
                                  std::size_t max_coords_per_param) {
  if (!(eps > 0.0)) throw Error("finite_diff_check: eps must be positive");
  for (const auto& [name, t] : params) {
    if (t.dtype() != DType::f64) throw Error("finite_diff_check: " + name + " is not float64");
    if (!t.requires_grad()) throw Error("finite_diff_check: " + name + " does not require grad");
  }

  for (const auto& [name, t] : params) {
    Tensor(t).clear_grad();
  }
  {
    Tape tape;
    RecordingScope rec(tape);
    Tensor loss = loss_fn();
    if (!std::isfinite(loss.item())) throw Error("finite_diff_check: non-finite loss");
    backward(loss, tape);
  }

  GradCheckReport report;
  for (const auto& [name, param] : params) {
    Tensor t = param;
    const std::size_t n = t.numel();
    std::vector<double> analytic = t.has_grad() ? t.grad().to_vector() : std::vector<double>(n, 0.0);
    std::size_t step = 1;
    if (max_coords_per_param > 0 && n > max_coords_per_param) {
      step = (n + max_coords_per_param - 1) / max_coords_per_param;
    }
    for (std::size_t i = 0; i < n; i += step) {
      const double orig = t.at(i);
      t.set(i, orig + eps);
      const double plus = eval_loss(loss_fn);
      t.set(i, orig - eps);
      const double minus = eval_loss(loss_fn);
      t.set(i, orig);
      const double numeric = (plus - minus) / (2.0 * eps);
      const double rel = std::abs(analytic[i] - numeric) / std::max(std::abs(numeric), 1e-8);
      ++report.coordinates;
      if (report.worst.empty() || rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return report;
}

}  // namespace pmf
