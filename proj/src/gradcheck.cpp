#include "embedkit/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace embedkit {

namespace {

double evaluate(const std::function<Tensor()>& f) {
  Tensor out = f();
  return out.item();
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<Parameter>& params,
                           const GradCheckOptions& options) {
  if (!(options.step > 0.0)) throw Error(Errc::InvalidConfig, "grad_check step must be positive");

  std::vector<bool> saved_flags;
  for (const auto& p : params) {
    saved_flags.push_back(p.tensor.requires_grad());
    p.tensor.node()->requires_grad = true;
    p.tensor.node()->grad.clear();
  }

  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = f();
    backward(loss);
  }

  const double base = evaluate(f);
  if (evaluate(f) != base) {
    throw Error(Errc::NonDeterministicFunction, "two evaluations at identical parameters differ");
  }

  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor t = params[p].tensor;
    auto values = t.mutable_values();
    const std::vector<double> analytic = t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                                      : std::vector<double>(values.size(), 0.0);
    const Index n = t.numel();
    const Index probes = options.max_coordinates > 0 ? std::min(n, options.max_coordinates) : n;

    GradCheckEntry entry{params[p].name, 0.0, -1, 0};
    for (Index k = 0; k < probes; ++k) {
      const Index i = probes == n ? k : (k * n) / probes;
      const auto idx = static_cast<std::size_t>(i);
      const double original = values[idx];
      values[idx] = original + options.step;
      const double plus = evaluate(f);
      values[idx] = original - options.step;
      const double minus = evaluate(f);
      values[idx] = original;

      const double numeric = (plus - minus) / (2.0 * options.step);
      const double a = analytic[idx];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      if (entry.worst_coordinate < 0 || rel > entry.max_rel_error) {
        entry.max_rel_error = rel;
        entry.worst_coordinate = i;
      }
      ++entry.coordinates_checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  }

  for (std::size_t p = 0; p < params.size(); ++p) {
    params[p].tensor.node()->requires_grad = saved_flags[p];
    params[p].tensor.node()->grad.clear();
  }
  return report;
}

}  // namespace embedkit
