#include <algorithm>
#include <cmath>

#include "mrt/autodiff.hpp"
#include "mrt/error.hpp"

namespace mrt {
namespace {

double evaluate(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const Tensor& t : inputs) vars.push_back(tape.constant(t));
  const Var out = f(tape, vars);
  return out.value().item();
}

}  // namespace

GradcheckResult gradcheck(const ScalarFn& f, const std::vector<Tensor>& inputs, double eps) {
  if (!(eps > 0.0)) throw Error("gradcheck: eps must be positive");
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& t : inputs) vars.push_back(tape.leaf(t));
    const Var out = f(tape, vars);
    if (out.value().size() != 1 || out.value().rank() > 1) {
      throw ShapeError("gradcheck: function output must be scalar, got " + shape_str(out.shape()));
    }
    tape.backward(out);
    for (const Var& v : vars) analytic.push_back(tape.grad(v));
  }

  GradcheckResult result;
  std::vector<Tensor> work = inputs;
  for (std::size_t k = 0; k < work.size(); ++k) {
    for (std::size_t i = 0; i < work[k].size(); ++i) {
      const double saved = work[k][i];
      work[k][i] = saved + eps;
      const double plus = evaluate(f, work);
      work[k][i] = saved - eps;
      const double minus = evaluate(f, work);
      work[k][i] = saved;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = analytic[k][i];
      const double rel = std::abs(a - numeric) / std::max(1e-12, std::abs(a) + std::abs(numeric));
      if (rel > result.max_rel_error) {
        result = {rel, k, i, a, numeric};
      }
    }
  }
  return result;
}

double gradcheck(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double eps) {
  const ScalarFn wrapped = [&f](Tape& tape, std::span<const Var> v) { return f(tape, v[0]); };
  return gradcheck(wrapped, std::vector<Tensor>{x}, eps).max_rel_error;
}

}  // namespace mrt
