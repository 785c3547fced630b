#pragma once

// Central-finite-difference gradient checking. The graph under test is
// executed in double precision regardless of the production scalar type:
// callers hand over a builder working on TensorT<double>.

#include <functional>
#include <string>
#include <vector>

#include "sstm/tensor.hpp"

namespace sstm {

struct GradCheckReport {
  bool pass = false;
  double max_rel_err = 0.0;
  double tol = 0.0;
  int worst_input = -1;
  int64_t worst_elem = -1;
  std::vector<double> per_input_err;

  std::string summary() const {
    std::string s = pass ? "pass" : "FAIL";
    s += " max_rel_err=" + std::to_string(max_rel_err) + " tol=" + std::to_string(tol);
    if (worst_input >= 0)
      s += " (input " + std::to_string(worst_input) + ", elem " + std::to_string(worst_elem) + ")";
    return s;
  }
};

using GradFn = std::function<TensorT<double>(const std::vector<TensorT<double>>&)>;

// 'probe_cap' > 0 limits the probed elements per input to a deterministic
// stride sample (used for larger composite graphs).
inline GradCheckReport grad_check(const GradFn& f, std::vector<TensorT<double>> inputs,
                                  double eps = 1e-5, double tol = 1e-4,
                                  int64_t probe_cap = 0) {
  for (auto& in : inputs) in.set_requires_grad(true);

  std::vector<std::vector<double>> analytic;
  {
    TapeT<double> tape;
    TapeT<double>::Scope scope(tape);
    TensorT<double> root = f(inputs);
    tape.backward(root);
    for (auto& in : inputs) analytic.push_back(in.grad());
  }

  auto eval = [&]() { return f(inputs).item(); };

  GradCheckReport rep;
  rep.tol = tol;
  rep.per_input_err.assign(inputs.size(), 0.0);
  for (size_t ii = 0; ii < inputs.size(); ++ii) {
    auto& in = inputs[ii];
    const int64_t n = in.size();
    int64_t stride = 1;
    if (probe_cap > 0 && n > probe_cap) stride = (n + probe_cap - 1) / probe_cap;
    for (int64_t j = 0; j < n; j += stride) {
      double* v = in.data() + j;
      const double saved = *v;
      *v = saved + eps;
      const double y1 = eval();
      *v = saved - eps;
      const double y2 = eval();
      *v = saved;
      const double num = (y1 - y2) / (2.0 * eps);
      const double ana = analytic[ii][static_cast<size_t>(j)];
      const double denom = std::max({1.0, std::fabs(num), std::fabs(ana)});
      const double err = std::fabs(num - ana) / denom;
      rep.per_input_err[ii] = std::max(rep.per_input_err[ii], err);
      if (err > rep.max_rel_err) {
        rep.max_rel_err = err;
        rep.worst_input = static_cast<int>(ii);
        rep.worst_elem = j;
      }
    }
  }
  rep.pass = rep.max_rel_err <= tol;
  return rep;
}

}  // namespace sstm
