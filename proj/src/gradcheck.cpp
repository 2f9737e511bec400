#include "mambatrack/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace mambatrack {

GradCheckResult grad_check(const std::function<Tensor()>& forward,
                           const std::vector<std::pair<std::string, Tensor>>& params,
                           const GradCheckOptions& opts) {
  for (auto& [name, p] : params) {
    if (!p.requires_grad())
      throw std::invalid_argument("grad_check: parameter '" + name + "' has requires_grad off");
    Tensor(p).zero_grad();
  }

  // Analytic pass.
  {
    Graph g;
    GraphContext ctx(g);
    Tensor loss = forward();
    g.backward(loss);
  }

  std::mt19937_64 rng(opts.seed);
  GradCheckResult res;
  bool injected = false;
  for (auto& [name, p] : params) {
    Tensor param = p;  // shared handle
    const int64_t n = param.numel();
    std::vector<int64_t> idx;
    if (opts.entries_per_tensor <= 0 || n <= opts.entries_per_tensor) {
      idx.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    } else {
      std::uniform_int_distribution<int64_t> pick(0, n - 1);
      for (int i = 0; i < opts.entries_per_tensor; ++i) idx.push_back(pick(rng));
      std::sort(idx.begin(), idx.end());
      idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
    }
    const double* g = param.grad_ptr();
    for (int64_t i : idx) {
      double analytic = g ? g[i] : 0.0;
      if (!injected && opts.inject_error != 0.0) {
        analytic += opts.inject_error * (1.0 + std::fabs(analytic));
        injected = true;
      }
      const double saved = param.data()[i];
      param.data()[i] = saved + opts.step;
      const double lp = forward().item();
      param.data()[i] = saved - opts.step;
      const double lm = forward().item();
      param.data()[i] = saved;
      const double numeric = (lp - lm) / (2.0 * opts.step);
      const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-2});
      const double rel = std::fabs(analytic - numeric) / denom;
      ++res.entries_checked;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = name;
        res.worst_index = i;
        res.worst_analytic = analytic;
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace mambatrack
