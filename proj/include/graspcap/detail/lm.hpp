#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace graspcap::detail {

struct LmOptions {
  int max_iterations = 100;
  double initial_damping = 1e-3;
  double min_damping = 1e-12;
  double max_damping = 1e12;
  double function_tolerance = 1e-12;  // relative cost decrease
  double step_tolerance = 1e-12;      // relative step norm
  double gradient_tolerance = 1e-12;  // gradient infinity norm
  double absolute_cost_tolerance = 0.0;
};

struct LmReport {
  double initial_cost = 0;
  double final_cost = 0;
  int iterations = 0;  // accepted steps
  bool converged = false;
  std::vector<double> cost_history;  // initial cost then one entry per accepted step
};

// Levenberg-Marquardt loop over a problem exposing:
//   double cost()                 cost at the current state (may be +inf)
//   double linearize()            build damped-free normal equations, return |g|_inf
//   bool solve_step(double lambda) compute a step for the current linearization
//   double step_norm(), state_norm()
//   double trial_cost()           cost at state + step (+inf when invalid)
//   void accept_step()
// Only steps that strictly reduce the cost are accepted, so the accepted cost
// sequence is monotone.
template <class Problem>
LmReport levenberg_marquardt(Problem& problem, const LmOptions& opts) {
  LmReport report;
  double cost = problem.cost();
  report.initial_cost = cost;
  report.cost_history.push_back(cost);
  report.final_cost = cost;
  if (!std::isfinite(cost)) return report;
  if (cost <= opts.absolute_cost_tolerance) {
    report.converged = true;
    return report;
  }

  double lambda = opts.initial_damping;
  while (report.iterations < opts.max_iterations) {
    const double gnorm = problem.linearize();
    if (gnorm <= opts.gradient_tolerance) {
      report.converged = true;
      break;
    }

    bool accepted = false;
    bool stop = false;
    while (!accepted) {
      if (lambda > opts.max_damping) {
        // No descent direction left at machine precision.
        report.converged = true;
        stop = true;
        break;
      }
      if (!problem.solve_step(lambda)) {
        lambda *= 10.0;
        continue;
      }
      const double step = problem.step_norm();
      if (step <= opts.step_tolerance * (problem.state_norm() + opts.step_tolerance)) {
        report.converged = true;
        stop = true;
        break;
      }
      const double trial = problem.trial_cost();
      if (std::isfinite(trial) && trial < cost) {
        problem.accept_step();
        const double rel = (cost - trial) / std::max(cost, std::numeric_limits<double>::min());
        cost = trial;
        report.cost_history.push_back(cost);
        ++report.iterations;
        lambda = std::max(lambda / 3.0, opts.min_damping);
        accepted = true;
        if (rel <= opts.function_tolerance || cost <= opts.absolute_cost_tolerance) {
          report.converged = true;
          stop = true;
        }
      } else {
        lambda *= 4.0;
      }
    }
    if (stop) break;
  }
  report.final_cost = cost;
  return report;
}

}  // namespace graspcap::detail
