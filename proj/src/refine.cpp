#include <cmath>
#include <deque>

#include "graspcap/contact.hpp"

namespace graspcap::contact {
namespace {

using hand::kNumAngles;

// Palm translation is optimized in units of a typical hand length so that all
// 26 coordinates move landmarks by comparable amounts.
constexpr double kLengthScale = 0.05;

ParamVector to_scaled(ParamVector g) {
  g.head<3>() *= kLengthScale;
  return g;
}

ParamVector from_scaled(ParamVector z) {
  z.head<3>() *= kLengthScale;
  return z;
}

// Zeroes components that would push an angle through an active limit.
ParamVector project_gradient(const ParamVector& g, const hand::HandParams& x,
                             const hand::HandSkeleton& skel) {
  ParamVector pg = g;
  for (int k = 0; k < kNumAngles; ++k) {
    const auto& spec = skel.angles()[k];
    const double a = x.angles[k];
    if ((a <= spec.lower && g[6 + k] > 0) || (a >= spec.upper && g[6 + k] < 0)) pg[6 + k] = 0;
  }
  return pg;
}

struct Pair {
  ParamVector s, y;
  double rho;
};

// Two-loop recursion: approximates -H^-1 g.
ParamVector lbfgs_direction(const ParamVector& g, const std::deque<Pair>& mem) {
  ParamVector q = g;
  std::vector<double> alpha(mem.size());
  for (std::size_t i = mem.size(); i-- > 0;) {
    alpha[i] = mem[i].rho * mem[i].s.dot(q);
    q -= alpha[i] * mem[i].y;
  }
  if (!mem.empty()) {
    const auto& last = mem.back();
    q *= last.s.dot(last.y) / last.y.squaredNorm();
  }
  for (std::size_t i = 0; i < mem.size(); ++i) {
    const double beta = mem[i].rho * mem[i].y.dot(q);
    q += (alpha[i] - beta) * mem[i].s;
  }
  return -q;
}

}  // namespace

RefineResult refine_grasp(const hand::HandParams& init, const CapsuleProxy& proxy,
                          const TriMesh& mesh, const ContactMap& cmap, const RefineConfig& cfg) {
  cfg.weights.validate();
  if (cfg.max_iterations < 0 || !(cfg.gradient_tolerance > 0) || cfg.memory < 1 ||
      !(cfg.armijo > 0 && cfg.armijo < 1) || !(cfg.max_initial_step > 0)) {
    throw Error(ErrorKind::ConfigError, "bad refinement configuration");
  }
  const auto& skel = proxy.skeleton();

  RefineResult res;
  res.params = init;
  res.params.angles = skel.clamp(init.angles);
  EnergyResult cur = contact_energy(res.params, proxy, mesh, cmap, cfg.weights);
  res.initial_energy = cur.energy;
  res.initial_terms = cur.terms;
  res.energy_history.push_back(cur.energy);

  std::deque<Pair> mem;
  ParamVector pg = project_gradient(cur.gradient, res.params, skel);
  bool first = true;
  while (true) {
    if (pg.norm() < cfg.gradient_tolerance) {
      res.converged = true;
      break;
    }
    if (res.iterations >= cfg.max_iterations) break;

    const ParamVector pg_z = to_scaled(pg);
    ParamVector dir = lbfgs_direction(pg_z, mem);
    for (int k = 0; k < 26; ++k) {
      if (pg[k] == 0 && cur.gradient[k] != 0) dir[k] = 0;  // active bound stays fixed
    }
    if (!(pg_z.dot(dir) < 0)) {
      mem.clear();
      dir = -pg_z;
    }
    dir = from_scaled(dir);
    double step = 1.0;
    if (first || mem.empty()) step = std::min(1.0, cfg.max_initial_step / dir.norm());

    // Backtracking on the projected path.
    bool accepted = false;
    hand::HandParams trial;
    EnergyResult next;
    ParamVector actual;
    for (int ls = 0; ls < 60; ++ls, step *= 0.5) {
      const ParamVector delta = step * dir;
      trial = res.params.perturbed(delta);
      trial.angles = skel.clamp(trial.angles);
      actual = delta;
      actual.tail<kNumAngles>() = trial.angles - res.params.angles;
      next = contact_energy(trial, proxy, mesh, cmap, cfg.weights);
      if (next.energy <= cur.energy + cfg.armijo * cur.gradient.dot(actual) &&
          next.energy <= cur.energy) {
        accepted = true;
        break;
      }
    }
    if (!accepted) break;  // no descent available at working precision

    ++res.iterations;
    first = false;
    ParamVector sz = actual;
    sz.head<3>() /= kLengthScale;
    const ParamVector y = to_scaled(next.gradient - cur.gradient);
    const double sy = sz.dot(y);
    if (sy > 1e-12 * sz.norm() * y.norm() && sy > 0) {
      mem.push_back({sz, y, 1.0 / sy});
      if (static_cast<int>(mem.size()) > cfg.memory) mem.pop_front();
    }
    res.params = trial;
    cur = next;
    res.energy_history.push_back(cur.energy);
    pg = project_gradient(cur.gradient, res.params, skel);
  }

  res.energy = cur.energy;
  res.terms = cur.terms;
  res.gradient_norm = pg.norm();
  return res;
}

}  // namespace graspcap::contact
