#include "ftq/qp_solver.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

namespace ftq {
namespace {

enum class Bound : std::uint8_t { kFree, kLower, kUpper };

// Newton step restricted to the free set. Falls back to a lightly regularised
// system when H_FF is singular and the reduced gradient is not in its range;
// the ratio test then stops the (long) descent step at the next bound.
Eigen::VectorXd free_step(const Eigen::MatrixXd& hff, const Eigen::VectorXd& rhs) {
  Eigen::LDLT<Eigen::MatrixXd> ldlt(hff);
  Eigen::VectorXd step = ldlt.solve(rhs);
  const double scale = std::max(1.0, rhs.lpNorm<Eigen::Infinity>());
  if (ldlt.info() == Eigen::Success && step.allFinite() &&
      (hff * step - rhs).lpNorm<Eigen::Infinity>() <= 1e-9 * scale) {
    return step;
  }
  const double diag = std::max(1.0, hff.diagonal().cwiseAbs().maxCoeff());
  Eigen::MatrixXd reg = hff;
  reg.diagonal().array() += 1e-8 * diag;
  return Eigen::LDLT<Eigen::MatrixXd>(reg).solve(rhs);
}

}  // namespace

double box_kkt_residual(const Eigen::MatrixXd& H, const Eigen::VectorXd& g,
                        const Eigen::VectorXd& lower, const Eigen::VectorXd& upper,
                        const Eigen::VectorXd& x) {
  const Eigen::VectorXd grad = H * x + g;
  double res = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    double r = 0.0;
    const bool at_lower = x(i) <= lower(i);
    const bool at_upper = x(i) >= upper(i);
    if (at_lower && at_upper) {
      r = 0.0;
    } else if (at_lower) {
      r = std::max(0.0, -grad(i));
    } else if (at_upper) {
      r = std::max(0.0, grad(i));
    } else {
      r = std::abs(grad(i));
    }
    // Primal infeasibility counts too.
    r = std::max({r, lower(i) - x(i), x(i) - upper(i)});
    res = std::max(res, r);
  }
  return res;
}

QpResult qp_solve(const Eigen::MatrixXd& H, const Eigen::VectorXd& g,
                  const Eigen::VectorXd& lower, const Eigen::VectorXd& upper,
                  const std::optional<Eigen::VectorXd>& warm_start, const QpOptions& options) {
  const Eigen::Index n = g.size();
  if (H.rows() != n || H.cols() != n || lower.size() != n || upper.size() != n)
    throw std::invalid_argument("qp_solve: dimension mismatch");
  if ((lower.array() > upper.array()).any())
    throw std::invalid_argument("qp_solve: lower bound exceeds upper bound");

  Eigen::VectorXd x = warm_start ? *warm_start : Eigen::VectorXd::Zero(n);
  if (x.size() != n) throw std::invalid_argument("qp_solve: warm start has wrong size");
  x = x.cwiseMax(lower).cwiseMin(upper);

  std::vector<Bound> status(n, Bound::kFree);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (x(i) <= lower(i)) {
      status[i] = Bound::kLower;
    } else if (x(i) >= upper(i)) {
      status[i] = Bound::kUpper;
    }
  }

  QpResult result;
  std::vector<Eigen::Index> free_idx;
  free_idx.reserve(n);
  int iter = 0;
  for (; iter < options.max_iterations; ++iter) {
    free_idx.clear();
    for (Eigen::Index i = 0; i < n; ++i)
      if (status[i] == Bound::kFree) free_idx.push_back(i);

    bool stationary = true;
    if (!free_idx.empty()) {
      const Eigen::VectorXd grad_free = (H(free_idx, Eigen::all) * x + g(free_idx)).eval();
      const Eigen::VectorXd step = free_step(H(free_idx, free_idx), -grad_free);
      // Ratio test against the box.
      double alpha = 1.0;
      Eigen::Index blocking = -1;
      Bound blocking_side = Bound::kFree;
      for (std::size_t k = 0; k < free_idx.size(); ++k) {
        const Eigen::Index i = free_idx[k];
        const double s = step(static_cast<Eigen::Index>(k));
        if (s < 0.0) {
          const double a = (lower(i) - x(i)) / s;
          if (a < alpha) {
            alpha = a;
            blocking = i;
            blocking_side = Bound::kLower;
          }
        } else if (s > 0.0) {
          const double a = (upper(i) - x(i)) / s;
          if (a < alpha) {
            alpha = a;
            blocking = i;
            blocking_side = Bound::kUpper;
          }
        }
      }
      alpha = std::max(alpha, 0.0);
      for (std::size_t k = 0; k < free_idx.size(); ++k)
        x(free_idx[k]) += alpha * step(static_cast<Eigen::Index>(k));
      if (blocking >= 0) {
        x(blocking) = blocking_side == Bound::kLower ? lower(blocking) : upper(blocking);
        status[blocking] = blocking_side;
        stationary = false;
      }
    }
    if (!stationary) continue;

    // Stationary on the working set: release the bound with the worst multiplier.
    const Eigen::VectorXd grad = H * x + g;
    Eigen::Index release = -1;
    double worst = options.tolerance;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (status[i] == Bound::kFree || lower(i) == upper(i)) continue;
      const double violation = status[i] == Bound::kLower ? -grad(i) : grad(i);
      if (violation > worst) {
        worst = violation;
        release = i;
      }
    }
    if (release < 0) {
      result.converged = true;
      ++iter;
      break;
    }
    status[release] = Bound::kFree;
  }

  const Eigen::VectorXd grad = H * x + g;
  result.multipliers = Eigen::VectorXd::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i)
    if (status[i] != Bound::kFree) result.multipliers(i) = grad(i);
  result.x = std::move(x);
  result.iterations = iter;
  result.objective = 0.5 * result.x.dot(H * result.x) + g.dot(result.x);
  result.kkt_residual = box_kkt_residual(H, g, lower, upper, result.x);
  return result;
}

}  // namespace ftq
