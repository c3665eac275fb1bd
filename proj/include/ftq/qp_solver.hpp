#pragma once

#include <Eigen/Dense>
#include <optional>

namespace ftq {

struct QpOptions {
  int max_iterations = 50;
  /// Multiplier sign tolerance used to decide optimality.
  double tolerance = 1e-10;
};

/// Bound multipliers z satisfy H x + g = z, z_i >= 0 at a lower bound,
/// z_i <= 0 at an upper bound and z_i = 0 for free variables.
struct QpResult {
  Eigen::VectorXd x;
  Eigen::VectorXd multipliers;
  double kkt_residual = 0.0;
  double objective = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Primal active-set method for
///   min 1/2 x'Hx + g'x  s.t.  lower <= x <= upper
/// with H symmetric positive semidefinite. The warm start (clipped into the box)
/// also seeds the working set: entries sitting on a bound start fixed there.
/// Hitting the iteration limit returns the current feasible iterate, which is the
/// best seen since the objective decreases monotonically.
QpResult qp_solve(const Eigen::MatrixXd& H, const Eigen::VectorXd& g,
                  const Eigen::VectorXd& lower, const Eigen::VectorXd& upper,
                  const std::optional<Eigen::VectorXd>& warm_start = std::nullopt,
                  const QpOptions& options = {});

/// Infinity norm of the projected gradient; zero exactly at a KKT point.
double box_kkt_residual(const Eigen::MatrixXd& H, const Eigen::VectorXd& g,
                        const Eigen::VectorXd& lower, const Eigen::VectorXd& upper,
                        const Eigen::VectorXd& x);

}  // namespace ftq
