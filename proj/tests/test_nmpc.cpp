#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "ftq/nmpc.hpp"
#include "ftq/qp_solver.hpp"
#include "property_checks.hpp"

using namespace ftq;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

using checks::brute_force_qp;
using checks::max_rel_error;
using checks::random_state;
using checks::uni;

double objective(const MatrixXd& H, const VectorXd& g, const VectorXd& x) {
  return checks::qp_objective(H, g, x);
}

OcpProblem hover_problem(int nodes = 20, double horizon = 1.0) {
  const QuadParams params;
  OcpProblem p = OcpProblem::make(params, CostWeights::from_running({}), horizon, nodes);
  p.references = build_reference(HoverTarget{Vec3(0, 0, 2)}, 0.0, p);
  return p;
}

}  // namespace

// ---------------------------------------------------------------- attitude split

TEST_CASE("attitude split examples") {
  const double h = std::sqrt(0.5);
  {
    const Quat q(Eigen::AngleAxisd(0.7, Vec3(1, 2, 3).normalized()));
    const AttitudeSplit s = attitude_error_split(q, q);
    CHECK(s.yaw.coeffs().isApprox(Quat::Identity().coeffs(), 1e-15));
    CHECK(s.tilt.coeffs().isApprox(Quat::Identity().coeffs(), 1e-15));
  }
  {
    // q_ref o q^-1 = 90 degree yaw with q = identity.
    const AttitudeSplit s = attitude_error_split(Quat::Identity(), Quat(h, 0, 0, h));
    CHECK((quat_to_vec(s.yaw) - Vec4(h, 0, 0, h)).norm() < 1e-15);
    CHECK((quat_to_vec(s.tilt) - Vec4(1, 0, 0, 0)).norm() < 1e-15);
  }
  {
    const AttitudeSplit s = attitude_error_split(Quat::Identity(), Quat(h, h, 0, 0));
    CHECK((quat_to_vec(s.yaw) - Vec4(1, 0, 0, 0)).norm() < 1e-15);
    CHECK((quat_to_vec(s.tilt) - Vec4(h, h, 0, 0)).norm() < 1e-15);
  }
  {
    // Degenerate: pure 180 degree tilt has no yaw part.
    const AttitudeSplit s = attitude_error_split(Quat(0, 1, 0, 0), Quat::Identity());
    CHECK(s.yaw.coeffs() == Quat::Identity().coeffs());
    CHECK(s.tilt.coeffs() == s.error.coeffs());
  }
  CHECK_THROWS_AS(attitude_error_split(Quat(2, 0, 0, 0), Quat::Identity()), std::invalid_argument);
}

TEST_CASE("attitude split recomposes over 1e5 samples") {
  CHECK(checks::split_recomposition_error(100000, 99) < 1e-10);
}

// ---------------------------------------------------------------- cost

TEST_CASE("stage residual examples") {
  const QuadParams params;
  ReferencePoint ref;
  ref.p = Vec3(1, 2, 3);
  ref.v = Vec3(0.5, 0, 0);
  ref.thrust = ref.input = Vec4::Constant(params.hover_thrust_per_rotor());
  State s;
  s.p = ref.p;
  s.v = ref.v;
  s.thrust = ref.thrust;
  const StageResidual zero = stage_residual(s, ref.input, ref, StageWeights{});
  CHECK(zero.residual.norm() == 0.0);
  CHECK(zero.cost == 0.0);

  // Fault-mode weights ignore a pure 45 degree yaw error.
  State yawed = s;
  yawed.q = Quat(Eigen::AngleAxisd(0.25 * 3.14159265358979, Vec3::UnitZ()));
  const CostWeights fault = relax_yaw(CostWeights::from_running({}));
  CHECK(stage_residual(yawed, ref.input, ref, fault.running).cost == 0.0);
  CHECK(stage_residual(yawed, ref.input, ref, StageWeights{}).cost > 0.0);

  StageWeights unit;
  unit.position = Vec3::Ones();
  unit.tilt = unit.yaw = 0.0;
  unit.velocity = unit.omega = Vec3::Zero();
  unit.thrust = unit.input = Vec4::Zero();
  State off = s;
  off.p += Vec3(1, 0, 0);
  CHECK(stage_residual(off, ref.input, ref, unit).cost == 1.0);

  CHECK(stage_residual(s, ref.input, ref, StageWeights{}, true).residual.size() ==
        kStateResidualDim);
}

TEST_CASE("fault-mode cost is invariant to yaw") {
  CHECK(checks::fault_yaw_invariance(10000, 31, 0.0) < 1e-12);
  CHECK(checks::fault_yaw_invariance(10000, 32, 0.05) < 1e-12);
}

TEST_CASE("fault-mode update") {
  const OcpProblem p = hover_problem();
  const OcpProblem same = update_fault_mode(p, FaultStatus::none());
  CHECK(same.input_lower == p.input_lower);
  CHECK(same.input_upper == p.input_upper);
  CHECK(same.weights.running.yaw == p.weights.running.yaw);

  const OcpProblem f = update_fault_mode(p, FaultStatus::rotor(2));
  CHECK(f.input_lower(1) == 0.0);
  CHECK(f.input_upper(1) == 0.0);
  CHECK(f.input_upper(0) == 8.5);
  CHECK(f.weights.running.yaw == 0.0);
  CHECK(f.weights.terminal.yaw == 0.0);
  CHECK(f.weights.running.omega.z() == 0.0);
  CHECK(f.weights.running.omega.x() == p.weights.running.omega.x());
  CHECK(f.weights.running.position == p.weights.running.position);

  const OcpProblem back = update_fault_mode(f, FaultStatus::none());
  CHECK(back.input_lower == p.input_lower);
  CHECK(back.input_upper == p.input_upper);
  CHECK(back.weights.running.yaw == p.weights.running.yaw);
  CHECK(back.weights.running.omega == p.weights.running.omega);
  CHECK(back.weights.terminal.omega == p.weights.terminal.omega);

  CHECK_THROWS_AS(update_fault_mode(p, FaultStatus::rotor(5)), std::invalid_argument);
  CHECK_THROWS_AS(update_fault_mode(p, FaultStatus::rotor(0)), std::invalid_argument);

  OcpProblem damped = p;
  damped.fault_yaw_rate_weight = 0.05;
  CHECK(update_fault_mode(damped, FaultStatus::rotor(1)).weights.running.omega.z() == 0.05);
  CHECK_THROWS_AS(relax_yaw(p.weights, -1.0), std::invalid_argument);
}

TEST_CASE("position error clamp") {
  CHECK(clamp_position_error(Vec3(5, 0, 0), 2.0) == Vec3(2, 0, 0));
  CHECK(clamp_position_error(Vec3(0.3, -0.4, 1), 2.0) == Vec3(0.3, -0.4, 1));
  CHECK(clamp_position_error(Vec3(3, 4, 0), 2.5).isApprox(Vec3(1.5, 2.0, 0)));
  CHECK_THROWS_AS(clamp_position_error(Vec3::Ones(), 0.0), std::invalid_argument);
}

TEST_CASE("hover references") {
  OcpProblem p = hover_problem();
  const auto refs = build_reference(HoverTarget{Vec3(0, 0, 2)}, 0.0, p);
  REQUIRE(refs.size() == 21);
  const double hover = p.params.hover_thrust_per_rotor();
  for (const auto& r : refs) {
    CHECK(r.p == Vec3(0, 0, 2));
    CHECK(r.q.coeffs() == Quat::Identity().coeffs());
    CHECK(r.omega == Vec3::Zero());
    CHECK(r.thrust == Vec4::Constant(hover));
    CHECK(r.input == Vec4::Constant(hover));
  }
  p.fault = FaultStatus::rotor(3);
  const auto fault_refs = build_reference(HoverTarget{}, 0.0, p);
  const double third = p.params.mass * p.params.gravity / 3.0;
  CHECK(fault_refs[5].thrust.isApprox(Vec4(third, third, 0, third)));
  CHECK(fault_refs[5].input(2) == 0.0);

  Trajectory short_traj{[](double) { return ReferencePoint{}; }, 0.0, 0.5};
  CHECK_THROWS_AS(build_reference(short_traj, 0.0, p), std::out_of_range);
}

// ---------------------------------------------------------------- sensitivities

TEST_CASE("continuous Jacobians match central differences") {
  CHECK(checks::jacobian_fd_error(1000, 1) < 1e-5);

  const QuadParams params;
  const Linearization lin = linearize_dynamics(State::hover(params), Vec4::Zero(), params);
  CHECK(lin.A.block<3, 3>(idx::kPos, idx::kVel) == Mat3::Identity());
  for (int i = 0; i < 4; ++i) {
    CHECK(lin.A(idx::kThrust + i, idx::kThrust + i) == doctest::Approx(-1.0 / params.motor_tau));
    CHECK(lin.B(idx::kThrust + i, i) == doctest::Approx(1.0 / params.motor_tau));
  }
}

TEST_CASE("discrete shooting sensitivities match central differences") {
  const QuadParams params;
  std::mt19937_64 rng(2);
  const double h = 1e-6;
  double worst = 0.0;
  for (int n = 0; n < 100; ++n) {
    const StateVector x = random_state(rng);
    const Vec4 u(uni(rng, 0, 8.5), uni(rng, 0, 8.5), uni(rng, 0, 8.5), uni(rng, 0, 8.5));
    const DiscreteStep step = discretize(x, u, params, 0.05, 2);
    StateVector direct = x;
    for (int s = 0; s < 2; ++s) direct = rk4_step(direct, u, params, 0.025);
    CHECK((step.next - direct).norm() < 1e-12);
    StateMatrix a_fd;
    for (int j = 0; j < kStateDim; ++j) {
      StateVector xp = x, xm = x;
      xp(j) += h;
      xm(j) -= h;
      a_fd.col(j) = (discretize(xp, u, params, 0.05, 2).next -
                     discretize(xm, u, params, 0.05, 2).next) / (2 * h);
    }
    InputMatrix b_fd;
    for (int j = 0; j < kInputDim; ++j) {
      Vec4 up = u, um = u;
      up(j) += h;
      um(j) -= h;
      b_fd.col(j) = (discretize(x, up, params, 0.05, 2).next -
                     discretize(x, um, params, 0.05, 2).next) / (2 * h);
    }
    worst = std::max({worst, max_rel_error(step.A, a_fd), max_rel_error(step.B, b_fd)});
  }
  CHECK(worst < 1e-5);
}

// ---------------------------------------------------------------- box QP

TEST_CASE("qp: separable and unconstrained cases") {
  const int n = 8;
  const QpResult r = qp_solve(MatrixXd::Identity(n, n), -VectorXd::Ones(n), VectorXd::Zero(n),
                              VectorXd::Constant(n, 0.5));
  CHECK(r.converged);
  CHECK((r.x - VectorXd::Constant(n, 0.5)).norm() < 1e-15);
  CHECK((r.multipliers - VectorXd::Constant(n, -0.5)).norm() < 1e-15);

  std::mt19937_64 rng(4);
  MatrixXd a(n, n);
  for (int i = 0; i < n * n; ++i) a(i) = uni(rng, -1, 1);
  const MatrixXd H = a * a.transpose() + MatrixXd::Identity(n, n);
  VectorXd g(n);
  for (int i = 0; i < n; ++i) g(i) = uni(rng, -1, 1);
  const QpResult free = qp_solve(H, g, VectorXd::Constant(n, -1e6), VectorXd::Constant(n, 1e6));
  CHECK((free.x + H.ldlt().solve(g)).norm() < 1e-10);
  CHECK(free.multipliers.norm() < 1e-10);
}

TEST_CASE("qp: exhaustive active-set oracle on 6-dim problems") {
  const checks::QpOracleStats s = checks::qp_oracle_6dim(300, 8);
  CHECK(s.all_converged);
  CHECK(s.x_error < 1e-8);
  CHECK(s.objective_error < 1e-8);
  CHECK(s.kkt < 1e-6);
}

TEST_CASE("qp: reported KKT residual and multipliers are consistent") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 10;
    MatrixXd a(n, n);
    for (int i = 0; i < n * n; ++i) a(i) = uni(rng, -1, 1);
    const MatrixXd H = a * a.transpose();
    VectorXd g(n), lo(n), hi(n);
    for (int i = 0; i < n; ++i) {
      g(i) = uni(rng, -3, 3);
      lo(i) = uni(rng, -1, 0);
      hi(i) = lo(i) + uni(rng, 0, 1.5);
    }
    const QpResult r = qp_solve(H, g, lo, hi);
    REQUIRE(r.converged);
    CHECK(r.kkt_residual == doctest::Approx(box_kkt_residual(H, g, lo, hi, r.x)));
    CHECK(r.kkt_residual < 1e-6);
    const VectorXd z = H * r.x + g;
    CHECK((r.multipliers - z).lpNorm<Eigen::Infinity>() < 1e-9);
  }
}

TEST_CASE("qp: 20-dim PSD problems agree with exhaustive 6-dim subproblems") {
  // Optimality of the full problem implies optimality of every coordinate block
  // with the rest held fixed, so each 6-subset can be checked exhaustively.
  std::mt19937_64 rng(12);
  double worst = 0.0;
  double worst_kkt = 0.0;
  for (int trial = 0; trial < 40; ++trial) {
    const int n = 20;
    MatrixXd a(n, 16);
    for (int i = 0; i < a.size(); ++i) a(i) = uni(rng, -1, 1);
    const MatrixXd H = a * a.transpose();  // rank 16: singular
    VectorXd g(n), lo(n), hi(n);
    for (int i = 0; i < n; ++i) {
      g(i) = uni(rng, -5, 5);
      lo(i) = uni(rng, -1, 0);
      hi(i) = lo(i) + uni(rng, 0.1, 1.5);
    }
    const QpResult r = qp_solve(H, g, lo, hi, std::nullopt, QpOptions{500, 1e-10});
    REQUIRE(r.converged);
    worst_kkt = std::max(worst_kkt, r.kkt_residual);
    for (int sub = 0; sub < 5; ++sub) {
      std::vector<int> idx(n);
      for (int i = 0; i < n; ++i) idx[i] = i;
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(6);
      MatrixXd hs(6, 6);
      VectorXd gs(6), ls(6), us(6), xs(6);
      VectorXd rest = r.x;
      for (int i : idx) rest(i) = 0.0;
      const VectorXd coupling = H * rest;
      for (int p = 0; p < 6; ++p) {
        gs(p) = g(idx[p]) + coupling(idx[p]);
        ls(p) = lo(idx[p]);
        us(p) = hi(idx[p]);
        xs(p) = r.x(idx[p]);
        for (int q = 0; q < 6; ++q) hs(p, q) = H(idx[p], idx[q]);
      }
      const VectorXd oracle = brute_force_qp(hs, gs, ls, us);
      worst = std::max(worst, std::abs(objective(hs, gs, xs) - objective(hs, gs, oracle)));
    }
  }
  CHECK(worst < 1e-8);
  CHECK(worst_kkt < 1e-6);
}

TEST_CASE("qp: iteration cap returns a feasible iterate with a status flag") {
  std::mt19937_64 rng(13);
  const int n = 40;
  MatrixXd a(n, n);
  for (int i = 0; i < a.size(); ++i) a(i) = uni(rng, -1, 1);
  const MatrixXd H = a * a.transpose();
  VectorXd g(n);
  for (int i = 0; i < n; ++i) g(i) = uni(rng, -50, 50);
  const VectorXd lo = VectorXd::Constant(n, -0.1);
  const VectorXd hi = VectorXd::Constant(n, 0.1);
  const QpResult r = qp_solve(H, g, lo, hi, std::nullopt, QpOptions{2, 1e-10});
  CHECK_FALSE(r.converged);
  CHECK(r.iterations == 2);
  CHECK(((r.x - lo).array() >= 0).all());
  CHECK(((hi - r.x).array() >= 0).all());
  CHECK(r.objective <= 0.0);  // never worse than the clipped zero start
}

// ---------------------------------------------------------------- RTI

TEST_CASE("rti: hover on reference is stationary") {
  const OcpProblem p = hover_problem();
  const State x0 = State::hover(p.params, Vec3(0, 0, 2));
  const OcpSolution warm = initial_guess(p, x0);
  const OcpSolution sol = solve_rti(p, x0, warm, 1.0);
  CHECK(sol.kkt_residual < 1e-8);
  for (const Vec4& u : sol.inputs)
    CHECK((u - Vec4::Constant(p.params.hover_thrust_per_rotor())).norm() < 1e-8);
}

TEST_CASE("rti: the failed rotor input is exactly zero at every node") {
  std::mt19937_64 rng(21);
  for (int rotor = 1; rotor <= 4; ++rotor) {
    OcpProblem p = update_fault_mode(hover_problem(), FaultStatus::rotor(rotor));
    p.references = build_reference(HoverTarget{Vec3(0, 0, 2)}, 0.0, p);
    State x0 = State::from_vector(random_state(rng));
    OcpSolution sol = initial_guess(p, x0);
    for (int it = 0; it < 5; ++it) {
      sol = solve_rti(p, x0, sol, 0.3);
      for (const Vec4& u : sol.inputs) CHECK(u(rotor - 1) == 0.0);
    }
  }
}

TEST_CASE("rti: two-node problem matches the dense sparse-form QP") {
  OcpProblem p = hover_problem(2, 0.2);
  p.integrator_substeps = 2;
  State x0 = State::hover(p.params, Vec3(0.3, -0.2, 2.1));
  x0.v = Vec3(0.1, 0.0, -0.05);
  const OcpSolution warm = initial_guess(p, x0);
  const OcpSolution sol = solve_rti(p, x0, warm, 0.0);

  // Variables: dx1, dx2 (17 each), du0, du1 (4 each); dx0 = 0.
  const int nx = kStateDim, nu = kInputDim;
  const int nz = 2 * nx + 2 * nu;
  const int ix1 = 0, ix2 = nx, iu0 = 2 * nx, iu1 = 2 * nx + nu;
  MatrixXd H = MatrixXd::Zero(nz, nz);
  VectorXd g = VectorXd::Zero(nz);
  auto residual_jacobian = [&](const StateVector& x, const ReferencePoint& ref,
                               const StageWeights& w) {
    const double h = 1e-7;
    const StageResidual r0 = stage_residual(State::from_vector(x), ref.input, ref, w, true);
    MatrixXd J(kStateResidualDim, nx);
    for (int j = 0; j < nx; ++j) {
      StateVector xp = x, xm = x;
      xp(j) += h;
      xm(j) -= h;
      J.col(j) = (stage_residual(State::from_vector(xp), ref.input, ref, w, true).residual -
                  stage_residual(State::from_vector(xm), ref.input, ref, w, true).residual) /
                 (2 * h);
    }
    return std::pair{r0, J};
  };
  const StageWeights* stage_w[] = {&p.weights.running, &p.weights.running, &p.weights.terminal};
  const int xcols[] = {-1, ix1, ix2};
  for (int k = 1; k <= 2; ++k) {
    const auto [r0, J] = residual_jacobian(warm.states[k], p.references[k], *stage_w[k]);
    const VectorXd w = r0.weights;
    H.block(xcols[k], xcols[k], nx, nx) += J.transpose() * w.asDiagonal() * J;
    g.segment(xcols[k], nx) += J.transpose() * w.cwiseProduct(r0.residual);
  }
  const int ucols[] = {iu0, iu1};
  for (int k = 0; k < 2; ++k)
    for (int i = 0; i < nu; ++i) {
      H(ucols[k] + i, ucols[k] + i) += p.weights.running.input(i);
      g(ucols[k] + i) += p.weights.running.input(i) * (warm.inputs[k](i) - p.references[k].input(i));
    }
  // Dynamics: dx1 = B0 du0 + gap0, dx2 = A1 dx1 + B1 du1 + gap1.
  const DiscreteStep s0 = discretize(warm.states[0], warm.inputs[0], p.params, 0.1, 2);
  const DiscreteStep s1 = discretize(warm.states[1], warm.inputs[1], p.params, 0.1, 2);
  MatrixXd C = MatrixXd::Zero(2 * nx, nz);
  VectorXd d = VectorXd::Zero(2 * nx);
  C.block(0, ix1, nx, nx) = MatrixXd::Identity(nx, nx);
  C.block(0, iu0, nx, nu) = -s0.B;
  d.head(nx) = s0.next - warm.states[1];
  C.block(nx, ix2, nx, nx) = MatrixXd::Identity(nx, nx);
  C.block(nx, ix1, nx, nx) = -s1.A;
  C.block(nx, iu1, nx, nu) = -s1.B;
  d.tail(nx) = s1.next - warm.states[2];
  MatrixXd kkt = MatrixXd::Zero(nz + 2 * nx, nz + 2 * nx);
  kkt.topLeftCorner(nz, nz) = H;
  kkt.topRightCorner(nz, 2 * nx) = C.transpose();
  kkt.bottomLeftCorner(2 * nx, nz) = C;
  VectorXd rhs(nz + 2 * nx);
  rhs << -g, d;
  const VectorXd z = kkt.fullPivLu().solve(rhs);

  CHECK((sol.inputs[0] - (warm.inputs[0] + z.segment(iu0, nu))).norm() < 1e-8);
  CHECK((sol.inputs[1] - (warm.inputs[1] + z.segment(iu1, nu))).norm() < 1e-8);
  // The expansion re-projects the quaternion onto the unit sphere.
  StateVector x2 = warm.states[2] + z.segment(ix2, nx);
  x2.segment<4>(idx::kQuat).normalize();
  CHECK((sol.states[2] - x2).norm() < 1e-8);
}

TEST_CASE("rti: unconstrained step is invariant to uniform weight scaling") {
  OcpProblem p = hover_problem();
  State x0 = State::hover(p.params, Vec3(0.2, 0.1, 1.9));
  x0.v = Vec3(0.1, -0.1, 0.0);
  const OcpSolution warm = initial_guess(p, x0);
  const OcpSolution a = solve_rti(p, x0, warm, 0.0);
  for (const Vec4& u : a.inputs) {
    REQUIRE((u.array() > 0.0).all());
    REQUIRE((u.array() < 8.5).all());
  }
  OcpProblem scaled = p;
  const double lambda = 37.0;
  for (StageWeights* w : {&scaled.weights.running, &scaled.weights.terminal}) {
    w->position *= lambda;
    w->tilt *= lambda;
    w->yaw *= lambda;
    w->velocity *= lambda;
    w->omega *= lambda;
    w->thrust *= lambda;
    w->input *= lambda;
  }
  const OcpSolution b = solve_rti(scaled, x0, warm, 0.0);
  for (int k = 0; k < p.nodes; ++k) CHECK((a.inputs[k] - b.inputs[k]).norm() < 1e-9);
}

TEST_CASE("rti: NaN in the warm start is rejected") {
  const OcpProblem p = hover_problem();
  const State x0 = State::hover(p.params, Vec3(0, 0, 2));
  OcpSolution warm = initial_guess(p, x0);
  warm.states[5](0) = std::numeric_limits<double>::quiet_NaN();
  const OcpSolution sol = solve_rti(p, x0, warm, 1.0);
  CHECK(sol.status == SolveStatus::kInfeasibleGuard);
  CHECK(std::string(to_string(sol.status)) == "infeasible_guard");
}

TEST_CASE("controller regulates a small offset back to hover") {
  OcpProblem p = hover_problem();
  NmpcController c(p);
  State x = State::hover(p.params, Vec3(0.3, -0.2, 2.2));
  for (int k = 0; k < 450; ++k) {
    c.step(x, 1.0 / 150.0);
    for (int s = 0; s < 7; ++s) x = integrate_rk4(x, c.command(), p.params, 1.0 / 1050.0);
  }
  CHECK((x.p - Vec3(0, 0, 2)).norm() < 0.02);
  CHECK(x.omega.norm() < 0.05);
}
