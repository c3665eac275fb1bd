#include "ftq/nmpc.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>
#include <string>

namespace ftq {
namespace {

// Matrix of the left quaternion product a o b = L(a) b on (w, x, y, z).
Mat4 left_product_matrix(const Quat& a) {
  Mat4 m;
  m << a.w(), -a.x(), -a.y(), -a.z(),  //
      a.x(), a.w(), -a.z(), a.y(),     //
      a.y(), a.z(), a.w(), -a.x(),     //
      a.z(), -a.y(), a.x(), a.w();
  return m;
}

constexpr double kDegenerateYaw = 1e-12;

Eigen::Matrix<double, kStateResidualDim, 1> state_weight_vector(const StageWeights& w) {
  Eigen::Matrix<double, kStateResidualDim, 1> d;
  d << w.position, w.tilt, w.tilt, w.yaw, w.velocity, w.omega, w.thrust;
  return d;
}

// Gauss-Newton model of one stage around a packed state. The tilt rows use
// (q_e,x, q_e,y): q_xy differs from them only by the yaw rotation, so the cost
// is identical while the Jacobian stays bounded at a 180 degree tilt.
struct StageModel {
  Eigen::Matrix<double, kStateResidualDim, 1> r;
  Eigen::Matrix<double, kStateResidualDim, kStateDim> J;
};

StageModel stage_model(const StateVector& x, const ReferencePoint& ref, double position_limit) {
  StageModel m;
  m.J.setZero();
  m.r.segment<3>(0) = clamp_position_error(x.segment<3>(idx::kPos) - ref.p, position_limit);
  m.J.block<3, 3>(0, idx::kPos).setIdentity();

  const Mat4 de_dq = left_product_matrix(ref.q) * Eigen::Vector4d(1, -1, -1, -1).asDiagonal();
  const Vec4 e = de_dq * x.segment<4>(idx::kQuat);
  m.r(3) = e(1);
  m.r(4) = e(2);
  m.J.block<1, 4>(3, idx::kQuat) = de_dq.row(1);
  m.J.block<1, 4>(4, idx::kQuat) = de_dq.row(2);

  const double s2 = e(0) * e(0) + e(3) * e(3);
  if (s2 > kDegenerateYaw) {
    const double s = std::sqrt(s2);
    m.r(5) = e(3) / s;
    const Eigen::RowVector4d dyaw(-e(3) * e(0) / (s2 * s), 0.0, 0.0, e(0) * e(0) / (s2 * s));
    m.J.block<1, 4>(5, idx::kQuat) = dyaw * de_dq;
  } else {
    m.r(5) = 0.0;
  }

  m.r.segment<3>(6) = x.segment<3>(idx::kVel) - ref.v;
  m.J.block<3, 3>(6, idx::kVel).setIdentity();
  m.r.segment<3>(9) = x.segment<3>(idx::kOmega) - ref.omega;
  m.J.block<3, 3>(9, idx::kOmega).setIdentity();
  m.r.segment<4>(12) = x.segment<4>(idx::kThrust) - ref.thrust;
  m.J.block<4, 4>(12, idx::kThrust).setIdentity();
  return m;
}

// Previous trajectory sampled at node k + shift, with linear interpolation.
template <typename T>
T sample_shifted(const std::vector<T>& traj, int k, double shift) {
  const double pos = k + shift;
  const int last = static_cast<int>(traj.size()) - 1;
  if (pos >= last) return traj[last];
  if (pos <= 0.0) return traj[0];
  const int i = static_cast<int>(std::floor(pos));
  const double frac = pos - i;
  return traj[i] + frac * (traj[i + 1] - traj[i]);
}

void normalize_quaternion(StateVector& x, const Vec4& hemisphere) {
  Vec4 q = x.segment<4>(idx::kQuat);
  const double n = q.norm();
  if (n > 0.0) q /= n;
  if (q.dot(hemisphere) < 0.0) q = -q;
  x.segment<4>(idx::kQuat) = q;
}

}  // namespace

CostWeights CostWeights::from_running(const StageWeights& running, double terminal_scale) {
  CostWeights w;
  w.running = running;
  w.terminal.position = terminal_scale * running.position;
  w.terminal.tilt = terminal_scale * running.tilt;
  w.terminal.yaw = terminal_scale * running.yaw;
  w.terminal.velocity = terminal_scale * running.velocity;
  w.terminal.omega = terminal_scale * running.omega;
  w.terminal.thrust = terminal_scale * running.thrust;
  w.terminal.input = Vec4::Zero();
  return w;
}

AttitudeSplit attitude_error_split(const Quat& q, const Quat& q_ref) {
  if (std::abs(q.norm() - 1.0) > 1e-6 || std::abs(q_ref.norm() - 1.0) > 1e-6)
    throw std::invalid_argument("attitude_error_split: quaternions must be unit");
  AttitudeSplit split;
  split.error = q_ref * q.conjugate();
  const double w = split.error.w();
  const double z = split.error.z();
  const double s2 = w * w + z * z;
  if (s2 <= kDegenerateYaw) {
    split.yaw = Quat::Identity();
    split.tilt = split.error;
    return split;
  }
  const double s = std::sqrt(s2);
  split.yaw = Quat(w / s, 0.0, 0.0, z / s);
  // q_z^-1 o q_e expanded; its z component vanishes identically.
  const double x = split.error.x();
  const double y = split.error.y();
  split.tilt = Quat(s, (w * x + z * y) / s, (w * y - z * x) / s, 0.0);
  return split;
}

StageResidual stage_residual(const State& state, const Vec4& input, const ReferencePoint& ref,
                             const StageWeights& weights, bool terminal) {
  const AttitudeSplit split = attitude_error_split(state.q, ref.q);
  const int n = terminal ? kStateResidualDim : kStageResidualDim;
  StageResidual out;
  out.residual.resize(n);
  out.residual.segment<3>(0) = state.p - ref.p;
  out.residual(3) = split.tilt.x();
  out.residual(4) = split.tilt.y();
  out.residual(5) = split.yaw.z();
  out.residual.segment<3>(6) = state.v - ref.v;
  out.residual.segment<3>(9) = state.omega - ref.omega;
  out.residual.segment<4>(12) = state.thrust - ref.thrust;
  out.weights.resize(n);
  out.weights.head<kStateResidualDim>() = state_weight_vector(weights);
  if (!terminal) {
    out.residual.segment<4>(16) = input - ref.input;
    out.weights.segment<4>(16) = weights.input;
  }
  out.cost = out.residual.dot(out.weights.cwiseProduct(out.residual));
  return out;
}

void OcpProblem::validate() const {
  if (nodes < 2) throw std::invalid_argument("OcpProblem: need at least 2 nodes");
  if (!(horizon > 0.0)) throw std::invalid_argument("OcpProblem: horizon must be positive");
  if (integrator_substeps < 1) throw std::invalid_argument("OcpProblem: substeps must be >= 1");
  if (cold_start_qp_iterations < 1)
    throw std::invalid_argument("OcpProblem: cold-start QP iterations must be >= 1");
  if (cold_start_iterations < 1)
    throw std::invalid_argument("OcpProblem: cold-start iterations must be >= 1");
  if (fault_yaw_rate_weight < 0.0)
    throw std::invalid_argument("OcpProblem: fault yaw-rate weight must be non-negative");
  if (!(position_error_limit > 0.0))
    throw std::invalid_argument("OcpProblem: position error limit must be positive");
  if ((input_lower.array() > input_upper.array()).any())
    throw std::invalid_argument("OcpProblem: inconsistent input bounds");
  if (static_cast<int>(references.size()) != nodes + 1)
    throw std::invalid_argument("OcpProblem: expected " + std::to_string(nodes + 1) +
                                " reference points, got " + std::to_string(references.size()));
  params.validate();
}

OcpProblem OcpProblem::make(const QuadParams& params, const CostWeights& weights, double horizon,
                            int nodes) {
  OcpProblem p;
  p.horizon = horizon;
  p.nodes = nodes;
  p.params = params;
  p.weights = weights;
  p.input_lower = Vec4::Constant(params.thrust_min);
  p.input_upper = Vec4::Constant(params.thrust_max);
  p.nominal_weights = weights;
  p.nominal_lower = p.input_lower;
  p.nominal_upper = p.input_upper;
  p.references = build_reference(HoverTarget{}, 0.0, p);
  return p;
}

CostWeights relax_yaw(const CostWeights& weights, double yaw_rate_weight) {
  if (yaw_rate_weight < 0.0) throw std::invalid_argument("relax_yaw: negative yaw-rate weight");
  CostWeights w = weights;
  w.running.yaw = 0.0;
  w.running.omega.z() = yaw_rate_weight;
  w.terminal.yaw = 0.0;
  w.terminal.omega.z() = yaw_rate_weight;
  return w;
}

OcpProblem update_fault_mode(const OcpProblem& problem, const FaultStatus& fault) {
  if (fault.failed_rotor && (*fault.failed_rotor < 1 || *fault.failed_rotor > kNumRotors))
    throw std::invalid_argument("update_fault_mode: rotor index " +
                                std::to_string(*fault.failed_rotor) + " out of range 1..4");
  OcpProblem out = problem;
  out.fault = fault;
  if (fault.failed_rotor) {
    out.weights = relax_yaw(problem.nominal_weights, problem.fault_yaw_rate_weight);
    std::tie(out.input_lower, out.input_upper) =
        apply_fault_bounds(problem.nominal_lower, problem.nominal_upper, fault);
  } else {
    out.weights = problem.nominal_weights;
    out.input_lower = problem.nominal_lower;
    out.input_upper = problem.nominal_upper;
  }
  return out;
}

const char* to_string(SolveStatus status) {
  switch (status) {
    case SolveStatus::kConverged:
      return "converged";
    case SolveStatus::kMaxIter:
      return "max_iter";
    case SolveStatus::kInfeasibleGuard:
      return "infeasible_guard";
  }
  return "unknown";
}

Linearization continuous_jacobian(const StateVector& x, const QuadParams& params) {
  Linearization lin;
  StateMatrix& A = lin.A;
  A.setZero();
  const double qw = x(idx::kQuat), qx = x(idx::kQuat + 1), qy = x(idx::kQuat + 2),
               qz = x(idx::kQuat + 3);
  const Vec3 omega = x.segment<3>(idx::kOmega);
  const double c = x.segment<4>(idx::kThrust).sum() / params.mass;

  A.block<3, 3>(idx::kPos, idx::kVel).setIdentity();

  Eigen::Matrix<double, 3, 4> dz_dq;
  dz_dq << qy, qz, qw, qx,  //
      -qx, -qw, qz, qy,     //
      qw, -qx, -qy, qz;
  A.block<3, 4>(idx::kVel, idx::kQuat) = 2.0 * c * dz_dq;
  const Vec3 body_z(2.0 * (qx * qz + qw * qy), 2.0 * (qy * qz - qw * qx),
                    qw * qw - qx * qx - qy * qy + qz * qz);
  for (int i = 0; i < kNumRotors; ++i) A.block<3, 1>(idx::kVel, idx::kThrust + i) = body_z / params.mass;

  const double wx = omega.x(), wy = omega.y(), wz = omega.z();
  Mat4 dq_dq;
  dq_dq << 0.0, -wx, -wy, -wz,  //
      wx, 0.0, wz, -wy,         //
      wy, -wz, 0.0, wx,         //
      wz, wy, -wx, 0.0;
  A.block<4, 4>(idx::kQuat, idx::kQuat) = 0.5 * dq_dq;
  Eigen::Matrix<double, 4, 3> dq_dw;
  dq_dw << -qx, -qy, -qz,  //
      qw, -qz, qy,         //
      qz, qw, -qx,         //
      -qy, qx, qw;
  A.block<4, 3>(idx::kQuat, idx::kOmega) = 0.5 * dq_dw;

  const Vec3& inertia = params.inertia_diag;
  const Vec3 momentum = inertia.cwiseProduct(omega);
  auto skew = [](const Vec3& a) {
    Mat3 s;
    s << 0.0, -a.z(), a.y(), a.z(), 0.0, -a.x(), -a.y(), a.x(), 0.0;
    return s;
  };
  const Mat3 dgyro = skew(omega) * inertia.asDiagonal() - skew(momentum);
  A.block<3, 3>(idx::kOmega, idx::kOmega) = -(inertia.cwiseInverse().asDiagonal() * dgyro);
  for (int i = 0; i < kNumRotors; ++i) {
    const Vec3 col(params.rotor_pos[i].y(), -params.rotor_pos[i].x(),
                   i < 2 ? -params.kappa_t : params.kappa_t);
    A.block<3, 1>(idx::kOmega, idx::kThrust + i) = col.cwiseQuotient(inertia);
  }

  A.block<4, 4>(idx::kThrust, idx::kThrust) = -Mat4::Identity() / params.motor_tau;
  lin.B.setZero();
  lin.B.block<4, 4>(idx::kThrust, 0) = Mat4::Identity() / params.motor_tau;
  return lin;
}

Linearization linearize_dynamics(const State& state, const Vec4& /*input*/,
                                 const QuadParams& params) {
  if (std::abs(state.q.norm() - 1.0) > 1e-6)
    throw std::invalid_argument("linearize_dynamics: quaternion is not unit");
  return continuous_jacobian(state.to_vector(), params);
}

DiscreteStep discretize(const StateVector& x, const Vec4& input, const QuadParams& params,
                        double dt, int substeps) {
  const double h = dt / substeps;
  DiscreteStep out;
  out.next = x;
  out.A.setIdentity();
  out.B.setZero();
  for (int s = 0; s < substeps; ++s) {
    const StateVector& x1 = out.next;
    const Linearization l1 = continuous_jacobian(x1, params);
    const StateVector k1 = dynamics_rhs(x1, input, params);
    const StateMatrix k1x = l1.A;
    const InputMatrix& bu = l1.B;  // input Jacobian is state independent
    const InputMatrix k1u = bu;

    const StateVector x2 = x1 + 0.5 * h * k1;
    const StateMatrix a2 = continuous_jacobian(x2, params).A;
    const StateVector k2 = dynamics_rhs(x2, input, params);
    const StateMatrix k2x = a2 + 0.5 * h * (a2 * k1x);
    const InputMatrix k2u = 0.5 * h * (a2 * k1u) + bu;

    const StateVector x3 = x1 + 0.5 * h * k2;
    const StateMatrix a3 = continuous_jacobian(x3, params).A;
    const StateVector k3 = dynamics_rhs(x3, input, params);
    const StateMatrix k3x = a3 + 0.5 * h * (a3 * k2x);
    const InputMatrix k3u = 0.5 * h * (a3 * k2u) + bu;

    const StateVector x4 = x1 + h * k3;
    const StateMatrix a4 = continuous_jacobian(x4, params).A;
    const StateVector k4 = dynamics_rhs(x4, input, params);
    const StateMatrix k4x = a4 + h * (a4 * k3x);
    const InputMatrix k4u = h * (a4 * k3u) + bu;

    const StateMatrix step_x =
        StateMatrix::Identity() + (h / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
    const InputMatrix step_u = (h / 6.0) * (k1u + 2.0 * k2u + 2.0 * k3u + k4u);
    out.next = x1 + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    out.B = step_x * out.B + step_u;
    out.A = step_x * out.A;
  }
  return out;
}

Vec3 clamp_position_error(const Vec3& p_err, double limit) {
  if (!(limit > 0.0)) throw std::invalid_argument("clamp_position_error: limit must be positive");
  const double n = p_err.norm();
  if (n <= limit) return p_err;
  return p_err * (limit / n);
}

OcpSolution initial_guess(const OcpProblem& problem, const State& x0) {
  problem.validate();
  OcpSolution sol;
  sol.states.reserve(problem.nodes + 1);
  sol.inputs.reserve(problem.nodes);
  StateVector x = x0.to_vector();
  sol.states.push_back(x);
  const double dt = problem.node_dt();
  for (int k = 0; k < problem.nodes; ++k) {
    const Vec4 u = problem.references[k].input.cwiseMax(problem.input_lower)
                       .cwiseMin(problem.input_upper);
    sol.inputs.push_back(u);
    for (int s = 0; s < problem.integrator_substeps; ++s)
      x = rk4_step(x, u, problem.params, dt / problem.integrator_substeps);
    sol.states.push_back(x);
  }
  return sol;
}

OcpSolution solve_rti(const OcpProblem& problem, const State& x0, const OcpSolution& previous,
                      double shift_nodes) {
  const auto t_start = std::chrono::steady_clock::now();
  problem.validate();
  const int N = problem.nodes;
  const int nu = kInputDim * N;
  if (static_cast<int>(previous.states.size()) != N + 1 ||
      static_cast<int>(previous.inputs.size()) != N)
    throw std::invalid_argument("solve_rti: warm start does not match the horizon");

  auto reject = [&]() {
    OcpSolution out = previous;
    out.status = SolveStatus::kInfeasibleGuard;
    out.solve_time =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return out;
  };

  // (1) Shifted warm start, anchored at the measured state.
  std::vector<StateVector> xs(N + 1);
  std::vector<Vec4> us(N);
  xs[0] = x0.to_vector();
  for (int k = 1; k <= N; ++k) {
    xs[k] = sample_shifted(previous.states, k, shift_nodes);
    normalize_quaternion(xs[k], xs[k - 1].segment<4>(idx::kQuat));
  }
  for (int k = 0; k < N; ++k)
    us[k] = sample_shifted(previous.inputs, k, shift_nodes)
                .cwiseMax(problem.input_lower)
                .cwiseMin(problem.input_upper);

  // (2)-(4) Shooting gaps, sensitivities and condensing of the Gauss-Newton QP.
  const double dt = problem.node_dt();
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(nu, nu);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(nu);
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(kStateDim, nu);  // d(dx_k)/dU
  StateVector c = StateVector::Zero();                        // dx_k at dU = 0
  std::vector<DiscreteStep> steps;
  steps.reserve(N);

  auto add_state_cost = [&](int k, const StageWeights& w) {
    const StageModel m = stage_model(xs[k], problem.references[k], problem.position_error_limit);
    const auto wv = state_weight_vector(w);
    const Eigen::Matrix<double, kStateDim, kStateDim> S = m.J.transpose() * wv.asDiagonal() * m.J;
    const StateVector s = m.J.transpose() * wv.cwiseProduct(m.r);
    const int cols = kInputDim * k;
    if (cols > 0) {
      const auto Mk = M.leftCols(cols);
      const Eigen::MatrixXd SM = S * Mk;
      H.topLeftCorner(cols, cols).noalias() += Mk.transpose() * SM;
      g.head(cols).noalias() += Mk.transpose() * (S * c + s);
    }
  };

  for (int k = 0; k <= N; ++k) {
    if (k == N) {
      add_state_cost(k, problem.weights.terminal);
      break;
    }
    add_state_cost(k, problem.weights.running);
    const Vec4& w_u = problem.weights.running.input;
    for (int i = 0; i < kInputDim; ++i) {
      H(kInputDim * k + i, kInputDim * k + i) += w_u(i);
      g(kInputDim * k + i) += w_u(i) * (us[k](i) - problem.references[k].input(i));
    }

    const DiscreteStep& step = steps.emplace_back(
        discretize(xs[k], us[k], problem.params, dt, problem.integrator_substeps));
    if (!step.A.allFinite() || !step.B.allFinite() || !step.next.allFinite()) return reject();
    const StateVector gap = step.next - xs[k + 1];
    const int cols = kInputDim * k;
    if (cols > 0) M.leftCols(cols) = step.A * M.leftCols(cols);
    M.block(0, cols, kStateDim, kInputDim) = step.B;
    c = step.A * c + gap;
  }
  if (!H.allFinite() || !g.allFinite()) return reject();

  // (5) Box QP in the input increments.
  Eigen::VectorXd lower(nu), upper(nu);
  for (int k = 0; k < N; ++k) {
    lower.segment<kInputDim>(kInputDim * k) = problem.input_lower - us[k];
    upper.segment<kInputDim>(kInputDim * k) = problem.input_upper - us[k];
  }
  const QpResult qp = qp_solve(H, g, lower, upper, Eigen::VectorXd::Zero(nu), problem.qp);
  if (!qp.x.allFinite()) return reject();

  // (6) Expansion through the linearised dynamics.
  OcpSolution out;
  out.states.resize(N + 1);
  out.inputs.resize(N);
  out.states[0] = xs[0];
  StateVector delta = StateVector::Zero();
  for (int k = 0; k < N; ++k) {
    const Vec4 du = qp.x.segment<kInputDim>(kInputDim * k);
    out.inputs[k] = (us[k] + du).cwiseMax(problem.input_lower).cwiseMin(problem.input_upper);
    const DiscreteStep& step = steps[k];
    delta = step.A * delta + step.B * du + (step.next - xs[k + 1]);
    out.states[k + 1] = xs[k + 1] + delta;
    normalize_quaternion(out.states[k + 1], out.states[k].segment<4>(idx::kQuat));
  }
  out.kkt_residual = qp.kkt_residual;
  out.qp_iterations = qp.iterations;
  out.status = qp.converged ? SolveStatus::kConverged : SolveStatus::kMaxIter;
  out.solve_time =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return out;
}

Vec4 hover_thrust_split(const QuadParams& params, const FaultStatus& fault) {
  if (!fault.failed_rotor) return Vec4::Constant(params.hover_thrust_per_rotor());
  Vec4 t = Vec4::Constant(params.hover_thrust_per_rotor(kNumRotors - 1));
  t(fault.slot()) = 0.0;
  return t;
}

std::vector<ReferencePoint> build_reference(const ReferenceSource& source, double t_k,
                                            const OcpProblem& problem) {
  const Vec4 thrust = hover_thrust_split(problem.params, problem.fault);
  std::vector<ReferencePoint> refs(problem.nodes + 1);
  if (const auto* hover = std::get_if<HoverTarget>(&source)) {
    for (auto& r : refs) {
      r.p = hover->position;
      r.thrust = thrust;
      r.input = thrust;
    }
    return refs;
  }
  const auto& traj = std::get<Trajectory>(source);
  if (!traj.sample) throw std::invalid_argument("build_reference: empty trajectory");
  const double t_last = t_k + problem.horizon;
  if (t_k < traj.t_begin || t_last > traj.t_end)
    throw std::out_of_range("build_reference: trajectory undefined over the horizon");
  const double dt = problem.node_dt();
  for (int k = 0; k <= problem.nodes; ++k) {
    refs[k] = traj.sample(t_k + k * dt);
    refs[k].thrust = thrust;
    refs[k].input = thrust;
  }
  return refs;
}

NmpcController::NmpcController(OcpProblem problem) : problem_(std::move(problem)) {
  problem_.validate();
}

void NmpcController::set_fault(const FaultStatus& fault) {
  problem_ = update_fault_mode(problem_, fault);
}

void NmpcController::set_references(std::vector<ReferencePoint> references) {
  problem_.references = std::move(references);
}

const OcpSolution& NmpcController::step(const State& x0, double elapsed) {
  if (!initialized_) {
    // Nothing to shift yet: iterate at x0 before issuing the first command. This
    // happens before the loop starts, so the QP may also run to convergence.
    OcpProblem cold = problem_;
    cold.qp.max_iterations = std::max(problem_.qp.max_iterations, problem_.cold_start_qp_iterations);
    solution_ = initial_guess(problem_, x0);
    for (int i = 0; i < problem_.cold_start_iterations; ++i)
      solution_ = solve_rti(cold, x0, solution_, 0.0);
    initialized_ = true;
    return solution_;
  }
  solution_ = solve_rti(problem_, x0, solution_, elapsed / problem_.node_dt());
  return solution_;
}

}  // namespace ftq
