#include "ftq/quadmodel.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace ftq {

void QuadParams::validate() const {
  if (!(mass > 0.0)) throw std::invalid_argument("QuadParams: mass must be positive");
  if (!(inertia_diag.array() > 0.0).all())
    throw std::invalid_argument("QuadParams: inertia entries must be positive");
  if (!(motor_tau > 0.0)) throw std::invalid_argument("QuadParams: motor_tau must be positive");
  if (thrust_min != 0.0 || !(thrust_max >= thrust_min))
    throw std::invalid_argument("QuadParams: require thrust_min = 0 <= thrust_max");
  if (!(gravity >= 0.0)) throw std::invalid_argument("QuadParams: gravity must be non-negative");
  bool any_x = false;
  bool any_y = false;
  for (const auto& r : rotor_pos) {
    any_x = any_x || r.x() != 0.0;
    any_y = any_y || r.y() != 0.0;
  }
  if (!any_x || !any_y)
    throw std::invalid_argument("QuadParams: rotor positions give no roll or pitch authority");
}

StateVector State::to_vector() const {
  StateVector x;
  x.segment<3>(idx::kPos) = p;
  x.segment<3>(idx::kVel) = v;
  x.segment<4>(idx::kQuat) = quat_to_vec(q);
  x.segment<3>(idx::kOmega) = omega;
  x.segment<4>(idx::kThrust) = thrust;
  return x;
}

State State::from_vector(const StateVector& x) {
  State s;
  s.p = x.segment<3>(idx::kPos);
  s.v = x.segment<3>(idx::kVel);
  s.q = vec_to_quat(x.segment<4>(idx::kQuat));
  s.omega = x.segment<3>(idx::kOmega);
  s.thrust = x.segment<4>(idx::kThrust);
  return s;
}

State State::hover(const QuadParams& params, const Vec3& position) {
  State s;
  s.p = position;
  s.thrust = Vec4::Constant(params.hover_thrust_per_rotor());
  return s;
}

Mat4 effectiveness_matrix(const QuadParams& params) {
  Mat4 g;
  for (int i = 0; i < kNumRotors; ++i) {
    g(0, i) = 1.0;
    g(1, i) = params.rotor_pos[i].y();
    g(2, i) = -params.rotor_pos[i].x();
    g(3, i) = i < 2 ? -params.kappa_t : params.kappa_t;
  }
  return g;
}

StateVector quad_dynamics(const State& state, const Vec4& input, const QuadParams& params) {
  const double norm = state.q.coeffs().norm();
  if (std::abs(norm - 1.0) > 1e-6)
    throw std::invalid_argument("quad_dynamics: quaternion norm " + std::to_string(norm) +
                                " is not unit");
  return dynamics_rhs(state.to_vector(), input, params);
}

StateVector dynamics_rhs(const StateVector& x, const Vec4& input, const QuadParams& params,
                         const Vec3& body_torque_disturbance) {
  const double qw = x(idx::kQuat), qx = x(idx::kQuat + 1), qy = x(idx::kQuat + 2),
               qz = x(idx::kQuat + 3);
  const Vec3 omega = x.segment<3>(idx::kOmega);
  const Vec4 thrust = x.segment<4>(idx::kThrust);

  // Rows of G are expanded inline; this is the innermost loop of both plant and OCP.
  double collective = 0.0;
  Vec3 torque = body_torque_disturbance;
  for (int i = 0; i < kNumRotors; ++i) {
    const double ti = thrust(i);
    collective += ti;
    torque.x() += params.rotor_pos[i].y() * ti;
    torque.y() -= params.rotor_pos[i].x() * ti;
    torque.z() += (i < 2 ? -params.kappa_t : params.kappa_t) * ti;
  }

  StateVector dx;
  dx.segment<3>(idx::kPos) = x.segment<3>(idx::kVel);

  // q (.) e_z written as a homogeneous quadratic so it equals q o (0, e_z) o q* for any q.
  const double c = collective / params.mass;
  dx(idx::kVel + 0) = c * 2.0 * (qx * qz + qw * qy);
  dx(idx::kVel + 1) = c * 2.0 * (qy * qz - qw * qx);
  dx(idx::kVel + 2) = c * (qw * qw - qx * qx - qy * qy + qz * qz) - params.gravity;

  const double wx = omega.x(), wy = omega.y(), wz = omega.z();
  dx(idx::kQuat + 0) = 0.5 * (-qx * wx - qy * wy - qz * wz);
  dx(idx::kQuat + 1) = 0.5 * (qw * wx + qy * wz - qz * wy);
  dx(idx::kQuat + 2) = 0.5 * (qw * wy - qx * wz + qz * wx);
  dx(idx::kQuat + 3) = 0.5 * (qw * wz + qx * wy - qy * wx);

  const Vec3& inertia = params.inertia_diag;
  const Vec3 momentum = inertia.cwiseProduct(omega);
  dx.segment<3>(idx::kOmega) = (torque - omega.cross(momentum)).cwiseQuotient(inertia);

  dx.segment<4>(idx::kThrust) = (input - thrust) / params.motor_tau;
  return dx;
}

StateVector rk4_step(const StateVector& x, const Vec4& input, const QuadParams& params, double dt,
                     const Vec3& body_torque_disturbance) {
  const StateVector k1 = dynamics_rhs(x, input, params, body_torque_disturbance);
  const StateVector k2 = dynamics_rhs(x + 0.5 * dt * k1, input, params, body_torque_disturbance);
  const StateVector k3 = dynamics_rhs(x + 0.5 * dt * k2, input, params, body_torque_disturbance);
  const StateVector k4 = dynamics_rhs(x + dt * k3, input, params, body_torque_disturbance);
  return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

State integrate_rk4(const State& state, const Vec4& input, const QuadParams& params, double dt,
                    const Vec3& body_torque_disturbance) {
  if (!(dt > 0.0)) throw std::invalid_argument("integrate_rk4: dt must be positive");
  State next =
      State::from_vector(rk4_step(state.to_vector(), input, params, dt, body_torque_disturbance));
  next.q = canonical(next.q);
  return next;
}

std::pair<Vec4, Vec4> apply_fault_bounds(const Vec4& lower, const Vec4& upper,
                                         const FaultStatus& fault) {
  Vec4 lo = lower;
  Vec4 hi = upper;
  if (fault.failed_rotor) {
    lo(fault.slot()) = 0.0;
    hi(fault.slot()) = 0.0;
  }
  return {lo, hi};
}

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

Quat random_unit_quaternion(std::mt19937_64& rng) {
  constexpr double kTwoPi = 6.283185307179586476925;
  const double u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  const double u3 = uniform01(rng);
  const double a = std::sqrt(1.0 - u1);
  const double b = std::sqrt(u1);
  Quat q(b * std::cos(kTwoPi * u3), a * std::sin(kTwoPi * u2), a * std::cos(kTwoPi * u2),
         b * std::sin(kTwoPi * u3));
  return canonical(q);
}

Quat random_unit_quaternion(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_unit_quaternion(rng);
}

Vec4 quat_to_vec(const Quat& q) { return {q.w(), q.x(), q.y(), q.z()}; }

Quat vec_to_quat(const Vec4& v) { return Quat(v(0), v(1), v(2), v(3)); }

Quat canonical(const Quat& q) {
  Quat out = q.normalized();
  if (out.w() < 0.0) out.coeffs() = -out.coeffs();
  return out;
}

double tilt_angle(const Quat& q) {
  const Quat u = q.normalized();
  const double cz = u.w() * u.w() - u.x() * u.x() - u.y() * u.y() + u.z() * u.z();
  return std::acos(std::clamp(cz, -1.0, 1.0));
}

}  // namespace ftq
