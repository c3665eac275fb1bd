#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <utility>

namespace ftq {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Quat = Eigen::Quaterniond;

inline constexpr int kNumRotors = 4;
inline constexpr int kStateDim = 17;
inline constexpr int kInputDim = 4;

using StateVector = Eigen::Matrix<double, kStateDim, 1>;
using StateMatrix = Eigen::Matrix<double, kStateDim, kStateDim>;
using InputMatrix = Eigen::Matrix<double, kStateDim, kInputDim>;

// Offsets into StateVector: p, v, q (w, x, y, z), omega, rotor thrusts.
namespace idx {
inline constexpr int kPos = 0;
inline constexpr int kVel = 3;
inline constexpr int kQuat = 6;
inline constexpr int kOmega = 10;
inline constexpr int kThrust = 13;
}  // namespace idx

/// Physical constants of the vehicle. Rotor positions are planar, body frame,
/// measured from the centre of gravity.
struct QuadParams {
  double mass = 0.75;
  Vec3 inertia_diag{2.5e-3, 2.5e-3, 4.3e-3};
  std::array<Vec2, kNumRotors> rotor_pos{Vec2{0.088, -0.088}, Vec2{-0.088, 0.088},
                                         Vec2{-0.088, -0.088}, Vec2{0.088, 0.088}};
  double kappa_t = 0.012;
  double thrust_min = 0.0;
  double thrust_max = 8.5;
  double motor_tau = 0.033;
  double gravity = 9.81;

  /// Throws std::invalid_argument when an invariant is broken.
  void validate() const;

  double hover_thrust_per_rotor(int healthy_rotors = kNumRotors) const {
    return mass * gravity / healthy_rotors;
  }
};

struct State {
  Vec3 p = Vec3::Zero();
  Vec3 v = Vec3::Zero();
  Quat q = Quat::Identity();
  Vec3 omega = Vec3::Zero();
  Vec4 thrust = Vec4::Zero();

  StateVector to_vector() const;
  static State from_vector(const StateVector& x);

  static State hover(const QuadParams& params, const Vec3& position = Vec3::Zero());
};

/// Mock fault trigger. Rotor indices are 1-based, matching the rotor labels.
struct FaultStatus {
  std::optional<int> failed_rotor;
  double fault_time = 0.0;

  bool active_at(double t) const { return failed_rotor.has_value() && t >= fault_time; }
  /// 0-based slot of the failed rotor; only valid when failed_rotor is set.
  int slot() const { return *failed_rotor - 1; }

  static FaultStatus none() { return {}; }
  static FaultStatus rotor(int index, double time = 0.0) { return {index, time}; }
};

/// Thrust-to-wrench map: (T, tau_x, tau_y, tau_z) = G * t.
Mat4 effectiveness_matrix(const QuadParams& params);

/// Continuous dynamics with validation of the quaternion norm.
StateVector quad_dynamics(const State& state, const Vec4& input, const QuadParams& params);

/// Unchecked right-hand side on the packed state. The optional body-frame torque
/// is only used by the simulated plant to model unmodelled disturbances.
StateVector dynamics_rhs(const StateVector& x, const Vec4& input, const QuadParams& params,
                         const Vec3& body_torque_disturbance = Vec3::Zero());

/// One classical RK4 step on the packed state, no renormalisation.
StateVector rk4_step(const StateVector& x, const Vec4& input, const QuadParams& params, double dt,
                     const Vec3& body_torque_disturbance = Vec3::Zero());

/// RK4 step followed by quaternion renormalisation with q_w >= 0.
State integrate_rk4(const State& state, const Vec4& input, const QuadParams& params, double dt,
                    const Vec3& body_torque_disturbance = Vec3::Zero());

std::pair<Vec4, Vec4> apply_fault_bounds(const Vec4& lower, const Vec4& upper,
                                         const FaultStatus& fault);

/// Uniform sample on SO(3) from three uniform variates (subgroup algorithm).
Quat random_unit_quaternion(std::mt19937_64& rng);
Quat random_unit_quaternion(std::uint64_t seed);

/// Uniform double in [0, 1) from 53 random bits; portable across standard libraries.
double uniform01(std::mt19937_64& rng);

// Quaternion helpers on (w, x, y, z) 4-vectors.
Vec4 quat_to_vec(const Quat& q);
Quat vec_to_quat(const Vec4& v);
/// Canonical unit quaternion with non-negative scalar part.
Quat canonical(const Quat& q);
/// Angle between body z axis and inertial z axis, in radians.
double tilt_angle(const Quat& q);

}  // namespace ftq
