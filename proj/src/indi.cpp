#include "ftq/indi.hpp"

#include <cmath>
#include <stdexcept>

namespace ftq {

FilterState lowpass_update(const FilterState& filter, const Vec3& omega_meas, const Vec3& tau_est,
                           double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("lowpass_update: dt must be positive");
  FilterState out = filter;
  if (!filter.initialized) {
    out.omega_f = omega_meas;
    out.tau_f = tau_est;
    out.omega_f_prev = omega_meas;
    out.omega_dot_f.setZero();
    out.initialized = true;
    return out;
  }
  constexpr double kTwoPi = 6.283185307179586476925;
  const double alpha = 1.0 - std::exp(-kTwoPi * filter.cutoff_hz * dt);
  out.omega_f_prev = filter.omega_f;
  out.omega_f = filter.omega_f + alpha * (omega_meas - filter.omega_f);
  out.tau_f = filter.tau_f + alpha * (tau_est - filter.tau_f);
  out.omega_dot_f = (out.omega_f - out.omega_f_prev) / dt;
  return out;
}

Vec3 estimate_torque(const Vec4& t_measured, const QuadParams& params) {
  return effectiveness_matrix(params).bottomRows<3>() * t_measured;
}

Mat4 reduced_pseudoinverse(const Mat4& g, int failed_slot) {
  Eigen::Matrix<double, 4, 3> reduced;
  int col = 0;
  for (int i = 0; i < kNumRotors; ++i)
    if (i != failed_slot) reduced.col(col++) = g.col(i);
  const Eigen::Matrix<double, 3, 4> pinv =
      reduced.completeOrthogonalDecomposition().pseudoInverse();
  Mat4 out = Mat4::Zero();
  int row = 0;
  for (int i = 0; i < kNumRotors; ++i)
    if (i != failed_slot) out.row(i) = pinv.row(row++);
  return out;
}

IndiAllocator::IndiAllocator(const QuadParams& params)
    : params_(params), g_(effectiveness_matrix(params)) {
  Eigen::FullPivLU<Mat4> lu(g_);
  if (!lu.isInvertible())
    throw std::invalid_argument("IndiAllocator: effectiveness matrix is singular");
  g_inv_ = lu.inverse();
  for (int i = 0; i < kNumRotors; ++i) g_pinv_reduced_[i] = reduced_pseudoinverse(g_, i);
}

const Mat4& IndiAllocator::inverse(const FaultStatus& fault) const {
  return fault.failed_rotor ? g_pinv_reduced_[fault.slot()] : g_inv_;
}

Vec4 IndiAllocator::allocate(const Vec4& u_nmpc, const Vec3& omega, const FilterState& filter,
                             const FaultStatus& fault, const Vec4& lower,
                             const Vec4& upper) const {
  const Vec3& inertia = params_.inertia_diag;
  // Desired collective thrust and angular acceleration implied by the NMPC command.
  const Vec4 wrench = g_ * u_nmpc;
  const Vec3 gyro = omega.cross(inertia.cwiseProduct(omega));
  const Vec3 alpha_d = (wrench.tail<3>() - gyro).cwiseQuotient(inertia);

  const Vec3 tau_d = filter.tau_f + inertia.cwiseProduct(alpha_d - filter.omega_dot_f);
  Vec4 target;
  target << wrench(0), tau_d;
  Vec4 u = inverse(fault) * target;
  if (fault.failed_rotor) u(fault.slot()) = 0.0;
  return u.cwiseMax(lower).cwiseMin(upper);
}

Vec4 indi_allocate(const Vec4& u_nmpc, const Vec3& omega, const FilterState& filter,
                   const QuadParams& params, const FaultStatus& fault) {
  const auto [lower, upper] = apply_fault_bounds(Vec4::Constant(params.thrust_min),
                                                 Vec4::Constant(params.thrust_max), fault);
  return IndiAllocator(params).allocate(u_nmpc, omega, filter, fault, lower, upper);
}

}  // namespace ftq
