#pragma once

#include <array>

#include "ftq/quadmodel.hpp"

namespace ftq {

/// First-order low-pass state shared by the body-rate and torque channels.
struct FilterState {
  Vec3 omega_f = Vec3::Zero();
  Vec3 tau_f = Vec3::Zero();
  Vec3 omega_f_prev = Vec3::Zero();
  /// Backward difference of omega_f.
  Vec3 omega_dot_f = Vec3::Zero();
  double cutoff_hz = 12.0;
  bool initialized = false;
};

/// Discretised with alpha = 1 - exp(-2 pi f_c dt), so sampled step responses
/// match the continuous filter exactly.
FilterState lowpass_update(const FilterState& filter, const Vec3& omega_meas, const Vec3& tau_est,
                           double dt);

/// Body torque implied by the rotor thrusts (rows 2-4 of the effectiveness matrix).
Vec3 estimate_torque(const Vec4& t_measured, const QuadParams& params);

/// Precomputed inverses of the effectiveness matrix: the exact inverse for the
/// intact vehicle and a Moore-Penrose pseudoinverse per failed rotor, computed on
/// the remaining three columns so the failed row is exactly zero.
class IndiAllocator {
 public:
  /// Throws std::invalid_argument if the nominal matrix is singular.
  explicit IndiAllocator(const QuadParams& params);

  const Mat4& effectiveness() const { return g_; }
  const Mat4& inverse(const FaultStatus& fault) const;

  Vec4 allocate(const Vec4& u_nmpc, const Vec3& omega, const FilterState& filter,
                const FaultStatus& fault, const Vec4& lower, const Vec4& upper) const;

 private:
  QuadParams params_;
  Mat4 g_;
  Mat4 g_inv_;
  std::array<Mat4, kNumRotors> g_pinv_reduced_;
};

/// One-shot form of IndiAllocator::allocate with bounds from params.
Vec4 indi_allocate(const Vec4& u_nmpc, const Vec3& omega, const FilterState& filter,
                   const QuadParams& params, const FaultStatus& fault);

/// Moore-Penrose pseudoinverse of G with the failed rotor's column zeroed.
Mat4 reduced_pseudoinverse(const Mat4& g, int failed_slot);

}  // namespace ftq
