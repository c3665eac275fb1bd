#pragma once

#include <functional>
#include <limits>
#include <variant>
#include <vector>

#include "ftq/qp_solver.hpp"
#include "ftq/quadmodel.hpp"

namespace ftq {

/// Diagonal weights of one stage. The terminal stage ignores `input`.
struct StageWeights {
  Vec3 position{10.0, 10.0, 10.0};
  double tilt = 50.0;
  double yaw = 5.0;
  Vec3 velocity{1.0, 1.0, 1.0};
  Vec3 omega{0.5, 0.5, 0.1};
  Vec4 thrust = Vec4::Constant(0.01);
  Vec4 input = Vec4::Constant(0.01);
};

struct CostWeights {
  StageWeights running;
  StageWeights terminal;

  /// Running weights as given, terminal weights scaled by `terminal_scale`.
  static CostWeights from_running(const StageWeights& running, double terminal_scale = 2.0);
};

struct ReferencePoint {
  Vec3 p = Vec3::Zero();
  Vec3 v = Vec3::Zero();
  Quat q = Quat::Identity();
  Vec3 omega = Vec3::Zero();
  Vec4 thrust = Vec4::Zero();
  Vec4 input = Vec4::Zero();
};

/// Attitude error q_e = q_ref o q^-1 split as q_e = q_z o q_xy.
struct AttitudeSplit {
  Quat error;
  Quat yaw;   // (w, 0, 0, z)
  Quat tilt;  // (w, x, y, 0)
};

AttitudeSplit attitude_error_split(const Quat& q, const Quat& q_ref);

inline constexpr int kStateResidualDim = 16;
inline constexpr int kStageResidualDim = kStateResidualDim + kInputDim;

/// Residual layout: p - p_ref (3), q_xy x/y (2), q_z z (1), v - v_ref (3),
/// omega - omega_ref (3), t - t_ref (4) and, for running stages, u - u_ref (4).
struct StageResidual {
  Eigen::VectorXd residual;
  Eigen::VectorXd weights;
  double cost = 0.0;
};

StageResidual stage_residual(const State& state, const Vec4& input, const ReferencePoint& ref,
                             const StageWeights& weights, bool terminal = false);

struct OcpProblem {
  double horizon = 1.0;
  int nodes = 20;
  /// RK4 steps per shooting interval.
  int integrator_substeps = 1;
  double position_error_limit = 2.0;
  CostWeights weights = CostWeights::from_running({});
  std::vector<ReferencePoint> references;
  Vec4 input_lower = Vec4::Zero();
  Vec4 input_upper = Vec4::Constant(8.5);
  QuadParams params;
  FaultStatus fault;
  QpOptions qp;
  /// SQP iterations on the very first solve (no previous solution to shift).
  int cold_start_iterations = 1;
  /// QP iteration cap during those first iterations.
  int cold_start_qp_iterations = 500;
  /// Yaw-rate weight used in fault mode. Zero leaves the spin rate free, which
  /// without aerodynamic yaw damping lets the spin grow without bound.
  double fault_yaw_rate_weight = 0.0;

  /// Configured (fault-free) weights and bounds, restored when a fault clears.
  CostWeights nominal_weights = weights;
  Vec4 nominal_lower = input_lower;
  Vec4 nominal_upper = input_upper;

  double node_dt() const { return horizon / nodes; }
  void validate() const;

  /// Problem with nominal bounds from params and hover references at the origin.
  static OcpProblem make(const QuadParams& params, const CostWeights& weights,
                         double horizon = 1.0, int nodes = 20);
};

/// Online parameter update between nominal and rotor-failure operation.
/// A fault with no rotor restores the configured nominal weights and bounds.
OcpProblem update_fault_mode(const OcpProblem& problem, const FaultStatus& fault);

/// Yaw weight zeroed; the yaw-rate weight replaced by `yaw_rate_weight`
/// (zero gives the fully yaw-free cost).
CostWeights relax_yaw(const CostWeights& weights, double yaw_rate_weight = 0.0);

enum class SolveStatus { kConverged, kMaxIter, kInfeasibleGuard };

const char* to_string(SolveStatus status);

struct OcpSolution {
  std::vector<StateVector> states;  // nodes + 1
  std::vector<Vec4> inputs;         // nodes
  double kkt_residual = 0.0;
  int qp_iterations = 0;
  double solve_time = 0.0;
  SolveStatus status = SolveStatus::kConverged;

  State state(std::size_t k) const { return State::from_vector(states.at(k)); }
};

struct Linearization {
  StateMatrix A;
  InputMatrix B;
};

/// Exact continuous-time Jacobians of quad_dynamics.
Linearization linearize_dynamics(const State& state, const Vec4& input, const QuadParams& params);

/// Continuous Jacobian on the packed state, without the unit-norm check.
Linearization continuous_jacobian(const StateVector& x, const QuadParams& params);

struct DiscreteStep {
  StateVector next;
  StateMatrix A;
  InputMatrix B;
};

/// RK4 shooting map over `dt` in `substeps` steps with its exact sensitivities.
DiscreteStep discretize(const StateVector& x, const Vec4& input, const QuadParams& params,
                        double dt, int substeps = 1);

/// Euclidean-norm clamp; direction preserved.
Vec3 clamp_position_error(const Vec3& p_err, double limit);

/// Warm start obtained by simulating the reference inputs from x0.
OcpSolution initial_guess(const OcpProblem& problem, const State& x0);

/// One Gauss-Newton SQP iteration (real-time iteration). The previous solution is
/// shifted by `shift_nodes` shooting intervals (fractional shifts interpolate).
OcpSolution solve_rti(const OcpProblem& problem, const State& x0, const OcpSolution& previous,
                      double shift_nodes = 1.0);

struct HoverTarget {
  Vec3 position = Vec3::Zero();
};

/// Time-parametrised reference. Thrust references are filled in by build_reference.
struct Trajectory {
  std::function<ReferencePoint(double)> sample;
  double t_begin = 0.0;
  double t_end = std::numeric_limits<double>::infinity();
};

using ReferenceSource = std::variant<HoverTarget, Trajectory>;

/// Equal thrust split over the healthy rotors that balances gravity.
Vec4 hover_thrust_split(const QuadParams& params, const FaultStatus& fault);

/// nodes + 1 reference points starting at time t_k.
std::vector<ReferencePoint> build_reference(const ReferenceSource& source, double t_k,
                                            const OcpProblem& problem);

/// Receding-horizon wrapper owning the warm start of one control loop.
class NmpcController {
 public:
  explicit NmpcController(OcpProblem problem);

  /// Switches between nominal and fault-tolerant operation.
  void set_fault(const FaultStatus& fault);
  void set_references(std::vector<ReferencePoint> references);

  /// Runs one RTI step; `elapsed` is the time since the previous call.
  const OcpSolution& step(const State& x0, double elapsed);

  const OcpProblem& problem() const { return problem_; }
  const OcpSolution& solution() const { return solution_; }
  Vec4 command() const { return solution_.inputs.front(); }

 private:
  OcpProblem problem_;
  OcpSolution solution_;
  bool initialized_ = false;
};

}  // namespace ftq
