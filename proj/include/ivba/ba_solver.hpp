// Bundle adjustment over camera poses and landmarks with a per-observation
// robust loss: Levenberg-Marquardt with IRLS reweighting and a Schur
// complement on the landmark blocks.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "ivba/geometry.hpp"
#include "ivba/robust_loss.hpp"

namespace ivba {

struct BaFrame {
  std::int64_t frame_id = -1;
  Pose pose;
  bool fixed = false;
};

struct BaLandmarkEntry {
  Landmark landmark;
  bool fixed = false;
};

struct BaObservation {
  StereoObservation obs;
  ObservationCovariance cov;
  LossParams loss;
};

struct BaProblem {
  std::vector<BaFrame> frames;
  std::vector<BaLandmarkEntry> landmarks;
  std::vector<BaObservation> observations;
  CameraIntrinsics intrinsics;

  void validate() const;
};

struct SolverConfig {
  int max_iterations = 100;
  double rel_tol = 1e-8;
  double grad_tol = 1e-8;
  double lambda0 = 1e-4;
  double lambda_up = 10.0;
  double lambda_down = 0.5;
  double lambda_max = 1e12;
  // Squared Mahalanobis error charged to an observation whose landmark does
  // not project (depth <= epsilon); the term is flagged and its Jacobian
  // zeroed so it cannot pull the state, but the cost stays continuous.
  double nonprojectable_x = 1e6;
  HuberBranch branch = HuberBranch::kContinuous;
  // When non-empty, writes <prefix>iterations.csv and <prefix>sparsity.csv.
  std::string debug_csv_prefix;
};

struct BaSolution {
  std::unordered_map<std::int64_t, Pose> poses;
  std::unordered_map<std::int64_t, Vec3> landmarks;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  int iterations = 0;
  bool converged = false;
  double max_gradient = 0.0;
  int nonprojectable_count = 0;
  std::vector<Vec3> per_observation_residuals;
  std::vector<double> cost_history;  // initial cost followed by accepted costs
};

inline void BaProblem::validate() const {
  intrinsics.validate();
  std::unordered_map<std::int64_t, int> frame_ids;
  std::unordered_map<std::int64_t, int> landmark_ids;
  bool any_fixed = false;
  for (const auto& f : frames) {
    if (!frame_ids.emplace(f.frame_id, 1).second) {
      throw std::invalid_argument("BaProblem: duplicate frame id");
    }
    any_fixed = any_fixed || f.fixed;
  }
  for (const auto& l : landmarks) {
    if (!landmark_ids.emplace(l.landmark.id, 1).second) {
      throw std::invalid_argument("BaProblem: duplicate landmark id");
    }
    any_fixed = any_fixed || l.fixed;
  }
  if (!any_fixed) {
    throw std::invalid_argument("BaProblem: no fixed frame or landmark; gauge is free");
  }
  for (const auto& o : observations) {
    if (!frame_ids.count(o.obs.frame_id) || !landmark_ids.count(o.obs.landmark_id)) {
      throw std::invalid_argument("BaProblem: observation references unknown frame or landmark");
    }
    o.loss.validate();
  }
}

namespace detail {

struct BaState {
  std::vector<Pose> poses;        // indexed like problem.frames
  std::vector<Vec3> points;       // indexed like problem.landmarks
};

struct BaIndex {
  std::vector<int> free_pose;     // frame slot -> free pose index or -1
  std::vector<int> free_point;    // landmark slot -> free point index or -1
  std::vector<int> obs_frame;     // observation -> frame slot
  std::vector<int> obs_point;     // observation -> landmark slot
  int num_free_poses = 0;
  int num_free_points = 0;
};

inline BaIndex build_index(const BaProblem& p) {
  BaIndex ix;
  std::unordered_map<std::int64_t, int> frame_slot, point_slot;
  frame_slot.reserve(p.frames.size());
  point_slot.reserve(p.landmarks.size());
  ix.free_pose.resize(p.frames.size(), -1);
  ix.free_point.resize(p.landmarks.size(), -1);
  for (int i = 0; i < static_cast<int>(p.frames.size()); ++i) {
    frame_slot[p.frames[i].frame_id] = i;
    if (!p.frames[i].fixed) ix.free_pose[i] = ix.num_free_poses++;
  }
  for (int i = 0; i < static_cast<int>(p.landmarks.size()); ++i) {
    point_slot[p.landmarks[i].landmark.id] = i;
    if (!p.landmarks[i].fixed) ix.free_point[i] = ix.num_free_points++;
  }
  ix.obs_frame.reserve(p.observations.size());
  ix.obs_point.reserve(p.observations.size());
  for (const auto& o : p.observations) {
    ix.obs_frame.push_back(frame_slot.at(o.obs.frame_id));
    ix.obs_point.push_back(point_slot.at(o.obs.landmark_id));
  }
  return ix;
}

inline BaState initial_state(const BaProblem& p) {
  BaState s;
  s.poses.reserve(p.frames.size());
  s.points.reserve(p.landmarks.size());
  for (const auto& f : p.frames) s.poses.push_back(f.pose);
  for (const auto& l : p.landmarks) s.points.push_back(l.landmark.position);
  return s;
}

// Robust total cost of the state; counts non-projectable terms.
inline double eval_cost(const BaProblem& p, const BaIndex& ix, const BaState& s,
                        const SolverConfig& cfg, int* nonprojectable = nullptr) {
  double cost = 0.0;
  int clamped = 0;
  for (std::size_t i = 0; i < p.observations.size(); ++i) {
    const auto& o = p.observations[i];
    const Pose& pose = s.poses[ix.obs_frame[i]];
    const Vec3& point = s.points[ix.obs_point[i]];
    const auto predicted = project_stereo(pose.inverse(), p.intrinsics, point);
    double x;
    if (!predicted) {
      x = cfg.nonprojectable_x;
      ++clamped;
    } else {
      x = (o.obs.uvr() - *predicted).squaredNorm() / o.cov.sigma2;
    }
    cost += huber_eval(x, o.loss.delta, cfg.branch);
  }
  if (nonprojectable != nullptr) *nonprojectable = clamped;
  return cost;
}

struct Linearization {
  std::vector<Eigen::Matrix<double, 6, 6>> h_pp;  // per free pose
  std::vector<Mat3> h_ll;                         // per free point
  std::vector<Vec6> g_p;
  std::vector<Vec3> g_l;
  // Cross blocks, one entry per observation that couples a free pose with a
  // free point: (free pose index, free point index, 6x3 block).
  struct Cross {
    int pose;
    int point;
    Eigen::Matrix<double, 6, 3> w;
  };
  std::vector<Cross> cross;
  double max_gradient = 0.0;
};

inline Linearization linearize(const BaProblem& p, const BaIndex& ix,
                               const BaState& s, const SolverConfig& cfg) {
  Linearization lin;
  lin.h_pp.assign(ix.num_free_poses, Eigen::Matrix<double, 6, 6>::Zero());
  lin.h_ll.assign(ix.num_free_points, Mat3::Zero());
  lin.g_p.assign(ix.num_free_poses, Vec6::Zero());
  lin.g_l.assign(ix.num_free_points, Vec3::Zero());
  lin.cross.reserve(p.observations.size());

  for (std::size_t i = 0; i < p.observations.size(); ++i) {
    const auto& o = p.observations[i];
    if (o.loss.delta == 0.0) continue;  // fully rejected observation
    const int fp = ix.free_pose[ix.obs_frame[i]];
    const int lp = ix.free_point[ix.obs_point[i]];
    if (fp < 0 && lp < 0) continue;

    const auto jac = reprojection_jacobians(o.obs.uvr(), s.poses[ix.obs_frame[i]],
                                            p.intrinsics, s.points[ix.obs_point[i]]);
    if (!jac.valid) continue;  // clamped term, zero gradient

    const double inv_sigma = 1.0 / std::sqrt(o.cov.sigma2);
    const Vec3 r = jac.residual * inv_sigma;
    const double x = r.squaredNorm();
    const double w = huber_weight(x, o.loss.delta, cfg.branch);
    if (w == 0.0) continue;

    const Mat36 jp = jac.d_pose * inv_sigma;
    const Mat3 jl = jac.d_point * inv_sigma;
    if (fp >= 0) {
      lin.h_pp[fp].noalias() += w * jp.transpose() * jp;
      lin.g_p[fp].noalias() += w * jp.transpose() * r;
    }
    if (lp >= 0) {
      lin.h_ll[lp].noalias() += w * jl.transpose() * jl;
      lin.g_l[lp].noalias() += w * jl.transpose() * r;
    }
    if (fp >= 0 && lp >= 0) {
      lin.cross.push_back({fp, lp, (w * jp.transpose() * jl).eval()});
    }
  }
  for (const auto& g : lin.g_p) lin.max_gradient = std::max(lin.max_gradient, 2.0 * g.lpNorm<Eigen::Infinity>());
  for (const auto& g : lin.g_l) lin.max_gradient = std::max(lin.max_gradient, 2.0 * g.lpNorm<Eigen::Infinity>());
  return lin;
}

// Solves the damped normal equations by eliminating landmark blocks.
// Returns false when the reduced system is not solvable.
inline bool solve_step(const Linearization& lin, const BaIndex& ix, double lambda,
                       Eigen::VectorXd* delta_p, std::vector<Vec3>* delta_l) {
  const int np = ix.num_free_poses;
  const int nl = ix.num_free_points;

  std::vector<Mat3> h_ll_inv(nl);
  std::vector<Vec3> g_l = lin.g_l;
  for (int l = 0; l < nl; ++l) {
    Mat3 h = lin.h_ll[l];
    h.diagonal() += lambda * lin.h_ll[l].diagonal();
    const Eigen::LDLT<Mat3> ldlt(h);
    if (ldlt.info() != Eigen::Success) return false;
    h_ll_inv[l] = ldlt.solve(Mat3::Identity());
    if (!h_ll_inv[l].allFinite()) return false;
  }

  // Group cross blocks by landmark to form the Schur products.
  std::vector<std::vector<const Linearization::Cross*>> by_point(nl);
  for (const auto& c : lin.cross) by_point[c.point].push_back(&c);

  Eigen::MatrixXd schur = Eigen::MatrixXd::Zero(6 * np, 6 * np);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(6 * np);
  for (int f = 0; f < np; ++f) {
    Eigen::Matrix<double, 6, 6> h = lin.h_pp[f];
    h.diagonal() += lambda * lin.h_pp[f].diagonal();
    schur.block<6, 6>(6 * f, 6 * f) = h;
    rhs.segment<6>(6 * f) = -lin.g_p[f];
  }
  for (int l = 0; l < nl; ++l) {
    const Vec3 hinv_g = h_ll_inv[l] * g_l[l];
    for (const auto* a : by_point[l]) {
      rhs.segment<6>(6 * a->pose).noalias() += a->w * hinv_g;
      const Eigen::Matrix<double, 6, 3> wa_hinv = a->w * h_ll_inv[l];
      for (const auto* b : by_point[l]) {
        schur.block<6, 6>(6 * a->pose, 6 * b->pose).noalias() -= wa_hinv * b->w.transpose();
      }
    }
  }

  if (np > 0) {
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(schur);
    if (ldlt.info() != Eigen::Success) return false;
    *delta_p = ldlt.solve(rhs);
    if (!delta_p->allFinite()) return false;
  } else {
    delta_p->resize(0);
  }

  delta_l->assign(nl, Vec3::Zero());
  for (int l = 0; l < nl; ++l) {
    Vec3 back = -g_l[l];
    for (const auto* a : by_point[l]) {
      back.noalias() -= a->w.transpose() * delta_p->segment<6>(6 * a->pose);
    }
    (*delta_l)[l] = h_ll_inv[l] * back;
  }
  return true;
}

inline BaState retract(const BaProblem& p, const BaIndex& ix, const BaState& s,
                       const Eigen::VectorXd& delta_p, const std::vector<Vec3>& delta_l) {
  BaState out = s;
  for (std::size_t f = 0; f < p.frames.size(); ++f) {
    const int fp = ix.free_pose[f];
    if (fp >= 0) out.poses[f] = exp_map(delta_p.segment<6>(6 * fp)) * s.poses[f];
  }
  for (std::size_t l = 0; l < p.landmarks.size(); ++l) {
    const int lp = ix.free_point[l];
    if (lp >= 0) out.points[l] = s.points[l] + delta_l[lp];
  }
  return out;
}

}  // namespace detail

// Robust total cost (Eq. of the BA objective) at the supplied estimates.
// Frames or landmarks missing from the maps keep their problem values.
inline double total_cost(const BaProblem& problem,
                         const std::unordered_map<std::int64_t, Pose>& poses,
                         const std::unordered_map<std::int64_t, Vec3>& landmarks,
                         const SolverConfig& config = {}) {
  const auto ix = detail::build_index(problem);
  auto state = detail::initial_state(problem);
  for (std::size_t f = 0; f < problem.frames.size(); ++f) {
    if (const auto it = poses.find(problem.frames[f].frame_id); it != poses.end()) {
      state.poses[f] = it->second;
    }
  }
  for (std::size_t l = 0; l < problem.landmarks.size(); ++l) {
    if (const auto it = landmarks.find(problem.landmarks[l].landmark.id); it != landmarks.end()) {
      state.points[l] = it->second;
    }
  }
  return detail::eval_cost(problem, ix, state, config);
}

// Full analytic gradient of the robust cost with respect to the stacked
// [free poses; free points] state; used by gradient self-checks.
inline Eigen::VectorXd cost_gradient(const BaProblem& problem, const SolverConfig& config = {}) {
  const auto ix = detail::build_index(problem);
  const auto state = detail::initial_state(problem);
  const auto lin = detail::linearize(problem, ix, state, config);
  Eigen::VectorXd g(6 * ix.num_free_poses + 3 * ix.num_free_points);
  for (int f = 0; f < ix.num_free_poses; ++f) g.segment<6>(6 * f) = 2.0 * lin.g_p[f];
  for (int l = 0; l < ix.num_free_points; ++l) {
    g.segment<3>(6 * ix.num_free_poses + 3 * l) = 2.0 * lin.g_l[l];
  }
  return g;
}

inline BaSolution solve(const BaProblem& problem, const SolverConfig& config = {}) {
  problem.validate();
  const auto ix = detail::build_index(problem);
  auto state = detail::initial_state(problem);

  std::ofstream iter_csv;
  if (!config.debug_csv_prefix.empty()) {
    iter_csv.open(config.debug_csv_prefix + "iterations.csv");
    iter_csv << "iteration,lambda,cost,accepted\n";
    std::ofstream sparsity(config.debug_csv_prefix + "sparsity.csv");
    sparsity << "free_pose_block,free_point_block\n";
    for (std::size_t i = 0; i < problem.observations.size(); ++i) {
      const int fp = ix.free_pose[ix.obs_frame[i]];
      const int lp = ix.free_point[ix.obs_point[i]];
      if (fp >= 0 || lp >= 0) sparsity << fp << "," << lp << "\n";
    }
  }

  BaSolution sol;
  double cost = detail::eval_cost(problem, ix, state, config, &sol.nonprojectable_count);
  sol.initial_cost = cost;
  sol.cost_history.push_back(cost);

  double lambda = config.lambda0;
  bool converged = false;
  int accepted_iterations = 0;

  for (int iter = 0; iter < config.max_iterations && !converged; ++iter) {
    const auto lin = detail::linearize(problem, ix, state, config);
    sol.max_gradient = lin.max_gradient;
    if (lin.max_gradient < config.grad_tol) {
      converged = true;
      break;
    }

    bool accepted = false;
    while (!accepted) {
      Eigen::VectorXd delta_p;
      std::vector<Vec3> delta_l;
      const bool solvable = detail::solve_step(lin, ix, lambda, &delta_p, &delta_l);
      double new_cost = std::numeric_limits<double>::infinity();
      detail::BaState candidate;
      if (solvable) {
        candidate = detail::retract(problem, ix, state, delta_p, delta_l);
        new_cost = detail::eval_cost(problem, ix, candidate, config);
      }
      if (iter_csv.is_open()) {
        iter_csv << iter << "," << lambda << "," << new_cost << ","
                 << (solvable && new_cost < cost ? 1 : 0) << "\n";
      }
      if (solvable && new_cost < cost) {
        accepted = true;
        state = std::move(candidate);
        const double decrease = cost - new_cost;
        if (decrease <= config.rel_tol * std::max(cost, 1e-300)) converged = true;
        cost = new_cost;
        sol.cost_history.push_back(cost);
        ++accepted_iterations;
        lambda = std::max(lambda * config.lambda_down, 1e-12);
      } else {
        lambda *= config.lambda_up;
        if (lambda > config.lambda_max) break;
      }
    }
    if (!accepted) break;  // lambda escalation exhausted: diverged
  }

  sol.converged = converged;
  sol.iterations = accepted_iterations;
  sol.final_cost = detail::eval_cost(problem, ix, state, config, &sol.nonprojectable_count);
  for (std::size_t f = 0; f < problem.frames.size(); ++f) {
    sol.poses[problem.frames[f].frame_id] = state.poses[f];
  }
  for (std::size_t l = 0; l < problem.landmarks.size(); ++l) {
    sol.landmarks[problem.landmarks[l].landmark.id] = state.points[l];
  }
  sol.per_observation_residuals.reserve(problem.observations.size());
  for (std::size_t i = 0; i < problem.observations.size(); ++i) {
    const auto& o = problem.observations[i];
    const auto predicted = project_stereo(state.poses[ix.obs_frame[i]].inverse(),
                                          problem.intrinsics, state.points[ix.obs_point[i]]);
    sol.per_observation_residuals.push_back(
        predicted ? (o.obs.uvr() - *predicted).eval()
                  : Vec3::Constant(std::numeric_limits<double>::quiet_NaN()));
  }
  return sol;
}

enum class TrackStatus { kOk, kInsufficientMatches, kDiverged };

struct PoseUpdateResult {
  TrackStatus status = TrackStatus::kDiverged;
  Pose pose;
  double final_cost = 0.0;
  int iterations = 0;
  int used_observations = 0;
};

// Pose-only optimization of a single new frame against known (fixed)
// landmarks. Fewer than 4 usable observations, or a solver divergence, is a
// tracking-failure signal for the frontend.
inline PoseUpdateResult marginal_pose_update(
    const Pose& initial_pose, std::span<const BaObservation> observations,
    const std::unordered_map<std::int64_t, Vec3>& landmark_positions,
    const CameraIntrinsics& intrinsics, const SolverConfig& config = {}) {
  PoseUpdateResult out;
  out.pose = initial_pose;

  BaProblem problem;
  problem.intrinsics = intrinsics;
  const std::int64_t frame_id = observations.empty() ? 0 : observations.front().obs.frame_id;
  problem.frames.push_back({frame_id, initial_pose, false});
  for (const auto& o : observations) {
    if (o.loss.delta <= 0.0) continue;
    const auto it = landmark_positions.find(o.obs.landmark_id);
    if (it == landmark_positions.end()) continue;
    if (!problem.landmarks.empty() &&
        std::any_of(problem.landmarks.begin(), problem.landmarks.end(),
                    [&](const BaLandmarkEntry& e) { return e.landmark.id == o.obs.landmark_id; })) {
      // landmark already added; fall through to observation
    } else {
      problem.landmarks.push_back({Landmark{o.obs.landmark_id, it->second, 0, o.obs.level}, true});
    }
    BaObservation obs = o;
    obs.obs.frame_id = frame_id;
    problem.observations.push_back(obs);
  }

  out.used_observations = static_cast<int>(problem.observations.size());
  if (out.used_observations < 4) {
    out.status = TrackStatus::kInsufficientMatches;
    return out;
  }

  const BaSolution sol = solve(problem, config);
  out.final_cost = sol.final_cost;
  out.iterations = sol.iterations;
  if (!sol.converged || !sol.poses.at(frame_id).translation().allFinite()) {
    out.status = TrackStatus::kDiverged;
    return out;
  }
  out.status = TrackStatus::kOk;
  out.pose = sol.poses.at(frame_id);
  return out;
}

}  // namespace ivba
