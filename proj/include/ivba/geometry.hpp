// SE(3)/se(3) algebra, stereo pinhole camera model, and reprojection errors.
//
// Conventions used throughout the library:
//  - Pose is the camera-to-world transform T_c^w unless a parameter name
//    says otherwise.
//  - Twists are ordered [translational; rotational].
//  - Perturbations are applied on the left: T <- exp(delta) * T.

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace ivba {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat3 = Eigen::Matrix3d;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using Mat36 = Eigen::Matrix<double, 3, 6>;

// se(3) element: head<3> is the translational part (m), tail<3> the
// rotational part (rad).
using Twist = Vec6;

// Depth below this is treated as behind the camera (meters).
inline constexpr double kDepthEpsilon = 1e-3;

inline Mat3 skew(const Vec3& v) {
  Mat3 s;
  // clang-format off
  s <<     0.0, -v.z(),  v.y(),
         v.z(),    0.0, -v.x(),
        -v.y(),  v.x(),    0.0;
  // clang-format on
  return s;
}

// Rigid transform in SE(3), stored as unit quaternion + translation.
class Pose {
 public:
  Pose() : q_(Eigen::Quaterniond::Identity()), t_(Vec3::Zero()) {}

  Pose(const Eigen::Quaterniond& q, const Vec3& t) : q_(q.normalized()), t_(t) {}

  Pose(const Mat3& rotation, const Vec3& t)
      : q_(Eigen::Quaterniond(rotation).normalized()), t_(t) {}

  static Pose Identity() { return Pose(); }

  const Eigen::Quaterniond& quaternion() const { return q_; }
  Mat3 rotation() const { return q_.toRotationMatrix(); }
  const Vec3& translation() const { return t_; }

  Pose operator*(const Pose& rhs) const {
    return Pose(q_ * rhs.q_, q_ * rhs.t_ + t_);
  }

  Vec3 operator*(const Vec3& p) const { return q_ * p + t_; }

  Pose inverse() const {
    const Eigen::Quaterniond qi = q_.conjugate();
    return Pose(qi, -(qi * t_));
  }

  // Rotation angle in [0, pi].
  double rotation_angle() const {
    const double s = q_.vec().norm();
    const double c = std::abs(q_.w());
    return 2.0 * std::atan2(s, c);
  }

 private:
  Eigen::Quaterniond q_;
  Vec3 t_;
};

namespace detail {

// Coefficients of the Rodrigues/left-Jacobian expansions with small-angle
// series fallbacks: A = sin(t)/t, B = (1-cos(t))/t^2, C = (t-sin(t))/t^3.
struct So3Coeffs {
  double a, b, c;
};

inline So3Coeffs so3_coeffs(double theta) {
  So3Coeffs k{};
  const double t2 = theta * theta;
  if (theta < 1e-5) {
    k.a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
    k.b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
    k.c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0;
  } else {
    k.a = std::sin(theta) / theta;
    k.b = (1.0 - std::cos(theta)) / t2;
    k.c = (theta - std::sin(theta)) / (t2 * theta);
  }
  return k;
}

}  // namespace detail

// se(3) exponential map.
inline Pose exp_map(const Twist& xi) {
  const Vec3 rho = xi.head<3>();
  const Vec3 phi = xi.tail<3>();
  const double theta = phi.norm();
  const auto k = detail::so3_coeffs(theta);
  const Mat3 hat = skew(phi);
  const Mat3 hat2 = hat * hat;
  const Mat3 rotation = Mat3::Identity() + k.a * hat + k.b * hat2;
  const Mat3 v = Mat3::Identity() + k.b * hat + k.c * hat2;
  return Pose(rotation, v * rho);
}

// se(3) logarithm on the principal branch (angle < pi). When the rotation
// angle is within 1e-6 of pi the result is still returned but
// *near_branch_cut is set; the caller decides how to proceed.
inline Twist log_map(const Pose& pose, bool* near_branch_cut = nullptr) {
  Eigen::Quaterniond q = pose.quaternion();
  if (q.w() < 0.0) q.coeffs() = -q.coeffs();

  const Vec3 qv = q.vec();
  const double s = qv.norm();  // sin(theta/2)
  const double c = q.w();      // cos(theta/2) >= 0
  const double theta = 2.0 * std::atan2(s, c);

  Vec3 phi;
  if (s < 1e-9) {
    // theta/sin(theta/2) -> 2 + theta^2/12 + ...
    phi = (2.0 + theta * theta / 12.0) * qv;
  } else {
    phi = (theta / s) * qv;
  }

  if (near_branch_cut != nullptr) {
    *near_branch_cut = theta > M_PI - 1e-6;
  }

  // rho = V(phi)^{-1} t with V^{-1} = I - hat/2 + d * hat^2.
  const Mat3 hat = skew(phi);
  double d;
  if (theta < 1e-5) {
    d = 1.0 / 12.0 + theta * theta / 720.0;
  } else {
    const auto k = detail::so3_coeffs(theta);
    d = (1.0 - 0.5 * k.a / k.b) / (theta * theta);
  }
  const Mat3 v_inv = Mat3::Identity() - 0.5 * hat + d * hat * hat;

  Twist xi;
  xi.head<3>() = v_inv * pose.translation();
  xi.tail<3>() = phi;
  return xi;
}

// Stereo pinhole camera: focal lengths/principal point in pixels, baseline
// in meters.
struct CameraIntrinsics {
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  double baseline = 0.0;
  int image_width = 0;
  int image_height = 0;

  void validate() const {
    if (fx <= 0.0 || fy <= 0.0 || baseline <= 0.0) {
      throw std::invalid_argument("CameraIntrinsics: fx, fy, baseline must be positive");
    }
    if (image_width <= 0 || image_height <= 0) {
      throw std::invalid_argument("CameraIntrinsics: image size must be positive");
    }
  }
};

struct Landmark {
  std::int64_t id = -1;
  Vec3 position = Vec3::Zero();
  int context_class = 0;
  int level = 0;
};

// Measurement (u_left, v, u_right) of a landmark in a rectified stereo pair.
struct StereoObservation {
  std::int64_t frame_id = -1;
  std::int64_t landmark_id = -1;
  double u_left = 0.0;
  double v = 0.0;
  double u_right = 0.0;
  int level = 0;

  Vec3 uvr() const { return Vec3(u_left, v, u_right); }
};

// Projects a world point into (u_left, v, u_right). Returns nullopt when the
// point is at or behind the camera plane (depth <= kDepthEpsilon).
inline std::optional<Vec3> project_stereo(const Pose& pose_world_to_cam,
                                          const CameraIntrinsics& intr,
                                          const Vec3& point_world) {
  const Vec3 p = pose_world_to_cam * point_world;
  if (p.z() <= kDepthEpsilon) return std::nullopt;
  const double inv_z = 1.0 / p.z();
  return Vec3(intr.fx * p.x() * inv_z + intr.cx,
              intr.fy * p.y() * inv_z + intr.cy,
              intr.fx * (p.x() - intr.baseline) * inv_z + intr.cx);
}

// Residual observed - predicted in pixels; pose is camera-to-world.
inline std::optional<Vec3> reprojection_error(const StereoObservation& obs,
                                              const Pose& pose,
                                              const CameraIntrinsics& intr,
                                              const Landmark& landmark) {
  const auto predicted = project_stereo(pose.inverse(), intr, landmark.position);
  if (!predicted) return std::nullopt;
  return obs.uvr() - *predicted;
}

// Residual plus analytic Jacobians of the residual with respect to a left
// perturbation of the camera-to-world pose and to the landmark position.
struct ReprojectionJacobians {
  bool valid = false;
  Vec3 residual = Vec3::Zero();
  Mat36 d_pose = Mat36::Zero();
  Mat3 d_point = Mat3::Zero();
};

inline ReprojectionJacobians reprojection_jacobians(const Vec3& observed_uvr,
                                                    const Pose& pose_cam_to_world,
                                                    const CameraIntrinsics& intr,
                                                    const Vec3& point_world) {
  ReprojectionJacobians out;
  const Mat3 rot_wc = pose_cam_to_world.rotation().transpose();
  const Vec3 q = rot_wc * (point_world - pose_cam_to_world.translation());
  if (q.z() <= kDepthEpsilon) return out;

  const double inv_z = 1.0 / q.z();
  const double inv_z2 = inv_z * inv_z;
  const Vec3 predicted(intr.fx * q.x() * inv_z + intr.cx,
                       intr.fy * q.y() * inv_z + intr.cy,
                       intr.fx * (q.x() - intr.baseline) * inv_z + intr.cx);

  Mat3 d_proj;  // d pi / d q
  // clang-format off
  d_proj << intr.fx * inv_z, 0.0,              -intr.fx * q.x() * inv_z2,
            0.0,             intr.fy * inv_z,  -intr.fy * q.y() * inv_z2,
            intr.fx * inv_z, 0.0,              -intr.fx * (q.x() - intr.baseline) * inv_z2;
  // clang-format on

  // q = R^T (p - t); left perturbation T <- exp(delta) T gives
  //   dq/d(rho) = -R^T,  dq/d(phi) = R^T [p]_x,  dq/dp = R^T.
  out.valid = true;
  out.residual = observed_uvr - predicted;
  out.d_pose.leftCols<3>() = d_proj * rot_wc;
  out.d_pose.rightCols<3>() = -d_proj * rot_wc * skew(point_world);
  out.d_point = -d_proj * rot_wc;
  return out;
}

}  // namespace ivba
