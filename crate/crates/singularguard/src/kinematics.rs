//! Forward kinematics and geometric Jacobian for a 6-DOF serial arm
//! described by a standard Denavit-Hartenberg table.
//!
//! The per-joint transform is `Rz(theta + offset) * Tz(d) * Tx(a) * Rx(alpha)`,
//! so the translation contributed by link `i` has norm `sqrt(a_i^2 + d_i^2)`
//! and the chain can never span farther than the sum of those norms. That sum
//! is the model's `max_reach`.

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of joints in the chain.
pub const DOF: usize = 6;

/// Joint angles in radians. Always finite.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 6]", into = "[f64; 6]")]
pub struct JointConfig(pub [f64; 6]);

/// Joint velocities in rad/s. Always finite.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 6]", into = "[f64; 6]")]
pub struct JointVelocities(pub [f64; 6]);

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("non-finite joint value at index {0}")]
    NonFinite(usize),
    #[error("joint {0} limits are not ordered: lo={1}, hi={2}")]
    BadLimits(usize, f64, f64),
    #[error("stored max_reach {stored} disagrees with value derived from the DH table {derived}")]
    MaxReachMismatch { stored: f64, derived: f64 },
}

fn check_finite(values: &[f64; 6]) -> Result<(), KinematicsError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(KinematicsError::NonFinite(i)),
        None => Ok(()),
    }
}

impl JointConfig {
    /// Wraps raw angles, validating finiteness.
    pub fn try_new(q: [f64; 6]) -> Result<Self, KinematicsError> {
        check_finite(&q)?;
        Ok(JointConfig(q))
    }

    pub fn zeros() -> Self {
        JointConfig([0.0; 6])
    }
}

impl JointVelocities {
    pub fn try_new(qdot: [f64; 6]) -> Result<Self, KinematicsError> {
        check_finite(&qdot)?;
        Ok(JointVelocities(qdot))
    }

    pub fn zeros() -> Self {
        JointVelocities([0.0; 6])
    }

    /// Largest absolute joint speed.
    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Mean absolute joint speed.
    pub fn mean_abs(&self) -> f64 {
        self.0.iter().map(|v| v.abs()).sum::<f64>() / DOF as f64
    }
}

impl TryFrom<[f64; 6]> for JointConfig {
    type Error = KinematicsError;
    fn try_from(q: [f64; 6]) -> Result<Self, Self::Error> {
        Self::try_new(q)
    }
}

impl From<JointConfig> for [f64; 6] {
    fn from(q: JointConfig) -> Self {
        q.0
    }
}

impl TryFrom<[f64; 6]> for JointVelocities {
    type Error = KinematicsError;
    fn try_from(qdot: [f64; 6]) -> Result<Self, Self::Error> {
        Self::try_new(qdot)
    }
}

impl From<JointVelocities> for [f64; 6] {
    fn from(qdot: JointVelocities) -> Self {
        qdot.0
    }
}

/// One row of the DH table: link length, link offset, twist, and the
/// constant added to the joint variable.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DhRow {
    pub a: f64,
    pub d: f64,
    pub alpha: f64,
    pub theta_offset: f64,
}

/// Inclusive joint range in radians.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct JointLimit {
    pub lo: f64,
    pub hi: f64,
}

/// Geometry of the arm: DH rows, joint limits, and the chain-length bound.
#[derive(Clone, Debug)]
pub struct KinematicModel {
    dh: [DhRow; 6],
    limits: [JointLimit; 6],
    max_reach: f64,
}

/// Tool pose: position in meters plus a proper rotation matrix.
#[derive(Clone, Copy, Debug)]
pub struct TcpPose {
    pub position: Vector3<f64>,
    pub orientation: Matrix3<f64>,
}

/// 6x6 geometric Jacobian. Rows 0..3 map joint rates to TCP linear
/// velocity, rows 3..6 to angular velocity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jacobian(pub Matrix6<f64>);

impl Jacobian {
    pub fn linear(&self) -> nalgebra::Matrix3x6<f64> {
        self.0.fixed_view::<3, 6>(0, 0).into_owned()
    }

    pub fn angular(&self) -> nalgebra::Matrix3x6<f64> {
        self.0.fixed_view::<3, 6>(3, 0).into_owned()
    }
}

/// Manufacturer DH values for the UR10 (a, d in meters; alpha in radians).
const UR10_DH: [DhRow; 6] = [
    DhRow { a: 0.0, d: 0.1273, alpha: core::f64::consts::FRAC_PI_2, theta_offset: 0.0 },
    DhRow { a: -0.612, d: 0.0, alpha: 0.0, theta_offset: 0.0 },
    DhRow { a: -0.5723, d: 0.0, alpha: 0.0, theta_offset: 0.0 },
    DhRow { a: 0.0, d: 0.163941, alpha: core::f64::consts::FRAC_PI_2, theta_offset: 0.0 },
    DhRow { a: 0.0, d: 0.1157, alpha: -core::f64::consts::FRAC_PI_2, theta_offset: 0.0 },
    DhRow { a: 0.0, d: 0.0922, alpha: 0.0, theta_offset: 0.0 },
];

impl KinematicModel {
    /// Builds a model, checking limit ordering and that `max_reach` matches
    /// the value derived from the table.
    pub fn new(
        dh: [DhRow; 6],
        limits: [JointLimit; 6],
        max_reach: f64,
    ) -> Result<Self, KinematicsError> {
        for (i, l) in limits.iter().enumerate() {
            if !(l.lo < l.hi) || !l.lo.is_finite() || !l.hi.is_finite() {
                return Err(KinematicsError::BadLimits(i, l.lo, l.hi));
            }
        }
        let derived = derived_max_reach(&dh);
        if !(max_reach > 0.0) || (max_reach - derived).abs() > 1e-9 {
            return Err(KinematicsError::MaxReachMismatch { stored: max_reach, derived });
        }
        Ok(KinematicModel { dh, limits, max_reach })
    }

    /// UR10 with +-2*pi limits on every joint.
    pub fn ur10() -> Self {
        let tau = 2.0 * core::f64::consts::PI;
        let limits = [JointLimit { lo: -tau, hi: tau }; 6];
        let max_reach = derived_max_reach(&UR10_DH);
        KinematicModel { dh: UR10_DH, limits, max_reach }
    }

    pub fn dh(&self) -> &[DhRow; 6] {
        &self.dh
    }

    pub fn joint_limits(&self) -> &[JointLimit; 6] {
        &self.limits
    }

    /// Upper bound on the TCP distance from the base, derived from the table.
    pub fn max_reach(&self) -> f64 {
        self.max_reach
    }

    /// Clamps each joint into its limit range.
    pub fn clamp_to_limits(&self, q: &JointConfig) -> JointConfig {
        let mut out = q.0;
        for i in 0..DOF {
            out[i] = out[i].clamp(self.limits[i].lo, self.limits[i].hi);
        }
        JointConfig(out)
    }

    pub fn within_limits(&self, q: &JointConfig) -> bool {
        q.0.iter()
            .zip(self.limits.iter())
            .all(|(v, l)| *v >= l.lo && *v <= l.hi)
    }
}

/// Sum of per-link translation norms: the chain cannot span farther.
pub fn derived_max_reach(dh: &[DhRow; 6]) -> f64 {
    dh.iter().map(|r| (r.a * r.a + r.d * r.d).sqrt()).sum()
}

/// Homogeneous transform for one DH row at joint angle `theta`.
fn dh_transform(row: &DhRow, theta: f64) -> Matrix4<f64> {
    let t = theta + row.theta_offset;
    let (st, ct) = t.sin_cos();
    let (sa, ca) = row.alpha.sin_cos();
    Matrix4::new(
        ct, -st * ca, st * sa, row.a * ct,
        st, ct * ca, -ct * sa, row.a * st,
        0.0, sa, ca, row.d,
        0.0, 0.0, 0.0, 1.0,
    )
}

/// TCP pose for the given joint angles.
pub fn forward_kinematics(model: &KinematicModel, q: &JointConfig) -> TcpPose {
    let mut t = Matrix4::identity();
    for i in 0..DOF {
        t *= dh_transform(&model.dh[i], q.0[i]);
    }
    TcpPose {
        position: t.fixed_view::<3, 1>(0, 3).into_owned(),
        orientation: t.fixed_view::<3, 3>(0, 0).into_owned(),
    }
}

/// Geometric Jacobian at `q`. Column `i` is built from the axis and origin
/// of the frame that joint `i` rotates about: `[z_i x (p_tcp - o_i); z_i]`.
pub fn compute_jacobian(model: &KinematicModel, q: &JointConfig) -> Jacobian {
    let mut axes = [Vector3::zeros(); DOF];
    let mut origins = [Vector3::zeros(); DOF];
    let mut t = Matrix4::<f64>::identity();
    for i in 0..DOF {
        axes[i] = t.fixed_view::<3, 1>(0, 2).into_owned();
        origins[i] = t.fixed_view::<3, 1>(0, 3).into_owned();
        t *= dh_transform(&model.dh[i], q.0[i]);
    }
    let p_tcp: Vector3<f64> = t.fixed_view::<3, 1>(0, 3).into_owned();

    let mut j = Matrix6::zeros();
    for i in 0..DOF {
        let lin = axes[i].cross(&(p_tcp - origins[i]));
        let ang = axes[i];
        let mut col: Vector6<f64> = Vector6::zeros();
        col.fixed_rows_mut::<3>(0).copy_from(&lin);
        col.fixed_rows_mut::<3>(3).copy_from(&ang);
        j.set_column(i, &col);
    }
    Jacobian(j)
}
