//! Serial-chain forward kinematics, the geometric Jacobian and kinematic
//! manipulability.
//!
//! Chains use the standard (distal) Denavit-Hartenberg convention: row `k`
//! maps frame `k-1` to frame `k` through `Rz(θ)·Tz(d)·Tx(a)·Rx(α)`, and joint
//! `k` moves about (or along) the z axis of frame `k-1`. Frame 0 is the base
//! pose. The task frame sits at the end effector but keeps the world
//! orientation, so every task-space quantity is expressed in world axes.

use nalgebra::{DMatrix, DVector, Rotation3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rotation tolerance used when validating poses.
pub const ORTHONORMAL_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    Revolute,
    Prismatic,
}

/// One Denavit-Hartenberg row. Lengths in meters, angles in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DhRow {
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    pub theta_offset: f64,
    pub kind: JointKind,
}

impl DhRow {
    pub fn revolute(a: f64, alpha: f64, d: f64, theta_offset: f64) -> Self {
        Self {
            a,
            alpha,
            d,
            theta_offset,
            kind: JointKind::Revolute,
        }
    }

    pub fn prismatic(a: f64, alpha: f64, d: f64, theta_offset: f64) -> Self {
        Self {
            a,
            alpha,
            d,
            theta_offset,
            kind: JointKind::Prismatic,
        }
    }

    /// Transform from frame `k-1` to frame `k` at joint value `q`.
    pub fn transform(&self, q: f64) -> FramePose {
        let (theta, d) = match self.kind {
            JointKind::Revolute => (self.theta_offset + q, self.d),
            JointKind::Prismatic => (self.theta_offset, self.d + q),
        };
        let rotation = Rotation3::from_axis_angle(&Vector3::z_axis(), theta)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), self.alpha);
        let translation = Vector3::new(self.a * theta.cos(), self.a * theta.sin(), d);
        FramePose { rotation, translation }
    }

    fn is_finite(&self) -> bool {
        self.a.is_finite() && self.alpha.is_finite() && self.d.is_finite() && self.theta_offset.is_finite()
    }
}

/// Rigid transform: rotation plus translation in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FramePose {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for FramePose {
    fn default() -> Self {
        Self::identity()
    }
}

impl FramePose {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation,
        }
    }

    /// Roll-pitch-yaw in radians, applied as `Rz(yaw)·Ry(pitch)·Rx(roll)`.
    pub fn from_rpy(translation: Vector3<f64>, roll: f64, pitch: f64, yaw: f64) -> Self {
        Self {
            rotation: Rotation3::from_euler_angles(roll, pitch, yaw),
            translation,
        }
    }

    /// `self ∘ other`: express `other` (given relative to `self`) in the parent frame.
    pub fn compose(&self, other: &FramePose) -> FramePose {
        FramePose {
            rotation: self.rotation * other.rotation,
            translation: self.translation + self.rotation * other.translation,
        }
    }

    pub fn inverse(&self) -> FramePose {
        let rotation = self.rotation.inverse();
        FramePose {
            rotation,
            translation: -(rotation * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.translation + self.rotation * p
    }

    /// z axis of this frame in parent coordinates.
    pub fn z_axis(&self) -> Vector3<f64> {
        self.rotation.matrix().column(2).into_owned()
    }

    /// `RᵀR = I` and `det R = +1` within [`ORTHONORMAL_TOL`].
    pub fn is_valid(&self) -> bool {
        let m = self.rotation.matrix();
        let gram_err = (m.transpose() * m - nalgebra::Matrix3::identity()).amax();
        gram_err <= ORTHONORMAL_TOL
            && (m.determinant() - 1.0).abs() <= ORTHONORMAL_TOL
            && self.translation.iter().all(|v| v.is_finite())
    }
}

/// Task-space axis. Translational rows carry forces (or linear velocity),
/// rotational rows carry torques (or angular velocity).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskAxis {
    Fx,
    Fy,
    Fz,
    Tx,
    Ty,
    Tz,
}

impl TaskAxis {
    pub const ALL: [TaskAxis; 6] = [
        TaskAxis::Fx,
        TaskAxis::Fy,
        TaskAxis::Fz,
        TaskAxis::Tx,
        TaskAxis::Ty,
        TaskAxis::Tz,
    ];

    /// Row of this axis in the full 6-row wrench / twist ordering.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_translational(self) -> bool {
        self.index() < 3
    }

    pub fn label(self) -> &'static str {
        match self {
            TaskAxis::Fx => "fx",
            TaskAxis::Fy => "fy",
            TaskAxis::Fz => "fz",
            TaskAxis::Tx => "tx",
            TaskAxis::Ty => "ty",
            TaskAxis::Tz => "tz",
        }
    }

    pub fn from_label(label: &str) -> Option<TaskAxis> {
        TaskAxis::ALL.into_iter().find(|a| a.label() == label)
    }
}

/// DH-parameterized serial chain plus the task-space rows it is analysed in.
#[derive(Clone, Debug, PartialEq)]
pub struct RobotModel {
    pub rows: Vec<DhRow>,
    pub base: FramePose,
    /// Selected task rows, ascending. Length is `n_t` ∈ {2, 3, 6}.
    pub task_axes: Vec<TaskAxis>,
    /// End-effector offset from the last DH frame, expressed in that frame.
    /// Only the translation matters: the task frame keeps world orientation.
    pub ee_offset: Vector3<f64>,
}

impl RobotModel {
    pub fn new(rows: Vec<DhRow>, task_axes: Vec<TaskAxis>) -> Result<Self> {
        let model = Self {
            rows,
            base: FramePose::identity(),
            task_axes,
            ee_offset: Vector3::zeros(),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn with_base(mut self, base: FramePose) -> Self {
        self.base = base;
        self
    }

    pub fn with_ee_offset(mut self, offset: Vector3<f64>) -> Self {
        self.ee_offset = offset;
        self
    }

    pub fn n_q(&self) -> usize {
        self.rows.len()
    }

    pub fn n_t(&self) -> usize {
        self.task_axes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::validation("rows", "a chain needs at least one joint"));
        }
        if let Some(k) = self.rows.iter().position(|r| !r.is_finite()) {
            return Err(Error::validation(format!("rows[{k}]"), "non-finite DH parameter"));
        }
        if ![2, 3, 6].contains(&self.task_axes.len()) {
            return Err(Error::validation(
                "task_axes",
                format!("task dimension must be 2, 3 or 6, got {}", self.task_axes.len()),
            ));
        }
        if self.task_axes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation(
                "task_axes",
                "axes must be distinct and in fx..tz order",
            ));
        }
        if !self.base.is_valid() {
            return Err(Error::validation("base", "base pose is not a proper rigid transform"));
        }
        if self.ee_offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("ee_offset", "non-finite translation"));
        }
        Ok(())
    }

    pub(crate) fn check_state(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.n_q() {
            return Err(Error::invalid(format!(
                "joint vector has {} entries, chain has {} joints",
                q.len(),
                self.n_q()
            )));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("joint vector contains non-finite values"));
        }
        Ok(())
    }

    /// Row indices (into the full 6-row ordering) of the task axes.
    pub fn task_rows(&self) -> Vec<usize> {
        self.task_axes.iter().map(|a| a.index()).collect()
    }
}

/// All frames of a chain at one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainPoses {
    /// DH frames `0..=n_q`; frame 0 is the base, frame `k` is carried by link `k`.
    pub frames: Vec<FramePose>,
    /// Task frame: end-effector position, world orientation.
    pub ee: FramePose,
}

impl ChainPoses {
    /// Axis direction and origin of joint `k` (0-based), both in world coordinates.
    pub fn joint_axis(&self, k: usize) -> (Vector3<f64>, Vector3<f64>) {
        let f = &self.frames[k];
        (f.z_axis(), f.translation)
    }

    pub fn link_frame(&self, link: usize) -> Option<&FramePose> {
        self.frames.get(link)
    }

    pub fn ee_position(&self) -> Vector3<f64> {
        self.ee.translation
    }

    /// One frame per joint (the frame carrying its axis) followed by the task frame.
    pub fn joint_and_ee_frames(&self) -> Vec<FramePose> {
        let n = self.frames.len() - 1;
        self.frames[..n]
            .iter()
            .copied()
            .chain(std::iter::once(self.ee))
            .collect()
    }
}

pub fn forward_kinematics(model: &RobotModel, q: &[f64]) -> Result<ChainPoses> {
    model.check_state(q)?;
    Ok(chain_poses(model, q))
}

pub(crate) fn chain_poses(model: &RobotModel, q: &[f64]) -> ChainPoses {
    let mut frames = Vec::with_capacity(model.n_q() + 1);
    let mut current = model.base;
    frames.push(current);
    for (row, &qk) in model.rows.iter().zip(q) {
        current = current.compose(&row.transform(qk));
        frames.push(current);
    }
    let ee = FramePose::from_translation(current.transform_point(&model.ee_offset));
    ChainPoses { frames, ee }
}

/// Full 6×n_q geometric Jacobian, rows `[v; ω]`.
pub fn full_jacobian(model: &RobotModel, poses: &ChainPoses) -> DMatrix<f64> {
    let n = model.n_q();
    let pe = poses.ee_position();
    let mut jac = DMatrix::zeros(6, n);
    for (k, row) in model.rows.iter().enumerate() {
        let (z, p) = poses.joint_axis(k);
        let (lin, ang) = match row.kind {
            JointKind::Revolute => (z.cross(&(pe - p)), z),
            JointKind::Prismatic => (z, Vector3::zeros()),
        };
        jac.fixed_view_mut::<3, 1>(0, k).copy_from(&lin);
        jac.fixed_view_mut::<3, 1>(3, k).copy_from(&ang);
    }
    jac
}

/// Keeps only the rows named by `axes`.
pub fn select_rows(full: &DMatrix<f64>, axes: &[TaskAxis]) -> DMatrix<f64> {
    let rows: Vec<usize> = axes.iter().map(|a| a.index()).collect();
    full.select_rows(rows.iter())
}

/// `n_t × n_q` geometric Jacobian restricted to the model's task rows.
pub fn geometric_jacobian(model: &RobotModel, q: &[f64]) -> Result<DMatrix<f64>> {
    let poses = forward_kinematics(model, q)?;
    Ok(select_rows(&full_jacobian(model, &poses), &model.task_axes))
}

/// Derivatives of the full 6×n_q Jacobian with respect to each joint.
pub fn jacobian_partials(model: &RobotModel, poses: &ChainPoses) -> Vec<DMatrix<f64>> {
    let n = model.n_q();
    let pe = poses.ee_position();
    let axes: Vec<_> = (0..n).map(|i| poses.joint_axis(i)).collect();
    (0..n)
        .map(|k| {
            let (zk, pk) = axes[k];
            let revolute_k = model.rows[k].kind == JointKind::Revolute;
            let dpe = if revolute_k { zk.cross(&(pe - pk)) } else { zk };
            let mut djac = DMatrix::zeros(6, n);
            for (i, row) in model.rows.iter().enumerate() {
                let (zi, pi) = axes[i];
                // Only frames downstream of joint k move with it.
                let (dzi, dpi) = match (i > k, revolute_k) {
                    (true, true) => (zk.cross(&zi), zk.cross(&(pi - pk))),
                    (true, false) => (Vector3::zeros(), zk),
                    (false, _) => (Vector3::zeros(), Vector3::zeros()),
                };
                let (lin, ang) = match row.kind {
                    JointKind::Revolute => (dzi.cross(&(pe - pi)) + zi.cross(&(dpe - dpi)), dzi),
                    JointKind::Prismatic => (dzi, Vector3::zeros()),
                };
                djac.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
                djac.fixed_view_mut::<3, 1>(3, i).copy_from(&ang);
            }
            djac
        })
        .collect()
}

/// `w = sqrt(det(J·Jᵀ))`, with round-off negatives clamped to zero.
pub fn manipulability_index(jac: &DMatrix<f64>) -> f64 {
    let det = (jac * jac.transpose()).determinant();
    det.max(0.0).sqrt()
}

/// Principal semi-axes of the velocity manipulability ellipsoid.
#[derive(Clone, Debug, PartialEq)]
pub struct ManipulabilityEllipsoid {
    /// Semi-axis lengths, descending.
    pub semi_axes: DVector<f64>,
    /// Orthonormal directions, one column per semi-axis.
    pub directions: DMatrix<f64>,
}

impl ManipulabilityEllipsoid {
    pub fn volume_measure(&self) -> f64 {
        self.semi_axes.iter().product()
    }
}

pub fn manipulability_ellipsoid(jac: &DMatrix<f64>) -> ManipulabilityEllipsoid {
    let eig = SymmetricEigen::new(jac * jac.transpose());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let semi_axes = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i].max(0.0).sqrt()));
    let directions = eig.eigenvectors.select_columns(order.iter());
    ManipulabilityEllipsoid { semi_axes, directions }
}
