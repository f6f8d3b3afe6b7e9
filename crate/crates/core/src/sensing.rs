//! Directional sensor axes: placement, rotation into the task frame, the
//! force-sensor transformation and noise thresholding.

use nalgebra::{DVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{ChainPoses, FramePose, JointKind, RobotModel, TaskAxis};

/// Cross products with a norm at or below this are treated as collinear.
pub const COLLINEAR_EPS: f64 = 1e-12;

/// Default constant of the smooth absolute value `x·tanh(c·x)`.
pub const DEFAULT_SMOOTH_C: f64 = 1e4;

const UNIT_TOL: f64 = 1e-10;

/// Element-wise absolute value used by the transformation.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum AbsMode {
    #[default]
    Exact,
    /// `x·tanh(c·x)`, differentiable at zero. Never exceeds `|x|`, and
    /// differs from it by less than `1/c`.
    Smooth { c: f64 },
}

impl AbsMode {
    pub fn smooth() -> Self {
        AbsMode::Smooth { c: DEFAULT_SMOOTH_C }
    }

    #[inline]
    pub fn abs(self, x: f64) -> f64 {
        match self {
            AbsMode::Exact => x.abs(),
            AbsMode::Smooth { c } => x * (c * x).tanh(),
        }
    }

    /// Derivative of [`AbsMode::abs`]; the exact mode uses `sign(x)` with 0 at 0.
    #[inline]
    pub fn dabs(self, x: f64) -> f64 {
        match self {
            AbsMode::Exact => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            AbsMode::Smooth { c } => {
                let t = (c * x).tanh();
                t + c * x * (1.0 - t * t)
            }
        }
    }

    fn abs3(self, v: &Vector3<f64>) -> Vector3<f64> {
        v.map(|x| self.abs(x))
    }
}

/// The single measured direction of a sensor, in its local frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SensorAxis {
    /// Translational axis (load cell, accelerometer axis, ...).
    Linear(Vector3<f64>),
    /// Rotational axis (joint torque sensor, gyro axis, ...).
    Torque(Vector3<f64>),
}

impl SensorAxis {
    pub fn direction(&self) -> &Vector3<f64> {
        match self {
            SensorAxis::Linear(v) | SensorAxis::Torque(v) => v,
        }
    }
}

/// One individually measured sensor axis. Multi-axis hardware is declared as
/// several specs sharing a mount.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorSpec {
    pub id: String,
    /// DH frame the sensor is fixed to: 0 is the base, `k` is link `k`.
    pub link: usize,
    /// Transform from the link frame to the sensor frame.
    pub mount: FramePose,
    pub axis: SensorAxis,
    /// Noise standard deviation, in the unit of the measured quantity.
    pub sigma: f64,
    pub active: bool,
}

impl SensorSpec {
    pub fn linear(id: impl Into<String>, link: usize, mount: FramePose, axis: Vector3<f64>) -> Self {
        Self {
            id: id.into(),
            link,
            mount,
            axis: SensorAxis::Linear(axis),
            sigma: 0.0,
            active: true,
        }
    }

    pub fn torque(id: impl Into<String>, link: usize, mount: FramePose, axis: Vector3<f64>) -> Self {
        Self {
            id: id.into(),
            link,
            mount,
            axis: SensorAxis::Torque(axis),
            sigma: 0.0,
            active: true,
        }
    }

    /// Torque sensor collinear with joint `joint` (0-based) and located at its origin.
    pub fn joint_torque(id: impl Into<String>, joint: usize) -> Self {
        Self::torque(id, joint, FramePose::identity(), Vector3::z())
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn validate(&self, model: &RobotModel) -> Result<()> {
        let field = |name: &str| format!("sensor `{}`.{name}", self.id);
        if self.link > model.n_q() {
            return Err(Error::validation(
                field("link"),
                format!("link {} does not exist (chain has {} links)", self.link, model.n_q()),
            ));
        }
        let norm = self.axis.direction().norm();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::validation(
                field("axis"),
                format!("axis must be a unit vector, norm is {norm}"),
            ));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::validation(
                field("sigma"),
                "noise sigma must be finite and non-negative",
            ));
        }
        if !self.mount.is_valid() {
            return Err(Error::validation(
                field("mount"),
                "mount is not a proper rigid transform",
            ));
        }
        Ok(())
    }

    fn world_frame(&self, poses: &ChainPoses) -> Result<FramePose> {
        poses
            .link_frame(self.link)
            .map(|f| f.compose(&self.mount))
            .ok_or_else(|| Error::invalid(format!("sensor `{}` is mounted on missing link {}", self.id, self.link)))
    }
}

/// A sensor axis rotated into task-frame orientation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotatedAxis {
    pub p: Vector3<f64>,
    pub theta: Vector3<f64>,
    /// Sensor origin in world coordinates.
    pub position: Vector3<f64>,
}

/// Rotates the sensor's local axis into the task frame. An inactive sensor
/// comes back with both axes zeroed.
pub fn rotate_sensor_axis(sensor: &SensorSpec, poses: &ChainPoses) -> Result<RotatedAxis> {
    let frame = sensor.world_frame(poses)?;
    let zero = Vector3::zeros();
    let (p, theta) = match (sensor.active, sensor.axis) {
        (false, _) => (zero, zero),
        (true, SensorAxis::Linear(a)) => (frame.rotation * a, zero),
        (true, SensorAxis::Torque(a)) => (zero, frame.rotation * a),
    };
    Ok(RotatedAxis {
        p,
        theta,
        position: frame.translation,
    })
}

/// Force-sensor transformation over all six wrench rows:
/// `[|ŝ_p| + |ŝ_θ×r| / ‖ŝ_θ×r‖ ; |ŝ_θ|]`, dropping the cross-product term
/// when `ŝ_θ` and `r` are collinear.
pub fn transform_force_sensor(
    axis_p: &Vector3<f64>,
    axis_theta: &Vector3<f64>,
    r: &Vector3<f64>,
    abs: AbsMode,
) -> Vector6<f64> {
    let cross = axis_theta.cross(r);
    let norm = cross.norm();
    let mut trans = abs.abs3(axis_p);
    if norm > COLLINEAR_EPS {
        trans += abs.abs3(&(cross / norm));
    }
    let rot = abs.abs3(axis_theta);
    Vector6::new(trans.x, trans.y, trans.z, rot.x, rot.y, rot.z)
}

/// Transformed axis of one sensor restricted to the task rows. Entries lie in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformedAxis {
    pub sensor_id: String,
    pub s_tilde: DVector<f64>,
}

impl TransformedAxis {
    pub fn from_full(sensor_id: impl Into<String>, full: &Vector6<f64>, axes: &[TaskAxis]) -> Self {
        Self {
            sensor_id: sensor_id.into(),
            s_tilde: DVector::from_iterator(axes.len(), axes.iter().map(|a| full[a.index()])),
        }
    }
}

/// `s* = σ/Φ`. Fails when the sensor can never resolve `Φ` (`s* ≥ 1`).
pub fn compute_threshold(sigma: f64, phi: f64) -> Result<f64> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::invalid(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if phi.is_nan() || phi <= 0.0 {
        return Err(Error::invalid(format!("minimum quantity must be positive, got {phi}")));
    }
    let s_star = sigma / phi;
    if s_star >= 1.0 {
        return Err(Error::InfeasibleThreshold { sigma, phi });
    }
    Ok(s_star)
}

/// Minimum force each translational axis must resolve when measured through a
/// torque sensor: `F_min·|ŝ_θ × r|_j`. `None` marks an axis the sensor cannot
/// see at all.
pub fn min_quantity_for_torque_sensor(f_min: f64, axis_theta: &Vector3<f64>, r: &Vector3<f64>) -> [Option<f64>; 3] {
    let c = axis_theta.cross(r);
    [0, 1, 2].map(|j| {
        let cj = c[j].abs();
        (cj > 0.0).then_some(f_min * cj)
    })
}

/// Deadband: zero at or below `s*`, rescaled linearly to `[0, 1]` above it.
pub fn apply_noise_threshold(entry: f64, s_star: f64) -> f64 {
    if entry <= s_star {
        0.0
    } else {
        1.0 - (1.0 - entry) / (1.0 - s_star)
    }
}

/// Minimum detectable quantity per task axis (forces on translational rows,
/// torques on rotational rows).
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdSpec {
    pub phi: Vec<f64>,
}

impl ThresholdSpec {
    /// Checks `Φ > 0` and `σ < Φ` for every sensor row whose threshold does not
    /// depend on the configuration.
    pub fn validate(&self, model: &RobotModel, sensors: &[SensorSpec]) -> Result<()> {
        if self.phi.len() != model.n_t() {
            return Err(Error::validation(
                "thresholds.phi",
                format!("expected {} entries, got {}", model.n_t(), self.phi.len()),
            ));
        }
        for (j, &phi) in self.phi.iter().enumerate() {
            if !(phi > 0.0 && phi.is_finite()) {
                return Err(Error::validation(format!("thresholds.phi[{j}]"), "must be positive"));
            }
        }
        for sensor in sensors {
            for (axis, &phi) in model.task_axes.iter().zip(&self.phi) {
                let varies = matches!(sensor.axis, SensorAxis::Torque(_)) && axis.is_translational();
                if !varies {
                    compute_threshold(sensor.sigma, phi).map_err(|e| {
                        Error::validation(
                            format!("sensor `{}`.sigma", sensor.id),
                            format!("{e} on axis {}", axis.label()),
                        )
                    })?;
                }
            }
        }
        Ok(())
    }
}

/// How the sensing pipeline evaluates transformed axes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SensingOptions {
    pub abs: AbsMode,
    pub thresholds: Option<ThresholdSpec>,
}

/// Value of a sensor column over all six rows plus its partial derivative
/// with respect to every joint.
#[derive(Clone, Debug)]
pub(crate) struct ColumnJet {
    pub value: Vector6<f64>,
    pub partials: Vec<Vector6<f64>>,
    /// Unnormalized moment-arm cross product `ŝ_θ × r` and its partials.
    cross: Vector3<f64>,
    cross_partials: Vec<Vector3<f64>>,
}

/// Velocity of a world point / direction carried by frame `link` under joint `k`.
struct JointMotion {
    axis: Vector3<f64>,
    origin: Vector3<f64>,
    revolute: bool,
}

impl JointMotion {
    fn point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        if self.revolute {
            self.axis.cross(&(p - self.origin))
        } else {
            self.axis
        }
    }

    fn direction(&self, d: &Vector3<f64>) -> Vector3<f64> {
        if self.revolute {
            self.axis.cross(d)
        } else {
            Vector3::zeros()
        }
    }
}

fn joint_motions(model: &RobotModel, poses: &ChainPoses) -> Vec<JointMotion> {
    model
        .rows
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let (axis, origin) = poses.joint_axis(k);
            JointMotion {
                axis,
                origin,
                revolute: row.kind == JointKind::Revolute,
            }
        })
        .collect()
}

/// Full pipeline for one sensor: rotation, transformation and (optionally)
/// thresholding, with analytic partials when `with_partials` is set.
pub(crate) fn sensor_column(
    model: &RobotModel,
    sensor: &SensorSpec,
    poses: &ChainPoses,
    options: &SensingOptions,
    with_partials: bool,
) -> Result<ColumnJet> {
    let rotated = rotate_sensor_axis(sensor, poses)?;
    let abs = options.abs;
    let pe = poses.ee_position();
    let r = pe - rotated.position;
    let value = transform_force_sensor(&rotated.p, &rotated.theta, &r, abs);

    let n = model.n_q();
    let cross = rotated.theta.cross(&r);
    let norm = cross.norm();
    let mut partials = Vec::new();
    let mut cross_partials = Vec::new();
    if with_partials && sensor.active {
        let motions = joint_motions(model, poses);
        for (k, motion) in motions.iter().enumerate() {
            let carried = sensor.link > k;
            let (dp, dtheta, dpos) = if carried {
                (
                    motion.direction(&rotated.p),
                    motion.direction(&rotated.theta),
                    motion.point(&rotated.position),
                )
            } else {
                (Vector3::zeros(), Vector3::zeros(), Vector3::zeros())
            };
            let dr = motion.point(&pe) - dpos;
            let mut dtrans = rotated.p.zip_map(&dp, |x, dx| abs.dabs(x) * dx);
            let dcross = dtheta.cross(&r) + rotated.theta.cross(&dr);
            cross_partials.push(dcross);
            if norm > COLLINEAR_EPS {
                let unit = cross / norm;
                let dunit = dcross / norm - cross * (cross.dot(&dcross) / norm.powi(3));
                dtrans += unit.zip_map(&dunit, |x, dx| abs.dabs(x) * dx);
            }
            let drot = rotated.theta.zip_map(&dtheta, |x, dx| abs.dabs(x) * dx);
            partials.push(Vector6::new(dtrans.x, dtrans.y, dtrans.z, drot.x, drot.y, drot.z));
        }
    } else if with_partials {
        partials = vec![Vector6::zeros(); n];
        cross_partials = vec![Vector3::zeros(); n];
    }

    let mut jet = ColumnJet {
        value,
        partials,
        cross,
        cross_partials,
    };
    if let Some(spec) = &options.thresholds {
        apply_thresholds(model, sensor, spec, abs, &mut jet)?;
    }
    Ok(jet)
}

fn apply_thresholds(
    model: &RobotModel,
    sensor: &SensorSpec,
    spec: &ThresholdSpec,
    abs: AbsMode,
    jet: &mut ColumnJet,
) -> Result<()> {
    if !sensor.active {
        return Ok(());
    }
    let cross = jet.cross;
    let torque = matches!(sensor.axis, SensorAxis::Torque(_));
    for (axis, &phi) in model.task_axes.iter().zip(&spec.phi) {
        let row = axis.index();
        let entry = jet.value[row];
        if torque && axis.is_translational() {
            // Φ_p,j = F_min·|ŝ_θ × r|_j changes with the configuration.
            let c = abs.abs(cross[row]);
            let phi_row = phi * c;
            let s_star = if phi_row > 0.0 {
                sensor.sigma / phi_row
            } else {
                f64::INFINITY
            };
            if s_star >= 1.0 || entry <= s_star {
                jet.value[row] = 0.0;
                jet.partials.iter_mut().for_each(|d| d[row] = 0.0);
                continue;
            }
            jet.value[row] = apply_noise_threshold(entry, s_star);
            let scale = 1.0 / (1.0 - s_star);
            let star_weight = (entry - 1.0) * scale * scale;
            let dc_factor = -s_star * abs.dabs(cross[row]) / c;
            for (d, dc) in jet.partials.iter_mut().zip(&jet.cross_partials) {
                let ds_star = dc_factor * dc[row];
                d[row] = d[row] * scale + star_weight * ds_star;
            }
        } else {
            let s_star = compute_threshold(sensor.sigma, phi)?;
            jet.value[row] = apply_noise_threshold(entry, s_star);
            let scale = if entry > s_star { 1.0 / (1.0 - s_star) } else { 0.0 };
            jet.partials.iter_mut().for_each(|d| d[row] *= scale);
        }
    }
    Ok(())
}

/// Transformed axes of every sensor at one configuration, in input order.
pub fn transformed_axes(
    model: &RobotModel,
    sensors: &[SensorSpec],
    poses: &ChainPoses,
    options: &SensingOptions,
) -> Result<Vec<TransformedAxis>> {
    sensors
        .iter()
        .map(|s| {
            let jet = sensor_column(model, s, poses, options, false)?;
            Ok(TransformedAxis::from_full(s.id.clone(), &jet.value, &model.task_axes))
        })
        .collect()
}
