//! Differential inverse kinematics with null-space secondary objectives,
//! trajectory integration and end-effector wrench reconstruction.

use nalgebra::{DMatrix, DVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{
    chain_poses, full_jacobian, jacobian_partials, manipulability_index, select_rows, RobotModel, TaskAxis,
};
use crate::observability::{
    gamma_max, gamma_sum, index_partials, observability_index, sensor_matrix, sensor_matrix_with_partials, Gamma,
};
use crate::sensing::{AbsMode, SensingOptions, SensorSpec, ThresholdSpec, DEFAULT_SMOOTH_C};
use crate::trajectory::{AbortedRun, LogRecord, TrajectoryLog};

/// Relative singular-value cutoff used by every pseudoinverse.
pub const SV_CUTOFF: f64 = 1e-8;

pub const DEFAULT_DT: f64 = 1e-3;
pub const DEFAULT_FD_STEP: f64 = 1e-6;
pub const DEFAULT_FEEDBACK_GAIN: f64 = 10.0;

/// Below this manipulability the analytic gradient of `w_k` is replaced by
/// central differences.
const DEGENERATE_WK: f64 = 1e-9;

/// Moore-Penrose pseudoinverse with singular values below
/// `SV_CUTOFF · σ_max` treated as zero.
pub fn pseudoinverse(jac: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = jac.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let cutoff = SV_CUTOFF * sigma_max;
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let mut pinv = DMatrix::zeros(jac.ncols(), jac.nrows());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            pinv += v_t.row(i).transpose() * u.column(i).transpose() / s;
        }
    }
    pinv
}

/// `N = I − J†J`.
pub fn nullspace_projector(jac: &DMatrix<f64>) -> DMatrix<f64> {
    let n = jac.ncols();
    DMatrix::identity(n, n) - pseudoinverse(jac) * jac
}

/// Secondary objective maximised in the null space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    None,
    Manipulability,
    Index(Gamma),
    Axis { axis: TaskAxis, gamma: Gamma },
}

impl Objective {
    pub fn label(&self) -> String {
        match self {
            Objective::None => "none".into(),
            Objective::Manipulability => "w_k".into(),
            Objective::Index(g) => format!("o_{}", g.name()),
            Objective::Axis { axis, gamma } => format!("s_{}_{}", gamma.name(), axis.label()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMethod {
    #[default]
    Analytic,
    FiniteDifference,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerSpec {
    pub objective: Objective,
    pub k0: f64,
    pub gradient: GradientMethod,
    pub fd_step: f64,
    pub smooth_c: f64,
    /// Proportional gain on the translational tracking error.
    pub feedback_gain: f64,
    /// Task rows the controller tracks; `None` tracks the model's task axes.
    pub tracked_axes: Option<Vec<TaskAxis>>,
    pub thresholds: Option<ThresholdSpec>,
}

impl Default for ControllerSpec {
    fn default() -> Self {
        Self {
            objective: Objective::None,
            k0: 1.0,
            gradient: GradientMethod::Analytic,
            fd_step: DEFAULT_FD_STEP,
            smooth_c: DEFAULT_SMOOTH_C,
            feedback_gain: DEFAULT_FEEDBACK_GAIN,
            tracked_axes: None,
            thresholds: None,
        }
    }
}

impl ControllerSpec {
    pub fn new(objective: Objective, k0: f64) -> Self {
        Self {
            objective,
            k0,
            ..Self::default()
        }
    }

    pub fn validate(&self, model: &RobotModel) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::validation(
                    format!("controller.{name}"),
                    format!("must be positive, got {v}"),
                ))
            }
        };
        positive("k0", self.k0)?;
        positive("fd_step", self.fd_step)?;
        positive("smooth_c", self.smooth_c)?;
        if !(self.feedback_gain >= 0.0 && self.feedback_gain.is_finite()) {
            return Err(Error::validation(
                "controller.feedback_gain",
                "must be finite and non-negative",
            ));
        }
        if let Some(axes) = &self.tracked_axes {
            if axes.is_empty() {
                return Err(Error::validation(
                    "controller.tracked_axes",
                    "at least one axis is required",
                ));
            }
            for (i, a) in axes.iter().enumerate() {
                if axes[..i].contains(a) {
                    return Err(Error::validation(
                        "controller.tracked_axes",
                        format!("axis {} repeated", a.label()),
                    ));
                }
            }
        }
        if let Objective::Axis { axis, .. } = self.objective {
            if !model.task_axes.contains(&axis) {
                return Err(Error::validation(
                    "controller.objective",
                    format!("axis {} is not a task axis of the robot", axis.label()),
                ));
            }
        }
        Ok(())
    }

    pub fn tracked<'a>(&'a self, model: &'a RobotModel) -> &'a [TaskAxis] {
        self.tracked_axes.as_deref().unwrap_or(&model.task_axes)
    }

    fn sensing(&self) -> SensingOptions {
        SensingOptions {
            abs: AbsMode::Smooth { c: self.smooth_c },
            thresholds: self.thresholds.clone(),
        }
    }
}

/// Value of the controller's objective at `q`, evaluated with the smooth
/// absolute value.
pub fn objective_value(model: &RobotModel, sensors: &[SensorSpec], q: &[f64], spec: &ControllerSpec) -> Result<f64> {
    model.check_state(q)?;
    let poses = chain_poses(model, q);
    match spec.objective {
        Objective::None => Ok(0.0),
        Objective::Manipulability => Ok(manipulability_index(&select_rows(
            &full_jacobian(model, &poses),
            &model.task_axes,
        ))),
        Objective::Index(gamma) => {
            let s = sensor_matrix(model, sensors, &poses, &spec.sensing())?;
            Ok(observability_index(&gamma.apply(&s.matrix)))
        }
        Objective::Axis { axis, gamma } => {
            let j = axis_row(model, axis)?;
            let s = sensor_matrix(model, sensors, &poses, &spec.sensing())?;
            Ok(gamma.apply(&s.matrix)[j])
        }
    }
}

fn axis_row(model: &RobotModel, axis: TaskAxis) -> Result<usize> {
    model
        .task_axes
        .iter()
        .position(|&a| a == axis)
        .ok_or_else(|| Error::invalid(format!("axis {} is not a task axis", axis.label())))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientResult {
    pub gradient: DVector<f64>,
    /// Set when the analytic form was undefined and central differences were used.
    pub degenerate: bool,
}

pub fn objective_gradient(
    model: &RobotModel,
    sensors: &[SensorSpec],
    q: &[f64],
    spec: &ControllerSpec,
) -> Result<GradientResult> {
    model.check_state(q)?;
    if spec.objective == Objective::None {
        return Err(Error::invalid("objective `none` has no gradient"));
    }
    if spec.gradient == GradientMethod::FiniteDifference {
        return Ok(GradientResult {
            gradient: finite_difference_gradient(model, sensors, q, spec)?,
            degenerate: false,
        });
    }
    let poses = chain_poses(model, q);
    let n = model.n_q();
    let gradient = match spec.objective {
        Objective::None => unreachable!(),
        Objective::Manipulability => {
            let jac = select_rows(&full_jacobian(model, &poses), &model.task_axes);
            let w = manipulability_index(&jac);
            let inverse = (&jac * jac.transpose()).try_inverse();
            match inverse {
                Some(inv) if w > DEGENERATE_WK => {
                    let partials = jacobian_partials(model, &poses);
                    DVector::from_iterator(
                        n,
                        partials.iter().map(|dj| {
                            let dj = select_rows(dj, &model.task_axes);
                            w * (&inv * &jac * dj.transpose()).trace()
                        }),
                    )
                }
                _ => {
                    return Ok(GradientResult {
                        gradient: finite_difference_gradient(model, sensors, q, spec)?,
                        degenerate: true,
                    })
                }
            }
        }
        Objective::Index(gamma) => {
            let (s, ds) = sensor_matrix_with_partials(model, sensors, &poses, &spec.sensing())?;
            let (value, dvalue) = gamma.apply_with_partials(&s, &ds);
            DVector::from_vec(index_partials(&value, &dvalue))
        }
        Objective::Axis { axis, gamma } => {
            let j = axis_row(model, axis)?;
            let (s, ds) = sensor_matrix_with_partials(model, sensors, &poses, &spec.sensing())?;
            let (_, dvalue) = gamma.apply_with_partials(&s, &ds);
            DVector::from_iterator(n, dvalue.iter().map(|d| d[j]))
        }
    };
    Ok(GradientResult {
        gradient,
        degenerate: false,
    })
}

/// Central differences of [`objective_value`] with step `spec.fd_step`.
pub fn finite_difference_gradient(
    model: &RobotModel,
    sensors: &[SensorSpec],
    q: &[f64],
    spec: &ControllerSpec,
) -> Result<DVector<f64>> {
    let h = spec.fd_step;
    let mut grad = DVector::zeros(q.len());
    let mut probe = q.to_vec();
    for k in 0..q.len() {
        probe[k] = q[k] + h;
        let plus = objective_value(model, sensors, &probe, spec)?;
        probe[k] = q[k] - h;
        let minus = objective_value(model, sensors, &probe, spec)?;
        probe[k] = q[k];
        grad[k] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// `q̇ = J†ẋ + N·k0·∂f/∂q`, with `J` restricted to the tracked axes.
pub fn velocity_step(
    model: &RobotModel,
    sensors: &[SensorSpec],
    q: &[f64],
    xdot: &DVector<f64>,
    spec: &ControllerSpec,
) -> Result<DVector<f64>> {
    model.check_state(q)?;
    let tracked = spec.tracked(model);
    if xdot.len() != tracked.len() {
        return Err(Error::invalid(format!(
            "task velocity has {} entries, controller tracks {}",
            xdot.len(),
            tracked.len()
        )));
    }
    let jac = select_rows(&full_jacobian(model, &chain_poses(model, q)), tracked);
    let pinv = pseudoinverse(&jac);
    let mut qd = &pinv * xdot;
    if spec.objective != Objective::None {
        let grad = objective_gradient(model, sensors, q, spec)?.gradient;
        let n = model.n_q();
        let projector = DMatrix::identity(n, n) - &pinv * &jac;
        qd += projector * grad * spec.k0;
    }
    Ok(qd)
}

/// Time-parameterised end-effector path.
pub trait TaskPath {
    fn position(&self, t: f64) -> Vector3<f64>;
    /// Linear velocity followed by angular velocity.
    fn twist(&self, t: f64) -> Vector6<f64>;
}

/// Keeps the end effector at a fixed point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HoldPath {
    pub position: Vector3<f64>,
}

impl TaskPath for HoldPath {
    fn position(&self, _t: f64) -> Vector3<f64> {
        self.position
    }

    fn twist(&self, _t: f64) -> Vector6<f64> {
        Vector6::zeros()
    }
}

/// Advance along x at constant speed while oscillating one sine period in y.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinusoidPath {
    pub start: [f64; 3],
    pub length: f64,
    pub amplitude: f64,
    pub period: f64,
}

impl TaskPath for SinusoidPath {
    fn position(&self, t: f64) -> Vector3<f64> {
        let phase = std::f64::consts::TAU * t / self.period;
        Vector3::new(
            self.start[0] + self.length * t / self.period,
            self.start[1] + self.amplitude * phase.sin(),
            self.start[2],
        )
    }

    fn twist(&self, t: f64) -> Vector6<f64> {
        let omega = std::f64::consts::TAU / self.period;
        Vector6::new(
            self.length / self.period,
            self.amplitude * omega * (omega * t).cos(),
            0.0,
            0.0,
            0.0,
            0.0,
        )
    }
}

/// Change applied to a running simulation at a given time.
#[derive(Clone, Debug, PartialEq)]
pub enum EventAction {
    /// The sensor's axis is zeroed; its joint keeps moving.
    DeactivateSensor(String),
    SetObjective(Objective),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduledEvent {
    pub time: f64,
    pub action: EventAction,
}

/// Explicit Euler integration of the velocity controller along `path`.
pub fn integrate_trajectory(
    model: &RobotModel,
    sensors: &[SensorSpec],
    controller: &ControllerSpec,
    path: &dyn TaskPath,
    q0: &[f64],
    dt: f64,
    duration: f64,
) -> Result<TrajectoryLog> {
    integrate_with_events(model, sensors, controller, path, q0, dt, duration, &[])
}

#[allow(clippy::too_many_arguments)]
pub fn integrate_with_events(
    model: &RobotModel,
    sensors: &[SensorSpec],
    controller: &ControllerSpec,
    path: &dyn TaskPath,
    q0: &[f64],
    dt: f64,
    duration: f64,
    events: &[ScheduledEvent],
) -> Result<TrajectoryLog> {
    model.check_state(q0)?;
    controller.validate(model)?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid(format!("time step must be positive, got {dt}")));
    }
    if !(duration >= 0.0 && duration.is_finite()) {
        return Err(Error::invalid(format!("duration must be non-negative, got {duration}")));
    }
    for event in events {
        if !(0.0..=duration).contains(&event.time) {
            return Err(Error::invalid(format!(
                "event at t = {} lies outside the run",
                event.time
            )));
        }
        if let EventAction::DeactivateSensor(id) = &event.action {
            if !sensors.iter().any(|s| &s.id == id) {
                return Err(Error::invalid(format!("event names unknown sensor `{id}`")));
            }
        }
    }

    let mut sensors = sensors.to_vec();
    let mut controller = controller.clone();
    let mut pending: Vec<&ScheduledEvent> = events.iter().collect();
    pending.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut pending = pending.into_iter().peekable();

    let tracked = controller.tracked(model).to_vec();
    let logging = SensingOptions {
        abs: AbsMode::Exact,
        thresholds: controller.thresholds.clone(),
    };
    let mut log = TrajectoryLog::new(model.n_q(), model.task_axes.clone());
    let steps = (duration / dt).round() as usize;
    let mut q = DVector::from_column_slice(q0);

    for i in 0..=steps {
        let t = i as f64 * dt;
        while let Some(event) = pending.next_if(|e| e.time <= t + 0.5 * dt) {
            match &event.action {
                EventAction::DeactivateSensor(id) => {
                    sensors
                        .iter_mut()
                        .filter(|s| &s.id == id)
                        .for_each(|s| s.active = false);
                }
                EventAction::SetObjective(objective) => controller.objective = *objective,
            }
        }
        let abort = |message: String, log: TrajectoryLog| {
            Error::Aborted(Box::new(AbortedRun {
                time: t,
                message,
                partial: log,
            }))
        };
        if q.iter().any(|v| !v.is_finite()) {
            return Err(abort("joint state is not finite".into(), log));
        }

        let poses = chain_poses(model, q.as_slice());
        let pe = poses.ee_position();
        let desired = path.position(t);
        let twist = path.twist(t);
        let error = desired - pe;
        let xdot = DVector::from_iterator(
            tracked.len(),
            tracked.iter().map(|a| {
                let idx = a.index();
                let feedback = if a.is_translational() {
                    controller.feedback_gain * error[idx]
                } else {
                    0.0
                };
                twist[idx] + feedback
            }),
        );
        let qd = velocity_step(model, &sensors, q.as_slice(), &xdot, &controller)?;
        if qd.iter().any(|v| !v.is_finite()) {
            return Err(abort("joint velocity is not finite".into(), log));
        }

        let s = sensor_matrix(model, &sensors, &poses, &logging)?.matrix;
        let s_sum = gamma_sum(&s);
        let s_max = gamma_max(&s);
        let jac = select_rows(&full_jacobian(model, &poses), &model.task_axes);
        let track_err = tracked
            .iter()
            .filter(|a| a.is_translational())
            .map(|a| error[a.index()].powi(2))
            .sum::<f64>()
            .sqrt();
        log.records.push(LogRecord {
            t,
            q: q.iter().copied().collect(),
            qd: qd.iter().copied().collect(),
            ee: [pe.x, pe.y, pe.z],
            w_k: manipulability_index(&jac),
            o_sum: observability_index(&s_sum),
            o_max: observability_index(&s_max),
            s_sum: s_sum.iter().copied().collect(),
            s_max: s_max.iter().copied().collect(),
            track_err,
        });
        if i < steps {
            q += qd * dt;
        }
    }
    Ok(log)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconstructionMethod {
    Full,
    Deficient,
}

/// Least-squares end-effector wrench estimate from joint torques.
#[derive(Clone, Debug, PartialEq)]
pub struct WrenchEstimate {
    pub force: DVector<f64>,
    /// `‖J_defᵀ·F − τ_def‖`.
    pub residual: f64,
    pub method: ReconstructionMethod,
}

/// Minimum-norm solution of `τ = Jᵀ·F` after removing the columns of `J`
/// and entries of `τ` that belong to `deficient_joints` (0-based).
pub fn reconstruct_ee_wrench(
    jac: &DMatrix<f64>,
    tau: &DVector<f64>,
    deficient_joints: &[usize],
) -> Result<WrenchEstimate> {
    let n = jac.ncols();
    if tau.len() != n {
        return Err(Error::invalid(format!("{} joint torques for {n} joints", tau.len())));
    }
    if let Some(&bad) = deficient_joints.iter().find(|&&k| k >= n) {
        return Err(Error::invalid(format!("deficient joint index {bad} out of range")));
    }
    let keep: Vec<usize> = (0..n).filter(|k| !deficient_joints.contains(k)).collect();
    if keep.is_empty() {
        return Err(Error::invalid("every torque sensor is deficient"));
    }
    let jac_def_t = jac.select_columns(keep.iter()).transpose();
    let tau_def = tau.select_rows(keep.iter());
    let force = pseudoinverse(&jac_def_t) * &tau_def;
    let residual = (&jac_def_t * &force - tau_def).norm();
    Ok(WrenchEstimate {
        force,
        residual,
        method: if keep.len() == n {
            ReconstructionMethod::Full
        } else {
            ReconstructionMethod::Deficient
        },
    })
}
