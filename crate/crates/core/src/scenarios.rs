//! Reference robots and the packaged experiments: redundancy-resolution
//! trials, a joint-space sweep and a runtime sensor deficiency.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{load_config, load_config_str};
use crate::control::{
    integrate_with_events, pseudoinverse, reconstruct_ee_wrench, ControllerSpec, EventAction, HoldPath, Objective,
    ScheduledEvent, SinusoidPath, TaskPath,
};
use crate::error::{Error, Result};
use crate::kinematics::{chain_poses, full_jacobian, select_rows, DhRow, FramePose, RobotModel, TaskAxis};
use crate::observability::{gamma_max, gamma_sum, observability_index, sensor_matrix, Gamma};
use crate::sensing::{SensingOptions, SensorSpec};
use crate::trajectory::{LogRecord, LogSummary, TrajectoryLog};

/// Shipped planar three-link configuration.
pub const PLANAR_3R_CONFIG: &str = include_str!("../configs/planar_3r.toml");

/// Shipped 7-DOF arm with one torque sensor per joint.
pub const JTS_7DOF_CONFIG: &str = include_str!("../configs/baxter_jts.toml");

/// Unit-link planar arm with a single-axis load cell at the middle of each
/// link. Cells 1 and 3 measure across their link, cell 2 along it.
pub fn build_planar_3r() -> (RobotModel, Vec<SensorSpec>) {
    let model = RobotModel::new(
        vec![DhRow::revolute(1.0, 0.0, 0.0, 0.0); 3],
        vec![TaskAxis::Fx, TaskAxis::Fy],
    )
    .expect("planar arm is well formed");
    let mid = FramePose::from_translation(Vector3::new(-0.5, 0.0, 0.0));
    let sensors = vec![
        SensorSpec::linear("load_cell_1", 1, mid, Vector3::y()),
        SensorSpec::linear("load_cell_2", 2, mid, Vector3::x()),
        SensorSpec::linear("load_cell_3", 3, mid, Vector3::y()),
    ];
    (model, sensors)
}

/// The 7-DOF joint-torque-sensing arm from the embedded configuration.
pub fn build_7dof_jts() -> Result<(RobotModel, Vec<SensorSpec>)> {
    let loaded = load_config_str(JTS_7DOF_CONFIG, &[])?;
    Ok((loaded.model, loaded.sensors))
}

pub fn build_7dof_jts_from(path: impl AsRef<Path>) -> Result<(RobotModel, Vec<SensorSpec>)> {
    let loaded = load_config(path.as_ref(), &[])?;
    Ok((loaded.model, loaded.sensors))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    TrialMinMotion,
    TrialMaxWk,
    TrialMaxO,
    TrialMaxAxis(TaskAxis),
    Sweep,
    Deficiency,
}

impl ScenarioKind {
    pub fn label(self) -> &'static str {
        match self {
            ScenarioKind::TrialMinMotion => "trial_min_motion",
            ScenarioKind::TrialMaxWk => "trial_max_wk",
            ScenarioKind::TrialMaxO => "trial_max_o",
            ScenarioKind::TrialMaxAxis(_) => "trial_max_axis",
            ScenarioKind::Sweep => "sweep",
            ScenarioKind::Deficiency => "deficiency",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PathSpec {
    /// Hold the end effector where the initial pose puts it.
    Hold,
    Sinusoid {
        start: [f64; 3],
        length: f64,
        amplitude: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeficiencyEvent {
    pub sensor: String,
    pub time: f64,
    /// Objective active before the fault; the controller objective takes over after it.
    pub pre_fault_objective: Objective,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub kind: ScenarioKind,
    pub model: RobotModel,
    pub sensors: Vec<SensorSpec>,
    pub controller: ControllerSpec,
    pub duration: f64,
    pub dt: f64,
    /// Radians.
    pub initial_q: Vec<f64>,
    pub path: PathSpec,
    /// Joint-space waypoints of a sweep, radians.
    pub waypoints: Vec<Vec<f64>>,
    pub deficiency: Option<DeficiencyEvent>,
    /// Wrench used to probe force reconstruction; drawn from `seed` when absent.
    pub probe_wrench: Option<Vec<f64>>,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for s in &self.sensors {
            s.validate(&self.model)?;
        }
        self.controller.validate(&self.model)?;
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::validation("duration_s", "must be positive"));
        }
        if !(self.dt > 0.0 && self.dt <= self.duration) {
            return Err(Error::validation("dt_s", "must be positive and no longer than the run"));
        }
        let n = self.model.n_q();
        if self.kind == ScenarioKind::Sweep {
            if self.waypoints.len() < 2 {
                return Err(Error::validation("waypoints", "a sweep needs at least two waypoints"));
            }
            if let Some(i) = self.waypoints.iter().position(|w| w.len() != n) {
                return Err(Error::validation(
                    format!("waypoints[{i}]"),
                    format!("expected {n} joint values"),
                ));
            }
        } else if self.initial_q.len() != n {
            return Err(Error::validation("initial_q_deg", format!("expected {n} joint values")));
        }
        if let Some(event) = &self.deficiency {
            if !self.sensors.iter().any(|s| s.id == event.sensor) {
                return Err(Error::validation(
                    "deficiency_sensor",
                    format!("no sensor with id `{}`", event.sensor),
                ));
            }
            if !(0.0..=self.duration).contains(&event.time) {
                return Err(Error::validation(
                    "deficiency_time_s",
                    "must lie within [0, duration_s]",
                ));
            }
        } else if self.kind == ScenarioKind::Deficiency {
            return Err(Error::validation(
                "deficiency_sensor",
                "required for a deficiency scenario",
            ));
        }
        if let Some(w) = &self.probe_wrench {
            if w.len() != self.model.n_t() {
                return Err(Error::validation(
                    "probe_wrench",
                    format!("expected {} entries", self.model.n_t()),
                ));
            }
        }
        Ok(())
    }

    fn task_path(&self) -> Box<dyn TaskPath> {
        match self.path {
            PathSpec::Hold => Box::new(HoldPath {
                position: chain_poses(&self.model, &self.initial_q).ee_position(),
            }),
            PathSpec::Sinusoid {
                start,
                length,
                amplitude,
            } => Box::new(SinusoidPath {
                start,
                length,
                amplitude,
                period: self.duration,
            }),
        }
    }
}

/// Force reconstruction at one instant of a deficiency run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WrenchCheck {
    pub t: f64,
    pub q: Vec<f64>,
    pub o_sum: f64,
    pub estimate: Vec<f64>,
    pub residual: f64,
    /// `|F̂_j − F_j|` per task axis.
    pub abs_error: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeficiencyReport {
    pub sensor: String,
    /// 0-based joint whose torque reading is lost.
    pub joint: usize,
    pub time: f64,
    pub applied_wrench: Vec<f64>,
    pub pre_fault_o_sum: f64,
    pub at_fault: WrenchCheck,
    pub at_end: WrenchCheck,
}

impl DeficiencyReport {
    /// Error on one axis relative to the applied value on that axis.
    pub fn relative_error(check: &WrenchCheck, applied: &[f64], axis: usize) -> f64 {
        check.abs_error[axis] / applied[axis].abs()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario: String,
    pub kind: ScenarioKind,
    pub objective: String,
    pub k0: f64,
    pub dt: f64,
    pub duration: f64,
    pub stats: LogSummary,
    /// Log rows that sit exactly on a sweep waypoint.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub waypoint_rows: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub deficiency: Option<DeficiencyReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioOutcome {
    pub log: TrajectoryLog,
    pub summary: ScenarioSummary,
}

pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioOutcome> {
    config.validate()?;
    let (log, waypoint_rows, deficiency) = match config.kind {
        ScenarioKind::Sweep => {
            let (log, rows) = run_sweep(config)?;
            (log, rows, None)
        }
        _ => {
            let mut events = Vec::new();
            let mut controller = config.controller.clone();
            if let Some(event) = &config.deficiency {
                controller.objective = event.pre_fault_objective;
                events.push(ScheduledEvent {
                    time: event.time,
                    action: EventAction::DeactivateSensor(event.sensor.clone()),
                });
                events.push(ScheduledEvent {
                    time: event.time,
                    action: EventAction::SetObjective(config.controller.objective),
                });
            }
            let path = config.task_path();
            let log = integrate_with_events(
                &config.model,
                &config.sensors,
                &controller,
                path.as_ref(),
                &config.initial_q,
                config.dt,
                config.duration,
                &events,
            )?;
            let report = match &config.deficiency {
                Some(event) => deficiency_report(config, event, &log)?,
                None => None,
            };
            (log, Vec::new(), report)
        }
    };
    let stats = log.summary().ok_or_else(|| Error::invalid("run produced no samples"))?;
    Ok(ScenarioOutcome {
        summary: ScenarioSummary {
            scenario: config.name.clone(),
            kind: config.kind,
            objective: config.controller.objective.label(),
            k0: config.controller.k0,
            dt: config.dt,
            duration: config.duration,
            stats,
            waypoint_rows,
            deficiency,
        },
        log,
    })
}

fn run_sweep(config: &ScenarioConfig) -> Result<(TrajectoryLog, Vec<usize>)> {
    let model = &config.model;
    let segments = config.waypoints.len() - 1;
    let steps = (config.duration / config.dt).round() as usize;
    let segment_time = config.duration / segments as f64;
    let options = SensingOptions {
        abs: Default::default(),
        thresholds: config.controller.thresholds.clone(),
    };
    let mut log = TrajectoryLog::new(model.n_q(), model.task_axes.clone());
    let mut rows = Vec::new();
    for i in 0..=steps {
        // integer arithmetic so waypoint samples land exactly on the waypoints
        let u = i * segments;
        let seg = (u / steps).min(segments - 1);
        let rem = u - seg * steps;
        if rem == 0 || rem == steps {
            rows.push(i);
        }
        let (a, b) = (&config.waypoints[seg], &config.waypoints[seg + 1]);
        let q: Vec<f64> = if rem == steps {
            b.clone()
        } else {
            let frac = rem as f64 / steps as f64;
            a.iter().zip(b).map(|(x, y)| x + (y - x) * frac).collect()
        };
        let qd: Vec<f64> = a.iter().zip(b).map(|(x, y)| (y - x) / segment_time).collect();
        let poses = chain_poses(model, &q);
        let s = sensor_matrix(model, &config.sensors, &poses, &options)?.matrix;
        let s_sum = gamma_sum(&s);
        let s_max = gamma_max(&s);
        let jac = select_rows(&full_jacobian(model, &poses), &model.task_axes);
        let pe = poses.ee_position();
        log.records.push(LogRecord {
            t: i as f64 * config.dt,
            q,
            qd,
            ee: [pe.x, pe.y, pe.z],
            w_k: crate::kinematics::manipulability_index(&jac),
            o_sum: observability_index(&s_sum),
            o_max: observability_index(&s_max),
            s_sum: s_sum.iter().copied().collect(),
            s_max: s_max.iter().copied().collect(),
            track_err: 0.0,
        });
    }
    Ok((log, rows))
}

/// Draws a probe force with components of magnitude in `[1, 5]` and random
/// sign; torque rows are zero.
pub fn probe_wrench(model: &RobotModel, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model
        .task_axes
        .iter()
        .map(|a| {
            if a.is_translational() {
                let magnitude = rng.random_range(1.0..=5.0);
                if rng.random_bool(0.5) {
                    magnitude
                } else {
                    -magnitude
                }
            } else {
                0.0
            }
        })
        .collect()
}

fn deficiency_report(
    config: &ScenarioConfig,
    event: &DeficiencyEvent,
    log: &TrajectoryLog,
) -> Result<Option<DeficiencyReport>> {
    let model = &config.model;
    // Reconstruction needs one torque reading per joint, in joint order.
    if config.sensors.len() != model.n_q() {
        return Ok(None);
    }
    let joint = config
        .sensors
        .iter()
        .position(|s| s.id == event.sensor)
        .expect("validated sensor id");
    let applied = config
        .probe_wrench
        .clone()
        .unwrap_or_else(|| probe_wrench(model, config.seed));
    let force = DVector::from_column_slice(&applied);
    let fault_row = log
        .records
        .iter()
        .position(|r| r.t >= event.time - 0.5 * config.dt)
        .ok_or_else(|| Error::invalid("fault time after the last sample"))?;
    let check = |record: &LogRecord| -> Result<WrenchCheck> {
        let jac = crate::kinematics::geometric_jacobian(model, &record.q)?;
        let tau = jac.transpose() * &force;
        let est = reconstruct_ee_wrench(&jac, &tau, &[joint])?;
        Ok(WrenchCheck {
            t: record.t,
            q: record.q.clone(),
            o_sum: record.o_sum,
            abs_error: est.force.iter().zip(&applied).map(|(e, f)| (e - f).abs()).collect(),
            estimate: est.force.iter().copied().collect(),
            residual: est.residual,
        })
    };
    let pre_fault_o_sum = if fault_row == 0 {
        let mut healthy = config.sensors.clone();
        healthy.iter_mut().for_each(|s| s.active = true);
        let s = sensor_matrix(
            model,
            &healthy,
            &chain_poses(model, &log.records[0].q),
            &SensingOptions::default(),
        )?;
        observability_index(&gamma_sum(&s.matrix))
    } else {
        log.records[fault_row - 1].o_sum
    };
    Ok(Some(DeficiencyReport {
        sensor: event.sensor.clone(),
        joint,
        time: event.time,
        pre_fault_o_sum,
        at_fault: check(&log.records[fault_row])?,
        at_end: check(log.records.last().expect("non-empty log"))?,
        applied_wrench: applied,
    }))
}

/// Integrates the minimum-norm flow `q̇ = J†·v(t)` backwards from `(t_from, q)`
/// to `t = 0` with classical RK4, yielding the start pose of a path that
/// passes through `q` at `t_from`.
pub fn rewind_along_path(
    model: &RobotModel,
    q: &[f64],
    path: &dyn TaskPath,
    t_from: f64,
    step: f64,
) -> Result<Vec<f64>> {
    model.check_state(q)?;
    let axes = model.task_axes.clone();
    let flow = |q: &DVector<f64>, t: f64| -> DVector<f64> {
        let jac = select_rows(&full_jacobian(model, &chain_poses(model, q.as_slice())), &axes);
        let twist = path.twist(t);
        let v = DVector::from_iterator(axes.len(), axes.iter().map(|a| twist[a.index()]));
        pseudoinverse(&jac) * v
    };
    let steps = (t_from / step).round() as usize;
    let h = t_from / steps as f64;
    let mut q = DVector::from_column_slice(q);
    for i in 0..steps {
        let t = t_from - i as f64 * h;
        let k1 = flow(&q, t);
        let k2 = flow(&(&q - &k1 * (h / 2.0)), t - h / 2.0);
        let k3 = flow(&(&q - &k2 * (h / 2.0)), t - h / 2.0);
        let k4 = flow(&(&q - &k3 * h), t - h);
        q -= (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    Ok(q.iter().copied().collect())
}

/// Solves for the free joints of `q` so that the origins of `frames` and the
/// end effector share the height of frame `reference`. `free` lists joint
/// indices, one per target; the remaining joints keep their given values.
pub fn solve_level_pose(
    model: &RobotModel,
    q: &[f64],
    free: &[usize],
    frames: &[usize],
    reference: usize,
) -> Result<Vec<f64>> {
    model.check_state(q)?;
    if free.len() != frames.len() + 1 {
        return Err(Error::invalid(
            "one free joint per levelled frame plus one for the end effector",
        ));
    }
    let residual = |q: &[f64]| -> DVector<f64> {
        let poses = chain_poses(model, q);
        let h = poses.frames[reference].translation.z;
        DVector::from_iterator(
            free.len(),
            frames
                .iter()
                .map(|&f| poses.frames[f].translation.z - h)
                .chain(std::iter::once(poses.ee_position().z - h)),
        )
    };
    let mut q = q.to_vec();
    for _ in 0..100 {
        let r = residual(&q);
        if r.amax() < 1e-14 {
            break;
        }
        let h = 1e-7;
        let mut jac = DMatrix::zeros(free.len(), free.len());
        for (c, &k) in free.iter().enumerate() {
            let mut plus = q.clone();
            let mut minus = q.clone();
            plus[k] += h;
            minus[k] -= h;
            jac.set_column(c, &((residual(&plus) - residual(&minus)) / (2.0 * h)));
        }
        let delta = pseudoinverse(&jac) * r;
        for (c, &k) in free.iter().enumerate() {
            q[k] -= delta[c];
        }
    }
    if residual(&q).amax() > 1e-10 {
        return Err(Error::invalid("levelled pose did not converge"));
    }
    Ok(q)
}

/// Pose of the 7-DOF arm where every joint axis lies in one horizontal plane
/// with the end effector: the only joints that see `f_x` lose it.
pub fn jts_singular_pose(model: &RobotModel) -> Result<Vec<f64>> {
    solve_level_pose(model, &[0.0; 7], &[1, 3, 5], &[3, 5], 1)
}

/// A pose where joint 4 alone observes `f_x`: joint 4 is bent by `q4` while
/// joints 2 and 6 level frame 5 and the end effector with frame 1.
pub fn jts_deficiency_pose(model: &RobotModel, q4: f64) -> Result<Vec<f64>> {
    let mut q = vec![0.0; 7];
    q[3] = q4;
    solve_level_pose(model, &q, &[1, 5], &[5], 1)
}

/// Objective implied by a scenario kind.
pub fn trial_objective(kind: ScenarioKind, gamma: Gamma) -> Objective {
    match kind {
        ScenarioKind::TrialMinMotion | ScenarioKind::Sweep => Objective::None,
        ScenarioKind::TrialMaxWk => Objective::Manipulability,
        ScenarioKind::TrialMaxO | ScenarioKind::Deficiency => Objective::Index(gamma),
        ScenarioKind::TrialMaxAxis(axis) => Objective::Axis { axis, gamma },
    }
}
