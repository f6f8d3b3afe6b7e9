//! Sensor observability matrix, Γ functions, index and ellipsoids.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{
    chain_poses, full_jacobian, manipulability_index, select_rows, ChainPoses, JointKind, RobotModel, TaskAxis,
};
use crate::sensing::{rotate_sensor_axis, sensor_column, SensingOptions, SensorAxis, SensorSpec, TransformedAxis};

/// Default exponent of the p-norm Γ function.
pub const DEFAULT_P: f64 = 2.0;

/// Values at or below this count as a singularity in reports.
pub const SINGULARITY_EPS: f64 = 1e-9;

/// `n_t × n_s` matrix of transformed sensor axes, one column per sensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservabilityMatrix {
    pub matrix: DMatrix<f64>,
    pub sensor_ids: Vec<String>,
}

pub fn observability_matrix(axes: &[TransformedAxis]) -> Result<ObservabilityMatrix> {
    let first = axes.first().ok_or_else(|| Error::invalid("no sensors"))?;
    let n_t = first.s_tilde.len();
    if let Some(bad) = axes.iter().find(|a| a.s_tilde.len() != n_t) {
        return Err(Error::invalid(format!(
            "sensor `{}` has {} task rows, expected {n_t}",
            bad.sensor_id,
            bad.s_tilde.len()
        )));
    }
    let columns: Vec<_> = axes.iter().map(|a| a.s_tilde.clone()).collect();
    Ok(ObservabilityMatrix {
        matrix: DMatrix::from_columns(&columns),
        sensor_ids: axes.iter().map(|a| a.sensor_id.clone()).collect(),
    })
}

/// How the columns of S are synthesised into the system vector s.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "gamma", rename_all = "lowercase")]
pub enum Gamma {
    Sum,
    PNorm { p: f64 },
    Max,
}

impl Gamma {
    pub fn apply(self, s: &DMatrix<f64>) -> DVector<f64> {
        match self {
            Gamma::Sum => gamma_sum(s),
            Gamma::PNorm { p } => gamma_pnorm(s, p),
            Gamma::Max => gamma_max(s),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Gamma::Sum => "sum",
            Gamma::PNorm { .. } => "pnorm",
            Gamma::Max => "max",
        }
    }

    /// System vector plus its partials, given partials of S.
    pub(crate) fn apply_with_partials(
        self,
        s: &DMatrix<f64>,
        partials: &[DMatrix<f64>],
    ) -> (DVector<f64>, Vec<DVector<f64>>) {
        let value = self.apply(s);
        let d = match self {
            Gamma::Sum => partials.iter().map(gamma_sum).collect(),
            Gamma::PNorm { p } => {
                // ds_j = s_j^(1-p) Σ_i S_ji^(p-1) dS_ji
                let weights = DMatrix::from_fn(s.nrows(), s.ncols(), |j, i| {
                    if value[j] > 0.0 && s[(j, i)] > 0.0 {
                        (s[(j, i)] / value[j]).powf(p - 1.0)
                    } else {
                        0.0
                    }
                });
                partials
                    .iter()
                    .map(|ds| gamma_sum(&weights.component_mul(ds)))
                    .collect()
            }
            Gamma::Max => {
                // subgradient through the first maximiser of each row
                let arg: Vec<usize> = s.row_iter().map(|row| row.transpose().argmax().0).collect();
                partials
                    .iter()
                    .map(|ds| DVector::from_iterator(s.nrows(), arg.iter().enumerate().map(|(j, &i)| ds[(j, i)])))
                    .collect()
            }
        };
        (value, d)
    }
}

pub fn gamma_sum(s: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(s.nrows(), s.row_iter().map(|r| r.sum()))
}

pub fn gamma_pnorm(s: &DMatrix<f64>, p: f64) -> DVector<f64> {
    DVector::from_iterator(
        s.nrows(),
        s.row_iter()
            .map(|r| r.iter().map(|v| v.abs().powf(p)).sum::<f64>().powf(1.0 / p)),
    )
}

pub fn gamma_max(s: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(s.nrows(), s.row_iter().map(|r| r.iter().copied().fold(0.0, f64::max)))
}

/// `o = Π s_j`.
pub fn observability_index(s: &DVector<f64>) -> f64 {
    s.iter().product()
}

pub(crate) fn index_partials(s: &DVector<f64>, ds: &[DVector<f64>]) -> Vec<f64> {
    ds.iter()
        .map(|d| {
            (0..s.len())
                .map(|j| d[j] * (0..s.len()).filter(|&l| l != j).map(|l| s[l]).product::<f64>())
                .sum()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Translational,
    Rotational,
}

/// Axis-aligned observability ellipsoid: one semi-axis per task axis in the block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservabilityEllipsoid {
    pub axes: Vec<TaskAxis>,
    pub semi_axes: Vec<f64>,
}

impl ObservabilityEllipsoid {
    pub fn is_flat(&self) -> bool {
        self.semi_axes.iter().any(|&a| a <= SINGULARITY_EPS)
    }

    pub fn is_sphere(&self) -> bool {
        self.semi_axes.windows(2).all(|w| w[0] == w[1])
    }
}

/// The semi-axes are the entries of `s` themselves, aligned with the task axes.
pub fn observability_ellipsoid(s: &DVector<f64>, task_axes: &[TaskAxis], block: Block) -> ObservabilityEllipsoid {
    let (axes, semi_axes) = task_axes
        .iter()
        .zip(s.iter())
        .filter(|(a, _)| a.is_translational() == (block == Block::Translational))
        .map(|(&a, &v)| (a, v))
        .unzip();
    ObservabilityEllipsoid { axes, semi_axes }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisOptions {
    pub sensing: SensingOptions,
    pub p: f64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            sensing: SensingOptions::default(),
            p: DEFAULT_P,
        }
    }
}

/// Everything the analysis produces at one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservabilitySnapshot {
    pub q: Vec<f64>,
    pub task_axes: Vec<TaskAxis>,
    pub sensor_ids: Vec<String>,
    /// Row-major `n_t × n_s`.
    pub matrix: Vec<Vec<f64>>,
    pub s_sum: Vec<f64>,
    pub s_max: Vec<f64>,
    pub p: f64,
    pub s_pnorm: Vec<f64>,
    pub o_sum: f64,
    pub o_max: f64,
    pub o_pnorm: f64,
    pub w_k: f64,
    pub force_ellipsoid: ObservabilityEllipsoid,
    pub torque_ellipsoid: ObservabilityEllipsoid,
    pub flags: Vec<String>,
}

pub const FLAG_OBSERVABILITY_SINGULARITY: &str = "SENSOR OBSERVABILITY SINGULARITY";
pub const FLAG_KINEMATIC_SINGULARITY: &str = "KINEMATIC SINGULARITY";

pub fn snapshot(
    model: &RobotModel,
    sensors: &[SensorSpec],
    q: &[f64],
    options: &AnalysisOptions,
) -> Result<ObservabilitySnapshot> {
    model.check_state(q)?;
    let poses = chain_poses(model, q);
    let s = sensor_matrix(model, sensors, &poses, &options.sensing)?;
    let jac = select_rows(&full_jacobian(model, &poses), &model.task_axes);
    Ok(snapshot_from_parts(model, q, &s, manipulability_index(&jac), options.p))
}

pub(crate) fn snapshot_from_parts(
    model: &RobotModel,
    q: &[f64],
    s: &ObservabilityMatrix,
    w_k: f64,
    p: f64,
) -> ObservabilitySnapshot {
    let s_sum = gamma_sum(&s.matrix);
    let s_max = gamma_max(&s.matrix);
    let s_pnorm = gamma_pnorm(&s.matrix, p);
    let o_sum = observability_index(&s_sum);
    let o_max = observability_index(&s_max);
    let mut flags = Vec::new();
    if o_sum <= SINGULARITY_EPS {
        flags.push(FLAG_OBSERVABILITY_SINGULARITY.to_string());
    }
    if w_k <= SINGULARITY_EPS {
        flags.push(FLAG_KINEMATIC_SINGULARITY.to_string());
    }
    ObservabilitySnapshot {
        q: q.to_vec(),
        task_axes: model.task_axes.clone(),
        sensor_ids: s.sensor_ids.clone(),
        matrix: s.matrix.row_iter().map(|r| r.iter().copied().collect()).collect(),
        force_ellipsoid: observability_ellipsoid(&s_sum, &model.task_axes, Block::Translational),
        torque_ellipsoid: observability_ellipsoid(&s_sum, &model.task_axes, Block::Rotational),
        s_sum: s_sum.iter().copied().collect(),
        s_max: s_max.iter().copied().collect(),
        p,
        o_pnorm: observability_index(&s_pnorm),
        s_pnorm: s_pnorm.iter().copied().collect(),
        o_sum,
        o_max,
        w_k,
        flags,
    }
}

/// Builds S for the given poses.
pub fn sensor_matrix(
    model: &RobotModel,
    sensors: &[SensorSpec],
    poses: &ChainPoses,
    options: &SensingOptions,
) -> Result<ObservabilityMatrix> {
    let axes = crate::sensing::transformed_axes(model, sensors, poses, options)?;
    observability_matrix(&axes)
}

/// S restricted to the task rows together with `∂S/∂q_k` for every joint.
pub(crate) fn sensor_matrix_with_partials(
    model: &RobotModel,
    sensors: &[SensorSpec],
    poses: &ChainPoses,
    options: &SensingOptions,
) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
    if sensors.is_empty() {
        return Err(Error::invalid("no sensors"));
    }
    let rows = model.task_rows();
    let n_t = rows.len();
    let mut s = DMatrix::zeros(n_t, sensors.len());
    let mut ds = vec![DMatrix::zeros(n_t, sensors.len()); model.n_q()];
    for (i, sensor) in sensors.iter().enumerate() {
        let jet = sensor_column(model, sensor, poses, options, true)?;
        for (j, &row) in rows.iter().enumerate() {
            s[(j, i)] = jet.value[row];
            for (dk, partial) in ds.iter_mut().zip(&jet.partials) {
                dk[(j, i)] = partial[row];
            }
        }
    }
    Ok((s, ds))
}

/// Result of comparing S against the absolute, column-normalised Jacobian.
#[derive(Clone, Debug, PartialEq)]
pub struct SpecialCaseReport {
    pub s: DMatrix<f64>,
    pub jacobian: DMatrix<f64>,
    /// `|ẑ_k × r_k| / ‖ẑ_k × r_k‖` over `|ẑ_k|`, restricted to the task rows.
    pub normalized_jacobian: DMatrix<f64>,
    pub max_discrepancy: f64,
}

/// Element-wise absolute Jacobian with each column's translational block
/// normalised to unit length.
pub fn abs_normalized_jacobian(full: &DMatrix<f64>, axes: &[TaskAxis]) -> DMatrix<f64> {
    let mut out = full.abs();
    for mut col in out.column_iter_mut() {
        let norm = col.rows(0, 3).norm();
        if norm > crate::sensing::COLLINEAR_EPS {
            col.rows_mut(0, 3).unscale_mut(norm);
        } else {
            col.rows_mut(0, 3).fill(0.0);
        }
    }
    select_rows(&out, axes)
}

/// Checks that S equals the abs/column-normalised geometric Jacobian for a
/// chain whose sensors are joint-collinear torque sensors, in joint order.
pub fn jacobian_special_case_check(model: &RobotModel, sensors: &[SensorSpec], q: &[f64]) -> Result<SpecialCaseReport> {
    model.check_state(q)?;
    if sensors.len() != model.n_q() {
        return Err(Error::NotApplicable(format!(
            "{} sensors for {} joints; one torque sensor per joint is required",
            sensors.len(),
            model.n_q()
        )));
    }
    let poses = chain_poses(model, q);
    for (k, sensor) in sensors.iter().enumerate() {
        if model.rows[k].kind != JointKind::Revolute {
            return Err(Error::NotApplicable(format!("joint {} is not revolute", k + 1)));
        }
        if !sensor.active || !matches!(sensor.axis, SensorAxis::Torque(_)) {
            return Err(Error::NotApplicable(format!(
                "sensor `{}` is not an active torque axis",
                sensor.id
            )));
        }
        let rotated = rotate_sensor_axis(sensor, &poses)?;
        let (z, origin) = poses.joint_axis(k);
        if rotated.theta.cross(&z).norm() > 1e-9 || (rotated.position - origin).norm() > 1e-9 {
            return Err(Error::NotApplicable(format!(
                "sensor `{}` is not collinear with joint {}",
                sensor.id,
                k + 1
            )));
        }
    }
    let s = sensor_matrix(model, sensors, &poses, &SensingOptions::default())?.matrix;
    let full = full_jacobian(model, &poses);
    let normalized = abs_normalized_jacobian(&full, &model.task_axes);
    let max_discrepancy = (&s - &normalized).amax();
    Ok(SpecialCaseReport {
        s,
        jacobian: select_rows(&full, &model.task_axes),
        normalized_jacobian: normalized,
        max_discrepancy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{DhRow, FramePose};
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector, Vector3};
    use std::f64::consts::FRAC_PI_2;

    fn planar_3r() -> (RobotModel, Vec<SensorSpec>) {
        let model = RobotModel::new(
            vec![DhRow::revolute(1.0, 0.0, 0.0, 0.0); 3],
            vec![TaskAxis::Fx, TaskAxis::Fy],
        )
        .unwrap();
        let mid = FramePose::from_translation(Vector3::new(-0.5, 0.0, 0.0));
        let sensors = vec![
            SensorSpec::linear("s1", 1, mid, Vector3::y()),
            SensorSpec::linear("s2", 2, mid, Vector3::x()),
            SensorSpec::linear("s3", 3, mid, Vector3::y()),
        ];
        (model, sensors)
    }

    fn zero_pose_matrix() -> DMatrix<f64> {
        dmatrix![0.0, 1.0, 0.0; 1.0, 0.0, 1.0]
    }

    #[test]
    fn planar_matrices_at_reference_poses() {
        let (model, sensors) = planar_3r();
        let s = sensor_matrix(
            &model,
            &sensors,
            &chain_poses(&model, &[0.0; 3]),
            &SensingOptions::default(),
        )
        .unwrap();
        assert_relative_eq!(s.matrix, zero_pose_matrix(), epsilon = 1e-15);
        assert_eq!(s.sensor_ids, ["s1", "s2", "s3"]);
        let poses = chain_poses(&model, &[0.0, FRAC_PI_2, -FRAC_PI_2]);
        let s = sensor_matrix(&model, &sensors, &poses, &SensingOptions::default()).unwrap();
        assert_relative_eq!(s.matrix, dmatrix![0.0, 0.0, 0.0; 1.0, 1.0, 1.0], epsilon = 1e-15);
    }

    #[test]
    fn gamma_examples() {
        let s = zero_pose_matrix();
        assert_eq!(gamma_sum(&s), dvector![1.0, 2.0]);
        assert_eq!(gamma_max(&s), dvector![1.0, 1.0]);
        assert_relative_eq!(gamma_pnorm(&s, 2.0), dvector![1.0, 2f64.sqrt()]);
        assert_eq!(gamma_pnorm(&s, 1.0), gamma_sum(&s));
        assert_eq!(gamma_max(&dmatrix![0.0, 0.0, 0.0; 1.0, 1.0, 1.0]), dvector![0.0, 1.0]);
        assert_eq!(gamma_max(&dmatrix![0.3]), dvector![0.3]);
        assert_eq!(gamma_sum(&DMatrix::identity(3, 3)), dvector![1.0, 1.0, 1.0]);
        assert_eq!(gamma_sum(&DMatrix::zeros(2, 2)), dvector![0.0, 0.0]);
    }

    #[test]
    fn index_examples() {
        assert_eq!(observability_index(&dvector![1.0, 2.0]), 2.0);
        assert_eq!(observability_index(&dvector![0.0, 3.0]), 0.0);
        assert_eq!(observability_index(&dvector![1.0, 1.0, 1.0]), 1.0);
    }

    #[test]
    fn ellipsoid_shapes() {
        let axes = [TaskAxis::Fx, TaskAxis::Fy, TaskAxis::Tz];
        let e = observability_ellipsoid(&dvector![1.0, 2.0, 0.5], &axes, Block::Translational);
        assert_eq!(e.axes, [TaskAxis::Fx, TaskAxis::Fy]);
        assert_eq!(e.semi_axes, [1.0, 2.0]);
        assert!(!e.is_flat() && !e.is_sphere());
        let r = observability_ellipsoid(&dvector![1.0, 2.0, 0.5], &axes, Block::Rotational);
        assert_eq!(r.semi_axes, [0.5]);
        assert!(observability_ellipsoid(&dvector![0.0, 2.0], &axes[..2], Block::Translational).is_flat());
        assert!(observability_ellipsoid(&dvector![0.7, 0.7], &axes[..2], Block::Translational).is_sphere());
    }

    #[test]
    fn empty_or_ragged_input_is_rejected() {
        assert!(observability_matrix(&[]).is_err());
        let axes = [
            TransformedAxis {
                sensor_id: "a".into(),
                s_tilde: dvector![1.0, 0.0],
            },
            TransformedAxis {
                sensor_id: "b".into(),
                s_tilde: dvector![1.0],
            },
        ];
        assert!(observability_matrix(&axes).is_err());
    }

    #[test]
    fn force_torque_sensor_observes_everything() {
        let model = RobotModel::new(vec![DhRow::revolute(1.0, 0.0, 0.0, 0.0)], TaskAxis::ALL.to_vec()).unwrap();
        let mut sensors = Vec::new();
        for (i, axis) in [Vector3::x(), Vector3::y(), Vector3::z()].into_iter().enumerate() {
            sensors.push(SensorSpec::linear(format!("f{i}"), 1, FramePose::identity(), axis));
            sensors.push(SensorSpec::torque(format!("t{i}"), 1, FramePose::identity(), axis));
        }
        let snap = snapshot(&model, &sensors, &[0.0], &AnalysisOptions::default()).unwrap();
        assert_eq!(snap.o_max, 1.0);
        assert!(snap.flags.is_empty() || snap.flags == [FLAG_KINEMATIC_SINGULARITY]);
    }

    #[test]
    fn singularities_are_dissociated() {
        let (model, sensors) = planar_3r();
        let stretched = snapshot(&model, &sensors, &[0.0; 3], &AnalysisOptions::default()).unwrap();
        assert!(stretched.w_k < 1e-12);
        assert_relative_eq!(stretched.o_sum, 2.0, epsilon = 1e-12);
        assert_eq!(stretched.flags, [FLAG_KINEMATIC_SINGULARITY]);

        let folded = snapshot(
            &model,
            &sensors,
            &[0.0, FRAC_PI_2, -FRAC_PI_2],
            &AnalysisOptions::default(),
        )
        .unwrap();
        assert!(folded.o_sum < 1e-12);
        assert_relative_eq!(folded.w_k, 3f64.sqrt(), epsilon = 1e-12);
        assert_eq!(folded.flags, [FLAG_OBSERVABILITY_SINGULARITY]);
        assert!(folded.force_ellipsoid.is_flat());
    }

    #[test]
    fn snapshot_json_round_trips_bit_exact() {
        let (model, sensors) = planar_3r();
        let snap = snapshot(&model, &sensors, &[0.1, 0.7, -1.9], &AnalysisOptions::default()).unwrap();
        let text = serde_json::to_string(&snap).unwrap();
        let back: ObservabilitySnapshot = serde_json::from_str(&text).unwrap();
        assert_eq!(back, snap);
    }

    #[test]
    fn gamma_partials_match_differences() {
        let (model, sensors) = planar_3r();
        let options = SensingOptions {
            abs: crate::sensing::AbsMode::smooth(),
            thresholds: None,
        };
        let q = [0.3, 1.1, -0.6];
        let poses = chain_poses(&model, &q);
        let (s, ds) = sensor_matrix_with_partials(&model, &sensors, &poses, &options).unwrap();
        let h = 1e-6;
        for gamma in [Gamma::Sum, Gamma::PNorm { p: 2.0 }, Gamma::PNorm { p: 3.5 }] {
            let (value, dvalue) = gamma.apply_with_partials(&s, &ds);
            let dindex = index_partials(&value, &dvalue);
            for k in 0..3 {
                let eval = |delta: f64| {
                    let mut qq = q;
                    qq[k] += delta;
                    let m = sensor_matrix(&model, &sensors, &chain_poses(&model, &qq), &options).unwrap();
                    observability_index(&gamma.apply(&m.matrix))
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!((dindex[k] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "{gamma:?} joint {k}");
            }
        }
    }

    #[test]
    fn special_case_preconditions() {
        let (model, sensors) = planar_3r();
        assert!(matches!(
            jacobian_special_case_check(&model, &sensors, &[0.0; 3]),
            Err(Error::NotApplicable(_))
        ));
        let one = RobotModel::new(vec![DhRow::revolute(1.0, 0.0, 0.0, 0.0)], TaskAxis::ALL.to_vec()).unwrap();
        let report = jacobian_special_case_check(&one, &[SensorSpec::joint_torque("t", 0)], &[0.0]).unwrap();
        assert_eq!(report.s.column(0).as_slice(), &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(report.max_discrepancy < 1e-15);
        let offset = SensorSpec::torque("t", 0, FramePose::from_translation(Vector3::x()), Vector3::z());
        assert!(jacobian_special_case_check(&one, &[offset], &[0.0]).is_err());
    }
}
