//! TOML configuration files: one robot, its sensors, optional noise
//! thresholds and any number of named scenarios.
//!
//! Angles are written in degrees and converted to radians on load. Unknown
//! keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use serde::Deserialize;

use crate::control::{ControllerSpec, GradientMethod, Objective, DEFAULT_DT};
use crate::error::{Error, Result};
use crate::kinematics::{DhRow, FramePose, JointKind, RobotModel, TaskAxis};
use crate::observability::{AnalysisOptions, Gamma, DEFAULT_P};
use crate::scenarios::{trial_objective, DeficiencyEvent, PathSpec, ScenarioConfig, ScenarioKind};
use crate::sensing::{SensingOptions, SensorSpec, ThresholdSpec};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileDoc {
    robot: RobotDoc,
    #[serde(default)]
    sensors: Vec<SensorDoc>,
    thresholds: Option<ThresholdDoc>,
    analysis: Option<AnalysisDoc>,
    scenario_defaults: Option<ScenarioDoc>,
    #[serde(default)]
    scenarios: BTreeMap<String, ScenarioDoc>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RobotDoc {
    name: String,
    task_axes: Vec<String>,
    joints: Vec<JointDoc>,
    #[serde(default)]
    base_translation: [f64; 3],
    /// Roll, pitch, yaw in degrees.
    #[serde(default)]
    base_rotation: [f64; 3],
    #[serde(default)]
    ee_offset: [f64; 3],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointDoc {
    a: f64,
    alpha: f64,
    d: f64,
    #[serde(default)]
    theta_offset: f64,
    #[serde(default = "revolute")]
    kind: JointKind,
}

fn revolute() -> JointKind {
    JointKind::Revolute
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "lowercase")]
enum AxisKind {
    P,
    Theta,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SensorDoc {
    id: String,
    link: usize,
    #[serde(default)]
    mount_translation: [f64; 3],
    #[serde(default)]
    mount_rotation: [f64; 3],
    axis_kind: AxisKind,
    axis: [f64; 3],
    #[serde(default)]
    sigma: f64,
    #[serde(default = "yes")]
    active: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ThresholdDoc {
    phi: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnalysisDoc {
    p: Option<f64>,
    smooth_c: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    kind: Option<String>,
    robot: Option<String>,
    duration_s: Option<f64>,
    dt_s: Option<f64>,
    k0: Option<f64>,
    objective: Option<String>,
    axis: Option<String>,
    gamma: Option<String>,
    p: Option<f64>,
    deficiency_sensor: Option<String>,
    deficiency_time_s: Option<f64>,
    pre_fault_objective: Option<String>,
    waypoints: Option<Vec<Vec<f64>>>,
    initial_q_deg: Option<Vec<f64>>,
    path_start: Option<[f64; 3]>,
    path_length_m: Option<f64>,
    path_amplitude_m: Option<f64>,
    feedback_gain: Option<f64>,
    tracked_axes: Option<Vec<String>>,
    gradient: Option<GradientMethod>,
    fd_step: Option<f64>,
    smooth_c: Option<f64>,
    probe_wrench: Option<Vec<f64>>,
}

impl ScenarioDoc {
    fn or(self, d: &ScenarioDoc) -> ScenarioDoc {
        macro_rules! merge {
            ($($f:ident),*) => {
                ScenarioDoc { $($f: self.$f.or_else(|| d.$f.clone())),* }
            };
        }
        merge!(
            kind,
            robot,
            duration_s,
            dt_s,
            k0,
            objective,
            axis,
            gamma,
            p,
            deficiency_sensor,
            deficiency_time_s,
            pre_fault_objective,
            waypoints,
            initial_q_deg,
            path_start,
            path_length_m,
            path_amplitude_m,
            feedback_gain,
            tracked_axes,
            gradient,
            fd_step,
            smooth_c,
            probe_wrench
        )
    }
}

/// A fully validated configuration file.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedConfig {
    pub name: String,
    pub model: RobotModel,
    pub sensors: Vec<SensorSpec>,
    pub analysis: AnalysisOptions,
    pub scenarios: BTreeMap<String, ScenarioConfig>,
}

impl LoadedConfig {
    pub fn scenario(&self, name: &str) -> Result<&ScenarioConfig> {
        self.scenarios.get(name).ok_or_else(|| {
            let known: Vec<_> = self.scenarios.keys().map(String::as_str).collect();
            Error::validation(
                "--scenario",
                format!("unknown scenario `{name}` (available: {})", known.join(", ")),
            )
        })
    }
}

/// `key=value` assignment applied to the parsed document before validation.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: toml::Value,
}

impl Override {
    /// Parses `key=value`. A bare key (no dots) refers to the scenario named
    /// by `scenario`.
    pub fn parse(text: &str, scenario: Option<&str>) -> Result<Override> {
        let (key, raw) = text
            .split_once('=')
            .ok_or_else(|| Error::validation("--set", format!("expected key=value, got `{text}`")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::validation("--set", "empty key"));
        }
        let mut path: Vec<String> = key.split('.').map(str::to_string).collect();
        if path.len() == 1 {
            let name = scenario.ok_or_else(|| {
                Error::validation(
                    format!("--set {key}"),
                    "a bare key needs --scenario to say which scenario it sets",
                )
            })?;
            path = vec!["scenarios".into(), name.into(), key.into()];
        }
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        Ok(Override { path, value })
    }
}

pub fn load_config(path: &Path, overrides: &[Override]) -> Result<LoadedConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    load_config_str(&text, overrides)
}

pub fn load_config_str(text: &str, overrides: &[Override]) -> Result<LoadedConfig> {
    let doc: FileDoc = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
    let doc = if overrides.is_empty() {
        doc
    } else {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let keys: Vec<String> = overrides.iter().map(|o| o.path.join(".")).collect();
        table
            .try_into()
            .map_err(|e| Error::validation(format!("--set {}", keys.join(", ")), e.message().to_string()))?
    };
    build(doc)
}

fn parse_error(text: &str, e: &toml::de::Error) -> Error {
    let line = e
        .span()
        .map(|span| text[..span.start.min(text.len())].matches('\n').count() + 1)
        .unwrap_or(0);
    Error::Parse {
        line,
        message: e.message().to_string(),
    }
}

fn apply_override(table: &mut toml::Table, o: &Override) -> Result<()> {
    let field = || format!("--set {}", o.path.join("."));
    let (last, parents) = o.path.split_last().expect("non-empty path");
    let mut current = table;
    for key in parents {
        current = match current.get_mut(key) {
            Some(toml::Value::Table(t)) => t,
            _ => {
                return Err(Error::validation(
                    field(),
                    format!("no table `{key}` in the configuration"),
                ))
            }
        };
    }
    current.insert(last.clone(), o.value.clone());
    Ok(())
}

fn deg(v: f64) -> f64 {
    v.to_radians()
}

fn axis_label(field: &str, label: &str) -> Result<TaskAxis> {
    TaskAxis::from_label(label).ok_or_else(|| {
        Error::validation(
            field,
            format!("unknown axis `{label}` (expected fx, fy, fz, tx, ty or tz)"),
        )
    })
}

fn build(doc: FileDoc) -> Result<LoadedConfig> {
    let robot = &doc.robot;
    let task_axes = robot
        .task_axes
        .iter()
        .enumerate()
        .map(|(i, l)| axis_label(&format!("robot.task_axes[{i}]"), l))
        .collect::<Result<Vec<_>>>()?;
    let rows = robot
        .joints
        .iter()
        .enumerate()
        .map(|(i, j)| {
            for (name, v) in [
                ("a", j.a),
                ("alpha", j.alpha),
                ("d", j.d),
                ("theta_offset", j.theta_offset),
            ] {
                if !v.is_finite() {
                    return Err(Error::validation(format!("robot.joints[{i}].{name}"), "must be finite"));
                }
            }
            Ok(DhRow {
                a: j.a,
                alpha: deg(j.alpha),
                d: j.d,
                theta_offset: deg(j.theta_offset),
                kind: j.kind,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let [r, p, y] = robot.base_rotation.map(deg);
    let model = RobotModel::new(rows, task_axes)
        .map_err(|e| relabel(e, "robot"))?
        .with_base(FramePose::from_rpy(Vector3::from(robot.base_translation), r, p, y))
        .with_ee_offset(Vector3::from(robot.ee_offset));
    model.validate().map_err(|e| relabel(e, "robot"))?;

    let mut sensors = Vec::with_capacity(doc.sensors.len());
    for (i, s) in doc.sensors.iter().enumerate() {
        if doc.sensors[..i].iter().any(|o| o.id == s.id) {
            return Err(Error::validation(
                format!("sensors[{i}].id"),
                format!("duplicate sensor id `{}`", s.id),
            ));
        }
        let [r, p, y] = s.mount_rotation.map(deg);
        let mount = FramePose::from_rpy(Vector3::from(s.mount_translation), r, p, y);
        let axis = Vector3::from(s.axis);
        let spec = match s.axis_kind {
            AxisKind::P => SensorSpec::linear(s.id.clone(), s.link, mount, axis),
            AxisKind::Theta => SensorSpec::torque(s.id.clone(), s.link, mount, axis),
        };
        let spec = SensorSpec {
            sigma: s.sigma,
            active: s.active,
            ..spec
        };
        spec.validate(&model)?;
        sensors.push(spec);
    }

    let thresholds = match &doc.thresholds {
        Some(t) => {
            let spec = ThresholdSpec { phi: t.phi.clone() };
            spec.validate(&model, &sensors)?;
            Some(spec)
        }
        None => None,
    };
    let p = doc.analysis.as_ref().and_then(|a| a.p).unwrap_or(DEFAULT_P);
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::validation("analysis.p", "must be at least 1"));
    }
    let smooth_c = doc.analysis.as_ref().and_then(|a| a.smooth_c);
    if let Some(c) = smooth_c {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::validation("analysis.smooth_c", "must be positive"));
        }
    }
    let analysis = AnalysisOptions {
        sensing: SensingOptions {
            abs: Default::default(),
            thresholds: thresholds.clone(),
        },
        p,
    };

    let defaults = doc.scenario_defaults.clone().unwrap_or_default();
    let mut scenarios = BTreeMap::new();
    for (name, raw) in doc.scenarios {
        let sc = raw.or(&defaults);
        let cfg = build_scenario(&name, sc, &robot.name, &model, &sensors, &thresholds, p, smooth_c)?;
        scenarios.insert(name, cfg);
    }

    Ok(LoadedConfig {
        name: robot.name.clone(),
        model,
        sensors,
        analysis,
        scenarios,
    })
}

fn relabel(e: Error, prefix: &str) -> Error {
    match e {
        Error::Validation { field, message } => Error::validation(format!("{prefix}.{field}"), message),
        other => other,
    }
}

#[allow(clippy::too_many_arguments)]
fn build_scenario(
    name: &str,
    sc: ScenarioDoc,
    robot_name: &str,
    model: &RobotModel,
    sensors: &[SensorSpec],
    thresholds: &Option<ThresholdSpec>,
    p: f64,
    smooth_c: Option<f64>,
) -> Result<ScenarioConfig> {
    let field = |key: &str| format!("scenarios.{name}.{key}");
    if let Some(r) = &sc.robot {
        if r != robot_name {
            return Err(Error::validation(
                field("robot"),
                format!("file defines robot `{robot_name}`, not `{r}`"),
            ));
        }
    }
    let p = sc.p.unwrap_or(p);
    let gamma = match sc.gamma.as_deref().unwrap_or("sum") {
        "sum" => Gamma::Sum,
        "max" => Gamma::Max,
        "pnorm" => Gamma::PNorm { p },
        other => {
            return Err(Error::validation(
                field("gamma"),
                format!("unknown gamma `{other}` (sum, pnorm or max)"),
            ))
        }
    };
    let axis = sc.axis.as_deref().map(|a| axis_label(&field("axis"), a)).transpose()?;
    let kind = match sc.kind.as_deref() {
        Some("trial_min_motion") => ScenarioKind::TrialMinMotion,
        Some("trial_max_wk") => ScenarioKind::TrialMaxWk,
        Some("trial_max_o") => ScenarioKind::TrialMaxO,
        Some("trial_max_axis") => ScenarioKind::TrialMaxAxis(
            axis.ok_or_else(|| Error::validation(field("axis"), "required for trial_max_axis"))?,
        ),
        Some("sweep") => ScenarioKind::Sweep,
        Some("deficiency") => ScenarioKind::Deficiency,
        Some(other) => {
            return Err(Error::validation(
                field("kind"),
                format!("unknown scenario kind `{other}`"),
            ))
        }
        None => return Err(Error::validation(field("kind"), "missing")),
    };
    let parse_objective = |key: &str, text: &str| -> Result<Objective> {
        match text {
            "none" => Ok(Objective::None),
            "manipulability" => Ok(Objective::Manipulability),
            "index" => Ok(Objective::Index(gamma)),
            "axis" => Ok(Objective::Axis {
                axis: axis.ok_or_else(|| Error::validation(field("axis"), "required for an axis objective"))?,
                gamma,
            }),
            other => Err(Error::validation(
                field(key),
                format!("unknown objective `{other}` (none, manipulability, index or axis)"),
            )),
        }
    };
    let implied = trial_objective(kind, gamma);
    let objective = match (kind, sc.objective.as_deref()) {
        (ScenarioKind::Deficiency, Some(text)) => parse_objective("objective", text)?,
        (_, Some(text)) => {
            let given = parse_objective("objective", text)?;
            if given != implied {
                return Err(Error::validation(
                    field("objective"),
                    format!("`{text}` contradicts scenario kind `{}`", kind.label()),
                ));
            }
            given
        }
        (_, None) => implied,
    };

    let tracked_axes = sc
        .tracked_axes
        .as_ref()
        .map(|v| {
            v.iter()
                .enumerate()
                .map(|(i, l)| axis_label(&field(&format!("tracked_axes[{i}]")), l))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    let defaults = ControllerSpec::default();
    let controller = ControllerSpec {
        objective,
        k0: sc.k0.unwrap_or(defaults.k0),
        gradient: sc.gradient.unwrap_or_default(),
        fd_step: sc.fd_step.unwrap_or(defaults.fd_step),
        smooth_c: sc.smooth_c.or(smooth_c).unwrap_or(defaults.smooth_c),
        feedback_gain: sc.feedback_gain.unwrap_or(defaults.feedback_gain),
        tracked_axes,
        thresholds: thresholds.clone(),
    };

    let duration = sc
        .duration_s
        .ok_or_else(|| Error::validation(field("duration_s"), "missing"))?;
    let path = match sc.path_start {
        Some(start) => PathSpec::Sinusoid {
            start,
            length: sc.path_length_m.unwrap_or(1.5),
            amplitude: sc.path_amplitude_m.unwrap_or(0.5),
        },
        None => PathSpec::Hold,
    };
    let deficiency = match (sc.deficiency_sensor, sc.deficiency_time_s) {
        (Some(sensor), Some(time)) => Some(DeficiencyEvent {
            sensor,
            time,
            pre_fault_objective: parse_objective(
                "pre_fault_objective",
                sc.pre_fault_objective.as_deref().unwrap_or("none"),
            )?,
        }),
        (None, None) => None,
        (Some(_), None) => return Err(Error::validation(field("deficiency_time_s"), "missing")),
        (None, Some(_)) => return Err(Error::validation(field("deficiency_sensor"), "missing")),
    };
    let config = ScenarioConfig {
        name: name.to_string(),
        kind,
        model: model.clone(),
        sensors: sensors.to_vec(),
        controller,
        duration,
        dt: sc.dt_s.unwrap_or(DEFAULT_DT),
        initial_q: sc.initial_q_deg.unwrap_or_default().into_iter().map(deg).collect(),
        path,
        waypoints: sc
            .waypoints
            .unwrap_or_default()
            .into_iter()
            .map(|w| w.into_iter().map(deg).collect())
            .collect(),
        deficiency,
        probe_wrench: sc.probe_wrench,
        seed: 0,
    };
    config.validate().map_err(|e| match e {
        Error::Validation { field: f, message } if !f.starts_with("scenarios.") && !f.starts_with("sensor") => {
            Error::validation(field(f.trim_start_matches("controller.")), message)
        }
        other => other,
    })?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[robot]
name = "arm"
task_axes = ["fx", "fy"]

[[robot.joints]]
a = 1.0
alpha = 0.0
d = 0.0

[[robot.joints]]
a = 1.0
alpha = 0.0
d = 0.0

[[sensors]]
id = "cell"
link = 1
axis_kind = "p"
axis = [0.0, 1.0, 0.0]
sigma = 0.5

[scenarios.hold]
kind = "trial_min_motion"
duration_s = 0.1
initial_q_deg = [10.0, 20.0]
"#;

    #[test]
    fn minimal_file_loads() {
        let c = load_config_str(MINIMAL, &[]).unwrap();
        assert_eq!(c.model.n_q(), 2);
        assert_eq!(c.sensors.len(), 1);
        let s = c.scenario("hold").unwrap();
        assert_eq!(s.dt, DEFAULT_DT);
        assert_eq!(s.initial_q, vec![10f64.to_radians(), 20f64.to_radians()]);
        assert!(c.scenario("missing").is_err());
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = MINIMAL.replace("sigma = 0.5", "sigma = 0.5\ncolour = \"red\"");
        match load_config_str(&text, &[]) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, text.lines().position(|l| l.starts_with("colour")).unwrap() + 1);
                assert!(message.contains("colour"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_toml_reports_line() {
        let text = MINIMAL.replace("d = 0.0\n\n[[sensors]]", "d = \n\n[[sensors]]");
        assert!(matches!(load_config_str(&text, &[]), Err(Error::Parse { line, .. }) if line > 1));
    }

    #[test]
    fn noise_above_threshold_names_the_sensor() {
        let text = format!("{MINIMAL}\n[thresholds]\nphi = [0.4, 10.0]\n");
        match load_config_str(&text, &[]) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "sensor `cell`.sigma"),
            other => panic!("{other:?}"),
        }
        let ok = format!("{MINIMAL}\n[thresholds]\nphi = [10.0, 10.0]\n");
        assert!(load_config_str(&ok, &[]).unwrap().analysis.sensing.thresholds.is_some());
    }

    #[test]
    fn validation_errors_name_fields() {
        let bad_axis = MINIMAL.replace("axis = [0.0, 1.0, 0.0]", "axis = [0.0, 2.0, 0.0]");
        assert!(
            matches!(load_config_str(&bad_axis, &[]), Err(Error::Validation { field, .. }) if field == "sensor `cell`.axis")
        );
        let bad_link = MINIMAL.replace("link = 1", "link = 3");
        assert!(
            matches!(load_config_str(&bad_link, &[]), Err(Error::Validation { field, .. }) if field == "sensor `cell`.link")
        );
        let bad_q = MINIMAL.replace("[10.0, 20.0]", "[10.0]");
        assert!(
            matches!(load_config_str(&bad_q, &[]), Err(Error::Validation { field, .. }) if field == "scenarios.hold.initial_q_deg")
        );
        let bad_k0 = MINIMAL.replace("duration_s = 0.1", "duration_s = 0.1\nk0 = -1.0");
        assert!(
            matches!(load_config_str(&bad_k0, &[]), Err(Error::Validation { field, .. }) if field == "scenarios.hold.k0")
        );
        let bad_kind = MINIMAL.replace("trial_min_motion", "dance");
        assert!(
            matches!(load_config_str(&bad_kind, &[]), Err(Error::Validation { field, .. }) if field == "scenarios.hold.kind")
        );
    }

    #[test]
    fn overrides_apply_and_reject_unknown_keys() {
        let o = Override::parse("k0=5.0", Some("hold")).unwrap();
        let c = load_config_str(MINIMAL, &[o]).unwrap();
        assert_eq!(c.scenario("hold").unwrap().controller.k0, 5.0);
        let dotted = Override::parse("scenarios.hold.dt_s = 0.01", None).unwrap();
        assert_eq!(
            load_config_str(MINIMAL, &[dotted])
                .unwrap()
                .scenario("hold")
                .unwrap()
                .dt,
            0.01
        );
        let unknown = Override::parse("speed=3", Some("hold")).unwrap();
        assert!(matches!(
            load_config_str(MINIMAL, &[unknown]),
            Err(Error::Validation { .. })
        ));
        assert!(Override::parse("k0=5.0", None).is_err());
        assert!(Override::parse("k0", Some("hold")).is_err());
    }

    #[test]
    fn defaults_are_shared_between_scenarios() {
        let text = MINIMAL.replace(
            "[scenarios.hold]\nkind = \"trial_min_motion\"\nduration_s = 0.1\ninitial_q_deg = [10.0, 20.0]",
            "[scenario_defaults]\nduration_s = 0.1\ninitial_q_deg = [10.0, 20.0]\n\n[scenarios.a]\nkind = \"trial_min_motion\"\n\n[scenarios.b]\nkind = \"trial_max_wk\"\nduration_s = 0.2",
        );
        let c = load_config_str(&text, &[]).unwrap();
        assert_eq!(c.scenario("a").unwrap().initial_q, c.scenario("b").unwrap().initial_q);
        assert_eq!(c.scenario("b").unwrap().duration, 0.2);
        assert_eq!(c.scenario("b").unwrap().controller.objective, Objective::Manipulability);
    }
}
