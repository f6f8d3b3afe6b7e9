//! Time-stamped simulation logs and their CSV / JSON forms.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::TaskAxis;
use crate::observability::ObservabilitySnapshot;

/// One integration step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub t: f64,
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub ee: [f64; 3],
    pub w_k: f64,
    pub o_sum: f64,
    pub o_max: f64,
    pub s_sum: Vec<f64>,
    pub s_max: Vec<f64>,
    pub track_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub n_q: usize,
    pub task_axes: Vec<TaskAxis>,
    pub records: Vec<LogRecord>,
}

/// A run that stopped on a non-finite state.
#[derive(Clone, Debug, PartialEq)]
pub struct AbortedRun {
    pub time: f64,
    pub message: String,
    pub partial: TrajectoryLog,
}

/// Floats are written with 17 significant digits so a log re-parses to the
/// same bits.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl Stats {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Stats> {
        let mut n = 0usize;
        let (mut min, mut max, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for v in values {
            n += 1;
            min = min.min(v);
            max = max.max(v);
            sum += v;
        }
        (n > 0).then(|| Stats {
            min,
            max,
            mean: sum / n as f64,
        })
    }
}

/// Min / mean / max of every logged index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogSummary {
    pub steps: usize,
    pub w_k: Stats,
    pub o_sum: Stats,
    pub o_max: Stats,
    /// Keyed by task-axis label.
    pub s_sum: Vec<(String, Stats)>,
    pub s_max: Vec<(String, Stats)>,
    pub track_err: Stats,
}

impl TrajectoryLog {
    pub fn new(n_q: usize, task_axes: Vec<TaskAxis>) -> Self {
        Self {
            n_q,
            task_axes,
            records: Vec::new(),
        }
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        h.extend((1..=self.n_q).map(|k| format!("q{k}")));
        h.extend((1..=self.n_q).map(|k| format!("qd{k}")));
        h.extend(["ee_x", "ee_y", "ee_z", "w_k", "o_sum", "o_max"].map(String::from));
        h.extend(self.task_axes.iter().map(|a| format!("s_sum_{}", a.label())));
        h.extend(self.task_axes.iter().map(|a| format!("s_max_{}", a.label())));
        h.push("track_err".into());
        h
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        csv.write_record(self.header()).map_err(csv_err)?;
        for r in &self.records {
            let row = std::iter::once(r.t)
                .chain(r.q.iter().copied())
                .chain(r.qd.iter().copied())
                .chain(r.ee)
                .chain([r.w_k, r.o_sum, r.o_max])
                .chain(r.s_sum.iter().copied())
                .chain(r.s_max.iter().copied())
                .chain(std::iter::once(r.track_err))
                .map(format_float);
            csv.write_record(row).map_err(csv_err)?;
        }
        csv.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    /// Column by header name, e.g. `"o_sum"` or `"s_sum_fx"`.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let axis_pos = |prefix: &str| {
            name.strip_prefix(prefix)
                .and_then(TaskAxis::from_label)
                .and_then(|a| self.task_axes.iter().position(|&b| b == a))
        };
        let pick: Box<dyn Fn(&LogRecord) -> f64> = match name {
            "t" => Box::new(|r| r.t),
            "w_k" => Box::new(|r| r.w_k),
            "o_sum" => Box::new(|r| r.o_sum),
            "o_max" => Box::new(|r| r.o_max),
            "track_err" => Box::new(|r| r.track_err),
            "ee_x" => Box::new(|r| r.ee[0]),
            "ee_y" => Box::new(|r| r.ee[1]),
            "ee_z" => Box::new(|r| r.ee[2]),
            _ => {
                if let Some(j) = axis_pos("s_sum_") {
                    Box::new(move |r| r.s_sum[j])
                } else if let Some(j) = axis_pos("s_max_") {
                    Box::new(move |r| r.s_max[j])
                } else if let Some(k) = name.strip_prefix("qd").and_then(|k| k.parse::<usize>().ok()) {
                    if k == 0 || k > self.n_q {
                        return None;
                    }
                    Box::new(move |r| r.qd[k - 1])
                } else {
                    let k = name.strip_prefix('q').and_then(|k| k.parse::<usize>().ok())?;
                    if k == 0 || k > self.n_q {
                        return None;
                    }
                    Box::new(move |r| r.q[k - 1])
                }
            }
        };
        Some(self.records.iter().map(pick).collect())
    }

    pub fn summary(&self) -> Option<LogSummary> {
        let axis_stats = |sum: bool| -> Option<Vec<(String, Stats)>> {
            self.task_axes
                .iter()
                .enumerate()
                .map(|(j, a)| {
                    let stats = Stats::of(self.records.iter().map(|r| if sum { r.s_sum[j] } else { r.s_max[j] }))?;
                    Some((a.label().to_string(), stats))
                })
                .collect()
        };
        Some(LogSummary {
            steps: self.records.len(),
            w_k: Stats::of(self.records.iter().map(|r| r.w_k))?,
            o_sum: Stats::of(self.records.iter().map(|r| r.o_sum))?,
            o_max: Stats::of(self.records.iter().map(|r| r.o_max))?,
            s_sum: axis_stats(true)?,
            s_max: axis_stats(false)?,
            track_err: Stats::of(self.records.iter().map(|r| r.track_err))?,
        })
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("csv: {other:?}")),
    }
}

/// Header of a single-configuration snapshot row.
pub fn snapshot_csv_header(s: &ObservabilitySnapshot) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((1..=s.q.len()).map(|k| format!("q{k}")));
    h.extend(["w_k", "o_sum", "o_max"].map(String::from));
    h.extend(s.task_axes.iter().map(|a| format!("s_sum_{}", a.label())));
    h.extend(s.task_axes.iter().map(|a| format!("s_max_{}", a.label())));
    h.extend(
        s.force_ellipsoid
            .axes
            .iter()
            .map(|a| format!("ellipsoid_{}", a.label())),
    );
    h.extend(
        s.torque_ellipsoid
            .axes
            .iter()
            .map(|a| format!("ellipsoid_{}", a.label())),
    );
    h
}

pub fn snapshot_csv_row(t: f64, s: &ObservabilitySnapshot) -> Vec<String> {
    std::iter::once(t)
        .chain(s.q.iter().copied())
        .chain([s.w_k, s.o_sum, s.o_max])
        .chain(s.s_sum.iter().copied())
        .chain(s.s_max.iter().copied())
        .chain(s.force_ellipsoid.semi_axes.iter().copied())
        .chain(s.torque_ellipsoid.semi_axes.iter().copied())
        .map(format_float)
        .collect()
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`,
/// so readers never see a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("`{}` is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = std::fs::write(&tmp, bytes).and_then(|_| std::fs::rename(&tmp, path));
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}
