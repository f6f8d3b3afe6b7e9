//! End-to-end acceptance checks. Run with `cargo test --test acceptance`.
//!
//! Prints one PASS/FAIL line per criterion and exits non-zero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use sensobs::config::load_config;
use sensobs::control::{
    finite_difference_gradient, nullspace_projector, objective_gradient, velocity_step, ControllerSpec, Objective,
};
use sensobs::kinematics::{geometric_jacobian, manipulability_index, DhRow, FramePose, RobotModel, TaskAxis};
use sensobs::observability::{jacobian_special_case_check, snapshot, AnalysisOptions, Gamma};
use sensobs::scenarios::{build_7dof_jts, build_planar_3r, run_scenario, DeficiencyReport, ScenarioOutcome};
use sensobs::sensing::{apply_noise_threshold, compute_threshold, SensingOptions, SensorSpec, ThresholdSpec};

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn config_path(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn random_q(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn min(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Every shipped scenario, run twice so determinism can be checked.
struct Runs {
    first: BTreeMap<String, ScenarioOutcome>,
    second: BTreeMap<String, ScenarioOutcome>,
}

fn run_all() -> Result<Runs, String> {
    let mut jobs = Vec::new();
    for file in ["planar_3r.toml", "baxter_jts.toml"] {
        let loaded = load_config(&config_path(file), &[]).map_err(|e| e.to_string())?;
        jobs.extend(loaded.scenarios.into_values());
    }
    let doubled: Vec<_> = jobs.iter().chain(jobs.iter()).collect();
    let outcomes: Vec<_> = doubled
        .par_iter()
        .map(|cfg| run_scenario(cfg).map(|o| (cfg.name.clone(), o)))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let (first, second) = outcomes.split_at(jobs.len());
    Ok(Runs {
        first: first.iter().cloned().collect(),
        second: second.iter().cloned().collect(),
    })
}

fn column(runs: &Runs, scenario: &str, name: &str) -> Vec<f64> {
    runs.first[scenario].log.column(name).unwrap()
}

fn threshold_examples() -> Check {
    let s_star = compute_threshold(0.5, 10.0).map_err(|e| e.to_string())?;
    let values = [
        apply_noise_threshold(0.05, 0.05),
        apply_noise_threshold(1.0, 0.05),
        apply_noise_threshold(0.525, 0.05),
    ];
    ensure(
        s_star == 0.05 && values == [0.0, 1.0, 0.5],
        format!("s* = {s_star}, mapped = {values:?}"),
    )
}

fn special_case() -> Check {
    let (model, sensors) = build_7dof_jts().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let q = random_q(&mut rng, 7);
        let report = jacobian_special_case_check(&model, &sensors, &q).map_err(|e| e.to_string())?;
        worst = worst.max(report.max_discrepancy);
    }
    ensure(
        worst < 1e-10,
        format!("max discrepancy {worst:.3e} over 100 configurations"),
    )
}

fn dissociation() -> Check {
    let (model, sensors) = build_planar_3r();
    let opts = AnalysisOptions::default();
    let straight = snapshot(&model, &sensors, &[0.0, 0.0, 0.0], &opts).map_err(|e| e.to_string())?;
    let folded = snapshot(&model, &sensors, &[0.0, 90f64.to_radians(), -90f64.to_radians()], &opts)
        .map_err(|e| e.to_string())?;
    ensure(
        straight.w_k < 1e-12
            && (straight.o_sum - 2.0).abs() < 1e-9
            && folded.o_sum < 1e-12
            && (folded.w_k - 3f64.sqrt()).abs() < 1e-9,
        format!(
            "q=0: w_k {:.1e}, o_sum {}; q=(0,90,-90): o_sum {:.1e}, w_k {:.12}",
            straight.w_k, straight.o_sum, folded.o_sum, folded.w_k
        ),
    )
}

fn trials(runs: &Runs) -> Check {
    let names = [
        "trial1_min_motion",
        "trial2_max_wk",
        "trial3_max_o",
        "trial4_max_sx",
        "trial4_max_sy",
    ];
    let sx_min = min(&column(runs, names[0], "s_sum_fx"));
    let o_mean: Vec<f64> = names.iter().map(|n| mean(&column(runs, n, "o_sum"))).collect();
    let o3_min = min(&column(runs, names[2], "o_sum"));
    let sx_mean: Vec<f64> = names.iter().map(|n| mean(&column(runs, n, "s_sum_fx"))).collect();

    let a = sx_min < 0.02;
    let b = o_mean[2] >= 1.05 * o_mean[0] && o_mean[2] >= 1.05 * o_mean[1] && o3_min >= 0.1;
    let c = (0..names.len())
        .filter(|&i| i != 3)
        .all(|i| sx_mean[3] >= 1.05 * sx_mean[i]);
    ensure(
        a && b && c,
        format!(
            "(a) min s_x {sx_min:.2e}; (b) mean o_sum {:.3} vs {:.3}/{:.3}, min {o3_min:.3}; (c) mean s_x {:.3} vs max other {:.3}",
            o_mean[2],
            o_mean[0],
            o_mean[1],
            sx_mean[3],
            sx_mean.iter().enumerate().filter(|&(i, _)| i != 3).map(|(_, v)| *v).fold(0.0, f64::max)
        ),
    )
}

fn gradients() -> Check {
    let planar = build_planar_3r();
    let jts = build_7dof_jts().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    for (model, sensors) in [&planar, &jts] {
        let mut objectives = vec![Objective::Manipulability, Objective::Index(Gamma::Sum)];
        objectives.extend(model.task_axes.iter().map(|&axis| Objective::Axis {
            axis,
            gamma: Gamma::Sum,
        }));
        let mut accepted = 0;
        while accepted < 100 {
            let q = random_q(&mut rng, model.n_q());
            let jac = geometric_jacobian(model, &q).map_err(|e| e.to_string())?;
            let snap = snapshot(model, sensors, &q, &AnalysisOptions::default()).map_err(|e| e.to_string())?;
            if manipulability_index(&jac) < 1e-2 || snap.o_sum < 1e-2 {
                continue;
            }
            accepted += 1;
            for objective in &objectives {
                let spec = ControllerSpec::new(*objective, 1.0);
                let analytic = objective_gradient(model, sensors, &q, &spec)
                    .map_err(|e| e.to_string())?
                    .gradient;
                let fd = finite_difference_gradient(model, sensors, &q, &spec).map_err(|e| e.to_string())?;
                let rel = (&analytic - &fd).norm() / fd.norm().max(1e-8);
                let entry = worst.entry(objective.label()).or_insert(0.0);
                *entry = entry.max(rel);
            }
        }
    }
    let overall = worst.values().copied().fold(0.0, f64::max);
    let detail = worst
        .iter()
        .map(|(k, v)| format!("{k} {v:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(overall < 1e-4, format!("worst relative error per objective: {detail}"))
}

fn nullspace_contract() -> Check {
    let planar = build_planar_3r();
    let jts = build_7dof_jts().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut jn, mut idem, mut track) = (0.0f64, 0.0f64, 0.0f64);
    for (model, sensors) in [&planar, &jts] {
        let mut objectives = vec![
            Objective::None,
            Objective::Manipulability,
            Objective::Index(Gamma::Sum),
            Objective::Index(Gamma::Max),
            Objective::Index(Gamma::PNorm { p: 4.0 }),
        ];
        objectives.extend(model.task_axes.iter().map(|&axis| Objective::Axis {
            axis,
            gamma: Gamma::Sum,
        }));
        for _ in 0..1000 {
            let q = random_q(&mut rng, model.n_q());
            let jac = geometric_jacobian(model, &q).map_err(|e| e.to_string())?;
            let n = nullspace_projector(&jac);
            jn = jn.max((&jac * &n).amax());
            idem = idem.max((&n * &n - &n).amax());
            let xdot = DVector::from_fn(model.n_t(), |_, _| rng.random_range(-1.0..1.0));
            for objective in &objectives {
                let spec = ControllerSpec::new(*objective, 1.0);
                let qd = velocity_step(model, sensors, &q, &xdot, &spec).map_err(|e| e.to_string())?;
                track = track.max((&jac * qd - &xdot).amax());
            }
        }
    }
    ensure(
        jn < 1e-9 && idem < 1e-8 && track < 1e-9,
        format!("|JN| {jn:.1e}, |N^2-N| {idem:.1e}, |J qd - xd| {track:.1e}"),
    )
}

fn sweep(runs: &Runs) -> Check {
    let outcome = &runs.first["sweep"];
    let rows = &outcome.summary.waypoint_rows;
    if rows.len() < 3 {
        return Err(format!("expected at least three waypoints, got {rows:?}"));
    }
    let (start, singular, end) = (rows[0], rows[1], rows[rows.len() - 1]);
    let mut parts = Vec::new();
    let mut ok = true;
    for name in ["o_sum", "o_max", "w_k"] {
        let values = column(runs, "sweep", name);
        let peak = max(&values);
        let (lo, a, b) = (values[singular] / peak, values[start] / peak, values[end] / peak);
        ok &= lo < 0.01 && a > 0.2 && b > 0.2;
        parts.push(format!("{name} {a:.2}/{lo:.1e}/{b:.2}"));
    }
    ensure(
        ok,
        format!("start/singular/end relative to run maximum: {}", parts.join(", ")),
    )
}

fn deficiency(runs: &Runs) -> Check {
    let report = runs.first["deficiency"]
        .summary
        .deficiency
        .as_ref()
        .ok_or("deficiency report missing")?;
    let applied = &report.applied_wrench;
    let err = |check, axis| DeficiencyReport::relative_error(check, applied, axis);
    let before = [
        err(&report.at_fault, 0),
        report.at_fault.abs_error[1],
        report.at_fault.abs_error[2],
    ];
    let after = err(&report.at_end, 0);
    let ratio = report.at_end.o_sum / report.pre_fault_o_sum;
    ensure(
        before[0] > 0.5 && before[1] < 1e-6 && before[2] < 1e-6 && after < 0.05 && ratio > 0.5,
        format!(
            "at fault: F_x rel err {:.3}, F_y/F_z abs err {:.1e}/{:.1e}; after: F_x rel err {after:.1e}, o_sum {:.1}% of pre-fault",
            before[0],
            before[1],
            before[2],
            100.0 * ratio
        ),
    )
}

fn determinism(runs: &Runs) -> Check {
    let mut differing = Vec::new();
    for (name, outcome) in &runs.first {
        let a = outcome.log.to_csv_string().map_err(|e| e.to_string())?;
        let b = runs.second[name].log.to_csv_string().map_err(|e| e.to_string())?;
        if a != b {
            differing.push(name.clone());
        }
    }
    ensure(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} scenarios, identical logs", runs.first.len())
        } else {
            format!("logs differ for {}", differing.join(", "))
        },
    )
}

fn one_dof_threshold() -> Check {
    let (sigma, phi) = (0.3, 1.0);
    let model = RobotModel::new(
        vec![DhRow::revolute(1.0, 0.0, 0.0, 0.0)],
        vec![TaskAxis::Fx, TaskAxis::Fy],
    )
    .map_err(|e| e.to_string())?;
    let cell = SensorSpec::linear(
        "cell",
        1,
        FramePose::from_translation(Vector3::new(-0.5, 0.0, 0.0)),
        Vector3::x(),
    )
    .with_sigma(sigma);
    let opts = AnalysisOptions {
        sensing: SensingOptions {
            thresholds: Some(ThresholdSpec { phi: vec![phi, phi] }),
            ..Default::default()
        },
        ..Default::default()
    };
    let s_star = compute_threshold(sigma, phi).map_err(|e| e.to_string())?;
    let mut mismatches = 0;
    let mut points = 0;
    let mut theta = -std::f64::consts::PI;
    while theta <= std::f64::consts::PI {
        let snap = snapshot(&model, std::slice::from_ref(&cell), &[theta], &opts).map_err(|e| e.to_string())?;
        let x_lost = snap.matrix[0][0] == 0.0;
        let y_lost = snap.matrix[1][0] == 0.0;
        if x_lost != (theta.cos().abs() < s_star) || y_lost != (theta.sin().abs() < s_star) {
            mismatches += 1;
        }
        points += 1;
        theta += 1e-3;
    }
    ensure(
        s_star == sigma / phi && mismatches == 0,
        format!("s* = {s_star}, {mismatches} mismatches over {points} angles"),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let runs = run_all();
    let with_runs = |f: fn(&Runs) -> Check| -> Check {
        runs.as_ref()
            .map_err(|e| format!("scenario run failed: {e}"))
            .and_then(f)
    };

    let results: Vec<(&str, Check)> = vec![
        ("noise threshold examples", threshold_examples()),
        ("joint-torque special case", special_case()),
        ("dissociated singularities", dissociation()),
        ("trial comparison", with_runs(trials)),
        ("gradient correctness", gradients()),
        ("null-space contract", nullspace_contract()),
        ("sweep through singularity", with_runs(sweep)),
        ("sensor deficiency and reconstruction", with_runs(deficiency)),
        ("determinism", with_runs(determinism)),
        ("one-joint threshold grid", one_dof_threshold()),
    ];

    let mut failed = 0;
    for (i, (name, result)) in results.iter().enumerate() {
        match result {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed in {:.1} s",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
