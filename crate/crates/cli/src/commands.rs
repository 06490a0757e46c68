//! Subcommand bodies. Each writes its artifacts through the run writer and returns the
//! error that decides the exit status, after the artifacts are on disk.

use memheat::coefficients::{probe_all, ProbeOptions};
use memheat::ldp::{
    c1_continuity_check, c2_convergence_experiment, q1, q2, rare_event_mc, rate_function,
    skeleton_solve, ControlPair, RateEstimate,
};
use memheat::solver::io::{write_diagnostics_csv, write_trajectory};
use memheat::solver::{MomentSummary, Solver, Trajectory};
use memheat::noise::MarkGrid;
use serde_json::json;

use crate::config::Config;
use crate::csvio::{num, render};
use crate::error::CliError;
use crate::manifest::{json_num, RunWriter};

pub const TRAJECTORY_FILE: &str = "trajectory.bin";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const MOMENTS_FILE: &str = "moments.csv";
pub const PICARD_FILE: &str = "picard.csv";
pub const DECOMPOSE_FILE: &str = "decompose.csv";
pub const CONTROLS_F_FILE: &str = "controls_f.csv";
pub const CONTROLS_G_FILE: &str = "controls_g.csv";
pub const RATE_FILE: &str = "rate.txt";
pub const C1_FILE: &str = "c1.csv";
pub const C2_SAMPLES_FILE: &str = "c2_samples.csv";
pub const C2_FILE: &str = "c2.csv";
pub const RARE_FILE: &str = "rareevent.csv";
pub const PROBE_FILE: &str = "probe.csv";

fn write_traj(w: &mut RunWriter, traj: &Trajectory) -> Result<(), CliError> {
    let mut bin = Vec::new();
    write_trajectory(traj, &mut bin)?;
    w.output(TRAJECTORY_FILE, &bin)?;
    let mut csv = Vec::new();
    write_diagnostics_csv(&traj.diagnostics, &mut csv)?;
    w.output(DIAGNOSTICS_FILE, &csv)
}

fn moments_json(m: &MomentSummary) -> serde_json::Value {
    json!({
        "sup_l2_sq": json_num(m.sup_l2_sq),
        "int_h1_sq": json_num(m.int_h1_sq),
        "int_lq_q": json_num(m.int_lq_q),
    })
}

pub fn simulate(cfg: &Config, solver: &Solver, w: &mut RunWriter) -> Result<(), CliError> {
    let eps = cfg.run.eps;
    let first = solver.solve(eps, 0, None)?;
    write_traj(w, &first)?;
    w.summary("moments_sample0", moments_json(&first.moments()));
    w.summary("terminal_l2", json_num(first.terminal().l2_norm()));
    let n = cfg.run.ensemble;
    if n > 1 {
        let m = solver.ensemble(eps, n, None, |t| t.moments())?;
        let rows = m.iter().enumerate().map(|(i, x)| {
            vec![i.to_string(), num(x.sup_l2_sq), num(x.int_h1_sq), num(x.int_lq_q)]
        });
        let header = ["sample", "sup_l2_sq", "int_h1_sq", "int_lq_q"].map(String::from);
        w.output(MOMENTS_FILE, render(&header, rows).as_bytes())?;
        let nf = n as f64;
        let mean = MomentSummary {
            sup_l2_sq: m.iter().map(|x| x.sup_l2_sq).sum::<f64>() / nf,
            int_h1_sq: m.iter().map(|x| x.int_h1_sq).sum::<f64>() / nf,
            int_lq_q: m.iter().map(|x| x.int_lq_q).sum::<f64>() / nf,
        };
        w.summary("moments_mean", moments_json(&mean));
    }
    Ok(())
}

pub fn picard(cfg: &Config, solver: &Solver, w: &mut RunWriter) -> Result<(), CliError> {
    let (traj, report) = solver.solve_picard(cfg.run.eps, 0, None)?;
    write_traj(w, &traj)?;
    let mut rows = Vec::new();
    for (i, win) in report.windows.iter().enumerate() {
        for (k, d) in win.distances.iter().enumerate() {
            rows.push(vec![i.to_string(), num(win.start), num(win.end), (k + 1).to_string(), num(*d)]);
        }
    }
    let header = ["window", "start", "end", "iteration", "distance"].map(String::from);
    w.output(PICARD_FILE, render(&header, rows).as_bytes())?;
    let worst = report
        .windows
        .iter()
        .flat_map(|win| win.ratios())
        .fold(0.0, f64::max);
    w.summary("window_steps", report.window_steps);
    w.summary("windows", report.windows.len());
    w.summary("max_ratio", json_num(worst));
    w.assertion("contraction", worst < 1.0, format!("largest successive-distance ratio {worst:.4}"));
    Ok(())
}

pub fn decompose(cfg: &Config, solver: &Solver, w: &mut RunWriter) -> Result<(), CliError> {
    let controls = cfg.controls(solver)?;
    let noise = solver.sample_noise(cfg.run.eps, 0, Some(&controls))?;
    let d = solver.decompose_yzj(&noise, &controls, cfg.experiment.j_tolerance)?;
    let dt = cfg.grid.dt;
    let rows = (0..d.y.len()).map(|n| {
        vec![
            n.to_string(),
            num(n as f64 * dt),
            num(d.v.states[n].l2_norm()),
            num(d.y[n].l2_norm()),
            num(d.z[n].l2_norm()),
            num(d.j_subtractive[n].l2_norm()),
            num(d.j_resolved[n].l2_norm()),
        ]
    });
    let header = ["step", "t", "v", "y", "z", "j_subtractive", "j_resolved"].map(String::from);
    w.output(DECOMPOSE_FILE, render(&header, rows).as_bytes())?;
    let sup_y_sq = d.y.iter().map(|y| y.l2_norm_sq()).fold(0.0, f64::max);
    w.summary("sup_y_sq", json_num(sup_y_sq));
    w.summary("j_distance", json_num(d.j_distance));
    w.assertion(
        "j_agreement",
        d.j_distance <= cfg.experiment.j_tolerance,
        format!("sup distance {:.3e} (tolerance {:.1e})", d.j_distance, cfg.experiment.j_tolerance),
    );
    Ok(())
}

fn write_controls(w: &mut RunWriter, c: &ControlPair, marks: &MarkGrid) -> Result<(), CliError> {
    let dt = c.dt();
    let mut fh = vec!["t".to_string()];
    fh.extend((1..=c.k_noise()).map(|k| format!("f{k}")));
    let f_rows = (0..c.n_steps()).map(|n| {
        let mut r = vec![num(n as f64 * dt)];
        r.extend(c.f_at(n).iter().map(|v| num(*v)));
        r
    });
    w.output(CONTROLS_F_FILE, render(&fh, f_rows).as_bytes())?;
    let e = marks.edges();
    let mut gh = vec!["t".to_string()];
    for r in 0..e.len().saturating_sub(1) {
        gh.push(format!("neg[{}:{}]", e[r], e[r + 1]));
        gh.push(format!("pos[{}:{}]", e[r], e[r + 1]));
    }
    let g_rows = (0..c.n_steps()).map(|n| {
        let mut r = vec![num(n as f64 * dt)];
        r.extend((0..c.n_bins()).map(|b| num(c.g_at(n, b))));
        r
    });
    w.output(CONTROLS_G_FILE, render(&gh, g_rows).as_bytes())
}

pub fn skeleton(cfg: &Config, solver: &Solver, w: &mut RunWriter) -> Result<(), CliError> {
    let controls = cfg.controls(solver)?;
    let traj = skeleton_solve(solver, &controls)?;
    write_traj(w, &traj)?;
    write_controls(w, &controls, solver.marks())?;
    let cost2 = q2(&controls, solver.marks())?;
    w.summary("q1", json_num(q1(&controls)));
    w.summary("q2", json_num(cost2));
    w.summary("terminal_l2", json_num(traj.terminal().l2_norm()));
    Ok(())
}

fn rate_text(est: &RateEstimate) -> String {
    let pairs: [(&str, String); 10] = [
        ("target", est.target.clone()),
        ("value", num(est.value)),
        ("q1", num(est.q1)),
        ("q2", num(est.q2)),
        ("residual", num(est.residual)),
        ("iterations", est.iterations.to_string()),
        ("grad_norm", num(est.grad_norm)),
        ("penalty", num(est.penalty)),
        ("converged", est.converged.to_string()),
        ("bound", "upper".into()),
    ];
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn rate(cfg: &Config, solver: &Solver, w: &mut RunWriter) -> Result<(), CliError> {
    let target = cfg.target()?;
    let opts = cfg.rate.clone();
    let est = rate_function(solver, &target, &opts, &[])?;
    w.output(RATE_FILE, rate_text(&est).as_bytes())?;
    write_controls(w, &est.controls, solver.marks())?;
    let traj = skeleton_solve(solver, &est.controls)?;
    write_traj(w, &traj)?;
    w.summary("rate", json_num(est.value));
    w.summary("residual", json_num(est.residual));
    w.summary("converged", est.converged);
    if !est.converged {
        return Err(CliError::NonConvergence(format!(
            "target residual {:.3e} above {:.1e} after {} iterations",
            est.residual, opts.residual_tol, est.iterations
        )));
    }
    Ok(())
}

pub fn c1check(cfg: &Config, solver: &Solver, w: &mut RunWriter) -> Result<(), CliError> {
    let controls = cfg.controls(solver)?;
    let e = &cfg.experiment;
    let rep = c1_continuity_check(solver, &controls, e.c1_mode, &e.c1_ns, e.c1_dictionary, e.tolerance)?;
    let rows = rep
        .rows
        .iter()
        .map(|r| vec![r.n.to_string(), num(r.control_distance), num(r.output_distance)]);
    let header = ["n", "control_distance", "output_distance"].map(String::from);
    w.output(C1_FILE, render(&header, rows).as_bytes())?;
    w.summary("mode", serde_json::to_value(rep.mode).expect("mode serializes"));
    w.assertion("monotone", rep.monotone, "output distance non-increasing in n");
    w.assertion(
        "below_tolerance",
        rep.below_tolerance,
        format!("last output distance below {:.1e}", e.tolerance),
    );
    Ok(())
}

pub fn c2check(cfg: &Config, solver: &Solver, w: &mut RunWriter) -> Result<(), CliError> {
    let controls = cfg.controls(solver)?;
    let schedule = cfg.eps_schedule()?;
    let tol = cfg.experiment.tolerance;
    let rep = c2_convergence_experiment(solver, &controls, &schedule, cfg.run.ensemble, tol)?;
    let mut rows = Vec::new();
    for r in &rep.rows {
        for (i, (s, f)) in r.sup_sq.iter().zip(&r.full).enumerate() {
            rows.push(vec![num(r.eps), i.to_string(), num(*s), num(*f)]);
        }
    }
    let header = ["eps", "sample", "sup_sq", "full"].map(String::from);
    w.output(C2_SAMPLES_FILE, render(&header, rows).as_bytes())?;
    let table = rep
        .rows
        .iter()
        .map(|r| vec![num(r.eps), num(r.median_sup_sq), num(r.median_full)]);
    let header = ["eps", "median_sup_sq", "median_full"].map(String::from);
    w.output(C2_FILE, render(&header, table).as_bytes())?;
    w.summary("slope", json_num(rep.slope));
    w.assertion("monotone", rep.monotone, "median sup distance decreasing along the schedule");
    w.assertion(
        "below_tolerance",
        rep.below_tolerance,
        format!("final median below {tol:.1e}"),
    );
    Ok(())
}

pub fn rareevent(cfg: &Config, solver: &Solver, w: &mut RunWriter) -> Result<(), CliError> {
    let target = cfg.target()?;
    let schedule = cfg.eps_schedule()?;
    let rep = rare_event_mc(solver, &target, &schedule, cfg.run.ensemble)?;
    let rows = rep.rows.iter().map(|r| {
        vec![
            num(r.eps),
            r.n_samples.to_string(),
            r.hits.to_string(),
            num(r.p_hat),
            num(r.rate_mc),
            num(r.rate_lo),
            num(r.rate_hi),
        ]
    });
    let header = ["eps", "n_samples", "hits", "p_hat", "rate_mc", "rate_lo", "rate_hi"].map(String::from);
    w.output(RARE_FILE, render(&header, rows).as_bytes())?;
    w.assertion("monotone", rep.monotone, "-eps log p non-increasing as eps decreases");
    if cfg.experiment.estimate_rate {
        let est = rate_function(solver, &target, &cfg.rate, &[])?;
        w.output(RATE_FILE, rate_text(&est).as_bytes())?;
        w.summary("rate", json_num(est.value));
        w.summary("converged", est.converged);
        if !est.converged {
            return Err(CliError::NonConvergence(format!(
                "rate estimate residual {:.3e}",
                est.residual
            )));
        }
    }
    Ok(())
}

pub fn probe(cfg: &Config, w: &mut RunWriter) -> Result<(), CliError> {
    let set = cfg.coefficient_set()?;
    let e = &cfg.experiment;
    let opts = ProbeOptions {
        n_modes: cfg.grid.n_modes,
        horizon: cfg.grid.horizon,
        seed: cfg.run.seed,
        ..ProbeOptions::default()
    };
    let mut rows = Vec::new();
    let mut all = true;
    for &radius in &e.probe_radii {
        let reps = probe_all(&set, e.probe_samples, radius, &opts)
            .map_err(|err| CliError::Validation(err.to_string()))?;
        for r in reps {
            all &= r.passed;
            rows.push(vec![
                r.hypothesis.to_string(),
                r.clause.to_string(),
                num(radius),
                r.n_samples.to_string(),
                num(r.worst_ratio),
                r.passed.to_string(),
            ]);
        }
    }
    let header = ["hypothesis", "clause", "radius", "samples", "worst_ratio", "passed"].map(String::from);
    w.output(PROBE_FILE, render(&header, rows).as_bytes())?;
    w.assertion("all_clauses", all, "every declared inequality held on all samples");
    if !all {
        return Err(CliError::Validation(format!(
            "coefficient set `{}` violates a declared hypothesis",
            cfg.coefficients.builtin
        )));
    }
    Ok(())
}
