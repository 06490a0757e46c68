use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_memheat"))
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str], cfg: &Path, out: &Path) -> Output {
    bin()
        .args(args)
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

const SMALL: &str = r#"
[grid]
horizon = 0.05
dt = 0.001
n_modes = 4

[coefficients]
builtin = "gaussian-only"
"#;

#[test]
fn simulate_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = run(&["simulate", "--eps", "0.01", "--seed", "5"], &cfg, d);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ta = std::fs::read(a.join("trajectory.bin")).unwrap();
    assert_eq!(ta, std::fs::read(b.join("trajectory.bin")).unwrap());
    let (mut ma, mut mb) = (manifest(&a), manifest(&b));
    ma.as_object_mut().unwrap().remove("timings");
    mb.as_object_mut().unwrap().remove("timings");
    assert_eq!(ma, mb);
    let listed = &ma["outputs"][0];
    assert_eq!(listed["path"], "trajectory.bin");
    assert_eq!(listed["bytes"].as_u64().unwrap(), ta.len() as u64);

    let c = tmp.path().join("c");
    assert!(run(&["simulate", "--eps", "0.01", "--seed", "6"], &cfg, &c).status.success());
    assert_ne!(ta, std::fs::read(c.join("trajectory.bin")).unwrap());
}

#[test]
fn dt_not_dividing_horizon_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let o = run(&["simulate", "--set", "grid.dt=0.003"], &cfg, &tmp.path().join("o"));
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("`dt`"), "{err}");
}

#[test]
fn negative_cubic_coefficient_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[coefficients]\nbuiltin = \"cubic\"\n");
    let o = run(&["simulate", "--set", "coefficients.a=-1"], &cfg, &tmp.path().join("o"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("coercivity"));
}

#[test]
fn blow_up_exits_three_with_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "[grid]\nhorizon = 0.1\ndt = 0.01\nn_modes = 2\n[initial]\nu0 = [1000.0]\n[memory]\nkind = \"zero\"\n",
    );
    let out = tmp.path().join("o");
    let o = run(&["simulate", "--set", "coefficients.a=50.0"], &cfg, &out);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(manifest(&out)["exit_code"], 3);
}

#[test]
fn rate_non_convergence_keeps_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &format!(
            "{SMALL}\n[target]\nkind = \"half-space\"\nnormal = [1.0]\nlevel = 50.0\n[rate]\nn_blocks = 2\nmax_iter = 1\nouter_loops = 1\nn_starts = 1\n"
        ),
    );
    let out = tmp.path().join("o");
    let o = run(&["rate"], &cfg, &out);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("rate.txt")).unwrap();
    assert!(text.contains("converged=false"));
    assert!(out.join("controls_f.csv").is_file());
    assert!(out.join("controls_g.csv").is_file());
}

#[test]
fn report_recomputes_c2_slope() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &format!("{SMALL}\n[controls]\nf = 0.5\n[experiment]\neps_schedule = [0.1, 0.01, 0.001]\n"),
    );
    let runs = tmp.path().join("runs");
    let out = runs.join("c2");
    let o = run(&["c2check", "--ensemble", "20"], &cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let slope = manifest(&out)["summary"]["slope"].as_f64().unwrap();

    let r = bin().arg("report").arg(&runs).output().unwrap();
    assert!(r.status.success());
    let text = String::from_utf8_lossy(&r.stdout);
    assert!(text.contains(&format!("log-log slope {slope:.4}")), "{text}");
    assert!(String::from_utf8_lossy(&r.stderr).is_empty());
}

#[test]
fn report_on_rare_event_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &format!("{SMALL}\n[target]\nkind = \"half-space\"\nnormal = [1.0]\nlevel = 0.6\n[experiment]\neps_schedule = [1.0, 0.5]\n"),
    );
    let out = tmp.path().join("rare");
    let o = run(&["rareevent", "--ensemble", "200"], &cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = bin().arg("report").arg(&out).output().unwrap();
    let text = String::from_utf8_lossy(&r.stdout);
    assert!(text.contains("-eps log p"), "{text}");
    assert!(text.contains("/200"), "{text}");
}

#[test]
fn report_on_empty_directory_warns() {
    let tmp = tempfile::tempdir().unwrap();
    let r = bin().arg("report").arg(tmp.path()).output().unwrap();
    assert!(r.status.success());
    assert!(r.stdout.is_empty());
    assert!(String::from_utf8_lossy(&r.stderr).contains("warning"));
}

#[test]
fn report_flags_tampered_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("p");
    assert!(run(&["picard"], &cfg, &out).status.success());
    std::fs::write(out.join("picard.csv"), "window,start,end,iteration,distance\n0,0,1,1,1.0\n").unwrap();
    let r = bin().arg("report").arg(&out).output().unwrap();
    assert!(String::from_utf8_lossy(&r.stderr).contains("hash differs"));
}

#[test]
fn probe_and_skeleton_succeed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{SMALL}\n[experiment]\nprobe_samples = 100\nprobe_radii = [1.0]\n"));
    let p = tmp.path().join("probe");
    assert!(run(&["probe"], &cfg, &p).status.success());
    assert_eq!(manifest(&p)["assertions"][0]["passed"], true);
    let s = tmp.path().join("skel");
    let o = run(&["skeleton", "--set", "controls.f=1.0"], &cfg, &s);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let f = std::fs::read_to_string(s.join("controls_f.csv")).unwrap();
    assert!(f.starts_with("t,f1,"));
    // the written controls load back as CSV controls
    let s2 = tmp.path().join("skel2");
    let f_arg = format!("controls.f_csv=\"{}\"", s.join("controls_f.csv").display());
    let g_arg = format!("controls.g_csv=\"{}\"", s.join("controls_g.csv").display());
    assert!(run(&["skeleton", "--set", &f_arg, "--set", &g_arg], &cfg, &s2).status.success());
    assert_eq!(
        std::fs::read(s.join("trajectory.bin")).unwrap(),
        std::fs::read(s2.join("trajectory.bin")).unwrap()
    );
}

#[test]
fn output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let root = tmp.path().join("root");
    let o = bin()
        .env("MEMHEAT_OUTPUT_ROOT", &root)
        .args(["decompose", "--eps", "0.01", "--set", "controls.f=0.5"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dirs: Vec<_> = std::fs::read_dir(&root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1);
    assert!(dirs[0].file_name().unwrap().to_string_lossy().starts_with("decompose-"));
    assert!(dirs[0].join("decompose.csv").is_file());
}
