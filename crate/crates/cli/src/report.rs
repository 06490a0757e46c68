//! Text summaries of finished runs, recomputed from the persisted outputs.

use memheat::ldp::{clopper_pearson, loglog_slope, median, RARE_EVENT_ALPHA};
use memheat::solver::io::read_diagnostics_csv;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::commands::{
    C1_FILE, C2_SAMPLES_FILE, DIAGNOSTICS_FILE, MOMENTS_FILE, PICARD_FILE, PROBE_FILE, RARE_FILE,
    RATE_FILE,
};
use crate::csvio::{column, number, parse};
use crate::error::CliError;
use crate::manifest::{sha256_hex, RunManifest, MANIFEST_FILE};

#[derive(Debug, Default)]
pub struct Report {
    pub text: String,
    pub warnings: Vec<String>,
    /// failed assertions over all manifests
    pub failed: usize,
}

/// Manifests under `path`: the file itself, `path/manifest.json`, or one level of run directories.
fn find_manifests(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(CliError::Io(format!("{} does not exist", path.display())));
    }
    let direct = path.join(MANIFEST_FILE);
    if direct.is_file() {
        return Ok(vec![direct]);
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .map(|e| e.path().join(MANIFEST_FILE))
        .filter(|p| p.is_file())
        .collect();
    out.sort();
    Ok(out)
}

pub fn report(path: &Path) -> Result<Report, CliError> {
    let mut rep = Report::default();
    let manifests = find_manifests(path)?;
    if manifests.is_empty() {
        rep.warnings.push(format!("no manifests under {}", path.display()));
        return Ok(rep);
    }
    for m in manifests {
        match RunManifest::read(&m) {
            Ok(man) => {
                let dir = m.parent().unwrap_or(Path::new("."));
                report_one(&mut rep, dir, &man);
            }
            Err(e) => rep.warnings.push(format!("skipping {}: {e}", m.display())),
        }
    }
    Ok(rep)
}

fn load(rep: &mut Report, dir: &Path, man: &RunManifest, name: &str) -> Option<String> {
    let entry = man.outputs.iter().find(|o| o.path == name)?;
    match std::fs::read(dir.join(name)) {
        Ok(bytes) => {
            if sha256_hex(&bytes) != entry.sha256 {
                rep.warnings.push(format!("{}: hash differs from the manifest", dir.join(name).display()));
            }
            String::from_utf8(bytes).ok()
        }
        Err(e) => {
            rep.warnings.push(format!("{}: {e}", dir.join(name).display()));
            None
        }
    }
}

fn report_one(rep: &mut Report, dir: &Path, man: &RunManifest) {
    let t = &mut String::new();
    let _ = writeln!(
        t,
        "== {} ({}) seed={} samples={} config={} exit={}",
        man.subcommand,
        dir.display(),
        man.seed,
        man.samples,
        man.config_hash,
        man.exit_code
    );
    if let Some(msg) = &man.message {
        let _ = writeln!(t, "   message: {msg}");
    }
    for (k, v) in &man.summary {
        let _ = writeln!(t, "   {k}: {v}");
    }
    for a in &man.assertions {
        let flag = if a.passed { "ok  " } else { "FAIL" };
        if !a.passed {
            rep.failed += 1;
        }
        let _ = writeln!(t, "   [{flag}] {}: {}", a.name, a.detail);
    }
    for o in &man.outputs {
        if !dir.join(&o.path).is_file() {
            rep.warnings.push(format!("{}: listed output missing", dir.join(&o.path).display()));
        }
    }
    let section = match man.subcommand.as_str() {
        "simulate" => simulate_section(rep, dir, man),
        "picard" => picard_section(rep, dir, man),
        "c1check" => table_section(rep, dir, man, C1_FILE),
        "c2check" => c2_section(rep, dir, man),
        "rareevent" => rare_section(rep, dir, man),
        "probe" => probe_section(rep, dir, man),
        "rate" => load(rep, dir, man, RATE_FILE).map(|s| indent(&s)),
        _ => None,
    };
    match section {
        Some(Ok(s)) => t.push_str(&s),
        Some(Err(e)) => rep.warnings.push(format!("{}: {e}", dir.display())),
        None => {}
    }
    rep.text.push_str(t);
}

fn indent(s: &str) -> Result<String, CliError> {
    Ok(s.lines().map(|l| format!("   {l}\n")).collect())
}

fn simulate_section(rep: &mut Report, dir: &Path, man: &RunManifest) -> Option<Result<String, CliError>> {
    let diag = load(rep, dir, man, DIAGNOSTICS_FILE);
    let moments = load(rep, dir, man, MOMENTS_FILE);
    Some((|| {
        let mut out = String::new();
        if let Some(text) = diag {
            let d = read_diagnostics_csv(&text)?;
            let sup = d.iter().map(|x| x.l2 * x.l2).fold(0.0, f64::max);
            let jumps: usize = d.iter().map(|x| x.jumps).sum();
            let _ = writeln!(out, "   sample 0: {} steps, sup |u|^2 = {sup:.6e}, jumps = {jumps}", d.len().saturating_sub(1));
        }
        if let Some(text) = moments {
            let (h, rows) = parse(&text)?;
            let n = rows.len() as f64;
            for name in ["sup_l2_sq", "int_h1_sq", "int_lq_q"] {
                let c = column(&h, name)?;
                let mut s = 0.0;
                for r in &rows {
                    s += number(&r[c])?;
                }
                let _ = writeln!(out, "   ensemble mean {name} = {:.6e} over {n} paths", s / n);
            }
        }
        Ok(out)
    })())
}

fn picard_section(rep: &mut Report, dir: &Path, man: &RunManifest) -> Option<Result<String, CliError>> {
    let text = load(rep, dir, man, PICARD_FILE)?;
    Some((|| {
        let (h, rows) = parse(&text)?;
        let (wc, dc) = (column(&h, "window")?, column(&h, "distance")?);
        let mut windows: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in &rows {
            let w: usize = r[wc].parse().map_err(|_| CliError::Io("bad window index".into()))?;
            windows.entry(w).or_default().push(number(&r[dc])?);
        }
        let mut out = String::from("   window  iterates  final distance  max ratio\n");
        for (w, d) in &windows {
            let ratio = d.windows(2).map(|p| p[1] / p[0]).fold(0.0, f64::max);
            let _ = writeln!(out, "   {w:>6}  {:>8}  {:>14.3e}  {ratio:>9.4}", d.len(), d.last().copied().unwrap_or(f64::NAN));
        }
        Ok(out)
    })())
}

fn table_section(rep: &mut Report, dir: &Path, man: &RunManifest, name: &str) -> Option<Result<String, CliError>> {
    let text = load(rep, dir, man, name)?;
    Some(indent(&text))
}

/// `(eps, median sup distance, median full distance)`
type C2Line = (f64, f64, f64);
/// `(eps, samples, hits, -eps log p, rate interval low, high)`
type RareLine = (f64, usize, usize, f64, f64, f64);

/// Medians and slope recomputed from per-sample distances.
pub fn c2_table(text: &str) -> Result<(Vec<C2Line>, f64), CliError> {
    let (h, rows) = parse(text)?;
    let (ec, sc, fc) = (column(&h, "eps")?, column(&h, "sup_sq")?, column(&h, "full")?);
    let mut by_eps: Vec<(f64, Vec<f64>, Vec<f64>)> = Vec::new();
    for r in &rows {
        let eps = number(&r[ec])?;
        if by_eps.last().is_none_or(|b| b.0 != eps) {
            by_eps.push((eps, Vec::new(), Vec::new()));
        }
        let last = by_eps.last_mut().expect("pushed");
        last.1.push(number(&r[sc])?);
        last.2.push(number(&r[fc])?);
    }
    let table: Vec<C2Line> = by_eps.iter().map(|(e, s, f)| (*e, median(s), median(f))).collect();
    let pos: Vec<&C2Line> = table.iter().filter(|r| r.0 > 0.0 && r.1 > 0.0).collect();
    let slope = if pos.len() >= 2 {
        loglog_slope(
            &pos.iter().map(|r| r.0).collect::<Vec<_>>(),
            &pos.iter().map(|r| r.1).collect::<Vec<_>>(),
        )
    } else {
        f64::NAN
    };
    Ok((table, slope))
}

fn c2_section(rep: &mut Report, dir: &Path, man: &RunManifest) -> Option<Result<String, CliError>> {
    let text = load(rep, dir, man, C2_SAMPLES_FILE)?;
    Some(c2_table(&text).map(|(table, slope)| {
        let mut out = String::from("   eps         median sup|V-u|^2  median full\n");
        for (e, s, f) in &table {
            let _ = writeln!(out, "   {e:<10.3e}  {s:<17.6e}  {f:.6e}");
        }
        let _ = writeln!(out, "   log-log slope {slope:.4}");
        out
    }))
}

/// Rare-event rows recomputed from stored counts.
pub fn rare_table(text: &str) -> Result<Vec<RareLine>, CliError> {
    let (h, rows) = parse(text)?;
    let (ec, nc, hc) = (column(&h, "eps")?, column(&h, "n_samples")?, column(&h, "hits")?);
    let int = |s: &str| s.parse::<usize>().map_err(|_| CliError::Io(format!("`{s}` is not a count")));
    let mut out = Vec::new();
    for r in &rows {
        let (eps, n, hits) = (number(&r[ec])?, int(&r[nc])?, int(&r[hc])?);
        let to_rate = |p: f64| if p <= 0.0 { f64::INFINITY } else { -eps * p.ln() };
        let (lo, hi) = clopper_pearson(hits, n, RARE_EVENT_ALPHA);
        out.push((eps, n, hits, to_rate(hits as f64 / n as f64), to_rate(hi), to_rate(lo)));
    }
    Ok(out)
}

fn key_values(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

fn rare_section(rep: &mut Report, dir: &Path, man: &RunManifest) -> Option<Result<String, CliError>> {
    let text = load(rep, dir, man, RARE_FILE)?;
    let rate = load(rep, dir, man, RATE_FILE).and_then(|s| key_values(&s).get("value").cloned());
    Some(rare_table(&text).map(|rows| {
        let mut out = String::from("   eps         hits/n         -eps log p   interval\n");
        for (eps, n, hits, r, lo, hi) in rows {
            let _ = writeln!(out, "   {eps:<10.3e}  {:<13}  {r:<11.5}  [{lo:.5}, {hi:.5}]", format!("{hits}/{n}"));
        }
        if let Some(v) = rate {
            let _ = writeln!(out, "   rate estimate (upper bound) {v}");
        }
        out
    }))
}

fn probe_section(rep: &mut Report, dir: &Path, man: &RunManifest) -> Option<Result<String, CliError>> {
    let text = load(rep, dir, man, PROBE_FILE)?;
    Some((|| {
        let (h, rows) = parse(&text)?;
        let (pc, rc) = (column(&h, "passed")?, column(&h, "worst_ratio")?);
        let failed = rows.iter().filter(|r| r[pc] != "true").count();
        let mut worst = f64::NEG_INFINITY;
        for r in &rows {
            worst = worst.max(number(&r[rc])?);
        }
        Ok(format!("   {} clause checks, {failed} failed, worst ratio {worst:.6}\n", rows.len()))
    })())
}
