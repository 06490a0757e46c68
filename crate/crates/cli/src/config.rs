//! Run configuration: a sectioned TOML file plus command-line overrides.

use memheat::coefficients::{PolynomialParams, PolynomialSet};
use memheat::ldp::{C1Mode, ControlPair, RateOptions, Target};
use memheat::noise::{MarkMeasure, NoiseSpec, Truncation};
use memheat::solver::{PastSpec, Scheme, SimConfig, Solver};
use memheat::{Field, Kernel};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::csvio;
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub eps: f64,
    pub ensemble: usize,
    pub scheme: Scheme,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 1,
            eps: 0.1,
            ensemble: 1,
            scheme: Scheme::SemiImplicitEuler,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub horizon: f64,
    pub dt: f64,
    pub n_modes: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            horizon: 0.5,
            dt: 1e-3,
            n_modes: 8,
        }
    }
}

/// A builtin set with optional parameter overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSection {
    #[serde(default = "default_builtin")]
    pub builtin: String,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub beta: Option<f64>,
    pub g1: Option<f64>,
    pub p: Option<f64>,
    pub g2: Option<f64>,
    pub kappa: Option<f64>,
    pub k_noise: Option<usize>,
}

fn default_builtin() -> String {
    "cubic".into()
}

impl Default for CoefficientSection {
    fn default() -> Self {
        Self {
            builtin: default_builtin(),
            a: None,
            b: None,
            beta: None,
            g1: None,
            p: None,
            g2: None,
            kappa: None,
            k_noise: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    Zero,
    #[default]
    Exponential,
    Tabulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemorySection {
    pub kind: KernelKind,
    pub a: f64,
    pub eta: f64,
    /// `(lag, value)` pairs for tabulated kernels
    pub points: Vec<[f64; 2]>,
}

impl Default for MemorySection {
    fn default() -> Self {
        Self {
            kind: KernelKind::Exponential,
            a: 1.0,
            eta: 2.0,
            points: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub measure: MarkMeasure,
    /// 0 means the full mark space, `m >= 1` the set `1/m <= |x| <= m`
    pub truncation: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialSection {
    /// leading sine coefficients of `u0`; the rest are zero
    pub u0: Vec<f64>,
    pub past: PastSpec,
}

impl Default for InitialSection {
    fn default() -> Self {
        Self {
            u0: vec![1.0],
            past: PastSpec::ConstantU0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PicardSection {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PicardSection {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 50,
        }
    }
}

/// Constant controls, or paired CSV files as written by the `skeleton` and `rate` commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlSection {
    pub f: f64,
    pub g: f64,
    pub f_csv: Option<PathBuf>,
    pub g_csv: Option<PathBuf>,
}

impl Default for ControlSection {
    fn default() -> Self {
        Self {
            f: 0.0,
            g: 1.0,
            f_csv: None,
            g_csv: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    #[default]
    Everything,
    Terminal,
    HalfSpace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetSection {
    pub kind: TargetKind,
    pub center: Vec<f64>,
    pub radius: f64,
    pub normal: Vec<f64>,
    pub level: f64,
}

impl Default for TargetSection {
    fn default() -> Self {
        Self {
            kind: TargetKind::Everything,
            center: Vec::new(),
            radius: 0.1,
            normal: vec![1.0],
            level: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub eps_schedule: Vec<f64>,
    pub tolerance: f64,
    pub j_tolerance: f64,
    pub c1_mode: C1Mode,
    pub c1_ns: Vec<usize>,
    pub c1_dictionary: usize,
    pub probe_samples: usize,
    pub probe_radii: Vec<f64>,
    /// also run the rate optimizer in `rareevent`
    pub estimate_rate: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            eps_schedule: vec![1e-1, 1e-2, 1e-3, 1e-4],
            tolerance: 1e-3,
            j_tolerance: 1e-2,
            c1_mode: C1Mode::OscillatingF,
            c1_ns: vec![1, 2, 4, 8, 16],
            c1_dictionary: 8,
            probe_samples: 1000,
            probe_radii: vec![1.0, 10.0, 100.0],
            estimate_rate: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub run: RunSection,
    pub grid: GridSection,
    pub coefficients: CoefficientSection,
    pub memory: MemorySection,
    pub noise: NoiseSection,
    pub initial: InitialSection,
    pub picard: PicardSection,
    pub controls: ControlSection,
    pub target: TargetSection,
    pub rate: RateOptions,
    pub experiment: ExperimentSection,
}

/// Command-line overrides, applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub eps: Option<f64>,
    pub ensemble: Option<usize>,
    /// `section.key=value`, the value parsed as a TOML literal when possible
    pub set: Vec<String>,
}

fn parse_literal(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn apply_set(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("--set `{assignment}`: expected section.key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Validation(format!("--set `{assignment}`: empty key")));
    }
    let mut node = table;
    for k in &keys[..keys.len() - 1] {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Validation(format!("--set `{assignment}`: `{k}` is not a section")))?;
    }
    node.insert(keys[keys.len() - 1].to_string(), parse_literal(raw.trim()));
    Ok(())
}

impl Config {
    pub fn from_toml(text: &str, overrides: &Overrides) -> Result<Self, CliError> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| CliError::Validation(format!("config does not parse: {e}")))?;
        for s in &overrides.set {
            apply_set(&mut table, s)?;
        }
        let mut cfg: Config = table
            .try_into()
            .map_err(|e| CliError::Validation(format!("config: {e}")))?;
        if let Some(s) = overrides.seed {
            cfg.run.seed = s;
        }
        if let Some(e) = overrides.eps {
            cfg.run.eps = e;
        }
        if let Some(n) = overrides.ensemble {
            cfg.run.ensemble = n;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn params(&self) -> Result<PolynomialParams, CliError> {
        let c = &self.coefficients;
        let mut p = PolynomialParams::builtin(&c.builtin).map_err(|e| CliError::Validation(format!("coefficients.builtin: {e}")))?;
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut p.a, c.a);
        set(&mut p.b, c.b);
        set(&mut p.beta, c.beta);
        set(&mut p.g1, c.g1);
        set(&mut p.p, c.p);
        set(&mut p.g2, c.g2);
        set(&mut p.kappa, c.kappa);
        if let Some(k) = c.k_noise {
            p.k_noise = k;
        }
        Ok(p)
    }

    pub fn coefficient_set(&self) -> Result<PolynomialSet, CliError> {
        PolynomialSet::new(self.coefficients.builtin.clone(), self.params()?)
            .map_err(|e| CliError::Validation(format!("coefficients: {e}")))
    }

    pub fn kernel(&self) -> Result<Kernel, CliError> {
        let m = &self.memory;
        let k = match m.kind {
            KernelKind::Zero => Ok(Kernel::zero()),
            KernelKind::Exponential => Kernel::exponential(m.a, m.eta),
            KernelKind::Tabulated => {
                let pts: Vec<(f64, f64)> = m.points.iter().map(|p| (p[0], p[1])).collect();
                Kernel::tabulated(&pts)
            }
        };
        k.map_err(|e| CliError::Validation(format!("memory: {e}")))
    }

    pub fn truncation(&self) -> Truncation {
        match self.noise.truncation {
            0 => Truncation::Full,
            m => Truncation::Level(m),
        }
    }

    fn field(&self, name: &str, coeffs: &[f64]) -> Result<Field, CliError> {
        let n = self.grid.n_modes;
        if coeffs.len() > n {
            return Err(CliError::Validation(format!(
                "{name}: {} coefficients for {n} modes",
                coeffs.len()
            )));
        }
        let mut v = coeffs.to_vec();
        v.resize(n, 0.0);
        Field::new(v).map_err(|e| CliError::Validation(format!("{name}: {e}")))
    }

    pub fn sim_config(&self) -> Result<SimConfig, CliError> {
        let set = self.coefficient_set()?;
        let k = set.params().k_noise;
        let noise = NoiseSpec::new(k, self.noise.measure, self.run.eps, self.run.seed)
            .map_err(|e| CliError::Validation(format!("noise: {e}")))?;
        Ok(SimConfig {
            horizon: self.grid.horizon,
            dt: self.grid.dt,
            n_modes: self.grid.n_modes,
            scheme: self.run.scheme,
            picard_tol: self.picard.tol,
            picard_max_iter: self.picard.max_iter,
            truncation: self.truncation(),
            coefficients: Arc::new(set),
            kernel: self.kernel()?,
            noise,
            u0: self.field("initial.u0", &self.initial.u0)?,
            past: self.initial.past,
        })
    }

    /// Every module-level check up front.
    pub fn solver(&self) -> Result<Solver, CliError> {
        if self.run.ensemble == 0 {
            return Err(CliError::Validation("run.ensemble: must be >= 1".into()));
        }
        Solver::new(self.sim_config()?).map_err(CliError::from)
    }

    pub fn controls(&self, solver: &Solver) -> Result<ControlPair, CliError> {
        let c = &self.controls;
        let mut pair = solver.zero_controls();
        match &c.f_csv {
            Some(path) => {
                let f = csvio::read_matrix(path, pair.k_noise())?;
                pair.set_f(f).map_err(|e| CliError::Validation(format!("controls.f_csv: {e}")))?;
            }
            None => pair.fill_f(c.f),
        }
        match &c.g_csv {
            Some(path) => {
                let g = csvio::read_matrix(path, pair.n_bins())?;
                pair.set_g(g).map_err(|e| CliError::Validation(format!("controls.g_csv: {e}")))?;
            }
            None => {
                if c.g < 0.0 || !c.g.is_finite() {
                    return Err(CliError::Validation(format!("controls.g: {} must be >= 0", c.g)));
                }
                if pair.n_bins() > 0 {
                    pair.fill_g(c.g);
                }
            }
        }
        if pair.n_steps() != solver.n_steps() {
            return Err(CliError::Validation(format!(
                "controls: {} time steps, the grid has {}",
                pair.n_steps(),
                solver.n_steps()
            )));
        }
        Ok(pair)
    }

    pub fn target(&self) -> Result<Target, CliError> {
        let t = &self.target;
        match t.kind {
            TargetKind::Everything => Ok(Target::Everything),
            TargetKind::Terminal => {
                if !(t.radius >= 0.0) {
                    return Err(CliError::Validation("target.radius: must be >= 0".into()));
                }
                Ok(Target::Terminal {
                    center: self.field("target.center", &t.center)?,
                    radius: t.radius,
                })
            }
            TargetKind::HalfSpace => {
                let normal = self.field("target.normal", &t.normal)?;
                if normal.l2_norm() == 0.0 {
                    return Err(CliError::Validation("target.normal: must be nonzero".into()));
                }
                Ok(Target::HalfSpace {
                    normal,
                    level: t.level,
                })
            }
        }
    }

    pub fn eps_schedule(&self) -> Result<Vec<f64>, CliError> {
        let s = &self.experiment.eps_schedule;
        if s.is_empty() || s.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(CliError::Validation(
                "experiment.eps_schedule: need positive finite values".into(),
            ));
        }
        Ok(s.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = Config::from_toml("", &Overrides::default()).unwrap();
        assert_eq!(c, Config::default());
        c.solver().unwrap();
    }

    #[test]
    fn set_overrides_nested_keys() {
        let o = Overrides {
            set: vec!["coefficients.a=-1".into(), "noise.measure.kind=\"power-law\"".into(), "noise.measure.c=2.0".into()],
            seed: Some(9),
            ..Overrides::default()
        };
        let c = Config::from_toml("[noise]\ntruncation = 3\n", &o).unwrap();
        assert_eq!(c.coefficients.a, Some(-1.0));
        assert_eq!(c.noise.measure, MarkMeasure::PowerLaw { c: 2.0 });
        assert_eq!(c.run.seed, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::from_toml("[grid]\nnmodes = 3\n", &Overrides::default()).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let c = Config::from_toml("[run]\neps = 0.01\n", &Overrides::default()).unwrap();
        let back = Config::from_toml(&c.to_toml(), &Overrides::default()).unwrap();
        assert_eq!(c, back);
    }
}
