//! Run configuration: a sectioned TOML file with typed scalars and inline
//! lists. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spatial_ratchet::{
    validate_params, Configuration, FitnessSpec, ModelParams, Polynomial, TruncationParams,
};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub horizon: f64,
    #[serde(default = "default_replicates")]
    pub replicates: u64,
    /// Snapshot times for trajectory files.
    #[serde(default)]
    pub observe: Vec<f64>,
    pub model: ModelSection,
    #[serde(default)]
    pub truncation: TruncationSection,
    #[serde(default)]
    pub initial: InitialSection,
    /// Second configuration for `couple`.
    #[serde(default)]
    pub initial_b: Option<InitialSection>,
    #[serde(default)]
    pub options: Options,
}

fn default_replicates() -> u64 {
    100
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    FisherKpp,
    Cooperative,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_preset")]
    pub preset: Preset,
    #[serde(rename = "L", default = "one")]
    pub l: f64,
    #[serde(default = "one")]
    pub m: f64,
    #[serde(rename = "N", default = "one_u")]
    pub n: u64,
    #[serde(default)]
    pub mu: f64,
    /// Geometric fitness `s_k = (1 - s)^k`; ignored when `fitness` is given.
    #[serde(default = "default_s")]
    pub s: f64,
    #[serde(default)]
    pub fitness: Option<Vec<f64>>,
    /// Cooperation strength of the cooperative preset.
    #[serde(rename = "B", default = "one")]
    pub b: f64,
    /// Coefficients, lowest degree first (custom preset only).
    #[serde(default)]
    pub q_plus: Option<Vec<f64>>,
    #[serde(default)]
    pub q_minus: Option<Vec<f64>>,
    /// Reject parameters that violate the model assumptions.
    #[serde(default = "yes")]
    pub validate: bool,
}

fn default_preset() -> Preset {
    Preset::FisherKpp
}
fn one() -> f64 {
    1.0
}
fn one_u() -> u64 {
    1
}
fn default_s() -> f64 {
    0.1
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationSection {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(rename = "K", default = "default_k")]
    pub k: u32,
    #[serde(default)]
    pub kappa: Option<u64>,
    /// `(lambda_n, K_n)` levels for `converge`.
    #[serde(default)]
    pub schedule: Vec<(f64, u32)>,
}

fn default_lambda() -> f64 {
    5.0
}
fn default_k() -> u32 {
    3
}

impl Default for TruncationSection {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
            k: default_k(),
            kappa: None,
            schedule: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    /// `uniform` (occupancy `occupancy` of type 0 on `[-a, a]`), `file` or `inline`.
    #[serde(default = "default_generator")]
    pub generator: String,
    #[serde(default)]
    pub occupancy: u64,
    /// Physical half-width of the uniform block.
    #[serde(default)]
    pub a: f64,
    #[serde(default)]
    pub file: Option<PathBuf>,
    /// `[site, type, count]` triples.
    #[serde(default)]
    pub sites: Vec<(i64, u32, u64)>,
}

fn default_generator() -> String {
    "inline".into()
}

impl Default for InitialSection {
    fn default() -> Self {
        Self {
            generator: default_generator(),
            occupancy: 0,
            a: 0.0,
            file: None,
            sites: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Options {
    /// `eta` or `zeta` for `simulate`.
    #[serde(default = "default_process")]
    pub process: String,
    #[serde(default)]
    pub trajectories: bool,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub guard: bool,
    #[serde(default)]
    pub labels: bool,
    /// Half-width of the watched window for hits.
    #[serde(default = "one")]
    pub r: f64,
    /// Seeding distances for `spread-sweep`.
    #[serde(rename = "R", default = "default_r_grid")]
    pub r_grid: Vec<f64>,
    #[serde(default = "default_exponents")]
    pub exponents: Vec<u32>,
    #[serde(default = "default_probe")]
    pub probe_sites: Vec<i64>,
    /// Mutation index set for `greens-check`.
    #[serde(default = "default_types")]
    pub types: Vec<u32>,
    #[serde(default = "default_grid")]
    pub grid_points: usize,
    /// Half-width in sites of the statistics window for `converge`.
    #[serde(default = "one_i")]
    pub window: i64,
    #[serde(default = "default_envelope")]
    pub envelope: f64,
    #[serde(default = "default_cases")]
    pub duality_cases: u64,
    #[serde(default = "default_walks")]
    pub walks: u64,
}

fn default_process() -> String {
    "eta".into()
}
fn default_eps() -> f64 {
    0.1
}
fn default_r_grid() -> Vec<f64> {
    vec![4.0, 8.0, 12.0, 16.0]
}
fn default_exponents() -> Vec<u32> {
    vec![1, 2]
}
fn default_probe() -> Vec<i64> {
    vec![0]
}
fn default_types() -> Vec<u32> {
    vec![0]
}
fn default_grid() -> usize {
    spatial_ratchet::duality::DEFAULT_QUADRATURE_POINTS
}
fn one_i() -> i64 {
    1
}
fn default_envelope() -> f64 {
    spatial_ratchet::stats::DEFAULT_SE_ENVELOPE
}
fn default_cases() -> u64 {
    100
}
fn default_walks() -> u64 {
    100_000
}

impl Default for Options {
    fn default() -> Self {
        Self {
            process: default_process(),
            trajectories: false,
            eps: default_eps(),
            guard: false,
            labels: false,
            r: 1.0,
            r_grid: default_r_grid(),
            exponents: default_exponents(),
            probe_sites: default_probe(),
            types: default_types(),
            grid_points: default_grid(),
            window: 1,
            envelope: default_envelope(),
            duality_cases: default_cases(),
            walks: default_walks(),
        }
    }
}

/// 1-based line and column of a byte offset.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

/// Parses and validates a configuration from text. `base` resolves relative
/// file paths.
pub fn parse_config_str(text: &str, base: &Path) -> Result<RunConfig, CliError> {
    let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        CliError::Parse {
            line,
            column,
            msg: e.message().to_string(),
        }
    })?;
    for init in std::iter::once(&mut cfg.initial).chain(cfg.initial_b.as_mut()) {
        if let Some(f) = init.file.as_mut() {
            if f.is_relative() {
                *f = base.join(&*f);
            }
        }
    }
    cfg.check()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text, path.parent().unwrap_or(Path::new(".")))
}

impl RunConfig {
    fn check(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        if !(self.horizon >= 0.0) || !self.horizon.is_finite() {
            return bad(format!(
                "horizon must be a finite non-negative number, got {}",
                self.horizon
            ));
        }
        if self.observe.iter().any(|t| !(*t >= 0.0)) || self.observe.windows(2).any(|w| w[1] < w[0])
        {
            return bad("observe must be non-negative and sorted".into());
        }
        if !(self.truncation.lambda > 0.0) {
            return bad("truncation.lambda must be positive".into());
        }
        if self
            .truncation
            .schedule
            .windows(2)
            .any(|w| !(w[1].0 > w[0].0) || w[1].1 < w[0].1)
        {
            return bad("truncation.schedule must be increasing".into());
        }
        if !matches!(self.options.process.as_str(), "eta" | "zeta") {
            return bad(format!(
                "options.process must be eta or zeta, got {}",
                self.options.process
            ));
        }
        for init in std::iter::once(&self.initial).chain(self.initial_b.as_ref()) {
            init.check()?;
        }
        let p = self.model.params()?;
        if self.model.validate {
            validate_params(p).map_err(CliError::Validation)?;
        }
        Ok(())
    }

    pub fn trunc(&self) -> TruncationParams {
        let t = TruncationParams::new(self.truncation.lambda, self.truncation.k);
        match self.truncation.kappa {
            Some(k) => t.with_kappa(k),
            None => t,
        }
    }

    pub fn schedule(&self) -> Vec<TruncationParams> {
        self.truncation
            .schedule
            .iter()
            .map(|&(l, k)| TruncationParams::new(l, k))
            .collect()
    }

    /// The configuration echoed next to the outputs, with every default filled in.
    pub fn resolved_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

impl ModelSection {
    pub fn params(&self) -> Result<ModelParams, CliError> {
        let mut p = match self.preset {
            Preset::FisherKpp => ModelParams::fisher_kpp(self.l, self.m, self.n, self.mu, self.s),
            Preset::Cooperative => {
                ModelParams::cooperative(self.l, self.m, self.n, self.mu, self.s, self.b)
            }
            Preset::Custom => {
                let (Some(qp), Some(qm)) = (&self.q_plus, &self.q_minus) else {
                    return Err(CliError::Usage(
                        "custom preset needs q_plus and q_minus".into(),
                    ));
                };
                let mut p = ModelParams::fisher_kpp(self.l, self.m, self.n, self.mu, self.s);
                p.q_plus = Polynomial::new(qp.clone());
                p.q_minus = Polynomial::new(qm.clone());
                p
            }
        };
        if self.preset != Preset::Custom && (self.q_plus.is_some() || self.q_minus.is_some()) {
            return Err(CliError::Usage(
                "q_plus / q_minus are only read with preset = \"custom\"".into(),
            ));
        }
        if let Some(f) = &self.fitness {
            p.fitness = FitnessSpec::Explicit(f.clone());
        }
        Ok(p)
    }
}

impl InitialSection {
    fn check(&self) -> Result<(), CliError> {
        match self.generator.as_str() {
            "uniform" if self.occupancy == 0 || !(self.a >= 0.0) => Err(CliError::Usage(
                "uniform generator needs occupancy > 0 and a >= 0".into(),
            )),
            "uniform" | "inline" => Ok(()),
            "file" => match &self.file {
                Some(f) if f.exists() => Ok(()),
                Some(f) => Err(CliError::Usage(format!(
                    "initial file {} does not exist",
                    f.display()
                ))),
                None => Err(CliError::Usage("file generator needs `file`".into())),
            },
            g => Err(CliError::Usage(format!("unknown initial generator `{g}`"))),
        }
    }

    pub fn build(&self, l: f64) -> Result<Configuration, CliError> {
        match self.generator.as_str() {
            "uniform" => Ok(Configuration::uniform(
                self.occupancy,
                (self.a * l).floor() as i64,
            )),
            "file" => {
                let path = self.file.as_ref().expect("checked");
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
                let (c, file_l) = Configuration::from_text(&text)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
                if file_l != l {
                    return Err(CliError::Usage(format!(
                        "{} was written for L = {file_l}, model has L = {l}",
                        path.display()
                    )));
                }
                Ok(c)
            }
            _ => {
                let mut c = Configuration::new();
                for &(site, k, count) in &self.sites {
                    c.add(site, k, count);
                }
                Ok(c)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "seed = 7\nhorizon = 1.0\n[model]\nN = 2\n";

    #[test]
    fn minimal_file_gets_defaults() {
        let c = parse_config_str(MINIMAL, Path::new(".")).unwrap();
        assert_eq!(c.replicates, 100);
        assert_eq!(c.truncation.k, 3);
        assert_eq!(c.options.grid_points, 64);
        let again = parse_config_str(&c.resolved_toml(), Path::new(".")).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn schedule_parses() {
        let text = format!("{MINIMAL}[truncation]\nschedule = [[5, 3], [10, 6], [20, 12]]\n");
        let c = parse_config_str(&text, Path::new(".")).unwrap();
        let s = c.schedule();
        assert_eq!(s.len(), 3);
        assert_eq!((s[2].lambda_n, s[2].k_n), (20.0, 12));
    }

    #[test]
    fn unknown_key_reports_position() {
        let text = "seed = 7\nhorizon = 1.0\n[model]\nN = 2\nbogus = 3\n";
        match parse_config_str(text, Path::new(".")) {
            Err(CliError::Parse { line, column, .. }) => assert_eq!((line, column), (5, 1)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn degree_violation_is_a_validation_error() {
        let text = "seed = 1\nhorizon = 1.0\n[model]\npreset = \"custom\"\nq_plus = [0.0, 0.0, 1.0]\nq_minus = [0.0, 1.0]\n";
        let e = parse_config_str(text, Path::new(".")).unwrap_err();
        assert!(matches!(e, CliError::Validation(_)), "{e:?}");
        assert!(e.to_string().contains("deg q_plus"));
    }
}
