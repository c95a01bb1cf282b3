//! Model parameters and the lattice configuration space.
//!
//! Sites are stored as integer indices `i`; the physical position of site
//! `i` is `i / L`. Every norm below is evaluated in physical coordinates.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A polynomial with real coefficients, lowest degree first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polynomial {
    coeffs: Vec<f64>,
}

impl Polynomial {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(vec![c])
    }

    pub fn zero() -> Self {
        Self::new(Vec::new())
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Degree ignoring trailing zero coefficients; `None` for the zero polynomial.
    pub fn degree(&self) -> Option<usize> {
        self.coeffs.iter().rposition(|&c| c != 0.0)
    }

    pub fn is_zero(&self) -> bool {
        self.degree().is_none()
    }

    pub fn leading_coeff(&self) -> f64 {
        self.degree().map_or(0.0, |d| self.coeffs[d])
    }

    /// Horner evaluation.
    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    pub fn derivative(&self) -> Polynomial {
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, &c)| c * i as f64)
            .collect();
        Polynomial::new(coeffs)
    }

    /// Cauchy bound: every real root lies in `[-B, B]`.
    pub fn root_bound(&self) -> f64 {
        match self.degree() {
            None | Some(0) => 0.0,
            Some(d) => {
                let lead = self.coeffs[d].abs();
                1.0 + self.coeffs[..d]
                    .iter()
                    .map(|c| (c / lead).abs())
                    .fold(0.0, f64::max)
            }
        }
    }

    /// Checks `p(x) >= 0` on `[0, inf)`: positive leading coefficient plus a
    /// scan of a geometric grid up to the root bound.
    pub fn is_nonnegative_on_halfline(&self) -> bool {
        let Some(d) = self.degree() else {
            return true;
        };
        if self.coeffs[d] < 0.0 {
            return false;
        }
        if d == 0 {
            return true;
        }
        if self.eval(0.0) < 0.0 {
            return false;
        }
        let bound = self.root_bound();
        let lo = 1e-9_f64;
        let steps = 4000;
        let ratio = (bound.max(1.0) / lo).powf(1.0 / steps as f64);
        let mut x = lo;
        for _ in 0..=steps {
            if self.eval(x) < 0.0 {
                return false;
            }
            x *= ratio;
        }
        true
    }
}

/// Fitness sequence `s_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitnessSpec {
    /// `s_k = (1 - s)^k`.
    Geometric(f64),
    /// Explicit `s_0, s_1, ...`; zero beyond the list.
    Explicit(Vec<f64>),
}

impl FitnessSpec {
    pub fn eval(&self, k: u32) -> f64 {
        match self {
            FitnessSpec::Geometric(s) => (1.0 - s).powi(k as i32),
            FitnessSpec::Explicit(values) => values.get(k as usize).copied().unwrap_or(0.0),
        }
    }

    /// `s_0 ..= s_{max_k}` as a lookup table.
    pub fn table(&self, max_k: u32) -> Vec<f64> {
        (0..=max_k).map(|k| self.eval(k)).collect()
    }

    fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self {
            FitnessSpec::Geometric(s) => {
                if !(*s > 0.0 && *s <= 1.0) {
                    out.push(format!("geometric fitness needs s in (0,1], got {s}"));
                }
            }
            FitnessSpec::Explicit(values) => {
                if values.first().copied() != Some(1.0) {
                    out.push("s_0 must equal 1".to_string());
                }
                if let Some(k) = values.iter().position(|&v| v < 0.0 || !v.is_finite()) {
                    out.push(format!("s_{k} is negative or not finite"));
                }
                if let Some(k) = values.windows(2).position(|w| w[1] > w[0]) {
                    out.push(format!("s_{} > s_{}: sequence increases", k + 1, k));
                }
            }
        }
        out
    }
}

/// All model constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Inverse lattice spacing.
    #[serde(rename = "L")]
    pub l: f64,
    /// Per-particle migration attempt rate.
    pub m: f64,
    /// Carrying-capacity scale.
    #[serde(rename = "N")]
    pub n: u64,
    /// Mutation probability.
    pub mu: f64,
    pub fitness: FitnessSpec,
    pub q_plus: Polynomial,
    pub q_minus: Polynomial,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamViolation {
    #[error("deg q_plus must be below deg q_minus: {0}")]
    DegreeViolation(String),
    #[error("{0} is negative somewhere on [0, inf)")]
    NegativePolynomial(&'static str),
    #[error("fitness sequence invalid: {0}")]
    FitnessViolation(String),
    #[error("invalid scalar parameter: {0}")]
    InvalidScalar(String),
}

/// Every violated assumption found by [`validate_params`].
#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid model parameters: {}", .violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
pub struct ValidationReport {
    pub violations: Vec<ParamViolation>,
}

impl ModelParams {
    /// `q_+ = 1`, `q_-(u) = u`.
    pub fn fisher_kpp(l: f64, m: f64, n: u64, mu: f64, s: f64) -> Self {
        Self {
            l,
            m,
            n,
            mu,
            fitness: FitnessSpec::Geometric(s),
            q_plus: Polynomial::constant(1.0),
            q_minus: Polynomial::new(vec![0.0, 1.0]),
        }
    }

    /// `q_+(u) = Bu + 1`, `q_-(u) = u(Bu + 1)`.
    pub fn cooperative(l: f64, m: f64, n: u64, mu: f64, s: f64, b: f64) -> Self {
        Self {
            l,
            m,
            n,
            mu,
            fitness: FitnessSpec::Geometric(s),
            q_plus: Polynomial::new(vec![1.0, b]),
            q_minus: Polynomial::new(vec![0.0, 1.0, b]),
        }
    }

    pub fn validate(&self) -> Result<(), ValidationReport> {
        let mut violations = Vec::new();
        if !(self.l > 0.0 && self.l.is_finite()) {
            violations.push(ParamViolation::InvalidScalar(format!(
                "L = {} must be positive",
                self.l
            )));
        }
        if !(self.m >= 0.0 && self.m.is_finite()) {
            violations.push(ParamViolation::InvalidScalar(format!(
                "m = {} must be non-negative",
                self.m
            )));
        }
        if self.n == 0 {
            violations.push(ParamViolation::InvalidScalar(
                "N must be a positive integer".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            violations.push(ParamViolation::InvalidScalar(format!(
                "mu = {} must lie in [0,1]",
                self.mu
            )));
        }
        for msg in self.fitness.violations() {
            violations.push(ParamViolation::FitnessViolation(msg));
        }
        // The zero polynomial is treated as having degree -inf.
        match (self.q_plus.degree(), self.q_minus.degree()) {
            (_, None) => violations.push(ParamViolation::DegreeViolation(
                "q_minus is the zero polynomial".into(),
            )),
            (Some(dp), Some(dm)) if dp >= dm => violations.push(ParamViolation::DegreeViolation(
                format!("deg q_plus = {dp} >= deg q_minus = {dm}"),
            )),
            _ => {}
        }
        if !self.q_plus.is_nonnegative_on_halfline() {
            violations.push(ParamViolation::NegativePolynomial("q_plus"));
        }
        if !self.q_minus.is_nonnegative_on_halfline() {
            violations.push(ParamViolation::NegativePolynomial("q_minus"));
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ValidationReport { violations })
        }
    }
}

/// Returns the parameters unchanged iff every model assumption holds.
pub fn validate_params(p: ModelParams) -> Result<ModelParams, ValidationReport> {
    p.validate()?;
    Ok(p)
}

/// Truncation `(lambda_n, K_n, kappa)` defining the approximating process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationParams {
    pub lambda_n: f64,
    pub k_n: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<u64>,
}

impl TruncationParams {
    pub fn new(lambda_n: f64, k_n: u32) -> Self {
        Self {
            lambda_n,
            k_n,
            kappa: None,
        }
    }

    pub fn with_kappa(mut self, kappa: u64) -> Self {
        self.kappa = Some(kappa);
        self
    }

    /// Largest site index `i >= 0` with `i / L <= lambda_n`.
    pub fn half_width(&self, l: f64) -> i64 {
        let mut i = (self.lambda_n * l).floor() as i64;
        while i >= 0 && (i as f64) / l > self.lambda_n {
            i -= 1;
        }
        while ((i + 1) as f64) / l <= self.lambda_n {
            i += 1;
        }
        i
    }

    pub fn active_box(&self, l: f64) -> ActiveBox {
        ActiveBox::new(self.half_width(l))
    }
}

/// The active window `{-h, ..., h}` of site indices. Empty when `h < 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveBox {
    pub half_width: i64,
}

impl ActiveBox {
    pub fn new(half_width: i64) -> Self {
        Self { half_width }
    }

    pub fn len(&self) -> usize {
        if self.half_width < 0 {
            0
        } else {
            (2 * self.half_width + 1) as usize
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, site: i64) -> bool {
        site.abs() <= self.half_width
    }

    pub fn index(&self, site: i64) -> usize {
        debug_assert!(self.contains(site));
        (site + self.half_width) as usize
    }

    pub fn site(&self, index: usize) -> i64 {
        index as i64 - self.half_width
    }

    pub fn sites(&self) -> impl Iterator<Item = i64> {
        -self.half_width..=self.half_width
    }

    /// Number of in-box neighbours of `site` (0, 1 or 2).
    pub fn open_directions(&self, site: i64) -> u32 {
        u32::from(self.contains(site - 1)) + u32::from(self.contains(site + 1))
    }
}

/// Mutation-count histogram of one deme.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct DemeState {
    counts: BTreeMap<u32, u64>,
}

impl DemeState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts<I: IntoIterator<Item = (u32, u64)>>(iter: I) -> Self {
        let mut d = Self::new();
        for (k, c) in iter {
            d.add(k, c);
        }
        d
    }

    pub fn get(&self, k: u32) -> u64 {
        self.counts.get(&k).copied().unwrap_or(0)
    }

    pub fn add(&mut self, k: u32, count: u64) {
        if count > 0 {
            *self.counts.entry(k).or_insert(0) += count;
        }
    }

    /// Removes `count` particles of type `k`; returns false (and leaves the
    /// deme untouched) when fewer are present.
    pub fn remove(&mut self, k: u32, count: u64) -> bool {
        match self.counts.get_mut(&k) {
            Some(c) if *c >= count => {
                *c -= count;
                if *c == 0 {
                    self.counts.remove(&k);
                }
                true
            }
            _ => count == 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// `(k, count)` pairs with `count > 0`, ascending in `k`.
    pub fn iter(&self) -> impl Iterator<Item = (u32, u64)> + '_ {
        self.counts.iter().map(|(&k, &c)| (k, c))
    }

    pub fn min_type(&self) -> Option<u32> {
        self.counts.keys().next().copied()
    }

    pub fn max_type(&self) -> Option<u32> {
        self.counts.keys().next_back().copied()
    }

    /// Type of the `index`-th particle when particles are ordered by type.
    pub fn type_at(&self, mut index: u64) -> Option<u32> {
        for (&k, &c) in &self.counts {
            if index < c {
                return Some(k);
            }
            index -= c;
        }
        None
    }

    /// `sum_k |a_k - b_k|`.
    pub fn l1_distance(&self, other: &DemeState) -> u64 {
        let mut d = 0;
        for (k, c) in self.iter() {
            d += c.abs_diff(other.get(k));
        }
        for (k, c) in other.iter() {
            if self.get(k) == 0 {
                d += c;
            }
        }
        d
    }
}

/// Finite-support lattice configuration: site index -> deme histogram.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Configuration {
    demes: BTreeMap<i64, DemeState>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigFormatError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing header field `{0}`")]
    MissingHeader(&'static str),
    #[error("site {site} lies outside the declared support radius {radius}")]
    OutsideSupport { site: i64, radius: i64 },
}

impl Configuration {
    pub fn new() -> Self {
        Self::default()
    }

    /// `occupancy` type-0 particles on every site with `|i| <= half_width`.
    pub fn uniform(occupancy: u64, half_width: i64) -> Self {
        let mut c = Self::new();
        for i in -half_width..=half_width {
            c.add(i, 0, occupancy);
        }
        c
    }

    pub fn add(&mut self, site: i64, k: u32, count: u64) {
        if count > 0 {
            self.demes.entry(site).or_default().add(k, count);
        }
    }

    pub fn remove(&mut self, site: i64, k: u32, count: u64) -> bool {
        let Some(d) = self.demes.get_mut(&site) else {
            return count == 0;
        };
        let ok = d.remove(k, count);
        if d.is_empty() {
            self.demes.remove(&site);
        }
        ok
    }

    pub fn set_deme(&mut self, site: i64, deme: DemeState) {
        if deme.is_empty() {
            self.demes.remove(&site);
        } else {
            self.demes.insert(site, deme);
        }
    }

    pub fn deme(&self, site: i64) -> Option<&DemeState> {
        self.demes.get(&site)
    }

    pub fn get(&self, site: i64, k: u32) -> u64 {
        self.demes.get(&site).map_or(0, |d| d.get(k))
    }

    pub fn total_at(&self, site: i64) -> u64 {
        self.demes.get(&site).map_or(0, DemeState::total)
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, &DemeState)> {
        self.demes.iter().map(|(&i, d)| (i, d))
    }

    pub fn is_empty(&self) -> bool {
        self.demes.is_empty()
    }

    pub fn total_mass(&self) -> u64 {
        self.demes.values().map(DemeState::total).sum()
    }

    /// Smallest `r` with every occupied site inside `[-r, r]`; 0 when empty.
    pub fn support_radius(&self) -> i64 {
        self.demes.keys().map(|i| i.abs()).max().unwrap_or(0)
    }

    pub fn sup_occupancy(&self) -> u64 {
        self.demes.values().map(DemeState::total).max().unwrap_or(0)
    }

    pub fn max_type(&self) -> Option<u32> {
        self.demes.values().filter_map(DemeState::max_type).max()
    }

    /// Per-site totals restricted to `sites`.
    pub fn totals_on(&self, active: ActiveBox) -> Vec<u64> {
        active.sites().map(|i| self.total_at(i)).collect()
    }

    /// Merge by adding counts.
    pub fn merged(&self, other: &Configuration) -> Configuration {
        let mut out = self.clone();
        for (i, d) in other.iter() {
            for (k, c) in d.iter() {
                out.add(i, k, c);
            }
        }
        out
    }

    /// Line-oriented text form: a header with `L` and the support radius,
    /// then one `site k count` line per occupied pair.
    pub fn to_text(&self, l: f64) -> String {
        let mut s = String::new();
        s.push_str("# ratchet configuration v1\n");
        let _ = writeln!(s, "L {l}");
        let _ = writeln!(s, "support_radius {}", self.support_radius());
        for (i, d) in self.iter() {
            for (k, c) in d.iter() {
                let _ = writeln!(s, "{i} {k} {c}");
            }
        }
        s
    }

    /// Inverse of [`Configuration::to_text`]; returns the configuration and `L`.
    pub fn from_text(text: &str) -> Result<(Configuration, f64), ConfigFormatError> {
        let mut l = None;
        let mut radius = None;
        let mut config = Configuration::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = n + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let perr = |msg: String| ConfigFormatError::Parse { line: lineno, msg };
            match fields.as_slice() {
                ["L", v] => {
                    l = Some(v.parse::<f64>().map_err(|e| perr(format!("bad L: {e}")))?);
                }
                ["support_radius", v] => {
                    radius = Some(
                        v.parse::<i64>()
                            .map_err(|e| perr(format!("bad radius: {e}")))?,
                    );
                }
                [site, k, count] => {
                    let site = site
                        .parse::<i64>()
                        .map_err(|e| perr(format!("bad site: {e}")))?;
                    let k = k
                        .parse::<u32>()
                        .map_err(|e| perr(format!("bad type: {e}")))?;
                    let count = count
                        .parse::<u64>()
                        .map_err(|e| perr(format!("bad count: {e}")))?;
                    config.add(site, k, count);
                }
                _ => return Err(perr(format!("unrecognised line `{line}`"))),
            }
        }
        let l = l.ok_or(ConfigFormatError::MissingHeader("L"))?;
        let radius = radius.ok_or(ConfigFormatError::MissingHeader("support_radius"))?;
        if let Some((site, _)) = config.iter().find(|(i, _)| i.abs() > radius) {
            return Err(ConfigFormatError::OutsideSupport { site, radius });
        }
        Ok((config, l))
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (n, (i, d)) in self.iter().enumerate() {
            if n > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{i}: {:?}", d.iter().collect::<Vec<_>>())?;
        }
        write!(f, "}}")
    }
}

fn weight(site: i64, l: f64) -> f64 {
    let x = site as f64 / l;
    (1.0 + x.abs()).powi(2)
}

/// `|||c|||_S = sum_x ||c(x)||_1 / (1 + |x|)^2`.
pub fn norm_s(c: &Configuration, l: f64) -> f64 {
    c.iter().map(|(i, d)| d.total() as f64 / weight(i, l)).sum()
}

/// `d_S(a, b) = |||a - b|||_S`.
pub fn dist_s(a: &Configuration, b: &Configuration, l: f64) -> f64 {
    let empty = DemeState::new();
    let mut sites: Vec<i64> = a
        .iter()
        .map(|(i, _)| i)
        .chain(b.iter().map(|(i, _)| i))
        .collect();
    sites.sort_unstable();
    sites.dedup();
    sites
        .into_iter()
        .map(|i| {
            let da = a.deme(i).unwrap_or(&empty);
            let db = b.deme(i).unwrap_or(&empty);
            da.l1_distance(db) as f64 / weight(i, l)
        })
        .sum()
}

/// `psi_p(c) = sum_x ||c(x)||_1^p / (1 + |x|)^(2p)`.
pub fn psi_p(c: &Configuration, p: u32, l: f64) -> f64 {
    c.iter()
        .map(|(i, d)| (d.total() as f64 / weight(i, l)).powi(p as i32))
        .sum()
}

/// Membership in the set of admissible initial conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct S0Report {
    pub member: bool,
    pub sup_occupancy: u64,
    pub max_mutation: Option<u32>,
}

/// Finite support forces both the bounded-occupancy and the vanishing
/// mutation-tail conditions, so membership always holds; the report carries
/// the realised supremum and maximal type.
pub fn in_s0(c: &Configuration) -> S0Report {
    S0Report {
        member: true,
        sup_occupancy: c.sup_occupancy(),
        max_mutation: c.max_type(),
    }
}
