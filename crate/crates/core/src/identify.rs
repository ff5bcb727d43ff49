//! Numerical rank tests for strong identifiability of an expert family and
//! strong independence of an activation.
//!
//! A family of functions is sampled at m random inputs, columns are scaled
//! to unit norm and the ratio σ_min/σ_max of the resulting matrix decides
//! the verdict. A numerical verdict is evidence, not proof.

use std::fmt;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};
use crate::model::{Activation, Atom, ExpertSpec};
use crate::seed;

pub const DEFAULT_THRESHOLD: f64 = 1e-6;
pub const DEFAULT_TRIALS: usize = 5;
pub const MIN_ROWS: usize = 512;
const MIN_PARAM_SEPARATION: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyMode {
    /// x^ν · ∂^τ h/∂η^τ (x, η_j) with |ν| + |τ| ≤ 2
    Identifiability,
    /// x^ν · σ^(τ)(a_j·x + b_j) with |ν| ≤ 2, τ ≤ 2
    Independence,
}

impl fmt::Display for FamilyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FamilyMode::Identifiability => "identifiability",
            FamilyMode::Independence => "independence",
        })
    }
}

impl std::str::FromStr for FamilyMode {
    type Err = MoeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identifiability" => Ok(FamilyMode::Identifiability),
            "independence" => Ok(FamilyMode::Independence),
            other => Err(MoeError::input(format!("unknown mode `{other}`"))),
        }
    }
}

/// Inputs are drawn uniformly from the box [lo, hi]^d.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lo: f64,
    pub hi: f64,
}

impl Domain {
    /// [-1, 1], or [0.5, 1.5] for normalized-input experts.
    pub fn default_for(spec: ExpertSpec) -> Self {
        match spec {
            ExpertSpec::NormalizedRidge(_) => Domain { lo: 0.5, hi: 1.5 },
            _ => Domain { lo: -1.0, hi: 1.0 },
        }
    }
}

/// Describes one column: input monomial x^ν times a derivative of order τ
/// of the expert (multi-index over η) or of the activation (single order).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnLabel {
    pub atom: usize,
    pub nu: Vec<usize>,
    pub tau: Vec<usize>,
}

fn monomial_text(nu: &[usize]) -> String {
    let parts: Vec<String> = nu
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0)
        .map(|(i, &p)| {
            let var = if nu.len() == 1 { "x".to_string() } else { format!("x{}", i + 1) };
            if p == 1 {
                var
            } else {
                format!("{var}^{p}")
            }
        })
        .collect();
    parts.join("*")
}

impl fmt::Display for ColumnLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mono = monomial_text(&self.nu);
        if !mono.is_empty() {
            write!(f, "{mono}*")?;
        }
        if self.tau.len() == 1 {
            // activation derivative
            let t = self.tau[0];
            let primes = "'".repeat(t);
            return write!(f, "s{primes}(z{})", self.atom + 1);
        }
        let order: usize = self.tau.iter().sum();
        if order == 0 {
            return write!(f, "h(eta{})", self.atom + 1);
        }
        let d = self.tau.len() - 1;
        let mut den = String::new();
        for (i, &t) in self.tau.iter().enumerate() {
            if t == 0 {
                continue;
            }
            let name = if i == d {
                "b".to_string()
            } else if d == 1 {
                "a".to_string()
            } else {
                format!("a{}", i + 1)
            };
            den += &if t == 1 { format!("d{name}") } else { format!("d{name}^{t}") };
        }
        let num = if order == 1 { "d".to_string() } else { format!("d^{order}") };
        write!(f, "{num}h/{den}(eta{})", self.atom + 1)
    }
}

/// m×F samples of a function family, stored column-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FamilyMatrix {
    rows: usize,
    values: Vec<f64>,
    labels: Vec<ColumnLabel>,
}

impl FamilyMatrix {
    pub fn new(rows: usize, values: Vec<f64>, labels: Vec<ColumnLabel>) -> Result<Self> {
        if rows == 0 || labels.is_empty() || values.len() != rows * labels.len() {
            return Err(MoeError::input("family matrix shape does not match its labels"));
        }
        Ok(FamilyMatrix { rows, values, labels })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[ColumnLabel] {
        &self.labels
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.values[j * self.rows..(j + 1) * self.rows]
    }

    /// Appends a copy of column `j` (used to probe the rank test).
    pub fn with_duplicate(&self, j: usize) -> Self {
        let mut out = self.clone();
        out.values.extend_from_slice(self.column(j));
        out.labels.push(self.labels[j].clone());
        out
    }
}

/// All multi-indices in N^len with total degree ≤ max, graded then
/// lexicographically descending (so (1,0) precedes (0,1)).
fn multi_indices(len: usize, max: usize) -> Vec<Vec<usize>> {
    fn rec(len: usize, remaining: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == len {
            if remaining == 0 {
                out.push(prefix.clone());
            }
            return;
        }
        for v in (0..=remaining).rev() {
            prefix.push(v);
            rec(len, remaining - v, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for total in 0..=max {
        rec(len, total, &mut Vec::new(), &mut out);
    }
    out
}

fn monomial(x: &[f64], nu: &[usize]) -> f64 {
    x.iter().zip(nu).map(|(v, &p)| v.powi(p as i32)).product()
}

/// Labels of the family, in column order.
pub fn family_labels(d: usize, k: usize, mode: FamilyMode) -> Vec<ColumnLabel> {
    let mut labels = Vec::new();
    for atom in 0..k {
        match mode {
            FamilyMode::Identifiability => {
                for joint in multi_indices(2 * d + 1, 2) {
                    labels.push(ColumnLabel {
                        atom,
                        nu: joint[..d].to_vec(),
                        tau: joint[d..].to_vec(),
                    });
                }
            }
            FamilyMode::Independence => {
                for nu in multi_indices(d, 2) {
                    for t in 0..=2 {
                        labels.push(ColumnLabel {
                            atom,
                            nu: nu.clone(),
                            tau: vec![t],
                        });
                    }
                }
            }
        }
    }
    labels
}

/// Samples the family at m = max(8F, 512) inputs drawn uniformly from
/// `domain` with the given seed. `params` are the η_j = (a_j, b_j).
pub fn build_family(
    spec: ExpertSpec,
    params: &[Vec<f64>],
    mode: FamilyMode,
    domain: Domain,
    seed: u64,
) -> Result<FamilyMatrix> {
    spec.validate()?;
    let first = params.first().ok_or_else(|| MoeError::input("at least one parameter is required"))?;
    if first.len() < 2 {
        return Err(MoeError::input("parameters must hold (a, b) with d >= 1"));
    }
    let d = first.len() - 1;
    if params.iter().any(|p| p.len() != d + 1 || p.iter().any(|v| !v.is_finite())) {
        return Err(MoeError::input("parameters must share length d + 1 and be finite"));
    }
    for (i, p) in params.iter().enumerate() {
        for q in &params[i + 1..] {
            let dist = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if dist <= MIN_PARAM_SEPARATION {
                return Err(MoeError::input("family parameters must be pairwise distinct"));
            }
        }
    }
    if !(domain.lo < domain.hi) {
        return Err(MoeError::input("sampling domain must satisfy lo < hi"));
    }
    let act = spec.activation();
    if act.max_order() < 2 {
        return Err(MoeError::Capability(format!("{act} lacks second derivatives")));
    }
    let labels = family_labels(d, params.len(), mode);
    let cols = labels.len();
    let rows = (8 * cols).max(MIN_ROWS);
    let mut rng = seed::rng(seed);
    let xs: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..d).map(|_| rng.random_range(domain.lo..domain.hi)).collect())
        .collect();
    let mut values = Vec::with_capacity(rows * cols);
    for label in &labels {
        let eta = &params[label.atom];
        for x in &xs {
            let base = match mode {
                FamilyMode::Identifiability => spec.param_derivative(eta, x, &label.tau)?,
                FamilyMode::Independence => {
                    let z = eta[d] + eta[..d].iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
                    act.derivative(label.tau[0], z)?
                }
            };
            values.push(monomial(x, &label.nu) * base);
        }
    }
    FamilyMatrix::new(rows, values, labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependencyTerm {
    pub label: String,
    pub coefficient: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndependenceVerdict {
    pub min_singular_ratio: f64,
    pub independent: bool,
    /// Unit coefficients on the normalized columns spanning the near-null
    /// direction; present only when dependent.
    pub dependency: Option<Vec<f64>>,
    /// Terms of `dependency` with magnitude above 1e-3, labelled.
    pub dependency_terms: Vec<DependencyTerm>,
    /// Columns that vanish on every sample point.
    pub zero_columns: Vec<usize>,
}

/// Flips the sign so the largest entry (lowest index among near-ties) is
/// positive.
fn sign_normalize(v: &mut [f64]) {
    let mut lead = 0;
    for (i, c) in v.iter().enumerate() {
        if c.abs() > v[lead].abs() + 1e-9 {
            lead = i;
        }
    }
    if v.get(lead).is_some_and(|&c| c < 0.0) {
        v.iter_mut().for_each(|c| *c = -*c);
    }
}

fn labelled_terms(m: &FamilyMatrix, v: &[f64]) -> Vec<DependencyTerm> {
    v.iter()
        .enumerate()
        .filter(|(_, c)| c.abs() > 1e-3)
        .map(|(j, &c)| DependencyTerm {
            label: m.labels[j].to_string(),
            coefficient: c,
        })
        .collect()
}

/// Rank verdict for a single sampled family.
pub fn verdict(m: &FamilyMatrix, threshold: f64) -> Result<IndependenceVerdict> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MoeError::input("threshold must lie in (0, 1)"));
    }
    let (rows, cols) = (m.rows(), m.cols());
    let norms: Vec<f64> = (0..cols)
        .map(|j| m.column(j).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let scale = norms.iter().copied().fold(0.0, f64::max);
    let zero_columns: Vec<usize> = (0..cols).filter(|&j| !(norms[j] > scale * 1e-300)).collect();
    if let Some(&z) = zero_columns.first() {
        let mut v = vec![0.0; cols];
        v[z] = 1.0;
        return Ok(IndependenceVerdict {
            min_singular_ratio: 0.0,
            independent: false,
            dependency_terms: labelled_terms(m, &v),
            dependency: Some(v),
            zero_columns,
        });
    }
    let mat = DMatrix::from_fn(rows, cols, |i, j| m.column(j)[i] / norms[j]);
    let svd = mat.svd(false, true);
    let s = &svd.singular_values;
    let (mut imin, mut smin, mut smax) = (0, f64::INFINITY, 0.0f64);
    for (i, &v) in s.iter().enumerate() {
        smax = smax.max(v);
        if v < smin {
            smin = v;
            imin = i;
        }
    }
    let ratio = if smax > 0.0 { (smin / smax).clamp(0.0, 1.0) } else { 0.0 };
    let independent = ratio > threshold;
    let (dependency, dependency_terms) = if independent {
        (None, Vec::new())
    } else {
        let v_t = svd
            .v_t
            .as_ref()
            .ok_or_else(|| MoeError::Domain("singular vectors unavailable".into()))?;
        let mut v: Vec<f64> = v_t.row(imin).iter().copied().collect();
        sign_normalize(&mut v);
        let terms = labelled_terms(m, &v);
        (Some(v), terms)
    };
    Ok(IndependenceVerdict {
        min_singular_ratio: ratio,
        independent,
        dependency,
        dependency_terms,
        zero_columns,
    })
}

/// Runs `trials` freshly sampled families and keeps the verdict with the
/// largest singular ratio.
pub fn verdict_over_trials<F>(threshold: f64, trials: usize, mut build: F) -> Result<IndependenceVerdict>
where
    F: FnMut(usize) -> Result<FamilyMatrix>,
{
    if trials == 0 {
        return Err(MoeError::input("at least one trial is required"));
    }
    let mut best: Option<IndependenceVerdict> = None;
    for t in 0..trials {
        let v = verdict(&build(t)?, threshold)?;
        if best.as_ref().is_none_or(|b| v.min_singular_ratio > b.min_singular_ratio) {
            best = Some(v);
        }
    }
    Ok(best.expect("trials >= 1"))
}

/// Random pairwise-distinct (a, b) draws: |a| in [15, 30] along a random
/// direction, with the hyperplanes a·x + b = 0 spread across the middle of
/// the domain so the activations are far from polynomial there.
pub fn draw_params(k: usize, d: usize, domain: Domain, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(seed);
    let mid = 0.5 * (domain.lo + domain.hi);
    let half = 0.5 * (domain.hi - domain.lo);
    (0..k)
        .map(|j| {
            let mut dir: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            dir.iter_mut().for_each(|v| *v /= norm);
            let mag = rng.random_range(15.0..30.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            let slot = if k == 1 { 0.0 } else { -0.5 + j as f64 / (k - 1) as f64 };
            let offset = (slot + rng.random_range(-0.05..0.05)) * half;
            // hyperplane through mid·1 + offset·dir
            let anchor: f64 = dir.iter().map(|v| v * mid).sum::<f64>() + offset;
            let mut eta: Vec<f64> = dir.iter().map(|v| mag * v).collect();
            eta.push(-mag * anchor);
            eta
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckConfig {
    pub k: usize,
    pub dim: usize,
    pub threshold: f64,
    pub trials: usize,
    pub seed: u64,
    pub domain: Option<Domain>,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            k: 2,
            dim: 1,
            threshold: DEFAULT_THRESHOLD,
            trials: DEFAULT_TRIALS,
            seed: 0,
            domain: None,
        }
    }
}

/// Draws parameters and sample points afresh for every trial and returns
/// the best verdict.
pub fn check_family(spec: ExpertSpec, mode: FamilyMode, cfg: &CheckConfig) -> Result<IndependenceVerdict> {
    if cfg.k == 0 || cfg.dim == 0 {
        return Err(MoeError::input("k and dim must be at least 1"));
    }
    let domain = cfg.domain.unwrap_or_else(|| Domain::default_for(spec));
    verdict_over_trials(cfg.threshold, cfg.trials, |t| {
        let trial_seed = seed::derive_seed(cfg.seed, &[t as u64]);
        let params = draw_params(cfg.k, cfg.dim, domain, seed::stage_seed(trial_seed, seed::Stage::Init));
        build_family(spec, &params, mode, domain, seed::stage_seed(trial_seed, seed::Stage::Sampling))
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PdeCheck {
    pub interaction: bool,
    pub description: String,
}

/// Reports whether the gating and expert parameters of `atom` interact
/// through a PDE of F(x; β1, a, b) = exp(β1·x) h(x, (a, b)).
pub fn detect_pde_interaction(spec: ExpertSpec, atom: &Atom) -> Result<PdeCheck> {
    spec.validate()?;
    match spec {
        ExpertSpec::Linear | ExpertSpec::Polynomial(_) => Ok(PdeCheck {
            interaction: true,
            description: "polynomial expert: d2F/(dbeta1 db) = dF/da holds for every parameter value".into(),
        }),
        ExpertSpec::Ridge(act) => {
            if atom.a().iter().all(|&v| v == 0.0) {
                let b = atom.b();
                Ok(PdeCheck {
                    interaction: true,
                    description: format!(
                        "a = 0: {act}'(b)*dF/dbeta1 = {act}(b)*dF/da at b = {b} (gate slope and expert slope interact)"
                    ),
                })
            } else {
                Ok(PdeCheck {
                    interaction: false,
                    description: "a != 0: no gate/expert PDE".into(),
                })
            }
        }
        ExpertSpec::NormalizedRidge(_) => Ok(PdeCheck {
            interaction: false,
            description: "normalized input: dF/da carries x/|x|, so no gate/expert PDE".into(),
        }),
    }
}

/// Activation-only specs use a Ridge wrapper so that `build_family` in
/// independence mode evaluates σ^(τ)(a·x + b).
pub fn activation_spec(act: Activation) -> ExpertSpec {
    ExpertSpec::Ridge(act)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn column_counts() {
        assert_eq!(family_labels(1, 1, FamilyMode::Identifiability).len(), 10);
        assert_eq!(family_labels(1, 2, FamilyMode::Independence).len(), 18);
        // d = 2: C(5 + 2, 2) joint indices per atom
        assert_eq!(family_labels(2, 1, FamilyMode::Identifiability).len(), 21);
    }

    #[test]
    fn label_text() {
        let labels = family_labels(1, 1, FamilyMode::Identifiability);
        let text: Vec<String> = labels.iter().map(|l| l.to_string()).collect();
        assert!(text.contains(&"dh/da(eta1)".to_string()));
        assert!(text.contains(&"x*dh/db(eta1)".to_string()));
        assert!(text.contains(&"d^2h/dadb(eta1)".to_string()));
    }

    #[test]
    fn identical_seed_identical_matrix() {
        let s = ExpertSpec::Ridge(Activation::Tanh);
        let p = vec![vec![2.0, 0.5], vec![-3.0, 0.1]];
        let dom = Domain { lo: -1.0, hi: 1.0 };
        let a = build_family(s, &p, FamilyMode::Independence, dom, 4).unwrap();
        let b = build_family(s, &p, FamilyMode::Independence, dom, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.rows() >= 4 * a.cols());
    }

    #[test]
    fn coincident_params_rejected() {
        let s = ExpertSpec::Ridge(Activation::Sigmoid);
        let p = vec![vec![1.0, 0.5], vec![1.0, 0.5]];
        let err = build_family(s, &p, FamilyMode::Independence, Domain { lo: -1.0, hi: 1.0 }, 0);
        assert!(matches!(err, Err(MoeError::Input(_))));
    }

    #[test]
    fn zero_column_is_flagged() {
        // σ'' of a linear activation vanishes
        let v = check_family(ExpertSpec::Linear, FamilyMode::Independence, &CheckConfig::default()).unwrap();
        assert!(!v.independent);
        assert!(!v.zero_columns.is_empty());
        assert_eq!(v.min_singular_ratio, 0.0);
    }

    #[test]
    fn pde_detection() {
        let s = ExpertSpec::Ridge(Activation::Sigmoid);
        assert!(detect_pde_interaction(s, &Atom::affine(0.0, vec![0.0], vec![0.0], 1.0)).unwrap().interaction);
        assert!(!detect_pde_interaction(s, &Atom::affine(0.0, vec![0.0], vec![1.0], 1.0)).unwrap().interaction);
        let lin = detect_pde_interaction(ExpertSpec::Linear, &Atom::affine(0.0, vec![0.0], vec![1.0], 1.0)).unwrap();
        assert!(lin.interaction);
        assert!(lin.description.contains("dF/da"));
    }
}
