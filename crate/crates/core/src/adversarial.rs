//! Witness sequences G_n whose function-space distance to the truth vanishes
//! faster than their D3,r loss, for linear experts and for ridge experts
//! with a zero slope a*_1.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};
use crate::losses::{l2_distance, loss_d3, InputDistribution, DEFAULT_QUADRATURE_NODES};
use crate::model::{Atom, ExpertSpec, MixingMeasure};

pub const ROOT_SCAN_MIN: f64 = 1e-6;
pub const ROOT_SCAN_MAX: f64 = 1e3;
pub const ROOT_SCAN_POINTS: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Construction {
    /// Symmetric bias split of atom 1 with inflated weights (linear experts).
    Polynomial,
    /// Bias shifts c/n and 2c/n of a zero-slope ridge atom, c a root of the
    /// Taylor polynomial.
    Ridge,
}

impl Construction {
    pub fn for_family(spec: ExpertSpec) -> Result<Self> {
        match spec {
            ExpertSpec::Linear => Ok(Construction::Polynomial),
            ExpertSpec::Ridge(_) => Ok(Construction::Ridge),
            other => Err(MoeError::input(format!("no witness construction for {other} experts"))),
        }
    }
}

fn check_index(n: u64, r: f64) -> Result<()> {
    if n < 2 {
        return Err(MoeError::input("witness index n must be at least 2"));
    }
    if !(r >= 1.0 && r.is_finite()) {
        return Err(MoeError::input(format!("r must be a finite value >= 1, got {r}")));
    }
    Ok(())
}

fn copy_rest(gstar: &MixingMeasure, atoms: &mut Vec<Atom>) {
    atoms.extend(gstar.atoms()[1..].iter().cloned());
}

/// Linear experts: atom 1 is split into two atoms with weights
/// ½exp(β*01) + 1/(2n^{r+1}) and biases b*1 ± 1/n; the other true atoms
/// are copied.
pub fn construct_gn_polynomial(gstar: &MixingMeasure, n: u64, r: f64) -> Result<MixingMeasure> {
    if gstar.expert() != ExpertSpec::Linear {
        return Err(MoeError::input(format!(
            "the polynomial construction needs linear experts, got {}",
            gstar.expert()
        )));
    }
    check_index(n, r)?;
    let nf = n as f64;
    let t = &gstar.atoms()[0];
    let w = 0.5 * t.weight() + 0.5 / nf.powf(r + 1.0);
    let beta0 = w.ln();
    let mut atoms = vec![
        Atom::affine(beta0, t.beta1.clone(), t.a().to_vec(), t.b() + 1.0 / nf),
        Atom::affine(beta0, t.beta1.clone(), t.a().to_vec(), t.b() - 1.0 / nf),
    ];
    copy_rest(gstar, &mut atoms);
    MixingMeasure::new(gstar.expert(), atoms)
}

/// Closed form of D3,r for `construct_gn_polynomial`.
pub fn polynomial_witness_loss(gstar: &MixingMeasure, n: u64, r: f64) -> f64 {
    let nf = n as f64;
    let tail = 1.0 / nf.powf(r + 1.0);
    tail + (gstar.atoms()[0].weight() + tail) / nf.powf(r)
}

/// Taylor degree used by the ridge construction: r when odd, r + 1 when even.
pub fn ridge_taylor_degree(r: f64) -> Result<usize> {
    if r.fract() != 0.0 || r < 1.0 {
        return Err(MoeError::input(format!("the ridge construction needs an integer r >= 1, got {r}")));
    }
    let r = r as usize;
    Ok(if r % 2 == 1 { r } else { r + 1 })
}

/// Coefficients k_1..k_R (index α − 1) of
/// q(c) = Σ_α (1 + 2^α) σ^(α)(b) / (α! n^α) · c^α.
pub fn ridge_polynomial(spec: ExpertSpec, b: f64, r: f64, n: u64) -> Result<Vec<f64>> {
    let degree = ridge_taylor_degree(r)?;
    let act = spec.activation();
    let nf = n as f64;
    let mut coeffs = Vec::with_capacity(degree);
    let mut factorial = 1.0;
    for alpha in 1..=degree {
        factorial *= alpha as f64;
        let d = act.derivative(alpha, b)?;
        coeffs.push((1.0 + 2f64.powi(alpha as i32)) * d / (factorial * nf.powi(alpha as i32)));
    }
    Ok(coeffs)
}

/// q(c) from the coefficients of `ridge_polynomial`.
pub fn eval_q(coeffs: &[f64], c: f64) -> f64 {
    c * eval_q_over_c(coeffs, c)
}

fn eval_q_over_c(coeffs: &[f64], c: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, k| acc * c + k)
}

fn bisect(coeffs: &[f64], mut lo: f64, mut hi: f64) -> f64 {
    let mut flo = eval_q_over_c(coeffs, lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        let fm = eval_q_over_c(coeffs, mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm < 0.0) == (flo < 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Nonzero real root of q(c)/c with the smallest magnitude inside
/// 1e-6 ≤ |c| ≤ 1e3, found by a sign-change scan on a logarithmic grid for
/// each sign followed by bisection.
pub fn find_nonzero_root(coeffs: &[f64]) -> Option<f64> {
    let grid: Vec<f64> = (0..ROOT_SCAN_POINTS)
        .map(|i| {
            let t = i as f64 / (ROOT_SCAN_POINTS - 1) as f64;
            ROOT_SCAN_MIN * (ROOT_SCAN_MAX / ROOT_SCAN_MIN).powf(t)
        })
        .collect();
    let mut best: Option<f64> = None;
    for sign in [1.0, -1.0] {
        for w in grid.windows(2) {
            let (a, b) = (sign * w[0], sign * w[1]);
            let (fa, fb) = (eval_q_over_c(coeffs, a), eval_q_over_c(coeffs, b));
            if fa == 0.0 || (fa < 0.0) != (fb < 0.0) {
                let root = if fa == 0.0 { a } else { bisect(coeffs, a, b) };
                if best.is_none_or(|c| root.abs() < c.abs()) {
                    best = Some(root);
                }
                break;
            }
        }
    }
    best
}

/// Largest coefficient magnitude, the scale for the root residual check.
pub fn coefficient_scale(coeffs: &[f64]) -> f64 {
    coeffs.iter().fold(0.0, |m, k| m.max(k.abs()))
}

/// Ridge experts with a*_1 = 0: atom 1 is split into two half-weight atoms
/// with biases b*1 + c/n and b*1 + 2c/n. Returns the measure and c.
pub fn construct_gn_ridge(gstar: &MixingMeasure, n: u64, r: f64) -> Result<(MixingMeasure, f64)> {
    let spec = gstar.expert();
    let act = match spec {
        ExpertSpec::Ridge(act) => act,
        other => {
            return Err(MoeError::input(format!("the ridge construction needs ridge experts, got {other}")));
        }
    };
    check_index(n, r)?;
    let t = &gstar.atoms()[0];
    if t.a().iter().any(|&v| v != 0.0) {
        return Err(MoeError::input("the ridge construction needs a*_1 = 0"));
    }
    let coeffs = ridge_polynomial(spec, t.b(), r, n)?;
    let nf = n as f64;
    // q(c) depends on c only through c/n, so solve for s = c/n
    let scaled: Vec<f64> = coeffs.iter().enumerate().map(|(i, k)| k * nf.powi(i as i32 + 1)).collect();
    let infeasible = || {
        MoeError::Construction(format!(
            "no nonzero real root of q(c)/c with |c/n| <= {ROOT_SCAN_MAX} for activation {act}, b*1 = {}, r = {r}, n = {n}",
            t.b()
        ))
    };
    let s = find_nonzero_root(&scaled).ok_or_else(infeasible)?;
    let residual = eval_q(&scaled, s).abs();
    if residual > 1e-9 * coefficient_scale(&scaled) {
        return Err(MoeError::Construction(format!(
            "root c = {} of q leaves residual {residual:e} for activation {act}, b*1 = {}, r = {r}, n = {n}",
            s * nf,
            t.b()
        )));
    }
    let c = s * nf;
    let beta0 = (0.5 * t.weight()).ln();
    let mut atoms = vec![
        Atom::affine(beta0, t.beta1.clone(), t.a().to_vec(), t.b() + c / nf),
        Atom::affine(beta0, t.beta1.clone(), t.a().to_vec(), t.b() + 2.0 * c / nf),
    ];
    copy_rest(gstar, &mut atoms);
    Ok((MixingMeasure::new(spec, atoms)?, c))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioCurve {
    pub n_grid: Vec<u64>,
    pub ratios: Vec<f64>,
    pub losses: Vec<f64>,
    pub distances: Vec<f64>,
    /// Root c per grid point (ridge construction only).
    pub roots: Vec<Option<f64>>,
}

impl RatioCurve {
    pub fn strictly_decreasing(&self) -> bool {
        self.ratios.windows(2).all(|w| w[1] < w[0])
    }
}

/// Builds G_n for each n and records D3,r, the L²(μ) distance and their ratio.
pub fn ratio_curve(
    gstar: &MixingMeasure,
    r: f64,
    n_grid: &[u64],
    mu: &InputDistribution,
    construction: Construction,
) -> Result<RatioCurve> {
    if n_grid.is_empty() || n_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(MoeError::input("n grid must be nonempty and strictly increasing"));
    }
    let points: Vec<(f64, f64, Option<f64>)> = n_grid
        .par_iter()
        .map(|&n| {
            let (gn, root) = match construction {
                Construction::Polynomial => (construct_gn_polynomial(gstar, n, r)?, None),
                Construction::Ridge => {
                    let (g, c) = construct_gn_ridge(gstar, n, r)?;
                    (g, Some(c))
                }
            };
            let loss = loss_d3(&gn, gstar, r)?.total;
            if !(loss > 0.0) {
                return Err(MoeError::Construction(format!("witness at n = {n} coincides with the truth")));
            }
            let dist = l2_distance(&gn, gstar, mu, DEFAULT_QUADRATURE_NODES)?;
            Ok((loss, dist, root))
        })
        .collect::<Result<_>>()?;
    Ok(RatioCurve {
        n_grid: n_grid.to_vec(),
        ratios: points.iter().map(|p| p.1 / p.0).collect(),
        losses: points.iter().map(|p| p.0).collect(),
        distances: points.iter().map(|p| p.1).collect(),
        roots: points.iter().map(|p| p.2).collect(),
    })
}

/// The reference truth with atom 1 moved to slope 0 and bias `b1`, the
/// zero-slope setting the ridge construction needs.
pub fn zero_slope_truth(spec: ExpertSpec, b1: f64) -> Result<MixingMeasure> {
    let base = MixingMeasure::reference_truth(spec)?;
    let mut atoms = base.atoms().to_vec();
    let d = base.dim();
    atoms[0] = Atom::affine(atoms[0].beta0, atoms[0].beta1.clone(), vec![0.0; d], b1);
    MixingMeasure::new(spec, atoms)
}
