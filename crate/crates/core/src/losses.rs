//! Voronoi cells between a fitted and a true mixing measure, the Voronoi
//! losses D1, D2 and D3,r, and the L²(μ) distance between regression
//! functions.
//!
//! All losses share one shape: a weight term
//! `Σ_j |Σ_{i∈A_j} exp(β0_i) − exp(β*0_j)|` plus per-cell parameter terms
//! weighted by the fitted exp(β0_i). Empty cells contribute only through the
//! weight term.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};
use crate::model::{Atom, MixingMeasure};
use crate::quadrature::GaussLegendre;
use crate::seed;

pub const DEFAULT_QUADRATURE_NODES: usize = 256;
pub const DEFAULT_MONTE_CARLO_DRAWS: usize = 65_536;
const MONTE_CARLO_SEED: u64 = 0x4D6F_452D_4C32;

/// Partition of fitted atoms into cells around the true atoms.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoronoiAssignment {
    /// True-atom index for each fitted atom.
    pub cell_of: Vec<usize>,
    /// Fitted atoms of each true atom, in ascending order.
    pub cells: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub weight_term: f64,
    pub per_cell_terms: Vec<f64>,
    pub total: f64,
}

fn check_compatible(g: &MixingMeasure, gstar: &MixingMeasure) -> Result<()> {
    if g.expert() != gstar.expert() {
        return Err(MoeError::input(format!(
            "expert families differ: {} vs {}",
            g.expert(),
            gstar.expert()
        )));
    }
    if g.dim() != gstar.dim() {
        return Err(MoeError::input(format!(
            "input dimensions differ: {} vs {}",
            g.dim(),
            gstar.dim()
        )));
    }
    Ok(())
}

fn sq_dist(a: &Atom, b: &Atom) -> f64 {
    a.location().zip(b.location()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Assigns each fitted atom to the nearest true atom in (β1, η); ties go to
/// the lowest true index.
pub fn voronoi_assign(g: &MixingMeasure, gstar: &MixingMeasure) -> Result<VoronoiAssignment> {
    check_compatible(g, gstar)?;
    let mut cells = vec![Vec::new(); gstar.num_atoms()];
    let cell_of: Vec<usize> = g
        .atoms()
        .iter()
        .enumerate()
        .map(|(i, atom)| {
            let mut best = 0;
            let mut best_dist = f64::INFINITY;
            for (j, truth) in gstar.atoms().iter().enumerate() {
                let dist = sq_dist(atom, truth);
                if dist < best_dist {
                    best = j;
                    best_dist = dist;
                }
            }
            cells[best].push(i);
            best
        })
        .collect();
    Ok(VoronoiAssignment { cell_of, cells })
}

/// Which Voronoi loss to compute.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum VoronoiLoss {
    D1,
    D2,
    D3 { r: f64 },
}

impl VoronoiLoss {
    pub fn evaluate(self, g: &MixingMeasure, gstar: &MixingMeasure) -> Result<LossBreakdown> {
        match self {
            VoronoiLoss::D1 => loss_d1(g, gstar),
            VoronoiLoss::D2 => loss_d2(g, gstar),
            VoronoiLoss::D3 { r } => loss_d3(g, gstar, r),
        }
    }
}

impl fmt::Display for VoronoiLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VoronoiLoss::D1 => f.write_str("d1"),
            VoronoiLoss::D2 => f.write_str("d2"),
            VoronoiLoss::D3 { r } => write!(f, "d3:{r}"),
        }
    }
}

impl FromStr for VoronoiLoss {
    type Err = MoeError;

    /// `d1`, `d2`, or `d3:<r>` (`d3` alone means r = 1).
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "d1" => Ok(VoronoiLoss::D1),
            "d2" => Ok(VoronoiLoss::D2),
            "d3" => Ok(VoronoiLoss::D3 { r: 1.0 }),
            other => other
                .strip_prefix("d3:")
                .and_then(|r| r.parse::<f64>().ok())
                .map(|r| VoronoiLoss::D3 { r })
                .ok_or_else(|| MoeError::input(format!("unknown loss `{other}`"))),
        }
    }
}

/// Shared skeleton: `term(fitted, truth, singleton)` is the bracketed
/// per-atom parameter discrepancy, multiplied here by exp(β0_i).
fn voronoi_loss<F>(g: &MixingMeasure, gstar: &MixingMeasure, term: F) -> Result<LossBreakdown>
where
    F: Fn(&Atom, &Atom, bool) -> f64,
{
    let assignment = voronoi_assign(g, gstar)?;
    let mut weight_term = 0.0;
    let mut per_cell_terms = Vec::with_capacity(gstar.num_atoms());
    for (j, cell) in assignment.cells.iter().enumerate() {
        let truth = &gstar.atoms()[j];
        let mass: f64 = cell.iter().map(|&i| g.atoms()[i].weight()).sum();
        weight_term += (mass - truth.weight()).abs();
        let singleton = cell.len() == 1;
        per_cell_terms.push(
            cell.iter()
                .map(|&i| {
                    let atom = &g.atoms()[i];
                    atom.weight() * term(atom, truth, singleton)
                })
                .sum(),
        );
    }
    let total = weight_term + per_cell_terms.iter().sum::<f64>();
    Ok(LossBreakdown {
        weight_term,
        per_cell_terms,
        total,
    })
}

/// D1: first powers of ‖Δβ1‖ and ‖Δη‖ in singleton cells, squares elsewhere.
pub fn loss_d1(g: &MixingMeasure, gstar: &MixingMeasure) -> Result<LossBreakdown> {
    voronoi_loss(g, gstar, |atom, truth, singleton| {
        let db = norm_diff(&atom.beta1, &truth.beta1);
        let de = norm_diff(&atom.eta, &truth.eta);
        if singleton {
            db + de
        } else {
            db * db + de * de
        }
    })
}

fn require_affine(g: &MixingMeasure) -> Result<()> {
    if g.expert().has_affine_layout() {
        Ok(())
    } else {
        Err(MoeError::input(format!(
            "{} experts have no (a, b) parameter layout",
            g.expert()
        )))
    }
}

/// D2: like D1 with η split into its slope `a` and intercept `b`.
pub fn loss_d2(g: &MixingMeasure, gstar: &MixingMeasure) -> Result<LossBreakdown> {
    require_affine(g)?;
    voronoi_loss(g, gstar, |atom, truth, singleton| {
        let db = norm_diff(&atom.beta1, &truth.beta1);
        let da = norm_diff(atom.a(), truth.a());
        let dbias = (atom.b() - truth.b()).abs();
        if singleton {
            db + da + dbias
        } else {
            db * db + da * da + dbias * dbias
        }
    })
}

/// D3,r: r-th powers of every parameter gap, regardless of cell size.
pub fn loss_d3(g: &MixingMeasure, gstar: &MixingMeasure, r: f64) -> Result<LossBreakdown> {
    if !(r >= 1.0 && r.is_finite()) {
        return Err(MoeError::input(format!("D3 exponent r must be a finite value >= 1, got {r}")));
    }
    require_affine(g)?;
    voronoi_loss(g, gstar, |atom, truth, _| {
        let db = norm_diff(&atom.beta1, &truth.beta1);
        let da = norm_diff(atom.a(), truth.a());
        let dbias = (atom.b() - truth.b()).abs();
        db.powf(r) + da.powf(r) + dbias.powf(r)
    })
}

/// Input distribution μ against which L² distances are taken.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputDistribution {
    /// Uniform on [0, 1]^dim.
    Uniform { dim: usize },
    /// Empirical measure of an explicit sample set.
    Samples(Vec<Vec<f64>>),
}

impl InputDistribution {
    pub fn dim(&self) -> Option<usize> {
        match self {
            InputDistribution::Uniform { dim } => Some(*dim),
            InputDistribution::Samples(s) => s.first().map(Vec::len),
        }
    }
}

/// ‖f_G − f_G*‖ in L²(μ). For Uniform[0, 1] in one dimension this uses an
/// `nodes`-point Gauss–Legendre rule; in higher dimension `nodes` fixed-seed
/// Monte Carlo draws.
pub fn l2_distance(
    g: &MixingMeasure,
    gstar: &MixingMeasure,
    mu: &InputDistribution,
    nodes: usize,
) -> Result<f64> {
    check_compatible(g, gstar)?;
    if mu.dim() != Some(g.dim()) {
        return Err(MoeError::input(format!(
            "input distribution dimension {:?} does not match model dimension {}",
            mu.dim(),
            g.dim()
        )));
    }
    if nodes == 0 {
        return Err(MoeError::input("at least one quadrature node is required"));
    }
    let sq = |x: &[f64]| -> Result<f64> {
        let diff = g.eval(x)? - gstar.eval(x)?;
        Ok(diff * diff)
    };
    let mean_sq = match mu {
        InputDistribution::Uniform { dim: 1 } => {
            let rule = GaussLegendre::cached(nodes);
            let mut total = 0.0;
            for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
                total += w * sq(&[x])?;
            }
            total
        }
        InputDistribution::Uniform { dim } => {
            let mut rng = seed::rng(MONTE_CARLO_SEED);
            let mut x = vec![0.0; *dim];
            let mut total = 0.0;
            for _ in 0..nodes {
                x.iter_mut().for_each(|v| *v = rng.random::<f64>());
                total += sq(&x)?;
            }
            total / nodes as f64
        }
        InputDistribution::Samples(samples) => {
            let mut total = 0.0;
            for x in samples {
                total += sq(x)?;
            }
            total / samples.len() as f64
        }
    };
    Ok(mean_sq.sqrt())
}
