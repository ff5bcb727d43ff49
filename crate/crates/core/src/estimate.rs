//! Least-squares fitting of a mixing measure by mini-batch SGD.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{MoeError, Result};
use crate::losses::voronoi_assign;
use crate::model::{Atom, FlatModel, MixingMeasure};
use crate::seed::{self, Stage};

/// How the softmax translation gauge of a fitted measure is fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GaugeRule {
    /// Subtract the last fitted atom's (β0, β1) from every atom.
    PinLast,
    /// Translate so that the Voronoi cell of the last true atom carries that
    /// atom's gate: aggregated mass exp(β*0) and mass-weighted slope β*1.
    PostHocTranslate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    /// Fitted component budget.
    pub k: usize,
    pub learning_rate: f64,
    /// Mini-batch size; `None` uses the whole dataset in every step.
    pub batch_size: Option<usize>,
    pub epochs: usize,
    /// Multiply the learning rate by `lr_decay` every `lr_decay_every` epochs.
    pub lr_decay_every: usize,
    pub lr_decay: f64,
    /// Standard deviation of the Gaussian initialization perturbation.
    pub init_spread: f64,
    pub seed: u64,
    pub gauge: GaugeRule,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            k: 2,
            learning_rate: 0.5,
            batch_size: None,
            epochs: 400,
            lr_decay_every: 400,
            lr_decay: 1.0,
            init_spread: 0.01,
            seed: 0,
            gauge: GaugeRule::PostHocTranslate,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(MoeError::Config(msg.to_string()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.lr_decay_every == 0 || !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return bad("learning-rate decay must have a positive period and factor");
        }
        if !(self.init_spread >= 0.0 && self.init_spread.is_finite()) {
            return bad("init_spread must be finite and >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub g_hat: MixingMeasure,
    pub final_objective: f64,
    /// Full-data objective after each epoch.
    pub objective_trace: Vec<f64>,
    /// Number of parameter updates performed.
    pub iterations: usize,
}

/// Mean squared residual (1/n) Σ (Y_i − f_G(X_i))².
pub fn objective(g: &MixingMeasure, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(MoeError::input("objective of an empty dataset"));
    }
    if data.dim() != g.dim() {
        return Err(MoeError::input("dataset and model dimensions differ"));
    }
    let mut model = FlatModel::new(g.expert(), g.dim(), g.num_atoms());
    Ok(flat_objective(&mut model, &g.to_flat(), data))
}

fn flat_objective(model: &mut FlatModel, params: &[f64], data: &Dataset) -> f64 {
    let mut total = 0.0;
    for (x, &y) in data.inputs().zip(data.responses()) {
        let r = y - model.forward(params, x);
        total += r * r;
    }
    total / data.len() as f64
}

/// Random initialization around the truth: the k fitted indices are split into
/// k* nonempty cells at random and every parameter of a fitted atom in cell j
/// is the matching parameter of true atom j plus N(0, spread²) noise.
pub fn init_near_truth(gstar: &MixingMeasure, k: usize, spread: f64, seed: u64) -> Result<MixingMeasure> {
    let kstar = gstar.num_atoms();
    if k < kstar {
        return Err(MoeError::input(format!(
            "component budget k = {k} is below the true order {kstar}"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(MoeError::input("initialization spread must be finite and >= 0"));
    }
    let mut rng = seed::rng(seed);
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng);
    let mut cell_of = vec![0; k];
    for (pos, &i) in order.iter().enumerate() {
        cell_of[i] = if pos < kstar { pos } else { rng.random_range(0..kstar) };
    }
    let mut jitter = |v: f64| {
        let z: f64 = StandardNormal.sample(&mut rng);
        v + spread * z
    };
    let atoms = cell_of
        .iter()
        .map(|&j| {
            let t = &gstar.atoms()[j];
            Atom {
                beta0: jitter(t.beta0),
                beta1: t.beta1.iter().map(|&v| jitter(v)).collect(),
                eta: t.eta.iter().map(|&v| jitter(v)).collect(),
            }
        })
        .collect();
    MixingMeasure::new(gstar.expert(), atoms)
}

/// Initialization for any budget k >= 1: [`init_near_truth`] when k >= k*,
/// otherwise k distinct true atoms picked at random and perturbed the same way.
pub fn init_for_budget(gstar: &MixingMeasure, k: usize, spread: f64, seed: u64) -> Result<MixingMeasure> {
    if k == 0 {
        return Err(MoeError::input("component budget k must be at least 1"));
    }
    if k >= gstar.num_atoms() {
        return init_near_truth(gstar, k, spread, seed);
    }
    let mut rng = seed::rng(seed::derive_seed(seed, &[k as u64]));
    let mut picks: Vec<usize> = (0..gstar.num_atoms()).collect();
    picks.shuffle(&mut rng);
    picks.truncate(k);
    picks.sort_unstable();
    let subset = MixingMeasure::new(gstar.expert(), picks.iter().map(|&j| gstar.atoms()[j].clone()).collect())?;
    init_near_truth(&subset, k, spread, seed)
}

/// Removes the softmax translation freedom from `g`; f_G is unchanged.
pub fn gauge_fix(g: &MixingMeasure, gstar: &MixingMeasure, rule: GaugeRule) -> Result<MixingMeasure> {
    let d = g.dim();
    let (shift0, shift1) = match rule {
        GaugeRule::PinLast => {
            let last = g.atoms().last().expect("measures are nonempty");
            (last.beta0, last.beta1.clone())
        }
        GaugeRule::PostHocTranslate => {
            let assignment = voronoi_assign(g, gstar)?;
            let target = gstar.atoms().last().expect("measures are nonempty");
            let mut cell = assignment.cells.last().cloned().unwrap_or_default();
            if cell.is_empty() {
                // nearest fitted atom to ω*_{k*}
                let nearest = g
                    .atoms()
                    .iter()
                    .enumerate()
                    .map(|(i, a)| {
                        let dist: f64 = a.location().zip(target.location()).map(|(x, y)| (x - y) * (x - y)).sum();
                        (i, dist)
                    })
                    .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
                cell.push(nearest.0);
            }
            // log-sum-exp of the cell's β0 and the mass-weighted mean β1
            let top = cell.iter().map(|&i| g.atoms()[i].beta0).fold(f64::NEG_INFINITY, f64::max);
            let rel: Vec<f64> = cell.iter().map(|&i| (g.atoms()[i].beta0 - top).exp()).collect();
            let mass: f64 = rel.iter().sum();
            let log_mass = top + mass.ln();
            let mut slope = vec![0.0; d];
            for (&i, w) in cell.iter().zip(&rel) {
                for (s, b) in slope.iter_mut().zip(&g.atoms()[i].beta1) {
                    *s += w / mass * b;
                }
            }
            let shift1 = slope.iter().zip(&target.beta1).map(|(s, t)| s - t).collect();
            (log_mass - target.beta0, shift1)
        }
    };
    Ok(g.translated(shift0, &shift1))
}

/// Mini-batch SGD on the mean squared residual, starting from `init`.
///
/// `truth` is only consulted by [`GaugeRule::PostHocTranslate`]; without it
/// that rule falls back to [`GaugeRule::PinLast`].
pub fn fit_sgd(
    data: &Dataset,
    init: &MixingMeasure,
    truth: Option<&MixingMeasure>,
    cfg: &FitConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(MoeError::input("cannot fit an empty dataset"));
    }
    if data.dim() != init.dim() {
        return Err(MoeError::input("dataset and model dimensions differ"));
    }
    let batch_size = cfg.batch_size.unwrap_or(data.len());
    if batch_size > data.len() {
        return Err(MoeError::Config(format!(
            "batch_size {batch_size} exceeds the sample size {}",
            data.len()
        )));
    }
    let expert = init.expert();
    let d = init.dim();
    let gauge = |params: &[f64]| -> Result<Vec<f64>> {
        let g = MixingMeasure::from_flat(expert, d, params)?;
        let fixed = match (cfg.gauge, truth) {
            (GaugeRule::PostHocTranslate, Some(t)) => gauge_fix(&g, t, GaugeRule::PostHocTranslate)?,
            _ => gauge_fix(&g, &g, GaugeRule::PinLast)?,
        };
        Ok(fixed.to_flat())
    };

    let mut params = gauge(&init.to_flat())?;
    let mut model = FlatModel::new(expert, d, init.num_atoms());
    let mut grad = vec![0.0; params.len()];
    let initial = flat_objective(&mut model, &params, data);
    let mut rng = seed::rng(seed::stage_seed(cfg.seed, Stage::Train));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut iterations = 0;

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate * cfg.lr_decay.powi((epoch / cfg.lr_decay_every) as i32);
        order.shuffle(&mut rng);
        for batch in order.chunks(batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            // d/dθ of (1/B) Σ (y − f)²
            let scale = -2.0 / batch.len() as f64;
            for &i in batch {
                let x = data.input(i);
                let f = model.forward(&params, x);
                model.accumulate_grad(x, f, scale * (data.response(i) - f), &mut grad);
            }
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= lr * g;
            }
            iterations += 1;
        }
        let obj = flat_objective(&mut model, &params, data);
        if !obj.is_finite() || obj > 1e6 * initial.max(f64::MIN_POSITIVE) {
            return Err(MoeError::Divergence { epoch, objective: obj });
        }
        params = gauge(&params)?;
        trace.push(obj);
    }

    Ok(FitResult {
        g_hat: MixingMeasure::from_flat(expert, d, &params)?,
        final_objective: *trace.last().expect("epochs >= 1"),
        objective_trace: trace,
        iterations,
    })
}
