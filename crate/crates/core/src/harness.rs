//! Convergence-rate sweeps: for every (n, replication) generate data, fit
//! from a perturbed truth, measure the error against the truth, aggregate
//! per n and fit a log-log slope.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::generate_dataset;
use crate::error::{MoeError, Result};
use crate::estimate::{fit_sgd, gauge_fix, init_near_truth, FitConfig};
use crate::losses::{l2_distance, InputDistribution, VoronoiLoss, DEFAULT_MONTE_CARLO_DRAWS, DEFAULT_QUADRATURE_NODES};
use crate::model::{ExpertSpec, MixingMeasure};
use crate::seed::{self, Stage};

pub const THREADS_ENV: &str = "MOE_LAB_THREADS";
/// Largest tolerated fraction of diverged replications.
pub const MAX_DIVERGED_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    /// k = k*
    Exact,
    /// k = k* + 1
    Over,
}

impl std::str::FromStr for Setting {
    type Err = MoeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Setting::Exact),
            "over" => Ok(Setting::Over),
            other => Err(MoeError::input(format!("unknown setting `{other}` (expected exact or over)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// The configured Voronoi loss against the truth.
    Voronoi,
    /// ‖f_Ĝ − f_G*‖ in L²(μ).
    L2,
}

impl std::str::FromStr for Metric {
    type Err = MoeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "voronoi" => Ok(Metric::Voronoi),
            "l2" => Ok(Metric::L2),
            other => Err(MoeError::input(format!("unknown metric `{other}` (expected voronoi or l2)"))),
        }
    }
}

/// `count` sizes log-spaced over [lo, hi], rounded to integers.
pub fn log_grid(lo: usize, hi: usize, count: usize) -> Vec<usize> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp().round() as usize)
        .collect()
}

/// 20 sizes in [10⁴, 10⁵].
pub fn full_grid() -> Vec<usize> {
    log_grid(10_000, 100_000, 20)
}

/// 10 sizes in [10³, 10⁴].
pub fn quick_grid() -> Vec<usize> {
    log_grid(1_000, 10_000, 10)
}

pub const FULL_REPLICATIONS: usize = 20;
pub const QUICK_REPLICATIONS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub family: ExpertSpec,
    pub truth: MixingMeasure,
    pub setting: Setting,
    pub n_grid: Vec<usize>,
    pub replications: usize,
    pub loss: VoronoiLoss,
    pub noise_var: f64,
    /// Template; `k` is overridden by the setting and `seed` per replication.
    pub fit: FitConfig,
    pub master_seed: u64,
}

impl SweepConfig {
    /// Reference truth, full grid and the family's customary loss: D2 for
    /// ridge experts, D3 with r = 1 otherwise.
    pub fn reference(family: ExpertSpec, setting: Setting) -> Result<Self> {
        let truth = MixingMeasure::reference_truth(family)?;
        let loss = match family {
            ExpertSpec::Ridge(_) | ExpertSpec::NormalizedRidge(_) => VoronoiLoss::D2,
            _ => VoronoiLoss::D3 { r: 1.0 },
        };
        let mut cfg = SweepConfig {
            family,
            truth,
            setting,
            n_grid: full_grid(),
            replications: FULL_REPLICATIONS,
            loss,
            noise_var: 1.0,
            fit: FitConfig::default(),
            master_seed: 0,
        };
        cfg.fit.k = cfg.k();
        Ok(cfg)
    }

    pub fn quick(mut self) -> Self {
        self.n_grid = quick_grid();
        self.replications = QUICK_REPLICATIONS;
        self
    }

    /// Fitted component budget implied by the setting.
    pub fn k(&self) -> usize {
        match self.setting {
            Setting::Exact => self.truth.num_atoms(),
            Setting::Over => self.truth.num_atoms() + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MoeError::Config(m));
        if self.truth.expert() != self.family {
            return bad(format!("truth uses {} experts but family is {}", self.truth.expert(), self.family));
        }
        if self.n_grid.is_empty() || self.n_grid.windows(2).any(|w| w[1] <= w[0]) || self.n_grid[0] == 0 {
            return bad("n_grid must be nonempty, positive and strictly increasing".into());
        }
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            return bad("noise_var must be finite and >= 0".into());
        }
        let mut fit = self.fit.clone();
        fit.k = self.k();
        fit.validate()
    }

    fn input_distribution(&self) -> InputDistribution {
        InputDistribution::Uniform { dim: self.truth.dim() }
    }
}

/// Outcome of one (n, replication) fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub n: usize,
    pub rep: usize,
    pub seed: u64,
    /// Configured Voronoi loss; None when the fit diverged.
    pub loss: Option<f64>,
    /// L² distance; None when the fit diverged.
    pub l2: Option<f64>,
    pub diverged: bool,
}

impl ReplicationRecord {
    pub fn value(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Voronoi => self.loss,
            Metric::L2 => self.l2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeSummary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator); 0 for a single value.
    pub std: f64,
    pub count: usize,
    pub diverged: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: SweepConfig,
    pub metric: Metric,
    pub records: Vec<ReplicationRecord>,
    pub per_n: Vec<SizeSummary>,
    /// OLS fit of log(mean) on log(n); None when undefined.
    pub slope: Option<SlopeFit>,
    /// Why the slope was omitted.
    pub slope_flag: Option<String>,
    /// Slope of each replication index across n, for dispersion diagnostics.
    pub replication_slopes: Vec<Option<f64>>,
    pub diverged: usize,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// Ordinary least squares of log(value) on log(n).
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 2 {
        return Err(MoeError::input("a slope needs at least two points"));
    }
    if let Some(p) = points.iter().find(|p| !(p.1 > 0.0) || !(p.0 > 0.0) || !p.1.is_finite()) {
        return Err(MoeError::input(format!("log-log fit needs positive finite values, got ({}, {})", p.0, p.1)));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(MoeError::input("a slope needs at least two distinct n values"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(SlopeFit {
        slope,
        intercept,
        r_squared,
    })
}

/// Rayon pool sized by MOE_LAB_THREADS (default: all hardware threads).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&t| t > 0)
            .ok_or_else(|| MoeError::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| MoeError::Config(format!("cannot start worker pool: {e}")))
}

fn run_one(cfg: &SweepConfig, n: usize, rep: usize) -> Result<ReplicationRecord> {
    let rep_seed = seed::derive_seed(cfg.master_seed, &[n as u64, rep as u64]);
    let mu = cfg.input_distribution();
    let data = generate_dataset(&cfg.truth, n, cfg.noise_var, &mu, seed::stage_seed(rep_seed, Stage::Data))?;
    let mut fit_cfg = cfg.fit.clone();
    fit_cfg.k = cfg.k();
    fit_cfg.seed = seed::stage_seed(rep_seed, Stage::Train);
    let init = init_near_truth(&cfg.truth, fit_cfg.k, fit_cfg.init_spread, seed::stage_seed(rep_seed, Stage::Init))?;
    match fit_sgd(&data, &init, Some(&cfg.truth), &fit_cfg) {
        Ok(fit) => {
            let g = gauge_fix(&fit.g_hat, &cfg.truth, fit_cfg.gauge)?;
            let loss = cfg.loss.evaluate(&g, &cfg.truth)?.total;
            let nodes = if cfg.truth.dim() == 1 {
                DEFAULT_QUADRATURE_NODES
            } else {
                DEFAULT_MONTE_CARLO_DRAWS
            };
            let l2 = l2_distance(&g, &cfg.truth, &mu, nodes)?;
            Ok(ReplicationRecord {
                n,
                rep,
                seed: rep_seed,
                loss: Some(loss),
                l2: Some(l2),
                diverged: false,
            })
        }
        Err(MoeError::Divergence { .. }) => Ok(ReplicationRecord {
            n,
            rep,
            seed: rep_seed,
            loss: None,
            l2: None,
            diverged: true,
        }),
        Err(e) => Err(e),
    }
}

/// Runs every (n, replication) fit and returns the records in grid order.
pub fn sweep_records(cfg: &SweepConfig) -> Result<Vec<ReplicationRecord>> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = cfg
        .n_grid
        .iter()
        .flat_map(|&n| (0..cfg.replications).map(move |r| (n, r)))
        .collect();
    let pool = thread_pool()?;
    let records: Vec<ReplicationRecord> =
        pool.install(|| jobs.par_iter().map(|&(n, r)| run_one(cfg, n, r)).collect::<Result<_>>())?;
    let diverged = records.iter().filter(|r| r.diverged).count();
    if diverged as f64 > MAX_DIVERGED_FRACTION * records.len() as f64 {
        return Err(MoeError::SweepDiverged {
            diverged,
            total: records.len(),
        });
    }
    Ok(records)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Aggregates records into a report for the chosen metric.
pub fn summarize(cfg: &SweepConfig, records: Vec<ReplicationRecord>, metric: Metric, wall_time_secs: f64) -> SweepReport {
    let mut per_n = Vec::with_capacity(cfg.n_grid.len());
    for &n in &cfg.n_grid {
        let rows: Vec<&ReplicationRecord> = records.iter().filter(|r| r.n == n).collect();
        let values: Vec<f64> = rows.iter().filter_map(|r| r.value(metric)).collect();
        let diverged = rows.iter().filter(|r| r.diverged).count();
        if values.is_empty() {
            per_n.push(SizeSummary {
                n,
                mean: f64::NAN,
                std: f64::NAN,
                count: 0,
                diverged,
            });
            continue;
        }
        let (mean, std) = mean_std(&values);
        per_n.push(SizeSummary {
            n,
            mean,
            std,
            count: values.len(),
            diverged,
        });
    }
    let points: Vec<(f64, f64)> = per_n.iter().filter(|s| s.count > 0).map(|s| (s.n as f64, s.mean)).collect();
    let (slope, slope_flag) = if points.len() < 2 {
        (None, Some("fewer than two sample sizes with results".to_string()))
    } else {
        match fit_loglog_slope(&points) {
            Ok(fit) => (Some(fit), None),
            Err(_) => (None, Some("mean values are not all positive".to_string())),
        }
    };
    let replication_slopes = (0..cfg.replications)
        .map(|rep| {
            let pts: Vec<(f64, f64)> = records
                .iter()
                .filter(|r| r.rep == rep)
                .filter_map(|r| r.value(metric).map(|v| (r.n as f64, v)))
                .collect();
            fit_loglog_slope(&pts).ok().map(|f| f.slope)
        })
        .collect();
    let diverged = records.iter().filter(|r| r.diverged).count();
    SweepReport {
        config: cfg.clone(),
        metric,
        records,
        per_n,
        slope,
        slope_flag,
        replication_slopes,
        diverged,
        wall_time_secs,
    }
}

/// Voronoi-loss sweep.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepReport> {
    let start = Instant::now();
    let records = sweep_records(cfg)?;
    Ok(summarize(cfg, records, Metric::Voronoi, start.elapsed().as_secs_f64()))
}

/// Same pipeline recording the L² distance of the fitted regression function.
pub fn l2_rate_sweep(cfg: &SweepConfig) -> Result<SweepReport> {
    let start = Instant::now();
    let records = sweep_records(cfg)?;
    Ok(summarize(cfg, records, Metric::L2, start.elapsed().as_secs_f64()))
}

/// Both reports from one set of fits.
pub fn run_sweep_both(cfg: &SweepConfig) -> Result<(SweepReport, SweepReport)> {
    let start = Instant::now();
    let records = sweep_records(cfg)?;
    let secs = start.elapsed().as_secs_f64();
    Ok((
        summarize(cfg, records.clone(), Metric::Voronoi, secs),
        summarize(cfg, records, Metric::L2, secs),
    ))
}
