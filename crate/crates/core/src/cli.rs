//! Command-line front end: `fit`, `sweep`, `check` and `adversarial`.
//!
//! Settings resolve as flags, then keys of the `--config` JSON document,
//! then built-in defaults. Every successful command writes `summary.json`
//! holding the effective configuration.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::adversarial::{ratio_curve, zero_slope_truth, Construction};
use crate::data::generate_dataset;
use crate::error::{MoeError, Result};
use crate::estimate::{fit_sgd, gauge_fix, init_for_budget, FitConfig, GaugeRule};
use crate::harness::{self, Metric, Setting, SweepConfig};
use crate::identify::{self, CheckConfig, FamilyMode, IndependenceVerdict};
use crate::losses::{l2_distance, InputDistribution, VoronoiLoss, DEFAULT_QUADRATURE_NODES};
use crate::model::{Activation, ExpertSpec, MixingMeasure};
use crate::report::{self, PlotPoint};
use crate::seed::{self, Stage};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_OPTIMIZATION: i32 = 3;
pub const EXIT_CAPABILITY: i32 = 4;
pub const EXIT_CONSTRUCTION: i32 = 5;

/// Exit code of the failure class an error belongs to.
pub fn exit_code(err: &MoeError) -> i32 {
    match err {
        MoeError::Input(_) | MoeError::Config(_) | MoeError::Domain(_) => EXIT_CONFIG,
        MoeError::Divergence { .. } | MoeError::SweepDiverged { .. } => EXIT_OPTIMIZATION,
        MoeError::Capability(_) => EXIT_CAPABILITY,
        MoeError::Construction(_) => EXIT_CONSTRUCTION,
        MoeError::Io { .. } => EXIT_IO,
    }
}

#[derive(Parser, Debug)]
#[command(name = "moe-lab", version, about = "Softmax-gated mixture-of-experts rate experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON configuration document
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit one dataset and write the fitted measure and objective trace
    Fit(FitArgs),
    /// Run a convergence-rate sweep over sample sizes and replications
    Sweep(SweepArgs),
    /// Rank-test an expert family or activation
    Check(CheckArgs),
    /// Trace the ratio curve of a slow-rate witness sequence
    Adversarial(AdversarialArgs),
}

#[derive(Args, Debug, Default)]
pub struct FitFlags {
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr_decay_every: Option<usize>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub init_spread: Option<f64>,
    /// pin-last or post-hoc-translate
    #[arg(long)]
    pub gauge: Option<String>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// linear, poly<p>, ridge-<act>, normalized-ridge-<act>
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub noise_var: Option<f64>,
    /// d1, d2 or d3:<r>
    #[arg(long)]
    pub loss: Option<String>,
    #[command(flatten)]
    pub fit: FitFlags,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub family: Option<String>,
    /// exact or over
    #[arg(long)]
    pub setting: Option<String>,
    /// 10 sizes in [1e3, 1e4] with 10 replications
    #[arg(long)]
    pub quick: bool,
    /// voronoi or l2
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub replications: Option<usize>,
    /// Comma-separated sample sizes
    #[arg(long, value_delimiter = ',')]
    pub n_grid: Option<Vec<usize>>,
    #[arg(long)]
    pub noise_var: Option<f64>,
    #[command(flatten)]
    pub fit: FitFlags,
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    #[arg(long)]
    pub family: Option<String>,
    /// sigmoid, tanh, gelu, poly<p>
    #[arg(long)]
    pub activation: Option<String>,
    /// identifiability or independence
    #[arg(long)]
    pub mode: Option<String>,
    /// Single component count; default checks k = 1, 2, 3
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub trials: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AdversarialArgs {
    /// linear or ridge-<act>
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub r: Option<f64>,
    /// Bias of the zero-slope first atom (ridge construction)
    #[arg(long)]
    pub b1: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub n_grid: Option<Vec<u64>>,
}

/// Fit-hyperparameter keys accepted under `"fit"` in a config document.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitFile {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub lr_decay_every: Option<usize>,
    pub lr_decay: Option<f64>,
    pub init_spread: Option<f64>,
    pub gauge: Option<GaugeRule>,
    /// Must match the component budget the command uses.
    pub k: Option<usize>,
    /// Ignored: training seeds always derive from `master_seed`. Accepted so
    /// that an echoed configuration loads back.
    pub seed: Option<u64>,
}

/// The `--config` document. Every key is optional; unknown keys are errors.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Option<String>,
    pub family: Option<ExpertSpec>,
    /// Activation name for independence checks, e.g. "tanh".
    pub activation: Option<String>,
    pub truth: Option<MixingMeasure>,
    pub k: Option<usize>,
    /// Component counts for `check`.
    pub k_values: Option<Vec<usize>>,
    pub n: Option<usize>,
    pub n_grid: Option<Vec<usize>>,
    pub replications: Option<usize>,
    pub setting: Option<Setting>,
    pub loss: Option<VoronoiLoss>,
    pub metric: Option<Metric>,
    pub quick: Option<bool>,
    pub noise_var: Option<f64>,
    pub fit: Option<FitFile>,
    pub master_seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub mode: Option<FamilyMode>,
    pub threshold: Option<f64>,
    pub trials: Option<usize>,
    pub dim: Option<usize>,
    pub r: Option<f64>,
    pub b1: Option<f64>,
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| MoeError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| MoeError::Config(format!("{}: {e}", path.display())))
}

fn parse<T: std::str::FromStr<Err = MoeError>>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|e: MoeError| MoeError::Config(format!("{key}: {e}")))
}

fn resolve_fit(base: FitConfig, k: usize, file: Option<&FitFile>, flags: &FitFlags) -> Result<FitConfig> {
    let f = file.cloned().unwrap_or_default();
    if let Some(fk) = f.k.filter(|&fk| fk != k) {
        return Err(MoeError::Config(format!("fit.k = {fk} disagrees with the component budget {k}")));
    }
    let gauge = match &flags.gauge {
        Some(g) => match g.as_str() {
            "pin-last" => GaugeRule::PinLast,
            "post-hoc-translate" => GaugeRule::PostHocTranslate,
            other => return Err(MoeError::Config(format!("gauge: unknown rule `{other}`"))),
        },
        None => f.gauge.unwrap_or(base.gauge),
    };
    Ok(FitConfig {
        learning_rate: flags.learning_rate.or(f.learning_rate).unwrap_or(base.learning_rate),
        batch_size: flags.batch_size.or(f.batch_size).or(base.batch_size),
        epochs: flags.epochs.or(f.epochs).unwrap_or(base.epochs),
        lr_decay_every: flags.lr_decay_every.or(f.lr_decay_every).unwrap_or(base.lr_decay_every),
        lr_decay: flags.lr_decay.or(f.lr_decay).unwrap_or(base.lr_decay),
        init_spread: flags.init_spread.or(f.init_spread).unwrap_or(base.init_spread),
        gauge,
        k,
        ..base
    })
}

fn check_experiment(file: &RunConfig, name: &str) -> Result<()> {
    match &file.experiment {
        Some(e) if e != name => Err(MoeError::Config(format!(
            "experiment: document is for `{e}` but the `{name}` command was run"
        ))),
        _ => Ok(()),
    }
}

fn flag_or<T: std::str::FromStr<Err = MoeError>>(key: &str, flag: Option<&str>, file: Option<T>) -> Result<Option<T>> {
    match flag {
        Some(v) => parse(key, v).map(Some),
        None => Ok(file),
    }
}

fn resolve_truth(file: &RunConfig, family: ExpertSpec) -> Result<MixingMeasure> {
    match &file.truth {
        Some(t) if t.expert() != family => Err(MoeError::Config(format!(
            "truth: uses {} experts but family is {family}",
            t.expert()
        ))),
        Some(t) => Ok(t.clone()),
        None => MixingMeasure::reference_truth(family),
    }
}

fn default_loss(family: ExpertSpec) -> VoronoiLoss {
    match family {
        ExpertSpec::Ridge(_) | ExpertSpec::NormalizedRidge(_) => VoronoiLoss::D2,
        _ => VoronoiLoss::D3 { r: 1.0 },
    }
}

struct Common {
    file: RunConfig,
    out: PathBuf,
    seed: u64,
}

fn common(cli: &Cli, default_out: &str) -> Result<Common> {
    let file = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let out = cli.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from(default_out));
    let seed = cli.seed.or(file.master_seed).unwrap_or(0);
    Ok(Common { file, out, seed })
}

#[derive(Serialize)]
struct FitEffective<'a> {
    experiment: &'static str,
    family: ExpertSpec,
    truth: &'a MixingMeasure,
    n: usize,
    k: usize,
    noise_var: f64,
    loss: VoronoiLoss,
    fit: &'a FitConfig,
    master_seed: u64,
    out: &'a Path,
}

fn cmd_fit(cli: &Cli, args: &FitArgs) -> Result<()> {
    let c = common(cli, "moe-lab-fit")?;
    check_experiment(&c.file, "fit")?;
    let family = flag_or("family", args.family.as_deref(), c.file.family)?.unwrap_or(ExpertSpec::Ridge(Activation::Sigmoid));
    let truth = resolve_truth(&c.file, family)?;
    let n = args.n.or(c.file.n).unwrap_or(10_000);
    let k = args.k.or(c.file.k).unwrap_or(truth.num_atoms());
    let noise_var = args.noise_var.or(c.file.noise_var).unwrap_or(1.0);
    let loss = flag_or("loss", args.loss.as_deref(), c.file.loss)?.unwrap_or_else(|| default_loss(family));
    let mut fit_cfg = resolve_fit(FitConfig::default(), k, c.file.fit.as_ref(), &args.fit)?;
    fit_cfg.seed = seed::stage_seed(c.seed, Stage::Train);
    fit_cfg.validate()?;
    if n == 0 {
        return Err(MoeError::Config("n: must be at least 1".into()));
    }
    let mu = InputDistribution::Uniform { dim: truth.dim() };
    let data = generate_dataset(&truth, n, noise_var, &mu, seed::stage_seed(c.seed, Stage::Data))?;
    let init = init_for_budget(&truth, k, fit_cfg.init_spread, seed::stage_seed(c.seed, Stage::Init))?;
    let fit = fit_sgd(&data, &init, Some(&truth), &fit_cfg)?;
    let g = gauge_fix(&fit.g_hat, &truth, fit_cfg.gauge)?;
    let loss_value = loss.evaluate(&g, &truth)?.total;
    let l2 = l2_distance(&g, &truth, &mu, DEFAULT_QUADRATURE_NODES)?;

    report::ensure_dir(&c.out)?;
    report::write_file(&c.out.join("fitted.json"), &report::to_json(&g)?)?;
    let mut trace = String::from("epoch,objective\n");
    for (e, v) in fit.objective_trace.iter().enumerate() {
        let _ = writeln!(trace, "{e},{v}");
    }
    report::write_file(&c.out.join("trace.csv"), &trace)?;
    let effective = FitEffective {
        experiment: "fit",
        family,
        truth: &truth,
        n,
        k,
        noise_var,
        loss,
        fit: &fit_cfg,
        master_seed: c.seed,
        out: &c.out,
    };
    let summary = json!({
        "config": effective,
        "final_objective": fit.final_objective,
        "iterations": fit.iterations,
        "loss": loss_value,
        "l2_distance": l2,
    });
    report::write_file(&c.out.join(report::SUMMARY_JSON), &report::to_json(&summary)?)?;
    println!("fit {family} n={n} k={k}: objective {} {loss} {loss_value} l2 {l2}", fit.final_objective);
    Ok(())
}

/// Effective sweep configuration for a parsed command line.
pub fn resolve_sweep(cli: &Cli, args: &SweepArgs) -> Result<(SweepConfig, Metric, PathBuf)> {
    let c = common(cli, "moe-lab-sweep")?;
    check_experiment(&c.file, "sweep")?;
    let family = flag_or("family", args.family.as_deref(), c.file.family)?.unwrap_or(ExpertSpec::Ridge(Activation::Sigmoid));
    let setting = flag_or("setting", args.setting.as_deref(), c.file.setting)?.unwrap_or(Setting::Exact);
    let metric = flag_or("metric", args.metric.as_deref(), c.file.metric)?.unwrap_or(Metric::Voronoi);
    let mut cfg = SweepConfig::reference(family, setting)?;
    cfg.truth = resolve_truth(&c.file, family)?;
    if args.quick || c.file.quick.unwrap_or(false) {
        cfg = cfg.quick();
    }
    if let Some(g) = args.n_grid.clone().or(c.file.n_grid.clone()) {
        cfg.n_grid = g;
    }
    if let Some(r) = args.replications.or(c.file.replications) {
        cfg.replications = r;
    }
    if let Some(l) = flag_or("loss", args.loss.as_deref(), c.file.loss)? {
        cfg.loss = l;
    }
    if let Some(v) = args.noise_var.or(c.file.noise_var) {
        cfg.noise_var = v;
    }
    if c.file.k.is_some() {
        return Err(MoeError::Config("k: sweeps derive k from `setting`".into()));
    }
    cfg.fit = resolve_fit(cfg.fit.clone(), cfg.k(), c.file.fit.as_ref(), &args.fit)?;
    cfg.master_seed = c.seed;
    cfg.validate()?;
    Ok((cfg, metric, c.out))
}

fn cmd_sweep(cli: &Cli, args: &SweepArgs) -> Result<()> {
    let (cfg, metric, out) = resolve_sweep(cli, args)?;
    let report = match metric {
        Metric::Voronoi => harness::run_sweep(&cfg)?,
        Metric::L2 => harness::l2_rate_sweep(&cfg)?,
    };
    report::emit_report(&report, &out)?;
    match report.slope {
        Some(s) => println!(
            "sweep {} {:?} {:?}: slope {:.4} (r^2 {:.3}), {} diverged, {:.1}s",
            cfg.family, cfg.setting, metric, s.slope, s.r_squared, report.diverged, report.wall_time_secs
        ),
        None => println!(
            "sweep {} {:?} {:?}: slope omitted ({})",
            cfg.family,
            cfg.setting,
            metric,
            report.slope_flag.as_deref().unwrap_or("")
        ),
    }
    Ok(())
}

#[derive(Serialize)]
struct CheckEntry {
    k: usize,
    verdict: IndependenceVerdict,
}

fn describe_dependency(v: &IndependenceVerdict) -> String {
    let mut s = String::new();
    for (i, t) in v.dependency_terms.iter().enumerate() {
        let sign = if t.coefficient < 0.0 { "-" } else { "+" };
        match (i, sign) {
            (0, "+") => {}
            (0, _) => s.push_str("- "),
            _ => {
                let _ = write!(s, " {sign} ");
            }
        }
        let _ = write!(s, "{:.4}*{}", t.coefficient.abs(), t.label);
    }
    s + " ~ 0"
}

fn cmd_check(cli: &Cli, args: &CheckArgs) -> Result<()> {
    let c = common(cli, "moe-lab-check")?;
    check_experiment(&c.file, "check")?;
    // an activation alone means an independence check on ridge units
    let activation_spec = |a: &str| parse::<Activation>("activation", a).map(|a| (identify::activation_spec(a), true));
    let (spec, by_activation) = match (&args.family, &args.activation, c.file.family, &c.file.activation) {
        (Some(f), _, _, _) => (parse("family", f)?, false),
        (None, Some(a), _, _) => activation_spec(a)?,
        (None, None, Some(f), _) => (f, false),
        (None, None, None, Some(a)) => activation_spec(a)?,
        (None, None, None, None) => (ExpertSpec::Ridge(Activation::Sigmoid), false),
    };
    let mode = flag_or("mode", args.mode.as_deref(), c.file.mode)?.unwrap_or(if by_activation {
        FamilyMode::Independence
    } else {
        FamilyMode::Identifiability
    });
    let ks: Vec<usize> = match (args.k, &c.file.k_values, c.file.k) {
        (Some(k), _, _) => vec![k],
        (None, Some(v), _) => v.clone(),
        (None, None, Some(k)) => vec![k],
        (None, None, None) => vec![1, 2, 3],
    };
    if ks.is_empty() {
        return Err(MoeError::Config("k_values: must not be empty".into()));
    }
    let base = CheckConfig {
        dim: args.dim.or(c.file.dim).unwrap_or(1),
        threshold: args.threshold.or(c.file.threshold).unwrap_or(identify::DEFAULT_THRESHOLD),
        trials: args.trials.or(c.file.trials).unwrap_or(identify::DEFAULT_TRIALS),
        seed: c.seed,
        ..CheckConfig::default()
    };
    let mut entries = Vec::new();
    for &k in &ks {
        let cfg = CheckConfig { k, ..base.clone() };
        entries.push(CheckEntry {
            k,
            verdict: identify::check_family(spec, mode, &cfg)?,
        });
    }
    let independent = entries.iter().all(|e| e.verdict.independent);
    let subject = match mode {
        FamilyMode::Identifiability => format!("expert {spec}"),
        FamilyMode::Independence => format!("activation {}", spec.activation()),
    };
    println!(
        "{mode} of {subject}: {}",
        if independent { "independent" } else { "dependent" }
    );
    for e in &entries {
        println!("  k={} min singular ratio {:e}", e.k, e.verdict.min_singular_ratio);
    }
    let dependency = entries.iter().find(|e| !e.verdict.independent).map(|e| {
        let text = describe_dependency(&e.verdict);
        println!("  dependency (k={}): {text}", e.k);
        json!({ "k": e.k, "relation": text })
    });
    let gate_pde: Vec<_> = MixingMeasure::reference_truth(spec)
        .map(|t| t.atoms().to_vec())
        .unwrap_or_default()
        .iter()
        .filter_map(|a| identify::detect_pde_interaction(spec, a).ok())
        .collect();
    report::ensure_dir(&c.out)?;
    let summary = json!({
        "config": {
            "experiment": "check",
            "family": spec,
            "mode": mode,
            "k_values": ks,
            "dim": base.dim,
            "threshold": base.threshold,
            "trials": base.trials,
            "master_seed": c.seed,
            "out": c.out,
        },
        "independent": independent,
        "verdicts": entries,
        "dependency": dependency,
        "reference_truth_gate_pde": gate_pde,
        "note": "numerical rank test on sampled inputs and parameters: evidence, not proof",
    });
    report::write_file(&c.out.join(report::SUMMARY_JSON), &report::to_json(&summary)?)?;
    Ok(())
}

fn cmd_adversarial(cli: &Cli, args: &AdversarialArgs) -> Result<()> {
    let c = common(cli, "moe-lab-adversarial")?;
    check_experiment(&c.file, "adversarial")?;
    let family = flag_or("family", args.family.as_deref(), c.file.family)?.unwrap_or(ExpertSpec::Linear);
    let construction = Construction::for_family(family).map_err(|e| MoeError::Config(e.to_string()))?;
    let r = args.r.or(c.file.r).unwrap_or(2.0);
    let n_grid: Vec<u64> = args
        .n_grid
        .clone()
        .or_else(|| c.file.n_grid.as_ref().map(|g| g.iter().map(|&n| n as u64).collect()))
        .unwrap_or_else(|| vec![10, 100, 1000]);
    let b1 = args.b1.or(c.file.b1);
    let truth = match (construction, &c.file.truth) {
        (_, Some(_)) => resolve_truth(&c.file, family)?,
        (Construction::Ridge, None) => zero_slope_truth(family, b1.unwrap_or(2.0))?,
        (Construction::Polynomial, None) => MixingMeasure::reference_truth(family)?,
    };
    let mu = InputDistribution::Uniform { dim: truth.dim() };
    let curve = ratio_curve(&truth, r, &n_grid, &mu, construction)?;
    let decreasing = curve.strictly_decreasing();
    report::ensure_dir(&c.out)?;
    report::write_file(&c.out.join(report::RATIO_CSV), &report::ratio_csv(&curve))?;
    let points: Vec<PlotPoint> = curve
        .n_grid
        .iter()
        .zip(&curve.ratios)
        .map(|(&n, &y)| PlotPoint { x: n as f64, y, err: 0.0 })
        .collect();
    let slope = harness::fit_loglog_slope(&points.iter().map(|p| (p.x, p.y)).collect::<Vec<_>>()).ok();
    report::write_file(
        &c.out.join(report::RATIO_SVG),
        &report::loglog_svg(&points, slope, &format!("L2 / D3,{r} for {family} witness")),
    )?;
    let summary = json!({
        "config": {
            "experiment": "adversarial",
            "family": family,
            "truth": truth,
            "r": r,
            "n_grid": n_grid,
            "master_seed": c.seed,
            "out": c.out,
        },
        "construction": construction,
        "curve": curve,
        "strictly_decreasing": decreasing,
        "taylor_coefficients": if construction == Construction::Ridge { Some("(1 + 2^a) s^(a)(b) / (a! n^a)") } else { None },
    });
    report::write_file(&c.out.join(report::SUMMARY_JSON), &report::to_json(&summary)?)?;
    println!("adversarial {family} r={r}: ratios {:?}", curve.ratios);
    if !decreasing {
        eprintln!("warning: ratio curve is not strictly decreasing; the witness does not exhibit the vanishing ratio on this grid");
    }
    Ok(())
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(&cli, a),
        Command::Sweep(a) => cmd_sweep(&cli, a),
        Command::Check(a) => cmd_check(&cli, a),
        Command::Adversarial(a) => cmd_adversarial(&cli, a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
