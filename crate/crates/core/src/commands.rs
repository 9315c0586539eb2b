//! Command implementations behind the `adafocal` binary.
//!
//! Every command returns a [`RunReport`]; files it produces are written
//! atomically. Exit codes: 0 success, 1 failed invariant, 2 input error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::adaptive::AflParams;
use crate::attention::{camd_forward, toy_pyramid, AttentionParams};
use crate::clicksim::{next_click, run_noc, summarize, NocConfig, Predictor, SimTrace, PROTOCOL_VERSION};
use crate::error::{Error, Result};
use crate::field::{pt_map, BinaryMask, Field, DEFAULT_EPS_CLIP};
use crate::io::{read_pgm, read_pm, read_pm_field, write_atomic, write_pgm, write_pm};
use crate::losses::{LossSpec, Reduction};
use crate::matching::{hungarian, total_loss, GroundTruthInstance, InstancePrediction, LossWeights};
use crate::rng::Seed;
use crate::synthgen::{difficulty_profile, generate, Shape, SynthSample, SynthSpec, FEATURE_NAMES};
use crate::trainer::{compare_losses, train, Optimizer, TrainConfig};
use crate::verify::{grad_check, identity_checks, InvariantCheck, FD_TOLERANCE};

pub const SPEC_VERSION: &str = "1.0";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Versions {
    pub spec_version: String,
    pub protocol_version: String,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            spec_version: SPEC_VERSION.into(),
            protocol_version: PROTOCOL_VERSION.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub command: String,
    pub config: Value,
    /// SHA-256 of the canonical (sorted-key) JSON of `config`.
    pub config_hash: String,
    pub results: Value,
    pub invariant_checks: Vec<InvariantCheck>,
    pub versions: Versions,
}

impl RunReport {
    pub fn new(command: &str, config: &impl Serialize) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        let hash = hex::encode(Sha256::digest(serde_json::to_string(&config)?.as_bytes()));
        Ok(Self {
            command: command.into(),
            config,
            config_hash: hash,
            results: Value::Null,
            invariant_checks: Vec::new(),
            versions: Versions::default(),
        })
    }

    pub fn all_pass(&self) -> bool {
        self.invariant_checks.iter().all(|c| c.pass)
    }

    pub fn exit_code(&self) -> i32 {
        if self.all_pass() {
            0
        } else {
            1
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Exit code for a failed command.
pub fn error_exit_code(e: &Error) -> i32 {
    if e.is_input_error() {
        2
    } else {
        1
    }
}

#[derive(Debug, Parser)]
#[command(name = "adafocal", version, about = "Adaptive focal loss toolkit on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Also write the JSON report to this file.
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    #[command(subcommand)]
    Loss(LossCommand),
    /// Per-pixel pt map of a prediction, as a PM file.
    PtPlot(PtPlotArgs),
    /// Optimal assignment from a cost matrix or instance directories.
    Match(MatchArgs),
    #[command(subcommand)]
    Attention(AttentionCommand),
    #[command(subcommand)]
    Synth(SynthCommand),
    #[command(subcommand)]
    Train(TrainCommand),
    #[command(subcommand)]
    Noc(NocCommand),
}

#[derive(Debug, Subcommand)]
pub enum LossCommand {
    /// Evaluate one loss on a prediction / ground-truth pair.
    Eval(LossEvalArgs),
    /// Finite-difference gradient check over seeded random cases.
    GradCheck(GradCheckArgs),
    /// Reduction ladder, normalization, series and Chebyshev checks.
    IdentityCheck(IdentityCheckArgs),
    /// Loss and gradient against pt over a γ / γₐ grid, as CSV.
    Curve(CurveArgs),
}

#[derive(Debug, Subcommand)]
pub enum AttentionCommand {
    /// Forward passes of the toy decoder with invariant checks.
    Demo(AttentionDemoArgs),
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Generate synthetic samples as PGM masks and PM feature channels.
    Gen(SynthGenArgs),
}

#[derive(Debug, Subcommand)]
pub enum TrainCommand {
    /// Train the pixel model on one synthetic sample.
    Demo(TrainDemoArgs),
}

#[derive(Debug, Subcommand)]
pub enum NocCommand {
    /// Click simulation with NoC85 / NoC90 / mIoU@k.
    Run(NocRunArgs),
}

/// Loss selection and hyperparameter overrides.
#[derive(Debug, Clone, Args, Serialize)]
pub struct LossArgs {
    /// One of bce, wbce, balanced_ce, soft_iou, focal, nfl, poly, dice, afl.
    #[arg(long, default_value = "afl")]
    pub loss: String,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub smooth: Option<f64>,
    /// Disable the adaptive difficulty term (γₐ = 0).
    #[arg(long)]
    pub no_ada: bool,
    /// Disable the gradient normalization (μ = 1).
    #[arg(long)]
    pub no_agr: bool,
}

impl LossArgs {
    pub fn to_spec(&self) -> Result<LossSpec> {
        let mut spec = LossSpec::by_name(&self.loss)?;
        let mut used = BTreeMap::new();
        for (flag, set) in [
            ("gamma", self.gamma.is_some()),
            ("alpha", self.alpha.is_some()),
            ("delta", self.delta.is_some()),
            ("beta", self.beta.is_some()),
            ("smooth", self.smooth.is_some()),
            ("no-ada", self.no_ada),
            ("no-agr", self.no_agr),
        ] {
            used.insert(flag, set);
        }
        let mut take = |flag: &'static str| used.insert(flag, false).unwrap_or(false);
        match &mut spec {
            LossSpec::Wbce { beta } => {
                if take("beta") {
                    *beta = self.beta;
                }
            }
            LossSpec::BalancedCe { beta } => {
                if take("beta") {
                    *beta = self.beta.unwrap_or(*beta);
                }
            }
            LossSpec::Focal { gamma } | LossSpec::Nfl { gamma } => {
                if take("gamma") {
                    *gamma = self.gamma.unwrap_or(*gamma);
                }
            }
            LossSpec::Poly { gamma, alpha } => {
                if take("gamma") {
                    *gamma = self.gamma.unwrap_or(*gamma);
                }
                if take("alpha") {
                    *alpha = self.alpha.unwrap_or(*alpha);
                }
            }
            LossSpec::Dice { smooth } => {
                if take("smooth") {
                    *smooth = self.smooth.unwrap_or(*smooth);
                }
            }
            LossSpec::Afl(p) => {
                for flag in ["gamma", "alpha", "delta", "no-ada", "no-agr"] {
                    take(flag);
                }
                p.gamma = self.gamma.unwrap_or(p.gamma);
                p.alpha = self.alpha.unwrap_or(p.alpha);
                p.delta = self.delta.unwrap_or(p.delta);
                p.ada_enabled = !self.no_ada;
                p.agr_enabled = !self.no_agr;
            }
            LossSpec::Bce | LossSpec::SoftIou => {}
        }
        if let Some((flag, _)) = used.iter().find(|(_, set)| **set) {
            return Err(Error::Parameter(format!(
                "--{flag} does not apply to loss {}",
                self.loss
            )));
        }
        Ok(spec)
    }
}

fn parse_reduction(s: &str) -> Result<Reduction> {
    match s {
        "sum" => Ok(Reduction::Sum),
        "mean" => Ok(Reduction::Mean),
        other => Err(Error::Parameter(format!(
            "reduction must be sum or mean, got {other:?}"
        ))),
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LossEvalArgs {
    #[command(flatten)]
    pub loss: LossArgs,
    /// Prediction (PM file).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground truth (PGM file).
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EPS_CLIP)]
    pub eps: f64,
    /// sum or mean.
    #[arg(long, default_value = "sum")]
    pub reduction: String,
    /// Write the per-pixel gradient to this PM file.
    #[arg(long)]
    pub grad_out: Option<PathBuf>,
}

pub fn cmd_loss_eval(args: &LossEvalArgs) -> Result<RunReport> {
    let mut report = RunReport::new("loss eval", args)?;
    let spec = args.loss.to_spec()?;
    let reduction = parse_reduction(&args.reduction)?;
    let pred = read_pm(&args.pred)?;
    let gt = read_pgm(&args.gt)?;
    let out = spec.evaluate(&pred, &gt, args.eps, reduction)?;
    if let Some(path) = &args.grad_out {
        write_pm(path, &out.grad)?;
    }
    report.results = json!({
        "loss": spec.name(),
        "params": spec,
        "value": out.value,
        "diagnostics": out.diagnostics,
        "grad_stats": {"min": out.grad.min(), "max": out.grad.max(), "l2": out.grad.l2()},
    });
    report.invariant_checks = vec![
        InvariantCheck::violations("value_finite", usize::from(!out.value.is_finite())),
        InvariantCheck::violations(
            "grad_finite",
            out.grad.values().iter().filter(|v| !v.is_finite()).count(),
        ),
    ];
    Ok(report)
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GradCheckArgs {
    /// Losses to check (repeatable); all when omitted.
    #[arg(long = "loss")]
    pub losses: Vec<String>,
    #[arg(long, default_value_t = 100)]
    pub cases: usize,
    #[arg(long)]
    pub seed: u64,
}

pub fn cmd_grad_check(args: &GradCheckArgs) -> Result<RunReport> {
    let mut report = RunReport::new("loss grad-check", args)?;
    let names: Vec<&str> = if args.losses.is_empty() {
        LossSpec::NAMES.to_vec()
    } else {
        args.losses.iter().map(String::as_str).collect()
    };
    if args.cases == 0 {
        return Err(Error::Parameter("cases must be >= 1".into()));
    }
    let results = grad_check(&names, args.cases, Seed(args.seed))?;
    report.invariant_checks = results
        .iter()
        .map(|r| InvariantCheck::at_most(format!("grad_check_{}", r.loss), r.max_relative_error, FD_TOLERANCE))
        .collect();
    report.results = json!({ "losses": results });
    Ok(report)
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct IdentityCheckArgs {
    #[arg(long, default_value_t = 100)]
    pub maps: usize,
    #[arg(long)]
    pub seed: u64,
}

pub fn cmd_identity_check(args: &IdentityCheckArgs) -> Result<RunReport> {
    let mut report = RunReport::new("loss identity-check", args)?;
    report.invariant_checks = identity_checks(args.maps, Seed(args.seed))?;
    report.results = json!({ "maps": args.maps });
    Ok(report)
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CurveArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 1.0, 2.0, 3.0])]
    pub gammas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.25, 0.5, 0.75, 1.0])]
    pub gamma_as: Vec<f64>,
    /// Number of interior pt points on (0, 1).
    #[arg(long, default_value_t = 99)]
    pub points: usize,
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Per-pixel `-(1-pt)^g ln pt + α (1-pt)^(g+1)` and its pt-derivative.
pub fn curve_point(pt: f64, gamma_d: f64, alpha: f64) -> (f64, f64) {
    let u = 1.0 - pt;
    let ug = u.powf(gamma_d);
    let value = -ug * pt.ln() + alpha * u * ug;
    let d_gap = if gamma_d == 0.0 {
        0.0
    } else {
        gamma_d * u.powf(gamma_d - 1.0) * pt.ln()
    };
    (value, d_gap - ug / pt - alpha * (gamma_d + 1.0) * ug)
}

pub fn cmd_curve(args: &CurveArgs) -> Result<RunReport> {
    let mut report = RunReport::new("loss curve", args)?;
    if args.points == 0 || args.gammas.is_empty() || args.gamma_as.is_empty() {
        return Err(Error::Parameter("curve grid must be nonempty".into()));
    }
    if args.gammas.iter().any(|g| !(0.0..=5.0).contains(g))
        || args.gamma_as.iter().any(|g| !(0.0..=1.0).contains(g))
        || args.alpha.is_nan()
        || args.alpha < 0.0
    {
        return Err(Error::Parameter(
            "need gamma in [0, 5], gamma_a in [0, 1], alpha >= 0".into(),
        ));
    }
    let mut csv = String::from("gamma,gamma_a,gamma_d,pt,loss,grad\n");
    let (mut rows, mut non_monotone) = (0usize, 0usize);
    for &g in &args.gammas {
        for &ga in &args.gamma_as {
            let gd = g + ga;
            let mut prev = f64::INFINITY;
            for k in 1..=args.points {
                let pt = k as f64 / (args.points + 1) as f64;
                let (v, d) = curve_point(pt, gd, args.alpha);
                if v > prev {
                    non_monotone += 1;
                }
                prev = v;
                csv.push_str(&format!("{g:?},{ga:?},{gd:?},{pt:?},{v:?},{d:?}\n"));
                rows += 1;
            }
        }
    }
    write_atomic(&args.out, csv.as_bytes())?;
    let expected = args.gammas.len() * args.gamma_as.len() * args.points;
    report.invariant_checks = vec![
        InvariantCheck::violations("loss_decreasing_in_pt", non_monotone),
        InvariantCheck::at_most("row_count_mismatch", rows.abs_diff(expected) as f64, 0.0),
    ];
    report.results = json!({ "rows": rows, "out": args.out });
    Ok(report)
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PtPlotArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EPS_CLIP)]
    pub eps: f64,
}

pub fn cmd_pt_plot(args: &PtPlotArgs) -> Result<RunReport> {
    let mut report = RunReport::new("pt-plot", args)?;
    let pred = read_pm(&args.pred)?;
    let gt = read_pgm(&args.gt)?;
    let pt = pt_map(&pred, &gt, args.eps)?;
    write_pm(&args.out, pt.field())?;
    let back = read_pm(&args.out)?;
    let profile = difficulty_profile(&gt, &pred)?;
    let mean = pt.values().iter().sum::<f64>() / pt.len() as f64;
    report.invariant_checks = vec![
        InvariantCheck::violations("output_reparses", usize::from(back.values() != pt.values())),
        InvariantCheck::at_most(
            "histogram_count_mismatch",
            profile.total().abs_diff(pt.len()) as f64,
            0.0,
        ),
    ];
    report.results = json!({
        "out": args.out,
        "pt": {"min": pt.field().min(), "max": pt.field().max(), "mean": mean},
        "profile": profile,
    });
    Ok(report)
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MatchArgs {
    /// JSON cost matrix (array of rows).
    #[arg(long, conflicts_with_all = ["pred_dir", "gt_dir"])]
    pub costs: Option<PathBuf>,
    /// Directory of prediction PM files, with optional classes.json.
    #[arg(long, requires = "gt_dir")]
    pub pred_dir: Option<PathBuf>,
    /// Directory of ground-truth PGM files.
    #[arg(long, requires = "pred_dir")]
    pub gt_dir: Option<PathBuf>,
    /// Write the match result JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads predictions (`*.pm`, plus `classes.json` holding one `[object,
/// unclick]` pair per file) and ground truths (`*.pgm`, object class).
pub fn load_instances(pred_dir: &Path, gt_dir: &Path) -> Result<(Vec<InstancePrediction>, Vec<GroundTruthInstance>)> {
    let pm = sorted_files(pred_dir, "pm")?;
    if pm.is_empty() {
        return Err(Error::Parameter(format!("no .pm files in {}", pred_dir.display())));
    }
    let classes_path = pred_dir.join("classes.json");
    let classes: Vec<[f64; 2]> = if classes_path.exists() {
        serde_json::from_str(&fs::read_to_string(&classes_path)?)?
    } else {
        vec![[1.0, 0.0]; pm.len()]
    };
    if classes.len() != pm.len() {
        return Err(Error::Dimension(format!(
            "classes.json has {} entries for {} predictions",
            classes.len(),
            pm.len()
        )));
    }
    let preds = pm
        .iter()
        .zip(classes)
        .map(|(p, c)| InstancePrediction::new(read_pm(p)?, c))
        .collect::<Result<_>>()?;
    let gts = sorted_files(gt_dir, "pgm")?
        .iter()
        .map(|p| Ok(GroundTruthInstance::object(read_pgm(p)?)))
        .collect::<Result<_>>()?;
    Ok((preds, gts))
}

pub fn cmd_match(args: &MatchArgs) -> Result<RunReport> {
    let mut report = RunReport::new("match", args)?;
    let (result, extra) = match (&args.costs, &args.pred_dir, &args.gt_dir) {
        (Some(path), _, _) => {
            let text = fs::read_to_string(path)?;
            let costs: Vec<Vec<f64>> = serde_json::from_str(&text)?;
            (hungarian(&costs)?, Value::Null)
        }
        (None, Some(pd), Some(gd)) => {
            let (preds, gts) = load_instances(pd, gd)?;
            let (loss, result, breakdown) = total_loss(&preds, &gts, &LossWeights::default(), &AflParams::default())?;
            (result, json!({ "total_loss": loss, "breakdown": breakdown }))
        }
        _ => return Err(Error::Parameter("give --costs or both --pred-dir and --gt-dir".into())),
    };
    if let Some(out) = &args.out {
        write_atomic(out, serde_json::to_string_pretty(&result)?.as_bytes())?;
    }
    let mut rows: Vec<usize> = result.assignment.iter().map(|a| a.0).collect();
    let mut cols: Vec<usize> = result.assignment.iter().map(|a| a.1).collect();
    let n = rows.len();
    rows.dedup();
    cols.sort_unstable();
    cols.dedup();
    let sum: f64 = result.pair_costs.iter().sum();
    report.invariant_checks = vec![
        InvariantCheck::violations("assignment_injective", (n - rows.len()) + (n - cols.len())),
        InvariantCheck::at_most("total_equals_pair_sum", (sum - result.total_cost).abs(), 1e-9),
    ];
    report.results = json!({ "match": result, "loss": extra });
    Ok(report)
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AttentionDemoArgs {
    #[arg(long, default_value_t = 10)]
    pub queries: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = vec![64, 64])]
    pub hw: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub blocks: usize,
    #[arg(long)]
    pub seed: u64,
}

pub fn cmd_attention_demo(args: &AttentionDemoArgs) -> Result<RunReport> {
    let mut report = RunReport::new("attention demo", args)?;
    let &[h, w] = args.hw.as_slice() else {
        return Err(Error::Parameter("--hw takes two values".into()));
    };
    let seed = Seed(args.seed);
    let sample = generate(&SynthSpec {
        height: h,
        width: w,
        seed,
        ..Default::default()
    })?;
    let gt = &sample.gt_instances[0];
    let click = next_click(&BinaryMask::zeros(h, w)?, gt, &[])?;
    let pyramid = toy_pyramid(&sample, &[click], args.dim, seed)?;
    let params = AttentionParams::seeded(args.queries, args.dim, seed)?;
    let out = camd_forward(&pyramid, &params, args.blocks)?;
    let rerun = camd_forward(&pyramid, &params, args.blocks)?;

    let max_row_err = out.layers.iter().map(|l| l.max_row_sum_error).fold(0.0, f64::max);
    let masked = out.layers.iter().map(|l| l.masked_weight).fold(0.0, f64::max);
    report.invariant_checks = vec![
        InvariantCheck::violations("finite", out.layers.iter().filter(|l| !l.finite).count()),
        InvariantCheck::at_most("attention_row_sum", max_row_err, 1e-9),
        InvariantCheck::at_most("masked_weight", masked, 0.0),
        InvariantCheck::violations("bit_identical_rerun", usize::from(out != rerun)),
    ];
    report.results = json!({
        "queries": args.queries,
        "dim": args.dim,
        "scales": pyramid.scales.iter().map(|s| [s.h, s.w]).collect::<Vec<_>>(),
        "embed": [pyramid.embed.h, pyramid.embed.w],
        "layers": out.layers,
        "predictions": out.predictions.iter().map(|p| json!({
            "click_class_probs": p.click_class_probs,
            "foreground_fraction": p.mask_probs.values().iter().filter(|&&v| v >= 0.5).count() as f64
                / p.mask_probs.len() as f64,
        })).collect::<Vec<_>>(),
    });
    Ok(report)
}

/// Contents of `metadata.json` in a sample directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMetadata {
    pub spec: SynthSpec,
    pub shapes: Vec<Shape>,
    pub features: Vec<String>,
    pub masks: Vec<String>,
}

pub fn write_sample(dir: &Path, sample: &SynthSample) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut meta = SampleMetadata {
        spec: sample.spec.clone(),
        shapes: sample.shapes.clone(),
        features: Vec::new(),
        masks: Vec::new(),
    };
    for (name, f) in FEATURE_NAMES.iter().zip(&sample.features) {
        let file = format!("feature_{name}.pm");
        write_pm(&dir.join(&file), f)?;
        meta.features.push(file);
    }
    for (k, m) in sample.gt_instances.iter().enumerate() {
        let file = format!("mask_{k}.pgm");
        write_pgm(&dir.join(&file), m)?;
        meta.masks.push(file);
    }
    write_atomic(
        &dir.join("metadata.json"),
        serde_json::to_string_pretty(&meta)?.as_bytes(),
    )
}

pub fn load_sample(dir: &Path) -> Result<SynthSample> {
    let meta: SampleMetadata = serde_json::from_str(&fs::read_to_string(dir.join("metadata.json"))?)?;
    let features: Vec<Field> = meta
        .features
        .iter()
        .map(|f| read_pm_field(&dir.join(f)))
        .collect::<Result<_>>()?;
    if features.len() != FEATURE_NAMES.len() {
        return Err(Error::Dimension(format!(
            "{} has {} feature channels, expected {}",
            dir.display(),
            features.len(),
            FEATURE_NAMES.len()
        )));
    }
    let masks: Vec<BinaryMask> = meta
        .masks
        .iter()
        .map(|f| read_pgm(&dir.join(f)))
        .collect::<Result<_>>()?;
    let shape = (meta.spec.height, meta.spec.width);
    for s in features
        .iter()
        .map(Field::shape)
        .chain(masks.iter().map(BinaryMask::shape))
    {
        crate::field::ensure_same_shape(shape, s)?;
    }
    Ok(SynthSample {
        features,
        gt_instances: masks,
        shapes: meta.shapes,
        spec: meta.spec,
    })
}

fn read_spec(path: &Path) -> Result<SynthSpec> {
    let spec: SynthSpec = serde_json::from_str(&fs::read_to_string(path)?)?;
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthGenArgs {
    /// SynthSpec JSON; missing fields take defaults.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the SynthSpec seed. With `--count > 1`, sample i uses a seed derived from it.
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
}

pub fn cmd_synth_gen(args: &SynthGenArgs) -> Result<RunReport> {
    let mut report = RunReport::new("synth gen", args)?;
    if args.count == 0 {
        return Err(Error::Parameter("count must be >= 1".into()));
    }
    let base = read_spec(&args.spec)?;
    let mut summary = Vec::new();
    let (mut empty, mut nesting_bad) = (0, 0);
    for i in 0..args.count {
        let (seed, dir) = if args.count == 1 {
            (Seed(args.seed), args.out.clone())
        } else {
            (
                Seed(args.seed).derive(i as u64),
                args.out.join(format!("sample_{i:03}")),
            )
        };
        let sample = generate(&SynthSpec { seed, ..base.clone() })?;
        write_sample(&dir, &sample)?;
        empty += sample.gt_instances.iter().filter(|m| m.count() == 0).count();
        if base.nesting {
            let g = &sample.gt_instances;
            if !(g[1].is_subset_of(&g[0]) && g[1].count() < g[0].count()) {
                nesting_bad += 1;
            }
        }
        summary.push(json!({
            "dir": dir,
            "seed": seed.0,
            "foreground_pixels": sample.gt_instances.iter().map(BinaryMask::count).collect::<Vec<_>>(),
        }));
    }
    report.invariant_checks = vec![
        InvariantCheck::violations("masks_nonempty", empty),
        InvariantCheck::violations("nested_strict_subset", nesting_bad),
    ];
    report.results = json!({ "samples": summary });
    Ok(report)
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainDemoArgs {
    #[command(flatten)]
    pub loss: LossArgs,
    /// SynthSpec JSON.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    /// adam or sgd.
    #[arg(long, default_value = "adam")]
    pub optimizer: String,
    /// sum or mean.
    #[arg(long, default_value = "sum")]
    pub reduction: String,
    /// Ground-truth instance to train on.
    #[arg(long, default_value_t = 0)]
    pub target: usize,
    /// Overrides the SynthSpec seed.
    #[arg(long)]
    pub seed: u64,
    /// Also train these losses (default hyperparameters) for comparison.
    #[arg(long, value_delimiter = ',')]
    pub compare: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_train_demo(args: &TrainDemoArgs) -> Result<RunReport> {
    let mut report = RunReport::new("train demo", args)?;
    let seed = Seed(args.seed);
    let sample = generate(&SynthSpec {
        seed,
        ..read_spec(&args.spec)?
    })?;
    let optimizer = match args.optimizer.as_str() {
        "adam" => Optimizer::adam(),
        "sgd" => Optimizer::Sgd,
        other => {
            return Err(Error::Parameter(format!(
                "optimizer must be adam or sgd, got {other:?}"
            )))
        }
    };
    let config = TrainConfig {
        optimizer,
        seed,
        reduction: parse_reduction(&args.reduction)?,
        target: args.target,
        ..TrainConfig::new(args.loss.to_spec()?, args.steps, args.lr)
    };
    let run = train(&sample, &config)?;
    fs::create_dir_all(&args.out)?;
    write_atomic(
        &args.out.join("model.json"),
        serde_json::to_string_pretty(&run.model)?.as_bytes(),
    )?;
    write_atomic(&args.out.join("log.csv"), run.log_csv().as_bytes())?;

    let others: Vec<LossSpec> = args
        .compare
        .iter()
        .map(|n| LossSpec::by_name(n))
        .collect::<Result<_>>()?;
    let comparison = compare_losses(&sample, &others, &config)?;
    for row in &comparison {
        write_atomic(
            &args.out.join(format!("log_{}.csv", row.loss)),
            row.run.log_csv().as_bytes(),
        )?;
    }
    let non_finite = run.log.iter().filter(|r| !r.loss.is_finite()).count();
    report.invariant_checks = vec![
        InvariantCheck::at_most("log_rows_mismatch", run.log.len().abs_diff(args.steps) as f64, 0.0),
        InvariantCheck::violations("loss_finite", non_finite),
        InvariantCheck::violations("model_finite", usize::from(!run.model.is_finite())),
    ];
    report.results = json!({
        "loss": config.loss.name(),
        "final_iou": run.final_iou(),
        "final_loss": run.log.last().map(|r| r.loss),
        "model": run.model,
        "out": args.out,
        "comparison": comparison.iter().map(|r| json!({
            "loss": r.loss, "final_iou": r.final_iou, "final_loss": r.final_loss,
        })).collect::<Vec<_>>(),
    });
    Ok(report)
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct NocRunArgs {
    /// oracle, noisy:<rate> or trained:<model.json>.
    #[arg(long)]
    pub predictor: String,
    /// A sample directory, a directory of sample directories, or synth:<spec.json>.
    #[arg(long)]
    pub dataset: String,
    /// Samples generated for a synth: dataset.
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = 20)]
    pub max_clicks: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Resolves a dataset argument into named samples.
pub fn load_dataset(dataset: &str, samples: usize, seed: Seed) -> Result<Vec<(String, SynthSample)>> {
    if let Some(spec_path) = dataset.strip_prefix("synth:") {
        let base = read_spec(Path::new(spec_path))?;
        return (0..samples)
            .map(|i| {
                let s = generate(&SynthSpec {
                    seed: seed.derive(i as u64),
                    ..base.clone()
                })?;
                Ok((format!("synth_{i:03}"), s))
            })
            .collect();
    }
    let dir = Path::new(dataset);
    if dir.join("metadata.json").exists() {
        return Ok(vec![(dataset.to_string(), load_sample(dir)?)]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("metadata.json").exists())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::Parameter(format!("no samples found in {dataset}")));
    }
    subdirs
        .iter()
        .map(|d| Ok((d.display().to_string(), load_sample(d)?)))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceEntry {
    pub sample: String,
    pub instance: usize,
    #[serde(flatten)]
    pub trace: SimTrace,
}

pub fn cmd_noc_run(args: &NocRunArgs) -> Result<RunReport> {
    let mut report = RunReport::new("noc run", args)?;
    let seed = Seed(args.seed);
    let predictor = Predictor::parse(&args.predictor, seed)?;
    let config = NocConfig {
        max_clicks: args.max_clicks,
        ..NocConfig::default()
    };
    let mut entries = Vec::new();
    for (name, sample) in load_dataset(&args.dataset, args.samples, seed)? {
        for (k, gt) in sample.gt_instances.iter().enumerate() {
            entries.push(TraceEntry {
                sample: name.clone(),
                instance: k,
                trace: run_noc(&predictor, &sample, gt, &config)?,
            });
        }
    }
    let traces: Vec<SimTrace> = entries.iter().map(|e| e.trace.clone()).collect();
    let summary = summarize(&traces)?;
    let trace_json = json!({
        "protocol_version": PROTOCOL_VERSION,
        "predictor": args.predictor,
        "config": config,
        "traces": entries,
        "summary": summary,
    });
    write_atomic(&args.out, serde_json::to_string_pretty(&trace_json)?.as_bytes())?;
    report.invariant_checks = vec![
        InvariantCheck::violations("noc85_le_noc90", traces.iter().filter(|t| t.noc85 > t.noc90).count()),
        InvariantCheck::violations(
            "iou_finite",
            traces.iter().filter(|t| t.ious.iter().any(|v| !v.is_finite())).count(),
        ),
    ];
    report.results = json!({ "out": args.out, "summary": summary });
    Ok(report)
}

pub fn run(command: &Command) -> Result<RunReport> {
    match command {
        Command::Loss(LossCommand::Eval(a)) => cmd_loss_eval(a),
        Command::Loss(LossCommand::GradCheck(a)) => cmd_grad_check(a),
        Command::Loss(LossCommand::IdentityCheck(a)) => cmd_identity_check(a),
        Command::Loss(LossCommand::Curve(a)) => cmd_curve(a),
        Command::PtPlot(a) => cmd_pt_plot(a),
        Command::Match(a) => cmd_match(a),
        Command::Attention(AttentionCommand::Demo(a)) => cmd_attention_demo(a),
        Command::Synth(SynthCommand::Gen(a)) => cmd_synth_gen(a),
        Command::Train(TrainCommand::Demo(a)) => cmd_train_demo(a),
        Command::Noc(NocCommand::Run(a)) => cmd_noc_run(a),
    }
}

/// Runs a parsed command line; prints the report and returns the exit code.
pub fn main_with(cli: &Cli) -> i32 {
    let report = run(&cli.command).and_then(|r| {
        let text = r.to_json()?;
        if let Some(path) = &cli.report {
            write_atomic(path, text.as_bytes())?;
        }
        use std::io::Write as _;
        // a closed stdout (e.g. piped into `head`) is not a command failure
        let _ = writeln!(std::io::stdout().lock(), "{text}");
        Ok(r)
    });
    match report {
        Ok(r) => r.exit_code(),
        Err(e) => {
            eprintln!("error: {e}");
            error_exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_args(name: &str) -> LossArgs {
        LossArgs {
            loss: name.into(),
            gamma: None,
            alpha: None,
            delta: None,
            beta: None,
            smooth: None,
            no_ada: false,
            no_agr: false,
        }
    }

    #[test]
    fn loss_args_map_to_spec() {
        let mut a = loss_args("afl");
        a.no_agr = true;
        a.gamma = Some(1.0);
        match a.to_spec().unwrap() {
            LossSpec::Afl(p) => {
                assert_eq!(p.gamma, 1.0);
                assert!(!p.agr_enabled && p.ada_enabled);
            }
            other => panic!("{other:?}"),
        }
        let mut b = loss_args("bce");
        b.gamma = Some(2.0);
        assert!(matches!(b.to_spec(), Err(Error::Parameter(_))));
        let mut c = loss_args("poly");
        c.alpha = Some(0.0);
        assert_eq!(c.to_spec().unwrap(), LossSpec::Poly { gamma: 2.0, alpha: 0.0 });
    }

    #[test]
    fn config_hash_is_stable() {
        let a = RunReport::new("x", &json!({"b": 1, "a": 2})).unwrap();
        let b = RunReport::new("x", &json!({"a": 2, "b": 1})).unwrap();
        assert_eq!(a.config_hash, b.config_hash);
        assert_eq!(a.config_hash.len(), 64);
    }

    #[test]
    fn curve_point_matches_focal_at_zero_gamma_a() {
        let (v, d) = curve_point(0.3, 2.0, 0.0);
        assert!((v - 0.49 * -(0.3f64.ln())).abs() < 1e-15);
        let h = 1e-6;
        let fd = (curve_point(0.3 + h, 2.0, 0.0).0 - curve_point(0.3 - h, 2.0, 0.0).0) / (2.0 * h);
        assert!((d - fd).abs() < 1e-8);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(error_exit_code(&Error::Dimension("x".into())), 2);
        assert_eq!(error_exit_code(&Error::Internal("x".into())), 1);
        let mut r = RunReport::new("x", &()).unwrap();
        assert_eq!(r.exit_code(), 0);
        r.invariant_checks.push(InvariantCheck::at_most("c", 2.0, 1.0));
        assert_eq!(r.exit_code(), 1);
    }
}
