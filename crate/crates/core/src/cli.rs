//! The `fpq` command-line front end.
//!
//! Every subcommand prints a JSON report on stdout. Failures print a JSON
//! error object on stderr and exit with 1 for numerical or domain errors and 2
//! for usage or I/O errors.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{
    gen_synthetic, outlier_demo_vector, summarize_with_bins, Comparison, ErrorReport, SyntheticKind, DEFAULT_BINS,
};
use crate::error::{Error, Result};
use crate::gptq::{
    build_hessian, gptq_quantize, gptq_quantize_detailed, CalibrationSet, CalibrationSource, DEFAULT_BLOCK_SIZE,
    DEFAULT_DAMPING,
};
use crate::lorc::{apply_lorc, error_matrix, lorc_factorize_with, LorcFactors, SvdMethod};
use crate::quant::{quantize, QuantizedTensor};
use crate::scale_cast::{cast_group_to_fp8, constrain};
use crate::spec::{NumberFormat, QuantSpec, ScaleConstraint};
use crate::tensor::Tensor;
use crate::tensor_io;

#[derive(Debug, Parser)]
#[command(name = "fpq", version, about = "INT/FP8/FP4 post-training quantization toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantize a weight or activation tensor: RTN or GPTQ, then optional
    /// low-rank compensation, scale constraint and FP8 cast.
    Quantize(QuantizeArgs),
    /// Compare several recipes on one tensor.
    Compare(CompareArgs),
    /// Distribution statistics and histogram of a tensor.
    Analyze(AnalyzeArgs),
    /// Write a seeded synthetic tensor.
    Gen(GenArgs),
    /// GPTQ-quantize a weight matrix against calibration activations.
    Gptq(GptqArgs),
    /// Fit low-rank compensation factors to a quantization error.
    Lorc(LorcArgs),
    /// Cast M1/M2-constrained FP4 codes to FP8 (E5M2) by exponent shifts.
    Cast(CastArgs),
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    /// JSON recipe file; explicit flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Tensor to quantize (.bin container or .csv).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Quantization recipe, e.g. fp4:e2m1:group256 or int8:sym:token.
    #[arg(long)]
    pub spec: Option<String>,
    /// Calibration activations [samples x in_features]; required by --gptq.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// Use the second-order solver instead of round-to-nearest.
    #[arg(long)]
    pub gptq: bool,
    /// GPTQ column block size (default 128).
    #[arg(long)]
    pub block: Option<usize>,
    /// GPTQ damping as a fraction of the mean Hessian diagonal (default 0.01).
    #[arg(long)]
    pub damping: Option<f64>,
    /// Rank of the low-rank compensation (omit to disable).
    #[arg(long)]
    pub lorc: Option<usize>,
    /// none, m1, m2 or m2:<rows>; overrides the constraint in --spec.
    #[arg(long)]
    pub scale_constraint: Option<String>,
    /// Skip the FP8 cast that otherwise follows a constrained FP4 solve.
    #[arg(long)]
    pub no_cast: bool,
    /// Recorded in the report; every stage is deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Quantized output (.qt).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Low-rank factors output (.lorc).
    #[arg(long)]
    pub lorc_out: Option<PathBuf>,
    /// FP8-cast output (.qt).
    #[arg(long)]
    pub cast_out: Option<PathBuf>,
    /// Also write the JSON report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TableFormat {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Recipe `SPEC` or `SPEC+gptq`; repeat, at least two.
    #[arg(long = "recipe", required = true)]
    pub recipes: Vec<String>,
    /// Calibration activations; adds proxy loss and enables `+gptq`.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BLOCK_SIZE)]
    pub block: usize,
    #[arg(long, default_value_t = DEFAULT_DAMPING)]
    pub damping: f64,
    #[arg(long, value_enum, default_value_t = TableFormat::Json)]
    pub format: TableFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    /// Write the histogram as two-column text for gnuplot.
    #[arg(long)]
    pub gnuplot: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GenKind {
    Normal,
    #[value(alias = "relu_skewed")]
    ReluSkewed,
    #[value(alias = "outlier_injected")]
    OutlierInjected,
    /// Fixed 15-element vector: 14 clustered values and one entry of 100.
    #[value(alias = "outlier_demo")]
    OutlierDemo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GenDtype {
    F64,
    F32,
    Csv,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub kind: GenKind,
    /// `ROWSxCOLS` or `N` (ignored by outlier-demo).
    #[arg(long, default_value = "1024x1024")]
    pub shape: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.01)]
    pub rate: f64,
    #[arg(long, default_value_t = 100.0)]
    pub magnitude: f64,
    #[arg(long, value_enum, default_value_t = GenDtype::F64)]
    pub dtype: GenDtype,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GptqArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub spec: String,
    #[arg(long, default_value_t = DEFAULT_BLOCK_SIZE)]
    pub block: usize,
    #[arg(long, default_value_t = DEFAULT_DAMPING)]
    pub damping: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LorcArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub quantized: PathBuf,
    #[arg(long, default_value_t = crate::lorc::DEFAULT_RANK)]
    pub rank: usize,
    /// Randomized range-finder SVD, for very large matrices.
    #[arg(long)]
    pub randomized: bool,
    /// Seed of the randomized SVD sketch.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CastArgs {
    #[arg(long)]
    pub quantized: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn default_block() -> usize {
    DEFAULT_BLOCK_SIZE
}

fn default_damping() -> f64 {
    DEFAULT_DAMPING
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GptqConfig {
    #[serde(default = "default_block")]
    pub block: usize,
    #[serde(default = "default_damping")]
    pub damping: f64,
}

impl Default for GptqConfig {
    fn default() -> Self {
        Self {
            block: DEFAULT_BLOCK_SIZE,
            damping: DEFAULT_DAMPING,
        }
    }
}

/// Fully resolved quantize recipe; also accepted as a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeConfig {
    pub spec: String,
    #[serde(default)]
    pub gptq: Option<GptqConfig>,
    #[serde(default)]
    pub lorc_rank: Option<usize>,
    #[serde(default)]
    pub scale_constraint: Option<String>,
    #[serde(default = "default_true")]
    pub cast: bool,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub weights: Option<PathBuf>,
    #[serde(default)]
    pub calib: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub lorc_out: Option<PathBuf>,
    #[serde(default)]
    pub cast_out: Option<PathBuf>,
}

impl RecipeConfig {
    /// The recipe string with `scale_constraint` folded in.
    pub fn resolved_spec(&self) -> Result<QuantSpec> {
        let spec: QuantSpec = self.spec.parse()?;
        match &self.scale_constraint {
            None => Ok(spec),
            Some(c) => spec.with_constraint(c.parse::<ScaleConstraint>()?),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
    }
}

/// Runs the parsed command and returns its JSON report.
pub fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::Quantize(a) => cmd_quantize(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Gen(a) => cmd_gen(a),
        Command::Gptq(a) => cmd_gptq(a),
        Command::Lorc(a) => cmd_lorc(a),
        Command::Cast(a) => cmd_cast(a),
    }
}

/// Process entry point: parses arguments, honours `FPQ_THREADS`, prints the
/// report or the error, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        return report_error(&e);
    }
    let as_csv = matches!(&cli.command, Command::Compare(c) if c.format == TableFormat::Csv);
    match run(cli) {
        Ok(report) => {
            let text = if as_csv {
                report.get("csv").and_then(Value::as_str).unwrap_or_default().to_owned()
            } else {
                serde_json::to_string_pretty(&report).expect("serializable") + "\n"
            };
            // A closed pipe (`fpq ... | head`) is not an error worth a panic.
            let _ = std::io::stdout().lock().write_all(text.as_bytes());
            0
        }
        Err(e) => report_error(&e),
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("FPQ_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("FPQ_THREADS must be a positive integer, got `{v}`")))?;
    // A second initialization in the same process is harmless.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn error_json(e: &Error) -> Value {
    let mut obj = json!({ "kind": e.kind(), "message": e.to_string() });
    if let Error::Io { path, .. } = e {
        obj["path"] = json!(path.display().to_string());
    }
    json!({ "error": obj })
}

fn report_error(e: &Error) -> i32 {
    eprintln!("{}", error_json(e));
    if e.is_usage_or_io() {
        2
    } else {
        1
    }
}

fn load_tensor(path: &Path) -> Result<Tensor> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        tensor_io::read_csv(path)
    } else {
        tensor_io::read_tensor(path)
    }
}

fn load_calib(path: &Path) -> Result<CalibrationSet> {
    Ok(CalibrationSet::new(load_tensor(path)?)?.with_source(CalibrationSource::File(path.to_path_buf())))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("serializable");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split(['x', 'X'])
        .map(|d| {
            d.trim()
                .parse::<usize>()
                .map_err(|_| Error::Usage(format!("bad shape `{s}`, expected e.g. 512x512")))
        })
        .collect()
}

fn merge_config(a: &QuantizeArgs) -> Result<RecipeConfig> {
    let mut cfg = match &a.config {
        Some(p) => RecipeConfig::from_file(p)?,
        None => RecipeConfig {
            spec: a
                .spec
                .clone()
                .ok_or_else(|| Error::Usage("--spec is required (or supply --config)".into()))?,
            gptq: None,
            lorc_rank: None,
            scale_constraint: None,
            cast: true,
            seed: None,
            weights: None,
            calib: None,
            out: None,
            lorc_out: None,
            cast_out: None,
        },
    };
    if let Some(s) = &a.spec {
        cfg.spec = s.clone();
    }
    if a.gptq || a.block.is_some() || a.damping.is_some() {
        let g = cfg.gptq.get_or_insert_with(GptqConfig::default);
        if let Some(b) = a.block {
            g.block = b;
        }
        if let Some(d) = a.damping {
            g.damping = d;
        }
    }
    macro_rules! take {
        ($field:ident) => {
            if a.$field.is_some() {
                cfg.$field = a.$field.clone();
            }
        };
    }
    take!(scale_constraint);
    take!(seed);
    take!(weights);
    take!(calib);
    take!(out);
    take!(lorc_out);
    take!(cast_out);
    if a.lorc.is_some() {
        cfg.lorc_rank = a.lorc;
    }
    if a.no_cast {
        cfg.cast = false;
    }
    Ok(cfg)
}

#[derive(Debug, Serialize)]
struct Stage {
    stage: &'static str,
    frobenius_err: f64,
    #[serde(flatten)]
    detail: Value,
    error: ErrorReport,
    timing_ms: f64,
}

pub fn cmd_quantize(a: QuantizeArgs) -> Result<Value> {
    let report_path = a.report.clone();
    let cfg = merge_config(&a)?;
    let spec = cfg.resolved_spec()?;
    let weights = cfg
        .weights
        .clone()
        .ok_or_else(|| Error::Usage("--weights is required".into()))?;
    let w = load_tensor(&weights)?;
    let calib = cfg.calib.as_deref().map(load_calib).transpose()?;

    let mut stages = Vec::new();
    let t0 = Instant::now();
    let q = match &cfg.gptq {
        Some(g) => {
            let calib = calib
                .as_ref()
                .ok_or_else(|| Error::Usage("--gptq needs --calib".into()))?;
            let hess = build_hessian(calib, g.damping)?;
            let out = gptq_quantize_detailed(&w, &hess, &spec, g.block)?;
            let mut detail = json!({ "block": g.block, "damping": g.damping });
            if let Some(free) = &out.unconstrained {
                let e = ErrorReport::of(&w, free, Some(calib))?;
                detail["unconstrained_frobenius_err"] = json!(e.frobenius_err);
                detail["unconstrained_proxy_loss"] = json!(e.proxy_loss);
            }
            let error = ErrorReport::of(&w, &out.quantized, Some(calib))?;
            stages.push(Stage {
                stage: "gptq",
                frobenius_err: error.frobenius_err,
                detail,
                error,
                timing_ms: ms(t0),
            });
            out.quantized
        }
        None => {
            let q = quantize(&w, &spec)?;
            let error = ErrorReport::of(&w, &q, calib.as_ref())?;
            stages.push(Stage {
                stage: "rtn",
                frobenius_err: error.frobenius_err,
                detail: json!({}),
                error,
                timing_ms: ms(t0),
            });
            q
        }
    };
    let layout = q.layout();

    let mut factors: Option<LorcFactors> = None;
    if let Some(rank) = cfg.lorc_rank {
        let t = Instant::now();
        let e = error_matrix(&w, &q)?;
        let f = lorc_factorize_with(&e, rank, SvdMethod::Dense)?;
        let w_tilde = apply_lorc(&q, &f)?;
        let error = ErrorReport::between(&w, &w_tilde, Some(&layout), calib.as_ref())?;
        stages.push(Stage {
            stage: "lorc",
            frobenius_err: error.frobenius_err,
            detail: json!({
                "rank": rank,
                "captured_energy": f.captured_energy(),
                "parameters": f.parameter_count(),
                "overhead_fraction": f.overhead_fraction(),
            }),
            error,
            timing_ms: ms(t),
        });
        factors = Some(f);
    }
    let reconstruct = |q: &QuantizedTensor| -> Result<Tensor> {
        match &factors {
            Some(f) => apply_lorc(q, f),
            None => q.dequantize(),
        }
    };

    let mut cast_report = None;
    if !spec.scale_constraint.is_none() {
        // The solve already ran on the constrained grid; this stage
        // re-derives the constraint from the stored scales and certifies it.
        let t = Instant::now();
        let c = constrain(q.scales(), &layout, spec.scale_constraint)?.expect("constraint present");
        let idempotent = c.constrained() == q.scales();
        let certified = c.certify() && idempotent;
        if !certified {
            return Err(Error::InvalidArgument(format!(
                "scales of `{spec}` failed power-of-two certification"
            )));
        }
        let error = ErrorReport::between(&w, &reconstruct(&q)?, Some(&layout), calib.as_ref())?;
        stages.push(Stage {
            stage: "scale_constraint",
            frobenius_err: error.frobenius_err,
            detail: json!({
                "constraint": spec.scale_constraint.to_string(),
                "certified": certified,
                "scales": q.scales().len(),
            }),
            error,
            timing_ms: ms(t),
        });

        let is_fp4 = matches!(spec.format, NumberFormat::Fp(f) if f.total_bits() == 4);
        if cfg.cast && is_fp4 {
            let t = Instant::now();
            let (q8, r) = cast_group_to_fp8(&q)?;
            let error = ErrorReport::between(&w, &reconstruct(&q8)?, Some(&layout), calib.as_ref())?;
            stages.push(Stage {
                stage: "cast",
                frobenius_err: error.frobenius_err,
                detail: json!({
                    "format": "e5m2",
                    "elements": r.elements,
                    "saturated": r.saturated,
                    "underflowed": r.underflowed,
                    "exact": r.is_exact(),
                }),
                error,
                timing_ms: ms(t),
            });
            if let Some(p) = &cfg.cast_out {
                tensor_io::write_quantized(p, &q8)?;
            }
            cast_report = Some(r);
        }
    }

    if let (Some(p), Some(f)) = (&cfg.lorc_out, &factors) {
        tensor_io::write_lorc(p, f)?;
    }
    if let Some(p) = &cfg.out {
        match (&cfg.lorc_out, &factors) {
            (Some(lp), Some(_)) => tensor_io::write_quantized_with_lorc(p, &q, &lp.display().to_string())?,
            _ => tensor_io::write_quantized(p, &q)?,
        }
    }

    let errs: Vec<f64> = stages.iter().map(|s| s.frobenius_err).collect();
    let monotone = errs.windows(2).all(|p| p[1] <= p[0]);
    let report = json!({
        "command": "quantize",
        "config": cfg,
        "spec": spec.to_string(),
        "shape": w.shape(),
        "stages": stages,
        "monotone": monotone,
        "cast_exact": cast_report.map(|r| r.is_exact()),
        "final": stages.last().map(|s| &s.error),
    });
    if let Some(p) = report_path {
        write_json(&p, &report)?;
    }
    Ok(report)
}

/// `SPEC` or `SPEC+gptq`.
fn parse_recipe(r: &str) -> Result<(QuantSpec, bool)> {
    match r.strip_suffix("+gptq") {
        Some(s) => Ok((s.parse()?, true)),
        None => Ok((r.parse()?, false)),
    }
}

const CSV_COLUMNS: [&str; 9] = [
    "recipe",
    "mse",
    "max_abs_err",
    "sqnr_db",
    "frobenius_err",
    "proxy_loss",
    "clustered_mse",
    "clustered_max_abs_err",
    "mean_group_mse",
];

pub fn cmd_compare(a: CompareArgs) -> Result<Value> {
    if a.recipes.len() < 2 {
        return Err(Error::Usage("compare needs at least two --recipe values".into()));
    }
    let recipes = a.recipes.iter().map(|r| parse_recipe(r)).collect::<Result<Vec<_>>>()?;
    let w = load_tensor(&a.weights)?;
    let calib = a.calib.as_deref().map(load_calib).transpose()?;
    let hess = if recipes.iter().any(|(_, g)| *g) {
        let c = calib
            .as_ref()
            .ok_or_else(|| Error::Usage("+gptq recipes need --calib".into()))?;
        Some(build_hessian(c, a.damping)?)
    } else {
        None
    };
    let mut reports = Vec::with_capacity(recipes.len());
    for (spec, use_gptq) in &recipes {
        let q = match (use_gptq, &hess) {
            (true, Some(h)) => gptq_quantize(&w, h, spec, a.block)?,
            _ => quantize(&w, spec)?,
        };
        reports.push(ErrorReport::of(&w, &q, calib.as_ref())?);
    }
    let cmp = Comparison::from_reports(reports)?;

    let mut wtr = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Schema(e.to_string());
    wtr.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for (name, r) in a.recipes.iter().zip(&cmp.reports) {
        let mean_group = r.per_group_mse.iter().sum::<f64>() / r.per_group_mse.len().max(1) as f64;
        wtr.write_record([
            name.clone(),
            r.mse.to_string(),
            r.max_abs_err.to_string(),
            r.sqnr_db.to_string(),
            r.frobenius_err.to_string(),
            r.proxy_loss.map(|v| v.to_string()).unwrap_or_default(),
            r.clustered_mse.to_string(),
            r.clustered_max_abs_err.to_string(),
            mean_group.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let csv =
        String::from_utf8(wtr.into_inner().map_err(|e| Error::Schema(e.to_string()))?).expect("csv output is UTF-8");

    let report = json!({
        "command": "compare",
        "weights": a.weights.display().to_string(),
        "recipes": a.recipes,
        "reports": cmp.reports,
        "winners": cmp.winners,
    });
    if let Some(p) = &a.out {
        match a.format {
            TableFormat::Json => write_json(p, &report)?,
            TableFormat::Csv => std::fs::write(p, &csv).map_err(|e| Error::io(p, e))?,
        }
    }
    let mut report = report;
    if a.format == TableFormat::Csv {
        report["csv"] = json!(csv);
    }
    Ok(report)
}

pub fn cmd_analyze(a: AnalyzeArgs) -> Result<Value> {
    let t = load_tensor(&a.input)?;
    let r = summarize_with_bins(&t, a.bins)?;
    if let Some(p) = &a.gnuplot {
        std::fs::write(p, r.histogram.to_gnuplot()).map_err(|e| Error::io(p, e))?;
    }
    let report = json!({
        "command": "analyze",
        "input": a.input.display().to_string(),
        "shape": t.shape(),
        "bins": a.bins,
        "report": r,
    });
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    Ok(report)
}

pub fn cmd_gen(a: GenArgs) -> Result<Value> {
    let (t, kind) = match a.kind {
        GenKind::OutlierDemo => (outlier_demo_vector(), "outlier_demo".to_string()),
        k => {
            let kind = match k {
                GenKind::Normal => SyntheticKind::Normal,
                GenKind::ReluSkewed => SyntheticKind::ReluSkewed,
                _ => SyntheticKind::OutlierInjected {
                    rate: a.rate,
                    magnitude: a.magnitude,
                },
            };
            let shape = parse_shape(&a.shape)?;
            (gen_synthetic(kind, &shape, a.seed)?, kind.to_string())
        }
    };
    match a.dtype {
        GenDtype::F64 => tensor_io::write_tensor(&a.out, &t)?,
        GenDtype::F32 => tensor_io::write_tensor_f32(&a.out, &t)?,
        GenDtype::Csv => tensor_io::write_csv(&a.out, &t)?,
    }
    Ok(json!({
        "command": "gen",
        "kind": kind,
        "shape": t.shape(),
        "seed": a.seed,
        "out": a.out.display().to_string(),
    }))
}

pub fn cmd_gptq(a: GptqArgs) -> Result<Value> {
    let spec: QuantSpec = a.spec.parse()?;
    let w = load_tensor(&a.weights)?;
    let calib = load_calib(&a.calib)?;
    let t = Instant::now();
    let hess = build_hessian(&calib, a.damping)?;
    let q = gptq_quantize(&w, &hess, &spec, a.block)?;
    let elapsed = ms(t);
    let rtn = quantize(&w, &spec)?;
    tensor_io::write_quantized(&a.out, &q)?;
    Ok(json!({
        "command": "gptq",
        "spec": spec.to_string(),
        "block": a.block,
        "damping": a.damping,
        "damping_lambda": hess.damping(),
        "dead_columns": hess.dead_columns().iter().filter(|&&d| d).count(),
        "gptq": ErrorReport::of(&w, &q, Some(&calib))?,
        "rtn": ErrorReport::of(&w, &rtn, Some(&calib))?,
        "timing_ms": elapsed,
        "out": a.out.display().to_string(),
    }))
}

pub fn cmd_lorc(a: LorcArgs) -> Result<Value> {
    let w = load_tensor(&a.weights)?;
    let q = tensor_io::read_quantized(&a.quantized)?;
    let method = if a.randomized {
        SvdMethod::randomized(a.seed)
    } else {
        SvdMethod::Dense
    };
    let e = error_matrix(&w, &q)?;
    let f = lorc_factorize_with(&e, a.rank, method)?;
    let w_tilde = apply_lorc(&q, &f)?;
    tensor_io::write_lorc(&a.out, &f)?;
    Ok(json!({
        "command": "lorc",
        "rank": f.rank(),
        "method": if a.randomized { "randomized" } else { "dense" },
        "captured_energy": f.captured_energy(),
        "parameters": f.parameter_count(),
        "overhead_fraction": f.overhead_fraction(),
        "frobenius_err_before": e.frobenius_norm(),
        "frobenius_err_after": w.frobenius_distance(&w_tilde)?,
        "out": a.out.display().to_string(),
    }))
}

pub fn cmd_cast(a: CastArgs) -> Result<Value> {
    let q = tensor_io::read_quantized(&a.quantized)?;
    let layout = q.layout();
    let certified = constrain(q.scales(), &layout, q.spec().scale_constraint)?
        .map(|c| c.certify() && c.constrained() == q.scales())
        .unwrap_or(false);
    let (q8, r) = cast_group_to_fp8(&q)?;
    tensor_io::write_quantized(&a.out, &q8)?;
    Ok(json!({
        "command": "cast",
        "input_spec": q.spec().to_string(),
        "output_spec": q8.spec().to_string(),
        "certified": certified,
        "report": r,
        "exact": r.is_exact(),
        "out": a.out.display().to_string(),
    }))
}
