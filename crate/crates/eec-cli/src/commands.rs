//! The `eec` command-line front end.
//!
//! Every command prints a deterministic human-readable table on standard
//! output and can additionally write newline-delimited JSON records with
//! `--out`. Wall-clock timings appear only in the JSON records (and on
//! standard error), never on standard output, so stdout is bit-reproducible
//! for fixed flags and inputs.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use eec_core::harness::{
    gen_stream, run_policy, train_moe_toy, GateKind, StreamSpec, ToyTaskSpec, ViewTransform,
};
use eec_core::memory::{CompressionPolicy, View};
use eec_core::metrics::{aggregate, evaluate_pair, FramePairResult};
use eec_core::moe::{grad_check, GradCheckConfig};

use crate::formats;
use crate::manifest::{read_manifest, Manifest};
use crate::report::{fmt_metric, write_jsonl, GradRow, ResultRow, Table, TrainRow};

#[derive(Parser)]
#[command(
    name = "eec",
    version,
    about = "Two-view correspondence toolkit: synthetic streams, memory-policy benchmarks, \
             fusion training, gradient checks, and mask evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the fusion block's analytic gradients against finite differences.
    MoeCheck(MoeCheckArgs),
    /// Generate a synthetic two-view stream file from a JSON spec.
    GenData(GenDataArgs),
    /// Benchmark memory-compression policies on a stream file.
    CompressBench(CompressBenchArgs),
    /// Score prediction masks against ground-truth masks, paired by manifest.
    Eval(EvalArgs),
    /// Train the fusion block on a closed-form gating task.
    TrainToy(TrainToyArgs),
    /// Grid memory capacities against stream lengths.
    Sweep(SweepArgs),
}

/// Run the CLI on the given argument list and return the process exit code:
/// 0 when the command completed (and its check passed, where there is one),
/// 1 on any runtime failure, 2 on usage errors.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            1
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::MoeCheck(args) => cmd_moe_check(args),
        Command::GenData(args) => cmd_gen_data(args),
        Command::CompressBench(args) => cmd_compress_bench(args),
        Command::Eval(args) => cmd_eval(args),
        Command::TrainToy(args) => cmd_train_toy(args),
        Command::Sweep(args) => cmd_sweep(args),
    }
}

// ---------------------------------------------------------------------------
// moe-check

#[derive(Clone, Debug)]
struct Dims {
    h: usize,
    w: usize,
    c: usize,
}

fn parse_dims(s: &str) -> std::result::Result<Dims, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected `h,w,c`".into());
    }
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("bad dimension `{t}`"));
    Ok(Dims { h: parse(parts[0])?, w: parse(parts[1])?, c: parse(parts[2])? })
}

#[derive(Args)]
struct MoeCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Feature grid as `h,w,c`.
    #[arg(long, default_value = "4,4,4", value_parser = parse_dims)]
    dims: Dims,
    /// Maximum allowed relative error per parameter group.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Central finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Write one JSON record per parameter group.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_moe_check(args: MoeCheckArgs) -> Result<i32> {
    let started = Instant::now();
    let cfg = GradCheckConfig {
        step: args.step,
        tol: args.tol,
        ..GradCheckConfig::new(args.seed, args.dims.h, args.dims.w, args.dims.c)
    };
    let report = grad_check(&cfg).context("gradient check could not run")?;
    let wall_ms = started.elapsed().as_millis() as u64;

    let mut table = Table::new(["group", "max rel err", "status"]);
    for row in &report.rows {
        table.row([row.name.to_string(), format!("{:.3e}", row.max_err), verdict(row.pass)]);
    }
    print!("{}", table.render());
    println!(
        "gradient check {} (seed {}, grid {}x{}x{}, step {:.1e}, tol {:.1e}, max err {:.3e})",
        verdict(report.pass),
        args.seed,
        args.dims.h,
        args.dims.w,
        args.dims.c,
        args.step,
        report.tol,
        report.max_err()
    );
    eprintln!("moe-check: {wall_ms} ms");

    if let Some(out) = &args.out {
        let rows: Vec<GradRow> = report
            .rows
            .iter()
            .map(|r| GradRow {
                experiment: "moe-check".into(),
                seed: args.seed,
                h: args.dims.h,
                w: args.dims.w,
                c: args.dims.c,
                group: r.name.into(),
                max_rel_err: r.max_err,
                pass: r.pass,
                wall_ms,
            })
            .collect();
        write_jsonl(&rows, out).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(if report.pass { 0 } else { 1 })
}

fn verdict(pass: bool) -> String {
    if pass { "pass".into() } else { "FAIL".into() }
}

// ---------------------------------------------------------------------------
// gen-data

/// JSON stream description. Only `seed` and `frames` are required; every
/// other field defaults to the standard revisit-scenario geometry.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    seed: u64,
    frames: u32,
    #[serde(default = "d_grid")]
    h: usize,
    #[serde(default = "d_grid")]
    w: usize,
    #[serde(default = "d_grid")]
    channels: usize,
    #[serde(default = "d_amplitude")]
    amplitude: f64,
    #[serde(default = "d_noise")]
    noise: f64,
    #[serde(default = "d_blob_radius")]
    blob_radius: f64,
    #[serde(default = "d_drift_speed")]
    drift_speed: f64,
    #[serde(default)]
    revisit_gap: u32,
    #[serde(default)]
    occlusion_windows: Vec<(u32, u32)>,
    #[serde(default = "d_appearance_drift")]
    appearance_drift: f64,
    #[serde(default = "d_channel_shift")]
    channel_shift: usize,
    #[serde(default = "d_view_offset")]
    view_offset: f64,
}

fn d_grid() -> usize {
    8
}
fn d_amplitude() -> f64 {
    3.0
}
fn d_noise() -> f64 {
    0.25
}
fn d_blob_radius() -> f64 {
    1.7
}
fn d_drift_speed() -> f64 {
    0.45
}
fn d_appearance_drift() -> f64 {
    0.05
}
fn d_channel_shift() -> usize {
    1
}
fn d_view_offset() -> f64 {
    0.1
}

impl SpecFile {
    fn into_spec(self) -> StreamSpec {
        StreamSpec {
            seed: self.seed,
            frames: self.frames,
            h: self.h,
            w: self.w,
            channels: self.channels,
            amplitude: self.amplitude,
            noise: self.noise,
            blob_radius: self.blob_radius,
            drift_speed: self.drift_speed,
            revisit_gap: self.revisit_gap,
            occlusion_windows: self.occlusion_windows,
            appearance_drift: self.appearance_drift,
            view: ViewTransform { channel_shift: self.channel_shift, offset: self.view_offset },
        }
    }
}

fn load_spec(path: &Path) -> Result<StreamSpec> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading spec {}", path.display()))?;
    let file: SpecFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing spec {}", path.display()))?;
    Ok(file.into_spec())
}

#[derive(Args)]
struct GenDataArgs {
    /// JSON stream description (see `SpecFile` in the README).
    #[arg(long)]
    spec: PathBuf,
    /// Output stream file.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_gen_data(args: GenDataArgs) -> Result<i32> {
    let started = Instant::now();
    let spec = load_spec(&args.spec)?;
    let records = gen_stream(&spec).context("generating stream")?;
    formats::write_stream(&records, &args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    let visible = records.iter().filter(|r| r.ego_mask.any()).count();
    println!(
        "wrote {} (frames {}, grid {}x{}, channels {}, visible {})",
        args.out.display(),
        records.len(),
        spec.h,
        spec.w,
        spec.channels,
        visible
    );
    eprintln!("gen-data: {} ms", started.elapsed().as_millis());
    Ok(0)
}

// ---------------------------------------------------------------------------
// compress-bench

fn parse_policies(
    names: &str,
    cluster_seed: u64,
    iou_threshold: f64,
) -> Result<Vec<CompressionPolicy>> {
    if names == "all" {
        return Ok(vec![
            CompressionPolicy::Ours,
            CompressionPolicy::Fifo,
            CompressionPolicy::Cluster { seed: cluster_seed },
            CompressionPolicy::IouSelect { threshold: iou_threshold },
        ]);
    }
    names
        .split(',')
        .map(|name| match name.trim() {
            "ours" => Ok(CompressionPolicy::Ours),
            "fifo" => Ok(CompressionPolicy::Fifo),
            "cluster" => Ok(CompressionPolicy::Cluster { seed: cluster_seed }),
            "iou_select" | "iou-select" => {
                Ok(CompressionPolicy::IouSelect { threshold: iou_threshold })
            }
            other => bail!("unknown policy `{other}` (expected ours, fifo, cluster, iou_select)"),
        })
        .collect()
}

#[derive(Args)]
struct CompressBenchArgs {
    /// Input stream file (see `gen-data`).
    #[arg(long)]
    stream: PathBuf,
    /// Memory capacity M (frames retained per bank).
    #[arg(long)]
    memory: usize,
    /// Comma-separated policies, or `all`.
    #[arg(long, default_value = "all")]
    policy: String,
    #[arg(long, default_value_t = 0)]
    cluster_seed: u64,
    /// Admission threshold for `iou_select`.
    #[arg(long, default_value_t = 0.5)]
    iou_threshold: f64,
    /// Write one JSON record per policy.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Sort rows best-IoU-first with a stable, fully deterministic order:
/// undefined IoU ranks last, ties break on the policy name.
fn rank_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        let key = |r: &ResultRow| r.mean_iou.unwrap_or(f64::NEG_INFINITY);
        key(b)
            .partial_cmp(&key(a))
            .expect("metric means are never NaN")
            .then_with(|| a.policy.cmp(&b.policy))
    });
}

fn summary_table(rows: &[ResultRow]) -> Table {
    let mut table = Table::new(["policy", "frames", "iou", "le", "ca", "ba", "assoc"]);
    for r in rows {
        table.row([
            r.policy.clone().unwrap_or_else(|| "-".into()),
            r.evaluated_frames.to_string(),
            fmt_metric(r.mean_iou),
            fmt_metric(r.mean_le),
            fmt_metric(r.mean_ca),
            fmt_metric(r.balanced_accuracy),
            fmt_metric(r.association_accuracy),
        ]);
    }
    table
}

fn cmd_compress_bench(args: CompressBenchArgs) -> Result<i32> {
    let records = formats::read_stream(&args.stream)
        .with_context(|| format!("reading {}", args.stream.display()))?;
    let policies = parse_policies(&args.policy, args.cluster_seed, args.iou_threshold)?;
    let first = &records[0].ego_feature;
    println!(
        "stream {}: frames {}, grid {}x{}, channels {}, memory {}",
        args.stream.display(),
        records.len(),
        first.h(),
        first.w(),
        first.c(),
        args.memory
    );

    let mut rows = Vec::new();
    for policy in &policies {
        let started = Instant::now();
        let summary = run_policy(&records, args.memory, policy)
            .with_context(|| format!("running policy {}", policy.name()))?;
        let wall_ms = started.elapsed().as_millis() as u64;
        eprintln!("compress-bench {}: {} ms", policy.name(), wall_ms);
        rows.push(ResultRow::from_summary(
            "compress-bench",
            Some(policy.name()),
            Some(args.memory),
            Some(records.len() as u32),
            &summary,
            wall_ms,
        ));
    }
    rank_rows(&mut rows);
    print!("{}", summary_table(&rows).render());

    if let Some(out) = &args.out {
        write_jsonl(&rows, out).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// eval

#[derive(Args)]
struct EvalArgs {
    /// Manifest of predicted masks.
    #[arg(long)]
    pred: PathBuf,
    /// Manifest of ground-truth masks.
    #[arg(long)]
    gt: PathBuf,
    /// Write one JSON record per subset (all/ego/exo).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn view_name(view: View) -> &'static str {
    match view {
        View::Ego => "ego",
        View::Exo => "exo",
    }
}

fn load_mask_checked(path: &Path, w: usize, h: usize) -> Result<eec_core::metrics::Mask> {
    let mask =
        formats::read_mask(path).with_context(|| format!("reading {}", path.display()))?;
    if (mask.w(), mask.h()) != (w, h) {
        bail!(
            "{}: mask is {}x{} but the manifest declares {}x{}",
            path.display(),
            mask.w(),
            mask.h(),
            w,
            h
        );
    }
    Ok(mask)
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    let started = Instant::now();
    let pred = read_manifest(&args.pred)
        .with_context(|| format!("reading manifest {}", args.pred.display()))?;
    let gt = read_manifest(&args.gt)
        .with_context(|| format!("reading manifest {}", args.gt.display()))?;
    let pairs = pair_manifests(&pred, &gt)?;

    let mut per_frame: Vec<(View, FramePairResult)> = Vec::with_capacity(pairs.len());
    for (p, g) in &pairs {
        let pred_mask = load_mask_checked(&p.mask_path, p.image_w, p.image_h)?;
        let gt_mask = load_mask_checked(&g.mask_path, g.image_w, g.image_h)?;
        let result = evaluate_pair(&pred_mask, &gt_mask).with_context(|| {
            format!("evaluating frame {} ({})", p.frame_id, view_name(p.view))
        })?;
        per_frame.push((p.view, result));
    }
    let wall_ms = started.elapsed().as_millis() as u64;

    let mut rows = Vec::new();
    let all: Vec<FramePairResult> = per_frame.iter().map(|(_, r)| r.clone()).collect();
    rows.push(row_for_subset("eval", &all, wall_ms));
    for view in [View::Ego, View::Exo] {
        let subset: Vec<FramePairResult> = per_frame
            .iter()
            .filter(|(v, _)| *v == view)
            .map(|(_, r)| r.clone())
            .collect();
        if !subset.is_empty() && subset.len() != all.len() {
            rows.push(row_for_subset(&format!("eval:{}", view_name(view)), &subset, wall_ms));
        }
    }

    let mut table = Table::new(["subset", "frames", "iou", "le", "ca", "ba", "assoc"]);
    for r in &rows {
        table.row([
            r.experiment.clone(),
            r.evaluated_frames.to_string(),
            fmt_metric(r.mean_iou),
            fmt_metric(r.mean_le),
            fmt_metric(r.mean_ca),
            fmt_metric(r.balanced_accuracy),
            fmt_metric(r.association_accuracy),
        ]);
    }
    print!("{}", table.render());
    eprintln!("eval: {wall_ms} ms");

    if let Some(out) = &args.out {
        write_jsonl(&rows, out).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(0)
}

fn row_for_subset(name: &str, results: &[FramePairResult], wall_ms: u64) -> ResultRow {
    let summary = aggregate(results);
    ResultRow::from_summary(name, None, None, None, &summary, wall_ms)
}

type Pair<'a> = (&'a crate::manifest::ManifestEntry, &'a crate::manifest::ManifestEntry);

/// Match prediction entries to ground-truth entries by (view, frame id),
/// requiring the two manifests to cover exactly the same frames.
fn pair_manifests<'a>(pred: &'a Manifest, gt: &'a Manifest) -> Result<Vec<Pair<'a>>> {
    if pred.entries.is_empty() {
        bail!("prediction manifest has no entries");
    }
    let mut pairs = Vec::with_capacity(pred.entries.len());
    let mut gt_used = vec![false; gt.entries.len()];
    for p in &pred.entries {
        let hit = gt
            .entries
            .iter()
            .position(|g| g.view == p.view && g.frame_id == p.frame_id)
            .ok_or_else(|| {
                anyhow::anyhow!(
                    "ground-truth manifest is missing {} frame {}",
                    view_name(p.view),
                    p.frame_id
                )
            })?;
        gt_used[hit] = true;
        pairs.push((p, &gt.entries[hit]));
    }
    if let Some(unused) = gt_used.iter().position(|u| !u) {
        let g = &gt.entries[unused];
        bail!(
            "prediction manifest is missing {} frame {}",
            view_name(g.view),
            g.frame_id
        );
    }
    Ok(pairs)
}

// ---------------------------------------------------------------------------
// train-toy

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    /// Position- and parity-dependent gains: the fusion block must learn
    /// non-uniform gates to fit the target.
    SplitGates,
    /// Target is the plain sum of the inputs.
    Sum,
}

#[derive(Args)]
struct TrainToyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3000)]
    steps: usize,
    /// Gradient-descent step size.
    #[arg(long, default_value_t = 0.4)]
    lr: f64,
    #[arg(long, value_enum, default_value_t = TaskArg::SplitGates)]
    task: TaskArg,
    /// Write one JSON record for the run.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_train_toy(args: TrainToyArgs) -> Result<i32> {
    let started = Instant::now();
    let (kind, task_name) = match args.task {
        TaskArg::SplitGates => (GateKind::SplitGates, "split-gates"),
        TaskArg::Sum => (GateKind::Sum, "sum"),
    };
    let task =
        ToyTaskSpec { steps: args.steps, learning_rate: args.lr, ..ToyTaskSpec::new(kind) };
    let report = train_moe_toy(args.seed, &task).context("training failed")?;
    let wall_ms = started.elapsed().as_millis() as u64;

    println!(
        "task {task_name}: {} steps at lr {} (seed {}), loss {:.6e} -> {:.6e}",
        args.steps, args.lr, args.seed, report.curve[0], report.final_mse
    );
    let mut table = Table::new(["variant", "mse"]);
    table.row(["gated fusion (trained)".to_string(), format!("{:.6e}", report.final_mse)]);
    table.row(["simple add".to_string(), format!("{:.6e}", report.baselines.simple_add)]);
    table.row(["memory expert only*".to_string(), format!("{:.6e}", report.baselines.mem_only)]);
    table.row(["view expert only*".to_string(), format!("{:.6e}", report.baselines.view_only)]);
    print!("{}", table.render());
    println!("* single-expert baseline: approximates removing the other view's input.");
    eprintln!("train-toy: {wall_ms} ms");

    if let Some(out) = &args.out {
        let row = TrainRow {
            experiment: "train-toy".into(),
            seed: args.seed,
            task: task_name.into(),
            steps: args.steps,
            learning_rate: args.lr,
            final_mse: report.final_mse,
            simple_add_mse: report.baselines.simple_add,
            mem_only_mse: report.baselines.mem_only,
            view_only_mse: report.baselines.view_only,
            wall_ms,
        };
        write_jsonl(&[row], out).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// sweep

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|t| t.trim().parse::<T>().map_err(|_| anyhow::anyhow!("bad {what} value `{t}`")))
        .collect()
}

#[derive(Args)]
struct SweepArgs {
    /// JSON stream description; its `frames` value is the default grid.
    #[arg(long)]
    spec: PathBuf,
    /// Comma-separated memory capacities.
    #[arg(long, default_value = "4,6,8")]
    memory: String,
    /// Comma-separated stream lengths (defaults to the `frames` value in
    /// the stream description).
    #[arg(long)]
    frames: Option<String>,
    /// Comma-separated policies, or `all`.
    #[arg(long, default_value = "all")]
    policy: String,
    #[arg(long, default_value_t = 0)]
    cluster_seed: u64,
    #[arg(long, default_value_t = 0.5)]
    iou_threshold: f64,
    /// Write one JSON record per (frames, memory, policy) cell.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_sweep(args: SweepArgs) -> Result<i32> {
    let base = load_spec(&args.spec)?;
    let capacities: Vec<usize> = parse_list(&args.memory, "memory")?;
    let frame_counts: Vec<u32> = match &args.frames {
        Some(s) => parse_list(s, "frames")?,
        None => vec![base.frames],
    };
    let policies = parse_policies(&args.policy, args.cluster_seed, args.iou_threshold)?;
    if capacities.is_empty() || frame_counts.is_empty() {
        bail!("sweep needs at least one memory capacity and one stream length");
    }

    let mut rows = Vec::new();
    let mut table = Table::new(["frames", "memory", "policy", "iou", "le", "ca", "ba", "assoc"]);
    for &frames in &frame_counts {
        let spec = StreamSpec { frames, ..base.clone() };
        let records = gen_stream(&spec)
            .with_context(|| format!("generating {frames}-frame stream"))?;
        for &memory in &capacities {
            for policy in &policies {
                let started = Instant::now();
                let summary = run_policy(&records, memory, policy)
                    .with_context(|| format!("running policy {}", policy.name()))?;
                let wall_ms = started.elapsed().as_millis() as u64;
                let row = ResultRow::from_summary(
                    "sweep",
                    Some(policy.name()),
                    Some(memory),
                    Some(frames),
                    &summary,
                    wall_ms,
                );
                table.row([
                    frames.to_string(),
                    memory.to_string(),
                    policy.name().to_string(),
                    fmt_metric(row.mean_iou),
                    fmt_metric(row.mean_le),
                    fmt_metric(row.mean_ca),
                    fmt_metric(row.balanced_accuracy),
                    fmt_metric(row.association_accuracy),
                ]);
                rows.push(row);
            }
        }
    }
    print!("{}", table.render());

    if let Some(out) = &args.out {
        write_jsonl(&rows, out).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(0)
}
