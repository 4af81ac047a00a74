//! `routelens` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use routelens_core::decomp::Channel;
use routelens_core::paths::{DiversityConfig, GroupRater, GroupSampling, PassAll};
use routelens_core::probe::ProbeConfig;
use serde::Serialize;

use crate::analysis::{self, AnalysisError, ProbeTarget};
use crate::capture::{self, Capture, CaptureError};
use crate::corpus::{self, CorpusConfig};
use crate::labels::Labels;
use crate::layers::LayerSpec;
use crate::rater::HttpRater;
use crate::report::{echo_command, ReportEnvelope};
use crate::svg::{self, Style};
use crate::synth_io::{self, SynthJob};
use crate::validate;

pub const SEED_ENV: &str = "ROUTELENS_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "routelens",
    version,
    about = "Control/content decomposition and routing analyses for MoE captures"
)]
struct Cli {
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for every randomized step (falls back to $ROUTELENS_SEED, then 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write visible/blind channel shards for some layers.
    Decompose(DecomposeArgs),
    /// Magnitude/router-weight correlation and top-dimension probes.
    Amplify(AmplifyArgs),
    /// Linear probes from one channel to a label.
    Probe(ProbeArgs),
    /// Cross-layer cosine continuity of each channel.
    Continuity(ContinuityArgs),
    /// Exact-match expert path groups over a layer band.
    Paths(PathsArgs),
    /// Per-layer k-means in one subspace, cross-layer groups and lexical diversity.
    Cluster(ClusterArgs),
    /// Render path bundles per category over a shared flow layout.
    Render(RenderArgs),
    /// Generate a synthetic capture.
    Synth(SynthArgs),
    /// Check a capture's format and invariants.
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ChannelArg {
    Vis,
    Blind,
    Full,
}

impl From<ChannelArg> for Channel {
    fn from(c: ChannelArg) -> Self {
        match c {
            ChannelArg::Vis => Channel::Visible,
            ChannelArg::Blind => Channel::Blind,
            ChannelArg::Full => Channel::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TargetArg {
    Expert,
    ExpertNext,
    Language,
    TokenId,
    Position,
}

impl From<TargetArg> for ProbeTarget {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Expert => ProbeTarget::Expert,
            TargetArg::ExpertNext => ProbeTarget::ExpertNext,
            TargetArg::Language => ProbeTarget::Language,
            TargetArg::TokenId => ProbeTarget::TokenId,
            TargetArg::Position => ProbeTarget::Position,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SamplingArg {
    Uniform,
    SizeWeighted,
}

#[derive(Debug, Args)]
struct CaptureArg {
    /// Capture directory.
    #[arg(long)]
    capture: PathBuf,
}

#[derive(Debug, Args)]
struct ProbeOpts {
    /// L2 penalty of the probe.
    #[arg(long, default_value_t = ProbeConfig::default().l2_lambda)]
    lambda: f64,
    #[arg(long, default_value_t = ProbeConfig::default().max_epochs)]
    max_epochs: usize,
    #[arg(long, default_value_t = ProbeConfig::default().train_fraction)]
    train_fraction: f64,
}

impl ProbeOpts {
    fn config(&self, seed: u64) -> ProbeConfig {
        ProbeConfig {
            l2_lambda: self.lambda,
            max_epochs: self.max_epochs,
            train_fraction: self.train_fraction,
            seed,
            ..ProbeConfig::default()
        }
    }
}

#[derive(Debug, Args)]
struct DecomposeArgs {
    #[command(flatten)]
    capture: CaptureArg,
    /// Layers (`3`, `0..4`, `0:3`, `1,5`).
    #[arg(long)]
    layer: LayerSpec,
    /// Output directory for the shards (default: the capture directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AmplifyArgs {
    #[command(flatten)]
    capture: CaptureArg,
    /// Layers (default: all).
    #[arg(long)]
    layers: Option<LayerSpec>,
    /// Dimension fractions for the probe comparison.
    #[arg(long, value_delimiter = ',', default_value = "0.02")]
    fractions: Vec<f64>,
    #[command(flatten)]
    probe: ProbeOpts,
    /// Report file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[command(flatten)]
    capture: CaptureArg,
    #[arg(long, value_enum)]
    target: TargetArg,
    #[arg(long, value_enum)]
    channel: ChannelArg,
    /// Layers (default: all; the last layer is skipped for `expert-next`).
    #[arg(long)]
    layers: Option<LayerSpec>,
    #[command(flatten)]
    probe: ProbeOpts,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ContinuityArgs {
    #[command(flatten)]
    capture: CaptureArg,
    #[arg(long)]
    layers: Option<LayerSpec>,
    /// Bootstrap resamples.
    #[arg(long, default_value_t = routelens_core::continuity::DEFAULT_BOOTSTRAP)]
    boot: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also draw a line chart.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PathsArgs {
    #[command(flatten)]
    capture: CaptureArg,
    /// Layer band, e.g. `8:16`.
    #[arg(long)]
    band: LayerSpec,
    /// Smallest group written.
    #[arg(long, default_value_t = 1)]
    min_group: usize,
    /// Sample tokens listed per group.
    #[arg(long, default_value_t = 10)]
    samples: usize,
    /// Group file, one JSON object per line.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ClusterArgs {
    #[command(flatten)]
    capture: CaptureArg,
    #[arg(long)]
    band: LayerSpec,
    #[arg(long, value_enum)]
    subspace: ChannelArg,
    /// Clusters per layer (default: the layer's expert count).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 10)]
    sample_size: usize,
    #[arg(long, default_value_t = 100)]
    n_groups: usize,
    #[arg(long, value_enum, default_value = "uniform")]
    sampling: SamplingArg,
    /// Endpoint of an external group rater (default: keep every group).
    #[arg(long)]
    rater_url: Option<String>,
    /// Also write the cross-layer groups as JSON lines.
    #[arg(long)]
    groups_out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    min_group: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[command(flatten)]
    capture: CaptureArg,
    #[arg(long)]
    band: LayerSpec,
    /// Category labels (JSON).
    #[arg(long)]
    categories: PathBuf,
    /// Panels to draw, in order (default: every category).
    #[arg(long, value_delimiter = ',')]
    panels: Option<Vec<String>>,
    /// Paths drawn per panel.
    #[arg(long, default_value_t = 500)]
    max_paths: usize,
    #[arg(long, default_value_t = 1)]
    sweeps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Generator spec (JSON).
    #[arg(
        long,
        required_unless_present = "colon_corpus",
        conflicts_with = "colon_corpus"
    )]
    spec: Option<PathBuf>,
    /// Build the bundled colon corpus capture (with labels.json) instead.
    #[arg(long)]
    colon_corpus: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[command(flatten)]
    capture: CaptureArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
}

impl From<AnalysisError> for Failure {
    fn from(e: AnalysisError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<CaptureError> for Failure {
    fn from(e: CaptureError) -> Self {
        Failure::Data(e.to_string())
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn write_text(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| io_failure(p, e)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::Data(format!("stdout: {e}"))),
    }
}

struct Ctx {
    command: Vec<String>,
    seed: u64,
    /// Seed came from the flag or the environment rather than the default.
    seed_given: bool,
}

impl Ctx {
    fn emit(&self, out: Option<&Path>, payload: impl Serialize) -> Result<(), Failure> {
        write_text(
            out,
            &ReportEnvelope::new(self.command.clone(), self.seed, payload).to_json(),
        )
    }
}

fn resolve_layers(capture: &Capture, spec: Option<&LayerSpec>) -> Result<Vec<u32>, Failure> {
    match spec {
        Some(s) => Ok(s.resolve(capture.manifest())?),
        None => Ok(capture.layers().to_vec()),
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>, Failure> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Parses `args` (without the program name), runs the command and returns
/// the exit code. Errors go to standard error.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let args: Vec<String> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(
        std::iter::once("routelens".to_string()).chain(args.iter().cloned()),
    ) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = resolve_seed(cli.seed).and_then(|seed| {
        let ctx = Ctx {
            command: echo_command(&args),
            seed: seed.unwrap_or(0),
            seed_given: seed.is_some(),
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads.unwrap_or(0))
            .build()
            .map_err(|e| Failure::Usage(format!("thread pool: {e}")))?;
        pool.install(|| dispatch(cli.command, &ctx))
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            EXIT_DATA
        }
    }
}

fn dispatch(command: Command, ctx: &Ctx) -> Result<(), Failure> {
    match command {
        Command::Decompose(a) => decompose(a, ctx),
        Command::Amplify(a) => amplify(a, ctx),
        Command::Probe(a) => probe(a, ctx),
        Command::Continuity(a) => continuity(a, ctx),
        Command::Paths(a) => paths(a, ctx),
        Command::Cluster(a) => cluster(a, ctx),
        Command::Render(a) => render(a, ctx),
        Command::Synth(a) => synth(a, ctx),
        Command::Validate(a) => validate(a, ctx),
    }
}

#[derive(Serialize)]
struct DecomposedLayer {
    layer: u32,
    rank: usize,
    singular_values: Vec<f64>,
    visible_file: String,
    blind_file: String,
    max_reconstruction_error: f64,
}

pub fn visible_file(layer: u32) -> String {
    format!("layer{layer}.vis.bin")
}

pub fn blind_file(layer: u32) -> String {
    format!("layer{layer}.blind.bin")
}

fn decompose(a: DecomposeArgs, ctx: &Ctx) -> Result<(), Failure> {
    use rayon::prelude::*;
    let capture = Capture::open(&a.capture.capture)?;
    let layers = a.layer.resolve(capture.manifest())?;
    let out_dir = a.out.unwrap_or_else(|| a.capture.capture.clone());
    std::fs::create_dir_all(&out_dir).map_err(|e| io_failure(&out_dir, e))?;
    let reports: Vec<DecomposedLayer> = layers
        .par_iter()
        .map(|&layer| {
            let basis = analysis::layer_basis(&capture, layer)?;
            let states = capture.load_states(layer)?;
            let ch = basis
                .batch_decompose(&states)
                .map_err(AnalysisError::from)?;
            let max_err = states
                .as_slice()
                .iter()
                .zip(ch.visible.as_slice().iter().zip(ch.blind.as_slice()))
                .map(|(&h, (&v, &b))| (h as f64 - (v as f64 + b as f64)).abs())
                .fold(0.0f64, f64::max);
            let dtype = capture.manifest().dtype;
            for (name, m) in [
                (visible_file(layer), &ch.visible),
                (blind_file(layer), &ch.blind),
            ] {
                let path = out_dir.join(&name);
                std::fs::write(&path, capture::encode_floats(m.as_slice(), dtype))
                    .map_err(|source| CaptureError::Io { path, source })?;
            }
            Ok(DecomposedLayer {
                layer,
                rank: basis.rank(),
                singular_values: basis.singular_values().to_vec(),
                visible_file: visible_file(layer),
                blind_file: blind_file(layer),
                max_reconstruction_error: max_err,
            })
        })
        .collect::<Result<_, AnalysisError>>()?;
    ctx.emit(None, serde_json::json!({ "layers": reports }))
}

fn amplify(a: AmplifyArgs, ctx: &Ctx) -> Result<(), Failure> {
    let capture = Capture::open(&a.capture.capture)?;
    let layers = resolve_layers(&capture, a.layers.as_ref())?;
    if let Some(f) = a.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Failure::Usage(format!("fraction {f} outside (0, 1]")));
    }
    let reports = analysis::amplify(
        &capture,
        &layers,
        &a.fractions,
        ctx.seed,
        &a.probe.config(ctx.seed),
    )?;
    let rhos: Vec<f64> = reports.iter().filter_map(|r| r.rho).collect();
    let mean_rho = (!rhos.is_empty()).then(|| rhos.iter().sum::<f64>() / rhos.len() as f64);
    ctx.emit(
        a.out.as_deref(),
        serde_json::json!({ "layers": reports, "mean_rho": mean_rho, "random_draws": analysis::RANDOM_DRAWS }),
    )
}

fn probe(a: ProbeArgs, ctx: &Ctx) -> Result<(), Failure> {
    let capture = Capture::open(&a.capture.capture)?;
    let target: ProbeTarget = a.target.into();
    let mut layers = resolve_layers(&capture, a.layers.as_ref())?;
    if target == ProbeTarget::ExpertNext && a.layers.is_none() {
        layers.pop();
        if layers.is_empty() {
            return Err(Failure::Data(
                "expert-next needs at least two captured layers".into(),
            ));
        }
    }
    let reports = analysis::probe(
        &capture,
        &layers,
        a.channel.into(),
        target,
        &a.probe.config(ctx.seed),
    )?;
    ctx.emit(a.out.as_deref(), serde_json::json!({ "probes": reports }))
}

fn continuity(a: ContinuityArgs, ctx: &Ctx) -> Result<(), Failure> {
    let capture = Capture::open(&a.capture.capture)?;
    let layers = resolve_layers(&capture, a.layers.as_ref())?;
    if a.boot == 0 {
        return Err(Failure::Usage("--boot must be positive".into()));
    }
    let points = analysis::channel_continuity(&capture, &layers, a.boot, ctx.seed)?;
    if let Some(path) = &a.svg {
        write_text(Some(path), &svg::render_continuity_svg(&points))?;
    }
    ctx.emit(
        a.out.as_deref(),
        serde_json::json!({ "pairs": points, "n_boot": a.boot }),
    )
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), Failure> {
    let mut text = String::new();
    for r in rows {
        let v = serde_json::to_value(r).expect("row serializes");
        text.push_str(&serde_json::to_string(&v).expect("row serializes"));
        text.push('\n');
    }
    write_text(Some(path), &text)
}

fn paths(a: PathsArgs, ctx: &Ctx) -> Result<(), Failure> {
    let capture = Capture::open(&a.capture.capture)?;
    let band = a.band.bounds();
    let layers = analysis::band_layers(&capture, band)?;
    let (groups, meta) = analysis::group_paths(&capture, band)?;
    let records =
        analysis::group_records(&capture, &groups, &meta, a.min_group, a.samples, ctx.seed)?;
    write_jsonl(&a.out, &records)?;
    ctx.emit(
        None,
        serde_json::json!({
            "band": band,
            "layers": layers,
            "n_tokens": meta.len(),
            "n_groups": groups.len(),
            "n_written": records.len(),
            "groups_file": a.out.display().to_string(),
        }),
    )
}

fn cluster(a: ClusterArgs, ctx: &Ctx) -> Result<(), Failure> {
    let capture = Capture::open(&a.capture.capture)?;
    let band = a.band.bounds();
    let subspace: Channel = a.subspace.into();
    let outcome = analysis::cluster_band(&capture, band, subspace, a.k, ctx.seed)?;
    let cfg = DiversityConfig {
        sample_size: a.sample_size,
        n_groups: a.n_groups,
        seed: ctx.seed,
        sampling: match a.sampling {
            SamplingArg::Uniform => GroupSampling::Uniform,
            SamplingArg::SizeWeighted => GroupSampling::SizeWeighted,
        },
    };
    let http = match &a.rater_url {
        Some(url) => {
            let seqs = capture.sequences()?;
            let contexts = outcome
                .meta
                .iter()
                .map(|m| {
                    seqs.as_ref()
                        .and_then(|s| s.get(&m.seq_id))
                        .and_then(|s| s.context(m.pos, analysis::CONTEXT_RADIUS))
                })
                .collect();
            Some(HttpRater::new(url.clone(), contexts))
        }
        None => None,
    };
    let rater: &dyn GroupRater = match &http {
        Some(h) => h,
        None => &PassAll,
    };
    let diversity = analysis::cluster_diversity(&outcome, &cfg, rater);
    if let Some(path) = &a.groups_out {
        let records = analysis::group_records(
            &capture,
            &outcome.groups,
            &outcome.meta,
            a.min_group,
            a.sample_size,
            ctx.seed,
        )?;
        write_jsonl(path, &records)?;
    }
    ctx.emit(
        a.out.as_deref(),
        serde_json::json!({
            "band": band,
            "subspace": subspace,
            "layers": outcome.layers,
            "n_tokens": outcome.meta.len(),
            "n_groups": outcome.groups.len(),
            "diversity": diversity,
            "rater": if http.is_some() { "http" } else { "pass_all" },
            "rater_failures": http.as_ref().map(|h| h.failures()),
        }),
    )
}

fn render(a: RenderArgs, ctx: &Ctx) -> Result<(), Failure> {
    let capture = Capture::open(&a.capture.capture)?;
    let band = a.band.bounds();
    let text = std::fs::read_to_string(&a.categories).map_err(|e| io_failure(&a.categories, e))?;
    let labels: Labels = serde_json::from_str(&text)
        .map_err(|e| Failure::Data(format!("{}: {e}", a.categories.display())))?;
    labels
        .validate(capture.token_count())
        .map_err(Failure::Data)?;
    if a.sweeps == 0 {
        return Err(Failure::Usage("--sweeps must be positive".into()));
    }
    let pooled = analysis::pooled_layout(&capture, band, a.sweeps)?;
    let meta = capture.load_token_meta(pooled.graph.layers[0])?;
    let categories: Vec<(String, Vec<_>)> = labels
        .members(&meta)
        .into_iter()
        .map(|(name, idx)| {
            (
                name,
                idx.into_iter().map(|i| pooled.paths[i].clone()).collect(),
            )
        })
        .collect();
    let style = Style {
        panels: a.panels.clone(),
        max_paths: Some(a.max_paths),
        ..Style::default()
    };
    let doc = svg::render_paths_svg(&pooled.graph, &pooled.layout, &categories, &style)
        .map_err(|e| Failure::Data(e.to_string()))?;
    write_text(Some(&a.out), &doc)?;
    let crossings =
        |l| routelens_core::layout::count_crossings(&pooled.graph, l).map_err(AnalysisError::from);
    ctx.emit(
        None,
        serde_json::json!({
            "band": band,
            "layers": pooled.graph.layers,
            "order": pooled.layout.order,
            "crossings_initial": crossings(&pooled.initial)?,
            "crossings_final": crossings(&pooled.layout)?,
            "sweeps": a.sweeps,
            "categories": categories.iter().map(|(n, p)| serde_json::json!({"name": n, "tokens": p.len()})).collect::<Vec<_>>(),
            "svg": a.out.display().to_string(),
        }),
    )
}

fn synth(a: SynthArgs, ctx: &Ctx) -> Result<(), Failure> {
    if a.colon_corpus {
        let cfg = CorpusConfig {
            seed: ctx.seed,
            ..CorpusConfig::default()
        };
        let built = corpus::write_colon_capture(&a.out, &cfg)?;
        let m = built.capture.manifest();
        return ctx.emit(
            None,
            serde_json::json!({
                "out": a.out.display().to_string(),
                "model_name": m.model_name,
                "token_count": m.token_count,
                "num_layers": m.num_layers,
                "colon_token_id": built.colon_id,
                "labels": corpus::LABELS_FILE,
            }),
        );
    }
    let path = a.spec.expect("clap requires --spec without --colon-corpus");
    let text = std::fs::read_to_string(&path).map_err(|e| io_failure(&path, e))?;
    let mut job: SynthJob = serde_json::from_str(&text)
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    // An explicit --seed (or the environment) overrides the file.
    if ctx.seed_given {
        job.spec.seed = ctx.seed;
    }
    let cap = job.generate().map_err(|e| Failure::Data(e.to_string()))?;
    let capture = synth_io::write_synthetic(&cap, &a.out, &job.model_name)?;
    ctx.emit(
        None,
        serde_json::json!({ "out": a.out.display().to_string(), "manifest": capture.manifest() }),
    )
}

fn validate(a: ValidateArgs, ctx: &Ctx) -> Result<(), Failure> {
    let capture = Capture::open(&a.capture.capture)?;
    let summary = validate::validate_capture(&capture)?;
    let clean = summary.violations.is_empty();
    ctx.emit(a.out.as_deref(), &summary)?;
    if clean {
        Ok(())
    } else {
        Err(Failure::Data(format!(
            "{} invariant violations",
            summary.violations.len()
        )))
    }
}
