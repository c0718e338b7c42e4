//! `date`: train, score and evaluate masked-pattern text anomaly detectors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use date_core::corpus::{load_ag_news_csv, load_class_dirs, write_csv};
use date_core::eval::{heatmap_ansi, heatmap_html, histogram, histogram_in, metric_report};
use date_core::maskpat::{collision_bound, empirical_collision_rate, BoundQuery};
use date_core::model::Checkpoint;
use date_core::pipeline::{
    ablate, ablation_csv, checkpoint_preprocess, contamination_sweep, read_scores_csv, run_experiment, score_input, scores_csv,
    sweep_csv, write_artifacts, AblationGrid, DatasetFormat, PipelineError, RunConfig, Scoring, DEFAULT_HIST_BINS,
};
use date_core::score::ScoreKind;
use date_core::synthdata::SynthConfig;
use date_core::train::LossBreakdown;

#[derive(Parser)]
#[command(name = "date", version, about = "Text anomaly detection with replaced mask and token detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the inlier class and write checkpoint, log and test metrics.
    Train(TrainArgs),
    /// Score documents with a checkpoint.
    Score(ScoreArgs),
    /// AUROC and AUPR-in/out of a labeled scores CSV.
    Eval(EvalArgs),
    /// Exact upper bound on pattern collisions, optionally checked by simulation.
    Bound(BoundArgs),
    /// Train and evaluate once per contamination fraction.
    Sweep(SweepArgs),
    /// Train and evaluate every cell of an ablation grid.
    Ablate(AblateArgs),
    /// Write a synthetic topical corpus as CSV.
    Synth(SynthArgs),
    /// Inlier/outlier score histogram from a scores CSV.
    Histogram(HistogramArgs),
}

/// Configuration or usage problem; exits with code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load_config(path: &Path, output_dir: Option<&PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
    if let Some(dir) = output_dir {
        cfg.output_dir = dir.clone();
    }
    Ok(cfg)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn progress(quiet: bool, every: usize) -> impl FnMut(&LossBreakdown) {
    move |e: &LossBreakdown| {
        if !quiet && (e.step % every.max(1) == 0 || e.auroc.is_some()) {
            let auroc = e.auroc.map(|a| format!(" auroc {a:.4}")).unwrap_or_default();
            eprintln!(
                "step {:>5}  total {:.4}  rmd {:.4}  rtd {:.4}  mlm {:.4}  lr {:.2e}{auroc}",
                e.step, e.l_total, e.l_rmd, e.l_rtd, e.l_mlm, e.lr
            );
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir` from the config and the environment.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Also compute PL_RMD, MP and NE on the test set.
    #[arg(long)]
    all_scores: bool,
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    #[arg(long)]
    quiet: bool,
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config, a.output_dir.as_ref())?;
    let scoring = if a.all_scores { Scoring::All } else { Scoring::PlRtd };
    let exp = run_experiment(&cfg, scoring, progress(a.quiet, a.log_every))?;
    let dir = &cfg.output_dir;
    write_artifacts(&exp, &cfg, dir)?;
    let (initial, last) = exp.histograms(DEFAULT_HIST_BINS)?;
    for (name, h) in [("step0", &initial), ("final", &last)] {
        write(&dir.join(format!("histogram_{name}.csv")), h.to_csv(&exp.config_hash))?;
        write(&dir.join(format!("histogram_{name}.svg")), h.to_svg(&format!("PL_RTD, {name}")))?;
    }
    println!("config_hash {}", exp.config_hash);
    println!("steps {}", exp.log.len());
    let kinds: &[ScoreKind] = if a.all_scores { &ScoreKind::ALL } else { &[ScoreKind::PlRtd] };
    for &k in kinds {
        let m = exp.metrics(k)?;
        println!("{k} auroc {:.4} aupr_in {:.4} aupr_out {:.4}", m.auroc, m.aupr_in, m.aupr_out);
    }
    println!("histogram_overlap step0 {:.4} final {:.4}", initial.overlap(), last.overlap());
    println!("output {}", dir.display());
    Ok(())
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Documents to score (`class,title,description` CSV or class directories).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: InputFormat,
    #[arg(long, default_value = "pl_rtd")]
    kind: String,
    /// Scores CSV; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Per-token `P_D(original)` as JSON (PL_RTD only).
    #[arg(long)]
    per_token: Option<PathBuf>,
    /// Token heatmap as HTML (PL_RTD only).
    #[arg(long)]
    heatmap: Option<PathBuf>,
    /// Print the token heatmap to stderr with ANSI colors.
    #[arg(long)]
    ansi: bool,
    /// Run config the checkpoint must come from.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config hash the checkpoint must carry.
    #[arg(long)]
    expect_hash: Option<String>,
    /// Seeds the corruption of the K-pass scores.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum InputFormat {
    Csv,
    Dir,
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    let kind: ScoreKind = a.kind.parse().map_err(|e: date_core::score::ScoreError| usage(e.to_string()))?;
    let expected = match (&a.config, &a.expect_hash) {
        (Some(p), _) => Some(load_config(p, None)?.hash()),
        (None, Some(h)) => Some(h.clone()),
        (None, None) => None,
    };
    let ckpt = Checkpoint::<f32>::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    if let Some(expected) = expected {
        if expected != ckpt.config_hash {
            return Err(usage(format!(
                "checkpoint does not match the config\n  checkpoint config_hash: {}\n  expected config_hash:   {expected}",
                ckpt.config_hash
            )));
        }
    }
    let rules = checkpoint_preprocess(&ckpt);
    let docs = match a.format {
        InputFormat::Csv => load_ag_news_csv(&a.input, &rules)?,
        InputFormat::Dir => load_class_dirs(&a.input, &rules)?,
    };
    ckpt.model.reset_forward_count();
    let out = score_input(&ckpt, &docs, kind, a.seed)?;
    for id in &out.skipped {
        eprintln!("skipped {id}: no tokens after preprocessing");
    }
    eprintln!("scored {} documents with {kind}, forward passes {}", out.rows.len(), ckpt.model.forward_count());
    let csv = scores_csv(&out.rows, &ckpt.config_hash)?;
    match &a.output {
        Some(p) => write(p, csv)?,
        None => print!("{csv}"),
    }
    if a.per_token.is_some() || a.heatmap.is_some() || a.ansi {
        if kind != ScoreKind::PlRtd {
            return Err(usage("--per-token, --heatmap and --ansi need --kind pl_rtd"));
        }
        if let Some(p) = &a.per_token {
            let json = serde_json::json!({ "config_hash": ckpt.config_hash, "documents": out.reports });
            write(p, serde_json::to_string_pretty(&json)?)?;
        }
        if let Some(p) = &a.heatmap {
            write(p, heatmap_html(&out.reports))?;
        }
        if a.ansi {
            eprint!("{}", heatmap_ansi(&out.reports));
        }
    }
    Ok(())
}

#[derive(Args)]
struct EvalArgs {
    /// CSV with `doc_id,label,inlier,score` columns.
    #[arg(long)]
    scores: PathBuf,
    /// Metric report JSON; stdout only when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value = "")]
    split: String,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let file = read_scores_csv(&a.scores)?;
    let scores: Vec<f64> = file.rows.iter().map(|r| r.score).collect();
    let inlier: Vec<bool> = file.rows.iter().map(|r| r.inlier).collect();
    let report = metric_report(&scores, &inlier, &a.split, file.config_hash.as_deref().unwrap_or(""))?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(p) = &a.output {
        write(p, &json)?;
    }
    println!("{json}");
    Ok(())
}

#[derive(Args)]
struct BoundArgs {
    /// Sequence length S.
    #[arg(long, default_value_t = 128)]
    s: usize,
    /// Masked positions per pattern M.
    #[arg(long, default_value_t = 19)]
    m: usize,
    /// Overlap threshold p.
    #[arg(long)]
    p: usize,
    /// Number of patterns N.
    #[arg(long)]
    n: usize,
    /// Monte-Carlo trials for an empirical cross-check (0 = off).
    #[arg(long, default_value_t = 0)]
    monte_carlo: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

fn cmd_bound(a: BoundArgs) -> Result<()> {
    let q = BoundQuery { s: a.s, m: a.m, p: a.p, n: a.n };
    let b = collision_bound(q).map_err(|e| usage(e.to_string()))?;
    let mc = (a.monte_carlo > 0).then(|| {
        let rate = empirical_collision_rate(a.s, a.m, a.p, a.n, a.monte_carlo, a.seed);
        let p = b.value.clamp(0.0, 1.0);
        let sigma = (p * (1.0 - p) / a.monte_carlo as f64).sqrt();
        (rate, sigma, rate <= b.value + 3.0 * sigma)
    });
    if a.json {
        let mut v = serde_json::json!({ "s": a.s, "m": a.m, "p": a.p, "n": a.n, "exact": b.exact.to_string(), "value": b.value });
        if let Some((rate, sigma, ok)) = mc {
            v["monte_carlo"] = serde_json::json!({ "trials": a.monte_carlo, "rate": rate, "sigma": sigma, "within_bound": ok });
        }
        println!("{}", serde_json::to_string_pretty(&v)?);
    } else {
        println!("UB(S={}, M={}, p={}, N={}) = {:.6e}", a.s, a.m, a.p, a.n, b.value);
        println!("exact {}", b.exact);
        if let Some((rate, sigma, ok)) = mc {
            println!("monte_carlo trials {} rate {:.6e} sigma {:.3e} within_bound {ok}", a.monte_carlo, rate, sigma);
        }
    }
    if let Some((_, _, false)) = mc {
        bail!("empirical collision rate exceeds the bound by more than 3 sigma");
    }
    Ok(())
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1,0.15")]
    fractions: Vec<f64>,
    /// Results CSV; defaults to `<output_dir>/sweep.csv`.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let cfg = load_config(&a.config, None)?;
    let mut log = progress(a.quiet, 500);
    let reports = contamination_sweep(&cfg, &a.fractions, |f, e| {
        if e.step == 0 && !a.quiet {
            eprintln!("contamination {f}");
        }
        log(e)
    })?;
    let csv = sweep_csv(&reports, &a.fractions);
    write(&a.output.unwrap_or_else(|| cfg.output_dir.join("sweep.csv")), &csv)?;
    print!("{csv}");
    Ok(())
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// TOML grid with any of `score_kinds`, `generators`, `loss_modes`,
    /// `k`, `mask_fraction`; omitted axes keep the config's value.
    #[arg(long)]
    grid: PathBuf,
    /// Results CSV; defaults to `<output_dir>/ablation.csv`.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let cfg = load_config(&a.config, None)?;
    let text = fs::read_to_string(&a.grid).with_context(|| format!("reading {}", a.grid.display()))?;
    let grid = AblationGrid::from_toml(&text)?;
    let mut log = progress(a.quiet, 500);
    let rows = ablate(&cfg, &grid, |tag, e| {
        if e.step == 0 && !a.quiet {
            eprintln!("cell {tag}");
        }
        log(e)
    })?;
    let csv = ablation_csv(&rows, &cfg.hash());
    write(&a.output.unwrap_or_else(|| cfg.output_dir.join("ablation.csv")), &csv)?;
    print!("{csv}");
    Ok(())
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    output: PathBuf,
    /// Take the generator settings from a run config's `[dataset.synthetic]`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    topics: Option<usize>,
    #[arg(long)]
    docs_per_topic: Option<usize>,
    #[arg(long)]
    background_mix: Option<f64>,
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut synth = match &a.config {
        Some(p) => {
            let cfg = load_config(p, None)?;
            if cfg.dataset.format != DatasetFormat::Synthetic {
                return Err(usage("dataset.format must be synthetic to take generator settings from the config"));
            }
            cfg.dataset.synthetic
        }
        None => SynthConfig::default(),
    };
    if let Some(t) = a.topics {
        synth.topics = t;
    }
    if let Some(d) = a.docs_per_topic {
        synth.docs_per_topic = d;
    }
    if let Some(m) = a.background_mix {
        synth.background_mix = m;
    }
    let docs = synth.generate(a.seed).map_err(|e| usage(e.to_string()))?;
    if let Some(parent) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_csv(&docs, &a.output)?;
    eprintln!("wrote {} documents to {}", docs.len(), a.output.display());
    Ok(())
}

#[derive(Args)]
struct HistogramArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, default_value_t = DEFAULT_HIST_BINS)]
    bins: usize,
    /// Fixed axis `lo,hi`; the joint data range when omitted.
    #[arg(long, value_delimiter = ',')]
    range: Option<Vec<f64>>,
    /// Writes `<prefix>.csv` and `<prefix>.svg`.
    #[arg(long)]
    output: PathBuf,
}

fn cmd_histogram(a: HistogramArgs) -> Result<()> {
    let file = read_scores_csv(&a.scores)?;
    let (inl, out): (Vec<_>, Vec<_>) = file.rows.iter().partition(|r| r.inlier);
    let inl: Vec<f64> = inl.iter().map(|r| r.score).collect();
    let out: Vec<f64> = out.iter().map(|r| r.score).collect();
    let h = match a.range.as_deref() {
        Some(&[lo, hi]) => histogram_in(&inl, &out, a.bins, lo, hi)?,
        Some(_) => return Err(usage("--range takes exactly two values, `lo,hi`")),
        None => histogram(&inl, &out, a.bins)?,
    };
    let prefix = a.output.to_string_lossy().to_string();
    write(Path::new(&format!("{prefix}.csv")), h.to_csv(file.config_hash.as_deref().unwrap_or("")))?;
    write(Path::new(&format!("{prefix}.svg")), h.to_svg("score histogram"))?;
    println!("overlap {:.4}", h.overlap());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            if e.is_config() {
                return 2;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Score(a) => cmd_score(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bound(a) => cmd_bound(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Histogram(a) => cmd_histogram(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
