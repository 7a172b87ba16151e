//! Subcommands behind the `fantrans` binary. Each `cmd_*` returns its result
//! so tests can drive them in-process; [`Failure::code`] gives the exit code.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use fantrans::config::RunConfig;
use fantrans::evaluation::{self, MetricsReport};
use fantrans::experiment::{self, CellResult, SUMMARY_HEADER};
use fantrans::synth::{self, Dataset};
use fantrans::training::{self, Checkpoint};
use fantrans::{gradsuite, DropMode, Error, FanTrans, Variant};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESOLVED_FILE: &str = "resolved.cfg";
pub const EVAL_FILE: &str = "eval.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

pub const LAMBDA_SWEEP: [f64; 5] = [0.05, 0.1, 0.2, 0.5, 1.0];
pub const DEPTH_SWEEP: [usize; 5] = [1, 3, 5, 7, 9];

/// A failed command: exit code 1 for run or check failures, 2 for usage
/// and configuration problems.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure { code: 2, message: msg.into() }
    }

    fn run(msg: impl Into<String>) -> Self {
        Failure { code: 1, message: msg.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Usage(_) | Error::Io { .. } | Error::Format(_) => 2,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

pub type CmdResult<T> = std::result::Result<T, Failure>;

#[derive(Parser, Debug)]
#[command(name = "fantrans", version, about = "Train and probe the AU transformer on synthetic faces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model and write checkpoint, metrics and resolved config.
    Train(TrainArgs),
    /// Score a checkpoint through the deployment path.
    Eval(EvalArgs),
    /// Train and score a grid of variants, drop modes and seeds.
    Ablate(AblateArgs),
    /// Finite-difference check of every primitive and the full loss.
    Gradcheck(GradcheckArgs),
    /// Dump post-drop attention and AU projection images for one sample.
    ExportAttention(ExportArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Config file of `key = value` lines; defaults apply to missing keys.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set loss.lambda=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VAL")]
    pub sets: Vec<String>,
    /// Root seed; every other seed derives from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

impl ConfigArgs {
    /// Config file, then `--set` overrides in order, then `--seed` and `--out`.
    pub fn resolve(&self) -> CmdResult<RunConfig> {
        let mut rc = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        rc.apply_overrides(&self.sets)?;
        if let Some(s) = self.seed {
            rc.seed = s;
        }
        if let Some(o) = &self.out {
            rc.out_dir = o.clone();
        }
        rc.validate()?;
        Ok(rc)
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Suppress per-epoch progress.
    #[arg(short, long)]
    pub quiet: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    #[default]
    Eval,
    All,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Dataset file to score instead of regenerating from the config.
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Which part of the regenerated data to score.
    #[arg(long, value_enum, default_value_t = Split::Eval)]
    pub split: Split,
    /// Config flags. Without `--config`, the `resolved.cfg` next to the
    /// checkpoint is used when present.
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug, Clone, Default)]
pub struct AblateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Named grid: `variants` (every variant × drop mode), `lambda` or `depth`.
    #[arg(long)]
    pub grid: Option<String>,
    /// Comma-separated variants.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    /// Comma-separated drop modes.
    #[arg(long, value_delimiter = ',')]
    pub drops: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub depths: Vec<usize>,
    /// Cells trained at once.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(short, long)]
    pub quiet: bool,
}

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Corrupt the backward pass of one op (negative control).
    #[arg(long, hide = true, value_name = "OP")]
    pub inject_fault: Option<String>,
}

impl Default for GradcheckArgs {
    fn default() -> Self {
        GradcheckArgs {
            seed: 0,
            step: 1e-5,
            tol: 1e-4,
            inject_fault: None,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct ExportArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Sample index within the generated data.
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> CmdResult<()> {
    std::fs::write(path, text).map_err(|e| Failure::from(Error::io(path, e)))
}

fn create_dir(dir: &Path) -> CmdResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::from(Error::io(dir, e)))
}

/// What `train` produced.
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub result: CellResult,
}

pub fn cmd_train(args: &TrainArgs) -> CmdResult<TrainOutcome> {
    let rc = args.cfg.resolve()?;
    let dir = rc.out_dir.clone();
    create_dir(&dir)?;
    write(&dir.join(RESOLVED_FILE), rc.to_text())?;

    let mut model = FanTrans::new(&rc.model_config())?;
    let data = experiment::prepare_data(&rc, &model)?;
    let quiet = args.quiet;
    let report = training::train(&mut model, &data.train, &data.eval, &rc.train_config(), |m| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  lr {:.2e}  loss {:.4}  f1 {:.4}",
                m.epoch, m.lr, m.loss.total, m.f1_deployed
            );
        }
    })?;
    write(&dir.join(METRICS_FILE), training::metrics_csv(&report.history))?;
    Checkpoint::from_model(&model, Some(&report.optimizer)).save(&dir.join(CHECKPOINT_FILE))?;
    let result = experiment::score(&model, &data.eval, &rc, report.history)?;
    println!("{SUMMARY_HEADER}\n{}", result.csv_row());
    Ok(TrainOutcome { out_dir: dir, result })
}

fn config_for_checkpoint(cfg: &ConfigArgs, checkpoint: &Path) -> CmdResult<RunConfig> {
    let mut cfg = cfg.clone();
    if cfg.config.is_none() {
        let sibling = checkpoint.parent().unwrap_or(Path::new(".")).join(RESOLVED_FILE);
        if sibling.exists() {
            cfg.config = Some(sibling);
        }
    }
    cfg.resolve()
}

/// Loads a checkpoint and checks it against the model the config describes.
fn load_model(checkpoint: &Path, rc: &RunConfig) -> CmdResult<FanTrans> {
    let ck = Checkpoint::load(checkpoint)?;
    if ck.config != rc.model_config() {
        return Err(Failure::usage(format!(
            "checkpoint {} was trained with a different model config than the one given",
            checkpoint.display()
        )));
    }
    Ok(ck.build()?)
}

fn check_data(model: &FanTrans, data: &Dataset) -> CmdResult<()> {
    let cfg = model.config();
    if data.spec.n_au != cfg.n_au || data.spec.image_size != cfg.image_size {
        return Err(Failure::usage(format!(
            "dataset has {} AUs at {}px but the model expects {} AUs at {}px",
            data.spec.n_au, data.spec.image_size, cfg.n_au, cfg.image_size
        )));
    }
    Ok(())
}

/// Scores the deployed head on a dataset in batches through `infer`.
pub fn evaluate(model: &FanTrans, data: &Dataset, batch_size: usize) -> CmdResult<MetricsReport> {
    check_data(model, data)?;
    let set = training::prepare(model.stem(), data)?;
    let mut pred = Vec::with_capacity(set.len());
    for chunk in set.fa.chunks(batch_size.max(1)) {
        let fa = training::stack(&chunk.iter().collect::<Vec<_>>())?;
        pred.extend(training::infer(model, &fa)?.predictions);
    }
    Ok(evaluation::f1_scores(&pred, &set.labels)?)
}

pub fn cmd_eval(args: &EvalArgs) -> CmdResult<MetricsReport> {
    let rc = config_for_checkpoint(&args.cfg, &args.checkpoint)?;
    let model = load_model(&args.checkpoint, &rc)?;
    let data = match &args.data {
        Some(p) => Dataset::load(p)?,
        None => {
            let all = synth::generate(&rc.data_spec())?;
            match args.split {
                Split::All => all,
                s => {
                    let (tr, ev) = synth::split(&all, rc.train_frac, rc.split_seed())?;
                    if s == Split::Train {
                        tr
                    } else {
                        ev
                    }
                }
            }
        }
    };
    let report = evaluate(&model, &data, rc.train.batch_size)?;
    println!("{}", report.table());
    let dir = args
        .cfg
        .out
        .clone()
        .unwrap_or_else(|| args.checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
    create_dir(&dir)?;
    write(&dir.join(EVAL_FILE), report.to_csv())?;
    Ok(report)
}

/// One grid cell before it runs.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub variant: Variant,
    pub drop: DropMode,
    pub lambda: f64,
    pub depth: usize,
    pub seed: u64,
}

fn parse_all<T: std::str::FromStr<Err = Error>>(names: &[String]) -> CmdResult<Vec<T>> {
    names.iter().map(|n| n.trim().parse().map_err(Failure::from)).collect()
}

/// Expands the grid flags over `base`. Explicit lists win over the named
/// grid; missing axes take the configured value.
pub fn expand_grid(args: &AblateArgs, base: &RunConfig) -> CmdResult<Vec<Cell>> {
    let mut variants: Vec<Variant> = parse_all(&args.variants)?;
    let mut drops: Vec<DropMode> = parse_all(&args.drops)?;
    let mut lambdas = args.lambdas.clone();
    let mut depths = args.depths.clone();
    match args.grid.as_deref() {
        None => {}
        Some("variants") => {
            if variants.is_empty() {
                variants = Variant::ALL.to_vec();
            }
            if drops.is_empty() {
                drops = DropMode::ALL.to_vec();
            }
        }
        Some("lambda") if lambdas.is_empty() => lambdas = LAMBDA_SWEEP.to_vec(),
        Some("depth") if depths.is_empty() => depths = DEPTH_SWEEP.to_vec(),
        Some("lambda" | "depth") => {}
        Some(other) => {
            return Err(Failure::usage(format!("unknown grid '{other}' (valid: variants, lambda, depth)")));
        }
    }
    if variants.is_empty() {
        variants.push(base.model.variant);
    }
    if drops.is_empty() {
        drops.push(base.model.drop);
    }
    if lambdas.is_empty() {
        lambdas.push(base.model.lambda);
    }
    if depths.is_empty() {
        depths.push(base.model.depth);
    }
    let seeds = if args.seeds.is_empty() { vec![base.seed] } else { args.seeds.clone() };

    let mut cells = Vec::new();
    for &variant in &variants {
        // The baseline has no transformer, so drop mode and depth do not
        // change it.
        let (drops, depths) = if variant == Variant::Baseline {
            (&drops[..1], &depths[..1])
        } else {
            (&drops[..], &depths[..])
        };
        for &drop in drops {
            for &lambda in &lambdas {
                for &depth in depths {
                    for &seed in &seeds {
                        cells.push(Cell { variant, drop, lambda, depth, seed });
                    }
                }
            }
        }
    }
    Ok(cells)
}

fn cell_config(base: &RunConfig, c: &Cell) -> CmdResult<RunConfig> {
    let mut rc = base.clone();
    rc.model.variant = c.variant;
    rc.model.drop = c.drop;
    rc.model.lambda = c.lambda;
    rc.model.depth = c.depth;
    rc.seed = c.seed;
    rc.validate()?;
    Ok(rc)
}

pub fn cmd_ablate(args: &AblateArgs) -> CmdResult<Vec<CellResult>> {
    let base = args.cfg.resolve()?;
    let cells = expand_grid(args, &base)?;
    let configs = cells.iter().map(|c| cell_config(&base, c)).collect::<CmdResult<Vec<_>>>()?;
    let dir = base.out_dir.clone();
    create_dir(&dir)?;
    if !args.quiet {
        eprintln!("{} cells", configs.len());
    }

    let jobs = args.jobs.clamp(1, configs.len().max(1));
    let mut results: Vec<Option<fantrans::Result<CellResult>>> = (0..configs.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                let configs = &configs;
                let quiet = args.quiet;
                s.spawn(move || {
                    (j..configs.len())
                        .step_by(jobs)
                        .map(|i| {
                            let r = experiment::run_cell(&configs[i]).map(|(_, r)| r);
                            if !quiet {
                                if let Ok(r) = &r {
                                    eprintln!("{}", r.csv_row());
                                }
                            }
                            (i, r)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("grid worker panicked") {
                results[i] = Some(r);
            }
        }
    });

    let mut out = Vec::with_capacity(results.len());
    for r in results {
        out.push(r.expect("every cell ran")?);
    }
    let mut csv = format!("{SUMMARY_HEADER}\n");
    for r in &out {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write(&dir.join(SUMMARY_FILE), &csv)?;
    print!("{csv}");
    Ok(out)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> CmdResult<()> {
    fantrans::autograd::inject_backward_fault(args.inject_fault.as_deref());
    let report = gradsuite::run(args.seed, args.step, args.tol);
    fantrans::autograd::inject_backward_fault(None);
    let report = report?;
    print!("{report}");
    println!("max relative error {:.3e} (tolerance {:.0e})", report.max_rel_err(), args.tol);
    if report.passed() {
        Ok(())
    } else {
        let ops: Vec<&str> = report.failures().map(|c| c.op.as_str()).collect();
        Err(Failure::run(format!("gradient check failed for: {}", ops.join(", "))))
    }
}

pub fn cmd_export_attention(args: &ExportArgs) -> CmdResult<evaluation::AttentionExport> {
    let rc = config_for_checkpoint(&args.cfg, &args.checkpoint)?;
    let model = load_model(&args.checkpoint, &rc)?;
    let spec = rc.data_spec();
    if args.sample >= spec.n_samples {
        return Err(Failure::usage(format!(
            "sample {} is out of range ({} samples)",
            args.sample, spec.n_samples
        )));
    }
    let one = Dataset {
        samples: vec![synth::generate_sample(&spec, args.sample)],
        spec,
    };
    let set = training::prepare(model.stem(), &one)?;
    let dir = args
        .cfg
        .out
        .clone()
        .unwrap_or_else(|| args.checkpoint.parent().unwrap_or(Path::new(".")).join("attention"));
    let ex = evaluation::export_attention(&model, &set.fa[0], &dir)?;
    println!("wrote {} ({} rows) and {} images", ex.csv.display(), ex.rows, ex.images.len());
    Ok(ex)
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: &Cli) -> u8 {
    let res = match &cli.command {
        Command::Train(a) => cmd_train(a).map(drop),
        Command::Eval(a) => cmd_eval(a).map(drop),
        Command::Ablate(a) => cmd_ablate(a).map(drop),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::ExportAttention(a) => cmd_export_attention(a).map(drop),
    };
    match res {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.code
        }
    }
}
