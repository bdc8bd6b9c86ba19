//! `bacon`: distill, evaluate, verify and ablate from the command line.
//!
//! Exit codes: 0 success, 1 a checked property failed, 2 usage, config
//! or input error.

mod commands;
mod config;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use config::{DatasetKind, GridKind, Preset, RunConfig};
use manifest::RunManifest;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Assertion(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Assertion(_) => 1,
            Failure::Usage(_) | Failure::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Assertion(m) => write!(f, "check failed: {m}"),
            Failure::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<bacon_core::Error> for Failure {
    fn from(e: bacon_core::Error) -> Self {
        Failure::Runtime(format!("{}: {e}", e.kind()))
    }
}

#[derive(Parser)]
#[command(name = "bacon", version, about = "Dataset distillation with the BACON objective")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Distill a synthetic set from a real training split.
    Distill(DistillArgs),
    /// Train classifiers on condensed sets and report test accuracy.
    Eval(EvalArgs),
    /// Check the risk identities numerically.
    Verify(VerifyArgs),
    /// Run a grid of loss configurations.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long, value_enum)]
    dataset: Option<DatasetKind>,
    /// Dataset directory (default: $BACON_DATA_ROOT).
    #[arg(long)]
    data_root: Option<String>,
    /// Seed for distillation, evaluation and verification.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Override any config key, e.g. `--set distill.outer_steps=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rerun exactly what a manifest describes.
    #[arg(long)]
    from_manifest: Option<PathBuf>,
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ipc: Option<usize>,
    /// Weight of TV against CLIP.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    anchors: Option<usize>,
    /// `bacon` or `dm`.
    #[arg(long)]
    method: Option<String>,
    /// Loss terms to enable, e.g. `lh,tv`.
    #[arg(long, value_delimiter = ',')]
    terms: Option<Vec<String>>,
    /// Compare every synthetic row with every anchor.
    #[arg(long)]
    pairwise: bool,
    /// Match softmax outputs instead of features.
    #[arg(long)]
    match_softmax: bool,
    #[arg(long)]
    snapshot_every: Option<usize>,
    /// Continue from `snapshot.json` in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// BSYN files to evaluate; repeatable.
    #[arg(long)]
    synthetic: Vec<PathBuf>,
    /// Baseline coresets to evaluate: `random`, `herding`.
    #[arg(long, value_delimiter = ',')]
    coreset: Vec<String>,
    /// Images per class for coresets.
    #[arg(long)]
    ipc: Option<usize>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// Distribution spec JSON (default: unit Gaussians).
    #[arg(long)]
    spec: Option<String>,
    #[arg(long, value_delimiter = ',')]
    epsilon: Option<Vec<f64>>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    grid: Option<GridKind>,
    /// Lambda values: `start:stop:step` or a comma list.
    #[arg(long)]
    values: Option<String>,
    #[arg(long)]
    ipc: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seeds: Option<usize>,
}

type Overrides = Vec<(String, Value)>;

fn push<T: serde::Serialize>(o: &mut Overrides, key: &str, v: Option<T>) {
    if let Some(v) = v {
        o.push((key.into(), serde_json::to_value(v).expect("flag serializes")));
    }
}

fn common_overrides(c: &Common) -> Result<Overrides, Failure> {
    let mut o = Overrides::new();
    push(&mut o, "data.root", c.data_root.clone());
    push(&mut o, "jobs", c.jobs);
    for key in ["distill.seed", "eval.seed", "verify.seed"] {
        push(&mut o, key, c.seed);
    }
    for s in &c.set {
        o.push(config::parse_assignment(s)?);
    }
    Ok(o)
}

struct Invocation {
    config: RunConfig,
    inputs: Option<Value>,
    manifest: Option<RunManifest>,
    out: PathBuf,
}

/// Resolves flags into a config, or loads it from `--from-manifest`.
fn invocation(command: &str, c: &Common, mut extra: Overrides, default_out: &str) -> Result<Invocation, Failure> {
    if let Some(path) = &c.from_manifest {
        let overridden = c.config.is_some()
            || c.preset.is_some()
            || c.dataset.is_some()
            || c.seed.is_some()
            || !c.set.is_empty()
            || !extra.is_empty();
        if overridden {
            return Err(Failure::Usage(
                "--from-manifest only combines with --out, --jobs and --data-root".into(),
            ));
        }
        let m = RunManifest::load(path)?;
        if m.command != command {
            return Err(Failure::Usage(format!("manifest is for `{}`, not `{command}`", m.command)));
        }
        let mut config = m.config.clone();
        if let Some(j) = c.jobs {
            config.jobs = j;
        }
        if let Some(r) = &c.data_root {
            config.data.root = Some(r.clone());
        }
        let out = c.out.clone().unwrap_or_else(|| PathBuf::from(&m.output_dir));
        return Ok(Invocation {
            config,
            inputs: Some(m.inputs.clone()),
            manifest: Some(m),
            out,
        });
    }
    let file = c.config.as_deref().map(config::read_file).transpose()?;
    let mut flags = common_overrides(c)?;
    flags.append(&mut extra);
    let config = config::resolve(c.preset, c.dataset, file, &flags)?;
    Ok(Invocation {
        config,
        inputs: None,
        manifest: None,
        out: c.out.clone().unwrap_or_else(|| PathBuf::from(default_out)),
    })
}

fn in_pool<T: Send>(jobs: usize, f: impl FnOnce() -> Result<T, Failure> + Send) -> Result<T, Failure> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    pool.install(f)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Distill(a) => {
            let mut o = Overrides::new();
            push(&mut o, "distill.ipc", a.ipc);
            push(&mut o, "distill.loss.lambda", a.lambda);
            push(&mut o, "distill.outer_steps", a.steps);
            push(&mut o, "distill.anchors_per_class", a.anchors);
            push(&mut o, "distill.method", a.method.clone());
            push(&mut o, "distill.snapshot_every", a.snapshot_every);
            if let Some(terms) = &a.terms {
                for t in ["lh", "tv", "clip"] {
                    push(&mut o, &format!("distill.loss.enable_{t}"), Some(terms.iter().any(|x| x == t)));
                }
                if let Some(bad) = terms.iter().find(|t| !["lh", "tv", "clip"].contains(&t.as_str())) {
                    return Err(Failure::Usage(format!("unknown loss term `{bad}`")));
                }
            }
            if a.pairwise {
                push(&mut o, "distill.loss.pairing", Some("pairwise"));
            }
            if a.match_softmax {
                push(&mut o, "distill.head", Some("softmax"));
            }
            let inv = invocation("distill", &a.common, o, "runs/distill")?;
            in_pool(inv.config.jobs, || commands::distill(inv, a.resume))
        }
        Command::Eval(a) => {
            let mut o = Overrides::new();
            push(&mut o, "distill.ipc", a.ipc);
            push(&mut o, "eval.seeds", a.seeds);
            push(&mut o, "eval.epochs", a.epochs);
            let inv = invocation("eval", &a.common, o, "runs/eval")?;
            let inputs = match &inv.inputs {
                Some(v) => v.clone(),
                None => json!({ "synthetic": a.synthetic, "coreset": a.coreset }),
            };
            in_pool(inv.config.jobs, || commands::eval(inv, inputs))
        }
        Command::Verify(a) => {
            let mut o = Overrides::new();
            push(&mut o, "verify.spec", a.spec.clone());
            push(&mut o, "verify.epsilons", a.epsilon.clone());
            push(&mut o, "verify.samples", a.samples);
            push(&mut o, "verify.dim", a.dim);
            let inv = invocation("verify", &a.common, o, "runs/verify")?;
            in_pool(inv.config.jobs, || commands::verify(inv))
        }
        Command::Ablate(a) => {
            let mut o = Overrides::new();
            push(&mut o, "ablate.grid", a.grid);
            push(&mut o, "ablate.values", a.values.clone());
            push(&mut o, "distill.ipc", a.ipc);
            push(&mut o, "distill.outer_steps", a.steps);
            push(&mut o, "eval.seeds", a.seeds);
            let inv = invocation("ablate", &a.common, o, "runs/ablate")?;
            in_pool(inv.config.jobs, || commands::ablate(inv))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bacon: {e}");
            ExitCode::from(e.code())
        }
    }
}
