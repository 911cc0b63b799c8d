//! Command-line surface. Every subcommand takes its settings from flags and
//! from an optional flat TOML file given with `--config`; flags win, and
//! keys the subcommand does not know are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use hegnn_core::autodiff::TrainConfig;
use hegnn_core::geomgraph::{ChargeSet, NBodyConfig};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::commands::{expressivity, perturbation, traces, ForwardSettings, Mode};
use crate::error::{CliError, CliResult};
use crate::nbody::{self, ArchSettings};
use crate::parse::{parse_degrees, parse_epsilons, parse_groups, parse_structures};
use crate::verify::{report, run_checks, Hooks, Tolerances, VerifyOptions};

#[derive(Debug, Parser)]
#[command(name = "hegnn", version, about = "Steerable equivariant GNN expressivity tables, checks and N-body training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Closed-form and brute-force traces of group-averaged representations.
    Traces(TracesArgs),
    /// Distinguishability of symmetric structures from rotated copies.
    Expressivity(ExpressivityArgs),
    /// Runs the self-check suite; exits 1 when a check fails.
    Verify(VerifyArgs),
    /// Charged N-body data, training and evaluation.
    Nbody {
        #[command(subcommand)]
        command: NbodyCommand,
    },
    /// Discrimination of a randomly perturbed tetrahedron.
    Perturb(PerturbArgs),
}

#[derive(Debug, Subcommand)]
pub enum NbodyCommand {
    Generate(GenerateArgs),
    Train(TrainArgs),
    Eval(EvalArgs),
}

/// Fills every unset flag from the config file.
macro_rules! overlay {
    ($flags:ident, $file:ident; $($f:ident),+ $(,)?) => {
        $( if $flags.$f.is_none() { $flags.$f = $file.$f; } )+
    };
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            Ok(toml::from_str(&text)?)
        }
    }
}

fn required<T>(v: Option<T>, key: &str) -> CliResult<T> {
    v.ok_or_else(|| CliError::Usage(format!("missing --{} (or `{key}` in the config file)", key.replace('_', "-"))))
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TracesArgs {
    /// Group list, e.g. `Ci,C2..21,D2..21,T,O,I`.
    #[arg(long)]
    pub groups: Option<String>,
    #[arg(long)]
    pub lmax: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

pub const DEFAULT_GROUPS: &str = "Ci,C2..21,D2..21,T,O,I";

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpressivityArgs {
    /// Structures: polyhedron names, `kfold:k`, `kfold:a..b` or `polyhedra`.
    #[arg(long)]
    pub structures: Option<String>,
    /// Degrees, e.g. `1..11` or `3,5`.
    #[arg(long)]
    pub degrees: Option<String>,
    /// `forward` or `sph-sum`.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Activate all degrees up to each row's degree.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub cumulative: Option<bool>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Center-anchor term in the initial features.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub anchor: Option<bool>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub cases: Option<usize>,
    #[arg(long)]
    pub grad_seeds: Option<usize>,
    /// Test hooks: `wrong-parity-sign`, `broken-gate` or both, comma-separated.
    #[arg(long)]
    pub inject: Option<String>,
    #[arg(long)]
    pub tol_harmonic: Option<f64>,
    #[arg(long)]
    pub tol_projector: Option<f64>,
    #[arg(long)]
    pub tol_trace: Option<f64>,
    #[arg(long)]
    pub tol_equivariance: Option<f64>,
    #[arg(long)]
    pub tol_identity: Option<f64>,
    #[arg(long)]
    pub tol_recover: Option<f64>,
    #[arg(long)]
    pub tol_grad: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbArgs {
    /// Perturbation ratios, comma-separated.
    #[arg(long)]
    pub epsilons: Option<String>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateArgs {
    #[arg(long)]
    pub particles: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// `zero-one` or `plus-minus-one`.
    #[arg(long)]
    pub charges: Option<String>,
    #[arg(long)]
    pub position_std: Option<f64>,
    #[arg(long)]
    pub velocity_std: Option<f64>,
    #[arg(long)]
    pub softening: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `train,val,test` sizes; `out` is then a directory.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub max_degree: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// Velocity term in the first coordinate update.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub velocity: Option<bool>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Per-epoch loss CSV; stdout when absent.
    #[arg(long)]
    pub loss_out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Time between the input and target frames, for the linear baseline.
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

fn parse_split(s: &str) -> CliResult<[usize; 3]> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse().map_err(|_| CliError::Input(format!("bad split size {x:?}"))))
        .collect::<CliResult<_>>()?;
    <[usize; 3]>::try_from(parts).map_err(|_| CliError::Input(format!("split needs three sizes, got {s:?}")))
}

fn parse_hooks(s: Option<&str>) -> CliResult<Hooks> {
    let mut h = Hooks::default();
    for item in s.unwrap_or("").split(',').map(str::trim).filter(|x| !x.is_empty()) {
        match item {
            "wrong-parity-sign" => h.wrong_parity_sign = true,
            "broken-gate" => h.broken_gate = true,
            _ => return Err(CliError::Input(format!("unknown hook {item:?}"))),
        }
    }
    Ok(h)
}

fn run_traces(mut a: TracesArgs) -> CliResult<()> {
    let f: TracesArgs = read_config(a.config.as_deref())?;
    overlay!(a, f; groups, lmax, out);
    let groups = parse_groups(a.groups.as_deref().unwrap_or(DEFAULT_GROUPS))?;
    let (t, bad) = traces(&groups, a.lmax.unwrap_or(30))?;
    t.emit(a.out.as_deref())?;
    if bad > 0 {
        return Err(CliError::Failed(bad));
    }
    Ok(())
}

fn run_expressivity(mut a: ExpressivityArgs) -> CliResult<()> {
    let f: ExpressivityArgs = read_config(a.config.as_deref())?;
    overlay!(a, f; structures, degrees, mode, trials, seed, cumulative, width, anchor, out);
    let structures = parse_structures(a.structures.as_deref().unwrap_or("polyhedra"))?;
    let degrees = parse_degrees(a.degrees.as_deref().unwrap_or("1..11"))?;
    let mode: Mode = a.mode.as_deref().unwrap_or("forward").parse()?;
    let d = ForwardSettings::default();
    let s = ForwardSettings {
        trials: a.trials.unwrap_or(d.trials),
        seed: a.seed.unwrap_or(d.seed),
        cumulative: a.cumulative.unwrap_or(d.cumulative),
        width: a.width.unwrap_or(d.width),
        center_anchor: a.anchor.unwrap_or(d.center_anchor),
    };
    if s.trials == 0 || s.width == 0 {
        return Err(CliError::Input("trials and width must be positive".into()));
    }
    expressivity(&structures, &degrees, mode, &s)?.emit(a.out.as_deref())
}

fn run_verify(mut a: VerifyArgs) -> CliResult<()> {
    let f: VerifyArgs = read_config(a.config.as_deref())?;
    overlay!(a, f; seed, cases, grad_seeds, inject, tol_harmonic, tol_projector, tol_trace, tol_equivariance,
        tol_identity, tol_recover, tol_grad, out);
    let d = VerifyOptions::default();
    let t = Tolerances::default();
    let o = VerifyOptions {
        seed: a.seed.unwrap_or(d.seed),
        cases: a.cases.unwrap_or(d.cases),
        grad_seeds: a.grad_seeds.unwrap_or(d.grad_seeds),
        hooks: parse_hooks(a.inject.as_deref())?,
        tolerances: Tolerances {
            harmonic: a.tol_harmonic.unwrap_or(t.harmonic),
            projector: a.tol_projector.unwrap_or(t.projector),
            trace: a.tol_trace.unwrap_or(t.trace),
            equivariance: a.tol_equivariance.unwrap_or(t.equivariance),
            identity: a.tol_identity.unwrap_or(t.identity),
            recover: a.tol_recover.unwrap_or(t.recover),
            grad: a.tol_grad.unwrap_or(t.grad),
        },
    };
    if o.cases == 0 || o.grad_seeds == 0 {
        return Err(CliError::Input("cases and grad-seeds must be positive".into()));
    }
    let results = run_checks(&o)?;
    report(&results, &o).emit(a.out.as_deref())?;
    match results.iter().filter(|r| !r.passed()).count() {
        0 => Ok(()),
        n => Err(CliError::Failed(n)),
    }
}

fn run_perturb(mut a: PerturbArgs) -> CliResult<()> {
    let f: PerturbArgs = read_config(a.config.as_deref())?;
    overlay!(a, f; epsilons, trials, seed, width, out);
    let eps = parse_epsilons(a.epsilons.as_deref().unwrap_or("0,0.01,0.05,0.1,0.5"))?;
    let width = a.width.unwrap_or(16);
    if width == 0 {
        return Err(CliError::Input("width must be positive".into()));
    }
    perturbation(&eps, a.trials.unwrap_or(20), a.seed.unwrap_or(0), width)?.emit(a.out.as_deref())
}

fn run_generate(mut a: GenerateArgs) -> CliResult<()> {
    let f: GenerateArgs = read_config(a.config.as_deref())?;
    overlay!(a, f; particles, samples, steps, dt, charges, position_std, velocity_std, softening, seed, split, out);
    let d = NBodyConfig::default();
    let charges = match a.charges.as_deref() {
        Some(c) => c.parse::<ChargeSet>().map_err(|_| CliError::Input(format!("unknown charge set {c:?}")))?,
        None => d.charges,
    };
    let cfg = NBodyConfig {
        particles: a.particles.unwrap_or(d.particles),
        samples: a.samples.unwrap_or(d.samples),
        steps: a.steps.unwrap_or(d.steps),
        dt: a.dt.unwrap_or(d.dt),
        charges,
        position_std: a.position_std.unwrap_or(d.position_std),
        velocity_std: a.velocity_std.unwrap_or(d.velocity_std),
        softening: a.softening.unwrap_or(d.softening),
    };
    let split = a.split.as_deref().map(parse_split).transpose()?;
    let out = required(a.out, "out")?;
    nbody::generate(&cfg, a.seed.unwrap_or(0), split, &out)?;
    Ok(())
}

fn run_train(mut a: TrainArgs) -> CliResult<()> {
    let f: TrainArgs = read_config(a.config.as_deref())?;
    overlay!(a, f; train, val, max_degree, width, layers, velocity, epochs, lr, batch_size, seed, checkpoint, loss_out);
    let train_set = nbody::load(&required(a.train, "train")?)?;
    let val_set = match &a.val {
        Some(p) => nbody::load(p)?,
        None => Vec::new(),
    };
    let d = ArchSettings::default();
    let arch = ArchSettings {
        max_degree: a.max_degree.unwrap_or(d.max_degree),
        width: a.width.unwrap_or(d.width),
        layers: a.layers.unwrap_or(d.layers),
        velocity: a.velocity.unwrap_or(d.velocity),
    };
    let td = TrainConfig::default();
    let tcfg = TrainConfig {
        lr: a.lr.unwrap_or(1e-3),
        batch_size: a.batch_size.unwrap_or(td.batch_size),
        epochs: a.epochs.unwrap_or(20),
        seed: a.seed.unwrap_or(td.seed),
        ..td
    };
    let checkpoint = required(a.checkpoint, "checkpoint")?;
    nbody::train_run(&train_set, &val_set, &arch, &tcfg, &checkpoint, a.loss_out.as_deref())?;
    Ok(())
}

fn run_eval(mut a: EvalArgs) -> CliResult<()> {
    let f: EvalArgs = read_config(a.config.as_deref())?;
    overlay!(a, f; test, checkpoint, horizon, out);
    let test = nbody::load(&required(a.test, "test")?)?;
    let params = nbody::load_params(&required(a.checkpoint, "checkpoint")?)?;
    nbody::eval(&params, &test, a.horizon.unwrap_or(1.0))?.emit(a.out.as_deref())
}

pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Traces(a) => run_traces(a),
        Command::Expressivity(a) => run_expressivity(a),
        Command::Verify(a) => run_verify(a),
        Command::Perturb(a) => run_perturb(a),
        Command::Nbody { command } => match command {
            NbodyCommand::Generate(a) => run_generate(a),
            NbodyCommand::Train(a) => run_train(a),
            NbodyCommand::Eval(a) => run_eval(a),
        },
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from<I, T>(args: I) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    execute(cli)
}
