//! Dataset generation, training and evaluation for the charged N-body task.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use hegnn_core::autodiff::TrainConfig;
use hegnn_core::geomgraph::{nbody_simulate, read_dataset, write_dataset, NBodyConfig, NBodySample};
use hegnn_core::hegnn::{
    evaluate_mse, linear_baseline_mse, load_checkpoint, save_checkpoint, train, ModelConfig, ModelParams, TrainHistory,
};

use crate::error::{CliError, CliResult};
use crate::table::{num, Table};

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Simulates `cfg.samples` samples into one file, or, with a split, the sum
/// of the split sizes into `train.jsonl`, `val.jsonl` and `test.jsonl`
/// under the directory `out`. Returns the written paths.
pub fn generate(cfg: &NBodyConfig, seed: u64, split: Option<[usize; 3]>, out: &Path) -> CliResult<Vec<PathBuf>> {
    match split {
        None => {
            let data = nbody_simulate(cfg, seed)?;
            write_dataset(BufWriter::new(File::create(out)?), &data)?;
            Ok(vec![out.to_path_buf()])
        }
        Some(sizes) => {
            let total: usize = sizes.iter().sum();
            let data = nbody_simulate(&NBodyConfig { samples: total, ..cfg.clone() }, seed)?;
            fs::create_dir_all(out)?;
            let mut paths = Vec::new();
            let mut start = 0;
            for (name, n) in SPLIT_NAMES.iter().zip(sizes) {
                let p = out.join(format!("{name}.jsonl"));
                write_dataset(BufWriter::new(File::create(&p)?), &data[start..start + n])?;
                start += n;
                paths.push(p);
            }
            Ok(paths)
        }
    }
}

pub fn load(path: &Path) -> CliResult<Vec<NBodySample>> {
    let f = File::open(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let data = read_dataset(BufReader::new(f))?;
    if data.is_empty() {
        return Err(CliError::Input(format!("{}: no samples", path.display())));
    }
    Ok(data)
}

/// Architecture settings exposed on the command line.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchSettings {
    pub max_degree: usize,
    pub width: usize,
    pub layers: usize,
    pub velocity: bool,
}

impl Default for ArchSettings {
    fn default() -> Self {
        Self { max_degree: 2, width: 16, layers: 2, velocity: true }
    }
}

/// Model configuration for the feature layout of `sample`.
pub fn model_config(a: &ArchSettings, sample: &NBodySample) -> CliResult<ModelConfig> {
    let g = sample.to_graph()?;
    let cfg = ModelConfig {
        layer_count: a.layers,
        use_velocity: a.velocity,
        ..ModelConfig::new(a.max_degree, g.node_dim(), g.edge_dim()).with_width(a.width)
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn history_table(h: &TrainHistory, seed: u64) -> Table {
    let mut t = Table::new(&["epoch", "train_mse", "val_mse"]);
    t.seed = Some(seed);
    for (e, (tr, va)) in h.train.iter().zip(&h.val).enumerate() {
        t.push(vec![(e + 1).to_string(), num(*tr), num(*va)]);
    }
    t
}

/// Trains, writes the checkpoint and the per-epoch loss table.
pub fn train_run(
    train_set: &[NBodySample],
    val_set: &[NBodySample],
    arch: &ArchSettings,
    tcfg: &TrainConfig,
    checkpoint: &Path,
    loss_out: Option<&Path>,
) -> CliResult<(ModelParams, TrainHistory)> {
    let first = train_set.first().ok_or_else(|| CliError::Input("empty training set".into()))?;
    let cfg = model_config(arch, first)?;
    let (params, history) = train(train_set, val_set, &cfg, tcfg)?;
    save_checkpoint(BufWriter::new(File::create(checkpoint)?), &params)?;
    history_table(&history, tcfg.seed).emit(loss_out)?;
    Ok((params, history))
}

pub fn load_params(path: &Path) -> CliResult<ModelParams> {
    let f = File::open(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(load_checkpoint(BufReader::new(f))?)
}

/// Test MSE of the model and of constant-velocity extrapolation over
/// `horizon` time units.
pub fn eval(params: &ModelParams, test: &[NBodySample], horizon: f64) -> CliResult<Table> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(CliError::Input(format!("horizon must be positive, got {horizon}")));
    }
    let model = evaluate_mse(params, test)?;
    let linear = linear_baseline_mse(test, horizon);
    let mut t = Table::new(&["model", "max_degree", "samples", "mse"]);
    t.push(vec!["hegnn".into(), params.config.max_degree.to_string(), test.len().to_string(), num(model)]);
    t.push(vec!["linear".into(), String::new(), test.len().to_string(), num(linear)]);
    Ok(t)
}
