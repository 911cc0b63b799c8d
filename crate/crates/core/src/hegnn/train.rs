use std::io::{Read, Write};

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{bind, forward_tape, init_tape, message_tape_public, Bound};
use super::{ModelConfig, ModelParams, ParamArray};
use crate::autodiff::{grad, grad_check, Adam, Fault, Tape, TrainConfig};
use crate::geomgraph::{mse, GeometricGraph, NBodySample};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "hegnn-params";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    arrays: Vec<ParamArray>,
}

pub fn save_checkpoint<W: Write>(mut w: W, params: &ModelParams) -> Result<()> {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        arrays: params.arrays.clone(),
    };
    serde_json::to_writer(&mut w, &ck)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn load_checkpoint<R: Read>(r: R) -> Result<ModelParams> {
    let ck: Checkpoint = serde_json::from_reader(r).map_err(|e| Error::Format(e.to_string()))?;
    if ck.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("unexpected format tag {:?}", ck.format)));
    }
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", ck.version)));
    }
    ModelParams::from_arrays(&ck.config, ck.arrays)
}

/// Per-epoch mean losses. Validation entries are NaN without a validation set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub train: Vec<f64>,
    pub val: Vec<f64>,
}

struct Prepared {
    graph: GeometricGraph,
    target: Vec<f64>,
}

fn prepare(samples: &[NBodySample]) -> Result<Vec<Prepared>> {
    samples.iter().map(|s| Ok(Prepared { graph: s.to_graph()?, target: s.positions_t1.clone() })).collect()
}

fn loss_and_grad(params: &ModelParams, data: &[Vec<f64>], p: &Prepared) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let b = bind(&mut tape, params, Some(data));
    let st = forward_tape(&mut tape, &p.graph, &b)?;
    let pred = tape.concat(&st.x);
    let target = tape.leaf(p.target.clone());
    let loss = tape.mse(pred, target);
    let g = grad(&tape, loss, &b.vars)?;
    Ok((tape.scalar(loss), g))
}

fn predict_graph(params: &ModelParams, g: &GeometricGraph) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let b = bind(&mut tape, params, None);
    let st = forward_tape(&mut tape, g, &b)?;
    Ok(st.x.iter().flat_map(|v| tape.value(*v).to_vec()).collect())
}

/// Predicted final positions for one sample.
pub fn predict(params: &ModelParams, sample: &NBodySample) -> Result<Vec<Vector3<f64>>> {
    let flat = predict_graph(params, &sample.to_graph()?)?;
    Ok(flat.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect())
}

/// Mean over samples of the per-sample position MSE.
pub fn evaluate_mse(params: &ModelParams, samples: &[NBodySample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let losses = samples
        .par_iter()
        .map(|s| Ok(mse(&predict_graph(params, &s.to_graph()?)?, &s.positions_t1)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Mean over samples of the constant-velocity extrapolation MSE.
pub fn linear_baseline_mse(samples: &[NBodySample], horizon: f64) -> f64 {
    samples.iter().map(|s| s.linear_baseline_mse(horizon)).sum::<f64>() / samples.len().max(1) as f64
}

/// Adam on the position MSE. Samples of a batch are differentiated in
/// parallel and their gradients summed in sample order, so the history is
/// reproducible bit for bit.
pub fn train(
    train_set: &[NBodySample],
    val_set: &[NBodySample],
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    tcfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut params = ModelParams::init(cfg, tcfg.seed)?;
    let prepared = prepare(train_set)?;
    let shapes: Vec<usize> = params.arrays.iter().map(|a| a.data.len()).collect();
    let mut opt = Adam::new(tcfg, &shapes);
    let mut data = params.data();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut history = TrainHistory::default();
    for epoch in 0..tcfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_no, batch) in order.chunks(tcfg.batch_size).enumerate() {
            let results = batch
                .par_iter()
                .map(|&k| loss_and_grad(&params, &data, &prepared[k]))
                .collect::<Result<Vec<_>>>()?;
            let mut total = vec![Vec::new(); data.len()];
            for (k, (loss, g)) in results.iter().enumerate() {
                if !loss.is_finite() {
                    return Err(Error::Diverged(format!(
                        "loss {loss} at epoch {epoch}, batch {batch_no}, sample {}",
                        batch[k]
                    )));
                }
                epoch_loss += loss;
                for (acc, gi) in total.iter_mut().zip(g) {
                    if acc.is_empty() {
                        acc.clone_from(gi);
                    } else {
                        for (a, x) in acc.iter_mut().zip(gi) {
                            *a += x;
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for acc in &mut total {
                for a in acc.iter_mut() {
                    *a *= scale;
                }
            }
            opt.step(&mut data, &total);
        }
        params.set_data(data.clone());
        history.train.push(epoch_loss / prepared.len() as f64);
        history.val.push(if val_set.is_empty() { f64::NAN } else { evaluate_mse(&params, val_set)? });
    }
    params.set_data(data);
    Ok((params, history))
}

/// Finite-difference check of the full forward pass plus position MSE with
/// respect to every parameter array.
pub fn model_grad_check(params: &ModelParams, sample: &NBodySample, seed: u64, fault: Option<Fault>) -> Result<f64> {
    let p = Prepared { graph: sample.to_graph()?, target: sample.positions_t1.clone() };
    grad_check(
        |tape, vars| {
            let b = Bound { cfg: &params.config, layout: &params.layout, vars: vars.to_vec() };
            let st = forward_tape(tape, &p.graph, &b)?;
            let pred = tape.concat(&st.x);
            let target = tape.leaf(p.target.clone());
            Ok(tape.mse(pred, target))
        },
        &params.data(),
        seed,
        fault,
    )
}

/// Finite-difference check of the first-layer message of edge `(i, j)`,
/// summed to a scalar, through the feature initialization.
pub fn message_grad_check(g: &GeometricGraph, params: &ModelParams, i: usize, j: usize, seed: u64, fault: Option<Fault>) -> Result<f64> {
    if params.config.layer_count == 0 {
        return Err(Error::Config("message check needs at least one layer".into()));
    }
    grad_check(
        |tape, vars| {
            let b = Bound { cfg: &params.config, layout: &params.layout, vars: vars.to_vec() };
            let st = init_tape(tape, g, &b)?;
            let m = message_tape_public(tape, &b, &st, g, i, j)?;
            Ok(tape.sum_elems(m))
        },
        &params.data(),
        seed,
        fault,
    )
}
