//! The HEGNN model: steerable feature initialization from spherical
//! harmonics, invariant cross-degree messages, gated residual updates,
//! pooling, the discrimination protocol, angle recovery and training.

mod expressivity;
mod model;
mod train;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::specfun::MAX_DEGREE;
use crate::{Error, Result};

pub use expressivity::{
    angle_multiset, discriminates, recover_angles, sph_sum_check, z_mean_to_sum, Discrimination, TrialOutcome,
    DISCRIMINATION_CUT, MAX_RECOVER, SPH_SUM_CUT,
};
pub use model::{
    aggregate_update, forward, init_features, message, pool, Message, Pooled, SteerableState, MIN_EDGE_LENGTH,
};
pub use train::{
    evaluate_mse, linear_baseline_mse, load_checkpoint, message_grad_check, model_grad_check, predict, save_checkpoint, train, TrainHistory,
    CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};

/// Architecture and feature layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Highest steerable degree `L`.
    pub max_degree: usize,
    /// Channel counts `C_0..C_L`; `C_0` is the width of the invariant
    /// features `h`.
    pub channels: Vec<usize>,
    pub hidden_width: usize,
    pub layer_count: usize,
    /// Adds `phi_vel(h_i) v_i` to the coordinates in the first layer.
    pub use_velocity: bool,
    /// Steerable degrees that are initialized; the rest stay zero.
    pub degree_mask: BTreeSet<usize>,
    /// All channel pairs in the cross-degree inner products instead of the
    /// diagonal ones.
    pub full_gram: bool,
    /// Adds `sum_c phi_aug(h_i)_c v_i^(1,c)` to the coordinates each layer.
    pub coord_augment: bool,
    /// Adds a term gated by `[h_i, |x_i - x_c|^2]` along `Y(x_i - x_c)` to
    /// the initial steerable features, with `x_c` the centroid.
    pub center_anchor: bool,
    pub node_dim: usize,
    pub edge_dim: usize,
}

impl ModelConfig {
    /// Degrees `1..=max_degree`, one channel each except three for degree 1.
    pub fn new(max_degree: usize, node_dim: usize, edge_dim: usize) -> Self {
        let hidden = 64;
        let mut channels = vec![hidden];
        channels.extend((1..=max_degree).map(|l| if l == 1 { 3 } else { 1 }));
        Self {
            max_degree,
            channels,
            hidden_width: hidden,
            layer_count: 2,
            use_velocity: false,
            degree_mask: (1..=max_degree).collect(),
            full_gram: false,
            coord_augment: false,
            center_anchor: false,
            node_dim,
            edge_dim,
        }
    }

    /// Only degree `l` active.
    pub fn single_degree(l: usize, node_dim: usize, edge_dim: usize) -> Self {
        Self { degree_mask: [l].into(), ..Self::new(l, node_dim, edge_dim) }
    }

    /// Sets `hidden_width` and the scalar channel count together.
    pub fn with_width(mut self, width: usize) -> Self {
        self.hidden_width = width;
        if let Some(c0) = self.channels.first_mut() {
            *c0 = width;
        }
        self
    }

    pub fn scalar_width(&self) -> usize {
        self.channels[0]
    }

    /// Active steerable degrees in increasing order.
    pub fn active_degrees(&self) -> Vec<usize> {
        self.degree_mask.iter().copied().filter(|l| *l >= 1).collect()
    }

    pub fn is_active(&self, l: usize) -> bool {
        l >= 1 && self.degree_mask.contains(&l)
    }

    /// Width of the invariant products contributed by degree `l`.
    pub fn z_width(&self, l: usize) -> usize {
        let c = self.channels[l];
        if self.full_gram {
            c * c
        } else {
            c
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_degree > MAX_DEGREE {
            return Err(Error::DegreeTooHigh(self.max_degree));
        }
        if self.channels.len() != self.max_degree + 1 {
            return Err(Error::Config(format!(
                "expected {} channel counts, got {}",
                self.max_degree + 1,
                self.channels.len()
            )));
        }
        if self.channels[0] == 0 || self.hidden_width == 0 {
            return Err(Error::Config("scalar and hidden widths must be positive".into()));
        }
        for &l in &self.degree_mask {
            if l > self.max_degree {
                return Err(Error::Config(format!("masked degree {l} exceeds max degree {}", self.max_degree)));
            }
            if l >= 1 && self.channels[l] == 0 {
                return Err(Error::Config(format!("active degree {l} has no channels")));
            }
        }
        if self.coord_augment && !self.is_active(1) {
            return Err(Error::Config("coordinate augmentation needs degree 1".into()));
        }
        Ok(())
    }
}

/// One named parameter array. Matrices are row-major `[rows, cols]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Array indices of one dense layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct DenseIdx {
    pub w: usize,
    pub b: usize,
}

pub(crate) type MlpIdx = Vec<DenseIdx>;

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LayerIdx {
    pub msg: MlpIdx,
    pub h: MlpIdx,
    pub x: MlpIdx,
    /// Indexed by degree; `None` for degree 0 and inactive degrees.
    pub v: Vec<Option<MlpIdx>>,
    pub vel: Option<MlpIdx>,
    pub aug: Option<MlpIdx>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layout {
    pub embed: MlpIdx,
    pub init_msg: MlpIdx,
    pub init_gate: Vec<Option<MlpIdx>>,
    pub anchor: Vec<Option<MlpIdx>>,
    pub layers: Vec<LayerIdx>,
}

struct LayoutBuilder {
    arrays: Vec<ParamArray>,
}

impl LayoutBuilder {
    fn dense(&mut self, name: &str, rows: usize, cols: usize) -> DenseIdx {
        let w = self.arrays.len();
        self.arrays.push(ParamArray { name: format!("{name}.w"), shape: vec![rows, cols], data: vec![0.0; rows * cols] });
        self.arrays.push(ParamArray { name: format!("{name}.b"), shape: vec![rows], data: vec![0.0; rows] });
        DenseIdx { w, b: w + 1 }
    }

    /// `input -> hidden -> hidden -> output`.
    fn mlp(&mut self, name: &str, input: usize, hidden: usize, output: usize) -> MlpIdx {
        vec![
            self.dense(&format!("{name}.0"), hidden, input),
            self.dense(&format!("{name}.1"), hidden, hidden),
            self.dense(&format!("{name}.2"), output, hidden),
        ]
    }
}

pub(crate) fn layout(cfg: &ModelConfig) -> (Layout, Vec<ParamArray>) {
    let mut b = LayoutBuilder { arrays: Vec::new() };
    let (c0, hw) = (cfg.scalar_width(), cfg.hidden_width);
    let pair_in = 2 * c0 + cfg.edge_dim + 1;
    let per_degree = |b: &mut LayoutBuilder, prefix: &str, input: usize, enabled: bool| -> Vec<Option<MlpIdx>> {
        (0..=cfg.max_degree)
            .map(|l| {
                (enabled && cfg.is_active(l)).then(|| b.mlp(&format!("{prefix}.l{l}"), input, hw, cfg.channels[l]))
            })
            .collect()
    };
    let embed = vec![b.dense("embed", c0, cfg.node_dim)];
    let init_msg = b.mlp("init.msg", pair_in, hw, hw);
    let init_gate = per_degree(&mut b, "init.gate", hw, true);
    let anchor = per_degree(&mut b, "anchor", c0 + 1, cfg.center_anchor);
    let z_total: usize = cfg.active_degrees().iter().map(|l| cfg.z_width(*l)).sum();
    let layers = (0..cfg.layer_count)
        .map(|k| {
            let p = format!("layer{k}");
            LayerIdx {
                msg: b.mlp(&format!("{p}.msg"), pair_in + z_total, hw, hw),
                h: b.mlp(&format!("{p}.h"), c0 + hw, hw, c0),
                x: b.mlp(&format!("{p}.x"), hw, hw, 1),
                v: per_degree(&mut b, &format!("{p}.v"), hw, true),
                vel: (cfg.use_velocity && k == 0).then(|| b.mlp(&format!("{p}.vel"), c0, hw, 1)),
                aug: cfg.coord_augment.then(|| b.mlp(&format!("{p}.aug"), c0, hw, cfg.channels[1])),
            }
        })
        .collect();
    (Layout { embed, init_msg, init_gate, anchor, layers }, b.arrays)
}

/// Model weights: the configuration plus a flat list of named arrays in a
/// fixed order derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub arrays: Vec<ParamArray>,
    pub(crate) layout: Layout,
}

impl ModelParams {
    /// Weights drawn from `N(0, 1/fan_in)`, biases zero.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (layout, mut arrays) = layout(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for a in arrays.iter_mut().filter(|a| a.shape.len() == 2) {
            let fan_in = a.shape[1].max(1) as f64;
            let dist = Normal::new(0.0, 1.0 / fan_in.sqrt()).expect("positive std");
            for x in &mut a.data {
                *x = dist.sample(&mut rng);
            }
        }
        Ok(Self { config: cfg.clone(), arrays, layout })
    }

    /// Rebuilds parameters from named arrays, checking names and shapes.
    pub fn from_arrays(cfg: &ModelConfig, arrays: Vec<ParamArray>) -> Result<Self> {
        cfg.validate()?;
        let (layout, expected) = layout(cfg);
        if expected.len() != arrays.len() {
            return Err(Error::Format(format!("expected {} arrays, got {}", expected.len(), arrays.len())));
        }
        for (e, a) in expected.iter().zip(&arrays) {
            if e.name != a.name || e.shape != a.shape {
                return Err(Error::Format(format!("array {} {:?} does not match {} {:?}", a.name, a.shape, e.name, e.shape)));
            }
            if a.data.len() != a.shape.iter().product::<usize>() {
                return Err(Error::Format(format!("array {} has {} values for shape {:?}", a.name, a.data.len(), a.shape)));
            }
            if a.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::Format(format!("array {} has non-finite values", a.name)));
            }
        }
        Ok(Self { config: cfg.clone(), arrays, layout })
    }

    pub fn count(&self) -> usize {
        self.arrays.iter().map(|a| a.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&ParamArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn data(&self) -> Vec<Vec<f64>> {
        self.arrays.iter().map(|a| a.data.clone()).collect()
    }

    pub fn set_data(&mut self, data: Vec<Vec<f64>>) {
        for (a, d) in self.arrays.iter_mut().zip(data) {
            debug_assert_eq!(a.data.len(), d.len());
            a.data = d;
        }
    }

    fn set_constant_output(&mut self, mlp: &MlpIdx, value: f64) {
        let last = mlp.last().expect("mlp has layers");
        self.arrays[last.w].data.fill(0.0);
        self.arrays[last.b].data.fill(value);
    }

    /// Makes every initialization gate output exactly 1, so each initial
    /// steerable feature is the plain neighbor mean of spherical harmonics.
    pub fn set_unit_init_gates(&mut self) {
        let mlps: Vec<MlpIdx> = self.layout.init_gate.iter().flatten().cloned().collect();
        for m in &mlps {
            self.set_constant_output(m, 1.0);
        }
    }

    /// Sets every center-anchor gate to the constant `value`.
    pub fn set_anchor_gates(&mut self, value: f64) {
        let mlps: Vec<MlpIdx> = self.layout.anchor.iter().flatten().cloned().collect();
        for m in &mlps {
            self.set_constant_output(m, value);
        }
    }

    /// Zeroes the coordinate and steerable update gates of every layer.
    pub fn zero_update_gates(&mut self) {
        let mut mlps = Vec::new();
        for layer in &self.layout.layers {
            mlps.push(layer.x.clone());
            mlps.extend(layer.v.iter().flatten().cloned());
        }
        for m in &mlps {
            self.set_constant_output(m, 0.0);
        }
    }
}
