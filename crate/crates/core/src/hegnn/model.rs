use nalgebra::Vector3;

use super::{Layout, MlpIdx, ModelConfig, ModelParams};
use crate::autodiff::{Dense, Tape, Var};
use crate::geomgraph::GeometricGraph;
use crate::specfun::{o3_rep_unchecked, sph_harm_raw, O3Element};
use crate::{Error, Result};

/// Edges shorter than this are rejected at initialization.
pub const MIN_EDGE_LENGTH: f64 = 1e-12;

/// Per-node features after some number of layers.
#[derive(Clone, Debug, PartialEq)]
pub struct SteerableState {
    pub h: Vec<Vec<f64>>,
    pub x: Vec<Vector3<f64>>,
    pub vel: Option<Vec<Vector3<f64>>>,
    /// `v[l][i]` holds `C_l` channels of `2l + 1` coefficients, channel-major.
    /// Degree 0 entries are empty; inactive degrees are zero.
    pub v: Vec<Vec<Vec<f64>>>,
}

impl SteerableState {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn max_degree(&self) -> usize {
        self.v.len().saturating_sub(1)
    }

    /// Applies `g` to every geometric quantity: coordinates and velocities
    /// by its matrix, steerable blocks by the parity representation.
    pub fn transformed(&self, g: &O3Element) -> Self {
        let m = g.matrix();
        let v = self
            .v
            .iter()
            .enumerate()
            .map(|(l, nodes)| {
                if l == 0 {
                    return nodes.clone();
                }
                let rep = o3_rep_unchecked(l, g);
                let d = 2 * l + 1;
                nodes
                    .iter()
                    .map(|block| {
                        block
                            .chunks(d)
                            .flat_map(|c| (&rep.matrix * nalgebra::DVector::from_column_slice(c)).iter().copied().collect::<Vec<_>>())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self {
            h: self.h.clone(),
            x: self.x.iter().map(|p| m * p).collect(),
            vel: self.vel.as_ref().map(|vs| vs.iter().map(|p| m * p).collect()),
            v,
        }
    }
}

/// Invariant message of one edge and the inner products feeding it.
#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub m: Vec<f64>,
    /// `z[l]` per degree; empty for inactive degrees.
    pub z: Vec<Vec<f64>>,
}

/// Node means of the invariant, coordinate and steerable outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Pooled {
    pub h: Vec<f64>,
    pub x: Vector3<f64>,
    pub v: Vec<Vec<f64>>,
}

pub(crate) struct Bound<'a> {
    pub cfg: &'a ModelConfig,
    pub layout: &'a Layout,
    pub vars: Vec<Var>,
}

impl Bound<'_> {
    fn mlp(&self, idx: &MlpIdx) -> Vec<Dense> {
        idx.iter().map(|d| Dense { w: self.vars[d.w], b: self.vars[d.b] }).collect()
    }
}

pub(crate) fn bind<'a>(tape: &mut Tape, params: &'a ModelParams, data: Option<&[Vec<f64>]>) -> Bound<'a> {
    let vars = match data {
        Some(d) => d.iter().map(|a| tape.leaf(a.clone())).collect(),
        None => params.arrays.iter().map(|a| tape.leaf(a.data.clone())).collect(),
    };
    Bound { cfg: &params.config, layout: &params.layout, vars }
}

pub(crate) struct TapeState {
    pub h: Vec<Var>,
    pub x: Vec<Var>,
    pub vel: Option<Vec<Var>>,
    /// `v[l][i]`, `None` for degree 0 and inactive degrees.
    pub v: Vec<Vec<Option<Var>>>,
}

struct EdgeVars {
    src: usize,
    dst: usize,
    e: Var,
}

fn check_graph(g: &GeometricGraph, cfg: &ModelConfig) -> Result<()> {
    if g.is_empty() {
        return Err(Error::Graph("empty graph".into()));
    }
    if g.node_dim() != cfg.node_dim {
        return Err(Error::Graph(format!("node scalars have width {}, model expects {}", g.node_dim(), cfg.node_dim)));
    }
    if !g.edges().is_empty() && g.edge_dim() != cfg.edge_dim {
        return Err(Error::Graph(format!("edge scalars have width {}, model expects {}", g.edge_dim(), cfg.edge_dim)));
    }
    if let Some(i) = (0..g.len()).find(|&i| g.neighbors(i).is_empty()) {
        return Err(Error::Graph(format!("node {i} is isolated")));
    }
    if cfg.use_velocity && g.velocities().is_none() {
        return Err(Error::Config("model uses velocities but the graph has none".into()));
    }
    Ok(())
}

fn edge_vars(tape: &mut Tape, g: &GeometricGraph) -> Vec<EdgeVars> {
    g.edges().iter().map(|e| EdgeVars { src: e.src, dst: e.dst, e: tape.leaf(e.scalars.clone()) }).collect()
}

/// Edges grouped by source node, in edge-list order.
fn by_source(edges: &[EdgeVars], n: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); n];
    for (k, e) in edges.iter().enumerate() {
        out[e.src].push(k);
    }
    out
}

fn mean_or_first(tape: &mut Tape, parts: &[Var]) -> Var {
    if parts.len() == 1 {
        parts[0]
    } else {
        tape.mean(parts)
    }
}

pub(crate) fn init_tape(tape: &mut Tape, g: &GeometricGraph, b: &Bound) -> Result<TapeState> {
    let cfg = b.cfg;
    check_graph(g, cfg)?;
    let n = g.len();
    let lmax = cfg.max_degree;
    let active = cfg.active_degrees();
    let embed = b.mlp(&b.layout.embed);
    let h: Vec<Var> = g
        .node_scalars()
        .iter()
        .map(|s| {
            let leaf = tape.leaf(s.clone());
            tape.mlp(&embed, leaf)
        })
        .collect();
    let x: Vec<Var> = g.coords().iter().map(|p| tape.leaf(vec![p.x, p.y, p.z])).collect();
    let vel = g.velocities().map(|vs| vs.iter().map(|p| tape.leaf(vec![p.x, p.y, p.z])).collect());
    let edges = edge_vars(tape, g);
    let msg_mlp = b.mlp(&b.layout.init_msg);
    let gate_mlps: Vec<Option<Vec<Dense>>> = b.layout.init_gate.iter().map(|m| m.as_ref().map(|m| b.mlp(m))).collect();
    let mut terms: Vec<Vec<Vec<Var>>> = vec![vec![Vec::new(); n]; lmax + 1];
    for e in &edges {
        let diff = g.coords()[e.src] - g.coords()[e.dst];
        let d = diff.norm();
        if !(d >= MIN_EDGE_LENGTH) {
            return Err(Error::Graph(format!("nodes {} and {} coincide", e.src, e.dst)));
        }
        let d2 = tape.leaf(vec![d * d]);
        let input = tape.concat(&[h[e.src], h[e.dst], e.e, d2]);
        let m = tape.mlp(&msg_mlp, input);
        let u = diff / d;
        let ys = sph_harm_raw(lmax, u.x, u.y, u.z);
        for &l in &active {
            let gate = tape.mlp(gate_mlps[l].as_ref().expect("active degree has a gate"), m);
            let y = tape.leaf(ys[l].values.clone());
            terms[l][e.src].push(tape.outer(gate, y));
        }
    }
    let mut v: Vec<Vec<Option<Var>>> = vec![vec![None; n]; lmax + 1];
    for &l in &active {
        for i in 0..n {
            v[l][i] = Some(mean_or_first(tape, &terms[l][i]));
        }
    }
    if cfg.center_anchor {
        let c = g.centroid();
        for i in 0..n {
            let r = g.coords()[i] - c;
            let rn = r.norm();
            if rn < MIN_EDGE_LENGTH {
                continue;
            }
            let r2 = tape.leaf(vec![rn * rn]);
            let input = tape.concat(&[h[i], r2]);
            let u = r / rn;
            let ys = sph_harm_raw(lmax, u.x, u.y, u.z);
            for &l in &active {
                let mlp = b.mlp(b.layout.anchor[l].as_ref().expect("anchor gate for active degree"));
                let gate = tape.mlp(&mlp, input);
                let y = tape.leaf(ys[l].values.clone());
                let term = tape.outer(gate, y);
                let cur = v[l][i].expect("active degree initialized");
                v[l][i] = Some(tape.add(cur, term));
            }
        }
    }
    Ok(TapeState { h, x, vel, v })
}

struct EdgeMessage {
    m: Var,
    diff: Var,
    z: Vec<Option<Var>>,
}

fn message_tape(tape: &mut Tape, b: &Bound, msg: &[Dense], st: &TapeState, e: &EdgeVars) -> EdgeMessage {
    let cfg = b.cfg;
    let (i, j) = (e.src, e.dst);
    let diff = tape.sub(st.x[i], st.x[j]);
    let d2 = tape.dot(diff, diff);
    let mut parts = vec![st.h[i], st.h[j], e.e, d2];
    let mut z = vec![None; cfg.max_degree + 1];
    for l in cfg.active_degrees() {
        let (vi, vj) = (st.v[l][i].expect("active"), st.v[l][j].expect("active"));
        let zl = tape.block_dots(vi, vj, 2 * l + 1, cfg.full_gram);
        z[l] = Some(zl);
        parts.push(zl);
    }
    let input = tape.concat(&parts);
    EdgeMessage { m: tape.mlp(msg, input), diff, z }
}

pub(crate) fn message_tape_public(tape: &mut Tape, b: &Bound, st: &TapeState, g: &GeometricGraph, i: usize, j: usize) -> Result<Var> {
    let scalars = g.edge_scalars(i, j).ok_or_else(|| Error::Graph(format!("no edge ({i}, {j})")))?.to_vec();
    let e = EdgeVars { src: i, dst: j, e: tape.leaf(scalars) };
    let msg = b.mlp(&b.layout.layers[0].msg);
    Ok(message_tape(tape, b, &msg, st, &e).m)
}

/// Cartesian vectors of the degree-1 channels, channel-major.
fn degree_one_cartesian(tape: &mut Tape, v1: Var, channels: usize) -> Var {
    let parts: Vec<Var> = (0..channels)
        .flat_map(|c| [2usize, 0, 1].map(|k| 3 * c + k))
        .map(|k| tape.slice(v1, k, 1))
        .collect::<Vec<_>>();
    let cat = tape.concat(&parts);
    tape.scale(cat, 1.0 / 3f64.sqrt())
}

pub(crate) fn layer_tape(tape: &mut Tape, g: &GeometricGraph, b: &Bound, k: usize, st: &TapeState) -> TapeState {
    let cfg = b.cfg;
    let idx = &b.layout.layers[k];
    let n = st.x.len();
    let edges = edge_vars(tape, g);
    let groups = by_source(&edges, n);
    let msg = b.mlp(&idx.msg);
    let h_mlp = b.mlp(&idx.h);
    let x_mlp = b.mlp(&idx.x);
    let v_mlps: Vec<Option<Vec<Dense>>> = idx.v.iter().map(|m| m.as_ref().map(|m| b.mlp(m))).collect();
    let active = cfg.active_degrees();
    let mut out = TapeState { h: Vec::with_capacity(n), x: Vec::with_capacity(n), vel: st.vel.clone(), v: vec![vec![None; n]; cfg.max_degree + 1] };
    for i in 0..n {
        let messages: Vec<EdgeMessage> = groups[i].iter().map(|&e| message_tape(tape, b, &msg, st, &edges[e])).collect();
        let ms: Vec<Var> = messages.iter().map(|m| m.m).collect();
        let m_mean = mean_or_first(tape, &ms);
        let h_in = tape.concat(&[st.h[i], m_mean]);
        let dh = tape.mlp(&h_mlp, h_in);
        out.h.push(tape.add(st.h[i], dh));

        let dx_terms: Vec<Var> = messages
            .iter()
            .map(|em| {
                let s = tape.mlp(&x_mlp, em.m);
                tape.scale_by(s, em.diff)
            })
            .collect();
        let dx = mean_or_first(tape, &dx_terms);
        let mut xi = tape.add(st.x[i], dx);
        if let (Some(vel_idx), Some(vel)) = (&idx.vel, &st.vel) {
            let s = tape.mlp(&b.mlp(vel_idx), st.h[i]);
            let step = tape.scale_by(s, vel[i]);
            xi = tape.add(xi, step);
        }
        if let Some(aug_idx) = &idx.aug {
            let gates = tape.mlp(&b.mlp(aug_idx), st.h[i]);
            let cart = degree_one_cartesian(tape, st.v[1][i].expect("degree 1 active"), cfg.channels[1]);
            let gated = tape.gate(gates, cart, 3);
            let per_channel: Vec<Var> = (0..cfg.channels[1]).map(|c| tape.slice(gated, 3 * c, 3)).collect();
            let shift = tape.sum(&per_channel);
            xi = tape.add(xi, shift);
        }
        out.x.push(xi);

        for &l in &active {
            let mlp = v_mlps[l].as_ref().expect("active degree has an update gate");
            let vi = st.v[l][i].expect("active");
            let terms: Vec<Var> = groups[i]
                .iter()
                .zip(&messages)
                .map(|(&e, em)| {
                    let gates = tape.mlp(mlp, em.m);
                    let diff = tape.sub(vi, st.v[l][edges[e].dst].expect("active"));
                    tape.gate(gates, diff, 2 * l + 1)
                })
                .collect();
            let dv = mean_or_first(tape, &terms);
            out.v[l][i] = Some(tape.add(vi, dv));
        }
    }
    out
}

pub(crate) fn forward_tape(tape: &mut Tape, g: &GeometricGraph, b: &Bound) -> Result<TapeState> {
    let mut st = init_tape(tape, g, b)?;
    for k in 0..b.cfg.layer_count {
        st = layer_tape(tape, g, b, k, &st);
    }
    Ok(st)
}

fn read_state(tape: &Tape, st: &TapeState, cfg: &ModelConfig) -> SteerableState {
    let n = st.x.len();
    let vec3 = |v: Var| {
        let s = tape.value(v);
        Vector3::new(s[0], s[1], s[2])
    };
    let v = (0..=cfg.max_degree)
        .map(|l| {
            (0..n)
                .map(|i| match st.v[l][i] {
                    Some(var) => tape.value(var).to_vec(),
                    None if l == 0 => Vec::new(),
                    None => vec![0.0; cfg.channels[l] * (2 * l + 1)],
                })
                .collect()
        })
        .collect();
    SteerableState {
        h: st.h.iter().map(|v| tape.value(*v).to_vec()).collect(),
        x: st.x.iter().map(|v| vec3(*v)).collect(),
        vel: st.vel.as_ref().map(|vs| vs.iter().map(|v| vec3(*v)).collect()),
        v,
    }
}

fn load_state(tape: &mut Tape, state: &SteerableState, cfg: &ModelConfig) -> Result<TapeState> {
    let n = state.len();
    if state.v.len() != cfg.max_degree + 1 || state.h.len() != n {
        return Err(Error::Config("state does not match the model configuration".into()));
    }
    for l in 1..=cfg.max_degree {
        let want = cfg.channels[l] * (2 * l + 1);
        if state.v[l].len() != n || state.v[l].iter().any(|b| b.len() != want) {
            return Err(Error::Config(format!("degree {l} blocks must have length {want}")));
        }
    }
    let h = state.h.iter().map(|r| tape.leaf(r.clone())).collect();
    let x = state.x.iter().map(|p| tape.leaf(vec![p.x, p.y, p.z])).collect();
    let vel = state.vel.as_ref().map(|vs| vs.iter().map(|p| tape.leaf(vec![p.x, p.y, p.z])).collect());
    let v = (0..=cfg.max_degree)
        .map(|l| (0..n).map(|i| cfg.is_active(l).then(|| tape.leaf(state.v[l][i].clone()))).collect())
        .collect();
    Ok(TapeState { h, x, vel, v })
}

/// Initial features: embedded node scalars, input coordinates and, per
/// active degree and channel, the gated neighbor mean of `Y^(l)` of the
/// edge directions.
pub fn init_features(g: &GeometricGraph, params: &ModelParams) -> Result<SteerableState> {
    let mut tape = Tape::new();
    let b = bind(&mut tape, params, None);
    let st = init_tape(&mut tape, g, &b)?;
    Ok(read_state(&tape, &st, &params.config))
}

/// Message of edge `(i, j)` in layer `layer`.
pub fn message(g: &GeometricGraph, state: &SteerableState, i: usize, j: usize, params: &ModelParams, layer: usize) -> Result<Message> {
    let cfg = &params.config;
    if layer >= cfg.layer_count {
        return Err(Error::Config(format!("layer {layer} out of range")));
    }
    let scalars = g.edge_scalars(i, j).ok_or_else(|| Error::Graph(format!("no edge ({i}, {j})")))?.to_vec();
    let mut tape = Tape::new();
    let b = bind(&mut tape, params, None);
    let st = load_state(&mut tape, state, cfg)?;
    let e = EdgeVars { src: i, dst: j, e: tape.leaf(scalars) };
    let msg = b.mlp(&b.layout.layers[layer].msg);
    let em = message_tape(&mut tape, &b, &msg, &st, &e);
    Ok(Message {
        m: tape.value(em.m).to_vec(),
        z: em.z.iter().map(|z| z.map(|v| tape.value(v).to_vec()).unwrap_or_default()).collect(),
    })
}

/// One layer of aggregation and residual updates.
pub fn aggregate_update(g: &GeometricGraph, state: &SteerableState, params: &ModelParams, layer: usize) -> Result<SteerableState> {
    let cfg = &params.config;
    if layer >= cfg.layer_count {
        return Err(Error::Config(format!("layer {layer} out of range")));
    }
    check_graph(g, cfg)?;
    let mut tape = Tape::new();
    let b = bind(&mut tape, params, None);
    let st = load_state(&mut tape, state, cfg)?;
    let out = layer_tape(&mut tape, g, &b, layer, &st);
    Ok(read_state(&tape, &out, cfg))
}

/// Initialization followed by every layer.
pub fn forward(g: &GeometricGraph, params: &ModelParams) -> Result<SteerableState> {
    let mut tape = Tape::new();
    let b = bind(&mut tape, params, None);
    let st = forward_tape(&mut tape, g, &b)?;
    Ok(read_state(&tape, &st, &params.config))
}

pub fn pool(state: &SteerableState) -> Pooled {
    let n = state.len().max(1) as f64;
    let mean_rows = |rows: &[Vec<f64>]| -> Vec<f64> {
        let mut acc = vec![0.0; rows.first().map_or(0, Vec::len)];
        for r in rows {
            for (a, x) in acc.iter_mut().zip(r) {
                *a += x;
            }
        }
        acc.iter().map(|a| a / n).collect()
    };
    Pooled {
        h: mean_rows(&state.h),
        x: state.x.iter().sum::<Vector3<f64>>() / n,
        v: state.v.iter().map(|nodes| mean_rows(nodes)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geomgraph::{make_polyhedron, random_rotation, Edge, Polyhedron};
    use crate::specfun::{sph_harm, wigner_d, Parity, Rotation3, UnitVec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(cfg: ModelConfig) -> ModelConfig {
        cfg.with_width(8)
    }

    fn random_graph(seed: u64, n: usize) -> GeometricGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords: Vec<Vector3<f64>> = (0..n)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let scalars = (0..n).map(|_| vec![rng.random_range(0.0..1.0)]).collect();
        GeometricGraph::fully_connected(scalars, coords).unwrap()
    }

    #[test]
    fn single_neighbor_unit_gate_gives_harmonic() {
        let coords = vec![Vector3::new(0.3, -0.2, 0.5), Vector3::new(-0.4, 0.1, 0.2)];
        let edges = vec![Edge { src: 0, dst: 1, scalars: vec![] }, Edge { src: 1, dst: 0, scalars: vec![] }];
        let g = GeometricGraph::new(vec![vec![1.0]; 2], coords.clone(), None, edges).unwrap();
        let cfg = ModelConfig { layer_count: 0, ..small(ModelConfig::new(4, 1, 0)) };
        let mut p = ModelParams::init(&cfg, 1).unwrap();
        p.set_unit_init_gates();
        let st = init_features(&g, &p).unwrap();
        let u = UnitVec3::from_direction(&(coords[0] - coords[1])).unwrap();
        for l in 1..=4 {
            let y = sph_harm(l, u).unwrap().values;
            let block = &st.v[l][0];
            for c in 0..cfg.channels[l] {
                for k in 0..2 * l + 1 {
                    assert!((block[c * (2 * l + 1) + k] - y[k]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn init_rejects_bad_graphs() {
        let cfg = small(ModelConfig::new(2, 1, 0));
        let p = ModelParams::init(&cfg, 0).unwrap();
        let lonely = GeometricGraph::new(
            vec![vec![1.0]; 3],
            vec![Vector3::x(), Vector3::y(), Vector3::z()],
            None,
            vec![Edge { src: 0, dst: 1, scalars: vec![] }, Edge { src: 1, dst: 0, scalars: vec![] }],
        )
        .unwrap();
        assert!(matches!(init_features(&lonely, &p), Err(Error::Graph(_))));
        let twin = GeometricGraph::fully_connected(vec![vec![1.0]; 2], vec![Vector3::x(), Vector3::x()]).unwrap();
        assert!(matches!(init_features(&twin, &p), Err(Error::Graph(_))));
        let wide = GeometricGraph::fully_connected(vec![vec![1.0, 2.0]; 2], vec![Vector3::x(), Vector3::y()]).unwrap();
        assert!(init_features(&wide, &p).is_err());
    }

    #[test]
    fn masked_degrees_stay_zero() {
        let g = random_graph(2, 5);
        let cfg = small(ModelConfig::single_degree(3, 1, 0));
        let st = forward(&g, &ModelParams::init(&cfg, 5).unwrap()).unwrap();
        for l in [1, 2] {
            assert!(st.v[l].iter().flatten().all(|x| *x == 0.0));
        }
        assert!(st.v[3].iter().flatten().any(|x| *x != 0.0));
    }

    #[test]
    fn equivariance_under_rotation_and_inversion() {
        let g = random_graph(7, 6);
        for anchor in [false, true] {
            let cfg = ModelConfig { center_anchor: anchor, ..small(ModelConfig::new(4, 1, 0)) };
            let p = ModelParams::init(&cfg, 11).unwrap();
            let base = forward(&g, &p).unwrap();
            for (seed, parity) in [(1, Parity::Even), (2, Parity::Odd)] {
                let e = O3Element::new(random_rotation(seed), parity);
                let moved = forward(&g.transformed(&e), &p).unwrap();
                let want = base.transformed(&e);
                for i in 0..g.len() {
                    for (a, b) in moved.h[i].iter().zip(&want.h[i]) {
                        assert!((a - b).abs() < 1e-8);
                    }
                    assert!((moved.x[i] - want.x[i]).norm() < 1e-8);
                    for l in 1..=4 {
                        for (a, b) in moved.v[l][i].iter().zip(&want.v[l][i]) {
                            assert!((a - b).abs() < 1e-8, "l={l} parity={parity:?}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn translation_and_zero_layers() {
        let g = random_graph(3, 5);
        let cfg = small(ModelConfig { center_anchor: true, ..ModelConfig::new(2, 1, 0) });
        let p = ModelParams::init(&cfg, 2).unwrap();
        let a = forward(&g, &p).unwrap();
        let t = Vector3::new(1.5, -2.0, 0.25);
        let b = forward(&g.translated(&t), &p).unwrap();
        for i in 0..5 {
            assert!((a.x[i] + t - b.x[i]).norm() < 1e-9);
            for l in 1..=2 {
                for (u, w) in a.v[l][i].iter().zip(&b.v[l][i]) {
                    assert!((u - w).abs() < 1e-9);
                }
            }
        }
        let cfg0 = ModelConfig { layer_count: 0, ..cfg };
        let p0 = ModelParams::init(&cfg0, 2).unwrap();
        assert_eq!(forward(&g, &p0).unwrap(), init_features(&g, &p0).unwrap());
        assert!(pool(&forward(&g.centered(), &p0).unwrap()).x.norm() < 1e-12);
    }

    #[test]
    fn forward_is_composition_of_public_steps() {
        let g = random_graph(4, 4);
        let cfg = small(ModelConfig::new(2, 1, 0));
        let p = ModelParams::init(&cfg, 9).unwrap();
        let mut st = init_features(&g, &p).unwrap();
        for k in 0..cfg.layer_count {
            st = aggregate_update(&g, &st, &p, k).unwrap();
        }
        let f = forward(&g, &p).unwrap();
        for i in 0..4 {
            assert!((st.x[i] - f.x[i]).norm() < 1e-13);
        }
    }

    #[test]
    fn message_invariance_and_self_products() {
        let g = random_graph(5, 5);
        let cfg = small(ModelConfig::new(3, 1, 0));
        let p = ModelParams::init(&cfg, 1).unwrap();
        let st = init_features(&g, &p).unwrap();
        let r = random_rotation(8);
        let rst = init_features(&g.rotated(&r), &p).unwrap();
        let a = message(&g, &st, 0, 1, &p, 0).unwrap();
        let b = message(&g.rotated(&r), &rst, 0, 1, &p, 0).unwrap();
        for (u, w) in a.m.iter().zip(&b.m) {
            assert!((u - w).abs() < 1e-10);
        }
        for l in 1..=3 {
            for (u, w) in a.z[l].iter().zip(&b.z[l]) {
                assert!((u - w).abs() < 1e-10);
            }
        }
        // identical features on both ends: z is the squared channel norm
        let mut same = st.clone();
        same.v[2][1] = same.v[2][0].clone();
        let m = message(&g, &same, 0, 1, &p, 0).unwrap();
        let sq: f64 = same.v[2][0].iter().map(|x| x * x).sum();
        assert!((m.z[2][0] - sq).abs() < 1e-12 && m.z[2][0] >= 0.0);
    }

    #[test]
    fn zero_gates_only_change_h() {
        let g = random_graph(6, 4);
        let cfg = small(ModelConfig::new(2, 1, 0));
        let mut p = ModelParams::init(&cfg, 4).unwrap();
        p.zero_update_gates();
        let st = init_features(&g, &p).unwrap();
        let next = aggregate_update(&g, &st, &p, 0).unwrap();
        assert_eq!(next.x, st.x);
        assert_eq!(next.v, st.v);
        assert_ne!(next.h, st.h);
    }

    #[test]
    fn two_identical_nodes_do_not_update_v() {
        let g = GeometricGraph::fully_connected(vec![vec![1.0]; 2], vec![Vector3::x(), -Vector3::x()]).unwrap();
        let cfg = small(ModelConfig::new(3, 1, 0));
        let p = ModelParams::init(&cfg, 4).unwrap();
        let mut st = init_features(&g, &p).unwrap();
        for l in 1..=3 {
            st.v[l][1] = st.v[l][0].clone();
        }
        let next = aggregate_update(&g, &st, &p, 0).unwrap();
        assert_eq!(next.v, st.v);
    }

    #[test]
    fn cube_degenerate_degrees_pool_to_zero() {
        let cube = make_polyhedron(Polyhedron::Cube);
        let cfg = small(ModelConfig { center_anchor: true, ..ModelConfig::new(5, 1, 0) });
        for seed in 0..3 {
            let pooled = pool(&forward(&cube, &ModelParams::init(&cfg, seed).unwrap()).unwrap());
            for l in [1, 2, 3, 5] {
                let nrm: f64 = pooled.v[l].iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!(nrm < 1e-8, "l={l} {nrm}");
            }
            let four: f64 = pooled.v[4].iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(four > 1e-3);
        }
    }

    #[test]
    fn coordinate_augmentation_is_equivariant() {
        let g = random_graph(9, 5);
        let cfg = small(ModelConfig { coord_augment: true, ..ModelConfig::new(2, 1, 0) });
        let p = ModelParams::init(&cfg, 3).unwrap();
        let r = Rotation3::about_axis(Vector3::new(1.0, 2.0, -0.5), 0.9);
        let a = forward(&g, &p).unwrap();
        let b = forward(&g.rotated(&r), &p).unwrap();
        let d1 = wigner_d(1, &r).unwrap();
        for i in 0..5 {
            assert!((r.apply(&a.x[i]) - b.x[i]).norm() < 1e-9);
            let rotated = &d1.matrix * nalgebra::DVector::from_column_slice(&a.v[1][i][0..3]);
            for k in 0..3 {
                assert!((rotated[k] - b.v[1][i][k]).abs() < 1e-9);
            }
        }
    }
}
