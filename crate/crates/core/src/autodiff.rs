//! Reverse-mode differentiation over vector-valued nodes, the Adam optimizer
//! and a central-difference gradient checker.
//!
//! Every node holds a flat `Vec<f64>`. Scalars are length-1 vectors. The
//! backward sweep visits nodes in reverse insertion order and accumulates
//! into per-node buffers in a fixed order, so gradients are bit-reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `w` is `rows x cols` row-major.
    Affine { w: Var, b: Var, x: Var, rows: usize, cols: usize },
    Silu(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Dot(Var, Var),
    Norm(Var),
    ScaleBy(Var, Var),
    /// `out[c * block + k] = g[c] * v[c * block + k]`
    Gate { g: Var, v: Var, block: usize },
    /// `out[c * d + k] = g[c] * y[k]`
    Outer { g: Var, y: Var },
    /// Channel-wise inner products of `a` and `b` split into blocks.
    BlockDots { a: Var, b: Var, block: usize, full: bool },
    Sum(Vec<Var>),
    SumElems(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Deliberate backward-pass defects, used as negative controls by the
/// verification suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Drops the gradient flowing into gate values.
    GateBackward,
    /// Uses the plain sigmoid as the silu derivative.
    SiluBackward,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Option<Fault>) -> Self {
        Self { nodes: Vec::new(), fault }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn dim(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    /// Input node. Parameters and constants are both leaves; only the ones
    /// passed to [`grad`] receive gradients.
    pub fn leaf(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).iter().map(|x| x * k).collect();
        self.push(v, Op::Scale(a, k))
    }

    /// `W x + b` with `W` stored row-major.
    pub fn affine(&mut self, w: Var, b: Var, x: Var) -> Var {
        let cols = self.dim(x);
        let rows = self.dim(b);
        assert_eq!(self.dim(w), rows * cols, "affine weight shape");
        let (wv, bv, xv) = (self.value(w), self.value(b), self.value(x));
        let out = (0..rows)
            .map(|r| bv[r] + wv[r * cols..(r + 1) * cols].iter().zip(xv).map(|(p, q)| p * q).sum::<f64>())
            .collect();
        self.push(out, Op::Affine { w, b, x, rows, cols })
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        self.push(v, Op::Silu(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let v = parts.iter().flat_map(|p| self.value(*p).iter().copied()).collect();
        self.push(v, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a)[start..start + len].to_vec();
        self.push(v, Op::Slice(a, start))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let s = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum();
        self.push(vec![s], Op::Dot(a, b))
    }

    /// Euclidean norm. The gradient at the zero vector is taken as zero.
    pub fn norm(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x * x).sum::<f64>().sqrt();
        self.push(vec![s], Op::Norm(a))
    }

    /// Multiplies the vector `v` by the length-1 node `s`.
    pub fn scale_by(&mut self, s: Var, v: Var) -> Var {
        let k = self.scalar(s);
        let out = self.value(v).iter().map(|x| x * k).collect();
        self.push(out, Op::ScaleBy(s, v))
    }

    /// Scales each `block`-sized chunk of `v` by the matching entry of `g`.
    pub fn gate(&mut self, g: Var, v: Var, block: usize) -> Var {
        let gv = self.value(g);
        assert_eq!(gv.len() * block, self.dim(v), "gate shape");
        let out = self.value(v).chunks(block).zip(gv).flat_map(|(c, k)| c.iter().map(move |x| x * k)).collect();
        self.push(out, Op::Gate { g, v, block })
    }

    /// Outer product `g ⊗ y`, channel-major.
    pub fn outer(&mut self, g: Var, y: Var) -> Var {
        let yv = self.value(y);
        let out = self.value(g).iter().flat_map(|k| yv.iter().map(move |x| x * k)).collect();
        self.push(out, Op::Outer { g, y })
    }

    /// Inner products between `block`-sized channels of `a` and `b`: one per
    /// channel pair `(c, c)`, or all pairs `(c, c')` when `full`.
    pub fn block_dots(&mut self, a: Var, b: Var, block: usize, full: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "block_dots shape");
        let ch = av.len() / block;
        let d = |c: usize, e: usize| -> f64 {
            av[c * block..(c + 1) * block].iter().zip(&bv[e * block..(e + 1) * block]).map(|(x, y)| x * y).sum()
        };
        let out = if full {
            (0..ch * ch).map(|k| d(k / ch, k % ch)).collect()
        } else {
            (0..ch).map(|c| d(c, c)).collect()
        };
        self.push(out, Op::BlockDots { a, b, block, full })
    }

    /// Elementwise sum of equally shaped nodes, accumulated left to right.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "sum of nothing");
        let mut v = self.value(parts[0]).to_vec();
        for p in &parts[1..] {
            for (acc, x) in v.iter_mut().zip(self.value(*p)) {
                *acc += x;
            }
        }
        self.push(v, Op::Sum(parts.to_vec()))
    }

    pub fn mean(&mut self, parts: &[Var]) -> Var {
        let s = self.sum(parts);
        self.scale(s, 1.0 / parts.len() as f64)
    }

    pub fn sum_elems(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![s], Op::SumElems(a))
    }

    /// Mean squared difference as a scalar node.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let n = self.dim(a);
        let d = self.sub(a, b);
        let s = self.dot(d, d);
        self.scale(s, 1.0 / n as f64)
    }

    /// Dense layer `W x + b` for weights held on the tape.
    pub fn dense(&mut self, layer: &Dense, x: Var) -> Var {
        self.affine(layer.w, layer.b, x)
    }

    /// Silu MLP with a linear output layer.
    pub fn mlp(&mut self, layers: &[Dense], x: Var) -> Var {
        let mut h = x;
        for (k, layer) in layers.iter().enumerate() {
            h = self.dense(layer, h);
            if k + 1 < layers.len() {
                h = self.silu(h);
            }
        }
        h
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    assert_eq!(a.len(), b.len(), "shape mismatch");
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

/// Weight and bias nodes of one dense layer.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: Var,
    pub b: Var,
}

fn acc(buf: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    buf[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Gradients of the scalar `loss` with respect to `params`. Parameters the
/// loss does not depend on get zero arrays.
pub fn grad(tape: &Tape, loss: Var, params: &[Var]) -> Result<Vec<Vec<f64>>> {
    if tape.dim(loss) != 1 {
        return Err(Error::Tape(format!("loss must be scalar, has {} entries", tape.dim(loss))));
    }
    let n = loss.0 + 1;
    let mut g: Vec<Option<Vec<f64>>> = vec![None; n];
    g[loss.0] = Some(vec![1.0]);
    for idx in (0..n).rev() {
        let Some(dy) = g[idx].take() else { continue };
        let node = &tape.nodes[idx];
        let len = |v: Var| tape.dim(v);
        match &node.op {
            Op::Leaf => {
                g[idx] = Some(dy);
                continue;
            }
            Op::Add(a, b) => {
                for (t, d) in acc(&mut g, *a, len(*a)).iter_mut().zip(&dy) {
                    *t += d;
                }
                for (t, d) in acc(&mut g, *b, len(*b)).iter_mut().zip(&dy) {
                    *t += d;
                }
            }
            Op::Sub(a, b) => {
                for (t, d) in acc(&mut g, *a, len(*a)).iter_mut().zip(&dy) {
                    *t += d;
                }
                for (t, d) in acc(&mut g, *b, len(*b)).iter_mut().zip(&dy) {
                    *t -= d;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (tape.value(*a), tape.value(*b));
                for ((t, d), y) in acc(&mut g, *a, av.len()).iter_mut().zip(&dy).zip(bv) {
                    *t += d * y;
                }
                for ((t, d), x) in acc(&mut g, *b, bv.len()).iter_mut().zip(&dy).zip(av) {
                    *t += d * x;
                }
            }
            Op::Scale(a, k) => {
                for (t, d) in acc(&mut g, *a, len(*a)).iter_mut().zip(&dy) {
                    *t += d * k;
                }
            }
            Op::Affine { w, b, x, rows, cols } => {
                let (wv, xv) = (tape.value(*w), tape.value(*x));
                let gx = acc(&mut g, *x, *cols);
                for r in 0..*rows {
                    let d = dy[r];
                    for (t, wc) in gx.iter_mut().zip(&wv[r * cols..(r + 1) * cols]) {
                        *t += d * wc;
                    }
                }
                let gw = acc(&mut g, *w, rows * cols);
                for r in 0..*rows {
                    let d = dy[r];
                    for (t, xc) in gw[r * cols..(r + 1) * cols].iter_mut().zip(xv) {
                        *t += d * xc;
                    }
                }
                for (t, d) in acc(&mut g, *b, *rows).iter_mut().zip(&dy) {
                    *t += d;
                }
            }
            Op::Silu(a) => {
                let av = tape.value(*a);
                let broken = tape.fault == Some(Fault::SiluBackward);
                for ((t, d), &x) in acc(&mut g, *a, av.len()).iter_mut().zip(&dy).zip(av) {
                    let s = sigmoid(x);
                    let ds = if broken { s } else { s * (1.0 + x * (1.0 - s)) };
                    *t += d * ds;
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let l = len(*p);
                    for (t, d) in acc(&mut g, *p, l).iter_mut().zip(&dy[off..off + l]) {
                        *t += d;
                    }
                    off += l;
                }
            }
            Op::Slice(a, start) => {
                let ga = acc(&mut g, *a, len(*a));
                for (t, d) in ga[*start..*start + dy.len()].iter_mut().zip(&dy) {
                    *t += d;
                }
            }
            Op::Dot(a, b) => {
                let d = dy[0];
                let (av, bv) = (tape.value(*a), tape.value(*b));
                for (t, y) in acc(&mut g, *a, av.len()).iter_mut().zip(bv) {
                    *t += d * y;
                }
                for (t, x) in acc(&mut g, *b, bv.len()).iter_mut().zip(av) {
                    *t += d * x;
                }
            }
            Op::Norm(a) => {
                let nrm = node.value[0];
                if nrm > 0.0 {
                    let k = dy[0] / nrm;
                    let av = tape.value(*a);
                    for (t, x) in acc(&mut g, *a, av.len()).iter_mut().zip(av) {
                        *t += k * x;
                    }
                }
            }
            Op::ScaleBy(s, v) => {
                let (k, vv) = (tape.scalar(*s), tape.value(*v));
                let ds: f64 = dy.iter().zip(vv).map(|(d, x)| d * x).sum();
                acc(&mut g, *s, 1)[0] += ds;
                for (t, d) in acc(&mut g, *v, vv.len()).iter_mut().zip(&dy) {
                    *t += d * k;
                }
            }
            Op::Gate { g: gate, v, block } => {
                let (gv, vv) = (tape.value(*gate), tape.value(*v));
                if tape.fault != Some(Fault::GateBackward) {
                    let gg = acc(&mut g, *gate, gv.len());
                    for (c, t) in gg.iter_mut().enumerate() {
                        let r = c * block..(c + 1) * block;
                        *t += dy[r.clone()].iter().zip(&vv[r]).map(|(d, x)| d * x).sum::<f64>();
                    }
                }
                let gvv = acc(&mut g, *v, vv.len());
                for (k, t) in gvv.iter_mut().enumerate() {
                    *t += dy[k] * gv[k / block];
                }
            }
            Op::Outer { g: gate, y } => {
                let (gv, yv) = (tape.value(*gate), tape.value(*y));
                let d = yv.len();
                let gg = acc(&mut g, *gate, gv.len());
                for (c, t) in gg.iter_mut().enumerate() {
                    *t += dy[c * d..(c + 1) * d].iter().zip(yv).map(|(p, q)| p * q).sum::<f64>();
                }
                let gy = acc(&mut g, *y, d);
                for (c, k) in gv.iter().enumerate() {
                    for (t, p) in gy.iter_mut().zip(&dy[c * d..(c + 1) * d]) {
                        *t += p * k;
                    }
                }
            }
            Op::BlockDots { a, b, block, full } => {
                let (av, bv) = (tape.value(*a), tape.value(*b));
                let ch = av.len() / block;
                let pairs: Vec<(usize, usize, f64)> = if *full {
                    (0..ch * ch).map(|k| (k / ch, k % ch, dy[k])).collect()
                } else {
                    (0..ch).map(|c| (c, c, dy[c])).collect()
                };
                let ga = acc(&mut g, *a, av.len());
                for &(c, e, d) in &pairs {
                    for k in 0..*block {
                        ga[c * block + k] += d * bv[e * block + k];
                    }
                }
                let gb = acc(&mut g, *b, bv.len());
                for &(c, e, d) in &pairs {
                    for k in 0..*block {
                        gb[e * block + k] += d * av[c * block + k];
                    }
                }
            }
            Op::Sum(parts) => {
                for p in parts {
                    for (t, d) in acc(&mut g, *p, dy.len()).iter_mut().zip(&dy) {
                        *t += d;
                    }
                }
            }
            Op::SumElems(a) => {
                let d = dy[0];
                for t in acc(&mut g, *a, len(*a)).iter_mut() {
                    *t += d;
                }
            }
        }
    }
    Ok(params
        .iter()
        .map(|p| g.get(p.0).cloned().flatten().unwrap_or_else(|| vec![0.0; tape.dim(*p)]))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, batch_size: 32, epochs: 100, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, shapes: &[usize]) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: shapes.iter().map(|n| vec![0.0; *n]).collect(),
            v: shapes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                p[k] -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Random directions per check.
pub const FD_DIRECTIONS: usize = 20;
/// Denominator floor for the relative error, so that directions with a
/// vanishing derivative are compared absolutely.
pub const FD_FLOOR: f64 = 1e-4;

/// Compares analytic directional derivatives of `f` at `params` with central
/// differences along random directions. `f` must build a scalar loss from the
/// parameter leaves it is given. Returns the largest relative error.
pub fn grad_check<F>(f: F, params: &[Vec<f64>], seed: u64, fault: Option<Fault>) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |p: &[Vec<f64>], with_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::with_fault(fault);
        let vars: Vec<Var> = p.iter().map(|a| tape.leaf(a.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let grads = if with_grad { grad(&tape, loss, &vars)? } else { Vec::new() };
        Ok((tape.value(loss)[0], grads))
    };
    let (_, g) = eval(params, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..FD_DIRECTIONS {
        let dir: Vec<Vec<f64>> =
            params.iter().map(|a| a.iter().map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let shifted = |sign: f64| -> Vec<Vec<f64>> {
            params
                .iter()
                .zip(&dir)
                .map(|(a, d)| a.iter().zip(d).map(|(x, e)| x + sign * FD_STEP * e).collect())
                .collect()
        };
        let (lp, _) = eval(&shifted(1.0), false)?;
        let (lm, _) = eval(&shifted(-1.0), false)?;
        let fd = (lp - lm) / (2.0 * FD_STEP);
        let an: f64 = g.iter().zip(&dir).flat_map(|(a, d)| a.iter().zip(d).map(|(x, e)| x * e)).sum();
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(FD_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Builds a scalar loss from parameter leaves.
pub type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

fn primitive_cases() -> Vec<(&'static str, Vec<usize>, Build)> {
    vec![
        ("add", vec![4, 4], |t, p| {
            let s = t.add(p[0], p[1]);
            let q = t.mul(s, s);
            Ok(t.sum_elems(q))
        }),
        ("sub", vec![4, 4], |t, p| {
            let s = t.sub(p[0], p[1]);
            let q = t.mul(s, p[0]);
            Ok(t.sum_elems(q))
        }),
        ("scale", vec![3], |t, p| {
            let s = t.scale(p[0], -1.7);
            Ok(t.dot(s, p[0]))
        }),
        ("dense", vec![12, 4, 3], |t, p| {
            let y = t.affine(p[0], p[1], p[2]);
            let q = t.mul(y, y);
            Ok(t.sum_elems(q))
        }),
        ("silu", vec![5], |t, p| {
            let s = t.silu(p[0]);
            let q = t.mul(s, p[0]);
            Ok(t.sum_elems(q))
        }),
        ("concat_slice", vec![3, 2], |t, p| {
            let c = t.concat(&[p[0], p[1]]);
            let s = t.slice(c, 1, 3);
            let q = t.mul(s, s);
            Ok(t.sum_elems(q))
        }),
        ("norm", vec![4], |t, p| {
            let n = t.norm(p[0]);
            Ok(t.mul(n, n))
        }),
        ("scale_by", vec![1, 3], |t, p| {
            let v = t.scale_by(p[0], p[1]);
            Ok(t.dot(v, v))
        }),
        ("gate", vec![2, 6], |t, p| {
            let v = t.gate(p[0], p[1], 3);
            Ok(t.dot(v, p[1]))
        }),
        ("outer", vec![2, 3], |t, p| {
            let v = t.outer(p[0], p[1]);
            let q = t.mul(v, v);
            Ok(t.sum_elems(q))
        }),
        ("block_dots", vec![6, 6], |t, p| {
            let z = t.block_dots(p[0], p[1], 3, false);
            Ok(t.dot(z, z))
        }),
        ("block_dots_full", vec![6, 6], |t, p| {
            let z = t.block_dots(p[0], p[1], 2, true);
            Ok(t.dot(z, z))
        }),
        ("sum_mean", vec![3, 3, 3], |t, p| {
            let s = t.sum(p);
            let m = t.mean(&[s, p[0]]);
            Ok(t.dot(m, s))
        }),
        ("mse", vec![4, 4], |t, p| Ok(t.mse(p[0], p[1]))),
    ]
}

/// Runs [`grad_check`] on a small loss around every primitive, with inputs
/// drawn uniformly from `[-1, 1)`. Returns `(name, max relative error)`.
pub fn primitive_grad_checks(seed: u64, fault: Option<Fault>) -> Result<Vec<(&'static str, f64)>> {
    primitive_cases()
        .into_iter()
        .map(|(name, shapes, build)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params: Vec<Vec<f64>> =
                shapes.iter().map(|n| (0..*n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            Ok((name, grad_check(build, &params, seed, fault)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn square_and_dot() {
        let mut t = Tape::new();
        let x = t.leaf(vec![3.0]);
        let y = t.mul(x, x);
        assert_eq!(grad(&t, y, &[x]).unwrap(), vec![vec![6.0]]);

        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0, 3.0]);
        let b = t.leaf(vec![-4.0, 0.5, 2.0]);
        let d = t.dot(a, b);
        let g = grad(&t, d, &[a, b]).unwrap();
        assert_eq!(g[0], vec![-4.0, 0.5, 2.0]);
        assert_eq!(g[1], vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn non_scalar_loss_and_disconnected_param() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0]);
        let unused = t.leaf(vec![5.0; 3]);
        let s = t.scale(a, 2.0);
        assert!(matches!(grad(&t, s, &[a]), Err(Error::Tape(_))));
        let l = t.sum_elems(s);
        let g = grad(&t, l, &[a, unused]).unwrap();
        assert_eq!(g[0], vec![2.0, 2.0]);
        assert_eq!(g[1], vec![0.0; 3]);
    }

    #[test]
    fn affine_forward_values() {
        let mut t = Tape::new();
        let w = t.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t.leaf(vec![0.5, -0.5]);
        let x = t.leaf(vec![1.0, 0.0, -1.0]);
        let y = t.affine(w, b, x);
        assert_eq!(t.value(y), &[1.0 - 3.0 + 0.5, 4.0 - 6.0 - 0.5]);
    }

    #[test]
    fn every_primitive_passes_grad_check() {
        for seed in 0..20 {
            for (name, err) in primitive_grad_checks(seed, None).unwrap() {
                assert!(err < 1e-6, "{name} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn faults_are_detected() {
        let params = vec![vec![0.3, -1.2], vec![0.5, 1.0, -0.7, 2.0]];
        let gated: Build = |t, p| {
            let v = t.gate(p[0], p[1], 2);
            Ok(t.dot(v, v))
        };
        assert!(grad_check(gated, &params, 1, Some(Fault::GateBackward)).unwrap() > 1e-2);
        let act: Build = |t, p| {
            let s = t.silu(p[1]);
            Ok(t.sum_elems(s))
        };
        assert!(grad_check(act, &params, 1, Some(Fault::SiluBackward)).unwrap() > 1e-2);
    }

    #[test]
    fn linearity_of_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_vec(&mut rng, 3);
        let mut t = Tape::new();
        let x = t.leaf(a);
        let s1 = t.silu(x);
        let l1 = t.sum_elems(s1);
        let l2 = t.dot(x, x);
        let both = t.add(l1, l2);
        let g1 = grad(&t, l1, &[x]).unwrap();
        let g2 = grad(&t, l2, &[x]).unwrap();
        let g = grad(&t, both, &[x]).unwrap();
        for k in 0..3 {
            assert!((g[0][k] - (g1[0][k] + g2[0][k])).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let cfg = TrainConfig { lr: 0.05, ..TrainConfig::default() };
        let mut opt = Adam::new(&cfg, &[2]);
        let mut p = vec![vec![3.0, -2.0]];
        for _ in 0..2000 {
            let g = vec![p[0].iter().map(|x| 2.0 * (x - 1.0)).collect()];
            opt.step(&mut p, &g);
        }
        assert!(p[0].iter().all(|x| (x - 1.0).abs() < 1e-3), "{:?}", p);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let cfg = TrainConfig::default();
        let mut opt = Adam::new(&cfg, &[1]);
        let mut p = vec![vec![0.0]];
        opt.step(&mut p, &[vec![123.0]]);
        assert!((p[0][0] + cfg.lr).abs() < 1e-9);
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { beta1: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    }
}
