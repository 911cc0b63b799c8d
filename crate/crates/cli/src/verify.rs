//! Self-check suite spanning every core module, with per-check tolerances
//! and two injectable faults used as negative controls.

use hegnn_core::autodiff::{primitive_grad_checks, Fault};
use hegnn_core::geomgraph::{
    detect_symmetry, make_kfold, make_polyhedron, nbody_simulate, random_rotation_with, Edge, GeometricGraph,
    NBodyConfig, Polyhedron, SYMMETRY_TOL,
};
use hegnn_core::groups::{brute_force_trace, enumerate_group, group_average, trace_closed_form};
use hegnn_core::hegnn::{
    angle_multiset, forward, init_features, message, message_grad_check, model_grad_check, recover_angles,
    z_mean_to_sum, ModelConfig, ModelParams, SteerableState,
};
use hegnn_core::specfun::{legendre_eval, o3_rep, sph_harm, wigner_d, O3Element, Parity, UnitVec3};
use nalgebra::{DVector, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::CliResult;
use crate::parse::parse_groups;
use crate::table::{flag, num, Table};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Hooks {
    /// Flips the sign of every improper representation matrix the suite
    /// compares against.
    pub wrong_parity_sign: bool,
    /// Drops the gate-input gradient in every backward pass.
    pub broken_gate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tolerances {
    pub harmonic: f64,
    pub projector: f64,
    pub trace: f64,
    pub equivariance: f64,
    pub identity: f64,
    pub recover: f64,
    pub grad: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { harmonic: 1e-9, projector: 1e-9, trace: 1e-6, equivariance: 1e-8, identity: 1e-9, recover: 1e-6, grad: 1e-5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random cases for the equivariance, identity and round-trip checks.
    pub cases: usize,
    /// Seeds for the gradient checks.
    pub grad_seeds: usize,
    pub hooks: Hooks,
    pub tolerances: Tolerances,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { seed: 0, cases: 50, grad_seeds: 10, hooks: Hooks::default(), tolerances: Tolerances::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub cases: usize,
    /// Worst error over the cases.
    pub measured: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.measured.is_finite() && self.measured <= self.tolerance
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn rep(l: usize, g: &O3Element, hooks: Hooks) -> CliResult<nalgebra::DMatrix<f64>> {
    let m = o3_rep(l, g)?.matrix;
    Ok(if hooks.wrong_parity_sign && g.parity == Parity::Odd { -m } else { m })
}

fn random_unit<R: Rng>(rng: &mut R) -> UnitVec3 {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if let Ok(u) = UnitVec3::from_direction(&v) {
            if v.norm() > 0.1 {
                return u;
            }
        }
    }
}

fn random_element<R: Rng>(rng: &mut R) -> O3Element {
    let parity = if rng.random_bool(0.5) { Parity::Odd } else { Parity::Even };
    O3Element::new(random_rotation_with(rng), parity)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// Random graph with a ring plus random chords, two node scalars, one edge
/// scalar and optional velocities.
fn random_graph<R: Rng>(rng: &mut R, velocities: bool) -> CliResult<GeometricGraph> {
    let n = rng.random_range(3..=7);
    let coords: Vec<Vector3<f64>> = (0..n)
        .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    let scalars: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(0.0..1.0)]).collect();
    let vel = velocities.then(|| {
        (0..n).map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect()
    });
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let ring = j == (i + 1) % n || i == (j + 1) % n;
            if i != j && (ring || rng.random_bool(0.5)) {
                edges.push(Edge { src: i, dst: j, scalars: vec![rng.random_range(-1.0..1.0)] });
            }
        }
    }
    Ok(GeometricGraph::new(scalars, coords, vel, edges)?)
}

fn random_model<R: Rng>(rng: &mut R, velocities: bool) -> CliResult<ModelParams> {
    let cfg = ModelConfig {
        layer_count: rng.random_range(1..=2),
        use_velocity: velocities,
        center_anchor: rng.random_bool(0.5),
        full_gram: rng.random_bool(0.3),
        ..ModelConfig::new(rng.random_range(1..=4), 2, 1).with_width(8)
    };
    Ok(ModelParams::init(&cfg, rng.random())?)
}

/// `Y(R u) = D(R) Y(u)` for random rotations and directions.
fn harmonic_rotation(o: &VerifyOptions) -> CliResult<CheckResult> {
    let mut rng = stream(o.seed, 1);
    let mut worst = 0.0f64;
    for _ in 0..o.cases {
        let r = random_rotation_with(&mut rng);
        let u = random_unit(&mut rng);
        let ru = UnitVec3::from_direction(&r.apply(&u.to_vector()))?;
        for l in 0..=12 {
            let want = wigner_d(l, &r)?.apply(&sph_harm(l, u)?);
            worst = worst.max(max_abs_diff(&sph_harm(l, ru)?.values, &want.values));
        }
    }
    Ok(CheckResult { name: "specfun.harmonic_rotation", cases: o.cases, measured: worst, tolerance: o.tolerances.harmonic })
}

/// `Y(g u)` against the parity representation for improper `g`.
fn harmonic_parity(o: &VerifyOptions) -> CliResult<CheckResult> {
    let mut rng = stream(o.seed, 2);
    let mut worst = 0.0f64;
    for _ in 0..o.cases {
        let g = O3Element::new(random_rotation_with(&mut rng), Parity::Odd);
        let u = random_unit(&mut rng);
        let gu = UnitVec3::from_direction(&g.apply(&u.to_vector()))?;
        for l in 0..=12 {
            let want = rep(l, &g, o.hooks)? * DVector::from_vec(sph_harm(l, u)?.values);
            worst = worst.max(max_abs_diff(&sph_harm(l, gu)?.values, want.as_slice()));
        }
    }
    Ok(CheckResult { name: "specfun.parity", cases: o.cases, measured: worst, tolerance: o.tolerances.harmonic })
}

/// Group averages are symmetric idempotents whose trace is the closed form.
fn projector_laws(o: &VerifyOptions) -> CliResult<CheckResult> {
    let tags = parse_groups("Ci,C3,D4,T,O,I,OxCi")?;
    let worst = tags
        .par_iter()
        .map(|tag| -> CliResult<f64> {
            let group = enumerate_group(*tag)?;
            let mut worst = 0.0f64;
            for l in 0..=8 {
                let p = group_average(l, &group)?.matrix;
                worst = worst.max((&p * &p - &p).amax());
                worst = worst.max((&p - p.transpose()).amax());
                worst = worst.max((p.trace() - trace_closed_form(l, *tag)? as f64).abs());
            }
            Ok(worst)
        })
        .collect::<CliResult<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(CheckResult { name: "groups.projector_laws", cases: tags.len() * 9, measured: worst, tolerance: o.tolerances.projector })
}

fn closed_vs_brute(o: &VerifyOptions) -> CliResult<CheckResult> {
    let tags = parse_groups("Ci,C2..6,D2..6,T,O,I")?;
    let worst = tags
        .par_iter()
        .map(|tag| -> CliResult<f64> {
            let group = enumerate_group(*tag)?;
            (0..=30).try_fold(0.0f64, |w, l| {
                Ok(w.max((brute_force_trace(l, &group)? - trace_closed_form(l, *tag)? as f64).abs()))
            })
        })
        .collect::<CliResult<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(CheckResult { name: "groups.closed_form_traces", cases: tags.len() * 31, measured: worst, tolerance: o.tolerances.trace })
}

/// Number of symmetric structures whose detected symmetry count is off.
fn symmetry_counts(_: &VerifyOptions) -> CliResult<CheckResult> {
    let cases = [
        (make_polyhedron(Polyhedron::Tetrahedron), 24),
        (make_polyhedron(Polyhedron::Cube), 48),
        (make_polyhedron(Polyhedron::Octahedron), 48),
        (make_polyhedron(Polyhedron::Dodecahedron), 120),
        (make_polyhedron(Polyhedron::Icosahedron), 120),
        (make_kfold(5)?, 20),
        (make_kfold(6)?, 24),
    ];
    let mut wrong = 0;
    for (g, want) in &cases {
        wrong += usize::from(detect_symmetry(g, SYMMETRY_TOL)?.len() != *want);
    }
    Ok(CheckResult { name: "geomgraph.symmetry_counts", cases: cases.len(), measured: wrong as f64, tolerance: 0.0 })
}

/// Worst scaled gap between two states.
fn state_gap(a: &SteerableState, b: &SteerableState) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..a.len() {
        worst = worst.max(max_abs_diff(&a.h[i], &b.h[i]) / (1.0 + max_abs(&b.h[i])));
        worst = worst.max((a.x[i] - b.x[i]).amax() / (1.0 + b.x[i].amax()));
        for l in 1..a.v.len() {
            worst = worst.max(max_abs_diff(&a.v[l][i], &b.v[l][i]) / (1.0 + max_abs(&b.v[l][i])));
        }
    }
    worst
}

/// Applies `g` to a state using the suite's own representation matrices.
fn transform_state(s: &SteerableState, g: &O3Element, hooks: Hooks) -> CliResult<SteerableState> {
    let mut out = s.transformed(&O3Element::identity());
    let m = g.matrix();
    out.x = s.x.iter().map(|p| m * p).collect();
    for l in 1..s.v.len() {
        let r = rep(l, g, hooks)?;
        let d = 2 * l + 1;
        for block in &mut out.v[l] {
            let moved: Vec<f64> =
                block.chunks(d).flat_map(|c| (&r * DVector::from_column_slice(c)).iter().copied().collect::<Vec<_>>()).collect();
            *block = moved;
        }
    }
    Ok(out)
}

/// Invariant `h`, equivariant `x` and per-degree `v` under random O(3)
/// elements, including inversion.
pub fn model_equivariance(o: &VerifyOptions) -> CliResult<CheckResult> {
    let worst = (0..o.cases)
        .into_par_iter()
        .map(|case| -> CliResult<f64> {
            let mut rng = stream(o.seed, 1000 + case as u64);
            let vel = rng.random_bool(0.5);
            let g = random_graph(&mut rng, vel)?;
            let p = random_model(&mut rng, vel)?;
            let e = random_element(&mut rng);
            let base = forward(&g, &p)?;
            let moved = forward(&g.transformed(&e), &p)?;
            Ok(state_gap(&moved, &transform_state(&base, &e, o.hooks)?))
        })
        .collect::<CliResult<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(CheckResult { name: "hegnn.o3_equivariance", cases: o.cases, measured: worst, tolerance: o.tolerances.equivariance })
}

/// Translations shift `x` and leave everything else unchanged; node
/// relabelings permute every output.
pub fn model_translation_permutation(o: &VerifyOptions) -> CliResult<CheckResult> {
    let worst = (0..o.cases)
        .into_par_iter()
        .map(|case| -> CliResult<f64> {
            let mut rng = stream(o.seed, 5000 + case as u64);
            let vel = rng.random_bool(0.5);
            let g = random_graph(&mut rng, vel)?;
            let p = random_model(&mut rng, vel)?;
            let base = forward(&g, &p)?;
            let t = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let mut shifted = forward(&g.translated(&t), &p)?;
            for x in &mut shifted.x {
                *x -= t;
            }
            let mut perm: Vec<usize> = (0..g.len()).collect();
            perm.shuffle(&mut rng);
            let permuted = forward(&g.permuted(&perm)?, &p)?;
            let mut back = permuted.clone();
            for (i, &pi) in perm.iter().enumerate() {
                back.h[i] = permuted.h[pi].clone();
                back.x[i] = permuted.x[pi];
                for l in 1..back.v.len() {
                    back.v[l][i] = permuted.v[l][pi].clone();
                }
            }
            Ok(state_gap(&shifted, &base).max(state_gap(&back, &base)))
        })
        .collect::<CliResult<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(CheckResult {
        name: "hegnn.translation_permutation",
        cases: o.cases,
        measured: worst,
        tolerance: o.tolerances.equivariance,
    })
}

/// Worst scaled gap between the first-layer inner products, rescaled to
/// neighbor sums, and `(2l + 1)` times the Legendre double sum over the
/// edge-direction cosines, on `cases` random graphs.
pub fn legendre_identity_gap(seed: u64, cases: usize) -> CliResult<f64> {
    let lmax = 6;
    let out = (0..cases)
        .into_par_iter()
        .map(|case| -> CliResult<f64> {
            let mut rng = stream(seed, 9000 + case as u64);
            let g = random_graph(&mut rng, false)?;
            let cfg = ModelConfig { layer_count: 1, ..ModelConfig::new(lmax, 2, 1).with_width(8) };
            let mut p = ModelParams::init(&cfg, rng.random())?;
            p.set_unit_init_gates();
            let st = init_features(&g, &p)?;
            let mut worst = 0.0f64;
            for e in g.edges() {
                let (i, j) = (e.src, e.dst);
                let z = message(&g, &st, i, j, &p, 0)?.z;
                let cosines = angle_multiset(&g, i, j);
                for l in 1..=lmax {
                    let want = (2 * l + 1) as f64
                        * cosines.iter().map(|t| legendre_eval(l, t.clamp(-1.0, 1.0))).sum::<hegnn_core::Result<f64>>()?;
                    let got = z_mean_to_sum(&z[l], g.neighbors(i).len(), g.neighbors(j).len());
                    for v in got {
                        worst = worst.max((v - want).abs() / (1.0 + want.abs()));
                    }
                }
            }
            Ok(worst)
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(out.into_iter().fold(0.0, f64::max))
}

fn legendre_identity(o: &VerifyOptions) -> CliResult<CheckResult> {
    Ok(CheckResult {
        name: "hegnn.legendre_identity",
        cases: o.cases,
        measured: legendre_identity_gap(o.seed, o.cases)?,
        tolerance: o.tolerances.identity,
    })
}

/// Worst sorted gap after recovering random cosine multisets of size
/// `1..=max_size` from their Legendre sums. A third of the draws repeat a
/// value.
pub fn recover_round_trip_gap(seed: u64, cases: usize, max_size: usize) -> CliResult<f64> {
    let mut rng = stream(seed, 3);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let m = rng.random_range(1..=max_size);
        let mut t: Vec<f64> = Vec::with_capacity(m);
        while t.len() < m {
            if !t.is_empty() && rng.random_bool(1.0 / 3.0) {
                let k = rng.random_range(0..t.len());
                t.push(t[k]);
            } else {
                t.push(rng.random_range(-1.0..1.0));
            }
        }
        let z: Vec<f64> = (1..=m)
            .map(|l| Ok((2 * l + 1) as f64 * t.iter().map(|x| legendre_eval(l, *x)).sum::<hegnn_core::Result<f64>>()?))
            .collect::<CliResult<_>>()?;
        let mut got = recover_angles(&z)?;
        got.sort_by(f64::total_cmp);
        t.sort_by(f64::total_cmp);
        worst = worst.max(max_abs_diff(&got, &t));
    }
    Ok(worst)
}

fn recover_round_trip(o: &VerifyOptions) -> CliResult<CheckResult> {
    Ok(CheckResult {
        name: "hegnn.recover_angles",
        cases: o.cases,
        measured: recover_round_trip_gap(o.seed, o.cases, 6)?,
        tolerance: o.tolerances.recover,
    })
}

fn fault(hooks: Hooks) -> Option<Fault> {
    hooks.broken_gate.then_some(Fault::GateBackward)
}

fn primitive_gradients(o: &VerifyOptions) -> CliResult<CheckResult> {
    let worst = (0..o.grad_seeds as u64)
        .into_par_iter()
        .map(|s| -> CliResult<f64> {
            Ok(primitive_grad_checks(o.seed.wrapping_add(s), fault(o.hooks))?.into_iter().map(|(_, e)| e).fold(0.0, f64::max))
        })
        .collect::<CliResult<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(CheckResult { name: "autodiff.primitive_gradients", cases: o.grad_seeds, measured: worst, tolerance: o.tolerances.grad })
}

/// The 2-layer velocity model used by the gradient checks.
pub fn grad_check_config() -> ModelConfig {
    ModelConfig { use_velocity: true, ..ModelConfig::new(2, 2, 1).with_width(8) }
}

/// Worst relative error of the full-model and first-message gradient
/// checks over `seeds` parameter draws and samples.
pub fn model_gradient_error(seed: u64, seeds: usize, fault: Option<Fault>) -> CliResult<f64> {
    let data_cfg = NBodyConfig { samples: seeds, steps: 100, dt: 0.002, ..NBodyConfig::default() };
    let data = nbody_simulate(&data_cfg, seed)?;
    let out = data
        .par_iter()
        .enumerate()
        .map(|(s, sample)| -> CliResult<f64> {
            let p = ModelParams::init(&grad_check_config(), seed.wrapping_add(s as u64))?;
            let full = model_grad_check(&p, sample, s as u64, fault)?;
            let g = sample.to_graph()?;
            let msg = message_grad_check(&g, &p, 0, 1, s as u64, fault)?;
            Ok(full.max(msg))
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(out.into_iter().fold(0.0, f64::max))
}

fn model_gradients(o: &VerifyOptions) -> CliResult<CheckResult> {
    Ok(CheckResult {
        name: "hegnn.model_gradients",
        cases: o.grad_seeds,
        measured: model_gradient_error(o.seed, o.grad_seeds, fault(o.hooks))?,
        tolerance: o.tolerances.grad,
    })
}

type Check = fn(&VerifyOptions) -> CliResult<CheckResult>;

const CHECKS: [Check; 11] = [
    harmonic_rotation,
    harmonic_parity,
    projector_laws,
    closed_vs_brute,
    symmetry_counts,
    model_equivariance,
    model_translation_permutation,
    legendre_identity,
    recover_round_trip,
    primitive_gradients,
    model_gradients,
];

/// Runs every check in a fixed order.
pub fn run_checks(o: &VerifyOptions) -> CliResult<Vec<CheckResult>> {
    CHECKS.iter().map(|c| c(o)).collect()
}

pub fn report(results: &[CheckResult], o: &VerifyOptions) -> Table {
    let mut t = Table::new(&["check", "cases", "measured", "tolerance", "passed"]);
    t.seed = Some(o.seed);
    for r in results {
        t.push(vec![r.name.into(), r.cases.to_string(), num(r.measured), num(r.tolerance), flag(r.passed())]);
    }
    let tol = &o.tolerances;
    t.tolerances = vec![
        ("harmonic".into(), tol.harmonic),
        ("projector".into(), tol.projector),
        ("trace".into(), tol.trace),
        ("equivariance".into(), tol.equivariance),
        ("identity".into(), tol.identity),
        ("recover".into(), tol.recover),
        ("grad".into(), tol.grad),
    ];
    t
}
