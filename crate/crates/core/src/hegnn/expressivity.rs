use nalgebra::{DMatrix, DVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::model::{forward, pool};
use super::{ModelConfig, ModelParams};
use crate::geomgraph::{is_symmetric_under, random_rotation_with, GeometricGraph, SYMMETRY_TOL};
use crate::specfun::{legendre_eval, sph_harm_raw, O3Element, MAX_DEGREE};
use crate::{Error, Result};

/// Relative pooled difference above which two inputs count as distinguished.
pub const DISCRIMINATION_CUT: f64 = 1e-3;
/// Norm of a spherical-harmonic sum below which it counts as vanished.
pub const SPH_SUM_CUT: f64 = 1e-3;
/// Largest multiset size accepted by [`recover_angles`].
pub const MAX_RECOVER: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct TrialOutcome {
    pub trial: usize,
    pub distinguishable: bool,
    /// Largest relative pooled difference over the requested degrees.
    pub score: f64,
    /// Largest pooled norm over the requested degrees, before rotation.
    pub pooled_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discrimination {
    pub verdict: bool,
    pub trials: Vec<TrialOutcome>,
}

impl Discrimination {
    pub fn successes(&self) -> usize {
        self.trials.iter().filter(|t| t.distinguishable).count()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Forward-only test of whether the model separates `structure` from a
/// rotated copy. Each trial draws fresh parameters and a random rotation that
/// does not map the structure onto itself, compares pooled steerable heads of
/// the active degrees, and the verdict is the majority over trials.
pub fn discriminates(structure: &GeometricGraph, cfg: &ModelConfig, trials: usize, seed: u64) -> Result<Discrimination> {
    cfg.validate()?;
    if trials == 0 {
        return Err(Error::Config("at least one trial is required".into()));
    }
    let degrees = cfg.active_degrees();
    if degrees.is_empty() {
        return Err(Error::Config("no steerable degree is active".into()));
    }
    let outcomes = (0..trials)
        .into_par_iter()
        .map(|trial| -> Result<TrialOutcome> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(trial as u64);
            let params = ModelParams::init(cfg, rand::Rng::random(&mut rng))?;
            let rot = loop {
                let r = random_rotation_with(&mut rng);
                if is_symmetric_under(structure, &O3Element::rotation(r), SYMMETRY_TOL).is_none() {
                    break r;
                }
            };
            let p0 = pool(&forward(structure, &params)?);
            let p1 = pool(&forward(&structure.rotated(&rot), &params)?);
            let mut score = 0.0f64;
            let mut pooled_norm = 0.0f64;
            for &l in &degrees {
                let n0 = norm(&p0.v[l]);
                let diff: Vec<f64> = p0.v[l].iter().zip(&p1.v[l]).map(|(a, b)| a - b).collect();
                score = score.max(norm(&diff) / (1.0 + n0));
                pooled_norm = pooled_norm.max(n0);
            }
            Ok(TrialOutcome { trial, distinguishable: score > DISCRIMINATION_CUT, score, pooled_norm })
        })
        .collect::<Result<Vec<_>>>()?;
    let wins = outcomes.iter().filter(|t| t.distinguishable).count();
    Ok(Discrimination { verdict: 2 * wins > trials, trials: outcomes })
}

/// Norm of `sum_i Y^(l)` of the node directions seen from the centroid, and
/// whether it exceeds [`SPH_SUM_CUT`].
pub fn sph_sum_check(structure: &GeometricGraph, l: usize) -> Result<(f64, bool)> {
    if l > MAX_DEGREE {
        return Err(Error::DegreeTooHigh(l));
    }
    let c = structure.centroid();
    let mut acc = vec![0.0; 2 * l + 1];
    for (i, x) in structure.coords().iter().enumerate() {
        let r = x - c;
        let n = r.norm();
        if n < 1e-12 {
            return Err(Error::Graph(format!("node {i} sits at the center")));
        }
        let y = sph_harm_raw(l, r.x / n, r.y / n, r.z / n).swap_remove(l);
        for (a, v) in acc.iter_mut().zip(y.values) {
            *a += v;
        }
    }
    let nrm = norm(&acc);
    Ok((nrm, nrm > SPH_SUM_CUT))
}

/// Cosines between every direction `x_i - x_s` (`s` a neighbor of `i`) and
/// every direction `x_j - x_t` (`t` a neighbor of `j`).
pub fn angle_multiset(g: &GeometricGraph, i: usize, j: usize) -> Vec<f64> {
    let dir = |a: usize, b: usize| -> Vector3<f64> { (g.coords()[a] - g.coords()[b]).normalize() };
    let mut out = Vec::new();
    for &s in g.neighbors(i) {
        for &t in g.neighbors(j) {
            out.push(dir(i, s).dot(&dir(j, t)));
        }
    }
    out
}

/// Converts inner products of neighbor-mean features into the neighbor-sum
/// convention that [`recover_angles`] expects.
pub fn z_mean_to_sum(z: &[f64], deg_i: usize, deg_j: usize) -> Vec<f64> {
    z.iter().map(|v| v * (deg_i * deg_j) as f64).collect()
}

/// Monomial coefficients of `P_0..P_m`; row `l` holds `P_l`.
fn legendre_coefficients(m: usize) -> Vec<Vec<f64>> {
    let mut c = vec![vec![0.0; m + 1]; m + 1];
    c[0][0] = 1.0;
    if m >= 1 {
        c[1][1] = 1.0;
    }
    for l in 1..m {
        let lf = l as f64;
        for k in 0..=m {
            let shifted = if k >= 1 { c[l][k - 1] } else { 0.0 };
            c[l + 1][k] = ((2.0 * lf + 1.0) * shifted - lf * c[l - 1][k]) / (lf + 1.0);
        }
    }
    c
}

fn poly_eval(coef: &[f64], t: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, c| acc * t + c)
}

fn poly_derivative(coef: &[f64]) -> Vec<f64> {
    coef.iter().enumerate().skip(1).map(|(k, c)| k as f64 * c).collect()
}

/// Recovers the multiset of `M = z.len()` cosines `t_n` from
/// `z[l - 1] = (2l + 1) sum_n P_l(t_n)` for `l = 1..=M`.
///
/// Legendre sums become power sums by inverting the triangular
/// monomial-to-Legendre map, Newton's identities give the elementary
/// symmetric polynomials, and the cosines are the roots of the resulting
/// monic polynomial. Clustered roots are treated as one multiple root and
/// refined on the matching derivative, with the cluster width chosen by how
/// well the result reproduces `z`.
pub fn recover_angles(z: &[f64]) -> Result<Vec<f64>> {
    let m = z.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    if m > MAX_RECOVER {
        return Err(Error::Conditioning(format!(
            "recovering {m} angles is ill-conditioned; at most {MAX_RECOVER} are supported"
        )));
    }
    let leg = legendre_coefficients(m);
    let q: Vec<f64> = std::iter::once(m as f64)
        .chain(z.iter().enumerate().map(|(k, v)| v / (2.0 * (k + 1) as f64 + 1.0)))
        .collect();
    let mut p = vec![0.0; m + 1];
    p[0] = m as f64;
    for l in 1..=m {
        let known: f64 = (0..l).map(|k| leg[l][k] * p[k]).sum();
        p[l] = (q[l] - known) / leg[l][l];
    }
    let mut e = vec![0.0; m + 1];
    e[0] = 1.0;
    for k in 1..=m {
        let mut s = 0.0;
        for i in 1..=k {
            let sign = if i % 2 == 1 { 1.0 } else { -1.0 };
            s += sign * e[k - i] * p[i];
        }
        e[k] = s / k as f64;
    }
    // monic polynomial t^M - e1 t^{M-1} + e2 t^{M-2} - ..., ascending coefficients
    let mut coef = vec![0.0; m + 1];
    for k in 0..=m {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        coef[m - k] = sign * e[k];
    }
    let mut companion = DMatrix::<f64>::zeros(m, m);
    for r in 1..m {
        companion[(r, r - 1)] = 1.0;
    }
    for r in 0..m {
        companion[(r, m - 1)] = -coef[r];
    }
    let mut eig: Vec<f64> = companion.complex_eigenvalues().iter().map(|c| c.re).collect();
    eig.sort_by(f64::total_cmp);
    // Coarse gaps snap exact multiple roots, fine gaps keep close distinct
    // roots apart. Each clustering is also tried with one cluster split into
    // consecutive runs, which catches a repeated root lying next to another
    // root. The fewest distinct values that reproduce z about as well as the
    // best candidate win.
    let mut candidates: Vec<Vec<(f64, usize)>> = Vec::new();
    for gap in CLUSTER_GAPS {
        let clusters = cluster(&eig, gap);
        candidates.push(polish(refine_clusters(&coef, &clusters), z));
        for (i, c) in clusters.iter().enumerate() {
            for runs in split_runs(c) {
                let mut roots: Vec<(f64, usize)> = Vec::new();
                for (j, other) in clusters.iter().enumerate() {
                    if j == i {
                        roots.extend(runs.iter().map(|r| (r.iter().sum::<f64>() / r.len() as f64, r.len())));
                    } else {
                        roots.push((other.iter().sum::<f64>() / other.len() as f64, other.len()));
                    }
                }
                candidates.push(polish(roots, z));
            }
        }
    }
    let expanded: Vec<Vec<f64>> = candidates
        .iter()
        .map(|roots| roots.iter().flat_map(|(t, k)| std::iter::repeat_n(*t, *k)).collect())
        .collect();
    let residuals: Vec<f64> = expanded.iter().map(|t| legendre_residual(t, z)).collect();
    let best = residuals.iter().copied().fold(f64::INFINITY, f64::min);
    let cut = (10.0 * best).max(RESIDUAL_FLOOR);
    let pick = (0..candidates.len())
        .filter(|i| residuals[*i] <= cut)
        .min_by(|a, b| candidates[*a].len().cmp(&candidates[*b].len()).then(residuals[*a].total_cmp(&residuals[*b])))
        .expect("the best candidate passes the cut");
    Ok(expanded.into_iter().nth(pick).expect("index in range"))
}

const CLUSTER_GAPS: [f64; 12] = [3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4, 3e-5, 1e-5, 3e-6, 1e-6, 1e-7, 0.0];
const RESIDUAL_FLOOR: f64 = 1e-11;

fn legendre_residual(t: &[f64], z: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for (k, zl) in z.iter().enumerate() {
        let l = k + 1;
        let sum: f64 = t.iter().map(|x| legendre_eval(l, *x).unwrap_or(f64::INFINITY)).sum();
        worst = worst.max(((2 * l + 1) as f64 * sum - zl).abs());
    }
    worst
}

/// Groups sorted root estimates closer than `gap`.
fn cluster(eig: &[f64], gap: f64) -> Vec<Vec<f64>> {
    let mut clusters: Vec<Vec<f64>> = Vec::new();
    for &r in eig {
        match clusters.last_mut() {
            Some(c) if (r - c.last().expect("non-empty")).abs() < gap => c.push(r),
            _ => clusters.push(vec![r]),
        }
    }
    clusters
}

/// Every way to cut a sorted cluster into two or more consecutive runs.
fn split_runs(c: &[f64]) -> Vec<Vec<&[f64]>> {
    let cuts = c.len().saturating_sub(1);
    (1..1usize << cuts)
        .map(|mask| {
            let mut runs = Vec::new();
            let mut start = 0;
            for i in 0..cuts {
                if mask & (1 << i) != 0 {
                    runs.push(&c[start..=i]);
                    start = i + 1;
                }
            }
            runs.push(&c[start..]);
            runs
        })
        .collect()
}

/// Refines each cluster of size `k` as a root of the `(k - 1)`th derivative.
fn refine_clusters(coef: &[f64], clusters: &[Vec<f64>]) -> Vec<(f64, usize)> {
    let mut out = Vec::with_capacity(clusters.len());
    for c in clusters {
        let k = c.len();
        let mut deriv = coef.to_vec();
        for _ in 1..k {
            deriv = poly_derivative(&deriv);
        }
        let slope = poly_derivative(&deriv);
        let mut t = c.iter().sum::<f64>() / k as f64;
        for _ in 0..50 {
            let d = poly_eval(&slope, t);
            if d == 0.0 {
                break;
            }
            let step = poly_eval(&deriv, t) / d;
            if !step.is_finite() || step.abs() > 1e-2 {
                break;
            }
            t -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        out.push((t.clamp(-1.0, 1.0), k));
    }
    out
}

/// `P_1..P_m` and their derivatives at `x`.
fn legendre_with_derivatives(m: usize, x: f64) -> (Vec<f64>, Vec<f64>) {
    let mut p = vec![1.0, x];
    let mut d = vec![0.0, 1.0];
    for l in 1..m {
        let lf = l as f64;
        p.push(((2.0 * lf + 1.0) * x * p[l] - lf * p[l - 1]) / (lf + 1.0));
        d.push(d[l - 1] + (2.0 * lf + 1.0) * p[l]);
    }
    (p[1..=m].to_vec(), d[1..=m].to_vec())
}

/// Gauss-Newton on the Legendre sums with the multiplicities held fixed.
/// The coefficient-space refinement loses accuracy next to clusters; the
/// sums themselves stay well conditioned.
fn polish(mut roots: Vec<(f64, usize)>, z: &[f64]) -> Vec<(f64, usize)> {
    let m = z.len();
    let residual = |roots: &[(f64, usize)]| -> DVector<f64> {
        let mut r = DVector::from_iterator(m, z.iter().map(|v| -v));
        for (t, k) in roots {
            let (p, _) = legendre_with_derivatives(m, *t);
            for l in 0..m {
                r[l] += (2 * l + 3) as f64 * *k as f64 * p[l];
            }
        }
        r
    };
    let mut r = residual(&roots);
    for _ in 0..20 {
        let mut jac = DMatrix::<f64>::zeros(m, roots.len());
        for (j, (t, k)) in roots.iter().enumerate() {
            let (_, d) = legendre_with_derivatives(m, *t);
            for l in 0..m {
                jac[(l, j)] = (2 * l + 3) as f64 * *k as f64 * d[l];
            }
        }
        let Ok(step) = jac.svd(true, true).solve(&r, 1e-14) else { break };
        let trial: Vec<(f64, usize)> =
            roots.iter().zip(step.iter()).map(|((t, k), s)| ((t - s).clamp(-1.0, 1.0), *k)).collect();
        let rt = residual(&trial);
        if !(rt.amax() < r.amax()) {
            break;
        }
        roots = trial;
        r = rt;
    }
    roots
}
