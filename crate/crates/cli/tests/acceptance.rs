//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs without the libtest harness so the lines always
//! show up in `cargo test` output.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use hegnn_cli::commands::{expressivity, perturbation, traces, ForwardSettings, Mode};
use hegnn_cli::nbody::{self, ArchSettings};
use hegnn_cli::parse::{parse_groups, parse_structures, Structure};
use hegnn_cli::table::Table;
use hegnn_cli::verify::{
    legendre_identity_gap, model_equivariance, model_gradient_error, model_translation_permutation,
    recover_round_trip_gap, VerifyOptions,
};
use hegnn_core::autodiff::{primitive_grad_checks, TrainConfig};
use hegnn_core::geomgraph::{random_rotation, NBodyConfig, NBodySample, Polyhedron};
use hegnn_core::groups::{degenerate_degrees, GroupTag, RotationGroup};
use hegnn_core::hegnn::{evaluate_mse, linear_baseline_mse, train, ModelParams};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn col<'a>(t: &'a Table, r: usize, name: &str) -> &'a str {
    t.get(r, name).expect("column exists")
}

/// Trace oracle written from the published table: `C_i`, `C_n`, `D_n`
/// formulas and the repeat strings of `T`, `O`, `I`.
fn published_trace(tag: GroupTag, l: usize) -> i64 {
    let even = i64::from(l % 2 == 0);
    let repeat = |r: usize, b: &str| (l / r) as i64 + i64::from(b.as_bytes()[l % r] == b'1');
    match tag {
        GroupTag::Ci => (2 * l as i64 + 1) * even,
        GroupTag::Proper(RotationGroup::Cyclic(n)) => 2 * (l / n) as i64 + 1,
        GroupTag::Proper(RotationGroup::Dihedral(n)) => (l / n) as i64 + even,
        GroupTag::Proper(RotationGroup::Tetrahedral) => repeat(6, "100110"),
        GroupTag::Proper(RotationGroup::Octahedral) => repeat(12, "100010101110"),
        GroupTag::Proper(RotationGroup::Icosahedral) => repeat(30, "100000100010100110101110111110"),
        GroupTag::WithInversion(_) => unreachable!("not in the table"),
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let groups = parse_groups("Ci,C2..21,D2..21,T,O,I").unwrap();
    let (t, disagreements) = traces(&groups, 30).unwrap();
    let elapsed = start.elapsed();
    let mut mismatches = 0;
    let mut worst_gap = 0.0f64;
    for r in 0..t.rows.len() {
        let tag: GroupTag = col(&t, r, "group").parse().unwrap();
        let l: usize = col(&t, r, "l").parse().unwrap();
        let closed: i64 = col(&t, r, "closed_form").parse().unwrap();
        let brute: f64 = col(&t, r, "brute_force").parse().unwrap();
        mismatches += usize::from(closed != published_trace(tag, l));
        worst_gap = worst_gap.max((brute - closed as f64).abs());
    }
    let rows = t.rows.len();
    outcome(
        mismatches == 0 && disagreements == 0 && worst_gap < 1e-6 && rows == 44 * 31 && within(elapsed, 30.0),
        format!("{rows} rows, {mismatches} closed-form mismatches, brute gap {worst_gap:.1e}, {elapsed:.2?}"),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let odd: BTreeSet<usize> = (1..=14).filter(|l| l % 2 == 1).collect();
    let mut expected: Vec<(Structure, BTreeSet<usize>)> = Vec::new();
    for k in 1..=10 {
        expected.push((Structure::KFold(2 * k), odd.clone()));
        expected.push((Structure::KFold(2 * k + 1), odd.iter().copied().filter(|l| *l < 2 * k + 1).collect()));
    }
    expected.push((Structure::Poly(Polyhedron::Tetrahedron), [1, 2, 5].into()));
    for p in [Polyhedron::Cube, Polyhedron::Octahedron] {
        expected.push((Structure::Poly(p), odd.iter().copied().chain([2]).collect()));
    }
    for p in [Polyhedron::Dodecahedron, Polyhedron::Icosahedron] {
        expected.push((Structure::Poly(p), odd.iter().copied().chain([2, 4, 8, 14]).collect()));
    }
    let wrong: Vec<String> = expected
        .iter()
        .filter(|(s, want)| degenerate_degrees(&s.symmetry_groups(), 14).unwrap().difference(&[0].into()).copied().collect::<BTreeSet<_>>() != *want)
        .map(|(s, _)| s.to_string())
        .collect();
    let elapsed = start.elapsed();
    outcome(
        wrong.is_empty() && within(elapsed, 10.0),
        format!("{} rows, wrong: {wrong:?}, {elapsed:.2?}", expected.len()),
    )
}

/// Published True/False cells for L = 1..30; columns tetrahedron, cube,
/// octahedron, dodecahedron, icosahedron.
const SPH_SUM_TABLE: [&str; 30] = [
    "FFFFF", "FFFFF", "TFFFF", "TTTFF", "FFFFF", "TTTTT", "TFFFF", "TTTFF", "TFFFF", "TTTTT", "TFFFF", "TTTTT",
    "TFFFF", "TTTFF", "TFFFF", "TTTTT", "TFFFF", "TTTTT", "TFFFF", "TTTTT", "TFFFF", "TTTTT", "TFFFF", "TTTTT",
    "TFFFF", "TTTTT", "TFFFF", "TTTTT", "TFFFF", "TTTTT",
];

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let structures: Vec<Structure> = Polyhedron::ALL.iter().map(|p| Structure::Poly(*p)).collect();
    let degrees: Vec<usize> = (1..=30).collect();
    let t = expressivity(&structures, &degrees, Mode::SphSum, &ForwardSettings::default()).unwrap();
    let elapsed = start.elapsed();
    let mut wrong = 0;
    let mut gap_violations = 0;
    for r in 0..t.rows.len() {
        let st: Structure = col(&t, r, "structure").parse().unwrap();
        let l: usize = col(&t, r, "degree").parse().unwrap();
        let Structure::Poly(p) = st else { unreachable!() };
        let c = Polyhedron::ALL.iter().position(|q| *q == p).unwrap();
        let want = SPH_SUM_TABLE[l - 1].as_bytes()[c] == b'T';
        let got = col(&t, r, "nonzero") == "true";
        let norm: f64 = col(&t, r, "norm").parse().unwrap();
        wrong += usize::from(want != got);
        gap_violations += usize::from(if want { norm <= 1.0 } else { norm >= 1e-3 });
    }
    let cells = t.rows.len();
    outcome(
        cells == 150 && wrong == 0 && gap_violations == 0 && within(elapsed, 20.0),
        format!("{cells} cells, {wrong} wrong, {gap_violations} outside the norm gap, {elapsed:.2?}"),
    )
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let structures = parse_structures("polyhedra,kfold:2,kfold:3,kfold:5,kfold:10").unwrap();
    let degrees: Vec<usize> = (1..=11).collect();
    let mut cells = 0;
    let mut inconsistent = Vec::new();
    for cumulative in [false, true] {
        let s = ForwardSettings { cumulative, ..ForwardSettings::default() };
        let t = expressivity(&structures, &degrees, Mode::Forward, &s).unwrap();
        for r in 0..t.rows.len() {
            cells += 1;
            let wins: usize = col(&t, r, "successes").parse().unwrap();
            let trials: usize = col(&t, r, "trials").parse().unwrap();
            let verdict = col(&t, r, "distinguishable") == "true";
            let st: Structure = col(&t, r, "structure").parse().unwrap();
            let l: usize = col(&t, r, "degree").parse().unwrap();
            // the prediction is recomputed here rather than read from the table
            let degenerate = degenerate_degrees(&st.symmetry_groups(), l).unwrap();
            let predicted = if cumulative { (1..=l).any(|k| !degenerate.contains(&k)) } else { !degenerate.contains(&l) };
            let ok = if predicted { 5 * wins >= 4 * trials } else { !verdict };
            if !ok {
                inconsistent.push(format!("{st}/l={l}/{}", if cumulative { "cum" } else { "single" }));
            }
        }
    }
    outcome(
        cells == 2 * 9 * 11 && inconsistent.is_empty(),
        format!("{cells} cells, inconsistent: {inconsistent:?}, {:.2?}", start.elapsed()),
    )
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let o = VerifyOptions { seed: 5, cases: 200, ..VerifyOptions::default() };
    let eq = model_equivariance(&o).unwrap();
    let tp = model_translation_permutation(&o).unwrap();
    let elapsed = start.elapsed();
    outcome(
        eq.measured < 1e-8 && tp.measured < 1e-8 && within(elapsed, 60.0),
        format!(
            "200 O(3) cases worst {:.1e}, translation/permutation worst {:.1e}, {elapsed:.2?}",
            eq.measured, tp.measured
        ),
    )
}

fn criterion_6() -> Outcome {
    let identity = legendre_identity_gap(6, 50).unwrap();
    let round_trip = recover_round_trip_gap(6, 200, 6).unwrap();
    outcome(
        identity < 1e-9 && round_trip < 1e-6,
        format!("identity worst {identity:.1e} on 50 graphs, recovery worst {round_trip:.1e} on 200 multisets"),
    )
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let mut primitives = 0.0f64;
    for seed in 0..100 {
        for (_, e) in primitive_grad_checks(seed, None).unwrap() {
            primitives = primitives.max(e);
        }
    }
    let model = model_gradient_error(7, 100, None).unwrap();
    let elapsed = start.elapsed();
    outcome(
        primitives < 1e-5 && model < 1e-5 && within(elapsed, 60.0),
        format!("primitives worst {primitives:.1e}, 2-layer model worst {model:.1e} over 100 seeds, {elapsed:.2?}"),
    )
}

fn criterion_8() -> Outcome {
    let t = perturbation(&[0.01, 0.05, 0.1, 0.5], 20, 8, 16).unwrap();
    let mut rates = Vec::new();
    let mut ok = true;
    for r in 0..t.rows.len() {
        if col(&t, r, "config") == "l=3" {
            let wins: usize = col(&t, r, "successes").parse().unwrap();
            ok &= wins == 20;
            rates.push(format!("eps={}: {wins}/20", col(&t, r, "epsilon")));
        }
    }
    outcome(ok && rates.len() == 4, rates.join(", "))
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = NBodyConfig { particles: 5, ..NBodyConfig::default() };
    let paths = nbody::generate(&cfg, 9, Some([500, 100, 100]), dir.path()).unwrap();
    let [train_set, val_set, test_set]: [Vec<NBodySample>; 3] =
        paths.iter().map(|p| nbody::load(p).unwrap()).collect::<Vec<_>>().try_into().unwrap();
    let arch = ArchSettings { max_degree: 2, width: 16, layers: 2, velocity: true };
    let tcfg = TrainConfig { lr: 1e-3, epochs: 20, batch_size: 32, seed: 9, ..TrainConfig::default() };
    let model_cfg = nbody::model_config(&arch, &train_set[0]).unwrap();
    let (params, history) = train(&train_set, &val_set, &model_cfg, &tcfg).unwrap();
    let hegnn = evaluate_mse(&params, &test_set).unwrap();
    let untrained = evaluate_mse(&ModelParams::init(&model_cfg, tcfg.seed).unwrap(), &test_set).unwrap();
    let linear = linear_baseline_mse(&test_set, cfg.horizon());

    let r = random_rotation(99);
    let rot = |s: &[NBodySample]| -> Vec<NBodySample> { s.iter().map(|x| x.rotated(&r)).collect() };
    let (_, rotated) = train(&rot(&train_set), &rot(&val_set), &model_cfg, &tcfg).unwrap();
    let drift = history
        .train
        .iter()
        .zip(&rotated.train)
        .chain(history.val.iter().zip(&rotated.val))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let elapsed = start.elapsed();
    outcome(
        hegnn < 0.5 * linear && hegnn < untrained && drift < 1e-6 && within(elapsed, 600.0),
        format!(
            "test MSE {hegnn:.4} vs linear {linear:.4} (ratio {:.3}), untrained {untrained:.4}, rotated history drift {drift:.1e}, {elapsed:.2?}",
            hegnn / linear
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("trace table, closed form vs brute force", criterion_1),
        ("degenerate degrees per structure", criterion_2),
        ("spherical-harmonic sums of the polyhedra", criterion_3),
        ("forward discrimination vs prediction", criterion_4),
        ("O(3) equivariance suite", criterion_5),
        ("inner-product identity and angle recovery", criterion_6),
        ("gradient checks", criterion_7),
        ("perturbed tetrahedron, degree 3", criterion_8),
        ("N-body property target", criterion_9),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = format!("criterion {}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| id.contains(f.as_str()) || name.contains(f.as_str())) {
            continue;
        }
        let o = run();
        failed += usize::from(!o.passed);
        println!("{} {id}: {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
