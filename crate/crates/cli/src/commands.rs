//! Table-producing commands: group traces, expressivity verdicts and the
//! perturbation sweep.

use std::collections::BTreeSet;

use hegnn_core::geomgraph::{make_polyhedron, perturb, Polyhedron};
use hegnn_core::groups::{brute_force_trace, degenerate_degrees, enumerate_group, trace_closed_form, GroupTag};
use hegnn_core::hegnn::{discriminates, sph_sum_check, ModelConfig, DISCRIMINATION_CUT, SPH_SUM_CUT};
use rayon::prelude::*;

use crate::error::{CliError, CliResult};
use crate::parse::Structure;
use crate::table::{flag, num, Table};

/// Largest allowed gap between the closed-form and brute-force traces.
pub const TRACE_TOL: f64 = 1e-6;

/// Per group and degree: the closed-form trace, the mean trace of the
/// explicitly built representation matrices, and whether the degree
/// degenerates. Returns the table and the number of disagreeing rows.
pub fn traces(groups: &[GroupTag], lmax: usize) -> CliResult<(Table, usize)> {
    if lmax > hegnn_core::specfun::MAX_DEGREE {
        return Err(CliError::Input(format!("lmax {lmax} exceeds {}", hegnn_core::specfun::MAX_DEGREE)));
    }
    let per_group: Vec<Vec<(i64, f64)>> = groups
        .par_iter()
        .map(|tag| -> CliResult<Vec<(i64, f64)>> {
            let group = enumerate_group(*tag)?;
            (0..=lmax).map(|l| Ok((trace_closed_form(l, *tag)?, brute_force_trace(l, &group)?))).collect()
        })
        .collect::<CliResult<_>>()?;
    let mut t = Table::new(&["group", "l", "closed_form", "brute_force", "degenerate", "agrees"]);
    t.tolerances = vec![("brute_force".into(), TRACE_TOL)];
    let mut bad = 0;
    for (tag, rows) in groups.iter().zip(per_group) {
        for (l, (closed, brute)) in rows.into_iter().enumerate() {
            let agrees = (brute - closed as f64).abs() < TRACE_TOL;
            bad += usize::from(!agrees);
            t.push(vec![tag.to_string(), l.to_string(), closed.to_string(), num(brute), flag(closed == 0), flag(agrees)]);
        }
    }
    Ok((t, bad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Forward,
    SphSum,
}

impl std::str::FromStr for Mode {
    type Err = CliError;
    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "forward" => Ok(Mode::Forward),
            "sph-sum" => Ok(Mode::SphSum),
            _ => Err(CliError::Input(format!("unknown mode {s:?}; expected forward or sph-sum"))),
        }
    }
}

/// Settings of the forward discrimination runs.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardSettings {
    pub trials: usize,
    pub seed: u64,
    /// Activate every degree up to the row's degree instead of just that one.
    pub cumulative: bool,
    pub width: usize,
    pub center_anchor: bool,
}

impl Default for ForwardSettings {
    fn default() -> Self {
        Self { trials: 5, seed: 0, cumulative: false, width: 16, center_anchor: true }
    }
}

/// Model configuration for one expressivity cell.
pub fn cell_config(node_dim: usize, edge_dim: usize, l: usize, s: &ForwardSettings) -> ModelConfig {
    let base = if s.cumulative {
        ModelConfig::new(l, node_dim, edge_dim)
    } else {
        ModelConfig::single_degree(l, node_dim, edge_dim)
    };
    ModelConfig { center_anchor: s.center_anchor, ..base.with_width(s.width) }
}

/// Whether the symmetry predicts a nonvanishing equivariant output at `l`,
/// or at any degree up to `l` in the cumulative case.
pub fn predicted(degenerate: &BTreeSet<usize>, l: usize, cumulative: bool) -> bool {
    if cumulative {
        (1..=l).any(|k| !degenerate.contains(&k))
    } else {
        !degenerate.contains(&l)
    }
}

/// Forward mode: a discrimination verdict per cell, its success count and
/// the largest score over trials. Sph-sum mode: whether the node sum of
/// `Y^(l)` survives. Both carry the symmetry prediction.
pub fn expressivity(structures: &[Structure], degrees: &[usize], mode: Mode, s: &ForwardSettings) -> CliResult<Table> {
    if degrees.contains(&0) {
        return Err(CliError::Input("degree 0 carries no steerable output".into()));
    }
    let lmax = degrees.iter().copied().max().unwrap_or(0);
    let cells: Vec<(Structure, usize)> =
        structures.iter().flat_map(|st| degrees.iter().map(move |l| (*st, *l))).collect();
    let graphs = structures.iter().map(|st| Ok((*st, st.build()?))).collect::<CliResult<Vec<_>>>()?;
    let degenerate = structures
        .iter()
        .map(|st| Ok((*st, degenerate_degrees(&st.symmetry_groups(), lmax)?)))
        .collect::<CliResult<Vec<_>>>()?;
    let lookup = |st: Structure| graphs.iter().position(|(k, _)| *k == st).expect("built above");
    let mut t = match mode {
        Mode::Forward => {
            let mut t = Table::new(&[
                "structure", "degree", "config", "distinguishable", "successes", "trials", "max_score", "predicted",
                "consistent",
            ]);
            t.seed = Some(s.seed);
            t.tolerances = vec![("score".into(), DISCRIMINATION_CUT)];
            t
        }
        Mode::SphSum => {
            let mut t = Table::new(&["structure", "degree", "nonzero", "norm", "predicted", "consistent"]);
            t.tolerances = vec![("norm".into(), SPH_SUM_CUT)];
            t
        }
    };
    let rows: Vec<Vec<String>> = cells
        .par_iter()
        .map(|&(st, l)| -> CliResult<Vec<String>> {
            let idx = lookup(st);
            let g = &graphs[idx].1;
            let cumulative = mode == Mode::Forward && s.cumulative;
            let pred = predicted(&degenerate[idx].1, l, cumulative);
            match mode {
                Mode::Forward => {
                    let cfg = cell_config(g.node_dim(), g.edge_dim(), l, s);
                    let d = discriminates(g, &cfg, s.trials, s.seed)?;
                    let wins = d.successes();
                    let consistent = if pred { 5 * wins >= 4 * s.trials } else { !d.verdict };
                    let max_score = d.trials.iter().map(|o| o.score).fold(0.0, f64::max);
                    Ok(vec![
                        st.to_string(),
                        l.to_string(),
                        if s.cumulative { "cumulative" } else { "single" }.into(),
                        flag(d.verdict),
                        wins.to_string(),
                        s.trials.to_string(),
                        num(max_score),
                        flag(pred),
                        flag(consistent),
                    ])
                }
                Mode::SphSum => {
                    let (norm, nonzero) = sph_sum_check(g, l)?;
                    Ok(vec![st.to_string(), l.to_string(), flag(nonzero), num(norm), flag(pred), flag(nonzero == pred)])
                }
            }
        })
        .collect::<CliResult<_>>()?;
    for r in rows {
        t.push(r);
    }
    Ok(t)
}

/// Forward discrimination of the randomly perturbed tetrahedron. Each trial
/// perturbs with its own seed and runs one discrimination trial; the row
/// reports how many trials separated the perturbed structure from a rotated
/// copy, for degree 3 alone and for degrees up to 3.
pub fn perturbation(epsilons: &[f64], trials: usize, seed: u64, width: usize) -> CliResult<Table> {
    if trials == 0 {
        return Err(CliError::Input("at least one trial is required".into()));
    }
    if let Some(e) = epsilons.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
        return Err(CliError::Input(format!("epsilon must be non-negative, got {e}")));
    }
    let mut eps: Vec<f64> = epsilons.to_vec();
    eps.sort_by(f64::total_cmp);
    eps.dedup();
    let tetra = make_polyhedron(Polyhedron::Tetrahedron);
    let configs = [("l=3", false), ("l<=3", true)];
    let cells: Vec<(f64, &str, bool)> =
        eps.iter().flat_map(|e| configs.iter().map(move |(name, cum)| (*e, *name, *cum))).collect();
    let rows: Vec<Vec<String>> = cells
        .par_iter()
        .map(|&(e, name, cumulative)| -> CliResult<Vec<String>> {
            let settings = ForwardSettings { trials: 1, seed, cumulative, width, center_anchor: true };
            let cfg = cell_config(tetra.node_dim(), tetra.edge_dim(), 3, &settings);
            let mut wins = 0;
            for trial in 0..trials as u64 {
                let g = perturb(&tetra, e, seed.wrapping_add(trial))?;
                wins += usize::from(discriminates(&g, &cfg, 1, seed.wrapping_add(trial))?.verdict);
            }
            Ok(vec![
                num(e),
                name.into(),
                wins.to_string(),
                trials.to_string(),
                num(100.0 * wins as f64 / trials as f64),
            ])
        })
        .collect::<CliResult<_>>()?;
    let mut t = Table::new(&["epsilon", "config", "successes", "trials", "rate_percent"]);
    t.seed = Some(seed);
    t.tolerances = vec![("score".into(), DISCRIMINATION_CUT)];
    for r in rows {
        t.push(r);
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parse::{parse_groups, parse_structures};

    #[test]
    fn c3_traces() {
        let (t, bad) = traces(&parse_groups("C3").unwrap(), 5).unwrap();
        assert_eq!(bad, 0);
        let closed: Vec<&str> = (0..6).map(|r| t.get(r, "closed_form").unwrap()).collect();
        assert_eq!(closed, ["1", "1", "1", "3", "3", "3"]);
    }

    #[test]
    fn traces_reject_high_degree() {
        assert!(traces(&parse_groups("T").unwrap(), 31).is_err());
    }

    #[test]
    fn sph_sum_cube() {
        let t = expressivity(&parse_structures("cube").unwrap(), &[2, 4], Mode::SphSum, &ForwardSettings::default())
            .unwrap();
        assert_eq!(t.get(0, "nonzero"), Some("false"));
        assert_eq!(t.get(1, "nonzero"), Some("true"));
        assert!(t.rows.iter().all(|r| r[5] == "true"));
    }

    #[test]
    fn prediction_rules() {
        let deg: BTreeSet<usize> = [1, 2, 5].into();
        assert!(!predicted(&deg, 2, false));
        assert!(predicted(&deg, 3, false));
        assert!(!predicted(&deg, 2, true));
        assert!(predicted(&deg, 5, true));
    }

    #[test]
    fn degree_zero_is_rejected() {
        let s = parse_structures("cube").unwrap();
        assert!(expressivity(&s, &[0, 1], Mode::Forward, &ForwardSettings::default()).is_err());
    }
}
