//! Flag and config value syntax: structure lists, degree ranges, group
//! lists and number lists.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use hegnn_core::geomgraph::{make_kfold, make_polyhedron, GeometricGraph, Polyhedron};
use hegnn_core::groups::{GroupTag, RotationGroup};
use hegnn_core::specfun::MAX_DEGREE;

use crate::error::{CliError, CliResult};

/// A named symmetric test structure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Structure {
    KFold(usize),
    Poly(Polyhedron),
}

impl Structure {
    pub fn build(&self) -> CliResult<GeometricGraph> {
        Ok(match self {
            Structure::KFold(k) => make_kfold(*k)?,
            Structure::Poly(p) => make_polyhedron(*p),
        })
    }

    /// Proper symmetry group plus inversion where the structure has it.
    pub fn symmetry_groups(&self) -> Vec<GroupTag> {
        use RotationGroup::*;
        match self {
            Structure::KFold(k) if k % 2 == 0 => vec![GroupTag::Proper(Dihedral(*k)), GroupTag::Ci],
            Structure::KFold(k) => vec![GroupTag::Proper(Dihedral(*k))],
            Structure::Poly(Polyhedron::Tetrahedron) => vec![GroupTag::Proper(Tetrahedral)],
            Structure::Poly(Polyhedron::Cube | Polyhedron::Octahedron) => {
                vec![GroupTag::Proper(Octahedral), GroupTag::Ci]
            }
            Structure::Poly(Polyhedron::Dodecahedron | Polyhedron::Icosahedron) => {
                vec![GroupTag::Proper(Icosahedral), GroupTag::Ci]
            }
        }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Structure::KFold(k) => write!(f, "kfold:{k}"),
            Structure::Poly(p) => write!(f, "{p}"),
        }
    }
}

impl FromStr for Structure {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        let s = s.trim();
        if let Some(k) = s.strip_prefix("kfold:") {
            let k: usize = k.parse().map_err(|_| CliError::Input(format!("bad k-fold size in {s:?}")))?;
            if k < 2 {
                return Err(CliError::Input(format!("k-fold needs k >= 2, got {k}")));
            }
            return Ok(Structure::KFold(k));
        }
        s.parse::<Polyhedron>()
            .map(Structure::Poly)
            .map_err(|_| CliError::Input(format!("unknown structure {s:?}")))
    }
}

fn items(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty())
}

fn parse_usize(s: &str, what: &str) -> CliResult<usize> {
    s.trim().parse().map_err(|_| CliError::Input(format!("bad {what} {s:?}")))
}

/// `a..b` (inclusive) or a single integer.
fn parse_range(s: &str, what: &str) -> CliResult<Vec<usize>> {
    match s.split_once("..") {
        Some((a, b)) => {
            let (a, b) = (parse_usize(a, what)?, parse_usize(b, what)?);
            if a > b {
                return Err(CliError::Input(format!("empty {what} range {s:?}")));
            }
            Ok((a..=b).collect())
        }
        None => Ok(vec![parse_usize(s, what)?]),
    }
}

/// Comma-separated structures. `polyhedra` expands to all five solids and
/// `kfold:a..b` to a run of k-fold rings. Duplicates are dropped and the
/// result is sorted.
pub fn parse_structures(s: &str) -> CliResult<Vec<Structure>> {
    let mut out = BTreeSet::new();
    for item in items(s) {
        if item == "polyhedra" {
            out.extend(Polyhedron::ALL.map(Structure::Poly));
        } else if let Some(range) = item.strip_prefix("kfold:").filter(|r| r.contains("..")) {
            for k in parse_range(range, "k-fold size")? {
                out.insert(format!("kfold:{k}").parse()?);
            }
        } else {
            out.insert(item.parse()?);
        }
    }
    if out.is_empty() {
        return Err(CliError::Input("no structures given".into()));
    }
    Ok(out.into_iter().collect())
}

/// Comma-separated degrees or inclusive ranges, e.g. `1..11` or `1,3,5..7`.
pub fn parse_degrees(s: &str) -> CliResult<Vec<usize>> {
    let mut out = BTreeSet::new();
    for item in items(s) {
        out.extend(parse_range(item, "degree")?);
    }
    if out.is_empty() {
        return Err(CliError::Input("no degrees given".into()));
    }
    if let Some(&l) = out.iter().next_back().filter(|l| **l > MAX_DEGREE) {
        return Err(CliError::Input(format!("degree {l} exceeds {MAX_DEGREE}")));
    }
    Ok(out.into_iter().collect())
}

/// Comma-separated group tags. `C2..21` and `D2..21` expand to runs of
/// cyclic and dihedral groups.
pub fn parse_groups(s: &str) -> CliResult<Vec<GroupTag>> {
    let mut out = BTreeSet::new();
    for item in items(s) {
        let expanded = match item.split_at(1.min(item.len())) {
            (head @ ("C" | "D"), rest) if rest.contains("..") => {
                parse_range(rest, "group order")?.into_iter().map(|n| format!("{head}{n}")).collect()
            }
            _ => vec![item.to_string()],
        };
        for name in expanded {
            let tag: GroupTag = name.parse().map_err(|_| CliError::Input(format!("unknown group {name:?}")))?;
            // C1 and D1 parse as tags but have no closed-form row
            if let GroupTag::Proper(RotationGroup::Cyclic(n) | RotationGroup::Dihedral(n))
            | GroupTag::WithInversion(RotationGroup::Cyclic(n) | RotationGroup::Dihedral(n)) = tag
            {
                if n < 2 {
                    return Err(CliError::Input(format!("group {name}: n must be at least 2")));
                }
            }
            out.insert(tag);
        }
    }
    if out.is_empty() {
        return Err(CliError::Input("no groups given".into()));
    }
    Ok(out.into_iter().collect())
}

/// Comma-separated non-negative finite numbers, kept in the given order.
pub fn parse_epsilons(s: &str) -> CliResult<Vec<f64>> {
    let out: Vec<f64> = items(s)
        .map(|x| x.parse::<f64>().map_err(|_| CliError::Input(format!("bad number {x:?}"))))
        .collect::<CliResult<_>>()?;
    if out.is_empty() {
        return Err(CliError::Input("no epsilons given".into()));
    }
    if let Some(e) = out.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
        return Err(CliError::Input(format!("epsilon must be non-negative, got {e}")));
    }
    Ok(out)
}
