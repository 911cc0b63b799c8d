//! Finite subgroups of O(3), their group-average projectors and the
//! closed-form trace tables that predict degeneration of equivariant outputs.
//!
//! Axis conventions: cyclic and dihedral groups rotate about z, with the
//! first two-fold axis of `D_n` along x. `T` and `O` are aligned with the
//! cube `(+-1, +-1, +-1)`, `I` with the icosahedron `(0, +-1, +-phi)` and its
//! cyclic permutations.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, Vector3};

use crate::specfun::{o3_rep_unchecked, O3Element, Parity, Rotation3, MAX_DEGREE};
use crate::{Error, Result};

/// Matching tolerance for group elements.
pub const ELEMENT_TOL: f64 = 1e-9;
/// Singular-value cut used for ranks, relative to `max(sigma_max, 1)`.
pub const RANK_TOL: f64 = 1e-8;

const TETRA_PATTERN: &str = "100110";
const OCTA_PATTERN: &str = "100010101110";
const ICOSA_PATTERN: &str = "100000100010100110101110111110";

/// Proper point groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RotationGroup {
    Cyclic(usize),
    Dihedral(usize),
    Tetrahedral,
    Octahedral,
    Icosahedral,
}

/// A named finite subgroup of O(3).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupTag {
    /// `{identity, inversion}`.
    Ci,
    Proper(RotationGroup),
    /// Direct product of a proper group with `Ci`.
    WithInversion(RotationGroup),
}

impl fmt::Display for RotationGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RotationGroup::Cyclic(n) => write!(f, "C{n}"),
            RotationGroup::Dihedral(n) => write!(f, "D{n}"),
            RotationGroup::Tetrahedral => write!(f, "T"),
            RotationGroup::Octahedral => write!(f, "O"),
            RotationGroup::Icosahedral => write!(f, "I"),
        }
    }
}

impl fmt::Display for GroupTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupTag::Ci => write!(f, "Ci"),
            GroupTag::Proper(g) => write!(f, "{g}"),
            GroupTag::WithInversion(g) => write!(f, "{g}xCi"),
        }
    }
}

impl FromStr for RotationGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::Unknown(s.to_string());
        match s {
            "T" => Ok(RotationGroup::Tetrahedral),
            "O" => Ok(RotationGroup::Octahedral),
            "I" => Ok(RotationGroup::Icosahedral),
            _ => {
                let (head, n) = s.split_at(1.min(s.len()));
                let n: usize = n.parse().map_err(|_| unknown())?;
                match head {
                    "C" => Ok(RotationGroup::Cyclic(n)),
                    "D" => Ok(RotationGroup::Dihedral(n)),
                    _ => Err(unknown()),
                }
            }
        }
    }
}

impl FromStr for GroupTag {
    type Err = Error;

    /// Accepts `Ci`, `C3`, `D5`, `T`, `O`, `I` and products such as `OxCi`
    /// (`×` is accepted in place of `x`).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "Ci" {
            return Ok(GroupTag::Ci);
        }
        let normalized = s.replace('×', "x");
        if let Some(base) = normalized.strip_suffix("xCi") {
            return Ok(GroupTag::WithInversion(base.parse()?));
        }
        Ok(GroupTag::Proper(normalized.parse()?))
    }
}

impl GroupTag {
    pub fn order(&self) -> usize {
        let proper = |g: &RotationGroup| match g {
            RotationGroup::Cyclic(n) => *n,
            RotationGroup::Dihedral(n) => 2 * n,
            RotationGroup::Tetrahedral => 12,
            RotationGroup::Octahedral => 24,
            RotationGroup::Icosahedral => 60,
        };
        match self {
            GroupTag::Ci => 2,
            GroupTag::Proper(g) => proper(g),
            GroupTag::WithInversion(g) => 2 * proper(g),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            GroupTag::Proper(RotationGroup::Cyclic(n) | RotationGroup::Dihedral(n))
            | GroupTag::WithInversion(RotationGroup::Cyclic(n) | RotationGroup::Dihedral(n))
                if *n < 2 =>
            {
                Err(Error::Domain(format!("{self}: n must be at least 2")))
            }
            _ => Ok(()),
        }
    }
}

/// A closed finite set of O(3) elements.
#[derive(Clone, Debug)]
pub struct FiniteGroup {
    pub tag: GroupTag,
    pub elements: Vec<O3Element>,
}

impl FiniteGroup {
    pub fn order(&self) -> usize {
        self.elements.len()
    }

    /// Index of the element within [`ELEMENT_TOL`] of `g`.
    pub fn find(&self, g: &O3Element) -> Option<usize> {
        self.elements.iter().position(|e| e.distance(g) < ELEMENT_TOL)
    }

    /// The proper rotations contained in the group.
    pub fn rotations(&self) -> impl Iterator<Item = &O3Element> {
        self.elements.iter().filter(|e| e.parity == Parity::Even)
    }
}

fn rotation_generators(g: &RotationGroup) -> Vec<O3Element> {
    let rot = |axis: Vector3<f64>, angle: f64| O3Element::rotation(Rotation3::about_axis(axis, angle));
    let z = Vector3::z();
    match *g {
        RotationGroup::Cyclic(n) => vec![rot(z, 2.0 * PI / n as f64)],
        RotationGroup::Dihedral(n) => vec![rot(z, 2.0 * PI / n as f64), rot(Vector3::x(), PI)],
        RotationGroup::Tetrahedral => {
            vec![rot(z, PI), rot(Vector3::new(1.0, 1.0, 1.0), 2.0 * PI / 3.0)]
        }
        RotationGroup::Octahedral => {
            vec![rot(z, PI / 2.0), rot(Vector3::new(1.0, 1.0, 1.0), 2.0 * PI / 3.0)]
        }
        RotationGroup::Icosahedral => {
            let phi = (1.0 + 5f64.sqrt()) / 2.0;
            vec![
                rot(Vector3::new(0.0, 1.0, phi), 2.0 * PI / 5.0),
                rot(Vector3::new(1.0, 1.0, 1.0), 2.0 * PI / 3.0),
            ]
        }
    }
}

/// Closes the set generated by `generators` under composition.
fn close(generators: &[O3Element]) -> Vec<O3Element> {
    let mut elements = vec![O3Element::identity()];
    let mut frontier = 0;
    while frontier < elements.len() {
        let current = elements[frontier];
        for g in generators {
            let candidate = g.compose(&current);
            if !elements.iter().any(|e| e.distance(&candidate) < ELEMENT_TOL) {
                elements.push(candidate);
            }
        }
        frontier += 1;
    }
    elements
}

/// Enumerates the elements of a named group by closing its generators.
pub fn enumerate_group(tag: GroupTag) -> Result<FiniteGroup> {
    tag.validate()?;
    let generators = match &tag {
        GroupTag::Ci => vec![O3Element::inversion()],
        GroupTag::Proper(g) => rotation_generators(g),
        GroupTag::WithInversion(g) => {
            let mut gens = rotation_generators(g);
            gens.push(O3Element::inversion());
            gens
        }
    };
    let elements = close(&generators);
    debug_assert_eq!(elements.len(), tag.order());
    Ok(FiniteGroup { tag, elements })
}

/// The mean representation matrix over a finite group; a symmetric projector.
#[derive(Clone, Debug)]
pub struct GroupAverage {
    pub l: usize,
    pub matrix: DMatrix<f64>,
}

impl GroupAverage {
    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    pub fn max_abs(&self) -> f64 {
        self.matrix.amax()
    }

    /// Numerical rank with a singular-value cut relative to the largest one.
    pub fn rank(&self) -> usize {
        numerical_rank(&self.matrix)
    }
}

fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.singular_values();
    // scale floor of one: averages of orthogonal matrices have spectral norm <= 1
    let cut = RANK_TOL * sv.max().max(1.0);
    sv.iter().filter(|s| **s > cut).count()
}

/// `(1/|G|) sum_g rho^(l)(g)`.
pub fn group_average(l: usize, group: &FiniteGroup) -> Result<GroupAverage> {
    if l > MAX_DEGREE {
        return Err(Error::DegreeTooHigh(l));
    }
    let n = 2 * l + 1;
    let mut acc = DMatrix::zeros(n, n);
    for g in &group.elements {
        acc += o3_rep_unchecked(l, g).matrix;
    }
    acc /= group.order() as f64;
    Ok(GroupAverage { l, matrix: acc })
}

/// `(1/|G|) sum_g trace(rho^(l)(g))` from explicitly built matrices, before rounding.
pub fn brute_force_trace(l: usize, group: &FiniteGroup) -> Result<f64> {
    if l > MAX_DEGREE {
        return Err(Error::DegreeTooHigh(l));
    }
    let total: f64 = group.elements.iter().map(|g| o3_rep_unchecked(l, g).trace()).sum();
    Ok(total / group.order() as f64)
}

fn pattern_trace(l: usize, pattern: &str) -> i64 {
    let r = pattern.len();
    let bit = pattern.as_bytes()[l % r] - b'0';
    (l / r) as i64 + bit as i64
}

fn proper_trace(l: usize, g: &RotationGroup) -> i64 {
    let even = (l % 2 == 0) as i64;
    match *g {
        RotationGroup::Cyclic(n) => 2 * (l / n) as i64 + 1,
        RotationGroup::Dihedral(n) => (l / n) as i64 + even,
        RotationGroup::Tetrahedral => pattern_trace(l, TETRA_PATTERN),
        RotationGroup::Octahedral => pattern_trace(l, OCTA_PATTERN),
        RotationGroup::Icosahedral => pattern_trace(l, ICOSA_PATTERN),
    }
}

/// Closed-form trace of the degree-`l` group average.
///
/// For a product with `Ci` the average factors as `avg(G) (I + (-1)^l I) / 2`,
/// so the trace is the proper trace on even degrees and zero on odd ones.
pub fn trace_closed_form(l: usize, tag: GroupTag) -> Result<i64> {
    tag.validate()?;
    let even = l % 2 == 0;
    Ok(match &tag {
        GroupTag::Ci => {
            if even {
                (2 * l + 1) as i64
            } else {
                0
            }
        }
        GroupTag::Proper(g) => proper_trace(l, g),
        GroupTag::WithInversion(g) => {
            if even {
                proper_trace(l, g)
            } else {
                0
            }
        }
    })
}

/// Dimension of the subspace fixed by every group element:
/// `(2l+1) - rank(I - avg)`.
pub fn fixed_subspace_dim(l: usize, group: &FiniteGroup) -> Result<usize> {
    let avg = group_average(l, group)?;
    let n = 2 * l + 1;
    let complement = DMatrix::identity(n, n) - &avg.matrix;
    Ok(n - numerical_rank(&complement))
}

/// Degrees `l <= lmax` at which every equivariant output vanishes on graphs
/// symmetric under any of `groups`, from the closed-form traces.
pub fn degenerate_degrees(groups: &[GroupTag], lmax: usize) -> Result<BTreeSet<usize>> {
    if lmax > MAX_DEGREE {
        return Err(Error::DegreeTooHigh(lmax));
    }
    let mut out = BTreeSet::new();
    for tag in groups {
        for l in 0..=lmax {
            if trace_closed_form(l, *tag)? == 0 {
                out.insert(l);
            }
        }
    }
    Ok(out)
}

/// Same predicate from explicit group averages: degenerate when every entry
/// of the average is below `1e-9`.
pub fn degenerate_degrees_numeric(groups: &[FiniteGroup], lmax: usize) -> Result<BTreeSet<usize>> {
    if lmax > MAX_DEGREE {
        return Err(Error::DegreeTooHigh(lmax));
    }
    let mut out = BTreeSet::new();
    for g in groups {
        for l in 0..=lmax {
            if group_average(l, g)?.max_abs() < 1e-9 {
                out.insert(l);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specfun::rotation_character;

    fn tags() -> Vec<GroupTag> {
        let mut v = vec![
            GroupTag::Ci,
            GroupTag::Proper(RotationGroup::Tetrahedral),
            GroupTag::Proper(RotationGroup::Octahedral),
            GroupTag::Proper(RotationGroup::Icosahedral),
            GroupTag::WithInversion(RotationGroup::Octahedral),
            GroupTag::WithInversion(RotationGroup::Dihedral(3)),
        ];
        for n in [2, 3, 5, 10] {
            v.push(GroupTag::Proper(RotationGroup::Cyclic(n)));
            v.push(GroupTag::Proper(RotationGroup::Dihedral(n)));
        }
        v
    }

    #[test]
    fn parse_and_display_round_trip() {
        for t in tags() {
            assert_eq!(t.to_string().parse::<GroupTag>().unwrap(), t);
        }
        assert_eq!("I×Ci".parse::<GroupTag>().unwrap(), GroupTag::WithInversion(RotationGroup::Icosahedral));
        assert!("Q7".parse::<GroupTag>().is_err());
        assert!("C".parse::<GroupTag>().is_err());
    }

    #[test]
    fn orders() {
        for t in tags() {
            let g = enumerate_group(t).unwrap();
            assert_eq!(g.order(), t.order(), "{t}");
        }
        assert_eq!(enumerate_group("T".parse().unwrap()).unwrap().order(), 12);
        assert_eq!(enumerate_group("O".parse().unwrap()).unwrap().order(), 24);
        assert_eq!(enumerate_group("I".parse().unwrap()).unwrap().order(), 60);
        assert_eq!(enumerate_group("IxCi".parse().unwrap()).unwrap().order(), 120);
    }

    #[test]
    fn ci_elements() {
        let g = enumerate_group(GroupTag::Ci).unwrap();
        assert_eq!(g.order(), 2);
        assert!(g.find(&O3Element::identity()).is_some());
        assert!(g.find(&O3Element::inversion()).is_some());
    }

    #[test]
    fn rejects_small_n() {
        assert!(enumerate_group(GroupTag::Proper(RotationGroup::Cyclic(1))).is_err());
        assert!(trace_closed_form(2, GroupTag::Proper(RotationGroup::Dihedral(0))).is_err());
    }

    #[test]
    fn closure_and_inverses() {
        for t in tags() {
            let g = enumerate_group(t).unwrap();
            assert!(g.find(&O3Element::identity()).is_some());
            for a in &g.elements {
                assert!(g.find(&a.inverse()).is_some());
                for b in &g.elements {
                    let ab = a.compose(b);
                    assert!(g.elements.iter().any(|e| e.distance(&ab) < 1e-8), "{t} not closed");
                }
            }
        }
    }

    #[test]
    fn ci_average_is_zero_or_identity() {
        let g = enumerate_group(GroupTag::Ci).unwrap();
        for l in 0..8 {
            let avg = group_average(l, &g).unwrap();
            let n = 2 * l + 1;
            let want = if l % 2 == 0 { DMatrix::identity(n, n) } else { DMatrix::zeros(n, n) };
            assert!((avg.matrix - want).amax() < 1e-12);
        }
    }

    #[test]
    fn tetrahedral_degree_five_vanishes() {
        let g = enumerate_group(GroupTag::Proper(RotationGroup::Tetrahedral)).unwrap();
        assert!(group_average(5, &g).unwrap().max_abs() < 1e-9);
        assert_eq!(trace_closed_form(5, g.tag).unwrap(), 0);
    }

    #[test]
    fn closed_form_examples() {
        let t = GroupTag::Proper(RotationGroup::Tetrahedral);
        let c3 = GroupTag::Proper(RotationGroup::Cyclic(3));
        let i = GroupTag::Proper(RotationGroup::Icosahedral);
        assert_eq!(trace_closed_form(5, t).unwrap(), 0);
        assert_eq!(trace_closed_form(2, c3).unwrap(), 1);
        assert_eq!(trace_closed_form(6, i).unwrap(), 1);
        let c3_row: Vec<i64> = (0..6).map(|l| trace_closed_form(l, c3).unwrap()).collect();
        assert_eq!(c3_row, vec![1, 1, 1, 3, 3, 3]);
    }

    #[test]
    fn brute_force_matches_closed_form_and_characters() {
        for t in tags() {
            let g = enumerate_group(t).unwrap();
            for l in 0..=12 {
                let bf = brute_force_trace(l, &g).unwrap();
                let cf = trace_closed_form(l, t).unwrap();
                assert!((bf - cf as f64).abs() < 1e-6, "{t} l={l}: {bf} vs {cf}");
                let chi: f64 = g
                    .elements
                    .iter()
                    .map(|e| e.parity.sign(l) * rotation_character(l, e.rotation.angle()))
                    .sum::<f64>()
                    / g.order() as f64;
                assert!((chi - bf).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn projector_laws() {
        for t in tags() {
            let g = enumerate_group(t).unwrap();
            for l in [1, 2, 3, 4, 6, 7] {
                let avg = group_average(l, &g).unwrap();
                let sq = &avg.matrix * &avg.matrix;
                assert!((sq - &avg.matrix).amax() < 1e-8);
                assert!((avg.matrix.transpose() - &avg.matrix).amax() < 1e-8);
                assert_eq!(avg.rank() as f64, avg.trace().round());
                assert_eq!(fixed_subspace_dim(l, &g).unwrap(), avg.rank());
                if avg.trace().abs() < 1e-9 {
                    assert!(avg.max_abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn fixed_dims() {
        let ci = enumerate_group(GroupTag::Ci).unwrap();
        assert_eq!(fixed_subspace_dim(4, &ci).unwrap(), 9);
        let t = enumerate_group(GroupTag::Proper(RotationGroup::Tetrahedral)).unwrap();
        assert_eq!(fixed_subspace_dim(3, &t).unwrap(), 1);
        for tag in tags() {
            let g = enumerate_group(tag).unwrap();
            if matches!(tag, GroupTag::Proper(RotationGroup::Cyclic(_))) {
                // cyclic groups fix the axis direction
                assert_eq!(fixed_subspace_dim(1, &g).unwrap(), 1);
            } else {
                assert_eq!(fixed_subspace_dim(1, &g).unwrap(), 0, "{tag}");
            }
        }
    }

    #[test]
    fn degeneration_table_rows() {
        use RotationGroup::*;
        let odd = |lmax: usize| (1..=lmax).filter(|l| l % 2 == 1).collect::<BTreeSet<_>>();
        let tetra = degenerate_degrees(&[GroupTag::Proper(Tetrahedral)], 11).unwrap();
        assert_eq!(tetra, BTreeSet::from([1, 2, 5]));
        let cube = degenerate_degrees(&[GroupTag::Ci, GroupTag::Proper(Octahedral)], 11).unwrap();
        let mut want = odd(11);
        want.insert(2);
        assert_eq!(cube, want);
        let ico = degenerate_degrees(&[GroupTag::Ci, GroupTag::Proper(Icosahedral)], 14).unwrap();
        let mut want = odd(14);
        want.extend([2, 4, 8, 14]);
        assert_eq!(ico, want);
        for k in 1..=5 {
            let d = degenerate_degrees(&[GroupTag::Proper(Dihedral(2 * k + 1))], 14).unwrap();
            let want: BTreeSet<usize> = (1..2 * k + 1).filter(|l| l % 2 == 1).collect();
            assert_eq!(d, want, "D{}", 2 * k + 1);
        }
    }

    #[test]
    fn numeric_route_agrees() {
        let names = ["Ci", "T", "O", "D4", "D5", "C3"];
        for n in names {
            let g = enumerate_group(n.parse().unwrap()).unwrap();
            let a = degenerate_degrees(&[g.tag], 14).unwrap();
            let b = degenerate_degrees_numeric(&[g], 14).unwrap();
            assert_eq!(a, b, "{n}");
        }
    }
}
