//! Special functions and representation matrices.
//!
//! Conventions used throughout the crate:
//!
//! * Real spherical harmonics use "component" normalization,
//!   `|Y^(l)(u)|^2 = 2l + 1` for every unit `u`, without the Condon-Shortley
//!   phase. Degree 0 is the constant `1`.
//! * Components are ordered `m = -l..=l`. For `m > 0` the component carries
//!   `cos(m phi)`, for `m < 0` it carries `sin(|m| phi)`.
//! * With that ordering the degree-1 block is `sqrt(3) * (y, z, x)`.
//! * The addition theorem reads `<Y^(l)(u), Y^(l)(v)> = (2l + 1) P_l(<u, v>)`.

use std::f64::consts::PI;
use std::ops::Mul;
use std::sync::OnceLock;

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::{Error, Result};

/// Highest supported degree.
pub const MAX_DEGREE: usize = 30;

const UNIT_TOL: f64 = 1e-8;
const ROTATION_TOL: f64 = 1e-10;
const LEGENDRE_CLAMP: f64 = 1e-12;

/// A direction on the unit sphere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitVec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitVec3 {
    /// Accepts a vector whose norm is within `1e-8` of one and renormalizes it.
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (x * x + y * y + z * z).sqrt();
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::NotUnit(n));
        }
        Ok(Self { x: x / n, y: y / n, z: z / n })
    }

    /// Normalizes an arbitrary non-zero vector.
    pub fn from_direction(v: &Vector3<f64>) -> Result<Self> {
        let n = v.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Domain(format!("cannot normalize vector of norm {n}")));
        }
        Ok(Self { x: v.x / n, y: v.y / n, z: v.z / n })
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn dot(self, other: UnitVec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }
}

impl std::ops::Neg for UnitVec3 {
    type Output = UnitVec3;
    fn neg(self) -> UnitVec3 {
        UnitVec3 { x: -self.x, y: -self.y, z: -self.z }
    }
}

/// Degree-`l` spherical harmonic coefficients, `values[m + l]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SphVec {
    pub l: usize,
    pub values: Vec<f64>,
}

impl SphVec {
    pub fn new(l: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != 2 * l + 1 {
            return Err(Error::Domain(format!(
                "degree {l} needs {} components, got {}",
                2 * l + 1,
                values.len()
            )));
        }
        Ok(Self { l, values })
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &SphVec) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

/// A proper rotation of R^3.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation3(Matrix3<f64>);

impl Rotation3 {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let defect = (m.transpose() * m - Matrix3::identity()).abs().max();
        if !(defect <= ROTATION_TOL) {
            return Err(Error::InvalidRotation(format!("|R^T R - I|_max = {defect:e}")));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidRotation(format!("det = {det}")));
        }
        Ok(Self(m))
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Right-handed rotation by `angle` about `axis` (need not be normalized).
    pub fn about_axis(axis: Vector3<f64>, angle: f64) -> Self {
        let k = axis.normalize();
        let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
        let m = Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos());
        Self(m)
    }

    pub fn about_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    pub fn about_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    pub fn about_x(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    /// Rotation from a (not necessarily normalized) quaternion `(w, x, y, z)`.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        let (w, x, y, z) = (w / n, x / n, y / n, z / n);
        Self(Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        ((self.0.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// ZYZ Euler angles `(alpha, beta, gamma)` with `R = Rz(alpha) Ry(beta) Rz(gamma)`.
    ///
    /// Goes through the quaternion so that the gimbal-lock cases need no
    /// special branch.
    pub fn euler_zyz(&self) -> (f64, f64, f64) {
        let q = nalgebra::UnitQuaternion::from_rotation_matrix(
            &nalgebra::Rotation3::from_matrix_unchecked(self.0),
        );
        let (w, x, y, z) = (q.w, q.i, q.j, q.k);
        let sum = 2.0 * z.atan2(w);
        let diff = 2.0 * (-x).atan2(y);
        let beta = 2.0 * (x * x + y * y).sqrt().atan2((w * w + z * z).sqrt());
        ((sum + diff) / 2.0, beta, (sum - diff) / 2.0)
    }

    pub fn from_euler_zyz(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self::about_z(alpha) * Self::about_y(beta) * Self::about_z(gamma)
    }
}

impl Mul for Rotation3 {
    type Output = Rotation3;
    fn mul(self, rhs: Rotation3) -> Rotation3 {
        Rotation3(self.0 * rhs.0)
    }
}

/// The factor of O(3) = SO(3) x C_i carried by an element.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Parity {
    Even,
    Odd,
}

impl Parity {
    pub fn compose(self, other: Parity) -> Parity {
        if self == other {
            Parity::Even
        } else {
            Parity::Odd
        }
    }

    /// `sigma^(l)`: `1` for even parity, `(-1)^l` for odd parity.
    pub fn sign(self, l: usize) -> f64 {
        match self {
            Parity::Odd if l % 2 == 1 => -1.0,
            _ => 1.0,
        }
    }
}

/// An element of O(3) written as a rotation times an optional inversion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct O3Element {
    pub rotation: Rotation3,
    pub parity: Parity,
}

impl O3Element {
    pub fn new(rotation: Rotation3, parity: Parity) -> Self {
        Self { rotation, parity }
    }

    pub fn identity() -> Self {
        Self::new(Rotation3::identity(), Parity::Even)
    }

    pub fn inversion() -> Self {
        Self::new(Rotation3::identity(), Parity::Odd)
    }

    pub fn rotation(r: Rotation3) -> Self {
        Self::new(r, Parity::Even)
    }

    pub fn compose(&self, other: &O3Element) -> O3Element {
        O3Element::new(self.rotation * other.rotation, self.parity.compose(other.parity))
    }

    pub fn inverse(&self) -> O3Element {
        O3Element::new(self.rotation.transpose(), self.parity)
    }

    /// The 3x3 orthogonal matrix of the element.
    pub fn matrix(&self) -> Matrix3<f64> {
        self.rotation.matrix() * self.parity.sign(1)
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.matrix() * v
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        self.parity == Parity::Even
            && (self.rotation.matrix() - Matrix3::identity()).abs().max() <= tol
    }

    /// Max-abs distance between matrices, infinite across parities.
    pub fn distance(&self, other: &O3Element) -> f64 {
        if self.parity != other.parity {
            return f64::INFINITY;
        }
        (self.rotation.matrix() - other.rotation.matrix()).abs().max()
    }
}

/// A `(2l+1) x (2l+1)` representation matrix in the real spherical-harmonic basis.
#[derive(Clone, Debug, PartialEq)]
pub struct RepMatrix {
    pub l: usize,
    pub matrix: DMatrix<f64>,
}

impl RepMatrix {
    pub fn identity(l: usize) -> Self {
        Self { l, matrix: DMatrix::identity(2 * l + 1, 2 * l + 1) }
    }

    pub fn apply(&self, v: &SphVec) -> SphVec {
        assert_eq!(v.l, self.l, "degree mismatch");
        let out = &self.matrix * nalgebra::DVector::from_column_slice(&v.values);
        SphVec { l: self.l, values: out.as_slice().to_vec() }
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }
}

fn check_degree(l: usize) -> Result<()> {
    if l > MAX_DEGREE {
        Err(Error::DegreeTooHigh(l))
    } else {
        Ok(())
    }
}

/// Legendre polynomial `P_l(t)` by the three-term recurrence.
///
/// Inputs within `1e-12` outside `[-1, 1]` are clamped; anything further out
/// is rejected.
pub fn legendre_eval(l: usize, t: f64) -> Result<f64> {
    if !t.is_finite() || t.abs() > 1.0 + LEGENDRE_CLAMP {
        return Err(Error::Domain(format!("Legendre argument {t} outside [-1, 1]")));
    }
    let t = t.clamp(-1.0, 1.0);
    Ok(legendre_unchecked(l, t))
}

/// `P_0(t), ..., P_lmax(t)` with no domain check.
pub(crate) fn legendre_table(lmax: usize, t: f64) -> Vec<f64> {
    let mut p = Vec::with_capacity(lmax + 1);
    p.push(1.0);
    if lmax >= 1 {
        p.push(t);
    }
    for l in 1..lmax {
        let lf = l as f64;
        let next = ((2.0 * lf + 1.0) * t * p[l] - lf * p[l - 1]) / (lf + 1.0);
        p.push(next);
    }
    p
}

fn legendre_unchecked(l: usize, t: f64) -> f64 {
    legendre_table(l, t)[l]
}

/// Real spherical harmonics of every degree `0..=lmax` at a unit vector.
///
/// Associated Legendre functions are carried as `P_l^m / sin^m(theta)` so the
/// azimuthal factor comes from `(x + iy)^m` without ever forming angles.
pub fn sph_harm_upto(lmax: usize, u: UnitVec3) -> Result<Vec<SphVec>> {
    check_degree(lmax)?;
    let n = (u.x * u.x + u.y * u.y + u.z * u.z).sqrt();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::NotUnit(n));
    }
    Ok(sph_harm_raw(lmax, u.x, u.y, u.z))
}

pub(crate) fn sph_harm_raw(lmax: usize, x: f64, y: f64, z: f64) -> Vec<SphVec> {
    let mut out: Vec<SphVec> =
        (0..=lmax).map(|l| SphVec { l, values: vec![0.0; 2 * l + 1] }).collect();
    // (x + iy)^m
    let (mut cm, mut sm) = (1.0_f64, 0.0_f64);
    // (2m - 1)!!
    let mut dfact = 1.0_f64;
    for m in 0..=lmax {
        if m > 0 {
            let (c, s) = (cm * x - sm * y, cm * y + sm * x);
            cm = c;
            sm = s;
            dfact *= (2 * m - 1) as f64;
        }
        let mut q_prev2 = 0.0;
        let mut q_prev = dfact;
        for l in m..=lmax {
            let q = if l == m {
                dfact
            } else if l == m + 1 {
                (2 * m + 1) as f64 * z * dfact
            } else {
                ((2 * l - 1) as f64 * z * q_prev - (l + m - 1) as f64 * q_prev2) / (l - m) as f64
            };
            if l > m {
                q_prev2 = q_prev;
                q_prev = q;
            }
            // (l - m)! / (l + m)!
            let ratio: f64 = ((l - m + 1)..=(l + m)).map(|k| 1.0 / k as f64).product();
            let vals = &mut out[l].values;
            if m == 0 {
                vals[l] = ((2 * l + 1) as f64).sqrt() * q;
            } else {
                let norm = (2.0 * (2 * l + 1) as f64 * ratio).sqrt();
                vals[l + m] = norm * q * cm;
                vals[l - m] = norm * q * sm;
            }
        }
    }
    out
}

/// Real spherical harmonics of degree `l` at a unit vector.
pub fn sph_harm(l: usize, u: UnitVec3) -> Result<SphVec> {
    let mut all = sph_harm_upto(l, u)?;
    Ok(all.pop().expect("degree table is non-empty"))
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut t = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let p = legendre_table(n, t);
            let (pn, pn1) = (p[n], p[n - 1]);
            let dp = n as f64 * (t * pn - pn1) / (t * t - 1.0);
            let step = pn / dp;
            t -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        let p = legendre_table(n, t);
        let dp = n as f64 * (t * p[n] - p[n - 1]) / (t * t - 1.0);
        nodes[i] = t;
        weights[i] = 2.0 / ((1.0 - t * t) * dp * dp);
    }
    (nodes, weights)
}

/// Representation matrices of the fixed rotation `Rx(pi/2)`, which maps the
/// y axis onto the z axis. Computed once by exact quadrature of
/// `(1/4pi) Int Y(Q u) Y(u)^T dOmega`.
fn swap_matrices() -> &'static [DMatrix<f64>] {
    static CACHE: OnceLock<Vec<DMatrix<f64>>> = OnceLock::new();
    CACHE.get_or_init(|| {
        let lmax = MAX_DEGREE;
        let q = Rotation3::about_x(PI / 2.0);
        let (nodes, weights) = gauss_legendre(lmax + 1);
        let nphi = 2 * lmax + 2;
        let mut acc: Vec<DMatrix<f64>> =
            (0..=lmax).map(|l| DMatrix::zeros(2 * l + 1, 2 * l + 1)).collect();
        for (&ct, &wt) in nodes.iter().zip(&weights) {
            let st = (1.0 - ct * ct).max(0.0).sqrt();
            for k in 0..nphi {
                let phi = 2.0 * PI * k as f64 / nphi as f64;
                let v = Vector3::new(st * phi.cos(), st * phi.sin(), ct);
                let rv = q.apply(&v);
                let w = wt * (2.0 * PI / nphi as f64) / (4.0 * PI);
                let ys = sph_harm_raw(lmax, v.x, v.y, v.z);
                let yr = sph_harm_raw(lmax, rv.x, rv.y, rv.z);
                for l in 0..=lmax {
                    let a = nalgebra::DVector::from_column_slice(&yr[l].values);
                    let b = nalgebra::DVector::from_column_slice(&ys[l].values);
                    acc[l].ger(w, &a, &b, 1.0);
                }
            }
        }
        acc
    })
}

/// In place `M <- Dz(angle) M` (row mixing of the `(m, -m)` pairs).
fn z_rotate_rows(l: usize, angle: f64, m: &mut DMatrix<f64>) {
    for k in 1..=l {
        let (s, c) = (k as f64 * angle).sin_cos();
        let (ip, im) = (l + k, l - k);
        for col in 0..m.ncols() {
            let (a, b) = (m[(ip, col)], m[(im, col)]);
            m[(ip, col)] = c * a - s * b;
            m[(im, col)] = s * a + c * b;
        }
    }
}

/// In place `M <- M Dz(angle)` (column mixing of the `(m, -m)` pairs).
fn z_rotate_cols(l: usize, angle: f64, m: &mut DMatrix<f64>) {
    for k in 1..=l {
        let (s, c) = (k as f64 * angle).sin_cos();
        let (ip, im) = (l + k, l - k);
        for row in 0..m.nrows() {
            let (a, b) = (m[(row, ip)], m[(row, im)]);
            m[(row, ip)] = c * a + s * b;
            m[(row, im)] = -s * a + c * b;
        }
    }
}

/// Wigner-D matrix of a rotation in the real spherical-harmonic basis, so that
/// `Y(R u) = D(R) Y(u)`.
///
/// Built as `Dz(alpha) J^T Dz(beta) J Dz(gamma)` from the ZYZ Euler angles,
/// where `J` represents the fixed quarter turn about x.
pub fn wigner_d(l: usize, r: &Rotation3) -> Result<RepMatrix> {
    check_degree(l)?;
    Rotation3::new(*r.matrix())?;
    Ok(wigner_d_unchecked(l, r))
}

pub(crate) fn wigner_d_unchecked(l: usize, r: &Rotation3) -> RepMatrix {
    if l == 0 {
        return RepMatrix::identity(0);
    }
    let (alpha, beta, gamma) = r.euler_zyz();
    let j = &swap_matrices()[l];
    let mut right = j.clone();
    z_rotate_cols(l, gamma, &mut right);
    z_rotate_rows(l, beta, &mut right);
    let mut d = j.transpose() * right;
    z_rotate_rows(l, alpha, &mut d);
    RepMatrix { l, matrix: d }
}

/// `rho^(l)(g) = sigma^(l)(parity) D^(l)(rotation)`.
pub fn o3_rep(l: usize, g: &O3Element) -> Result<RepMatrix> {
    let mut d = wigner_d(l, &g.rotation)?;
    let s = g.parity.sign(l);
    if s < 0.0 {
        d.matrix.neg_mut();
    }
    Ok(d)
}

pub(crate) fn o3_rep_unchecked(l: usize, g: &O3Element) -> RepMatrix {
    let mut d = wigner_d_unchecked(l, &g.rotation);
    if g.parity.sign(l) < 0.0 {
        d.matrix.neg_mut();
    }
    d
}

/// Character of the degree-`l` irrep at a rotation by `angle`:
/// `sin((2l+1) a / 2) / sin(a / 2)`, continuous at `a -> 0`.
pub fn rotation_character(l: usize, angle: f64) -> f64 {
    let half = angle / 2.0;
    if half.sin().abs() < 1e-12 {
        // limit at both 0 and 2pi
        return (2 * l + 1) as f64;
    }
    ((2 * l + 1) as f64 * half).sin() / half.sin()
}
