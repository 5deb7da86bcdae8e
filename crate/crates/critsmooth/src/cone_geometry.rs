//! Linear algebra on the nonnegative cone: directions in the positive part of
//! the unit sphere, nonnegative matrices, the projective action, norms and
//! Perron eigenpairs.

use std::collections::HashMap;
use std::f64::consts::FRAC_PI_2;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-12;
const PERRON_BUDGET: usize = 100_000;

/// A point of the positive part of the unit sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Direction(DVector<f64>);

impl Direction {
    /// Checks the unit-norm and sign invariants, then removes rounding noise.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        let v = DVector::from_vec(coords);
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::BadDirection(format!("negative or non-finite coordinate in {:?}", v.as_slice())));
        }
        let n = v.norm();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::BadDirection(format!("norm {n} is not 1")));
        }
        Self::normalize(v)
    }

    /// Normalizes a nonnegative nonzero vector.
    pub fn normalize(v: DVector<f64>) -> Result<Self> {
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::BadDirection(format!("negative or non-finite coordinate in {:?}", v.as_slice())));
        }
        let n = v.norm();
        if n == 0.0 {
            return Err(Error::ZeroImage);
        }
        // leave already-unit vectors untouched so normalization is idempotent
        if (n - 1.0).abs() <= 2.0 * f64::EPSILON {
            return Ok(Direction(v));
        }
        Ok(Direction(v / n))
    }

    pub fn from_slice(coords: &[f64]) -> Result<Self> {
        Self::normalize(DVector::from_column_slice(coords))
    }

    pub(crate) fn from_unit_unchecked(v: DVector<f64>) -> Self {
        Direction(v)
    }

    pub fn basis(d: usize, i: usize) -> Self {
        let mut v = DVector::zeros(d);
        v[i] = 1.0;
        Direction(v)
    }

    /// (1,…,1)/√d
    pub fn diagonal(d: usize) -> Self {
        Direction(DVector::from_element(d, 1.0 / (d as f64).sqrt()))
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Direction) -> f64 {
        self.0.dot(&other.0)
    }

    /// Angle from the first basis vector (d = 2).
    pub fn angle(&self) -> f64 {
        self.0[1].atan2(self.0[0])
    }

    pub fn is_interior(&self) -> bool {
        self.0.iter().all(|x| *x > 0.0)
    }
}

impl TryFrom<Vec<f64>> for Direction {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Direction::normalize(DVector::from_vec(v))
    }
}

impl From<Direction> for Vec<f64> {
    fn from(d: Direction) -> Vec<f64> {
        d.0.as_slice().to_vec()
    }
}

/// A square matrix with nonnegative entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeMatrix(DMatrix<f64>);

impl ConeMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::InvalidModel(format!("matrix is {}x{}, not square", m.nrows(), m.ncols())));
        }
        if m.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidModel("matrix has a negative or non-finite entry".into()));
        }
        Ok(ConeMatrix(m))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidModel("matrix rows must form a nonempty square".into()));
        }
        Self::new(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
    }

    pub(crate) fn from_raw(m: DMatrix<f64>) -> Self {
        ConeMatrix(m)
    }

    pub fn identity(d: usize) -> Self {
        ConeMatrix(DMatrix::identity(d, d))
    }

    /// scale · v wᵀ
    pub fn rank_one(scale: f64, v: &Direction, w: &Direction) -> Self {
        ConeMatrix(v.coords() * w.coords().transpose() * scale)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim()).map(|i| self.0.row(i).iter().copied().collect()).collect()
    }

    pub fn transpose(&self) -> Self {
        ConeMatrix(self.0.transpose())
    }

    pub fn mul(&self, other: &ConeMatrix) -> Self {
        ConeMatrix(&self.0 * &other.0)
    }

    pub fn scaled(&self, c: f64) -> Self {
        ConeMatrix(&self.0 * c)
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.0 * x
    }

    /// aᵀx without forming the transpose.
    pub fn apply_transpose(&self, x: &DVector<f64>) -> DVector<f64> {
        self.0.tr_mul(x)
    }

    pub fn max_entry(&self) -> f64 {
        self.0.max()
    }

    pub fn min_entry(&self) -> f64 {
        self.0.min()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|x| *x == 0.0)
    }

    pub fn is_positive(&self) -> bool {
        self.0.iter().all(|x| *x > 0.0)
    }

    /// No zero row and no zero column.
    pub fn is_allowable(&self) -> bool {
        let d = self.dim();
        (0..d).all(|i| self.0.row(i).iter().any(|x| *x > 0.0)) && (0..d).all(|j| self.0.column(j).iter().any(|x| *x > 0.0))
    }

    pub fn frobenius(&self) -> f64 {
        self.0.norm()
    }

    /// Operator norm induced by the Euclidean norm.
    pub fn op_norm(&self) -> f64 {
        op_norm(&self.0)
    }
}

pub(crate) fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 2 && m.ncols() == 2 {
        let (a, b, c, d) = (m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
        let t = a * a + b * b + c * c + d * d;
        let det = a * d - b * c;
        let disc = (t * t - 4.0 * det * det).max(0.0).sqrt();
        ((t + disc) / 2.0).sqrt()
    } else {
        m.clone().singular_values().max()
    }
}

/// Projective action: (au/|au|, −log|au|).
pub fn act(a: &ConeMatrix, u: &Direction) -> Result<(Direction, f64)> {
    polar(a.apply(u.coords()))
}

/// Splits a nonnegative vector into its direction and −log of its length.
pub(crate) fn polar(x: DVector<f64>) -> Result<(Direction, f64)> {
    let n = x.norm();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroImage);
    }
    Ok((Direction(x / n), -n.ln()))
}

/// (‖a‖, ι(a)) with ι(a) the minimum of |au| over the positive unit sphere.
pub fn norms(a: &ConeMatrix) -> (f64, f64) {
    (a.op_norm(), iota(a))
}

/// The minimum of the quadratic form uᵀ(aᵀa)u over the nonnegative unit
/// sphere is attained at a positive eigenvector of a principal submatrix, so
/// enumerating faces gives ι exactly.
fn iota(a: &ConeMatrix) -> f64 {
    let d = a.dim();
    let q = a.0.transpose() * &a.0;
    let mut best = f64::INFINITY;
    for mask in 1u32..(1u32 << d) {
        let idx: Vec<usize> = (0..d).filter(|i| mask & (1 << i) != 0).collect();
        let k = idx.len();
        let sub = DMatrix::from_fn(k, k, |i, j| q[(idx[i], idx[j])]);
        let eig = SymmetricEigen::new(sub);
        for c in 0..k {
            let mut v = eig.eigenvectors.column(c).into_owned();
            if v.sum() < 0.0 {
                v.neg_mut();
            }
            if v.iter().any(|x| *x < -1e-10) {
                continue;
            }
            let mut u = DVector::zeros(d);
            for (i, &ix) in idx.iter().enumerate() {
                u[ix] = v[i].max(0.0);
            }
            let n = u.norm();
            if n == 0.0 {
                continue;
            }
            best = best.min((&a.0 * (u / n)).norm());
        }
    }
    best
}

/// Dominant eigenpair of a strictly positive matrix by power iteration.
pub fn perron(a: &ConeMatrix) -> Result<(f64, Direction)> {
    if !a.is_positive() {
        return Err(Error::NotStrictlyPositive);
    }
    let d = a.dim();
    let mut x = DVector::from_element(d, 1.0 / (d as f64).sqrt());
    for _ in 0..PERRON_BUDGET {
        let y = a.apply(&x);
        let lambda = x.dot(&y);
        if (&y - &x * lambda).norm() <= 1e-13 * lambda {
            return Ok((lambda, Direction(&x / x.norm())));
        }
        x = &y / y.norm();
    }
    Err(Error::NoConvergence { what: "perron power iteration", iterations: PERRON_BUDGET })
}

/// Deterministic grid on the positive unit sphere containing every basis vector.
pub fn sphere_grid(d: usize, resolution: usize) -> Result<Vec<Direction>> {
    if resolution < 2 {
        return Err(Error::BadResolution(resolution));
    }
    if d < 2 {
        return Err(Error::InvalidModel(format!("dimension {d} below 2")));
    }
    if d == 2 {
        let step = FRAC_PI_2 / (resolution - 1) as f64;
        return Ok((0..resolution)
            .map(|k| {
                if k == 0 {
                    Direction::basis(2, 0)
                } else if k == resolution - 1 {
                    Direction::basis(2, 1)
                } else {
                    let t = k as f64 * step;
                    Direction(DVector::from_vec(vec![t.cos(), t.sin()]))
                }
            })
            .collect());
    }
    Ok(simplex_lattice(d, resolution)
        .into_iter()
        .map(|p| {
            let v = DVector::from_iterator(d, p.iter().map(|&i| i as f64));
            let n = v.norm();
            Direction(v / n)
        })
        .collect())
}

/// Nonnegative integer points with coordinate sum `total`, first coordinate descending.
fn simplex_lattice(d: usize, total: usize) -> Vec<Vec<usize>> {
    fn rec(d: usize, rest: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == d - 1 {
            prefix.push(rest);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for i in (0..=rest).rev() {
            prefix.push(i);
            rec(d, rest - i, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(d, total, &mut Vec::new(), &mut out);
    out
}

/// A sphere grid with lookup structures: exact matching, nearest point and
/// interpolation weights.
#[derive(Debug, Clone)]
pub struct DirectionGrid {
    d: usize,
    resolution: usize,
    points: Vec<Direction>,
    /// d = 2: (angle, index) sorted by angle.
    by_angle: Vec<(f64, usize)>,
    /// d ≥ 3: lattice coordinates of the base grid.
    lattice: HashMap<Vec<usize>, usize>,
}

impl DirectionGrid {
    /// `sphere_grid(d, resolution)` followed by `extra` points not already present.
    pub fn new(d: usize, resolution: usize, extra: &[Direction]) -> Result<Self> {
        let mut points = sphere_grid(d, resolution)?;
        let mut lattice = HashMap::new();
        if d >= 3 {
            for (i, p) in simplex_lattice(d, resolution).into_iter().enumerate() {
                lattice.insert(p, i);
            }
        }
        let mut grid = DirectionGrid { d, resolution, points: Vec::new(), by_angle: Vec::new(), lattice };
        grid.points.append(&mut points);
        grid.rebuild_angles();
        for e in extra {
            if e.dim() != d {
                return Err(Error::InvalidModel("extra grid point has wrong dimension".into()));
            }
            if grid.exact_index(e.coords()).is_none() {
                grid.points.push(e.clone());
                grid.rebuild_angles();
            }
        }
        Ok(grid)
    }

    fn rebuild_angles(&mut self) {
        if self.d == 2 {
            self.by_angle = self.points.iter().enumerate().map(|(i, p)| (p.angle(), i)).collect();
            self.by_angle.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Direction] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &Direction {
        &self.points[i]
    }

    /// Index of a grid point within 1e-12 of the unit vector `u`.
    pub fn exact_index(&self, u: &DVector<f64>) -> Option<usize> {
        let i = self.nearest(u);
        ((&self.points[i].0 - u).norm() <= UNIT_TOL).then_some(i)
    }

    /// Nearest grid point to the unit vector `u`.
    pub fn nearest(&self, u: &DVector<f64>) -> usize {
        if self.d == 2 {
            let a = u[1].atan2(u[0]);
            let pos = self.by_angle.partition_point(|(t, _)| *t < a);
            let mut best = (f64::INFINITY, 0);
            for k in pos.saturating_sub(1)..(pos + 1).min(self.by_angle.len()) {
                let diff = (self.by_angle[k].0 - a).abs();
                if diff < best.0 {
                    best = (diff, self.by_angle[k].1);
                }
            }
            best.1
        } else {
            let mut best = (f64::INFINITY, 0);
            for (i, p) in self.points.iter().enumerate() {
                let dist = (&p.0 - u).norm_squared();
                if dist < best.0 {
                    best = (dist, i);
                }
            }
            best.1
        }
    }

    /// Interpolation weights at `u`: linear in angle for d = 2, barycentric on
    /// the Kuhn subdivision of the simplex lattice for d ≥ 3.
    pub fn interpolation(&self, u: &DVector<f64>) -> Vec<(usize, f64)> {
        if let Some(i) = self.exact_index(u) {
            return vec![(i, 1.0)];
        }
        if self.d == 2 {
            let a = u[1].atan2(u[0]);
            let pos = self.by_angle.partition_point(|(t, _)| *t < a);
            if pos == 0 {
                return vec![(self.by_angle[0].1, 1.0)];
            }
            if pos >= self.by_angle.len() {
                return vec![(self.by_angle[self.by_angle.len() - 1].1, 1.0)];
            }
            let (a0, i0) = self.by_angle[pos - 1];
            let (a1, i1) = self.by_angle[pos];
            let w = (a - a0) / (a1 - a0);
            return vec![(i0, 1.0 - w), (i1, w)];
        }
        self.kuhn_weights(u)
    }

    fn kuhn_weights(&self, u: &DVector<f64>) -> Vec<(usize, f64)> {
        let d = self.d;
        let total = self.resolution as f64;
        let y: Vec<f64> = u.iter().map(|x| x / u.sum() * total).collect();
        // cumulative coordinates c_k = y_1 + … + y_k, k < d
        let mut c = Vec::with_capacity(d - 1);
        let mut acc = 0.0;
        for yi in y.iter().take(d - 1) {
            acc += yi;
            c.push(acc.min(total));
        }
        let top = self.resolution;
        let base: Vec<usize> = c.iter().map(|x| (x.floor() as usize).min(top)).collect();
        let frac: Vec<f64> = c.iter().zip(&base).map(|(x, b)| if *b == top { 0.0 } else { x - *b as f64 }).collect();
        let mut order: Vec<usize> = (0..d - 1).collect();
        // descending fractional part; ties broken toward the larger index keeps vertices monotone
        order.sort_by(|&i, &j| frac[j].total_cmp(&frac[i]).then(j.cmp(&i)));
        let mut vertex = base.clone();
        let mut out = Vec::with_capacity(d);
        let mut prev = 1.0;
        let to_index = |v: &[usize]| -> Option<usize> {
            let mut p = Vec::with_capacity(d);
            let mut last = 0usize;
            for &ck in v {
                p.push(ck.checked_sub(last)?);
                last = ck;
            }
            p.push(top.checked_sub(last)?);
            self.lattice.get(&p).copied()
        };
        for &k in &order {
            let w = prev - frac[k];
            if w > 0.0 {
                if let Some(i) = to_index(&vertex) {
                    out.push((i, w));
                }
            }
            prev = frac[k];
            vertex[k] += 1;
        }
        if prev > 0.0 {
            if let Some(i) = to_index(&vertex) {
                out.push((i, prev));
            }
        }
        let s: f64 = out.iter().map(|(_, w)| w).sum();
        if out.is_empty() || s <= 0.0 {
            return vec![(self.nearest(u), 1.0)];
        }
        out.into_iter().map(|(i, w)| (i, w / s)).collect()
    }
}
