//! Ellipsoid configuration space: pairs `(A, z)` of a positive-definite
//! shape and a point of the unit ball, its boundary set, the determinant
//! retraction, the antipodal inversion, and sweeps of the modified flow over
//! lattices of initial ellipsoids.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body::{min_enclosing_ellipsoid, EllipsoidSpec};
use crate::error::{Error, Result};
use crate::flow::{run_modified_flow, FlowConfig, FlowStatus};
use crate::sphere::{Point, SphereGrid};

/// Margin by which the entry bound must exceed the largest semi-axis
/// allowed by the volume and eccentricity bounds.
pub const ENTRY_SAFETY: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceParams {
    pub dim: usize,
    /// Volume bounds `vol_bar <= det A <= 1/vol_bar`.
    pub vol_bar: f64,
    pub ecc_bar: f64,
    /// Bound on the largest entry of matrices in the convex superset.
    pub entry_bound: f64,
    pub delta: f64,
    /// Relative tolerance for boundary membership.
    pub tol: f64,
}

impl SpaceParams {
    pub fn new(dim: usize, vol_bar: f64, ecc_bar: f64) -> Result<Self> {
        let entry_bound = ENTRY_SAFETY * ecc_bar * (1.0 / vol_bar).powf(1.0 / dim as f64);
        let p = SpaceParams {
            dim,
            vol_bar,
            ecc_bar,
            entry_bound,
            delta: 0.05,
            tol: 1e-8,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 2 && self.dim != 3 {
            return Err(Error::Dimension(self.dim));
        }
        if !(self.vol_bar > 0.0 && self.vol_bar < 1.0) {
            return Err(Error::Config("vol_bar must lie in (0, 1)".into()));
        }
        if !(self.ecc_bar > 1.0) {
            return Err(Error::Config("ecc_bar must exceed 1".into()));
        }
        let needed = self.ecc_bar * (1.0 / self.vol_bar).powf(1.0 / self.dim as f64);
        if !(self.entry_bound >= needed) {
            return Err(Error::Config(format!(
                "entry bound {} is below {needed}, so the bounded set is not contained in the superset",
                self.entry_bound
            )));
        }
        if !(self.tol > 0.0 && self.delta >= 0.0) {
            return Err(Error::Config(
                "tolerance must be positive and delta nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Point `(A, z)` of the product space.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPoint {
    pub a: DMatrix<f64>,
    pub z: DVector<f64>,
}

impl PairPoint {
    pub fn new(a: DMatrix<f64>, z: DVector<f64>) -> Result<Self> {
        let n = z.len();
        if a.nrows() != n || a.ncols() != n {
            return Err(Error::Precondition(format!("matrix must be {n}x{n}")));
        }
        let scale = a.abs().max().max(1.0);
        if (&a - a.transpose()).abs().max() > 1e-12 * scale {
            return Err(Error::Precondition("matrix is not symmetric".into()));
        }
        if SymmetricEigen::new(a.clone()).eigenvalues.min() <= 0.0 {
            return Err(Error::Precondition(
                "matrix is not positive definite".into(),
            ));
        }
        Ok(PairPoint { a, z })
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }

    /// Eigenvalues in increasing order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        eigenvalues(&self.a)
    }

    pub fn eccentricity(&self) -> f64 {
        let e = self.eigenvalues();
        e[e.len() - 1] / e[0]
    }

    /// Ellipsoid with shape `A` centred at `(1 - 1/n) a_1 z`, which keeps the
    /// origin inside for every `|z| <= 1`.
    pub fn to_ellipsoid(&self) -> Result<EllipsoidSpec> {
        let n = self.dim();
        let offset = (1.0 - 1.0 / n as f64) * self.eigenvalues()[0];
        let mut shape = Matrix3::identity();
        let mut center = Point::zeros();
        for i in 0..n {
            center[i] = offset * self.z[i];
            for j in 0..n {
                shape[(i, j)] = self.a[(i, j)];
            }
        }
        EllipsoidSpec::from_matrix(n, center, shape)
    }

    pub fn from_ellipsoid(e: &EllipsoidSpec) -> Result<Self> {
        let n = e.dim();
        let a = DMatrix::from_fn(n, n, |i, j| e.shape()[(i, j)]);
        let offset = (1.0 - 1.0 / n as f64) * eigenvalues(&a)[0];
        let z = DVector::from_fn(n, |i, _| e.center()[i] / offset);
        PairPoint::new(a, z)
    }
}

fn eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let mut e: Vec<f64> = SymmetricEigen::new(a.clone())
        .eigenvalues
        .iter()
        .copied()
        .collect();
    e.sort_by(f64::total_cmp);
    e
}

/// Which boundary conditions hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryReason {
    UnitOffset,
    MinVolume,
    MaxVolume,
    MaxEccentricity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "reasons", rename_all = "snake_case")]
pub enum Membership {
    Interior,
    OnBoundary(Vec<BoundaryReason>),
    Outside,
}

pub fn membership(point: &PairPoint, params: &SpaceParams) -> Membership {
    let tol = params.tol;
    let close = |a: f64, b: f64| (a - b).abs() <= tol * b.abs().max(1.0);
    let norm = point.z.norm();
    let det = point.a.determinant();
    let ecc = point.eccentricity();
    let (lo, hi) = (params.vol_bar, 1.0 / params.vol_bar);
    let mut reasons = Vec::new();
    if close(norm, 1.0) {
        reasons.push(BoundaryReason::UnitOffset);
    }
    if close(det, lo) {
        reasons.push(BoundaryReason::MinVolume);
    }
    if close(det, hi) {
        reasons.push(BoundaryReason::MaxVolume);
    }
    if close(ecc, params.ecc_bar) {
        reasons.push(BoundaryReason::MaxEccentricity);
    }
    let outside = (norm > 1.0 && !close(norm, 1.0))
        || (det < lo && !close(det, lo))
        || (det > hi && !close(det, hi))
        || (ecc > params.ecc_bar && !close(ecc, params.ecc_bar));
    if outside {
        Membership::Outside
    } else if reasons.is_empty() {
        Membership::Interior
    } else {
        Membership::OnBoundary(reasons)
    }
}

/// Whether `A` lies in the convex superset: entries bounded by the entry
/// bound and eccentricity at most `ecc_bar`.
pub fn in_superset(a: &DMatrix<f64>, params: &SpaceParams) -> bool {
    let e = eigenvalues(a);
    e[0] > 0.0
        && a.abs().max() <= params.entry_bound * (1.0 + params.tol)
        && e[e.len() - 1] <= params.ecc_bar * e[0] * (1.0 + params.tol)
}

/// Root in `(0, 1]` of `det(t I + (1 - t) A) = target` for `det A < target < 1`.
fn segment_root(a: &DMatrix<f64>, target: f64) -> f64 {
    let n = a.nrows();
    let eig = eigenvalues(a);
    // det is the product of t + (1 - t) a_i, monotone in t along the segment
    let root_det = |t: f64| {
        eig.iter()
            .map(|ai| t + (1.0 - t) * ai)
            .product::<f64>()
            .powf(1.0 / n as f64)
    };
    let goal = target.powf(1.0 / n as f64);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let increasing = root_det(1.0) > root_det(0.0);
    while hi - lo > 1e-16 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if (root_det(mid) < goal) == increasing {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// The retraction onto the bounded set: identity when the determinant is in
/// range, otherwise slide along the segment towards the identity (or its
/// inverse counterpart) until the determinant hits the violated bound.
pub fn retract_phi(point: &PairPoint, params: &SpaceParams) -> Result<PairPoint> {
    let n = point.dim();
    if !in_superset(&point.a, params) {
        return Err(Error::Precondition(
            "matrix lies outside the convex superset".into(),
        ));
    }
    if point.z.norm() > 1.0 + params.tol {
        return Err(Error::Precondition(
            "offset lies outside the unit ball".into(),
        ));
    }
    let det = point.a.determinant();
    let identity = DMatrix::<f64>::identity(n, n);
    let a = if det < params.vol_bar {
        let t = segment_root(&point.a, params.vol_bar);
        &identity * t + &point.a * (1.0 - t)
    } else if det > 1.0 / params.vol_bar {
        let inverse = invert(&point.a)?;
        let t = segment_root(&inverse, params.vol_bar);
        invert(&(&identity * t + &inverse * (1.0 - t)))?
    } else {
        return Ok(point.clone());
    };
    let a = (&a + a.transpose()) * 0.5;
    PairPoint::new(a, point.z.clone())
}

fn invert(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let inv = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Precondition("matrix is not positive definite".into()))?
        .inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// `(A, z) -> (A^{-1}, -z)`.
pub fn map_g(point: &PairPoint) -> Result<PairPoint> {
    PairPoint::new(invert(&point.a)?, -&point.z)
}

fn random_rotation<R: Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let g: DMatrix<f64> = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            for i in 0..n {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

fn from_spectrum<R: Rng>(eig: &[f64], rng: &mut R) -> DMatrix<f64> {
    let n = eig.len();
    let q = random_rotation(n, rng);
    let m = &q * DMatrix::from_diagonal(&DVector::from_column_slice(eig)) * q.transpose();
    (&m + m.transpose()) * 0.5
}

/// Random matrix of the convex superset.
pub fn sample_superset<R: Rng>(params: &SpaceParams, rng: &mut R) -> DMatrix<f64> {
    let n = params.dim;
    let ratio = rng.random_range(1.0..params.ecc_bar);
    let mut eig: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..ratio)).collect();
    eig[0] = 1.0;
    eig[n - 1] = ratio;
    // operator norm bounds every entry
    let top = rng.random_range(0.05..1.0) * params.entry_bound;
    let eig: Vec<f64> = eig.iter().map(|e| e * top / ratio).collect();
    from_spectrum(&eig, rng)
}

/// Random boundary point, cycling through the four boundary conditions.
pub fn sample_boundary<R: Rng>(params: &SpaceParams, rng: &mut R) -> Result<PairPoint> {
    let n = params.dim;
    let kind = rng.random_range(0..4);
    let ratio = if kind == 3 {
        params.ecc_bar
    } else {
        rng.random_range(1.0..params.ecc_bar)
    };
    let mut eig: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..ratio)).collect();
    eig[0] = 1.0;
    eig[n - 1] = ratio;
    let raw: f64 = eig.iter().product();
    let det = match kind {
        1 => params.vol_bar,
        2 => 1.0 / params.vol_bar,
        _ => params.vol_bar.powf(rng.random_range(-1.0..1.0)),
    };
    let s = (det / raw).powf(1.0 / n as f64);
    let eig: Vec<f64> = eig.iter().map(|e| e * s).collect();
    let direction: DVector<f64> = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
    let radius = if kind == 0 {
        1.0
    } else {
        rng.random_range(0.0..1.0)
    };
    let z = direction.normalize() * radius;
    PairPoint::new(from_spectrum(&eig, rng), z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub trials: usize,
    pub violations: usize,
    /// Largest `(l a_n + (1-l) b_n) / (l a_1 + (1-l) b_1)` over `ecc_bar`.
    pub worst_bound_ratio: f64,
}

/// Samples `A, B` in the superset and `l` in `[0, 1]`, and checks the
/// combination stays in the superset.
pub fn convexity_probe_d<R: Rng>(
    params: &SpaceParams,
    trials: usize,
    rng: &mut R,
) -> ConvexityReport {
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let a = sample_superset(params, rng);
        let b = sample_superset(params, rng);
        let l: f64 = rng.random_range(0.0..=1.0);
        let c = &a * l + &b * (1.0 - l);
        if !in_superset(&c, params) {
            violations += 1;
        }
        let (ea, eb) = (eigenvalues(&a), eigenvalues(&b));
        let n = params.dim - 1;
        let bound = (l * ea[n] + (1.0 - l) * eb[n]) / (l * ea[0] + (1.0 - l) * eb[0]);
        worst = worst.max(bound / params.ecc_bar);
    }
    ConvexityReport {
        trials,
        violations,
        worst_bound_ratio: worst,
    }
}

/// Axis-aligned lattice: each eccentricity, volume factor (volume `w_n v`)
/// and offset `|z|` along the first axis yields one initial ellipsoid.
pub fn ellipsoid_lattice(
    dim: usize,
    eccentricities: &[f64],
    volumes: &[f64],
    offsets: &[f64],
) -> Result<Vec<EllipsoidSpec>> {
    let mut out = Vec::new();
    for &e in eccentricities {
        for &v in volumes {
            for &r in offsets {
                let mut axes = vec![1.0; dim];
                axes[dim - 1] = e;
                let s = (v / e).powf(1.0 / dim as f64);
                let a = DMatrix::from_diagonal(&DVector::from_iterator(
                    dim,
                    axes.iter().map(|x| x * s),
                ));
                let mut z = DVector::zeros(dim);
                z[0] = r;
                out.push(PairPoint::new(a, z)?.to_ellipsoid()?);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lattice_id: usize,
    pub semi_axes: Vec<f64>,
    pub center: Vec<f64>,
    pub status: String,
    #[serde(rename = "final_J")]
    pub final_j: f64,
    #[serde(rename = "max_J")]
    pub max_j: f64,
    pub min_ellipsoid_distance_to_b1: f64,
    pub t_reached: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub a0: f64,
    pub t_target: f64,
    pub rows: Vec<SweepRow>,
    /// Row with the smallest distance to the unit ball.
    pub best: Option<usize>,
    pub any_below_a0: bool,
}

/// Largest semi-axis deviation from 1 plus the centre norm.
pub fn distance_to_unit_ball(e: &EllipsoidSpec) -> f64 {
    let dev = e
        .semi_axes()
        .iter()
        .map(|a| (a - 1.0).abs())
        .fold(0.0, f64::max);
    dev + e.center().norm()
}

/// Runs the modified flow to `t_target` from every lattice ellipsoid.
pub fn initial_sweep(
    cfg: &FlowConfig,
    params: &SpaceParams,
    lattice: &[EllipsoidSpec],
    t_target: f64,
    grid: &Arc<SphereGrid>,
) -> Result<SweepReport> {
    params.validate()?;
    cfg.validate(grid)?;
    let a0 = match cfg.a0_override {
        Some(a) => a,
        None => crate::flow::default_a0(cfg, grid)?,
    };
    let run_cfg = FlowConfig {
        t_max: t_target,
        a0_override: Some(a0),
        ..cfg.clone()
    };
    let rows: Vec<SweepRow> = lattice
        .par_iter()
        .enumerate()
        .map(|(id, e)| {
            let local = FlowConfig {
                seed: cfg.seed.wrapping_add(id as u64),
                ..run_cfg.clone()
            };
            sweep_row(id, e, &local, grid)
        })
        .collect();
    let best = rows
        .iter()
        .filter(|r| r.min_ellipsoid_distance_to_b1.is_finite())
        .min_by(|a, b| {
            a.min_ellipsoid_distance_to_b1
                .total_cmp(&b.min_ellipsoid_distance_to_b1)
        })
        .map(|r| r.lattice_id);
    let any_below_a0 = rows.iter().any(|r| {
        r.max_j < a0
            && (r.status == "converged" || (r.status == "step_limit" && r.t_reached >= t_target))
    });
    Ok(SweepReport {
        a0,
        t_target,
        rows,
        best,
        any_below_a0,
    })
}

fn sweep_row(id: usize, e: &EllipsoidSpec, cfg: &FlowConfig, grid: &Arc<SphereGrid>) -> SweepRow {
    let n = e.dim();
    let mut row = SweepRow {
        lattice_id: id,
        semi_axes: e.semi_axes(),
        center: e.center().iter().take(n).copied().collect(),
        status: String::new(),
        final_j: f64::NAN,
        max_j: f64::NAN,
        min_ellipsoid_distance_to_b1: f64::NAN,
        t_reached: 0.0,
    };
    let outcome = match run_modified_flow(e, cfg, grid) {
        Ok(o) => o,
        Err(err) => {
            row.status = format!("error: {err}");
            return row;
        }
    };
    row.status = outcome.status.name();
    match &outcome.final_state {
        Some(state) if outcome.status != FlowStatus::StationaryInitial => {
            row.final_j = state.j;
            row.max_j = outcome
                .trajectory
                .iter()
                .map(|r| r.j)
                .fold(f64::NEG_INFINITY, f64::max);
            row.t_reached = state.t;
            row.min_ellipsoid_distance_to_b1 =
                min_enclosing_ellipsoid(n, &state.terms().geometry.points, 1e-7)
                    .map_or(f64::NAN, |m| distance_to_unit_ball(&m));
        }
        _ => {
            row.final_j = outcome.initial_j;
            row.max_j = outcome.initial_j;
            row.min_ellipsoid_distance_to_b1 = distance_to_unit_ball(e);
        }
    }
    row
}
