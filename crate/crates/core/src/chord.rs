//! Chord integrals, dual quermassintegrals and chord measures.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitCircle, UnitSphere};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body::BodyHandle;
use crate::error::{Error, Result};
use crate::sphere::{ball_volume, pairwise_sum, Point, ScalarField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    GrassmannProjection,
    RieszDouble,
    DualQuermassVolume,
    RadialQuadrature,
    XrayQuadrature,
    RieszPotential,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::GrassmannProjection => "grassmann_projection",
            Method::RieszDouble => "riesz_double",
            Method::DualQuermassVolume => "dual_quermass_volume",
            Method::RadialQuadrature => "radial_quadrature",
            Method::XrayQuadrature => "xray_quadrature",
            Method::RieszPotential => "riesz_potential",
        }
    }

    pub const CHORD: [Method; 3] = [
        Method::GrassmannProjection,
        Method::RieszDouble,
        Method::DualQuermassVolume,
    ];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub value: f64,
    pub error_estimate: f64,
    pub method: Method,
    pub samples: u64,
    pub seed: u64,
}

/// Sampling controls for the Monte Carlo estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McOptions {
    pub samples: u64,
    pub seed: u64,
    /// Maximum accepted relative error; `None` disables the check.
    pub tolerance: Option<f64>,
}

impl Default for McOptions {
    fn default() -> Self {
        McOptions {
            samples: 200_000,
            seed: 1,
            tolerance: None,
        }
    }
}

impl McOptions {
    pub fn new(samples: u64, seed: u64) -> Self {
        McOptions {
            samples,
            seed,
            tolerance: None,
        }
    }
}

const BATCH: u64 = 4096;

/// Mean and standard error of `sample` over independent seeded batches,
/// reduced in batch order.
fn monte_carlo<F>(samples: u64, seed: u64, sample: F) -> (f64, f64)
where
    F: Fn(&mut ChaCha8Rng) -> f64 + Sync,
{
    let batches = samples.div_ceil(BATCH).max(1);
    let partial: Vec<(f64, f64, u64)> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b);
            let count = BATCH.min(samples - b * BATCH.min(samples));
            let count = if samples == 0 { 0 } else { count.max(1) };
            let mut mean = 0.0;
            let mut m2 = 0.0;
            for k in 0..count {
                let x = sample(&mut rng);
                let delta = x - mean;
                mean += delta / (k + 1) as f64;
                m2 += delta * (x - mean);
            }
            (mean, m2, count)
        })
        .collect();
    let (mut mean, mut m2, mut n) = (0.0, 0.0, 0u64);
    for (bm, bm2, bn) in partial {
        if bn == 0 {
            continue;
        }
        let total = n + bn;
        let delta = bm - mean;
        mean += delta * bn as f64 / total as f64;
        m2 += bm2 + delta * delta * (n as f64) * (bn as f64) / total as f64;
        n = total;
    }
    let var = if n > 1 { m2 / (n - 1) as f64 } else { 0.0 };
    (mean, (var / n.max(1) as f64).sqrt())
}

fn random_direction(dim: usize, rng: &mut ChaCha8Rng) -> Point {
    if dim == 2 {
        let [x, y]: [f64; 2] = UnitCircle.sample(rng);
        Point::new(x, y, 0.0)
    } else {
        let [x, y, z]: [f64; 3] = UnitSphere.sample(rng);
        Point::new(x, y, z)
    }
}

fn random_in_box(dim: usize, lo: &Point, hi: &Point, rng: &mut ChaCha8Rng) -> Point {
    let mut p = Point::zeros();
    for k in 0..dim {
        p[k] = lo[k] + (hi[k] - lo[k]) * rng.random::<f64>();
    }
    p
}

fn box_volume(dim: usize, lo: &Point, hi: &Point) -> f64 {
    (0..dim).map(|k| hi[k] - lo[k]).product()
}

/// `x^s` with the convention `0^s = 0` for zero-length chords.
fn chord_power(x: f64, s: f64) -> f64 {
    if x > 0.0 {
        x.powf(s)
    } else {
        0.0
    }
}

fn finish(value: f64, error: f64, method: Method, opts: &McOptions) -> Result<EstimatorReport> {
    if !value.is_finite() {
        return Err(Error::Degenerate(format!(
            "{method} produced a non-finite value"
        )));
    }
    if let Some(tol) = opts.tolerance {
        let rel = error / value.abs().max(f64::MIN_POSITIVE);
        if rel > tol {
            return Err(Error::NonConvergence {
                achieved: rel,
                requested: tol,
            });
        }
    }
    Ok(EstimatorReport {
        value,
        error_estimate: error.max(0.0),
        method,
        samples: opts.samples,
        seed: opts.seed,
    })
}

/// Dual quermassintegral `V~_s(K, z) = (1/n) int rho_{K,z}^s`.
pub fn dual_quermass(
    body: &BodyHandle,
    z: &Point,
    s: f64,
    method: Method,
    opts: &McOptions,
) -> Result<EstimatorReport> {
    let n = body.dim();
    let grid = body.grid();
    match method {
        Method::RadialQuadrature => {
            let mut values = Vec::with_capacity(grid.len());
            for u in grid.nodes() {
                let rho = body.radial(z, u)?;
                if rho > 0.0 {
                    values.push(rho.powf(s));
                } else if s < 0.0 {
                    return Err(Error::Precondition(
                        "negative order needs an interior point for the radial form".into(),
                    ));
                } else {
                    values.push(0.0);
                }
            }
            let value = grid.integrate(&values) / n as f64;
            finish(
                value,
                0.0,
                method,
                &McOptions {
                    samples: grid.len() as u64,
                    ..*opts
                },
            )
        }
        Method::XrayQuadrature => {
            if s <= -1.0 {
                return Err(Error::Precondition(
                    "the X-ray form needs order > -1".into(),
                ));
            }
            let gap = body.gap(z);
            let scale = body.circumradius().max(1.0);
            if gap.abs() > 1e-6 * scale {
                return Err(Error::Precondition(format!(
                    "the X-ray form needs a boundary point (gap {gap:.3e})"
                )));
            }
            let values: Vec<f64> = grid
                .nodes()
                .iter()
                .map(|u| chord_power(body.xray(z, u), s))
                .collect();
            let value = grid.integrate(&values) / (2.0 * n as f64);
            finish(
                value,
                0.0,
                method,
                &McOptions {
                    samples: grid.len() as u64,
                    ..*opts
                },
            )
        }
        Method::RieszPotential => {
            if s <= 0.0 {
                return Err(Error::Precondition("the Riesz form needs order > 0".into()));
            }
            let gap = body.gap(z);
            if gap > body.tolerance() {
                return Err(Error::OutsideBody { gap });
            }
            let (lo, hi) = body.bounding_box();
            let reach = farthest_corner(n, &lo, &hi, z);
            let (p, se) = monte_carlo(opts.samples, opts.seed, |rng| {
                let u = random_direction(n, rng);
                let r = reach * rng.random::<f64>().powf(1.0 / s);
                if body.contains(&(z + u * r)) {
                    1.0
                } else {
                    0.0
                }
            });
            let scale = ball_volume(n) * reach.powf(s);
            finish(scale * p, scale * se, method, opts)
        }
        other => Err(Error::Precondition(format!(
            "{other} does not estimate a dual quermassintegral"
        ))),
    }
}

fn farthest_corner(dim: usize, lo: &Point, hi: &Point, z: &Point) -> f64 {
    let mut d = 0.0;
    for k in 0..dim {
        let a = (z[k] - lo[k]).abs().max((hi[k] - z[k]).abs());
        d += a * a;
    }
    d.sqrt()
}

/// Chord integral `I_q(K)` by the requested formula.
pub fn chord_integral(
    body: &BodyHandle,
    q: f64,
    method: Method,
    opts: &McOptions,
) -> Result<EstimatorReport> {
    let (lo, hi) = body.bounding_box();
    chord_integral_in_box(body, q, method, opts, &lo, &hi)
}

/// As [`chord_integral`] with an explicit sampling box, so that several
/// bodies inside the same box share their random numbers.
pub fn chord_integral_in_box(
    body: &BodyHandle,
    q: f64,
    method: Method,
    opts: &McOptions,
    lo: &Point,
    hi: &Point,
) -> Result<EstimatorReport> {
    let n = body.dim();
    match method {
        Method::GrassmannProjection => {
            if q < 0.0 {
                return Err(Error::Precondition(
                    "projection formula needs q >= 0".into(),
                ));
            }
            projection(body, q, opts, lo, hi)
        }
        Method::RieszDouble => {
            if q <= 1.0 {
                return Err(Error::Precondition(
                    "double Riesz formula needs q > 1".into(),
                ));
            }
            let diam = (hi - lo).norm();
            let vol = box_volume(n, lo, hi);
            let (p, se) = monte_carlo(opts.samples, opts.seed, |rng| {
                let z = random_in_box(n, lo, hi, rng);
                let u = random_direction(n, rng);
                let r = diam * rng.random::<f64>().powf(1.0 / (q - 1.0));
                if body.contains(&z) && body.contains(&(z + u * r)) {
                    1.0
                } else {
                    0.0
                }
            });
            let scale = q * diam.powf(q - 1.0) * vol;
            finish(scale * p, scale * se, method, opts)
        }
        Method::DualQuermassVolume => {
            if q <= 0.0 {
                return Err(Error::Precondition("volume formula needs q > 0".into()));
            }
            let vol = box_volume(n, lo, hi);
            let (m, se) = monte_carlo(opts.samples, opts.seed, |rng| {
                let z = random_in_box(n, lo, hi, rng);
                let u = random_direction(n, rng);
                if !body.contains(&z) {
                    return 0.0;
                }
                let rho = body.chord(&z, &u).map_or(0.0, |(_, t)| t.max(0.0));
                chord_power(rho, q - 1.0)
            });
            finish(q * vol * m, q * vol * se, method, opts)
        }
        other => Err(Error::Precondition(format!(
            "{other} does not estimate a chord integral"
        ))),
    }
}

/// `I_q = (1/(n w_n)) int_S int_{K|u^perp} X^q` with directions from the
/// grid quadrature and base points sampled in a square around the body.
fn projection(
    body: &BodyHandle,
    q: f64,
    opts: &McOptions,
    lo: &Point,
    hi: &Point,
) -> Result<EstimatorReport> {
    let n = body.dim();
    let grid = body.grid();
    let centre = (lo + hi) * 0.5;
    let half = (hi - lo).norm() * 0.5;
    let norm = 1.0 / (n as f64 * ball_volume(n));
    let per_dir = (opts.samples / grid.len() as u64).max(1);
    if n == 2 {
        // deterministic midpoint rule on the projection segment
        let integrate = |count: u64| -> f64 {
            let step = 2.0 * half / count as f64;
            let values: Vec<f64> = grid
                .nodes()
                .iter()
                .enumerate()
                .map(|(i, u)| {
                    let e = grid.frame(i)[0];
                    let along: Vec<f64> = (0..count)
                        .map(|k| {
                            let a = -half + (k as f64 + 0.5) * step;
                            chord_power(body.xray(&(centre + e * a), u), q)
                        })
                        .collect();
                    pairwise_sum(&along) * step
                })
                .collect();
            grid.integrate(&values) * norm
        };
        let fine = integrate(per_dir.max(2));
        let coarse = integrate((per_dir / 2).max(1));
        return finish(
            fine,
            (fine - coarse).abs(),
            Method::GrassmannProjection,
            &McOptions {
                samples: per_dir * grid.len() as u64,
                ..*opts
            },
        );
    }
    let area = 4.0 * half * half;
    let rows: Vec<(f64, f64)> = grid
        .nodes()
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(i as u64);
            let [e1, e2] = *grid.frame(i);
            let mut mean = 0.0;
            let mut m2 = 0.0;
            for k in 0..per_dir {
                let a = half * (2.0 * rng.random::<f64>() - 1.0);
                let b = half * (2.0 * rng.random::<f64>() - 1.0);
                let x = chord_power(body.xray(&(centre + e1 * a + e2 * b), u), q);
                let delta = x - mean;
                mean += delta / (k + 1) as f64;
                m2 += delta * (x - mean);
            }
            let var = if per_dir > 1 {
                m2 / (per_dir - 1) as f64
            } else {
                0.0
            };
            (mean * area, var * area * area / per_dir as f64)
        })
        .collect();
    let w = grid.weights();
    let value = pairwise_sum(&rows.iter().zip(w).map(|(r, w)| r.0 * w).collect::<Vec<_>>()) * norm;
    let var = pairwise_sum(
        &rows
            .iter()
            .zip(w)
            .map(|(r, w)| r.1 * w * w)
            .collect::<Vec<_>>(),
    ) * norm
        * norm;
    finish(
        value,
        var.sqrt(),
        Method::GrassmannProjection,
        &McOptions {
            samples: per_dir * grid.len() as u64,
            ..*opts
        },
    )
}

/// Closed form `I_q(B_1)` in R^n: every direction sees chords
/// `2 sqrt(1 - |y|^2)` over the unit disk, so
/// `I_q = int_{B^{n-1}} (2 sqrt(1 - |y|^2))^q dy = 2^q (n-1) w_{n-1} B((n-1)/2, q/2 + 1) / 2`.
pub fn ball_chord_integral(dim: usize, q: f64) -> f64 {
    use statrs::function::beta::beta;
    let n = dim as f64;
    let disk = (n - 1.0) * ball_volume(dim - 1);
    2f64.powf(q) * disk * 0.5 * beta((n - 1.0) / 2.0, q / 2.0 + 1.0)
}

/// Dual quermassintegral of the unit ball at a boundary point:
/// `(1/(2n)) int_S (2 |u . z|)^s du`.
pub fn ball_boundary_dual_quermass(dim: usize, s: f64) -> f64 {
    use statrs::function::beta::beta;
    let n = dim as f64;
    // int_S |u_1|^s du = 2 (n-1) w_{n-1} B((s+1)/2, (n-1)/2) / 2
    let moment = (n - 1.0) * ball_volume(dim - 1) * beta((s + 1.0) / 2.0, (n - 1.0) / 2.0);
    2f64.powf(s) * moment / (2.0 * n)
}

/// How the nonlocal factor is evaluated at the boundary points of a
/// sampled support function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryEvaluator {
    /// Divergence-theorem form over the parametrised boundary, O(N^2).
    #[default]
    BoundaryIntegral,
    /// X-ray quadrature against the Wulff polytope of the samples.
    Xray,
}

/// Boundary data of a smooth convex body given by its support samples.
#[derive(Debug, Clone)]
pub struct BoundaryGeometry {
    pub h: Vec<f64>,
    pub points: Vec<Point>,
    pub det: Vec<f64>,
}

impl BoundaryGeometry {
    pub fn new(h: &ScalarField) -> Result<Self> {
        let d = h.derivatives();
        let ma = h.monge_ampere_det();
        if !ma.flagged.is_empty() {
            return Err(Error::ConvexityLoss { nodes: ma.flagged });
        }
        if h.min() <= 0.0 {
            return Err(Error::Precondition(
                "support values must be positive".into(),
            ));
        }
        Ok(BoundaryGeometry {
            h: h.values().to_vec(),
            points: h.gradient_points(&d),
            det: ma.det.into_values(),
        })
    }
}

/// `V~_s([h], grad h(x_i))` at every node.
pub fn boundary_dual_quermass(
    h: &ScalarField,
    s: f64,
    evaluator: BoundaryEvaluator,
) -> Result<Vec<f64>> {
    let geom = BoundaryGeometry::new(h)?;
    boundary_dual_quermass_with(h, &geom, s, evaluator)
}

pub fn boundary_dual_quermass_with(
    h: &ScalarField,
    geom: &BoundaryGeometry,
    s: f64,
    evaluator: BoundaryEvaluator,
) -> Result<Vec<f64>> {
    if s <= -1.0 {
        return Err(Error::Precondition(
            "boundary dual quermassintegral needs order > -1".into(),
        ));
    }
    let grid = h.grid();
    let n = grid.dim();
    let nodes = grid.nodes();
    let w = grid.weights();
    let values: Vec<f64> = match evaluator {
        BoundaryEvaluator::BoundaryIntegral => {
            let expo = (s - n as f64) / 2.0;
            let flux: Vec<f64> = (0..grid.len()).map(|j| w[j] * geom.det[j]).collect();
            (0..grid.len())
                .into_par_iter()
                .map(|i| {
                    let z = geom.points[i];
                    let terms: Vec<f64> = (0..grid.len())
                        .map(|j| {
                            if j == i {
                                return 0.0;
                            }
                            let d2 = (geom.points[j] - z).norm_squared();
                            if d2 == 0.0 {
                                return 0.0;
                            }
                            flux[j] * (geom.h[j] - z.dot(&nodes[j])) * d2.powf(expo)
                        })
                        .collect();
                    pairwise_sum(&terms) / n as f64 + own_cell(n, flux[i], geom.det[i], s)
                })
                .collect()
        }
        BoundaryEvaluator::Xray => {
            let walker = ExitWalker::new(h);
            (0..grid.len())
                .into_par_iter()
                .map(|i| {
                    let z = geom.points[i];
                    let exits = walker.exit_times(&z, i);
                    let terms: Vec<f64> = (0..grid.len())
                        .map(|j| w[j] * chord_power(exits[j] + exits[walker.antipode[j]], s))
                        .collect();
                    pairwise_sum(&terms) / (2.0 * n as f64)
                })
                .collect()
        }
    };
    if let Some(i) = values.iter().position(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::Degenerate(format!(
            "nonlocal factor failed at node {i}"
        )));
    }
    Ok(values)
}

/// Contribution of a node's own boundary cell, modelled as a flat disk
/// (a segment for n = 2) on a sphere of the local mean radius, where the
/// integrand behaves like `r^2/(2R) r^{s-n}`.
fn own_cell(n: usize, area: f64, det: f64, s: f64) -> f64 {
    if n == 2 {
        let half = 0.5 * area;
        let radius = det;
        half.powf(s + 1.0) / (2.0 * radius * (s + 1.0))
    } else {
        let rho = (area / std::f64::consts::PI).sqrt();
        let radius = det.sqrt();
        std::f64::consts::PI * rho.powf(s + 1.0) / (3.0 * radius * (s + 1.0))
    }
}

/// Exit times of rays against the Wulff polytope `{y : y . x_k <= h_k}`,
/// found by descent over the grid neighbour graph.
pub struct ExitWalker<'a> {
    field: &'a ScalarField,
    second_ring: Vec<Vec<usize>>,
    antipode: Vec<usize>,
}

impl<'a> ExitWalker<'a> {
    pub fn new(field: &'a ScalarField) -> Self {
        let grid = field.grid();
        let second_ring = (0..grid.len())
            .map(|i| {
                let mut s: Vec<usize> = grid.neighbors(i).to_vec();
                for &j in grid.neighbors(i) {
                    for &k in grid.neighbors(j) {
                        if k != i && !s.contains(&k) {
                            s.push(k);
                        }
                    }
                }
                s
            })
            .collect();
        let antipode = grid
            .nodes()
            .iter()
            .map(|x| grid.nearest_node(&-x))
            .collect();
        ExitWalker {
            field,
            second_ring,
            antipode,
        }
    }

    fn time(&self, z: &Point, u: &Point, k: usize) -> f64 {
        let x = self.field.grid().node(k);
        let c = x.dot(u);
        if c > 1e-12 {
            (self.field.values()[k] - z.dot(x)) / c
        } else {
            f64::INFINITY
        }
    }

    /// `min_k (h_k - z.x_k)/(x_k.u)` over `x_k . u > 0`, starting near `start`.
    pub fn exit_time(&self, z: &Point, u: &Point, start: usize) -> (f64, usize) {
        let grid = self.field.grid();
        let mut k = start;
        let mut best = self.time(z, u, k);
        if !best.is_finite() {
            k = grid.nearest_node(u);
            best = self.time(z, u, k);
        }
        loop {
            let mut moved = false;
            for &j in grid.neighbors(k) {
                let t = self.time(z, u, j);
                if t < best {
                    best = t;
                    k = j;
                    moved = true;
                }
            }
            if moved {
                continue;
            }
            for &j in &self.second_ring[k] {
                let t = self.time(z, u, j);
                if t < best {
                    best = t;
                    k = j;
                    moved = true;
                }
            }
            if !moved {
                return (best, k);
            }
        }
    }

    /// Exit times from `z` along every grid direction.
    pub fn exit_times(&self, z: &Point, start: usize) -> Vec<f64> {
        let grid = self.field.grid();
        let mut out = vec![0.0; grid.len()];
        let mut k = start;
        for (j, u) in grid.nodes().iter().enumerate() {
            let (t, at) = self.exit_time(z, u, k);
            out[j] = t;
            k = at;
        }
        out
    }
}

/// Density of a chord measure with respect to the grid quadrature.
#[derive(Debug, Clone)]
pub struct MeasureField {
    pub density: ScalarField,
    pub p: f64,
    pub q: f64,
}

impl MeasureField {
    pub fn total_mass(&self) -> Result<f64> {
        self.density.quadrature()
    }

    /// `int g dF`.
    pub fn integrate(&self, g: &ScalarField) -> f64 {
        let product: Vec<f64> = g
            .values()
            .iter()
            .zip(self.density.values())
            .map(|(a, b)| a * b)
            .collect();
        self.density.grid().integrate(&product)
    }
}

/// Chord measure `F_q` of the body with support samples `h`.
pub fn chord_measure(h: &ScalarField, q: f64) -> Result<MeasureField> {
    chord_measure_with(h, q, BoundaryEvaluator::default())
}

pub fn chord_measure_with(
    h: &ScalarField,
    q: f64,
    evaluator: BoundaryEvaluator,
) -> Result<MeasureField> {
    if q <= 0.0 {
        return Err(Error::Precondition("chord measure needs q > 0".into()));
    }
    let geom = BoundaryGeometry::new(h)?;
    let v = boundary_dual_quermass_with(h, &geom, q - 1.0, evaluator)?;
    let n = h.grid().dim();
    let c = 2.0 * q / ball_volume(n);
    let density: Vec<f64> = v.iter().zip(&geom.det).map(|(v, d)| c * v * d).collect();
    Ok(MeasureField {
        density: ScalarField::new(h.grid().clone(), density)?,
        p: 1.0,
        q,
    })
}

/// L_p chord measure `h^{1-p} dF_q`.
pub fn lp_chord_measure(h: &ScalarField, p: f64, q: f64) -> Result<MeasureField> {
    let base = chord_measure(h, q)?;
    Ok(weight_measure(base, h, p))
}

pub fn weight_measure(base: MeasureField, h: &ScalarField, p: f64) -> MeasureField {
    let density: Vec<f64> = base
        .density
        .values()
        .iter()
        .zip(h.values())
        .map(|(f, hv)| f * hv.powf(1.0 - p))
        .collect();
    MeasureField {
        density: ScalarField::new(h.grid().clone(), density).expect("finite density"),
        p,
        q: base.q,
    }
}

/// `(1/(n+q-1)) int h dF_q`, the boundary form of the chord integral.
pub fn chord_integral_from_measure(h: &ScalarField, measure: &MeasureField) -> f64 {
    let n = h.grid().dim() as f64;
    measure.integrate(h) / (n + measure.q - 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomogeneityReport {
    pub base: f64,
    pub scaled: f64,
    pub ratio: f64,
    pub expected: f64,
    pub deviation: f64,
}

/// `I_q(tK) / I_q(K)` against `t^{n+q-1}`, with common random numbers.
pub fn homogeneity_check(
    body: &BodyHandle,
    q: f64,
    t: f64,
    method: Method,
    opts: &McOptions,
) -> Result<HomogeneityReport> {
    if !(t > 0.0) {
        return Err(Error::Precondition("scale factor must be positive".into()));
    }
    let n = body.dim() as f64;
    let base = chord_integral(body, q, method, opts)?.value;
    let scaled = if t == 1.0 {
        base
    } else {
        chord_integral(&body.scaled(t)?, q, method, opts)?.value
    };
    let ratio = scaled / base;
    let expected = t.powf(n + q - 1.0);
    Ok(HomogeneityReport {
        base,
        scaled,
        ratio,
        expected,
        deviation: (ratio / expected - 1.0).abs(),
    })
}

/// Total-mass scaling of `F_{p,q}` under `h -> t h` against `t^{n+q-p-1}`.
pub fn lp_mass_homogeneity(h: &ScalarField, p: f64, q: f64, t: f64) -> Result<HomogeneityReport> {
    let n = h.grid().dim() as f64;
    let base = lp_chord_measure(h, p, q)?.total_mass()?;
    let scaled = lp_chord_measure(&h.scaled(t), p, q)?.total_mass()?;
    let ratio = scaled / base;
    let expected = t.powf(n + q - p - 1.0);
    Ok(HomogeneityReport {
        base,
        scaled,
        ratio,
        expected,
        deviation: (ratio / expected - 1.0).abs(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub chord_integral: EstimatorReport,
    pub boundary_form: f64,
    pub gap: f64,
}

/// Compares `I_q(K)` with `(1/(n+q-1)) int h dF_q(K)`.
pub fn identity_check(
    body: &BodyHandle,
    q: f64,
    method: Method,
    opts: &McOptions,
) -> Result<IdentityReport> {
    let iq = chord_integral(body, q, method, opts)?;
    let h = body.support_field();
    let measure = chord_measure(h, q)?;
    let boundary_form = chord_integral_from_measure(h, &measure);
    Ok(IdentityReport {
        gap: (iq.value - boundary_form).abs() / iq.value.abs(),
        chord_integral: iq,
        boundary_form,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalReport {
    /// Central difference at step eps.
    pub difference: f64,
    /// Central difference at step eps/2.
    pub half_step: f64,
    /// `int g dF_q`.
    pub measure_side: f64,
    /// Relative change between the two steps.
    pub richardson: f64,
    pub gap: f64,
}

/// Central-difference derivative of `I_q` along Wulff shapes of `h + t g`
/// against `int g dF_q([h])`. The four Wulff shapes share one sampling box
/// and one seed.
pub fn variational_check(
    h: &ScalarField,
    g: &ScalarField,
    q: f64,
    eps: f64,
    opts: &McOptions,
) -> Result<VariationalReport> {
    if !Arc::ptr_eq(h.grid(), g.grid()) {
        return Err(Error::Precondition("h and g must share a grid".into()));
    }
    let shift = g.values().iter().fold(0.0f64, |m, v| m.max(v.abs())) * eps;
    let outer = BodyHandle::wulff(&h.map(|v| v + shift))?;
    let (lo, hi) = outer.bounding_box();
    let iq = |t: f64| -> Result<f64> {
        let values: Vec<f64> = h
            .values()
            .iter()
            .zip(g.values())
            .map(|(a, b)| a + t * b)
            .collect();
        let body = BodyHandle::wulff(&ScalarField::new(h.grid().clone(), values)?)?;
        Ok(chord_integral_in_box(&body, q, Method::GrassmannProjection, opts, &lo, &hi)?.value)
    };
    let difference = (iq(eps)? - iq(-eps)?) / (2.0 * eps);
    let half_step = (iq(eps / 2.0)? - iq(-eps / 2.0)?) / eps;
    let measure = chord_measure(h, q)?;
    let measure_side = measure.integrate(g);
    let richardson = (difference - half_step).abs() / half_step.abs().max(f64::MIN_POSITIVE);
    if richardson > 0.05 {
        return Err(Error::Precondition(format!(
            "step {eps} is outside the linear regime (relative change {richardson:.3e})"
        )));
    }
    Ok(VariationalReport {
        difference,
        half_step,
        measure_side,
        richardson,
        gap: (half_step - measure_side).abs() / measure_side.abs().max(f64::MIN_POSITIVE),
    })
}

/// `I_q(E) / (a_2 ... a_n a_1^q)` for semi-axes `a_1 <= ... <= a_n`.
pub fn iq_lower_bound_ratio(
    body: &BodyHandle,
    axes: &[f64],
    q: f64,
    opts: &McOptions,
) -> Result<f64> {
    if q <= 1.0 {
        return Err(Error::Precondition(
            "the lower bound ratio needs q > 1".into(),
        ));
    }
    let iq = chord_integral(body, q, Method::GrassmannProjection, opts)?.value;
    let mut a = axes.to_vec();
    a.sort_by(f64::total_cmp);
    let denom: f64 = a[1..].iter().product::<f64>() * a[0].powf(q);
    Ok(iq / denom)
}
