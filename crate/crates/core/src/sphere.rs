//! Spherical grids on S^{n-1} for n = 2, 3, quadrature, and the discrete
//! differential operators acting on support functions.
//!
//! Derivatives are reconstructed in the gnomonic chart of every node: a
//! function `h` on the sphere, extended 1-homogeneously to `H`, restricts to
//! the tangent plane `x0 + u` as `phi(u) = h(y) / (x0 . y)` with
//! `y = (x0 + u)/|x0 + u|`. Then `D phi(0)` is the spherical gradient and
//! `D^2 phi(0) = Hess h + h I`, the matrix whose determinant is the
//! reciprocal Gauss curvature. The local least-squares basis contains
//! `sqrt(1 + |u|^2) - 1`, which makes every ball and every linear function
//! exact.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, Matrix2, SymmetricEigen, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = Vector3<f64>;

/// Eigenvalue floor below which a node is flagged as non-convex.
pub const CONVEXITY_FLOOR: f64 = 1e-8;

/// Condition number above which a local least-squares stencil is reported.
const STENCIL_CONDITION_LIMIT: f64 = 1e10;

/// Volume of the unit ball in R^n.
pub fn ball_volume(dim: usize) -> f64 {
    match dim {
        1 => return 2.0,
        2 => return std::f64::consts::PI,
        3 => return 4.0 * std::f64::consts::PI / 3.0,
        _ => {}
    }
    let half = dim as f64 / 2.0;
    std::f64::consts::PI.powf(half) / statrs::function::gamma::gamma(half + 1.0)
}

/// Surface measure of S^{n-1}, i.e. n * omega_n.
pub fn sphere_area(dim: usize) -> f64 {
    dim as f64 * ball_volume(dim)
}

/// Sum in a fixed pairwise order, independent of how the inputs were produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Least-squares reconstruction rows for one node.
#[derive(Debug, Clone)]
struct LocalOperator {
    stencil: Vec<usize>,
    /// `1 / (x0 . x_j)` for every stencil node.
    gnomonic_scale: Vec<f64>,
    /// Rows producing (g1, g2, m11, m12, m22) from `h_j / (x0 . x_j) - h_0`.
    rows: [Vec<f64>; 5],
}

#[derive(Debug, Clone)]
pub struct SphereGrid {
    dim: usize,
    resolution: usize,
    nodes: Vec<Point>,
    weights: Vec<f64>,
    frames: Vec<[Point; 2]>,
    ring: Vec<Vec<usize>>,
    faces: Vec<[usize; 3]>,
    incident: Vec<Vec<usize>>,
    operators: Vec<LocalOperator>,
    ill_conditioned: Vec<usize>,
    spacing: f64,
    covering_radius: f64,
}

impl SphereGrid {
    /// Builds a grid. For `dim = 2` the resolution is the node count of a
    /// uniform angular grid (at least 8); for `dim = 3` it is the icosphere
    /// subdivision level (1 to 7).
    pub fn new(dim: usize, resolution: usize) -> Result<Self> {
        match dim {
            2 => {
                if resolution < 8 {
                    return Err(Error::Resolution { dim, resolution });
                }
                Ok(Self::circle(resolution))
            }
            3 => {
                if !(1..=7).contains(&resolution) {
                    return Err(Error::Resolution { dim, resolution });
                }
                Ok(Self::icosphere(resolution))
            }
            other => Err(Error::Dimension(other)),
        }
    }

    /// Same grid with every tangent frame rotated by a random angle.
    pub fn with_random_frames(&self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for (frame, x) in out.frames.iter_mut().zip(&self.nodes) {
            if self.dim == 2 {
                if rng.random_bool(0.5) {
                    frame[0] = -frame[0];
                }
            } else {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let (s, c) = angle.sin_cos();
                let e1 = frame[0] * c + frame[1] * s;
                frame[0] = e1;
                frame[1] = x.cross(&e1);
            }
        }
        if self.dim == 3 {
            let (ops, bad) = build_operators(&out.nodes, &out.frames, &out.stencils());
            out.operators = ops;
            out.ill_conditioned = bad;
        }
        out
    }

    fn circle(count: usize) -> Self {
        let step = std::f64::consts::TAU / count as f64;
        let nodes: Vec<Point> = (0..count)
            .map(|i| {
                let (s, c) = (i as f64 * step).sin_cos();
                Point::new(c, s, 0.0)
            })
            .collect();
        let frames = nodes
            .iter()
            .map(|x| [Point::new(-x.y, x.x, 0.0), Point::zeros()])
            .collect();
        let ring = (0..count)
            .map(|i| vec![(i + count - 1) % count, (i + 1) % count])
            .collect();
        SphereGrid {
            dim: 2,
            resolution: count,
            weights: vec![step; count],
            nodes,
            frames,
            ring,
            faces: Vec::new(),
            incident: Vec::new(),
            operators: Vec::new(),
            ill_conditioned: Vec::new(),
            spacing: step,
            covering_radius: step / 2.0,
        }
    }

    fn icosphere(level: usize) -> Self {
        let (nodes, faces) = icosphere_mesh(level);
        let count = nodes.len();
        let mut incident: Vec<Vec<usize>> = vec![Vec::new(); count];
        let mut ring: Vec<Vec<usize>> = vec![Vec::new(); count];
        for (f, tri) in faces.iter().enumerate() {
            for k in 0..3 {
                incident[tri[k]].push(f);
                for m in 0..3 {
                    if m != k && !ring[tri[k]].contains(&tri[m]) {
                        ring[tri[k]].push(tri[m]);
                    }
                }
            }
        }
        for r in ring.iter_mut() {
            r.sort_unstable();
        }
        let frames: Vec<[Point; 2]> = nodes.iter().map(default_frame).collect();

        // Spherical Voronoi cells: circumcentres of the incident triangles,
        // ordered around the node.
        let circumcentres: Vec<Point> = faces
            .iter()
            .map(|t| {
                let (a, b, c) = (nodes[t[0]], nodes[t[1]], nodes[t[2]]);
                let mut cc = (b - a).cross(&(c - a)).normalize();
                if cc.dot(&(a + b + c)) < 0.0 {
                    cc = -cc;
                }
                cc
            })
            .collect();
        let weights: Vec<f64> = (0..count)
            .map(|i| {
                let x = nodes[i];
                let [e1, e2] = frames[i];
                let mut cell: Vec<(f64, Point)> = incident[i]
                    .iter()
                    .map(|&f| {
                        let c = circumcentres[f];
                        (c.dot(&e2).atan2(c.dot(&e1)), c)
                    })
                    .collect();
                cell.sort_by(|a, b| a.0.total_cmp(&b.0));
                (0..cell.len())
                    .map(|k| spherical_triangle_area(&x, &cell[k].1, &cell[(k + 1) % cell.len()].1))
                    .sum()
            })
            .collect();

        let spacing = {
            let mut total = 0.0;
            let mut edges = 0usize;
            for (i, r) in ring.iter().enumerate() {
                for &j in r {
                    total += nodes[i].dot(&nodes[j]).clamp(-1.0, 1.0).acos();
                    edges += 1;
                }
            }
            total / edges as f64
        };

        let covering_radius = faces
            .iter()
            .zip(&circumcentres)
            .map(|(t, c)| nodes[t[0]].dot(c).clamp(-1.0, 1.0).acos())
            .fold(0.0, f64::max);

        let mut grid = SphereGrid {
            dim: 3,
            resolution: level,
            nodes,
            weights,
            frames,
            ring,
            faces,
            incident,
            operators: Vec::new(),
            ill_conditioned: Vec::new(),
            spacing,
            covering_radius,
        };
        let (ops, bad) = build_operators(&grid.nodes, &grid.frames, &grid.stencils());
        grid.operators = ops;
        grid.ill_conditioned = bad;
        grid
    }

    /// Neighbourhoods of `STENCIL_RINGS` rings (excluding the node itself), sorted.
    fn stencils(&self) -> Vec<Vec<usize>> {
        (0..self.nodes.len())
            .map(|i| {
                let mut s: Vec<usize> = self.ring[i].clone();
                let mut frontier = s.clone();
                for _ in 1..STENCIL_RINGS {
                    let mut next = Vec::new();
                    for &j in &frontier {
                        for &k in &self.ring[j] {
                            if k != i && !s.contains(&k) {
                                s.push(k);
                                next.push(k);
                            }
                        }
                    }
                    frontier = next;
                }
                s.sort_unstable();
                s
            })
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &Point {
        &self.nodes[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn frame(&self, i: usize) -> &[Point; 2] {
        &self.frames[i]
    }

    /// Immediate neighbours of node `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.ring[i]
    }

    /// Mean geodesic distance between neighbouring nodes.
    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Largest angle between any direction and its nearest node.
    pub fn covering_radius(&self) -> f64 {
        self.covering_radius
    }

    /// Nodes spanning a cone that contains the direction `x`: a mesh
    /// triangle for n = 3, the two bracketing nodes for n = 2.
    pub fn enclosing_cell(&self, x: &Point) -> Vec<usize> {
        let near = self.nearest_node(x);
        if self.dim == 2 {
            let count = self.len();
            let e1 = self.frames[near][0];
            let side =
                x.dot(&e1) * (self.nodes[near].x * e1.y - self.nodes[near].y * e1.x).signum();
            return if side >= 0.0 {
                vec![near, (near + 1) % count]
            } else {
                vec![(near + count - 1) % count, near]
            };
        }
        let mut best = (f64::NEG_INFINITY, 0usize);
        for &f in &self.incident[near] {
            let [a, b, c] = self.faces[f];
            let (na, nb, nc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
            // smallest barycentric-like coordinate; the containing face has it >= 0
            let m = nalgebra::Matrix3::from_columns(&[na, nb, nc]);
            let lam = m.lu().solve(x).unwrap_or_else(Point::zeros);
            let score = lam.min();
            if score > best.0 {
                best = (score, f);
            }
        }
        self.faces[best.1].to_vec()
    }

    /// Nodes whose least-squares stencil is badly conditioned.
    pub fn ill_conditioned(&self) -> &[usize] {
        &self.ill_conditioned
    }

    /// Index of the node closest to the direction `x` (need not be unit).
    pub fn nearest_node(&self, x: &Point) -> usize {
        if self.dim == 2 {
            let step = std::f64::consts::TAU / self.len() as f64;
            let angle = x.y.atan2(x.x).rem_euclid(std::f64::consts::TAU);
            return ((angle / step).round() as usize) % self.len();
        }
        self.walk_to(0, x)
    }

    /// Greedy walk over the neighbour graph maximising `node . x`.
    pub fn walk_to(&self, start: usize, x: &Point) -> usize {
        let mut best = start;
        let mut best_dot = self.nodes[best].dot(x);
        loop {
            let mut moved = false;
            for &j in &self.ring[best] {
                let d = self.nodes[j].dot(x);
                if d > best_dot {
                    best_dot = d;
                    best = j;
                    moved = true;
                }
            }
            if !moved {
                return best;
            }
        }
    }

    /// Tangent vector with frame coordinates `g` at node `i`.
    pub fn tangent_vector(&self, i: usize, g: &Vector2<f64>) -> Point {
        let [e1, e2] = self.frames[i];
        if self.dim == 2 {
            e1 * g.x
        } else {
            e1 * g.x + e2 * g.y
        }
    }

    /// Weighted sum of per-node values in fixed pairwise order.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        let products: Vec<f64> = values
            .iter()
            .zip(&self.weights)
            .map(|(v, w)| v * w)
            .collect();
        pairwise_sum(&products)
    }

    pub fn snapshot(&self, values: Option<&[f64]>) -> GridSnapshot {
        GridSnapshot {
            dim: self.dim,
            resolution: self.resolution,
            nodes: self
                .nodes
                .iter()
                .map(|x| x.iter().take(self.dim).copied().collect())
                .collect(),
            weights: self.weights.clone(),
            values: values.map(|v| v.to_vec()),
        }
    }
}

fn default_frame(x: &Point) -> [Point; 2] {
    let axis = if x.x.abs() <= x.y.abs() && x.x.abs() <= x.z.abs() {
        Point::x()
    } else if x.y.abs() <= x.z.abs() {
        Point::y()
    } else {
        Point::z()
    };
    let e1 = (axis - x * axis.dot(x)).normalize();
    [e1, x.cross(&e1)]
}

/// Area of the spherical triangle with unit vertices a, b, c.
fn spherical_triangle_area(a: &Point, b: &Point, c: &Point) -> f64 {
    let numer = a.dot(&b.cross(c)).abs();
    let denom = 1.0 + a.dot(b) + b.dot(c) + c.dot(a);
    2.0 * numer.atan2(denom)
}

fn icosphere_mesh(level: usize) -> (Vec<Point>, Vec<[usize; 3]>) {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let raw = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ];
    let mut nodes: Vec<Point> = raw
        .iter()
        .map(|&(x, y, z)| Point::new(x, y, z).normalize())
        .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, nodes: &mut Vec<Point>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                nodes.push(((nodes[a] + nodes[b]) * 0.5).normalize());
                nodes.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut nodes);
            let bc = midpoint(b, c, &mut nodes);
            let ca = midpoint(c, a, &mut nodes);
            next.push([a, ab, ca]);
            next.push([b, bc, ab]);
            next.push([c, ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }
    (nodes, faces)
}

/// Number of least-squares basis functions: linear (2), quadratic (3), cubic (4), quartic (5).
const BASIS: usize = 14;

/// Rings of neighbours used by the least-squares fit.
const STENCIL_RINGS: usize = 3;

fn build_operators(
    nodes: &[Point],
    frames: &[[Point; 2]],
    stencils: &[Vec<usize>],
) -> (Vec<LocalOperator>, Vec<usize>) {
    let results: Vec<(LocalOperator, bool)> = (0..nodes.len())
        .into_par_iter()
        .map(|i| local_operator(&nodes[i], &frames[i], &stencils[i], nodes))
        .collect();
    let mut bad = Vec::new();
    let ops = results
        .into_iter()
        .enumerate()
        .map(|(i, (op, ok))| {
            if !ok {
                bad.push(i);
            }
            op
        })
        .collect();
    (ops, bad)
}

fn local_operator(
    x0: &Point,
    frame: &[Point; 2],
    stencil: &[usize],
    nodes: &[Point],
) -> (LocalOperator, bool) {
    let m = stencil.len();
    let mut coords = Vec::with_capacity(m);
    let mut scale = Vec::with_capacity(m);
    for &j in stencil {
        let xj = nodes[j];
        let c = x0.dot(&xj);
        let p = xj / c - x0;
        coords.push(Vector2::new(p.dot(&frame[0]), p.dot(&frame[1])));
        scale.push(1.0 / c);
    }
    let radius = coords.iter().map(|u| u.norm()).fold(0.0, f64::max);
    let mut basis = DMatrix::<f64>::zeros(m, BASIS);
    let mut weights = Vec::with_capacity(m);
    for (r, u) in coords.iter().enumerate() {
        let (a, b) = (u.x / radius, u.y / radius);
        let radial = ((1.0 + u.norm_squared()).sqrt() - 1.0) / (radius * radius);
        let row = [
            a,
            b,
            radial,
            0.5 * (a * a - b * b),
            a * b,
            a * a * a,
            a * a * b,
            a * b * b,
            b * b * b,
            a * a * a * a,
            a * a * a * b,
            a * a * b * b,
            a * b * b * b,
            b * b * b * b,
        ];
        for (k, v) in row.iter().enumerate() {
            basis[(r, k)] = *v;
        }
        weights.push((-(u.norm() / radius).powi(2)).exp());
    }
    let mut weighted = basis.clone();
    for r in 0..m {
        for k in 0..BASIS {
            weighted[(r, k)] *= weights[r];
        }
    }
    let normal = basis.transpose() * &weighted;
    let eig = SymmetricEigen::new(normal.clone());
    let max_e = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min_e = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    let ok = min_e > 0.0 && max_e / min_e < STENCIL_CONDITION_LIMIT;
    let coef = match normal.cholesky() {
        Some(ch) => ch.solve(&weighted.transpose()),
        None => DMatrix::zeros(BASIS, m),
    };
    let inv_r = 1.0 / radius;
    let inv_r2 = inv_r * inv_r;
    let row = |k: usize, s: f64| -> Vec<f64> { (0..m).map(|j| coef[(k, j)] * s).collect() };
    let rows = [
        row(0, inv_r),
        row(1, inv_r),
        (0..m)
            .map(|j| (coef[(2, j)] + coef[(3, j)]) * inv_r2)
            .collect(),
        row(4, inv_r2),
        (0..m)
            .map(|j| (coef[(2, j)] - coef[(3, j)]) * inv_r2)
            .collect(),
    ];
    (
        LocalOperator {
            stencil: stencil.to_vec(),
            gnomonic_scale: scale,
            rows,
        },
        ok,
    )
}

/// Per-node reconstruction of first and second derivatives.
#[derive(Debug, Clone)]
pub struct Derivatives {
    dim: usize,
    /// Spherical gradient in the node's tangent frame.
    pub gradient: Vec<Vector2<f64>>,
    /// `Hess h + h I` in the node's tangent frame (n = 2 uses entry (0, 0)).
    pub curvature: Vec<Matrix2<f64>>,
}

impl Derivatives {
    /// Covariant Hessian `Hess h` at node `i`.
    pub fn hessian(&self, i: usize, h: f64) -> Matrix2<f64> {
        let mut m = self.curvature[i];
        m[(0, 0)] -= h;
        if self.dim == 3 {
            m[(1, 1)] -= h;
        }
        m
    }

    /// `det(Hess h + h I)` at node `i`.
    pub fn det(&self, i: usize) -> f64 {
        let m = &self.curvature[i];
        if self.dim == 2 {
            m[(0, 0)]
        } else {
            m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]
        }
    }

    /// Smallest eigenvalue of `Hess h + h I` at node `i`.
    pub fn min_eigenvalue(&self, i: usize) -> f64 {
        let m = &self.curvature[i];
        if self.dim == 2 {
            return m[(0, 0)];
        }
        let mean = 0.5 * (m[(0, 0)] + m[(1, 1)]);
        let half = 0.5 * (m[(0, 0)] - m[(1, 1)]);
        mean - (half * half + m[(0, 1)] * m[(0, 1)]).sqrt()
    }

    /// Largest eigenvalue of `Hess h + h I` at node `i`.
    pub fn max_eigenvalue(&self, i: usize) -> f64 {
        let m = &self.curvature[i];
        if self.dim == 2 {
            return m[(0, 0)];
        }
        let mean = 0.5 * (m[(0, 0)] + m[(1, 1)]);
        let half = 0.5 * (m[(0, 0)] - m[(1, 1)]);
        mean + (half * half + m[(0, 1)] * m[(0, 1)]).sqrt()
    }
}

/// One real value per grid node.
#[derive(Debug, Clone)]
pub struct ScalarField {
    grid: Arc<SphereGrid>,
    values: Vec<f64>,
}

/// Output of [`ScalarField::monge_ampere_det`].
#[derive(Debug, Clone)]
pub struct MongeAmpere {
    pub det: ScalarField,
    /// Nodes where `Hess h + h I` has an eigenvalue below the convexity floor.
    pub flagged: Vec<usize>,
}

impl ScalarField {
    pub fn new(grid: Arc<SphereGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(ScalarField { grid, values })
    }

    pub fn from_fn(grid: Arc<SphereGrid>, f: impl Fn(&Point) -> f64) -> Self {
        let values = grid.nodes().iter().map(f).collect();
        ScalarField { grid, values }
    }

    pub fn constant(grid: Arc<SphereGrid>, value: f64) -> Self {
        let values = vec![value; grid.len()];
        ScalarField { grid, values }
    }

    pub fn grid(&self) -> &Arc<SphereGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, t: f64) -> ScalarField {
        self.map(|v| v * t)
    }

    /// `sum_i w_i f_i`.
    pub fn quadrature(&self) -> Result<f64> {
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(self.grid.integrate(&self.values))
    }

    pub fn derivatives(&self) -> Derivatives {
        let grid = &self.grid;
        let h = &self.values;
        if grid.dim == 2 {
            let count = grid.len();
            let step = grid.spacing;
            let at = |k: isize| h[(k.rem_euclid(count as isize)) as usize];
            let mut gradient = Vec::with_capacity(count);
            let mut curvature = Vec::with_capacity(count);
            for i in 0..count as isize {
                let d1 =
                    (-at(i + 2) + 8.0 * at(i + 1) - 8.0 * at(i - 1) + at(i - 2)) / (12.0 * step);
                let d2 = (-at(i + 2) + 16.0 * at(i + 1) - 30.0 * at(i) + 16.0 * at(i - 1)
                    - at(i - 2))
                    / (12.0 * step * step);
                // frames may be flipped; the default e1 points along increasing angle
                let e1 = grid.frames[i as usize][0];
                let x = grid.nodes[i as usize];
                let orientation = (x.x * e1.y - x.y * e1.x).signum();
                gradient.push(Vector2::new(orientation * d1, 0.0));
                curvature.push(Matrix2::new(d2 + at(i), 0.0, 0.0, 0.0));
            }
            return Derivatives {
                dim: 2,
                gradient,
                curvature,
            };
        }
        let (gradient, curvature): (Vec<_>, Vec<_>) = grid
            .operators
            .par_iter()
            .enumerate()
            .map(|(i, op)| {
                let h0 = h[i];
                let diffs: Vec<f64> = op
                    .stencil
                    .iter()
                    .zip(&op.gnomonic_scale)
                    .map(|(&j, s)| h[j] * s - h0)
                    .collect();
                let dot = |row: &Vec<f64>| row.iter().zip(&diffs).map(|(a, b)| a * b).sum::<f64>();
                let g = Vector2::new(dot(&op.rows[0]), dot(&op.rows[1]));
                let m12 = dot(&op.rows[3]);
                let m = Matrix2::new(dot(&op.rows[2]), m12, m12, dot(&op.rows[4]));
                (g, m)
            })
            .unzip();
        Derivatives {
            dim: 3,
            gradient,
            curvature,
        }
    }

    /// Boundary points `grad h + h x` of the Wulff shape, one per normal.
    pub fn euclidean_gradient_map(&self) -> Vec<Point> {
        let d = self.derivatives();
        self.gradient_points(&d)
    }

    pub fn gradient_points(&self, d: &Derivatives) -> Vec<Point> {
        (0..self.grid.len())
            .map(|i| {
                self.grid.tangent_vector(i, &d.gradient[i]) + self.grid.nodes[i] * self.values[i]
            })
            .collect()
    }

    pub fn monge_ampere_det(&self) -> MongeAmpere {
        let d = self.derivatives();
        let scale = self.values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let flagged = (0..self.grid.len())
            .filter(|&i| d.min_eigenvalue(i) < CONVEXITY_FLOOR * scale)
            .collect();
        let det = ScalarField {
            grid: self.grid.clone(),
            values: (0..self.grid.len()).map(|i| d.det(i)).collect(),
        };
        MongeAmpere { det, flagged }
    }

    /// Value at an arbitrary direction from the local model at the nearest
    /// node; exact for balls and linear functions.
    pub fn interpolate_with(&self, d: &Derivatives, x: &Point) -> f64 {
        let x = x.normalize();
        let i = self.grid.nearest_node(&x);
        let x0 = self.grid.nodes[i];
        let c = x0.dot(&x);
        let p = x / c - x0;
        let [e1, e2] = self.grid.frames[i];
        let u = if self.grid.dim == 2 {
            Vector2::new(p.dot(&e1), 0.0)
        } else {
            Vector2::new(p.dot(&e1), p.dot(&e2))
        };
        let m = d.curvature[i];
        let mean = if self.grid.dim == 2 {
            m[(0, 0)]
        } else {
            0.5 * m.trace()
        };
        let traceless = m - Matrix2::identity() * mean;
        let radial = (1.0 + u.norm_squared()).sqrt() - 1.0;
        let local =
            self.values[i] + d.gradient[i].dot(&u) + mean * radial + 0.5 * u.dot(&(traceless * u));
        local * c
    }

    pub fn snapshot(&self) -> GridSnapshot {
        self.grid.snapshot(Some(&self.values))
    }
}

/// JSON form of a grid, optionally with field values.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GridSnapshot {
    pub dim: usize,
    pub resolution: usize,
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn grid(dim: usize, res: usize) -> Arc<SphereGrid> {
        Arc::new(SphereGrid::new(dim, res).unwrap())
    }

    #[test]
    fn rejects_bad_dimension_and_resolution() {
        assert!(matches!(SphereGrid::new(4, 3), Err(Error::Dimension(4))));
        assert!(matches!(
            SphereGrid::new(2, 4),
            Err(Error::Resolution { .. })
        ));
        assert!(matches!(
            SphereGrid::new(3, 0),
            Err(Error::Resolution { .. })
        ));
    }

    #[test]
    fn circle_weights_sum_to_circumference() {
        let g = grid(2, 256);
        let total: f64 = g.weights().iter().sum();
        assert!((total - 2.0 * PI).abs() < 1e-12);
    }

    #[test]
    fn icosphere_weights_and_unit_nodes() {
        let g = grid(3, 4);
        assert_eq!(g.len(), 2562);
        let total: f64 = g.weights().iter().sum();
        assert!((total - 4.0 * PI).abs() < 1e-8, "{total}");
        assert!(g.nodes().iter().all(|x| (x.norm() - 1.0).abs() < 1e-12));
        assert!(g.ill_conditioned().is_empty());
    }

    #[test]
    fn quadrature_examples() {
        let g = grid(3, 4);
        let one = ScalarField::constant(g.clone(), 1.0);
        assert!((one.quadrature().unwrap() - 4.0 * PI).abs() < 1e-8);
        let cos2 = ScalarField::from_fn(g.clone(), |x| x.z * x.z);
        assert!((cos2.quadrature().unwrap() - 4.0 * PI / 3.0).abs() < 1e-4);
        // the kink along the equator needs a finer grid
        let fine = grid(3, 7);
        let abs = ScalarField::from_fn(fine, |x| x.x.abs());
        assert!((abs.quadrature().unwrap() - 2.0 * PI).abs() < 1e-4);
        for f in [
            |x: &Point| x.x,
            |x: &Point| x.y * x.z * x.z,
            |x: &Point| x.z.powi(3),
        ] {
            let odd = ScalarField::from_fn(g.clone(), f);
            assert!(odd.quadrature().unwrap().abs() < 1e-8);
        }
        let c = grid(2, 64);
        assert!((ScalarField::constant(c, 1.0).quadrature().unwrap() - 2.0 * PI).abs() < 1e-12);
    }

    #[test]
    fn quadrature_rejects_non_finite() {
        let g = grid(2, 16);
        let mut v = vec![1.0; 16];
        assert!(ScalarField::new(g.clone(), v.clone()).is_ok());
        v[3] = f64::NAN;
        assert!(matches!(ScalarField::new(g, v), Err(Error::NonFinite(3))));
    }

    #[test]
    fn constants_and_linear_functions_are_exact() {
        for g in [grid(3, 3), grid(2, 64)] {
            let dim = g.dim();
            let c = ScalarField::constant(g.clone(), 2.5);
            let d = c.derivatives();
            for i in 0..g.len() {
                assert!(d.gradient[i].norm() < 1e-12);
                assert!(d.hessian(i, 2.5).norm() < 1e-10);
                let expected = if dim == 3 { 6.25 } else { 2.5 };
                assert!((d.det(i) - expected).abs() < 1e-10);
            }
            let v = Point::new(0.3, -0.2, if dim == 3 { 0.5 } else { 0.0 });
            let lin = ScalarField::from_fn(g.clone(), |x| x.dot(&v));
            let mut worst = 0.0f64;
            for m in lin.derivatives().curvature {
                worst = worst.max(m.norm());
            }
            let tol = if dim == 3 { 1e-10 } else { 1e-6 };
            assert!(worst < tol, "{worst}");
        }
    }

    #[test]
    fn translated_ball_gradient_map_and_det() {
        let g = grid(3, 3);
        let v = Point::new(0.2, 0.1, -0.3);
        let h = ScalarField::from_fn(g.clone(), |x| 1.5 + x.dot(&v));
        let pts = h.euclidean_gradient_map();
        for (i, p) in pts.iter().enumerate() {
            assert!((p - (v + g.node(i) * 1.5)).norm() < 1e-10);
        }
        let ma = h.monge_ampere_det();
        assert!(ma.flagged.is_empty());
        assert!(ma.det.values().iter().all(|d| (d - 2.25).abs() < 1e-10));
    }

    #[test]
    fn ellipsoid_principal_radii() {
        let g = grid(3, 4);
        let a = [1.0, 1.0, 2.0];
        let h = ScalarField::from_fn(g.clone(), |x| {
            ((a[0] * x.x).powi(2) + (a[1] * x.y).powi(2) + (a[2] * x.z).powi(2)).sqrt()
        });
        let ma = h.monge_ampere_det();
        // Principal radii of curvature at the normal e_k: product over j != k of a_j^2 / a_k.
        let radii_det = |k: usize| -> f64 {
            (0..3)
                .filter(|&j| j != k)
                .map(|j| a[j] * a[j] / a[k])
                .product()
        };
        let pole = g.nearest_node(&Point::z());
        assert!((g.node(pole) - Point::z()).norm() < 1e-12);
        assert!((ma.det.values()[pole] / radii_det(2) - 1.0).abs() < 0.01);
        let eq = g.nearest_node(&Point::x());
        assert!((g.node(eq) - Point::x()).norm() < 1e-12);
        assert!((ma.det.values()[eq] / radii_det(0) - 1.0).abs() < 0.01);
        let pts = h.euclidean_gradient_map();
        assert!((pts[eq] - Point::x()).norm() < 1e-3);
    }

    #[test]
    fn determinant_converges_under_refinement() {
        // det(Hess h + h I) = (a1 a2 a3)^2 / h^4 for the ellipsoid support |A x|
        let a = [1.0, 1.3, 2.0];
        let errors: Vec<f64> = (3..=5)
            .map(|level| {
                let g = grid(3, level);
                let support = |x: &Point| {
                    ((a[0] * x.x).powi(2) + (a[1] * x.y).powi(2) + (a[2] * x.z).powi(2)).sqrt()
                };
                let det = ScalarField::from_fn(g.clone(), support)
                    .monge_ampere_det()
                    .det;
                let prod: f64 = a.iter().product();
                g.nodes()
                    .iter()
                    .zip(det.values())
                    .map(|(x, d)| (d - prod * prod / support(x).powi(4)).abs())
                    .fold(0.0, f64::max)
            })
            .collect();
        for pair in errors.windows(2) {
            let order = (pair[0] / pair[1]).log2();
            assert!(order >= 1.5, "{errors:?}");
        }
    }

    #[test]
    fn frame_independence() {
        let g = grid(3, 3);
        let h = |x: &Point| 1.0 + 0.2 * x.x * x.y + 0.1 * x.z.powi(3) + 0.3 * x.x;
        let a = ScalarField::from_fn(g.clone(), h).monge_ampere_det().det;
        let rotated = Arc::new(g.with_random_frames(7));
        let b = ScalarField::from_fn(rotated, h).monge_ampere_det().det;
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn circle_derivatives() {
        let g = grid(2, 256);
        let h = ScalarField::from_fn(g.clone(), |x| 1.0 + 0.5 * x.x);
        let ma = h.monge_ampere_det();
        assert!(ma.det.values().iter().all(|d| (d - 1.0).abs() < 1e-7));
        let pts = h.euclidean_gradient_map();
        for (i, p) in pts.iter().enumerate() {
            assert!((p - (Point::new(0.5, 0.0, 0.0) + g.node(i))).norm() < 1e-7);
        }
    }

    #[test]
    fn interpolation_between_nodes() {
        let g = grid(3, 4);
        let v = Point::new(0.1, -0.2, 0.05);
        let ball = ScalarField::from_fn(g.clone(), |x| 1.2 + x.dot(&v));
        let d = ball.derivatives();
        let x = Point::new(0.3, 0.7, -0.2).normalize();
        assert!((ball.interpolate_with(&d, &x) - (1.2 + x.dot(&v))).abs() < 1e-10);
        let smooth = |x: &Point| 1.0 + 0.3 * x.x * x.y + 0.2 * x.z * x.z;
        let f = ScalarField::from_fn(g.clone(), smooth);
        let d = f.derivatives();
        assert!((f.interpolate_with(&d, &x) - smooth(&x)).abs() < 1e-4);
        let c = grid(2, 128);
        let f = ScalarField::from_fn(c.clone(), |x| 1.0 + 0.4 * x.x + 0.1 * x.y * x.y);
        let d = f.derivatives();
        let x = Point::new(0.6, -0.8, 0.0);
        assert!((f.interpolate_with(&d, &x) - (1.0 + 0.24 + 0.064)).abs() < 1e-5);
    }

    #[test]
    fn enclosing_cell_contains_direction() {
        let g = grid(3, 3);
        for x in [
            Point::new(0.3, 0.7, -0.2),
            Point::new(-1.0, 0.01, 0.02),
            Point::z(),
        ] {
            let x = x.normalize();
            let cell = g.enclosing_cell(&x);
            let m = nalgebra::Matrix3::from_columns(&[
                *g.node(cell[0]),
                *g.node(cell[1]),
                *g.node(cell[2]),
            ]);
            let lam = m.lu().solve(&x).unwrap();
            assert!(lam.min() > -1e-12);
        }
        let c = grid(2, 16);
        let x = Point::new(0.2, -0.9, 0.0).normalize();
        let cell = c.enclosing_cell(&x);
        let m = nalgebra::Matrix2::new(
            c.node(cell[0]).x,
            c.node(cell[1]).x,
            c.node(cell[0]).y,
            c.node(cell[1]).y,
        );
        let lam = m.lu().solve(&nalgebra::Vector2::new(x.x, x.y)).unwrap();
        assert!(lam.min() > -1e-12);
    }

    #[test]
    fn snapshot_round_trips_through_json() {
        let g = grid(2, 8);
        let f = ScalarField::constant(g, 1.0);
        let snap = f.snapshot();
        let text = serde_json::to_string(&snap).unwrap();
        let back: GridSnapshot = serde_json::from_str(&text).unwrap();
        assert_eq!(snap, back);
    }
}
