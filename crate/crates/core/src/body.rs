//! Convex bodies: balls, ellipsoids, polytopes and Wulff shapes of sampled
//! support functions, with the geometric queries the estimators need.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, SymmetricEigen, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sphere::{ball_volume, Derivatives, Point, ScalarField, SphereGrid};

/// Sampled support function.
pub type SupportField = ScalarField;

/// Ellipsoid `center + shape * B_1` with a symmetric positive-definite shape.
/// For n = 2 the matrix is padded with a unit third axis.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipsoidSpec {
    dim: usize,
    center: Point,
    shape: Matrix3<f64>,
    inverse: Matrix3<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EllipsoidRaw {
    center: Vec<f64>,
    shape: Vec<Vec<f64>>,
}

impl Serialize for EllipsoidSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let n = self.dim;
        EllipsoidRaw {
            center: self.center.iter().take(n).copied().collect(),
            shape: (0..n)
                .map(|i| (0..n).map(|j| self.shape[(i, j)]).collect())
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for EllipsoidSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = EllipsoidRaw::deserialize(d)?;
        EllipsoidSpec::new(&raw.center, &raw.shape).map_err(serde::de::Error::custom)
    }
}

fn pad_point(v: &[f64]) -> Point {
    Point::new(v[0], v[1], v.get(2).copied().unwrap_or(0.0))
}

impl EllipsoidSpec {
    pub fn new(center: &[f64], shape: &[Vec<f64>]) -> Result<Self> {
        let n = center.len();
        if n != 2 && n != 3 {
            return Err(Error::Dimension(n));
        }
        if shape.len() != n || shape.iter().any(|r| r.len() != n) {
            return Err(Error::Precondition(format!(
                "ellipsoid shape must be {n}x{n}"
            )));
        }
        let mut m = Matrix3::identity();
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = shape[i][j];
            }
        }
        Self::from_matrix(n, pad_point(center), m)
    }

    pub fn from_matrix(dim: usize, center: Point, shape: Matrix3<f64>) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::Dimension(dim));
        }
        let asym = (shape - shape.transpose()).abs().max();
        if asym > 1e-12 * shape.abs().max().max(1.0) {
            return Err(Error::Precondition(
                "ellipsoid shape is not symmetric".into(),
            ));
        }
        let mut shape = (shape + shape.transpose()) * 0.5;
        let mut center = center;
        if dim == 2 {
            for k in 0..2 {
                shape[(2, k)] = 0.0;
                shape[(k, 2)] = 0.0;
            }
            shape[(2, 2)] = 1.0;
            center.z = 0.0;
        }
        let e = SymmetricEigen::new(shape);
        if e.eigenvalues.min() <= 0.0 {
            return Err(Error::Precondition(
                "ellipsoid shape is not positive definite".into(),
            ));
        }
        let inverse = shape
            .try_inverse()
            .ok_or_else(|| Error::Precondition("ellipsoid shape is singular".into()))?;
        Ok(EllipsoidSpec {
            dim,
            center,
            shape,
            inverse,
        })
    }

    pub fn axis_aligned(semi_axes: &[f64], center: &[f64]) -> Result<Self> {
        let n = semi_axes.len();
        let shape: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| if i == j { semi_axes[i] } else { 0.0 })
                    .collect()
            })
            .collect();
        Self::new(center, &shape)
    }

    pub fn ball(dim: usize, radius: f64) -> Self {
        let mut shape = Matrix3::identity() * radius;
        if dim == 2 {
            shape[(2, 2)] = 1.0;
        }
        EllipsoidSpec {
            dim,
            center: Point::zeros(),
            inverse: shape.try_inverse().unwrap_or_else(Matrix3::identity),
            shape,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn center(&self) -> &Point {
        &self.center
    }

    pub fn shape(&self) -> &Matrix3<f64> {
        &self.shape
    }

    /// Semi-axes in increasing order.
    pub fn semi_axes(&self) -> Vec<f64> {
        let n = self.dim;
        let block = self.shape.fixed_view::<2, 2>(0, 0).into_owned();
        let mut axes: Vec<f64> = if n == 2 {
            SymmetricEigen::new(block)
                .eigenvalues
                .iter()
                .copied()
                .collect()
        } else {
            SymmetricEigen::new(self.shape)
                .eigenvalues
                .iter()
                .copied()
                .collect()
        };
        axes.sort_by(f64::total_cmp);
        axes
    }

    pub fn volume(&self) -> f64 {
        ball_volume(self.dim) * self.shape.determinant()
    }

    pub fn eccentricity(&self) -> f64 {
        let a = self.semi_axes();
        a[a.len() - 1] / a[0]
    }

    pub fn support(&self, x: &Point) -> f64 {
        (self.shape * x).norm() + self.center.dot(x)
    }

    /// Boundary point with outer normal `x`.
    pub fn boundary_point(&self, x: &Point) -> Point {
        let ax = self.shape * x;
        self.center + self.shape * ax / ax.norm()
    }

    /// Parameter interval of the chord `z + t u`, if the line meets the body.
    pub fn chord(&self, z: &Point, u: &Point) -> Option<(f64, f64)> {
        let a = self.inverse * u;
        let b = self.inverse * (z - self.center);
        let aa = a.norm_squared();
        let ab = a.dot(&b);
        let disc = ab * ab - aa * (b.norm_squared() - 1.0);
        if disc <= 0.0 {
            return None;
        }
        let root = disc.sqrt();
        Some(((-ab - root) / aa, (-ab + root) / aa))
    }

    /// `|A^{-1}(y - c)|`, at most 1 inside.
    pub fn gauge(&self, y: &Point) -> f64 {
        (self.inverse * (y - self.center)).norm()
    }

    pub fn scaled(&self, t: f64) -> Self {
        let mut shape = self.shape * t;
        if self.dim == 2 {
            shape[(2, 2)] = 1.0;
        }
        EllipsoidSpec {
            dim: self.dim,
            center: self.center * t,
            inverse: shape.try_inverse().unwrap_or_else(Matrix3::identity),
            shape,
        }
    }

    pub fn translated(&self, v: &Point) -> Self {
        let mut out = self.clone();
        out.center += v;
        if self.dim == 2 {
            out.center.z = 0.0;
        }
        out
    }
}

/// Declarative convex body.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum BodySpec {
    Ball {
        radius: f64,
        center: Vec<f64>,
    },
    Ellipsoid(EllipsoidSpec),
    Polytope {
        vertices: Vec<Vec<f64>>,
    },
    SupportTable {
        dim: usize,
        resolution: usize,
        values: Vec<f64>,
    },
}

impl BodySpec {
    pub fn dim(&self) -> usize {
        match self {
            BodySpec::Ball { center, .. } => center.len(),
            BodySpec::Ellipsoid(e) => e.dim(),
            BodySpec::Polytope { vertices } => vertices.first().map_or(0, |v| v.len()),
            BodySpec::SupportTable { dim, .. } => *dim,
        }
    }

    pub fn scaled(&self, t: f64) -> BodySpec {
        match self {
            BodySpec::Ball { radius, center } => BodySpec::Ball {
                radius: radius * t,
                center: center.iter().map(|c| c * t).collect(),
            },
            BodySpec::Ellipsoid(e) => BodySpec::Ellipsoid(e.scaled(t)),
            BodySpec::Polytope { vertices } => BodySpec::Polytope {
                vertices: vertices
                    .iter()
                    .map(|v| v.iter().map(|c| c * t).collect())
                    .collect(),
            },
            BodySpec::SupportTable {
                dim,
                resolution,
                values,
            } => BodySpec::SupportTable {
                dim: *dim,
                resolution: *resolution,
                values: values.iter().map(|h| h * t).collect(),
            },
        }
    }
}

/// Facet description `{y : normal . y <= offset}`.
#[derive(Debug, Clone)]
struct Halfspaces {
    normals: Vec<Point>,
    offsets: Vec<f64>,
}

impl Halfspaces {
    fn clip(&self, z: &Point, u: &Point) -> Option<(f64, f64)> {
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for (n, &b) in self.normals.iter().zip(&self.offsets) {
            let a = n.dot(u);
            let slack = b - n.dot(z);
            if a > 1e-15 {
                hi = hi.min(slack / a);
            } else if a < -1e-15 {
                lo = lo.max(slack / a);
            } else if slack < 0.0 {
                return None;
            }
        }
        (hi > lo).then_some((lo, hi))
    }

    fn gap(&self, y: &Point) -> f64 {
        self.normals
            .iter()
            .zip(&self.offsets)
            .map(|(n, b)| n.dot(y) - b)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone)]
struct Polytope {
    vertices: Vec<Point>,
    facets: Halfspaces,
    volume: f64,
    surface: f64,
}

fn polytope(dim: usize, raw: &[Vec<f64>]) -> Result<Polytope> {
    if raw.iter().any(|v| v.len() != dim) {
        return Err(Error::Precondition(
            "polytope vertices have mixed dimensions".into(),
        ));
    }
    if raw.len() < dim + 1 {
        return Err(Error::Degenerate(format!(
            "polytope needs at least {} vertices",
            dim + 1
        )));
    }
    let vertices: Vec<Point> = raw.iter().map(|v| pad_point(v)).collect();
    let scale = vertices.iter().map(|v| v.norm()).fold(1.0, f64::max);
    let eps = 1e-10 * scale;
    if dim == 2 {
        let hull = convex_hull_2d(&vertices, eps);
        if hull.len() < 3 {
            return Err(Error::Degenerate("polytope vertices are collinear".into()));
        }
        let mut normals = Vec::new();
        let mut offsets = Vec::new();
        let mut area = 0.0;
        let mut perimeter = 0.0;
        for k in 0..hull.len() {
            let a = hull[k];
            let b = hull[(k + 1) % hull.len()];
            let edge = b - a;
            let n = Point::new(edge.y, -edge.x, 0.0).normalize();
            normals.push(n);
            offsets.push(n.dot(&a));
            area += 0.5 * (a.x * b.y - a.y * b.x);
            perimeter += edge.norm();
        }
        return Ok(Polytope {
            vertices: hull,
            facets: Halfspaces { normals, offsets },
            volume: area,
            surface: perimeter,
        });
    }
    let m = vertices.len();
    let mut normals: Vec<Point> = Vec::new();
    let mut offsets: Vec<f64> = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            for k in j + 1..m {
                let n = (vertices[j] - vertices[i]).cross(&(vertices[k] - vertices[i]));
                if n.norm() < eps * scale {
                    continue;
                }
                let mut n = n.normalize();
                let mut b = n.dot(&vertices[i]);
                let above = vertices.iter().filter(|v| n.dot(v) - b > eps).count();
                let below = vertices.iter().filter(|v| n.dot(v) - b < -eps).count();
                if above > 0 && below > 0 {
                    continue;
                }
                if above > 0 {
                    n = -n;
                    b = -b;
                }
                if normals.iter().any(|q| (q - n).norm() < 1e-9) {
                    continue;
                }
                normals.push(n);
                offsets.push(b);
            }
        }
    }
    if normals.len() < 4 {
        return Err(Error::Degenerate("polytope vertices are coplanar".into()));
    }
    let mut volume = 0.0;
    let mut surface = 0.0;
    let mut used = vec![false; m];
    for (n, &b) in normals.iter().zip(&offsets) {
        let on: Vec<Point> = vertices
            .iter()
            .enumerate()
            .filter(|(_, v)| (n.dot(v) - b).abs() <= eps)
            .map(|(i, v)| {
                used[i] = true;
                *v
            })
            .collect();
        let e1 = (on[1] - on[0]).normalize();
        let e2 = n.cross(&e1);
        let planar: Vec<Point> = on
            .iter()
            .map(|v| Point::new(v.dot(&e1), v.dot(&e2), 0.0))
            .collect();
        let hull = convex_hull_2d(&planar, eps);
        let area: f64 = (0..hull.len())
            .map(|k| {
                let (a, c) = (hull[k], hull[(k + 1) % hull.len()]);
                0.5 * (a.x * c.y - a.y * c.x)
            })
            .sum::<f64>()
            .abs();
        surface += area;
        volume += b * area / 3.0;
    }
    Ok(Polytope {
        vertices: vertices
            .into_iter()
            .zip(used)
            .filter(|(_, u)| *u)
            .map(|(v, _)| v)
            .collect(),
        facets: Halfspaces { normals, offsets },
        volume,
        surface,
    })
}

/// Counter-clockwise hull of points in the xy-plane.
fn convex_hull_2d(points: &[Point], eps: f64) -> Vec<Point> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup_by(|a, b| (*a - *b).norm() <= eps);
    if pts.len() < 3 {
        return pts;
    }
    let cross =
        |o: &Point, a: &Point, b: &Point| (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
    let mut lower: Vec<Point> = Vec::new();
    for p in &pts {
        while lower.len() >= 2
            && cross(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= eps * eps
        {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<Point> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2
            && cross(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= eps * eps
        {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Wulff shape of a positive support sample.
#[derive(Debug, Clone)]
struct Wulff {
    field: ScalarField,
    derivatives: Derivatives,
    facets: Halfspaces,
}

impl Wulff {
    /// Exact support of the halfspace intersection by the dual simplex
    /// `min sum l_i h_i` subject to `sum l_i x_i = v`, `l >= 0`.
    fn support(&self, v: &Point) -> (f64, Point) {
        let grid = self.field.grid();
        let dim = grid.dim();
        let h = self.field.values();
        let nodes = grid.nodes();
        let vn = v.normalize();
        let mut basis = grid.enclosing_cell(&vn);
        let column = |j: usize| DVector::from_iterator(dim, nodes[j].iter().take(dim).copied());
        let target = DVector::from_iterator(dim, v.iter().take(dim).copied());
        let scale = h.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for _ in 0..10_000 {
            let b = DMatrix::from_columns(&basis.iter().map(|&j| column(j)).collect::<Vec<_>>());
            let lu = b.clone().lu();
            let lambda = match lu.solve(&target) {
                Some(l) => l,
                None => break,
            };
            let cost = DVector::from_iterator(dim, basis.iter().map(|&j| h[j]));
            let y = match b.transpose().lu().solve(&cost) {
                Some(y) => y,
                None => break,
            };
            let entering = (0..nodes.len()).find(|&j| {
                let xj = column(j);
                h[j] - xj.dot(&y) < -1e-12 * scale && !basis.contains(&j)
            });
            let Some(j) = entering else {
                let mut point = Point::zeros();
                for k in 0..dim {
                    point[k] = y[k];
                }
                return (v.dot(&point), point);
            };
            let dir = match lu.solve(&column(j)) {
                Some(d) => d,
                None => break,
            };
            let mut leave: Option<(f64, usize)> = None;
            for r in 0..dim {
                if dir[r] > 1e-14 {
                    let ratio = lambda[r].max(0.0) / dir[r];
                    let better = match leave {
                        None => true,
                        Some((best, pos)) => {
                            ratio < best - 1e-15 || (ratio <= best + 1e-15 && basis[r] < basis[pos])
                        }
                    };
                    if better {
                        leave = Some((ratio, r));
                    }
                }
            }
            match leave {
                Some((_, r)) => basis[r] = j,
                None => break,
            }
        }
        // Fall back to the sampled bound if the pivoting stalls.
        let i = grid.nearest_node(&vn);
        (h[i] * v.norm(), nodes[i] * h[i])
    }
}

#[derive(Debug, Clone)]
enum Shape {
    Ball {
        radius: f64,
        center: Point,
    },
    /// The ellipsoid and its smallest semi-axis.
    Ellipsoid(EllipsoidSpec, f64),
    Polytope(Polytope),
    Wulff(Box<Wulff>),
}

/// A body together with its sampled support function on a grid.
#[derive(Debug, Clone)]
pub struct BodyHandle {
    spec: BodySpec,
    dim: usize,
    shape: Shape,
    grid: Arc<SphereGrid>,
    support: ScalarField,
}

impl BodyHandle {
    pub fn new(spec: BodySpec, grid: Arc<SphereGrid>) -> Result<Self> {
        let dim = spec.dim();
        if dim != 2 && dim != 3 {
            return Err(Error::Dimension(dim));
        }
        if dim != grid.dim() {
            return Err(Error::Precondition(format!(
                "body dimension {dim} does not match grid dimension {}",
                grid.dim()
            )));
        }
        let shape = match &spec {
            BodySpec::Ball { radius, center } => {
                if !(*radius > 0.0) {
                    return Err(Error::Precondition("ball radius must be positive".into()));
                }
                Shape::Ball {
                    radius: *radius,
                    center: pad_point(center),
                }
            }
            BodySpec::Ellipsoid(e) => Shape::Ellipsoid(e.clone(), e.semi_axes()[0]),
            BodySpec::Polytope { vertices } => Shape::Polytope(polytope(dim, vertices)?),
            BodySpec::SupportTable {
                dim,
                resolution,
                values,
            } => {
                let own = if *resolution == grid.resolution() {
                    grid.clone()
                } else {
                    Arc::new(SphereGrid::new(*dim, *resolution)?)
                };
                let field = ScalarField::new(own, values.clone())?;
                Shape::Wulff(Box::new(wulff(field)?))
            }
        };
        let support = match &shape {
            Shape::Wulff(w) if Arc::ptr_eq(w.field.grid(), &grid) => w.field.clone(),
            _ => {
                let values = grid.nodes().iter().map(|x| support_of(&shape, x)).collect();
                ScalarField::new(grid.clone(), values)?
            }
        };
        Ok(BodyHandle {
            spec,
            dim,
            shape,
            grid,
            support,
        })
    }

    /// Wulff shape `{y : y . x_i <= h_i for all nodes}` of a sampled positive function.
    pub fn wulff(h: &ScalarField) -> Result<Self> {
        let w = wulff(h.clone())?;
        let grid = h.grid().clone();
        Ok(BodyHandle {
            spec: BodySpec::SupportTable {
                dim: grid.dim(),
                resolution: grid.resolution(),
                values: h.values().to_vec(),
            },
            dim: grid.dim(),
            shape: Shape::Wulff(Box::new(w)),
            support: h.clone(),
            grid,
        })
    }

    pub fn spec(&self) -> &BodySpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> &Arc<SphereGrid> {
        &self.grid
    }

    /// Support values at the grid nodes.
    pub fn support_field(&self) -> &ScalarField {
        &self.support
    }

    /// Support in direction `x`; interpolated for sampled tables.
    pub fn support(&self, x: &Point) -> f64 {
        support_of(&self.shape, x)
    }

    /// Exact support of the body; for a sampled table this is the support
    /// of its Wulff shape, which may lie below the samples.
    pub fn exact_support(&self, x: &Point) -> f64 {
        match &self.shape {
            Shape::Wulff(w) => w.support(x).0,
            other => support_of(other, x),
        }
    }

    /// Signed membership gap: positive outside, non-positive inside.
    pub fn gap(&self, y: &Point) -> f64 {
        match &self.shape {
            Shape::Ball { radius, center } => (y - center).norm() - radius,
            Shape::Ellipsoid(e, a) => (e.gauge(y) - 1.0) * a,
            Shape::Polytope(p) => p.facets.gap(y),
            Shape::Wulff(w) => w.facets.gap(y),
        }
    }

    /// Membership tolerance relative to the body's size.
    pub fn tolerance(&self) -> f64 {
        1e-9 * self
            .support
            .values()
            .iter()
            .fold(1.0f64, |m, h| m.max(h.abs()))
    }

    pub fn contains(&self, y: &Point) -> bool {
        self.gap(y) <= self.tolerance()
    }

    /// Parameter interval `[lo, hi]` of the chord `z + t u`.
    pub fn chord(&self, z: &Point, u: &Point) -> Option<(f64, f64)> {
        match &self.shape {
            Shape::Ball { radius, center } => {
                let d = z - center;
                let b = d.dot(u);
                let disc = b * b - (d.norm_squared() - radius * radius);
                if disc <= 0.0 {
                    return None;
                }
                let root = disc.sqrt();
                Some((-b - root, -b + root))
            }
            Shape::Ellipsoid(e, _) => e.chord(z, u),
            Shape::Polytope(p) => p.facets.clip(z, u),
            Shape::Wulff(w) => w.facets.clip(z, u),
        }
    }

    /// Radial function: largest `t >= 0` with `z + t u` in the body.
    pub fn radial(&self, z: &Point, u: &Point) -> Result<f64> {
        let gap = self.gap(z);
        if gap > self.tolerance() {
            return Err(Error::OutsideBody { gap });
        }
        Ok(self.chord(z, u).map_or(0.0, |(_, hi)| hi.max(0.0)))
    }

    /// Length of the intersection of the body with the line `z + R u`.
    pub fn xray(&self, z: &Point, u: &Point) -> f64 {
        self.chord(z, u).map_or(0.0, |(lo, hi)| (hi - lo).max(0.0))
    }

    pub fn volume(&self) -> Result<f64> {
        match &self.shape {
            Shape::Ball { radius, .. } => Ok(ball_volume(self.dim) * radius.powi(self.dim as i32)),
            Shape::Ellipsoid(e, _) => Ok(e.volume()),
            Shape::Polytope(p) => Ok(p.volume),
            Shape::Wulff(w) => smooth_volume(&w.field),
        }
    }

    pub fn surface_area(&self) -> Result<f64> {
        match &self.shape {
            Shape::Ball { radius, .. } => {
                Ok(self.dim as f64 * ball_volume(self.dim) * radius.powi(self.dim as i32 - 1))
            }
            Shape::Polytope(p) => Ok(p.surface),
            Shape::Ellipsoid(..) => smooth_area(&self.support),
            Shape::Wulff(w) => smooth_area(&w.field),
        }
    }

    /// Axis-aligned box containing the body.
    pub fn bounding_box(&self) -> (Point, Point) {
        let mut lo = Point::zeros();
        let mut hi = Point::zeros();
        for k in 0..self.dim {
            let mut e = Point::zeros();
            e[k] = 1.0;
            hi[k] = self.exact_support(&e);
            lo[k] = -self.exact_support(&-e);
        }
        if let Shape::Wulff(_) = self.shape {
            // guard against an inexact pivot result with a small margin
            let pad = 1e-9 * (hi - lo).norm();
            lo.add_scalar_mut(-pad);
            hi.add_scalar_mut(pad);
            if self.dim == 2 {
                lo.z = 0.0;
                hi.z = 0.0;
            }
        }
        (lo, hi)
    }

    /// Boundary samples used for the minimum enclosing ellipsoid.
    pub fn boundary_samples(&self) -> Vec<Point> {
        match &self.shape {
            Shape::Ball { radius, center } => self
                .grid
                .nodes()
                .iter()
                .map(|x| center + x * *radius)
                .collect(),
            Shape::Ellipsoid(e, _) => self
                .grid
                .nodes()
                .iter()
                .map(|x| e.boundary_point(x))
                .collect(),
            Shape::Polytope(p) => p.vertices.clone(),
            Shape::Wulff(w) => w.field.gradient_points(&w.derivatives),
        }
    }

    pub fn min_enclosing_ellipsoid(&self) -> Result<EllipsoidSpec> {
        let samples = self.boundary_samples();
        if let Shape::Polytope(_) = self.shape {
            return min_enclosing_ellipsoid(self.dim, &samples, 1e-7);
        }
        if samples.len() < 10 * self.dim {
            return Err(Error::Degenerate(format!(
                "only {} boundary samples",
                samples.len()
            )));
        }
        min_enclosing_ellipsoid(self.dim, &samples, 1e-7)
    }

    /// Checks `(E - c)/n + c` lies in the body on the sphere grid directions.
    pub fn john_inner_contained(&self, e: &EllipsoidSpec, tol: f64) -> bool {
        let n = self.dim as f64;
        self.grid.nodes().iter().all(|x| {
            let y = e.center() + e.shape() * x / n;
            self.gap(&y) <= tol
        })
    }

    pub fn eccentricity(&self) -> Result<f64> {
        match &self.shape {
            Shape::Ball { .. } => Ok(1.0),
            Shape::Ellipsoid(e, _) => Ok(e.eccentricity()),
            _ => Ok(self.min_enclosing_ellipsoid()?.eccentricity()),
        }
    }

    /// Minimum of the support function over the grid.
    pub fn dist_origin(&self) -> Result<f64> {
        let d = self.support.min();
        if d <= 0.0 {
            return Err(Error::Precondition(format!(
                "origin is not interior (min support {d:.3e})"
            )));
        }
        Ok(d)
    }

    /// Largest distance from a point of the body to the origin.
    pub fn circumradius(&self) -> f64 {
        match &self.shape {
            Shape::Ball { radius, center } => radius + center.norm(),
            Shape::Ellipsoid(e, _) => {
                e.semi_axes().last().copied().unwrap_or(0.0) + e.center().norm()
            }
            Shape::Polytope(p) => p.vertices.iter().map(|v| v.norm()).fold(0.0, f64::max),
            Shape::Wulff(_) => {
                let (lo, hi) = self.bounding_box();
                let mut far = Point::zeros();
                for k in 0..3 {
                    far[k] = lo[k].abs().max(hi[k].abs());
                }
                far.norm()
            }
        }
    }

    pub fn scaled(&self, t: f64) -> Result<Self> {
        match &self.shape {
            Shape::Wulff(w) if Arc::ptr_eq(w.field.grid(), &self.grid) => {
                BodyHandle::wulff(&w.field.scaled(t))
            }
            _ => BodyHandle::new(self.spec.scaled(t), self.grid.clone()),
        }
    }
}

fn wulff(field: ScalarField) -> Result<Wulff> {
    let min = field.min();
    if !(min > 0.0) {
        return Err(Error::Degenerate(format!(
            "support sample must be positive for a Wulff shape with interior (min {min:.3e})"
        )));
    }
    let derivatives = field.derivatives();
    let facets = Halfspaces {
        normals: field.grid().nodes().to_vec(),
        offsets: field.values().to_vec(),
    };
    Ok(Wulff {
        field,
        derivatives,
        facets,
    })
}

fn support_of(shape: &Shape, x: &Point) -> f64 {
    match shape {
        Shape::Ball { radius, center } => radius * x.norm() + center.dot(x),
        Shape::Ellipsoid(e, _) => e.support(x),
        Shape::Polytope(p) => p
            .vertices
            .iter()
            .map(|v| v.dot(x))
            .fold(f64::NEG_INFINITY, f64::max),
        Shape::Wulff(w) => w.field.interpolate_with(&w.derivatives, x) * x.norm(),
    }
}

/// `(1/n) sum w h det(Hess h + h I)`.
pub fn smooth_volume(h: &ScalarField) -> Result<f64> {
    let ma = h.monge_ampere_det();
    if !ma.flagged.is_empty() {
        return Err(Error::ConvexityLoss { nodes: ma.flagged });
    }
    let n = h.grid().dim() as f64;
    let integrand: Vec<f64> = h
        .values()
        .iter()
        .zip(ma.det.values())
        .map(|(a, b)| a * b)
        .collect();
    Ok(h.grid().integrate(&integrand) / n)
}

fn smooth_area(h: &ScalarField) -> Result<f64> {
    let ma = h.monge_ampere_det();
    if !ma.flagged.is_empty() {
        return Err(Error::ConvexityLoss { nodes: ma.flagged });
    }
    Ok(h.grid().integrate(ma.det.values()))
}

/// Minimum-volume enclosing ellipsoid of a point cloud by barycentric
/// coordinate ascent with away steps, stopped when every lifted point has
/// `kappa <= (n + 1)(1 + tol)`, then inflated to contain every point.
pub fn min_enclosing_ellipsoid(dim: usize, points: &[Point], tol: f64) -> Result<EllipsoidSpec> {
    let m = points.len();
    if m < dim + 1 {
        return Err(Error::Degenerate(format!(
            "{m} points cannot span an ellipsoid in R^{dim}"
        )));
    }
    let d = dim + 1;
    // Lifted points live in R^4; for n = 2 the spare coordinate is zero and
    // its diagonal entry is padded so the moment matrix stays invertible.
    let lifted: Vec<Vector4<f64>> = points
        .iter()
        .map(|p| {
            let mut q = Vector4::zeros();
            for k in 0..dim {
                q[k] = p[k];
            }
            q[dim] = 1.0;
            q
        })
        .collect();
    let mut weights = vec![1.0 / m as f64; m];
    let moment = |w: &[f64]| -> Result<Matrix4<f64>> {
        let mut x = Matrix4::zeros();
        for (q, &wi) in lifted.iter().zip(w) {
            if wi > 0.0 {
                x += q * q.transpose() * wi;
            }
        }
        for k in d..4 {
            x[(k, k)] = 1.0;
        }
        x.try_inverse()
            .ok_or_else(|| Error::Degenerate("boundary samples lie in a hyperplane".into()))
    };
    let target = d as f64;
    let mut inverse = moment(&weights)?;
    let mut kappa: Vec<f64> = lifted.iter().map(|q| q.dot(&(inverse * q))).collect();
    let max_iter = 200_000;
    for iter in 0..max_iter {
        if iter % 500 == 499 {
            inverse = moment(&weights)?;
            for (k, q) in kappa.iter_mut().zip(&lifted) {
                *k = q.dot(&(inverse * q));
            }
        }
        let (up, up_val) =
            kappa.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |b, (i, &k)| if k > b.1 { (i, k) } else { b },
            );
        let (down, down_val) = kappa
            .iter()
            .enumerate()
            .filter(|(i, _)| weights[*i] > 0.0)
            .fold(
                (0, f64::INFINITY),
                |b, (i, &k)| if k < b.1 { (i, k) } else { b },
            );
        if up_val <= target * (1.0 + tol) && down_val >= target * (1.0 - tol) {
            break;
        }
        let (j, kj, step) = if up_val - target >= target - down_val {
            (up, up_val, (up_val - target) / (target * (up_val - 1.0)))
        } else {
            let raw = (down_val - target) / (target * (down_val - 1.0));
            let floor = -weights[down] / (1.0 - weights[down]);
            (down, down_val, raw.max(floor))
        };
        if step == 0.0 {
            break;
        }
        for w in weights.iter_mut() {
            *w *= 1.0 - step;
        }
        weights[j] += step;
        if weights[j] < 1e-300 {
            weights[j] = 0.0;
        }
        // Sherman-Morrison update of the inverse moment and all kappas.
        let a = inverse * lifted[j];
        let ratio = step / (1.0 - step);
        let denom = 1.0 + ratio * kj;
        for (k, q) in kappa.iter_mut().zip(&lifted) {
            let c = q.dot(&a);
            *k = (*k - ratio * c * c / denom) / (1.0 - step);
        }
        inverse = (inverse - a * a.transpose() * (ratio / denom)) / (1.0 - step);
        for k in d..4 {
            inverse[(k, k)] = 1.0;
        }
    }
    let mut center = DVector::zeros(dim);
    for (p, &w) in points.iter().zip(&weights) {
        for k in 0..dim {
            center[k] += w * p[k];
        }
    }
    let mut scatter = DMatrix::zeros(dim, dim);
    for (p, &w) in points.iter().zip(&weights) {
        let v = DVector::from_iterator(dim, p.iter().take(dim).copied());
        scatter += &v * v.transpose() * w;
    }
    scatter -= &center * center.transpose();
    let form = scatter
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("degenerate scatter in enclosing ellipsoid".into()))?
        / dim as f64;
    let mut reach: f64 = 0.0;
    for p in points {
        let v = DVector::from_iterator(dim, p.iter().take(dim).copied()) - &center;
        reach = reach.max(v.dot(&(&form * &v)));
    }
    let form = form / reach;
    let eig = SymmetricEigen::new(form);
    let mut shape3 = Matrix3::identity();
    let root = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()))
        * eig.eigenvectors.transpose();
    for i in 0..dim {
        for j in 0..dim {
            shape3[(i, j)] = 0.5 * (root[(i, j)] + root[(j, i)]);
        }
    }
    let mut c3 = Point::zeros();
    for k in 0..dim {
        c3[k] = center[k];
    }
    EllipsoidSpec::from_matrix(dim, c3, shape3)
}
