//! Acceptance battery. Prints one pass/fail line per criterion and exits
//! nonzero if any fails. Numeric arguments select a subset, e.g.
//! `cargo test --test acceptance -- 3 7`.

use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

use chordflow::body::{BodyHandle, BodySpec, EllipsoidSpec};
use chordflow::chord::{
    chord_integral, dual_quermass, homogeneity_check, identity_check, iq_lower_bound_ratio,
    lp_mass_homogeneity, variational_check, McOptions, Method,
};
use chordflow::ellipsoid_space::{
    convexity_probe_d, map_g, membership, retract_phi, sample_boundary, sample_superset,
    Membership, PairPoint, SpaceParams,
};
use chordflow::flow::{
    default_a0, run_modified_flow, run_modified_flow_field, select_initial_scale, DensitySpec,
    FlowConfig, FlowOutcome, FlowStatus, Thresholds,
};
use chordflow::sphere::{Point, ScalarField, SphereGrid};
use nalgebra::{DVector, Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DEFAULT_LEVEL: usize = 4;

type Check = Result<(bool, String), Box<dyn std::error::Error>>;

fn grid(level: usize) -> Arc<SphereGrid> {
    Arc::new(SphereGrid::new(3, level).expect("grid"))
}

fn rel(a: f64, b: f64) -> f64 {
    (a / b - 1.0).abs()
}

// Closed forms in R^3, written out independently of the library.
fn omega3() -> f64 {
    4.0 * PI / 3.0
}

fn ball_iq(q: f64) -> f64 {
    2f64.powf(q + 1.0) * PI / (q + 2.0)
}

/// `V~_{q-1}(B_1, z)` for `z` on the unit sphere.
fn ball_boundary_v(q: f64) -> f64 {
    2f64.powf(q) * PI / (3.0 * q)
}

fn random_ellipsoid(rng: &mut ChaCha8Rng) -> EllipsoidSpec {
    let axis: [f64; 3] = rand_distr::Distribution::sample(&rand_distr::UnitSphere, rng);
    let rot = Rotation3::from_axis_angle(
        &Unit::new_normalize(Vector3::from(axis)),
        rng.random_range(0.0..PI),
    );
    let axes = Matrix3::from_diagonal(&Vector3::new(
        rng.random_range(0.6..1.6),
        rng.random_range(0.6..1.6),
        rng.random_range(0.6..1.6),
    ));
    let shape = rot.matrix() * axes * rot.matrix().transpose();
    let shape = (shape + shape.transpose()) * 0.5;
    let center = Point::new(
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.2..0.2),
    );
    EllipsoidSpec::from_matrix(3, center, shape).expect("ellipsoid")
}

fn ellipsoid_body(axes: [f64; 3], center: [f64; 3], g: &Arc<SphereGrid>) -> BodyHandle {
    let e = EllipsoidSpec::axis_aligned(&axes, &center).expect("ellipsoid");
    BodyHandle::new(BodySpec::Ellipsoid(e), g.clone()).expect("body")
}

fn c1_ball_chord_integrals() -> Check {
    let g = grid(DEFAULT_LEVEL);
    let ball = BodyHandle::new(
        BodySpec::Ball {
            radius: 1.0,
            center: vec![0.0; 3],
        },
        g,
    )?;
    let mut ok = true;
    let mut worst: f64 = 0.0;
    for q in [0.0, 1.0, 2.0, 3.0, 4.0] {
        let start = Instant::now();
        let est = chord_integral(
            &ball,
            q,
            Method::GrassmannProjection,
            &McOptions::new(1_000_000, 11),
        )?;
        let err = rel(est.value, ball_iq(q));
        worst = worst.max(err);
        ok &= err <= 0.01 && start.elapsed().as_secs_f64() <= 30.0;
    }
    // I_1 = V, I_0 = w_2 S / (3 w_3), I_4 = 4 V^2 / w_3 on the unit ball
    let (volume, area, omega2) = (omega3(), 4.0 * PI, PI);
    let special = [
        (ball_iq(1.0), volume),
        (ball_iq(0.0), omega2 * area / (3.0 * omega3())),
        (ball_iq(4.0), 4.0 * volume * volume / omega3()),
    ];
    let identity_gap = special.iter().map(|(a, b)| rel(*a, *b)).fold(0.0, f64::max);
    ok &= identity_gap <= 1e-14;
    Ok((
        ok,
        format!("worst relative error {worst:.2e}, special identities {identity_gap:.1e}"),
    ))
}

fn c2_cross_estimators() -> Check {
    let g = grid(DEFAULT_LEVEL);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_sigma: f64 = 0.0;
    let mut slowest: f64 = 0.0;
    for k in 0..5 {
        let body = BodyHandle::new(BodySpec::Ellipsoid(random_ellipsoid(&mut rng)), g.clone())?;
        let start = Instant::now();
        for q in [1.5, 2.0, 3.0] {
            let opts = McOptions::new(1_000_000, 100 + k);
            let reports: Vec<_> = Method::CHORD
                .iter()
                .map(|m| chord_integral(&body, q, *m, &opts))
                .collect::<Result<_, _>>()?;
            for i in 0..reports.len() {
                for j in i + 1..reports.len() {
                    let (a, b) = (&reports[i], &reports[j]);
                    let combined = (a.error_estimate.powi(2) + b.error_estimate.powi(2)).sqrt();
                    worst_sigma = worst_sigma.max((a.value - b.value).abs() / combined);
                }
            }
        }
        slowest = slowest.max(start.elapsed().as_secs_f64());
    }
    Ok((
        worst_sigma <= 3.0 && slowest <= 120.0,
        format!(
            "largest pairwise gap {worst_sigma:.2} combined sigma, slowest body {slowest:.1} s"
        ),
    ))
}

fn c3_boundary_dual_quermass() -> Check {
    let g = grid(DEFAULT_LEVEL);
    let ball = BodyHandle::new(
        BodySpec::Ball {
            radius: 1.0,
            center: vec![0.0; 3],
        },
        g,
    )?;
    let z = Point::new(0.0, 0.6, 0.8);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for q in [1.0, 2.0, 3.0] {
        let v = dual_quermass(
            &ball,
            &z,
            q - 1.0,
            Method::XrayQuadrature,
            &McOptions::default(),
        )?;
        worst = worst.max(rel(v.value, ball_boundary_v(q)));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        worst <= 5e-3 && secs <= 1.0,
        format!("worst relative error {worst:.2e} in {secs:.2} s"),
    ))
}

fn c4_identity() -> Check {
    let g = grid(DEFAULT_LEVEL);
    let bodies = [
        ellipsoid_body([1.0, 1.0, 1.0], [0.0; 3], &g),
        ellipsoid_body([0.7, 1.0, 1.6], [0.1, 0.0, 0.0], &g),
        ellipsoid_body([1.2, 0.8, 0.9], [0.0, -0.1, 0.05], &g),
    ];
    let mut worst: f64 = 0.0;
    let mut slowest: f64 = 0.0;
    for body in &bodies {
        for q in [2.0, 3.0] {
            let start = Instant::now();
            let r = identity_check(
                body,
                q,
                Method::GrassmannProjection,
                &McOptions::new(1_000_000, 4),
            )?;
            worst = worst.max(r.gap);
            slowest = slowest.max(start.elapsed().as_secs_f64());
        }
    }
    Ok((
        worst <= 0.01 && slowest <= 60.0,
        format!("largest relative gap {worst:.2e}, slowest case {slowest:.1} s"),
    ))
}

fn c5_homogeneity() -> Check {
    let g = grid(DEFAULT_LEVEL);
    let body = ellipsoid_body([0.7, 1.0, 1.6], [0.1, 0.0, 0.0], &g);
    let mut worst: f64 = 0.0;
    for t in [0.5, 2.0] {
        let r = homogeneity_check(
            &body,
            2.0,
            t,
            Method::GrassmannProjection,
            &McOptions::new(400_000, 5),
        )?;
        worst = worst.max(rel(r.ratio, t.powf(4.0)));
        // F_{p,q} total mass scales as t^{n+q-p-1}
        let (p, q) = (-2.0, 2.5);
        let m = lp_mass_homogeneity(body.support_field(), p, q, t)?;
        worst = worst.max(rel(m.ratio, t.powf(3.0 + q - p - 1.0)));
    }
    Ok((
        worst <= 0.01,
        format!("largest relative deviation {worst:.2e}"),
    ))
}

fn c6_variational() -> Check {
    let g = grid(3);
    let e = EllipsoidSpec::axis_aligned(&[0.8, 1.0, 1.25], &[0.05, 0.0, 0.0])?;
    let h = ScalarField::from_fn(g.clone(), |x| e.support(x));
    let directions: [Box<dyn Fn(&Point) -> f64>; 3] = [
        Box::new(|x| x.x * x.x),
        Box::new(|x| 1.0 + 0.5 * x.z),
        Box::new(|x| 1.0 + x.x * x.y + 0.5 * (3.0 * x.z * x.z - 1.0)),
    ];
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut richardson: f64 = 0.0;
    for dir in &directions {
        let gf = ScalarField::from_fn(g.clone(), |x| dir(x));
        let r = variational_check(&h, &gf, 2.0, 0.02, &McOptions::new(400_000, 6))?;
        worst = worst.max(r.gap);
        richardson = richardson.max(r.richardson);
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        worst <= 0.02 && richardson <= 0.05 && secs <= 120.0,
        format!(
            "largest relative gap {worst:.2e}, step-halving change {richardson:.2e}, {secs:.0} s"
        ),
    ))
}

fn stationary_constant(q: f64) -> f64 {
    2.0 * q * ball_boundary_v(q) / omega3()
}

fn radial_run(level: usize) -> Result<FlowOutcome, Box<dyn std::error::Error>> {
    let g = grid(level);
    let cfg = FlowConfig {
        p: -6.0,
        q: 3.5,
        f: DensitySpec::Constant {
            value: stationary_constant(3.5),
        },
        ..FlowConfig::default()
    };
    let f = cfg.validate(&g)?;
    let h0 = ScalarField::constant(g.clone(), 1.0);
    let s = select_initial_scale(&h0, &cfg)?;
    Ok(run_modified_flow_field(
        h0.scaled(s),
        &f,
        &cfg,
        default_a0(&cfg, &g)?,
        None,
    )?)
}

fn c7_fixed_point() -> Check {
    let start = Instant::now();
    let out = radial_run(DEFAULT_LEVEL)?;
    let secs = start.elapsed().as_secs_f64();
    let (p, q, n) = (-6.0, 3.5, 3.0);
    let expected = (stationary_constant(q) / ball_boundary_v(q)).powf(1.0 / (n + q - 1.0 - p));
    let Some(solution) = out.solution.as_ref() else {
        return Ok((false, format!("status {}", out.status.name())));
    };
    let worst = solution
        .values()
        .iter()
        .map(|r| rel(*r, expected))
        .fold(0.0, f64::max);
    Ok((
        out.status == FlowStatus::Converged && worst <= 1e-3 && secs <= 300.0,
        format!(
            "status {}, radius error {worst:.2e} (expected {expected:.6}), {secs:.1} s",
            out.status.name()
        ),
    ))
}

fn monotone(out: &FlowOutcome) -> (bool, usize) {
    let ok = out
        .steps
        .iter()
        .all(|s| s.rate * s.dt >= -s.tolerance && s.analytic >= 0.0);
    let dissipation_ok = out.trajectory.iter().all(|r| r.dissipation >= 0.0);
    (ok && dissipation_ok, out.steps.len())
}

fn c8_monotonicity() -> Check {
    let mut steps = Vec::new();
    let mut ok = true;
    let (fixed_ok, n) = monotone(&radial_run(DEFAULT_LEVEL)?);
    ok &= fixed_ok;
    steps.push(n);
    let g = grid(3);
    let densities = [
        DensitySpec::Harmonic {
            constant: 1.2,
            axis: vec![0.2, 0.3, 1.0],
            coefficients: vec![0.1, 0.3],
        },
        DensitySpec::Harmonic {
            constant: 0.9,
            axis: vec![1.0, -0.5, 0.2],
            coefficients: vec![0.0, 0.2, 0.15],
        },
    ];
    for f_spec in densities {
        let cfg = FlowConfig {
            p: -6.0,
            q: 3.5,
            lambda: 2.0,
            f: f_spec,
            ..FlowConfig::default()
        };
        let f = cfg.validate(&g)?;
        let h0 = ScalarField::from_fn(g.clone(), |x| {
            (0.9 * x.x * x.x + x.y * x.y + 1.2 * x.z * x.z).sqrt() + 0.05 * x.x
        });
        let s = select_initial_scale(&h0, &cfg)?;
        let out = run_modified_flow_field(h0.scaled(s), &f, &cfg, default_a0(&cfg, &g)?, None)?;
        let (run_ok, n) = monotone(&out);
        ok &= run_ok && n > 0;
        steps.push(n);
    }
    Ok((ok, format!("accepted steps per run {steps:?}")))
}

fn c9_classification() -> Check {
    let g = grid(DEFAULT_LEVEL);
    let (p, q) = (-6.0, 3.5);
    let c = stationary_constant(q);
    let base = FlowConfig {
        p,
        q,
        f: DensitySpec::Constant { value: c },
        ..FlowConfig::default()
    };
    // A0 = 3 I_q(B_1) + 3 n^{-p} int f
    let a0 = 3.0 * ball_iq(q) + 3.0 * 3f64.powf(-p) * 4.0 * PI * c;
    let eccentric: f64 = 300.0;
    let flat = (1.0 / (eccentric * eccentric)).powf(1.0 / 3.0);
    let cases = [
        ("tiny", EllipsoidSpec::ball(3, 0.1), base.clone()),
        ("huge", EllipsoidSpec::ball(3, 10.0), base.clone()),
        (
            "eccentric",
            EllipsoidSpec::axis_aligned(&[flat, flat * eccentric, flat * eccentric], &[0.0; 3])?,
            FlowConfig {
                thresholds: Thresholds {
                    ecc_bar: eccentric,
                    ..Thresholds::default()
                },
                ..base.clone()
            },
        ),
    ];
    let start = Instant::now();
    let mut ok = true;
    let mut notes = Vec::new();
    for (name, e, cfg) in cases {
        let out = run_modified_flow(&e, &cfg, &g)?;
        let a0_ok = rel(out.a0, a0) < 1e-9;
        let case_ok = out.status == FlowStatus::StationaryInitial && out.initial_j > a0 && a0_ok;
        ok &= case_ok;
        notes.push(format!("{name} J/A0 = {:.2}", out.initial_j / a0));
    }
    // the eccentric datum sits on the configured eccentricity bound
    let e = EllipsoidSpec::axis_aligned(&[flat, flat * eccentric, flat * eccentric], &[0.0; 3])?;
    ok &= rel(e.eccentricity(), eccentric) < 1e-12 && rel(e.volume(), omega3()) < 1e-12;
    let secs = start.elapsed().as_secs_f64();
    ok &= secs <= 60.0;
    Ok((ok, format!("{}, {secs:.1} s", notes.join(", "))))
}

fn c10_residual() -> Check {
    let mut residuals = Vec::new();
    for level in [3, 4] {
        let out = radial_run(level)?;
        let Some(r) = out.residual_xray.as_ref() else {
            return Ok((false, format!("level {level} ended {}", out.status.name())));
        };
        residuals.push(r.sup_relative);
    }
    let ratio = residuals[0] / residuals[1];
    Ok((
        residuals.iter().all(|r| *r <= 1e-2) && ratio >= 2.0,
        format!(
            "relative residual {:.2e} -> {:.2e}, reduction {ratio:.2}",
            residuals[0], residuals[1]
        ),
    ))
}

fn c11_ellipsoid_space() -> Check {
    let start = Instant::now();
    let params = SpaceParams::new(3, 0.1, 20.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut failures = 0usize;
    for _ in 0..1000 {
        let a = sample_superset(&params, &mut rng);
        let dir: [f64; 3] = rand_distr::Distribution::sample(&rand_distr::UnitSphere, &mut rng);
        let r: f64 = rng.random_range(0.0..=1.0);
        let x = PairPoint::new(a, DVector::from_column_slice(&dir) * r)?;
        let once = retract_phi(&x, &params)?;
        let twice = retract_phi(&once, &params)?;
        let det = once.a.determinant();
        let d0 = x.a.determinant();
        let target_ok = if d0 < params.vol_bar {
            (det - params.vol_bar).abs() <= 1e-10
        } else if d0 > 1.0 / params.vol_bar {
            (det - 1.0 / params.vol_bar).abs() <= 1e-10
        } else {
            once == x
        };
        let idempotent = (&once.a - &twice.a).abs().max() <= 1e-10;
        let ecc_ok = once.eccentricity() <= x.eccentricity() + 1e-12;
        if !(target_ok && idempotent && ecc_ok) {
            failures += 1;
        }
    }
    for _ in 0..1000 {
        let x = sample_boundary(&params, &mut rng)?;
        let gx = map_g(&x)?;
        let back = map_g(&gx)?;
        let on_boundary = matches!(membership(&x, &params), Membership::OnBoundary(_))
            && matches!(membership(&gx, &params), Membership::OnBoundary(_));
        let involution = (&back.a - &x.a).abs().max() <= 1e-12 * x.a.abs().max().max(1.0)
            && (&back.z - &x.z).norm() <= 1e-12;
        let moved = (&gx.a - &x.a).abs().max() + (&gx.z - &x.z).norm() > 0.0;
        if !(on_boundary && involution && moved) {
            failures += 1;
        }
    }
    let report = convexity_probe_d(&params, 10_000, &mut rng);
    let secs = start.elapsed().as_secs_f64();
    Ok((
        failures == 0 && report.violations == 0 && secs <= 10.0,
        format!(
            "{failures} retraction/involution failures, {} convexity violations in {} trials, {secs:.1} s",
            report.violations, report.trials
        ),
    ))
}

fn c12_lower_bound_ratio() -> Check {
    let g = grid(DEFAULT_LEVEL);
    let start = Instant::now();
    let mut ratios = Vec::new();
    for a1 in [1.0, 0.5, 0.25, 0.125] {
        let body = ellipsoid_body([a1, 1.0, 1.0], [0.0; 3], &g);
        ratios.push(iq_lower_bound_ratio(
            &body,
            &[a1, 1.0, 1.0],
            2.0,
            &McOptions::new(400_000, 12),
        )?);
    }
    let min = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let steps_ok = ratios.windows(2).all(|w| w[1] >= 0.7 * w[0]);
    let secs = start.elapsed().as_secs_f64();
    let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.4}")).collect();
    Ok((
        min > 0.0 && steps_ok && secs <= 180.0,
        format!("ratios [{}], {secs:.1} s", shown.join(", ")),
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 12] = [
        ("ball chord integrals", c1_ball_chord_integrals),
        ("cross-estimator agreement", c2_cross_estimators),
        ("boundary dual quermassintegral", c3_boundary_dual_quermass),
        ("chord integral identity", c4_identity),
        ("homogeneity", c5_homogeneity),
        ("variational formula", c6_variational),
        ("flow fixed point", c7_fixed_point),
        ("monotonicity", c8_monotonicity),
        ("modified-flow classification", c9_classification),
        ("converged residual", c10_residual),
        ("ellipsoid space", c11_ellipsoid_space),
        ("lower bound ratio", c12_lower_bound_ratio),
    ];
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let id = k + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let (passed, detail) = check().unwrap_or_else(|e| (false, format!("error: {e}")));
        if !passed {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {:<32} {}  {detail}",
            name,
            if passed { "PASS" } else { "FAIL" }
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
