//! Analytic metrics on the disk, Christoffel symbols, geodesic tracing with
//! boundary exit refinement, fans of maximal geodesics, and desk-scale
//! simplicity diagnostics (boundary convexity + Jacobi fields).

use crate::expr::Expr;
use crate::grid::Grid2;
use crate::{Result, TmtError};
use rayon::prelude::*;

pub type Point = [f64; 2];
pub type Vector = [f64; 2];
/// Christoffel symbols, `gamma[k][i][j]` = Γ^k_{ij}.
pub type Christoffel = [[[f64; 2]; 2]; 2];

/// Anything that provides a 2-D Riemannian metric pointwise.
///
/// Implemented by [`MetricSpec`] (analytic metrics in the global chart) and
/// by the pullback metric of a semi-geodesic tube chart.
pub trait MetricField: Sync {
    /// g_ij at a point, row-major `[g11, g12, g21, g22]`.
    fn metric(&self, x: Point) -> [f64; 4];

    fn christoffel(&self, x: Point) -> Christoffel;

    fn metric_inverse(&self, x: Point) -> [f64; 4] {
        invert2(self.metric(x))
    }

    fn sqrt_det(&self, x: Point) -> f64 {
        let g = self.metric(x);
        (g[0] * g[3] - g[1] * g[2]).sqrt()
    }

    fn inner(&self, x: Point, u: Vector, v: Vector) -> f64 {
        let g = self.metric(x);
        g[0] * u[0] * v[0] + g[1] * (u[0] * v[1] + u[1] * v[0]) + g[3] * u[1] * v[1]
    }

    fn gnorm(&self, x: Point, v: Vector) -> f64 {
        self.inner(x, v, v).sqrt()
    }
}

pub(crate) fn invert2(g: [f64; 4]) -> [f64; 4] {
    let det = g[0] * g[3] - g[1] * g[2];
    [g[3] / det, -g[1] / det, -g[2] / det, g[0] / det]
}

#[derive(Debug, Clone)]
pub enum MetricKind {
    Euclidean,
    /// g = e^{2 lambda(x)} * identity.
    Conformal(Expr),
    /// Grid-sampled metric, bilinear between nodes: `[g11, g12, g22]` per node.
    Table { grid: Grid2, samples: Vec<[f64; 3]> },
}

/// An analytic (or tabulated) metric with finite-difference Christoffels.
#[derive(Debug, Clone)]
pub struct MetricSpec {
    pub kind: MetricKind,
    /// Finite-difference step for metric derivatives.
    pub deriv_step: f64,
}

impl MetricSpec {
    pub fn euclidean() -> MetricSpec {
        MetricSpec {
            kind: MetricKind::Euclidean,
            deriv_step: 1e-5,
        }
    }

    pub fn conformal(lambda: Expr) -> MetricSpec {
        MetricSpec {
            kind: MetricKind::Conformal(lambda),
            deriv_step: 1e-5,
        }
    }

    pub fn conformal_expr(src: &str) -> Result<MetricSpec> {
        Ok(MetricSpec::conformal(Expr::parse(src)?))
    }

    pub fn is_euclidean(&self) -> bool {
        matches!(self.kind, MetricKind::Euclidean)
    }
}

impl MetricField for MetricSpec {
    fn metric(&self, x: Point) -> [f64; 4] {
        match &self.kind {
            MetricKind::Euclidean => [1.0, 0.0, 0.0, 1.0],
            MetricKind::Conformal(lambda) => {
                let c = (2.0 * lambda.eval(x[0], x[1])).exp();
                [c, 0.0, 0.0, c]
            }
            MetricKind::Table { grid, samples } => {
                let st = grid.bilinear(x[0], x[1]);
                if st.len == 0 {
                    // metric queried off-table: fall back to identity
                    return [1.0, 0.0, 0.0, 1.0];
                }
                let mut acc = [0.0; 3];
                for (node, w) in st.iter() {
                    for c in 0..3 {
                        acc[c] += w * samples[node][c];
                    }
                }
                [acc[0], acc[1], acc[1], acc[2]]
            }
        }
    }

    fn christoffel(&self, x: Point) -> Christoffel {
        if self.is_euclidean() {
            return [[[0.0; 2]; 2]; 2];
        }
        let h = self.deriv_step;
        // dg[p][i][j] = d g_ij / d x^p by centered differences
        let mut dg = [[[0.0f64; 2]; 2]; 2];
        for p in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[p] += h;
            xm[p] -= h;
            let gp = self.metric(xp);
            let gm = self.metric(xm);
            for i in 0..2 {
                for j in 0..2 {
                    dg[p][i][j] = (gp[i * 2 + j] - gm[i * 2 + j]) / (2.0 * h);
                }
            }
        }
        let ginv = self.metric_inverse(x);
        let mut gamma = [[[0.0f64; 2]; 2]; 2];
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let mut acc = 0.0;
                    for p in 0..2 {
                        acc += ginv[k * 2 + p] * (dg[i][j][p] + dg[j][i][p] - dg[p][i][j]);
                    }
                    gamma[k][i][j] = 0.5 * acc;
                }
            }
        }
        gamma
    }
}

/// The disk domain `|x| < R` in the fixed global chart, with its analytic
/// extension by a fixed collar.
#[derive(Debug, Clone, Copy)]
pub struct DomainSpec {
    pub radius: f64,
}

pub const EXTENSION_COLLAR: f64 = 0.1;

impl DomainSpec {
    pub fn new(radius: f64) -> DomainSpec {
        DomainSpec { radius }
    }

    /// Boundary function, negative strictly inside, zero on the boundary.
    pub fn boundary(&self, x: Point) -> f64 {
        x[0] * x[0] + x[1] * x[1] - self.radius * self.radius
    }

    pub fn contains(&self, x: Point) -> bool {
        self.boundary(x) < 0.0
    }

    /// The extended domain the metric is analytically continued to.
    pub fn extended(&self) -> DomainSpec {
        DomainSpec {
            radius: self.radius + EXTENSION_COLLAR,
        }
    }

    pub fn boundary_point(&self, angle: f64) -> Point {
        [self.radius * angle.cos(), self.radius * angle.sin()]
    }

    /// g-unit outward normal at a point near the boundary.
    pub fn unit_normal<M: MetricField>(&self, g: &M, x: Point) -> Vector {
        // grad b = 2x; raise the index, then g-normalize
        let ginv = g.metric_inverse(x);
        let v = [
            ginv[0] * 2.0 * x[0] + ginv[1] * 2.0 * x[1],
            ginv[2] * 2.0 * x[0] + ginv[3] * 2.0 * x[1],
        ];
        let n = g.gnorm(x, v);
        [v[0] / n, v[1] / n]
    }
}

/// One integration state along a geodesic.
#[derive(Debug, Clone, Copy)]
pub struct GeoSample {
    pub t: f64,
    pub pos: Point,
    pub vel: Vector,
}

/// A traced geodesic: uniform samples, a tail midpoint and the refined exit.
#[derive(Debug, Clone)]
pub struct Geodesic {
    /// Boundary-angle identifier of the starting point (fan metadata).
    pub boundary_angle: f64,
    /// Direction-angle identifier (fan metadata).
    pub dir_angle: f64,
    pub step: f64,
    /// Samples at t = 0, h, 2h, ... (all weakly inside the domain).
    pub samples: Vec<GeoSample>,
    /// State at the midpoint of the partial last interval.
    pub tail_mid: GeoSample,
    /// Refined state on the boundary.
    pub exit: GeoSample,
}

impl Geodesic {
    pub fn exit_param(&self) -> f64 {
        self.exit.t
    }

    /// Worst deviation of the g-speed from its initial value (relative).
    pub fn speed_drift<M: MetricField>(&self, g: &M) -> f64 {
        let s0 = g.gnorm(self.samples[0].pos, self.samples[0].vel);
        self.samples
            .iter()
            .chain(std::iter::once(&self.exit))
            .map(|s| (g.gnorm(s.pos, s.vel) / s0 - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// One classical RK4 step of the geodesic flow (also used for short flow
/// displacements when differentiating along the flow).
pub fn rk4_step<M: MetricField>(g: &M, s: &GeoSample, h: f64) -> GeoSample {
    let f = |pos: Point, vel: Vector| -> (Vector, Vector) {
        let gamma = g.christoffel(pos);
        let mut acc = [0.0f64; 2];
        for k in 0..2 {
            let mut a = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    a += gamma[k][i][j] * vel[i] * vel[j];
                }
            }
            acc[k] = -a;
        }
        (vel, acc)
    };
    let (k1p, k1v) = f(s.pos, s.vel);
    let mid1p = [s.pos[0] + 0.5 * h * k1p[0], s.pos[1] + 0.5 * h * k1p[1]];
    let mid1v = [s.vel[0] + 0.5 * h * k1v[0], s.vel[1] + 0.5 * h * k1v[1]];
    let (k2p, k2v) = f(mid1p, mid1v);
    let mid2p = [s.pos[0] + 0.5 * h * k2p[0], s.pos[1] + 0.5 * h * k2p[1]];
    let mid2v = [s.vel[0] + 0.5 * h * k2v[0], s.vel[1] + 0.5 * h * k2v[1]];
    let (k3p, k3v) = f(mid2p, mid2v);
    let endp = [s.pos[0] + h * k3p[0], s.pos[1] + h * k3p[1]];
    let endv = [s.vel[0] + h * k3v[0], s.vel[1] + h * k3v[1]];
    let (k4p, k4v) = f(endp, endv);
    GeoSample {
        t: s.t + h,
        pos: [
            s.pos[0] + h / 6.0 * (k1p[0] + 2.0 * k2p[0] + 2.0 * k3p[0] + k4p[0]),
            s.pos[1] + h / 6.0 * (k1p[1] + 2.0 * k2p[1] + 2.0 * k3p[1] + k4p[1]),
        ],
        vel: [
            s.vel[0] + h / 6.0 * (k1v[0] + 2.0 * k2v[0] + 2.0 * k3v[0] + k4v[0]),
            s.vel[1] + h / 6.0 * (k1v[1] + 2.0 * k2v[1] + 2.0 * k3v[1] + k4v[1]),
        ],
    }
}

/// Integrate the geodesic equation from `(x, xi)` with classical RK4 until
/// the boundary of `dom` is crossed, then refine the exit by bisection.
///
/// `xi` need not be g-unit; non-unit speed reparametrizes the same curve,
/// which is what the ray-primitive homogeneity extension relies on.
pub fn trace_geodesic<M: MetricField>(
    g: &M,
    dom: &DomainSpec,
    x: Point,
    xi: Vector,
    h: f64,
) -> Result<Geodesic> {
    assert!(h > 0.0, "step must be positive");
    let speed = g.gnorm(x, xi);
    let max_t = 10.0 * (2.0 * dom.radius) / speed;
    let mut samples = vec![GeoSample { t: 0.0, pos: x, vel: xi }];
    loop {
        let cur = *samples.last().unwrap();
        if cur.t > max_t {
            return Err(TmtError::TrappedGeodesic {
                max_len: max_t * speed,
            });
        }
        let next = rk4_step(g, &cur, h);
        if dom.boundary(next.pos) > 0.0 {
            // bisect the step fraction; a single RK4 step of size s from
            // `cur` keeps 4th-order accuracy for the refined endpoint
            let mut lo = 0.0f64;
            let mut hi = h;
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                let trial = rk4_step(g, &cur, mid);
                if dom.boundary(trial.pos) > 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
                if hi - lo < 1e-14 {
                    break;
                }
            }
            let frac = 0.5 * (lo + hi);
            let exit = rk4_step(g, &cur, frac);
            let tail_mid = rk4_step(g, &cur, 0.5 * frac);
            return Ok(Geodesic {
                boundary_angle: f64::NAN,
                dir_angle: f64::NAN,
                step: h,
                samples,
                tail_mid,
                exit,
            });
        }
        samples.push(next);
    }
}

/// Discretization of the inward boundary bundle: `n_points` boundary points
/// equally spaced in angle, `n_dirs` directions strictly inside the inward
/// cone at each.
pub fn make_fan<M: MetricField>(
    g: &M,
    dom: &DomainSpec,
    n_points: usize,
    n_dirs: usize,
    h: f64,
) -> Result<Vec<Geodesic>> {
    assert!(n_points >= 1 && n_dirs >= 1);
    let params: Vec<(f64, f64)> = (0..n_points)
        .flat_map(|p| {
            let beta = 2.0 * std::f64::consts::PI * p as f64 / n_points as f64;
            (0..n_dirs).map(move |d| {
                let psi = beta
                    + std::f64::consts::FRAC_PI_2
                    + std::f64::consts::PI * (d as f64 + 1.0) / (n_dirs as f64 + 1.0);
                (beta, psi)
            })
        })
        .collect();
    params
        .into_par_iter()
        .map(|(beta, psi)| {
            let x = dom.boundary_point(beta);
            let dir = [psi.cos(), psi.sin()];
            let n = g.gnorm(x, dir);
            let xi = [dir[0] / n, dir[1] / n];
            let nu = dom.unit_normal(g, x);
            if g.inner(x, xi, nu) >= 0.0 {
                return Err(TmtError::Numeric(
                    "fan direction not inward in the g-metric".into(),
                ));
            }
            let mut geo = trace_geodesic(g, dom, x, xi, h)?;
            geo.boundary_angle = beta;
            geo.dir_angle = psi;
            Ok(geo)
        })
        .collect()
}

/// A closed disk expected to be geodesically convex.
#[derive(Debug, Clone, Copy)]
pub struct ConvexSet {
    pub center: Point,
    pub radius: f64,
}

impl ConvexSet {
    pub fn contains(&self, x: Point, slack: f64) -> bool {
        let dx = x[0] - self.center[0];
        let dy = x[1] - self.center[1];
        (dx * dx + dy * dy).sqrt() <= self.radius + slack
    }

    /// Euclidean distance from a point to the set (negative inside).
    pub fn distance(&self, x: Point) -> f64 {
        let dx = x[0] - self.center[0];
        let dy = x[1] - self.center[1];
        (dx * dx + dy * dy).sqrt() - self.radius
    }

    /// Minimum distance of any geodesic sample to the set.
    pub fn min_distance(&self, geo: &Geodesic) -> f64 {
        geo.samples
            .iter()
            .chain(std::iter::once(&geo.exit))
            .map(|s| self.distance(s.pos))
            .fold(f64::INFINITY, f64::min)
    }

    /// Check geodesic convexity by connecting `n x n` boundary sample pairs
    /// and verifying the connecting geodesics stay inside the set.
    pub fn verify_convex<M: MetricField>(
        &self,
        g: &M,
        dom: &DomainSpec,
        n: usize,
        h: f64,
    ) -> Result<bool> {
        let pts: Vec<Point> = (0..n)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                [
                    self.center[0] + self.radius * a.cos(),
                    self.center[1] + self.radius * a.sin(),
                ]
            })
            .collect();
        let pairs: Vec<(Point, Point)> = (0..n)
            .flat_map(|i| {
                let pts = pts.clone();
                (i + 1..n).map(move |j| (pts[i], pts[j]))
            })
            .collect();
        let ok = pairs
            .into_par_iter()
            .map(|(a, b)| {
                let seg = geodesic_between(g, dom, a, b, h)?;
                let slack = 1e-6 + h * h;
                Ok(seg
                    .samples
                    .iter()
                    .chain(std::iter::once(&seg.exit))
                    .all(|s| self.contains(s.pos, slack)))
            })
            .collect::<Result<Vec<bool>>>()?;
        Ok(ok.into_iter().all(|b| b))
    }
}

/// Signed perpendicular miss of the traced curve relative to the target.
fn shooting_miss<M: MetricField>(
    g: &M,
    dom: &DomainSpec,
    x: Point,
    theta: f64,
    y: Point,
    h: f64,
) -> Result<(f64, Geodesic, usize, f64)> {
    let dir = [theta.cos(), theta.sin()];
    let n = g.gnorm(x, dir);
    let xi = [dir[0] / n, dir[1] / n];
    let ext = dom.extended();
    let geo = trace_geodesic(g, &ext, x, xi, h)?;
    // closest sample to y
    let mut best = 0usize;
    let mut best_d2 = f64::INFINITY;
    for (k, s) in geo.samples.iter().enumerate() {
        let d2 = (s.pos[0] - y[0]).powi(2) + (s.pos[1] - y[1]).powi(2);
        if d2 < best_d2 {
            best_d2 = d2;
            best = k;
        }
    }
    let s = &geo.samples[best];
    let sp = (s.vel[0] * s.vel[0] + s.vel[1] * s.vel[1]).sqrt();
    let u = [s.vel[0] / sp, s.vel[1] / sp];
    let r = [y[0] - s.pos[0], y[1] - s.pos[1]];
    let along = r[0] * u[0] + r[1] * u[1];
    let miss = u[0] * r[1] - u[1] * r[0];
    Ok((miss, geo, best, along))
}

/// Unique connecting geodesic segment on a simple manifold, by shooting with
/// secant iteration on the launch angle. The returned `exit` sample is the
/// refined endpoint at `y`.
pub fn geodesic_between<M: MetricField>(
    g: &M,
    dom: &DomainSpec,
    x: Point,
    y: Point,
    h: f64,
) -> Result<Geodesic> {
    let mut th0 = (y[1] - x[1]).atan2(y[0] - x[0]);
    let (mut f0, ..) = shooting_miss(g, dom, x, th0, y, h)?;
    let mut th1 = th0 + 1e-3;
    let mut result = None;
    for it in 0..100 {
        let (f1, geo, best, along) = shooting_miss(g, dom, x, th1, y, h)?;
        if f1.abs() < 1e-9 {
            result = Some((geo, best, along));
            break;
        }
        let denom = f1 - f0;
        let step = if denom.abs() < 1e-300 {
            0.0
        } else {
            f1 * (th1 - th0) / denom
        };
        th0 = th1;
        f0 = f1;
        th1 -= step;
        if it == 99 {
            return Err(TmtError::ShootingFailure {
                iters: 100,
                miss: f1.abs(),
            });
        }
    }
    let (geo, best, along) = result.ok_or(TmtError::ShootingFailure {
        iters: 100,
        miss: f64::NAN,
    })?;
    // truncate at the refined parameter of closest approach
    let t_star = geo.samples[best].t + along;
    let keep = geo
        .samples
        .iter()
        .take_while(|s| s.t <= t_star + 1e-15)
        .cloned()
        .collect::<Vec<_>>();
    let last = *keep.last().unwrap();
    let tail = rk4_step(g, &last, (t_star - last.t).max(0.0));
    let tail_mid = rk4_step(g, &last, 0.5 * (t_star - last.t).max(0.0));
    Ok(Geodesic {
        boundary_angle: f64::NAN,
        dir_angle: f64::NAN,
        step: geo.step,
        samples: keep,
        tail_mid,
        exit: tail,
    })
}

/// Gauss curvature by finite differences of the Christoffel symbols.
pub fn gauss_curvature<M: MetricField>(g: &M, x: Point, step: f64) -> f64 {
    // R^l_{ijk} = d_i Gamma^l_{jk} - d_j Gamma^l_{ik}
    //             + Gamma^l_{ip} Gamma^p_{jk} - Gamma^l_{jp} Gamma^p_{ik}
    let dgamma = |p: usize| -> Christoffel {
        let mut xp = x;
        let mut xm = x;
        xp[p] += step;
        xm[p] -= step;
        let gp = g.christoffel(xp);
        let gm = g.christoffel(xm);
        let mut out = [[[0.0f64; 2]; 2]; 2];
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    out[k][i][j] = (gp[k][i][j] - gm[k][i][j]) / (2.0 * step);
                }
            }
        }
        out
    };
    let d1 = dgamma(0);
    let d2 = dgamma(1);
    let gam = g.christoffel(x);
    let mut r = [0.0f64; 2]; // R^l_{122}
    for (l, slot) in r.iter_mut().enumerate() {
        let mut acc = d1[l][1][1] - d2[l][0][1];
        for p in 0..2 {
            acc += gam[l][0][p] * gam[p][1][1] - gam[l][1][p] * gam[p][0][1];
        }
        *slot = acc;
    }
    let gm = g.metric(x);
    let det = gm[0] * gm[3] - gm[1] * gm[2];
    (gm[0] * r[0] + gm[1] * r[1]) / det
}

/// Result of the simplicity diagnostics.
#[derive(Debug, Clone)]
pub struct SimplicityReport {
    /// Worst second-fundamental-form margin over the boundary samples.
    pub convexity_margin: f64,
    /// Smallest Jacobi-field value over (0, l] across the fan.
    pub jacobi_min: f64,
    pub trapped_geodesics: usize,
    pub conjugate_points: usize,
}

impl SimplicityReport {
    pub fn passed(&self) -> bool {
        self.convexity_margin > 0.0 && self.conjugate_points == 0 && self.trapped_geodesics == 0
    }
}

/// Strict convexity of the boundary plus absence of conjugate points along
/// a fan of geodesics (Jacobi equation J'' + K J = 0, J(0)=0, J'(0)=1).
pub fn simplicity_check<M: MetricField>(
    g: &M,
    dom: &DomainSpec,
    fan_points: usize,
    fan_dirs: usize,
    h: f64,
) -> SimplicityReport {
    // (a) strict convexity at 256 boundary points
    let mut margin = f64::INFINITY;
    for k in 0..256 {
        let a = 2.0 * std::f64::consts::PI * k as f64 / 256.0;
        let x = dom.boundary_point(a);
        let nu = dom.unit_normal(g, x);
        // g-unit tangent: Euclidean tangent with the nu component removed
        let tau = [-a.sin(), a.cos()];
        let proj = g.inner(x, tau, nu);
        let mut xi = [tau[0] - proj * nu[0], tau[1] - proj * nu[1]];
        let n = g.gnorm(x, xi);
        xi = [xi[0] / n, xi[1] / n];
        // covariant derivative of the normal field along xi
        let fd = 1e-5;
        let mut dnu = [[0.0f64; 2]; 2]; // dnu[i][k] = d nu^k / d x^i
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += fd;
            xm[i] -= fd;
            let np = dom.unit_normal(g, xp);
            let nm = dom.unit_normal(g, xm);
            for k2 in 0..2 {
                dnu[i][k2] = (np[k2] - nm[k2]) / (2.0 * fd);
            }
        }
        let gam = g.christoffel(x);
        let mut cov = [0.0f64; 2];
        for k2 in 0..2 {
            let mut acc = xi[0] * dnu[0][k2] + xi[1] * dnu[1][k2];
            for i in 0..2 {
                for j in 0..2 {
                    acc += gam[k2][i][j] * xi[i] * nu[j];
                }
            }
            cov[k2] = acc;
        }
        margin = margin.min(g.inner(x, cov, xi));
    }

    // (b) Jacobi fields along a fan
    let params: Vec<(f64, f64)> = (0..fan_points)
        .flat_map(|p| {
            let beta = 2.0 * std::f64::consts::PI * p as f64 / fan_points as f64;
            (0..fan_dirs).map(move |d| {
                let psi = beta
                    + std::f64::consts::FRAC_PI_2
                    + std::f64::consts::PI * (d as f64 + 1.0) / (fan_dirs as f64 + 1.0);
                (beta, psi)
            })
        })
        .collect();
    let per_geo: Vec<(f64, bool, bool)> = params
        .into_par_iter()
        .map(|(beta, psi)| {
            let x = dom.boundary_point(beta);
            let dir = [psi.cos(), psi.sin()];
            let n = g.gnorm(x, dir);
            let xi = [dir[0] / n, dir[1] / n];
            let geo = match trace_geodesic(g, dom, x, xi, h) {
                Ok(geo) => geo,
                Err(_) => return (f64::INFINITY, true, false),
            };
            // integrate J'' = -K J on a coarsened sample grid
            let stride = ((0.01 / h).round() as usize).max(1);
            let coarse: Vec<&GeoSample> = geo
                .samples
                .iter()
                .step_by(stride)
                .chain(std::iter::once(&geo.exit))
                .collect();
            let mut j = 0.0f64;
            let mut jp = 1.0f64;
            let mut jmin = f64::INFINITY;
            let mut conj = false;
            for w in coarse.windows(2) {
                let dt = w[1].t - w[0].t;
                if dt <= 0.0 {
                    continue;
                }
                let k0 = gauss_curvature(g, w[0].pos, 1e-4);
                let kmid = gauss_curvature(
                    g,
                    [
                        0.5 * (w[0].pos[0] + w[1].pos[0]),
                        0.5 * (w[0].pos[1] + w[1].pos[1]),
                    ],
                    1e-4,
                );
                let k1 = gauss_curvature(g, w[1].pos, 1e-4);
                // RK4 for the linear system (J, J')
                let f = |jj: f64, jjp: f64, kk: f64| (jjp, -kk * jj);
                let (a1, b1) = f(j, jp, k0);
                let (a2, b2) = f(j + 0.5 * dt * a1, jp + 0.5 * dt * b1, kmid);
                let (a3, b3) = f(j + 0.5 * dt * a2, jp + 0.5 * dt * b2, kmid);
                let (a4, b4) = f(j + dt * a3, jp + dt * b3, k1);
                j += dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
                jp += dt / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
                if j <= 0.0 && w[1].t > 0.0 {
                    conj = true;
                }
                jmin = jmin.min(j);
            }
            (jmin, false, conj)
        })
        .collect();
    let mut jacobi_min = f64::INFINITY;
    let mut trapped = 0;
    let mut conjugate = 0;
    for (jmin, is_trapped, conj) in per_geo {
        if is_trapped {
            trapped += 1;
            continue;
        }
        jacobi_min = jacobi_min.min(jmin);
        if conj {
            conjugate += 1;
        }
    }
    SimplicityReport {
        convexity_margin: margin,
        jacobi_min,
        trapped_geodesics: trapped,
        conjugate_points: conjugate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conformal(coef: f64) -> MetricSpec {
        MetricSpec::conformal_expr(&format!("{coef}*(x1^2 + x2^2)")).unwrap()
    }

    #[test]
    fn euclidean_christoffels_vanish() {
        let g = MetricSpec::euclidean();
        let gamma = g.christoffel([0.3, -0.4]);
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    assert_eq!(gamma[k][i][j], 0.0);
                }
            }
        }
    }

    #[test]
    fn conformal_christoffels_match_closed_form() {
        // g = e^{2 lambda} delta, lambda = 0.1(x1^2+x2^2):
        // Gamma^1_11 = d1 lambda, Gamma^1_12 = d2 lambda, Gamma^1_22 = -d1 lambda,
        // Gamma^2_22 = d2 lambda, Gamma^2_12 = d1 lambda, Gamma^2_11 = -d2 lambda.
        let g = conformal(0.1);
        let x = [0.3, -0.5];
        let (l1, l2) = (0.2 * x[0], 0.2 * x[1]);
        let gam = g.christoffel(x);
        let tol = 1e-6;
        assert!((gam[0][0][0] - l1).abs() < tol);
        assert!((gam[0][0][1] - l2).abs() < tol);
        assert!((gam[0][1][1] + l1).abs() < tol);
        assert!((gam[1][1][1] - l2).abs() < tol);
        assert!((gam[1][0][1] - l1).abs() < tol);
        assert!((gam[1][0][0] + l2).abs() < tol);
        // symmetry in the lower pair
        for k in 0..2 {
            assert!((gam[k][0][1] - gam[k][1][0]).abs() < 1e-12);
        }
    }

    #[test]
    fn euclidean_diameter_chord() {
        let g = MetricSpec::euclidean();
        let dom = DomainSpec::new(1.0);
        let geo = trace_geodesic(&g, &dom, [-1.0, 0.0], [1.0, 0.0], 1e-3).unwrap();
        assert!((geo.exit_param() - 2.0).abs() < 1e-9);
        assert!(dom.boundary(geo.exit.pos).abs() < 1e-9);
        // straight chord: samples stay on the line x2 = 0
        for s in &geo.samples {
            assert!(s.pos[1].abs() < 1e-12);
        }
        assert!(geo.speed_drift(&g) < 1e-12);
    }

    #[test]
    fn euclidean_offset_chord_length() {
        let g = MetricSpec::euclidean();
        let dom = DomainSpec::new(1.0);
        let d = 0.37;
        let geo = trace_geodesic(&g, &dom, [-(1.0f64 - d * d).sqrt(), d], [1.0, 0.0], 1e-3).unwrap();
        assert!((geo.exit_param() - 2.0 * (1.0f64 - d * d).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn conformal_exit_param_converges_at_fourth_order() {
        let g = conformal(0.1);
        let dom = DomainSpec::new(1.0);
        let x = [-1.0, 0.0];
        let xi0 = [1.0, 0.2];
        let n = g.gnorm(x, xi0);
        let xi = [xi0[0] / n, xi0[1] / n];
        let h = 2e-3;
        let coarse = trace_geodesic(&g, &dom, x, xi, h).unwrap();
        let fine = trace_geodesic(&g, &dom, x, xi, h / 16.0).unwrap();
        assert!((coarse.exit_param() - fine.exit_param()).abs() < 10.0 * h.powi(4));
        assert!(coarse.speed_drift(&g) < 1e-6);
    }

    #[test]
    fn trapped_geodesic_errors() {
        // strong rim waveguide: e^{2 lambda} with lambda rising steeply
        let g = MetricSpec::conformal_expr("4*(x1^2 + x2^2)").unwrap();
        let dom = DomainSpec::new(1.0);
        // nearly tangential launch hugs the rim
        let x = dom.boundary_point(0.0);
        let dir = [0.0017f64.cos() - 1.0 - 0.05, 1.0];
        let n = g.gnorm(x, dir);
        let xi = [dir[0] / n, dir[1] / n];
        match trace_geodesic(&g, &dom, x, xi, 1e-3) {
            Err(TmtError::TrappedGeodesic { .. }) => {}
            Ok(geo) => {
                // fine as long as it exits within the cap
                assert!(geo.exit_param() <= 20.0);
            }
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn fan_directions_are_inward() {
        let g = MetricSpec::euclidean();
        let dom = DomainSpec::new(1.0);
        let fan = make_fan(&g, &dom, 4, 1, 1e-2).unwrap();
        assert_eq!(fan.len(), 4);
        for geo in &fan {
            let s0 = &geo.samples[0];
            let nu = dom.unit_normal(&g, s0.pos);
            assert!(g.inner(s0.pos, s0.vel, nu) < 0.0);
        }
        // midpoints of all chords lie inside
        let fan = make_fan(&g, &dom, 64, 32, 1e-2).unwrap();
        assert_eq!(fan.len(), 64 * 32);
        for geo in &fan {
            let mid = &geo.samples[geo.samples.len() / 2];
            assert!(dom.contains(mid.pos));
        }
    }

    #[test]
    fn fan_filtering_matches_chord_distance() {
        let g = MetricSpec::euclidean();
        let dom = DomainSpec::new(1.0);
        let k = ConvexSet {
            center: [0.0, 0.0],
            radius: 0.3,
        };
        let fan = make_fan(&g, &dom, 16, 8, 1e-2).unwrap();
        for geo in &fan {
            // Euclidean chord: signed distance from the origin
            let s0 = &geo.samples[0];
            let sp = (s0.vel[0] * s0.vel[0] + s0.vel[1] * s0.vel[1]).sqrt();
            let u = [s0.vel[0] / sp, s0.vel[1] / sp];
            let d = (u[0] * (0.0 - s0.pos[1]) - u[1] * (0.0 - s0.pos[0])).abs();
            let avoiding = k.min_distance(geo) > 0.0;
            assert_eq!(avoiding, d > 0.3, "chord distance {d}");
        }
    }

    #[test]
    fn gauss_curvature_matches_conformal_formula() {
        // K = -e^{-2 lambda} Laplacian(lambda); lambda = c r^2 gives -4c e^{-2 lambda}
        for c in [0.1, -0.3] {
            let g = conformal(c);
            for x in [[0.2, 0.1], [-0.4, 0.5]] {
                let lam = c * (x[0] * x[0] + x[1] * x[1]);
                let expect = -4.0 * c * (-2.0 * lam).exp();
                let got = gauss_curvature(&g, x, 1e-4);
                assert!(
                    (got - expect).abs() < 1e-4 * (1.0 + expect.abs()),
                    "K={got}, expected {expect}"
                );
            }
        }
    }

    #[test]
    fn simplicity_reference_metrics_pass() {
        let dom = DomainSpec::new(1.0);
        let rep = simplicity_check(&MetricSpec::euclidean(), &dom, 16, 4, 2e-3);
        assert!(rep.passed(), "euclidean: {rep:?}");
        assert!(rep.jacobi_min > 0.0);
        let rep = simplicity_check(&conformal(0.1), &dom, 16, 4, 2e-3);
        assert!(rep.passed(), "mild conformal: {rep:?}");
    }

    #[test]
    fn simplicity_focusing_metric_fails() {
        // lambda = -2 r^2 concentrates curvature K = +8 e^{4 r^2} > 0
        let dom = DomainSpec::new(1.0);
        let rep = simplicity_check(&conformal(-2.0), &dom, 16, 4, 2e-3);
        assert!(!rep.passed(), "focusing metric must fail: {rep:?}");
        assert!(rep.conjugate_points > 0 || rep.trapped_geodesics > 0);
    }

    #[test]
    fn two_point_euclidean_segment() {
        let g = MetricSpec::euclidean();
        let dom = DomainSpec::new(1.0);
        let seg = geodesic_between(&g, &dom, [0.0, 0.0], [0.5, 0.0], 1e-3).unwrap();
        assert!((seg.exit_param() - 0.5).abs() < 1e-6);
        for s in &seg.samples {
            assert!(s.pos[1].abs() < 1e-9);
        }
        let end = seg.exit.pos;
        assert!(((end[0] - 0.5).powi(2) + end[1].powi(2)).sqrt() < 1e-8);
    }

    #[test]
    fn two_point_reversal_matches() {
        let g = conformal(0.1);
        let dom = DomainSpec::new(1.0);
        let a = [-0.4, 0.2];
        let b = [0.5, -0.3];
        let fwd = geodesic_between(&g, &dom, a, b, 1e-3).unwrap();
        let bwd = geodesic_between(&g, &dom, b, a, 1e-3).unwrap();
        let lf = fwd.exit_param();
        let lb = bwd.exit_param();
        assert!((lf - lb).abs() < 1e-5);
        // positions match under t -> L - t
        for s in fwd.samples.iter().step_by(50) {
            let t_rev = lb - s.t;
            // locate the bracketing backward sample
            let k = (t_rev / bwd.step).floor() as usize;
            if k + 1 >= bwd.samples.len() {
                continue;
            }
            let w = (t_rev - bwd.samples[k].t) / bwd.step;
            let px = (1.0 - w) * bwd.samples[k].pos[0] + w * bwd.samples[k + 1].pos[0];
            let py = (1.0 - w) * bwd.samples[k].pos[1] + w * bwd.samples[k + 1].pos[1];
            assert!(
                ((s.pos[0] - px).powi(2) + (s.pos[1] - py).powi(2)).sqrt() < 1e-5,
                "reversal mismatch at t={}",
                s.t
            );
        }
    }

    #[test]
    fn convex_disk_verifies_in_euclidean() {
        let g = MetricSpec::euclidean();
        let dom = DomainSpec::new(1.0);
        let k = ConvexSet {
            center: [0.0, 0.0],
            radius: 0.3,
        };
        assert!(k.verify_convex(&g, &dom, 8, 2e-3).unwrap());
    }

    #[test]
    fn conformal_midpoint_matches_dijkstra() {
        // graph shortest path on a dense grid as an independent oracle
        let g = conformal(0.1);
        let dom = DomainSpec::new(1.0);
        let a = [-0.6, 0.0];
        let b = [0.6, 0.1];
        let seg = geodesic_between(&g, &dom, a, b, 1e-3).unwrap();
        let l = seg.exit_param();
        let mid_geo = {
            let k = (0.5 * l / seg.step) as usize;
            seg.samples[k].pos
        };

        // Dijkstra with 16-neighbour stencil on a 161x161 grid
        let n = 161usize;
        let grid = Grid2::square(n);
        let node = |p: Point| -> usize {
            let i = ((p[0] + 1.0) / grid.d1).round() as usize;
            let j = ((p[1] + 1.0) / grid.d2).round() as usize;
            grid.idx(i, j)
        };
        let lam = |x: f64, y: f64| (0.1 * (x * x + y * y)).exp();
        let mut dist = vec![f64::INFINITY; grid.len()];
        let mut prev = vec![usize::MAX; grid.len()];
        let src = node(a);
        let dst = node(b);
        dist[src] = 0.0;
        let mut heap = std::collections::BinaryHeap::new();
        heap.push((std::cmp::Reverse(ordered_float(0.0)), src));
        let offsets: Vec<(i64, i64)> = vec![
            (1, 0), (0, 1), (-1, 0), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1),
            (2, 1), (1, 2), (-2, 1), (-1, 2), (2, -1), (1, -2), (-2, -1), (-1, -2),
        ];
        while let Some((std::cmp::Reverse(d), u)) = heap.pop() {
            let d = f64::from_bits(d);
            if d > dist[u] {
                continue;
            }
            if u == dst {
                break;
            }
            let (ux, uy) = (u % n, u / n);
            let (px, py) = grid.coords_of(u);
            for &(dx, dy) in &offsets {
                let vx = ux as i64 + dx;
                let vy = uy as i64 + dy;
                if vx < 0 || vy < 0 || vx >= n as i64 || vy >= n as i64 {
                    continue;
                }
                let v = grid.idx(vx as usize, vy as usize);
                let (qx, qy) = grid.coords_of(v);
                let euc = ((qx - px).powi(2) + (qy - py).powi(2)).sqrt();
                let w = 0.5 * (lam(px, py) + lam(qx, qy)) * euc;
                if dist[u] + w < dist[v] {
                    dist[v] = dist[u] + w;
                    prev[v] = u;
                    heap.push((std::cmp::Reverse(ordered_float(dist[v])), v));
                }
            }
        }
        // walk the path and find its metric midpoint
        let mut path = vec![dst];
        while *path.last().unwrap() != src {
            path.push(prev[*path.last().unwrap()]);
        }
        path.reverse();
        let total = dist[dst];
        let mut acc = 0.0;
        let mut mid_graph = grid.coords_of(src);
        for w in path.windows(2) {
            let (px, py) = grid.coords_of(w[0]);
            let (qx, qy) = grid.coords_of(w[1]);
            let euc = ((qx - px).powi(2) + (qy - py).powi(2)).sqrt();
            let step = 0.5 * (lam(px, py) + lam(qx, qy)) * euc;
            if acc + step >= 0.5 * total {
                mid_graph = (qx, qy);
                break;
            }
            acc += step;
        }
        let dx = mid_geo[0] - mid_graph.0;
        let dy = mid_geo[1] - mid_graph.1;
        // the 16-neighbour graph overshoots; a few grid cells of slack
        assert!(
            (dx * dx + dy * dy).sqrt() < 4.0 * grid.d1,
            "midpoint mismatch: geo {mid_geo:?} vs graph {mid_graph:?}"
        );
    }

    fn ordered_float(f: f64) -> u64 {
        f.to_bits()
    }
}
