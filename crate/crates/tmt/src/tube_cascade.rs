//! Semi-geodesic tube coordinates around a reference geodesic and the
//! triangular ODE cascade producing the (m−1)-tensor v with h = f − dv
//! having all last-index-n components zero, plus the closed-form normal
//! expansion of dv used as an independent cross-check.
//!
//! Chart convention: axis 1 is the transversal coordinate x′ ∈ [−ε, ε],
//! axis 2 is the longitudinal coordinate x^n ∈ [0, length], so the
//! distinguished index n is 2 and matches the `Grid2` lattice layout.

use crate::geometry::{
    invert2, rk4_step, Christoffel, DomainSpec, GeoSample, Geodesic, MetricField, Point, Vector,
    EXTENSION_COLLAR,
};
use crate::grid::{self, Grid2};
use crate::symtensor::{pack_index, SymTensorField};
use crate::transforms::inner_derivative;
use crate::{Result, TmtError};
use rayon::prelude::*;

/// Finest integration substep used while tracing the chart family.
const TRACE_STEP: f64 = 5e-3;
/// Relative Jacobian-determinant drop that flags a chart fold.
const FOLD_RATIO: f64 = 0.05;

/// Pullback metric of the chart map: node samples with node Christoffels
/// from grid differences, bilinear between nodes.
#[derive(Debug, Clone)]
pub struct ChartMetric {
    pub grid: Grid2,
    /// Node samples `[ĝ11, ĝ12, ĝ22]`.
    pub samples: Vec<[f64; 3]>,
    /// Node Christoffels, flat `Γ̂^k_{ij}` at `k*4 + i*2 + j`.
    gamma: Vec<[f64; 8]>,
}

impl ChartMetric {
    fn from_samples(grid: Grid2, samples: Vec<[f64; 3]>) -> ChartMetric {
        let comp = |c: usize| -> Vec<f64> { samples.iter().map(|s| s[c]).collect() };
        let (g11, g12, g22) = (comp(0), comp(1), comp(2));
        let mut gamma = vec![[0.0f64; 8]; grid.len()];
        for i2 in 0..grid.n2 {
            for i1 in 0..grid.n1 {
                let node = grid.idx(i1, i2);
                let d = |arr: &[f64], p: usize| {
                    if p == 0 {
                        grid::deriv1(&grid, arr, i1, i2)
                    } else {
                        grid::deriv2(&grid, arr, i1, i2)
                    }
                };
                let mut dg = [[[0.0f64; 2]; 2]; 2];
                for p in 0..2 {
                    dg[p][0][0] = d(&g11, p);
                    dg[p][0][1] = d(&g12, p);
                    dg[p][1][0] = dg[p][0][1];
                    dg[p][1][1] = d(&g22, p);
                }
                let gm = [g11[node], g12[node], g12[node], g22[node]];
                let ginv = invert2(gm);
                for k in 0..2 {
                    for i in 0..2 {
                        for j in 0..2 {
                            let mut acc = 0.0;
                            for p in 0..2 {
                                acc += ginv[k * 2 + p] * (dg[i][j][p] + dg[j][i][p] - dg[p][i][j]);
                            }
                            gamma[node][k * 4 + i * 2 + j] = 0.5 * acc;
                        }
                    }
                }
            }
        }
        ChartMetric {
            grid,
            samples,
            gamma,
        }
    }

    pub fn gamma_at_node(&self, node: usize) -> Christoffel {
        let g = &self.gamma[node];
        [
            [[g[0], g[1]], [g[2], g[3]]],
            [[g[4], g[5]], [g[6], g[7]]],
        ]
    }
}

impl MetricField for ChartMetric {
    fn metric(&self, x: Point) -> [f64; 4] {
        let st = self.grid.bilinear(x[0], x[1]);
        if st.len == 0 {
            return [1.0, 0.0, 0.0, 1.0];
        }
        let mut acc = [0.0f64; 3];
        for (n, w) in st.iter() {
            for (c, slot) in acc.iter_mut().enumerate() {
                *slot += w * self.samples[n][c];
            }
        }
        [acc[0], acc[1], acc[1], acc[2]]
    }

    fn christoffel(&self, x: Point) -> Christoffel {
        let st = self.grid.bilinear(x[0], x[1]);
        let mut acc = [0.0f64; 8];
        for (n, w) in st.iter() {
            for (c, slot) in acc.iter_mut().enumerate() {
                *slot += w * self.gamma[n][c];
            }
        }
        [
            [[acc[0], acc[1]], [acc[2], acc[3]]],
            [[acc[4], acc[5]], [acc[6], acc[7]]],
        ]
    }
}

/// Tube coordinates around a reference geodesic in which ĝ_{ni} = δ_{ni}.
#[derive(Debug, Clone)]
pub struct SemiGeodesicChart {
    /// Chart lattice: axis 1 = x′, axis 2 = x^n.
    pub grid: Grid2,
    pub eps: f64,
    pub length: f64,
    /// World position of each chart node.
    pub world_pos: Vec<Point>,
    /// ∂/∂x^n in world coordinates (traced geodesic velocities).
    pub world_vel: Vec<Vector>,
    /// ∂/∂x′ in world coordinates (transversal finite differences).
    pub world_trans: Vec<Vector>,
    pub metric: ChartMetric,
    /// Max |ĝ_{ni} − δ_{ni}| over interior chart nodes.
    pub max_offdiag: f64,
    /// Max |Γ̂^i_{nn}| and |Γ̂^n_{in}| over interior chart nodes.
    pub max_gamma_n: f64,
}

impl SemiGeodesicChart {
    /// Debug dump of the chart map and pullback metric.
    pub fn dump_csv(&self) -> String {
        let mut s = String::from("xp,xn,world_x1,world_x2,g11,g12,g22\n");
        for node in 0..self.grid.len() {
            let (xp, xn) = self.grid.coords_of(node);
            let p = self.world_pos[node];
            let m = self.metric.samples[node];
            s.push_str(&format!(
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                xp, xn, p[0], p[1], m[0], m[1], m[2]
            ));
        }
        s
    }
}

/// One RK4 step of the coupled system: geodesic (pos, vel) plus parallel
/// transport of `w` along it.
fn transport_step<M: MetricField>(
    g: &M,
    s: (Point, Vector, Vector),
    h: f64,
) -> (Point, Vector, Vector) {
    let rhs = |pos: Point, vel: Vector, w: Vector| -> (Vector, Vector, Vector) {
        let gamma = g.christoffel(pos);
        let mut acc = [0.0f64; 2];
        let mut dw = [0.0f64; 2];
        for k in 0..2 {
            let mut a = 0.0;
            let mut b = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    a += gamma[k][i][j] * vel[i] * vel[j];
                    b += gamma[k][i][j] * vel[i] * w[j];
                }
            }
            acc[k] = -a;
            dw[k] = -b;
        }
        (vel, acc, dw)
    };
    let add = |a: [f64; 2], b: [f64; 2], c: f64| [a[0] + c * b[0], a[1] + c * b[1]];
    let (p0, v0, w0) = s;
    let (k1p, k1v, k1w) = rhs(p0, v0, w0);
    let (k2p, k2v, k2w) = rhs(add(p0, k1p, 0.5 * h), add(v0, k1v, 0.5 * h), add(w0, k1w, 0.5 * h));
    let (k3p, k3v, k3w) = rhs(add(p0, k2p, 0.5 * h), add(v0, k2v, 0.5 * h), add(w0, k2w, 0.5 * h));
    let (k4p, k4v, k4w) = rhs(add(p0, k3p, h), add(v0, k3v, h), add(w0, k3w, h));
    let comb = |a: [f64; 2], k1: [f64; 2], k2: [f64; 2], k3: [f64; 2], k4: [f64; 2]| {
        [
            a[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            a[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ]
    };
    (
        comb(p0, k1p, k2p, k3p, k4p),
        comb(v0, k1v, k2v, k3v, k4v),
        comb(w0, k1w, k2w, k3w, k4w),
    )
}

/// Build semi-geodesic tube coordinates around `gamma0` by shooting the
/// one-parameter family from a g-orthogonal transversal through its start,
/// with initial velocities parallel-transported along the transversal.
///
/// Validates the defining invariants (ĝ_{ni} = δ_{ni} within 1e−4 and
/// Γ̂^i_{nn}, Γ̂^n_{in} within 1e−3 at interior nodes) and monitors the
/// Jacobian of the chart map for folds.
pub fn build_chart<M: MetricField>(
    g: &M,
    dom: &DomainSpec,
    gamma0: &Geodesic,
    eps: f64,
    n_trans: usize,
    n_long: usize,
) -> Result<SemiGeodesicChart> {
    if n_trans < 3 || n_trans % 2 == 0 {
        return Err(TmtError::Argument(
            "n_trans must be odd and at least 3".into(),
        ));
    }
    if n_long < 5 {
        return Err(TmtError::Argument("n_long must be at least 5".into()));
    }
    if eps <= 0.0 || eps > EXTENSION_COLLAR {
        return Err(TmtError::Argument(format!(
            "eps must lie in (0, {EXTENSION_COLLAR}] so the tube stays in the extended domain"
        )));
    }
    let x0 = gamma0.samples[0].pos;
    let v0 = gamma0.samples[0].vel;
    let speed = g.gnorm(x0, v0);
    let xi0 = [v0[0] / speed, v0[1] / speed];
    let length = gamma0.exit.t * speed;

    // g-unit transversal direction orthogonal to the reference velocity
    let w = [-xi0[1], xi0[0]];
    let proj = g.inner(x0, w, xi0);
    let mut eta = [w[0] - proj * xi0[0], w[1] - proj * xi0[1]];
    let en = g.gnorm(x0, eta);
    eta = [eta[0] / en, eta[1] / en];

    let gr = Grid2::new(n_trans, n_long, -eps, eps, 0.0, length);
    let center = (n_trans - 1) / 2;
    let sub_t = ((gr.d1 / TRACE_STEP).ceil() as usize).max(1);
    let ht = gr.d1 / sub_t as f64;
    // transversal walk: (position, tangent, transported reference velocity)
    let mut starts = vec![(x0, xi0); n_trans];
    let mut state = (x0, eta, xi0);
    for s in center + 1..n_trans {
        for _ in 0..sub_t {
            state = transport_step(g, state, ht);
        }
        starts[s] = (state.0, state.2);
    }
    state = (x0, [-eta[0], -eta[1]], xi0);
    for s in (0..center).rev() {
        for _ in 0..sub_t {
            state = transport_step(g, state, ht);
        }
        starts[s] = (state.0, state.2);
    }

    // shoot the family, recording chart nodes along each line
    let sub_n = ((gr.d2 / TRACE_STEP).ceil() as usize).max(1);
    let hn = gr.d2 / sub_n as f64;
    let lines: Vec<Vec<(Point, Vector)>> = starts
        .par_iter()
        .map(|&(p, xi)| {
            let mut out = Vec::with_capacity(n_long);
            let mut s = GeoSample {
                t: 0.0,
                pos: p,
                vel: xi,
            };
            out.push((s.pos, s.vel));
            for _ in 1..n_long {
                for _ in 0..sub_n {
                    s = rk4_step(g, &s, hn);
                }
                out.push((s.pos, s.vel));
            }
            out
        })
        .collect();

    let mut world_pos = vec![[0.0f64; 2]; gr.len()];
    let mut world_vel = vec![[0.0f64; 2]; gr.len()];
    for (i1, line) in lines.iter().enumerate() {
        for (i2, &(p, v)) in line.iter().enumerate() {
            let node = gr.idx(i1, i2);
            world_pos[node] = p;
            world_vel[node] = v;
        }
    }
    let ext = dom.extended();
    for (node, p) in world_pos.iter().enumerate() {
        if ext.boundary(*p) > 1e-9 {
            let (xp, xn) = gr.coords_of(node);
            return Err(TmtError::Precondition(format!(
                "chart leaves the extended domain at x'={xp:.4}, x^n={xn:.4}"
            )));
        }
    }

    // transversal coordinate frame by finite differences across lines
    let px: Vec<f64> = world_pos.iter().map(|p| p[0]).collect();
    let py: Vec<f64> = world_pos.iter().map(|p| p[1]).collect();
    let mut world_trans = vec![[0.0f64; 2]; gr.len()];
    for i2 in 0..n_long {
        for i1 in 0..n_trans {
            world_trans[gr.idx(i1, i2)] = [
                grid::deriv1(&gr, &px, i1, i2),
                grid::deriv1(&gr, &py, i1, i2),
            ];
        }
    }

    // fold monitor: per-line relative drop (or sign flip) of det [∂', ∂_n]
    for i1 in 0..n_trans {
        let det_at = |i2: usize| {
            let n = gr.idx(i1, i2);
            let t = world_trans[n];
            let v = world_vel[n];
            t[0] * v[1] - t[1] * v[0]
        };
        let d0 = det_at(0);
        for i2 in 1..n_long {
            let d = det_at(i2);
            if d * d0 <= 0.0 || d.abs() < FOLD_RATIO * d0.abs() {
                let (xp, xn) = gr.coords(i1, i2);
                return Err(TmtError::ChartFold { xp, xn, jac: d });
            }
        }
    }

    let samples: Vec<[f64; 3]> = (0..gr.len())
        .map(|node| {
            let p = world_pos[node];
            let t = world_trans[node];
            let v = world_vel[node];
            [g.inner(p, t, t), g.inner(p, t, v), g.inner(p, v, v)]
        })
        .collect();
    let metric = ChartMetric::from_samples(gr.clone(), samples);

    let mut max_offdiag = 0.0f64;
    let mut max_gamma_n = 0.0f64;
    for i1 in 1..n_trans - 1 {
        for i2 in 1..n_long - 1 {
            let node = gr.idx(i1, i2);
            let s = metric.samples[node];
            max_offdiag = max_offdiag.max(s[1].abs()).max((s[2] - 1.0).abs());
            let ga = metric.gamma_at_node(node);
            for i in 0..2 {
                max_gamma_n = max_gamma_n.max(ga[i][1][1].abs()).max(ga[1][i][1].abs());
            }
        }
    }
    if max_offdiag > 1e-4 {
        return Err(TmtError::Numeric(format!(
            "chart invariant violated: max |g_ni - delta_ni| = {max_offdiag:.3e} > 1e-4"
        )));
    }
    if max_gamma_n > 1e-3 {
        return Err(TmtError::Numeric(format!(
            "chart invariant violated: max |Gamma^i_nn|, |Gamma^n_in| = {max_gamma_n:.3e} > 1e-3"
        )));
    }

    Ok(SemiGeodesicChart {
        grid: gr,
        eps,
        length,
        world_pos,
        world_vel,
        world_trans,
        metric,
        max_offdiag,
        max_gamma_n,
    })
}

/// [`build_chart`] with shrink-and-retry on chart folds: halves ε up to
/// four times before giving up.
pub fn build_chart_retrying<M: MetricField>(
    g: &M,
    dom: &DomainSpec,
    gamma0: &Geodesic,
    eps: f64,
    n_trans: usize,
    n_long: usize,
) -> Result<SemiGeodesicChart> {
    let mut eps = eps;
    let mut last = None;
    for _ in 0..=4 {
        match build_chart(g, dom, gamma0, eps, n_trans, n_long) {
            Err(e @ TmtError::ChartFold { .. }) => {
                last = Some(e);
                eps *= 0.5;
            }
            other => return other,
        }
    }
    Err(last.unwrap())
}

/// Pull a world-grid tensor field back to the chart grid: bilinear sampling
/// at the chart image points, indices contracted with the chart Jacobian.
pub fn pull_back_field(f: &SymTensorField, chart: &SemiGeodesicChart) -> SymTensorField {
    let gr = chart.grid.clone();
    let mask = vec![true; gr.len()];
    let mut out = SymTensorField::zeros(gr, f.order, mask);
    for node in 0..out.grid.len() {
        let p = chart.world_pos[node];
        let world = f.eval(p[0], p[1]);
        let t = chart.world_trans[node];
        let v = chart.world_vel[node];
        let pulled = world.pull_back(&[t[0], t[1], v[0], v[1]]).unwrap();
        out.set_tensor(node, &pulled);
    }
    out
}

/// Result of the triangular cascade: the potential generator v, the reduced
/// field h = f − dv and the worst violation of `h_{i…n} = 0`.
#[derive(Debug, Clone)]
pub struct CascadeResult {
    pub v: SymTensorField,
    pub h: SymTensorField,
    /// Max |h component with at least one n index| over chart nodes.
    pub normal_residual: f64,
}

/// Solve the triangular ODE system in x^n stage by stage with zero data on
/// the inflow edge, then assemble h = f − dv with the generic covariant
/// derivative in chart coordinates.
pub fn cascade_solve(f: &SymTensorField, chart: &SemiGeodesicChart) -> Result<CascadeResult> {
    cascade_solve_with_initial(f, chart, 0.0)
}

/// Cascade with a constant initial value on the inflow edge (zero in the
/// proposition; nonzero values support the well-posedness check).
pub fn cascade_solve_with_initial(
    f: &SymTensorField,
    chart: &SemiGeodesicChart,
    init: f64,
) -> Result<CascadeResult> {
    if f.order == 0 {
        return Err(TmtError::Argument("cascade needs tensor order >= 1".into()));
    }
    if f.grid != chart.grid {
        return Err(TmtError::Argument(
            "field is not sampled on the chart grid".into(),
        ));
    }
    let m = f.order;
    let gr = &chart.grid;
    let (n1, n2) = (gr.n1, gr.n2);
    // Christoffel node tables entering the reduced 2-D system
    let mut g1_1n = vec![0.0f64; gr.len()];
    let mut g2_1n = vec![0.0f64; gr.len()];
    let mut g1_11 = vec![0.0f64; gr.len()];
    let mut g2_11 = vec![0.0f64; gr.len()];
    for node in 0..gr.len() {
        let ga = chart.metric.gamma_at_node(node);
        g1_1n[node] = ga[0][0][1];
        g2_1n[node] = ga[1][0][1];
        g1_11[node] = ga[0][0][0];
        g2_11[node] = ga[1][0][0];
    }

    // stage k solves for the v component with k transversal indices:
    // dV_k/dx^n = 2k(Γ̂^1_{1n} V_k + Γ̂^n_{1n} V_{k−1})
    //   + [m F_k − k ∂_1 V_{k−1} + 2k(k−1)(Γ̂^1_{11} V_{k−1} + Γ̂^n_{11} V_{k−2})]/(m−k)
    let mut stages: Vec<Vec<f64>> = Vec::with_capacity(m);
    for k in 0..m {
        let mut multi = vec![2u8; m];
        for slot in multi.iter_mut().take(k) {
            *slot = 1;
        }
        let fc = pack_index(2, &multi)?;
        let fk: Vec<f64> = (0..gr.len()).map(|n| f.comp_at(n, fc)).collect();
        let d1_prev: Vec<f64> = if k > 0 {
            let prev = &stages[k - 1];
            (0..gr.len())
                .map(|node| grid::deriv1(gr, prev, node % n1, node / n1))
                .collect()
        } else {
            vec![0.0; gr.len()]
        };
        let kf = k as f64;
        let a: Vec<f64> = (0..gr.len()).map(|n| 2.0 * kf * g1_1n[n]).collect();
        let b: Vec<f64> = (0..gr.len())
            .map(|n| {
                let vkm1 = if k >= 1 { stages[k - 1][n] } else { 0.0 };
                let vkm2 = if k >= 2 { stages[k - 2][n] } else { 0.0 };
                // the pair sum runs over unordered {l, q}: k(k−1)/2 pairs
                2.0 * kf * g2_1n[n] * vkm1
                    + (m as f64 * fk[n] - kf * d1_prev[n]
                        + kf * (kf - 1.0) * (g1_11[n] * vkm1 + g2_11[n] * vkm2))
                        / (m - k) as f64
            })
            .collect();
        let h = gr.d2;
        let lines: Vec<Vec<f64>> = (0..n1)
            .into_par_iter()
            .map(|i1| {
                let mut vals = vec![0.0; n2];
                vals[0] = init;
                let mut v = init;
                for j in 0..n2 - 1 {
                    let lo = j * n1 + i1;
                    let hi = (j + 1) * n1 + i1;
                    let (a0, a1) = (a[lo], a[hi]);
                    let (b0, b1) = (b[lo], b[hi]);
                    let am = 0.5 * (a0 + a1);
                    let bm = 0.5 * (b0 + b1);
                    let k1 = a0 * v + b0;
                    let k2 = am * (v + 0.5 * h * k1) + bm;
                    let k3 = am * (v + 0.5 * h * k2) + bm;
                    let k4 = a1 * (v + h * k3) + b1;
                    v += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                    vals[j + 1] = v;
                }
                vals
            })
            .collect();
        let mut stage = vec![0.0; gr.len()];
        for (i1, line) in lines.iter().enumerate() {
            for (i2, &val) in line.iter().enumerate() {
                stage[gr.idx(i1, i2)] = val;
            }
        }
        stages.push(stage);
    }

    let mut v = SymTensorField::zeros(gr.clone(), m - 1, vec![true; gr.len()]);
    let ncv = v.ncomp();
    for (k, stage) in stages.iter().enumerate() {
        let mut multi = vec![2u8; m - 1];
        for slot in multi.iter_mut().take(k) {
            *slot = 1;
        }
        let c = pack_index(2, &multi)?;
        for (node, &val) in stage.iter().enumerate() {
            v.data[node * ncv + c] = val;
        }
    }
    let mut h_field = f.clone();
    let dv = inner_derivative(&v, &chart.metric);
    h_field.axpy(-1.0, &dv);
    // packed component c has exactly c indices equal to n; c = 0 is all-1
    let nc = h_field.ncomp();
    let mut normal_residual = 0.0f64;
    for node in 0..gr.len() {
        for c in 1..nc {
            normal_residual = normal_residual.max(h_field.comp_at(node, c).abs());
        }
    }
    Ok(CascadeResult {
        v,
        h: h_field,
        normal_residual,
    })
}

/// Closed-form expansion of `(dv)_{n…n i_k…i_1}` in semi-geodesic
/// coordinates, evaluated at every chart node for the component with `k`
/// transversal indices (and m−k normal ones).
pub fn dv_normal_expansion(
    v: &SymTensorField,
    chart: &SemiGeodesicChart,
    k: usize,
) -> Result<Vec<f64>> {
    let m = v.order + 1;
    if k > m {
        return Err(TmtError::Argument(format!(
            "k = {k} out of range 0..={m} for order {} input",
            v.order
        )));
    }
    if v.grid != chart.grid {
        return Err(TmtError::Argument(
            "field is not sampled on the chart grid".into(),
        ));
    }
    let gr = &chart.grid;
    // node arrays of the v components by transversal index count
    let vj: Vec<Vec<f64>> = (0..m)
        .map(|j| {
            let mut multi = vec![2u8; m - 1];
            for slot in multi.iter_mut().take(j) {
                *slot = 1;
            }
            let c = pack_index(2, &multi).unwrap();
            (0..gr.len()).map(|n| v.comp_at(n, c)).collect()
        })
        .collect();
    let kf = k as f64;
    let mf = m as f64;
    let out = (0..gr.len())
        .map(|node| {
            let i1 = node % gr.n1;
            let i2 = node / gr.n1;
            let ga = chart.metric.gamma_at_node(node);
            let (vk, dn_vk) = if k <= m - 1 {
                (vj[k][node], grid::deriv2(gr, &vj[k], i1, i2))
            } else {
                (0.0, 0.0)
            };
            let (vkm1, d1_vkm1) = if k >= 1 {
                (vj[k - 1][node], grid::deriv1(gr, &vj[k - 1], i1, i2))
            } else {
                (0.0, 0.0)
            };
            let vkm2 = if k >= 2 { vj[k - 2][node] } else { 0.0 };
            // the pair sum runs over unordered {l, q}: k(k−1)/2 pairs
            (mf - kf) / mf * dn_vk
                - 2.0 * (mf - kf) / mf * kf * (ga[0][0][1] * vk + ga[1][0][1] * vkm1)
                + kf / mf * d1_vkm1
                - kf * (kf - 1.0) / mf * (ga[0][0][0] * vkm1 + ga[1][0][0] * vkm2)
        })
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{full_mask, random_tensor_field};
    use crate::geometry::{trace_geodesic, MetricSpec};
    use crate::symtensor::component_count;
    use crate::transforms::v_from_ray_primitive;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn euclid() -> MetricSpec {
        MetricSpec::euclidean()
    }

    fn mild_conformal() -> MetricSpec {
        MetricSpec::conformal_expr("0.1*(x1^2 + x2^2)").unwrap()
    }

    fn diameter<M: MetricField>(g: &M, dom: &DomainSpec, tilt: f64) -> Geodesic {
        let x = [-dom.radius, tilt];
        let dir = [1.0, 0.0];
        let n = g.gnorm(x, dir);
        trace_geodesic(g, dom, x, [dir[0] / n, dir[1] / n], 2e-3).unwrap()
    }

    /// Smooth dense trig field on the chart rectangle with seeded coefficients.
    fn random_chart_field(
        gr: &Grid2,
        order: usize,
        rng: &mut ChaCha8Rng,
        amp: f64,
    ) -> SymTensorField {
        let nc = component_count(2, order);
        let coef: Vec<[f64; 5]> = (0..nc)
            .map(|_| {
                let mut c = [0.0; 5];
                for slot in c.iter_mut() {
                    *slot = rng.gen_range(-amp..amp);
                }
                c
            })
            .collect();
        let coef2 = coef.clone();
        let mut out = SymTensorField::zeros(gr.clone(), order, vec![true; gr.len()]);
        let nc = out.ncomp();
        for node in 0..gr.len() {
            let (xp, xn) = gr.coords_of(node);
            for (c, co) in coef2.iter().enumerate() {
                out.data[node * nc + c] = co[0] * (1.3 * xn + 0.4).sin() * (1.0 * xp).cos()
                    + co[1] * (0.7 * xn).cos()
                    + co[2] * 0.5 * xp * xn
                    + co[3] * (2.1 * xn).sin()
                    + co[4] * (1.5 * xp + 0.3).sin();
            }
        }
        out
    }

    #[test]
    fn euclidean_diameter_chart_is_cartesian_strip() {
        let g = euclid();
        let dom = DomainSpec::new(1.0);
        let gamma0 = diameter(&g, &dom, 0.0);
        let chart = build_chart(&g, &dom, &gamma0, 0.1, 9, 101).unwrap();
        assert!((chart.length - 2.0).abs() < 1e-9);
        for node in 0..chart.grid.len() {
            let (xp, xn) = chart.grid.coords_of(node);
            let p = chart.world_pos[node];
            // transversal axis is +y (left of the reference direction)
            assert!((p[0] - (-1.0 + xn)).abs() < 1e-10);
            assert!((p[1] - xp).abs() < 1e-10);
            let s = chart.metric.samples[node];
            assert!((s[0] - 1.0).abs() < 1e-10);
            assert!(s[1].abs() < 1e-10);
            assert!((s[2] - 1.0).abs() < 1e-10);
        }
        assert!(chart.max_offdiag < 1e-10);
        assert!(chart.max_gamma_n < 1e-9);
    }

    #[test]
    fn conformal_chart_satisfies_invariants() {
        let g = mild_conformal();
        let dom = DomainSpec::new(1.0);
        let gamma0 = diameter(&g, &dom, 0.05);
        let chart = build_chart(&g, &dom, &gamma0, 0.08, 33, 401).unwrap();
        assert!(chart.max_offdiag <= 1e-4, "offdiag {}", chart.max_offdiag);
        assert!(chart.max_gamma_n <= 1e-3, "gamma {}", chart.max_gamma_n);
        // unit-speed lines: ĝ_nn stays 1 along every line
        for node in 0..chart.grid.len() {
            assert!((chart.metric.samples[node][2] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn focusing_metric_raises_chart_fold() {
        // strongly positive curvature focuses the family inside the disk
        let g = MetricSpec::conformal_expr("-2*(x1^2 + x2^2)").unwrap();
        let dom = DomainSpec::new(1.0);
        let gamma0 = diameter(&g, &dom, 0.0);
        match build_chart(&g, &dom, &gamma0, 0.1, 9, 201) {
            Err(TmtError::ChartFold { .. }) => {}
            other => panic!("expected chart fold, got {other:?}"),
        }
        // shrink-and-retry cannot fix a per-line conjugate point either
        match build_chart_retrying(&g, &dom, &gamma0, 0.1, 9, 201) {
            Err(TmtError::ChartFold { .. }) => {}
            other => panic!("expected chart fold, got {other:?}"),
        }
    }

    #[test]
    fn chart_argument_validation() {
        let g = euclid();
        let dom = DomainSpec::new(1.0);
        let gamma0 = diameter(&g, &dom, 0.0);
        assert!(matches!(
            build_chart(&g, &dom, &gamma0, 0.1, 8, 101),
            Err(TmtError::Argument(_))
        ));
        assert!(matches!(
            build_chart(&g, &dom, &gamma0, 0.5, 9, 101),
            Err(TmtError::Argument(_))
        ));
    }

    #[test]
    fn cascade_zero_field_gives_zero() {
        let g = euclid();
        let dom = DomainSpec::new(1.0);
        let chart = build_chart(&g, &dom, &diameter(&g, &dom, 0.0), 0.05, 9, 51).unwrap();
        let f = SymTensorField::zeros(chart.grid.clone(), 2, vec![true; chart.grid.len()]);
        let res = cascade_solve(&f, &chart).unwrap();
        assert_eq!(res.v.l2_norm(), 0.0);
        assert_eq!(res.h.l2_norm(), 0.0);
        assert_eq!(res.normal_residual, 0.0);
    }

    #[test]
    fn euclidean_strip_m1_integrates_directly() {
        let g = euclid();
        let dom = DomainSpec::new(1.0);
        let chart = build_chart(&g, &dom, &diameter(&g, &dom, 0.0), 0.08, 9, 201).unwrap();
        // f_n linear in x^n: RK4 and the derivative stencils are both exact
        let gr = chart.grid.clone();
        let mut f = SymTensorField::zeros(gr.clone(), 1, vec![true; gr.len()]);
        for node in 0..gr.len() {
            let (xp, xn) = gr.coords_of(node);
            f.data[node * 2] = 0.1 * xp; // transversal component (unused by the ODE)
            f.data[node * 2 + 1] = (0.2 + 0.5 * xn) * (1.0 + 0.3 * xp);
        }
        let res = cascade_solve(&f, &chart).unwrap();
        for node in 0..gr.len() {
            let (xp, xn) = gr.coords_of(node);
            let exact = (1.0 + 0.3 * xp) * (0.2 * xn + 0.25 * xn * xn);
            assert!((res.v.data[node] - exact).abs() < 1e-10);
        }
        assert!(res.normal_residual < 1e-8, "residual {}", res.normal_residual);
    }

    #[test]
    fn cascade_residual_small_on_conformal_chart() {
        let g = mild_conformal();
        let dom = DomainSpec::new(1.0);
        let gamma0 = diameter(&g, &dom, 0.05);
        let chart = build_chart(&g, &dom, &gamma0, 0.08, 33, 401).unwrap();
        // Each cascade stage integrates a transversal derivative of the last,
        // so truncation error grows with the order; m = 3 needs a finer
        // longitudinal step for the same residual target.
        let chart_fine = build_chart(&g, &dom, &gamma0, 0.08, 33, 801).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for m in [2usize, 3] {
            let chart = if m <= 2 { &chart } else { &chart_fine };
            let f = random_chart_field(&chart.grid, m, &mut rng, 0.5);
            let res = cascade_solve(&f, chart).unwrap();
            let tol = 1e-3 * f.linf_norm();
            assert!(
                res.normal_residual <= tol,
                "m={m}: residual {} > {tol}",
                res.normal_residual
            );
            // initial condition holds exactly on the inflow edge
            for i1 in 0..chart.grid.n1 {
                let node = chart.grid.idx(i1, 0);
                for c in 0..res.v.ncomp() {
                    assert_eq!(res.v.comp_at(node, c), 0.0);
                }
            }
        }
    }

    #[test]
    fn perturbed_initial_condition_stays_bounded() {
        let g = mild_conformal();
        let dom = DomainSpec::new(1.0);
        let chart = build_chart(&g, &dom, &diameter(&g, &dom, 0.05), 0.08, 17, 201).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = random_chart_field(&chart.grid, 2, &mut rng, 0.5);
        let base = cascade_solve(&f, &chart).unwrap();
        let pert = cascade_solve_with_initial(&f, &chart, 1e-8).unwrap();
        let mut worst = 0.0f64;
        for (a, b) in base.v.data.iter().zip(pert.v.data.iter()) {
            worst = worst.max((a - b).abs());
        }
        assert!(worst > 0.0 && worst <= 1e-6, "perturbation growth {worst}");
    }

    #[test]
    fn dv_expansion_matches_generic_on_euclidean_chart() {
        let g = euclid();
        let dom = DomainSpec::new(1.0);
        let chart = build_chart(&g, &dom, &diameter(&g, &dom, 0.0), 0.08, 17, 201).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = 3;
        let v = random_chart_field(&chart.grid, m - 1, &mut rng, 1.0);
        let dv = inner_derivative(&v, &chart.metric);
        for k in 0..=m {
            let table = dv_normal_expansion(&v, &chart, k).unwrap();
            let mut multi = vec![2u8; m];
            for slot in multi.iter_mut().take(k) {
                *slot = 1;
            }
            let c = pack_index(2, &multi).unwrap();
            for node in 0..chart.grid.len() {
                assert!(
                    (table[node] - dv.comp_at(node, c)).abs() < 1e-10,
                    "k={k} node={node}"
                );
            }
        }
    }

    #[test]
    fn dv_expansion_matches_generic_on_conformal_chart() {
        let g = mild_conformal();
        let dom = DomainSpec::new(1.0);
        let chart = build_chart(&g, &dom, &diameter(&g, &dom, 0.05), 0.08, 33, 401).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..50 {
            let m = 2 + (trial % 2); // m = 2 and 3
            let v = random_chart_field(&chart.grid, m - 1, &mut rng, 1.0);
            let dv = inner_derivative(&v, &chart.metric);
            let scale = dv.linf_norm().max(1e-12);
            for k in 0..=m {
                let table = dv_normal_expansion(&v, &chart, k).unwrap();
                let mut multi = vec![2u8; m];
                for slot in multi.iter_mut().take(k) {
                    *slot = 1;
                }
                let c = pack_index(2, &multi).unwrap();
                let mut worst = 0.0f64;
                for node in 0..chart.grid.len() {
                    worst = worst.max((table[node] - dv.comp_at(node, c)).abs());
                }
                assert!(
                    worst <= 1e-3 * scale,
                    "trial {trial} m={m} k={k}: {worst} vs scale {scale}"
                );
            }
        }
    }

    #[test]
    fn dv_expansion_rejects_bad_k() {
        let g = euclid();
        let dom = DomainSpec::new(1.0);
        let chart = build_chart(&g, &dom, &diameter(&g, &dom, 0.0), 0.05, 9, 51).unwrap();
        let v = SymTensorField::zeros(chart.grid.clone(), 1, vec![true; chart.grid.len()]);
        assert!(dv_normal_expansion(&v, &chart, 2).is_ok());
        assert!(matches!(
            dv_normal_expansion(&v, &chart, 3),
            Err(TmtError::Argument(_))
        ));
    }

    #[test]
    fn cascade_matches_potential_generator_and_ray_primitive() {
        // f = dv0 with v0 supported well inside the disk: the cascade v, the
        // pullback of v0, and the ray-primitive construction all coincide.
        let g = euclid();
        let dom = DomainSpec::new(1.0);
        let world = Grid2::new(193, 193, -1.2, 1.2, -1.2, 1.2);
        let v0 = random_tensor_field(world.clone(), full_mask(&world), 1, 42, 0.3, 0.7);
        let f_world = inner_derivative(&v0, &g);
        let gamma0 = diameter(&g, &dom, 0.05);
        let chart = build_chart(&g, &dom, &gamma0, 0.06, 9, 301).unwrap();
        let f_chart = pull_back_field(&f_world, &chart);
        let v0_chart = pull_back_field(&v0, &chart);
        let res = cascade_solve(&f_chart, &chart).unwrap();
        let scale = v0_chart.linf_norm();
        let mut worst = 0.0f64;
        for (a, b) in res.v.data.iter().zip(v0_chart.data.iter()) {
            worst = worst.max((a - b).abs());
        }
        assert!(worst <= 1e-2 * scale, "cascade vs v0: {worst} (scale {scale})");
        // spot-check the invariant ray-primitive definition at interior nodes
        for &(i1, i2) in &[(4usize, 80usize), (2, 150), (6, 220), (4, 170)] {
            let node = chart.grid.idx(i1, i2);
            let x = chart.world_pos[node];
            let frame = [chart.world_trans[node], chart.world_vel[node]];
            let vr = v_from_ray_primitive(&f_world, &g, &dom, x, frame, 0.05, 5e-3).unwrap();
            for c in 0..res.v.ncomp() {
                let diff = (vr.comps()[c] - res.v.comp_at(node, c)).abs();
                assert!(
                    diff <= 1e-2 * scale,
                    "node ({i1},{i2}) comp {c}: {diff} (scale {scale})"
                );
            }
        }
    }

    #[test]
    fn chart_csv_dump_has_header_and_rows() {
        let g = euclid();
        let dom = DomainSpec::new(1.0);
        let chart = build_chart(&g, &dom, &diameter(&g, &dom, 0.0), 0.05, 9, 51).unwrap();
        let csv = chart.dump_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "xp,xn,world_x1,world_x2,g11,g12,g22");
        assert_eq!(csv.lines().count(), 1 + chart.grid.len());
        for line in lines {
            assert_eq!(line.split(',').count(), 7);
        }
    }

    #[test]
    fn cascade_rejects_mismatched_input() {
        let g = euclid();
        let dom = DomainSpec::new(1.0);
        let chart = build_chart(&g, &dom, &diameter(&g, &dom, 0.0), 0.05, 9, 51).unwrap();
        let scalar = SymTensorField::zeros(chart.grid.clone(), 0, vec![true; chart.grid.len()]);
        assert!(matches!(
            cascade_solve(&scalar, &chart),
            Err(TmtError::Argument(_))
        ));
        let other = Grid2::square(7);
        let f = SymTensorField::zeros(other.clone(), 1, vec![true; other.len()]);
        assert!(matches!(
            cascade_solve(&f, &chart),
            Err(TmtError::Argument(_))
        ));
    }
}

