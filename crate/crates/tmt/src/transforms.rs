//! Integral-moment transforms I^q along geodesic fans, the inner derivative
//! and divergence on sampled tensor fields, ray primitives u(x,ξ) with their
//! ξ-derivative construction of v, and the geodesic-flow generator check.

use crate::geometry::{rk4_step, DomainSpec, GeoSample, Geodesic, MetricField, Point, Vector};
use crate::sparse::Csr;
use crate::symtensor::{
    component_count, distinct_permutations, multiplicity, pack_index, sorted_multi_indices,
    symmetrize, SymTensor, SymTensorField,
};
use crate::{grid, Result, TmtError};
use rayon::prelude::*;

/// Transform values of one moment order over a fan of geodesics.
#[derive(Debug, Clone)]
pub struct MomentSinogram {
    /// Moment order q.
    pub q: usize,
    /// Tensor order m of the integrand field.
    pub order: usize,
    /// Per-geodesic identifiers `(boundary_angle, dir_angle)`.
    pub fan_ids: Vec<(f64, f64)>,
    pub values: Vec<f64>,
}

impl MomentSinogram {
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }
}

/// Composite-Simpson weights over the uniform samples of a geodesic, plus
/// the weights of the tail midpoint and the refined exit sample.
///
/// Odd interval counts get one trapezoid interval at the start; the partial
/// tail interval is integrated with a three-point Simpson rule.
pub fn quad_weights(geo: &Geodesic) -> (Vec<f64>, f64, f64) {
    let n = geo.samples.len();
    let h = geo.step;
    let mut w = vec![0.0f64; n];
    let intervals = n - 1;
    let simpson_from = if intervals % 2 == 1 {
        w[0] += 0.5 * h;
        w[1] += 0.5 * h;
        1
    } else {
        0
    };
    let mut k = simpson_from;
    while k + 2 <= n - 1 {
        w[k] += h / 3.0;
        w[k + 1] += 4.0 * h / 3.0;
        w[k + 2] += h / 3.0;
        k += 2;
    }
    let tau = geo.exit.t - geo.samples[n - 1].t;
    w[n - 1] += tau / 6.0;
    (w, 4.0 * tau / 6.0, tau / 6.0)
}

/// ⟨f(x), ξ^m⟩ with bilinear field evaluation, using the closed-form
/// binomial contraction in dimension 2. Zero outside grid or mask.
fn contract_at(f: &SymTensorField, pos: Point, vel: Vector) -> f64 {
    debug_assert_eq!(f.dim, 2);
    let nc = f.ncomp();
    let mut comps = [0.0f64; 8];
    let st = f.grid.bilinear(pos[0], pos[1]);
    if st.len == 0 {
        return 0.0;
    }
    for (node, wt) in st.iter() {
        let base = node * nc;
        for c in 0..nc {
            comps[c] += wt * f.data[base + c];
        }
    }
    // component c has c indices equal to 2; multiplicity C(m, c)
    let m = f.order;
    let mut acc = 0.0;
    let mut binom = 1.0f64;
    for (c, &fc) in comps[..nc].iter().enumerate() {
        acc += binom * fc * vel[0].powi((m - c) as i32) * vel[1].powi(c as i32);
        if c < m {
            binom = binom * (m - c) as f64 / (c + 1) as f64;
        }
    }
    acc
}

fn ray_moment(f: &SymTensorField, geo: &Geodesic, q: usize) -> f64 {
    let (w, w_mid, w_exit) = quad_weights(geo);
    let term = |s: &GeoSample, wt: f64| {
        if wt == 0.0 {
            return 0.0;
        }
        wt * s.t.powi(q as i32) * contract_at(f, s.pos, s.vel)
    };
    let mut acc = 0.0;
    for (s, &wt) in geo.samples.iter().zip(w.iter()) {
        acc += term(s, wt);
    }
    acc += term(&geo.tail_mid, w_mid);
    acc += term(&geo.exit, w_exit);
    acc
}

/// The q-th integral moment I^q f over a fan of traced geodesics.
pub fn moment_transform(f: &SymTensorField, fan: &[Geodesic], q: usize) -> MomentSinogram {
    let values: Vec<f64> = fan.par_iter().map(|geo| ray_moment(f, geo, q)).collect();
    MomentSinogram {
        q,
        order: f.order,
        fan_ids: fan
            .iter()
            .map(|g| (g.boundary_angle, g.dir_angle))
            .collect(),
        values,
    }
}

/// Symmetrized covariant derivative on the field's grid: raises the order
/// by one. Centered second-order differences, one-sided at the lattice edge.
pub fn inner_derivative<M: MetricField>(v: &SymTensorField, g: &M) -> SymTensorField {
    let gr = v.grid.clone();
    let m = v.order + 1;
    let nc_in = v.ncomp();
    // per-component node arrays and their two axis derivatives
    let comp_arrays: Vec<Vec<f64>> = (0..nc_in)
        .map(|c| (0..gr.len()).map(|node| v.comp_at(node, c)).collect())
        .collect();
    let mut out = SymTensorField::zeros(gr.clone(), m, v.mask.clone());
    let rows: Vec<(usize, SymTensor)> = (0..gr.len())
        .into_par_iter()
        .map(|node| {
            let i1 = node % gr.n1;
            let i2 = node / gr.n1;
            let (x, y) = gr.coords(i1, i2);
            let gamma = g.christoffel([x, y]);
            let nd = 2usize.pow(m as u32);
            let mut dense = vec![0.0f64; nd];
            let mut multi = vec![1u8; m];
            for (slot, d) in dense.iter_mut().enumerate() {
                for (ax, mu) in multi.iter_mut().enumerate() {
                    *mu = ((slot >> ax) & 1) as u8 + 1;
                }
                // T_{j1..jm} = d_{jm} v_{j1..j_{m-1}} - sum_l Γ^p_{jm jl} v_{..p..}
                let der_axis = multi[m - 1] as usize - 1;
                let head = &multi[..m - 1];
                let c = pack_index(2, head).unwrap();
                let mut t = if der_axis == 0 {
                    grid::deriv1(&gr, &comp_arrays[c], i1, i2)
                } else {
                    grid::deriv2(&gr, &comp_arrays[c], i1, i2)
                };
                for l in 0..m - 1 {
                    for p in 0..2usize {
                        let mut repl: Vec<u8> = head.to_vec();
                        repl[l] = p as u8 + 1;
                        let cr = pack_index(2, &repl).unwrap();
                        t -= gamma[p][der_axis][head[l] as usize - 1] * comp_arrays[cr][node];
                    }
                }
                *d = t;
            }
            (node, symmetrize(2, m, &dense).unwrap())
        })
        .collect();
    for (node, t) in rows {
        out.set_tensor(node, &t);
    }
    out.apply_mask();
    out
}

/// Divergence (metric trace of the covariant derivative): lowers the order
/// by one. `(δf)_{i1..i_{m-1}} = g^{jk} ∇_k f_{i1..i_{m-1} j}`.
pub fn divergence<M: MetricField>(f: &SymTensorField, g: &M) -> SymTensorField {
    assert!(f.order >= 1, "divergence needs order >= 1");
    let gr = f.grid.clone();
    let m = f.order;
    let nc_in = f.ncomp();
    let comp_arrays: Vec<Vec<f64>> = (0..nc_in)
        .map(|c| (0..gr.len()).map(|node| f.comp_at(node, c)).collect())
        .collect();
    let out_indices = sorted_multi_indices(2, m - 1);
    let mut out = SymTensorField::zeros(gr.clone(), m - 1, f.mask.clone());
    let rows: Vec<(usize, Vec<f64>)> = (0..gr.len())
        .into_par_iter()
        .map(|node| {
            let i1 = node % gr.n1;
            let i2 = node / gr.n1;
            let (x, y) = gr.coords(i1, i2);
            let gamma = g.christoffel([x, y]);
            let ginv = g.metric_inverse([x, y]);
            let mut comps = vec![0.0f64; out_indices.len()];
            for (ci, head) in out_indices.iter().enumerate() {
                let mut acc = 0.0;
                let mut full: Vec<u8> = head.clone();
                full.push(0);
                for j in 0..2usize {
                    full[m - 1] = j as u8 + 1;
                    let c = pack_index(2, &full).unwrap();
                    for k in 0..2usize {
                        // ∇_k f_{head j}
                        let mut cov = if k == 0 {
                            grid::deriv1(&gr, &comp_arrays[c], i1, i2)
                        } else {
                            grid::deriv2(&gr, &comp_arrays[c], i1, i2)
                        };
                        for slot in 0..m {
                            let orig = full[slot] as usize - 1;
                            for p in 0..2usize {
                                let mut repl = full.clone();
                                repl[slot] = p as u8 + 1;
                                let cr = pack_index(2, &repl).unwrap();
                                cov -= gamma[p][k][orig] * comp_arrays[cr][node];
                            }
                        }
                        acc += ginv[j * 2 + k] * cov;
                    }
                }
                comps[ci] = acc;
            }
            (node, comps)
        })
        .collect();
    for (node, comps) in rows {
        out.set_tensor(node, &SymTensor::from_comps(2, m - 1, comps).unwrap());
    }
    out.apply_mask();
    out
}

/// L²(g) inner product of two equal-order fields over the grid, with the
/// Riemannian volume element and index raising on the second argument.
pub fn l2_inner<M: MetricField>(a: &SymTensorField, b: &SymTensorField, g: &M) -> f64 {
    assert_eq!(a.order, b.order);
    assert_eq!(a.grid, b.grid);
    let gr = &a.grid;
    let cell = gr.d1 * gr.d2;
    let idxs = sorted_multi_indices(2, a.order);
    let mults: Vec<f64> = idxs.iter().map(|i| multiplicity(i) as f64).collect();
    (0..gr.len())
        .map(|node| {
            let (x, y) = gr.coords_of(node);
            let gm = g.metric([x, y]);
            let braised = b.tensor_at(node).raise_all(&gm).unwrap();
            let mut acc = 0.0;
            for (c, mult) in mults.iter().enumerate() {
                acc += mult * a.comp_at(node, c) * braised.comps()[c];
            }
            acc * g.sqrt_det([x, y]) * cell
        })
        .sum()
}

/// Sparse-matrix form of [`inner_derivative`]: maps an order-`order_in`
/// component vector (node-major, component-minor, the `SymTensorField::data`
/// layout) to the order-`order_in + 1` component vector, with identical
/// stencils. Mask handling is left to the caller (row/column selection).
pub fn inner_derivative_matrix<M: MetricField>(
    gr: &grid::Grid2,
    g: &M,
    order_in: usize,
) -> Csr {
    let m = order_in + 1;
    let nc_in = component_count(2, order_in);
    let out_idxs = sorted_multi_indices(2, m);
    let rows: Vec<Vec<(u32, f64)>> = (0..gr.len() * out_idxs.len())
        .into_par_iter()
        .map(|row| {
            let node = row / out_idxs.len();
            let i1 = node % gr.n1;
            let i2 = node / gr.n1;
            let (x, y) = gr.coords(i1, i2);
            let gamma = g.christoffel([x, y]);
            let perms = distinct_permutations(&out_idxs[row % out_idxs.len()]);
            let wper = 1.0 / perms.len() as f64;
            let mut entries: Vec<(u32, f64)> = Vec::new();
            for perm in &perms {
                let ax = perm[m - 1] as usize - 1;
                let head = &perm[..m - 1];
                let c_head = pack_index(2, head).unwrap();
                for (n2, coeff) in grid::deriv_stencil(gr, ax, i1, i2) {
                    if coeff != 0.0 {
                        entries.push(((n2 * nc_in + c_head) as u32, wper * coeff));
                    }
                }
                for l in 0..m - 1 {
                    for p in 0..2usize {
                        let mut repl: Vec<u8> = head.to_vec();
                        repl[l] = p as u8 + 1;
                        let cr = pack_index(2, &repl).unwrap();
                        let coeff = -gamma[p][ax][head[l] as usize - 1];
                        if coeff != 0.0 {
                            entries.push(((node * nc_in + cr) as u32, wper * coeff));
                        }
                    }
                }
            }
            entries
        })
        .collect();
    Csr::from_rows(gr.len() * nc_in, rows)
}

/// Sparse-matrix form of [`divergence`], same vector layout conventions.
pub fn divergence_matrix<M: MetricField>(gr: &grid::Grid2, g: &M, order_in: usize) -> Csr {
    assert!(order_in >= 1);
    let m = order_in;
    let nc_in = component_count(2, m);
    let out_idxs = sorted_multi_indices(2, m - 1);
    let rows: Vec<Vec<(u32, f64)>> = (0..gr.len() * out_idxs.len())
        .into_par_iter()
        .map(|row| {
            let node = row / out_idxs.len();
            let i1 = node % gr.n1;
            let i2 = node / gr.n1;
            let (x, y) = gr.coords(i1, i2);
            let gamma = g.christoffel([x, y]);
            let ginv = g.metric_inverse([x, y]);
            let head = &out_idxs[row % out_idxs.len()];
            let mut entries: Vec<(u32, f64)> = Vec::new();
            let mut full: Vec<u8> = head.clone();
            full.push(0);
            for j in 0..2usize {
                full[m - 1] = j as u8 + 1;
                let c = pack_index(2, &full).unwrap();
                for k in 0..2usize {
                    let w = ginv[j * 2 + k];
                    for (n2, coeff) in grid::deriv_stencil(gr, k, i1, i2) {
                        if coeff != 0.0 {
                            entries.push(((n2 * nc_in + c) as u32, w * coeff));
                        }
                    }
                    for slot in 0..m {
                        let orig = full[slot] as usize - 1;
                        for p in 0..2usize {
                            let mut repl = full.clone();
                            repl[slot] = p as u8 + 1;
                            let cr = pack_index(2, &repl).unwrap();
                            let coeff = -w * gamma[p][k][orig];
                            if coeff != 0.0 {
                                entries.push(((node * nc_in + cr) as u32, coeff));
                            }
                        }
                    }
                }
            }
            entries
        })
        .collect();
    Csr::from_rows(gr.len() * nc_in, rows)
}

/// The along-ray primitive u(x,ξ): the moment-0 integral of f over the
/// geodesic from x with initial velocity ξ, traced in the extended domain.
#[derive(Debug, Clone, Copy)]
pub struct RayPrimitive {
    pub x: Point,
    pub xi: Vector,
    pub value: f64,
}

pub fn ray_primitive<M: MetricField>(
    f: &SymTensorField,
    g: &M,
    dom: &DomainSpec,
    x: Point,
    xi: Vector,
    h: f64,
) -> Result<RayPrimitive> {
    let geo = crate::geometry::trace_geodesic(g, &dom.extended(), x, xi, h)?;
    Ok(RayPrimitive {
        x,
        xi,
        value: ray_moment(f, &geo, 0),
    })
}

/// Mixed ξ-derivative of `(x,ξ) -> ray_primitive(f)(x,ξ)` at ξ = frame[1]
/// (the distinguished direction e_n), by tensor-product central differences
/// with the given step. `deriv` lists frame-axis indices in 1..=2; empty
/// means plain evaluation.
pub fn ray_xi_derivative<M: MetricField>(
    f: &SymTensorField,
    g: &M,
    dom: &DomainSpec,
    x: Point,
    frame: [Vector; 2],
    deriv: &[u8],
    step: f64,
    h: f64,
) -> Result<f64> {
    let r = deriv.len();
    let e_n = frame[1];
    let mut acc = 0.0;
    for signs in 0..(1usize << r) {
        let mut xi = e_n;
        let mut parity = 1.0;
        for (l, &d) in deriv.iter().enumerate() {
            let s = if (signs >> l) & 1 == 0 { 1.0 } else { -1.0 };
            parity *= s;
            let dir = frame[d as usize - 1];
            xi = [xi[0] + s * step * dir[0], xi[1] + s * step * dir[1]];
        }
        acc += parity * ray_primitive(f, g, dom, x, xi, h)?.value;
    }
    Ok(acc / (2.0 * step).powi(r as i32))
}

/// The (m−1)-tensor v built from ξ-derivatives of the ray primitive:
/// `v_I(x) = −(1/(m−1)!) ∂^{m−1} u / ∂ξ^I |_{ξ=e_n}`.
///
/// The sign makes v agree with the semi-geodesic cascade solution (which
/// vanishes at the inflow boundary) whenever the ray transform of f is zero;
/// equivalently it makes h = f − dv have vanishing pure-n ray derivatives.
pub fn v_from_ray_primitive<M: MetricField>(
    f: &SymTensorField,
    g: &M,
    dom: &DomainSpec,
    x: Point,
    frame: [Vector; 2],
    xi_step: f64,
    h: f64,
) -> Result<SymTensor> {
    let m = f.order;
    if m == 0 {
        return Err(TmtError::Argument(
            "v_from_ray_primitive needs tensor order >= 1".into(),
        ));
    }
    let idxs = sorted_multi_indices(2, m - 1);
    let mut fact = 1.0f64;
    for k in 2..m {
        fact *= k as f64;
    }
    let mut comps = vec![0.0; idxs.len()];
    for (c, multi) in idxs.iter().enumerate() {
        let d = ray_xi_derivative(f, g, dom, x, frame, multi, xi_step, h)?;
        comps[c] = -d / fact;
    }
    SymTensor::from_comps(2, m - 1, comps)
}

/// Max over samples of |Gw + ⟨h(x), ξ^m⟩| where w is the ray primitive of h
/// and Gw is a central difference of w along the geodesic flow.
///
/// The forward-traced primitive decreases along the flow, so the generator
/// identity holds with this orientation.
pub fn generator_identity_check<M: MetricField>(
    h_field: &SymTensorField,
    g: &M,
    dom: &DomainSpec,
    samples: &[(Point, Vector)],
    flow_step: f64,
    h: f64,
) -> Result<f64> {
    let residuals: Vec<f64> = samples
        .par_iter()
        .map(|&(x, xi)| {
            let s0 = GeoSample {
                t: 0.0,
                pos: x,
                vel: xi,
            };
            let fwd = rk4_step(g, &s0, flow_step);
            let bwd = rk4_step(g, &s0, -flow_step);
            let wf = ray_primitive(h_field, g, dom, fwd.pos, fwd.vel, h)?.value;
            let wb = ray_primitive(h_field, g, dom, bwd.pos, bwd.vel, h)?.value;
            let gw = (wf - wb) / (2.0 * flow_step);
            Ok((gw + contract_at(h_field, x, xi)).abs())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(residuals.into_iter().fold(0.0, f64::max))
}
