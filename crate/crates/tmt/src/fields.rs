//! Analytic test-field recipes: windowed Gaussian mixtures with exact
//! gradients and Hessians, and builders for the tensor fields the tests and
//! experiments use as ground truth.

use crate::geometry::DomainSpec;
use crate::grid::Grid2;
use crate::symtensor::{component_count, SymTensor, SymTensorField};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct GaussTerm {
    pub amp: f64,
    pub center: [f64; 2],
    pub sigma: f64,
}

/// A smooth scalar: Gaussian mixture times the window `(1 - |x-c|^2/R^2)^p`,
/// identically zero outside the window disk. `p >= 3` makes the value,
/// gradient and Hessian vanish continuously on the window rim.
#[derive(Debug, Clone)]
pub struct ScalarRecipe {
    pub terms: Vec<GaussTerm>,
    pub window_center: [f64; 2],
    pub window_radius: f64,
    pub window_pow: u32,
    pub scale: f64,
}

impl ScalarRecipe {
    pub fn bump(center: [f64; 2], sigma: f64, window_radius: f64) -> ScalarRecipe {
        ScalarRecipe {
            terms: vec![GaussTerm {
                amp: 1.0,
                center,
                sigma,
            }],
            window_center: center,
            window_radius,
            window_pow: 3,
            scale: 1.0,
        }
    }

    /// Seeded random mixture supported in the disk of the given radius.
    pub fn random(rng: &mut impl Rng, radius: f64) -> ScalarRecipe {
        let nterms = 4;
        let terms = (0..nterms)
            .map(|_| {
                let r = 0.6 * radius * rng.gen::<f64>().sqrt();
                let a = rng.gen::<f64>() * std::f64::consts::TAU;
                GaussTerm {
                    amp: (if rng.gen::<bool>() { 1.0 } else { -1.0 })
                        * (0.5 + 0.5 * rng.gen::<f64>()),
                    center: [r * a.cos(), r * a.sin()],
                    sigma: radius * (0.35 + 0.25 * rng.gen::<f64>()),
                }
            })
            .collect();
        ScalarRecipe {
            terms,
            window_center: [0.0, 0.0],
            window_radius: radius,
            window_pow: 3,
            scale: 1.0,
        }
    }

    /// Rescale so the max of |eval| over a scan grid equals `amp`.
    pub fn normalized(mut self, amp: f64) -> ScalarRecipe {
        let mut peak = 0.0f64;
        let n = 101;
        for i in 0..n {
            for j in 0..n {
                let x = self.window_center[0]
                    + self.window_radius * (2.0 * i as f64 / (n - 1) as f64 - 1.0);
                let y = self.window_center[1]
                    + self.window_radius * (2.0 * j as f64 / (n - 1) as f64 - 1.0);
                peak = peak.max(self.eval([x, y]).abs());
            }
        }
        if peak > 0.0 {
            self.scale *= amp / peak;
        }
        self
    }

    fn window(&self, x: [f64; 2]) -> (f64, [f64; 2], [f64; 3]) {
        let dx = x[0] - self.window_center[0];
        let dy = x[1] - self.window_center[1];
        let r2 = self.window_radius * self.window_radius;
        let u = (dx * dx + dy * dy) / r2;
        if u >= 1.0 {
            return (0.0, [0.0; 2], [0.0; 3]);
        }
        let p = self.window_pow as f64;
        let w = (1.0 - u).powi(self.window_pow as i32);
        let wp = (1.0 - u).powi(self.window_pow as i32 - 1);
        let wpp = if self.window_pow >= 2 {
            (1.0 - u).powi(self.window_pow as i32 - 2)
        } else {
            0.0
        };
        let gx = -p * wp * 2.0 * dx / r2;
        let gy = -p * wp * 2.0 * dy / r2;
        let hxx = p * (p - 1.0) * wpp * 4.0 * dx * dx / (r2 * r2) - 2.0 * p * wp / r2;
        let hxy = p * (p - 1.0) * wpp * 4.0 * dx * dy / (r2 * r2);
        let hyy = p * (p - 1.0) * wpp * 4.0 * dy * dy / (r2 * r2) - 2.0 * p * wp / r2;
        (w, [gx, gy], [hxx, hxy, hyy])
    }

    fn mixture(&self, x: [f64; 2]) -> (f64, [f64; 2], [f64; 3]) {
        let mut s = 0.0;
        let mut g = [0.0f64; 2];
        let mut h = [0.0f64; 3];
        for t in &self.terms {
            let dx = x[0] - t.center[0];
            let dy = x[1] - t.center[1];
            let s2 = t.sigma * t.sigma;
            let e = t.amp * (-(dx * dx + dy * dy) / (2.0 * s2)).exp();
            s += e;
            g[0] += e * (-dx / s2);
            g[1] += e * (-dy / s2);
            h[0] += e * (dx * dx / (s2 * s2) - 1.0 / s2);
            h[1] += e * (dx * dy / (s2 * s2));
            h[2] += e * (dy * dy / (s2 * s2) - 1.0 / s2);
        }
        (s, g, h)
    }

    pub fn eval(&self, x: [f64; 2]) -> f64 {
        let (w, ..) = self.window(x);
        if w == 0.0 {
            return 0.0;
        }
        let (s, ..) = self.mixture(x);
        self.scale * w * s
    }

    pub fn grad(&self, x: [f64; 2]) -> [f64; 2] {
        let (w, wg, _) = self.window(x);
        if w == 0.0 {
            return [0.0; 2];
        }
        let (s, sg, _) = self.mixture(x);
        [
            self.scale * (w * sg[0] + s * wg[0]),
            self.scale * (w * sg[1] + s * wg[1]),
        ]
    }

    /// Hessian as `(d11, d12, d22)`.
    pub fn hess(&self, x: [f64; 2]) -> [f64; 3] {
        let (w, wg, wh) = self.window(x);
        if w == 0.0 {
            return [0.0; 3];
        }
        let (s, sg, sh) = self.mixture(x);
        [
            self.scale * (w * sh[0] + 2.0 * wg[0] * sg[0] + s * wh[0]),
            self.scale * (w * sh[1] + wg[0] * sg[1] + wg[1] * sg[0] + s * wh[1]),
            self.scale * (w * sh[2] + 2.0 * wg[1] * sg[1] + s * wh[2]),
        ]
    }
}

pub fn full_mask(grid: &Grid2) -> Vec<bool> {
    vec![true; grid.len()]
}

pub fn disk_mask(grid: &Grid2, dom: &DomainSpec) -> Vec<bool> {
    (0..grid.len())
        .map(|k| {
            let (x, y) = grid.coords_of(k);
            dom.contains([x, y])
        })
        .collect()
}

pub fn scalar_field(grid: Grid2, mask: Vec<bool>, r: &ScalarRecipe) -> SymTensorField {
    SymTensorField::from_fn(grid, 0, mask, |x, y| {
        SymTensor::from_comps(2, 0, vec![r.eval([x, y])]).unwrap()
    })
}

/// Order-1 field with the analytic gradient of the recipe.
pub fn gradient_field(grid: Grid2, mask: Vec<bool>, r: &ScalarRecipe) -> SymTensorField {
    SymTensorField::from_fn(grid, 1, mask, |x, y| {
        let g = r.grad([x, y]);
        SymTensor::from_comps(2, 1, vec![g[0], g[1]]).unwrap()
    })
}

/// Divergence-free order-1 field `(d2 psi, -d1 psi)` (Euclidean).
pub fn grad_perp_field(grid: Grid2, mask: Vec<bool>, r: &ScalarRecipe) -> SymTensorField {
    SymTensorField::from_fn(grid, 1, mask, |x, y| {
        let g = r.grad([x, y]);
        SymTensor::from_comps(2, 1, vec![g[1], -g[0]]).unwrap()
    })
}

/// Divergence-free symmetric order-2 field in Airy form
/// `(d22 psi, -d12 psi, d11 psi)` (Euclidean).
pub fn airy_field(grid: Grid2, mask: Vec<bool>, r: &ScalarRecipe) -> SymTensorField {
    SymTensorField::from_fn(grid, 2, mask, |x, y| {
        let h = r.hess([x, y]);
        SymTensor::from_comps(2, 2, vec![h[2], -h[1], h[0]]).unwrap()
    })
}

/// Random smooth symmetric tensor field: one independent windowed mixture
/// per packed component, overall sup-norm about `amp`. Vanishes with two
/// derivatives on the radius-`radius` circle.
pub fn random_tensor_field(
    grid: Grid2,
    mask: Vec<bool>,
    order: usize,
    seed: u64,
    amp: f64,
    radius: f64,
) -> SymTensorField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let recipes: Vec<ScalarRecipe> = (0..component_count(2, order))
        .map(|_| ScalarRecipe::random(&mut rng, radius).normalized(amp))
        .collect();
    SymTensorField::from_fn(grid, order, mask, |x, y| {
        SymTensor::from_comps(2, order, recipes.iter().map(|r| r.eval([x, y])).collect()).unwrap()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_and_hess_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = ScalarRecipe::random(&mut rng, 1.0).normalized(1.0);
        let d = 1e-5;
        for &x in &[[0.2, -0.3], [0.0, 0.0], [0.5, 0.6]] {
            let g = r.grad(x);
            let fd1 = (r.eval([x[0] + d, x[1]]) - r.eval([x[0] - d, x[1]])) / (2.0 * d);
            let fd2 = (r.eval([x[0], x[1] + d]) - r.eval([x[0], x[1] - d])) / (2.0 * d);
            assert!((g[0] - fd1).abs() < 1e-8, "{} vs {}", g[0], fd1);
            assert!((g[1] - fd2).abs() < 1e-8);
            let h = r.hess(x);
            let h11 =
                (r.eval([x[0] + d, x[1]]) - 2.0 * r.eval(x) + r.eval([x[0] - d, x[1]])) / (d * d);
            let h12 = (r.grad([x[0], x[1] + d])[0] - r.grad([x[0], x[1] - d])[0]) / (2.0 * d);
            assert!((h[0] - h11).abs() < 1e-4);
            assert!((h[1] - h12).abs() < 1e-8);
        }
    }

    #[test]
    fn window_vanishes_smoothly_on_rim() {
        let r = ScalarRecipe::bump([0.0, 0.0], 0.5, 0.8);
        for k in 0..16 {
            let a = std::f64::consts::TAU * k as f64 / 16.0;
            // rim hit is inexact in floating point; the cubic window still
            // crushes the value far below any tolerance of interest
            let x = [0.8 * a.cos(), 0.8 * a.sin()];
            assert!(r.eval(x).abs() < 1e-20);
            assert!(r.grad(x)[0].abs() + r.grad(x)[1].abs() < 1e-20);
            // just inside, gradient is already tiny (cubic window)
            let xi = [0.799 * a.cos(), 0.799 * a.sin()];
            assert!(r.grad(xi)[0].abs() + r.grad(xi)[1].abs() < 1e-3);
        }
        assert_eq!(r.eval([0.9, 0.0]), 0.0);
    }

    #[test]
    fn normalization_and_determinism() {
        let g = Grid2::square(33);
        let f1 = random_tensor_field(g.clone(), full_mask(&g), 2, 42, 0.5, 1.0);
        let f2 = random_tensor_field(g.clone(), full_mask(&g), 2, 42, 0.5, 1.0);
        assert_eq!(f1.data, f2.data);
        let peak = f1.linf_norm();
        assert!(peak > 0.3 && peak < 0.55, "peak {peak}");
        let f3 = random_tensor_field(g.clone(), full_mask(&g), 2, 43, 0.5, 1.0);
        assert_ne!(f1.data, f3.data);
    }

    #[test]
    fn airy_field_is_divergence_free_analytically() {
        // rows of (d22, -d12; -d12, d11) have zero divergence for any psi
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = ScalarRecipe::random(&mut rng, 1.0);
        let d = 1e-4;
        let x = [0.25, -0.15];
        // d1 f11 + d2 f12 where f11 = psi_22, f12 = -psi_12
        let f11 = |p: [f64; 2]| r.hess(p)[2];
        let f12 = |p: [f64; 2]| -r.hess(p)[1];
        let div1 = (f11([x[0] + d, x[1]]) - f11([x[0] - d, x[1]])) / (2.0 * d)
            + (f12([x[0], x[1] + d]) - f12([x[0], x[1] - d])) / (2.0 * d);
        assert!(div1.abs() < 1e-5, "div {div1}");
    }
}
