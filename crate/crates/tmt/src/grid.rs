//! Regular 2-D lattices and bilinear interpolation weights.

/// A regular lattice of `n1 x n2` nodes covering the rectangle
/// `[min1, max1] x [min2, max2]`, row-major with axis 1 fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2 {
    pub n1: usize,
    pub n2: usize,
    pub min1: f64,
    pub min2: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Grid2 {
    pub fn new(n1: usize, n2: usize, min1: f64, max1: f64, min2: f64, max2: f64) -> Grid2 {
        assert!(n1 >= 2 && n2 >= 2, "grid needs at least 2 nodes per axis");
        Grid2 {
            n1,
            n2,
            min1,
            min2,
            d1: (max1 - min1) / (n1 - 1) as f64,
            d2: (max2 - min2) / (n2 - 1) as f64,
        }
    }

    /// Square `[-1,1]^2` lattice with `n` nodes per side.
    pub fn square(n: usize) -> Grid2 {
        Grid2::new(n, n, -1.0, 1.0, -1.0, 1.0)
    }

    pub fn len(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i1: usize, i2: usize) -> usize {
        debug_assert!(i1 < self.n1 && i2 < self.n2);
        i2 * self.n1 + i1
    }

    #[inline]
    pub fn coords(&self, i1: usize, i2: usize) -> (f64, f64) {
        (
            self.min1 + self.d1 * i1 as f64,
            self.min2 + self.d2 * i2 as f64,
        )
    }

    /// Node coordinates from the flat index.
    #[inline]
    pub fn coords_of(&self, idx: usize) -> (f64, f64) {
        self.coords(idx % self.n1, idx / self.n1)
    }

    /// Bilinear interpolation stencil at `(x1, x2)`: up to four
    /// `(node_index, weight)` pairs. Empty outside the lattice.
    pub fn bilinear(&self, x1: f64, x2: f64) -> BilinearStencil {
        let u = (x1 - self.min1) / self.d1;
        let v = (x2 - self.min2) / self.d2;
        let mut out = BilinearStencil::default();
        // Tolerate roundoff on the rim, reject anything truly outside.
        let eps = 1e-12;
        if u < -eps || v < -eps || u > (self.n1 - 1) as f64 + eps || v > (self.n2 - 1) as f64 + eps
        {
            return out;
        }
        let i = (u.floor() as usize).min(self.n1 - 2);
        let j = (v.floor() as usize).min(self.n2 - 2);
        let fu = (u - i as f64).clamp(0.0, 1.0);
        let fv = (v - j as f64).clamp(0.0, 1.0);
        out.push(self.idx(i, j), (1.0 - fu) * (1.0 - fv));
        out.push(self.idx(i + 1, j), fu * (1.0 - fv));
        out.push(self.idx(i, j + 1), (1.0 - fu) * fv);
        out.push(self.idx(i + 1, j + 1), fu * fv);
        out
    }
}

/// Fixed-capacity bilinear stencil (at most four nodes).
#[derive(Debug, Default, Clone)]
pub struct BilinearStencil {
    pub nodes: [usize; 4],
    pub weights: [f64; 4],
    pub len: usize,
}

impl BilinearStencil {
    fn push(&mut self, node: usize, w: f64) {
        self.nodes[self.len] = node;
        self.weights[self.len] = w;
        self.len += 1;
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.len).map(move |k| (self.nodes[k], self.weights[k]))
    }
}

/// The three-node stencil behind [`deriv1`]/[`deriv2`] as explicit
/// `(node, coefficient)` pairs, for matrix assembly.
pub fn deriv_stencil(grid: &Grid2, axis: usize, i1: usize, i2: usize) -> [(usize, f64); 3] {
    let g = grid;
    let (pos, n, h) = if axis == 0 {
        (i1, g.n1, g.d1)
    } else {
        (i2, g.n2, g.d2)
    };
    let at = |p: usize| {
        if axis == 0 {
            g.idx(p, i2)
        } else {
            g.idx(i1, p)
        }
    };
    if pos == 0 {
        [
            (at(0), -3.0 / (2.0 * h)),
            (at(1), 4.0 / (2.0 * h)),
            (at(2), -1.0 / (2.0 * h)),
        ]
    } else if pos == n - 1 {
        [
            (at(pos), 3.0 / (2.0 * h)),
            (at(pos - 1), -4.0 / (2.0 * h)),
            (at(pos - 2), 1.0 / (2.0 * h)),
        ]
    } else {
        [
            (at(pos + 1), 1.0 / (2.0 * h)),
            (at(pos - 1), -1.0 / (2.0 * h)),
            (at(pos), 0.0),
        ]
    }
}

/// Second-order derivative of a node-sampled function along axis 1,
/// centered in the interior and one-sided (3-point) at the lattice edge.
pub fn deriv1(grid: &Grid2, values: &[f64], i1: usize, i2: usize) -> f64 {
    let g = grid;
    let v = |a: usize, b: usize| values[g.idx(a, b)];
    let h = g.d1;
    if i1 == 0 {
        (-3.0 * v(0, i2) + 4.0 * v(1, i2) - v(2, i2)) / (2.0 * h)
    } else if i1 == g.n1 - 1 {
        (3.0 * v(i1, i2) - 4.0 * v(i1 - 1, i2) + v(i1 - 2, i2)) / (2.0 * h)
    } else {
        (v(i1 + 1, i2) - v(i1 - 1, i2)) / (2.0 * h)
    }
}

/// Same as [`deriv1`] along axis 2.
pub fn deriv2(grid: &Grid2, values: &[f64], i1: usize, i2: usize) -> f64 {
    let g = grid;
    let v = |a: usize, b: usize| values[g.idx(a, b)];
    let h = g.d2;
    if i2 == 0 {
        (-3.0 * v(i1, 0) + 4.0 * v(i1, 1) - v(i1, 2)) / (2.0 * h)
    } else if i2 == g.n2 - 1 {
        (3.0 * v(i1, i2) - 4.0 * v(i1, i2 - 1) + v(i1, i2 - 2)) / (2.0 * h)
    } else {
        (v(i1, i2 + 1) - v(i1, i2 - 1)) / (2.0 * h)
    }
}
