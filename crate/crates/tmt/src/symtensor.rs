//! Storage and algebra for symmetric m-tensors.
//!
//! Only components at nondecreasing multi-indices are stored; permutation
//! multiplicities are supplied by the contraction and product routines.
//! Axis indices are 1-based, matching the usual index notation.

use crate::grid::Grid2;
use crate::{Result, TmtError};

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: usize = 1;
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

fn factorial(n: usize) -> usize {
    (1..=n).product::<usize>().max(1)
}

/// Number of stored components of a symmetric m-tensor in dimension n.
pub fn component_count(dim: usize, order: usize) -> usize {
    binomial(dim + order - 1, order)
}

/// Linear index of a (not necessarily sorted) multi-index among the
/// lexicographically ordered nondecreasing multi-indices.
pub fn pack_index(dim: usize, multi: &[u8]) -> Result<usize> {
    for &i in multi {
        if i < 1 || i as usize > dim {
            return Err(TmtError::Argument(format!(
                "axis index {i} out of range 1..={dim}"
            )));
        }
    }
    let mut sorted = multi.to_vec();
    sorted.sort_unstable();
    Ok(rank_sorted(dim, &sorted))
}

fn rank_sorted(dim: usize, sorted: &[u8]) -> usize {
    let m = sorted.len();
    let mut rank = 0;
    let mut low = 1u8;
    for (t, &v) in sorted.iter().enumerate() {
        let rem = m - 1 - t;
        for u in low..v {
            // sequences of length `rem` with values in [u, dim]
            rank += binomial(dim - u as usize + 1 + rem - 1, rem);
        }
        low = v;
    }
    rank
}

/// All nondecreasing multi-indices of length `order` over `1..=dim`,
/// in lexicographic (= pack_index) order.
pub fn sorted_multi_indices(dim: usize, order: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::with_capacity(component_count(dim, order));
    let mut cur = Vec::with_capacity(order);
    fn rec(dim: usize, order: usize, low: u8, cur: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
        if cur.len() == order {
            out.push(cur.clone());
            return;
        }
        for v in low..=dim as u8 {
            cur.push(v);
            rec(dim, order, v, cur, out);
            cur.pop();
        }
    }
    rec(dim, order, 1, &mut cur, &mut out);
    out
}

/// Number of distinct permutations of a sorted multi-index.
pub fn multiplicity(sorted: &[u8]) -> usize {
    let mut mult = factorial(sorted.len());
    let mut run = 1;
    for k in 1..=sorted.len() {
        if k < sorted.len() && sorted[k] == sorted[k - 1] {
            run += 1;
        } else {
            mult /= factorial(run);
            run = 1;
        }
    }
    mult
}

/// All distinct arrangements of a sorted multi-index.
pub fn distinct_permutations(sorted: &[u8]) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let mut items = sorted.to_vec();
    let mut cur = Vec::with_capacity(items.len());
    fn rec(items: &mut Vec<u8>, cur: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
        if items.is_empty() {
            out.push(cur.clone());
            return;
        }
        let mut last: Option<u8> = None;
        for k in 0..items.len() {
            let v = items[k];
            if last == Some(v) {
                continue;
            }
            last = Some(v);
            items.remove(k);
            cur.push(v);
            rec(items, cur, out);
            cur.pop();
            items.insert(k, v);
        }
    }
    rec(&mut items, &mut cur, &mut out);
    out
}

/// A symmetric m-tensor in dimension n, components at sorted multi-indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SymTensor {
    order: usize,
    dim: usize,
    comps: Vec<f64>,
}

impl SymTensor {
    pub fn zeros(dim: usize, order: usize) -> SymTensor {
        SymTensor {
            order,
            dim,
            comps: vec![0.0; component_count(dim, order)],
        }
    }

    pub fn from_comps(dim: usize, order: usize, comps: Vec<f64>) -> Result<SymTensor> {
        if comps.len() != component_count(dim, order) {
            return Err(TmtError::Argument(format!(
                "expected {} components for order {order} dim {dim}, got {}",
                component_count(dim, order),
                comps.len()
            )));
        }
        Ok(SymTensor { order, dim, comps })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn comps(&self) -> &[f64] {
        &self.comps
    }

    pub fn comps_mut(&mut self) -> &mut [f64] {
        &mut self.comps
    }

    /// Component at any (possibly unsorted) multi-index.
    pub fn get(&self, multi: &[u8]) -> Result<f64> {
        if multi.len() != self.order {
            return Err(TmtError::Argument(format!(
                "multi-index length {} does not match order {}",
                multi.len(),
                self.order
            )));
        }
        Ok(self.comps[pack_index(self.dim, multi)?])
    }

    pub fn set(&mut self, multi: &[u8], value: f64) -> Result<()> {
        if multi.len() != self.order {
            return Err(TmtError::Argument("multi-index length mismatch".into()));
        }
        let k = pack_index(self.dim, multi)?;
        self.comps[k] = value;
        Ok(())
    }

    /// Full dense table with n^m entries, index tuple row-major.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.dim;
        let m = self.order;
        let mut dense = vec![0.0; n.pow(m as u32)];
        let mut multi = vec![1u8; m];
        for (flat, slot) in dense.iter_mut().enumerate() {
            let mut rem = flat;
            for d in (0..m).rev() {
                multi[d] = (rem % n) as u8 + 1;
                rem /= n;
            }
            *slot = self.comps[pack_index(n, &multi).unwrap()];
        }
        dense
    }

    /// Full contraction sum f_{i1..im} xi^{i1}..xi^{im}.
    pub fn contract_full(&self, xi: &[f64]) -> Result<f64> {
        if xi.len() != self.dim {
            return Err(TmtError::Argument(format!(
                "vector dim {} does not match tensor dim {}",
                xi.len(),
                self.dim
            )));
        }
        let mut acc = 0.0;
        for (k, idx) in sorted_multi_indices(self.dim, self.order).iter().enumerate() {
            let mut mono = 1.0;
            for &i in idx.iter() {
                mono *= xi[i as usize - 1];
            }
            acc += self.comps[k] * multiplicity(idx) as f64 * mono;
        }
        Ok(acc)
    }

    /// Symmetrized product a (.) b of orders p and q, order p+q.
    pub fn sym_product(&self, other: &SymTensor) -> Result<SymTensor> {
        if self.dim != other.dim {
            return Err(TmtError::Argument("dimension mismatch in product".into()));
        }
        let n = self.dim;
        let p = self.order;
        let total = p + other.order;
        let mut out = SymTensor::zeros(n, total);
        for (k, idx) in sorted_multi_indices(n, total).iter().enumerate() {
            let perms = distinct_permutations(idx);
            let mut acc = 0.0;
            for perm in &perms {
                let a = self.get(&perm[..p]).unwrap();
                let b = other.get(&perm[p..]).unwrap();
                acc += a * b;
            }
            out.comps[k] = acc / perms.len() as f64;
        }
        Ok(out)
    }

    /// m-fold symmetric power of a vector.
    pub fn sym_power(theta: &[f64], order: usize) -> SymTensor {
        let n = theta.len();
        let mut out = SymTensor::zeros(n, order);
        for (k, idx) in sorted_multi_indices(n, order).iter().enumerate() {
            out.comps[k] = idx.iter().map(|&i| theta[i as usize - 1]).product();
        }
        out
    }

    /// Raise every index with the metric at a point: f^{i..} = f_{j..} g^{ij}..
    pub fn raise_all(&self, g: &[f64]) -> Result<SymTensor> {
        self.transform_all(&invert_spd(self.dim, g)?)
    }

    /// Lower every index with the metric at a point.
    pub fn lower_all(&self, g: &[f64]) -> Result<SymTensor> {
        if g.len() != self.dim * self.dim {
            return Err(TmtError::Argument("metric shape mismatch".into()));
        }
        self.transform_all(g)
    }

    /// Pullback under a linear map: contract every index with the Jacobian
    /// `mat`, where `mat[i*n + a]` is the world component `a` of the image
    /// of the new basis vector `i`.
    pub fn pull_back(&self, mat: &[f64]) -> Result<SymTensor> {
        if mat.len() != self.dim * self.dim {
            return Err(TmtError::Argument("jacobian shape mismatch".into()));
        }
        self.transform_all(mat)
    }

    /// Contract each index with an n x n matrix (row-major).
    fn transform_all(&self, mat: &[f64]) -> Result<SymTensor> {
        let n = self.dim;
        let m = self.order;
        let mut out = SymTensor::zeros(n, m);
        let indices = sorted_multi_indices(n, m);
        for (k, idx) in indices.iter().enumerate() {
            let mut acc = 0.0;
            // sum over all source tuples (j1..jm)
            let mut src = vec![1u8; m];
            loop {
                let mut w = 1.0;
                for d in 0..m {
                    w *= mat[(idx[d] as usize - 1) * n + (src[d] as usize - 1)];
                }
                if w != 0.0 {
                    acc += w * self.comps[pack_index(n, &src)?];
                }
                // odometer increment
                let mut d = 0;
                loop {
                    if d == m {
                        break;
                    }
                    if (src[d] as usize) < n {
                        src[d] += 1;
                        break;
                    }
                    src[d] = 1;
                    d += 1;
                }
                if d == m {
                    break;
                }
            }
            out.comps[k] = acc;
        }
        Ok(out)
    }

    pub fn scale(&self, a: f64) -> SymTensor {
        SymTensor {
            order: self.order,
            dim: self.dim,
            comps: self.comps.iter().map(|c| c * a).collect(),
        }
    }
}

/// Symmetrization of a dense n^m table: component at sorted I is the average
/// of the dense entries over all arrangements of I.
pub fn symmetrize(dim: usize, order: usize, dense: &[f64]) -> Result<SymTensor> {
    if dense.len() != dim.pow(order as u32) {
        return Err(TmtError::Argument(format!(
            "dense table length {} != {}^{}",
            dense.len(),
            dim,
            order
        )));
    }
    let mut out = SymTensor::zeros(dim, order);
    for (k, idx) in sorted_multi_indices(dim, order).iter().enumerate() {
        let perms = distinct_permutations(idx);
        let mut acc = 0.0;
        for perm in &perms {
            let mut flat = 0usize;
            for &i in perm.iter() {
                flat = flat * dim + (i as usize - 1);
            }
            acc += dense[flat];
        }
        out.comps_mut()[k] = acc / perms.len() as f64;
    }
    Ok(out)
}

fn invert_spd(n: usize, g: &[f64]) -> Result<Vec<f64>> {
    if g.len() != n * n {
        return Err(TmtError::Argument("metric shape mismatch".into()));
    }
    if n == 2 {
        let det = g[0] * g[3] - g[1] * g[2];
        if det <= 0.0 || g[0] <= 0.0 {
            return Err(TmtError::Numeric("metric not positive definite".into()));
        }
        return Ok(vec![g[3] / det, -g[1] / det, -g[2] / det, g[0] / det]);
    }
    // Gauss-Jordan for the occasional n > 2 use.
    let mut a = g.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[piv * n + col].abs() {
                piv = r;
            }
        }
        if a[piv * n + col].abs() < 1e-300 {
            return Err(TmtError::Numeric("singular metric".into()));
        }
        for c in 0..n {
            a.swap(col * n + c, piv * n + c);
            inv.swap(col * n + c, piv * n + c);
        }
        let d = a[col * n + col];
        for c in 0..n {
            a[col * n + c] /= d;
            inv[col * n + c] /= d;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r * n + col];
            for c in 0..n {
                a[r * n + c] -= f * a[col * n + c];
                inv[r * n + c] -= f * inv[col * n + c];
            }
        }
    }
    Ok(inv)
}

/// A symmetric m-tensor field sampled on a regular lattice.
///
/// Values are stored node-major (all components of node 0, then node 1, ...).
/// Nodes with `mask == false` lie outside the domain and carry zero values,
/// realizing the extension of fields by zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SymTensorField {
    pub order: usize,
    pub dim: usize,
    pub grid: Grid2,
    pub data: Vec<f64>,
    pub mask: Vec<bool>,
}

impl SymTensorField {
    pub fn zeros(grid: Grid2, order: usize, mask: Vec<bool>) -> SymTensorField {
        assert_eq!(mask.len(), grid.len());
        let nc = component_count(2, order);
        SymTensorField {
            order,
            dim: 2,
            data: vec![0.0; grid.len() * nc],
            grid,
            mask,
        }
    }

    pub fn ncomp(&self) -> usize {
        component_count(self.dim, self.order)
    }

    pub fn comp_at(&self, node: usize, comp: usize) -> f64 {
        self.data[node * self.ncomp() + comp]
    }

    pub fn comps_at(&self, node: usize) -> &[f64] {
        let nc = self.ncomp();
        &self.data[node * nc..(node + 1) * nc]
    }

    pub fn tensor_at(&self, node: usize) -> SymTensor {
        SymTensor::from_comps(self.dim, self.order, self.comps_at(node).to_vec()).unwrap()
    }

    pub fn set_tensor(&mut self, node: usize, t: &SymTensor) {
        let nc = self.ncomp();
        self.data[node * nc..(node + 1) * nc].copy_from_slice(t.comps());
    }

    /// Bilinear evaluation of every component at an arbitrary point.
    /// Zero outside the lattice; masked-out nodes hold zeros already.
    pub fn eval(&self, x1: f64, x2: f64) -> SymTensor {
        let nc = self.ncomp();
        let mut comps = vec![0.0; nc];
        let st = self.grid.bilinear(x1, x2);
        for (node, w) in st.iter() {
            let base = node * nc;
            for (c, slot) in comps.iter_mut().enumerate() {
                *slot += w * self.data[base + c];
            }
        }
        SymTensor::from_comps(self.dim, self.order, comps).unwrap()
    }

    /// Populate from a pointwise tensor function; masked-out nodes get zeros.
    pub fn from_fn(
        grid: Grid2,
        order: usize,
        mask: Vec<bool>,
        f: impl Fn(f64, f64) -> SymTensor,
    ) -> SymTensorField {
        let mut out = SymTensorField::zeros(grid, order, mask);
        for node in 0..out.grid.len() {
            if !out.mask[node] {
                continue;
            }
            let (x, y) = out.grid.coords_of(node);
            let t = f(x, y);
            out.set_tensor(node, &t);
        }
        out
    }

    /// Zero every component at masked-out nodes (restores the invariant
    /// after grid-wide stencil operations).
    pub fn apply_mask(&mut self) {
        let nc = self.ncomp();
        for node in 0..self.grid.len() {
            if !self.mask[node] {
                for c in 0..nc {
                    self.data[node * nc + c] = 0.0;
                }
            }
        }
    }

    pub fn linf_norm(&self) -> f64 {
        self.data.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    /// Plain (unweighted) discrete l2 norm of the component vector.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn axpy(&mut self, a: f64, other: &SymTensorField) {
        assert_eq!(self.data.len(), other.data.len());
        for (s, o) in self.data.iter_mut().zip(other.data.iter()) {
            *s += a * o;
        }
    }

    pub fn scale(&mut self, a: f64) {
        for s in self.data.iter_mut() {
            *s *= a;
        }
    }
}
