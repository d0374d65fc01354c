//! Envelope (profile) block-LDLᵀ factorization of symmetric matrices.
//!
//! Rows are stored from their first structural nonzero up to the diagonal.
//! Factorization in a fixed order fills only inside this envelope, so with
//! a stage-wise elimination order a multiple-shooting KKT matrix factors in
//! time linear in the number of stages.
//!
//! Pivots are 1×1 or statically chosen 2×2 blocks on consecutive indices.
//! Pairing a constraint row with a variable it defines (a continuity row and
//! the node state it fixes, say) gives pivot blocks `[[0, b], [b, h]]` that
//! stay well conditioned however small `h` is, which is exactly where 1×1
//! pivots break down. The signs of the pivot blocks give the inertia.

#[derive(Debug, Clone)]
pub struct Envelope {
    n: usize,
    first: Vec<usize>,
    start: Vec<usize>,
    vals: Vec<f64>,
    /// `pair[i]`: `i` is the first index of a 2×2 pivot.
    pair: Vec<bool>,
    d: Vec<f64>,
    /// Off-diagonal entry of each 2×2 pivot, stored at its first index.
    e: Vec<f64>,
    /// Symmetric equilibration applied before factoring.
    scale: Vec<f64>,
    factored: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Inertia {
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
}

impl Envelope {
    /// Envelope covering the lower-triangle entries `(i, j)`, with 2×2
    /// pivots on `(p, p + 1)` for every `p` in `pairs`.
    pub fn new(n: usize, entries: impl IntoIterator<Item = (usize, usize)>, pairs: &[usize]) -> Self {
        let mut first: Vec<usize> = (0..n).collect();
        for (i, j) in entries {
            let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
            first[hi] = first[hi].min(lo);
        }
        let mut pair = vec![false; n];
        for &p in pairs {
            assert!(p + 1 < n, "2x2 pivot at {p} out of range");
            assert!(
                !pair[p] && (p == 0 || !pair[p - 1]) && !pair[p + 1],
                "overlapping 2x2 pivots at {p}"
            );
            pair[p] = true;
            first[p + 1] = first[p + 1].min(p);
        }
        // A row whose envelope starts inside a 2×2 pivot covers all of it.
        for f in first.iter_mut() {
            if *f > 0 && pair[*f - 1] {
                *f -= 1;
            }
        }
        let mut start = Vec::with_capacity(n + 1);
        let mut total = 0;
        for (i, &f) in first.iter().enumerate() {
            start.push(total);
            total += i - f + 1;
        }
        start.push(total);
        Self {
            n,
            first,
            start,
            vals: vec![0.0; total],
            pair,
            d: vec![0.0; n],
            e: vec![0.0; n],
            scale: vec![1.0; n],
            factored: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Storage offset of entry `(i, j)`; panics outside the envelope.
    pub fn position(&self, i: usize, j: usize) -> usize {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        assert!(lo >= self.first[hi], "entry ({hi}, {lo}) outside the envelope");
        self.start[hi] + lo - self.first[hi]
    }

    pub fn clear(&mut self) {
        self.vals.iter_mut().for_each(|v| *v = 0.0);
        self.factored = false;
    }

    pub fn add_at(&mut self, pos: usize, v: f64) {
        self.vals[pos] += v;
    }

    fn block_start(&self, i: usize) -> usize {
        if i > 0 && self.pair[i - 1] {
            i - 1
        } else {
            i
        }
    }

    /// Scales rows and columns symmetrically (Ruiz iteration) so that every
    /// row has largest entry close to one. Congruence keeps the inertia.
    fn equilibrate(&mut self, sweeps: usize) {
        self.scale.iter_mut().for_each(|s| *s = 1.0);
        let mut r = vec![0.0f64; self.n];
        for _ in 0..sweeps {
            r.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..self.n {
                let fi = self.first[i];
                for (j, a) in (fi..=i).zip(&self.vals[self.start[i]..self.start[i + 1]]) {
                    let a = a.abs();
                    r[i] = r[i].max(a);
                    r[j] = r[j].max(a);
                }
            }
            if r.iter().all(|v| (v - 1.0).abs() < 1e-2 || *v == 0.0) {
                break;
            }
            let f: Vec<f64> = r
                .iter()
                .map(|&v| if v > 0.0 && v.is_finite() { 1.0 / v.sqrt() } else { 1.0 })
                .collect();
            for i in 0..self.n {
                let fi = self.first[i];
                let si = self.start[i];
                for j in fi..=i {
                    self.vals[si + j - fi] *= f[i] * f[j];
                }
                self.scale[i] *= f[i];
            }
        }
    }

    /// `Σ_k w[k] L(j, k)` over `k ∈ [max(from, first_j), to)`.
    fn dot_row(&self, w: &[f64], j: usize, from: usize, to: usize) -> f64 {
        let fj = self.first[j];
        let k0 = from.max(fj);
        if k0 >= to {
            return 0.0;
        }
        let sj = self.start[j];
        w[k0..to]
            .iter()
            .zip(&self.vals[sj + k0 - fj..sj + to - fj])
            .map(|(a, b)| a * b)
            .sum()
    }

    /// In-place block `LDLᵀ` of the equilibrated matrix; returns the
    /// inertia. A 1×1 pivot at most `zero_tol` times the largest entry of
    /// its scaled row counts as zero; likewise a 2×2 determinant relative to
    /// the square of its block.
    pub fn factor(&mut self, zero_tol: f64) -> Inertia {
        self.equilibrate(8);
        let mut inertia = Inertia {
            positive: 0,
            negative: 0,
            zero: 0,
        };
        // w[k] = (L D)(i, k) for the row being processed.
        let mut w = vec![0.0; self.n];
        for i in 0..self.n {
            let fi = self.first[i];
            let si = self.start[i];
            let bs = self.block_start(i);
            let row_scale = self.vals[si..=si + i - fi]
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()))
                .max(f64::MIN_POSITIVE);
            let mut j = fi;
            while j < bs {
                let wj = self.vals[si + j - fi] - self.dot_row(&w, j, fi, j);
                w[j] = wj;
                if self.pair[j] {
                    let wj1 = self.vals[si + j + 1 - fi] - self.dot_row(&w, j + 1, fi, j);
                    w[j + 1] = wj1;
                    let (a, b, c) = (self.d[j], self.e[j], self.d[j + 1]);
                    let det = a * c - b * b;
                    let (l0, l1) = if det != 0.0 {
                        ((wj * c - wj1 * b) / det, (wj1 * a - wj * b) / det)
                    } else {
                        (0.0, 0.0)
                    };
                    self.vals[si + j - fi] = l0;
                    self.vals[si + j + 1 - fi] = l1;
                    j += 2;
                } else {
                    self.vals[si + j - fi] = if self.d[j] != 0.0 { wj / self.d[j] } else { 0.0 };
                    j += 1;
                }
            }
            let di = self.vals[si + i - fi] - self.dot_row(&w, i, fi, bs);
            self.vals[si + i - fi] = 1.0;
            if bs == i {
                if self.pair[i] {
                    self.d[i] = di;
                    continue;
                }
                if !di.is_finite() || di.abs() <= zero_tol * row_scale {
                    inertia.zero += 1;
                    self.d[i] = if di.is_finite() { di } else { 0.0 };
                } else {
                    self.d[i] = di;
                    if di > 0.0 {
                        inertia.positive += 1;
                    } else {
                        inertia.negative += 1;
                    }
                }
                continue;
            }
            // Second row of a 2×2 pivot: complete the block.
            let p = bs;
            let b = self.vals[si + p - fi] - self.dot_row(&w, p, fi, p);
            self.vals[si + p - fi] = 0.0;
            let a = self.d[p];
            let det = a * di - b * b;
            let size = a.abs().max(b.abs()).max(di.abs());
            if !det.is_finite() || det.abs() <= zero_tol * size * size.max(row_scale) {
                inertia.zero += 1;
                if a + di > 0.0 {
                    inertia.positive += 1;
                } else if a + di < 0.0 {
                    inertia.negative += 1;
                } else {
                    inertia.zero += 1;
                }
                if !det.is_finite() {
                    self.d[p] = 0.0;
                    self.e[p] = 0.0;
                    self.d[i] = 0.0;
                    continue;
                }
            } else if det < 0.0 {
                inertia.positive += 1;
                inertia.negative += 1;
            } else if a + di > 0.0 {
                inertia.positive += 2;
            } else {
                inertia.negative += 2;
            }
            self.e[p] = b;
            self.d[i] = di;
        }
        self.factored = true;
        inertia
    }

    /// Solves with the factored matrix, in place.
    pub fn solve(&self, b: &mut [f64]) {
        assert!(self.factored, "solve before factor");
        let n = self.n;
        for (v, s) in b.iter_mut().zip(&self.scale) {
            *v *= s;
        }
        for i in 0..n {
            let fi = self.first[i];
            let si = self.start[i];
            let s: f64 = self.vals[si..si + i - fi]
                .iter()
                .zip(&b[fi..i])
                .map(|(l, y)| l * y)
                .sum();
            b[i] -= s;
        }
        let mut i = 0;
        while i < n {
            if self.pair[i] {
                let (a, e, c) = (self.d[i], self.e[i], self.d[i + 1]);
                let det = a * c - e * e;
                let (y0, y1) = (b[i], b[i + 1]);
                if det != 0.0 {
                    b[i] = (y0 * c - y1 * e) / det;
                    b[i + 1] = (y1 * a - y0 * e) / det;
                } else {
                    b[i] = 0.0;
                    b[i + 1] = 0.0;
                }
                i += 2;
            } else {
                b[i] = if self.d[i] != 0.0 { b[i] / self.d[i] } else { 0.0 };
                i += 1;
            }
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let si = self.start[i];
            let xi = b[i];
            for (k, l) in (fi..i).zip(&self.vals[si..si + i - fi]) {
                b[k] -= l * xi;
            }
        }
        for (v, s) in b.iter_mut().zip(&self.scale) {
            *v *= s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn load(a: &DMatrix<f64>, pairs: &[usize]) -> Envelope {
        let n = a.nrows();
        let entries: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (0..i).map(move |j| (i, j)))
            .filter(|&(i, j)| a[(i, j)] != 0.0)
            .collect();
        let mut env = Envelope::new(n, entries, pairs);
        for i in 0..n {
            for j in 0..=i {
                if a[(i, j)] != 0.0 {
                    let p = env.position(i, j);
                    env.add_at(p, a[(i, j)]);
                }
            }
        }
        env
    }

    fn residual(a: &DMatrix<f64>, env: &Envelope) -> f64 {
        let n = a.nrows();
        let b: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        let mut x = b.clone();
        env.solve(&mut x);
        (a * DVector::from_vec(x) - DVector::from_vec(b)).amax()
    }

    #[test]
    fn solves_quasi_definite_system() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 2.0, 1.0, 3.0, 0.0, 2.0, 0.0, -1.0]);
        let mut env = load(&a, &[]);
        assert_eq!(
            env.factor(1e-14),
            Inertia {
                positive: 2,
                negative: 1,
                zero: 0
            }
        );
        assert!(residual(&a, &env) < 1e-14);
    }

    #[test]
    fn tridiagonal_profile_is_compact() {
        let n = 1000;
        let env = Envelope::new(n, (1..n).map(|i| (i, i - 1)), &[]);
        assert_eq!(env.vals.len(), 2 * n - 1);
    }

    #[test]
    fn detects_singular_pivot() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let mut env = load(&a, &[]);
        assert_eq!(env.factor(1e-14).zero, 1);
    }

    #[test]
    fn paired_pivot_handles_zero_diagonal() {
        let a = DMatrix::from_row_slice(3, 3, &[0.0, -1.0, 0.5, -1.0, 0.0, 0.0, 0.5, 0.0, 2.0]);
        let mut single = load(&a, &[]);
        assert!(single.factor(1e-14).zero > 0);
        let mut paired = load(&a, &[0]);
        assert_eq!(
            paired.factor(1e-14),
            Inertia {
                positive: 2,
                negative: 1,
                zero: 0
            }
        );
        assert!(residual(&a, &paired) < 1e-14);
    }

    #[test]
    fn random_indefinite_against_dense() {
        let n = 30;
        let mut seed = 12345u64;
        let mut a = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            a[(i, i)] = if i % 3 == 2 {
                -1e-3 * lcg(&mut seed).abs()
            } else {
                1.0 + lcg(&mut seed).abs() * 1e4
            };
            for j in i.saturating_sub(4)..i {
                if lcg(&mut seed) > 0.0 {
                    let v = lcg(&mut seed) * 100.0;
                    a[(i, j)] = v;
                    a[(j, i)] = v;
                }
            }
        }
        let mut env = load(&a, &[]);
        env.factor(0.0);
        assert!(residual(&a, &env) < 1e-8);
    }

    #[test]
    fn staged_kkt_inertia_matches_eigenvalues() {
        let mut seed = 7;
        for trial in 0..20 {
            // Stages of [row, var, var], each row paired with the next variable.
            let stages = 6;
            let n = 3 * stages;
            let mut a = DMatrix::<f64>::zeros(n, n);
            let mut pairs = Vec::new();
            for s in 0..stages {
                let (r, v0, v1) = (3 * s, 3 * s + 1, 3 * s + 2);
                pairs.push(r);
                a[(r, v0)] = -1.0;
                a[(v0, r)] = -1.0;
                a[(v0, v0)] = 1e-3 * lcg(&mut seed).abs() * (trial % 2) as f64;
                a[(v1, v1)] = 1.0 + lcg(&mut seed).abs();
                let c = 0.3 * lcg(&mut seed);
                a[(v1, v0)] = c;
                a[(v0, v1)] = c;
                if s > 0 {
                    for prev in [3 * s - 2, 3 * s - 1] {
                        let v = lcg(&mut seed);
                        a[(r, prev)] = v;
                        a[(prev, r)] = v;
                    }
                }
            }
            let mut env = load(&a, &pairs);
            let inertia = env.factor(1e-14);
            let neg = a
                .clone()
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .filter(|&&l| l < 0.0)
                .count();
            assert_eq!(inertia.negative, neg, "trial {trial}");
            assert_eq!(inertia.zero, 0, "trial {trial}");
            assert!(residual(&a, &env) < 1e-10, "trial {trial}");
        }
    }
}
