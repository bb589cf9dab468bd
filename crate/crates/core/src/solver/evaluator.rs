//! Structured per-family evaluation.
//!
//! Binary families never materialize factors: their contributions to the
//! objective, gradient, Gauss-Newton diagonal, and normal-equation products
//! are computed from the folded intra-set weight matrices directly.
//!
//! Let `X` be the `M x N` value grid and `A` a folded weight matrix
//! (family weight times intra weight over the family normalizer, thresholded
//! entries and the diagonal zeroed). Then, writing `Y = X .* X`:
//!
//! * loop objective per column `j`: `sum_{i<k} A[i,k] (X[i,j]-X[k,j])^2`,
//!   gradient `deg .* X - A X` (one GEMM), diagonal `deg` broadcast,
//!   matvec `deg .* P - A P`;
//! * product-exclusion objective: `sum_{i<k} A[i,k] (X[i,j] X[k,j])^2`,
//!   gradient `X .* (A Y)`, diagonal `A Y`,
//!   matvec `P .* (A Y) + X .* (A (X .* P))`;
//! * query-side families mirror these with right-multiplication.
//!
//! The `Min` and `SoftAnd` exclusion variants have data-dependent active
//! sets, so their derivative terms fall back to pair loops.
//!
//! Objective sums are compensated and chunk-ordered (see [`crate::exec`]),
//! and the sequence means here add cells in exactly the same order as
//! [`crate::factors::segment_mean`], so the structured objective and the
//! enumerated residual route agree to round-off, and the solver trace is
//! bitwise-consistent with [`crate::graph::FactorGraph::global_error`].

use ndarray::{s, Array1, Array2};

use crate::exec::{self, Accumulator};
use crate::factors::better_velocity;
use crate::graph::FactorGraph;
use crate::types::ExclusionVariant;

/// Standard-layout transpose; `.t().to_owned()` keeps the reversed strides
/// and cannot be viewed as a flat slice.
fn transpose(a: ndarray::ArrayView2<'_, f64>) -> Array2<f64> {
    a.t().as_standard_layout().into_owned()
}

/// Folded symmetric weight matrix with zero diagonal, plus its row sums.
struct Family {
    w: Array2<f64>,
    deg: Array1<f64>,
}

impl Family {
    /// Folds `scale * weight(intra)` over off-diagonal entries at or above
    /// `threshold`; returns `None` when everything is disabled.
    fn build(
        intra: &Array2<f64>,
        scale: f64,
        threshold: f64,
        complement: bool,
    ) -> Option<Family> {
        if scale <= 0.0 {
            return None;
        }
        let n = intra.nrows();
        if n < 2 {
            return None;
        }
        let mut w = Array2::zeros((n, n));
        for i in 0..n {
            for k in 0..n {
                if i == k {
                    continue;
                }
                let raw = if complement { 1.0 - intra[(i, k)] } else { intra[(i, k)] };
                if raw >= threshold {
                    w[(i, k)] = scale * raw;
                }
            }
        }
        let deg = w.sum_axis(ndarray::Axis(1));
        Some(Family { w, deg })
    }
}

/// Per-velocity segment geometry: the database offset for each query
/// offset, shared by every anchor.
struct SeqGeometry {
    velocities: Vec<f64>,
    half: i64,
    /// `dk[vi][d]` for `d = dl + half`.
    dk: Vec<Vec<i64>>,
}

/// Sequence branch selection at a fixed iterate.
pub(crate) struct SeqAssignment {
    /// Chosen velocity index per cell.
    pub branch: Vec<u8>,
    /// Effective segment length per cell.
    pub len: Vec<u32>,
    /// Chosen segment mean per cell.
    pub mean: Vec<f64>,
    /// CSR transpose of the averaging operator `A`: for each target cell,
    /// the source cells whose chosen segment contains it, with weight
    /// `1/len(source)`. Sources appear in ascending flat order.
    t_start: Vec<u32>,
    t_src: Vec<u32>,
    t_w: Vec<f64>,
    /// Per-cell diagonal of `(I-A)^T (I-A)`.
    diag_core: Vec<f64>,
}

/// Everything the solver reuses per outer iteration.
pub(crate) struct IterationState {
    pub x: Array2<f64>,
    /// Transposed copy of `x`, used by pair loops on the database side.
    pub xt: Array2<f64>,
    pub assign: Option<SeqAssignment>,
    /// `A_e_db * Y` for the Product variant.
    s1_db: Option<Array2<f64>>,
    /// `Y * A_e_q` for the Product variant.
    t1_q: Option<Array2<f64>>,
}

pub(crate) struct StructuredEval<'g> {
    g: &'g FactorGraph,
    m: usize,
    n: usize,
    c_prior: f64,
    c_seq: f64,
    db_loop: Option<Family>,
    db_excl: Option<Family>,
    q_loop: Option<Family>,
    q_excl: Option<Family>,
    seq_geo: Option<SeqGeometry>,
}

impl<'g> StructuredEval<'g> {
    pub fn new(g: &'g FactorGraph) -> Self {
        let (m, n) = (g.rows(), g.cols());
        let norms = g.normalizers();
        let w = g.weights();
        let thr = g.threshold();
        let (db_loop, db_excl) = match g.intra_db() {
            Some(db) if norms.db_pairs > 0.0 => (
                Family::build(db.values(), w.db_loop / norms.db_pairs, thr, false),
                Family::build(db.values(), w.db_exclusion / norms.db_pairs, thr, true),
            ),
            _ => (None, None),
        };
        let (q_loop, q_excl) = match g.intra_q() {
            Some(q) if norms.q_pairs > 0.0 => (
                Family::build(q.values(), w.q_loop / norms.q_pairs, thr, false),
                Family::build(q.values(), w.q_exclusion / norms.q_pairs, thr, true),
            ),
            _ => (None, None),
        };
        let seq_geo = g.seq().map(|cfg| {
            let half = cfg.half_width() as i64;
            let dk = cfg
                .velocities
                .iter()
                .map(|&v| (-half..=half).map(|d| (v * d as f64).round() as i64).collect())
                .collect();
            SeqGeometry { velocities: cfg.velocities.clone(), half, dk }
        });
        StructuredEval {
            g,
            m,
            n,
            c_prior: 1.0 / norms.cells,
            c_seq: if g.seq().is_some() { w.seq / norms.cells } else { 0.0 },
            db_loop,
            db_excl,
            q_loop,
            q_excl,
            seq_geo,
        }
    }

    /// Per-velocity segment means at `x`, then the per-cell winner.
    /// Accumulation is query-offset ascending, matching `segment_mean`.
    fn best_means(&self, x: ndarray::ArrayView2<'_, f64>) -> (Vec<u8>, Vec<u32>, Vec<f64>) {
        let geo = self.seq_geo.as_ref().expect("sequence family is on");
        let (m, n) = (self.m, self.n);
        let cells = m * n;
        let mut best_branch = vec![0u8; cells];
        let mut best_len = vec![0u32; cells];
        let mut best_mean = vec![f64::NEG_INFINITY; cells];
        let mut acc = Array2::<f64>::zeros((m, n));
        let mut len = Array2::<u32>::zeros((m, n));
        for (vi, dks) in geo.dk.iter().enumerate() {
            acc.fill(0.0);
            len.fill(0);
            for (di, &dk) in dks.iter().enumerate() {
                let dl = di as i64 - geo.half;
                let r_lo = 0.max(-dk) as usize;
                let r_hi = (m as i64).min(m as i64 - dk).max(0) as usize;
                let c_lo = 0.max(-dl) as usize;
                let c_hi = (n as i64).min(n as i64 - dl).max(0) as usize;
                if r_lo >= r_hi || c_lo >= c_hi {
                    continue;
                }
                let src = x.slice(s![
                    (r_lo as i64 + dk) as usize..(r_hi as i64 + dk) as usize,
                    (c_lo as i64 + dl) as usize..(c_hi as i64 + dl) as usize
                ]);
                let mut dst = acc.slice_mut(s![r_lo..r_hi, c_lo..c_hi]);
                dst += &src;
                let mut cnt = len.slice_mut(s![r_lo..r_hi, c_lo..c_hi]);
                cnt += 1;
            }
            let v = geo.velocities[vi];
            let acc_flat = acc.as_slice().unwrap();
            let len_flat = len.as_slice().unwrap();
            for c in 0..cells {
                let mean = acc_flat[c] / len_flat[c] as f64;
                if vi == 0
                    || better_velocity(
                        mean,
                        v,
                        best_mean[c],
                        geo.velocities[best_branch[c] as usize],
                    )
                {
                    best_branch[c] = vi as u8;
                    best_len[c] = len_flat[c];
                    best_mean[c] = mean;
                }
            }
        }
        (best_branch, best_len, best_mean)
    }

    /// Fixes the sequence branches at `x` and precomputes what the Product
    /// variant reuses across CG iterations.
    pub fn prepare(&self, x: &Array2<f64>) -> IterationState {
        let x = x.as_standard_layout().into_owned();
        let assign = self.seq_geo.as_ref().map(|geo| {
            let (branch, len, mean) = self.best_means(x.view());
            let cells = self.m * self.n;
            let mut counts = vec![0u32; cells + 1];
            self.for_each_segment_cell(geo, &branch, |_, target| {
                counts[target + 1] += 1;
            });
            for c in 0..cells {
                counts[c + 1] += counts[c];
            }
            let t_start = counts;
            let mut cursor = t_start.clone();
            let total = t_start[cells] as usize;
            let mut t_src = vec![0u32; total];
            let mut t_w = vec![0.0f64; total];
            self.for_each_segment_cell(geo, &branch, |source, target| {
                let slot = cursor[target] as usize;
                t_src[slot] = source as u32;
                t_w[slot] = 1.0 / len[source] as f64;
                cursor[target] += 1;
            });
            let diag_core = exec::map_indexed(cells, |c| {
                let own = 1.0 - 1.0 / len[c] as f64;
                let mut d = own * own;
                for s in t_start[c] as usize..t_start[c + 1] as usize {
                    if t_src[s] as usize != c {
                        d += t_w[s] * t_w[s];
                    }
                }
                d
            });
            SeqAssignment { branch, len, mean, t_start, t_src, t_w, diag_core }
        });
        let y = &x * &x;
        let s1_db = match (&self.db_excl, self.g.variant()) {
            (Some(f), ExclusionVariant::Product) => Some(exec::gemm(f.w.view(), y.view())),
            _ => None,
        };
        let t1_q = match (&self.q_excl, self.g.variant()) {
            (Some(f), ExclusionVariant::Product) => Some(exec::gemm(y.view(), f.w.view())),
            _ => None,
        };
        IterationState { xt: transpose(x.view()), x, assign, s1_db, t1_q }
    }

    /// Visits `(source cell, segment cell)` for every cell's chosen branch,
    /// sources in flat order, segment cells query-ascending.
    fn for_each_segment_cell<F: FnMut(usize, usize)>(
        &self,
        geo: &SeqGeometry,
        branch: &[u8],
        mut f: F,
    ) {
        let (m, n) = (self.m as i64, self.n as i64);
        for i in 0..self.m {
            for j in 0..self.n {
                let source = i * self.n + j;
                let dks = &geo.dk[branch[source] as usize];
                for (di, &dk) in dks.iter().enumerate() {
                    let dl = di as i64 - geo.half;
                    let l = j as i64 + dl;
                    let k = i as i64 + dk;
                    if l >= 0 && l < n && k >= 0 && k < m {
                        f(source, (k * n + l) as usize);
                    }
                }
            }
        }
    }

    /// Segment mean of an arbitrary grid `p` under a fixed assignment.
    fn apply_averaging(&self, assign: &SeqAssignment, p: &[f64]) -> Vec<f64> {
        let geo = self.seq_geo.as_ref().expect("sequence family is on");
        let (m, n) = (self.m as i64, self.n as i64);
        let cols = self.n;
        exec::map_indexed(self.m * self.n, |c| {
            let i = (c / cols) as i64;
            let j = (c % cols) as i64;
            let dks = &geo.dk[assign.branch[c] as usize];
            let mut sum = 0.0;
            for (di, &dk) in dks.iter().enumerate() {
                let dl = di as i64 - geo.half;
                let l = j + dl;
                let k = i + dk;
                if l >= 0 && l < n && k >= 0 && k < m {
                    sum += p[(k * n + l) as usize];
                }
            }
            sum / assign.len[c] as f64
        })
    }

    /// `A^T y` under a fixed assignment.
    fn apply_averaging_transpose(&self, assign: &SeqAssignment, y: &[f64]) -> Vec<f64> {
        exec::map_indexed(self.m * self.n, |c| {
            let mut sum = 0.0;
            for s in assign.t_start[c] as usize..assign.t_start[c + 1] as usize {
                sum += assign.t_w[s] * y[assign.t_src[s] as usize];
            }
            sum
        })
    }

    /// The global error at `x`. Family structure follows the normalized
    /// error decomposition; sums are compensated.
    pub fn error(&self, x: &Array2<f64>) -> f64 {
        let variant = self.g.variant();
        let s_hat = self.g.initial_values();
        let x_std = x.as_standard_layout();
        let x = &x_std;
        let xs = x.as_slice().expect("standard layout");
        let hs = s_hat.as_slice().expect("standard layout");
        let mut total = Accumulator::default();

        let c_p = self.c_prior;
        total.add(exec::sum_indexed(xs.len(), |c| {
            let d = xs[c] - hs[c];
            c_p * d * d
        }));

        if self.db_loop.is_some() || self.db_excl.is_some() {
            let xt = transpose(x.view());
            let xt_flat = xt.as_slice().unwrap();
            let m = self.m;
            total.add(exec::sum_indexed(self.n, |j| {
                let col = &xt_flat[j * m..(j + 1) * m];
                pair_cost(col, &self.db_loop, &self.db_excl, variant)
            }));
        }
        if self.q_loop.is_some() || self.q_excl.is_some() {
            let n = self.n;
            total.add(exec::sum_indexed(self.m, |i| {
                let row = &xs[i * n..(i + 1) * n];
                pair_cost(row, &self.q_loop, &self.q_excl, variant)
            }));
        }
        if self.seq_geo.is_some() {
            let (_, _, mean) = self.best_means(x.view());
            let c_s = self.c_seq;
            total.add(exec::sum_indexed(xs.len(), |c| {
                let d = xs[c] - mean[c];
                c_s * d * d
            }));
        }
        total.value()
    }

    /// Gradient `J^T r` and Gauss-Newton diagonal `diag(J^T J)` at the
    /// prepared iterate.
    pub fn gradient_diag(&self, st: &IterationState) -> (Array2<f64>, Array2<f64>) {
        let (m, n) = (self.m, self.n);
        let x = &st.x;
        let mut g = (x - self.g.initial_values()) * self.c_prior;
        let mut d = Array2::from_elem((m, n), self.c_prior);

        if let Some(fam) = &self.db_loop {
            let wx = exec::gemm(fam.w.view(), x.view());
            for i in 0..m {
                let deg = fam.deg[i];
                let mut g_row = g.row_mut(i);
                g_row.zip_mut_with(&x.row(i), |gv, &xv| *gv += deg * xv);
                g_row -= &wx.row(i);
                d.row_mut(i).mapv_inplace(|v| v + deg);
            }
        }
        if let Some(fam) = &self.db_excl {
            match self.g.variant() {
                ExclusionVariant::Product => {
                    let s1 = st.s1_db.as_ref().expect("prepared for Product");
                    g.zip_mut_with(&(x * s1), |gv, &t| *gv += t);
                    d += s1;
                }
                variant => {
                    let (gt, dt) = pair_grad_diag(&st.xt, &fam.w, variant);
                    g += &gt.t();
                    d += &dt.t();
                }
            }
        }
        if let Some(fam) = &self.q_loop {
            let xv = exec::gemm(x.view(), fam.w.view());
            for i in 0..m {
                let mut g_row = g.row_mut(i);
                for j in 0..n {
                    g_row[j] += fam.deg[j] * x[(i, j)] - xv[(i, j)];
                }
                let mut d_row = d.row_mut(i);
                for j in 0..n {
                    d_row[j] += fam.deg[j];
                }
            }
        }
        if let Some(fam) = &self.q_excl {
            match self.g.variant() {
                ExclusionVariant::Product => {
                    let t1 = st.t1_q.as_ref().expect("prepared for Product");
                    g.zip_mut_with(&(x * t1), |gv, &t| *gv += t);
                    d += t1;
                }
                variant => {
                    let (gq, dq) = pair_grad_diag(x, &fam.w, variant);
                    g += &gq;
                    d += &dq;
                }
            }
        }
        if let Some(assign) = &st.assign {
            let xs = x.as_slice().unwrap();
            let cells = m * n;
            let r_core: Vec<f64> = (0..cells).map(|c| xs[c] - assign.mean[c]).collect();
            let at = self.apply_averaging_transpose(assign, &r_core);
            let c_s = self.c_seq;
            let g_flat = g.as_slice_mut().unwrap();
            let d_flat = d.as_slice_mut().unwrap();
            for c in 0..cells {
                g_flat[c] += c_s * (r_core[c] - at[c]);
                d_flat[c] += c_s * assign.diag_core[c];
            }
        }
        (g, d)
    }

    /// `out = (J^T J) p` at the prepared iterate.
    pub fn apply_normal(&self, st: &IterationState, p: &Array2<f64>, out: &mut Array2<f64>) {
        let (m, n) = (self.m, self.n);
        let x = &st.x;
        out.assign(p);
        *out *= self.c_prior;

        if let Some(fam) = &self.db_loop {
            let wp = exec::gemm(fam.w.view(), p.view());
            for i in 0..m {
                let deg = fam.deg[i];
                let mut o_row = out.row_mut(i);
                for j in 0..n {
                    o_row[j] += deg * p[(i, j)] - wp[(i, j)];
                }
            }
        }
        if let Some(fam) = &self.db_excl {
            match self.g.variant() {
                ExclusionVariant::Product => {
                    let s1 = st.s1_db.as_ref().unwrap();
                    let xp = exec::gemm(fam.w.view(), (x * p).view());
                    ndarray::Zip::from(&mut *out)
                        .and(p)
                        .and(s1)
                        .and(x)
                        .and(&xp)
                        .for_each(|o, &pv, &s1v, &xv, &xpv| *o += pv * s1v + xv * xpv);
                }
                variant => {
                    let pt = transpose(p.view());
                    let ot = pair_apply(&st.xt, &pt, &fam.w, variant);
                    *out += &ot.t();
                }
            }
        }
        if let Some(fam) = &self.q_loop {
            let pv = exec::gemm(p.view(), fam.w.view());
            for i in 0..m {
                let mut o_row = out.row_mut(i);
                for j in 0..n {
                    o_row[j] += fam.deg[j] * p[(i, j)] - pv[(i, j)];
                }
            }
        }
        if let Some(fam) = &self.q_excl {
            match self.g.variant() {
                ExclusionVariant::Product => {
                    let t1 = st.t1_q.as_ref().unwrap();
                    let xp = exec::gemm((x * p).view(), fam.w.view());
                    ndarray::Zip::from(&mut *out)
                        .and(p)
                        .and(t1)
                        .and(x)
                        .and(&xp)
                        .for_each(|o, &pv, &t1v, &xv, &xpv| *o += pv * t1v + xv * xpv);
                }
                variant => {
                    let oq = pair_apply(x, p, &fam.w, variant);
                    *out += &oq;
                }
            }
        }
        if let Some(assign) = &st.assign {
            let ps = p.as_slice().unwrap();
            let ap = self.apply_averaging(assign, ps);
            let cells = m * n;
            let u: Vec<f64> = (0..cells).map(|c| ps[c] - ap[c]).collect();
            let atu = self.apply_averaging_transpose(assign, &u);
            let c_s = self.c_seq;
            let o_flat = out.as_slice_mut().unwrap();
            for c in 0..cells {
                o_flat[c] += c_s * (u[c] - atu[c]);
            }
        }
    }
}

/// Loop plus exclusion cost over all pairs of one slice (a column of the
/// database side or a row of the query side). Inner sums are plain and
/// per-anchor partials are compensated; combined with the chunk-ordered
/// outer sum this keeps the result within round-off of the enumerated
/// factor costs.
fn pair_cost(
    vals: &[f64],
    loop_fam: &Option<Family>,
    excl_fam: &Option<Family>,
    variant: ExclusionVariant,
) -> f64 {
    let m = vals.len();
    let mut acc = Accumulator::default();
    for i in 0..m {
        let a = vals[i];
        let mut part = 0.0;
        if let Some(fam) = loop_fam {
            let row = fam.w.row(i);
            for k in (i + 1)..m {
                let dv = a - vals[k];
                part += row[k] * dv * dv;
            }
        }
        if let Some(fam) = excl_fam {
            let row = fam.w.row(i);
            match variant {
                ExclusionVariant::Product => {
                    for k in (i + 1)..m {
                        let b = a * vals[k];
                        part += row[k] * b * b;
                    }
                }
                ExclusionVariant::Min => {
                    for k in (i + 1)..m {
                        let b = a.min(vals[k]);
                        part += row[k] * b * b;
                    }
                }
                ExclusionVariant::SoftAnd => {
                    for k in (i + 1)..m {
                        let b = (a + vals[k] - 1.0).max(0.0);
                        part += row[k] * b * b;
                    }
                }
            }
        }
        acc.add(part);
    }
    acc.value()
}

/// Gradient and diagonal contributions of the Min/SoftAnd exclusion
/// variants over the pair structure of `grid` rows. Min ties activate the
/// lower index; SoftAnd is flat at and below its kink.
fn pair_grad_diag(
    grid: &Array2<f64>,
    w: &Array2<f64>,
    variant: ExclusionVariant,
) -> (Array2<f64>, Array2<f64>) {
    let (rows, m) = grid.dim();
    let mut g = Array2::zeros((rows, m));
    let mut d = Array2::zeros((rows, m));
    for r in 0..rows {
        let vals = grid.row(r);
        for i in 0..m {
            for k in (i + 1)..m {
                let wv = w[(i, k)];
                if wv == 0.0 {
                    continue;
                }
                let (a, b) = (vals[i], vals[k]);
                match variant {
                    ExclusionVariant::Min => {
                        let (idx, base) = if a <= b { (i, a) } else { (k, b) };
                        g[(r, idx)] += wv * base;
                        d[(r, idx)] += wv;
                    }
                    ExclusionVariant::SoftAnd => {
                        let t = a + b - 1.0;
                        if t > 0.0 {
                            g[(r, i)] += wv * t;
                            g[(r, k)] += wv * t;
                            d[(r, i)] += wv;
                            d[(r, k)] += wv;
                        }
                    }
                    ExclusionVariant::Product => unreachable!("handled via GEMM"),
                }
            }
        }
    }
    (g, d)
}

/// `(J^T J) p` contribution of the Min/SoftAnd exclusion variants.
fn pair_apply(
    grid: &Array2<f64>,
    p: &Array2<f64>,
    w: &Array2<f64>,
    variant: ExclusionVariant,
) -> Array2<f64> {
    let (rows, m) = grid.dim();
    let mut out = Array2::zeros((rows, m));
    for r in 0..rows {
        let vals = grid.row(r);
        let pr = p.row(r);
        for i in 0..m {
            for k in (i + 1)..m {
                let wv = w[(i, k)];
                if wv == 0.0 {
                    continue;
                }
                let (a, b) = (vals[i], vals[k]);
                match variant {
                    ExclusionVariant::Min => {
                        let idx = if a <= b { i } else { k };
                        out[(r, idx)] += wv * pr[idx];
                    }
                    ExclusionVariant::SoftAnd => {
                        if a + b - 1.0 > 0.0 {
                            let s = pr[i] + pr[k];
                            out[(r, i)] += wv * s;
                            out[(r, k)] += wv * s;
                        }
                    }
                    ExclusionVariant::Product => unreachable!("handled via GEMM"),
                }
            }
        }
    }
    out
}
