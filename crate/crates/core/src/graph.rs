//! Factor graph assembly, the global error, and patch orchestration.
//!
//! A graph over an `M x N` similarity matrix holds:
//!
//! * one prior factor per cell,
//! * per query column, a loop and an exclusion factor for every database
//!   pair `(i, k)` (when intra-database similarities are given),
//! * per database row, the same for every query pair `(j, l)`,
//! * one sequence factor per cell (when a sequence config is given).
//!
//! Factor coefficients fold the family weight, the pairwise intra-set
//! weight, and the family normalizer (`M*N` for cell families, pair counts
//! times the opposite side for binary families), so the sum of squared
//! residuals over all factors is the global error.
//!
//! The factor list is *virtual*: binary factors are fully determined by the
//! intra-set matrices, so [`FactorGraph::for_each_factor`] enumerates them
//! on demand in a fixed documented order (priors row-major, then database
//! pairs column-by-column, then query pairs row-by-row, then sequence cells
//! row-major; within a pair, loop before exclusion). Nothing quadratic in
//! the pair counts is ever stored, which is what makes full 500 x 500
//! patches tractable.

use ndarray::{s, Array2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec;
use crate::factors::{Factor, FactorKind, FactorPayload, SequenceNeighborhood};
use crate::solver::evaluator::StructuredEval;
use crate::solver::{solve, SolveReport};
use crate::types::{
    ExclusionVariant, FactorWeights, IntraSetSimilarities, ProblemSpec, SequenceConfig,
    SimilarityMatrix,
};

/// Per-family normalizers (denominators of the global-error terms).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Normalizers {
    /// Cells, `M * N`; shared by the prior and sequence families.
    pub cells: f64,
    /// `N * C(M, 2)`; zero when `M < 2`.
    pub db_pairs: f64,
    /// `M * C(N, 2)`; zero when `N < 2`.
    pub q_pairs: f64,
}

fn pairs(n: usize) -> u64 {
    (n as u64) * (n as u64 - 1) / 2
}

/// The assembled problem: inputs, weights, and enumeration logic.
#[derive(Clone, Debug)]
pub struct FactorGraph {
    s_hat: Array2<f64>,
    intra_db: Option<IntraSetSimilarities>,
    intra_q: Option<IntraSetSimilarities>,
    seq: Option<SequenceConfig>,
    weights: FactorWeights,
    variant: ExclusionVariant,
    threshold: f64,
    normalizers: Normalizers,
}

/// Builds a factor graph for `s_hat` refined by the given intra-set inputs.
///
/// Fails with [`Error::SizeMismatch`] when an intra-set matrix does not
/// match the corresponding side of `s_hat`, and with
/// [`Error::ProblemTooLarge`] when both intra-set inputs are present and
/// the factor count exceeds `spec.factor_cap`; such problems must go
/// through [`optimize_patched`] with a smaller `patch_max` instead.
pub fn build_graph(
    s_hat: &SimilarityMatrix,
    intra_db: Option<&IntraSetSimilarities>,
    intra_q: Option<&IntraSetSimilarities>,
    spec: &ProblemSpec,
) -> Result<FactorGraph> {
    spec.validate()?;
    let (m, n) = (s_hat.rows(), s_hat.cols());
    if let Some(db) = intra_db {
        if db.len() != m {
            return Err(Error::SizeMismatch {
                context: format!(
                    "intra-database matrix is {0}x{0}, similarity matrix has {m} rows",
                    db.len()
                ),
            });
        }
    }
    if let Some(q) = intra_q {
        if q.len() != n {
            return Err(Error::SizeMismatch {
                context: format!(
                    "intra-query matrix is {0}x{0}, similarity matrix has {n} columns",
                    q.len()
                ),
            });
        }
    }
    let graph = FactorGraph {
        s_hat: s_hat.values().clone(),
        intra_db: intra_db.cloned(),
        intra_q: intra_q.cloned(),
        seq: if spec.weights.seq > 0.0 { spec.seq.clone() } else { None },
        weights: spec.weights,
        variant: spec.exclusion_variant,
        threshold: spec.factor_threshold,
        normalizers: Normalizers {
            cells: (m * n) as f64,
            db_pairs: (pairs(m) * n as u64) as f64,
            q_pairs: (pairs(n) * m as u64) as f64,
        },
    };
    if intra_db.is_some() && intra_q.is_some() {
        let count = graph.factor_count();
        if count > spec.factor_cap {
            return Err(Error::ProblemTooLarge { factors: count, cap: spec.factor_cap });
        }
    }
    Ok(graph)
}

impl FactorGraph {
    pub fn rows(&self) -> usize {
        self.s_hat.nrows()
    }

    pub fn cols(&self) -> usize {
        self.s_hat.ncols()
    }

    pub fn num_variables(&self) -> usize {
        self.s_hat.len()
    }

    /// Prior targets; also the initial variable values.
    pub fn initial_values(&self) -> &Array2<f64> {
        &self.s_hat
    }

    pub fn intra_db(&self) -> Option<&IntraSetSimilarities> {
        self.intra_db.as_ref()
    }

    pub fn intra_q(&self) -> Option<&IntraSetSimilarities> {
        self.intra_q.as_ref()
    }

    pub fn seq(&self) -> Option<&SequenceConfig> {
        self.seq.as_ref()
    }

    pub fn weights(&self) -> &FactorWeights {
        &self.weights
    }

    pub fn variant(&self) -> ExclusionVariant {
        self.variant
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn normalizers(&self) -> Normalizers {
        self.normalizers
    }

    fn db_family_on(&self) -> bool {
        self.intra_db.is_some() && self.rows() >= 2
    }

    fn q_family_on(&self) -> bool {
        self.intra_q.is_some() && self.cols() >= 2
    }

    fn seq_family_on(&self) -> bool {
        self.seq.is_some() && self.weights.seq > 0.0
    }

    /// True when a loop factor over intra similarity `s` is kept: the
    /// family is enabled, the folded coefficient is nonzero, and `s`
    /// clears the sparsification threshold.
    fn loop_kept(&self, weight: f64, s: f64) -> bool {
        weight > 0.0 && s > 0.0 && s >= self.threshold
    }

    /// Exclusion counterpart of [`FactorGraph::loop_kept`], keyed on the
    /// complement `1 - s`.
    fn exclusion_kept(&self, weight: f64, s: f64) -> bool {
        weight > 0.0 && s < 1.0 && 1.0 - s >= self.threshold
    }

    /// Number of factors the enumeration yields, honoring the threshold.
    pub fn factor_count(&self) -> u64 {
        let (m, n) = (self.rows(), self.cols());
        let mut count = (m * n) as u64;
        if self.db_family_on() {
            let w = self.intra_db.as_ref().unwrap().values();
            let (mut loops, mut excls) = (0u64, 0u64);
            for i in 0..m {
                for k in (i + 1)..m {
                    let s = w[(i, k)];
                    if self.loop_kept(self.weights.db_loop, s) {
                        loops += 1;
                    }
                    if self.exclusion_kept(self.weights.db_exclusion, s) {
                        excls += 1;
                    }
                }
            }
            count += (loops + excls) * n as u64;
        }
        if self.q_family_on() {
            let w = self.intra_q.as_ref().unwrap().values();
            let (mut loops, mut excls) = (0u64, 0u64);
            for j in 0..n {
                for l in (j + 1)..n {
                    let s = w[(j, l)];
                    if self.loop_kept(self.weights.q_loop, s) {
                        loops += 1;
                    }
                    if self.exclusion_kept(self.weights.q_exclusion, s) {
                        excls += 1;
                    }
                }
            }
            count += (loops + excls) * m as u64;
        }
        if self.seq_family_on() {
            count += (m * n) as u64;
        }
        count
    }

    /// Enumerates every factor in the canonical order. The same order
    /// backs `factors`, residual vectors, and Jacobian rows.
    pub fn for_each_factor<F: FnMut(Factor)>(&self, mut f: F) {
        let (m, n) = (self.rows(), self.cols());
        let c_prior = 1.0 / self.normalizers.cells;
        for i in 0..m {
            for j in 0..n {
                f(Factor {
                    kind: FactorKind::Prior,
                    variables: vec![(i * n + j) as u32],
                    coefficient: c_prior,
                    payload: FactorPayload::Prior { target: self.s_hat[(i, j)] },
                    variant: self.variant,
                });
            }
        }
        if self.db_family_on() {
            let w = self.intra_db.as_ref().unwrap().values();
            let norm = self.normalizers.db_pairs;
            for j in 0..n {
                for i in 0..m {
                    for k in (i + 1)..m {
                        let s = w[(i, k)];
                        let vars = vec![(i * n + j) as u32, (k * n + j) as u32];
                        if self.loop_kept(self.weights.db_loop, s) {
                            f(Factor {
                                kind: FactorKind::DbLoop,
                                variables: vars.clone(),
                                coefficient: self.weights.db_loop * s / norm,
                                payload: FactorPayload::Pair,
                                variant: self.variant,
                            });
                        }
                        if self.exclusion_kept(self.weights.db_exclusion, s) {
                            f(Factor {
                                kind: FactorKind::DbExclusion,
                                variables: vars,
                                coefficient: self.weights.db_exclusion * (1.0 - s) / norm,
                                payload: FactorPayload::Pair,
                                variant: self.variant,
                            });
                        }
                    }
                }
            }
        }
        if self.q_family_on() {
            let w = self.intra_q.as_ref().unwrap().values();
            let norm = self.normalizers.q_pairs;
            for i in 0..m {
                for j in 0..n {
                    for l in (j + 1)..n {
                        let s = w[(j, l)];
                        let vars = vec![(i * n + j) as u32, (i * n + l) as u32];
                        if self.loop_kept(self.weights.q_loop, s) {
                            f(Factor {
                                kind: FactorKind::QLoop,
                                variables: vars.clone(),
                                coefficient: self.weights.q_loop * s / norm,
                                payload: FactorPayload::Pair,
                                variant: self.variant,
                            });
                        }
                        if self.exclusion_kept(self.weights.q_exclusion, s) {
                            f(Factor {
                                kind: FactorKind::QExclusion,
                                variables: vars,
                                coefficient: self.weights.q_exclusion * (1.0 - s) / norm,
                                payload: FactorPayload::Pair,
                                variant: self.variant,
                            });
                        }
                    }
                }
            }
        }
        if self.seq_family_on() {
            let cfg = self.seq.as_ref().unwrap();
            let c_seq = self.weights.seq / self.normalizers.cells;
            for i in 0..m {
                for j in 0..n {
                    let nbhd = SequenceNeighborhood::build(i, j, m, n, cfg)
                        .expect("anchor is inside the matrix by construction");
                    let variables = nbhd
                        .connected_cells(n)
                        .iter()
                        .map(|&(k, l)| (k * n + l) as u32)
                        .collect();
                    f(Factor {
                        kind: FactorKind::Sequence,
                        variables,
                        coefficient: c_seq,
                        payload: FactorPayload::Sequence(nbhd),
                        variant: self.variant,
                    });
                }
            }
        }
    }

    /// Materializes the factor list. Intended for inspection and tests;
    /// prefer [`FactorGraph::for_each_factor`] on large graphs.
    pub fn factors(&self) -> Vec<Factor> {
        let mut out = Vec::new();
        self.for_each_factor(|f| out.push(f));
        out
    }

    /// The global error at `values`: the weighted, normalized sum of all
    /// family costs. Equals the squared norm of the residual vector.
    pub fn global_error(&self, values: &Array2<f64>) -> Result<f64> {
        self.check_shape(values)?;
        Ok(StructuredEval::new(self).error(values))
    }

    pub(crate) fn check_shape(&self, values: &Array2<f64>) -> Result<()> {
        if values.dim() != self.s_hat.dim() {
            return Err(Error::SizeMismatch {
                context: format!(
                    "values are {}x{}, graph is {}x{}",
                    values.nrows(),
                    values.ncols(),
                    self.rows(),
                    self.cols()
                ),
            });
        }
        Ok(())
    }
}

/// Row and column bands of a patch tiling.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPlan {
    pub row_bands: Vec<std::ops::Range<usize>>,
    pub col_bands: Vec<std::ops::Range<usize>>,
}

impl PatchPlan {
    /// Patches in row-major band order.
    pub fn patches(&self) -> Vec<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        let mut out = Vec::with_capacity(self.row_bands.len() * self.col_bands.len());
        for r in &self.row_bands {
            for c in &self.col_bands {
                out.push((r.clone(), c.clone()));
            }
        }
        out
    }
}

fn split_bands(n: usize, max: usize) -> Vec<std::ops::Range<usize>> {
    let k = n.div_ceil(max);
    let base = n / k;
    let extra = n % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for band in 0..k {
        let len = base + usize::from(band < extra);
        out.push(start..start + len);
        start += len;
    }
    debug_assert_eq!(start, n);
    out
}

/// Tiles an `rows x cols` matrix into near-equal bands no larger than
/// `patch_max` on either side. Band sizes along one axis differ by at most
/// one.
pub fn partition_patches(rows: usize, cols: usize, patch_max: usize) -> Result<PatchPlan> {
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyMatrix);
    }
    if patch_max == 0 {
        return Err(Error::InvalidParams { reason: "patch_max must be >= 1".into() });
    }
    Ok(PatchPlan { row_bands: split_bands(rows, patch_max), col_bands: split_bands(cols, patch_max) })
}

/// One patch's solve in a [`RefineReport`].
#[derive(Clone, Debug, Serialize)]
pub struct PatchSolve {
    pub row_start: usize,
    pub row_end: usize,
    pub col_start: usize,
    pub col_end: usize,
    pub factor_count: u64,
    pub report: SolveReport,
}

/// Outcome of [`optimize_patched`]: tiling shape and per-patch reports.
#[derive(Clone, Debug, Serialize)]
pub struct RefineReport {
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub factor_count: u64,
    pub iterations: usize,
    pub initial_error: f64,
    pub final_error: f64,
    pub patches: Vec<PatchSolve>,
}

/// Refines `s_hat` under `spec`.
///
/// When intra-query similarities are present the matrix is tiled by
/// `spec.patch_max` and every patch is solved as an independent problem
/// (intra-set matrices restricted to the patch ranges, sequence segments
/// truncated at patch borders); the refined blocks are then copied back.
/// Without intra-query input the whole matrix is solved at once.
pub fn optimize_patched(
    s_hat: &SimilarityMatrix,
    intra_db: Option<&IntraSetSimilarities>,
    intra_q: Option<&IntraSetSimilarities>,
    spec: &ProblemSpec,
) -> Result<(SimilarityMatrix, RefineReport)> {
    let (m, n) = (s_hat.rows(), s_hat.cols());
    let plan = if intra_q.is_some() {
        partition_patches(m, n, spec.patch_max)?
    } else {
        PatchPlan { row_bands: vec![0..m], col_bands: vec![0..n] }
    };
    let patches = plan.patches();

    let solved: Vec<Result<(Array2<f64>, PatchSolve)>> =
        exec::map_indexed(patches.len(), |p| {
            let (rb, cb) = &patches[p];
            let block = s_hat.values().slice(s![rb.clone(), cb.clone()]).to_owned();
            let sub_hat = SimilarityMatrix::from_array(block)?;
            let sub_db = intra_db.map(|d| d.restrict(rb.clone()));
            let sub_q = intra_q.map(|q| q.restrict(cb.clone()));
            let graph = build_graph(&sub_hat, sub_db.as_ref(), sub_q.as_ref(), spec)?;
            let factor_count = graph.factor_count();
            let (values, report) = solve(&graph, &spec.solver)?;
            Ok((
                values.into_values(),
                PatchSolve {
                    row_start: rb.start,
                    row_end: rb.end,
                    col_start: cb.start,
                    col_end: cb.end,
                    factor_count,
                    report,
                },
            ))
        });

    let mut out = Array2::zeros((m, n));
    let mut reports = Vec::with_capacity(solved.len());
    for result in solved {
        let (block, patch) = result?;
        out.slice_mut(s![patch.row_start..patch.row_end, patch.col_start..patch.col_end])
            .assign(&block);
        reports.push(patch);
    }
    let report = RefineReport {
        patch_rows: plan.row_bands.len(),
        patch_cols: plan.col_bands.len(),
        factor_count: reports.iter().map(|p| p.factor_count).sum(),
        iterations: reports.iter().map(|p| p.report.iterations).sum(),
        initial_error: exec::kahan_sum(
            &reports.iter().map(|p| p.report.initial_error).collect::<Vec<_>>(),
        ),
        final_error: exec::kahan_sum(
            &reports.iter().map(|p| p.report.final_error).collect::<Vec<_>>(),
        ),
        patches: reports,
    };
    Ok((SimilarityMatrix::from_array(out)?, report))
}
