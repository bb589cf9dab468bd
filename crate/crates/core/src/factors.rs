//! Factor primitives: cost terms, variant derivatives, and sequence
//! segment geometry.
//!
//! Every factor cost is expressed as a squared residual
//! `cost = coefficient * base^2`, where `base` depends on the factor kind:
//!
//! * prior: `s - s_hat`,
//! * loop: `s_a - s_b` (coefficient carries the intra-set similarity),
//! * exclusion: variant term below (coefficient carries the complement),
//! * sequence: `s_anchor - best segment mean`.
//!
//! A sequence segment for velocity `v` through anchor `(i, j)` visits, for
//! each query offset `d` in `[-(L-1)/2, (L-1)/2]`, the cell
//! `(i + round(v * d), j + d)` with round-half-away-from-zero; cells outside
//! the matrix are dropped, so border segments are shorter and their mean is
//! taken over the cells that remain.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::{ExclusionVariant, SequenceConfig};

/// Two segment means closer than this are treated as tied, and the tie is
/// broken toward the velocity nearest 1.0 (then the smaller one). Truncated
/// segments of different lengths over a uniform matrix can differ by an ulp,
/// which must not defeat the documented tie-break.
pub const MEAN_TIE_TOL: f64 = 1e-12;

pub fn prior_cost(s: f64, s_hat: f64) -> f64 {
    let d = s - s_hat;
    d * d
}

/// `intra * (s_a - s_b)^2`.
pub fn loop_cost(s_a: f64, s_b: f64, intra: f64) -> f64 {
    let d = s_a - s_b;
    intra * d * d
}

/// The variant-specific residual base of an exclusion factor.
pub fn exclusion_base(s_a: f64, s_b: f64, variant: ExclusionVariant) -> f64 {
    match variant {
        ExclusionVariant::Product => s_a * s_b,
        ExclusionVariant::Min => s_a.min(s_b),
        ExclusionVariant::SoftAnd => (s_a + s_b - 1.0).max(0.0),
    }
}

/// Partial derivatives of [`exclusion_base`] with respect to `(s_a, s_b)`.
/// Min ties go to `s_a`; SoftAnd uses subgradient 0 at its kink.
pub fn exclusion_base_grad(s_a: f64, s_b: f64, variant: ExclusionVariant) -> (f64, f64) {
    match variant {
        ExclusionVariant::Product => (s_b, s_a),
        ExclusionVariant::Min => {
            if s_a <= s_b {
                (1.0, 0.0)
            } else {
                (0.0, 1.0)
            }
        }
        ExclusionVariant::SoftAnd => {
            if s_a + s_b - 1.0 > 0.0 {
                (1.0, 1.0)
            } else {
                (0.0, 0.0)
            }
        }
    }
}

/// `(1 - intra) * base^2`.
pub fn exclusion_cost(s_a: f64, s_b: f64, intra: f64, variant: ExclusionVariant) -> f64 {
    let base = exclusion_base(s_a, s_b, variant);
    (1.0 - intra) * base * base
}

/// Round half away from zero, the rule fixed for segment geometry.
#[inline]
fn round_half_away(x: f64) -> i64 {
    x.round() as i64
}

/// Cells of the constant-velocity segment through `(i, j)`, ordered by
/// query index ascending. The anchor is always present.
pub fn seq_neighbors(
    i: usize,
    j: usize,
    rows: usize,
    cols: usize,
    length: usize,
    velocity: f64,
) -> Result<Vec<(usize, usize)>> {
    if i >= rows || j >= cols {
        return Err(Error::IndexOutOfRange { row: i, col: j, rows, cols });
    }
    let half = (length - 1) / 2;
    let mut cells = Vec::with_capacity(length);
    for d in -(half as i64)..=(half as i64) {
        let l = j as i64 + d;
        if l < 0 || l >= cols as i64 {
            continue;
        }
        let k = i as i64 + round_half_away(velocity * d as f64);
        if k < 0 || k >= rows as i64 {
            continue;
        }
        cells.push((k as usize, l as usize));
    }
    debug_assert!(cells.contains(&(i, j)));
    Ok(cells)
}

/// Per-velocity segment cell lists for one anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceNeighborhood {
    pub anchor: (usize, usize),
    pub velocities: Vec<f64>,
    /// `cells[v]` lists the segment of `velocities[v]`, query-ascending.
    pub cells: Vec<Vec<(usize, usize)>>,
}

impl SequenceNeighborhood {
    pub fn build(
        i: usize,
        j: usize,
        rows: usize,
        cols: usize,
        cfg: &SequenceConfig,
    ) -> Result<Self> {
        let mut cells = Vec::with_capacity(cfg.velocities.len());
        for &v in &cfg.velocities {
            cells.push(seq_neighbors(i, j, rows, cols, cfg.length, v)?);
        }
        Ok(Self { anchor: (i, j), velocities: cfg.velocities.clone(), cells })
    }

    /// Number of in-bounds cells for velocity index `vi`.
    pub fn effective_length(&self, vi: usize) -> usize {
        self.cells[vi].len()
    }

    /// Deduplicated union of all per-velocity cells, flat-index ascending.
    pub fn connected_cells(&self, cols: usize) -> Vec<(usize, usize)> {
        let mut all: Vec<(usize, usize)> = self.cells.iter().flatten().copied().collect();
        all.sort_by_key(|&(k, l)| k * cols + l);
        all.dedup();
        all
    }
}

/// Mean of `values` over `cells`, summed in list order. Plain summation is
/// deliberate: the vectorized evaluator accumulates segments in the same
/// order, and the two must agree bitwise.
pub fn segment_mean(values: &Array2<f64>, cells: &[(usize, usize)]) -> f64 {
    let mut sum = 0.0;
    for &(k, l) in cells {
        sum += values[(k, l)];
    }
    sum / cells.len() as f64
}

/// Winner of the per-velocity mean comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BestVelocity {
    pub index: usize,
    pub velocity: f64,
    pub mean: f64,
}

/// True when `(cand_mean, cand_v)` beats `(best_mean, best_v)` under the
/// max-mean rule with ties broken toward 1.0, then downward.
#[inline]
pub(crate) fn better_velocity(cand_mean: f64, cand_v: f64, best_mean: f64, best_v: f64) -> bool {
    if cand_mean > best_mean + MEAN_TIE_TOL {
        return true;
    }
    if cand_mean < best_mean - MEAN_TIE_TOL {
        return false;
    }
    let cand_key = ((cand_v - 1.0).abs(), cand_v);
    let best_key = ((best_v - 1.0).abs(), best_v);
    cand_key < best_key
}

/// Velocity whose segment has the maximum mean similarity.
pub fn best_velocity(values: &Array2<f64>, nbhd: &SequenceNeighborhood) -> BestVelocity {
    let mut best = BestVelocity {
        index: 0,
        velocity: nbhd.velocities[0],
        mean: segment_mean(values, &nbhd.cells[0]),
    };
    for vi in 1..nbhd.velocities.len() {
        let mean = segment_mean(values, &nbhd.cells[vi]);
        let v = nbhd.velocities[vi];
        if better_velocity(mean, v, best.mean, best.velocity) {
            best = BestVelocity { index: vi, velocity: v, mean };
        }
    }
    best
}

/// `(s_anchor - best segment mean)^2`, the unweighted sequence cost.
pub fn seq_cost(values: &Array2<f64>, nbhd: &SequenceNeighborhood) -> f64 {
    let best = best_velocity(values, nbhd);
    let d = values[nbhd.anchor] - best.mean;
    d * d
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    Prior,
    DbLoop,
    DbExclusion,
    QLoop,
    QExclusion,
    Sequence,
}

/// Kind-specific data a factor carries beyond its variables.
#[derive(Clone, Debug, PartialEq)]
pub enum FactorPayload {
    Prior { target: f64 },
    Pair,
    Sequence(SequenceNeighborhood),
}

/// One term of the objective. `coefficient` folds the family weight, the
/// per-pair intra-set weight, and the family normalizer, so the factor's
/// squared residual is exactly its contribution to the global error.
#[derive(Clone, Debug, PartialEq)]
pub struct Factor {
    pub kind: FactorKind,
    /// Flat row-major variable indices (`i * cols + j`), ascending for
    /// pair factors.
    pub variables: Vec<u32>,
    pub coefficient: f64,
    pub payload: FactorPayload,
    /// Exclusion variant; ignored by other kinds.
    pub variant: ExclusionVariant,
}

impl Factor {
    /// Signed residual at `x` (flat row-major values, `cols` per row).
    pub fn residual(&self, x: &[f64], cols: usize) -> f64 {
        let base = match (&self.payload, self.kind) {
            (FactorPayload::Prior { target }, _) => x[self.variables[0] as usize] - target,
            (FactorPayload::Pair, FactorKind::DbLoop | FactorKind::QLoop) => {
                x[self.variables[0] as usize] - x[self.variables[1] as usize]
            }
            (FactorPayload::Pair, _) => exclusion_base(
                x[self.variables[0] as usize],
                x[self.variables[1] as usize],
                self.variant,
            ),
            (FactorPayload::Sequence(nbhd), _) => {
                let (mean, _) = best_mean_flat(x, cols, nbhd);
                x[flat(nbhd.anchor, cols)] - mean
            }
        };
        self.coefficient.sqrt() * base
    }

    /// Sparse Jacobian row at `x`: `(variable, d residual / d variable)`
    /// pairs, variable-ascending. Sequence factors differentiate the active
    /// velocity branch only.
    pub fn jacobian_row(&self, x: &[f64], cols: usize) -> Vec<(u32, f64)> {
        let c = self.coefficient.sqrt();
        match (&self.payload, self.kind) {
            (FactorPayload::Prior { .. }, _) => vec![(self.variables[0], c)],
            (FactorPayload::Pair, FactorKind::DbLoop | FactorKind::QLoop) => {
                vec![(self.variables[0], c), (self.variables[1], -c)]
            }
            (FactorPayload::Pair, _) => {
                let (da, db) = exclusion_base_grad(
                    x[self.variables[0] as usize],
                    x[self.variables[1] as usize],
                    self.variant,
                );
                vec![(self.variables[0], c * da), (self.variables[1], c * db)]
            }
            (FactorPayload::Sequence(nbhd), _) => {
                let (_, vi) = best_mean_flat(x, cols, nbhd);
                let cells = &nbhd.cells[vi];
                let inv_len = 1.0 / cells.len() as f64;
                let anchor = flat(nbhd.anchor, cols) as u32;
                let mut row: Vec<(u32, f64)> = Vec::with_capacity(cells.len() + 1);
                for &(k, l) in cells {
                    row.push(((k * cols + l) as u32, -c * inv_len));
                }
                match row.binary_search_by_key(&anchor, |e| e.0) {
                    Ok(pos) => row[pos].1 += c,
                    Err(pos) => row.insert(pos, (anchor, c)),
                }
                row
            }
        }
    }

    /// The factor's contribution to the global error at `x`.
    pub fn cost(&self, x: &[f64], cols: usize) -> f64 {
        let r = self.residual(x, cols);
        r * r
    }
}

#[inline]
fn flat((i, j): (usize, usize), cols: usize) -> usize {
    i * cols + j
}

/// Best segment mean over a flat value slice; returns `(mean, velocity
/// index)`. Accumulation order matches [`segment_mean`].
fn best_mean_flat(x: &[f64], cols: usize, nbhd: &SequenceNeighborhood) -> (f64, usize) {
    let mut best_mean = f64::NEG_INFINITY;
    let mut best_vi = 0;
    let mut best_v = f64::NAN;
    for (vi, cells) in nbhd.cells.iter().enumerate() {
        let mut sum = 0.0;
        for &(k, l) in cells {
            sum += x[k * cols + l];
        }
        let mean = sum / cells.len() as f64;
        let v = nbhd.velocities[vi];
        if vi == 0 || better_velocity(mean, v, best_mean, best_v) {
            best_mean = mean;
            best_vi = vi;
            best_v = v;
        }
    }
    (best_mean, best_vi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ExclusionVariant::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    // Independent re-derivation of the segment rule for oracle checks:
    // different rounding formula, no shared code with seq_neighbors.
    fn oracle_segment(
        i: i64,
        j: i64,
        rows: i64,
        cols: i64,
        length: i64,
        v: f64,
    ) -> Vec<(usize, usize)> {
        let half = (length - 1) / 2;
        let mut out = Vec::new();
        for l in (j - half)..=(j + half) {
            let d = (l - j) as f64 * v;
            let rounded = if d >= 0.0 { (d + 0.5).floor() } else { (d - 0.5).ceil() };
            let k = i + rounded as i64;
            if l >= 0 && l < cols && k >= 0 && k < rows {
                out.push((k as usize, l as usize));
            }
        }
        out
    }

    #[test]
    fn test_seq_neighbors_frozen_examples() {
        assert_eq!(
            seq_neighbors(5, 5, 10, 10, 5, 1.0).unwrap(),
            vec![(3, 3), (4, 4), (5, 5), (6, 6), (7, 7)]
        );
        assert_eq!(
            seq_neighbors(0, 0, 10, 10, 5, 1.0).unwrap(),
            vec![(0, 0), (1, 1), (2, 2)]
        );
        assert_eq!(
            seq_neighbors(5, 5, 10, 10, 5, 2.0).unwrap(),
            vec![(1, 3), (3, 4), (5, 5), (7, 6), (9, 7)]
        );
        assert!(matches!(
            seq_neighbors(10, 0, 10, 10, 5, 1.0),
            Err(crate::Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn test_exclusion_cost_frozen_examples() {
        assert_eq!(exclusion_cost(0.8, 0.5, 0.2, Product), 0.8 * 0.4 * 0.4);
        assert!((exclusion_cost(0.8, 0.5, 0.2, Product) - 0.128).abs() < 1e-15);
        assert!((exclusion_cost(0.8, 0.5, 0.0, SoftAnd) - 0.09).abs() < 1e-15);
        assert_eq!(exclusion_cost(0.8, 0.5, 0.2, Min), 0.8 * 0.25);
        // Fully similar pair: exclusion vanishes regardless of values.
        assert_eq!(exclusion_cost(0.9, 0.9, 1.0, Product), 0.0);
    }

    #[test]
    fn test_best_velocity_identity_diagonal() {
        // Identity-like matrix: the slope-1 segment hits the unit diagonal,
        // other velocities leave it, so v* = 1.0 wins on the mean.
        let mut m = Array2::zeros((11, 11));
        for d in 0..11 {
            m[(d, d)] = 1.0;
        }
        let cfg = SequenceConfig::new(5, vec![0.5, 1.0, 2.0]).unwrap();
        let nbhd = SequenceNeighborhood::build(5, 5, 11, 11, &cfg).unwrap();
        let best = best_velocity(&m, &nbhd);
        assert_eq!(best.velocity, 1.0);
        assert_eq!(best.mean, 1.0);
    }

    #[test]
    fn test_best_velocity_slope_two_line() {
        // High values along k = 2*l: slope 2 collects them, slope 1 does not.
        let mut m = Array2::zeros((21, 11));
        for l in 0..11 {
            m[(2 * l, l)] = 0.9;
        }
        let cfg = SequenceConfig::new(5, vec![0.5, 1.0, 2.0]).unwrap();
        let nbhd = SequenceNeighborhood::build(10, 5, 21, 11, &cfg).unwrap();
        let best = best_velocity(&m, &nbhd);
        assert_eq!(best.velocity, 2.0);
        assert!((best.mean - 0.9).abs() < 1e-15);
    }

    #[test]
    fn test_best_velocity_uniform_ties_break_toward_one() {
        let m = Array2::from_elem((9, 9), 0.4);
        let cfg = SequenceConfig::default();
        // Border anchor: segments truncate to different lengths, means may
        // differ by an ulp; the tolerance keeps the tie-break in charge.
        for &anchor in &[(0usize, 0usize), (4, 4), (8, 1), (2, 8)] {
            let nbhd = SequenceNeighborhood::build(anchor.0, anchor.1, 9, 9, &cfg).unwrap();
            let best = best_velocity(&m, &nbhd);
            assert_eq!(best.velocity, 1.0, "anchor {anchor:?}");
            assert!((best.mean - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn test_seq_cost_frozen_example() {
        // Segment values {1, 1, 0, 1, 0} (anchor holds 0) along slope 1;
        // other velocities collect less, so the best mean is 3/5 and the
        // cost is (0 - 0.6)^2 = 0.36.
        let mut m = Array2::zeros((12, 12));
        m[(4, 4)] = 1.0;
        m[(5, 5)] = 1.0;
        m[(7, 7)] = 1.0;
        let cfg = SequenceConfig::new(5, vec![0.5, 1.0, 2.0]).unwrap();
        let nbhd = SequenceNeighborhood::build(6, 6, 12, 12, &cfg).unwrap();
        let best = best_velocity(&m, &nbhd);
        assert_eq!(best.velocity, 1.0);
        assert!((best.mean - 0.6).abs() < 1e-15);
        assert!((seq_cost(&m, &nbhd) - 0.36).abs() < 1e-15);
    }

    #[test]
    fn test_sequence_jacobian_row_merges_anchor() {
        let m = Array2::from_elem((7, 7), 0.5);
        let cfg = SequenceConfig::new(5, vec![1.0]).unwrap();
        let nbhd = SequenceNeighborhood::build(3, 3, 7, 7, &cfg).unwrap();
        let f = Factor {
            kind: FactorKind::Sequence,
            variables: nbhd.connected_cells(7).iter().map(|&(k, l)| (k * 7 + l) as u32).collect(),
            coefficient: 4.0,
            payload: FactorPayload::Sequence(nbhd),
            variant: Product,
        };
        let x: Vec<f64> = m.iter().copied().collect();
        let row = f.jacobian_row(&x, 7);
        assert_eq!(row.len(), 5);
        let anchor_entry = row.iter().find(|e| e.0 == 3 * 7 + 3).unwrap();
        // sqrt(4) * (1 - 1/5) = 1.6 on the anchor, -2/5 elsewhere.
        assert!((anchor_entry.1 - 1.6).abs() < 1e-15);
        for (var, d) in &row {
            if *var != 3 * 7 + 3 {
                assert!((d + 0.4).abs() < 1e-15);
            }
        }
    }

    proptest! {
        #[test]
        fn prop_costs_nonnegative(
            a in 0.0..=1.0f64,
            b in 0.0..=1.0f64,
            intra in 0.0..=1.0f64,
            variant in prop_oneof![Just(Product), Just(Min), Just(SoftAnd)],
        ) {
            prop_assert!(prior_cost(a, b) >= 0.0);
            prop_assert!(loop_cost(a, b, intra) >= 0.0);
            prop_assert!(exclusion_cost(a, b, intra, variant) >= 0.0);
        }

        #[test]
        fn prop_pair_costs_symmetric(
            a in 0.0..=1.0f64,
            b in 0.0..=1.0f64,
            intra in 0.0..=1.0f64,
            variant in prop_oneof![Just(Product), Just(Min), Just(SoftAnd)],
        ) {
            prop_assert_eq!(loop_cost(a, b, intra), loop_cost(b, a, intra));
            prop_assert_eq!(
                exclusion_cost(a, b, intra, variant),
                exclusion_cost(b, a, intra, variant)
            );
        }

        #[test]
        fn prop_seq_neighbors_matches_oracle(
            rows in 1usize..30,
            cols in 1usize..30,
            anchor_seed in 0usize..900,
            half in 1usize..6,
            v in prop_oneof![Just(0.4f64), Just(0.6), Just(1.0), Just(1.25), Just(2.0), Just(3.5)],
        ) {
            let i = anchor_seed % rows;
            let j = (anchor_seed / 30) % cols;
            let length = 2 * half + 1;
            let got = seq_neighbors(i, j, rows, cols, length, v).unwrap();
            let expect = oracle_segment(
                i as i64, j as i64, rows as i64, cols as i64, length as i64, v,
            );
            prop_assert_eq!(&got, &expect);
            prop_assert!(got.contains(&(i, j)));
            prop_assert!(got.len() <= length);
            prop_assert!(got.windows(2).all(|w| w[0].1 < w[1].1));
        }

        #[test]
        fn prop_uniform_matrix_is_seq_fixed_point(
            rows in 1usize..20,
            cols in 1usize..20,
            anchor_seed in 0usize..400,
            value in 0.0..=1.0f64,
        ) {
            let i = anchor_seed % rows;
            let j = (anchor_seed / 20) % cols;
            let m = Array2::from_elem((rows, cols), value);
            let cfg = SequenceConfig::default();
            let nbhd = SequenceNeighborhood::build(i, j, rows, cols, &cfg).unwrap();
            // Means of a uniform segment equal the value up to round-off, so
            // the cost is zero to round-off squared.
            prop_assert!(seq_cost(&m, &nbhd) < 1e-24);
        }
    }
}
