//! Input types: similarity matrices, intra-set similarities, and the
//! problem configuration.
//!
//! All similarity values live in `[0, 1]`. Constructors accept values that
//! overshoot the bounds by at most [`CLAMP_SLACK`] (floating-point dirt from
//! upstream cosine math) and clamp them; anything farther out is rejected,
//! since it signals a wrong input file rather than round-off.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::SolverSettings;

/// Values may exceed [0, 1] by this much and are silently clamped.
pub const CLAMP_SLACK: f64 = 1e-9;

/// Default cap on the combinatorial factor count of an unpatched graph.
pub const DEFAULT_FACTOR_CAP: u64 = 50_000_000;

fn clamp_unit(v: f64) -> Option<f64> {
    if !v.is_finite() || v < -CLAMP_SLACK || v > 1.0 + CLAMP_SLACK {
        None
    } else {
        Some(v.clamp(0.0, 1.0))
    }
}

/// Dense `M x N` matrix of database-to-query similarities, row `i` holding
/// database image `i` against every query image.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    values: Array2<f64>,
}

impl SimilarityMatrix {
    /// Validates and clamps a rectangular row-major table.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::EmptyMatrix);
        }
        let cols = rows[0].len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::RaggedRows { row: i, got: row.len(), expected: cols });
            }
        }
        let mut values = Array2::zeros((rows.len(), cols));
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                values[(i, j)] = clamp_unit(v)
                    .ok_or(Error::ValueOutOfRange { index: i * cols + j, value: v })?;
            }
        }
        Ok(Self { values })
    }

    /// Validates and clamps an already-dense array.
    pub fn from_array(mut values: Array2<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyMatrix);
        }
        let cols = values.ncols();
        for ((i, j), v) in values.indexed_iter_mut() {
            *v = clamp_unit(*v)
                .ok_or(Error::ValueOutOfRange { index: i * cols + j, value: *v })?;
        }
        Ok(Self { values })
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }
}

/// Where an intra-set similarity matrix came from. Pose-derived matrices
/// are binary (two images either show the same place or not); descriptor
/// -derived ones are continuous.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntraKind {
    FromPoses,
    FromDescriptors,
}

/// Symmetric similarities within one image set (database or query), unit
/// diagonal. Entry `(a, b)` weights the loop factor between rows/columns
/// `a` and `b`; its complement weights the exclusion factor.
#[derive(Clone, Debug, PartialEq)]
pub struct IntraSetSimilarities {
    values: Array2<f64>,
    kind: IntraKind,
}

impl IntraSetSimilarities {
    pub fn from_matrix(mut values: Array2<f64>, kind: IntraKind) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyMatrix);
        }
        if values.nrows() != values.ncols() {
            return Err(Error::InvalidIntraSet {
                reason: format!("matrix is {}x{}, not square", values.nrows(), values.ncols()),
            });
        }
        let n = values.nrows();
        for i in 0..n {
            for j in 0..n {
                let v = values[(i, j)];
                values[(i, j)] = clamp_unit(v)
                    .ok_or(Error::ValueOutOfRange { index: i * n + j, value: v })?;
            }
        }
        for i in 0..n {
            if (values[(i, i)] - 1.0).abs() > CLAMP_SLACK {
                return Err(Error::InvalidIntraSet {
                    reason: format!("diagonal entry {i} is {}, expected 1", values[(i, i)]),
                });
            }
            values[(i, i)] = 1.0;
            for j in (i + 1)..n {
                if (values[(i, j)] - values[(j, i)]).abs() > CLAMP_SLACK {
                    return Err(Error::InvalidIntraSet {
                        reason: format!(
                            "asymmetry at ({i}, {j}): {} vs {}",
                            values[(i, j)],
                            values[(j, i)]
                        ),
                    });
                }
                values[(j, i)] = values[(i, j)];
            }
        }
        if kind == IntraKind::FromPoses {
            for (idx, v) in values.iter().enumerate() {
                if *v != 0.0 && *v != 1.0 {
                    return Err(Error::InvalidIntraSet {
                        reason: format!("pose-derived entry {idx} is {v}, expected 0 or 1"),
                    });
                }
            }
        }
        Ok(Self { values, kind })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn kind(&self) -> IntraKind {
        self.kind
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Restriction to a contiguous index range, for patch solves.
    pub fn restrict(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            values: self.values.slice(ndarray::s![range.clone(), range]).to_owned(),
            kind: self.kind,
        }
    }
}

/// Family weights of the factor graph. A weight of zero disables the
/// family. Defaults match refining a matrix with pose-derived database
/// similarities and descriptor-derived query similarities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorWeights {
    pub db_loop: f64,
    pub db_exclusion: f64,
    pub q_loop: f64,
    pub q_exclusion: f64,
    pub seq: f64,
}

impl Default for FactorWeights {
    fn default() -> Self {
        Self { db_loop: 4.0, db_exclusion: 40.0, q_loop: 1.0, q_exclusion: 20.0, seq: 10.0 }
    }
}

impl FactorWeights {
    /// Weights tuned for binary pose-derived intra-set similarities.
    pub const POSE_LOOP: f64 = 4.0;
    pub const POSE_EXCLUSION: f64 = 40.0;
    /// Weights tuned for continuous descriptor-derived similarities.
    pub const DESCRIPTOR_LOOP: f64 = 1.0;
    pub const DESCRIPTOR_EXCLUSION: f64 = 20.0;
    pub const SEQ: f64 = 10.0;

    /// Swaps the database-side weights to the descriptor-derived preset.
    pub fn with_descriptor_db(mut self) -> Self {
        self.db_loop = Self::DESCRIPTOR_LOOP;
        self.db_exclusion = Self::DESCRIPTOR_EXCLUSION;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("db_loop", self.db_loop),
            ("db_exclusion", self.db_exclusion),
            ("q_loop", self.q_loop),
            ("q_exclusion", self.q_exclusion),
            ("seq", self.seq),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidParams {
                    reason: format!("weight {name} is {v}, must be finite and >= 0"),
                });
            }
        }
        Ok(())
    }
}

/// Sequence-factor shape: segment length in query frames (odd, so segments
/// center on the anchor) and the candidate database/query velocity ratios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceConfig {
    pub length: usize,
    pub velocities: Vec<f64>,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self { length: 11, velocities: vec![0.6, 0.8, 1.0, 1.25, 1.67] }
    }
}

impl SequenceConfig {
    pub fn new(length: usize, velocities: Vec<f64>) -> Result<Self> {
        let cfg = Self { length, velocities };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.length < 3 || self.length % 2 == 0 {
            return Err(Error::InvalidParams {
                reason: format!("sequence length {} must be odd and >= 3", self.length),
            });
        }
        if self.velocities.is_empty() {
            return Err(Error::InvalidParams { reason: "velocity set is empty".into() });
        }
        for &v in &self.velocities {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidParams {
                    reason: format!("velocity {v} must be finite and > 0"),
                });
            }
        }
        let mut sorted = self.velocities.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted.dedup();
        if sorted != self.velocities {
            return Err(Error::InvalidParams {
                reason: "velocities must be strictly increasing".into(),
            });
        }
        Ok(())
    }

    /// Query-frame half-width of a segment.
    pub fn half_width(&self) -> usize {
        (self.length - 1) / 2
    }
}

/// How an exclusion factor combines two similarities that should not both
/// be high. All variants are scaled by the complement of the intra-set
/// similarity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionVariant {
    /// `(s_a * s_b)^2`: smooth, vanishes when either side is 0.
    #[default]
    Product,
    /// `min(s_a, s_b)^2`: penalizes only the weaker match.
    Min,
    /// `max(s_a + s_b - 1, 0)^2`: fuzzy-logic AND, flat below the kink.
    SoftAnd,
}

/// Full configuration of a refinement problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSpec {
    pub weights: FactorWeights,
    /// Sequence factors are built only when this is present.
    pub seq: Option<SequenceConfig>,
    /// Maximum patch side length; larger inputs are tiled.
    pub patch_max: usize,
    pub exclusion_variant: ExclusionVariant,
    pub solver: SolverSettings,
    /// Binary factors whose multiplicative weight (intra similarity for
    /// loops, its complement for exclusions) falls below this are dropped.
    pub factor_threshold: f64,
    /// Cap on the combinatorial factor count of a single unpatched graph.
    pub factor_cap: u64,
}

impl Default for ProblemSpec {
    fn default() -> Self {
        Self {
            weights: FactorWeights::default(),
            seq: Some(SequenceConfig::default()),
            patch_max: 500,
            exclusion_variant: ExclusionVariant::Product,
            solver: SolverSettings::default(),
            factor_threshold: 0.0,
            factor_cap: DEFAULT_FACTOR_CAP,
        }
    }
}

impl ProblemSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ProblemSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serialization cannot fail")
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if let Some(seq) = &self.seq {
            seq.validate()?;
        }
        if self.patch_max == 0 {
            return Err(Error::InvalidParams { reason: "patch_max must be >= 1".into() });
        }
        if !(0.0..1.0).contains(&self.factor_threshold) {
            return Err(Error::InvalidParams {
                reason: format!(
                    "factor_threshold {} must lie in [0, 1)",
                    self.factor_threshold
                ),
            });
        }
        if self.factor_cap == 0 {
            return Err(Error::InvalidParams { reason: "factor_cap must be >= 1".into() });
        }
        self.solver.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn test_similarity_matrix_clamps_round_off() {
        let m = SimilarityMatrix::from_rows(&[vec![1.0 + 1e-12], vec![-1e-12]]).unwrap();
        assert_eq!(m.values()[(0, 0)], 1.0);
        assert_eq!(m.values()[(1, 0)], 0.0);
    }

    #[test]
    fn test_similarity_matrix_rejects_out_of_range() {
        let err = SimilarityMatrix::from_rows(&[vec![0.3, 1.2]]).unwrap_err();
        match err {
            Error::ValueOutOfRange { index, value } => {
                assert_eq!(index, 1);
                assert_eq!(value, 1.2);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn test_similarity_matrix_rejects_empty_and_ragged() {
        assert!(matches!(SimilarityMatrix::from_rows(&[]), Err(Error::EmptyMatrix)));
        assert!(matches!(
            SimilarityMatrix::from_rows(&[vec![]]),
            Err(Error::EmptyMatrix)
        ));
        assert!(matches!(
            SimilarityMatrix::from_rows(&[vec![0.1, 0.2], vec![0.3]]),
            Err(Error::RaggedRows { row: 1, got: 1, expected: 2 })
        ));
    }

    #[test]
    fn test_similarity_matrix_rejects_nan() {
        let err = SimilarityMatrix::from_rows(&[vec![f64::NAN]]).unwrap_err();
        assert!(matches!(err, Error::ValueOutOfRange { index: 0, .. }));
    }

    #[test]
    fn test_intra_set_validation() {
        let ok = IntraSetSimilarities::from_matrix(
            array![[1.0, 0.25], [0.25, 1.0]],
            IntraKind::FromDescriptors,
        )
        .unwrap();
        assert_eq!(ok.len(), 2);

        let asym = IntraSetSimilarities::from_matrix(
            array![[1.0, 0.25], [0.3, 1.0]],
            IntraKind::FromDescriptors,
        );
        assert!(matches!(asym, Err(Error::InvalidIntraSet { .. })));

        let diag = IntraSetSimilarities::from_matrix(
            array![[0.9, 0.25], [0.25, 1.0]],
            IntraKind::FromDescriptors,
        );
        assert!(matches!(diag, Err(Error::InvalidIntraSet { .. })));

        let not_binary = IntraSetSimilarities::from_matrix(
            array![[1.0, 0.25], [0.25, 1.0]],
            IntraKind::FromPoses,
        );
        assert!(matches!(not_binary, Err(Error::InvalidIntraSet { .. })));

        let binary = IntraSetSimilarities::from_matrix(
            array![[1.0, 0.0], [0.0, 1.0]],
            IntraKind::FromPoses,
        );
        assert!(binary.is_ok());
    }

    #[test]
    fn test_intra_set_symmetrizes_tiny_noise() {
        let m = IntraSetSimilarities::from_matrix(
            array![[1.0, 0.25 + 5e-10], [0.25, 1.0]],
            IntraKind::FromDescriptors,
        )
        .unwrap();
        assert_eq!(m.values()[(0, 1)], m.values()[(1, 0)]);
    }

    #[test]
    fn test_default_spec_matches_documented_parameters() {
        let spec = ProblemSpec::default();
        assert_eq!(spec.weights.db_loop, 4.0);
        assert_eq!(spec.weights.db_exclusion, 40.0);
        assert_eq!(spec.weights.q_loop, 1.0);
        assert_eq!(spec.weights.q_exclusion, 20.0);
        assert_eq!(spec.weights.seq, 10.0);
        let seq = spec.seq.as_ref().unwrap();
        assert_eq!(seq.length, 11);
        assert_eq!(seq.velocities, vec![0.6, 0.8, 1.0, 1.25, 1.67]);
        assert_eq!(spec.patch_max, 500);
        assert_eq!(spec.exclusion_variant, ExclusionVariant::Product);
        assert_eq!(spec.factor_threshold, 0.0);
        assert_eq!(spec.solver.max_iterations, 100);
        assert_eq!(spec.solver.ftol, 1e-8);
        assert_eq!(spec.solver.xtol, 1e-8);
        spec.validate().unwrap();
    }

    #[test]
    fn test_spec_json_absent_keys_take_defaults() {
        let spec = ProblemSpec::from_json(r#"{"weights": {"db_loop": 2.0}}"#).unwrap();
        assert_eq!(spec.weights.db_loop, 2.0);
        assert_eq!(spec.weights.db_exclusion, 40.0);
        assert_eq!(spec.patch_max, 500);
        assert!(spec.seq.is_some());

        let spec = ProblemSpec::from_json("{}").unwrap();
        assert_eq!(spec, ProblemSpec::default());
    }

    #[test]
    fn test_spec_json_round_trip_and_unknown_keys() {
        let spec = ProblemSpec::from_json(
            r#"{
                "weights": {"db_loop": 4.0, "db_exclusion": 40.0, "q_loop": 1.0,
                             "q_exclusion": 20.0, "seq": 10.0},
                "seq": {"length": 5, "velocities": [0.5, 1.0, 2.0]},
                "patch_max": 100,
                "exclusion_variant": "soft_and",
                "solver": {"max_iterations": 50, "ftol": 1e-6, "xtol": 1e-6},
                "factor_threshold": 0.25
            }"#,
        )
        .unwrap();
        assert_eq!(spec.exclusion_variant, ExclusionVariant::SoftAnd);
        assert_eq!(spec.seq.as_ref().unwrap().length, 5);
        let round = ProblemSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(spec, round);

        assert!(ProblemSpec::from_json(r#"{"weihgts": {}}"#).is_err());
    }

    #[test]
    fn test_spec_validation_rejects_bad_domains() {
        assert!(ProblemSpec::from_json(r#"{"factor_threshold": 1.0}"#).is_err());
        assert!(ProblemSpec::from_json(r#"{"factor_threshold": -0.1}"#).is_err());
        assert!(ProblemSpec::from_json(r#"{"weights": {"seq": -1.0}}"#).is_err());
        assert!(ProblemSpec::from_json(r#"{"seq": {"length": 4}}"#).is_err());
        assert!(ProblemSpec::from_json(r#"{"seq": {"velocities": [0.0, 1.0]}}"#).is_err());
        assert!(ProblemSpec::from_json(r#"{"patch_max": 0}"#).is_err());
    }

    #[test]
    fn test_sequence_config_rejects_unsorted_velocities() {
        assert!(SequenceConfig::new(5, vec![1.0, 0.5]).is_err());
        assert!(SequenceConfig::new(5, vec![0.5, 0.5, 1.0]).is_err());
        assert!(SequenceConfig::new(5, vec![0.5, 1.0, 2.0]).is_ok());
    }
}
