//! Ground truth, precision-recall evaluation, a synthetic scenario
//! generator, and end-to-end experiment runs comparing refinement modes.

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::optimize_patched;
use crate::pipeline::{
    intra_from_descriptors, intra_from_poses, pairwise_similarities, pose_distance,
    seqslam_postprocess, standardize, DescriptorSet, PoseTrack,
};
use crate::types::{ProblemSpec, SimilarityMatrix};

/// Binary place-match labels, one row per database image, one column per
/// query image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruthMatrix {
    values: Array2<u8>,
}

impl GroundTruthMatrix {
    /// Validates a rectangular table whose entries are exactly 0 or 1.
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
                if v == 0.0 {
                    values[(i, j)] = 0;
                } else if v == 1.0 {
                    values[(i, j)] = 1;
                } else {
                    return Err(Error::ValueOutOfRange { index: i * cols + j, value: v });
                }
            }
        }
        Ok(Self { values })
    }

    pub fn from_array(values: Array2<u8>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyMatrix);
        }
        let cols = values.ncols();
        for ((i, j), &v) in values.indexed_iter() {
            if v > 1 {
                return Err(Error::ValueOutOfRange { index: i * cols + j, value: v as f64 });
            }
        }
        Ok(Self { values })
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<u8> {
        &self.values
    }

    pub fn at(&self, i: usize, j: usize) -> bool {
        self.values[(i, j)] == 1
    }

    /// Count of positive (same-place) cells.
    pub fn positives(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }
}

/// Labels each (database, query) pair positive when the two poses lie
/// within `radius` meters of each other.
pub fn ground_truth_from_poses(
    db: &PoseTrack,
    q: &PoseTrack,
    radius: f64,
) -> Result<GroundTruthMatrix> {
    if !radius.is_finite() || radius <= 0.0 {
        return Err(Error::InvalidParams {
            reason: format!("ground-truth radius {radius} must be finite and > 0"),
        });
    }
    let mut values = Array2::zeros((db.len(), q.len()));
    for i in 0..db.len() {
        for j in 0..q.len() {
            if pose_distance(db.position(i), q.position(j)) <= radius {
                values[(i, j)] = 1;
            }
        }
    }
    GroundTruthMatrix::from_array(values)
}

fn check_eval_shapes(scores: &SimilarityMatrix, gt: &GroundTruthMatrix) -> Result<()> {
    if scores.rows() != gt.rows() || scores.cols() != gt.cols() {
        return Err(Error::DimensionMismatch {
            scores_rows: scores.rows(),
            scores_cols: scores.cols(),
            gt_rows: gt.rows(),
            gt_cols: gt.cols(),
        });
    }
    Ok(())
}

/// Cells sorted by score descending, ties broken by flat index ascending.
fn ranked_cells(scores: &SimilarityMatrix, gt: &GroundTruthMatrix) -> Vec<(f64, bool)> {
    let cols = scores.cols();
    let mut cells: Vec<(f64, usize)> = Vec::with_capacity(scores.rows() * cols);
    for i in 0..scores.rows() {
        for j in 0..cols {
            cells.push((scores.values()[(i, j)], i * cols + j));
        }
    }
    cells.sort_unstable_by(|a, b| {
        b.0.partial_cmp(&a.0).expect("similarities are finite").then(a.1.cmp(&b.1))
    });
    cells.into_iter().map(|(s, flat)| (s, gt.at(flat / cols, flat % cols))).collect()
}

/// Non-interpolated average precision: the mean, over positive cells, of
/// the precision at that cell's rank.
///
/// Precisions are accumulated in rank order with plain additions; the
/// value is a short exact-by-construction reduction, not a place to spend
/// compensated summation.
pub fn average_precision(scores: &SimilarityMatrix, gt: &GroundTruthMatrix) -> Result<f64> {
    check_eval_shapes(scores, gt)?;
    let positives = gt.positives();
    if positives == 0 {
        return Err(Error::NoPositives);
    }
    let mut true_positives = 0usize;
    let mut sum = 0.0;
    for (rank, (_, label)) in ranked_cells(scores, gt).iter().enumerate() {
        if *label {
            true_positives += 1;
            sum += true_positives as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// One point of a precision-recall curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Precision-recall curve with one point per rank of the sorted cell list.
pub fn pr_curve(scores: &SimilarityMatrix, gt: &GroundTruthMatrix) -> Result<Vec<PrPoint>> {
    check_eval_shapes(scores, gt)?;
    let positives = gt.positives();
    if positives == 0 {
        return Err(Error::NoPositives);
    }
    let ranked = ranked_cells(scores, gt);
    let mut points = Vec::with_capacity(ranked.len());
    let mut true_positives = 0usize;
    for (rank, (_, label)) in ranked.iter().enumerate() {
        if *label {
            true_positives += 1;
        }
        points.push(PrPoint {
            recall: true_positives as f64 / positives as f64,
            precision: true_positives as f64 / (rank + 1) as f64,
        });
    }
    Ok(points)
}

/// Knobs of the synthetic scenario generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioParams {
    /// Distinct places along the path; the database visits each once.
    pub places: usize,
    /// Descriptor dimensionality.
    pub dim: usize,
    /// Meters between consecutive places on the path.
    pub spacing: f64,
    /// Same-place radius in meters; drives ground truth and pose-derived
    /// intra-set similarities.
    pub radius: f64,
    /// Number of re-traversed sub-paths in the query pass.
    pub loop_segments: usize,
    /// Places per re-traversed sub-path.
    pub loop_length: usize,
    /// Number of stops (repeated poses) in the query pass.
    pub stop_segments: usize,
    /// Extra repeated frames per stop.
    pub stop_length: usize,
    /// Magnitude of the constant appearance offset added to every query
    /// descriptor, emulating a condition change between the two passes.
    pub condition_shift: f64,
    /// Standard deviation of i.i.d. Gaussian descriptor noise.
    pub noise_sigma: f64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            places: 60,
            dim: 16,
            spacing: 5.0,
            radius: 2.0,
            loop_segments: 1,
            loop_length: 8,
            stop_segments: 1,
            stop_length: 3,
            condition_shift: 0.0,
            noise_sigma: 0.0,
        }
    }
}

impl ScenarioParams {
    pub fn validate(&self) -> Result<()> {
        if self.places < 2 {
            return Err(Error::InvalidParams {
                reason: format!("place count {} must be at least 2", self.places),
            });
        }
        if self.dim < 4 {
            return Err(Error::InvalidParams {
                reason: format!("descriptor dim {} must be at least 4", self.dim),
            });
        }
        if !self.spacing.is_finite() || self.spacing <= 0.0 {
            return Err(Error::InvalidParams {
                reason: format!("spacing {} must be finite and > 0", self.spacing),
            });
        }
        if !self.radius.is_finite() || self.radius <= 0.0 {
            return Err(Error::InvalidParams {
                reason: format!("radius {} must be finite and > 0", self.radius),
            });
        }
        if self.radius > 0.4 * self.spacing {
            return Err(Error::InvalidParams {
                reason: format!(
                    "radius {} must be at most 0.4 * spacing ({}) so places stay separable",
                    self.radius,
                    0.4 * self.spacing
                ),
            });
        }
        if self.loop_segments > 0 && (self.loop_length < 2 || self.loop_length > self.places) {
            return Err(Error::InvalidParams {
                reason: format!(
                    "loop length {} must lie in [2, places={}]",
                    self.loop_length, self.places
                ),
            });
        }
        if self.stop_segments > 0 && self.stop_length == 0 {
            return Err(Error::InvalidParams {
                reason: "stop length must be at least 1".into(),
            });
        }
        for (name, v) in [("condition_shift", self.condition_shift), ("noise_sigma", self.noise_sigma)]
        {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidParams {
                    reason: format!("{name} is {v}, must be finite and >= 0"),
                });
            }
        }
        Ok(())
    }
}

/// A generated dataset: two pose tracks, two descriptor sets, and the
/// pose-derived ground truth. Everything is a pure function of the
/// parameters and the seed.
#[derive(Clone, Debug)]
pub struct SyntheticScenario {
    pub params: ScenarioParams,
    pub seed: u64,
    pub db_poses: PoseTrack,
    pub q_poses: PoseTrack,
    pub db_descriptors: DescriptorSet,
    pub q_descriptors: DescriptorSet,
    pub ground_truth: GroundTruthMatrix,
}

/// Attempts per place before the path generator gives up.
const PLACEMENT_ATTEMPTS: usize = 500;

/// Query pose jitter, per coordinate, as a fraction of the radius. The
/// bound keeps every jittered pose within its own place's radius and
/// outside every other place's (places are at least two radii apart).
const JITTER_FRACTION: f64 = 0.2;

/// Builds a scenario: a smooth 2D path of distinct places, a database
/// pass visiting each place once, a query pass with optional re-traversed
/// loops and stops, latent unit descriptors per place, and observed
/// descriptors with a per-set condition offset plus Gaussian noise.
///
/// All random draws happen in a fixed order and noise is always drawn
/// (then scaled by its magnitude), so scenarios with the same seed share
/// their geometry even when noise or shift settings differ.
pub fn generate_scenario(params: &ScenarioParams, seed: u64) -> Result<SyntheticScenario> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let places = params.places;
    let dim = params.dim;

    // Path of places: a heading random walk with rejection of candidates
    // closer than two radii to any earlier place. Later attempts widen
    // the turn range so the walk can back out of dead ends.
    let mut positions: Vec<(f64, f64)> = vec![(0.0, 0.0)];
    let mut heading = 0.0_f64;
    for _ in 1..places {
        let mut placed = false;
        for attempt in 0..PLACEMENT_ATTEMPTS {
            let widen = 1.0 + 4.0 * attempt as f64 / PLACEMENT_ATTEMPTS as f64;
            let turn = rng.gen_range(-0.6 * widen..0.6 * widen);
            let cand_heading = heading + turn;
            let last = *positions.last().expect("path is non-empty");
            let cand = (
                last.0 + params.spacing * cand_heading.cos(),
                last.1 + params.spacing * cand_heading.sin(),
            );
            if positions.iter().all(|&p| pose_distance(p, cand) >= 2.0 * params.radius) {
                positions.push(cand);
                heading = cand_heading;
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InvalidParams {
                reason: "path generation failed to avoid earlier places; \
                         lower the radius or the place count"
                    .into(),
            });
        }
    }

    // Query visit order: one full pass, re-traversed loop segments
    // spliced in right after their first traversal, then stops.
    let mut q_places: Vec<usize> = (0..places).collect();
    for _ in 0..params.loop_segments {
        let start = rng.gen_range(0..=places - params.loop_length);
        let last_value = start + params.loop_length - 1;
        let after = q_places
            .iter()
            .position(|&p| p == last_value)
            .expect("every place appears in the query pass")
            + 1;
        q_places.splice(after..after, start..=last_value);
    }
    for _ in 0..params.stop_segments {
        let pos = rng.gen_range(0..q_places.len());
        let value = q_places[pos];
        q_places.splice(pos + 1..pos + 1, std::iter::repeat(value).take(params.stop_length));
    }

    // One latent unit descriptor per place.
    let mut latents = Array2::zeros((places, dim));
    for p in 0..places {
        let mut norm_sq = 0.0;
        for d in 0..dim {
            let v: f64 = rng.sample(StandardNormal);
            latents[(p, d)] = v;
            norm_sq += v * v;
        }
        let norm = norm_sq.sqrt();
        if norm > 0.0 {
            for d in 0..dim {
                latents[(p, d)] /= norm;
            }
        }
    }

    // Condition offset applied to the query side only.
    let mut direction = vec![0.0; dim];
    let mut norm_sq = 0.0;
    for d in &mut direction {
        let v: f64 = rng.sample(StandardNormal);
        *d = v;
        norm_sq += v * v;
    }
    let norm = norm_sq.sqrt();
    let offset: Vec<f64> = if norm > 0.0 {
        direction.iter().map(|v| params.condition_shift * v / norm).collect()
    } else {
        vec![0.0; dim]
    };

    // Poses: the database sits exactly on the places; query frames jitter
    // around theirs.
    let db_positions =
        Array2::from_shape_fn((places, 2), |(i, c)| if c == 0 { positions[i].0 } else { positions[i].1 });
    let jitter = JITTER_FRACTION * params.radius;
    let mut q_positions = Array2::zeros((q_places.len(), 2));
    for (row, &p) in q_places.iter().enumerate() {
        let jx = rng.gen_range(-jitter..jitter);
        let jy = rng.gen_range(-jitter..jitter);
        q_positions[(row, 0)] = positions[p].0 + jx;
        q_positions[(row, 1)] = positions[p].1 + jy;
    }

    // Observed descriptors; noise is drawn unconditionally.
    let mut db_vectors = Array2::zeros((places, dim));
    for p in 0..places {
        for d in 0..dim {
            let noise: f64 = rng.sample(StandardNormal);
            db_vectors[(p, d)] = latents[(p, d)] + params.noise_sigma * noise;
        }
    }
    let mut q_vectors = Array2::zeros((q_places.len(), dim));
    for (row, &p) in q_places.iter().enumerate() {
        for d in 0..dim {
            let noise: f64 = rng.sample(StandardNormal);
            q_vectors[(row, d)] = latents[(p, d)] + offset[d] + params.noise_sigma * noise;
        }
    }

    let db_poses = PoseTrack::from_array(db_positions)?;
    let q_poses = PoseTrack::from_array(q_positions)?;
    let ground_truth = ground_truth_from_poses(&db_poses, &q_poses, params.radius)?;
    Ok(SyntheticScenario {
        params: *params,
        seed,
        db_poses,
        q_poses,
        db_descriptors: DescriptorSet::from_array(db_vectors)?,
        q_descriptors: DescriptorSet::from_array(q_vectors)?,
        ground_truth,
    })
}

/// Borrowed inputs of one experiment run: everything a refinement mode
/// may consume, independent of whether the data was generated or loaded
/// from files.
#[derive(Clone, Copy, Debug)]
pub struct ExperimentInputs<'a> {
    pub db_poses: &'a PoseTrack,
    pub db_descriptors: &'a DescriptorSet,
    pub q_descriptors: &'a DescriptorSet,
    pub ground_truth: &'a GroundTruthMatrix,
    /// Pose distance threshold in meters for the intra-database
    /// similarities.
    pub intra_radius: f64,
}

impl SyntheticScenario {
    /// Experiment view of this scenario, with the generation radius as
    /// the intra-database threshold.
    pub fn inputs(&self) -> ExperimentInputs<'_> {
        ExperimentInputs {
            db_poses: &self.db_poses,
            db_descriptors: &self.db_descriptors,
            q_descriptors: &self.q_descriptors,
            ground_truth: &self.ground_truth,
            intra_radius: self.params.radius,
        }
    }
}

/// Which information an experiment feeds into the refinement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Raw pairwise similarities, no refinement.
    Pairwise,
    /// Pose-derived intra-database similarities only.
    IntraDb,
    /// Intra-database plus descriptor-derived intra-query similarities.
    IntraDbQ,
    /// Both intra-set sides plus sequence factors.
    IntraDbQSeq,
    /// Sequence-mean smoothing only, no graph.
    SeqSlamOnly,
    /// Full graph on standardized descriptors; shorthand for
    /// [`Mode::IntraDbQSeq`] with standardization forced on.
    StandardizedX,
}

impl Mode {
    /// The five distinct stages; [`Mode::StandardizedX`] is reachable from
    /// [`Mode::IntraDbQSeq`] by the standardization flag.
    pub const STAGES: [Mode; 5] =
        [Mode::Pairwise, Mode::IntraDb, Mode::IntraDbQ, Mode::IntraDbQSeq, Mode::SeqSlamOnly];

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Pairwise => "pairwise",
            Mode::IntraDb => "intra_db",
            Mode::IntraDbQ => "intra_db_q",
            Mode::IntraDbQSeq => "intra_db_q_seq",
            Mode::SeqSlamOnly => "seqslam_only",
            Mode::StandardizedX => "standardized_x",
        }
    }
}

/// Outcome of one experiment run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub mode: Mode,
    /// Whether descriptors were standardized before building similarities.
    pub standardized: bool,
    /// Average precision of the raw, unstandardized pairwise matrix.
    pub ap_pairwise: f64,
    /// Average precision of this mode's output matrix.
    pub ap: f64,
    /// Factor count of the solved graph; absent for graph-free modes.
    pub factor_count: Option<u64>,
    /// Accepted solver iterations, summed over patches.
    pub iterations: Option<usize>,
    pub initial_error: Option<f64>,
    pub final_error: Option<f64>,
    /// Seconds spent building similarities and intra-set inputs.
    pub build_seconds: f64,
    /// Seconds spent in optimization or postprocessing.
    pub solve_seconds: f64,
}

/// Runs one mode on the inputs and reports average precision against the
/// ground truth, plus solver statistics and timings.
pub fn run_experiment(
    inputs: &ExperimentInputs<'_>,
    spec: &ProblemSpec,
    mode: Mode,
    standardize_descriptors: bool,
) -> Result<ExperimentReport> {
    spec.validate()?;
    let standardized = standardize_descriptors || mode == Mode::StandardizedX;
    let build_start = Instant::now();
    let raw = pairwise_similarities(inputs.db_descriptors, inputs.q_descriptors)?;
    let ap_pairwise = average_precision(&raw, inputs.ground_truth)?;
    let (s_hat, q_descriptors) = if standardized {
        let (db_std, q_std) = standardize(inputs.db_descriptors, inputs.q_descriptors)?;
        (pairwise_similarities(&db_std, &q_std)?, q_std)
    } else {
        (raw, inputs.q_descriptors.clone())
    };

    let mut report = ExperimentReport {
        mode,
        standardized,
        ap_pairwise,
        ap: 0.0,
        factor_count: None,
        iterations: None,
        initial_error: None,
        final_error: None,
        build_seconds: 0.0,
        solve_seconds: 0.0,
    };

    let output = match mode {
        Mode::Pairwise => {
            report.build_seconds = build_start.elapsed().as_secs_f64();
            s_hat
        }
        Mode::SeqSlamOnly => {
            let cfg = spec.seq.clone().unwrap_or_default();
            report.build_seconds = build_start.elapsed().as_secs_f64();
            let solve_start = Instant::now();
            let out = seqslam_postprocess(&s_hat, &cfg)?;
            report.solve_seconds = solve_start.elapsed().as_secs_f64();
            out
        }
        Mode::IntraDb | Mode::IntraDbQ | Mode::IntraDbQSeq | Mode::StandardizedX => {
            let intra_db = intra_from_poses(inputs.db_poses, inputs.intra_radius)?;
            let intra_q = match mode {
                Mode::IntraDb => None,
                _ => Some(intra_from_descriptors(&q_descriptors)?),
            };
            let mut mode_spec = spec.clone();
            mode_spec.seq = match mode {
                Mode::IntraDbQSeq | Mode::StandardizedX => {
                    Some(spec.seq.clone().unwrap_or_default())
                }
                _ => None,
            };
            report.build_seconds = build_start.elapsed().as_secs_f64();
            let solve_start = Instant::now();
            let (out, refine) =
                optimize_patched(&s_hat, Some(&intra_db), intra_q.as_ref(), &mode_spec)?;
            report.solve_seconds = solve_start.elapsed().as_secs_f64();
            report.factor_count = Some(refine.factor_count);
            report.iterations = Some(refine.iterations);
            report.initial_error = Some(refine.initial_error);
            report.final_error = Some(refine.final_error);
            out
        }
    };
    report.ap = average_precision(&output, inputs.ground_truth)?;
    Ok(report)
}
