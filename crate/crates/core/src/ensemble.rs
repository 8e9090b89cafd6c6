//! Blind-ensemble scoring and pixel-wise distillation.
//!
//! Each teacher is scored by its photometric reconstruction residual `P_i`,
//! scaled by a weight `β_i = 1 − exp(−α Z_i)` where `Z_i` is the teacher's
//! average deviation from the sparse depth measurements. The distilled depth
//! takes, per pixel, the teacher with the lowest weighted residual and the
//! monitor `Q = exp(−λ E)` turns that residual into a confidence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};
use crate::grid::{DepthGrid, ErrorMap};
use crate::photometric::depth_residual;
use crate::scene::SceneBundle;

/// Precomputed dense depth prediction of one teacher. `id` is 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherHypothesis {
    pub id: usize,
    pub depth: DepthGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    /// Temperature of the sparse-deviation weight.
    pub alpha: f64,
    /// Temperature of the monitor.
    pub lambda: f64,
    /// Odd side length of the sparse-deviation neighborhood.
    pub neighborhood: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            alpha: 0.10,
            lambda: 0.10,
            neighborhood: 7,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config {
                key: "ensemble.alpha".into(),
                message: "must be positive".into(),
            });
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config {
                key: "ensemble.lambda".into(),
                message: "must be positive".into(),
            });
        }
        if self.neighborhood == 0 || self.neighborhood % 2 == 0 {
            return Err(Error::Config {
                key: "ensemble.neighborhood".into(),
                message: "must be a positive odd integer".into(),
            });
        }
        Ok(())
    }
}

/// Sparse-deviation score and resulting weight of one teacher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherScore {
    pub z_score: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillationProduct {
    /// Per-pixel depth of the selected teacher.
    pub distilled: DepthGrid,
    /// Minimum weighted residual over teachers.
    pub residual: ErrorMap,
    /// Confidence in `[0, 1]`; zero where no teacher has a valid residual.
    pub monitor: Vec<f64>,
    /// 1-based index of the selected teacher, `None` where no residual is
    /// valid.
    pub selection: Vec<Option<usize>>,
    /// Filled by [`distill_bundle`]; empty when [`distill`] is called on
    /// precomputed residuals.
    pub scores: Vec<TeacherScore>,
}

impl DistillationProduct {
    pub fn dims(&self) -> (usize, usize) {
        self.distilled.dims()
    }

    pub fn betas(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.beta).collect()
    }

    pub fn z_scores(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.z_score).collect()
    }

    /// Rounds stored floats to `f32`, the precision kept on disk.
    pub fn round_to_f32(&mut self) {
        self.distilled.round_to_f32();
        let (h, w) = self.residual.dims();
        let values = self.residual.values().iter().map(|&v| v as f32 as f64).collect();
        self.residual = ErrorMap::from_parts(h, w, values, self.residual.valid().to_vec());
        for q in &mut self.monitor {
            *q = *q as f32 as f64;
        }
    }
}

/// Average absolute deviation of `depth` from the sparse points over
/// `k × k` neighborhoods.
///
/// Windows clipped by the image border still divide by `k²·|z|`.
pub fn sparse_deviation(depth: &DepthGrid, sparse: &DepthGrid, k: usize) -> Result<f64> {
    ensure_dims(depth.dims(), sparse.dims())?;
    if k == 0 || k % 2 == 0 {
        return Err(Error::invalid(format!("neighborhood {k} must be odd and positive")));
    }
    let (h, w) = depth.dims();
    let radius = k / 2;
    let mut total = 0.0;
    let mut points = 0usize;
    for r in 0..h {
        for c in 0..w {
            let z = sparse.get(r, c);
            if !(z > 0.0) {
                continue;
            }
            points += 1;
            let mut local = 0.0;
            for wr in r.saturating_sub(radius)..=(r + radius).min(h - 1) {
                for wc in c.saturating_sub(radius)..=(c + radius).min(w - 1) {
                    local += (depth.get(wr, wc) - z).abs();
                }
            }
            total += local;
        }
    }
    if points == 0 {
        return Err(Error::invalid("sparse depth has no valid points"));
    }
    Ok(total / ((k * k) as f64 * points as f64))
}

/// `β = 1 − exp(−α Z)`.
pub fn teacher_weight(z_score: f64, alpha: f64) -> f64 {
    -(-alpha * z_score).exp_m1()
}

/// `E_i = β_i · P_i`.
pub fn weighted_residual(residual: &ErrorMap, beta: f64) -> ErrorMap {
    let (h, w) = residual.dims();
    let values = residual.values().iter().map(|p| beta * p).collect();
    ErrorMap::from_parts(h, w, values, residual.valid().to_vec())
}

/// Pixel-wise argmin over weighted residuals; ties go to the lowest index.
pub fn distill(
    teachers: &[TeacherHypothesis],
    residuals: &[ErrorMap],
    lambda: f64,
) -> Result<DistillationProduct> {
    let first = teachers
        .first()
        .ok_or_else(|| Error::invalid("distill needs at least one teacher"))?;
    if residuals.len() != teachers.len() {
        return Err(Error::invalid(format!(
            "{} residual maps for {} teachers",
            residuals.len(),
            teachers.len()
        )));
    }
    if !(lambda > 0.0) {
        return Err(Error::invalid("monitor temperature must be positive"));
    }
    let dims = first.depth.dims();
    for (t, e) in teachers.iter().zip(residuals) {
        ensure_dims(dims, t.depth.dims())?;
        ensure_dims(dims, e.dims())?;
    }
    let n = dims.0 * dims.1;
    let mut distilled = first.depth.data().to_vec();
    let mut best = vec![0.0; n];
    let mut valid = vec![false; n];
    let mut monitor = vec![0.0; n];
    let mut selection = vec![None; n];
    for i in 0..n {
        let mut chosen: Option<(usize, f64)> = None;
        for (idx, e) in residuals.iter().enumerate() {
            if let Some(v) = e.at(i) {
                if chosen.is_none_or(|(_, b)| v < b) {
                    chosen = Some((idx, v));
                }
            }
        }
        if let Some((idx, v)) = chosen {
            distilled[i] = teachers[idx].depth.data()[i];
            best[i] = v;
            valid[i] = true;
            monitor[i] = (-lambda * v).exp();
            selection[i] = Some(teachers[idx].id);
        }
    }
    Ok(DistillationProduct {
        distilled: DepthGrid::new(dims.0, dims.1, distilled)?,
        residual: ErrorMap::from_parts(dims.0, dims.1, best, valid),
        monitor,
        selection,
        scores: Vec::new(),
    })
}

/// Whether teacher weights come from sparse deviation or are forced to one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    SparseDeviation,
    /// Ablation: `β_i = 1`, selection by photometric residual alone.
    Uniform,
}

/// Scores every teacher of a bundle and distills them.
pub fn distill_bundle(
    bundle: &SceneBundle,
    config: &EnsembleConfig,
    weighting: Weighting,
) -> Result<DistillationProduct> {
    distill_teachers(bundle, &bundle.teachers, config, weighting)
}

/// As [`distill_bundle`] but over an explicit teacher subset.
pub fn distill_teachers(
    bundle: &SceneBundle,
    teachers: &[TeacherHypothesis],
    config: &EnsembleConfig,
    weighting: Weighting,
) -> Result<DistillationProduct> {
    config.validate()?;
    if teachers.is_empty() {
        return Err(Error::invalid("distill needs at least one teacher"));
    }
    let mut residuals = Vec::with_capacity(teachers.len());
    let mut scores = Vec::with_capacity(teachers.len());
    for t in teachers {
        let p = depth_residual(&bundle.target, &bundle.views, &bundle.intrinsics, t.depth.data())?;
        let z_score = sparse_deviation(&t.depth, &bundle.sparse, config.neighborhood)?;
        let beta = match weighting {
            Weighting::SparseDeviation => teacher_weight(z_score, config.alpha),
            Weighting::Uniform => 1.0,
        };
        residuals.push(weighted_residual(&p, beta));
        scores.push(TeacherScore { z_score, beta });
    }
    let mut product = distill(teachers, &residuals, config.lambda)?;
    product.scores = scores;
    Ok(product)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    Mean,
    Median,
    Random,
}

/// Naive ensembles: per-pixel mean or median, or one teacher drawn uniformly
/// with an RNG seeded by `seed`.
pub fn baseline_ensemble(
    teachers: &[TeacherHypothesis],
    mode: BaselineMode,
    seed: u64,
) -> Result<DepthGrid> {
    let first = teachers
        .first()
        .ok_or_else(|| Error::invalid("baseline ensemble needs at least one teacher"))?;
    let (h, w) = first.depth.dims();
    for t in teachers {
        ensure_dims((h, w), t.depth.dims())?;
    }
    match mode {
        BaselineMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pick = rng.random_range(0..teachers.len());
            Ok(teachers[pick].depth.clone())
        }
        BaselineMode::Mean => {
            let m = teachers.len() as f64;
            let data = (0..h * w)
                .map(|i| teachers.iter().map(|t| t.depth.data()[i]).sum::<f64>() / m)
                .collect();
            DepthGrid::new(h, w, data)
        }
        BaselineMode::Median => {
            let mut column = Vec::with_capacity(teachers.len());
            let data = (0..h * w)
                .map(|i| {
                    column.clear();
                    column.extend(teachers.iter().map(|t| t.depth.data()[i]));
                    column.sort_by(f64::total_cmp);
                    let mid = column.len() / 2;
                    if column.len() % 2 == 1 {
                        column[mid]
                    } else {
                        0.5 * (column[mid - 1] + column[mid])
                    }
                })
                .collect();
            DepthGrid::new(h, w, data)
        }
    }
}

/// Selected-pixel counts per teacher and distilled-depth bin.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionHistogram {
    pub edges: Vec<f64>,
    /// `counts[teacher][bin]`, teacher 0-based.
    pub counts: Vec<Vec<usize>>,
}

impl SelectionHistogram {
    pub fn bin_total(&self, bin: usize) -> usize {
        self.counts.iter().map(|c| c[bin]).sum()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Share of each teacher in `bin`; `None` for an empty bin.
    pub fn proportions(&self, bin: usize) -> Option<Vec<f64>> {
        let total = self.bin_total(bin);
        (total > 0).then(|| {
            self.counts
                .iter()
                .map(|c| c[bin] as f64 / total as f64)
                .collect()
        })
    }
}

/// Histogram of teacher selection by distilled depth.
///
/// Bins are `[e_j, e_{j+1})` except the last, which includes its upper edge.
/// Pixels outside the edges or without a selection are not counted.
pub fn selection_histogram(
    product: &DistillationProduct,
    teachers: usize,
    edges: &[f64],
) -> Result<SelectionHistogram> {
    if edges.len() < 2 || edges.windows(2).any(|p| !(p[0] < p[1])) {
        return Err(Error::invalid("bin edges must be strictly increasing"));
    }
    let bins = edges.len() - 1;
    let mut counts = vec![vec![0usize; bins]; teachers];
    for (sel, &d) in product.selection.iter().zip(product.distilled.data()) {
        let Some(id) = *sel else { continue };
        if id == 0 || id > teachers {
            return Err(Error::invalid(format!("selection index {id} out of range")));
        }
        let last = edges[bins];
        if d < edges[0] || d > last {
            continue;
        }
        let bin = if d == last {
            bins - 1
        } else {
            edges.partition_point(|&e| e <= d) - 1
        };
        counts[id - 1][bin] += 1;
    }
    Ok(SelectionHistogram {
        edges: edges.to_vec(),
        counts,
    })
}
