//! Direct minimization of the distillation objective over a depth field.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::DistillationProduct;
use crate::error::{ensure_dims, Error, Result};
use crate::grid::DepthGrid;
use crate::losses::{objective, LossBreakdown, LossWeights, Supervision};
use crate::scene::SceneBundle;

const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Fill every pixel with its nearest sparse measurement.
    NearestSparse,
    /// Start from the distilled depth.
    Distilled,
    /// Midpoint of the depth range.
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Adam step in log-depth units.
    pub step_size: f64,
    pub moment1: f64,
    pub moment2: f64,
    pub min_depth: f64,
    pub max_depth: f64,
    pub init_mode: InitMode,
    /// Trace period; `0` records only the first and last iteration.
    pub log_every: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 3000,
            step_size: 1e-2,
            moment1: 0.9,
            moment2: 0.999,
            min_depth: 0.2,
            max_depth: 5.0,
            init_mode: InitMode::NearestSparse,
            log_every: 50,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| Error::Config {
            key: format!("solver.{key}"),
            message,
        };
        if !(self.min_depth > 0.0 && self.min_depth < self.max_depth && self.max_depth.is_finite()) {
            return Err(bad(
                "min_depth",
                format!("need 0 < min_depth < max_depth, got [{}, {}]", self.min_depth, self.max_depth),
            ));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(bad("step_size", format!("must be positive, got {}", self.step_size)));
        }
        for (key, m) in [("moment1", self.moment1), ("moment2", self.moment2)] {
            if !(0.0..1.0).contains(&m) {
                return Err(bad(key, format!("must lie in [0, 1), got {m}")));
            }
        }
        Ok(())
    }

    pub fn depth_range(&self) -> (f64, f64) {
        (self.min_depth, self.max_depth)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub md: f64,
    pub co: f64,
    pub st: f64,
    pub sm: f64,
    pub total: f64,
}

impl TraceEntry {
    fn new(iteration: usize, loss: &LossBreakdown) -> Self {
        Self {
            iteration,
            md: loss.md,
            co: loss.co,
            st: loss.st,
            sm: loss.sm,
            total: loss.total,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveTrace {
    pub entries: Vec<TraceEntry>,
    pub final_depth: DepthGrid,
}

/// Where the distillation target comes from at each iteration.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    Fixed(Supervision),
    /// One of the given supervisions, drawn uniformly at every iteration.
    RandomTeacher { supervisions: Vec<Supervision>, seed: u64 },
}

impl Schedule {
    fn supervision(&self, rng: &mut Option<ChaCha8Rng>) -> Result<std::borrow::Cow<'_, Supervision>> {
        match self {
            Schedule::Fixed(s) => Ok(std::borrow::Cow::Borrowed(s)),
            Schedule::RandomTeacher { supervisions, seed } => {
                if supervisions.is_empty() {
                    return Err(Error::invalid("random schedule needs at least one teacher"));
                }
                let rng = rng.get_or_insert_with(|| ChaCha8Rng::seed_from_u64(*seed));
                let pick = rng.random_range(0..supervisions.len());
                Ok(std::borrow::Cow::Borrowed(&supervisions[pick]))
            }
        }
    }
}

/// Initial depth field; every entry is clamped into the configured range.
pub fn initialize_depth(sparse: &DepthGrid, distilled: &DepthGrid, cfg: &SolverConfig) -> Result<DepthGrid> {
    ensure_dims(sparse.dims(), distilled.dims())?;
    let (h, w) = sparse.dims();
    match cfg.init_mode {
        InitMode::Distilled => Ok(distilled.clone()),
        InitMode::Constant => Ok(DepthGrid::filled(h, w, 0.5 * (cfg.min_depth + cfg.max_depth))),
        InitMode::NearestSparse => {
            let points: Vec<(f64, f64, f64)> = sparse
                .data()
                .iter()
                .enumerate()
                .filter(|(_, &d)| d > 0.0)
                .map(|(i, &d)| ((i / w) as f64, (i % w) as f64, d))
                .collect();
            if points.is_empty() {
                return Err(Error::invalid("nearest-sparse initialization needs at least one sparse point"));
            }
            Ok(DepthGrid::from_fn(h, w, |r, c| {
                let (r, c) = (r as f64, c as f64);
                let mut best = (f64::INFINITY, 0.0);
                for &(pr, pc, d) in &points {
                    let dist = (pr - r).powi(2) + (pc - c).powi(2);
                    if dist < best.0 {
                        best = (dist, d);
                    }
                }
                best.1.clamp(cfg.min_depth, cfg.max_depth)
            }))
        }
    }
}

/// Minimizes the monitored objective from the configured initialization.
pub fn solve(
    bundle: &SceneBundle,
    product: &DistillationProduct,
    weights: &LossWeights,
    cfg: &SolverConfig,
) -> Result<(DepthGrid, SolveTrace)> {
    let init = initialize_depth(&bundle.sparse, &product.distilled, cfg)?;
    solve_from(bundle, &Schedule::Fixed(Supervision::monitored(product)), weights, cfg, init)
}

/// Adam on `u = log d̂` with clamping to the depth range after every step.
pub fn solve_from(
    bundle: &SceneBundle,
    schedule: &Schedule,
    weights: &LossWeights,
    cfg: &SolverConfig,
    init: DepthGrid,
) -> Result<(DepthGrid, SolveTrace)> {
    cfg.validate()?;
    weights.validate()?;
    bundle.validate()?;
    ensure_dims(bundle.dims(), init.dims())?;
    let (h, w) = init.dims();
    let mut depth: Vec<f64> = init
        .data()
        .iter()
        .map(|d| d.clamp(cfg.min_depth, cfg.max_depth))
        .collect();
    let mut log_depth: Vec<f64> = depth.iter().map(|d| d.ln()).collect();
    let mut m = vec![0.0; depth.len()];
    let mut v = vec![0.0; depth.len()];
    let mut entries = Vec::new();
    let mut rng = None;
    let (mut bias1, mut bias2) = (1.0, 1.0);

    for iter in 0..=cfg.max_iters {
        let supervision = schedule.supervision(&mut rng)?;
        let loss = objective(&depth, bundle, &supervision, weights)?;
        if !loss.total.is_finite() || loss.gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { iteration: iter });
        }
        let logged = iter == 0 || iter == cfg.max_iters || (cfg.log_every > 0 && iter % cfg.log_every == 0);
        if logged {
            entries.push(TraceEntry::new(iter, &loss));
        }
        if iter == cfg.max_iters {
            break;
        }
        bias1 *= cfg.moment1;
        bias2 *= cfg.moment2;
        for i in 0..depth.len() {
            // Chain rule through d = exp(u).
            let g = loss.gradient[i] * depth[i];
            m[i] = cfg.moment1 * m[i] + (1.0 - cfg.moment1) * g;
            v[i] = cfg.moment2 * v[i] + (1.0 - cfg.moment2) * g * g;
            let m_hat = m[i] / (1.0 - bias1);
            let v_hat = v[i] / (1.0 - bias2);
            let u = log_depth[i] - cfg.step_size * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
            let d = u.exp().clamp(cfg.min_depth, cfg.max_depth);
            depth[i] = d;
            log_depth[i] = if d == u.exp() { u } else { d.ln() };
        }
    }
    let final_depth = DepthGrid::new(h, w, depth)?;
    Ok((
        final_depth.clone(),
        SolveTrace {
            entries,
            final_depth,
        },
    ))
}

/// Central differences of the monitored objective at the given flat pixel
/// indices.
pub fn finite_difference_gradient(
    d_hat: &DepthGrid,
    bundle: &SceneBundle,
    product: &DistillationProduct,
    weights: &LossWeights,
    pixels: &[usize],
    step: f64,
) -> Result<Vec<f64>> {
    finite_difference_objective(d_hat, bundle, &Supervision::monitored(product), weights, pixels, step)
}

pub fn finite_difference_objective(
    d_hat: &DepthGrid,
    bundle: &SceneBundle,
    supervision: &Supervision,
    weights: &LossWeights,
    pixels: &[usize],
    step: f64,
) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut probe = d_hat.data().to_vec();
    let mut out = Vec::with_capacity(pixels.len());
    for &i in pixels {
        if i >= probe.len() {
            return Err(Error::invalid(format!("pixel index {i} out of range")));
        }
        let base = probe[i];
        probe[i] = base + step;
        let plus = objective(&probe, bundle, supervision, weights)?.total;
        probe[i] = base - step;
        let minus = objective(&probe, bundle, supervision, weights)?.total;
        probe[i] = base;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}
