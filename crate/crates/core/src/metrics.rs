//! Error metrics and method comparisons over scene suites.

use std::fmt::{self, Write as _};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{
    baseline_ensemble, distill_bundle, distill_teachers, BaselineMode, EnsembleConfig, TeacherHypothesis,
    Weighting,
};
use crate::error::{ensure_dims, Error, Result};
use crate::grid::DepthGrid;
use crate::losses::{LossWeights, Supervision};
use crate::scene::SceneBundle;
use crate::solver::{initialize_depth, solve_from, InitMode, Schedule, SolveTrace, SolverConfig};
use crate::synthetic::{sample_sparse, splitmix64};

/// Column header of every emitted table.
pub const TABLE_HEADER: &str = "method,density,mae,rmse,imae,irmse,valid_count";
pub const TABLE_UNITS: &str = "# units: mae,rmse in m; imae,irmse in 1/m; density is the sparse fraction";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    pub imae: f64,
    pub irmse: f64,
    pub valid_count: usize,
}

/// Metrics over pixels whose ground truth lies in `[min, max]`.
pub fn evaluate(d_hat: &DepthGrid, d_gt: &DepthGrid, (min, max): (f64, f64)) -> Result<MetricReport> {
    ensure_dims(d_gt.dims(), d_hat.dims())?;
    if !(min < max) {
        return Err(Error::invalid(format!("empty evaluation range [{min}, {max}]")));
    }
    let (mut abs, mut sq, mut iabs, mut isq) = (0.0, 0.0, 0.0, 0.0);
    let mut n = 0usize;
    for (&p, &g) in d_hat.data().iter().zip(d_gt.data()) {
        if !(g > 0.0 && g >= min && g <= max) {
            continue;
        }
        if !(p > 0.0) {
            return Err(Error::invalid("prediction must be positive wherever ground truth is valid"));
        }
        let e = p - g;
        let ie = 1.0 / p - 1.0 / g;
        abs += e.abs();
        sq += e * e;
        iabs += ie.abs();
        isq += ie * ie;
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("no ground-truth pixels inside the evaluation range"));
    }
    let nf = n as f64;
    let (mae, imae) = (abs / nf, iabs / nf);
    // Constant residuals can leave the rounded RMSE one ulp under the MAE.
    let rmse = (sq / nf).sqrt().max(mae);
    let irmse = (isq / nf).sqrt().max(imae);
    Ok(MetricReport {
        mae,
        rmse,
        imae,
        irmse,
        valid_count: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    Monitored,
    Mean,
    Median,
    Random,
    /// Monitored distillation with every β forced to 1.
    NoBeta,
    UnsupervisedOnly,
    /// Monitored distillation from teacher `i` (1-based) alone.
    SingleTeacher(usize),
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Monitored => f.write_str("monitored"),
            Method::Mean => f.write_str("mean"),
            Method::Median => f.write_str("median"),
            Method::Random => f.write_str("random"),
            Method::NoBeta => f.write_str("no_beta"),
            Method::UnsupervisedOnly => f.write_str("unsupervised_only"),
            Method::SingleTeacher(i) => write!(f, "single_teacher_{i}"),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "monitored" => Method::Monitored,
            "mean" => Method::Mean,
            "median" => Method::Median,
            "random" => Method::Random,
            "no_beta" => Method::NoBeta,
            "unsupervised_only" => Method::UnsupervisedOnly,
            other => {
                let idx = other
                    .strip_prefix("single_teacher_")
                    .and_then(|i| i.parse::<usize>().ok())
                    .filter(|&i| i >= 1);
                match idx {
                    Some(i) => Method::SingleTeacher(i),
                    None => return Err(Error::invalid(format!("unknown method {other:?}"))),
                }
            }
        })
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything besides the scene that a method run depends on.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunSettings {
    pub ensemble: EnsembleConfig,
    pub weights: LossWeights,
    pub solver: SolverConfig,
    pub seed: u64,
}

/// Runs one method on one scene and returns the recovered depth.
pub fn run_method(bundle: &SceneBundle, method: Method, settings: &RunSettings, seed: u64) -> Result<DepthGrid> {
    Ok(run_method_traced(bundle, method, settings, seed)?.0)
}

/// As [`run_method`], also returning the loss trace.
pub fn run_method_traced(
    bundle: &SceneBundle,
    method: Method,
    settings: &RunSettings,
    seed: u64,
) -> Result<(DepthGrid, SolveTrace)> {
    let dims = bundle.dims();
    let mut weights = settings.weights;
    // Every distillation target is monitored by its own residual, so the
    // methods differ only in how the target is chosen.
    let own = |teacher: &TeacherHypothesis, weighting| {
        distill_teachers(bundle, std::slice::from_ref(teacher), &settings.ensemble, weighting)
    };
    let (schedule, init_target) = match method {
        Method::Monitored | Method::NoBeta => {
            let weighting = if method == Method::NoBeta {
                Weighting::Uniform
            } else {
                Weighting::SparseDeviation
            };
            let product = distill_bundle(bundle, &settings.ensemble, weighting)?;
            (Schedule::Fixed(Supervision::monitored(&product)), product.distilled)
        }
        Method::SingleTeacher(i) => {
            let teacher = bundle
                .teachers
                .get(i.wrapping_sub(1))
                .ok_or_else(|| Error::invalid(format!("scene has no teacher {i}")))?;
            let product = own(teacher, Weighting::SparseDeviation)?;
            (Schedule::Fixed(Supervision::monitored(&product)), product.distilled)
        }
        Method::Mean | Method::Median => {
            let mode = if method == Method::Mean {
                BaselineMode::Mean
            } else {
                BaselineMode::Median
            };
            let depth = baseline_ensemble(&bundle.teachers, mode, seed)?;
            let product = own(&TeacherHypothesis { id: 1, depth }, Weighting::SparseDeviation)?;
            (Schedule::Fixed(Supervision::monitored(&product)), product.distilled)
        }
        Method::Random => {
            let products = bundle
                .teachers
                .iter()
                .map(|t| own(t, Weighting::SparseDeviation))
                .collect::<Result<Vec<_>>>()?;
            let first = products
                .first()
                .map(|p| p.distilled.clone())
                .ok_or_else(|| Error::invalid("scene has no teachers"))?;
            let supervisions = products.iter().map(Supervision::monitored).collect();
            (Schedule::RandomTeacher { supervisions, seed }, first)
        }
        Method::UnsupervisedOnly => {
            weights.w_md = 0.0;
            (Schedule::Fixed(Supervision::unsupervised(dims)), bundle.sparse.clone())
        }
    };
    let mut init_cfg = settings.solver;
    if method == Method::UnsupervisedOnly && init_cfg.init_mode == InitMode::Distilled {
        // No distilled map exists without teachers.
        init_cfg.init_mode = InitMode::NearestSparse;
    }
    let init = initialize_depth(&bundle.sparse, &init_target, &init_cfg)?;
    solve_from(bundle, &schedule, &weights, &settings.solver, init)
}

/// Aggregated metrics of one method.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRow {
    pub method: Method,
    pub density: f64,
    /// Unweighted mean over scenes; `valid_count` is the total.
    pub report: MetricReport,
    pub per_scene: Vec<MetricReport>,
}

fn sparse_fraction(bundles: &[SceneBundle]) -> f64 {
    let sum: f64 = bundles
        .iter()
        .map(|b| b.sparse.valid_count() as f64 / b.sparse.len() as f64)
        .sum();
    sum / bundles.len() as f64
}

fn aggregate(reports: &[MetricReport]) -> MetricReport {
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    MetricReport {
        mae: mean(|r| r.mae),
        rmse: mean(|r| r.rmse),
        imae: mean(|r| r.imae),
        irmse: mean(|r| r.irmse),
        valid_count: reports.iter().map(|r| r.valid_count).sum(),
    }
}

/// Runs every method on every scene; scenes without ground truth are an
/// error. Scene `s` uses the seed stream `splitmix(seed ^ s)` for every
/// method so the runs share their randomness.
pub fn compare_methods(bundles: &[SceneBundle], methods: &[Method], settings: &RunSettings) -> Result<Vec<MethodRow>> {
    if bundles.is_empty() {
        return Err(Error::invalid("method comparison needs at least one scene"));
    }
    let range = settings.solver.depth_range();
    let density = sparse_fraction(bundles);
    let jobs: Vec<(usize, usize)> = (0..methods.len())
        .flat_map(|m| (0..bundles.len()).map(move |s| (m, s)))
        .collect();
    let reports: Vec<MetricReport> = jobs
        .par_iter()
        .map(|&(m, s)| {
            let bundle = &bundles[s];
            let gt = bundle
                .ground_truth
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("scene {s} has no ground truth")))?;
            let seed = splitmix64(settings.seed ^ s as u64);
            let depth = run_method(bundle, methods[m], settings, seed)?;
            evaluate(&depth, gt, range)
        })
        .collect::<Result<_>>()?;
    Ok(methods
        .iter()
        .enumerate()
        .map(|(m, &method)| {
            let per_scene = reports[m * bundles.len()..(m + 1) * bundles.len()].to_vec();
            MethodRow {
                method,
                density,
                report: aggregate(&per_scene),
                per_scene,
            }
        })
        .collect())
}

/// Resamples the sparse input of every scene at each density and compares
/// methods on the result.
pub fn density_sweep(
    bundles: &[SceneBundle],
    densities: &[f64],
    methods: &[Method],
    settings: &RunSettings,
) -> Result<Vec<MethodRow>> {
    for (i, d) in densities.iter().enumerate() {
        if !(*d > 0.0 && *d <= 1.0) {
            return Err(Error::invalid(format!("density {d} outside (0, 1]")));
        }
        if densities[..i].contains(d) {
            return Err(Error::invalid(format!("density {d} listed twice")));
        }
    }
    let mut rows = Vec::new();
    for &density in densities {
        let resampled = bundles
            .iter()
            .enumerate()
            .map(|(s, b)| {
                let gt = b
                    .ground_truth
                    .as_ref()
                    .ok_or_else(|| Error::invalid(format!("scene {s} has no ground truth")))?;
                let mut b = b.clone();
                b.sparse = sample_sparse(gt, density, splitmix64(settings.seed ^ 0xD5 ^ s as u64))?;
                Ok(b)
            })
            .collect::<Result<Vec<_>>>()?;
        for mut row in compare_methods(&resampled, methods, settings)? {
            row.density = density;
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Comma-separated table preceded by a units comment line.
pub fn format_table(rows: &[MethodRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{TABLE_UNITS}");
    let _ = writeln!(out, "{TABLE_HEADER}");
    for row in rows {
        let r = &row.report;
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?},{}",
            row.method, row.density, r.mae, r.rmse, r.imae, r.irmse, r.valid_count
        );
    }
    out
}
