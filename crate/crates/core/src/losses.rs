//! Training objective over a candidate depth field, with analytic gradients.
//!
//! Four terms are combined:
//!
//! - distillation: `Σ Q·|d̂ − d̄| / |Ω|`
//! - color: `Σ (1−Q)·mean_c|Î − I| / N`
//! - structural: `Σ (1−Q)·(1 − SSIM(Î, I)) / N`
//! - smoothness: `Σ (1−Q)·(λ_X|∂_X d̂| + λ_Y|∂_Y d̂|) / |Ω|`
//!
//! where `N` counts valid (pixel, view) warp pairs. The monitor and distilled
//! depth are constants; gradients flow only into `d̂`. `|·|` has subgradient
//! zero at zero.

use serde::{Deserialize, Serialize};

use crate::ensemble::DistillationProduct;
use crate::error::{ensure_dims, Error, Result};
use crate::geometry::{CameraIntrinsics, Warp};
use crate::grid::{DepthGrid, ImageGrid};
use crate::parallel::ordered_sum;
use crate::photometric::{ssim_eval, BoxFilter};
use crate::scene::{SceneBundle, View};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_md: f64,
    pub w_ph: f64,
    pub w_st: f64,
    pub w_sm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_md: 1.0,
            w_ph: 0.15,
            w_st: 0.85,
            w_sm: 0.1,
        }
    }
}

impl LossWeights {
    pub fn distillation_only() -> Self {
        Self {
            w_md: 1.0,
            w_ph: 0.0,
            w_st: 0.0,
            w_sm: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("loss.w_md", self.w_md),
            ("loss.w_ph", self.w_ph),
            ("loss.w_st", self.w_st),
            ("loss.w_sm", self.w_sm),
        ];
        for (key, w) in named {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config {
                    key: key.into(),
                    message: format!("weight must be finite and non-negative, got {w}"),
                });
            }
        }
        if named.iter().all(|(_, w)| *w == 0.0) {
            return Err(Error::Config {
                key: "loss".into(),
                message: "at least one weight must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Value and per-pixel gradient of one term.
#[derive(Debug, Clone, PartialEq)]
pub struct TermValue {
    pub value: f64,
    pub gradient: Vec<f64>,
}

impl TermValue {
    fn zero(n: usize) -> Self {
        Self {
            value: 0.0,
            gradient: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub md: f64,
    pub co: f64,
    pub st: f64,
    pub sm: f64,
    pub total: f64,
    /// `∂total/∂d̂` per pixel, in 1/m.
    pub gradient: Vec<f64>,
}

/// Per-pixel supervision weights.
///
/// Monitored distillation uses `(Q, 1 − Q)`; naive ensembling trusts the
/// target fully and keeps the unsupervised terms at full weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Supervision {
    pub target: DepthGrid,
    /// Weight of the distillation term at each pixel.
    pub distill_weight: Vec<f64>,
    /// Weight of the color, structural and smoothness terms at each pixel.
    pub fallback_weight: Vec<f64>,
}

impl Supervision {
    pub fn monitored(product: &DistillationProduct) -> Self {
        Self {
            target: product.distilled.clone(),
            distill_weight: product.monitor.clone(),
            fallback_weight: product.monitor.iter().map(|q| 1.0 - q).collect(),
        }
    }

    pub fn naive(target: DepthGrid) -> Self {
        let n = target.len();
        Self {
            target,
            distill_weight: vec![1.0; n],
            fallback_weight: vec![1.0; n],
        }
    }

    pub fn unsupervised((h, w): (usize, usize)) -> Self {
        Self {
            target: DepthGrid::filled(h, w, 0.0),
            distill_weight: vec![0.0; h * w],
            fallback_weight: vec![1.0; h * w],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.target.dims()
    }

    fn validate(&self, dims: (usize, usize)) -> Result<()> {
        ensure_dims(dims, self.target.dims())?;
        let n = dims.0 * dims.1;
        if self.distill_weight.len() != n || self.fallback_weight.len() != n {
            return Err(Error::invalid("supervision weights do not match the grid"));
        }
        Ok(())
    }
}

fn check_depth(d_hat: &[f64], (h, w): (usize, usize)) -> Result<()> {
    if d_hat.len() != h * w {
        return Err(Error::DimensionMismatch {
            expected: (h, w),
            actual: (d_hat.len() / w.max(1), w),
        });
    }
    Ok(())
}

fn check_monitor(q: &[f64], n: usize) -> Result<()> {
    if q.len() != n {
        return Err(Error::invalid("monitor length does not match the grid"));
    }
    Ok(())
}

fn complement(q: &[f64]) -> Vec<f64> {
    q.iter().map(|q| 1.0 - q).collect()
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Distillation term `Σ Q·|d̂ − d̄| / |Ω|`.
pub fn loss_md(d_hat: &DepthGrid, d_bar: &DepthGrid, q: &[f64]) -> Result<TermValue> {
    ensure_dims(d_bar.dims(), d_hat.dims())?;
    check_monitor(q, d_hat.len())?;
    Ok(distill_term(d_hat.data(), d_bar.data(), q))
}

fn distill_term(d_hat: &[f64], target: &[f64], weight: &[f64]) -> TermValue {
    let inv = 1.0 / d_hat.len() as f64;
    let mut terms = Vec::with_capacity(d_hat.len());
    let gradient = d_hat
        .iter()
        .zip(target)
        .zip(weight)
        .map(|((d, t), w)| {
            let diff = d - t;
            terms.push(w * diff.abs());
            w * sign(diff) * inv
        })
        .collect();
    TermValue {
        value: ordered_sum(&terms) * inv,
        gradient,
    }
}

/// Color-consistency term over all adjacent views.
pub fn loss_color(
    d_hat: &DepthGrid,
    target: &ImageGrid,
    views: &[View],
    k: &CameraIntrinsics,
    q: &[f64],
) -> Result<TermValue> {
    ensure_dims(target.dims(), d_hat.dims())?;
    check_monitor(q, d_hat.len())?;
    let (co, _) = reconstruction_terms(d_hat.data(), target, views, k, &complement(q), true, false)?;
    Ok(co.expect("color term requested"))
}

/// Structural (SSIM) consistency term over all adjacent views.
pub fn loss_structural(
    d_hat: &DepthGrid,
    target: &ImageGrid,
    views: &[View],
    k: &CameraIntrinsics,
    q: &[f64],
) -> Result<TermValue> {
    ensure_dims(target.dims(), d_hat.dims())?;
    check_monitor(q, d_hat.len())?;
    let (_, st) = reconstruction_terms(d_hat.data(), target, views, k, &complement(q), false, true)?;
    Ok(st.expect("structural term requested"))
}

/// Edge-aware smoothness with forward differences.
pub fn loss_smoothness(d_hat: &DepthGrid, target: &ImageGrid, q: &[f64]) -> Result<TermValue> {
    ensure_dims(target.dims(), d_hat.dims())?;
    check_monitor(q, d_hat.len())?;
    Ok(smoothness_term(d_hat.data(), target, &complement(q)))
}

/// Full objective for a monitored-distillation product.
pub fn total_loss(
    d_hat: &DepthGrid,
    bundle: &SceneBundle,
    product: &DistillationProduct,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    objective(d_hat.data(), bundle, &Supervision::monitored(product), weights)
}

/// Weighted objective under arbitrary supervision.
///
/// Terms whose weight is zero are skipped and reported as `0.0`.
pub fn objective(
    d_hat: &[f64],
    bundle: &SceneBundle,
    supervision: &Supervision,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let dims = bundle.dims();
    check_depth(d_hat, dims)?;
    supervision.validate(dims)?;
    let n = d_hat.len();

    let md = if weights.w_md > 0.0 {
        distill_term(d_hat, supervision.target.data(), &supervision.distill_weight)
    } else {
        TermValue::zero(n)
    };
    let (co, st) = reconstruction_terms(
        d_hat,
        &bundle.target,
        &bundle.views,
        &bundle.intrinsics,
        &supervision.fallback_weight,
        weights.w_ph > 0.0,
        weights.w_st > 0.0,
    )?;
    let co = co.unwrap_or_else(|| TermValue::zero(n));
    let st = st.unwrap_or_else(|| TermValue::zero(n));
    let sm = if weights.w_sm > 0.0 {
        smoothness_term(d_hat, &bundle.target, &supervision.fallback_weight)
    } else {
        TermValue::zero(n)
    };

    let total = weights.w_md * md.value
        + weights.w_ph * co.value
        + weights.w_st * st.value
        + weights.w_sm * sm.value;
    let gradient = (0..n)
        .map(|i| {
            weights.w_md * md.gradient[i]
                + weights.w_ph * co.gradient[i]
                + weights.w_st * st.gradient[i]
                + weights.w_sm * sm.gradient[i]
        })
        .collect();
    Ok(LossBreakdown {
        md: md.value,
        co: co.value,
        st: st.value,
        sm: sm.value,
        total,
        gradient,
    })
}

/// Color and structural terms, sharing one warp per view.
fn reconstruction_terms(
    d_hat: &[f64],
    target: &ImageGrid,
    views: &[View],
    k: &CameraIntrinsics,
    weight: &[f64],
    want_color: bool,
    want_structural: bool,
) -> Result<(Option<TermValue>, Option<TermValue>)> {
    if !want_color && !want_structural {
        return Ok((None, None));
    }
    if views.is_empty() {
        return Err(Error::invalid("photometric losses need at least one view"));
    }
    let (h, w) = target.dims();
    check_depth(d_hat, (h, w))?;
    let ch = target.channels();
    let n = h * w;
    let inv_ch = 1.0 / ch as f64;
    let tgt = target.data();

    let mut pairs = 0usize;
    let mut co_terms: Vec<f64> = Vec::new();
    let mut st_terms: Vec<f64> = Vec::new();
    let mut co_grads: Vec<Vec<f64>> = Vec::new();
    let mut st_grads: Vec<Vec<f64>> = Vec::new();

    for view in views {
        let warp = Warp::compute(&view.image, d_hat, k, &view.pose, true);
        pairs += warp.valid.iter().filter(|&&v| v).count();

        if want_color {
            let mut grad = vec![0.0; n];
            let mut vals = vec![0.0; n];
            for i in 0..n {
                if !warp.valid[i] {
                    continue;
                }
                let mut abs_sum = 0.0;
                let mut g = 0.0;
                for c in 0..ch {
                    let diff = warp.color[i * ch + c] - tgt[i * ch + c];
                    abs_sum += diff.abs();
                    g += sign(diff) * warp.dcolor[i * ch + c];
                }
                vals[i] = weight[i] * abs_sum * inv_ch;
                grad[i] = weight[i] * g * inv_ch;
            }
            co_terms.push(ordered_sum(&vals));
            co_grads.push(grad);
        }

        if want_structural {
            let eval = ssim_eval(&warp.color, tgt, &warp.valid, h, w, ch, true);
            let vals: Vec<f64> = (0..n)
                .map(|i| if warp.valid[i] { weight[i] * (1.0 - eval.score[i]) } else { 0.0 })
                .collect();
            st_terms.push(ordered_sum(&vals));

            // Pixel y influences the SSIM of every valid center x in its 3×3
            // neighborhood; the coefficients of x are box-summed onto y.
            let mut grad = vec![0.0; n];
            let mut fields = vec![vec![0.0; n]; 3];
            let mut sums = vec![vec![0.0; n]; 3];
            let mut filter = BoxFilter::new(h, w);
            for c in 0..ch {
                for x in 0..n {
                    let wx = if warp.valid[x] { weight[x] } else { 0.0 };
                    let [k0, k1, k2, inv_n] = if wx == 0.0 { [0.0; 4] } else { eval.coeffs[x * ch + c] };
                    fields[0][x] = wx * inv_n * k0;
                    fields[1][x] = wx * inv_n * k1;
                    fields[2][x] = wx * inv_n * k2;
                }
                for (f, s) in fields.iter().zip(sums.iter_mut()) {
                    filter.apply(f, s);
                }
                for y in 0..n {
                    if !warp.valid[y] {
                        continue;
                    }
                    let a = warp.color[y * ch + c];
                    let b = tgt[y * ch + c];
                    let ds = sums[0][y] + sums[1][y] * b + sums[2][y] * a;
                    grad[y] -= ds * warp.dcolor[y * ch + c] * inv_ch;
                }
            }
            st_grads.push(grad);
        }
    }

    let norm = if pairs > 0 { 1.0 / pairs as f64 } else { 0.0 };
    let finish = |terms: &[f64], grads: &[Vec<f64>]| {
        let mut gradient = vec![0.0; n];
        for g in grads {
            for (acc, v) in gradient.iter_mut().zip(g) {
                *acc += v;
            }
        }
        for v in &mut gradient {
            *v *= norm;
        }
        TermValue {
            value: ordered_sum(terms) * norm,
            gradient,
        }
    };
    let co = want_color.then(|| finish(&co_terms, &co_grads));
    let st = want_structural.then(|| finish(&st_terms, &st_grads));
    Ok((co, st))
}

/// Edge-aware weights `exp(−mean_c |∂I_c|)` along columns (x) and rows (y).
fn edge_weights(img: &ImageGrid) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = img.dims();
    let ch = img.channels();
    let mut wx = vec![0.0; h * w];
    let mut wy = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if c + 1 < w {
                let g: f64 = (0..ch).map(|k| (img.get(r, c + 1, k) - img.get(r, c, k)).abs()).sum();
                wx[i] = (-g / ch as f64).exp();
            }
            if r + 1 < h {
                let g: f64 = (0..ch).map(|k| (img.get(r + 1, c, k) - img.get(r, c, k)).abs()).sum();
                wy[i] = (-g / ch as f64).exp();
            }
        }
    }
    (wx, wy)
}

fn smoothness_term(d_hat: &[f64], img: &ImageGrid, weight: &[f64]) -> TermValue {
    let (h, w) = img.dims();
    let n = h * w;
    let inv = 1.0 / n as f64;
    let (lx, ly) = edge_weights(img);
    let mut terms = vec![0.0; n];
    let mut gradient = vec![0.0; n];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let mut t = 0.0;
            let mut g = 0.0;
            if c + 1 < w {
                let diff = d_hat[i + 1] - d_hat[i];
                let wx = weight[i] * lx[i];
                t += wx * diff.abs();
                g -= wx * sign(diff);
            }
            if c > 0 {
                let diff = d_hat[i] - d_hat[i - 1];
                g += weight[i - 1] * lx[i - 1] * sign(diff);
            }
            if r + 1 < h {
                let diff = d_hat[i + w] - d_hat[i];
                let wy = weight[i] * ly[i];
                t += wy * diff.abs();
                g -= wy * sign(diff);
            }
            if r > 0 {
                let diff = d_hat[i] - d_hat[i - w];
                g += weight[i - w] * ly[i - w] * sign(diff);
            }
            terms[i] = t;
            gradient[i] = g * inv;
        }
    }
    TermValue {
        value: ordered_sum(&terms) * inv,
        gradient,
    }
}
