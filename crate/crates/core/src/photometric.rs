//! Windowed SSIM and photometric reconstruction residuals.

use crate::error::{ensure_dims, Error, Result};
use crate::geometry::{CameraIntrinsics, Warp};
use crate::grid::{ErrorMap, ImageGrid, Mask, MaskedMap};
use crate::scene::View;

/// SSIM stabilizer for the luminance term, `(0.01·L)²` with `L = 1`.
pub const SSIM_C1: f64 = 0.01 * 0.01;
/// SSIM stabilizer for the contrast/structure term, `(0.03·L)²`.
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Half-width of the square SSIM window (3×3).
pub const SSIM_RADIUS: usize = 1;

/// Per-pixel SSIM together with the coefficients of its derivative.
///
/// For a valid center `x`, channel `c` and any window member `y`,
/// `∂S_c(x)/∂a_c(y) = inv_n · (k0 + k1·b_c(y) + k2·a_c(y))`, where `a` is the
/// first image and `b` the second.
pub(crate) struct SsimEval {
    pub score: Vec<f64>,
    pub valid: Vec<bool>,
    /// `[k0, k1, k2, inv_n]` per pixel and channel.
    pub coeffs: Vec<[f64; 4]>,
}

/// Sums of planar `height×width` fields over border-clipped 3×3 windows.
pub(crate) struct BoxFilter {
    height: usize,
    width: usize,
    scratch: Vec<f64>,
}

impl BoxFilter {
    pub fn new(height: usize, width: usize) -> Self {
        debug_assert_eq!(SSIM_RADIUS, 1);
        Self {
            height,
            width,
            scratch: vec![0.0; height * width],
        }
    }

    pub fn apply(&mut self, field: &[f64], out: &mut [f64]) {
        let (h, w) = (self.height, self.width);
        for (src, row) in field.chunks_exact(w).zip(self.scratch.chunks_exact_mut(w)) {
            if w == 1 {
                row[0] = src[0];
                continue;
            }
            row[0] = src[0] + src[1];
            for (o, win) in row[1..w - 1].iter_mut().zip(src.windows(3)) {
                *o = win[0] + win[1] + win[2];
            }
            row[w - 1] = src[w - 2] + src[w - 1];
        }
        let horizontal = &self.scratch;
        for (r, row) in out.chunks_exact_mut(w).enumerate() {
            row.copy_from_slice(&horizontal[r * w..(r + 1) * w]);
            if r > 0 {
                for (o, v) in row.iter_mut().zip(&horizontal[(r - 1) * w..r * w]) {
                    *o += v;
                }
            }
            if r + 1 < h {
                for (o, v) in row.iter_mut().zip(&horizontal[(r + 1) * w..(r + 2) * w]) {
                    *o += v;
                }
            }
        }
    }
}

/// SSIM of `a` against `b` over 3×3 windows restricted to `valid` pixels.
pub(crate) fn ssim_eval(
    a: &[f64],
    b: &[f64],
    valid: &[bool],
    height: usize,
    width: usize,
    channels: usize,
    with_coeffs: bool,
) -> SsimEval {
    let n = height * width;
    let mut filter = BoxFilter::new(height, width);
    let mask: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let mut count = vec![0.0; n];
    filter.apply(&mask, &mut count);
    let inv_count: Vec<f64> = count.iter().map(|&c| if c > 0.0 { 1.0 / c } else { 0.0 }).collect();
    let mut score = vec![0.0; n];
    let mut coeffs = if with_coeffs {
        vec![[0.0; 4]; n * channels]
    } else {
        Vec::new()
    };
    let mut fields = vec![vec![0.0; n]; 5];
    let mut sums = vec![vec![0.0; n]; 5];
    for ch in 0..channels {
        if let [fa, fb, faa, fbb, fab] = &mut fields[..] {
            let (fa, fb, faa, fbb, fab) = (&mut fa[..n], &mut fb[..n], &mut faa[..n], &mut fbb[..n], &mut fab[..n]);
            for i in 0..n {
                let av = a[i * channels + ch] * mask[i];
                let bv = b[i * channels + ch] * mask[i];
                fa[i] = av;
                fb[i] = bv;
                faa[i] = av * av;
                fbb[i] = bv * bv;
                fab[i] = av * bv;
            }
        }
        for (f, s) in fields.iter().zip(sums.iter_mut()) {
            filter.apply(f, s);
        }
        let [sa, sb, saa, sbb, sab] = &sums[..] else {
            unreachable!()
        };
        let (sa, sb, saa, sbb, sab) = (&sa[..n], &sb[..n], &saa[..n], &sbb[..n], &sab[..n]);
        for i in 0..n {
            if !valid[i] {
                continue;
            }
            let inv_n = inv_count[i];
            let mu_a = sa[i] * inv_n;
            let mu_b = sb[i] * inv_n;
            let var_a = saa[i] * inv_n - mu_a * mu_a;
            let var_b = sbb[i] * inv_n - mu_b * mu_b;
            let cov = sab[i] * inv_n - mu_a * mu_b;
            let a1 = 2.0 * mu_a * mu_b + SSIM_C1;
            let a2 = 2.0 * cov + SSIM_C2;
            let b1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1;
            let b2 = var_a + var_b + SSIM_C2;
            if with_coeffs {
                let (r1, r2) = (1.0 / b1, 1.0 / b2);
                let inv_den = r1 * r2;
                let s = a1 * a2 * inv_den;
                score[i] += s;
                let k0 = 2.0 * mu_b * (a2 - a1) * inv_den - 2.0 * s * mu_a * r1 + 2.0 * s * mu_a * r2;
                let k1 = 2.0 * a1 * inv_den;
                let k2 = -2.0 * s * r2;
                coeffs[i * channels + ch] = [k0, k1, k2, inv_n];
            } else {
                score[i] += a1 * a2 / (b1 * b2);
            }
        }
    }
    let inv_ch = 1.0 / channels as f64;
    for (s, &v) in score.iter_mut().zip(valid) {
        if v {
            *s *= inv_ch;
        }
    }
    SsimEval {
        score,
        valid: valid.to_vec(),
        coeffs,
    }
}

/// Per-pixel SSIM between `a` and `b`, averaged over channels.
///
/// Window statistics use only pixels flagged in `mask`; pixels outside the
/// mask are reported invalid.
pub fn ssim_map(a: &ImageGrid, b: &ImageGrid, mask: &Mask) -> Result<MaskedMap> {
    check_pair(a, b)?;
    ensure_dims(a.dims(), mask.dims())?;
    let (h, w) = a.dims();
    let eval = ssim_eval(a.data(), b.data(), mask.data(), h, w, a.channels(), false);
    Ok(MaskedMap::from_parts(h, w, eval.score, eval.valid))
}

/// Mean SSIM residual `1 − φ` over every view valid at each pixel.
///
/// `reconstructions` pairs each reconstructed target image with its validity
/// mask. The per-pixel mean is taken over sorted terms so the result does not
/// depend on view order.
pub fn photometric_error(target: &ImageGrid, reconstructions: &[(ImageGrid, Mask)]) -> Result<ErrorMap> {
    if reconstructions.is_empty() {
        return Err(Error::invalid("photometric_error needs at least one view"));
    }
    let maps = reconstructions
        .iter()
        .map(|(img, mask)| ssim_map(img, target, mask))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_residual(target.dims(), &maps))
}

fn mean_residual((h, w): (usize, usize), maps: &[MaskedMap]) -> ErrorMap {
    let mut values = vec![0.0; h * w];
    let mut valid = vec![false; h * w];
    let mut terms = Vec::with_capacity(maps.len());
    for i in 0..h * w {
        terms.clear();
        terms.extend(maps.iter().filter_map(|m| m.at(i)).map(|s| 1.0 - s));
        if terms.is_empty() {
            continue;
        }
        terms.sort_by(f64::total_cmp);
        values[i] = terms.iter().sum::<f64>() / terms.len() as f64;
        valid[i] = true;
    }
    ErrorMap::from_parts(h, w, values, valid)
}

/// Photometric residual of a depth hypothesis against the target image.
pub fn depth_residual(
    target: &ImageGrid,
    views: &[View],
    k: &CameraIntrinsics,
    depth: &[f64],
) -> Result<ErrorMap> {
    if views.is_empty() {
        return Err(Error::invalid("at least one adjacent view is required"));
    }
    let (h, w) = target.dims();
    if depth.len() != h * w {
        return Err(Error::invalid("depth length does not match the target image"));
    }
    let maps: Vec<MaskedMap> = views
        .iter()
        .map(|view| {
            let warp = Warp::compute(&view.image, depth, k, &view.pose, false);
            let eval = ssim_eval(&warp.color, target.data(), &warp.valid, h, w, target.channels(), false);
            MaskedMap::from_parts(h, w, eval.score, eval.valid)
        })
        .collect();
    Ok(mean_residual((h, w), &maps))
}

/// Mean absolute per-channel difference on masked pixels.
pub fn color_error(target: &ImageGrid, reconstruction: &ImageGrid, mask: &Mask) -> Result<ErrorMap> {
    check_pair(target, reconstruction)?;
    ensure_dims(target.dims(), mask.dims())?;
    let (h, w) = target.dims();
    let ch = target.channels();
    let mut values = vec![0.0; h * w];
    let valid = mask.data().to_vec();
    for (i, v) in values.iter_mut().enumerate() {
        if !valid[i] {
            continue;
        }
        let t = &target.data()[i * ch..(i + 1) * ch];
        let r = &reconstruction.data()[i * ch..(i + 1) * ch];
        *v = t.iter().zip(r).map(|(a, b)| (a - b).abs()).sum::<f64>() / ch as f64;
    }
    Ok(ErrorMap::from_parts(h, w, values, valid))
}

fn check_pair(a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    ensure_dims(a.dims(), b.dims())?;
    if a.channels() != b.channels() {
        return Err(Error::invalid(format!(
            "channel mismatch: {} vs {}",
            a.channels(),
            b.channels()
        )));
    }
    Ok(())
}
