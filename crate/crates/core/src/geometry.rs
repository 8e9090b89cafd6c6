//! Pinhole camera model, rigid transforms and inverse warping.
//!
//! Continuous pixel coordinates place integer values at pixel centers:
//! `(col, row) = (3.0, 7.0)` is exactly the stored sample at row 7, column 3.

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::error::{ensure_dims, Error, Result};
use crate::grid::{DepthGrid, ImageGrid, Mask};
use crate::parallel::fill_rows;

/// Minimum camera-frame depth accepted by [`project`], in meters.
pub const MIN_PROJECTIVE_DEPTH: f64 = 1e-6;

const POSE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invalid("focal lengths must be positive and finite"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera grid must be non-empty"));
        }
        if !(0.0..self.width as f64).contains(&self.cx)
            || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(Error::invalid("principal point outside the image"));
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Ray direction `K⁻¹ [u, v, 1]ᵀ` for a pixel, with unit z component.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Rigid transform `p ↦ R p + t` mapping target-camera coordinates into
/// another camera's frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("pose contains non-finite values"));
        }
        let orth = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if orth > POSE_TOLERANCE {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal (deviation {orth:e})"
            )));
        }
        if (rotation.determinant() - 1.0).abs() > POSE_TOLERANCE {
            return Err(Error::invalid("rotation determinant must be +1"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Pure translation.
    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::new(x, y, z),
        }
    }

    /// Rotation about `axis_angle` (radians times unit axis) followed by
    /// translation `t`.
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: Rotation3::new(axis_angle).into_inner(),
            translation,
        }
    }

    /// Pose of a camera centered at `center` (expressed in the target frame)
    /// with orientation `axis_angle` relative to the target camera.
    pub fn from_camera_center(axis_angle: Vector3<f64>, center: Vector3<f64>) -> Self {
        let rotation = Rotation3::new(axis_angle).into_inner();
        Self {
            rotation,
            translation: -(rotation * center),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation_vector(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center of the destination view in source coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn is_pure_rotation(&self) -> bool {
        self.translation == Vector3::zeros()
    }
}

/// Lifts pixel `x = (col, row)` at `depth` into the camera frame.
pub fn backproject(x: [f64; 2], depth: f64, k: &CameraIntrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::invalid(format!("backproject: depth {depth} must be positive")));
    }
    let max_u = (k.width - 1) as f64;
    let max_v = (k.height - 1) as f64;
    if !(0.0..=max_u).contains(&x[0]) || !(0.0..=max_v).contains(&x[1]) {
        return Err(Error::invalid(format!("backproject: pixel {x:?} outside image")));
    }
    let mut p = k.ray(x[0], x[1]) * depth;
    // The z component is `depth` exactly, not `1.0 * depth` rounded twice.
    p.z = depth;
    Ok(p)
}

/// Result of perspective projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: [f64; 2],
    pub valid: bool,
}

/// Projects a camera-frame point; invalid behind the camera or off-image.
///
/// Coordinates within 1e-9 px outside the border are snapped onto it.
pub fn project(p: &Vector3<f64>, k: &CameraIntrinsics) -> Projection {
    if !(p.z > MIN_PROJECTIVE_DEPTH) {
        return Projection {
            pixel: [f64::NAN, f64::NAN],
            valid: false,
        };
    }
    let inv_z = 1.0 / p.z;
    let u = snap_to_range(k.fx * p.x * inv_z + k.cx, (k.width - 1) as f64);
    let v = snap_to_range(k.fy * p.y * inv_z + k.cy, (k.height - 1) as f64);
    let valid = (0.0..=(k.width - 1) as f64).contains(&u) && (0.0..=(k.height - 1) as f64).contains(&v);
    Projection {
        pixel: [u, v],
        valid,
    }
}

/// Pulls coordinates within round-off of the image border back onto it.
#[inline]
fn snap_to_range(x: f64, max: f64) -> f64 {
    const SNAP: f64 = 1e-9;
    if x < 0.0 && x > -SNAP {
        0.0
    } else if x > max && x < max + SNAP {
        max
    } else {
        x
    }
}

/// Top-left corner and fractional offsets of the bilinear cell holding `u`.
///
/// Coordinates exactly on the last row or column use the preceding cell with
/// a unit weight so that the full closed range `[0, W-1] × [0, H-1]` is
/// sampleable.
#[inline]
fn bilinear_cell(width: usize, height: usize, u: f64, v: f64) -> Option<(usize, usize, f64, f64)> {
    let max_u = (width - 1) as f64;
    let max_v = (height - 1) as f64;
    if !(u >= 0.0 && u <= max_u && v >= 0.0 && v <= max_v) {
        return None;
    }
    // Truncation is the floor here since both coordinates are non-negative.
    let c0 = (u as usize).min(width.saturating_sub(2));
    let r0 = (v as usize).min(height.saturating_sub(2));
    Some((c0, r0, u - c0 as f64, v - r0 as f64))
}

#[inline]
fn texel(img: &ImageGrid, row: usize, col: usize, ch: usize) -> f64 {
    let r = row.min(img.height() - 1);
    let c = col.min(img.width() - 1);
    img.get(r, c, ch)
}

/// Bilinear interpolation at continuous coordinate `u = (col, row)`.
///
/// Returns `None` when any contributing pixel lies outside the grid.
pub fn bilinear_sample(img: &ImageGrid, u: [f64; 2]) -> Option<Vec<f64>> {
    let mut out = vec![0.0; img.channels()];
    sample_into(img, u[0], u[1], &mut out, None).then_some(out)
}

/// Samples `img` into `out`; when `grad` is given it receives
/// `(∂/∂u, ∂/∂v)` per channel. Returns false when out of bounds.
#[inline]
pub(crate) fn sample_into(
    img: &ImageGrid,
    u: f64,
    v: f64,
    out: &mut [f64],
    grad: Option<(&mut [f64], &mut [f64])>,
) -> bool {
    let Some((c0, r0, a, b)) = bilinear_cell(img.width(), img.height(), u, v) else {
        return false;
    };
    let ch = img.channels();
    let (w, h) = (img.width(), img.height());
    if w < 2 || h < 2 {
        let (c1, r1) = (c0 + 1, r0 + 1);
        for k in 0..ch {
            let i00 = texel(img, r0, c0, k);
            let i01 = texel(img, r0, c1, k);
            let i10 = texel(img, r1, c0, k);
            let i11 = texel(img, r1, c1, k);
            out[k] = (1.0 - b) * ((1.0 - a) * i00 + a * i01) + b * ((1.0 - a) * i10 + a * i11);
        }
        if let Some((du, dv)) = grad {
            du[..ch].fill(0.0);
            dv[..ch].fill(0.0);
        }
        return true;
    }
    let data = img.data();
    let top_start = (r0 * w + c0) * ch;
    let bottom_start = top_start + w * ch;
    let top = &data[top_start..top_start + 2 * ch];
    let bottom = &data[bottom_start..bottom_start + 2 * ch];
    let out = &mut out[..ch];
    match grad {
        None => {
            for k in 0..ch {
                let (i00, i01, i10, i11) = (top[k], top[ch + k], bottom[k], bottom[ch + k]);
                out[k] = (1.0 - b) * ((1.0 - a) * i00 + a * i01) + b * ((1.0 - a) * i10 + a * i11);
            }
        }
        Some((du, dv)) => {
            let (du, dv) = (&mut du[..ch], &mut dv[..ch]);
            for k in 0..ch {
                let (i00, i01, i10, i11) = (top[k], top[ch + k], bottom[k], bottom[ch + k]);
                out[k] = (1.0 - b) * ((1.0 - a) * i00 + a * i01) + b * ((1.0 - a) * i10 + a * i11);
                du[k] = (1.0 - b) * (i01 - i00) + b * (i11 - i10);
                dv[k] = (1.0 - a) * (i10 - i00) + a * (i11 - i01);
            }
        }
    }
    true
}

/// Reconstructs the target view by sampling `source` through `depth`.
///
/// `pose` maps target-camera coordinates into the source camera.
pub fn reproject_image(
    source: &ImageGrid,
    depth: &DepthGrid,
    k: &CameraIntrinsics,
    pose: &RigidPose,
) -> Result<(ImageGrid, Mask)> {
    ensure_dims(depth.dims(), source.dims())?;
    ensure_dims(k.dims(), depth.dims())?;
    let warp = Warp::compute(source, depth.data(), k, pose, false);
    let (h, w) = depth.dims();
    let image = ImageGrid::new(h, w, source.channels(), warp.color)?;
    let mask = Mask::new(h, w, warp.valid)?;
    Ok((image, mask))
}

/// Warped colors plus, optionally, their derivative with respect to the
/// depth of the same pixel.
#[derive(Debug, Clone)]
pub(crate) struct Warp {
    pub color: Vec<f64>,
    /// `∂color/∂depth` per pixel and channel; empty unless requested.
    pub dcolor: Vec<f64>,
    pub valid: Vec<bool>,
}

impl Warp {
    pub fn compute(
        source: &ImageGrid,
        depth: &[f64],
        k: &CameraIntrinsics,
        pose: &RigidPose,
        with_jacobian: bool,
    ) -> Self {
        let (h, w) = (k.height, k.width);
        let ch = source.channels();
        let n = h * w;

        // Per-pixel outputs packed as [color(ch), dcolor(ch), valid] to fill
        // all three in one parallel pass.
        let stride = 2 * ch + 1;
        let mut packed = vec![0.0; n * stride];
        let rot = pose.rotation();
        let t = pose.translation_vector();
        fill_rows(&mut packed, w * stride, |r, row| {
            let mut du = vec![0.0; ch];
            let mut dv = vec![0.0; ch];
            for c in 0..w {
                let cell = &mut row[c * stride..(c + 1) * stride];
                let d = depth[r * w + c];
                if !(d > 0.0) {
                    continue;
                }
                // q = d·(R r) + t
                let a = rot * k.ray(c as f64, r as f64);
                let q = a * d + t;
                let proj = project(&q, k);
                if !proj.valid {
                    continue;
                }
                let [u, v] = proj.pixel;
                let (color, rest) = cell.split_at_mut(ch);
                let ok = if with_jacobian {
                    sample_into(source, u, v, color, Some((&mut du, &mut dv)))
                } else {
                    sample_into(source, u, v, color, None)
                };
                if !ok {
                    color.fill(0.0);
                    continue;
                }
                if with_jacobian {
                    let inv_qz2 = 1.0 / (q.z * q.z);
                    let du_dd = k.fx * (a.x * q.z - q.x * a.z) * inv_qz2;
                    let dv_dd = k.fy * (a.y * q.z - q.y * a.z) * inv_qz2;
                    for i in 0..ch {
                        rest[i] = du[i] * du_dd + dv[i] * dv_dd;
                    }
                }
                rest[ch] = 1.0;
            }
        });

        let mut color = Vec::with_capacity(n * ch);
        let mut dcolor = if with_jacobian {
            Vec::with_capacity(n * ch)
        } else {
            Vec::new()
        };
        let mut valid = Vec::with_capacity(n);
        for cell in packed.chunks_exact(stride) {
            color.extend_from_slice(&cell[..ch]);
            if with_jacobian {
                dcolor.extend_from_slice(&cell[ch..2 * ch]);
            }
            valid.push(cell[2 * ch] == 1.0);
        }
        Self {
            color,
            dcolor,
            valid,
        }
    }
}
