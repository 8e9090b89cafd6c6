//! Analytic multi-view scenes with exact ground truth.
//!
//! A scene is a set of planes seen from inside the convex region they bound
//! (a "room"), so the nearest-plane surface is continuous and every camera
//! inside the room sees it without self-occlusion. Colors come from smooth
//! value noise attached to each plane, which makes corresponding pixels
//! across views photo-consistent up to interpolation error.

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ensemble::TeacherHypothesis;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, RigidPose};
use crate::grid::{DepthGrid, ImageGrid};
use crate::scene::{SceneBundle, View};

/// Lower bound applied to corrupted teacher depths, in meters.
pub const TEACHER_DEPTH_FLOOR: f64 = 1e-3;

/// World-space size of one texture lattice cell, in meters.
const TEXTURE_CELL: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    /// Unit normal pointing away from the cameras.
    pub normal: Vector3<f64>,
    /// Points `X` on the plane satisfy `normal · X = offset`.
    pub offset: f64,
    pub texture_seed: u64,
    /// Peak deviation of the texture around its base color.
    pub contrast: f64,
    /// Lower wins when two planes are hit at the same depth.
    pub priority: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanarScene {
    pub camera: CameraIntrinsics,
    pub planes: Vec<Plane>,
    /// `poses[0]` is the identity (the target view).
    pub poses: Vec<RigidPose>,
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix64(seed ^ splitmix64((ix as u64).wrapping_mul(0x1656_67B1) ^ splitmix64(iy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Smoothly interpolated lattice noise in `[0, 1]`.
fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let (tx, ty) = (fade(x - fx), fade(y - fy));
    let v00 = lattice(seed, ix, iy);
    let v10 = lattice(seed, ix + 1, iy);
    let v01 = lattice(seed, ix, iy + 1);
    let v11 = lattice(seed, ix + 1, iy + 1);
    let top = v00 + (v10 - v00) * tx;
    let bottom = v01 + (v11 - v01) * tx;
    top + (bottom - top) * ty
}

impl Plane {
    fn tangent_basis(&self) -> (Vector3<f64>, Vector3<f64>) {
        let n = self.normal;
        let helper = if n.x.abs() < 0.9 {
            Vector3::x()
        } else {
            Vector3::y()
        };
        let e1 = n.cross(&helper).normalize();
        let e2 = n.cross(&e1);
        (e1, e2)
    }

    /// Color of the plane texture at world point `p`.
    pub fn color(&self, p: &Vector3<f64>, channels: usize, out: &mut [f64]) {
        let (e1, e2) = self.tangent_basis();
        let s = e1.dot(p) / TEXTURE_CELL;
        let t = e2.dot(p) / TEXTURE_CELL;
        for (ch, o) in out.iter_mut().enumerate().take(channels) {
            let seed = splitmix64(self.texture_seed ^ (ch as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407));
            let base = 0.3 + 0.4 * lattice(seed, -7, 11);
            let fine = value_noise(seed, s, t) - 0.5;
            let coarse = value_noise(seed ^ 0x5555, 0.5 * s + 17.0, 0.5 * t - 3.0) - 0.5;
            *o = (base + self.contrast * (fine + 0.6 * coarse) * 1.25).clamp(0.0, 1.0);
        }
    }
}

/// Renders `view` with three color channels; depth is camera-frame z.
pub fn render(scene: &PlanarScene, view: usize) -> Result<(ImageGrid, DepthGrid)> {
    let pose = scene
        .poses
        .get(view)
        .ok_or_else(|| Error::invalid(format!("view {view} out of range")))?;
    let k = &scene.camera;
    let (h, w) = k.dims();
    let center = pose.center();
    let rt = pose.rotation().transpose();
    let channels = 3;
    let mut image = vec![0.0; h * w * channels];
    let mut depth = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let ray = k.ray(c as f64, r as f64);
            let dir = rt * ray;
            let mut hit: Option<(f64, u32, usize)> = None;
            for (pi, plane) in scene.planes.iter().enumerate() {
                let denom = plane.normal.dot(&dir);
                if denom.abs() < 1e-12 {
                    continue;
                }
                let s = (plane.offset - plane.normal.dot(&center)) / denom;
                if !(s > 0.0) {
                    continue;
                }
                let better = match hit {
                    None => true,
                    Some((bs, bp, _)) => s < bs || (s == bs && plane.priority < bp),
                };
                if better {
                    hit = Some((s, plane.priority, pi));
                }
            }
            let Some((s, _, pi)) = hit else {
                return Err(Error::Generation(format!(
                    "ray through pixel ({r}, {c}) of view {view} misses every plane"
                )));
            };
            let i = r * w + c;
            // `ray` has unit z, so the ray parameter is the camera-frame depth.
            depth[i] = s;
            let point = center + dir * s;
            scene.planes[pi].color(&point, channels, &mut image[i * channels..(i + 1) * channels]);
        }
    }
    Ok((
        ImageGrid::new(h, w, channels, image)?,
        DepthGrid::new(h, w, depth)?,
    ))
}

/// Parameters for random room scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels for both axes.
    pub focal: f64,
    /// Number of adjacent views (besides the target).
    pub views: usize,
    pub min_baseline: f64,
    pub max_baseline: f64,
    /// Probability that a plane gets a near-uniform texture.
    pub flat_probability: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            focal: 56.0,
            views: 2,
            min_baseline: 0.1,
            max_baseline: 0.2,
            flat_probability: 0.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| Error::Config {
            key: format!("scene.{key}"),
            message: message.into(),
        };
        if self.width < 8 || self.height < 8 {
            return Err(bad("width", "image must be at least 8×8"));
        }
        if !(self.focal > 0.0) {
            return Err(bad("focal", "must be positive"));
        }
        if self.views == 0 {
            return Err(bad("views", "need at least one adjacent view"));
        }
        if !(self.min_baseline > 0.0 && self.min_baseline <= self.max_baseline && self.max_baseline <= 0.3) {
            return Err(bad("min_baseline", "need 0 < min_baseline <= max_baseline <= 0.3"));
        }
        if !(0.0..=1.0).contains(&self.flat_probability) {
            return Err(bad("flat_probability", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Texture contrast used for near-uniform planes. SSIM windows over such a
/// plane are dominated by the stabilizing constants, so the photometric
/// residual cannot tell depth hypotheses apart there.
pub const FLAT_CONTRAST: f64 = 0.004;

/// Draws a room of 2–4 planes with the given number of adjacent views.
pub fn random_scene(spec: &SceneSpec, seed: u64) -> Result<PlanarScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let camera = CameraIntrinsics::new(
        spec.focal,
        spec.focal,
        (spec.width as f64 - 1.0) / 2.0,
        (spec.height as f64 - 1.0) / 2.0,
        spec.width,
        spec.height,
    )?;
    let tilt = |rng: &mut ChaCha8Rng, amount: f64| rng.random_range(-amount..amount);

    let mut planes = Vec::new();
    let mut push = |rng: &mut ChaCha8Rng, normal: Vector3<f64>, offset: f64| {
        let flat = rng.random::<f64>() < spec.flat_probability;
        let contrast = if flat {
            FLAT_CONTRAST
        } else {
            rng.random_range(0.18..0.32)
        };
        let priority = planes.len() as u32;
        planes.push(Plane {
            normal: normal.normalize(),
            offset,
            texture_seed: rng.random(),
            contrast,
            priority,
        });
    };

    // Back wall, always present so every ray terminates.
    let n = Vector3::new(tilt(&mut rng, 0.35), tilt(&mut rng, 0.25), 1.0);
    let back = rng.random_range(2.4..3.4);
    push(&mut rng, n, back);
    let extra = rng.random_range(1..=3);
    let mut sides = [0usize, 1, 2, 3];
    // Partial Fisher-Yates: choose which of floor/left/right/ceiling to add.
    for i in 0..extra {
        let j = rng.random_range(i..sides.len());
        sides.swap(i, j);
    }
    for &side in &sides[..extra] {
        let depth_tilt = tilt(&mut rng, 0.3);
        let (normal, offset) = match side {
            0 => (Vector3::new(tilt(&mut rng, 0.1), 1.0, depth_tilt), rng.random_range(0.8..1.2)),
            1 => (Vector3::new(-1.0, tilt(&mut rng, 0.1), depth_tilt), rng.random_range(0.9..1.4)),
            2 => (Vector3::new(1.0, tilt(&mut rng, 0.1), depth_tilt), rng.random_range(0.9..1.4)),
            _ => (Vector3::new(tilt(&mut rng, 0.1), -1.0, depth_tilt), rng.random_range(0.9..1.3)),
        };
        push(&mut rng, normal, offset);
    }

    let mut poses = vec![RigidPose::identity()];
    for v in 0..spec.views {
        let baseline = rng.random_range(spec.min_baseline..=spec.max_baseline);
        // Alternate sides so that two views bracket the target.
        let side = if v % 2 == 0 { 1.0 } else { -1.0 };
        let angle = rng.random_range(-0.35..0.35) + if v >= 2 { std::f64::consts::FRAC_PI_2 } else { 0.0 };
        let dir = Vector3::new(side * angle.cos(), side * angle.sin(), rng.random_range(-0.2..0.2));
        let center = dir.normalize() * baseline;
        let rotation = Vector3::new(
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.01..0.01),
        );
        poses.push(RigidPose::from_camera_center(rotation, center));
    }
    Ok(PlanarScene {
        camera,
        planes,
        poses,
    })
}

/// Keeps `⌊density·H·W⌋` uniformly drawn pixels of `ground_truth`.
pub fn sample_sparse(ground_truth: &DepthGrid, density: f64, seed: u64) -> Result<DepthGrid> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::invalid(format!("density {density} outside (0, 1]")));
    }
    let n = ground_truth.len();
    let count = (density * n as f64).floor() as usize;
    if count == 0 {
        return Err(Error::invalid(format!(
            "density {density} keeps no points of a {n}-pixel grid"
        )));
    }
    // A prefix of one seeded permutation, so sparser samples nest inside
    // denser ones drawn with the same seed.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut data = vec![0.0; n];
    for &i in &order[..count] {
        data[i] = ground_truth.data()[i];
    }
    let (h, w) = ground_truth.dims();
    DepthGrid::new(h, w, data)
}

/// Axis-aligned pixel rectangle `[row, row+rows) × [col, col+cols)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Rect {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row && r < self.row + self.rows && c >= self.col && c < self.col + self.cols
    }

    pub fn overlaps(&self, other: &Rect) -> bool {
        self.row < other.row + other.rows
            && other.row < self.row + self.rows
            && self.col < other.col + other.cols
            && other.col < self.col + self.cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    /// Multiply every depth by `magnitude`.
    Scale,
    /// Add `magnitude` meters inside the region.
    RegionalBias,
    /// Add zero-mean Gaussian noise with standard deviation `magnitude`.
    Noise,
    /// Box blur with radius `magnitude` pixels.
    Smoothing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub mode: Corruption,
    pub magnitude: f64,
    pub seed: u64,
    pub region: Option<Rect>,
}

/// Derives a teacher from `depth` by applying one corruption. Results are
/// floored at [`TEACHER_DEPTH_FLOOR`].
pub fn make_teacher(depth: &DepthGrid, spec: &CorruptionSpec, id: usize) -> Result<TeacherHypothesis> {
    if !spec.magnitude.is_finite() {
        return Err(Error::invalid("corruption magnitude must be finite"));
    }
    let (h, w) = depth.dims();
    if let Some(rect) = spec.region {
        if rect.row + rect.rows > h || rect.col + rect.cols > w {
            return Err(Error::invalid("corruption region outside the image"));
        }
    }
    let inside = |r: usize, c: usize| spec.region.is_none_or(|rect| rect.contains(r, c));
    let src = depth.data();
    let mut out = src.to_vec();
    match spec.mode {
        Corruption::Scale => {
            for r in 0..h {
                for c in 0..w {
                    if inside(r, c) {
                        out[r * w + c] *= spec.magnitude;
                    }
                }
            }
        }
        Corruption::RegionalBias => {
            for r in 0..h {
                for c in 0..w {
                    if inside(r, c) {
                        out[r * w + c] += spec.magnitude;
                    }
                }
            }
        }
        Corruption::Noise => {
            let normal = Normal::new(0.0, spec.magnitude.abs())
                .map_err(|e| Error::invalid(format!("noise: {e}")))?;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            for r in 0..h {
                for c in 0..w {
                    let n = normal.sample(&mut rng);
                    if inside(r, c) {
                        out[r * w + c] += n;
                    }
                }
            }
        }
        Corruption::Smoothing => {
            let radius = spec.magnitude.round().max(0.0) as usize;
            for r in 0..h {
                for c in 0..w {
                    if !inside(r, c) {
                        continue;
                    }
                    let mut sum = 0.0;
                    let mut n = 0usize;
                    for wr in r.saturating_sub(radius)..=(r + radius).min(h - 1) {
                        for wc in c.saturating_sub(radius)..=(c + radius).min(w - 1) {
                            sum += src[wr * w + wc];
                            n += 1;
                        }
                    }
                    out[r * w + c] = sum / n as f64;
                }
            }
        }
    }
    for d in &mut out {
        *d = d.max(TEACHER_DEPTH_FLOOR);
    }
    Ok(TeacherHypothesis {
        id,
        depth: DepthGrid::new(h, w, out)?,
    })
}

/// Preset teacher ensembles with known error modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherSuite {
    /// One teacher equal to ground truth.
    Perfect,
    /// Two teachers biased on disjoint rectangles.
    Disjoint,
    /// The disjoint pair plus a 1.5× scaled twin of the first teacher.
    Complementary,
    /// Three teachers with σ = 2 m Gaussian noise.
    Noisy,
}

impl std::str::FromStr for TeacherSuite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "perfect" => Ok(Self::Perfect),
            "disjoint" => Ok(Self::Disjoint),
            "complementary" => Ok(Self::Complementary),
            "noisy" => Ok(Self::Noisy),
            other => Err(Error::invalid(format!("unknown teacher suite {other:?}"))),
        }
    }
}

/// Two disjoint bias rectangles, one in each half of the image.
fn disjoint_regions(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Rect, Rect) {
    let half = w / 2;
    let mut draw = |col0: usize, span: usize| {
        let cols = rng.random_range(span * 2 / 3..=span);
        let col = col0 + rng.random_range(0..=span - cols);
        let rows = rng.random_range(h / 2..=h * 3 / 4);
        let row = rng.random_range(0..=h - rows);
        Rect { row, col, rows, cols }
    };
    let a = draw(0, half);
    let b = draw(half, w - half);
    (a, b)
}

/// Builds the teachers of `suite` from ground truth.
pub fn build_teachers(suite: TeacherSuite, ground_truth: &DepthGrid, seed: u64) -> Result<Vec<TeacherHypothesis>> {
    let (h, w) = ground_truth.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x7EAC_4E55));
    let spec = |mode, magnitude, seed, region| CorruptionSpec {
        mode,
        magnitude,
        seed,
        region,
    };
    let mut teachers = Vec::new();
    match suite {
        TeacherSuite::Perfect => {
            teachers.push(make_teacher(ground_truth, &spec(Corruption::Scale, 1.0, 0, None), 1)?);
        }
        TeacherSuite::Disjoint | TeacherSuite::Complementary => {
            let (a, b) = disjoint_regions(&mut rng, h, w);
            let bias_a = rng.random_range(0.5..0.8);
            let bias_b = -rng.random_range(0.5..0.8);
            teachers.push(make_teacher(ground_truth, &spec(Corruption::RegionalBias, bias_a, 0, Some(a)), 1)?);
            teachers.push(make_teacher(ground_truth, &spec(Corruption::RegionalBias, bias_b, 0, Some(b)), 2)?);
            if suite == TeacherSuite::Complementary {
                let twin = make_teacher(&teachers[0].depth, &spec(Corruption::Scale, 1.5, 0, None), 3)?;
                teachers.push(twin);
            }
        }
        TeacherSuite::Noisy => {
            for id in 1..=3 {
                let s = rng.random();
                teachers.push(make_teacher(ground_truth, &spec(Corruption::Noise, 2.0, s, None), id)?);
            }
        }
    }
    Ok(teachers)
}

/// Everything needed to produce one synthetic bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSpec {
    pub scene: SceneSpec,
    pub density: f64,
    pub suite: TeacherSuite,
}

impl Default for GenerateSpec {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            density: 0.005,
            suite: TeacherSuite::Complementary,
        }
    }
}

/// Renders a random scene into a bundle. All stored floats are rounded to
/// `f32` so the bundle survives a file round trip unchanged.
pub fn generate_bundle(spec: &GenerateSpec, seed: u64) -> Result<SceneBundle> {
    let scene = random_scene(&spec.scene, seed)?;
    let (mut target, mut gt) = render(&scene, 0)?;
    target.round_to_f32();
    gt.round_to_f32();
    let mut views = Vec::with_capacity(scene.poses.len() - 1);
    for v in 1..scene.poses.len() {
        let (mut image, _) = render(&scene, v)?;
        image.round_to_f32();
        views.push(View {
            image,
            pose: scene.poses[v],
        });
    }
    let sparse = sample_sparse(&gt, spec.density, splitmix64(seed ^ 0x5BA5_5E))?;
    let mut teachers = build_teachers(spec.suite, &gt, seed)?;
    for t in &mut teachers {
        t.depth.round_to_f32();
    }
    let bundle = SceneBundle {
        intrinsics: scene.camera,
        target,
        views,
        sparse,
        ground_truth: Some(gt),
        teachers,
    };
    bundle.validate()?;
    Ok(bundle)
}
