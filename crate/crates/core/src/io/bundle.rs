//! Bundle and product directories.
//!
//! Each directory holds PFM grids plus a line-oriented `key=value` manifest.
//! Grid entries read `file WxHxC`; poses and intrinsics are written with
//! round-trip float formatting so they re-read bit-exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};

use crate::ensemble::{DistillationProduct, TeacherHypothesis, TeacherScore};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, RigidPose};
use crate::grid::ErrorMap;
use crate::io::pfm::{read_pfm, write_pfm, FloatMap};
use crate::io::{create_dir_all, read_text, write_atomic};
use crate::scene::{SceneBundle, View};
use crate::solver::SolveTrace;

pub const BUNDLE_MANIFEST: &str = "manifest.txt";
pub const PRODUCT_MANIFEST: &str = "product.txt";
const BUNDLE_FORMAT: &str = "mondi-bundle/1";
const PRODUCT_FORMAT: &str = "mondi-product/1";

struct Manifest {
    path: PathBuf,
    entries: BTreeMap<String, (usize, String)>,
}

impl Manifest {
    fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len();
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: start,
                    message: "expected key=value".into(),
                });
            };
            let key = key.trim().to_string();
            if entries.insert(key.clone(), (start, value.trim().to_string())).is_some() {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: start,
                    message: format!("duplicate key {key:?}"),
                });
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            entries,
        })
    }

    fn fail(&self, offset: usize, message: String) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset,
            message,
        }
    }

    fn get(&self, key: &str) -> Result<(usize, &str)> {
        self.entries
            .get(key)
            .map(|(o, v)| (*o, v.as_str()))
            .ok_or_else(|| self.fail(0, format!("missing key {key:?}")))
    }

    fn has(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let (offset, raw) = self.get(key)?;
        raw.parse()
            .map_err(|_| self.fail(offset, format!("cannot parse {key}={raw:?}")))
    }

    fn floats(&self, key: &str, n: usize) -> Result<Vec<f64>> {
        let (offset, raw) = self.get(key)?;
        let values: Vec<f64> = raw
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| self.fail(offset, format!("{key} must hold numbers")))?;
        if values.len() != n {
            return Err(self.fail(offset, format!("{key} must hold {n} numbers, found {}", values.len())));
        }
        Ok(values)
    }

    /// Reads a grid entry `file WxHxC` relative to `dir` and checks the
    /// declared shape against the file.
    fn grid(&self, dir: &Path, key: &str) -> Result<FloatMap> {
        let (offset, raw) = self.get(key)?;
        let mut parts = raw.split_whitespace();
        let (Some(file), Some(shape), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(self.fail(offset, format!("{key} must read `file WxHxC`")));
        };
        let dims: Vec<usize> = shape
            .split('x')
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| self.fail(offset, format!("bad shape {shape:?}")))?;
        let [w, h, c] = dims[..] else {
            return Err(self.fail(offset, format!("bad shape {shape:?}")));
        };
        let map = read_pfm(&dir.join(file))?;
        if (map.width, map.height, map.channels) != (w, h, c) {
            return Err(self.fail(
                offset,
                format!("{file} is {}x{}x{}, manifest says {shape}", map.width, map.height, map.channels),
            ));
        }
        Ok(map)
    }
}

fn floats_line(values: impl IntoIterator<Item = f64>) -> String {
    values
        .into_iter()
        .map(|v| format!("{v:?}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn grid_entry(out: &mut String, dir: &Path, key: &str, file: &str, map: &FloatMap) -> Result<()> {
    write_pfm(&dir.join(file), map)?;
    let _ = writeln!(out, "{key}={file} {}x{}x{}", map.width, map.height, map.channels);
    Ok(())
}

/// Writes every grid of `bundle` as PFM plus `manifest.txt`.
///
/// Values are stored as `f32`; bundles whose values are already
/// `f32`-representable re-read identically.
pub fn write_bundle(dir: &Path, bundle: &SceneBundle) -> Result<()> {
    bundle.validate()?;
    create_dir_all(dir)?;
    let (h, w) = bundle.dims();
    let k = &bundle.intrinsics;
    let mut m = String::new();
    let _ = writeln!(m, "format={BUNDLE_FORMAT}");
    let _ = writeln!(m, "height={h}");
    let _ = writeln!(m, "width={w}");
    let _ = writeln!(m, "intrinsics={}", floats_line([k.fx, k.fy, k.cx, k.cy]));
    grid_entry(&mut m, dir, "target", "target.pfm", &FloatMap::from_image(&bundle.target)?)?;
    let _ = writeln!(m, "views={}", bundle.views.len());
    for (i, view) in bundle.views.iter().enumerate() {
        let n = i + 1;
        grid_entry(&mut m, dir, &format!("view.{n}"), &format!("view_{n}.pfm"), &FloatMap::from_image(&view.image)?)?;
        let r = view.pose.rotation();
        let rows = (0..3).flat_map(|i| (0..3).map(move |j| r[(i, j)]));
        let _ = writeln!(m, "view.{n}.rotation={}", floats_line(rows));
        let t = view.pose.translation_vector();
        let _ = writeln!(m, "view.{n}.translation={}", floats_line(t.iter().copied()));
    }
    grid_entry(&mut m, dir, "sparse", "sparse.pfm", &FloatMap::from_depth(&bundle.sparse))?;
    if let Some(gt) = &bundle.ground_truth {
        grid_entry(&mut m, dir, "ground_truth", "gt.pfm", &FloatMap::from_depth(gt))?;
    }
    let _ = writeln!(m, "teachers={}", bundle.teachers.len());
    for (i, t) in bundle.teachers.iter().enumerate() {
        let n = i + 1;
        grid_entry(&mut m, dir, &format!("teacher.{n}"), &format!("teacher_{n}.pfm"), &FloatMap::from_depth(&t.depth))?;
    }
    write_atomic(&dir.join(BUNDLE_MANIFEST), m.as_bytes())
}

fn check_format(m: &Manifest, expected: &str) -> Result<()> {
    let (offset, format) = m.get("format")?;
    if format != expected {
        return Err(m.fail(offset, format!("expected format {expected}, found {format:?}")));
    }
    Ok(())
}

pub fn read_bundle(dir: &Path) -> Result<SceneBundle> {
    let path = dir.join(BUNDLE_MANIFEST);
    let m = Manifest::parse(&path, &read_text(&path)?)?;
    check_format(&m, BUNDLE_FORMAT)?;
    let h: usize = m.parse_value("height")?;
    let w: usize = m.parse_value("width")?;
    let k = m.floats("intrinsics", 4)?;
    let intrinsics = CameraIntrinsics::new(k[0], k[1], k[2], k[3], w, h)?;
    let target = m.grid(dir, "target")?.into_image()?;
    let n_views: usize = m.parse_value("views")?;
    let mut views = Vec::with_capacity(n_views);
    for n in 1..=n_views {
        let image = m.grid(dir, &format!("view.{n}"))?.into_image()?;
        let r = m.floats(&format!("view.{n}.rotation"), 9)?;
        let t = m.floats(&format!("view.{n}.translation"), 3)?;
        let pose = RigidPose::new(Matrix3::from_row_slice(&r), Vector3::new(t[0], t[1], t[2]))?;
        views.push(View { image, pose });
    }
    let sparse = m.grid(dir, "sparse")?.into_depth()?;
    let ground_truth = if m.has("ground_truth") {
        Some(m.grid(dir, "ground_truth")?.into_depth()?)
    } else {
        None
    };
    let n_teachers: usize = m.parse_value("teachers")?;
    let mut teachers = Vec::with_capacity(n_teachers);
    for id in 1..=n_teachers {
        let depth = m.grid(dir, &format!("teacher.{id}"))?.into_depth()?;
        teachers.push(TeacherHypothesis { id, depth });
    }
    let bundle = SceneBundle {
        intrinsics,
        target,
        views,
        sparse,
        ground_truth,
        teachers,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes distilled depth, residual (invalid = -1), monitor and selection
/// (0 = none) maps plus per-teacher scores.
pub fn write_product(dir: &Path, product: &DistillationProduct) -> Result<()> {
    create_dir_all(dir)?;
    let (h, w) = product.dims();
    let mut m = String::new();
    let _ = writeln!(m, "format={PRODUCT_FORMAT}");
    let _ = writeln!(m, "height={h}");
    let _ = writeln!(m, "width={w}");
    grid_entry(&mut m, dir, "distilled", "distilled.pfm", &FloatMap::from_depth(&product.distilled))?;
    let residual: Vec<f64> = (0..h * w)
        .map(|i| product.residual.at(i).unwrap_or(-1.0))
        .collect();
    grid_entry(&mut m, dir, "residual", "residual.pfm", &FloatMap::from_values(h, w, &residual)?)?;
    grid_entry(&mut m, dir, "monitor", "monitor.pfm", &FloatMap::from_values(h, w, &product.monitor)?)?;
    let selection: Vec<f64> = product
        .selection
        .iter()
        .map(|s| s.map_or(0.0, |i| i as f64))
        .collect();
    grid_entry(&mut m, dir, "selection", "selection.pfm", &FloatMap::from_values(h, w, &selection)?)?;
    let _ = writeln!(m, "scores={}", product.scores.len());
    for (i, s) in product.scores.iter().enumerate() {
        let _ = writeln!(m, "score.{}={}", i + 1, floats_line([s.z_score, s.beta]));
    }
    write_atomic(&dir.join(PRODUCT_MANIFEST), m.as_bytes())
}

pub fn read_product(dir: &Path) -> Result<DistillationProduct> {
    let path = dir.join(PRODUCT_MANIFEST);
    let m = Manifest::parse(&path, &read_text(&path)?)?;
    check_format(&m, PRODUCT_FORMAT)?;
    let h: usize = m.parse_value("height")?;
    let w: usize = m.parse_value("width")?;
    let distilled = m.grid(dir, "distilled")?.into_depth()?;
    if distilled.dims() != (h, w) {
        return Err(Error::DimensionMismatch {
            expected: (h, w),
            actual: distilled.dims(),
        });
    }
    let residual_raw = m.grid(dir, "residual")?.to_f64();
    let monitor = m.grid(dir, "monitor")?.to_f64();
    let selection_raw = m.grid(dir, "selection")?.to_f64();
    if residual_raw.len() != h * w || monitor.len() != h * w || selection_raw.len() != h * w {
        return Err(Error::invalid("product maps differ in size"));
    }
    let valid: Vec<bool> = residual_raw.iter().map(|&v| v >= 0.0).collect();
    let residual = ErrorMap::new(h, w, residual_raw, valid)?;
    let selection = selection_raw
        .iter()
        .map(|&s| {
            if s == 0.0 {
                Ok(None)
            } else if s >= 1.0 && s.fract() == 0.0 {
                Ok(Some(s as usize))
            } else {
                Err(Error::invalid(format!("selection value {s} is not a teacher index")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let n: usize = m.parse_value("scores")?;
    let mut scores = Vec::with_capacity(n);
    for i in 1..=n {
        let v = m.floats(&format!("score.{i}"), 2)?;
        scores.push(TeacherScore {
            z_score: v[0],
            beta: v[1],
        });
    }
    Ok(DistillationProduct {
        distilled,
        residual,
        monitor,
        selection,
        scores,
    })
}

/// Comma-separated loss trace.
pub fn write_trace(path: &Path, trace: &SolveTrace) -> Result<()> {
    let mut out = String::from("iteration,md,co,st,sm,total\n");
    for e in &trace.entries {
        let _ = writeln!(out, "{},{:?},{:?},{:?},{:?},{:?}", e.iteration, e.md, e.co, e.st, e.sm, e.total);
    }
    write_atomic(path, out.as_bytes())
}
