//! Registered infrared/visible pairs on disk, and a synthetic stand-in
//! dataset.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PipelineError;
use crate::hashing::derive_seed;
use crate::perception::PerceptionImage;
use crate::raster::{self, LumaImage};

/// One registered pair: infrared and visible luma in `[0,1]`, row-major.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub ir: Vec<f64>,
    pub vis: Vec<f64>,
    /// Cb/Cr of a color visible image, 0–255 scale.
    pub vis_chroma: Option<(Vec<f64>, Vec<f64>)>,
    pub ir_path: PathBuf,
    pub vis_path: PathBuf,
    /// Source files as sent to the answer backend; hashes cover file bytes.
    pub ir_source: PerceptionImage,
    pub vis_source: PerceptionImage,
}

impl ImagePair {
    pub fn load(ir_path: &Path, vis_path: &Path) -> Result<Self, PipelineError> {
        let ir = raster::load(ir_path)?;
        let vis = raster::load(vis_path)?;
        if (ir.width, ir.height) != (vis.width, vis.height) {
            return Err(PipelineError::Dataset(format!(
                "size mismatch: {} is {}x{} but {} is {}x{}",
                ir_path.display(),
                ir.width,
                ir.height,
                vis_path.display(),
                vis.width,
                vis.height
            )));
        }
        let name = ir_path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_owned();
        Ok(Self {
            name,
            height: ir.height,
            width: ir.width,
            ir: ir.luma,
            vis: vis.luma,
            vis_chroma: vis.chroma,
            ir_path: ir_path.to_owned(),
            vis_path: vis_path.to_owned(),
            ir_source: PerceptionImage::from_file(ir_path)?,
            vis_source: PerceptionImage::from_file(vis_path)?,
        })
    }

    pub fn ir_sha256(&self) -> &str {
        self.ir_source.sha256()
    }

    pub fn vis_sha256(&self) -> &str {
        self.vis_source.sha256()
    }

    /// Bilinear resize of both modalities to `size×size`; chroma is dropped.
    pub fn resized(&self, size: usize) -> Self {
        if self.height == size && self.width == size {
            return self.clone();
        }
        let r = |plane: &[f64]| resize_bilinear(self.width, self.height, plane, size);
        Self { height: size, width: size, ir: r(&self.ir), vis: r(&self.vis), vis_chroma: None, ..self.clone() }
    }
}

pub fn resize_bilinear(width: usize, height: usize, plane: &[f64], size: usize) -> Vec<f64> {
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(width as u32, height as u32, plane.iter().map(|&v| v as f32).collect())
            .expect("sized plane");
    let out = image::imageops::resize(&buf, size as u32, size as u32, image::imageops::FilterType::Triangle);
    out.into_raw().into_iter().map(|v| f64::from(v).clamp(0.0, 1.0)).collect()
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>, PipelineError> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| PipelineError::Dataset(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        if path.is_file() && raster::is_image_path(&path) {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_owned(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Pairs from `dir/ir` and `dir/vis` matched by file name, in name order.
/// Unmatched files are skipped with a warning.
pub fn load_dataset(dir: &Path) -> Result<Vec<ImagePair>, PipelineError> {
    let ir = list_images(&dir.join("ir"))?;
    let vis = list_images(&dir.join("vis"))?;
    for name in ir.keys().filter(|n| !vis.contains_key(*n)) {
        log::warn!("{}: no visible counterpart, skipped", dir.join("ir").join(name).display());
    }
    for name in vis.keys().filter(|n| !ir.contains_key(*n)) {
        log::warn!("{}: no infrared counterpart, skipped", dir.join("vis").join(name).display());
    }
    ir.iter().filter_map(|(name, p)| vis.get(name).map(|v| ImagePair::load(p, v))).collect()
}

/// Value noise: bilinear interpolation of a seeded `cells×cells` lattice.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Vec<f64> {
    let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random::<f64>()).collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let fy = y as f64 / size as f64 * cells as f64;
            let fx = x as f64 / size as f64 * cells as f64;
            let (iy, ix) = (fy as usize, fx as usize);
            let (ty, tx) = (fy - iy as f64, fx - ix as f64);
            let at = |r: usize, c: usize| lattice[r * (cells + 1) + c];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn normalize(v: &mut [f64], lo: f64, hi: f64) {
    let (min, max) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = (max - min).max(1e-12);
    v.iter_mut().for_each(|x| *x = lo + (hi - lo) * (*x - min) / span);
}

/// Visible: oriented sinusoids at several frequencies plus bright
/// rectangles. Infrared: faint low-frequency background with smooth warm
/// blobs.
pub fn synthesize_pair(size: usize, seed: u64, index: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(&[b"synth", &seed.to_le_bytes(), &(index as u64).to_le_bytes()]));
    let s = size as f64;
    let mut vis = vec![0.0; size * size];
    for octave in 0..4 {
        let freq = (2.0 + rng.random::<f64>() * 2.0) * 2f64.powi(octave) / s;
        let theta = rng.random::<f64>() * TAU;
        let phase = rng.random::<f64>() * TAU;
        let amp = 0.6f64.powi(octave);
        let (c, sn) = (theta.cos(), theta.sin());
        for y in 0..size {
            for x in 0..size {
                vis[y * size + x] += amp * (TAU * freq * (c * x as f64 + sn * y as f64) + phase).sin();
            }
        }
    }
    for _ in 0..3 {
        let (w, h) = (rng.random_range(size / 8..size / 3), rng.random_range(size / 8..size / 3));
        let (x0, y0) = (rng.random_range(0..size - w), rng.random_range(0..size - h));
        let level = rng.random_range(-1.0..1.5);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                vis[y * size + x] = 0.5 * vis[y * size + x] + level;
            }
        }
    }
    normalize(&mut vis, 0.05, 0.95);

    let mut ir: Vec<f64> = value_noise(&mut rng, size, 3).into_iter().map(|v| 0.15 + 0.2 * v).collect();
    let texture = value_noise(&mut rng, size, 16);
    for (v, t) in ir.iter_mut().zip(&texture) {
        *v += 0.03 * t;
    }
    let blobs = rng.random_range(2..5);
    for _ in 0..blobs {
        let (cx, cy) = (rng.random::<f64>() * s, rng.random::<f64>() * s);
        let (sx, sy) = ((0.04 + rng.random::<f64>() * 0.08) * s, (0.04 + rng.random::<f64>() * 0.12) * s);
        let heat = 0.5 + rng.random::<f64>() * 0.45;
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = ((x as f64 - cx) / sx, (y as f64 - cy) / sy);
                ir[y * size + x] += heat * (-0.5 * (dx * dx + dy * dy)).exp();
            }
        }
    }
    ir.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    (ir, vis)
}

/// Write `n` pairs as `dir/ir/NNNN.png` and `dir/vis/NNNN.png`.
pub fn make_synthetic_dataset(dir: &Path, n: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>, PipelineError> {
    if size < 16 {
        return Err(PipelineError::Dataset(format!("synthetic size {size} is below 16")));
    }
    let mut written = Vec::with_capacity(2 * n);
    for sub in ["ir", "vis"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    for i in 0..n {
        let (ir, vis) = synthesize_pair(size, seed, i);
        for (sub, plane) in [("ir", ir), ("vis", vis)] {
            let path = dir.join(sub).join(format!("{i:04}.png"));
            raster::save(&path, &LumaImage { width: size, height: size, luma: plane, chroma: None })?;
            written.push(path);
        }
    }
    Ok(written)
}
