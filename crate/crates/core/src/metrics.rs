//! Fusion quality metrics between a fused image `F` and sources `A`, `B`.
//!
//! Images are single-channel planes on the 0–255 scale. Two-source metrics
//! average the `(F, A)` and `(F, B)` scores.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::numerics::{self, NumericsError, Tape, Tensor, SOBEL_X, SOBEL_Y};
use crate::raster;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const PEAK: f64 = 255.0;

pub const QABF_GAMMA_G: f64 = 0.9994;
pub const QABF_KAPPA_G: f64 = -15.0;
pub const QABF_SIGMA_G: f64 = 0.5;
pub const QABF_GAMMA_A: f64 = 0.9879;
pub const QABF_KAPPA_A: f64 = -22.0;
pub const QABF_SIGMA_A: f64 = 0.8;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("image shapes differ: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("image {0}x{1} is too small (need at least {2}x{2})")]
    TooSmall(usize, usize, usize),
    #[error("no complete image triples to evaluate")]
    Empty,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major single-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(height * width, data.len(), "plane size");
        Self { height, width, data }
    }

    /// Scale a `[0,1]` image to the 0–255 range.
    pub fn from_unit(height: usize, width: usize, unit: &[f64]) -> Self {
        Self::new(height, width, unit.iter().map(|v| v * PEAK).collect())
    }

    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn at(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.data[y * self.width + x]
    }
}

fn same_shape(f: &Plane, others: &[&Plane]) -> Result<(), MetricsError> {
    for o in others {
        if o.dims() != f.dims() {
            return Err(MetricsError::Shape(f.dims(), o.dims()));
        }
    }
    Ok(())
}

fn mse_pair(a: &Plane, b: &Plane) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64
}

pub fn mse(f: &Plane, a: &Plane, b: &Plane) -> Result<f64, MetricsError> {
    same_shape(f, &[a, b])?;
    Ok((mse_pair(f, a) + mse_pair(f, b)) / 2.0)
}

/// `10·log10(255² / mse)`, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (PEAK * PEAK / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(f: &Plane, a: &Plane, b: &Plane) -> Result<f64, MetricsError> {
    Ok(psnr_from_mse(mse(f, a, b)?))
}

fn ssim_pair(a: &Plane, b: &Plane) -> Result<f64, MetricsError> {
    let tape = Tape::new();
    let t = |p: &Plane| Tensor::new([1, 1, p.height, p.width], p.data.iter().map(|v| v / PEAK).collect());
    let (ta, tb) = (tape.constant(t(a)?), tape.constant(t(b)?));
    Ok(numerics::ssim(ta, tb)?.item()?)
}

pub fn ssim(f: &Plane, a: &Plane, b: &Plane) -> Result<f64, MetricsError> {
    same_shape(f, &[a, b])?;
    Ok((ssim_pair(f, a)? + ssim_pair(f, b)?) / 2.0)
}

/// Pearson correlation; 0 when either image is constant.
fn pearson(a: &Plane, b: &Plane) -> f64 {
    let n = a.data.len() as f64;
    let (ma, mb) = (a.data.iter().sum::<f64>() / n, b.data.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data.iter().zip(&b.data) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
    }
}

pub fn cc(f: &Plane, a: &Plane, b: &Plane) -> Result<f64, MetricsError> {
    same_shape(f, &[a, b])?;
    Ok((pearson(f, a) + pearson(f, b)) / 2.0)
}

/// Sobel edge strength `sqrt(sx² + sy²)` and orientation `atan(sy/sx)`
/// with replicate padding.
fn edges(p: &Plane) -> (Vec<f64>, Vec<f64>) {
    let n = p.data.len();
    let (mut g, mut alpha) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for y in 0..p.height as isize {
        for x in 0..p.width as isize {
            let (mut sx, mut sy) = (0.0, 0.0);
            for k in 0..9 {
                let v = p.at(y + k as isize / 3 - 1, x + k as isize % 3 - 1);
                sx += SOBEL_X[k] * v;
                sy += SOBEL_Y[k] * v;
            }
            g.push((sx * sx + sy * sy).sqrt());
            alpha.push(orientation(sx, sy));
        }
    }
    (g, alpha)
}

fn orientation(sx: f64, sy: f64) -> f64 {
    if sx == 0.0 {
        if sy == 0.0 {
            0.0
        } else {
            std::f64::consts::FRAC_PI_2.copysign(sy)
        }
    } else {
        (sy / sx).atan()
    }
}

fn preservation(gs: f64, as_: f64, gf: f64, af: f64) -> f64 {
    let g_rel = if gs == gf { 1.0 } else { gs.min(gf) / gs.max(gf) };
    let a_rel = 1.0 - (as_ - af).abs() / std::f64::consts::FRAC_PI_2;
    let q_g = QABF_GAMMA_G / (1.0 + (QABF_KAPPA_G * (g_rel - QABF_SIGMA_G)).exp());
    let q_a = QABF_GAMMA_A / (1.0 + (QABF_KAPPA_A * (a_rel - QABF_SIGMA_A)).exp());
    q_g * q_a
}

/// Edge-preservation score, weighted by source edge strength. 0 when
/// neither source has any edges.
pub fn qabf(f: &Plane, a: &Plane, b: &Plane) -> Result<f64, MetricsError> {
    same_shape(f, &[a, b])?;
    if f.height < 3 || f.width < 3 {
        return Err(MetricsError::TooSmall(f.height, f.width, 3));
    }
    let (gf, af) = edges(f);
    let (ga, aa) = edges(a);
    let (gb, ab) = edges(b);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..gf.len() {
        num += preservation(ga[i], aa[i], gf[i], af[i]) * ga[i] + preservation(gb[i], ab[i], gf[i], af[i]) * gb[i];
        den += ga[i] + gb[i];
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct MetricRow {
    pub file: String,
    pub mse: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub cc: f64,
    pub qabf: f64,
}

pub fn evaluate(file: impl Into<String>, f: &Plane, a: &Plane, b: &Plane) -> Result<MetricRow, MetricsError> {
    let m = mse(f, a, b)?;
    Ok(MetricRow {
        file: file.into(),
        mse: m,
        ssim: ssim(f, a, b)?,
        psnr: psnr_from_mse(m),
        cc: cc(f, a, b)?,
        qabf: qabf(f, a, b)?,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct Exclusion {
    pub file: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub mean: MetricRow,
    pub excluded: Vec<Exclusion>,
}

impl MetricReport {
    pub fn new(rows: Vec<MetricRow>, excluded: Vec<Exclusion>) -> Result<Self, MetricsError> {
        if rows.is_empty() {
            return Err(MetricsError::Empty);
        }
        let n = rows.len() as f64;
        let avg = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let mean = MetricRow {
            file: "MEAN".into(),
            mse: avg(|r| r.mse),
            ssim: avg(|r| r.ssim),
            psnr: avg(|r| r.psnr),
            cc: avg(|r| r.cc),
            qabf: avg(|r| r.qabf),
        };
        Ok(Self { rows, mean, excluded })
    }

    pub fn count(&self) -> usize {
        self.rows.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("file,mse,ssim,psnr,cc,qabf\n");
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            writeln!(out, "{},{:.6},{:.6},{:.6},{:.6},{:.6}", r.file, r.mse, r.ssim, r.psnr, r.cc, r.qabf)
                .expect("string write");
        }
        out
    }

    /// Aligned text table followed by any excluded files.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.file.len()).max().unwrap_or(0).max(4);
        let mut out =
            format!("{:<width$}  {:>10}  {:>8}  {:>8}  {:>8}  {:>8}\n", "file", "MSE", "SSIM", "PSNR", "CC", "Qabf");
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            writeln!(
                out,
                "{:<width$}  {:>10.3}  {:>8.3}  {:>8.3}  {:>8.3}  {:>8.3}",
                r.file, r.mse, r.ssim, r.psnr, r.cc, r.qabf
            )
            .expect("string write");
        }
        for e in &self.excluded {
            writeln!(out, "excluded {}: {}", e.file, e.reason).expect("string write");
        }
        out
    }
}

fn image_names(dir: &Path) -> Result<BTreeSet<String>, MetricsError> {
    let mut names = BTreeSet::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() && raster::is_image_path(&path) {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                names.insert(name.to_owned());
            }
        }
    }
    Ok(names)
}

fn load_plane(path: &Path) -> Result<Plane, String> {
    let img = raster::load(path).map_err(|e| e.to_string())?;
    Ok(Plane::from_unit(img.height, img.width, &img.luma))
}

/// Score every file name found in any of the three directories. Names
/// missing from a directory, undecodable or mismatched in size are listed
/// as exclusions. Color images are scored on BT.601 luma.
pub fn evaluate_directory(fused_dir: &Path, ir_dir: &Path, vis_dir: &Path) -> Result<MetricReport, MetricsError> {
    let dirs = [("fused", fused_dir), ("ir", ir_dir), ("vis", vis_dir)];
    let mut listed = Vec::with_capacity(3);
    for (_, d) in dirs {
        listed.push(image_names(d)?);
    }
    let all: BTreeSet<&String> = listed.iter().flatten().collect();
    let (mut rows, mut excluded) = (Vec::new(), Vec::new());
    for name in all {
        let missing: Vec<&str> =
            dirs.iter().zip(&listed).filter(|(_, l)| !l.contains(name)).map(|((k, _), _)| *k).collect();
        if !missing.is_empty() {
            excluded.push(Exclusion { file: name.clone(), reason: format!("missing in {}", missing.join(", ")) });
            continue;
        }
        let planes: Result<Vec<Plane>, String> = dirs.iter().map(|(_, d)| load_plane(&d.join(name))).collect();
        let result = planes.and_then(|p| evaluate(name.clone(), &p[0], &p[1], &p[2]).map_err(|e| e.to_string()));
        match result {
            Ok(row) => rows.push(row),
            Err(reason) => excluded.push(Exclusion { file: name.clone(), reason }),
        }
    }
    MetricReport::new(rows, excluded)
}
