//! Raster file I/O with ITU-R BT.601 luma/chroma conversion.

use std::path::Path;

use image::{DynamicImage, ImageFormat};

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("{path}: cannot decode image: {message}")]
    Decode { path: String, message: String },
    #[error("{path}: cannot encode image: {message}")]
    Encode { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Luma in `[0,1]` plus optional Cb/Cr planes on the 0–255 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct LumaImage {
    pub width: usize,
    pub height: usize,
    pub luma: Vec<f64>,
    pub chroma: Option<(Vec<f64>, Vec<f64>)>,
}

pub fn rgb_to_ycbcr(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    let cb = 128.0 - 0.168_736 * r - 0.331_264 * g + 0.5 * b;
    let cr = 128.0 + 0.5 * r - 0.418_688 * g - 0.081_312 * b;
    (y, cb, cr)
}

pub fn ycbcr_to_rgb(y: f64, cb: f64, cr: f64) -> (f64, f64, f64) {
    let r = y + 1.402 * (cr - 128.0);
    let g = y - 0.344_136 * (cb - 128.0) - 0.714_136 * (cr - 128.0);
    let b = y + 1.772 * (cb - 128.0);
    (r, g, b)
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl LumaImage {
    pub fn from_dynamic(img: &DynamicImage) -> Self {
        let (width, height) = (img.width() as usize, img.height() as usize);
        if img.color().has_color() {
            let rgb = img.to_rgb8();
            let n = width * height;
            let (mut luma, mut cb, mut cr) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
            for p in rgb.pixels() {
                let (y, u, v) = rgb_to_ycbcr(f64::from(p[0]), f64::from(p[1]), f64::from(p[2]));
                luma.push((y / 255.0).clamp(0.0, 1.0));
                cb.push(u);
                cr.push(v);
            }
            Self { width, height, luma, chroma: Some((cb, cr)) }
        } else {
            let luma = img.to_luma8().pixels().map(|p| f64::from(p[0]) / 255.0).collect();
            Self { width, height, luma, chroma: None }
        }
    }

    /// 8-bit pixels: gray, or RGB when chroma is present.
    pub fn to_dynamic(&self) -> DynamicImage {
        let (w, h) = (self.width as u32, self.height as u32);
        match &self.chroma {
            None => DynamicImage::ImageLuma8(
                image::GrayImage::from_raw(w, h, self.luma.iter().map(|&v| quantize(v)).collect())
                    .expect("sized buffer"),
            ),
            Some((cb, cr)) => {
                let mut raw = Vec::with_capacity(3 * self.luma.len());
                for ((&y, &u), &v) in self.luma.iter().zip(cb).zip(cr) {
                    let (r, g, b) = ycbcr_to_rgb(y * 255.0, u, v);
                    raw.extend([r, g, b].map(|c| c.clamp(0.0, 255.0).round() as u8));
                }
                DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, raw).expect("sized buffer"))
            }
        }
    }
}

pub fn load(path: &Path) -> Result<LumaImage, RasterError> {
    let img = image::open(path)
        .map_err(|e| RasterError::Decode { path: path.display().to_string(), message: e.to_string() })?;
    Ok(LumaImage::from_dynamic(&img))
}

/// Encode by file extension (PNG when unknown) into a sibling temporary
/// file, then rename over `path`.
pub fn save(path: &Path, img: &LumaImage) -> Result<(), RasterError> {
    let format = ImageFormat::from_path(path).unwrap_or(ImageFormat::Png);
    let mut bytes = Vec::new();
    img.to_dynamic()
        .write_to(&mut std::io::Cursor::new(&mut bytes), format)
        .map_err(|e| RasterError::Encode { path: path.display().to_string(), message: e.to_string() })?;
    crate::fusenet::write_atomic(path, &bytes)?;
    Ok(())
}

pub fn is_image_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .is_some_and(|e| matches!(e.as_str(), "png" | "bmp" | "tif" | "tiff" | "pgm" | "ppm" | "pnm"))
}
