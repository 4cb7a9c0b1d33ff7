//! Answer-generation and text-embedding backends.

use std::io::Cursor;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{PerceptionError, Question};
use crate::hashing::{derive_seed, sha256_hex};

/// An image as seen by a vision-language backend: its content hash plus
/// encoded bytes for transport.
#[derive(Clone, Debug)]
pub struct PerceptionImage {
    sha256: String,
    bytes: Vec<u8>,
    mime: &'static str,
}

impl PerceptionImage {
    /// Hash is taken over the file bytes as stored on disk.
    pub fn from_file(path: &Path) -> Result<Self, PerceptionError> {
        let bytes = std::fs::read(path)?;
        let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("png") => "image/png",
            Some("bmp") => "image/bmp",
            Some("tif" | "tiff") => "image/tiff",
            Some("jpg" | "jpeg") => "image/jpeg",
            _ => "application/octet-stream",
        };
        Ok(Self { sha256: sha256_hex(&bytes), bytes, mime })
    }

    /// Quantize a `[0,1]` gray image to 8 bits and encode it as PNG; the hash
    /// is taken over the PNG bytes.
    pub fn from_gray(width: usize, height: usize, pixels: &[f64]) -> Result<Self, PerceptionError> {
        assert_eq!(width * height, pixels.len());
        let raw: Vec<u8> = pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let img = image::GrayImage::from_raw(width as u32, height as u32, raw).expect("buffer sized above");
        let mut bytes = Vec::new();
        img.write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|e| PerceptionError::Protocol(format!("png encoding failed: {e}")))?;
        Ok(Self { sha256: sha256_hex(&bytes), bytes, mime: "image/png" })
    }

    pub fn sha256(&self) -> &str {
        &self.sha256
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn mime(&self) -> &'static str {
        self.mime
    }
}

/// Answers one question about one image.
pub trait AnswerBackend: Sync {
    /// Stable identifier, part of the answer-cache key.
    fn id(&self) -> String;
    fn answer(&self, image: &PerceptionImage, question: &Question) -> Result<String, PerceptionError>;
    /// Upper bound on simultaneous requests.
    fn max_concurrency(&self) -> usize {
        1
    }
}

/// Maps strings to fixed-dimension embedding vectors.
pub trait TextEncoder: Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, PerceptionError>;
}

const REGIONS: [&str; 6] = ["upper left", "upper right", "center", "lower left", "lower right", "horizon"];
const OBJECTS: [&str; 8] = ["person", "car", "truck", "bicycle", "building", "tree", "lamp post", "sign"];
const BACKGROUNDS: [&str; 5] = ["dark road", "sky", "foliage", "wall", "open field"];
const DETAILS: [&str; 6] =
    ["window frames", "road markings", "text on a sign", "leaf texture", "brick patterns", "fence wires"];
const SCENES: [&str; 5] = ["street", "parking lot", "campus path", "highway", "riverside"];
const TIMES: [&str; 4] = ["night", "dusk", "daytime", "foggy morning"];

/// Offline answer generator: template sentences filled from draws seeded by
/// (seed, image hash, question id). Counts calls for cache tests.
#[derive(Debug)]
pub struct StubAnswerBackend {
    seed: u64,
    calls: AtomicUsize,
}

impl StubAnswerBackend {
    pub fn new(seed: u64) -> Self {
        Self { seed, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    words[rng.random_range(0..words.len())]
}

impl AnswerBackend for StubAnswerBackend {
    fn id(&self) -> String {
        format!("stub-vlm:{}", self.seed)
    }

    fn answer(&self, image: &PerceptionImage, question: &Question) -> Result<String, PerceptionError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            &self.seed.to_le_bytes(),
            image.sha256().as_bytes(),
            &[question.id],
        ]));
        let text = match question.id {
            1 => format!(
                "The {} region has the highest contrast, where a {} stands out against the {}.",
                pick(&mut rng, &REGIONS),
                pick(&mut rng, &OBJECTS),
                pick(&mut rng, &BACKGROUNDS)
            ),
            2 => format!(
                "The {} area contains the most detail, including {} and {}.",
                pick(&mut rng, &REGIONS),
                pick(&mut rng, &DETAILS),
                pick(&mut rng, &DETAILS)
            ),
            3 => format!(
                "Significant targets are {} {}s and a {} near the {}.",
                rng.random_range(1..6),
                pick(&mut rng, &OBJECTS),
                pick(&mut rng, &OBJECTS),
                pick(&mut rng, &REGIONS)
            ),
            _ => format!(
                "The image shows a {} at {} with a {}, a {} and a {} in the background.",
                pick(&mut rng, &SCENES),
                pick(&mut rng, &TIMES),
                pick(&mut rng, &OBJECTS),
                pick(&mut rng, &OBJECTS),
                pick(&mut rng, &BACKGROUNDS)
            ),
        };
        Ok(text)
    }
}

/// Offline text encoder: unit-norm Gaussian vectors seeded by (seed, text).
#[derive(Clone, Debug)]
pub struct StubTextEncoder {
    seed: u64,
    dim: usize,
}

impl StubTextEncoder {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[&self.seed.to_le_bytes(), text.as_bytes()]));
        let v: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    }
}

impl TextEncoder for StubTextEncoder {
    fn id(&self) -> String {
        format!("stub-text:{}:{}", self.seed, self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, PerceptionError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}
