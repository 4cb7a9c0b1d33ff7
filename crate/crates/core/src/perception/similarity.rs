//! Batch similarity distributions: for image `m` and question `j`, a softmax
//! over the batch of cosines between `m`'s image embedding and each sample's
//! answer-`j` text embedding.

use super::PerceptionError;
use crate::numerics::{Tensor, Var};

/// One question's distribution over a batch, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityDistribution {
    question: usize,
    probs: Vec<f64>,
}

impl SimilarityDistribution {
    /// `question` is the 0-based question index.
    pub fn new(question: usize, probs: Vec<f64>) -> Result<Self, PerceptionError> {
        let total: f64 = probs.iter().sum();
        if probs.len() < 2 {
            return Err(PerceptionError::DegenerateBatch(probs.len()));
        }
        if probs.iter().any(|p| !(*p > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(PerceptionError::Degenerate(format!("not a distribution: {probs:?}")));
        }
        Ok(Self { question, probs })
    }

    pub fn question(&self) -> usize {
        self.question
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn l1_distance(&self, other: &Self) -> f64 {
        self.probs.iter().zip(&other.probs).map(|(a, b)| (a - b).abs()).sum()
    }
}

fn check_batch(texts: &Tensor) -> Result<(usize, usize), PerceptionError> {
    match texts.shape() {
        &[b, d] if b >= 2 => Ok((b, d)),
        &[b, _] => Err(PerceptionError::DegenerateBatch(b)),
        s => Err(PerceptionError::Degenerate(format!("text batch must be B×d, got {s:?}"))),
    }
}

/// Distribution for one image embedding (length `d`) against the `B×d`
/// answer embeddings of one question. Differentiable in the image embedding.
pub fn similarity_distribution<'t>(image: Var<'t>, texts: &Tensor) -> Result<Var<'t>, PerceptionError> {
    let (_, d) = check_batch(texts)?;
    if image.shape() != [d] {
        return Err(PerceptionError::Dimension { expected: d, got: image.value().numel() });
    }
    let s = batch_similarity(image.reshape([1, d])?, texts)?;
    let b = texts.shape()[0];
    Ok(s.reshape([b])?)
}

/// Row `m` of the result is the distribution for image embedding `m`
/// (`images` is `N×d`) over the `B×d` text batch.
pub fn batch_similarity<'t>(images: Var<'t>, texts: &Tensor) -> Result<Var<'t>, PerceptionError> {
    let (_, d) = check_batch(texts)?;
    let shape = images.shape();
    if shape.len() != 2 || shape[1] != d {
        return Err(PerceptionError::Dimension { expected: d, got: shape.last().copied().unwrap_or(0) });
    }
    let tape = images.tape();
    let t = tape.constant(texts.clone()).normalize_rows()?.transpose()?;
    let cos = images.normalize_rows()?.matmul(t)?;
    Ok(cos.softmax_rows()?)
}
