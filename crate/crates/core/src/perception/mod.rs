//! Four-question perception: answers from a vision-language backend, text
//! and image embeddings in a shared space, and batch similarity
//! distributions.

mod backend;
mod cache;
mod encoder;
mod http;
mod questions;
mod similarity;
mod tokenizer;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use backend::{AnswerBackend, PerceptionImage, StubAnswerBackend, StubTextEncoder, TextEncoder};
pub use cache::{load_records, AnswerCache, CacheRecord, LoadedCache};
pub use encoder::{FrozenImageEncoder, ENCODER_CHANNELS};
pub use http::{HttpAnswerBackend, HttpConfig, HttpTextEncoder, API_KEY_ENV, BASE_URL_ENV};
pub use questions::{Question, QuestionSet, DEFAULT_QUESTIONS, QUESTION_COUNT};
pub use similarity::{batch_similarity, similarity_distribution, SimilarityDistribution};
pub use tokenizer::{Tokenizer, CONTEXT_LENGTH, PAD_ID, VOCAB_SIZE};

use crate::numerics::{NumericsError, Tensor, MIN_NORM};

/// Default embedding dimension.
pub const DEFAULT_EMBED_DIM: usize = 512;

#[derive(Debug, thiserror::Error)]
pub enum PerceptionError {
    #[error("invalid question set: {0}")]
    InvalidQuestions(String),
    #[error("backend protocol error: {0}")]
    Protocol(String),
    #[error("{url}: transport failure after {attempts} attempts: {message}")]
    Transport { url: String, attempts: u32, message: String },
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("similarity needs a batch of at least 2, got {0}")]
    DegenerateBatch(usize),
    #[error("degenerate embedding: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PerceptionError {
    /// Transport failures may succeed on a later attempt or run.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::Transport { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    Ir,
    Vis,
    Fused,
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ir => "ir",
            Self::Vis => "vis",
            Self::Fused => "fused",
        })
    }
}

/// The four answers for one image with their padded token sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnswerSet {
    pub image_sha256: String,
    pub source: SourceTag,
    pub backend_id: String,
    pub answers: [String; QUESTION_COUNT],
    pub tokens: [[u32; CONTEXT_LENGTH]; QUESTION_COUNT],
}

impl AnswerSet {
    pub fn new(
        image_sha256: impl Into<String>,
        source: SourceTag,
        backend_id: impl Into<String>,
        answers: [String; QUESTION_COUNT],
        tokenizer: &Tokenizer,
    ) -> Self {
        let tokens = std::array::from_fn(|i| tokenizer.tokenize(&answers[i]));
        Self { image_sha256: image_sha256.into(), source, backend_id: backend_id.into(), answers, tokens }
    }
}

/// Text embeddings (one row per answer) and the image embedding of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticEmbeddings {
    text: Tensor,
    image: Tensor,
}

impl SemanticEmbeddings {
    /// `text` is `4×d`, `image` has length `d`; all rows finite with
    /// non-negligible norm.
    pub fn new(text: Tensor, image: Tensor) -> Result<Self, PerceptionError> {
        validate_rows(&text)?;
        let d = text.shape()[1];
        if image.shape() != [d] {
            return Err(PerceptionError::Dimension { expected: d, got: image.numel() });
        }
        validate_rows(&image.clone().reshape([1, d])?)?;
        Ok(Self { text, image })
    }

    pub fn text(&self) -> &Tensor {
        &self.text
    }

    pub fn image(&self) -> &Tensor {
        &self.image
    }

    pub fn dim(&self) -> usize {
        self.image.numel()
    }
}

fn validate_rows(t: &Tensor) -> Result<(), PerceptionError> {
    if t.ndim() != 2 || t.shape()[0] != QUESTION_COUNT && t.shape()[0] != 1 {
        return Err(PerceptionError::Degenerate(format!("unexpected embedding shape {:?}", t.shape())));
    }
    if !t.is_finite() {
        return Err(PerceptionError::Degenerate("non-finite embedding".into()));
    }
    for i in 0..t.shape()[0] {
        let norm = t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > MIN_NORM) {
            return Err(PerceptionError::Degenerate(format!("row {i} has zero norm")));
        }
    }
    Ok(())
}

/// Answers all four questions for one image, consulting the cache first.
pub fn generate_answers(
    image: &PerceptionImage,
    source: SourceTag,
    questions: &QuestionSet,
    backend: &dyn AnswerBackend,
    cache: &AnswerCache,
    tokenizer: &Tokenizer,
) -> Result<AnswerSet, PerceptionError> {
    let mut sets = generate_answers_batch(std::slice::from_ref(image), source, questions, backend, cache, tokenizer)?;
    Ok(sets.pop().expect("one image in, one set out"))
}

/// Answers for many images. Cache misses are sent to the backend from up to
/// `backend.max_concurrency()` threads; new answers are cached in image and
/// question order, including those that succeeded before a failure.
pub fn generate_answers_batch(
    images: &[PerceptionImage],
    source: SourceTag,
    questions: &QuestionSet,
    backend: &dyn AnswerBackend,
    cache: &AnswerCache,
    tokenizer: &Tokenizer,
) -> Result<Vec<AnswerSet>, PerceptionError> {
    let backend_id = backend.id();
    let mut answers: Vec<[Option<String>; QUESTION_COUNT]> = vec![Default::default(); images.len()];
    let mut misses = Vec::new();
    for (i, image) in images.iter().enumerate() {
        for (j, q) in questions.iter().enumerate() {
            match cache.lookup(image.sha256(), q.id, &backend_id) {
                Some(r) if r.question_text == q.text => answers[i][j] = Some(r.answer_text),
                _ => misses.push((i, j)),
            }
        }
    }

    let threads = backend.max_concurrency().clamp(1, misses.len().max(1));
    let mut fetched: Vec<Option<Result<String, PerceptionError>>> = (0..misses.len()).map(|_| None).collect();
    if threads == 1 {
        for (slot, &(i, j)) in fetched.iter_mut().zip(&misses) {
            *slot = Some(backend.answer(&images[i], questions.get(j)));
        }
    } else {
        let misses = &misses;
        let parts: Vec<Vec<(usize, Result<String, PerceptionError>)>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    s.spawn(move || {
                        (t..misses.len())
                            .step_by(threads)
                            .map(|k| {
                                let (i, j) = misses[k];
                                (k, backend.answer(&images[i], questions.get(j)))
                            })
                            .collect()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("answer worker panicked")).collect()
        });
        for (k, r) in parts.into_iter().flatten() {
            fetched[k] = Some(r);
        }
    }

    let mut first_err = None;
    for (&(i, j), result) in misses.iter().zip(fetched) {
        match result.expect("every miss was attempted") {
            Ok(text) => {
                let q = questions.get(j);
                cache.store(CacheRecord {
                    image_sha256: images[i].sha256().to_owned(),
                    question_id: q.id,
                    question_text: q.text.clone(),
                    answer_text: text.clone(),
                    backend_id: backend_id.clone(),
                    created_at: chrono::Utc::now().to_rfc3339(),
                })?;
                answers[i][j] = Some(text);
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }

    Ok(images
        .iter()
        .zip(answers)
        .map(|(image, a)| {
            let a = a.map(|t| t.expect("filled from cache or backend"));
            AnswerSet::new(image.sha256(), source, backend_id.clone(), a, tokenizer)
        })
        .collect())
}

/// Embeds the four answers as a `4×dim` constant tensor.
pub fn encode_text(answers: &AnswerSet, encoder: &dyn TextEncoder, dim: usize) -> Result<Tensor, PerceptionError> {
    if encoder.dim() != dim {
        return Err(PerceptionError::Dimension { expected: dim, got: encoder.dim() });
    }
    let rows = encoder.embed(&answers.answers)?;
    if rows.len() != QUESTION_COUNT {
        return Err(PerceptionError::Protocol(format!("{} embeddings for {QUESTION_COUNT} answers", rows.len())));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(PerceptionError::Dimension { expected: dim, got: r.len() });
    }
    let t = Tensor::new([QUESTION_COUNT, dim], rows.concat())?;
    validate_rows(&t)?;
    Ok(t)
}
