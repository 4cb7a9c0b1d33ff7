//! Datasets, configuration, the training loop, inference and evaluation.

mod config;
mod dataset;
mod state;
mod train;

use std::path::{Path, PathBuf};

pub use config::{BackendKind, ConfigError, TrainConfig};
pub use dataset::{load_dataset, make_synthetic_dataset, resize_bilinear, synthesize_pair, ImagePair};
pub use state::TrainState;
pub use train::{
    checkpoint_name, train, train_with, LogEntry, TrainReport, CHECKPOINT_STATE, FINAL_MODEL, LOG_FILE, NAN_DUMP,
};

use crate::fusenet::{self, FusenetError};
use crate::metrics::{self, MetricReport, MetricsError};
use crate::numerics::{NumericsError, Tape, Tensor};
use crate::objective::ObjectiveError;
use crate::perception::{
    self, AnswerBackend, AnswerCache, AnswerSet, FrozenImageEncoder, HttpAnswerBackend, HttpConfig, HttpTextEncoder,
    PerceptionError, PerceptionImage, QuestionSet, SourceTag, StubAnswerBackend, StubTextEncoder, TextEncoder,
    Tokenizer,
};
use crate::raster::{self, LumaImage, RasterError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("model file not found: {}", .0.display())]
    ModelMissing(PathBuf),
    #[error("non-finite loss at epoch {epoch}, iteration {iteration}; batch dumped to {}", .dump.display())]
    NonFiniteLoss { epoch: usize, iteration: usize, dump: PathBuf },
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Fusenet(#[from] FusenetError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Answer and text-embedding services plus the local frozen image encoder.
pub struct Backends {
    pub answers: Box<dyn AnswerBackend>,
    pub text: Box<dyn TextEncoder>,
    pub image: FrozenImageEncoder,
    pub tokenizer: Tokenizer,
}

impl Backends {
    pub fn stub(seed: u64, embed_dim: usize, encoder_seed: u64) -> Self {
        Self {
            answers: Box::new(StubAnswerBackend::new(seed)),
            text: Box::new(StubTextEncoder::new(seed, embed_dim)),
            image: FrozenImageEncoder::new(encoder_seed, embed_dim),
            tokenizer: Tokenizer::new(seed),
        }
    }

    pub fn http(
        config: HttpConfig,
        answer_model: &str,
        embed_model: &str,
        embed_dim: usize,
        encoder_seed: u64,
    ) -> Self {
        Self {
            answers: Box::new(HttpAnswerBackend::new(config.clone(), answer_model)),
            text: Box::new(HttpTextEncoder::new(config, embed_model, embed_dim)),
            image: FrozenImageEncoder::new(encoder_seed, embed_dim),
            tokenizer: Tokenizer::new(0),
        }
    }

    /// The image encoder is seeded from `seed`; the stub services from
    /// `backend_seed`.
    pub fn from_config(cfg: &TrainConfig) -> Self {
        match cfg.backend {
            BackendKind::Stub => Self::stub(cfg.backend_seed, cfg.embed_dim, cfg.seed),
            BackendKind::Http => Self::http(cfg.http(), &cfg.answer_model, &cfg.embed_model, cfg.embed_dim, cfg.seed),
        }
    }
}

/// Answers for both images of a pair, infrared first.
pub fn ask(
    ir: &Path,
    vis: &Path,
    questions: &QuestionSet,
    backends: &Backends,
    cache: &AnswerCache,
) -> Result<[AnswerSet; 2], PipelineError> {
    let ir = PerceptionImage::from_file(ir)?;
    let vis = PerceptionImage::from_file(vis)?;
    let a = perception::generate_answers(
        &ir,
        SourceTag::Ir,
        questions,
        backends.answers.as_ref(),
        cache,
        &backends.tokenizer,
    )?;
    let b = perception::generate_answers(
        &vis,
        SourceTag::Vis,
        questions,
        backends.answers.as_ref(),
        cache,
        &backends.tokenizer,
    )?;
    Ok([a, b])
}

/// Fuse one pair at native resolution with a saved model and write an 8-bit
/// image, in color when the visible input has chroma.
pub fn fuse(
    ir_path: &Path,
    vis_path: &Path,
    model_path: &Path,
    out_path: &Path,
    questions: &QuestionSet,
    backends: &Backends,
    cache: &AnswerCache,
) -> Result<(), PipelineError> {
    if !model_path.is_file() {
        return Err(PipelineError::ModelMissing(model_path.to_owned()));
    }
    let model = fusenet::load_model(model_path)?;
    let pair = ImagePair::load(ir_path, vis_path)?;
    let d = model.arch().embed_dim;
    let mut text = Vec::with_capacity(2);
    for (image, tag) in [(&pair.ir_source, SourceTag::Ir), (&pair.vis_source, SourceTag::Vis)] {
        let answers =
            perception::generate_answers(image, tag, questions, backends.answers.as_ref(), cache, &backends.tokenizer)?;
        let t = perception::encode_text(&answers, backends.text.as_ref(), d)?;
        text.push(t.reshape([1, perception::QUESTION_COUNT, d])?);
    }
    let fused = fuse_planes(&model, &pair, Some((&text[0], &text[1])))?;
    let out = LumaImage { width: pair.width, height: pair.height, luma: fused, chroma: pair.vis_chroma.clone() };
    raster::save(out_path, &out)?;
    Ok(())
}

/// Forward pass on one pair without gradients; returns the fused luma.
pub fn fuse_planes(
    model: &fusenet::FusionModel,
    pair: &ImagePair,
    text: Option<(&Tensor, &Tensor)>,
) -> Result<Vec<f64>, PipelineError> {
    let tape = Tape::new();
    let shape = [1, 1, pair.height, pair.width];
    let ir = tape.constant(Tensor::new(shape, pair.ir.clone())?);
    let vis = tape.constant(Tensor::new(shape, pair.vis.clone())?);
    let out = model.bind(&tape, false).forward(ir, vis, text)?;
    Ok(out.value().data().to_vec())
}

/// Metrics over matching files of three directories; the CSV is written
/// atomically when `report` is given.
pub fn eval(
    fused_dir: &Path,
    ir_dir: &Path,
    vis_dir: &Path,
    report: Option<&Path>,
) -> Result<MetricReport, PipelineError> {
    let result = metrics::evaluate_directory(fused_dir, ir_dir, vis_dir)?;
    if let Some(path) = report {
        fusenet::write_atomic(path, result.to_csv().as_bytes())?;
    }
    Ok(result)
}
