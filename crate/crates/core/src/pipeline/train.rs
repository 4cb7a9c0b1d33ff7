//! The training loop with per-epoch checkpoints and exact resume.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Backends, ConfigError, ImagePair, PipelineError, TrainConfig, TrainState};
use crate::fusenet::{self, FusionModel};
use crate::hashing::derive_seed;
use crate::numerics::{AdamState, Tape, Tensor};
use crate::objective::{total_loss, HierInputs, LossValues};
use crate::perception::{self, AnswerCache, PerceptionImage, SourceTag};

pub const LOG_FILE: &str = "train.log";
pub const FINAL_MODEL: &str = "model.hpf";
pub const CHECKPOINT_STATE: &str = "train_state.hps";
pub const NAN_DUMP: &str = "nan_dump.json";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("model.e{epoch:03}.hpf")
}

/// One training log record; `iter` counts batches from 1 across epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub iter: usize,
    pub l_int: f64,
    pub l_detail: f64,
    pub l_hier: f64,
    pub l_total: f64,
}

impl LogEntry {
    fn new(epoch: usize, iter: usize, v: LossValues) -> Self {
        Self { epoch, iter, l_int: v.l_int, l_detail: v.l_detail, l_hier: v.l_hier, l_total: v.l_total }
    }

    pub fn to_line(&self, json: bool) -> String {
        if json {
            serde_json::to_string(self).expect("plain struct serializes")
        } else {
            format!(
                "{}\t{}\t{}\t{}\t{}\t{}",
                self.epoch, self.iter, self.l_int, self.l_detail, self.l_hier, self.l_total
            )
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub model_path: PathBuf,
    pub log_path: PathBuf,
    /// Entries produced by this invocation.
    pub entries: Vec<LogEntry>,
}

pub fn train(cfg: &TrainConfig) -> Result<TrainReport, PipelineError> {
    let backends = Backends::from_config(cfg);
    train_with(cfg, &backends)
}

/// Per-pair source inputs that stay fixed during training.
struct SourceEmbeddings {
    ir_text: Vec<Tensor>,
    vis_text: Vec<Tensor>,
    ir_image: Vec<Tensor>,
    vis_image: Vec<Tensor>,
}

fn source_embeddings(
    cfg: &TrainConfig,
    pairs: &[ImagePair],
    backends: &Backends,
    with_images: bool,
) -> Result<SourceEmbeddings, PipelineError> {
    let cache = AnswerCache::open(cfg.cache_path())?;
    if cache.skipped() > 0 {
        log::warn!("{}: skipped {} unreadable cache lines", cfg.cache_path().display(), cache.skipped());
    }
    let questions = cfg.question_set();
    let mut text = Vec::with_capacity(2);
    for (tag, images) in [
        (SourceTag::Ir, pairs.iter().map(|p| p.ir_source.clone()).collect::<Vec<_>>()),
        (SourceTag::Vis, pairs.iter().map(|p| p.vis_source.clone()).collect()),
    ] {
        let sets = perception::generate_answers_batch(
            &images,
            tag,
            &questions,
            backends.answers.as_ref(),
            &cache,
            &backends.tokenizer,
        )?;
        let encoded = sets
            .iter()
            .map(|s| perception::encode_text(s, backends.text.as_ref(), cfg.embed_dim))
            .collect::<Result<Vec<_>, _>>()?;
        text.push(encoded);
    }
    let vis_text = text.pop().expect("two modalities");
    let ir_text = text.pop().expect("two modalities");
    let (mut ir_image, mut vis_image) = (Vec::new(), Vec::new());
    if with_images {
        for p in pairs {
            ir_image.push(Tensor::from_vec(backends.image.embed(p.height, p.width, &p.ir)?));
            vis_image.push(Tensor::from_vec(backends.image.embed(p.height, p.width, &p.vis)?));
        }
    }
    Ok(SourceEmbeddings { ir_text, vis_text, ir_image, vis_image })
}

fn gather(items: &[Tensor], idx: &[usize]) -> Result<Tensor, PipelineError> {
    let picked: Vec<Tensor> = idx.iter().map(|&i| items[i].clone()).collect();
    Ok(Tensor::stack(&picked)?)
}

fn needs_refresh(entry: &Option<(usize, Tensor)>, epoch: usize, interval: usize) -> bool {
    match entry {
        None => true,
        Some((at, _)) => epoch >= at + interval,
    }
}

/// Keep the first `lines` lines of the log, for resume.
fn truncate_log(path: &Path, lines: usize) -> Result<(), PipelineError> {
    let kept: Vec<String> = match File::open(path) {
        Ok(f) => BufReader::new(f).lines().take(lines).collect::<Result<_, _>>()?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    if kept.len() < lines {
        return Err(PipelineError::Resume(format!("{} has {} lines, expected {lines}", path.display(), kept.len())));
    }
    let mut text = kept.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fusenet::write_atomic(path, text.as_bytes())?;
    Ok(())
}

#[derive(Serialize)]
struct NanDump<'a> {
    epoch: usize,
    iteration: usize,
    pairs: Vec<&'a str>,
    cause: String,
    losses: Option<[String; 4]>,
    parameters_non_finite: usize,
    parameters_max_abs: f64,
}

fn finite(v: &LossValues) -> bool {
    [v.l_int, v.l_detail, v.l_hier, v.l_total].iter().all(|x| x.is_finite())
}

fn is_non_finite(e: &PipelineError) -> bool {
    use crate::fusenet::FusenetError;
    use crate::numerics::NumericsError::NonFinite;
    use crate::objective::ObjectiveError;
    use crate::perception::PerceptionError;
    matches!(
        e,
        PipelineError::Numerics(NonFinite { .. })
            | PipelineError::Fusenet(FusenetError::Numerics(NonFinite { .. }))
            | PipelineError::Perception(PerceptionError::Numerics(NonFinite { .. }))
            | PipelineError::Objective(ObjectiveError::Numerics(NonFinite { .. }))
            | PipelineError::Objective(ObjectiveError::Perception(PerceptionError::Numerics(NonFinite { .. })))
    )
}

/// Train from `cfg.data_dir` into `cfg.out_dir`. With `cfg.resume`, continue
/// from the last completed epoch recorded there.
pub fn train_with(cfg: &TrainConfig, backends: &Backends) -> Result<TrainReport, PipelineError> {
    cfg.validate().map_err(|message| ConfigError { source_name: "config".into(), line: 0, message })?;
    let loaded = super::load_dataset(&cfg.data_dir)?;
    if loaded.len() < cfg.batch_size {
        return Err(PipelineError::Dataset(format!(
            "{}: {} pairs, fewer than one batch of {}",
            cfg.data_dir.display(),
            loaded.len(),
            cfg.batch_size
        )));
    }
    let pairs: Vec<ImagePair> = loaded.iter().map(|p| p.resized(cfg.resize)).collect();
    drop(loaded);
    let n = pairs.len();
    let size = cfg.resize;
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out)?;

    let arch = cfg.architecture();
    let hier = !cfg.disable_hier_loss && cfg.beta > 0.0;
    let guide = !cfg.disable_text_guidance;
    let weights = cfg.weights();
    let log_path = out.join(LOG_FILE);
    let state_path = out.join(CHECKPOINT_STATE);

    let (mut model, mut state) = if cfg.resume {
        let state = TrainState::load(&state_path, cfg.adam())?;
        let model = fusenet::load_model(&out.join(checkpoint_name(state.epoch)))?;
        if *model.arch() != arch {
            return Err(PipelineError::Resume(format!(
                "checkpoint architecture {:?} differs from config {arch:?}",
                model.arch()
            )));
        }
        if state.fused_text.len() != n {
            return Err(PipelineError::Resume(format!(
                "state covers {} pairs, dataset has {n}",
                state.fused_text.len()
            )));
        }
        truncate_log(&log_path, state.iteration)?;
        (model, state)
    } else {
        let model = FusionModel::new(arch, cfg.seed)?;
        let adam = AdamState::new(cfg.adam(), model.params().iter().map(Tensor::shape));
        let state = TrainState { epoch: 0, iteration: 0, adam, fused_text: vec![None; n] };
        fusenet::save_model(&out.join(checkpoint_name(0)), &model)?;
        state.save(&state_path)?;
        fusenet::write_atomic(&log_path, b"")?;
        (model, state)
    };

    let sources = if guide || hier { Some(source_embeddings(cfg, &pairs, backends, hier)?) } else { None };
    let ir_pixels: Vec<Tensor> =
        pairs.iter().map(|p| Tensor::new([1, size, size], p.ir.clone())).collect::<Result<_, _>>()?;
    let vis_pixels: Vec<Tensor> =
        pairs.iter().map(|p| Tensor::new([1, size, size], p.vis.clone())).collect::<Result<_, _>>()?;
    let questions = cfg.question_set();

    let mut log = OpenOptions::new().append(true).create(true).open(&log_path)?;
    let mut entries = Vec::new();
    for epoch in state.epoch + 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let seed = derive_seed(&[b"shuffle", &cfg.seed.to_le_bytes(), &(epoch as u64).to_le_bytes()]);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        for batch in order.chunks(cfg.batch_size).filter(|b| b.len() >= 2) {
            let iteration = state.iteration + 1;
            let fused_table = &mut state.fused_text;
            let outcome = (|| -> Result<(LossValues, Vec<Tensor>), PipelineError> {
                let tape = Tape::new();
                let net = model.bind(&tape, true);
                let ir = tape.constant(gather(&ir_pixels, batch)?);
                let vis = tape.constant(gather(&vis_pixels, batch)?);
                let text = match (&sources, guide) {
                    (Some(s), true) => Some((gather(&s.ir_text, batch)?, gather(&s.vis_text, batch)?)),
                    _ => None,
                };
                let fused = net.forward(ir, vis, text.as_ref().map(|(a, b)| (a, b)))?;

                let hier_tensors = match (&sources, hier) {
                    (Some(s), true) => {
                        let pixels = fused.value();
                        for (k, &i) in batch.iter().enumerate() {
                            if needs_refresh(&fused_table[i], epoch, cfg.refresh_interval) {
                                let img = PerceptionImage::from_gray(
                                    size,
                                    size,
                                    &pixels.data()[k * size * size..][..size * size],
                                )?;
                                let answers = perception::generate_answers(
                                    &img,
                                    SourceTag::Fused,
                                    &questions,
                                    backends.answers.as_ref(),
                                    &AnswerCache::in_memory(),
                                    &backends.tokenizer,
                                )?;
                                let t = perception::encode_text(&answers, backends.text.as_ref(), cfg.embed_dim)?;
                                fused_table[i] = Some((epoch, t));
                            }
                        }
                        let fused_text: Vec<Tensor> = batch
                            .iter()
                            .map(|&i| fused_table[i].as_ref().expect("refreshed above").1.clone())
                            .collect();
                        Some((
                            Tensor::stack(&fused_text)?,
                            gather(&s.ir_image, batch)?,
                            gather(&s.ir_text, batch)?,
                            gather(&s.vis_image, batch)?,
                            gather(&s.vis_text, batch)?,
                        ))
                    }
                    _ => None,
                };
                let hier_inputs = match &hier_tensors {
                    Some((fused_text, ir_image, ir_text, vis_image, vis_text)) => Some(HierInputs {
                        fused_image: backends.image.encode(fused)?,
                        fused_text,
                        ir_image,
                        ir_text,
                        vis_image,
                        vis_text,
                    }),
                    None => None,
                };
                let losses = total_loss(fused, ir, vis, hier_inputs.as_ref(), weights)?;
                let values = losses.values();
                if !finite(&values) {
                    return Ok((values, Vec::new()));
                }
                let mut grads = tape.backward(losses.l_total)?;
                let grads: Vec<Tensor> = net
                    .vars()
                    .iter()
                    .zip(model.params())
                    .map(|(v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                    .collect();
                Ok((values, grads))
            })();
            let cause = match &outcome {
                Ok((values, _)) if !finite(values) => Some("non-finite loss".to_owned()),
                Err(e) if is_non_finite(e) => Some(e.to_string()),
                _ => None,
            };
            if let Some(cause) = cause {
                let dump = NanDump {
                    epoch,
                    iteration,
                    pairs: batch.iter().map(|&i| pairs[i].name.as_str()).collect(),
                    cause,
                    losses: outcome
                        .as_ref()
                        .ok()
                        .map(|(v, _)| [v.l_int, v.l_detail, v.l_hier, v.l_total].map(|x| x.to_string())),
                    parameters_non_finite: model
                        .params()
                        .iter()
                        .flat_map(|p| p.data())
                        .filter(|v| !v.is_finite())
                        .count(),
                    parameters_max_abs: model
                        .params()
                        .iter()
                        .flat_map(|p| p.data())
                        .fold(0.0, |m: f64, v| m.max(v.abs())),
                };
                let path = out.join(NAN_DUMP);
                let body = serde_json::to_vec_pretty(&dump).expect("plain struct serializes");
                fusenet::write_atomic(&path, &body)?;
                return Err(PipelineError::NonFiniteLoss { epoch, iteration, dump: path });
            }
            let (values, grads) = outcome?;
            state.adam.step(model.params_mut(), &grads)?;
            model.quantize();
            state.iteration = iteration;

            let entry = LogEntry::new(epoch, iteration, values);
            writeln!(log, "{}", entry.to_line(cfg.json_log))?;
            log.flush()?;
            log::info!("{}", entry.to_line(cfg.json_log));
            entries.push(entry);
        }
        fusenet::save_model(&out.join(checkpoint_name(epoch)), &model)?;
        state.epoch = epoch;
        state.save(&state_path)?;
    }
    let model_path = out.join(FINAL_MODEL);
    fusenet::save_model(&model_path, &model)?;
    Ok(TrainReport { model_path, log_path, entries })
}
