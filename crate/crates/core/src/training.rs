//! Two-stage training: frame-level loss only, then the combined objective.

use std::path::Path;

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{cosine_similarity, CodeMatrix, FeatureSequence, Transcript};
use crate::error::{Error, Result};
use crate::losses::cross_entropy_logits;
use crate::network::{is_frame_stage_tensor, EncoderOutput, ForwardTrace, Model, ModelParams, Upstream};
use crate::optim::{adam_step, AdamConfig, OptimizerState};
use crate::pseudo_labels::{
    align_codes_from_similarity, estimate_transcript, frame_codes_from_similarity, gather_by_transcript,
    segment_pseudo_labels, PseudoLabelConfig,
};

/// Which action order feeds the decoder and the segment/alignment targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OrderSource {
    /// Transcript estimated per video from the frame codes.
    #[default]
    Estimated,
    /// The canonical action list order.
    Fixed,
}

impl OrderSource {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "estimated" => Some(Self::Estimated),
            "fixed" => Some(Self::Fixed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub pseudo: PseudoLabelConfig,
    pub order: OrderSource,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 30,
            stage2_epochs: 70,
            lr: 1e-3,
            weight_decay: 1e-5,
            alpha: 1.0,
            beta: 1.0,
            seed: 0,
            pseudo: PseudoLabelConfig::default(),
            order: OrderSource::Estimated,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.stage1_epochs + self.stage2_epochs == 0 {
            return bad("at least one training epoch is required".into());
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad(format!("invalid lr={} weight_decay={}", self.lr, self.weight_decay));
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return bad(format!(
                "loss weights must be non-negative, got {} {}",
                self.alpha, self.beta
            ));
        }
        self.pseudo.validate()
    }
}

/// Pseudo-label targets for one video, all treated as constants.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub frame: CodeMatrix,
    /// Order fed to the decoder; only set for the combined objective.
    pub transcript: Option<Transcript>,
    pub segment: Option<CodeMatrix>,
    pub align: Option<CodeMatrix>,
}

/// Compute targets from frame embeddings and the current prototypes.
///
/// With `combined == false` only the frame codes are produced.
pub fn compute_targets(
    embeddings: ArrayView2<f64>,
    prototypes: ArrayView2<f64>,
    combined: bool,
    order: OrderSource,
    cfg: &PseudoLabelConfig,
) -> Result<Targets> {
    let k = prototypes.nrows();
    let sigma = cfg.sigma_for(k);
    let sim = cosine_similarity(embeddings, prototypes);
    let frame = frame_codes_from_similarity(sim.view(), &cfg.sinkhorn, sigma)?;
    if !combined {
        return Ok(Targets {
            frame,
            transcript: None,
            segment: None,
            align: None,
        });
    }
    let transcript = match order {
        OrderSource::Estimated => estimate_transcript(frame.values.view()),
        OrderSource::Fixed => Transcript::identity(k),
    };
    let segment = segment_pseudo_labels(&transcript, k)?;
    let align = align_codes_from_similarity(sim.view(), &transcript, &cfg.sinkhorn, sigma)?;
    Ok(Targets {
        frame,
        transcript: Some(transcript),
        segment: Some(segment),
        align: Some(align),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub frame: f64,
    pub segment: f64,
    pub align: f64,
    pub total: f64,
}

/// Loss values and exact parameter gradients for one forward trace.
///
/// Targets enter only as constants: nothing flows back into them.
pub fn loss_and_grads(
    model: &Model,
    trace: &ForwardTrace,
    targets: &Targets,
    alpha: f64,
    beta: f64,
) -> Result<(StepLoss, ModelParams)> {
    let (l_f, g_f) = cross_entropy_logits(trace.frame.logits.view(), targets.frame.values.view())?;
    let mut upstream = Upstream {
        frame_logits: Some(g_f),
        ..Upstream::default()
    };
    let (mut l_s, mut l_a) = (0.0, 0.0);
    if let (Some(q_s), Some(q_a), Some(t)) = (&targets.segment, &targets.align, &targets.transcript) {
        let dec = trace.decoder.as_ref().ok_or(Error::MissingTrace("decoder"))?;
        let align = trace.align.as_ref().ok_or(Error::MissingTrace("alignment"))?;
        let (ls, gs) = cross_entropy_logits(dec.segment_logits.view(), q_s.values.view())?;
        // Alignment logits are position-indexed; reorder the action-indexed codes to match.
        let q_pos = gather_by_transcript(q_a.values.view(), t);
        let (la, ga) = cross_entropy_logits(align.logits.view(), q_pos.view())?;
        l_s = ls;
        l_a = la;
        if alpha != 0.0 {
            upstream.segment_logits = Some(gs * alpha);
        }
        if beta != 0.0 {
            upstream.align_logits = Some(ga * beta);
        }
    }
    let grads = model.backward(trace, &upstream)?;
    Ok((
        StepLoss {
            frame: l_f,
            segment: l_s,
            align: l_a,
            total: l_f + alpha * l_s + beta * l_a,
        },
        grads,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub video_id: String,
    #[serde(rename = "L_f")]
    pub l_f: f64,
    #[serde(rename = "L_s")]
    pub l_s: f64,
    #[serde(rename = "L_a")]
    pub l_a: f64,
    #[serde(rename = "L")]
    pub total: f64,
}

/// Mean total loss per epoch, in epoch order (1-based epochs).
pub fn epoch_means(log: &[LossRecord]) -> Vec<f64> {
    let Some(last) = log.iter().map(|r| r.epoch).max() else {
        return Vec::new();
    };
    let mut sums = vec![(0.0, 0usize); last];
    for r in log {
        sums[r.epoch - 1].0 += r.total;
        sums[r.epoch - 1].1 += 1;
    }
    sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
}

pub fn write_loss_log(log: &[LossRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in log {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Model,
    pub log: Vec<LossRecord>,
}

/// Run both stages. One video per optimization step, visited in a seeded
/// shuffle each epoch.
///
/// Stage 1 updates the encoder and prototypes with the frame loss. Stage 2
/// restarts Adam and optimizes every tensor with the combined objective, with
/// dropout active.
pub fn train(
    mut model: Model,
    videos: &[FeatureSequence],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutput> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for v in videos {
        if v.dim() != model.config.input_dim {
            return Err(Error::shape(
                "training features",
                (v.num_frames(), model.config.input_dim),
                v.frames.dim(),
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..videos.len()).collect();
    let stages = [(false, cfg.stage1_epochs), (true, cfg.stage2_epochs)];
    let mut epoch = 0;
    for (combined, epochs) in stages {
        let mut state = OptimizerState::new(&model.params, cfg.adam);
        for _ in 0..epochs {
            epoch += 1;
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            for &idx in &order {
                let video = &videos[idx];
                let loss = if combined {
                    combined_step(&mut model, video, cfg, &mut state, &mut rng)?
                } else {
                    frame_step(&mut model, video, cfg, &mut state)?
                };
                sum += loss.total;
                log.push(LossRecord {
                    epoch,
                    video_id: video.video_id.clone(),
                    l_f: loss.frame,
                    l_s: loss.segment,
                    l_a: loss.align,
                    total: loss.total,
                });
            }
            on_epoch(epoch, sum / videos.len() as f64);
        }
    }
    Ok(TrainOutput { model, log })
}

fn frame_step(
    model: &mut Model,
    video: &FeatureSequence,
    cfg: &TrainConfig,
    state: &mut OptimizerState,
) -> Result<StepLoss> {
    let encoder = model.encode::<ChaCha8Rng>(video.frames.view(), None)?;
    let targets = compute_targets(
        encoder.embeddings.view(),
        model.params.prototypes.view(),
        false,
        cfg.order,
        &cfg.pseudo,
    )?;
    let trace = model.forward_from::<ChaCha8Rng>(encoder, None, None)?;
    let (loss, grads) = loss_and_grads(model, &trace, &targets, 0.0, 0.0)?;
    adam_step(
        &mut model.params,
        &grads,
        state,
        cfg.lr,
        cfg.weight_decay,
        is_frame_stage_tensor,
    )?;
    Ok(loss)
}

fn combined_step(
    model: &mut Model,
    video: &FeatureSequence,
    cfg: &TrainConfig,
    state: &mut OptimizerState,
    rng: &mut ChaCha8Rng,
) -> Result<StepLoss> {
    let encoder: EncoderOutput = model.encode(video.frames.view(), Some(&mut *rng))?;
    let targets = compute_targets(
        encoder.embeddings.view(),
        model.params.prototypes.view(),
        true,
        cfg.order,
        &cfg.pseudo,
    )?;
    let trace = model.forward_from(encoder, targets.transcript.as_ref(), Some(rng))?;
    let (loss, grads) = loss_and_grads(model, &trace, &targets, cfg.alpha, cfg.beta)?;
    adam_step(&mut model.params, &grads, state, cfg.lr, cfg.weight_decay, |_| true)?;
    Ok(loss)
}
