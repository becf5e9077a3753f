//! Order-constrained decoding of framewise probabilities.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data_model::{FeatureSequence, Segmentation, Transcript};
use crate::error::{Error, Result};
use crate::network::layers::log_softmax_rows;
use crate::network::Model;
use crate::pseudo_labels::{scatter_by_transcript, PseudoLabelConfig};
use crate::training::{compute_targets, OrderSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProbSource {
    /// Frame-to-segment alignment probabilities `P_a`.
    #[default]
    Align,
    /// Frame-to-prototype probabilities `P_f`.
    Frame,
}

impl ProbSource {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "align" => Some(Self::Align),
            "frame" => Some(Self::Frame),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub source: ProbSource,
    /// Action order imposed on the decoded segmentation.
    pub order: OrderSource,
    pub min_seg_frames: usize,
    pub pseudo: PseudoLabelConfig,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            source: ProbSource::Align,
            order: OrderSource::Estimated,
            min_seg_frames: 1,
            pseudo: PseudoLabelConfig::default(),
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_seg_frames == 0 {
            return Err(Error::InvalidArgument("min_seg_frames must be at least 1".into()));
        }
        self.pseudo.validate()
    }
}

/// Best labeling with exactly `t.len()` contiguous segments in transcript
/// order, each at least `min_len` frames, maximizing the summed log scores.
///
/// Ties resolve toward later segment boundaries.
pub fn viterbi_decode_log(log_probs: ArrayView2<f64>, t: &Transcript, min_len: usize) -> Result<Segmentation> {
    let (b, k) = log_probs.dim();
    let n = t.len();
    if n == 0 || t.actions().iter().any(|&a| a >= k) {
        return Err(Error::InvalidTranscript(format!(
            "transcript {t} does not index {k} probability columns"
        )));
    }
    if min_len == 0 {
        return Err(Error::InvalidArgument("min_seg_frames must be at least 1".into()));
    }
    if b < n * min_len {
        return Err(Error::SequenceTooShort {
            frames: b,
            segments: n,
            min_len,
        });
    }
    // prefix[p][i] = sum of log_probs[0..i, t[p]]
    let prefix: Vec<Vec<f64>> = t
        .actions()
        .iter()
        .map(|&a| {
            let mut acc = Vec::with_capacity(b + 1);
            acc.push(0.0);
            for i in 0..b {
                acc.push(acc[i] + log_probs[[i, a]]);
            }
            acc
        })
        .collect();

    // score[i][p]: best labeling of frames 0..=i whose last segment is p and
    // has at least min_len frames. started[i][p]: segment p begins at i+1-min_len.
    let neg = f64::NEG_INFINITY;
    let mut score = vec![vec![neg; n]; b];
    let mut started = vec![vec![false; n]; b];
    for i in 0..b {
        for p in 0..n {
            let fresh = if i + 1 < min_len {
                neg
            } else {
                let start = i + 1 - min_len;
                let run = prefix[p][i + 1] - prefix[p][start];
                if p == 0 {
                    if start == 0 {
                        run
                    } else {
                        neg
                    }
                } else if start == 0 {
                    neg
                } else {
                    score[start - 1][p - 1] + run
                }
            };
            let extend = if i == 0 {
                neg
            } else {
                score[i - 1][p] + log_probs[[i, t.get(p)]]
            };
            if fresh >= extend && fresh > neg {
                score[i][p] = fresh;
                started[i][p] = true;
            } else {
                score[i][p] = extend;
            }
        }
    }
    if score[b - 1][n - 1] == neg {
        return Err(Error::Infeasible("no labeling with finite score".into()));
    }

    let mut labels = vec![0usize; b];
    let mut i = b as isize - 1;
    let mut p = n - 1;
    while i >= 0 {
        let iu = i as usize;
        if started[iu][p] {
            let start = iu + 1 - min_len;
            for l in labels.iter_mut().take(iu + 1).skip(start) {
                *l = t.get(p);
            }
            i = start as isize - 1;
            if p == 0 {
                break;
            }
            p -= 1;
        } else {
            labels[iu] = t.get(p);
            i -= 1;
        }
    }
    Segmentation::from_framewise(labels)
}

/// [`viterbi_decode_log`] on probabilities. Zeros map to the smallest
/// positive double so every feasible path keeps a finite score.
pub fn viterbi_decode(probs: ArrayView2<f64>, t: &Transcript, min_len: usize) -> Result<Segmentation> {
    let logs = probs.mapv(|p| p.max(f64::MIN_POSITIVE).ln());
    viterbi_decode_log(logs.view(), t, min_len)
}

/// Summed log score of a labeling.
pub fn path_score(log_probs: ArrayView2<f64>, labels: &[usize]) -> f64 {
    labels.iter().enumerate().map(|(i, &a)| log_probs[[i, a]]).sum()
}

/// Decoded video plus the intermediate quantities behind it.
#[derive(Debug, Clone)]
pub struct VideoSegmentation {
    pub video_id: String,
    pub segmentation: Segmentation,
    /// Order imposed on the decoding.
    pub transcript: Transcript,
    pub frame_codes: Array2<f64>,
    pub frame_probs: Array2<f64>,
    /// `P_a`, action-indexed; present when the decoder ran.
    pub align_probs: Option<Array2<f64>>,
    pub cross_attention: Vec<Array2<f64>>,
}

/// Encode, estimate the transcript, and decode under it.
pub fn segment_video(video: &FeatureSequence, model: &Model, cfg: &DecodeConfig) -> Result<VideoSegmentation> {
    cfg.validate()?;
    let encoder = model.encode::<rand_chacha::ChaCha8Rng>(video.frames.view(), None)?;
    let targets = compute_targets(
        encoder.embeddings.view(),
        model.params.prototypes.view(),
        true,
        cfg.order,
        &cfg.pseudo,
    )?;
    let transcript = targets.transcript.clone().expect("combined targets carry a transcript");
    let trace = model.forward_from::<rand_chacha::ChaCha8Rng>(encoder, Some(&transcript), None)?;
    let frame_probs = trace.frame.probs();
    let dec = trace.decoder.as_ref().expect("decoder ran");
    let align = trace.align.as_ref().expect("alignment ran");
    let align_probs = align.action_probs(&transcript);

    let log_probs = match cfg.source {
        ProbSource::Frame => log_softmax_rows(trace.frame.logits.view()),
        ProbSource::Align => scatter_by_transcript(log_softmax_rows(align.logits.view()).view(), &transcript),
    };
    let segmentation = viterbi_decode_log(log_probs.view(), &transcript, cfg.min_seg_frames)?;
    Ok(VideoSegmentation {
        video_id: video.video_id.clone(),
        segmentation,
        transcript,
        frame_codes: targets.frame.values,
        frame_probs,
        align_probs: Some(align_probs),
        cross_attention: dec.trace.cross_attention_weights().into_iter().cloned().collect(),
    })
}
