//! End-to-end helpers: model variants, dataset-level segmentation and
//! evaluation.

use serde::{Deserialize, Serialize};

use crate::data_model::FeatureSequence;
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{average_over_activities, evaluate_activity, EvalReport};
use crate::inference::{segment_video, DecodeConfig, ProbSource, VideoSegmentation};
use crate::network::Model;
use crate::training::{OrderSource, TrainConfig};

/// Training and decoding regimes compared in the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Frame loss only; decode `P_f` under the canonical order.
    Frame,
    /// Frame and segment losses; decode `P_f` under the estimated transcript.
    FrameSegment,
    /// All three losses; decode `P_a` under the estimated transcript.
    Full,
    /// Like `Full`, but the decoder input and the segment and alignment
    /// targets use the canonical order instead of the estimated transcript.
    FixedOrderTargets,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Self::Frame, Self::FrameSegment, Self::Full, Self::FixedOrderTargets];

    pub fn name(self) -> &'static str {
        match self {
            Self::Frame => "frame",
            Self::FrameSegment => "frame-segment",
            Self::Full => "full",
            Self::FixedOrderTargets => "fixed-order-targets",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn train_config(self, base: &TrainConfig) -> TrainConfig {
        match self {
            Self::Frame => TrainConfig {
                stage2_epochs: 0,
                ..*base
            },
            Self::FrameSegment => TrainConfig { beta: 0.0, ..*base },
            Self::Full => *base,
            Self::FixedOrderTargets => TrainConfig {
                order: OrderSource::Fixed,
                ..*base
            },
        }
    }

    pub fn decode_config(self, base: &DecodeConfig) -> DecodeConfig {
        match self {
            Self::Frame => DecodeConfig {
                source: ProbSource::Frame,
                order: OrderSource::Fixed,
                ..*base
            },
            Self::FrameSegment => DecodeConfig {
                source: ProbSource::Frame,
                order: OrderSource::Estimated,
                ..*base
            },
            Self::Full | Self::FixedOrderTargets => DecodeConfig {
                source: ProbSource::Align,
                order: OrderSource::Estimated,
                ..*base
            },
        }
    }
}

pub fn segment_all(model: &Model, videos: &[FeatureSequence], cfg: &DecodeConfig) -> Result<Vec<VideoSegmentation>> {
    videos.iter().map(|v| segment_video(v, model, cfg)).collect()
}

/// Evaluate predictions against a labeled dataset, activity by activity.
/// Returns the per-activity reports and the activity-averaged MOF and F1.
pub fn evaluate_predictions(
    dataset: &Dataset,
    predictions: &[Vec<usize>],
    k_pred: usize,
) -> Result<(Vec<(String, EvalReport)>, f64, f64)> {
    if predictions.len() != dataset.videos.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} videos",
            predictions.len(),
            dataset.videos.len()
        )));
    }
    let mut reports = Vec::new();
    for (activity, &k_gt) in &dataset.activities {
        let idx: Vec<usize> = (0..dataset.videos.len())
            .filter(|&i| &dataset.videos[i].activity == activity)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let ids: Vec<String> = idx
            .iter()
            .map(|&i| dataset.videos[i].features.video_id.clone())
            .collect();
        let gt: Vec<Vec<usize>> = idx
            .iter()
            .map(|&i| dataset.videos[i].ground_truth.framewise.clone())
            .collect();
        let pred: Vec<Vec<usize>> = idx.iter().map(|&i| predictions[i].clone()).collect();
        reports.push((activity.clone(), evaluate_activity(&ids, &gt, &pred, k_pred, k_gt)?));
    }
    if reports.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let only: Vec<EvalReport> = reports.iter().map(|(_, r)| r.clone()).collect();
    let (mof, f1) = average_over_activities(&only);
    Ok((reports, mof, f1))
}

/// Segment every video of a single-model dataset and score it.
pub fn evaluate_model(model: &Model, dataset: &Dataset, cfg: &DecodeConfig) -> Result<(f64, f64)> {
    let segs = segment_all(model, &dataset.features(), cfg)?;
    let preds: Vec<Vec<usize>> = segs.into_iter().map(|s| s.segmentation.framewise).collect();
    let (_, mof, f1) = evaluate_predictions(dataset, &preds, model.config.num_actions)?;
    Ok((mof, f1))
}
