//! Synthetic videos with known ground truth: Gaussian clusters around one
//! center per action, laid out in fixed, permuted or partially missing order.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data_model::{FeatureSequence, Segmentation};
use crate::error::{Error, Result};

pub const SYNTHETIC_ACTIVITY: &str = "synthetic";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub num_actions: usize,
    pub input_dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Minimum pairwise distance between action centers.
    pub cluster_sep: f64,
    pub noise_sigma: f64,
    pub permute_prob: f64,
    pub missing_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_videos: 20,
            num_actions: 5,
            input_dim: 16,
            min_frames: 100,
            max_frames: 200,
            cluster_sep: 6.0,
            noise_sigma: 1.0,
            permute_prob: 0.0,
            missing_prob: 0.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Infeasible(m));
        if self.num_videos == 0 || self.num_actions == 0 || self.input_dim == 0 {
            return bad("videos, actions and feature dimension must be positive".into());
        }
        if self.min_frames < self.num_actions || self.min_frames > self.max_frames {
            return bad(format!(
                "frame range {}..={} must start at or above K={}",
                self.min_frames, self.max_frames, self.num_actions
            ));
        }
        for (name, p) in [("permute_prob", self.permute_prob), ("missing_prob", self.missing_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name}={p} outside [0, 1]"));
            }
        }
        if !(self.cluster_sep >= 0.0) || !(self.noise_sigma >= 0.0) {
            return bad("cluster_sep and noise_sigma must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub features: FeatureSequence,
    pub ground_truth: Segmentation,
    pub activity: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub videos: Vec<Video>,
    /// Number of actions per activity.
    pub activities: BTreeMap<String, usize>,
}

impl Dataset {
    pub fn num_actions(&self, activity: &str) -> Option<usize> {
        self.activities.get(activity).copied()
    }

    pub fn features(&self) -> Vec<FeatureSequence> {
        self.videos.iter().map(|v| v.features.clone()).collect()
    }

    /// Videos of one activity.
    pub fn activity(&self, name: &str) -> Dataset {
        Dataset {
            videos: self.videos.iter().filter(|v| v.activity == name).cloned().collect(),
            activities: self
                .activities
                .iter()
                .filter(|(k, _)| k.as_str() == name)
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
        }
    }
}

fn draw_centers(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    let (k, d) = (cfg.num_actions, cfg.input_dim);
    // Two draws of N(0, s²I) lie about s·√(2d) apart; start a bit above the
    // required separation and widen on repeated rejections.
    let mut scale = (cfg.cluster_sep * 1.25 / (2.0 * d as f64).sqrt()).max(1e-3);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut failures = 0usize;
    while centers.len() < k {
        let normal = Normal::new(0.0, scale).expect("positive scale");
        let c: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
        let far = centers
            .iter()
            .all(|o| o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= cfg.cluster_sep);
        if far {
            centers.push(c);
            continue;
        }
        failures += 1;
        if failures.is_multiple_of(200) {
            scale *= 1.1;
        }
        if failures > 100_000 {
            return Err(Error::Infeasible(format!(
                "could not place {k} centers {} apart in {d} dimensions",
                cfg.cluster_sep
            )));
        }
    }
    Ok(Array2::from_shape_fn((k, d), |(i, j)| centers[i][j]))
}

fn draw_order(cfg: &SynthConfig, rng: &mut ChaCha8Rng, force_permuted: bool) -> Vec<usize> {
    let k = cfg.num_actions;
    let mut order: Vec<usize> = (0..k).collect();
    if k >= 2 && (force_permuted || rng.gen_bool(cfg.permute_prob)) {
        while order.windows(2).all(|w| w[0] < w[1]) {
            order.shuffle(rng);
        }
    }
    let mut kept = vec![order[0]];
    for &a in &order[1..] {
        if !rng.gen_bool(cfg.missing_prob) {
            kept.push(a);
        }
    }
    if force_permuted && kept.windows(2).all(|w| w[0] < w[1]) {
        // Dropping actions undid the permutation; keep the full order.
        return order;
    }
    kept
}

fn draw_lengths(total: usize, parts: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let weights: Vec<f64> = (0..parts).map(|_| rng.gen_range(0.5..1.5)).collect();
    let sum: f64 = weights.iter().sum();
    let spare = total - parts;
    let mut lens: Vec<usize> = weights
        .iter()
        .map(|w| 1 + (spare as f64 * w / sum).floor() as usize)
        .collect();
    let mut left = total - lens.iter().sum::<usize>();
    let mut i = 0;
    while left > 0 {
        lens[i % parts] += 1;
        left -= 1;
        i += 1;
    }
    lens
}

fn draw_video(
    cfg: &SynthConfig,
    centers: &Array2<f64>,
    index: usize,
    force_permuted: bool,
    reroll: u64,
) -> Result<Video> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1 + index as u64 + reroll * cfg.num_videos as u64);
    let order = draw_order(cfg, &mut rng, force_permuted);
    let frames = rng.gen_range(cfg.min_frames..=cfg.max_frames);
    let lens = draw_lengths(frames, order.len(), &mut rng);
    let mut labels = Vec::with_capacity(frames);
    for (&a, &len) in order.iter().zip(&lens) {
        labels.extend(std::iter::repeat_n(a, len));
    }
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("non-negative sigma");
    let features = Array2::from_shape_fn((frames, cfg.input_dim), |(i, j)| {
        let eps = if cfg.noise_sigma > 0.0 {
            noise.sample(&mut rng)
        } else {
            0.0
        };
        // Keep values exactly representable on disk.
        (centers[[labels[i], j]] + eps) as f32 as f64
    });
    Ok(Video {
        features: FeatureSequence::new(format!("video_{index:03}"), features)?,
        ground_truth: Segmentation::from_framewise(labels)?,
        activity: SYNTHETIC_ACTIVITY.into(),
    })
}

/// Draw a dataset. Identical configs give identical datasets.
///
/// With `permute_prob > 0` at least one video is guaranteed a non-identity
/// order: if the draw produced none, video 0 is redrawn with a forced
/// permutation.
pub fn generate(cfg: &SynthConfig) -> Result<(Dataset, Array2<f64>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers = draw_centers(cfg, &mut rng)?;
    let mut videos = (0..cfg.num_videos)
        .map(|i| draw_video(cfg, &centers, i, false, 0))
        .collect::<Result<Vec<_>>>()?;
    let permuted = |v: &Video| v.ground_truth.action_order().windows(2).any(|w| w[0] > w[1]);
    if cfg.permute_prob > 0.0 && cfg.num_actions >= 2 && !videos.iter().any(permuted) {
        videos[0] = draw_video(cfg, &centers, 0, true, 1)?;
    }
    let activities = BTreeMap::from([(SYNTHETIC_ACTIVITY.to_string(), cfg.num_actions)]);
    Ok((Dataset { videos, activities }, centers))
}
