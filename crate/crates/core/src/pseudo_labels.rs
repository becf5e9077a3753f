//! Training targets computed without ground truth: frame-level codes from
//! fixed-order transport, the estimated transcript, one-hot segment codes and
//! transcript-aware alignment codes.
//!
//! All outputs are plain values. Nothing here participates in gradient
//! computation.

use ndarray::{Array2, ArrayView2};

use crate::data_model::{cosine_similarity, CodeKind, CodeMatrix, Transcript};
use crate::error::{Error, Result};
use crate::ot_prior::{
    build_fixed_order_prior, build_permutation_prior, default_sigma, sinkhorn_with_prior, SinkhornConfig,
};
use serde::{Deserialize, Serialize};

/// Transport settings shared by training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct PseudoLabelConfig {
    pub sinkhorn: SinkhornConfig,
    /// Band width of the prior; `None` uses [`default_sigma`].
    pub sigma: Option<f64>,
}

impl PseudoLabelConfig {
    pub fn sigma_for(&self, num_actions: usize) -> f64 {
        self.sigma.unwrap_or_else(|| default_sigma(num_actions))
    }

    pub fn validate(&self) -> Result<()> {
        self.sinkhorn.validate()?;
        match self.sigma {
            Some(s) if !(s > 0.0) => Err(Error::InvalidArgument(format!("sigma must be positive, got {s}"))),
            _ => Ok(()),
        }
    }
}

/// `Q_f` from a precomputed `B × K` similarity.
pub fn frame_codes_from_similarity(
    similarity: ArrayView2<f64>,
    cfg: &SinkhornConfig,
    sigma: f64,
) -> Result<CodeMatrix> {
    let (b, k) = similarity.dim();
    let prior = build_fixed_order_prior(b, k, sigma)?;
    let plan = sinkhorn_with_prior(similarity, &prior, cfg)?;
    Ok(CodeMatrix::new(plan.plan, CodeKind::PseudoFrame))
}

/// `Q_a` from a precomputed `B × K` similarity and a transcript.
pub fn align_codes_from_similarity(
    similarity: ArrayView2<f64>,
    transcript: &Transcript,
    cfg: &SinkhornConfig,
    sigma: f64,
) -> Result<CodeMatrix> {
    let (b, k) = similarity.dim();
    let prior = build_permutation_prior(b, k, sigma, transcript)?;
    let plan = sinkhorn_with_prior(similarity, &prior, cfg)?;
    Ok(CodeMatrix::new(plan.plan, CodeKind::PseudoAlign))
}

fn check_shapes(encoded: ArrayView2<f64>, prototypes: ArrayView2<f64>) -> Result<()> {
    if encoded.ncols() != prototypes.ncols() {
        return Err(Error::shape(
            "pseudo labels",
            (encoded.nrows(), prototypes.ncols()),
            encoded.dim(),
        ));
    }
    Ok(())
}

/// Frame-level pseudo-labels from encoder features and prototypes.
pub fn frame_pseudo_labels(
    encoded: ArrayView2<f64>,
    prototypes: ArrayView2<f64>,
    cfg: &SinkhornConfig,
    sigma: f64,
) -> Result<CodeMatrix> {
    check_shapes(encoded, prototypes)?;
    let sim = cosine_similarity(encoded, prototypes);
    frame_codes_from_similarity(sim.view(), cfg, sigma)
}

/// Alignment-level pseudo-labels: transport under the band laid out in
/// transcript order.
pub fn alignment_pseudo_labels(
    encoded: ArrayView2<f64>,
    prototypes: ArrayView2<f64>,
    transcript: &Transcript,
    cfg: &SinkhornConfig,
    sigma: f64,
) -> Result<CodeMatrix> {
    check_shapes(encoded, prototypes)?;
    let sim = cosine_similarity(encoded, prototypes);
    align_codes_from_similarity(sim.view(), transcript, cfg, sigma)
}

/// Order actions by the frame at which each one's column peaks.
///
/// Ties within a column go to the earliest frame; actions peaking at the same
/// frame are ordered by action id.
pub fn estimate_transcript(codes: ArrayView2<f64>) -> Transcript {
    let mut anchors: Vec<(usize, usize)> = codes
        .columns()
        .into_iter()
        .enumerate()
        .map(|(action, col)| {
            let mut best = 0;
            for (i, &v) in col.iter().enumerate() {
                if v > col[best] {
                    best = i;
                }
            }
            (best, action)
        })
        .collect();
    anchors.sort_unstable();
    Transcript::new(anchors.into_iter().map(|(_, a)| a).collect()).expect("anchors cover every action once")
}

/// One-hot `N × K` codes: row `p` selects action `t[p]`.
pub fn segment_pseudo_labels(transcript: &Transcript, num_actions: usize) -> Result<CodeMatrix> {
    if transcript.len() != num_actions {
        return Err(Error::InvalidTranscript(format!(
            "transcript has {} entries for {num_actions} actions",
            transcript.len()
        )));
    }
    let mut q = Array2::zeros((transcript.len(), num_actions));
    for (p, &a) in transcript.actions().iter().enumerate() {
        q[[p, a]] = 1.0;
    }
    Ok(CodeMatrix::new(q, CodeKind::PseudoSegment))
}

/// Gather action-indexed columns into transcript-position order.
pub fn gather_by_transcript(action_indexed: ArrayView2<f64>, transcript: &Transcript) -> Array2<f64> {
    let mut out = Array2::zeros((action_indexed.nrows(), transcript.len()));
    for (p, &a) in transcript.actions().iter().enumerate() {
        out.column_mut(p).assign(&action_indexed.column(a));
    }
    out
}

/// Scatter transcript-position columns to action ids.
pub fn scatter_by_transcript(position_indexed: ArrayView2<f64>, transcript: &Transcript) -> Array2<f64> {
    let mut out = Array2::zeros((position_indexed.nrows(), transcript.len()));
    for (p, &a) in transcript.actions().iter().enumerate() {
        out.column_mut(a).assign(&position_indexed.column(p));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot_prior::{default_sigma, marginal_deviation};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transcript_from_column_maxima() {
        let q = array![[0.9, 0.1], [0.6, 0.4], [0.2, 0.8], [0.3, 0.7]];
        assert_eq!(estimate_transcript(q.view()).actions(), &[0, 1]);

        let q = array![[0.1, 0.9], [0.2, 0.3], [0.3, 0.2], [0.8, 0.1]];
        assert_eq!(estimate_transcript(q.view()).actions(), &[1, 0]);
    }

    #[test]
    fn block_diagonal_codes_give_identity() {
        let mut q = Array2::zeros((9, 3));
        for i in 0..9 {
            q[[i, i / 3]] = 1.0 / 9.0;
        }
        assert!(estimate_transcript(q.view()).is_identity());
    }

    #[test]
    fn ties_prefer_early_frames_then_small_actions() {
        let q = Array2::from_elem((4, 3), 0.25);
        // All columns peak at frame 0.
        assert!(estimate_transcript(q.view()).is_identity());
        let q = array![[0.1, 0.5], [0.5, 0.5]];
        assert_eq!(estimate_transcript(q.view()).actions(), &[1, 0]);
    }

    #[test]
    fn segment_codes_are_one_hot() {
        let t = Transcript::new(vec![2, 0, 1]).unwrap();
        let q = segment_pseudo_labels(&t, 3).unwrap().values;
        assert_eq!(q, array![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let id = segment_pseudo_labels(&Transcript::identity(4), 4).unwrap().values;
        assert_eq!(id, Array2::<f64>::eye(4));
        assert!(segment_pseudo_labels(&t, 4).is_err());
    }

    #[test]
    fn perfect_similarity_with_narrow_band_is_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let protos =
            crate::data_model::normalize_rows(Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0)).view());
        let q = frame_pseudo_labels(
            protos.view(),
            protos.view(),
            &SinkhornConfig::converged(0.07, 1e-9),
            1e-3,
        )
        .unwrap()
        .values;
        for i in 0..4 {
            assert!((q[[i, i]] - 0.25).abs() < 1e-6, "{q:?}");
        }
    }

    #[test]
    fn uniform_similarity_and_prior_give_uniform_codes() {
        let e = Array2::from_elem((6, 3), 1.0);
        let c = Array2::from_elem((2, 3), 1.0);
        // A very wide band is numerically uniform.
        let q = frame_pseudo_labels(e.view(), c.view(), &SinkhornConfig::converged(0.07, 1e-12), 1e6)
            .unwrap()
            .values;
        for v in q.iter() {
            assert!((v - 1.0 / 12.0).abs() < 1e-9);
        }
    }

    #[test]
    fn random_instance_satisfies_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = Array2::from_shape_fn((12, 5), |_| rng.gen_range(-1.0..1.0));
        let c = Array2::from_shape_fn((3, 5), |_| rng.gen_range(-1.0..1.0));
        let q = frame_pseudo_labels(
            e.view(),
            c.view(),
            &SinkhornConfig::converged(0.07, 1e-6),
            default_sigma(3),
        )
        .unwrap();
        assert!(marginal_deviation(q.values.view()) < 1e-6);
        assert!(q.validate(1e-6).unwrap().ok);
    }

    #[test]
    fn identity_transcript_alignment_equals_frame_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = Array2::from_shape_fn((10, 4), |_| rng.gen_range(-1.0..1.0));
        let c = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let cfg = SinkhornConfig::default();
        let qf = frame_pseudo_labels(e.view(), c.view(), &cfg, 0.25).unwrap();
        let qa = alignment_pseudo_labels(e.view(), c.view(), &Transcript::identity(3), &cfg, 0.25).unwrap();
        assert_eq!(qf.values, qa.values);
    }

    #[test]
    fn reversed_transcript_moves_early_mass_to_action_one() {
        // Weakly informative features: all embeddings near one direction, so
        // the band prior decides the layout.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = Array2::from_shape_fn((6, 4), |_| 1.0 + 0.05 * rng.gen_range(-1.0..1.0));
        let c = Array2::from_shape_fn((2, 4), |_| 1.0 + 0.05 * rng.gen_range(-1.0..1.0));
        let t = Transcript::new(vec![1, 0]).unwrap();
        let qa = alignment_pseudo_labels(
            e.view(),
            c.view(),
            &t,
            &SinkhornConfig::converged(0.07, 1e-9),
            default_sigma(2),
        )
        .unwrap()
        .values;
        // Center of mass along time for each action column.
        let center = |j: usize| {
            let col = qa.column(j);
            col.iter().enumerate().map(|(i, v)| i as f64 * v).sum::<f64>() / col.sum()
        };
        assert!(center(1) < center(0), "centers {} {}", center(1), center(0));
        let early: f64 = qa.slice(ndarray::s![0..3, 1]).sum();
        assert!(early > qa.slice(ndarray::s![0..3, 0]).sum());
    }

    #[test]
    fn gather_inverts_scatter() {
        let t = Transcript::new(vec![2, 0, 1]).unwrap();
        let m = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        assert_eq!(gather_by_transcript(scatter_by_transcript(m.view(), &t).view(), &t), m);
        let id = Transcript::identity(3);
        assert_eq!(scatter_by_transcript(m.view(), &id), m);
    }
}
