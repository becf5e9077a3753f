//! Activity-level Hungarian matching, MOF and F1@50.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data_model::{derive_segments, Segment, IGNORE};
use crate::error::{Error, Result};

/// Label given to predicted frames whose class has no ground-truth partner.
pub const UNMATCHED: usize = usize::MAX - 1;

/// Predicted class → ground-truth class. `None` marks classes matched only
/// to padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mapping(pub Vec<Option<usize>>);

impl Mapping {
    pub fn identity(k: usize) -> Self {
        Self((0..k).map(Some).collect())
    }

    pub fn apply(&self, label: usize) -> usize {
        if label == IGNORE {
            return IGNORE;
        }
        self.0.get(label).copied().flatten().unwrap_or(UNMATCHED)
    }
}

/// Minimum-cost perfect assignment on a square matrix. Returns the column
/// assigned to each row and the total cost.
fn min_cost_assignment(cost: &[Vec<i64>]) -> (Vec<usize>, i64) {
    let n = cost.len();
    if n == 0 {
        return (Vec::new(), 0);
    }
    // Potentials-based O(n³) method, 1-based internally.
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = inf;
            let mut col1 = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let cur = cost[r0 - 1][col - 1] - u[r0] - v[col];
                if cur < minv[col] {
                    minv[col] = cur;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            owner[col0] = owner[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for col in 1..=n {
        assign[owner[col] - 1] = col - 1;
    }
    let total = (0..n).map(|r| cost[r][assign[r]]).sum();
    (assign, total)
}

fn best_gain(gain: &[Vec<i64>], rows: &[usize], cols: &[usize]) -> i64 {
    if rows.is_empty() {
        return 0;
    }
    let top = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| gain[r][c]))
        .max()
        .unwrap_or(0);
    let cost: Vec<Vec<i64>> = rows
        .iter()
        .map(|&r| cols.iter().map(|&c| top - gain[r][c]).collect())
        .collect();
    let (_, c) = min_cost_assignment(&cost);
    top * rows.len() as i64 - c
}

/// Bijection between predicted and ground-truth classes maximizing matched
/// frames. Among optimal bijections the lexicographically smallest (by
/// predicted class) is returned. Non-square inputs are padded with zeros.
pub fn hungarian_match(confusion: &Array2<u64>) -> Mapping {
    let (kp, kg) = confusion.dim();
    let n = kp.max(kg);
    let gain: Vec<Vec<i64>> = (0..n)
        .map(|r| {
            (0..n)
                .map(|c| if r < kp && c < kg { confusion[[r, c]] as i64 } else { 0 })
                .collect()
        })
        .collect();
    let all: Vec<usize> = (0..n).collect();
    let optimum = best_gain(&gain, &all, &all);
    let mut free: Vec<usize> = all.clone();
    let mut fixed = 0i64;
    let mut mapping = Vec::with_capacity(kp);
    for r in 0..n {
        let rest_rows: Vec<usize> = ((r + 1)..n).collect();
        let mut chosen = None;
        for (pos, &c) in free.iter().enumerate() {
            let mut rest_cols = free.clone();
            rest_cols.remove(pos);
            if fixed + gain[r][c] + best_gain(&gain, &rest_rows, &rest_cols) == optimum {
                chosen = Some(pos);
                break;
            }
        }
        let pos = chosen.expect("some column extends an optimal assignment");
        let c = free.remove(pos);
        fixed += gain[r][c];
        if r < kp {
            mapping.push((c < kg).then_some(c));
        }
    }
    Mapping(mapping)
}

/// Frame counts of (predicted, ground truth) pairs, IGNORE frames skipped.
pub fn confusion_matrix(gt: &[Vec<usize>], pred: &[Vec<usize>], k_pred: usize, k_gt: usize) -> Result<Array2<u64>> {
    check_lengths(gt, pred)?;
    let mut m = Array2::zeros((k_pred, k_gt));
    for (g, p) in gt.iter().zip(pred) {
        for (&gl, &pl) in g.iter().zip(p) {
            if gl == IGNORE {
                continue;
            }
            if gl >= k_gt || pl >= k_pred {
                return Err(Error::InvalidArgument(format!(
                    "label out of range: gt {gl} of {k_gt}, pred {pl} of {k_pred}"
                )));
            }
            m[[pl, gl]] += 1;
        }
    }
    Ok(m)
}

fn check_lengths(gt: &[Vec<usize>], pred: &[Vec<usize>]) -> Result<()> {
    if gt.len() != pred.len() {
        return Err(Error::InvalidArgument(format!(
            "{} ground-truth videos but {} predictions",
            gt.len(),
            pred.len()
        )));
    }
    for (i, (g, p)) in gt.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::InvalidArgument(format!(
                "video {i}: {} ground-truth frames but {} predicted",
                g.len(),
                p.len()
            )));
        }
    }
    Ok(())
}

/// Correct non-IGNORE frames over all non-IGNORE frames, pooled over the
/// videos of one activity.
pub fn mof(gt: &[Vec<usize>], pred: &[Vec<usize>], mapping: &Mapping) -> Result<f64> {
    check_lengths(gt, pred)?;
    let (mut correct, mut total) = (0usize, 0usize);
    for (g, p) in gt.iter().zip(pred) {
        for (&gl, &pl) in g.iter().zip(p) {
            if gl == IGNORE {
                continue;
            }
            total += 1;
            correct += usize::from(mapping.apply(pl) == gl);
        }
    }
    if total == 0 {
        return Err(Error::InvalidArgument("no labeled frames to evaluate".into()));
    }
    Ok(correct as f64 / total as f64)
}

fn iou(a: &Segment, b: &Segment) -> f64 {
    let inter_start = a.start.max(b.start);
    let inter_end = a.end.min(b.end);
    if inter_start > inter_end {
        return 0.0;
    }
    let inter = (inter_end - inter_start + 1) as f64;
    let union = (a.len() + b.len()) as f64 - inter;
    inter / union
}

/// Segment F1 with IoU > 0.5 on already-mapped segments. Segments labeled
/// IGNORE are not counted on either side.
pub fn f1_at_50(gt: &[Segment], pred: &[Segment]) -> f64 {
    let gt: Vec<&Segment> = gt.iter().filter(|s| s.action != IGNORE).collect();
    let pred: Vec<&Segment> = pred.iter().filter(|s| s.action != IGNORE).collect();
    if gt.is_empty() || pred.is_empty() {
        return 0.0;
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (pi, p) in pred.iter().enumerate() {
        for (gi, g) in gt.iter().enumerate() {
            if p.action == g.action {
                let v = iou(p, g);
                if v > 0.5 {
                    pairs.push((v, pi, gi));
                }
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; pred.len()];
    let mut used_g = vec![false; gt.len()];
    let mut tp = 0usize;
    for (_, pi, gi) in pairs {
        if !used_p[pi] && !used_g[gi] {
            used_p[pi] = true;
            used_g[gi] = true;
            tp += 1;
        }
    }
    let precision = tp as f64 / pred.len() as f64;
    let recall = tp as f64 / gt.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// F1@50 of one video: map predictions, mask frames whose ground truth is
/// IGNORE, then compare segments.
pub fn video_f1(gt: &[usize], pred: &[usize], mapping: &Mapping) -> Result<f64> {
    if gt.len() != pred.len() {
        return Err(Error::InvalidArgument(format!(
            "{} ground-truth frames but {} predicted",
            gt.len(),
            pred.len()
        )));
    }
    let mapped: Vec<usize> = gt
        .iter()
        .zip(pred)
        .map(|(&g, &p)| if g == IGNORE { IGNORE } else { mapping.apply(p) })
        .collect();
    if gt.is_empty() {
        return Ok(0.0);
    }
    Ok(f1_at_50(&derive_segments(gt)?, &derive_segments(&mapped)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub video_id: String,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mof: f64,
    pub f1: f64,
    pub per_video_f1: Vec<VideoScore>,
    pub mapping: Mapping,
    /// Rows are predicted classes, columns ground-truth classes.
    pub confusion: Vec<Vec<u64>>,
}

/// Evaluate the videos of one activity.
pub fn evaluate_activity(
    video_ids: &[String],
    gt: &[Vec<usize>],
    pred: &[Vec<usize>],
    k_pred: usize,
    k_gt: usize,
) -> Result<EvalReport> {
    if video_ids.len() != gt.len() {
        return Err(Error::InvalidArgument("one id per video required".into()));
    }
    if gt.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let confusion = confusion_matrix(gt, pred, k_pred, k_gt)?;
    let mapping = hungarian_match(&confusion);
    let mof_value = mof(gt, pred, &mapping)?;
    let mut per_video_f1 = Vec::with_capacity(gt.len());
    for ((id, g), p) in video_ids.iter().zip(gt).zip(pred) {
        per_video_f1.push(VideoScore {
            video_id: id.clone(),
            f1: video_f1(g, p, &mapping)?,
        });
    }
    let f1 = per_video_f1.iter().map(|v| v.f1).sum::<f64>() / per_video_f1.len() as f64;
    Ok(EvalReport {
        mof: mof_value,
        f1,
        per_video_f1,
        mapping,
        confusion: confusion.rows().into_iter().map(|r| r.to_vec()).collect(),
    })
}

/// Mean MOF and mean F1 over activities.
pub fn average_over_activities(reports: &[EvalReport]) -> (f64, f64) {
    let n = reports.len().max(1) as f64;
    (
        reports.iter().map(|r| r.mof).sum::<f64>() / n,
        reports.iter().map(|r| r.f1).sum::<f64>() / n,
    )
}

pub fn write_confusion_csv(confusion: &[Vec<u64>], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let k_gt = confusion.first().map_or(0, Vec::len);
    let mut header = vec!["pred".to_string()];
    header.extend((0..k_gt).map(|g| format!("gt{g}")));
    let werr = |e: csv::Error| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    w.write_record(&header).map_err(werr)?;
    for (p, row) in confusion.iter().enumerate() {
        let mut rec = vec![p.to_string()];
        rec.extend(row.iter().map(u64::to_string));
        w.write_record(&rec).map_err(werr)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seg(action: usize, start: usize, end: usize) -> Segment {
        Segment { action, start, end }
    }

    /// Lexicographically first permutation with the maximal total.
    fn brute_force(m: &Array2<u64>) -> Vec<usize> {
        fn permute(k: usize, prefix: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Vec<usize>>) {
            if prefix.len() == k {
                out.push(prefix.clone());
                return;
            }
            for c in 0..k {
                if !used[c] {
                    used[c] = true;
                    prefix.push(c);
                    permute(k, prefix, used, out);
                    prefix.pop();
                    used[c] = false;
                }
            }
        }
        let k = m.nrows();
        let mut perms = Vec::new();
        permute(k, &mut Vec::new(), &mut vec![false; k], &mut perms);
        let mut best: Option<(u64, Vec<usize>)> = None;
        for p in perms {
            let total: u64 = p.iter().enumerate().map(|(r, &c)| m[[r, c]]).sum();
            if best.as_ref().is_none_or(|(b, _)| total > *b) {
                best = Some((total, p));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn two_by_two_example() {
        let m = array![[5u64, 1], [2, 3]];
        assert_eq!(hungarian_match(&m), Mapping(vec![Some(0), Some(1)]));
    }

    #[test]
    fn diagonal_gives_identity_and_rows_permute_mapping() {
        let m = array![[7u64, 0, 0], [0, 4, 0], [0, 0, 9]];
        assert_eq!(hungarian_match(&m), Mapping::identity(3));
        let swapped = array![[0u64, 4, 0], [7, 0, 0], [0, 0, 9]];
        assert_eq!(hungarian_match(&swapped), Mapping(vec![Some(1), Some(0), Some(2)]));
    }

    #[test]
    fn ties_pick_the_lexicographically_smallest_mapping() {
        let m = Array2::from_elem((3, 3), 2u64);
        assert_eq!(hungarian_match(&m), Mapping::identity(3));
    }

    #[test]
    fn rectangular_inputs_are_padded() {
        let m = array![[0u64, 9], [4, 0], [1, 1]];
        assert_eq!(hungarian_match(&m), Mapping(vec![Some(1), Some(0), None]));
        let wide = array![[1u64, 0, 8]];
        assert_eq!(hungarian_match(&wide), Mapping(vec![Some(2)]));
    }

    #[test]
    fn agrees_with_permutation_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..60 {
            let k = rng.gen_range(1..=5);
            let m = Array2::from_shape_fn((k, k), |_| rng.gen_range(0..6u64));
            let expected: Vec<Option<usize>> = brute_force(&m).into_iter().map(Some).collect();
            assert_eq!(hungarian_match(&m).0, expected, "{m:?}");
        }
    }

    #[test]
    fn mof_examples() {
        let id = Mapping::identity(2);
        assert_eq!(mof(&[vec![0, 0, 1, 1]], &[vec![0, 1, 1, 1]], &id).unwrap(), 0.75);
        assert_eq!(mof(&[vec![0, 1]], &[vec![0, 1]], &id).unwrap(), 1.0);
        assert_eq!(mof(&[vec![0, IGNORE]], &[vec![0, 1]], &id).unwrap(), 1.0);
        assert!(mof(&[vec![0, 1]], &[vec![0]], &id).is_err());
    }

    #[test]
    fn f1_examples() {
        let gt = [seg(0, 0, 4), seg(1, 5, 9)];
        let pred = [seg(0, 0, 1), seg(1, 2, 9)];
        assert_eq!(f1_at_50(&gt, &pred), 0.5);
        assert_eq!(f1_at_50(&gt, &gt), 1.0);
        assert_eq!(f1_at_50(&gt, &[]), 0.0);
    }

    #[test]
    fn video_f1_masks_ignored_frames() {
        let gt = vec![0, 0, IGNORE, IGNORE, 1, 1];
        let pred = vec![0, 0, 0, 1, 1, 1];
        assert_eq!(video_f1(&gt, &pred, &Mapping::identity(2)).unwrap(), 1.0);
    }

    #[test]
    fn unmatched_predictions_count_as_errors() {
        let gt = vec![vec![0, 0, 0, 0]];
        let pred = vec![vec![0, 0, 1, 1]];
        let report = evaluate_activity(&["v".into()], &gt, &pred, 2, 1).unwrap();
        assert_eq!(report.mapping, Mapping(vec![Some(0), None]));
        assert_eq!(report.mof, 0.5);
        // One gt segment, two predicted ones, the first has IoU 0.5 exactly.
        assert_eq!(report.f1, 0.0);
    }

    #[test]
    fn relabeled_predictions_score_the_same() {
        let gt = vec![vec![0, 0, 1, 1, 2, 2], vec![2, 2, 2, 0, 1, 1]];
        let pred = vec![vec![1, 1, 1, 0, 2, 2], vec![2, 2, 1, 1, 0, 0]];
        let ids = vec!["a".to_string(), "b".to_string()];
        let base = evaluate_activity(&ids, &gt, &pred, 3, 3).unwrap();
        let relabel = [2usize, 0, 1];
        let moved: Vec<Vec<usize>> = pred.iter().map(|v| v.iter().map(|&l| relabel[l]).collect()).collect();
        let other = evaluate_activity(&ids, &gt, &moved, 3, 3).unwrap();
        assert_eq!(base.mof, other.mof);
        assert_eq!(base.f1, other.f1);
        assert!((0.0..=1.0).contains(&base.mof) && (0.0..=1.0).contains(&base.f1));
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gt = vec![vec![1, 1, 0, 0, 2]];
        let report = evaluate_activity(&["v".into()], &gt, &gt, 3, 3).unwrap();
        assert_eq!((report.mof, report.f1), (1.0, 1.0));
    }
}
