//! Shared domain types: frame features, action lists, transcripts, code
//! matrices and segmentations.
//!
//! Action indices are 0-based everywhere. Background frames in ground truth
//! carry the [`IGNORE`] sentinel, which predictions never emit.

use std::collections::HashSet;
use std::fmt;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frame label used for background frames excluded from evaluation.
pub const IGNORE: usize = usize::MAX;

/// Per-video frame features, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    pub frames: Array2<f64>,
    /// Frames per second; metadata only.
    pub fps: Option<f64>,
}

impl FeatureSequence {
    pub fn new(video_id: impl Into<String>, frames: Array2<f64>) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::EmptySequence);
        }
        if frames.ncols() == 0 {
            return Err(Error::InvalidArgument("feature dimension must be at least 1".into()));
        }
        if let Some(((r, c), _)) = frames.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite feature at frame {r}, dim {c}"
            )));
        }
        Ok(Self {
            video_id: video_id.into(),
            frames,
            fps: None,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionList {
    pub num_actions: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub names: Option<Vec<String>>,
}

impl ActionList {
    pub fn new(num_actions: usize, names: Option<Vec<String>>) -> Result<Self> {
        if num_actions < 2 {
            return Err(Error::InvalidArgument(format!(
                "an activity needs at least 2 actions, got {num_actions}"
            )));
        }
        if let Some(names) = &names {
            if names.len() != num_actions {
                return Err(Error::InvalidArgument(format!(
                    "{} action names for {num_actions} actions",
                    names.len()
                )));
            }
            let unique: HashSet<&String> = names.iter().collect();
            if unique.len() != names.len() {
                return Err(Error::InvalidArgument("action names must be unique".into()));
            }
        }
        Ok(Self { num_actions, names })
    }

    /// Display name of an action; 1-based when no names were given.
    pub fn display(&self, action: usize) -> String {
        match &self.names {
            Some(names) => names[action].clone(),
            None => format!("{}", action + 1),
        }
    }
}

/// Ordered list of the actions occurring in a video. Always a permutation of
/// `0..K`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Transcript(Vec<usize>);

impl Transcript {
    pub fn new(actions: Vec<usize>) -> Result<Self> {
        let k = actions.len();
        if k == 0 {
            return Err(Error::InvalidTranscript("empty transcript".into()));
        }
        let mut seen = vec![false; k];
        for &a in &actions {
            if a >= k {
                return Err(Error::InvalidTranscript(format!(
                    "action {a} out of range for {k} actions"
                )));
            }
            if std::mem::replace(&mut seen[a], true) {
                return Err(Error::InvalidTranscript(format!("action {a} repeated")));
            }
        }
        Ok(Self(actions))
    }

    /// The fixed canonical order `0, 1, ..., K-1`.
    pub fn identity(k: usize) -> Self {
        Self((0..k).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn actions(&self) -> &[usize] {
        &self.0
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(p, &a)| p == a)
    }

    /// `position_of()[a]` is the transcript position holding action `a`.
    pub fn position_of(&self) -> Vec<usize> {
        let mut pos = vec![0; self.0.len()];
        for (p, &a) in self.0.iter().enumerate() {
            pos[a] = p;
        }
        pos
    }

    pub fn inverse(&self) -> Transcript {
        Transcript(self.position_of())
    }

    pub fn get(&self, position: usize) -> usize {
        self.0[position]
    }
}

impl TryFrom<Vec<usize>> for Transcript {
    type Error = Error;

    fn try_from(value: Vec<usize>) -> Result<Self> {
        Transcript::new(value)
    }
}

impl From<Transcript> for Vec<usize> {
    fn from(t: Transcript) -> Self {
        t.0
    }
}

impl fmt::Display for Transcript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|a| a.to_string()).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CodeKind {
    PredictedFrame,
    PseudoFrame,
    PredictedSegment,
    PseudoSegment,
    PredictedAlign,
    PseudoAlign,
}

impl CodeKind {
    fn is_transport_plan(self) -> bool {
        matches!(self, CodeKind::PseudoFrame | CodeKind::PseudoAlign)
    }
}

/// Nonnegative assignment-probability matrix, rows are frames or transcript
/// positions and columns are actions.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeMatrix {
    pub values: Array2<f64>,
    pub kind: CodeKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CodeReport {
    pub ok: bool,
    /// Largest deviation of any row sum from its target.
    pub max_row_deviation: f64,
    pub worst_row: usize,
    /// Largest deviation of any column sum from its target; zero for kinds
    /// without column constraints.
    pub max_col_deviation: f64,
    pub worst_col: usize,
    /// Entries outside `[0, 1]`.
    pub out_of_range: usize,
}

impl CodeMatrix {
    pub fn new(values: Array2<f64>, kind: CodeKind) -> Self {
        Self { values, kind }
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    /// Check the kind-specific marginal invariants.
    ///
    /// Transport plans must have row sums `1/R` and column sums `1/K`; every
    /// other kind must have rows summing to one. `tol` bounds the allowed
    /// deviation.
    pub fn validate(&self, tol: f64) -> Result<CodeReport> {
        let m = &self.values;
        if let Some(((row, col), _)) = m.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteCode { row, col });
        }
        let (r, k) = m.dim();
        let out_of_range = m.iter().filter(|&&v| !(0.0..=1.0).contains(&v)).count();

        let row_target = if self.kind.is_transport_plan() {
            1.0 / r as f64
        } else {
            1.0
        };
        let (worst_row, max_row_deviation) = m
            .rows()
            .into_iter()
            .map(|row| (row.sum() - row_target).abs())
            .enumerate()
            .fold((0, 0.0), |acc, (i, d)| if d > acc.1 { (i, d) } else { acc });

        let (worst_col, max_col_deviation) = if self.kind.is_transport_plan() {
            let col_target = 1.0 / k as f64;
            m.columns()
                .into_iter()
                .map(|col| (col.sum() - col_target).abs())
                .enumerate()
                .fold((0, 0.0), |acc, (j, d)| if d > acc.1 { (j, d) } else { acc })
        } else {
            (0, 0.0)
        };

        Ok(CodeReport {
            ok: out_of_range == 0 && max_row_deviation <= tol && max_col_deviation <= tol,
            max_row_deviation,
            worst_row,
            max_col_deviation,
            worst_col,
            out_of_range,
        })
    }
}

/// Frame-to-action similarity `E · Cᵀ` computed on l2-normalized rows.
pub fn cosine_similarity(frames: ArrayView2<f64>, prototypes: ArrayView2<f64>) -> Array2<f64> {
    let a = normalize_rows(frames);
    let b = normalize_rows(prototypes);
    a.dot(&b.t())
}

pub(crate) fn normalize_rows(m: ArrayView2<f64>) -> Array2<f64> {
    let mut out = m.to_owned();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v / norm);
    }
    out
}

/// A maximal run of frames sharing one action; `end` is inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub action: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Run-length encode a framewise labeling. IGNORE runs split segments and are
/// not reported.
pub fn derive_segments(framewise: &[usize]) -> Result<Vec<Segment>> {
    if framewise.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut segments = Vec::new();
    let mut start = 0;
    for i in 1..=framewise.len() {
        if i == framewise.len() || framewise[i] != framewise[start] {
            if framewise[start] != IGNORE {
                segments.push(Segment {
                    action: framewise[start],
                    start,
                    end: i - 1,
                });
            }
            start = i;
        }
    }
    Ok(segments)
}

/// Expand segments back into a framewise labeling of `len` frames. Frames not
/// covered by any segment are IGNORE.
pub fn flatten_segments(segments: &[Segment], len: usize) -> Vec<usize> {
    let mut labels = vec![IGNORE; len];
    for s in segments {
        labels[s.start..=s.end].fill(s.action);
    }
    labels
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segmentation {
    pub framewise: Vec<usize>,
    pub segments: Vec<Segment>,
}

impl Segmentation {
    pub fn from_framewise(framewise: Vec<usize>) -> Result<Self> {
        let segments = derive_segments(&framewise)?;
        Ok(Self { framewise, segments })
    }

    pub fn len(&self) -> usize {
        self.framewise.len()
    }

    pub fn is_empty(&self) -> bool {
        self.framewise.is_empty()
    }

    /// Order of actions as they appear in time.
    pub fn action_order(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.action).collect()
    }

    /// Check the tiling invariants against the stored framewise labels.
    pub fn is_consistent(&self) -> bool {
        let tiles = flatten_segments(&self.segments, self.framewise.len()) == self.framewise;
        let ordered = self
            .segments
            .windows(2)
            .all(|w| w[0].end < w[1].start && (w[0].end + 1 < w[1].start || w[0].action != w[1].action));
        tiles && ordered
    }
}

/// Encoder output, transcript features and decoder output for one video.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub encoder_out: Array2<f64>,
    pub transcript_emb: Array2<f64>,
    pub decoder_out: Array2<f64>,
}
