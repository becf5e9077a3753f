//! Feature, label and dataset files.
//!
//! Binary features: `"TAFV1"`, `u32` frame count, `u32` dimension, then
//! little-endian `f32` values in row-major order. CSV features: one frame per
//! row, no header. Labels: one integer or `IGNORE` per line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{FeatureSequence, Segmentation, IGNORE};
use crate::datagen::{Dataset, Video};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 5] = b"TAFV1";

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Video id from the file stem.
fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

/// Read features; `.csv` files are parsed as text, anything else as binary.
pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    let frames = if is_csv(path) {
        read_features_csv(path)?
    } else {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_features(&bytes, path)?
    };
    FeatureSequence::new(stem(path), frames).map_err(|e| match e {
        Error::InvalidArgument(msg) => format_err(path, msg),
        other => other,
    })
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Array2<f64>> {
    let eof = || Error::UnexpectedEof {
        path: path.to_path_buf(),
    };
    if bytes.len() < FEATURE_MAGIC.len() {
        return Err(eof());
    }
    if &bytes[..5] != FEATURE_MAGIC {
        return Err(format_err(path, "bad magic, expected TAFV1"));
    }
    let header = bytes.get(5..13).ok_or_else(eof)?;
    let rows = u32::from_le_bytes(header[..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[4..].try_into().unwrap()) as usize;
    let need = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| format_err(path, "dimensions overflow"))?;
    let body = &bytes[13..];
    if body.len() < need {
        return Err(eof());
    }
    if body.len() > need {
        return Err(format_err(
            path,
            format!("{} trailing bytes after {rows}x{cols} values", body.len() - need),
        ));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked"))
}

pub fn encode_features(frames: &Array2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + frames.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(frames.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(frames.ncols() as u32).to_le_bytes());
    for &v in frames.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn read_features_csv(path: &Path) -> Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| format_err(path, e.to_string()))?;
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| format_err(path, e.to_string()))?;
        match cols {
            None => cols = Some(record.len()),
            Some(c) if c != record.len() => {
                return Err(format_err(
                    path,
                    format!("ragged row {row}: {} values, expected {c}", record.len()),
                ))
            }
            _ => {}
        }
        for field in record.iter() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: row + 1,
                msg: format!("not a number: {field:?}"),
            })?;
            values.push(v);
        }
        rows += 1;
    }
    let cols = cols.ok_or(Error::EmptySequence)?;
    Ok(Array2::from_shape_vec((rows, cols), values).expect("rows checked"))
}

/// Write features; `.csv` paths get text, anything else the binary format.
pub fn write_features(seq: &FeatureSequence, path: &Path) -> Result<()> {
    if is_csv(path) {
        write_matrix_csv(seq.frames.view(), path)
    } else {
        fs::write(path, encode_features(&seq.frames)).map_err(|e| Error::io(path, e))
    }
}

pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<usize>> {
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if t == "IGNORE" {
            labels.push(IGNORE);
            continue;
        }
        let v: usize = t.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("expected an action index or IGNORE, got {t:?}"),
        })?;
        if v >= IGNORE - 1 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("label {v} is reserved"),
            });
        }
        labels.push(v);
    }
    Ok(labels)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, path)
}

pub fn format_labels(labels: &[usize]) -> String {
    let mut out = String::with_capacity(labels.len() * 3);
    for &l in labels {
        if l == IGNORE {
            out.push_str("IGNORE\n");
        } else {
            out.push_str(&l.to_string());
            out.push('\n');
        }
    }
    out
}

pub fn write_labels(labels: &[usize], path: &Path) -> Result<()> {
    fs::write(path, format_labels(labels)).map_err(|e| Error::io(path, e))
}

/// Predicted labels as `frame_index,label` rows with a header.
pub fn write_prediction_csv(labels: &[usize], path: &Path) -> Result<()> {
    let mut out = String::from("frame_index,label\n");
    for (i, &l) in labels.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_prediction_csv(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let (frame, label) = line
            .split_once(',')
            .ok_or_else(|| parse_err(format!("expected frame_index,label, got {line:?}")))?;
        if frame.trim().parse::<usize>().ok() != Some(labels.len()) {
            return Err(parse_err(format!("expected frame index {}", labels.len())));
        }
        let label = label
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad label {label:?}")))?;
        labels.push(label);
    }
    Ok(labels)
}

/// Dense matrix as headerless CSV.
pub fn write_matrix_csv(m: ArrayView2<f64>, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| format_err(path, e.to_string()))?;
    for row in m.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| format_err(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    pub activity: String,
    /// Relative to the dataset directory.
    pub features: String,
    /// Relative to the dataset directory; absent for unlabeled videos.
    pub labels: Option<String>,
    pub num_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub activities: BTreeMap<String, usize>,
    pub videos: Vec<VideoEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Write `manifest.json`, `features/<id>.bin` and `labels/<id>.txt`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    for sub in ["features", "labels"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut videos = Vec::with_capacity(ds.videos.len());
    for v in &ds.videos {
        let id = &v.features.video_id;
        let features = format!("features/{id}.bin");
        let labels = format!("labels/{id}.txt");
        write_features(&v.features, &dir.join(&features))?;
        write_labels(&v.ground_truth.framewise, &dir.join(&labels))?;
        videos.push(VideoEntry {
            id: id.clone(),
            activity: v.activity.clone(),
            features,
            labels: Some(labels),
            num_frames: v.features.num_frames(),
        });
    }
    let manifest = DatasetManifest {
        activities: ds.activities.clone(),
        videos,
    };
    write_json(&manifest, &dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| format_err(&path, e.to_string()))
}

/// A loaded video; ground truth is absent when the manifest has no labels.
#[derive(Debug, Clone)]
pub struct LoadedVideo {
    pub features: FeatureSequence,
    pub labels: Option<Vec<usize>>,
    pub activity: String,
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<LoadedVideo>)> {
    let manifest = read_manifest(dir)?;
    let mut out = Vec::with_capacity(manifest.videos.len());
    for entry in &manifest.videos {
        let path = dir.join(&entry.features);
        let mut features = read_features(&path)?;
        features.video_id = entry.id.clone();
        let labels = match &entry.labels {
            Some(rel) => {
                let lp = dir.join(rel);
                let l = read_labels(&lp)?;
                if l.len() != features.num_frames() {
                    return Err(Error::shape("labels", (features.num_frames(), 1), (l.len(), 1)));
                }
                Some(l)
            }
            None => None,
        };
        out.push(LoadedVideo {
            features,
            labels,
            activity: entry.activity.clone(),
        });
    }
    Ok((manifest, out))
}

/// Rebuild a [`Dataset`] from loaded videos that all carry labels.
pub fn to_dataset(manifest: &DatasetManifest, videos: Vec<LoadedVideo>) -> Result<Dataset> {
    let videos = videos
        .into_iter()
        .map(|v| {
            let labels = v
                .labels
                .ok_or_else(|| Error::InvalidArgument(format!("video {} has no labels", v.features.video_id)))?;
            Ok(Video {
                ground_truth: Segmentation::from_framewise(labels)?,
                features: v.features,
                activity: v.activity,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        videos,
        activities: manifest.activities.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle of video ids, then the first `round(n·fraction)` go to
/// training.
pub fn split(ids: &[String], train_fraction: f64, seed: u64) -> Result<SplitManifest> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let mut order: Vec<String> = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ids.len() as f64 * train_fraction).round() as usize;
    let test = order.split_off(n_train.min(order.len()));
    Ok(SplitManifest {
        seed,
        train: order,
        test,
    })
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

/// Path under `dir`, creating `dir` if needed.
pub fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.to_path_buf())
}
