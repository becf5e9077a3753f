use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde_json::json;
use taf_core::data_model::{Transcript, IGNORE};
use taf_core::datagen::generate;
use taf_core::evaluation::{evaluate_activity, write_confusion_csv, EvalReport};
use taf_core::inference::segment_video;
use taf_core::io::{
    ensure_dir, load_dataset, read_json, read_prediction_csv, save_dataset, split, write_json, write_matrix_csv,
    write_prediction_csv, DatasetManifest, LoadedVideo, SplitManifest,
};
use taf_core::network::checkpoint::{load_checkpoint, save_checkpoint};
use taf_core::network::Model;
use taf_core::ot_prior::{build_permutation_prior, default_sigma};
use taf_core::training::{compute_targets, epoch_means, train, write_loss_log};
use taf_core::viz::{heatmap_svg, segmentation_svg, Band};
use taf_core::Error as CoreError;

use crate::config::{RunConfig, Split};
use crate::error::{CliError, CliResult, Kind};

pub const SPLIT_FILE: &str = "split.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InspectWhat {
    Priors,
    Codes,
    Attention,
}

/// Videos of one activity, after the split filter.
struct Selection {
    activity: String,
    num_actions: usize,
    videos: Vec<LoadedVideo>,
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn out_dir(cfg: &RunConfig) -> CliResult<PathBuf> {
    Ok(ensure_dir(&cfg.out_dir)?)
}

fn pool(cfg: &RunConfig) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::new(Kind::Other, format!("thread pool: {e}")))
}

fn load_split(cfg: &RunConfig) -> CliResult<Option<Vec<String>>> {
    let ids = match cfg.split {
        Split::All => return Ok(None),
        Split::Train | Split::Test => {
            let manifest: SplitManifest = read_json(&cfg.data_dir.join(SPLIT_FILE))?;
            if cfg.split == Split::Train {
                manifest.train
            } else {
                manifest.test
            }
        }
    };
    Ok(Some(ids))
}

fn pick_activity(requested: Option<&str>, manifest: &DatasetManifest) -> CliResult<String> {
    match requested {
        Some(a) if manifest.activities.contains_key(a) => Ok(a.to_string()),
        Some(a) => Err(CliError::config(format!(
            "activity {a} not in dataset (has {})",
            manifest.activities.keys().cloned().collect::<Vec<_>>().join(",")
        ))),
        None if manifest.activities.len() == 1 => Ok(manifest.activities.keys().next().unwrap().clone()),
        None => Err(CliError::config(format!(
            "dataset has several activities ({}); set activity",
            manifest.activities.keys().cloned().collect::<Vec<_>>().join(",")
        ))),
    }
}

/// Load the dataset and split it per activity. With `activity == None`
/// every activity is returned.
fn select(cfg: &RunConfig, activity: Option<&str>, all_activities: bool) -> CliResult<Vec<Selection>> {
    let (manifest, videos) = load_dataset(&cfg.data_dir)?;
    let keep = load_split(cfg)?;
    let activities: Vec<String> = if all_activities && activity.is_none() {
        manifest.activities.keys().cloned().collect()
    } else {
        vec![pick_activity(activity, &manifest)?]
    };
    let mut by_activity: BTreeMap<String, Vec<LoadedVideo>> = BTreeMap::new();
    for v in videos {
        if keep.as_ref().is_some_and(|ids| !ids.contains(&v.features.video_id)) {
            continue;
        }
        by_activity.entry(v.activity.clone()).or_default().push(v);
    }
    let mut out = Vec::new();
    for activity in activities {
        let videos = by_activity.remove(&activity).unwrap_or_default();
        if videos.is_empty() {
            continue;
        }
        out.push(Selection {
            num_actions: manifest.activities[&activity],
            activity,
            videos,
        });
    }
    if out.is_empty() {
        return Err(CoreError::EmptyDataset.into());
    }
    Ok(out)
}

fn load_model(cfg: &RunConfig) -> CliResult<(Model, Option<String>)> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::config("checkpoint is required"))?;
    let (model, echo) = load_checkpoint(path)?;
    let activity = echo.get("activity").and_then(|v| v.as_str()).filter(|a| *a != "auto");
    Ok((model, activity.map(str::to_string)))
}

/// Activity from the config, else the one the checkpoint was trained on.
fn model_selection(cfg: &RunConfig, model: &Model, trained_on: Option<String>) -> CliResult<Selection> {
    let activity = cfg.activity.clone().or(trained_on);
    let sel = select(cfg, activity.as_deref(), false)?.remove(0);
    if sel.num_actions != model.config.num_actions {
        return Err(CliError::new(
            Kind::Dimension,
            format!(
                "activity {} has {} actions, checkpoint has {}",
                sel.activity, sel.num_actions, model.config.num_actions
            ),
        ));
    }
    Ok(sel)
}

pub fn synth(cfg: &RunConfig) -> CliResult<()> {
    let (dataset, centers) = generate(&cfg.synth_config())?;
    let dir = out_dir(cfg)?;
    let manifest = save_dataset(&dataset, &dir)?;
    let ids: Vec<String> = manifest.videos.iter().map(|v| v.id.clone()).collect();
    write_json(&split(&ids, cfg.train_fraction, cfg.seed)?, &dir.join(SPLIT_FILE))?;
    write_matrix_csv(centers.view(), &dir.join("centers.csv"))?;
    cfg.write_echo(&dir)?;
    println!("wrote {} videos to {}", ids.len(), dir.display());
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig) -> CliResult<()> {
    let sel = select(cfg, cfg.activity.as_deref(), false)?.remove(0);
    let features: Vec<_> = sel.videos.into_iter().map(|v| v.features).collect();
    let input_dim = features[0].dim();
    let model = Model::new(cfg.model_config(input_dim, sel.num_actions), cfg.seed)?;
    let train_cfg = cfg.train_config();
    let out = train(model, &features, &train_cfg, |epoch, loss| {
        eprintln!("epoch {epoch:3} loss {loss:.6}");
    })?;

    let echoed = RunConfig {
        activity: Some(sel.activity.clone()),
        ..cfg.clone()
    };
    let dir = out_dir(cfg)?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&out.model, &echoed.echo_json(), &ckpt)?;
    write_loss_log(&out.log, &dir.join(LOSS_LOG_FILE))?;
    echoed.write_echo(&dir)?;
    let last = epoch_means(&out.log).last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} on {} videos ({}+{} epochs), final loss {last:.6}, checkpoint {}",
        sel.activity,
        features.len(),
        train_cfg.stage1_epochs,
        train_cfg.stage2_epochs,
        ckpt.display()
    );
    Ok(())
}

pub fn segment(cfg: &RunConfig) -> CliResult<()> {
    let (model, trained_on) = load_model(cfg)?;
    let sel = model_selection(cfg, &model, trained_on)?;
    let decode = cfg.decode_config();
    let results = pool(cfg)?.install(|| {
        sel.videos
            .par_iter()
            .map(|v| segment_video(&v.features, &model, &decode))
            .collect::<Result<Vec<_>, _>>()
    })?;

    let dir = out_dir(cfg)?;
    for (video, seg) in sel.videos.iter().zip(&results) {
        let id = &seg.video_id;
        write_prediction_csv(&seg.segmentation.framewise, &dir.join(format!("{id}.csv")))?;
        let summary = json!({
            "video_id": id,
            "activity": sel.activity,
            "num_frames": seg.segmentation.len(),
            "transcript": seg.transcript.actions(),
            "segments": seg.segmentation.segments,
        });
        write_json(&summary, &dir.join(format!("{id}.json")))?;
        let mut bands = Vec::new();
        if let Some(gt) = &video.labels {
            bands.push(Band {
                name: "ground truth",
                labels: gt,
            });
        }
        bands.push(Band {
            name: "prediction",
            labels: &seg.segmentation.framewise,
        });
        write_text(&dir.join(format!("{id}.svg")), &segmentation_svg(&bands, id))?;
    }
    cfg.write_echo(&dir)?;
    println!(
        "segmented {} videos of {} into {}",
        results.len(),
        sel.activity,
        dir.display()
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> CliResult<()> {
    let pred_dir = cfg
        .pred_dir
        .as_ref()
        .ok_or_else(|| CliError::config("pred_dir is required"))?;
    let selections = select(cfg, cfg.activity.as_deref(), true)?;
    let pool = pool(cfg)?;
    let mut reports: BTreeMap<String, EvalReport> = BTreeMap::new();
    for sel in &selections {
        let mut gt = Vec::with_capacity(sel.videos.len());
        let mut ids = Vec::with_capacity(sel.videos.len());
        for v in &sel.videos {
            let labels = v.labels.clone().ok_or_else(|| {
                CliError::new(
                    Kind::Io,
                    format!("video {} has no ground-truth labels", v.features.video_id),
                )
            })?;
            gt.push(labels);
            ids.push(v.features.video_id.clone());
        }
        let pred = pool.install(|| {
            ids.par_iter()
                .zip(&gt)
                .map(|(id, g)| -> CliResult<Vec<usize>> {
                    let p = read_prediction_csv(&pred_dir.join(format!("{id}.csv")))?;
                    if p.len() != g.len() {
                        return Err(CoreError::ShapeMismatch {
                            context: "prediction length",
                            expected: (g.len(), 1),
                            actual: (p.len(), 1),
                        }
                        .into());
                    }
                    Ok(p)
                })
                .collect::<CliResult<Vec<_>>>()
        })?;
        let max_pred = pred.iter().flatten().filter(|&&l| l != IGNORE).map(|&l| l + 1).max();
        let k_pred = max_pred.unwrap_or(0).max(sel.num_actions);
        reports.insert(
            sel.activity.clone(),
            evaluate_activity(&ids, &gt, &pred, k_pred, sel.num_actions)?,
        );
    }

    let n = reports.len() as f64;
    let mof = reports.values().map(|r| r.mof).sum::<f64>() / n;
    let f1 = reports.values().map(|r| r.f1).sum::<f64>() / n;
    let dir = out_dir(cfg)?;
    for (activity, report) in &reports {
        write_confusion_csv(&report.confusion, &dir.join(format!("confusion_{activity}.csv")))?;
    }
    write_json(
        &json!({ "mof": mof, "f1": f1, "activities": reports }),
        &dir.join(REPORT_FILE),
    )?;
    cfg.write_echo(&dir)?;

    println!("{:<24} {:>7} {:>8} {:>8}", "activity", "videos", "MOF", "F1@50");
    for (activity, report) in &reports {
        println!(
            "{activity:<24} {:>7} {:>8.4} {:>8.4}",
            report.per_video_f1.len(),
            report.mof,
            report.f1
        );
    }
    println!("{:<24} {:>7} {mof:>8.4} {f1:>8.4}", "mean", "");
    Ok(())
}

fn parse_transcript(text: &str, k: usize) -> CliResult<Transcript> {
    let actions = text
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::config(format!("transcript={text}: {e}")))?;
    if actions.len() != k {
        return Err(CliError::config(format!("transcript={text}: expected {k} actions")));
    }
    Transcript::new(actions).map_err(|e| CliError::config(e.to_string()))
}

fn dump(dir: &Path, stem: &str, m: &Array2<f64>, title: &str) -> CliResult<()> {
    write_matrix_csv(m.view(), &dir.join(format!("{stem}.csv")))?;
    write_text(&dir.join(format!("{stem}.svg")), &heatmap_svg(m.view(), title))
}

pub fn inspect(cfg: &RunConfig, what: InspectWhat) -> CliResult<()> {
    let dir = out_dir(cfg)?;
    match what {
        InspectWhat::Priors => {
            let t = match &cfg.transcript {
                Some(text) => parse_transcript(text, cfg.k)?,
                None => Transcript::identity(cfg.k),
            };
            let sigma = cfg.sigma.unwrap_or_else(|| default_sigma(cfg.k));
            let prior = build_permutation_prior(cfg.frames, cfg.k, sigma, &t)?;
            dump(
                &dir,
                "prior",
                &prior.values,
                &format!("prior, order {t}, sigma {sigma:.4}"),
            )?;
            println!("prior {}x{} order {t} written to {}", cfg.frames, cfg.k, dir.display());
        }
        InspectWhat::Codes | InspectWhat::Attention => {
            let (model, trained_on) = load_model(cfg)?;
            let sel = model_selection(cfg, &model, trained_on)?;
            let video = match &cfg.video {
                Some(id) => sel
                    .videos
                    .iter()
                    .find(|v| &v.features.video_id == id)
                    .ok_or_else(|| CliError::config(format!("video {id} not in {}", sel.activity)))?,
                None => &sel.videos[0],
            };
            let id = &video.features.video_id;
            let decode = cfg.decode_config();
            let encoder = model.encode::<rand_chacha::ChaCha8Rng>(video.features.frames.view(), None)?;
            let targets = compute_targets(
                encoder.embeddings.view(),
                model.params.prototypes.view(),
                true,
                decode.order,
                &decode.pseudo,
            )?;
            let transcript = targets.transcript.clone().expect("combined targets carry a transcript");
            if what == InspectWhat::Codes {
                dump(&dir, &format!("{id}_q_f"), &targets.frame.values, &format!("{id} Q_f"))?;
                if let Some(q_s) = &targets.segment {
                    dump(&dir, &format!("{id}_q_s"), &q_s.values, &format!("{id} Q_s"))?;
                }
                if let Some(q_a) = &targets.align {
                    dump(&dir, &format!("{id}_q_a"), &q_a.values, &format!("{id} Q_a"))?;
                }
            } else {
                let enc_weights: Vec<Array2<f64>> = encoder.trace.attention_weights().into_iter().cloned().collect();
                let trace = model.forward_from::<rand_chacha::ChaCha8Rng>(encoder, Some(&transcript), None)?;
                for (l, w) in enc_weights.iter().enumerate() {
                    dump(
                        &dir,
                        &format!("{id}_encoder_{l}"),
                        w,
                        &format!("{id} encoder layer {l}"),
                    )?;
                }
                let dec = trace.decoder.as_ref().expect("decoder ran");
                for (l, w) in dec.trace.cross_attention_weights().into_iter().enumerate() {
                    dump(
                        &dir,
                        &format!("{id}_cross_{l}"),
                        w,
                        &format!("{id} cross-attention layer {l}"),
                    )?;
                }
            }
            println!("{id}: transcript {transcript}, dumps written to {}", dir.display());
        }
    }
    cfg.write_echo(&dir)
}
