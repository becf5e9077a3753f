//! Flat `key=value` run configuration.
//!
//! Values are layered: defaults, then `--config` file, then `TAF_<KEY>`
//! environment variables, then command-line flags. Unknown keys are rejected
//! at every layer, and the merged result is validated once at the end.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use taf_core::datagen::SynthConfig;
use taf_core::inference::{DecodeConfig, ProbSource};
use taf_core::network::ModelConfig;
use taf_core::ot_prior::{DatasetPreset, SinkhornConfig};
use taf_core::pipeline::Variant;
use taf_core::pseudo_labels::PseudoLabelConfig;
use taf_core::training::{OrderSource, TrainConfig};

use crate::error::{CliError, CliResult};

pub const ENV_PREFIX: &str = "TAF_";
pub const ECHO_FILE: &str = "config.txt";

/// Which videos of the dataset a command sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    All,
    Train,
    Test,
}

/// Parsing and canonical rendering of one config value.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(usize, u64, f64, String);

impl ConfigValue for bool {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err("expected true or false".into()),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for PathBuf {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s.is_empty() {
            return Err("empty path".into());
        }
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

/// `auto` (or an empty value) leaves the setting to its derived default.
impl<T: ConfigValue> ConfigValue for Option<T> {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s.is_empty() || s == "auto" {
            Ok(None)
        } else {
            T::parse_value(s).map(Some)
        }
    }
    fn render(&self) -> String {
        self.as_ref().map_or_else(|| "auto".to_string(), T::render)
    }
}

macro_rules! named_value {
    ($t:ty, $name:expr, $parse:expr, $choices:literal) => {
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                $parse(s).ok_or_else(|| format!("expected one of {}", $choices))
            }
            fn render(&self) -> String {
                $name(*self).to_string()
            }
        }
    };
}

named_value!(
    Split,
    |s: Split| match s {
        Split::All => "all",
        Split::Train => "train",
        Split::Test => "test",
    },
    |s: &str| match s {
        "all" => Some(Split::All),
        "train" => Some(Split::Train),
        "test" => Some(Split::Test),
        _ => None,
    },
    "all|train|test"
);
named_value!(
    OrderSource,
    |o: OrderSource| match o {
        OrderSource::Estimated => "estimated",
        OrderSource::Fixed => "fixed",
    },
    OrderSource::parse,
    "estimated|fixed"
);
named_value!(
    ProbSource,
    |p: ProbSource| match p {
        ProbSource::Align => "align",
        ProbSource::Frame => "frame",
    },
    ProbSource::parse,
    "align|frame"
);
named_value!(
    DatasetPreset,
    DatasetPreset::name,
    DatasetPreset::parse,
    "50salads-eval|50salads-mid|yti|breakfast|desktop-orig|desktop-extra"
);
named_value!(
    Variant,
    Variant::name,
    Variant::parse,
    "frame|frame-segment|full|fixed-order-targets"
);

macro_rules! run_config {
    ($($key:ident : $ty:ty = $default:expr, $help:literal;)*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $(pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($key: $default,)* }
            }
        }

        /// Every key with its help text, in echo order.
        pub const KEYS: &[(&str, &str)] = &[$((stringify!($key), $help)),*];

        impl RunConfig {
            pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
                let value = value.trim();
                match key {
                    $(stringify!($key) => {
                        self.$key = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|e| CliError::config(format!("{key}={value}: {e}")))?;
                    })*
                    _ => return Err(CliError::config(format!("unknown key {key}"))),
                }
                Ok(())
            }

            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($key), self.$key.render())),*]
            }
        }
    };
}

run_config! {
    data_dir: PathBuf = PathBuf::from("data"), "dataset directory (manifest.json)";
    out_dir: PathBuf = PathBuf::from("out"), "directory receiving all outputs";
    checkpoint: Option<PathBuf> = None, "model checkpoint to read (segment, inspect)";
    pred_dir: Option<PathBuf> = None, "directory of <video>.csv predictions (eval)";
    activity: Option<String> = None, "activity to use; auto when the dataset has one";
    split: Split = Split::All, "videos to use: all|train|test (needs split.json)";
    threads: usize = 0, "worker threads for segment/eval; 0 uses all cores";

    videos: usize = 20, "synthetic videos";
    k: usize = 5, "synthetic actions per activity";
    d_in: usize = 16, "synthetic feature dimension";
    min_frames: usize = 100, "shortest synthetic video";
    max_frames: usize = 200, "longest synthetic video";
    cluster_sep: f64 = 6.0, "minimum distance between action centers";
    noise_sigma: f64 = 1.0, "per-frame feature noise";
    permute_prob: f64 = 0.0, "probability a video permutes the action order";
    missing_prob: f64 = 0.0, "probability a video drops one action";
    train_fraction: f64 = 0.8, "fraction of videos in the train split";
    seed: u64 = 7, "seed for data generation, initialization and shuffling";

    model_dim: Option<usize> = None, "embedding width; auto uses the preset";
    encoder_layers: usize = 2, "encoder layers";
    decoder_layers: usize = 2, "decoder layers";
    tau: f64 = 0.1, "frame softmax temperature";
    tau_prime: f64 = 1e-3, "alignment softmax temperature";
    encoder_dropout: f64 = 0.3, "encoder dropout (second stage only)";
    decoder_dropout: f64 = 0.1, "decoder dropout (second stage only)";
    position_scale: f64 = 0.1, "amplitude of the position code";
    encoder_positions: bool = false, "add position codes to the encoder input";

    stage1_epochs: usize = 30, "frame-only epochs";
    stage2_epochs: usize = 70, "combined-objective epochs";
    lr: f64 = 1e-3, "Adam learning rate";
    weight_decay: f64 = 1e-5, "decoupled weight decay";
    alpha: f64 = 1.0, "weight of the segment loss";
    beta: f64 = 1.0, "weight of the alignment loss";
    order: OrderSource = OrderSource::Estimated, "order for decoder input and targets: estimated|fixed";
    variant: Option<Variant> = None, "ablation variant; overrides train and decode settings";

    preset: DatasetPreset = DatasetPreset::SaladsEval, "hyperparameter preset";
    rho: Option<f64> = None, "transport entropy weight; auto uses the preset";
    sinkhorn_iterations: usize = taf_core::ot_prior::TRAIN_SINKHORN_ITERATIONS, "sinkhorn sweeps per solve";
    sigma: Option<f64> = None, "prior band width; auto uses 0.75/K";

    source: ProbSource = ProbSource::Align, "decoding probabilities: align|frame";
    decode_order: OrderSource = OrderSource::Estimated, "decoding order: estimated|fixed";
    min_seg_frames: usize = 1, "shortest decoded segment";

    video: Option<String> = None, "video to inspect; auto picks the first";
    frames: usize = 100, "prior rows for inspect priors";
    transcript: Option<String> = None, "comma-separated action order for inspect priors";
}

/// `some_key` → `some-key`.
pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

impl RunConfig {
    /// Apply `key=value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> CliResult<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("{}:{}: expected key=value", origin.display(), i + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| CliError::config(format!("{}:{}: {}", origin.display(), i + 1, e.msg)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> CliResult<()> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        self.apply_text(&text, path)
    }

    /// Apply `TAF_<KEY>` variables; any other `TAF_` variable is an error.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> CliResult<()> {
        for (name, value) in vars {
            let Some(key) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let key = key.to_ascii_lowercase();
            self.set(&key, &value)
                .map_err(|e| CliError::config(format!("environment {name}: {}", e.msg)))?;
        }
        Ok(())
    }

    /// Entries that determine a run's results. `out_dir` is left out so
    /// the same run written to two places yields identical artifacts.
    pub fn echo_entries(&self) -> Vec<(&'static str, String)> {
        self.entries().into_iter().filter(|(k, _)| *k != "out_dir").collect()
    }

    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (key, value) in self.echo_entries() {
            let _ = writeln!(s, "{key}={value}");
        }
        s
    }

    pub fn write_echo(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(ECHO_FILE);
        fs::write(&path, self.echo()).map_err(|e| CliError::io(&path, e))
    }

    pub fn echo_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.echo_entries()
                .into_iter()
                .map(|(k, v)| (k.to_string(), serde_json::Value::String(v)))
                .collect(),
        )
    }

    /// Checks that do not depend on the dataset.
    pub fn validate(&self) -> CliResult<()> {
        self.synth_config().validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(CliError::config(format!(
                "train_fraction={} outside (0, 1)",
                self.train_fraction
            )));
        }
        self.train_config().validate()?;
        self.decode_config().validate()?;
        if self.model_dim == Some(0) {
            return Err(CliError::config("model_dim must be positive"));
        }
        if self.frames == 0 {
            return Err(CliError::config("frames must be positive"));
        }
        Ok(())
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            num_videos: self.videos,
            num_actions: self.k,
            input_dim: self.d_in,
            min_frames: self.min_frames,
            max_frames: self.max_frames,
            cluster_sep: self.cluster_sep,
            noise_sigma: self.noise_sigma,
            permute_prob: self.permute_prob,
            missing_prob: self.missing_prob,
            seed: self.seed,
        }
    }

    pub fn rho(&self) -> f64 {
        self.rho.unwrap_or_else(|| self.preset.rho())
    }

    pub fn pseudo_config(&self) -> PseudoLabelConfig {
        PseudoLabelConfig {
            sinkhorn: SinkhornConfig::fixed(self.rho(), self.sinkhorn_iterations),
            sigma: self.sigma,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let base = TrainConfig {
            stage1_epochs: self.stage1_epochs,
            stage2_epochs: self.stage2_epochs,
            lr: self.lr,
            weight_decay: self.weight_decay,
            alpha: self.alpha,
            beta: self.beta,
            seed: self.seed,
            pseudo: self.pseudo_config(),
            order: self.order,
            ..TrainConfig::default()
        };
        match self.variant {
            Some(v) => v.train_config(&base),
            None => base,
        }
    }

    pub fn decode_config(&self) -> DecodeConfig {
        let base = DecodeConfig {
            source: self.source,
            order: self.decode_order,
            min_seg_frames: self.min_seg_frames,
            pseudo: self.pseudo_config(),
        };
        match self.variant {
            Some(v) => v.decode_config(&base),
            None => base,
        }
    }

    pub fn model_config(&self, input_dim: usize, num_actions: usize) -> ModelConfig {
        ModelConfig {
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            tau: self.tau,
            tau_prime: self.tau_prime,
            encoder_dropout: self.encoder_dropout,
            decoder_dropout: self.decoder_dropout,
            position_scale: self.position_scale,
            encoder_positions: self.encoder_positions,
            ..ModelConfig::new(
                input_dim,
                self.model_dim.unwrap_or_else(|| self.preset.feature_dim()),
                num_actions,
            )
        }
    }
}
