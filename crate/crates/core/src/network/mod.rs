//! The trainable model: attention encoder, transcript embedding, causal
//! cross-attention decoder, segment prediction head, and action prototypes.
//!
//! Gradients are computed by hand-written reverse passes in [`model`].

pub mod checkpoint;
pub mod layers;
pub mod model;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use layers::{Attention, LayerNorm, Linear, Mlp};

pub use model::{AlignOutput, DecoderOutput, EncoderOutput, ForwardTrace, FrameOutput, Model, Upstream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub num_actions: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Temperature of the frame-level prototype softmax.
    pub tau: f64,
    /// Temperature of the frame-to-segment alignment softmax.
    pub tau_prime: f64,
    pub encoder_dropout: f64,
    pub decoder_dropout: f64,
    /// Amplitude of the sinusoidal position code.
    pub position_scale: f64,
    /// Add position codes to the encoder input as well.
    pub encoder_positions: bool,
}

impl ModelConfig {
    pub fn new(input_dim: usize, model_dim: usize, num_actions: usize) -> Self {
        Self {
            input_dim,
            model_dim,
            num_actions,
            encoder_layers: 2,
            decoder_layers: 2,
            tau: 0.1,
            tau_prime: 1e-3,
            encoder_dropout: 0.3,
            decoder_dropout: 0.1,
            position_scale: 0.1,
            encoder_positions: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.input_dim == 0 || self.model_dim == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.num_actions < 1 {
            return bad("model needs at least one action".into());
        }
        if !(self.tau > 0.0) || !(self.tau_prime > 0.0) {
            return bad(format!(
                "temperatures must be positive, got tau={} tau'={}",
                self.tau, self.tau_prime
            ));
        }
        for rate in [self.encoder_dropout, self.decoder_dropout] {
            if !(0.0..1.0).contains(&rate) {
                return bad(format!("dropout rate {rate} outside [0, 1)"));
            }
        }
        Ok(())
    }

    /// Same architecture with all dropout disabled.
    pub fn without_dropout(&self) -> Self {
        Self {
            encoder_dropout: 0.0,
            decoder_dropout: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: Attention,
    pub norm2: LayerNorm,
    pub cross_attn: Attention,
    pub norm3: LayerNorm,
    pub mlp: Mlp,
}

/// Every learnable tensor. The same type doubles as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub input: Linear,
    pub encoder: Vec<EncoderLayer>,
    /// `(K + 1) × d`; the last row is the start-of-transcript token.
    pub embedding: Array2<f64>,
    pub decoder: Vec<DecoderLayer>,
    pub head: Linear,
    /// `K × d`, unit rows.
    pub prototypes: Array2<f64>,
}

/// Parameter tensors trained in the frame-only stage.
pub fn is_frame_stage_tensor(name: &str) -> bool {
    name.starts_with("encoder.") || name == "prototypes"
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.model_dim;
        let k = cfg.num_actions;
        Self {
            input: Linear::zeros(cfg.input_dim, d),
            encoder: (0..cfg.encoder_layers)
                .map(|_| EncoderLayer {
                    norm1: LayerNorm::zeros(d),
                    attn: Attention::zeros(d),
                    norm2: LayerNorm::zeros(d),
                    mlp: Mlp::zeros(d),
                })
                .collect(),
            embedding: Array2::zeros((k + 1, d)),
            decoder: (0..cfg.decoder_layers)
                .map(|_| DecoderLayer {
                    norm1: LayerNorm::zeros(d),
                    self_attn: Attention::zeros(d),
                    norm2: LayerNorm::zeros(d),
                    cross_attn: Attention::zeros(d),
                    norm3: LayerNorm::zeros(d),
                    mlp: Mlp::zeros(d),
                })
                .collect(),
            head: Linear::zeros(d, k),
            prototypes: Array2::zeros((k, d)),
        }
    }

    /// Seeded initialization: weight matrices uniform in `±1/√fan_in`,
    /// biases zero, layer norms identity, prototypes random unit vectors.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros(cfg);
        let d = cfg.model_dim;
        for (name, t) in params.tensors_mut() {
            if name.ends_with(".gain") {
                t.fill(1.0);
                continue;
            }
            if name.ends_with(".bias") {
                continue;
            }
            let fan_in = if name == "embedding" || name == "prototypes" {
                d
            } else {
                t.nrows()
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            t.mapv_inplace(|_| rng.gen_range(-bound..bound));
        }
        params.normalize_prototypes();
        params
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn normalize_prototypes(&mut self) {
        for mut row in self.prototypes.rows_mut() {
            let n = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|v| v / n);
        }
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = Vec::new();
        out.push(("encoder.input.weight".into(), &self.input.weight));
        out.push(("encoder.input.bias".into(), &self.input.bias));
        for (l, layer) in self.encoder.iter().enumerate() {
            let p = format!("encoder.{l}");
            push_norm(&mut out, &format!("{p}.norm1"), &layer.norm1);
            push_attn(&mut out, &format!("{p}.attn"), &layer.attn);
            push_norm(&mut out, &format!("{p}.norm2"), &layer.norm2);
            push_mlp(&mut out, &format!("{p}.mlp"), &layer.mlp);
        }
        out.push(("embedding".into(), &self.embedding));
        for (l, layer) in self.decoder.iter().enumerate() {
            let p = format!("decoder.{l}");
            push_norm(&mut out, &format!("{p}.norm1"), &layer.norm1);
            push_attn(&mut out, &format!("{p}.self_attn"), &layer.self_attn);
            push_norm(&mut out, &format!("{p}.norm2"), &layer.norm2);
            push_attn(&mut out, &format!("{p}.cross_attn"), &layer.cross_attn);
            push_norm(&mut out, &format!("{p}.norm3"), &layer.norm3);
            push_mlp(&mut out, &format!("{p}.mlp"), &layer.mlp);
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out.push(("prototypes".into(), &self.prototypes));
        out
    }

    /// Mutable view of [`tensors`](Self::tensors), same order and names.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let names: Vec<String> = self.tensors().into_iter().map(|(n, _)| n).collect();
        let mut refs: Vec<&mut Array2<f64>> = Vec::with_capacity(names.len());
        refs.push(&mut self.input.weight);
        refs.push(&mut self.input.bias);
        for layer in &mut self.encoder {
            refs.extend([&mut layer.norm1.gain, &mut layer.norm1.bias]);
            refs.extend(attn_mut(&mut layer.attn));
            refs.extend([&mut layer.norm2.gain, &mut layer.norm2.bias]);
            refs.extend(mlp_mut(&mut layer.mlp));
        }
        refs.push(&mut self.embedding);
        for layer in &mut self.decoder {
            refs.extend([&mut layer.norm1.gain, &mut layer.norm1.bias]);
            refs.extend(attn_mut(&mut layer.self_attn));
            refs.extend([&mut layer.norm2.gain, &mut layer.norm2.bias]);
            refs.extend(attn_mut(&mut layer.cross_attn));
            refs.extend([&mut layer.norm3.gain, &mut layer.norm3.bias]);
            refs.extend(mlp_mut(&mut layer.mlp));
        }
        refs.push(&mut self.head.weight);
        refs.push(&mut self.head.bias);
        refs.push(&mut self.prototypes);
        names.into_iter().zip(refs).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

fn push_norm<'a>(out: &mut Vec<(String, &'a Array2<f64>)>, prefix: &str, n: &'a LayerNorm) {
    out.push((format!("{prefix}.gain"), &n.gain));
    out.push((format!("{prefix}.bias"), &n.bias));
}

fn push_attn<'a>(out: &mut Vec<(String, &'a Array2<f64>)>, prefix: &str, a: &'a Attention) {
    out.push((format!("{prefix}.query"), &a.query));
    out.push((format!("{prefix}.key"), &a.key));
    out.push((format!("{prefix}.value"), &a.value));
    out.push((format!("{prefix}.output"), &a.output));
}

fn push_mlp<'a>(out: &mut Vec<(String, &'a Array2<f64>)>, prefix: &str, m: &'a Mlp) {
    out.push((format!("{prefix}.up.weight"), &m.up.weight));
    out.push((format!("{prefix}.up.bias"), &m.up.bias));
    out.push((format!("{prefix}.down.weight"), &m.down.weight));
    out.push((format!("{prefix}.down.bias"), &m.down.bias));
}

fn attn_mut(a: &mut Attention) -> [&mut Array2<f64>; 4] {
    [&mut a.query, &mut a.key, &mut a.value, &mut a.output]
}

fn mlp_mut(m: &mut Mlp) -> [&mut Array2<f64>; 4] {
    [&mut m.up.weight, &mut m.up.bias, &mut m.down.weight, &mut m.down.bias]
}
