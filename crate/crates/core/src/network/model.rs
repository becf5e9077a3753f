//! Forward passes with recorded traces, and the exact reverse pass.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    apply_mask, dropout_mask, l2_normalize_rows, l2_normalize_rows_backward, positional_encoding, softmax_rows,
    AttentionCache, LayerNormCache, MlpCache,
};
use super::{ModelConfig, ModelParams};
use crate::data_model::Transcript;
use crate::error::{Error, Result};
use crate::pseudo_labels::scatter_by_transcript;

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

#[derive(Debug, Clone)]
struct EncoderLayerTrace {
    norm1_out: Array2<f64>,
    norm1: LayerNormCache,
    attn: AttentionCache,
    drop1: Option<Array2<f64>>,
    norm2_out: Array2<f64>,
    norm2: LayerNormCache,
    mlp: MlpCache,
    drop2: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct EncoderTrace {
    features: Array2<f64>,
    layers: Vec<EncoderLayerTrace>,
    norms: Vec<f64>,
}

impl EncoderTrace {
    /// Self-attention weights (`B × B`) of each encoder layer.
    pub fn attention_weights(&self) -> Vec<&Array2<f64>> {
        self.layers.iter().map(|l| &l.attn.weights).collect()
    }
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Unit-norm frame embeddings, `B × d`.
    pub embeddings: Array2<f64>,
    pub trace: EncoderTrace,
}

#[derive(Debug, Clone)]
pub struct FrameOutput {
    /// `E·Ĉᵀ/τ`, `B × K`.
    pub logits: Array2<f64>,
    unit_prototypes: Array2<f64>,
    prototype_norms: Vec<f64>,
}

impl FrameOutput {
    /// `P_f`: row softmax of the logits.
    pub fn probs(&self) -> Array2<f64> {
        softmax_rows(self.logits.view())
    }
}

#[derive(Debug, Clone)]
struct DecoderLayerTrace {
    norm1_out: Array2<f64>,
    norm1: LayerNormCache,
    self_attn: AttentionCache,
    drop1: Option<Array2<f64>>,
    norm2_out: Array2<f64>,
    norm2: LayerNormCache,
    cross_attn: AttentionCache,
    drop2: Option<Array2<f64>>,
    norm3_out: Array2<f64>,
    norm3: LayerNormCache,
    mlp: MlpCache,
    drop3: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct DecoderTrace {
    pub transcript: Transcript,
    tokens: Vec<usize>,
    /// Encoder embeddings plus position code; keys and values of the
    /// cross-attention.
    memory: Array2<f64>,
    layers: Vec<DecoderLayerTrace>,
}

impl DecoderTrace {
    /// Cross-attention weights (`N × B`) of each decoder layer.
    pub fn cross_attention_weights(&self) -> Vec<&Array2<f64>> {
        self.layers.iter().map(|l| &l.cross_attn.weights).collect()
    }
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// Transcript features `S` (embedding plus position code), `N × d`.
    pub transcript_features: Array2<f64>,
    /// Decoder features `D`, `N × d`.
    pub features: Array2<f64>,
    /// Segment-level logits, `N × K`.
    pub segment_logits: Array2<f64>,
    pub trace: DecoderTrace,
}

impl DecoderOutput {
    /// `P_s`: row softmax of the segment logits.
    pub fn segment_probs(&self) -> Array2<f64> {
        softmax_rows(self.segment_logits.view())
    }
}

#[derive(Debug, Clone)]
pub struct AlignOutput {
    /// `(E+PE)·(D+PE)ᵀ/τ'`, indexed by transcript position, `B × N`.
    pub logits: Array2<f64>,
    frames_pos: Array2<f64>,
    segments_pos: Array2<f64>,
}

impl AlignOutput {
    /// Row softmax over transcript positions, `B × N`.
    pub fn position_probs(&self) -> Array2<f64> {
        softmax_rows(self.logits.view())
    }

    /// `P_a`, columns scattered from transcript positions to action ids.
    pub fn action_probs(&self, transcript: &Transcript) -> Array2<f64> {
        scatter_by_transcript(self.position_probs().view(), transcript)
    }
}

/// Everything recorded by one full forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub encoder: EncoderOutput,
    pub frame: FrameOutput,
    pub decoder: Option<DecoderOutput>,
    pub align: Option<AlignOutput>,
}

/// Loss gradients with respect to the three logit blocks.
#[derive(Debug, Clone, Default)]
pub struct Upstream {
    pub frame_logits: Option<Array2<f64>>,
    pub segment_logits: Option<Array2<f64>>,
    /// Position-indexed, `B × N`.
    pub align_logits: Option<Array2<f64>>,
}

fn check_finite(m: &Array2<f64>, stage: &'static str, layer: usize) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation { stage, layer })
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Ok(Self { config, params })
    }

    fn position_code(&self, len: usize) -> Array2<f64> {
        positional_encoding(len, self.config.model_dim, self.config.position_scale)
    }

    /// Encode `B × d_in` features into unit-norm `B × d` embeddings.
    ///
    /// Dropout is applied only when `rng` is given.
    pub fn encode<R: Rng>(&self, features: ArrayView2<f64>, mut rng: Option<&mut R>) -> Result<EncoderOutput> {
        if features.ncols() != self.config.input_dim {
            return Err(Error::shape(
                "encoder input",
                (features.nrows(), self.config.input_dim),
                features.dim(),
            ));
        }
        if features.nrows() == 0 {
            return Err(Error::EmptySequence);
        }
        let rate = self.config.encoder_dropout;
        let mut h = self.params.input.forward(features);
        if self.config.encoder_positions {
            h += &self.position_code(h.nrows());
        }
        check_finite(&h, "encoder", 0)?;

        let mut layers = Vec::with_capacity(self.params.encoder.len());
        for (l, layer) in self.params.encoder.iter().enumerate() {
            let input = h;
            let (norm1_out, norm1) = layer.norm1.forward(input.view());
            let (attn_out, attn) = layer.attn.forward(norm1_out.view(), norm1_out.view(), false);
            let drop1 = dropout_mask(attn_out.dim(), rate, rng.as_deref_mut());
            let mid = &input + &apply_mask(attn_out, drop1.as_ref());
            let (norm2_out, norm2) = layer.norm2.forward(mid.view());
            let (mlp_out, mlp) = layer.mlp.forward(norm2_out.view());
            let drop2 = dropout_mask(mlp_out.dim(), rate, rng.as_deref_mut());
            h = &mid + &apply_mask(mlp_out, drop2.as_ref());
            check_finite(&h, "encoder", l + 1)?;
            layers.push(EncoderLayerTrace {
                norm1_out,
                norm1,
                attn,
                drop1,
                norm2_out,
                norm2,
                mlp,
                drop2,
            });
        }
        let (embeddings, norms) = l2_normalize_rows(h.view());
        Ok(EncoderOutput {
            embeddings,
            trace: EncoderTrace {
                features: features.to_owned(),
                layers,
                norms,
            },
        })
    }

    /// Frame-level logits against unit-normalized prototypes.
    pub fn frame_logits(&self, embeddings: ArrayView2<f64>) -> FrameOutput {
        let (unit_prototypes, prototype_norms) = l2_normalize_rows(self.params.prototypes.view());
        let logits = embeddings.dot(&unit_prototypes.t()) / self.config.tau;
        FrameOutput {
            logits,
            unit_prototypes,
            prototype_norms,
        }
    }

    /// Run the decoder with teacher forcing: position `p` sees the start token
    /// and `t[0..p]`, never `t[p]` itself.
    pub fn decode<R: Rng>(
        &self,
        transcript: &Transcript,
        embeddings: ArrayView2<f64>,
        mut rng: Option<&mut R>,
    ) -> Result<DecoderOutput> {
        let k = self.config.num_actions;
        if transcript.len() != k {
            return Err(Error::InvalidTranscript(format!(
                "transcript has {} entries for {k} actions",
                transcript.len()
            )));
        }
        if embeddings.ncols() != self.config.model_dim {
            return Err(Error::shape(
                "decoder memory",
                (embeddings.nrows(), self.config.model_dim),
                embeddings.dim(),
            ));
        }
        let n = transcript.len();
        let rate = self.config.decoder_dropout;
        let memory = &embeddings + &self.position_code(embeddings.nrows());

        let tokens: Vec<usize> = std::iter::once(k)
            .chain(transcript.actions()[..n - 1].iter().copied())
            .collect();
        let mut h = Array2::zeros((n, self.config.model_dim));
        for (p, &tok) in tokens.iter().enumerate() {
            h.row_mut(p).assign(&self.params.embedding.row(tok));
        }
        h += &self.position_code(n);
        let transcript_features = h.clone();

        let mut layers = Vec::with_capacity(self.params.decoder.len());
        for (l, layer) in self.params.decoder.iter().enumerate() {
            let input = h;
            let (norm1_out, norm1) = layer.norm1.forward(input.view());
            let (sa_out, self_attn) = layer.self_attn.forward(norm1_out.view(), norm1_out.view(), true);
            let drop1 = dropout_mask(sa_out.dim(), rate, rng.as_deref_mut());
            let mid1 = &input + &apply_mask(sa_out, drop1.as_ref());

            let (norm2_out, norm2) = layer.norm2.forward(mid1.view());
            let (ca_out, cross_attn) = layer.cross_attn.forward(norm2_out.view(), memory.view(), false);
            let drop2 = dropout_mask(ca_out.dim(), rate, rng.as_deref_mut());
            let mid2 = &mid1 + &apply_mask(ca_out, drop2.as_ref());

            let (norm3_out, norm3) = layer.norm3.forward(mid2.view());
            let (mlp_out, mlp) = layer.mlp.forward(norm3_out.view());
            let drop3 = dropout_mask(mlp_out.dim(), rate, rng.as_deref_mut());
            h = &mid2 + &apply_mask(mlp_out, drop3.as_ref());
            check_finite(&h, "decoder", l)?;
            layers.push(DecoderLayerTrace {
                norm1_out,
                norm1,
                self_attn,
                drop1,
                norm2_out,
                norm2,
                cross_attn,
                drop2,
                norm3_out,
                norm3,
                mlp,
                drop3,
            });
        }
        let segment_logits = self.params.head.forward(h.view());
        check_finite(&segment_logits, "decoder", self.params.decoder.len())?;
        Ok(DecoderOutput {
            transcript_features,
            features: h,
            segment_logits,
            trace: DecoderTrace {
                transcript: transcript.clone(),
                tokens,
                memory,
                layers,
            },
        })
    }

    /// Frame-to-segment alignment logits between position-coded encoder and
    /// decoder features.
    pub fn align(&self, embeddings: ArrayView2<f64>, decoder_features: ArrayView2<f64>) -> AlignOutput {
        let frames_pos = &embeddings + &self.position_code(embeddings.nrows());
        let segments_pos = &decoder_features + &self.position_code(decoder_features.nrows());
        let logits = frames_pos.dot(&segments_pos.t()) / self.config.tau_prime;
        AlignOutput {
            logits,
            frames_pos,
            segments_pos,
        }
    }

    /// Full forward pass. With `transcript == None` only the frame-level
    /// branch runs.
    pub fn forward<R: Rng>(
        &self,
        features: ArrayView2<f64>,
        transcript: Option<&Transcript>,
        mut rng: Option<&mut R>,
    ) -> Result<ForwardTrace> {
        let encoder = self.encode(features, rng.as_deref_mut())?;
        self.forward_from(encoder, transcript, rng)
    }

    /// Continue a forward pass from an existing encoder output.
    pub fn forward_from<R: Rng>(
        &self,
        encoder: EncoderOutput,
        transcript: Option<&Transcript>,
        rng: Option<&mut R>,
    ) -> Result<ForwardTrace> {
        let frame = self.frame_logits(encoder.embeddings.view());
        let (decoder, align) = match transcript {
            Some(t) => {
                let dec = self.decode(t, encoder.embeddings.view(), rng)?;
                let align = self.align(encoder.embeddings.view(), dec.features.view());
                (Some(dec), Some(align))
            }
            None => (None, None),
        };
        Ok(ForwardTrace {
            encoder,
            frame,
            decoder,
            align,
        })
    }

    /// Exact gradients of the loss whose logit gradients are `upstream`.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &Upstream) -> Result<ModelParams> {
        let p = &self.params;
        let mut grads = p.zeros_like();
        let e = &trace.encoder.embeddings;
        let mut d_e = Array2::<f64>::zeros(e.raw_dim());

        if let Some(dz) = &upstream.frame_logits {
            let frame = &trace.frame;
            if dz.dim() != frame.logits.dim() {
                return Err(Error::shape("frame logit gradient", frame.logits.dim(), dz.dim()));
            }
            let inv_tau = 1.0 / self.config.tau;
            d_e += &(dz.dot(&frame.unit_prototypes) * inv_tau);
            let d_unit = dz.t().dot(e) * inv_tau;
            grads.prototypes +=
                &l2_normalize_rows_backward(frame.unit_prototypes.view(), &frame.prototype_norms, d_unit.view());
        }

        let needs_decoder = upstream.segment_logits.is_some() || upstream.align_logits.is_some();
        if needs_decoder {
            let dec = trace.decoder.as_ref().ok_or(Error::MissingTrace("decoder"))?;
            let mut d_dec = Array2::<f64>::zeros(dec.features.raw_dim());

            if let Some(dz) = &upstream.align_logits {
                let align = trace.align.as_ref().ok_or(Error::MissingTrace("alignment"))?;
                if dz.dim() != align.logits.dim() {
                    return Err(Error::shape("alignment logit gradient", align.logits.dim(), dz.dim()));
                }
                let inv = 1.0 / self.config.tau_prime;
                d_e += &(dz.dot(&align.segments_pos) * inv);
                d_dec += &(dz.t().dot(&align.frames_pos) * inv);
            }
            if let Some(dz) = &upstream.segment_logits {
                if dz.dim() != dec.segment_logits.dim() {
                    return Err(Error::shape(
                        "segment logit gradient",
                        dec.segment_logits.dim(),
                        dz.dim(),
                    ));
                }
                d_dec += &p.head.backward(dec.features.view(), dz.view(), &mut grads.head);
            }
            d_e += &self.decoder_backward(&dec.trace, d_dec, &mut grads);
        }

        self.encoder_backward(&trace.encoder, d_e, &mut grads);
        Ok(grads)
    }

    /// Returns the gradient with respect to the encoder embeddings (through
    /// the cross-attention memory).
    fn decoder_backward(&self, trace: &DecoderTrace, d_out: Array2<f64>, grads: &mut ModelParams) -> Array2<f64> {
        let mut d_h = d_out;
        let mut d_memory = Array2::<f64>::zeros(trace.memory.raw_dim());
        for (l, (layer, lt)) in self.params.decoder.iter().zip(&trace.layers).enumerate().rev() {
            let g = &mut grads.decoder[l];

            // h = mid2 + drop(mlp(norm3(mid2)))
            let d_mlp_out = apply_mask(d_h.clone(), lt.drop3.as_ref());
            let d_norm3_out = layer
                .mlp
                .backward(lt.norm3_out.view(), &lt.mlp, d_mlp_out.view(), &mut g.mlp);
            let mut d_mid2 = d_h;
            d_mid2 += &layer.norm3.backward(&lt.norm3, d_norm3_out.view(), &mut g.norm3);

            // mid2 = mid1 + drop(cross(norm2(mid1), memory))
            let d_ca_out = apply_mask(d_mid2.clone(), lt.drop2.as_ref());
            let (d_norm2_out, d_mem) = layer.cross_attn.backward(
                lt.norm2_out.view(),
                trace.memory.view(),
                &lt.cross_attn,
                d_ca_out.view(),
                &mut g.cross_attn,
            );
            d_memory += &d_mem;
            let mut d_mid1 = d_mid2;
            d_mid1 += &layer.norm2.backward(&lt.norm2, d_norm2_out.view(), &mut g.norm2);

            // mid1 = input + drop(self(norm1(input)))
            let d_sa_out = apply_mask(d_mid1.clone(), lt.drop1.as_ref());
            let (dq, dkv) = layer.self_attn.backward(
                lt.norm1_out.view(),
                lt.norm1_out.view(),
                &lt.self_attn,
                d_sa_out.view(),
                &mut g.self_attn,
            );
            let d_norm1_out = dq + dkv;
            let mut d_input = d_mid1;
            d_input += &layer.norm1.backward(&lt.norm1, d_norm1_out.view(), &mut g.norm1);
            d_h = d_input;
        }
        for (p, &tok) in trace.tokens.iter().enumerate() {
            let mut row = grads.embedding.row_mut(tok);
            row += &d_h.row(p);
        }
        d_memory
    }

    fn encoder_backward(&self, trace: &EncoderOutput, d_embeddings: Array2<f64>, grads: &mut ModelParams) {
        let t = &trace.trace;
        let mut d_h = l2_normalize_rows_backward(trace.embeddings.view(), &t.norms, d_embeddings.view());
        for (l, (layer, lt)) in self.params.encoder.iter().zip(&t.layers).enumerate().rev() {
            let g = &mut grads.encoder[l];
            let d_mlp_out = apply_mask(d_h.clone(), lt.drop2.as_ref());
            let d_norm2_out = layer
                .mlp
                .backward(lt.norm2_out.view(), &lt.mlp, d_mlp_out.view(), &mut g.mlp);
            let mut d_mid = d_h;
            d_mid += &layer.norm2.backward(&lt.norm2, d_norm2_out.view(), &mut g.norm2);

            let d_attn_out = apply_mask(d_mid.clone(), lt.drop1.as_ref());
            let (dq, dkv) = layer.attn.backward(
                lt.norm1_out.view(),
                lt.norm1_out.view(),
                &lt.attn,
                d_attn_out.view(),
                &mut g.attn,
            );
            let d_norm1_out = dq + dkv;
            let mut d_input = d_mid;
            d_input += &layer.norm1.backward(&lt.norm1, d_norm1_out.view(), &mut g.norm1);
            d_h = d_input;
        }
        self.params
            .input
            .backward(t.features.view(), d_h.view(), &mut grads.input);
    }
}
