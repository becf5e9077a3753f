//! Central finite-difference check of the analytic gradients.

use ndarray::ArrayView2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::network::Model;
use crate::training::{loss_and_grads, Targets};

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    /// `‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞, 1e-8)`.
    pub relative_error: f64,
    pub max_abs_gradient: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.relative_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

/// Total loss of one forward pass. With `dropout_seed` set, every call draws
/// the same dropout masks, so the loss is a deterministic function of the
/// parameters.
fn total_loss(
    model: &Model,
    features: ArrayView2<f64>,
    targets: &Targets,
    alpha: f64,
    beta: f64,
    dropout_seed: Option<u64>,
) -> Result<(f64, crate::network::ModelParams)> {
    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let trace = model.forward(features, targets.transcript.as_ref(), rng.as_mut())?;
    let (loss, grads) = loss_and_grads(model, &trace, targets, alpha, beta)?;
    Ok((loss.total, grads))
}

/// Compare analytic gradients of the combined loss against central
/// differences with step `h`, tensor by tensor.
pub fn check_gradients(
    model: &Model,
    features: ArrayView2<f64>,
    targets: &Targets,
    alpha: f64,
    beta: f64,
    h: f64,
    dropout_seed: Option<u64>,
) -> Result<GradCheckReport> {
    let (_, analytic) = total_loss(model, features, targets, alpha, beta, dropout_seed)?;
    let mut probe = model.clone();
    let mut tensors = Vec::new();
    let analytic_tensors = analytic.tensors();
    let count = analytic_tensors.len();
    for idx in 0..count {
        let (name, grad) = (&analytic_tensors[idx].0, analytic_tensors[idx].1);
        let shape = grad.dim();
        let mut max_diff: f64 = 0.0;
        let mut max_num: f64 = 0.0;
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let original = probe.params.tensors()[idx].1[[r, c]];
                set_entry(&mut probe, idx, r, c, original + h);
                let (plus, _) = total_loss(&probe, features, targets, alpha, beta, dropout_seed)?;
                set_entry(&mut probe, idx, r, c, original - h);
                let (minus, _) = total_loss(&probe, features, targets, alpha, beta, dropout_seed)?;
                set_entry(&mut probe, idx, r, c, original);
                let numeric = (plus - minus) / (2.0 * h);
                max_diff = max_diff.max((numeric - grad[[r, c]]).abs());
                max_num = max_num.max(numeric.abs());
            }
        }
        let max_abs = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        tensors.push(TensorCheck {
            name: name.clone(),
            relative_error: max_diff / max_abs.max(max_num).max(1e-8),
            max_abs_gradient: max_abs,
        });
    }
    Ok(GradCheckReport { tensors })
}

fn set_entry(model: &mut Model, idx: usize, r: usize, c: usize, value: f64) {
    let mut tensors = model.params.tensors_mut();
    tensors[idx].1[[r, c]] = value;
}
