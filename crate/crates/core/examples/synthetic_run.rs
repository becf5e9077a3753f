//! Train and evaluate one variant on a synthetic dataset.
//!
//! Usage: synthetic_run [variant] [permute_prob] [seed]

use std::time::Instant;

use taf_core::datagen::{generate, SynthConfig};
use taf_core::inference::DecodeConfig;
use taf_core::network::{Model, ModelConfig};
use taf_core::pipeline::{evaluate_model, Variant};
use taf_core::training::{train, TrainConfig};

fn main() -> taf_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let variant = args.get(1).and_then(|s| Variant::parse(s)).unwrap_or(Variant::Full);
    let permute_prob: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(7);

    let synth = SynthConfig {
        permute_prob,
        seed,
        ..SynthConfig::default()
    };
    let (dataset, _) = generate(&synth)?;
    let model = Model::new(ModelConfig::new(synth.input_dim, 32, synth.num_actions), seed)?;
    let cfg = variant.train_config(&TrainConfig {
        seed,
        ..TrainConfig::default()
    });
    let start = Instant::now();
    let out = train(model, &dataset.features(), &cfg, |epoch, loss| {
        if epoch % 10 == 0 {
            println!("epoch {epoch:3} mean loss {loss:.5}");
        }
    })?;
    let (mof, f1) = evaluate_model(&out.model, &dataset, &variant.decode_config(&DecodeConfig::default()))?;
    println!(
        "variant={} permute={permute_prob} seed={seed} mof={mof:.4} f1={f1:.4} time={:.1}s",
        variant.name(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
