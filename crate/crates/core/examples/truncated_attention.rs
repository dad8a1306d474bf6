//! Truncated self-attention: the visibility mask, the look-ahead a stacked
//! encoder accumulates, and what that costs in latency.
//!
//! Run with `cargo run --release --example truncated_attention`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transducer::autodiff::Tensor;
use transducer::config::{AttentionContext, ModelConfig};
use transducer::encoder::truncation_mask;
use transducer::model::Transducer;

fn main() -> transducer::Result<()> {
    let ctx = AttentionContext::new(3, 1);
    println!("mask for T = 8, context {ctx} (row = query, # = visible key):");
    let mask = truncation_mask(8, ctx);
    for q in 0..8 {
        let row: String = (0..8).map(|k| if mask[q * 8 + k] { '#' } else { '.' }).collect();
        println!("  {row}");
    }

    let cfg = ModelConfig::desk_scale();
    let model = Transducer::<f32>::new(cfg.clone(), 5)?;
    let contexts = model.trained_contexts()?;
    let lookahead = cfg.encoder.total_lookahead()?.expect("finite right context");
    let frame_ms = 10 * cfg.frontend.time_reduction();
    println!(
        "{} layers of {} -> look-ahead {lookahead} frames = {} ms",
        cfg.encoder.num_layers,
        contexts[0],
        lookahead * frame_ms
    );

    // Perturb every feature frame that lands after output frame t + look-ahead;
    // output frame t is unchanged.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let frames = 40 * cfg.frontend.time_reduction();
    let feats = Tensor::new(vec![frames, cfg.feat_dim], (0..frames * cfg.feat_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let base = model.encode(&feats, &contexts)?;
    let t = 10;
    let first = (t + lookahead + 1) * cfg.frontend.time_reduction();
    let mut moved = feats.clone();
    for v in &mut moved.data_mut()[first * cfg.feat_dim..] {
        *v += rng.gen_range(-1.0..1.0);
    }
    let after = model.encode(&moved, &contexts)?;
    let diff = |r: usize| base.row(r).iter().zip(after.row(r)).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    println!("perturbing features from frame {first}:");
    for r in [t, t + 1, t + lookahead + 1] {
        println!("  output {r:2}: max change {:.2e}", diff(r));
    }
    Ok(())
}
