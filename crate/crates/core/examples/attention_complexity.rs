//! Attention cost with and without truncation: exact pair and FLOP counts,
//! fitted growth exponents, and wall-clock timings for reference.
//!
//! Run with `cargo run --release --example attention_complexity`.

use transducer::config::{AttentionContext, ModelConfig};
use transducer::eval::{attention_flops, attention_pairs, bench_attention, complexity_profile};

fn main() -> transducer::Result<()> {
    let enc = ModelConfig::full_scale().encoder;
    let lengths = [128, 256, 512, 1024, 2048];
    for ctx in [AttentionContext::new(32, 4), AttentionContext::new(4, 4), AttentionContext::UNLIMITED] {
        let p = complexity_profile(&lengths, ctx, &enc)?;
        println!("context {ctx}: growth exponent {:.3}", p.exponent);
        for (t, f) in p.lengths.iter().zip(&p.flops) {
            println!("  T={t:5}  pairs {:>10}  encoder attention MACs {f:>14}", attention_pairs(*t, ctx));
        }
        let ratio = attention_flops(2048, ctx, &enc) as f64 / attention_flops(1024, ctx, &enc) as f64;
        println!("  FLOPs(2048)/FLOPs(1024) = {ratio:.3}");
    }

    println!("wall-clock, one attention pass at d=512 (machine dependent):");
    for ctx in [AttentionContext::new(32, 4), AttentionContext::UNLIMITED] {
        for row in bench_attention(&[256, 512, 1024], ctx, 512, 0)? {
            println!("  {ctx:>8}  T={:5}  {:8.2} ms", row.t, row.wallclock_ms);
        }
    }
    Ok(())
}
