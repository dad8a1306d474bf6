//! Instantiate the full-size configurations and count their parameters.
//!
//! Run with `cargo run --release --example parameter_count`.

use transducer::config::ModelConfig;
use transducer::model::Transducer;

fn main() -> transducer::Result<()> {
    for (name, cfg) in [
        ("desk", ModelConfig::desk_scale()),
        ("full, LSTM predictor", ModelConfig::full_scale()),
        ("full, transformer predictor", ModelConfig::full_scale_transformer_predictor()),
    ] {
        let r = Transducer::<f32>::new(cfg, 0)?.param_report();
        println!("{name}:");
        println!("  frontend  {:>11}", r.frontend);
        println!("  encoder   {:>11}", r.encoder);
        println!("  predictor {:>11}", r.predictor);
        println!("  joiner    {:>11}", r.joiner);
        println!("  total     {:>11}  ({:.2} M)", r.total, r.total as f64 / 1e6);
    }
    Ok(())
}
