//! Save a freshly initialized model, reload it and run every architectural
//! property against it.
//!
//! Run with `cargo run --release --example property_suite [checkpoint]`.

use transducer::checkpoint;
use transducer::config::RunConfig;
use transducer::eval::{run_property_suite, Suite};
use transducer::model::Transducer;

fn main() -> transducer::Result<()> {
    let dir = std::env::temp_dir().join("transducer-property-suite");
    std::fs::create_dir_all(&dir)?;
    let path = match std::env::args().nth(1) {
        Some(p) => p.into(),
        None => {
            let run = RunConfig::desk();
            let p = dir.join("fresh.ckpt");
            checkpoint::save(&p, &run, &Transducer::new(run.model.clone(), 0)?)?;
            p
        }
    };
    let report = run_property_suite(&path, Suite::All)?;
    for p in &report.properties {
        let dev = p.max_deviation.map_or("-".to_string(), |d| format!("{d:.1e}"));
        println!("{:<24} {:>5?}  deviation {dev:>8}  {}", p.name, p.status, p.detail);
    }
    println!("all passed: {}", report.passed);
    Ok(())
}
