//! The transducer loss on a small lattice: forward variables, the dynamic
//! program against explicit path enumeration, and the logit gradient.
//!
//! Run with `cargo run --example rnnt_loss_lattice`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transducer::loss::{forward_variables, rnnt_brute_force, rnnt_loss, Lattice};

fn main() -> transducer::Result<()> {
    let (t, v) = (4, 4);
    let labels = [2, 3, 1];
    let u = labels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits: Vec<f64> = (0..t * (u + 1) * v).map(|_| rng.gen_range(-2.0..2.0)).collect();

    let lat = Lattice::from_logits(&logits, t, u, v)?;
    let alpha = forward_variables(&lat, &labels);
    println!("alpha(t, u):");
    for ti in 0..t {
        let row: Vec<String> = (0..=u).map(|ui| format!("{:8.3}", alpha[ti * (u + 1) + ui])).collect();
        println!("  t={ti} {}", row.join(" "));
    }

    let dp = rnnt_loss(&logits, t, &labels, v)?;
    let bf = rnnt_brute_force(&logits, t, &labels, v)?;
    println!("loss (DP)          {:.12}", dp.loss);
    println!("loss (enumeration) {:.12} over {} paths", bf.loss, bf.paths);

    // Each lattice node's gradient sums to zero: softmax minus occupancy.
    let worst = dp.grad.chunks(v).map(|g| g.iter().sum::<f64>().abs()).fold(0.0, f64::max);
    println!("max |sum of node gradient| = {worst:.1e}");
    Ok(())
}
