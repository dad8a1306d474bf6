//! Reverse-mode gradients on the tape, checked against central differences.
//!
//! Run with `cargo run --example autodiff_gradient_check`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transducer::autodiff::check::{finite_difference, max_relative_error};
use transducer::autodiff::{Tape, Tensor};

/// `sum(tanh(x·W) ⊙ sigmoid(x·W))` for a 3×4 input and a 4×5 weight.
fn forward(w: &[f64], x: &Tensor<f64>) -> f64 {
    let tape = Tape::<f64>::new();
    let w = tape.constant(Tensor::new(vec![4, 5], w.to_vec()).unwrap());
    let z = tape.constant(x.clone()).matmul(w).unwrap();
    z.tanh().unwrap().mul(z.sigmoid().unwrap()).unwrap().sum().unwrap().value().item()
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f64>::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let w0: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let tape = Tape::<f64>::new();
    let w = tape.leaf(Tensor::new(vec![4, 5], w0.clone()).unwrap());
    let z = tape.constant(x.clone()).matmul(w).unwrap();
    let loss = z.tanh().unwrap().mul(z.sigmoid().unwrap()).unwrap().sum().unwrap();
    loss.backward().unwrap();
    let analytic = tape.grad_f64(w).unwrap();

    let numeric = finite_difference(|p| forward(p, &x), &w0, 1e-6);
    println!("loss            {:.6}", loss.value().item());
    println!("dL/dW[0..4]     {:?}", &analytic[..4]);
    println!("finite diff     {:?}", &numeric[..4]);
    println!("max rel error   {:.2e}", max_relative_error(&analytic, &numeric, 1e-8));
}
