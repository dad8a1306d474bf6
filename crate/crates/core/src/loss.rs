//! Transducer loss over the `T'×(U+1)` alignment lattice.
//!
//! A path moves right on blank (consuming a frame) and up on the next label.
//! Every path ends with a blank out of node `(T'−1, U)`.

use crate::autodiff::{log_add, log_softmax_row};
use crate::error::{Error, Result};
use crate::tokens::BLANK;

/// Lattice log-probabilities, `lp[(t·(U+1) + u)·V + k]`.
#[derive(Clone, Debug)]
pub struct Lattice {
    pub t: usize,
    pub u: usize,
    pub v: usize,
    pub log_probs: Vec<f64>,
    /// Softmax of each node, used by the gradient.
    probs: Vec<f64>,
}

impl Lattice {
    /// Normalizes raw logits `[(T'·(U+1))×V]` node by node.
    pub fn from_logits(logits: &[f64], t: usize, u: usize, v: usize) -> Result<Self> {
        if logits.len() != t * (u + 1) * v {
            return Err(Error::shape("rnnt_loss", &[logits.len()], &[t, u + 1, v]));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input("non-finite lattice logits".into()));
        }
        let log_probs: Vec<f64> = logits.chunks(v).flat_map(log_softmax_row).collect();
        let probs = log_probs.iter().map(|x| x.exp()).collect();
        Ok(Self {
            t,
            u,
            v,
            log_probs,
            probs,
        })
    }

    #[inline]
    pub fn lp(&self, t: usize, u: usize, k: usize) -> f64 {
        self.log_probs[(t * (self.u + 1) + u) * self.v + k]
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    /// `−log P(y|x)`.
    pub loss: f64,
    /// `∂loss/∂z`, same layout as the logits.
    pub grad: Vec<f64>,
}

fn check(t: usize, labels: &[usize], v: usize) -> Result<()> {
    if t == 0 {
        return Err(Error::contract("rnnt_loss", "lattice needs at least one frame"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y == BLANK || y >= v) {
        return Err(Error::contract("rnnt_loss", format!("label {bad} is blank or outside {v} symbols")));
    }
    Ok(())
}

/// Forward variables `α(t,u)`, row-major over `(t, u)`.
pub fn forward_variables(lat: &Lattice, labels: &[usize]) -> Vec<f64> {
    let (t_len, u_len) = (lat.t, lat.u);
    let w = u_len + 1;
    let mut alpha = vec![f64::NEG_INFINITY; t_len * w];
    alpha[0] = 0.0;
    for t in 0..t_len {
        for u in 0..=u_len {
            if t == 0 && u == 0 {
                continue;
            }
            let from_left = if t > 0 {
                alpha[(t - 1) * w + u] + lat.lp(t - 1, u, BLANK)
            } else {
                f64::NEG_INFINITY
            };
            let from_below = if u > 0 {
                alpha[t * w + u - 1] + lat.lp(t, u - 1, labels[u - 1])
            } else {
                f64::NEG_INFINITY
            };
            alpha[t * w + u] = log_add(from_left, from_below);
        }
    }
    alpha
}

/// Backward variables `β(t,u)`: log-probability of completing from `(t,u)`.
pub fn backward_variables(lat: &Lattice, labels: &[usize]) -> Vec<f64> {
    let (t_len, u_len) = (lat.t, lat.u);
    let w = u_len + 1;
    let mut beta = vec![f64::NEG_INFINITY; t_len * w];
    for t in (0..t_len).rev() {
        for u in (0..=u_len).rev() {
            let right = if t + 1 < t_len {
                beta[(t + 1) * w + u] + lat.lp(t, u, BLANK)
            } else if u == u_len {
                lat.lp(t, u, BLANK)
            } else {
                f64::NEG_INFINITY
            };
            let up = if u < u_len {
                beta[t * w + u + 1] + lat.lp(t, u, labels[u])
            } else {
                f64::NEG_INFINITY
            };
            beta[t * w + u] = log_add(right, up);
        }
    }
    beta
}

/// Negative log-likelihood and its gradient with respect to the logits.
pub fn rnnt_loss(logits: &[f64], t: usize, labels: &[usize], v: usize) -> Result<LossOutput> {
    check(t, labels, v)?;
    let u_len = labels.len();
    let lat = Lattice::from_logits(logits, t, u_len, v)?;
    let alpha = forward_variables(&lat, labels);
    let beta = backward_variables(&lat, labels);
    let w = u_len + 1;
    let log_p = alpha[(t - 1) * w + u_len] + lat.lp(t - 1, u_len, BLANK);

    let mut grad = vec![0.0; logits.len()];
    for ti in 0..t {
        for u in 0..=u_len {
            let a = alpha[ti * w + u];
            let occupancy = (a + beta[ti * w + u] - log_p).exp();
            let base = (ti * w + u) * v;
            for k in 0..v {
                grad[base + k] = lat.probs[base + k] * occupancy;
            }
            let blank_next = if ti + 1 < t {
                beta[(ti + 1) * w + u]
            } else if u == u_len {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            grad[base + BLANK] -= (a + lat.lp(ti, u, BLANK) + blank_next - log_p).exp();
            if u < u_len {
                let y = labels[u];
                grad[base + y] -= (a + lat.lp(ti, u, y) + beta[ti * w + u + 1] - log_p).exp();
            }
        }
    }
    Ok(LossOutput { loss: -log_p, grad })
}

/// Largest `T' + U` the enumeration oracle accepts.
pub const BRUTE_FORCE_LIMIT: usize = 12;

#[derive(Clone, Debug)]
pub struct BruteForce {
    pub loss: f64,
    pub paths: usize,
}

/// Sums the probability of every alignment path explicitly.
pub fn rnnt_brute_force(logits: &[f64], t: usize, labels: &[usize], v: usize) -> Result<BruteForce> {
    check(t, labels, v)?;
    if t + labels.len() > BRUTE_FORCE_LIMIT {
        return Err(Error::contract(
            "rnnt_brute_force",
            format!("T'+U = {} exceeds {BRUTE_FORCE_LIMIT}", t + labels.len()),
        ));
    }
    let lat = Lattice::from_logits(logits, t, labels.len(), v)?;
    // Each path is a sequence of T'−1 interior blanks and U labels, then the final blank.
    let moves = t - 1 + labels.len();
    let mut total = 0.0f64;
    let mut paths = 0;
    for mask in 0u32..(1 << moves) {
        if mask.count_ones() as usize != labels.len() {
            continue;
        }
        let (mut ti, mut u, mut prob) = (0usize, 0usize, 1.0f64);
        for step in 0..moves {
            if mask & (1 << step) != 0 {
                prob *= lat.lp(ti, u, labels[u]).exp();
                u += 1;
            } else {
                prob *= lat.lp(ti, u, BLANK).exp();
                ti += 1;
            }
        }
        prob *= lat.lp(ti, u, BLANK).exp();
        total += prob;
        paths += 1;
    }
    Ok(BruteForce {
        loss: -total.ln(),
        paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{finite_difference, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_two_symbol_lattice() {
        let out = rnnt_loss(&[0.0; 4], 1, &[1], 2).unwrap();
        assert!((out.loss - 0.25f64.ln().abs()).abs() < 1e-12);
        assert!((out.loss - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn empty_label_is_sum_of_blanks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z: Vec<f64> = (0..3 * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let out = rnnt_loss(&z, 3, &[], 4).unwrap();
        let expected: f64 = z.chunks(4).map(|r| -log_softmax_row(r)[0]).sum();
        assert!((out.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn path_counts() {
        assert_eq!(rnnt_brute_force(&[0.0; 3], 1, &[], 3).unwrap().paths, 1);
        // Two frames, one label: the label goes before the first or second blank.
        assert_eq!(rnnt_brute_force(&[0.0; 8], 2, &[1], 2).unwrap().paths, 2);
        assert_eq!(rnnt_brute_force(&vec![0.0; 4 * 4 * 3], 4, &[1, 2, 1], 3).unwrap().paths, 20);
        assert!(rnnt_brute_force(&vec![0.0; 8 * 6 * 2], 8, &[1; 5], 2).is_err());
    }

    #[test]
    fn dp_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let t = rng.gen_range(1..=4);
            let v = rng.gen_range(2..=4);
            let u = rng.gen_range(0..=3);
            let labels: Vec<usize> = (0..u).map(|_| rng.gen_range(1..v)).collect();
            let z: Vec<f64> = (0..t * (u + 1) * v).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let dp = rnnt_loss(&z, t, &labels, v).unwrap().loss;
            let bf = rnnt_brute_force(&z, t, &labels, v).unwrap().loss;
            assert!((dp - bf).abs() < 1e-6, "{dp} vs {bf}");
            assert!(dp >= 0.0);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (t, v, labels) = (3, 4, vec![2, 3]);
        let z: Vec<f64> = (0..t * 3 * v).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let analytic = rnnt_loss(&z, t, &labels, v).unwrap().grad;
        let numeric = finite_difference(|x| rnnt_loss(x, t, &labels, v).unwrap().loss, &z, 1e-5);
        assert!(max_relative_error(&analytic, &numeric, 1e-6) < 1e-3);
    }

    #[test]
    fn alpha_and_beta_agree_on_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z: Vec<f64> = (0..4 * 3 * 5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let lat = Lattice::from_logits(&z, 4, 2, 5).unwrap();
        let labels = [1, 4];
        let alpha = forward_variables(&lat, &labels);
        let beta = backward_variables(&lat, &labels);
        let from_alpha = alpha[3 * 3 + 2] + lat.lp(3, 2, BLANK);
        assert!((from_alpha - beta[0]).abs() < 1e-10);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z: Vec<f64> = (0..6 * 4 * 3).map(|_| if rng.gen() { 50.0 } else { -50.0 }).collect();
        let out = rnnt_loss(&z, 6, &[1, 2, 1], 3).unwrap();
        assert!(out.loss.is_finite() && out.grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn invalid_inputs() {
        assert!(matches!(rnnt_loss(&[f64::NAN, 0.0], 1, &[], 2), Err(Error::Input(_))));
        assert!(rnnt_loss(&[0.0; 4], 1, &[0], 2).is_err());
        assert!(rnnt_loss(&[], 0, &[], 2).is_err());
    }
}
