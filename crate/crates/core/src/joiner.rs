//! Joint network `z_{t,u} = ReLU(h_t W^h + p_u W^p) W^o`.

use rand::Rng;

use crate::autodiff::{Binder, ParamStore, Scalar, Var};
use crate::config::JoinerConfig;
use crate::error::{Error, Result};

const PREFIX: &str = "joiner";

pub fn init_joiner<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &JoinerConfig,
    d_h: usize,
    d_p: usize,
    vocab: usize,
    rng: &mut impl Rng,
) {
    let j = cfg.d_joint;
    store.init_uniform(&format!("{PREFIX}.enc.weight"), &[d_h, j], d_h, j, rng);
    store.init_uniform(&format!("{PREFIX}.pred.weight"), &[d_p, j], d_p, j, rng);
    store.init_uniform(&format!("{PREFIX}.out.weight"), &[j, vocab], j, vocab, rng);
}

/// Full lattice logits `[(T·(U+1))×V]`; row `t·(U+1) + u` holds `z_{t,u}`.
pub fn join<'t, T: Scalar>(binder: &Binder<'t, T>, h: Var<'t, T>, p: Var<'t, T>) -> Result<Var<'t, T>> {
    let a = h.matmul(binder.get(&format!("{PREFIX}.enc.weight"))?)?;
    let b = p.matmul(binder.get(&format!("{PREFIX}.pred.weight"))?)?;
    a.grid_add(b)?.relu()?.matmul(binder.get(&format!("{PREFIX}.out.weight"))?)
}

/// Frozen joiner weights for per-pair evaluation during search.
#[derive(Clone, Copy, Debug)]
pub struct Joiner<'m, T: Scalar = f32> {
    w_enc: &'m [T],
    w_pred: &'m [T],
    w_out: &'m [T],
    d_h: usize,
    d_p: usize,
    d_j: usize,
    vocab: usize,
}

fn project<T: Scalar>(x: &[T], w: &[T], d_in: usize, d_out: usize) -> Vec<f64> {
    let mut acc = vec![0.0f64; d_out];
    for (p, &xv) in x.iter().enumerate().take(d_in) {
        let xv = xv.widen();
        for (o, &wv) in acc.iter_mut().zip(&w[p * d_out..(p + 1) * d_out]) {
            *o += xv * wv.widen();
        }
    }
    acc
}

impl<'m, T: Scalar> Joiner<'m, T> {
    pub fn new(params: &'m ParamStore<T>) -> Result<Self> {
        let we = params.get(&format!("{PREFIX}.enc.weight"))?;
        let wp = params.get(&format!("{PREFIX}.pred.weight"))?;
        let wo = params.get(&format!("{PREFIX}.out.weight"))?;
        let (d_h, d_j) = (we.shape()[0], we.shape()[1]);
        if wp.shape()[1] != d_j || wo.shape()[0] != d_j {
            return Err(Error::shape("joiner", we.shape(), wo.shape()));
        }
        Ok(Self {
            w_enc: we.data(),
            w_pred: wp.data(),
            w_out: wo.data(),
            d_h,
            d_p: wp.shape()[0],
            d_j,
            vocab: wo.shape()[1],
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// `h_t W^h`, rounded to storage precision as the tape does.
    pub fn project_encoder(&self, h: &[T]) -> Result<Vec<T>> {
        if h.len() != self.d_h {
            return Err(Error::shape("joiner", &[h.len()], &[self.d_h]));
        }
        Ok(project(h, self.w_enc, self.d_h, self.d_j).into_iter().map(T::cast).collect())
    }

    pub fn project_predictor(&self, p: &[T]) -> Result<Vec<T>> {
        if p.len() != self.d_p {
            return Err(Error::shape("joiner", &[p.len()], &[self.d_p]));
        }
        Ok(project(p, self.w_pred, self.d_p, self.d_j).into_iter().map(T::cast).collect())
    }

    /// Logits for one `(t, u)` pair from projected rows.
    pub fn logits(&self, enc_proj: &[T], pred_proj: &[T]) -> Vec<f64> {
        let hidden: Vec<T> = enc_proj
            .iter()
            .zip(pred_proj)
            .map(|(a, b)| T::cast((a.widen() + b.widen()).max(0.0)))
            .collect();
        project(&hidden, self.w_out, self.d_j, self.vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(r: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn store(seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_joiner(&mut s, &JoinerConfig { d_joint: 9 }, 5, 4, 6, &mut ChaCha8Rng::seed_from_u64(seed));
        s
    }

    #[test]
    fn grid_cells_match_pairwise_join() {
        let s = store(1);
        let (h, p) = (random(3, 5, 2), random(4, 4, 3));
        let tape = Tape::new();
        let b = Binder::new(&tape, &s);
        let z = join(&b, tape.constant(h.clone()), tape.constant(p.clone())).unwrap().value();
        assert_eq!(z.shape(), &[12, 6]);
        let j = Joiner::new(&s).unwrap();
        for t in 0..3 {
            for u in 0..4 {
                let pair = j.logits(&j.project_encoder(h.row(t)).unwrap(), &j.project_predictor(p.row(u)).unwrap());
                for (a, b) in pair.iter().zip(z.row(t * 4 + u)) {
                    assert!((a - *b as f64).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn zero_weights_and_single_node() {
        let mut s = store(1);
        for n in ["joiner.enc.weight", "joiner.pred.weight", "joiner.out.weight"] {
            s.get_mut(n).unwrap().data_mut().fill(0.0);
        }
        let tape = Tape::new();
        let b = Binder::new(&tape, &s);
        let z = join(&b, tape.constant(random(1, 5, 0)), tape.constant(random(1, 4, 1))).unwrap();
        assert_eq!(z.shape(), vec![1, 6]);
        assert!(z.value().data().iter().all(|&v| v == 0.0));
        let lp = z.log_softmax_last().unwrap().value();
        assert!(lp.data().iter().all(|&v| (v as f64 + (6f64).ln()).abs() < 1e-6));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let s = store(1);
        let tape = Tape::new();
        let b = Binder::new(&tape, &s);
        assert!(join(&b, tape.constant(random(2, 4, 0)), tape.constant(random(2, 4, 1))).is_err());
        assert!(Joiner::new(&s).unwrap().project_encoder(&[0.0; 3]).is_err());
    }
}
