//! Label-history predictor: token embedding followed by stacked LSTMs, or a
//! causal VGG-Transformer over the whole history.

use rand::Rng;

use crate::autodiff::{Binder, ParamStore, Scalar, Tape, Tensor, Var};
use crate::config::{AttentionContext, PredictorConfig};
use crate::encoder;
use crate::error::{Error, Result};
use crate::frontend;
use crate::tokens::BLANK;

const PREFIX: &str = "predictor";

pub fn init_predictor<T: Scalar>(store: &mut ParamStore<T>, cfg: &PredictorConfig, vocab: usize, rng: &mut impl Rng) {
    let e = cfg.embed_dim();
    store.init_uniform(&format!("{PREFIX}.embed"), &[vocab, e], 1, e, rng);
    store.init_uniform(&format!("{PREFIX}.start"), &[1, e], 1, e, rng);
    match cfg {
        PredictorConfig::Lstm {
            embed_dim,
            hidden,
            num_layers,
        } => {
            for l in 0..*num_layers {
                let d_x = if l == 0 { *embed_dim } else { *hidden };
                let name = format!("{PREFIX}.lstm{l}");
                store.init_uniform(&format!("{name}.weight"), &[d_x + hidden, 4 * hidden], d_x + hidden, *hidden, rng);
                let mut bias = vec![0.0; 4 * hidden];
                bias[*hidden..2 * hidden].fill(1.0);
                store.insert(format!("{name}.bias"), Tensor::from_f64(vec![4 * hidden], &bias).expect("bias shape"));
            }
        }
        PredictorConfig::Transformer {
            embed_dim,
            frontend: fe,
            encoder: enc,
        } => {
            frontend::init_frontend(store, &format!("{PREFIX}.frontend"), fe, *embed_dim, rng);
            encoder::init_encoder(store, &format!("{PREFIX}.encoder"), enc, rng);
        }
    }
}

/// One LSTM step on `[1×d_x]` input with gate layout `[i | f | g | o]`:
/// `c' = σ(f)·c + σ(i)·tanh(g)`, `h' = σ(o)·tanh(c')`.
pub fn lstm_cell<'t, T: Scalar>(
    binder: &Binder<'t, T>,
    prefix: &str,
    x: Var<'t, T>,
    h: Var<'t, T>,
    c: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let hidden = h.shape()[1];
    let z = binder.linear(prefix, binder.tape().concat_cols(&[x, h])?)?;
    let i = z.slice_cols(0, hidden)?.sigmoid()?;
    let f = z.slice_cols(hidden, hidden)?.sigmoid()?;
    let g = z.slice_cols(2 * hidden, hidden)?.tanh()?;
    let o = z.slice_cols(3 * hidden, hidden)?.sigmoid()?;
    let c_next = f.mul(c)?.add(i.mul(g)?)?;
    let h_next = o.mul(c_next.tanh()?)?;
    Ok((h_next, c_next))
}

fn check_token(token: usize, vocab: usize) -> Result<()> {
    if token == BLANK {
        return Err(Error::contract("predictor", "blank is never fed to the predictor"));
    }
    if token >= vocab {
        return Err(Error::contract("predictor", format!("token {token} outside inventory of {vocab}")));
    }
    Ok(())
}

/// Input row for history position `u`: the start embedding, then tokens.
fn input_rows<'t, T: Scalar>(binder: &Binder<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let start = binder.get(&format!("{PREFIX}.start"))?;
    if labels.is_empty() {
        return Ok(start);
    }
    let emb = binder.get(&format!("{PREFIX}.embed"))?.embedding(labels)?;
    binder.tape().concat_rows(&[start, emb])
}

fn causal_contexts(cfg: &crate::config::EncoderConfig) -> Vec<AttentionContext> {
    vec![
        AttentionContext {
            left: None,
            right: Some(0)
        };
        cfg.num_layers
    ]
}

/// LSTM stack over one input row, threading per-layer `(h, c)`.
fn lstm_stack_step<'t, T: Scalar>(
    binder: &Binder<'t, T>,
    num_layers: usize,
    x: Var<'t, T>,
    state: &mut [(Var<'t, T>, Var<'t, T>)],
) -> Result<Var<'t, T>> {
    let mut inp = x;
    for (l, st) in state.iter_mut().enumerate().take(num_layers) {
        let (h, c) = lstm_cell(binder, &format!("{PREFIX}.lstm{l}"), inp, st.0, st.1)?;
        *st = (h, c);
        inp = h;
    }
    Ok(inp)
}

/// `[(U+1)×d_p]`: row `u` is the encoding after the first `u` labels.
pub fn predictor_unroll<'t, T: Scalar>(
    binder: &Binder<'t, T>,
    cfg: &PredictorConfig,
    vocab: usize,
    labels: &[usize],
) -> Result<Var<'t, T>> {
    for &y in labels {
        check_token(y, vocab)?;
    }
    let tape = binder.tape();
    let rows = input_rows(binder, labels)?;
    match cfg {
        PredictorConfig::Lstm { hidden, num_layers, .. } => {
            let zero = tape.constant(Tensor::zeros(vec![1, *hidden]));
            let mut state = vec![(zero, zero); *num_layers];
            let outs = (0..=labels.len())
                .map(|u| lstm_stack_step(binder, *num_layers, rows.slice_rows(u, 1)?, &mut state))
                .collect::<Result<Vec<_>>>()?;
            tape.concat_rows(&outs)
        }
        PredictorConfig::Transformer {
            embed_dim,
            frontend: fe,
            encoder: enc,
        } => {
            let x = frontend::frontend_forward(binder, &format!("{PREFIX}.frontend"), fe, *embed_dim, rows)?;
            encoder::encoder_forward(binder, &format!("{PREFIX}.encoder"), enc, &causal_contexts(enc), x)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum StateKind<T: Scalar> {
    /// Per-layer hidden and cell vectors.
    Lstm { h: Vec<Vec<T>>, c: Vec<Vec<T>> },
    /// Tokens consumed so far; the transformer recomputes over them.
    History(Vec<usize>),
}

/// Value-semantic predictor state. Stepping returns a new state and never
/// mutates the one it was given.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorState<T: Scalar = f32> {
    kind: StateKind<T>,
    last_token: Option<usize>,
}

impl<T: Scalar> PredictorState<T> {
    pub fn last_token(&self) -> Option<usize> {
        self.last_token
    }
}

/// Inference-time predictor over frozen parameters.
#[derive(Clone, Copy, Debug)]
pub struct Predictor<'m, T: Scalar = f32> {
    pub cfg: &'m PredictorConfig,
    pub params: &'m ParamStore<T>,
    pub vocab: usize,
}

impl<'m, T: Scalar> Predictor<'m, T> {
    pub fn new(cfg: &'m PredictorConfig, params: &'m ParamStore<T>, vocab: usize) -> Self {
        Self { cfg, params, vocab }
    }

    /// Zero state advanced over the start embedding, and `p_0`.
    pub fn init(&self) -> Result<(PredictorState<T>, Vec<T>)> {
        match self.cfg {
            PredictorConfig::Lstm { hidden, num_layers, .. } => {
                let zeros = vec![vec![T::ZERO; *hidden]; *num_layers];
                let blank = PredictorState {
                    kind: StateKind::Lstm {
                        h: zeros.clone(),
                        c: zeros,
                    },
                    last_token: None,
                };
                self.lstm_step(&blank, None)
            }
            PredictorConfig::Transformer { .. } => self.history_step(Vec::new()),
        }
    }

    pub fn step(&self, state: &PredictorState<T>, token: usize) -> Result<(PredictorState<T>, Vec<T>)> {
        check_token(token, self.vocab)?;
        match &state.kind {
            StateKind::Lstm { .. } => self.lstm_step(state, Some(token)),
            StateKind::History(tokens) => {
                let mut next = tokens.clone();
                next.push(token);
                self.history_step(next)
            }
        }
    }

    fn lstm_step(&self, state: &PredictorState<T>, token: Option<usize>) -> Result<(PredictorState<T>, Vec<T>)> {
        let StateKind::Lstm { h, c } = &state.kind else {
            return Err(Error::State("predictor state does not match an LSTM predictor".into()));
        };
        let num_layers = h.len();
        let tape = Tape::<T>::new();
        let binder = Binder::new(&tape, self.params);
        let x = match token {
            None => binder.get(&format!("{PREFIX}.start"))?,
            Some(t) => binder.get(&format!("{PREFIX}.embed"))?.embedding(&[t])?,
        };
        let row = |v: &Vec<T>| tape.constant(Tensor::new(vec![1, v.len()], v.clone()).expect("state row"));
        let mut vars: Vec<_> = h.iter().zip(c).map(|(h, c)| (row(h), row(c))).collect();
        let out = lstm_stack_step(&binder, num_layers, x, &mut vars)?;
        let next = PredictorState {
            kind: StateKind::Lstm {
                h: vars.iter().map(|v| v.0.value().data().to_vec()).collect(),
                c: vars.iter().map(|v| v.1.value().data().to_vec()).collect(),
            },
            last_token: token,
        };
        let p = out.value().data().to_vec();
        Ok((next, p))
    }

    fn history_step(&self, tokens: Vec<usize>) -> Result<(PredictorState<T>, Vec<T>)> {
        let tape = Tape::<T>::new();
        let binder = Binder::new(&tape, self.params);
        let all = predictor_unroll(&binder, self.cfg, self.vocab, &tokens)?;
        let p = all.value().row(tokens.len()).to_vec();
        let last_token = tokens.last().copied();
        Ok((
            PredictorState {
                kind: StateKind::History(tokens),
                last_token,
            },
            p,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AttentionKernel, EncoderConfig, FrontendConfig, VggBlockConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const V: usize = 6;

    fn lstm_cfg() -> PredictorConfig {
        PredictorConfig::Lstm {
            embed_dim: 5,
            hidden: 7,
            num_layers: 2,
        }
    }

    fn transformer_cfg() -> PredictorConfig {
        PredictorConfig::Transformer {
            embed_dim: 6,
            frontend: FrontendConfig {
                blocks: vec![VggBlockConfig::new(2, 1, 1)],
                proj_out: 8,
            },
            encoder: EncoderConfig {
                num_layers: 2,
                d_in: 8,
                heads: 2,
                d_ff: 12,
                dropout: 0.1,
                context_left: -1,
                context_right: 0,
                layer_contexts: None,
                kernel: AttentionKernel::Windowed,
            },
        }
    }

    fn store(cfg: &PredictorConfig, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_predictor(&mut s, cfg, V, &mut ChaCha8Rng::seed_from_u64(seed));
        s
    }

    #[test]
    fn lstm_zero_weights_give_zero_output() {
        let mut s = ParamStore::<f64>::new();
        s.init_const("cell.weight", &[3 + 4, 16], 0.0);
        s.init_const("cell.bias", &[16], 0.0);
        let tape = Tape::new();
        let b = Binder::new(&tape, &s);
        let z = tape.constant(Tensor::zeros(vec![1, 4]));
        let (h, _) = lstm_cell(&b, "cell", tape.constant(Tensor::zeros(vec![1, 3])), z, z).unwrap();
        assert!(h.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_cell_growth_is_bounded() {
        let mut s = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        s.init_uniform("cell.weight", &[7, 16], 1, 1, &mut rng);
        s.init_uniform("cell.bias", &[16], 1, 1, &mut rng);
        let tape = Tape::new();
        let b = Binder::new(&tape, &s);
        let rand_row = |n: usize, rng: &mut ChaCha8Rng| {
            Tensor::from_f64(vec![1, n], &(0..n).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<_>>()).unwrap()
        };
        let c = tape.constant(rand_row(4, &mut rng));
        let (_, c2) = lstm_cell(&b, "cell", tape.constant(rand_row(3, &mut rng)), tape.constant(rand_row(4, &mut rng)), c).unwrap();
        for (a, b) in c.value().data().iter().zip(c2.value().data()) {
            assert!(b.abs() <= a.abs() + 1.0);
        }
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let s = store(&lstm_cfg(), 0);
        let b = s.get("predictor.lstm0.bias").unwrap();
        assert!(b.data()[7..14].iter().all(|&v| v == 1.0));
        assert!(b.data()[..7].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_matches_unroll_and_respects_history() {
        for cfg in [lstm_cfg(), transformer_cfg()] {
            let s = store(&cfg, 1);
            let pred = Predictor::new(&cfg, &s, V);
            let labels = [3, 1, 4, 1, 5];
            let tape = Tape::new();
            let b = Binder::new(&tape, &s);
            let all = predictor_unroll(&b, &cfg, V, &labels).unwrap().value();
            assert_eq!(all.rows(), labels.len() + 1);
            let (mut st, p0) = pred.init().unwrap();
            assert_eq!(p0.as_slice(), all.row(0));
            assert_eq!(pred.init().unwrap().1, p0);
            for (u, &y) in labels.iter().enumerate() {
                let before = st.clone();
                let (next, p) = pred.step(&st, y).unwrap();
                assert_eq!(st, before);
                assert_eq!(p.as_slice(), all.row(u + 1));
                assert_eq!(pred.step(&st, y).unwrap().1, p);
                st = next;
            }
            assert_eq!(st.last_token(), Some(5));
            assert_ne!(all.row(0), all.row(1));

            let (s0, _) = pred.init().unwrap();
            let ab = pred.step(&pred.step(&s0, 2).unwrap().0, 3).unwrap().1;
            let ba = pred.step(&pred.step(&s0, 3).unwrap().0, 2).unwrap().1;
            assert!(ab.iter().zip(&ba).any(|(x, y)| (x - y).abs() > 1e-6));
            let empty = predictor_unroll(&b, &cfg, V, &[]).unwrap();
            assert_eq!(empty.shape()[0], 1);
        }
    }

    #[test]
    fn blank_is_rejected() {
        let cfg = lstm_cfg();
        let s = store(&cfg, 2);
        let pred = Predictor::new(&cfg, &s, V);
        let (st, _) = pred.init().unwrap();
        assert!(matches!(pred.step(&st, BLANK), Err(Error::Contract { .. })));
        assert!(pred.step(&st, V).is_err());
        let tape = Tape::new();
        let b = Binder::new(&tape, &s);
        assert!(predictor_unroll(&b, &cfg, V, &[1, 0]).is_err());
    }

    #[test]
    fn full_lstm_parameter_count() {
        let cfg = crate::config::ModelConfig::full_scale().predictor;
        let mut s = ParamStore::<f32>::new();
        init_predictor(&mut s, &cfg, 256, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(s.count_prefix("predictor.lstm0."), 2_321_200);
        assert_eq!(s.count_prefix("predictor.lstm1."), 3_922_800);
        assert_eq!(s.num_scalars(), 6_276_896);
    }
}
