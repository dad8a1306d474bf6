//! Transformer encoder with truncated multi-head self-attention.
//!
//! Layers are pre-norm: `y = x + Dropout(MHA(LN(x)))`,
//! `out = y + Dropout(FF(LN(y)))`, and the stack ends with a layer norm.

use std::collections::VecDeque;

use rand::Rng;

use crate::autodiff::{init_layer_norm, init_linear, Binder, ParamStore, Scalar, Tape, Tensor, Var};
use crate::config::{AttentionContext, AttentionKernel, EncoderConfig};
use crate::error::{Error, Result};

/// `mask[t·T + s]` is true when key `s` is visible from query `t`.
pub fn truncation_mask(t: usize, ctx: AttentionContext) -> Vec<bool> {
    let mut mask = vec![false; t * t];
    for q in 0..t {
        let (lo, hi) = ctx.window(q, t);
        mask[q * t + lo..q * t + hi].fill(true);
    }
    mask
}

/// Visible key range `[lo, hi)` for each of `t` queries.
pub fn window_ranges(t: usize, ctx: AttentionContext) -> Vec<(usize, usize)> {
    (0..t).map(|q| ctx.window(q, t)).collect()
}

/// `Softmax(QKᵀ/√d_k) V` with disallowed pairs masked out, materializing
/// the full `[T_q×T_k]` score matrix.
pub fn scaled_dot_attention<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    mask: Option<&[bool]>,
) -> Result<Var<'t, T>> {
    let d_k = q.shape()[1];
    let scores = q.matmul(k.transpose()?)?.scale(1.0 / (d_k as f64).sqrt())?;
    scores.softmax_last(mask)?.matmul(v)
}

fn layer_name(prefix: &str, l: usize) -> String {
    format!("{prefix}.layer{l}")
}

pub fn init_encoder<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, cfg: &EncoderConfig, rng: &mut impl Rng) {
    let d = cfg.d_in;
    for l in 0..cfg.num_layers {
        let p = layer_name(prefix, l);
        init_layer_norm(store, &format!("{p}.ln_attn"), d);
        for proj in ["q", "k", "v", "o"] {
            init_linear(store, &format!("{p}.attn.{proj}"), d, d, true, rng);
        }
        init_layer_norm(store, &format!("{p}.ln_ff"), d);
        init_linear(store, &format!("{p}.ff1"), d, cfg.d_ff, true, rng);
        init_linear(store, &format!("{p}.ff2"), cfg.d_ff, d, true, rng);
    }
    init_layer_norm(store, &format!("{prefix}.final_ln"), d);
}

/// Per-head attention given projected queries `[n_q×d]` and keys/values
/// `[n_k×d]`, where query `i` sees key rows `ranges[i]`.
fn heads_attention<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    ranges: &[(usize, usize)],
    cfg: &EncoderConfig,
) -> Result<Var<'t, T>> {
    let d_k = cfg.d_k();
    let scale = 1.0 / (d_k as f64).sqrt();
    let n_k = k.shape()[0];
    let mask = (cfg.kernel == AttentionKernel::Dense).then(|| {
        let mut m = vec![false; ranges.len() * n_k];
        for (i, &(lo, hi)) in ranges.iter().enumerate() {
            m[i * n_k + lo..i * n_k + hi].fill(true);
        }
        m
    });
    let heads = (0..cfg.heads)
        .map(|h| {
            let (qh, kh, vh) = (
                q.slice_cols(h * d_k, d_k)?,
                k.slice_cols(h * d_k, d_k)?,
                v.slice_cols(h * d_k, d_k)?,
            );
            match &mask {
                Some(m) => scaled_dot_attention(qh, kh, vh, Some(m)),
                None => qh.windowed_attention(kh, vh, ranges, scale),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    q.tape().concat_cols(&heads)
}

/// `[e_1, …, e_H] W^o` over self-attention of `x` within `ctx`.
pub fn multi_head_attention<'t, T: Scalar>(
    binder: &Binder<'t, T>,
    prefix: &str,
    cfg: &EncoderConfig,
    x: Var<'t, T>,
    ctx: AttentionContext,
) -> Result<Var<'t, T>> {
    let ranges = window_ranges(x.shape()[0], ctx);
    let q = binder.linear(&format!("{prefix}.q"), x)?;
    let k = binder.linear(&format!("{prefix}.k"), x)?;
    let v = binder.linear(&format!("{prefix}.v"), x)?;
    binder.linear(&format!("{prefix}.o"), heads_attention(q, k, v, &ranges, cfg)?)
}

fn feed_forward_block<'t, T: Scalar>(
    binder: &Binder<'t, T>,
    p: &str,
    cfg: &EncoderConfig,
    y: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let h = binder.layer_norm(&format!("{p}.ln_ff"), y)?;
    let h = binder.linear(&format!("{p}.ff1"), h)?.relu()?;
    let h = binder.linear(&format!("{p}.ff2"), h)?.dropout(cfg.dropout)?;
    y.add(h)
}

pub fn encoder_layer_forward<'t, T: Scalar>(
    binder: &Binder<'t, T>,
    prefix: &str,
    cfg: &EncoderConfig,
    x: Var<'t, T>,
    ctx: AttentionContext,
) -> Result<Var<'t, T>> {
    let h = binder.layer_norm(&format!("{prefix}.ln_attn"), x)?;
    let a = multi_head_attention(binder, &format!("{prefix}.attn"), cfg, h, ctx)?.dropout(cfg.dropout)?;
    feed_forward_block(binder, prefix, cfg, x.add(a)?)
}

/// Runs every layer, layer `l` with `contexts[l]`, then the final layer norm.
pub fn encoder_forward<'t, T: Scalar>(
    binder: &Binder<'t, T>,
    prefix: &str,
    cfg: &EncoderConfig,
    contexts: &[AttentionContext],
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    if contexts.len() != cfg.num_layers {
        return Err(Error::Config(format!(
            "{} contexts for {} layers",
            contexts.len(),
            cfg.num_layers
        )));
    }
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != cfg.d_in {
        return Err(Error::shape("encoder_forward", &shape, &[0, cfg.d_in]));
    }
    let mut h = x;
    for (l, &ctx) in contexts.iter().enumerate() {
        h = encoder_layer_forward(binder, &layer_name(prefix, l), cfg, h, ctx)?;
    }
    binder.layer_norm(&format!("{prefix}.final_ln"), h)
}

/// Per-layer streaming state: inputs awaiting their query turn plus the
/// key/value rows still inside some future query's window.
#[derive(Clone, Debug)]
struct LayerState<T: Scalar> {
    ctx: (usize, usize),
    /// Absolute position of `keys[0]` / `values[0]`.
    kv_base: usize,
    keys: VecDeque<Vec<T>>,
    values: VecDeque<Vec<T>>,
    /// Absolute position of `inputs[0]`, which is the next query.
    next_query: usize,
    inputs: VecDeque<Vec<T>>,
}

/// Incremental encoder over finite contexts. Emits output frame `t` once
/// input frame `t + ΣR` has arrived; results equal [`encoder_forward`]
/// on the full sequence.
#[derive(Clone, Debug)]
pub struct EncoderStream<'m, T: Scalar = f32> {
    params: &'m ParamStore<T>,
    prefix: String,
    cfg: EncoderConfig,
    layers: Vec<LayerState<T>>,
    finished: bool,
}

impl<'m, T: Scalar> EncoderStream<'m, T> {
    pub fn new(
        params: &'m ParamStore<T>,
        prefix: &str,
        cfg: &EncoderConfig,
        contexts: &[AttentionContext],
    ) -> Result<Self> {
        if contexts.len() != cfg.num_layers {
            return Err(Error::Config(format!(
                "{} contexts for {} layers",
                contexts.len(),
                cfg.num_layers
            )));
        }
        let layers = contexts
            .iter()
            .map(|c| match (c.left, c.right) {
                (Some(l), Some(r)) => Ok(LayerState {
                    ctx: (l, r),
                    kv_base: 0,
                    keys: VecDeque::new(),
                    values: VecDeque::new(),
                    next_query: 0,
                    inputs: VecDeque::new(),
                }),
                _ => Err(Error::Config(format!(
                    "streaming needs finite attention contexts, got {c}"
                ))),
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            params,
            prefix: prefix.to_string(),
            cfg: cfg.clone(),
            layers,
            finished: false,
        })
    }

    /// Encoder frames of look-ahead before the first output.
    pub fn lookahead(&self) -> usize {
        self.layers.iter().map(|l| l.ctx.1).sum()
    }

    pub fn push(&mut self, frames: &Tensor<T>) -> Result<Tensor<T>> {
        if self.finished {
            return Err(Error::State("encoder stream already flushed".into()));
        }
        if frames.rank() != 2 || frames.last_dim() != self.cfg.d_in {
            return Err(Error::shape("encoder_stream", frames.shape(), &[0, self.cfg.d_in]));
        }
        let rows = (0..frames.rows()).map(|r| frames.row(r).to_vec()).collect();
        self.run(rows, false)
    }

    /// Processes every remaining query with windows clipped at the end.
    pub fn flush(&mut self) -> Result<Tensor<T>> {
        if self.finished {
            return Err(Error::State("encoder stream already flushed".into()));
        }
        self.finished = true;
        self.run(Vec::new(), true)
    }

    fn run(&mut self, mut rows: Vec<Vec<T>>, end: bool) -> Result<Tensor<T>> {
        let tape = Tape::<T>::new();
        let binder = Binder::new(&tape, self.params);
        for l in 0..self.layers.len() {
            rows = self.layer_step(&binder, l, rows, end)?;
        }
        if rows.is_empty() {
            return Ok(Tensor::zeros(vec![0, self.cfg.d_in]));
        }
        let refs: Vec<&[T]> = rows.iter().map(Vec::as_slice).collect();
        let x = tape.constant(Tensor::stack_rows(&refs)?);
        let y = binder.layer_norm(&format!("{}.final_ln", self.prefix), x)?;
        Ok((*y.value()).clone())
    }

    fn layer_step(&mut self, binder: &Binder<'_, T>, l: usize, rows: Vec<Vec<T>>, end: bool) -> Result<Vec<Vec<T>>> {
        let tape = binder.tape();
        let p = layer_name(&self.prefix, l);
        let cfg = &self.cfg;
        let st = &mut self.layers[l];
        if !rows.is_empty() {
            let refs: Vec<&[T]> = rows.iter().map(Vec::as_slice).collect();
            let x = tape.constant(Tensor::stack_rows(&refs)?);
            let h = binder.layer_norm(&format!("{p}.ln_attn"), x)?;
            let k = binder.linear(&format!("{p}.attn.k"), h)?.value();
            let v = binder.linear(&format!("{p}.attn.v"), h)?.value();
            for r in 0..rows.len() {
                st.keys.push_back(k.row(r).to_vec());
                st.values.push_back(v.row(r).to_vec());
            }
            st.inputs.extend(rows);
        }
        let (left, right) = st.ctx;
        let avail = st.kv_base + st.keys.len();
        // Queries whose right context is complete, or all of them at the end.
        let ready = if end {
            st.inputs.len()
        } else {
            (avail.saturating_sub(right)).saturating_sub(st.next_query).min(st.inputs.len())
        };
        if ready == 0 {
            return Ok(Vec::new());
        }
        let queries: Vec<Vec<T>> = st.inputs.drain(..ready).collect();
        let first = st.next_query;
        let ranges: Vec<(usize, usize)> = (first..first + ready)
            .map(|t| {
                let lo = t.saturating_sub(left).max(st.kv_base);
                let hi = (t + right + 1).min(avail);
                (lo - st.kv_base, hi - st.kv_base)
            })
            .collect();
        let refs: Vec<&[T]> = queries.iter().map(Vec::as_slice).collect();
        let x = tape.constant(Tensor::stack_rows(&refs)?);
        let h = binder.layer_norm(&format!("{p}.ln_attn"), x)?;
        let q = binder.linear(&format!("{p}.attn.q"), h)?;
        let krefs: Vec<&[T]> = st.keys.iter().map(Vec::as_slice).collect();
        let vrefs: Vec<&[T]> = st.values.iter().map(Vec::as_slice).collect();
        let k = tape.constant(Tensor::stack_rows(&krefs)?);
        let v = tape.constant(Tensor::stack_rows(&vrefs)?);
        let a = binder.linear(&format!("{p}.attn.o"), heads_attention(q, k, v, &ranges, cfg)?)?;
        let out = feed_forward_block(binder, &p, cfg, x.add(a)?)?.value();

        st.next_query += ready;
        let keep_from = st.next_query.saturating_sub(left);
        while st.kv_base < keep_from && !st.keys.is_empty() {
            st.keys.pop_front();
            st.values.pop_front();
            st.kv_base += 1;
        }
        Ok((0..ready).map(|r| out.row(r).to_vec()).collect())
    }
}
