//! Causal VGG frontend: stacked causal 3×3 convolutions with max pooling,
//! flattened over channels and frequency, then an affine projection.

use std::collections::VecDeque;

use rand::Rng;

use crate::autodiff::{init_linear, Binder, ParamStore, Scalar, Tape, Tensor, Var};
use crate::config::FrontendConfig;
use crate::error::{Error, Result};

fn conv_name(prefix: &str, block: usize, layer: usize) -> String {
    format!("{prefix}.block{block}.conv{layer}")
}

/// Registers frontend parameters under `prefix`.
pub fn init_frontend<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &FrontendConfig,
    in_dim: usize,
    rng: &mut impl Rng,
) {
    let mut c_in = 1;
    for (b, blk) in cfg.blocks.iter().enumerate() {
        for l in 0..blk.num_conv_layers {
            let name = conv_name(prefix, b, l);
            let area = blk.kernel_time * blk.kernel_freq;
            store.init_uniform(
                &format!("{name}.weight"),
                &[blk.out_channels, c_in, blk.kernel_time, blk.kernel_freq],
                c_in * area,
                blk.out_channels * area,
                rng,
            );
            store.init_const(&format!("{name}.bias"), &[blk.out_channels], 0.0);
            c_in = blk.out_channels;
        }
    }
    init_linear(store, &format!("{prefix}.proj"), cfg.flat_dim(in_dim), cfg.proj_out, true, rng);
}

fn conv_relu<'t, T: Scalar>(
    binder: &Binder<'t, T>,
    name: &str,
    x: Var<'t, T>,
    pad_time: usize,
    kernel_freq: usize,
) -> Result<Var<'t, T>> {
    let w = binder.get(&format!("{name}.weight"))?;
    let b = binder.get(&format!("{name}.bias"))?;
    x.conv2d(w, pad_time, (kernel_freq - 1) / 2)?.add_channel_bias(b)?.relu()
}

/// `[T×d] → [T'×proj_out]` with `T' = ` [`FrontendConfig::output_len`].
pub fn frontend_forward<'t, T: Scalar>(
    binder: &Binder<'t, T>,
    prefix: &str,
    cfg: &FrontendConfig,
    in_dim: usize,
    feats: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let shape = feats.shape();
    if shape.len() != 2 || shape[1] != in_dim {
        return Err(Error::shape("frontend_forward", &shape, &[0, in_dim]));
    }
    if shape[0] == 0 {
        return Err(Error::Input("frontend needs at least one frame".into()));
    }
    let mut x = feats.reshape(vec![1, shape[0], shape[1]])?;
    for (b, blk) in cfg.blocks.iter().enumerate() {
        for l in 0..blk.num_conv_layers {
            x = conv_relu(binder, &conv_name(prefix, b, l), x, blk.kernel_time - 1, blk.kernel_freq)?;
        }
        x = x.max_pool2d(blk.pool_time, blk.pool_freq)?;
    }
    binder.linear(&format!("{prefix}.proj"), x.channels_to_rows()?)
}

/// One conv layer's causal history: the last `N−1` input frames `[C×F]`.
#[derive(Clone, Debug)]
struct ConvHistory<T: Scalar> {
    frames: VecDeque<Vec<T>>,
}

#[derive(Clone, Debug)]
struct BlockState<T: Scalar> {
    convs: Vec<ConvHistory<T>>,
    /// Conv outputs waiting for a complete pooling window.
    pool: Vec<Vec<T>>,
}

/// Incremental frontend. It emits exactly the rows [`frontend_forward`]
/// produces for the frames seen so far, holding back frames whose pooling
/// window is still open until [`FrontendStream::flush`].
#[derive(Clone, Debug)]
pub struct FrontendStream<'m, T: Scalar = f32> {
    params: &'m ParamStore<T>,
    prefix: String,
    cfg: FrontendConfig,
    in_dim: usize,
    blocks: Vec<BlockState<T>>,
    /// Channels and frequency bins entering each block.
    geometry: Vec<(usize, usize)>,
    finished: bool,
}

impl<'m, T: Scalar> FrontendStream<'m, T> {
    pub fn new(params: &'m ParamStore<T>, prefix: &str, cfg: &FrontendConfig, in_dim: usize) -> Self {
        let mut geometry = Vec::new();
        let (mut c, mut f) = (1, in_dim);
        let blocks = cfg
            .blocks
            .iter()
            .map(|blk| {
                geometry.push((c, f));
                let convs = (0..blk.num_conv_layers)
                    .map(|l| {
                        let c_in = if l == 0 { c } else { blk.out_channels };
                        ConvHistory {
                            frames: (0..blk.kernel_time - 1).map(|_| vec![T::ZERO; c_in * f]).collect(),
                        }
                    })
                    .collect();
                c = blk.out_channels;
                f = f.div_ceil(blk.pool_freq);
                BlockState { convs, pool: Vec::new() }
            })
            .collect();
        Self {
            params,
            prefix: prefix.to_string(),
            cfg: cfg.clone(),
            in_dim,
            blocks,
            geometry,
            finished: false,
        }
    }

    /// Feeds feature rows `[n×d]`; returns newly final rows `[m×proj_out]`.
    pub fn push(&mut self, frames: &Tensor<T>) -> Result<Tensor<T>> {
        if self.finished {
            return Err(Error::State("frontend stream already flushed".into()));
        }
        if frames.rank() != 2 || frames.last_dim() != self.in_dim {
            return Err(Error::shape("frontend_stream", frames.shape(), &[0, self.in_dim]));
        }
        let mut out = Vec::new();
        for r in 0..frames.rows() {
            self.feed(0, frames.row(r).to_vec(), &mut out)?;
        }
        self.collect(out)
    }

    /// Completes partial pooling windows and ends the stream.
    pub fn flush(&mut self) -> Result<Tensor<T>> {
        if self.finished {
            return Err(Error::State("frontend stream already flushed".into()));
        }
        self.finished = true;
        let mut out = Vec::new();
        for b in 0..self.blocks.len() {
            if !self.blocks[b].pool.is_empty() {
                let pooled = self.pool_block(b)?;
                self.forward_pooled(b, pooled, &mut out)?;
            }
        }
        self.collect(out)
    }

    fn collect(&self, rows: Vec<Vec<T>>) -> Result<Tensor<T>> {
        let refs: Vec<&[T]> = rows.iter().map(Vec::as_slice).collect();
        if refs.is_empty() {
            return Ok(Tensor::zeros(vec![0, self.cfg.proj_out]));
        }
        Tensor::stack_rows(&refs)
    }

    /// Passes one `[C×F]` frame into block `b`.
    fn feed(&mut self, b: usize, frame: Vec<T>, out: &mut Vec<Vec<T>>) -> Result<()> {
        let blk = self.cfg.blocks[b].clone();
        let (c0, f) = self.geometry[b];
        let mut x = frame;
        let mut c_in = c0;
        for l in 0..blk.num_conv_layers {
            let hist = &mut self.blocks[b].convs[l];
            let kn = blk.kernel_time;
            let mut window = vec![T::ZERO; c_in * kn * f];
            for (n, src) in hist.frames.iter().chain(std::iter::once(&x)).enumerate() {
                for ci in 0..c_in {
                    window[(ci * kn + n) * f..(ci * kn + n + 1) * f].copy_from_slice(&src[ci * f..(ci + 1) * f]);
                }
            }
            if kn > 1 {
                hist.frames.pop_front();
                hist.frames.push_back(x);
            }
            let tape = Tape::<T>::new();
            let binder = Binder::new(&tape, self.params);
            let input = tape.constant(Tensor::new(vec![c_in, kn, f], window)?);
            let y = conv_relu(&binder, &conv_name(&self.prefix, b, l), input, 0, blk.kernel_freq)?;
            x = y.value().data().to_vec();
            c_in = blk.out_channels;
        }
        self.blocks[b].pool.push(x);
        if self.blocks[b].pool.len() == blk.pool_time {
            let pooled = self.pool_block(b)?;
            self.forward_pooled(b, pooled, out)?;
        }
        Ok(())
    }

    fn pool_block(&mut self, b: usize) -> Result<Vec<T>> {
        let blk = &self.cfg.blocks[b];
        let f = self.geometry[b].1;
        let c = blk.out_channels;
        let rows = std::mem::take(&mut self.blocks[b].pool);
        let n = rows.len();
        let mut data = vec![T::ZERO; c * n * f];
        for (t, row) in rows.iter().enumerate() {
            for ci in 0..c {
                data[(ci * n + t) * f..(ci * n + t + 1) * f].copy_from_slice(&row[ci * f..(ci + 1) * f]);
            }
        }
        let tape = Tape::<T>::new();
        let pooled = tape
            .constant(Tensor::new(vec![c, n, f], data)?)
            .max_pool2d(blk.pool_time, blk.pool_freq)?;
        Ok(pooled.value().data().to_vec())
    }

    fn forward_pooled(&mut self, b: usize, pooled: Vec<T>, out: &mut Vec<Vec<T>>) -> Result<()> {
        if b + 1 < self.blocks.len() {
            return self.feed(b + 1, pooled, out);
        }
        let c = self.cfg.blocks[b].out_channels;
        let f = pooled.len() / c;
        let tape = Tape::<T>::new();
        let binder = Binder::new(&tape, self.params);
        let x = tape.constant(Tensor::new(vec![c, 1, f], pooled)?).channels_to_rows()?;
        let y = binder.linear(&format!("{}.proj", self.prefix), x)?;
        out.push(y.value().data().to_vec());
        Ok(())
    }
}
