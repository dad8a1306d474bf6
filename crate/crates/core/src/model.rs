//! The full transducer: frontend, encoder, predictor and joiner.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Binder, ParamStore, Scalar, Tape, Tensor, Var};
use crate::config::{AttentionContext, ModelConfig};
use crate::error::{Error, Result};
use crate::joiner::{self, Joiner};
use crate::loss::rnnt_loss;
use crate::predictor::{self, Predictor};
use crate::{encoder, features, frontend};

pub const FRONTEND: &str = "frontend";
pub const ENCODER: &str = "encoder";

#[derive(Clone, Debug)]
pub struct Transducer<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    /// Global feature mean subtracted before the frontend.
    pub feature_mean: Option<Vec<f64>>,
}

/// Parameter counts per component.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct ParamReport {
    pub frontend: usize,
    pub encoder: usize,
    pub predictor: usize,
    pub joiner: usize,
    pub total: usize,
}

impl<T: Scalar> Transducer<T> {
    /// Randomly initialized model; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let v = config.tokens.len();
        frontend::init_frontend(&mut params, FRONTEND, &config.frontend, config.feat_dim, &mut rng);
        encoder::init_encoder(&mut params, ENCODER, &config.encoder, &mut rng);
        predictor::init_predictor(&mut params, &config.predictor, v, &mut rng);
        joiner::init_joiner(
            &mut params,
            &config.joiner,
            config.encoder.d_in,
            config.predictor.output_dim(),
            v,
            &mut rng,
        );
        Ok(Self {
            config,
            params,
            feature_mean: None,
        })
    }

    pub fn vocab(&self) -> usize {
        self.config.tokens.len()
    }

    pub fn trained_contexts(&self) -> Result<Vec<AttentionContext>> {
        self.config.encoder.contexts()
    }

    pub fn param_report(&self) -> ParamReport {
        let frontend = self.params.count_prefix(&format!("{FRONTEND}."));
        let encoder = self.params.count_prefix(&format!("{ENCODER}."));
        let predictor = self.params.count_prefix("predictor.");
        let joiner = self.params.count_prefix("joiner.");
        ParamReport {
            frontend,
            encoder,
            predictor,
            joiner,
            total: self.params.num_scalars(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Transducer<U> {
        Transducer {
            config: self.config.clone(),
            params: self.params.cast(),
            feature_mean: self.feature_mean.clone(),
        }
    }

    /// Applies the stored feature mean, if any.
    pub fn prepare_features(&self, feats: &Tensor) -> Result<Tensor> {
        if feats.rank() != 2 || feats.last_dim() != self.config.feat_dim {
            return Err(Error::shape("prepare_features", feats.shape(), &[0, self.config.feat_dim]));
        }
        match &self.feature_mean {
            Some(mean) => features::normalize(feats, mean),
            None => Ok(feats.clone()),
        }
    }

    /// Frontend and encoder on the tape: `[T×d] → [T'×d_in]`.
    pub fn encode_graph<'t>(
        &self,
        binder: &Binder<'t, T>,
        feats: Var<'t, T>,
        contexts: &[AttentionContext],
    ) -> Result<Var<'t, T>> {
        let x = frontend::frontend_forward(binder, FRONTEND, &self.config.frontend, self.config.feat_dim, feats)?;
        encoder::encoder_forward(binder, ENCODER, &self.config.encoder, contexts, x)
    }

    /// Lattice logits `[(T'·(U+1))×V]` for encoder output `h`.
    pub fn lattice_graph<'t>(&self, binder: &Binder<'t, T>, h: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
        let p = predictor::predictor_unroll(binder, &self.config.predictor, self.vocab(), labels)?;
        joiner::join(binder, h, p)
    }

    /// Scalar transducer loss node for one utterance.
    pub fn loss_graph<'t>(
        &self,
        binder: &Binder<'t, T>,
        feats: Var<'t, T>,
        labels: &[usize],
        contexts: &[AttentionContext],
    ) -> Result<Var<'t, T>> {
        let h = self.encode_graph(binder, feats, contexts)?;
        let frames = h.shape()[0];
        let z = self.lattice_graph(binder, h, labels)?;
        let out = rnnt_loss(&z.value().to_f64_vec(), frames, labels, self.vocab())?;
        z.external_scalar(out.loss, out.grad)
    }

    /// Inference encoder output for prepared features.
    pub fn encode(&self, feats: &Tensor<T>, contexts: &[AttentionContext]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &self.params);
        let h = self.encode_graph(&binder, tape.constant(feats.clone()), contexts)?;
        Ok((*h.value()).clone())
    }

    /// Loss value for prepared features, without gradients.
    pub fn loss(&self, feats: &Tensor<T>, labels: &[usize], contexts: &[AttentionContext]) -> Result<f64> {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &self.params);
        Ok(self.loss_graph(&binder, tape.constant(feats.clone()), labels, contexts)?.value().item())
    }

    pub fn predictor(&self) -> Predictor<'_, T> {
        Predictor::new(&self.config.predictor, &self.params, self.vocab())
    }

    pub fn joiner(&self) -> Result<Joiner<'_, T>> {
        Joiner::new(&self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_parameter_breakdown() {
        let m = Transducer::<f32>::new(ModelConfig::full_scale(), 0).unwrap();
        let r = m.param_report();
        assert_eq!(r.frontend, 767_296);
        assert_eq!(r.encoder, 37_829_632);
        assert_eq!(r.predictor, 6_276_896);
        assert_eq!(r.joiner, 939_520);
        assert_eq!(r.total, 45_813_344);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Transducer::<f32>::new(ModelConfig::desk_scale(), 3).unwrap();
        let b = Transducer::<f32>::new(ModelConfig::desk_scale(), 3).unwrap();
        for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb);
        }
    }
}
