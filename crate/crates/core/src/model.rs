//! The fused multi-view network: per-view streams, fusion and projection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::dualstream::{RhythmStream, StreamConfig, VisualStream};
use crate::error::{Error, Result};
use crate::mvca::{Aggregator, CrossViewAttention, GatedFusion, MvcaConfig, ProjectHead, ViewWeights, VIEWS};

/// Which fusion stack sits between the streams and the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionMode {
    /// Noise-weighted aggregation, cross-view attention and the gate.
    Mvca,
    /// Plain mean of the per-view rhythm traces; no appearance stream.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub stream: StreamConfig,
    pub mvca: MvcaConfig,
    pub fusion: FusionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stream: StreamConfig::default(),
            mvca: MvcaConfig::default(),
            fusion: FusionMode::Mvca,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mvca.tokens != self.stream.tokens() {
            return Err(Error::Config(format!(
                "fusion expects {} tokens, rhythm stream emits {}",
                self.mvca.tokens,
                self.stream.tokens()
            )));
        }
        if self.mvca.feat_dim != self.stream.feat_dim {
            return Err(Error::Config(format!(
                "fusion width {} differs from appearance width {}",
                self.mvca.feat_dim, self.stream.feat_dim
            )));
        }
        if self.stream.input_pool == 0 || self.mvca.segments == 0 {
            return Err(Error::Config("pooling factor and segment count must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FusionModel {
    pub cfg: ModelConfig,
    rhythm: RhythmStream,
    visual: Option<VisualStream>,
    aggregator: Option<Aggregator>,
    attention: Option<CrossViewAttention>,
    gate: Option<GatedFusion>,
    head: ProjectHead,
}

/// Graph handles of one forward pass; every trace block is `[B, N, T]`.
#[derive(Debug, Clone, Copy)]
pub struct FusionOutput {
    /// `[B, 3, N, T]` per-view rhythm traces.
    pub views: Var,
    /// Aggregated path.
    pub s: Var,
    /// Attention path; equals `s` without the fusion stack.
    pub s_prime: Var,
    pub u: Var,
    pub y: Var,
}

impl FusionModel {
    /// Build the model and its parameters from `seed`.
    pub fn new<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<S>)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let n = cfg.mvca.tokens;
        let rhythm = RhythmStream::new(&mut store, "rhythm", &cfg.stream, &mut rng)?;
        let full = cfg.fusion == FusionMode::Mvca;
        let visual = full
            .then(|| VisualStream::new(&mut store, "visual", &cfg.stream, &mut rng))
            .transpose()?;
        let aggregator = full.then(|| Aggregator::new(&mut store, "aggregate", n)).transpose()?;
        let attention = full
            .then(|| CrossViewAttention::new(&mut store, "attention", &cfg.mvca, &mut rng))
            .transpose()?;
        let gate = full
            .then(|| GatedFusion::new(&mut store, "gate", cfg.mvca.gate_init))
            .transpose()?;
        let head = ProjectHead::new(&mut store, "head", n)?;
        let model = Self {
            cfg: cfg.clone(),
            rhythm,
            visual,
            aggregator,
            attention,
            gate,
            head,
        };
        Ok((model, store))
    }

    /// Forward pass on pooled frames `[B, 3 views, 3, T, h, w]`.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        frames: Var,
        weights: &[ViewWeights],
    ) -> Result<FusionOutput> {
        let fs = g.shape(frames).to_vec();
        if fs.len() != 6 || fs[1] != VIEWS {
            return Err(Error::graph("model", format!("frames {fs:?} are not [B, 3, 3, T, h, w]")));
        }
        let (b, t) = (fs[0], fs[3]);
        let folded = g.reshape(frames, &[b * VIEWS, fs[2], t, fs[4], fs[5]])?;
        let n = self.cfg.mvca.tokens;
        let views = self.rhythm.forward_pooled(g, store, folded)?;
        let views = g.reshape(views, &[b, VIEWS, n, t])?;
        match (&self.visual, &self.aggregator, &self.attention, &self.gate) {
            (Some(visual), Some(agg), Some(attn), Some(gate)) => {
                let s = agg.forward(g, store, views, weights)?;
                let feats = visual.forward_pooled(g, store, folded)?;
                let feats = g.reshape(feats, &[b, VIEWS, self.cfg.mvca.feat_dim, t])?;
                let s_prime = attn.forward(g, store, feats)?;
                let u = gate.forward(g, store, s, s_prime)?;
                let y = self.head.forward(g, store, u)?;
                Ok(FusionOutput {
                    views,
                    s,
                    s_prime,
                    u,
                    y,
                })
            }
            _ => {
                let s = g.mean_axis(views, 1)?;
                let s = g.reshape(s, &[b, n, t])?;
                let y = self.head.forward(g, store, s)?;
                Ok(FusionOutput {
                    views,
                    s,
                    s_prime: s,
                    u: s,
                    y,
                })
            }
        }
    }

    /// Inference on one pooled window `[3, 3, T, h, w]`; returns `Y [1, N, T]`.
    pub fn predict<S: Scalar>(&self, store: &ParamStore<S>, frames: &Tensor<S>, weights: ViewWeights) -> Result<Tensor<S>> {
        let mut shape = vec![1];
        shape.extend_from_slice(frames.shape());
        let mut g = Graph::new();
        let x = g.input(frames.clone().reshaped(&shape)?);
        let out = self.forward(&mut g, store, x, &[weights])?;
        g.check_finite(out.y, "prediction")?;
        Ok(g.value(out.y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn frames(seed: u64, t: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3 * 3 * t * 64;
        Tensor::new(vec![3, 3, t, 8, 8], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn shapes_agree_across_paths() {
        for fusion in [FusionMode::Mvca, FusionMode::Mean] {
            let cfg = ModelConfig {
                fusion,
                ..ModelConfig::default()
            };
            let (m, store) = FusionModel::new::<f64>(&cfg, 3).unwrap();
            let x = frames(1, 16).reshaped(&[1, 3, 3, 16, 8, 8]).unwrap();
            let mut g = Graph::new();
            let xi = g.input(x);
            let out = m.forward(&mut g, &store, xi, &[ViewWeights::UNIFORM]).unwrap();
            for v in [out.s, out.s_prime, out.u, out.y] {
                assert_eq!(g.shape(v), [1, 4, 16]);
                assert!(g.value(v).all_finite());
            }
            assert_eq!(g.shape(out.views), [1, 3, 4, 16]);
        }
    }

    #[test]
    fn mean_mode_has_fewer_parameters() {
        let (_, full) = FusionModel::new::<f32>(&ModelConfig::default(), 0).unwrap();
        let cfg = ModelConfig {
            fusion: FusionMode::Mean,
            ..ModelConfig::default()
        };
        let (_, mean) = FusionModel::new::<f32>(&cfg, 0).unwrap();
        assert!(mean.scalar_count() < full.scalar_count());
        assert!(full.id("gate.beta").is_some() && mean.id("gate.beta").is_none());
    }

    #[test]
    fn seeded_construction_is_reproducible() {
        let (m, a) = FusionModel::new::<f32>(&ModelConfig::default(), 9).unwrap();
        let (_, b) = FusionModel::new::<f32>(&ModelConfig::default(), 9).unwrap();
        assert_eq!(a.to_mvp_bytes(), b.to_mvp_bytes());
        let x: Tensor<f32> = frames(2, 16).cast();
        let w = ViewWeights::UNIFORM;
        assert_eq!(m.predict(&a, &x, w).unwrap(), m.predict(&b, &x, w).unwrap());
    }

    #[test]
    fn token_mismatch_is_a_config_error() {
        let mut cfg = ModelConfig::default();
        cfg.mvca.tokens = 9;
        assert!(matches!(FusionModel::new::<f32>(&cfg, 0), Err(Error::Config(_))));
    }
}
