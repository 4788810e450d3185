//! Per-view rhythm and appearance streams over a shared 3-D CNN topology.
//!
//! Both streams run the same encoder-decoder (two stride-2 temporal
//! downsamples, a residual block, two temporal upsamples back to the input
//! length) with separate parameters. Views share weights within a stream and
//! are folded into the batch axis.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::nn::{Conv3d, Linear, SampleNorm};
use crate::diffcore::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::video::Video;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    /// Fixed average-pooling factor applied to frames before the stem.
    pub input_pool: usize,
    /// Stem, bottleneck and decoder widths.
    pub widths: [usize; 3],
    /// Token grid side; the rhythm stream emits `token_side²` traces.
    pub token_side: usize,
    /// Appearance feature width.
    pub feat_dim: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            input_pool: 4,
            widths: [16, 32, 16],
            token_side: 2,
            feat_dim: 16,
        }
    }
}

impl StreamConfig {
    pub fn tokens(&self) -> usize {
        self.token_side * self.token_side
    }
}

/// Scale 8-bit frames of several views to `[-1, 1]`, shape `[V, 3, T, H, W]`.
pub fn frames_to_tensor<S: Scalar>(views: &[&Video]) -> Result<Tensor<S>> {
    let first = views.first().ok_or_else(|| Error::param("no views"))?;
    let (t, h, w, c) = (first.frames(), first.height(), first.width(), first.channels());
    if views.iter().any(|v| (v.frames(), v.height(), v.width(), v.channels()) != (t, h, w, c)) {
        return Err(Error::param("views differ in shape"));
    }
    let mut data = vec![S::zero(); views.len() * c * t * h * w];
    for (vi, v) in views.iter().enumerate() {
        let src = v.data();
        for ti in 0..t {
            for p in 0..h * w {
                for ch in 0..c {
                    let x = src[(ti * h * w + p) * c + ch] as f64 / 127.5 - 1.0;
                    data[((vi * c + ch) * t + ti) * h * w + p] = S::of(x);
                }
            }
        }
    }
    Tensor::new(vec![views.len(), c, t, h, w], data)
}

/// Non-overlapping spatial average pooling of `[.., T, H, W]` data, used to
/// cache the stem's fixed input pooling.
pub fn pool_spatial<S: Scalar>(x: &Tensor<S>, k: usize) -> Result<Tensor<S>> {
    let s = x.shape();
    if s.len() < 3 || k == 0 || s[s.len() - 1] % k != 0 || s[s.len() - 2] % k != 0 {
        return Err(Error::param(format!("pool factor {k} does not tile {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let (ho, wo) = (h / k, w / k);
    let planes = x.numel() / (h * w);
    let inv = S::of(1.0 / (k * k) as f64);
    let src = x.data();
    let mut out = vec![S::zero(); planes * ho * wo];
    for p in 0..planes {
        for y in 0..h {
            for xx in 0..w {
                out[(p * ho + y / k) * wo + xx / k] += src[(p * h + y) * w + xx];
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    let mut shape = s.to_vec();
    let r = shape.len();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    Tensor::new(shape, out)
}

#[derive(Debug, Clone, Copy)]
struct ConvBlock {
    conv: Conv3d,
    norm: SampleNorm,
}

impl ConvBlock {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: [usize; 3],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv3d::new(store, &format!("{name}.conv"), c_in, c_out, [3, 3, 3], stride, rng)?,
            norm: SampleNorm::new(store, &format!("{name}.norm"), c_out)?,
        })
    }

    fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.norm.forward(g, store, y)?;
        Ok(g.relu(y))
    }
}

/// Encoder-decoder shared by both streams.
#[derive(Debug, Clone, Copy)]
pub struct Backbone {
    stem: ConvBlock,
    down1: ConvBlock,
    down2: ConvBlock,
    mid: ConvBlock,
    up1: ConvBlock,
    up2: ConvBlock,
}

impl Backbone {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, cfg: &StreamConfig, rng: &mut impl Rng) -> Result<Self> {
        let [c1, c2, c3] = cfg.widths;
        Ok(Self {
            stem: ConvBlock::new(store, &format!("{name}.stem"), 3, c1, [1, 2, 2], rng)?,
            down1: ConvBlock::new(store, &format!("{name}.down1"), c1, c2, [2, 1, 1], rng)?,
            down2: ConvBlock::new(store, &format!("{name}.down2"), c2, c2, [2, 1, 1], rng)?,
            mid: ConvBlock::new(store, &format!("{name}.mid"), c2, c2, [1, 1, 1], rng)?,
            up1: ConvBlock::new(store, &format!("{name}.up1"), c2, c3, [1, 1, 1], rng)?,
            up2: ConvBlock::new(store, &format!("{name}.up2"), c3, c3, [1, 1, 1], rng)?,
        })
    }

    /// `[B, 3, T, h, w]` pooled frames to `[B, C, T, h/2, w/2]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let t = g.shape(x)[2];
        let h0 = self.stem.forward(g, store, x)?;
        let h1 = self.down1.forward(g, store, h0)?;
        let t1 = g.shape(h1)[2];
        let h2 = self.down2.forward(g, store, h1)?;
        let m = self.mid.forward(g, store, h2)?;
        let h2 = g.add(h2, m)?;
        let u1 = g.upsample_time(h2, t1)?;
        let u1 = self.up1.forward(g, store, u1)?;
        let u2 = g.upsample_time(u1, t)?;
        self.up2.forward(g, store, u2)
    }
}

fn check_input(shape: &[usize], cfg: &StreamConfig, pooled: bool) -> Result<()> {
    let scale = if pooled { cfg.input_pool } else { 1 };
    if shape.len() != 5 || shape[1] != 3 {
        return Err(Error::graph("stream", format!("input {shape:?} is not [B, 3, T, H, W]")));
    }
    if shape[2] < 8 || shape[3] * scale < 16 || shape[4] * scale < 16 {
        return Err(Error::graph("stream", format!("input {shape:?} below T >= 8, H, W >= 16")));
    }
    Ok(())
}

fn pool_input<S: Scalar>(g: &mut Graph<S>, x: Var, cfg: &StreamConfig) -> Result<Var> {
    check_input(g.shape(x), cfg, false)?;
    if cfg.input_pool > 1 {
        g.avg_pool3d(x, [1, cfg.input_pool, cfg.input_pool])
    } else {
        Ok(x)
    }
}

/// Per-view rhythm traces: `[B, 3, T, H, W]` to `[B, N, T]`.
#[derive(Debug, Clone)]
pub struct RhythmStream {
    pub cfg: StreamConfig,
    backbone: Backbone,
    head: Conv3d,
}

impl RhythmStream {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, cfg: &StreamConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            cfg: cfg.clone(),
            backbone: Backbone::new(store, &format!("{name}.backbone"), cfg, rng)?,
            head: Conv3d::new(store, &format!("{name}.head"), cfg.widths[2], 1, [3, 1, 1], [1, 1, 1], rng)?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, frames: Var) -> Result<Var> {
        let x = pool_input(g, frames, &self.cfg)?;
        self.forward_pooled(g, store, x)
    }

    /// Same as [`forward`](Self::forward) on frames already pooled by
    /// `input_pool`.
    pub fn forward_pooled<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        check_input(g.shape(x), &self.cfg, true)?;
        let h = self.backbone.forward(g, store, x)?;
        let s = g.shape(h).to_vec();
        let p = self.cfg.token_side;
        if s[3] % p != 0 || s[4] % p != 0 {
            return Err(Error::graph("rhythm_head", format!("feature map {s:?} does not pool to {p}x{p}")));
        }
        let pooled = g.avg_pool3d(h, [1, s[3] / p, s[4] / p])?;
        let y = self.head.forward(g, store, pooled)?;
        let (b, t) = (s[0], s[2]);
        let y = g.reshape(y, &[b, t, p * p])?;
        g.permute(y, &[0, 2, 1])
    }
}

/// Per-view appearance features: `[B, 3, T, H, W]` to `[B, D, T]`.
#[derive(Debug, Clone)]
pub struct VisualStream {
    pub cfg: StreamConfig,
    backbone: Backbone,
    head: Linear,
}

impl VisualStream {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, cfg: &StreamConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            cfg: cfg.clone(),
            backbone: Backbone::new(store, &format!("{name}.backbone"), cfg, rng)?,
            head: Linear::new(store, &format!("{name}.head"), cfg.widths[2], cfg.feat_dim, true, rng)?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, frames: Var) -> Result<Var> {
        let x = pool_input(g, frames, &self.cfg)?;
        self.forward_pooled(g, store, x)
    }

    pub fn forward_pooled<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        check_input(g.shape(x), &self.cfg, true)?;
        let h = self.backbone.forward(g, store, x)?;
        let h = g.mean_axis(h, 4)?;
        let h = g.mean_axis(h, 3)?;
        let s = g.shape(h).to_vec();
        let h = g.reshape(h, &[s[0], s[1], s[2]])?;
        let h = g.permute(h, &[0, 2, 1])?;
        let f = self.head.forward(g, store, h)?;
        g.permute(f, &[0, 2, 1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_clip(seed: u64, b: usize, t: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * 3 * t * 32 * 32;
        Tensor::new(vec![b, 3, t, 32, 32], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn streams(seed: u64) -> (ParamStore<f32>, RhythmStream, VisualStream) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let cfg = StreamConfig::default();
        let r = RhythmStream::new(&mut s, "rhythm", &cfg, &mut rng).unwrap();
        let v = VisualStream::new(&mut s, "visual", &cfg, &mut rng).unwrap();
        (s, r, v)
    }

    #[test]
    fn output_shapes() {
        let (s, r, v) = streams(0);
        for t in [32, 37] {
            let mut g = Graph::new();
            let x = g.input(random_clip(1, 1, t));
            let y = r.forward(&mut g, &s, x).unwrap();
            assert_eq!(g.shape(y), [1, 4, t]);
            let f = v.forward(&mut g, &s, x).unwrap();
            assert_eq!(g.shape(f), [1, 16, t]);
        }
    }

    #[test]
    fn zero_clip_is_finite_and_runs_repeat() {
        let (s, r, _) = streams(0);
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 3, 16, 32, 32]));
        let y = r.forward(&mut g, &s, x).unwrap();
        assert!(g.value(y).all_finite());
        let run = || {
            let mut g = Graph::new();
            let x = g.input(random_clip(3, 1, 16));
            let y = r.forward(&mut g, &s, x).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_small_inputs() {
        let (s, r, _) = streams(0);
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 3, 4, 32, 32]));
        assert!(matches!(r.forward(&mut g, &s, x), Err(Error::Graph { .. })));
        let x = g.input(Tensor::zeros(&[1, 3, 16, 8, 8]));
        assert!(matches!(r.forward(&mut g, &s, x), Err(Error::Graph { .. })));
    }

    #[test]
    fn seeds_give_different_visual_features() {
        // One graph per store: graphs cache parameters by id.
        let run = |seed| {
            let (s, _, v) = streams(seed);
            let mut g = Graph::new();
            let x = g.input(random_clip(5, 1, 16));
            let f = v.forward(&mut g, &s, x).unwrap();
            g.value(f).clone()
        };
        assert_ne!(run(0), run(1));
    }

    #[test]
    fn batch_independence() {
        let (s, r, v) = streams(2);
        let one = random_clip(7, 1, 16);
        let mut two = one.data().to_vec();
        two.extend_from_slice(one.data());
        let two = Tensor::new(vec![2, 3, 16, 32, 32], two).unwrap();
        let mut g = Graph::new();
        let x1 = g.input(one);
        let x2 = g.input(two);
        for (a, b) in [
            (r.forward(&mut g, &s, x1).unwrap(), r.forward(&mut g, &s, x2).unwrap()),
            (v.forward(&mut g, &s, x1).unwrap(), v.forward(&mut g, &s, x2).unwrap()),
        ] {
            let single = g.value(a).data().to_vec();
            let pair = g.value(b).data();
            assert_eq!(&pair[..single.len()], &single[..]);
            assert_eq!(&pair[single.len()..], &single[..]);
        }
    }

    #[test]
    fn parameters_are_disjoint() {
        let (mut s, r, v) = streams(4);
        let x = random_clip(8, 1, 16);
        let visual = |s: &ParamStore<f32>| {
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let f = v.forward(&mut g, s, xi).unwrap();
            g.value(f).clone()
        };
        let before = visual(&s);
        let ids: Vec<_> = s.ids().filter(|&id| s.name(id).starts_with("rhythm.")).collect();
        for id in ids {
            s.value_mut(id).data_mut().iter_mut().for_each(|w| *w = 0.0);
        }
        assert_eq!(visual(&s), before);
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let y = r.forward(&mut g, &s, xi).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pooled_path_matches() {
        let (s, r, _) = streams(6);
        let x = random_clip(9, 1, 16);
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let a = r.forward(&mut g, &s, xi).unwrap();
        let xp = g.input(pool_spatial(&x, 4).unwrap());
        let b = r.forward_pooled(&mut g, &s, xp).unwrap();
        for (p, q) in g.value(a).data().iter().zip(g.value(b).data()) {
            assert!((p - q).abs() < 1e-5);
        }
    }

    #[test]
    fn frames_scale_to_unit_range() {
        let mut v = Video::zeros(2, 2, 2, 3);
        v.frame_mut(1)[0] = 255;
        let t: Tensor<f64> = frames_to_tensor(&[&v]).unwrap();
        assert_eq!(t.shape(), [1, 3, 2, 2, 2]);
        assert_eq!(t.data()[0], -1.0);
        assert_eq!(t.data()[4], 1.0);
    }
}
