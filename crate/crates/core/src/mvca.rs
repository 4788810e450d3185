//! Multi-view fusion: noise-weighted aggregation of per-view rhythm traces,
//! cross-view attention over appearance features, a scalar gate between the
//! two paths, and the per-token projection head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::nn::{Conv1d, Linear, TransformerEncoderLayer};
use crate::diffcore::{xavier_uniform, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::signal::{standardize, TimeSeries};

pub const VIEWS: usize = 3;
pub const WEIGHT_EPS: f64 = 1e-6;

/// Per-view fusion weights in `[left, center, right]` order; on the simplex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewWeights([f64; VIEWS]);

impl ViewWeights {
    pub const UNIFORM: Self = Self([1.0 / 3.0; VIEWS]);

    pub fn as_array(&self) -> [f64; VIEWS] {
        self.0
    }

    pub fn get(&self, view: usize) -> f64 {
        self.0[view]
    }

    /// Uniform over the available views.
    pub fn uniform(available: [bool; VIEWS]) -> Result<Self> {
        flow_noise_weights_masked([0.0; VIEWS], available, WEIGHT_EPS)
    }
}

/// Inverse-noise weights `(1 / (n_v + eps))`, normalized to sum 1.
pub fn flow_noise_weights(scores: [f64; VIEWS], eps: f64) -> Result<ViewWeights> {
    flow_noise_weights_masked(scores, [true; VIEWS], eps)
}

/// As [`flow_noise_weights`] with unavailable views given weight 0.
pub fn flow_noise_weights_masked(scores: [f64; VIEWS], available: [bool; VIEWS], eps: f64) -> Result<ViewWeights> {
    if !(eps > 0.0) {
        return Err(Error::param(format!("weight epsilon {eps} must be positive")));
    }
    if scores.iter().any(|n| !(*n >= 0.0) || !n.is_finite()) {
        return Err(Error::param(format!("flow-noise scores {scores:?} must be finite and >= 0")));
    }
    if !available.contains(&true) {
        return Err(Error::param("no view available"));
    }
    let inv: Vec<f64> = scores
        .iter()
        .zip(available)
        .map(|(n, a)| if a { 1.0 / (n + eps) } else { 0.0 })
        .collect();
    let total: f64 = inv.iter().sum();
    Ok(ViewWeights([inv[0] / total, inv[1] / total, inv[2] / total]))
}

/// Initial value of the raw gate parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateInit {
    /// Raw parameter 0.5, so the initial weight on the aggregated path is
    /// `sigmoid(0.5)`.
    Raw,
    /// Raw parameter 0, an even initial blend.
    EvenBlend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MvcaConfig {
    pub tokens: usize,
    pub feat_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub gate_init: GateInit,
    pub segments: usize,
    pub weight_eps: f64,
}

impl Default for MvcaConfig {
    fn default() -> Self {
        Self {
            tokens: 4,
            feat_dim: 16,
            heads: 2,
            ff_dim: 32,
            gate_init: GateInit::Raw,
            segments: 4,
            weight_eps: WEIGHT_EPS,
        }
    }
}

fn check_views<S: Scalar>(g: &Graph<S>, x: Var, op: &'static str) -> Result<[usize; 4]> {
    match *g.shape(x) {
        [b, v, n, t] if v == VIEWS => Ok([b, v, n, t]),
        ref s => Err(Error::graph(op, format!("input {s:?} is not [B, 3, C, T]"))),
    }
}

/// `sum_v w_v S_v` for `[B, 3, N, T]` input, one weight triple per batch item.
pub fn weighted_view_sum<S: Scalar>(g: &mut Graph<S>, views: Var, weights: &[ViewWeights]) -> Result<Var> {
    let [b, v, n, t] = check_views(g, views, "aggregate")?;
    if weights.len() != b {
        return Err(Error::param(format!("{} weight triples for batch {b}", weights.len())));
    }
    let w: Vec<f64> = weights.iter().flat_map(|w| w.as_array()).collect();
    let w = g.input(Tensor::from_f64s(&[b, v, 1, 1], &w)?);
    let y = g.mul(views, w)?;
    let y = g.sum_axis(y, 1)?;
    g.reshape(y, &[b, n, t])
}

/// Weighted view sum followed by a length-preserving temporal convolution.
#[derive(Debug, Clone, Copy)]
pub struct Aggregator {
    pub conv: Conv1d,
}

impl Aggregator {
    /// Kernel 3, initialized to the identity.
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, tokens: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv1d::identity(store, &format!("{name}.conv"), tokens, 3)?,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        views: Var,
        weights: &[ViewWeights],
    ) -> Result<Var> {
        let s = weighted_view_sum(g, views, weights)?;
        self.conv.forward(g, store, s)
    }
}

/// Per-time-step attention across views, then a temporal encoder and a map to
/// rhythm tokens.
#[derive(Debug, Clone, Copy)]
pub struct CrossViewAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub encoder: TransformerEncoderLayer,
    pub out: Linear,
    pub dim: usize,
}

/// Intermediate values of [`CrossViewAttention`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionTrace {
    /// `[B, T, 3, 3]`, rows sum to one.
    pub weights: Var,
    /// `[B, T, 3, D]` attended features.
    pub attended: Var,
    /// `[B, T, D]` view mean of `attended`.
    pub pooled: Var,
}

impl CrossViewAttention {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, cfg: &MvcaConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.feat_dim;
        let mut proj = |role: &str, rng: &mut _| store.add(&format!("{name}.{role}"), xavier_uniform(rng, &[d, d], d, d));
        let wq = proj("wq", rng)?;
        let wk = proj("wk", rng)?;
        let wv = proj("wv", rng)?;
        Ok(Self {
            wq,
            wk,
            wv,
            encoder: TransformerEncoderLayer::new(store, &format!("{name}.encoder"), d, cfg.heads, cfg.ff_dim, rng)?,
            out: Linear::new(store, &format!("{name}.out"), d, cfg.tokens, true, rng)?,
            dim: d,
        })
    }

    /// `F [B, 3, D, T]` through the view attention and the view mean.
    pub fn attend<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, feats: Var) -> Result<AttentionTrace> {
        let [b, v, d, t] = check_views(g, feats, "cross_view_attention")?;
        if d != self.dim {
            return Err(Error::graph("cross_view_attention", format!("feature width {d}, expected {}", self.dim)));
        }
        // Rows of each [3, D] slice are views, so `Q = F_t W_Q` per step.
        let f = g.permute(feats, &[0, 3, 1, 2])?;
        let wq = g.param(store, self.wq);
        let wk = g.param(store, self.wk);
        let wv = g.param(store, self.wv);
        let q = g.matmul(f, wq)?;
        let k = g.matmul(f, wk)?;
        let val = g.matmul(f, wv)?;
        let kt = g.transpose_last(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
        let weights = g.softmax(logits)?;
        let attended = g.matmul(weights, val)?;
        let pooled = g.mean_axis(attended, 2)?;
        let pooled = g.reshape(pooled, &[b, t, d])?;
        debug_assert_eq!(v, VIEWS);
        Ok(AttentionTrace {
            weights,
            attended,
            pooled,
        })
    }

    /// `F [B, 3, D, T]` to `S' [B, N, T]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, feats: Var) -> Result<Var> {
        let trace = self.attend(g, store, feats)?;
        let h = self.encoder.forward(g, store, trace.pooled)?;
        let s = self.out.forward(g, store, h)?;
        g.permute(s, &[0, 2, 1])
    }
}

/// `U = sigmoid(beta) S + (1 - sigmoid(beta)) S'` with a learned scalar.
#[derive(Debug, Clone, Copy)]
pub struct GatedFusion {
    pub beta: ParamId,
}

impl GatedFusion {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, init: GateInit) -> Result<Self> {
        let raw = match init {
            GateInit::Raw => 0.5,
            GateInit::EvenBlend => 0.0,
        };
        Ok(Self {
            beta: store.add(&format!("{name}.beta"), Tensor::from_f64s(&[1], &[raw])?)?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, s: Var, s_prime: Var) -> Result<Var> {
        if g.shape(s) != g.shape(s_prime) {
            return Err(Error::graph(
                "gated_fusion",
                format!("shapes {:?} and {:?} differ", g.shape(s), g.shape(s_prime)),
            ));
        }
        let beta = g.param(store, self.beta);
        let gate = g.sigmoid(beta);
        // U = S' + gate (S - S'), a convex combination for any gate in [0, 1].
        let diff = g.sub(s, s_prime)?;
        let scaled = g.mul(diff, gate)?;
        g.add(s_prime, scaled)
    }
}

/// Per-token pointwise 1-D convolution `Y[n] = a_n U[n] + c_n`.
#[derive(Debug, Clone, Copy)]
pub struct ProjectHead {
    pub scale: ParamId,
    pub bias: ParamId,
}

impl ProjectHead {
    /// Identity initialization.
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, tokens: usize) -> Result<Self> {
        Ok(Self {
            scale: store.add(&format!("{name}.scale"), Tensor::full(&[tokens], S::one()))?,
            bias: store.add(&format!("{name}.bias"), Tensor::zeros(&[tokens]))?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, u: Var) -> Result<Var> {
        let n = store.value(self.scale).numel();
        let a = g.param(store, self.scale);
        let c = g.param(store, self.bias);
        let a = g.reshape(a, &[1, n, 1])?;
        let c = g.reshape(c, &[1, n, 1])?;
        let y = g.mul(u, a)?;
        g.add(y, c)
    }
}

/// Token mean of `[B, N, T]` before standardization, one trace per batch item.
pub fn token_mean<S: Scalar>(y: &Tensor<S>) -> Result<Vec<Vec<f64>>> {
    let [b, n, t] = match *y.shape() {
        [b, n, t] => [b, n, t],
        ref s => return Err(Error::param(format!("prediction {s:?} is not [B, N, T]"))),
    };
    let data = y.to_f64s();
    Ok((0..b)
        .map(|bi| {
            (0..t)
                .map(|ti| (0..n).map(|ni| data[(bi * n + ni) * t + ti]).sum::<f64>() / n as f64)
                .collect()
        })
        .collect())
}

/// Standardized token mean of `Y`, one series per batch item. A constant
/// prediction comes back as zeros.
pub fn predict_rppg<S: Scalar>(y: &Tensor<S>, fs: f64) -> Result<Vec<TimeSeries>> {
    token_mean(y)?
        .into_iter()
        .map(|m| TimeSeries::new(standardize(&m).0, fs))
        .collect()
}

/// Segment length for `t` frames split into `k` segments; the tail past
/// `k * len` is dropped.
pub fn segment_len(t: usize, k: usize) -> Result<usize> {
    if k == 0 || k > t {
        return Err(Error::param(format!("cannot cut {t} frames into {k} segments")));
    }
    Ok(t / k)
}

/// Plain-value loss triplets: row `i` of each field is one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentTriplets {
    pub len: usize,
    pub f: Vec<Vec<f64>>,
    pub f_prime: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
}

impl SegmentTriplets {
    pub fn len(&self) -> usize {
        self.f.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f.is_empty()
    }
}

/// Cut every token trace of `S` and `S'` (`[B, N, T]`) into `k` aligned
/// segments, paired with the same frame range of each item's ground truth.
/// Ordering is batch, then token, then segment.
pub fn segment_sampling<S: Scalar>(
    s: &Tensor<S>,
    s_prime: &Tensor<S>,
    gt: &[&[f64]],
    k: usize,
) -> Result<SegmentTriplets> {
    let [b, n, t] = match *s.shape() {
        [b, n, t] => [b, n, t],
        ref sh => return Err(Error::param(format!("trace block {sh:?} is not [B, N, T]"))),
    };
    if s_prime.shape() != s.shape() {
        return Err(Error::param(format!("S {:?} and S' {:?} differ", s.shape(), s_prime.shape())));
    }
    if gt.len() != b || gt.iter().any(|g| g.len() < t) {
        return Err(Error::param("ground truth does not cover every batch item"));
    }
    let len = segment_len(t, k)?;
    let (sd, pd) = (s.to_f64s(), s_prime.to_f64s());
    let mut out = SegmentTriplets {
        len,
        f: Vec::new(),
        f_prime: Vec::new(),
        g: Vec::new(),
    };
    for bi in 0..b {
        for ni in 0..n {
            let base = (bi * n + ni) * t;
            for ki in 0..k {
                let r = ki * len..(ki + 1) * len;
                out.f.push(sd[base + r.start..base + r.end].to_vec());
                out.f_prime.push(pd[base + r.start..base + r.end].to_vec());
                out.g.push(gt[bi][r].to_vec());
            }
        }
    }
    Ok(out)
}

/// Graph form of the segment cut: `[B, N, T]` to `[B * N * K, L]`, same row
/// order as [`segment_sampling`].
pub fn segment_rows<S: Scalar>(g: &mut Graph<S>, x: Var, k: usize) -> Result<Var> {
    let [b, n, t] = match *g.shape(x) {
        [b, n, t] => [b, n, t],
        ref s => return Err(Error::graph("segments", format!("input {s:?} is not [B, N, T]"))),
    };
    let len = segment_len(t, k)?;
    let x = if len * k == t { x } else { g.narrow(x, 2, 0, len * k)? };
    g.reshape(x, &[b * n * k, len])
}

/// Ground-truth rows matching [`segment_rows`] for `tokens` traces per item.
pub fn segment_targets<S: Scalar>(gt: &[&[f64]], tokens: usize, t: usize, k: usize) -> Result<Tensor<S>> {
    let len = segment_len(t, k)?;
    if gt.iter().any(|g| g.len() < t) {
        return Err(Error::param(format!("ground truth shorter than {t} frames")));
    }
    let mut data = Vec::with_capacity(gt.len() * tokens * k * len);
    for g in gt {
        for _ in 0..tokens {
            data.extend_from_slice(&g[..k * len]);
        }
    }
    Tensor::from_f64s(&[gt.len() * tokens * k, len], &data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, GradCheckConfig};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn weights_examples() {
        let w = flow_noise_weights([1.0, 1.0, 1.0], WEIGHT_EPS).unwrap();
        assert!(close(&w.as_array(), &[1.0 / 3.0; 3], 1e-12));
        let w = flow_noise_weights([1.0, 2.0, 4.0], 1e-12).unwrap();
        assert!(close(&w.as_array(), &[4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0], 1e-6));
        let w = flow_noise_weights([0.0, 5.0, 5.0], 1e-9).unwrap();
        assert!(w.get(0) > 1.0 - 1e-8);
        let w = flow_noise_weights_masked([1.0, 2.0, 4.0], [false, true, true], 1e-12).unwrap();
        assert_eq!(w.get(0), 0.0);
        assert!(close(&w.as_array()[1..], &[2.0 / 3.0, 1.0 / 3.0], 1e-9));
        assert!(flow_noise_weights([-1.0, 0.0, 0.0], WEIGHT_EPS).is_err());
        assert!(flow_noise_weights_masked([0.0; 3], [false; 3], WEIGHT_EPS).is_err());
    }

    proptest! {
        #[test]
        fn weights_on_simplex_and_antitone(
            n in prop::array::uniform3(0.0f64..100.0),
            bump in 1e-3f64..50.0,
            view in 0usize..3,
        ) {
            let w = flow_noise_weights(n, WEIGHT_EPS).unwrap().as_array();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            let mut m = n;
            m[view] += bump;
            let w2 = flow_noise_weights(m, WEIGHT_EPS).unwrap().as_array();
            prop_assert!(w2[view] <= w[view]);
        }
    }

    fn views_of(rng: &mut impl Rng, b: usize, n: usize, t: usize) -> Tensor<f64> {
        random(rng, &[b, VIEWS, n, t])
    }

    #[test]
    fn aggregation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let one = random(&mut rng, &[1, 1, 4, 10]);
        let mut same = Vec::new();
        for _ in 0..3 {
            same.extend_from_slice(one.data());
        }
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(vec![1, 3, 4, 10], same).unwrap());
        let w = flow_noise_weights([0.3, 1.0, 7.0], WEIGHT_EPS).unwrap();
        let s = weighted_view_sum(&mut g, x, &[w]).unwrap();
        assert!(close(g.value(s).data(), one.data(), 1e-12));

        let x = views_of(&mut rng, 1, 4, 10);
        let mut g = Graph::<f64>::new();
        let xv = g.input(x.clone());
        let s = weighted_view_sum(&mut g, xv, &[ViewWeights([1.0, 0.0, 0.0])]).unwrap();
        assert_eq!(g.value(s).data(), &x.data()[..40]);

        let mut store = ParamStore::new();
        let agg = Aggregator::new(&mut store, "agg", 4).unwrap();
        let s = weighted_view_sum(&mut g, xv, &[w]).unwrap();
        let a = agg.forward(&mut g, &store, xv, &[w]).unwrap();
        assert_eq!(g.shape(a), [1, 4, 10]);
        assert!(close(g.value(a).data(), g.value(s).data(), 1e-12));
    }

    #[test]
    fn aggregation_rejects_bad_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[1, 2, 4, 10]));
        assert!(weighted_view_sum(&mut g, x, &[ViewWeights::UNIFORM]).is_err());
        let x = g.input(Tensor::zeros(&[2, 3, 4, 10]));
        assert!(weighted_view_sum(&mut g, x, &[ViewWeights::UNIFORM]).is_err());
    }

    fn attention(seed: u64, d: usize) -> (ParamStore<f64>, CrossViewAttention) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = MvcaConfig {
            feat_dim: d,
            ff_dim: 2 * d,
            ..MvcaConfig::default()
        };
        let a = CrossViewAttention::new(&mut store, "cva", &cfg, &mut rng).unwrap();
        (store, a)
    }

    #[test]
    fn uniform_attention_over_identical_views() {
        let (mut store, a) = attention(0, 4);
        *store.value_mut(a.wq) = Tensor::zeros(&[4, 4]);
        *store.value_mut(a.wk) = Tensor::zeros(&[4, 4]);
        let mut eye = Tensor::zeros(&[4, 4]);
        (0..4).for_each(|i| eye.data_mut()[i * 5] = 1.0);
        *store.value_mut(a.wv) = eye;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let one = random(&mut rng, &[1, 1, 4, 6]);
        let data: Vec<f64> = (0..3).flat_map(|_| one.data().to_vec()).collect();
        let mut g = Graph::new();
        let f = g.input(Tensor::new(vec![1, 3, 4, 6], data).unwrap());
        let tr = a.attend(&mut g, &store, f).unwrap();
        assert!(g.value(tr.weights).data().iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-12));
        // Every attended row equals the shared feature vector at that step.
        let att = g.value(tr.attended).data();
        for t in 0..6 {
            for v in 0..3 {
                for d in 0..4 {
                    assert!((att[(t * 3 + v) * 4 + d] - one.data()[d * 6 + t]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_output_shape() {
        let (store, a) = attention(1, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let f = g.input(random(&mut rng, &[2, 3, 8, 12]));
        let tr = a.attend(&mut g, &store, f).unwrap();
        for row in g.value(tr.weights).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let s = a.forward(&mut g, &store, f).unwrap();
        assert_eq!(g.shape(s), [2, 4, 12]);
        assert!(g.value(s).all_finite());
    }

    #[test]
    fn large_logits_stay_finite_and_nan_errors() {
        let (mut store, a) = attention(2, 4);
        let mut eye = Tensor::zeros(&[4, 4]);
        (0..4).for_each(|i| eye.data_mut()[i * 5] = 1.0);
        *store.value_mut(a.wq) = eye.clone();
        *store.value_mut(a.wk) = eye;
        let mut g = Graph::new();
        // Logits reach |q.k| / 2 = 50.
        let f = g.input(Tensor::full(&[1, 3, 4, 2], 5.0));
        let tr = a.attend(&mut g, &store, f).unwrap();
        assert!(g.value(tr.weights).all_finite());
        let f = g.input(Tensor::full(&[1, 3, 4, 2], f64::NAN));
        assert!(matches!(a.attend(&mut g, &store, f), Err(Error::NonFinite(_))));
    }

    #[test]
    fn side_view_swap_leaves_pooled_features() {
        let (mut store, a) = attention(5, 4);
        let wq = store.value(a.wq).clone();
        *store.value_mut(a.wk) = wq;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, &[1, 3, 4, 7]);
        let plane = 4 * 7;
        let mut swapped = x.data().to_vec();
        swapped[..plane].copy_from_slice(&x.data()[2 * plane..]);
        swapped[2 * plane..].copy_from_slice(&x.data()[..plane]);
        let mut g = Graph::new();
        let f1 = g.input(x);
        let f2 = g.input(Tensor::new(vec![1, 3, 4, 7], swapped).unwrap());
        let p1 = a.attend(&mut g, &store, f1).unwrap().pooled;
        let p2 = a.attend(&mut g, &store, f2).unwrap().pooled;
        assert!(close(g.value(p1).data(), g.value(p2).data(), 1e-12));
    }

    #[test]
    fn gate_examples() {
        let mut store = ParamStore::<f64>::new();
        let gate = GatedFusion::new(&mut store, "gate", GateInit::Raw).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (s, sp) = (random(&mut rng, &[1, 4, 9]), random(&mut rng, &[1, 4, 9]));
        let run = |store: &ParamStore<f64>| {
            let mut g = Graph::new();
            let (a, b) = (g.input(s.clone()), g.input(sp.clone()));
            let u = gate.forward(&mut g, store, a, b).unwrap();
            g.value(u).data().to_vec()
        };
        let blend = 1.0 / (1.0 + (-0.5f64).exp());
        assert!((blend - 0.62246).abs() < 1e-5);
        let u = run(&store);
        for ((u, a), b) in u.iter().zip(s.data()).zip(sp.data()) {
            assert!((u - (blend * a + (1.0 - blend) * b)).abs() < 1e-12);
            assert!(*u >= a.min(*b) - 1e-12 && *u <= a.max(*b) + 1e-12);
        }
        store.value_mut(gate.beta).data_mut()[0] = 20.0;
        assert!(close(&run(&store), s.data(), 1e-6));
        store.value_mut(gate.beta).data_mut()[0] = 0.0;
        let half: Vec<f64> = s.data().iter().zip(sp.data()).map(|(a, b)| (a + b) / 2.0).collect();
        assert!(close(&run(&store), &half, 1e-12));
        let even = GatedFusion::new(&mut store, "even", GateInit::EvenBlend).unwrap();
        assert_eq!(store.value(even.beta).data(), [0.0]);
    }

    proptest! {
        #[test]
        fn gate_is_convex(beta in -30.0f64..30.0, s in prop::collection::vec(-5.0f64..5.0, 8), sp in prop::collection::vec(-5.0f64..5.0, 8)) {
            let mut store = ParamStore::<f64>::new();
            let gate = GatedFusion::new(&mut store, "gate", GateInit::Raw).unwrap();
            store.value_mut(gate.beta).data_mut()[0] = beta;
            let mut g = Graph::new();
            let a = g.input(Tensor::new(vec![1, 2, 4], s.clone()).unwrap());
            let b = g.input(Tensor::new(vec![1, 2, 4], sp.clone()).unwrap());
            let u = gate.forward(&mut g, &store, a, b).unwrap();
            for ((u, a), b) in g.value(u).data().iter().zip(&s).zip(&sp) {
                prop_assert!(*u >= a.min(*b) - 1e-12 && *u <= a.max(*b) + 1e-12);
            }
        }
    }

    #[test]
    fn head_and_readout() {
        let mut store = ParamStore::<f64>::new();
        let head = ProjectHead::new(&mut store, "head", 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = random(&mut rng, &[2, 4, 10]);
        let mut g = Graph::new();
        let ui = g.input(u.clone());
        let y = head.forward(&mut g, &store, ui).unwrap();
        assert_eq!(g.value(y), &u);

        let x: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).sin() + 3.0).collect();
        let y = Tensor::new(vec![1, 4, 10], (0..4).flat_map(|_| x.clone()).collect()).unwrap();
        let p = predict_rppg(&y, 30.0).unwrap();
        assert!(close(p[0].samples(), &standardize(&x).0, 1e-12));

        let (y1, y2) = (random(&mut rng, &[1, 4, 10]), random(&mut rng, &[1, 4, 10]));
        let combo = Tensor::new(
            vec![1, 4, 10],
            y1.data().iter().zip(y2.data()).map(|(a, b)| 2.0 * a - 0.5 * b).collect(),
        )
        .unwrap();
        let (m1, m2, mc) = (token_mean(&y1).unwrap(), token_mean(&y2).unwrap(), token_mean(&combo).unwrap());
        let expect: Vec<f64> = m1[0].iter().zip(&m2[0]).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        assert!(close(&mc[0], &expect, 1e-12));
    }

    #[test]
    fn segment_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = random(&mut rng, &[1, 4, 300]);
        let sp = random(&mut rng, &[1, 4, 300]);
        let gt: Vec<f64> = (0..300).map(|i| i as f64).collect();
        let tr = segment_sampling(&s, &sp, &[&gt], 2).unwrap();
        assert_eq!((tr.len(), tr.len), (8, 150));
        assert_eq!(tr.g[1], gt[150..]);
        let tr = segment_sampling(&s, &sp, &[&gt], 1).unwrap();
        assert_eq!((tr.len(), tr.len), (4, 300));
        assert!(segment_sampling(&s, &sp, &[&gt], 301).is_err());

        // Tokens reassemble from their segments up to the dropped tail.
        let tr = segment_sampling(&s, &sp, &[&gt], 7).unwrap();
        assert_eq!(tr.len, 42);
        for n in 0..4 {
            let joined: Vec<f64> = tr.f[n * 7..(n + 1) * 7].concat();
            assert_eq!(joined, s.data()[n * 300..n * 300 + 294]);
        }
    }

    #[test]
    fn graph_segments_match_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = random(&mut rng, &[2, 4, 30]);
        let gt: Vec<Vec<f64>> = (0..2).map(|_| (0..30).map(|_| rng.gen()).collect()).collect();
        let gts: Vec<&[f64]> = gt.iter().map(|g| g.as_slice()).collect();
        let plain = segment_sampling(&s, &s, &gts, 4).unwrap();
        let mut g = Graph::new();
        let x = g.input(s.clone());
        let rows = segment_rows(&mut g, x, 4).unwrap();
        assert_eq!(g.shape(rows), [32, 7]);
        assert_eq!(g.value(rows).data(), plain.f.concat());
        let targets: Tensor<f64> = segment_targets(&gts, 4, 30, 4).unwrap();
        assert_eq!(targets.data(), plain.g.concat());
    }

    #[test]
    fn attention_and_gate_gradients() {
        let (mut store, a) = attention(11, 8);
        let gate = GatedFusion::new(&mut store, "gate", GateInit::Raw).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f = random(&mut rng, &[1, 3, 8, 32]);
        let s = random(&mut rng, &[1, 4, 32]);
        let probe = random(&mut rng, &[1, 4, 32]);
        let report = grad_check(&mut store, &GradCheckConfig::default(), |g, st| {
            let fi = g.input(f.clone());
            let si = g.input(s.clone());
            let sp = a.forward(g, st, fi)?;
            let u = gate.forward(g, st, si, sp)?;
            let p = g.input(probe.clone());
            let y = g.mul(u, p)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }
}
