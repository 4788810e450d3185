//! Parameterised layers over [`Graph`].

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{xavier_uniform, ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

/// `y = x W + b` over the last axis; `W` is stored `[in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add(&format!("{name}.w"), xavier_uniform(rng, &[d_in, d_out], d_in, d_out))?;
        let b = if bias {
            Some(store.add(&format!("{name}.b"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3d {
    /// Kernel `k`, padding `k / 2` on every axis.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: [usize; 3],
        stride: [usize; 3],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let taps = k[0] * k[1] * k[2];
        let w = store.add(
            &format!("{name}.w"),
            xavier_uniform(rng, &[c_out, c_in, k[0], k[1], k[2]], c_in * taps, c_out * taps),
        )?;
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[c_out]))?;
        Ok(Self {
            w,
            b,
            stride,
            pad: [k[0] / 2, k[1] / 2, k[2] / 2],
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.conv3d(x, w, self.stride, self.pad)?;
        let b = g.param(store, self.b);
        let c = g.shape(b)[0];
        let b = g.reshape(b, &[1, c, 1, 1, 1])?;
        g.add(y, b)
    }
}

/// 1-D convolution over time, `[B, C, T]`, padding `k / 2`.
#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add(&format!("{name}.w"), xavier_uniform(rng, &[c_out, c_in, k], c_in * k, c_out * k))?;
        let b = Some(store.add(&format!("{name}.b"), Tensor::zeros(&[c_out]))?);
        Ok(Self { w, b, stride, pad })
    }

    /// Centre tap 1 on the channel diagonal, zero elsewhere, no bias; the
    /// output equals the input.
    pub fn identity<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize, k: usize) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::param("identity convolution needs an odd kernel"));
        }
        let mut w = Tensor::zeros(&[channels, channels, k]);
        for c in 0..channels {
            w.data_mut()[(c * channels + c) * k + k / 2] = S::one();
        }
        let w = store.add(&format!("{name}.w"), w)?;
        Ok(Self {
            w,
            b: None,
            stride: 1,
            pad: k / 2,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.conv1d(x, w, self.stride, self.pad)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                let c = g.shape(b)[0];
                let b = g.reshape(b, &[1, c, 1])?;
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Per-sample normalisation over all non-batch axes with per-channel affine.
#[derive(Debug, Clone, Copy)]
pub struct SampleNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl SampleNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[channels], S::one()))?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[channels]))?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let (ga, be) = (g.param(store, self.gamma), g.param(store, self.beta));
        g.sample_norm(x, ga, be, NORM_EPS)
    }
}

/// Layer normalisation over the last axis with affine parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[dim], S::one()))?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let y = g.layer_norm(x, NORM_EPS)?;
        let ga = g.param(store, self.gamma);
        let be = g.param(store, self.beta);
        let y = g.mul(y, ga)?;
        g.add(y, be)
    }
}

/// Multi-head self-attention over axis 1 of `[B, L, D]`.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadSelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadSelfAttention {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::param(format!("{heads} heads do not divide width {dim}")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng)?,
            heads,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::graph("self_attention", format!("input {s:?} is not [B, L, D]")));
        }
        let (b, l, d) = (s[0], s[1], s[2]);
        let (h, dh) = (self.heads, d / self.heads);
        let split = |lin: &Linear, g: &mut Graph<S>| -> Result<Var> {
            let y = lin.forward(g, store, x)?;
            let y = g.reshape(y, &[b, l, h, dh])?;
            g.permute(y, &[0, 2, 1, 3])
        };
        let q = split(&self.q, g)?;
        let k = split(&self.k, g)?;
        let v = split(&self.v, g)?;
        let kt = g.transpose_last(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scores)?;
        let ctx = g.matmul(attn, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, l, d])?;
        self.o.forward(g, store, ctx)
    }
}

/// Post-norm transformer encoder layer with a ReLU feed-forward block.
#[derive(Debug, Clone, Copy)]
pub struct TransformerEncoderLayer {
    pub attn: MultiHeadSelfAttention,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}

impl TransformerEncoderLayer {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadSelfAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, ff_dim, true, rng)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), ff_dim, dim, true, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
        })
    }

    /// `[B, L, D] -> [B, L, D]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let a = self.attn.forward(g, store, x)?;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, store, x)?;
        let f = self.ff1.forward(g, store, x)?;
        let f = g.relu(f);
        let f = self.ff2.forward(g, store, f)?;
        let x = g.add(x, f)?;
        self.norm2.forward(g, store, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_linear_passes_input() {
        let mut s = ParamStore::<f64>::new();
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        let lin = Linear {
            w: s.add("w", eye).unwrap(),
            b: Some(s.add("b", Tensor::zeros(&[3])).unwrap()),
        };
        let mut g = Graph::new();
        let x = g.input(Tensor::from_f64s(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let y = lin.forward(&mut g, &s, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn identity_conv1d_passes_input() {
        let mut s = ParamStore::<f64>::new();
        let c = Conv1d::identity(&mut s, "c", 2, 3).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::from_f64s(&[1, 2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0]).unwrap());
        let y = c.forward(&mut g, &s, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn softmax_rows_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::<f64>::new();
        let vals: Vec<f64> = (0..40).map(|_| rng.gen_range(-1e3..1e3)).collect();
        let x = g.input(Tensor::from_f64s(&[5, 8], &vals).unwrap());
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let ln = g.layer_norm(x, NORM_EPS).unwrap();
        assert!(g.value(ln).all_finite());
        let z = g.input(Tensor::zeros(&[2, 4]));
        let lz = g.layer_norm(z, NORM_EPS).unwrap();
        assert!(g.value(lz).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64s(&[2], &[f64::NAN, 0.0]).unwrap());
        assert!(matches!(g.softmax(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn shape_errors_name_the_operator() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[4]));
        match g.add(a, b) {
            Err(Error::Graph { op, .. }) => assert_eq!(op, "add"),
            other => panic!("{other:?}"),
        }
        match g.matmul(a, a) {
            Err(Error::Graph { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn conv3d_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs = [1, 2, 4, 5, 3];
        let ws = [3, 2, 3, 2, 3];
        let xv: Vec<f64> = (0..xs.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wv: Vec<f64> = (0..ws.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (stride, pad) = ([2, 1, 1], [1, 0, 1]);
        let mut g = Graph::new();
        let x = g.input(Tensor::from_f64s(&xs, &xv).unwrap());
        let w = g.input(Tensor::from_f64s(&ws, &wv).unwrap());
        let y = g.conv3d(x, w, stride, pad).unwrap();
        let os = g.shape(y).to_vec();
        assert_eq!(os, vec![1, 3, 2, 4, 3]);
        let xi = |c: usize, t: i64, h: i64, w: i64| -> f64 {
            if t < 0 || h < 0 || w < 0 || t >= 4 || h >= 5 || w >= 3 {
                0.0
            } else {
                xv[((c * 4 + t as usize) * 5 + h as usize) * 3 + w as usize]
            }
        };
        let out: &[f64] = g.value(y).data();
        let mut k = 0;
        for o in 0..3 {
            for t in 0..2 {
                for h in 0..4 {
                    for w in 0..3 {
                        let mut acc = 0.0;
                        for c in 0..2 {
                            for a in 0..3 {
                                for b in 0..2 {
                                    for e in 0..3 {
                                        let wt = wv[(((o * 2 + c) * 3 + a) * 2 + b) * 3 + e];
                                        acc += wt
                                            * xi(c, (t * 2 + a) as i64 - 1, (h + b) as i64, (w + e) as i64 - 1);
                                    }
                                }
                            }
                        }
                        assert!((out[k] - acc).abs() < 1e-12);
                        k += 1;
                    }
                }
            }
        }
    }
}
