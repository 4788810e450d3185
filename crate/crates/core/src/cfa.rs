//! Training objective: segment Pearson loss, in-band spectral consistency and
//! a least-squares adversarial term from a 1-D patch discriminator.
//!
//! Each loss has a plain-value form over [`SegmentTriplets`] and a graph form
//! over `[rows, L]` segment matrices; the two agree to rounding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{xavier_uniform, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::mvca::SegmentTriplets;
use crate::signal::{standardize, HR_BAND_HI, HR_BAND_LO};

pub const PEARSON_EPS: f64 = 1e-8;
/// Variance floor added before the square root when standardizing segments.
const STD_EPS: f64 = 1e-8;
/// Per-bin floor that turns an all-zero spectrum into a uniform one.
const SPECTRUM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_psd: f64,
    pub lambda_g: f64,
    pub pearson_eps: f64,
    /// DFT length for the spectral term; `None` uses the segment length.
    pub psd_nfft: Option<usize>,
    pub use_pearson: bool,
    pub use_psd: bool,
    pub use_adversarial: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_psd: 1.0,
            lambda_g: 0.1,
            pearson_eps: PEARSON_EPS,
            psd_nfft: None,
            use_pearson: true,
            use_psd: true,
            use_adversarial: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_pearson: f64,
    pub l_psd: f64,
    pub l_g: f64,
    pub l_d: f64,
    pub l_total: f64,
    pub lambda_psd: f64,
    pub lambda_g: f64,
}

/// `l_total = l_pearson + lambda_psd * l_psd + lambda_g * l_g`; `l_d` is
/// carried along for logging.
pub fn total_loss(l_pearson: f64, l_psd: f64, l_g: f64, l_d: f64, lambda_psd: f64, lambda_g: f64) -> LossBundle {
    LossBundle {
        l_pearson,
        l_psd,
        l_g,
        l_d,
        l_total: l_pearson + lambda_psd * l_psd + lambda_g * l_g,
        lambda_psd,
        lambda_g,
    }
}

/// Pearson loss value and the number of skipped zero-variance terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PearsonLoss {
    pub value: f64,
    pub degenerate: usize,
}

fn correlation(f: &[f64], g: &[f64], eps: f64) -> Option<f64> {
    let n = f.len() as f64;
    let (mf, mg) = (f.iter().sum::<f64>() / n, g.iter().sum::<f64>() / n);
    let (mut cov, mut vf, mut vg) = (0.0, 0.0, 0.0);
    for (a, b) in f.iter().zip(g) {
        cov += (a - mf) * (b - mg);
        vf += (a - mf) * (a - mf);
        vg += (b - mg) * (b - mg);
    }
    (vf > 0.0 && vg > 0.0).then(|| (cov / n) / (((vf / n) * (vg / n)).sqrt() + eps))
}

/// `-(1 / 2n) sum_i [r(f_i, g_i) + r(f'_i, g_i)]`.
pub fn pearson_loss(tr: &SegmentTriplets, eps: f64) -> Result<PearsonLoss> {
    if tr.is_empty() || tr.len < 2 {
        return Err(Error::param("pearson loss needs at least one segment of length >= 2"));
    }
    let mut sum = 0.0;
    let mut degenerate = 0;
    for i in 0..tr.len() {
        for f in [&tr.f[i], &tr.f_prime[i]] {
            match correlation(f, &tr.g[i], eps) {
                Some(r) => sum += r,
                None => degenerate += 1,
            }
        }
    }
    Ok(PearsonLoss {
        value: -sum / (2 * tr.len()) as f64,
        degenerate,
    })
}

/// Graph form of one Pearson branch: `sum_i r(f_i, g_i)` over the rows of
/// `f [n, L]` against constant targets. Rows with zero variance on either side
/// contribute 0 and are counted.
pub fn pearson_sum<S: Scalar>(g: &mut Graph<S>, f: Var, target: &Tensor<S>, eps: f64) -> Result<(Var, usize)> {
    let fs = g.shape(f).to_vec();
    if fs.len() != 2 || target.shape() != fs.as_slice() || fs[1] < 2 {
        return Err(Error::graph("pearson", format!("segments {fs:?} and targets {:?}", target.shape())));
    }
    let (n, l) = (fs[0], fs[1]);
    let gt = target.to_f64s();
    let fv = g.value(f).to_f64s();
    let mut gc = vec![0.0; n * l];
    let mut var_g = vec![0.0; n];
    let mut valid = vec![0.0; n];
    for i in 0..n {
        let row = &gt[i * l..(i + 1) * l];
        let m = row.iter().sum::<f64>() / l as f64;
        for j in 0..l {
            gc[i * l + j] = row[j] - m;
        }
        var_g[i] = gc[i * l..(i + 1) * l].iter().map(|v| v * v).sum::<f64>() / l as f64;
        let frow = &fv[i * l..(i + 1) * l];
        let mf = frow.iter().sum::<f64>() / l as f64;
        let var_f = frow.iter().map(|v| (v - mf) * (v - mf)).sum::<f64>();
        valid[i] = if var_g[i] > 0.0 && var_f > 0.0 { 1.0 } else { 0.0 };
    }
    let degenerate = valid.iter().filter(|&&v| v == 0.0).count();
    let mean = g.mean_axis(f, 1)?;
    let fc = g.sub(f, mean)?;
    let gcv = g.input(Tensor::from_f64s(&[n, l], &gc)?);
    let prod = g.mul(fc, gcv)?;
    let cov = g.mean_axis(prod, 1)?;
    let sq = g.square(fc);
    let var_f = g.mean_axis(sq, 1)?;
    // Degenerate rows get variance 1 so the square root stays differentiable;
    // their term is masked out below.
    let shift: Vec<f64> = valid.iter().map(|v| 1.0 - v).collect();
    let shift = g.input(Tensor::from_f64s(&[n, 1], &shift)?);
    let var_f = g.add(var_f, shift)?;
    let vg = g.input(Tensor::from_f64s(&[n, 1], &var_g)?);
    let denom = g.mul(var_f, vg)?;
    let denom = g.sqrt(denom);
    let denom = g.add_scalar(denom, eps);
    let r = g.div(cov, denom)?;
    let mask = g.input(Tensor::from_f64s(&[n, 1], &valid)?);
    let r = g.mul(r, mask)?;
    Ok((g.sum(r), degenerate))
}

/// Graph Pearson loss over both branches, with the degenerate count.
pub fn pearson_loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    f: Var,
    f_prime: Var,
    target: &Tensor<S>,
    eps: f64,
) -> Result<(Var, usize)> {
    let n = target.shape()[0];
    let (a, da) = pearson_sum(g, f, target, eps)?;
    let (b, db) = pearson_sum(g, f_prime, target, eps)?;
    let s = g.add(a, b)?;
    Ok((g.scale(s, -1.0 / (2 * n) as f64), da + db))
}

/// In-band real-DFT bases for segments of length `len`: `cos` and `sin`
/// matrices of shape `[len, bins]` over bins with frequency in [0.7, 4.0] Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    pub len: usize,
    pub nfft: usize,
    pub fs: f64,
    pub freqs: Vec<f64>,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl SpectralBasis {
    pub fn new(len: usize, fs: f64, nfft: Option<usize>) -> Result<Self> {
        if len < 32 {
            return Err(Error::param(format!("spectral segments need length >= 32, got {len}")));
        }
        let nfft = nfft.unwrap_or(len);
        if nfft < len || !(fs > 0.0) {
            return Err(Error::param(format!("nfft {nfft} below segment length {len} or bad rate {fs}")));
        }
        let bins: Vec<usize> = (0..=nfft / 2)
            .filter(|&k| (HR_BAND_LO..=HR_BAND_HI).contains(&(k as f64 * fs / nfft as f64)))
            .collect();
        if bins.is_empty() {
            return Err(Error::param(format!("no DFT bin of length {nfft} at {fs} Hz falls in the band")));
        }
        let nb = bins.len();
        let mut cos = vec![0.0; len * nb];
        let mut sin = vec![0.0; len * nb];
        for t in 0..len {
            for (j, &k) in bins.iter().enumerate() {
                // Reduce k * t modulo nfft first so the phase stays exact.
                let ph = 2.0 * std::f64::consts::PI * ((k * t) % nfft) as f64 / nfft as f64;
                cos[t * nb + j] = ph.cos();
                sin[t * nb + j] = ph.sin();
            }
        }
        Ok(Self {
            len,
            nfft,
            fs,
            freqs: bins.iter().map(|&k| k as f64 * fs / nfft as f64).collect(),
            cos,
            sin,
        })
    }

    pub fn bins(&self) -> usize {
        self.freqs.len()
    }

    /// Unit-sum in-band power of a standardized segment, and whether the
    /// segment was constant (the result is then uniform).
    pub fn distribution(&self, x: &[f64]) -> Result<(Vec<f64>, bool)> {
        if x.len() != self.len {
            return Err(Error::param(format!("segment length {} != basis length {}", x.len(), self.len)));
        }
        let (z, degenerate) = standardize(x);
        let nb = self.bins();
        let mut p = vec![0.0; nb];
        for (j, pj) in p.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in z.iter().enumerate() {
                re += v * self.cos[t * nb + j];
                im += v * self.sin[t * nb + j];
            }
            *pj = re * re + im * im + SPECTRUM_FLOOR;
        }
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        Ok((p, degenerate))
    }

    /// Graph form over the rows of `x [n, L]`: `[n, bins]` distributions.
    pub fn distribution_graph<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 2 || xs[1] != self.len {
            return Err(Error::graph("psd", format!("segments {xs:?} do not match basis length {}", self.len)));
        }
        let nb = self.bins();
        let mean = g.mean_axis(x, 1)?;
        let xc = g.sub(x, mean)?;
        let sq = g.square(xc);
        let var = g.mean_axis(sq, 1)?;
        let var = g.add_scalar(var, STD_EPS);
        let sd = g.sqrt(var);
        let z = g.div(xc, sd)?;
        let c = g.input(Tensor::from_f64s(&[self.len, nb], &self.cos)?);
        let s = g.input(Tensor::from_f64s(&[self.len, nb], &self.sin)?);
        let re = g.matmul(z, c)?;
        let im = g.matmul(z, s)?;
        let re2 = g.square(re);
        let im2 = g.square(im);
        let p = g.add(re2, im2)?;
        let p = g.add_scalar(p, SPECTRUM_FLOOR);
        let total = g.sum_axis(p, 1)?;
        g.div(p, total)
    }
}

/// Spectral triplets `(p_i, p'_i, s_i)` for every segment triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralTriplets {
    pub freqs: Vec<f64>,
    pub p: Vec<Vec<f64>>,
    pub p_prime: Vec<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
    /// Constant segments among all `3n` inputs.
    pub degenerate: usize,
}

pub fn psd_triplets(tr: &SegmentTriplets, fs: f64, nfft: Option<usize>) -> Result<SpectralTriplets> {
    let basis = SpectralBasis::new(tr.len, fs, nfft)?;
    let mut out = SpectralTriplets {
        freqs: basis.freqs.clone(),
        p: Vec::new(),
        p_prime: Vec::new(),
        s: Vec::new(),
        degenerate: 0,
    };
    for i in 0..tr.len() {
        for (src, dst) in [(&tr.f[i], &mut out.p), (&tr.f_prime[i], &mut out.p_prime), (&tr.g[i], &mut out.s)] {
            let (d, deg) = basis.distribution(src)?;
            dst.push(d);
            out.degenerate += deg as usize;
        }
    }
    Ok(out)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `(1 / 2n) sum_i (|p_i - s_i|^2 + |p'_i - s_i|^2)`.
pub fn psd_loss(sp: &SpectralTriplets) -> Result<f64> {
    let n = sp.p.len();
    if n == 0 || sp.p_prime.len() != n || sp.s.len() != n {
        return Err(Error::param("spectral triplets are empty or ragged"));
    }
    if (0..n).any(|i| sp.p[i].len() != sp.s[i].len() || sp.p_prime[i].len() != sp.s[i].len()) {
        return Err(Error::param("spectral triplets use different bin grids"));
    }
    let total: f64 = (0..n).map(|i| sq_dist(&sp.p[i], &sp.s[i]) + sq_dist(&sp.p_prime[i], &sp.s[i])).sum();
    Ok(total / (2 * n) as f64)
}

/// Graph spectral loss for `f`, `f'` rows against constant target rows.
pub fn psd_loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    basis: &SpectralBasis,
    f: Var,
    f_prime: Var,
    target: &Tensor<S>,
) -> Result<Var> {
    let n = target.shape()[0];
    let t = target.to_f64s();
    let l = basis.len;
    let mut s = Vec::with_capacity(n * basis.bins());
    for i in 0..n {
        s.extend(basis.distribution(&t[i * l..(i + 1) * l])?.0);
    }
    let s = g.input(Tensor::from_f64s(&[n, basis.bins()], &s)?);
    let mut total = None;
    for x in [f, f_prime] {
        let p = basis.distribution_graph(g, x)?;
        let d = g.sub(p, s)?;
        let d = g.square(d);
        let d = g.sum(d);
        total = Some(match total {
            Some(acc) => g.add(acc, d)?,
            None => d,
        });
    }
    let total = total.expect("two branches");
    Ok(g.scale(total, 1.0 / (2 * n) as f64))
}

pub const DISC_SLOPE: f64 = 0.2;

/// Three stride-2, kernel-4 1-D convolutions (1 -> 16 -> 32 -> 1 channels)
/// with leaky rectifiers, scoring overlapping patches of a segment.
#[derive(Debug, Clone, Copy)]
pub struct Discriminator {
    layers: [(ParamId, ParamId); 3],
}

const DISC_WIDTHS: [usize; 4] = [1, 16, 32, 1];
const DISC_KERNEL: usize = 4;

impl Discriminator {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, rng: &mut impl Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(3);
        for i in 0..3 {
            let (ci, co) = (DISC_WIDTHS[i], DISC_WIDTHS[i + 1]);
            let w = store.add(
                &format!("{name}.conv{i}.w"),
                xavier_uniform(rng, &[co, ci, DISC_KERNEL], ci * DISC_KERNEL, co * DISC_KERNEL),
            )?;
            let b = store.add(&format!("{name}.conv{i}.b"), Tensor::zeros(&[co]))?;
            layers.push((w, b));
        }
        Ok(Self {
            layers: [layers[0], layers[1], layers[2]],
        })
    }

    /// Patch count for segments of length `len`.
    pub fn patches(len: usize) -> usize {
        (0..3).fold(len, |l, _| (l + 2).saturating_sub(DISC_KERNEL) / 2 + 1)
    }

    fn run<S: Scalar>(&self, g: &mut Graph<S>, weights: &[(Var, Var)], x: Var) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 2 || xs[1] + 2 < DISC_KERNEL * 2 {
            return Err(Error::graph("discriminator", format!("segments {xs:?} are too short")));
        }
        let mut h = g.reshape(x, &[xs[0], 1, xs[1]])?;
        for (i, &(w, b)) in weights.iter().enumerate() {
            h = g.conv1d(h, w, 2, 1)?;
            let co = g.shape(b)[0];
            let b = g.reshape(b, &[1, co, 1])?;
            h = g.add(h, b)?;
            if i < 2 {
                h = g.leaky_relu(h, DISC_SLOPE);
            }
        }
        let hs = g.shape(h).to_vec();
        g.reshape(h, &[hs[0], hs[2]])
    }

    /// Patch scores `[n, patches]` for segments `[n, L]`, differentiable in
    /// the discriminator weights.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w: Vec<(Var, Var)> = self.layers.iter().map(|&(w, b)| (g.param(store, w), g.param(store, b))).collect();
        self.run(g, &w, x)
    }

    /// Same scores with the weights entered as constants, for a generator
    /// graph that must not touch the discriminator's gradients.
    pub fn forward_frozen<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w: Vec<(Var, Var)> = self
            .layers
            .iter()
            .map(|&(w, b)| (g.input(store.value(w).clone()), g.input(store.value(b).clone())))
            .collect();
        self.run(g, &w, x)
    }
}

/// `0.5 * (mean (D(real) - 1)^2 + mean D(fake)^2)`.
pub fn disc_loss_graph<S: Scalar>(g: &mut Graph<S>, d_real: Var, d_fake: Var) -> Result<Var> {
    let r = g.add_scalar(d_real, -1.0);
    let r = g.square(r);
    let r = g.mean(r);
    let f = g.square(d_fake);
    let f = g.mean(f);
    let s = g.add(r, f)?;
    Ok(g.scale(s, 0.5))
}

/// `mean (D(fake) - 1)^2`.
pub fn gen_loss_graph<S: Scalar>(g: &mut Graph<S>, d_fake: Var) -> Var {
    let f = g.add_scalar(d_fake, -1.0);
    let f = g.square(f);
    g.mean(f)
}

fn mean_sq(v: &[f64], shift: f64) -> f64 {
    v.iter().map(|x| (x - shift) * (x - shift)).sum::<f64>() / v.len().max(1) as f64
}

/// Plain-value discriminator loss on patch scores.
pub fn disc_loss(d_real: &[f64], d_fake: &[f64]) -> f64 {
    0.5 * (mean_sq(d_real, 1.0) + mean_sq(d_fake, 0.0))
}

/// Plain-value generator loss on patch scores.
pub fn gen_loss(d_fake: &[f64]) -> f64 {
    mean_sq(d_fake, 1.0)
}

/// Row-standardize a segment matrix inside the graph.
pub fn standardize_rows<S: Scalar>(g: &mut Graph<S>, x: Var) -> Result<Var> {
    let mean = g.mean_axis(x, 1)?;
    let xc = g.sub(x, mean)?;
    let sq = g.square(xc);
    let var = g.mean_axis(sq, 1)?;
    let var = g.add_scalar(var, STD_EPS);
    let sd = g.sqrt(var);
    g.div(xc, sd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, GradCheckConfig};
    use crate::mvca::segment_sampling;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn triplets(f: Vec<Vec<f64>>, fp: Vec<Vec<f64>>, g: Vec<Vec<f64>>) -> SegmentTriplets {
        SegmentTriplets {
            len: g[0].len(),
            f,
            f_prime: fp,
            g,
        }
    }

    fn noise(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn pearson_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g: Vec<Vec<f64>> = (0..4).map(|_| noise(&mut rng, 64)).collect();
        let same = triplets(g.clone(), g.clone(), g.clone());
        assert!((pearson_loss(&same, PEARSON_EPS).unwrap().value + 1.0).abs() < 1e-6);
        let neg: Vec<Vec<f64>> = g.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
        let anti = triplets(neg.clone(), neg, g.clone());
        assert!((pearson_loss(&anti, PEARSON_EPS).unwrap().value - 1.0).abs() < 1e-6);
        // Positive affine images reach the minimum as well.
        let aff: Vec<Vec<f64>> = g.iter().map(|r| r.iter().map(|v| 3.0 * v + 7.0).collect()).collect();
        let t = triplets(aff.clone(), aff, g.clone());
        assert!((pearson_loss(&t, PEARSON_EPS).unwrap().value + 1.0).abs() < 1e-6);
    }

    #[test]
    fn pearson_half_with_noise_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut values = Vec::new();
        for _ in 0..100 {
            let g: Vec<Vec<f64>> = (0..4).map(|_| noise(&mut rng, 75)).collect();
            let fp: Vec<Vec<f64>> = (0..4).map(|_| noise(&mut rng, 75)).collect();
            values.push(pearson_loss(&triplets(g.clone(), fp, g), PEARSON_EPS).unwrap().value);
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        assert!((mean + 0.5).abs() <= 0.1, "{mean}");
    }

    #[test]
    fn pearson_degenerate_rows_are_counted() {
        let g = vec![vec![1.0, 2.0, 3.0, 4.0]];
        let t = triplets(vec![vec![5.0; 4]], g.clone(), g.clone());
        let l = pearson_loss(&t, PEARSON_EPS).unwrap();
        assert_eq!(l.degenerate, 1);
        assert!((l.value + 0.5).abs() < 1e-6);

        let mut gr = Graph::<f64>::new();
        let target = Tensor::from_f64s(&[1, 4], &g[0]).unwrap();
        let f = gr.variable(Tensor::from_f64s(&[1, 4], &[5.0; 4]).unwrap());
        let fp = gr.variable(target.clone());
        let (loss, deg) = pearson_loss_graph(&mut gr, f, fp, &target, PEARSON_EPS).unwrap();
        assert_eq!(deg, 1);
        let grads = gr.backward(loss).unwrap();
        assert!(grads.get(f).unwrap().all_finite());
    }

    #[test]
    fn graph_losses_match_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = Tensor::new(vec![1, 4, 128], noise(&mut rng, 512)).unwrap();
        let sp = Tensor::new(vec![1, 4, 128], noise(&mut rng, 512)).unwrap();
        let gt = noise(&mut rng, 128);
        let tr = segment_sampling(&s, &sp, &[&gt], 2).unwrap();
        let mut g = Graph::<f64>::new();
        let f = g.input(Tensor::from_f64s(&[8, 64], &tr.f.concat()).unwrap());
        let fp = g.input(Tensor::from_f64s(&[8, 64], &tr.f_prime.concat()).unwrap());
        let target = Tensor::from_f64s(&[8, 64], &tr.g.concat()).unwrap();
        let (lp, _) = pearson_loss_graph(&mut g, f, fp, &target, PEARSON_EPS).unwrap();
        let plain = pearson_loss(&tr, PEARSON_EPS).unwrap().value;
        assert!((g.value(lp).item().unwrap() - plain).abs() < 1e-12);

        let basis = SpectralBasis::new(64, 30.0, None).unwrap();
        let ls = psd_loss_graph(&mut g, &basis, f, fp, &target).unwrap();
        let plain = psd_loss(&psd_triplets(&tr, 30.0, None).unwrap()).unwrap();
        assert!((g.value(ls).item().unwrap() - plain).abs() < 1e-9);
    }

    #[test]
    fn spectrum_examples() {
        // 1.5 Hz sits on bin 3 of a 60-sample, 30 Hz segment.
        let basis = SpectralBasis::new(60, 30.0, None).unwrap();
        let x: Vec<f64> = (0..60).map(|t| (2.0 * std::f64::consts::PI * 1.5 * t as f64 / 30.0).sin()).collect();
        let (p, deg) = basis.distribution(&x).unwrap();
        assert!(!deg);
        let near: f64 = basis
            .freqs
            .iter()
            .zip(&p)
            .filter(|(f, _)| (*f - 1.5).abs() <= basis.fs / basis.nfft as f64 + 1e-9)
            .map(|(_, p)| p)
            .sum();
        assert!(near >= 0.9, "{near}");
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(basis.distribution(&x).unwrap(), basis.distribution(&x).unwrap());

        let (u, deg) = basis.distribution(&[0.0; 60]).unwrap();
        assert!(deg);
        assert!(u.iter().all(|v| (v - 1.0 / u.len() as f64).abs() < 1e-12));

        // The DFT oracle: compare against a direct complex sum at each bin.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = noise(&mut rng, 60);
        let (z, _) = standardize(&y);
        let (p, _) = basis.distribution(&y).unwrap();
        let raw: Vec<f64> = basis
            .freqs
            .iter()
            .map(|f| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, v) in z.iter().enumerate() {
                    let w = 2.0 * std::f64::consts::PI * f * t as f64 / 30.0;
                    re += v * w.cos();
                    im -= v * w.sin();
                }
                re * re + im * im
            })
            .collect();
        let total: f64 = raw.iter().sum();
        for (a, b) in p.iter().zip(&raw) {
            assert!((a - b / total).abs() < 1e-9);
        }
        assert!(SpectralBasis::new(16, 30.0, None).is_err());
    }

    #[test]
    fn psd_loss_examples() {
        let sp = SpectralTriplets {
            freqs: vec![1.0, 2.0],
            p: vec![vec![1.0, 0.0]],
            p_prime: vec![vec![0.0, 1.0]],
            s: vec![vec![0.0, 1.0]],
            degenerate: 0,
        };
        assert!((psd_loss(&sp).unwrap() - 1.0).abs() < 1e-12);
        let swapped = SpectralTriplets {
            p: sp.p_prime.clone(),
            p_prime: sp.p.clone(),
            ..sp.clone()
        };
        assert_eq!(psd_loss(&swapped).unwrap(), psd_loss(&sp).unwrap());
        let same = SpectralTriplets {
            p: sp.s.clone(),
            p_prime: sp.s.clone(),
            ..sp
        };
        assert!(psd_loss(&same).unwrap().abs() < 1e-9);
    }

    #[test]
    fn adversarial_examples() {
        assert_eq!(disc_loss(&[1.0; 5], &[0.0; 5]), 0.0);
        assert_eq!(gen_loss(&[0.0; 5]), 1.0);
        assert!((disc_loss(&[0.5; 5], &[0.5; 5]) - 0.25).abs() < 1e-12);
        assert!((gen_loss(&[0.5; 5]) - 0.25).abs() < 1e-12);
        assert_eq!(gen_loss(&[1.0; 5]), 0.0);
        let mut g = Graph::<f64>::new();
        let r = g.input(Tensor::full(&[2, 3], 0.5));
        let f = g.input(Tensor::full(&[2, 3], 0.5));
        let d = disc_loss_graph(&mut g, r, f).unwrap();
        let l = gen_loss_graph(&mut g, f);
        assert!((g.value(d).item().unwrap() - 0.25).abs() < 1e-12);
        assert!((g.value(l).item().unwrap() - 0.25).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn adversarial_losses_non_negative(r in prop::collection::vec(-10.0f64..10.0, 1..20), f in prop::collection::vec(-10.0f64..10.0, 1..20)) {
            prop_assert!(disc_loss(&r, &f) >= 0.0);
            prop_assert!(gen_loss(&f) >= 0.0);
        }
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(-1.0, 0.0, 0.0, 0.0, 1.0, 0.1).l_total, -1.0);
        assert!((total_loss(-0.5, 0.2, 0.3, 0.0, 1.0, 0.1).l_total + 0.27).abs() < 1e-12);
        let a = total_loss(-0.5, 0.2, 0.3, 0.0, 1.0, 0.0);
        let b = total_loss(-0.5, 0.2, 9.0, 0.0, 1.0, 0.0);
        assert_eq!(a.l_total, b.l_total);
    }

    #[test]
    fn discriminator_shapes_and_frozen_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let d = Discriminator::new(&mut store, "disc", &mut rng).unwrap();
        let x = Tensor::new(vec![3, 75], noise(&mut rng, 225)).unwrap();
        let mut g = Graph::new();
        let xi = g.input(x);
        let a = d.forward(&mut g, &store, xi).unwrap();
        let b = d.forward_frozen(&mut g, &store, xi).unwrap();
        assert_eq!(g.shape(a), [3, Discriminator::patches(75)]);
        assert_eq!(g.value(a), g.value(b));
        assert!(Discriminator::patches(75) >= 1);
        let short = g.input(Tensor::zeros(&[1, 3]));
        assert!(d.forward(&mut g, &store, short).is_err());
    }

    #[test]
    fn pearson_and_psd_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let f = store.add("f", Tensor::new(vec![4, 32], noise(&mut rng, 128)).unwrap()).unwrap();
        let fp = store.add("fp", Tensor::new(vec![4, 32], noise(&mut rng, 128)).unwrap()).unwrap();
        let target = Tensor::new(vec![4, 32], noise(&mut rng, 128)).unwrap();
        let basis = SpectralBasis::new(32, 30.0, None).unwrap();
        let cfg = GradCheckConfig::default();
        let rep = grad_check(&mut store, &cfg, |g, st| {
            let (a, b) = (g.param(st, f), g.param(st, fp));
            Ok(pearson_loss_graph(g, a, b, &target, PEARSON_EPS)?.0)
        })
        .unwrap();
        assert!(rep.passed(), "{:?}", rep.worst());
        let rep = grad_check(&mut store, &cfg, |g, st| {
            let (a, b) = (g.param(st, f), g.param(st, fp));
            psd_loss_graph(g, &basis, a, b, &target)
        })
        .unwrap();
        assert!(rep.passed(), "{:?}", rep.worst());
    }

    #[test]
    fn discriminator_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let d = Discriminator::new(&mut store, "disc", &mut rng).unwrap();
        let real = Tensor::new(vec![2, 32], noise(&mut rng, 64)).unwrap();
        let fake = Tensor::new(vec![2, 32], noise(&mut rng, 64)).unwrap();
        let rep = grad_check(&mut store, &GradCheckConfig::default(), |g, st| {
            let r = g.input(real.clone());
            let f = g.input(fake.clone());
            let dr = d.forward(g, st, r)?;
            let df = d.forward(g, st, f)?;
            disc_loss_graph(g, dr, df)
        })
        .unwrap();
        assert!(rep.passed(), "{:?}", rep.worst());
    }
}
