//! One-dimensional signal processing: resampling, standardization,
//! zero-phase band-pass filtering, periodograms, heart-rate readout and
//! evaluation metrics.

use std::path::Path;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader};
use crate::error::{Error, Result};

/// Lower edge of the heart-rate band in Hz (42 bpm).
pub const HR_BAND_LO: f64 = 0.7;
/// Upper edge of the heart-rate band in Hz (240 bpm).
pub const HR_BAND_HI: f64 = 4.0;
pub const DEFAULT_NFFT: usize = 2048;

const MVS_MAGIC: &[u8; 4] = b"MVS1";

/// A uniformly sampled real signal.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    samples: Vec<f64>,
    fs: f64,
}

impl TimeSeries {
    pub fn new(samples: Vec<f64>, fs: f64) -> Result<Self> {
        if !(fs.is_finite() && fs > 0.0) {
            return Err(Error::param(format!("sampling rate must be > 0, got {fs}")));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidSignal(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, fs })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }

    /// Sub-series `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.len() {
            return Err(Error::param(format!(
                "slice {start}..{end} out of range for length {}",
                self.len()
            )));
        }
        Ok(Self {
            samples: self.samples[start..end].to_vec(),
            fs: self.fs,
        })
    }

    /// Encode as `MVS1` + count + little-endian f32 samples.
    pub fn to_mvs_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(8 + 4 * self.len());
        buf.extend_from_slice(MVS_MAGIC);
        binio::put_u32(&mut buf, self.len() as u32);
        binio::put_f32s(&mut buf, self.samples.iter().map(|&v| v as f32));
        buf
    }

    /// Decode an `MVS1` payload. The sampling rate lives in the dataset
    /// manifest, so the caller supplies it.
    pub fn from_mvs_bytes(bytes: &[u8], fs: f64, path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.magic(MVS_MAGIC)?;
        let n = r.u32()? as usize;
        let vals = r.f32s(n)?;
        r.finish()?;
        Self::new(vals.into_iter().map(f64::from).collect(), fs)
    }

    pub fn write_mvs(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_mvs_bytes())?;
        Ok(())
    }

    pub fn read_mvs(path: &Path, fs: f64) -> Result<Self> {
        let bytes = binio::read_file(path)?;
        Self::from_mvs_bytes(&bytes, fs, path)
    }
}

/// One-sided power spectral density.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub freqs: Vec<f64>,
    pub power: Vec<f64>,
}

impl Spectrum {
    pub fn bin_width(&self) -> f64 {
        if self.freqs.len() < 2 {
            0.0
        } else {
            self.freqs[1] - self.freqs[0]
        }
    }

    /// Sum of `power * bin_width`; equals the mean-square amplitude of the
    /// source signal.
    pub fn total_power(&self) -> f64 {
        self.power.iter().sum::<f64>() * self.bin_width()
    }

    pub fn peak_frequency(&self) -> Option<f64> {
        argmax_lowest(&self.power).map(|i| self.freqs[i])
    }
}

/// Heart rate in beats per minute, restricted to the 42–240 bpm band.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct HrEstimate {
    bpm: f64,
}

impl HrEstimate {
    pub const MIN_BPM: f64 = HR_BAND_LO * 60.0;
    pub const MAX_BPM: f64 = HR_BAND_HI * 60.0;

    pub fn new(bpm: f64) -> Result<Self> {
        // Allow for rounding at the band edges.
        let tol = 1e-9;
        if !(bpm >= Self::MIN_BPM - tol && bpm <= Self::MAX_BPM + tol) {
            return Err(Error::param(format!(
                "heart rate {bpm} bpm outside [{}, {}]",
                Self::MIN_BPM,
                Self::MAX_BPM
            )));
        }
        Ok(Self { bpm })
    }

    pub fn bpm(self) -> f64 {
        self.bpm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub r: f64,
    pub n: usize,
    /// Set when either HR list had zero variance; `r` is then reported as 0.
    pub r_degenerate: bool,
}

/// Result of [`detrend_normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub series: TimeSeries,
    /// Input was constant; output is all zeros.
    pub degenerate: bool,
}

/// Linear-interpolation resampling to `target_fs`.
///
/// The output spans the same duration: `round(len * target_fs / fs)` samples.
pub fn resample(ts: &TimeSeries, target_fs: f64) -> Result<TimeSeries> {
    if !(target_fs.is_finite() && target_fs > 0.0) {
        return Err(Error::param(format!("target rate must be > 0, got {target_fs}")));
    }
    let n = ts.len();
    if n < 2 {
        return Err(Error::param("resample needs at least 2 samples"));
    }
    let out_len = ((n as f64) * target_fs / ts.fs).round().max(1.0) as usize;
    let ratio = ts.fs / target_fs;
    let src = ts.samples();
    let out = (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let lo = (pos.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            let frac = (pos - lo as f64).clamp(0.0, 1.0);
            src[lo] + (src[hi] - src[lo]) * frac
        })
        .collect();
    TimeSeries::new(out, target_fs)
}

/// Zero-mean, unit (population) standard deviation.
pub fn detrend_normalize(ts: &TimeSeries) -> Result<Normalized> {
    let n = ts.len();
    if n < 2 {
        return Err(Error::param("detrend_normalize needs at least 2 samples"));
    }
    let (out, degenerate) = standardize(ts.samples());
    Ok(Normalized {
        series: TimeSeries::new(out, ts.fs)?,
        degenerate,
    })
}

/// Standardize a slice; returns all zeros and `true` for constant input.
pub fn standardize(x: &[f64]) -> (Vec<f64>, bool) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let scale = x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if var <= (1e-12 * scale).powi(2) || var == 0.0 {
        return (vec![0.0; x.len()], true);
    }
    let sd = var.sqrt();
    (x.iter().map(|v| (v - mean) / sd).collect(), false)
}

/// Second-order section in transposed direct form II, `a0` normalized to 1.
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    // Butterworth sections (Q = 1/sqrt 2) via the bilinear transform with
    // prewarping at the cutoff.
    fn highpass(fc: f64, fs: f64) -> Self {
        let (cos, alpha) = Self::warp(fc, fs);
        let a0 = 1.0 + alpha;
        Self {
            b: [(1.0 + cos) / 2.0 / a0, -(1.0 + cos) / a0, (1.0 + cos) / 2.0 / a0],
            a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
        }
    }

    fn lowpass(fc: f64, fs: f64) -> Self {
        let (cos, alpha) = Self::warp(fc, fs);
        let a0 = 1.0 + alpha;
        Self {
            b: [(1.0 - cos) / 2.0 / a0, (1.0 - cos) / a0, (1.0 - cos) / 2.0 / a0],
            a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
        }
    }

    fn warp(fc: f64, fs: f64) -> (f64, f64) {
        let w0 = 2.0 * std::f64::consts::PI * fc / fs;
        (w0.cos(), w0.sin() / std::f64::consts::SQRT_2)
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Filter in place, starting from the steady state for a constant input `x0`.
    fn run(&self, x: &mut [f64], x0: f64) {
        let y0 = self.dc_gain() * x0;
        let mut s2 = self.b[2] * x0 - self.a[1] * y0;
        let mut s1 = self.b[1] * x0 - self.a[0] * y0 + s2;
        for v in x.iter_mut() {
            let xi = *v;
            let yi = self.b[0] * xi + s1;
            s1 = self.b[1] * xi - self.a[0] * yi + s2;
            s2 = self.b[2] * xi - self.a[1] * yi;
            *v = yi;
        }
    }
}

fn run_cascade(sections: &[Biquad], x: &mut [f64]) {
    let mut x0 = x.first().copied().unwrap_or(0.0);
    for s in sections {
        s.run(x, x0);
        x0 *= s.dc_gain();
    }
}

/// Zero-phase 4th-order Butterworth band-pass (high-pass and low-pass
/// sections applied forward and backward).
pub fn bandpass(ts: &TimeSeries, lo: f64, hi: f64) -> Result<TimeSeries> {
    let nyq = ts.fs / 2.0;
    if !(lo > 0.0 && lo < hi) {
        return Err(Error::param(format!("band [{lo}, {hi}] must satisfy 0 < lo < hi")));
    }
    if hi >= nyq {
        return Err(Error::param(format!("upper edge {hi} Hz at or above Nyquist {nyq} Hz")));
    }
    let n = ts.len();
    if n < 2 {
        return Err(Error::param("bandpass needs at least 2 samples"));
    }
    let sections = [Biquad::highpass(lo, ts.fs), Biquad::lowpass(hi, ts.fs)];
    let x = ts.samples();

    // Odd extension at both ends suppresses start-up transients.
    let pad = ((3.0 * ts.fs / lo).ceil() as usize).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    run_cascade(&sections, &mut ext);
    ext.reverse();
    run_cascade(&sections, &mut ext);
    ext.reverse();
    TimeSeries::new(ext[pad..pad + n].to_vec(), ts.fs)
}

/// Band-pass with the default heart-rate band.
pub fn bandpass_hr(ts: &TimeSeries) -> Result<TimeSeries> {
    bandpass(ts, HR_BAND_LO, HR_BAND_HI)
}

/// Zero-padded one-sided periodogram with bin width `fs / nfft`.
///
/// Normalized so that `sum(power) * bin_width` equals the mean-square
/// amplitude of the input.
pub fn psd(ts: &TimeSeries, nfft: usize) -> Result<Spectrum> {
    let n = ts.len();
    if n < 32 {
        return Err(Error::param(format!("psd needs at least 32 samples, got {n}")));
    }
    if nfft < n {
        return Err(Error::param(format!("nfft {nfft} shorter than signal length {n}")));
    }
    let mut buf: Vec<Complex<f64>> = ts
        .samples()
        .iter()
        .map(|&v| Complex::new(v, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(nfft)
        .collect();
    FftPlanner::new().plan_fft_forward(nfft).process(&mut buf);

    let half = nfft / 2;
    let scale = 1.0 / (ts.fs * n as f64);
    let power = (0..=half)
        .map(|k| {
            let one_sided = if k == 0 || (nfft % 2 == 0 && k == half) { 1.0 } else { 2.0 };
            one_sided * buf[k].norm_sqr() * scale
        })
        .collect();
    let freqs = (0..=half).map(|k| k as f64 * ts.fs / nfft as f64).collect();
    Ok(Spectrum { freqs, power })
}

fn argmax_lowest(v: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &p) in v.iter().enumerate() {
        match best {
            Some(b) if p <= v[b] => {}
            _ => best = Some(i),
        }
    }
    best
}

/// `60 ×` the strongest frequency inside [0.7, 4.0] Hz, ties toward the
/// lower frequency.
pub fn hr_from_spectrum(spec: &Spectrum) -> Result<HrEstimate> {
    let covers = spec.freqs.first().is_some_and(|&f| f <= HR_BAND_LO)
        && spec.freqs.last().is_some_and(|&f| f >= HR_BAND_HI);
    if !covers {
        return Err(Error::param("spectrum does not cover the 0.7-4.0 Hz band"));
    }
    let mut best: Option<(f64, f64)> = None;
    for (&f, &p) in spec.freqs.iter().zip(&spec.power) {
        if !(HR_BAND_LO..=HR_BAND_HI).contains(&f) {
            continue;
        }
        if best.is_none_or(|(_, bp)| p > bp) {
            best = Some((f, p));
        }
    }
    match best {
        Some((f, p)) if p > 0.0 => HrEstimate::new(60.0 * f),
        _ => Err(Error::NoPulse),
    }
}

/// Band-pass, periodogram and peak readout in one call.
pub fn estimate_hr(ts: &TimeSeries, nfft: usize) -> Result<HrEstimate> {
    let filtered = bandpass_hr(ts)?;
    let nfft = nfft.max(filtered.len().next_power_of_two());
    hr_from_spectrum(&psd(&filtered, nfft)?)
}

/// Pearson correlation coefficient.
pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::param(format!("length mismatch {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::param("pearson_r needs at least 2 samples"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let tiny = |s: f64, v: &[f64]| {
        let scale = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        s == 0.0 || s <= n * (1e-12 * scale).powi(2)
    };
    if tiny(saa, a) || tiny(sbb, b) {
        return Err(Error::Degenerate("zero-variance argument to pearson_r".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// MAE, RMSE and Pearson R between predicted and reference heart rates.
pub fn metrics(pred: &[HrEstimate], gt: &[HrEstimate]) -> Result<MetricsReport> {
    let p: Vec<f64> = pred.iter().map(|h| h.bpm()).collect();
    let g: Vec<f64> = gt.iter().map(|h| h.bpm()).collect();
    metrics_bpm(&p, &g)
}

pub fn metrics_bpm(pred: &[f64], gt: &[f64]) -> Result<MetricsReport> {
    if pred.len() != gt.len() {
        return Err(Error::param(format!(
            "prediction/reference length mismatch {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::param("metrics need at least one pair"));
    }
    let n = pred.len();
    let (mut abs, mut sq) = (0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        let d = p - g;
        abs += d.abs();
        sq += d * d;
    }
    let mae = abs / n as f64;
    // sqrt(mean d^2) >= mean |d| holds mathematically; guard the last ulp.
    let rmse = (sq / n as f64).sqrt().max(mae);
    let (r, r_degenerate) = match pearson_r(pred, gt) {
        Ok(r) => (r, false),
        Err(_) => (0.0, true),
    };
    Ok(MetricsReport {
        mae,
        rmse,
        r,
        n,
        r_degenerate,
    })
}
