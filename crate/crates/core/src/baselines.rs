//! Classical colour-projection pulse extractors (POS and CHROM) and the RGB
//! traces they run on.

use crate::error::{Error, Result};
use crate::signal::{bandpass_hr, standardize, TimeSeries};
use crate::synth::{reference_keypoints, skin_region};
use crate::video::{KeypointTrack, Mask, Video};

/// Per-frame spatial mean of each channel over a skin mask.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbTrace {
    pub r: Vec<f64>,
    pub g: Vec<f64>,
    pub b: Vec<f64>,
    pub fs: f64,
}

impl RgbTrace {
    pub fn new(r: Vec<f64>, g: Vec<f64>, b: Vec<f64>, fs: f64) -> Result<Self> {
        if r.len() != g.len() || r.len() != b.len() {
            return Err(Error::param("RGB channels differ in length"));
        }
        if !(fs.is_finite() && fs > 0.0) {
            return Err(Error::param(format!("sampling rate must be > 0, got {fs}")));
        }
        if r.iter().chain(&g).chain(&b).any(|v| !v.is_finite()) {
            return Err(Error::InvalidSignal("non-finite RGB sample".into()));
        }
        Ok(Self { r, g, b, fs })
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn scaled(&self, k: f64) -> Self {
        let s = |v: &[f64]| v.iter().map(|x| x * k).collect();
        Self {
            r: s(&self.r),
            g: s(&self.g),
            b: s(&self.b),
            fs: self.fs,
        }
    }

    fn at(&self, t: usize) -> [f64; 3] {
        [self.r[t], self.g[t], self.b[t]]
    }
}

pub fn extract_rgb_trace(video: &Video, mask: &Mask, fs: f64) -> Result<RgbTrace> {
    if mask.is_empty() {
        return Err(Error::param("skin mask is empty"));
    }
    if video.channels() != 3 {
        return Err(Error::param(format!("expected RGB video, got {} channels", video.channels())));
    }
    let (w, n) = (video.width(), mask.count() as f64);
    let mut ch = [Vec::new(), Vec::new(), Vec::new()];
    for t in 0..video.frames() {
        let f = video.frame(t);
        let mut acc = [0u64; 3];
        for (y, x) in mask.iter_set() {
            let i = (y * w + x) * 3;
            for (c, a) in acc.iter_mut().enumerate() {
                *a += f[i + c] as u64;
            }
        }
        for c in 0..3 {
            ch[c].push(acc[c] as f64 / n);
        }
    }
    let [r, g, b] = ch;
    RgbTrace::new(r, g, b, fs)
}

/// Central crop covering `fraction` of each side; the skin stand-in for
/// frames without a known skin region.
pub fn central_crop_mask(height: usize, width: usize, fraction: f64) -> Mask {
    let mut m = Mask::new(height, width);
    let span = |n: usize| {
        let k = ((n as f64) * fraction).round().clamp(1.0, n as f64) as usize;
        let lo = (n - k) / 2;
        lo..lo + k
    };
    for y in span(height) {
        for x in span(width) {
            m.set(y, x, true);
        }
    }
    m
}

/// Least-squares global affine `z' = M [x, y, 1]` from point pairs.
fn fit_affine(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Result<[[f64; 3]; 2]> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(Error::param("affine fit needs at least three point pairs"));
    }
    let mut ata = [[0.0; 3]; 3];
    let mut atb = [[0.0; 3]; 2];
    for (s, d) in src.iter().zip(dst) {
        let row = [s[0], s[1], 1.0];
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
            atb[0][i] += row[i] * d[0];
            atb[1][i] += row[i] * d[1];
        }
    }
    let inv = invert3(&ata).ok_or_else(|| Error::Degenerate("collinear keypoints".into()))?;
    let mut m = [[0.0; 3]; 2];
    for (r, out) in m.iter_mut().enumerate() {
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..3).map(|j| inv[i][j] * atb[r][j]).sum();
        }
    }
    Ok(m)
}

fn invert3(a: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let c = |i: usize, j: usize| {
        let (r0, r1) = ((i + 1) % 3, (i + 2) % 3);
        let (c0, c1) = ((j + 1) % 3, (j + 2) % 3);
        a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0]
    };
    let det = a[0][0] * c(0, 0) + a[0][1] * c(0, 1) + a[0][2] * c(0, 2);
    if det.abs() < 1e-12 {
        return None;
    }
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = c(j, i) / det;
        }
    }
    Some(out)
}

/// The generator's skin region carried to the head pose of frame `t`, via
/// the affine that best maps reference keypoints onto the tracked ones.
pub fn pose_skin_mask(track: &KeypointTrack, t: usize, height: usize, width: usize) -> Result<Mask> {
    if t >= track.frames() {
        return Err(Error::param(format!("frame {t} outside a {}-frame track", track.frames())));
    }
    let reference = reference_keypoints(height, width);
    // maps pose coordinates back to the reference frame
    let m = fit_affine(&track.at(t), &reference)?;
    let skin = skin_region(height, width);
    let mut out = Mask::new(height, width);
    for y in 0..height {
        for x in 0..width {
            let (xf, yf) = (x as f64, y as f64);
            let u = (m[0][0] * xf + m[0][1] * yf + m[0][2]).round();
            let v = (m[1][0] * xf + m[1][1] * yf + m[1][2]).round();
            if u >= 0.0 && v >= 0.0 && (u as usize) < width && (v as usize) < height {
                out.set(y, x, skin.get(v as usize, u as usize));
            }
        }
    }
    Ok(out)
}

/// Window length used by POS, seconds.
pub const POS_WINDOW_S: f64 = 1.6;

/// Plane-orthogonal-to-skin projection with sliding temporal normalization
/// and overlap-add.
pub fn pos(trace: &RgbTrace, window_s: f64) -> Result<TimeSeries> {
    let n = trace.len();
    let l = (window_s * trace.fs).ceil() as usize;
    if l < 2 || l >= n {
        return Err(Error::param(format!("POS window of {l} frames needs a longer trace than {n}")));
    }
    let mut h = vec![0.0; n];
    let mut s1 = vec![0.0; l];
    let mut s2 = vec![0.0; l];
    for start in 0..=n - l {
        let mut mean = [0.0; 3];
        for t in start..start + l {
            for (m, v) in mean.iter_mut().zip(trace.at(t)) {
                *m += v / l as f64;
            }
        }
        if mean.iter().any(|&m| m <= 0.0) {
            continue;
        }
        for k in 0..l {
            let c = trace.at(start + k);
            let (r, g, b) = (c[0] / mean[0], c[1] / mean[1], c[2] / mean[2]);
            s1[k] = g - b;
            s2[k] = g + b - 2.0 * r;
        }
        let (sd1, sd2) = (std_dev(&s1), std_dev(&s2));
        let alpha = if sd2 > 0.0 { sd1 / sd2 } else { 0.0 };
        let seg: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| a + alpha * b).collect();
        let mu = seg.iter().sum::<f64>() / l as f64;
        for (k, v) in seg.iter().enumerate() {
            h[start + k] += v - mu;
        }
    }
    finish(h, trace.fs, "POS")
}

/// Chrominance projection on band-passed, mean-normalized channels.
pub fn chrom(trace: &RgbTrace) -> Result<TimeSeries> {
    let norm = |v: &[f64]| -> Result<Vec<f64>> {
        let m = v.iter().sum::<f64>() / v.len().max(1) as f64;
        if m <= 0.0 {
            return Err(Error::Degenerate("channel with zero mean intensity".into()));
        }
        Ok(v.iter().map(|x| x / m).collect())
    };
    let (r, g, b) = (norm(&trace.r)?, norm(&trace.g)?, norm(&trace.b)?);
    let xs: Vec<f64> = r.iter().zip(&g).map(|(r, g)| 3.0 * r - 2.0 * g).collect();
    let ys: Vec<f64> = r.iter().zip(&g).zip(&b).map(|((r, g), b)| 1.5 * r + g - 1.5 * b).collect();
    let xf = bandpass_hr(&TimeSeries::new(xs, trace.fs)?)?.into_samples();
    let yf = bandpass_hr(&TimeSeries::new(ys, trace.fs)?)?.into_samples();
    let (sx, sy) = (std_dev(&xf), std_dev(&yf));
    let alpha = if sy > 0.0 { sx / sy } else { 0.0 };
    let s = xf.iter().zip(&yf).map(|(x, y)| x - alpha * y).collect();
    finish(s, trace.fs, "CHROM")
}

fn std_dev(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
}

fn finish(s: Vec<f64>, fs: f64, method: &str) -> Result<TimeSeries> {
    let (z, degenerate) = standardize(&s);
    if degenerate {
        return Err(Error::Degenerate(format!("{method} projection is constant")));
    }
    TimeSeries::new(z, fs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{detrend_normalize, estimate_hr, pearson_r, DEFAULT_NFFT};
    use crate::synth::{render_clip, Scenario, SceneConfig, View};
    use crate::video::Frame;

    fn uniform_video(rgb: [u8; 3], frames: usize) -> Video {
        let f = Frame::new(4, 4, 3, rgb.repeat(16)).unwrap();
        Video::from_frames(vec![f; frames]).unwrap()
    }

    fn pulsing_trace(bpm: f64, gains: [f64; 3], n: usize) -> RgbTrace {
        let fs = 30.0;
        let base = [180.0, 130.0, 110.0];
        let ch = |c: usize| {
            (0..n)
                .map(|t| {
                    let p = (2.0 * std::f64::consts::PI * bpm / 60.0 * t as f64 / fs).sin();
                    base[c] * (1.0 + gains[c] * 0.01 * p)
                })
                .collect()
        };
        RgbTrace::new(ch(0), ch(1), ch(2), fs).unwrap()
    }

    fn clip(hr: f64, seed: u64) -> crate::synth::MultiViewClip {
        render_clip(&SceneConfig {
            hr_base: hr,
            noise_sigma: 0.0,
            seed,
            ..SceneConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn uniform_frame_trace() {
        let tr = extract_rgb_trace(&uniform_video([10, 20, 30], 5), &Mask::full(4, 4), 30.0).unwrap();
        assert_eq!(tr.len(), 5);
        assert!(tr.r.iter().all(|&v| v == 10.0));
        assert!(tr.g.iter().all(|&v| v == 20.0));
        assert!(tr.b.iter().all(|&v| v == 30.0));
    }

    #[test]
    fn one_pixel_mask_reads_that_pixel() {
        let mut f = Frame::zeros(4, 4, 3);
        for c in 0..3 {
            f.set(2, 1, c, 50 + c as u8);
        }
        let v = Video::from_frames(vec![f.clone(), f]).unwrap();
        let mut m = Mask::new(4, 4);
        m.set(2, 1, true);
        let tr = extract_rgb_trace(&v, &m, 30.0).unwrap();
        assert_eq!(tr.at(1), [50.0, 51.0, 52.0]);
    }

    #[test]
    fn empty_mask_is_an_error() {
        assert!(extract_rgb_trace(&uniform_video([1, 2, 3], 2), &Mask::new(4, 4), 30.0).is_err());
    }

    #[test]
    fn green_trace_follows_ground_truth() {
        let c = clip(72.0, 4);
        let tr = extract_rgb_trace(c.view(View::Center), &skin_region(32, 32), c.fps()).unwrap();
        let g = detrend_normalize(&TimeSeries::new(tr.g.clone(), c.fps()).unwrap()).unwrap();
        let r = pearson_r(g.series.samples(), c.gt_ppg.samples()).unwrap();
        assert!(r >= 0.99, "r = {r}");
    }

    #[test]
    fn pos_and_chrom_recover_generated_rates() {
        for (hr, seed) in [(72.0, 1), (96.0, 2)] {
            let c = clip(hr, seed);
            let tr = extract_rgb_trace(c.view(View::Center), &skin_region(32, 32), c.fps()).unwrap();
            let gt = estimate_hr(&c.gt_ppg, DEFAULT_NFFT).unwrap().bpm();
            for s in [pos(&tr, POS_WINDOW_S).unwrap(), chrom(&tr).unwrap()] {
                let bpm = estimate_hr(&s, DEFAULT_NFFT).unwrap().bpm();
                assert!((bpm - gt).abs() <= 2.0, "{bpm} vs {gt}");
            }
        }
    }

    #[test]
    fn green_only_pulsation() {
        let tr = pulsing_trace(84.0, [0.0, 1.0, 0.0], 300);
        for s in [pos(&tr, POS_WINDOW_S).unwrap(), chrom(&tr).unwrap()] {
            let bpm = estimate_hr(&s, DEFAULT_NFFT).unwrap().bpm();
            assert!((bpm - 84.0).abs() <= 2.0, "{bpm}");
        }
    }

    #[test]
    fn constant_trace_is_degenerate() {
        let tr = RgbTrace::new(vec![100.0; 300], vec![90.0; 300], vec![80.0; 300], 30.0).unwrap();
        assert!(matches!(pos(&tr, POS_WINDOW_S), Err(Error::Degenerate(_))));
        assert!(matches!(chrom(&tr), Err(Error::Degenerate(_))));
    }

    #[test]
    fn global_scaling_invariance() {
        let tr = pulsing_trace(66.0, [0.3, 0.8, 0.5], 300);
        let big = tr.scaled(2.0);
        for (a, b) in [
            (pos(&tr, POS_WINDOW_S).unwrap(), pos(&big, POS_WINDOW_S).unwrap()),
            (chrom(&tr).unwrap(), chrom(&big).unwrap()),
        ] {
            let d = a.samples().iter().zip(b.samples()).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
            assert!(d <= 1e-6, "max diff {d}");
        }
    }

    #[test]
    fn pose_mask_matches_reference_at_identity() {
        let c = clip(72.0, 0);
        let m = pose_skin_mask(&c.keypoints[1], 0, 32, 32).unwrap();
        assert_eq!(m, skin_region(32, 32));
    }

    #[test]
    fn pose_mask_follows_translation() {
        let c = render_clip(&SceneConfig {
            scenario: Scenario::Movement,
            ..SceneConfig::default()
        })
        .unwrap();
        let track = &c.keypoints[1];
        let t = (0..track.frames())
            .max_by(|&a, &b| track.point(0, a)[0].total_cmp(&track.point(0, b)[0]))
            .unwrap();
        let shift = (track.point(0, t)[0] - reference_keypoints(32, 32)[0][0]).round();
        assert!(shift >= 3.0, "shift {shift}");
        let m = pose_skin_mask(track, t, 32, 32).unwrap();
        let centroid = |m: &Mask| m.iter_set().map(|(_, x)| x as f64).sum::<f64>() / m.count() as f64;
        let moved = centroid(&m) - centroid(&skin_region(32, 32));
        assert!((moved - shift).abs() <= 1.0, "{moved} vs {shift}");
    }

    #[test]
    fn central_crop_covers_sixty_percent() {
        let m = central_crop_mask(10, 20, 0.6);
        assert_eq!(m.count(), 6 * 12);
        assert!(m.get(2, 4) && !m.get(1, 4) && !m.get(2, 3));
    }
}
