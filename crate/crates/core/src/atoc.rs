//! Mask-gated affine motion compensation and per-view flow-noise scores.
//!
//! Motion is detected by frame differencing with an Otsu threshold, cleaned
//! by morphology, and modelled locally around each keypoint by an affine map
//! fitted to neighbouring keypoint displacements. Pixels take the
//! displacement of their nearest keypoint.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::Scenario;
use crate::video::{Frame, KeypointTrack, Mask, Video};

pub type Point = [f64; 2];
pub type Mat2 = [[f64; 2]; 2];

const IDENTITY: Mat2 = [[1.0, 0.0], [0.0, 1.0]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AtocConfig {
    /// Neighbourhood size for the local affine fit.
    pub neighbors: usize,
    /// Largest accepted Frobenius norm of `A - I`; beyond it the fit falls
    /// back to pure translation.
    pub max_deformation: f64,
    /// Region threshold on displacement magnitude, pixels.
    pub tau: f64,
    /// Fixed motion threshold in 8-bit levels; `None` selects Otsu per pair.
    pub delta: Option<f64>,
}

impl Default for AtocConfig {
    fn default() -> Self {
        Self {
            neighbors: 6,
            max_deformation: 0.5,
            tau: 0.5,
            delta: None,
        }
    }
}

/// Per-pixel maximum over channels of `|b - a|`, row-major `H × W`.
pub fn abs_diff_image(a: &Frame, b: &Frame) -> Result<Vec<u8>> {
    if !a.same_shape(b) {
        return Err(Error::param("frame shapes differ"));
    }
    let c = a.channels;
    Ok(a.data
        .chunks_exact(c)
        .zip(b.data.chunks_exact(c))
        .map(|(pa, pb)| pa.iter().zip(pb).map(|(x, y)| x.abs_diff(*y)).max().unwrap_or(0))
        .collect())
}

/// `mask(y, x) = 1` iff the channel-max absolute difference exceeds `delta`.
pub fn motion_mask(prev: &Frame, cur: &Frame, delta: f64) -> Result<Mask> {
    if !(delta >= 0.0) {
        return Err(Error::param("motion threshold must be non-negative"));
    }
    let diff = abs_diff_image(prev, cur)?;
    Ok(mask_above(&diff, prev.height, prev.width, delta))
}

fn mask_above(diff: &[u8], height: usize, width: usize, delta: f64) -> Mask {
    let mut m = Mask::new(height, width);
    for (i, &d) in diff.iter().enumerate() {
        if d as f64 > delta {
            m.set(i / width, i % width, true);
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub value: f64,
    /// The histogram has a single occupied bin.
    pub degenerate: bool,
}

/// Otsu threshold on a 256-bin histogram. Values `<= value` form the lower
/// class. When several cut points tie, the midpoint of the tied run is
/// returned so that a gap between modes is split evenly.
pub fn auto_threshold(diff: &[u8]) -> Result<Threshold> {
    if diff.is_empty() {
        return Err(Error::param("empty difference image"));
    }
    let mut hist = [0u64; 256];
    for &d in diff {
        hist[d as usize] += 1;
    }
    let total = diff.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &h)| i as f64 * h as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = 0.0;
    let (mut first, mut last) = (0usize, 0usize);
    for k in 0..255 {
        w0 += hist[k] as f64;
        sum0 += k as f64 * hist[k] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            first = k;
            last = k;
        } else if between == best && best > 0.0 && last + 1 == k {
            last = k;
        }
    }
    if best == 0.0 {
        return Ok(Threshold {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Threshold {
        value: (first + last) as f64 / 2.0,
        degenerate: false,
    })
}

fn morph(mask: &Mask, dilate: bool) -> Mask {
    let (h, w) = (mask.height, mask.width);
    let mut out = Mask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut hit = !dilate;
            'nb: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    // outside pixels are 0 for dilation and 1 for erosion
                    let v = if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        !dilate
                    } else {
                        mask.get(yy as usize, xx as usize)
                    };
                    if dilate && v {
                        hit = true;
                        break 'nb;
                    }
                    if !dilate && !v {
                        hit = false;
                        break 'nb;
                    }
                }
            }
            out.set(y, x, hit);
        }
    }
    out
}

pub fn dilate(mask: &Mask) -> Mask {
    morph(mask, true)
}

pub fn erode(mask: &Mask) -> Mask {
    morph(mask, false)
}

pub fn close(mask: &Mask) -> Mask {
    erode(&dilate(mask))
}

/// 3×3 closing followed by one 3×3 dilation.
pub fn refine_mask(mask: &Mask) -> Mask {
    dilate(&close(mask))
}

/// Piecewise-affine displacement field anchored at keypoints.
///
/// The displacement at `z` is `(A_k - I)(z - p_k) + b_k` for the nearest
/// anchor `p_k`, so `z + D(z)` is the local affine image of `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineField {
    pub anchors: Vec<Point>,
    pub maps: Vec<Mat2>,
    pub offsets: Vec<Point>,
}

impl AffineField {
    pub fn identity(anchors: Vec<Point>) -> Self {
        let n = anchors.len();
        Self {
            anchors,
            maps: vec![IDENTITY; n],
            offsets: vec![[0.0; 2]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Index of the nearest anchor; ties go to the lower index.
    pub fn nearest(&self, z: Point) -> usize {
        let mut best = 0;
        let mut bd = f64::INFINITY;
        for (k, p) in self.anchors.iter().enumerate() {
            let d = (z[0] - p[0]).powi(2) + (z[1] - p[1]).powi(2);
            if d < bd {
                bd = d;
                best = k;
            }
        }
        best
    }

    pub fn displacement(&self, z: Point) -> Point {
        if self.is_empty() {
            return [0.0; 2];
        }
        let k = self.nearest(z);
        let (a, p, b) = (self.maps[k], self.anchors[k], self.offsets[k]);
        let d = [z[0] - p[0], z[1] - p[1]];
        [
            (a[0][0] - 1.0) * d[0] + a[0][1] * d[1] + b[0],
            a[1][0] * d[0] + (a[1][1] - 1.0) * d[1] + b[1],
        ]
    }

    /// Field whose displacement is the exact negation: `A' = 2I - A`,
    /// `b' = -b`.
    pub fn negated(&self) -> Self {
        Self {
            anchors: self.anchors.clone(),
            maps: self
                .maps
                .iter()
                .map(|a| [[2.0 - a[0][0], -a[0][1]], [-a[1][0], 2.0 - a[1][1]]])
                .collect(),
            offsets: self.offsets.iter().map(|b| [-b[0], -b[1]]).collect(),
        }
    }
}

fn deformation(a: &Mat2) -> f64 {
    ((a[0][0] - 1.0).powi(2) + a[0][1].powi(2) + a[1][0].powi(2) + (a[1][1] - 1.0).powi(2)).sqrt()
}

/// Solve the 3×3 system by Gaussian elimination with partial pivoting.
fn solve3(mut m: [[f64; 3]; 3], mut r: [[f64; 2]; 3]) -> Option<[[f64; 2]; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, piv);
        r.swap(col, piv);
        for row in 0..3 {
            if row != col {
                let f = m[row][col] / m[col][col];
                for c in 0..3 {
                    m[row][c] -= f * m[col][c];
                }
                for c in 0..2 {
                    r[row][c] -= f * r[col][c];
                }
            }
        }
    }
    let mut x = [[0.0; 2]; 3];
    for i in 0..3 {
        for c in 0..2 {
            x[i][c] = r[i][c] / m[i][i];
        }
    }
    Some(x)
}

/// Local affine fits from keypoint correspondences `prev -> cur`, anchored
/// at `prev`.
///
/// Each keypoint is fitted by least squares over its `neighbors` nearest
/// keypoints (itself included). Collinear neighbourhoods, and fits whose
/// deformation exceeds `max_deformation`, fall back to the keypoint's own
/// translation.
pub fn estimate_affine(prev: &[Point], cur: &[Point], cfg: &AtocConfig) -> Result<AffineField> {
    if prev.len() != cur.len() {
        return Err(Error::param("keypoint counts differ"));
    }
    if prev.len() < 3 {
        return Err(Error::param("affine fit needs at least three keypoints"));
    }
    if prev.iter().chain(cur).flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidSignal("non-finite keypoint".into()));
    }
    let m = cfg.neighbors.clamp(3, prev.len());
    let mut field = AffineField::identity(prev.to_vec());
    for (k, p) in prev.iter().enumerate() {
        let translation = [cur[k][0] - p[0], cur[k][1] - p[1]];
        field.offsets[k] = translation;

        let mut order: Vec<usize> = (0..prev.len()).collect();
        let dist = |j: usize| (prev[j][0] - p[0]).powi(2) + (prev[j][1] - p[1]).powi(2);
        order.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
        let nb = &order[..m];

        // Collinearity test on the centred scatter of the neighbourhood.
        let mean = nb.iter().fold([0.0; 2], |acc, &j| [acc[0] + prev[j][0], acc[1] + prev[j][1]]);
        let mean = [mean[0] / m as f64, mean[1] / m as f64];
        let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
        for &j in nb {
            let (dx, dy) = (prev[j][0] - mean[0], prev[j][1] - mean[1]);
            sxx += dx * dx;
            sxy += dx * dy;
            syy += dy * dy;
        }
        let tr = sxx + syy;
        if tr == 0.0 || sxx * syy - sxy * sxy <= 1e-9 * tr * tr {
            continue;
        }

        let mut normal = [[0.0; 3]; 3];
        let mut rhs = [[0.0; 2]; 3];
        for &j in nb {
            let row = [prev[j][0] - p[0], prev[j][1] - p[1], 1.0];
            let target = [cur[j][0] - p[0], cur[j][1] - p[1]];
            for a in 0..3 {
                for b in 0..3 {
                    normal[a][b] += row[a] * row[b];
                }
                for c in 0..2 {
                    rhs[a][c] += row[a] * target[c];
                }
            }
        }
        let Some(sol) = solve3(normal, rhs) else { continue };
        // sol[r][c]: coefficient of regressor r for output coordinate c
        let a = [[sol[0][0], sol[1][0]], [sol[0][1], sol[1][1]]];
        if a.iter().flatten().all(|v| v.is_finite()) && deformation(&a) <= cfg.max_deformation {
            field.maps[k] = a;
            field.offsets[k] = [sol[2][0], sol[2][1]];
        }
    }
    Ok(field)
}

/// Pixels of `mask` whose displacement magnitude exceeds `tau`.
pub fn select_regions(mask: &Mask, field: &AffineField, tau: f64) -> Result<Mask> {
    if !(tau >= 0.0) {
        return Err(Error::param("tau must be non-negative"));
    }
    let mut out = Mask::new(mask.height, mask.width);
    for (y, x) in mask.iter_set() {
        let d = field.displacement([x as f64, y as f64]);
        if d[0].hypot(d[1]) > tau {
            out.set(y, x, true);
        }
    }
    Ok(out)
}

/// Bilinear sample of channel `c` at `(x, y)`, clamping to the border.
pub fn sample_bilinear(f: &Frame, x: f64, y: f64, c: usize) -> f64 {
    let xm = (f.width - 1) as f64;
    let ym = (f.height - 1) as f64;
    let x = x.clamp(0.0, xm);
    let y = y.clamp(0.0, ym);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(f.width - 1), (y0 + 1).min(f.height - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let g = |yy: usize, xx: usize| f.get(yy, xx, c) as f64;
    (1.0 - fy) * ((1.0 - fx) * g(y0, x0) + fx * g(y0, x1)) + fy * ((1.0 - fx) * g(y1, x0) + fx * g(y1, x1))
}

/// Backward warp: inside `region`, sample `source` at `z - D(z)`; elsewhere
/// copy `fallback`.
pub fn warp_compensate(source: &Frame, fallback: &Frame, region: &Mask, field: &AffineField) -> Result<Frame> {
    if !source.same_shape(fallback) || region.height != source.height || region.width != source.width {
        return Err(Error::param("warp inputs disagree in shape"));
    }
    let mut out = fallback.clone();
    for (y, x) in region.iter_set() {
        let d = field.displacement([x as f64, y as f64]);
        let (sx, sy) = (x as f64 - d[0], y as f64 - d[1]);
        for c in 0..source.channels {
            let v = sample_bilinear(source, sx, sy, c);
            out.set(y, x, c, v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

/// Mean displacement magnitude over the mask; 0 for an empty mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowStats {
    pub noise: f64,
}

pub fn flow_noise_score(mask: &Mask, field: &AffineField) -> FlowStats {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (y, x) in mask.iter_set() {
        let d = field.displacement([x as f64, y as f64]);
        sum += d[0].hypot(d[1]);
        n += 1;
    }
    FlowStats {
        noise: if n == 0 { 0.0 } else { sum / n as f64 },
    }
}

fn pair_mask(a: &Frame, b: &Frame, cfg: &AtocConfig) -> Result<Mask> {
    let diff = abs_diff_image(a, b)?;
    let delta = match cfg.delta {
        Some(d) => d,
        None => {
            let th = auto_threshold(&diff)?;
            if th.degenerate {
                return Ok(Mask::new(a.height, a.width));
            }
            th.value
        }
    };
    Ok(refine_mask(&mask_above(&diff, a.height, a.width, delta)))
}

/// A compensated clip together with the region used at each frame
/// (frame 0 has an empty region).
#[derive(Debug, Clone, PartialEq)]
pub struct Compensated {
    pub video: Video,
    pub regions: Vec<Mask>,
}

fn check_aligned(video: &Video, track: &KeypointTrack) -> Result<()> {
    if video.frames() != track.frames() {
        return Err(Error::param(format!(
            "{} frames but {} keypoint samples",
            video.frames(),
            track.frames()
        )));
    }
    Ok(())
}

/// Register every frame of a movement clip onto frame 0 inside its motion
/// region; other scenarios pass through unchanged.
///
/// For frame `t` the field maps frame-0 keypoints to frame-`t` keypoints,
/// the mask is the refined motion mask between frames 0 and `t`, and the
/// region keeps mask pixels moving by more than `tau`. Inside the region the
/// output is `I_t(z + D(z))`, so skin stays where it was at frame 0 while
/// keeping the colour it has at time `t`.
pub fn compensate_sequence(
    video: &Video,
    track: &KeypointTrack,
    scenario: Scenario,
    cfg: &AtocConfig,
) -> Result<Compensated> {
    check_aligned(video, track)?;
    let empty = Mask::new(video.height(), video.width());
    if scenario != Scenario::Movement || video.frames() < 2 {
        return Ok(Compensated {
            video: video.clone(),
            regions: vec![empty; video.frames()],
        });
    }
    let reference = video.frame_owned(0);
    let kp0 = track.at(0);
    let mut out = video.clone();
    let mut regions = vec![empty];
    for t in 1..video.frames() {
        let cur = video.frame_owned(t);
        let forward = estimate_affine(&kp0, &track.at(t), cfg)?;
        let mask = pair_mask(&reference, &cur, cfg)?;
        let region = select_regions(&mask, &forward, cfg.tau)?;
        let warped = warp_compensate(&cur, &cur, &region, &forward.negated())?;
        out.set_frame(t, &warped);
        regions.push(region);
    }
    Ok(Compensated { video: out, regions })
}

/// Clip-level flow-noise score: per adjacent pair, the mean displacement
/// over the refined motion mask, averaged over pairs.
pub fn view_flow_noise(video: &Video, track: &KeypointTrack, cfg: &AtocConfig) -> Result<f64> {
    check_aligned(video, track)?;
    if video.frames() < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut prev = video.frame_owned(0);
    for t in 1..video.frames() {
        let cur = video.frame_owned(t);
        let field = estimate_affine(&track.at(t - 1), &track.at(t), cfg)?;
        let mask = pair_mask(&prev, &cur, cfg)?;
        total += flow_noise_score(&mask, &field).noise;
        prev = cur;
    }
    Ok(total / (video.frames() - 1) as f64)
}

/// Mean squared temporal difference (channel-averaged) between consecutive
/// frames, restricted to `regions[t]` for frame pair `(t-1, t)`.
pub fn region_residual_energy(video: &Video, regions: &[Mask]) -> Result<f64> {
    if regions.len() != video.frames() {
        return Err(Error::param("one region per frame required"));
    }
    let c = video.channels();
    let w = video.width();
    let (mut sum, mut n) = (0.0, 0usize);
    for t in 1..video.frames() {
        let (a, b) = (video.frame(t - 1), video.frame(t));
        for (y, x) in regions[t].iter_set() {
            let i = (y * w + x) * c;
            for ch in 0..c {
                let d = b[i + ch] as f64 - a[i + ch] as f64;
                sum += d * d / c as f64;
            }
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Write each mask as `mask_{t:04}.pgm` under `dir`.
pub fn dump_masks(dir: &Path, masks: &[Mask]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (t, m) in masks.iter().enumerate() {
        std::fs::write(dir.join(format!("mask_{t:04}.pgm")), m.to_pgm())?;
    }
    Ok(())
}
