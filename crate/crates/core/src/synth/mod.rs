//! Synthetic three-view facial-patch clips with known pulse, head motion,
//! view-dependent visibility and keypoint tracks.
//!
//! A textured skin patch is rendered in head coordinates and mapped into
//! each view by a per-frame global affine transform. Pulse modulates the
//! skin multiplicatively with per-channel gains, scaled by the view's
//! visibility `max(0, cos(yaw - view_angle))`; below [`OCCLUSION_THRESHOLD`]
//! the patch is replaced by the static background of that view.

mod dataset;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::TimeSeries;
use crate::video::{Frame, KeypointTrack, Mask, Video};

pub use dataset::{read_dataset, write_dataset, DatasetManifest, ManifestEntry, FORMAT_VERSION};

/// Relative pulsatile gains for (R, G, B).
pub const CHANNEL_GAINS: [f64; 3] = [0.5, 1.0, 0.7];
/// Visibility below which a view's skin patch is hidden.
pub const OCCLUSION_THRESHOLD: f64 = 0.2;
/// Keypoint grid is `KEYPOINT_GRID × KEYPOINT_GRID`.
pub const KEYPOINT_GRID: usize = 4;
/// Amplitude of the second harmonic relative to the fundamental.
pub const HARMONIC_AMPLITUDE: f64 = 0.3;

const SKIN_RGB: [f64; 3] = [0.78, 0.56, 0.46];
const BACKGROUND_RGB: [f64; 3] = [0.34, 0.38, 0.44];
/// Skin ellipse radii as fractions of (width, height).
const SKIN_RADII: [f64; 2] = [0.27, 0.33];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Left,
    Center,
    Right,
}

impl View {
    pub const ALL: [View; 3] = [View::Left, View::Center, View::Right];

    pub fn angle_deg(self) -> f64 {
        match self {
            View::Left => -45.0,
            View::Center => 0.0,
            View::Right => 45.0,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn letter(self) -> char {
        match self {
            View::Left => 'l',
            View::Center => 'c',
            View::Right => 'r',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Stationary,
    Speaking,
    Movement,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Stationary, Scenario::Speaking, Scenario::Movement];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Stationary => "stationary",
            Scenario::Speaking => "speaking",
            Scenario::Movement => "movement",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stationary" => Ok(Scenario::Stationary),
            "speaking" => Ok(Scenario::Speaking),
            "movement" => Ok(Scenario::Movement),
            other => Err(Error::Config(format!("unknown scenario `{other}`"))),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub scenario: Scenario,
    /// Heart rate at t = 0, bpm.
    pub hr_base: f64,
    /// Linear drift, bpm per minute.
    pub hr_drift: f64,
    pub fps: f64,
    pub duration_s: f64,
    pub height: usize,
    pub width: usize,
    /// Relative modulation depth of the pulse on skin pixels.
    pub ppg_amplitude: f64,
    /// Gaussian pixel noise std in normalized intensity units (1.0 = 255).
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Stationary,
            hr_base: 72.0,
            hr_drift: 0.0,
            fps: 30.0,
            duration_s: 10.0,
            height: 32,
            width: 32,
            ppg_amplitude: 0.03,
            noise_sigma: 1.0 / 255.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn frame_count(&self) -> usize {
        (self.duration_s * self.fps).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0) {
            return Err(Error::param("fps must be positive"));
        }
        if !(self.duration_s > 0.0) || self.frame_count() < 2 {
            return Err(Error::param("duration must cover at least two frames"));
        }
        if !(self.ppg_amplitude > 0.0 && self.ppg_amplitude <= 0.2) {
            return Err(Error::param("ppg_amplitude must lie in (0, 0.2]"));
        }
        if !(48.0..=180.0).contains(&self.hr_base) {
            return Err(Error::param("hr_base must lie in [48, 180] bpm"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::param("noise_sigma must be non-negative"));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::param(format!(
                "resolution {}x{} below the 32x32 minimum",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn hr_trace(&self) -> Vec<f64> {
        (0..self.frame_count())
            .map(|i| {
                let t = i as f64 / self.fps;
                // single precision so the trace survives `MVS1` unchanged
                let hr = (self.hr_base + self.hr_drift * t / 60.0).clamp(42.0, 240.0);
                (hr as f32) as f64
            })
            .collect()
    }
}

/// 2-D affine map acting about the image centre: `z' = A (z - c) + c + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalAffine {
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
}

impl GlobalAffine {
    pub const IDENTITY: GlobalAffine = GlobalAffine {
        a: [[1.0, 0.0], [0.0, 1.0]],
        b: [0.0, 0.0],
    };

    pub fn apply(&self, z: [f64; 2], center: [f64; 2]) -> [f64; 2] {
        let d = [z[0] - center[0], z[1] - center[1]];
        [
            self.a[0][0] * d[0] + self.a[0][1] * d[1] + center[0] + self.b[0],
            self.a[1][0] * d[0] + self.a[1][1] * d[1] + center[1] + self.b[1],
        ]
    }

    pub fn apply_inverse(&self, z: [f64; 2], center: [f64; 2]) -> [f64; 2] {
        let [[a, b], [c, d]] = self.a;
        let det = a * d - b * c;
        let r = [z[0] - center[0] - self.b[0], z[1] - center[1] - self.b[1]];
        [
            (d * r[0] - b * r[1]) / det + center[0],
            (-c * r[0] + a * r[1]) / det + center[1],
        ]
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrajectory {
    pub affine: Vec<GlobalAffine>,
    pub yaw_deg: Vec<f64>,
}

/// Visibility gain of a view for a head yaw.
pub fn visibility(yaw_deg: f64, view: View) -> f64 {
    ((yaw_deg - view.angle_deg()).to_radians()).cos().max(0.0)
}

/// A sum of low-frequency sinusoids; every component is below 0.5 Hz.
struct SlowWave {
    parts: Vec<(f64, f64, f64)>,
}

impl SlowWave {
    fn random(rng: &mut ChaCha8Rng, amps: &[f64], f_lo: f64, f_hi: f64) -> Self {
        let parts = amps
            .iter()
            .map(|&a| (a, rng.gen_range(f_lo..f_hi), rng.gen_range(0.0..2.0 * PI)))
            .collect();
        Self { parts }
    }

    fn at(&self, t: f64) -> f64 {
        self.parts
            .iter()
            .map(|&(a, f, p)| a * (2.0 * PI * f * t + p).sin())
            .sum()
    }
}

fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Scenario-dependent head motion sampled at `fps`.
///
/// All components are sinusoids below 0.5 Hz so that motion stays out of
/// the 0.7–4.0 Hz pulse band.
pub fn gen_head_trajectory(
    scenario: Scenario,
    frames: usize,
    fps: f64,
    max_translation: f64,
    seed: u64,
) -> Result<HeadTrajectory> {
    if frames < 2 {
        return Err(Error::param("trajectory needs at least two frames"));
    }
    let mut rng = sub_rng(seed, 1);
    let times = (0..frames).map(|i| i as f64 / fps);
    match scenario {
        Scenario::Stationary => Ok(HeadTrajectory {
            affine: vec![GlobalAffine::IDENTITY; frames],
            yaw_deg: vec![0.0; frames],
        }),
        Scenario::Speaking => {
            // |b| <= sqrt(2) * 0.7 < 1 px, |yaw| <= 4.5 deg
            let bx = SlowWave::random(&mut rng, &[0.45, 0.25], 0.1, 0.45);
            let by = SlowWave::random(&mut rng, &[0.45, 0.25], 0.1, 0.45);
            let yaw = SlowWave::random(&mut rng, &[3.0, 1.5], 0.1, 0.4);
            let mut affine = Vec::with_capacity(frames);
            let mut yaw_deg = Vec::with_capacity(frames);
            for t in times {
                affine.push(GlobalAffine {
                    a: GlobalAffine::IDENTITY.a,
                    b: [bx.at(t), by.at(t)],
                });
                yaw_deg.push(yaw.at(t));
            }
            Ok(HeadTrajectory { affine, yaw_deg })
        }
        Scenario::Movement => {
            let duration = frames as f64 / fps;
            // At least one full sweep per clip, never above 0.45 Hz.
            let f_sweep = rng.gen_range(0.12..0.25_f64).max(1.05 / duration).min(0.45);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let yaw_amp = rng.gen_range(32.0..44.0);
            let tx_amp = 0.8 * max_translation;
            let ty = SlowWave::random(&mut rng, &[0.25 * max_translation], 0.08, 0.3);
            let roll = SlowWave::random(&mut rng, &[3.0_f64.to_radians()], 0.08, 0.3);
            let scale = SlowWave::random(&mut rng, &[0.03], 0.08, 0.3);
            let mut affine = Vec::with_capacity(frames);
            let mut yaw_deg = Vec::with_capacity(frames);
            for t in times {
                let sweep = (2.0 * PI * f_sweep * t + phase).sin();
                let (s, r) = (1.0 + scale.at(t), roll.at(t));
                affine.push(GlobalAffine {
                    a: [[s * r.cos(), -s * r.sin()], [s * r.sin(), s * r.cos()]],
                    b: [tx_amp * sweep, ty.at(t)],
                });
                yaw_deg.push(yaw_amp * sweep);
            }
            Ok(HeadTrajectory { affine, yaw_deg })
        }
    }
}

/// Synthetic fingertip-PPG stand-in: fundamental at the instantaneous heart
/// rate plus a second harmonic, by phase integration, scaled to unit peak.
///
/// Samples are rounded to single precision so that they survive the `MVS1`
/// container unchanged.
pub fn gen_ppg_waveform(hr_trace: &[f64], fps: f64, seed: u64) -> Result<TimeSeries> {
    if hr_trace.len() < 2 {
        return Err(Error::param("heart-rate trace needs at least two samples"));
    }
    if let Some(bad) = hr_trace.iter().find(|h| !(42.0..=240.0).contains(*h)) {
        return Err(Error::param(format!("heart rate {bad} bpm outside [42, 240]")));
    }
    let mut rng = sub_rng(seed, 2);
    let mut phase: f64 = rng.gen_range(0.0..2.0 * PI);
    let dicrotic = 0.5 * PI;
    let mut wave = Vec::with_capacity(hr_trace.len());
    for hr in hr_trace {
        wave.push(phase.sin() + HARMONIC_AMPLITUDE * (2.0 * phase + dicrotic).sin());
        phase += 2.0 * PI * hr / 60.0 / fps;
    }
    let peak = wave.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let wave = wave.into_iter().map(|v| ((v / peak) as f32) as f64).collect();
    TimeSeries::new(wave, fps)
}

/// Smooth pseudo-texture, roughly in [-1, 1].
#[derive(Debug, Clone)]
struct Texture {
    parts: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, n: usize, k_lo: f64, k_hi: f64) -> Self {
        let parts = (0..n)
            .map(|_| {
                let k = rng.gen_range(k_lo..k_hi);
                let theta = rng.gen_range(0.0..PI);
                (k * theta.cos(), k * theta.sin(), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.5..1.0))
            })
            .collect();
        Self { parts }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let norm: f64 = self.parts.iter().map(|p| p.3).sum();
        self.parts
            .iter()
            .map(|&(kx, ky, ph, a)| a * (kx * x + ky * y + ph).sin())
            .sum::<f64>()
            / norm
    }
}

fn center_of(height: usize, width: usize) -> [f64; 2] {
    [(width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0]
}

/// Soft skin coverage in [0, 1] at head coordinates `u` (one-pixel ramp).
fn skin_coverage(u: [f64; 2], height: usize, width: usize) -> f64 {
    let c = center_of(height, width);
    let (rx, ry) = (SKIN_RADII[0] * width as f64, SKIN_RADII[1] * height as f64);
    let (dx, dy) = ((u[0] - c[0]) / rx, (u[1] - c[1]) / ry);
    let r = (dx * dx + dy * dy).sqrt();
    // signed distance to the ellipse edge, approximately in pixels
    let dist = (1.0 - r) * rx.min(ry);
    (dist + 0.5).clamp(0.0, 1.0)
}

/// Skin region of the head at its reference (identity) pose.
pub fn skin_region(height: usize, width: usize) -> Mask {
    let mut m = Mask::new(height, width);
    for y in 0..height {
        for x in 0..width {
            m.set(y, x, skin_coverage([x as f64, y as f64], height, width) >= 0.5);
        }
    }
    m
}

/// Keypoints on a 4×4 grid spanning the skin ellipse, reference pose.
pub fn reference_keypoints(height: usize, width: usize) -> Vec<[f64; 2]> {
    let c = center_of(height, width);
    let (rx, ry) = (SKIN_RADII[0] * width as f64, SKIN_RADII[1] * height as f64);
    let g = KEYPOINT_GRID;
    let offs: Vec<f64> = (0..g)
        .map(|i| -0.6 + 1.2 * i as f64 / (g - 1) as f64)
        .collect();
    let mut pts = Vec::with_capacity(g * g);
    for &oy in &offs {
        for &ox in &offs {
            pts.push([c[0] + ox * rx, c[1] + oy * ry]);
        }
    }
    pts
}

/// Three synchronized views of one synthetic recording.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewClip {
    pub config: SceneConfig,
    /// Indexed by [`View::index`].
    pub frames: [Video; 3],
    pub keypoints: [KeypointTrack; 3],
    pub gt_ppg: TimeSeries,
    pub hr_trace: Vec<f64>,
    pub view_angles: [f64; 3],
}

impl MultiViewClip {
    pub fn frame_count(&self) -> usize {
        self.gt_ppg.len()
    }

    pub fn fps(&self) -> f64 {
        self.config.fps
    }

    pub fn view(&self, v: View) -> &Video {
        &self.frames[v.index()]
    }

    /// Frames `[start, end)` of every stream.
    pub fn window(&self, start: usize, end: usize) -> Result<MultiViewClip> {
        let frames = [
            self.frames[0].window(start, end)?,
            self.frames[1].window(start, end)?,
            self.frames[2].window(start, end)?,
        ];
        let keypoints = [
            self.keypoints[0].window(start, end)?,
            self.keypoints[1].window(start, end)?,
            self.keypoints[2].window(start, end)?,
        ];
        Ok(MultiViewClip {
            config: self.config.clone(),
            frames,
            keypoints,
            gt_ppg: self.gt_ppg.slice(start, end)?,
            hr_trace: self.hr_trace[start..end].to_vec(),
            view_angles: self.view_angles,
        })
    }
}

/// Render a clip from its configuration. Deterministic in `config.seed`.
pub fn render_clip(config: &SceneConfig) -> Result<MultiViewClip> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let frames_n = config.frame_count();
    let hr_trace = config.hr_trace();
    let gt_ppg = gen_ppg_waveform(&hr_trace, config.fps, config.seed)?;
    let max_translation = (0.2 * h.min(w) as f64).min(8.0);
    let traj = gen_head_trajectory(config.scenario, frames_n, config.fps, max_translation, config.seed)?;

    let center = center_of(h, w);
    let ref_kp = reference_keypoints(h, w);
    let kp_frames: Vec<Vec<[f64; 2]>> = traj
        .affine
        .iter()
        .map(|a| ref_kp.iter().map(|&p| a.apply(p, center)).collect())
        .collect();
    let track = KeypointTrack::from_frames(&kp_frames)?;

    let scale = h.min(w) as f64;
    let mut tex_rng = sub_rng(config.seed, 3);
    let skin_tex = Texture::random(&mut tex_rng, 4, 6.0 / scale, 14.0 / scale);

    let noise = Normal::new(0.0, config.noise_sigma.max(0.0)).map_err(|e| Error::param(e.to_string()))?;
    let mut views = Vec::with_capacity(3);
    for view in View::ALL {
        let mut bg_rng = sub_rng(config.seed, 10 + view.index() as u64);
        let bg_tex = Texture::random(&mut bg_rng, 3, 5.0 / scale, 12.0 / scale);
        let mut noise_rng = sub_rng(config.seed, 20 + view.index() as u64);
        let background: Vec<[f64; 3]> = (0..h * w)
            .map(|i| {
                let v = bg_tex.at((i % w) as f64, (i / w) as f64);
                let mut px = [0.0; 3];
                for (c, out) in px.iter_mut().enumerate() {
                    *out = BACKGROUND_RGB[c] * (1.0 + 0.15 * v);
                }
                px
            })
            .collect();

        let mut video = Video::zeros(frames_n, h, w, 3);
        for t in 0..frames_n {
            let vis = visibility(traj.yaw_deg[t], view);
            let occluded = vis < OCCLUSION_THRESHOLD;
            let pulse = config.ppg_amplitude * vis * gt_ppg.samples()[t];
            let affine = traj.affine[t];
            let frame = video.frame_mut(t);
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let u = affine.apply_inverse([x as f64, y as f64], center);
                    let cover = if occluded { 0.0 } else { skin_coverage(u, h, w) };
                    let tex = if cover > 0.0 { skin_tex.at(u[0], u[1]) } else { 0.0 };
                    for c in 0..3 {
                        let bg = background[i][c];
                        let skin = SKIN_RGB[c] * (1.0 + 0.12 * tex) * (1.0 + CHANNEL_GAINS[c] * pulse);
                        let mut v = cover * skin + (1.0 - cover) * bg;
                        if config.noise_sigma > 0.0 {
                            v += noise.sample(&mut noise_rng);
                        }
                        frame[i * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                }
            }
        }
        views.push(video);
    }
    let frames: [Video; 3] = views.try_into().expect("three views");
    Ok(MultiViewClip {
        config: config.clone(),
        frames,
        keypoints: [track.clone(), track.clone(), track],
        gt_ppg,
        hr_trace,
        view_angles: View::ALL.map(View::angle_deg),
    })
}

/// A rendered clip with its dataset identity.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub id: String,
    pub subject: u32,
    pub clip: MultiViewClip,
}

/// Recipe for a benchmark: subjects × scenarios, each subject with its own
/// resting heart rate and drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub subjects: u32,
    pub scenarios: Vec<Scenario>,
    pub duration_s: f64,
    pub fps: f64,
    pub height: usize,
    pub width: usize,
    pub ppg_amplitude: f64,
    pub noise_sigma: f64,
    /// Heart rates are drawn uniformly from this range, bpm.
    pub hr_range: [f64; 2],
    /// Drift drawn uniformly from `[-max, max]`, bpm per minute.
    pub max_drift: f64,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            subjects: 8,
            scenarios: Scenario::ALL.to_vec(),
            duration_s: 10.0,
            fps: 30.0,
            height: 32,
            width: 32,
            ppg_amplitude: 0.03,
            noise_sigma: 1.0 / 255.0,
            hr_range: [55.0, 110.0],
            max_drift: 3.0,
            seed: 2024,
        }
    }
}

impl BenchmarkSpec {
    /// Per-clip configurations, ordered by subject then scenario.
    pub fn scene_configs(&self) -> Vec<(String, u32, SceneConfig)> {
        let mut rng = sub_rng(self.seed, 0);
        let mut out = Vec::new();
        for subject in 0..self.subjects {
            let hr_base = rng.gen_range(self.hr_range[0]..=self.hr_range[1]);
            let hr_drift = if self.max_drift > 0.0 {
                rng.gen_range(-self.max_drift..=self.max_drift)
            } else {
                0.0
            };
            for &scenario in &self.scenarios {
                let seed = rng.gen::<u64>();
                let cfg = SceneConfig {
                    scenario,
                    hr_base,
                    hr_drift,
                    fps: self.fps,
                    duration_s: self.duration_s,
                    height: self.height,
                    width: self.width,
                    ppg_amplitude: self.ppg_amplitude,
                    noise_sigma: self.noise_sigma,
                    seed,
                };
                out.push((format!("s{subject:02}_{}", scenario.name()), subject, cfg));
            }
        }
        out
    }

    pub fn generate(&self) -> Result<Vec<LabeledClip>> {
        self.scene_configs()
            .into_iter()
            .map(|(id, subject, cfg)| {
                Ok(LabeledClip {
                    id,
                    subject,
                    clip: render_clip(&cfg)?,
                })
            })
            .collect()
    }
}

/// Spatial mean of each channel over `mask` for frame `t`.
pub fn masked_mean(frame: &Frame, mask: &Mask) -> [f64; 3] {
    let mut acc = [0.0; 3];
    let mut n = 0usize;
    for (y, x) in mask.iter_set() {
        for (c, a) in acc.iter_mut().enumerate() {
            *a += frame.get(y, x, c) as f64;
        }
        n += 1;
    }
    acc.map(|a| a / n.max(1) as f64)
}
