//! Turning rendered clips into model-ready windows: view masking, motion
//! compensation, flow-noise weights and pooled input tensors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::atoc::{compensate_sequence, view_flow_noise, AtocConfig};
use crate::diffcore::Tensor;
use crate::dualstream::{frames_to_tensor, pool_spatial};
use crate::error::{Error, Result};
use crate::mvca::{flow_noise_weights_masked, ViewWeights, VIEWS};
use crate::signal::{estimate_hr, standardize, TimeSeries, DEFAULT_NFFT};
use crate::synth::{LabeledClip, Scenario, View};

/// Which of the left, center and right cameras are available.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ViewMask([bool; VIEWS]);

impl ViewMask {
    pub const ALL: Self = Self([true; VIEWS]);

    pub fn new(available: [bool; VIEWS]) -> Result<Self> {
        if !available.contains(&true) {
            return Err(Error::Config("at least one view must be available".into()));
        }
        Ok(Self(available))
    }

    pub fn available(&self) -> [bool; VIEWS] {
        self.0
    }

    pub fn has(&self, view: View) -> bool {
        self.0[view.index()]
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&a| a).count()
    }
}

impl FromStr for ViewMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut avail = [false; VIEWS];
        for ch in s.chars() {
            let v = View::ALL
                .into_iter()
                .find(|v| v.letter() == ch)
                .ok_or_else(|| Error::Config(format!("unknown view `{ch}` in `{s}`; use l, c, r")))?;
            if avail[v.index()] {
                return Err(Error::Config(format!("view `{ch}` repeated in `{s}`")));
            }
            avail[v.index()] = true;
        }
        Self::new(avail)
    }
}

impl fmt::Display for ViewMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in View::ALL {
            if self.has(v) {
                write!(f, "{}", v.letter())?;
            }
        }
        Ok(())
    }
}

impl TryFrom<String> for ViewMask {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ViewMask> for String {
    fn from(m: ViewMask) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepConfig {
    /// Frames per window.
    pub window: usize,
    /// Motion compensation and flow-noise weights; without it views are
    /// weighted uniformly.
    pub use_atoc: bool,
    pub atoc: AtocConfig,
    pub input_pool: usize,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            window: 300,
            use_atoc: true,
            atoc: AtocConfig::default(),
            input_pool: 4,
        }
    }
}

/// One model-ready window.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub clip_id: String,
    pub start: usize,
    pub scenario: Scenario,
    /// Pooled frames `[3 views, 3, T, h, w]` in `[-1, 1]`; masked views are 0.
    pub frames: Tensor<f32>,
    pub weights: ViewWeights,
    pub flow_noise: [f64; VIEWS],
    /// Standardized ground-truth pulse for the window.
    pub gt: Vec<f64>,
    pub gt_hr: f64,
    pub fs: f64,
}

impl Sample {
    pub fn id(&self) -> String {
        format!("{}@{}", self.clip_id, self.start)
    }

    pub fn frames_len(&self) -> usize {
        self.gt.len()
    }
}

/// Cut a clip into non-overlapping windows; a tail shorter than the window
/// is dropped.
pub fn prepare_windows(clip: &LabeledClip, mask: ViewMask, cfg: &PrepConfig) -> Result<Vec<Sample>> {
    let c = &clip.clip;
    let total = c.frame_count();
    if cfg.window == 0 || total < cfg.window {
        return Err(Error::param(format!(
            "clip {} has {total} frames, window needs {}",
            clip.id, cfg.window
        )));
    }
    (0..total / cfg.window)
        .map(|w| prepare_window(clip, w * cfg.window, mask, cfg))
        .collect()
}

pub fn prepare_window(clip: &LabeledClip, start: usize, mask: ViewMask, cfg: &PrepConfig) -> Result<Sample> {
    let c = clip.clip.window(start, start + cfg.window)?;
    let scenario = c.config.scenario;
    let mut videos = Vec::with_capacity(VIEWS);
    let mut noise = [0.0; VIEWS];
    for v in View::ALL {
        let raw = c.view(v);
        let track = &c.keypoints[v.index()];
        if cfg.use_atoc && mask.has(v) {
            noise[v.index()] = view_flow_noise(raw, track, &cfg.atoc)?;
            videos.push(compensate_sequence(raw, track, scenario, &cfg.atoc)?.video);
        } else {
            videos.push(raw.clone());
        }
    }
    let refs: Vec<_> = videos.iter().collect();
    let full: Tensor<f32> = frames_to_tensor(&refs)?;
    let mut frames = pool_spatial(&full, cfg.input_pool)?;
    let per_view = frames.numel() / VIEWS;
    for v in View::ALL.into_iter().filter(|&v| !mask.has(v)) {
        let i = v.index();
        frames.data_mut()[i * per_view..(i + 1) * per_view].fill(0.0);
    }
    let weights = if cfg.use_atoc {
        flow_noise_weights_masked(noise, mask.available(), crate::mvca::WEIGHT_EPS)?
    } else {
        ViewWeights::uniform(mask.available())?
    };
    let gt_hr = estimate_hr(&c.gt_ppg, DEFAULT_NFFT)?.bpm();
    let (gt, degenerate) = standardize(c.gt_ppg.samples());
    if degenerate {
        return Err(Error::InvalidSignal(format!("constant ground truth in {}", clip.id)));
    }
    Ok(Sample {
        clip_id: clip.id.clone(),
        start,
        scenario,
        frames,
        weights,
        flow_noise: noise,
        gt,
        gt_hr,
        fs: c.fps(),
    })
}

pub fn prepare_all(clips: &[LabeledClip], mask: ViewMask, cfg: &PrepConfig) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for clip in clips {
        out.extend(prepare_windows(clip, mask, cfg)?);
    }
    Ok(out)
}

/// First `fraction` of the clips (in the given order) for training, the rest
/// for testing.
pub fn split_clips(clips: &[LabeledClip], fraction: f64) -> Result<(&[LabeledClip], &[LabeledClip])> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} outside (0, 1)")));
    }
    let n = ((clips.len() as f64) * fraction).floor() as usize;
    if n == 0 || n == clips.len() {
        return Err(Error::Config(format!(
            "split {fraction} of {} clips leaves an empty side",
            clips.len()
        )));
    }
    Ok(clips.split_at(n))
}

/// Ground-truth window as a series, for plotting and checks.
pub fn gt_series(sample: &Sample) -> Result<TimeSeries> {
    TimeSeries::new(sample.gt.clone(), sample.fs)
}
