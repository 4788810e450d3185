//! Alternating discriminator / generator training and window evaluation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cfa::{
    disc_loss_graph, gen_loss_graph, pearson_loss_graph, psd_loss_graph, standardize_rows, Discriminator,
    LossConfig, SpectralBasis,
};
use crate::diffcore::{AdamConfig, Graph, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::model::{FusionModel, ModelConfig};
use crate::mvca::{predict_rppg, segment_len, segment_rows, segment_targets};
use crate::pipeline::Sample;
use crate::signal::{estimate_hr, standardize, HrEstimate, TimeSeries, DEFAULT_NFFT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub disc_lr: f64,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-4,
            disc_lr: 1e-4,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let l = &self.loss;
        if !(l.use_pearson || l.use_psd || l.use_adversarial) {
            return Err(Error::Config("every loss term is disabled".into()));
        }
        if !(self.lr >= 0.0 && self.disc_lr >= 0.0) || self.epochs == 0 {
            return Err(Error::Config("learning rates must be >= 0 and epochs > 0".into()));
        }
        if l.lambda_psd < 0.0 || l.lambda_g < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_pearson: f64,
    pub l_psd: f64,
    pub l_g: f64,
    pub l_d: f64,
    pub l_total: f64,
    pub lr: f64,
    pub seed: u64,
}

pub const LOG_HEADER: &str = "step,l_pearson,l_psd,l_g,l_d,l_total,lr,seed";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:e},{}",
            self.step, self.l_pearson, self.l_psd, self.l_g, self.l_d, self.l_total, self.lr, self.seed
        )
    }
}

/// Trained weights plus the run history. On a non-finite loss or gradient,
/// `aborted` names the cause and the weights are those before the failing
/// step.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FusionModel,
    pub store: ParamStore<f32>,
    pub disc_store: ParamStore<f32>,
    pub log: Vec<StepRecord>,
    pub steps_per_epoch: usize,
    pub aborted: Option<String>,
}

impl TrainOutcome {
    /// Mean `l_total` of each epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        self.log
            .chunks(self.steps_per_epoch.max(1))
            .map(|c| c.iter().map(|r| r.l_total).sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// Trailing moving average with window `k` (shorter at the start).
pub fn smooth(values: &[f64], k: usize) -> Vec<f64> {
    let k = k.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(k);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

struct StepLosses {
    l_pearson: f64,
    l_psd: f64,
    l_g: f64,
    l_d: f64,
    l_total: f64,
}

fn check_samples(samples: &[Sample]) -> Result<(usize, f64)> {
    let first = samples.first().ok_or_else(|| Error::param("no training samples"))?;
    let (t, fs) = (first.frames_len(), first.fs);
    if samples.iter().any(|s| s.frames_len() != t || s.fs != fs) {
        return Err(Error::param("training windows differ in length or rate"));
    }
    Ok((t, fs))
}

/// Train from scratch. Writes one CSV row per step to `log` when given.
pub fn train(
    samples: &[Sample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (t, fs) = check_samples(samples)?;
    let k = model_cfg.mvca.segments;
    let len = segment_len(t, k)?;
    let basis = if cfg.loss.use_psd {
        Some(SpectralBasis::new(len, fs, cfg.loss.psd_nfft)?)
    } else {
        None
    };
    let (model, mut store) = FusionModel::new::<f32>(model_cfg, cfg.seed)?;
    let mut disc_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    disc_rng.set_stream(1);
    let mut disc_store = ParamStore::<f32>::new();
    let disc = Discriminator::new(&mut disc_store, "disc", &mut disc_rng)?;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let disc_adam = AdamConfig {
        lr: cfg.disc_lr,
        ..AdamConfig::default()
    };
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{LOG_HEADER}")?;
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle.set_stream(2);
    let mut records = Vec::new();
    let mut aborted = None;
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for &i in &order {
            let step = records.len();
            let before = (store.clone(), disc_store.clone());
            match train_step(&model, &mut store, &disc, &mut disc_store, &samples[i], cfg, basis.as_ref(), &adam, &disc_adam) {
                Ok(l) => {
                    let rec = StepRecord {
                        step,
                        l_pearson: l.l_pearson,
                        l_psd: l.l_psd,
                        l_g: l.l_g,
                        l_d: l.l_d,
                        l_total: l.l_total,
                        lr: cfg.lr,
                        seed: cfg.seed,
                    };
                    if let Some(w) = log.as_deref_mut() {
                        writeln!(w, "{}", rec.csv_row())?;
                    }
                    records.push(rec);
                }
                Err(Error::NonFinite(msg)) => {
                    (store, disc_store) = before;
                    aborted = Some(format!("step {step} ({}): {msg}", samples[i].id()));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(TrainOutcome {
        model,
        store,
        disc_store,
        log: records,
        steps_per_epoch: samples.len(),
        aborted,
    })
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} = {v}")))
    }
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &FusionModel,
    store: &mut ParamStore<f32>,
    disc: &Discriminator,
    disc_store: &mut ParamStore<f32>,
    sample: &Sample,
    cfg: &TrainConfig,
    basis: Option<&SpectralBasis>,
    adam: &AdamConfig,
    disc_adam: &AdamConfig,
) -> Result<StepLosses> {
    let lc = &cfg.loss;
    let t = sample.frames_len();
    let k = model.cfg.mvca.segments;
    let n = model.cfg.mvca.tokens;
    let mut shape = vec![1];
    shape.extend_from_slice(sample.frames.shape());
    let mut g = Graph::<f32>::new();
    let x = g.input(sample.frames.clone().reshaped(&shape)?);
    let out = model.forward(&mut g, store, x, &[sample.weights])?;
    let target: Tensor<f32> = segment_targets(&[&sample.gt], n, t, k)?;
    let f = segment_rows(&mut g, out.s, k)?;
    let fp = segment_rows(&mut g, out.s_prime, k)?;

    let (lp, _) = pearson_loss_graph(&mut g, f, fp, &target, lc.pearson_eps)?;
    let l_pearson = finite(g.value(lp).item()?.as_f64(), "l_pearson")?;
    let mut terms = Vec::new();
    if lc.use_pearson {
        terms.push(lp);
    }
    let mut l_psd = 0.0;
    if let Some(basis) = basis {
        let ls = psd_loss_graph(&mut g, basis, f, fp, &target)?;
        l_psd = finite(g.value(ls).item()?.as_f64(), "l_psd")?;
        terms.push(g.scale(ls, lc.lambda_psd));
    }

    let (mut l_g, mut l_d) = (0.0, 0.0);
    if lc.use_adversarial {
        let y_rows = segment_rows(&mut g, out.y, k)?;
        let fake = standardize_rows(&mut g, y_rows)?;
        let rows = target.shape()[0];
        let len = target.shape()[1];
        let real: Vec<f64> = target
            .to_f64s()
            .chunks(len)
            .flat_map(|r| standardize(r).0)
            .collect();
        let real = Tensor::<f32>::from_f64s(&[rows, len], &real)?;

        // Discriminator step on detached fakes.
        let mut gd = Graph::<f32>::new();
        let r = gd.input(real);
        let fk = gd.input(g.value(fake).clone());
        let dr = disc.forward(&mut gd, disc_store, r)?;
        let df = disc.forward(&mut gd, disc_store, fk)?;
        let ld = disc_loss_graph(&mut gd, dr, df)?;
        l_d = finite(gd.value(ld).item()?.as_f64(), "l_d")?;
        let grads = gd.backward(ld)?;
        disc_store.zero_grad();
        gd.accumulate_param_grads(&grads, disc_store);
        if let Some(name) = disc_store.non_finite_grad() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        disc_store.adam_step(disc_adam);

        let df = disc.forward_frozen(&mut g, disc_store, fake)?;
        let lg = gen_loss_graph(&mut g, df);
        l_g = finite(g.value(lg).item()?.as_f64(), "l_g")?;
        terms.push(g.scale(lg, lc.lambda_g));
    }

    let mut total = terms[0];
    for &term in &terms[1..] {
        total = g.add(total, term)?;
    }
    let l_total = finite(g.value(total).item()?.as_f64(), "l_total")?;
    let grads = g.backward(total)?;
    store.zero_grad();
    g.accumulate_param_grads(&grads, store);
    if let Some(name) = store.non_finite_grad() {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    store.adam_step(adam);
    Ok(StepLosses {
        l_pearson,
        l_psd,
        l_g,
        l_d,
        l_total,
    })
}

/// Heart rate read from one window's prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPrediction {
    pub id: String,
    pub hr_pred: f64,
    pub hr_gt: f64,
    /// No in-band peak; `hr_pred` is then the lower band edge.
    pub no_pulse: bool,
    #[serde(skip)]
    pub rppg: Vec<f64>,
}

pub fn predict_window(model: &FusionModel, store: &ParamStore<f32>, sample: &Sample) -> Result<WindowPrediction> {
    let y = model.predict(store, &sample.frames, sample.weights)?;
    let series = predict_rppg(&y, sample.fs)?.remove(0);
    let (hr_pred, no_pulse) = match estimate_hr(&series, DEFAULT_NFFT) {
        Ok(hr) => (hr.bpm(), false),
        Err(Error::NoPulse) => (HrEstimate::MIN_BPM, true),
        Err(e) => return Err(e),
    };
    Ok(WindowPrediction {
        id: sample.id(),
        hr_pred,
        hr_gt: sample.gt_hr,
        no_pulse,
        rppg: series.into_samples(),
    })
}

pub fn evaluate(model: &FusionModel, store: &ParamStore<f32>, samples: &[Sample]) -> Result<Vec<WindowPrediction>> {
    samples.iter().map(|s| predict_window(model, store, s)).collect()
}

/// Series view of a prediction, for plotting.
pub fn prediction_series(p: &WindowPrediction, fs: f64) -> Result<TimeSeries> {
    TimeSeries::new(p.rppg.clone(), fs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{prepare_all, PrepConfig, ViewMask};
    use crate::synth::{BenchmarkSpec, Scenario};

    fn tiny() -> (Vec<Sample>, ModelConfig) {
        let spec = BenchmarkSpec {
            subjects: 2,
            scenarios: vec![Scenario::Stationary],
            duration_s: 2.2,
            ..BenchmarkSpec::default()
        };
        let clips = spec.generate().unwrap();
        let prep = PrepConfig {
            window: 64,
            ..PrepConfig::default()
        };
        let samples = prepare_all(&clips, ViewMask::ALL, &prep).unwrap();
        let mut mc = ModelConfig::default();
        mc.mvca.segments = 2;
        (samples, mc)
    }

    #[test]
    fn zero_lr_leaves_generator_unchanged_and_logs_are_reproducible() {
        let (samples, mc) = tiny();
        let cfg = TrainConfig {
            epochs: 2,
            lr: 0.0,
            ..TrainConfig::default()
        };
        let (_, init) = FusionModel::new::<f32>(&mc, cfg.seed).unwrap();
        let mut log_a = Vec::new();
        let a = train(&samples, &mc, &cfg, Some(&mut log_a)).unwrap();
        assert_eq!(a.store.to_mvp_bytes(), init.to_mvp_bytes());
        assert_eq!(a.log.len(), 2 * samples.len());
        let mut log_b = Vec::new();
        train(&samples, &mc, &cfg, Some(&mut log_b)).unwrap();
        assert_eq!(log_a, log_b);
        let text = String::from_utf8(log_a).unwrap();
        assert_eq!(text.lines().next().unwrap(), LOG_HEADER);
        assert_eq!(text.lines().count(), 1 + a.log.len());
    }

    #[test]
    fn training_moves_parameters_and_predicts() {
        let (samples, mc) = tiny();
        let cfg = TrainConfig {
            epochs: 1,
            lr: 1e-3,
            disc_lr: 1e-3,
            ..TrainConfig::default()
        };
        let out = train(&samples, &mc, &cfg, None).unwrap();
        assert!(out.aborted.is_none());
        let (_, init) = FusionModel::new::<f32>(&mc, cfg.seed).unwrap();
        assert_ne!(out.store.to_mvp_bytes(), init.to_mvp_bytes());
        for r in &out.log {
            assert!((-1.0..=1.0).contains(&r.l_pearson) && r.l_psd >= 0.0 && r.l_g >= 0.0 && r.l_d >= 0.0);
            let expect = r.l_pearson + r.l_psd + 0.1 * r.l_g;
            assert!((r.l_total - expect).abs() < 1e-4 * (1.0 + expect.abs()));
        }
        let p = evaluate(&out.model, &out.store, &samples).unwrap();
        assert_eq!(p.len(), samples.len());
        assert!(p.iter().all(|p| p.hr_pred.is_finite() && p.rppg.len() == 64));
    }

    #[test]
    fn disabled_losses_are_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.loss.use_pearson = false;
        cfg.loss.use_psd = false;
        cfg.loss.use_adversarial = false;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }
}
