//! End-to-end experiment runs: split a dataset, run a method on the test
//! windows, score heart rates and write the artifacts.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::atoc::{compensate_sequence, view_flow_noise};
use crate::baselines::{chrom, extract_rgb_trace, pos, pose_skin_mask, POS_WINDOW_S};
use crate::error::{Error, Result};
use crate::diffcore::ParamStore;
use crate::model::{FusionMode, FusionModel, ModelConfig};
use crate::mvca::{flow_noise_weights_masked, ViewWeights, WEIGHT_EPS};
use crate::pipeline::{prepare_all, split_clips, PrepConfig, ViewMask};
use crate::plot::{psd_svg, waveform_svg};
use crate::report::{emit_csv, ResultRow};
use crate::signal::{estimate_hr, metrics_bpm, standardize, HrEstimate, TimeSeries, DEFAULT_NFFT};
use crate::synth::{read_dataset, LabeledClip, Scenario, View};
use crate::train::{evaluate, train, StepRecord, TrainConfig, TrainOutcome, WindowPrediction, LOG_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pos,
    Chrom,
    MvrdRppg,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Pos, Method::Chrom, Method::MvrdRppg];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pos => "pos",
            Method::Chrom => "chrom",
            Method::MvrdRppg => "mvrd_rppg",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`; use pos, chrom or mvrd_rppg")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    /// Restricts the test windows; training always sees every scenario.
    pub scenario: Option<Scenario>,
    pub views: ViewMask,
    pub method: Method,
    /// Leading fraction of clips used for training.
    pub split: f64,
    /// Overrides `train.seed`.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub prep: PrepConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            scenario: None,
            views: ViewMask::ALL,
            method: Method::MvrdRppg,
            split: 0.8,
            seed: 0,
            out_dir: PathBuf::from("out"),
            prep: PrepConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::Config(format!("split {} outside (0, 1)", self.split)));
        }
        if self.prep.window < 32 {
            return Err(Error::Config(format!("window of {} frames is below 32", self.prep.window)));
        }
        if self.prep.input_pool != self.model.stream.input_pool {
            return Err(Error::Config(format!(
                "data pooling {} differs from the model's {}",
                self.prep.input_pool, self.model.stream.input_pool
            )));
        }
        self.model.validate()?;
        self.train.validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

/// Component and loss-term arms of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Full,
    NoAtocMvca,
    NoAtoc,
    NoMvca,
    NoPearson,
    NoPsd,
    NoAdversarial,
}

impl Arm {
    pub const ALL: [Arm; 7] = [
        Arm::Full,
        Arm::NoAtocMvca,
        Arm::NoAtoc,
        Arm::NoMvca,
        Arm::NoPearson,
        Arm::NoPsd,
        Arm::NoAdversarial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoAtocMvca => "no_atoc_mvca",
            Arm::NoAtoc => "no_atoc",
            Arm::NoMvca => "no_mvca",
            Arm::NoPearson => "no_pearson",
            Arm::NoPsd => "no_psd",
            Arm::NoAdversarial => "no_adversarial",
        }
    }

    /// The base configuration with this arm's component or loss removed.
    pub fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        c.method = Method::MvrdRppg;
        match self {
            Arm::Full => {}
            Arm::NoAtocMvca => {
                c.prep.use_atoc = false;
                c.model.fusion = FusionMode::Mean;
            }
            Arm::NoAtoc => c.prep.use_atoc = false,
            Arm::NoMvca => c.model.fusion = FusionMode::Mean,
            Arm::NoPearson => c.train.loss.use_pearson = false,
            Arm::NoPsd => c.train.loss.use_psd = false,
            Arm::NoAdversarial => c.train.loss.use_adversarial = false,
        }
        c
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation arm `{s}`")))
    }
}

/// One scored test window with the signals needed for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub prediction: WindowPrediction,
    pub scenario: Scenario,
    /// Standardized reference pulse.
    pub gt: Vec<f64>,
    pub fs: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub row: ResultRow,
    pub records: Vec<EvalRecord>,
    /// Training log of the learned method.
    pub log: Option<Vec<StepRecord>>,
    pub model_bytes: Option<Vec<u8>>,
}

impl ExperimentOutcome {
    pub fn mae(&self) -> f64 {
        self.row.mae
    }
}

/// Heart-rate readout with a missing in-band peak mapped to the band edge.
fn readout(series: &TimeSeries) -> Result<(f64, bool)> {
    match estimate_hr(series, DEFAULT_NFFT) {
        Ok(hr) => Ok((hr.bpm(), false)),
        Err(Error::NoPulse) => Ok((HrEstimate::MIN_BPM, true)),
        Err(e) => Err(e),
    }
}

/// A classical method on one window: per available view, optional motion
/// compensation, the skin mask at the window's first pose, the projection,
/// then a weighted sum of the standardized view signals.
pub fn baseline_window(
    clip: &LabeledClip,
    start: usize,
    views: ViewMask,
    prep: &PrepConfig,
    method: Method,
) -> Result<EvalRecord> {
    let c = clip.clip.window(start, start + prep.window)?;
    let (fs, scenario) = (c.fps(), c.config.scenario);
    let mut noise = [0.0; 3];
    let mut signals: Vec<(usize, Vec<f64>)> = Vec::new();
    for v in View::ALL.into_iter().filter(|&v| views.has(v)) {
        let (raw, track) = (c.view(v), &c.keypoints[v.index()]);
        let video = if prep.use_atoc {
            noise[v.index()] = view_flow_noise(raw, track, &prep.atoc)?;
            compensate_sequence(raw, track, scenario, &prep.atoc)?.video
        } else {
            raw.clone()
        };
        let roi = pose_skin_mask(track, 0, video.height(), video.width())?;
        let trace = extract_rgb_trace(&video, &roi, fs)?;
        let s = match method {
            Method::Pos => pos(&trace, POS_WINDOW_S),
            Method::Chrom => chrom(&trace),
            Method::MvrdRppg => return Err(Error::Config("mvrd_rppg is not a classical method".into())),
        };
        match s {
            Ok(s) => signals.push((v.index(), s.into_samples())),
            // a fully occluded view carries no colour change
            Err(Error::Degenerate(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let weights = if prep.use_atoc {
        flow_noise_weights_masked(noise, views.available(), WEIGHT_EPS)?
    } else {
        ViewWeights::uniform(views.available())?
    };
    let mut fused = vec![0.0; prep.window];
    for (i, s) in &signals {
        for (f, x) in fused.iter_mut().zip(s) {
            *f += weights.get(*i) * x;
        }
    }
    let (fused, flat) = standardize(&fused);
    let series = TimeSeries::new(fused, fs)?;
    let (hr_pred, no_pulse) = if flat { (HrEstimate::MIN_BPM, true) } else { readout(&series)? };
    let hr_gt = estimate_hr(&c.gt_ppg, DEFAULT_NFFT)?.bpm();
    let (gt, _) = standardize(c.gt_ppg.samples());
    Ok(EvalRecord {
        prediction: WindowPrediction {
            id: format!("{}@{start}", clip.id),
            hr_pred,
            hr_gt,
            no_pulse,
            rppg: series.into_samples(),
        },
        scenario,
        gt,
        fs,
    })
}

fn test_clips(test: &[LabeledClip], scenario: Option<Scenario>) -> Vec<LabeledClip> {
    test.iter()
        .filter(|c| scenario.is_none_or(|s| c.clip.config.scenario == s))
        .cloned()
        .collect()
}

/// Train the learned method on prepared windows of `clips`; a run that hit
/// a non-finite value is an error.
pub fn train_model(cfg: &ExperimentConfig, clips: &[LabeledClip]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let samples = prepare_all(clips, cfg.views, &cfg.prep)?;
    let out = train(&samples, &cfg.model, &cfg.train_config(), None)?;
    match &out.aborted {
        Some(why) => Err(Error::NonFinite(format!("training aborted: {why}"))),
        None => Ok(out),
    }
}

/// Run one configuration on in-memory clips; nothing is written.
pub fn run_on_clips(cfg: &ExperimentConfig, clips: &[LabeledClip]) -> Result<ExperimentOutcome> {
    run_inner(cfg, clips, None)
}

/// Score already-trained parameters on the test split of `clips`.
pub fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    clips: &[LabeledClip],
    checkpoint: &ParamStore<f32>,
) -> Result<ExperimentOutcome> {
    if cfg.method != Method::MvrdRppg {
        return Err(Error::Config(format!("{} has no trainable parameters", cfg.method)));
    }
    run_inner(cfg, clips, Some(checkpoint))
}

fn run_inner(cfg: &ExperimentConfig, clips: &[LabeledClip], checkpoint: Option<&ParamStore<f32>>) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let (train_clips, test) = split_clips(clips, cfg.split)?;
    let test = test_clips(test, cfg.scenario);
    if test.is_empty() {
        return Err(Error::Config(format!(
            "no test clips for scenario {}",
            cfg.scenario.map_or("all", Scenario::name)
        )));
    }
    let (records, log, model_bytes) = match cfg.method {
        Method::Pos | Method::Chrom => {
            let mut records = Vec::new();
            for clip in &test {
                let n = clip.clip.frame_count() / cfg.prep.window;
                for w in 0..n {
                    records.push(baseline_window(clip, w * cfg.prep.window, cfg.views, &cfg.prep, cfg.method)?);
                }
            }
            (records, None, None)
        }
        Method::MvrdRppg => {
            let (model, store, log) = match checkpoint {
                Some(ck) => {
                    let (model, mut store) = FusionModel::new::<f32>(&cfg.model, cfg.seed)?;
                    store.load_values(ck)?;
                    (model, store, None)
                }
                None => {
                    let out = train_model(cfg, train_clips)?;
                    (out.model, out.store, Some(out.log))
                }
            };
            let samples = prepare_all(&test, cfg.views, &cfg.prep)?;
            let preds = evaluate(&model, &store, &samples)?;
            let records = preds
                .into_iter()
                .zip(samples)
                .map(|(prediction, s)| EvalRecord {
                    prediction,
                    scenario: s.scenario,
                    gt: s.gt,
                    fs: s.fs,
                })
                .collect();
            (records, log, Some(store.to_mvp_bytes()))
        }
    };
    let pred: Vec<f64> = records.iter().map(|r| r.prediction.hr_pred).collect();
    let gt: Vec<f64> = records.iter().map(|r| r.prediction.hr_gt).collect();
    let m = metrics_bpm(&pred, &gt)?;
    Ok(ExperimentOutcome {
        row: ResultRow::new(cfg.method, cfg.scenario, cfg.views, &m, cfg.seed),
        records,
        log,
        model_bytes,
    })
}

pub const PREDICTIONS_HEADER: &str = "id,scenario,hr_pred,hr_gt,abs_err,no_pulse";

pub fn predictions_csv(records: &[EvalRecord]) -> String {
    let mut out = format!("{PREDICTIONS_HEADER}\n");
    for r in records {
        let p = &r.prediction;
        out.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4},{}\n",
            p.id,
            r.scenario,
            p.hr_pred,
            p.hr_gt,
            (p.hr_pred - p.hr_gt).abs(),
            p.no_pulse
        ));
    }
    out
}

pub fn log_csv(log: &[StepRecord]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in log {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Write `metrics.csv`, `predictions.csv`, per-window waveform and PSD
/// plots, and for the learned method `train_log.csv` and `model.mvp`.
pub fn write_artifacts(dir: &Path, outcome: &ExperimentOutcome) -> Result<()> {
    let plots = dir.join("plots");
    fs::create_dir_all(&plots)?;
    fs::write(dir.join("metrics.csv"), emit_csv(&[outcome.row]))?;
    fs::write(dir.join("predictions.csv"), predictions_csv(&outcome.records))?;
    for r in &outcome.records {
        let pred = TimeSeries::new(r.prediction.rppg.clone(), r.fs)?;
        let gt = TimeSeries::new(r.gt.clone(), r.fs)?;
        let stem = r.prediction.id.replace('@', "_");
        let title = format!(
            "{} {}: {:.1} bpm predicted, {:.1} bpm reference",
            outcome.row.method, r.prediction.id, r.prediction.hr_pred, r.prediction.hr_gt
        );
        fs::write(plots.join(format!("{stem}_wave.svg")), waveform_svg(&title, &pred, &gt)?)?;
        fs::write(plots.join(format!("{stem}_psd.svg")), psd_svg(&title, &pred, &gt)?)?;
    }
    if let Some(log) = &outcome.log {
        fs::write(dir.join("train_log.csv"), log_csv(log))?;
    }
    if let Some(bytes) = &outcome.model_bytes {
        fs::write(dir.join("model.mvp"), bytes)?;
    }
    Ok(())
}

/// Read the dataset, run, and write the artifacts under `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    if !cfg.dataset.join("manifest.json").exists() {
        return Err(Error::MissingFile(cfg.dataset.join("manifest.json")));
    }
    let clips = read_dataset(&cfg.dataset)?;
    let outcome = run_on_clips(cfg, &clips)?;
    write_artifacts(&cfg.out_dir, &outcome)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::parse_csv;
    use crate::synth::{write_dataset, BenchmarkSpec};

    fn clips(subjects: u32, scenarios: Vec<Scenario>, secs: f64) -> Vec<LabeledClip> {
        BenchmarkSpec {
            subjects,
            scenarios,
            duration_s: secs,
            noise_sigma: 0.0,
            ..BenchmarkSpec::default()
        }
        .generate()
        .unwrap()
    }

    fn baseline_cfg(method: Method) -> ExperimentConfig {
        ExperimentConfig {
            method,
            prep: PrepConfig {
                window: 150,
                ..PrepConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("ica".parse::<Method>().is_err());
    }

    #[test]
    fn config_violations() {
        let bad = |f: fn(&mut ExperimentConfig)| {
            let mut c = ExperimentConfig::default();
            f(&mut c);
            matches!(c.validate(), Err(Error::Config(_)))
        };
        assert!(bad(|c| c.split = 1.0));
        assert!(bad(|c| c.split = 0.0));
        assert!(bad(|c| c.prep.window = 16));
        assert!(bad(|c| c.prep.input_pool = 2));
        assert!(bad(|c| c.train.epochs = 0));
        assert!(ExperimentConfig::default().validate().is_ok());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"views": ""}"#).is_err());
        let partial: ExperimentConfig = serde_json::from_str(r#"{"method": "pos", "views": "cr"}"#).unwrap();
        assert_eq!(partial.method, Method::Pos);
        assert_eq!(partial.views.to_string(), "cr");
        assert_eq!(partial.split, 0.8);
    }

    #[test]
    fn pos_on_stationary_clips() {
        let data = clips(5, vec![Scenario::Stationary], 5.0);
        let mut cfg = baseline_cfg(Method::Pos);
        cfg.split = 0.2;
        let out = run_on_clips(&cfg, &data).unwrap();
        assert_eq!(out.row.n, 4);
        assert!(out.mae() <= 2.0, "MAE {}", out.mae());
    }

    #[test]
    fn scenario_filter_without_matches() {
        let data = clips(2, vec![Scenario::Stationary], 5.0);
        let mut cfg = baseline_cfg(Method::Chrom);
        cfg.split = 0.5;
        cfg.scenario = Some(Scenario::Movement);
        assert!(matches!(run_on_clips(&cfg, &data), Err(Error::Config(_))));
    }

    #[test]
    fn artifacts_are_written_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("data");
        write_dataset(&data_dir, &clips(2, vec![Scenario::Stationary, Scenario::Movement], 5.0)).unwrap();
        let mut cfg = baseline_cfg(Method::Chrom);
        cfg.dataset = data_dir;
        cfg.split = 0.5;
        cfg.views = "cr".parse().unwrap();
        let mut metrics = Vec::new();
        for run in ["a", "b"] {
            cfg.out_dir = dir.path().join(run);
            let out = run_experiment(&cfg).unwrap();
            let text = fs::read_to_string(cfg.out_dir.join("metrics.csv")).unwrap();
            assert_eq!(parse_csv(&text).unwrap().len(), 1);
            assert_eq!(out.records.len(), 2);
            let plots = fs::read_dir(cfg.out_dir.join("plots")).unwrap().count();
            assert_eq!(plots, 4);
            metrics.push(text);
        }
        assert_eq!(metrics[0], metrics[1]);
        assert!(metrics[0].contains("chrom,all,cr,"));
    }

    #[test]
    fn arms_remove_one_thing_each() {
        let base = ExperimentConfig::default();
        for arm in Arm::ALL {
            assert_eq!(arm.name().parse::<Arm>().unwrap(), arm);
            let c = arm.apply(&base);
            let changed = [
                c.prep.use_atoc != base.prep.use_atoc,
                c.model.fusion != base.model.fusion,
                c.train.loss != base.train.loss,
            ];
            let n = changed.iter().filter(|&&x| x).count();
            assert_eq!(n, match arm {
                Arm::Full => 0,
                Arm::NoAtocMvca => 2,
                _ => 1,
            });
            assert!(c.validate().is_ok());
        }
    }

    #[test]
    fn checkpoint_reproduces_trained_metrics() {
        let data = clips(2, vec![Scenario::Stationary], 4.3);
        let cfg = ExperimentConfig {
            split: 0.5,
            prep: PrepConfig {
                window: 128,
                ..PrepConfig::default()
            },
            train: TrainConfig {
                epochs: 1,
                ..TrainConfig::default()
            },
            ..ExperimentConfig::default()
        };
        let trained = run_on_clips(&cfg, &data).unwrap();
        assert_eq!(trained.log.as_ref().unwrap().len(), 1);
        let bytes = trained.model_bytes.clone().unwrap();
        let ck = ParamStore::<f32>::from_mvp_bytes(&bytes, Path::new("mem")).unwrap();
        let again = evaluate_checkpoint(&cfg, &data, &ck).unwrap();
        assert_eq!(again.row, trained.row);
        assert_eq!(again.records, trained.records);
        let pos_cfg = ExperimentConfig {
            method: Method::Pos,
            ..cfg
        };
        assert!(evaluate_checkpoint(&pos_cfg, &data, &ck).is_err());
    }

    #[test]
    fn missing_dataset_is_reported() {
        let mut cfg = baseline_cfg(Method::Pos);
        cfg.dataset = PathBuf::from("/nonexistent/dataset");
        assert!(matches!(run_experiment(&cfg), Err(Error::MissingFile(_))));
    }
}
