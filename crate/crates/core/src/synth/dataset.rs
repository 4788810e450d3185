//! On-disk benchmark layout: a `manifest.json` plus one directory per clip
//! holding `view_{l,c,r}.mvf`, `keypoints_{l,c,r}.bin`, `ppg.mvs` and
//! `hr.mvs`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LabeledClip, MultiViewClip, SceneConfig, Scenario, View};
use crate::binio::read_file;
use crate::error::{Error, Result};
use crate::signal::TimeSeries;
use crate::video::{KeypointTrack, Video};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub subject: u32,
    pub scenario: Scenario,
    pub fps: f64,
    pub frames: usize,
    pub seed: u64,
    /// Clip directory, relative to the dataset root.
    pub dir: String,
    pub config: SceneConfig,
    pub view_angles: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub clips: Vec<ManifestEntry>,
}

fn write_clip(dir: &Path, clip: &MultiViewClip) -> Result<()> {
    fs::create_dir_all(dir)?;
    for v in View::ALL {
        fs::write(
            dir.join(format!("view_{}.mvf", v.letter())),
            clip.frames[v.index()].to_mvf_bytes(),
        )?;
        fs::write(
            dir.join(format!("keypoints_{}.bin", v.letter())),
            clip.keypoints[v.index()].to_mvk_bytes(),
        )?;
    }
    clip.gt_ppg.write_mvs(&dir.join("ppg.mvs"))?;
    TimeSeries::new(clip.hr_trace.clone(), clip.fps())?.write_mvs(&dir.join("hr.mvs"))?;
    Ok(())
}

fn read_clip(dir: &Path, entry: &ManifestEntry) -> Result<MultiViewClip> {
    let mut frames = Vec::with_capacity(3);
    let mut keypoints = Vec::with_capacity(3);
    for v in View::ALL {
        let p = dir.join(format!("view_{}.mvf", v.letter()));
        frames.push(Video::from_mvf_bytes(&read_file(&p)?, &p)?);
        let p = dir.join(format!("keypoints_{}.bin", v.letter()));
        keypoints.push(KeypointTrack::from_mvk_bytes(&read_file(&p)?, &p)?);
    }
    let gt_ppg = TimeSeries::read_mvs(&dir.join("ppg.mvs"), entry.fps)?;
    let hr_trace = TimeSeries::read_mvs(&dir.join("hr.mvs"), entry.fps)?.into_samples();
    let n = gt_ppg.len();
    if n != entry.frames
        || hr_trace.len() != n
        || frames.iter().any(|f| f.frames() != n)
        || keypoints.iter().any(|k| k.frames() != n)
    {
        return Err(Error::param(format!(
            "clip `{}`: stream lengths disagree with manifest ({} frames)",
            entry.id, entry.frames
        )));
    }
    Ok(MultiViewClip {
        config: entry.config.clone(),
        frames: frames.try_into().expect("three views"),
        keypoints: keypoints.try_into().expect("three views"),
        gt_ppg,
        hr_trace,
        view_angles: entry.view_angles,
    })
}

/// Write clips under `root`. Output bytes depend only on the clips.
pub fn write_dataset(root: &Path, clips: &[LabeledClip]) -> Result<DatasetManifest> {
    fs::create_dir_all(root)?;
    let mut entries = Vec::with_capacity(clips.len());
    for c in clips {
        write_clip(&root.join(&c.id), &c.clip)?;
        entries.push(ManifestEntry {
            id: c.id.clone(),
            subject: c.subject,
            scenario: c.clip.config.scenario,
            fps: c.clip.fps(),
            frames: c.clip.frame_count(),
            seed: c.clip.config.seed,
            dir: c.id.clone(),
            config: c.clip.config.clone(),
            view_angles: c.clip.view_angles,
        });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        clips: entries,
    };
    fs::write(root.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let bytes = read_file(&root.join(MANIFEST))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes)?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Config("manifest lacks format_version".into()))?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: found as u32,
        });
    }
    Ok(serde_json::from_value(value)?)
}

pub fn read_dataset(root: &Path) -> Result<Vec<LabeledClip>> {
    let manifest = read_manifest(root)?;
    manifest
        .clips
        .iter()
        .map(|e| {
            Ok(LabeledClip {
                id: e.id.clone(),
                subject: e.subject,
                clip: read_clip(&root.join(&e.dir), e)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::BenchmarkSpec;

    fn tiny() -> Vec<LabeledClip> {
        BenchmarkSpec {
            subjects: 1,
            scenarios: vec![Scenario::Stationary, Scenario::Movement],
            duration_s: 1.0,
            ..BenchmarkSpec::default()
        }
        .generate()
        .unwrap()
    }

    fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(root).unwrap().display().to_string();
                    out.push((rel, fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn roundtrip_is_exact() {
        let clips = tiny();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(a.path(), &clips).unwrap();
        let back = read_dataset(a.path()).unwrap();
        assert_eq!(back, clips);
        write_dataset(b.path(), &back).unwrap();
        assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let d = tempfile::tempdir().unwrap();
        write_dataset(d.path(), &tiny()).unwrap();
        let p = d.path().join(MANIFEST);
        let s = fs::read_to_string(&p).unwrap().replace("\"format_version\": 1", "\"format_version\": 7");
        fs::write(&p, s).unwrap();
        assert!(matches!(
            read_dataset(d.path()),
            Err(Error::VersionMismatch { expected: 1, found: 7 })
        ));
    }

    #[test]
    fn missing_and_corrupt_files() {
        let d = tempfile::tempdir().unwrap();
        let clips = tiny();
        write_dataset(d.path(), &clips).unwrap();
        let dir = d.path().join(&clips[0].id);

        let view = dir.join("view_c.mvf");
        let bytes = fs::read(&view).unwrap();
        fs::write(&view, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_dataset(d.path()), Err(Error::Truncated { .. })));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&view, &bad).unwrap();
        assert!(matches!(read_dataset(d.path()), Err(Error::BadMagic { .. })));

        fs::write(&view, &bytes).unwrap();
        fs::remove_file(dir.join("ppg.mvs")).unwrap();
        assert!(matches!(read_dataset(d.path()), Err(Error::MissingFile(_))));
    }

    #[test]
    fn missing_manifest() {
        let d = tempfile::tempdir().unwrap();
        assert!(matches!(read_dataset(d.path()), Err(Error::MissingFile(_))));
    }
}
