// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: one TOML file, overridable field by field with
//! `--set dotted.path=value`.

use std::path::{Path, PathBuf};

use hydroqc_core::detect::{Baseline, BaselineConfig, HeadTrainConfig, ReferenceReconstructor};
use hydroqc_core::inject::{TestInjectConfig, TrainInjectConfig};
use hydroqc_core::labels::{PatternLabelConfig, WeakLabelConfig, WindowQualityConfig};
use hydroqc_core::normalize::NormConfig;
use hydroqc_core::qc::QcConfig;
use hydroqc_core::window::{EVAL_STRIDE, TRAIN_STRIDE};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Site table CSV.
    pub sites: PathBuf,
    /// Directory of `<site_id>.csv` series files.
    pub series_dir: PathBuf,
    /// Optional directory of `<site_id>.paired.csv` raw/corrected archives.
    pub paired_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            sites: PathBuf::from("data/sites.csv"),
            series_dir: PathBuf::from("data/series"),
            paired_dir: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    /// Stride for evaluation windows (all partitions).
    pub eval_stride: usize,
    /// Stride for training-injector windows (training sites).
    pub train_stride: usize,
    /// Windows with a smaller observed fraction are skipped.
    pub min_observed: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            eval_stride: EVAL_STRIDE,
            train_stride: TRAIN_STRIDE,
            min_observed: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    /// Baselines to run, by name; empty runs all eleven.
    pub baselines: Vec<String>,
    pub baseline: BaselineConfig,
    pub reconstructor: ReferenceReconstructor,
    pub mc_passes: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            baselines: Vec::new(),
            baseline: BaselineConfig::default(),
            reconstructor: ReferenceReconstructor::default(),
            mc_passes: 10,
        }
    }
}

impl DetectConfig {
    pub fn selected(&self) -> Result<Vec<Baseline>> {
        if self.baselines.is_empty() {
            return Ok(Baseline::ALL.to_vec());
        }
        self.baselines
            .iter()
            .map(|n| Baseline::parse(n).ok_or_else(|| Error::Usage(format!("unknown baseline `{n}`"))))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelsConfig {
    pub weak: WeakLabelConfig,
    pub quality: WindowQualityConfig,
    pub pattern: PatternLabelConfig,
}

impl Default for LabelsConfig {
    fn default() -> Self {
        LabelsConfig {
            weak: WeakLabelConfig::default(),
            quality: WindowQualityConfig::default(),
            pattern: PatternLabelConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub qc: QcConfig,
    pub norm: NormConfig,
    pub windows: WindowConfig,
    pub train_inject: TrainInjectConfig,
    pub test_inject: TestInjectConfig,
    pub detect: DetectConfig,
    pub head: HeadTrainConfig,
    pub labels: LabelsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            paths: Paths::default(),
            qc: QcConfig::default(),
            norm: NormConfig::default(),
            windows: WindowConfig::default(),
            train_inject: TrainInjectConfig::default(),
            test_inject: TestInjectConfig::default(),
            detect: DetectConfig::default(),
            head: HeadTrainConfig::default(),
            labels: LabelsConfig::default(),
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_json<T: Serialize>(v: &T) -> String {
    sha256_hex(&serde_json::to_vec(v).expect("serializable"))[..16].to_string()
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let usage = |e: hydroqc_core::Error| Error::Usage(format!("config: {e}"));
        self.qc.validate().map_err(usage)?;
        self.norm.validate().map_err(usage)?;
        self.train_inject.validate().map_err(usage)?;
        self.test_inject.validate().map_err(usage)?;
        self.labels.weak.validate().map_err(usage)?;
        self.detect.selected()?;
        let w = &self.windows;
        if w.eval_stride == 0 || w.train_stride == 0 || !(0.0..=1.0).contains(&w.min_observed) {
            return Err(Error::Usage(
                "windows: strides must be positive and min_observed in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Hash of everything that affects results. Paths are left out so the
    /// same run in two directories hashes the same.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        hash_json(&c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Reads `path` (defaults if `None`) and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let mut t = text
                    .parse::<toml::Table>()
                    .map_err(|e| Error::Usage(format!("{}: {e}", p.display())))?;
                resolve_paths(&mut t, p.parent().unwrap_or(Path::new("")));
                t
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Usage(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Relative paths in a config file are taken relative to the file.
fn resolve_paths(root: &mut toml::Table, base: &Path) {
    let Some(paths) = root.get_mut("paths").and_then(|v| v.as_table_mut()) else {
        return;
    };
    for (_, v) in paths.iter_mut() {
        if let Some(s) = v.as_str() {
            if Path::new(s).is_relative() {
                *v = toml::Value::String(base.join(s).to_string_lossy().into_owned());
            }
        }
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, or as a bare string
/// when it is not one.
pub fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Usage(format!("bad override path `{key}`")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Usage(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        c.validate().unwrap();
    }

    #[test]
    fn dotted_overrides() {
        let c = RunConfig::load(
            None,
            &[
                "qc.outlier_sigma=5".into(),
                "seed=7".into(),
                "detect.baselines=[\"iqr\"]".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.qc.outlier_sigma, 5.0);
        assert_eq!(c.seed, 7);
        assert_eq!(c.detect.selected().unwrap(), vec![Baseline::Iqr]);
    }

    #[test]
    fn unknown_field_is_usage_error() {
        let e = RunConfig::load(None, &["qc.no_such_field=1".into()]).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        let e = RunConfig::load(None, &["detect.baselines=[\"nope\"]".into()]).unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn file_paths_are_relative_to_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 3\n[paths]\nsites = \"s.csv\"\n").unwrap();
        let c = RunConfig::load(Some(&p), &["paths.output_dir=o".into()]).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.paths.sites, dir.path().join("s.csv"));
        assert_eq!(c.paths.output_dir, PathBuf::from("o"));
    }

    #[test]
    fn paths_do_not_change_hash() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.paths.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
