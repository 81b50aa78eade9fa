// SPDX-License-Identifier: MIT OR Apache-2.0

//! Writes a synthetic corpus in the interchange formats, with a config file
//! that points at it.

use std::fs;
use std::path::{Path, PathBuf};

use hydroqc_core::synth::{synth_corpus, synth_paired, PairedConfig, SynthConfig};

use crate::config::{Paths, RunConfig};
use crate::error::{Error, Result};
use crate::io;

#[derive(Clone, Debug)]
pub struct FixtureSpec {
    pub synth: SynthConfig,
    pub paired: PairedConfig,
    /// Paired archives are written for the last `paired_sites` sites.
    pub paired_sites: usize,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            synth: SynthConfig::default(),
            paired: PairedConfig::default(),
            paired_sites: 2,
            seed: 20_240_501,
        }
    }
}

/// Config used for the bundled corpus: defaults, with head training sized
/// for a few hundred windows.
pub fn fixture_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.paths = Paths {
        sites: "sites.csv".into(),
        series_dir: "series".into(),
        paired_dir: Some("paired".into()),
        output_dir: "out".into(),
    };
    c.head.batch_windows = 16;
    c.head.patience = 10;
    c
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::data(format!("{}: {e}", path.display()))
}

/// Writes `sites.csv`, `series/<id>.csv`, `paired/<id>.paired.csv` and
/// `hydroqc.toml` under `dir`. Returns the config path.
pub fn write_fixtures(dir: &Path, spec: &FixtureSpec) -> Result<PathBuf> {
    let sites = synth_corpus(&spec.synth, spec.seed)?;
    let metas: Vec<_> = sites.iter().map(|s| s.meta.clone()).collect();
    let p = dir.join("sites.csv");
    io::write_site_table(create(&p)?, &metas).map_err(csv_err(&p))?;
    for s in &sites {
        let p = dir.join("series").join(format!("{}.csv", s.meta.site_id));
        io::write_timeseries(create(&p)?, &s.series).map_err(csv_err(&p))?;
    }
    for s in sites.iter().rev().take(spec.paired_sites) {
        let paired = synth_paired(s, &spec.paired, spec.seed);
        let p = dir.join("paired").join(format!("{}.paired.csv", s.meta.site_id));
        io::write_paired(create(&p)?, &paired).map_err(csv_err(&p))?;
    }
    let cfg_path = dir.join("hydroqc.toml");
    let text = format!(
        "# Run configuration for this corpus; paths are relative to this file.\n{}",
        fixture_config().to_toml()
    );
    fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(cfg_path)
}
