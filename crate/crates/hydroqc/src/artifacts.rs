// SPDX-License-Identifier: MIT OR Apache-2.0

//! Stage outputs on disk. JSON-lines files start with a header line; JSON
//! files wrap their payload. Both carry the config hash and master seed so
//! a stage refuses inputs produced under a different configuration.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub artifact: String,
    pub format: u32,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Wrapped<T> {
    header: Header,
    data: T,
}

pub struct Store {
    root: PathBuf,
    config_hash: String,
    seed: u64,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>, config_hash: String, seed: u64) -> Self {
        Store {
            root: root.into(),
            config_hash,
            seed,
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).is_file()
    }

    fn header(&self, rel: &str) -> Header {
        Header {
            artifact: rel.to_string(),
            format: FORMAT_VERSION,
            config_hash: self.config_hash.clone(),
            seed: self.seed,
        }
    }

    /// Writes through a temporary file so a failed stage never leaves a
    /// truncated artifact behind.
    pub fn write_bytes(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, data: &T) -> Result<()> {
        let w = Wrapped {
            header: self.header(rel),
            data,
        };
        let mut bytes = serde_json::to_vec_pretty(&w).map_err(|e| Error::data(format!("{rel}: {e}")))?;
        bytes.push(b'\n');
        self.write_bytes(rel, &bytes)
    }

    pub fn write_jsonl<T: Serialize>(&self, rel: &str, items: &[T]) -> Result<()> {
        let err = |e: serde_json::Error| Error::data(format!("{rel}: {e}"));
        let mut bytes = serde_json::to_vec(&self.header(rel)).map_err(err)?;
        bytes.push(b'\n');
        for it in items {
            serde_json::to_writer(&mut bytes, it).map_err(err)?;
            bytes.push(b'\n');
        }
        self.write_bytes(rel, &bytes)
    }

    fn check(&self, rel: &str, stage: &'static str, h: &Header) -> Result<()> {
        if h.format != FORMAT_VERSION {
            return Err(Error::Parse {
                path: self.path(rel),
                msg: format!("artifact format {} (expected {FORMAT_VERSION})", h.format),
            });
        }
        if h.config_hash != self.config_hash || h.seed != self.seed {
            return Err(Error::Stale {
                path: self.path(rel),
                stage,
            });
        }
        Ok(())
    }

    fn open(&self, rel: &str, stage: &'static str) -> Result<fs::File> {
        let path = self.path(rel);
        if !path.is_file() {
            return Err(Error::Dependency { stage, missing: path });
        }
        fs::File::open(&path).map_err(|e| Error::io(&path, e))
    }

    /// Reads an artifact written by `stage`.
    pub fn read_json<T: DeserializeOwned>(&self, rel: &str, stage: &'static str) -> Result<T> {
        let f = self.open(rel, stage)?;
        let w: Wrapped<T> = serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::Parse {
            path: self.path(rel),
            msg: e.to_string(),
        })?;
        self.check(rel, stage, &w.header)?;
        Ok(w.data)
    }

    pub fn read_jsonl<T: DeserializeOwned>(&self, rel: &str, stage: &'static str) -> Result<Vec<T>> {
        let f = self.open(rel, stage)?;
        let path = self.path(rel);
        let mut lines = BufReader::new(f).lines();
        let parse_err = |n: usize, e: String| Error::Parse {
            path: path.clone(),
            msg: format!("line {n}: {e}"),
        };
        let first = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty file".into()))?
            .map_err(|e| Error::io(&path, e))?;
        let header: Header = serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
        self.check(rel, stage, &header)?;
        let mut out = Vec::new();
        for (i, l) in lines.enumerate() {
            let l = l.map_err(|e| Error::io(&path, e))?;
            out.push(serde_json::from_str(&l).map_err(|e| parse_err(i + 2, e.to_string()))?);
        }
        Ok(out)
    }
}
