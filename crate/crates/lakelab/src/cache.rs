//! On-disk cache of converged HJB solves.
//!
//! Entries are JSON files named by the SHA-256 of the solve inputs. Writes go
//! through a temporary file in the same directory followed by a rename, so a
//! reader never sees a partial entry.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LakeError, Result};
use crate::hjb::{solve_hjb_with, GridSpec, HjbOptions, SolveReport, ValueFunction};
use crate::model::{LakeParams, RecyclingCurve};

pub const CACHE_VERSION: u32 = 1;

#[derive(Serialize)]
struct KeyInput<'a> {
    version: u32,
    params: &'a LakeParams,
    curve: &'a str,
    grid: &'a GridSpec,
    tol: f64,
}

/// Content hash of the inputs that determine a solve.
pub fn cache_key(params: &LakeParams, curve_name: &str, grid: &GridSpec, tol: f64) -> String {
    let input = KeyInput {
        version: CACHE_VERSION,
        params,
        curve: curve_name,
        grid,
        tol,
    };
    let json = serde_json::to_vec(&input).expect("key input serializes");
    hex::encode(Sha256::digest(&json))
}

#[derive(Serialize, Deserialize)]
struct Entry {
    version: u32,
    key: String,
    value: ValueFunction,
    report: SolveReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Miss,
    /// An entry existed but could not be read and was replaced.
    Recomputed,
}

#[derive(Debug, Clone)]
pub struct ValueCache {
    dir: PathBuf,
}

impl ValueCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ValueCache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    /// `Ok(None)` for a missing entry; `Err` only for unreadable or
    /// mismatched content, which callers treat as a miss.
    fn read(&self, key: &str) -> std::result::Result<Option<(ValueFunction, SolveReport)>, String> {
        let path = self.path(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.to_string()),
        };
        let entry: Entry = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
        if entry.version != CACHE_VERSION || entry.key != key {
            return Err(format!(
                "stale entry (version {}, key {})",
                entry.version, entry.key
            ));
        }
        Ok(Some((entry.value, entry.report)))
    }

    pub fn load(&self, key: &str) -> Option<(ValueFunction, SolveReport)> {
        match self.read(key) {
            Ok(hit) => hit,
            Err(e) => {
                log::warn!(
                    "ignoring corrupt cache entry {}: {e}",
                    self.path(key).display()
                );
                None
            }
        }
    }

    pub fn store(&self, key: &str, value: &ValueFunction, report: &SolveReport) -> Result<()> {
        let io = |e: std::io::Error| LakeError::Cache(format!("{}: {e}", self.dir.display()));
        fs::create_dir_all(&self.dir).map_err(io)?;
        let entry = Entry {
            version: CACHE_VERSION,
            key: key.to_string(),
            value: value.clone(),
            report: report.clone(),
        };
        let json = serde_json::to_vec(&entry).map_err(|e| LakeError::Cache(e.to_string()))?;
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(io)?;
        tmp.write_all(&json).map_err(io)?;
        tmp.persist(self.path(key))
            .map_err(|e| LakeError::Cache(e.to_string()))?;
        Ok(())
    }

    /// Returns a cached solve or computes and stores one.
    ///
    /// The iteration cap is not part of the key: it does not change a
    /// converged answer.
    pub fn solve(
        &self,
        params: &LakeParams,
        curve: &RecyclingCurve,
        grid: &GridSpec,
        opts: &HjbOptions,
    ) -> Result<(ValueFunction, SolveReport, CacheStatus)> {
        let key = cache_key(params, curve.name(), grid, opts.tol);
        let status = match self.read(&key) {
            Ok(Some((v, r))) => return Ok((v, r, CacheStatus::Hit)),
            Ok(None) => CacheStatus::Miss,
            Err(e) => {
                log::warn!(
                    "recomputing corrupt cache entry {}: {e}",
                    self.path(&key).display()
                );
                CacheStatus::Recomputed
            }
        };
        let (v, r) = solve_hjb_with(params, curve, grid, opts)?;
        self.store(&key, &v, &r)?;
        Ok((v, r, status))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::hill_curve;

    #[test]
    fn key_depends_on_every_input() {
        let p = LakeParams::reference(0.1);
        let g = GridSpec::new(20.0, 256).unwrap();
        let k = cache_key(&p, "hill", &g, 1e-9);
        assert_eq!(k.len(), 64);
        assert_eq!(k, cache_key(&p, "hill", &g, 1e-9));
        assert_ne!(k, cache_key(&p.with_sigma(0.2).unwrap(), "hill", &g, 1e-9));
        assert_ne!(k, cache_key(&p, "hill-3", &g, 1e-9));
        assert_ne!(
            k,
            cache_key(&p, "hill", &GridSpec::new(20.0, 257).unwrap(), 1e-9)
        );
        assert_ne!(k, cache_key(&p, "hill", &g, 1e-8));
    }

    #[test]
    fn roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ValueCache::new(dir.path().join("cache"));
        let p = LakeParams::reference(0.1);
        let r = hill_curve();
        let g = GridSpec::new(20.0, 256).unwrap();
        let opts = HjbOptions::default();
        let (v1, r1, s1) = cache.solve(&p, &r, &g, &opts).unwrap();
        assert_eq!(s1, CacheStatus::Miss);
        let (v2, r2, s2) = cache.solve(&p, &r, &g, &opts).unwrap();
        assert_eq!(s2, CacheStatus::Hit);
        assert_eq!(v1.v, v2.v);
        assert_eq!(v1.vp, v2.vp);
        assert_eq!(r1, r2);

        let key = cache_key(&p, r.name(), &g, 1e-9);
        fs::write(cache.path(&key), b"{ not json").unwrap();
        assert!(cache.load(&key).is_none());
        let (v3, _, s3) = cache.solve(&p, &r, &g, &opts).unwrap();
        assert_eq!(s3, CacheStatus::Recomputed);
        assert_eq!(v3.v, v1.v);
        assert_eq!(cache.solve(&p, &r, &g, &opts).unwrap().2, CacheStatus::Hit);
    }
}
