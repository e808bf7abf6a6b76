//! Experiment front end: TOML configuration with strict validation,
//! named presets, deterministic seeding, and CSV/JSON emission with a
//! hashed manifest.

mod config;
pub mod presets;

pub use config::{validate_config, validate_config_file, HarnessConfig};
pub use presets::{run_preset, PresetName};

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Result, TdScaleError};

/// Version tag for the JSON summary schema.
pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

/// Worker cap for presets that fan out independent runs. Comes from the
/// TDSCALE_THREADS environment variable, else the config, else 4.
pub fn thread_cap(config_threads: Option<usize>) -> usize {
    std::env::var("TDSCALE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .or(config_threads)
        .unwrap_or(4)
        .max(1)
}

/// Run `f` over the items with at most `threads` workers; results come
/// back in input order regardless of scheduling.
pub fn fan_out<T, R, F>(items: Vec<T>, threads: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let n = items.len();
    let mut slots: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let work: Vec<(usize, T)> = items.into_iter().enumerate().collect();
    let queue = std::sync::Mutex::new(work);
    let out = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..threads.min(n) {
            scope.spawn(|| loop {
                let item = queue.lock().unwrap().pop();
                match item {
                    Some((i, x)) => {
                        let r = f(x);
                        out.lock().unwrap()[i] = Some(r);
                    }
                    None => break,
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("worker completed")).collect()
}

/// One emitted artifact, recorded in the manifest with a content hash.
#[derive(Debug, Clone, Serialize)]
pub struct ArtifactRecord {
    pub name: String,
    pub sha256: String,
    pub bytes: usize,
}

/// Collects output files for a preset run and writes them atomically.
pub struct OutputSink {
    dir: PathBuf,
    records: Vec<ArtifactRecord>,
}

impl OutputSink {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(OutputSink { dir: dir.to_path_buf(), records: Vec::new() })
    }

    /// Write a file body atomically (temp file + rename) and record its
    /// content hash.
    pub fn write(&mut self, name: &str, body: &str) -> Result<()> {
        let path = self.dir.join(name);
        let tmp = self.dir.join(format!("{name}.tmp"));
        fs::write(&tmp, body)?;
        fs::rename(&tmp, &path)?;
        let mut hasher = Sha256::new();
        hasher.update(body.as_bytes());
        self.records.push(ArtifactRecord {
            name: name.to_string(),
            sha256: format!("{:x}", hasher.finalize()),
            bytes: body.len(),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let body = serde_json::to_string_pretty(value)
            .map_err(|e| TdScaleError::Config(format!("json encoding failed: {e}")))?;
        self.write(name, &body)
    }

    /// Write the manifest: preset name, seed, config echo, and the hash
    /// of every file emitted so far.
    pub fn finish(mut self, preset: &str, seed: u64, config: &HarnessConfig) -> Result<()> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            schema_version: u32,
            preset: &'a str,
            seed: u64,
            config: &'a HarnessConfig,
            files: &'a [ArtifactRecord],
        }
        let manifest = Manifest {
            schema_version: SUMMARY_SCHEMA_VERSION,
            preset,
            seed,
            config,
            files: &self.records,
        };
        let body = serde_json::to_string_pretty(&manifest)
            .map_err(|e| TdScaleError::Config(format!("manifest encoding failed: {e}")))?;
        let path = self.dir.join("manifest.json");
        let tmp = self.dir.join("manifest.json.tmp");
        fs::write(&tmp, &body)?;
        fs::rename(&tmp, &path)?;
        self.records.clear();
        Ok(())
    }
}
