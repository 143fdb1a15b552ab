use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use fusionlab_core::design::Method;
use fusionlab_core::output::atomic_write;
use fusionlab_core::simlab::{aggregate_csv, replicate, SimConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::to_toml;

pub const MANIFEST: &str = "manifest.toml";
pub const TRACE_DIR: &str = "traces";

/// Record of a simulation run. Wall-clock timings go to stderr so that
/// repeated runs produce identical files.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub selectors: Vec<Method>,
    pub config: SimConfig,
    /// Relative path to SHA-256 hex digest.
    pub checksums: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn trace_stem(method: Method, replication: usize) -> String {
    format!("{method}_rep{:03}", replication + 1)
}

pub fn run(cfg: &SimConfig, selectors: &[Method], jobs: usize, out: &Path) -> anyhow::Result<()> {
    let t0 = Instant::now();
    let result = replicate(cfg, selectors, jobs)?;
    let t_sim = t0.elapsed();

    let t1 = Instant::now();
    let mut files: Vec<(PathBuf, String)> = Vec::new();
    files.push(("config.toml".into(), to_toml(cfg)?));
    files.push(("aggregate.csv".into(), aggregate_csv(&result.aggregate)));
    for t in &result.traces {
        let stem = Path::new(TRACE_DIR).join(trace_stem(t.method, t.replication));
        let with = |suffix: &str| PathBuf::from(format!("{}{suffix}", stem.display()));
        files.push((with(".csv"), t.to_csv()));
        files.push((with("_terms.csv"), t.terms_csv()));
        files.push((with("_counts.csv"), t.counts_csv()));
        files.push((with("_decisions.csv"), t.decisions_csv()));
    }
    let mut checksums = BTreeMap::new();
    for (rel, body) in &files {
        atomic_write(&out.join(rel), body.as_bytes()).with_context(|| format!("writing {}", rel.display()))?;
        checksums.insert(rel.to_string_lossy().replace('\\', "/"), sha256_hex(body.as_bytes()));
    }
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.experiment.seed,
        selectors: selectors.to_vec(),
        config: cfg.clone(),
        checksums,
    };
    atomic_write(&out.join(MANIFEST), toml::to_string(&manifest)?.as_bytes())?;
    eprintln!(
        "simulate: {} replications x {} selectors in {:.2?}; wrote {} files in {:.2?} to {}",
        cfg.experiment.replications,
        selectors.len(),
        t_sim,
        files.len() + 1,
        t1.elapsed(),
        out.display()
    );
    Ok(())
}
