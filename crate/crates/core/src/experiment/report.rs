//! `report.json`: headline results plus a manifest of every artifact with
//! its SHA-256, so a run directory can be checked for tampering or drift.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::run::Battery;
use crate::analysis::{GeneralizationCurve, Mechanism, MechanismLabel, Phase};
use crate::error::{Error, Result};
use crate::interp::{HeadScoreTable, ProbeCurves, SignatureGrid};
use crate::transformer::{params_hash, Model};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub group: usize,
    pub train_len: usize,
    pub params_hash: String,
    pub verdict: MechanismLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
    pub generalization: GeneralizationCurve,
    pub probes: ProbeCurves,
    /// Prefix-patching NLD over all pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<SignatureGrid>,
    pub heads: HeadScoreTable,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub manifest: Vec<ManifestEntry>,
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

impl RunReport {
    pub fn new(cfg: &ExperimentConfig, model: &Model, battery: Battery, outdir: &Path, files: &[String]) -> Result<Self> {
        let mut manifest = files
            .iter()
            .map(|f| {
                let (sha256, bytes) = sha256_file(&outdir.join(f))?;
                Ok(ManifestEntry { path: f.clone(), sha256, bytes })
            })
            .collect::<Result<Vec<_>>>()?;
        manifest.sort_by(|a, b| a.path.cmp(&b.path));
        let signature = battery.prefix.into_iter().next().map(|(_, g)| g.nld);
        Ok(Self {
            name: cfg.name.clone(),
            group: cfg.group,
            train_len: cfg.train_len(),
            params_hash: params_hash(model),
            verdict: battery.verdict,
            phase: battery.phase,
            generalization: battery.curve,
            probes: battery.probes,
            signature,
            heads: battery.heads,
            notes: battery.notes,
            manifest,
        })
    }

    pub fn label(&self) -> Mechanism {
        self.verdict.label
    }
}

pub fn write_report(path: &Path, report: &RunReport) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)? + "\n")?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Paths whose current contents no longer match the manifest.
pub fn verify_manifest(outdir: &Path, report: &RunReport) -> Result<Vec<String>> {
    let mut bad = Vec::new();
    for e in &report.manifest {
        match sha256_file(&outdir.join(&e.path)) {
            Ok((h, n)) if h == e.sha256 && n == e.bytes => {}
            Ok(_) | Err(Error::MissingFile(_)) => bad.push(e.path.clone()),
            Err(err) => return Err(err),
        }
    }
    Ok(bad)
}

/// Label counts and fractions over a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub runs: Vec<(String, Mechanism)>,
    pub counts: [usize; 3],
    /// Fractions of AA, PAA and Neither, summing to 1.
    pub ratios: [f64; 3],
}

pub fn summarize_sweep(runs: Vec<(String, Mechanism)>) -> Result<SweepSummary> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("sweep has no runs".into()));
    }
    let mut counts = [0usize; 3];
    for (_, m) in &runs {
        counts[match m {
            Mechanism::Aa => 0,
            Mechanism::Paa => 1,
            Mechanism::Neither => 2,
        }] += 1;
    }
    let total = runs.len() as f64;
    let ratios = counts.map(|c| c as f64 / total);
    Ok(SweepSummary { runs, counts, ratios })
}
