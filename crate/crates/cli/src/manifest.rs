use std::fs::File;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use lpae::train::{LpaeEpochLog, LpaeEval, SrEpochLog, SrEval};

/// Summary of a training run, written once at the end.
///
/// Holds no timestamps or absolute paths, so repeating a run with the same
/// inputs yields an identical file.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    /// Canonical `key = value` text of the effective configuration.
    pub config: String,
    pub corpus_images: usize,
    pub holdout_images: usize,
    pub checkpoints: Vec<CheckpointHash>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Held-out quality before the first and after the last update.
    pub initial_eval: Option<EvalRecord>,
    pub final_eval: Option<EvalRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Held-out metrics; the autoencoder-only fields are absent for SR runs.
#[derive(Debug, Serialize)]
pub struct EvalRecord {
    pub psnr: f64,
    pub bicubic_psnr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub approx_psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail_energy: Option<f64>,
}

impl From<LpaeEval> for EvalRecord {
    fn from(e: LpaeEval) -> Self {
        EvalRecord {
            psnr: e.psnr,
            bicubic_psnr: e.bicubic_psnr,
            approx_psnr: Some(e.approx_psnr),
            detail_energy: Some(e.detail_energy),
        }
    }
}

impl From<SrEval> for EvalRecord {
    fn from(e: SrEval) -> Self {
        EvalRecord {
            psnr: e.psnr,
            bicubic_psnr: e.bicubic_psnr,
            approx_psnr: None,
            detail_energy: None,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct CheckpointHash {
    pub file: String,
    pub sha256: String,
}

impl CheckpointHash {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(CheckpointHash {
            file: path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            sha256: format!("{:x}", Sha256::digest(&bytes)),
        })
    }
}

/// Per-epoch loss and held-out PSNR (absent on epochs without evaluation).
#[derive(Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub psnr: Option<f64>,
    pub bicubic_psnr: Option<f64>,
}

impl From<&LpaeEpochLog> for EpochRecord {
    fn from(l: &LpaeEpochLog) -> Self {
        EpochRecord {
            epoch: l.epoch,
            step: l.step,
            loss: l.total,
            psnr: l.eval.map(|e| e.psnr),
            bicubic_psnr: l.eval.map(|e| e.bicubic_psnr),
        }
    }
}

impl From<&SrEpochLog> for EpochRecord {
    fn from(l: &SrEpochLog) -> Self {
        EpochRecord {
            epoch: l.epoch,
            step: l.step,
            loss: l.total,
            psnr: l.eval.map(|e| e.psnr),
            bicubic_psnr: l.eval.map(|e| e.bicubic_psnr),
        }
    }
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        lpae::container::write_atomic(path, text.as_bytes())?;
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub struct CsvLog {
    writer: csv::Writer<File>,
}

impl CsvLog {
    pub fn create(path: &Path, header: &[String]) -> Result<Self> {
        let mut writer = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        writer.write_record(header)?;
        writer.flush()?;
        Ok(CsvLog { writer })
    }

    pub fn lpae_header() -> Vec<String> {
        [
            "epoch",
            "step",
            "lr",
            "l_r",
            "l_e",
            "l_s",
            "l_total",
            "psnr",
            "bicubic_psnr",
            "approx_psnr",
            "detail_energy",
        ]
        .map(String::from)
        .to_vec()
    }

    pub fn sr_header(levels: usize) -> Vec<String> {
        let mut h: Vec<String> = ["epoch", "step", "lr", "l_total", "l_rec", "l1_approx"]
            .map(String::from)
            .to_vec();
        h.extend((1..=levels).map(|k| format!("l1_detail_{k}")));
        h.extend(["psnr", "bicubic_psnr"].map(String::from));
        h
    }

    pub fn lpae_row(&mut self, l: &LpaeEpochLog) -> Result<()> {
        let e = l.eval;
        self.writer.write_record([
            l.epoch.to_string(),
            l.step.to_string(),
            l.lr.to_string(),
            l.terms.reconstruction.to_string(),
            l.terms.energy.to_string(),
            l.terms.sparsity.to_string(),
            l.total.to_string(),
            opt(e.map(|e| e.psnr)),
            opt(e.map(|e| e.bicubic_psnr)),
            opt(e.map(|e| e.approx_psnr)),
            opt(e.map(|e| e.detail_energy)),
        ])?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn sr_row(&mut self, l: &SrEpochLog) -> Result<()> {
        let mut row = vec![
            l.epoch.to_string(),
            l.step.to_string(),
            l.lr.to_string(),
            l.total.to_string(),
            l.reconstruction.to_string(),
            l.approx_l1.to_string(),
        ];
        row.extend(l.detail_l1.iter().map(|d| d.to_string()));
        row.push(opt(l.eval.map(|e| e.psnr)));
        row.push(opt(l.eval.map(|e| e.bicubic_psnr)));
        self.writer.write_record(&row)?;
        self.writer.flush()?;
        Ok(())
    }
}
