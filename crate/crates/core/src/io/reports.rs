//! CSV reports and the run manifest.
//!
//! Floats are written in the shortest scientific form that parses back to
//! the same `f64`. Missing values are empty fields. Rows follow latent or input order, so
//! identical inputs give identical bytes.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::diffing::{LatentClassification, TwinPair};
use crate::error::Result;
use crate::patching::PatchResult;
use crate::scaling::LatentScaling;
use crate::trainer::StepRecord;

pub const HISTOGRAM_BINS: usize = 20;

pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{x:e}")
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_latents(path: &Path, classes: &[LatentClassification]) -> Result<()> {
    write_rows(
        path,
        &["latent_id", "delta_norm", "class", "freq", "dead_flag"],
        classes.iter().map(|c| {
            vec![
                c.latent.to_string(),
                fmt_opt(c.delta_norm),
                c.class.map(|k| k.as_str()).unwrap_or("dead").to_string(),
                fmt_f64(c.freq),
                (c.dead as u8).to_string(),
            ]
        }),
    )
}

pub fn write_twins(path: &Path, pairs: &[TwinPair]) -> Result<()> {
    write_rows(
        path,
        &["chat_id", "base_id", "cosine", "divergence"],
        pairs.iter().map(|p| {
            vec![p.chat_latent.to_string(), p.base_latent.to_string(), fmt_f64(p.cosine), fmt_opt(p.divergence)]
        }),
    )
}

/// `rank_sum` pairs come from `scaling::rank_sum_order`.
pub fn write_scaling(path: &Path, rows: &[LatentScaling], rank_sum: &[(usize, f64)]) -> Result<()> {
    let key = |j: usize| rank_sum.iter().find(|(l, _)| *l == j).map(|(_, s)| *s);
    write_rows(
        path,
        &[
            "latent_id",
            "beta_r_base",
            "beta_r_chat",
            "beta_eps_base",
            "beta_eps_chat",
            "nu_r",
            "nu_eps",
            "support_count",
            "rank_sum",
            "mse_impr_r_base",
            "mse_impr_r_chat",
            "mse_impr_eps_base",
            "mse_impr_eps_chat",
            "flags",
        ],
        rows.iter().map(|r| {
            let b = r.betas;
            let m = r.mse;
            vec![
                r.latent.to_string(),
                fmt_opt(b.map(|b| b.beta_r_base)),
                fmt_opt(b.map(|b| b.beta_r_chat)),
                fmt_opt(b.map(|b| b.beta_eps_base)),
                fmt_opt(b.map(|b| b.beta_eps_chat)),
                fmt_opt(b.map(|b| b.nu_r)),
                fmt_opt(b.map(|b| b.nu_eps)),
                r.support.to_string(),
                fmt_opt(key(r.latent)),
                fmt_opt(m.map(|m| m.r_base)),
                fmt_opt(m.map(|m| m.r_chat)),
                fmt_opt(m.map(|m| m.eps_base)),
                fmt_opt(m.map(|m| m.eps_chat)),
                r.flags(),
            ]
        }),
    )
}

pub fn write_patch(path: &Path, results: &[PatchResult]) -> Result<()> {
    write_rows(
        path,
        &["spec", "kl_mean_all", "kl_mean_first9", "n_positions"],
        results.iter().map(|r| {
            vec![r.label.clone(), fmt_f64(r.kl_mean_all), fmt_f64(r.kl_mean_first9), r.n_positions.to_string()]
        }),
    )
}

pub fn write_histogram(path: &Path, counts: &[usize]) -> Result<()> {
    let bins = counts.len().max(1) as f64;
    write_rows(
        path,
        &["bin_lo", "bin_hi", "count"],
        counts
            .iter()
            .enumerate()
            .map(|(i, c)| vec![fmt_f64(i as f64 / bins), fmt_f64((i + 1) as f64 / bins), c.to_string()]),
    )
}

/// One row per latent with both ratios defined.
pub fn write_nu_scatter(path: &Path, rows: &[LatentScaling], classes: &[LatentClassification]) -> Result<()> {
    write_rows(
        path,
        &["latent_id", "class", "delta_norm", "nu_r", "nu_eps"],
        rows.iter().filter_map(|r| {
            let b = r.betas?;
            let c = classes.iter().find(|c| c.latent == r.latent);
            Some(vec![
                r.latent.to_string(),
                c.and_then(|c| c.class).map(|k| k.as_str()).unwrap_or("dead").to_string(),
                fmt_opt(c.and_then(|c| c.delta_norm)),
                fmt_f64(b.nu_r),
                fmt_f64(b.nu_eps),
            ])
        }),
    )
}

pub fn write_train_log(path: &Path, history: &[StepRecord]) -> Result<()> {
    write_rows(
        path,
        &["step", "recon_base", "recon_chat", "sparsity", "aux", "total", "l0", "selected", "fve", "dead_fraction"],
        history.iter().map(|s| {
            vec![
                s.step.to_string(),
                fmt_f64(s.loss.recon_base),
                fmt_f64(s.loss.recon_chat),
                fmt_f64(s.loss.sparsity),
                fmt_f64(s.loss.aux),
                fmt_f64(s.loss.total),
                fmt_f64(s.l0),
                s.selected.to_string(),
                fmt_f64(s.fve),
                fmt_f64(s.dead_fraction),
            ]
        }),
    )
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Run provenance written as `manifest.txt` in key = value form.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub artifacts: Vec<String>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        format!(
            "tool = {}\nversion = {}\nformat_weights = XCODER01\nformat_batch = XDIFFACT\ncommand = {}\nconfig_sha256 = {}\nseed = {}\nartifacts = {}\n",
            env!("CARGO_PKG_NAME"),
            env!("CARGO_PKG_VERSION"),
            self.command,
            self.config_hash,
            self.seed,
            self.artifacts.join(",")
        )
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("manifest.txt"), self.to_text())?;
        Ok(())
    }
}
