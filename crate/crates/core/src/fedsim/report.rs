//! Tabular outputs. Every CSV starts with a header row; rows keep the order
//! they were produced in. List-valued fields are `;`-joined.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::RoundLog;
use crate::aggregation::Method;
use crate::costmodel::csv_err;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub total_rank: usize,
    pub recon_error: f64,
    pub recon_error_rel: f64,
    pub holdout_loss: f64,
    pub download_params: u64,
    pub efficiency: Option<f64>,
    /// `‖B_g A_g − ΔW‖_F²` summed over matrices.
    pub squared_error: f64,
    /// Squared singular values past each matrix's `p`, summed.
    pub discarded_energy: f64,
    pub total_energy: f64,
    pub layer_ranks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub layer: usize,
    pub projection: String,
    pub p: usize,
    pub retained_energy: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub layer: usize,
    pub projection: String,
    pub index: usize,
    pub singular_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub rows: Vec<RankRow>,
    pub spectra: Vec<SpectrumRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub cohort: String,
    pub method: Method,
    pub holdout_loss: f64,
    pub total_rank: f64,
    pub download_params: u64,
    pub server_flops: u64,
}

fn join(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

fn write_table<W: Write>(out: W, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rounds_csv<W: Write>(logs: &[RoundLog], out: W) -> Result<()> {
    write_table(
        out,
        &[
            "round",
            "method",
            "total_rank",
            "layer_ranks",
            "recon_error",
            "recon_error_rel",
            "holdout_loss",
            "train_loss",
            "upload_params",
            "download_params",
            "measured_upload_bytes",
            "measured_download_bytes",
            "server_flops",
            "round_seed",
        ],
        logs.iter().map(|l| {
            vec![
                l.round.to_string(),
                l.method.to_string(),
                l.layer_ranks.iter().sum::<usize>().to_string(),
                join(&l.layer_ranks),
                l.recon_error.to_string(),
                l.recon_error_rel.to_string(),
                l.holdout_loss.to_string(),
                l.train_loss.to_string(),
                l.cost.upload_params.to_string(),
                l.cost.download_params.to_string(),
                l.measured_upload_bytes.to_string(),
                l.measured_download_bytes.to_string(),
                l.cost.server_flops.to_string(),
                l.round_seed.to_string(),
            ]
        }),
    )
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    write_table(
        out,
        &[
            "tau",
            "total_rank",
            "recon_error",
            "holdout_loss",
            "download_params",
            "efficiency",
            "recon_error_rel",
            "squared_error",
            "discarded_energy",
            "layer_ranks",
        ],
        rows.iter().map(|r| {
            vec![
                r.tau.to_string(),
                r.total_rank.to_string(),
                r.recon_error.to_string(),
                r.holdout_loss.to_string(),
                r.download_params.to_string(),
                opt(r.efficiency),
                r.recon_error_rel.to_string(),
                r.squared_error.to_string(),
                r.discarded_energy.to_string(),
                join(&r.layer_ranks),
            ]
        }),
    )
}

pub fn write_rank_csv<W: Write>(report: &RankReport, out: W) -> Result<()> {
    write_table(
        out,
        &["layer", "projection", "p", "retained_energy", "tau"],
        report.rows.iter().map(|r| {
            vec![
                r.layer.to_string(),
                r.projection.clone(),
                r.p.to_string(),
                r.retained_energy.to_string(),
                r.tau.to_string(),
            ]
        }),
    )
}

pub fn write_spectra_csv<W: Write>(report: &RankReport, out: W) -> Result<()> {
    write_table(
        out,
        &["layer", "projection", "index", "singular_value"],
        report.spectra.iter().map(|r| {
            vec![
                r.layer.to_string(),
                r.projection.clone(),
                r.index.to_string(),
                r.singular_value.to_string(),
            ]
        }),
    )
}

pub fn write_compare_csv<W: Write>(rows: &[CompareRow], out: W) -> Result<()> {
    write_table(
        out,
        &[
            "cohort",
            "method",
            "holdout_loss",
            "total_rank",
            "download_params",
            "server_flops",
        ],
        rows.iter().map(|r| {
            vec![
                r.cohort.clone(),
                r.method.to_string(),
                r.holdout_loss.to_string(),
                r.total_rank.to_string(),
                r.download_params.to_string(),
                r.server_flops.to_string(),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_header_and_empty_efficiency() {
        let row = SweepRow {
            tau: 0.9,
            total_rank: 0,
            recon_error: 1.0,
            recon_error_rel: 1.0,
            holdout_loss: 2.0,
            download_params: 0,
            efficiency: None,
            squared_error: 1.0,
            discarded_energy: 1.0,
            total_energy: 1.0,
            layer_ranks: vec![0, 0],
        };
        let mut buf = Vec::new();
        write_sweep_csv(&[row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert!(lines
            .next()
            .unwrap()
            .starts_with("tau,total_rank,recon_error,holdout_loss,download_params,efficiency"));
        assert_eq!(lines.next().unwrap(), "0.9,0,1,2,0,,1,1,1,0;0");
    }
}
