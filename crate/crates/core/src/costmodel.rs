//! Closed-form communication, server-FLOP and memory accounting.
//!
//! Counts are exact parameter tallies per round, summed over every adapted
//! matrix and every client. Heterogeneous FedIT and FFA-LoRA cohorts are
//! accounted at the padded rank `max r_k`. FLOP counts use the same kernel
//! costs the dense kernels charge at run time (`2abc` per product,
//! `14·d_max·d_min²` per thin SVD, one per scaled entry), so an instrumented
//! aggregation run reproduces [`flops_estimate`] exactly.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::adapters::{ClientConfig, ModelConfig};
use crate::aggregation::Method;
use crate::error::{Error, Result};
use crate::tensor::track::{matmul_flops, SVD_FLOP_CONSTANT};

/// Bytes per reported megabyte.
pub const BYTES_PER_MB: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostScenario {
    pub model: ModelConfig,
    pub clients: Vec<ClientConfig>,
    pub method: Method,
    /// Global rank per `(layer, projection)` in layer-major order; FLoRIST only.
    pub per_layer_p: Option<Vec<usize>>,
    /// Constant `c` in the thin-SVD cost `c·d_max·d_min²`.
    #[serde(default = "default_svd_constant")]
    pub svd_constant: u64,
}

fn default_svd_constant() -> u64 {
    SVD_FLOP_CONSTANT
}

impl CostScenario {
    pub fn new(
        model: ModelConfig,
        clients: Vec<ClientConfig>,
        method: Method,
        per_layer_p: Option<Vec<usize>>,
    ) -> Result<Self> {
        let s = Self {
            model,
            clients,
            method,
            per_layer_p,
            svd_constant: SVD_FLOP_CONSTANT,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients.is_empty() {
            return Err(Error::InvalidArgument("cost scenario needs at least one client".into()));
        }
        if self.clients.iter().any(|c| c.rank == 0) {
            return Err(Error::InvalidArgument("client ranks must be >= 1".into()));
        }
        match (&self.per_layer_p, self.method) {
            (None, Method::Florist) => Err(Error::MissingLayerRanks),
            (Some(p), Method::Florist) if p.len() != self.model.matrix_count() => Err(Error::InvalidArgument(format!(
                "{} per-layer ranks for {} adapted matrices",
                p.len(),
                self.model.matrix_count()
            ))),
            (Some(_), m) if m != Method::Florist => Err(Error::InvalidArgument(format!(
                "per-layer ranks only apply to FLoRIST, not {m}"
            ))),
            _ => Ok(()),
        }
    }

    /// Same scenario with another method (per-layer ranks dropped or kept as needed).
    pub fn with_method(&self, method: Method, per_layer_p: Option<Vec<usize>>) -> Result<Self> {
        let mut s = self.clone();
        s.method = method;
        s.per_layer_p = if method == Method::Florist {
            per_layer_p.or_else(|| self.per_layer_p.clone())
        } else {
            None
        };
        s.validate()?;
        Ok(s)
    }

    fn k(&self) -> u64 {
        self.clients.len() as u64
    }

    fn max_rank(&self) -> u64 {
        self.clients.iter().map(|c| c.rank).max().unwrap_or(0) as u64
    }

    fn sum_rank(&self) -> u64 {
        self.clients.iter().map(|c| c.rank as u64).sum()
    }

    /// Iterates `(m, n, p)` over adapted matrices; `p` is 0 outside FLoRIST.
    fn matrices(&self) -> impl Iterator<Item = (u64, u64, u64)> + '_ {
        self.model.keys().enumerate().map(move |(i, key)| {
            let (m, n) = self.model.dims(key);
            let p = self.per_layer_p.as_ref().map_or(0, |p| p[i]);
            (m as u64, n as u64, p as u64)
        })
    }

    fn svd_cost(&self, rows: u64, cols: u64) -> u64 {
        let (hi, lo) = (rows.max(cols), rows.min(cols));
        self.svd_constant * hi * lo * lo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub method: Method,
    pub clients: usize,
    pub bytes_per_param: usize,
    pub upload_params: u64,
    pub download_params: u64,
    pub upload_bytes: u64,
    pub download_bytes: u64,
    /// One-time broadcast of the frozen FFA-LoRA `A`; not part of per-round traffic.
    pub a_init_params: u64,
    pub server_flops: u64,
    pub client_peak_params: u64,
    pub server_peak_params: u64,
    pub total_rank: Option<f64>,
    pub efficiency: Option<f64>,
}

impl CostReport {
    pub fn upload_mb(&self) -> f64 {
        self.upload_bytes as f64 / BYTES_PER_MB
    }

    pub fn download_mb(&self) -> f64 {
        self.download_bytes as f64 / BYTES_PER_MB
    }
}

/// Per-round `(upload_params, download_params)` summed over all clients.
pub fn comm_cost(s: &CostScenario) -> Result<(u64, u64)> {
    s.validate()?;
    let (k, rmax, rsum) = (s.k(), s.max_rank(), s.sum_rank());
    let mut up = 0;
    let mut down = 0;
    for (m, n, p) in s.matrices() {
        let (u, d) = match s.method {
            Method::FullFt => (k * m * n, k * m * n),
            Method::FedIt => (k * rmax * (m + n), k * rmax * (m + n)),
            Method::FfaLora => (k * rmax * m, k * rmax * m),
            Method::Flora => (rsum * (m + n), k * rsum * (m + n)),
            Method::FlexLora => {
                let q = m.min(n);
                let d = s.clients.iter().map(|c| (c.rank as u64).min(q)).sum::<u64>() * (m + n);
                (rsum * (m + n), d)
            }
            Method::Florist => (rsum * (m + n), k * p * (m + n)),
        };
        up += u;
        down += d;
    }
    Ok((up, down))
}

/// One-time FFA-LoRA broadcast of the frozen `A` to every client.
pub fn a_init_params(s: &CostScenario) -> u64 {
    if s.method != Method::FfaLora {
        return 0;
    }
    s.matrices().map(|(_, n, _)| s.k() * s.max_rank() * n).sum()
}

/// Server FLOPs for one aggregation round.
pub fn flops_estimate(s: &CostScenario) -> Result<u64> {
    s.validate()?;
    let (k, rmax, r) = (s.k(), s.max_rank(), s.sum_rank());
    let mut total = 0;
    for (m, n, p) in s.matrices() {
        total += match s.method {
            Method::FullFt => 2 * k * m * n,
            Method::FedIt => 2 * k * rmax * (m + n),
            Method::FfaLora => 2 * k * rmax * m,
            Method::Flora => 0,
            Method::FlexLora => {
                let q = m.min(n);
                let truncation: u64 = s.clients.iter().map(|c| m * (c.rank as u64).min(q)).sum();
                matmul_flops(m as usize, r as usize, n as usize) + s.svd_cost(m, n) + truncation
            }
            Method::Florist => {
                let qb = m.min(r);
                let qa = r.min(n);
                let mut f = s.svd_cost(m, r) + s.svd_cost(r, n);
                f += 2 * qb * r * qa; // V_Bᵀ · U_A
                f += 2 * qb * qa; // row and column scalings
                f += s.svd_cost(qb, qa);
                if p > 0 {
                    f += 2 * m * qb * p + m * p; // (U_B · U_P) · diag(S_P)
                    f += 2 * p * qa * n; // V_Pᵀ · V_Aᵀ
                }
                f
            }
        };
    }
    Ok(total)
}

/// `(client_peak_params, server_peak_params)`: resident parameter counts.
///
/// The server bound holds every layer's uploads and outputs plus the working
/// set of the most expensive single matrix, all intermediates counted live.
pub fn memory_cost(s: &CostScenario) -> Result<(u64, u64)> {
    s.validate()?;
    let (k, rmax, r) = (s.k(), s.max_rank(), s.sum_rank());
    let mut base = 0;
    let mut client_adapter = vec![0u64; s.clients.len()];
    let mut client_download = vec![0u64; s.clients.len()];
    let mut server_resident = 0;
    let mut server_working = 0;
    for (m, n, p) in s.matrices() {
        base += m * n;
        let q = m.min(n);
        for (i, c) in s.clients.iter().enumerate() {
            let rk = c.rank as u64;
            client_adapter[i] += rk * (m + n);
            client_download[i] += match s.method {
                Method::FullFt => 0,
                Method::FedIt => rmax * (m + n),
                Method::FfaLora => rmax * m,
                Method::Flora => r * (m + n),
                Method::FlexLora => rk.min(q) * (m + n),
                Method::Florist => p * (m + n),
            };
        }
        let (resident, working) = match s.method {
            Method::FullFt => (k * m * n + m * n, 0),
            Method::FedIt => (k * rmax * (m + n) + rmax * (m + n), k * rmax * (m + n)),
            Method::FfaLora => (k * rmax * m + rmax * (m + n), k * rmax * (m + n)),
            Method::Flora => (r * (m + n) + r * (m + n), r * n),
            Method::FlexLora => {
                let out: u64 = s.clients.iter().map(|c| (c.rank as u64).min(q) * (m + n)).sum();
                let svd = m * q + q * n;
                (r * (m + n) + out, r * (m + n) + r * n + m * n + svd + m * q)
            }
            Method::Florist => {
                let (qb, qa) = (m.min(r), r.min(n));
                let qp = qb.min(qa);
                let stack = r * (m + n) + r * n;
                let svds = (m * qb + qb * r) + (r * qa + qa * n) + (qb * qp + qp * qa);
                let core = 3 * qb * qa;
                let rebuild = qb * p + 2 * m * p + p * qa;
                (r * (m + n) + p * (m + n), stack + svds + core + rebuild)
            }
        };
        server_resident += resident;
        server_working = server_working.max(working);
    }
    let client_peak = if s.method == Method::FullFt {
        base
    } else {
        (0..s.clients.len())
            .map(|i| base + client_adapter[i] + client_download[i])
            .max()
            .unwrap_or(base)
    };
    Ok((client_peak, server_resident + server_working))
}

/// Sum over matrices of the rank each client receives, following the
/// efficiency-table convention: padded rank for FedIT, half of it for
/// FFA-LoRA (only `B` moves), the full stack for FLoRA, the mean client rank
/// for FlexLoRA and `p` for FLoRIST. `None` for full fine-tuning.
pub fn total_rank(s: &CostScenario) -> Result<Option<f64>> {
    s.validate()?;
    let (k, rmax, r) = (s.k() as f64, s.max_rank() as f64, s.sum_rank() as f64);
    let per_matrix = |p: u64| match s.method {
        Method::FullFt => None,
        Method::FedIt => Some(rmax),
        Method::FfaLora => Some(rmax / 2.0),
        Method::Flora => Some(r),
        Method::FlexLora => Some(r / k),
        Method::Florist => Some(p as f64),
    };
    Ok(s.matrices().map(|(_, _, p)| per_matrix(p)).sum())
}

/// Communication efficiency `1 / total_rank`.
pub fn efficiency(total_rank: f64) -> Result<f64> {
    if !(total_rank > 0.0 && total_rank.is_finite()) {
        return Err(Error::ZeroTotalRank);
    }
    Ok(1.0 / total_rank)
}

pub fn cost_report(s: &CostScenario) -> Result<CostReport> {
    let (upload_params, download_params) = comm_cost(s)?;
    let (client_peak_params, server_peak_params) = memory_cost(s)?;
    let total_rank = total_rank(s)?;
    let bpp = s.model.bytes_per_param() as u64;
    Ok(CostReport {
        method: s.method,
        clients: s.clients.len(),
        bytes_per_param: s.model.bytes_per_param(),
        upload_params,
        download_params,
        upload_bytes: upload_params * bpp,
        download_bytes: download_params * bpp,
        a_init_params: a_init_params(s),
        server_flops: flops_estimate(s)?,
        client_peak_params,
        server_peak_params,
        total_rank,
        efficiency: total_rank.map(efficiency).transpose()?,
    })
}

/// Cohort of `k` clients cycling through `base`'s ranks and dataset sizes.
pub fn replicate_cohort(base: &[ClientConfig], k: usize) -> Vec<ClientConfig> {
    (0..k)
        .map(|i| {
            let c = base[i % base.len()];
            ClientConfig::new(i, c.rank, c.dataset_size)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub clients: usize,
    pub upload_params: u64,
    pub download_params: u64,
    pub download_per_client: f64,
}

/// Per-round traffic of `method` as the cohort grows to each of `client_counts`.
/// Cohorts cycle the base client pattern; FLoRIST keeps the base per-layer ranks.
pub fn scaling_curve(method: Method, base: &CostScenario, client_counts: &[usize]) -> Result<Vec<ScalingPoint>> {
    if client_counts.windows(2).any(|w| w[0] >= w[1]) || client_counts.first() == Some(&0) {
        return Err(Error::InvalidArgument(
            "client counts must be positive and ascending".into(),
        ));
    }
    client_counts
        .iter()
        .map(|&k| {
            let mut s = base.with_method(method, None)?;
            s.clients = replicate_cohort(&base.clients, k);
            let (up, down) = comm_cost(&s)?;
            Ok(ScalingPoint {
                clients: k,
                upload_params: up,
                download_params: down,
                download_per_client: down as f64 / k as f64,
            })
        })
        .collect()
}

/// Smallest cohort size at which FLoRA's per-round download exceeds full
/// fine-tuning's, searching up to `max_clients`.
pub fn flora_fullft_crossover(base: &CostScenario, max_clients: usize) -> Result<Option<usize>> {
    for k in 1..=max_clients {
        let mut flora = base.with_method(Method::Flora, None)?;
        flora.clients = replicate_cohort(&base.clients, k);
        let mut full = flora.clone();
        full.method = Method::FullFt;
        if comm_cost(&flora)?.1 > comm_cost(&full)?.1 {
            return Ok(Some(k));
        }
    }
    Ok(None)
}

#[derive(Serialize)]
struct CsvRow<'a> {
    method: &'a str,
    #[serde(rename = "K")]
    k: usize,
    upload_params: u64,
    download_params: u64,
    #[serde(rename = "upload_MB")]
    upload_mb: String,
    #[serde(rename = "download_MB")]
    download_mb: String,
    server_flops: u64,
    total_rank: String,
    efficiency: String,
}

/// Writes reports as CSV with a header row, in the order given.
pub fn write_reports_csv<W: Write>(reports: &[CostReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(CsvRow {
            method: r.method.name(),
            k: r.clients,
            upload_params: r.upload_params,
            download_params: r.download_params,
            upload_mb: format!("{:.4}", r.upload_mb()),
            download_mb: format!("{:.4}", r.download_mb()),
            server_flops: r.server_flops,
            total_rank: r.total_rank.map_or_else(String::new, |t| format!("{t}")),
            efficiency: r.efficiency.map_or_else(String::new, |e| format!("{e:.6e}")),
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn homo(k: usize, r: usize) -> Vec<ClientConfig> {
        (0..k).map(|i| ClientConfig::new(i, r, 100)).collect()
    }

    fn scenario(model: ModelConfig, clients: Vec<ClientConfig>, method: Method) -> CostScenario {
        let p = (method == Method::Florist).then(|| vec![3; model.matrix_count()]);
        CostScenario::new(model, clients, method, p).unwrap()
    }

    #[test]
    fn ffa_upload_is_half_of_fedit_on_square_layers() {
        let model = ModelConfig::square(4, 32).unwrap();
        let fedit = comm_cost(&scenario(model.clone(), homo(8, 16), Method::FedIt)).unwrap();
        let ffa = comm_cost(&scenario(model, homo(8, 16), Method::FfaLora)).unwrap();
        assert_eq!(fedit.0, 2 * ffa.0);
    }

    #[test]
    fn single_client_flora_download_equals_fedit() {
        let model = ModelConfig::square(2, 16).unwrap();
        let flora = comm_cost(&scenario(model.clone(), homo(1, 4), Method::Flora)).unwrap();
        let fedit = comm_cost(&scenario(model, homo(1, 4), Method::FedIt)).unwrap();
        assert_eq!(flora.1, fedit.1);
    }

    #[test]
    fn flora_download_matches_enumeration() {
        let model = ModelConfig::uniform(3, &[("q_proj", 12, 10), ("v_proj", 4, 10)], 2).unwrap();
        for k in [1, 2, 5] {
            let clients = homo(k, 3);
            let s = scenario(model.clone(), clients.clone(), Method::Flora);
            // Every receiver gets every sender's B_j (m×r_j) and A_j (r_j×n).
            let mut enumerated = 0u64;
            for _receiver in &clients {
                for key in model.keys() {
                    let (m, n) = model.dims(key);
                    for sender in &clients {
                        enumerated += (m * sender.rank + sender.rank * n) as u64;
                    }
                }
            }
            assert_eq!(comm_cost(&s).unwrap().1, enumerated);
        }
    }

    #[test]
    fn florist_requires_layer_ranks() {
        let model = ModelConfig::square(1, 8).unwrap();
        assert!(matches!(
            CostScenario::new(model.clone(), homo(2, 2), Method::Florist, None),
            Err(Error::MissingLayerRanks)
        ));
        assert!(CostScenario::new(model.clone(), homo(2, 2), Method::Florist, Some(vec![1])).is_err());
        assert!(CostScenario::new(model, homo(2, 2), Method::Flora, Some(vec![1, 1])).is_err());
    }

    #[test]
    fn flora_is_free_for_the_server() {
        let s = scenario(ModelConfig::square(3, 64).unwrap(), homo(4, 8), Method::Flora);
        assert_eq!(flops_estimate(&s).unwrap(), 0);
    }

    #[test]
    fn memory_term_presence() {
        let model = ModelConfig::square(2, 256).unwrap();
        let flex = memory_cost(&scenario(model.clone(), homo(4, 4), Method::FlexLora)).unwrap();
        let florist = memory_cost(&scenario(model.clone(), homo(4, 4), Method::Florist)).unwrap();
        assert!(flex.1 > florist.1);
        assert!(florist.1 < 2 * 256 * 256);
        let full = memory_cost(&scenario(model, homo(4, 4), Method::FullFt)).unwrap();
        assert_eq!(full.0, 2 * 2 * 256 * 256);
    }

    #[test]
    fn efficiency_cases() {
        assert_eq!(efficiency(1.0).unwrap(), 1.0);
        assert!(matches!(efficiency(0.0), Err(Error::ZeroTotalRank)));
        let s = scenario(ModelConfig::square(5, 16).unwrap(), homo(3, 16), Method::FedIt);
        assert_eq!(total_rank(&s).unwrap(), Some(16.0 * 5.0 * 2.0));
    }

    #[test]
    fn bytes_follow_params() {
        let model = ModelConfig::square(2, 16).unwrap().with_bytes_per_param(4);
        let r = cost_report(&scenario(model, homo(2, 4), Method::FedIt)).unwrap();
        assert_eq!(r.upload_bytes, 4 * r.upload_params);
        assert_eq!(r.download_bytes, 4 * r.download_params);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let model = ModelConfig::square(1, 8).unwrap();
        let reports: Vec<_> = Method::ALL
            .iter()
            .map(|&m| cost_report(&scenario(model.clone(), homo(2, 2), m)).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_reports_csv(&reports, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "method,K,upload_params,download_params,upload_MB,download_MB,server_flops,total_rank,efficiency"
        );
        assert_eq!(lines.count(), 6);
    }
}
