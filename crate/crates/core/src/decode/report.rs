use std::io::Write;

use super::{DecodeError, DecodeOutput};
use crate::env::EnvId;

/// Percentage gap to a best-known value: `(cost − bks) / |bks|` for
/// minimization, `(bks − value) / bks` for maximization.
/// `x` with two decimals, printing a rounded-away negative as `0.00`.
pub fn two_places(x: f64) -> String {
    let s = format!("{x:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

pub fn gap(cost: f64, best_known: f64, maximize: bool) -> Result<f64, DecodeError> {
    if best_known == 0.0 {
        return Err(DecodeError::ZeroReference);
    }
    Ok(if maximize { (best_known - cost) / best_known * 100.0 } else { (cost - best_known) / best_known.abs() * 100.0 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub instance_id: usize,
    pub scheme: String,
    pub cost: f64,
    pub gap_pct: Option<f64>,
    pub samples: usize,
    /// Wall time of the whole batch.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_cost: f64,
    pub mean_gap: Option<f64>,
    pub seconds: f64,
    pub samples: usize,
}

impl EvalReport {
    /// `label` names the scheme or search method in the CSV.
    pub fn new(
        label: &str,
        env: EnvId,
        costs: &[f32],
        best_known: Option<&[f64]>,
        samples: usize,
        seconds: f64,
    ) -> Result<Self, DecodeError> {
        if let Some(bks) = best_known {
            if bks.len() != costs.len() {
                return Err(DecodeError::ReferenceLength(bks.len(), costs.len()));
            }
        }
        let rows = costs
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let gap_pct = best_known.map(|bks| gap(c as f64, bks[i], env.maximize())).transpose()?;
                Ok(EvalRow { instance_id: i, scheme: label.to_string(), cost: c as f64, gap_pct, samples, seconds })
            })
            .collect::<Result<Vec<_>, DecodeError>>()?;
        let n = rows.len().max(1) as f64;
        let mean_cost = rows.iter().map(|r| r.cost).sum::<f64>() / n;
        let mean_gap = best_known.map(|_| rows.iter().filter_map(|r| r.gap_pct).sum::<f64>() / n);
        Ok(EvalReport { rows, mean_cost, mean_gap, seconds, samples })
    }

    pub fn from_output(out: &DecodeOutput, env: EnvId, best_known: Option<&[f64]>) -> Result<Self, DecodeError> {
        Self::new(&out.scheme.to_string(), env, &out.costs(env), best_known, out.samples, out.seconds)
    }
}

/// Writes `instance_id, scheme, cost, gap_pct, samples, seconds` rows; cost
/// and gap with two decimals, the gap column empty without a reference.
pub fn write_csv<W: Write>(w: W, reports: &[&EvalReport], header: bool) -> Result<(), DecodeError> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    if header {
        out.write_record(["instance_id", "scheme", "cost", "gap_pct", "samples", "seconds"])?;
    }
    for report in reports {
        for r in &report.rows {
            out.write_record([
                r.instance_id.to_string(),
                r.scheme.clone(),
                format!("{:.2}", r.cost),
                r.gap_pct.map(two_places).unwrap_or_default(),
                r.samples.to_string(),
                format!("{:.3}", r.seconds),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}
