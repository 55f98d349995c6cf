//! Trace CSV and summary JSON serialization.
//!
//! Trace columns, in order:
//! `lambda, particle_id, x_0..x_{n-1}, log_p, y_0..y_{n-1}, V, V1, V2, LV,
//! gamma, partition`. Floats carry 17 significant digits so parsing them
//! back reproduces the exact bit pattern.

use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use flowfilt_core::lyapunov_diagnostics::DiagnosticsRecord;

/// 17 significant digits: exact f64 round-trip.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn trace_header(dim: usize) -> String {
    let mut cols = vec!["lambda".to_string(), "particle_id".to_string()];
    cols.extend((0..dim).map(|i| format!("x_{i}")));
    cols.push("log_p".to_string());
    cols.extend((0..dim).map(|i| format!("y_{i}")));
    for name in ["V", "V1", "V2", "LV", "gamma", "partition"] {
        cols.push(name.to_string());
    }
    cols.join(",")
}

pub fn write_trace_row(out: &mut impl Write, record: &DiagnosticsRecord) -> io::Result<()> {
    let mut fields = Vec::with_capacity(9 + 2 * record.x.len());
    fields.push(format_float(record.lambda));
    fields.push(record.particle_id.to_string());
    fields.extend(record.x.iter().map(|&v| format_float(v)));
    fields.push(format_float(record.log_p));
    fields.extend(record.y.iter().map(|&v| format_float(v)));
    fields.push(format_float(record.v));
    fields.push(format_float(record.v1));
    fields.push(format_float(record.v2));
    fields.push(format_float(record.lv));
    fields.push(format_float(record.gamma));
    fields.push(record.partition.as_str().to_string());
    writeln!(out, "{}", fields.join(","))
}

/// Gaussian moments as plain nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentsOut {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

impl MomentsOut {
    pub fn from_moments(m: &flowfilt_core::quadratic_model::PosteriorMoments) -> Self {
        Self {
            mean: m.mean.iter().copied().collect(),
            covariance: (0..m.covariance.nrows())
                .map(|i| {
                    (0..m.covariance.ncols())
                        .map(|j| m.covariance[(i, j)])
                        .collect()
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionOccupancy {
    pub lambda: f64,
    pub s1: usize,
    pub s2: usize,
    pub s3: usize,
}

/// End-of-run report; serialized as pretty JSON next to the trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub seed: u64,
    pub mode: String,
    pub particles: usize,
    pub final_sample_moments: Option<MomentsOut>,
    pub reference_posterior: Option<MomentsOut>,
    pub mahalanobis_gap: Option<f64>,
    pub covariance_gap: Option<f64>,
    /// Max relative drift of V along the flow; reported for zero diffusion.
    pub exact_flow_v_drift: Option<f64>,
    pub gamma_min: Option<f64>,
    pub gamma_max: Option<f64>,
    /// Partition counts at the recorded λ closest to 0, ½, and 1.
    pub partition_occupancy: Vec<PartitionOccupancy>,
    pub duration_seconds: f64,
    pub error: Option<String>,
}

impl RunSummary {
    /// Every reported number must be finite.
    pub fn check_finite(&self) -> Result<(), String> {
        let mut values: Vec<f64> = vec![self.duration_seconds];
        for m in [&self.final_sample_moments, &self.reference_posterior]
            .into_iter()
            .flatten()
        {
            values.extend(&m.mean);
            values.extend(m.covariance.iter().flatten());
        }
        values.extend(
            [
                self.mahalanobis_gap,
                self.covariance_gap,
                self.exact_flow_v_drift,
                self.gamma_min,
                self.gamma_max,
            ]
            .into_iter()
            .flatten(),
        );
        match values.iter().find(|v| !v.is_finite()) {
            Some(v) => Err(format!("summary contains a non-finite value: {v}")),
            None => Ok(()),
        }
    }

    pub fn write_json(&self, path: &Path) -> io::Result<()> {
        let file = std::fs::File::create(path)?;
        let mut writer = io::BufWriter::new(file);
        serde_json::to_writer_pretty(&mut writer, self)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        writeln!(writer)?;
        writer.flush()
    }
}
