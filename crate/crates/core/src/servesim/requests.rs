use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: usize,
    pub arrival_s: f64,
    pub input_len: u64,
    pub output_len: u64,
    pub first_token_s: Option<f64>,
    pub finish_s: Option<f64>,
    /// Emission time of every generated token; the first is the prefill's.
    pub token_times: Vec<f64>,
}

impl Request {
    pub fn new(id: usize, arrival_s: f64, input_len: u64, output_len: u64) -> Self {
        Self { id, arrival_s, input_len, output_len, first_token_s: None, finish_s: None, token_times: Vec::new() }
    }

    pub fn is_done(&self) -> bool {
        self.finish_s.is_some()
    }

    pub fn ttft(&self) -> Option<f64> {
        self.first_token_s.map(|t| t - self.arrival_s)
    }

    pub fn e2e(&self) -> Option<f64> {
        self.finish_s.map(|t| t - self.arrival_s)
    }

    /// Gaps between consecutive tokens.
    pub fn gaps(&self) -> Vec<f64> {
        self.token_times.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRow {
    pub input_len: u64,
    pub output_len: u64,
}

/// Where request lengths come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthSource {
    /// Rows sampled uniformly with replacement.
    Trace(Vec<TraceRow>),
    Fixed {
        input_len: u64,
        output_len: u64,
    },
    /// Inclusive uniform ranges.
    Uniform {
        input: (u64, u64),
        output: (u64, u64),
    },
}

impl LengthSource {
    pub(crate) fn sample(&self, rng: &mut ChaCha8Rng) -> Result<(u64, u64)> {
        match self {
            LengthSource::Trace(rows) => {
                if rows.is_empty() {
                    return Err(Error::EmptyTrace);
                }
                let r = rows[rng.random_range(0..rows.len())];
                Ok((r.input_len, r.output_len))
            }
            LengthSource::Fixed { input_len, output_len } => Ok((*input_len, *output_len)),
            LengthSource::Uniform { input, output } => {
                Ok((rng.random_range(input.0..=input.1), rng.random_range(output.0..=output.1)))
            }
        }
    }

    pub fn mean_lengths(&self) -> (f64, f64) {
        match self {
            LengthSource::Trace(rows) if !rows.is_empty() => {
                let n = rows.len() as f64;
                (
                    rows.iter().map(|r| r.input_len as f64).sum::<f64>() / n,
                    rows.iter().map(|r| r.output_len as f64).sum::<f64>() / n,
                )
            }
            LengthSource::Trace(_) => (0.0, 0.0),
            LengthSource::Fixed { input_len, output_len } => (*input_len as f64, *output_len as f64),
            LengthSource::Uniform { input, output } => {
                ((input.0 + input.1) as f64 / 2.0, (output.0 + output.1) as f64 / 2.0)
            }
        }
    }

    pub fn max_input(&self) -> u64 {
        match self {
            LengthSource::Trace(rows) => rows.iter().map(|r| r.input_len).max().unwrap_or(0),
            LengthSource::Fixed { input_len, .. } => *input_len,
            LengthSource::Uniform { input, .. } => input.1,
        }
    }
}

/// Read an `input_len,output_len` CSV.
pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRow>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize().enumerate() {
        let row: TraceRow =
            rec.map_err(|e| Error::Parse { path: path.to_path_buf(), message: format!("row {}: {e}", i + 2) })?;
        if row.input_len == 0 || row.output_len == 0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: format!("row {}: lengths must be at least 1", i + 2),
            });
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyTrace);
    }
    Ok(rows)
}

/// Poisson arrivals over `[0, duration_s)` with lengths from `source`.
pub fn generate_requests(source: &LengthSource, rate_rps: f64, duration_s: f64, seed: u64) -> Result<Vec<Request>> {
    if !(rate_rps > 0.0 && rate_rps.is_finite()) {
        return Err(Error::InvalidParameter(format!("rate must be positive (got {rate_rps})")));
    }
    if let LengthSource::Trace(rows) = source {
        if rows.is_empty() {
            return Err(Error::EmptyTrace);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gap = Exp::new(rate_rps).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut out = Vec::new();
    let mut t = gap.sample(&mut rng);
    while t < duration_s {
        let (i, o) = source.sample(&mut rng)?;
        out.push(Request::new(out.len(), t, i, o));
        t += gap.sample(&mut rng);
    }
    Ok(out)
}
