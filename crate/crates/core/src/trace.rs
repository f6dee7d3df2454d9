//! Per-iteration convergence records and the log-linear rate fit.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRecord {
    pub iter: usize,
    /// KL of the current coupling to the oracle coupling, nats.
    pub kl_to_oracle: f64,
    /// KL of the current coupling to the previous one, nats.
    pub kl_step: f64,
    pub wall_ms: f64,
}

/// Convergence history of one D-IMF run. Row `i` describes the coupling
/// after iteration `i` (zero-based) has completed.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ConvergenceTrace {
    records: Vec<TraceRecord>,
}

impl ConvergenceTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, kl_to_oracle: f64, kl_step: f64, wall_ms: f64) {
        let iter = self.records.len();
        self.records.push(TraceRecord { iter, kl_to_oracle, kl_step, wall_ms });
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn kl_values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.kl_to_oracle).collect()
    }

    /// Number of iterations executed when KL first dropped below `threshold`.
    pub fn iterations_to_threshold(&self, threshold: f64) -> Option<usize> {
        self.records.iter().position(|r| r.kl_to_oracle < threshold).map(|i| i + 1)
    }

    /// True when KL never increases by more than `slack` between rows,
    /// `initial` included as the value before the first row.
    pub fn is_monotone(&self, initial: f64, slack: f64) -> bool {
        let mut prev = initial;
        for r in &self.records {
            if r.kl_to_oracle > prev + slack {
                return false;
            }
            prev = r.kl_to_oracle;
        }
        true
    }

    /// Least-squares fit of `ln KL` against the iteration index over rows
    /// after the first 10% and strictly above `threshold`.
    pub fn log_linear_fit(&self, threshold: f64) -> Option<LogLinearFit> {
        let skip = self.records.len() / 10;
        let points: Vec<(f64, f64)> = self
            .records
            .iter()
            .skip(skip)
            .filter(|r| r.kl_to_oracle >= threshold && r.kl_to_oracle > 0.0)
            .map(|r| (r.iter as f64, r.kl_to_oracle.ln()))
            .collect();
        LogLinearFit::fit(&points)
    }
}

/// Ordinary least-squares line `y = intercept + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogLinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

impl LogLinearFit {
    /// Needs at least two points. With exactly two the line is exact (R² = 1).
    pub fn fit(points: &[(f64, f64)]) -> Option<Self> {
        let n = points.len();
        if n < 2 {
            return None;
        }
        let nf = n as f64;
        let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
        let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
        let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
        Some(Self { slope, intercept, r_squared, points: n })
    }
}
