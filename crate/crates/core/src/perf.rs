//! Cost model in abstract time units (one flop = one unit).
//!
//! A processor holding `b = n/p + 2√(n/p)` unknowns factors once at
//! `b^1.5` and then pays `2b` per iteration for substitutions plus
//! `α + β√b` to exchange its boundary with the neighbours.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::runtime::IterationRecord;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MachineModel {
    /// Per-message latency.
    pub alpha: f64,
    /// Per-word cost.
    pub beta: f64,
}

impl MachineModel {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0) {
            return Err(Error::malformed("machine costs must be non-negative"));
        }
        Ok(Self { alpha, beta })
    }

    pub fn free() -> Self {
        Self { alpha: 0.0, beta: 0.0 }
    }
}

/// Unknowns per processor including the halo.
pub fn block_size(n: usize, p: usize) -> f64 {
    let q = n as f64 / p as f64;
    q + 2.0 * q.sqrt()
}

pub fn parallel_time(n: usize, p: usize, k: usize, model: &MachineModel) -> Result<f64> {
    if p == 0 || n < p {
        return Err(Error::malformed(format!("need n >= p >= 1, got n = {n}, p = {p}")));
    }
    if k == 0 {
        return Err(Error::malformed("iteration count must be at least 1"));
    }
    let b = block_size(n, p);
    Ok(b.powf(1.5) + k as f64 * (2.0 * b + model.alpha + model.beta * b.sqrt()))
}

pub fn sequential_time(n: usize) -> f64 {
    let n = n as f64;
    n.powf(1.5) + 2.0 * n
}

pub fn speedup(n: usize, p: usize, k: usize, model: &MachineModel) -> Result<f64> {
    Ok(sequential_time(n) / parallel_time(n, p, k, model)?)
}

/// Large-`n` form `p^1.5 / (1 + 2K√(p/n) + Kβ p/n)`, valid for `α = 0`.
pub fn asymptotic_speedup(n: usize, p: usize, k: usize, beta: f64) -> f64 {
    let r = p as f64 / n as f64;
    let k = k as f64;
    (p as f64).powf(1.5) / (1.0 + 2.0 * k * r.sqrt() + k * beta * r)
}

/// First round whose RMS error is at most `epsilon`.
pub fn measure_k(records: &[IterationRecord], epsilon: f64) -> Option<usize> {
    records
        .iter()
        .find(|r| r.rms_error.is_some_and(|e| e <= epsilon))
        .map(|r| r.k)
}

pub const BENCH_HEADER: &str = "n,p,epsilon,K,T_p_pred,T_s_pred,speedup_pred";

/// One sweep cell; `k` is `None` when the threshold was never reached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub p: usize,
    pub epsilon: f64,
    pub k: Option<usize>,
}

impl BenchRow {
    /// CSV line; model columns stay blank without a measured `K`.
    pub fn to_csv(&self, model: &MachineModel) -> String {
        let mut out = format!("{},{},{},", self.n, self.p, fmt_f64(self.epsilon));
        let ts = fmt_f64(sequential_time(self.n));
        match self.k.and_then(|k| parallel_time(self.n, self.p, k, model).ok().map(|tp| (k, tp))) {
            Some((k, tp)) => {
                let _ = write!(out, "{k},{},{ts},{}", fmt_f64(tp), fmt_f64(sequential_time(self.n) / tp));
            }
            None => {
                let _ = write!(out, ",,{ts},");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_processor_example() {
        let b: f64 = 4096.0 + 128.0;
        let want = b.powf(1.5) + 2.0 * b;
        assert_eq!(parallel_time(4096, 1, 1, &MachineModel::free()).unwrap(), want);
        let three: f64 = 3.0;
        assert_eq!(parallel_time(5, 5, 1, &MachineModel::free()).unwrap(), three.powf(1.5) + 6.0);
    }

    #[test]
    fn alpha_adds_k_delta() {
        let a = parallel_time(1089, 4, 17, &MachineModel::new(1.0, 2.0).unwrap()).unwrap();
        let b = parallel_time(1089, 4, 17, &MachineModel::new(1.5, 2.0).unwrap()).unwrap();
        assert!((b - a - 17.0 * 0.5).abs() < 1e-9);
    }

    #[test]
    fn sequential_values() {
        assert_eq!(sequential_time(1), 3.0);
        assert_eq!(sequential_time(100), 1200.0);
    }

    #[test]
    fn preconditions() {
        assert!(parallel_time(4, 5, 1, &MachineModel::free()).is_err());
        assert!(parallel_time(4, 2, 0, &MachineModel::free()).is_err());
        assert!(MachineModel::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn speedup_increases_with_p() {
        let m = MachineModel::free();
        let s: Vec<f64> = (1..=64).map(|p| speedup(14641, p, 30, &m).unwrap()).collect();
        assert!(s.windows(2).all(|w| w[1] > w[0]));
        assert!(s[0] < 1.0);
    }

    #[test]
    fn asymptotic_form_is_close() {
        let exact = speedup(14641, 64, 30, &MachineModel::free()).unwrap();
        let approx = asymptotic_speedup(14641, 64, 30, 0.0);
        assert!((approx - exact).abs() / exact < 0.2, "{exact} vs {approx}");
    }

    fn recs(rms: &[f64]) -> Vec<IterationRecord> {
        rms.iter()
            .enumerate()
            .map(|(i, &r)| IterationRecord {
                k: i + 1,
                max_boundary_delta: 0.0,
                residual_inf: 0.0,
                rms_error: Some(r),
            })
            .collect()
    }

    #[test]
    fn measure_k_threshold_scan() {
        let mut rms = vec![1.0; 36];
        rms.push(1e-16);
        assert_eq!(measure_k(&recs(&rms), 2e-15), Some(37));
        assert_eq!(measure_k(&recs(&[1.0, 0.5]), 0.1), None);
    }

    #[test]
    fn csv_rows() {
        let m = MachineModel::free();
        let row = BenchRow { n: 289, p: 2, epsilon: 1e-9, k: Some(10) };
        let line = row.to_csv(&m);
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(&cells[..2], &["289", "2"]);
        assert_eq!(cells[2].parse::<f64>().unwrap(), 1e-9);
        assert_eq!(cells[3], "10");
        assert_eq!(line.split(',').count(), 7);
        let none = BenchRow { k: None, ..row }.to_csv(&m);
        assert_eq!(none.split(',').nth(3), Some(""));
    }
}
