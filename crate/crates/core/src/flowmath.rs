//! Reference arithmetic for the training objectives: straight-line flow
//! interpolation, its velocity, the flow MSE, masked cross-entropy and the
//! weighted total. Used to check the loss-mask layout numerically.

use rand::{Rng as _, SeedableRng};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FlowError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("sequence length mismatch: {0}")]
    LengthMismatch(String),
    #[error("position {0}: class out of range or empty score vector")]
    BadTarget(usize),
    #[error("non-finite input")]
    NonFinite,
}

fn same_dim(a: &[f64], b: &[f64]) -> Result<(), FlowError> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(FlowError::DimMismatch(a.len(), b.len()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub z0: Vec<f64>,
    pub z1: Vec<f64>,
    pub t: f64,
    pub zt: Vec<f64>,
}

impl FlowSample {
    pub fn new(z0: Vec<f64>, z1: Vec<f64>, t: f64) -> Result<Self, FlowError> {
        let zt = interpolate(&z0, &z1, t)?;
        Ok(FlowSample { z0, z1, t, zt })
    }
}

/// `t·z0 + (1−t)·z1`; the endpoints return copies so they are bit-exact.
pub fn interpolate(z0: &[f64], z1: &[f64], t: f64) -> Result<Vec<f64>, FlowError> {
    same_dim(z0, z1)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::TimeOutOfRange(t));
    }
    if t == 1.0 {
        return Ok(z0.to_vec());
    }
    if t == 0.0 {
        return Ok(z1.to_vec());
    }
    Ok(z0.iter().zip(z1).map(|(a, b)| t * a + (1.0 - t) * b).collect())
}

/// The constant velocity `z0 − z1` of the interpolation path.
pub fn velocity_target(z0: &[f64], z1: &[f64]) -> Result<Vec<f64>, FlowError> {
    same_dim(z0, z1)?;
    Ok(z0.iter().zip(z1).map(|(a, b)| a - b).collect())
}

/// Mean over components of the squared velocity error. The empty vector
/// has loss 0.
pub fn mse_flow_loss(pred: &[f64], z0: &[f64], z1: &[f64]) -> Result<f64, FlowError> {
    let v = velocity_target(z0, z1)?;
    same_dim(pred, &v)?;
    if v.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(&v).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / v.len() as f64)
}

/// Analytic gradient of [`mse_flow_loss`] with respect to `pred`.
pub fn mse_flow_grad(pred: &[f64], z0: &[f64], z1: &[f64]) -> Result<Vec<f64>, FlowError> {
    let v = velocity_target(z0, z1)?;
    same_dim(pred, &v)?;
    let n = v.len() as f64;
    Ok(pred.iter().zip(&v).map(|(p, t)| 2.0 * (p - t) / n).collect())
}

fn log_softmax_at(scores: &[f64], k: usize) -> f64 {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    scores[k] - lse
}

/// Summed negative log-likelihood over positions where `mask` is set.
/// An all-false mask gives 0.
pub fn masked_ce_loss(logits: &[Vec<f64>], targets: &[usize], mask: &[bool]) -> Result<f64, FlowError> {
    if logits.len() != targets.len() || targets.len() != mask.len() {
        return Err(FlowError::LengthMismatch(format!(
            "logits {}, targets {}, mask {}",
            logits.len(),
            targets.len(),
            mask.len()
        )));
    }
    let mut total = 0.0;
    for (i, ((scores, &k), &m)) in logits.iter().zip(targets).zip(mask).enumerate() {
        if !m {
            continue;
        }
        if k >= scores.len() {
            return Err(FlowError::BadTarget(i));
        }
        total -= log_softmax_at(scores, k);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBundle {
    pub ce: f64,
    pub mse: f64,
    pub lambda_ce: f64,
    pub total: f64,
}

pub fn total_loss(ce: f64, mse: f64, lambda_ce: f64) -> Result<LossBundle, FlowError> {
    if !(ce.is_finite() && mse.is_finite() && lambda_ce.is_finite()) || lambda_ce < 0.0 {
        return Err(FlowError::NonFinite);
    }
    Ok(LossBundle {
        ce,
        mse,
        lambda_ce,
        total: lambda_ce * ce + mse,
    })
}

/// One row of the self-check table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub worst: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    fn new(name: &'static str, worst: f64, tolerance: f64) -> Self {
        Check {
            name,
            worst,
            tolerance,
            pass: worst <= tolerance,
        }
    }
}

fn random_vec(r: &mut impl rand::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

/// Velocity check: worst deviation of a central difference of the path
/// from the velocity target.
pub fn check_velocity_fd(instances: usize, h: f64, seed: u64) -> f64 {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = r.gen_range(1..=16);
        let (z0, z1) = (random_vec(&mut r, n), random_vec(&mut r, n));
        let t = r.gen_range(h..1.0 - h);
        let hi = interpolate(&z0, &z1, t + h).unwrap();
        let lo = interpolate(&z0, &z1, t - h).unwrap();
        let v = velocity_target(&z0, &z1).unwrap();
        for i in 0..n {
            worst = worst.max(((hi[i] - lo[i]) / (2.0 * h) - v[i]).abs());
        }
    }
    worst
}

/// Gradient check: worst relative error of the analytic MSE gradient
/// against central differences of the loss.
pub fn check_mse_grad(instances: usize, seed: u64) -> f64 {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = r.gen_range(1..=16);
        let (z0, z1, pred) = (random_vec(&mut r, n), random_vec(&mut r, n), random_vec(&mut r, n));
        let g = mse_flow_grad(&pred, &z0, &z1).unwrap();
        let h = 1e-5;
        let fd: Vec<f64> = (0..n)
            .map(|i| {
                let mut p = pred.clone();
                p[i] += h;
                let up = mse_flow_loss(&p, &z0, &z1).unwrap();
                p[i] -= 2.0 * h;
                let down = mse_flow_loss(&p, &z0, &z1).unwrap();
                (up - down) / (2.0 * h)
            })
            .collect();
        let diff = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        worst = worst.max(diff / norm);
    }
    worst
}

/// Runs every numerical check.
pub fn verify(seed: u64) -> Vec<Check> {
    let ce_uniform = masked_ce_loss(&[vec![0.0; 4]], &[2], &[true]).unwrap();
    let ce_certain = masked_ce_loss(&[vec![0.0, 800.0, 0.0]], &[1], &[true]).unwrap();
    let ce_empty = masked_ce_loss(&[vec![1.0, 2.0]], &[0], &[false]).unwrap();
    let z0 = [0.25, -3.5, 1e-300, -0.0];
    let z1 = [7.0, 0.125, -2.0, 5.0];
    let ends = interpolate(&z0, &z1, 1.0).unwrap().iter().zip(&z0).all(|(a, b)| a.to_bits() == b.to_bits())
        && interpolate(&z0, &z1, 0.0).unwrap().iter().zip(&z1).all(|(a, b)| a.to_bits() == b.to_bits());
    let offset = {
        let v = velocity_target(&z0, &z1).unwrap();
        let p: Vec<f64> = v.iter().map(|x| x + 0.01).collect();
        (mse_flow_loss(&p, &z0, &z1).unwrap() - 1e-4).abs()
    };
    let bundle = total_loss(2.0, 3.0, 1.0).unwrap().total;
    vec![
        Check::new("velocity-central-difference", check_velocity_fd(100, 1e-5, seed), 1e-9),
        Check::new("mse-gradient-relative", check_mse_grad(100, seed ^ 1), 1e-5),
        Check::new("ce-uniform-4", (ce_uniform - 4f64.ln()).abs(), 1e-12),
        Check::new("ce-certain", ce_certain.abs(), 1e-12),
        Check::new("ce-empty-mask", ce_empty.abs(), 0.0),
        Check::new("interpolate-endpoints", if ends { 0.0 } else { 1.0 }, 0.0),
        Check::new("mse-constant-offset", offset, 1e-15),
        Check::new("total-weighted", (bundle - 5.0).abs(), 0.0),
    ]
}

pub fn render_table(checks: &[Check]) -> String {
    let mut s = format!("{:<30} {:>12} {:>10}  result\n", "check", "worst", "tolerance");
    for c in checks {
        s.push_str(&format!(
            "{:<30} {:>12.3e} {:>10.1e}  {}\n",
            c.name,
            c.worst,
            c.tolerance,
            if c.pass { "pass" } else { "FAIL" }
        ));
    }
    s
}
