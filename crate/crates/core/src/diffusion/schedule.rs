//! Linear noise schedule, forward noising and finite-difference velocity.

use lipcycle_grad::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    /// `betas[d-1]` is the variance added at step `d`.
    pub betas: Vec<f64>,
    /// Cumulative products, `alpha[0] = 1`, length `steps + 1`.
    pub alpha: Vec<f64>,
}

impl NoiseSchedule {
    pub fn alpha(&self, d: usize) -> f64 {
        self.alpha[d]
    }
}

pub fn make_linear_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(invalid!("diffusion.steps must be at least 1"));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                BETA_START
            } else {
                BETA_START + (BETA_END - BETA_START) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut alpha = Vec::with_capacity(steps + 1);
    alpha.push(1.0);
    for b in &betas {
        let prev = *alpha.last().expect("non-empty");
        alpha.push(prev * (1.0 - b));
    }
    Ok(NoiseSchedule { steps, betas, alpha })
}

/// `sqrt(alpha[d])·x + sqrt(1-alpha[d])·noise`; `d = 0` returns `x` unchanged.
pub fn noising(x: &Mat, d: usize, schedule: &NoiseSchedule, noise: &Mat) -> Result<Mat> {
    if d > schedule.steps {
        return Err(invalid!("diffusion step {d} outside [0, {}]", schedule.steps));
    }
    if x.dim() != noise.dim() {
        return Err(invalid!("noise shape {:?} does not match data shape {:?}", noise.dim(), x.dim()));
    }
    if d == 0 {
        return Ok(x.clone());
    }
    let a = schedule.alpha[d];
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(Mat::from_shape_fn(x.dim(), |(i, j)| sa * x[[i, j]] + sn * noise[[i, j]]))
}

/// Forward differences `seq[t+1] - seq[t]`.
pub fn velocity(seq: &Mat) -> Result<Mat> {
    let t = seq.nrows();
    if t < 2 {
        return Err(invalid!("velocity needs at least 2 frames, got {t}"));
    }
    Ok(&seq.slice(ndarray::s![1.., ..]) - &seq.slice(ndarray::s![..t - 1, ..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn two_step_schedule_by_hand() {
        let s = make_linear_schedule(2).unwrap();
        assert_eq!(s.alpha[0], 1.0);
        assert!((s.alpha[2] - (1.0 - 1e-4) * (1.0 - 0.02)).abs() < 1e-15);
        assert!((s.alpha[2] - 0.979902).abs() < 1e-12);
        assert!(matches!(make_linear_schedule(0), Err(crate::Error::InvalidArgument(_))));
    }

    #[test]
    fn alpha_decreases_and_betas_span_the_range() {
        let s = make_linear_schedule(100).unwrap();
        assert_eq!(s.alpha.len(), 101);
        assert!(s.alpha.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha[1..].iter().all(|a| *a > 0.0 && *a <= 1.0));
        assert_eq!(s.betas[0], BETA_START);
        assert!((s.betas[99] - BETA_END).abs() < 1e-15);
    }

    #[test]
    fn noising_edge_cases() {
        let mut r = seed::rng(1);
        let x = seed::standard_normal(&mut r, 4, 3);
        let n = seed::standard_normal(&mut r, 4, 3);
        let s = make_linear_schedule(10).unwrap();
        assert_eq!(noising(&x, 0, &s, &n).unwrap(), x);
        let dead = NoiseSchedule {
            steps: 1,
            betas: vec![1.0],
            alpha: vec![1.0, 0.0],
        };
        assert_eq!(noising(&x, 1, &dead, &n).unwrap(), n);
        assert!(noising(&x, 11, &s, &n).is_err());
        assert!(noising(&x, 1, &s, &Mat::zeros((3, 3))).is_err());
    }

    #[test]
    fn monte_carlo_marginals() {
        let s = make_linear_schedule(100).unwrap();
        let mut r = seed::rng(9);
        for (case, d) in [7usize, 50, 100].into_iter().enumerate() {
            let x = seed::standard_normal(&mut r, 2, 3) * (1.0 + case as f64);
            let n = 10_000;
            let mut sum = Mat::zeros((2, 3));
            let mut sq = Mat::zeros((2, 3));
            for _ in 0..n {
                let e = seed::standard_normal(&mut r, 2, 3);
                let y = noising(&x, d, &s, &e).unwrap();
                sum += &y;
                sq += &y.mapv(|v| v * v);
            }
            let a = s.alpha[d];
            let var_true = 1.0 - a;
            let sigma = (var_true / n as f64).sqrt();
            let mut pooled = 0.0;
            for ((i, j), &sm) in sum.indexed_iter() {
                let mean = sm / n as f64;
                assert!((mean - a.sqrt() * x[[i, j]]).abs() < 4.0 * sigma, "d={d} mean {mean}");
                pooled += sq[[i, j]] / n as f64 - mean * mean;
            }
            let var = pooled / sum.len() as f64;
            assert!((var / var_true - 1.0).abs() < 0.02, "d={d} var {var} vs {var_true}");
        }
    }

    #[test]
    fn velocity_matches_a_loop() {
        let mut r = seed::rng(2);
        let x = seed::standard_normal(&mut r, 5, 3);
        let v = velocity(&x).unwrap();
        for t in 0..4 {
            for j in 0..3 {
                assert_eq!(v[[t, j]], x[[t + 1, j]] - x[[t, j]]);
            }
        }
        let ramp = Mat::from_shape_fn((6, 2), |(t, _)| 0.5 * t as f64);
        assert!(velocity(&ramp).unwrap().iter().all(|v| *v == 0.5));
        assert!(velocity(&Mat::zeros((1, 2))).is_err());
    }
}
